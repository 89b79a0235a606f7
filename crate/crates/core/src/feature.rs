use crate::error::{Error, Result};

/// Dense channel-major `c x h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature map dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        self.data[(c * self.height + row) * self.width + col] = value;
    }

    /// Channel vector at a cell.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, row, col)).collect()
    }

    pub fn set_cell(&mut self, row: usize, col: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels);
        for (c, &v) in values.iter().enumerate() {
            self.set(c, row, col, v);
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Flattens to a cell-major `(h*w) x c` matrix.
    pub fn to_cell_major(&self) -> Vec<Vec<f64>> {
        let n = self.cells();
        (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).collect())
            .collect()
    }

    /// Inverse of [`FeatureMap::to_cell_major`].
    pub fn from_cell_major(rows: &[Vec<f64>], height: usize, width: usize) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.len() != height * width || rows.iter().any(|r| r.len() != channels) {
            return Err(Error::shape("ragged or mis-sized cell-major matrix"));
        }
        let n = height * width;
        let mut data = vec![0.0; channels * n];
        for (i, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                data[c * n + i] = v;
            }
        }
        Self::from_vec(channels, height, width, data)
    }
}
