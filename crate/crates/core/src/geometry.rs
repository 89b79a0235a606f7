//! Pinhole projection of LiDAR points onto the image plane and the
//! down-sampled feature plane.
//!
//! Axis convention: `u` is the horizontal (column) pixel coordinate and `v`
//! the vertical (row) one. Feature-grid coordinates are obtained by scaling
//! `u' = u * w / W` and `v' = v * h / H`. A grid cell is addressed as
//! `(row, col) = (round(v), round(u))`.

use nalgebra::{Matrix2, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

/// Camera-frame depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// 3x4 intrinsics (pixels).
    pub intrinsics: Matrix3x4<f64>,
    /// 4x4 extrinsics, LiDAR frame to camera frame.
    pub extrinsics: Matrix4<f64>,
    pub image_height: usize,
    pub image_width: usize,
    pub feature_height: usize,
    pub feature_width: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3x4<f64>,
        extrinsics: Matrix4<f64>,
        image_size: (usize, usize),
        feature_size: (usize, usize),
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            extrinsics,
            image_height: image_size.0,
            image_width: image_size.1,
            feature_height: feature_size.0,
            feature_width: feature_size.1,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Axis-aligned pinhole camera placed at `position` in the LiDAR frame,
    /// looking down +z with x right and y down.
    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        image_size: (usize, usize),
        feature_size: (usize, usize),
        position: [f64; 3],
    ) -> Result<Self> {
        #[rustfmt::skip]
        let k = Matrix3x4::new(
            fx, 0.0, cx, 0.0,
            0.0, fy, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        let mut t = Matrix4::identity();
        t[(0, 3)] = -position[0];
        t[(1, 3)] = -position[1];
        t[(2, 3)] = -position[2];
        Self::new(k, t, image_size, feature_size)
    }

    pub fn validate(&self) -> Result<()> {
        let (hh, ww, h, w) = (
            self.image_height,
            self.image_width,
            self.feature_height,
            self.feature_width,
        );
        if h < 1 || w < 1 || hh < h || ww < w {
            return Err(Error::invalid(format!(
                "camera sizes must satisfy H >= h >= 1 and W >= w >= 1, got H={hh} W={ww} h={h} w={w}"
            )));
        }
        let bottom = self.extrinsics.row(3);
        let expected = [0.0, 0.0, 0.0, 1.0];
        if bottom
            .iter()
            .zip(expected)
            .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::invalid(format!(
                "extrinsic bottom row must be (0,0,0,1), got {:?}",
                bottom.iter().collect::<Vec<_>>()
            )));
        }
        if self
            .intrinsics
            .iter()
            .chain(self.extrinsics.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("camera matrices".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self, plane: GridPlane) -> (usize, usize) {
        match plane {
            GridPlane::Image => (self.image_height, self.image_width),
            GridPlane::Feature => (self.feature_height, self.feature_width),
        }
    }

    /// Camera centre expressed in the LiDAR frame.
    pub fn center(&self) -> Option<Vector3<f64>> {
        let inv = self.extrinsics.try_inverse()?;
        Some(Vector3::new(inv[(0, 3)], inv[(1, 3)], inv[(2, 3)]))
    }

    /// Inverts [`project_point`]: recovers the LiDAR-frame point whose
    /// camera-frame depth is `depth` and which lands on pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Option<Vector3<f64>> {
        let k = &self.intrinsics;
        let a = Matrix2::new(k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]);
        let b = Vector2::new(
            u * depth - k[(0, 2)] * depth - k[(0, 3)],
            v * depth - k[(1, 2)] * depth - k[(1, 3)],
        );
        let xy = a.try_inverse()? * b;
        let cam = Vector4::new(xy[0], xy[1], depth, 1.0);
        let world = self.extrinsics.try_inverse()? * cam;
        Some(Vector3::new(world[0], world[1], world[2]))
    }

    /// Direction (camera frame, unnormalised) of the ray through pixel `(u, v)`,
    /// scaled so its z component is 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        let p = self.unproject(u, v, 1.0)?;
        let c = self.center()?;
        Some(p - c)
    }
}

/// Which grid a projected point is snapped onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPlane {
    Image,
    Feature,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("point cloud row {i}")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0], p[1], p[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point_index: usize,
    /// Pixel column.
    pub u: f64,
    /// Pixel row.
    pub v: f64,
    /// Feature-grid column.
    pub u_feat: f64,
    /// Feature-grid row.
    pub v_feat: f64,
    /// Camera-frame z, metres.
    pub depth: f64,
}

impl Projection {
    /// Rounded `(row, col)` on the selected grid, clamped into `rows x cols`.
    /// The flag reports whether clamping was needed.
    pub fn cell(&self, plane: GridPlane, rows: usize, cols: usize) -> (usize, usize, bool) {
        let (x, y) = match plane {
            GridPlane::Image => (self.u, self.v),
            GridPlane::Feature => (self.u_feat, self.v_feat),
        };
        let (col, cc) = snap(x, cols);
        let (row, rc) = snap(y, rows);
        (row, col, cc || rc)
    }
}

fn snap(x: f64, n: usize) -> (usize, bool) {
    let r = x.round();
    if r < 0.0 {
        (0, true)
    } else if r as usize >= n {
        (n - 1, true)
    } else {
        (r as usize, false)
    }
}

/// Grid of optional scalars; `mask[i]` is true exactly when a value is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl SparseGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            mask: vec![false; height * width],
        }
    }

    /// Builds a grid from dense values and a mask; values under a false mask
    /// are discarded (stored as 0).
    pub fn from_parts(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || mask.len() != height * width {
            return Err(Error::shape(format!(
                "sparse grid {height}x{width} needs {} cells, got {} values and {} mask entries",
                height * width,
                values.len(),
                mask.len()
            )));
        }
        let values = values
            .into_iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.mask[i].then(|| self.values[i])
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = row * self.width + col;
        self.values[i] = value;
        self.mask[i] = true;
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        let i = row * self.width + col;
        self.values[i] = 0.0;
        self.mask[i] = false;
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    /// Row-major values with absent cells reported as 0.
    pub fn dense(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i / w, i % w, self.values[i]))
    }
}

/// Projects a single LiDAR-frame point. Returns `None` when the point is
/// behind the camera or lands outside `[0, W) x [0, H)`.
pub fn project_point(camera: &CameraModel, point: [f64; 3]) -> Option<Projection> {
    project_indexed(camera, point, 0)
}

fn project_indexed(camera: &CameraModel, point: [f64; 3], index: usize) -> Option<Projection> {
    let homog = Vector4::new(point[0], point[1], point[2], 1.0);
    let cam = camera.extrinsics * homog;
    let depth = cam[2];
    if !(depth > MIN_DEPTH) {
        return None;
    }
    let pix = camera.intrinsics * cam;
    let u = pix[0] / depth;
    let v = pix[1] / depth;
    let (hh, ww) = (camera.image_height as f64, camera.image_width as f64);
    if !(u >= 0.0 && u < ww && v >= 0.0 && v < hh) {
        return None;
    }
    Some(Projection {
        point_index: index,
        u,
        v,
        u_feat: u * camera.feature_width as f64 / ww,
        v_feat: v * camera.feature_height as f64 / hh,
        depth,
    })
}

/// Projects every point of the cloud, keeping the visible ones in index order.
pub fn project_cloud(camera: &CameraModel, cloud: &PointCloud) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_indexed(camera, [p[0], p[1], p[2]], i))
        .collect()
}

/// Scatters projection depths onto the chosen grid; the nearest depth wins
/// when several points share a cell.
pub fn sparse_depth_from_projections(
    projections: &[Projection],
    plane: GridPlane,
    rows: usize,
    cols: usize,
) -> SparseGrid {
    let mut grid = SparseGrid::empty(rows, cols);
    for p in projections {
        let (r, c, _) = p.cell(plane, rows, cols);
        match grid.get(r, c) {
            Some(d) if d <= p.depth => {}
            _ => grid.set(r, c, p.depth),
        }
    }
    grid
}

pub fn build_sparse_depth_map(camera: &CameraModel, cloud: &PointCloud, plane: GridPlane) -> SparseGrid {
    let (rows, cols) = camera.grid_size(plane);
    sparse_depth_from_projections(&project_cloud(camera, cloud), plane, rows, cols)
}
