//! Voxel binning of the point cloud and inverse-distance interpolation of
//! voxel features back onto arbitrary query points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::knn::KdTree;

/// Regulariser in the inverse-distance weights `1 / (d + eps)`.
pub const INTERP_EPS: f64 = 1e-8;

/// Neighbour count used for point-feature interpolation.
pub const INTERP_NEIGHBOURS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridConfig {
    /// Edge length of a voxel, metres.
    pub resolution: f64,
    pub min_bound: [f64; 3],
    pub max_bound: [f64; 3],
    pub max_points_per_voxel: usize,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            min_bound: [-50.0, 6.0, -7.0],
            max_bound: [50.0, 106.0, 11.0],
            max_points_per_voxel: 5,
        }
    }
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::invalid(format!("voxel resolution must be > 0, got {}", self.resolution)));
        }
        for a in 0..3 {
            if !(self.min_bound[a] < self.max_bound[a]) {
                return Err(Error::invalid(format!(
                    "voxel bounds axis {a}: min {} must be < max {}",
                    self.min_bound[a], self.max_bound[a]
                )));
            }
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::invalid("max_points_per_voxel must be >= 1"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min_bound[a] && p[a] < self.max_bound[a])
    }

    pub fn voxel_of(&self, p: [f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.resolution).floor() as i64,
            (p[1] / self.resolution).floor() as i64,
            (p[2] / self.resolution).floor() as i64,
        ]
    }

    pub fn center_of(&self, idx: [i64; 3]) -> [f64; 3] {
        [
            (idx[0] as f64 + 0.5) * self.resolution,
            (idx[1] as f64 + 0.5) * self.resolution,
            (idx[2] as f64 + 0.5) * self.resolution,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub index: [i64; 3],
    /// Retained point indices, ascending.
    pub members: Vec<usize>,
}

/// Occupied voxels sorted by index triple, plus optional `N1 x c_p` features.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub config: VoxelGridConfig,
    pub voxels: Vec<Voxel>,
    channels: usize,
    features: Vec<f64>,
    tree: Option<KdTree>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn has_features(&self) -> bool {
        self.channels > 0
    }

    pub fn feature(&self, voxel: usize) -> &[f64] {
        &self.features[voxel * self.channels..(voxel + 1) * self.channels]
    }

    pub fn center(&self, voxel: usize) -> [f64; 3] {
        self.config.center_of(self.voxels[voxel].index)
    }

    pub fn find(&self, index: [i64; 3]) -> Option<usize> {
        self.voxels.binary_search_by(|v| v.index.cmp(&index)).ok()
    }

    /// Attaches externally computed features (one row per voxel, in order).
    pub fn with_features(mut self, channels: usize, features: Vec<f64>) -> Result<Self> {
        if channels == 0 || features.len() != channels * self.voxels.len() {
            return Err(Error::shape(format!(
                "{} voxels x {channels} channels needs {} values, got {}",
                self.voxels.len(),
                channels * self.voxels.len(),
                features.len()
            )));
        }
        self.channels = channels;
        self.features = features;
        self.tree = Some(KdTree::build((0..self.voxels.len()).map(|i| self.center(i)).collect()));
        Ok(self)
    }

    /// Up to three nearest occupied voxels with their normalised weights.
    pub fn interpolation_weights(&self, query: [f64; 3]) -> Result<Vec<(usize, f64)>> {
        let tree = match &self.tree {
            Some(t) if !t.is_empty() => t,
            _ => return Err(Error::Empty("voxel grid has no featurised voxels".into())),
        };
        let nn = tree.nearest(query, INTERP_NEIGHBOURS);
        let raw: Vec<f64> = nn.iter().map(|&(_, d2)| 1.0 / (d2.sqrt() + INTERP_EPS)).collect();
        let total: f64 = raw.iter().sum();
        Ok(nn.iter().zip(raw).map(|(&(i, _), w)| (i, w / total)).collect())
    }

    /// Text dump: header `N1 c_p r_l`, then `ix iy iz f1 .. f_cp` per voxel.
    pub fn dump(&self) -> String {
        let mut s = format!("{} {} {}\n", self.voxels.len(), self.channels, self.config.resolution);
        for (i, v) in self.voxels.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v.index[0], v.index[1], v.index[2]);
            if self.channels > 0 {
                for f in self.feature(i) {
                    let _ = write!(s, " {f}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Bins in-bounds points by `floor(coord / r)`. Within a voxel the first
/// `max_points_per_voxel` point indices are kept.
pub fn assign_voxels(cloud: &PointCloud, config: &VoxelGridConfig) -> Result<VoxelGrid> {
    config.validate()?;
    let mut map: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..cloud.len() {
        let p = cloud.xyz(i);
        if !config.contains(p) {
            continue;
        }
        let members = map.entry(config.voxel_of(p)).or_default();
        if members.len() < config.max_points_per_voxel {
            members.push(i);
        }
    }
    Ok(VoxelGrid {
        config: config.clone(),
        voxels: map.into_iter().map(|(index, members)| Voxel { index, members }).collect(),
        channels: 0,
        features: Vec::new(),
        tree: None,
    })
}

/// Fixed sinusoidal embedding of `(x, y, z, r)`.
///
/// Channel `k` reads coordinate `k % 4` at frequency `2^((k / 4) / 2 mod 8)`,
/// alternating sine and cosine every four channels.
#[derive(Debug, Clone, Copy)]
pub struct SinusoidalEncoder {
    pub channels: usize,
}

impl SinusoidalEncoder {
    pub fn encode(&self, p: &[f64; 4]) -> Vec<f64> {
        (0..self.channels)
            .map(|k| {
                let coord = p[k % 4];
                let band = k / 4;
                let freq = f64::powi(2.0, (band / 2) as i32 % 8);
                if band % 2 == 0 {
                    (coord * freq).sin()
                } else {
                    (coord * freq).cos()
                }
            })
            .collect()
    }
}

/// Averages `encoder` over each voxel's retained members.
pub fn featurize_voxels<F>(grid: VoxelGrid, cloud: &PointCloud, channels: usize, encoder: F) -> Result<VoxelGrid>
where
    F: Fn(&[f64; 4]) -> Vec<f64>,
{
    if channels == 0 {
        return Err(Error::invalid("voxel feature channels must be >= 1"));
    }
    let mut features = Vec::with_capacity(grid.voxels.len() * channels);
    for v in &grid.voxels {
        let mut acc = vec![0.0; channels];
        for &m in &v.members {
            let point = cloud
                .points
                .get(m)
                .ok_or_else(|| Error::shape(format!("voxel member {m} outside cloud of {}", cloud.len())))?;
            let enc = encoder(point);
            if enc.len() != channels {
                return Err(Error::shape(format!(
                    "encoder produced {} channels, expected {channels}",
                    enc.len()
                )));
            }
            for (a, e) in acc.iter_mut().zip(enc) {
                *a += e;
            }
        }
        let n = v.members.len() as f64;
        features.extend(acc.into_iter().map(|a| a / n));
    }
    grid.with_features(channels, features)
}

/// Inverse-distance blend of the three nearest voxel features.
pub fn interpolate_point_features(grid: &VoxelGrid, query: [f64; 3]) -> Result<Vec<f64>> {
    let weights = grid.interpolation_weights(query)?;
    let mut out = vec![0.0; grid.channels];
    for (v, w) in weights {
        for (o, f) in out.iter_mut().zip(grid.feature(v)) {
            *o += w * f;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(res: f64, max: usize) -> VoxelGridConfig {
        VoxelGridConfig {
            resolution: res,
            min_bound: [-10.0; 3],
            max_bound: [10.0; 3],
            max_points_per_voxel: max,
        }
    }

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| [p[0], p[1], p[2], 0.5]).collect()).unwrap()
    }

    #[test]
    fn floor_semantics() {
        let c = cfg(0.1, 5);
        assert_eq!(c.voxel_of([0.05, 0.05, 0.05]), [0, 0, 0]);
        assert_eq!(c.voxel_of([-0.05, 0.0, 0.0]), [-1, 0, 0]);
    }

    #[test]
    fn default_config_uses_reported_bounds() {
        let c = VoxelGridConfig::default();
        assert_eq!(c.resolution, 0.1);
        assert_eq!(c.max_points_per_voxel, 5);
        assert_eq!(c.min_bound, [-50.0, 6.0, -7.0]);
        assert_eq!(c.max_bound, [50.0, 106.0, 11.0]);
        c.validate().unwrap();
    }

    #[test]
    fn first_points_kept_when_voxel_full() {
        let pts: Vec<[f64; 3]> = (0..7).map(|i| [0.01 * i as f64, 0.02, 0.03]).collect();
        let g = assign_voxels(&cloud(&pts), &cfg(0.1, 5)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].members, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn out_of_bounds_dropped() {
        let g = assign_voxels(&cloud(&[[20.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), &cfg(0.5, 5)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].members, vec![1]);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(cfg(0.0, 5).validate().is_err());
        assert!(cfg(0.1, 0).validate().is_err());
        let mut c = cfg(0.1, 1);
        c.min_bound[2] = 20.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn featurize_means() {
        let enc = |p: &[f64; 4]| vec![p[0], p[1] * 2.0];
        let pc = cloud(&[[0.1, 0.2, 0.0], [0.3, 0.4, 0.0], [5.0, 5.0, 5.0]]);
        let g = featurize_voxels(assign_voxels(&pc, &cfg(1.0, 5)).unwrap(), &pc, 2, enc).unwrap();
        assert!((g.feature(0)[0] - 0.2).abs() < 1e-15 && (g.feature(0)[1] - 0.6).abs() < 1e-15);
        assert_eq!(g.feature(1), &[5.0, 10.0]);

        let bad = featurize_voxels(assign_voxels(&pc, &cfg(1.0, 5)).unwrap(), &pc, 3, enc);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn query_at_center_returns_voxel_feature() {
        let pc = cloud(&[[0.05, 0.05, 0.05], [0.55, 0.05, 0.05], [0.05, 0.55, 0.05], [0.95, 0.95, 0.95]]);
        let enc = SinusoidalEncoder { channels: 8 };
        let g = featurize_voxels(assign_voxels(&pc, &cfg(0.1, 5)).unwrap(), &pc, 8, |p| enc.encode(p)).unwrap();
        for v in 0..g.len() {
            let out = interpolate_point_features(&g, g.center(v)).unwrap();
            for (a, b) in out.iter().zip(g.feature(v)) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn equidistant_neighbours_share_weight() {
        // Voxel centres at +-1 on x and +1 on y around the origin query.
        let feats = vec![1.0, 4.0, 7.0];
        let c = VoxelGridConfig {
            resolution: 2.0,
            ..cfg(2.0, 5)
        };
        let pc = cloud(&[[1.0, -1.0, -1.0], [-3.0, -1.0, -1.0], [-1.0, 1.0, -1.0]]);
        let g = assign_voxels(&pc, &c).unwrap().with_features(1, feats).unwrap();
        let q = [-1.0, -1.0, -1.0];
        let w = g.interpolation_weights(q).unwrap();
        for (_, wi) in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
        let out = interpolate_point_features(&g, q).unwrap();
        assert!((out[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_three_voxels() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let g = assign_voxels(&pc, &cfg(0.5, 5)).unwrap().with_features(1, vec![2.0, 6.0]).unwrap();
        let w = g.interpolation_weights([0.5, 0.25, 0.25]).unwrap();
        assert_eq!(w.len(), 2);
        let empty = assign_voxels(&PointCloud::default(), &cfg(0.5, 5)).unwrap();
        assert!(empty.interpolation_weights([0.0; 3]).is_err());
    }

    #[test]
    fn dump_format() {
        let pc = cloud(&[[0.0, 0.0, 0.0]]);
        let g = assign_voxels(&pc, &cfg(0.5, 5)).unwrap().with_features(2, vec![1.5, -2.0]).unwrap();
        assert_eq!(g.dump(), "1 2 0.5\n0 0 0 1.5 -2\n");
    }
}
