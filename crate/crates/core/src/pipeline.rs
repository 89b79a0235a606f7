//! End-to-end fusion over `n` camera views and one LiDAR cloud.
//!
//! Image branch, per view: project → scatter → bounding rectangle → hole
//! filling → fill outside → alignment loss → concat → depth residual embed →
//! attention → heads. Point branch: voxel features → per-point interpolation
//! → concat with the mean of the fused image features gathered at the point's
//! projected cell in every view that sees it → point head; voxel head on the
//! voxel features.
//!
//! The heads are fixed seeded linear classifiers. They exercise the dataflow
//! and the losses; nothing here is trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::ddpm::{self, ConvStack};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{project_cloud, sparse_depth_from_projections, CameraModel, GridPlane, PointCloud, SparseGrid};
use crate::losses::{
    self, HeadLoss, ImageLossTerms, LabelMap, LogitMap, PointLoss, IGNORE_LABEL,
};
use crate::pffm::{self, AttentionParams, BoundingRect, ScatterStats};
use crate::voxel::{self, SinusoidalEncoder, VoxelGrid};

/// Dense `out x in` classifier applied per cell or per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `out x in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn seeded(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (in_channels as f64).sqrt();
        let weights = (0..in_channels * out_channels).map(|_| rng.gen_range(-s..s)).collect();
        let bias = (0..out_channels).map(|_| rng.gen_range(-0.1..0.1)).collect();
        LinearHead {
            in_channels,
            out_channels,
            weights,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_channels)
            .map(|o| {
                let row = &self.weights[o * self.in_channels..(o + 1) * self.in_channels];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn apply_map(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if map.channels != self.in_channels {
            return Err(Error::shape(format!(
                "head expects {} channels, map has {}",
                self.in_channels, map.channels
            )));
        }
        let rows: Vec<Vec<f64>> = map.to_cell_major().iter().map(|c| self.apply(c)).collect();
        FeatureMap::from_cell_major(&rows, map.height, map.width)
    }

    /// Class-major logits for a batch of feature rows.
    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Result<LogitMap> {
        let n = rows.len();
        let mut data = vec![0.0; self.out_channels * n];
        for (i, r) in rows.iter().enumerate() {
            if r.len() != self.in_channels {
                return Err(Error::shape(format!("head expects {} channels, row has {}", self.in_channels, r.len())));
            }
            for (k, v) in self.apply(r).into_iter().enumerate() {
                data[k * n + i] = v;
            }
        }
        LogitMap::new(self.out_channels, n, data)
    }
}

/// All seeded parameters of the fusion network.
#[derive(Debug, Clone)]
pub struct Model {
    pub attention: AttentionParams,
    pub depth_embed: ConvStack,
    pub fused_head: LinearHead,
    pub image_head: LinearHead,
    pub point_head: LinearHead,
    pub voxel_head: LinearHead,
}

impl Model {
    pub fn seeded(cfg: &PipelineConfig) -> Result<Self> {
        let s = cfg.seed;
        Ok(Model {
            attention: AttentionParams::seeded(cfg.c_p + cfg.c_img, cfg.c_q, cfg.c_k, cfg.c_v, s)?,
            depth_embed: ConvStack::seeded(cfg.conv_hidden, cfg.c_v, s.wrapping_add(1)),
            fused_head: LinearHead::seeded(cfg.c_v, cfg.num_classes, s.wrapping_add(2)),
            image_head: LinearHead::seeded(cfg.c_img + cfg.c_v, cfg.num_classes, s.wrapping_add(3)),
            point_head: LinearHead::seeded(cfg.c_p + cfg.c_v, cfg.num_classes, s.wrapping_add(4)),
            voxel_head: LinearHead::seeded(cfg.c_p, cfg.num_classes, s.wrapping_add(5)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ViewInput {
    /// `c_img x h x w` image features.
    pub features: FeatureMap,
    /// `1 x h x w` (or `1 x H x W`, sampled at cell centres) predicted depth.
    pub predicted_depth: FeatureMap,
    pub camera: CameraModel,
    /// `h x w` cell labels.
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DepthDiffStats {
    pub valid_cells: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewDiagnostics {
    /// Points in front of the camera.
    pub projections: usize,
    pub scatter: ScatterStats,
    /// `None` when nothing projected and the image features stood in for the
    /// point map.
    pub rect: Option<BoundingRect>,
    pub degenerate: bool,
    pub align_loss: f64,
    pub depth_diff: DepthDiffStats,
}

#[derive(Debug, Clone)]
pub struct ViewOutput {
    /// `c_v x h x w` attention output after the depth bias and layer norm.
    pub fused: FeatureMap,
    /// `K x h x w` logits from the image head.
    pub image_logits: FeatureMap,
    /// `K x h x w` logits from the fused-feature head.
    pub fused_logits: FeatureMap,
    pub depth_diff: SparseGrid,
    pub diagnostics: ViewDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub image: Option<ImageLossTerms>,
    pub image_total: Option<f64>,
    pub point: Option<PointLoss>,
    pub total: Option<f64>,
}

impl LossReport {
    /// One `name value` line per term, values printed round-trip exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64| s.push_str(&format!("{k} {v:?}\n"));
        if let Some(img) = &self.image {
            put("img_ce", img.center.ce);
            put("img_lovasz", img.center.lovasz);
            put("fused_ce", img.fused_ce);
            put("align", img.align);
            for (i, side) in img.sides.iter().enumerate() {
                put(&format!("side{i}_ce"), side.ce);
                put(&format!("side{i}_lovasz"), side.lovasz);
            }
        }
        if let Some(t) = self.image_total {
            put("image_total", t);
        }
        if let Some(p) = &self.point {
            put("point_ce", p.point.ce);
            put("point_lovasz", p.point.lovasz);
            put("voxel_ce", p.voxel.ce);
            put("voxel_lovasz", p.voxel.lovasz);
            put("point_total", p.total);
        }
        if let Some(t) = self.total {
            put("total", t);
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PointDiagnostics {
    pub points: usize,
    pub voxels: usize,
    /// Points seen (unclamped) by at least one view.
    pub seen: usize,
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub views: Vec<ViewOutput>,
    /// `K x N`; `None` for an empty cloud.
    pub point_logits: Option<LogitMap>,
    /// `K x V`; `None` when no voxel is occupied.
    pub voxel_logits: Option<LogitMap>,
    pub voxel_labels: Option<LabelMap>,
    pub losses: LossReport,
    pub points: PointDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics<'a> {
    pub views: Vec<&'a ViewDiagnostics>,
    pub points: &'a PointDiagnostics,
}

impl FusionResult {
    pub fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics {
            views: self.views.iter().map(|v| &v.diagnostics).collect(),
            points: &self.points,
        }
    }
}

/// `1 x h x w` predicted depth from either the feature or the image grid.
fn depth_on_feature_grid(depth: &FeatureMap, camera: &CameraModel) -> Result<FeatureMap> {
    let (h, w) = camera.grid_size(GridPlane::Feature);
    let (big_h, big_w) = camera.grid_size(GridPlane::Image);
    if depth.channels != 1 {
        return Err(Error::shape(format!("predicted depth has {} channels, expected 1", depth.channels)));
    }
    if (depth.height, depth.width) == (h, w) {
        return Ok(depth.clone());
    }
    if (depth.height, depth.width) != (big_h, big_w) {
        return Err(Error::shape(format!(
            "predicted depth is {}x{}, expected {h}x{w} or {big_h}x{big_w}",
            depth.height, depth.width
        )));
    }
    // Feature cell r is centred on image row r * H / h.
    let pick = |i: usize, n: usize, big: usize| ((i as f64 * big as f64 / n as f64).round() as usize).min(big - 1);
    Ok(FeatureMap::from_fn(1, h, w, |_, r, c| {
        depth.get(0, pick(r, h, big_h), pick(c, w, big_w))
    }))
}

fn diff_stats(diff: &SparseGrid) -> DepthDiffStats {
    let vals: Vec<f64> = diff.iter_valid().map(|(_, _, v)| v.abs()).collect();
    DepthDiffStats {
        valid_cells: vals.len(),
        mean_abs: if vals.is_empty() {
            0.0
        } else {
            losses::pairwise_sum(&vals) / vals.len() as f64
        },
        max_abs: vals.iter().copied().fold(0.0, f64::max),
    }
}

fn run_view(view: &ViewInput, point_features: &[Vec<f64>], cloud: &PointCloud, model: &Model, cfg: &PipelineConfig) -> Result<ViewOutput> {
    view.camera.validate()?;
    let (h, w) = view.camera.grid_size(GridPlane::Feature);
    let img = &view.features;
    if img.shape() != (cfg.c_img, h, w) {
        return Err(Error::shape(format!(
            "image features are {:?}, expected ({}, {h}, {w})",
            img.shape(),
            cfg.c_img
        )));
    }
    img.check_finite("image features")?;

    let projs = project_cloud(&view.camera, cloud);
    let feats: Vec<Vec<f64>> = projs.iter().map(|p| point_features[p.point_index].clone()).collect();
    let scatter = pffm::scatter_point_features(&projs, &feats, cfg.c_p, h, w)?;

    let (filled, rect) = match pffm::compute_bounding_rectangle(&projs, h, w) {
        Ok(rect) => {
            let completed = pffm::interpolate_missing(&scatter.map, &scatter.mask, &rect)?;
            (pffm::fill_outside(&completed, img, &rect)?, Some(rect))
        }
        Err(Error::Empty(_)) => (img.clone(), None),
        Err(e) => return Err(e),
    };
    let (align, _) = pffm::alignment_loss(&filled, img)?;
    let concat = pffm::fuse_concat(&filled, img)?;

    let sparse = sparse_depth_from_projections(&projs, GridPlane::Feature, h, w);
    let predicted = depth_on_feature_grid(&view.predicted_depth, &view.camera)?;
    let diff = ddpm::log_depth_difference(&predicted, &sparse)?;
    let d_hat = if cfg.use_depth_difference {
        ddpm::conv2_embed(&diff, &model.depth_embed)?
    } else {
        FeatureMap::zeros(cfg.c_v, h, w)
    };
    let att = ddpm::attend_with_depth(&concat, &model.attention, &d_hat, &cfg.attention_options())?;
    let fused = att.fused;

    let fused_logits = model.fused_head.apply_map(&fused)?;
    let image_logits = model.image_head.apply_map(&pffm::fuse_concat(img, &fused)?)?;

    Ok(ViewOutput {
        diagnostics: ViewDiagnostics {
            projections: projs.len(),
            scatter: scatter.stats,
            degenerate: rect.is_none(),
            rect,
            align_loss: align,
            depth_diff: diff_stats(&diff),
        },
        fused,
        image_logits,
        fused_logits,
        depth_diff: diff,
    })
}

/// Most frequent non-ignored member label; ties go to the smaller class.
fn majority_label(members: &[usize], labels: &[u8], classes: usize) -> u8 {
    let mut counts = vec![0usize; classes];
    for &m in members {
        let l = labels[m];
        if (l as usize) < classes {
            counts[l as usize] += 1;
        }
    }
    let mut best: Option<usize> = None;
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |b| c > counts[b]) {
            best = Some(k);
        }
    }
    best.map_or(IGNORE_LABEL, |b| b as u8)
}

fn check_inputs(views: &[ViewInput], cloud: &PointCloud, point_labels: Option<&LabelMap>, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    if views.len() != cfg.n_views {
        return Err(Error::invalid(format!("config expects {} views, got {}", cfg.n_views, views.len())));
    }
    let labelled = views.iter().filter(|v| v.labels.is_some()).count();
    if labelled != 0 && labelled != views.len() {
        return Err(Error::invalid(format!("{labelled} of {} views carry labels; need all or none", views.len())));
    }
    for (i, v) in views.iter().enumerate() {
        if let Some(l) = &v.labels {
            let (h, w) = v.camera.grid_size(GridPlane::Feature);
            if (l.height, l.width) != (h, w) {
                return Err(Error::shape(format!("view {i}: labels are {}x{}, expected {h}x{w}", l.height, l.width)));
            }
            l.check_classes(cfg.num_classes)?;
        }
    }
    if let Some(l) = point_labels {
        if l.len() != cloud.len() {
            return Err(Error::shape(format!("{} point labels for {} points", l.len(), cloud.len())));
        }
        l.check_classes(cfg.num_classes)?;
    }
    Ok(())
}

pub fn run_fusion(
    views: &[ViewInput],
    cloud: &PointCloud,
    point_labels: Option<&LabelMap>,
    cfg: &PipelineConfig,
) -> Result<FusionResult> {
    check_inputs(views, cloud, point_labels, cfg)?;
    let model = Model::seeded(cfg)?;

    let grid = voxel::assign_voxels(cloud, &cfg.voxel).map_err(|e| e.context("voxelization"))?;
    let encoder = SinusoidalEncoder { channels: cfg.c_p };
    let grid: VoxelGrid = voxel::featurize_voxels(grid, cloud, cfg.c_p, |p| encoder.encode(p))
        .map_err(|e| e.context("voxel features"))?;
    if !cloud.is_empty() && grid.is_empty() {
        return Err(Error::invalid(format!(
            "none of the {} points falls inside the voxel bounds {:?}..{:?}",
            cloud.len(),
            cfg.voxel.min_bound,
            cfg.voxel.max_bound
        )));
    }
    let point_features: Vec<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| voxel::interpolate_point_features(&grid, cloud.xyz(i)))
        .collect::<Result<_>>()
        .map_err(|e| e.context("point features"))?;

    let outputs: Vec<ViewOutput> = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| run_view(v, &point_features, cloud, &model, cfg).map_err(|e| e.context(format!("view {i}"))))
        .collect::<Result<_>>()?;

    // Gather fused features at each point's cell, averaged over seeing views.
    let mut sums = vec![vec![0.0; cfg.c_v]; cloud.len()];
    let mut counts = vec![0usize; cloud.len()];
    for (view, out) in views.iter().zip(&outputs) {
        let (h, w) = view.camera.grid_size(GridPlane::Feature);
        for p in project_cloud(&view.camera, cloud) {
            let (r, c, clamped) = p.cell(GridPlane::Feature, h, w);
            if clamped {
                continue;
            }
            counts[p.point_index] += 1;
            for (k, s) in sums[p.point_index].iter_mut().enumerate() {
                *s += out.fused.get(k, r, c);
            }
        }
    }
    let point_rows: Vec<Vec<f64>> = point_features
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(f, (s, &n))| {
            let mut row = f.clone();
            row.extend(s.iter().map(|x| if n > 0 { x / n as f64 } else { 0.0 }));
            row
        })
        .collect();
    let point_logits = if cloud.is_empty() {
        None
    } else {
        Some(model.point_head.apply_rows(&point_rows)?)
    };
    let voxel_rows: Vec<Vec<f64>> = (0..grid.len()).map(|v| grid.feature(v).to_vec()).collect();
    let voxel_logits = if grid.is_empty() {
        None
    } else {
        Some(model.voxel_head.apply_rows(&voxel_rows)?)
    };
    let voxel_labels = point_labels.filter(|_| !grid.is_empty()).map(|l| {
        LabelMap::points(
            grid.voxels
                .iter()
                .map(|v| majority_label(&v.members, &l.labels, cfg.num_classes))
                .collect(),
        )
    });

    let losses = compute_losses(views, &outputs, point_logits.as_ref(), point_labels, voxel_logits.as_ref(), voxel_labels.as_ref(), cfg)?;
    Ok(FusionResult {
        points: PointDiagnostics {
            points: cloud.len(),
            voxels: grid.len(),
            seen: counts.iter().filter(|&&n| n > 0).count(),
        },
        views: outputs,
        point_logits,
        voxel_logits,
        voxel_labels,
        losses,
    })
}

fn compute_losses(
    views: &[ViewInput],
    outputs: &[ViewOutput],
    point_logits: Option<&LogitMap>,
    point_labels: Option<&LabelMap>,
    voxel_logits: Option<&LogitMap>,
    voxel_labels: Option<&LabelMap>,
    cfg: &PipelineConfig,
) -> Result<LossReport> {
    let weights = cfg.loss_weights();
    let image = if views[0].labels.is_some() {
        let center = views.len() / 2;
        let head = |i: usize| -> Result<HeadLoss> {
            let labels = views[i].labels.as_ref().expect("checked: all views labelled");
            losses::segmentation_loss(&LogitMap::from(&outputs[i].image_logits), labels)
                .map_err(|e| e.context(format!("view {i} image loss")))
        };
        let center_labels = views[center].labels.as_ref().expect("checked: all views labelled");
        let (fused_ce, _) = losses::cross_entropy(&LogitMap::from(&outputs[center].fused_logits), center_labels)?;
        let sides = (0..views.len()).filter(|&i| i != center).map(head).collect::<Result<Vec<_>>>()?;
        Some(ImageLossTerms {
            center: head(center)?,
            fused_ce,
            align: cfg.align_weight * outputs[center].diagnostics.align_loss,
            sides,
        })
    } else {
        None
    };
    let image_total = image.as_ref().map(|t| losses::total_image_loss(t, &weights));
    let point = match (point_logits, point_labels, voxel_logits, voxel_labels) {
        (Some(pl), Some(pt), Some(vl), Some(vt)) => Some(losses::total_point_loss(pl, pt, vl, vt)?),
        _ => None,
    };
    let total = match (image_total, &point) {
        (Some(i), Some(p)) => Some(losses::total_loss(i, p.total)),
        (Some(i), None) => Some(i),
        (None, Some(p)) => Some(p.total),
        (None, None) => None,
    };
    Ok(LossReport {
        image,
        image_total,
        point,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_prefers_smaller_class_on_ties() {
        assert_eq!(majority_label(&[0, 1, 2, 3], &[4, 2, 4, 2], 15), 2);
        assert_eq!(majority_label(&[0, 1], &[IGNORE_LABEL, IGNORE_LABEL], 15), IGNORE_LABEL);
        assert_eq!(majority_label(&[0, 1, 2], &[7, IGNORE_LABEL, 3], 15), 3);
    }

    #[test]
    fn image_grid_depth_is_sampled_at_cell_centres() {
        let cam = CameraModel::pinhole(10.0, 10.0, 8.0, 4.0, (8, 16), (2, 4), [0.0; 3]).unwrap();
        let big = FeatureMap::from_fn(1, 8, 16, |_, r, c| (r * 100 + c) as f64);
        let small = depth_on_feature_grid(&big, &cam).unwrap();
        assert_eq!(small.shape(), (1, 2, 4));
        assert_eq!(small.get(0, 1, 3), 412.0);
    }

    #[test]
    fn head_rows_are_class_major() {
        let head = LinearHead {
            in_channels: 2,
            out_channels: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 10.0],
        };
        let l = head.apply_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 3.0, 12.0, 14.0]);
    }
}
