//! Point-pixel feature fusion.
//!
//! Projected point features are scattered onto the feature grid, holes inside
//! the bounding rectangle of the projections are filled by inverse-distance
//! blending of the three nearest assigned cells, the remainder is taken from
//! the image features, and the concatenation of both maps is refined by a
//! single-head self-attention followed by a per-cell layer norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{GridPlane, Projection, SparseGrid};

/// Regulariser in the hole-filling weights `1 / (d + eps)`.
pub const FILL_EPS: f64 = 1e-8;

/// Inclusive rectangle on the feature grid; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct BoundingRect {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

impl BoundingRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x_min: 0,
            x_max: width - 1,
            y_min: 0,
            y_max: height - 1,
        }
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x_min && col <= self.x_max && row >= self.y_min && row <= self.y_max
    }

    pub fn cell_count(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.x_max >= width || self.y_max >= height {
            return Err(Error::invalid(format!("rectangle {self:?} does not fit a {height}x{width} grid")));
        }
        Ok(())
    }
}

pub fn compute_bounding_rectangle(projections: &[Projection], height: usize, width: usize) -> Result<BoundingRect> {
    let mut cells = projections.iter().map(|p| p.cell(GridPlane::Feature, height, width));
    let (r0, c0, _) = cells
        .next()
        .ok_or_else(|| Error::Empty("no projections to bound".into()))?;
    let mut rect = BoundingRect {
        x_min: c0,
        x_max: c0,
        y_min: r0,
        y_max: r0,
    };
    for (r, c, _) in cells {
        rect.x_min = rect.x_min.min(c);
        rect.x_max = rect.x_max.max(c);
        rect.y_min = rect.y_min.min(r);
        rect.y_max = rect.y_max.max(r);
    }
    Ok(rect)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ScatterStats {
    /// Unclamped projections that own their cell.
    pub scattered: usize,
    /// Projections that fell outside the grid after rounding.
    pub clamped: usize,
    /// Unclamped projections that lost their cell to a nearer point.
    pub collided: usize,
}

#[derive(Debug, Clone)]
pub struct Scatter {
    pub map: FeatureMap,
    /// Winning depth per assigned cell.
    pub mask: SparseGrid,
    pub stats: ScatterStats,
}

/// Writes `features[i]` (belonging to `projections[i]`) into its rounded
/// feature-grid cell. The nearest point wins a contested cell; ties keep the
/// earlier projection.
pub fn scatter_point_features(
    projections: &[Projection],
    features: &[Vec<f64>],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Scatter> {
    if projections.len() != features.len() {
        return Err(Error::shape(format!(
            "{} projections but {} feature vectors",
            projections.len(),
            features.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.len() != channels) {
        return Err(Error::shape(format!("point feature has {} channels, expected {channels}", f.len())));
    }
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    let mut mask = SparseGrid::empty(height, width);
    let mut clamped = vec![false; projections.len()];
    for (i, p) in projections.iter().enumerate() {
        let (r, c, cl) = p.cell(GridPlane::Feature, height, width);
        clamped[i] = cl;
        match mask.get(r, c) {
            Some(d) if d <= p.depth => {}
            _ => {
                mask.set(r, c, p.depth);
                owner[r * width + c] = Some(i);
            }
        }
    }
    let mut map = FeatureMap::zeros(channels.max(1), height, width);
    let mut stats = ScatterStats {
        clamped: clamped.iter().filter(|&&c| c).count(),
        ..Default::default()
    };
    for (cell, o) in owner.iter().enumerate() {
        if let Some(i) = *o {
            map.set_cell(cell / width, cell % width, &features[i]);
            if !clamped[i] {
                stats.scattered += 1;
            }
        }
    }
    stats.collided = projections.len() - stats.clamped - stats.scattered;
    Ok(Scatter { map, mask, stats })
}

/// The three nearest assigned cells to `(row, col)` inside `rect`, with
/// normalised inverse-distance weights. Ties go to the earlier cell in
/// row-major order.
pub fn fill_neighbours(mask: &SparseGrid, rect: &BoundingRect, row: usize, col: usize) -> Vec<((usize, usize), f64)> {
    let mut best: Vec<(i64, usize)> = Vec::with_capacity(4);
    let (r0, c0) = (row as i64, col as i64);
    let max_ring = (rect.x_max - rect.x_min).max(rect.y_max - rect.y_min) as i64 + 1;
    let (ymin, ymax, xmin, xmax) = (rect.y_min as i64, rect.y_max as i64, rect.x_min as i64, rect.x_max as i64);
    let consider = |r: i64, c: i64, best: &mut Vec<(i64, usize)>| {
        if r < ymin || r > ymax || c < xmin || c > xmax {
            return;
        }
        let (ru, cu) = (r as usize, c as usize);
        if !mask.is_valid(ru, cu) {
            return;
        }
        let d2 = (r - r0).pow(2) + (c - c0).pow(2);
        let key = (d2, ru * mask.width + cu);
        let pos = best.iter().position(|e| key < *e).unwrap_or(best.len());
        if pos < 3 {
            best.insert(pos, key);
            best.truncate(3);
        }
    };
    for ring in 0..=max_ring {
        if ring == 0 {
            consider(r0, c0, &mut best);
        } else {
            for c in c0 - ring..=c0 + ring {
                consider(r0 - ring, c, &mut best);
                consider(r0 + ring, c, &mut best);
            }
            for r in r0 - ring + 1..=r0 + ring - 1 {
                consider(r, c0 - ring, &mut best);
                consider(r, c0 + ring, &mut best);
            }
        }
        if best.len() == 3 && (ring + 1).pow(2) > best[2].0 {
            break;
        }
    }
    let raw: Vec<f64> = best.iter().map(|&(d2, _)| 1.0 / ((d2 as f64).sqrt() + FILL_EPS)).collect();
    let total: f64 = raw.iter().sum();
    best.iter()
        .zip(raw)
        .map(|(&(_, idx), w)| ((idx / mask.width, idx % mask.width), w / total))
        .collect()
}

/// Fills every unassigned cell inside `rect`; assigned cells and cells outside
/// the rectangle are copied through unchanged.
pub fn interpolate_missing(scattered: &FeatureMap, mask: &SparseGrid, rect: &BoundingRect) -> Result<FeatureMap> {
    let (h, w) = (scattered.height, scattered.width);
    if mask.height != h || mask.width != w {
        return Err(Error::shape(format!(
            "mask {}x{} does not match feature map {h}x{w}",
            mask.height, mask.width
        )));
    }
    rect.check(h, w)?;
    let any_valid = (rect.y_min..=rect.y_max).any(|r| (rect.x_min..=rect.x_max).any(|c| mask.is_valid(r, c)));
    if !any_valid {
        return Err(Error::Empty("no assigned cells inside the bounding rectangle".into()));
    }
    let holes: Vec<(usize, usize)> = (rect.y_min..=rect.y_max)
        .flat_map(|r| (rect.x_min..=rect.x_max).map(move |c| (r, c)))
        .filter(|&(r, c)| !mask.is_valid(r, c))
        .collect();
    let filled: Vec<Vec<f64>> = holes
        .par_iter()
        .map(|&(r, c)| {
            let mut acc = vec![0.0; scattered.channels];
            for ((nr, nc), wgt) in fill_neighbours(mask, rect, r, c) {
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += wgt * scattered.get(ch, nr, nc);
                }
            }
            acc
        })
        .collect();
    let mut out = scattered.clone();
    for (&(r, c), v) in holes.iter().zip(&filled) {
        out.set_cell(r, c, v);
    }
    Ok(out)
}

/// Point features inside `rect`, image features outside.
pub fn fill_outside(completed: &FeatureMap, image: &FeatureMap, rect: &BoundingRect) -> Result<FeatureMap> {
    if !completed.same_shape(image) {
        return Err(Error::shape(format!(
            "completed map {:?} and image features {:?} differ",
            completed.shape(),
            image.shape()
        )));
    }
    rect.check(image.height, image.width)?;
    let mut out = completed.clone();
    for r in 0..image.height {
        for c in 0..image.width {
            if !rect.contains(r, c) {
                for ch in 0..image.channels {
                    out.set(ch, r, c, image.get(ch, r, c));
                }
            }
        }
    }
    Ok(out)
}

/// Mean over cells of the squared channel-vector distance, and its gradient
/// with respect to `filled`.
pub fn alignment_loss(filled: &FeatureMap, image: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if !filled.same_shape(image) {
        return Err(Error::shape(format!(
            "alignment inputs differ: {:?} vs {:?}",
            filled.shape(),
            image.shape()
        )));
    }
    let n = filled.cells() as f64;
    let diff: Vec<f64> = filled.as_slice().iter().zip(image.as_slice()).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
    let loss = crate::losses::pairwise_sum(&sq) / n;
    let grad = diff.into_iter().map(|d| 2.0 * d / n).collect();
    let (c, h, w) = filled.shape();
    Ok((loss, FeatureMap::from_vec(c, h, w, grad)?))
}

/// Channel concatenation, point channels first.
pub fn fuse_concat(point: &FeatureMap, image: &FeatureMap) -> Result<FeatureMap> {
    if point.height != image.height || point.width != image.width {
        return Err(Error::shape(format!(
            "cannot concatenate {}x{} with {}x{}",
            point.height, point.width, image.height, image.width
        )));
    }
    let mut data = Vec::with_capacity(point.as_slice().len() + image.as_slice().len());
    data.extend_from_slice(point.as_slice());
    data.extend_from_slice(image.as_slice());
    FeatureMap::from_vec(point.channels + image.channels, point.height, point.width, data)
}

/// Inverse of [`fuse_concat`].
pub fn split_channels(map: &FeatureMap, first: usize) -> Result<(FeatureMap, FeatureMap)> {
    if first == 0 || first >= map.channels {
        return Err(Error::shape(format!("cannot split {} channels at {first}", map.channels)));
    }
    let at = first * map.cells();
    let (a, b) = map.as_slice().split_at(at);
    Ok((
        FeatureMap::from_vec(first, map.height, map.width, a.to_vec())?,
        FeatureMap::from_vec(map.channels - first, map.height, map.width, b.to_vec())?,
    ))
}

/// Projection matrices and norm parameters for the fusion attention.
/// Matrices are row-major `C x C_q`, `C x C_k`, `C x C_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub c_q: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AttentionParams {
    /// Uniform weights with unit variance scaled by `1/sqrt(C)`; identity norm.
    pub fn seeded(channels: usize, c_q: usize, c_k: usize, c_v: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 3f64.sqrt() / (channels as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        let w_q = draw(channels * c_q);
        let w_k = draw(channels * c_k);
        let w_v = draw(channels * c_v);
        Self::new(channels, c_q, c_k, c_v, w_q, w_k, w_v)
    }

    pub fn new(
        channels: usize,
        c_q: usize,
        c_k: usize,
        c_v: usize,
        w_q: Vec<f64>,
        w_k: Vec<f64>,
        w_v: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            channels,
            c_q,
            c_k,
            c_v,
            w_q,
            w_k,
            w_v,
            gamma: vec![1.0; c_v],
            beta: vec![0.0; c_v],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_q != self.c_k {
            return Err(Error::invalid(format!("C_q ({}) must equal C_k ({})", self.c_q, self.c_k)));
        }
        if self.channels == 0 || self.c_k == 0 || self.c_v == 0 {
            return Err(Error::invalid("attention dimensions must be >= 1"));
        }
        let sizes = [
            ("W_Q", self.w_q.len(), self.channels * self.c_q),
            ("W_K", self.w_k.len(), self.channels * self.c_k),
            ("W_V", self.w_v.len(), self.channels * self.c_v),
            ("gamma", self.gamma.len(), self.c_v),
            ("beta", self.beta.len(), self.c_v),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = [&self.w_q, &self.w_k, &self.w_v, &self.gamma, &self.beta];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("attention parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOptions {
    /// Above this many cells the probability matrix is not retained.
    pub dense_threshold: usize,
    pub layer_norm_eps: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            dense_threshold: 4096,
            layer_norm_eps: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Layer-normalised result, `C_v x h x w`.
    pub fused: FeatureMap,
    /// Cell-major `(h*w) x C_v` attention output, including any bias.
    pub attention: Vec<f64>,
    /// Row-major `(h*w) x (h*w)` softmax matrix when small enough to keep.
    pub probabilities: Option<Vec<f64>>,
}

/// Projects cell-major features through a row-major `C x d` matrix.
fn project(cells: &[Vec<f64>], weights: &[f64], d: usize) -> Vec<Vec<f64>> {
    cells
        .iter()
        .map(|x| {
            let mut out = vec![0.0; d];
            for (c, &xc) in x.iter().enumerate() {
                let row = &weights[c * d..(c + 1) * d];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += xc * wv;
                }
            }
            out
        })
        .collect()
}

/// Per-row softmax attention; scores for a row are produced, normalised and
/// consumed one row at a time.
fn attention_rows(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], keep: bool) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let scale = 1.0 / (q.first().map_or(1, Vec::len) as f64).sqrt();
    let c_v = v.first().map_or(0, Vec::len);
    let rows: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = q
        .par_iter()
        .enumerate()
        .map(|(i, qi)| {
            let mut scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite(format!("attention scores in row {i}")));
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
            }
            let total: f64 = scores.iter().sum();
            for s in scores.iter_mut() {
                *s /= total;
            }
            let mut out = vec![0.0; c_v];
            for (p, vj) in scores.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            Ok((out, keep.then_some(scores)))
        })
        .collect();
    let mut outs = Vec::with_capacity(rows.len());
    let mut probs = keep.then(Vec::new);
    for r in rows {
        let (o, p) = r?;
        outs.push(o);
        if let (Some(all), Some(p)) = (probs.as_mut(), p) {
            all.push(p);
        }
    }
    Ok((outs, probs))
}

/// Per-row layer norm over the channel axis, then scale and shift.
pub fn layer_norm(rows: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            x.iter()
                .zip(gamma.iter().zip(beta))
                .map(|(v, (g, b))| (v - mean) * inv * g + b)
                .collect()
        })
        .collect()
}

/// Single-head self-attention over the cells of `fused`, with an optional
/// per-cell bias added to the attention output before the layer norm.
pub fn self_attention(
    fused: &FeatureMap,
    params: &AttentionParams,
    bias: Option<&FeatureMap>,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    params.validate()?;
    if fused.channels != params.channels {
        return Err(Error::shape(format!(
            "fused map has {} channels, attention expects {}",
            fused.channels, params.channels
        )));
    }
    if let Some(b) = bias {
        if b.channels != params.c_v || b.height != fused.height || b.width != fused.width {
            return Err(Error::shape(format!(
                "attention bias {:?} must be {}x{}x{}",
                b.shape(),
                params.c_v,
                fused.height,
                fused.width
            )));
        }
    }
    fused.check_finite("attention input")?;
    let cells = fused.to_cell_major();
    let q = project(&cells, &params.w_q, params.c_q);
    let k = project(&cells, &params.w_k, params.c_k);
    let v = project(&cells, &params.w_v, params.c_v);
    let keep = cells.len() <= opts.dense_threshold;
    let (mut attn, probs) = attention_rows(&q, &k, &v, keep)?;
    if let Some(b) = bias {
        let n = b.cells();
        for (i, row) in attn.iter_mut().enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x += b.as_slice()[c * n + i];
            }
        }
    }
    let normed = layer_norm(&attn, &params.gamma, &params.beta, opts.layer_norm_eps);
    let out = FeatureMap::from_cell_major(&normed, fused.height, fused.width)?;
    Ok(AttentionOutput {
        fused: out,
        attention: attn.into_iter().flatten().collect(),
        probabilities: probs.map(|p| p.into_iter().flatten().collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proj(u_feat: f64, v_feat: f64, depth: f64) -> Projection {
        Projection {
            point_index: 0,
            u: u_feat,
            v: v_feat,
            u_feat,
            v_feat,
            depth,
        }
    }

    #[test]
    fn rect_single_and_corners() {
        let r = compute_bounding_rectangle(&[proj(5.0, 7.0, 1.0)], 10, 10).unwrap();
        assert_eq!((r.x_min, r.x_max, r.y_min, r.y_max), (5, 5, 7, 7));
        let r = compute_bounding_rectangle(&[proj(0.0, 0.0, 1.0), proj(11.0, 7.0, 1.0)], 8, 12).unwrap();
        assert_eq!(r, BoundingRect::full(8, 12));
        assert!(matches!(compute_bounding_rectangle(&[], 4, 4), Err(Error::Empty(_))));
    }

    #[test]
    fn scatter_basic_and_collision() {
        let s = scatter_point_features(&[], &[], 2, 3, 3).unwrap();
        assert!(s.map.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(s.mask.valid_count(), 0);

        let s = scatter_point_features(&[proj(1.0, 2.0, 4.0)], &[vec![1.0, 0.0]], 2, 3, 3).unwrap();
        assert_eq!(s.map.cell(2, 1), vec![1.0, 0.0]);
        assert_eq!(s.map.as_slice().iter().filter(|&&x| x != 0.0).count(), 1);

        let near = proj(1.0, 1.0, 3.0);
        let far = proj(1.2, 0.9, 8.0);
        for (ps, fs) in [
            (vec![near, far], vec![vec![1.0], vec![2.0]]),
            (vec![far, near], vec![vec![2.0], vec![1.0]]),
        ] {
            let s = scatter_point_features(&ps, &fs, 1, 3, 3).unwrap();
            assert_eq!(s.map.get(0, 1, 1), 1.0);
            assert_eq!(s.mask.get(1, 1), Some(3.0));
            assert_eq!(s.stats, ScatterStats { scattered: 1, clamped: 0, collided: 1 });
        }
    }

    #[test]
    fn scatter_counts_clamped() {
        let s = scatter_point_features(&[proj(2.6, 0.0, 1.0), proj(0.0, 0.0, 1.0)], &[vec![1.0], vec![2.0]], 1, 3, 3).unwrap();
        assert_eq!(s.stats, ScatterStats { scattered: 1, clamped: 1, collided: 0 });
        assert_eq!(s.map.get(0, 0, 2), 1.0);
    }

    #[test]
    fn all_valid_is_identity() {
        let map = FeatureMap::from_fn(2, 4, 4, |c, r, k| (c * 16 + r * 4 + k) as f64);
        let mask = SparseGrid::from_parts(4, 4, vec![1.0; 16], vec![true; 16]).unwrap();
        let out = interpolate_missing(&map, &mask, &BoundingRect::full(4, 4)).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn symmetric_hole_gets_mean() {
        // Hole at (1,1) with assigned cells at (0,1), (1,0), (1,2); (2,1) left empty.
        let mut map = FeatureMap::zeros(1, 3, 3);
        let mut mask = SparseGrid::empty(3, 3);
        for ((r, c), v) in [((0, 1), 3.0), ((1, 0), 6.0), ((1, 2), 9.0)] {
            map.set(0, r, c, v);
            mask.set(r, c, 1.0);
        }
        let rect = BoundingRect { x_min: 0, x_max: 2, y_min: 0, y_max: 1 };
        let out = interpolate_missing(&map, &mask, &rect).unwrap();
        assert!((out.get(0, 1, 1) - 6.0).abs() < 1e-12);
        // Row 2 lies outside the rectangle.
        assert_eq!(out.get(0, 2, 1), 0.0);
    }

    #[test]
    fn no_valid_cells_in_rect_errors() {
        let map = FeatureMap::zeros(1, 3, 3);
        let mut mask = SparseGrid::empty(3, 3);
        mask.set(2, 2, 1.0);
        let rect = BoundingRect { x_min: 0, x_max: 1, y_min: 0, y_max: 1 };
        assert!(matches!(interpolate_missing(&map, &mask, &rect), Err(Error::Empty(_))));
    }

    #[test]
    fn fill_outside_selects() {
        let completed = FeatureMap::from_fn(1, 3, 3, |_, _, _| 1.0);
        let image = FeatureMap::from_fn(1, 3, 3, |_, _, _| 2.0);
        assert_eq!(fill_outside(&completed, &image, &BoundingRect::full(3, 3)).unwrap(), completed);
        let one = BoundingRect { x_min: 1, x_max: 1, y_min: 2, y_max: 2 };
        let out = fill_outside(&completed, &image, &one).unwrap();
        let differing = out.as_slice().iter().zip(image.as_slice()).filter(|(a, b)| a != b).count();
        assert_eq!(differing, 1);
        let wrong = FeatureMap::zeros(2, 3, 3);
        assert!(fill_outside(&wrong, &image, &one).is_err());
    }

    #[test]
    fn alignment_loss_closed_forms() {
        let a = FeatureMap::from_vec(1, 1, 1, vec![3.0]).unwrap();
        let b = FeatureMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let (l, g) = alignment_loss(&a, &b).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.as_slice(), &[4.0]);
        let (l, g) = alignment_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
        assert!(alignment_loss(&a, &FeatureMap::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn concat_orders_planes() {
        let a = FeatureMap::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = FeatureMap::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let f = fuse_concat(&a, &b).unwrap();
        assert_eq!(f.plane(0), &[1.0, 2.0]);
        assert_eq!(f.plane(1), &[3.0, 4.0]);
        let (x, y) = split_channels(&f, 1).unwrap();
        assert_eq!((x, y), (a, b));
        assert!(fuse_concat(&FeatureMap::zeros(1, 2, 2), &FeatureMap::zeros(1, 1, 2)).is_err());
    }

    #[test]
    fn single_cell_attention_returns_values() {
        let params = AttentionParams::seeded(3, 2, 2, 4, 11).unwrap();
        let f = FeatureMap::from_vec(3, 1, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let out = self_attention(&f, &params, None, &AttentionOptions::default()).unwrap();
        let v = project(&f.to_cell_major(), &params.w_v, 4);
        assert_eq!(out.attention, v[0]);
        assert_eq!(out.probabilities.unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_query_key_is_uniform() {
        let mut params = AttentionParams::seeded(2, 2, 2, 2, 5).unwrap();
        params.w_q.iter_mut().for_each(|x| *x = 0.0);
        params.w_k.iter_mut().for_each(|x| *x = 0.0);
        let f = FeatureMap::from_fn(2, 2, 3, |c, r, k| (c + 2 * r + k) as f64 * 0.3);
        let out = self_attention(&f, &params, None, &AttentionOptions::default()).unwrap();
        let v = project(&f.to_cell_major(), &params.w_v, 2);
        let mean: Vec<f64> = (0..2).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / 6.0).collect();
        for row in out.attention.chunks(2) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let params = AttentionParams::seeded(2, 2, 2, 3, 1).unwrap();
        let f = FeatureMap::zeros(3, 2, 2);
        assert!(self_attention(&f, &params, None, &AttentionOptions::default()).is_err());
        let f = FeatureMap::zeros(2, 2, 2);
        let bad_bias = FeatureMap::zeros(2, 2, 2);
        assert!(self_attention(&f, &params, Some(&bad_bias), &AttentionOptions::default()).is_err());
        assert!(AttentionParams::seeded(2, 2, 3, 3, 1).is_err());
    }

    #[test]
    fn huge_weights_report_non_finite() {
        let mut params = AttentionParams::seeded(1, 1, 1, 1, 1).unwrap();
        params.w_q = vec![1e200];
        params.w_k = vec![1e200];
        let f = FeatureMap::from_vec(1, 1, 2, vec![1e100, 1e100]).unwrap();
        let err = self_attention(&f, &params, None, &AttentionOptions::default()).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn streaming_matches_dense() {
        let params = AttentionParams::seeded(4, 3, 3, 2, 9).unwrap();
        let f = FeatureMap::from_fn(4, 5, 6, |c, r, k| ((c * 31 + r * 7 + k * 3) % 11) as f64 / 11.0 - 0.5);
        let dense = self_attention(&f, &params, None, &AttentionOptions::default()).unwrap();
        let stream = self_attention(&f, &params, None, &AttentionOptions { dense_threshold: 0, ..Default::default() }).unwrap();
        assert!(stream.probabilities.is_none());
        assert_eq!(dense.fused, stream.fused);
        assert_eq!(dense.attention, stream.attention);
    }
}
