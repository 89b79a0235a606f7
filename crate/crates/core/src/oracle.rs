//! Brute-force reference implementations.
//!
//! Each routine here recomputes a kernel result by the most direct route
//! available (exhaustive scans, explicit dense matrices, nested loops) and
//! shares no code with the optimised kernels it is compared against. They
//! back the `oracle` CLI subcommand and the test suites.

use crate::feature::FeatureMap;
use crate::geometry::{CameraModel, SparseGrid};

/// Row-major `(row, col)` cells sorted by `(squared distance, row-major index)`.
fn sorted_cells(cells: &[(usize, usize)], width: usize, row: usize, col: usize) -> Vec<(f64, (usize, usize))> {
    let mut all: Vec<(i64, usize, (usize, usize))> = cells
        .iter()
        .map(|&(r, c)| {
            let dr = r as i64 - row as i64;
            let dc = c as i64 - col as i64;
            (dr * dr + dc * dc, r * width + c, (r, c))
        })
        .collect();
    all.sort();
    all.into_iter().map(|(d2, _, rc)| ((d2 as f64).sqrt(), rc)).collect()
}

/// Exhaustive three-nearest inverse-distance hole filling inside the
/// inclusive rectangle `[x0, x1] x [y0, y1]` (x = column). Returns the
/// filled map and, per filled cell, the sum of its normalised weights.
pub fn fill_holes(
    map: &FeatureMap,
    mask: &SparseGrid,
    rect: (usize, usize, usize, usize),
    eps: f64,
) -> (FeatureMap, Vec<f64>) {
    let (x0, x1, y0, y1) = rect;
    let mut valid = Vec::new();
    for r in y0..=y1 {
        for c in x0..=x1 {
            if mask.is_valid(r, c) {
                valid.push((r, c));
            }
        }
    }
    let mut out = map.clone();
    let mut sums = Vec::new();
    for r in y0..=y1 {
        for c in x0..=x1 {
            if mask.is_valid(r, c) {
                continue;
            }
            let nn: Vec<_> = sorted_cells(&valid, map.width, r, c).into_iter().take(3).collect();
            let w: Vec<f64> = nn.iter().map(|(d, _)| 1.0 / (d + eps)).collect();
            let total: f64 = w.iter().sum();
            sums.push(w.iter().map(|x| x / total).sum());
            for ch in 0..map.channels {
                let mut acc = 0.0;
                for ((_, (nr, nc)), wi) in nn.iter().zip(&w) {
                    acc += wi / total * map.get(ch, *nr, *nc);
                }
                out.set(ch, r, c, acc);
            }
        }
    }
    (out, sums)
}

/// Linear-scan three-nearest inverse-distance blend of `features[i]` located
/// at `centers[i]`, ties broken by index.
pub fn blend_nearest(centers: &[[f64; 3]], features: &[Vec<f64>], query: [f64; 3], eps: f64) -> Vec<f64> {
    let mut order: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d2: f64 = (0..3).map(|a| (c[a] - query[a]).powi(2)).sum();
            (d2, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nn = &order[..order.len().min(3)];
    let w: Vec<f64> = nn.iter().map(|(d2, _)| 1.0 / (d2.sqrt() + eps)).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; features[0].len()];
    for ((_, i), wi) in nn.iter().zip(&w) {
        for (o, f) in out.iter_mut().zip(&features[*i]) {
            *o += wi / total * f;
        }
    }
    out
}

/// Pinhole projection by explicit 3x4 and 4x4 matrix products.
/// Returns `(u, v, depth)` without any frustum test.
pub fn project(camera: &CameraModel, p: [f64; 3]) -> (f64, f64, f64) {
    let x = [p[0], p[1], p[2], 1.0];
    let mut cam = [0.0; 4];
    for (i, ci) in cam.iter_mut().enumerate() {
        for (j, xj) in x.iter().enumerate() {
            *ci += camera.extrinsics[(i, j)] * xj;
        }
    }
    let mut pix = [0.0; 3];
    for (i, pi) in pix.iter_mut().enumerate() {
        for (j, cj) in cam.iter().enumerate() {
            *pi += camera.intrinsics[(i, j)] * cj;
        }
    }
    (pix[0] / cam[2], pix[1] / cam[2], cam[2])
}

/// Dense attention: explicit Q, K, V matrices, the full score matrix, softmax,
/// optional additive bias, then per-cell layer norm. Returns
/// `(attention rows, probability rows, normalised rows)`.
pub struct DenseAttention {
    pub attention: Vec<Vec<f64>>,
    pub probabilities: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    x: &FeatureMap,
    w_q: &[f64],
    w_k: &[f64],
    w_v: &[f64],
    dims: (usize, usize, usize),
    bias: Option<&FeatureMap>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> DenseAttention {
    let (c_q, c_k, c_v) = dims;
    let n = x.cells();
    let c = x.channels;
    // flat[c][n]
    let flat: Vec<Vec<f64>> = (0..c).map(|ch| x.plane(ch).to_vec()).collect();
    let mul_t = |w: &[f64], d: usize| -> Vec<Vec<f64>> {
        // (W^T flat)[d][n]
        let mut m = vec![vec![0.0; n]; d];
        for (di, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                for ch in 0..c {
                    *out += w[ch * d + di] * flat[ch][j];
                }
            }
        }
        m
    };
    let q = mul_t(w_q, c_q);
    let k = mul_t(w_k, c_k);
    let v = mul_t(w_v, c_v);
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for d in 0..c_k {
                s += q[d][i] * k[d][j];
            }
            scores[i][j] = s / (c_k as f64).sqrt();
        }
    }
    let probabilities: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect();
    let mut attention = vec![vec![0.0; c_v]; n];
    for i in 0..n {
        for d in 0..c_v {
            let mut s = 0.0;
            for j in 0..n {
                s += probabilities[i][j] * v[d][j];
            }
            if let Some(b) = bias {
                s += b.plane(d)[i];
            }
            attention[i][d] = s;
        }
    }
    let normalized = attention
        .iter()
        .map(|row| {
            let m = row.iter().sum::<f64>() / c_v as f64;
            let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c_v as f64;
            row.iter()
                .enumerate()
                .map(|(d, x)| (x - m) / (var + eps).sqrt() * gamma[d] + beta[d])
                .collect()
        })
        .collect();
    DenseAttention {
        attention,
        probabilities,
        normalized,
    }
}

/// Four-loop same-padded 3x3 convolution of a `cin x h x w` map.
pub fn conv3x3(input: &FeatureMap, weights: &[f64], bias: &[f64], cout: usize) -> FeatureMap {
    let (cin, h, w) = input.shape();
    FeatureMap::from_fn(cout, h, w, |o, r, c| {
        let mut acc = bias[o];
        for i in 0..cin {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dy, c as i64 + dx);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        let widx = ((o * cin + i) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize;
                        acc += weights[widx] * input.get(i, rr as usize, cc as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Jaccard loss `1 - |fg \ S| / |fg ∪ S|` of a mispredicted set `S`.
fn jaccard_loss(fg: &[bool], mispredicted: &[bool]) -> f64 {
    let inter = fg.iter().zip(mispredicted).filter(|(&f, &m)| f && !m).count() as f64;
    let union = fg.iter().zip(mispredicted).filter(|(&f, &m)| f || m).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

/// Lovász extension evaluated through explicit prefix sets: errors sorted
/// descending, each prefix's Jaccard loss recomputed from scratch.
/// `probs[i][k]` is the probability of class `k` at pixel `i`.
pub fn lovasz_prefix(probs: &[Vec<f64>], labels: &[u8]) -> f64 {
    let classes = probs.first().map_or(0, Vec::len);
    let mut losses = Vec::new();
    for class in 0..classes {
        let fg: Vec<bool> = labels.iter().map(|&l| l as usize == class).collect();
        if !fg.contains(&true) {
            continue;
        }
        let errors: Vec<f64> = (0..labels.len())
            .map(|i| if fg[i] { 1.0 - probs[i][class] } else { probs[i][class] })
            .collect();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let mut in_set = vec![false; labels.len()];
        let mut prev = jaccard_loss(&fg, &in_set);
        let mut total = 0.0;
        for &i in &order {
            in_set[i] = true;
            let cur = jaccard_loss(&fg, &in_set);
            total += errors[i] * (cur - prev);
            prev = cur;
        }
        losses.push(total);
    }
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Confusion-matrix IoU per class (`None` when the class never occurs).
pub fn confusion_iou(pred: &[u8], labels: &[u8], classes: usize, ignore: u8) -> Vec<Option<f64>> {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l == ignore || p as usize >= classes || l as usize >= classes {
            continue;
        }
        cm[l as usize][p as usize] += 1;
    }
    (0..classes)
        .map(|c| {
            let tp = cm[c][c];
            let row: usize = cm[c].iter().sum();
            let col: usize = cm.iter().map(|r| r[c]).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}
