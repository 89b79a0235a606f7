//! Segmentation losses, their aggregation across heads, and IoU metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;

/// Label value excluded from every reduction.
pub const IGNORE_LABEL: u8 = 255;

/// Class-major `K x n` logits (or probabilities) over `n` cells or points.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub classes: usize,
    pub len: usize,
    data: Vec<f64>,
}

impl LogitMap {
    pub fn new(classes: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() != classes * len {
            return Err(Error::shape(format!(
                "logits {classes}x{len} need {} values, got {}",
                classes * len,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { classes, len, data })
    }

    #[inline]
    pub fn get(&self, class: usize, i: usize) -> f64 {
        self.data[class * self.len + i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.classes).map(|k| self.get(k, i)).collect()
    }

    /// Column-wise softmax.
    pub fn softmax(&self) -> LogitMap {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.len {
            let col = self.column(i);
            for (k, p) in softmax(&col).into_iter().enumerate() {
                data[k * self.len + i] = p;
            }
        }
        LogitMap {
            classes: self.classes,
            len: self.len,
            data,
        }
    }

    pub fn argmax(&self) -> Vec<u8> {
        (0..self.len)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.get(k, i) > self.get(best, i) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

impl From<&FeatureMap> for LogitMap {
    fn from(f: &FeatureMap) -> Self {
        LogitMap {
            classes: f.channels,
            len: f.cells(),
            data: f.as_slice().to_vec(),
        }
    }
}

/// Per-cell (row-major) or per-point class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    /// A `1 x n` map for per-point labels.
    pub fn points(labels: Vec<u8>) -> Self {
        Self {
            height: 1,
            width: labels.len(),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
            Some(l) => Err(Error::invalid(format!("label {l} outside [0, {classes})"))),
            None => Ok(()),
        }
    }
}

/// Pairwise (tree) summation; reproducible for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn check_pair(logits: &LogitMap, labels: &LabelMap) -> Result<()> {
    if logits.len != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions but {} labels",
            logits.len,
            labels.len()
        )));
    }
    labels.check_classes(logits.classes)
}

/// Mean negative log-likelihood over non-ignored cells, with its gradient.
pub fn cross_entropy(logits: &LogitMap, labels: &LabelMap) -> Result<(f64, LogitMap)> {
    check_pair(logits, labels)?;
    let count = labels.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if count == 0 {
        return Err(Error::Empty("cross entropy over zero labelled cells".into()));
    }
    let n = count as f64;
    let mut grad = vec![0.0; logits.data.len()];
    let mut terms = Vec::with_capacity(count);
    for (i, &label) in labels.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let col = logits.column(i);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        terms.push(lse - col[label as usize]);
        for (k, &z) in col.iter().enumerate() {
            let p = (z - lse).exp();
            let onehot = if k == label as usize { 1.0 } else { 0.0 };
            grad[k * logits.len + i] = (p - onehot) / n;
        }
    }
    let loss = pairwise_sum(&terms) / n;
    Ok((loss, LogitMap::new(logits.classes, logits.len, grad)?))
}

/// Gradient of the Lovász extension of the Jaccard loss for a foreground
/// indicator already sorted by decreasing error.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-Softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(probs: &LogitMap, labels: &LabelMap) -> Result<f64> {
    check_pair(probs, labels)?;
    for i in 0..probs.len {
        let s: f64 = probs.column(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 || probs.column(i).iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!("probabilities at cell {i} sum to {s}, not 1")));
        }
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| labels.labels[i] != IGNORE_LABEL).collect();
    let mut per_class = Vec::new();
    for class in 0..probs.classes {
        let fg: Vec<bool> = kept.iter().map(|&i| labels.labels[i] as usize == class).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        let mut errs: Vec<(f64, bool)> = kept
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = probs.get(class, i);
                (if f { 1.0 - p } else { p }, f)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let fg_sorted: Vec<bool> = errs.iter().map(|e| e.1).collect();
        let terms: Vec<f64> = errs
            .iter()
            .zip(lovasz_grad(&fg_sorted))
            .map(|(e, g)| e.0 * g)
            .collect();
        per_class.push(terms.iter().sum::<f64>());
    }
    if per_class.is_empty() {
        return Ok(0.0);
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Cross-entropy plus Lovász-Softmax on the same head.
pub fn segmentation_loss(logits: &LogitMap, labels: &LabelMap) -> Result<HeadLoss> {
    let (ce, _) = cross_entropy(logits, labels)?;
    let lovasz = lovasz_softmax(&logits.softmax(), labels)?;
    Ok(HeadLoss { ce, lovasz })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct HeadLoss {
    pub ce: f64,
    pub lovasz: f64,
}

impl HeadLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.lovasz
    }
}

/// Weights on the summed side-view losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 0.5, alpha2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) || !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Components of the image-branch loss. The centre view carries the fused and
/// alignment terms; `sides` excludes the centre view.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImageLossTerms {
    pub center: HeadLoss,
    pub fused_ce: f64,
    pub align: f64,
    pub sides: Vec<HeadLoss>,
}

/// With no side views this is `CE + Lovász + fused CE + align`; side views add
/// `alpha1 * sum CE + alpha2 * sum Lovász`.
pub fn total_image_loss(terms: &ImageLossTerms, weights: &LossWeights) -> f64 {
    let base = terms.center.ce + terms.center.lovasz + terms.fused_ce + terms.align;
    if terms.sides.is_empty() {
        return base;
    }
    let side_ce: f64 = terms.sides.iter().map(|s| s.ce).sum();
    let side_lv: f64 = terms.sides.iter().map(|s| s.lovasz).sum();
    base + weights.alpha1 * side_ce + weights.alpha2 * side_lv
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PointLoss {
    pub point: HeadLoss,
    pub voxel: HeadLoss,
    pub total: f64,
}

pub fn total_point_loss(
    point_logits: &LogitMap,
    point_labels: &LabelMap,
    voxel_logits: &LogitMap,
    voxel_labels: &LabelMap,
) -> Result<PointLoss> {
    let point = segmentation_loss(point_logits, point_labels)?;
    let voxel = segmentation_loss(voxel_logits, voxel_labels)?;
    Ok(PointLoss {
        point,
        voxel,
        total: point.total() + voxel.total(),
    })
}

pub fn total_loss(image_total: f64, point_total: f64) -> f64 {
    image_total + point_total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and labels.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn mean_iou(predictions: &LabelMap, labels: &LabelMap, classes: usize) -> Result<IouReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in predictions.labels.iter().zip(&labels.labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        if p == l {
            if p < classes {
                tp[p] += 1;
            }
        } else {
            if p < classes {
                fp[p] += 1;
            }
            if l < classes {
                fn_[l] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport { per_class, miou })
}
