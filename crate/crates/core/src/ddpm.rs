//! Depth-difference perception: a log-scale residual between predicted and
//! LiDAR depth, embedded by two same-padded 3x3 convolutions and added onto
//! the fusion attention output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::SparseGrid;
use crate::pffm::{self, AttentionOptions, AttentionOutput, AttentionParams};

/// Offset inside both logarithms.
pub const LOG_EPS: f64 = 1e-8;

pub const KERNEL: usize = 3;

/// `log(pred + eps) - log(sparse + eps)` on cells with a LiDAR depth.
pub fn log_depth_difference(predicted: &FeatureMap, sparse: &SparseGrid) -> Result<SparseGrid> {
    if predicted.channels != 1 || predicted.height != sparse.height || predicted.width != sparse.width {
        return Err(Error::shape(format!(
            "predicted depth {:?} must be 1x{}x{}",
            predicted.shape(),
            sparse.height,
            sparse.width
        )));
    }
    let mut out = SparseGrid::empty(sparse.height, sparse.width);
    for (r, c, lidar) in sparse.iter_valid() {
        let pred = predicted.get(0, r, c);
        if !(pred > 0.0) {
            return Err(Error::invalid(format!("predicted depth {pred} at cell ({r}, {c}) must be positive")));
        }
        out.set(r, c, (pred + LOG_EPS).ln() - (lidar + LOG_EPS).ln());
    }
    Ok(out)
}

/// One 3x3 convolution with stride 1, zero same-padding and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`, flattened.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != out_channels * in_channels * KERNEL * KERNEL || bias.len() != out_channels {
            return Err(Error::shape(format!(
                "conv {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                out_channels * in_channels * KERNEL * KERNEL,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    fn seeded(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_channels * KERNEL * KERNEL) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let weights = (0..out_channels * in_channels * KERNEL * KERNEL)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        let bias = (0..out_channels).map(|_| rng.gen_range(-scale..scale) * 0.1).collect();
        Self {
            in_channels,
            out_channels,
            weights,
            bias,
        }
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * KERNEL + ky) * KERNEL + kx]
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (h, w) = (input.height as isize, input.width as isize);
        let mut out = FeatureMap::zeros(self.out_channels, input.height, input.width);
        for o in 0..self.out_channels {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in 0..KERNEL {
                            let rr = r + ky as isize - 1;
                            if rr < 0 || rr >= h {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let cc = c + kx as isize - 1;
                                if cc < 0 || cc >= w {
                                    continue;
                                }
                                acc += self.weight(o, i, ky, kx) * input.get(i, rr as usize, cc as usize);
                            }
                        }
                    }
                    out.set(o, r as usize, c as usize, acc);
                }
            }
        }
        Ok(out)
    }
}

/// `1 -> hidden -> out` convolutions with no activation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl ConvStack {
    pub fn new(first: ConvLayer, second: ConvLayer) -> Result<Self> {
        if first.in_channels != 1 || first.out_channels != second.in_channels {
            return Err(Error::shape(format!(
                "conv stack channels do not chain: {}->{} then {}->{}",
                first.in_channels, first.out_channels, second.in_channels, second.out_channels
            )));
        }
        Ok(Self { first, second })
    }

    pub fn seeded(hidden: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = ConvLayer::seeded(1, hidden, &mut rng);
        let second = ConvLayer::seeded(hidden, out_channels, &mut rng);
        Self { first, second }
    }

    pub fn out_channels(&self) -> usize {
        self.second.out_channels
    }
}

/// Embeds the depth residual; cells without a LiDAR depth enter as 0.
pub fn conv2_embed(diff: &SparseGrid, stack: &ConvStack) -> Result<FeatureMap> {
    let input = FeatureMap::from_vec(1, diff.height, diff.width, diff.dense().to_vec())?;
    stack.second.forward(&stack.first.forward(&input)?)
}

/// Fusion attention with the embedded depth residual added to its output.
pub fn attend_with_depth(
    fused: &FeatureMap,
    params: &AttentionParams,
    d_hat: &FeatureMap,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    pffm::self_attention(fused, params, Some(d_hat), opts)
}
