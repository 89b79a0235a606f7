//! Line-oriented `key = value` pipeline configuration.
//!
//! Unknown keys are rejected. `#` starts a comment. Vector values are
//! whitespace separated, e.g. `voxel_min = -50 6 -7`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pffm::AttentionOptions;
use crate::voxel::VoxelGridConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub n_views: usize,
    pub c_img: usize,
    pub c_p: usize,
    pub c_q: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub num_classes: usize,
    #[serde(skip)]
    pub voxel: VoxelGridConfig,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Multiplier on the alignment term inside the image loss.
    pub align_weight: f64,
    pub seed: u64,
    pub dense_threshold: usize,
    pub layer_norm_eps: f64,
    pub conv_hidden: usize,
    /// When false the depth-difference bias is replaced by zeros.
    pub use_depth_difference: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let att = AttentionOptions::default();
        PipelineConfig {
            n_views: 9,
            c_img: 48,
            c_p: 48,
            c_q: 32,
            c_k: 32,
            c_v: 48,
            num_classes: 15,
            voxel: VoxelGridConfig::default(),
            alpha1: 0.5,
            alpha2: 0.5,
            align_weight: 1.0,
            seed: 7,
            dense_threshold: att.dense_threshold,
            layer_norm_eps: att.layer_norm_eps,
            conv_hidden: 8,
            use_depth_difference: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Parse {
        what: "config".into(),
        line,
        message: format!("{key}: {e}"),
    })
}

fn parse_vec3(key: &str, value: &str, line: usize) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            what: "config".into(),
            line,
            message: format!("{key} needs 3 values, got {}", parts.len()),
        });
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_num(key, p, line)?;
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Parse {
                    what: "config".into(),
                    line,
                    message: format!("expected key = value, got {body:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_views" => cfg.n_views = parse_num(key, value, line)?,
                "c_img" => cfg.c_img = parse_num(key, value, line)?,
                "c_p" => cfg.c_p = parse_num(key, value, line)?,
                "c_q" => cfg.c_q = parse_num(key, value, line)?,
                "c_k" => cfg.c_k = parse_num(key, value, line)?,
                "c_v" => cfg.c_v = parse_num(key, value, line)?,
                "num_classes" => cfg.num_classes = parse_num(key, value, line)?,
                "voxel_resolution" => cfg.voxel.resolution = parse_num(key, value, line)?,
                "voxel_min" => cfg.voxel.min_bound = parse_vec3(key, value, line)?,
                "voxel_max" => cfg.voxel.max_bound = parse_vec3(key, value, line)?,
                "voxel_max_points" => cfg.voxel.max_points_per_voxel = parse_num(key, value, line)?,
                "alpha1" => cfg.alpha1 = parse_num(key, value, line)?,
                "alpha2" => cfg.alpha2 = parse_num(key, value, line)?,
                "align_weight" => cfg.align_weight = parse_num(key, value, line)?,
                "seed" => cfg.seed = parse_num(key, value, line)?,
                "dense_threshold" => cfg.dense_threshold = parse_num(key, value, line)?,
                "layer_norm_eps" => cfg.layer_norm_eps = parse_num(key, value, line)?,
                "conv_hidden" => cfg.conv_hidden = parse_num(key, value, line)?,
                "use_depth_difference" => cfg.use_depth_difference = parse_num(key, value, line)?,
                _ => {
                    return Err(Error::Parse {
                        what: "config".into(),
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let v = |a: [f64; 3]| format!("{:?} {:?} {:?}", a[0], a[1], a[2]);
        let mut s = String::new();
        let mut kv = |k: &str, val: String| s.push_str(&format!("{k} = {val}\n"));
        kv("n_views", self.n_views.to_string());
        kv("c_img", self.c_img.to_string());
        kv("c_p", self.c_p.to_string());
        kv("c_q", self.c_q.to_string());
        kv("c_k", self.c_k.to_string());
        kv("c_v", self.c_v.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("voxel_resolution", format!("{:?}", self.voxel.resolution));
        kv("voxel_min", v(self.voxel.min_bound));
        kv("voxel_max", v(self.voxel.max_bound));
        kv("voxel_max_points", self.voxel.max_points_per_voxel.to_string());
        kv("alpha1", format!("{:?}", self.alpha1));
        kv("alpha2", format!("{:?}", self.alpha2));
        kv("align_weight", format!("{:?}", self.align_weight));
        kv("seed", self.seed.to_string());
        kv("dense_threshold", self.dense_threshold.to_string());
        kv("layer_norm_eps", format!("{:?}", self.layer_norm_eps));
        kv("conv_hidden", self.conv_hidden.to_string());
        kv("use_depth_difference", self.use_depth_difference.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_views", self.n_views),
            ("c_img", self.c_img),
            ("c_p", self.c_p),
            ("c_q", self.c_q),
            ("c_k", self.c_k),
            ("c_v", self.c_v),
            ("num_classes", self.num_classes),
            ("conv_hidden", self.conv_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.c_p != self.c_img {
            return Err(Error::invalid(format!(
                "point channels ({}) must equal image channels ({}) for the alignment loss",
                self.c_p, self.c_img
            )));
        }
        if self.c_q != self.c_k {
            return Err(Error::invalid(format!("c_q ({}) must equal c_k ({})", self.c_q, self.c_k)));
        }
        if self.num_classes > 255 {
            return Err(Error::invalid("num_classes must fit below the ignore label 255"));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(Error::invalid("align_weight must be non-negative"));
        }
        self.voxel.validate()?;
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            dense_threshold: self.dense_threshold,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.voxel.resolution = 0.25;
        cfg.voxel.min_bound = [-1.5, 2.0, -0.1];
        cfg.alpha1 = 0.0;
        cfg.use_depth_difference = false;
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PipelineConfig::parse("bogus = 1").is_err());
        assert!(PipelineConfig::parse("n_views = 0").is_err());
        assert!(PipelineConfig::parse("c_p = 16").is_err());
        assert!(PipelineConfig::parse("voxel_min = 1 2").is_err());
        assert!(PipelineConfig::parse("seed").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = PipelineConfig::parse("# header\n\nn_views = 3 # three\n").unwrap();
        assert_eq!(cfg.n_views, 3);
    }
}
