use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lfseg::config::PipelineConfig;
use lfseg::dataset::io;
use lfseg::dataset::synth::{self, SynthData};
use lfseg::dataset::Scene;
use lfseg::ddpm::{self, ConvStack};
use lfseg::geometry::{project_cloud, sparse_depth_from_projections};
use lfseg::losses::{self, LabelMap, LogitMap, IGNORE_LABEL};
use lfseg::oracle;
use lfseg::pffm::{self, AttentionParams};
use lfseg::pipeline::{self, LinearHead, ViewInput};
use lfseg::voxel::{self, SinusoidalEncoder};
use lfseg::{Error, FeatureMap, GridPlane, Result};

/// Deviation above which the `oracle` subcommand reports a failure.
const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "lfseg", version, about = "LiDAR / multi-view image fusion kernels")]
struct Cli {
    /// Pipeline configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// View count or comma-separated view indices.
    #[arg(long, global = true)]
    views: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Default,
    Occlusion,
    Consistent,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plane {
    Image,
    Feature,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long, value_enum, default_value = "default")]
        fixture: Fixture,
        /// Scene description file; overrides --fixture.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Standard deviation of the predicted-depth jitter, metres.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Project a cloud into one camera: sparse depth and optional feature scatter.
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// `C x 1 x N` per-point features to scatter onto the feature grid.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "feature")]
        plane: Plane,
    },
    /// Run the full fusion pipeline over a dataset directory.
    Fuse {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-entropy and Lovász-Softmax of a logit map against labels.
    Losses {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Per-class IoU and mIoU of predictions (labels or logits) against labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Recompute kernel results with the brute-force references over a dataset.
    Oracle {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Synth { fixture, scene, jitter } => synth_cmd(cli, *fixture, scene.as_deref(), *jitter),
        Cmd::Project {
            cloud,
            calib,
            features,
            plane,
        } => project_cmd(cli, cloud, calib, features.as_deref(), *plane),
        Cmd::Fuse { data } => fuse_cmd(cli, data),
        Cmd::Losses { logits, labels } => losses_cmd(cli, logits, labels),
        Cmd::Eval { pred, labels, classes } => eval_cmd(cli, pred, labels, *classes),
        Cmd::Oracle { data } => oracle_cmd(cli, data),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out_dir
        .as_deref()
        .ok_or_else(|| Error::invalid("--out-dir is required"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

/// Resolves `--views` against `available` views: a count keeps the first
/// `n`, a list picks indices in the given order.
fn select_views(arg: Option<&str>, available: usize) -> Result<Vec<usize>> {
    let Some(arg) = arg else {
        return Ok((0..available).collect());
    };
    let picked: Vec<usize> = if arg.contains(',') {
        arg.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::invalid(format!("bad view index {s:?}"))))
            .collect::<Result<_>>()?
    } else {
        let n: usize = arg
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad view count {arg:?}")))?;
        (0..n).collect()
    };
    if picked.is_empty() {
        return Err(Error::invalid("no views selected"));
    }
    if let Some(&bad) = picked.iter().find(|&&i| i >= available) {
        return Err(Error::invalid(format!("view {bad} out of range ({available} available)")));
    }
    Ok(picked)
}

fn load_config(cli: &Cli, fallback: Option<PipelineConfig>) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::parse(&io::load_text(p)?).map_err(|e| e.context(p.display().to_string()))?,
        None => fallback.unwrap_or_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Rig layout for a bare view count: square counts form a square grid,
/// anything else a single row.
fn rig_for(n: usize) -> (usize, usize) {
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n {
        (s, s)
    } else {
        (1, n)
    }
}

fn synth_cmd(cli: &Cli, fixture: Fixture, scene_path: Option<&Path>, jitter: f64) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let mut scene = match scene_path {
        Some(p) => Scene::parse(&io::load_text(p)?).map_err(|e| e.context(p.display().to_string()))?,
        None => match fixture {
            Fixture::Default => synth::default_scene(seed),
            Fixture::Occlusion => {
                let (r, c) = match cli.views.as_deref() {
                    Some(v) if !v.contains(',') => rig_for(v.trim().parse().map_err(|_| Error::invalid(format!("bad view count {v:?}")))?),
                    _ => (3, 3),
                };
                synth::occlusion_fixture(seed, r, c).scene
            }
            Fixture::Consistent => synth::consistent_fixture(seed),
        },
    };
    // A count for the occlusion fixture already shaped the rig.
    if !(matches!(fixture, Fixture::Occlusion) && scene_path.is_none()) {
        let picked = select_views(cli.views.as_deref(), scene.cameras.len())?;
        scene.cameras = picked.iter().map(|&i| scene.cameras[i].clone()).collect();
    }
    let mut cfg = load_config(cli, Some(synth::synth_config(scene.cameras.len())))?;
    cfg.n_views = scene.cameras.len();
    let data: SynthData = synth::generate(&scene, cfg.c_img, jitter, seed)?;
    let dir = out_dir(cli)?;
    synth::write_dataset(dir, &data, &cfg)?;
    println!(
        "wrote {} views, {} points to {}",
        data.views.len(),
        data.scan.cloud.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ProjectReport {
    points: usize,
    projections: usize,
    valid_cells: usize,
    scatter: Option<pffm::ScatterStats>,
}

fn project_cmd(cli: &Cli, cloud: &Path, calib: &Path, features: Option<&Path>, plane: Plane) -> Result<ExitCode> {
    let cloud = io::load_cloud(cloud)?;
    let camera = io::load_camera(calib)?;
    let plane = match plane {
        Plane::Image => GridPlane::Image,
        Plane::Feature => GridPlane::Feature,
    };
    let (rows, cols) = camera.grid_size(plane);
    let projs = project_cloud(&camera, &cloud);
    let sparse = sparse_depth_from_projections(&projs, plane, rows, cols);
    let dir = out_dir(cli)?;
    ensure_dir(dir)?;
    io::save_sparse_grid(&dir.join("sparse_depth.lfsg"), &sparse)?;
    let scatter = match features {
        Some(p) => {
            let f = io::load_feature_map(p)?;
            if f.height != 1 || f.width != cloud.len() {
                return Err(Error::shape(format!(
                    "point features are {:?}, expected (C, 1, {})",
                    f.shape(),
                    cloud.len()
                )));
            }
            let rows_f = f.to_cell_major();
            let feats: Vec<Vec<f64>> = projs.iter().map(|p| rows_f[p.point_index].clone()).collect();
            let (h, w) = camera.grid_size(GridPlane::Feature);
            let s = pffm::scatter_point_features(&projs, &feats, f.channels, h, w)?;
            io::save_feature_map(&dir.join("scatter.lffm"), &s.map)?;
            io::save_sparse_grid(&dir.join("scatter_mask.lfsg"), &s.mask)?;
            Some(s.stats)
        }
        None => None,
    };
    print!(
        "{}",
        json(&ProjectReport {
            points: cloud.len(),
            projections: projs.len(),
            valid_cells: sparse.valid_count(),
            scatter,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn fuse_cmd(cli: &Cli, data: &Path) -> Result<ExitCode> {
    let dir = out_dir(cli)?;
    let ds = synth::load_dataset(data)?;
    let picked = select_views(cli.views.as_deref(), ds.cameras.len())?;
    let mut cfg = load_config(cli, ds.config.clone())?;
    cfg.n_views = picked.len();
    let views: Vec<ViewInput> = picked
        .iter()
        .map(|&i| ViewInput {
            features: ds.features[i].clone(),
            predicted_depth: ds.depths[i].clone(),
            camera: ds.cameras[i].clone(),
            labels: ds.labels[i].clone(),
        })
        .collect();
    let result = pipeline::run_fusion(&views, &ds.cloud, ds.point_labels.as_ref(), &cfg)?;

    ensure_dir(dir)?;
    for (i, v) in result.views.iter().enumerate() {
        io::save_feature_map(&dir.join(format!("fused_{i:02}.lffm")), &v.fused)?;
        io::save_feature_map(&dir.join(format!("img_logits_{i:02}.lffm")), &v.image_logits)?;
        io::save_feature_map(&dir.join(format!("fused_logits_{i:02}.lffm")), &v.fused_logits)?;
        io::save_sparse_grid(&dir.join(format!("depth_diff_{i:02}.lfsg")), &v.depth_diff)?;
    }
    let as_map = |l: &LogitMap| FeatureMap::from_vec(l.classes, 1, l.len, l.as_slice().to_vec());
    if let Some(l) = &result.point_logits {
        io::save_feature_map(&dir.join("point_logits.lffm"), &as_map(l)?)?;
    }
    if let Some(l) = &result.voxel_logits {
        io::save_feature_map(&dir.join("voxel_logits.lffm"), &as_map(l)?)?;
    }
    io::save_text(&dir.join("diagnostics.json"), &json(&result.diagnostics()))?;
    io::save_text(&dir.join("losses.txt"), &result.losses.to_text())?;
    io::save_text(&dir.join("losses.json"), &json(&result.losses))?;
    print!("{}", result.losses.to_text());
    Ok(ExitCode::SUCCESS)
}

fn losses_cmd(cli: &Cli, logits: &Path, labels: &Path) -> Result<ExitCode> {
    let logits = LogitMap::from(&io::load_feature_map(logits)?);
    let labels = io::load_labels(labels)?;
    let head = losses::segmentation_loss(&logits, &labels)?;
    let text = format!("ce {:?}\nlovasz {:?}\ntotal {:?}\n", head.ce, head.lovasz, head.total());
    if let Some(dir) = &cli.out_dir {
        ensure_dir(dir)?;
        io::save_text(&dir.join("losses.txt"), &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(cli: &Cli, pred: &Path, labels: &Path, classes: Option<usize>) -> Result<ExitCode> {
    let classes = match classes {
        Some(k) => k,
        None => load_config(cli, None)?.num_classes,
    };
    let labels = io::load_labels(labels)?;
    let pred = if pred.extension().is_some_and(|e| e == "lffm") {
        let logits = LogitMap::from(&io::load_feature_map(pred)?);
        LabelMap {
            height: labels.height,
            width: labels.width,
            labels: logits.argmax(),
        }
    } else {
        io::load_labels(pred)?
    };
    let report = losses::mean_iou(&pred, &labels, classes)?;
    let mut text = String::new();
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => text.push_str(&format!("class {k} {v:.6}\n")),
            None => text.push_str(&format!("class {k} absent\n")),
        }
    }
    text.push_str(&format!("miou {:.6}\n", report.miou));
    if let Some(dir) = &cli.out_dir {
        ensure_dir(dir)?;
        io::save_text(&dir.join("eval.json"), &json(&report))?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Default)]
struct OracleReport {
    projection: f64,
    hole_filling: f64,
    fill_weight_sum: f64,
    voxel_interpolation: f64,
    attention: f64,
    convolution: f64,
    lovasz: Option<f64>,
    iou: Option<f64>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_cmd(cli: &Cli, data: &Path) -> Result<ExitCode> {
    let ds = synth::load_dataset(data)?;
    let cfg = load_config(cli, ds.config.clone())?;
    let mut rep = OracleReport::default();

    let grid = voxel::assign_voxels(&ds.cloud, &cfg.voxel)?;
    let enc = SinusoidalEncoder { channels: cfg.c_p };
    let grid = voxel::featurize_voxels(grid, &ds.cloud, cfg.c_p, |p| enc.encode(p))?;
    if !grid.is_empty() {
        let centers: Vec<[f64; 3]> = (0..grid.len()).map(|v| grid.center(v)).collect();
        let feats: Vec<Vec<f64>> = (0..grid.len()).map(|v| grid.feature(v).to_vec()).collect();
        let step = (ds.cloud.len() / 500).max(1);
        for i in (0..ds.cloud.len()).step_by(step) {
            let q = ds.cloud.xyz(i);
            let got = voxel::interpolate_point_features(&grid, q)?;
            let want = oracle::blend_nearest(&centers, &feats, q, voxel::INTERP_EPS);
            rep.voxel_interpolation = rep.voxel_interpolation.max(max_abs_diff(&got, &want));
        }
    }

    let stack = ConvStack::seeded(cfg.conv_hidden, cfg.c_v, cfg.seed.wrapping_add(1));
    for (vi, camera) in ds.cameras.iter().enumerate() {
        let projs = project_cloud(camera, &ds.cloud);
        for p in &projs {
            let (u, v, d) = oracle::project(camera, ds.cloud.xyz(p.point_index));
            let scale = u.abs().max(v.abs()).max(d.abs()).max(1.0);
            let dev = [p.u - u, p.v - v, p.depth - d].iter().map(|x| x.abs()).fold(0.0, f64::max) / scale;
            rep.projection = rep.projection.max(dev);
        }
        let (h, w) = camera.grid_size(GridPlane::Feature);
        let sparse = sparse_depth_from_projections(&projs, GridPlane::Feature, h, w);
        if let Ok(rect) = pffm::compute_bounding_rectangle(&projs, h, w) {
            let map = FeatureMap::from_vec(1, h, w, sparse.dense().to_vec())?;
            let got = pffm::interpolate_missing(&map, &sparse, &rect)?;
            let (want, sums) = oracle::fill_holes(&map, &sparse, (rect.x_min, rect.x_max, rect.y_min, rect.y_max), pffm::FILL_EPS);
            rep.hole_filling = rep.hole_filling.max(max_abs_diff(got.as_slice(), want.as_slice()));
            for s in sums {
                rep.fill_weight_sum = rep.fill_weight_sum.max((s - 1.0).abs());
            }
        }

        let diff = ddpm::log_depth_difference(&ds.depths[vi], &sparse)?;
        let got = ddpm::conv2_embed(&diff, &stack)?;
        let input = FeatureMap::from_vec(1, h, w, diff.dense().to_vec())?;
        let mid = oracle::conv3x3(&input, &stack.first.weights, &stack.first.bias, stack.first.out_channels);
        let want = oracle::conv3x3(&mid, &stack.second.weights, &stack.second.bias, stack.second.out_channels);
        rep.convolution = rep.convolution.max(max_abs_diff(got.as_slice(), want.as_slice()));
    }

    let center = ds.cameras.len() / 2;
    let feats = &ds.features[center];
    let params = AttentionParams::seeded(feats.channels, cfg.c_q, cfg.c_k, cfg.c_v, cfg.seed)?;
    let got = pffm::self_attention(feats, &params, None, &cfg.attention_options())?;
    let want = oracle::dense_attention(
        feats,
        &params.w_q,
        &params.w_k,
        &params.w_v,
        (params.c_q, params.c_k, params.c_v),
        None,
        &params.gamma,
        &params.beta,
        cfg.layer_norm_eps,
    );
    let want_flat: Vec<f64> = FeatureMap::from_cell_major(&want.normalized, feats.height, feats.width)?.into_vec();
    rep.attention = max_abs_diff(got.fused.as_slice(), &want_flat);

    if let Some(labels) = &ds.labels[center] {
        let head = LinearHead::seeded(feats.channels, cfg.num_classes, cfg.seed.wrapping_add(3));
        let logits = LogitMap::from(&head.apply_map(feats)?);
        let probs = logits.softmax();
        let got = losses::lovasz_softmax(&probs, labels)?;
        let kept: Vec<usize> = (0..labels.len()).filter(|&i| labels.labels[i] != IGNORE_LABEL).collect();
        let rows: Vec<Vec<f64>> = kept.iter().map(|&i| probs.column(i)).collect();
        let kept_labels: Vec<u8> = kept.iter().map(|&i| labels.labels[i]).collect();
        rep.lovasz = Some((got - oracle::lovasz_prefix(&rows, &kept_labels)).abs());

        let pred = LabelMap {
            height: labels.height,
            width: labels.width,
            labels: logits.argmax(),
        };
        let got = losses::mean_iou(&pred, labels, cfg.num_classes)?;
        let want = oracle::confusion_iou(&pred.labels, &labels.labels, cfg.num_classes, IGNORE_LABEL);
        let dev = got
            .per_class
            .iter()
            .zip(&want)
            .map(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => (x - y).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max);
        rep.iou = Some(dev);
    }

    let worst = [
        rep.projection,
        rep.hole_filling,
        rep.fill_weight_sum,
        rep.voxel_interpolation,
        rep.attention,
        rep.convolution,
        rep.lovasz.unwrap_or(0.0),
        rep.iou.unwrap_or(0.0),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let text = json(&rep);
    if let Some(dir) = &cli.out_dir {
        ensure_dir(dir)?;
        io::save_text(&dir.join("oracle.json"), &text)?;
    }
    print!("{text}");
    if worst > ORACLE_TOLERANCE || worst.is_nan() {
        eprintln!("error: oracle deviation {worst:e} exceeds {ORACLE_TOLERANCE:e}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}
