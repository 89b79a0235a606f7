//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3x4, Matrix4, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfseg::dataset::io;
use lfseg::dataset::synth;
use lfseg::ddpm;
use lfseg::geometry::{project_point, CameraModel, PointCloud, SparseGrid};
use lfseg::losses::{self, HeadLoss, ImageLossTerms, LabelMap, LogitMap, LossWeights, IGNORE_LABEL};
use lfseg::oracle;
use lfseg::pffm::{self, AttentionOptions, AttentionParams, BoundingRect};
use lfseg::pipeline::{self, ViewInput};
use lfseg::voxel::{self, SinusoidalEncoder, VoxelGridConfig};
use lfseg::FeatureMap;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-2.0..2.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn interpolation_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let (h, w) = (16, 16);
        let frac = rng.gen_range(0.1..0.9);
        let mut mask = SparseGrid::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                if rng.gen_bool(frac) {
                    mask.set(r, c, rng.gen_range(1.0..50.0));
                }
            }
        }
        if mask.valid_count() == 0 {
            mask.set(rng.gen_range(0..h), rng.gen_range(0..w), 1.0);
        }
        let map = FeatureMap::from_fn(4, h, w, |_, r, c| if mask.is_valid(r, c) { rng.gen_range(-5.0..5.0) } else { 0.0 });
        // Alternate between the full grid and the bounding box of the valid cells.
        let rect = if case % 2 == 0 {
            BoundingRect::full(h, w)
        } else {
            let cells: Vec<_> = mask.iter_valid().map(|(r, c, _)| (r, c)).collect();
            BoundingRect {
                x_min: cells.iter().map(|p| p.1).min().unwrap(),
                x_max: cells.iter().map(|p| p.1).max().unwrap(),
                y_min: cells.iter().map(|p| p.0).min().unwrap(),
                y_max: cells.iter().map(|p| p.0).max().unwrap(),
            }
        };
        let got = pffm::interpolate_missing(&map, &mask, &rect).map_err(|e| e.to_string())?;
        let (want, sums) = oracle::fill_holes(&map, &mask, (rect.x_min, rect.x_max, rect.y_min, rect.y_max), pffm::FILL_EPS);
        worst = worst.max(max_abs_diff(got.as_slice(), want.as_slice()));
        for s in sums {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        for r in rect.y_min..=rect.y_max {
            for c in rect.x_min..=rect.x_max {
                if !mask.is_valid(r, c) {
                    let s: f64 = pffm::fill_neighbours(&mask, &rect, r, c).iter().map(|x| x.1).sum();
                    worst_sum = worst_sum.max((s - 1.0).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max cell deviation {worst:e}"))?;
    ensure(worst_sum <= 1e-12, || format!("weight sum off by {worst_sum:e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("max deviation {worst:.1e}, weight sums within {worst_sum:.1e}"))
}

fn voxel_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = VoxelGridConfig::default();
    let enc = SinusoidalEncoder { channels: 8 };
    let mut worst = 0.0f64;
    let mut queries = 0;
    for case in 0..50 {
        let n = rng.gen_range(1..=5000);
        // Odd cases pack points tightly so voxels fill and overflow.
        let extent: f64 = if case % 2 == 0 { 8.0 } else { 0.6 };
        let origin = [rng.gen_range(-40.0..30.0), rng.gen_range(10.0..90.0), rng.gen_range(-5.0..0.0)];
        let pts: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                [
                    origin[0] + rng.gen_range(0.0..extent),
                    origin[1] + rng.gen_range(0.0..extent),
                    origin[2] + rng.gen_range(0.0..extent.min(4.0)),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(pts).map_err(|e| e.to_string())?;
        let grid = voxel::assign_voxels(&cloud, &cfg).map_err(|e| e.to_string())?;
        let grid = voxel::featurize_voxels(grid, &cloud, 8, |p| enc.encode(p)).map_err(|e| e.to_string())?;
        let centers: Vec<[f64; 3]> = (0..grid.len()).map(|v| grid.center(v)).collect();
        let feats: Vec<Vec<f64>> = (0..grid.len()).map(|v| grid.feature(v).to_vec()).collect();
        let mut qs: Vec<[f64; 3]> = (0..n).step_by((n / 200).max(1)).map(|i| cloud.xyz(i)).collect();
        qs.extend((0..20).map(|_| [origin[0] + rng.gen_range(-1.0..extent + 1.0), origin[1] + rng.gen_range(-1.0..extent + 1.0), origin[2] + rng.gen_range(-1.0..5.0)]));
        qs.extend(centers.iter().take(10).copied());
        for q in qs {
            let got = voxel::interpolate_point_features(&grid, q).map_err(|e| e.to_string())?;
            let want = oracle::blend_nearest(&centers, &feats, q, voxel::INTERP_EPS);
            worst = worst.max(max_abs_diff(&got, &want));
            queries += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("{queries} queries, max deviation {worst:.1e}"))
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    let (hh, ww) = (rng.gen_range(48..200usize), rng.gen_range(64..300usize));
    let (h, w) = (hh / 4, ww / 4);
    let f = rng.gen_range(50.0..400.0);
    #[rustfmt::skip]
    let k = Matrix3x4::new(
        f, rng.gen_range(-1.0..1.0), ww as f64 / 2.0 + rng.gen_range(-5.0..5.0), 0.0,
        0.0, f * rng.gen_range(0.9..1.1), hh as f64 / 2.0 + rng.gen_range(-5.0..5.0), 0.0,
        0.0, 0.0, 1.0, 0.0,
    );
    let rot = Rotation3::from_euler_angles(rng.gen_range(-0.3..0.3), rng.gen_range(-3.1..3.1), rng.gen_range(-0.3..0.3));
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
    for i in 0..3 {
        t[(i, 3)] = rng.gen_range(-2.0..2.0);
    }
    CameraModel::new(k, t, (hh, ww), (h, w)).unwrap()
}

fn projection_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_pt, mut worst_px) = (0.0f64, 0.0f64);
    let mut cam = random_camera(&mut rng);
    for i in 0..10_000 {
        if i % 500 == 0 {
            cam = random_camera(&mut rng);
        }
        let u = rng.gen_range(0.0..cam.image_width as f64);
        let v = rng.gen_range(0.0..cam.image_height as f64);
        let depth = rng.gen_range(0.5..120.0);
        let p = cam.unproject(u, v, depth).ok_or("singular camera")?;
        let pt = [p[0], p[1], p[2]];
        let proj = project_point(&cam, pt).ok_or_else(|| format!("point {pt:?} left the frustum"))?;
        let px_err = ((proj.u - u).abs() / u.abs().max(1.0))
            .max((proj.v - v).abs() / v.abs().max(1.0))
            .max((proj.depth - depth).abs() / depth);
        worst_px = worst_px.max(px_err);
        let back = cam.unproject(proj.u, proj.v, proj.depth).ok_or("singular camera")?;
        let scale = p.norm().max(1.0);
        worst_pt = worst_pt.max((back - p).norm() / scale);
        let exact = proj.u_feat == proj.u * cam.feature_width as f64 / cam.image_width as f64
            && proj.v_feat == proj.v * cam.feature_height as f64 / cam.image_height as f64;
        ensure(exact, || format!("feature-grid scaling off at {proj:?}"))?;
    }
    ensure(worst_pt <= 1e-6 && worst_px <= 1e-6, || {
        format!("relative error point {worst_pt:e}, pixel {worst_px:e}")
    })?;
    Ok(format!("10000 points, relative error {:.1e}", worst_pt.max(worst_px)))
}

fn attention_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for case in 0..60 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let c = rng.gen_range(1..10);
        let (cq, cv) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let params = AttentionParams::seeded(c, cq, cq, cv, case).map_err(|e| e.to_string())?;
        let x = random_map(&mut rng, c, h, w);
        let bias = (case % 2 == 1).then(|| random_map(&mut rng, cv, h, w));
        let opts = AttentionOptions::default();
        let got = pffm::self_attention(&x, &params, bias.as_ref(), &opts).map_err(|e| e.to_string())?;
        let want = oracle::dense_attention(&x, &params.w_q, &params.w_k, &params.w_v, (cq, cq, cv), bias.as_ref(), &params.gamma, &params.beta, opts.layer_norm_eps);
        let flat = |rows: &[Vec<f64>]| rows.concat();
        let probs = got.probabilities.as_ref().ok_or("probabilities not kept on a small grid")?;
        worst = worst
            .max(max_abs_diff(&got.attention, &flat(&want.attention)))
            .max(max_abs_diff(probs, &flat(&want.probabilities)))
            .max(max_abs_diff(&got.fused.to_cell_major().concat(), &flat(&want.normalized)));
        let n = h * w;
        for row in probs.chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    // A single cell attends only to itself: the output is its value vector.
    for seed in 0..10 {
        let c = 5;
        let params = AttentionParams::seeded(c, 3, 3, 4, 100 + seed).map_err(|e| e.to_string())?;
        let x = random_map(&mut rng, c, 1, 1);
        let got = pffm::self_attention(&x, &params, None, &AttentionOptions::default()).map_err(|e| e.to_string())?;
        let mut v = vec![0.0; 4];
        for ch in 0..c {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += x.get(ch, 0, 0) * params.w_v[ch * 4 + j];
            }
        }
        ensure(got.attention == v, || format!("single cell gave {:?}, value is {v:?}", got.attention))?;
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    ensure(worst_row <= 1e-12, || format!("softmax rows off by {worst_row:e}"))?;
    Ok(format!("max deviation {worst:.1e}, row sums within {worst_row:.1e}"))
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let filled = random_map(&mut rng, c, h, w);
        let image = random_map(&mut rng, c, h, w);
        let (_, grad) = pffm::alignment_loss(&filled, &image).map_err(|e| e.to_string())?;
        let numeric = oracle::central_difference(filled.as_slice(), 1e-4, |x| {
            let f = FeatureMap::from_vec(c, h, w, x.to_vec()).unwrap();
            pffm::alignment_loss(&f, &image).unwrap().0
        });
        worst = worst.max(oracle::relative_error(grad.as_slice(), &numeric));
    }
    for _ in 0..20 {
        let (k, n) = (rng.gen_range(2..6), rng.gen_range(2..12));
        let data: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        labels[0] = IGNORE_LABEL;
        let labels = LabelMap::points(labels);
        let logits = LogitMap::new(k, n, data.clone()).unwrap();
        let (_, grad) = losses::cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
        let numeric = oracle::central_difference(&data, 1e-4, |x| {
            losses::cross_entropy(&LogitMap::new(k, n, x.to_vec()).unwrap(), &labels).unwrap().0
        });
        worst = worst.max(oracle::relative_error(grad.as_slice(), &numeric));
    }
    ensure(worst <= 1e-5, || format!("relative gradient error {worst:e}"))?;
    Ok(format!("40 instances, max relative error {worst:.1e}"))
}

fn lovasz_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for code in 0..3usize.pow(6) {
        let labels: Vec<u8> = (0..6).map(|i| ((code / 3usize.pow(i)) % 3) as u8).collect();
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| losses::softmax(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]))
                .collect();
            let mut data = vec![0.0; 18];
            for (i, r) in rows.iter().enumerate() {
                for (k, p) in r.iter().enumerate() {
                    data[k * 6 + i] = *p;
                }
            }
            let probs = LogitMap::new(3, 6, data).unwrap();
            let got = losses::lovasz_softmax(&probs, &LabelMap::points(labels.clone())).map_err(|e| e.to_string())?;
            worst = worst.max((got - oracle::lovasz_prefix(&rows, &labels)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("7290 instances, max deviation {worst:.1e}"))
}

fn small_config(n_views: usize) -> lfseg::config::PipelineConfig {
    let mut cfg = synth::synth_config(n_views);
    cfg.c_img = 8;
    cfg.c_p = 8;
    cfg.c_q = 8;
    cfg.c_k = 8;
    cfg.c_v = 8;
    cfg
}

fn views_of(data: &synth::SynthData) -> Vec<ViewInput> {
    data.views
        .iter()
        .map(|v| ViewInput {
            features: v.features.clone(),
            predicted_depth: v.depth.clone(),
            camera: v.camera.clone(),
            labels: Some(v.rendered.labels.clone()),
        })
        .collect()
}

fn ddpm_occlusion() -> Check {
    let start = Instant::now();
    let mut min_ratio = f64::INFINITY;
    for seed in 0..20 {
        let fx = synth::occlusion_fixture(seed, 3, 3);
        let c = synth::occlusion_contrast(&fx, fx.scene.center_view()).map_err(|e| e.to_string())?;
        ensure(c.object_cells > 0, || format!("fixture {seed}: target has no LiDAR cells"))?;
        ensure(c.object_mean >= 2.0 * c.background_mean, || format!("fixture {seed}: {c:?}"))?;
        if c.background_mean > 0.0 {
            min_ratio = min_ratio.min(c.ratio());
        }
    }
    let mut worst = 0.0f64;
    let cfg = small_config(1);
    for seed in 0..20 {
        let scene = synth::consistent_fixture(seed);
        let data = synth::generate(&scene, cfg.c_img, 0.0, seed).map_err(|e| e.to_string())?;
        let res = pipeline::run_fusion(&views_of(&data), &data.scan.cloud, Some(&LabelMap::points(data.scan.labels.clone())), &cfg)
            .map_err(|e| e.to_string())?;
        let d = &res.views[0].diagnostics.depth_diff;
        ensure(d.valid_cells > 0, || format!("consistent fixture {seed}: no LiDAR cells"))?;
        worst = worst.max(d.mean_abs);
    }
    ensure(worst < 1e-3, || format!("consistent fixtures mean |D_diff| up to {worst:e}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("min object/background ratio {min_ratio:.2}, consistent mean {worst:.1e}"))
}

fn log_compression() -> Check {
    let diff_at = |range: f64| -> Result<f64, String> {
        let pred = FeatureMap::from_vec(1, 1, 1, vec![range + 1.0]).unwrap();
        let mut sparse = SparseGrid::empty(1, 1);
        sparse.set(0, 0, range);
        let d = ddpm::log_depth_difference(&pred, &sparse).map_err(|e| e.to_string())?;
        Ok(d.get(0, 0).ok_or("cell dropped")?.abs())
    };
    let ranges = [1.0, 5.0, 10.0, 50.0, 100.0];
    let vals = ranges.iter().map(|&r| diff_at(r)).collect::<Result<Vec<_>, _>>()?;
    for (i, pair) in vals.windows(2).enumerate() {
        ensure(pair[1] < pair[0], || format!("|D_diff| not decreasing between {} m and {} m", ranges[i], ranges[i + 1]))?;
        let analytic = ((ranges[i + 1] + 1.0) / ranges[i + 1]).ln();
        ensure((pair[1] - analytic).abs() < 1e-9, || format!("|D_diff| at {} m is {}, expected {analytic}", ranges[i + 1], pair[1]))?;
    }
    ensure(vals[4] < vals[0], || "100 m not below 1 m".into())?;
    Ok(format!("|D_diff| {:.4} at 1 m down to {:.5} at 100 m", vals[0], vals[4]))
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_lfseg");
    let data = tmp.path().join("data");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("lfseg {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    };
    let s = |p: &Path| p.to_string_lossy().into_owned();
    run(&["synth", "--seed", "5", "--out-dir", &s(&data)])?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&["fuse", "--data", &s(&data), "--out-dir", &s(&a)])?;
    run(&["fuse", "--data", &s(&data), "--out-dir", &s(&b)])?;
    let (fa, fb) = (files_in(&a), files_in(&b));
    ensure(fa.len() >= 9 * 4 + 5, || format!("only {} output files", fa.len()))?;
    ensure(fa == fb, || "fuse outputs differ between runs".into())?;

    let ds = synth::load_dataset(&data).map_err(|e| e.to_string())?;
    let cfg = ds.config.clone().ok_or("dataset has no config")?;
    let views: Vec<ViewInput> = (0..ds.cameras.len())
        .map(|i| ViewInput {
            features: ds.features[i].clone(),
            predicted_depth: ds.depths[i].clone(),
            camera: ds.cameras[i].clone(),
            labels: ds.labels[i].clone(),
        })
        .collect();
    let perm = [3, 7, 0, 8, 1, 5, 2, 6, 4];
    let permuted: Vec<ViewInput> = perm.iter().map(|&i| views[i].clone()).collect();
    let base = pipeline::run_fusion(&views, &ds.cloud, ds.point_labels.as_ref(), &cfg).map_err(|e| e.to_string())?;
    let other = pipeline::run_fusion(&permuted, &ds.cloud, ds.point_labels.as_ref(), &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (j, &i) in perm.iter().enumerate() {
        let (x, y) = (&base.views[i], &other.views[j]);
        worst = worst
            .max(max_abs_diff(x.fused.as_slice(), y.fused.as_slice()))
            .max(max_abs_diff(x.image_logits.as_slice(), y.image_logits.as_slice()));
    }
    let (pa, pb) = (base.point_logits.as_ref().ok_or("no point logits")?, other.point_logits.as_ref().ok_or("no point logits")?);
    let point_dev = max_abs_diff(pa.as_slice(), pb.as_slice());
    ensure(worst <= 1e-12, || format!("per-view outputs moved by {worst:e} under permutation"))?;
    ensure(point_dev <= 1e-12, || format!("point logits moved by {point_dev:e} under permutation"))?;
    Ok(format!("{} files bit-identical, permutation deviation {:.1e}", fa.len(), worst.max(point_dev)))
}

fn random_head(rng: &mut ChaCha8Rng, k: usize, n: usize) -> (LogitMap, LabelMap) {
    let logits = LogitMap::new(k, n, (0..k * n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let labels = LabelMap::points((0..n).map(|_| rng.gen_range(0..k) as u8).collect());
    (logits, labels)
}

fn loss_composition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (k, n) = (rng.gen_range(2..8), rng.gen_range(4..40));
        let mut heads = Vec::new();
        for _ in 0..9 {
            let (l, t) = random_head(&mut rng, k, n);
            heads.push(losses::segmentation_loss(&l, &t).map_err(|e| e.to_string())?);
        }
        let (fl, ft) = random_head(&mut rng, k, n);
        let fused_ce = losses::cross_entropy(&fl, &ft).map_err(|e| e.to_string())?.0;
        let align = rng.gen_range(0.0..3.0);
        let weights = match case % 3 {
            0 => LossWeights { alpha1: 0.0, alpha2: 0.0 },
            _ => LossWeights { alpha1: rng.gen_range(0.0..1.0), alpha2: rng.gen_range(0.0..1.0) },
        };
        let n_sides = case % 9;
        let terms = ImageLossTerms {
            center: heads[0],
            fused_ce,
            align,
            sides: heads[1..=n_sides].to_vec(),
        };
        let total = losses::total_image_loss(&terms, &weights);
        let mut expect = heads[0].ce + heads[0].lovasz + fused_ce + align;
        for h in &heads[1..=n_sides] {
            expect += weights.alpha1 * h.ce + weights.alpha2 * h.lovasz;
        }
        worst = worst.max((total - expect).abs());
        if weights.alpha1 == 0.0 && weights.alpha2 == 0.0 {
            let base = heads[0].ce + heads[0].lovasz + fused_ce + align;
            worst = worst.max((total - base).abs());
        }

        let (pl, pt) = random_head(&mut rng, k, n);
        let (vl, vt) = random_head(&mut rng, k, n);
        let p = losses::total_point_loss(&pl, &pt, &vl, &vt).map_err(|e| e.to_string())?;
        let lp = losses::segmentation_loss(&pl, &pt).map_err(|e| e.to_string())?;
        let lv = losses::segmentation_loss(&vl, &vt).map_err(|e| e.to_string())?;
        worst = worst.max((p.total - (lp.ce + lp.lovasz + lv.ce + lv.lovasz)).abs());
        worst = worst.max((losses::total_loss(total, p.total) - (expect + lp.ce + lp.lovasz + lv.ce + lv.lovasz)).abs());
    }

    // The pipeline's report obeys the same composition.
    let cfg = small_config(9);
    let data = synth::generate(&synth::default_scene(2), cfg.c_img, 0.1, 2).map_err(|e| e.to_string())?;
    let res = pipeline::run_fusion(&views_of(&data), &data.scan.cloud, Some(&LabelMap::points(data.scan.labels.clone())), &cfg)
        .map_err(|e| e.to_string())?;
    let rep = &res.losses;
    let img = rep.image.as_ref().ok_or("no image losses")?;
    let pt = rep.point.as_ref().ok_or("no point losses")?;
    let side_sum = |f: fn(&HeadLoss) -> f64| img.sides.iter().map(f).sum::<f64>();
    let img_expect = img.center.ce + img.center.lovasz + img.fused_ce + img.align + cfg.alpha1 * side_sum(|h| h.ce) + cfg.alpha2 * side_sum(|h| h.lovasz);
    worst = worst.max((rep.image_total.unwrap() - img_expect).abs());
    worst = worst.max((rep.total.unwrap() - (img_expect + pt.point.ce + pt.point.lovasz + pt.voxel.ce + pt.voxel.lovasz)).abs());
    ensure(img.sides.len() == 8, || format!("{} side views", img.sides.len()))?;
    ensure(worst <= 1e-12, || format!("max composition error {worst:e}"))?;
    Ok(format!("max composition error {worst:.1e}"))
}

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Binary payloads are float32, so the fixtures hold float32 values.
    let mut f = |lo: f32, hi: f32| rng.gen_range(lo..hi) as f64;
    let cloud = PointCloud::new((0..257).map(|_| [f(-1e3, 1e3), f(-1.0, 1.0), f(0.0, 1e-7), f(0.0, 1.0)]).collect()).unwrap();
    let map = FeatureMap::from_fn(3, 5, 7, |_, _, _| f(-2.0, 2.0));
    let mut grid = SparseGrid::empty(6, 4);
    for _ in 0..10 {
        let (r, c, v) = (rng.gen_range(0..6), rng.gen_range(0..4), rng.gen_range(0.1f32..80.0) as f64);
        grid.set(r, c, v);
    }
    let labels = LabelMap::new(4, 5, (0..20).map(|i| if i % 7 == 0 { IGNORE_LABEL } else { rng.gen_range(0..15) }).collect()).unwrap();
    let cam = random_camera(&mut rng);
    let empty = PointCloud::new(vec![]).unwrap();

    let cloud_bytes = io::encode_cloud(&cloud).map_err(|e| e.to_string())?;
    ensure(io::decode_cloud(&cloud_bytes).map_err(|e| e.to_string())? == cloud, || "cloud round trip".into())?;
    let empty_bytes = io::encode_cloud(&empty).map_err(|e| e.to_string())?;
    ensure(io::decode_cloud(&empty_bytes).map_err(|e| e.to_string())?.is_empty(), || "empty cloud round trip".into())?;
    let map_bytes = io::encode_feature_map(&map).map_err(|e| e.to_string())?;
    ensure(io::decode_feature_map(&map_bytes).map_err(|e| e.to_string())? == map, || "feature map round trip".into())?;
    let grid_bytes = io::encode_sparse_grid(&grid).map_err(|e| e.to_string())?;
    ensure(io::decode_sparse_grid(&grid_bytes).map_err(|e| e.to_string())? == grid, || "sparse grid round trip".into())?;
    let label_bytes = io::encode_labels(&labels).map_err(|e| e.to_string())?;
    ensure(io::decode_labels(&label_bytes).map_err(|e| e.to_string())? == labels, || "labels round trip".into())?;
    for (name, bytes) in [("cloud", &cloud_bytes), ("feature map", &map_bytes), ("sparse grid", &grid_bytes), ("labels", &label_bytes)] {
        let again = match name {
            "cloud" => io::encode_cloud(&io::decode_cloud(bytes).unwrap()),
            "feature map" => io::encode_feature_map(&io::decode_feature_map(bytes).unwrap()),
            "sparse grid" => io::encode_sparse_grid(&io::decode_sparse_grid(bytes).unwrap()),
            _ => io::encode_labels(&io::decode_labels(bytes).unwrap()),
        }
        .map_err(|e| e.to_string())?;
        ensure(&again == bytes, || format!("{name} bytes changed on re-encode"))?;
    }
    let cam_text = io::encode_camera(&cam);
    let back = io::decode_camera(&cam_text).map_err(|e| e.to_string())?;
    ensure(back == cam, || "camera round trip".into())?;

    // Every truncation and an appended byte must be rejected with a diagnostic.
    let mut checked = 0;
    let corrupt = |name: &str, bytes: &[u8], decode: &dyn Fn(&[u8]) -> Result<(), String>| -> Result<usize, String> {
        let mut n = 0;
        for cut in 0..bytes.len() {
            let r = panic::catch_unwind(AssertUnwindSafe(|| decode(&bytes[..cut])));
            match r {
                Err(_) => return Err(format!("{name}: panic on {cut}-byte prefix")),
                Ok(Ok(())) => return Err(format!("{name}: {cut}-byte prefix accepted")),
                Ok(Err(msg)) => {
                    if cut >= 4 && !(msg.contains("expected") && msg.contains(&format!("{cut}"))) && !msg.contains("magic") {
                        return Err(format!("{name}: weak diagnostic for {cut}-byte prefix: {msg}"));
                    }
                }
            }
            n += 1;
        }
        let mut longer = bytes.to_vec();
        longer.push(0);
        ensure(decode(&longer).is_err(), || format!("{name}: trailing byte accepted"))?;
        let mut bad = bytes.to_vec();
        bad[0] ^= 0xff;
        ensure(decode(&bad).is_err(), || format!("{name}: bad magic accepted"))?;
        Ok(n + 2)
    };
    checked += corrupt("cloud", &cloud_bytes, &|b| io::decode_cloud(b).map(|_| ()).map_err(|e| e.to_string()))?;
    checked += corrupt("feature map", &map_bytes, &|b| io::decode_feature_map(b).map(|_| ()).map_err(|e| e.to_string()))?;
    checked += corrupt("sparse grid", &grid_bytes, &|b| io::decode_sparse_grid(b).map(|_| ()).map_err(|e| e.to_string()))?;
    checked += corrupt("labels", &label_bytes, &|b| io::decode_labels(b).map(|_| ()).map_err(|e| e.to_string()))?;
    let lines: Vec<&str> = cam_text.lines().collect();
    for keep in 0..lines.len() {
        let text = lines[..keep].join("\n");
        let r = panic::catch_unwind(|| io::decode_camera(&text));
        ensure(matches!(r, Ok(Err(_))), || format!("calibration cut to {keep} lines not rejected"))?;
        checked += 1;
    }
    Ok(format!("5 formats round-trip exactly, {checked} corruptions rejected"))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, fn() -> Check); 11] = [
        ("interpolation oracle equivalence", interpolation_oracle),
        ("voxel interpolation oracle", voxel_oracle),
        ("projection round trip", projection_round_trip),
        ("attention correctness", attention_oracle),
        ("gradient checks", gradient_checks),
        ("lovasz correctness", lovasz_oracle),
        ("depth-difference occlusion property", ddpm_occlusion),
        ("log compression", log_compression),
        ("end-to-end determinism", determinism),
        ("loss-stack composition", loss_composition),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
