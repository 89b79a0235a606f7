use lfseg::config::PipelineConfig;
use lfseg::dataset::synth::{self, SynthData};
use lfseg::geometry::PointCloud;
use lfseg::pipeline::{run_fusion, ViewInput};
use lfseg::{Error, FeatureMap, LabelMap};

fn small(n_views: usize) -> PipelineConfig {
    let mut cfg = synth::synth_config(n_views);
    cfg.c_img = 6;
    cfg.c_p = 6;
    cfg.c_q = 4;
    cfg.c_k = 4;
    cfg.c_v = 5;
    cfg
}

fn views_of(data: &SynthData, labelled: bool) -> Vec<ViewInput> {
    data.views
        .iter()
        .map(|v| ViewInput {
            features: v.features.clone(),
            predicted_depth: v.depth.clone(),
            camera: v.camera.clone(),
            labels: labelled.then(|| v.rendered.labels.clone()),
        })
        .collect()
}

fn occlusion_data(seed: u64, cfg: &PipelineConfig) -> SynthData {
    let scene = synth::occlusion_fixture(seed, 3, 3).scene;
    synth::generate(&scene, cfg.c_img, 0.0, seed).unwrap()
}

#[test]
fn empty_cloud_falls_back_to_image_features() {
    let cfg = small(1);
    let mut scene = synth::default_scene(0);
    scene.cameras.truncate(1);
    let data = synth::generate(&scene, cfg.c_img, 0.0, 0).unwrap();
    let res = run_fusion(&views_of(&data, true), &PointCloud::default(), None, &cfg).unwrap();
    let d = &res.views[0].diagnostics;
    assert!(d.degenerate);
    assert_eq!(d.rect, None);
    assert_eq!(d.projections, 0);
    assert_eq!(d.align_loss, 0.0);
    assert_eq!(d.depth_diff.valid_cells, 0);
    assert!(res.point_logits.is_none() && res.voxel_logits.is_none());
    let img = res.losses.image.as_ref().unwrap();
    assert!(img.sides.is_empty());
    assert_eq!(res.losses.total, res.losses.image_total);
}

#[test]
fn occlusion_rig_rects_differ_and_target_stands_out() {
    let cfg = small(9);
    let data = occlusion_data(3, &cfg);
    let res = run_fusion(&views_of(&data, true), &data.scan.cloud, None, &cfg).unwrap();
    let rects: Vec<_> = res.views.iter().map(|v| v.diagnostics.rect.unwrap()).collect();
    assert!(rects.iter().any(|r| *r != rects[0]), "{rects:?}");
    // Same numbers the pipeline reports, recomputed with the target split out.
    let fx = synth::occlusion_fixture(3, 3, 3);
    let c = synth::occlusion_contrast(&fx, 4).unwrap();
    assert!(c.object_mean >= 2.0 * c.background_mean);
    let d = &res.views[4].diagnostics.depth_diff;
    assert_eq!(d.valid_cells, c.object_cells + c.background_cells);
    let pooled = (c.object_mean * c.object_cells as f64 + c.background_mean * c.background_cells as f64) / d.valid_cells as f64;
    assert!((d.mean_abs - pooled).abs() < 1e-12);
}

#[test]
fn diagnostics_conserve_projections() {
    let cfg = small(9);
    let data = synth::generate(&synth::default_scene(9), cfg.c_img, 0.0, 9).unwrap();
    let res = run_fusion(&views_of(&data, false), &data.scan.cloud, None, &cfg).unwrap();
    for v in &res.views {
        let d = &v.diagnostics;
        assert_eq!(d.scatter.scattered + d.scatter.clamped + d.scatter.collided, d.projections);
    }
    assert!(res.losses.total.is_none());
    assert_eq!(res.points.points, data.scan.cloud.len());
    assert!(res.points.seen > 0 && res.points.seen <= res.points.points);
}

#[test]
fn without_depth_cue_predicted_depth_is_irrelevant() {
    let mut cfg = small(3);
    cfg.use_depth_difference = false;
    cfg.align_weight = 0.0;
    let mut scene = synth::default_scene(5);
    scene.cameras.truncate(3);
    let data = synth::generate(&scene, cfg.c_img, 0.0, 5).unwrap();
    let labels = LabelMap::points(data.scan.labels.clone());
    let a = run_fusion(&views_of(&data, true), &data.scan.cloud, Some(&labels), &cfg).unwrap();
    let mut shifted = views_of(&data, true);
    for v in &mut shifted {
        let (c, h, w) = v.predicted_depth.shape();
        v.predicted_depth = FeatureMap::from_fn(c, h, w, |_, r, col| 3.0 + (r * w + col) as f64);
    }
    let b = run_fusion(&shifted, &data.scan.cloud, Some(&labels), &cfg).unwrap();
    for (x, y) in a.views.iter().zip(&b.views) {
        assert_eq!(x.fused, y.fused);
        assert_eq!(x.image_logits, y.image_logits);
    }
    assert_eq!(a.point_logits, b.point_logits);
    assert_eq!(a.losses, b.losses);

    // With the cue enabled the same change moves the output.
    cfg.use_depth_difference = true;
    let a = run_fusion(&views_of(&data, true), &data.scan.cloud, Some(&labels), &cfg).unwrap();
    let b = run_fusion(&shifted, &data.scan.cloud, Some(&labels), &cfg).unwrap();
    assert_ne!(a.views[0].fused, b.views[0].fused);
}

#[test]
fn image_resolution_depth_is_accepted() {
    let cfg = small(1);
    let mut scene = synth::default_scene(2);
    scene.cameras.truncate(1);
    let data = synth::generate(&scene, cfg.c_img, 0.0, 2).unwrap();
    let mut views = views_of(&data, false);
    views[0].predicted_depth = FeatureMap::from_fn(1, 96, 128, |_, _, _| 12.0);
    let res = run_fusion(&views, &data.scan.cloud, None, &cfg).unwrap();
    assert!(res.views[0].diagnostics.depth_diff.valid_cells > 0);
}

#[test]
fn errors_name_the_view() {
    let cfg = small(2);
    let mut scene = synth::default_scene(2);
    scene.cameras.truncate(2);
    let data = synth::generate(&scene, cfg.c_img, 0.0, 2).unwrap();
    let mut views = views_of(&data, false);
    views[1].predicted_depth = FeatureMap::from_fn(1, 24, 32, |_, _, _| -1.0);
    let err = run_fusion(&views, &data.scan.cloud, None, &cfg).unwrap_err();
    assert!(err.to_string().contains("view 1"), "{err}");
    assert!(matches!(err.root(), Error::Invalid(_)));

    let err = run_fusion(&views[..1], &data.scan.cloud, None, &cfg).unwrap_err();
    assert!(err.to_string().contains("expects 2 views"), "{err}");

    let mut partial = views_of(&data, true);
    partial[0].labels = None;
    assert!(run_fusion(&partial, &data.scan.cloud, None, &cfg).is_err());
}

#[test]
fn cloud_outside_voxel_bounds_is_rejected() {
    let mut cfg = small(1);
    cfg.voxel.min_bound = [100.0, 100.0, 100.0];
    cfg.voxel.max_bound = [101.0, 101.0, 101.0];
    let mut scene = synth::default_scene(0);
    scene.cameras.truncate(1);
    let data = synth::generate(&scene, cfg.c_img, 0.0, 0).unwrap();
    let err = run_fusion(&views_of(&data, false), &data.scan.cloud, None, &cfg).unwrap_err();
    assert!(err.to_string().contains("voxel bounds"), "{err}");
}
