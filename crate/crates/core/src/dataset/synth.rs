//! Deterministic synthetic scenes and the dataset directory layout.
//!
//! A dataset directory holds:
//!
//! ```text
//! scene.txt            scene description that produced the data
//! config.cfg           pipeline configuration
//! cloud.lfpc           LiDAR cloud (LiDAR frame)
//! point_labels.lflm    1 x N point classes
//! cam_XX.calib         per-view calibration
//! feat_XX.lffm         per-view c_img x h x w image features
//! depth_XX.lffm        per-view 1 x h x w predicted depth
//! labels_XX.lflm       per-view h x w cell classes
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io;
use super::scene::{render_view, sample_lidar, LidarScan, LidarSpec, Primitive, RenderedView, Scene, SceneCamera};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::ddpm::log_depth_difference;
use crate::geometry::{project_cloud, sparse_depth_from_projections, CameraModel, GridPlane, PointCloud};
use crate::losses::{LabelMap, IGNORE_LABEL};

/// Depth reported by the toy predictor where a ray escapes the scene.
pub const FAR_DEPTH: f64 = 1000.0;

pub const RIG_BASELINE: f64 = 0.3;

const IMAGE: (usize, usize) = (96, 128);
const FEATURE: (usize, usize) = (24, 32);
const FOCAL: f64 = 100.0;

fn camera_at(position: [f64; 3]) -> SceneCamera {
    SceneCamera {
        fx: FOCAL,
        fy: FOCAL,
        cx: IMAGE.1 as f64 / 2.0,
        cy: IMAGE.0 as f64 / 2.0,
        image_size: IMAGE,
        feature_size: FEATURE,
        position,
    }
}

/// `rows x cols` cameras centred on the origin, row-major.
pub fn rig(rows: usize, cols: usize, baseline: f64) -> Vec<SceneCamera> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(camera_at([
                (c as f64 - (cols - 1) as f64 / 2.0) * baseline,
                (r as f64 - (rows - 1) as f64 / 2.0) * baseline,
                0.0,
            ]));
        }
    }
    out
}

/// Street-like scene: a back wall and a handful of random boxes in front of
/// a 3x3 rig, scanned by a LiDAR mounted just above the rig.
pub fn default_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = vec![Primitive::Plane { z: 40.0, class: 0 }];
    for _ in 0..6 {
        let z = rng.gen_range(6.0..25.0);
        let center = [rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.25..0.35) * z, z];
        let size = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..3.0)];
        primitives.push(Primitive::aabb(center, size, rng.gen_range(1..15)));
    }
    Scene {
        primitives,
        cameras: rig(3, 3, RIG_BASELINE),
        lidar: LidarSpec {
            position: [0.0, -0.5, 0.0],
            azimuth: (-36.0, 36.0, 160),
            elevation: (-28.0, 28.0, 64),
            max_range: 120.0,
        },
    }
}

/// An object visible to the LiDAR but largely hidden from the cameras by a
/// thin panel close to the rig.
#[derive(Debug, Clone)]
pub struct OcclusionFixture {
    pub scene: Scene,
    pub target: usize,
    pub occluder: usize,
}

pub fn occlusion_fixture(seed: u64, rows: usize, cols: usize) -> OcclusionFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = rng.gen_range(10.0..14.0);
    let x_t = rng.gen_range(-0.5..0.5);
    let y_t = rng.gen_range(-0.3..0.3);
    let (sx, sy) = (rng.gen_range(1.5..2.5), rng.gen_range(1.5..2.5));
    let z_o = rng.gen_range(2.5..3.5);
    let cover = rng.gen_range(0.6..0.9);

    // Angular footprint of the target from the rig centre, scaled to the panel.
    let ax = ((x_t - sx / 2.0) / z_t, (x_t + sx / 2.0) / z_t);
    let ay = ((y_t - sy / 2.0) / z_t, (y_t + sy / 2.0) / z_t);
    let ox = (ax.0 * z_o, (ax.0 + cover * (ax.1 - ax.0)) * z_o);
    let oy = ((ay.0 - 0.02) * z_o, (ay.1 + 0.02) * z_o);

    let primitives = vec![
        Primitive::Plane { z: 20.0, class: 0 },
        Primitive::Box {
            min: [x_t - sx / 2.0, y_t - sy / 2.0, z_t],
            max: [x_t + sx / 2.0, y_t + sy / 2.0, z_t],
            class: 11,
        },
        Primitive::Box {
            min: [ox.0, oy.0, z_o],
            max: [ox.1, oy.1, z_o + 0.02],
            class: 5,
        },
    ];
    // The LiDAR sits to the right; its scan stops short of the panel.
    let lidar = LidarSpec {
        position: [2.5, 0.0, 0.0],
        azimuth: (-26.0, 20.0, 93),
        elevation: (-12.0, 12.0, 49),
        max_range: 120.0,
    };
    OcclusionFixture {
        scene: Scene {
            primitives,
            cameras: rig(rows, cols, RIG_BASELINE),
            lidar,
        },
        target: 1,
        occluder: 2,
    }
}

/// Mean `|D_diff|` over cells whose nearest LiDAR return lies on the target,
/// against the mean over all other cells holding a LiDAR depth.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OcclusionContrast {
    pub object_cells: usize,
    pub object_mean: f64,
    pub background_cells: usize,
    pub background_mean: f64,
}

impl OcclusionContrast {
    pub fn ratio(&self) -> f64 {
        self.object_mean / self.background_mean
    }
}

pub fn occlusion_contrast(fixture: &OcclusionFixture, view: usize) -> Result<OcclusionContrast> {
    let scene = &fixture.scene;
    let scan = sample_lidar(scene);
    let camera = scene.camera_model(view)?;
    let (h, w) = camera.grid_size(GridPlane::Feature);
    let projs = project_cloud(&camera, &scan.cloud);
    let mut winner: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for p in &projs {
        let (r, c, _) = p.cell(GridPlane::Feature, h, w);
        let slot = &mut winner[r * w + c];
        if slot.map_or(true, |(d, _)| p.depth < d) {
            *slot = Some((p.depth, p.point_index));
        }
    }
    let sparse = sparse_depth_from_projections(&projs, GridPlane::Feature, h, w);
    let rendered = render_view(scene, &camera, GridPlane::Feature)?;
    let diff = log_depth_difference(&predicted_depth(&rendered, 0.0, 0)?, &sparse)?;
    let (mut obj, mut bg) = (Vec::new(), Vec::new());
    for (r, c, v) in diff.iter_valid() {
        let (_, point) = winner[r * w + c].expect("valid cell has a winning point");
        if scan.primitive[point] == fixture.target {
            obj.push(v.abs());
        } else {
            bg.push(v.abs());
        }
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(OcclusionContrast {
        object_cells: obj.len(),
        object_mean: mean(&obj),
        background_cells: bg.len(),
        background_mean: mean(&bg),
    })
}

/// Single camera and a co-located LiDAR looking at camera-facing panels whose
/// silhouettes follow feature-cell boundaries, so both sensors agree on every
/// cell.
pub fn consistent_fixture(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = camera_at([0.0; 3]);
    let (h, w) = cam.feature_size;
    let (sy, sx) = (cam.image_size.0 as f64 / h as f64, cam.image_size.1 as f64 / w as f64);
    let mut primitives = vec![Primitive::Plane {
        z: rng.gen_range(20.0..35.0),
        class: 0,
    }];
    for _ in 0..rng.gen_range(1..=3) {
        let z = rng.gen_range(5.0..15.0);
        let c0 = rng.gen_range(2..w - 6);
        let c1 = rng.gen_range(c0..w - 3);
        let r0 = rng.gen_range(2..h - 6);
        let r1 = rng.gen_range(r0..h - 3);
        let x = |col: f64| (col * sx - cam.cx) * z / cam.fx;
        let y = |row: f64| (row * sy - cam.cy) * z / cam.fy;
        primitives.push(Primitive::Box {
            min: [x(c0 as f64 - 0.5), y(r0 as f64 - 0.5), z],
            max: [x(c1 as f64 + 0.5), y(r1 as f64 + 0.5), z],
            class: rng.gen_range(1..15),
        });
    }
    Scene {
        primitives,
        cameras: vec![cam],
        lidar: LidarSpec {
            position: [0.0; 3],
            azimuth: (-34.0, 34.0, 180),
            elevation: (-27.0, 27.0, 90),
            max_range: 120.0,
        },
    }
}

/// Toy depth predictor: the rendered depth, `FAR_DEPTH` where nothing is hit,
/// plus optional Gaussian jitter (clamped positive).
pub fn predicted_depth(view: &RenderedView, jitter: f64, seed: u64) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if jitter > 0.0 {
        Some(Normal::new(0.0, jitter).map_err(|e| Error::invalid(format!("bad jitter {jitter}: {e}")))?)
    } else {
        None
    };
    let data = view
        .depth
        .iter()
        .map(|&d| {
            let base = if d > 0.0 { d } else { FAR_DEPTH };
            match &noise {
                Some(n) => (base + n.sample(&mut rng)).max(0.01),
                None => base,
            }
        })
        .collect();
    FeatureMap::from_vec(1, view.height, view.width, data)
}

/// Stand-in image backbone: a fixed embedding of each cell's rendered class
/// and depth.
pub fn toy_image_features(view: &RenderedView, channels: usize) -> FeatureMap {
    FeatureMap::from_fn(channels, view.height, view.width, |k, r, c| {
        let i = r * view.width + c;
        let label = match view.labels.labels[i] {
            IGNORE_LABEL => 15.0,
            l => l as f64,
        };
        let d = if view.depth[i] > 0.0 { view.depth[i] } else { FAR_DEPTH };
        let kf = k as f64 + 1.0;
        (0.7 * kf * (label + 1.0)).sin() + 0.25 * (0.05 * kf * d.ln()).cos()
    })
}

#[derive(Debug, Clone)]
pub struct SynthView {
    pub camera: CameraModel,
    pub rendered: RenderedView,
    pub features: FeatureMap,
    pub depth: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub scene: Scene,
    pub scan: LidarScan,
    pub views: Vec<SynthView>,
}

pub fn generate(scene: &Scene, image_channels: usize, jitter: f64, seed: u64) -> Result<SynthData> {
    scene.validate()?;
    let scan = sample_lidar(scene);
    let views = scene
        .camera_models()?
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let rendered = render_view(scene, &camera, GridPlane::Feature)?;
            let depth = predicted_depth(&rendered, jitter, seed.wrapping_add(i as u64))?;
            let features = toy_image_features(&rendered, image_channels);
            Ok(SynthView {
                camera,
                rendered,
                features,
                depth,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthData {
        scene: scene.clone(),
        scan,
        views,
    })
}

/// Voxel bounds and resolution that suit the synthetic scenes.
pub fn synth_config(n_views: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        n_views,
        ..PipelineConfig::default()
    };
    cfg.voxel.resolution = 0.2;
    cfg.voxel.min_bound = [-40.0, -20.0, 0.0];
    cfg.voxel.max_bound = [40.0, 20.0, 60.0];
    cfg
}

pub fn write_dataset(dir: &Path, data: &SynthData, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    io::save_text(&dir.join("scene.txt"), &data.scene.to_text())?;
    io::save_text(&dir.join("config.cfg"), &config.to_text())?;
    io::save_cloud(&dir.join("cloud.lfpc"), &data.scan.cloud)?;
    io::save_labels(&dir.join("point_labels.lflm"), &LabelMap::points(data.scan.labels.clone()))?;
    for (i, v) in data.views.iter().enumerate() {
        io::save_camera(&dir.join(format!("cam_{i:02}.calib")), &v.camera)?;
        io::save_feature_map(&dir.join(format!("feat_{i:02}.lffm")), &v.features)?;
        io::save_feature_map(&dir.join(format!("depth_{i:02}.lffm")), &v.depth)?;
        io::save_labels(&dir.join(format!("labels_{i:02}.lflm")), &v.rendered.labels)?;
    }
    Ok(())
}

/// Files of a dataset directory, as loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: Option<PipelineConfig>,
    pub cloud: PointCloud,
    pub point_labels: Option<LabelMap>,
    pub cameras: Vec<CameraModel>,
    pub features: Vec<FeatureMap>,
    pub depths: Vec<FeatureMap>,
    pub labels: Vec<Option<LabelMap>>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config = match dir.join("config.cfg") {
        p if p.exists() => Some(PipelineConfig::parse(&io::load_text(&p)?)?),
        _ => None,
    };
    let cloud = io::load_cloud(&dir.join("cloud.lfpc"))?;
    let point_labels = match dir.join("point_labels.lflm") {
        p if p.exists() => Some(io::load_labels(&p)?),
        _ => None,
    };
    let mut ds = Dataset {
        config,
        cloud,
        point_labels,
        cameras: Vec::new(),
        features: Vec::new(),
        depths: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0.. {
        let cam = dir.join(format!("cam_{i:02}.calib"));
        if !cam.exists() {
            break;
        }
        ds.cameras.push(io::load_camera(&cam)?);
        ds.features.push(io::load_feature_map(&dir.join(format!("feat_{i:02}.lffm")))?);
        ds.depths.push(io::load_feature_map(&dir.join(format!("depth_{i:02}.lffm")))?);
        let labels = dir.join(format!("labels_{i:02}.lflm"));
        ds.labels.push(if labels.exists() { Some(io::load_labels(&labels)?) } else { None });
    }
    if ds.cameras.is_empty() {
        return Err(Error::invalid(format!("{} holds no cam_XX.calib views", dir.display())));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rig_matches_baseline() {
        let r = rig(3, 3, RIG_BASELINE);
        assert_eq!(r.len(), 9);
        assert!((r[1].position[0] - r[0].position[0] - 0.3).abs() < 1e-12);
        assert!((r[3].position[1] - r[0].position[1] - 0.3).abs() < 1e-12);
        assert_eq!(r[4].position, [0.0; 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let scene = default_scene(3);
        let a = generate(&scene, 8, 0.05, 1).unwrap();
        let b = generate(&scene, 8, 0.05, 1).unwrap();
        assert_eq!(a.scan.cloud, b.scan.cloud);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.depth, y.depth);
            assert_eq!(x.features, y.features);
        }
        assert!(!a.scan.cloud.is_empty());
    }

    #[test]
    fn occluder_hides_target_from_centre_view() {
        let fx = occlusion_fixture(0, 1, 1);
        let cam = fx.scene.camera_model(0).unwrap();
        let v = render_view(&fx.scene, &cam, GridPlane::Image).unwrap();
        assert!(v.occlusion_flags[fx.target]);
        assert!(!v.occlusion_flags[fx.occluder]);
        let scan = sample_lidar(&fx.scene);
        assert!(scan.primitive.contains(&fx.target));
        assert!(!scan.primitive.contains(&fx.occluder));
    }

    #[test]
    fn occluded_target_stands_out() {
        let c = occlusion_contrast(&occlusion_fixture(0, 1, 1), 0).unwrap();
        assert!(c.object_cells > 0);
        assert!(c.object_mean >= 2.0 * c.background_mean, "{c:?}");
    }

    #[test]
    fn predictor_fills_misses() {
        let scene = Scene {
            primitives: vec![],
            cameras: vec![camera_at([0.0; 3])],
            lidar: LidarSpec::default(),
        };
        let v = render_view(&scene, &scene.camera_model(0).unwrap(), GridPlane::Feature).unwrap();
        let d = predicted_depth(&v, 0.0, 0).unwrap();
        assert!(d.as_slice().iter().all(|&x| x == FAR_DEPTH));
    }
}
