//! Synthetic scenes built from axis-aligned boxes and constant-z planes,
//! rendered by per-pixel ray casting and sampled by a spinning LiDAR model.
//!
//! World axes follow the camera convention: x right, y down, z forward.
//! Point clouds are expressed in the LiDAR frame, which is the world frame
//! translated to the LiDAR position.
//!
//! Scene description, one statement per line (`#` starts a comment):
//!
//! ```text
//! BOX cx cy cz sx sy sz class          # centre and full extents, metres
//! PLANE z class                        # infinite plane at constant z
//! CAMERA fx fy cx cy H W h w [px py pz]
//! RIG rows cols baseline fx fy cx cy H W h w
//! LIDAR px py pz az_min az_max n_az el_min el_max n_el [max_range]
//! ```
//!
//! `RIG` appends a `rows x cols` camera grid centred on the origin with the
//! given spacing, row-major. LiDAR angles are in degrees; azimuth turns from
//! +z towards +x, elevation from the horizontal towards -y.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, GridPlane, PointCloud};
use crate::losses::{LabelMap, IGNORE_LABEL};

pub const NUM_CLASSES: usize = 15;

/// Fraction of its unoccluded footprint below which a primitive counts as
/// occluded in a view.
pub const OCCLUSION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box { min: [f64; 3], max: [f64; 3], class: u8 },
    Plane { z: f64, class: u8 },
}

impl Primitive {
    pub fn aabb(center: [f64; 3], size: [f64; 3], class: u8) -> Self {
        let half = size.map(|s| s / 2.0);
        Primitive::Box {
            min: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            max: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
            class,
        }
    }

    pub fn class(&self) -> u8 {
        match *self {
            Primitive::Box { class, .. } | Primitive::Plane { class, .. } => class,
        }
    }

    /// Smallest `t > 0` with `origin + t * dir` on the primitive.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const T_MIN: f64 = 1e-9;
        match *self {
            Primitive::Plane { z, .. } => {
                if dir.z == 0.0 {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                (t > T_MIN).then_some(t)
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (mut ta, mut tb) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                    if t0 > t1 {
                        return None;
                    }
                }
                if t0 > T_MIN {
                    Some(t0)
                } else if t1 > T_MIN {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    /// Distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Plane { z, .. } => (p[2] - z).abs(),
            Primitive::Box { min, max, .. } => {
                let inside = (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]);
                if inside {
                    (0..3)
                        .map(|a| (p[a] - min[a]).min(max[a] - p[a]))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    (0..3)
                        .map(|a| (min[a] - p[a]).max(0.0).max(p[a] - max[a]))
                        .map(|d| d * d)
                        .sum::<f64>()
                        .sqrt()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_size: (usize, usize),
    pub feature_size: (usize, usize),
    /// World position.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpec {
    pub position: [f64; 3],
    pub azimuth: (f64, f64, usize),
    pub elevation: (f64, f64, usize),
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            azimuth: (-30.0, 30.0, 121),
            elevation: (-15.0, 15.0, 31),
            max_range: 200.0,
        }
    }
}

impl LidarSpec {
    /// Unit ray directions in scan order (elevation-major).
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let steps = |(lo, hi, n): (f64, f64, usize)| -> Vec<f64> {
            match n {
                0 => vec![],
                1 => vec![lo],
                _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
            }
        };
        let mut out = Vec::new();
        for el in steps(self.elevation) {
            for az in steps(self.azimuth) {
                let (el, az) = (el.to_radians(), az.to_radians());
                out.push(Vector3::new(el.cos() * az.sin(), -el.sin(), el.cos() * az.cos()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<SceneCamera>,
    pub lidar: LidarSpec,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("scene needs at least one camera"));
        }
        if let Some(p) = self.primitives.iter().find(|p| p.class() as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("primitive class {} outside [0, {NUM_CLASSES})", p.class())));
        }
        for c in &self.cameras {
            self.camera_model_for(c)?;
        }
        Ok(())
    }

    fn camera_model_for(&self, c: &SceneCamera) -> Result<CameraModel> {
        let rel = [
            c.position[0] - self.lidar.position[0],
            c.position[1] - self.lidar.position[1],
            c.position[2] - self.lidar.position[2],
        ];
        CameraModel::pinhole(c.fx, c.fy, c.cx, c.cy, c.image_size, c.feature_size, rel)
    }

    /// Camera `i` with extrinsics mapping the LiDAR frame to its camera frame.
    pub fn camera_model(&self, i: usize) -> Result<CameraModel> {
        let c = self
            .cameras
            .get(i)
            .ok_or_else(|| Error::invalid(format!("scene has no camera {i}")))?;
        self.camera_model_for(c)
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        (0..self.cameras.len()).map(|i| self.camera_model(i)).collect()
    }

    /// Index of the middle camera of the rig.
    pub fn center_view(&self) -> usize {
        self.cameras.len() / 2
    }

    /// Nearest hit along a ray as `(t, primitive index)`; earlier primitives
    /// win exact ties.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn parse(text: &str) -> Result<Scene> {
        let mut scene = Scene {
            primitives: Vec::new(),
            cameras: Vec::new(),
            lidar: LidarSpec::default(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                what: "scene".into(),
                line: i + 1,
                message,
            };
            let mut toks = line.split_whitespace();
            let kw = toks.next().unwrap_or_default();
            let nums: Vec<f64> = toks
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number {t:?}: {e}"))))
                .collect::<Result<_>>()?;
            let want = |lo: usize, hi: usize| -> Result<()> {
                if nums.len() < lo || nums.len() > hi {
                    return Err(err(format!("{kw} takes {lo}..={hi} values, found {}", nums.len())));
                }
                Ok(())
            };
            let class = |x: f64| -> Result<u8> {
                if x.fract() != 0.0 || x < 0.0 || x >= NUM_CLASSES as f64 {
                    return Err(err(format!("class {x} outside [0, {NUM_CLASSES})")));
                }
                Ok(x as u8)
            };
            let size = |x: f64| -> Result<usize> {
                if x.fract() != 0.0 || x < 1.0 {
                    return Err(err(format!("size {x} must be a positive integer")));
                }
                Ok(x as usize)
            };
            match kw {
                "BOX" => {
                    want(7, 7)?;
                    if nums[3..6].iter().any(|&s| s < 0.0) {
                        return Err(err("box extents must be >= 0".into()));
                    }
                    scene.primitives.push(Primitive::aabb(
                        [nums[0], nums[1], nums[2]],
                        [nums[3], nums[4], nums[5]],
                        class(nums[6])?,
                    ));
                }
                "PLANE" => {
                    want(2, 2)?;
                    scene.primitives.push(Primitive::Plane {
                        z: nums[0],
                        class: class(nums[1])?,
                    });
                }
                "CAMERA" => {
                    if nums.len() != 8 && nums.len() != 11 {
                        return Err(err(format!("CAMERA takes 8 or 11 values, found {}", nums.len())));
                    }
                    let position = if nums.len() == 11 { [nums[8], nums[9], nums[10]] } else { [0.0; 3] };
                    scene.cameras.push(SceneCamera {
                        fx: nums[0],
                        fy: nums[1],
                        cx: nums[2],
                        cy: nums[3],
                        image_size: (size(nums[4])?, size(nums[5])?),
                        feature_size: (size(nums[6])?, size(nums[7])?),
                        position,
                    });
                }
                "RIG" => {
                    want(11, 11)?;
                    let (rows, cols, base) = (size(nums[0])?, size(nums[1])?, nums[2]);
                    for r in 0..rows {
                        for c in 0..cols {
                            scene.cameras.push(SceneCamera {
                                fx: nums[3],
                                fy: nums[4],
                                cx: nums[5],
                                cy: nums[6],
                                image_size: (size(nums[7])?, size(nums[8])?),
                                feature_size: (size(nums[9])?, size(nums[10])?),
                                position: [
                                    (c as f64 - (cols - 1) as f64 / 2.0) * base,
                                    (r as f64 - (rows - 1) as f64 / 2.0) * base,
                                    0.0,
                                ],
                            });
                        }
                    }
                }
                "LIDAR" => {
                    want(9, 10)?;
                    let count = |x: f64| -> Result<usize> {
                        if x.fract() != 0.0 || x < 0.0 {
                            return Err(err(format!("ray count {x} must be a non-negative integer")));
                        }
                        Ok(x as usize)
                    };
                    scene.lidar = LidarSpec {
                        position: [nums[0], nums[1], nums[2]],
                        azimuth: (nums[3], nums[4], count(nums[5])?),
                        elevation: (nums[6], nums[7], count(nums[8])?),
                        max_range: nums.get(9).copied().unwrap_or(LidarSpec::default().max_range),
                    };
                }
                other => return Err(err(format!("unknown statement {other:?}"))),
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    /// Writes the scene back out; cameras are emitted individually.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.primitives {
            match *p {
                Primitive::Box { min, max, class } => {
                    let c: Vec<f64> = (0..3).map(|a| (min[a] + max[a]) / 2.0).collect();
                    let e: Vec<f64> = (0..3).map(|a| max[a] - min[a]).collect();
                    let _ = writeln!(s, "BOX {} {} {} {} {} {} {class}", c[0], c[1], c[2], e[0], e[1], e[2]);
                }
                Primitive::Plane { z, class } => {
                    let _ = writeln!(s, "PLANE {z} {class}");
                }
            }
        }
        for c in &self.cameras {
            let _ = writeln!(
                s,
                "CAMERA {} {} {} {} {} {} {} {} {} {} {}",
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                c.image_size.0,
                c.image_size.1,
                c.feature_size.0,
                c.feature_size.1,
                c.position[0],
                c.position[1],
                c.position[2]
            );
        }
        let l = &self.lidar;
        let _ = writeln!(
            s,
            "LIDAR {} {} {} {} {} {} {} {} {} {}",
            l.position[0],
            l.position[1],
            l.position[2],
            l.azimuth.0,
            l.azimuth.1,
            l.azimuth.2,
            l.elevation.0,
            l.elevation.1,
            l.elevation.2,
            l.max_range
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    /// Camera-frame depth per cell; 0 where nothing is hit.
    pub depth: Vec<f64>,
    pub labels: LabelMap,
    /// Nearest primitive per cell.
    pub hit: Vec<Option<usize>>,
    /// Per primitive: cells where it is the nearest hit over cells where its
    /// own ray intersection exists (`None` when never in view).
    pub visible_fraction: Vec<Option<f64>>,
    pub occlusion_flags: Vec<bool>,
}

/// Ray casts one ray per grid cell. Cell `(row, col)` looks through pixel
/// `(u, v) = (col * W / w, row * H / h)` on the feature plane, or through
/// `(col, row)` on the image plane.
pub fn render_view(scene: &Scene, camera: &CameraModel, plane: GridPlane) -> Result<RenderedView> {
    let (rows, cols) = camera.grid_size(plane);
    let (sy, sx) = match plane {
        GridPlane::Image => (1.0, 1.0),
        GridPlane::Feature => (
            camera.image_height as f64 / camera.feature_height as f64,
            camera.image_width as f64 / camera.feature_width as f64,
        ),
    };
    let lidar = Vector3::from(scene.lidar.position);
    let origin = camera
        .center()
        .ok_or_else(|| Error::invalid("camera extrinsics are singular"))?
        + lidar;
    let n_prim = scene.primitives.len();
    let mut depth = vec![0.0; rows * cols];
    let mut labels = vec![IGNORE_LABEL; rows * cols];
    let mut hit = vec![None; rows * cols];
    let mut reach = vec![0usize; n_prim];
    let mut seen = vec![0usize; n_prim];
    for r in 0..rows {
        for c in 0..cols {
            let dir = camera
                .pixel_ray(c as f64 * sx, r as f64 * sy)
                .ok_or_else(|| Error::invalid("camera intrinsics are singular"))?;
            for (i, p) in scene.primitives.iter().enumerate() {
                if p.intersect(&origin, &dir).is_some() {
                    reach[i] += 1;
                }
            }
            if let Some((t, i)) = scene.cast(&origin, &dir) {
                let idx = r * cols + c;
                // `dir` has unit camera-frame z, so `t` is the depth.
                depth[idx] = t;
                labels[idx] = scene.primitives[i].class();
                hit[idx] = Some(i);
                seen[i] += 1;
            }
        }
    }
    let visible_fraction: Vec<Option<f64>> = (0..n_prim)
        .map(|i| (reach[i] > 0).then(|| seen[i] as f64 / reach[i] as f64))
        .collect();
    let occlusion_flags = visible_fraction
        .iter()
        .map(|f| f.is_some_and(|f| f < OCCLUSION_THRESHOLD))
        .collect();
    Ok(RenderedView {
        height: rows,
        width: cols,
        depth,
        labels: LabelMap::new(rows, cols, labels)?,
        hit,
        visible_fraction,
        occlusion_flags,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LidarScan {
    pub cloud: PointCloud,
    /// Primitive hit by each point.
    pub primitive: Vec<usize>,
    pub labels: Vec<u8>,
}

/// Casts every LiDAR ray; each hit within range becomes a point in the LiDAR
/// frame with a class-keyed reflectance.
pub fn sample_lidar(scene: &Scene) -> LidarScan {
    let origin = Vector3::from(scene.lidar.position);
    let mut scan = LidarScan::default();
    for dir in scene.lidar.directions() {
        if let Some((t, i)) = scene.cast(&origin, &dir) {
            if t > scene.lidar.max_range {
                continue;
            }
            let p = dir * t;
            let class = scene.primitives[i].class();
            scan.cloud.points.push([p.x, p.y, p.z, reflectance(class)]);
            scan.primitive.push(i);
            scan.labels.push(class);
        }
    }
    scan
}

pub fn reflectance(class: u8) -> f64 {
    (class as f64 + 1.0) / (NUM_CLASSES as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAM: &str = "CAMERA 40 40 32 24 48 64 12 16\n";

    #[test]
    fn parse_rig_and_statements() {
        let s = Scene::parse("RIG 3 3 0.3 40 40 32 24 48 64 12 16\nBOX 0 0 10 2 2 2 3 # car\nPLANE 30 0\nLIDAR 0 0 0 -10 10 5 0 0 1\n").unwrap();
        assert_eq!(s.cameras.len(), 9);
        assert_eq!(s.cameras[0].position, [-0.3, -0.3, 0.0]);
        assert_eq!(s.cameras[4].position, [0.0, 0.0, 0.0]);
        assert_eq!(s.center_view(), 4);
        assert_eq!(s.primitives.len(), 2);
        assert_eq!(s.lidar.azimuth, (-10.0, 10.0, 5));
        let again = Scene::parse(&s.to_text()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = Scene::parse(&format!("{CAM}BOX 1 2 3\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        assert!(Scene::parse("PLANE 3 99\nCAMERA 1 1 0 0 4 4 2 2\n").is_err());
        assert!(Scene::parse("PLANE 3 1\n").is_err());
        assert!(Scene::parse(&format!("{CAM}SPHERE 1\n")).is_err());
    }

    #[test]
    fn empty_scene_renders_background() {
        let s = Scene::parse(CAM).unwrap();
        let v = render_view(&s, &s.camera_model(0).unwrap(), GridPlane::Image).unwrap();
        assert!(v.labels.labels.iter().all(|&l| l == IGNORE_LABEL));
        assert!(v.depth.iter().all(|&d| d == 0.0));
        assert!(sample_lidar(&s).cloud.is_empty());
    }

    #[test]
    fn box_on_axis_depth_is_front_face() {
        let s = Scene::parse(&format!("{CAM}BOX 0 0 10 2 2 2 3\n")).unwrap();
        let v = render_view(&s, &s.camera_model(0).unwrap(), GridPlane::Image).unwrap();
        let centre = 24 * 64 + 32;
        assert!((v.depth[centre] - 9.0).abs() < 1e-12);
        assert_eq!(v.labels.labels[centre], 3);
    }

    #[test]
    fn single_ray_on_plane() {
        let s = Scene::parse(&format!("{CAM}PLANE 12.5 1\nLIDAR 0 0 0 0 0 1 0 0 1\n")).unwrap();
        let scan = sample_lidar(&s);
        assert_eq!(scan.cloud.len(), 1);
        let p = scan.cloud.points[0];
        assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9 && (p[2] - 12.5).abs() < 1e-9);
        assert_eq!(p[3], reflectance(1));
    }

    #[test]
    fn ray_box_edge_cases() {
        let b = Primitive::aabb([0.0, 0.0, 5.0], [2.0, 2.0, 0.0], 1);
        let o = Vector3::zeros();
        assert_eq!(b.intersect(&o, &Vector3::new(0.0, 0.0, 1.0)), Some(5.0));
        assert_eq!(b.intersect(&o, &Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(b.intersect(&o, &Vector3::new(1.0, 0.0, 0.0)), None);
        // From inside a solid box the exit face is reported.
        let solid = Primitive::aabb([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 1);
        assert_eq!(solid.intersect(&o, &Vector3::new(0.0, 0.0, 1.0)), Some(1.0));
    }

    #[test]
    fn surface_distance() {
        let b = Primitive::aabb([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0);
        assert_eq!(b.surface_distance([0.0, 0.0, 1.0]), 0.0);
        assert_eq!(b.surface_distance([0.0, 0.0, 0.5]), 0.5);
        assert_eq!(b.surface_distance([0.0, 0.0, 3.0]), 2.0);
        assert_eq!(Primitive::Plane { z: 2.0, class: 0 }.surface_distance([5.0, 1.0, 3.5]), 1.5);
    }
}
