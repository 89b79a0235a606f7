//! C ABI over the lfseg kernels.
//!
//! Every fallible entry point returns an [`LfsegStatus`]. On failure a
//! message is stored per thread and can be read with [`lfseg_last_error`].
//! Cameras, clouds and sparse grids cross the boundary as opaque handles that
//! must be released with their `_free` function. Dense arrays are passed as
//! caller-owned `double` buffers in channel-major, row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lfseg::dataset::io;
use lfseg::geometry::{build_sparse_depth_map, project_cloud, CameraModel, GridPlane, PointCloud, SparseGrid};
use lfseg::losses::{self, LabelMap, LogitMap};
use lfseg::pffm::{self, BoundingRect};
use lfseg::{ddpm, Error, FeatureMap};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Empty = 7,
    Panic = 8,
}

/// Grid a projection is snapped onto.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfsegPlane {
    Image = 0,
    Feature = 1,
}

/// Inclusive cell rectangle; `x` is the column and `y` the row.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LfsegRect {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

pub struct LfsegCamera(CameraModel);

pub struct LfsegCloud(PointCloud);

pub struct LfsegGrid(SparseGrid);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(LfsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Io { .. } => LfsegStatus::Io,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::Parse { .. } => LfsegStatus::Format,
            Error::Shape(_) => LfsegStatus::Shape,
            Error::Invalid(_) => LfsegStatus::InvalidArgument,
            Error::Empty(_) => LfsegStatus::Empty,
            Error::NonFinite(_) => LfsegStatus::NonFinite,
            Error::Context { .. } => unreachable!("root() strips context"),
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LfsegStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LfsegStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LfsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LfsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LfsegStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn count(a: usize, b: usize, what: &str) -> Result<usize, Failure> {
    a.checked_mul(b).ok_or_else(|| invalid(format!("{what} size overflows")))
}

// Taken as a plain integer so an out-of-range value from C is an error, not UB.
fn plane(p: u32) -> Result<GridPlane, Failure> {
    match p {
        x if x == LfsegPlane::Image as u32 => Ok(GridPlane::Image),
        x if x == LfsegPlane::Feature as u32 => Ok(GridPlane::Feature),
        other => Err(invalid(format!("unknown grid plane {other}"))),
    }
}

fn boxed<T>(dst: &mut *mut T, value: T) {
    *dst = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn lfseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, null-terminated library version.
#[no_mangle]
pub extern "C" fn lfseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Axis-aligned pinhole camera at `position` (3 doubles, LiDAR frame).
///
/// # Safety
/// `position` must point to 3 doubles and `camera` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn lfseg_camera_pinhole(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image_height: usize,
    image_width: usize,
    feature_height: usize,
    feature_width: usize,
    position: *const f64,
    camera: *mut *mut LfsegCamera,
) -> LfsegStatus {
    guard(|| {
        let dst = out(camera, "camera")?;
        let p = slice(position, 3, "position")?;
        let cam = CameraModel::pinhole(
            fx,
            fy,
            cx,
            cy,
            (image_height, image_width),
            (feature_height, feature_width),
            [p[0], p[1], p[2]],
        )?;
        boxed(dst, LfsegCamera(cam));
        Ok(())
    })
}

/// Camera from a row-major 3x4 intrinsic matrix and a row-major 4x4
/// LiDAR-to-camera transform.
///
/// # Safety
/// `intrinsics` must point to 12 doubles, `extrinsics` to 16.
#[no_mangle]
pub unsafe extern "C" fn lfseg_camera_new(
    intrinsics: *const f64,
    extrinsics: *const f64,
    image_height: usize,
    image_width: usize,
    feature_height: usize,
    feature_width: usize,
    camera: *mut *mut LfsegCamera,
) -> LfsegStatus {
    guard(|| {
        let dst = out(camera, "camera")?;
        let k = slice(intrinsics, 12, "intrinsics")?;
        let t = slice(extrinsics, 16, "extrinsics")?;
        let cam = CameraModel::new(
            lfseg::nalgebra::Matrix3x4::from_row_slice(k),
            lfseg::nalgebra::Matrix4::from_row_slice(t),
            (image_height, image_width),
            (feature_height, feature_width),
        )?;
        boxed(dst, LfsegCamera(cam));
        Ok(())
    })
}

/// Reads a calibration text file.
///
/// # Safety
/// `file` must be a null-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lfseg_camera_load(file: *const c_char, camera: *mut *mut LfsegCamera) -> LfsegStatus {
    guard(|| {
        let dst = out(camera, "camera")?;
        let cam = io::load_camera(path(file)?)?;
        boxed(dst, LfsegCamera(cam));
        Ok(())
    })
}

/// # Safety
/// `camera` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lfseg_camera_free(camera: *mut LfsegCamera) {
    if !camera.is_null() {
        drop(Box::from_raw(camera));
    }
}

/// Cloud from `len` points of `x, y, z, reflectance`.
///
/// # Safety
/// `points` must point to `4 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lfseg_cloud_new(points: *const f64, len: usize, cloud: *mut *mut LfsegCloud) -> LfsegStatus {
    guard(|| {
        let dst = out(cloud, "cloud")?;
        let raw = slice(points, count(len, 4, "cloud")?, "points")?;
        let pts = raw.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]]).collect();
        boxed(dst, LfsegCloud(PointCloud::new(pts)?));
        Ok(())
    })
}

/// Reads a binary point cloud file.
///
/// # Safety
/// `file` must be a null-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lfseg_cloud_load(file: *const c_char, cloud: *mut *mut LfsegCloud) -> LfsegStatus {
    guard(|| {
        let dst = out(cloud, "cloud")?;
        let c = io::load_cloud(path(file)?)?;
        boxed(dst, LfsegCloud(c));
        Ok(())
    })
}

/// Number of points, 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lfseg_cloud_len(cloud: *const LfsegCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lfseg_cloud_free(cloud: *mut LfsegCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Sparse depth map of the cloud as seen by the camera; the nearest point
/// wins each cell. `grid_plane` is an `LfsegPlane` value.
///
/// # Safety
/// Handles must be live; `grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfseg_sparse_depth(
    camera: *const LfsegCamera,
    cloud: *const LfsegCloud,
    grid_plane: u32,
    grid: *mut *mut LfsegGrid,
) -> LfsegStatus {
    guard(|| {
        let dst = out(grid, "grid")?;
        let cam = &handle(camera, "camera")?.0;
        let cloud = &handle(cloud, "cloud")?.0;
        boxed(dst, LfsegGrid(build_sparse_depth_map(cam, cloud, plane(grid_plane)?)));
        Ok(())
    })
}

/// Smallest feature-grid rectangle covering every projected point. Fails
/// with `EMPTY` when nothing projects.
///
/// # Safety
/// Handles must be live; `rect` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfseg_bounding_rect(
    camera: *const LfsegCamera,
    cloud: *const LfsegCloud,
    rect: *mut LfsegRect,
) -> LfsegStatus {
    guard(|| {
        let dst = out(rect, "rect")?;
        let cam = &handle(camera, "camera")?.0;
        let cloud = &handle(cloud, "cloud")?.0;
        let projs = project_cloud(cam, cloud);
        let r = pffm::compute_bounding_rectangle(&projs, cam.feature_height, cam.feature_width)?;
        *dst = LfsegRect {
            x_min: r.x_min,
            x_max: r.x_max,
            y_min: r.y_min,
            y_max: r.y_max,
        };
        Ok(())
    })
}

/// Sparse grid from dense values and a byte mask (non-zero = assigned).
///
/// # Safety
/// `values` and `mask` must each hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn lfseg_grid_new(
    height: usize,
    width: usize,
    values: *const f64,
    mask: *const u8,
    grid: *mut *mut LfsegGrid,
) -> LfsegStatus {
    guard(|| {
        let dst = out(grid, "grid")?;
        let n = count(height, width, "grid")?;
        let v = slice(values, n, "values")?;
        let m = slice(mask, n, "mask")?;
        let g = SparseGrid::from_parts(height, width, v.to_vec(), m.iter().map(|&b| b != 0).collect())?;
        boxed(dst, LfsegGrid(g));
        Ok(())
    })
}

/// # Safety
/// `grid` must be live; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn lfseg_grid_dims(grid: *const LfsegGrid, height: *mut usize, width: *mut usize) -> LfsegStatus {
    guard(|| {
        let g = &handle(grid, "grid")?.0;
        *out(height, "height")? = g.height;
        *out(width, "width")? = g.width;
        Ok(())
    })
}

/// Number of assigned cells, 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lfseg_grid_valid_count(grid: *const LfsegGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.valid_count())
}

/// Copies the dense values (0 where unassigned) and the mask out. Either
/// buffer may be null to skip it; `len` must equal `height * width`.
///
/// # Safety
/// Non-null buffers must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lfseg_grid_copy(
    grid: *const LfsegGrid,
    values: *mut f64,
    mask: *mut u8,
    len: usize,
) -> LfsegStatus {
    guard(|| {
        let g = &handle(grid, "grid")?.0;
        if len != g.height * g.width {
            return Err(Failure(
                LfsegStatus::Shape,
                format!("grid has {} cells, buffer {len}", g.height * g.width),
            ));
        }
        if !values.is_null() {
            slice_mut(values, len, "values")?.copy_from_slice(g.dense());
        }
        if !mask.is_null() {
            for (d, &m) in slice_mut(mask, len, "mask")?.iter_mut().zip(g.mask()) {
                *d = m as u8;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lfseg_grid_free(grid: *mut LfsegGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// `log(pred + 1e-8) - log(lidar + 1e-8)` on the cells assigned in `sparse`.
/// `predicted` is a dense map of the same size as the grid.
///
/// # Safety
/// `predicted` must hold `height * width` doubles of the grid.
#[no_mangle]
pub unsafe extern "C" fn lfseg_log_depth_difference(
    predicted: *const f64,
    sparse: *const LfsegGrid,
    diff: *mut *mut LfsegGrid,
) -> LfsegStatus {
    guard(|| {
        let dst = out(diff, "diff")?;
        let s = &handle(sparse, "sparse")?.0;
        let p = slice(predicted, s.height * s.width, "predicted")?;
        let pred = FeatureMap::from_vec(1, s.height, s.width, p.to_vec())?;
        boxed(dst, LfsegGrid(ddpm::log_depth_difference(&pred, s)?));
        Ok(())
    })
}

/// Fills the unassigned cells of `features` (`channels x height x width`)
/// inside `rect` from their three nearest assigned cells, writing the result
/// to `output`. A null `rect` means the whole grid.
///
/// # Safety
/// `features` and `output` must hold `channels * height * width` doubles; the
/// mask grid must be `height x width`.
#[no_mangle]
pub unsafe extern "C" fn lfseg_interpolate_missing(
    features: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    mask: *const LfsegGrid,
    rect: *const LfsegRect,
    output: *mut f64,
) -> LfsegStatus {
    guard(|| {
        let n = count(count(channels, height, "features")?, width, "features")?;
        let src = slice(features, n, "features")?;
        let dst = slice_mut(output, n, "output")?;
        let m = &handle(mask, "mask")?.0;
        if height == 0 || width == 0 {
            return Err(invalid("feature map must have at least one cell"));
        }
        let r = match rect.as_ref() {
            Some(r) => BoundingRect {
                x_min: r.x_min,
                x_max: r.x_max,
                y_min: r.y_min,
                y_max: r.y_max,
            },
            None => BoundingRect::full(height, width),
        };
        let map = FeatureMap::from_vec(channels, height, width, src.to_vec())?;
        dst.copy_from_slice(pffm::interpolate_missing(&map, m, &r)?.as_slice());
        Ok(())
    })
}

unsafe fn logits_and_labels(
    logits: *const f64,
    classes: usize,
    len: usize,
    labels: *const u8,
) -> Result<(LogitMap, LabelMap), Failure> {
    let l = slice(logits, count(classes, len, "logits")?, "logits")?;
    let y = slice(labels, len, "labels")?;
    let lm = LogitMap::new(classes, len, l.to_vec())?;
    let lab = LabelMap::points(y.to_vec());
    lab.check_classes(classes)?;
    Ok((lm, lab))
}

/// Mean cross-entropy of class-major `classes x len` logits; label 255 is
/// ignored.
///
/// # Safety
/// `logits` must hold `classes * len` doubles and `labels` `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lfseg_cross_entropy(
    logits: *const f64,
    classes: usize,
    len: usize,
    labels: *const u8,
    loss: *mut f64,
) -> LfsegStatus {
    guard(|| {
        let dst = out(loss, "loss")?;
        let (lm, lab) = logits_and_labels(logits, classes, len, labels)?;
        *dst = losses::cross_entropy(&lm, &lab)?.0;
        Ok(())
    })
}

/// Lovász-softmax loss of class-major logits (softmax is applied here).
///
/// # Safety
/// As for [`lfseg_cross_entropy`].
#[no_mangle]
pub unsafe extern "C" fn lfseg_lovasz_softmax(
    logits: *const f64,
    classes: usize,
    len: usize,
    labels: *const u8,
    loss: *mut f64,
) -> LfsegStatus {
    guard(|| {
        let dst = out(loss, "loss")?;
        let (lm, lab) = logits_and_labels(logits, classes, len, labels)?;
        *dst = losses::lovasz_softmax(&lm.softmax(), &lab)?;
        Ok(())
    })
}

/// Per-class IoU and their mean over classes present in either input.
/// Absent classes are written as NaN. `per_class` may be null.
///
/// # Safety
/// `predictions` and `labels` must hold `len` bytes, `per_class` (if
/// non-null) `classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn lfseg_mean_iou(
    predictions: *const u8,
    labels: *const u8,
    len: usize,
    classes: usize,
    per_class: *mut f64,
    miou: *mut f64,
) -> LfsegStatus {
    guard(|| {
        let dst = out(miou, "miou")?;
        let p = LabelMap::points(slice(predictions, len, "predictions")?.to_vec());
        let l = LabelMap::points(slice(labels, len, "labels")?.to_vec());
        let rep = losses::mean_iou(&p, &l, classes)?;
        if !per_class.is_null() {
            for (d, v) in slice_mut(per_class, classes, "per_class")?.iter_mut().zip(&rep.per_class) {
                *d = v.unwrap_or(f64::NAN);
            }
        }
        *dst = rep.miou;
        Ok(())
    })
}
