//! On-disk formats.
//!
//! Binary files are little-endian and start with a four-byte magic:
//!
//! | magic  | header                | payload                                  |
//! |--------|-----------------------|------------------------------------------|
//! | `LFPC` | `u32 n`               | `n x 4` f32 `(x, y, z, r)`               |
//! | `LFFM` | `u32 c, u32 h, u32 w` | `c*h*w` f32, channel-major, row-major    |
//! | `LFSG` | `u32 h, u32 w`        | `h*w` u8 mask, then `h*w` f32 values     |
//! | `LFLM` | `u32 h, u32 w`        | `h*w` u8 labels (255 = ignore)           |
//!
//! Point clouds may also be plain text, one `x y z r` line per point, when
//! the file extension is `.txt` or `.xyz`. Calibration files are text:
//! a `K` line and three rows of four numbers, a `T` line and four rows of
//! four numbers, then `SIZE H W h w`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3x4, Matrix4};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{CameraModel, PointCloud, SparseGrid};
use crate::losses::LabelMap;

pub const CLOUD_MAGIC: &[u8; 4] = b"LFPC";
pub const FEATURE_MAGIC: &[u8; 4] = b"LFFM";
pub const SPARSE_MAGIC: &[u8; 4] = b"LFSG";
pub const LABEL_MAGIC: &[u8; 4] = b"LFLM";

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                what,
                expected: 4,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::BadMagic {
                what,
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        Ok(Self { what, bytes, pos: 4 })
    }

    fn u32s<const N: usize>(&mut self) -> Result<[usize; N]> {
        let need = self.pos + 4 * N;
        if self.bytes.len() < need {
            return Err(Error::Truncated {
                what: self.what,
                expected: need,
                actual: self.bytes.len(),
            });
        }
        let mut out = [0usize; N];
        for o in out.iter_mut() {
            let b: [u8; 4] = self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes");
            *o = u32::from_le_bytes(b) as usize;
            self.pos += 4;
        }
        Ok(out)
    }

    /// Requires exactly `payload` more bytes in the buffer.
    fn expect_payload(&self, payload: Option<usize>) -> Result<()> {
        let expected = payload
            .and_then(|p| p.checked_add(self.pos))
            .ok_or_else(|| Error::invalid(format!("{} header dimensions overflow", self.what)))?;
        if self.bytes.len() != expected {
            return Err(Error::Truncated {
                what: self.what,
                expected,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        self.pos += 4 * n;
        out
    }

    fn u8s(&mut self, n: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }
}

fn header(magic: &[u8; 4], dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

fn push_f32(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    let mut out = header(CLOUD_MAGIC, &[cloud.len()])?;
    push_f32(&mut out, cloud.points.iter().flatten().copied());
    Ok(out)
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new("point cloud", bytes, CLOUD_MAGIC)?;
    let [n] = r.u32s::<1>()?;
    r.expect_payload(n.checked_mul(16))?;
    let flat = r.f32s(n * 4);
    PointCloud::new(flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = header(FEATURE_MAGIC, &[map.channels, map.height, map.width])?;
    push_f32(&mut out, map.as_slice().iter().copied());
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new("feature map", bytes, FEATURE_MAGIC)?;
    let [c, h, w] = r.u32s::<3>()?;
    let n = c.checked_mul(h).and_then(|x| x.checked_mul(w));
    r.expect_payload(n.and_then(|n| n.checked_mul(4)))?;
    let data = r.f32s(n.unwrap_or(0));
    FeatureMap::from_vec(c, h, w, data)
}

pub fn encode_sparse_grid(grid: &SparseGrid) -> Result<Vec<u8>> {
    let mut out = header(SPARSE_MAGIC, &[grid.height, grid.width])?;
    out.extend(grid.mask().iter().map(|&m| m as u8));
    push_f32(&mut out, grid.dense().iter().copied());
    Ok(out)
}

pub fn decode_sparse_grid(bytes: &[u8]) -> Result<SparseGrid> {
    let mut r = Reader::new("sparse grid", bytes, SPARSE_MAGIC)?;
    let [h, w] = r.u32s::<2>()?;
    let n = h.checked_mul(w);
    r.expect_payload(n.and_then(|n| n.checked_mul(5)))?;
    let n = n.unwrap_or(0);
    let mask_bytes = r.u8s(n);
    if let Some(bad) = mask_bytes.iter().find(|&&m| m > 1) {
        return Err(Error::invalid(format!("sparse grid mask byte {bad} is not 0 or 1")));
    }
    let mask: Vec<bool> = mask_bytes.iter().map(|&m| m == 1).collect();
    let values = r.f32s(n);
    if values.iter().zip(&mask).any(|(v, m)| !m && *v != 0.0) {
        return Err(Error::invalid("sparse grid stores a value under a false mask"));
    }
    SparseGrid::from_parts(h, w, values, mask)
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = header(LABEL_MAGIC, &[labels.height, labels.width])?;
    out.extend_from_slice(&labels.labels);
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new("label map", bytes, LABEL_MAGIC)?;
    let [h, w] = r.u32s::<2>()?;
    r.expect_payload(h.checked_mul(w))?;
    let labels = r.u8s(h * w).to_vec();
    LabelMap::new(h, w, labels)
}

pub fn encode_camera(camera: &CameraModel) -> String {
    let mut s = String::from("K\n");
    for r in 0..3 {
        let row: Vec<String> = (0..4).map(|c| camera.intrinsics[(r, c)].to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s.push_str("T\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| camera.extrinsics[(r, c)].to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(
        s,
        "SIZE {} {} {} {}",
        camera.image_height, camera.image_width, camera.feature_height, camera.feature_width
    );
    s
}

pub fn decode_camera(text: &str) -> Result<CameraModel> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let err = |line: usize, message: String| Error::Parse {
        what: "calibration".into(),
        line,
        message,
    };
    let expect_tag = |idx: usize, tag: &str| -> Result<()> {
        match lines.get(idx) {
            Some((_, l)) if *l == tag => Ok(()),
            Some((n, l)) => Err(err(*n, format!("expected {tag:?}, found {l:?}"))),
            None => Err(err(text.lines().count(), format!("missing {tag:?} section"))),
        }
    };
    let row = |idx: usize| -> Result<[f64; 4]> {
        let (n, l) = lines
            .get(idx)
            .ok_or_else(|| err(text.lines().count(), "unexpected end of file".into()))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(*n, format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        vals.try_into()
            .map_err(|v: Vec<f64>| err(*n, format!("expected 4 values, found {}", v.len())))
    };
    expect_tag(0, "K")?;
    let mut k = Matrix3x4::zeros();
    for r in 0..3 {
        let vals = row(1 + r)?;
        for c in 0..4 {
            k[(r, c)] = vals[c];
        }
    }
    expect_tag(4, "T")?;
    let mut t = Matrix4::zeros();
    for r in 0..4 {
        let vals = row(5 + r)?;
        for c in 0..4 {
            t[(r, c)] = vals[c];
        }
    }
    let (n, size_line) = lines
        .get(9)
        .ok_or_else(|| err(text.lines().count(), "missing SIZE line".into()))?;
    let toks: Vec<&str> = size_line.split_whitespace().collect();
    if toks.len() != 5 || toks[0] != "SIZE" {
        return Err(err(*n, format!("expected \"SIZE H W h w\", found {size_line:?}")));
    }
    let dims: Vec<usize> = toks[1..]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|e| err(*n, format!("bad size {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    if let Some((n, l)) = lines.get(10) {
        return Err(err(*n, format!("unexpected trailing content {l:?}")));
    }
    CameraModel::new(k, t, (dims[0], dims[1]), (dims[2], dims[3]))
}

pub fn decode_cloud_text(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                what: "point cloud".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 4 {
            return Err(Error::Parse {
                what: "point cloud".into(),
                line: i + 1,
                message: format!("expected 4 values, found {}", vals.len()),
            });
        }
        pts.push([vals[0], vals[1], vals[2], vals[3]]);
    }
    PointCloud::new(pts)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn is_text_cloud(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "xyz"))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(path.display().to_string()))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = read(path)?;
    if is_text_cloud(path) {
        let text = String::from_utf8_lossy(&bytes);
        return with_path(path, decode_cloud_text(&text));
    }
    with_path(path, decode_cloud(&bytes))
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if is_text_cloud(path) {
        let mut s = String::new();
        for p in &cloud.points {
            let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], p[3]);
        }
        return write(path, s.as_bytes());
    }
    write(path, &encode_cloud(cloud)?)
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    with_path(path, decode_feature_map(&read(path)?))
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write(path, &encode_feature_map(map)?)
}

pub fn load_sparse_grid(path: &Path) -> Result<SparseGrid> {
    with_path(path, decode_sparse_grid(&read(path)?))
}

pub fn save_sparse_grid(path: &Path, grid: &SparseGrid) -> Result<()> {
    write(path, &encode_sparse_grid(grid)?)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    with_path(path, decode_labels(&read(path)?))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write(path, &encode_labels(labels)?)
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    let bytes = read(path)?;
    with_path(path, decode_camera(&String::from_utf8_lossy(&bytes)))
}

pub fn save_camera(path: &Path, camera: &CameraModel) -> Result<()> {
    write(path, encode_camera(camera).as_bytes())
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}

pub fn load_text(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(format!("{} is not UTF-8: {e}", path.display())))
}
