//! Datasets, images, float maps, meshes, checkpoints and CSV.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3, Vector4};
use thiserror::Error;

use crate::gaussian::{FlatGaussian, GaussianScene};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};
use crate::raster::{Image, Raster, ScalarMap, VectorMap};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("view {name}: image is {got:?}, camera expects {expected:?}")]
    DimensionMismatch { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("view {name}: {message}")]
    InvalidCamera { name: String, message: String },
    #[error("dataset has no views")]
    Empty,
}

pub type Result<T> = std::result::Result<T, IoError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

/// Calibrated views with images and optional depth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Per-view z-depth maps (zero = no depth); used to seed the initial point cloud.
    pub depths: Vec<Option<ScalarMap>>,
    pub names: Vec<String>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(IoError::Empty);
        }
        assert_eq!(self.cameras.len(), self.images.len());
        for (k, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            let name = self.names.get(k).cloned().unwrap_or_else(|| k.to_string());
            cam.intrinsics
                .validate()
                .map_err(|e| IoError::InvalidCamera { name: name.clone(), message: e.to_string() })?;
            cam.pose
                .validate(MANIFEST_ROTATION_TOL)
                .map_err(|e| IoError::InvalidCamera { name: name.clone(), message: e.to_string() })?;
            let expected = (cam.width(), cam.height());
            if img.dims() != expected {
                return Err(IoError::DimensionMismatch { name, expected, got: img.dims() });
            }
            if let Some(Some(d)) = self.depths.get(k) {
                if d.dims() != expected {
                    return Err(IoError::DimensionMismatch { name, expected, got: d.dims() });
                }
            }
        }
        Ok(())
    }
}

/// Rotation tolerance accepted when reading hand-authored manifests.
pub const MANIFEST_ROTATION_TOL: f64 = 1e-6;
pub const MANIFEST_FILE: &str = "scene.txt";
const MANIFEST_HEADER: &str = "flatsplat-scene 1";

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes images as PNG, depth maps as PFM and the manifest `scene.txt`.
///
/// Manifest layout, one block per view:
/// ```text
/// flatsplat-scene 1
/// view view_000
/// intrinsics <fx> <fy> <cx> <cy> <width> <height>
/// rotation <9 floats, row-major, world-to-camera>
/// translation <3 floats>
/// image view_000.png
/// depth view_000_depth.pfm
/// end
/// ```
pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let mut text = String::new();
    writeln!(text, "{MANIFEST_HEADER}").unwrap();
    for (k, cam) in ds.cameras.iter().enumerate() {
        let name = &ds.names[k];
        let k_ = &cam.intrinsics;
        writeln!(text, "view {name}").unwrap();
        writeln!(
            text,
            "intrinsics {} {} {} {} {} {}",
            fmt_f64(k_.fx),
            fmt_f64(k_.fy),
            fmt_f64(k_.cx),
            fmt_f64(k_.cy),
            k_.width,
            k_.height
        )
        .unwrap();
        let r = &cam.pose.rotation;
        let rows: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| fmt_f64(r[(i, j)]))).collect();
        writeln!(text, "rotation {}", rows.join(" ")).unwrap();
        let t = &cam.pose.translation;
        writeln!(text, "translation {} {} {}", fmt_f64(t.x), fmt_f64(t.y), fmt_f64(t.z)).unwrap();
        let image_file = format!("{name}.png");
        write_png(&dir.join(&image_file), &ds.images[k])?;
        writeln!(text, "image {image_file}").unwrap();
        if let Some(Some(depth)) = ds.depths.get(k) {
            let depth_file = format!("{name}_depth.pfm");
            write_pfm_scalar(&dir.join(&depth_file), depth)?;
            writeln!(text, "depth {depth_file}").unwrap();
        }
        writeln!(text, "end").unwrap();
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(file_err(&path))
}

#[derive(Default)]
struct ViewRecord {
    name: String,
    intrinsics: Option<CameraIntrinsics>,
    rotation: Option<Matrix3<f64>>,
    translation: Option<Vector3<f64>>,
    image: Option<String>,
    depth: Option<String>,
}

fn parse_floats(path: &Path, line: usize, fields: &[&str], n: usize) -> Result<Vec<f64>> {
    if fields.len() != n {
        return Err(IoError::Manifest {
            path: path.to_path_buf(),
            line,
            message: format!("expected {n} values, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| IoError::Manifest {
                path: path.to_path_buf(),
                line,
                message: format!("not a number: {s}"),
            })
        })
        .collect()
}

/// Loads a dataset directory written by [`save_dataset`] (or authored by hand), or a
/// manifest file path directly.
pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(&manifest).map_err(file_err(&manifest))?;
    let mut records: Vec<ViewRecord> = Vec::new();
    let mut current: Option<ViewRecord> = None;
    let bad = |line: usize, message: String| IoError::Manifest { path: manifest.clone(), line, message };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(file_err(&manifest))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line.starts_with("flatsplat-scene") {
            if line != MANIFEST_HEADER {
                return Err(bad(lineno, format!("unsupported manifest version: {line}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (key, rest) = (fields[0], &fields[1..]);
        if key == "view" {
            if current.is_some() {
                return Err(bad(lineno, "view block not closed with 'end'".into()));
            }
            current = Some(ViewRecord { name: rest.join(" "), ..Default::default() });
            continue;
        }
        let Some(rec) = current.as_mut() else {
            return Err(bad(lineno, format!("'{key}' outside a view block")));
        };
        match key {
            "intrinsics" => {
                let v = parse_floats(&manifest, lineno, rest, 6)?;
                if v[4].fract() != 0.0 || v[5].fract() != 0.0 || v[4] < 0.0 || v[5] < 0.0 {
                    return Err(bad(lineno, "image size must be a non-negative integer".into()));
                }
                rec.intrinsics = Some(CameraIntrinsics {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                    width: v[4] as usize,
                    height: v[5] as usize,
                });
            }
            "rotation" => rec.rotation = Some(Matrix3::from_row_slice(&parse_floats(&manifest, lineno, rest, 9)?)),
            "translation" => {
                rec.translation = Some(Vector3::from_row_slice(&parse_floats(&manifest, lineno, rest, 3)?))
            }
            "image" => rec.image = Some(rest.join(" ")),
            "depth" => rec.depth = Some(rest.join(" ")),
            "end" => records.push(current.take().unwrap()),
            other => return Err(bad(lineno, format!("unknown key '{other}'"))),
        }
    }
    if current.is_some() {
        return Err(bad(0, "last view block not closed with 'end'".into()));
    }
    if records.is_empty() {
        return Err(IoError::Empty);
    }

    let mut ds = SceneDataset { cameras: vec![], images: vec![], depths: vec![], names: vec![] };
    for rec in records {
        let missing = |what: &str| IoError::InvalidCamera { name: rec.name.clone(), message: format!("missing {what}") };
        let intrinsics = rec.intrinsics.ok_or_else(|| missing("intrinsics"))?;
        let pose = CameraPose {
            rotation: rec.rotation.ok_or_else(|| missing("rotation"))?,
            translation: rec.translation.ok_or_else(|| missing("translation"))?,
        };
        let invalid = |e: crate::geometry::GeometryError| IoError::InvalidCamera { name: rec.name.clone(), message: e.to_string() };
        intrinsics.validate().map_err(invalid)?;
        pose.validate(MANIFEST_ROTATION_TOL).map_err(invalid)?;
        let image = read_png(&dir.join(rec.image.as_ref().ok_or_else(|| missing("image"))?))?;
        let depth = match &rec.depth {
            Some(f) => Some(read_pfm_scalar(&dir.join(f))?),
            None => None,
        };
        ds.cameras.push(Camera::new(intrinsics, pose));
        ds.images.push(image);
        ds.depths.push(depth);
        ds.names.push(rec.name);
    }
    ds.validate()?;
    Ok(ds)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().flat_map(|c| [to_u8(c.x), to_u8(c.y), to_u8(c.z)]).collect();
    write_png_raw(path, image.width(), image.height(), png::ColorType::Rgb, &bytes)
}

/// 8-bit grayscale PNG.
pub fn write_png_gray(path: &Path, map: &Raster<u8>) -> Result<()> {
    write_png_raw(path, map.width(), map.height(), png::ColorType::Grayscale, map.data())
}

fn write_png_raw(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(file_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let px = &buf[..info.buffer_size()];
    let data = px
        .chunks_exact(channels)
        .map(|c| {
            let f = |v: u8| v as f64 / 255.0;
            if channels < 3 {
                Vector3::repeat(f(c[0]))
            } else {
                Vector3::new(f(c[0]), f(c[1]), f(c[2]))
            }
        })
        .collect();
    Ok(Raster::from_vec(w, h, data))
}

/// PFM rows are stored bottom to top; values are little-endian `f32`.
fn write_pfm(path: &Path, w: usize, h: usize, channels: usize, value: impl Fn(usize, usize, usize) -> f64) -> Result<()> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut out = BufWriter::new(file);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut bytes = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    for j in (0..h).rev() {
        for i in 0..w {
            for c in 0..channels {
                bytes.extend_from_slice(&(value(i, j, c) as f32).to_le_bytes());
            }
        }
    }
    out.write_all(&bytes).map_err(file_err(path))?;
    out.flush().map_err(file_err(path))
}

pub fn write_pfm_scalar(path: &Path, map: &ScalarMap) -> Result<()> {
    write_pfm(path, map.width(), map.height(), 1, |i, j, _| *map.get(i, j))
}

pub fn write_pfm_vector(path: &Path, map: &VectorMap) -> Result<()> {
    write_pfm(path, map.width(), map.height(), 3, |i, j, c| map.get(i, j)[c])
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Returns (width, height, channels, row-major top-to-bottom values).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path).map_err(file_err(path))?.read_to_end(&mut bytes).map_err(file_err(path))?;
    let mut pos = 0;
    let header_err = || format_err(path, "malformed PFM header");
    let channels = match read_token(&bytes, &mut pos).as_deref() {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(header_err()),
    };
    let mut num = || read_token(&bytes, &mut pos).ok_or_else(header_err);
    let w: usize = num()?.parse().map_err(|_| header_err())?;
    let h: usize = num()?.parse().map_err(|_| header_err())?;
    let scale: f64 = num()?.parse().map_err(|_| header_err())?;
    pos += 1;
    let n = w * h * channels;
    if bytes.len() < pos + 4 * n {
        return Err(format_err(path, "truncated PFM data"));
    }
    let raw = &bytes[pos..pos + 4 * n];
    let read = |k: usize| {
        let b = [raw[4 * k], raw[4 * k + 1], raw[4 * k + 2], raw[4 * k + 3]];
        if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    let mut values = vec![0.0; n];
    for j in 0..h {
        let src_row = h - 1 - j;
        for i in 0..w * channels {
            values[j * w * channels + i] = read(src_row * w * channels + i) as f64;
        }
    }
    Ok((w, h, channels, values))
}

pub fn read_pfm_scalar(path: &Path) -> Result<ScalarMap> {
    let (w, h, c, v) = read_pfm(path)?;
    if c != 1 {
        return Err(format_err(path, "expected a single-channel PFM"));
    }
    Ok(Raster::from_vec(w, h, v))
}

pub fn read_pfm_vector(path: &Path) -> Result<VectorMap> {
    let (w, h, c, v) = read_pfm(path)?;
    if c != 3 {
        return Err(format_err(path, "expected a three-channel PFM"));
    }
    Ok(Raster::from_vec(w, h, v.chunks_exact(3).map(Vector3::from_row_slice).collect()))
}

/// Indexed triangle mesh in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`.
    pub colors: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, k: usize) -> [Vector3<f64>; 3] {
        self.triangles[k].map(|v| self.vertices[v as usize])
    }

    pub fn triangle_area(&self, k: usize) -> f64 {
        let [a, b, c] = self.triangle(k);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh, format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut out = BufWriter::new(file);
    let fmt_name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt_name} 1.0\nelement vertex {}\n", mesh.vertices.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.triangles.len()));
    let mut bytes = header.into_bytes();
    for (k, v) in mesh.vertices.iter().enumerate() {
        let color = mesh.colors.as_ref().map(|c| c[k].map(to_u8));
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", v.x as f32, v.y as f32, v.z as f32);
                if let Some(c) = color {
                    line.push_str(&format!(" {} {} {}", c.x, c.y, c.z));
                }
                line.push('\n');
                bytes.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for x in v.iter() {
                    bytes.extend_from_slice(&(*x as f32).to_le_bytes());
                }
                if let Some(c) = color {
                    bytes.extend_from_slice(&[c.x, c.y, c.z]);
                }
            }
        }
    }
    for t in &mesh.triangles {
        match format {
            PlyFormat::Ascii => bytes.extend_from_slice(format!("3 {} {} {}\n", t[0], t[1], t[2]).as_bytes()),
            PlyFormat::BinaryLittleEndian => {
                bytes.push(3);
                for i in t {
                    bytes.extend_from_slice(&(*i as i32).to_le_bytes());
                }
            }
        }
    }
    out.write_all(&bytes).map_err(file_err(path))?;
    out.flush().map_err(file_err(path))
}

/// Reads the vertex positions and triangular faces of a PLY written by [`write_ply`]
/// (other properties are skipped when they are fixed-size scalars).
pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let mut bytes = Vec::new();
    File::open(path).map_err(file_err(path))?.read_to_end(&mut bytes).map_err(file_err(path))?;
    let end = b"end_header\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| format_err(path, "missing end_header"))?
        + end.len();
    let header = String::from_utf8_lossy(&bytes[..header_end]).into_owned();
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(format_err(path, "not a PLY file"));
    }
    let mut format = None;
    let mut n_vertices = 0;
    let mut n_faces = 0;
    let mut vertex_props: Vec<(String, String)> = Vec::new();
    let mut element = "";
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(format_err(path, format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => {
                element = "vertex";
                n_vertices = n.parse().map_err(|_| format_err(path, "bad vertex count"))?;
            }
            ["element", "face", n] => {
                element = "face";
                n_faces = n.parse().map_err(|_| format_err(path, "bad face count"))?;
            }
            ["property", ty, name] if element == "vertex" => vertex_props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let format = format.ok_or_else(|| format_err(path, "missing format line"))?;
    let xyz: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|n| vertex_props.iter().position(|(_, p)| p == n).ok_or_else(|| format_err(path, "missing vertex coordinate")))
        .collect::<Result<_>>()?;
    let mut mesh = TriangleMesh::default();
    match format {
        PlyFormat::Ascii => {
            let body = String::from_utf8_lossy(&bytes[header_end..]).into_owned();
            let mut rows = body.lines().filter(|l| !l.trim().is_empty());
            for _ in 0..n_vertices {
                let row = rows.next().ok_or_else(|| format_err(path, "truncated vertex list"))?;
                let v: Vec<f64> = row.split_whitespace().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                mesh.vertices.push(Vector3::new(v[xyz[0]], v[xyz[1]], v[xyz[2]]));
            }
            for _ in 0..n_faces {
                let row = rows.next().ok_or_else(|| format_err(path, "truncated face list"))?;
                let v: Vec<u32> = row.split_whitespace().map(|s| s.parse().unwrap_or(u32::MAX)).collect();
                if v.len() != 4 || v[0] != 3 {
                    return Err(format_err(path, "only triangular faces are supported"));
                }
                mesh.triangles.push([v[1], v[2], v[3]]);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let size = |ty: &str| match ty {
                "char" | "uchar" | "int8" | "uint8" => Some(1),
                "short" | "ushort" | "int16" | "uint16" => Some(2),
                "int" | "uint" | "float" | "int32" | "uint32" | "float32" => Some(4),
                "double" | "float64" => Some(8),
                _ => None,
            };
            let sizes: Vec<usize> = vertex_props
                .iter()
                .map(|(t, _)| size(t).ok_or_else(|| format_err(path, format!("unsupported property type {t}"))))
                .collect::<Result<_>>()?;
            let stride: usize = sizes.iter().sum();
            let mut pos = header_end;
            let need = |pos: usize, n: usize| {
                if pos + n > bytes.len() {
                    Err(format_err(path, "truncated binary PLY"))
                } else {
                    Ok(())
                }
            };
            for _ in 0..n_vertices {
                need(pos, stride)?;
                let mut coords = [0.0; 3];
                for (c, &prop) in xyz.iter().enumerate() {
                    let off: usize = sizes[..prop].iter().sum();
                    let b = &bytes[pos + off..];
                    coords[c] = match vertex_props[prop].0.as_str() {
                        "double" | "float64" => f64::from_le_bytes(b[..8].try_into().unwrap()),
                        _ => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
                    };
                }
                mesh.vertices.push(Vector3::from(coords));
                pos += stride;
            }
            for _ in 0..n_faces {
                need(pos, 13)?;
                if bytes[pos] != 3 {
                    return Err(format_err(path, "only triangular faces are supported"));
                }
                let idx = |k: usize| i32::from_le_bytes(bytes[pos + 1 + 4 * k..pos + 5 + 4 * k].try_into().unwrap()) as u32;
                mesh.triangles.push([idx(0), idx(1), idx(2)]);
                pos += 13;
            }
        }
    }
    if mesh.triangles.iter().flatten().any(|&i| i as usize >= mesh.vertices.len()) {
        return Err(format_err(path, "face index out of range"));
    }
    Ok(mesh)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSPLATCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_RECORD: usize = 14;

/// Binary checkpoint: magic, version (u32), count (u64), background (3 f64), then per
/// Gaussian `position(3) rotation(4) scales(3) opacity color(3)` as little-endian `f64`.
pub fn write_checkpoint(path: &Path, scene: &GaussianScene) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + scene.len() * CHECKPOINT_RECORD * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    for v in scene.background.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for g in &scene.gaussians {
        let record = g
            .position
            .iter()
            .chain(g.rotation.iter())
            .chain(g.scales.iter())
            .chain(std::iter::once(&g.opacity))
            .chain(g.color.iter());
        for v in record {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(file_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<GaussianScene> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    if bytes.len() < 44 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let f = |k: usize| f64::from_le_bytes(bytes[20 + 8 * k..28 + 8 * k].try_into().unwrap());
    if bytes.len() != 20 + 8 * (3 + count * CHECKPOINT_RECORD) {
        return Err(format_err(path, "checkpoint size does not match its header"));
    }
    let background = Vector3::new(f(0), f(1), f(2));
    let gaussians = (0..count)
        .map(|i| {
            let b = 3 + i * CHECKPOINT_RECORD;
            let v = |k: usize| f(b + k);
            FlatGaussian {
                position: Vector3::new(v(0), v(1), v(2)),
                rotation: Vector4::new(v(3), v(4), v(5), v(6)),
                scales: Vector3::new(v(7), v(8), v(9)),
                opacity: v(10),
                color: Vector3::new(v(11), v(12), v(13)),
            }
        })
        .collect::<Vec<_>>();
    if let Some(k) = gaussians.iter().position(|g| !g.satisfies_invariants()) {
        return Err(format_err(path, format!("gaussian {k} violates parameter invariants")));
    }
    Ok(GaussianScene::new(gaussians, background))
}

/// Writes a CSV table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    w.write_record(header).map_err(|e| format_err(path, e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush().map_err(file_err(path))
}
