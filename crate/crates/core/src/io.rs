//! Scene, camera, depth-map, and point-cloud serialization.
//!
//! Formats:
//! - Scenes: PLY in the standard splatting interchange layout (positions,
//!   log-scales, quaternion, logit-opacity, DC spherical-harmonic color).
//! - Cameras: a purpose-built JSON array, hand-writable for fixtures.
//! - Depth: PFM (float-exact) plus an optional 16-bit PNG visualization.
//! - Point clouds: plain PLY, ASCII or binary little-endian.
//!
//! Every writer is deterministic byte-for-byte; every parser rejects
//! malformed input outright rather than returning a partial result.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{quat_wxyz, Camera, GaussianPrimitive, GeomError, OPACITY_EPS};
use crate::img::{ImageF, Mask};

/// DC spherical-harmonic basis constant, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid primitive in record {index}: {source}")]
    BadPrimitive { index: usize, source: GeomError },
}

fn parse_err(offset: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        offset,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Scene PLY
// ---------------------------------------------------------------------------

/// Property names of the splatting layout, in on-disk order.
const SCENE_PROPS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    /// All float properties of the vertex element, in order.
    properties: Vec<String>,
    /// Byte offset of the payload.
    payload_offset: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader, IoError> {
    let mut offset = 0usize;
    let mut lines = Vec::new();
    loop {
        let start = offset;
        let Some(rel) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(start, "header not terminated by end_header"));
        };
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| parse_err(start, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        offset += rel + 1;
        let done = line == "end_header";
        lines.push((start, line));
        if done {
            break;
        }
    }
    let mut iter = lines.iter();
    let Some((off0, magic)) = iter.next() else {
        return Err(parse_err(0, "empty file"));
    };
    if magic != "ply" {
        return Err(parse_err(*off0, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    for (off, line) in iter {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => {
                format = Some(PlyFormat::BinaryLittleEndian)
            }
            ["format", ..] => {
                return Err(parse_err(*off, format!("unsupported format: {line}")));
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                in_vertex_element = true;
                vertex_count = Some(n.parse::<usize>().map_err(|_| {
                    parse_err(*off, format!("bad vertex count: {n}"))
                })?);
            }
            ["element", ..] => in_vertex_element = false,
            ["property", kind, name] if in_vertex_element => {
                if *kind != "float" && *kind != "float32" {
                    return Err(parse_err(
                        *off,
                        format!("vertex property '{name}' has non-float type {kind}"),
                    ));
                }
                properties.push((*name).to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {}
            _ => return Err(parse_err(*off, format!("unrecognized header line: {line}"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(0, "header missing format line"))?;
    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(0, "header missing vertex element"))?;
    Ok(PlyHeader {
        format,
        vertex_count,
        properties,
        payload_offset: offset,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Loads a scene from a splatting-layout PLY (ASCII or binary little-endian).
/// Scales are exponentiated, opacity passes through a sigmoid and is clamped
/// to the valid range, and DC coefficients become RGB colors.
pub fn load_ply(path: &Path) -> Result<Vec<GaussianPrimitive>, IoError> {
    let bytes = fs::read(path)?;
    let header = parse_ply_header(&bytes)?;
    // Map each required property to its column index.
    let mut columns = [0usize; SCENE_PROPS.len()];
    for (slot, name) in columns.iter_mut().zip(SCENE_PROPS) {
        *slot = header
            .properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| {
                parse_err(
                    header.payload_offset,
                    format!("missing required vertex property '{name}'"),
                )
            })?;
    }
    let stride = header.properties.len();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::BinaryLittleEndian => {
            let need = header.payload_offset + header.vertex_count * stride * 4;
            if bytes.len() < need {
                return Err(parse_err(
                    bytes.len(),
                    format!("payload truncated: need {need} bytes"),
                ));
            }
            for i in 0..header.vertex_count {
                let base = header.payload_offset + i * stride * 4;
                rows.push(
                    (0..stride)
                        .map(|j| LittleEndian::read_f32(&bytes[base + j * 4..base + j * 4 + 4]))
                        .collect(),
                );
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[header.payload_offset..])
                .map_err(|_| parse_err(header.payload_offset, "payload is not valid UTF-8"))?;
            let mut line_offset = header.payload_offset;
            let mut line_iter = text.lines();
            for i in 0..header.vertex_count {
                let Some(line) = line_iter.next() else {
                    return Err(parse_err(
                        bytes.len(),
                        format!("payload truncated at record {i}"),
                    ));
                };
                let values: Result<Vec<f32>, _> =
                    line.split_whitespace().map(str::parse::<f32>).collect();
                let values = values.map_err(|e| {
                    parse_err(line_offset, format!("record {i}: {e}"))
                })?;
                if values.len() != stride {
                    return Err(parse_err(
                        line_offset,
                        format!(
                            "record {i}: expected {stride} values, found {}",
                            values.len()
                        ),
                    ));
                }
                rows.push(values);
                line_offset += line.len() + 1;
            }
        }
    }
    rows.iter()
        .enumerate()
        .map(|(index, row)| {
            let v = |k: usize| row[columns[k]] as f64;
            let center = Vector3::new(v(0), v(1), v(2));
            let color = Vector3::new(v(3), v(4), v(5))
                .map(|f| (0.5 + SH_C0 * f).clamp(0.0, 1.0));
            let opacity = sigmoid(v(6)).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            let scales = Vector3::new(v(7).exp(), v(8).exp(), v(9).exp());
            let rotation = quat_wxyz(v(10), v(11), v(12), v(13));
            GaussianPrimitive::new(center, scales, rotation, opacity, color)
                .map_err(|source| IoError::BadPrimitive { index, source })
        })
        .collect()
}

/// Saves a scene in the binary little-endian splatting layout.
pub fn save_ply(path: &Path, scene: &[GaussianPrimitive]) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", scene.len()).as_bytes());
    for name in SCENE_PROPS {
        out.extend_from_slice(format!("property float {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    let mut buf = [0u8; 4];
    let mut push = |out: &mut Vec<u8>, value: f64| {
        LittleEndian::write_f32(&mut buf, value as f32);
        out.extend_from_slice(&buf);
    };
    for g in scene {
        let c = g.center();
        push(&mut out, c.x);
        push(&mut out, c.y);
        push(&mut out, c.z);
        let color = g.color();
        for k in 0..3 {
            push(&mut out, (color[k] - 0.5) / SH_C0);
        }
        push(&mut out, logit(g.opacity()));
        let s = g.scales();
        for k in 0..3 {
            push(&mut out, s[k].ln());
        }
        let q = g.rotation();
        for value in [q.w, q.i, q.j, q.k] {
            push(&mut out, value);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cameras JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

fn camera_from_record(record: &CameraRecord, path: &str) -> Result<Camera, IoError> {
    if record.fx <= 0.0 || record.fy <= 0.0 {
        return Err(IoError::Schema {
            path: format!("{path}.fx/fy"),
            message: "focal lengths must be positive".into(),
        });
    }
    if record.width == 0 || record.height == 0 {
        return Err(IoError::Schema {
            path: format!("{path}.width/height"),
            message: "image dimensions must be positive".into(),
        });
    }
    let k = Matrix3::new(
        record.fx, 0.0, record.cx, 0.0, record.fy, record.cy, 0.0, 0.0, 1.0,
    );
    let r = Matrix3::from_row_slice(&record.rotation);
    let t = Vector3::from_row_slice(&record.translation);
    Camera::new(k, r, t, record.width, record.height).map_err(|e| IoError::Schema {
        path: path.to_string(),
        message: e.to_string(),
    })
}

/// Loads a list of cameras from a JSON array. Schema errors name the
/// offending array entry and field.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, IoError> {
    let text = fs::read_to_string(path)?;
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| IoError::Schema {
            path: "$".into(),
            message: e.to_string(),
        })?;
    records
        .iter()
        .enumerate()
        .map(|(i, value)| {
            let entry_path = format!("$[{i}]");
            let record: CameraRecord =
                serde_json::from_value(value.clone()).map_err(|e| IoError::Schema {
                    path: entry_path.clone(),
                    message: e.to_string(),
                })?;
            camera_from_record(&record, &entry_path)
        })
        .collect()
}

/// Saves cameras in the schema read by [`load_cameras`].
pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<(), IoError> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| {
            let k = c.intrinsics();
            let r = c.rotation();
            let t = c.translation();
            CameraRecord {
                width: c.width,
                height: c.height,
                fx: k[(0, 0)],
                fy: k[(1, 1)],
                cx: k[(0, 2)],
                cy: k[(1, 2)],
                rotation: [
                    r[(0, 0)],
                    r[(0, 1)],
                    r[(0, 2)],
                    r[(1, 0)],
                    r[(1, 1)],
                    r[(1, 2)],
                    r[(2, 0)],
                    r[(2, 1)],
                    r[(2, 2)],
                ],
                translation: [t.x, t.y, t.z],
            }
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).expect("camera records serialize");
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Depth maps: PFM and PNG visualization
// ---------------------------------------------------------------------------

/// Writes a single-channel PFM (`Pf`), rows bottom-to-top, little-endian
/// (scale -1.0). Masked pixels become +infinity.
pub fn write_depth_pfm(depth: &ImageF, mask: &Mask, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).as_bytes());
    let mut buf = [0u8; 4];
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let v = if mask.at(x, y) {
                depth.at(x, y) as f32
            } else {
                f32::INFINITY
            };
            LittleEndian::write_f32(&mut buf, v);
            out.extend_from_slice(&buf);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a PFM written by [`write_depth_pfm`]. Non-finite pixels become
/// masked.
pub fn read_depth_pfm(path: &Path) -> Result<(ImageF, Mask), IoError> {
    let bytes = fs::read(path)?;
    let mut offset = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<(usize, String), IoError> {
        let start = offset;
        let Some(rel) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(start, "unterminated PFM header line"));
        };
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| parse_err(start, "PFM header is not valid UTF-8"))?
            .to_string();
        offset += rel + 1;
        Ok((start, line))
    };
    let (off, magic) = next_line(&bytes)?;
    if magic != "Pf" {
        return Err(parse_err(off, "not a single-channel PFM (expected 'Pf')"));
    }
    let (off, dims) = next_line(&bytes)?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let (width, height) = match parts.as_slice() {
        [w, h] => (
            w.parse::<usize>()
                .map_err(|_| parse_err(off, "bad width"))?,
            h.parse::<usize>()
                .map_err(|_| parse_err(off, "bad height"))?,
        ),
        _ => return Err(parse_err(off, "bad dimensions line")),
    };
    let (off, scale) = next_line(&bytes)?;
    let scale: f64 = scale
        .trim()
        .parse()
        .map_err(|_| parse_err(off, "bad scale"))?;
    if scale >= 0.0 {
        return Err(parse_err(off, "big-endian PFM not supported"));
    }
    let need = offset + width * height * 4;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: need {need} bytes"),
        ));
    }
    let mut depth = ImageF::zeros(width, height);
    let mut mask = Mask::filled(width, height, false);
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let base = offset + (row * width + x) * 4;
            let v = LittleEndian::read_f32(&bytes[base..base + 4]);
            if v.is_finite() {
                depth.set(x, y, v as f64);
                mask.set(x, y, true);
            }
        }
    }
    Ok((depth, mask))
}

/// Writes a 3-channel PFM (`PF`), rows bottom-to-top, interleaved RGB
/// little-endian floats. Used for target view images.
pub fn write_rgb_pfm(image: &crate::img::ImageRgb, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", image.width, image.height).as_bytes());
    let mut buf = [0u8; 4];
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            let v = image.at(x, y);
            for c in 0..3 {
                LittleEndian::write_f32(&mut buf, v[c] as f32);
                out.extend_from_slice(&buf);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a 3-channel PFM written by [`write_rgb_pfm`].
pub fn read_rgb_pfm(path: &Path) -> Result<crate::img::ImageRgb, IoError> {
    let bytes = fs::read(path)?;
    let mut offset = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<(usize, String), IoError> {
        let start = offset;
        let Some(rel) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(start, "unterminated PFM header line"));
        };
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| parse_err(start, "PFM header is not valid UTF-8"))?
            .to_string();
        offset += rel + 1;
        Ok((start, line))
    };
    let (off, magic) = next_line(&bytes)?;
    if magic != "PF" {
        return Err(parse_err(off, "not a 3-channel PFM (expected 'PF')"));
    }
    let (off, dims) = next_line(&bytes)?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let (width, height) = match parts.as_slice() {
        [w, h] => (
            w.parse::<usize>()
                .map_err(|_| parse_err(off, "bad width"))?,
            h.parse::<usize>()
                .map_err(|_| parse_err(off, "bad height"))?,
        ),
        _ => return Err(parse_err(off, "bad dimensions line")),
    };
    let (off, scale) = next_line(&bytes)?;
    let scale: f64 = scale
        .trim()
        .parse()
        .map_err(|_| parse_err(off, "bad scale"))?;
    if scale >= 0.0 {
        return Err(parse_err(off, "big-endian PFM not supported"));
    }
    let need = offset + width * height * 12;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: need {need} bytes"),
        ));
    }
    let mut image = crate::img::ImageRgb::zeros(width, height);
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let base = offset + (row * width + x) * 12;
            let v = Vector3::new(
                LittleEndian::read_f32(&bytes[base..base + 4]) as f64,
                LittleEndian::read_f32(&bytes[base + 4..base + 8]) as f64,
                LittleEndian::read_f32(&bytes[base + 8..base + 12]) as f64,
            );
            image.set(x, y, v);
        }
    }
    Ok(image)
}

/// Writes a 16-bit grayscale PNG visualization: valid depths min-max
/// normalized, masked pixels black. Lossy; for inspection only.
pub fn write_depth_png16(depth: &ImageF, mask: &Mask, path: &Path) -> Result<(), IoError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in 0..depth.height {
        for x in 0..depth.width {
            if mask.at(x, y) {
                lo = lo.min(depth.at(x, y));
                hi = hi.max(depth.at(x, y));
            }
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        depth.width as u32,
        depth.height as u32,
    );
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        let (xu, yu) = (x as usize, y as usize);
        *pixel = if mask.at(xu, yu) {
            let t = (depth.at(xu, yu) - lo) / span;
            image::Luma([(t * u16::MAX as f64).round() as u16])
        } else {
            image::Luma([0])
        };
    }
    img.save(path)
        .map_err(|e| parse_err(0, format!("png encode failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Point-cloud PLY
// ---------------------------------------------------------------------------

/// Writes a bare xyz point cloud. `binary` selects binary little-endian
/// over ASCII.
pub fn write_point_cloud_ply(
    path: &Path,
    points: &[Vector3<f64>],
    binary: bool,
) -> Result<(), IoError> {
    let mut out = Vec::new();
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    out.extend_from_slice(
        format!(
            "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            points.len()
        )
        .as_bytes(),
    );
    if binary {
        let mut buf = [0u8; 4];
        for p in points {
            for v in [p.x, p.y, p.z] {
                LittleEndian::write_f32(&mut buf, v as f32);
                out.extend_from_slice(&buf);
            }
        }
    } else {
        for p in points {
            writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)
                .expect("writing to a Vec cannot fail");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an xyz point cloud written by [`write_point_cloud_ply`].
pub fn read_point_cloud_ply(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let bytes = fs::read(path)?;
    let header = parse_ply_header(&bytes)?;
    let mut idx = [0usize; 3];
    for (slot, name) in idx.iter_mut().zip(["x", "y", "z"]) {
        *slot = header
            .properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| {
                parse_err(
                    header.payload_offset,
                    format!("missing required vertex property '{name}'"),
                )
            })?;
    }
    let stride = header.properties.len();
    let mut points = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::BinaryLittleEndian => {
            let need = header.payload_offset + header.vertex_count * stride * 4;
            if bytes.len() < need {
                return Err(parse_err(bytes.len(), "payload truncated"));
            }
            for i in 0..header.vertex_count {
                let base = header.payload_offset + i * stride * 4;
                let v = |j: usize| {
                    LittleEndian::read_f32(&bytes[base + j * 4..base + j * 4 + 4]) as f64
                };
                points.push(Vector3::new(v(idx[0]), v(idx[1]), v(idx[2])));
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[header.payload_offset..])
                .map_err(|_| parse_err(header.payload_offset, "payload is not valid UTF-8"))?;
            for (i, line) in text.lines().take(header.vertex_count).enumerate() {
                let values: Result<Vec<f64>, _> =
                    line.split_whitespace().map(str::parse::<f64>).collect();
                let values = values.map_err(|e| {
                    parse_err(header.payload_offset, format!("record {i}: {e}"))
                })?;
                if values.len() != stride {
                    return Err(parse_err(
                        header.payload_offset,
                        format!("record {i}: wrong arity"),
                    ));
                }
                points.push(Vector3::new(
                    values[idx[0]],
                    values[idx[1]],
                    values[idx[2]],
                ));
            }
            if points.len() != header.vertex_count {
                return Err(parse_err(bytes.len(), "payload truncated"));
            }
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Metadata sidecar stored next to a checkpoint PLY.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: usize,
    /// Hex digest of the training configuration.
    pub config_hash: String,
    /// Total loss per recorded iteration.
    pub loss_history: Vec<f64>,
}

/// Writes `<base>.ply` and `<base>.json`.
pub fn save_checkpoint(
    base: &Path,
    scene: &[GaussianPrimitive],
    meta: &CheckpointMeta,
) -> Result<(), IoError> {
    save_ply(&base.with_extension("ply"), scene)?;
    let text = serde_json::to_string_pretty(meta).expect("checkpoint meta serializes");
    fs::write(base.with_extension("json"), text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: &Path) -> Result<(Vec<GaussianPrimitive>, CheckpointMeta), IoError> {
    let scene = load_ply(&base.with_extension("ply"))?;
    let text = fs::read_to_string(base.with_extension("json"))?;
    let meta = serde_json::from_str(&text).map_err(|e| IoError::Schema {
        path: "$".into(),
        message: e.to_string(),
    })?;
    Ok((scene, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::look_at_camera;
    use crate::synth::random_ball_scene;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> std::path::PathBuf {
        static DIR: std::sync::OnceLock<tempfile::TempDir> = std::sync::OnceLock::new();
        DIR.get_or_init(|| tempfile::tempdir().unwrap())
            .path()
            .join(name)
    }

    #[test]
    fn ply_single_vertex_defaults() {
        // All-zero DC coefficients and logit 0 mean gray at half opacity.
        let path = tmp("single.ply");
        let mut out = Vec::new();
        out.extend_from_slice(b"ply\nformat ascii 1.0\nelement vertex 1\n");
        for name in SCENE_PROPS {
            out.extend_from_slice(format!("property float {name}\n").as_bytes());
        }
        out.extend_from_slice(b"end_header\n");
        // center (1,2,3); dc 0; opacity-logit 0; log-scales 0 (scale 1); unit quat.
        out.extend_from_slice(b"1 2 3 0 0 0 0 0 0 0 1 0 0 0\n");
        fs::write(&path, out).unwrap();
        let scene = load_ply(&path).unwrap();
        assert_eq!(scene.len(), 1);
        let g = &scene[0];
        assert_eq!(g.center(), Vector3::new(1.0, 2.0, 3.0));
        assert!((g.color() - Vector3::new(0.5, 0.5, 0.5)).norm() < 1e-12);
        assert!((g.opacity() - 0.5).abs() < 1e-12);
        assert!((g.scales() - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn ply_round_trip_is_stable() {
        // One save/load cycle rounds to f32; after that the payload must be
        // bitwise stable.
        let scene = random_ball_scene(Vector3::new(0.0, 0.0, 5.0), 1.0, 20, 0.3, 42);
        let p1 = tmp("roundtrip1.ply");
        let p2 = tmp("roundtrip2.ply");
        save_ply(&p1, &scene).unwrap();
        let loaded1 = load_ply(&p1).unwrap();
        save_ply(&p2, &loaded1).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn ply_truncated_payload_rejected() {
        let scene = random_ball_scene(Vector3::new(0.0, 0.0, 5.0), 1.0, 5, 0.3, 43);
        let path = tmp("truncated.ply");
        save_ply(&path, &scene).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        match load_ply(&path) {
            Err(IoError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ply_missing_property_rejected() {
        let path = tmp("missing_prop.ply");
        fs::write(
            &path,
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
        )
        .unwrap();
        assert!(matches!(load_ply(&path), Err(IoError::Parse { .. })));
    }

    #[test]
    fn ply_ignores_extra_properties() {
        let path = tmp("extra_props.ply");
        let mut out = Vec::new();
        out.extend_from_slice(b"ply\nformat ascii 1.0\nelement vertex 1\n");
        out.extend_from_slice(b"property float nx\nproperty float ny\nproperty float nz\n");
        for name in SCENE_PROPS {
            out.extend_from_slice(format!("property float {name}\n").as_bytes());
        }
        out.extend_from_slice(b"end_header\n");
        out.extend_from_slice(b"9 9 9 1 2 3 0 0 0 0 0 0 0 1 0 0 0\n");
        fs::write(&path, out).unwrap();
        let scene = load_ply(&path).unwrap();
        assert_eq!(scene[0].center(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn cameras_round_trip_projections() {
        let cameras: Vec<Camera> = (0..4)
            .map(|i| {
                look_at_camera(
                    Vector3::new(i as f64, 0.5, -3.0),
                    Vector3::new(0.0, 0.0, 5.0),
                    55.0,
                    64,
                    48,
                )
            })
            .collect();
        let path = tmp("cams.json");
        save_cameras(&path, &cameras).unwrap();
        let loaded = load_cameras(&path).unwrap();
        assert_eq!(loaded.len(), cameras.len());
        let mut rng = StdRng::seed_from_u64(3);
        for (a, b) in cameras.iter().zip(&loaded) {
            for _ in 0..20 {
                let p = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(4.0..6.0),
                );
                let pa = a.project(&p).unwrap();
                let pb = b.project(&p).unwrap();
                assert!((pa.0 - pb.0).abs() < 1e-12);
                assert!((pa.1 - pb.1).abs() < 1e-12);
                assert!((pa.2 - pb.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cameras_identity_pose_origin() {
        let path = tmp("identity_cam.json");
        fs::write(
            &path,
            r#"[{"width": 8, "height": 8, "fx": 10.0, "fy": 10.0, "cx": 4.0, "cy": 4.0,
                "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,0]}]"#,
        )
        .unwrap();
        let cams = load_cameras(&path).unwrap();
        assert_eq!(cams.len(), 1);
        assert!((cams[0].position()).norm() < 1e-15);
        let ray = cams[0].ray_at(4.0, 4.0);
        assert!((ray.direction() - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn cameras_bad_focal_schema_error() {
        let path = tmp("bad_cam.json");
        fs::write(
            &path,
            r#"[{"width": 8, "height": 8, "fx": -1.0, "fy": 10.0, "cx": 4.0, "cy": 4.0,
                "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,0]}]"#,
        )
        .unwrap();
        match load_cameras(&path) {
            Err(IoError::Schema { path, .. }) => assert!(path.contains("[0]")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_two_pixel_exact_bytes() {
        let mut depth = ImageF::zeros(2, 1);
        depth.set(0, 0, 1.5);
        depth.set(1, 0, 7.0);
        let mut mask = Mask::filled(2, 1, true);
        mask.set(1, 0, false);
        let path = tmp("two.pfm");
        write_depth_pfm(&depth, &mask, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = b"Pf\n2 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&[0x00, 0x00, 0xC0, 0x3F]); // 1.5f32 LE
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x7F]); // +inf f32 LE
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pfm_round_trip_bitwise() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut depth = ImageF::zeros(9, 7);
        let mut mask = Mask::filled(9, 7, true);
        for y in 0..7 {
            for x in 0..9 {
                depth.set(x, y, rng.gen_range(0.1..100.0f64));
                if rng.gen_bool(0.2) {
                    mask.set(x, y, false);
                }
            }
        }
        let path = tmp("roundtrip.pfm");
        write_depth_pfm(&depth, &mask, &path).unwrap();
        let (loaded, loaded_mask) = read_depth_pfm(&path).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(mask.at(x, y), loaded_mask.at(x, y));
                if mask.at(x, y) {
                    // Bitwise equality at f32 precision.
                    assert_eq!(depth.at(x, y) as f32, loaded.at(x, y) as f32);
                    assert_eq!(loaded.at(x, y), (depth.at(x, y) as f32) as f64);
                }
            }
        }
    }

    #[test]
    fn pfm_all_masked_is_all_infinity() {
        let depth = ImageF::zeros(3, 2);
        let mask = Mask::filled(3, 2, false);
        let path = tmp("masked.pfm");
        write_depth_pfm(&depth, &mask, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 6 * 4..];
        for chunk in payload.chunks(4) {
            assert_eq!(chunk, &[0x00, 0x00, 0x80, 0x7F]);
        }
    }

    #[test]
    fn rgb_pfm_round_trip() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut image = crate::img::ImageRgb::zeros(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                image.set(
                    x,
                    y,
                    Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                );
            }
        }
        let path = tmp("rgb.pfm");
        write_rgb_pfm(&image, &path).unwrap();
        let loaded = read_rgb_pfm(&path).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let a = image.at(x, y).map(|v| v as f32 as f64);
                assert_eq!(a, loaded.at(x, y));
            }
        }
    }

    #[test]
    fn png16_writes_without_error() {
        let mut depth = ImageF::zeros(8, 8);
        let mut mask = Mask::filled(8, 8, true);
        for y in 0..8 {
            for x in 0..8 {
                depth.set(x, y, 1.0 + x as f64 + y as f64);
            }
        }
        mask.set(0, 0, false);
        let path = tmp("viz.png");
        write_depth_png16(&depth, &mask, &path).unwrap();
        assert!(path.exists());
        let img = image::open(&path).unwrap().to_luma16();
        assert_eq!(img.get_pixel(0, 0).0[0], 0); // masked pixel black
        assert_eq!(img.get_pixel(7, 7).0[0], u16::MAX); // max depth
    }

    #[test]
    fn point_cloud_round_trips_both_formats() {
        let mut rng = StdRng::seed_from_u64(5);
        let points: Vec<Vector3<f64>> = (0..50)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        for (binary, name) in [(true, "cloud_bin.ply"), (false, "cloud_ascii.ply")] {
            let path = tmp(name);
            write_point_cloud_ply(&path, &points, binary).unwrap();
            let loaded = read_point_cloud_ply(&path).unwrap();
            assert_eq!(loaded.len(), points.len());
            for (a, b) in points.iter().zip(&loaded) {
                assert!((a.map(|v| v as f32 as f64) - b).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let scene = random_ball_scene(Vector3::new(0.0, 0.0, 5.0), 1.0, 8, 0.3, 44);
        let meta = CheckpointMeta {
            iteration: 123,
            config_hash: "deadbeef".into(),
            loss_history: vec![1.0, 0.5, 0.25],
        };
        let base = tmp("checkpoint");
        save_checkpoint(&base, &scene, &meta).unwrap();
        let (loaded_scene, loaded_meta) = load_checkpoint(&base).unwrap();
        assert_eq!(loaded_scene.len(), scene.len());
        assert_eq!(loaded_meta, meta);
    }
}
