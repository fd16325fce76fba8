//! PLY subset: `ascii 1.0` and `binary_little_endian 1.0` with a leading
//! `vertex` element carrying scalar properties.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::io::checkpoint::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    format: PlyFormat,
    vertices: usize,
    props: Vec<(String, ScalarType)>,
    body_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |msg: String| Error::format(path, msg);
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(bad("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut vertices = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(bad(format!("unsupported format {other:?}"))),
                });
            }
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| bad(format!("bad element count in {line:?}")))?;
                if *name == "vertex" {
                    if vertices.is_some() {
                        return Err(bad("duplicate vertex element".into()));
                    }
                    vertices = Some(count);
                    in_vertex = true;
                } else {
                    if vertices.is_none() {
                        return Err(bad(format!("element {name:?} precedes the vertex element")));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty:?}")))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] if !in_vertex => {}
            _ => return Err(bad(format!("malformed header line {line:?}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| bad("missing format line".into()))?,
        vertices: vertices.ok_or_else(|| bad("missing vertex element".into()))?,
        props,
        body_start: end + marker.len(),
    })
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

/// Parse PLY bytes; `path` only labels errors.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let bad = |msg: String| Error::format(path, msg);
    let h = parse_header(bytes, path)?;
    let col = |name: &str| h.props.iter().position(|(n, _)| n == name);
    let xyz = [col("x"), col("y"), col("z")];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(bad("vertex element needs x, y and z".into()));
    };
    for &i in &[ix, iy, iz] {
        if !h.props[i].1.is_float() {
            return Err(bad(format!("coordinate {} must be a float property", h.props[i].0)));
        }
    }
    let normal_cols = [col("nx"), col("ny"), col("nz")];
    let normal_cols = match normal_cols {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => return Err(bad("normals need all of nx, ny and nz".into())),
    };
    let color_cols = match [col("red"), col("green"), col("blue")] {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => return Err(bad("colors need all of red, green and blue".into())),
    };
    let label_col = col("label");
    if let Some(l) = label_col {
        if h.props[l].1.is_float() {
            return Err(bad("label must be an integer property".into()));
        }
    }

    let n = h.vertices;
    let width = h.props.len();
    let mut rows = Vec::with_capacity(n);
    let body = &bytes[h.body_start..];
    match h.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("ascii body is not UTF-8".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for v in 0..n {
                let line = lines.next().ok_or_else(|| bad(format!("expected {n} vertices, found {v}")))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("vertex {v}: unparsable value")))?;
                if vals.len() != width {
                    return Err(bad(format!("vertex {v}: expected {width} values, found {}", vals.len())));
                }
                rows.push(vals);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = h.props.iter().map(|(_, t)| t.size()).sum();
            if body.len() < n * stride {
                return Err(bad(format!("binary body holds {} bytes, need {}", body.len(), n * stride)));
            }
            for v in 0..n {
                let mut off = v * stride;
                let mut vals = Vec::with_capacity(width);
                for (_, t) in &h.props {
                    vals.push(t.decode(&body[off..off + t.size()]));
                    off += t.size();
                }
                rows.push(vals);
            }
        }
    }

    let coords: Vec<Point> = rows.iter().map(|r| [r[ix], r[iy], r[iz]]).collect();
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite coordinate".into()));
    }
    let mut cloud = PointCloud::new(coords)?;
    if let Some([a, b, c]) = normal_cols {
        let normals = rows
            .iter()
            .enumerate()
            .map(|(v, r)| {
                let nrm = [r[a], r[b], r[c]];
                let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                if !(len > 0.0 && len.is_finite()) {
                    return Err(bad(format!("vertex {v}: normal cannot be normalized")));
                }
                Ok(nrm.map(|x| x / len))
            })
            .collect::<Result<Vec<_>>>()?;
        cloud = cloud.with_normals(normals)?;
    }
    if let Some([a, b, c]) = color_cols {
        let scale = |t: ScalarType| if t.is_float() { 1.0 } else { 255.0 };
        let (sa, sb, sc) = (scale(h.props[a].1), scale(h.props[b].1), scale(h.props[c].1));
        let colors = rows.iter().map(|r| [r[a] / sa, r[b] / sb, r[c] / sc]).collect();
        cloud = cloud.with_colors(colors)?;
    }
    if let Some(l) = label_col {
        let labels = rows
            .iter()
            .map(|r| {
                if r[l] < 0.0 || r[l].fract() != 0.0 {
                    Err(bad(format!("invalid label {}", r[l])))
                } else {
                    Ok(r[l] as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cloud = cloud.with_labels(labels)?;
    }
    Ok(cloud)
}

/// Coordinates and normals are written as `double`, so binary files
/// reproduce them bit for bit; colors become `uchar`, labels `int`.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in ["x", "y", "z"] {
        header.push_str(&format!("property double {p}\n"));
    }
    if cloud.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            header.push_str(&format!("property double {p}\n"));
        }
    }
    if cloud.colors.is_some() {
        for p in ["red", "green", "blue"] {
            header.push_str(&format!("property uchar {p}\n"));
        }
    }
    if let Some(labels) = &cloud.labels {
        if labels.iter().any(|&l| l > i32::MAX as usize) {
            return Err(Error::invalid("label does not fit a 32-bit integer"));
        }
        header.push_str("property int label\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    let to_byte = |c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    for i in 0..cloud.len() {
        let mut floats: Vec<f64> = cloud.coords[i].to_vec();
        if let Some(n) = &cloud.normals {
            floats.extend_from_slice(&n[i]);
        }
        let color = cloud.colors.as_ref().map(|c| c[i].map(to_byte));
        let label = cloud.labels.as_ref().map(|l| l[i] as i32);
        match format {
            PlyFormat::Ascii => {
                let mut words: Vec<String> = floats.iter().map(|v| format!("{v:?}")).collect();
                if let Some(c) = color {
                    words.extend(c.iter().map(ToString::to_string));
                }
                if let Some(l) = label {
                    words.push(l.to_string());
                }
                out.extend_from_slice(words.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in floats {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = color {
                    out.extend_from_slice(&c);
                }
                if let Some(l) = label {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_atomic(path, &encode_ply(cloud, format)?)
}
