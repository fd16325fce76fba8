//! Whitespace-separated text clouds: `x y z [nx ny nz] [label]` per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub fn read_xyzn(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyzn(&text, path)
}

/// Lines that are blank or start with `#` are skipped. Every data line must
/// have the same number of columns: 3, 4 (label), 6 (normals) or 7.
pub fn parse_xyzn(text: &str, path: &Path) -> Result<PointCloud> {
    let bad = |msg: String| Error::format(path, msg);
    let mut width = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("line {}: unparsable number", lineno + 1)))?;
        match width {
            None => {
                if ![3, 4, 6, 7].contains(&vals.len()) {
                    return Err(bad(format!("line {}: {} columns, expected 3, 4, 6 or 7", lineno + 1, vals.len())));
                }
                width = Some(vals.len());
            }
            Some(w) if w != vals.len() => {
                return Err(bad(format!("line {}: {} columns, earlier lines have {w}", lineno + 1, vals.len())));
            }
            Some(_) => {}
        }
        if vals[..3].iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("line {}: non-finite coordinate", lineno + 1)));
        }
        rows.push(vals);
    }
    let width = width.ok_or_else(|| bad("no points".into()))?;
    let coords: Vec<Point> = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
    let mut cloud = PointCloud::new(coords)?;
    if width >= 6 {
        let normals = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let len = (r[3] * r[3] + r[4] * r[4] + r[5] * r[5]).sqrt();
                if !(len > 0.0 && len.is_finite()) {
                    return Err(bad(format!("point {i}: normal cannot be normalized")));
                }
                Ok([r[3] / len, r[4] / len, r[5] / len])
            })
            .collect::<Result<Vec<_>>>()?;
        cloud = cloud.with_normals(normals)?;
    }
    if width == 4 || width == 7 {
        let labels = rows
            .iter()
            .map(|r| {
                let l = r[width - 1];
                if l < 0.0 || l.fract() != 0.0 || !l.is_finite() {
                    Err(bad(format!("invalid label {l}")))
                } else {
                    Ok(l as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cloud = cloud.with_labels(labels)?;
    }
    Ok(cloud)
}

pub fn encode_xyzn(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let mut words: Vec<String> = cloud.coords[i].iter().map(|v| format!("{v:?}")).collect();
        if let Some(n) = &cloud.normals {
            words.extend(n[i].iter().map(|v| format!("{v:?}")));
        }
        if let Some(l) = &cloud.labels {
            words.push(l[i].to_string());
        }
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}
