//! File formats: point clouds, run configs, checkpoints and dataset manifests.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod ply;
pub mod xyzn;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{write_atomic, Checkpoint, Entry, TensorKind};
pub use config::{DataSource, RunConfig};
pub use export::{colored_prediction, export_prediction, part_color, PALETTE};
pub use ply::{encode_ply, parse_ply, read_ply, write_ply, PlyFormat};
pub use xyzn::{encode_xyzn, parse_xyzn, read_xyzn};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::training::{Dataset, Sample, Shape, Task};

/// Dispatch on extension: `.ply` or `.xyzn` (also `.xyz`, `.txt`).
pub fn load_pointcloud(path: &Path) -> Result<PointCloud> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "ply" => read_ply(path),
        "xyzn" | "xyz" | "txt" => read_xyzn(path),
        other => Err(Error::format(path, format!("unknown point cloud extension {other:?}"))),
    }
}

/// One `path category` pair per line; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub category: usize,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, cat) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| Error::format(path, format!("line {}: expected `path category`", lineno + 1)))?;
        let category = cat
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad category {cat:?}", lineno + 1)))?;
        entries.push(ManifestEntry {
            path: base.join(file.trim()),
            category,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        text.push_str(&format!("{} {}\n", rel.display(), e.category));
    }
    write_atomic(path, text.as_bytes())
}

/// Load every cloud a manifest lists. Category names are taken from `shapes`
/// when given, so file datasets can share the synthetic label layout.
pub fn load_manifest_dataset(path: &Path, task: Task, shapes: Vec<Shape>) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::format(path, "manifest lists no clouds"));
    }
    let samples = entries
        .iter()
        .map(|e| {
            Ok(Sample {
                cloud: load_pointcloud(&e.path)?,
                category: e.category,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { task, shapes, samples })
}
