//! Colored PLY export of part predictions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::ply::{write_ply, PlyFormat};
use crate::training::Prediction;

/// Part colors as 8-bit RGB. Part `p` gets `PALETTE[p % PALETTE.len()]`.
/// Entries are only ever appended.
pub const PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [0, 0, 0],
    [100, 149, 237],
    [255, 99, 71],
];

pub fn part_color(part: usize) -> [u8; 3] {
    PALETTE[part % PALETTE.len()]
}

/// The cloud with predicted labels and palette colors attached; normals are
/// kept, any existing colors and labels are replaced.
pub fn colored_prediction(cloud: &PointCloud, prediction: &Prediction) -> Result<PointCloud> {
    let Prediction::Parts { labels } = prediction else {
        return Err(Error::invalid("export needs a segmentation prediction"));
    };
    if labels.len() != cloud.len() {
        return Err(Error::shape("export_prediction", cloud.len(), labels.len()));
    }
    let colors = labels
        .iter()
        .map(|&l| part_color(l).map(|c| c as f64 / 255.0))
        .collect();
    let mut out = PointCloud {
        coords: cloud.coords.clone(),
        normals: cloud.normals.clone(),
        colors: None,
        labels: None,
    };
    out = out.with_colors(colors)?.with_labels(labels.clone())?;
    Ok(out)
}

pub fn export_prediction(cloud: &PointCloud, prediction: &Prediction, path: &Path) -> Result<()> {
    write_ply(path, &colored_prediction(cloud, prediction)?, PlyFormat::BinaryLittleEndian)
}
