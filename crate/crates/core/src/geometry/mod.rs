//! Point-set structuring: sampling, grouping, voxel grids and interpolation.

mod interpolate;
mod sampling;
mod voxel;

pub use interpolate::{interpolate_3nn, product_weights, three_nn_rows};
pub use sampling::{ball_query, ball_query_ordered, centroid_seed, farthest_point_sample, GroupingResult, NeighborOrder};
pub use voxel::{devoxelize_rows, devoxelize_trilinear, trilinear_weights, voxelize, VoxelGrid, VoxelMap};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub fn distance(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    pub normals: Option<Vec<Point>>,
    pub colors: Option<Vec<Point>>,
    pub labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        let cloud = Self {
            coords,
            normals: None,
            colors: None,
            labels: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_normals(mut self, normals: Vec<Point>) -> Result<Self> {
        self.normals = Some(normals);
        self.validate()?;
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Vec<Point>) -> Result<Self> {
        self.colors = Some(colors);
        self.validate()?;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::invalid("point cloud has no points"));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let check_len = |what: &str, len: usize| {
            if len != n {
                Err(Error::invalid(format!("{what} has {len} rows, cloud has {n} points")))
            } else {
                Ok(())
            }
        };
        if let Some(normals) = &self.normals {
            check_len("normals", normals.len())?;
            for (i, nrm) in normals.iter().enumerate() {
                let len = distance(nrm, &[0.0; 3]);
                if (len - 1.0).abs() > 1e-4 {
                    return Err(Error::invalid(format!("normal {i} has length {len}")));
                }
            }
        }
        if let Some(colors) = &self.colors {
            check_len("colors", colors.len())?;
            if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid("color component outside [0, 1]"));
            }
        }
        if let Some(labels) = &self.labels {
            check_len("labels", labels.len())?;
        }
        Ok(())
    }

    /// Reorder every per-point array: point `i` of the result is point
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &Vec<Point>| perm.iter().map(|&p| v[p]).collect();
        Self {
            coords: pick(&self.coords),
            normals: self.normals.as_ref().map(pick),
            colors: self.colors.as_ref().map(pick),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&p| l[p]).collect()),
        }
    }
}
