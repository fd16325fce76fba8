use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::kernels::voxel_index;
use crate::nn::{Graph, Scalar, Segments, SparseRows, Tensor};

/// Point-to-voxel assignment for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub resolution: usize,
    /// Continuous voxel-space coordinates in `[0, R-1]`.
    pub norm_coords: Vec<Point>,
    /// Flat voxel index of every point.
    pub voxel_of: Vec<usize>,
    pub counts: Vec<usize>,
}

impl VoxelMap {
    /// Map the bounding box into `[0, R-1]³`, scaled by its longest side and
    /// centred. A cloud with no extent at all lands in voxel 0.
    pub fn new(coords: &[Point], resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid(format!("voxel resolution must be at least 2, got {resolution}")));
        }
        if coords.is_empty() {
            return Err(Error::invalid("cannot voxelize an empty cloud"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let top = (resolution - 1) as f64;
        let norm_coords: Vec<Point> = if extent > 0.0 {
            let scale = top / extent;
            let centre: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
            coords
                .iter()
                .map(|p| {
                    let mut v = [0.0; 3];
                    for a in 0..3 {
                        v[a] = ((p[a] - centre[a]) * scale + 0.5 * top).clamp(0.0, top);
                    }
                    v
                })
                .collect()
        } else {
            vec![[0.0; 3]; coords.len()]
        };
        let mut counts = vec![0; resolution.pow(3)];
        let voxel_of: Vec<usize> = norm_coords
            .iter()
            .map(|v| {
                let i = v.map(|x| (x.floor() as usize).min(resolution - 1));
                let idx = voxel_index(resolution, i[0], i[1], i[2]);
                counts[idx] += 1;
                idx
            })
            .collect();
        Ok(Self {
            resolution,
            norm_coords,
            voxel_of,
            counts,
        })
    }

    pub fn voxels(&self) -> usize {
        self.counts.len()
    }

    /// Points of each voxel, offset by `point_shift`.
    pub fn member_lists(&self, point_shift: usize) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.voxels()];
        for (p, &v) in self.voxel_of.iter().enumerate() {
            lists[v].push(p + point_shift);
        }
        lists
    }

    pub fn segments(&self) -> Segments {
        Segments::from_lists(self.voxel_of.len(), &self.member_lists(0))
    }
}

/// Corner voxels and weights of the trilinear blend at voxel-space
/// position `v`. Corners are ordered by (x, y, z) offset bits.
pub fn trilinear_weights(v: &Point, resolution: usize) -> [(usize, f64); 8] {
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let i0 = (v[a].floor().max(0.0) as usize).min(resolution - 2);
        base[a] = i0;
        t[a] = v[a] - i0 as f64;
    }
    let mut out = [(0, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let bit = |a: usize| (c >> (2 - a)) & 1;
        let mut w = 1.0;
        for a in 0..3 {
            w *= if bit(a) == 1 { t[a] } else { 1.0 - t[a] };
        }
        *slot = (voxel_index(resolution, base[0] + bit(0), base[1] + bit(1), base[2] + bit(2)), w);
    }
    out
}

/// Trilinear devoxelization weights for every point, as sparse rows over
/// the `R³` voxels.
pub fn devoxelize_rows(map: &VoxelMap) -> SparseRows {
    let mut rows = SparseRows::new(map.voxels());
    for v in &map.norm_coords {
        rows.push_row(trilinear_weights(v, map.resolution));
    }
    rows
}

/// Dense grid of voxel features for one cloud.
#[derive(Clone, Debug)]
pub struct VoxelGrid<S> {
    pub map: VoxelMap,
    /// `R³ × C`.
    pub features: Tensor<S>,
}

impl<S: Scalar> VoxelGrid<S> {
    pub fn resolution(&self) -> usize {
        self.map.resolution
    }
}

/// Average point features into their voxels.
pub fn voxelize<S: Scalar>(coords: &[Point], features: &Tensor<S>, resolution: usize) -> Result<VoxelGrid<S>> {
    if features.rows() != coords.len() {
        return Err(Error::shape("voxelize", format!("{} feature rows", coords.len()), features.rows()));
    }
    let map = VoxelMap::new(coords, resolution)?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = g.scatter_mean(x, Arc::new(map.segments()))?;
    let features = g.value(y).clone();
    Ok(VoxelGrid { map, features })
}

/// Per-point trilinear blend of the grid.
pub fn devoxelize_trilinear<S: Scalar>(grid: &VoxelGrid<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.constant(grid.features.clone());
    let y = g.sparse_combine(x, Arc::new(devoxelize_rows(&grid.map)))?;
    Ok(g.value(y).clone())
}
