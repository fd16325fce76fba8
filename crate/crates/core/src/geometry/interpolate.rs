use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{distance, Point};
use crate::nn::{Graph, Scalar, SparseRows, Tensor};

/// Inverse-distance product weights: each weight is the product of the
/// other distances, normalized. With two or more zero distances the first
/// zero takes everything.
pub fn product_weights(d: &[f64]) -> Vec<f64> {
    let zeros: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 0.0).collect();
    if zeros.len() >= 2 {
        return (0..d.len()).map(|i| if i == zeros[0] { 1.0 } else { 0.0 }).collect();
    }
    let raw: Vec<f64> = (0..d.len())
        .map(|i| (0..d.len()).filter(|&j| j != i).map(|j| d[j]).product())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Weights of the (up to) three nearest sources for each target. Equal
/// distances resolve to the lower source index.
pub fn three_nn_rows(source: &[Point], target: &[Point]) -> Result<SparseRows> {
    if source.is_empty() {
        return Err(Error::invalid("interpolation needs at least one source point"));
    }
    let k = source.len().min(3);
    let mut rows = SparseRows::new(source.len());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(4);
    for t in target {
        best.clear();
        for (i, s) in source.iter().enumerate() {
            let d = distance(s, t);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(k);
        }
        let d: Vec<f64> = best.iter().map(|b| b.0).collect();
        let w = product_weights(&d);
        rows.push_row(best.iter().zip(w).map(|(&(_, i), w)| (i, w)));
    }
    Ok(rows)
}

/// Upsample source features onto target positions.
pub fn interpolate_3nn<S: Scalar>(source: &[Point], feats: &Tensor<S>, target: &[Point]) -> Result<Tensor<S>> {
    if feats.rows() != source.len() {
        return Err(Error::shape("interpolate_3nn", format!("{} feature rows", source.len()), feats.rows()));
    }
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let y = g.sparse_combine(x, Arc::new(three_nn_rows(source, target)?))?;
    Ok(g.value(y).clone())
}
