use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{distance, Point};

/// Greedy farthest point sampling starting at `seed`. Ties go to the lowest
/// index.
pub fn farthest_point_sample(coords: &[Point], m: usize, seed: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m < 1 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} of {n} points")));
    }
    if seed >= n {
        return Err(Error::invalid(format!("seed index {seed} out of range for {n} points")));
    }
    let mut picked = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = seed;
    for _ in 0..m {
        picked.push(current);
        let c = coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            let d = distance(p, &c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d && !picked_contains(&picked, i, min_dist[i]) {
                best_d = min_dist[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(picked)
}

// A picked point has distance zero to the picked set, so it can only win
// when every remaining point duplicates a picked one.
fn picked_contains(picked: &[usize], i: usize, d: f64) -> bool {
    d == 0.0 && picked.contains(&i)
}

fn lex(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Index of the point nearest the centroid. The centroid is summed in
/// sorted order and ties compare coordinates, so the chosen point does not
/// depend on the order of the input.
pub fn centroid_seed(coords: &[Point]) -> usize {
    let n = coords.len() as f64;
    let mut centroid = [0.0; 3];
    for (axis, c) in centroid.iter_mut().enumerate() {
        let mut vals: Vec<f64> = coords.iter().map(|p| p[axis]).collect();
        vals.sort_by(f64::total_cmp);
        *c = vals.iter().sum::<f64>() / n;
    }
    let mut best = 0;
    for i in 1..coords.len() {
        let (di, db) = (distance(&coords[i], &centroid), distance(&coords[best], &centroid));
        if di.total_cmp(&db).then_with(|| lex(&coords[i], &coords[best])) == Ordering::Less {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NeighborOrder {
    /// In-radius points by ascending index.
    #[default]
    Index,
    /// In-radius points by distance, then coordinates. Independent of how
    /// the cloud is ordered.
    Distance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupingResult {
    pub keypoint_indices: Vec<usize>,
    /// `M × K`, row-major.
    pub neighbor_indices: Vec<usize>,
    pub k: usize,
    pub radius: f64,
    pub pad_counts: Vec<usize>,
}

impl GroupingResult {
    pub fn neighbors(&self, m: usize) -> &[usize] {
        &self.neighbor_indices[m * self.k..(m + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.keypoint_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoint_indices.is_empty()
    }
}

pub fn ball_query(coords: &[Point], keypoints: &[usize], r: f64, k: usize) -> Result<GroupingResult> {
    ball_query_ordered(coords, keypoints, r, k, NeighborOrder::Index)
}

/// Up to `k` points within distance `r` of each keypoint, keypoint first.
/// Short rows are padded with the keypoint index.
pub fn ball_query_ordered(
    coords: &[Point],
    keypoints: &[usize],
    r: f64,
    k: usize,
    order: NeighborOrder,
) -> Result<GroupingResult> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("ball radius must be positive, got {r}")));
    }
    if k < 1 {
        return Err(Error::invalid("ball query needs K >= 1"));
    }
    if let Some(&bad) = keypoints.iter().find(|&&i| i >= coords.len()) {
        return Err(Error::invalid(format!("keypoint {bad} out of range")));
    }
    let mut neighbor_indices = Vec::with_capacity(keypoints.len() * k);
    let mut pad_counts = Vec::with_capacity(keypoints.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &kp in keypoints {
        let c = coords[kp];
        cand.clear();
        for (i, p) in coords.iter().enumerate() {
            if i == kp {
                continue;
            }
            let d = distance(p, &c);
            if d <= r {
                cand.push((d, i));
            }
        }
        if order == NeighborOrder::Distance {
            cand.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| lex(&coords[a.1], &coords[b.1]))
                    .then(a.1.cmp(&b.1))
            });
        }
        neighbor_indices.push(kp);
        let take = cand.len().min(k - 1);
        neighbor_indices.extend(cand[..take].iter().map(|&(_, i)| i));
        let pad = k - 1 - take;
        neighbor_indices.extend(std::iter::repeat_n(kp, pad));
        pad_counts.push(pad);
    }
    Ok(GroupingResult {
        keypoint_indices: keypoints.to_vec(),
        neighbor_indices,
        k,
        radius: r,
        pad_counts,
    })
}
