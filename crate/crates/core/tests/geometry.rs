use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtp_core::geometry::*;
use vtp_core::nn::Tensor;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Recomputes every candidate's distance to the whole selected set at each
/// step.
fn brute_force_fps(coords: &[Point], m: usize, seed: usize) -> Vec<usize> {
    let mut picked = vec![seed];
    while picked.len() < m {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..coords.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked
                .iter()
                .map(|&s| distance(&coords[i], &coords[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        picked.push(best.unwrap());
    }
    picked
}

#[test]
fn fps_matches_brute_force_on_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let coords = random_cloud(&mut rng, n);
        let m = rng.random_range(1..=n);
        let seed = rng.random_range(0..n);
        assert_eq!(farthest_point_sample(&coords, m, seed).unwrap(), brute_force_fps(&coords, m, seed));
    }
}

#[test]
fn fps_examples() {
    let line: Vec<Point> = [0.0, 1.0, 2.0, 9.0, 10.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
    assert_eq!(farthest_point_sample(&line, 3, 0).unwrap(), vec![0, 4, 2]);
    assert_eq!(farthest_point_sample(&line, 1, 3).unwrap(), vec![3]);
    let mut all = farthest_point_sample(&line, 5, 1).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2, 3, 4]);
    assert!(farthest_point_sample(&line, 6, 0).is_err());
    assert!(farthest_point_sample(&line, 0, 0).is_err());
}

#[test]
fn fps_with_duplicate_points_still_returns_distinct_indices() {
    let pts = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]];
    let mut picked = farthest_point_sample(&pts, 3, 0).unwrap();
    picked.sort();
    assert_eq!(picked, vec![0, 1, 2]);
}

#[test]
fn ball_query_examples() {
    let square = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
    let g = ball_query(&square, &[0], 1.05, 3).unwrap();
    assert_eq!(g.neighbors(0), &[0, 1, 2]);
    assert_eq!(g.pad_counts, vec![0]);

    let g = ball_query(&square, &[0, 3], 0.5, 4).unwrap();
    assert_eq!(g.neighbors(0), &[0, 0, 0, 0]);
    assert_eq!(g.neighbors(1), &[3, 3, 3, 3]);
    assert_eq!(g.pad_counts, vec![3, 3]);

    let g = ball_query(&square, &[2], 10.0, 4).unwrap();
    let mut row = g.neighbors(0).to_vec();
    assert_eq!(row[0], 2);
    row.sort();
    assert_eq!(row, vec![0, 1, 2, 3]);
    assert_eq!(g.pad_counts, vec![0]);

    assert!(ball_query(&square, &[0], 0.0, 3).is_err());
    assert!(ball_query(&square, &[0], 1.0, 0).is_err());
}

#[test]
fn distance_ordered_ball_query_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords = random_cloud(&mut rng, 50);
    let kp = farthest_point_sample(&coords, 8, centroid_seed(&coords)).unwrap();
    let g = ball_query_ordered(&coords, &kp, 0.7, 6, NeighborOrder::Distance).unwrap();

    let mut perm: Vec<usize> = (0..50).collect();
    perm.reverse();
    perm.swap(3, 17);
    let shuffled: Vec<Point> = perm.iter().map(|&p| coords[p]).collect();
    let kp2 = farthest_point_sample(&shuffled, 8, centroid_seed(&shuffled)).unwrap();
    let g2 = ball_query_ordered(&shuffled, &kp2, 0.7, 6, NeighborOrder::Distance).unwrap();
    let back: Vec<usize> = g2.neighbor_indices.iter().map(|&i| perm[i]).collect();
    assert_eq!(back, g.neighbor_indices);
}

proptest! {
    #[test]
    fn ball_query_rows_are_valid(seed in 0u64..1000, n in 1usize..40, r in 0.05f64..2.0, k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_cloud(&mut rng, n);
        let kp: Vec<usize> = (0..n).step_by(3).collect();
        for order in [NeighborOrder::Index, NeighborOrder::Distance] {
            let g = ball_query_ordered(&coords, &kp, r, k, order).unwrap();
            for (m, &c) in kp.iter().enumerate() {
                let row = g.neighbors(m);
                prop_assert_eq!(row[0], c);
                prop_assert!(g.pad_counts[m] <= k - 1);
                for &j in row {
                    prop_assert!(distance(&coords[j], &coords[c]) <= r + 1e-9);
                }
                let inside = (0..n).filter(|&j| j != c && distance(&coords[j], &coords[c]) <= r).count();
                prop_assert_eq!(g.pad_counts[m], (k - 1).saturating_sub(inside));
                if order == NeighborOrder::Index {
                    let real = &row[1..k - g.pad_counts[m]];
                    prop_assert!(real.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn fps_spread_property(seed in 0u64..1000, n in 2usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_cloud(&mut rng, n);
        let m = rng.random_range(2..=n);
        let picked = farthest_point_sample(&coords, m, 0).unwrap();
        let mut min_pair = f64::INFINITY;
        for (a, &i) in picked.iter().enumerate() {
            for &j in &picked[a + 1..] {
                min_pair = min_pair.min(distance(&coords[i], &coords[j]));
            }
        }
        for u in (0..n).filter(|u| !picked.contains(u)) {
            let d = picked.iter().map(|&s| distance(&coords[u], &coords[s])).fold(f64::INFINITY, f64::min);
            prop_assert!(min_pair >= d);
        }
    }

    #[test]
    fn three_nn_weights_are_a_convex_combination(seed in 0u64..1000, m in 1usize..20, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_cloud(&mut rng, m);
        let tgt = random_cloud(&mut rng, n);
        let rows = three_nn_rows(&src, &tgt).unwrap();
        let feats = Tensor::<f64>::new(vec![m, 2], (0..2 * m).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let out = interpolate_3nn(&src, &feats, &tgt).unwrap();
        for i in 0..n {
            let entries: Vec<_> = rows.row(i).collect();
            prop_assert_eq!(entries.len(), m.min(3));
            let total: f64 = entries.iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(entries.iter().all(|e| e.1 >= 0.0));
            // the chosen sources are the nearest ones
            let worst = entries.iter().map(|e| distance(&src[e.0], &tgt[i])).fold(0.0, f64::max);
            let closer = (0..m).filter(|&j| distance(&src[j], &tgt[i]) < worst).count();
            prop_assert!(closer < entries.len());
            for c in 0..2 {
                let vals: Vec<f64> = entries.iter().map(|e| feats.at(e.0, c)).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.at(i, c) >= lo - 1e-12 && out.at(i, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn voxelize_conserves_mass_and_round_trips_constants(seed in 0u64..1000, n in 1usize..80, res in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_cloud(&mut rng, n);
        let feats = Tensor::<f64>::new(vec![n, 3], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let grid = voxelize(&coords, &feats, res).unwrap();
        for c in 0..3 {
            let point_sum: f64 = (0..n).map(|i| feats.at(i, c)).sum();
            let voxel_sum: f64 = (0..grid.map.voxels()).map(|v| grid.features.at(v, c) * grid.map.counts[v] as f64).sum();
            prop_assert!((point_sum - voxel_sum).abs() <= 1e-5);
        }
        for v in 0..grid.map.voxels() {
            if grid.map.counts[v] == 0 {
                prop_assert!(grid.features.row(v).iter().all(|&x| x == 0.0));
            }
        }
        for p in &grid.map.norm_coords {
            prop_assert!(p.iter().all(|&x| (0.0..=(res - 1) as f64).contains(&x)));
        }
        for p in &grid.map.norm_coords {
            let total: f64 = trilinear_weights(p, res).iter().map(|w| w.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-7);
        }

        // A field that is constant over occupied voxels and their
        // neighbours comes back unchanged.
        let constant = Tensor::<f64>::full(&[n, 2], 0.75);
        let mut grid = voxelize(&coords, &constant, res).unwrap();
        grid.features = Tensor::full(&[res * res * res, 2], 0.75);
        let back = devoxelize_trilinear(&grid).unwrap();
        prop_assert!(back.max_abs_diff(&constant) <= 1e-6);
    }
}

#[test]
fn voxelize_examples() {
    let one = vec![[0.3, -0.2, 5.0]];
    let f = Tensor::<f64>::from_rows(&[vec![2.0, -1.0]]);
    let grid = voxelize(&one, &f, 4).unwrap();
    let occupied: Vec<usize> = (0..64).filter(|&v| grid.features.row(v).iter().any(|&x| x != 0.0)).collect();
    assert_eq!(occupied, vec![0]);
    assert_eq!(grid.features.row(0), &[2.0, -1.0]);

    let two = vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
    let f = Tensor::<f64>::from_rows(&[vec![1.0], vec![3.0], vec![7.0]]);
    let grid = voxelize(&two, &f, 4).unwrap();
    let v = grid.map.voxel_of[0];
    assert_eq!(grid.map.voxel_of[1], v);
    assert_eq!(grid.features.at(v, 0), 2.0);
    assert_eq!(grid.map.counts[v], 2);

    assert!(voxelize(&two, &f, 1).is_err());
}

#[test]
fn planar_cloud_sits_in_the_middle_slab() {
    let pts = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
    let map = VoxelMap::new(&pts, 5).unwrap();
    assert!(map.norm_coords.iter().all(|p| p[2] == 2.0));
    assert_eq!(map.norm_coords[1][0], 4.0);
}

#[test]
fn devoxelize_at_integer_positions_reads_the_voxel() {
    let pts = vec![[0.0, 0.0, 0.0], [3.0, 3.0, 3.0], [1.0, 2.0, 3.0], [3.0, 0.0, 1.0]];
    let map = VoxelMap::new(&pts, 4).unwrap();
    let feats = Tensor::<f64>::new(vec![64, 1], (0..64).map(|v| v as f64 * 0.5).collect()).unwrap();
    let grid = VoxelGrid { map: map.clone(), features: feats.clone() };
    let out = devoxelize_trilinear(&grid).unwrap();
    for (i, &v) in map.voxel_of.iter().enumerate() {
        assert_eq!(out.at(i, 0), feats.at(v, 0));
    }
}

#[test]
fn interpolation_examples() {
    let w = product_weights(&[1.0, 2.0, 3.0]);
    let expected = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
    for (a, b) in w.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(product_weights(&[0.0, 1.0, 2.0]), vec![1.0, 0.0, 0.0]);
    assert_eq!(product_weights(&[0.0, 0.0, 2.0]), vec![1.0, 0.0, 0.0]);

    let src = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [5.0, 5.0, 5.0]];
    let feats = Tensor::<f64>::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
    let out = interpolate_3nn(&src, &feats, &[[1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(out.data(), &[2.0]);

    let flat = Tensor::<f64>::full(&[4, 2], -0.25);
    let out = interpolate_3nn(&src, &flat, &[[0.3, 0.1, 0.7], [9.0, 9.0, 9.0]]).unwrap();
    assert!(out.data().iter().all(|&v| (v + 0.25).abs() < 1e-15));
}

#[test]
fn two_source_fallback_uses_product_weights() {
    let src = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let feats = Tensor::<f64>::from_rows(&[vec![0.0], vec![4.0]]);
    let out = interpolate_3nn(&src, &feats, &[[0.25, 0.0, 0.0]]).unwrap();
    // d = (0.25, 0.75) → w = (0.75, 0.25)
    assert!((out.at(0, 0) - 1.0).abs() < 1e-15);
}

#[test]
fn point_cloud_validation() {
    assert!(PointCloud::new(vec![]).is_err());
    let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
    assert!(c.clone().with_normals(vec![[0.0, 0.0, 1.0]]).is_err());
    assert!(c.clone().with_normals(vec![[0.0, 0.0, 1.0], [0.0, 2.0, 0.0]]).is_err());
    assert!(c.clone().with_normals(vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).is_ok());
    assert!(c.clone().with_labels(vec![1, 2, 3]).is_err());
    assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
}
