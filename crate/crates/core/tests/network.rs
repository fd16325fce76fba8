
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtp_core::geometry::PointCloud;
use vtp_core::network::*;
use vtp_core::nn::{Mode, ParamStore, Session, Tensor};
use vtp_core::vtp::{Sampling, VtpConfig};

/// Random points on the unit sphere with outward normals.
fn sphere_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
        coords.push(v.map(|x| x / len));
    }
    let normals = coords.clone();
    let scale = rng.random_range(0.6..1.0);
    let coords = coords.iter().map(|p| p.map(|x| x * scale)).collect();
    PointCloud::new(coords).unwrap().with_normals(normals).unwrap()
}

fn toy_blocks() -> Vec<VtpConfig> {
    vec![VtpConfig::new(8, 4, 8, 0.6, 4), VtpConfig::new(16, 3, 6, 0.8, 3)]
}

fn toy_cls() -> ClsNetConfig {
    ClsNetConfig {
        blocks: toy_blocks(),
        head_dims: vec![16, 8],
        num_classes: 3,
        sampling: Sampling::Pinned,
    }
}

fn toy_seg() -> SegNetConfig {
    SegNetConfig {
        blocks: vec![toy_blocks()[0].clone(), toy_blocks()[1].clone(), toy_blocks()[0].clone()],
        mlp_dims: vec![16, 32],
        head_dims: vec![16, 8],
        num_parts: 5,
        num_categories: 2,
        skip_all_blocks: true,
        sampling: Sampling::Pinned,
    }
}

fn eval_cls(net: &ClsNet, store: &mut ParamStore<f32>, clouds: &[&PointCloud]) -> Tensor<f32> {
    let mut s = Session::new(store, Mode::Eval, 0);
    let y = net.forward(&mut s, clouds).unwrap();
    s.graph.value(y).clone()
}

fn eval_seg(net: &SegNet, store: &mut ParamStore<f32>, cloud: &PointCloud, cat: usize) -> Tensor<f32> {
    let mut s = Session::new(store, Mode::Eval, 0);
    let y = net.forward(&mut s, &[cloud], &[cat]).unwrap();
    s.graph.value(y).clone()
}

/// Run a few train-mode passes so batch-norm statistics move away from
/// their initial identity values.
fn warm_up_cls(net: &ClsNet, store: &mut ParamStore<f32>, clouds: &[&PointCloud]) {
    for i in 0..3 {
        let mut s = Session::new(store, Mode::Train, i);
        net.forward(&mut s, clouds).unwrap();
    }
}

fn shuffle(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

#[test]
fn classification_logits_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let net = ClsNet::new(toy_cls(), &mut store, 5).unwrap();
    let clouds: Vec<PointCloud> = (0..3).map(|_| sphere_cloud(&mut rng, 32)).collect();
    warm_up_cls(&net, &mut store, &clouds.iter().collect::<Vec<_>>());
    for cloud in &clouds {
        let base = eval_cls(&net, &mut store, &[cloud]);
        assert_eq!(base.shape(), &[1, 3]);
        for _ in 0..3 {
            let perm = shuffle(&mut rng, 32);
            let moved = cloud.permuted(&perm);
            assert_eq!(eval_cls(&net, &mut store, &[&moved]), base);
        }
    }
}

#[test]
fn segmentation_logits_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = SegNet::new(toy_seg(), &mut store, 5).unwrap();
    let clouds: Vec<PointCloud> = (0..2).map(|_| sphere_cloud(&mut rng, 32)).collect();
    for i in 0..2 {
        let mut s = Session::new(&mut store, Mode::Train, i);
        net.forward(&mut s, &[&clouds[0], &clouds[1]], &[0, 1]).unwrap();
    }
    for (cat, cloud) in clouds.iter().enumerate() {
        let base = eval_seg(&net, &mut store, cloud, cat);
        assert_eq!(base.shape(), &[32, 5]);
        let perm = shuffle(&mut rng, 32);
        let moved = eval_seg(&net, &mut store, &cloud.permuted(&perm), cat);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(moved.row(i), base.row(p));
        }
        // softmax of the logits is a distribution per point
        for i in 0..32 {
            let row: Vec<f64> = base.row(i).iter().map(|&v| v as f64).collect();
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let probs: f64 = row.iter().map(|v| (v - mx).exp() / total).sum();
            assert!((probs - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = sphere_cloud(&mut rng, 40);
    let mut cfg = toy_cls();
    cfg.sampling = Sampling::Seeded;
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    let net_a = ClsNet::new(cfg.clone(), &mut a, 9).unwrap();
    let net_b = ClsNet::new(cfg, &mut b, 9).unwrap();
    assert_eq!(eval_cls(&net_a, &mut a, &[&cloud]), eval_cls(&net_b, &mut b, &[&cloud]));
    assert_eq!(eval_cls(&net_a, &mut a, &[&cloud]), eval_cls(&net_a, &mut a, &[&cloud]));
}

#[test]
fn duplicating_points_keeps_pooled_features_when_every_point_is_a_keypoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = sphere_cloud(&mut rng, 12);
    let cfg = ClsNetConfig {
        blocks: vec![VtpConfig::new(8, 4, 12, 5.0, 1)],
        head_dims: vec![8],
        num_classes: 2,
        sampling: Sampling::Seeded,
    };
    let mut store = ParamStore::new();
    let net = ClsNet::new(cfg, &mut store, 1).unwrap();
    let doubled = PointCloud::new([cloud.coords.clone(), cloud.coords.clone()].concat())
        .unwrap()
        .with_normals([cloud.normals.clone().unwrap(), cloud.normals.clone().unwrap()].concat())
        .unwrap();
    let embed = |store: &mut ParamStore<f32>, c: &PointCloud| {
        let mut s = Session::new(store, Mode::Eval, 0);
        let y = net.embed(&mut s, &[c]).unwrap();
        s.graph.value(y).clone()
    };
    // voxel means over doubled rows are summed in a different order
    assert!(embed(&mut store, &cloud).max_abs_diff(&embed(&mut store, &doubled)) < 1e-5);
    let a = eval_cls(&net, &mut store, &[&cloud]);
    assert!(a.max_abs_diff(&eval_cls(&net, &mut store, &[&doubled])) < 1e-5);
}

#[test]
fn configuration_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let net = SegNet::new(toy_seg(), &mut store, 0).unwrap();
    let cloud = sphere_cloud(&mut rng, 32);
    let mut s = Session::new(&mut store, Mode::Eval, 0);
    assert!(net.forward(&mut s, &[&cloud], &[2]).is_err());
    assert!(net.forward(&mut s, &[&cloud], &[]).is_err());
    let bare = PointCloud::new(cloud.coords.clone()).unwrap();
    assert!(net.forward(&mut s, &[&bare], &[0]).is_err());

    let mut bad = toy_cls();
    bad.blocks[0].c_out = 12;
    assert!(ClsNet::new(bad, &mut ParamStore::<f32>::new(), 0).is_err());
    let small = sphere_cloud(&mut rng, 5);
    let mut st = ParamStore::<f32>::new();
    let net2 = ClsNet::new(toy_cls(), &mut st, 0).unwrap();
    let mut s = Session::new(&mut st, Mode::Eval, 0);
    assert!(net2.forward(&mut s, &[&small]).is_err());
}

/// Parameter count of one block from its layer list, written out by hand.
fn block_params(cin: usize, c: usize) -> usize {
    let pointwise = |a: usize, b: usize| a * b + b + 2 * b;
    let conv = |a: usize, b: usize| 27 * a * b + b + 2 * b;
    let voxel = conv(cin, c) + conv(c, c);
    let inner = 3 * (2 * cin) * c + pointwise(c, c);
    let middle = pointwise(2 * c, c);
    let cross = cin * c + 3 * c * c + c;
    voxel + inner + middle + cross + pointwise(cin, c) + 2 * c * c + c
}

fn stack_params(cin: usize, dims: &[usize]) -> usize {
    let mut width = cin;
    dims.iter()
        .map(|&d| {
            let n = width * d + 3 * d;
            width = d;
            n
        })
        .sum()
}

fn seg_params(cfg: &SegNetConfig) -> usize {
    let mut width = 6;
    let mut total = 0;
    for b in &cfg.blocks {
        total += block_params(width, b.c_out);
        width = b.c_out;
    }
    total += stack_params(width, &cfg.mlp_dims);
    let skip: usize = cfg.blocks.iter().map(|b| b.c_out).sum();
    let head_in = cfg.mlp_dims.last().unwrap() + skip + cfg.num_categories;
    total += stack_params(head_in, &cfg.head_dims);
    total + cfg.head_dims.last().unwrap() * cfg.num_parts + cfg.num_parts
}

fn cls_params(cfg: &ClsNetConfig) -> usize {
    let mut width = 6;
    let mut total = 0;
    for b in &cfg.blocks {
        total += block_params(width, b.c_out);
        width = b.c_out;
    }
    let concat: usize = cfg.blocks.iter().map(|b| b.c_out).sum();
    total += stack_params(concat, &cfg.head_dims);
    total + cfg.head_dims.last().unwrap() * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_counts_match_the_layer_formula() {
    assert_eq!(count_parameters(&ParamStore::<f32>::new()), 0);
    for cfg in [SegNetConfig::paper(50, 16), SegNetConfig::desk(8, 4)] {
        let mut store = ParamStore::<f32>::new();
        SegNet::new(cfg.clone(), &mut store, 0).unwrap();
        assert_eq!(count_parameters(&store), seg_params(&cfg));
    }
    for cfg in [ClsNetConfig::paper(40), ClsNetConfig::desk(4)] {
        let mut store = ParamStore::<f32>::new();
        ClsNet::new(cfg.clone(), &mut store, 0).unwrap();
        assert_eq!(count_parameters(&store), cls_params(&cfg));
    }
    assert_eq!(seg_params(&SegNetConfig::paper(50, 16)), 3_874_482);
    assert_eq!(cls_params(&ClsNetConfig::paper(40)), 3_117_928);
}
