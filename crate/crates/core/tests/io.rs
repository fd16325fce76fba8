use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtp_core::geometry::PointCloud;
use vtp_core::io::{
    colored_prediction, encode_ply, export_prediction, load_pointcloud, parse_ply, parse_xyzn, read_manifest,
    write_manifest, Checkpoint, DataSource, ManifestEntry, PlyFormat, RunConfig, PALETTE,
};
use vtp_core::nn::ParamStore;
use vtp_core::training::{
    generate_synthetic, train_loop, Control, Model, Optimizer, Prediction, Shape, SyntheticDatasetSpec, Task,
    TrainConfig,
};
use vtp_core::Error;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extras: bool) -> PointCloud {
    let coords = (0..n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let mut cloud = PointCloud::new(coords).unwrap();
    if extras {
        let normals = (0..n)
            .map(|_| {
                let v: [f64; 3] = [rng.random_range(0.1..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / len)
            })
            .collect();
        let colors = (0..n).map(|_| [0u8; 3].map(|_| rng.random::<u8>() as f64 / 255.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..50)).collect();
        cloud = cloud
            .with_normals(normals)
            .unwrap()
            .with_colors(colors)
            .unwrap()
            .with_labels(labels)
            .unwrap();
    }
    cloud
}

#[test]
fn minimal_xyzn_file() {
    let cloud = parse_xyzn("0 0 0\n1 0 0\n0 1 0.5\n", Path::new("t.xyzn")).unwrap();
    assert_eq!(cloud.len(), 3);
    assert!(cloud.normals.is_none());
    assert!(cloud.labels.is_none());
    assert_eq!(cloud.coords[2], [0.0, 1.0, 0.5]);
}

#[test]
fn xyzn_normals_and_labels() {
    let cloud = parse_xyzn("# comment\n0 0 0 0 0 2 3\n\n1 1 1 3 0 0 1\n", Path::new("t.xyzn")).unwrap();
    assert_eq!(cloud.normals.unwrap(), vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    assert_eq!(cloud.labels.unwrap(), vec![3, 1]);
}

#[test]
fn xyzn_rejects_mixed_columns_and_non_finite() {
    let p = Path::new("t.xyzn");
    assert!(matches!(parse_xyzn("0 0 0\n1 1 1 1\n", p), Err(Error::Format { .. })));
    assert!(matches!(parse_xyzn("0 0 nan\n", p), Err(Error::Format { .. })));
    assert!(matches!(parse_xyzn("0 0\n", p), Err(Error::Format { .. })));
    assert!(parse_xyzn("", p).is_err());
}

#[test]
fn ascii_ply_normals_are_renormalized() {
    let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\n\
        property float x\nproperty float y\nproperty float z\n\
        property float nx\nproperty float ny\nproperty float nz\nend_header\n\
        0 0 0 0 0 5\n1 2 3 0 3 4\n";
    let cloud = parse_ply(text.as_bytes(), Path::new("a.ply")).unwrap();
    assert_eq!(cloud.len(), 2);
    let n = cloud.normals.unwrap();
    assert_eq!(n[0], [0.0, 0.0, 1.0]);
    assert!((n[1][1] - 0.6).abs() < 1e-12 && (n[1][2] - 0.8).abs() < 1e-12);
}

#[test]
fn ply_colors_labels_and_unknown_properties() {
    let text = "ply\nformat ascii 1.0\nelement vertex 1\n\
        property float x\nproperty float y\nproperty float z\nproperty float intensity\n\
        property uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\n\
        element face 0\nproperty list uchar int vertex_indices\nend_header\n\
        1 2 3 0.5 255 0 51 7\n";
    let cloud = parse_ply(text.as_bytes(), Path::new("c.ply")).unwrap();
    assert_eq!(cloud.colors.unwrap(), vec![[1.0, 0.0, 0.2]]);
    assert_eq!(cloud.labels.unwrap(), vec![7]);
}

#[test]
fn malformed_ply_headers_are_format_errors() {
    let p = Path::new("bad.ply");
    let cases = [
        "plx\nformat ascii 1.0\nelement vertex 0\nend_header\n",
        "ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 inf 0\n",
    ];
    for c in cases {
        assert!(matches!(parse_ply(c.as_bytes(), p), Err(Error::Format { .. })), "{c:?}");
    }
}

#[test]
fn binary_ply_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for extras in [false, true] {
        let cloud = random_cloud(&mut rng, 300, extras);
        let bytes = encode_ply(&cloud, PlyFormat::BinaryLittleEndian).unwrap();
        let back = parse_ply(&bytes, Path::new("r.ply")).unwrap();
        for (a, b) in cloud.coords.iter().zip(&back.coords) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
        assert_eq!(back.labels, cloud.labels);
        assert_eq!(back.colors, cloud.colors);
        if let (Some(a), Some(b)) = (&cloud.normals, &back.normals) {
            let err = a.iter().zip(b).flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs())).fold(0.0, f64::max);
            assert!(err < 1e-15);
        }
    }
}

#[test]
fn ascii_ply_round_trip_and_file_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(&mut rng, 40, true);
    let path = dir.path().join("c.ply");
    vtp_core::io::write_ply(&path, &cloud, PlyFormat::Ascii).unwrap();
    let back = load_pointcloud(&path).unwrap();
    assert_eq!(back.coords, cloud.coords);
    assert_eq!(back.labels, cloud.labels);
    let xyz = dir.path().join("c.xyzn");
    std::fs::write(&xyz, vtp_core::io::encode_xyzn(&back)).unwrap();
    assert_eq!(load_pointcloud(&xyz).unwrap().coords, cloud.coords);
    assert!(load_pointcloud(&dir.path().join("c.obj")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ply_coordinates_survive_any_finite_values(
        pts in prop::collection::vec(prop::array::uniform3(-1e300f64..1e300), 1..40),
        ascii in any::<bool>(),
    ) {
        let cloud = PointCloud::new(pts).unwrap();
        let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        let back = parse_ply(&encode_ply(&cloud, format).unwrap(), Path::new("p.ply")).unwrap();
        prop_assert_eq!(back.coords, cloud.coords);
    }
}

#[test]
fn export_is_deterministic_and_uses_the_palette() {
    let distinct: std::collections::HashSet<_> = PALETTE.iter().collect();
    assert_eq!(distinct.len(), PALETTE.len());
    assert!(PALETTE.len() >= 16);

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = random_cloud(&mut rng, 50, false);
    let labels: Vec<usize> = (0..50).collect();
    let pred = Prediction::Parts { labels: labels.clone() };
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    export_prediction(&cloud, &pred, &a).unwrap();
    export_prediction(&cloud, &pred, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let back = load_pointcloud(&a).unwrap();
    assert_eq!(back.len(), 50);
    assert_eq!(back.labels.as_deref(), Some(&labels[..]));
    let colors = back.colors.unwrap();
    for (l, c) in labels.iter().zip(&colors) {
        assert_eq!(c.map(|v| (v * 255.0).round() as u8), PALETTE[l % PALETTE.len()]);
    }

    let cls = Prediction::Class { class: 0, logits: vec![0.0] };
    assert!(colored_prediction(&cloud, &cls).is_err());
    let short = Prediction::Parts { labels: vec![0; 3] };
    assert!(colored_prediction(&cloud, &short).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        ManifestEntry { path: dir.path().join("a.xyzn"), category: 0 },
        ManifestEntry { path: dir.path().join("sub dir/b.ply"), category: 3 },
    ];
    let path = dir.path().join("train.txt");
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}

const SEG_CONFIG: &str = "
task = seg
# small overrides on the desk preset
blocks.0.r = 0.35
blocks.1.aggregation = B
blocks.2.feature_mode = diff_key
model.mlp_dims = 32, 64
data.shapes = cylinder, cube
data.points = 64
optim.schedule = cosine(20, 0.0001)
train.epochs = 3
";

#[test]
fn config_round_trip_is_value_identical() {
    let cfg = RunConfig::parse(SEG_CONFIG).unwrap();
    let ModelSpec::Seg(seg) = &cfg.model else { panic!() };
    assert_eq!(seg.blocks[0].radius, 0.35);
    assert_eq!(seg.num_parts, 4);
    assert_eq!(seg.mlp_dims, vec![32, 64]);
    let text = cfg.serialize();
    let again = RunConfig::parse(&text).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.serialize(), text);

    for src in ["task = cls", "task = cls\npreset = paper\noptim.kind = sgd", "task = seg\npreset = paper"] {
        let cfg = RunConfig::parse(src).unwrap();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg, "{src}");
    }
}

use vtp_core::training::ModelSpec;

#[test]
fn config_errors() {
    for bad in [
        "",
        "task = seg\ntask = seg",
        "task = seg\nbogus = 1",
        "task = det",
        "task = cls\ntrain.batch_size = 0",
        "task = cls\nblocks.0.r = -1",
        "task = cls\nmodel.blocks = 6",
        "task = cls\ndata.source = files",
        "task = cls\npreset = huge",
        "task cls",
    ] {
        assert!(RunConfig::parse(bad).is_err(), "{bad:?}");
    }
}

fn tiny_run() -> (RunConfig, Model, ParamStore<f32>, Optimizer<f32>) {
    let cfg = RunConfig::parse(
        "task = seg\nmodel.blocks = 2\nblocks.0.c = 8\nblocks.0.R = 4\nblocks.0.M = 8\nblocks.0.K = 4\n\
         blocks.1.c = 8\nblocks.1.R = 2\nblocks.1.M = 4\nblocks.1.K = 4\n\
         model.mlp_dims = 16\nmodel.head_dims = 8\ndata.points = 32\ndata.train_clouds = 4\n",
    )
    .unwrap();
    let DataSource::Synthetic { .. } = cfg.data else { panic!() };
    let (train_spec, _) = cfg.data.synthetic_specs(cfg.task()).unwrap();
    let data = generate_synthetic(&train_spec).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(cfg.model.clone(), &mut store, 1).unwrap();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &store).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 2, seed: 1, eval_each_epoch: false };
    train_loop(&model, &mut store, &mut opt, &data, &tc, |_| Ok(Control::Continue)).unwrap();
    (cfg, model, store, opt)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (cfg, model, store, opt) = tiny_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::capture(&cfg, &store, Some(&opt));
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);

    let mut fresh = ParamStore::new();
    Model::new(back.config.model.clone(), &mut fresh, 99).unwrap();
    back.restore(&mut fresh).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        let bits = |t: &vtp_core::nn::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let mut opt2 = Optimizer::new(cfg.optimizer.clone(), &fresh).unwrap();
    back.restore_optimizer(&fresh, &mut opt2).unwrap();
    assert_eq!(opt2.step, opt.step);
    let moments = |o: &Optimizer<f32>| o.state_tensors(&fresh);
    assert_eq!(moments(&opt2), moments(&opt));
    let _ = model;
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let (cfg, _, store, _) = tiny_run();
    let bytes = Checkpoint::capture(&cfg, &store, None).to_bytes();
    let p = Path::new("x.ckpt");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic, p), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let first = text.lines().find(|l| l.starts_with("tensor ")).unwrap().to_string();
    let second = text.lines().filter(|l| l.starts_with("tensor ")).nth(1).unwrap().to_string();
    let offset_of = |l: &str| l.split_whitespace().nth(4).unwrap().to_string();
    let overlapped = second.replacen(&format!(" {} ", offset_of(&second)), &format!(" {} ", offset_of(&first)), 1);
    let mut forged = bytes.clone();
    let at = text.find(&second).unwrap();
    assert_eq!(overlapped.len(), second.len() - (offset_of(&second).len() - offset_of(&first).len()));
    forged.splice(at..at + second.len(), overlapped.bytes());
    assert!(matches!(Checkpoint::from_bytes(&forged, p), Err(Error::Format { .. })));
}

#[test]
fn restore_into_mismatched_model_names_both_shapes() {
    let (cfg, _, store, _) = tiny_run();
    let ck = Checkpoint::capture(&cfg, &store, None);
    let mut other_cfg = cfg.clone();
    let ModelSpec::Seg(seg) = &mut other_cfg.model else { panic!() };
    seg.blocks[0].c_out = 16;
    let mut other = ParamStore::new();
    Model::new(other_cfg.model, &mut other, 0).unwrap();
    let err = ck.restore(&mut other).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains("8"), "{err}");
}

#[test]
fn synthetic_eval_split_differs_from_train() {
    let cfg = RunConfig::parse("task = cls\ndata.train_clouds = 4\ndata.eval_clouds = 4\ndata.points = 16").unwrap();
    let (a, b): (SyntheticDatasetSpec, SyntheticDatasetSpec) = cfg.data.synthetic_specs(Task::Classification).unwrap();
    assert_ne!(a.seed, b.seed);
    assert_eq!(a.shapes, Shape::ALL.to_vec());
}
