//! Dataset splits for a run config, and the `gen-data` command.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use vtp_core::io::{self, DataSource, ManifestEntry, PlyFormat, RunConfig};
use vtp_core::training::{generate_synthetic, Dataset, Shape, SyntheticDatasetSpec, Task};

use crate::failure::{require_file, Failure};
use crate::GenDataArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Ply,
    Xyzn,
}

/// Make manifest paths in a file-backed config absolute, relative to the
/// directory holding the config.
pub fn resolve_paths(cfg: &mut RunConfig, config_path: &Path) {
    let base = config_path.parent().unwrap_or(Path::new("."));
    let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    if let DataSource::Files {
        train_manifest,
        eval_manifest,
    } = &mut cfg.data
    {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(train_manifest);
        if let Some(e) = eval_manifest {
            fix(e);
        }
    }
}

pub fn load_manifest(path: &Path, task: Task) -> Result<Dataset, Failure> {
    require_file(path, "manifest")?;
    Ok(io::load_manifest_dataset(path, task, Vec::new())?)
}

/// The training split and, when configured, the held-out split.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), Failure> {
    let task = cfg.task();
    match &cfg.data {
        DataSource::Synthetic { .. } => {
            let (train, eval) = cfg.data.synthetic_specs(task).expect("synthetic source");
            let train = generate_synthetic(&train)?;
            let eval = if eval.clouds == 0 { None } else { Some(generate_synthetic(&eval)?) };
            Ok((train, eval))
        }
        DataSource::Files {
            train_manifest,
            eval_manifest,
        } => {
            let train = load_manifest(train_manifest, task)?;
            let eval = eval_manifest.as_deref().map(|p| load_manifest(p, task)).transpose()?;
            Ok((train, eval))
        }
    }
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, Failure> {
    let (train, eval) = load_splits(cfg)?;
    match split {
        Split::Train => Ok(train),
        Split::Eval => eval.ok_or_else(|| Failure::Validation("the configuration has no eval split".into())),
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let task: Task = args.task.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
    let shapes: Vec<Shape> = if args.shapes.is_empty() {
        match task {
            Task::Classification => Shape::ALL.to_vec(),
            Task::PartSegmentation => vec![Shape::Cylinder],
        }
    } else {
        args.shapes
            .iter()
            .map(|s| s.parse().map_err(|e| Failure::Usage(format!("{e}"))))
            .collect::<Result<_, _>>()?
    };
    let spec = SyntheticDatasetSpec {
        task,
        shapes,
        clouds: args.clouds,
        points_per_cloud: args.points,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.output_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", args.output_dir.display())))?;
    let ext = match args.format {
        FileFormat::Ply => "ply",
        FileFormat::Xyzn => "xyzn",
    };
    let mut entries = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let path = args.output_dir.join(format!("cloud_{i:05}.{ext}"));
        match args.format {
            FileFormat::Ply => io::write_ply(&path, &s.cloud, PlyFormat::BinaryLittleEndian)?,
            FileFormat::Xyzn => io::write_atomic(&path, io::encode_xyzn(&s.cloud).as_bytes())?,
        }
        entries.push(ManifestEntry {
            path,
            category: s.category,
        });
    }
    let manifest = args.output_dir.join("manifest.txt");
    io::write_manifest(&manifest, &entries)?;
    println!("wrote {} clouds and {}", entries.len(), manifest.display());
    Ok(())
}
