//! `ablate`: one CSV per axis with a row per (variant, seed).

use std::fs;

use vtp_core::io::write_atomic;
use vtp_core::training::ablation::{ablation_harness, AblationAxis, AblationConfig, AblationTable, ScaleValues};
use vtp_core::training::{ModelSpec, Task};

use crate::data::load_splits;
use crate::failure::Failure;
use crate::train::load_config;
use crate::AblateArgs;

fn axis_csv(table: &AblationTable, axis: AblationAxis, task: Task) -> Vec<u8> {
    let score = match task {
        Task::Classification => "OA",
        Task::PartSegmentation => "mIoU",
    };
    // writing to memory cannot fail
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "seed", score, "mean", "std"]).unwrap();
    for run in table.runs_for(axis) {
        let s = table
            .summaries_for(axis)
            .find(|s| s.variant == run.variant)
            .expect("every run has a summary");
        w.write_record([
            run.variant.clone(),
            run.seed.to_string(),
            run.score.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
        ])
        .unwrap();
    }
    w.into_inner().unwrap()
}

pub fn run(args: &AblateArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let axes: Vec<AblationAxis> = if args.axes.is_empty() {
        AblationAxis::ALL.to_vec()
    } else {
        args.axes
            .iter()
            .map(|a| a.parse().map_err(|e| Failure::Usage(format!("{e}"))))
            .collect::<Result<_, _>>()?
    };
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let (train, held_out) = load_splits(&cfg)?;
    let eval = held_out.ok_or_else(|| Failure::Validation("ablation needs an eval split".into()))?;
    let blocks = match &cfg.model {
        ModelSpec::Cls(c) => &c.blocks,
        ModelSpec::Seg(c) => &c.blocks,
    };
    let scales = ScaleValues::from_blocks(blocks);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.output_dir.display())))?;
    let task = cfg.task();
    for axis in axes {
        let ac = AblationConfig {
            axes: vec![axis],
            seeds: (0..args.seeds).collect(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer.clone(),
            scales,
        };
        let table = ablation_harness(&ac, &cfg.model, &train, &eval, |r| {
            println!("{:<14} {:<28} seed {}  score {:.4}", r.axis.name(), r.variant, r.seed, r.score);
        })?;
        for s in table.summaries_for(axis) {
            println!("{:<14} {:<28} mean {:.4} std {:.4} rank {}", axis.name(), s.variant, s.mean, s.std, s.rank);
        }
        let path = cfg.output_dir.join(format!("ablation_{}.csv", axis.name()));
        write_atomic(&path, &axis_csv(&table, axis, task))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
