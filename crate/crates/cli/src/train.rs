//! `train`: run the training loop and keep the run directory current.
//!
//! The run directory holds exactly three files, each replaced atomically:
//! `config.cfg` (the resolved config), `final.ckpt` (parameters and
//! optimizer state after the latest epoch) and `metrics.csv`.

use std::fs;
use std::path::Path;

use vtp_core::io::{write_atomic, Checkpoint, RunConfig};
use vtp_core::nn::ParamStore;
use vtp_core::training::{
    evaluate, train_loop, Control, Dataset, EpochRecord, MetricReport, Model, Optimizer, Task, TrainConfig,
};

use crate::data::{load_splits, resolve_paths};
use crate::failure::{require_file, Failure};
use crate::TrainArgs;

pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

const COLUMNS: [&str; 11] = [
    "epoch",
    "loss",
    "OA",
    "mAcc",
    "mIoU",
    "train_loss",
    "lr",
    "eval_loss",
    "eval_OA",
    "eval_mAcc",
    "eval_mIoU",
];

pub fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    require_file(path, "config")?;
    let mut cfg = RunConfig::load(path)?;
    resolve_paths(&mut cfg, path);
    Ok(cfg)
}

pub fn score(task: Task, r: &MetricReport) -> f64 {
    match task {
        Task::Classification => r.oa,
        Task::PartSegmentation => r.miou,
    }
}

fn report_fields(r: Option<&MetricReport>) -> [String; 4] {
    match r {
        Some(r) => [r.loss.to_string(), r.oa.to_string(), r.macc.to_string(), r.miou.to_string()],
        None => Default::default(),
    }
}

fn metrics_csv(rows: &[(EpochRecord, Option<MetricReport>)]) -> Vec<u8> {
    // writing to memory cannot fail
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).unwrap();
    for (rec, held_out) in rows {
        let mut row = vec![rec.epoch.to_string()];
        row.extend(report_fields(rec.report.as_ref()));
        row.push(rec.train_loss.to_string());
        row.push(rec.lr.to_string());
        row.extend(report_fields(held_out.as_ref()));
        w.write_record(&row).unwrap();
    }
    w.into_inner().unwrap()
}

pub fn run(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let (train, held_out) = load_splits(&cfg)?;
    let mut store = ParamStore::new();
    let model = Model::new(cfg.model.clone(), &mut store, cfg.seed)?;
    model.check_dataset(&train)?;
    if let Some(e) = &held_out {
        model.check_dataset(e)?;
    }
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &store)?;

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.serialize().as_bytes())?;
    save(&cfg, &store, &optimizer, 0, &dir.join(CHECKPOINT_FILE))?;
    write_atomic(&dir.join(METRICS_FILE), &metrics_csv(&[]))?;

    if !args.quiet {
        println!(
            "training {} model: {} train clouds, {} eval clouds, {} epochs",
            cfg.task().name(),
            train.len(),
            held_out.as_ref().map_or(0, Dataset::len),
            cfg.epochs
        );
    }
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        eval_each_epoch: true,
    };
    let task = cfg.task();
    let mut rows = Vec::new();
    train_loop(&model, &mut store, &mut optimizer, &train, &tc, |ctx| {
        let held = match &held_out {
            Some(e) => Some(evaluate(&model, &mut ctx.store.clone(), e, cfg.batch_size)?),
            None => None,
        };
        rows.push((ctx.record.clone(), held.clone()));
        save(&cfg, ctx.store, ctx.optimizer, ctx.record.epoch, &dir.join(CHECKPOINT_FILE))?;
        write_atomic(&dir.join(METRICS_FILE), &metrics_csv(&rows))?;
        if !args.quiet {
            let r = ctx.record;
            let mut line = format!("epoch {:>3}  lr {:.2e}  train_loss {:.4}", r.epoch, r.lr, r.train_loss);
            if let Some(rep) = &r.report {
                line += &format!("  train OA {:.4} mIoU {:.4}", rep.oa, rep.miou);
            }
            if let Some(rep) = &held {
                line += &format!("  eval OA {:.4} mIoU {:.4}", rep.oa, rep.miou);
            }
            println!("{line}");
        }
        let reached = match (args.target, &held) {
            (Some(t), Some(rep)) => score(task, rep) >= t,
            _ => false,
        };
        Ok(if reached { Control::Stop } else { Control::Continue })
    })?;
    if !args.quiet {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn save(
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    optimizer: &Optimizer<f32>,
    epoch: usize,
    path: &Path,
) -> vtp_core::Result<()> {
    let mut ckpt = Checkpoint::capture(cfg, store, Some(optimizer));
    ckpt.meta.insert("epoch".into(), epoch.to_string());
    ckpt.save(path)
}
