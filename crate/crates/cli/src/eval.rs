//! `eval`: eval-mode metrics of a checkpoint on a dataset.

use std::path::Path;

use vtp_core::io::{write_atomic, Checkpoint};
use vtp_core::nn::ParamStore;
use vtp_core::training::{evaluate, MetricReport, Model};

use crate::data::{load_manifest, load_split};
use crate::failure::{require_file, Failure};
use crate::EvalArgs;

/// A model rebuilt from a checkpoint's embedded config, weights restored.
pub fn load_model(path: &Path) -> Result<(Checkpoint, Model, ParamStore<f32>), Failure> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let model = Model::new(ckpt.config.model.clone(), &mut store, ckpt.config.seed)?;
    ckpt.restore(&mut store)?;
    Ok((ckpt, model, store))
}

pub fn report_csv(report: &MetricReport) -> Vec<u8> {
    // writing to memory cannot fail
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loss", "OA", "mAcc", "mIoU"]).unwrap();
    w.write_record([report.loss, report.oa, report.macc, report.miou].map(|v| v.to_string()))
        .unwrap();
    w.into_inner().unwrap()
}

pub fn run(args: &EvalArgs) -> Result<(), Failure> {
    let (ckpt, model, mut store) = load_model(&args.checkpoint)?;
    let data = match &args.manifest {
        Some(m) => load_manifest(m, model.task())?,
        None => load_split(&ckpt.config, args.split)?,
    };
    let batch_size = args.batch_size.unwrap_or(ckpt.config.batch_size);
    if batch_size == 0 {
        return Err(Failure::Usage("--batch-size must be positive".into()));
    }
    let report = evaluate(&model, &mut store, &data, batch_size)?;
    println!("clouds  {}", data.len());
    println!("loss    {}", report.loss);
    println!("OA      {}", report.oa);
    println!("mAcc    {}", report.macc);
    println!("mIoU    {}", report.miou);
    for (class, iou) in &report.per_class_iou {
        println!("  IoU[{class}] {iou}");
    }
    if let Some(out) = &args.output {
        write_atomic(out, &report_csv(&report))?;
    }
    Ok(())
}
