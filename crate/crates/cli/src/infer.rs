//! `infer` and `export`: predictions for a single cloud file.

use std::collections::BTreeMap;
use std::path::Path;

use vtp_core::geometry::PointCloud;
use vtp_core::io::{self, export_prediction, PlyFormat};
use vtp_core::training::{predict, Model, Prediction};

use crate::eval::load_model;
use crate::failure::{require_file, Failure};
use crate::{ExportArgs, InferArgs};

fn category_for(model: &Model, category: Option<usize>) -> Result<usize, Failure> {
    match model {
        Model::Cls(_) => Ok(category.unwrap_or(0)),
        Model::Seg(n) => {
            let c = category.ok_or_else(|| Failure::Usage("segmentation models need --category".into()))?;
            if c >= n.cfg.num_categories {
                return Err(Failure::Validation(format!(
                    "category {c} out of range: the model has {} categories",
                    n.cfg.num_categories
                )));
            }
            Ok(c)
        }
    }
}

fn predict_file(checkpoint: &Path, input: &Path, category: Option<usize>) -> Result<(PointCloud, Prediction), Failure> {
    let (_, model, mut store) = load_model(checkpoint)?;
    require_file(input, "input cloud")?;
    let cloud = io::load_pointcloud(input)?;
    let cat = category_for(&model, category)?;
    let pred = predict(&model, &mut store, &[&cloud], &[cat], 1)?
        .pop()
        .expect("one prediction per cloud");
    Ok((cloud, pred))
}

pub fn infer(args: &InferArgs) -> Result<(), Failure> {
    let (cloud, pred) = predict_file(&args.checkpoint, &args.input, args.category)?;
    match &pred {
        Prediction::Class { class, logits } => {
            println!("class {class}");
            let words: Vec<String> = logits.iter().map(|l| format!("{l:.4}")).collect();
            println!("logits {}", words.join(" "));
            if args.output.is_some() {
                return Err(Failure::Usage("--output needs a segmentation model".into()));
            }
        }
        Prediction::Parts { labels } => {
            let mut counts = BTreeMap::new();
            for &l in labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            println!("{} points", labels.len());
            for (part, n) in counts {
                println!("part {part}: {n} points");
            }
            if let Some(out) = &args.output {
                let labeled = PointCloud {
                    labels: None,
                    ..cloud
                }
                .with_labels(labels.clone())?;
                let is_ply = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
                if is_ply {
                    io::write_ply(out, &labeled, PlyFormat::BinaryLittleEndian)?;
                } else {
                    io::write_atomic(out, io::encode_xyzn(&labeled).as_bytes())?;
                }
                println!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<(), Failure> {
    let (cloud, pred) = predict_file(&args.checkpoint, &args.input, Some(args.category))?;
    if matches!(pred, Prediction::Class { .. }) {
        return Err(Failure::Validation("export needs a segmentation checkpoint".into()));
    }
    export_prediction(&cloud, &pred, &args.output)?;
    println!("wrote {} ({} points)", args.output.display(), cloud.len());
    Ok(())
}
