//! Implementations behind the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bevfuse_core::diff::Tensor;
use bevfuse_core::metrics::{iou, IouAccumulator};
use bevfuse_core::model::SegModel;
use bevfuse_core::raster::rasterize_gt;
use bevfuse_core::train::{train_loop, TrainEvent};

use crate::checkpoint::{load_checkpoint, load_tensor, save_checkpoint, save_entries, Entry};
use crate::config::{load_config_file, parse_config, FullConfig};
use crate::container::load_scene;
use crate::dataset::{generate_dataset, load_records, load_samples, sample_from_record};
use crate::ppm::{prediction_overlay, write_ppm};
use crate::CliError;

pub const CHECKPOINT_NAME: &str = "model.bfk1";
pub const METRICS_NAME: &str = "metrics.csv";

pub fn cmd_gen(config: &Path, out: &Path, num_scenes: usize, seed: u64) -> Result<(), CliError> {
    let cfg = load_config_file(config)?;
    let paths = generate_dataset(&cfg, out, num_scenes, seed)?;
    println!("wrote {} scenes to {}", paths.len(), out.display());
    Ok(())
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config_file(config)?;
    let samples = load_samples(data, &cfg.model, 0.0)?;
    let mut model =
        SegModel::new(cfg.model.clone()).map_err(|e| CliError::config(e.to_string()))?;

    fs::create_dir_all(out)?;
    let csv_path = out.join(METRICS_NAME);
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "epoch,step,lr,train_loss,val_iou")?;

    let mut csv_err = None;
    let summary = train_loop(&mut model, &samples, &cfg.train, &cfg.loss, |event| {
        if let TrainEvent::Epoch(r) = event {
            if let Err(e) = writeln!(
                csv,
                "{},{},{},{},{}",
                r.epoch, r.step, r.lr, r.train_loss, r.val_iou
            )
            .and_then(|_| csv.flush())
            {
                csv_err.get_or_insert(e);
            }
        }
    })
    .map_err(|e| CliError::runtime(e.to_string()))?;
    if let Some(e) = csv_err {
        return Err(CliError::runtime(format!("metric log write failed: {e}")));
    }

    let ckpt_path = out.join(CHECKPOINT_NAME);
    save_checkpoint(&ckpt_path, &model.store, &cfg.to_text())?;
    println!(
        "trained {} steps over {} epochs, final val IoU {:.4}; checkpoint {}",
        summary.steps,
        summary.epochs,
        summary.final_val_iou,
        ckpt_path.display()
    );
    Ok(())
}

/// Rebuild a model (architecture + weights) from a checkpoint's embedded
/// configuration and parameter entries.
pub fn model_from_checkpoint(path: &Path) -> Result<(SegModel, FullConfig), CliError> {
    let (loaded, cfg_text) = load_checkpoint(path)?;
    let cfg = parse_config(&cfg_text)
        .map_err(|e| CliError::runtime(format!("embedded config is invalid: {e}")))?;
    let mut model =
        SegModel::new(cfg.model.clone()).map_err(|e| CliError::runtime(e.to_string()))?;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let value = loaded.get(&name).ok_or_else(|| {
            CliError::runtime(format!("checkpoint is missing parameter '{name}'"))
        })?;
        let slot = model.store.get_mut(&name).expect("registered");
        if slot.shape() != value.shape() {
            return Err(CliError::runtime(format!(
                "parameter '{name}' has shape {:?} in the checkpoint, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
    }
    Ok((model, cfg))
}

pub struct EvalOutcome {
    pub dataset_iou: f64,
    pub per_scene: Vec<(String, f64)>,
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    radar_dropout: f64,
    no_radar: bool,
    out_csv: &Path,
) -> Result<EvalOutcome, CliError> {
    if !(0.0..=1.0).contains(&radar_dropout) {
        return Err(CliError::config(format!(
            "--radar-dropout must be in [0, 1], got {radar_dropout}"
        )));
    }
    let (model, cfg) = model_from_checkpoint(checkpoint)?;
    let records = load_records(data)?;
    let mut acc = IouAccumulator::default();
    let mut per_scene = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let mut sample = sample_from_record(record, &model.cfg, radar_dropout, i as u64)?;
        if no_radar {
            // keep the radar branch alive on an empty cloud
            sample.cloud.points.clear();
            sample.cloud.sweep_index.clear();
        }
        // a camera-only checkpoint has no radar branch to feed
        let cloud = if cfg.train.no_radar {
            None
        } else {
            Some(&sample.cloud)
        };
        let logits = model
            .infer(&sample.images, &sample.calibs, cloud)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        if !logits.all_finite() {
            return Err(CliError::runtime(format!(
                "non-finite prediction on scene {i}"
            )));
        }
        let scene_iou = iou(&logits, &sample.gt, 0.5, Some(&sample.ignore));
        acc.add(&logits, &sample.gt, 0.5, Some(&sample.ignore));
        per_scene.push((format!("scene_{i:04}"), scene_iou));
    }
    let mut csv = fs::File::create(out_csv)?;
    writeln!(csv, "scene,iou")?;
    for (name, v) in &per_scene {
        writeln!(csv, "{name},{v}")?;
    }
    let outcome = EvalOutcome {
        dataset_iou: acc.value(),
        per_scene,
    };
    println!("dataset IoU: {:.6}", outcome.dataset_iou);
    Ok(outcome)
}

/// Grid metadata stored next to predicted logits so the renderer can
/// rasterize matching ground truth.
fn grid_entry(cfg: &FullConfig) -> Entry {
    let g = &cfg.model.output;
    Entry::Tensor(
        Tensor::from_vec(&[5], vec![g.x_min, g.x_max, g.y_min, g.y_max, g.resolution])
            .expect("static shape"),
    )
}

pub fn cmd_infer(checkpoint: &Path, scene_path: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let (model, cfg) = model_from_checkpoint(checkpoint)?;
    let record = load_scene(scene_path)?;
    let sample = sample_from_record(&record, &model.cfg, 0.0, record.scene.rng_seed)?;
    let cloud = if cfg.train.no_radar {
        None
    } else {
        Some(&sample.cloud)
    };
    let logits = model
        .infer(&sample.images, &sample.calibs, cloud)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    fs::create_dir_all(out)?;
    let pred_path = out.join("pred.bfk1");
    let mut entries = std::collections::BTreeMap::new();
    entries.insert("logits".to_string(), Entry::Tensor(logits));
    entries.insert("grid".to_string(), grid_entry(&cfg));
    save_entries(&pred_path, &entries)?;
    println!("wrote {}", pred_path.display());
    Ok(pred_path)
}

pub fn cmd_render(scene_path: &Path, pred_path: &Path, out_img: &Path) -> Result<(), CliError> {
    let record = load_scene(scene_path)?;
    let logits = load_tensor(pred_path, "logits")?;
    let grid_vals = load_tensor(pred_path, "grid")?;
    if grid_vals.numel() != 5 {
        return Err(CliError::runtime(
            "prediction file carries no grid metadata",
        ));
    }
    let g = grid_vals.data();
    let grid = bevfuse_core::geom::GridSpec::new_2d(g[0], g[1], g[2], g[3], g[4])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    if logits.shape() != [1, grid.nx(), grid.ny()] {
        return Err(CliError::runtime(format!(
            "logits shape {:?} does not match the stored {}x{} grid",
            logits.shape(),
            grid.nx(),
            grid.ny()
        )));
    }
    let gt = rasterize_gt(&record.scene, &grid);
    let (w, h, rgb) = prediction_overlay(&logits, &gt.gt, Some(&gt.ignore), 0.5, 4);
    write_ppm(out_img, w, h, &rgb)?;
    println!("wrote {}", out_img.display());
    Ok(())
}
