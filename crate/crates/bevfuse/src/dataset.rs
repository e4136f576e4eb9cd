//! Dataset generation and loading: scenes go to disk as BFSC records listed
//! in a manifest; loading assembles training samples (sweep accumulation,
//! rasterized supervision on both grids).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevfuse_core::cfg::ModelConfig;
use bevfuse_core::diff::Tensor;
use bevfuse_core::model::Sample;
use bevfuse_core::radar::{accumulate_sweeps, RadarSweep};
use bevfuse_core::raster::rasterize_gt;
use bevfuse_core::scene::generate_scene;
use bevfuse_core::sensor::{render_camera, simulate_radar, RenderOptions};

use crate::config::FullConfig;
use crate::container::{load_manifest, load_scene, save_manifest, save_scene, SceneRecord};
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Generate `count` scenes and write them plus the manifest under `out`.
pub fn generate_dataset(
    cfg: &FullConfig,
    out: &Path,
    count: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out)?;
    let mut names = Vec::with_capacity(count);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = seed.wrapping_add(i as u64);
        let scene = generate_scene(scene_seed, &cfg.scene)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let sweeps = simulate_radar(&scene, cfg.model.sweeps, &cfg.radar_sim, scene_seed);
        let images = scene
            .cameras
            .iter()
            .map(|c| {
                render_camera(
                    &scene,
                    c,
                    RenderOptions {
                        flat_shading: cfg.flat_shading,
                    },
                )
            })
            .collect();
        let record = SceneRecord {
            scene,
            sweeps,
            images,
        };
        let name = format!("scene_{i:04}.bfsc");
        let path = out.join(&name);
        save_scene(&path, &record)?;
        names.push(name);
        paths.push(path);
    }
    save_manifest(&out.join(MANIFEST_NAME), &names)?;
    Ok(paths)
}

pub fn load_records(data: &Path) -> Result<Vec<SceneRecord>, CliError> {
    let manifest = data.join(MANIFEST_NAME);
    let names = load_manifest(&manifest)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", manifest.display())))?;
    if names.is_empty() {
        return Err(CliError::runtime(format!(
            "manifest {} lists no scenes",
            manifest.display()
        )));
    }
    names
        .iter()
        .map(|n| load_scene(&data.join(n)).map_err(CliError::from))
        .collect()
}

/// Drop each radar point with probability `p`, deterministically per scene.
pub fn apply_radar_dropout(sweeps: &[RadarSweep], p: f64, seed: u64) -> Vec<RadarSweep> {
    if p <= 0.0 {
        return sweeps.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00dd_aa77_1234_5678);
    sweeps
        .iter()
        .map(|s| RadarSweep {
            points: s
                .points
                .iter()
                .filter(|_| !rng.gen_bool(p.min(1.0)))
                .copied()
                .collect(),
            world_from_ego: s.world_from_ego,
        })
        .collect()
}

/// Assemble a training/eval sample from a stored record. `radar_dropout`
/// thins the sweeps before accumulation (evaluation degradation knob).
pub fn sample_from_record(
    record: &SceneRecord,
    model: &ModelConfig,
    radar_dropout: f64,
    dropout_seed: u64,
) -> Result<Sample, CliError> {
    if record.sweeps.len() != model.sweeps {
        return Err(CliError::config(format!(
            "dataset stores {} sweeps per scene but the model expects {}",
            record.sweeps.len(),
            model.sweeps
        )));
    }
    if record.images.len() != record.scene.cameras.len() {
        return Err(CliError::runtime(
            "scene record has a different number of images and cameras",
        ));
    }
    let sweeps = apply_radar_dropout(&record.sweeps, radar_dropout, dropout_seed);
    let cloud = accumulate_sweeps(&sweeps).map_err(|e| CliError::runtime(e.to_string()))?;
    let images: Vec<Tensor> = record.images.iter().map(|i| i.to_tensor()).collect();
    for (img, cam) in images.iter().zip(&record.scene.cameras) {
        if img.shape() != [3, cam.image_size.0, cam.image_size.1]
            || cam.image_size != model.image_size
        {
            return Err(CliError::config(format!(
                "stored image size {:?} does not match the model input {:?}",
                &img.shape()[1..],
                model.image_size
            )));
        }
    }
    let out_gt = rasterize_gt(&record.scene, &model.output);
    let aux_gt = rasterize_gt(&record.scene, &model.internal);
    Ok(Sample {
        images,
        calibs: record.scene.cameras.clone(),
        cloud,
        gt: out_gt.gt,
        aux_gt: aux_gt.gt,
        ignore: out_gt.ignore,
    })
}

/// Load every scene in the dataset directory as a sample.
pub fn load_samples(
    data: &Path,
    model: &ModelConfig,
    radar_dropout: f64,
) -> Result<Vec<Sample>, CliError> {
    let records = load_records(data)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| sample_from_record(r, model, radar_dropout, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FullConfig;
    use tempfile::tempdir;

    fn small_cfg() -> FullConfig {
        let mut cfg = FullConfig::micro();
        cfg.scene.n_vehicles = 2;
        cfg.scene.n_cameras = 2;
        cfg
    }

    #[test]
    fn generation_writes_manifest_and_scenes() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg();
        let paths = generate_dataset(&cfg, dir.path(), 4, 9).unwrap();
        assert_eq!(paths.len(), 4);
        let names = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(names.len(), 4);
        for p in paths {
            assert!(p.exists());
        }
        let records = load_records(dir.path()).unwrap();
        assert_eq!(records.len(), 4);
    }

    #[test]
    fn generation_is_bit_identical_across_runs() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg = small_cfg();
        generate_dataset(&cfg, dir_a.path(), 2, 77).unwrap();
        generate_dataset(&cfg, dir_b.path(), 2, 77).unwrap();
        for name in ["scene_0000.bfsc", "scene_0001.bfsc", MANIFEST_NAME] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn sample_assembly_checks_sweep_counts() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg();
        generate_dataset(&cfg, dir.path(), 1, 3).unwrap();
        let records = load_records(dir.path()).unwrap();
        let ok = sample_from_record(&records[0], &cfg.model, 0.0, 0);
        assert!(ok.is_ok());
        let mut wrong = cfg.model.clone();
        wrong.sweeps += 1;
        let err = sample_from_record(&records[0], &wrong, 0.0, 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_dropout_yields_empty_clouds_and_stays_loadable() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg();
        generate_dataset(&cfg, dir.path(), 1, 4).unwrap();
        let samples = load_samples(dir.path(), &cfg.model, 1.0).unwrap();
        assert!(samples[0].cloud.is_empty());
        let with_radar = load_samples(dir.path(), &cfg.model, 0.0).unwrap();
        assert!(!with_radar[0].cloud.is_empty());
    }
}
