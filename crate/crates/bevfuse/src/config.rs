//! Flat key=value configuration. `profile = micro|desk` selects the base;
//! every other key overrides one field. Unknown keys are errors. The full
//! resolved configuration serializes back to text for embedding in
//! checkpoints, so evaluation needs no separate config file.

use std::f64::consts::PI;

use bevfuse_core::cfg::{ModelConfig, TemporalEncoding, TrainConfig};
use bevfuse_core::geom::GridSpec;
use bevfuse_core::loss::LossWeights;
use bevfuse_core::scene::SceneParams;
use bevfuse_core::sensor::RadarSimParams;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneParams,
    pub radar_sim: RadarSimParams,
    pub flat_shading: bool,
    pub loss: LossWeights,
}

impl FullConfig {
    pub fn micro() -> Self {
        let model = ModelConfig::micro();
        let mut scene = SceneParams::desk_default();
        scene.image_size = model.image_size;
        FullConfig {
            model,
            train: TrainConfig::desk_default(),
            scene,
            radar_sim: RadarSimParams::desk_default(),
            flat_shading: false,
            loss: LossWeights::default(),
        }
    }

    pub fn desk() -> Self {
        let model = ModelConfig::desk_default();
        let mut scene = SceneParams::desk_default();
        scene.image_size = model.image_size;
        scene.half_extent = 45.0;
        scene.n_cameras = 6;
        FullConfig {
            model,
            train: TrainConfig::desk_default(),
            scene,
            radar_sim: RadarSimParams {
                clutter_extent: 45.0,
                ..RadarSimParams::desk_default()
            },
            flat_shading: false,
            loss: LossWeights::default(),
        }
    }

    fn grid_halves(spec: &GridSpec) -> (f64, f64) {
        ((spec.x_max - spec.x_min) / 2.0, spec.resolution)
    }

    /// Full resolved key=value text; parsing it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.scene;
        let r = &self.radar_sim;
        let (internal_half, internal_res) = Self::grid_halves(&m.internal);
        let (output_half, output_res) = Self::grid_halves(&m.output);
        let temporal = match m.temporal {
            TemporalEncoding::Ordinal => "ordinal",
            TemporalEncoding::OneHot => "one_hot",
        };
        format!(
            "model.seed = {}\n\
             model.image_height = {}\n\
             model.image_width = {}\n\
             model.stem_width = {}\n\
             model.stage_width_0 = {}\n\
             model.stage_width_1 = {}\n\
             model.stage_width_2 = {}\n\
             model.c_img = {}\n\
             model.msda_heads = {}\n\
             model.msda_points = {}\n\
             model.internal_half_extent = {}\n\
             model.internal_resolution = {}\n\
             model.output_half_extent = {}\n\
             model.output_resolution = {}\n\
             model.voxel_z_min = {}\n\
             model.voxel_z_max = {}\n\
             model.voxel_z_resolution = {}\n\
             model.sweeps = {}\n\
             model.temporal = {}\n\
             model.c_pt = {}\n\
             model.radar_window = {}\n\
             model.radar_blocks = {}\n\
             model.radar_heads = {}\n\
             model.c_fuse = {}\n\
             model.se_reduction = {}\n\
             model.unet_depth = {}\n\
             train.epochs = {}\n\
             train.max_steps = {}\n\
             train.effective_batch = {}\n\
             train.peak_lr = {}\n\
             train.weight_decay = {}\n\
             train.warmup_epochs = {}\n\
             train.seed = {}\n\
             train.radar_drop_prob = {}\n\
             train.no_radar = {}\n\
             train.val_fraction = {}\n\
             aug.enabled = {}\n\
             aug.image_flip_prob = {}\n\
             aug.image_zoom_min = {}\n\
             aug.image_zoom_max = {}\n\
             aug.image_rot_deg = {}\n\
             aug.bev_flip_prob = {}\n\
             aug.bev_rot_deg = {}\n\
             aug.bev_scale_min = {}\n\
             aug.bev_scale_max = {}\n\
             scene.half_extent = {}\n\
             scene.n_vehicles = {}\n\
             scene.length_min = {}\n\
             scene.length_max = {}\n\
             scene.width_min = {}\n\
             scene.width_max = {}\n\
             scene.height_min = {}\n\
             scene.height_max = {}\n\
             scene.speed_min = {}\n\
             scene.speed_max = {}\n\
             scene.ego_speed_min = {}\n\
             scene.ego_speed_max = {}\n\
             scene.ego_clearance = {}\n\
             scene.n_cameras = {}\n\
             scene.hfov = {}\n\
             scene.camera_height = {}\n\
             scene.max_retries = {}\n\
             radar.points_per_vehicle = {}\n\
             radar.clutter_rate = {}\n\
             radar.clutter_extent = {}\n\
             radar.position_sigma = {}\n\
             radar.velocity_sigma = {}\n\
             radar.dropout = {}\n\
             radar.sweep_dt = {}\n\
             render.flat_shading = {}\n\
             loss.alpha1 = {}\n\
             loss.alpha2 = {}\n\
             loss.alpha3 = {}\n",
            m.seed,
            m.image_size.0,
            m.image_size.1,
            m.stem_width,
            m.stage_widths[0],
            m.stage_widths[1],
            m.stage_widths[2],
            m.c_img,
            m.msda_heads,
            m.msda_points,
            internal_half,
            internal_res,
            output_half,
            output_res,
            m.voxel_z.0,
            m.voxel_z.1,
            m.voxel_z.2,
            m.sweeps,
            temporal,
            m.c_pt,
            m.radar_window,
            m.radar_blocks,
            m.radar_heads,
            m.c_fuse,
            m.se_reduction,
            m.unet_depth,
            t.epochs,
            t.max_steps,
            t.effective_batch,
            t.peak_lr,
            t.weight_decay,
            t.warmup_epochs,
            t.seed,
            t.radar_drop_prob,
            t.no_radar,
            t.val_fraction,
            t.aug.enabled,
            t.aug.image_flip_prob,
            t.aug.image_zoom.0,
            t.aug.image_zoom.1,
            t.aug.image_rot * 180.0 / PI,
            t.aug.bev_flip_prob,
            t.aug.bev_rot * 180.0 / PI,
            t.aug.bev_scale.0,
            t.aug.bev_scale.1,
            s.half_extent,
            s.n_vehicles,
            s.length_range.0,
            s.length_range.1,
            s.width_range.0,
            s.width_range.1,
            s.height_range.0,
            s.height_range.1,
            s.speed_range.0,
            s.speed_range.1,
            s.ego_speed_range.0,
            s.ego_speed_range.1,
            s.ego_clearance,
            s.n_cameras,
            s.horizontal_fov,
            s.camera_height,
            s.max_retries,
            r.points_per_vehicle,
            r.clutter_rate,
            r.clutter_extent,
            r.position_sigma,
            r.velocity_sigma,
            r.dropout,
            r.sweep_dt,
            self.flat_shading,
            self.loss.alpha1,
            self.loss.alpha2,
            self.loss.alpha3,
        )
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    value
        .parse::<f64>()
        .map_err(|_| CliError::config(format!("key '{key}': '{value}' is not a number")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, CliError> {
    value
        .parse::<usize>()
        .map_err(|_| CliError::config(format!("key '{key}': '{value}' is not an integer")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64, CliError> {
    value
        .parse::<u64>()
        .map_err(|_| CliError::config(format!("key '{key}': '{value}' is not an integer")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::config(format!(
            "key '{key}': '{value}' is not a boolean"
        ))),
    }
}

/// Parse the flat config text. The optional `profile` key may appear
/// anywhere; every other key overrides one field of the resolved profile.
pub fn parse_config(text: &str) -> Result<FullConfig, CliError> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }

    let mut cfg = match pairs.iter().find(|(k, _)| k == "profile") {
        None => FullConfig::micro(),
        Some((_, v)) if v == "micro" => FullConfig::micro(),
        Some((_, v)) if v == "desk" => FullConfig::desk(),
        Some((_, v)) => {
            return Err(CliError::config(format!(
                "unknown profile '{v}' (expected micro or desk)"
            )))
        }
    };

    // grids assemble from four numbers each; collect then rebuild
    let (mut ih, mut ir) = FullConfig::grid_halves(&cfg.model.internal);
    let (mut oh, mut or) = FullConfig::grid_halves(&cfg.model.output);

    for (key, value) in &pairs {
        let key = key.as_str();
        let value = value.as_str();
        match key {
            "profile" => {}
            "model.seed" => cfg.model.seed = parse_u64(key, value)?,
            "model.image_height" => cfg.model.image_size.0 = parse_usize(key, value)?,
            "model.image_width" => cfg.model.image_size.1 = parse_usize(key, value)?,
            "model.stem_width" => cfg.model.stem_width = parse_usize(key, value)?,
            "model.stage_width_0" => cfg.model.stage_widths[0] = parse_usize(key, value)?,
            "model.stage_width_1" => cfg.model.stage_widths[1] = parse_usize(key, value)?,
            "model.stage_width_2" => cfg.model.stage_widths[2] = parse_usize(key, value)?,
            "model.c_img" => cfg.model.c_img = parse_usize(key, value)?,
            "model.msda_heads" => cfg.model.msda_heads = parse_usize(key, value)?,
            "model.msda_points" => cfg.model.msda_points = parse_usize(key, value)?,
            "model.internal_half_extent" => ih = parse_f64(key, value)?,
            "model.internal_resolution" => ir = parse_f64(key, value)?,
            "model.output_half_extent" => oh = parse_f64(key, value)?,
            "model.output_resolution" => or = parse_f64(key, value)?,
            "model.voxel_z_min" => cfg.model.voxel_z.0 = parse_f64(key, value)?,
            "model.voxel_z_max" => cfg.model.voxel_z.1 = parse_f64(key, value)?,
            "model.voxel_z_resolution" => cfg.model.voxel_z.2 = parse_f64(key, value)?,
            "model.sweeps" => cfg.model.sweeps = parse_usize(key, value)?,
            "model.temporal" => {
                cfg.model.temporal = match value {
                    "ordinal" => TemporalEncoding::Ordinal,
                    "one_hot" => TemporalEncoding::OneHot,
                    _ => {
                        return Err(CliError::config(format!(
                            "key '{key}': expected ordinal or one_hot, got '{value}'"
                        )))
                    }
                }
            }
            "model.c_pt" => cfg.model.c_pt = parse_usize(key, value)?,
            "model.radar_window" => cfg.model.radar_window = parse_usize(key, value)?,
            "model.radar_blocks" => cfg.model.radar_blocks = parse_usize(key, value)?,
            "model.radar_heads" => cfg.model.radar_heads = parse_usize(key, value)?,
            "model.c_fuse" => cfg.model.c_fuse = parse_usize(key, value)?,
            "model.se_reduction" => cfg.model.se_reduction = parse_usize(key, value)?,
            "model.unet_depth" => cfg.model.unet_depth = parse_usize(key, value)?,
            "train.epochs" => cfg.train.epochs = parse_usize(key, value)?,
            "train.max_steps" => cfg.train.max_steps = parse_usize(key, value)?,
            "train.effective_batch" => cfg.train.effective_batch = parse_usize(key, value)?,
            "train.peak_lr" => cfg.train.peak_lr = parse_f64(key, value)?,
            "train.weight_decay" => cfg.train.weight_decay = parse_f64(key, value)?,
            "train.warmup_epochs" => cfg.train.warmup_epochs = parse_usize(key, value)?,
            "train.seed" => cfg.train.seed = parse_u64(key, value)?,
            "train.radar_drop_prob" => cfg.train.radar_drop_prob = parse_f64(key, value)?,
            "train.no_radar" => cfg.train.no_radar = parse_bool(key, value)?,
            "train.val_fraction" => cfg.train.val_fraction = parse_f64(key, value)?,
            "aug.enabled" => cfg.train.aug.enabled = parse_bool(key, value)?,
            "aug.image_flip_prob" => cfg.train.aug.image_flip_prob = parse_f64(key, value)?,
            "aug.image_zoom_min" => cfg.train.aug.image_zoom.0 = parse_f64(key, value)?,
            "aug.image_zoom_max" => cfg.train.aug.image_zoom.1 = parse_f64(key, value)?,
            "aug.image_rot_deg" => cfg.train.aug.image_rot = parse_f64(key, value)? * PI / 180.0,
            "aug.bev_flip_prob" => cfg.train.aug.bev_flip_prob = parse_f64(key, value)?,
            "aug.bev_rot_deg" => cfg.train.aug.bev_rot = parse_f64(key, value)? * PI / 180.0,
            "aug.bev_scale_min" => cfg.train.aug.bev_scale.0 = parse_f64(key, value)?,
            "aug.bev_scale_max" => cfg.train.aug.bev_scale.1 = parse_f64(key, value)?,
            "scene.half_extent" => cfg.scene.half_extent = parse_f64(key, value)?,
            "scene.n_vehicles" => cfg.scene.n_vehicles = parse_usize(key, value)?,
            "scene.length_min" => cfg.scene.length_range.0 = parse_f64(key, value)?,
            "scene.length_max" => cfg.scene.length_range.1 = parse_f64(key, value)?,
            "scene.width_min" => cfg.scene.width_range.0 = parse_f64(key, value)?,
            "scene.width_max" => cfg.scene.width_range.1 = parse_f64(key, value)?,
            "scene.height_min" => cfg.scene.height_range.0 = parse_f64(key, value)?,
            "scene.height_max" => cfg.scene.height_range.1 = parse_f64(key, value)?,
            "scene.speed_min" => cfg.scene.speed_range.0 = parse_f64(key, value)?,
            "scene.speed_max" => cfg.scene.speed_range.1 = parse_f64(key, value)?,
            "scene.ego_speed_min" => cfg.scene.ego_speed_range.0 = parse_f64(key, value)?,
            "scene.ego_speed_max" => cfg.scene.ego_speed_range.1 = parse_f64(key, value)?,
            "scene.ego_clearance" => cfg.scene.ego_clearance = parse_f64(key, value)?,
            "scene.n_cameras" => cfg.scene.n_cameras = parse_usize(key, value)?,
            "scene.hfov" => cfg.scene.horizontal_fov = parse_f64(key, value)?,
            "scene.camera_height" => cfg.scene.camera_height = parse_f64(key, value)?,
            "scene.max_retries" => cfg.scene.max_retries = parse_usize(key, value)?,
            "radar.points_per_vehicle" => {
                cfg.radar_sim.points_per_vehicle = parse_usize(key, value)?
            }
            "radar.clutter_rate" => cfg.radar_sim.clutter_rate = parse_usize(key, value)?,
            "radar.clutter_extent" => cfg.radar_sim.clutter_extent = parse_f64(key, value)?,
            "radar.position_sigma" => cfg.radar_sim.position_sigma = parse_f64(key, value)?,
            "radar.velocity_sigma" => cfg.radar_sim.velocity_sigma = parse_f64(key, value)?,
            "radar.dropout" => cfg.radar_sim.dropout = parse_f64(key, value)?,
            "radar.sweep_dt" => cfg.radar_sim.sweep_dt = parse_f64(key, value)?,
            "render.flat_shading" => cfg.flat_shading = parse_bool(key, value)?,
            "loss.alpha1" => cfg.loss.alpha1 = parse_f64(key, value)?,
            "loss.alpha2" => cfg.loss.alpha2 = parse_f64(key, value)?,
            "loss.alpha3" => cfg.loss.alpha3 = parse_f64(key, value)?,
            _ => return Err(CliError::config(format!("unknown key '{key}'"))),
        }
    }

    cfg.model.internal = GridSpec::new_2d(-ih, ih, -ih, ih, ir)
        .map_err(|e| CliError::config(format!("internal grid: {e}")))?;
    cfg.model.output = GridSpec::new_2d(-oh, oh, -oh, oh, or)
        .map_err(|e| CliError::config(format!("output grid: {e}")))?;
    cfg.scene.image_size = cfg.model.image_size;
    cfg.model
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config_file(path: &std::path::Path) -> Result<FullConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for cfg in [FullConfig::micro(), FullConfig::desk()] {
            let text = cfg.to_text();
            let parsed = parse_config(&text).unwrap();
            assert_eq!(parsed, cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("model.nonsense = 3\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn overrides_apply_on_top_of_the_profile() {
        let cfg = parse_config(
            "profile = micro\n\
             model.c_fuse = 8\n\
             train.peak_lr = 0.001\n\
             scene.n_vehicles = 3\n\
             render.flat_shading = true\n",
        )
        .unwrap();
        assert_eq!(cfg.model.c_fuse, 8);
        assert_eq!(cfg.train.peak_lr, 0.001);
        assert_eq!(cfg.scene.n_vehicles, 3);
        assert!(cfg.flat_shading);
    }

    #[test]
    fn invalid_values_and_grids_fail_as_config_errors() {
        assert!(parse_config("model.c_img = soon\n").is_err());
        // resolution that does not divide the extent
        let err = parse_config("model.internal_half_extent = 10\nmodel.internal_resolution = 1.5\n")
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // malformed line
        assert!(parse_config("just some words\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored_and_paper_defaults_hold() {
        let cfg = parse_config("# comment only\n\nprofile = desk\n").unwrap();
        assert_eq!(cfg.model.internal.nx(), 256);
        assert_eq!(cfg.model.output.nx(), 200);
        assert_eq!(cfg.model.sweeps, 7);
        assert_eq!(cfg.train.peak_lr, 3e-4);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.warmup_epochs, 1);
        assert_eq!(cfg.train.effective_batch, 32);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!((cfg.loss.alpha1, cfg.loss.alpha2, cfg.loss.alpha3), (1.0, 0.4, 1.0));
    }
}
