//! Model and training configuration. The desk defaults keep the paper's
//! structure (grid nesting, seven sweeps, three pyramid levels) at sizes a
//! CPU can train; `micro()` shrinks everything further for gradient-oracle
//! and overfit runs.

use alloc::string::String;
use core::fmt;

use crate::geom::{GeomError, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalEncoding {
    Ordinal,
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// (height, width); both divisible by 32.
    pub image_size: (usize, usize),
    /// Stem width before the three tapped stages.
    pub stem_width: usize,
    /// Widths of the stride-8/16/32 encoder taps.
    pub stage_widths: [usize; 3],
    /// Common channel count after the FPN.
    pub c_img: usize,
    pub msda_heads: usize,
    pub msda_points: usize,
    /// Internal BEV grid the network operates on.
    pub internal: GridSpec,
    /// Output BEV grid of the segmentation head.
    pub output: GridSpec,
    /// Vertical extent of the lift voxel grid: (z_min, z_max, z_resolution).
    pub voxel_z: (f64, f64, f64),
    /// Radar sweeps accumulated per sample.
    pub sweeps: usize,
    pub temporal: TemporalEncoding,
    /// Per-point feature channels in the radar encoder.
    pub c_pt: usize,
    pub radar_window: usize,
    pub radar_blocks: usize,
    pub radar_heads: usize,
    /// Common fused channel count C.
    pub c_fuse: usize,
    pub se_reduction: usize,
    pub unet_depth: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: paper grid nesting and sweep count with reduced
    /// widths (backbone 16/32/64, 2-head 2-point deformable attention,
    /// 32-channel point encoder, SE reduction 4, U-Net depth 3).
    pub fn desk_default() -> Self {
        ModelConfig {
            image_size: (320, 800),
            stem_width: 8,
            stage_widths: [16, 32, 64],
            c_img: 16,
            msda_heads: 2,
            msda_points: 2,
            internal: GridSpec::internal_default(),
            output: GridSpec::output_default(),
            voxel_z: (-2.0, 6.0, 1.0),
            sweeps: 7,
            temporal: TemporalEncoding::Ordinal,
            c_pt: 32,
            radar_window: 16,
            radar_blocks: 2,
            radar_heads: 2,
            c_fuse: 32,
            se_reduction: 4,
            unet_depth: 3,
            seed: 7,
        }
    }

    /// Micro scale for oracle suites and CPU training runs: 64x96 images,
    /// 32x32 internal grid over +-24 m, 30x30 output grid over +-22.5 m.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: (64, 96),
            stem_width: 4,
            stage_widths: [8, 12, 16],
            c_img: 8,
            msda_heads: 2,
            msda_points: 2,
            internal: GridSpec::new_2d(-24.0, 24.0, -24.0, 24.0, 1.5).expect("static"),
            output: GridSpec::new_2d(-22.5, 22.5, -22.5, 22.5, 1.5).expect("static"),
            voxel_z: (-1.0, 3.0, 2.0),
            sweeps: 3,
            temporal: TemporalEncoding::Ordinal,
            c_pt: 16,
            radar_window: 16,
            radar_blocks: 2,
            radar_heads: 2,
            c_fuse: 16,
            se_reduction: 4,
            unet_depth: 3,
            seed: 7,
        }
    }

    pub fn voxel_grid(&self) -> Result<GridSpec, GeomError> {
        self.internal
            .with_z(self.voxel_z.0, self.voxel_z.1, self.voxel_z.2)
    }

    pub fn z_layers(&self) -> usize {
        self.voxel_grid().map(|g| g.nz()).unwrap_or(0)
    }

    /// Channels of the lifted camera BEV map: z layers folded into channels.
    pub fn lift_channels(&self) -> usize {
        self.z_layers() * self.c_img
    }

    /// Radar point channels: x, y, z, radial velocity, rcs + temporal code.
    pub fn radar_in_channels(&self) -> usize {
        5 + match self.temporal {
            TemporalEncoding::Ordinal => 1,
            TemporalEncoding::OneHot => self.sweeps,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, w) = self.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ConfigError(alloc::format!(
                "image size {h}x{w} must be divisible by 32"
            )));
        }
        if self.c_img % self.msda_heads != 0 {
            return Err(ConfigError(alloc::format!(
                "c_img {} must be divisible by msda_heads {}",
                self.c_img,
                self.msda_heads
            )));
        }
        if self.c_pt % self.radar_heads != 0 {
            return Err(ConfigError(String::from(
                "c_pt must be divisible by radar_heads",
            )));
        }
        if self.radar_window == 0 {
            return Err(ConfigError(String::from("radar window must be >= 1")));
        }
        let (bx, by) = (self.internal.nx(), self.internal.ny());
        if bx % 4 != 0 || by % 4 != 0 {
            return Err(ConfigError(alloc::format!(
                "internal grid {bx}x{by} must be divisible by 4 for the radar pyramid"
            )));
        }
        let div = 1usize << self.unet_depth;
        if bx % div != 0 || by % div != 0 {
            return Err(ConfigError(alloc::format!(
                "internal grid {bx}x{by} must be divisible by 2^{} for the decoder",
                self.unet_depth
            )));
        }
        if self.c_fuse % self.se_reduction != 0 {
            return Err(ConfigError(String::from(
                "se_reduction must divide c_fuse",
            )));
        }
        if self.sweeps == 0 {
            return Err(ConfigError(String::from("sweeps must be >= 1")));
        }
        self.voxel_grid().map_err(|e| ConfigError(alloc::format!("{e}")))?;
        Ok(())
    }
}

/// Image/BEV augmentation magnitudes. Angles in radians, zoom/scale as
/// multiplicative factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub enabled: bool,
    pub image_flip_prob: f64,
    pub image_zoom: (f64, f64),
    pub image_rot: f64,
    pub bev_flip_prob: f64,
    pub bev_rot: f64,
    pub bev_scale: (f64, f64),
}

impl AugConfig {
    pub fn desk_default() -> Self {
        AugConfig {
            enabled: true,
            image_flip_prob: 0.5,
            image_zoom: (0.9, 1.1),
            image_rot: 5.0_f64 * core::f64::consts::PI / 180.0,
            bev_flip_prob: 0.5,
            bev_rot: 22.5_f64 * core::f64::consts::PI / 180.0,
            bev_scale: (0.95, 1.05),
        }
    }

    pub fn disabled() -> Self {
        AugConfig {
            enabled: false,
            image_flip_prob: 0.0,
            image_zoom: (1.0, 1.0),
            image_rot: 0.0,
            bev_flip_prob: 0.0,
            bev_rot: 0.0,
            bev_scale: (1.0, 1.0),
        }
    }
}

/// Optimization schedule. Defaults follow the training recipe: AdamW at a
/// 3e-4 peak with one warm-up epoch, cosine decay to zero, weight decay 0.01.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer-step cap; 0 means no cap.
    pub max_steps: usize,
    pub effective_batch: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub aug: AugConfig,
    /// Probability of dropping the whole radar cloud of a training sample.
    pub radar_drop_prob: f64,
    /// Train without the radar branch entirely (camera-only ablation).
    pub no_radar: bool,
    /// Fraction of the dataset (from the end) held out for validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            epochs: 40,
            max_steps: 0,
            effective_batch: 32,
            peak_lr: 3e-4,
            weight_decay: 0.01,
            warmup_epochs: 1,
            seed: 1,
            aug: AugConfig::desk_default(),
            radar_drop_prob: 0.0,
            no_radar: false,
            val_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}
