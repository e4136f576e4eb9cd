//! End-to-end model: image branch, radar branch, adaptive fusion, decoder
//! and heads assembled on one graph, with loss wiring for training.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfg::{ConfigError, ModelConfig};
use crate::diff::{Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::fusion;
use crate::geom::{CameraCalibration, GeomError};
use crate::img;
use crate::loss::{total_loss_node, LossWeights};
use crate::radar::{self, RadarError, RadarPointCloud};

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Config(ConfigError),
    Graph(GraphError),
    Geometry(GeomError),
    Radar(RadarError),
    BadSample(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(e) => write!(f, "{e}"),
            ModelError::Graph(e) => write!(f, "{e}"),
            ModelError::Geometry(e) => write!(f, "{e}"),
            ModelError::Radar(e) => write!(f, "{e}"),
            ModelError::BadSample(msg) => write!(f, "bad sample: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<ConfigError> for ModelError {
    fn from(e: ConfigError) -> Self {
        ModelError::Config(e)
    }
}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

impl From<GeomError> for ModelError {
    fn from(e: GeomError) -> Self {
        ModelError::Geometry(e)
    }
}

impl From<RadarError> for ModelError {
    fn from(e: RadarError) -> Self {
        ModelError::Radar(e)
    }
}

/// One training/evaluation sample: per-camera images and calibrations, the
/// accumulated radar cloud, and rasterized supervision on both grids.
#[derive(Clone, Debug)]
pub struct Sample {
    pub images: Vec<Tensor>,
    pub calibs: Vec<CameraCalibration>,
    pub cloud: RadarPointCloud,
    /// Occupancy target on the output grid, [1, ox, oy].
    pub gt: Tensor,
    /// Occupancy target on the internal grid for the auxiliary head.
    pub aux_gt: Tensor,
    /// Low-visibility ignore mask on the output grid.
    pub ignore: Tensor,
}

pub struct ForwardNodes {
    pub main_logits: NodeId,
    pub aux_logits: NodeId,
    pub omega: NodeId,
}

pub struct SegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl SegModel {
    /// Validates the configuration and initializes every parameter from the
    /// seeded fan-in uniform scheme.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        img::register_image_branch(&mut store, &cfg, &mut rng);
        radar::register_radar_branch(&mut store, &cfg, &mut rng);
        fusion::register_fusion(&mut store, &cfg, cfg.lift_channels(), cfg.c_pt, &mut rng);
        fusion::register_unet(&mut store, &cfg, &mut rng);
        fusion::register_segmentation_head(&mut store, &cfg, &mut rng);
        Ok(SegModel { cfg, store })
    }

    /// Build the forward pass onto `g`. `cloud = None` ablates the radar
    /// branch entirely (camera-only model); an empty cloud keeps the branch
    /// with an all-zero scattered map.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        images: &[Tensor],
        calibs: &[CameraCalibration],
        cloud: Option<&RadarPointCloud>,
    ) -> Result<ForwardNodes, ModelError> {
        if images.is_empty() || images.len() != calibs.len() {
            return Err(ModelError::BadSample(String::from(
                "need one calibration per image and at least one camera",
            )));
        }
        let img_nodes: Vec<NodeId> = images.iter().map(|t| g.constant(t.clone())).collect();
        let f_cam = img::image_branch(g, &self.store, &self.cfg, &img_nodes, calibs)?;
        let f_rad = match cloud {
            Some(c) => radar::radar_branch(g, &self.store, &self.cfg, c)?,
            None => g.constant(Tensor::zeros(&[
                self.cfg.c_pt,
                self.cfg.internal.nx(),
                self.cfg.internal.ny(),
            ])),
        };
        let fused = fusion::adaptive_fuse(g, &self.store, &self.cfg, f_cam, f_rad, None)?;
        let refined = fusion::unet_decode(g, &self.store, &self.cfg, fused.fused)?;
        let main_logits = fusion::segmentation_head(g, &self.store, &self.cfg, refined)?;
        let aux_logits = fusion::aux_head(g, &self.store, refined)?;
        Ok(ForwardNodes {
            main_logits,
            aux_logits,
            omega: fused.omega,
        })
    }

    /// Forward + weighted loss for one sample. Returns the graph with
    /// "loss", "logits" and "aux" outputs marked.
    pub fn build_training_graph(
        &self,
        sample: &Sample,
        weights: &LossWeights,
        no_radar: bool,
    ) -> Result<Graph, ModelError> {
        let mut g = Graph::new();
        let cloud = if no_radar { None } else { Some(&sample.cloud) };
        let nodes = self.build_forward(&mut g, &sample.images, &sample.calibs, cloud)?;
        let loss = total_loss_node(
            &mut g,
            nodes.main_logits,
            nodes.aux_logits,
            &sample.gt,
            &sample.aux_gt,
            weights,
        )?;
        g.mark_output("loss", loss);
        g.mark_output("logits", nodes.main_logits);
        g.mark_output("aux", nodes.aux_logits);
        Ok(g)
    }

    /// Inference: main-head logits for one sample.
    pub fn infer(
        &self,
        images: &[Tensor],
        calibs: &[CameraCalibration],
        cloud: Option<&RadarPointCloud>,
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let nodes = self.build_forward(&mut g, images, calibs, cloud)?;
        g.run_forward()?;
        Ok(g.value(nodes.main_logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::ModelConfig;
    use crate::raster::rasterize_gt;
    use crate::scene::{generate_scene, SceneParams};
    use crate::sensor::{render_camera, simulate_radar, RadarSimParams, RenderOptions};
    use alloc::collections::BTreeMap;

    fn micro_sample(seed: u64, cfg: &ModelConfig) -> Sample {
        let params = SceneParams {
            n_vehicles: 3,
            half_extent: 18.0,
            ..SceneParams::desk_default()
        };
        let scene = generate_scene(seed, &params).unwrap();
        let images: Vec<Tensor> = scene
            .cameras
            .iter()
            .map(|c| render_camera(&scene, c, RenderOptions::default()).to_tensor())
            .collect();
        let sweeps = simulate_radar(&scene, cfg.sweeps, &RadarSimParams::desk_default(), seed);
        let cloud = crate::radar::accumulate_sweeps(&sweeps).unwrap();
        let out_gt = rasterize_gt(&scene, &cfg.output);
        let aux_gt = rasterize_gt(&scene, &cfg.internal);
        Sample {
            images,
            calibs: scene.cameras.clone(),
            cloud,
            gt: out_gt.gt,
            aux_gt: aux_gt.gt,
            ignore: out_gt.ignore,
        }
    }

    #[test]
    fn forward_produces_expected_shapes_and_finite_outputs() {
        let cfg = ModelConfig::micro();
        let model = SegModel::new(cfg.clone()).unwrap();
        let sample = micro_sample(100, &cfg);
        let mut g = Graph::new();
        let nodes = model
            .build_forward(&mut g, &sample.images, &sample.calibs, Some(&sample.cloud))
            .unwrap();
        g.run_forward().unwrap();
        assert_eq!(
            g.value(nodes.main_logits).shape(),
            &[1, cfg.output.nx(), cfg.output.ny()]
        );
        assert_eq!(
            g.value(nodes.aux_logits).shape(),
            &[1, cfg.internal.nx(), cfg.internal.ny()]
        );
        assert!(g.value(nodes.main_logits).all_finite());
        let omega = g.value(nodes.omega).data();
        assert!((omega[0] + omega[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_graph_backward_reaches_every_branch() {
        let cfg = ModelConfig::micro();
        let model = SegModel::new(cfg.clone()).unwrap();
        let sample = micro_sample(101, &cfg);
        let mut g = model
            .build_training_graph(&sample, &LossWeights::default(), false)
            .unwrap();
        g.run_forward().unwrap();
        let mut seeds = BTreeMap::new();
        seeds.insert(String::from("loss"), Tensor::scalar(1.0));
        let grads = g.backward(&seeds).unwrap();
        // gradient touches image encoder, radar encoder, fusion, decoder, head
        for probe in [
            "img.stem.1.w",
            "img.msda.offset.w",
            "rad.embed.1.w",
            "rad.pyr.out.w",
            "fus.w2.w",
            "unet.g0.p.w",
            "head.c2.w",
        ] {
            let g = grads.params.get(probe).unwrap_or_else(|| panic!("missing grad {probe}"));
            assert!(g.all_finite());
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "gradient of {probe} is identically zero"
            );
        }
    }

    #[test]
    fn camera_only_ablation_runs_without_radar_parameters() {
        let cfg = ModelConfig::micro();
        let model = SegModel::new(cfg.clone()).unwrap();
        let sample = micro_sample(102, &cfg);
        let mut g = model
            .build_training_graph(&sample, &LossWeights::default(), true)
            .unwrap();
        g.run_forward().unwrap();
        let mut seeds = BTreeMap::new();
        seeds.insert(String::from("loss"), Tensor::scalar(1.0));
        let grads = g.backward(&seeds).unwrap();
        assert!(!grads.params.contains_key("rad.embed.1.w"));
        assert!(grads.params.contains_key("img.stem.1.w"));
    }

    #[test]
    fn initialization_is_deterministic_in_the_seed() {
        let cfg = ModelConfig::micro();
        let a = SegModel::new(cfg.clone()).unwrap();
        let b = SegModel::new(cfg).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }
}
