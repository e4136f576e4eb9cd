//! Fusion network: adaptive multi-modal fusion with SE recalibration, the
//! attention-gated U-Net decoder and the segmentation head.

use alloc::vec::Vec;

use rand::Rng;

use crate::cfg::ModelConfig;
use crate::diff::{Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::geom::{grid_resample, GeomError};
use crate::nn;

pub fn register_fusion(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    cam_channels: usize,
    rad_channels: usize,
    rng: &mut impl Rng,
) {
    let c = cfg.c_fuse;
    nn::register_double_conv(store, "fus.cam", cam_channels, c, rng);
    nn::register_double_conv(store, "fus.rad", rad_channels, c, rng);
    nn::register_linear(store, "fus.w1", c, c, rng);
    nn::register_linear(store, "fus.w2", 1, c, rng);
    nn::register_se(store, "fus.se", c, cfg.se_reduction, rng);
}

/// Intermediate nodes of the adaptive fusion, exposed for inspection.
pub struct FusionNodes {
    /// Per-modality features after their double conv blocks, at C channels.
    pub mapped: [NodeId; 2],
    /// Modality weights, shape [1, 2], summing to one.
    pub omega: NodeId,
    /// The weighted sum before SE recalibration.
    pub weighted: NodeId,
    /// Final fused map after the SE channel gate.
    pub fused: NodeId,
}

/// Adaptive fusion of the camera and radar BEV maps: per-modality conv block
/// to a common width, a shared scoring MLP on each modality's pooled
/// features whose concatenated logits are softmaxed into omega, weighted
/// sum, SE gate. The shared scorer makes omega exactly (0.5, 0.5) when both
/// modalities present identical features. `forced_omega` bypasses the weight
/// head with fixed weights.
pub fn adaptive_fuse(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    f_cam: NodeId,
    f_rad: NodeId,
    forced_omega: Option<[f64; 2]>,
) -> Result<FusionNodes, GraphError> {
    let sc = g.value(f_cam).shape().to_vec();
    let sr = g.value(f_rad).shape().to_vec();
    if sc[1..] != sr[1..] {
        return Err(GraphError::Shape(alloc::format!(
            "modal maps must share spatial size, got {:?} vs {:?}",
            sc,
            sr
        )));
    }
    let c = cfg.c_fuse;
    let a = nn::double_conv(g, store, "fus.cam", f_cam)?;
    let b = nn::double_conv(g, store, "fus.rad", f_rad)?;

    let omega = match forced_omega {
        Some(w) => g.constant(Tensor::from_vec(&[1, 2], alloc::vec![w[0], w[1]])?),
        None => {
            let mut scores = Vec::with_capacity(2);
            for &mapped in &[a, b] {
                let pooled = g.global_avg_pool(mapped)?;
                let row = g.reshape(pooled, &[1, c])?;
                let h = nn::linear(g, store, "fus.w1", row)?;
                let h = g.relu(h);
                scores.push(nn::linear(g, store, "fus.w2", h)?);
            }
            let logits = g.concat(&scores, 1)?;
            g.softmax(logits, 1)?
        }
    };
    let w_cam = g.slice(omega, 1, 0, 1)?;
    let w_cam = g.reshape(w_cam, &[1])?;
    let w_rad = g.slice(omega, 1, 1, 1)?;
    let w_rad = g.reshape(w_rad, &[1])?;
    let a_w = g.mul(a, w_cam)?;
    let b_w = g.mul(b, w_rad)?;
    let weighted = g.add(a_w, b_w)?;
    let fused = nn::se_scale(g, store, "fus.se", weighted)?;
    Ok(FusionNodes {
        mapped: [a, b],
        omega,
        weighted,
        fused,
    })
}

fn gate_channels(c_e: usize) -> usize {
    (c_e / 2).max(1)
}

pub fn register_attention_gate(
    store: &mut ParamStore,
    name: &str,
    c_e: usize,
    c_d: usize,
    rng: &mut impl Rng,
) {
    let ci = gate_channels(c_e);
    nn::register_conv(store, &alloc::format!("{name}.e"), ci, c_e, 1, rng);
    nn::register_conv(store, &alloc::format!("{name}.d"), ci, c_d, 1, rng);
    nn::register_conv(store, &alloc::format!("{name}.p"), 1, ci, 1, rng);
}

/// Attention gate on a skip connection: psi = sigmoid(conv(relu(conv(x_d) +
/// conv(x_e)))), returned as the gated skip x_e * psi together with psi.
pub fn attention_gate(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x_e: NodeId,
    x_d: NodeId,
) -> Result<(NodeId, NodeId), GraphError> {
    let from_d = nn::conv(g, store, &alloc::format!("{name}.d"), x_d, 1, 0)?;
    let from_e = nn::conv(g, store, &alloc::format!("{name}.e"), x_e, 1, 0)?;
    let pre = g.add(from_d, from_e)?;
    let act = g.relu(pre);
    let psi_logits = nn::conv(g, store, &alloc::format!("{name}.p"), act, 1, 0)?;
    let psi = g.sigmoid(psi_logits); // [1, H, W], broadcast over channels
    let gated = g.mul(x_e, psi)?;
    Ok((gated, psi))
}

pub fn register_unet(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.c_fuse;
    nn::register_double_conv(store, "unet.e0", c, c, rng);
    nn::register_conv_norm_relu(store, "unet.down1", 2 * c, c, 3, rng);
    nn::register_double_conv(store, "unet.e1", 2 * c, 2 * c, rng);
    nn::register_conv_norm_relu(store, "unet.down2", 4 * c, 2 * c, 3, rng);
    nn::register_double_conv(store, "unet.e2", 4 * c, 4 * c, rng);
    nn::register_conv_norm_relu(store, "unet.down3", 8 * c, 4 * c, 3, rng);
    nn::register_double_conv(store, "unet.bott", 8 * c, 8 * c, rng);

    nn::register_conv(store, "unet.up2", 4 * c, 8 * c, 3, rng);
    register_attention_gate(store, "unet.g2", 4 * c, 4 * c, rng);
    nn::register_double_conv(store, "unet.dec2", 8 * c, 4 * c, rng);
    nn::register_conv(store, "unet.up1", 2 * c, 4 * c, 3, rng);
    register_attention_gate(store, "unet.g1", 2 * c, 2 * c, rng);
    nn::register_double_conv(store, "unet.dec1", 4 * c, 2 * c, rng);
    nn::register_conv(store, "unet.up0", c, 2 * c, 3, rng);
    register_attention_gate(store, "unet.g0", c, c, rng);
    nn::register_double_conv(store, "unet.dec0", 2 * c, c, rng);
}

/// U-Net with three stride-2 encoder stages, a bottleneck and three decoder
/// stages whose skips pass through attention gates. Output keeps the input
/// resolution and channel count.
pub fn unet_decode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let s = g.value(x).shape();
    let div = 1usize << cfg.unet_depth;
    if s[1] % div != 0 || s[2] % div != 0 {
        return Err(GraphError::Shape(alloc::format!(
            "decoder needs spatial sizes divisible by {div}, got {}x{}",
            s[1],
            s[2]
        )));
    }
    let e0 = nn::double_conv(g, store, "unet.e0", x)?;
    let d1 = nn::conv_norm_relu(g, store, "unet.down1", e0, 2, 1)?;
    let e1 = nn::double_conv(g, store, "unet.e1", d1)?;
    let d2 = nn::conv_norm_relu(g, store, "unet.down2", e1, 2, 1)?;
    let e2 = nn::double_conv(g, store, "unet.e2", d2)?;
    let d3 = nn::conv_norm_relu(g, store, "unet.down3", e2, 2, 1)?;
    let bott = nn::double_conv(g, store, "unet.bott", d3)?;

    let mut up = g.upsample2x(bott)?;
    up = nn::conv(g, store, "unet.up2", up, 1, 1)?;
    let (gated2, _) = attention_gate(g, store, "unet.g2", e2, up)?;
    let cat2 = g.concat(&[up, gated2], 0)?;
    let dec2 = nn::double_conv(g, store, "unet.dec2", cat2)?;

    let mut up = g.upsample2x(dec2)?;
    up = nn::conv(g, store, "unet.up1", up, 1, 1)?;
    let (gated1, _) = attention_gate(g, store, "unet.g1", e1, up)?;
    let cat1 = g.concat(&[up, gated1], 0)?;
    let dec1 = nn::double_conv(g, store, "unet.dec1", cat1)?;

    let mut up = g.upsample2x(dec1)?;
    up = nn::conv(g, store, "unet.up0", up, 1, 1)?;
    let (gated0, _) = attention_gate(g, store, "unet.g0", e0, up)?;
    let cat0 = g.concat(&[up, gated0], 0)?;
    nn::double_conv(g, store, "unet.dec0", cat0)
}

pub fn register_segmentation_head(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.c_fuse;
    nn::register_conv_norm_relu(store, "head.c1", c, c, 3, rng);
    nn::register_conv(store, "head.c2", 1, c, 3, rng);
    nn::register_conv(store, "head.aux", 1, c, 1, rng);
}

/// Segmentation head: resample the refined map from the internal grid to the
/// output grid, then a double conv block down to M = 1 logit channel. Logits
/// stay raw; sigmoid lives in the losses and metrics.
pub fn segmentation_head(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    refined: NodeId,
) -> Result<NodeId, GeomError> {
    let resampled = grid_resample(g, refined, &cfg.internal, &cfg.output)?;
    let h = nn::conv_norm_relu(g, store, "head.c1", resampled, 1, 1)?;
    Ok(nn::conv(g, store, "head.c2", h, 1, 1)?)
}

/// Auxiliary 1x1 logit head on the decoder output at the internal grid.
pub fn aux_head(
    g: &mut Graph,
    store: &ParamStore,
    refined: NodeId,
) -> Result<NodeId, GraphError> {
    nn::conv(g, store, "head.aux", refined, 1, 0)
}
