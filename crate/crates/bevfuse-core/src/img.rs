//! Image branch: strided convolutional encoder with stride-8/16/32 taps, an
//! FPN merge to a common width, multi-scale deformable self-attention over
//! the pyramid, and the geometric lift onto the BEV grid.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::cfg::ModelConfig;
use crate::diff::{Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::geom::{project_voxels, CameraCalibration, GeomError};
use crate::nn;

/// Spatial sizes of the three pyramid levels for a given image size.
pub fn level_sizes(image_size: (usize, usize)) -> [(usize, usize); 3] {
    let (h, w) = image_size;
    [(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)]
}

pub fn register_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let s = cfg.stem_width;
    nn::register_conv_norm_relu(store, "img.stem.1", s, 3, 3, rng);
    nn::register_conv_norm_relu(store, "img.stem.2", s, s, 3, rng);
    let mut cin = s;
    for (i, &width) in cfg.stage_widths.iter().enumerate() {
        nn::register_conv_norm_relu(store, &alloc::format!("img.s{i}.down"), width, cin, 3, rng);
        nn::register_conv_norm_relu(store, &alloc::format!("img.s{i}.keep"), width, width, 3, rng);
        cin = width;
    }
}

/// Encode one camera image ([3,H,W]) into the three tapped levels.
pub fn encode_image(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<[NodeId; 3], GraphError> {
    let s = g.value(image).shape();
    if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != cfg.image_size {
        return Err(GraphError::Shape(alloc::format!(
            "image shape {:?} does not match configured 3x{}x{}",
            s,
            cfg.image_size.0,
            cfg.image_size.1
        )));
    }
    let mut x = nn::conv_norm_relu(g, store, "img.stem.1", image, 2, 1)?;
    x = nn::conv_norm_relu(g, store, "img.stem.2", x, 2, 1)?;
    let mut taps = Vec::with_capacity(3);
    for i in 0..3 {
        x = nn::conv_norm_relu(g, store, &alloc::format!("img.s{i}.down"), x, 2, 1)?;
        x = nn::conv_norm_relu(g, store, &alloc::format!("img.s{i}.keep"), x, 1, 1)?;
        taps.push(x);
    }
    Ok([taps[0], taps[1], taps[2]])
}

pub fn register_fpn(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    for (i, &width) in cfg.stage_widths.iter().enumerate() {
        nn::register_conv(store, &alloc::format!("img.fpn.lat{i}"), cfg.c_img, width, 1, rng);
        nn::register_conv(store, &alloc::format!("img.fpn.out{i}"), cfg.c_img, cfg.c_img, 3, rng);
    }
}

/// Top-down pathway: 1x1 laterals, nearest-upsample + add, 3x3 output convs.
pub fn fpn_fuse(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[NodeId; 3],
) -> Result<[NodeId; 3], GraphError> {
    let lat2 = nn::conv(g, store, "img.fpn.lat2", levels[2], 1, 0)?;
    let lat1 = nn::conv(g, store, "img.fpn.lat1", levels[1], 1, 0)?;
    let lat0 = nn::conv(g, store, "img.fpn.lat0", levels[0], 1, 0)?;
    let up2 = g.upsample2x(lat2)?;
    let mid1 = g.add(lat1, up2)?;
    let up1 = g.upsample2x(mid1)?;
    let mid0 = g.add(lat0, up1)?;
    let out0 = nn::conv(g, store, "img.fpn.out0", mid0, 1, 1)?;
    let out1 = nn::conv(g, store, "img.fpn.out1", mid1, 1, 1)?;
    let out2 = nn::conv(g, store, "img.fpn.out2", lat2, 1, 1)?;
    Ok([out0, out1, out2])
}

pub fn register_msda(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.c_img;
    let hlp = cfg.msda_heads * 3 * cfg.msda_points;
    nn::register_linear(store, "img.msda.value", c, c, rng);
    nn::register_linear(store, "img.msda.offset", hlp * 2, c, rng);
    nn::register_linear(store, "img.msda.weight", hlp, c, rng);
    nn::register_linear(store, "img.msda.out", c, c, rng);
}

/// Reference pixel coordinates: each query's normalized location carried to
/// every level, repeated per sampling point. Rows are (q major, p minor).
fn reference_points(
    sizes: &[(usize, usize); 3],
    target: (usize, usize),
    points: usize,
) -> Tensor {
    let total_q: usize = sizes.iter().map(|(h, w)| h * w).sum();
    let mut data = Vec::with_capacity(total_q * points * 2);
    let (th, tw) = target;
    for (h, w) in sizes {
        for r in 0..*h {
            for c in 0..*w {
                let nu = (c as f64 + 0.5) / *w as f64;
                let nv = (r as f64 + 0.5) / *h as f64;
                let u = nu * tw as f64 - 0.5;
                let v = nv * th as f64 - 0.5;
                for _ in 0..points {
                    data.push(u);
                    data.push(v);
                }
            }
        }
    }
    Tensor::from_vec(&[total_q * points, 2], data).expect("sized above")
}

/// Deformable self-attention across the pyramid. Every location of every
/// level is a query; each query samples `points` learned offsets per head per
/// level, softmax-weights them over (level x point), and adds the projected
/// result back onto its feature (residual).
pub fn msda_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    levels: &[NodeId; 3],
) -> Result<[NodeId; 3], GraphError> {
    let c = cfg.c_img;
    let heads = cfg.msda_heads;
    let points = cfg.msda_points;
    let ch = c / heads;
    let num_levels = 3usize;

    let sizes: [(usize, usize); 3] = [
        {
            let s = g.value(levels[0]).shape();
            (s[1], s[2])
        },
        {
            let s = g.value(levels[1]).shape();
            (s[1], s[2])
        },
        {
            let s = g.value(levels[2]).shape();
            (s[1], s[2])
        },
    ];
    let level_q: Vec<usize> = sizes.iter().map(|(h, w)| h * w).collect();
    let total_q: usize = level_q.iter().sum();

    // tokens per level and the concatenated query set
    let mut tokens = Vec::with_capacity(num_levels);
    for &lvl in levels.iter() {
        tokens.push(nn::map_to_tokens(g, lvl)?);
    }
    let queries = g.concat(&tokens, 0)?; // [Q, C]

    // per-level value maps, split per head along channels
    let mut head_maps = Vec::with_capacity(num_levels);
    for (m, &tok) in tokens.iter().enumerate() {
        let values = nn::linear(g, store, "img.msda.value", tok)?;
        let vmap = nn::tokens_to_map(g, values, sizes[m].0, sizes[m].1)?;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            per_head.push(g.slice(vmap, 0, h * ch, ch)?);
        }
        head_maps.push(per_head);
    }

    // offsets [Q, H, L, P, 2] and attention weights softmaxed over (L x P)
    let offsets = nn::linear(g, store, "img.msda.offset", queries)?;
    let offsets = g.reshape(offsets, &[total_q, heads, num_levels, points, 2])?;
    let wraw = nn::linear(g, store, "img.msda.weight", queries)?;
    let wrows = g.reshape(wraw, &[total_q * heads, num_levels * points])?;
    let wsoft = g.softmax(wrows, 1)?;
    let weights = g.reshape(wsoft, &[total_q, heads, num_levels, points])?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut acc: Option<NodeId> = None;
        for m in 0..num_levels {
            let off_hm = g.slice(offsets, 1, h, 1)?;
            let off_hm = g.slice(off_hm, 2, m, 1)?;
            let off_hm = g.reshape(off_hm, &[total_q * points, 2])?;
            let refs = g.constant(reference_points(&sizes, sizes[m], points));
            let coords = g.add(off_hm, refs)?;
            let sampled = g.bilinear_sample(head_maps[m][h], coords)?; // [Q*P, ch]
            let sampled = g.reshape(sampled, &[total_q, points, ch])?;
            let w_hm = g.slice(weights, 1, h, 1)?;
            let w_hm = g.slice(w_hm, 2, m, 1)?;
            let w_hm = g.reshape(w_hm, &[total_q, points, 1])?;
            let weighted = g.mul(sampled, w_hm)?;
            let summed = g.sum_axis(weighted, 1)?; // [Q, ch]
            acc = Some(match acc {
                Some(a) => g.add(a, summed)?,
                None => summed,
            });
        }
        head_outputs.push(acc.expect("levels nonempty"));
    }
    let merged = g.concat(&head_outputs, 1)?; // [Q, C]
    let projected = nn::linear(g, store, "img.msda.out", merged)?;
    let with_residual = g.add(queries, projected)?;

    // split queries back into their levels
    let mut outs = Vec::with_capacity(num_levels);
    let mut offset = 0;
    for m in 0..num_levels {
        let part = g.slice(with_residual, 0, offset, level_q[m])?;
        outs.push(nn::tokens_to_map(g, part, sizes[m].0, sizes[m].1)?);
        offset += level_q[m];
    }
    Ok([outs[0], outs[1], outs[2]])
}

/// Lift per-camera features (finest pyramid level) onto the BEV grid by
/// projecting voxel centers, bilinear-sampling valid projections and
/// averaging over the cameras that see each voxel. The vertical dimension is
/// folded into channels: output is [Z*C, nx, ny].
pub fn lift_to_bev(
    g: &mut Graph,
    cfg: &ModelConfig,
    per_cam_features: &[NodeId],
    calibs: &[CameraCalibration],
) -> Result<NodeId, GeomError> {
    if per_cam_features.is_empty() || per_cam_features.len() != calibs.len() {
        return Err(GeomError::BadCalibration(alloc::string::String::from(
            "need one calibration per camera feature map and at least one camera",
        )));
    }
    let voxel_grid = cfg.voxel_grid()?;
    let (nx, ny, nz) = (voxel_grid.nx(), voxel_grid.ny(), voxel_grid.nz());
    let n_vox = nx * ny * nz;
    let c = g.value(per_cam_features[0]).shape()[0];
    let feat_size = {
        let s = g.value(per_cam_features[0]).shape();
        (s[1], s[2])
    };
    // feature maps live at the finest (x8) level of the image
    let scale_u = feat_size.1 as f64 / cfg.image_size.1 as f64;
    let scale_v = feat_size.0 as f64 / cfg.image_size.0 as f64;

    let mut counts = vec![0.0f64; n_vox];
    let mut summed: Option<NodeId> = None;
    for (feat, calib) in per_cam_features.iter().zip(calibs) {
        let proj = project_voxels(&voxel_grid, calib)?;
        let mut coords = Vec::with_capacity(n_vox * 2);
        let mut mask = Vec::with_capacity(n_vox);
        for (pix, &ok) in proj.pixels.iter().zip(&proj.valid) {
            // pixel centers map to feature centers under pure downscaling
            coords.push((pix[0] + 0.5) * scale_u - 0.5);
            coords.push((pix[1] + 0.5) * scale_v - 0.5);
            mask.push(if ok { 1.0 } else { 0.0 });
        }
        for (cnt, m) in counts.iter_mut().zip(&mask) {
            *cnt += m;
        }
        let coords = g.constant(Tensor::from_vec(&[n_vox, 2], coords)?);
        let mask = g.constant(Tensor::from_vec(&[n_vox, 1], mask)?);
        let sampled = g.bilinear_sample(*feat, coords)?;
        let masked = g.mul(sampled, mask)?;
        summed = Some(match summed {
            Some(acc) => g.add(acc, masked)?,
            None => masked,
        });
    }
    let summed = summed.expect("at least one camera");
    // average over however many cameras saw each voxel
    let recip: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
        .collect();
    let recip = g.constant(Tensor::from_vec(&[n_vox, 1], recip)?);
    let averaged = g.mul(summed, recip)?; // [n_vox, C], voxel order (z, x, y)
    let stacked = g.reshape(averaged, &[nz, nx, ny, c])?;
    let chans = g.permute(stacked, &[0, 3, 1, 2])?;
    Ok(g.reshape(chans, &[nz * c, nx, ny])?)
}

pub fn register_image_branch(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    register_encoder(store, cfg, rng);
    register_fpn(store, cfg, rng);
    register_msda(store, cfg, rng);
}

/// Full image branch for one camera set: encode, FPN, deformable attention,
/// lift. Returns the [Z*C, nx, ny] camera BEV feature map.
pub fn image_branch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    images: &[NodeId],
    calibs: &[CameraCalibration],
) -> Result<NodeId, GeomError> {
    let mut finest = Vec::with_capacity(images.len());
    for &img in images {
        let levels = encode_image(g, store, cfg, img)?;
        let fused = fpn_fuse(g, store, &levels)?;
        let attended = msda_self_attention(g, store, cfg, &fused)?;
        finest.push(attended[0]);
    }
    lift_to_bev(g, cfg, &finest, calibs)
}
