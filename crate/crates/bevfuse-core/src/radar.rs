//! Radar branch: sweep accumulation with temporal encoding, Morton-order
//! point serialization, a windowed self-attention point encoder, scatter
//! addition onto the BEV grid and pyramid aggregation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::Rng;

use crate::cfg::{ModelConfig, TemporalEncoding};
use crate::diff::{Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::geom::{rigid_inverse, GridSpec};
use crate::nn;

#[derive(Clone, Debug, PartialEq)]
pub enum RadarError {
    NonRigidPose(String),
    Graph(GraphError),
}

impl fmt::Display for RadarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadarError::NonRigidPose(msg) => write!(f, "non-rigid pose: {msg}"),
            RadarError::Graph(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RadarError {}

impl From<GraphError> for RadarError {
    fn from(e: GraphError) -> Self {
        RadarError::Graph(e)
    }
}

/// One radar return in some ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub position: Vector3<f64>,
    pub radial_velocity: f64,
    pub rcs: f64,
}

/// Accumulated multi-sweep cloud in the reference (newest) ego frame.
/// `sweep_index` runs 0 (oldest) to `sweep_count - 1` (newest).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
    pub sweep_index: Vec<usize>,
    pub sweep_count: usize,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One raw sweep: points in that sweep's ego frame plus the world-from-ego
/// pose at acquisition time.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarSweep {
    pub points: Vec<RadarPoint>,
    pub world_from_ego: Matrix4<f64>,
}

fn check_rigid(m: &Matrix4<f64>) -> Result<(), RadarError> {
    let r = m.fixed_view::<3, 3>(0, 0);
    let rr = r.transpose() * r;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            if (rr[(i, j)] - target).abs() > 1e-6 {
                return Err(RadarError::NonRigidPose(alloc::format!(
                    "rotation is not orthonormal (R^T R deviates by {:.2e})",
                    (rr[(i, j)] - target).abs()
                )));
            }
        }
    }
    if (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(RadarError::NonRigidPose(String::from(
            "rotation determinant must be +1",
        )));
    }
    Ok(())
}

/// Rigidly carries every sweep into the newest sweep's ego frame and tags
/// points with their sweep index. Sweeps are ordered oldest first.
pub fn accumulate_sweeps(sweeps: &[RadarSweep]) -> Result<RadarPointCloud, RadarError> {
    if sweeps.is_empty() {
        return Err(RadarError::NonRigidPose(String::from(
            "at least one sweep required",
        )));
    }
    for s in sweeps {
        check_rigid(&s.world_from_ego)?;
    }
    let ref_from_world = rigid_inverse(&sweeps.last().expect("nonempty").world_from_ego);
    let mut cloud = RadarPointCloud {
        sweep_count: sweeps.len(),
        ..RadarPointCloud::default()
    };
    for (k, sweep) in sweeps.iter().enumerate() {
        let to_ref = ref_from_world * sweep.world_from_ego;
        for p in &sweep.points {
            let h = to_ref * Vector4::new(p.position.x, p.position.y, p.position.z, 1.0);
            cloud.points.push(RadarPoint {
                position: Vector3::new(h.x, h.y, h.z),
                radial_velocity: p.radial_velocity,
                rcs: p.rcs,
            });
            cloud.sweep_index.push(k);
        }
    }
    Ok(cloud)
}

/// Per-point input features: grid-normalized position, scaled radial
/// velocity and cross-section, then the temporal encoding channels.
pub fn point_features(
    cloud: &RadarPointCloud,
    cfg: &ModelConfig,
) -> Result<Tensor, GraphError> {
    let k = cfg.sweeps;
    let channels = cfg.radar_in_channels();
    let half_x = (cfg.internal.x_max - cfg.internal.x_min) / 2.0;
    let half_y = (cfg.internal.y_max - cfg.internal.y_min) / 2.0;
    let cx = (cfg.internal.x_max + cfg.internal.x_min) / 2.0;
    let cy = (cfg.internal.y_max + cfg.internal.y_min) / 2.0;
    let mut data = Vec::with_capacity(cloud.len() * channels);
    for (p, &sw) in cloud.points.iter().zip(&cloud.sweep_index) {
        data.push((p.position.x - cx) / half_x);
        data.push((p.position.y - cy) / half_y);
        data.push(p.position.z / 4.0);
        data.push(p.radial_velocity / 10.0);
        data.push(p.rcs / 10.0);
        match cfg.temporal {
            TemporalEncoding::Ordinal => {
                // oldest sweep encodes 0; a single sweep is defined as 0
                data.push(if k > 1 { sw as f64 / (k - 1) as f64 } else { 0.0 });
            }
            TemporalEncoding::OneHot => {
                for slot in 0..k {
                    data.push(if slot == sw { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Tensor::from_vec(&[cloud.len(), channels], data)
}

fn interleave_bits(x: u32) -> u64 {
    let mut v = x as u64 & 0xffff;
    v = (v | (v << 8)) & 0x00ff_00ff;
    v = (v | (v << 4)) & 0x0f0f_0f0f;
    v = (v | (v << 2)) & 0x3333_3333;
    v = (v | (v << 1)) & 0x5555_5555;
    v
}

/// Morton (Z-order) code of a quantized cell, x bits in the low positions.
pub fn morton_code(ix: usize, iy: usize) -> u64 {
    interleave_bits(ix as u32) | (interleave_bits(iy as u32) << 1)
}

/// Serialization order: points sorted by the Morton code of their quantized
/// (x, y) cell on `grid`, ties kept in input order. Points outside the grid
/// are clamped to the border cell for ordering purposes only.
pub fn serialize_points(cloud: &RadarPointCloud, grid: &GridSpec) -> Vec<usize> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut keyed: Vec<(u64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let fi = libm::floor((p.position.x - grid.x_min) / grid.resolution);
            let fj = libm::floor((p.position.y - grid.y_min) / grid.resolution);
            let ix = fi.max(0.0).min((nx - 1) as f64) as usize;
            let iy = fj.max(0.0).min((ny - 1) as f64) as usize;
            (morton_code(ix, iy), idx)
        })
        .collect();
    keyed.sort_by_key(|&(code, idx)| (code, idx));
    keyed.into_iter().map(|(_, idx)| idx).collect()
}

pub fn register_point_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.c_pt;
    nn::register_linear(store, "rad.embed.1", c, cfg.radar_in_channels(), rng);
    nn::register_linear(store, "rad.embed.2", c, c, rng);
    for blk in 0..cfg.radar_blocks {
        for proj in ["q", "k", "v", "o"] {
            nn::register_linear(store, &alloc::format!("rad.b{blk}.{proj}"), c, c, rng);
        }
        nn::register_linear(store, &alloc::format!("rad.b{blk}.ff1"), c * 2, c, rng);
        nn::register_linear(store, &alloc::format!("rad.b{blk}.ff2"), c, c * 2, rng);
    }
}

/// Point encoder: per-point MLP embedding, then `radar_blocks` rounds of
/// windowed multi-head self-attention over consecutive windows of the
/// serialized order, each followed by a feed-forward layer (both residual).
/// Returns per-point features in the original point order.
pub fn encode_points(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    features: NodeId,
    order: &[usize],
) -> Result<NodeId, RadarError> {
    let n = g.value(features).shape()[0];
    if order.len() != n {
        return Err(RadarError::Graph(GraphError::Shape(alloc::format!(
            "order has {} entries for {} points",
            order.len(),
            n
        ))));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || core::mem::replace(&mut seen[i], true) {
            return Err(RadarError::Graph(GraphError::Shape(String::from(
                "order is not a permutation",
            ))));
        }
    }
    let c = cfg.c_pt;
    let heads = cfg.radar_heads;
    let ch = c / heads;
    let window = cfg.radar_window;

    let h = nn::linear(g, store, "rad.embed.1", features)?;
    let h = g.relu(h);
    let embedded = nn::linear(g, store, "rad.embed.2", h)?;
    if n == 0 {
        return Ok(embedded);
    }

    // into serialized order
    let mut x = g.gather_rows(embedded, order.to_vec())?;
    let scale = 1.0 / libm::sqrt(ch as f64);
    for blk in 0..cfg.radar_blocks {
        let q = nn::linear(g, store, &alloc::format!("rad.b{blk}.q"), x)?;
        let k = nn::linear(g, store, &alloc::format!("rad.b{blk}.k"), x)?;
        let v = nn::linear(g, store, &alloc::format!("rad.b{blk}.v"), x)?;
        let mut window_outs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = window.min(n - start);
            let mut head_outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qw = g.slice(q, 0, start, len)?;
                let qh = g.slice(qw, 1, head * ch, ch)?;
                let kw = g.slice(k, 0, start, len)?;
                let kh = g.slice(kw, 1, head * ch, ch)?;
                let vw = g.slice(v, 0, start, len)?;
                let vh = g.slice(vw, 1, head * ch, ch)?;
                let kt = g.permute(kh, &[1, 0])?;
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, scale);
                let attn = g.softmax(scaled, 1)?;
                head_outs.push(g.matmul(attn, vh)?);
            }
            window_outs.push(g.concat(&head_outs, 1)?);
            start += len;
        }
        let attended = if window_outs.len() == 1 {
            window_outs[0]
        } else {
            g.concat(&window_outs, 0)?
        };
        let projected = nn::linear(g, store, &alloc::format!("rad.b{blk}.o"), attended)?;
        x = g.add(x, projected)?;
        let f1 = nn::linear(g, store, &alloc::format!("rad.b{blk}.ff1"), x)?;
        let f1 = g.relu(f1);
        let f2 = nn::linear(g, store, &alloc::format!("rad.b{blk}.ff2"), f1)?;
        x = g.add(x, f2)?;
    }

    // back to the original point order
    let mut inverse = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        inverse[idx] = rank;
    }
    Ok(g.gather_rows(x, inverse)?)
}

/// Sum per-point features into their BEV cells. Points outside the grid are
/// dropped; gradient flows equally back to every contributing point.
pub fn scatter_to_bev(
    g: &mut Graph,
    features: NodeId,
    cloud: &RadarPointCloud,
    grid: &GridSpec,
) -> Result<NodeId, GraphError> {
    let cells: Vec<i64> = cloud
        .points
        .iter()
        .map(|p| {
            grid.flat_cell_of(p.position.x, p.position.y)
                .map(|c| c as i64)
                .unwrap_or(-1)
        })
        .collect();
    g.scatter_add(features, cells, grid.nx(), grid.ny())
}

pub fn register_pyramid(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.c_pt;
    nn::register_conv_norm_relu(store, "rad.pyr.s1", c, c, 3, rng);
    nn::register_conv_norm_relu(store, "rad.pyr.d2", c, c, 3, rng);
    nn::register_conv_norm_relu(store, "rad.pyr.s2", c, c, 3, rng);
    nn::register_conv_norm_relu(store, "rad.pyr.d4", c, c, 3, rng);
    nn::register_conv_norm_relu(store, "rad.pyr.s4", c, c, 3, rng);
    nn::register_conv(store, "rad.pyr.out", c, c, 3, rng);
}

/// Pyramid aggregation: process the scattered map at strides 1/2/4, upsample
/// and sum, then a 3x3 output conv. Spatial size is preserved.
pub fn pyramid_aggregate(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let s = g.value(x).shape();
    if s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(GraphError::Shape(alloc::format!(
            "pyramid aggregation needs spatial sizes divisible by 4, got {}x{}",
            s[1],
            s[2]
        )));
    }
    let s1 = nn::conv_norm_relu(g, store, "rad.pyr.s1", x, 1, 1)?;
    let d2 = nn::conv_norm_relu(g, store, "rad.pyr.d2", x, 2, 1)?;
    let s2 = nn::conv_norm_relu(g, store, "rad.pyr.s2", d2, 1, 1)?;
    let d4 = nn::conv_norm_relu(g, store, "rad.pyr.d4", s2, 2, 1)?;
    let s4 = nn::conv_norm_relu(g, store, "rad.pyr.s4", d4, 1, 1)?;
    let u2 = g.upsample2x(s2)?;
    let u4a = g.upsample2x(s4)?;
    let u4 = g.upsample2x(u4a)?;
    let sum = g.add(s1, u2)?;
    let sum = g.add(sum, u4)?;
    nn::conv(g, store, "rad.pyr.out", sum, 1, 1)
}

pub fn register_radar_branch(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    register_point_encoder(store, cfg, rng);
    register_pyramid(store, cfg, rng);
}

/// Full radar branch: serialize, encode, scatter, aggregate. An empty cloud
/// yields an all-zero scattered map fed through the aggregation network with
/// its bias paths intact.
pub fn radar_branch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    cloud: &RadarPointCloud,
) -> Result<NodeId, RadarError> {
    let grid = &cfg.internal;
    let scattered = if cloud.is_empty() {
        g.constant(Tensor::zeros(&[cfg.c_pt, grid.nx(), grid.ny()]))
    } else {
        let feats = g.constant(point_features(cloud, cfg)?);
        let order = serialize_points(cloud, grid);
        let encoded = encode_points(g, store, cfg, feats, &order)?;
        scatter_to_bev(g, encoded, cloud, grid)?
    };
    Ok(pyramid_aggregate(g, store, scattered)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point(x: f64, y: f64, z: f64) -> RadarPoint {
        RadarPoint {
            position: Vector3::new(x, y, z),
            radial_velocity: 0.0,
            rcs: 1.0,
        }
    }

    fn translation(t: Vector3<f64>) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t.x;
        m[(1, 3)] = t.y;
        m[(2, 3)] = t.z;
        m
    }

    fn rand_cloud(n: usize, extent: f64, r: &mut impl Rng) -> RadarPointCloud {
        let mut cloud = RadarPointCloud {
            sweep_count: 3,
            ..RadarPointCloud::default()
        };
        for _ in 0..n {
            cloud.points.push(RadarPoint {
                position: Vector3::new(
                    r.gen_range(-extent..extent),
                    r.gen_range(-extent..extent),
                    r.gen_range(-1.0..2.0),
                ),
                radial_velocity: r.gen_range(-10.0..10.0),
                rcs: r.gen_range(0.0..10.0),
            });
            cloud.sweep_index.push(r.gen_range(0..3));
        }
        cloud
    }

    #[test]
    fn one_hot_encoding_has_exactly_one_active_channel() {
        let mut cfg = ModelConfig::micro();
        cfg.sweeps = 7;
        cfg.temporal = TemporalEncoding::OneHot;
        let sweeps: Vec<RadarSweep> = (0..7)
            .map(|k| RadarSweep {
                points: vec![point(k as f64, 0.0, 0.5)],
                world_from_ego: Matrix4::identity(),
            })
            .collect();
        let cloud = accumulate_sweeps(&sweeps).unwrap();
        let feats = point_features(&cloud, &cfg).unwrap();
        assert_eq!(feats.shape(), &[7, 12]);
        for p in 0..7 {
            let enc = &feats.data()[p * 12 + 5..(p + 1) * 12];
            assert_eq!(enc.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(enc.iter().filter(|&&v| v == 0.0).count(), 6);
            assert_eq!(enc[cloud.sweep_index[p]], 1.0);
        }
    }

    #[test]
    fn ego_motion_compensation_aligns_static_points() {
        // a world point at (10, 2, 0.5) seen from two ego poses
        let world_pt = Vector3::new(10.0, 2.0, 0.5);
        let pose_old = translation(Vector3::new(-3.0, 1.0, 0.0));
        let pose_new = translation(Vector3::new(0.0, 0.0, 0.0));
        let in_frame = |pose: &Matrix4<f64>| {
            let inv = rigid_inverse(pose);
            let h = inv * Vector4::new(world_pt.x, world_pt.y, world_pt.z, 1.0);
            point(h.x, h.y, h.z)
        };
        let sweeps = vec![
            RadarSweep {
                points: vec![in_frame(&pose_old)],
                world_from_ego: pose_old,
            },
            RadarSweep {
                points: vec![in_frame(&pose_new)],
                world_from_ego: pose_new,
            },
        ];
        let cloud = accumulate_sweeps(&sweeps).unwrap();
        assert_eq!(cloud.len(), 2);
        let d = (cloud.points[0].position - cloud.points[1].position).norm();
        assert!(d < 1e-12, "copies {d} apart");
        assert_eq!(cloud.sweep_index, vec![0, 1]);
    }

    #[test]
    fn single_sweep_ordinal_channel_is_zero() {
        let mut cfg = ModelConfig::micro();
        cfg.sweeps = 1;
        cfg.temporal = TemporalEncoding::Ordinal;
        let cloud = accumulate_sweeps(&[RadarSweep {
            points: vec![point(1.0, 2.0, 0.0)],
            world_from_ego: Matrix4::identity(),
        }])
        .unwrap();
        let feats = point_features(&cloud, &cfg).unwrap();
        assert_eq!(feats.shape(), &[1, 6]);
        assert_eq!(feats.data()[5], 0.0);
    }

    #[test]
    fn non_rigid_pose_is_rejected() {
        let mut bad = Matrix4::identity();
        bad[(0, 0)] = 2.0;
        let err = accumulate_sweeps(&[RadarSweep {
            points: vec![],
            world_from_ego: bad,
        }])
        .unwrap_err();
        assert!(matches!(err, RadarError::NonRigidPose(_)));
    }

    #[test]
    fn morton_order_of_quadrants() {
        // bit-interleaving oracle: codes for the four cells of a 2x2 grid
        assert_eq!(morton_code(0, 0), 0);
        assert_eq!(morton_code(1, 0), 1);
        assert_eq!(morton_code(0, 1), 2);
        assert_eq!(morton_code(1, 1), 3);

        let grid = GridSpec::new_2d(0.0, 2.0, 0.0, 2.0, 1.0).unwrap();
        let mut cloud = RadarPointCloud {
            sweep_count: 1,
            ..RadarPointCloud::default()
        };
        // supplied in scrambled order: (0,1), (1,1), (0,0), (1,0)
        for (x, y) in [(0.5, 1.5), (1.5, 1.5), (0.5, 0.5), (1.5, 0.5)] {
            cloud.points.push(point(x, y, 0.0));
            cloud.sweep_index.push(0);
        }
        assert_eq!(serialize_points(&cloud, &grid), vec![2, 3, 0, 1]);
    }

    #[test]
    fn serialization_is_stable_for_colocated_points() {
        let grid = GridSpec::new_2d(0.0, 4.0, 0.0, 4.0, 1.0).unwrap();
        let mut cloud = RadarPointCloud {
            sweep_count: 1,
            ..RadarPointCloud::default()
        };
        for _ in 0..3 {
            cloud.points.push(point(2.5, 2.5, 0.0));
            cloud.sweep_index.push(0);
        }
        assert_eq!(serialize_points(&cloud, &grid), vec![0, 1, 2]);
        let single = RadarPointCloud {
            points: vec![point(1.0, 1.0, 0.0)],
            sweep_index: vec![0],
            sweep_count: 1,
        };
        assert_eq!(serialize_points(&single, &grid), vec![0]);
    }

    #[test]
    fn serialization_is_a_permutation() {
        let mut r = ChaCha8Rng::seed_from_u64(40);
        let grid = GridSpec::new_2d(-24.0, 24.0, -24.0, 24.0, 1.5).unwrap();
        for n in [0usize, 1, 17, 64] {
            // includes points outside the grid, which clamp for ordering
            let cloud = rand_cloud(n, 30.0, &mut r);
            let order = serialize_points(&cloud, &grid);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn small_cloud_uses_full_attention_and_weights_normalize() {
        let cfg = ModelConfig::micro();
        let mut r = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        register_point_encoder(&mut store, &cfg, &mut r);
        // 5 points < window 16: one window spanning the whole cloud
        let cloud = rand_cloud(5, 20.0, &mut r);
        let order = serialize_points(&cloud, &cfg.internal);
        let mut g = Graph::new();
        let feats = g.constant(point_features(&cloud, &cfg).unwrap());
        let out = encode_points(&mut g, &store, &cfg, feats, &order).unwrap();
        g.run_forward().unwrap();
        assert_eq!(g.value(out).shape(), &[5, cfg.c_pt]);
        assert!(g.value(out).all_finite());

        // softmax rows over one window of 5 sum to 1; rebuild the score path
        let mut g2 = Graph::new();
        let f2 = g2.constant(point_features(&cloud, &cfg).unwrap());
        let h = nn::linear(&mut g2, &store, "rad.embed.1", f2).unwrap();
        let h = g2.relu(h);
        let emb = nn::linear(&mut g2, &store, "rad.embed.2", h).unwrap();
        let ser = g2.gather_rows(emb, order.clone()).unwrap();
        let q = nn::linear(&mut g2, &store, "rad.b0.q", ser).unwrap();
        let k = nn::linear(&mut g2, &store, "rad.b0.k", ser).unwrap();
        let ch = cfg.c_pt / cfg.radar_heads;
        let qh = g2.slice(q, 1, 0, ch).unwrap();
        let kh = g2.slice(k, 1, 0, ch).unwrap();
        let kt = g2.permute(kh, &[1, 0]).unwrap();
        let scores = g2.matmul(qh, kt).unwrap();
        let scaled = g2.scale(scores, 1.0 / libm::sqrt(ch as f64));
        let attn = g2.softmax(scaled, 1).unwrap();
        g2.run_forward().unwrap();
        for row in 0..5 {
            let s: f64 = g2.value(attn).data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = ModelConfig::micro();
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        register_point_encoder(&mut store, &cfg, &mut r);
        let cloud = rand_cloud(16, 20.0, &mut r);
        let order = serialize_points(&cloud, &cfg.internal);

        let run = |cloud: &RadarPointCloud, order: &[usize]| -> Vec<f64> {
            let mut g = Graph::new();
            let feats = g.constant(point_features(cloud, &cfg).unwrap());
            let out = encode_points(&mut g, &store, &cfg, feats, order).unwrap();
            g.run_forward().unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&cloud, &order);

        // permute the points and remap the order consistently
        let mut perm: Vec<usize> = (0..16).collect();
        for i in 0..16 {
            let j = r.gen_range(i..16);
            perm.swap(i, j);
        }
        let mut shuffled = RadarPointCloud {
            sweep_count: cloud.sweep_count,
            ..RadarPointCloud::default()
        };
        // shuffled[new] = cloud[perm[new]]
        for &src in &perm {
            shuffled.points.push(cloud.points[src]);
            shuffled.sweep_index.push(cloud.sweep_index[src]);
        }
        let mut inv = vec![0usize; 16];
        for (new, &src) in perm.iter().enumerate() {
            inv[src] = new;
        }
        let new_order: Vec<usize> = order.iter().map(|&old| inv[old]).collect();
        let out = run(&shuffled, &new_order);
        for (new, &src) in perm.iter().enumerate() {
            for k in 0..cfg.c_pt {
                let a = out[new * cfg.c_pt + k];
                let b = base[src * cfg.c_pt + k];
                assert!((a - b).abs() < 1e-12, "point {src}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scatter_sums_colocated_points_and_handles_empty() {
        let grid = GridSpec::new_2d(0.0, 2.0, 0.0, 2.0, 1.0).unwrap();
        let mut cloud = RadarPointCloud {
            sweep_count: 1,
            ..RadarPointCloud::default()
        };
        for (x, y) in [(0.5, 0.5), (0.6, 0.4)] {
            cloud.points.push(point(x, y, 0.0));
            cloud.sweep_index.push(0);
        }
        let mut g = Graph::new();
        let feats = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
        let map = scatter_to_bev(&mut g, feats, &cloud, &grid).unwrap();
        g.run_forward().unwrap();
        assert_eq!(g.value(map).shape(), &[2, 2, 2]);
        assert_eq!(g.value(map).data()[0], 11.0); // channel 0, cell (0,0)
        assert_eq!(g.value(map).data()[4], 22.0); // channel 1, cell (0,0)

        let empty = RadarPointCloud {
            sweep_count: 1,
            ..RadarPointCloud::default()
        };
        let mut g = Graph::new();
        let feats = g.constant(Tensor::zeros(&[0, 3]));
        let map = scatter_to_bev(&mut g, feats, &empty, &grid).unwrap();
        g.run_forward().unwrap();
        assert!(g.value(map).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_matches_brute_force_loop_and_conserves_mass() {
        let mut r = ChaCha8Rng::seed_from_u64(43);
        let grid = GridSpec::new_2d(-8.0, 8.0, -8.0, 8.0, 1.0).unwrap();
        let cloud = rand_cloud(200, 10.0, &mut r); // some points fall outside
        let c = 3;
        let feats_data: Vec<f64> = (0..200 * c).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let feats = g.input("f", &[200, c], true).unwrap();
        let map = scatter_to_bev(&mut g, feats, &cloud, &grid).unwrap();
        g.mark_output("map", map);
        g.set_input("f", Tensor::from_vec(&[200, c], feats_data.clone()).unwrap())
            .unwrap();
        g.run_forward().unwrap();

        // brute-force accumulation loop
        let mut expect = vec![0.0; c * 16 * 16];
        let mut in_grid_sum = vec![0.0; c];
        for (i, p) in cloud.points.iter().enumerate() {
            if let Some(cell) = grid.flat_cell_of(p.position.x, p.position.y) {
                for ch in 0..c {
                    expect[ch * 256 + cell] += feats_data[i * c + ch];
                    in_grid_sum[ch] += feats_data[i * c + ch];
                }
            }
        }
        assert_eq!(g.value(map).data(), &expect[..]);
        for ch in 0..c {
            let total: f64 = g.value(map).data()[ch * 256..(ch + 1) * 256].iter().sum();
            assert!((total - in_grid_sum[ch]).abs() < 1e-9);
        }

        // identical gradients: d(map)/d(features) routes each cell's grad
        // back to its contributors
        let seed_data: Vec<f64> = (0..c * 256).map(|_| r.gen_range(-1.0..1.0)).collect();
        let seed = Tensor::from_vec(&[c, 16, 16], seed_data.clone()).unwrap();
        g.backward_node(map, &seed).unwrap();
        let got = g.grad(feats).unwrap().clone();
        for (i, p) in cloud.points.iter().enumerate() {
            for ch in 0..c {
                let want = grid
                    .flat_cell_of(p.position.x, p.position.y)
                    .map(|cell| seed_data[ch * 256 + cell])
                    .unwrap_or(0.0);
                assert_eq!(got.data()[i * c + ch], want);
            }
        }
    }

    #[test]
    fn pyramid_preserves_shape_and_zero_maps() {
        let cfg = ModelConfig::micro();
        let mut r = ChaCha8Rng::seed_from_u64(44);
        let mut store = ParamStore::new();
        register_pyramid(&mut store, &cfg, &mut r);
        let c = cfg.c_pt;

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[c, 16, 16]));
        let y = pyramid_aggregate(&mut g, &store, x).unwrap();
        g.run_forward().unwrap();
        assert_eq!(g.value(y).shape(), &[c, 16, 16]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let data: Vec<f64> = (0..c * 16 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = g.constant(Tensor::from_vec(&[c, 16, 16], data).unwrap());
        let y = pyramid_aggregate(&mut g, &store, x).unwrap();
        g.run_forward().unwrap();
        assert_eq!(g.value(y).shape(), &[c, 16, 16]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[c, 10, 10]));
        assert!(pyramid_aggregate(&mut g, &store, x).is_err());
    }

    #[test]
    fn pyramid_single_cell_spreads_at_least_four_cells_wide() {
        // all-ones kernels turn the pyramid into pure receptive-field
        // arithmetic: stride-2 convs then upsampling reach >= 4 cells
        let cfg = ModelConfig::micro();
        let c = cfg.c_pt;
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(45);
        register_pyramid(&mut store, &cfg, &mut r);
        for name in ["s1", "d2", "s2", "d4", "s4", "out"] {
            let w = Tensor::full(&[c, c, 3, 3], 1.0);
            store.insert(&alloc::format!("rad.pyr.{name}.w"), w);
        }
        let mut g = Graph::new();
        let mut xmap = Tensor::zeros(&[c, 16, 16]);
        xmap.data_mut()[8 * 16 + 8] = 1.0; // single active cell, channel 0
        let x = g.constant(xmap);
        let y = pyramid_aggregate(&mut g, &store, x).unwrap();
        g.run_forward().unwrap();
        let out = g.value(y);
        let mut min_r = 16usize;
        let mut max_r = 0usize;
        let mut min_c = 16usize;
        let mut max_c = 0usize;
        for row in 0..16 {
            for col in 0..16 {
                if out.data()[row * 16 + col].abs() > 1e-12 {
                    min_r = min_r.min(row);
                    max_r = max_r.max(row);
                    min_c = min_c.min(col);
                    max_c = max_c.max(col);
                }
            }
        }
        assert!(max_r - min_r + 1 >= 4, "rows {min_r}..{max_r}");
        assert!(max_c - min_c + 1 >= 4, "cols {min_c}..{max_c}");
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        // encode -> scatter -> pyramid on a 12-point micro-cloud
        let mut cfg = ModelConfig::micro();
        cfg.c_pt = 8;
        let mut r = ChaCha8Rng::seed_from_u64(46);
        let mut store = ParamStore::new();
        register_point_encoder(&mut store, &cfg, &mut r);
        register_pyramid(&mut store, &cfg, &mut r);
        let cloud = rand_cloud(12, 20.0, &mut r);
        let order = serialize_points(&cloud, &cfg.internal);

        let mut g = Graph::new();
        let feats = g.input("f", &[12, cfg.radar_in_channels()], true).unwrap();
        let encoded = encode_points(&mut g, &store, &cfg, feats, &order).unwrap();
        let scattered = scatter_to_bev(&mut g, encoded, &cloud, &cfg.internal).unwrap();
        let out = pyramid_aggregate(&mut g, &store, scattered).unwrap();
        let loss = g.mean_all(out);
        g.mark_output("loss", loss);
        g.set_input("f", point_features(&cloud, &cfg).unwrap()).unwrap();
        let err = fd_check(&mut g, loss, feats, 1e-4, None, &mut r).unwrap();
        assert!(err < 1e-3, "err = {err}");
        // and through a parameter deep in the encoder
        let w = g.param_id("rad.b0.q.w").unwrap();
        let err = fd_check(&mut g, loss, w, 1e-4, Some(24), &mut r).unwrap();
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn radar_branch_accepts_empty_cloud() {
        let cfg = ModelConfig::micro();
        let mut r = ChaCha8Rng::seed_from_u64(47);
        let mut store = ParamStore::new();
        register_radar_branch(&mut store, &cfg, &mut r);
        let empty = RadarPointCloud {
            sweep_count: cfg.sweeps,
            ..RadarPointCloud::default()
        };
        let mut g = Graph::new();
        let out = radar_branch(&mut g, &store, &cfg, &empty).unwrap();
        g.run_forward().unwrap();
        assert_eq!(
            g.value(out).shape(),
            &[cfg.c_pt, cfg.internal.nx(), cfg.internal.ny()]
        );
        assert!(g.value(out).all_finite());
    }
}
