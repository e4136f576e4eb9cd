//! Synthetic ground-truth world: oriented vehicle boxes placed without
//! overlap, a surround camera rig, and per-sweep ego poses.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::CameraCalibration;

#[derive(Clone, Debug, PartialEq)]
pub enum SceneError {
    Placement(String),
    BadParams(String),
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::Placement(msg) => write!(f, "placement failed: {msg}"),
            SceneError::BadParams(msg) => write!(f, "bad scene params: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SceneError {}

/// Oriented vehicle box. The box sits on the ground: its vertical extent is
/// [0, height] and `center` is the footprint center at z = height/2.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleBox {
    pub center: Vector3<f64>,
    /// (length along heading, width, height) in meters.
    pub size: (f64, f64, f64),
    pub yaw: f64,
    /// Planar velocity in the world frame, m/s.
    pub velocity: (f64, f64),
    /// Fraction of the footprint boundary visible from the camera rig;
    /// derived by the rasterizer, not authored.
    pub visibility_fraction: f64,
}

impl VehicleBox {
    /// Footprint corner order: (+l,+w), (+l,-w), (-l,-w), (-l,+w) halves.
    pub fn footprint_corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (libm::cos(self.yaw), libm::sin(self.yaw));
        let (hl, hw) = (self.size.0 / 2.0, self.size.1 / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (dx, dy)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].iter().enumerate() {
            out[k] = [
                self.center.x + c * dx - s * dy,
                self.center.y + s * dx + c * dy,
            ];
        }
        out
    }

    pub fn footprint_area(&self) -> f64 {
        self.size.0 * self.size.1
    }

    pub fn footprint_perimeter(&self) -> f64 {
        2.0 * (self.size.0 + self.size.1)
    }

    /// Point-in-oriented-rectangle test on the ground plane.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (c, s) = (libm::cos(self.yaw), libm::sin(self.yaw));
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        let local_l = c * dx + s * dy;
        let local_w = -s * dx + c * dy;
        local_l.abs() <= self.size.0 / 2.0 && local_w.abs() <= self.size.1 / 2.0
    }

    /// Ray-box intersection in (t_enter, t_exit) along `dir` from `origin`,
    /// slab test in the box frame. Returns None when the ray misses.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (c, s) = (libm::cos(self.yaw), libm::sin(self.yaw));
        let rel = origin - self.center;
        let local_o = Vector3::new(
            c * rel.x + s * rel.y,
            -s * rel.x + c * rel.y,
            rel.z,
        );
        let local_d = Vector3::new(
            c * dir.x + s * dir.y,
            -s * dir.x + c * dir.y,
            dir.z,
        );
        let half = Vector3::new(self.size.0 / 2.0, self.size.1 / 2.0, self.size.2 / 2.0);
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for axis in 0..3 {
            let (o, d, h) = (local_o[axis], local_d[axis], half[axis]);
            if d.abs() < 1e-12 {
                if o.abs() > h {
                    return None;
                }
                continue;
            }
            let mut t0 = (-h - o) / d;
            let mut t1 = (h - o) / d;
            if t0 > t1 {
                core::mem::swap(&mut t0, &mut t1);
            }
            t_min = t_min.max(t0);
            t_max = t_max.min(t1);
            if t_min > t_max {
                return None;
            }
        }
        (t_max > 0.0).then_some((t_min, t_max))
    }

    /// Outward normal (world frame) of the box face hit first along `dir`.
    pub fn hit_normal(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let p = origin + dir * t;
        let (c, s) = (libm::cos(self.yaw), libm::sin(self.yaw));
        let rel = p - self.center;
        let local = Vector3::new(
            c * rel.x + s * rel.y,
            -s * rel.x + c * rel.y,
            rel.z,
        );
        let half = [self.size.0 / 2.0, self.size.1 / 2.0, self.size.2 / 2.0];
        let mut best_axis = 0;
        let mut best_gap = f64::INFINITY;
        for axis in 0..3 {
            let gap = (local[axis].abs() - half[axis]).abs();
            if gap < best_gap {
                best_gap = gap;
                best_axis = axis;
            }
        }
        let sign = if local[best_axis] >= 0.0 { 1.0 } else { -1.0 };
        let local_n = match best_axis {
            0 => Vector3::new(sign, 0.0, 0.0),
            1 => Vector3::new(0.0, sign, 0.0),
            _ => Vector3::new(0.0, 0.0, sign),
        };
        Vector3::new(
            c * local_n.x - s * local_n.y,
            s * local_n.x + c * local_n.y,
            local_n.z,
        )
    }
}

/// Separating-axis overlap test for two oriented footprint rectangles.
pub fn footprints_overlap(a: &VehicleBox, b: &VehicleBox) -> bool {
    let ca = a.footprint_corners();
    let cb = b.footprint_corners();
    let axes = [
        [libm::cos(a.yaw), libm::sin(a.yaw)],
        [-libm::sin(a.yaw), libm::cos(a.yaw)],
        [libm::cos(b.yaw), libm::sin(b.yaw)],
        [-libm::sin(b.yaw), libm::cos(b.yaw)],
    ];
    for axis in axes {
        let project = |corners: &[[f64; 2]; 4]| -> (f64, f64) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for c in corners {
                let p = c[0] * axis[0] + c[1] * axis[1];
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Synthetic scene: ego at the origin of its reference frame, vehicles,
/// camera rig, and the seed that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// world <- ego at the reference (newest sweep) timestamp.
    pub ego_pose: Matrix4<f64>,
    /// Ego planar velocity in the world frame, m/s.
    pub ego_velocity: (f64, f64),
    pub vehicles: Vec<VehicleBox>,
    pub cameras: Vec<CameraCalibration>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Vehicles are placed with centers inside +-(half_extent - margin).
    pub half_extent: f64,
    pub n_vehicles: usize,
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub speed_range: (f64, f64),
    pub ego_speed_range: (f64, f64),
    /// Clear disc around the ego where no vehicle may sit.
    pub ego_clearance: f64,
    pub n_cameras: usize,
    pub image_size: (usize, usize),
    pub horizontal_fov: f64,
    pub camera_height: f64,
    pub max_retries: usize,
}

impl SceneParams {
    pub fn desk_default() -> Self {
        SceneParams {
            half_extent: 20.0,
            n_vehicles: 6,
            length_range: (4.0, 6.0),
            width_range: (1.9, 2.4),
            height_range: (1.4, 1.9),
            speed_range: (0.0, 12.0),
            ego_speed_range: (3.0, 9.0),
            ego_clearance: 4.0,
            n_cameras: 2,
            image_size: (64, 96),
            horizontal_fov: 1.8,
            camera_height: 1.6,
            max_retries: 200,
        }
    }
}

/// Evenly spaced outward-looking cameras at the ego origin. Camera k looks
/// along yaw 2*pi*k/n; u grows to the camera's right, v downward.
pub fn surround_rig(
    n: usize,
    image_size: (usize, usize),
    horizontal_fov: f64,
    height: f64,
) -> Vec<CameraCalibration> {
    let (img_h, img_w) = image_size;
    let fx = (img_w as f64 / 2.0) / libm::tan(horizontal_fov / 2.0);
    let cx = (img_w as f64 - 1.0) / 2.0;
    let cy = (img_h as f64 - 1.0) / 2.0;
    (0..n)
        .map(|k| {
            let yaw = core::f64::consts::TAU * k as f64 / n as f64;
            let (c, s) = (libm::cos(yaw), libm::sin(yaw));
            // camera axes in the ego frame: z forward, x right, y down
            let x_cam = Vector3::new(s, -c, 0.0);
            let y_cam = Vector3::new(0.0, 0.0, -1.0);
            let z_cam = Vector3::new(c, s, 0.0);
            let mut rot = Matrix3::zeros();
            rot.row_mut(0).copy_from(&x_cam.transpose());
            rot.row_mut(1).copy_from(&y_cam.transpose());
            rot.row_mut(2).copy_from(&z_cam.transpose());
            let center = Vector3::new(0.0, 0.0, height);
            let t = -(rot * center);
            let mut ext = Matrix4::identity();
            ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            ext[(0, 3)] = t.x;
            ext[(1, 3)] = t.y;
            ext[(2, 3)] = t.z;
            CameraCalibration::from_pinhole(fx, fx, cx, cy, ext, image_size)
        })
        .collect()
}

/// Deterministic scene generation: rejection-sampled non-overlapping vehicle
/// footprints inside the world extent plus the surround rig.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene, SceneError> {
    if params.n_cameras == 0 {
        return Err(SceneError::BadParams(String::from(
            "at least one camera required",
        )));
    }
    if params.half_extent <= params.ego_clearance {
        return Err(SceneError::BadParams(String::from(
            "world extent must exceed the ego clearance",
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut vehicles: Vec<VehicleBox> = Vec::with_capacity(params.n_vehicles);
    let placement_extent = params.half_extent - params.length_range.1 / 2.0;
    let mut attempts = 0usize;
    while vehicles.len() < params.n_vehicles {
        if attempts >= params.max_retries * params.n_vehicles.max(1) {
            return Err(SceneError::Placement(alloc::format!(
                "could not place {} non-overlapping vehicles in +-{} m after {} attempts",
                params.n_vehicles,
                params.half_extent,
                attempts
            )));
        }
        attempts += 1;
        let length = rng.gen_range(params.length_range.0..=params.length_range.1);
        let width = rng.gen_range(params.width_range.0..=params.width_range.1);
        let height = rng.gen_range(params.height_range.0..=params.height_range.1);
        let x = rng.gen_range(-placement_extent..placement_extent);
        let y = rng.gen_range(-placement_extent..placement_extent);
        let yaw = rng.gen_range(0.0..core::f64::consts::TAU);
        let speed = rng.gen_range(params.speed_range.0..=params.speed_range.1);
        let heading = rng.gen_range(0.0..core::f64::consts::TAU);
        let candidate = VehicleBox {
            center: Vector3::new(x, y, height / 2.0),
            size: (length, width, height),
            yaw,
            velocity: (speed * libm::cos(heading), speed * libm::sin(heading)),
            visibility_fraction: 1.0,
        };
        if libm::hypot(x, y) < params.ego_clearance + length / 2.0 {
            continue;
        }
        if vehicles.iter().any(|v| footprints_overlap(v, &candidate)) {
            continue;
        }
        vehicles.push(candidate);
    }
    let ego_speed = rng.gen_range(params.ego_speed_range.0..=params.ego_speed_range.1);
    let ego_heading = rng.gen_range(0.0..core::f64::consts::TAU);
    Ok(Scene {
        ego_pose: Matrix4::identity(),
        ego_velocity: (
            ego_speed * libm::cos(ego_heading),
            ego_speed * libm::sin(ego_heading),
        ),
        vehicles,
        cameras: surround_rig(
            params.n_cameras,
            params.image_size,
            params.horizontal_fov,
            params.camera_height,
        ),
        rng_seed: seed,
    })
}

/// world <- ego pose of sweep `k` out of `count`, ego moving at its constant
/// velocity with `dt` seconds between sweeps. The newest sweep (k = count-1)
/// coincides with the scene's reference pose.
pub fn sweep_pose(scene: &Scene, k: usize, count: usize, dt: f64) -> Matrix4<f64> {
    let steps_back = (count - 1 - k) as f64;
    let mut m = scene.ego_pose;
    m[(0, 3)] -= scene.ego_velocity.0 * dt * steps_back;
    m[(1, 3)] -= scene.ego_velocity.1 * dt * steps_back;
    m
}
