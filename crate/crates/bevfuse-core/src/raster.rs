//! Ground-truth rasterization: footprint occupancy on a BEV grid plus the
//! low-visibility ignore mask. Visibility is derived geometrically: boundary
//! samples of each footprint are tested for an unoccluded view from at least
//! one camera.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::diff::Tensor;
use crate::geom::GridSpec;
use crate::scene::Scene;

/// Vehicles under this visibility fraction are excluded from supervision.
pub const VISIBILITY_THRESHOLD: f64 = 0.4;
/// Boundary samples per footprint for the visibility estimate.
pub const VISIBILITY_SAMPLES: usize = 32;

pub struct GroundTruth {
    /// Occupancy of sufficiently visible vehicles, shape [1, nx, ny].
    pub gt: Tensor,
    /// Cells of under-threshold vehicles, excluded from intersection and
    /// union alike. Shape [1, nx, ny].
    pub ignore: Tensor,
    /// Per-vehicle visibility fractions, scene order.
    pub visibility: Vec<f64>,
}

fn camera_center(calib: &crate::geom::CameraCalibration) -> Vector3<f64> {
    let inv = crate::geom::rigid_inverse(&calib.extrinsics);
    Vector3::new(inv[(0, 3)], inv[(1, 3)], inv[(2, 3)])
}

/// A boundary point is visible when some camera projects it inside its image
/// in front of the lens and no other vehicle's box blocks the segment from
/// the camera to the point.
fn point_visible(scene: &Scene, vehicle_idx: usize, point: &Vector3<f64>) -> bool {
    'cams: for calib in &scene.cameras {
        let (u, v, depth) = calib.project(point);
        if !calib.in_view(u, v, depth) {
            continue;
        }
        let origin = camera_center(calib);
        let seg = point - origin;
        let seg_len = seg.norm();
        if seg_len < 1e-9 {
            continue;
        }
        let dir = seg / seg_len;
        for (oi, other) in scene.vehicles.iter().enumerate() {
            if oi == vehicle_idx {
                continue;
            }
            if let Some((t_in, _)) = other.ray_hit(&origin, &dir) {
                if t_in > 1e-9 && t_in < seg_len - 1e-9 {
                    continue 'cams;
                }
            }
        }
        return true;
    }
    false
}

/// Visibility fraction of every vehicle: the share of its footprint-boundary
/// samples (taken at mid vehicle height) visible from the rig.
pub fn visibility_fractions(scene: &Scene) -> Vec<f64> {
    scene
        .vehicles
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let corners = v.footprint_corners();
            let mut visible = 0usize;
            for k in 0..VISIBILITY_SAMPLES {
                // walk the boundary: 4 edges, VISIBILITY_SAMPLES/4 points each
                let edge = k * 4 / VISIBILITY_SAMPLES;
                let along = (k % (VISIBILITY_SAMPLES / 4)) as f64
                    / (VISIBILITY_SAMPLES / 4) as f64;
                let a = corners[edge];
                let b = corners[(edge + 1) % 4];
                let point = Vector3::new(
                    a[0] + (b[0] - a[0]) * along,
                    a[1] + (b[1] - a[1]) * along,
                    v.center.z,
                );
                if point_visible(scene, vi, &point) {
                    visible += 1;
                }
            }
            visible as f64 / VISIBILITY_SAMPLES as f64
        })
        .collect()
}

/// Rasterize the scene onto `grid`: a cell is set when its center lies in
/// any sufficiently visible footprint; cells covered only by low-visibility
/// vehicles go to the ignore mask.
pub fn rasterize_gt(scene: &Scene, grid: &GridSpec) -> GroundTruth {
    let visibility = visibility_fractions(scene);
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut gt = Tensor::zeros(&[1, nx, ny]);
    let mut ignore = Tensor::zeros(&[1, nx, ny]);
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = grid.cell_center(i, j);
            let mut occupied_visible = false;
            let mut occupied_hidden = false;
            for (v, &vis) in scene.vehicles.iter().zip(&visibility) {
                if v.contains_xy(x, y) {
                    if vis >= VISIBILITY_THRESHOLD {
                        occupied_visible = true;
                        break;
                    }
                    occupied_hidden = true;
                }
            }
            if occupied_visible {
                gt.data_mut()[i * ny + j] = 1.0;
            } else if occupied_hidden {
                ignore.data_mut()[i * ny + j] = 1.0;
            }
        }
    }
    GroundTruth {
        gt,
        ignore,
        visibility,
    }
}
