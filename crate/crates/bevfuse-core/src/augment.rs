//! Training augmentations. Image-space transforms update intrinsics or
//! extrinsics so projection stays consistent with the resampled pixels;
//! BEV-space transforms move radar points, ground-truth rasters and camera
//! extrinsics with one shared planar transform.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::cfg::AugConfig;
use crate::geom::CameraCalibration;
use crate::model::Sample;
use crate::scene::{Scene, VehicleBox};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageAug {
    pub flip: bool,
    pub zoom: f64,
    pub rotation: f64,
}

impl ImageAug {
    pub fn identity() -> Self {
        ImageAug {
            flip: false,
            zoom: 1.0,
            rotation: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevAug {
    /// Mirror y -> -y before rotating.
    pub flip_y: bool,
    pub rotation: f64,
    pub scale: f64,
}

impl BevAug {
    pub fn identity() -> Self {
        BevAug {
            flip_y: false,
            rotation: 0.0,
            scale: 1.0,
        }
    }

    /// Planar action on ego-frame ground coordinates.
    pub fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.flip_y { -y } else { y };
        let (c, s) = (libm::cos(self.rotation), libm::sin(self.rotation));
        (
            self.scale * (c * x - s * y),
            self.scale * (s * x + c * y),
        )
    }

    pub fn inverse_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = (libm::cos(self.rotation), libm::sin(self.rotation));
        let xr = (c * x + s * y) / self.scale;
        let yr = (-s * x + c * y) / self.scale;
        (xr, if self.flip_y { -yr } else { yr })
    }

    /// Homogeneous 4x4 of the planar action (z untouched).
    pub fn matrix(&self) -> Matrix4<f64> {
        let (c, s) = (libm::cos(self.rotation), libm::sin(self.rotation));
        let f = if self.flip_y { -1.0 } else { 1.0 };
        let mut m = Matrix4::identity();
        m[(0, 0)] = self.scale * c;
        m[(0, 1)] = self.scale * -s * f;
        m[(1, 0)] = self.scale * s;
        m[(1, 1)] = self.scale * c * f;
        m
    }

    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        let inv = BevAug {
            flip_y: false,
            rotation: -self.rotation,
            scale: 1.0 / self.scale,
        };
        let mut m = inv.matrix();
        if self.flip_y {
            // flip applied first in forward order comes last in the inverse
            let mut f = Matrix4::identity();
            f[(1, 1)] = -1.0;
            m = f * m;
        }
        m
    }
}

/// Draw augmentation magnitudes from the configured ranges.
pub fn sample_augs(cfg: &AugConfig, rng: &mut impl Rng) -> (ImageAug, BevAug) {
    if !cfg.enabled {
        return (ImageAug::identity(), BevAug::identity());
    }
    let image = ImageAug {
        flip: rng.gen_bool(cfg.image_flip_prob.clamp(0.0, 1.0)),
        zoom: rng.gen_range(cfg.image_zoom.0..=cfg.image_zoom.1),
        rotation: rng.gen_range(-cfg.image_rot..=cfg.image_rot),
    };
    let bev = BevAug {
        flip_y: rng.gen_bool(cfg.bev_flip_prob.clamp(0.0, 1.0)),
        rotation: rng.gen_range(-cfg.bev_rot..=cfg.bev_rot),
        scale: rng.gen_range(cfg.bev_scale.0..=cfg.bev_scale.1),
    };
    (image, bev)
}

/// Forward pixel map of the image augmentation: where original pixel (u, v)
/// lands in the augmented image. Flip, then zoom about the image center,
/// then rotation about the principal point.
pub fn image_pixel_map(
    aug: &ImageAug,
    calib: &CameraCalibration,
    u: f64,
    v: f64,
) -> (f64, f64) {
    let (h, w) = calib.image_size;
    let (mut u, mut v) = (u, v);
    if aug.flip {
        u = (w - 1) as f64 - u;
    }
    let cw = (w - 1) as f64 / 2.0;
    let ch = (h - 1) as f64 / 2.0;
    u = aug.zoom * (u - cw) + cw;
    v = aug.zoom * (v - ch) + ch;
    // rotation about the (possibly flipped/zoomed) principal point
    let (pu, pv) = flipped_zoomed_principal_point(aug, calib);
    let (c, s) = (libm::cos(aug.rotation), libm::sin(aug.rotation));
    let (du, dv) = (u - pu, v - pv);
    (pu + c * du - s * dv, pv + s * du + c * dv)
}

fn flipped_zoomed_principal_point(aug: &ImageAug, calib: &CameraCalibration) -> (f64, f64) {
    let (h, w) = calib.image_size;
    let mut cx = calib.cx();
    let cy = calib.cy();
    if aug.flip {
        cx = (w - 1) as f64 - cx;
    }
    let cw = (w - 1) as f64 / 2.0;
    let ch = (h - 1) as f64 / 2.0;
    (
        aug.zoom * (cx - cw) + cw,
        aug.zoom * (cy - ch) + ch,
    )
}

/// Calibration of the augmented image: flip and zoom fold into the
/// intrinsics, the in-plane rotation folds into the extrinsics as a roll
/// about the optical axis.
pub fn augment_calibration(aug: &ImageAug, calib: &CameraCalibration) -> CameraCalibration {
    let (h, w) = calib.image_size;
    let mut fx = calib.fx();
    let fy = calib.fy();
    let mut cx = calib.cx();
    let mut cy = calib.cy();
    if aug.flip {
        fx = -fx;
        cx = (w - 1) as f64 - cx;
    }
    let cw = (w - 1) as f64 / 2.0;
    let ch = (h - 1) as f64 / 2.0;
    fx *= aug.zoom;
    let fy = fy * aug.zoom;
    cx = aug.zoom * (cx - cw) + cw;
    cy = aug.zoom * (cy - ch) + ch;

    // rolling the camera frame about +z rotates projections about the
    // principal point by the same angle; a mirrored image rotates the
    // opposite way, so the roll flips sign after a flip
    let angle = if aug.flip { -aug.rotation } else { aug.rotation };
    let (c, s) = (libm::cos(angle), libm::sin(angle));
    let mut roll = Matrix4::identity();
    roll.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::new(
        c, -s, 0.0, //
        s, c, 0.0, //
        0.0, 0.0, 1.0,
    ));
    let extrinsics = roll * calib.extrinsics;
    let mut k = Matrix3::identity();
    k[(0, 0)] = fx;
    k[(1, 1)] = fy;
    k[(0, 2)] = cx;
    k[(1, 2)] = cy;
    CameraCalibration::new(k, extrinsics, calib.image_size)
}

/// Resample one [3,H,W] image under the augmentation (inverse mapping with
/// edge-clamped bilinear lookups).
pub fn augment_image(
    aug: &ImageAug,
    calib: &CameraCalibration,
    image: &crate::diff::Tensor,
) -> crate::diff::Tensor {
    let (h, w) = calib.image_size;
    let mut out = crate::diff::Tensor::zeros(&[3, h, w]);
    let inv = ImageAug {
        flip: false,
        zoom: 1.0 / aug.zoom,
        rotation: -aug.rotation,
    };
    for r in 0..h {
        for cidx in 0..w {
            // invert rotation (about the augmented principal point), then
            // zoom, then flip
            let (pu, pv) = flipped_zoomed_principal_point(aug, calib);
            let (cth, sth) = (libm::cos(inv.rotation), libm::sin(inv.rotation));
            let (du, dv) = (cidx as f64 - pu, r as f64 - pv);
            let mut u = pu + cth * du - sth * dv;
            let mut v = pv + sth * du + cth * dv;
            let cw = (w - 1) as f64 / 2.0;
            let chh = (h - 1) as f64 / 2.0;
            u = (u - cw) / aug.zoom + cw;
            v = (v - chh) / aug.zoom + chh;
            if aug.flip {
                u = (w - 1) as f64 - u;
            }
            let uc = u.clamp(0.0, (w - 1) as f64);
            let vc = v.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (libm::floor(uc), libm::floor(vc));
            let (fx, fy) = (uc - x0, vc - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| image.data()[(ch * h + yy) * w + xx];
                let val = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                    + (1.0 - fy) * fx * at(y0, x1)
                    + fy * (1.0 - fx) * at(y1, x0)
                    + fy * fx * at(y1, x1);
                out.data_mut()[(ch * h + r) * w + cidx] = val;
            }
        }
    }
    out
}

/// Transform a raster (binary map on `grid`) by the BEV augmentation:
/// nearest-neighbor lookup of each destination cell center through the
/// inverse transform. Cells mapping outside the source become zero.
pub fn transform_raster(
    aug: &BevAug,
    grid: &crate::geom::GridSpec,
    raster: &crate::diff::Tensor,
) -> crate::diff::Tensor {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = crate::diff::Tensor::zeros(raster.shape());
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = grid.cell_center(i, j);
            let (sx, sy) = aug.inverse_xy(x, y);
            if let Some((si, sj)) = grid.cell_of(sx, sy) {
                out.data_mut()[i * ny + j] = raster.data()[si * ny + sj];
            }
        }
    }
    out
}

/// Apply the BEV transform to a scene's boxes (for commute tests and
/// synthetic re-rasterization).
pub fn transform_scene(aug: &BevAug, scene: &Scene) -> Scene {
    let mut out = scene.clone();
    out.vehicles = scene
        .vehicles
        .iter()
        .map(|v| {
            let (x, y) = aug.apply_xy(v.center.x, v.center.y);
            let yaw = if aug.flip_y { -v.yaw } else { v.yaw } + aug.rotation;
            let (vx, vy) = aug.apply_xy(v.velocity.0, v.velocity.1);
            VehicleBox {
                center: Vector3::new(x, y, v.center.z),
                size: (v.size.0 * aug.scale, v.size.1 * aug.scale, v.size.2),
                yaw,
                velocity: (vx / aug.scale, vy / aug.scale),
                visibility_fraction: v.visibility_fraction,
            }
        })
        .collect();
    out
}

/// Full sample augmentation: image-space flip/zoom/rotation per camera with
/// consistent calibrations, then one shared BEV transform over radar point
/// coordinates, ground-truth rasters and camera extrinsics.
pub fn augment_sample(
    sample: &Sample,
    image_aug: &ImageAug,
    bev_aug: &BevAug,
    internal: &crate::geom::GridSpec,
    output: &crate::geom::GridSpec,
) -> Sample {
    let mut images = Vec::with_capacity(sample.images.len());
    let mut calibs = Vec::with_capacity(sample.calibs.len());
    for (img, calib) in sample.images.iter().zip(&sample.calibs) {
        images.push(augment_image(image_aug, calib, img));
        let mut aug_calib = augment_calibration(image_aug, calib);
        // BEV transform moves scene content: cameras see the old content, so
        // their extrinsics compose with the inverse
        aug_calib.extrinsics *= bev_aug.inverse_matrix();
        calibs.push(aug_calib);
    }
    let mut cloud = sample.cloud.clone();
    for p in cloud.points.iter_mut() {
        let (x, y) = bev_aug.apply_xy(p.position.x, p.position.y);
        p.position.x = x;
        p.position.y = y;
    }
    Sample {
        images,
        calibs,
        cloud,
        gt: transform_raster(bev_aug, output, &sample.gt),
        aux_gt: transform_raster(bev_aug, internal, &sample.aux_gt),
        ignore: transform_raster(bev_aug, output, &sample.ignore),
    }
}
