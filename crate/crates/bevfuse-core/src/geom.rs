//! Metric geometry: BEV/voxel grid specifications, pinhole cameras, voxel
//! projection and differentiable grid resampling.
//!
//! Feature maps are `[C, H, W]` tensors. For BEV maps the first spatial axis
//! indexes x cells and the second indexes y cells; cell `(i, j)` has its
//! center at `(x_min + (i+0.5)*res, y_min + (j+0.5)*res)`. Every consumer of
//! a grid (scatter, rasterize, resample, lift) shares this convention.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::diff::{Graph, GraphError, NodeId, Tensor};

/// Positive-depth clamp for projection validity, in meters.
pub const Z_NEAR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum GeomError {
    DegenerateGrid(String),
    BadCalibration(String),
    Graph(GraphError),
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::DegenerateGrid(msg) => write!(f, "degenerate grid: {msg}"),
            GeomError::BadCalibration(msg) => write!(f, "bad calibration: {msg}"),
            GeomError::Graph(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeomError {}

impl From<GraphError> for GeomError {
    fn from(e: GraphError) -> Self {
        GeomError::Graph(e)
    }
}

/// Metric extents plus resolution of a BEV grid, optionally with a vertical
/// extent for voxel grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_resolution: f64,
    has_z: bool,
}

fn cell_count(min: f64, max: f64, res: f64) -> Option<usize> {
    if res <= 0.0 || max <= min {
        return None;
    }
    let n = (max - min) / res;
    let rounded = libm::round(n);
    if rounded < 0.5 || (n - rounded).abs() > 1e-9 {
        return None;
    }
    Some(rounded as usize)
}

impl GridSpec {
    pub fn new_2d(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        resolution: f64,
    ) -> Result<Self, GeomError> {
        let spec = GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            resolution,
            z_min: 0.0,
            z_max: 0.0,
            z_resolution: 1.0,
            has_z: false,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_z(mut self, z_min: f64, z_max: f64, z_resolution: f64) -> Result<Self, GeomError> {
        self.z_min = z_min;
        self.z_max = z_max;
        self.z_resolution = z_resolution;
        self.has_z = true;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), GeomError> {
        cell_count(self.x_min, self.x_max, self.resolution)
            .zip(cell_count(self.y_min, self.y_max, self.resolution))
            .ok_or_else(|| {
                GeomError::DegenerateGrid(alloc::format!(
                    "extents x [{}, {}] y [{}, {}] at {} m/cell must give positive integer cell counts",
                    self.x_min, self.x_max, self.y_min, self.y_max, self.resolution
                ))
            })?;
        if self.has_z {
            cell_count(self.z_min, self.z_max, self.z_resolution).ok_or_else(|| {
                GeomError::DegenerateGrid(alloc::format!(
                    "z extent [{}, {}] at {} m/layer must give a positive integer layer count",
                    self.z_min, self.z_max, self.z_resolution
                ))
            })?;
        }
        Ok(())
    }

    /// Output grid used for scoring: -50..50 m at 0.5 m, 200 x 200 cells.
    pub fn output_default() -> Self {
        GridSpec::new_2d(-50.0, 50.0, -50.0, 50.0, 0.5).expect("static spec")
    }

    /// Internal working grid: 256 x 256 cells at 0.4 m (102.4 m span).
    pub fn internal_default() -> Self {
        GridSpec::new_2d(-51.2, 51.2, -51.2, 51.2, 0.4).expect("static spec")
    }

    /// Cells along x (the first spatial axis of a BEV map).
    pub fn nx(&self) -> usize {
        cell_count(self.x_min, self.x_max, self.resolution).expect("validated")
    }

    /// Cells along y (the second spatial axis of a BEV map).
    pub fn ny(&self) -> usize {
        cell_count(self.y_min, self.y_max, self.resolution).expect("validated")
    }

    pub fn nz(&self) -> usize {
        if self.has_z {
            cell_count(self.z_min, self.z_max, self.z_resolution).expect("validated")
        } else {
            0
        }
    }

    pub fn has_z(&self) -> bool {
        self.has_z
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.resolution,
            self.y_min + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn layer_center(&self, iz: usize) -> f64 {
        self.z_min + (iz as f64 + 0.5) * self.z_resolution
    }

    /// Cell indices containing a metric point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = libm::floor((x - self.x_min) / self.resolution);
        let fj = libm::floor((y - self.y_min) / self.resolution);
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.nx() && j < self.ny()).then_some((i, j))
    }

    /// Flat spatial index (row-major over [nx, ny]) of the containing cell.
    pub fn flat_cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(i, j)| i * self.ny() + j)
    }

    /// Voxel centers in flat order `(iz * nx + ix) * ny + iy`.
    pub fn voxel_centers(&self) -> Result<Vec<Vector3<f64>>, GeomError> {
        if !self.has_z {
            return Err(GeomError::DegenerateGrid(String::from(
                "voxel centers need a z extent",
            )));
        }
        let (nx, ny, nz) = (self.nx(), self.ny(), self.nz());
        let mut centers = Vec::with_capacity(nx * ny * nz);
        for iz in 0..nz {
            let z = self.layer_center(iz);
            for ix in 0..nx {
                for iy in 0..ny {
                    let (x, y) = self.cell_center(ix, iy);
                    centers.push(Vector3::new(x, y, z));
                }
            }
        }
        Ok(centers)
    }
}

/// Pinhole camera: intrinsics, rigid ego-to-camera transform and image size.
/// The camera looks down +z, u grows to the right (x), v grows downward (y).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalibration {
    pub intrinsics: Matrix3<f64>,
    /// Ego frame -> camera frame.
    pub extrinsics: Matrix4<f64>,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl CameraCalibration {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        image_size: (usize, usize),
    ) -> Self {
        CameraCalibration {
            intrinsics,
            extrinsics,
            image_size,
        }
    }

    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsics: Matrix4<f64>,
        image_size: (usize, usize),
    ) -> Self {
        let mut k = Matrix3::identity();
        k[(0, 0)] = fx;
        k[(1, 1)] = fy;
        k[(0, 2)] = cx;
        k[(1, 2)] = cy;
        CameraCalibration::new(k, extrinsics, image_size)
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Checks the construction invariants: orthonormal right-handed rotation,
    /// positive focal lengths, principal point inside the image.
    pub fn validate(&self) -> Result<(), GeomError> {
        let r = self.extrinsics.fixed_view::<3, 3>(0, 0);
        let should_be_identity = r.transpose() * r;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((should_be_identity[(i, j)] - target).abs());
            }
        }
        if max_dev > 1e-6 {
            return Err(GeomError::BadCalibration(alloc::format!(
                "rotation block is not orthonormal (deviation {max_dev:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeomError::BadCalibration(String::from(
                "rotation block must have determinant +1",
            )));
        }
        let row3 = self.extrinsics.row(3);
        if row3[0] != 0.0 || row3[1] != 0.0 || row3[2] != 0.0 || row3[3] != 1.0 {
            return Err(GeomError::BadCalibration(String::from(
                "last extrinsics row must be [0, 0, 0, 1]",
            )));
        }
        let (h, w) = self.image_size;
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(GeomError::BadCalibration(String::from(
                "focal lengths must be positive",
            )));
        }
        if self.cx() < 0.0 || self.cx() >= w as f64 || self.cy() < 0.0 || self.cy() >= h as f64 {
            return Err(GeomError::BadCalibration(String::from(
                "principal point must be inside the image",
            )));
        }
        Ok(())
    }

    /// Ego-frame point to camera frame.
    pub fn to_camera(&self, p_ego: &Vector3<f64>) -> Vector3<f64> {
        let p = self.extrinsics * Vector4::new(p_ego.x, p_ego.y, p_ego.z, 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    /// Projects an ego-frame point; returns (u, v, depth).
    pub fn project(&self, p_ego: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(p_ego);
        let u = self.intrinsics[(0, 0)] * c.x / c.z + self.intrinsics[(0, 2)];
        let v = self.intrinsics[(1, 1)] * c.y / c.z + self.intrinsics[(1, 2)];
        (u, v, c.z)
    }

    /// Inverse of project at a known camera depth, back to the ego frame.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let x = (u - self.cx()) * depth / self.fx();
        let y = (v - self.cy()) * depth / self.fy();
        let inv = rigid_inverse(&self.extrinsics);
        let p = inv * Vector4::new(x, y, depth, 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    /// True when (u, v, depth) is a usable projection: in front of the camera
    /// and with full bilinear support inside the image.
    pub fn in_view(&self, u: f64, v: f64, depth: f64) -> bool {
        let (h, w) = self.image_size;
        depth > Z_NEAR && u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64
    }
}

/// Exact inverse of a rigid transform [R t; 0 1].
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0);
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rt = r.transpose();
    let nt = -(rt * t);
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out[(0, 3)] = nt.x;
    out[(1, 3)] = nt.y;
    out[(2, 3)] = nt.z;
    out
}

/// Per-voxel pixel coordinates and validity for one camera.
pub struct VoxelProjection {
    /// (u, v) per voxel, in the voxel order of [`GridSpec::voxel_centers`].
    pub pixels: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Projects every voxel center of a 3D grid into a camera. Valid voxels are
/// in front of the camera (depth > Z_NEAR) and inside the image rectangle.
pub fn project_voxels(
    grid: &GridSpec,
    calib: &CameraCalibration,
) -> Result<VoxelProjection, GeomError> {
    let centers = grid.voxel_centers()?;
    if centers.is_empty() {
        return Err(GeomError::DegenerateGrid(String::from("zero voxels")));
    }
    let mut pixels = Vec::with_capacity(centers.len());
    let mut valid = Vec::with_capacity(centers.len());
    for c in &centers {
        let (u, v, depth) = calib.project(c);
        let ok = calib.in_view(u, v, depth);
        // behind-camera projections produce garbage (u, v); never sample them
        pixels.push(if ok { [u, v] } else { [0.0, 0.0] });
        valid.push(ok);
    }
    Ok(VoxelProjection { pixels, valid })
}

/// Resample a BEV map from one grid to another by bilinear interpolation at
/// destination cell centers. Differentiable w.r.t. the source map; cells
/// outside the source extent become zero.
pub fn grid_resample(
    g: &mut Graph,
    src: NodeId,
    src_spec: &GridSpec,
    dst_spec: &GridSpec,
) -> Result<NodeId, GeomError> {
    let src_shape = g.value(src).shape().to_vec();
    if src_shape.len() != 3 || src_shape[1] != src_spec.nx() || src_shape[2] != src_spec.ny() {
        return Err(GeomError::DegenerateGrid(alloc::format!(
            "map shape {:?} does not match source grid {}x{}",
            src_shape,
            src_spec.nx(),
            src_spec.ny()
        )));
    }
    let (hd, wd) = (dst_spec.nx(), dst_spec.ny());
    let mut coords = Vec::with_capacity(hd * wd * 2);
    for i in 0..hd {
        for j in 0..wd {
            let (x, y) = dst_spec.cell_center(i, j);
            let fi = (x - src_spec.x_min) / src_spec.resolution - 0.5;
            let fj = (y - src_spec.y_min) / src_spec.resolution - 0.5;
            coords.push(fj); // u runs along the second spatial axis
            coords.push(fi);
        }
    }
    let coords = g.constant(Tensor::from_vec(&[hd * wd, 2], coords)?);
    let sampled = g.bilinear_sample(src, coords)?; // [hd*wd, C]
    let chans_first = g.permute(sampled, &[1, 0])?;
    Ok(g.reshape(chans_first, &[src_shape[0], hd, wd])?)
}
