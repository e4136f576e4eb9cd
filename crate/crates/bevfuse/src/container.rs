//! Scene dataset container: one self-describing binary file per scene.
//! Layout: magic "BFSC", version, then tagged sections in fixed order —
//! ego state, camera calibrations, vehicle table, radar sweeps (poses as
//! f64, point arrays as little-endian f32 with counts), pseudo-images as
//! raw RGB8 planes with dimensions.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use bevfuse_core::geom::CameraCalibration;
use bevfuse_core::radar::{RadarPoint, RadarSweep};
use bevfuse_core::scene::{Scene, VehicleBox};
use bevfuse_core::sensor::Image;

use crate::checkpoint::{read_f64, read_u32, read_u64, write_f64, write_u32, write_u64};
use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"BFSC";
pub const VERSION: u32 = 1;

const SECTION_EGO: u8 = 1;
const SECTION_CAMERAS: u8 = 2;
const SECTION_VEHICLES: u8 = 3;
const SECTION_SWEEPS: u8 = 4;
const SECTION_IMAGES: u8 = 5;

/// Everything the dataset stores for one scene: the ground-truth world, the
/// raw radar sweeps and the rendered camera images.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub sweeps: Vec<RadarSweep>,
    pub images: Vec<Image>,
}

fn write_matrix4(w: &mut impl Write, m: &Matrix4<f64>) -> io::Result<()> {
    for r in 0..4 {
        for c in 0..4 {
            write_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

fn read_matrix4(r: &mut impl Read) -> io::Result<Matrix4<f64>> {
    let mut m = Matrix4::zeros();
    for row in 0..4 {
        for col in 0..4 {
            m[(row, col)] = read_f64(r)?;
        }
    }
    Ok(m)
}

fn write_matrix3(w: &mut impl Write, m: &Matrix3<f64>) -> io::Result<()> {
    for r in 0..3 {
        for c in 0..3 {
            write_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

fn read_matrix3(r: &mut impl Read) -> io::Result<Matrix3<f64>> {
    let mut m = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            m[(row, col)] = read_f64(r)?;
        }
    }
    Ok(m)
}

fn expect_section(r: &mut impl Read, tag: u8) -> Result<(), FormatError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    if b[0] != tag {
        return Err(FormatError::Corrupt(format!(
            "expected section {tag}, found {}",
            b[0]
        )));
    }
    Ok(())
}

pub fn save_scene(path: &Path, record: &SceneRecord) -> Result<(), FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION)?;

    out.push(SECTION_EGO);
    write_matrix4(&mut out, &record.scene.ego_pose)?;
    write_f64(&mut out, record.scene.ego_velocity.0)?;
    write_f64(&mut out, record.scene.ego_velocity.1)?;
    write_u64(&mut out, record.scene.rng_seed)?;

    out.push(SECTION_CAMERAS);
    write_u32(&mut out, record.scene.cameras.len() as u32)?;
    for cam in &record.scene.cameras {
        write_matrix3(&mut out, &cam.intrinsics)?;
        write_matrix4(&mut out, &cam.extrinsics)?;
        write_u32(&mut out, cam.image_size.0 as u32)?;
        write_u32(&mut out, cam.image_size.1 as u32)?;
    }

    out.push(SECTION_VEHICLES);
    write_u32(&mut out, record.scene.vehicles.len() as u32)?;
    for v in &record.scene.vehicles {
        for val in [
            v.center.x,
            v.center.y,
            v.center.z,
            v.size.0,
            v.size.1,
            v.size.2,
            v.yaw,
            v.velocity.0,
            v.velocity.1,
            v.visibility_fraction,
        ] {
            write_f64(&mut out, val)?;
        }
    }

    out.push(SECTION_SWEEPS);
    write_u32(&mut out, record.sweeps.len() as u32)?;
    for sweep in &record.sweeps {
        write_matrix4(&mut out, &sweep.world_from_ego)?;
        write_u32(&mut out, sweep.points.len() as u32)?;
        for p in &sweep.points {
            for val in [
                p.position.x,
                p.position.y,
                p.position.z,
                p.radial_velocity,
                p.rcs,
            ] {
                out.write_all(&(val as f32).to_le_bytes())?;
            }
        }
    }

    out.push(SECTION_IMAGES);
    write_u32(&mut out, record.images.len() as u32)?;
    for img in &record.images {
        write_u32(&mut out, img.height as u32)?;
        write_u32(&mut out, img.width as u32)?;
        out.write_all(&img.data)?;
    }

    fs::write(path, out)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneRecord, FormatError> {
    let bytes = fs::read(path)?;
    let mut r = io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "BFSC",
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FormatError::Corrupt(format!(
            "unsupported scene version {version}"
        )));
    }

    expect_section(&mut r, SECTION_EGO)?;
    let ego_pose = read_matrix4(&mut r)?;
    let ego_velocity = (read_f64(&mut r)?, read_f64(&mut r)?);
    let rng_seed = read_u64(&mut r)?;

    expect_section(&mut r, SECTION_CAMERAS)?;
    let n_cams = read_u32(&mut r)? as usize;
    let mut cameras = Vec::with_capacity(n_cams);
    for _ in 0..n_cams {
        let intrinsics = read_matrix3(&mut r)?;
        let extrinsics = read_matrix4(&mut r)?;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        cameras.push(CameraCalibration::new(intrinsics, extrinsics, (h, w)));
    }

    expect_section(&mut r, SECTION_VEHICLES)?;
    let n_veh = read_u32(&mut r)? as usize;
    let mut vehicles = Vec::with_capacity(n_veh);
    for _ in 0..n_veh {
        let mut vals = [0.0f64; 10];
        for v in vals.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        vehicles.push(VehicleBox {
            center: Vector3::new(vals[0], vals[1], vals[2]),
            size: (vals[3], vals[4], vals[5]),
            yaw: vals[6],
            velocity: (vals[7], vals[8]),
            visibility_fraction: vals[9],
        });
    }

    expect_section(&mut r, SECTION_SWEEPS)?;
    let n_sweeps = read_u32(&mut r)? as usize;
    let mut sweeps = Vec::with_capacity(n_sweeps);
    for _ in 0..n_sweeps {
        let world_from_ego = read_matrix4(&mut r)?;
        let n_pts = read_u32(&mut r)? as usize;
        let mut points = Vec::with_capacity(n_pts);
        for _ in 0..n_pts {
            let mut vals = [0.0f32; 5];
            for v in vals.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *v = f32::from_le_bytes(b);
            }
            points.push(RadarPoint {
                position: Vector3::new(vals[0] as f64, vals[1] as f64, vals[2] as f64),
                radial_velocity: vals[3] as f64,
                rcs: vals[4] as f64,
            });
        }
        sweeps.push(RadarSweep {
            points,
            world_from_ego,
        });
    }

    expect_section(&mut r, SECTION_IMAGES)?;
    let n_imgs = read_u32(&mut r)? as usize;
    let mut images = Vec::with_capacity(n_imgs);
    for _ in 0..n_imgs {
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        if h * w > 1 << 26 {
            return Err(FormatError::Corrupt("image too large".into()));
        }
        let mut data = vec![0u8; 3 * h * w];
        r.read_exact(&mut data)?;
        images.push(Image {
            height: h,
            width: w,
            data,
        });
    }

    Ok(SceneRecord {
        scene: Scene {
            ego_pose,
            ego_velocity,
            vehicles,
            cameras,
            rng_seed,
        },
        sweeps,
        images,
    })
}

/// Write the newline-delimited manifest of relative scene paths.
pub fn save_manifest(path: &Path, names: &[String]) -> Result<(), FormatError> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<String>, FormatError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
