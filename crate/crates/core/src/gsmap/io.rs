//! Binary splat files and plain-text point clouds.
//!
//! CSPL layout, little endian: magic `CSPL`, `u32` version, `u64` count, then
//! per Gaussian 14 `f32` (mean xyz, quaternion xyzw, log scales xyz, opacity
//! logit, color rgb) followed by a `u32` anchor keyframe id.

use std::io::{BufRead, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion};

use super::{Gaussian, GaussianMap};
use crate::error::{Error, Result};
use crate::geometry::{orthonormalize, Vec3};

pub const CSPL_MAGIC: [u8; 4] = *b"CSPL";
pub const CSPL_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Precondition(format!("io: {e}"))
}

pub fn write_cspl<W: Write>(map: &GaussianMap, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + map.len() * 60);
    buf.extend_from_slice(&CSPL_MAGIC);
    buf.extend_from_slice(&CSPL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for g in &map.gaussians {
        let q = UnitQuaternion::from_matrix(&g.rotation);
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            q.i,
            q.j,
            q.k,
            q.w,
            g.log_scales.x,
            g.log_scales.y,
            g.log_scales.z,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&g.anchor_kf.to_le_bytes());
    }
    out.write_all(&buf).map_err(io_err)
}

pub fn read_cspl<R: Read>(mut input: R) -> Result<GaussianMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 16 || bytes[0..4] != CSPL_MAGIC {
        return Err(Error::Precondition("not a CSPL file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CSPL_VERSION {
        return Err(Error::Precondition(format!("unsupported CSPL version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    const RECORD: usize = 14 * 4 + 4;
    if bytes.len() != 16 + count.saturating_mul(RECORD) {
        return Err(Error::Precondition("truncated CSPL file".into()));
    }
    let mut gaussians = Vec::with_capacity(count);
    for rec in bytes[16..].chunks_exact(RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(f(6), f(3), f(4), f(5)));
        gaussians.push(Gaussian {
            mean: Vec3::new(f(0), f(1), f(2)),
            rotation: orthonormalize(&q.to_rotation_matrix().into_inner()),
            log_scales: Vec3::new(f(7), f(8), f(9)),
            opacity_logit: f(10),
            color: Vec3::new(f(11), f(12), f(13)),
            anchor_kf: u32::from_le_bytes(rec[56..60].try_into().unwrap()),
        });
    }
    Ok(GaussianMap::new(gaussians))
}

/// One `x y z r g b` line per Gaussian mean.
pub fn write_point_cloud<W: Write>(map: &GaussianMap, mut out: W) -> Result<()> {
    for g in &map.gaussians {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            g.mean.x, g.mean.y, g.mean.z, g.color.x, g.color.y, g.color.z
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_point_cloud<R: BufRead>(input: R) -> Result<Vec<(Vec3, Vec3)>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Precondition(format!("line {}: {e}", n + 1)))?;
        if vals.len() != 6 {
            return Err(Error::Precondition(format!("line {}: expected 6 values", n + 1)));
        }
        out.push((
            Vec3::new(vals[0], vals[1], vals[2]),
            Vec3::new(vals[3], vals[4], vals[5]),
        ));
    }
    Ok(out)
}
