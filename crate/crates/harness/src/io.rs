//! File formats: TUM trajectories, 16-bit PNG and raw `f32` depth, PNG images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use fslam_core::geometry::{PixelGrid, Pose, Vec3};
use fslam_core::tracking::Rgb;
use image::{ImageBuffer, Luma, Rgb as ImgRgb};

use crate::error::{HarnessError, Result};

/// Depth PNG units per meter.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;
const RAW_MAGIC: [u8; 4] = *b"DF32";

/// `timestamp tx ty tz qx qy qz qw` per line.
pub fn write_tum<W: Write>(mut out: W, stamped: &[(f64, Pose)]) -> Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for (t, p) in stamped {
        let q = p.quaternion();
        let tr = p.translation;
        writeln!(
            out,
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}

pub fn read_tum<R: Read>(input: R) -> Result<Vec<(f64, Pose)>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HarnessError::Format(format!("trajectory line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(HarnessError::Format(format!(
                "trajectory line {}: expected 8 fields",
                n + 1
            )));
        }
        out.push((
            v[0],
            Pose::from_quaternion([v[4], v[5], v[6], v[7]], Vec3::new(v[1], v[2], v[3])),
        ));
    }
    Ok(out)
}

pub fn write_tum_file(path: &Path, stamped: &[(f64, Pose)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_tum(&mut f, stamped)?;
    f.flush()?;
    Ok(())
}

pub fn read_tum_file(path: &Path) -> Result<Vec<(f64, Pose)>> {
    read_tum(File::open(path)?)
}

/// 16-bit PNG at [`DEPTH_PNG_SCALE`] units per meter; zero marks invalid.
pub fn write_depth_png(path: &Path, depth: &PixelGrid<f64>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
            let d = *depth.get(x as usize, y as usize);
            let v = if d.is_finite() && d > 0.0 {
                (d * DEPTH_PNG_SCALE).round().min(65535.0)
            } else {
                0.0
            };
            Luma([v as u16])
        });
    buf.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: &Path) -> Result<PixelGrid<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(PixelGrid::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / DEPTH_PNG_SCALE
    }))
}

/// 16-bit grayscale PNG of raw counts.
pub fn write_counts_png(path: &Path, counts: &PixelGrid<u32>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(counts.width() as u32, counts.height() as u32, |x, y| {
            Luma([(*counts.get(x as usize, y as usize)).min(65535) as u16])
        });
    buf.save(path)?;
    Ok(())
}

/// Little-endian `DF32`, `u32` width, `u32` height, then row-major `f32`.
pub fn write_raw_f32<W: Write>(mut out: W, grid: &PixelGrid<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + grid.len() * 4);
    buf.extend_from_slice(&RAW_MAGIC);
    buf.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    for v in grid.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_raw_f32<R: Read>(mut input: R) -> Result<PixelGrid<f64>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || bytes[..4] != RAW_MAGIC {
        return Err(HarnessError::Format("not a raw f32 grid".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * w * h {
        return Err(HarnessError::Format("raw f32 grid has the wrong length".into()));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(PixelGrid::from_vec(w, h, data)?)
}

pub fn write_raw_f32_file(path: &Path, grid: &PixelGrid<f64>) -> Result<()> {
    write_raw_f32(BufWriter::new(File::create(path)?), grid)
}

pub fn read_raw_f32_file(path: &Path) -> Result<PixelGrid<f64>> {
    read_raw_f32(File::open(path)?)
}

/// 8-bit RGB PNG; channels are clamped to [0, 1].
pub fn write_rgb_png(path: &Path, img: &PixelGrid<Rgb>) -> Result<()> {
    let buf: ImageBuffer<ImgRgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
            let c = img.get(x as usize, y as usize);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            ImgRgb([q(c.x), q(c.y), q(c.z)])
        });
    buf.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<PixelGrid<Rgb>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(PixelGrid::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32);
        Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fslam_core::geometry::{se3_exp, Twist};

    #[test]
    fn tum_round_trip() {
        let poses: Vec<(f64, Pose)> = (0..4)
            .map(|i| {
                (
                    i as f64 * 0.1,
                    se3_exp(&Twist::new(0.1 * i as f64, -0.2, 0.3, 0.2, -0.1 * i as f64, 0.05)),
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_tum(&mut buf, &poses).unwrap();
        let back = read_tum(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        for ((ta, a), (tb, b)) in poses.iter().zip(&back) {
            assert!((ta - tb).abs() < 1e-9);
            assert!(a.rotation_angle_to(b) < 1e-8 && a.translation_distance_to(b) < 1e-8);
        }
        assert!(read_tum("0 1 2 3\n".as_bytes()).is_err());
    }

    #[test]
    fn raw_depth_round_trip() {
        let g = PixelGrid::from_fn(5, 3, |x, y| 0.25 * x as f64 + y as f64);
        let mut buf = Vec::new();
        write_raw_f32(&mut buf, &g).unwrap();
        assert_eq!(read_raw_f32(buf.as_slice()).unwrap(), g);
        assert!(read_raw_f32(&buf[..buf.len() - 2]).is_err());
    }
}
