//! Scan and pose files.
//!
//! Scan files are little-endian: magic `LPRC`, a `u32` point count, then
//! `count` triples of `f32` (x, y, z). Pose files are plain text with one
//! pose per line as twelve numbers, the row-major 3x4 matrix `[R | t]`.

use std::io::{BufRead, Read, Write};

use super::{Point3, PointCloud, Pose};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_u32, write_u32};

pub const SCAN_MAGIC: &[u8; 4] = b"LPRC";

pub fn write_scan<W: Write>(mut out: W, cloud: &PointCloud) -> Result<()> {
    out.write_all(SCAN_MAGIC)?;
    write_u32(&mut out, cloud.len())?;
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_scan<R: Read>(mut input: R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SCAN_MAGIC {
        return Err(Error::format("scan file", "bad magic"));
    }
    let n = read_u32(&mut input)?;
    let mut bytes = vec![0u8; n * 12];
    input.read_exact(&mut bytes)?;
    let points = bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect::<Vec<_>>();
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::format("scan file", "non-finite coordinate"));
    }
    Ok(PointCloud::new(points, "file"))
}

pub fn format_pose(pose: &Pose) -> String {
    let r = pose.rotation();
    let t = pose.translation();
    let vals = [
        r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
    ];
    vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_pose(line: &str) -> Result<Pose> {
    let vals = line
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("pose file", e.to_string()))?;
    if vals.len() != 12 {
        return Err(Error::format(
            "pose file",
            format!("expected 12 numbers per line, got {}", vals.len()),
        ));
    }
    let r = [
        [vals[0], vals[1], vals[2]],
        [vals[4], vals[5], vals[6]],
        [vals[8], vals[9], vals[10]],
    ];
    Pose::new(r, [vals[3], vals[7], vals[11]])
}

pub fn write_poses<W: Write>(mut out: W, poses: &[Pose]) -> Result<()> {
    for p in poses {
        writeln!(out, "{}", format_pose(p))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_poses<R: BufRead>(input: R) -> Result<Vec<Pose>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| parse_pose(&l?))
        .collect()
}
