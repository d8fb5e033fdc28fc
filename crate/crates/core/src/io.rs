//! KITTI-style scan and pose files, plus plain point clouds.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::pipeline::Trajectory;
use crate::sampling::LidarScan;
use crate::se3::Pose;

const RECORD: usize = 16;

/// Decodes little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn decode_scan_kitti(bytes: &[u8], path: &Path, index: usize) -> Result<LidarScan> {
    if bytes.len() % RECORD != 0 {
        let offset = bytes.len() - bytes.len() % RECORD;
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("truncated record at byte offset {offset} (file is {} bytes)", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (k, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let p = Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("non-finite coordinate at byte offset {}", k * RECORD),
            });
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(LidarScan { points, intensity: Some(intensity), index })
}

pub fn load_scan_kitti(path: &Path, index: usize) -> Result<LidarScan> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: format!("unreadable at byte offset 0: {e}") })?;
    decode_scan_kitti(&bytes, path, index)
}

pub fn encode_scan_kitti(scan: &LidarScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * RECORD);
    for (i, p) in scan.points.iter().enumerate() {
        let it = scan.intensity.as_ref().and_then(|v| v.get(i)).copied().unwrap_or(0.0);
        for v in [p.x as f32, p.y as f32, p.z as f32, it] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_scan_kitti(scan: &LidarScan, path: &Path) -> Result<()> {
    std::fs::write(path, encode_scan_kitti(scan))?;
    Ok(())
}

/// `*.bin` files of a directory in lexicographic order.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

/// One row-major 3x4 matrix per non-empty line; line `k` is scan `k`.
pub fn parse_poses_kitti(text: &str, path: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(format!("bad number '{t}'"))))
            .collect::<Result<_>>()?;
        let v: [f64; 12] = nums.try_into().map_err(|n: Vec<f64>| perr(format!("expected 12 numbers, got {}", n.len())))?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(perr("non-finite entry".into()));
        }
        // Drifted rotations are projected back onto SO(3) here.
        let pose = Pose::from_row_major_3x4(&v).map_err(|e| perr(e.to_string()))?;
        poses.push(pose);
    }
    Ok(Trajectory::from_poses(poses))
}

pub fn load_poses_kitti(path: &Path) -> Result<Trajectory> {
    parse_poses_kitti(&std::fs::read_to_string(path)?, path)
}

/// Poses in scan order, shortest round-tripping decimal form.
pub fn poses_to_kitti(poses: &Trajectory) -> String {
    let mut s = String::new();
    for p in poses.poses() {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Trajectories with gaps in their indices cannot be written line-indexed.
pub fn write_poses_kitti(poses: &Trajectory, path: &Path) -> Result<()> {
    if poses.entries().iter().enumerate().any(|(k, (i, _))| *i != k) {
        return Err(Error::InvalidArgument("pose files need consecutive indices from 0".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(poses_to_kitti(poses).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Point cloud by extension: `.bin` (KITTI), `.ply` (vertices), otherwise
/// whitespace-separated `x y z` text lines.
pub fn load_point_cloud(path: &Path) -> Result<Vec<Vector3<f64>>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => Ok(load_scan_kitti(path, 0)?.points),
        Some("ply") => Ok(TriangleMesh::read_ply(path)?.vertices),
        _ => {
            let reader = BufReader::new(std::fs::File::open(path)?);
            let mut pts = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let perr = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
                let nums: Vec<f64> = line
                    .split_whitespace()
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|_| perr(format!("bad number '{t}'"))))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(perr("expected x y z".into()));
                }
                pts.push(Vector3::new(nums[0], nums[1], nums[2]));
            }
            Ok(pts)
        }
    }
}

pub fn write_point_cloud_xyz(points: &[Vector3<f64>], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in points {
        writeln!(f, "{:e} {:e} {:e}", p.x, p.y, p.z)?;
    }
    f.flush()?;
    Ok(())
}
