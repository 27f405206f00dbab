//! Sequence loading and validation in a KITTI-compatible on-disk layout.
//!
//! Layout per sequence directory:
//!   scans/%06d.bin   little-endian f32, stride 4 (x, y, z, intensity)
//!   poses.txt        12 ASCII floats per line, row-major 3x4 [R|t]
//!   segments.csv     header `frame,segment`, 1-based segment ids
//!   times.txt        optional, one float (seconds) per line

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    Missing(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent sequence: {what}: expected {expected}, got {got}")]
    Consistency {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("parse error in {path} at {location}: {msg}")]
    Parse {
        path: PathBuf,
        location: String,
        msg: String,
    },
    #[error("invalid pose at frame {frame}: |det(R) - 1| = {det_err:.3e}")]
    InvalidPose { frame: usize, det_err: f64 },
    #[error("point cloud for frame {frame} contains non-finite coordinates")]
    NonFinitePoints { frame: usize },
    #[error("empty point cloud (frame {frame})")]
    EmptyCloud { frame: usize },
    #[error("segment id {segment} out of range 1..={num_segments} at frame {frame}")]
    SegmentOutOfRange {
        frame: usize,
        segment: u32,
        num_segments: u32,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One LiDAR scan in the sensor frame, coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub frame_index: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// n×3 tensor view of the points.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            data.extend_from_slice(p);
        }
        Tensor::new(vec![self.points.len(), 3], data).expect("cloud is non-empty")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.points.is_empty() {
            return Err(DataError::EmptyCloud {
                frame: self.frame_index,
            });
        }
        if self
            .points
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(DataError::NonFinitePoints {
                frame: self.frame_index,
            });
        }
        Ok(())
    }
}

/// World-frame pose: position plus an orthonormal rotation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: [0.0; 3],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn det(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn validate(&self, frame: usize) -> Result<(), DataError> {
        let det_err = (self.det() - 1.0).abs();
        if det_err >= 1e-6 {
            return Err(DataError::InvalidPose { frame, det_err });
        }
        Ok(())
    }
}

/// Per-sequence bookkeeping: frame count and the frame → segment map.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub name: String,
    pub frame_count: usize,
    /// 1-based segment id per frame index.
    pub segment_of: Vec<u32>,
    pub num_segments: u32,
}

/// One frame: scan, pose, segment label, optional timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub segment: u32,
    pub timestamp: Option<f64>,
}

fn scan_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("scans").join(format!("{frame:06}.bin"))
}

fn read_scan(path: &Path, frame: usize) -> Result<PointCloud, DataError> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            location: format!("byte {}", bytes.len() - bytes.len() % 16),
            msg: format!(
                "file length {} is not a multiple of 16 (x,y,z,intensity f32 stride)",
                bytes.len()
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap());
        // intensity is read and discarded; the model consumes xyz only
        points.push([x as f64, y as f64, z as f64]);
    }
    let cloud = PointCloud {
        points,
        frame_index: frame,
    };
    cloud.validate()?;
    Ok(cloud)
}

fn read_poses(path: &Path) -> Result<Vec<Pose>, DataError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    let reader = BufReader::new(file);
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            location: format!("line {}", lineno + 1),
            msg: e.to_string(),
        })?;
        if vals.len() != 12 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", lineno + 1),
                msg: format!("expected 12 values ([R|t] row-major), got {}", vals.len()),
            });
        }
        let pose = Pose {
            rotation: [
                [vals[0], vals[1], vals[2]],
                [vals[4], vals[5], vals[6]],
                [vals[8], vals[9], vals[10]],
            ],
            position: [vals[3], vals[7], vals[11]],
        };
        pose.validate(poses.len())?;
        poses.push(pose);
    }
    Ok(poses)
}

fn read_segments(path: &Path) -> Result<Vec<(usize, u32)>, DataError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 {
            if trimmed != "frame,segment" {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    location: "line 1".into(),
                    msg: format!("expected header `frame,segment`, got `{trimmed}`"),
                });
            }
            continue;
        }
        let mut parts = trimmed.split(',');
        let parse = |s: Option<&str>, what: &str| -> Result<u64, DataError> {
            s.ok_or_else(|| DataError::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", lineno + 1),
                msg: format!("missing {what} column"),
            })?
            .trim()
            .parse::<u64>()
            .map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", lineno + 1),
                msg: e.to_string(),
            })
        };
        let frame = parse(parts.next(), "frame")? as usize;
        let segment = parse(parts.next(), "segment")? as u32;
        out.push((frame, segment));
    }
    Ok(out)
}

fn read_times(path: &Path) -> Result<Vec<f64>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.trim().parse::<f64>().map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            location: format!("line {}", lineno + 1),
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn count_scans(dir: &Path) -> Result<usize, DataError> {
    let scans_dir = dir.join("scans");
    let entries = fs::read_dir(&scans_dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(scans_dir.clone())
        } else {
            io_err(&scans_dir)(e)
        }
    })?;
    let mut frames = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(io_err(&scans_dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".bin") {
            if stem.len() == 6 && stem.chars().all(|c| c.is_ascii_digit()) {
                frames.insert(stem.parse::<usize>().unwrap());
            }
        }
    }
    // frames must be 0..n contiguous
    let n = frames.len();
    if let Some(&max) = frames.iter().next_back() {
        if max != n - 1 {
            return Err(DataError::Consistency {
                what: format!("scan frame indices in {} are not contiguous", scans_dir.display()),
                expected: n - 1,
                got: max,
            });
        }
    }
    Ok(n)
}

/// Load a sequence directory, validating scan/pose/segment consistency.
pub fn load_sequence(dir: &Path) -> Result<(Vec<ScanRecord>, SequenceMeta), DataError> {
    let n_scans = count_scans(dir)?;
    let poses = read_poses(&dir.join("poses.txt"))?;
    if poses.len() != n_scans {
        return Err(DataError::Consistency {
            what: "poses.txt line count vs scan file count".into(),
            expected: n_scans,
            got: poses.len(),
        });
    }
    let segments = read_segments(&dir.join("segments.csv"))?;
    if segments.len() != n_scans {
        return Err(DataError::Consistency {
            what: "segments.csv row count vs scan file count".into(),
            expected: n_scans,
            got: segments.len(),
        });
    }
    let mut segment_of = vec![0u32; n_scans];
    for (frame, seg) in &segments {
        if *frame >= n_scans {
            return Err(DataError::Consistency {
                what: format!("segments.csv frame index {frame} out of range"),
                expected: n_scans,
                got: *frame,
            });
        }
        segment_of[*frame] = *seg;
    }
    let num_segments = segment_of.iter().copied().max().unwrap_or(0);
    for (frame, &seg) in segment_of.iter().enumerate() {
        if seg == 0 || seg > num_segments {
            return Err(DataError::SegmentOutOfRange {
                frame,
                segment: seg,
                num_segments,
            });
        }
    }

    let times_path = dir.join("times.txt");
    let times = if times_path.exists() {
        let t = read_times(&times_path)?;
        if t.len() != n_scans {
            return Err(DataError::Consistency {
                what: "times.txt line count vs scan file count".into(),
                expected: n_scans,
                got: t.len(),
            });
        }
        Some(t)
    } else {
        None
    };

    let mut records = Vec::with_capacity(n_scans);
    for frame in 0..n_scans {
        let cloud = read_scan(&scan_path(dir, frame), frame)?;
        records.push(ScanRecord {
            cloud,
            pose: poses[frame].clone(),
            segment: segment_of[frame],
            timestamp: times.as_ref().map(|t| t[frame]),
        });
    }

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let meta = SequenceMeta {
        name,
        frame_count: n_scans,
        segment_of,
        num_segments,
    };
    Ok((records, meta))
}

/// Write a sequence in the on-disk layout. Inverse of `load_sequence` for
/// f32-representable coordinates.
pub fn save_sequence(dir: &Path, records: &[ScanRecord]) -> Result<(), DataError> {
    let scans_dir = dir.join("scans");
    fs::create_dir_all(&scans_dir).map_err(io_err(&scans_dir))?;

    for (frame, rec) in records.iter().enumerate() {
        let path = scan_path(dir, frame);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for p in &rec.cloud.points {
            for &coord in p {
                w.write_all(&(coord as f32).to_le_bytes())
                    .map_err(io_err(&path))?;
            }
            w.write_all(&0f32.to_le_bytes()).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }

    let poses_path = dir.join("poses.txt");
    let file = fs::File::create(&poses_path).map_err(io_err(&poses_path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let r = &rec.pose.rotation;
        let t = &rec.pose.position;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2]
        )
        .map_err(io_err(&poses_path))?;
    }
    w.flush().map_err(io_err(&poses_path))?;

    let seg_path = dir.join("segments.csv");
    let file = fs::File::create(&seg_path).map_err(io_err(&seg_path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "frame,segment").map_err(io_err(&seg_path))?;
    for (frame, rec) in records.iter().enumerate() {
        writeln!(w, "{frame},{}", rec.segment).map_err(io_err(&seg_path))?;
    }
    w.flush().map_err(io_err(&seg_path))?;

    if records.iter().all(|r| r.timestamp.is_some()) && !records.is_empty() {
        let times_path = dir.join("times.txt");
        let file = fs::File::create(&times_path).map_err(io_err(&times_path))?;
        let mut w = BufWriter::new(file);
        for rec in records {
            writeln!(w, "{}", rec.timestamp.unwrap()).map_err(io_err(&times_path))?;
        }
        w.flush().map_err(io_err(&times_path))?;
    }
    Ok(())
}

/// Resample a cloud to exactly `target_n` points, deterministically per seed.
///
/// With n ≥ target_n: uniform sampling without replacement. With n < target_n:
/// every original point is kept and the remainder is drawn with replacement.
pub fn downsample(cloud: &PointCloud, target_n: usize, seed: u64) -> Result<PointCloud, DataError> {
    if cloud.points.is_empty() {
        return Err(DataError::EmptyCloud {
            frame: cloud.frame_index,
        });
    }
    assert!(target_n >= 1, "target_n must be >= 1");
    let n = cloud.points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if n >= target_n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(target_n);
        idx.sort_unstable();
        idx.into_iter().map(|i| cloud.points[i]).collect()
    } else {
        let mut pts = cloud.points.clone();
        for _ in n..target_n {
            pts.push(cloud.points[rng.gen_range(0..n)]);
        }
        pts
    };
    Ok(PointCloud {
        points,
        frame_index: cloud.frame_index,
    })
}

/// Rotate all points around the z-axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|&[x, y, z]| [c * x - s * y, s * x + c * y, z])
        .collect();
    PointCloud {
        points,
        frame_index: cloud.frame_index,
    }
}
