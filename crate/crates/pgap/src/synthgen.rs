//! Deterministic synthetic orchard sequences: parallel tree rows, a
//! serpentine trajectory with repeated laps, and per-frame segment labels
//! (one segment per row plus two field extremities).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataio::{PointCloud, Pose, ScanRecord, SequenceMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid orchard spec: {0}")]
    InvalidSpec(String),
    #[error("frame {frame} sees no points within sensor range {range} m")]
    EmptyScan { frame: usize, range: f64 },
}

/// Parameters of a synthetic orchard sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OrchardSpec {
    pub rows: usize,
    pub row_length: f64,
    pub row_spacing: f64,
    pub trees_per_row: usize,
    pub points_per_tree: usize,
    pub noise_sigma: f64,
    pub laps: usize,
    pub scan_spacing: f64,
    pub sensor_range: f64,
    pub seed: u64,
}

impl Default for OrchardSpec {
    fn default() -> Self {
        OrchardSpec {
            rows: 3,
            row_length: 20.0,
            row_spacing: 3.0,
            trees_per_row: 10,
            points_per_tree: 60,
            noise_sigma: 0.02,
            laps: 2,
            scan_spacing: 0.5,
            sensor_range: 10.0,
            seed: 0,
        }
    }
}

impl OrchardSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.rows < 1 || self.trees_per_row < 1 || self.points_per_tree < 1 {
            return Err(SynthError::InvalidSpec(
                "rows, trees_per_row, and points_per_tree must all be >= 1".into(),
            ));
        }
        if self.laps < 2 {
            return Err(SynthError::InvalidSpec(
                "laps must be >= 2 so revisits exist for positive pairs".into(),
            ));
        }
        if self.row_length <= 0.0
            || self.row_spacing <= 0.0
            || self.scan_spacing <= 0.0
            || self.sensor_range <= 0.0
        {
            return Err(SynthError::InvalidSpec(
                "row_length, row_spacing, scan_spacing, and sensor_range must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of segments: one per row plus the two field extremities.
    pub fn num_segments(&self) -> u32 {
        self.rows as u32 + 2
    }

    /// Arc length of one lap of the serpentine trajectory.
    pub fn lap_length(&self) -> f64 {
        self.rows as f64 * self.row_length + (self.rows - 1) as f64 * self.row_spacing
    }

    pub fn frames_per_lap(&self) -> usize {
        (self.lap_length() / self.scan_spacing).ceil() as usize
    }
}

/// Global tree map: one point list with the originating row per point.
pub struct PlantMap {
    pub points: Vec<[f64; 3]>,
    /// 0-based row id per point.
    pub row_of: Vec<usize>,
    /// Trunk positions per row.
    pub trunks: Vec<Vec<[f64; 2]>>,
}

/// Grow the tree clusters: a vertical cone of points per trunk.
pub fn plant_map(spec: &OrchardSpec) -> Result<PlantMap, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut row_of = Vec::new();
    let mut trunks = Vec::new();

    for row in 0..spec.rows {
        let y = row as f64 * spec.row_spacing;
        let mut row_trunks = Vec::new();
        for tree in 0..spec.trees_per_row {
            let x = if spec.trees_per_row == 1 {
                spec.row_length / 2.0
            } else {
                tree as f64 * spec.row_length / (spec.trees_per_row - 1) as f64
            };
            row_trunks.push([x, y]);
            let height = rng.gen_range(2.0..3.0);
            let base_radius = rng.gen_range(0.3..0.6);
            for _ in 0..spec.points_per_tree {
                let h = rng.gen_range(0.0..height);
                let r = base_radius * (1.0 - h / height) * rng.gen_range(0.0f64..1.0).sqrt();
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                points.push([x + r * theta.cos(), y + r * theta.sin(), h]);
                row_of.push(row);
            }
        }
        trunks.push(row_trunks);
    }
    Ok(PlantMap {
        points,
        row_of,
        trunks,
    })
}

/// One leg of the serpentine path.
struct PathLeg {
    start: [f64; 2],
    end: [f64; 2],
    /// 1-based segment label for frames on this leg.
    segment: u32,
}

fn serpentine(spec: &OrchardSpec) -> Vec<PathLeg> {
    let far_segment = spec.rows as u32 + 1; // x = row_length end
    let near_segment = spec.rows as u32 + 2; // x = 0 end
    let mut legs = Vec::new();
    for row in 0..spec.rows {
        let y = row as f64 * spec.row_spacing;
        let (x0, x1) = if row % 2 == 0 {
            (0.0, spec.row_length)
        } else {
            (spec.row_length, 0.0)
        };
        legs.push(PathLeg {
            start: [x0, y],
            end: [x1, y],
            segment: row as u32 + 1,
        });
        if row + 1 < spec.rows {
            let y_next = (row + 1) as f64 * spec.row_spacing;
            legs.push(PathLeg {
                start: [x1, y],
                end: [x1, y_next],
                segment: if x1 > 0.0 { far_segment } else { near_segment },
            });
        }
    }
    legs
}

/// Position, heading, and segment at arc length `s` along one lap.
fn sample_path(legs: &[PathLeg], s: f64) -> ([f64; 2], f64, u32) {
    let mut remaining = s;
    for leg in legs {
        let dx = leg.end[0] - leg.start[0];
        let dy = leg.end[1] - leg.start[1];
        let len = (dx * dx + dy * dy).sqrt();
        if remaining <= len || std::ptr::eq(leg, legs.last().unwrap()) {
            let t = (remaining / len).min(1.0);
            let pos = [leg.start[0] + t * dx, leg.start[1] + t * dy];
            let heading = dy.atan2(dx);
            return (pos, heading, leg.segment);
        }
        remaining -= len;
    }
    unreachable!("arc length exceeds path")
}

/// Generate a full sequence: scans as range-limited sensor-frame views of the
/// tree map along the trajectory, with Gaussian noise and f32 quantization.
pub fn generate(spec: &OrchardSpec) -> Result<(Vec<ScanRecord>, SequenceMeta), SynthError> {
    spec.validate()?;
    let map = plant_map(spec)?;
    let legs = serpentine(spec);
    let frames_per_lap = spec.frames_per_lap();
    let lap_length = spec.lap_length();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma validated non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED));

    let mut records = Vec::with_capacity(spec.laps * frames_per_lap);
    let mut segment_of = Vec::new();

    for lap in 0..spec.laps {
        for i in 0..frames_per_lap {
            let s = i as f64 * spec.scan_spacing;
            let (pos, heading, segment) = sample_path(&legs, s);
            let frame = records.len();
            let (sin_h, cos_h) = heading.sin_cos();
            let rotation = [
                [cos_h, -sin_h, 0.0],
                [sin_h, cos_h, 0.0],
                [0.0, 0.0, 1.0],
            ];

            let mut points = Vec::new();
            for p in &map.points {
                let dx = p[0] - pos[0];
                let dy = p[1] - pos[1];
                let dz = p[2];
                if (dx * dx + dy * dy + dz * dz).sqrt() > spec.sensor_range {
                    continue;
                }
                // world -> sensor frame: R^T (p - t), then noise, then f32 grid
                let lx = cos_h * dx + sin_h * dy;
                let ly = -sin_h * dx + cos_h * dy;
                let nx = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let ny = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let nz = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                points.push([
                    (lx + nx) as f32 as f64,
                    (ly + ny) as f32 as f64,
                    (dz + nz) as f32 as f64,
                ]);
            }
            if points.is_empty() {
                return Err(SynthError::EmptyScan {
                    frame,
                    range: spec.sensor_range,
                });
            }
            records.push(ScanRecord {
                cloud: PointCloud {
                    points,
                    frame_index: frame,
                },
                pose: Pose {
                    position: [pos[0], pos[1], 0.0],
                    rotation,
                },
                segment,
                timestamp: Some(lap as f64 * lap_length + s),
            });
            segment_of.push(segment);
        }
    }

    let meta = SequenceMeta {
        name: format!("orchard-{}", spec.seed),
        frame_count: records.len(),
        segment_of,
        num_segments: spec.num_segments(),
    };
    Ok((records, meta))
}
