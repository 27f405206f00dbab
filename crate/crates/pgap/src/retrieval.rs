//! Descriptor database, exact KNN queries, recall metrics, and the runtime
//! benchmark.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mining::GroundTruthTable;
use crate::model::{Descriptor, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("descriptor dimension mismatch: database {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("descriptor for frame {frame} is not unit norm (|norm - 1| = {err:.3e})")]
    NotUnitNorm { frame: usize, err: f64 },
    #[error("frames must be appended in order: last {last}, got {got}")]
    OutOfOrder { last: usize, got: usize },
    #[error("ground truth covers {expected} frames, database has {got}")]
    GroundTruthMismatch { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed descriptor dump {path}: {msg}")]
    DumpFormat {
        path: std::path::PathBuf,
        msg: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One database row: descriptor plus frame metadata.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub frame: usize,
    pub position: [f64; 3],
    pub segment: u32,
    pub values: Vec<f64>,
}

/// Append-only, frame-ordered store of unit-norm descriptors.
#[derive(Debug, Clone, Default)]
pub struct DescriptorDatabase {
    entries: Vec<DbEntry>,
    dim: Option<usize>,
}

impl DescriptorDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn append(
        &mut self,
        frame: usize,
        position: [f64; 3],
        segment: u32,
        descriptor: &Descriptor,
    ) -> Result<(), RetrievalError> {
        if let Some(dim) = self.dim {
            if descriptor.dim() != dim {
                return Err(RetrievalError::DimMismatch {
                    expected: dim,
                    got: descriptor.dim(),
                });
            }
        } else {
            self.dim = Some(descriptor.dim());
        }
        let err = (descriptor.norm() - 1.0).abs();
        if err >= 1e-6 {
            return Err(RetrievalError::NotUnitNorm { frame, err });
        }
        if let Some(last) = self.entries.last() {
            if frame <= last.frame {
                return Err(RetrievalError::OutOfOrder {
                    last: last.frame,
                    got: frame,
                });
            }
        }
        self.entries.push(DbEntry {
            frame,
            position,
            segment,
            values: descriptor.values.clone(),
        });
        Ok(())
    }

    /// Exhaustive k-nearest-neighbor query over entries accepted by `mask`.
    ///
    /// Results are sorted by ascending Euclidean distance, ties broken by
    /// lower frame index; fewer than k entries are returned when the
    /// candidate set is smaller than k.
    pub fn knn(
        &self,
        query: &[f64],
        k: usize,
        mask: impl Fn(&DbEntry) -> bool,
    ) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = self
            .entries
            .iter()
            .filter(|e| mask(e))
            .map(|e| {
                let d = e
                    .values
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (e.frame, d)
            })
            .collect();
        hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

/// Recall metrics over one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallReport {
    /// recall@k for k = 1..=25 (index 0 is k=1).
    pub recall_at_k: Vec<f64>,
    pub recall_at_1pct: f64,
    /// Per-segment recall@1, keyed by segment id.
    pub per_segment_recall_at_1: std::collections::BTreeMap<u32, f64>,
    /// Queries with a non-empty true set (the recall denominators).
    pub query_count: usize,
    /// Queries excluded for empty true or candidate sets.
    pub excluded_queries: usize,
    pub segment_aware: bool,
}

impl RecallReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall_at_k[k - 1]
    }
}

pub const MAX_RECALL_K: usize = 25;

/// Evaluate recall over the incremental-database protocol: for each query,
/// candidates are all frames at least the exclusion window older.
pub fn evaluate(
    db: &DescriptorDatabase,
    ground_truth: &GroundTruthTable,
) -> Result<RecallReport, RetrievalError> {
    if ground_truth.true_sets.len() != db.len() {
        return Err(RetrievalError::GroundTruthMismatch {
            expected: ground_truth.true_sets.len(),
            got: db.len(),
        });
    }
    let window = ground_truth.revisit_exclusion_window;
    let mut hits_at_k = vec![0usize; MAX_RECALL_K];
    let mut hits_1pct = 0usize;
    let mut per_segment: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
    let mut query_count = 0usize;
    let mut excluded = 0usize;

    for (qi, query) in db.entries().iter().enumerate() {
        let true_set = &ground_truth.true_sets[qi];
        let candidates = db
            .entries()
            .iter()
            .filter(|e| e.frame + window <= query.frame)
            .count();
        if true_set.is_empty() || candidates == 0 {
            excluded += 1;
            continue;
        }
        query_count += 1;
        let k_1pct = ((candidates as f64) * 0.01).ceil().max(1.0) as usize;
        let k_max = MAX_RECALL_K.max(k_1pct);
        let ranked = db.knn(&query.values, k_max, |e| e.frame + window <= query.frame);

        let is_true = |frame: usize| true_set.contains(&frame);
        let first_hit = ranked.iter().position(|&(f, _)| is_true(f));
        if let Some(rank) = first_hit {
            for k in rank..MAX_RECALL_K {
                hits_at_k[k] += 1;
            }
            if rank < k_1pct {
                hits_1pct += 1;
            }
        }
        let seg = per_segment.entry(query.segment).or_insert((0, 0));
        seg.1 += 1;
        if first_hit == Some(0) {
            seg.0 += 1;
        }
    }

    let denom = query_count.max(1) as f64;
    Ok(RecallReport {
        recall_at_k: hits_at_k.iter().map(|&h| h as f64 / denom).collect(),
        recall_at_1pct: hits_1pct as f64 / denom,
        per_segment_recall_at_1: per_segment
            .into_iter()
            .map(|(seg, (hit, total))| (seg, hit as f64 / total.max(1) as f64))
            .collect(),
        query_count,
        excluded_queries: excluded,
        segment_aware: ground_truth.segment_aware,
    })
}

/// Timing statistics for descriptor extraction over batches of scans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub batch_size: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub param_count: usize,
}

/// Wall-clock time to extract descriptors for a batch of scans; retrieval is
/// not included. One warmup batch runs before timing.
pub fn benchmark_runtime(
    model: &Model,
    scans: &[Tensor],
    repetitions: usize,
) -> Result<BenchmarkReport, RetrievalError> {
    assert!(repetitions >= 1);
    for scan in scans {
        model.describe(scan)?;
    }
    let mut times_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for scan in scans {
            std::hint::black_box(model.describe(scan)?);
        }
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times_ms.iter().sum::<f64>() / repetitions as f64;
    let var = if repetitions > 1 {
        times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repetitions - 1) as f64
    } else {
        0.0
    };
    Ok(BenchmarkReport {
        batch_size: scans.len(),
        repetitions,
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        param_count: model.param_count(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    dim: usize,
    count: usize,
    sequence: String,
    frames: Vec<usize>,
    segments: Vec<u32>,
}

const DUMP_MAGIC: &[u8; 8] = b"PGAPDESC";

/// Write a descriptor dump: magic, u64 LE JSON header length, JSON header,
/// then contiguous little-endian f32 rows.
pub fn save_descriptor_dump(
    path: &Path,
    db: &DescriptorDatabase,
    sequence: &str,
) -> Result<(), RetrievalError> {
    let io = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = DumpHeader {
        dim: db.dim().unwrap_or(0),
        count: db.len(),
        sequence: sequence.to_string(),
        frames: db.entries().iter().map(|e| e.frame).collect(),
        segments: db.entries().iter().map(|e| e.segment).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(DUMP_MAGIC).map_err(io)?;
    file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    for e in db.entries() {
        for &v in &e.values {
            file.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Read a dump written by `save_descriptor_dump`. Values come back as f32
/// widened to f64; rows are re-normalized to recover unit norm.
pub fn load_descriptor_dump(
    path: &Path,
) -> Result<(Vec<(usize, u32, Vec<f64>)>, String), RetrievalError> {
    let io = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |msg: String| RetrievalError::DumpFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(io)?;
    if bytes.len() < 16 || &bytes[..8] != DUMP_MAGIC {
        return Err(bad("missing PGAPDESC magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(bad("truncated header".into()));
    }
    let header: DumpHeader = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| bad(format!("header json: {e}")))?;
    let need = header.count * header.dim * 4;
    if bytes.len() != 16 + json_len + need {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            need,
            bytes.len() - 16 - json_len
        )));
    }
    let mut rows = Vec::with_capacity(header.count);
    let data = &bytes[16 + json_len..];
    for i in 0..header.count {
        let mut values: Vec<f64> = data[i * header.dim * 4..(i + 1) * header.dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        rows.push((header.frames[i], header.segments[i], values));
    }
    Ok((rows, header.sequence))
}

/// Write a recall report as JSON plus a per-k / per-segment CSV.
pub fn write_report(prefix: &Path, report: &RecallReport) -> Result<(), RetrievalError> {
    let json_path = prefix.with_extension("json");
    let io = |path: &Path| {
        let p = path.to_path_buf();
        move |source| RetrievalError::Io { path: p, source }
    };
    std::fs::write(
        &json_path,
        serde_json::to_vec_pretty(report).expect("report serializes"),
    )
    .map_err(io(&json_path))?;

    let csv_path = prefix.with_extension("csv");
    let mut file = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
    writeln!(file, "metric,key,value").map_err(io(&csv_path))?;
    for (i, r) in report.recall_at_k.iter().enumerate() {
        writeln!(file, "recall_at_k,{},{}", i + 1, r).map_err(io(&csv_path))?;
    }
    writeln!(file, "recall_at_1pct,,{}", report.recall_at_1pct).map_err(io(&csv_path))?;
    for (seg, r) in &report.per_segment_recall_at_1 {
        writeln!(file, "segment_recall_at_1,{seg},{r}").map_err(io(&csv_path))?;
    }
    writeln!(file, "query_count,,{}", report.query_count).map_err(io(&csv_path))?;
    writeln!(file, "excluded_queries,,{}", report.excluded_queries).map_err(io(&csv_path))?;
    Ok(())
}
