//! Training-tuple construction and evaluation ground truth from poses and
//! segment labels.
//!
//! A positive pair must satisfy three constraints: within `r_th` meters,
//! older than the anchor by at least the revisit-exclusion window, and from
//! the same segment. Frames violating any constraint form the negative pool.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::ScanRecord;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error(
        "requested {requested} negatives but only {available} frames are in the negative pool"
    )]
    TooFewNegatives { requested: usize, available: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    /// Positive-pair radius in meters (training).
    pub r_th: f64,
    /// Minimum spacing between consecutive selected anchors, meters.
    pub anchor_min_spacing: f64,
    /// Negatives per tuple.
    pub num_negatives: usize,
    /// Positives and true revisits must be at least this many frames older.
    pub revisit_exclusion_window: usize,
    /// True-revisit radius for evaluation, meters.
    pub eval_radius: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            r_th: 2.0,
            anchor_min_spacing: 0.5,
            num_negatives: 20,
            revisit_exclusion_window: 50,
            eval_radius: 10.0,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.r_th <= 0.0 {
            return Err(MiningError::InvalidConfig("r_th must be positive".into()));
        }
        if self.num_negatives < 1 {
            return Err(MiningError::InvalidConfig(
                "num_negatives must be >= 1".into(),
            ));
        }
        if self.eval_radius < self.r_th {
            return Err(MiningError::InvalidConfig(
                "eval_radius must be >= r_th".into(),
            ));
        }
        Ok(())
    }
}

/// Anchor, its closest valid positive, and randomly drawn negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub anchor_segment: u32,
    pub positive_segment: u32,
    pub negative_segments: Vec<u32>,
}

/// Mining result plus bookkeeping counts.
#[derive(Debug, Clone, Default)]
pub struct MiningOutcome {
    pub tuples: Vec<TrainingTuple>,
    /// Anchor candidates that had no valid positive.
    pub anchors_without_positive: usize,
}

/// Per-query true-revisit sets for retrieval evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTable {
    /// Indexed by query frame; empty set means the query has no true revisit.
    pub true_sets: Vec<Vec<usize>>,
    pub segment_aware: bool,
    pub revisit_exclusion_window: usize,
}

fn planar_distance(a: &ScanRecord, b: &ScanRecord) -> f64 {
    let dx = a.pose.position[0] - b.pose.position[0];
    let dy = a.pose.position[1] - b.pose.position[1];
    let dz = a.pose.position[2] - b.pose.position[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// True when `candidate` satisfies all three positive constraints for `anchor`.
pub fn is_valid_positive(
    records: &[ScanRecord],
    anchor: usize,
    candidate: usize,
    config: &MiningConfig,
) -> bool {
    if candidate + config.revisit_exclusion_window > anchor {
        return false;
    }
    if records[candidate].segment != records[anchor].segment {
        return false;
    }
    planar_distance(&records[anchor], &records[candidate]) <= config.r_th
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 step over base xor salt
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mine training tuples: thinned anchors, closest valid positive, and
/// `num_negatives` uniform draws from the constraint-violating pool.
pub fn mine_tuples(
    records: &[ScanRecord],
    config: &MiningConfig,
) -> Result<MiningOutcome, MiningError> {
    config.validate()?;
    let mut outcome = MiningOutcome::default();
    let mut last_anchor_pos: Option<[f64; 3]> = None;

    for anchor in 0..records.len() {
        if let Some(last) = last_anchor_pos {
            let p = records[anchor].pose.position;
            let d = ((p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2)
                + (p[2] - last[2]).powi(2))
            .sqrt();
            if d < config.anchor_min_spacing {
                continue;
            }
        }

        // closest valid positive, ties broken by lower frame index
        let mut best: Option<(f64, usize)> = None;
        for candidate in 0..records.len() {
            if candidate == anchor || !is_valid_positive(records, anchor, candidate, config) {
                continue;
            }
            let d = planar_distance(&records[anchor], &records[candidate]);
            let better = match best {
                None => true,
                Some((bd, bi)) => d < bd || (d == bd && candidate < bi),
            };
            if better {
                best = Some((d, candidate));
            }
        }

        let Some((_, positive)) = best else {
            // spacing-eligible anchor with no valid positive: count and move on
            if anchor_has_any_neighbor(records, anchor, config) {
                outcome.anchors_without_positive += 1;
            }
            continue;
        };
        last_anchor_pos = Some(records[anchor].pose.position);

        let pool: Vec<usize> = (0..records.len())
            .filter(|&f| f != anchor && !is_valid_positive(records, anchor, f, config))
            .collect();
        if pool.len() < config.num_negatives {
            return Err(MiningError::TooFewNegatives {
                requested: config.num_negatives,
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, anchor as u64));
        let picked = rand::seq::index::sample(&mut rng, pool.len(), config.num_negatives);
        let mut negatives: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
        negatives.sort_unstable();

        outcome.tuples.push(TrainingTuple {
            anchor,
            positive,
            negative_segments: negatives.iter().map(|&f| records[f].segment).collect(),
            anchor_segment: records[anchor].segment,
            positive_segment: records[positive].segment,
            negatives,
        });
    }
    Ok(outcome)
}

fn anchor_has_any_neighbor(records: &[ScanRecord], anchor: usize, config: &MiningConfig) -> bool {
    // a frame only counts as a failed anchor if something is nearby at all
    records
        .iter()
        .enumerate()
        .any(|(f, r)| f != anchor && planar_distance(&records[anchor], r) <= config.r_th)
}

/// Build per-query true-revisit sets.
///
/// A true revisit is at least `revisit_exclusion_window` frames older than
/// the query, within `eval_radius`, and (when segment-aware) in the query's
/// segment.
pub fn build_ground_truth(
    records: &[ScanRecord],
    config: &MiningConfig,
    segment_aware: bool,
) -> GroundTruthTable {
    let mut true_sets = Vec::with_capacity(records.len());
    for query in 0..records.len() {
        let mut set = Vec::new();
        for candidate in 0..records.len() {
            if candidate + config.revisit_exclusion_window > query {
                continue;
            }
            if segment_aware && records[candidate].segment != records[query].segment {
                continue;
            }
            if planar_distance(&records[query], &records[candidate]) <= config.eval_radius {
                set.push(candidate);
            }
        }
        true_sets.push(set);
    }
    GroundTruthTable {
        true_sets,
        segment_aware,
        revisit_exclusion_window: config.revisit_exclusion_window,
    }
}

/// CSV dump: `anchor,positive,neg1..negm`, one tuple per line.
pub fn write_tuples_csv(path: &Path, tuples: &[TrainingTuple]) -> Result<(), MiningError> {
    let io = |source| MiningError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    let m = tuples.first().map(|t| t.negatives.len()).unwrap_or(0);
    let header: Vec<String> = ["anchor".to_string(), "positive".to_string()]
        .into_iter()
        .chain((1..=m).map(|j| format!("neg{j}")))
        .collect();
    writeln!(file, "{}", header.join(",")).map_err(io)?;
    for t in tuples {
        let mut fields = vec![t.anchor.to_string(), t.positive.to_string()];
        fields.extend(t.negatives.iter().map(|n| n.to_string()));
        writeln!(file, "{}", fields.join(",")).map_err(io)?;
    }
    Ok(())
}

/// CSV dump: `query,true1 true2 ...` (space-separated true set).
pub fn write_ground_truth_csv(path: &Path, table: &GroundTruthTable) -> Result<(), MiningError> {
    let io = |source| MiningError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    writeln!(file, "query,true_revisits").map_err(io)?;
    for (query, set) in table.true_sets.iter().enumerate() {
        let joined: Vec<String> = set.iter().map(|f| f.to_string()).collect();
        writeln!(file, "{query},{}", joined.join(" ")).map_err(io)?;
    }
    Ok(())
}
