//! Losses, optimizer, and the training loop.
//!
//! Per tuple: descriptors for anchor, positive, and m negatives; triplet
//! hinge on anchor-positive vs hardest-negative distance; optional segment
//! classification loss over every tuple member; weighted combination;
//! one AdamW step per tuple.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{downsample, rotate_z, DataError, ScanRecord, SequenceMeta};
use crate::mining::{build_ground_truth, mine_tuples, MiningConfig, MiningError};
use crate::model::{EpochStats, Model, ModelConfig, ModelError};
use crate::retrieval::{evaluate, DescriptorDatabase, RetrievalError};
use crate::tensor::{ParamSet, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),
    #[error("empty negative set in triplet loss")]
    EmptyNegatives,
    #[error("segment label {label} out of range 1..={num_segments}")]
    LabelOutOfRange { label: u32, num_segments: usize },
    #[error("non-finite gradient at parameter {param} during epoch {epoch}; training aborted")]
    NonFiniteGradient { param: usize, epoch: usize },
    #[error("no trainable tuples: {0}")]
    NoTuples(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the triplet loss; the segment loss gets 1 - alpha.
    pub alpha: f64,
    pub slc_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            alpha: 0.5,
            slc_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.margin < 0.0 {
            return Err(TrainError::InvalidLossConfig("margin must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::InvalidLossConfig(
                "alpha must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

/// Triplet hinge on a tape: max(d_AP - d_AN + margin, 0) with the hardest
/// negative chosen by minimum anchor distance, ties to the lowest index.
pub struct TripletOutcome {
    pub loss: Var,
    pub d_ap: f64,
    pub d_an: f64,
    pub hardest_index: usize,
}

pub fn lazy_triplet_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    margin: f64,
) -> Result<TripletOutcome, TrainError> {
    if negatives.is_empty() {
        return Err(TrainError::EmptyNegatives);
    }
    let d_ap = tape.distance(anchor, positive)?;
    let mut hardest_index = 0;
    let mut hardest_var = tape.distance(anchor, negatives[0])?;
    let mut hardest_val = tape.value(hardest_var).item();
    for (j, &neg) in negatives.iter().enumerate().skip(1) {
        let d = tape.distance(anchor, neg)?;
        let v = tape.value(d).item();
        if v < hardest_val {
            hardest_val = v;
            hardest_var = d;
            hardest_index = j;
        }
    }
    let gap = tape.sub(d_ap, hardest_var)?;
    let shifted = tape.affine(gap, 1.0, margin);
    let loss = tape.relu(shifted);
    Ok(TripletOutcome {
        loss,
        d_ap: tape.value(d_ap).item(),
        d_an: hardest_val,
        hardest_index,
    })
}

/// Sum of negative log-likelihoods over all tuple members.
///
/// `labels` are 1-based segment ids matching the log-prob vars.
pub fn slc_loss(
    tape: &mut Tape,
    log_probs: &[Var],
    labels: &[u32],
    num_segments: usize,
) -> Result<Var, TrainError> {
    assert_eq!(log_probs.len(), labels.len());
    let mut total: Option<Var> = None;
    for (&lp, &label) in log_probs.iter().zip(labels) {
        if label < 1 || label as usize > num_segments {
            return Err(TrainError::LabelOutOfRange {
                label,
                num_segments,
            });
        }
        let nll = tape.nll_pick(lp, (label - 1) as usize)?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    Ok(total.expect("labels checked non-empty"))
}

/// alpha * triplet + (1 - alpha) * slc.
pub fn combined_loss(
    tape: &mut Tape,
    triplet: Var,
    slc: Var,
    alpha: f64,
) -> Result<Var, TrainError> {
    let weighted_t = tape.affine(triplet, alpha, 0.0);
    let weighted_s = tape.affine(slc, 1.0 - alpha, 0.0);
    Ok(tape.add(weighted_t, weighted_s)?)
}

/// AdamW: Adam moment updates with bias correction, then decoupled decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: &OptimConfig) -> Self {
        AdamW {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step_count: 0,
        }
    }

    /// One update over every parameter; gradients must be populated.
    pub fn step(&mut self, params: &mut ParamSet, epoch: usize) -> Result<(), TrainError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            // decoupled weight decay applies regardless of the gradient
            let decay = 1.0 - self.learning_rate * self.weight_decay;
            let grads = p.grad.data();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient { param: idx, epoch });
            }
            let grads = grads.to_vec();
            let values = p.value.data_mut();
            for k in 0..values.len() {
                let g = grads[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                values[k] = values[k] * decay
                    - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Everything `train` needs beyond the data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub mining: MiningConfig2,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Points per scan after downsampling.
    pub num_points: usize,
    /// Random z-rotation augmentation during training.
    pub augment: bool,
    /// Cap on tuples per epoch (subsampled deterministically); 0 = no cap.
    pub max_tuples_per_epoch: usize,
}

/// Serializable mirror of `MiningConfig` (kept separate so mining itself has
/// no serde dependency surface).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig2 {
    pub r_th: f64,
    pub anchor_min_spacing: f64,
    pub num_negatives: usize,
    pub revisit_exclusion_window: usize,
    pub eval_radius: f64,
    pub seed: u64,
}

impl Default for MiningConfig2 {
    fn default() -> Self {
        let m = MiningConfig::default();
        MiningConfig2 {
            r_th: m.r_th,
            anchor_min_spacing: m.anchor_min_spacing,
            num_negatives: m.num_negatives,
            revisit_exclusion_window: m.revisit_exclusion_window,
            eval_radius: m.eval_radius,
            seed: m.seed,
        }
    }
}

impl From<&MiningConfig2> for MiningConfig {
    fn from(m: &MiningConfig2) -> MiningConfig {
        MiningConfig {
            r_th: m.r_th,
            anchor_min_spacing: m.anchor_min_spacing,
            num_negatives: m.num_negatives,
            revisit_exclusion_window: m.revisit_exclusion_window,
            eval_radius: m.eval_radius,
            seed: m.seed,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            model: ModelConfig::default(),
            mining: MiningConfig2::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            num_points: 10_000,
            augment: true,
            max_tuples_per_epoch: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_recall: f64,
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed-seed downsample used for validation and evaluation.
pub fn eval_cloud(record: &ScanRecord, num_points: usize) -> Result<crate::tensor::Tensor, DataError> {
    let ds = downsample(
        &record.cloud,
        num_points,
        derive_seed(0xE7A1, record.cloud.frame_index as u64),
    )?;
    Ok(ds.to_tensor())
}

/// Full validation recall report over the segment-aware incremental
/// protocol, using the fixed-seed evaluation downsample.
pub fn validation_report(
    model: &Model,
    records: &[ScanRecord],
    mining: &MiningConfig,
    num_points: usize,
) -> Result<crate::retrieval::RecallReport, TrainError> {
    let mut db = DescriptorDatabase::new();
    let clouds: Vec<crate::tensor::Tensor> = records
        .iter()
        .map(|r| eval_cloud(r, num_points))
        .collect::<Result<_, _>>()?;
    let descriptors = crate::parallel::map(&clouds, |c| model.describe(c));
    for (record, d) in records.iter().zip(descriptors) {
        db.append(
            record.cloud.frame_index,
            record.pose.position,
            record.segment,
            &d?,
        )?;
    }
    let gt = build_ground_truth(records, mining, true);
    Ok(evaluate(&db, &gt)?)
}

/// Validation recall@1 over the segment-aware incremental protocol.
pub fn validation_recall_at_1(
    model: &Model,
    records: &[ScanRecord],
    mining: &MiningConfig,
    num_points: usize,
) -> Result<f64, TrainError> {
    Ok(validation_report(model, records, mining, num_points)?.recall_at(1))
}

/// Train on one or more sequences with per-epoch negative resampling,
/// validation-recall early stopping, and best-checkpoint tracking.
pub fn train(
    train_sequences: &[(Vec<ScanRecord>, SequenceMeta)],
    validation: &(Vec<ScanRecord>, SequenceMeta),
    settings: &TrainSettings,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    settings.loss.validate()?;
    let num_segments = train_sequences
        .iter()
        .map(|(_, meta)| meta.num_segments)
        .chain(std::iter::once(validation.1.num_segments))
        .max()
        .unwrap_or(2) as usize;
    let mut model_config = settings.model.clone();
    model_config.num_segments = num_segments.max(2);

    let mut model = Model::init(model_config, settings.optim.seed)?;
    let mut optimizer = AdamW::new(&model.params, &settings.optim);
    let base_mining: MiningConfig = (&settings.mining).into();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..settings.optim.max_epochs {
        // resample negatives via an epoch-derived mining seed
        let mut all_tuples: Vec<(usize, crate::mining::TrainingTuple)> = Vec::new();
        for (seq_idx, (records, _)) in train_sequences.iter().enumerate() {
            let mining = MiningConfig {
                seed: derive_seed(base_mining.seed, (epoch * 8191 + seq_idx) as u64),
                ..base_mining.clone()
            };
            let outcome = mine_tuples(records, &mining)?;
            all_tuples.extend(outcome.tuples.into_iter().map(|t| (seq_idx, t)));
        }
        if all_tuples.is_empty() {
            return Err(TrainError::NoTuples(
                "no anchor satisfied the positive-pair constraints in any training sequence"
                    .into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.optim.seed, epoch as u64));
        all_tuples.shuffle(&mut rng);
        if settings.max_tuples_per_epoch > 0 {
            all_tuples.truncate(settings.max_tuples_per_epoch);
        }

        let mut sum_loss = 0.0;
        let mut sum_triplet = 0.0;
        let mut sum_slc = 0.0;
        for (seq_idx, tuple) in &all_tuples {
            let records = &train_sequences[*seq_idx].0;
            let members: Vec<usize> = std::iter::once(tuple.anchor)
                .chain(std::iter::once(tuple.positive))
                .chain(tuple.negatives.iter().copied())
                .collect();
            let labels: Vec<u32> = std::iter::once(tuple.anchor_segment)
                .chain(std::iter::once(tuple.positive_segment))
                .chain(tuple.negative_segments.iter().copied())
                .collect();

            let mut tape = Tape::new();
            let mut descriptor_vars = Vec::with_capacity(members.len());
            for &frame in &members {
                let ds = downsample(
                    &records[frame].cloud,
                    settings.num_points,
                    rng.gen::<u64>(),
                )?;
                let cloud = if settings.augment {
                    rotate_z(&ds, rng.gen_range(0.0..std::f64::consts::TAU))
                } else {
                    ds
                };
                descriptor_vars.push(model.descriptor_var(&mut tape, &cloud.to_tensor())?);
            }

            let triplet = lazy_triplet_loss(
                &mut tape,
                descriptor_vars[0],
                descriptor_vars[1],
                &descriptor_vars[2..],
                settings.loss.margin,
            )?;
            let (loss, slc_value) = if settings.loss.slc_enabled {
                let log_probs: Vec<Var> = descriptor_vars
                    .iter()
                    .map(|&d| model.segment_logprobs_var(&mut tape, d))
                    .collect::<Result<_, _>>()?;
                let slc = slc_loss(&mut tape, &log_probs, &labels, model.config.num_segments)?;
                let slc_value = tape.value(slc).item();
                (
                    combined_loss(&mut tape, triplet.loss, slc, settings.loss.alpha)?,
                    slc_value,
                )
            } else {
                (triplet.loss, 0.0)
            };

            sum_loss += tape.value(loss).item();
            sum_triplet += tape.value(triplet.loss).item();
            sum_slc += slc_value;

            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            optimizer.step(&mut model.params, epoch)?;
        }

        let count = all_tuples.len() as f64;
        let val_recall = validation_recall_at_1(
            &model,
            &validation.0,
            &base_mining,
            settings.num_points,
        )?;
        let stats = EpochStats {
            epoch,
            loss: sum_loss / count,
            triplet_loss: sum_triplet / count,
            slc_loss: sum_slc / count,
            val_recall_at_1: val_recall,
        };
        progress(&stats);
        history.push(stats);

        let improved = match &best {
            None => true,
            Some((_, best_recall, _)) => val_recall > *best_recall,
        };
        if improved {
            best = Some((epoch, val_recall, model.params.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= settings.optim.patience {
                break;
            }
        }
    }

    let (best_epoch, best_recall, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_recall,
    })
}

/// Write the per-epoch history CSV: `epoch,L,L_T,L_S,val_recall@1`.
pub fn write_history_csv(path: &std::path::Path, history: &[EpochStats]) -> std::io::Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "epoch,L,L_T,L_S,val_recall@1")?;
    for h in history {
        writeln!(
            file,
            "{},{},{},{},{}",
            h.epoch, h.loss, h.triplet_loss, h.slc_loss, h.val_recall_at_1
        )?;
    }
    Ok(())
}
