//! PointNetPGAP descriptor network and the segment-classification head.
//!
//! The descriptor path is a per-point shared MLP followed by two aggregators
//! over the point dimension (column mean and normalized Gram matrix), a fully
//! connected projection, and L2 normalization. The segment head is an MLP over
//! the descriptor ending in log-softmax; it is used only during training.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input cloud contains non-finite coordinates")]
    NonFiniteInput,
    #[error("segment head expects {expected} classes, got label {got}")]
    SegmentCount { expected: usize, got: usize },
    #[error("checkpoint io error on {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {msg}")]
    CheckpointFormat {
        path: std::path::PathBuf,
        msg: String,
    },
}

/// Which aggregators feed the final projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Column mean only (first-order).
    Gap,
    /// Normalized Gram matrix only (second-order pairwise interactions).
    Pfi,
    /// Both, concatenated.
    Combined,
}

impl std::str::FromStr for Aggregator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gap" => Ok(Aggregator::Gap),
            "pfi" => Ok(Aggregator::Pfi),
            "combined" => Ok(Aggregator::Combined),
            other => Err(format!("unknown aggregator `{other}` (gap|pfi|combined)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Local feature width c.
    pub local_dim: usize,
    /// Descriptor width d.
    pub descriptor_dim: usize,
    /// Hidden widths of the per-point MLP before the final c-wide layer.
    pub pointnet_hidden: Vec<usize>,
    /// Hidden widths of the segment head.
    pub slc_hidden: Vec<usize>,
    /// Number of segment classes L.
    pub num_segments: usize,
    pub aggregator: Aggregator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            local_dim: 16,
            descriptor_dim: 256,
            pointnet_hidden: vec![64, 128],
            slc_hidden: vec![256, 64],
            num_segments: 6,
            aggregator: Aggregator::Combined,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.local_dim < 1 || self.descriptor_dim < 1 {
            return Err(ModelError::InvalidConfig(
                "local_dim and descriptor_dim must be >= 1".into(),
            ));
        }
        if self.num_segments < 2 {
            return Err(ModelError::InvalidConfig(
                "num_segments must be >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Width of the pre-projection descriptor D*.
    pub fn aggregate_dim(&self) -> usize {
        let c = self.local_dim;
        match self.aggregator {
            Aggregator::Gap => c,
            Aggregator::Pfi => c * c,
            Aggregator::Combined => c + c * c,
        }
    }
}

/// L2-normalized place signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Log-probabilities over segment classes.
#[derive(Debug, Clone)]
pub struct SegmentPrediction {
    pub log_probs: Vec<f64>,
}

impl SegmentPrediction {
    pub fn argmax(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
}

/// The descriptor model plus segment head, with its parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pointnet: Vec<Layer>,
    fc: Layer,
    slc: Vec<Layer>,
}

fn init_layer(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
) -> Layer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w_data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let w = params.add(Tensor::new(vec![fan_in, fan_out], w_data).unwrap());
    let b = params.add(Tensor::zeros(vec![fan_out]));
    Layer { w, b }
}

impl Model {
    /// Initialize parameters: weights uniform in ±1/√fan_in, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut pointnet = Vec::new();
        let mut in_dim = 3;
        for &width in config
            .pointnet_hidden
            .iter()
            .chain(std::iter::once(&config.local_dim))
        {
            pointnet.push(init_layer(&mut params, &mut rng, in_dim, width));
            in_dim = width;
        }

        let fc = init_layer(&mut params, &mut rng, config.aggregate_dim(), config.descriptor_dim);

        let mut slc = Vec::new();
        let mut in_dim = config.descriptor_dim;
        for &width in config
            .slc_hidden
            .iter()
            .chain(std::iter::once(&config.num_segments))
        {
            slc.push(init_layer(&mut params, &mut rng, in_dim, width));
            in_dim = width;
        }

        Ok(Model {
            config,
            params,
            pointnet,
            fc,
            slc,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Per-point shared MLP: n×3 cloud tensor to n×c local features.
    pub fn local_features_var(&self, tape: &mut Tape, cloud: Var) -> Result<Var, ModelError> {
        let mut x = cloud;
        let last = self.pointnet.len() - 1;
        for (i, layer) in self.pointnet.iter().enumerate() {
            let w = tape.param(&self.params, layer.w);
            let b = tape.param(&self.params, layer.b);
            x = tape.linear(x, w, b)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Aggregate local features into the pre-norm descriptor D*.
    pub fn aggregate_var(&self, tape: &mut Tape, features: Var) -> Result<Var, ModelError> {
        let v = match self.config.aggregator {
            Aggregator::Gap => tape.mean_rows(features)?,
            Aggregator::Pfi => {
                let g = tape.gram(features)?;
                tape.concat(&[g])?
            }
            Aggregator::Combined => {
                let g = tape.gram(features)?;
                let mean = tape.mean_rows(features)?;
                tape.concat(&[g, mean])?
            }
        };
        Ok(v)
    }

    /// Full descriptor path on an existing tape.
    pub fn descriptor_var(&self, tape: &mut Tape, cloud: &Tensor) -> Result<Var, ModelError> {
        if !cloud.is_finite() {
            return Err(ModelError::NonFiniteInput);
        }
        let input = tape.input(cloud.clone());
        let features = self.local_features_var(tape, input)?;
        let agg = self.aggregate_var(tape, features)?;
        let w = tape.param(&self.params, self.fc.w);
        let b = tape.param(&self.params, self.fc.b);
        let projected = tape.linear(agg, w, b)?;
        let norm = tape.l2_normalize(projected)?;
        Ok(norm)
    }

    /// Compute an L2-normalized descriptor on a fresh tape.
    pub fn describe(&self, cloud: &Tensor) -> Result<Descriptor, ModelError> {
        let mut tape = Tape::new();
        let d = self.descriptor_var(&mut tape, cloud)?;
        Ok(Descriptor {
            values: tape.value(d).data().to_vec(),
        })
    }

    /// Segment head: descriptor var to log-probabilities over L classes.
    pub fn segment_logprobs_var(&self, tape: &mut Tape, descriptor: Var) -> Result<Var, ModelError> {
        let mut x = descriptor;
        let last = self.slc.len() - 1;
        for (i, layer) in self.slc.iter().enumerate() {
            let w = tape.param(&self.params, layer.w);
            let b = tape.param(&self.params, layer.b);
            x = tape.linear(x, w, b)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        tape.log_softmax(x).map_err(ModelError::from)
    }

    /// Segment prediction for a precomputed descriptor.
    pub fn predict_segment(&self, descriptor: &Descriptor) -> Result<SegmentPrediction, ModelError> {
        let mut tape = Tape::new();
        let d = tape.input(Tensor::vector(descriptor.values.clone()));
        let lp = self.segment_logprobs_var(&mut tape, d)?;
        Ok(SegmentPrediction {
            log_probs: tape.value(lp).data().to_vec(),
        })
    }
}

/// Per-epoch training statistics stored in checkpoints and history files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub triplet_loss: f64,
    pub slc_loss: f64,
    pub val_recall_at_1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub param_lens: Vec<usize>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PGAPCKPT";

/// Write a checkpoint: magic, u64 LE JSON length, JSON header, then raw
/// little-endian f64 parameter blocks in declaration order.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    seed: u64,
    epoch: usize,
    history: &[EpochStats],
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed,
        epoch,
        history: history.to_vec(),
        param_lens: model.params.iter().map(|p| p.value.len()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let io = |source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    for p in model.params.iter() {
        for v in p.value.data() {
            file.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Read a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader), ModelError> {
    let io = |source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let bad = |msg: String| ModelError::CheckpointFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut file = fs::File::open(path).map_err(io)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing PGAPCKPT magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| bad(format!("header json: {e}")))?;

    let mut model = Model::init(header.config.clone(), header.seed)?;
    if header.param_lens.len() != model.params.len() {
        return Err(bad(format!(
            "parameter block count {} does not match config ({})",
            header.param_lens.len(),
            model.params.len()
        )));
    }
    let mut off = 16 + json_len;
    for (i, p) in model.params.iter_mut().enumerate() {
        let len = p.value.len();
        if header.param_lens[i] != len {
            return Err(bad(format!(
                "parameter {i} length {} does not match config ({len})",
                header.param_lens[i]
            )));
        }
        let need = len * 8;
        if bytes.len() < off + need {
            return Err(bad("truncated parameter data".into()));
        }
        for (k, chunk) in bytes[off..off + need].chunks_exact(8).enumerate() {
            p.value.data_mut()[k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        off += need;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PointCloud;

    fn toy_cloud(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.0..3.0),
                ]
            })
            .collect();
        PointCloud {
            points: pts,
            frame_index: 0,
        }
        .to_tensor()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            local_dim: 4,
            descriptor_dim: 8,
            pointnet_hidden: vec![8],
            slc_hidden: vec![8],
            num_segments: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::default(), 42).unwrap();
        let b = Model::init(ModelConfig::default(), 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn default_param_count_order() {
        let model = Model::init(ModelConfig::default(), 0).unwrap();
        let count = model.param_count();
        assert!(
            (1e5..1e6).contains(&(count as f64)),
            "param count {count} outside 1e5..1e6"
        );
    }

    #[test]
    fn layer_shapes_follow_config() {
        let cfg = small_config();
        let model = Model::init(cfg.clone(), 1).unwrap();
        // 2 pointnet layers + fc + 2 slc layers, each (w, b)
        assert_eq!(model.params.len(), 10);
        let shapes: Vec<Vec<usize>> = model
            .params
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(shapes[0], vec![3, 8]);
        assert_eq!(shapes[2], vec![8, 4]);
        assert_eq!(shapes[4], vec![cfg.aggregate_dim(), 8]);
        assert_eq!(shapes[6], vec![8, 8]);
        assert_eq!(shapes[8], vec![8, 5]);
    }

    #[test]
    fn descriptor_dim_and_unit_norm() {
        let model = Model::init(ModelConfig::default(), 7).unwrap();
        let d = model.describe(&toy_cloud(32, 1)).unwrap();
        assert_eq!(d.dim(), 256);
        assert!((d.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aggregate_dim_is_272_for_c16() {
        assert_eq!(ModelConfig::default().aggregate_dim(), 272);
    }

    #[test]
    fn local_features_shape_and_per_point_property() {
        let model = Model::init(small_config(), 3).unwrap();
        let cloud = toy_cloud(10, 2);
        let mut tape = Tape::new();
        let input = tape.input(cloud.clone());
        let f = model.local_features_var(&mut tape, input).unwrap();
        assert_eq!(tape.value(f).shape(), &[10, 4]);

        // duplicating a point duplicates its feature row
        let mut dup_data = cloud.data().to_vec();
        dup_data.extend_from_slice(&cloud.data()[0..3]);
        let dup = Tensor::new(vec![11, 3], dup_data).unwrap();
        let mut tape2 = Tape::new();
        let input2 = tape2.input(dup);
        let f2 = model.local_features_var(&mut tape2, input2).unwrap();
        let v = tape.value(f);
        let v2 = tape2.value(f2);
        for k in 0..4 {
            assert_eq!(v.at2(0, k), v2.at2(10, k));
        }
    }

    #[test]
    fn single_point_cloud_works() {
        let model = Model::init(small_config(), 3).unwrap();
        let cloud = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let input = tape.input(cloud);
        let f = model.local_features_var(&mut tape, input).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 4]);
    }

    #[test]
    fn aggregate_identical_rows() {
        // F with identical rows f: gram = f f^T, mean = f
        let model = Model::init(small_config(), 3).unwrap();
        let f_row = [0.5, -1.0, 2.0, 0.25];
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&f_row);
        }
        let mut tape = Tape::new();
        let f = tape.input(Tensor::new(vec![6, 4], data).unwrap());
        let agg = model.aggregate_var(&mut tape, f).unwrap();
        let v = tape.value(agg).data();
        assert_eq!(v.len(), 4 + 16);
        for a in 0..4 {
            for b in 0..4 {
                assert!((v[a * 4 + b] - f_row[a] * f_row[b]).abs() < 1e-12);
            }
        }
        for k in 0..4 {
            assert!((v[16 + k] - f_row[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        use rand::seq::SliceRandom;
        let model = Model::init(ModelConfig::default(), 5).unwrap();
        let cloud = toy_cloud(64, 9);
        let base = model.describe(&cloud).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = cloud.shape()[0];
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut data = Vec::with_capacity(n * 3);
            for &i in &order {
                data.extend_from_slice(&cloud.data()[i * 3..i * 3 + 3]);
            }
            let permuted = Tensor::new(vec![n, 3], data).unwrap();
            let d = model.describe(&permuted).unwrap();
            let max_diff = base
                .values
                .iter()
                .zip(&d.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-9, "max diff {max_diff}");
        }
    }

    #[test]
    fn distinct_clouds_get_distinct_descriptors() {
        let model = Model::init(small_config(), 5).unwrap();
        let a = model.describe(&toy_cloud(32, 1)).unwrap();
        let b = model.describe(&toy_cloud(32, 2)).unwrap();
        assert!(a.distance(&b) > 0.0);
    }

    #[test]
    fn nan_input_rejected() {
        let model = Model::init(small_config(), 5).unwrap();
        let bad = Tensor::new(vec![1, 3], vec![1.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            model.describe(&bad),
            Err(ModelError::NonFiniteInput)
        ));
    }

    #[test]
    fn zero_weight_head_predicts_uniform() {
        let mut model = Model::init(small_config(), 5).unwrap();
        // zero the SLC layers (the last 2*len(slc) parameters)
        let slc_start = model.params.len() - 4;
        for id in slc_start..model.params.len() {
            model
                .params
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let d = Descriptor {
            values: vec![0.5; 8],
        };
        let pred = model.predict_segment(&d).unwrap();
        assert_eq!(pred.log_probs.len(), 5);
        let expected = -(5.0f64.ln());
        for lp in &pred.log_probs {
            assert!((lp - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_prediction_is_simplex() {
        let model = Model::init(small_config(), 5).unwrap();
        let d = model.describe(&toy_cloud(16, 3)).unwrap();
        let pred = model.predict_segment(&d).unwrap();
        let sum: f64 = pred.log_probs.iter().map(|lp| lp.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(pred.log_probs.iter().all(|&lp| lp <= 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        use tempfile::TempDir;
        let model = Model::init(small_config(), 5).unwrap();
        let history = vec![EpochStats {
            epoch: 0,
            loss: 1.0,
            triplet_loss: 0.6,
            slc_loss: 1.4,
            val_recall_at_1: 0.5,
        }];
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("model.ckpt");
        save_checkpoint(&path, &model, 5, 0, &history).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.config, model.config);
        assert_eq!(header.history, history);
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        // loaded model produces identical descriptors
        let cloud = toy_cloud(16, 3);
        assert_eq!(
            model.describe(&cloud).unwrap().values,
            loaded.describe(&cloud).unwrap().values
        );
    }
}
