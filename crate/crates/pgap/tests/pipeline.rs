//! End-to-end library tests: generated data through disk round trips,
//! mining soundness, descriptor contracts, and training reproducibility.

use pgap::dataio::{downsample, load_sequence, save_sequence};
use pgap::mining::{mine_tuples, MiningConfig};
use pgap::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use pgap::synthgen::{generate, OrchardSpec};
use pgap::tensor::Tensor;
use pgap::training::{train, MiningConfig2, TrainSettings};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> OrchardSpec {
    OrchardSpec {
        rows: 2,
        row_length: 12.0,
        row_spacing: 2.5,
        trees_per_row: 6,
        points_per_tree: 30,
        scan_spacing: 0.5,
        sensor_range: 8.0,
        seed,
        ..OrchardSpec::default()
    }
}

/// Mining window sized for the small fixture (one lap is ~53 frames).
fn small_mining(seed: u64) -> MiningConfig {
    MiningConfig {
        revisit_exclusion_window: 20,
        num_negatives: 4,
        seed,
        ..MiningConfig::default()
    }
}

fn fast_settings(seed: u64) -> TrainSettings {
    let mut s = TrainSettings::default();
    s.model = ModelConfig {
        local_dim: 4,
        descriptor_dim: 16,
        pointnet_hidden: vec![8, 8],
        slc_hidden: vec![16],
        ..ModelConfig::default()
    };
    s.mining = MiningConfig2 {
        revisit_exclusion_window: 20,
        num_negatives: 3,
        ..MiningConfig2::default()
    };
    s.optim.max_epochs = 2;
    s.optim.seed = seed;
    s.num_points = 48;
    s.max_tuples_per_epoch = 6;
    s
}

#[test]
fn sequence_disk_round_trip_is_bit_exact() {
    let (records, _) = generate(&small_spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(dir.path(), &records).unwrap();
    let (loaded, meta) = load_sequence(dir.path()).unwrap();
    assert_eq!(loaded, records);
    assert_eq!(meta.frame_count, records.len());

    // a second save produces byte-identical files
    let dir2 = tempfile::tempdir().unwrap();
    save_sequence(dir2.path(), &loaded).unwrap();
    assert_eq!(
        pgap::manifest::sha256_dir(dir.path()).unwrap(),
        pgap::manifest::sha256_dir(dir2.path()).unwrap()
    );
}

#[test]
fn mining_is_sound_on_generated_data_over_ten_seeds() {
    let (records, _) = generate(&small_spec(0)).unwrap();
    for seed in 0..10 {
        let config = small_mining(seed);
        let outcome = mine_tuples(&records, &config).unwrap();
        assert!(!outcome.tuples.is_empty(), "seed {seed} mined no tuples");
        for t in &outcome.tuples {
            let dist = |a: usize, b: usize| {
                let pa = records[a].pose.position;
                let pb = records[b].pose.position;
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2))
                    .sqrt()
            };
            // positive: within radius, old enough, same segment
            assert!(dist(t.anchor, t.positive) <= config.r_th);
            assert!(t.positive + config.revisit_exclusion_window <= t.anchor);
            assert_eq!(records[t.anchor].segment, records[t.positive].segment);
            // positive is the closest frame satisfying all three constraints
            for c in 0..records.len() {
                if c + config.revisit_exclusion_window <= t.anchor
                    && records[c].segment == records[t.anchor].segment
                    && dist(t.anchor, c) <= config.r_th
                {
                    assert!(dist(t.anchor, t.positive) <= dist(t.anchor, c) + 1e-12);
                }
            }
            // negatives violate at least one constraint each
            assert_eq!(t.negatives.len(), config.num_negatives);
            for &n in &t.negatives {
                let violates = dist(t.anchor, n) > config.r_th
                    || n + config.revisit_exclusion_window > t.anchor
                    || records[n].segment != records[t.anchor].segment;
                assert!(violates, "seed {seed}: negative {n} is a valid positive");
            }
        }
    }
}

#[test]
fn descriptor_contracts_on_generated_scans() {
    let (records, _) = generate(&small_spec(1)).unwrap();
    let model = Model::init(ModelConfig::default(), 5).unwrap();
    let cloud = downsample(&records[10].cloud, 128, 7).unwrap();
    let tensor = cloud.to_tensor();
    let d = model.describe(&tensor).unwrap();
    assert_eq!(d.dim(), 256);
    assert!((d.norm() - 1.0).abs() < 1e-6);

    // permutation invariance of the point set
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let mut rows: Vec<[f64; 3]> = cloud.points.clone();
        rows.shuffle(&mut rng);
        let mut flat = Vec::with_capacity(rows.len() * 3);
        for r in &rows {
            flat.extend_from_slice(r);
        }
        let permuted = Tensor::new(vec![rows.len(), 3], flat).unwrap();
        let d2 = model.describe(&permuted).unwrap();
        let max_delta = d
            .values
            .iter()
            .zip(&d2.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 1e-9, "permutation changed descriptor by {max_delta}");
    }
}

#[test]
fn training_smoke_and_bit_reproducibility() {
    let data = generate(&small_spec(0)).unwrap();
    let val = generate(&small_spec(5)).unwrap();
    let settings = fast_settings(3);

    let run = |()| train(std::slice::from_ref(&data), &val, &settings, |_| {}).unwrap();
    let a = run(());
    let b = run(());

    assert!(!a.history.is_empty());
    assert_eq!(a.history.len(), b.history.len());
    for (ha, hb) in a.history.iter().zip(&b.history) {
        assert_eq!(ha.loss.to_bits(), hb.loss.to_bits());
        assert_eq!(ha.val_recall_at_1.to_bits(), hb.val_recall_at_1.to_bits());
    }
    for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }

    // checkpoint round trip preserves every parameter bit
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &a.model, 3, a.best_epoch, &a.history).unwrap();
    let (loaded, header) = load_checkpoint(&path).unwrap();
    assert_eq!(header.epoch, a.best_epoch);
    for (pa, pl) in a.model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(pa.value.data(), pl.value.data());
    }
}

#[test]
fn disabling_slc_equals_pure_triplet_weighting() {
    // turning the auxiliary loss off must match giving it zero weight,
    // bit for bit, across the whole training trajectory
    let data = generate(&small_spec(0)).unwrap();
    let val = generate(&small_spec(5)).unwrap();

    let mut without = fast_settings(11);
    without.loss.slc_enabled = false;
    let mut zero_weight = fast_settings(11);
    zero_weight.loss.slc_enabled = true;
    zero_weight.loss.alpha = 1.0;

    let a = train(std::slice::from_ref(&data), &val, &without, |_| {}).unwrap();
    let b = train(std::slice::from_ref(&data), &val, &zero_weight, |_| {}).unwrap();

    assert_eq!(a.history.len(), b.history.len());
    for (ha, hb) in a.history.iter().zip(&b.history) {
        assert_eq!(ha.triplet_loss.to_bits(), hb.triplet_loss.to_bits());
        assert_eq!(ha.val_recall_at_1.to_bits(), hb.val_recall_at_1.to_bits());
    }
    for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
}

#[test]
fn training_errors_without_minable_positives() {
    // a single lap has no revisits, so no anchor can satisfy the window
    let mut spec = small_spec(0);
    spec.laps = 2;
    let (records, meta) = generate(&spec).unwrap();
    let half: Vec<_> = records[..records.len() / 2].to_vec();
    let data = (half, meta.clone());
    let val = generate(&small_spec(5)).unwrap();
    let mut settings = fast_settings(0);
    settings.mining.revisit_exclusion_window = 1000;
    let err = train(std::slice::from_ref(&data), &val, &settings, |_| {});
    assert!(err.is_err());
}
