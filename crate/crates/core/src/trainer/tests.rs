use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{prepare_sequences, split_train_val, synth_generate, SourceSpan, SynthSubjectParams};
use crate::embedder::EmbedderConfig;
use crate::triplet::MiningKind;

fn labelled(counts: &[(&str, usize)], seq_len: usize) -> Vec<GaitSequence> {
    let mut out = Vec::new();
    for (track, (label, n)) in counts.iter().enumerate() {
        for i in 0..*n {
            let data = vec![(track * 100 + i) as f64 * 1e-3; crate::skeleton::JOINT_COUNT * seq_len * 3];
            out.push(GaitSequence::new(data, seq_len, label.to_string(), SourceSpan { track, start: i }).unwrap());
        }
    }
    out
}

fn small_split(subjects: usize, seed: u64) -> DatasetSplit {
    let params = SynthSubjectParams::sample_many(subjects, 0.01, seed);
    let tracks = synth_generate(&params, 12.0, seed).unwrap();
    let seqs = prepare_sequences(&tracks, 10, 10).unwrap();
    split_train_val(&seqs, 0.8, seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        p: 3,
        k: 4,
        epochs: 2,
        learning_rate: 1e-3,
        seed: 5,
        embedder: EmbedderConfig {
            channel_widths: vec![4, 8],
            blocks_per_stage: 1,
            embedding_dim: 8,
            seq_len: 10,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn pk_batch_counts() {
    let train = labelled(&[("A", 3), ("B", 3)], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_pk_batch(&train, 2, 2, &mut rng).unwrap();
    assert_eq!(batch.len(), 4);
    for l in ["A", "B"] {
        assert_eq!(batch.iter().filter(|&&i| train[i].label == l).count(), 2);
    }
    let mut unique = batch.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), 4);
}

#[test]
fn pk_batch_reports_deficient_labels() {
    let train = labelled(&[("A", 3), ("B", 1)], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match sample_pk_batch(&train, 2, 2, &mut rng) {
        Err(TrainError::InsufficientData(msg)) => assert!(msg.contains("B (1)"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(sample_pk_batch(&train, 3, 1, &mut rng).is_err());
}

#[test]
fn pk_batch_replays_with_seed() {
    let train = labelled(&[("A", 9), ("B", 7), ("C", 8), ("D", 12)], 2);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10).map(|_| sample_pk_batch(&train, 3, 4, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = Tensor::from_vec(vec![0.0f64]);
    let g = Tensor::from_vec(vec![1.0f64]);
    let mut state = AdamState::zeros_like([&p]);
    adam_step([&mut p], &[g], &mut state, 0.1).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut p = Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 3.0, 0.5]).unwrap();
    let before = p.clone();
    let mut state = AdamState::zeros_like([&p]);
    for _ in 0..3 {
        adam_step([&mut p], &[Tensor::zeros(&[2, 2])], &mut state, 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_is_elementwise_and_shape_checked() {
    let mut a = Tensor::from_vec(vec![0.3f64, 0.3]);
    let mut b = Tensor::from_vec(vec![0.3f64]);
    let grads = [Tensor::from_vec(vec![0.7, 0.7]), Tensor::from_vec(vec![0.7])];
    let mut state = AdamState::zeros_like([&a, &b]);
    for _ in 0..4 {
        adam_step([&mut a, &mut b], &grads, &mut state, 0.01).unwrap();
    }
    assert_eq!(a.data()[0], a.data()[1]);
    assert_eq!(a.data()[0], b.data()[0]);
    let bad = [Tensor::from_vec(vec![0.7]), Tensor::from_vec(vec![0.7])];
    assert!(matches!(
        adam_step([&mut a, &mut b], &bad, &mut state, 0.01),
        Err(TrainError::ShapeMismatch(_))
    ));
}

#[test]
fn zero_epochs_returns_initial_params() {
    let mut cfg = small_config();
    cfg.epochs = 0;
    let out = train(&DatasetSplit::default(), &cfg).unwrap();
    assert!(out.history.records.is_empty());
    assert_eq!(out.params, init_embedder(&cfg.embedder, cfg.seed).unwrap());
}

#[test]
fn training_is_reproducible_and_bounded() {
    let split = small_split(4, 3);
    let cfg = small_config();
    let a = train(&split, &cfg).unwrap();
    let b = train(&split, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam, b.adam);
    let strip = |h: &TrainHistory| {
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.history.records.len(), 2);
    assert_ne!(a.params, init_embedder(&cfg.embedder, cfg.seed).unwrap());
    let per_epoch = split.train.len() / cfg.batch_size();
    for r in &a.history.records {
        assert_eq!(r.steps, per_epoch);
        assert_eq!(r.step_losses.len() + r.skipped_steps, per_epoch);
        assert!(r.step_losses.iter().all(|&l| (0.0..=cfg.mining.margin).contains(&l)));
        assert!(r.val_ari.is_some());
    }
    assert_eq!(a.adam.step as usize, a.history.records.iter().map(|r| r.step_losses.len()).sum::<usize>());
}

#[test]
fn every_epoch_records_even_when_skipped() {
    let split = small_split(3, 4);
    let mut cfg = small_config();
    // a margin this small leaves almost no semi-hard window
    cfg.mining = MiningStrategy::new(MiningKind::SemiHard, 1e-12).unwrap();
    cfg.epochs = 3;
    cfg.eval_every = 0;
    let out = train(&split, &cfg).unwrap();
    assert_eq!(out.history.records.len(), 3);
    assert!(out.history.records.iter().all(|r| r.val_ari.is_none()));
    assert!(out.history.records.iter().all(|r| r.skipped_steps > 0 || r.triplets > 0));
}

#[test]
fn training_rejects_thin_splits() {
    let split = small_split(2, 1);
    let cfg = small_config();
    assert!(matches!(train(&split, &cfg), Err(TrainError::InsufficientData(_))));
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let split = small_split(4, 3);
    let mut cfg = small_config();
    cfg.checkpoint_every = 1;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = train(&split, &cfg).unwrap();
    let (p, s) = load_checkpoint(&dir.path().join("epoch-0002.ckpt")).unwrap();
    assert_eq!(p, out.params);
    assert_eq!(s, out.adam);
    assert!(dir.path().join("epoch-0001.ckpt").exists());

    cfg.checkpoint_dir = Some(dir.path().join("missing"));
    assert!(matches!(train(&split, &cfg), Err(TrainError::CheckpointIo { .. })));
}

fn trained_state() -> (EmbedderParams<f32>, AdamState<f32>) {
    let cfg = EmbedderConfig::default();
    let params = init_embedder::<f32>(&cfg, 2).unwrap();
    let mut state = AdamState::zeros_like(params.tensors.iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (m, v) in state.m.iter_mut().zip(state.v.iter_mut()) {
        m.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0f32..1.0));
        v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.0f32..1.0));
    }
    state.step = 17;
    (params, state)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let (params, state) = trained_state();
    save_checkpoint(&params, &state, &path).unwrap();
    let (p2, s2) = load_checkpoint(&path).unwrap();
    for ((_, a), (_, b)) in params.tensors.iter().zip(&p2.tensors) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!((p2, s2), (params.clone(), state.clone()));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"GAIT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes, encode_checkpoint(&params, &state).unwrap());
}

#[test]
fn checkpoint_corruption_is_detected() {
    let (params, state) = trained_state();
    let bytes = encode_checkpoint(&params, &state).unwrap();
    for cut in [bytes.len() - 1, bytes.len() - 4000, 40, 10] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(TrainError::CorruptPayload(_))),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(decode_checkpoint(&extra), Err(TrainError::CorruptPayload(_))));

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"GIAT");
    assert!(matches!(decode_checkpoint(&magic), Err(TrainError::FormatError(_))));
    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(decode_checkpoint(&version), Err(TrainError::FormatError(_))));
    assert!(matches!(
        load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(TrainError::CheckpointIo { .. })
    ));
}

#[test]
fn history_csv_layout() {
    let history = TrainHistory {
        records: vec![EpochRecord {
            epoch: 1,
            mean_loss: Some(0.125),
            max_step_loss: Some(0.2),
            step_losses: vec![0.05, 0.2],
            steps: 2,
            skipped_steps: 0,
            triplets: 40,
            val_ari: None,
            wall_seconds: 3.0,
        }],
    };
    let mut buf = Vec::new();
    history.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,mean_loss,max_step_loss,steps,skipped_steps,triplets,val_ari\n1,0.125,0.2,2,0,40,\n"
    );
}
