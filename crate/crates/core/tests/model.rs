use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stoei::audio::{self, RawAudio};
use stoei::checkpoint;
use stoei::model::net::{self, RunOptions, Sample};
use stoei::model::params::conv_out_len;
use stoei::model::{Group, ModelConfig, ModelParams, SpeechFeatures, Vocab};
use stoei::trainer::{self, TrainConfig};

fn random_sample(rng: &mut ChaCha8Rng, vocab: usize, speech: bool) -> Sample {
    let n_prefix = rng.random_range(1..12);
    let n_target = rng.random_range(1..10);
    Sample {
        prefix_ids: (0..n_prefix).map(|_| rng.random_range(4..vocab)).collect(),
        speech: speech.then(|| {
            let t = rng.random_range(1..40);
            SpeechFeatures(Array2::from_shape_simple_fn((t, 64), || rng.random_range(-1.0..1.0)))
        }),
        target_ids: (0..n_target).map(|_| rng.random_range(0..vocab)).collect(),
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (params, batch) = trainer::micro_batch(0).unwrap();
    let refs: Vec<&Sample> = batch.iter().collect();
    let checks = trainer::grad_check(&params, &refs, &[Group::Trainable], 40, 1e-5, 1).unwrap();
    assert_eq!(checks.len(), params.layout().iter().filter(|(_, g, _)| *g == Group::Trainable).count());
    for c in &checks {
        assert!(c.max_rel_error < 1e-3, "{} {}", c.name, c.max_rel_error);
    }
}

#[test]
fn frozen_gradients_match_finite_differences() {
    let (params, batch) = trainer::micro_batch(3).unwrap();
    let refs: Vec<&Sample> = batch.iter().take(1).collect();
    let checks = trainer::grad_check(&params, &refs, &[Group::Frozen], 6, 1e-5, 2).unwrap();
    for c in &checks {
        assert!(c.max_rel_error < 1e-3, "{} {}", c.name, c.max_rel_error);
    }
}

#[test]
fn optimizer_respects_freeze_contract() {
    let (mut params, batch) = trainer::micro_batch(1).unwrap();
    let refs: Vec<&Sample> = batch.iter().collect();
    let frozen = params.group_hash(Group::Frozen);
    let trainable = params.group_hash(Group::Trainable);
    let cfg = TrainConfig::default();
    let mut opt = trainer::AdamW::new(&params, Group::Trainable);
    for step in 0..10 {
        let (_, grad) = trainer::batch_grad(&params, &refs, false, false, Some(step)).unwrap();
        opt.step(&mut params, &grad, &cfg);
    }
    assert_eq!(params.group_hash(Group::Frozen), frozen);
    assert_ne!(params.group_hash(Group::Trainable), trainable);
}

#[test]
fn zero_lora_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::init_seeded(&ModelConfig::with_vocab(50), true, 4);
    for _ in 0..10 {
        let s = random_sample(&mut rng, 50, true);
        let fused = net::fused_prefix(&s, &params).unwrap();
        let on = net::forward_with(&fused, &s.target_ids, &params, &RunOptions::default()).unwrap();
        let off = net::forward_with(&fused, &s.target_ids, &params, &RunOptions { lora: false, ..Default::default() })
            .unwrap();
        assert!(on.scores.iter().zip(off.scores.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn nonzero_lora_changes_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::init_seeded(&ModelConfig::with_vocab(50), false, 5);
    trainer::perturb_lora(&mut params, 0.2, 1);
    let s = random_sample(&mut rng, 50, false);
    let fused = net::fused_prefix(&s, &params).unwrap();
    let on = net::forward(&fused, &s.target_ids, &params).unwrap();
    let off =
        net::forward_with(&fused, &s.target_ids, &params, &RunOptions { lora: false, ..Default::default() }).unwrap();
    assert_ne!(on.scores, off.scores);
}

#[test]
fn duplicated_batch_keeps_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ModelParams::init_seeded(&ModelConfig::with_vocab(30), true, 6);
    let batch: Vec<Sample> = (0..5).map(|_| random_sample(&mut rng, 30, true)).collect();
    let logits: Vec<_> = batch
        .iter()
        .map(|s| net::forward(&net::fused_prefix(s, &params).unwrap(), &s.target_ids, &params).unwrap())
        .collect();
    let doubled: Vec<_> = logits.iter().chain(&logits).cloned().collect();
    for per_token in [false, true] {
        let a = net::loss(&logits, per_token).unwrap();
        let b = net::loss(&doubled, per_token).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    let refs: Vec<&Sample> = batch.iter().collect();
    let refs2: Vec<&Sample> = batch.iter().chain(&batch).collect();
    let (l1, g1) = trainer::batch_grad(&params, &refs, false, false, None).unwrap();
    let (l2, g2) = trainer::batch_grad(&params, &refs2, false, false, None).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    g1.for_each(|p| a.extend_from_slice(p.data));
    g2.for_each(|p| b.extend_from_slice(p.data));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = ModelParams::init_seeded(&ModelConfig::with_vocab(20), true, 7);
    trainer::perturb_lora(&mut params, 0.1, 7);
    let vocab = Vocab::from_words((0..20).map(|i| format!("w{i}")).collect());
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&params, &vocab, &path).unwrap();
    let (loaded, v2) = checkpoint::load(&path).unwrap();
    assert_eq!(v2.words(), vocab.words());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = random_sample(&mut rng, 20, true);
    let f1 = net::forward(&net::fused_prefix(&s, &params).unwrap(), &s.target_ids, &params).unwrap();
    let f2 = net::forward(&net::fused_prefix(&s, &loaded).unwrap(), &s.target_ids, &loaded).unwrap();
    assert!(f1.scores.iter().zip(f2.scores.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(checkpoint::CheckpointError::CorruptFile(_))));
}

fn tiny_corpus(n: usize, seed: u64) -> (Vocab, ModelParams, Vec<Sample>, Vec<stoei::Example>) {
    let lex = stoei::dataset::Lexicon::default();
    let rows: Vec<_> =
        stoei::dataset::generate_text(n, 0.5, &lex, seed).unwrap().into_iter().map(|r| r.example).collect();
    let vocab = trainer::build_vocab(&lex, &rows);
    let params = ModelParams::init_seeded(&ModelConfig::with_vocab(vocab.len()), false, seed);
    let manifest = stoei::dataset::Manifest { rows: rows.clone(), ..Default::default() };
    let samples = trainer::featurize(&manifest, &vocab, &params).unwrap();
    (vocab, params, samples, rows)
}

#[test]
fn one_epoch_of_sixteen_is_two_steps_and_deterministic() {
    let (vocab, params, samples, _) = tiny_corpus(16, 8);
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
    let run = || {
        let mut p = params.clone();
        let out = trainer::train(&mut p, &samples, None, &vocab, &cfg, Group::Trainable, |_| {}).unwrap();
        (p, out)
    };
    let (p1, o1) = run();
    let (p2, o2) = run();
    assert_eq!(o1.history[0].steps, 2);
    assert_eq!(p1, p2);
    assert_eq!(o1.history[0].train_loss, o2.history[0].train_loss);
    assert_eq!(p1.group_hash(Group::Frozen), params.group_hash(Group::Frozen));
}

#[test]
fn pretraining_loss_decreases() {
    let (vocab, mut params, samples, _) = tiny_corpus(200, 9);
    let cfg = TrainConfig { epochs: 3, lr: 3e-3, weight_decay: 0.0, ..Default::default() };
    let out = trainer::train(&mut params, &samples, None, &vocab, &cfg, Group::Frozen, |_| {}).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{losses:?}");
    }
}

#[test]
fn diverging_loss_is_reported() {
    let (vocab, mut params, samples, _) = tiny_corpus(8, 10);
    params.base.head.fill(f64::NAN);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let err = trainer::train(&mut params, &samples, None, &vocab, &cfg, Group::Trainable, |_| {}).unwrap_err();
    assert!(matches!(err, trainer::TrainError::DivergedLoss { epoch: 1, step: 0, .. }));
}

#[test]
fn memorized_checkpoint_scores_perfectly() {
    // Decoding the gold targets through the prediction path recovers gold.
    let (vocab, _, samples, rows) = tiny_corpus(30, 11);
    let preds: Vec<_> = samples
        .iter()
        .zip(&rows)
        .map(|(s, r)| {
            trainer::decode_prediction(&r.id, &r.tokens, &vocab.render(&s.target_ids[1..s.target_ids.len() - 1]))
        })
        .collect();
    let rep = trainer::report(&preds, &rows);
    assert_eq!(rep.f1, 1.0);
    assert!(preds.iter().all(|p| !p.token_mismatch && p.dropped == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_stage_lengths(len in 1usize..1000) {
        let params = ModelParams::init_seeded(&ModelConfig::with_vocab(10), true, 0);
        let feats = SpeechFeatures(Array2::from_elem((len, 64), 0.1));
        let out = net::adapt(&feats, params.adapter.as_ref().unwrap()).unwrap();
        let mut expect = len;
        for _ in 0..3 {
            expect = (expect + 2 - 3) / 2 + 1;
        }
        prop_assert_eq!(out.nrows(), expect);
    }

    #[test]
    fn mel_frame_law(n in 400usize..16_000) {
        let a = RawAudio { samples: vec![0.01; n], sample_rate: audio::SAMPLE_RATE };
        prop_assert_eq!(audio::log_mel(&a, audio::N_MELS).unwrap().frames.nrows(), 1 + (n - 400) / 160);
    }

    #[test]
    fn conv_law_matches_formula(len in 1usize..1000) {
        prop_assert_eq!(conv_out_len(len, 3, 2, 1), (len + 2 - 3) / 2 + 1);
    }
}

#[test]
fn stage_example_100_50_25_13() {
    let lens: Vec<usize> = std::iter::successors(Some(100), |&l| Some(conv_out_len(l, 3, 2, 1))).take(4).collect();
    assert_eq!(lens, vec![100, 50, 25, 13]);
}
