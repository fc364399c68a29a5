use ahnlab::ahn::AhnVariant;
use ahnlab::attention::MixerMode;
use ahnlab::corpus::{synthetic_text, write_synthetic, Corpus, Split};
use ahnlab::distill::*;
use ahnlab::model::{Mixer, Model, ModelConfig};
use ahnlab::numerics::{grad_check, Tape, Tensor};
use ahnlab::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loop_kl(t: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    let (rows, cols) = t.dims2();
    let mut total = 0.0;
    for i in 0..rows {
        let zt: f64 = (0..cols).map(|j| t.at(i, j).exp()).sum();
        let zs: f64 = (0..cols).map(|j| s.at(i, j).exp()).sum();
        for j in 0..cols {
            let p = t.at(i, j).exp() / zt;
            let q = s.at(i, j).exp() / zs;
            total += p * (p / q).ln();
        }
    }
    total / rows as f64
}

fn loop_ce(x: &Tensor<f64>, targets: &[usize]) -> f64 {
    let (rows, cols) = x.dims2();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let z: f64 = (0..cols).map(|j| x.at(i, j).exp()).sum();
        total -= (x.at(i, t).exp() / z).ln();
    }
    total / rows as f64
}

#[test]
fn kl_of_identical_logits_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn(&[7, 11], 3.0, &mut rng);
    assert!(kl_loss(&x, &x).unwrap().abs() < 1e-12);
}

#[test]
fn kl_closed_form_two_classes() {
    let t = Tensor::<f64>::from_f64(&[1, 2], &[10.0, 0.0]).unwrap();
    let s = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
    let p: f64 = 1.0 / (1.0 + (-10f64).exp());
    let expected = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
    let got = kl_loss(&t, &s).unwrap();
    assert!((got - expected).abs() < 1e-14);
    assert!(got < 2f64.ln() && got > 2f64.ln() - 1e-3);
}

#[test]
fn kl_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let t = Tensor::<f64>::randn(&[5, 13], 2.0, &mut rng);
        let s = Tensor::<f64>::randn(&[5, 13], 2.0, &mut rng);
        assert!((kl_loss(&t, &s).unwrap() - loop_kl(&t, &s)).abs() < 1e-10);
    }
}

#[test]
fn kl_rejects_bad_inputs() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 3]);
    assert!(matches!(kl_loss(&a, &b), Err(Error::Dimension { .. })));
    let mut c = a.clone();
    c.set(1, 1, f64::NAN);
    assert!(matches!(kl_loss(&c, &a), Err(Error::NonFinite(_))));
    assert!(matches!(kl_loss(&a, &c), Err(Error::NonFinite(_))));
}

#[test]
fn kl_gradients_through_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::<f64>::randn(&[4, 6], 1.5, &mut rng);
    let s = Tensor::<f64>::randn(&[4, 6], 1.5, &mut rng);
    let s2 = s.clone();
    let err = grad_check(
        move |tape: &mut Tape<f64>, x| {
            let st = tape.constant(s2.clone());
            kl_loss_tape(tape, x, st)
        },
        &t,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "teacher side {err}");
    let err = grad_check(
        move |tape: &mut Tape<f64>, x| {
            let tt = tape.constant(t.clone());
            kl_loss_tape(tape, tt, x)
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "student side {err}");
}

#[test]
fn ce_trivial_cases_and_oracle() {
    let v = 257;
    let uniform = Tensor::<f64>::zeros(&[3, v]);
    assert!((ce_loss(&uniform, &[0, 5, 256]).unwrap() - (v as f64).ln()).abs() < 1e-12);
    let mut perfect = Tensor::<f64>::zeros(&[2, v]);
    perfect.set(0, 3, 100.0);
    perfect.set(1, 9, 100.0);
    assert!(ce_loss(&perfect, &[3, 9]).unwrap() < 1e-40);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = Tensor::<f64>::randn(&[6, 17], 2.0, &mut rng);
        let t: Vec<usize> = (0..6).map(|_| rng.gen_range(0..17)).collect();
        assert!((ce_loss(&x, &t).unwrap() - loop_ce(&x, &t)).abs() < 1e-10);
    }
    assert!(matches!(
        ce_loss(&uniform, &[0, 1, 257]),
        Err(Error::Token { token: 257, .. })
    ));
    assert!(ce_loss(&uniform, &[0, 1]).is_err());
}

#[test]
fn ce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(&[5, 9], 1.0, &mut rng);
    let targets = [0, 8, 3, 3, 1];
    let err = grad_check(move |tape: &mut Tape<f64>, v| ce_loss_tape(tape, v, &targets), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn kl_is_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(&[3, 8], 4.0, &mut rng);
        let s = Tensor::<f64>::randn(&[3, 8], 4.0, &mut rng);
        prop_assert!(kl_loss(&t, &s).unwrap() >= 0.0);
    }

    #[test]
    fn schedule_matches_closed_form(total in 1usize..5000, frac in 0.0f64..0.99, at in 0.0f64..1.0) {
        let step = ((total as f64) * at) as usize;
        let warm = (frac * total as f64).ceil() as usize;
        let lr = lr_at(step, total, 1e-3, frac);
        let expected = if step < warm {
            1e-3 * step as f64 / warm as f64
        } else {
            let p = (step - warm) as f64 / (total - warm).max(1) as f64;
            0.5e-3 * (1.0 + (std::f64::consts::PI * p).cos())
        };
        prop_assert!((lr - expected).abs() < 1e-15);
        prop_assert!((0.0..=1e-3).contains(&lr));
    }
}

#[test]
fn schedule_shape() {
    let total = 1000;
    assert_eq!(lr_at(0, total, 1.0, 0.1), 0.0);
    assert!((lr_at(50, total, 1.0, 0.1) - 0.5).abs() < 1e-12);
    assert_eq!(lr_at(100, total, 1.0, 0.1), 1.0);
    assert!((lr_at(550, total, 1.0, 0.1) - 0.5).abs() < 1e-12);
    assert!(lr_at(total, total, 1.0, 0.1).abs() < 1e-12);
    // Non-increasing after warm-up.
    let tail: Vec<f64> = (100..total).map(|s| lr_at(s, total, 1.0, 0.1)).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn samplers_and_config_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(Sampler::Fixed(32).sample(&mut rng), 32);
    let r: Sampler = "16..48".parse().unwrap();
    assert_eq!(r, Sampler::RandomRange(16, 48));
    let draws: Vec<usize> = (0..500).map(|_| r.sample(&mut rng)).collect();
    assert!(draws.iter().all(|w| (16..=48).contains(w)));
    assert!(draws.contains(&16) && draws.contains(&48));
    assert!("48..16".parse::<Sampler>().is_err());
    let cfg = DistillConfig {
        objective: Objective::Ce,
        window_sampler: r,
        lr: 3e-4,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(DistillConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    for bad in [
        DistillConfig {
            lr: 0.0,
            ..Default::default()
        },
        DistillConfig {
            warmup_frac: 1.0,
            ..Default::default()
        },
        DistillConfig {
            batch_size: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = Tensor::<f64>::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::<f64>::from_f64(&[1, 3], &[0.3, -4.0, 0.0]).unwrap();
    let mut opt = AdamW::new(&[p.shape()]);
    opt.step(&mut [&mut p], &[g], 0.1, 0.0).unwrap();
    // The bias-corrected first update is lr·sign(g) (and nothing for a zero gradient).
    let expected = [0.9, -1.9, 0.5];
    for (a, b) in p.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_q_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        sinks: 2,
        window: 8,
        mixer_mode: MixerMode::SinksSwaAhn(AhnVariant::Gdn),
        ahn_variant: AhnVariant::Gdn,
        ..ModelConfig::toy()
    }
}

fn small_corpus() -> Corpus {
    let train = synthetic_text(1, 20_000);
    let heldout = synthetic_text(2, 5_000);
    Corpus::from_texts(&[&train], &[&heldout]).unwrap()
}

fn distill_cfg() -> DistillConfig {
    DistillConfig {
        window_sampler: Sampler::Fixed(8),
        sink_sampler: Sampler::Fixed(2),
        lr: 1e-2,
        batch_size: 2,
        seq_len: 32,
        steps: 6,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn distillation_keeps_the_base_frozen() {
    let corpus = small_corpus();
    let model = Model::<f64>::init(&tiny(), 1).unwrap();
    let base = model.base_digest();
    let ahn_before = model.ahn.clone();
    let mut t = Trainer::new(model, distill_cfg(), Phase::Distill, 6).unwrap();
    assert!(t.trainable_names().iter().all(|n| n.contains(".ahn.")));
    for _ in 0..6 {
        let m = t.run_step(&corpus).unwrap();
        assert_eq!(m.window, 8);
        assert_eq!(m.sinks, 2);
        assert!(m.loss >= 0.0);
    }
    assert_eq!(t.model.base_digest(), base);
    assert_ne!(t.model.ahn, ahn_before);
}

#[test]
fn first_step_loss_is_the_window_attention_gap() {
    let corpus = small_corpus();
    let model = Model::<f64>::init(&tiny(), 2).unwrap();
    let mut t = Trainer::new(model.clone(), distill_cfg(), Phase::Distill, 6).unwrap();
    let batch = t.draw(&corpus, 0).unwrap();
    let m = t.train_step(&batch).unwrap();
    let mixer = t.mixer(batch.sinks, batch.window);
    let (mut student, mut swa) = (0.0, 0.0);
    for seq in &batch.tokens {
        let input = &seq[..seq.len() - 1];
        let teacher = model.forward(input, &Mixer::full()).unwrap();
        student += kl_loss(&teacher, &model.forward(input, &mixer).unwrap()).unwrap();
        swa += kl_loss(
            &teacher,
            &model.forward(input, &mixer.with_mode(MixerMode::SinksSwa)).unwrap(),
        )
        .unwrap();
    }
    let n = batch.tokens.len() as f64;
    assert!((m.loss - student / n).abs() < 1e-12);
    // With the output gate nearly closed the student starts close to plain window attention.
    let rel = (m.loss - swa / n).abs() / (swa / n);
    assert!(rel < 0.25, "step-0 loss {} vs window-attention KL {}", m.loss, swa / n);
}

#[test]
fn memory_arrays_receive_gradient_only_beyond_the_window() {
    let corpus = small_corpus();
    for variant in AhnVariant::ALL {
        let cfg = ModelConfig {
            mixer_mode: MixerMode::SinksSwaAhn(variant),
            ahn_variant: variant,
            ..tiny()
        };
        let model = Model::<f64>::init(&cfg, 3).unwrap();
        let t = Trainer::new(model, distill_cfg(), Phase::Distill, 6).unwrap();
        let mixer = t.mixer(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let long = corpus.sample(Split::Train, 33, &mut rng).unwrap();
        let (_, grads) = t.sequence_gradients(&long, &mixer).unwrap();
        for (name, g) in t.trainable_names().iter().zip(&grads) {
            assert!(g.max_abs() > 0.0, "{variant}: {name} has no gradient");
        }
        let short = &long[..11];
        let (loss, grads) = t.sequence_gradients(short, &mixer).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));
    }
}

#[test]
fn resumed_run_replays_the_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus();
    let cfg = DistillConfig {
        window_sampler: Sampler::RandomRange(4, 12),
        sink_sampler: Sampler::RandomRange(0, 3),
        ..distill_cfg()
    };
    let model = Model::<f32>::init(&tiny(), 4).unwrap();
    let mut a = Trainer::new(model, cfg, Phase::Distill, 6).unwrap();
    for _ in 0..3 {
        a.run_step(&corpus).unwrap();
    }
    a.model.save_checkpoint(&dir.path().join("m.ckpt")).unwrap();
    a.save_state(&dir.path().join("state.ckpt")).unwrap();
    let next = a.run_step(&corpus).unwrap();
    let model = Model::<f32>::load_checkpoint(&dir.path().join("m.ckpt")).unwrap();
    let mut b = Trainer::load_state(model, &dir.path().join("state.ckpt")).unwrap();
    assert_eq!(b.step, 3);
    let replay = b.run_step(&corpus).unwrap();
    assert_eq!(replay.loss.to_bits(), next.loss.to_bits());
    assert_eq!(replay, next);
    assert_eq!(a.model, b.model);
}

#[test]
fn pretraining_reduces_loss_and_leaves_memory_alone() {
    let corpus = small_corpus();
    let model = Model::<f32>::init(&tiny(), 5).unwrap();
    let ahn = model.ahn.clone();
    let cfg = DistillConfig {
        lr: 1e-2,
        steps: 40,
        ..distill_cfg()
    };
    let mut t = Trainer::new(model, cfg, Phase::Pretrain, 40).unwrap();
    let losses: Vec<f64> = (0..40).map(|_| t.run_step(&corpus).unwrap().loss).collect();
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[35..].iter().sum();
    assert!(tail < head * 0.8, "{head} -> {tail}");
    assert_eq!(t.model.ahn, ahn);
}

#[test]
fn distilling_without_memory_is_rejected() {
    let cfg = ModelConfig {
        mixer_mode: MixerMode::SinksSwa,
        ..tiny()
    };
    let model = Model::<f32>::init(&cfg, 0).unwrap();
    assert!(matches!(
        Trainer::new(model, distill_cfg(), Phase::Distill, 5),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluation_with_a_covering_window_matches_the_teacher() {
    let corpus = small_corpus();
    let model = Model::<f64>::init(&tiny(), 6).unwrap();
    let seqs = corpus.spaced(Split::Heldout, 25, 4).unwrap();
    let rows = evaluate_distill(&model, &seqs, &[4, 8, 64]).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].kl < 1e-12);
    assert!(rows[2].ppl_beyond.is_nan());
    assert!(rows[0].kl > 0.0);
    let full = evaluate_modes(&model, &seqs, &[Mixer::full()]).unwrap();
    assert!((full[0].ppl - rows[2].ppl).abs() < 1e-9);
    let csv = eval_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with(EvalRow::CSV_HEADER));
    assert!(matches!(evaluate_distill(&model, &[], &[4]), Err(Error::Empty(_))));
}

#[test]
fn corpus_splits_and_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let shards = write_synthetic(dir.path(), 3, 3 << 20, 1 << 20).unwrap();
    assert_eq!(shards.len(), 4);
    let corpus = Corpus::load(dir.path()).unwrap();
    assert_eq!(corpus.bytes(Split::Train), 3 << 20);
    assert_eq!(corpus.bytes(Split::Heldout), 1 << 20);
    assert_eq!(corpus.shards(), &shards[..]);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    let a = corpus.sample(Split::Train, 100, &mut r1).unwrap();
    assert_eq!(a, corpus.sample(Split::Train, 100, &mut r2).unwrap());
    assert!(a.iter().all(|&b| b < 128));
    assert!(corpus.sample(Split::Heldout, 2 << 20, &mut r1).is_err());
    assert_eq!(corpus.spaced(Split::Heldout, 64, 10).unwrap().len(), 10);
    // Generation is deterministic in the seed.
    assert_eq!(synthetic_text(5, 10_000), synthetic_text(5, 10_000));
    assert_ne!(synthetic_text(5, 10_000), synthetic_text(6, 10_000));
}

#[test]
fn corpus_rejects_leaked_or_missing_splits() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Corpus::load(&dir.path().join("nope")), Err(Error::Corpus(_))));
    std::fs::create_dir_all(dir.path().join("train")).unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(Error::Corpus(_))));
    std::fs::create_dir_all(dir.path().join("heldout")).unwrap();
    std::fs::write(dir.path().join("train/a.txt"), "some training text").unwrap();
    std::fs::write(dir.path().join("heldout/b.txt"), "some training text").unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(Error::Corpus(_))));
    std::fs::write(dir.path().join("heldout/b.txt"), "other text").unwrap();
    assert!(Corpus::load(dir.path()).is_ok());
}
