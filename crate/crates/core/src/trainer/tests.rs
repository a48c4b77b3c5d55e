use super::*;
use crate::data::synthetic_sample;
use crate::imagecore::DegradationConfig;
use crate::losses::Ablation;
use crate::networks::ExtractorConfig;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig {
            scale: 2,
            base_filters: 4,
            depth: 3,
            use_attention: true,
            sab_max_positions: None,
            dropout_rate: 0.5,
            dropout_layers: 2,
            channels: 3,
        },
        discriminator: DiscriminatorConfig {
            layers: vec![(4, 2), (8, 1)],
            channels: 3,
        },
        loss: LossWeights {
            content_tap: "relu2_1".into(),
            texture_tap: "relu1_2".into(),
            ..LossWeights::default()
        },
        extractor: ExtractorSource::Toy,
        lr_phase1: 1e-3,
        iters_phase1: 4,
        lr_phase2: 1e-4,
        iters_phase2: 2,
        finetune_iters: 1,
        batch_size: 2,
        seed: 9,
        hr_patch: Some(16),
        checkpoint_every: 0,
        validate_every: 0,
        ..TrainConfig::default()
    }
}

fn tiny_extractor() -> FeatureExtractor {
    let cfg = ExtractorConfig {
        blocks: vec![vec![4, 4], vec![6]],
        kernel: 3,
        in_channels: 3,
        normalize: None,
    };
    FeatureExtractor::random(cfg, 3).unwrap()
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::with_extractor(cfg, tiny_extractor()).unwrap()
}

/// Equality ignoring wall-clock timings.
fn same_state(a: &TrainState, b: &TrainState) -> bool {
    let strip = |s: &TrainState| {
        let mut s = s.clone();
        if let Some(r) = s.last.as_mut() {
            r.time_s = 0.0;
        }
        s
    };
    strip(a) == strip(b)
}

fn samples(n: usize) -> Vec<PairSample> {
    let deg = DegradationConfig::for_scale(2).unwrap();
    (0..n).map(|i| synthetic_sample(24, &deg, 100 + i as u64).unwrap()).collect()
}

#[test]
fn schedule_phases() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), Schedule::Rate(1e-4));
    assert_eq!(lr_schedule(99_999, &cfg), Schedule::Rate(1e-4));
    assert_eq!(lr_schedule(100_000, &cfg), Schedule::Rate(1e-5));
    assert_eq!(lr_schedule(200_000, &cfg), Schedule::Rate(1e-5));
    assert_eq!(lr_schedule(201_999, &cfg), Schedule::Rate(1e-5));
    assert_eq!(lr_schedule(202_000, &cfg), Schedule::Complete);
}

#[test]
fn defaults_and_presets_validate() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.beta1, cfg.beta2), (0.5, 0.999));
    assert_eq!(cfg.loss.weight_decay, 0.0);
    for p in PRESETS {
        let c = TrainConfig::preset(p).unwrap();
        c.validate().unwrap();
        assert!(c.total_iters() <= 2000);
        assert_eq!(c.hr_patch, Some(32 * c.generator.scale));
    }
    assert!(TrainConfig::preset("desk-3x").is_err());
    let mut bad = tiny_config();
    bad.lr_phase1 = -1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn zero_rate_keeps_weights_and_reports_losses() {
    let mut cfg = tiny_config();
    cfg.lr_phase1 = 0.0;
    cfg.bn_momentum = 0.0;
    let t = trainer(cfg);
    let mut state = TrainState::new(&t.config).unwrap();
    let (g0, d0) = (state.generator.clone(), state.discriminator.clone());
    let rec = t.step(&mut state, &samples(2)).unwrap();
    assert_eq!(state.generator, g0);
    assert_eq!(state.discriminator, d0);
    assert!(rec.d_loss > 0.0 && rec.g_total > 0.0 && rec.g_pixel > 0.0);
    assert_eq!(state.iteration, 1);
}

#[test]
fn step_is_deterministic() {
    let t = trainer(tiny_config());
    let data = samples(2);
    let start = TrainState::new(&t.config).unwrap();
    let mut a = start.clone();
    let mut b = start.clone();
    let ra = t.step(&mut a, &data).unwrap();
    let rb = t.step(&mut b, &data).unwrap();
    assert!(same_state(&a, &b));
    assert_eq!(ra.g_total.to_bits(), rb.g_total.to_bits());
    assert_ne!(a.generator, start.generator);
    assert_ne!(a.discriminator, start.discriminator);
}

#[test]
fn ablations_zero_their_terms() {
    for ablation in [Ablation::WithoutContent, Ablation::WithoutTexture] {
        let mut cfg = tiny_config();
        cfg.loss.ablation = ablation;
        let t = trainer(cfg);
        let mut state = TrainState::new(&t.config).unwrap();
        let data = samples(2);
        let summary = run::run(&t, &mut state, &data, &[], None, Some(3)).unwrap();
        for r in &summary.records {
            match ablation {
                Ablation::WithoutContent => assert_eq!(r.g_content, 0.0),
                _ => assert_eq!(r.g_texture, 0.0),
            }
        }
    }
}

#[test]
fn attention_free_state_has_no_sab_tensors() {
    let mut cfg = tiny_config();
    cfg.generator.use_attention = false;
    let t = trainer(cfg);
    let mut state = TrainState::new(&t.config).unwrap();
    t.step(&mut state, &samples(1)).unwrap();
    let ck = state_checkpoint(&t.config, &state).unwrap();
    assert!(ck.records().iter().all(|r| !r.name.contains("sab")));
    assert!(state.opt_g.m.keys().all(|k| !k.starts_with("sab")));
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let t = trainer(tiny_config());
    let data = samples(3);
    let mut state = TrainState::new(&t.config).unwrap();
    run::run(&t, &mut state, &data, &[], None, Some(2)).unwrap();
    let bytes = state_checkpoint(&t.config, &state).unwrap().to_bytes();
    let (cfg2, mut resumed) = state_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(cfg2, t.config);
    assert_eq!(resumed, state);
    let a = run::run(&t, &mut state, &data, &[], None, Some(3)).unwrap();
    let b = run::run(&t, &mut resumed, &data, &[], None, Some(3)).unwrap();
    assert!(same_state(&state, &resumed));
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.g_total.to_bits(), y.g_total.to_bits());
        assert_eq!(x.d_loss.to_bits(), y.d_loss.to_bits());
    }
}

#[test]
fn generator_export_loads_for_inference() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(tiny_config());
    let mut state = TrainState::new(&t.config).unwrap();
    t.step(&mut state, &samples(1)).unwrap();
    let gpath = dir.path().join("g.ckpt");
    export_generator(&state.generator, &gpath).unwrap();
    let g = load_generator(&gpath).unwrap();
    assert_eq!(g.config, state.generator.config);
    let lr = samples(1)[0].lr.to_network_range();
    let out = g.super_resolve(&lr).unwrap();
    assert_eq!(out.dims(), (24, 24, 3));
    // f32 export stays close to the f64 weights.
    let full = state.generator.super_resolve(&lr).unwrap();
    let diff = out.data().iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "{diff}");
    assert!(checkpoint_load(&gpath).is_err());
    let spath = dir.path().join("s.ckpt");
    checkpoint_save(&t.config, &state, &spath).unwrap();
    assert_eq!(load_generator(&spath).unwrap(), state.generator);
}

#[test]
fn corrupt_magic_is_a_format_error() {
    let t = trainer(tiny_config());
    let state = TrainState::new(&t.config).unwrap();
    let mut bytes = state_checkpoint(&t.config, &state).unwrap().to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn run_stops_at_schedule_end_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.checkpoint_every = 3;
    cfg.validate_every = 2;
    let t = trainer(cfg);
    let mut state = TrainState::new(&t.config).unwrap();
    let data = samples(2);
    let s = run::run(&t, &mut state, &data, &data[..1], Some(dir.path()), None).unwrap();
    assert_eq!(s.steps, 7);
    assert_eq!(s.checkpoints.len(), 2);
    assert!(state.best.is_some());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[4].lr, 1e-4);
    for f in ["state.ckpt", "generator.ckpt", "best_generator.ckpt", "timing.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(matches!(t.step(&mut state, &data), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(tiny_config());
    let mut state = TrainState::new(&t.config).unwrap();
    let w = state.generator.weights.param_mut("out.bias").unwrap();
    w.data_mut()[0] = f64::NAN;
    let err = run::run(&t, &mut state, &samples(1), &[], Some(dir.path()), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("failure_snapshot"));
    assert!(dir.path().join("failure_snapshot.ckpt").exists());
}

#[test]
fn sweep_ranks_and_flags_default() {
    let mut cfg = tiny_config();
    cfg.iters_phase1 = 2;
    cfg.iters_phase2 = 0;
    cfg.finetune_iters = 0;
    let t = trainer(cfg);
    let data = samples(3);
    let ex = tiny_extractor();
    let sets = [(0.05, 0.55, 0.40), DEFAULT_WEIGHT_SET];
    let a = run_sweep(&t, &sets, &data[..2], &data[2..], &ex, None).unwrap();
    let b = run_sweep(&t, &sets, &data[..2], &data[2..], &ex, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    assert!(a.rows[1].is_default && !a.rows[0].is_default);
    let mut ranks: Vec<usize> = a.rows.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, vec![1, 2]);
    let best = a.ranked()[0];
    assert!(a.rows.iter().all(|r| r.psnr <= best.psnr));
    let one = run_sweep(&t, &sets[..1], &data[..2], &data[2..], &ex, None).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert!(run_sweep(&t, &[], &data, &data, &ex, None).is_err());
}
