use endosr_core::data::{build_manifest, load_pair, split_manifest, synthetic_image, Split, SplitFractions};
use endosr_core::imagecore::{degrade, save_png, DegradationConfig};
use endosr_core::losses::charbonnier_loss;
use endosr_core::metrics::{gmsd, psnr, ssim, ColorMode, MetricContext};
use endosr_core::networks::{DiscriminatorConfig, FeatureExtractor, GeneratorConfig};
use endosr_core::trainer::{evaluate_generator, load_generator, run, TrainConfig, TrainState, Trainer};
use endosr_core::ImageTensor;
use proptest::prelude::*;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::preset("desk-8x").unwrap();
    cfg.generator = GeneratorConfig {
        scale: 4,
        base_filters: 4,
        depth: 3,
        dropout_layers: 2,
        ..GeneratorConfig::default()
    };
    cfg.discriminator = DiscriminatorConfig {
        layers: vec![(4, 2), (8, 1)],
        channels: 3,
    };
    cfg.loss.content_tap = "relu2_2".into();
    cfg.loss.texture_tap = "relu2_2".into();
    cfg.hr_patch = Some(32);
    cfg
}

#[test]
fn dataset_to_trained_generator() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    for (i, class) in ["polyp", "normal"].iter().enumerate() {
        for j in 0..4 {
            let img = synthetic_image(48, 40, (i * 10 + j) as u64);
            save_png(&img, &root.join(class).join(format!("{j}.png"))).unwrap();
        }
    }
    let manifest = build_manifest(&root, None, None).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    let fractions = SplitFractions {
        train: 0.5,
        val: 0.25,
        test: 0.25,
    };
    let split = split_manifest(&manifest, fractions, 0, 1, 3).unwrap();
    let deg = DegradationConfig::for_scale(4).unwrap();
    let load = |s: Split| -> Vec<_> {
        split
            .entries
            .iter()
            .filter(|e| e.split == s)
            .map(|e| load_pair(&split, e, &deg, None).unwrap())
            .collect()
    };
    let (train, val) = (load(Split::Train), load(Split::Val));
    assert_eq!((train.len(), val.len()), (4, 2));
    assert_eq!(train[0].lr.dims(), (12, 10, 3));

    let trainer = Trainer::new(tiny_config()).unwrap();
    let mut state = TrainState::new(&trainer.config).unwrap();
    let out = dir.path().join("run");
    let summary = run(&trainer, &mut state, &train, &val, Some(&out), Some(3)).unwrap();
    assert_eq!(summary.steps, 3);
    let g = load_generator(&out.join("generator.ckpt")).unwrap();
    let e = FeatureExtractor::toy();
    let reports = evaluate_generator(&g, &val, &MetricContext::new(&e)).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.psnr.is_finite() && r.ssim <= 1.0 && r.gmsd >= 0.0));
}

fn image(h: usize, w: usize, data: &[f64]) -> ImageTensor {
    ImageTensor::new(h, w, 3, data[..h * w * 3].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn degrade_divides_dimensions(h in 8usize..60, w in 8usize..60, scale in 2usize..5, seed in 0u64..100) {
        prop_assume!(h >= scale && w >= scale);
        let cfg = DegradationConfig { noise_sigma: 0.01, seed, ..DegradationConfig::for_scale(scale).unwrap() };
        let lr = degrade(&synthetic_image(h, w, seed), &cfg).unwrap();
        prop_assert_eq!(lr.dims(), (h / scale, w / scale, 3));
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..1.0, 16 * 16 * 3),
        b in prop::collection::vec(0.0f64..1.0, 16 * 16 * 3),
    ) {
        let (x, y) = (image(16, 16, &a), image(16, 16, &b));
        let s = ssim(&x, &y, ColorMode::Luminance).unwrap().0;
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((s - ssim(&y, &x, ColorMode::Luminance).unwrap().0).abs() < 1e-12);
        let g = gmsd(&x, &y, ColorMode::Luminance).unwrap().0;
        prop_assert!(g >= 0.0);
        prop_assert!((g - gmsd(&y, &x, ColorMode::Luminance).unwrap().0).abs() < 1e-12);
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn charbonnier_is_bounded_below_by_eps(
        a in prop::collection::vec(-1.0f64..1.0, 4 * 4 * 3),
        b in prop::collection::vec(-1.0f64..1.0, 4 * 4 * 3),
    ) {
        let (x, y) = (image(4, 4, &a), image(4, 4, &b));
        let v = charbonnier_loss(&x, &y, 1e-3).unwrap();
        prop_assert!(v >= 1e-3);
        let mad = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        prop_assert!(v >= mad);
    }
}
