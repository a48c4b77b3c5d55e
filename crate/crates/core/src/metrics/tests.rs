use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn luma(img: &ImageTensor, y: usize, x: usize) -> f64 {
    0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
}

/// Direct 2-D window statistics at every valid position.
fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let k = 11;
    let mut w2 = [[0.0; 11]; 11];
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            w2[i][j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            s += w2[i][j];
        }
    }
    let (h, w, _) = a.dims();
    let mut total = 0.0;
    let mut count = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = w2[i][j] / s;
                    let p = luma(a, y + i, x + j);
                    let q = luma(b, y + i, x + j);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let c1 = 0.0001;
            let c2 = 0.0009;
            total += (2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2)
                / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
            count += 1.0;
        }
    }
    total / count
}

fn gmsd_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w, _) = a.dims();
    let px = [[1.0, 0.0, -1.0]; 3];
    let grad = |img: &ImageTensor, y: usize, x: usize| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let v = luma(img, y + i - 1, x + j - 1);
                gx += px[i][j] / 3.0 * v;
                gy += px[j][i] / 3.0 * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    };
    let mut vals = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (p, q) = (grad(a, y, x), grad(b, y, x));
            vals.push((2.0 * p * q + 0.0026) / (p * p + q * q + 0.0026));
        }
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

#[test]
fn psnr_examples() {
    let a = random_image(4, 4, 3, 1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let hr = ImageTensor::filled(4, 4, 3, 0.5);
    let sr = hr.map(|v| v + 1.0 / 255.0);
    assert!((psnr(&sr, &hr, 1.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
    let b = random_image(4, 4, 3, 2);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 48.0;
    assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    assert!(psnr(&a, &ImageTensor::filled(4, 5, 3, 0.0), 1.0).is_err());
}

#[test]
fn psnr_decreases_with_noise() {
    let a = random_image(8, 8, 3, 3);
    let noise = random_image(8, 8, 3, 4);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1] {
        let b = ImageTensor::new(8, 8, 3, a.data().iter().zip(noise.data()).map(|(x, n)| x + amp * (n - 0.5)).collect()).unwrap();
        let p = psnr(&b, &a, 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_examples_and_oracle() {
    let a = random_image(16, 16, 3, 5);
    let (s, map) = ssim(&a, &a, ColorMode::Luminance).unwrap();
    assert_eq!(s, 1.0);
    assert!(map.values.iter().all(|&v| v == 1.0));
    assert_eq!((map.height, map.width), (6, 6));
    let hr = ImageTensor::filled(16, 16, 3, 0.5);
    let sr = ImageTensor::filled(16, 16, 3, 0.6);
    let want = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    assert!((ssim(&sr, &hr, ColorMode::Luminance).unwrap().0 - want).abs() < 1e-9);
    for seed in 0..5 {
        let a = random_image(16, 16, 3, 10 + seed);
        let b = random_image(16, 16, 3, 20 + seed);
        let (s, map) = ssim(&a, &b, ColorMode::Luminance).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-9);
        assert!((map.mean() - s).abs() < 1e-9);
        assert!((ssim(&b, &a, ColorMode::Luminance).unwrap().0 - s).abs() < 1e-9);
    }
    assert!(matches!(ssim(&ImageTensor::filled(10, 20, 3, 0.0), &ImageTensor::filled(10, 20, 3, 0.0), ColorMode::Luminance), Err(Error::Input(_))));
}

#[test]
fn gmsd_examples_and_oracle() {
    let a = random_image(16, 16, 3, 6);
    let (g, map) = gmsd(&a, &a, ColorMode::Luminance).unwrap();
    assert_eq!(g, 0.0);
    assert!(map.values.iter().all(|&v| v == 1.0));
    let shifted = a.map(|v| v + 0.1);
    assert!(gmsd(&shifted, &a, ColorMode::Luminance).unwrap().0 < 1e-7);
    for seed in 0..5 {
        let a = random_image(16, 16, 3, 30 + seed);
        let b = random_image(16, 16, 3, 40 + seed);
        let (g, map) = gmsd(&a, &b, ColorMode::Luminance).unwrap();
        assert!((g - gmsd_oracle(&a, &b)).abs() < 1e-9);
        assert!((population_std(&map.values) - g).abs() < 1e-9);
        assert!((gmsd(&b, &a, ColorMode::Luminance).unwrap().0 - g).abs() < 1e-9);
    }
}

#[test]
fn rgb_average_mode_averages_channels() {
    let a = random_image(16, 16, 3, 7);
    let b = random_image(16, 16, 3, 8);
    let (s, _) = ssim(&a, &b, ColorMode::RgbAverage).unwrap();
    let per: f64 = (0..3)
        .map(|c| {
            let pa = ImageTensor::new(16, 16, 1, a.channel_plane(c)).unwrap();
            let pb = ImageTensor::new(16, 16, 1, b.channel_plane(c)).unwrap();
            ssim(&pa, &pb, ColorMode::RgbAverage).unwrap().0
        })
        .sum::<f64>()
        / 3.0;
    assert!((s - per).abs() < 1e-12);
}

#[test]
fn perceptual_identity_and_symmetry() {
    let e = FeatureExtractor::toy();
    let cfg = PerceptualConfig::for_extractor(&e.config);
    assert_eq!(cfg.taps, ["relu1_2", "relu2_2", "relu3_4", "relu4_4", "relu5_4"]);
    let a = random_image(16, 16, 3, 9);
    let b = random_image(16, 16, 3, 10);
    assert_eq!(perceptual_distance(&a, &a, &e, &cfg).unwrap(), 0.0);
    let d = perceptual_distance(&a, &b, &e, &cfg).unwrap();
    assert!(d > 0.0);
    assert!((perceptual_distance(&b, &a, &e, &cfg).unwrap() - d).abs() < 1e-12);
}

#[test]
fn perceptual_weights_and_errors() {
    let e = FeatureExtractor::toy();
    let a = random_image(16, 16, 3, 11);
    let b = random_image(16, 16, 3, 12);
    let mut cfg = PerceptualConfig {
        taps: vec!["relu1_2".into()],
        channel_weights: BTreeMap::new(),
    };
    let d1 = perceptual_distance(&a, &b, &e, &cfg).unwrap();
    cfg.channel_weights.insert("relu1_2".into(), vec![2.0; 4]);
    let d2 = perceptual_distance(&a, &b, &e, &cfg).unwrap();
    assert!((d2 - 2.0 * d1).abs() < 1e-12);
    cfg.channel_weights.insert("relu1_2".into(), vec![1.0; 3]);
    assert!(matches!(perceptual_distance(&a, &b, &e, &cfg), Err(Error::Config(_))));
    cfg.taps = vec![];
    assert!(matches!(perceptual_distance(&a, &b, &e, &cfg), Err(Error::Config(_))));
}

#[test]
fn maps_render_and_round_trip() {
    assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
    assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    let a = random_image(16, 16, 3, 13);
    let b = random_image(16, 16, 3, 14);
    let (_, map) = ssim(&a, &b, ColorMode::Luminance).unwrap();
    let img = map.to_false_color();
    assert_eq!(img.dims(), (16, 16, 3));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.raw");
    map.save_raw(&p).unwrap();
    let (h, w, v) = QualityMap::read_raw(&p).unwrap();
    assert_eq!((h, w), (6, 6));
    assert_eq!(v[7], map.values[7] as f32);
}

#[test]
fn mean_std_is_sample_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
}
