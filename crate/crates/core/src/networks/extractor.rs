//! Fixed VGG-style feature extractor used by the content, texture and perceptual terms.
//!
//! Block `i` holds convolutions `conv{i}_{j}` each followed by a ReLU tapped as `relu{i}_{j}`;
//! every block except the last ends with 2×2 max pooling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::weights::{conv_specs, ParamSpec, NetworkWeights};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Output channels of each conv, grouped by block.
    pub blocks: Vec<Vec<usize>>,
    pub kernel: usize,
    pub in_channels: usize,
    /// Per-channel `(mean, std)` applied to [0,1] input before the first conv.
    pub normalize: Option<(Vec<f64>, Vec<f64>)>,
}

impl ExtractorConfig {
    /// VGG-19 layout (the layout of the pretrained weights).
    pub fn vgg19() -> Self {
        ExtractorConfig {
            blocks: vec![
                vec![64; 2],
                vec![128; 2],
                vec![256; 4],
                vec![512; 4],
                vec![512; 4],
            ],
            kernel: 3,
            in_channels: 3,
            normalize: Some((IMAGENET_MEAN.to_vec(), IMAGENET_STD.to_vec())),
        }
    }

    /// VGG-19 depth with narrow layers; used with fixed random weights.
    pub fn toy() -> Self {
        ExtractorConfig {
            blocks: vec![vec![4; 2], vec![8; 2], vec![8; 4], vec![8; 4], vec![8; 4]],
            kernel: 3,
            in_channels: 3,
            normalize: Some((IMAGENET_MEAN.to_vec(), IMAGENET_STD.to_vec())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::config("extractor blocks must be non-empty with positive widths"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("extractor kernel must be odd"));
        }
        if let Some((m, s)) = &self.normalize {
            if m.len() != self.in_channels || s.len() != self.in_channels || s.iter().any(|&v| v <= 0.0) {
                return Err(Error::config("extractor normalisation must give one mean and positive std per channel"));
            }
        }
        Ok(())
    }

    pub fn tap_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for j in 0..b.len() {
                out.push(format!("relu{}_{}", i + 1, j + 1));
            }
        }
        out
    }

    pub fn tap_channels(&self, tap: &str) -> Result<usize> {
        let (i, j) = self.parse_tap(tap)?;
        Ok(self.blocks[i - 1][j - 1])
    }

    fn parse_tap(&self, tap: &str) -> Result<(usize, usize)> {
        let parsed = tap.strip_prefix("relu").and_then(|rest| {
            let (a, b) = rest.split_once('_')?;
            Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?))
        });
        match parsed {
            Some((i, j)) if i >= 1 && i <= self.blocks.len() && j >= 1 && j <= self.blocks[i - 1].len() => Ok((i, j)),
            _ => Err(Error::config(format!(
                "extractor has no tap '{tap}' (available: {})",
                self.tap_names().join(", ")
            ))),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut prev = self.in_channels;
        let k = self.kernel;
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, &c) in b.iter().enumerate() {
                conv_specs(&mut specs, &format!("conv{}_{}", i + 1, j + 1), [c, prev, k, k], c, true, false);
                prev = c;
            }
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub weights: NetworkWeights,
}

impl FeatureExtractor {
    /// Random He-initialised weights from a fixed seed.
    pub fn random(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in config.param_specs() {
            let n: usize = s.shape.iter().product();
            let data = if s.shape.len() == 4 {
                let fan_in = (s.shape[1] * s.shape[2] * s.shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(s.name.clone(), Tensor::new(&s.shape, data)?);
        }
        let weights = NetworkWeights::from_tensors(&config.param_specs(), tensors)?;
        Ok(FeatureExtractor { config, weights })
    }

    pub fn toy() -> Self {
        Self::random(ExtractorConfig::toy(), 0x5eed).expect("toy extractor")
    }

    pub fn from_weights(config: ExtractorConfig, weights: NetworkWeights) -> Result<Self> {
        config.validate()?;
        let tensors = weights.all_tensors().map(|(k, v)| (k.clone(), v.clone())).collect();
        let weights = NetworkWeights::from_tensors(&config.param_specs(), tensors)?;
        Ok(FeatureExtractor { config, weights })
    }

    /// Features at `taps` for an NCHW input in [0,1]. Weights enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape, x: Var, taps: &[&str]) -> Result<BTreeMap<String, Var>> {
        let mut wanted = Vec::with_capacity(taps.len());
        for t in taps {
            wanted.push(self.config.parse_tap(t)?);
        }
        let Some(&last) = wanted.iter().max() else {
            return Ok(BTreeMap::new());
        };
        let c = tape.value(x).shape()[1];
        if c != self.config.in_channels {
            return Err(Error::input(format!(
                "extractor expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut h = x;
        if let Some((mean, std)) = &self.config.normalize {
            h = self.normalize(tape, h, mean, std)?;
        }
        let pad = self.config.kernel / 2;
        let mut out = BTreeMap::new();
        'blocks: for (i, block) in self.config.blocks.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h)?;
            }
            for j in 0..block.len() {
                let prefix = format!("conv{}_{}", i + 1, j + 1);
                let w = tape.constant(self.weights.param(&format!("{prefix}.weight"))?.clone());
                let b = tape.constant(self.weights.param(&format!("{prefix}.bias"))?.clone());
                h = tape.conv2d(h, w, Some(b), 1, pad)?;
                h = tape.relu(h);
                let pos = (i + 1, j + 1);
                if wanted.contains(&pos) {
                    out.insert(format!("relu{}_{}", pos.0, pos.1), h);
                }
                if pos == last {
                    break 'blocks;
                }
            }
        }
        Ok(out)
    }

    fn normalize(&self, tape: &mut Tape, x: Var, mean: &[f64], std: &[f64]) -> Result<Var> {
        // Per-channel affine as a 1×1 convolution with diagonal weights.
        let c = mean.len();
        let mut w = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0 / std[i];
        }
        let b = Tensor::new(&[c], (0..c).map(|i| -mean[i] / std[i]).collect())?;
        let w = tape.constant(w);
        let b = tape.constant(b);
        tape.conv2d(x, w, Some(b), 1, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_parsing() {
        let cfg = ExtractorConfig::vgg19();
        assert_eq!(cfg.tap_channels("relu5_4").unwrap(), 512);
        assert_eq!(cfg.tap_channels("relu2_2").unwrap(), 128);
        assert!(matches!(cfg.tap_channels("relu6_1"), Err(Error::Config(_))));
        assert!(cfg.tap_channels("conv1_1").is_err());
        assert_eq!(cfg.tap_names().len(), 16);
    }

    #[test]
    fn toy_tap_shapes() {
        let e = FeatureExtractor::toy();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.5));
        let taps = e.forward(&mut tape, x, &["relu2_2", "relu5_4"]).unwrap();
        assert_eq!(tape.value(taps["relu2_2"]).shape(), &[1, 8, 16, 16]);
        assert_eq!(tape.value(taps["relu5_4"]).shape(), &[1, 8, 2, 2]);
    }

    #[test]
    fn normalisation_is_affine() {
        let cfg = ExtractorConfig {
            blocks: vec![vec![3]],
            kernel: 1,
            in_channels: 3,
            normalize: Some((vec![0.5; 3], vec![0.25; 3])),
        };
        let mut e = FeatureExtractor::random(cfg, 0).unwrap();
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        e.weights.set_param("conv1_1.weight", eye);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 1, 1], 0.75));
        let f = e.forward(&mut tape, x, &["relu1_1"]).unwrap();
        assert!(tape.value(f["relu1_1"]).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
