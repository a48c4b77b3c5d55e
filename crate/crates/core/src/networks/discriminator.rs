//! Conditional PatchGAN discriminator over `(lifted LR, candidate)` pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{INIT_STD, KERNEL, LEAKY_SLOPE};
use super::weights::{conv_specs, BnUpdate, Binder, Mode, NetworkWeights, ParamSpec};
use crate::autograd::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// `(filters, stride)` per hidden conv layer.
    pub layers: Vec<(usize, usize)>,
    /// Channels of each image in the pair.
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            layers: vec![(64, 2), (128, 2), (256, 2), (512, 1)],
            channels: 3,
        }
    }
}

impl DiscriminatorConfig {
    /// Default layout with every layer's filters divided by `64 / base`.
    pub fn with_base(base: usize) -> Self {
        DiscriminatorConfig {
            layers: vec![(base, 2), (2 * base, 2), (4 * base, 2), (8 * base, 1)],
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|&(f, s)| f == 0 || s == 0) {
            return Err(Error::config("discriminator layers need positive filters and strides"));
        }
        if self.channels == 0 {
            return Err(Error::config("discriminator channels must be positive"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut prev = 2 * self.channels;
        for (i, &(f, _)) in self.layers.iter().enumerate() {
            let bn = i > 0;
            conv_specs(&mut specs, &format!("conv{}", i + 1), [f, prev, KERNEL, KERNEL], f, !bn, bn);
            prev = f;
        }
        conv_specs(&mut specs, "out", [1, prev, KERNEL, KERNEL], 1, true, false);
        specs
    }

    /// Patch-map side for a square `n × n` input, or `None` if a layer collapses.
    pub fn map_size(&self, n: usize) -> Option<usize> {
        let mut s = n;
        for &(_, stride) in &self.layers {
            s = ConvGeometry::new(KERNEL, stride, 1).conv_out(s)?;
        }
        ConvGeometry::new(KERNEL, 1, 1).conv_out(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub weights: NetworkWeights,
}

pub struct DiscriminatorPass {
    /// `[n, 1, h, w]` patch probabilities.
    pub map: Var,
    /// `[n]` mean of each sample's map.
    pub score: Var,
    pub bn_updates: Vec<BnUpdate>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = NetworkWeights::initialise(&config.param_specs(), INIT_STD, &mut rng);
        Ok(Discriminator { config, weights })
    }

    pub fn from_weights(config: DiscriminatorConfig, weights: NetworkWeights) -> Result<Self> {
        config.validate()?;
        let tensors = weights.all_tensors().map(|(k, v)| (k.clone(), v.clone())).collect();
        let weights = NetworkWeights::from_tensors(&config.param_specs(), tensors)?;
        Ok(Discriminator { config, weights })
    }

    /// Scores `candidate` conditioned on `lifted` (both NCHW, network range, same shape).
    pub fn forward(&self, tape: &mut Tape, lifted: Var, candidate: Var, mode: Mode, trainable: bool) -> Result<DiscriminatorPass> {
        let (ls, cs) = (tape.value(lifted).shape(), tape.value(candidate).shape());
        if ls != cs {
            return Err(Error::input(format!(
                "discriminator pair mismatch: conditioning {ls:?} vs candidate {cs:?}"
            )));
        }
        if cs[1] != self.config.channels {
            return Err(Error::input(format!(
                "discriminator expects {} channels, got {}",
                self.config.channels, cs[1]
            )));
        }
        let mut b = Binder::new(&self.weights, trainable);
        let mut updates = Vec::new();
        let mut x = tape.concat_channels(&[lifted, candidate])?;
        for (i, &(_, stride)) in self.config.layers.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let bn = i > 0;
            x = b.conv(tape, x, &name, stride, 1, !bn)?;
            if bn {
                x = b.batch_norm(tape, x, &format!("{name}.bn"), mode, &mut updates)?;
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        x = b.conv(tape, x, "out", 1, 1, true)?;
        let map = tape.sigmoid(x);
        let score = tape.mean_per_sample(map);
        Ok(DiscriminatorPass {
            map,
            score,
            bn_updates: updates,
        })
    }

    /// Eval-mode patch map for one pair of HWC images.
    pub fn patch_map(&self, lifted: &ImageTensor, candidate: &ImageTensor) -> Result<(usize, usize, Vec<f64>)> {
        if lifted.dims() != candidate.dims() {
            return Err(Error::input(format!(
                "discriminator pair mismatch: {:?} vs {:?}",
                lifted.dims(),
                candidate.dims()
            )));
        }
        let mut tape = Tape::new();
        let l = tape.constant(lifted.to_nchw());
        let c = tape.constant(candidate.to_nchw());
        let pass = self.forward(&mut tape, l, c, Mode::Eval, false)?;
        let m = tape.value(pass.map);
        let (_, _, h, w) = m.dims4();
        Ok((h, w, m.data().to_vec()))
    }
}
