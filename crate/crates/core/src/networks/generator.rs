//! Attention U-Net generator.
//!
//! The LR input is bicubic-lifted to the target grid, edge-padded to a multiple of `2^depth`,
//! passed through a resolution-preserving U-Net and cropped back, so any integer scale gives
//! exactly `lr × r` output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sab::{sab_forward, sab_specs};
use super::weights::{conv_specs, dropout_mask, BnUpdate, Binder, Mode, NetworkWeights, ParamSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::imagecore::{bicubic_upscale, ImageTensor};
use crate::tensor::Tensor;

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scale: usize,
    /// Filters of the first encoder layer; deeper layers use 2×, 4×, then 8× this.
    pub base_filters: usize,
    /// Number of stride-2 encoder levels.
    pub depth: usize,
    pub use_attention: bool,
    /// Pool the attention block's input when the map has more positions than this.
    pub sab_max_positions: Option<usize>,
    pub dropout_rate: f64,
    /// Leading decoder layers that apply dropout.
    pub dropout_layers: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scale: 8,
            base_filters: 64,
            depth: 8,
            use_attention: true,
            sab_max_positions: None,
            dropout_rate: 0.5,
            dropout_layers: 3,
            channels: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvDown,
    ConvUp,
    Sab,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    None,
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels; for decoder layers this counts the concatenated skip.
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub skip_partner: Option<usize>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::config("scale must be at least 1"));
        }
        if self.base_filters == 0 || self.channels == 0 {
            return Err(Error::config("filter and channel counts must be positive"));
        }
        if !(2..=12).contains(&self.depth) {
            return Err(Error::config(format!("depth {} outside 2..=12", self.depth)));
        }
        if self.dropout_rate != 0.0 && self.dropout_rate != 0.5 {
            return Err(Error::config("dropout rate must be 0 or 0.5"));
        }
        if self.dropout_layers >= self.depth {
            return Err(Error::config("more dropout layers than decoder layers"));
        }
        Ok(())
    }

    /// Filters of encoder level `i` (1-based).
    pub fn level_filters(&self, i: usize) -> usize {
        self.base_filters * (1usize << (i - 1).min(3))
    }

    /// Spatial multiple the padded network input must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let d = self.depth;
        let mut out = Vec::new();
        let mut level_index = vec![0; d + 1];
        for i in 1..=d {
            out.push(LayerSpec {
                name: format!("enc{i}"),
                kind: LayerKind::ConvDown,
                filters: self.level_filters(i),
                kernel: KERNEL,
                stride: 2,
                batch_norm: i != 1 && i != d,
                activation: Activation::LeakyRelu,
                dropout_rate: 0.0,
                skip_partner: None,
            });
            level_index[i] = out.len() - 1;
            if i == 1 && self.use_attention {
                out.push(LayerSpec {
                    name: "sab".into(),
                    kind: LayerKind::Sab,
                    filters: self.level_filters(1),
                    kernel: 1,
                    stride: 1,
                    batch_norm: false,
                    activation: Activation::None,
                    dropout_rate: 0.0,
                    skip_partner: None,
                });
                level_index[1] = out.len() - 1;
            }
        }
        for j in 1..d {
            let level = d - j;
            out.push(LayerSpec {
                name: format!("dec{j}"),
                kind: LayerKind::ConvUp,
                filters: 2 * self.level_filters(level),
                kernel: KERNEL,
                stride: 2,
                batch_norm: true,
                activation: Activation::Relu,
                dropout_rate: if j <= self.dropout_layers { self.dropout_rate } else { 0.0 },
                skip_partner: Some(level_index[level]),
            });
        }
        out.push(LayerSpec {
            name: "out".into(),
            kind: LayerKind::Output,
            filters: self.channels,
            kernel: KERNEL,
            stride: 2,
            batch_norm: false,
            activation: Activation::Tanh,
            dropout_rate: 0.0,
            skip_partner: None,
        });
        out
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.depth;
        let mut specs = Vec::new();
        let mut prev = self.channels;
        for i in 1..=d {
            let c = self.level_filters(i);
            let bn = i != 1 && i != d;
            conv_specs(&mut specs, &format!("enc{i}"), [c, prev, KERNEL, KERNEL], c, !bn, bn);
            if i == 1 && self.use_attention {
                sab_specs(&mut specs, "sab", c);
            }
            prev = c;
        }
        for j in 1..d {
            let c = self.level_filters(d - j);
            conv_specs(&mut specs, &format!("dec{j}"), [prev, c, KERNEL, KERNEL], c, false, true);
            prev = 2 * c;
        }
        conv_specs(&mut specs, "out", [prev, self.channels, KERNEL, KERNEL], self.channels, true, false);
        specs
    }

    /// Smallest LR side length accepted at this scale.
    pub fn min_lr_size(&self) -> usize {
        self.size_multiple().div_ceil(self.scale)
    }

    pub fn check_lr_dims(&self, h: usize, w: usize) -> Result<()> {
        let (hh, ww) = (h * self.scale, w * self.scale);
        let m = self.size_multiple();
        if hh < m || ww < m {
            return Err(Error::config(format!(
                "a {h}x{w} input lifts to {hh}x{ww} at {}x, but the {}-level encoder needs at least {m}x{m}; \
                 use inputs of at least {n}x{n}",
                self.scale,
                self.depth,
                n = self.min_lr_size()
            )));
        }
        Ok(())
    }
}

/// Bicubic lift of a network-range LR image to the `r×` grid, still in network range.
pub fn lift(lr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    Ok(bicubic_upscale(&lr.to_unit_range(), scale)?.to_network_range())
}

/// Edge-replicating pad of an NCHW tensor on the bottom/right up to a multiple of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> Tensor {
    let (n, c, h, w) = t.dims4();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for nc in 0..n * c {
        for y in 0..ph {
            let row = nc * h * w + y.min(h - 1) * w;
            for x in 0..pw {
                out.push(t.data()[row + x.min(w - 1)]);
            }
        }
    }
    Tensor::new(&[n, c, ph, pw], out).expect("padded shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub weights: NetworkWeights,
}

/// Result of a generator pass on a tape.
pub struct GeneratorPass {
    /// `[n, channels, H, W]` in [-1, 1].
    pub output: Var,
    pub bn_updates: Vec<BnUpdate>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = NetworkWeights::initialise(&config.param_specs(), INIT_STD, &mut rng);
        Ok(Generator { config, weights })
    }

    pub fn from_weights(config: GeneratorConfig, weights: NetworkWeights) -> Result<Self> {
        config.validate()?;
        let tensors = weights.all_tensors().map(|(k, v)| (k.clone(), v.clone())).collect();
        let weights = NetworkWeights::from_tensors(&config.param_specs(), tensors)?;
        Ok(Generator { config, weights })
    }

    /// Lifts and pads a batch of equally sized LR images. Returns the network input and the
    /// unpadded lifted images (the discriminator's conditioning input).
    pub fn prepare(&self, lr: &[ImageTensor]) -> Result<(Tensor, Vec<ImageTensor>)> {
        let first = lr.first().ok_or_else(|| Error::input("empty batch"))?;
        self.config.check_lr_dims(first.height(), first.width())?;
        if first.channels() != self.config.channels {
            return Err(Error::input(format!(
                "generator expects {} channels, got {}",
                self.config.channels,
                first.channels()
            )));
        }
        let lifted = lr
            .iter()
            .map(|img| lift(img, self.config.scale))
            .collect::<Result<Vec<_>>>()?;
        let t = crate::imagecore::batch_to_nchw(&lifted)?;
        Ok((pad_to_multiple(&t, self.config.size_multiple()), lifted))
    }

    /// Runs the U-Net on a prepared input and crops to `out_h × out_w`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        out_h: usize,
        out_w: usize,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        trainable: bool,
    ) -> Result<GeneratorPass> {
        let cfg = &self.config;
        let d = cfg.depth;
        let (_, c, h, w) = tape.value(input).dims4();
        let m = cfg.size_multiple();
        if c != cfg.channels || h % m != 0 || w % m != 0 || h < out_h || w < out_w {
            return Err(Error::config(format!(
                "generator input {:?} must have {} channels and sides divisible by {m}",
                tape.value(input).shape(),
                cfg.channels
            )));
        }
        let mut b = Binder::new(&self.weights, trainable);
        let mut updates = Vec::new();
        let mut skips: Vec<Var> = Vec::with_capacity(d);
        let mut x = input;
        for i in 1..=d {
            let name = format!("enc{i}");
            let bn = i != 1 && i != d;
            x = b.conv(tape, x, &name, 2, 1, !bn)?;
            if bn {
                x = b.batch_norm(tape, x, &format!("{name}.bn"), mode, &mut updates)?;
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            if i == 1 && cfg.use_attention {
                x = sab_forward(tape, &mut b, x, "sab", cfg.sab_max_positions)?;
            }
            skips.push(x);
        }
        for j in 1..d {
            let name = format!("dec{j}");
            x = b.conv_transpose(tape, x, &name, 2, 1, false)?;
            x = b.batch_norm(tape, x, &format!("{name}.bn"), mode, &mut updates)?;
            if mode == Mode::Train && j <= cfg.dropout_layers && cfg.dropout_rate > 0.0 {
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::config("train-mode generator pass needs an RNG for dropout"))?;
                let mask = dropout_mask(tape.value(x).len(), cfg.dropout_rate, r);
                x = tape.dropout(x, &mask, cfg.dropout_rate)?;
            }
            x = tape.relu(x);
            x = tape.concat_channels(&[x, skips[d - j - 1]])?;
        }
        x = b.conv_transpose(tape, x, "out", 2, 1, true)?;
        x = tape.tanh(x);
        if (h, w) != (out_h, out_w) {
            x = tape.crop(x, 0, 0, out_h, out_w)?;
        }
        Ok(GeneratorPass {
            output: x,
            bn_updates: updates,
        })
    }

    /// Eval-mode super-resolution of one network-range LR image.
    pub fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let (input, lifted) = self.prepare(std::slice::from_ref(lr))?;
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let pass = self.forward(
            &mut tape,
            x,
            lifted[0].height(),
            lifted[0].width(),
            Mode::Eval,
            None,
            false,
        )?;
        let out = tape.value(pass.output);
        if !out.all_finite() {
            return Err(Error::numerical("out", "non-finite generator output"));
        }
        Ok(ImageTensor::from_nchw(out, 0)?)
    }
}
