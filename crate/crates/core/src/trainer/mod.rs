//! Adversarial training: schedule, Adam, one D-then-G step, resumable state and sweeps.

mod optim;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{random_patch, PairSample};
use crate::error::{Error, Result};
use crate::imagecore::{batch_to_nchw, ImageTensor};
use crate::losses::{adversarial_discriminator, hybrid, LossBreakdown, LossWeights};
use crate::networks::{
    Checkpoint, Discriminator, DiscriminatorConfig, ExtractorConfig, FeatureExtractor, Generator,
    GeneratorConfig, Mode, Precision,
};

pub use optim::Adam;
pub use run::{
    evaluate_bicubic, evaluate_generator, run, run_sweep, RunSummary, SweepRow, SweepTable, DEFAULT_WEIGHT_SET,
    SWEEP_WEIGHT_SETS,
};

/// Where the content/texture feature extractor comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ExtractorSource {
    /// Small randomly initialised VGG-style network.
    Toy,
    /// VGG-19 layout with weights read from a checkpoint file (tensors under `vgg/`).
    Vgg19 { weights: PathBuf },
}

impl ExtractorSource {
    pub fn load(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorSource::Toy => Ok(FeatureExtractor::toy()),
            ExtractorSource::Vgg19 { weights } => {
                let cfg = ExtractorConfig::vgg19();
                let ck = Checkpoint::load(weights)?;
                let w = ck.weights("vgg", &cfg.param_specs())?;
                FeatureExtractor::from_weights(cfg, w)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub extractor: ExtractorSource,
    pub lr_phase1: f64,
    pub iters_phase1: u64,
    pub lr_phase2: f64,
    pub iters_phase2: u64,
    /// Extra joint steps at the phase-2 rate.
    pub finetune_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Side of the random HR training crop; `None` trains on whole images.
    pub hr_patch: Option<usize>,
    pub bn_momentum: f64,
    /// Save a checkpoint every this many steps; 0 only saves at the end.
    pub checkpoint_every: u64,
    /// Score the validation set every this many steps; 0 disables.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
            extractor: ExtractorSource::Vgg19 {
                weights: PathBuf::from("vgg19.ckpt"),
            },
            lr_phase1: 1e-4,
            iters_phase1: 100_000,
            lr_phase2: 1e-5,
            iters_phase2: 100_000,
            finetune_iters: 2000,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            seed: 0,
            hr_patch: Some(256),
            bn_momentum: 0.1,
            checkpoint_every: 5000,
            validate_every: 5000,
        }
    }
}

pub const PRESETS: [&str; 3] = ["desk-8x", "desk-10x", "desk-12x"];

impl TrainConfig {
    /// Small settings that train on 32-pixel LR crops in minutes on a CPU.
    pub fn preset(name: &str) -> Result<Self> {
        let scale = match name {
            "desk-8x" => 8,
            "desk-10x" => 10,
            "desk-12x" => 12,
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(TrainConfig {
            generator: GeneratorConfig {
                scale,
                base_filters: 16,
                depth: 6,
                use_attention: true,
                sab_max_positions: Some(1024),
                dropout_rate: 0.5,
                dropout_layers: 3,
                channels: 3,
            },
            discriminator: DiscriminatorConfig::with_base(8),
            loss: LossWeights {
                content_tap: "relu5_4".into(),
                // Unnormalised Gram matrices scale with tap size; shallow taps swamp the other terms.
                texture_tap: "relu5_4".into(),
                ..LossWeights::default()
            },
            extractor: ExtractorSource::Toy,
            lr_phase1: 1e-3,
            iters_phase1: 1500,
            lr_phase2: 1e-4,
            iters_phase2: 400,
            finetune_iters: 100,
            batch_size: 1,
            hr_patch: Some(32 * scale),
            checkpoint_every: 500,
            validate_every: 0,
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        if self.discriminator.channels != self.generator.channels {
            return Err(Error::config("generator and discriminator channel counts differ"));
        }
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must lie in [0, 1]"));
        }
        if let Some(p) = self.hr_patch {
            if p == 0 || p % self.generator.scale != 0 {
                return Err(Error::config(format!(
                    "hr_patch {p} must be a positive multiple of the scale {}",
                    self.generator.scale
                )));
            }
            self.generator.check_lr_dims(p / self.generator.scale, p / self.generator.scale)?;
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.iters_phase1 + self.iters_phase2 + self.finetune_iters
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Rate(f64),
    Complete,
}

/// Learning rate for the zero-based step `iter`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> Schedule {
    if iter < cfg.iters_phase1 {
        Schedule::Rate(cfg.lr_phase1)
    } else if iter < cfg.total_iters() {
        Schedule::Rate(cfg.lr_phase2)
    } else {
        Schedule::Complete
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_pixel: f64,
    pub g_content: f64,
    pub g_texture: f64,
    pub g_total: f64,
    /// Discriminator loss on the same batch after its update.
    pub d_loss_after: f64,
    pub time_s: f64,
}

/// Sums of the logged terms since the start of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub steps: u64,
    pub d_loss: f64,
    pub g: LossBreakdown,
}

impl RunningLoss {
    fn add(&mut self, d_loss: f64, g: &LossBreakdown) {
        self.steps += 1;
        self.d_loss += d_loss;
        self.g.adv += g.adv;
        self.g.pixel += g.pixel;
        self.g.content += g.content;
        self.g.texture += g.texture;
        self.g.total += g.total;
    }

    pub fn mean(&self) -> (f64, LossBreakdown) {
        let n = self.steps.max(1) as f64;
        (
            self.d_loss / n,
            LossBreakdown {
                adv: self.g.adv / n,
                pixel: self.g.pixel / n,
                content: self.g.content / n,
                texture: self.g.texture / n,
                total: self.g.total / n,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub iteration: u64,
    pub psnr: f64,
    pub generator: Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub iteration: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Drives dropout masks.
    pub rng: ChaCha8Rng,
    /// Drives batch selection and patch positions.
    pub data_rng: ChaCha8Rng,
    pub running: RunningLoss,
    pub last: Option<StepRecord>,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            iteration: 0,
            generator: Generator::new(cfg.generator.clone(), cfg.seed)?,
            discriminator: Discriminator::new(cfg.discriminator.clone(), cfg.seed.wrapping_add(1))?,
            opt_g: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3)),
            running: RunningLoss::default(),
            last: None,
            best: None,
        })
    }

    /// Draws `batch_size` sample indices with replacement.
    pub fn draw_batch(&mut self, n_samples: usize, batch_size: usize) -> Result<Vec<usize>> {
        if n_samples == 0 {
            return Err(Error::Dataset("no training samples".into()));
        }
        Ok((0..batch_size).map(|_| self.data_rng.random_range(0..n_samples)).collect())
    }
}

/// Holds the configuration and the frozen feature extractor used by every step.
pub struct Trainer {
    pub config: TrainConfig,
    pub extractor: FeatureExtractor,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let extractor = config.extractor.load()?;
        Self::with_extractor(config, extractor)
    }

    pub fn with_extractor(config: TrainConfig, extractor: FeatureExtractor) -> Result<Self> {
        config.validate()?;
        for tap in [&config.loss.content_tap, &config.loss.texture_tap] {
            extractor.config.tap_channels(tap)?;
        }
        Ok(Trainer { config, extractor })
    }

    fn crop_batch(&self, state: &mut TrainState, batch: &[PairSample]) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        let scale = self.config.generator.scale;
        let mut lrs = Vec::with_capacity(batch.len());
        let mut hrs = Vec::with_capacity(batch.len());
        for s in batch {
            if s.lr.height() * scale != s.hr.height() || s.lr.width() * scale != s.hr.width() {
                return Err(Error::input(format!(
                    "'{}' is not a {scale}x pair: LR {:?}, HR {:?}",
                    s.source_path,
                    s.lr.dims(),
                    s.hr.dims()
                )));
            }
            let (lr, hr) = match self.config.hr_patch {
                Some(p) => random_patch(s, p, scale, &mut state.data_rng)?,
                None => (s.lr.clone(), s.hr.clone()),
            };
            if let Some(first) = lrs.first() {
                let first: &ImageTensor = first;
                if first.dims() != lr.dims() {
                    return Err(Error::input("batch images differ in size; set hr_patch"));
                }
            }
            lrs.push(lr.to_network_range());
            hrs.push(hr.to_network_range());
        }
        Ok((lrs, hrs))
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&self, state: &mut TrainState, batch: &[PairSample]) -> Result<StepRecord> {
        let started = std::time::Instant::now();
        if batch.is_empty() {
            return Err(Error::input("empty training batch"));
        }
        let cfg = &self.config;
        let lr = match lr_schedule(state.iteration, cfg) {
            Schedule::Rate(r) => r,
            Schedule::Complete => {
                return Err(Error::config(format!(
                    "training is complete after {} steps",
                    cfg.total_iters()
                )))
            }
        };
        let (lrs, hrs) = self.crop_batch(state, batch)?;
        let (input, lifted) = state.generator.prepare(&lrs)?;
        let lifted_t = batch_to_nchw(&lifted)?;
        let hr_t = batch_to_nchw(&hrs)?;
        let (out_h, out_w) = (hrs[0].height(), hrs[0].width());

        // Generator pass kept on its tape for the generator update.
        let mut gt = Tape::new();
        let x = gt.constant(input);
        let g_pass = state
            .generator
            .forward(&mut gt, x, out_h, out_w, Mode::Train, Some(&mut state.rng), true)?;
        let fake_t = gt.value(g_pass.output).clone();
        if !fake_t.all_finite() {
            return Err(Error::numerical("generator", "non-finite generator output"));
        }

        // Discriminator update on the detached fake.
        let d_loss = {
            let mut dt = Tape::new();
            let l = dt.constant(lifted_t.clone());
            let real = dt.constant(hr_t.clone());
            let fake = dt.constant(fake_t);
            let real_pass = state.discriminator.forward(&mut dt, l, real, Mode::Train, true)?;
            let fake_pass = state.discriminator.forward(&mut dt, l, fake, Mode::Train, true)?;
            let loss = adversarial_discriminator(&mut dt, fake_pass.score, real_pass.score)?;
            let value = dt.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numerical("discriminator", "non-finite discriminator loss"));
            }
            let grads = dt.backward(loss)?;
            state.opt_d.update(&mut state.discriminator.weights, grads.params(), lr, 0.0)?;
            let w = &mut state.discriminator.weights;
            w.apply_bn_updates(&real_pass.bn_updates, cfg.bn_momentum)?;
            w.apply_bn_updates(&fake_pass.bn_updates, cfg.bn_momentum)?;
            value
        };

        // Generator update against the updated, frozen discriminator.
        let l = gt.constant(lifted_t);
        let real = gt.constant(hr_t);
        let fake_pass = state
            .discriminator
            .forward(&mut gt, l, g_pass.output, Mode::Train, false)?;
        let real_pass = state.discriminator.forward(&mut gt, l, real, Mode::Train, false)?;
        let d_after = adversarial_discriminator(&mut gt, fake_pass.score, real_pass.score)?;
        let d_loss_after = gt.value(d_after).item();
        let terms = hybrid(
            &mut gt,
            &cfg.loss,
            &self.extractor,
            g_pass.output,
            real,
            Some(fake_pass.score),
        )?;
        if !terms.breakdown.total.is_finite() {
            return Err(Error::numerical("generator", "non-finite generator loss"));
        }
        let grads = gt.backward(terms.total)?;
        state
            .opt_g
            .update(&mut state.generator.weights, grads.params(), lr, cfg.loss.weight_decay)?;
        state
            .generator
            .weights
            .apply_bn_updates(&g_pass.bn_updates, cfg.bn_momentum)?;

        let b = terms.breakdown;
        state.running.add(d_loss, &b);
        let record = StepRecord {
            iter: state.iteration,
            lr,
            d_loss,
            g_adv: b.adv,
            g_pixel: b.pixel,
            g_content: b.content,
            g_texture: b.texture,
            g_total: b.total,
            d_loss_after,
            time_s: started.elapsed().as_secs_f64(),
        };
        state.iteration += 1;
        state.last = Some(record.clone());
        Ok(record)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format("RNG seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad RNG position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    iteration: u64,
    rng: RngState,
    data_rng: RngState,
    opt_g_step: u64,
    opt_d_step: u64,
    running: RunningLoss,
    last: Option<StepRecord>,
    best: Option<(u64, f64)>,
}

pub const KIND_TRAIN_STATE: &str = "train_state";
pub const KIND_GENERATOR: &str = "generator";

fn put_moments(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    for (name, t) in &opt.m {
        ck.put_tensor(&format!("{prefix}/m/{name}"), t, Precision::F64);
    }
    for (name, t) in &opt.v {
        ck.put_tensor(&format!("{prefix}/v/{name}"), t, Precision::F64);
    }
}

fn get_moments(ck: &Checkpoint, prefix: &str, opt: &mut Adam) -> Result<()> {
    let (m, v) = (format!("{prefix}/m/"), format!("{prefix}/v/"));
    let mut ms = BTreeMap::new();
    let mut vs = BTreeMap::new();
    for r in ck.records() {
        if let Some(n) = r.name.strip_prefix(&m) {
            ms.insert(n.to_string(), ck.tensor(&r.name)?);
        } else if let Some(n) = r.name.strip_prefix(&v) {
            vs.insert(n.to_string(), ck.tensor(&r.name)?);
        }
    }
    if ms.len() != vs.len() || ms.keys().ne(vs.keys()) {
        return Err(Error::Format(format!("{prefix}: first and second moments do not match")));
    }
    opt.m = ms;
    opt.v = vs;
    Ok(())
}

/// Serialises the full training state in f64 so a resumed run continues bit-identically.
pub fn state_checkpoint(cfg: &TrainConfig, state: &TrainState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.put_json("meta/kind", &KIND_TRAIN_STATE)?;
    ck.put_json("meta/config", cfg)?;
    let meta = StateMeta {
        iteration: state.iteration,
        rng: RngState::capture(&state.rng),
        data_rng: RngState::capture(&state.data_rng),
        opt_g_step: state.opt_g.step,
        opt_d_step: state.opt_d.step,
        running: state.running,
        last: state.last.clone(),
        best: state.best.as_ref().map(|b| (b.iteration, b.psnr)),
    };
    ck.put_json("meta/state", &meta)?;
    ck.put_weights("g", &state.generator.weights, Precision::F64);
    ck.put_weights("d", &state.discriminator.weights, Precision::F64);
    put_moments(&mut ck, "opt_g", &state.opt_g);
    put_moments(&mut ck, "opt_d", &state.opt_d);
    if let Some(b) = &state.best {
        ck.put_weights("best/g", &b.generator.weights, Precision::F64);
    }
    Ok(ck)
}

pub fn checkpoint_save(cfg: &TrainConfig, state: &TrainState, path: &Path) -> Result<()> {
    state_checkpoint(cfg, state)?.save(path)
}

fn expect_kind(ck: &Checkpoint, want: &str) -> Result<String> {
    let kind: String = ck.json("meta/kind")?;
    if kind != want && want != "*" {
        return Err(Error::Format(format!("expected a {want} checkpoint, found {kind}")));
    }
    Ok(kind)
}

pub fn state_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, TrainState)> {
    expect_kind(ck, KIND_TRAIN_STATE)?;
    let cfg: TrainConfig = ck.json("meta/config")?;
    cfg.validate()?;
    let meta: StateMeta = ck.json("meta/state")?;
    let generator = Generator::from_weights(cfg.generator.clone(), ck.weights("g", &cfg.generator.param_specs())?)?;
    let discriminator = Discriminator::from_weights(
        cfg.discriminator.clone(),
        ck.weights("d", &cfg.discriminator.param_specs())?,
    )?;
    let mut opt_g = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    opt_g.step = meta.opt_g_step;
    get_moments(ck, "opt_g", &mut opt_g)?;
    let mut opt_d = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    opt_d.step = meta.opt_d_step;
    get_moments(ck, "opt_d", &mut opt_d)?;
    let best = match meta.best {
        Some((iteration, psnr)) => Some(BestSnapshot {
            iteration,
            psnr,
            generator: Generator::from_weights(cfg.generator.clone(), ck.weights("best/g", &cfg.generator.param_specs())?)?,
        }),
        None => None,
    };
    let state = TrainState {
        iteration: meta.iteration,
        generator,
        discriminator,
        opt_g,
        opt_d,
        rng: meta.rng.restore()?,
        data_rng: meta.data_rng.restore()?,
        running: meta.running,
        last: meta.last,
        best,
    };
    Ok((cfg, state))
}

pub fn checkpoint_load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    state_from_checkpoint(&Checkpoint::load(path)?)
}

/// Generator-only export in f32, for inference.
pub fn export_generator(generator: &Generator, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_json("meta/kind", &KIND_GENERATOR)?;
    ck.put_json("meta/generator", &generator.config)?;
    ck.put_weights("g", &generator.weights, Precision::F32);
    ck.save(path)
}

/// Loads a generator from either a generator export or a full training checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let ck = Checkpoint::load(path)?;
    let kind = expect_kind(&ck, "*")?;
    let cfg: GeneratorConfig = match kind.as_str() {
        KIND_GENERATOR => ck.json("meta/generator")?,
        KIND_TRAIN_STATE => ck.json::<TrainConfig>("meta/config")?.generator,
        other => return Err(Error::Format(format!("unknown checkpoint kind '{other}'"))),
    };
    Generator::from_weights(cfg.clone(), ck.weights("g", &cfg.param_specs())?)
}

#[cfg(test)]
mod tests;
