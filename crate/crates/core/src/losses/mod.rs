//! Loss terms of the hybrid objective, all differentiable with respect to the SR image.
//!
//! Images arrive on the tape as NCHW tensors in network range [-1, 1]; pixel and feature
//! terms are evaluated on the [0, 1] rescaling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::networks::FeatureExtractor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    WithoutContent,
    WithoutTexture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub charbonnier_eps: f64,
    /// L2 penalty on generator parameters; 0 disables it.
    pub weight_decay: f64,
    pub ablation: Ablation,
    pub content_tap: String,
    pub texture_tap: String,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.35,
            beta: 0.20,
            gamma: 0.15,
            charbonnier_eps: 1e-3,
            weight_decay: 0.0,
            ablation: Ablation::Full,
            content_tap: "relu5_4".into(),
            texture_tap: "relu2_2".into(),
        }
    }
}

/// Coefficients actually applied to each term after the ablation is taken into account.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub adv: f64,
    pub pixel: f64,
    pub content: f64,
    pub texture: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if !(self.charbonnier_eps > 0.0 && self.charbonnier_eps.is_finite()) {
            return Err(Error::config("charbonnier_eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Coefficients {
        let beta = if self.ablation == Ablation::WithoutTexture { 0.0 } else { self.beta };
        let gamma = if self.ablation == Ablation::WithoutContent { 0.0 } else { self.gamma };
        Coefficients {
            adv: self.alpha,
            pixel: (1.0 - self.alpha) * (1.0 - beta) * (1.0 - gamma),
            content: gamma,
            texture: beta,
        }
    }

    pub fn pixel_coefficient(&self) -> f64 {
        self.coefficients().pixel
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub pixel: f64,
    pub content: f64,
    pub texture: f64,
    pub total: f64,
}

/// Weighted combination of already evaluated components.
pub fn hybrid_total(components: &LossBreakdown, weights: &LossWeights) -> LossBreakdown {
    let k = weights.coefficients();
    LossBreakdown {
        total: k.adv * components.adv
            + k.pixel * components.pixel
            + k.content * components.content
            + k.texture * components.texture,
        ..*components
    }
}

fn to_unit(tape: &mut Tape, x: Var) -> Var {
    let h = tape.scale(x, 0.5);
    tape.add_scalar(h, 0.5)
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::input(format!(
            "image shapes differ: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Mean of `√(d² + ε²)` over every sample.
pub fn charbonnier(tape: &mut Tape, sr: Var, hr: Var, eps: f64) -> Result<Var> {
    check_pair(tape, sr, hr)?;
    let d = tape.sub(sr, hr)?;
    let d2 = tape.square(d);
    let d2 = tape.add_scalar(d2, eps * eps);
    let r = tape.sqrt(d2);
    Ok(tape.mean(r))
}

/// Squared feature distance at `tap`, summed over channels and positions, divided by the
/// tap's spatial size and averaged over the batch.
pub fn content(tape: &mut Tape, extractor: &FeatureExtractor, sr: Var, hr: Var, tap: &str) -> Result<Var> {
    check_pair(tape, sr, hr)?;
    let fs = extractor.forward(tape, sr, &[tap])?[tap];
    let fh = extractor.forward(tape, hr, &[tap])?[tap];
    let (n, _, h, w) = tape.value(fs).dims4();
    let d = tape.sub(fs, fh)?;
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, 1.0 / (n * h * w) as f64))
}

/// `[n, c, c]` Gram matrices of `[n, c, h, w]` features.
pub fn gram(tape: &mut Tape, features: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(features).dims4();
    let f = tape.reshape(features, &[n, c, h * w])?;
    tape.bmm(f, f, false, true)
}

/// Frobenius distance between Gram matrices at `tap`, scaled by `1/c²`, batch-averaged.
pub fn texture(tape: &mut Tape, extractor: &FeatureExtractor, sr: Var, hr: Var, tap: &str) -> Result<Var> {
    check_pair(tape, sr, hr)?;
    let fs = extractor.forward(tape, sr, &[tap])?[tap];
    let fh = extractor.forward(tape, hr, &[tap])?[tap];
    let (n, c, _, _) = tape.value(fs).dims4();
    let gs = gram(tape, fs)?;
    let gh = gram(tape, fh)?;
    let d = tape.sub(gs, gh)?;
    let d2 = tape.square(d);
    let d2 = tape.reshape(d2, &[n, c * c, 1, 1])?;
    let per_sample = tape.mean_per_sample(d2);
    let per_sample = tape.scale(per_sample, (c * c) as f64);
    let norm = tape.sqrt(per_sample);
    let m = tape.mean(norm);
    Ok(tape.scale(m, 1.0 / (c * c) as f64))
}

/// Least-squares generator term `(D(SR) − 1)²`, batch-averaged over `[n]` scores.
pub fn adversarial_generator(tape: &mut Tape, fake_score: Var) -> Var {
    let d = tape.add_scalar(fake_score, -1.0);
    let d2 = tape.square(d);
    tape.mean(d2)
}

/// Least-squares discriminator term `D(SR)² + (D(HR) − 1)²`, batch-averaged.
pub fn adversarial_discriminator(tape: &mut Tape, fake_score: Var, real_score: Var) -> Result<Var> {
    let f2 = tape.square(fake_score);
    let r = tape.add_scalar(real_score, -1.0);
    let r2 = tape.square(r);
    let s = tape.add(f2, r2)?;
    Ok(tape.mean(s))
}

/// Scalar `(g_loss, d_loss)` for given mean patch scores.
pub fn adversarial_losses(d_real: f64, d_fake: f64) -> (f64, f64) {
    ((d_fake - 1.0).powi(2), d_fake * d_fake + (d_real - 1.0).powi(2))
}

/// The generator-side objective with its per-term breakdown.
pub struct HybridTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the weighted objective for network-range `sr` and `hr`. Terms with a zero
/// coefficient are not evaluated and report exactly 0. `fake_score` is the discriminator's
/// `[n]` score for `sr`, required when `alpha > 0`.
pub fn hybrid(
    tape: &mut Tape,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    sr: Var,
    hr: Var,
    fake_score: Option<Var>,
) -> Result<HybridTerms> {
    weights.validate()?;
    check_pair(tape, sr, hr)?;
    let k = weights.coefficients();
    let sr01 = to_unit(tape, sr);
    let hr01 = to_unit(tape, hr);
    let mut breakdown = LossBreakdown::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();
    if k.adv != 0.0 {
        let s = fake_score.ok_or_else(|| Error::config("adversarial weight is set but no discriminator score was given"))?;
        let v = adversarial_generator(tape, s);
        breakdown.adv = tape.value(v).item();
        parts.push((v, k.adv));
    }
    if k.pixel != 0.0 {
        let v = charbonnier(tape, sr01, hr01, weights.charbonnier_eps)?;
        breakdown.pixel = tape.value(v).item();
        parts.push((v, k.pixel));
    }
    if k.content != 0.0 {
        let v = content(tape, extractor, sr01, hr01, &weights.content_tap)?;
        breakdown.content = tape.value(v).item();
        parts.push((v, k.content));
    }
    if k.texture != 0.0 {
        let v = texture(tape, extractor, sr01, hr01, &weights.texture_tap)?;
        breakdown.texture = tape.value(v).item();
        parts.push((v, k.texture));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (v, c) in parts {
        let w = tape.scale(v, c);
        total = tape.add(total, w)?;
    }
    breakdown.total = tape.value(total).item();
    Ok(HybridTerms { total, breakdown })
}

fn image_pair(tape: &mut Tape, sr: &ImageTensor, hr: &ImageTensor) -> Result<(Var, Var)> {
    if sr.dims() != hr.dims() {
        return Err(Error::input(format!("image dims differ: {:?} vs {:?}", sr.dims(), hr.dims())));
    }
    let a = tape.constant(sr.to_nchw());
    let b = tape.constant(hr.to_nchw());
    Ok((a, b))
}

/// Charbonnier loss of two images taken as they are.
pub fn charbonnier_loss(sr: &ImageTensor, hr: &ImageTensor, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = image_pair(&mut tape, sr, hr)?;
    let v = charbonnier(&mut tape, a, b, eps)?;
    Ok(tape.value(v).item())
}

/// Content loss of two images in the extractor's input range.
pub fn content_loss(sr: &ImageTensor, hr: &ImageTensor, extractor: &FeatureExtractor, tap: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = image_pair(&mut tape, sr, hr)?;
    let v = content(&mut tape, extractor, a, b, tap)?;
    Ok(tape.value(v).item())
}

/// Texture loss of two images in the extractor's input range.
pub fn texture_loss(sr: &ImageTensor, hr: &ImageTensor, extractor: &FeatureExtractor, tap: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = image_pair(&mut tape, sr, hr)?;
    let v = texture(&mut tape, extractor, a, b, tap)?;
    Ok(tape.value(v).item())
}

/// Gram matrix of a `c × h × w` feature tensor, row-major `c × c`.
pub fn gram_matrix(features: &Tensor) -> Result<Vec<f64>> {
    if features.rank() != 3 {
        return Err(Error::input("gram expects a c×h×w tensor"));
    }
    let s = features.shape();
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().reshaped(&[1, s[0], s[1], s[2]])?);
    let g = gram(&mut tape, f)?;
    Ok(tape.value(g).data().to_vec())
}
