//! Spatial attention block: a non-local layer over all spatial positions of a feature map.
//!
//! With `θ`, `φ`, `g` the 1×1 projections of the input flattened to `C × N`:
//!
//! ```text
//! ψ[p,q]   = relu(Σ_c θ[c,p] φ[c,q])          N × N affinity
//! A[c,p]   = Σ_q ψ[p,q] g[c,q]                affinity-weighted features
//! S[c,·]   = softmax_p(A[c,·])                one distribution over positions per channel
//! E[c,p]   = X[c,p] + N · S[c,p] · g[c,p]
//! ```
//!
//! The factor `N` keeps the attended term at the scale of `g` (a uniform `S` gives back `g`).

use super::weights::{conv_specs, Binder, NetworkWeights, ParamSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sab_specs(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    for proj in ["theta", "phi", "g"] {
        conv_specs(out, &format!("{prefix}.{proj}"), [channels, channels, 1, 1], channels, true, false);
    }
}

/// Smallest power-of-two pooling factor that brings `h × w` under `max_positions`.
pub fn sab_pool_factor(h: usize, w: usize, max_positions: Option<usize>) -> Result<usize> {
    let Some(max) = max_positions else {
        return Ok(1);
    };
    let mut f = 1;
    while (h / f) * (w / f) > max.max(1) {
        f *= 2;
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "attention block cannot pool a {h}x{w} map below {max} positions"
            )));
        }
    }
    Ok(f)
}

/// Largest map (in positions) the block accepts without pooling; the affinity matrix is N².
pub const SAB_MAX_DENSE_POSITIONS: usize = 16_384;

pub(crate) fn sab_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    max_positions: Option<usize>,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4();
    let f = sab_pool_factor(h, w, max_positions)?;
    let (ph, pw) = (h / f, w / f);
    let np = ph * pw;
    if np > SAB_MAX_DENSE_POSITIONS {
        return Err(Error::config(format!(
            "attention over {h}x{w} = {np} positions is too large; set sab_max_positions"
        )));
    }
    let src = if f > 1 { tape.avg_pool(x, f)? } else { x };
    let theta = binder.conv(tape, src, &format!("{prefix}.theta"), 1, 0, true)?;
    let phi = binder.conv(tape, src, &format!("{prefix}.phi"), 1, 0, true)?;
    let g = binder.conv(tape, src, &format!("{prefix}.g"), 1, 0, true)?;
    let theta = tape.reshape(theta, &[n, c, np])?;
    let phi = tape.reshape(phi, &[n, c, np])?;
    let g = tape.reshape(g, &[n, c, np])?;
    let affinity = tape.bmm(theta, phi, true, false)?;
    let psi = tape.relu(affinity);
    let a = tape.bmm(g, psi, false, true)?;
    let s = tape.softmax_last_axis(a);
    let attended = tape.mul(s, g)?;
    let attended = tape.scale(attended, np as f64);
    let attended = tape.reshape(attended, &[n, c, ph, pw])?;
    let attended = if f > 1 {
        tape.upsample_nearest(attended, f)?
    } else {
        attended
    };
    tape.add(x, attended)
}

/// Parameter specs of a standalone block named `prefix`.
pub fn sab_param_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    sab_specs(&mut out, prefix, channels);
    out
}

/// Applies the block named `prefix` in `weights` to an NCHW tensor, outside any network.
pub fn sab_apply(weights: &NetworkWeights, x: &Tensor, prefix: &str, max_positions: Option<usize>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(weights, false);
    let xv = tape.constant(x.clone());
    let y = sab_forward(&mut tape, &mut binder, xv, prefix, max_positions)?;
    Ok(tape.value(y).clone())
}
