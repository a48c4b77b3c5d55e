use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a named tensor is, which fixes how it is initialised and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }
}

/// Appends the specs for a conv (or transposed conv) weight, optional bias and optional batch norm.
pub(crate) fn conv_specs(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    weight_shape: [usize; 4],
    out_channels: usize,
    bias: bool,
    batch_norm: bool,
) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &weight_shape, ParamKind::ConvWeight));
    if bias {
        out.push(ParamSpec::new(format!("{prefix}.bias"), &[out_channels], ParamKind::Bias));
    }
    if batch_norm {
        bn_specs(out, &format!("{prefix}.bn"), out_channels);
    }
}

pub(crate) fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), &[c], ParamKind::BnScale));
    out.push(ParamSpec::new(format!("{prefix}.beta"), &[c], ParamKind::BnShift));
    out.push(ParamSpec::new(format!("{prefix}.running_mean"), &[c], ParamKind::RunningMean));
    out.push(ParamSpec::new(format!("{prefix}.running_var"), &[c], ParamKind::RunningVar));
}

/// Trainable parameters and non-trainable buffers (batch-norm running statistics) by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkWeights {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

/// Batch statistics observed by one batch-norm layer during a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NetworkWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws weights for `specs`: conv weights ~ N(0, std), batch-norm scale ~ N(1, std),
    /// biases and shifts zero, running mean 0 and variance 1.
    pub fn initialise(specs: &[ParamSpec], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut w = NetworkWeights::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.kind {
                ParamKind::ConvWeight => (0..n).map(|_| normal.sample(rng)).collect(),
                ParamKind::BnScale => (0..n).map(|_| 1.0 + normal.sample(rng)).collect(),
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::RunningVar => vec![1.0; n],
            };
            let t = Tensor::new(&s.shape, data).expect("spec shape");
            if s.kind.is_buffer() {
                w.buffers.insert(s.name.clone(), t);
            } else {
                w.params.insert(s.name.clone(), t);
            }
        }
        w
    }

    /// Builds weights from loose tensors, checking that names and shapes match `specs` exactly.
    pub fn from_tensors(specs: &[ParamSpec], mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut w = NetworkWeights::new();
        for s in specs {
            let t = tensors
                .remove(&s.name)
                .ok_or_else(|| Error::Format(format!("missing tensor '{}'", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Format(format!("tensor '{}' contains non-finite values", s.name)));
            }
            if s.kind.is_buffer() {
                w.buffers.insert(s.name.clone(), t);
            } else {
                w.params.insert(s.name.clone(), t);
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(w)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter named '{name}'")))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::config(format!("no buffer named '{name}'")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    /// Parameters followed by buffers, each in name order.
    pub fn all_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.all_tensors() {
            if !t.all_finite() {
                return Err(Error::numerical(name.clone(), "non-finite weights"));
            }
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{suffix}", u.layer);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::config(format!("no buffer named '{name}'")))?;
                for (r, s) in buf.data_mut().iter_mut().zip(stat.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * s;
                }
            }
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics and dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Places weights on a tape on first use, as parameters or as frozen constants.
pub(crate) struct Binder<'w> {
    weights: &'w NetworkWeights,
    trainable: bool,
    bound: HashMap<String, Var>,
}

impl<'w> Binder<'w> {
    pub fn new(weights: &'w NetworkWeights, trainable: bool) -> Self {
        Binder {
            weights,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.weights.param(name)?.clone();
        let v = if self.trainable {
            tape.param(name, t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, tape: &mut Tape, x: Var, prefix: &str, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.get(tape, &format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.get(tape, &format!("{prefix}.bias"))?)
        } else {
            None
        };
        tape.conv2d(x, w, b, stride, pad)
            .map_err(|e| Error::config(format!("{prefix}: {e}")))
    }

    pub fn conv_transpose(&mut self, tape: &mut Tape, x: Var, prefix: &str, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.get(tape, &format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.get(tape, &format!("{prefix}.bias"))?)
        } else {
            None
        };
        tape.conv_transpose2d(x, w, b, stride, pad)
            .map_err(|e| Error::config(format!("{prefix}: {e}")))
    }

    pub fn batch_norm(&mut self, tape: &mut Tape, x: Var, prefix: &str, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let gamma = self.get(tape, &format!("{prefix}.gamma"))?;
        let beta = self.get(tape, &format!("{prefix}.beta"))?;
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta)?;
                updates.push(BnUpdate {
                    layer: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.weights.buffer(&format!("{prefix}.running_mean"))?;
                let rv = self.weights.buffer(&format!("{prefix}.running_var"))?;
                tape.batch_norm_eval(x, gamma, beta, rm.data(), rv.data())
            }
        }
    }
}

/// Draws an inverted-dropout keep mask.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn initialise_follows_kinds() {
        let mut specs = Vec::new();
        conv_specs(&mut specs, "c", [4, 2, 3, 3], 4, true, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = NetworkWeights::initialise(&specs, 0.02, &mut rng);
        assert_eq!(w.param("c.bias").unwrap().data(), &[0.0; 4]);
        assert_eq!(w.buffer("c.bn.running_var").unwrap().data(), &[1.0; 4]);
        let g = w.param("c.bn.gamma").unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 0.2));
        assert_eq!(w.num_parameters(), 72 + 4 + 8);
    }

    #[test]
    fn from_tensors_rejects_bad_shapes() {
        let mut specs = Vec::new();
        conv_specs(&mut specs, "c", [1, 1, 1, 1], 1, true, false);
        let mut m = BTreeMap::new();
        m.insert("c.weight".to_string(), Tensor::zeros(&[1, 1, 1, 1]));
        m.insert("c.bias".to_string(), Tensor::zeros(&[2]));
        assert!(matches!(NetworkWeights::from_tensors(&specs, m), Err(Error::Format(_))));
    }

    #[test]
    fn bn_momentum_update() {
        let mut specs = Vec::new();
        bn_specs(&mut specs, "bn", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = NetworkWeights::initialise(&specs, 0.02, &mut rng);
        w.apply_bn_updates(
            &[BnUpdate {
                layer: "bn".into(),
                mean: vec![1.0, 2.0],
                var: vec![3.0, 1.0],
            }],
            0.1,
        )
        .unwrap();
        let m = w.buffer("bn.running_mean").unwrap().data();
        assert!((m[0] - 0.1).abs() < 1e-15 && (m[1] - 0.2).abs() < 1e-15);
        let v = w.buffer("bn.running_var").unwrap().data();
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }
}
