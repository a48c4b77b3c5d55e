use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::networks::NetworkWeights;
use crate::tensor::Tensor;

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. `decay` adds `2·decay·w` to each
    /// gradient (an L2 penalty `decay·Σw²`).
    pub fn update(&mut self, weights: &mut NetworkWeights, grads: &BTreeMap<String, Tensor>, lr: f64, decay: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let w = weights
                .param_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter '{name}'")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let wi = w.data()[i];
                let gi = g.data()[i] + 2.0 * decay * wi;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                w.data_mut()[i] = wi - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
            if !w.all_finite() {
                return Err(Error::numerical(name.clone(), "non-finite weights after update"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = NetworkWeights::new();
        w.set_param("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::new(&[2], vec![0.3, -5.0]).unwrap());
        let mut opt = Adam::new(0.5, 0.999, 1e-8);
        opt.update(&mut w, &g, 0.1, 0.0).unwrap();
        let p = w.param("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut w = NetworkWeights::new();
        w.set_param("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let x = w.param("x").unwrap().item();
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), Tensor::scalar(2.0 * (x - 1.0)));
            opt.update(&mut w, &g, 0.01, 0.0).unwrap();
        }
        assert!((w.param("x").unwrap().item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_rate_is_fixed_point() {
        let mut w = NetworkWeights::new();
        w.set_param("p", Tensor::full(&[3], 0.5));
        let before = w.clone();
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::full(&[3], 1.0));
        Adam::new(0.5, 0.999, 1e-8).update(&mut w, &g, 0.0, 0.0).unwrap();
        assert_eq!(w, before);
    }
}
