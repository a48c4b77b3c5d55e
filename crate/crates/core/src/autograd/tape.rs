use std::collections::BTreeMap;

use super::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvGeometry,
};
use crate::error::{Error, Result};
use crate::tensor::{gemm, pairwise_sum, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

enum Op {
    Constant,
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Mean over everything but the leading axis: `[n, ...] -> [n]`.
    MeanPerSample(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// Pre-scaled keep mask.
    Dropout(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Per-channel affine with frozen statistics (batch norm in eval mode).
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Tensor,
    },
    ConcatChannels(Vec<Var>),
    MaxPool2(Var, Vec<usize>),
    AvgPool(Var, usize),
    UpsampleNearest(Var, usize),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Reshape(Var),
    /// Batched matrix product of rank-3 tensors with optional transposes.
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxLastAxis(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf or parameter variable; `None` if it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// An unnamed differentiable input (e.g. an image whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Param(name.to_string()), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    /// Elementwise square root of non-negative input; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sqrt(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(t, Op::MeanAll(a), rg)
    }

    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.shape()[0];
        let per = x.len() / n;
        let data = x
            .data()
            .chunks_exact(per)
            .map(|c| pairwise_sum(c) / per as f64)
            .collect();
        let t = Tensor::new(&[n], data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::MeanPerSample(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Inverted dropout with an externally drawn keep mask (`true` = keep).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::input("dropout mask length mismatch"));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout(a, mask), rg))
    }

    fn check_conv_inputs(&self, x: Var, w: Var, b: Option<Var>, in_axis: usize, out_axis: usize, what: &str) -> Result<()> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!("{what}: expected rank-4 input and weight, got {xs:?} and {ws:?}")));
        }
        if ws[in_axis] != xs[1] || ws[2] != ws[3] {
            return Err(Error::config(format!("{what}: weight {ws:?} incompatible with input {xs:?}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[out_axis]] {
                return Err(Error::config(format!("{what}: bias shape {:?}", self.value(b).shape())));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv_inputs(x, w, b, 1, 0, "conv2d")?;
        let k = self.value(w).shape()[2];
        let geom = ConvGeometry::new(k, stride, pad);
        let (_, _, h, wd) = self.value(x).dims4();
        if geom.conv_out(h).is_none() || geom.conv_out(wd).is_none() {
            return Err(Error::config(format!(
                "conv2d: {h}x{wd} input too small for kernel {k} with padding {pad}"
            )));
        }
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv_inputs(x, w, b, 0, 1, "conv_transpose2d")?;
        let k = self.value(w).shape()[2];
        let geom = ConvGeometry::new(k, stride, pad);
        let (_, _, h, wd) = self.value(x).dims4();
        if geom.transpose_out(h).unwrap_or(0) == 0 || geom.transpose_out(wd).unwrap_or(0) == 0 {
            return Err(Error::config(format!("conv_transpose2d: {h}x{wd} input yields empty output")));
        }
        let out = conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Batch normalization with batch statistics. Returns the output together with the
    /// per-channel batch mean and unbiased variance for running-statistic updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).dims4();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::config(format!("batch norm parameters must have shape [{c}]")));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for sidx in 0..n {
                s += pairwise_sum(&xv[(sidx * c + ch) * plane..(sidx * c + ch + 1) * plane]);
            }
            mean[ch] = s / m;
            let mut q = 0.0;
            for sidx in 0..n {
                for v in &xv[(sidx * c + ch) * plane..(sidx * c + ch + 1) * plane] {
                    q += (v - mean[ch]).powi(2);
                }
            }
            var[ch] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for sidx in 0..n {
            for ch in 0..c {
                let base = (sidx * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let unbiased: Vec<f64> = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&shape, xhat)?,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if self.value(gamma).shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::config(format!("batch norm statistics must have {c} channels")));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for sidx in 0..n {
            for ch in 0..c {
                let base = (sidx * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                xhat: Tensor::new(&shape, xhat)?,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::config(format!(
                    "concat: {:?} does not match {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[n, total_c, h, w], out)?,
            Op::ConcatChannels(parts.to_vec()),
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::config(format!("max pool on {h}x{w} input")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = nc * h * w + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xv[i] > best {
                                best = xv[i];
                                bi = i;
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool2(x, arg), rg))
    }

    /// Non-overlapping `f x f` average pooling; spatial dims must divide by `f`.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!("avg pool {f} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / f, w / f);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (f * f) as f64;
        for nc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[nc * oh * ow + (y / f) * ow + xx / f] += xv[nc * h * w + y * w + xx] * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::AvgPool(x, f), rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * f, w * f);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[nc * oh * ow + y * ow + xx] = xv[nc * h * w + (y / f) * w + xx / f];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::UpsampleNearest(x, f), rg))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if top + height > h || left + width > w {
            return Err(Error::input(format!("crop {height}x{width}+{top}+{left} exceeds {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for nc in 0..n * c {
            for y in top..top + height {
                let row = nc * h * w + y * w;
                out.extend_from_slice(&xv[row + left..row + left + width]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, height, width], out)?, Op::Crop { x, top, left }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `op(a) @ op(b)` per batch entry for `[n, ., .]` tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::config(format!("bmm: incompatible {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::config(format!("bmm: inner dims {k} vs {k2}")));
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.value(a).data()[s * m * k..(s + 1) * m * k],
                ta,
                &self.value(b).data()[s * k * n..(s + 1) * k * n],
                tb,
                &mut out[s * m * n..(s + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, ta, tb }, rg))
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::SoftmaxLastAxis(x), rg)
    }

    /// Reverse pass from a scalar. Parameter gradients are checked for finiteness.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::input(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param(_));
            let g = if keep {
                match grads[idx].as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(idx, g, &mut grads, &mut params)?;
        }
        for (name, g) in &params {
            if !g.all_finite() {
                return Err(Error::numerical(name.clone(), "non-finite gradient"));
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(g),
        }
    }

    fn elementwise(&self, g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let data = g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
        Tensor::new(g.shape(), data).unwrap()
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Param(name) => {
                match params.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = self.elementwise(&g, |i, gv| gv * bv[i]);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.elementwise(&g, |i, gv| gv * av[i]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Square(a) => {
                let av = self.value(*a).data();
                let ga = self.elementwise(&g, |i, gv| 2.0 * av[i] * gv);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                // Zero subgradient at the kink keeps norms of vanishing differences finite.
                let ga = self.elementwise(&g, |i, gv| if out[i] > 0.0 { gv * 0.5 / out[i] } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, v));
            }
            Op::MeanPerSample(a) => {
                let t = self.value(*a);
                let per = t.len() / t.shape()[0];
                let data = (0..t.len()).map(|i| g.data()[i / per] / per as f64).collect();
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(&shape, data)?);
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                let ga = self.elementwise(&g, |i, gv| if av[i] > 0.0 { gv } else { slope * gv });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                let ga = self.elementwise(&g, |i, gv| gv * (1.0 - out[i] * out[i]));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let ga = self.elementwise(&g, |i, gv| gv * out[i] * (1.0 - out[i]));
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => {
                let ga = self.elementwise(&g, |i, gv| gv * mask[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gd = g.data();
                let xh = xhat.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xh[i];
                        }
                    }
                }
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy.clone())?);
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat.clone())?);
                if self.requires_grad(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / m;
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = k * (m * gd[i] - sum_dy[ch] - xh[i] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xhat.shape(), dx)?);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let plane = h * w;
                let gd = g.data();
                let xh = xhat.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xh[i];
                        }
                    }
                }
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy)?);
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat)?);
                if self.requires_grad(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = k * gd[i];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xhat.shape(), dx)?);
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, pc, h, w], d)?);
                    }
                    offset += pc;
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (o, &i) in arg.iter().enumerate() {
                    d.data_mut()[i] += g.data()[o];
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool(x, f) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / f, w / f);
                let norm = 1.0 / (f * f) as f64;
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[nc * h * w + y * w + xx] = g.data()[nc * oh * ow + (y / f) * ow + xx / f] * norm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::UpsampleNearest(x, f) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h * f, w * f);
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[nc * h * w + (y / f) * w + xx / f] += g.data()[nc * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::Crop { x, top, left } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ch, cw) = g.dims4();
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..ch {
                        let dst = nc * h * w + (y + top) * w + left;
                        let src = nc * ch * cw + y * cw;
                        d[dst..dst + cw].copy_from_slice(&g.data()[src..src + cw]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(&shape)?);
            }
            Op::Bmm { a, b, ta, tb } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let batch = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = g.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gd = g.data();
                if self.requires_grad(*a) {
                    // dA_op = G @ op(B)^T; stored layout follows `ta`.
                    let mut da = vec![0.0; av.len()];
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        if *ta {
                            // A stored k x m: dA = op(B) @ G^T
                            gemm(k, n, m, bs, *tb, gs, true, das, 0.0);
                        } else {
                            gemm(m, n, k, gs, false, bs, !*tb, das, 0.0);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(&sa, da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if *tb {
                            // B stored n x k: dB = G^T @ op(A)
                            gemm(n, m, k, gs, true, as_, *ta, dbs, 0.0);
                        } else {
                            gemm(k, m, n, as_, !*ta, gs, false, dbs, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&sb, db)?);
                }
            }
            Op::SoftmaxLastAxis(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(g.data().chunks_exact(k)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        drow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), d)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Central finite-difference check of d(build)/d(input) for every element.
    fn check<F>(input: Tensor, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y).unwrap();
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let h = 1e-5;
        for i in 0..input.len() {
            let mut p = input.clone();
            p.data_mut()[i] += h;
            let mut m = input.clone();
            m.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut tp = Tape::new();
                let v = tp.leaf(t);
                let out = build(&mut tp, v);
                tp.value(out).item()
            };
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn conv_chain_gradient() {
        let w = rand_tensor(&[3, 2, 4, 4], 1);
        let b = rand_tensor(&[3], 2);
        let weights = rand_tensor(&[1, 3, 3, 3], 3);
        check(rand_tensor(&[1, 2, 6, 6], 4), move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(x, wv, Some(bv), 2, 1).unwrap();
            let y = t.tanh(y);
            let k = t.constant(weights.clone());
            let y = t.mul(y, k).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn conv_weight_gradient() {
        let x = rand_tensor(&[2, 2, 5, 5], 5);
        check(rand_tensor(&[3, 2, 3, 3], 6), move |t, w| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, w, None, 1, 1).unwrap();
            let y = t.square(y);
            t.mean(y)
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let w = rand_tensor(&[2, 3, 4, 4], 7);
        let probe = rand_tensor(&[1, 3, 6, 8], 8);
        check(rand_tensor(&[1, 2, 3, 4], 9), move |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv_transpose2d(x, wv, None, 2, 1).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(y, p).unwrap();
            t.sum(y)
        });
        let x = rand_tensor(&[1, 2, 3, 4], 10);
        let probe = rand_tensor(&[1, 3, 6, 8], 11);
        check(rand_tensor(&[2, 3, 4, 4], 12), move |t, w| {
            let xv = t.constant(x.clone());
            let y = t.conv_transpose2d(xv, w, None, 2, 1).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(y, p).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn batch_norm_gradients() {
        let probe = rand_tensor(&[2, 3, 2, 3], 13);
        let gamma = rand_tensor(&[3], 14);
        check(rand_tensor(&[2, 3, 2, 3], 15), move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(Tensor::zeros(&[3]));
            let (y, _, _) = t.batch_norm_train(x, g, b).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(y, p).unwrap();
            t.sum(y)
        });
        let x = rand_tensor(&[2, 3, 2, 3], 16);
        let probe = rand_tensor(&[2, 3, 2, 3], 17);
        check(rand_tensor(&[3], 18), move |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::full(&[3], 0.1));
            let y = t.batch_norm_eval(xv, g, b, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0]).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(y, p).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn bmm_softmax_gradients() {
        let other = rand_tensor(&[2, 4, 3], 19);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let o = other.clone();
            let a_shape = if ta { [2, 5, 3] } else { [2, 3, 5] };
            check(rand_tensor(&a_shape, 20), move |t, a| {
                // op(a): 3x5; op(b) must be 5x?: build b from `o` reshaped to match.
                let bshape = if tb { [2, 2, 5] } else { [2, 5, 2] };
                let bval = Tensor::new(&bshape, o.data()[..20].to_vec()).unwrap();
                let b = t.constant(bval);
                let y = t.bmm(a, b, ta, tb).unwrap();
                let y = t.softmax_last_axis(y);
                let y = t.square(y);
                t.sum(y)
            });
        }
        let a = rand_tensor(&[2, 3, 5], 21);
        check(rand_tensor(&[2, 4, 5], 22), move |t, b| {
            let av = t.constant(a.clone());
            let y = t.bmm(av, b, false, true).unwrap();
            let y = t.sigmoid(y);
            t.sum(y)
        });
    }

    #[test]
    fn pooling_crop_concat_gradients() {
        let probe = rand_tensor(&[1, 4, 2, 2], 23);
        check(rand_tensor(&[1, 2, 4, 4], 24), move |t, x| {
            let a = t.avg_pool(x, 2).unwrap();
            let m = t.max_pool2(x).unwrap();
            let c = t.concat_channels(&[a, m]).unwrap();
            let p = t.constant(probe.clone());
            let y = t.mul(c, p).unwrap();
            let u = t.upsample_nearest(y, 2).unwrap();
            let cr = t.crop(u, 1, 0, 3, 4).unwrap();
            let cr = t.leaky_relu(cr, 0.2);
            t.sum(cr)
        });
    }

    #[test]
    fn scalar_ops_gradients() {
        check(rand_tensor(&[2, 3], 25).map(|v| v.abs() + 0.5), |t, x| {
            let s = t.sqrt(x);
            let q = t.add_scalar(s, 1.0);
            let q = t.scale(q, 3.0);
            let r = t.sub(q, x).unwrap();
            let r = t.reshape(r, &[2, 3, 1, 1]).unwrap();
            let m = t.mean_per_sample(r);
            let m = t.square(m);
            t.sum(m)
        });
    }

    #[test]
    fn dropout_masks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], 1.0));
        let d = tape.dropout(x, &[true, false, true, false], 0.5).unwrap();
        assert_eq!(tape.value(d).data(), &[2.0, 0.0, 2.0, 0.0]);
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn params_are_named_and_nan_is_reported() {
        let mut tape = Tape::new();
        let w = tape.param("layer.weight", Tensor::full(&[2], -1.0));
        let s = tape.scale(w, f64::INFINITY);
        let s = tape.sum(s);
        let err = tape.backward(s).unwrap_err();
        match err {
            Error::Numerical { layer, .. } => assert_eq!(layer, "layer.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let p = tape.param("p", Tensor::full(&[3], 1.0));
        let y = tape.mul(c, p).unwrap();
        let y = tape.sum(y);
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.param("p").unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
