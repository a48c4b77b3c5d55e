//! im2col-based 2D convolution and transposed convolution kernels (NCHW).

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad,
        }
    }

    /// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// `(n - 1) s - 2p + k`.
    pub fn transpose_out(&self, n: usize) -> Option<usize> {
        ((n.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Unfolds one `c x h x w` sample into `[c*k*k, oh*ow]` columns; zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize, x: &mut [f64]) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

/// `x: [n, c, h, w]`, `weight: [o, c, k, k]` -> `[n, o, oh, ow]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let o = weight.shape()[0];
    let oh = g.conv_out(h).expect("caller validated conv geometry");
    let ow = g.conv_out(w).expect("caller validated conv geometry");
    let ckk = c * g.kernel * g.kernel;
    let plane = oh * ow;
    let mut out = vec![0.0; n * o * plane];
    let mut cols = if is_pointwise(g) { Vec::new() } else { vec![0.0; ckk * plane] };
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let colref: &[f64] = if is_pointwise(g) {
            xs
        } else {
            im2col(xs, c, h, w, g, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out[s * o * plane..(s + 1) * o * plane];
        gemm(o, ckk, plane, weight.data(), false, colref, false, dst, 0.0);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).expect("conv output sized from geometry")
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, c, h, w) = x.dims4();
    let (_, o, oh, ow) = dy.dims4();
    let ckk = c * g.kernel * g.kernel;
    let plane = oh * ow;
    let mut dx = need_dx.then(|| vec![0.0; n * c * h * w]);
    let mut dw = need_dw.then(|| vec![0.0; weight.len()]);
    let mut db = vec![0.0; o];
    let mut cols = vec![0.0; ckk * plane];
    for s in 0..n {
        let dys = &dy.data()[s * o * plane..(s + 1) * o * plane];
        for (oc, chunk) in dys.chunks_exact(plane).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
            let colref: &[f64] = if is_pointwise(g) {
                xs
            } else {
                im2col(xs, c, h, w, g, oh, ow, &mut cols);
                &cols
            };
            gemm(o, plane, ckk, dys, false, colref, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            if is_pointwise(g) {
                gemm(ckk, o, plane, weight.data(), true, dys, false, dxs, 1.0);
            } else {
                gemm(ckk, o, plane, weight.data(), true, dys, false, &mut cols, 0.0);
                col2im(&cols, c, h, w, g, oh, ow, dxs);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::new(weight.shape(), d).unwrap()),
        Tensor::new(&[o], db).unwrap(),
    )
}

/// `x: [n, ci, h, w]`, `weight: [ci, co, k, k]` -> `[n, co, (h-1)s-2p+k, ...]`.
pub fn conv_transpose2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let co = weight.shape()[1];
    let oh = g.transpose_out(h).expect("caller validated geometry");
    let ow = g.transpose_out(w).expect("caller validated geometry");
    let ckk = co * g.kernel * g.kernel;
    let plane = h * w;
    let mut out = vec![0.0; n * co * oh * ow];
    let mut cols = vec![0.0; ckk * plane];
    for s in 0..n {
        let xs = &x.data()[s * ci * plane..(s + 1) * ci * plane];
        gemm(ckk, ci, plane, weight.data(), true, xs, false, &mut cols, 0.0);
        let dst = &mut out[s * co * oh * ow..(s + 1) * co * oh * ow];
        col2im(&cols, co, oh, ow, g, h, w, dst);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(oh * ow).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).expect("sized from geometry")
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, ci, h, w) = x.dims4();
    let (_, co, oh, ow) = dy.dims4();
    let ckk = co * g.kernel * g.kernel;
    let plane = h * w;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; weight.len()]);
    let mut db = vec![0.0; co];
    let mut cols = vec![0.0; ckk * plane];
    for s in 0..n {
        let dys = &dy.data()[s * co * oh * ow..(s + 1) * co * oh * ow];
        for (oc, chunk) in dys.chunks_exact(oh * ow).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        im2col(dys, co, oh, ow, g, h, w, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * ci * plane..(s + 1) * ci * plane];
            gemm(ci, ckk, plane, weight.data(), false, &cols, false, dxs, 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * ci * plane..(s + 1) * ci * plane];
            gemm(ci, plane, ckk, xs, false, &cols, true, dw, 1.0);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::new(weight.shape(), d).unwrap()),
        Tensor::new(&[co], db).unwrap(),
    )
}
