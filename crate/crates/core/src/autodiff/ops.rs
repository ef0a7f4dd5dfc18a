use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::LinearOp;

use super::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the
/// binary cross-entropy so the loss stays finite.
const BCE_CLAMP: f64 = 1e-12;

/// Operation kinds understood by the tape.
#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Multiplication by a fixed scalar.
    Scale(f64),
    /// `inputs = [s, x]`: multiplication of `x` by a one-element node `s`.
    ScaleBy,
    /// Sparse matrix-vector product; the input must have the operator's input shape.
    MatVec(LinearOp),
    /// Zero-padded correlation along the last axis with a centered odd-length kernel.
    Correlate1d(Arc<[f64]>),
    /// `inputs = [x, kernel]` or `[x, kernel, bias]` with `x: [Cin, H, W]`,
    /// `kernel: [Cout, Cin, kh, kw]` (odd sizes), `bias: [Cout]`. Zero "same" padding.
    Correlate2d,
    /// Forward differences of `[H, W]` into `[2, H, W]` (rows, then columns),
    /// zero at the far boundary (Neumann).
    Gradient2d,
    /// Transpose of [`Op::Gradient2d`].
    Gradient2dAdjoint,
    /// Per-pixel `v / sqrt(|v|^2 + eps^2)` of a `[2, H, W]` field.
    NormalizeField(f64),
    /// `sum sqrt(|grad u|^2 + eps^2)` over the pixels of `[H, W]`.
    SmoothedTv(f64),
    SquaredNorm,
    /// Euclidean norm; its gradient at the origin is taken as zero.
    Norm,
    Sum,
    /// `[C, H, W] -> [C]` spatial mean.
    MeanPool,
    Relu,
    Sigmoid,
    /// Mean binary cross-entropy of probabilities against a fixed target in `[0, 1]`.
    BinaryCrossEntropy(f64),
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::ScaleBy => "scale_by",
            Op::MatVec(_) => "matvec",
            Op::Correlate1d(_) => "correlate1d",
            Op::Correlate2d => "correlate2d",
            Op::Gradient2d => "gradient2d",
            Op::Gradient2dAdjoint => "gradient2d_adjoint",
            Op::NormalizeField(_) => "normalize_field",
            Op::SmoothedTv(_) => "smoothed_tv",
            Op::SquaredNorm => "squared_norm",
            Op::Norm => "norm",
            Op::Sum => "sum",
            Op::MeanPool => "mean_pool",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::BinaryCrossEntropy(_) => "binary_cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Leaf | Op::Constant => 0..=0,
            Op::Add | Op::Sub | Op::Mul | Op::ScaleBy => 2..=2,
            Op::Correlate2d => 2..=3,
            _ => 1..=1,
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if !self.arity().contains(&inputs.len()) {
            return Err(Error::invalid(format!(
                "{} takes {:?} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        match self {
            Op::Leaf | Op::Constant => Err(Error::invalid("leaves are not recorded through forward")),
            Op::Add => inputs[0].add(inputs[1]),
            Op::Sub => inputs[0].sub(inputs[1]),
            Op::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
            Op::Scale(alpha) => Ok(inputs[0].scale(*alpha)),
            Op::ScaleBy => {
                let s = scalar_of(inputs[0], "scale_by factor")?;
                Ok(inputs[1].scale(s))
            }
            Op::MatVec(op) => {
                inputs[0].ensure_shape("matvec input", op.in_shape())?;
                Ok(Tensor::raw(op.out_shape().to_vec(), op.apply(inputs[0].data())))
            }
            Op::Correlate1d(kernel) => {
                let x = inputs[0];
                check_odd_kernel(kernel.len())?;
                let n = *x.shape().last().ok_or_else(|| Error::invalid("correlate1d on a scalar"))?;
                let mut out = vec![0.0; x.len()];
                correlate1d(x.data(), n, kernel, &mut out);
                Ok(Tensor::raw(x.shape().to_vec(), out))
            }
            Op::Correlate2d => {
                let dims = Conv2dDims::of(inputs)?;
                Ok(conv2d_forward(&dims, inputs))
            }
            Op::Gradient2d => {
                let (h, w) = inputs[0].dims2()?;
                let mut out = vec![0.0; 2 * h * w];
                grad2d(inputs[0].data(), h, w, &mut out);
                Ok(Tensor::raw(vec![2, h, w], out))
            }
            Op::Gradient2dAdjoint => {
                let (h, w) = field_dims(inputs[0])?;
                let mut out = vec![0.0; h * w];
                grad2d_adjoint(inputs[0].data(), h, w, &mut out);
                Ok(Tensor::raw(vec![h, w], out))
            }
            Op::NormalizeField(eps) => {
                field_dims(inputs[0])?;
                let mut out = vec![0.0; inputs[0].len()];
                field_normalize(inputs[0].data(), *eps, &mut out);
                Ok(Tensor::raw(inputs[0].shape().to_vec(), out))
            }
            Op::SmoothedTv(eps) => {
                let (h, w) = inputs[0].dims2()?;
                let mut g = vec![0.0; 2 * h * w];
                grad2d(inputs[0].data(), h, w, &mut g);
                let n = h * w;
                let total = (0..n)
                    .map(|i| (g[i] * g[i] + g[n + i] * g[n + i] + eps * eps).sqrt())
                    .sum();
                Ok(Tensor::scalar(total))
            }
            Op::SquaredNorm => Ok(Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum())),
            Op::Norm => Ok(Tensor::scalar(inputs[0].norm())),
            Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            Op::MeanPool => {
                let [c, h, w] = rank3(inputs[0], "mean_pool")?;
                let hw = (h * w) as f64;
                let out = inputs[0]
                    .data()
                    .chunks(h * w)
                    .map(|ch| ch.iter().sum::<f64>() / hw)
                    .collect();
                Ok(Tensor::raw(vec![c], out))
            }
            Op::Relu => Ok(inputs[0].map(|v| v.max(0.0))),
            Op::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Op::BinaryCrossEntropy(y) => {
                if !(0.0..=1.0).contains(y) {
                    return Err(Error::invalid(format!("cross-entropy target {y} outside [0, 1]")));
                }
                let p = inputs[0];
                let total: f64 = p
                    .data()
                    .iter()
                    .map(|&pi| {
                        let q = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                    })
                    .sum();
                Ok(Tensor::scalar(total / p.len() as f64))
            }
            Op::Reshape(shape) => inputs[0].clone().reshaped(shape),
        }
    }

    /// Vector-Jacobian products for each input flagged in `needs`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        match self {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                for (g, &need) in grads.iter_mut().zip(needs) {
                    if need {
                        *g = Some(upstream.to_vec());
                    }
                }
            }
            Op::Sub => {
                if needs[0] {
                    grads[0] = Some(upstream.to_vec());
                }
                if needs[1] {
                    grads[1] = Some(upstream.iter().map(|g| -g).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                if needs[0] {
                    grads[0] = Some(upstream.iter().zip(b).map(|(g, y)| g * y).collect());
                }
                if needs[1] {
                    grads[1] = Some(upstream.iter().zip(a).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(alpha) => {
                grads[0] = Some(upstream.iter().map(|g| alpha * g).collect());
            }
            Op::ScaleBy => {
                let s = inputs[0].data()[0];
                if needs[0] {
                    let d: f64 = upstream.iter().zip(inputs[1].data()).map(|(g, x)| g * x).sum();
                    let mut v = vec![0.0; inputs[0].len()];
                    v[0] = d;
                    grads[0] = Some(v);
                }
                if needs[1] {
                    grads[1] = Some(upstream.iter().map(|g| s * g).collect());
                }
            }
            Op::MatVec(op) => {
                grads[0] = Some(op.apply_adjoint(upstream));
            }
            Op::Correlate1d(kernel) => {
                let x = inputs[0];
                let n = *x.shape().last().unwrap();
                let mut g = vec![0.0; x.len()];
                correlate1d_adjoint(upstream, n, kernel, &mut g);
                grads[0] = Some(g);
            }
            Op::Correlate2d => {
                let dims = Conv2dDims::of(inputs).expect("validated in forward");
                conv2d_backward(&dims, inputs, upstream, needs, &mut grads);
            }
            Op::Gradient2d => {
                let (h, w) = inputs[0].dims2().unwrap();
                let mut g = vec![0.0; h * w];
                grad2d_adjoint(upstream, h, w, &mut g);
                grads[0] = Some(g);
            }
            Op::Gradient2dAdjoint => {
                let (h, w) = field_dims(inputs[0]).unwrap();
                let mut g = vec![0.0; 2 * h * w];
                grad2d(upstream, h, w, &mut g);
                grads[0] = Some(g);
            }
            Op::NormalizeField(eps) => {
                let v = inputs[0].data();
                let n = v.len() / 2;
                let mut g = vec![0.0; v.len()];
                for i in 0..n {
                    let (a, b) = (v[i], v[n + i]);
                    let s2 = a * a + b * b + eps * eps;
                    let s = s2.sqrt();
                    let s3 = s2 * s;
                    let (ga, gb) = (upstream[i], upstream[n + i]);
                    let proj = (a * ga + b * gb) / s3;
                    g[i] = ga / s - a * proj;
                    g[n + i] = gb / s - b * proj;
                }
                grads[0] = Some(g);
            }
            Op::SmoothedTv(eps) => {
                let (h, w) = inputs[0].dims2().unwrap();
                let mut field = vec![0.0; 2 * h * w];
                grad2d(inputs[0].data(), h, w, &mut field);
                let mut normalized = vec![0.0; 2 * h * w];
                field_normalize(&field, *eps, &mut normalized);
                let mut g = vec![0.0; h * w];
                grad2d_adjoint(&normalized, h, w, &mut g);
                let up = upstream[0];
                g.iter_mut().for_each(|v| *v *= up);
                grads[0] = Some(g);
            }
            Op::SquaredNorm => {
                let up = upstream[0];
                grads[0] = Some(inputs[0].data().iter().map(|x| 2.0 * x * up).collect());
            }
            Op::Norm => {
                let norm = output.data()[0];
                let up = upstream[0];
                grads[0] = Some(if norm > 0.0 {
                    inputs[0].data().iter().map(|x| x / norm * up).collect()
                } else {
                    vec![0.0; inputs[0].len()]
                });
            }
            Op::Sum => {
                grads[0] = Some(vec![upstream[0]; inputs[0].len()]);
            }
            Op::MeanPool => {
                let [_, h, w] = rank3(inputs[0], "mean_pool").unwrap();
                let hw = (h * w) as f64;
                let mut g = vec![0.0; inputs[0].len()];
                for (ch, &u) in g.chunks_mut(h * w).zip(upstream) {
                    ch.iter_mut().for_each(|v| *v = u / hw);
                }
                grads[0] = Some(g);
            }
            Op::Relu => {
                grads[0] = Some(
                    inputs[0]
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid => {
                grads[0] = Some(
                    output
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect(),
                );
            }
            Op::BinaryCrossEntropy(y) => {
                let p = inputs[0];
                let scale = upstream[0] / p.len() as f64;
                grads[0] = Some(
                    p.data()
                        .iter()
                        .map(|&pi| {
                            if pi < BCE_CLAMP || pi > 1.0 - BCE_CLAMP {
                                return 0.0;
                            }
                            scale * (-(y / pi) + (1.0 - y) / (1.0 - pi))
                        })
                        .collect(),
                );
            }
            Op::Reshape(_) => {
                grads[0] = Some(upstream.to_vec());
            }
        }
        grads
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar_of(t: &Tensor, what: &str) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::invalid(format!("{what} must hold one value, shape is {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

fn check_odd_kernel(len: usize) -> Result<()> {
    if len % 2 == 0 {
        return Err(Error::invalid(format!("kernel length {len} must be odd")));
    }
    Ok(())
}

fn field_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [2, h, w] => Ok((*h, *w)),
        other => Err(Error::shape("vector field", &[2, 0, 0], other)),
    }
}

fn rank3(t: &Tensor, context: &'static str) -> Result<[usize; 3]> {
    match t.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::shape(context, &[0, 0, 0], other)),
    }
}

/// `out[.., i] = sum_j kernel[j] * x[.., i + j - c]`, `c = len / 2`, zero outside.
pub(crate) fn correlate1d(x: &[f64], n: usize, kernel: &[f64], out: &mut [f64]) {
    let c = (kernel.len() / 2) as isize;
    for (xr, yr) in x.chunks(n).zip(out.chunks_mut(n)) {
        for (i, y) in yr.iter_mut().enumerate() {
            let lo = (c - i as isize).max(0) as usize;
            let hi = ((n as isize - i as isize + c) as usize).min(kernel.len());
            let mut acc = 0.0;
            for j in lo..hi {
                acc += kernel[j] * xr[(i as isize + j as isize - c) as usize];
            }
            *y = acc;
        }
    }
}

fn correlate1d_adjoint(g: &[f64], n: usize, kernel: &[f64], out: &mut [f64]) {
    let c = (kernel.len() / 2) as isize;
    for (gr, xr) in g.chunks(n).zip(out.chunks_mut(n)) {
        for (i, &gi) in gr.iter().enumerate() {
            let lo = (c - i as isize).max(0) as usize;
            let hi = ((n as isize - i as isize + c) as usize).min(kernel.len());
            for j in lo..hi {
                xr[(i as isize + j as isize - c) as usize] += kernel[j] * gi;
            }
        }
    }
}

/// Forward differences with a zero last row/column (Neumann boundary).
pub(crate) fn grad2d(u: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let (rows, cols) = out.split_at_mut(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            rows[k] = if i + 1 < h { u[k + w] - u[k] } else { 0.0 };
            cols[k] = if j + 1 < w { u[k + 1] - u[k] } else { 0.0 };
        }
    }
}

pub(crate) fn grad2d_adjoint(p: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let (rows, cols) = p.split_at(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut v = 0.0;
            if i + 1 < h {
                v -= rows[k];
            }
            if i > 0 {
                v += rows[k - w];
            }
            if j + 1 < w {
                v -= cols[k];
            }
            if j > 0 {
                v += cols[k - 1];
            }
            out[k] = v;
        }
    }
}

pub(crate) fn field_normalize(v: &[f64], eps: f64, out: &mut [f64]) {
    let n = v.len() / 2;
    for i in 0..n {
        let (a, b) = (v[i], v[n + i]);
        let s = (a * a + b * b + eps * eps).sqrt();
        out[i] = a / s;
        out[n + i] = b / s;
    }
}

struct Conv2dDims {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Conv2dDims {
    fn of(inputs: &[&Tensor]) -> Result<Self> {
        let [cin, h, w] = rank3(inputs[0], "correlate2d input")?;
        let [cout, kcin, kh, kw] = match inputs[1].shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            other => return Err(Error::shape("correlate2d kernel", &[0, cin, 0, 0], other)),
        };
        if kcin != cin {
            return Err(Error::shape("correlate2d kernel", &[cout, cin, kh, kw], inputs[1].shape()));
        }
        check_odd_kernel(kh)?;
        check_odd_kernel(kw)?;
        if let Some(bias) = inputs.get(2) {
            bias.ensure_shape("correlate2d bias", &[cout])?;
        }
        Ok(Self { cin, cout, h, w, kh, kw })
    }
}

fn conv2d_forward(d: &Conv2dDims, inputs: &[&Tensor]) -> Tensor {
    let (x, k) = (inputs[0].data(), inputs[1].data());
    let (rh, rw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.cout * hw];
    for o in 0..d.cout {
        let b = inputs.get(2).map_or(0.0, |t| t.data()[o]);
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = b);
        for c in 0..d.cin {
            let xc = &x[c * hw..(c + 1) * hw];
            for a in 0..d.kh {
                for bb in 0..d.kw {
                    let kv = k[((o * d.cin + c) * d.kh + a) * d.kw + bb];
                    let (di, dj) = (a as isize - rh, bb as isize - rw);
                    for i in 0..d.h {
                        let si = i as isize + di;
                        if si < 0 || si >= d.h as isize {
                            continue;
                        }
                        for j in 0..d.w {
                            let sj = j as isize + dj;
                            if sj < 0 || sj >= d.w as isize {
                                continue;
                            }
                            plane[i * d.w + j] += kv * xc[si as usize * d.w + sj as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::raw(vec![d.cout, d.h, d.w], out)
}

fn conv2d_backward(
    d: &Conv2dDims,
    inputs: &[&Tensor],
    up: &[f64],
    needs: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    let (x, k) = (inputs[0].data(), inputs[1].data());
    let (rh, rw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let hw = d.h * d.w;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gk = needs[1].then(|| vec![0.0; k.len()]);
    for o in 0..d.cout {
        let uplane = &up[o * hw..(o + 1) * hw];
        for c in 0..d.cin {
            for a in 0..d.kh {
                for bb in 0..d.kw {
                    let ki = ((o * d.cin + c) * d.kh + a) * d.kw + bb;
                    let kv = k[ki];
                    let (di, dj) = (a as isize - rh, bb as isize - rw);
                    let mut kacc = 0.0;
                    for i in 0..d.h {
                        let si = i as isize + di;
                        if si < 0 || si >= d.h as isize {
                            continue;
                        }
                        for j in 0..d.w {
                            let sj = j as isize + dj;
                            if sj < 0 || sj >= d.w as isize {
                                continue;
                            }
                            let src = c * hw + si as usize * d.w + sj as usize;
                            let g = uplane[i * d.w + j];
                            if let Some(gx) = gx.as_mut() {
                                gx[src] += kv * g;
                            }
                            kacc += x[src] * g;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[ki] += kacc;
                    }
                }
            }
        }
    }
    grads[0] = gx;
    grads[1] = gk;
    if inputs.len() == 3 && needs[2] {
        grads[2] = Some(up.chunks(hw).map(|p| p.iter().sum()).collect());
    }
}
