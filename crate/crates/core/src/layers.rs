//! Forward and backward passes for the standard layers.
//!
//! Spatial layers take `[N, C, H, W]` batches; a rank-3 `[C, H, W]` input is
//! treated as a batch of one and returned at rank 3. Dense layers take
//! `[N, in]` (or a bare `[in]` vector).

use crate::error::{Error, Result};
use crate::tensor::{gemm, init_fan_scaled, Rng, Tensor};

/// Uniform access to the parameter tensors of a layer or model, in a fixed
/// order. Gradient containers reuse the parameter type, so zipping
/// `params.tensors_mut()` with `grads.tensors()` pairs each slot correctly.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, t| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += alpha * other`, slot by slot.
    fn accumulate(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Split a rank-3 or rank-4 spatial tensor into `(n, c, h, w, batched)`.
pub(crate) fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::shape(op, &[0, 0, 0, 0], x.shape())),
    }
}

fn spatial_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn init(rng: &mut Rng, in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvParams {
            weight: init_fan_scaled(rng, &[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl Params for ConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.ho, g.wo);
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                // columns ox with 0 <= ox + kj - pad < w
                let ox_lo = g.pad.saturating_sub(kj).min(wo);
                let ox_hi = (g.w + g.pad).saturating_sub(kj).min(wo).max(ox_lo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    line[..ox_lo].fill(0.0);
                    line[ox_hi..].fill(0.0);
                    if ox_hi == ox_lo {
                        continue;
                    }
                    let ix_lo = ox_lo + kj - g.pad;
                    line[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Fold patch-column gradients back onto a `[C, H, W]` image (accumulating).
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.ho, g.wo);
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let ox_lo = g.pad.saturating_sub(kj).min(wo);
                let ox_hi = (g.w + g.pad).saturating_sub(kj).min(wo).max(ox_lo);
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h || ox_hi == ox_lo {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let ix_lo = ox_lo + kj - g.pad;
                    for (d, s) in dst[ix_lo..ix_lo + (ox_hi - ox_lo)]
                        .iter_mut()
                        .zip(&src[oy * wo + ox_lo..oy * wo + ox_hi])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_geom(x: &Tensor, p: &ConvParams, pad: usize, op: &'static str) -> Result<(usize, ConvGeom, bool)> {
    let (n, c, h, w, batched) = spatial_dims(x, op)?;
    if c != p.in_channels() {
        return Err(Error::shape(op, &[p.in_channels()], &[c]));
    }
    let k = p.kernel();
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Precondition(format!(
            "{op}: {h}x{w} input too small for a {k}x{k} kernel with pad {pad}"
        )));
    }
    let g = ConvGeom {
        c,
        h,
        w,
        k,
        pad,
        ho: h + 2 * pad - k + 1,
        wo: w + 2 * pad - k + 1,
    };
    Ok((n, g, batched))
}

/// Stride-1 cross-correlation plus bias.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams, pad: usize) -> Result<Tensor> {
    let (n, g, batched) = conv_geom(x, p, pad, "conv2d_forward")?;
    let oc = p.out_channels();
    let (rows, ncols) = (g.rows(), g.cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; n * oc * ncols];
    let in_len = g.c * g.h * g.w;
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        let y = &mut out[b * oc * ncols..(b + 1) * oc * ncols];
        for (o, plane) in y.chunks_exact_mut(ncols).enumerate() {
            plane.fill(p.bias.data()[o]);
        }
        gemm(oc, rows, ncols, 1.0, p.weight.data(), false, &cols, false, 1.0, y);
    }
    Tensor::new(&spatial_shape(n, oc, g.ho, g.wo, batched), out)
}

fn conv2d_backward_impl(
    x: &Tensor,
    p: &ConvParams,
    pad: usize,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, ConvParams)> {
    let (n, g, batched) = conv_geom(x, p, pad, "conv2d_backward")?;
    let oc = p.out_channels();
    let expected = spatial_shape(n, oc, g.ho, g.wo, batched);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; rows * ncols];
    let mut gcols = vec![0.0; rows * ncols];
    let mut gw = vec![0.0; oc * rows];
    let mut gb = vec![0.0; oc];
    let mut gx = if want_input_grad { vec![0.0; n * in_len] } else { Vec::new() };

    for b in 0..n {
        let go = &grad_out.data()[b * oc * ncols..(b + 1) * oc * ncols];
        for (o, plane) in go.chunks_exact(ncols).enumerate() {
            gb[o] += plane.iter().sum::<f64>();
        }
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        gemm(oc, ncols, rows, 1.0, go, false, &cols, true, 1.0, &mut gw);
        if want_input_grad {
            gemm(rows, oc, ncols, 1.0, p.weight.data(), true, go, false, 0.0, &mut gcols);
            col2im(&gcols, &g, &mut gx[b * in_len..(b + 1) * in_len]);
        }
    }
    let grad_p = ConvParams {
        weight: Tensor::new(p.weight.shape(), gw)?,
        bias: Tensor::new(&[oc], gb)?,
    };
    let grad_x = if want_input_grad {
        Some(Tensor::new(x.shape(), gx)?)
    } else {
        None
    };
    Ok((grad_x, grad_p))
}

/// Gradients with respect to the input and the parameters.
pub fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, ConvParams)> {
    let (gx, gp) = conv2d_backward_impl(x, p, pad, grad_out, true)?;
    Ok((gx.expect("input gradient requested"), gp))
}

/// Parameter gradients only, for layers whose input needs no gradient.
pub fn conv2d_backward_params(
    x: &Tensor,
    p: &ConvParams,
    pad: usize,
    grad_out: &Tensor,
) -> Result<ConvParams> {
    Ok(conv2d_backward_impl(x, p, pad, grad_out, false)?.1)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect()).unwrap()
}

/// Gradient of ReLU given its forward output (zero where the output is zero).
pub fn relu_backward(grad: &Tensor, out: &Tensor) -> Result<Tensor> {
    if grad.shape() != out.shape() {
        return Err(Error::shape("relu_backward", out.shape(), grad.shape()));
    }
    let data = grad
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape(), data)
}

/// Flat input offsets of the selected maximum of every pooling window.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Ties go to the first maximum in row-major window order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w, batched) = spatial_dims(x, "maxpool2_forward")?;
    if h < 2 || w < 2 {
        return Err(Error::Precondition(format!("maxpool2 needs at least 2x2, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&spatial_shape(n, c, ho, wo, batched), out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(grad_out: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != idx.argmax.len() {
        return Err(Error::shape("maxpool2_backward", &[idx.argmax.len()], &[grad_out.len()]));
    }
    let mut gx = Tensor::zeros(&idx.input_shape);
    let gd = gx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(gx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn init(rng: &mut Rng, inputs: usize, outputs: usize) -> Self {
        DenseParams {
            weight: init_fan_scaled(rng, &[outputs, inputs], inputs, outputs),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Params for DenseParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

fn dense_rows(x: &Tensor, p: &DenseParams, op: &'static str) -> Result<usize> {
    let fin = p.inputs();
    match *x.shape() {
        [i] if i == fin => Ok(1),
        [n, i] if i == fin => Ok(n),
        _ => Err(Error::shape(op, &[fin], x.shape())),
    }
}

/// `y = x W^T + b` for `x: [N, in]`.
pub fn dense_forward(x: &Tensor, p: &DenseParams) -> Result<Tensor> {
    let n = dense_rows(x, p, "dense_forward")?;
    let (fin, fout) = (p.inputs(), p.outputs());
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(p.bias.data());
    }
    gemm(n, fin, fout, 1.0, x.data(), false, p.weight.data(), true, 1.0, &mut y);
    let shape = if x.rank() == 1 { vec![fout] } else { vec![n, fout] };
    Tensor::new(&shape, y)
}

pub fn dense_backward(x: &Tensor, p: &DenseParams, grad_y: &Tensor) -> Result<(Tensor, DenseParams)> {
    let n = dense_rows(x, p, "dense_backward")?;
    let (fin, fout) = (p.inputs(), p.outputs());
    if grad_y.len() != n * fout {
        return Err(Error::shape("dense_backward", &[n, fout], grad_y.shape()));
    }
    let mut gx = vec![0.0; n * fin];
    gemm(n, fout, fin, 1.0, grad_y.data(), false, p.weight.data(), false, 0.0, &mut gx);
    let mut gw = vec![0.0; fout * fin];
    gemm(fout, n, fin, 1.0, grad_y.data(), true, x.data(), false, 0.0, &mut gw);
    let mut gb = vec![0.0; fout];
    for row in grad_y.data().chunks_exact(fout) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        DenseParams {
            weight: Tensor::new(&[fout, fin], gw)?,
            bias: Tensor::new(&[fout], gb)?,
        },
    ))
}

/// Inverted-dropout mask: `None` means the layer was an identity map.
#[derive(Clone, Debug)]
pub struct DropoutMask(Option<Vec<f64>>);

/// In training mode each unit survives with probability `keep` and is scaled
/// by `1/keep`; evaluation mode (or `keep >= 1`) passes the input through.
pub fn dropout_forward(x: &Tensor, keep: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, DropoutMask)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Precondition(format!("dropout keep probability {keep} not in (0, 1]")));
    }
    if mode == Mode::Eval || keep >= 1.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
        .collect();
    let y = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape(), y)?, DropoutMask(Some(mask))))
}

pub fn dropout_backward(grad_y: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    match &mask.0 {
        None => Ok(grad_y.clone()),
        Some(m) if m.len() == grad_y.len() => Tensor::new(
            grad_y.shape(),
            grad_y.data().iter().zip(m).map(|(g, m)| g * m).collect(),
        ),
        Some(m) => Err(Error::shape("dropout_backward", &[m.len()], grad_y.shape())),
    }
}

/// Row-wise softmax and mean negative log-likelihood over the batch.
pub fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::shape("softmax_xent_forward", &[labels.len(), 0], logits.shape()));
    };
    if n != labels.len() {
        return Err(Error::shape("softmax_xent_forward", &[labels.len(), k], logits.shape()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        probs.extend(row.iter().map(|v| (v - log_z).exp()));
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent_forward"));
    }
    Ok((loss, Tensor::new(&[n, k], probs)?))
}

/// `(probs - onehot) / N`.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[n, k] = probs.shape() else {
        return Err(Error::shape("softmax_xent_backward", &[labels.len(), 0], probs.shape()));
    };
    if n != labels.len() {
        return Err(Error::shape("softmax_xent_backward", &[labels.len(), k], probs.shape()));
    }
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(g)
}
