//! Recurrent localization network: a conv feature extractor run once over
//! the canvas, an LSTM unrolled for a fixed number of steps on that same
//! feature vector, and a linear head turning each hidden state into an
//! affine transform.

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, dense_backward, dense_forward, join,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, spatial_dims, ConvParams,
    DenseParams, Params, PoolIndices,
};
use crate::stn::AffineParams;
use crate::tensor::{gemm, init_fan_scaled, sigmoid, Rng, Tensor};

/// `conv 3x3 (pad 1) -> ReLU -> maxpool 2` blocks followed by a flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub convs: Vec<ConvParams>,
}

impl ConvStack {
    pub fn init(rng: &mut Rng, in_ch: usize, filters: usize, layers: usize) -> Self {
        let convs = (0..layers)
            .map(|i| ConvParams::init(rng, if i == 0 { in_ch } else { filters }, filters, 3))
            .collect();
        ConvStack { convs }
    }

    /// Flattened feature length for an `h x w` input.
    pub fn feature_len(&self, h: usize, w: usize) -> usize {
        let (mut h, mut w) = (h, w);
        for _ in &self.convs {
            h /= 2;
            w /= 2;
        }
        self.convs.last().map_or(h * w, |c| c.out_channels() * h * w)
    }
}

impl Params for ConvStack {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

struct ConvBlockCache {
    input: Tensor,
    activated: Tensor,
    pool: PoolIndices,
}

pub struct FeatureCache {
    blocks: Vec<ConvBlockCache>,
    pooled_shape: Vec<usize>,
}

/// Run the conv stack over `u: [N, C, H, W]` (or a single `[C, H, W]`) and
/// flatten to `[N, feat]`.
pub fn extract_features(u: &Tensor, stack: &ConvStack) -> Result<(Tensor, FeatureCache)> {
    let (n, _, h, w, _) = spatial_dims(u, "extract_features")?;
    let min_side = 1usize << stack.convs.len();
    if h < min_side || w < min_side {
        return Err(Error::Precondition(format!(
            "{h}x{w} input too small for {} pooling stages (need {min_side} px per side)",
            stack.convs.len()
        )));
    }
    let mut x = if u.rank() == 3 {
        u.clone().reshape(&[1, u.shape()[0], h, w])?
    } else {
        u.clone()
    };
    let mut blocks = Vec::with_capacity(stack.convs.len());
    for conv in &stack.convs {
        let activated = relu_forward(&conv2d_forward(&x, conv, 1)?);
        let (pooled, pool) = maxpool2_forward(&activated)?;
        blocks.push(ConvBlockCache {
            input: std::mem::replace(&mut x, pooled),
            activated,
            pool,
        });
    }
    let pooled_shape = x.shape().to_vec();
    let feat = x.len() / n;
    let features = x.reshape(&[n, feat])?;
    Ok((features, FeatureCache { blocks, pooled_shape }))
}

/// Returns the stack gradients and, if requested, the input gradient
/// (always `[N, C, H, W]`).
pub fn extract_features_backward(
    cache: &FeatureCache,
    stack: &ConvStack,
    grad_features: &Tensor,
    want_input_grad: bool,
) -> Result<(ConvStack, Option<Tensor>)> {
    let mut g = grad_features.clone().reshape(&cache.pooled_shape)?;
    let mut grads = Vec::with_capacity(stack.convs.len());
    let mut grad_input = None;
    for (i, (block, conv)) in cache.blocks.iter().zip(&stack.convs).enumerate().rev() {
        let g_act = maxpool2_backward(&g, &block.pool)?;
        let g_pre = relu_backward(&g_act.reshape(block.activated.shape())?, &block.activated)?;
        if i > 0 || want_input_grad {
            let (gx, gp) = conv2d_backward(&block.input, conv, 1, &g_pre)?;
            grads.push(gp);
            if i == 0 {
                grad_input = Some(gx);
            } else {
                g = gx;
            }
        } else {
            grads.push(conv2d_backward_params(&block.input, conv, 1, &g_pre)?);
        }
    }
    grads.reverse();
    Ok((ConvStack { convs: grads }, grad_input))
}

/// LSTM weights with the four gate blocks stacked in the order
/// input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `[4 * hidden, input]`
    pub w_input: Tensor,
    /// `[4 * hidden, hidden]`
    pub w_hidden: Tensor,
    /// `[4 * hidden]`
    pub bias: Tensor,
}

impl LstmParams {
    /// Fan-scaled weights per gate block, forget-gate bias 1, other biases 0.
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        let w_input = init_fan_scaled(rng, &[4 * hidden, input], input, hidden);
        let w_hidden = init_fan_scaled(rng, &[4 * hidden, hidden], hidden, hidden);
        let bias = Tensor::from_fn(&[4 * hidden], |i| if i / hidden == 1 { 1.0 } else { 0.0 });
        LstmParams { w_input, w_hidden, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_input.shape()[1]
    }
}

impl Params for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_input"), &self.w_input);
        f(join(prefix, "w_hidden"), &self.w_hidden);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w_input"), &mut self.w_input);
        f(join(prefix, "w_hidden"), &mut self.w_hidden);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Cell and hidden vectors, `[N, hidden]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            c: Tensor::zeros(&[batch, hidden]),
            h: Tensor::zeros(&[batch, hidden]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }
}

/// Post-activation gates `[N, 4H]` (i, f, o, g) plus what the backward pass reads.
pub struct LstmStepCache {
    gates: Vec<f64>,
    prev: LstmState,
    tanh_c: Vec<f64>,
}

/// `x W_input^T + bias` for a `[N, input]` batch.
fn input_projection(x: &Tensor, p: &LstmParams) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    if x.rank() != 2 || x.shape()[1] != p.input() {
        return Err(Error::shape("lstm input", &[n, p.input()], x.shape()));
    }
    let g4 = 4 * p.hidden();
    let mut proj = Vec::with_capacity(n * g4);
    for _ in 0..n {
        proj.extend_from_slice(p.bias.data());
    }
    gemm(n, p.input(), g4, 1.0, x.data(), false, p.w_input.data(), true, 1.0, &mut proj);
    Ok(proj)
}

fn lstm_step_projected(proj: &[f64], prev: &LstmState, p: &LstmParams) -> Result<(LstmState, LstmStepCache)> {
    let hd = p.hidden();
    let n = prev.batch();
    if prev.h.shape() != [n, hd] || prev.c.shape() != [n, hd] || proj.len() != n * 4 * hd {
        return Err(Error::shape("lstm_step", &[n, hd], prev.h.shape()));
    }
    let mut gates = proj.to_vec();
    gemm(n, hd, 4 * hd, 1.0, prev.h.data(), false, p.w_hidden.data(), true, 1.0, &mut gates);
    let mut c = vec![0.0; n * hd];
    let mut h = vec![0.0; n * hd];
    let mut tanh_c = vec![0.0; n * hd];
    for b in 0..n {
        let row = &mut gates[b * 4 * hd..(b + 1) * 4 * hd];
        let (ifo, cand) = row.split_at_mut(3 * hd);
        ifo.iter_mut().for_each(|v| *v = sigmoid(*v));
        cand.iter_mut().for_each(|v| *v = v.tanh());
        for k in 0..hd {
            let j = b * hd + k;
            let (i, f, o, g) = (ifo[k], ifo[hd + k], ifo[2 * hd + k], cand[k]);
            c[j] = f * prev.c.data()[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
    }
    let state = LstmState {
        c: Tensor::new(&[n, hd], c)?.ensure_finite("lstm_step")?,
        h: Tensor::new(&[n, hd], h)?,
    };
    Ok((
        state,
        LstmStepCache {
            gates,
            prev: prev.clone(),
            tanh_c,
        },
    ))
}

/// One LSTM step without peepholes:
/// `i, f, o = sigmoid(.)`, `g = tanh(.)`, `c = f*c_prev + i*g`, `h = o*tanh(c)`.
/// `x` is `[N, input]` or a single `[input]` vector paired with a batch-1 state.
pub fn lstm_step(x: &Tensor, prev: &LstmState, p: &LstmParams) -> Result<LstmState> {
    let x = as_batch(x)?;
    let proj = input_projection(&x, p)?;
    Ok(lstm_step_projected(&proj, prev, p)?.0)
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 1 {
        x.clone().reshape(&[1, x.len()])
    } else {
        Ok(x.clone())
    }
}

/// Gate pre-activation gradients `[N, 4H]` and the gradients flowing into the
/// previous state.
fn lstm_step_backward_gates(
    cache: &LstmStepCache,
    grad_h: &[f64],
    grad_c: &[f64],
    hd: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = cache.prev.batch();
    let mut dgates = vec![0.0; n * 4 * hd];
    let mut dc_prev = vec![0.0; n * hd];
    let c_prev = cache.prev.c.data();
    for b in 0..n {
        let row = &cache.gates[b * 4 * hd..(b + 1) * 4 * hd];
        let drow = &mut dgates[b * 4 * hd..(b + 1) * 4 * hd];
        for k in 0..hd {
            let j = b * hd + k;
            let (i, f, o, g) = (row[k], row[hd + k], row[2 * hd + k], row[3 * hd + k]);
            let tc = cache.tanh_c[j];
            let dh = grad_h[j];
            let dc = grad_c[j] + dh * o * (1.0 - tc * tc);
            drow[k] = dc * g * i * (1.0 - i);
            drow[hd + k] = dc * c_prev[j] * f * (1.0 - f);
            drow[2 * hd + k] = dh * tc * o * (1.0 - o);
            drow[3 * hd + k] = dc * i * (1.0 - g * g);
            dc_prev[j] = dc * f;
        }
    }
    (dgates, dc_prev)
}

/// Gradients of one step given upstream `grad_h` and `grad_c` on its output
/// state: `(param grads, grad_x, grad of previous state)`.
pub fn lstm_step_backward(
    x: &Tensor,
    prev: &LstmState,
    p: &LstmParams,
    grad_h: &Tensor,
    grad_c: &Tensor,
) -> Result<(LstmParams, Tensor, LstmState)> {
    let xb = as_batch(x)?;
    let proj = input_projection(&xb, p)?;
    let (_, cache) = lstm_step_projected(&proj, prev, p)?;
    let (hd, n) = (p.hidden(), prev.batch());
    if grad_h.len() != n * hd || grad_c.len() != n * hd {
        return Err(Error::shape("lstm_step_backward", &[n, hd], grad_h.shape()));
    }
    let (dgates, dc_prev) = lstm_step_backward_gates(&cache, grad_h.data(), grad_c.data(), hd);
    let mut grads = p.zero_like();
    accumulate_gate_grads(&mut grads, &dgates, &xb, &prev.h, n)?;
    let mut dx = vec![0.0; n * p.input()];
    gemm(n, 4 * hd, p.input(), 1.0, &dgates, false, p.w_input.data(), false, 0.0, &mut dx);
    let mut dh_prev = vec![0.0; n * hd];
    gemm(n, 4 * hd, hd, 1.0, &dgates, false, p.w_hidden.data(), false, 0.0, &mut dh_prev);
    Ok((
        grads,
        Tensor::new(x.shape(), dx)?,
        LstmState {
            c: Tensor::new(&[n, hd], dc_prev)?,
            h: Tensor::new(&[n, hd], dh_prev)?,
        },
    ))
}

fn accumulate_gate_grads(grads: &mut LstmParams, dgates: &[f64], x: &Tensor, h_prev: &Tensor, n: usize) -> Result<()> {
    let g4 = grads.bias.len();
    let (fin, hd) = (grads.w_input.shape()[1], grads.w_hidden.shape()[1]);
    gemm(g4, n, fin, 1.0, dgates, true, x.data(), false, 1.0, grads.w_input.data_mut());
    gemm(g4, n, hd, 1.0, dgates, true, h_prev.data(), false, 1.0, grads.w_hidden.data_mut());
    for row in dgates.chunks_exact(g4) {
        for (b, g) in grads.bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocNetParams {
    pub features: ConvStack,
    pub lstm: LstmParams,
    /// `hidden -> 6`
    pub head: DenseParams,
}

impl LocNetParams {
    /// Conv stack over a single-channel `input_h x input_w` canvas, LSTM with
    /// `hidden` cells, and a head initialized to emit the identity transform.
    pub fn init(rng: &mut Rng, input_h: usize, input_w: usize, filters: usize, layers: usize, hidden: usize) -> Self {
        let features = ConvStack::init(rng, 1, filters, layers);
        let feat = features.feature_len(input_h, input_w);
        let lstm = LstmParams::init(rng, feat, hidden);
        LocNetParams {
            features,
            lstm,
            head: identity_head(hidden),
        }
    }
}

/// Zero weights, bias `[1, 0, 0, 0, 1, 0]`.
pub fn identity_head(inputs: usize) -> DenseParams {
    DenseParams {
        weight: Tensor::zeros(&[6, inputs]),
        bias: Tensor::new(&[6], AffineParams::IDENTITY.0.to_vec()).unwrap(),
    }
}

impl Params for LocNetParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.features.visit(&join(prefix, "features"), f);
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.features.visit_mut(&join(prefix, "features"), f);
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub struct LocalizeCache {
    features: FeatureCache,
    feature_vec: Tensor,
    steps: Vec<LstmStepCache>,
    /// Hidden states of all steps, step-major: `[steps * N, hidden]`.
    hidden: Tensor,
    batch: usize,
}

impl LocalizeCache {
    pub fn steps(&self) -> usize {
        self.steps.len()
    }
}

/// Emit `steps` transforms per canvas, returned as `[N, steps, 6]`. The
/// feature vector is computed once and fed to the LSTM at every step; the
/// state starts from zeros.
pub fn localize_sequence(u: &Tensor, p: &LocNetParams, steps: usize) -> Result<(Tensor, LocalizeCache)> {
    if steps == 0 {
        return Err(Error::Precondition("localize_sequence needs at least one step".into()));
    }
    let (feature_vec, features) = extract_features(u, &p.features)?;
    let n = feature_vec.shape()[0];
    let hd = p.lstm.hidden();
    let proj = input_projection(&feature_vec, &p.lstm)?;
    let mut state = LstmState::zeros(n, hd);
    let mut caches = Vec::with_capacity(steps);
    let mut hidden = Vec::with_capacity(steps * n * hd);
    for _ in 0..steps {
        let (next, cache) = lstm_step_projected(&proj, &state, &p.lstm)?;
        hidden.extend_from_slice(next.h.data());
        caches.push(cache);
        state = next;
    }
    let hidden = Tensor::new(&[steps * n, hd], hidden)?;
    let flat = dense_forward(&hidden, &p.head)?;
    let mut thetas = vec![0.0; n * steps * 6];
    for t in 0..steps {
        for b in 0..n {
            thetas[(b * steps + t) * 6..(b * steps + t + 1) * 6]
                .copy_from_slice(&flat.data()[(t * n + b) * 6..(t * n + b + 1) * 6]);
        }
    }
    let thetas = Tensor::new(&[n, steps, 6], thetas)?.ensure_finite("localize_sequence")?;
    Ok((
        thetas,
        LocalizeCache {
            features,
            feature_vec,
            steps: caches,
            hidden,
            batch: n,
        },
    ))
}

/// Backpropagation through time. `grad_thetas` is `[N, steps, 6]`. The input
/// gradient is only computed when `want_input_grad` is set.
pub fn localize_sequence_backward(
    cache: &LocalizeCache,
    p: &LocNetParams,
    grad_thetas: &Tensor,
    want_input_grad: bool,
) -> Result<(LocNetParams, Option<Tensor>)> {
    let (n, steps, hd) = (cache.batch, cache.steps.len(), p.lstm.hidden());
    if grad_thetas.shape() != [n, steps, 6] {
        return Err(Error::shape("localize_sequence_backward", &[n, steps, 6], grad_thetas.shape()));
    }
    let mut flat = vec![0.0; steps * n * 6];
    for t in 0..steps {
        for b in 0..n {
            flat[(t * n + b) * 6..(t * n + b + 1) * 6]
                .copy_from_slice(&grad_thetas.data()[(b * steps + t) * 6..(b * steps + t + 1) * 6]);
        }
    }
    let flat = Tensor::new(&[steps * n, 6], flat)?;
    let (grad_hidden, head) = dense_backward(&cache.hidden, &p.head, &flat)?;

    let mut lstm = p.lstm.zero_like();
    let mut dgates_sum = vec![0.0; n * 4 * hd];
    let mut dh_next = vec![0.0; n * hd];
    let mut dc_next = vec![0.0; n * hd];
    for t in (0..steps).rev() {
        let step = &cache.steps[t];
        let mut dh = grad_hidden.data()[t * n * hd..(t + 1) * n * hd].to_vec();
        dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
        let (dgates, dc_prev) = lstm_step_backward_gates(step, &dh, &dc_next, hd);
        gemm(4 * hd, n, hd, 1.0, &dgates, true, step.prev.h.data(), false, 1.0, lstm.w_hidden.data_mut());
        gemm(n, 4 * hd, hd, 1.0, &dgates, false, p.lstm.w_hidden.data(), false, 0.0, &mut dh_next);
        dgates_sum.iter_mut().zip(&dgates).for_each(|(a, b)| *a += b);
        dc_next = dc_prev;
    }
    // the input projection is shared by every step, so its gradient uses the summed gate gradients
    let fin = p.lstm.input();
    gemm(4 * hd, n, fin, 1.0, &dgates_sum, true, cache.feature_vec.data(), false, 1.0, lstm.w_input.data_mut());
    for row in dgates_sum.chunks_exact(4 * hd) {
        for (b, g) in lstm.bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dfeat = vec![0.0; n * fin];
    gemm(n, 4 * hd, fin, 1.0, &dgates_sum, false, p.lstm.w_input.data(), false, 0.0, &mut dfeat);
    let dfeat = Tensor::new(&[n, fin], dfeat)?;
    let (features, grad_u) = extract_features_backward(&cache.features, &p.features, &dfeat, want_input_grad)?;
    Ok((LocNetParams { features, lstm, head }, grad_u))
}

/// Per-sample transform `t` from a `[N, steps, 6]` tensor.
pub fn theta_at(thetas: &Tensor, sample: usize, step: usize) -> AffineParams {
    let steps = thetas.shape()[1];
    AffineParams::from_slice(&thetas.data()[(sample * steps + step) * 6..(sample * steps + step + 1) * 6])
}
