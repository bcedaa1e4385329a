//! The three compared architectures.
//!
//! * [`ModelKind::LstmStnCnn`]: the recurrent localization network emits one
//!   transform per digit; each transform samples a glimpse from the canvas,
//!   the glimpse is box-averaged by `d`, and one shared glimpse classifier
//!   reads it.
//! * [`ModelKind::FfnStnCnn`]: a feed-forward localization network emits a
//!   single transform for the whole canvas, and a four-head CNN reads the
//!   transformed canvas.
//! * [`ModelKind::Cnn`]: the four-head CNN on the (down-sampled) canvas.
//!
//! Logits are always `[N, digits, classes]`; head `t` is supervised with the
//! `t`-th digit in reading order.

use std::fmt;
use std::str::FromStr;

use crate::downsample::{
    avg_downsample, avg_downsample_backward, pad_to_multiple, pad_to_multiple_backward, DownsampleFactor,
};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, dense_backward, dense_forward, dropout_backward,
    dropout_forward, join, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    softmax_xent_backward, softmax_xent_forward, ConvParams, DenseParams, DropoutMask, Mode, Params,
    PoolIndices,
};
use crate::localization::{
    extract_features, extract_features_backward, identity_head, localize_sequence, localize_sequence_backward,
    theta_at, ConvStack, FeatureCache, LocNetParams, LocalizeCache,
};
use crate::stn::{affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward_grid, AffineParams};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    LstmStnCnn,
    FfnStnCnn,
    Cnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LstmStnCnn => "lstm-stn-cnn",
            ModelKind::FfnStnCnn => "ffn-stn-cnn",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm-stn-cnn" => Ok(ModelKind::LstmStnCnn),
            "ffn-stn-cnn" => Ok(ModelKind::FfnStnCnn),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(Error::Precondition(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Side of the square input canvas.
    pub canvas: usize,
    /// Digits per canvas: LSTM steps, or classifier heads for the CNN models.
    pub digits: usize,
    pub classes: usize,
    pub loc_filters: usize,
    pub loc_layers: usize,
    pub lstm_hidden: usize,
    /// Side of each sampled glimpse before down-sampling (LSTM-STN only).
    pub glimpse: usize,
    pub d: DownsampleFactor,
    pub classifier_filters: usize,
    pub fc_units: usize,
    pub dropout_keep: f64,
}

impl ModelConfig {
    /// Full-size configuration for a model kind and down-sampling factor.
    pub fn standard(kind: ModelKind, d: usize) -> Result<Self> {
        Ok(ModelConfig {
            kind,
            canvas: 100,
            digits: 4,
            classes: 10,
            loc_filters: 20,
            loc_layers: 4,
            lstm_hidden: 256,
            glimpse: 48,
            d: DownsampleFactor::new(d)?,
            classifier_filters: match kind {
                ModelKind::LstmStnCnn => 32,
                _ => 96,
            },
            fc_units: 400,
            dropout_keep: 0.5,
        })
    }

    /// Side of the image the classifier sees.
    pub fn classifier_input(&self) -> usize {
        match self.kind {
            ModelKind::LstmStnCnn => self.glimpse / self.d.get(),
            _ => self.canvas.div_ceil(self.d.get()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::LstmStnCnn && !self.d.divides(self.glimpse) {
            return Err(Error::Precondition(format!(
                "down-sampling factor {} does not divide the {}-pixel glimpse",
                self.d, self.glimpse
            )));
        }
        if self.classifier_input() < 2 {
            return Err(Error::Precondition("classifier input smaller than one pooling window".into()));
        }
        if self.digits == 0 || self.classes == 0 {
            return Err(Error::Precondition("need at least one digit and one class".into()));
        }
        if self.kind != ModelKind::Cnn && self.canvas < 1 << self.loc_layers {
            return Err(Error::Precondition(format!(
                "{}-pixel canvas too small for {} localization pools",
                self.canvas, self.loc_layers
            )));
        }
        Ok(())
    }

    /// Key/value rendering stored in checkpoints.
    pub fn to_meta(&self) -> String {
        format!(
            "kind={}\ncanvas={}\ndigits={}\nclasses={}\nloc_filters={}\nloc_layers={}\nlstm_hidden={}\nglimpse={}\nd={}\nclassifier_filters={}\nfc_units={}\ndropout_keep={}\n",
            self.kind,
            self.canvas,
            self.digits,
            self.classes,
            self.loc_filters,
            self.loc_layers,
            self.lstm_hidden,
            self.glimpse,
            self.d,
            self.classifier_filters,
            self.fc_units,
            self.dropout_keep
        )
    }

    pub fn from_meta(meta: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            meta.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::format(format!("checkpoint metadata lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::format(format!("bad checkpoint metadata value for {key}")))
        };
        let cfg = ModelConfig {
            kind: get("kind")?.parse()?,
            canvas: num("canvas")?,
            digits: num("digits")?,
            classes: num("classes")?,
            loc_filters: num("loc_filters")?,
            loc_layers: num("loc_layers")?,
            lstm_hidden: num("lstm_hidden")?,
            glimpse: num("glimpse")?,
            d: DownsampleFactor::new(num("d")?)?,
            classifier_filters: num("classifier_filters")?,
            fc_units: num("fc_units")?,
            dropout_keep: get("dropout_keep")?
                .parse()
                .map_err(|_| Error::format("bad checkpoint metadata value for dropout_keep"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `conv 3x3 -> ReLU -> maxpool 2 -> dropout -> dense -> ReLU -> heads`.
/// Each head is a dense layer to `classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    pub conv: ConvParams,
    pub fc: DenseParams,
    pub heads: Vec<DenseParams>,
}

impl ConvClassifier {
    pub fn init(rng: &mut Rng, side: usize, filters: usize, fc_units: usize, heads: usize, classes: usize) -> Self {
        let conv = ConvParams::init(rng, 1, filters, 3);
        let flat = filters * (side / 2) * (side / 2);
        let fc = DenseParams::init(rng, flat, fc_units);
        let heads = (0..heads).map(|_| DenseParams::init(rng, fc_units, classes)).collect();
        ConvClassifier { conv, fc, heads }
    }
}

impl Params for ConvClassifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.fc.visit(&join(prefix, "fc"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
}

struct ClassifierCache {
    input: Tensor,
    conv_act: Tensor,
    pool: PoolIndices,
    dropout: DropoutMask,
    flat: Tensor,
    hidden: Tensor,
}

/// `x: [N, 1, s, s]` to logits `[N, heads, classes]`.
fn classifier_forward(
    c: &ConvClassifier,
    x: &Tensor,
    keep: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, ClassifierCache)> {
    let n = x.shape()[0];
    let conv_act = relu_forward(&conv2d_forward(x, &c.conv, 1)?);
    let (pooled, pool) = maxpool2_forward(&conv_act)?;
    let (dropped, dropout) = dropout_forward(&pooled, keep, mode, rng)?;
    let flat = dropped.reshape(&[n, pooled.len() / n])?;
    let hidden = relu_forward(&dense_forward(&flat, &c.fc)?);
    let classes = c.heads[0].outputs();
    let nh = c.heads.len();
    let mut logits = vec![0.0; n * nh * classes];
    for (h, head) in c.heads.iter().enumerate() {
        let y = dense_forward(&hidden, head)?;
        for b in 0..n {
            logits[(b * nh + h) * classes..(b * nh + h + 1) * classes]
                .copy_from_slice(&y.data()[b * classes..(b + 1) * classes]);
        }
    }
    Ok((
        Tensor::new(&[n, nh, classes], logits)?,
        ClassifierCache {
            input: x.clone(),
            conv_act,
            pool,
            dropout,
            flat,
            hidden,
        },
    ))
}

fn classifier_backward(
    c: &ConvClassifier,
    cache: &ClassifierCache,
    grad_logits: &Tensor,
    want_input_grad: bool,
) -> Result<(ConvClassifier, Option<Tensor>)> {
    let n = cache.input.shape()[0];
    let nh = c.heads.len();
    let classes = c.heads[0].outputs();
    if grad_logits.shape() != [n, nh, classes] {
        return Err(Error::shape("classifier_backward", &[n, nh, classes], grad_logits.shape()));
    }
    let mut grad_hidden = Tensor::zeros(cache.hidden.shape());
    let mut heads = Vec::with_capacity(nh);
    for (h, head) in c.heads.iter().enumerate() {
        let mut gy = vec![0.0; n * classes];
        for b in 0..n {
            gy[b * classes..(b + 1) * classes]
                .copy_from_slice(&grad_logits.data()[(b * nh + h) * classes..(b * nh + h + 1) * classes]);
        }
        let (gh, gp) = dense_backward(&cache.hidden, head, &Tensor::new(&[n, classes], gy)?)?;
        grad_hidden.axpy(1.0, &gh);
        heads.push(gp);
    }
    let g_fc_out = relu_backward(&grad_hidden, &cache.hidden)?;
    let (g_flat, fc) = dense_backward(&cache.flat, &c.fc, &g_fc_out)?;
    let g_pooled = dropout_backward(&g_flat, &cache.dropout)?;
    let g_act = maxpool2_backward(&g_pooled, &cache.pool)?;
    let g_conv = relu_backward(&g_act, &cache.conv_act)?;
    let (conv, gx) = if want_input_grad {
        let (gx, gp) = conv2d_backward(&cache.input, &c.conv, 1, &g_conv)?;
        (gp, Some(gx))
    } else {
        (conv2d_backward_params(&cache.input, &c.conv, 1, &g_conv)?, None)
    };
    Ok((ConvClassifier { conv, fc, heads }, gx))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmStnCnn {
    pub locnet: LocNetParams,
    /// Single-head classifier shared by every glimpse.
    pub classifier: ConvClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnStnCnn {
    pub locnet: ConvStack,
    /// `feat -> 6`, identity-initialized.
    pub head: DenseParams,
    pub classifier: ConvClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainCnn {
    pub classifier: ConvClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    LstmStn(LstmStnCnn),
    FfnStn(FfnStnCnn),
    Cnn(PlainCnn),
}

/// A configured network. Gradients are returned as a `Model` of the same
/// shape, so optimizers can pair slots through [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
}

impl Params for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match &self.net {
            Network::LstmStn(m) => {
                m.locnet.visit(&join(prefix, "locnet"), f);
                m.classifier.visit(&join(prefix, "classifier"), f);
            }
            Network::FfnStn(m) => {
                m.locnet.visit(&join(prefix, "locnet"), f);
                m.head.visit(&join(prefix, "loc_head"), f);
                m.classifier.visit(&join(prefix, "classifier"), f);
            }
            Network::Cnn(m) => m.classifier.visit(&join(prefix, "classifier"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match &mut self.net {
            Network::LstmStn(m) => {
                m.locnet.visit_mut(&join(prefix, "locnet"), f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
            }
            Network::FfnStn(m) => {
                m.locnet.visit_mut(&join(prefix, "locnet"), f);
                m.head.visit_mut(&join(prefix, "loc_head"), f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
            }
            Network::Cnn(m) => m.classifier.visit_mut(&join(prefix, "classifier"), f),
        }
    }
}

enum Front {
    /// Per-sample, per-step transforms `[N, steps, 6]` plus the LSTM cache.
    Recurrent { thetas: Tensor, loc: LocalizeCache },
    /// One transform per canvas.
    FeedForward {
        thetas: Vec<AffineParams>,
        features: FeatureCache,
        feature_vec: Tensor,
        pad: (usize, usize),
        padded_shape: Vec<usize>,
    },
    Plain,
}

/// Everything a backward pass needs, plus the classifier inputs for inspection.
pub struct ForwardPass {
    /// `[N, digits, classes]`
    pub logits: Tensor,
    /// Classifier inputs, `[N * views, 1, s, s]` (`views` is `digits` for
    /// LSTM-STN and 1 otherwise), sample-major.
    pub views: Tensor,
    canvases: Tensor,
    front: Front,
    classifier: ClassifierCache,
}

impl ForwardPass {
    /// The transform applied for `(sample, step)`; identity for the plain CNN.
    pub fn theta(&self, sample: usize, step: usize) -> AffineParams {
        match &self.front {
            Front::Recurrent { thetas, .. } => theta_at(thetas, sample, step),
            Front::FeedForward { thetas, .. } => thetas[sample],
            Front::Plain => AffineParams::IDENTITY,
        }
    }

    /// Classifier input of one sample and view as `[1, s, s]`.
    pub fn view(&self, index: usize) -> Tensor {
        let s = self.views.shape()[2];
        Tensor::new(&[1, s, s], self.views.data()[index * s * s..(index + 1) * s * s].to_vec()).unwrap()
    }
}

fn canvas_at(canvases: &Tensor, b: usize) -> Tensor {
    let (h, w) = (canvases.shape()[2], canvases.shape()[3]);
    Tensor::new(&[1, h, w], canvases.data()[b * h * w..(b + 1) * h * w].to_vec()).unwrap()
}

fn stack(views: Vec<Tensor>) -> Result<Tensor> {
    let shape = views[0].shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * views[0].len());
    for v in &views {
        data.extend_from_slice(v.data());
    }
    let mut full = vec![views.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let side = c.classifier_input();
        let net = match c.kind {
            ModelKind::LstmStnCnn => Network::LstmStn(LstmStnCnn {
                locnet: LocNetParams::init(rng, c.canvas, c.canvas, c.loc_filters, c.loc_layers, c.lstm_hidden),
                classifier: ConvClassifier::init(rng, side, c.classifier_filters, c.fc_units, 1, c.classes),
            }),
            ModelKind::FfnStnCnn => {
                let locnet = ConvStack::init(rng, 1, c.loc_filters, c.loc_layers);
                let feat = locnet.feature_len(c.canvas, c.canvas);
                Network::FfnStn(FfnStnCnn {
                    locnet,
                    head: identity_head(feat),
                    classifier: ConvClassifier::init(rng, side, c.classifier_filters, c.fc_units, c.digits, c.classes),
                })
            }
            ModelKind::Cnn => Network::Cnn(PlainCnn {
                classifier: ConvClassifier::init(rng, side, c.classifier_filters, c.fc_units, c.digits, c.classes),
            }),
        };
        Ok(Model { config, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    fn check_input(&self, canvases: &Tensor) -> Result<usize> {
        let side = self.config.canvas;
        match *canvases.shape() {
            [n, 1, h, w] if h == side && w == side => Ok(n),
            _ => Err(Error::shape("model input", &[0, 1, side, side], canvases.shape())),
        }
    }

    /// Forward pass over `canvases: [N, 1, side, side]`. `rng` drives dropout
    /// in training mode and is untouched in evaluation mode.
    pub fn forward(&self, canvases: &Tensor, mode: Mode, rng: &mut Rng) -> Result<ForwardPass> {
        let n = self.check_input(canvases)?;
        let cfg = &self.config;
        let d = cfg.d;
        let (front, views, classifier) = match &self.net {
            Network::LstmStn(m) => {
                let (thetas, loc) = localize_sequence(canvases, &m.locnet, cfg.digits)?;
                let mut views = Vec::with_capacity(n * cfg.digits);
                for b in 0..n {
                    let canvas = canvas_at(canvases, b);
                    for t in 0..cfg.digits {
                        let grid = affine_grid(&theta_at(&thetas, b, t), cfg.glimpse, cfg.glimpse);
                        views.push(avg_downsample(&bilinear_sample(&canvas, &grid)?, d)?);
                    }
                }
                (Front::Recurrent { thetas, loc }, stack(views)?, &m.classifier)
            }
            Network::FfnStn(m) => {
                let (feature_vec, features) = extract_features(canvases, &m.locnet)?;
                let flat = dense_forward(&feature_vec, &m.head)?.ensure_finite("ffn localization")?;
                let thetas: Vec<AffineParams> =
                    flat.data().chunks_exact(6).map(AffineParams::from_slice).collect();
                let mut views = Vec::with_capacity(n);
                let (mut pad, mut padded_shape) = ((0, 0), Vec::new());
                for (b, theta) in thetas.iter().enumerate() {
                    let grid = affine_grid(theta, cfg.canvas, cfg.canvas);
                    let warped = bilinear_sample(&canvas_at(canvases, b), &grid)?;
                    let (padded, offsets) = pad_to_multiple(&warped, d)?;
                    pad = offsets;
                    padded_shape = padded.shape().to_vec();
                    views.push(avg_downsample(&padded, d)?);
                }
                let front = Front::FeedForward {
                    thetas,
                    features,
                    feature_vec,
                    pad,
                    padded_shape,
                };
                (front, stack(views)?, &m.classifier)
            }
            Network::Cnn(m) => {
                let views = avg_downsample(&pad_to_multiple(canvases, d)?.0, d)?;
                (Front::Plain, views, &m.classifier)
            }
        };
        let (logits, classifier) = classifier_forward(classifier, &views, cfg.dropout_keep, mode, rng)?;
        let logits = logits.reshape(&[n, cfg.digits, cfg.classes])?.ensure_finite("model logits")?;
        Ok(ForwardPass {
            logits,
            views,
            canvases: canvases.clone(),
            front,
            classifier,
        })
    }

    /// Parameter gradients for upstream `grad_logits: [N, digits, classes]`.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Tensor) -> Result<Model> {
        let cfg = &self.config;
        let n = pass.logits.shape()[0];
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::shape("Model::backward", pass.logits.shape(), grad_logits.shape()));
        }
        let d = cfg.d;
        let net = match (&self.net, &pass.front) {
            (Network::LstmStn(m), Front::Recurrent { thetas, loc }) => {
                let per_view = grad_logits.clone().reshape(&[n * cfg.digits, 1, cfg.classes])?;
                let (classifier, gviews) = classifier_backward(&m.classifier, &pass.classifier, &per_view, true)?;
                let gviews = gviews.expect("view gradient requested");
                let s = cfg.classifier_input();
                let mut gthetas = vec![0.0; n * cfg.digits * 6];
                for b in 0..n {
                    let canvas = canvas_at(&pass.canvases, b);
                    for t in 0..cfg.digits {
                        let i = b * cfg.digits + t;
                        let gv = Tensor::new(&[1, s, s], gviews.data()[i * s * s..(i + 1) * s * s].to_vec())?;
                        let gfull = avg_downsample_backward(&gv, d, &[1, cfg.glimpse, cfg.glimpse])?;
                        let grid = affine_grid(&theta_at(thetas, b, t), cfg.glimpse, cfg.glimpse);
                        let ggrid = bilinear_sample_backward_grid(&canvas, &grid, &gfull)?;
                        let gt = affine_grid_backward(&ggrid, cfg.glimpse, cfg.glimpse)?;
                        gthetas[i * 6..(i + 1) * 6].copy_from_slice(&gt);
                    }
                }
                let gthetas = Tensor::new(&[n, cfg.digits, 6], gthetas)?;
                let (locnet, _) = localize_sequence_backward(loc, &m.locnet, &gthetas, false)?;
                Network::LstmStn(LstmStnCnn { locnet, classifier })
            }
            (
                Network::FfnStn(m),
                Front::FeedForward {
                    thetas,
                    features,
                    feature_vec,
                    pad,
                    padded_shape,
                },
            ) => {
                let (classifier, gviews) = classifier_backward(&m.classifier, &pass.classifier, grad_logits, true)?;
                let gviews = gviews.expect("view gradient requested");
                let s = cfg.classifier_input();
                let mut gflat = vec![0.0; n * 6];
                for (b, theta) in thetas.iter().enumerate() {
                    let gv = Tensor::new(&[1, s, s], gviews.data()[b * s * s..(b + 1) * s * s].to_vec())?;
                    let gpadded = avg_downsample_backward(&gv, d, padded_shape)?;
                    let gwarp = pad_to_multiple_backward(&gpadded, *pad, &[1, cfg.canvas, cfg.canvas])?;
                    let grid = affine_grid(theta, cfg.canvas, cfg.canvas);
                    let ggrid = bilinear_sample_backward_grid(&canvas_at(&pass.canvases, b), &grid, &gwarp)?;
                    gflat[b * 6..(b + 1) * 6].copy_from_slice(&affine_grid_backward(&ggrid, cfg.canvas, cfg.canvas)?);
                }
                let (gfeat, head) = dense_backward(feature_vec, &m.head, &Tensor::new(&[n, 6], gflat)?)?;
                let (locnet, _) = extract_features_backward(features, &m.locnet, &gfeat, false)?;
                Network::FfnStn(FfnStnCnn { locnet, head, classifier })
            }
            (Network::Cnn(m), Front::Plain) => {
                let (classifier, _) = classifier_backward(&m.classifier, &pass.classifier, grad_logits, false)?;
                Network::Cnn(PlainCnn { classifier })
            }
            _ => return Err(Error::Precondition("forward pass belongs to a different model".into())),
        };
        Ok(Model {
            config: self.config.clone(),
            net,
        })
    }

    /// Mean softmax cross-entropy over the batch and all heads, with gradients.
    pub fn loss_and_backward(
        &self,
        canvases: &Tensor,
        labels: &[Vec<usize>],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, Model)> {
        let pass = self.forward(canvases, mode, rng)?;
        let (loss, grad) = self.loss_from_logits(&pass.logits, labels)?;
        Ok((loss, self.backward(&pass, &grad)?))
    }

    /// Loss and its gradient with respect to the logits.
    pub fn loss_from_logits(&self, logits: &Tensor, labels: &[Vec<usize>]) -> Result<(f64, Tensor)> {
        let (n, k, c) = (logits.shape()[0], self.config.digits, self.config.classes);
        if labels.len() != n || labels.iter().any(|l| l.len() != k) {
            return Err(Error::Precondition(format!("expected {n} label rows of {k} digits")));
        }
        let flat_labels: Vec<usize> = labels.iter().flatten().copied().collect();
        let flat = logits.clone().reshape(&[n * k, c])?;
        let (loss, probs) = softmax_xent_forward(&flat, &flat_labels)?;
        let grad = softmax_xent_backward(&probs, &flat_labels)?.reshape(&[n, k, c])?;
        Ok((loss, grad))
    }

    pub fn loss(&self, canvases: &Tensor, labels: &[Vec<usize>], mode: Mode, rng: &mut Rng) -> Result<f64> {
        let pass = self.forward(canvases, mode, rng)?;
        Ok(self.loss_from_logits(&pass.logits, labels)?.0)
    }

    /// Arg-max digit of every head.
    pub fn predict(&self, canvases: &Tensor) -> Result<Vec<Vec<usize>>> {
        let pass = self.forward(canvases, Mode::Eval, &mut Rng::new(0))?;
        Ok(argmax_rows(&pass.logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<Vec<usize>> {
    let (k, c) = (logits.shape()[1], logits.shape()[2]);
    logits
        .data()
        .chunks_exact(k * c)
        .map(|sample| {
            sample
                .chunks_exact(c)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .collect()
        })
        .collect()
}

/// Fraction of wrongly predicted digit positions.
pub fn per_digit_error(predictions: &[Vec<usize>], labels: &[Vec<usize>]) -> f64 {
    let total: usize = labels.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let wrong: usize = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| p.iter().zip(l).filter(|(a, b)| a != b).count())
        .sum();
    wrong as f64 / total as f64
}
