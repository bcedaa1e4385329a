//! One function per backward pass, each checked over all seeds. Shared by
//! the unit-style test target and the acceptance runner.

use stn_core::downsample::{
    avg_downsample, avg_downsample_backward, pad_to_multiple, pad_to_multiple_backward, DownsampleFactor,
};
use stn_core::layers::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, dense_backward, dense_forward, dropout_backward,
    dropout_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax_xent_backward,
    softmax_xent_forward, ConvParams, DenseParams, Mode, Params,
};
use stn_core::localization::{
    extract_features, extract_features_backward, localize_sequence, localize_sequence_backward, lstm_step,
    lstm_step_backward, ConvStack, LocNetParams, LstmParams, LstmState,
};
use stn_core::models::{Model, ModelConfig, ModelKind};
use stn_core::stn::{affine_grid, affine_grid_backward, bilinear_sample, bilinear_sample_backward, AffineParams, SampleGrid};
use stn_core::{Rng, Tensor};
use super::{check, dot, probe_weights, random, SEEDS};

pub fn conv2d() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = random(&[2, 2, 5, 6], &mut rng, -1.0, 1.0);
        let p = ConvParams::init(&mut rng, 2, 3, 3);
        let w = probe_weights(&[2, 3, 5, 6], seed);
        let (gx, gp) = conv2d_backward(&x, &p, 1, &w).unwrap();
        assert_eq!(conv2d_backward_params(&x, &p, 1, &w).unwrap(), gp);
        check("conv x", &x, &gx, None, seed, |x| dot(&conv2d_forward(x, &p, 1).unwrap(), &w));
        check("conv weight", &p.weight, &gp.weight, None, seed, |t| {
            let q = ConvParams { weight: t.clone(), bias: p.bias.clone() };
            dot(&conv2d_forward(&x, &q, 1).unwrap(), &w)
        });
        check("conv bias", &p.bias, &gp.bias, None, seed, |t| {
            let q = ConvParams { weight: p.weight.clone(), bias: t.clone() };
            dot(&conv2d_forward(&x, &q, 1).unwrap(), &w)
        });
    }
}

pub fn dense() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = random(&[3, 7], &mut rng, -1.0, 1.0);
        let p = DenseParams::init(&mut rng, 7, 4);
        let w = probe_weights(&[3, 4], seed);
        let (gx, gp) = dense_backward(&x, &p, &w).unwrap();
        check("dense x", &x, &gx, None, seed, |x| dot(&dense_forward(x, &p).unwrap(), &w));
        check("dense weight", &p.weight, &gp.weight, None, seed, |t| {
            let q = DenseParams { weight: t.clone(), bias: p.bias.clone() };
            dot(&dense_forward(&x, &q).unwrap(), &w)
        });
        check("dense bias", &p.bias, &gp.bias, None, seed, |t| {
            let q = DenseParams { weight: p.weight.clone(), bias: t.clone() };
            dot(&dense_forward(&x, &q).unwrap(), &w)
        });
    }
}

pub fn softmax_cross_entropy() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let logits = random(&[5, 10], &mut rng, -3.0, 3.0);
        let labels: Vec<usize> = (0..5).map(|_| rng.below(10)).collect();
        let (_, probs) = softmax_xent_forward(&logits, &labels).unwrap();
        let g = softmax_xent_backward(&probs, &labels).unwrap();
        check("softmax-xent", &logits, &g, None, seed, |l| softmax_xent_forward(l, &labels).unwrap().0);
    }
}

pub fn maxpool_at_untied_points() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        // continuous values: ties have probability zero
        let x = random(&[2, 3, 6, 4], &mut rng, -1.0, 1.0);
        let w = probe_weights(&[2, 3, 3, 2], seed);
        let (_, idx) = maxpool2_forward(&x).unwrap();
        let gx = maxpool2_backward(&w, &idx).unwrap();
        let r = check("maxpool", &x, &gx, None, seed, |x| dot(&maxpool2_forward(x).unwrap().0, &w));
        assert_eq!(r.kinks, 0);
    }
}

pub fn relu_and_dropout() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = random(&[4, 9], &mut rng, -1.0, 1.0);
        let w = probe_weights(&[4, 9], seed);
        let gx = relu_backward(&w, &relu_forward(&x)).unwrap();
        check("relu", &x, &gx, None, seed, |x| dot(&relu_forward(x), &w));

        let (_, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut Rng::new(seed)).unwrap();
        let gx = dropout_backward(&w, &mask).unwrap();
        check("dropout", &x, &gx, None, seed, |x| {
            dot(&dropout_forward(x, 0.5, Mode::Train, &mut Rng::new(seed)).unwrap().0, &w)
        });
    }
}

pub fn lstm_step_all_inputs() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let (n, fin, hd) = (3, 5, 4);
        let p = LstmParams::init(&mut rng, fin, hd);
        let x = random(&[n, fin], &mut rng, -1.0, 1.0);
        let prev = LstmState {
            c: random(&[n, hd], &mut rng, -1.0, 1.0),
            h: random(&[n, hd], &mut rng, -1.0, 1.0),
        };
        let wh = probe_weights(&[n, hd], seed);
        let wc = probe_weights(&[n, hd], seed + 1);
        let probe = |s: &LstmState| dot(&s.h, &wh) + dot(&s.c, &wc);
        let (gp, gx, gprev) = lstm_step_backward(&x, &prev, &p, &wh, &wc).unwrap();
        check("lstm x", &x, &gx, None, seed, |x| probe(&lstm_step(x, &prev, &p).unwrap()));
        check("lstm h_prev", &prev.h, &gprev.h, None, seed, |h| {
            let s = LstmState { c: prev.c.clone(), h: h.clone() };
            probe(&lstm_step(&x, &s, &p).unwrap())
        });
        check("lstm c_prev", &prev.c, &gprev.c, None, seed, |c| {
            let s = LstmState { c: c.clone(), h: prev.h.clone() };
            probe(&lstm_step(&x, &s, &p).unwrap())
        });
        for (k, (name, _)) in p.named_tensors().into_iter().enumerate() {
            let base = p.tensors()[k].clone();
            let analytic = gp.tensors()[k].clone();
            check(&format!("lstm {name}"), &base, &analytic, None, seed, |t| {
                let mut q = p.clone();
                *q.tensors_mut()[k] = t.clone();
                probe(&lstm_step(&x, &prev, &q).unwrap())
            });
        }
    }
}

pub fn bilinear_sampler_image_and_grid() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let u = random(&[2, 7, 9], &mut rng, 0.0, 1.0);
        // some coordinates fall outside the image on purpose
        let coords = random(&[5, 6, 2], &mut rng, -1.2, 1.2);
        let grid = SampleGrid::from_coords(coords.clone()).unwrap();
        let w = probe_weights(&[2, 5, 6], seed);
        let (gu, gg) = bilinear_sample_backward(&u, &grid, &w).unwrap();
        check("sampler image", &u, &gu, None, seed, |u| dot(&bilinear_sample(u, &grid).unwrap(), &w));
        check("sampler grid", &coords, &gg, None, seed, |c| {
            dot(&bilinear_sample(&u, &SampleGrid::from_coords(c.clone()).unwrap()).unwrap(), &w)
        });
    }
}

pub fn affine_grid_generator() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let theta = random(&[6], &mut rng, -1.0, 1.0);
        let w = probe_weights(&[4, 5, 2], seed);
        let g = affine_grid_backward(&w, 4, 5).unwrap();
        let analytic = Tensor::new(&[6], g.to_vec()).unwrap();
        check("affine grid", &theta, &analytic, None, seed, |t| {
            dot(affine_grid(&AffineParams::from_slice(t.data()), 4, 5).coords(), &w)
        });
    }
}

pub fn sampler_composed_with_grid() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let u = random(&[1, 12, 12], &mut rng, 0.0, 1.0);
        let theta = Tensor::new(
            &[6],
            vec![
                rng.uniform(0.4, 0.9),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
                rng.uniform(0.4, 0.9),
                rng.uniform(-0.3, 0.3),
            ],
        )
        .unwrap();
        let w = probe_weights(&[1, 6, 6], seed);
        let f = |t: &Tensor| {
            let grid = affine_grid(&AffineParams::from_slice(t.data()), 6, 6);
            dot(&bilinear_sample(&u, &grid).unwrap(), &w)
        };
        let grid = affine_grid(&AffineParams::from_slice(theta.data()), 6, 6);
        let (_, gg) = bilinear_sample_backward(&u, &grid, &w).unwrap();
        let analytic = Tensor::new(&[6], affine_grid_backward(&gg, 6, 6).unwrap().to_vec()).unwrap();
        check("theta through sampler", &theta, &analytic, None, seed, f);
    }
}

pub fn downsample_and_padding() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        for d in 1..=4 {
            let f = DownsampleFactor::new(d).unwrap();
            let u = random(&[2, 12, 12], &mut rng, -1.0, 1.0);
            let w = probe_weights(&[2, 12 / d, 12 / d], seed);
            let gu = avg_downsample_backward(&w, f, u.shape()).unwrap();
            check("downsample", &u, &gu, None, seed, |u| dot(&avg_downsample(u, f).unwrap(), &w));

            let v = random(&[1, 10, 11], &mut rng, -1.0, 1.0);
            let (padded, off) = pad_to_multiple(&v, f).unwrap();
            let wp = probe_weights(padded.shape(), seed);
            let gv = pad_to_multiple_backward(&wp, off, v.shape()).unwrap();
            check("pad", &v, &gv, None, seed, |v| dot(&pad_to_multiple(v, f).unwrap().0, &wp));
        }
    }
}

pub fn conv_feature_stack() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let stack = ConvStack::init(&mut rng, 1, 3, 2);
        let u = random(&[2, 1, 8, 8], &mut rng, 0.0, 1.0);
        let (feat, cache) = extract_features(&u, &stack).unwrap();
        let w = probe_weights(feat.shape(), seed);
        let (gs, gu) = extract_features_backward(&cache, &stack, &w, true).unwrap();
        check("features input", &u, &gu.unwrap(), None, seed, |u| {
            dot(&extract_features(u, &stack).unwrap().0, &w)
        });
        for k in 0..stack.tensors().len() {
            let base = stack.tensors()[k].clone();
            let analytic = gs.tensors()[k].clone();
            check(&format!("features param {k}"), &base, &analytic, None, seed, |t| {
                let mut s = stack.clone();
                *s.tensors_mut()[k] = t.clone();
                dot(&extract_features(&u, &s).unwrap().0, &w)
            });
        }
    }
}

pub fn lstm_localizer_through_time() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let mut p = LocNetParams::init(&mut rng, 8, 8, 2, 2, 5);
        // move the head off the identity so every path carries gradient
        p.head.weight = random(p.head.weight.shape(), &mut rng, -0.5, 0.5);
        let u = random(&[2, 1, 8, 8], &mut rng, 0.0, 1.0);
        let steps = 4;
        let w = probe_weights(&[2, steps, 6], seed);
        let (_, cache) = localize_sequence(&u, &p, steps).unwrap();
        let (gp, gu) = localize_sequence_backward(&cache, &p, &w, true).unwrap();
        let f = |u: &Tensor, p: &LocNetParams| dot(&localize_sequence(u, p, steps).unwrap().0, &w);
        check("localizer input", &u, &gu.unwrap(), None, seed, |u| f(u, &p));
        for (k, (name, _)) in p.named_tensors().into_iter().enumerate() {
            let base = p.tensors()[k].clone();
            let analytic = gp.tensors()[k].clone();
            check(&format!("localizer {name}"), &base, &analytic, Some(40), seed, |t| {
                let mut q = p.clone();
                *q.tensors_mut()[k] = t.clone();
                f(&u, &q)
            });
        }
    }
}

fn shrunken(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        canvas: 12,
        digits: 3,
        classes: 10,
        loc_filters: 2,
        loc_layers: 2,
        lstm_hidden: 4,
        glimpse: 6,
        d: DownsampleFactor::new(if kind == ModelKind::FfnStnCnn { 5 } else { 2 }).unwrap(),
        classifier_filters: 2,
        fc_units: 5,
        dropout_keep: 0.5,
    }
}

fn check_model(kind: ModelKind) {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let mut model = Model::init(shrunken(kind), &mut rng).unwrap();
        // perturb every parameter so transforms leave the identity and grid
        // points leave the pixel lattice
        for t in model.tensors_mut() {
            let noise = random(t.shape(), &mut rng, -0.05, 0.05);
            t.axpy(1.0, &noise);
        }
        let x = random(&[2, 1, 12, 12], &mut rng, 0.0, 1.0);
        let labels: Vec<Vec<usize>> = (0..2).map(|_| (0..3).map(|_| rng.below(10)).collect()).collect();
        let loss = |m: &Model| m.loss(&x, &labels, Mode::Train, &mut Rng::new(seed)).unwrap();
        let (_, grads) = model
            .loss_and_backward(&x, &labels, Mode::Train, &mut Rng::new(seed))
            .unwrap();
        for (k, (name, _)) in model.named_tensors().into_iter().enumerate() {
            let base = model.tensors()[k].clone();
            let analytic = grads.tensors()[k].clone();
            check(&format!("{kind} {name}"), &base, &analytic, Some(30), seed, |t| {
                let mut m = model.clone();
                *m.tensors_mut()[k] = t.clone();
                loss(&m)
            });
        }
    }
}

pub fn full_lstm_stn_model() {
    check_model(ModelKind::LstmStnCnn);
}

pub fn full_ffn_stn_model() {
    check_model(ModelKind::FfnStnCnn);
}

pub fn full_plain_cnn() {
    check_model(ModelKind::Cnn);
}


/// Every case with a display name, in the order the acceptance runner uses.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d", conv2d),
    ("dense", dense),
    ("softmax cross-entropy", softmax_cross_entropy),
    ("maxpool (untied)", maxpool_at_untied_points),
    ("relu, dropout", relu_and_dropout),
    ("lstm step", lstm_step_all_inputs),
    ("bilinear sampler", bilinear_sampler_image_and_grid),
    ("affine grid", affine_grid_generator),
    ("grid through sampler", sampler_composed_with_grid),
    ("downsample, padding", downsample_and_padding),
    ("conv feature stack", conv_feature_stack),
    ("lstm localizer (BPTT)", lstm_localizer_through_time),
    ("LSTM-STN-CNN model", full_lstm_stn_model),
    ("FFN-STN-CNN model", full_ffn_stn_model),
    ("plain CNN model", full_plain_cnn),
];
