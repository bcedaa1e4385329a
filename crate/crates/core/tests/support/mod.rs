//! Shared test helpers: finite-difference gradient checking, fixture paths
//! and the brute-force canvas invariant check.

#![allow(dead_code)]

pub mod gradient_cases;

use stn_core::{Rng, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not produce huge ratios.
pub const FLOOR: f64 = 1e-6;

pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];

#[derive(Debug, Default, Clone, Copy)]
pub struct Report {
    pub checked: usize,
    /// Coordinates within one step of a kink (ReLU, max, tent kernel corner).
    pub kinks: usize,
    pub worst: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compare `analytic` (the gradient of `loss` at `x`) with central
/// differences. `limit` caps the number of coordinates probed (chosen at
/// random); `None` probes all of them.
///
/// A coordinate that misses the tolerance is excused as a kink only when the
/// two one-sided differences disagree by at least the central error: then a
/// non-differentiable point lies within one step and the central difference
/// is averaging two slopes. Smooth mismatches (real bugs) have agreeing
/// one-sided differences and are reported.
pub fn check(
    label: &str,
    x: &Tensor,
    analytic: &Tensor,
    limit: Option<usize>,
    seed: u64,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> Report {
    assert_eq!(x.shape(), analytic.shape(), "{label}: gradient shape");
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if let Some(k) = limit {
        let mut rng = Rng::new(seed ^ 0x5eed);
        rng.shuffle(&mut idx);
        idx.truncate(k);
    }
    let base = loss(x);
    let mut report = Report::default();
    let mut probe = x.clone();
    for &i in &idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = loss(&probe);
        probe.data_mut()[i] = orig - STEP;
        let minus = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic.data()[i];
        let err = rel_err(a, numeric);
        report.checked += 1;
        if err > TOLERANCE {
            let fwd = (plus - base) / STEP;
            let bwd = (base - minus) / STEP;
            if (fwd - bwd).abs() >= (numeric - a).abs() {
                report.kinks += 1;
                continue;
            }
            panic!("{label}[{i}] (seed {seed}): analytic {a:e} vs numeric {numeric:e}, rel err {err:e}");
        }
        report.worst = report.worst.max(err);
    }
    assert!(
        report.kinks * 10 <= report.checked.max(1),
        "{label} (seed {seed}): {} of {} coordinates sit on kinks",
        report.kinks,
        report.checked
    );
    report
}

/// Fixed random weights `w` for the probe loss `sum(w * y)`.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// `data/mnist` at the workspace root.
pub fn mnist_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Brute-force check of every canvas invariant, recomputed from the stored
/// layout and the source pool rather than trusted from the generator.
pub fn canvas_violation(e: &stn_core::dataset::CanvasExample, pool: &[stn_core::dataset::MnistDigit]) -> Option<String> {
    use stn_core::dataset::{rotate_digit, CANVAS_SIDE, MAX_ANGLE, NOISE_BLOCKS, NOISE_SIDE};
    let layout = e.layout.as_ref()?;
    if e.canvas.shape() != [CANVAS_SIDE, CANVAS_SIDE] {
        return Some(format!("canvas shape {:?}", e.canvas.shape()));
    }
    if e.angle.abs() > MAX_ANGLE {
        return Some(format!("angle {} out of range", e.angle));
    }
    if layout.placements.len() != 4 || e.labels.iter().any(|&l| l > 9) {
        return Some("need 4 labelled digits".into());
    }
    let mut owner = vec![usize::MAX; CANVAS_SIDE * CANVAS_SIDE];
    for (i, p) in layout.placements.iter().enumerate() {
        let src = &pool[p.source];
        if src.label != e.labels[i] {
            return Some(format!("label {i} does not match its source digit"));
        }
        if rotate_digit(&src.pixels, e.angle) != p.digit {
            return Some(format!("digit {i} is not rotated by the shared angle"));
        }
        let side = p.digit.side();
        if p.top + side > CANVAS_SIDE || p.left + side > CANVAS_SIDE {
            return Some(format!("digit {i} box leaves the canvas"));
        }
        for r in 0..side {
            for c in 0..side {
                if !p.digit.mask[r * side + c] {
                    continue;
                }
                let at = (p.top + r) * CANVAS_SIDE + p.left + c;
                if owner[at] != usize::MAX {
                    return Some(format!("digits {} and {i} overlap at pixel {at}", owner[at]));
                }
                owner[at] = i;
                // max-compositing: the canvas is at least as bright as the digit
                if e.canvas.data()[at] < p.digit.pixels.data()[r * side + c] {
                    return Some(format!("digit {i} ink lost at pixel {at}"));
                }
            }
        }
    }
    // reading order: anchors advance along the baseline direction
    let (s, c) = e.angle.sin_cos();
    let along: Vec<f64> = layout.anchors.iter().map(|&(x, y)| x * c + y * s).collect();
    if along.windows(2).any(|w| w[1] <= w[0]) {
        return Some("anchors are not in reading order".into());
    }
    if layout.noise_blocks.len() != NOISE_BLOCKS {
        return Some(format!("{} noise blocks", layout.noise_blocks.len()));
    }
    if layout
        .noise_blocks
        .iter()
        .any(|&(t, l)| t + NOISE_SIDE > CANVAS_SIDE || l + NOISE_SIDE > CANVAS_SIDE)
    {
        return Some("noise block leaves the canvas".into());
    }
    if e.canvas.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Some("pixel outside [0, 1]".into());
    }
    None
}
