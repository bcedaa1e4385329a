//! Box-average down-sampling: every `d x d` window becomes its mean, giving
//! `(H/d) * (W/d)` pixels per channel.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::spatial_dims;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DownsampleFactor(usize);

impl DownsampleFactor {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Precondition("down-sampling factor must be positive".into()));
        }
        Ok(DownsampleFactor(d))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn divides(self, n: usize) -> bool {
        n.is_multiple_of(self.0)
    }
}

impl fmt::Display for DownsampleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Output pixel count per channel for an `h x w` input.
pub fn n_points(h: usize, w: usize, d: DownsampleFactor) -> usize {
    (h / d.get()) * (w / d.get())
}

/// Mean over each `d x d` window of a `[C, H, W]` or `[N, C, H, W]` tensor.
pub fn avg_downsample(u: &Tensor, d: DownsampleFactor) -> Result<Tensor> {
    let (n, c, h, w, batched) = spatial_dims(u, "avg_downsample")?;
    let d = d.get();
    if h % d != 0 || w % d != 0 {
        return Err(Error::Precondition(format!(
            "down-sampling factor {d} does not divide {h}x{w}"
        )));
    }
    if d == 1 {
        return Ok(u.clone());
    }
    let (ho, wo) = (h / d, w / d);
    let inv = 1.0 / (d * d) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane, dst) in u.data().chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            let line = &mut dst[(y / d) * wo..(y / d + 1) * wo];
            for (x, v) in row.iter().enumerate() {
                line[x / d] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    let shape = if batched { vec![n, c, ho, wo] } else { vec![c, ho, wo] };
    Tensor::new(&shape, out)
}

/// Spread each output gradient uniformly as `grad / d^2` over its window.
/// `input_shape` is the shape of the tensor that was down-sampled.
pub fn avg_downsample_backward(grad_v: &Tensor, d: DownsampleFactor, input_shape: &[usize]) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (n, c, h, w, _) = spatial_dims(&probe, "avg_downsample_backward")?;
    let d = d.get();
    if h % d != 0 || w % d != 0 || grad_v.len() != n * c * (h / d) * (w / d) {
        return Err(Error::shape("avg_downsample_backward", input_shape, grad_v.shape()));
    }
    if d == 1 {
        return Tensor::new(input_shape, grad_v.data().to_vec());
    }
    let (ho, wo) = (h / d, w / d);
    let inv = 1.0 / (d * d) as f64;
    let mut gu = probe.into_data();
    for (src, plane) in grad_v.data().chunks_exact(ho * wo).zip(gu.chunks_exact_mut(h * w)) {
        for (y, row) in plane.chunks_exact_mut(w).enumerate() {
            let line = &src[(y / d) * wo..(y / d + 1) * wo];
            for (x, v) in row.iter_mut().enumerate() {
                *v = line[x / d] * inv;
            }
        }
    }
    Tensor::new(input_shape, gu)
}

/// Zero-pad the spatial extent of a `[C, H, W]` tensor up to the next multiple
/// of `d`, splitting the padding between the two sides (extra pixel at the
/// bottom/right). Returns the padded tensor and the `(top, left)` offsets.
pub fn pad_to_multiple(u: &Tensor, d: DownsampleFactor) -> Result<(Tensor, (usize, usize))> {
    let (n, c, h, w, batched) = spatial_dims(u, "pad_to_multiple")?;
    let d = d.get();
    let (hp, wp) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    if (hp, wp) == (h, w) {
        return Ok((u.clone(), (0, 0)));
    }
    let (top, left) = ((hp - h) / 2, (wp - w) / 2);
    let mut out = vec![0.0; n * c * hp * wp];
    for (src, dst) in u.data().chunks_exact(h * w).zip(out.chunks_exact_mut(hp * wp)) {
        for y in 0..h {
            dst[(y + top) * wp + left..(y + top) * wp + left + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    let shape = if batched { vec![n, c, hp, wp] } else { vec![c, hp, wp] };
    Ok((Tensor::new(&shape, out)?, (top, left)))
}

/// Crop the gradient of a padded tensor back to the original extent.
pub fn pad_to_multiple_backward(grad: &Tensor, offsets: (usize, usize), input_shape: &[usize]) -> Result<Tensor> {
    let (_, _, hp, wp, _) = spatial_dims(grad, "pad_to_multiple_backward")?;
    let probe = Tensor::zeros(input_shape);
    let (_, _, h, w, _) = spatial_dims(&probe, "pad_to_multiple_backward")?;
    let (top, left) = offsets;
    if top + h > hp || left + w > wp {
        return Err(Error::shape("pad_to_multiple_backward", input_shape, grad.shape()));
    }
    let mut out = probe.into_data();
    for (src, dst) in grad.data().chunks_exact(hp * wp).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + top) * wp + left..(y + top) * wp + left + w]);
        }
    }
    Tensor::new(input_shape, out)
}
