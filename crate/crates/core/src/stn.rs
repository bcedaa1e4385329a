//! Affine grid generation and bilinear sampling, with exact gradients.
//!
//! Target pixels are addressed in normalized coordinates: index `0` maps to
//! `-1` and index `n-1` to `+1` along each axis (a single-pixel axis maps to
//! `0`). The affine transform maps target coordinates to source coordinates,
//! which the sampler converts back to pixel units with
//! `x_pix = (x_s + 1) * (W - 1) / 2` before applying the tent kernel
//! `max(0, 1 - |x_pix - m|) * max(0, 1 - |y_pix - n|)`. Pixels outside the
//! image contribute nothing, so sampling off the canvas yields zeros.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 2x3 affine transform `[[a, b, tx], [c, d, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(v: &[f64]) -> Self {
        AffineParams(v.try_into().expect("affine parameters have 6 entries"))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.0;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Normalized source coordinates for every target pixel, `[out_h, out_w, 2]`
/// with `(x_s, y_s)` in the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    coords: Tensor,
}

impl SampleGrid {
    pub fn from_coords(coords: Tensor) -> Result<Self> {
        match coords.shape() {
            [_, _, 2] => Ok(SampleGrid { coords }),
            s => Err(Error::shape("SampleGrid", &[0, 0, 2], s)),
        }
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn out_h(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn out_w(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn source(&self, row: usize, col: usize) -> (f64, f64) {
        let i = (row * self.out_w() + col) * 2;
        (self.coords.data()[i], self.coords.data()[i + 1])
    }
}

/// Corner-aligned normalized coordinate of index `i` on an axis of `n` pixels.
pub fn target_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

pub fn affine_grid(theta: &AffineParams, out_h: usize, out_w: usize) -> SampleGrid {
    assert!(out_h >= 1 && out_w >= 1, "grid extents must be positive");
    let mut data = Vec::with_capacity(out_h * out_w * 2);
    for r in 0..out_h {
        let yt = target_coord(r, out_h);
        for c in 0..out_w {
            let (xs, ys) = theta.apply(target_coord(c, out_w), yt);
            data.push(xs);
            data.push(ys);
        }
    }
    SampleGrid {
        coords: Tensor::new(&[out_h, out_w, 2], data).unwrap(),
    }
}

/// `grad_theta = sum_i grad_coords_i (x) (x_t, y_t, 1)`.
pub fn affine_grid_backward(grad_grid: &Tensor, out_h: usize, out_w: usize) -> Result<[f64; 6]> {
    if grad_grid.shape() != [out_h, out_w, 2] {
        return Err(Error::shape("affine_grid_backward", &[out_h, out_w, 2], grad_grid.shape()));
    }
    let mut g = [0.0; 6];
    let gd = grad_grid.data();
    for r in 0..out_h {
        let yt = target_coord(r, out_h);
        for c in 0..out_w {
            let xt = target_coord(c, out_w);
            let i = (r * out_w + c) * 2;
            let (gx, gy) = (gd[i], gd[i + 1]);
            g[0] += gx * xt;
            g[1] += gx * yt;
            g[2] += gx;
            g[3] += gy * xt;
            g[4] += gy * yt;
            g[5] += gy;
        }
    }
    Ok(g)
}

/// The two tent-kernel taps along one axis. The base index is
/// `ceil(p) - 1`, so the fractional weight lies in `(0, 1]`; at an exact
/// integer the active segment is the one on its left, which makes the
/// coordinate derivative the left-limit value.
#[derive(Clone, Copy, Debug)]
struct Taps {
    base: isize,
    frac: f64,
}

impl Taps {
    fn new(pix: f64) -> Self {
        let base = pix.ceil() - 1.0;
        Taps {
            base: base as isize,
            frac: pix - base,
        }
    }

    /// `(index, weight)` for the lower and upper tap, `None` when off-image.
    fn taps(&self, len: usize) -> [(Option<usize>, f64); 2] {
        let idx = |i: isize| (i >= 0 && (i as usize) < len).then_some(i as usize);
        [
            (idx(self.base), 1.0 - self.frac),
            (idx(self.base + 1), self.frac),
        ]
    }
}

fn to_pixel(norm: f64, len: usize) -> f64 {
    (norm + 1.0) * (len as f64 - 1.0) / 2.0
}

fn image_dims(u: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *u.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, &[0, 0, 0], u.shape())),
    }
}

/// Sample `u: [C, H, W]` at the grid's source coordinates.
pub fn bilinear_sample(u: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let (c, h, w) = image_dims(u, "bilinear_sample")?;
    if !grid.coords.is_finite() {
        return Err(Error::NonFinite("bilinear_sample grid"));
    }
    let (oh, ow) = (grid.out_h(), grid.out_w());
    let npix = oh * ow;
    let mut out = vec![0.0; c * npix];
    let ud = u.data();
    for i in 0..npix {
        let (xs, ys) = grid.source(i / ow, i % ow);
        let tx = Taps::new(to_pixel(xs, w)).taps(w);
        let ty = Taps::new(to_pixel(ys, h)).taps(h);
        for (ny, wy) in ty {
            let Some(ny) = ny else { continue };
            for (mx, wx) in tx {
                let Some(mx) = mx else { continue };
                let wgt = wx * wy;
                if wgt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[ch * npix + i] += wgt * ud[(ch * h + ny) * w + mx];
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Gradients of the sampler with respect to the image and to the normalized
/// grid coordinates.
pub fn bilinear_sample_backward(u: &Tensor, grid: &SampleGrid, grad_v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (grad_u, grad_grid) = bilinear_sample_backward_impl(u, grid, grad_v, true)?;
    Ok((grad_u.expect("image gradient requested"), grad_grid))
}

/// Grid gradient only; skips the image scatter when `u` is a fixed input.
pub fn bilinear_sample_backward_grid(u: &Tensor, grid: &SampleGrid, grad_v: &Tensor) -> Result<Tensor> {
    Ok(bilinear_sample_backward_impl(u, grid, grad_v, false)?.1)
}

fn bilinear_sample_backward_impl(
    u: &Tensor,
    grid: &SampleGrid,
    grad_v: &Tensor,
    want_image_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (c, h, w) = image_dims(u, "bilinear_sample_backward")?;
    let (oh, ow) = (grid.out_h(), grid.out_w());
    if grad_v.shape() != [c, oh, ow] {
        return Err(Error::shape("bilinear_sample_backward", &[c, oh, ow], grad_v.shape()));
    }
    let npix = oh * ow;
    let ud = u.data();
    let gv = grad_v.data();
    let mut gu = if want_image_grad { vec![0.0; u.len()] } else { Vec::new() };
    let mut gg = vec![0.0; npix * 2];
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    let pixel = |ch: usize, ny: Option<usize>, mx: Option<usize>| match (ny, mx) {
        (Some(n), Some(m)) => ud[(ch * h + n) * w + m],
        _ => 0.0,
    };

    for i in 0..npix {
        let (xs, ys) = grid.source(i / ow, i % ow);
        let [(x0, wx0), (x1, wx1)] = Taps::new(to_pixel(xs, w)).taps(w);
        let [(y0, wy0), (y1, wy1)] = Taps::new(to_pixel(ys, h)).taps(h);
        let (mut dpx, mut dpy) = (0.0, 0.0);
        for ch in 0..c {
            let g = gv[ch * npix + i];
            if g == 0.0 {
                continue;
            }
            let (u00, u01) = (pixel(ch, y0, x0), pixel(ch, y0, x1));
            let (u10, u11) = (pixel(ch, y1, x0), pixel(ch, y1, x1));
            dpx += g * (wy0 * (u01 - u00) + wy1 * (u11 - u10));
            dpy += g * (wx0 * (u10 - u00) + wx1 * (u11 - u01));
            if want_image_grad {
                for (ny, wy) in [(y0, wy0), (y1, wy1)] {
                    let Some(ny) = ny else { continue };
                    for (mx, wx) in [(x0, wx0), (x1, wx1)] {
                        let Some(mx) = mx else { continue };
                        gu[(ch * h + ny) * w + mx] += g * wx * wy;
                    }
                }
            }
        }
        gg[2 * i] = dpx * sx;
        gg[2 * i + 1] = dpy * sy;
    }
    let grad_u = if want_image_grad {
        Some(Tensor::new(u.shape(), gu)?)
    } else {
        None
    };
    Ok((grad_u, Tensor::new(&[oh, ow, 2], gg)?))
}
