//! MNIST ingestion and synthesis of cluttered four-digit canvases.
//!
//! A canvas holds four MNIST digits rotated by one shared angle and laid out
//! along a baseline at that same angle, followed by ten 6x6 clutter blocks
//! cropped from random digits. Every example is a pure function of its seed
//! and the digit pool, so whole splits regenerate bit-for-bit.
//!
//! Splits are stored in the `SQMN` container (all integers little-endian):
//!
//! ```text
//! magic "SQMN" | version u16 | count u64 | height u16 | width u16
//! per example: height*width canvas bytes (round(v * 255)) | 4 label bytes | angle f64 | seed u64
//! ```

use std::f64::consts::FRAC_PI_4;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{read_u64_le, truncated, Rng, Tensor};

pub const DIGIT_SIDE: usize = 28;
pub const CANVAS_SIDE: usize = 100;
pub const DIGITS_PER_CANVAS: usize = 4;
pub const NOISE_BLOCKS: usize = 10;
pub const NOISE_SIDE: usize = 6;
/// Distance between consecutive digit centres along the baseline, in pixels.
pub const DIGIT_SPACING: f64 = 22.0;
pub const MAX_ANGLE: f64 = FRAC_PI_4;
pub const MASK_THRESHOLD: f64 = 0.05;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const SQMN_MAGIC: &[u8; 4] = b"SQMN";
const SQMN_VERSION: u16 = 1;
const PLACEMENT_ATTEMPTS_PER_ANGLE: usize = 100;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const NOISE_CROP_RETRIES: usize = 10;
const NOISE_MIN_INK: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MnistDigit {
    /// `[28, 28]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: u8,
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format("truncated IDX header"))
}

/// Parse an IDX3 image file (magic 2051) into `[28, 28]` tensors scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    if rows != DIGIT_SIDE || cols != DIGIT_SIDE {
        return Err(Error::format(format!("expected 28x28 IDX images, header says {rows}x{cols}")));
    }
    let size = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * size {
        return Err(Error::format(format!(
            "IDX image payload truncated: {} bytes for {count} images",
            payload.len()
        )));
    }
    Ok(payload[..count * size]
        .chunks_exact(size)
        .map(|img| Tensor::new(&[rows, cols], img.iter().map(|&b| b as f64 / 255.0).collect()).unwrap())
        .collect())
}

/// Parse an IDX1 label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::format(format!(
            "IDX label payload truncated: {} bytes for {count} labels",
            payload.len()
        )));
    }
    let labels = payload[..count].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Label { label: bad as usize, classes: 10 });
    }
    Ok(labels)
}

pub fn pair_digits(images: Vec<Tensor>, labels: Vec<u8>) -> Result<Vec<MnistDigit>> {
    if images.len() != labels.len() {
        return Err(Error::format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| MnistDigit { pixels, label })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

/// Read a file, transparently inflating it if it is gzip-compressed.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn find_idx(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    // both the canonical `-idx3-ubyte` and the `.idx3-ubyte` spelling are common
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {stem}[.gz] in {}", dir.display()),
    )))
}

/// Load one MNIST split from `dir` (raw or gzipped IDX files).
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<Vec<MnistDigit>> {
    let prefix = split.prefix();
    let images = parse_idx_images(&read_maybe_gz(&find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(&find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    pair_digits(images, labels)
}

/// A rotated digit: its tight bounding box contents and ink mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedDigit {
    /// `[side, side]`
    pub pixels: Tensor,
    pub mask: Vec<bool>,
}

impl RotatedDigit {
    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Side of the axis-aligned box enclosing a rotated `28 x 28` square.
pub fn rotated_side(angle: f64) -> usize {
    let extent = DIGIT_SIDE as f64 * (angle.cos().abs() + angle.sin().abs());
    (extent - 1e-9).ceil() as usize
}

fn sample_bilinear(img: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img.data()[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Rotate a `[28, 28]` digit about its centre by inverse mapping with
/// bilinear interpolation. Positive angles turn the `+x` axis towards `+y`
/// (clockwise on screen, since rows grow downwards), matching the baseline
/// direction `(cos, sin)` used for layout.
pub fn rotate_digit(pixels: &Tensor, angle: f64) -> RotatedDigit {
    let side = rotated_side(angle);
    let c_in = (DIGIT_SIDE as f64 - 1.0) / 2.0;
    let c_out = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let data: Vec<f64> = (0..side * side)
        .map(|i| {
            let (dx, dy) = ((i % side) as f64 - c_out, (i / side) as f64 - c_out);
            let sx = cos * dx + sin * dy + c_in;
            let sy = -sin * dx + cos * dy + c_in;
            sample_bilinear(pixels, sx, sy).clamp(0.0, 1.0)
        })
        .collect();
    let mask = data.iter().map(|&v| v > MASK_THRESHOLD).collect();
    RotatedDigit {
        pixels: Tensor::new(&[side, side], data).unwrap(),
        mask,
    }
}

/// Where one digit landed on the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    /// Index of the source digit in the pool.
    pub source: usize,
    pub top: usize,
    pub left: usize,
    pub digit: RotatedDigit,
}

impl Placement {
    /// Canvas pixels covered by the digit's ink mask.
    pub fn mask_pixels(&self, canvas_w: usize) -> impl Iterator<Item = usize> + '_ {
        let side = self.digit.side();
        self.digit
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (self.top + i / side) * canvas_w + self.left + i % side)
    }
}

/// Generation-time metadata that is not persisted in the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub anchors: [(f64, f64); DIGITS_PER_CANVAS],
    pub placements: Vec<Placement>,
    /// Top-left corners of the clutter blocks.
    pub noise_blocks: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanvasExample {
    /// `[H, W]`, values in `[0, 1]`.
    pub canvas: Tensor,
    /// Digits in reading order along the baseline.
    pub labels: [u8; DIGITS_PER_CANVAS],
    pub angle: f64,
    pub seed: u64,
    pub layout: Option<Layout>,
}

impl CanvasExample {
    pub fn labels_usize(&self) -> [usize; DIGITS_PER_CANVAS] {
        self.labels.map(|l| l as usize)
    }
}

fn feasible_range(lo_margin: f64, hi_limit: f64, offsets: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let min = offsets.clone().fold(f64::INFINITY, f64::min);
    let max = offsets.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (lo_margin - min, hi_limit - max);
    (lo <= hi).then_some((lo, hi))
}

fn masks_overlap(a: &Placement, b: &Placement, canvas_w: usize) -> bool {
    let side = |p: &Placement| p.digit.side();
    let disjoint_boxes = a.left + side(a) <= b.left
        || b.left + side(b) <= a.left
        || a.top + side(a) <= b.top
        || b.top + side(b) <= a.top;
    if disjoint_boxes {
        return false;
    }
    let mut covered = std::collections::HashSet::new();
    covered.extend(a.mask_pixels(canvas_w));
    b.mask_pixels(canvas_w).any(|p| covered.contains(&p))
}

/// Synthesize one canvas of side [`CANVAS_SIDE`] from `seed`.
pub fn generate_canvas(seed: u64, pool: &[MnistDigit]) -> Result<CanvasExample> {
    generate_canvas_sized(seed, pool, CANVAS_SIDE)
}

/// As [`generate_canvas`] with a custom canvas side (tests use small canvases
/// only where they do not need digits to fit).
pub fn generate_canvas_sized(seed: u64, pool: &[MnistDigit], side: usize) -> Result<CanvasExample> {
    if pool.is_empty() {
        return Err(Error::Precondition("digit pool is empty".into()));
    }
    let mut rng = Rng::new(seed);
    let mut attempts = 0;
    let size = side as f64;
    'angle: loop {
        let angle = rng.uniform(-MAX_ANGLE, MAX_ANGLE);
        let (sin, cos) = angle.sin_cos();
        let bs = rotated_side(angle);
        let half = bs as f64 / 2.0;
        let steps = (0..DIGITS_PER_CANVAS).map(|i| i as f64 * DIGIT_SPACING);
        let xr = feasible_range(half, size - half, steps.clone().map(|s| s * cos));
        let yr = feasible_range(half, size - half, steps.map(|s| s * sin));
        for _ in 0..PLACEMENT_ATTEMPTS_PER_ANGLE {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Generation { seed, attempts: attempts - 1 });
            }
            let (Some((x_lo, x_hi)), Some((y_lo, y_hi))) = (xr, yr) else {
                continue 'angle;
            };
            let p0 = (rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi));
            let picks: Vec<usize> = (0..DIGITS_PER_CANVAS).map(|_| rng.below(pool.len())).collect();
            let mut anchors = [(0.0, 0.0); DIGITS_PER_CANVAS];
            let mut placements = Vec::with_capacity(DIGITS_PER_CANVAS);
            for (i, &pick) in picks.iter().enumerate() {
                let centre = (
                    p0.0 + i as f64 * DIGIT_SPACING * cos,
                    p0.1 + i as f64 * DIGIT_SPACING * sin,
                );
                anchors[i] = centre;
                let max_corner = (side - bs) as f64;
                placements.push(Placement {
                    source: pick,
                    left: (centre.0 - half).round().clamp(0.0, max_corner) as usize,
                    top: (centre.1 - half).round().clamp(0.0, max_corner) as usize,
                    digit: rotate_digit(&pool[pick].pixels, angle),
                });
            }
            let overlap = (0..placements.len())
                .any(|i| (i + 1..placements.len()).any(|j| masks_overlap(&placements[i], &placements[j], side)));
            if overlap {
                continue;
            }

            let mut canvas = vec![0.0f64; side * side];
            for p in &placements {
                let s = p.digit.side();
                for (i, &v) in p.digit.pixels.data().iter().enumerate() {
                    let dst = &mut canvas[(p.top + i / s) * side + p.left + i % s];
                    *dst = dst.max(v);
                }
            }
            let noise_blocks = place_noise(&mut rng, pool, &mut canvas, side);
            let labels: [u8; DIGITS_PER_CANVAS] = std::array::from_fn(|i| pool[picks[i]].label);
            return Ok(CanvasExample {
                canvas: Tensor::new(&[side, side], canvas)?,
                labels,
                angle,
                seed,
                layout: Some(Layout {
                    anchors,
                    placements,
                    noise_blocks,
                }),
            });
        }
    }
}

/// Composite [`NOISE_BLOCKS`] ink-bearing 6x6 crops of random pool digits.
fn place_noise(rng: &mut Rng, pool: &[MnistDigit], canvas: &mut [f64], side: usize) -> Vec<(usize, usize)> {
    let mut blocks = Vec::with_capacity(NOISE_BLOCKS);
    let span = DIGIT_SIDE - NOISE_SIDE + 1;
    for _ in 0..NOISE_BLOCKS {
        let mut crop = [0.0; NOISE_SIDE * NOISE_SIDE];
        for _ in 0..NOISE_CROP_RETRIES {
            let src = &pool[rng.below(pool.len())].pixels;
            let (cy, cx) = (rng.below(span), rng.below(span));
            for (i, v) in crop.iter_mut().enumerate() {
                *v = src.data()[(cy + i / NOISE_SIDE) * DIGIT_SIDE + cx + i % NOISE_SIDE];
            }
            if crop.iter().sum::<f64>() >= NOISE_MIN_INK {
                break;
            }
        }
        let top = rng.below(side - NOISE_SIDE + 1);
        let left = rng.below(side - NOISE_SIDE + 1);
        for (i, &v) in crop.iter().enumerate() {
            let dst = &mut canvas[(top + i / NOISE_SIDE) * side + left + i % NOISE_SIDE];
            *dst = dst.max(v);
        }
        blocks.push((top, left));
    }
    blocks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            SplitRole::Train => 0,
            SplitRole::Val => 1,
            SplitRole::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub examples: Vec<CanvasExample>,
}

/// Generate `count` canvases for `role`. Example `i` uses the child seed
/// `(split_seed, i)`, so the result does not depend on worker scheduling.
pub fn generate_split(master_seed: u64, role: SplitRole, count: usize, pool: &[MnistDigit]) -> Result<DatasetSplit> {
    let split_seed = Rng::child_seed(master_seed, role.index());
    let examples = (0..count)
        .into_par_iter()
        .map(|i| generate_canvas(Rng::child_seed(split_seed, i as u64), pool))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit { role, examples })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_split_to<W: Write>(w: &mut W, split: &DatasetSplit) -> Result<()> {
    let (h, wd) = match split.examples.first() {
        Some(e) => (e.canvas.shape()[0], e.canvas.shape()[1]),
        None => (CANVAS_SIDE, CANVAS_SIDE),
    };
    if h > u16::MAX as usize || wd > u16::MAX as usize {
        return Err(Error::format("canvas too large for SQMN"));
    }
    w.write_all(SQMN_MAGIC)?;
    w.write_all(&SQMN_VERSION.to_le_bytes())?;
    w.write_all(&(split.examples.len() as u64).to_le_bytes())?;
    w.write_all(&(h as u16).to_le_bytes())?;
    w.write_all(&(wd as u16).to_le_bytes())?;
    let mut buf = Vec::with_capacity(h * wd + 20);
    for e in &split.examples {
        if e.canvas.shape() != [h, wd] {
            return Err(Error::shape("write_split", &[h, wd], e.canvas.shape()));
        }
        buf.clear();
        buf.extend(e.canvas.data().iter().map(|&v| quantize(v)));
        buf.extend_from_slice(&e.labels);
        buf.extend_from_slice(&e.angle.to_le_bytes());
        buf.extend_from_slice(&e.seed.to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_split_from<R: Read>(r: &mut R, role: SplitRole) -> Result<DatasetSplit> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != SQMN_MAGIC {
        return Err(Error::format(format!("bad SQMN magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(truncated)?;
    let version = u16::from_le_bytes(b2);
    if version != SQMN_VERSION {
        return Err(Error::format(format!("unsupported SQMN version {version}")));
    }
    let count = read_u64_le(r)? as usize;
    r.read_exact(&mut b2).map_err(truncated)?;
    let h = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b2).map_err(truncated)?;
    let w = u16::from_le_bytes(b2) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format("zero canvas extent in SQMN header"));
    }
    let mut examples = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; h * w + 4 + 16];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(truncated)?;
        let canvas = buf[..h * w].iter().map(|&b| b as f64 / 255.0).collect();
        let labels: [u8; 4] = buf[h * w..h * w + 4].try_into().unwrap();
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Label { label: bad as usize, classes: 10 });
        }
        let angle = f64::from_le_bytes(buf[h * w + 4..h * w + 12].try_into().unwrap());
        let seed = u64::from_le_bytes(buf[h * w + 12..h * w + 20].try_into().unwrap());
        examples.push(CanvasExample {
            canvas: Tensor::new(&[h, w], canvas)?,
            labels,
            angle,
            seed,
            layout: None,
        });
    }
    Ok(DatasetSplit { role, examples })
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_split_to(&mut w, split)?;
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path, role: SplitRole) -> Result<DatasetSplit> {
    read_split_from(&mut BufReader::new(File::open(path)?), role)
}

/// File name of a split inside a dataset directory.
pub fn split_file_name(role: SplitRole) -> String {
    format!("{}.sqmn", role.name())
}
