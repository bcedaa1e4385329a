//! Momentum SGD, checkpoints, metrics, and the command implementations
//! behind the CLI.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::{
    generate_split, load_mnist, read_split, split_file_name, write_split, CanvasExample, DatasetSplit, MnistSplit,
    SplitRole,
};
use crate::error::{Error, Result};
use crate::layers::{Mode, Params};
use crate::models::{argmax_rows, per_digit_error, Model, ModelConfig, ModelKind};
use crate::pgm::GrayImage;
use crate::tensor::{read_u32_le, read_u64_le, truncated, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    /// Train/val/test example counts.
    pub fn split_sizes(self) -> [usize; 3] {
        match self {
            Scale::Desk => [5000, 1000, 1000],
            Scale::Full => [70000, 20000, 2000],
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Scale::Desk => 64,
            Scale::Full => 256,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Precondition(format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate is halved every this many epochs.
    pub halve_every: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub scale: Scale,
}

impl TrainConfig {
    pub fn new(model: ModelKind, d: usize, scale: Scale) -> Self {
        TrainConfig {
            model,
            d,
            epochs: 15,
            batch_size: scale.batch_size(),
            lr: 0.01,
            momentum: 0.9,
            halve_every: 10,
            seed: 0,
            deterministic: false,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.d) {
            return Err(Error::Precondition(format!("d must be in 1..=4, got {}", self.d)));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Precondition("need lr > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.checked_div(self.halve_every).unwrap_or(0);
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// Classical momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumSgd {
    pub velocity: Model,
    pub step: u64,
}

impl MomentumSgd {
    pub fn new(model: &Model) -> Self {
        MomentumSgd {
            velocity: model.zero_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Model, lr: f64, momentum: f64) {
        let grads = grads.tensors();
        for ((v, g), p) in self.velocity.tensors_mut().into_iter().zip(grads).zip(model.tensors_mut()) {
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        }
        self.step += 1;
    }
}

/// Model parameters, optimizer slots and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: MomentumSgd,
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

fn write_table<W: Write>(w: &mut W, tensors: Vec<(String, &Tensor)>) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 20 {
        return Err(Error::format("implausible string length in checkpoint"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::format("checkpoint string is not UTF-8"))
}

/// Read a tensor table into `target`, requiring identical names and shapes.
fn read_table<R: Read>(r: &mut R, target: &mut Model, what: &str) -> Result<()> {
    let count = read_u32_le(r)? as usize;
    let mut slots = target.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::format(format!(
            "{what} table has {count} tensors, model expects {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = read_u32_le(r)? as usize;
        let stored = read_string(r, len)?;
        if &stored != name {
            return Err(Error::format(format!("{what} table: expected {name}, found {stored}")));
        }
        let t = Tensor::read_from(r)?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("checkpoint tensor", slot.shape(), t.shape()));
        }
        **slot = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = self.model.config.to_meta();
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        write_table(w, self.model.named_tensors())?;
        write_table(w, self.optimizer.velocity.named_tensors())?;
        w.write_all(&self.optimizer.step.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32_le(r)?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32_le(r)? as usize;
        let config = ModelConfig::from_meta(&read_string(r, len)?)?;
        // shapes come from the config; the initial values are overwritten
        let mut model = Model::init(config, &mut Rng::new(0))?;
        read_table(r, &mut model, "parameter")?;
        let mut velocity = model.zero_like();
        read_table(r, &mut velocity, "optimizer")?;
        let step = read_u64_le(r)?;
        Ok(Checkpoint {
            model,
            optimizer: MomentumSgd { velocity, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub per_digit_error: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,per_digit_error,wall_seconds";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.3}",
            self.epoch, self.split, self.loss, self.per_digit_error, self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::format(format!("bad metrics row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let row = MetricsRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: f[1].to_string(),
            loss: f[2].parse().map_err(|_| bad())?,
            per_digit_error: f[3].parse().map_err(|_| bad())?,
            wall_seconds: f[4].parse().map_err(|_| bad())?,
        };
        if !(0.0..=1.0).contains(&row.per_digit_error) {
            return Err(bad());
        }
        Ok(row)
    }
}

/// Append rows to a CSV file, writing the header when the file is new.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics file lacks the header"));
    }
    lines.map(MetricsRow::parse).collect()
}

/// Stack canvases into `[B, 1, H, W]` plus their label rows.
pub fn make_batch(examples: &[&CanvasExample]) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let (h, w) = (first.canvas.shape()[0], first.canvas.shape()[1]);
    let mut data = Vec::with_capacity(examples.len() * h * w);
    for e in examples {
        if e.canvas.shape() != [h, w] {
            return Err(Error::shape("make_batch", &[h, w], e.canvas.shape()));
        }
        data.extend_from_slice(e.canvas.data());
    }
    let labels = examples.iter().map(|e| e.labels_usize().to_vec()).collect();
    Ok((Tensor::new(&[examples.len(), 1, h, w], data)?, labels))
}

/// Mean loss and per-digit error in evaluation mode.
pub fn evaluate(model: &Model, examples: &[CanvasExample], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty split".into()));
    }
    let mut loss = 0.0;
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let mut rng = Rng::new(0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&CanvasExample> = chunk.iter().collect();
        let (x, y) = make_batch(&refs)?;
        let pass = model.forward(&x, Mode::Eval, &mut rng)?;
        loss += model.loss_from_logits(&pass.logits, &y)?.0 * chunk.len() as f64;
        preds.extend(argmax_rows(&pass.logits));
        labels.extend(y);
    }
    Ok((loss / examples.len() as f64, per_digit_error(&preds, &labels)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    /// Checkpoint with the lowest validation error.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub final_checkpoint: Checkpoint,
}

/// Train `model` on `train`, validating after each epoch. `on_epoch` sees the
/// rows of each finished epoch (used to stream metrics to disk).
pub fn train_model(
    model: Model,
    train: &[CanvasExample],
    val: &[CanvasExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[MetricsRow]) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("train and val splits must be non-empty".into()));
    }
    let mut model = model;
    let mut opt = MomentumSgd::new(&model);
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let epoch_seed = Rng::child_seed(cfg.seed, epoch as u64);
        Rng::new(epoch_seed).shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = Rng::child_seed(epoch_seed, b as u64 + 1);
            let refs: Vec<&CanvasExample> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = make_batch(&refs)?;
            let pass = model.forward(&x, Mode::Train, &mut Rng::new(batch_seed))?;
            let (loss, grad) = model.loss_from_logits(&pass.logits, &y)?;
            if !loss.is_finite() {
                let seeds: Vec<String> = refs.iter().map(|e| format!("{:#x}", e.seed)).collect();
                log::error!(
                    "non-finite loss at epoch {epoch} batch {b} (batch seed {batch_seed:#x}); example seeds: {}",
                    seeds.join(" ")
                );
                return Err(Error::Diverged { epoch, batch: b, batch_seed });
            }
            let grads = model.backward(&pass, &grad)?;
            opt.update(&mut model, &grads, lr, cfg.momentum);
            loss_sum += loss * idx.len() as f64;
            preds.extend(argmax_rows(&pass.logits));
            labels.extend(y);
            log::debug!("epoch {epoch} batch {b} loss {loss:.4}");
        }
        let (val_loss, val_error) = evaluate(&model, val, cfg.batch_size)?;
        let wall = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        let epoch_rows = [
            MetricsRow {
                epoch: epoch + 1,
                split: "train".into(),
                loss: loss_sum / train.len() as f64,
                per_digit_error: per_digit_error(&preds, &labels),
                wall_seconds: wall,
            },
            MetricsRow {
                epoch: epoch + 1,
                split: "val".into(),
                loss: val_loss,
                per_digit_error: val_error,
                wall_seconds: wall,
            },
        ];
        log::info!(
            "epoch {} lr {lr:.5}: train loss {:.4} err {:.4} | val loss {val_loss:.4} err {val_error:.4} ({:.1}s)",
            epoch + 1,
            epoch_rows[0].loss,
            epoch_rows[0].per_digit_error,
            start.elapsed().as_secs_f64()
        );
        on_epoch(&epoch_rows)?;
        rows.extend(epoch_rows);
        if best.as_ref().is_none_or(|(e, _, _)| val_error < *e) {
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: opt.clone(),
            };
            best = Some((val_error, epoch + 1, ckpt));
        }
    }
    let final_checkpoint = Checkpoint { model, optimizer: opt };
    let (best_val_error, best_epoch, best) = best.unwrap_or((f64::NAN, 0, final_checkpoint.clone()));
    Ok(TrainReport {
        rows,
        best,
        best_epoch,
        best_val_error,
        final_checkpoint,
    })
}

/// `12.3%` style rendering of an error rate.
pub fn format_percent(error: f64) -> String {
    format!("{:.1}%", error * 100.0)
}

pub fn cmd_gen_data(mnist_dir: &Path, data_dir: &Path, scale: Scale, seed: u64) -> Result<Vec<PathBuf>> {
    let train_pool = load_mnist(mnist_dir, MnistSplit::Train)?;
    let test_pool = load_mnist(mnist_dir, MnistSplit::Test)?;
    fs::create_dir_all(data_dir)?;
    let [n_train, n_val, n_test] = scale.split_sizes();
    let mut written = Vec::new();
    for (role, count, pool) in [
        (SplitRole::Train, n_train, &train_pool),
        (SplitRole::Val, n_val, &train_pool),
        (SplitRole::Test, n_test, &test_pool),
    ] {
        let split = generate_split(seed, role, count, pool)?;
        let path = data_dir.join(split_file_name(role));
        write_split(&path, &split)?;
        log::info!("wrote {} examples to {}", count, path.display());
        written.push(path);
    }
    Ok(written)
}

pub fn load_split(data_dir: &Path, role: SplitRole) -> Result<DatasetSplit> {
    read_split(&data_dir.join(split_file_name(role)), role)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_val_error: f64,
    pub test_error: f64,
}

/// Train from dataset files, writing `metrics.csv`, `best.ckpt` and
/// `final.ckpt` into `out_dir`; the best checkpoint is scored on the test split.
pub fn cmd_train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_split(data_dir, SplitRole::Train)?;
    let val = load_split(data_dir, SplitRole::Val)?;
    let test = load_split(data_dir, SplitRole::Test)?;
    fs::create_dir_all(out_dir)?;
    let metrics = out_dir.join("metrics.csv");
    let model_cfg = ModelConfig::standard(cfg.model, cfg.d)?;
    let model = Model::init(model_cfg, &mut Rng::child(cfg.seed, u64::MAX))?;
    let report = train_model(model, &train.examples, &val.examples, cfg, |rows| {
        append_metrics(&metrics, rows)
    })?;
    let best_checkpoint = out_dir.join("best.ckpt");
    report.best.save(&best_checkpoint)?;
    report.final_checkpoint.save(&out_dir.join("final.ckpt"))?;
    let test_error = evaluate(&report.best.model, &test.examples, cfg.batch_size)?.1;
    Ok(TrainOutcome {
        best_checkpoint,
        metrics,
        best_val_error: report.best_val_error,
        test_error,
    })
}

pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, role: SplitRole) -> Result<f64> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let split = load_split(data_dir, role)?;
    let side = ckpt.model.config.canvas;
    if let Some(e) = split.examples.first() {
        if e.canvas.shape() != [side, side] {
            return Err(Error::Precondition(format!(
                "checkpoint expects {side}x{side} canvases, dataset has {:?}",
                e.canvas.shape()
            )));
        }
    }
    Ok(evaluate(&ckpt.model, &split.examples, 64)?.1)
}

/// Classifier inputs of one example: `[1, s, s]` per step, in time order.
pub fn glimpses(model: &Model, example: &CanvasExample) -> Result<Vec<Tensor>> {
    if model.kind() != ModelKind::LstmStnCnn {
        return Err(Error::Precondition(format!("glimpses need an LSTM-STN model, got {}", model.kind())));
    }
    let (x, _) = make_batch(&[example])?;
    let pass = model.forward(&x, Mode::Eval, &mut Rng::new(0))?;
    Ok((0..model.config.digits).map(|t| pass.view(t)).collect())
}

/// Mean glimpse intensity over mean canvas intensity.
pub fn ink_focus(model: &Model, examples: &[CanvasExample]) -> Result<f64> {
    let (mut glimpse_ink, mut canvas_ink) = (0.0, 0.0);
    for e in examples {
        let g = glimpses(model, e)?;
        glimpse_ink += g.iter().map(Tensor::mean).sum::<f64>() / g.len() as f64;
        canvas_ink += e.canvas.mean();
    }
    Ok(glimpse_ink / canvas_ink)
}

/// Write `canvas.pgm` and `glimpse_{t}.pgm` for one example.
pub fn cmd_dump_glimpses(
    checkpoint: &Path,
    data_dir: &Path,
    role: SplitRole,
    index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let split = load_split(data_dir, role)?;
    let example = split.examples.get(index).ok_or_else(|| {
        Error::Precondition(format!("example {index} out of range ({} in split)", split.examples.len()))
    })?;
    dump_glimpses(&ckpt.model, example, out_dir)
}

pub fn dump_glimpses(model: &Model, example: &CanvasExample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let views = glimpses(model, example)?;
    fs::create_dir_all(out_dir)?;
    let mut paths = vec![out_dir.join("canvas.pgm")];
    GrayImage::from_tensor(&example.canvas)?.write(&paths[0])?;
    for (t, v) in views.iter().enumerate() {
        let p = out_dir.join(format!("glimpse_{t}.pgm"));
        GrayImage::from_tensor(v)?.write(&p)?;
        paths.push(p);
    }
    Ok(paths)
}
