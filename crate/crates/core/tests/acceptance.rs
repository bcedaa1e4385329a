//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=1,3,8` to run a subset while iterating; every other
//! criterion then prints SKIP and does not count as passed.
//!
//! A FAIL line is a reported outcome, not a test crash, so the process exits
//! zero unless `ACCEPTANCE_STRICT=1` is set.

mod support;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use stn_core::dataset::{
    generate_canvas, generate_split, load_mnist, read_split_from, write_split_to, CanvasExample, DatasetSplit,
    MnistSplit, SplitRole,
};
use stn_core::downsample::{avg_downsample, n_points, DownsampleFactor};
use stn_core::models::{Model, ModelConfig, ModelKind};
use stn_core::pgm::GrayImage;
use stn_core::stn::{affine_grid, bilinear_sample, AffineParams, SampleGrid};
use stn_core::train::{dump_glimpses, evaluate, ink_focus, train_model, Checkpoint, Scale, TrainConfig, TrainReport};
use stn_core::{Rng, Tensor};
use support::{canvas_violation, gradient_cases, mnist_dir};

type Verdict = Result<String, String>;

struct Runner {
    selected: Option<Vec<u32>>,
    results: Vec<(u32, Option<bool>)>,
}

impl Runner {
    fn new() -> Self {
        let selected = std::env::var("ACCEPTANCE_ONLY")
            .ok()
            .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
        Runner {
            selected,
            results: Vec::new(),
        }
    }

    fn wants(&self, id: u32) -> bool {
        self.selected.as_ref().is_none_or(|s| s.contains(&id))
    }

    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Verdict) {
        if !self.wants(id) {
            println!("criterion {id} SKIP {name}");
            self.results.push((id, None));
            return;
        }
        let start = Instant::now();
        let verdict = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id} {tag} {name}: {detail} [{secs:.1}s]");
        self.results.push((id, Some(verdict.is_ok())));
    }
}

/// The bilinear kernel written out literally: a double sum over every source pixel.
fn literal_sample(u: &Tensor, grid: &SampleGrid) -> Tensor {
    let (c, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let (oh, ow) = (grid.out_h(), grid.out_w());
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for r in 0..oh {
        for q in 0..ow {
            let (xs, ys) = grid.source(r, q);
            let x = (xs + 1.0) * (w - 1) as f64 / 2.0;
            let y = (ys + 1.0) * (h - 1) as f64 / 2.0;
            for ch in 0..c {
                let mut v = 0.0;
                for n in 0..h {
                    for m in 0..w {
                        v += u.data()[(ch * h + n) * w + m]
                            * (1.0 - (x - m as f64).abs()).max(0.0)
                            * (1.0 - (y - n as f64).abs()).max(0.0);
                    }
                }
                out.data_mut()[(ch * oh + r) * ow + q] = v;
            }
        }
    }
    out
}

fn sampler_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (c, h, w) = (1 + rng.below(3), 2 + rng.below(30), 2 + rng.below(30));
        let (oh, ow) = (1 + rng.below(12), 1 + rng.below(12));
        let u = Tensor::from_fn(&[c, h, w], |_| rng.unit());
        let coords = Tensor::from_fn(&[oh, ow, 2], |_| rng.uniform(-1.3, 1.3));
        let grid = SampleGrid::from_coords(coords).unwrap();
        let fast = bilinear_sample(&u, &grid).map_err(|e| e.to_string())?;
        worst = worst.max(fast.max_abs_diff(&literal_sample(&u, &grid)));
    }
    let secs = start.elapsed().as_secs_f64();
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:e} > 1e-12"));
    }
    if secs >= 5.0 {
        return Err(format!("took {secs:.2}s (limit 5s)"));
    }
    Ok(format!("200 instances, max deviation {worst:e}, {secs:.2}s"))
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut failed = Vec::new();
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    for (name, case) in gradient_cases::ALL {
        if let Err(e) = panic::catch_unwind(case) {
            let msg = e.downcast_ref::<String>().cloned().unwrap_or_default();
            failed.push(format!("{name}: {msg}"));
        }
    }
    panic::set_hook(hook);
    let secs = start.elapsed().as_secs_f64();
    if !failed.is_empty() {
        return Err(failed.join("; "));
    }
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s (limit 120s)"));
    }
    Ok(format!(
        "{} backward ops x 5 seeds within 1e-4 relative error, {secs:.1}s",
        gradient_cases::ALL.len()
    ))
}

fn identity_transform() -> Verdict {
    let mut rng = Rng::new(3);
    let d1 = DownsampleFactor::new(1).unwrap();
    let mut worst: f64 = 0.0;
    for side in [100, 48, 7] {
        let u = Tensor::from_fn(&[1, side, side], |_| rng.unit());
        let v = bilinear_sample(&u, &affine_grid(&AffineParams::IDENTITY, side, side)).unwrap();
        let v = avg_downsample(&v, d1).unwrap();
        worst = worst.max(v.max_abs_diff(&u));
    }
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:e}"));
    }
    Ok(format!("100x100, 48x48, 7x7 reproduced, max deviation {worst:e}"))
}

fn pixel_counts() -> Verdict {
    let mut checked = Vec::new();
    for (h, w) in [(100, 100), (48, 48)] {
        for d in 1..=4 {
            if h % d != 0 {
                continue;
            }
            let f = DownsampleFactor::new(d).unwrap();
            let out = avg_downsample(&Tensor::zeros(&[1, h, w]), f).map_err(|e| e.to_string())?;
            let expected = (h / d) * (w / d);
            if out.len() != expected || n_points(h, w, f) != expected {
                return Err(format!("{h}x{w} d={d}: {} pixels, expected {expected}", out.len()));
            }
            checked.push(format!("{h}/{d}"));
        }
    }
    Ok(format!("exact for {}", checked.join(", ")))
}

fn dataset_invariants(pool: &[stn_core::dataset::MnistDigit]) -> Verdict {
    let start = Instant::now();
    let examples: Vec<CanvasExample> = (0..1000)
        .map(|i| generate_canvas(Rng::child_seed(31337, i), pool))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for (i, e) in examples.iter().enumerate() {
        if let Some(v) = canvas_violation(e, pool) {
            return Err(format!("canvas {i}: {v}"));
        }
    }
    for i in [0u64, 499, 999] {
        if generate_canvas(Rng::child_seed(31337, i), pool).unwrap() != examples[i as usize] {
            return Err(format!("canvas {i} not reproducible"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s (limit 60s)"));
    }
    Ok(format!("1000 canvases valid and reproducible, {secs:.1}s"))
}

struct DeskData {
    train: DatasetSplit,
    val: DatasetSplit,
    test: DatasetSplit,
}

fn desk_data() -> DeskData {
    let train_pool = load_mnist(&mnist_dir(), MnistSplit::Train).unwrap();
    let test_pool = load_mnist(&mnist_dir(), MnistSplit::Test).unwrap();
    let [a, b, c] = Scale::Desk.split_sizes();
    DeskData {
        train: generate_split(0, SplitRole::Train, a, &train_pool).unwrap(),
        val: generate_split(0, SplitRole::Val, b, &train_pool).unwrap(),
        test: generate_split(0, SplitRole::Test, c, &test_pool).unwrap(),
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 0.9;

struct Trained {
    kind: ModelKind,
    seed: u64,
    report: TrainReport,
    test_error: f64,
}

fn train_one(data: &DeskData, kind: ModelKind, seed: u64) -> Trained {
    let cfg = TrainConfig {
        seed,
        deterministic: true,
        ..TrainConfig::new(kind, 2, Scale::Desk)
    };
    let model = Model::init(ModelConfig::standard(kind, 2).unwrap(), &mut Rng::child(seed, u64::MAX)).unwrap();
    let start = Instant::now();
    let report = train_model(model, &data.train.examples, &data.val.examples, &cfg, |_| Ok(())).unwrap();
    let test_error = evaluate(&report.best.model, &data.test.examples, 64).unwrap().1;
    let fifth = report.rows.iter().find(|r| r.epoch == 5 && r.split == "train").map_or(f64::NAN, |r| r.loss);
    println!(
        "  trained {kind} seed {seed}: best val {:.1}% (epoch {}), test {:.1}%, epoch-5 train loss {fifth:.4} vs ln 10 = {:.4}, {:.0}s",
        report.best_val_error * 100.0,
        report.best_epoch,
        test_error * 100.0,
        10f64.ln(),
        start.elapsed().as_secs_f64()
    );
    Trained {
        kind,
        seed,
        report,
        test_error,
    }
}

fn learning_signal(runs: &[Trained], secs: f64) -> Verdict {
    let lstm: Vec<&Trained> = runs.iter().filter(|r| r.kind == ModelKind::LstmStnCnn).collect();
    let cnn: Vec<&Trained> = runs.iter().filter(|r| r.kind == ModelKind::Cnn).collect();
    let val: Vec<String> = lstm.iter().map(|r| format!("{:.1}%", r.report.best_val_error * 100.0)).collect();
    let pairs: Vec<String> = lstm
        .iter()
        .zip(&cnn)
        .map(|(l, c)| format!("{:.1}% vs {:.1}%", l.test_error * 100.0, c.test_error * 100.0))
        .collect();
    let wins = lstm.iter().zip(&cnn).filter(|(l, c)| l.test_error <= c.test_error).count();
    let detail = format!(
        "LSTM-STN val error per seed [{}] (need <= 15.0% and < {:.0}%); test LSTM-STN vs CNN [{}], LSTM-STN <= CNN in {wins}/3 (need 2); {:.0} min total (target 30)",
        val.join(", "),
        CHANCE * 100.0,
        pairs.join(", "),
        secs / 60.0
    );
    let val_ok = !lstm.is_empty() && lstm.iter().all(|r| r.report.best_val_error <= 0.15);
    if val_ok && wins >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn glimpse_focus(runs: &[Trained], data: &DeskData) -> Verdict {
    let mut ratios = Vec::new();
    for r in runs.iter().filter(|r| r.kind == ModelKind::LstmStnCnn) {
        let ratio = ink_focus(&r.report.best.model, &data.test.examples[..50]).map_err(|e| e.to_string())?;
        ratios.push((r.seed, ratio));
    }
    let untrained = Model::init(
        ModelConfig::standard(ModelKind::LstmStnCnn, 2).unwrap(),
        &mut Rng::new(0),
    )
    .unwrap();
    let baseline = ink_focus(&untrained, &data.test.examples[..50]).map_err(|e| e.to_string())?;
    let shown: Vec<String> = ratios.iter().map(|(s, r)| format!("seed {s}: {r:.2}x")).collect();
    let detail = format!(
        "glimpse/canvas ink density over 50 test canvases [{}] (need > 1.5x; untrained model {baseline:.2}x)",
        shown.join(", ")
    );
    if !ratios.is_empty() && ratios.iter().all(|&(_, r)| r > 1.5) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn format_round_trips(model: &Model, examples: &[CanvasExample]) -> Verdict {
    let split = DatasetSplit {
        role: SplitRole::Test,
        examples: examples.to_vec(),
    };
    let mut first = Vec::new();
    write_split_to(&mut first, &split).map_err(|e| e.to_string())?;
    let back = read_split_from(&mut first.as_slice(), SplitRole::Test).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    write_split_to(&mut second, &back).map_err(|e| e.to_string())?;
    if first != second {
        return Err("SQMN second write differs".into());
    }

    let ckpt = Checkpoint {
        optimizer: stn_core::train::MomentumSgd::new(model),
        model: model.clone(),
    };
    let mut c1 = Vec::new();
    ckpt.write_to(&mut c1).map_err(|e| e.to_string())?;
    let restored = Checkpoint::read_from(&mut c1.as_slice()).map_err(|e| e.to_string())?;
    let mut c2 = Vec::new();
    restored.write_to(&mut c2).map_err(|e| e.to_string())?;
    if c1 != c2 {
        return Err("CKPT second write differs".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = dump_glimpses(model, &examples[0], dir.path()).map_err(|e| e.to_string())?;
    if files.len() != 5 {
        return Err(format!("{} PGM files, expected 5", files.len()));
    }
    for f in &files {
        let img = GrayImage::decode(&std::fs::read(f).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if img.width == 0 || img.height == 0 {
            return Err(format!("{} is empty", f.display()));
        }
    }
    Ok(format!(
        "SQMN {} bytes and CKPT {} bytes rewrite identically; 5 PGM files decode as P5",
        first.len(),
        c1.len()
    ))
}

fn main() {
    let mut runner = Runner::new();
    runner.run(1, "sampler equals the literal double sum", sampler_oracle);
    runner.run(2, "gradient suite", gradient_suite);
    runner.run(3, "identity transform reproduces the input", identity_transform);
    runner.run(4, "down-sampled pixel counts", pixel_counts);
    runner.run(5, "dataset invariants", || {
        let pool = load_mnist(&mnist_dir(), MnistSplit::Train).map_err(|e| e.to_string())?;
        dataset_invariants(&pool)
    });

    let needs_training = [6, 7, 8].iter().any(|&id| runner.wants(id));
    let data = needs_training.then(desk_data);
    let mut runs = Vec::new();
    if runner.wants(6) || runner.wants(7) {
        let data = data.as_ref().unwrap();
        let start = Instant::now();
        for seed in SEEDS {
            runs.push(train_one(data, ModelKind::LstmStnCnn, seed));
            if runner.wants(6) {
                runs.push(train_one(data, ModelKind::Cnn, seed));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        runner.run(6, "desk-scale learning signal", || learning_signal(&runs, secs));
    } else {
        runner.run(6, "desk-scale learning signal", || unreachable!());
    }
    runner.run(7, "glimpses concentrate ink", || glimpse_focus(&runs, data.as_ref().unwrap()));
    runner.run(8, "format round-trips", || {
        let data = data.as_ref().unwrap();
        let model = match runs.first() {
            Some(r) => r.report.best.model.clone(),
            None => Model::init(ModelConfig::standard(ModelKind::LstmStnCnn, 2).unwrap(), &mut Rng::new(1)).unwrap(),
        };
        format_round_trips(&model, &data.test.examples[..10])
    });

    let failed: Vec<u32> = runner
        .results
        .iter()
        .filter(|(_, r)| *r == Some(false))
        .map(|(id, _)| *id)
        .collect();
    let passed = runner.results.iter().filter(|(_, r)| *r == Some(true)).count();
    println!("acceptance: {passed} passed, {} failed, {} skipped", failed.len(), runner.results.len() - passed - failed.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
