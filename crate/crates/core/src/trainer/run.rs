use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{checkpoint_save, export_generator, BestSnapshot, StepRecord, TrainState, Trainer};
use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::imagecore::bicubic_upscale;
use crate::metrics::{mean_std, psnr, MetricContext, MetricReport};
use crate::networks::{FeatureExtractor, Generator};

/// The ten `(alpha, beta, gamma)` sets of the standard hyper-parameter search.
pub const SWEEP_WEIGHT_SETS: [(f64, f64, f64); 10] = [
    (0.25, 0.25, 0.25),
    (0.15, 0.40, 0.35),
    (0.35, 0.20, 0.15),
    (0.05, 0.55, 0.40),
    (0.15, 0.15, 0.65),
    (0.70, 0.20, 0.05),
    (0.50, 0.30, 0.30),
    (0.05, 0.10, 0.75),
    (0.15, 0.70, 0.05),
    (0.45, 0.05, 0.35),
];

pub const DEFAULT_WEIGHT_SET: (f64, f64, f64) = (0.35, 0.20, 0.15);

/// Eval-mode generator scores for each sample, with outputs clamped to [0, 1].
pub fn evaluate_generator(generator: &Generator, samples: &[PairSample], ctx: &MetricContext) -> Result<Vec<MetricReport>> {
    samples
        .iter()
        .map(|s| {
            let sr = generator.super_resolve(&s.lr.to_network_range())?.to_unit_range().clamp_unit();
            Ok(ctx.evaluate(&sr, &s.hr)?.0)
        })
        .collect()
}

/// Scores of plain bicubic upsampling.
pub fn evaluate_bicubic(samples: &[PairSample], scale: usize, ctx: &MetricContext) -> Result<Vec<MetricReport>> {
    samples
        .iter()
        .map(|s| {
            let sr = bicubic_upscale(&s.lr, scale)?.clamp_unit();
            Ok(ctx.evaluate(&sr, &s.hr)?.0)
        })
        .collect()
}

fn mean_psnr(generator: &Generator, samples: &[PairSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let sr = generator.super_resolve(&s.lr.to_network_range())?.to_unit_range().clamp_unit();
        total += psnr(&sr, &s.hr, 1.0)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_iteration: u64,
    pub total_s: f64,
    pub mean_step_s: f64,
    /// Share of steps whose discriminator loss did not rise across its own update.
    pub d_descent_fraction: f64,
    pub checkpoints: Vec<PathBuf>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Trains until the schedule completes or `max_steps` more steps have run.
///
/// With an output directory this appends to `train_log.jsonl`, writes periodic checkpoints
/// under `checkpoints/`, and finishes with `state.ckpt`, `generator.ckpt` and `timing.json`.
/// A numerical failure saves `failure_snapshot.ckpt` before the error is returned.
pub fn run(
    trainer: &Trainer,
    state: &mut TrainState,
    train: &[PairSample],
    val: &[PairSample],
    out_dir: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<RunSummary> {
    let cfg = &trainer.config;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    let started = Instant::now();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut steps = 0u64;
    while state.iteration < cfg.total_iters() && max_steps.is_none_or(|m| steps < m) {
        let idx = state.draw_batch(train.len(), cfg.batch_size)?;
        let batch: Vec<PairSample> = idx.iter().map(|&i| train[i].clone()).collect();
        let record = match trainer.step(state, &batch) {
            Ok(r) => r,
            Err(Error::Numerical { layer, message }) => {
                let message = match out_dir {
                    Some(dir) => {
                        let snap = dir.join("failure_snapshot.ckpt");
                        checkpoint_save(cfg, state, &snap)?;
                        format!("{message} at step {}; state saved to {}", state.iteration, snap.display())
                    }
                    None => format!("{message} at step {}", state.iteration),
                };
                return Err(Error::Numerical { layer, message });
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        records.push(record);
        let it = state.iteration;
        if cfg.validate_every > 0 && it % cfg.validate_every == 0 && !val.is_empty() {
            let p = mean_psnr(&state.generator, val)?;
            if state.best.as_ref().is_none_or(|b| p > b.psnr) {
                state.best = Some(BestSnapshot {
                    iteration: it,
                    psnr: p,
                    generator: state.generator.clone(),
                });
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                let path = dir.join("checkpoints").join(format!("step_{it:08}.ckpt"));
                checkpoint_save(cfg, state, &path)?;
                checkpoints.push(path);
            }
        }
    }
    let total_s = started.elapsed().as_secs_f64();
    let descended = records.iter().filter(|r| r.d_loss_after <= r.d_loss).count();
    let summary = RunSummary {
        steps,
        final_iteration: state.iteration,
        total_s,
        mean_step_s: if steps > 0 { total_s / steps as f64 } else { 0.0 },
        d_descent_fraction: if steps > 0 {
            descended as f64 / steps as f64
        } else {
            1.0
        },
        checkpoints,
        records,
    };
    if let Some(dir) = out_dir {
        if let Some((mut w, path)) = log.take() {
            w.flush().map_err(io_err(&path))?;
        }
        let state_path = dir.join("state.ckpt");
        checkpoint_save(cfg, state, &state_path)?;
        export_generator(&state.generator, &dir.join("generator.ckpt"))?;
        if let Some(b) = &state.best {
            export_generator(&b.generator, &dir.join("best_generator.ckpt"))?;
        }
        let times: Vec<f64> = summary.records.iter().map(|r| r.time_s).collect();
        let (mean, std) = mean_std(&times);
        let timing = serde_json::json!({
            "steps": steps,
            "total_s": total_s,
            "step_mean_s": mean,
            "step_std_s": std,
            "final_iteration": state.iteration,
        });
        let path = dir.join("timing.json");
        fs::write(&path, serde_json::to_string_pretty(&timing).expect("json")).map_err(io_err(&path))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub gmsd: f64,
    /// 1 is the best PSNR.
    pub rank: usize,
    pub is_default: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// In input order.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Rows sorted by rank.
    pub fn ranked(&self) -> Vec<&SweepRow> {
        let mut v: Vec<&SweepRow> = self.rows.iter().collect();
        v.sort_by_key(|r| r.rank);
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,alpha,beta,gamma,psnr,ssim,lpips,gmsd,is_default\n");
        for r in self.ranked() {
            s += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.rank, r.alpha, r.beta, r.gamma, r.psnr, r.ssim, r.lpips, r.gmsd, r.is_default
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| rank | alpha | beta | gamma | PSNR | SSIM | LPIPS | GMSD |\n|---|---|---|---|---|---|---|---|\n");
        for r in self.ranked() {
            let mark = if r.is_default { " (default)" } else { "" };
            s += &format!(
                "| {}{mark} | {:.2} | {:.2} | {:.2} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.rank, r.alpha, r.beta, r.gamma, r.psnr, r.ssim, r.lpips, r.gmsd
            );
        }
        s
    }
}

/// Trains one model per weight set from the same seed and ranks them by validation PSNR.
pub fn run_sweep(
    base: &Trainer,
    weight_sets: &[(f64, f64, f64)],
    train: &[PairSample],
    val: &[PairSample],
    metric_extractor: &FeatureExtractor,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    if weight_sets.is_empty() {
        return Err(Error::config("a sweep needs at least one weight set"));
    }
    if val.is_empty() {
        return Err(Error::Dataset("a sweep needs validation samples".into()));
    }
    let ctx = MetricContext::new(metric_extractor);
    let mut rows = Vec::with_capacity(weight_sets.len());
    for (i, &(alpha, beta, gamma)) in weight_sets.iter().enumerate() {
        let mut cfg = base.config.clone();
        cfg.loss.alpha = alpha;
        cfg.loss.beta = beta;
        cfg.loss.gamma = gamma;
        let trainer = Trainer::with_extractor(cfg, base.extractor.clone())?;
        let mut state = TrainState::new(&trainer.config)?;
        let dir = out_dir.map(|d| d.join(format!("set_{:02}", i + 1)));
        run(&trainer, &mut state, train, val, dir.as_deref(), None)?;
        let reports = evaluate_generator(&state.generator, val, &ctx)?;
        let mean = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>()).0;
        rows.push(SweepRow {
            alpha,
            beta,
            gamma,
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            lpips: mean(|r| r.lpips),
            gmsd: mean(|r| r.gmsd),
            rank: 0,
            is_default: (alpha, beta, gamma) == DEFAULT_WEIGHT_SET,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].psnr.total_cmp(&rows[a].psnr).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    let table = SweepTable { rows };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("sweep.csv");
        fs::write(&path, table.to_csv()).map_err(io_err(&path))?;
        let path = dir.join("sweep.md");
        fs::write(&path, table.to_markdown()).map_err(io_err(&path))?;
    }
    Ok(table)
}
