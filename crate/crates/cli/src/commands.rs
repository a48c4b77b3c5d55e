use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use endosr_core::data::{
    build_manifest, entry_degradation, list_images, load_pair, split_manifest, DatasetManifest, ManifestEntry,
    PairSample, Split,
};
use endosr_core::imagecore::{bicubic_upscale, degrade as degrade_image, load_png, save_png, ImageTensor};
use endosr_core::metrics::{mean_std, MetricContext, MetricReport, PerceptualConfig};
use endosr_core::networks::{Checkpoint, RecordData};
use endosr_core::stats::{mos_aggregate, wilcoxon_signed_rank, zscore_summary, SignedRankResult, ZScoreSummary};
use endosr_core::trainer::{
    checkpoint_load, load_generator, run as run_training, run_sweep, TrainState, Trainer,
};
use endosr_core::{Error, Result};
use serde::Serialize;

use crate::config::{Resolved, SplitChoice};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        other => Error::input(format!("{}: {other:?}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn data_root(resolved: &Resolved) -> Result<&Path> {
    resolved
        .config
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::config("no dataset given; pass --data/--in or set data.root"))
}

fn with_png_extension(rel: &str) -> PathBuf {
    Path::new(rel).with_extension("png")
}

fn class_of(rel: &str) -> String {
    Path::new(rel)
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct DegradeRecord {
    path: String,
    lr_path: String,
    class: String,
    hr_size: (usize, usize),
    lr_size: (usize, usize),
    seed: u64,
}

pub fn degrade(resolved: &Resolved, out: &Path, progress: bool) -> Result<()> {
    let root = data_root(resolved)?;
    let cfg = resolved.config.degradation()?;
    let images = list_images(root)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", root.display())));
    }
    fs::create_dir_all(out).map_err(io(out))?;
    let mut lines = String::new();
    for rel in &images {
        let hr = load_png(&root.join(rel))?;
        let entry = ManifestEntry {
            path: rel.clone(),
            class: class_of(rel),
            split: Split::Train,
        };
        let ecfg = entry_degradation(&entry, &cfg);
        let lr = degrade_image(&hr, &ecfg)?;
        let lr_rel = with_png_extension(rel);
        save_png(&lr, &out.join(&lr_rel))?;
        let rec = DegradeRecord {
            path: rel.clone(),
            lr_path: lr_rel.to_string_lossy().replace('\\', "/"),
            class: entry.class,
            hr_size: (hr.width(), hr.height()),
            lr_size: (lr.width(), lr.height()),
            seed: ecfg.seed,
        };
        lines += &serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        lines.push('\n');
    }
    let manifest = out.join("manifest.jsonl");
    fs::write(&manifest, lines).map_err(io(&manifest))?;
    resolved.write(out)?;
    if progress {
        eprintln!("degraded {} images at {}x into {}", images.len(), cfg.scale, out.display());
    }
    Ok(())
}

/// Class-aware manifest with splits assigned.
fn split_dataset(resolved: &Resolved) -> Result<DatasetManifest> {
    let d = &resolved.config.data;
    let min = (d.min_width > 0 || d.min_height > 0).then_some((d.min_width, d.min_height));
    let m = build_manifest(data_root(resolved)?, d.classes.as_deref(), min)?;
    split_manifest(&m, d.split, d.fold, d.n_folds, d.split_seed)
}

fn load_entries(resolved: &Resolved, manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<PairSample>> {
    let cfg = resolved.config.degradation()?;
    let cache = resolved.config.data.cache.as_deref();
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| load_pair(manifest, e, &cfg, cache))
        .collect()
}

#[derive(Serialize)]
struct TrainReport {
    steps: u64,
    final_iteration: u64,
    total_iterations: u64,
    train_images: usize,
    val_images: usize,
    mean_step_s: f64,
    d_descent_fraction: f64,
    resumed_from: Option<PathBuf>,
}

pub fn train(resolved: &Resolved, out: &Path, progress: bool) -> Result<()> {
    let cfg = &resolved.config;
    resolved.config.check_scale(cfg.train.generator.scale, "train.generator.scale")?;
    let trainer = Trainer::new(cfg.train.clone())?;
    let manifest = split_dataset(resolved)?;
    let train_set = load_entries(resolved, &manifest, Some(Split::Train))?;
    let val_set = load_entries(resolved, &manifest, Some(Split::Val))?;
    if train_set.is_empty() {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    let mut state = match &cfg.run.resume {
        Some(path) => {
            let (saved, state) = checkpoint_load(path)?;
            if saved.generator != cfg.train.generator || saved.discriminator != cfg.train.discriminator {
                return Err(Error::config(format!(
                    "{} was trained with a different network layout",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::new(&trainer.config)?,
    };
    resolved.write(out)?;
    fs::write(out.join("manifest.jsonl"), manifest.to_jsonl()).map_err(io(out))?;
    if progress {
        eprintln!(
            "training on {} images ({} validation) from step {} of {}",
            train_set.len(),
            val_set.len(),
            state.iteration,
            trainer.config.total_iters()
        );
    }
    let summary = run_training(&trainer, &mut state, &train_set, &val_set, Some(out), cfg.run.max_steps)?;
    let report = TrainReport {
        steps: summary.steps,
        final_iteration: summary.final_iteration,
        total_iterations: trainer.config.total_iters(),
        train_images: train_set.len(),
        val_images: val_set.len(),
        mean_step_s: summary.mean_step_s,
        d_descent_fraction: summary.d_descent_fraction,
        resumed_from: cfg.run.resume.clone(),
    };
    write_json(&out.join("summary.json"), &report)?;
    if progress {
        if let Some(r) = summary.records.last() {
            eprintln!(
                "step {}: d_loss {:.4}, g_total {:.4} (adv {:.4}, pixel {:.4}, content {:.4}, texture {:.4})",
                r.iter + 1,
                r.d_loss,
                r.g_total,
                r.g_adv,
                r.g_pixel,
                r.g_content,
                r.g_texture
            );
        }
        eprintln!("{} steps in {:.1}s; outputs in {}", summary.steps, summary.total_s, out.display());
    }
    Ok(())
}

fn eval_samples(resolved: &Resolved) -> Result<Vec<PairSample>> {
    let split = match resolved.config.eval.split {
        SplitChoice::All => None,
        SplitChoice::Train => Some(Split::Train),
        SplitChoice::Val => Some(Split::Val),
        SplitChoice::Test => Some(Split::Test),
    };
    let manifest = match split {
        Some(_) => split_dataset(resolved)?,
        None => {
            let root = data_root(resolved)?;
            let entries: Vec<ManifestEntry> = list_images(root)?
                .into_iter()
                .map(|p| ManifestEntry {
                    class: class_of(&p),
                    path: p,
                    split: Split::Train,
                })
                .collect();
            if entries.is_empty() {
                return Err(Error::Dataset(format!("no images under {}", root.display())));
            }
            DatasetManifest {
                root: root.to_path_buf(),
                entries,
            }
        }
    };
    let samples = load_entries(resolved, &manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Dataset("no images in the selected split".into()));
    }
    Ok(samples)
}

fn load_sr(dir: &Path, rel: &str, hr: &ImageTensor) -> Result<ImageTensor> {
    let direct = dir.join(rel);
    let path = if direct.exists() { direct } else { dir.join(with_png_extension(rel)) };
    if !path.exists() {
        return Err(Error::input(format!("no SR image for '{rel}' in {}", dir.display())));
    }
    let img = load_png(&path)?;
    let img = if img.channels() == 1 && hr.channels() == 3 {
        ImageTensor::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))
    } else {
        img
    };
    if img.dims() != hr.dims() {
        return Err(Error::input(format!(
            "SR image {} is {:?}, expected {:?}",
            path.display(),
            img.dims(),
            hr.dims()
        )));
    }
    Ok(img)
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn map_stem(rel: &str) -> String {
    with_png_extension(rel).with_extension("").to_string_lossy().replace(['/', '\\'], "__")
}

pub fn eval(resolved: &Resolved, out: &Path, progress: bool) -> Result<()> {
    let cfg = &resolved.config;
    let scale = cfg.degradation.scale;
    let generator = match &cfg.eval.checkpoint {
        Some(p) => {
            let g = load_generator(p)?;
            cfg.check_scale(g.config.scale, &format!("checkpoint {}", p.display()))?;
            Some(g)
        }
        None => None,
    };
    let samples = eval_samples(resolved)?;
    let extractor = cfg.metric.extractor.load()?;
    let ctx = MetricContext {
        perceptual: PerceptualConfig::for_extractor(&extractor.config),
        extractor: &extractor,
        color: cfg.metric.color,
        peak: cfg.metric.peak,
    };
    fs::create_dir_all(out).map_err(io(out))?;
    resolved.write(out)?;
    let mut methods: Vec<String> = vec!["bicubic".into()];
    if generator.is_some() {
        methods.push("model".into());
    }
    if cfg.eval.sr_dir.is_some() {
        if methods.contains(&cfg.eval.method) {
            return Err(Error::config(format!("method name '{}' is reserved", cfg.eval.method)));
        }
        methods.push(cfg.eval.method.clone());
    }
    let mut per_image: Vec<(String, String, MetricReport)> = Vec::new();
    for s in &samples {
        for method in &methods {
            let sr = match method.as_str() {
                "bicubic" => bicubic_upscale(&s.lr, scale)?.clamp_unit(),
                "model" => {
                    let g = generator.as_ref().expect("model method implies a generator");
                    let sr = g.super_resolve(&s.lr.to_network_range())?.to_unit_range().clamp_unit();
                    save_png(&sr, &out.join("sr").join("model").join(with_png_extension(&s.source_path)))?;
                    sr
                }
                _ => load_sr(cfg.eval.sr_dir.as_deref().expect("sr_dir"), &s.source_path, &s.hr)?,
            };
            let (report, smap, gmap) = ctx.evaluate(&sr, &s.hr)?;
            if cfg.eval.maps {
                let dir = out.join("maps").join(method);
                let stem = map_stem(&s.source_path);
                smap.save_png(&dir.join(format!("{stem}_ssim.png")))?;
                gmap.save_png(&dir.join(format!("{stem}_gms.png")))?;
            }
            per_image.push((s.source_path.clone(), method.clone(), report));
        }
    }
    let path = out.join("per_image.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["image_id", "method", "metric", "value"]).map_err(csv_err(&path))?;
    for (id, method, r) in &per_image {
        for name in MetricReport::NAMES {
            let v = r.get(name).expect("known metric");
            w.write_record([id.as_str(), method.as_str(), name, &fmt_value(v)])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;
    let path = out.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["metric", "scale", "method", "mean", "std", "n"]).map_err(csv_err(&path))?;
    for name in MetricReport::NAMES {
        for method in &methods {
            let vals: Vec<f64> = per_image
                .iter()
                .filter(|(_, m, _)| m == method)
                .map(|(_, _, r)| r.get(name).expect("known metric"))
                .collect();
            let (mean, std) = mean_std(&vals);
            w.write_record([
                name,
                &scale.to_string(),
                method.as_str(),
                &fmt_value(mean),
                &fmt_value(std),
                &vals.len().to_string(),
            ])
            .map_err(csv_err(&path))?;
            if progress {
                eprintln!("{name:>6} {method:>10}: {} ± {}", fmt_value(mean), fmt_value(std));
            }
        }
    }
    w.flush().map_err(io(&path))?;
    Ok(())
}

/// metric → method → image id → value
type Scores = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

fn read_scores(paths: &[PathBuf]) -> Result<Scores> {
    let mut scores: Scores = BTreeMap::new();
    for path in paths {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let headers = r.headers().map_err(csv_err(path))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::input(format!("{}: missing column '{name}'", path.display())))
        };
        let (ci, cm, cx, cv) = (col("image_id")?, col("method")?, col("metric")?, col("value")?);
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err(path))?;
            let value: f64 = rec[cv].trim().parse().map_err(|_| {
                Error::input(format!("{} row {}: bad value '{}'", path.display(), line + 2, &rec[cv]))
            })?;
            let slot = scores
                .entry(rec[cx].to_string())
                .or_default()
                .entry(rec[cm].to_string())
                .or_default();
            if slot.insert(rec[ci].to_string(), value).is_some() {
                return Err(Error::input(format!(
                    "duplicate score for image '{}', method '{}', metric '{}'",
                    &rec[ci], &rec[cm], &rec[cx]
                )));
            }
        }
    }
    Ok(scores)
}

#[derive(Serialize)]
struct PairResult {
    metric: String,
    pair: String,
    method_a: String,
    method_b: String,
    /// Two-sided normal-approximation p.
    p: f64,
    #[serde(flatten)]
    test: SignedRankResult,
}

#[derive(Serialize)]
struct ZRow {
    metric: String,
    method: String,
    #[serde(flatten)]
    summary: ZScoreSummary,
}

#[derive(Serialize)]
struct MosRow {
    method: String,
    question: String,
    n: usize,
    mean: f64,
    std: f64,
    max: f64,
    min: f64,
}

fn compare(metric: &str, a: &str, b: &str, sa: &BTreeMap<String, f64>, sb: &BTreeMap<String, f64>) -> Result<PairResult> {
    let ids_a: BTreeSet<&String> = sa.keys().collect();
    let ids_b: BTreeSet<&String> = sb.keys().collect();
    if ids_a != ids_b {
        let odd: Vec<&str> = ids_a.symmetric_difference(&ids_b).map(|s| s.as_str()).collect();
        return Err(Error::input(format!(
            "{metric}: methods '{a}' and '{b}' cover different images; unmatched ids: {}",
            odd.join(", ")
        )));
    }
    let mut deltas = Vec::with_capacity(sa.len());
    for (id, va) in sa {
        let d = va - sb[id];
        if !d.is_finite() {
            return Err(Error::input(format!(
                "{metric}: difference for image '{id}' between '{a}' and '{b}' is not finite"
            )));
        }
        deltas.push(d);
    }
    let test = wilcoxon_signed_rank(&deltas)
        .map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{metric}, {a} vs {b}: {m}")),
            other => other,
        })?;
    Ok(PairResult {
        metric: metric.to_string(),
        pair: format!("{a} vs {b}"),
        method_a: a.to_string(),
        method_b: b.to_string(),
        p: test.p_normal,
        test,
    })
}

pub fn stats(resolved: &Resolved, out: &Path, progress: bool) -> Result<()> {
    let cfg = &resolved.config.stats;
    if cfg.inputs.is_empty() && cfg.mos.is_none() {
        return Err(Error::config("stats needs --input score CSVs or --mos"));
    }
    fs::create_dir_all(out).map_err(io(out))?;
    resolved.write(out)?;
    if !cfg.inputs.is_empty() {
        let scores = read_scores(&cfg.inputs)?;
        let metrics: Vec<String> = if cfg.metrics.is_empty() {
            scores.keys().cloned().collect()
        } else {
            cfg.metrics.clone()
        };
        let mut results = Vec::new();
        let mut zrows = Vec::new();
        for metric in &metrics {
            let by_method = scores
                .get(metric)
                .ok_or_else(|| Error::input(format!("no scores for metric '{metric}'")))?;
            let pairs: Vec<(String, String)> = if cfg.pairs.is_empty() {
                let names: Vec<&String> = by_method.keys().collect();
                let mut v = Vec::new();
                for i in 0..names.len() {
                    for j in i + 1..names.len() {
                        v.push((names[i].clone(), names[j].clone()));
                    }
                }
                v
            } else {
                cfg.pairs.clone()
            };
            if pairs.is_empty() {
                return Err(Error::input(format!("metric '{metric}' needs at least two methods")));
            }
            for (a, b) in &pairs {
                let get = |m: &String| {
                    by_method
                        .get(m)
                        .ok_or_else(|| Error::input(format!("no '{metric}' scores for method '{m}'")))
                };
                let r = compare(metric, a, b, get(a)?, get(b)?)?;
                if progress {
                    eprintln!(
                        "{metric:>6} {:<24} n={:<3} W={:<7} z={:>7.3} p={:.4}",
                        r.pair, r.test.n, r.test.w, r.test.z, r.p
                    );
                }
                results.push(r);
            }
            for (method, vals) in by_method {
                let v: Vec<f64> = vals.values().copied().collect();
                if v.len() >= 4 && v.iter().all(|x| x.is_finite()) {
                    if let Ok(summary) = zscore_summary(&v) {
                        zrows.push(ZRow {
                            metric: metric.clone(),
                            method: method.clone(),
                            summary,
                        });
                    }
                }
            }
        }
        write_json(&out.join("significance.json"), &results)?;
        write_json(&out.join("zscores.json"), &zrows)?;
    }
    if let Some(path) = &cfg.mos {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err(path))?;
            if rec.len() < 3 {
                return Err(Error::input(format!("{}: rows need method, question, score", path.display())));
            }
            let score: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("{}: bad score '{}'", path.display(), &rec[2])))?;
            records.push((rec[0].to_string(), rec[1].to_string(), score));
        }
        let table = mos_aggregate(&records)?;
        let rows: Vec<MosRow> = table
            .groups
            .iter()
            .map(|((m, q), s)| MosRow {
                method: m.clone(),
                question: q.clone(),
                n: s.n,
                mean: s.mean,
                std: s.std,
                max: s.max,
                min: s.min,
            })
            .collect();
        write_json(&out.join("mos.json"), &rows)?;
    }
    Ok(())
}

pub fn sweep(resolved: &Resolved, out: &Path, progress: bool) -> Result<()> {
    let cfg = &resolved.config;
    cfg.check_scale(cfg.train.generator.scale, "train.generator.scale")?;
    let trainer = Trainer::new(cfg.train.clone())?;
    let manifest = split_dataset(resolved)?;
    let mut train_set = load_entries(resolved, &manifest, Some(Split::Train))?;
    let mut val_set = load_entries(resolved, &manifest, Some(Split::Val))?;
    if val_set.is_empty() {
        // Small datasets: rank on the training images rather than fail.
        val_set = train_set.clone();
    }
    if let Some(n) = cfg.sweep.train_images {
        train_set.truncate(n);
    }
    if let Some(n) = cfg.sweep.val_images {
        val_set.truncate(n);
    }
    if train_set.is_empty() {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    fs::create_dir_all(out).map_err(io(out))?;
    resolved.write(out)?;
    let metric_extractor = cfg.metric.extractor.load()?;
    if progress {
        eprintln!(
            "sweeping {} weight sets, {} steps each, on {} training images",
            cfg.sweep.sets.len(),
            trainer.config.total_iters(),
            train_set.len()
        );
    }
    let table = run_sweep(&trainer, &cfg.sweep.sets, &train_set, &val_set, &metric_extractor, Some(out))?;
    if progress {
        eprint!("{}", table.to_markdown());
    }
    Ok(())
}

#[derive(Serialize)]
struct RecordInfo {
    name: String,
    dtype: &'static str,
    dims: Vec<usize>,
}

pub fn inspect(path: &Path, json: bool) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let mut records = Vec::new();
    let mut meta = BTreeMap::new();
    let mut numeric = 0usize;
    for r in ck.records() {
        match &r.data {
            RecordData::Bytes(b) => {
                let v: serde_json::Value = serde_json::from_slice(b)
                    .unwrap_or_else(|_| serde_json::Value::String(format!("<{} bytes>", b.len())));
                meta.insert(r.name.clone(), v);
            }
            RecordData::F32(v) => numeric += v.len(),
            RecordData::F64(v) => numeric += v.len(),
        }
        records.push(RecordInfo {
            name: r.name.clone(),
            dtype: r.dtype_name(),
            dims: r.dims.clone(),
        });
    }
    if json {
        let v = serde_json::json!({
            "path": path,
            "records": records,
            "meta": meta,
            "numeric_values": numeric,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?);
    } else {
        println!("{}: {} records, {numeric} numeric values", path.display(), records.len());
        for (k, v) in &meta {
            let text = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
            let short: String = text.chars().take(160).collect();
            println!("  {k} = {short}{}", if text.len() > short.len() { " ..." } else { "" });
        }
        for r in &records {
            println!("  {:<48} {:<5} {:?}", r.name, r.dtype, r.dims);
        }
    }
    Ok(())
}
