//! Dataset discovery, class-stratified fold splits and LR/HR pair loading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::imagecore::{center_crop_to_multiple, degrade, load_png, save_png, DegradationConfig, ImageTensor};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// 64-bit FNV-1a, used to derive stable per-item seeds from strings.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn rel_string(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Every image file below `root` as a sorted `/`-separated relative path, whatever its depth.
pub fn list_images(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::Dataset(format!("walking {}: {e}", root.display())))?;
        if item.file_type().is_file() && is_image(item.path()) {
            out.push(rel_string(root, item.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Scans `root` for images whose class is their parent directory name.
///
/// `min_resolution` is `(width, height)`; smaller images are skipped. Entries are sorted by
/// path and all tagged [`Split::Train`] until [`split_manifest`] assigns folds.
pub fn build_manifest(
    root: &Path,
    class_filter: Option<&[String]>,
    min_resolution: Option<(usize, usize)>,
) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut entries = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::Dataset(format!("walking {}: {e}", root.display())))?;
        let p = item.path();
        if !item.file_type().is_file() || !is_image(p) {
            continue;
        }
        let Some(class) = p
            .parent()
            .filter(|d| *d != root)
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
        else {
            continue;
        };
        if let Some(filter) = class_filter {
            if !filter.contains(&class) {
                continue;
            }
        }
        let stat = seen.entry(class.clone()).or_default();
        stat.0 += 1;
        if let Some((mw, mh)) = min_resolution {
            let (w, h) = image::image_dimensions(p).map_err(|e| Error::Image {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?;
            if (w as usize) < mw || (h as usize) < mh {
                stat.1 += 1;
                continue;
            }
        }
        entries.push(ManifestEntry {
            path: rel_string(root, p),
            class,
            split: Split::Train,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if entries.is_empty() {
        let detail = if seen.is_empty() {
            "no images found in class subdirectories".to_string()
        } else {
            seen.iter()
                .map(|(c, (n, small))| format!("{c}: {n} found, {small} below minimum resolution"))
                .collect::<Vec<_>>()
                .join("; ")
        };
        return Err(Error::Dataset(format!("empty dataset under {}: {detail}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

impl DatasetManifest {
    pub fn classes(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.class.clone()).collect()
    }

    pub fn counts(&self) -> BTreeMap<(String, Split), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.class.clone(), e.split)).or_insert(0) += 1;
        }
        m
    }

    pub fn subset(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn full_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serialises"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut paths = BTreeSet::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Format(format!("manifest line {}: {err}", i + 1)))?;
            if !paths.insert(e.path.clone()) {
                return Err(Error::Format(format!("manifest lists '{}' twice", e.path)));
            }
            entries.push(e);
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, root)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Assigns train/val/test per class.
///
/// Each class is shuffled with a seed derived from `seed` and the class name. The first
/// `round(val·n)` images form the validation set for every fold. With `n_folds > 1` the
/// remaining pool is cut into `n_folds` contiguous chunks, chunk `fold_index` is the test set
/// and the rest train; with one fold the test set is the next `round(test·n)` images.
pub fn split_manifest(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    fold_index: usize,
    n_folds: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let f = fractions;
    if [f.train, f.val, f.test].iter().any(|v| !(0.0..=1.0).contains(v))
        || (f.train + f.val + f.test - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions {}/{}/{} must be in [0,1] and sum to 1",
            f.train, f.val, f.test
        )));
    }
    if n_folds == 0 || fold_index >= n_folds {
        return Err(Error::config(format!("fold {fold_index} is not in 0..{n_folds}")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(&e.class).or_default().push(i);
    }
    let mut out = manifest.clone();
    for (class, mut idx) in by_class {
        let n = idx.len();
        if n < n_folds {
            return Err(Error::Dataset(format!(
                "class '{class}' has {n} images, fewer than {n_folds} folds"
            )));
        }
        idx.sort_by(|&a, &b| manifest.entries[a].path.cmp(&manifest.entries[b].path));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(class));
        idx.shuffle(&mut rng);
        let n_val = (f.val * n as f64).round() as usize;
        let (val, pool) = idx.split_at(n_val.min(n));
        for &i in val {
            out.entries[i].split = Split::Val;
        }
        if n_folds == 1 {
            let n_test = ((f.test * n as f64).round() as usize).min(pool.len());
            for (k, &i) in pool.iter().enumerate() {
                out.entries[i].split = if k < n_test { Split::Test } else { Split::Train };
            }
        } else {
            if pool.len() < n_folds {
                return Err(Error::Dataset(format!(
                    "class '{class}' leaves {} images after validation, fewer than {n_folds} folds",
                    pool.len()
                )));
            }
            let lo = fold_index * pool.len() / n_folds;
            let hi = (fold_index + 1) * pool.len() / n_folds;
            for (k, &i) in pool.iter().enumerate() {
                out.entries[i].split = if (lo..hi).contains(&k) { Split::Test } else { Split::Train };
            }
        }
    }
    Ok(out)
}

/// An aligned LR/HR pair in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub class_label: String,
    pub source_path: String,
}

fn to_rgb(img: ImageTensor) -> ImageTensor {
    if img.channels() == 3 {
        return img;
    }
    ImageTensor::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0))
}

/// Degradation settings for one entry: the configured seed mixed with the entry path.
pub fn entry_degradation(entry: &ManifestEntry, cfg: &DegradationConfig) -> DegradationConfig {
    DegradationConfig {
        seed: cfg.seed ^ fnv1a(&entry.path),
        ..cfg.clone()
    }
}

/// Loads the HR image, crops it to a multiple of the scale and synthesises the LR partner.
///
/// With a cache directory the LR image is stored as `<cache>/<r>x/<path>.png` and reused;
/// cached pairs always carry the 8-bit quantised LR, first load included.
pub fn load_pair(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    cfg: &DegradationConfig,
    cache: Option<&Path>,
) -> Result<PairSample> {
    let hr = to_rgb(load_png(&manifest.full_path(entry))?);
    let hr = center_crop_to_multiple(&hr, cfg.scale)?;
    let lr = match cache {
        None => degrade(&hr, &entry_degradation(entry, cfg))?,
        Some(dir) => {
            let scale_dir = dir.join(format!("{}x", cfg.scale));
            check_cache_settings(&scale_dir, cfg)?;
            let file = scale_dir.join(format!("{}.png", entry.path));
            if !file.exists() {
                let lr = degrade(&hr, &entry_degradation(entry, cfg))?;
                save_png(&lr, &file)?;
            }
            to_rgb(load_png(&file)?)
        }
    };
    if lr.height() * cfg.scale != hr.height() || lr.width() * cfg.scale != hr.width() {
        return Err(Error::Dataset(format!(
            "cached LR for '{}' does not match the HR size; clear the cache",
            entry.path
        )));
    }
    Ok(PairSample {
        lr,
        hr,
        class_label: entry.class.clone(),
        source_path: entry.path.clone(),
    })
}

fn check_cache_settings(scale_dir: &Path, cfg: &DegradationConfig) -> Result<()> {
    let meta = scale_dir.join("degradation.json");
    let want = serde_json::to_string(cfg).expect("config serialises");
    if meta.exists() {
        let have = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        if have.trim() != want {
            return Err(Error::config(format!(
                "LR cache {} was built with different degradation settings; clear it or use another cache directory",
                scale_dir.display()
            )));
        }
    } else {
        fs::create_dir_all(scale_dir).map_err(|e| Error::io(scale_dir, e))?;
        fs::write(&meta, &want).map_err(|e| Error::io(&meta, e))?;
    }
    Ok(())
}

/// Aligned random crop: an `hr_patch`-sided HR window and its LR counterpart.
pub fn random_patch(sample: &PairSample, hr_patch: usize, scale: usize, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, ImageTensor)> {
    if hr_patch % scale != 0 {
        return Err(Error::config(format!("patch {hr_patch} is not a multiple of the scale {scale}")));
    }
    let lp = hr_patch / scale;
    let (lh, lw) = (sample.lr.height(), sample.lr.width());
    if lh < lp || lw < lp {
        return Err(Error::input(format!(
            "'{}' is too small for {hr_patch}-pixel patches",
            sample.source_path
        )));
    }
    let y = rng.random_range(0..=lh - lp);
    let x = rng.random_range(0..=lw - lp);
    Ok((
        sample.lr.crop(y, x, lp, lp)?,
        sample.hr.crop(y * scale, x * scale, hr_patch, hr_patch)?,
    ))
}

/// Procedural RGB test image: smooth colour gradients, fine band-limited texture, thin dark
/// curves and a few hard-edged discs.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random_range(0.5..0.7), rng.random_range(0.25..0.4), rng.random_range(0.2..0.35)];
    // (frequency in rad/px, direction, phase, amplitude, channel tint)
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..40)
        .map(|_| {
            let f: f64 = rng.random_range(0.02..0.9);
            (
                f,
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
                0.05 / (1.0 + 3.0 * f),
                [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)],
            )
        })
        .collect();
    // Curves y = a + b·sin(c·x + d) in a rotated frame, drawn as thin dark lines.
    let curves: Vec<(f64, f64, f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(4.0..20.0),
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
                rng.random_range(0.6..2.0),
            )
        })
        .collect();
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(0.05..0.2) * height.min(width) as f64,
                [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            )
        })
        .collect();
    ImageTensor::from_fn(height, width, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for &(freq, angle, phase, amp, tint) in &waves {
            v += amp * tint[c] * (freq * (xf * angle.cos() + yf * angle.sin()) + phase).sin();
        }
        for &(a, b, f, d, rot, half_width) in &curves {
            let (u, w) = (xf * rot.cos() + yf * rot.sin(), -xf * rot.sin() + yf * rot.cos());
            let dist = (w - (a + b * (f * u + d).sin())).abs();
            if dist < half_width + 1.0 {
                let cover = (half_width + 1.0 - dist).min(1.0);
                v -= 0.25 * cover * [0.6, 1.0, 0.9][c];
            }
        }
        for (cy, cx, r, tint) in &discs {
            if (yf - cy).powi(2) + (xf - cx).powi(2) < r * r {
                v += tint[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// A synthetic HR image of side `hr_size` and its degraded LR partner.
pub fn synthetic_sample(hr_size: usize, cfg: &DegradationConfig, seed: u64) -> Result<PairSample> {
    let hr = center_crop_to_multiple(&synthetic_image(hr_size, hr_size, seed), cfg.scale)?;
    let lr = degrade(&hr, cfg)?;
    Ok(PairSample {
        lr,
        hr,
        class_label: "synthetic".into(),
        source_path: format!("synthetic_{seed}.png"),
    })
}
