//! Run configuration: defaults, optional preset, TOML file and flag overrides merged on flat
//! dotted key paths, with the source of every value remembered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use endosr_core::data::SplitFractions;
use endosr_core::imagecore::{gaussian_kernel, DegradationConfig};
use endosr_core::metrics::ColorMode;
use endosr_core::trainer::{ExtractorSource, TrainConfig, SWEEP_WEIGHT_SETS};
use endosr_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// HR image tree; classes are the parent directory names.
    pub root: Option<PathBuf>,
    pub classes: Option<Vec<String>>,
    pub min_width: usize,
    pub min_height: usize,
    pub split: SplitFractions,
    pub fold: usize,
    pub n_folds: usize,
    pub split_seed: u64,
    /// Directory for cached LR images.
    pub cache: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            classes: None,
            min_width: 0,
            min_height: 0,
            split: SplitFractions::default(),
            fold: 0,
            n_folds: 1,
            split_seed: 0,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSection {
    pub scale: usize,
    pub blur_size: usize,
    /// Gaussian sigma; unset means `scale / 4`.
    pub blur_sigma: Option<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationSection {
    fn default() -> Self {
        DegradationSection {
            scale: 8,
            blur_size: 5,
            blur_sigma: None,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DegradationSection {
    pub fn to_config(&self) -> Result<DegradationConfig> {
        let sigma = self.blur_sigma.unwrap_or(self.scale as f64 / 4.0);
        let cfg = DegradationConfig {
            blur_kernel: gaussian_kernel(self.blur_size, sigma)?,
            scale: self.scale,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    #[default]
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
    pub resume: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            max_steps: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub color: ColorMode,
    pub peak: f64,
    /// Network behind the perceptual distance.
    pub extractor: ExtractorSource,
}

impl Default for MetricSection {
    fn default() -> Self {
        MetricSection {
            color: ColorMode::Luminance,
            peak: 1.0,
            extractor: ExtractorSource::Toy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// Directory of precomputed SR images named like the HR images.
    pub sr_dir: Option<PathBuf>,
    /// Method name for `sr_dir` results.
    pub method: String,
    pub split: SplitChoice,
    pub maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: None,
            sr_dir: None,
            method: "external".into(),
            split: SplitChoice::All,
            maps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub inputs: Vec<PathBuf>,
    /// Explicit `[a, b]` method pairs; empty compares every pair.
    pub pairs: Vec<(String, String)>,
    /// Metrics to test; empty takes all found.
    pub metrics: Vec<String>,
    /// Opinion-score CSV `(method, question, score)`.
    pub mos: Option<PathBuf>,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            inputs: Vec::new(),
            pairs: Vec::new(),
            metrics: Vec::new(),
            mos: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub sets: Vec<(f64, f64, f64)>,
    /// Validation images used for ranking (the first ones of the validation split).
    pub val_images: Option<usize>,
    pub train_images: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            sets: SWEEP_WEIGHT_SETS.to_vec(),
            val_images: None,
            train_images: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: DataSection,
    pub degradation: DegradationSection,
    pub train: TrainConfig,
    pub run: RunSection,
    pub metric: MetricSection,
    pub eval: EvalSection,
    pub stats: StatsSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.extractor = ExtractorSource::Toy;
        RunConfig {
            preset: None,
            data: DataSection::default(),
            degradation: DegradationSection::default(),
            train,
            run: RunSection::default(),
            metric: MetricSection::default(),
            eval: EvalSection::default(),
            stats: StatsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        let train = TrainConfig::preset(name)?;
        Ok(RunConfig {
            preset: Some(name.to_string()),
            degradation: DegradationSection {
                scale: train.generator.scale,
                ..DegradationSection::default()
            },
            train,
            ..RunConfig::default()
        })
    }

    pub fn degradation(&self) -> Result<DegradationConfig> {
        self.degradation.to_config()
    }

    /// The generator and the data must agree on the scale factor.
    pub fn check_scale(&self, generator_scale: usize, what: &str) -> Result<()> {
        if generator_scale != self.degradation.scale {
            return Err(Error::config(format!(
                "scale mismatch: {what} is {generator_scale}x but degradation.scale is {}x",
                self.degradation.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

/// A validated configuration and where each leaf value came from.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::config(e.to_string())
}

/// Flattens nested tables into dotted key paths; arrays are leaves.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, t: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Table> {
    let mut root = Table::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut t = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            t = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("key '{key}' conflicts with a value at '{p}'")))?;
        }
        t.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(root)
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(cfg_err)
}

/// Parses a `--set` value as a TOML value, falling back to a plain string.
pub fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

/// Merges defaults, the preset (named by flag or file), the file and the flag overrides.
pub fn resolve(file: Option<&Path>, flags: &BTreeMap<String, Value>) -> Result<Resolved> {
    let file_map = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: Table = text
                .parse()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            flatten(&t)
        }
        None => BTreeMap::new(),
    };
    let defaults = RunConfig::default();
    let mut merged = flatten(&to_table(&defaults)?);
    let mut provenance: BTreeMap<String, Source> = merged.keys().map(|k| (k.clone(), Source::Default)).collect();
    let preset = match (flags.get("preset"), file_map.get("preset")) {
        (Some(v), _) => Some((v.clone(), Source::Flag)),
        (None, Some(v)) => Some((v.clone(), Source::File)),
        (None, None) => None,
    };
    if let Some((v, src)) = preset {
        let name = v
            .as_str()
            .ok_or_else(|| Error::config("preset must be a string"))?;
        for (k, pv) in flatten(&to_table(&RunConfig::with_preset(name)?)?) {
            if merged.get(&k) != Some(&pv) {
                provenance.insert(k.clone(), src);
                merged.insert(k, pv);
            }
        }
    }
    for (source, layer) in [(Source::File, &file_map), (Source::Flag, flags)] {
        for (k, v) in layer {
            // A table-valued key replaces everything beneath it.
            let lead = format!("{k}.");
            merged.retain(|old, _| !old.starts_with(&lead));
            merged.insert(k.clone(), v.clone());
            provenance.insert(k.clone(), source);
        }
    }
    let config: RunConfig = Value::Table(unflatten(&merged)?)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    config.degradation()?;
    // Keys that serialise differently after parsing keep their recorded source.
    let final_keys = flatten(&to_table(&config)?);
    let provenance = final_keys
        .keys()
        .map(|k| (k.clone(), provenance.get(k).copied().unwrap_or(Source::Default)))
        .collect();
    Ok(Resolved { config, provenance })
}

impl Resolved {
    /// Flat TOML with one `key = value  # source` line per leaf; loadable with `--config`.
    pub fn to_toml(&self) -> Result<String> {
        let flat = flatten(&to_table(&self.config)?);
        let mut s = String::from("# Resolved configuration; each value notes its source.\n");
        for (k, v) in &flat {
            let src = self.provenance.get(k).copied().unwrap_or(Source::Default);
            s += &format!("{k} = {v}  # {}\n", src.name());
        }
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), parse_value(v))).collect()
    }

    #[test]
    fn defaults_resolve() {
        let r = resolve(None, &BTreeMap::new()).unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(r.provenance.values().all(|s| *s == Source::Default));
        assert_eq!(r.config.train.loss.alpha, 0.35);
    }

    #[test]
    fn precedence_default_file_flag() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        fs::write(&f, "[train]\nseed = 5\nbatch_size = 3\n[train.loss]\nalpha = 0.5\n").unwrap();
        let r = resolve(Some(&f), &flags(&[("train.seed", "7")])).unwrap();
        assert_eq!(r.config.train.seed, 7);
        assert_eq!(r.config.train.batch_size, 3);
        assert_eq!(r.config.train.loss.alpha, 0.5);
        assert_eq!(r.provenance["train.seed"], Source::Flag);
        assert_eq!(r.provenance["train.batch_size"], Source::File);
        assert_eq!(r.provenance["train.beta1"], Source::Default);
    }

    #[test]
    fn preset_then_overrides() {
        let r = resolve(None, &flags(&[("preset", "\"desk-10x\""), ("train.iters_phase1", "10")])).unwrap();
        assert_eq!(r.config.train.generator.scale, 10);
        assert_eq!(r.config.degradation.scale, 10);
        assert_eq!(r.config.train.iters_phase1, 10);
        assert_eq!(r.provenance["train.generator.scale"], Source::Flag);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        for (k, v) in [("train.bogus", "1"), ("train.seed", "\"x\""), ("nope", "1")] {
            let e = resolve(None, &flags(&[(k, v)])).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{k}");
        }
    }

    #[test]
    fn resolved_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = resolve(
            None,
            &flags(&[("preset", "desk-8x"), ("data.root", "/tmp/x"), ("run.max_steps", "3")]),
        )
        .unwrap();
        let path = r.write(dir.path()).unwrap();
        let again = resolve(Some(&path), &BTreeMap::new()).unwrap();
        assert_eq!(again.config, r.config);
        assert_eq!(again.to_toml().unwrap().lines().count(), r.to_toml().unwrap().lines().count());
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("hello"), Value::String("hello".into()));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }
}
