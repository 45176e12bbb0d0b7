//! Experiment configuration: a TOML file with one section per command.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use film_denoise_core::model::ModelConfig;
use film_denoise_core::noise::{NoiseDistribution, NoiseKind, NoiseParams, Range};
use film_denoise_core::optim::AdamConfig;
use film_denoise_core::param::Group;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Validation seed used when the config does not set one. Independent of the
/// training seed so curves from different runs share corrupted inputs.
pub const DEFAULT_EVAL_SEED: u64 = 20_000;

pub const DEFAULT_GRID: [f64; 4] = [0.05, 0.10, 0.20, 0.30];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Sweep,
    Denoise,
    Compare,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Denoise => "denoise",
            Command::Compare => "compare",
        })
    }
}

/// Every problem found while validating a config, reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid config ({} problem{}):", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub denoise: Option<DenoiseSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `reference`, `smoke` or `large`; explicit fields below override it.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub input_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub base_channels: Option<usize>,
    #[serde(default)]
    pub conditioner_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub film_sites: Option<Vec<String>>,
    /// Initialisation seed; defaults to the top-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Cifar10,
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub dir: PathBuf,
    /// PNG only: separate validation corpus.
    #[serde(default)]
    pub val_dir: Option<PathBuf>,
    #[serde(default)]
    pub train_images: Option<usize>,
    #[serde(default)]
    pub val_images: Option<usize>,
    /// PNG only: patch stride, defaults to the patch size.
    #[serde(default)]
    pub stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// `[lo, hi]` range for the Poissonian parameter.
    pub a: [f64; 2],
    /// `[lo, hi]` range for the Gaussian standard deviation.
    pub sigma: [f64; 2],
}

impl NoiseSpec {
    pub fn distribution(&self) -> film_denoise_core::Result<NoiseDistribution> {
        NoiseDistribution::new(Range::new(self.a[0], self.a[1])?, Range::new(self.sigma[0], self.sigma[1])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Conditional,
    TwoPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trainable: Vec<Group>,
    pub checkpoint_every: usize,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub phase2: Option<Phase2Section>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Section {
    pub epochs: usize,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub sigma_tr: Vec<f64>,
    pub sigma_val: Vec<f64>,
    pub kinds: Vec<NoiseKind>,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseSection {
    pub input: PathBuf,
    /// Relative paths resolve against the output directory.
    pub output: PathBuf,
    pub a: f64,
    pub sigma: f64,
    /// Patch stride; defaults to the model patch size.
    #[serde(default)]
    pub stride: Option<usize>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalMethod {
    pub name: String,
    /// Holds `<kind>_<level>/<image>.png` denoised by the external method.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Clean evaluation PNGs; when absent the data section's validation
    /// split is used.
    #[serde(default)]
    pub images: Option<PathBuf>,
    /// Pre-corrupted inputs laid out as `<kind>_<level>/<image>.png`; when
    /// absent the clean images are corrupted with `eval_seed`.
    #[serde(default)]
    pub noisy_dir: Option<PathBuf>,
    pub kinds: Vec<NoiseKind>,
    pub levels: Vec<f64>,
    pub eval_seed: u64,
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub external: Vec<ExternalMethod>,
    /// Patch stride; defaults to the model patch size.
    #[serde(default)]
    pub stride: Option<usize>,
}

/// Raw section shapes with every field optional, resolved against defaults.
mod raw {
    use super::*;

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Config {
        pub seed: Option<u64>,
        pub out_dir: Option<PathBuf>,
        #[serde(default)]
        pub model: Option<ModelSection>,
        pub data: Option<DataSection>,
        pub train: Option<Train>,
        pub sweep: Option<Sweep>,
        pub denoise: Option<Denoise>,
        pub compare: Option<Compare>,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Train {
        pub mode: Option<TrainMode>,
        pub epochs: Option<usize>,
        pub batch_size: Option<usize>,
        pub lr: Option<f64>,
        pub beta1: Option<f64>,
        pub beta2: Option<f64>,
        pub eps: Option<f64>,
        pub trainable: Option<Vec<Group>>,
        pub checkpoint_every: Option<usize>,
        pub noise: Option<NoiseSpec>,
        pub phase2: Option<Phase2Section>,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Sweep {
        pub sigma_tr: Option<Vec<f64>>,
        pub sigma_val: Option<Vec<f64>>,
        pub kinds: Option<Vec<NoiseKind>>,
        pub eval_seed: Option<u64>,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Denoise {
        pub input: Option<PathBuf>,
        pub output: Option<PathBuf>,
        pub a: Option<f64>,
        pub sigma: Option<f64>,
        pub stride: Option<usize>,
        pub batch: Option<usize>,
    }

    #[derive(Debug, Default, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Compare {
        pub images: Option<PathBuf>,
        pub noisy_dir: Option<PathBuf>,
        pub kinds: Option<Vec<NoiseKind>>,
        pub levels: Option<Vec<f64>>,
        pub eval_seed: Option<u64>,
        pub checkpoints: Option<Vec<PathBuf>>,
        #[serde(default)]
        pub external: Vec<ExternalMethod>,
        pub stride: Option<usize>,
    }
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads, resolves and validates a config for `command`. Relative paths
    /// are taken relative to the config file's directory.
    pub fn load(path: &Path, command: Command, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base, overrides)?;
        cfg.validate(command)?;
        Ok(cfg)
    }

    /// Parses and fills defaults without validating.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let raw: raw::Config = toml::from_str(text).context("parsing config")?;
        let mut errors = Vec::new();
        let seed = overrides.seed.or(raw.seed).unwrap_or(0);
        let out_dir = match (&overrides.out_dir, raw.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => rebase(base, &o),
            (None, None) => {
                errors.push("out_dir: missing (set it in the config or pass --out)".to_string());
                PathBuf::new()
            }
        };
        let model = raw.model.unwrap_or(ModelSection {
            preset: Some("reference".into()),
            input_shape: None,
            depth: None,
            base_channels: None,
            conditioner_hidden: None,
            film_sites: None,
            seed: None,
        });
        let data = raw.data.map(|mut d| {
            d.dir = rebase(base, &d.dir);
            d.val_dir = d.val_dir.map(|v| rebase(base, &v));
            d
        });
        let train = raw.train.map(|t| TrainSection {
            mode: t.mode.unwrap_or(TrainMode::Conditional),
            epochs: t.epochs.unwrap_or(10),
            batch_size: t.batch_size.unwrap_or(64),
            lr: t.lr.unwrap_or(AdamConfig::default().lr),
            beta1: t.beta1.unwrap_or(AdamConfig::default().beta1),
            beta2: t.beta2.unwrap_or(AdamConfig::default().beta2),
            eps: t.eps.unwrap_or(AdamConfig::default().eps),
            trainable: t.trainable.unwrap_or_else(|| Group::ALL.to_vec()),
            checkpoint_every: t.checkpoint_every.unwrap_or(0),
            noise: t.noise.unwrap_or(NoiseSpec { a: [0.0, 0.0], sigma: [0.0, 0.5] }),
            phase2: t.phase2,
        });
        let sweep = raw.sweep.map(|s| SweepSection {
            sigma_tr: s.sigma_tr.unwrap_or_else(|| DEFAULT_GRID.to_vec()),
            sigma_val: s.sigma_val.unwrap_or_else(|| DEFAULT_GRID.to_vec()),
            kinds: s.kinds.unwrap_or_else(|| vec![NoiseKind::Gaussian]),
            eval_seed: s.eval_seed.unwrap_or(DEFAULT_EVAL_SEED),
        });
        let denoise = raw.denoise.map(|d| {
            let need = |v: Option<PathBuf>, field: &str, errors: &mut Vec<String>| {
                v.map(|p| rebase(base, &p)).unwrap_or_else(|| {
                    errors.push(format!("denoise.{field}: missing"));
                    PathBuf::new()
                })
            };
            DenoiseSection {
                input: need(d.input, "input", &mut errors),
                output: d.output.unwrap_or_else(|| {
                    errors.push("denoise.output: missing".into());
                    PathBuf::new()
                }),
                a: d.a.unwrap_or(0.0),
                sigma: d.sigma.unwrap_or(0.0),
                stride: d.stride,
                batch: d.batch.unwrap_or(16),
            }
        });
        let mut compare = raw.compare.map(|c| CompareSection {
            images: c.images.map(|p| rebase(base, &p)),
            noisy_dir: c.noisy_dir.map(|p| rebase(base, &p)),
            kinds: c.kinds.unwrap_or_else(|| vec![NoiseKind::Gaussian]),
            levels: c.levels.unwrap_or_else(|| DEFAULT_GRID.to_vec()),
            eval_seed: c.eval_seed.unwrap_or(DEFAULT_EVAL_SEED),
            checkpoints: c.checkpoints.unwrap_or_default().into_iter().map(|p| rebase(base, &p)).collect(),
            external: c
                .external
                .into_iter()
                .map(|e| ExternalMethod { dir: rebase(base, &e.dir), name: e.name })
                .collect(),
            stride: c.stride,
        });
        if let (Some(ck), Some(c)) = (&overrides.checkpoint, compare.as_mut()) {
            if !c.checkpoints.contains(ck) {
                c.checkpoints.insert(0, ck.clone());
            }
        }
        if !errors.is_empty() {
            return Err(ConfigErrors(errors).into());
        }
        Ok(ExperimentConfig { seed, out_dir, model, data, train, sweep, denoise, compare })
    }

    /// Checks everything `command` needs and reports all problems at once.
    pub fn validate(&self, command: Command) -> Result<()> {
        let mut errors = Vec::new();
        let model = self.model_config();
        match &model {
            Ok(m) => {
                if let Err(e) = m.validate() {
                    errors.push(format!("model: {e}"));
                }
            }
            Err(e) => errors.push(e.clone()),
        }
        let needs_data = match command {
            Command::Train | Command::Sweep => true,
            Command::Compare => self.compare.as_ref().is_some_and(|c| c.images.is_none()),
            Command::Denoise => false,
        };
        if needs_data {
            match &self.data {
                None => errors.push("data: section missing".into()),
                Some(d) => check_data(d, &model, &mut errors),
            }
        }
        match command {
            Command::Train => match &self.train {
                None => errors.push("train: section missing".into()),
                Some(t) => check_train(t, &mut errors),
            },
            Command::Sweep => match &self.sweep {
                None => errors.push("sweep: section missing".into()),
                Some(s) => {
                    check_grid("sweep.sigma_tr", &s.sigma_tr, &mut errors);
                    check_grid("sweep.sigma_val", &s.sigma_val, &mut errors);
                    check_kinds("sweep.kinds", &s.kinds, &mut errors);
                }
            },
            Command::Denoise => match &self.denoise {
                None => errors.push("denoise: section missing".into()),
                Some(d) => {
                    check_exists("denoise.input", &d.input, false, &mut errors);
                    if NoiseParams::new(d.a, d.sigma).is_err() {
                        errors.push(format!("denoise.a/sigma: must be non-negative, got ({}, {})", d.a, d.sigma));
                    }
                    if d.batch == 0 {
                        errors.push("denoise.batch: must be at least 1".into());
                    }
                    check_stride("denoise.stride", d.stride, &model, &mut errors);
                }
            },
            Command::Compare => match &self.compare {
                None => errors.push("compare: section missing".into()),
                Some(c) => {
                    if let Some(p) = &c.images {
                        check_exists("compare.images", p, true, &mut errors);
                    }
                    if let Some(p) = &c.noisy_dir {
                        check_exists("compare.noisy_dir", p, true, &mut errors);
                    }
                    check_grid("compare.levels", &c.levels, &mut errors);
                    check_kinds("compare.kinds", &c.kinds, &mut errors);
                    if c.checkpoints.is_empty() {
                        errors.push("compare.checkpoints: at least one checkpoint is required".into());
                    }
                    for (i, p) in c.checkpoints.iter().enumerate() {
                        check_exists(&format!("compare.checkpoints[{i}]"), p, false, &mut errors);
                    }
                    let mut names: Vec<&str> = vec!["noisy"];
                    for (i, e) in c.external.iter().enumerate() {
                        check_exists(&format!("compare.external[{i}].dir"), &e.dir, true, &mut errors);
                        if e.name.is_empty() || names.contains(&e.name.as_str()) {
                            errors.push(format!("compare.external[{i}].name: `{}` is empty or already used", e.name));
                        }
                        names.push(&e.name);
                    }
                    check_stride("compare.stride", c.stride, &model, &mut errors);
                }
            },
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors).into())
        }
    }

    /// The model architecture after applying the preset and overrides.
    pub fn model_config(&self) -> std::result::Result<ModelConfig, String> {
        let m = &self.model;
        let mut cfg = match &m.preset {
            Some(name) => ModelConfig::preset(name)
                .ok_or_else(|| format!("model.preset: unknown preset `{name}` (expected reference, smoke or large)"))?,
            None => ModelConfig::reference(),
        };
        if let Some(s) = m.input_shape {
            cfg.input_shape = s;
        }
        if let Some(d) = m.depth {
            cfg.depth = d;
        }
        if let Some(b) = m.base_channels {
            cfg.base_channels = b;
        }
        if let Some(h) = &m.conditioner_hidden {
            cfg.conditioner_hidden = h.clone();
        }
        let all_sites = ModelConfig::new(cfg.input_shape, cfg.depth, cfg.base_channels, Vec::new(), 0).film_sites;
        cfg.film_sites = m.film_sites.clone().unwrap_or(all_sites);
        cfg.seed = m.seed.unwrap_or(self.seed);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config. The output
    /// directory is left out so relocated reruns share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_exists(field: &str, p: &Path, dir: bool, errors: &mut Vec<String>) {
    let ok = if dir { p.is_dir() } else { p.is_file() };
    if !ok {
        let what = if dir { "directory" } else { "file" };
        errors.push(format!("{field}: {what} `{}` does not exist", p.display()));
    }
}

fn check_grid(field: &str, grid: &[f64], errors: &mut Vec<String>) {
    if grid.is_empty() {
        errors.push(format!("{field}: grid is empty"));
    } else if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        errors.push(format!("{field}: values must be finite and non-negative"));
    } else if grid.windows(2).any(|w| w[0] >= w[1]) {
        errors.push(format!("{field}: grid must be strictly ascending"));
    }
}

fn check_kinds(field: &str, kinds: &[NoiseKind], errors: &mut Vec<String>) {
    if kinds.is_empty() {
        errors.push(format!("{field}: no noise kinds"));
    }
    let mut sorted = kinds.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != kinds.len() {
        errors.push(format!("{field}: duplicate noise kind"));
    }
}

fn check_stride(field: &str, stride: Option<usize>, model: &std::result::Result<ModelConfig, String>, errors: &mut Vec<String>) {
    if let (Some(s), Ok(m)) = (stride, model) {
        if s == 0 || s > m.input_shape[1] {
            errors.push(format!("{field}: must be in 1..={}", m.input_shape[1]));
        }
    }
}

fn check_data(d: &DataSection, model: &std::result::Result<ModelConfig, String>, errors: &mut Vec<String>) {
    check_exists("data.dir", &d.dir, true, errors);
    if let Some(v) = &d.val_dir {
        check_exists("data.val_dir", v, true, errors);
    }
    if d.train_images == Some(0) {
        errors.push("data.train_images: must be at least 1".into());
    }
    if d.val_images == Some(0) {
        errors.push("data.val_images: must be at least 1".into());
    }
    match d.format {
        DataFormat::Cifar10 => {
            if d.val_dir.is_some() {
                errors.push("data.val_dir: only used with format = \"png\"".into());
            }
            if d.stride.is_some() {
                errors.push("data.stride: only used with format = \"png\"".into());
            }
            if let Ok(m) = model {
                if m.input_shape != [3, 32, 32] {
                    errors.push(format!("data.format: cifar10 images are 3x32x32 but the model expects {:?}", m.input_shape));
                }
            }
        }
        DataFormat::Png => {
            if let Ok(m) = model {
                if m.input_shape[0] != 3 || m.input_shape[1] != m.input_shape[2] {
                    errors.push("model.input_shape: png corpora need square 3-channel patches".into());
                }
                if let Some(s) = d.stride {
                    if s == 0 || s > m.input_shape[1] {
                        errors.push(format!("data.stride: must be in 1..={}", m.input_shape[1]));
                    }
                }
            }
        }
    }
}

fn check_train(t: &TrainSection, errors: &mut Vec<String>) {
    if t.epochs == 0 {
        errors.push("train.epochs: must be at least 1".into());
    }
    if t.batch_size == 0 {
        errors.push("train.batch_size: must be at least 1".into());
    }
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        errors.push(format!("train.lr: must be positive, got {}", t.lr));
    }
    for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
        if !(0.0..1.0).contains(&b) {
            errors.push(format!("train.{name}: must be in [0, 1), got {b}"));
        }
    }
    if !(t.eps > 0.0) {
        errors.push(format!("train.eps: must be positive, got {}", t.eps));
    }
    if t.trainable.is_empty() {
        errors.push("train.trainable: at least one group must be trainable".into());
    }
    if let Err(e) = t.noise.distribution() {
        errors.push(format!("train.noise: {e}"));
    }
    match (t.mode, &t.phase2) {
        (TrainMode::Conditional, Some(_)) => errors.push("train.phase2: only used with mode = \"two-phase\"".into()),
        (TrainMode::TwoPhase, None) => errors.push("train.phase2: required with mode = \"two-phase\"".into()),
        (TrainMode::TwoPhase, Some(p)) => {
            if p.epochs == 0 {
                errors.push("train.phase2.epochs: must be at least 1".into());
            }
            match p.noise.distribution() {
                Err(e) => errors.push(format!("train.phase2.noise: {e}")),
                Ok(d) if d.is_degenerate() => errors.push("train.phase2.noise: must be a range, not a point".into()),
                Ok(_) => {}
            }
            if t.noise.distribution().is_ok_and(|d| !d.is_degenerate()) {
                errors.push("train.noise: phase 1 needs a fixed point (lo == hi)".into());
            }
        }
        (TrainMode::Conditional, None) => {}
    }
}
