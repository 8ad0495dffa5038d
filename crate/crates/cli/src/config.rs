//! Run configuration: a TOML file with dotted section keys, overridden by
//! `--set key=value` flags. Relative paths resolve against the file's
//! directory.

use std::path::{Path, PathBuf};

use peps_core::peps::ContractionSettings;
use peps_core::training::{SwitchCriterion, TrainConfig};
use peps_core::PepsError;
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    BarsStripes,
    Mnist,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeRule {
    #[default]
    Single,
    Labels,
    Clusters,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// First `train_count` examples of the file for training, the rest for
    /// validation; modes are assigned afterwards.
    #[default]
    Global,
    /// Last `validation_per_mode` examples of each mode for validation.
    PerMode,
    /// Training and validation sets both hold every example.
    None,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    pub side: usize,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub binarize_seed: u64,
    pub downsample: bool,
    pub modes: ModeRule,
    pub cluster_file: Option<PathBuf>,
    pub split: SplitRule,
    pub train_count: usize,
    pub validation_per_mode: usize,
    /// Keep at most this many leading examples per mode; 0 keeps all.
    pub mode_limit: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: Source::BarsStripes,
            side: 4,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            binarize_seed: 0,
            downsample: false,
            modes: ModeRule::Single,
            cluster_file: None,
            split: SplitRule::Global,
            train_count: 50_000,
            validation_per_mode: 100,
            mode_limit: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub bond_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bond_dim: 2,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_pos: usize,
    pub batch_neg_initial: usize,
    pub batch_neg_late: usize,
    pub switch_window: usize,
    pub switch_threshold: f64,
    pub switch_max_iter: usize,
    pub max_iters: usize,
    pub eval_interval: usize,
    pub norm_samples: usize,
    pub init_samples: usize,
    pub eval_limit: usize,
    /// Boundary bond cap; absent means `2·D²`, 0 means exact.
    pub chi: Option<usize>,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::<f64>::default();
        TrainingConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_pos: t.batch_pos,
            batch_neg_initial: t.batch_neg_initial,
            batch_neg_late: t.batch_neg_late,
            switch_window: t.switch.window,
            switch_threshold: t.switch.threshold,
            switch_max_iter: t.switch.max_iter,
            max_iters: t.max_iters,
            eval_interval: t.eval_interval,
            norm_samples: t.norm_samples,
            init_samples: t.init_samples,
            eval_limit: t.eval_limit,
            chi: None,
            rel_tol: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n: usize,
    pub chi: Option<usize>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n: 100,
            chi: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

pub fn settings(chi: Option<usize>, rel_tol: f64, bond_dim: usize) -> ContractionSettings<f64> {
    let mut s = match chi {
        Some(0) => ContractionSettings::exact(),
        Some(c) => ContractionSettings::with_chi(c),
        None => ContractionSettings::default_for(bond_dim),
    };
    s.rel_tol = rel_tol;
    s
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.training;
        let mut c = TrainConfig::new(settings(t.chi, t.rel_tol, self.model.bond_dim), t.seed);
        c.learning_rate = t.learning_rate;
        c.beta1 = t.beta1;
        c.beta2 = t.beta2;
        c.eps = t.eps;
        c.batch_pos = t.batch_pos;
        c.batch_neg_initial = t.batch_neg_initial;
        c.batch_neg_late = t.batch_neg_late;
        c.switch = SwitchCriterion {
            window: t.switch_window,
            threshold: t.switch_threshold,
            max_iter: t.switch_max_iter,
        };
        c.max_iters = t.max_iters;
        c.eval_interval = t.eval_interval;
        c.norm_samples = t.norm_samples;
        c.init_samples = t.init_samples;
        c.eval_limit = t.eval_limit;
        c
    }

    pub fn validate(&self) -> Result<(), PepsError> {
        if self.model.bond_dim == 0 {
            return Err(PepsError::Input("model.bond_dim must be positive".into()));
        }
        self.train_config().validate()?;
        let d = &self.dataset;
        if d.source == Source::BarsStripes && d.side == 0 {
            return Err(PepsError::Input("dataset.side must be positive".into()));
        }
        if d.source == Source::Mnist && d.images.is_none() {
            return Err(PepsError::Input("dataset.images is required for mnist".into()));
        }
        if d.modes == ModeRule::Clusters && d.cluster_file.is_none() {
            return Err(PepsError::Input("dataset.cluster_file is required for cluster modes".into()));
        }
        for p in [&d.images, &d.labels, &d.test_images, &d.test_labels, &d.cluster_file]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(PepsError::Input(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let d = &mut self.dataset;
        for p in [
            &mut d.images,
            &mut d.labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.cluster_file,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), PepsError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| PepsError::Input(format!("override `{entry}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut t = table;
    for p in path {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| PepsError::Input(format!("override `{key}`: `{p}` is not a section")))?;
    }
    t.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (if any), applies overrides and resolves relative paths.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, PepsError> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PepsError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let t: toml::Table = text
                .parse()
                .map_err(|e| PepsError::Input(format!("{}: {e}", p.display())))?;
            (t, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| {
        let at = path.map_or_else(|| "configuration".to_owned(), |p| p.display().to_string());
        PepsError::Input(format!("{at}: {e}"))
    })?;
    cfg.resolve(&base);
    Ok(cfg)
}
