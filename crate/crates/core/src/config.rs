//! Experiment configuration as `section.key = value` lines.
//!
//! Later assignments override earlier ones, so command-line overrides are
//! applied after the file. [`ExperimentConfig::to_pairs`] echoes every key;
//! parsing the echo reproduces the configuration exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_graph::{DurationRule, WeightLaw};
use crate::eval::LogisticConfig;
use crate::model::{Normalization, SgtConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {content:?}")]
    Syntax { line: usize, content: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Named structural ablations. Each maps to one combination of the four
/// structural switches and back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    Full,
    /// No edge types.
    T,
    /// No edge weights.
    W,
    /// Neither: the plain current snapshot with one edge type.
    TW,
    /// No topological attributes.
    S,
    /// No path attributes.
    P,
    /// No structural modulation at all.
    SP,
}

/// `(use_edge_types, use_edge_weights, use_topo_attr, use_path_attr)`.
pub type StructureFlags = (bool, bool, bool, bool);

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::T,
        Ablation::W,
        Ablation::TW,
        Ablation::S,
        Ablation::P,
        Ablation::SP,
    ];

    pub fn flags(self) -> StructureFlags {
        match self {
            Ablation::Full => (true, true, true, true),
            Ablation::T => (false, true, true, true),
            Ablation::W => (true, false, true, true),
            Ablation::TW => (false, false, true, true),
            Ablation::S => (true, true, false, true),
            Ablation::P => (true, true, true, false),
            Ablation::SP => (true, true, false, false),
        }
    }

    pub fn from_flags(flags: StructureFlags) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.flags() == flags)
    }

    pub fn apply(self, cfg: &mut SgtConfig) {
        let (t, w, s, p) = self.flags();
        cfg.use_edge_types = t;
        cfg.use_edge_weights = w;
        cfg.use_topo_attr = s;
        cfg.use_path_attr = p;
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::T => "T",
            Ablation::W => "W",
            Ablation::TW => "TW",
            Ablation::S => "S",
            Ablation::P => "P",
            Ablation::SP => "SP",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of full,T,W,TW,S,P,SP"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Edge-list file; when absent the synthetic generator supplies data.
    pub path: Option<PathBuf>,
    pub n_slices: i64,
    pub n_train: usize,
    pub alpha: f64,
    pub beta: f64,
    pub duration_rule: DurationRule,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            n_slices: 20,
            n_train: 15,
            alpha: 1.0,
            beta: 1.0,
            duration_rule: DurationRule::ResetOnChange,
        }
    }
}

impl DatasetConfig {
    pub fn weight_law(&self) -> WeightLaw {
        WeightLaw {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_seeds: usize,
    pub pooled: bool,
    pub neg_ratio: f64,
    pub baseline: bool,
    pub logistic: LogisticConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            pooled: false,
            neg_ratio: 1.0,
            baseline: true,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub results: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub model: SgtConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::Full,
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            model: SgtConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Model config with the ablation switches applied.
    pub fn effective_model(&self) -> SgtConfig {
        let mut m = self.model.clone();
        self.ablation.apply(&mut m);
        m
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64).map(|k| self.seed + k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "ablation" => {
                self.ablation = v.parse().map_err(|_| ConfigError::Value {
                    key: k.to_string(),
                    value: v.to_string(),
                })?
            }
            "dataset.path" => self.dataset.path = parse_opt_path(v),
            "dataset.n_slices" => self.dataset.n_slices = parse(k, v)?,
            "dataset.n_train" => self.dataset.n_train = parse(k, v)?,
            "dataset.alpha" => self.dataset.alpha = parse(k, v)?,
            "dataset.beta" => self.dataset.beta = parse(k, v)?,
            "dataset.duration_rule" => {
                self.dataset.duration_rule = match v {
                    "reset" => DurationRule::ResetOnChange,
                    "cumulative" => DurationRule::Cumulative,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.to_string(),
                            value: v.to_string(),
                        })
                    }
                }
            }
            "synth.kind" => {
                self.synth.kind = v.parse().map_err(|_| ConfigError::Value {
                    key: k.to_string(),
                    value: v.to_string(),
                })?
            }
            "synth.n_nodes" => self.synth.n_nodes = parse(k, v)?,
            "synth.n_slices" => self.synth.n_slices = parse(k, v)?,
            "synth.seed" => self.synth.seed = parse(k, v)?,
            "synth.n_blocks" => self.synth.n_blocks = parse(k, v)?,
            "synth.block_density" => self.synth.block_density = parse(k, v)?,
            "synth.noise_rate" => self.synth.noise_rate = parse(k, v)?,
            "synth.burst_rate" => self.synth.burst_rate = parse(k, v)?,
            "synth.burst_length" => self.synth.burst_length = parse(k, v)?,
            "synth.burst_gap" => self.synth.burst_gap = parse(k, v)?,
            "synth.churn_density" => self.synth.churn_density = parse(k, v)?,
            "synth.churn_toggle_min" => self.synth.churn_toggle_min = parse(k, v)?,
            "synth.churn_toggle_max" => self.synth.churn_toggle_max = parse(k, v)?,
            "model.d" => self.model.d = parse(k, v)?,
            "model.d_e" => self.model.d_e = parse(k, v)?,
            "model.n_layers" => self.model.n_layers = parse(k, v)?,
            "model.n_heads" => self.model.n_heads = parse(k, v)?,
            "model.max_spd" => self.model.max_spd = parse(k, v)?,
            "model.k_max" => self.model.k_max = parse(k, v)?,
            "model.pe_base" => self.model.pe_base = parse(k, v)?,
            "model.conv_width" => self.model.conv_width = parse(k, v)?,
            "model.normalization" => {
                self.model.normalization = match v {
                    "softmax" => Normalization::Softmax,
                    "rowsum" => Normalization::RowSum,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.to_string(),
                            value: v.to_string(),
                        })
                    }
                }
            }
            "model.tie_structure" => self.model.tie_structure = parse_bool(k, v)?,
            "model.ffn" => self.model.ffn = parse_bool(k, v)?,
            "model.freeze_x" => self.model.freeze_x = parse_bool(k, v)?,
            "model.x_init_std" => self.model.x_init_std = parse(k, v)?,
            "model.modulation_init_std" => self.model.modulation_init_std = parse(k, v)?,
            "model.out_init_gain" => self.model.out_init_gain = parse(k, v)?,
            "model.input_norm" => self.model.input_norm = parse_bool(k, v)?,
            "model.ln_eps" => self.model.ln_eps = parse(k, v)?,
            "train.window" => self.train.window = parse(k, v)?,
            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.l2_lambda" => self.train.l2_lambda = parse(k, v)?,
            "train.neg_ratio" => self.train.neg_ratio = parse(k, v)?,
            "train.batch_size" => {
                self.train.batch_size = if v == "none" || v == "0" { None } else { Some(parse(k, v)?) }
            }
            "train.beta1" => self.train.beta1 = parse(k, v)?,
            "train.beta2" => self.train.beta2 = parse(k, v)?,
            "train.eps" => self.train.eps = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "train.carry_state" => self.train.carry_state = parse_bool(k, v)?,
            "eval.n_seeds" => self.eval.n_seeds = parse(k, v)?,
            "eval.pooled" => self.eval.pooled = parse_bool(k, v)?,
            "eval.neg_ratio" => self.eval.neg_ratio = parse(k, v)?,
            "eval.baseline" => self.eval.baseline = parse_bool(k, v)?,
            "eval.lr" => self.eval.logistic.lr = parse(k, v)?,
            "eval.max_iter" => self.eval.logistic.max_iter = parse(k, v)?,
            "eval.tol" => self.eval.logistic.tol = parse(k, v)?,
            "output.results" => self.output.results = parse_opt_path(v),
            "output.log" => self.output.log = parse_opt_path(v),
            "output.checkpoint" => self.output.checkpoint = parse_opt_path(v),
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    content: raw.to_string(),
                });
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key with its current value, in key order.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("ablation", self.ablation.to_string());
        let d = &self.dataset;
        put("dataset.path", path_str(&d.path));
        put("dataset.n_slices", d.n_slices.to_string());
        put("dataset.n_train", d.n_train.to_string());
        put("dataset.alpha", d.alpha.to_string());
        put("dataset.beta", d.beta.to_string());
        put(
            "dataset.duration_rule",
            match d.duration_rule {
                DurationRule::ResetOnChange => "reset",
                DurationRule::Cumulative => "cumulative",
            }
            .to_string(),
        );
        let s = &self.synth;
        put("synth.kind", s.kind.name().to_string());
        put("synth.n_nodes", s.n_nodes.to_string());
        put("synth.n_slices", s.n_slices.to_string());
        put("synth.seed", s.seed.to_string());
        put("synth.n_blocks", s.n_blocks.to_string());
        put("synth.block_density", s.block_density.to_string());
        put("synth.noise_rate", s.noise_rate.to_string());
        put("synth.burst_rate", s.burst_rate.to_string());
        put("synth.burst_length", s.burst_length.to_string());
        put("synth.burst_gap", s.burst_gap.to_string());
        put("synth.churn_density", s.churn_density.to_string());
        put("synth.churn_toggle_min", s.churn_toggle_min.to_string());
        put("synth.churn_toggle_max", s.churn_toggle_max.to_string());
        let mo = &self.model;
        put("model.d", mo.d.to_string());
        put("model.d_e", mo.d_e.to_string());
        put("model.n_layers", mo.n_layers.to_string());
        put("model.n_heads", mo.n_heads.to_string());
        put("model.max_spd", mo.max_spd.to_string());
        put("model.k_max", mo.k_max.to_string());
        put("model.pe_base", mo.pe_base.to_string());
        put("model.conv_width", mo.conv_width.to_string());
        put(
            "model.normalization",
            match mo.normalization {
                Normalization::Softmax => "softmax",
                Normalization::RowSum => "rowsum",
            }
            .to_string(),
        );
        put("model.tie_structure", mo.tie_structure.to_string());
        put("model.ffn", mo.ffn.to_string());
        put("model.freeze_x", mo.freeze_x.to_string());
        put("model.x_init_std", mo.x_init_std.to_string());
        put("model.modulation_init_std", mo.modulation_init_std.to_string());
        put("model.out_init_gain", mo.out_init_gain.to_string());
        put("model.input_norm", mo.input_norm.to_string());
        put("model.ln_eps", mo.ln_eps.to_string());
        let t = &self.train;
        put("train.window", t.window.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.lr", t.lr.to_string());
        put("train.l2_lambda", t.l2_lambda.to_string());
        put("train.neg_ratio", t.neg_ratio.to_string());
        put("train.batch_size", t.batch_size.map_or_else(|| "none".to_string(), |b| b.to_string()));
        put("train.beta1", t.beta1.to_string());
        put("train.beta2", t.beta2.to_string());
        put("train.eps", t.eps.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.carry_state", t.carry_state.to_string());
        let e = &self.eval;
        put("eval.n_seeds", e.n_seeds.to_string());
        put("eval.pooled", e.pooled.to_string());
        put("eval.neg_ratio", e.neg_ratio.to_string());
        put("eval.baseline", e.baseline.to_string());
        put("eval.lr", e.logistic.lr.to_string());
        put("eval.max_iter", e.logistic.max_iter.to_string());
        put("eval.tol", e.logistic.tol.to_string());
        let o = &self.output;
        put("output.results", path_str(&o.results));
        put("output.log", path_str(&o.log));
        put("output.checkpoint", path_str(&o.checkpoint));
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
