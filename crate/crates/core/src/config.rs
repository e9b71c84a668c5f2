//! Run configuration: flat `key = value` lines with dotted section keys.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model.preset = desk
//! train.mode = tpld
//! train.gamma = 0.1
//! ```
//!
//! `model.preset` and `train.preset` are applied before every other key, whatever
//! their position in the file. Unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::corpus::synth::SynthSpec;
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::trainer::{Mode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Micro,
    #[default]
    Desk,
    Paper,
}

impl ModelPreset {
    /// The preset's model with a placeholder vocabulary size.
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Micro => ModelConfig::micro(0),
            ModelPreset::Desk => ModelConfig::desk(0),
            ModelPreset::Paper => ModelConfig::paper(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPreset {
    #[default]
    Desk,
    Paper,
}

impl TrainPreset {
    pub fn config(self) -> TrainConfig {
        match self {
            TrainPreset::Desk => TrainConfig::desk(),
            TrainPreset::Paper => TrainConfig::default(),
        }
    }
}

/// Everything one command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Drives model initialization, batch order and, unless `synth.seed` is set, the corpus.
    pub seed: u64,
    pub synth_seed: Option<u64>,
    pub dtype: Dtype,
    pub out: Option<PathBuf>,
    pub synth: SynthSpec,
    pub split_train: f64,
    pub split_valid: f64,
    /// Directory holding `train.jsonl`, `valid.jsonl`, `test.jsonl` and `database.json`.
    pub corpus_dir: Option<PathBuf>,
    pub model_preset: ModelPreset,
    /// `vocab_size` and `seed` are filled in when a run starts.
    pub model: ModelConfig,
    pub train_preset: TrainPreset,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub finetune_from: Option<PathBuf>,
    pub eval_checkpoint: Option<PathBuf>,
    pub sweep_gammas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_modes: Vec<Mode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth_seed: None,
            dtype: Dtype::F32,
            out: None,
            synth: SynthSpec::default(),
            split_train: 0.8,
            split_valid: 0.1,
            corpus_dir: None,
            model_preset: ModelPreset::Desk,
            model: ModelPreset::Desk.config(),
            train_preset: TrainPreset::Desk,
            train: TrainPreset::Desk.config(),
            eval: EvalOptions::default(),
            finetune_from: None,
            eval_checkpoint: None,
            sweep_gammas: vec![0.0, 0.1, 1.0],
            sweep_seeds: vec![0, 1, 2],
            sweep_modes: vec![Mode::Tpld, Mode::Multitask, Mode::NoPretrain, Mode::TpldWoGpc],
        }
    }
}

fn bad_value(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: invalid value `{value}`: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad_value(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, value, "expected true or false")),
    }
}

/// Parses a snake_case enum label through its serde representation.
fn label<T: DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|e| bad_value(key, value, e))
}

fn label_text<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("not a label: {other:?}"),
    }
}

fn list<T>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| item(key, v.trim())).collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

/// Splits config text into `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.') {
            return Err(Error::Config(format!("line {}: malformed key `{k}`", i + 1)));
        }
        if let Some((_, _, first)) = out.iter().find(|(x, _, _)| x == k) {
            return Err(Error::Config(format!("line {}: key `{k}` already set on line {first}", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        for preset in ["model.preset", "train.preset"] {
            if let Some((k, v, _)) = pairs.iter().find(|(k, _, _)| k == preset) {
                cfg.set(k, v)?;
            }
        }
        for (k, v, _) in &pairs {
            if k != "model.preset" && k != "train.preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies one setting. Presets replace the whole section they name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key, value);
        let m = &mut self.model;
        let t = &mut self.train;
        match k {
            "seed" => self.seed = num(k, v)?,
            "dtype" => self.dtype = label(k, v)?,
            "out" => self.out = path(v),
            "synth.seed" => self.synth_seed = Some(num(k, v)?),
            "synth.sessions" => self.synth.n_sessions = num(k, v)?,
            "synth.max_turns" => self.synth.max_turns = num(k, v)?,
            "synth.revision_prob" => self.synth.revision_prob = num(k, v)?,
            "synth.domains" => self.synth.domains = list(k, v, |k, x| x.parse::<Domain>().map_err(|e| bad_value(k, x, e)))?,
            "split.train" => self.split_train = num(k, v)?,
            "split.valid" => self.split_valid = num(k, v)?,
            "corpus.dir" => self.corpus_dir = path(v),
            "model.preset" => {
                self.model_preset = label(k, v)?;
                self.model = self.model_preset.config();
            }
            "model.d_model" => m.d_model = num(k, v)?,
            "model.n_heads" => m.n_heads = num(k, v)?,
            "model.n_enc_layers" => m.n_enc_layers = num(k, v)?,
            "model.n_dec_layers" => m.n_dec_layers = num(k, v)?,
            "model.d_ff" => m.d_ff = num(k, v)?,
            "model.max_context" => m.max_context = num(k, v)?,
            "model.max_target" => m.max_target = num(k, v)?,
            "model.max_turns" => m.max_turns = num(k, v)?,
            "model.dropout" => m.dropout = num(k, v)?,
            "model.init_std" => m.init_std = num(k, v)?,
            "model.separate_sequence_encoders" => m.separate_sequence_encoders = flag(k, v)?,
            "train.preset" => {
                let mode = t.mode;
                self.train_preset = label(k, v)?;
                self.train = self.train_preset.config();
                self.train.mode = mode;
            }
            "train.mode" => t.mode = v.parse()?,
            "train.alpha" => t.coefficients.alpha = num(k, v)?,
            "train.beta" => t.coefficients.beta = num(k, v)?,
            "train.gamma" => t.coefficients.gamma = num(k, v)?,
            "train.tau" => t.coefficients.tau = num(k, v)?,
            "train.stage_epochs" => t.stage_epochs = num(k, v)?,
            "train.finetune_epochs" => t.finetune_epochs = num(k, v)?,
            "train.batch_size" => t.batch_size = num(k, v)?,
            "train.sessions_per_batch" => t.sessions_per_batch = num(k, v)?,
            "train.finetune_batch_size" => t.finetune_batch_size = num(k, v)?,
            "train.lr" => t.lr = num(k, v)?,
            "train.finetune_lr" => t.finetune_lr = num(k, v)?,
            "train.beta1" => t.beta1 = num(k, v)?,
            "train.beta2" => t.beta2 = num(k, v)?,
            "train.eps" => t.eps = num(k, v)?,
            "train.positives" => t.positives = num(k, v)?,
            "train.granularity" => t.granularity = label(k, v)?,
            "train.symmetrize_positives" => t.symmetrize_positives = flag(k, v)?,
            "train.reset_optimizer" => t.reset_optimizer = flag(k, v)?,
            "train.stop_grad_posterior" => t.stop_grad_posterior = flag(k, v)?,
            "train.gen_reduction" => t.gen_reduction = label(k, v)?,
            "train.acl_reduction" => t.acl_reduction = label(k, v)?,
            "train.finetune_belief_act" => t.finetune_belief_act = flag(k, v)?,
            "train.select_best_epoch" => t.select_best_epoch = flag(k, v)?,
            "eval.style" => self.eval.style = label(k, v)?,
            "eval.smoothing" => self.eval.smoothing = label(k, v)?,
            "eval.oracle_belief" => self.eval.oracle_belief = flag(k, v)?,
            "eval.checkpoint" => self.eval_checkpoint = path(v),
            "finetune.from" => self.finetune_from = path(v),
            "sweep.gammas" => self.sweep_gammas = list(k, v, num)?,
            "sweep.seeds" => self.sweep_seeds = list(k, v, num)?,
            "sweep.modes" => self.sweep_modes = list(k, v, |_, x| x.parse())?,
            _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let c = &t.coefficients;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("dtype", label_text(&self.dtype)),
            ("out", p(&self.out)),
            ("synth.sessions", self.synth.n_sessions.to_string()),
            ("synth.max_turns", self.synth.max_turns.to_string()),
            ("synth.revision_prob", self.synth.revision_prob.to_string()),
            ("synth.domains", join(&self.synth.domains, |d| d.to_string())),
            ("split.train", self.split_train.to_string()),
            ("split.valid", self.split_valid.to_string()),
            ("corpus.dir", p(&self.corpus_dir)),
            ("model.preset", label_text(&self.model_preset)),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.n_enc_layers", m.n_enc_layers.to_string()),
            ("model.n_dec_layers", m.n_dec_layers.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.max_context", m.max_context.to_string()),
            ("model.max_target", m.max_target.to_string()),
            ("model.max_turns", m.max_turns.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.init_std", m.init_std.to_string()),
            ("model.separate_sequence_encoders", m.separate_sequence_encoders.to_string()),
            ("train.preset", label_text(&self.train_preset)),
            ("train.mode", t.mode.to_string()),
            ("train.alpha", c.alpha.to_string()),
            ("train.beta", c.beta.to_string()),
            ("train.gamma", c.gamma.to_string()),
            ("train.tau", c.tau.to_string()),
            ("train.stage_epochs", t.stage_epochs.to_string()),
            ("train.finetune_epochs", t.finetune_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.sessions_per_batch", t.sessions_per_batch.to_string()),
            ("train.finetune_batch_size", t.finetune_batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.finetune_lr", t.finetune_lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.positives", t.positives.to_string()),
            ("train.granularity", label_text(&t.granularity)),
            ("train.symmetrize_positives", t.symmetrize_positives.to_string()),
            ("train.reset_optimizer", t.reset_optimizer.to_string()),
            ("train.stop_grad_posterior", t.stop_grad_posterior.to_string()),
            ("train.gen_reduction", label_text(&t.gen_reduction)),
            ("train.acl_reduction", label_text(&t.acl_reduction)),
            ("train.finetune_belief_act", t.finetune_belief_act.to_string()),
            ("train.select_best_epoch", t.select_best_epoch.to_string()),
            ("eval.style", label_text(&self.eval.style)),
            ("eval.smoothing", label_text(&self.eval.smoothing)),
            ("eval.oracle_belief", self.eval.oracle_belief.to_string()),
            ("eval.checkpoint", p(&self.eval_checkpoint)),
            ("finetune.from", p(&self.finetune_from)),
            ("sweep.gammas", join(&self.sweep_gammas, |g| g.to_string())),
            ("sweep.seeds", join(&self.sweep_seeds, |s| s.to_string())),
            ("sweep.modes", join(&self.sweep_modes, |m| m.to_string())),
        ];
        if let Some(s) = self.synth_seed {
            rows.insert(3, ("synth.seed", s.to_string()));
        }
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// The corpus seed actually used.
    pub fn corpus_seed(&self) -> u64 {
        self.synth_seed.unwrap_or(self.seed)
    }

    /// Synthesis spec with the effective corpus seed.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.corpus_seed(),
            ..self.synth.clone()
        }
    }

    /// Training config with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Model config for a vocabulary of `vocab_size`, seeded by the run seed.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Checks everything that does not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split_train)
            || !(0.0..=1.0).contains(&self.split_valid)
            || self.split_train + self.split_valid > 1.0
        {
            return Err(Error::Config(format!(
                "split.train {} and split.valid {} must be fractions summing to at most 1",
                self.split_train, self.split_valid
            )));
        }
        self.train_config().validate()?;
        self.model_config(crate::corpus::linearize::markers::RESERVED.len() + 1).validate()?;
        for &g in &self.sweep_gammas {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("sweep.gammas: {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Settings as a sorted map, for manifests.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        parse_pairs(&self.to_text())
            .expect("canonical text parses")
            .into_iter()
            .map(|(k, v, _)| (k, v))
            .collect()
    }
}
