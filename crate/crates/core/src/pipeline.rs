//! End-to-end runs: corpus preparation, pre-training, fine-tuning, evaluation and sweeps,
//! plus the on-disk layout the command-line tool writes.
//!
//! ```text
//! <out>/
//!   manifests/<command>.json
//!   corpus/{train,valid,test}.jsonl  corpus/database.json  corpus/ontology.json
//!   vocab.txt
//!   pretrain/<stage>.ckpt  pretrain/metrics.jsonl
//!   finetune/model.ckpt    finetune/metrics.jsonl
//!   eval/report.json  eval/report.txt  eval/predictions.jsonl
//!   sweep/gamma.tsv   sweep/modes.tsv
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::io::{load_corpus, load_json, save_corpus, save_json};
use crate::corpus::synth::synthesize_corpus;
use crate::corpus::{Database, DialogSession, Ontology, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prediction_records, EvalOptions, segment_token_accuracy, DialogRun, EvalReport};
use crate::model::{ModelConfig, Weights};
use crate::scalar::Scalar;
use crate::tokenizer::{Segment, Vocabulary};
use crate::trainer::{
    checkpoint_hash, finetune, load_checkpoint, metrics_to_string, run_schedule, save_checkpoint, FinetuneOutcome,
    MetricRecord, Mode, Progress, StageTag, TrainConfig, TrainData, TrainState, Validation,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TPLD_OUT";

/// `--out`, else `out` from the config, else `$TPLD_OUT`, else `runs/default`.
pub fn resolve_out(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn stage_checkpoint(&self, tag: StageTag) -> PathBuf {
        self.root.join("pretrain").join(format!("{tag}.ckpt"))
    }
    pub fn pretrain_metrics(&self) -> PathBuf {
        self.root.join("pretrain").join("metrics.jsonl")
    }
    pub fn finetune_checkpoint(&self) -> PathBuf {
        self.root.join("finetune").join("model.ckpt")
    }
    pub fn finetune_metrics(&self) -> PathBuf {
        self.root.join("finetune").join("metrics.jsonl")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("eval").join("report.txt")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("eval").join("predictions.jsonl")
    }
    pub fn gamma_table(&self) -> PathBuf {
        self.root.join("sweep").join("gamma.tsv")
    }
    pub fn mode_table(&self) -> PathBuf {
        self.root.join("sweep").join("modes.tsv")
    }
}

/// Corpus files relative to a corpus directory.
pub fn corpus_files(dir: &Path) -> [PathBuf; 5] {
    [
        dir.join("train.jsonl"),
        dir.join("valid.jsonl"),
        dir.join("test.jsonl"),
        dir.join("database.json"),
        dir.join("ontology.json"),
    ]
}

/// Refuses to overwrite existing outputs unless `force`.
pub fn claim(paths: &[PathBuf], force: bool) -> Result<()> {
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::PathCollision(p.clone()));
        }
    }
    for p in paths {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// What a command was run with. No timestamps, so reruns write identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub out: String,
    pub build_id: String,
    pub dtype: String,
    /// Canonical `key = value` dump of the effective configuration.
    pub config: Vec<String>,
}

/// Identifies one command invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub build_id: String,
    pub force: bool,
}

impl Invocation {
    pub fn manifest(&self, cfg: &RunConfig, layout: &Layout) -> Manifest {
        Manifest {
            command: self.command.clone(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            seed: cfg.seed,
            out: layout.root.display().to_string(),
            build_id: self.build_id.clone(),
            dtype: format!("{:?}", cfg.dtype).to_lowercase(),
            config: cfg.to_text().lines().map(String::from).collect(),
        }
    }
}

/// Sessions split three ways together with their database.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub splits: Splits,
    pub database: Database,
    pub ontology: Ontology,
}

/// Synthesizes and splits the configured corpus.
pub fn synthesize(cfg: &RunConfig) -> Result<Corpus> {
    let out = synthesize_corpus(&cfg.synth_spec())?;
    Ok(Corpus {
        splits: Splits::by_fraction(out.sessions, cfg.split_train, cfg.split_valid),
        database: out.database,
        ontology: out.ontology,
    })
}

/// Reads a corpus directory; the ontology is rebuilt from the database when absent.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    let [train, valid, test, db, onto] = corpus_files(dir);
    let database: Database = load_json(&db)?;
    database.validate()?;
    let ontology = if onto.exists() {
        load_json(&onto)?
    } else {
        let domains: Vec<_> = database.entities.iter().map(|e| e.domain).collect::<BTreeSet<_>>().into_iter().collect();
        Ontology::from_database(&domains, &database)
    };
    Ok(Corpus {
        splits: Splits {
            train: load_corpus(&train)?,
            valid: load_corpus(&valid)?,
            test: load_corpus(&test)?,
        },
        database,
        ontology,
    })
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    let files = corpus_files(dir);
    claim(&files, force)?;
    let [train, valid, test, db, onto] = &files;
    save_corpus(train, &corpus.splits.train)?;
    save_corpus(valid, &corpus.splits.valid)?;
    save_corpus(test, &corpus.splits.test)?;
    save_json(db, &corpus.database)?;
    save_json(onto, &corpus.ontology)
}

/// Corpus for a command: `corpus.dir`, else the run's own corpus, else a fresh synthesis
/// that is written into the run directory.
pub fn obtain_corpus(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<Corpus> {
    if let Some(dir) = &cfg.corpus_dir {
        return load_corpus_dir(dir);
    }
    let own = layout.corpus_dir();
    if corpus_files(&own)[..4].iter().all(|p| p.exists()) {
        return load_corpus_dir(&own);
    }
    let corpus = synthesize(cfg)?;
    write_corpus(&own, &corpus, force)?;
    Ok(corpus)
}

/// The run's vocabulary file, created from the training split on first use.
pub fn obtain_vocab(layout: &Layout, corpus: &Corpus) -> Result<Vocabulary> {
    let path = layout.vocab();
    if path.exists() {
        return Vocabulary::load(&path);
    }
    let vocab = Vocabulary::build(&corpus.splits.train);
    claim(std::slice::from_ref(&path), false)?;
    vocab.save(&path)?;
    Ok(vocab)
}

/// Everything derived from the corpus that training needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: TrainData,
}

impl Prepared {
    pub fn new(cfg: &RunConfig, corpus: Corpus, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config(vocab.len());
        model.validate()?;
        let train = cfg.train_config();
        let data = TrainData::build(&corpus.splits.train, &vocab, &model, train.granularity)?;
        Ok(Self {
            corpus,
            vocab,
            model,
            train,
            data,
        })
    }

    /// Vocabulary built from the training split.
    pub fn from_corpus(cfg: &RunConfig, corpus: Corpus) -> Result<Self> {
        let vocab = Vocabulary::build(&corpus.splits.train);
        Self::new(cfg, corpus, vocab)
    }

    /// Hash every checkpoint of this run must carry.
    pub fn checkpoint_hash(&self) -> String {
        checkpoint_hash(&self.model, &self.vocab.fingerprint())
    }

    pub fn initial_state<S: Scalar>(&self) -> Result<TrainState<S>> {
        TrainState::new(&self.model, &self.train, self.vocab.fingerprint())
    }

    pub fn validation(&self) -> Validation<'_> {
        Validation {
            sessions: &self.corpus.splits.valid,
            vocab: &self.vocab,
            db: &self.corpus.database,
            options: EvalOptions::default(),
        }
    }

    /// Runs the pre-training schedule; `on_stage` sees the state after each stage.
    pub fn pretrain<S: Scalar>(
        &self,
        on_stage: &mut dyn FnMut(StageTag, &TrainState<S>) -> Result<()>,
    ) -> Result<TrainState<S>> {
        let mut state = self.initial_state()?;
        run_schedule(&mut state, &self.train.schedule(), &self.data, &self.train, &mut |s, p| match p {
            Progress::StageDone(tag) => on_stage(tag, s),
            Progress::Epoch { .. } => Ok(()),
        })?;
        Ok(state)
    }

    /// Fine-tunes on the training split, picking the epoch by validation Combined.
    pub fn finetune<S: Scalar>(&self, start: &TrainState<S>, options: &EvalOptions) -> Result<FinetuneOutcome<S>> {
        let validation = Validation {
            options: *options,
            ..self.validation()
        };
        let has_valid = !self.corpus.splits.valid.is_empty();
        finetune(start, &self.data, &self.train, has_valid.then_some(&validation))
    }

    pub fn evaluate<S: Scalar>(
        &self,
        weights: &Weights<S>,
        options: &EvalOptions,
    ) -> Result<(EvalReport, Vec<DialogRun>)> {
        evaluate(weights, &self.corpus.splits.test, &self.vocab, &self.corpus.database, options)
    }

    /// Teacher-forced belief token accuracy on the test split.
    pub fn belief_accuracy<S: Scalar>(&self, weights: &Weights<S>) -> Result<f64> {
        heldout_belief_accuracy(weights, &self.corpus.splits.test, &self.vocab)
    }
}

/// Teacher-forced belief token accuracy over every turn of `sessions`.
pub fn heldout_belief_accuracy<S: Scalar>(
    weights: &Weights<S>,
    sessions: &[DialogSession],
    vocab: &Vocabulary,
) -> Result<f64> {
    let data = TrainData::build(sessions, vocab, &weights.config, Default::default())?;
    let items: Vec<_> = data
        .refs()
        .into_iter()
        .map(|r| (data.turn(r).context.clone(), data.turn(r).target.clone()))
        .collect();
    segment_token_accuracy(weights, &items, Segment::Belief, 32)
}

/// Outcome of one in-memory pre-train, fine-tune and test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mode: Mode,
    pub gamma: f64,
    pub seed: u64,
    /// Held-out belief accuracy after stage 1, when the schedule has one.
    pub stage1_belief_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub pretrain_metrics: Vec<MetricRecord>,
    pub finetune_metrics: Vec<MetricRecord>,
    pub report: EvalReport,
}

/// Runs the whole pipeline without touching the disk.
pub fn run_experiment<S: Scalar>(cfg: &RunConfig, corpus: Corpus) -> Result<ExperimentResult> {
    let prep = Prepared::from_corpus(cfg, corpus)?;
    let mut stage1 = None;
    let pretrained = prep.pretrain::<S>(&mut |tag, s| {
        if tag == StageTag::Stage1 {
            stage1 = Some(prep.belief_accuracy(&s.weights)?);
        }
        Ok(())
    })?;
    let tuned = prep.finetune(&pretrained, &cfg.eval)?;
    let (report, _) = prep.evaluate(&tuned.state.weights, &cfg.eval)?;
    log::info!(
        "{} gamma={} seed={}: combined {:.2} (bleu {:.2}, inform {:.2}, success {:.2})",
        prep.train.mode,
        prep.train.coefficients.gamma,
        cfg.seed,
        report.combined,
        report.bleu,
        report.inform,
        report.success
    );
    Ok(ExperimentResult {
        mode: prep.train.mode,
        gamma: prep.train.coefficients.gamma,
        seed: cfg.seed,
        stage1_belief_accuracy: stage1,
        best_epoch: tuned.best_epoch,
        pretrain_metrics: pretrained.history,
        finetune_metrics: tuned.state.history,
        report,
    })
}

/// One row per run plus per-setting means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub seed: u64,
    pub bleu: f64,
    pub inform: f64,
    pub success: f64,
    pub combined: f64,
}

impl SweepRow {
    pub fn new(setting: impl Into<String>, seed: u64, report: &EvalReport) -> Self {
        Self {
            setting: setting.into(),
            seed,
            bleu: report.bleu,
            inform: report.inform,
            success: report.success,
            combined: report.combined,
        }
    }
}

/// Mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SweepTable {
    /// Settings in first-appearance order.
    pub fn settings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.setting) {
                out.push(r.setting.clone());
            }
        }
        out
    }

    /// Mean and standard error of Combined for one setting.
    pub fn summary(&self, setting: &str) -> (f64, f64) {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.setting == setting).map(|r| r.combined).collect();
        mean_stderr(&xs)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("setting\tseed\tbleu\tinform\tsuccess\tcombined\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.setting, r.seed, r.bleu, r.inform, r.success, r.combined
            );
        }
        s.push_str("\nsetting\tmean_combined\tstderr\n");
        for k in self.settings() {
            let (m, e) = self.summary(&k);
            let _ = writeln!(s, "{k}\t{m:.4}\t{e:.4}");
        }
        s
    }
}

/// Runs `cfg` once per (setting, seed), where `apply` adjusts the config for a setting.
/// The corpus stays fixed across seeds unless `synth.seed` is unset, in which case it
/// follows the first seed.
pub fn sweep<S: Scalar, T: Clone>(
    cfg: &RunConfig,
    settings: &[(String, T)],
    seeds: &[u64],
    apply: impl Fn(&mut RunConfig, &T),
    on_result: &mut dyn FnMut(&ExperimentResult) -> Result<()>,
) -> Result<SweepTable> {
    if settings.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one setting and one seed".into()));
    }
    let base_corpus = RunConfig {
        synth_seed: Some(cfg.corpus_seed()),
        ..cfg.clone()
    };
    let corpus = match &cfg.corpus_dir {
        Some(dir) => load_corpus_dir(dir)?,
        None => synthesize(&base_corpus)?,
    };
    let mut rows = Vec::new();
    for (name, value) in settings {
        for &seed in seeds {
            let mut run = base_corpus.clone();
            run.seed = seed;
            apply(&mut run, value);
            let result = run_experiment::<S>(&run, corpus.clone())?;
            on_result(&result)?;
            rows.push(SweepRow::new(name.clone(), seed, &result.report));
        }
    }
    Ok(SweepTable { rows })
}

pub fn gamma_sweep<S: Scalar>(
    cfg: &RunConfig,
    gammas: &[f64],
    seeds: &[u64],
    on_result: &mut dyn FnMut(&ExperimentResult) -> Result<()>,
) -> Result<SweepTable> {
    let settings: Vec<(String, f64)> = gammas.iter().map(|&g| (format!("gamma={g}"), g)).collect();
    sweep::<S, f64>(cfg, &settings, seeds, |c, &g| c.train.coefficients.gamma = g, on_result)
}

pub fn mode_sweep<S: Scalar>(
    cfg: &RunConfig,
    modes: &[Mode],
    seeds: &[u64],
    on_result: &mut dyn FnMut(&ExperimentResult) -> Result<()>,
) -> Result<SweepTable> {
    let settings: Vec<(String, Mode)> = modes.iter().map(|&m| (m.to_string(), m)).collect();
    sweep::<S, Mode>(cfg, &settings, seeds, |c, &m| c.train.mode = m, on_result)
}

fn write_manifest(inv: &Invocation, cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let path = layout.manifest(&inv.command);
    claim(std::slice::from_ref(&path), inv.force)?;
    save_json(&path, &inv.manifest(cfg, layout))
}

/// `synth`: writes the split corpus, database and ontology.
pub fn cmd_synth(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<Corpus> {
    cfg.validate()?;
    claim(&[layout.manifest(&inv.command)], inv.force)?;
    let corpus = synthesize(cfg)?;
    write_corpus(&layout.corpus_dir(), &corpus, inv.force)?;
    write_manifest(inv, cfg, layout)?;
    Ok(corpus)
}

fn prepare_run(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = obtain_corpus(cfg, layout, force)?;
    let vocab = obtain_vocab(layout, &corpus)?;
    Prepared::new(cfg, corpus, vocab)
}

/// `pretrain`: one checkpoint per finished stage and the metrics log.
pub fn cmd_pretrain<S: Scalar>(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<TrainState<S>> {
    let schedule = cfg.train_config().schedule();
    let mut outputs: Vec<PathBuf> = schedule.stages.iter().map(|s| layout.stage_checkpoint(s.tag)).collect();
    outputs.push(layout.pretrain_metrics());
    outputs.push(layout.manifest(&inv.command));
    claim(&outputs, inv.force)?;
    let prep = prepare_run(cfg, layout, inv.force)?;
    let state = prep.pretrain::<S>(&mut |tag, s| save_checkpoint(s, tag, layout.stage_checkpoint(tag)))?;
    write_text(&layout.pretrain_metrics(), &metrics_to_string(&state.history)?)?;
    write_manifest(inv, cfg, layout)?;
    Ok(state)
}

/// Checkpoint fine-tuning starts from, or `None` for a fresh model.
pub fn finetune_source(cfg: &RunConfig, layout: &Layout) -> Option<PathBuf> {
    if let Some(p) = &cfg.finetune_from {
        return Some(p.clone());
    }
    cfg.train_config()
        .schedule()
        .stages
        .last()
        .map(|s| layout.stage_checkpoint(s.tag))
}

/// `finetune`: the selected weights and the fine-tuning metrics log.
pub fn cmd_finetune<S: Scalar>(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<FinetuneOutcome<S>> {
    claim(
        &[layout.finetune_checkpoint(), layout.finetune_metrics(), layout.manifest(&inv.command)],
        inv.force,
    )?;
    let prep = prepare_run(cfg, layout, inv.force)?;
    let start = match finetune_source(cfg, layout) {
        Some(path) => load_checkpoint::<S>(&path, Some(&prep.checkpoint_hash()))?.0,
        None => prep.initial_state()?,
    };
    let out = prep.finetune(&start, &cfg.eval)?;
    save_checkpoint(&out.state, StageTag::Finetune, layout.finetune_checkpoint())?;
    write_text(&layout.finetune_metrics(), &metrics_to_string(&out.state.history)?)?;
    write_manifest(inv, cfg, layout)?;
    Ok(out)
}

/// `eval`: test-split report as JSON and as a table, plus per-turn predictions.
pub fn cmd_eval<S: Scalar>(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<EvalReport> {
    claim(
        &[layout.report_json(), layout.report_txt(), layout.predictions(), layout.manifest(&inv.command)],
        inv.force,
    )?;
    let prep = prepare_run(cfg, layout, inv.force)?;
    let path = cfg.eval_checkpoint.clone().unwrap_or_else(|| layout.finetune_checkpoint());
    let (state, _) = load_checkpoint::<S>(&path, Some(&prep.checkpoint_hash()))?;
    let (report, runs) = prep.evaluate(&state.weights, &cfg.eval)?;
    save_json(layout.report_json(), &report)?;
    write_text(&layout.report_txt(), &report.table())?;
    let mut lines = String::new();
    for r in prediction_records(&runs) {
        lines.push_str(&serde_json::to_string(&r)?);
        lines.push('\n');
    }
    write_text(&layout.predictions(), &lines)?;
    write_manifest(inv, cfg, layout)?;
    Ok(report)
}

/// `sweep-gamma`: Combined per (γ, seed) over `sweep.gammas` × `sweep.seeds`.
pub fn cmd_sweep_gamma<S: Scalar>(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<SweepTable> {
    cfg.validate()?;
    claim(&[layout.gamma_table(), layout.manifest(&inv.command)], inv.force)?;
    let table = gamma_sweep::<S>(cfg, &cfg.sweep_gammas, &cfg.sweep_seeds, &mut |_| Ok(()))?;
    write_text(&layout.gamma_table(), &table.to_tsv())?;
    write_manifest(inv, cfg, layout)?;
    Ok(table)
}

/// `sweep-modes`: Combined per (mode, seed) over `sweep.modes` × `sweep.seeds`.
pub fn cmd_sweep_modes<S: Scalar>(cfg: &RunConfig, layout: &Layout, inv: &Invocation) -> Result<SweepTable> {
    cfg.validate()?;
    claim(&[layout.mode_table(), layout.manifest(&inv.command)], inv.force)?;
    let table = mode_sweep::<S>(cfg, &cfg.sweep_modes, &cfg.sweep_seeds, &mut |_| Ok(()))?;
    write_text(&layout.mode_table(), &table.to_tsv())?;
    write_manifest(inv, cfg, layout)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_three() {
        let (m, e) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((e - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn claim_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        claim(std::slice::from_ref(&p), false).unwrap();
        fs::write(&p, "x").unwrap();
        assert!(matches!(claim(std::slice::from_ref(&p), false), Err(Error::PathCollision(_))));
        claim(std::slice::from_ref(&p), true).unwrap();
    }
}
