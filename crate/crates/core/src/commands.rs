//! Command implementations behind the `s2r2` binary. Each writes its
//! artifacts atomically plus a `run_manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn_diag::{realloc_js, write_attn_diag, AttnDiagRecord, SegmentContext};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_jsonl, write_json_pretty, write_jsonl};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::losses::kl_complexity;
use crate::metrics::{self, summarize, EvalRecord, EvalSummary, DEFAULT_DELTA};
use crate::numerics::Matrix;
use crate::perturb::{
    apply_external_paraphrase, load_lexicon, perturb_text, record_seed, split_source_segments, PerturbConfig, PerturbKind,
    PerturbRecord, SynonymLexicon,
};
use crate::report::{final_aggregates, norms_svg, ratio_flags, to_csv, RatioFlag, RunLog, RATIO_FLAG_THRESHOLD};
use crate::segmenter::RelationLexicon;
use crate::toymodel::checkpoint::{load_checkpoint_with_step, save_checkpoint_at};
use crate::toymodel::{init_model, load_checkpoint, Model, ModelConfig};
use crate::trainer::{
    pretrain_base, read_train_log, reference_segments, target_tokens, train_loop_from, write_train_log, TrainConfig,
    TrainContext, TrainExample, TrainLogRow, TrainMode,
};

pub const THREADS_ENV: &str = "S2R2_THREADS";
pub const MANIFEST_NAME: &str = "run_manifest.json";

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    fn start(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
        })
    }

    fn finish(mut self, out: &Path) -> Result<Self> {
        self.finished_unix_ms = unix_ms();
        let path = out.join(MANIFEST_NAME);
        self.outputs.push(path_str(&path));
        write_json_pretty(&path, &self)?;
        Ok(self)
    }
}

pub fn read_run_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Reads a JSON config file, or returns the default when `path` is `None`.
pub fn load_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::parse(p, e.line(), e.to_string()))
        }
    }
}

/// Thread cap from `S2R2_THREADS` (unset or empty means rayon's default).
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn optional_lexicon(path: Option<&String>) -> Result<SynonymLexicon> {
    match path {
        Some(p) => load_lexicon(p),
        None => Ok(SynonymLexicon::default()),
    }
}

// ---------------------------------------------------------------- perturb

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbJob {
    #[serde(flatten)]
    pub perturb: PerturbConfig,
    pub lexicon: Option<String>,
    pub paraphrase_sidecar: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub fn perturb_records(inputs: &[TextRecord], cfg: &PerturbConfig, lexicon: &SynonymLexicon) -> Vec<PerturbRecord> {
    inputs
        .iter()
        .flat_map(|rec| {
            let seed = record_seed(cfg.seed, &rec.id);
            cfg.kinds.iter().map(move |&kind| PerturbRecord {
                id: rec.id.clone(),
                clean: rec.text.clone(),
                perturbed: perturb_text(&rec.text, kind, cfg, lexicon, seed),
                kind,
                seed,
            })
        })
        .collect()
}

pub fn cmd_perturb(input: &Path, job: &PerturbJob, out: &Path) -> Result<RunManifest> {
    job.perturb.validate()?;
    let mut man = RunManifest::start("perturb", job)?;
    man.seeds.insert("perturb".into(), job.perturb.seed);
    man.inputs.push(path_str(input));
    let inputs: Vec<TextRecord> = read_jsonl(input)?;
    let lexicon = optional_lexicon(job.lexicon.as_ref())?;
    let mut records = perturb_records(&inputs, &job.perturb, &lexicon);
    if let Some(side) = &job.paraphrase_sidecar {
        man.inputs.push(side.clone());
        let (para, rest): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.kind == PerturbKind::Paraphrase);
        let (para, stats) = apply_external_paraphrase(para, side)?;
        if stats.unmatched > 0 {
            log::warn!("{} paraphrase records had no sidecar entry", stats.unmatched);
        }
        records = rest.into_iter().chain(para).collect();
        records.sort_by(|a, b| a.id.cmp(&b.id).then(a.kind.cmp(&b.kind)));
    } else if job.perturb.kinds.contains(&PerturbKind::Paraphrase) {
        log::warn!("paraphrase kind requested without a sidecar; records keep the clean text");
    }
    let path = out.join("perturbed.jsonl");
    write_jsonl(&path, &records)?;
    man.outputs.push(path_str(&path));
    man.finish(out)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Frozen base checkpoint; a fresh seeded model when absent.
    pub base: Option<String>,
    pub lexicon: Option<String>,
    pub relations: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonFiniteDump {
    pub step: usize,
    pub detail: String,
    pub last_rows: Vec<TrainLogRow>,
}

fn train_context(job: &TrainJob) -> Result<TrainContext> {
    Ok(TrainContext {
        lexicon: optional_lexicon(job.lexicon.as_ref())?,
        relations: match &job.relations {
            Some(p) => RelationLexicon::load(p)?,
            None => RelationLexicon::default(),
        },
    })
}

/// Trains adapters. With `resume`, continues from that checkpoint's step and
/// keeps earlier rows of an existing `train_log.csv` in `out`.
pub fn cmd_train(dataset: &Path, job: &TrainJob, out: &Path, resume: Option<&Path>) -> Result<RunManifest> {
    job.train.validate()?;
    let mut man = RunManifest::start("train", job)?;
    man.seeds.insert("train".into(), job.train.seed);
    man.seeds.insert("model".into(), job.model.seed);
    man.seeds.insert("perturb".into(), job.train.perturb.seed);
    man.inputs.push(path_str(dataset));
    let data: Vec<TrainExample> = read_jsonl(dataset)?;
    let ctx = train_context(job)?;
    let log_path = out.join("train_log.csv");

    let (model, start, mut prior_rows) = match resume {
        Some(dir) => {
            man.inputs.push(path_str(dir));
            let (m, step) = load_checkpoint_with_step(dir)?;
            if job.train.momentum.is_some() {
                log::warn!("resuming with momentum: velocity is not checkpointed and restarts at zero");
            }
            let rows = if log_path.exists() {
                read_train_log(&log_path)?.into_iter().filter(|r| r.step <= step as usize).collect()
            } else {
                Vec::new()
            };
            (m, step as usize, rows)
        }
        None => match &job.base {
            Some(b) => {
                man.inputs.push(b.clone());
                (load_checkpoint(b)?, 0, Vec::new())
            }
            None => (init_model(job.model.clone())?, 0, Vec::new()),
        },
    };
    if start >= job.train.steps {
        return Err(Error::Config(format!("checkpoint is at step {start}; nothing left of {} steps", job.train.steps)));
    }

    let ckpt_root = out.join("checkpoints");
    let mut written = Vec::new();
    let outcome = train_loop_from(model, &data, &job.train, &ctx, start, |m, step| {
        let dir = ckpt_root.join(format!("step-{step:06}"));
        save_checkpoint_at(m, &dir, step as u64)?;
        written.push(path_str(&dir));
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::NonFiniteLoss { step, detail }) => {
            let dump = NonFiniteDump { step, detail: detail.clone(), last_rows: prior_rows.iter().rev().take(10).cloned().collect() };
            write_json_pretty(out.join("nonfinite_dump.json"), &dump)?;
            return Err(Error::NonFiniteLoss { step, detail });
        }
        Err(e) => return Err(e),
    };
    let final_dir = out.join("checkpoint");
    save_checkpoint_at(&outcome.model, &final_dir, outcome.last_step as u64)?;
    prior_rows.extend(outcome.rows);
    write_train_log(&log_path, &prior_rows)?;
    man.outputs.extend(written);
    man.outputs.push(path_str(&final_dir));
    man.outputs.push(path_str(&log_path));
    man.finish(out)
}

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainJob {
    pub model: ModelConfig,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for PretrainJob {
    fn default() -> Self {
        Self { model: ModelConfig::default(), steps: 1000, learning_rate: 0.1 }
    }
}

/// CE-only training of the base (adapters inert at `B = 0`), saved as the
/// frozen starting checkpoint for adapter runs.
pub fn cmd_pretrain(dataset: &Path, job: &PretrainJob, out: &Path) -> Result<RunManifest> {
    if job.steps == 0 || !(job.learning_rate > 0.0) {
        return Err(Error::Config("pretrain needs steps >= 1 and a positive learning rate".into()));
    }
    let mut man = RunManifest::start("pretrain", job)?;
    man.seeds.insert("model".into(), job.model.seed);
    man.inputs.push(path_str(dataset));
    let data: Vec<TrainExample> = read_jsonl(dataset)?;
    let mut model = init_model(job.model.clone())?;
    let ces = pretrain_base(&mut model, &data, job.steps, job.learning_rate)?;
    let dir = out.join("checkpoint");
    save_checkpoint_at(&model, &dir, 0)?;
    let mut csv = String::from("step,ce\n");
    for (i, ce) in ces.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, ce));
    }
    let log = out.join("pretrain_log.csv");
    atomic_write(&log, csv.as_bytes())?;
    man.outputs.push(path_str(&dir));
    man.outputs.push(path_str(&log));
    man.finish(out)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalJob {
    #[serde(flatten)]
    pub perturb: PerturbConfig,
    pub lexicon: Option<String>,
    pub max_new: usize,
    pub delta: f64,
    pub tau: f64,
    /// Recorded for cross-dataset runs.
    pub train_set: Option<String>,
    pub attn_diag: bool,
}

impl Default for EvalJob {
    fn default() -> Self {
        Self {
            perturb: PerturbConfig { preserve_segments: true, ..Default::default() },
            lexicon: None,
            max_new: 96,
            delta: DEFAULT_DELTA,
            tau: 1.0,
            train_set: None,
            attn_diag: true,
        }
    }
}

/// Either a source to generate from, or already generated outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalInput {
    Outputs { id: String, clean_output: String, pert_output: String, reference: String, kind: String },
    Source { id: String, src: String, tgt: String },
}

/// Word vectors as the mean of the word's character-token embeddings.
pub fn word_vectors(model: &Model, text: &str) -> Vec<Vec<f64>> {
    let d = model.config.d_model;
    text.split_whitespace()
        .map(|w| {
            let ids = model.encode(&w.to_lowercase());
            let mut v = vec![0.0; d];
            for &t in &ids {
                for (o, x) in v.iter_mut().zip(model.base.tok_emb.row(t as usize)) {
                    *o += x / ids.len() as f64;
                }
            }
            v
        })
        .collect()
}

pub fn score_outputs(model: &Model, id: &str, kind: &str, clean: &str, pert: &str, reference: &str) -> EvalRecord {
    let sim = metrics::self_sim(&word_vectors(model, clean), &word_vectors(model, pert));
    EvalRecord::score(id, kind, clean, pert, reference, sim)
}

fn token_ranges(pieces: &[&str], offset: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(pieces.len());
    let mut at = offset;
    for p in pieces {
        let n = p.chars().count();
        out.push(at..at + n);
        at += n;
    }
    out
}

/// Per-(layer, head) reallocation and decomposition residuals for one pair of
/// sources under the reference target. `None` when source segment counts
/// differ.
pub fn attention_diagnostics(model: &Model, id: &str, src: &str, src_pert: &str, tgt: &str) -> Result<Option<Vec<AttnDiagRecord>>> {
    let (sc, sp) = (split_source_segments(src), split_source_segments(src_pert));
    if sc.len() != sp.len() || sc.is_empty() {
        return Ok(None);
    }
    if sc.iter().chain(&sp).any(|s| s.is_empty()) {
        return Ok(None);
    }
    let tgt_toks = target_tokens(model, tgt);
    let clean = model.forward_teacher_forced(&model.encode(src), &tgt_toks)?;
    let pert = model.forward_teacher_forced(&model.encode(src_pert), &tgt_toks)?;
    let seg = reference_segments(model, tgt)?;
    let out_c = seg.offset_boundaries(clean.tgt_offset());
    let out_p = seg.offset_boundaries(pert.tgt_offset());
    let (src_c, src_p) = (token_ranges(&sc, 0), token_ranges(&sp, 0));
    let dh = model.config.d_head();
    let mut recs = Vec::new();
    for layer in 0..model.config.n_layers {
        for head in 0..model.config.n_heads {
            let head_values = |v: &Matrix| Matrix::from_fn(v.rows(), dh, |i, k| v[(i, head * dh + k)]);
            let cc = SegmentContext::from_tokens(&clean.attentions[layer][head], &head_values(&clean.values[layer]), &out_c, &src_c, layer, head)?;
            let cp = SegmentContext::from_tokens(&pert.attentions[layer][head], &head_values(&pert.values[layer]), &out_p, &src_p, layer, head)?;
            let rep = realloc_js(&cc.attention, &cp.attention)?;
            let dec = crate::attn_diag::decompose_shift(&cc, &cp)?;
            recs.push(AttnDiagRecord { id: id.to_string(), layer, head, r: rep.r, mean_r: rep.mean_r, max_r: rep.max_r, residuals: dec.residual });
        }
    }
    Ok(Some(recs))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
    pub attn: Vec<AttnDiagRecord>,
}

pub fn evaluate(model: &Model, inputs: &[EvalInput], job: &EvalJob, lexicon: &SynonymLexicon) -> Result<EvalOutcome> {
    job.perturb.validate()?;
    if job.max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let jobs: Vec<(&EvalInput, Option<PerturbKind>)> = inputs
        .iter()
        .flat_map(|inp| match inp {
            EvalInput::Outputs { .. } => vec![(inp, None)],
            EvalInput::Source { .. } => job.perturb.kinds.iter().map(|&k| (inp, Some(k))).collect(),
        })
        .collect();
    let results: Vec<(EvalRecord, Vec<AttnDiagRecord>)> = jobs
        .par_iter()
        .map(|&(inp, kind)| -> Result<(EvalRecord, Vec<AttnDiagRecord>)> {
            match (inp, kind) {
                (EvalInput::Outputs { id, clean_output, pert_output, reference, kind }, _) => {
                    Ok((score_outputs(model, id, kind, clean_output, pert_output, reference), Vec::new()))
                }
                (EvalInput::Source { id, src, tgt }, Some(kind)) => {
                    let src_p = perturb_text(src, kind, &job.perturb, lexicon, record_seed(job.perturb.seed, id));
                    let clean_out = model.generate_text(src, job.max_new)?;
                    let pert_out = model.generate_text(&src_p, job.max_new)?;
                    let rec = score_outputs(model, id, kind.label(), &clean_out, &pert_out, tgt);
                    let attn = if job.attn_diag {
                        let diag_id = format!("{id}/{kind}");
                        attention_diagnostics(model, &diag_id, src, &src_p, tgt)?.unwrap_or_default()
                    } else {
                        Vec::new()
                    };
                    Ok((rec, attn))
                }
                (EvalInput::Source { .. }, None) => unreachable!("source inputs always carry a kind"),
            }
        })
        .collect::<Result<_>>()?;
    let mut paired: Vec<(EvalRecord, Vec<AttnDiagRecord>)> = results;
    paired.sort_by(|a, b| a.0.id.cmp(&b.0.id).then(a.0.kind.cmp(&b.0.kind)));
    let (records, attn): (Vec<EvalRecord>, Vec<Vec<AttnDiagRecord>>) = paired.into_iter().unzip();
    let d_kl = kl_complexity(&model.adapters, job.tau)?;
    let summary = summarize(&records, d_kl, job.tau, job.delta)?;
    Ok(EvalOutcome { records, summary, attn: attn.into_iter().flatten().collect() })
}

#[derive(Debug, Serialize)]
struct EvalSummaryFile<'a> {
    #[serde(flatten)]
    summary: &'a EvalSummary,
    checkpoint: String,
    eval_set: String,
    train_set: Option<String>,
    cross_dataset: bool,
}

pub fn cmd_eval(checkpoint: &Path, eval_set: &Path, job: &EvalJob, out: &Path) -> Result<RunManifest> {
    let mut man = RunManifest::start("eval", job)?;
    man.seeds.insert("perturb".into(), job.perturb.seed);
    man.inputs.push(path_str(checkpoint));
    man.inputs.push(path_str(eval_set));
    let model = load_checkpoint(checkpoint)?;
    let inputs: Vec<EvalInput> = read_jsonl(eval_set)?;
    let lexicon = optional_lexicon(job.lexicon.as_ref())?;
    let threads = threads_from_env()?;
    let outcome = with_pool(threads, || evaluate(&model, &inputs, job, &lexicon))??;

    let csv_path = out.join("eval.csv");
    atomic_write(&csv_path, &to_csv(&outcome.records)?)?;
    let eval_set_s = path_str(eval_set);
    let summary_path = out.join("summary.json");
    let cross = job.train_set.as_ref().is_some_and(|t| Path::new(t) != eval_set);
    write_json_pretty(
        &summary_path,
        &EvalSummaryFile {
            summary: &outcome.summary,
            checkpoint: path_str(checkpoint),
            eval_set: eval_set_s,
            train_set: job.train_set.clone(),
            cross_dataset: cross,
        },
    )?;
    man.outputs.push(path_str(&csv_path));
    man.outputs.push(path_str(&summary_path));
    if job.attn_diag {
        let p = out.join("attn_diag.jsonl");
        write_attn_diag(&p, &outcome.attn)?;
        man.outputs.push(path_str(&p));
    }
    if let Some(t) = &job.train_set {
        man.inputs.push(t.clone());
    }
    man.finish(out)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub manifest: RunManifest,
    pub flags: Vec<RatioFlag>,
}

/// `label=path` or a bare path (label from the parent directory name, else
/// the file stem).
pub fn parse_log_arg(arg: &str) -> (String, PathBuf) {
    if let Some((label, path)) = arg.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let p = PathBuf::from(arg);
    let label = p
        .parent()
        .and_then(|d| d.file_name())
        .or_else(|| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    (label, p)
}

pub fn cmd_report(logs: &[(String, PathBuf)], out: &Path, threshold: Option<f64>) -> Result<ReportOutcome> {
    if logs.is_empty() {
        return Err(Error::EmptyInput("report: no training logs"));
    }
    let threshold = threshold.unwrap_or(RATIO_FLAG_THRESHOLD);
    let mut man = RunManifest::start("report", &serde_json::json!({ "logs": logs, "ratio_threshold": threshold }))?;
    let mut runs = Vec::new();
    for (label, path) in logs {
        man.inputs.push(path_str(path));
        let rows = read_train_log(path)?;
        if rows.is_empty() {
            return Err(Error::parse(path, 1, "training log has no rows"));
        }
        runs.push(RunLog { label: label.clone(), rows });
    }
    let svg = out.join("norms.svg");
    atomic_write(&svg, norms_svg(&runs)?.as_bytes())?;
    let tables = out.join("tables.csv");
    atomic_write(&tables, &to_csv(&final_aggregates(&runs)?)?)?;
    let flags = ratio_flags(&runs, threshold);
    let flags_path = out.join("ratio_flags.csv");
    let flag_bytes = if flags.is_empty() { b"run,step,max_ab_ratio\n".to_vec() } else { to_csv(&flags)? };
    atomic_write(&flags_path, &flag_bytes)?;
    for f in &flags {
        log::warn!("{}: step {} adapter norm ratio {:.2} exceeds {threshold}", f.run, f.step, f.max_ab_ratio);
    }
    man.outputs.extend([path_str(&svg), path_str(&tables), path_str(&flags_path)]);
    Ok(ReportOutcome { manifest: man.finish(out)?, flags })
}

// ---------------------------------------------------------------- gradcheck

pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: Option<&Path>) -> Result<GradcheckReport> {
    let man = RunManifest::start("gradcheck", cfg)?;
    let report = run_gradcheck(cfg)?;
    if let Some(out) = out {
        let mut man = man;
        man.seeds.insert("gradcheck".into(), cfg.seed);
        let p = out.join("gradcheck.json");
        write_json_pretty(&p, &report)?;
        man.outputs.push(path_str(&p));
        man.finish(out)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- synth

/// Writes the synthetic summary task (train / held-out) and its copy pre-task.
pub fn cmd_synth(n_train: usize, n_heldout: usize, seed: u64, out: &Path) -> Result<RunManifest> {
    let mut man = RunManifest::start("synth", &serde_json::json!({ "n_train": n_train, "n_heldout": n_heldout }))?;
    man.seeds.insert("synth".into(), seed);
    let files = [
        ("pretask.jsonl", crate::synthetic::copy_task(n_train.max(1) * 4, seed)),
        ("train.jsonl", crate::synthetic::summary_task(n_train, seed.wrapping_add(1))),
        ("heldout.jsonl", crate::synthetic::summary_task(n_heldout, seed.wrapping_add(2))),
    ];
    for (name, rows) in files {
        let p = out.join(name);
        write_jsonl(&p, &rows)?;
        man.outputs.push(path_str(&p));
    }
    let lex: BTreeMap<&str, Vec<&str>> =
        [("name", vec!["called"]), ("age", vec!["aged"]), ("city", vec!["town"]), ("job", vec!["work"])].into_iter().collect();
    let p = out.join("lexicon.json");
    write_json_pretty(&p, &lex)?;
    man.outputs.push(path_str(&p));
    man.finish(out)
}

/// Modes accepted by `--mode`.
pub fn parse_mode(s: &str) -> Result<TrainMode> {
    s.parse()
}
