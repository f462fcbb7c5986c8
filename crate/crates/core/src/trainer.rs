//! Adapter training: cross-entropy plus segment-drift and adapter-norm
//! regularisers, with CE-only and holistic-KL baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{SinkhornParams, Solver};
use crate::error::{Error, Result};
use crate::losses::{
    bal_loss, kl_complexity, segment_embed_backward, sem_floor, stab_loss, stab_loss_grad, total_loss, AdapterGrad,
    Lambdas, LossBreakdown, Projection, SemanticAlignment,
};
use crate::numerics::{Distribution, Matrix};
use crate::perturb::{perturb_text, record_seed, split_source_segments, PerturbConfig, PerturbKind, SynonymLexicon, BOUNDARY_CHARS};
use crate::segmenter::{
    detect_indicators, importance_weights, segment_embed, segment_punct, ImportanceAlphas, RelationLexicon, SegmentedText,
    IMPORTANCE_FLOOR,
};
use crate::toymodel::{tokenizer::EOS, ForwardTrace, Grads, LoraNorms, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    S2r2,
    CeOnly,
    SeqKlBaseline,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::S2r2 => "s2r2",
            TrainMode::CeOnly => "ce_only",
            TrainMode::SeqKlBaseline => "seq_kl_baseline",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2r2" => Ok(TrainMode::S2r2),
            "ce_only" => Ok(TrainMode::CeOnly),
            "seq_kl_baseline" => Ok(TrainMode::SeqKlBaseline),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total number of steps (a resumed run continues up to this count).
    pub steps: usize,
    pub learning_rate: f64,
    pub lambdas: Lambdas,
    pub beta: f64,
    pub perturb: PerturbConfig,
    pub solver: Solver,
    pub mode: TrainMode,
    pub log_every: usize,
    pub seed: u64,
    /// Heavy-ball coefficient; `None` is plain gradient descent.
    pub momentum: Option<f64>,
    pub stab_projections: Vec<Projection>,
    /// Importance-weighted segment marginals instead of uniform ones.
    pub use_importance: bool,
    pub importance_alphas: ImportanceAlphas,
    /// Stop once the mean clean CE over the training set falls to this value
    /// (checked on log steps).
    pub early_stop_ce: Option<f64>,
    /// Defaults to `log_every`.
    pub checkpoint_every: Option<usize>,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.05,
            lambdas: Lambdas::default(),
            beta: 10.0,
            perturb: PerturbConfig::default(),
            solver: Solver::Exact,
            mode: TrainMode::S2r2,
            log_every: 10,
            seed: 0,
            momentum: None,
            stab_projections: vec![Projection::Q, Projection::K],
            use_importance: false,
            importance_alphas: ImportanceAlphas::default(),
            early_stop_ce: None,
            checkpoint_every: None,
            tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let l = self.lambdas;
        if !(l.sem >= 0.0 && l.stab >= 0.0 && l.bal >= 0.0) {
            return bad("lambdas must be nonnegative".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum {m} outside [0, 1)"));
            }
        }
        if self.stab_projections.is_empty() {
            return bad("stab_projections must be nonempty".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        self.perturb.validate()
    }

    /// Loss weights actually applied in this mode.
    pub fn effective_lambdas(&self) -> Lambdas {
        match self.mode {
            TrainMode::S2r2 => self.lambdas,
            TrainMode::CeOnly => Lambdas::ZERO,
            TrainMode::SeqKlBaseline => Lambdas { sem: self.lambdas.sem, stab: 0.0, bal: 0.0 },
        }
    }

    pub fn sinkhorn_fallback(&self) -> SinkhornParams {
        match self.solver {
            Solver::Sinkhorn(p) => p,
            Solver::Exact => SinkhornParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: String,
    pub src: String,
    pub tgt: String,
}

/// One training-log line. Loss columns are measured before the step's
/// update; norm columns after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub kind: String,
    pub ce: f64,
    pub sem: f64,
    pub sem_calibrated: f64,
    pub stab: f64,
    pub bal: f64,
    pub total: f64,
    pub prod_f_sum: f64,
    pub a_f_sum: f64,
    pub b_f_sum: f64,
    pub delta_f_sum: f64,
    pub d_kl: f64,
    pub max_ab_ratio: Option<f64>,
}

pub fn write_train_log(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::fsutil::atomic_write(path, &bytes)
}

pub fn read_train_log(path: impl AsRef<Path>) -> Result<Vec<TrainLogRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: TrainLogRow = rec.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Mean over target positions of `KL(p‖q) + KL(q‖p)` with `p, q` the row
/// softmaxes. Returns the value and gradients for both logit matrices.
pub fn seq_kl_baseline_loss(logits_clean: &Matrix, logits_pert: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if logits_clean.shape() != logits_pert.shape() {
        return Err(Error::shape(format!("logits {:?} vs {:?}", logits_clean.shape(), logits_pert.shape())));
    }
    let (n, v) = logits_clean.shape();
    if n == 0 {
        return Err(Error::EmptyInput("seq_kl_baseline_loss"));
    }
    let mut da = Matrix::zeros(n, v);
    let mut db = Matrix::zeros(n, v);
    let mut total = 0.0;
    let log_softmax = |row: &[f64]| {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect::<Vec<f64>>()
    };
    for i in 0..n {
        let lp = log_softmax(logits_clean.row(i));
        let lq = log_softmax(logits_pert.row(i));
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let q: Vec<f64> = lq.iter().map(|x| x.exp()).collect();
        let kl_pq: f64 = (0..v).map(|k| p[k] * (lp[k] - lq[k])).sum();
        let kl_qp: f64 = (0..v).map(|k| q[k] * (lq[k] - lp[k])).sum();
        total += kl_pq + kl_qp;
        for k in 0..v {
            da[(i, k)] = (p[k] * (lp[k] - lq[k] - kl_pq) + p[k] - q[k]) / n as f64;
            db[(i, k)] = (q[k] * (lq[k] - lp[k] - kl_qp) + q[k] - p[k]) / n as f64;
        }
    }
    Ok((total / n as f64, da, db))
}

/// Per-run context that does not change between steps.
#[derive(Debug, Clone, Default)]
pub struct TrainContext {
    pub lexicon: SynonymLexicon,
    pub relations: RelationLexicon,
}

pub fn step_seed(seed: u64, step: usize, id: &str) -> u64 {
    record_seed(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), id)
}

pub fn perturbation_for_step(cfg: &TrainConfig, ctx: &TrainContext, ex: &TrainExample, step: usize) -> (PerturbKind, String) {
    let kinds = &cfg.perturb.kinds;
    let kind = kinds[(step.max(1) - 1) % kinds.len()];
    let text = perturb_text(&ex.src, kind, &cfg.perturb, &ctx.lexicon, step_seed(cfg.seed, step, &ex.id));
    (kind, text)
}

/// Target tokens with EOS appended.
pub fn target_tokens(model: &Model, tgt: &str) -> Vec<u32> {
    let mut t = model.encode(tgt);
    t.push(EOS);
    t
}

/// Segmentation of the reference target text (EOS excluded).
pub fn reference_segments(model: &Model, tgt: &str) -> Result<SegmentedText> {
    segment_punct(&model.encode(tgt), &model.tokenizer.punct_ids(&BOUNDARY_CHARS))
}

fn rows_at(trace: &ForwardTrace, n: usize) -> Matrix {
    let off = trace.tgt_offset();
    Matrix::from_fn(n, trace.hidden_final.cols(), |i, k| trace.hidden_final[(off + i, k)])
}

fn scatter_rows(trace: &ForwardTrace, d: &Matrix, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(trace.hidden_final.rows(), trace.hidden_final.cols());
    let off = trace.tgt_offset();
    for i in 0..d.rows() {
        for (o, x) in out.row_mut(off + i).iter_mut().zip(d.row(i)) {
            *o = scale * x;
        }
    }
    out
}

fn scatter_logit_rows(trace: &ForwardTrace, d: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(trace.logits.rows(), trace.logits.cols());
    let off = trace.tgt_offset();
    for i in 0..d.rows() {
        out.row_mut(off + i).copy_from_slice(d.row(i));
    }
    out
}

fn segment_marginal(cfg: &TrainConfig, ctx: &TrainContext, tgt: &str, u: usize) -> Result<Distribution> {
    if !cfg.use_importance {
        return Distribution::uniform(u);
    }
    let segs = split_source_segments(tgt);
    if segs.len() != u {
        return Err(Error::shape(format!("{} text segments vs {u} token segments", segs.len())));
    }
    let ind = detect_indicators(&segs, &ctx.relations);
    Ok(importance_weights(&ind, cfg.importance_alphas, Some(IMPORTANCE_FLOOR))?.weights)
}

/// Drift between the two passes' target hidden states under one alignment.
pub fn drift_alignment(
    clean: &ForwardTrace,
    pert: &ForwardTrace,
    seg: &SegmentedText,
    mu: &Distribution,
    solver: Solver,
    fallback: SinkhornParams,
    beta: f64,
) -> Result<(SemanticAlignment, crate::segmenter::SegmentEmbeddings, crate::segmenter::SegmentEmbeddings)> {
    let n = seg.tokens().len();
    let ec = segment_embed(&rows_at(clean, n), seg)?;
    let ep = segment_embed(&rows_at(pert, n), seg)?;
    let al = match SemanticAlignment::compute(&ec, &ep, mu, Some(mu), solver, beta) {
        Err(Error::UseSinkhorn { .. }) => SemanticAlignment::compute(&ec, &ep, mu, Some(mu), Solver::Sinkhorn(fallback), beta)?,
        other => other?,
    };
    Ok((al, ec, ep))
}

/// Loss breakdown and adapter gradient for one example at the current
/// parameters. Nothing is updated.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub kind: PerturbKind,
    pub breakdown: LossBreakdown,
    pub sem_calibrated: f64,
    pub mean_drift: f64,
    pub grads: Vec<AdapterGrad>,
}

pub fn evaluate_step(model: &Model, ex: &TrainExample, cfg: &TrainConfig, ctx: &TrainContext, step: usize) -> Result<StepEval> {
    let (kind, x_pert) = perturbation_for_step(cfg, ctx, ex, step);
    let src = model.encode(&ex.src);
    let src_p = model.encode(&x_pert);
    let tgt = target_tokens(model, &ex.tgt);
    let (clean, pert) = rayon::join(|| model.forward_teacher_forced(&src, &tgt), || model.forward_teacher_forced(&src_p, &tgt));
    let (clean, pert) = (clean?, pert?);
    if !clean.ce.is_finite() || !clean.hidden_final.is_finite() || !pert.hidden_final.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("id={} kind={} non-finite forward pass (clean ce={})", ex.id, kind, clean.ce),
        });
    }
    let lambdas = cfg.effective_lambdas();
    let ce = clean.ce;
    let d_logits = clean.ce_grad_logits();
    let projections = &cfg.stab_projections;

    let stab = stab_loss(&model.adapters, projections);
    let (bal, bal_grads) = bal_loss(&model.adapters, projections);

    let mut grads: Grads;
    let (sem, sem_calibrated, mean_drift);
    match cfg.mode {
        TrainMode::S2r2 | TrainMode::CeOnly => {
            let seg = reference_segments(model, &ex.tgt)?;
            let mu = segment_marginal(cfg, ctx, &ex.tgt, seg.len())?;
            let (al, ec, ep) = drift_alignment(&clean, &pert, &seg, &mu, cfg.solver, cfg.sinkhorn_fallback(), cfg.beta)?;
            sem = al.loss;
            sem_calibrated = al.loss - sem_floor(seg.len(), cfg.beta);
            mean_drift = al.drift.mean();
            if lambdas.sem > 0.0 {
                let (dc, dp) = al.grad_embeddings(&ec, &ep)?;
                let dhc = scatter_rows(&clean, &segment_embed_backward(&dc, &seg), lambdas.sem);
                let dhp = scatter_rows(&pert, &segment_embed_backward(&dp, &seg), lambdas.sem);
                let zero_logits = Matrix::zeros(pert.logits.rows(), pert.logits.cols());
                let (gc, gp) = rayon::join(
                    || model.backward(&clean, &d_logits, Some(&dhc)),
                    || model.backward(&pert, &zero_logits, Some(&dhp)),
                );
                grads = gc?;
                grads.add(&gp?);
            } else {
                grads = model.backward(&clean, &d_logits, None)?;
            }
        }
        TrainMode::SeqKlBaseline => {
            let (skl, da, db) = seq_kl_baseline_loss(&clean.tgt_logits(), &pert.tgt_logits())?;
            sem = skl;
            sem_calibrated = skl;
            mean_drift = f64::NAN;
            let mut dlc = scatter_logit_rows(&clean, &da);
            dlc = dlc.scaled(lambdas.sem);
            dlc.add_assign(&d_logits);
            let dlp = scatter_logit_rows(&pert, &db).scaled(lambdas.sem);
            let (gc, gp) = rayon::join(|| model.backward(&clean, &dlc, None), || model.backward(&pert, &dlp, None));
            grads = gc?;
            grads.add(&gp?);
        }
    }
    if lambdas.stab > 0.0 {
        grads.add_adapter_grads(&stab_loss_grad(&model.adapters, projections), lambdas.stab);
    }
    if lambdas.bal > 0.0 {
        grads.add_adapter_grads(&bal_grads, lambdas.bal);
    }
    let breakdown = total_loss(ce, sem, stab, bal, lambdas, cfg.beta)?;
    if !breakdown.total.is_finite() || !grads.adapters_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "id={} kind={} ce={} sem={} stab={} bal={} total={}",
                ex.id, kind, ce, sem, stab, bal, breakdown.total
            ),
        });
    }
    Ok(StepEval { kind, breakdown, sem_calibrated, mean_drift, grads: grads.adapters })
}

/// Total objective at the current parameters with the step's perturbation;
/// used for finite-difference checks.
pub fn objective(model: &Model, ex: &TrainExample, cfg: &TrainConfig, ctx: &TrainContext, step: usize) -> Result<f64> {
    Ok(evaluate_step(model, ex, cfg, ctx, step)?.breakdown.total)
}

fn log_row(step: usize, ev: &StepEval, model: &Model, tau: f64) -> Result<TrainLogRow> {
    let n = LoraNorms::of(&model.adapters);
    let b = &ev.breakdown;
    Ok(TrainLogRow {
        step,
        kind: ev.kind.label().to_string(),
        ce: b.ce,
        sem: b.sem,
        sem_calibrated: ev.sem_calibrated,
        stab: b.stab,
        bal: b.bal,
        total: b.total,
        prod_f_sum: n.prod_f_sum,
        a_f_sum: n.a_f_sum,
        b_f_sum: n.b_f_sum,
        delta_f_sum: n.delta_f_sum,
        d_kl: kl_complexity(&model.adapters, tau)?,
        max_ab_ratio: n.max_ab_ratio(),
    })
}

/// Single plain gradient-descent step at 1-based `step`.
pub fn train_step(model: &mut Model, ex: &TrainExample, cfg: &TrainConfig, ctx: &TrainContext, step: usize) -> Result<TrainLogRow> {
    let ev = evaluate_step(model, ex, cfg, ctx, step)?;
    model.apply_adapter_step(&ev.grads, cfg.learning_rate);
    log_row(step, &ev, model, cfg.tau)
}

pub fn mean_clean_ce(model: &Model, data: &[TrainExample]) -> Result<f64> {
    let ces: Vec<f64> = data
        .par_iter()
        .map(|ex| Ok(model.forward_teacher_forced(&model.encode(&ex.src), &target_tokens(model, &ex.tgt))?.ce))
        .collect::<Result<_>>()?;
    Ok(ces.iter().sum::<f64>() / ces.len() as f64)
}

/// Mean segment drift of teacher-forced passes over `data` and every
/// configured perturbation kind. Perturbation seeds come from `seed` and the
/// example id only, so runs are comparable.
pub fn mean_heldout_drift(model: &Model, data: &[TrainExample], cfg: &TrainConfig, ctx: &TrainContext, seed: u64) -> Result<f64> {
    let jobs: Vec<(&TrainExample, PerturbKind)> =
        data.iter().flat_map(|ex| cfg.perturb.kinds.iter().map(move |&k| (ex, k))).collect();
    let drifts: Vec<f64> = jobs
        .par_iter()
        .map(|&(ex, kind)| {
            let x_pert = perturb_text(&ex.src, kind, &cfg.perturb, &ctx.lexicon, record_seed(seed, &ex.id));
            let tgt = target_tokens(model, &ex.tgt);
            let clean = model.forward_teacher_forced(&model.encode(&ex.src), &tgt)?;
            let pert = model.forward_teacher_forced(&model.encode(&x_pert), &tgt)?;
            let seg = reference_segments(model, &ex.tgt)?;
            let mu = Distribution::uniform(seg.len())?;
            let (al, _, _) = drift_alignment(&clean, &pert, &seg, &mu, cfg.solver, cfg.sinkhorn_fallback(), cfg.beta)?;
            Ok(al.drift.mean())
        })
        .collect::<Result<_>>()?;
    if drifts.is_empty() {
        return Err(Error::EmptyInput("mean_heldout_drift"));
    }
    Ok(drifts.iter().sum::<f64>() / drifts.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub rows: Vec<TrainLogRow>,
    /// Last completed step.
    pub last_step: usize,
    pub early_stopped: bool,
}

/// Runs steps `start_step+1 ..= cfg.steps`, cycling through `data` in order.
/// `on_checkpoint` is called every `checkpoint_every` steps and at the end.
pub fn train_loop_from(
    mut model: Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    ctx: &TrainContext,
    start_step: usize,
    mut on_checkpoint: impl FnMut(&Model, usize) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("train_loop: dataset"));
    }
    let ckpt_every = cfg.checkpoint_every.unwrap_or(cfg.log_every);
    let mut velocity: Option<Vec<AdapterGrad>> = cfg.momentum.map(|_| model.adapters.iter().map(AdapterGrad::zeros_like).collect());
    let mut rows = Vec::new();
    let mut last_step = start_step;
    let mut early_stopped = false;
    for step in start_step + 1..=cfg.steps {
        let ex = &data[(step - 1) % data.len()];
        let ev = evaluate_step(&model, ex, cfg, ctx, step)?;
        match (&mut velocity, cfg.momentum) {
            (Some(vel), Some(mom)) => {
                for (v, g) in vel.iter_mut().zip(&ev.grads) {
                    v.a = v.a.scaled(mom);
                    v.a.add_assign(&g.a);
                    v.b = v.b.scaled(mom);
                    v.b.add_assign(&g.b);
                }
                model.apply_adapter_step(vel, cfg.learning_rate);
            }
            _ => model.apply_adapter_step(&ev.grads, cfg.learning_rate),
        }
        last_step = step;
        let is_log = step == 1 || step % cfg.log_every == 0 || step == cfg.steps;
        let mut stop = false;
        if is_log {
            rows.push(log_row(step, &ev, &model, cfg.tau)?);
            if let Some(th) = cfg.early_stop_ce {
                if mean_clean_ce(&model, data)? <= th {
                    stop = true;
                }
            }
        }
        if step % ckpt_every == 0 && step != cfg.steps && !stop {
            on_checkpoint(&model, step)?;
        }
        if stop {
            if rows.last().map(|r| r.step) != Some(step) {
                rows.push(log_row(step, &ev, &model, cfg.tau)?);
            }
            early_stopped = true;
            break;
        }
    }
    on_checkpoint(&model, last_step)?;
    Ok(TrainOutcome { model, rows, last_step, early_stopped })
}

pub fn train_loop(model: Model, data: &[TrainExample], cfg: &TrainConfig, ctx: &TrainContext) -> Result<TrainOutcome> {
    train_loop_from(model, data, cfg, ctx, 0, |_, _| Ok(()))
}

/// CE-only training of the base weights (adapters untouched). Produces the
/// frozen starting point for adapter runs.
pub fn pretrain_base(model: &mut Model, data: &[TrainExample], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("pretrain_base: dataset"));
    }
    let mut ces = Vec::with_capacity(steps);
    for step in 0..steps {
        let ex = &data[step % data.len()];
        let tr = model.forward_teacher_forced(&model.encode(&ex.src), &target_tokens(model, &ex.tgt))?;
        if !tr.ce.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1, detail: format!("pretrain ce={}", tr.ce) });
        }
        let g = model.backward(&tr, &tr.ce_grad_logits(), None)?;
        model.apply_base_step(&g.base, lr);
        ces.push(tr.ce);
    }
    Ok(ces)
}
