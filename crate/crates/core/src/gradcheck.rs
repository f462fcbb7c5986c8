//! Finite-difference audit of every analytic gradient w.r.t. the adapters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Solver;
use crate::error::{Error, Result};
use crate::losses::{bal_loss, stab_loss, stab_loss_grad, AdapterGrad, Lambdas, LoraAdapter, Projection};
use crate::numerics::{finite_diff_grad, relative_error};
use crate::perturb::{PerturbConfig, PerturbKind};
use crate::synthetic;
use crate::toymodel::{init_model, Model, ModelConfig};
use crate::trainer::{evaluate_step, TrainConfig, TrainContext, TrainExample, TrainMode};

/// Largest `d_model` the audit accepts.
pub const MAX_GRADCHECK_DIM: usize = 64;
const MAX_GRADCHECK_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    Ce,
    Sem,
    Stab,
    Bal,
    SeqKl,
    TotalS2r2,
    TotalSeqKl,
}

impl GradTerm {
    pub const ALL: [GradTerm; 7] =
        [GradTerm::Ce, GradTerm::Sem, GradTerm::Stab, GradTerm::Bal, GradTerm::SeqKl, GradTerm::TotalS2r2, GradTerm::TotalSeqKl];

    pub fn label(self) -> &'static str {
        match self {
            GradTerm::Ce => "ce",
            GradTerm::Sem => "sem",
            GradTerm::Stab => "stab",
            GradTerm::Bal => "bal",
            GradTerm::SeqKl => "seq_kl",
            GradTerm::TotalS2r2 => "total_s2r2",
            GradTerm::TotalSeqKl => "total_seq_kl",
        }
    }
}

impl fmt::Display for GradTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for GradTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GradTerm::ALL.into_iter().find(|t| t.label() == s).ok_or_else(|| Error::Config(format!("unknown gradient term {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub tolerance: f64,
    pub h: f64,
    pub seed: u64,
    pub examples: usize,
    /// Test hook: negate this term's analytic gradient.
    pub fault: Option<GradTerm>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq: 96, lora_rank: 1, init_std: 0.3, ..Default::default() },
            tolerance: 1e-5,
            h: 1e-5,
            seed: 0,
            examples: 2,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermResult {
    pub term: GradTerm,
    pub worst_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermResult>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn failed_terms(&self) -> Vec<GradTerm> {
        self.terms.iter().filter(|t| !t.pass).map(|t| t.term).collect()
    }
}

fn flatten(ads: &[LoraAdapter]) -> Vec<f64> {
    ads.iter().flat_map(|a| a.a.data().iter().chain(a.b.data()).copied().collect::<Vec<_>>()).collect()
}

fn flatten_grads(g: &[AdapterGrad]) -> Vec<f64> {
    g.iter().flat_map(|a| a.a.data().iter().chain(a.b.data()).copied().collect::<Vec<_>>()).collect()
}

fn with_params(model: &Model, x: &[f64]) -> Model {
    let mut m = model.clone();
    let mut k = 0;
    for ad in &mut m.adapters {
        for v in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
            *v = x[k];
            k += 1;
        }
    }
    m
}

fn step_config(mode: TrainMode, lambdas: Lambdas) -> TrainConfig {
    TrainConfig {
        mode,
        lambdas,
        solver: Solver::Exact,
        stab_projections: Projection::ALL.to_vec(),
        perturb: PerturbConfig { kinds: vec![PerturbKind::Typo], typo_rate: 0.3, ..Default::default() },
        ..Default::default()
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.model.d_model > MAX_GRADCHECK_DIM || cfg.model.n_layers > MAX_GRADCHECK_LAYERS {
        return Err(Error::Config(format!(
            "gradcheck is limited to d_model <= {MAX_GRADCHECK_DIM} and n_layers <= {MAX_GRADCHECK_LAYERS}; got {} and {}",
            cfg.model.d_model, cfg.model.n_layers
        )));
    }
    if cfg.examples == 0 {
        return Err(Error::Config("gradcheck needs at least one example".into()));
    }
    let mut model = init_model(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for ad in &mut model.adapters {
        for v in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let data: Vec<TrainExample> = synthetic::summary_task(cfg.examples, cfg.seed);
    let ctx = TrainContext::default();
    let x = flatten(&model.adapters);
    let all = Projection::ALL;

    let ce_cfg = step_config(TrainMode::CeOnly, Lambdas::ZERO);
    let sem_cfg = step_config(TrainMode::S2r2, Lambdas { sem: 1.0, stab: 0.0, bal: 0.0 });
    let skl_cfg = step_config(TrainMode::SeqKlBaseline, Lambdas { sem: 1.0, stab: 0.0, bal: 0.0 });
    let tot_cfg = step_config(TrainMode::S2r2, Lambdas { sem: 1.0, stab: 0.1, bal: 0.05 });

    let mut worst = vec![0.0f64; GradTerm::ALL.len()];
    for (i, ex) in data.iter().enumerate() {
        let step = i + 1;
        let eval = |c: &TrainConfig, m: &Model| evaluate_step(m, ex, c, &ctx, step);
        let fd = |c: &TrainConfig, pick: fn(&crate::losses::LossBreakdown) -> f64| {
            finite_diff_grad(|x| eval(c, &with_params(&model, x)).map(|e| pick(&e.breakdown)).unwrap_or(f64::NAN), &x, cfg.h)
        };
        let ce_g = flatten_grads(&eval(&ce_cfg, &model)?.grads);
        let minus_ce = |g: Vec<f64>| g.iter().zip(&ce_g).map(|(a, b)| a - b).collect::<Vec<f64>>();

        for (k, term) in GradTerm::ALL.into_iter().enumerate() {
            let (analytic, numeric) = match term {
                GradTerm::Ce => (ce_g.clone(), fd(&ce_cfg, |b| b.ce)?),
                GradTerm::Sem => (minus_ce(flatten_grads(&eval(&sem_cfg, &model)?.grads)), fd(&sem_cfg, |b| b.sem)?),
                GradTerm::SeqKl => (minus_ce(flatten_grads(&eval(&skl_cfg, &model)?.grads)), fd(&skl_cfg, |b| b.sem)?),
                GradTerm::TotalS2r2 => (flatten_grads(&eval(&tot_cfg, &model)?.grads), fd(&tot_cfg, |b| b.total)?),
                GradTerm::TotalSeqKl => (flatten_grads(&eval(&skl_cfg, &model)?.grads), fd(&skl_cfg, |b| b.total)?),
                GradTerm::Stab => (
                    flatten_grads(&stab_loss_grad(&model.adapters, &all)),
                    finite_diff_grad(|x| stab_loss(&with_params(&model, x).adapters, &all), &x, cfg.h)?,
                ),
                GradTerm::Bal => (
                    flatten_grads(&bal_loss(&model.adapters, &all).1),
                    finite_diff_grad(|x| bal_loss(&with_params(&model, x).adapters, &all).0, &x, cfg.h)?,
                ),
            };
            let analytic = if cfg.fault == Some(term) { analytic.iter().map(|v| -v).collect() } else { analytic };
            worst[k] = worst[k].max(relative_error(&analytic, &numeric, 1e-12));
        }
    }
    let terms: Vec<TermResult> = GradTerm::ALL
        .into_iter()
        .zip(worst)
        .map(|(term, e)| TermResult { term, worst_rel_err: e, pass: e < cfg.tolerance })
        .collect();
    let pass = terms.iter().all(|t| t.pass);
    Ok(GradcheckReport { tolerance: cfg.tolerance, terms, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_passes() {
        let rep = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn fault_is_named() {
        let rep = run_gradcheck(&GradcheckConfig { fault: Some(GradTerm::Stab), examples: 1, ..Default::default() }).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.failed_terms(), vec![GradTerm::Stab]);
    }

    #[test]
    fn large_dims_refused() {
        let mut cfg = GradcheckConfig::default();
        cfg.model.d_model = 512;
        assert!(matches!(run_gradcheck(&cfg), Err(Error::Config(_))));
    }
}
