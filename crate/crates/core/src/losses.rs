//! Semantic-drift, adapter-stability and balance regularisers with their
//! analytic gradients, plus total-objective assembly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{cost_matrix, drift_against_empty, segment_drift, solve, CostMatrix, DriftVector, Solver, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::{dot, frobenius_norm, l2_norm, log_sum_exp, softmax_in_place, Distribution, Matrix};
use crate::segmenter::{SegmentEmbeddings, SegmentedText};

/// Subgradient guard for `X / ‖X‖_F` at zero-norm factors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn label(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            _ => Err(Error::Config(format!("unknown projection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub proj: Projection,
}

/// Low-rank update `ΔW = B Aᵀ` on one attention projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d_in × r`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
    pub site: Site,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, site: Site) -> Result<Self> {
        let r = a.cols();
        if r == 0 || b.cols() != r {
            return Err(Error::shape(format!("adapter ranks {} and {}", a.cols(), b.cols())));
        }
        if r > a.rows().min(b.rows()) {
            return Err(Error::shape(format!("rank {r} exceeds min(d_in, d_out)")));
        }
        Ok(Self { a, b, site })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `B Aᵀ`, `d_out × d_in`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul_t(&self.a)
    }

    pub fn norms(&self) -> (f64, f64) {
        (frobenius_norm(&self.a), frobenius_norm(&self.b))
    }
}

/// Gradient pair for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn zeros_like(ad: &LoraAdapter) -> Self {
        Self { a: Matrix::zeros(ad.a.rows(), ad.a.cols()), b: Matrix::zeros(ad.b.rows(), ad.b.cols()) }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `mean(d) + (1/β) log Σ exp(β d_u)`.
pub fn sem_loss(d: &DriftVector, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let d = d.as_slice();
    if d.is_empty() {
        return Err(Error::EmptyInput("sem_loss"));
    }
    let scaled: Vec<f64> = d.iter().map(|x| beta * x).collect();
    Ok(d.iter().sum::<f64>() / d.len() as f64 + log_sum_exp(&scaled)? / beta)
}

/// `∂L/∂d_u = 1/U + softmax(β d)_u`.
pub fn sem_loss_grad_d(d: &DriftVector, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let d = d.as_slice();
    if d.is_empty() {
        return Err(Error::EmptyInput("sem_loss_grad_d"));
    }
    let inv_u = 1.0 / d.len() as f64;
    Ok(softmax_in_place(d.iter().map(|x| beta * x).collect()).into_iter().map(|s| s + inv_u).collect())
}

/// Zero-drift floor `(ln U)/β`.
pub fn sem_floor(segments: usize, beta: f64) -> f64 {
    (segments as f64).ln() / beta
}

fn selected<'a>(
    adapters: &'a [LoraAdapter],
    projections: &'a [Projection],
) -> impl Iterator<Item = (usize, &'a LoraAdapter)> + 'a {
    adapters.iter().enumerate().filter(move |(_, a)| projections.contains(&a.site.proj))
}

/// `Σ ‖B‖_F ‖A‖_F` over the selected projections.
pub fn stab_loss(adapters: &[LoraAdapter], projections: &[Projection]) -> f64 {
    selected(adapters, projections).map(|(_, ad)| {
        let (na, nb) = ad.norms();
        na * nb
    }).sum()
}

pub fn stab_loss_grad(adapters: &[LoraAdapter], projections: &[Projection]) -> Vec<AdapterGrad> {
    let mut grads: Vec<AdapterGrad> = adapters.iter().map(AdapterGrad::zeros_like).collect();
    for (k, ad) in selected(adapters, projections) {
        let (na, nb) = ad.norms();
        grads[k].a = ad.a.scaled(nb / na.max(NORM_EPS));
        grads[k].b = ad.b.scaled(na / nb.max(NORM_EPS));
    }
    grads
}

/// `Σ (‖B‖_F − ‖A‖_F)²` and its gradient.
pub fn bal_loss(adapters: &[LoraAdapter], projections: &[Projection]) -> (f64, Vec<AdapterGrad>) {
    let mut grads: Vec<AdapterGrad> = adapters.iter().map(AdapterGrad::zeros_like).collect();
    let mut total = 0.0;
    for (k, ad) in selected(adapters, projections) {
        let (na, nb) = ad.norms();
        let gap = nb - na;
        total += gap * gap;
        grads[k].b = ad.b.scaled(2.0 * gap / nb.max(NORM_EPS));
        grads[k].a = ad.a.scaled(-2.0 * gap / na.max(NORM_EPS));
    }
    (total, grads)
}

/// `(1/2τ²) Σ (‖B‖² + ‖A‖²)` over every adapted site.
pub fn kl_complexity(adapters: &[LoraAdapter], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let sq: f64 = adapters.iter().map(|ad| dot(ad.a.data(), ad.a.data()) + dot(ad.b.data(), ad.b.data())).sum();
    Ok(sq / (2.0 * tau * tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub sem: f64,
    pub stab: f64,
    pub bal: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { sem: 1.0, stab: 1e-3, bal: 0.0 }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas { sem: 0.0, stab: 0.0, bal: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sem: f64,
    pub stab: f64,
    pub bal: f64,
    pub total: f64,
    pub lambdas: Lambdas,
    pub beta: f64,
}

pub fn total_loss(ce: f64, sem: f64, stab: f64, bal: f64, lambdas: Lambdas, beta: f64) -> Result<LossBreakdown> {
    if lambdas.sem < 0.0 || lambdas.stab < 0.0 || lambdas.bal < 0.0 {
        return Err(Error::InvalidParameter("loss weights must be nonnegative".into()));
    }
    let total = ce + lambdas.sem * sem + lambdas.stab * stab + lambdas.bal * bal;
    Ok(LossBreakdown { ce, sem, stab, bal, total, lambdas, beta })
}

/// Result of aligning two segment-embedding sets and scoring the drift.
#[derive(Debug, Clone)]
pub struct SemanticAlignment {
    pub cost: CostMatrix,
    /// `None` when the perturbed side has no segments.
    pub plan: Option<TransportPlan>,
    pub drift: DriftVector,
    pub loss: f64,
    pub beta: f64,
}

impl SemanticAlignment {
    pub fn compute(
        clean: &SegmentEmbeddings,
        pert: &SegmentEmbeddings,
        mu: &Distribution,
        nu: Option<&Distribution>,
        solver: Solver,
        beta: f64,
    ) -> Result<Self> {
        if pert.is_empty() {
            let drift = drift_against_empty(mu);
            let loss = sem_loss(&drift, beta)?;
            return Ok(Self { cost: CostMatrix(Matrix::zeros(clean.len(), 0)), plan: None, drift, loss, beta });
        }
        let cost = cost_matrix(clean, pert)?;
        let uniform;
        let nu = match nu {
            Some(nu) => nu,
            None => {
                uniform = Distribution::uniform(pert.len())?;
                &uniform
            }
        };
        let plan = solve(&cost, mu, nu, solver)?;
        let drift = segment_drift(&plan, &cost)?;
        let loss = sem_loss(&drift, beta)?;
        Ok(Self { cost, plan: Some(plan), drift, loss, beta })
    }

    /// Gradient of the loss w.r.t. both embedding matrices with the plan held
    /// fixed: `∂L/∂c_uv = g_u T_uv`, then through `c = 1 − cos(e_u, e′_v)`.
    pub fn grad_embeddings(&self, clean: &SegmentEmbeddings, pert: &SegmentEmbeddings) -> Result<(Matrix, Matrix)> {
        let mut d_clean = Matrix::zeros(clean.len(), clean.dim());
        let mut d_pert = Matrix::zeros(pert.len(), pert.dim());
        let Some(plan) = &self.plan else {
            return Ok((d_clean, d_pert));
        };
        let g = sem_loss_grad_d(&self.drift, self.beta)?;
        for u in 0..clean.len() {
            let eu = clean.matrix.row(u);
            let nu_ = l2_norm(eu);
            for v in 0..pert.len() {
                let w = g[u] * plan.t[(u, v)];
                if w == 0.0 {
                    continue;
                }
                let ev = pert.matrix.row(v);
                let nv = l2_norm(ev);
                let cos = dot(eu, ev) / (nu_ * nv);
                // ∂c/∂e_u = −(e_v/(|e_u||e_v|) − cos e_u/|e_u|²)
                for k in 0..eu.len() {
                    d_clean[(u, k)] -= w * (ev[k] / (nu_ * nv) - cos * eu[k] / (nu_ * nu_));
                    d_pert[(v, k)] -= w * (eu[k] / (nu_ * nv) - cos * ev[k] / (nv * nv));
                }
            }
        }
        Ok((d_clean, d_pert))
    }
}

/// Spreads per-segment gradients back over token rows (each row of segment
/// `u` receives `1/|g_u|` of row `u`).
pub fn segment_embed_backward(d_emb: &Matrix, seg: &SegmentedText) -> Matrix {
    let mut out = Matrix::zeros(seg.tokens().len(), d_emb.cols());
    for (u, range) in seg.boundaries().iter().enumerate() {
        let inv = 1.0 / range.len() as f64;
        for t in range.clone() {
            for (o, g) in out.row_mut(t).iter_mut().zip(d_emb.row(u)) {
                *o = g * inv;
            }
        }
    }
    out
}
