//! Optimal-transport alignment of clean and perturbed segment embeddings.
//!
//! Two solvers share one [`TransportPlan`] output: an exact transportation
//! simplex (authoritative, used by tests and small problems) and a
//! log-domain Sinkhorn iteration with epsilon annealing (the training path).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, Distribution, Matrix};
use crate::segmenter::SegmentEmbeddings;

/// Largest `min(U, U′)` accepted by [`solve_exact`].
pub const EXACT_SIZE_LIMIT: usize = 64;
const MARGINAL_TOL: f64 = 1e-9;
/// Cost assigned to a clean segment when the perturbed side is empty.
pub const MAX_COST: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix(pub Matrix);

impl CostMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn cost_matrix(clean: &SegmentEmbeddings, pert: &SegmentEmbeddings) -> Result<CostMatrix> {
    if clean.dim() != pert.dim() {
        return Err(Error::shape(format!("embedding dims {} vs {}", clean.dim(), pert.dim())));
    }
    let mut c = Matrix::zeros(clean.len(), pert.len());
    for u in 0..clean.len() {
        for v in 0..pert.len() {
            c[(u, v)] = 1.0 - cosine_sim(clean.matrix.row(u), pert.matrix.row(v))?;
        }
    }
    if !c.is_finite() {
        return Err(Error::Numerical("non-finite segment embeddings".into()));
    }
    Ok(CostMatrix(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub t: Matrix,
    pub mu: Distribution,
    pub nu: Distribution,
    pub objective: f64,
    pub converged: bool,
    /// Largest absolute row/column marginal violation of `t`.
    pub residual: f64,
}

fn marginal_residual(t: &Matrix, mu: &[f64], nu: &[f64]) -> f64 {
    let r = t.row_sums().iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let c = t.col_sums().iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.max(c)
}

fn plan_objective(t: &Matrix, c: &Matrix) -> f64 {
    t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn check_shapes(c: &CostMatrix, mu: &Distribution, nu: &Distribution) -> Result<()> {
    let (m, n) = c.0.shape();
    if mu.len() != m || nu.len() != n {
        return Err(Error::shape(format!("cost {m}x{n} with marginals {}x{}", mu.len(), nu.len())));
    }
    if !c.0.is_finite() {
        return Err(Error::Numerical("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Exact solution of the transportation LP by the transportation simplex
/// (north-west corner start, u–v potentials, stepping-stone pivots, Bland's
/// rule after a run of degenerate pivots).
pub fn solve_exact(c: &CostMatrix, mu: &Distribution, nu: &Distribution) -> Result<TransportPlan> {
    check_shapes(c, mu, nu)?;
    let (m, n) = c.0.shape();
    if m.min(n) > EXACT_SIZE_LIMIT {
        return Err(Error::UseSinkhorn { rows: m, cols: n });
    }
    let (mu_total, nu_total) = (mu.as_slice().iter().sum::<f64>(), nu.as_slice().iter().sum::<f64>());
    if (mu_total - nu_total).abs() > MARGINAL_TOL {
        return Err(Error::MarginalMismatch { mu_total, nu_total });
    }
    let t = TransportSimplex::new(&c.0, mu.as_slice(), nu.as_slice()).run()?;
    let residual = marginal_residual(&t, mu.as_slice(), nu.as_slice());
    Ok(TransportPlan {
        objective: plan_objective(&t, &c.0),
        t,
        mu: mu.clone(),
        nu: nu.clone(),
        converged: true,
        residual,
    })
}

struct TransportSimplex<'a> {
    c: &'a Matrix,
    m: usize,
    n: usize,
    flow: Matrix,
    /// basic cells, always `m + n - 1` of them, forming a spanning tree
    basis: Vec<(usize, usize)>,
    is_basic: Vec<bool>,
}

impl<'a> TransportSimplex<'a> {
    fn new(c: &'a Matrix, mu: &[f64], nu: &[f64]) -> Self {
        let (m, n) = c.shape();
        let mut flow = Matrix::zeros(m, n);
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut is_basic = vec![false; m * n];
        let (mut supply, mut demand) = (mu.to_vec(), nu.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let q = supply[i].min(demand[j]).max(0.0);
            flow[(i, j)] = q;
            supply[i] -= q;
            demand[j] -= q;
            basis.push((i, j));
            is_basic[i * n + j] = true;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && supply[i] <= demand[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { c, m, n, flow, basis, is_basic }
    }

    /// Tree adjacency: node `i < m` is a row, node `m + j` a column.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.basis[k];
                    pot[next] = self.c[(i, j)] - pot[node];
                    stack.push(next);
                }
            }
        }
        let u = pot[..self.m].to_vec();
        let v = pot[self.m..].to_vec();
        (u, v)
    }

    /// Basis indices on the tree path from column node `m + j` to row node `i`.
    fn tree_path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let start = self.m + j;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            if node == i {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    stack.push(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = i;
        while node != start {
            let (prev, k) = parent[node].expect("basis is a spanning tree");
            path.push(k);
            node = prev;
        }
        path.reverse();
        path
    }

    fn run(mut self) -> Result<Matrix> {
        let max_pivots = 50 * (self.m + self.n) * self.m * self.n + 100;
        let mut degenerate_run = 0usize;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            let bland = degenerate_run > self.m * self.n;
            let mut entering = None;
            let mut best = -1e-12;
            'scan: for i in 0..self.m {
                for j in 0..self.n {
                    if self.is_basic[i * self.n + j] {
                        continue;
                    }
                    let r = self.c[(i, j)] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(self.flow);
            };
            // cycle: entering (+), then path edges from column ej alternate −, +, …
            let path = self.tree_path(&adj, ei, ej);
            let mut theta = f64::INFINITY;
            let mut leave_pos = None;
            for (pos, &k) in path.iter().enumerate().step_by(2) {
                let (i, j) = self.basis[k];
                let f = self.flow[(i, j)];
                let better = match leave_pos {
                    None => true,
                    Some(lp) => {
                        let (li, lj) = self.basis[path[lp]];
                        f < theta || (f == theta && bland && (i, j) < (li, lj))
                    }
                };
                if better {
                    theta = f;
                    leave_pos = Some(pos);
                }
            }
            let theta = theta.max(0.0);
            degenerate_run = if theta == 0.0 { degenerate_run + 1 } else { 0 };
            self.flow[(ei, ej)] += theta;
            for (pos, &k) in path.iter().enumerate() {
                let (i, j) = self.basis[k];
                if pos % 2 == 0 {
                    self.flow[(i, j)] = (self.flow[(i, j)] - theta).max(0.0);
                } else {
                    self.flow[(i, j)] += theta;
                }
            }
            let k = path[leave_pos.expect("cycle has a minus edge")];
            let (li, lj) = self.basis[k];
            self.flow[(li, lj)] = 0.0;
            self.is_basic[li * self.n + lj] = false;
            self.is_basic[ei * self.n + ej] = true;
            self.basis[k] = (ei, ej);
        }
        Err(Error::Numerical("transportation simplex exceeded its pivot budget".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { epsilon: 1e-2, max_iters: 100_000, tol: 1e-9 }
    }
}

#[inline]
fn lse_iter(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropic OT by alternating marginal scaling of `exp(−C/ε)`, carried out
/// on dual potentials in the log domain. Epsilon is annealed geometrically
/// from the cost scale down to the target with warm-started potentials; the
/// fixed point is the one at the target epsilon. On budget exhaustion the
/// plan is still returned with `converged = false`.
pub fn solve_sinkhorn(
    c: &CostMatrix,
    mu: &Distribution,
    nu: &Distribution,
    params: SinkhornParams,
) -> Result<TransportPlan> {
    check_shapes(c, mu, nu)?;
    let SinkhornParams { epsilon, max_iters, tol } = params;
    if !(epsilon > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("sinkhorn epsilon {epsilon}, tol {tol}")));
    }
    let cm = &c.0;
    let (m, n) = cm.shape();
    let log_mu: Vec<f64> = mu.as_slice().iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = nu.as_slice().iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];

    let scale = cm.data().iter().copied().fold(0.0, f64::max).max(epsilon);
    let mut eps = scale;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    loop {
        let final_stage = eps <= epsilon;
        let stage_tol = if final_stage { tol } else { tol.max(1e-6) };
        let mut stage_done = false;
        while iters < max_iters {
            iters += 1;
            for i in 0..m {
                let gi = &g;
                f[i] = eps * log_mu[i] - eps * lse_iter((0..n).map(|j| (gi[j] - cm[(i, j)]) / eps));
            }
            for j in 0..n {
                let fj = &f;
                g[j] = eps * log_nu[j] - eps * lse_iter((0..m).map(|i| (fj[i] - cm[(i, j)]) / eps));
            }
            // columns are exact after the g update; measure the rows
            residual = (0..m)
                .map(|i| {
                    let s: f64 = (0..n).map(|j| ((f[i] + g[j] - cm[(i, j)]) / eps).exp()).sum();
                    (s - mu.as_slice()[i]).abs()
                })
                .fold(0.0, f64::max);
            if residual < stage_tol {
                stage_done = true;
                break;
            }
        }
        if final_stage || !stage_done {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }
    let converged = eps <= epsilon && residual < tol;
    let t = Matrix::from_fn(m, n, |i, j| ((f[i] + g[j] - cm[(i, j)]) / eps).exp());
    let residual = marginal_residual(&t, mu.as_slice(), nu.as_slice());
    Ok(TransportPlan {
        objective: plan_objective(&t, cm),
        t,
        mu: mu.clone(),
        nu: nu.clone(),
        converged,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Exact,
    Sinkhorn(SinkhornParams),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Sinkhorn(SinkhornParams::default())
    }
}

pub fn solve(c: &CostMatrix, mu: &Distribution, nu: &Distribution, solver: Solver) -> Result<TransportPlan> {
    match solver {
        Solver::Exact => solve_exact(c, mu, nu),
        Solver::Sinkhorn(p) => solve_sinkhorn(c, mu, nu, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftVector(pub Vec<f64>);

impl DriftVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

/// `d_u = Σ_v T_uv c_uv`.
pub fn segment_drift(plan: &TransportPlan, c: &CostMatrix) -> Result<DriftVector> {
    if plan.t.shape() != c.0.shape() {
        return Err(Error::shape(format!("plan {:?} vs cost {:?}", plan.t.shape(), c.0.shape())));
    }
    Ok(DriftVector(
        (0..c.0.rows()).map(|u| plan.t.row(u).iter().zip(c.0.row(u)).map(|(t, c)| t * c).sum()).collect(),
    ))
}

/// Drift when the perturbed output has no segments: every clean segment
/// pays the maximal cost on its full mass.
pub fn drift_against_empty(mu: &Distribution) -> DriftVector {
    DriftVector(mu.as_slice().iter().map(|m| MAX_COST * m).collect())
}
