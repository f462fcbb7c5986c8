//! Robustness metrics: ROUGE-L, PDR, word edit rate, embedding self-similarity,
//! E-Risk and the PAC-B diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

pub const E_RISK_WEIGHTS: (f64, f64, f64) = (0.8, 0.1, 0.1);
pub const DEFAULT_DELTA: f64 = 0.05;

/// Lowercased whitespace tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 of `candidate` against `reference`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    if p + rec == 0.0 {
        0.0
    } else {
        2.0 * p * rec / (p + rec)
    }
}

/// `1 − r_pert / r_clean`.
pub fn pdr(r_clean: f64, r_pert: f64) -> Result<f64> {
    if r_clean <= 0.0 {
        return Err(Error::UndefinedPdr);
    }
    Ok(1.0 - r_pert / r_clean)
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level Levenshtein distance divided by the longer length.
pub fn edit_rate(out_clean: &str, out_pert: &str) -> f64 {
    let (a, b) = (words(out_clean), words(out_pert));
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfSim {
    pub sb: f64,
    /// Set when either side was empty (SB forced to 0).
    pub empty: bool,
}

impl SelfSim {
    pub fn one_minus_sb(&self) -> f64 {
        1.0 - self.sb
    }
}

fn cos_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn greedy_mean(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|x| to.iter().map(|y| cos_or_zero(x, y)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Greedy-matching F1 over two sets of embedding vectors. Precision is over
/// the perturbed side, recall over the clean side.
pub fn self_sim(clean: &[Vec<f64>], pert: &[Vec<f64>]) -> SelfSim {
    if clean.is_empty() || pert.is_empty() {
        return SelfSim { sb: 0.0, empty: true };
    }
    let p = greedy_mean(pert, clean);
    let r = greedy_mean(clean, pert);
    let sb = if p + r == 0.0 { 0.0 } else { (2.0 * p * r / (p + r)).clamp(-1.0, 1.0) };
    SelfSim { sb, empty: false }
}

pub fn e_risk(one_minus_sb: f64, pdr_abs: f64, edit: f64) -> f64 {
    let (a, b, c) = E_RISK_WEIGHTS;
    a * one_minus_sb + b * pdr_abs + c * edit
}

/// `e + sqrt((d_kl + ln(2√n/δ)) / 2n)`.
pub fn pac_b(e_risk: f64, d_kl: f64, n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("pac_b needs n >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    let n = n as f64;
    Ok(e_risk + ((d_kl + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub kind: String,
    pub rouge_clean: f64,
    pub rouge_pert: f64,
    /// Absent when the clean ROUGE-L is zero.
    pub pdr: Option<f64>,
    pub edit_rate: f64,
    pub self_sim: f64,
    pub one_minus_sb: f64,
    pub empty_output: bool,
}

impl EvalRecord {
    pub fn score(id: &str, kind: &str, clean_out: &str, pert_out: &str, reference: &str, sim: SelfSim) -> Self {
        let rouge_clean = rouge_l(clean_out, reference);
        let rouge_pert = rouge_l(pert_out, reference);
        Self {
            id: id.to_string(),
            kind: kind.to_string(),
            rouge_clean,
            rouge_pert,
            pdr: pdr(rouge_clean, rouge_pert).ok(),
            edit_rate: edit_rate(clean_out, pert_out),
            self_sim: sim.sb,
            one_minus_sb: sim.one_minus_sb(),
            empty_output: sim.empty,
        }
    }

    pub fn e_risk(&self) -> f64 {
        e_risk(self.one_minus_sb, self.pdr.map_or(0.0, f64::abs), self.edit_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    /// Records with a defined PDR.
    pub n_pdr: usize,
    pub pdr_abs_avg: f64,
    pub one_minus_sb_avg: f64,
    pub edit_avg: f64,
    pub e_risk: f64,
}

impl GroupSummary {
    fn of<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> Self {
        let (mut n, mut n_pdr) = (0usize, 0usize);
        let (mut pdr_sum, mut sb_sum, mut ed_sum) = (0.0, 0.0, 0.0);
        for r in records {
            n += 1;
            sb_sum += r.one_minus_sb;
            ed_sum += r.edit_rate;
            if let Some(p) = r.pdr {
                n_pdr += 1;
                pdr_sum += p.abs();
            }
        }
        let avg = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
        let (pdr_abs_avg, one_minus_sb_avg, edit_avg) = (avg(pdr_sum, n_pdr), avg(sb_sum, n), avg(ed_sum, n));
        Self { n, n_pdr, pdr_abs_avg, one_minus_sb_avg, edit_avg, e_risk: e_risk(one_minus_sb_avg, pdr_abs_avg, edit_avg) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall: GroupSummary,
    pub per_kind: BTreeMap<String, GroupSummary>,
    pub e_risk: f64,
    pub d_kl: f64,
    pub pac_b: f64,
    pub n: usize,
    pub undefined_pdr: usize,
    pub delta: f64,
    pub tau: f64,
    pub pac_b_formula: String,
}

pub fn summarize(records: &[EvalRecord], d_kl: f64, tau: f64, delta: f64) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("summarize"));
    }
    let overall = GroupSummary::of(records.iter());
    let mut kinds: Vec<&str> = records.iter().map(|r| r.kind.as_str()).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let per_kind = kinds
        .into_iter()
        .map(|k| (k.to_string(), GroupSummary::of(records.iter().filter(|r| r.kind == k))))
        .collect();
    let e = overall.e_risk;
    Ok(EvalSummary {
        per_kind,
        e_risk: e,
        d_kl,
        pac_b: pac_b(e, d_kl, records.len(), delta)?,
        n: records.len(),
        undefined_pdr: records.len() - overall.n_pdr,
        delta,
        tau,
        pac_b_formula: "e_risk + sqrt((d_kl + ln(2*sqrt(n)/delta)) / (2n))".into(),
        overall,
    })
}
