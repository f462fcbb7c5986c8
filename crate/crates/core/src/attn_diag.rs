//! Segment-level attention aggregation and reallocation diagnostics.
//!
//! Nothing here feeds the training gradient.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_jsonl;
use crate::numerics::{js_divergence, Matrix};

const ROW_MASS_EPS: f64 = 1e-300;

/// Row-renormalised segment-to-segment attention for one (layer, head).
///
/// Rows listed in `excluded` had no source mass; they are all-zero and are
/// skipped by [`realloc_js`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAttention {
    pub c: Matrix,
    pub layer: usize,
    pub head: usize,
    pub excluded: Vec<usize>,
}

fn validate_ranges(ranges: &[Range<usize>], bound: usize, what: &str) -> Result<()> {
    for r in ranges {
        if r.start >= r.end || r.end > bound {
            return Err(Error::shape(format!("{what} segment {r:?} outside 0..{bound}")));
        }
    }
    Ok(())
}

/// Raw (unnormalised) segment mass `(1/|g_u|) Σ_{i∈g_u} Σ_{j∈s_v} A_ij`.
fn raw_segment_mass(a: &Matrix, out_segs: &[Range<usize>], src_segs: &[Range<usize>]) -> Result<Matrix> {
    validate_ranges(out_segs, a.rows(), "output")?;
    validate_ranges(src_segs, a.cols(), "source")?;
    let mut c = Matrix::zeros(out_segs.len(), src_segs.len());
    for (u, g) in out_segs.iter().enumerate() {
        let inv = 1.0 / g.len() as f64;
        for i in g.clone() {
            let row = a.row(i);
            for (v, s) in src_segs.iter().enumerate() {
                c[(u, v)] += inv * row[s.clone()].iter().sum::<f64>();
            }
        }
    }
    Ok(c)
}

fn renormalise(mut c: Matrix) -> (Matrix, Vec<usize>) {
    let mut excluded = Vec::new();
    for u in 0..c.rows() {
        let s: f64 = c.row(u).iter().sum();
        if s <= ROW_MASS_EPS {
            excluded.push(u);
            c.row_mut(u).iter_mut().for_each(|x| *x = 0.0);
        } else {
            c.row_mut(u).iter_mut().for_each(|x| *x /= s);
        }
    }
    (c, excluded)
}

/// Aggregates token attention `A` (queries × keys) into segment attention.
/// Query ranges and key ranges are absolute positions in `A`.
///
/// Rows without source mass are recorded in `excluded`; use
/// [`aggregate_segment_attention_strict`] to reject them instead.
pub fn aggregate_segment_attention(
    a: &Matrix,
    out_segs: &[Range<usize>],
    src_segs: &[Range<usize>],
    layer: usize,
    head: usize,
) -> Result<SegmentAttention> {
    let (c, excluded) = renormalise(raw_segment_mass(a, out_segs, src_segs)?);
    for u in &excluded {
        log::warn!("layer {layer} head {head}: output segment {u} has zero source attention mass");
    }
    Ok(SegmentAttention { c, layer, head, excluded })
}

pub fn aggregate_segment_attention_strict(
    a: &Matrix,
    out_segs: &[Range<usize>],
    src_segs: &[Range<usize>],
    layer: usize,
    head: usize,
) -> Result<SegmentAttention> {
    let sa = aggregate_segment_attention(a, out_segs, src_segs, layer, head)?;
    match sa.excluded.first() {
        Some(&segment) => Err(Error::ZeroSourceMass { segment }),
        None => Ok(sa),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReallocReport {
    pub layer: usize,
    pub head: usize,
    pub r: Vec<f64>,
    pub mean_r: f64,
    pub max_r: f64,
    pub excluded: Vec<usize>,
}

/// Per-output-segment JS divergence between clean and perturbed rows.
pub fn realloc_js(clean: &SegmentAttention, pert: &SegmentAttention) -> Result<ReallocReport> {
    if clean.c.shape() != pert.c.shape() {
        return Err(Error::shape(format!("segment attention {:?} vs {:?}", clean.c.shape(), pert.c.shape())));
    }
    let mut excluded: Vec<usize> = clean.excluded.iter().chain(&pert.excluded).copied().collect();
    excluded.sort_unstable();
    excluded.dedup();
    let mut r = vec![0.0; clean.c.rows()];
    let mut kept = Vec::new();
    for (u, ru) in r.iter_mut().enumerate() {
        if excluded.binary_search(&u).is_ok() {
            continue;
        }
        *ru = js_divergence(clean.c.row(u), pert.c.row(u))?;
        kept.push(*ru);
    }
    let mean_r = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    let max_r = kept.iter().copied().fold(0.0, f64::max);
    Ok(ReallocReport { layer: clean.layer, head: clean.head, r, mean_r, max_r, excluded })
}

/// Mean and max of `mean_r` across heads.
pub fn summarize_heads(reports: &[ReallocReport]) -> (f64, f64) {
    if reports.is_empty() {
        return (0.0, 0.0);
    }
    let mean = reports.iter().map(|r| r.mean_r).sum::<f64>() / reports.len() as f64;
    let max = reports.iter().map(|r| r.max_r).fold(0.0, f64::max);
    (mean, max)
}

/// Segment attention, per-source-segment mean values, and the aggregated
/// context `z_u` for one (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentContext {
    pub attention: SegmentAttention,
    /// `V × d`
    pub vbar: Matrix,
    /// `U × d`
    pub z: Matrix,
}

impl SegmentContext {
    /// `values` are per-key value vectors (`T_k × d`) of the same head.
    /// `z_u = Σ_{i∈g_u} Σ_{j∈src} A_ij v_j / Σ_{i∈g_u} Σ_{j∈src} A_ij`.
    pub fn from_tokens(
        a: &Matrix,
        values: &Matrix,
        out_segs: &[Range<usize>],
        src_segs: &[Range<usize>],
        layer: usize,
        head: usize,
    ) -> Result<Self> {
        if values.rows() != a.cols() {
            return Err(Error::shape(format!("{} value rows for {} keys", values.rows(), a.cols())));
        }
        let attention = aggregate_segment_attention_strict(a, out_segs, src_segs, layer, head)?;
        let d = values.cols();
        let mut vbar = Matrix::zeros(src_segs.len(), d);
        for (v, s) in src_segs.iter().enumerate() {
            let inv = 1.0 / s.len() as f64;
            for j in s.clone() {
                for (o, x) in vbar.row_mut(v).iter_mut().zip(values.row(j)) {
                    *o += inv * x;
                }
            }
        }
        let mut z = Matrix::zeros(out_segs.len(), d);
        for (u, g) in out_segs.iter().enumerate() {
            let mut mass = 0.0;
            for i in g.clone() {
                for s in src_segs {
                    for j in s.clone() {
                        let w = a[(i, j)];
                        mass += w;
                        for (o, x) in z.row_mut(u).iter_mut().zip(values.row(j)) {
                            *o += w * x;
                        }
                    }
                }
            }
            z.row_mut(u).iter_mut().for_each(|x| *x /= mass);
        }
        Ok(Self { attention, vbar, z })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDecomposition {
    pub realloc_term: Matrix,
    pub value_term: Matrix,
    pub residual: Vec<f64>,
}

/// `Σ_v (C′−C) v̄(x)` and `Σ_v C′ (v̄(x′) − v̄(x))`.
pub fn shift_terms(c_clean: &Matrix, c_pert: &Matrix, vbar_clean: &Matrix, vbar_pert: &Matrix) -> Result<(Matrix, Matrix)> {
    if c_clean.shape() != c_pert.shape() || vbar_clean.shape() != vbar_pert.shape() || c_clean.cols() != vbar_clean.rows() {
        return Err(Error::shape(format!(
            "C {:?}/{:?}, vbar {:?}/{:?}",
            c_clean.shape(),
            c_pert.shape(),
            vbar_clean.shape(),
            vbar_pert.shape()
        )));
    }
    let realloc = c_pert.sub(c_clean).matmul(vbar_clean);
    let value = c_pert.matmul(&vbar_pert.sub(vbar_clean));
    Ok((realloc, value))
}

pub fn decompose_shift(clean: &SegmentContext, pert: &SegmentContext) -> Result<ShiftDecomposition> {
    let (realloc_term, value_term) = shift_terms(&clean.attention.c, &pert.attention.c, &clean.vbar, &pert.vbar)?;
    if clean.z.shape() != pert.z.shape() || clean.z.shape() != realloc_term.shape() {
        return Err(Error::shape("context shapes differ"));
    }
    let dz = pert.z.sub(&clean.z);
    let residual = (0..dz.rows())
        .map(|u| {
            dz.row(u)
                .iter()
                .zip(realloc_term.row(u))
                .zip(value_term.row(u))
                .map(|((dz, r), v)| (dz - r - v).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ShiftDecomposition { realloc_term, value_term, residual })
}

/// One line of the attention diagnostics dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnDiagRecord {
    pub id: String,
    pub layer: usize,
    pub head: usize,
    pub r: Vec<f64>,
    pub mean_r: f64,
    pub max_r: f64,
    pub residuals: Vec<f64>,
}

pub fn write_attn_diag(path: impl AsRef<Path>, records: &[AttnDiagRecord]) -> Result<()> {
    write_jsonl(path, records)
}
