//! Punctuation segmentation, per-segment mean embeddings, and rule-based
//! importance weights.
//!
//! [`detect_indicators`] is a deliberately simple stand-in for a full
//! proposition extractor: capitalised non-initial words, digit runs, a small
//! relation lexicon and an overlap-centrality flag.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Distribution, Matrix};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedText {
    tokens: Vec<TokenId>,
    boundaries: Vec<Range<usize>>,
}

impl SegmentedText {
    /// Validates that `boundaries` are nonempty, sorted, disjoint and cover
    /// `0..tokens.len()` exactly.
    pub fn new(tokens: Vec<TokenId>, boundaries: Vec<Range<usize>>) -> Result<Self> {
        let mut cursor = 0;
        for b in &boundaries {
            if b.start != cursor || b.end <= b.start {
                return Err(Error::shape(format!("segment {b:?} breaks the partition at {cursor}")));
            }
            cursor = b.end;
        }
        if cursor != tokens.len() {
            return Err(Error::shape(format!("segments cover {cursor} of {} tokens", tokens.len())));
        }
        Ok(Self { tokens, boundaries })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[Range<usize>] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn segment(&self, u: usize) -> &[TokenId] {
        &self.tokens[self.boundaries[u].clone()]
    }

    /// Boundaries shifted by `offset` (e.g. into absolute sequence positions).
    pub fn offset_boundaries(&self, offset: usize) -> Vec<Range<usize>> {
        self.boundaries.iter().map(|r| r.start + offset..r.end + offset).collect()
    }
}

/// Each segment ends at a boundary token (inclusive) or at sequence end.
pub fn segment_punct(tokens: &[TokenId], punct_set: &[TokenId]) -> Result<SegmentedText> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("segment_punct"));
    }
    let mut boundaries = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if punct_set.contains(t) {
            boundaries.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        boundaries.push(start..tokens.len());
    }
    SegmentedText::new(tokens.to_vec(), boundaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEmbeddings {
    pub matrix: Matrix,
    pub lengths: Vec<usize>,
}

impl SegmentEmbeddings {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Row `u` is the mean of `hidden` rows inside boundary `u`.
pub fn segment_embed(hidden: &Matrix, seg: &SegmentedText) -> Result<SegmentEmbeddings> {
    if hidden.rows() != seg.tokens().len() {
        return Err(Error::shape(format!(
            "hidden has {} rows for {} tokens",
            hidden.rows(),
            seg.tokens().len()
        )));
    }
    let d = hidden.cols();
    let mut matrix = Matrix::zeros(seg.len(), d);
    let mut lengths = Vec::with_capacity(seg.len());
    for (u, range) in seg.boundaries().iter().enumerate() {
        let inv = 1.0 / range.len() as f64;
        let out = matrix.row_mut(u);
        for t in range.clone() {
            for (o, h) in out.iter_mut().zip(hidden.row(t)) {
                *o += h * inv;
            }
        }
        lengths.push(range.len());
    }
    Ok(SegmentEmbeddings { matrix, lengths })
}

/// Indicator columns: entity, number, relation, centrality.
pub type Indicators = [bool; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceAlphas {
    pub ent: f64,
    pub num: f64,
    pub rel: f64,
    pub cen: f64,
}

impl Default for ImportanceAlphas {
    fn default() -> Self {
        Self { ent: 1.0, num: 1.0, rel: 1.0, cen: 1.0 }
    }
}

impl ImportanceAlphas {
    fn as_array(&self) -> [f64; 4] {
        [self.ent, self.num, self.rel, self.cen]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub weights: Distribution,
    pub alphas: ImportanceAlphas,
    pub indicators: Vec<Indicators>,
}

pub const IMPORTANCE_FLOOR: f64 = 1e-6;

/// Floor-then-normalise: `w_u ∝ Σ_k α_k I_uk + floor`.
pub fn importance_weights(
    indicators: &[Indicators],
    alphas: ImportanceAlphas,
    floor: Option<f64>,
) -> Result<ImportanceWeights> {
    if indicators.is_empty() {
        return Err(Error::EmptyInput("importance_weights"));
    }
    let a = alphas.as_array();
    if a.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidParameter("importance alphas must be nonnegative".into()));
    }
    let floor = floor.unwrap_or(0.0);
    let raw: Vec<f64> = indicators
        .iter()
        .map(|row| row.iter().zip(a).map(|(&on, w)| if on { w } else { 0.0 }).sum::<f64>() + floor)
        .collect();
    if raw.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(ImportanceWeights { weights: Distribution::normalized(raw)?, alphas, indicators: indicators.to_vec() })
}

pub const DEFAULT_RELATION_WORDS: [&str; 6] = ["because", "causes", "than", "increases", "decreases", "leads"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLexicon(BTreeSet<String>);

impl Default for RelationLexicon {
    fn default() -> Self {
        Self(DEFAULT_RELATION_WORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl RelationLexicon {
    /// One word per line; blank lines and `#` comments ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        ))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

fn bare_words(segment: &str) -> Vec<String> {
    segment
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Rule-based indicator flags for each segment text.
pub fn detect_indicators(segments: &[&str], relations: &RelationLexicon) -> Vec<Indicators> {
    let words: Vec<Vec<String>> = segments.iter().map(|s| bare_words(s)).collect();
    let sets: Vec<BTreeSet<String>> =
        words.iter().map(|ws| ws.iter().map(|w| w.to_lowercase()).collect()).collect();

    // centrality: mean Jaccard overlap with the other segments, ties → earliest
    let n = segments.len();
    let mut central = None;
    let mut best = f64::NEG_INFINITY;
    for u in 0..n {
        let others = (0..n).filter(|&v| v != u);
        let total: f64 = others
            .clone()
            .map(|v| {
                let inter = sets[u].intersection(&sets[v]).count() as f64;
                let union = sets[u].union(&sets[v]).count() as f64;
                if union > 0.0 { inter / union } else { 0.0 }
            })
            .sum();
        let mean = if n > 1 { total / (n - 1) as f64 } else { 0.0 };
        if mean > best {
            best = mean;
            central = Some(u);
        }
    }

    words
        .iter()
        .zip(segments)
        .enumerate()
        .map(|(u, (ws, raw))| {
            let ent = ws.iter().skip(1).any(|w| w.chars().next().is_some_and(char::is_uppercase));
            let num = raw.chars().any(|c| c.is_ascii_digit());
            let rel = ws.iter().any(|w| relations.contains(&w.to_lowercase()));
            [ent, num, rel, central == Some(u)]
        })
        .collect()
}
