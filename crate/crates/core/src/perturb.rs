//! Seeded text perturbations: character swaps, word deletion, lexicon
//! synonyms and an externally supplied paraphrase sidecar.
//!
//! Every operator walks the whitespace-delimited words of its input left to
//! right and takes, per word, one selection draw followed (only when the word
//! is selected and eligible) by one position/choice draw. Draws come from
//! `ChaCha8Rng::seed_from_u64(seed)`:
//!
//! * selection: `(next_u64() >> 11) as f64 * 2^-53 < rate`
//! * position/choice among `n` options: `next_u64() % n`
//!
//! so outputs are bit-reproducible on every platform.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters that close a sentence-like segment.
pub const BOUNDARY_CHARS: [char; 4] = ['.', '!', '?', ';'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerturbKind {
    #[serde(rename = "typo")]
    Typo,
    #[serde(rename = "delete")]
    Delete,
    #[serde(rename = "typo+delete")]
    TypoDelete,
    #[serde(rename = "synonym")]
    Synonym,
    #[serde(rename = "paraphrase")]
    Paraphrase,
    /// Identity perturbation; used for clean reference passes.
    #[serde(rename = "none")]
    None,
}

impl PerturbKind {
    pub fn label(self) -> &'static str {
        match self {
            PerturbKind::Typo => "typo",
            PerturbKind::Delete => "delete",
            PerturbKind::TypoDelete => "typo+delete",
            PerturbKind::Synonym => "synonym",
            PerturbKind::Paraphrase => "paraphrase",
            PerturbKind::None => "none",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "typo" => PerturbKind::Typo,
            "delete" => PerturbKind::Delete,
            "typo+delete" => PerturbKind::TypoDelete,
            "synonym" => PerturbKind::Synonym,
            "paraphrase" => PerturbKind::Paraphrase,
            "none" => PerturbKind::None,
            other => return Err(Error::Config(format!("unknown perturbation kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub typo_rate: f64,
    pub delete_rate: f64,
    pub synonym_rate: f64,
    pub seed: u64,
    pub kinds: Vec<PerturbKind>,
    /// Perturb each source segment independently so segment counts match.
    pub preserve_segments: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            typo_rate: 0.1,
            delete_rate: 0.1,
            synonym_rate: 0.1,
            seed: 0,
            kinds: vec![PerturbKind::Typo, PerturbKind::Delete, PerturbKind::Synonym],
            preserve_segments: false,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("typo_rate", self.typo_rate),
            ("delete_rate", self.delete_rate),
            ("synonym_rate", self.synonym_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("perturbation kinds must be nonempty".into()));
        }
        let mut seen = self.kinds.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.kinds.len() {
            return Err(Error::Config("perturbation kinds contain duplicates".into()));
        }
        Ok(())
    }

    /// Same config with every rate set to zero.
    pub fn zero_rate(&self) -> Self {
        Self { typo_rate: 0.0, delete_rate: 0.0, synonym_rate: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    /// Lowercases keys and drops entries whose only synonyms are the word itself.
    pub fn new(raw: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        let mut entries = BTreeMap::new();
        for (word, syns) in raw {
            let key = word.to_lowercase();
            let syns: Vec<String> =
                syns.into_iter().filter(|s| !s.is_empty() && s.to_lowercase() != key).collect();
            if !syns.is_empty() {
                entries.entry(key).or_insert_with(Vec::new).extend(syns);
            }
        }
        Self { entries }
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<SynonymLexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    Ok(SynonymLexicon::new(raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRecord {
    pub id: String,
    pub clean: String,
    pub perturbed: String,
    pub kind: PerturbKind,
    pub seed: u64,
}

/// FNV-1a over the UTF-8 bytes of `id`.
pub fn fnv1a64(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-record seed `seed ⊕ fnv1a64(id)`.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    seed ^ fnv1a64(id)
}

/// Draw stream shared by all operators.
pub struct Draws(ChaCha8Rng);

impl Draws {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn select(&mut self, rate: f64) -> bool {
        let u = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u < rate
    }

    pub fn choose(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.0.next_u64() % n as u64) as usize
    }
}

/// Splits into alternating (whitespace, word) pieces, keeping every byte.
fn pieces(text: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_ws: Option<bool> = None;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        match in_ws {
            Some(prev) if prev != ws => {
                out.push((prev, &text[start..i]));
                start = i;
            }
            _ => {}
        }
        in_ws = Some(ws);
    }
    if let Some(ws) = in_ws {
        out.push((ws, &text[start..]));
    }
    out
}

fn typo_with(text: &str, rate: f64, draws: &mut Draws) -> String {
    let mut out = String::with_capacity(text.len());
    for (ws, piece) in pieces(text) {
        if ws {
            out.push_str(piece);
            continue;
        }
        let selected = draws.select(rate);
        let mut chars: Vec<char> = piece.chars().collect();
        if selected && chars.len() >= 2 {
            let k = draws.choose(chars.len() - 1);
            chars.swap(k, k + 1);
        }
        out.extend(chars);
    }
    out
}

fn delete_with(text: &str, rate: f64, draws: &mut Draws) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return String::new();
    }
    let keep: Vec<bool> = words.iter().map(|_| !draws.select(rate)).collect();
    let mut survivors: Vec<&str> =
        words.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| *w).collect();
    if survivors.is_empty() {
        // retention floor: one extra draw picks the surviving word
        survivors.push(words[draws.choose(words.len())]);
    }
    survivors.join(" ")
}

fn match_first_case(original: &str, replacement: &str) -> String {
    let upper = original.chars().next().is_some_and(char::is_uppercase);
    let mut chars = replacement.chars();
    match chars.next() {
        Some(first) if upper => first.to_uppercase().chain(chars).collect(),
        _ => replacement.to_string(),
    }
}

fn synonym_with(text: &str, lexicon: &SynonymLexicon, rate: f64, draws: &mut Draws) -> String {
    let mut out = String::with_capacity(text.len());
    for (ws, piece) in pieces(text) {
        if ws {
            out.push_str(piece);
            continue;
        }
        let selected = draws.select(rate);
        // keep leading/trailing punctuation attached to the word
        let core_start = piece.find(|c: char| c.is_alphanumeric()).unwrap_or(piece.len());
        let core_end = piece.rfind(|c: char| c.is_alphanumeric()).map_or(core_start, |i| {
            i + piece[i..].chars().next().map_or(0, char::len_utf8)
        });
        let core = &piece[core_start..core_end.max(core_start)];
        match lexicon.get(core).filter(|_| selected && !core.is_empty()) {
            Some(syns) => {
                let choice = &syns[draws.choose(syns.len())];
                out.push_str(&piece[..core_start]);
                out.push_str(&match_first_case(core, choice));
                out.push_str(&piece[core_end.max(core_start)..]);
            }
            None => out.push_str(piece),
        }
    }
    out
}

pub fn perturb_typo(text: &str, rate: f64, seed: u64) -> String {
    typo_with(text, rate, &mut Draws::new(seed))
}

pub fn perturb_delete(text: &str, rate: f64, seed: u64) -> String {
    delete_with(text, rate, &mut Draws::new(seed))
}

pub fn perturb_synonym(text: &str, lexicon: &SynonymLexicon, rate: f64, seed: u64) -> String {
    synonym_with(text, lexicon, rate, &mut Draws::new(seed))
}

fn apply_kind(
    text: &str,
    kind: PerturbKind,
    cfg: &PerturbConfig,
    lexicon: &SynonymLexicon,
    draws: &mut Draws,
) -> String {
    match kind {
        PerturbKind::Typo => typo_with(text, cfg.typo_rate, draws),
        PerturbKind::Delete => delete_with(text, cfg.delete_rate, draws),
        PerturbKind::TypoDelete => {
            let t = typo_with(text, cfg.typo_rate, draws);
            delete_with(&t, cfg.delete_rate, draws)
        }
        PerturbKind::Synonym => synonym_with(text, lexicon, cfg.synonym_rate, draws),
        PerturbKind::Paraphrase | PerturbKind::None => text.to_string(),
    }
}

/// Splits after every boundary character; the pieces concatenate back to `text`.
pub fn split_source_segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if BOUNDARY_CHARS.contains(&ch) {
            let end = i + ch.len_utf8();
            out.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Applies one perturbation kind. `Paraphrase` is the identity here; it is
/// filled in from a sidecar by [`apply_external_paraphrase`].
pub fn perturb_text(
    text: &str,
    kind: PerturbKind,
    cfg: &PerturbConfig,
    lexicon: &SynonymLexicon,
    seed: u64,
) -> String {
    let mut draws = Draws::new(seed);
    if !cfg.preserve_segments {
        return apply_kind(text, kind, cfg, lexicon, &mut draws);
    }
    let mut out = String::with_capacity(text.len());
    for seg in split_source_segments(text) {
        let body_end = seg.trim_end_matches(BOUNDARY_CHARS).len();
        let (body, closer) = seg.split_at(body_end);
        let lead = body.len() - body.trim_start().len();
        let inner = body.trim_start();
        if inner.trim().is_empty() {
            out.push_str(seg);
            continue;
        }
        let trail = inner.len() - inner.trim_end().len();
        let perturbed = apply_kind(inner.trim_end(), kind, cfg, lexicon, &mut draws);
        out.push_str(&body[..lead]);
        out.push_str(&perturbed);
        out.push_str(&inner[inner.len() - trail..]);
        out.push_str(closer);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParaphraseStats {
    pub matched: usize,
    pub unmatched: usize,
    pub duplicate_ids: usize,
}

#[derive(Deserialize)]
struct SidecarLine {
    id: String,
    text: String,
}

pub fn read_paraphrase_sidecar(path: impl AsRef<Path>) -> Result<(BTreeMap<String, String>, usize)> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let mut map = BTreeMap::new();
    let mut duplicates = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if map.insert(rec.id.clone(), rec.text).is_some() {
            log::warn!("{}:{}: duplicate paraphrase id {:?}; last occurrence wins", path.display(), i + 1, rec.id);
            duplicates += 1;
        }
    }
    Ok((map, duplicates))
}

pub fn apply_external_paraphrase(
    records: Vec<PerturbRecord>,
    sidecar_path: impl AsRef<Path>,
) -> Result<(Vec<PerturbRecord>, ParaphraseStats)> {
    let (map, duplicate_ids) = read_paraphrase_sidecar(sidecar_path)?;
    let mut stats = ParaphraseStats { duplicate_ids, ..Default::default() };
    let out = records
        .into_iter()
        .map(|mut r| {
            match map.get(&r.id) {
                Some(text) => {
                    r.perturbed = text.clone();
                    r.kind = PerturbKind::Paraphrase;
                    stats.matched += 1;
                }
                None => stats.unmatched += 1,
            }
            r
        })
        .collect();
    Ok((out, stats))
}
