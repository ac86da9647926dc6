//! Composite clinical token grammar and the model vocabulary.
//!
//! Tokens are colon-joined composites: `LAB:HBA1C:Q4` is the fourth
//! quintile of a hemoglobin A1c result, `MED:STATIN:ATORVA` a drug within
//! a medication class, `AGE:D7` an age decile. The grammar is closed: a
//! string either parses into a [`TokenKind`] or is rejected with the
//! offending reason.
//!
//! Quintile boundaries for LAB/VITAL values come from training-split
//! values only; encoding of unseen strings maps to `[PAD]` and is
//! tracked, never silently invented.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::RowSource;

pub const PAD: TokenId = TokenId(0);
pub const BOS: TokenId = TokenId(1);
pub const EOS: TokenId = TokenId(2);
pub const DEATH: TokenId = TokenId(3);

pub const PAD_STR: &str = "[PAD]";
pub const BOS_STR: &str = "[BOS]";
pub const EOS_STR: &str = "[EOS]";
pub const DEATH_STR: &str = "[DEATH]";

/// Number of ordinal bins for LAB/VITAL values.
pub const N_BINS: usize = 5;
/// Minimum sample count for fitting quintile boundaries.
pub const MIN_BIN_SAMPLES: usize = 5;

/// Index into a [`Vocabulary`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenFamily {
    Special,
    Lab,
    Vital,
    Med,
    Dx,
    Age,
    Sex,
    Smoke,
}

/// A parsed composite token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Death,
    /// Quantized lab result; `bin` is 1..=5.
    Lab { measure: String, bin: u8 },
    /// Quantized vital sign; `bin` is 1..=5.
    Vital { measure: String, bin: u8 },
    /// Medication exposure, optionally narrowed to a specific drug.
    Med { class: String, drug: Option<String> },
    Dx { code: String },
    /// Age decile; `decile` is 1..=10.
    Age { decile: u8 },
    Sex { value: String },
    Smoke { value: String },
}

impl TokenKind {
    pub fn family(&self) -> TokenFamily {
        match self {
            TokenKind::Pad | TokenKind::Bos | TokenKind::Eos | TokenKind::Death => {
                TokenFamily::Special
            }
            TokenKind::Lab { .. } => TokenFamily::Lab,
            TokenKind::Vital { .. } => TokenFamily::Vital,
            TokenKind::Med { .. } => TokenFamily::Med,
            TokenKind::Dx { .. } => TokenFamily::Dx,
            TokenKind::Age { .. } => TokenFamily::Age,
            TokenKind::Sex { .. } => TokenFamily::Sex,
            TokenKind::Smoke { .. } => TokenFamily::Smoke,
        }
    }

    /// The ordinal bin for LAB/VITAL tokens, 1..=5.
    pub fn ordinal_bin(&self) -> Option<u8> {
        match self {
            TokenKind::Lab { bin, .. } | TokenKind::Vital { bin, .. } => Some(*bin),
            _ => None,
        }
    }

    /// The `FAMILY:MEASURE` key shared by the five sibling bins of a
    /// LAB/VITAL token.
    pub fn measure_key(&self) -> Option<String> {
        match self {
            TokenKind::Lab { measure, .. } => Some(format!("LAB:{measure}")),
            TokenKind::Vital { measure, .. } => Some(format!("VITAL:{measure}")),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            TokenKind::Pad => PAD_STR.into(),
            TokenKind::Bos => BOS_STR.into(),
            TokenKind::Eos => EOS_STR.into(),
            TokenKind::Death => DEATH_STR.into(),
            TokenKind::Lab { measure, bin } => format!("LAB:{measure}:Q{bin}"),
            TokenKind::Vital { measure, bin } => format!("VITAL:{measure}:Q{bin}"),
            TokenKind::Med { class, drug: None } => format!("MED:{class}"),
            TokenKind::Med {
                class,
                drug: Some(d),
            } => format!("MED:{class}:{d}"),
            TokenKind::Dx { code } => format!("DX:{code}"),
            TokenKind::Age { decile } => format!("AGE:D{decile}"),
            TokenKind::Sex { value } => format!("SEX:{value}"),
            TokenKind::Smoke { value } => format!("SMOKE:{value}"),
        }
    }
}

fn token_err(raw: &str, reason: impl Into<String>) -> Error {
    Error::Token {
        raw: raw.to_string(),
        reason: reason.into(),
    }
}

fn check_segment(raw: &str, seg: &str, what: &str) -> Result<()> {
    if seg.is_empty() {
        return Err(token_err(raw, format!("empty {what} segment")));
    }
    if let Some(bad) = seg
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')))
    {
        return Err(token_err(
            raw,
            format!("invalid character {bad:?} in {what} segment"),
        ));
    }
    Ok(())
}

fn parse_bin(raw: &str, seg: &str) -> Result<u8> {
    let Some(num) = seg.strip_prefix('Q') else {
        return Err(token_err(raw, format!("expected quintile Q1..Q5, got {seg:?}")));
    };
    match num.parse::<u8>() {
        Ok(b @ 1..=5) => Ok(b),
        _ => Err(token_err(raw, format!("quintile out of range: {seg:?}"))),
    }
}

/// Parses a token string against the grammar.
pub fn parse_token(raw: &str) -> Result<TokenKind> {
    match raw {
        PAD_STR => return Ok(TokenKind::Pad),
        BOS_STR => return Ok(TokenKind::Bos),
        EOS_STR => return Ok(TokenKind::Eos),
        DEATH_STR => return Ok(TokenKind::Death),
        _ => {}
    }
    let parts: Vec<&str> = raw.split(':').collect();
    match parts.as_slice() {
        ["LAB", measure, bin] => {
            check_segment(raw, measure, "measure")?;
            Ok(TokenKind::Lab {
                measure: (*measure).into(),
                bin: parse_bin(raw, bin)?,
            })
        }
        ["VITAL", measure, bin] => {
            check_segment(raw, measure, "measure")?;
            Ok(TokenKind::Vital {
                measure: (*measure).into(),
                bin: parse_bin(raw, bin)?,
            })
        }
        ["MED", class] => {
            check_segment(raw, class, "class")?;
            Ok(TokenKind::Med {
                class: (*class).into(),
                drug: None,
            })
        }
        ["MED", class, drug] => {
            check_segment(raw, class, "class")?;
            check_segment(raw, drug, "drug")?;
            Ok(TokenKind::Med {
                class: (*class).into(),
                drug: Some((*drug).into()),
            })
        }
        ["DX", code] => {
            check_segment(raw, code, "code")?;
            Ok(TokenKind::Dx { code: (*code).into() })
        }
        ["AGE", decile] => {
            let Some(num) = decile.strip_prefix('D') else {
                return Err(token_err(raw, format!("expected decile D1..D10, got {decile:?}")));
            };
            match num.parse::<u8>() {
                Ok(d @ 1..=10) => Ok(TokenKind::Age { decile: d }),
                _ => Err(token_err(raw, format!("decile out of range: {decile:?}"))),
            }
        }
        ["SEX", value] => {
            check_segment(raw, value, "value")?;
            Ok(TokenKind::Sex {
                value: (*value).into(),
            })
        }
        ["SMOKE", value] => {
            check_segment(raw, value, "value")?;
            Ok(TokenKind::Smoke {
                value: (*value).into(),
            })
        }
        [family, ..] => Err(token_err(
            raw,
            format!("unknown family or wrong arity for {family:?}"),
        )),
        [] => Err(token_err(raw, "empty token")),
    }
}

// ── Quintile binning ────────────────────────────────────────────────────

/// Fits 20/40/60/80th percentile boundaries by linear interpolation over
/// the sorted sample.
///
/// Distinguishes two failure modes: not enough samples to fit, and a
/// degenerate sample whose percentiles do not strictly increase (the bins
/// would collide).
pub fn quintile_boundaries(values: &[f64]) -> Result<[f64; 4]> {
    if values.len() < MIN_BIN_SAMPLES {
        return Err(Error::Vocab(format!(
            "too few samples to fit quintiles: {} < {MIN_BIN_SAMPLES}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Vocab(format!("non-finite sample value {bad}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let mut out = [0.0; 4];
    for (i, q) in [0.2, 0.4, 0.6, 0.8].iter().enumerate() {
        let rank = q * (n - 1) as f64;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        out[i] = if lo + 1 < n {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        };
    }
    if !(out[0] < out[1] && out[1] < out[2] && out[2] < out[3]) {
        return Err(Error::Vocab(format!(
            "degenerate quintile boundaries {out:?}: values too concentrated"
        )));
    }
    Ok(out)
}

/// Maps a value into bin 1..=5. Bins are left-closed, right-open; the top
/// bin is closed above, so any value at or past the last boundary is 5.
pub fn quintile_bin(v: f64, boundaries: &[f64; 4]) -> u8 {
    let mut bin = 1u8;
    for &b in boundaries {
        if v >= b {
            bin += 1;
        } else {
            break;
        }
    }
    bin
}

// ── Vocabulary ──────────────────────────────────────────────────────────

/// Running tally of encode attempts that fell outside the vocabulary.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct UnknownStats {
    pub total: u64,
    pub unknown: u64,
}

impl UnknownStats {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.unknown as f64 / self.total as f64
        }
    }
}

/// Everything the cohort's LAB/VITAL/MED/DX/demographic space contains;
/// the vocabulary derives deterministically from it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VocabRecipe {
    pub lab_measures: Vec<String>,
    pub vital_measures: Vec<String>,
    pub med_classes: Vec<String>,
    /// (class, drug) pairs for class members tokenized at drug level.
    pub med_drugs: Vec<(String, String)>,
    pub dx_codes: Vec<String>,
    pub sexes: Vec<String>,
    pub smoke_levels: Vec<String>,
}

/// Immutable token table with the derived structures the model needs:
/// the factored-embedding layout and the per-measure ordinal sibling
/// groups.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, u32>,
    layout: Vec<RowSource>,
    n_measures: usize,
    /// measure key -> token ids of Q1..Q5, in bin order.
    siblings: BTreeMap<String, [TokenId; N_BINS]>,
}

impl Vocabulary {
    /// Validates and indexes a token list. `[PAD]` must be first; the
    /// four specials must all be present; duplicates are rejected.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_STR) {
            return Err(Error::Vocab(format!(
                "{PAD_STR} must be token id 0, found {:?}",
                tokens.first()
            )));
        }
        let mut kinds = Vec::with_capacity(tokens.len());
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let kind = parse_token(t)?;
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
            kinds.push(kind);
        }
        for (special, id) in [(BOS_STR, BOS), (EOS_STR, EOS), (DEATH_STR, DEATH)] {
            if index.get(special) != Some(&id.0) {
                return Err(Error::Vocab(format!(
                    "{special} must be token id {}, found {:?}",
                    id.0,
                    index.get(special)
                )));
            }
        }

        // Factored layout: each (family, measure) pair gets a measure
        // row, in first-appearance order; bins share the 5-row ordinal
        // table. Everything else keeps a plain token row.
        let mut measure_rows: BTreeMap<String, usize> = BTreeMap::new();
        let mut next_measure = 0usize;
        let mut layout = Vec::with_capacity(tokens.len());
        let mut siblings: BTreeMap<String, [Option<TokenId>; N_BINS]> = BTreeMap::new();
        for (i, kind) in kinds.iter().enumerate() {
            if let (Some(key), Some(bin)) = (kind.measure_key(), kind.ordinal_bin()) {
                let row = *measure_rows.entry(key.clone()).or_insert_with(|| {
                    let r = next_measure;
                    next_measure += 1;
                    r
                });
                layout.push(RowSource::Factored {
                    measure: row,
                    ordinal: (bin - 1) as usize,
                });
                let slot = &mut siblings.entry(key.clone()).or_insert([None; N_BINS])
                    [(bin - 1) as usize];
                if slot.is_some() {
                    return Err(Error::Vocab(format!(
                        "duplicate bin Q{bin} for measure {key}"
                    )));
                }
                *slot = Some(TokenId(i as u32));
            } else {
                layout.push(RowSource::Token(i));
            }
        }
        let mut complete = BTreeMap::new();
        for (key, bins) in siblings {
            let mut ids = [PAD; N_BINS];
            for (b, slot) in bins.iter().enumerate() {
                ids[b] = slot.ok_or_else(|| {
                    Error::Vocab(format!("measure {key} missing bin Q{}", b + 1))
                })?;
            }
            complete.insert(key, ids);
        }
        Ok(Vocabulary {
            tokens,
            kinds,
            index,
            layout,
            n_measures: next_measure,
            siblings: complete,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).map(|&i| TokenId(i))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn kind(&self, id: TokenId) -> &TokenKind {
        &self.kinds[id.index()]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.tokens.len() as u32).map(TokenId)
    }

    /// Sequence-ending tokens.
    pub fn is_terminal(&self, id: TokenId) -> bool {
        id == EOS || id == DEATH
    }

    /// Encodes a token string, mapping anything outside the vocabulary
    /// to `[PAD]` and recording it.
    pub fn encode(&self, token: &str, stats: &mut UnknownStats) -> TokenId {
        stats.total += 1;
        match self.id(token) {
            Some(id) => id,
            None => {
                stats.unknown += 1;
                PAD
            }
        }
    }

    /// Row sources for [`crate::numerics::Tensor::compose_embedding`].
    pub fn layout(&self) -> &[RowSource] {
        &self.layout
    }

    /// Number of distinct LAB/VITAL measures (rows of the measure table).
    pub fn n_measures(&self) -> usize {
        self.n_measures
    }

    /// Ordinal sibling ids (Q1..Q5) per measure key, deterministic order.
    pub fn sibling_groups(&self) -> &BTreeMap<String, [TokenId; N_BINS]> {
        &self.siblings
    }

    /// For a LAB/VITAL token, its measure's five sibling ids in bin
    /// order.
    pub fn siblings_of(&self, id: TokenId) -> Option<&[TokenId; N_BINS]> {
        self.kinds[id.index()]
            .measure_key()
            .and_then(|key| self.siblings.get(&key))
    }

    /// Resolves suppression entries into a concrete id set.
    ///
    /// Each entry is either an exact token or a prefix that matches every
    /// token extending it at a `:` boundary, so `MED:STATIN` covers both
    /// the class token and its drug variants. An entry matching nothing
    /// is an error: a typo in a suppression list must not pass silently.
    pub fn suppression_set(&self, entries: &[String]) -> Result<BTreeSet<TokenId>> {
        let mut out = BTreeSet::new();
        for entry in entries {
            let before = out.len();
            let prefix = format!("{entry}:");
            for (i, t) in self.tokens.iter().enumerate() {
                if t == entry || t.starts_with(&prefix) {
                    out.insert(TokenId(i as u32));
                }
            }
            if out.len() == before {
                return Err(Error::Vocab(format!(
                    "suppression entry {entry:?} matches no vocabulary token"
                )));
            }
        }
        Ok(out)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.tokens.len()))?;
        for t in &self.tokens {
            seq.serialize_element(t)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vocabulary;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a token list")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Vocabulary, A::Error> {
                let mut tokens = Vec::new();
                while let Some(t) = seq.next_element::<String>()? {
                    tokens.push(t);
                }
                Vocabulary::from_tokens(tokens).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(V)
    }
}

/// Builds the full vocabulary for a recipe, in a fixed order: specials,
/// demographics, LAB and VITAL quintiles, MED classes then drug-level
/// tokens, DX codes.
pub fn build_vocabulary(recipe: &VocabRecipe) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = vec![
        PAD_STR.into(),
        BOS_STR.into(),
        EOS_STR.into(),
        DEATH_STR.into(),
    ];
    for d in 1..=10 {
        tokens.push(format!("AGE:D{d}"));
    }
    for s in &recipe.sexes {
        tokens.push(format!("SEX:{s}"));
    }
    for s in &recipe.smoke_levels {
        tokens.push(format!("SMOKE:{s}"));
    }
    for m in &recipe.lab_measures {
        for b in 1..=N_BINS {
            tokens.push(format!("LAB:{m}:Q{b}"));
        }
    }
    for m in &recipe.vital_measures {
        for b in 1..=N_BINS {
            tokens.push(format!("VITAL:{m}:Q{b}"));
        }
    }
    for c in &recipe.med_classes {
        tokens.push(format!("MED:{c}"));
    }
    for (c, d) in &recipe.med_drugs {
        if !recipe.med_classes.contains(c) {
            return Err(Error::Vocab(format!(
                "drug {d:?} references unknown med class {c:?}"
            )));
        }
        tokens.push(format!("MED:{c}:{d}"));
    }
    for code in &recipe.dx_codes {
        tokens.push(format!("DX:{code}"));
    }
    Vocabulary::from_tokens(tokens)
}
