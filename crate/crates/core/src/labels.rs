//! Concept-type and relation label inventories, plus BIO tag handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Concept span types, in canonical order.
pub const TYPE_LABELS: [&str; 6] = [
    "Term",
    "Alias-Term",
    "Referential-Term",
    "Definition",
    "Referential-Definition",
    "Qualifier",
];

/// Relation labels, in canonical order. Index 0 is reserved for the
/// "no relation" class in the classifier and is not listed here.
pub const RELATION_LABELS: [&str; 5] = [
    "Direct-defines",
    "Indirect-defines",
    "Refers-to",
    "AKA",
    "Qualifies",
];

/// A parsed BIO tag: outside, or begin/inside of one of the span types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bio {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// Tag-set over the six span types in BIO encoding.
///
/// Index 0 is `O`; type `t` maps to `B` at `1 + 2t` and `I` at `2 + 2t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    tags: Vec<String>,
}

impl Default for LabelVocab {
    fn default() -> Self {
        let mut tags = vec!["O".to_string()];
        for t in TYPE_LABELS {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        LabelVocab { tags }
    }
}

impl LabelVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn outside_id(&self) -> usize {
        0
    }

    pub fn type_index(&self, ty: &str) -> Option<usize> {
        TYPE_LABELS.iter().position(|t| *t == ty)
    }

    pub fn begin_id(&self, type_idx: usize) -> usize {
        1 + 2 * type_idx
    }

    pub fn inside_id(&self, type_idx: usize) -> usize {
        2 + 2 * type_idx
    }

    pub fn parse(&self, id: usize) -> Bio {
        if id == 0 {
            Bio::Outside
        } else if id % 2 == 1 {
            Bio::Begin((id - 1) / 2)
        } else {
            Bio::Inside((id - 2) / 2)
        }
    }

    /// True when `next` may follow `prev` under BIO well-formedness.
    /// An `I-X` requires the previous tag to be `B-X` or `I-X`.
    pub fn transition_allowed(&self, prev: Option<usize>, next: usize) -> bool {
        match self.parse(next) {
            Bio::Outside | Bio::Begin(_) => true,
            Bio::Inside(ty) => matches!(
                prev.map(|p| self.parse(p)),
                Some(Bio::Begin(p)) | Some(Bio::Inside(p)) if p == ty
            ),
        }
    }
}

/// Parse a surface tag like `B-Term` / `I-Definition` / `O`.
/// Returns the tag id in the given vocab, or a schema error for
/// unknown types or malformed prefixes.
pub fn parse_tag(vocab: &LabelVocab, raw: &str) -> Result<usize> {
    if raw == "O" {
        return Ok(0);
    }
    let (prefix, ty) = raw
        .split_once('-')
        .ok_or_else(|| Error::Schema(format!("malformed tag {raw:?}")))?;
    let ti = vocab
        .type_index(ty)
        .ok_or_else(|| Error::Schema(format!("unknown span type {ty:?} in tag {raw:?}")))?;
    match prefix {
        "B" => Ok(vocab.begin_id(ti)),
        "I" => Ok(vocab.inside_id(ti)),
        _ => Err(Error::Schema(format!("malformed tag {raw:?}"))),
    }
}

/// Rewrite a tag sequence so every span opens with `B`. A leading `I-X`
/// (sequence-initial, after `O`, or after a span of another type) becomes
/// `B-X`; everything else is untouched. Returns the number of rewrites.
pub fn repair_bio(vocab: &LabelVocab, tags: &mut [usize]) -> usize {
    let mut fixes = 0;
    let mut prev: Option<usize> = None;
    for t in tags.iter_mut() {
        if let Bio::Inside(ty) = vocab.parse(*t) {
            if !vocab.transition_allowed(prev, *t) {
                *t = vocab.begin_id(ty);
                fixes += 1;
            }
        }
        prev = Some(*t);
    }
    fixes
}

/// True when a tag sequence needs no `repair_bio` rewrites.
pub fn is_well_formed(vocab: &LabelVocab, tags: &[usize]) -> bool {
    let mut prev: Option<usize> = None;
    for &t in tags {
        if matches!(vocab.parse(t), Bio::Inside(_)) && !vocab.transition_allowed(prev, t) {
            return false;
        }
        prev = Some(t);
    }
    true
}

/// Maximal spans `(start, end_exclusive, type_idx)` of a tag sequence.
/// A span starts at `B-X` and extends over following `I-X` tags.
/// Stray `I-X` tags (ill-formed input) also open spans, mirroring the
/// repair rule.
pub fn spans(vocab: &LabelVocab, tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &t) in tags.iter().enumerate() {
        match vocab.parse(t) {
            Bio::Outside => {}
            Bio::Begin(ty) => out.push((i, i + 1, ty)),
            Bio::Inside(ty) => match out.last_mut() {
                Some(last) if last.2 == ty && last.1 == i => last.1 = i + 1,
                _ => out.push((i, i + 1, ty)),
            },
        }
    }
    out
}

/// Relation label set. Index 0 is the explicit "no relation" class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    labels: Vec<String>,
}

impl Default for RelationVocab {
    fn default() -> Self {
        let mut labels = vec!["None".to_string()];
        labels.extend(RELATION_LABELS.iter().map(|s| s.to_string()));
        RelationVocab { labels }
    }
}

impl RelationVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of classes including the "no relation" class.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positive relation labels only (excludes class 0).
    pub fn positive(&self) -> &[String] {
        &self.labels[1..]
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn none_id(&self) -> usize {
        0
    }

    /// Resolve a surface relation name to its class id. Lookup is
    /// case-insensitive (corpus files spell e.g. `Direct-Defines`) and
    /// folds the legacy `Supplements` spelling into `Qualifies`.
    pub fn id(&self, raw: &str) -> Option<usize> {
        let canon = normalize_relation(raw);
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(canon))
    }
}

/// Canonical spelling for a relation name. `Supplements` is an older
/// name for `Qualifies` and is folded into it, case-insensitively.
pub fn normalize_relation(raw: &str) -> &str {
    if raw.eq_ignore_ascii_case("supplements") {
        "Qualifies"
    } else {
        raw
    }
}
