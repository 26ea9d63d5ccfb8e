//! Vocabulary building and conversion of records into model inputs:
//! token/POS indices, binary indicator features (coreference plus
//! rule-pattern matches), gold targets, and optional precomputed
//! embedding stacks.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::ExampleRecord;
use crate::error::{Error, Result};
use crate::labels::{self, LabelVocab, RelationVocab};
use crate::relation;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Sentence-initial words of the demonstrative-determiner rule.
pub const DEMONSTRATIVES: [&str; 4] = ["this", "these", "that", "those"];

/// A named set of sentence-initial trigger words. A sentence whose first
/// token lowercases to one of the words flags every token of the sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePattern {
    pub name: String,
    pub words: Vec<String>,
}

impl RulePattern {
    pub fn demonstrative() -> Self {
        RulePattern {
            name: "demonstrative".into(),
            words: DEMONSTRATIVES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Tokens seen fewer times than this in training map to UNK.
    pub min_token_freq: usize,
    /// Consume per-token POS strings from the records.
    pub use_pos: bool,
    /// Reserve a binary dimension for coreference indicators.
    pub use_coref: bool,
    /// Replace the learned token embedding with a precomputed stack.
    pub use_stack: bool,
    /// Layer count L of the stack.
    pub stack_layers: usize,
    /// Width d_e of each stack layer.
    pub stack_width: usize,
    pub rule_patterns: Vec<RulePattern>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_token_freq: 1,
            use_pos: false,
            use_coref: true,
            use_stack: false,
            stack_layers: 2,
            stack_width: 16,
            rule_patterns: vec![RulePattern::demonstrative()],
        }
    }
}

impl FeatureConfig {
    /// One dimension for coreference (when enabled) plus one per rule pattern.
    pub fn binary_dim(&self) -> usize {
        usize::from(self.use_coref) + self.rule_patterns.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_token_freq == 0 {
            return Err(Error::Config("min_token_freq must be >= 1".into()));
        }
        if self.use_stack && (self.stack_layers == 0 || self.stack_width == 0) {
            return Err(Error::Config("stack dims must be positive".into()));
        }
        Ok(())
    }
}

/// String-to-index table with reserved PAD (0) and UNK (1) entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    items: IndexMap<String, usize>,
}

impl Vocab {
    fn from_counts(counts: IndexMap<String, usize>, min_freq: usize) -> Self {
        let mut items = IndexMap::new();
        // First-occurrence order keeps ids stable across runs.
        for (tok, n) in counts {
            if n >= min_freq {
                let next = 2 + items.len();
                items.insert(tok, next);
            }
        }
        Vocab { items }
    }

    /// Table size including PAD and UNK.
    pub fn len(&self) -> usize {
        self.items.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, s: &str) -> usize {
        self.items.get(s).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, s: &str) -> bool {
        self.items.contains_key(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub tokens: Vocab,
    pub pos: Vocab,
}

/// Build token and POS vocabularies from training records only.
pub fn build_vocabs(records: &[ExampleRecord], config: &FeatureConfig) -> Result<Vocabs> {
    if records.is_empty() {
        return Err(Error::Config("cannot build vocabularies from zero records".into()));
    }
    config.validate()?;
    let mut tok_counts: IndexMap<String, usize> = IndexMap::new();
    let mut pos_counts: IndexMap<String, usize> = IndexMap::new();
    for rec in records {
        for t in &rec.tokens {
            *tok_counts.entry(t.clone()).or_insert(0) += 1;
        }
        if let Some(pos) = &rec.pos {
            for p in pos {
                *pos_counts.entry(p.clone()).or_insert(0) += 1;
            }
        }
    }
    Ok(Vocabs {
        tokens: Vocab::from_counts(tok_counts, config.min_token_freq),
        // POS inventories are tiny; frequency cutoffs apply to tokens only.
        pos: Vocab::from_counts(pos_counts, 1),
    })
}

/// Flags for one rule pattern: 1 for every token of a sentence whose
/// first token lowercases to one of the pattern words.
pub fn rule_pattern_flags(record: &ExampleRecord, words: &[String]) -> Vec<u8> {
    let mut flags = vec![0u8; record.len()];
    for &(s, e) in &record.sentence_bounds {
        let first = record.tokens[s].to_lowercase();
        if words.iter().any(|w| w.to_lowercase() == first) {
            for f in &mut flags[s..e] {
                *f = 1;
            }
        }
    }
    flags
}

/// The shipped demonstrative-determiner rule.
pub fn demonstrative_rule(record: &ExampleRecord) -> Vec<u8> {
    let words: Vec<String> = DEMONSTRATIVES.iter().map(|s| s.to_string()).collect();
    rule_pattern_flags(record, &words)
}

/// Binary coreference indicators from token-index clusters.
pub fn coref_flags_from_clusters(t: usize, clusters: &[Vec<usize>]) -> Result<Vec<u8>> {
    let mut flags = vec![0u8; t];
    for cluster in clusters {
        for &i in cluster {
            if i >= t {
                return Err(Error::Schema(format!(
                    "coreference index {i} out of range for {t} tokens"
                )));
            }
            flags[i] = 1;
        }
    }
    Ok(flags)
}

/// A record converted to index/feature arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    /// `[T x binary_dim]`, values in {0, 1}.
    pub binary_feats: Tensor,
    pub layer_stack: Option<Tensor>,
    pub gold_tags: Vec<usize>,
    /// Gold relation target c per token (0 = no relation).
    pub gold_targets: Vec<usize>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Convert one record. Pure: identical inputs give identical outputs.
pub fn encode(
    record: &ExampleRecord,
    vocabs: &Vocabs,
    config: &FeatureConfig,
    stack: Option<Tensor>,
) -> Result<EncodedExample> {
    let t = record.len();
    let label_vocab = LabelVocab::new();
    let rel_vocab = RelationVocab::new();

    let token_ids = record.tokens.iter().map(|s| vocabs.tokens.id(s)).collect();
    let pos_ids = match (&record.pos, config.use_pos) {
        (Some(pos), true) => pos.iter().map(|p| vocabs.pos.id(p)).collect(),
        (None, true) => {
            return Err(Error::Config(
                "feature config requires POS but the record has none".into(),
            ))
        }
        (_, false) => vec![PAD; t],
    };

    let b = config.binary_dim();
    let mut feats = vec![0.0; t * b];
    let pattern_base = usize::from(config.use_coref);
    if config.use_coref {
        let coref = record.coref_flags.clone().unwrap_or_else(|| vec![0; t]);
        for (i, &f) in coref.iter().enumerate() {
            feats[i * b] = f as f64;
        }
    }
    for (p, pattern) in config.rule_patterns.iter().enumerate() {
        let flags = rule_pattern_flags(record, &pattern.words);
        for (i, &f) in flags.iter().enumerate() {
            feats[i * b + pattern_base + p] = f as f64;
        }
    }

    let layer_stack = match (stack, config.use_stack) {
        (Some(s), true) => {
            let want = [t, config.stack_layers, config.stack_width];
            if s.shape() != want {
                return Err(Error::Dimension(format!(
                    "layer stack shape {:?}, expected {:?}",
                    s.shape(),
                    want
                )));
            }
            Some(s)
        }
        (None, true) => {
            return Err(Error::Config(
                "feature config requires an embedding stack but none was given".into(),
            ))
        }
        (Some(_), false) => {
            return Err(Error::Config(
                "embedding stack given but the feature config does not use one".into(),
            ))
        }
        (None, false) => None,
    };

    let mut gold_tags = Vec::with_capacity(t);
    for tag in &record.tags {
        gold_tags.push(labels::parse_tag(&label_vocab, tag)?);
    }

    let triples: Vec<(usize, usize, usize)> = record
        .relations
        .iter()
        .map(|(h, tl, label)| {
            let k = rel_vocab
                .id(label)
                .ok_or_else(|| Error::Schema(format!("unknown relation label {label:?}")))?;
            Ok((*h, *tl, k))
        })
        .collect::<Result<_>>()?;
    let gold_targets = relation::gold_targets(&triples, t, rel_vocab.positive().len())?;

    Ok(EncodedExample {
        token_ids,
        pos_ids,
        binary_feats: Tensor::new(vec![t, b], feats)?,
        layer_stack,
        gold_tags,
        gold_targets,
    })
}

// ---------------------------------------------------------------------------
// Embedding-stack files: `<path>` holds a u64 count followed by that many
// little-endian f64 values (token-major, then layer, then width); a sibling
// `<path>.manifest` records layers, width, count, and a checksum of the
// payload bytes.

pub fn write_stack_file(path: &Path, layers: usize, width: usize, data: &[f64]) -> Result<()> {
    if layers == 0 || width == 0 || data.len() % (layers * width) != 0 {
        return Err(Error::Dimension(format!(
            "{} values do not tile {layers} x {width} layers",
            data.len()
        )));
    }
    let mut bytes = vec![0u8; 8 + data.len() * 8];
    LittleEndian::write_u64(&mut bytes[..8], data.len() as u64);
    LittleEndian::write_f64_into(data, &mut bytes[8..]);
    let checksum = fnv1a64(&bytes[8..]);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let manifest = format!(
        "layers = {layers}\nwidth = {width}\ncount = {}\nchecksum = {checksum:016x}\n",
        data.len()
    );
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    os.into()
}

pub struct StackFile {
    pub layers: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl StackFile {
    pub fn tokens(&self) -> usize {
        self.data.len() / (self.layers * self.width)
    }

    /// Per-record `[T x L x d_e]` slices covering the whole file.
    pub fn slices(&self, records: &[ExampleRecord]) -> Result<Vec<Tensor>> {
        let total: usize = records.iter().map(ExampleRecord::len).sum();
        if total != self.tokens() {
            return Err(Error::Dimension(format!(
                "stack file covers {} tokens but the records have {total}",
                self.tokens()
            )));
        }
        let per_tok = self.layers * self.width;
        let mut out = Vec::with_capacity(records.len());
        let mut cursor = 0;
        for rec in records {
            let n = rec.len() * per_tok;
            out.push(Tensor::new(
                vec![rec.len(), self.layers, self.width],
                self.data[cursor..cursor + n].to_vec(),
            )?);
            cursor += n;
        }
        Ok(out)
    }
}

pub fn read_stack_file(path: &Path) -> Result<StackFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(format!("{}: truncated stack file", path.display())));
    }
    let count = LittleEndian::read_u64(&bytes[..8]) as usize;
    if bytes.len() != 8 + count * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: count prefix {count} does not match file size",
            path.display()
        )));
    }
    let mut data = vec![0.0f64; count];
    LittleEndian::read_f64_into(&bytes[8..], &mut data);

    let mpath = manifest_path(path);
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut layers = None;
    let mut width = None;
    let mut mcount = None;
    let mut checksum = None;
    for (i, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&mpath, i + 1, "expected `key = value`"))?;
        let value = value.trim();
        match key.trim() {
            "layers" => layers = Some(parse_usize(&mpath, i, value)?),
            "width" => width = Some(parse_usize(&mpath, i, value)?),
            "count" => mcount = Some(parse_usize(&mpath, i, value)?),
            "checksum" => checksum = Some(value.to_string()),
            other => {
                return Err(Error::parse(&mpath, i + 1, format!("unknown key {other:?}")))
            }
        }
    }
    let (layers, width) = match (layers, width) {
        (Some(l), Some(w)) if l > 0 && w > 0 => (l, w),
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: manifest must give positive layers and width",
                mpath.display()
            )))
        }
    };
    if mcount.is_some_and(|c| c != count) {
        return Err(Error::Checkpoint(format!(
            "{}: manifest count disagrees with the binary prefix",
            mpath.display()
        )));
    }
    if count % (layers * width) != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: {count} values do not tile {layers} x {width}",
            path.display()
        )));
    }
    let actual = format!("{:016x}", fnv1a64(&bytes[8..]));
    match checksum {
        Some(c) if c == actual => {}
        Some(c) => {
            return Err(Error::Checkpoint(format!(
                "{}: checksum mismatch (manifest {c}, payload {actual})",
                path.display()
            )))
        }
        None => {
            return Err(Error::Checkpoint(format!(
                "{}: manifest is missing the checksum",
                mpath.display()
            )))
        }
    }
    Ok(StackFile { layers, width, data })
}

fn parse_usize(path: &Path, line: usize, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(path, line + 1, format!("bad integer {v:?}")))
}
