//! DEFT corpus ingestion and the enriched jsonl record format.
//!
//! A DEFT file is tab-separated, 8 columns per token row. Sentences are
//! separated by one blank line, example windows by two or more consecutive
//! blank lines; files without window separators fall back to windows of
//! three sentences. Span ids (`tag_id`) link tokens into annotation spans;
//! a token's `root_id`/`relation` columns point at the span its relation
//! tail belongs to.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{self, LabelVocab, RelationVocab, TYPE_LABELS};
use crate::rng::derive_rng;

/// How to treat annotations outside the evaluated label sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolicy {
    /// Unknown span types or relation labels are schema errors.
    #[default]
    Strict,
    /// Unknown span types map to O, unknown relations are dropped; both
    /// are counted as warnings. Published corpus revisions carry labels
    /// beyond the evaluated six (e.g. `*-frag`), so real files need this.
    Permissive,
}

/// The 8 row fields, reorderable to track corpus revisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Token,
    Source,
    StartChar,
    EndChar,
    Tag,
    TagId,
    RootId,
    Relation,
}

pub fn standard_columns() -> Vec<Column> {
    vec![
        Column::Token,
        Column::Source,
        Column::StartChar,
        Column::EndChar,
        Column::Tag,
        Column::TagId,
        Column::RootId,
        Column::Relation,
    ]
}

#[derive(Clone, Debug)]
pub struct ParseOptions {
    pub policy: LabelPolicy,
    pub columns: Vec<Column>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            policy: LabelPolicy::Strict,
            columns: standard_columns(),
        }
    }
}

impl ParseOptions {
    pub fn permissive() -> Self {
        ParseOptions {
            policy: LabelPolicy::Permissive,
            ..Default::default()
        }
    }
}

/// One parsed corpus row. `None` stands for the `-1`/`0` null markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRow {
    pub text: String,
    pub source: String,
    pub start_char: i64,
    pub end_char: i64,
    pub tag: String,
    pub tag_id: Option<String>,
    pub root_id: Option<String>,
    pub relation: Option<String>,
}

/// A window of up to three sentences with resolved annotations.
/// Serialized one object per line in the enriched record files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub tokens: Vec<String>,
    /// Half-open `[start, end)` token ranges, one per sentence.
    pub sentence_bounds: Vec<(usize, usize)>,
    /// BIO tag strings aligned with `tokens`.
    pub tags: Vec<String>,
    /// `(head_token, tail_token, label)`; the tail is the first token of
    /// the annotated root span.
    pub relations: Vec<(usize, usize, String)>,
    pub pos: Option<Vec<String>>,
    pub coref_flags: Option<Vec<u8>>,
    pub rule_flags: Option<Vec<u8>>,
}

impl ExampleRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.sentence_bounds
            .iter()
            .map(|&(s, e)| &self.tokens[s..e])
    }

    /// Check the record invariants; `where_` names the record in errors.
    pub fn validate(&self, where_: &str) -> Result<()> {
        let t = self.tokens.len();
        let fail = |msg: String| Err(Error::Schema(format!("{where_}: {msg}")));
        if t == 0 {
            return fail("empty token list".into());
        }
        if self.sentence_bounds.is_empty() || self.sentence_bounds.len() > 3 {
            return fail(format!(
                "window has {} sentences, expected 1..=3",
                self.sentence_bounds.len()
            ));
        }
        let mut cursor = 0;
        for &(s, e) in &self.sentence_bounds {
            if s != cursor || e <= s {
                return fail(format!("sentence bounds {:?} do not tile 0..{t}", self.sentence_bounds));
            }
            cursor = e;
        }
        if cursor != t {
            return fail(format!("sentence bounds {:?} do not tile 0..{t}", self.sentence_bounds));
        }
        if self.tags.len() != t {
            return fail(format!("{} tags for {t} tokens", self.tags.len()));
        }
        let vocab = LabelVocab::new();
        for tag in &self.tags {
            labels::parse_tag(&vocab, tag)
                .map_err(|e| Error::Schema(format!("{where_}: {e}")))?;
        }
        let rvocab = RelationVocab::new();
        let mut heads = vec![false; t];
        for &(head, tail, ref label) in &self.relations {
            if head >= t || tail >= t {
                return fail(format!("relation ({head},{tail}) out of range for {t} tokens"));
            }
            if heads[head] {
                return Err(Error::Constraint(format!(
                    "{where_}: token {head} heads more than one relation"
                )));
            }
            heads[head] = true;
            if rvocab.id(label).is_none() {
                return fail(format!("unknown relation label {label:?}"));
            }
        }
        for (name, flags) in [("coref_flags", &self.coref_flags), ("rule_flags", &self.rule_flags)]
        {
            if let Some(f) = flags {
                if f.len() != t {
                    return fail(format!("{name} length {} for {t} tokens", f.len()));
                }
                if f.iter().any(|&v| v > 1) {
                    return fail(format!("{name} contains non-binary values"));
                }
            }
        }
        if let Some(p) = &self.pos {
            if p.len() != t {
                return fail(format!("pos length {} for {t} tokens", p.len()));
            }
        }
        Ok(())
    }
}

/// Parser output: records plus deduplicated warnings.
#[derive(Clone, Debug, Default)]
pub struct Parsed {
    pub records: Vec<ExampleRecord>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct WarningSink {
    counts: IndexMap<String, usize>,
}

impl WarningSink {
    fn warn(&mut self, msg: String) {
        *self.counts.entry(msg).or_insert(0) += 1;
    }

    fn into_vec(self) -> Vec<String> {
        self.counts
            .into_iter()
            .map(|(msg, n)| if n == 1 { msg } else { format!("{msg} (x{n})") })
            .collect()
    }
}

pub fn parse_deft_file(path: &Path, opts: &ParseOptions) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_deft_str(&path.display().to_string(), &text, opts)
}

/// Parse DEFT-format text. `source` is used in error messages only.
pub fn parse_deft_str(source: &str, text: &str, opts: &ParseOptions) -> Result<Parsed> {
    if opts.columns.len() != 8 {
        return Err(Error::Config(format!(
            "column order must list all 8 columns, got {}",
            opts.columns.len()
        )));
    }
    let mut warnings = WarningSink::default();

    // Sentences grouped into segments; >=2 consecutive blank lines split
    // segments, a single blank line splits sentences.
    let mut segments: Vec<Vec<Vec<(usize, TokenRow)>>> = vec![Vec::new()];
    let mut sentence: Vec<(usize, TokenRow)> = Vec::new();
    let mut blanks = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            blanks += 1;
            if !sentence.is_empty() {
                segments.last_mut().unwrap().push(std::mem::take(&mut sentence));
            }
            continue;
        }
        if blanks >= 2 && !segments.last().unwrap().is_empty() {
            segments.push(Vec::new());
        }
        blanks = 0;
        match parse_row(source, lineno, line, opts, &mut warnings)? {
            Some(row) => sentence.push((lineno, row)),
            None => {}
        }
    }
    if !sentence.is_empty() {
        segments.last_mut().unwrap().push(sentence);
    }

    let mut records = Vec::new();
    for segment in segments {
        // Windows hold at most three sentences; files without explicit
        // separators become consecutive three-sentence windows.
        for chunk in segment.chunks(3) {
            if chunk.iter().all(|s| s.is_empty()) {
                continue;
            }
            records.push(build_record(source, chunk, opts, &mut warnings)?);
        }
    }
    Ok(Parsed {
        records,
        warnings: warnings.into_vec(),
    })
}

fn null_marker(field: &str) -> bool {
    matches!(field, "-1" | "0" | "")
}

fn parse_row(
    source: &str,
    lineno: usize,
    line: &str,
    opts: &ParseOptions,
    warnings: &mut WarningSink,
) -> Result<Option<TokenRow>> {
    let mut fields: Vec<&str> = line.split('\t').collect();
    while fields.len() > 8 && fields.last().is_some_and(|f| f.trim().is_empty()) {
        fields.pop();
    }
    if fields.len() != 8 {
        let msg = format!("expected 8 tab-separated fields, found {}", fields.len());
        return match opts.policy {
            LabelPolicy::Strict => Err(Error::parse(source, lineno, msg)),
            LabelPolicy::Permissive => {
                warnings.warn(format!("{source}: skipped rows: {msg}"));
                Ok(None)
            }
        };
    }

    let mut row = TokenRow {
        text: String::new(),
        source: String::new(),
        start_char: 0,
        end_char: 0,
        tag: String::new(),
        tag_id: None,
        root_id: None,
        relation: None,
    };
    for (col, field) in opts.columns.iter().zip(&fields) {
        let field = field.trim();
        match col {
            Column::Token => row.text = field.to_string(),
            Column::Source => row.source = field.to_string(),
            Column::StartChar => {
                row.start_char = field
                    .parse()
                    .map_err(|_| Error::parse(source, lineno, format!("bad start offset {field:?}")))?
            }
            Column::EndChar => {
                row.end_char = field
                    .parse()
                    .map_err(|_| Error::parse(source, lineno, format!("bad end offset {field:?}")))?
            }
            Column::Tag => row.tag = field.to_string(),
            Column::TagId => {
                row.tag_id = (!null_marker(field)).then(|| field.to_string());
            }
            Column::RootId => {
                row.root_id = (!null_marker(field)).then(|| field.to_string());
            }
            Column::Relation => {
                row.relation = (!null_marker(field)).then(|| field.to_string());
            }
        }
    }
    if row.end_char < row.start_char {
        let msg = format!("end offset {} before start {}", row.end_char, row.start_char);
        match opts.policy {
            LabelPolicy::Strict => return Err(Error::parse(source, lineno, msg)),
            LabelPolicy::Permissive => warnings.warn(format!("{source}: {msg}")),
        }
    }
    Ok(Some(row))
}

fn build_record(
    source: &str,
    sentences: &[Vec<(usize, TokenRow)>],
    opts: &ParseOptions,
    warnings: &mut WarningSink,
) -> Result<ExampleRecord> {
    let vocab = LabelVocab::new();
    let rvocab = RelationVocab::new();

    let mut tokens = Vec::new();
    let mut bounds = Vec::new();
    let mut tag_ids = Vec::new();
    let mut rows: Vec<&(usize, TokenRow)> = Vec::new();
    for sent in sentences {
        let start = tokens.len();
        for entry in sent {
            let (lineno, row) = entry;
            tokens.push(row.text.clone());
            let tag = match labels::parse_tag(&vocab, &row.tag) {
                Ok(id) => id,
                Err(e) => match opts.policy {
                    LabelPolicy::Strict => {
                        return Err(Error::Schema(format!("{source}:{lineno}: {e}")))
                    }
                    LabelPolicy::Permissive => {
                        warnings.warn(format!(
                            "{source}: tag {:?} outside the evaluated set mapped to O",
                            row.tag
                        ));
                        vocab.outside_id()
                    }
                },
            };
            tag_ids.push(tag);
            rows.push(entry);
        }
        bounds.push((start, tokens.len()));
    }

    let repaired = labels::repair_bio(&vocab, &mut tag_ids);
    if repaired > 0 {
        warnings.warn(format!("{source}: leading I- tags promoted to B-"));
    }

    // First token of each annotation span, keyed by span id.
    let mut span_first: IndexMap<&str, usize> = IndexMap::new();
    for (i, (_, row)) in rows.iter().enumerate() {
        if let Some(id) = &row.tag_id {
            span_first.entry(id.as_str()).or_insert(i);
        }
    }

    let mut relations = Vec::new();
    for (i, (lineno, row)) in rows.iter().enumerate() {
        let self_root = match (&row.tag_id, &row.root_id) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if self_root {
            continue; // the corpus marks relation roots by pointing at themselves
        }
        match (&row.root_id, &row.relation) {
            (None, None) => {}
            (Some(root), Some(rel)) => {
                let Some(&tail) = span_first.get(root.as_str()) else {
                    warnings.warn(format!(
                        "{source}: unresolved relation root {root:?}, relation dropped"
                    ));
                    continue;
                };
                match rvocab.id(rel) {
                    Some(rid) => relations.push((i, tail, rvocab.label(rid).to_string())),
                    None => match opts.policy {
                        LabelPolicy::Strict => {
                            return Err(Error::Schema(format!(
                                "{source}:{lineno}: unknown relation label {rel:?}"
                            )))
                        }
                        LabelPolicy::Permissive => warnings.warn(format!(
                            "{source}: relation label {rel:?} outside the evaluated set dropped"
                        )),
                    },
                }
            }
            (root, rel) => {
                let msg = format!(
                    "root_id {root:?} and relation {rel:?} must be present together"
                );
                match opts.policy {
                    LabelPolicy::Strict => {
                        return Err(Error::Schema(format!("{source}:{lineno}: {msg}")))
                    }
                    LabelPolicy::Permissive => {
                        warnings.warn(format!("{source}: {msg}, relation dropped"))
                    }
                }
            }
        }
    }

    let record = ExampleRecord {
        tokens,
        sentence_bounds: bounds,
        tags: tag_ids.iter().map(|&t| vocab.tag(t).to_string()).collect(),
        relations,
        pos: None,
        coref_flags: None,
        rule_flags: None,
    };
    record.validate(source)?;
    Ok(record)
}

/// Render records in the canonical DEFT layout: space-joined character
/// offsets, per-file span ids `T1, T2, …`, nulls as `-1`/`-1`/`0`, one
/// blank line between sentences, two between windows.
pub fn write_deft(records: &[ExampleRecord], source: &str) -> Result<String> {
    let vocab = LabelVocab::new();
    let mut out = String::new();
    let mut offset: i64 = 0;
    let mut next_span = 1usize;
    for (w, rec) in records.iter().enumerate() {
        rec.validate(&format!("{source} window {w}"))?;
        let tag_ids: Vec<usize> = rec
            .tags
            .iter()
            .map(|t| labels::parse_tag(&vocab, t))
            .collect::<Result<_>>()?;
        // Span id per token.
        let mut span_of = vec![None; rec.tokens.len()];
        for (s, e, _) in labels::spans(&vocab, &tag_ids) {
            for tok in s..e {
                span_of[tok] = Some(format!("T{next_span}"));
            }
            next_span += 1;
        }
        let mut root_of: Vec<Option<(String, String)>> = vec![None; rec.tokens.len()];
        for &(head, tail, ref label) in &rec.relations {
            let Some(root) = span_of[tail].clone() else {
                return Err(Error::Constraint(format!(
                    "{source} window {w}: relation tail {tail} is not inside a span"
                )));
            };
            root_of[head] = Some((root, label.clone()));
        }

        if w > 0 {
            out.push_str("\n\n");
        }
        for (si, &(s, e)) in rec.sentence_bounds.iter().enumerate() {
            if si > 0 {
                out.push('\n');
            }
            for tok in s..e {
                let text = &rec.tokens[tok];
                let start = offset;
                let end = start + text.chars().count() as i64;
                offset = end + 1;
                let tag_id = span_of[tok].as_deref().unwrap_or("-1");
                let (root, rel) = match &root_of[tok] {
                    Some((r, l)) => (r.as_str(), l.as_str()),
                    None => ("-1", "0"),
                };
                writeln!(
                    out,
                    "{text}\t{source}\t{start}\t{end}\t{}\t{tag_id}\t{root}\t{rel}",
                    rec.tags[tok]
                )
                .expect("string write");
            }
        }
    }
    Ok(out)
}

/// Write records as one JSON object per line.
pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Schema(format!("serialize record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a record file, validating and BIO-repairing each line.
pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = LabelVocab::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ExampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        rec.validate(&format!("{}:{}", path.display(), i + 1))?;
        let mut ids: Vec<usize> = rec
            .tags
            .iter()
            .map(|t| labels::parse_tag(&vocab, t))
            .collect::<Result<_>>()?;
        if labels::repair_bio(&vocab, &mut ids) > 0 {
            rec.tags = ids.iter().map(|&t| vocab.tag(t).to_string()).collect();
        }
        records.push(rec);
    }
    Ok(records)
}

/// Span counts per concept type, in canonical label order.
pub fn split_stats(records: &[ExampleRecord]) -> IndexMap<String, usize> {
    let vocab = LabelVocab::new();
    let mut counts: IndexMap<String, usize> =
        TYPE_LABELS.iter().map(|l| (l.to_string(), 0)).collect();
    for rec in records {
        let ids: Vec<usize> = rec
            .tags
            .iter()
            .map(|t| labels::parse_tag(&vocab, t).expect("validated record"))
            .collect();
        for (_, _, ty) in labels::spans(&vocab, &ids) {
            *counts.get_mut(TYPE_LABELS[ty]).unwrap() += 1;
        }
    }
    counts
}

/// Relation instance counts per label, in canonical label order.
pub fn relation_stats(records: &[ExampleRecord]) -> IndexMap<String, usize> {
    let rvocab = RelationVocab::new();
    let mut counts: IndexMap<String, usize> = rvocab
        .positive()
        .iter()
        .map(|l| (l.clone(), 0))
        .collect();
    for rec in records {
        for (_, _, label) in &rec.relations {
            *counts.get_mut(label).expect("validated record") += 1;
        }
    }
    counts
}

/// DEFT files under `dir` (extensions `.deft`/`.tsv`), sorted by name.
pub fn list_deft_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e == "deft" || e == "tsv")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Seeded choice of `n` development files; output sorted by name.
pub fn choose_dev_files(files: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > files.len() {
        return Err(Error::Config(format!(
            "cannot pick {n} dev files from {}",
            files.len()
        )));
    }
    let mut rng = derive_rng(seed, "dev-split");
    let mut chosen: Vec<String> = sample(&mut rng, files.len(), n)
        .into_iter()
        .map(|i| files[i].clone())
        .collect();
    chosen.sort();
    Ok(chosen)
}
