//! Synthetic desk-scale corpus: enough windows to cover every concept type
//! and relation label, written in the same TSV format as the real data, so
//! the whole pipeline can be exercised offline.
//!
//! The text is invented, not excerpted, and makes no attempt to match the
//! real corpus's label imbalance. One file deliberately contains a relation
//! whose root id matches no span, to exercise the dangling-root warning.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{relation_stats, split_stats, write_deft, ExampleRecord};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Span and relation counts recorded next to the generated files; parsing
/// the files back must reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureStats {
    pub files: usize,
    pub windows: usize,
    pub spans: IndexMap<String, usize>,
    pub relations: IndexMap<String, usize>,
}

pub struct Fixture {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub stats_path: PathBuf,
}

/// A phrase with every token tagged: first token B-, rest I-, or all O.
fn phrase(words: &str, ty: Option<&str>) -> Vec<(String, String)> {
    words
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            let tag = match ty {
                None => "O".to_string(),
                Some(t) if i == 0 => format!("B-{t}"),
                Some(t) => format!("I-{t}"),
            };
            (w.to_string(), tag)
        })
        .collect()
}

type Tagged = Vec<(String, String)>;

fn o(words: &str) -> Tagged {
    phrase(words, None)
}

/// Relation endpoint: the `occ`-th span of type `ty` in the window (1-based),
/// identified by its B- token.
#[derive(Clone, Copy)]
struct At(&'static str, usize);

struct WindowSpec {
    sentences: Vec<Tagged>,
    relations: Vec<(At, At, &'static str)>,
}

fn resolve(tags: &[String], at: At) -> usize {
    let wanted = format!("B-{}", at.0);
    tags.iter()
        .enumerate()
        .filter(|(_, t)| **t == wanted)
        .map(|(i, _)| i)
        .nth(at.1 - 1)
        .unwrap_or_else(|| panic!("no span {} #{} in window", at.0, at.1))
}

fn build(spec: WindowSpec) -> ExampleRecord {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut bounds = Vec::new();
    for sentence in spec.sentences {
        let start = tokens.len();
        for (tok, tag) in sentence {
            tokens.push(tok);
            tags.push(tag);
        }
        bounds.push((start, tokens.len()));
    }
    let mut relations: Vec<(usize, usize, String)> = spec
        .relations
        .into_iter()
        .map(|(h, t, label)| (resolve(&tags, h), resolve(&tags, t), label.to_string()))
        .collect();
    relations.sort_unstable_by_key(|&(h, _, _)| h);
    ExampleRecord {
        tokens,
        sentence_bounds: bounds,
        tags,
        relations,
        pos: None,
        coref_flags: None,
        rule_flags: None,
    }
}

fn cat(parts: &[Tagged]) -> Tagged {
    parts.iter().flatten().cloned().collect()
}

const FILLERS: [&str; 6] = [
    "Students meet the idea early .",
    "The term appears in many courses .",
    "Teachers repeat it often .",
    "Examples help make it concrete .",
    "The textbook devotes a chapter to it .",
    "Exams ask about it every year .",
];

fn simple_window(term: &str, article: &str, def: &str, filler: &str) -> WindowSpec {
    WindowSpec {
        sentences: vec![
            cat(&[
                o(article),
                phrase(term, Some("Term")),
                o("is"),
                phrase(def, Some("Definition")),
                o("."),
            ]),
            o(filler),
        ],
        relations: vec![(At("Definition", 1), At("Term", 1), "Direct-defines")],
    }
}

fn alias_window(term: &str, alias: &str, def: &str, filler: &str) -> WindowSpec {
    WindowSpec {
        sentences: vec![
            cat(&[
                o("The"),
                phrase(term, Some("Term")),
                o(", also called the"),
                phrase(alias, Some("Alias-Term")),
                o(", is"),
                phrase(def, Some("Definition")),
                o("."),
            ]),
            o(filler),
        ],
        relations: vec![
            (At("Alias-Term", 1), At("Term", 1), "AKA"),
            (At("Definition", 1), At("Term", 1), "Direct-defines"),
        ],
    }
}

fn qualifier_window(field: &str, term: &str, def: &str, filler: &str) -> WindowSpec {
    WindowSpec {
        sentences: vec![
            cat(&[
                phrase(&format!("In {field}"), Some("Qualifier")),
                o(", a"),
                phrase(term, Some("Term")),
                o("is"),
                phrase(def, Some("Definition")),
                o("."),
            ]),
            o(filler),
        ],
        relations: vec![
            (At("Qualifier", 1), At("Term", 1), "Qualifies"),
            (At("Definition", 1), At("Term", 1), "Direct-defines"),
        ],
    }
}

fn ref_def_window(term: &str, article: &str, def: &str, extra: &str) -> WindowSpec {
    WindowSpec {
        sentences: vec![
            cat(&[
                o(article),
                phrase(term, Some("Term")),
                o("is"),
                phrase(def, Some("Definition")),
                o("."),
            ]),
            cat(&[
                phrase("That definition", Some("Referential-Definition")),
                o(&format!("also covers {extra} .")),
            ]),
        ],
        relations: vec![
            (At("Definition", 1), At("Term", 1), "Direct-defines"),
            (At("Referential-Definition", 1), At("Definition", 1), "Refers-to"),
        ],
    }
}

/// Three sentences: a defined term, a demonstrative-determiner sentence
/// whose referential mention picks the term back up and acquires a second,
/// indirect definition, and an unannotated closer.
fn referential_window(
    term: &str,
    def: &str,
    ref_mention: &str,
    indirect_def: &str,
    closer: &str,
) -> WindowSpec {
    WindowSpec {
        sentences: vec![
            cat(&[
                phrase(term, Some("Term")),
                o("are"),
                phrase(def, Some("Definition")),
                o("."),
            ]),
            cat(&[
                phrase(ref_mention, Some("Referential-Term")),
                phrase(indirect_def, Some("Definition")),
                o("."),
            ]),
            o(closer),
        ],
        relations: vec![
            (At("Definition", 1), At("Term", 1), "Direct-defines"),
            (At("Referential-Term", 1), At("Term", 1), "Refers-to"),
            (At("Definition", 2), At("Referential-Term", 1), "Indirect-defines"),
        ],
    }
}

fn double_window(a: (&str, &str, &str), b: (&str, &str, &str)) -> WindowSpec {
    let pair = |(article, term, def): (&str, &str, &str)| {
        cat(&[
            o(article),
            phrase(term, Some("Term")),
            o("is"),
            phrase(def, Some("Definition")),
            o("."),
        ])
    };
    WindowSpec {
        sentences: vec![pair(a), pair(b)],
        relations: vec![
            (At("Definition", 1), At("Term", 1), "Direct-defines"),
            (At("Definition", 2), At("Term", 2), "Direct-defines"),
        ],
    }
}

fn plain_window(s1: &str, s2: &str) -> WindowSpec {
    WindowSpec {
        sentences: vec![o(s1), o(s2)],
        relations: vec![],
    }
}

fn clean_windows() -> Vec<ExampleRecord> {
    let simple: [(&str, &str, &str); 12] = [
        ("laser", "A", "a device that emits focused light"),
        ("ion", "An", "an atom with net electric charge"),
        ("enzyme", "An", "a protein that speeds chemical reactions"),
        ("polymer", "A", "a long chain of repeating units"),
        ("comet", "A", "an icy body orbiting the sun"),
        ("magma", "The", "molten rock beneath the surface"),
        ("vaccine", "A", "a preparation that trains immune defenses"),
        ("drought", "A", "a long period of scarce rainfall"),
        ("fulcrum", "A", "the pivot point of a lever"),
        ("tariff", "A", "a tax placed on imported goods"),
        ("sonnet", "A", "a poem of fourteen lines"),
        ("catalyst", "A", "a substance that accelerates a reaction"),
    ];
    let aliases = [
        ("sternum", "breastbone", "the flat bone in the chest"),
        ("voltage", "electric potential", "the push behind electric current"),
        ("caribou", "reindeer", "a large northern deer"),
        ("cranium", "skull", "the bone case around the brain"),
    ];
    let qualifiers = [
        ("chemistry", "mole", "a unit counting particles"),
        ("music", "chord", "several notes played together"),
        ("law", "tort", "a civil wrong causing harm"),
        ("sailing", "knot", "one nautical mile per hour"),
    ];
    let ref_defs = [
        ("acid", "An", "a compound that donates protons", "some salts"),
        ("planet", "A", "a body orbiting a star", "several dwarf worlds"),
        ("mammal", "A", "an animal that nurses its young", "most whales"),
        ("verb", "A", "a word expressing an action", "helper words"),
    ];
    let referentials = [
        (
            "Tectonic plates",
            "large slabs of moving rock",
            "These plates",
            "drift slowly across the mantle",
            "Geologists map their boundaries carefully .",
        ),
        (
            "Glaciers",
            "huge rivers of packed ice",
            "These glaciers",
            "carve deep valleys over centuries",
            "Their retreat is measured every summer .",
        ),
        (
            "Neurons",
            "cells that carry nerve signals",
            "These cells",
            "fire rapid electrical pulses",
            "The brain holds billions of them .",
        ),
        (
            "Antibodies",
            "proteins that bind invaders",
            "These proteins",
            "mark harmful microbes for removal",
            "Blood tests can count them .",
        ),
    ];
    let doubles = [
        (
            ("A", "proton", "a particle with positive charge"),
            ("An", "electron", "a particle with negative charge"),
        ),
        (
            ("A", "noun", "a word naming a person or thing"),
            ("A", "pronoun", "a word standing in for a noun"),
        ),
    ];
    let plains = [
        ("The morning was cold and quiet .", "Nobody came to the reading room ."),
        ("Rain fell for three days .", "The river rose slowly ."),
        ("She packed the samples with care .", "The crate left on Tuesday ."),
        ("The lecture hall was full .", "Many questions followed the talk ."),
        ("That claim needs closer study .", "The committee meets next week ."),
        ("The library closes at nine .", "Latecomers wait outside ."),
    ];

    let mut specs = Vec::new();
    for (i, (term, article, def)) in simple.iter().enumerate() {
        specs.push(simple_window(term, article, def, FILLERS[i % FILLERS.len()]));
    }
    for (i, (term, alias, def)) in aliases.iter().enumerate() {
        specs.push(alias_window(term, alias, def, FILLERS[(i + 1) % FILLERS.len()]));
    }
    for (i, (field, term, def)) in qualifiers.iter().enumerate() {
        specs.push(qualifier_window(field, term, def, FILLERS[(i + 2) % FILLERS.len()]));
    }
    for (term, article, def, extra) in &ref_defs {
        specs.push(ref_def_window(term, article, def, extra));
    }
    for (term, def, mention, indirect, closer) in &referentials {
        specs.push(referential_window(term, def, mention, indirect, closer));
    }
    for (a, b) in &doubles {
        specs.push(double_window(*a, *b));
    }
    for (s1, s2) in &plains {
        specs.push(plain_window(s1, s2));
    }
    specs.into_iter().map(build).collect()
}

fn noisy_windows() -> Vec<ExampleRecord> {
    vec![
        build(plain_window(
            "The archive smelled of dust .",
            "Old maps lined the walls .",
        )),
        build(simple_window(
            "solvent",
            "A",
            "a liquid that dissolves other substances",
            "Water is the most common one .",
        )),
    ]
}

const CLEAN_FILES: [&str; 5] = [
    "biology_01.deft",
    "chemistry_02.deft",
    "geology_03.deft",
    "language_04.deft",
    "physics_05.deft",
];
const NOISY_FILE: &str = "misc_06.deft";

/// Write the synthetic corpus into `dir`: five cleanly rendered files plus
/// one file whose single relation points at a nonexistent span id, and a
/// JSON stats file with the expected span and relation counts.
pub fn generate_fixture(dir: &Path, seed: u64) -> Result<Fixture> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clean = clean_windows();
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut derive_rng(seed, "fixture/shuffle"));
    let shuffled: Vec<ExampleRecord> = order.into_iter().map(|i| clean[i].clone()).collect();
    clean = shuffled;

    let mut files = Vec::new();
    let per_file = clean.len().div_ceil(CLEAN_FILES.len());
    let mut all_records = Vec::new();
    for (chunk, name) in clean.chunks(per_file).zip(CLEAN_FILES.iter()) {
        let path = dir.join(name);
        let source = name.trim_end_matches(".deft");
        let text = write_deft(chunk, source)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        all_records.extend_from_slice(chunk);
    }

    let noisy = noisy_windows();
    let noisy_path = dir.join(NOISY_FILE);
    let source = NOISY_FILE.trim_end_matches(".deft");
    let rendered = write_deft(&noisy, source)?;
    // The only relation in this file roots at span T1; retarget it to a
    // span id that does not exist so parsing hits the dangling-root path.
    let broken = rendered.replace("\tT1\tDirect-defines", "\tT99\tDirect-defines");
    if broken == rendered {
        return Err(Error::Constraint(
            "noisy fixture window lost its relation row".into(),
        ));
    }
    fs::write(&noisy_path, broken).map_err(|e| Error::io(&noisy_path, e))?;
    files.push(noisy_path);
    all_records.extend(noisy);

    let windows = all_records.len();
    let spans = split_stats(&all_records);
    let mut relations = relation_stats(&all_records);
    // The broken relation is dropped on parse.
    relations["Direct-defines"] -= 1;
    let stats = FixtureStats {
        files: files.len(),
        windows,
        spans,
        relations,
    };
    let stats_path = dir.join("expected_stats.json");
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Schema(format!("serialize stats: {e}")))?;
    fs::write(&stats_path, json + "\n").map_err(|e| Error::io(&stats_path, e))?;

    Ok(Fixture {
        dir: dir.to_path_buf(),
        files,
        stats_path,
    })
}

pub fn read_stats(path: &Path) -> Result<FixtureStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("bad stats file: {e}")))
}
