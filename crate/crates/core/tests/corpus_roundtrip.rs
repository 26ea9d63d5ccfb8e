//! Property tests for the corpus formats: TSV rendering vs parsing, and
//! the enriched JSONL record files.

use deftkit::corpus::{
    parse_deft_str, read_records, write_deft, write_records, ExampleRecord, ParseOptions,
};
use deftkit::labels::{parse_tag, spans, LabelVocab, RELATION_LABELS, TYPE_LABELS};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn token_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z]{1,8}",
        2 => "[A-Z][a-z]{0,5}",
        1 => Just(",".to_string()),
        1 => Just(".".to_string()),
        1 => Just("émission".to_string()),
        1 => Just("π".to_string()),
    ]
}

/// Raw (token, tag-id) pairs; the tag ids are made BIO-consistent by
/// turning stray I- tags into B-.
fn sentence_strategy() -> impl Strategy<Value = Vec<(String, usize)>> {
    vec((token_strategy(), 0..13usize), 1..7).prop_map(|raw| {
        let vocab = LabelVocab::new();
        let mut prev = vocab.outside_id();
        raw.into_iter()
            .map(|(tok, mut tag)| {
                if let deftkit::labels::Bio::Inside(ty) = vocab.parse(tag) {
                    let ok = prev == vocab.begin_id(ty) || prev == vocab.inside_id(ty);
                    if !ok {
                        tag = vocab.begin_id(ty);
                    }
                }
                prev = tag;
                (tok, tag)
            })
            .collect()
    })
}

/// A full window: tagged sentences plus relations drawn between distinct
/// spans (the format cannot express a span relating to itself).
fn window_strategy() -> impl Strategy<Value = ExampleRecord> {
    (vec(sentence_strategy(), 1..4), any::<u64>()).prop_map(|(sentences, seed)| {
        let vocab = LabelVocab::new();
        let mut tokens = Vec::new();
        let mut tag_ids = Vec::new();
        let mut bounds = Vec::new();
        for sentence in sentences {
            let start = tokens.len();
            for (tok, tag) in sentence {
                tokens.push(tok);
                tag_ids.push(tag);
            }
            bounds.push((start, tokens.len()));
        }
        let span_list = spans(&vocab, &tag_ids);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut relations = Vec::new();
        if span_list.len() >= 2 {
            for (i, &(head_start, _, _)) in span_list.iter().enumerate() {
                if rng.gen_bool(0.4) {
                    let mut j = rng.gen_range(0..span_list.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    let label = RELATION_LABELS[rng.gen_range(0..RELATION_LABELS.len())];
                    relations.push((head_start, span_list[j].0, label.to_string()));
                }
            }
        }
        relations.sort_unstable_by_key(|&(h, _, _)| h);
        ExampleRecord {
            tokens,
            sentence_bounds: bounds,
            tags: tag_ids.iter().map(|&t| vocab.tag(t).to_string()).collect(),
            relations,
            pos: None,
            coref_flags: None,
            rule_flags: None,
        }
    })
}

/// The same windows with every optional side channel filled in.
fn enriched_strategy() -> impl Strategy<Value = ExampleRecord> {
    (window_strategy(), any::<u64>()).prop_map(|(mut rec, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rec.tokens.len();
        let pos_bank = ["NN", "VB", "DT", "JJ", "."];
        rec.pos = Some(
            (0..t)
                .map(|_| pos_bank[rng.gen_range(0..pos_bank.len())].to_string())
                .collect(),
        );
        rec.coref_flags = Some((0..t).map(|_| u8::from(rng.gen_bool(0.2))).collect());
        rec.rule_flags = Some((0..t).map(|_| u8::from(rng.gen_bool(0.3))).collect());
        rec
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deft_render_then_parse_is_identity(records in vec(window_strategy(), 1..5)) {
        let text = write_deft(&records, "prop_src").unwrap();
        let parsed = parse_deft_str("prop_src", &text, &ParseOptions::default()).unwrap();
        prop_assert!(parsed.warnings.is_empty(), "warnings: {:?}", parsed.warnings);
        prop_assert_eq!(&parsed.records, &records);

        // Rendering what we parsed reproduces the bytes.
        let again = write_deft(&parsed.records, "prop_src").unwrap();
        prop_assert_eq!(again, text);
    }

    #[test]
    fn jsonl_round_trip_preserves_enriched_records(records in vec(enriched_strategy(), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn parsed_tags_are_always_well_formed(records in vec(window_strategy(), 1..4)) {
        let vocab = LabelVocab::new();
        let text = write_deft(&records, "prop_src").unwrap();
        let parsed = parse_deft_str("prop_src", &text, &ParseOptions::default()).unwrap();
        for rec in &parsed.records {
            let ids: Vec<usize> = rec
                .tags
                .iter()
                .map(|t| parse_tag(&vocab, t).unwrap())
                .collect();
            prop_assert!(deftkit::labels::is_well_formed(&vocab, &ids));
        }
    }
}

#[test]
fn every_label_survives_a_round_trip() {
    // One window holding all six types and five relations at once.
    let mut tags = vec!["O".to_string(); 14];
    for (i, ty) in TYPE_LABELS.iter().enumerate() {
        tags[2 * i] = format!("B-{ty}");
        tags[2 * i + 1] = format!("I-{ty}");
    }
    let record = ExampleRecord {
        tokens: (0..14).map(|i| format!("tok{i}")).collect(),
        sentence_bounds: vec![(0, 7), (7, 14)],
        tags,
        relations: vec![
            (0, 6, "AKA".to_string()),
            (2, 0, "Refers-to".to_string()),
            (4, 6, "Indirect-defines".to_string()),
            (6, 0, "Direct-defines".to_string()),
            (10, 0, "Qualifies".to_string()),
        ],
        pos: None,
        coref_flags: None,
        rule_flags: None,
    };
    let text = write_deft(std::slice::from_ref(&record), "all_labels").unwrap();
    let parsed = parse_deft_str("all_labels", &text, &ParseOptions::default()).unwrap();
    assert!(parsed.warnings.is_empty());
    assert_eq!(parsed.records, vec![record]);
}
