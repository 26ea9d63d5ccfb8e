//! Majority-vote ensembling over the predictions of several training runs.
//!
//! Tags are voted per token; relations are voted per head token over the
//! (tail, label) pair each run assigns (or no relation at all). Ties go to
//! the vote cast by the earliest run, and voted tag sequences are repaired
//! to well-formed BIO afterwards.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::labels::{repair_bio, LabelVocab};

/// Predictions of one run over a fixed example list.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPredictions {
    pub run_id: String,
    /// Per example, per token: tag id.
    pub tags: Vec<Vec<usize>>,
    /// Per example: (head, tail, label id) triples, at most one per head.
    pub relations: Option<Vec<Vec<(usize, usize, usize)>>>,
}

fn check_runs(runs: &[RunPredictions]) -> Result<()> {
    let first = runs.first().ok_or_else(|| {
        Error::Schema("ensemble requires at least one run".into())
    })?;
    for run in &runs[1..] {
        if run.tags.len() != first.tags.len() {
            return Err(Error::Schema(format!(
                "run {} has {} examples, run {} has {}",
                run.run_id,
                run.tags.len(),
                first.run_id,
                first.tags.len()
            )));
        }
        for (i, (a, b)) in run.tags.iter().zip(&first.tags).enumerate() {
            if a.len() != b.len() {
                return Err(Error::Schema(format!(
                    "example {i}: run {} has {} tokens, run {} has {}",
                    run.run_id,
                    a.len(),
                    first.run_id,
                    b.len()
                )));
            }
        }
        if run.relations.is_some() != first.relations.is_some() {
            return Err(Error::Schema(
                "all runs must either include or omit relation predictions".into(),
            ));
        }
    }
    Ok(())
}

/// Vote counts for one token, keyed by tag id in order of first vote.
pub fn vote_histogram(runs: &[RunPredictions], example: usize, token: usize) -> IndexMap<usize, usize> {
    let mut hist: IndexMap<usize, usize> = IndexMap::new();
    for run in runs {
        *hist.entry(run.tags[example][token]).or_insert(0) += 1;
    }
    hist
}

/// The value voted by the earliest run among those tied for the most votes.
fn plurality<T: Clone + PartialEq>(votes: &[T]) -> T {
    let count = |v: &T| votes.iter().filter(|w| *w == v).count();
    let best = votes.iter().map(&count).max().expect("at least one vote");
    votes
        .iter()
        .find(|v| count(v) == best)
        .expect("argmax exists")
        .clone()
}

/// Majority-vote combination of several runs. The voted tag sequences are
/// BIO-repaired; relation votes are taken per head token when every run
/// carries relation predictions.
pub fn majority_vote(runs: &[RunPredictions], vocab: &LabelVocab) -> Result<RunPredictions> {
    check_runs(runs)?;
    let n_examples = runs[0].tags.len();
    let vote_relations = runs[0].relations.is_some();

    let mut tags = Vec::with_capacity(n_examples);
    let mut relations = vote_relations.then(Vec::new);
    for x in 0..n_examples {
        let n_tokens = runs[0].tags[x].len();
        let mut voted: Vec<usize> = (0..n_tokens)
            .map(|t| {
                let votes: Vec<usize> = runs.iter().map(|r| r.tags[x][t]).collect();
                plurality(&votes)
            })
            .collect();
        repair_bio(vocab, &mut voted);
        tags.push(voted);

        if let Some(out) = relations.as_mut() {
            let mut example_rels = Vec::new();
            for head in 0..n_tokens {
                let votes: Vec<Option<(usize, usize)>> = runs
                    .iter()
                    .map(|r| {
                        r.relations.as_ref().unwrap()[x]
                            .iter()
                            .find(|(h, _, _)| *h == head)
                            .map(|&(_, tail, label)| (tail, label))
                    })
                    .collect();
                if let Some((tail, label)) = plurality(&votes) {
                    example_rels.push((head, tail, label));
                }
            }
            out.push(example_rels);
        }
    }
    Ok(RunPredictions {
        run_id: "ensemble".into(),
        tags,
        relations,
    })
}
