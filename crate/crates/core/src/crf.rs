//! Sequence-labeling head: linear projection of h to per-tag logits,
//! linear-chain CRF training and Viterbi decoding, plus the CRF-free
//! per-token softmax variant ("simple tagger").
//!
//! Scores of a tag sequence y: sum_t emit[t, y_t] + sum_{t>0} A[y_{t-1}, y_t]
//! + start[y_0] + end[y_{T-1}]. Training normalizes over all sequences via
//! the forward algorithm in log space; transitions are unconstrained during
//! training and a BIO mask can forbid ill-formed transitions at decode time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{Bio, LabelVocab};
use crate::rng::derive_rng;
use crate::tape::{BoundParams, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

pub const PROJ: &str = "crf.proj";
pub const BIAS: &str = "crf.bias";
pub const TRANS: &str = "crf.trans";
pub const START: &str = "crf.start";
pub const END: &str = "crf.end";

/// Projection to per-tag logits; all a CRF-free tagger needs.
pub fn init_projection(params: &mut ParamSet, hidden_dim: usize, n_tags: usize, seed: u64) {
    let mut rng = derive_rng(seed, &format!("init/{PROJ}"));
    let limit = (6.0 / (n_tags + hidden_dim) as f64).sqrt();
    let proj = (0..n_tags * hidden_dim)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    params.insert(PROJ, Tensor::from_raw(vec![n_tags, hidden_dim], proj));
    params.insert(BIAS, Tensor::zeros(vec![n_tags]));
}

/// Chain scores (transitions, start, end), zero-initialized.
pub fn init_chain(params: &mut ParamSet, n_tags: usize) {
    params.insert(TRANS, Tensor::zeros(vec![n_tags, n_tags]));
    params.insert(START, Tensor::zeros(vec![n_tags]));
    params.insert(END, Tensor::zeros(vec![n_tags]));
}

pub fn init_params(params: &mut ParamSet, hidden_dim: usize, n_tags: usize, seed: u64) {
    init_projection(params, hidden_dim, n_tags, seed);
    init_chain(params, n_tags);
}

/// Reference emission computation: logits_t = P h_t + bias.
pub fn emissions(h: &Tensor, proj: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let t = h.rows();
    let k = proj.rows();
    if proj.cols() != h.cols() || bias.len() != k {
        return Err(Error::Dimension(format!(
            "projection {:?} / bias {:?} incompatible with h {:?}",
            proj.shape(),
            bias.shape(),
            h.shape()
        )));
    }
    let mut out = vec![0.0; t * k];
    for ti in 0..t {
        let row = h.row_slice(ti);
        for ki in 0..k {
            let w = proj.row_slice(ki);
            out[ti * k + ki] =
                bias.data()[ki] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Tensor::new(vec![t, k], out)
}

pub fn emissions_on_tape(tape: &mut Tape, bound: &BoundParams, h: NodeId) -> NodeId {
    let scores = tape.matmul_nt(h, bound.id(PROJ));
    tape.add_row_vec(scores, bound.id(BIAS))
}

/// Log partition over all tag sequences, by the forward recursion.
pub fn log_partition_on_tape(tape: &mut Tape, bound: &BoundParams, emissions: NodeId) -> NodeId {
    let t = tape.value(emissions).rows();
    let trans = bound.id(TRANS);
    let first = tape.row(emissions, 0);
    let mut alpha = tape.add(first, bound.id(START));
    for step in 1..t {
        let scores = tape.add_col_vec(trans, alpha); // [i][j] = A[i][j] + alpha[i]
        let reduced = tape.logsumexp_cols(scores);
        let emit = tape.row(emissions, step);
        alpha = tape.add(reduced, emit);
    }
    let fin = tape.add(alpha, bound.id(END));
    tape.logsumexp1d(fin)
}

/// Score of one concrete tag sequence.
pub fn gold_score_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    emissions: NodeId,
    gold: &[usize],
) -> Result<NodeId> {
    let (t, k) = {
        let e = tape.value(emissions);
        (e.rows(), e.cols())
    };
    if gold.len() != t {
        return Err(Error::Schema(format!(
            "{} gold tags for {t} tokens",
            gold.len()
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&y| y >= k) {
        return Err(Error::Schema(format!("gold tag index {bad} outside 0..{k}")));
    }
    let emit_idx: Vec<usize> = gold.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.pick(emissions, emit_idx);
    let mut score = tape.sum(picked);
    if t > 1 {
        let pair_idx: Vec<usize> = gold.windows(2).map(|w| w[0] * k + w[1]).collect();
        let trans_picked = tape.pick(bound.id(TRANS), pair_idx);
        let trans_sum = tape.sum(trans_picked);
        score = tape.add(score, trans_sum);
    }
    let start = tape.pick(bound.id(START), vec![gold[0]]);
    let end = tape.pick(bound.id(END), vec![gold[t - 1]]);
    let score = tape.add(score, start);
    Ok(tape.add(score, end))
}

/// CRF negative log-likelihood: log_partition − gold score.
pub fn nll_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    emissions: NodeId,
    gold: &[usize],
) -> Result<NodeId> {
    let gold_score = gold_score_on_tape(tape, bound, emissions, gold)?;
    let log_z = log_partition_on_tape(tape, bound, emissions);
    Ok(tape.sub(log_z, gold_score))
}

/// Transitions forbidden by BIO well-formedness: into `I-X` from anything
/// that is not `B-X`/`I-X`, and `I-X` at the sequence start.
fn bio_banned(vocab: &LabelVocab, prev: Option<usize>, next: usize) -> bool {
    matches!(vocab.parse(next), Bio::Inside(_)) && !vocab.transition_allowed(prev, next)
}

/// Highest-scoring tag sequence. Ties take the lowest tag index at every
/// backpointer decision. `bio_mask` forbids ill-formed BIO transitions.
pub fn viterbi_decode(
    emissions: &Tensor,
    trans: &Tensor,
    start: &Tensor,
    end: &Tensor,
    bio_mask: Option<&LabelVocab>,
) -> Vec<usize> {
    let (t, k) = (emissions.rows(), emissions.cols());
    assert!(t > 0, "viterbi on empty sequence");
    let mut delta = vec![f64::NEG_INFINITY; k];
    for j in 0..k {
        if bio_mask.is_some_and(|v| bio_banned(v, None, j)) {
            continue;
        }
        delta[j] = emissions.at2(0, j) + start.data()[j];
    }
    let mut backptr = vec![vec![0usize; k]; t];
    for step in 1..t {
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..k {
                if bio_mask.is_some_and(|v| bio_banned(v, Some(i), j)) {
                    continue;
                }
                let s = delta[i] + trans.at2(i, j);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + emissions.at2(step, j);
            backptr[step][j] = best_i;
        }
        delta = next;
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for j in 0..k {
        let s = delta[j] + end.data()[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![0usize; t];
    path[t - 1] = last;
    for step in (1..t).rev() {
        path[step - 1] = backptr[step][path[step]];
    }
    path
}

/// Mean per-token cross-entropy of softmax(emissions) (no CRF).
pub fn simple_loss_on_tape(tape: &mut Tape, emissions: NodeId, gold: &[usize]) -> Result<NodeId> {
    let (t, k) = {
        let e = tape.value(emissions);
        (e.rows(), e.cols())
    };
    if gold.len() != t {
        return Err(Error::Schema(format!(
            "{} gold tags for {t} tokens",
            gold.len()
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&y| y >= k) {
        return Err(Error::Schema(format!("gold tag index {bad} outside 0..{k}")));
    }
    let lse = tape.logsumexp_rows(emissions);
    let idx: Vec<usize> = gold.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.pick(emissions, idx);
    let diff = tape.sub(lse, picked);
    Ok(tape.mean(diff))
}

/// Per-token argmax decode, lowest index on ties.
pub fn simple_decode(emissions: &Tensor) -> Vec<usize> {
    (0..emissions.rows())
        .map(|t| {
            let row = emissions.row_slice(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
