//! Multi-head relation scorer over the encoder output h.
//!
//! Pair features M_ij = relu(U h_i + W h_j + b) score every ordered token
//! pair. Each token i picks one output c_i from {0} ∪ {1..T*K}: class 0
//! ("no relation", r_0) scores the elementwise max over M_i*, while
//! z = j*K + k scores tail token j with relation label k via V_k. Softmax
//! over each row yields P(c_i | t).

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tape::{BoundParams, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;
use rand::Rng;

pub const U: &str = "rel.u";
pub const W: &str = "rel.w";
pub const B: &str = "rel.b";
pub const V: &str = "rel.v";

/// z for tail j and positive relation label k (1-based, k <= k_pos).
pub fn index_encode(j: usize, k: usize, k_pos: usize) -> Result<usize> {
    if k == 0 || k > k_pos {
        return Err(Error::Index(format!(
            "relation label index {k} outside 1..={k_pos}"
        )));
    }
    Ok(j * k_pos + k)
}

/// Inverse mapping: z = 0 is the negative class, otherwise
/// (j, k) = (floor((z-1)/K), ((z-1) mod K) + 1).
pub fn index_decode(z: usize, t: usize, k_pos: usize) -> Result<Option<(usize, usize)>> {
    if z > t * k_pos {
        return Err(Error::Index(format!(
            "class index {z} outside 0..={}",
            t * k_pos
        )));
    }
    if z == 0 {
        return Ok(None);
    }
    Ok(Some(((z - 1) / k_pos, (z - 1) % k_pos + 1)))
}

pub fn init_params(params: &mut ParamSet, hidden_dim: usize, d_rel: usize, k_pos: usize, seed: u64) {
    let glorot = |name: &str, rows: usize, cols: usize| {
        let mut rng = derive_rng(seed, &format!("init/{name}"));
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::from_raw(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
        )
    };
    params.insert(U, glorot(U, d_rel, hidden_dim));
    params.insert(W, glorot(W, d_rel, hidden_dim));
    params.insert(B, Tensor::zeros(vec![d_rel]));
    params.insert(V, glorot(V, k_pos + 1, d_rel));
}

/// Reference pair features: `[T x T x d_rel]`, M[i][j] = relu(Uh_i + Wh_j + b).
pub fn feature_activations(h: &Tensor, u: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let t = h.rows();
    let d_rel = u.rows();
    if u.cols() != h.cols() || w.cols() != h.cols() || w.rows() != d_rel || b.len() != d_rel {
        return Err(Error::Dimension(format!(
            "U {:?} / W {:?} / b {:?} incompatible with h {:?}",
            u.shape(),
            w.shape(),
            b.shape(),
            h.shape()
        )));
    }
    let dot = |m: &Tensor, row: &[f64]| -> Vec<f64> {
        (0..d_rel)
            .map(|r| m.row_slice(r).iter().zip(row).map(|(a, x)| a * x).sum())
            .collect()
    };
    let heads: Vec<Vec<f64>> = (0..t).map(|i| dot(u, h.row_slice(i))).collect();
    let tails: Vec<Vec<f64>> = (0..t).map(|j| dot(w, h.row_slice(j))).collect();
    let mut out = vec![0.0; t * t * d_rel];
    for i in 0..t {
        for j in 0..t {
            for r in 0..d_rel {
                out[(i * t + j) * d_rel + r] =
                    (heads[i][r] + tails[j][r] + b.data()[r]).max(0.0);
            }
        }
    }
    Tensor::new(vec![t, t, d_rel], out)
}

/// Reference class scores `[T x (1 + T*K)]` from rank-3 M and V rows.
pub fn class_logits(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.rank() != 3 || m.shape()[0] != m.shape()[1] {
        return Err(Error::Dimension(format!("M must be [T x T x d], got {:?}", m.shape())));
    }
    let (t, d_rel) = (m.shape()[0], m.shape()[2]);
    let k_pos = v.rows() - 1;
    if v.cols() != d_rel {
        return Err(Error::Dimension(format!(
            "V width {} does not match d_rel {d_rel}",
            v.cols()
        )));
    }
    let cols = 1 + t * k_pos;
    let mut out = vec![0.0; t * cols];
    for i in 0..t {
        let mut pooled = vec![f64::NEG_INFINITY; d_rel];
        for j in 0..t {
            for r in 0..d_rel {
                pooled[r] = pooled[r].max(m.at3(i, j, r));
            }
        }
        out[i * cols] = v
            .row_slice(0)
            .iter()
            .zip(&pooled)
            .map(|(a, b)| a * b)
            .sum();
        for j in 0..t {
            for k in 1..=k_pos {
                let z = j * k_pos + k;
                out[i * cols + z] = v
                    .row_slice(k)
                    .iter()
                    .enumerate()
                    .map(|(r, a)| a * m.at3(i, j, r))
                    .sum();
            }
        }
    }
    Tensor::new(vec![t, cols], out)
}

/// Row-wise softmax of Q.
pub fn relation_probs(q: &Tensor) -> Result<Tensor> {
    let (t, cols) = (q.rows(), q.cols());
    let mut out = vec![0.0; t * cols];
    for i in 0..t {
        let row = Tensor::vector(q.row_slice(i).to_vec())?.softmax()?;
        out[i * cols..(i + 1) * cols].copy_from_slice(row.data());
    }
    Tensor::new(vec![t, cols], out)
}

/// Class scores Q on the tape for the full token sequence.
pub fn forward_on_tape(tape: &mut Tape, bound: &BoundParams, h: NodeId, k_pos: usize) -> NodeId {
    let t = tape.value(h).rows();
    let head_feats = tape.matmul_nt(h, bound.id(U));
    let tail_feats = tape.matmul_nt(h, bound.id(W));
    let pair = tape.pairwise_sum(head_feats, tail_feats); // [(T*T) x d_rel]
    let pair = tape.add_row_vec(pair, bound.id(B));
    let m = tape.relu(pair);

    let pooled = tape.group_row_max(m, t); // [T x d_rel]
    let v0 = tape.row(bound.id(V), 0);
    let q0 = tape.matvec(pooled, v0); // [T]
    let q0 = tape.reshape(q0, vec![t, 1]);

    let k_rows = {
        let v = bound.id(V);
        tape.slice_rows(v, 1, k_pos) // [K x d_rel]
    };
    let scored = tape.matmul_nt(m, k_rows); // [(T*T) x K], row i*T+j col k-1
    let qpos = tape.reshape(scored, vec![t, t * k_pos]);
    tape.concat_cols(q0, qpos)
}

/// Mean cross-entropy of the gold class indices under softmax(Q).
pub fn loss_on_tape(tape: &mut Tape, q: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (t, cols) = {
        let qv = tape.value(q);
        (qv.rows(), qv.cols())
    };
    if targets.len() != t {
        return Err(Error::Schema(format!(
            "{} relation targets for {t} tokens",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
        return Err(Error::Schema(format!(
            "relation target {bad} outside 0..{cols}"
        )));
    }
    let lse = tape.logsumexp_rows(q);
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &c)| i * cols + c).collect();
    let picked = tape.pick(q, idx);
    let diff = tape.sub(lse, picked);
    Ok(tape.mean(diff))
}

/// Per-token argmax over P (or Q): tokens whose best class is positive
/// become (head, tail, label) triples. Lowest z wins ties.
pub fn decode_relations(p: &Tensor, k_pos: usize) -> Result<Vec<(usize, usize, usize)>> {
    let (t, cols) = (p.rows(), p.cols());
    if cols != 1 + t * k_pos {
        return Err(Error::Dimension(format!(
            "row width {cols} does not match 1 + {t}*{k_pos}"
        )));
    }
    let mut out = Vec::new();
    for i in 0..t {
        let row = p.row_slice(i);
        let mut best = 0usize;
        for (z, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = z;
            }
        }
        if let Some((j, k)) = index_decode(best, t, k_pos)? {
            out.push((i, j, k));
        }
    }
    Ok(out)
}

/// Gold class index per token: c_head = encode(tail, k), 0 elsewhere.
pub fn gold_targets(relations: &[(usize, usize, usize)], t: usize, k_pos: usize) -> Result<Vec<usize>> {
    let mut c = vec![0usize; t];
    let mut seen = vec![false; t];
    for &(head, tail, k) in relations {
        if head >= t || tail >= t {
            return Err(Error::Schema(format!(
                "relation ({head},{tail}) out of range for {t} tokens"
            )));
        }
        if seen[head] {
            return Err(Error::Constraint(format!(
                "token {head} heads more than one relation"
            )));
        }
        seen[head] = true;
        c[head] = index_encode(tail, k, k_pos)?;
    }
    Ok(c)
}
