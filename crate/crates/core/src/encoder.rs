//! Contextual encoder: token representation (precomputed-stack mix or a
//! learned embedding), concatenated auxiliary features, then n stacked
//! BiLSTM layers producing h in R^{T x 2*d_lstm}.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedExample, FeatureConfig};
use crate::rng::derive_rng;
use crate::tape::{BoundParams, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Number of stacked BiLSTM layers.
    pub n: usize,
    /// Hidden size per direction.
    pub d_lstm: usize,
    /// Learned token embedding width (ignored with a precomputed stack).
    pub d_tok: usize,
    /// POS embedding width.
    pub d_pos: usize,
    /// Dropout rate on BiLSTM layer inputs during training.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n: 2,
            d_lstm: 64,
            d_tok: 64,
            d_pos: 16,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("encoder needs at least one BiLSTM layer".into()));
        }
        if self.d_lstm == 0 || self.d_tok == 0 || self.d_pos == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        2 * self.d_lstm
    }
}

/// Width of the concatenated per-token input to the first BiLSTM layer.
pub fn input_dim(cfg: &EncoderConfig, feat: &FeatureConfig) -> usize {
    let tok = if feat.use_stack { feat.stack_width } else { cfg.d_tok };
    tok + if feat.use_pos { cfg.d_pos } else { 0 } + feat.binary_dim()
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_raw(vec![rows, cols], data)
}

fn uniform_embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
    // PAD row stays zero and is kept frozen by the optimizer.
    for v in &mut data[..cols] {
        *v = 0.0;
    }
    Tensor::from_raw(vec![rows, cols], data)
}

fn lstm_bias(d: usize) -> Tensor {
    // Gate order i, f, g, o; forget gates start at +1 for stable memory.
    let mut data = vec![0.0; 4 * d];
    for v in &mut data[d..2 * d] {
        *v = 1.0;
    }
    Tensor::from_raw(vec![4 * d], data)
}

/// Register all encoder parameters. Every tensor draws from its own named
/// RNG stream so the values do not depend on which other modules
/// initialize parameters around them.
pub fn init_params(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    feat: &FeatureConfig,
    token_vocab_len: usize,
    pos_vocab_len: usize,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    feat.validate()?;
    let stream = |name: &str| derive_rng(seed, &format!("init/{name}"));

    if feat.use_stack {
        params.insert("encoder.mix_w", Tensor::zeros(vec![feat.stack_layers]));
        params.insert("encoder.mix_gamma", Tensor::scalar(1.0));
    } else {
        let name = "encoder.token_emb";
        params.insert(
            name,
            uniform_embedding(&mut stream(name), token_vocab_len, cfg.d_tok),
        );
    }
    if feat.use_pos {
        let name = "encoder.pos_emb";
        params.insert(
            name,
            uniform_embedding(&mut stream(name), pos_vocab_len, cfg.d_pos),
        );
    }

    let mut in_dim = input_dim(cfg, feat);
    for layer in 0..cfg.n {
        for dir in ["fwd", "bwd"] {
            let w_ih = format!("encoder.l{layer}.{dir}.w_ih");
            params.insert(&w_ih, glorot(&mut stream(&w_ih), 4 * cfg.d_lstm, in_dim));
            let w_hh = format!("encoder.l{layer}.{dir}.w_hh");
            params.insert(&w_hh, glorot(&mut stream(&w_hh), 4 * cfg.d_lstm, cfg.d_lstm));
            params.insert(format!("encoder.l{layer}.{dir}.bias"), lstm_bias(cfg.d_lstm));
        }
        in_dim = cfg.hidden_dim();
    }
    Ok(())
}

/// Embedding parameters whose row 0 (PAD) must never receive updates.
pub fn frozen_pad_rows(feat: &FeatureConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if !feat.use_stack {
        out.push("encoder.token_emb");
    }
    if feat.use_pos {
        out.push("encoder.pos_emb");
    }
    out
}

/// Reference layer mix: output_t = gamma * sum_l softmax(w)_l * stack_{t,l}.
pub fn layer_mix(stack: &Tensor, w: &Tensor, gamma: f64) -> Result<Tensor> {
    if stack.rank() != 3 {
        return Err(Error::Dimension(format!(
            "layer stack must be [T x L x d], got {:?}",
            stack.shape()
        )));
    }
    let (t, l, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
    if w.len() != l {
        return Err(Error::Dimension(format!(
            "{} mix weights for {l} layers",
            w.len()
        )));
    }
    let s = w.softmax()?;
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        for li in 0..l {
            let coeff = gamma * s.data()[li];
            for di in 0..d {
                out[ti * d + di] += coeff * stack.at3(ti, li, di);
            }
        }
    }
    Tensor::new(vec![t, d], out)
}

/// Inverted-dropout mask: kept entries are scaled by 1/(1-p).
pub fn sample_dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::from_raw(shape.to_vec(), data)
}

fn lstm_direction(
    tape: &mut Tape,
    input: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    bias: NodeId,
    d: usize,
    reverse: bool,
) -> Vec<NodeId> {
    let t = tape.value(input).rows();
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    let mut h = tape.leaf(Tensor::zeros(vec![d]));
    let mut c = tape.leaf(Tensor::zeros(vec![d]));
    let mut out = vec![None; t];
    for step in order {
        let x = tape.row(input, step);
        let ih = tape.matvec(w_ih, x);
        let hh = tape.matvec(w_hh, h);
        let pre = tape.add(ih, hh);
        let pre = tape.add(pre, bias);
        let i_gate = tape.slice1d(pre, 0, d);
        let f_gate = tape.slice1d(pre, d, d);
        let g_gate = tape.slice1d(pre, 2 * d, d);
        let o_gate = tape.slice1d(pre, 3 * d, d);
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.sigmoid(o_gate);
        let keep = tape.mul(f_gate, c);
        let write = tape.mul(i_gate, g_gate);
        c = tape.add(keep, write);
        let c_act = tape.tanh(c);
        h = tape.mul(o_gate, c_act);
        out[step] = Some(h);
    }
    out.into_iter().map(|n| n.expect("all steps visited")).collect()
}

/// Run the BiLSTM stack over a `[T x d_in]` input node.
pub fn bilstm_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    input: NodeId,
    cfg: &EncoderConfig,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> NodeId {
    let mut current = input;
    for layer in 0..cfg.n {
        if let Some((rng, p)) = dropout.as_mut() {
            if *p > 0.0 {
                let shape = tape.value(current).shape().to_vec();
                let mask = sample_dropout_mask(&shape, *p, rng);
                current = tape.mul_const(current, mask);
            }
        }
        let fwd = lstm_direction(
            tape,
            current,
            bound.id(&format!("encoder.l{layer}.fwd.w_ih")),
            bound.id(&format!("encoder.l{layer}.fwd.w_hh")),
            bound.id(&format!("encoder.l{layer}.fwd.bias")),
            cfg.d_lstm,
            false,
        );
        let bwd = lstm_direction(
            tape,
            current,
            bound.id(&format!("encoder.l{layer}.bwd.w_ih")),
            bound.id(&format!("encoder.l{layer}.bwd.w_hh")),
            bound.id(&format!("encoder.l{layer}.bwd.bias")),
            cfg.d_lstm,
            true,
        );
        let rows: Vec<NodeId> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| {
                let fm = tape.reshape(f, vec![1, cfg.d_lstm]);
                let bm = tape.reshape(b, vec![1, cfg.d_lstm]);
                tape.concat_cols(fm, bm)
            })
            .collect();
        let stacked: Vec<NodeId> = rows
            .into_iter()
            .map(|r| tape.reshape(r, vec![cfg.hidden_dim()]))
            .collect();
        current = tape.stack_rows(stacked);
    }
    current
}

/// Full encoder forward pass for one example: token representation,
/// feature concatenation, BiLSTM stack. Returns h `[T x 2*d_lstm]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    example: &EncodedExample,
    cfg: &EncoderConfig,
    feat: &FeatureConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let token_part = if feat.use_stack {
        let stack = example
            .layer_stack
            .clone()
            .ok_or_else(|| Error::Config("encoder expects a layer stack".into()))?;
        let w = bound.id("encoder.mix_w");
        let s = tape.softmax1d(w);
        let mixed = tape.mix_layers(stack, s);
        tape.scale_by(mixed, bound.id("encoder.mix_gamma"))
    } else {
        tape.select_rows(bound.id("encoder.token_emb"), example.token_ids.clone())
    };

    let mut input = token_part;
    if feat.use_pos {
        let pos = tape.select_rows(bound.id("encoder.pos_emb"), example.pos_ids.clone());
        input = tape.concat_cols(input, pos);
    }
    if feat.binary_dim() > 0 {
        let feats = tape.leaf(example.binary_feats.clone());
        input = tape.concat_cols(input, feats);
    }
    let got = tape.value(input).cols();
    let want = input_dim(cfg, feat);
    if got != want {
        return Err(Error::Dimension(format!(
            "encoder input width {got}, config expects {want}"
        )));
    }

    Ok(bilstm_on_tape(
        tape,
        bound,
        input,
        cfg,
        dropout_rng.map(|rng| (rng, cfg.dropout)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_vocabs, encode, RulePattern};
    use crate::tape::{grad_check, param_grads};
    use approx::assert_relative_eq;

    fn tiny_feat() -> FeatureConfig {
        FeatureConfig {
            use_coref: false,
            rule_patterns: vec![],
            ..Default::default()
        }
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n: 2,
            d_lstm: 3,
            d_tok: 4,
            d_pos: 2,
            dropout: 0.0,
        }
    }

    fn example(tokens: &[&str], feat: &FeatureConfig) -> (EncodedExample, usize, usize) {
        let rec = crate::corpus::ExampleRecord {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            sentence_bounds: vec![(0, tokens.len())],
            tags: vec!["O".into(); tokens.len()],
            relations: vec![],
            pos: None,
            coref_flags: None,
            rule_flags: None,
        };
        let vocabs = build_vocabs(&[rec.clone()], feat).unwrap();
        let enc = encode(&rec, &vocabs, feat, None).unwrap();
        (enc, vocabs.tokens.len(), vocabs.pos.len())
    }

    #[test]
    fn layer_mix_examples() {
        // L=1: softmax over one weight is 1, output = gamma * layer.
        let stack = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::vector(vec![0.7]).unwrap();
        let out = layer_mix(&stack, &w, 2.0).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);

        // Equal weights average the layers.
        let stack = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let w = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let out = layer_mix(&stack, &w, 1.0).unwrap();
        assert_relative_eq!(out.data()[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(out.data()[1], 5.0, max_relative = 1e-12);

        // Zero gain kills the signal.
        let out = layer_mix(&stack, &w, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        assert!(layer_mix(&stack, &Tensor::vector(vec![0.0]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let feat = tiny_feat();
        let cfg = tiny_cfg();
        let (enc, ntok, npos) = example(&["a", "b", "c"], &feat);
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &feat, ntok, npos, 7).unwrap();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let h = encode_on_tape(&mut tape, &bound, &enc, &cfg, &feat, None).unwrap();
        let hv = tape.value(h);
        assert_eq!(hv.shape(), &[3, 6]);
        assert!(hv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_sequences_work() {
        let feat = tiny_feat();
        let cfg = tiny_cfg();
        let (enc, ntok, npos) = example(&["solo"], &feat);
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &feat, ntok, npos, 3).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let h = encode_on_tape(&mut tape, &bound, &enc, &cfg, &feat, None).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 6]);
    }

    #[test]
    fn init_is_seed_deterministic_and_stream_independent() {
        let feat = tiny_feat();
        let cfg = tiny_cfg();
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        init_params(&mut a, &cfg, &feat, 10, 4, 42).unwrap();
        init_params(&mut b, &cfg, &feat, 10, 4, 42).unwrap();
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let mut c = ParamSet::new();
        init_params(&mut c, &cfg, &feat, 10, 4, 43).unwrap();
        assert_ne!(
            a.get("encoder.l0.fwd.w_ih").unwrap().data(),
            c.get("encoder.l0.fwd.w_ih").unwrap().data()
        );
        // PAD row of the embedding is zero.
        let emb = a.get("encoder.token_emb").unwrap();
        assert!(emb.row_slice(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_binary_flags_change_h() {
        let mut feat = tiny_feat();
        feat.use_coref = true;
        let cfg = tiny_cfg();
        let rec = |coref: Vec<u8>| crate::corpus::ExampleRecord {
            tokens: vec!["same".into(), "same".into()],
            sentence_bounds: vec![(0, 2)],
            tags: vec!["O".into(), "O".into()],
            relations: vec![],
            pos: None,
            coref_flags: Some(coref),
            rule_flags: None,
        };
        let base = rec(vec![0, 0]);
        let vocabs = build_vocabs(&[base.clone()], &feat).unwrap();
        let enc0 = encode(&base, &vocabs, &feat, None).unwrap();
        let enc1 = encode(&rec(vec![1, 0]), &vocabs, &feat, None).unwrap();
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &feat, vocabs.tokens.len(), vocabs.pos.len(), 9).unwrap();
        let run = |enc: &EncodedExample| {
            let mut tape = Tape::new();
            let bound = tape.bind(&params);
            let h = encode_on_tape(&mut tape, &bound, enc, &cfg, &feat, None).unwrap();
            tape.value(h).clone()
        };
        assert_ne!(run(&enc0).data(), run(&enc1).data());
    }

    #[test]
    fn input_dim_arithmetic() {
        let cfg = tiny_cfg();
        let bare = tiny_feat();
        assert_eq!(input_dim(&cfg, &bare), cfg.d_tok);

        let mut rich = FeatureConfig::default();
        rich.use_pos = true; // coref + demonstrative = 2 binary dims
        assert_eq!(rich.binary_dim(), 2);
        assert_eq!(input_dim(&cfg, &rich), cfg.d_tok + cfg.d_pos + 2);
    }

    #[test]
    fn encoder_end_to_end_gradcheck() {
        // Through the stack mix, concatenation, and both BiLSTM layers.
        let feat = FeatureConfig {
            use_stack: true,
            stack_layers: 2,
            stack_width: 3,
            use_coref: true,
            rule_patterns: vec![RulePattern::demonstrative()],
            ..Default::default()
        };
        let cfg = EncoderConfig {
            n: 2,
            d_lstm: 2,
            d_tok: 3,
            d_pos: 2,
            dropout: 0.0,
        };
        let rec = crate::corpus::ExampleRecord {
            tokens: vec!["These".into(), "are".into(), "ions".into()],
            sentence_bounds: vec![(0, 3)],
            tags: vec!["O".into(); 3],
            relations: vec![],
            pos: None,
            coref_flags: Some(vec![1, 0, 0]),
            rule_flags: None,
        };
        let vocabs = build_vocabs(&[rec.clone()], &feat).unwrap();
        let mut stack_rng = derive_rng(2, "test-stack");
        let stack = Tensor::from_raw(
            vec![3, 2, 3],
            (0..18).map(|_| stack_rng.gen_range(-1.0..1.0)).collect(),
        );
        let enc = encode(&rec, &vocabs, &feat, Some(stack)).unwrap();
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &feat, vocabs.tokens.len(), vocabs.pos.len(), 21).unwrap();

        let err = grad_check(&params, 1e-5, |tape, bound| {
            let h = encode_on_tape(tape, bound, &enc, &cfg, &feat, None)?;
            let sq = tape.mul(h, h);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn dropout_masks_are_stream_deterministic() {
        let mut a = derive_rng(1, "drop");
        let mut b = derive_rng(1, "drop");
        let ma = sample_dropout_mask(&[4, 5], 0.4, &mut a);
        let mb = sample_dropout_mask(&[4, 5], 0.4, &mut b);
        assert_eq!(ma.data(), mb.data());
        assert!(ma
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
    }

    #[test]
    fn pad_row_gets_no_gradient_when_unused() {
        let feat = tiny_feat();
        let cfg = tiny_cfg();
        let (enc, ntok, npos) = example(&["x", "y"], &feat);
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &feat, ntok, npos, 5).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let h = encode_on_tape(&mut tape, &bound, &enc, &cfg, &feat, None).unwrap();
        let loss = tape.sum(h);
        let grads = tape.backward(loss);
        let dense = param_grads(&grads, &bound, &params);
        let g_emb = &dense["encoder.token_emb"];
        assert!(g_emb.row_slice(0).iter().all(|&v| v == 0.0));
        assert!(g_emb.row_slice(2).iter().any(|&v| v != 0.0));
    }
}
