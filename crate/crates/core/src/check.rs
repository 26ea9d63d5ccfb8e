//! Gradient-check suites over the differentiable blocks, comparing
//! reverse-mode gradients against central finite differences on small
//! random instances. Used by the CLI's `gradcheck` command and by tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf;
use crate::encoder::{self, EncoderConfig};
use crate::error::Result;
use crate::features::{EncodedExample, FeatureConfig, RulePattern};
use crate::model::{Model, ModelConfig, TaskMode};
use crate::relation;
use crate::rng::derive_rng;
use crate::tape::{grad_check, ParamSet};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_raw(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Replace every parameter value with a draw at a generic scale. Training
/// initializers keep embeddings small, which leaves some gradient
/// coordinates near the finite-difference noise floor; checks want a
/// well-conditioned, non-degenerate point instead.
fn randomize(params: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
}

/// Encoder end to end: embeddings (or a layer-mixed stack) through the
/// stacked BiLSTM, summed to a scalar. Stack mode and embedding mode
/// alternate by seed parity so both input paths get coverage.
fn encoder_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = derive_rng(seed, "check/encoder");
    let t = rng.gen_range(2..=4);
    let use_stack = seed % 2 == 0;
    let feat = FeatureConfig {
        min_token_freq: 1,
        use_pos: true,
        use_coref: true,
        use_stack,
        stack_layers: 2,
        stack_width: 5,
        rule_patterns: vec![RulePattern::demonstrative()],
    };
    let cfg = EncoderConfig {
        n: 2,
        d_lstm: 3,
        d_tok: 4,
        d_pos: 2,
        dropout: 0.0,
    };
    let (token_vocab, pos_vocab) = (7, 5);
    let mut params = ParamSet::new();
    encoder::init_params(&mut params, &cfg, &feat, token_vocab, pos_vocab, seed)?;
    randomize(&mut params, &mut rng, 0.7);

    let binary = Tensor::from_raw(
        vec![t, feat.binary_dim()],
        (0..t * feat.binary_dim())
            .map(|_| f64::from(rng.gen_bool(0.5)))
            .collect(),
    );
    let example = EncodedExample {
        token_ids: (0..t).map(|_| rng.gen_range(0..token_vocab)).collect(),
        pos_ids: (0..t).map(|_| rng.gen_range(0..pos_vocab)).collect(),
        binary_feats: binary,
        layer_stack: use_stack
            .then(|| random_tensor(&mut rng, vec![t, feat.stack_layers, feat.stack_width], 0.8)),
        gold_tags: vec![0; t],
        gold_targets: vec![0; t],
    };
    let max_rel_err = grad_check(&params, EPS, |tape, bound| {
        let h = encoder::encode_on_tape(tape, bound, &example, &cfg, &feat, None)?;
        Ok(tape.sum(h))
    })?;
    Ok(GradCheckReport {
        name: "encoder".into(),
        seed,
        max_rel_err,
    })
}

/// CRF negative log-likelihood with the encoder output treated as a free
/// input, so its gradient is checked alongside the CRF parameters.
fn crf_nll_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = derive_rng(seed, "check/crf");
    let t = rng.gen_range(1..=5);
    let (hidden, n_tags) = (6, 5);
    let mut params = ParamSet::new();
    params.insert("h", random_tensor(&mut rng, vec![t, hidden], 1.0));
    crf::init_projection(&mut params, hidden, n_tags, seed);
    params.insert(crf::TRANS, random_tensor(&mut rng, vec![n_tags, n_tags], 0.5));
    params.insert(crf::START, random_tensor(&mut rng, vec![n_tags], 0.5));
    params.insert(crf::END, random_tensor(&mut rng, vec![n_tags], 0.5));
    let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..n_tags)).collect();

    let max_rel_err = grad_check(&params, EPS, |tape, bound| {
        let emissions = crf::emissions_on_tape(tape, bound, bound.id("h"));
        crf::nll_on_tape(tape, bound, emissions, &gold)
    })?;
    Ok(GradCheckReport {
        name: "crf-nll".into(),
        seed,
        max_rel_err,
    })
}

/// Relation head: pairwise features, relu, max-pooled negative class and
/// per-pair positives, softmax cross-entropy.
fn relation_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = derive_rng(seed, "check/relation");
    let t = rng.gen_range(2..=4);
    let (hidden, d_rel, k_pos) = (5, 4, 5);
    let mut params = ParamSet::new();
    params.insert("h", random_tensor(&mut rng, vec![t, hidden], 1.0));
    relation::init_params(&mut params, hidden, d_rel, k_pos, seed);
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..=t * k_pos)).collect();

    let max_rel_err = grad_check(&params, EPS, |tape, bound| {
        let q = relation::forward_on_tape(tape, bound, bound.id("h"), k_pos);
        relation::loss_on_tape(tape, q, &targets)
    })?;
    Ok(GradCheckReport {
        name: "relation-loss".into(),
        seed,
        max_rel_err,
    })
}

/// Whole joint model: encoder, CRF loss, and relation loss summed.
fn joint_model_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = derive_rng(seed, "check/joint");
    let t = rng.gen_range(2..=4);
    let config = ModelConfig {
        mode: TaskMode::Joint,
        encoder: EncoderConfig {
            n: 1,
            d_lstm: 3,
            d_tok: 4,
            d_pos: 2,
            dropout: 0.0,
        },
        features: FeatureConfig {
            use_pos: true,
            ..Default::default()
        },
        d_rel: 3,
        ..Default::default()
    };
    let seed_record = crate::corpus::ExampleRecord {
        tokens: vec!["w1".into(), "w2".into(), "w3".into(), "w4".into()],
        sentence_bounds: vec![(0, 4)],
        tags: vec!["O".into(); 4],
        relations: vec![],
        pos: Some(vec!["NN".into(), "VB".into(), "NN".into(), "VB".into()]),
        coref_flags: None,
        rule_flags: None,
    };
    let vocabs = crate::features::build_vocabs(&[seed_record], &config.features)?;
    let mut model = Model::init(config.clone(), vocabs, seed)?;
    randomize(&mut model.params, &mut rng, 0.6);
    let n_tags = model.labels.len();
    let k_pos = model.k_pos();
    let b = config.features.binary_dim();
    let example = EncodedExample {
        token_ids: (0..t).map(|_| rng.gen_range(0..6)).collect(),
        pos_ids: (0..t).map(|_| rng.gen_range(0..4)).collect(),
        binary_feats: Tensor::from_raw(
            vec![t, b],
            (0..t * b).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        ),
        layer_stack: None,
        gold_tags: (0..t).map(|_| rng.gen_range(0..n_tags)).collect(),
        gold_targets: (0..t).map(|_| rng.gen_range(0..=t * k_pos)).collect(),
    };
    let max_rel_err = grad_check(&model.params, EPS, |tape, bound| {
        let nodes = model.loss_with_bound(tape, bound, &example, (1.0, 1.0), None)?;
        Ok(nodes.total)
    })?;
    Ok(GradCheckReport {
        name: "joint-model".into(),
        seed,
        max_rel_err,
    })
}

/// Run every suite on every seed. Reports come back in suite-major order.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let cases: [(&str, fn(u64) -> Result<GradCheckReport>); 4] = [
        ("encoder", encoder_case),
        ("crf-nll", crf_nll_case),
        ("relation-loss", relation_loss_case),
        ("joint-model", joint_model_case),
    ];
    let mut out = Vec::with_capacity(cases.len() * seeds.len());
    for (_, case) in cases {
        for &seed in seeds {
            out.push(case(seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_five_seeds() {
        let reports = run_suite(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(reports.len(), 20);
        for r in &reports {
            assert!(
                r.passed(),
                "{} seed {}: max rel err {:.3e}",
                r.name,
                r.seed,
                r.max_rel_err
            );
        }
    }
}
