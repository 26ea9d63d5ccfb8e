//! Training loop: Adam over per-example gradients accumulated into
//! minibatches, global-norm clipping, frozen padding rows, and early
//! stopping on dev macro F1.
//!
//! Every source of randomness (shuffling, dropout) draws from a stream
//! derived from the seed and a purpose tag, so a rerun with the same seed
//! reproduces the trajectory exactly, and adding or removing an unrelated
//! consumer of randomness does not disturb the others.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::features::EncodedExample;
use crate::metrics::{relation_metrics, token_metrics, TokenMode};
use crate::model::{Model, TaskMode};
use crate::relation;
use crate::rng::derive_rng;
use crate::tape::{param_grads, ParamSet, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Maximum global gradient norm per update; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// (tagging, relation) loss weights. A zero relation weight skips the
    /// relation head entirely.
    pub loss_weights: (f64, f64),
    pub shuffle: bool,
    /// Stop once the model fits the training set this well; used for
    /// memorization checks rather than real training.
    pub fit_stop: Option<FitStop>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStop {
    pub token_accuracy: f64,
    /// Additionally require every example's relation set to match exactly.
    pub exact_relations: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            patience: 10,
            seed: 1,
            loss_weights: (1.0, 1.0),
            shuffle: true,
            fit_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !self.clip_norm.is_finite() || self.clip_norm < 0.0 {
            return Err(Error::Config(format!("bad clip norm {}", self.clip_norm)));
        }
        let (wt, wr) = self.loss_weights;
        if !wt.is_finite() || !wr.is_finite() || wt < 0.0 || wr < 0.0 {
            return Err(Error::Config(format!("bad loss weights ({wt}, {wr})")));
        }
        Ok(())
    }
}

/// Adam with bias correction; first-moment and second-moment state is kept
/// per parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients down to `max_norm` when their global L2 norm exceeds it.
/// Returns the pre-clip norm. `max_norm == 0` disables clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

fn accumulate(acc: &mut IndexMap<String, Tensor>, part: &IndexMap<String, Tensor>) {
    for (name, t) in acc.iter_mut() {
        let p = &part[name];
        let d = t.data_mut();
        for (i, x) in p.data().iter().enumerate() {
            d[i] += x;
        }
    }
}

fn scale(grads: &mut IndexMap<String, Tensor>, s: f64) {
    for t in grads.values_mut() {
        for x in t.data_mut() {
            *x *= s;
        }
    }
}

fn zero_first_rows(grads: &mut IndexMap<String, Tensor>, names: &[&str]) {
    for name in names {
        if let Some(t) = grads.get_mut(*name) {
            let cols = t.cols();
            t.data_mut()[..cols].fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean weighted loss per example, summed in corpus order.
    pub train_loss: f64,
    pub tagging_loss: f64,
    pub relation_loss: Option<f64>,
    /// Mean pre-clip global gradient norm over the epoch's updates.
    pub grad_norm: f64,
    pub dev_token_f1: Option<f64>,
    pub dev_relation_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub stopped_early: bool,
    /// Epoch at which the fit-stop criterion was reached, if configured.
    pub fit_reached: Option<usize>,
}

/// Aggregate quality of a model on an encoded example set.
pub struct SetEval {
    pub token_macro_f1: f64,
    pub relation_macro_f1: Option<f64>,
    pub token_accuracy: f64,
    /// True when every example's predicted relation set equals gold.
    pub relations_exact: bool,
}

/// Gold relation triples recovered from per-token target classes.
pub fn gold_relation_triples(
    example: &EncodedExample,
    k_pos: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let t = example.gold_targets.len();
    let mut out = Vec::new();
    for (head, &c) in example.gold_targets.iter().enumerate() {
        if let Some((tail, label)) = relation::index_decode(c, t, k_pos)? {
            out.push((head, tail, label));
        }
    }
    Ok(out)
}

pub fn evaluate_set(model: &Model, set: &[EncodedExample]) -> Result<SetEval> {
    let mut gold_tags = Vec::with_capacity(set.len());
    let mut pred_tags = Vec::with_capacity(set.len());
    let mut gold_rels = Vec::with_capacity(set.len());
    let mut pred_rels = Vec::with_capacity(set.len());
    let joint = model.config.mode == TaskMode::Joint;
    for example in set {
        let pred = model.predict(example)?;
        gold_tags.push(example.gold_tags.clone());
        pred_tags.push(pred.tags);
        if joint {
            gold_rels.push(gold_relation_triples(example, model.k_pos())?);
            pred_rels.push(pred.relations);
        }
    }
    let total: usize = gold_tags.iter().map(Vec::len).sum();
    let hits: usize = gold_tags
        .iter()
        .zip(&pred_tags)
        .map(|(g, p)| g.iter().zip(p).filter(|(a, b)| a == b).count())
        .sum();
    let token_accuracy = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let token_macro_f1 = token_metrics(&gold_tags, &pred_tags, TokenMode::TypeToken)?.macro_f1;
    let (relation_macro_f1, relations_exact) = if joint {
        let f1 = relation_metrics(&gold_rels, &pred_rels)?.macro_f1;
        let exact = gold_rels.iter().zip(&pred_rels).all(|(g, p)| {
            let mut g = g.clone();
            let mut p = p.clone();
            g.sort_unstable();
            p.sort_unstable();
            g == p
        });
        (Some(f1), exact)
    } else {
        (None, true)
    };
    Ok(SetEval {
        token_macro_f1,
        relation_macro_f1,
        token_accuracy,
        relations_exact,
    })
}

pub fn train(
    model: &mut Model,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, dev_set, cfg, |_| {})
}

/// Like [`train`], invoking `on_epoch` after each epoch (for progress
/// logging).
pub fn train_with(
    model: &mut Model,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let n = train_set.len();
    let frozen = encoder::frozen_pad_rows(&model.config.features);
    let use_dropout = model.config.encoder.dropout > 0.0;
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut best_params: Option<ParamSet> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            order.shuffle(&mut derive_rng(cfg.seed, &format!("shuffle/e{epoch}")));
        }
        // Per-example losses are stored by corpus position and summed in
        // that order, so epoch aggregates do not depend on the shuffle.
        let mut total_losses = vec![0.0; n];
        let mut tag_losses = vec![0.0; n];
        let mut rel_losses: Vec<Option<f64>> = vec![None; n];
        let mut norms = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<IndexMap<String, Tensor>> = None;
            for &idx in batch {
                let mut tape = Tape::new();
                let bound = tape.bind(&model.params);
                let mut rng;
                let dropout_rng = if use_dropout {
                    rng = derive_rng(cfg.seed, &format!("dropout/e{epoch}/x{idx}"));
                    Some(&mut rng)
                } else {
                    None
                };
                let nodes = model
                    .loss_with_bound(&mut tape, &bound, &train_set[idx], cfg.loss_weights, dropout_rng)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => {
                            Error::NonFinite(format!("epoch {epoch}, example {idx}: {m}"))
                        }
                        other => other,
                    })?;
                total_losses[idx] = tape.scalar_value(nodes.total);
                tag_losses[idx] = tape.scalar_value(nodes.tagging);
                rel_losses[idx] = nodes.relation.map(|r| tape.scalar_value(r));
                let grads = tape.backward(nodes.total);
                let part = param_grads(&grads, &bound, &model.params);
                match &mut acc {
                    None => acc = Some(part),
                    Some(acc) => accumulate(acc, &part),
                }
            }
            let mut grads = acc.expect("chunks yields non-empty batches");
            scale(&mut grads, 1.0 / batch.len() as f64);
            norms.push(clip_global_norm(&mut grads, cfg.clip_norm));
            zero_first_rows(&mut grads, &frozen);
            adam.step(&mut model.params, &grads);
        }

        let train_loss = total_losses.iter().sum::<f64>() / n as f64;
        let tagging_loss = tag_losses.iter().sum::<f64>() / n as f64;
        let relation_loss = rel_losses
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n as f64);
        let grad_norm = norms.iter().sum::<f64>() / norms.len() as f64;
        let (dev_token_f1, dev_relation_f1) = if dev_set.is_empty() {
            (None, None)
        } else {
            let eval = evaluate_set(model, dev_set)?;
            (Some(eval.token_macro_f1), eval.relation_macro_f1)
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            tagging_loss,
            relation_loss,
            grad_norm,
            dev_token_f1,
            dev_relation_f1,
        };
        on_epoch(&stats);
        report.epochs.push(stats);

        match dev_token_f1 {
            Some(f1) if f1 > best_f1 => {
                best_f1 = f1;
                report.best_epoch = epoch;
                report.best_dev_f1 = Some(f1);
                best_params = Some(model.params.clone());
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
            None => report.best_epoch = epoch,
        }

        if let Some(fit) = &cfg.fit_stop {
            let eval = evaluate_set(model, train_set)?;
            if eval.token_accuracy >= fit.token_accuracy
                && (!fit.exact_relations || eval.relations_exact)
            {
                report.fit_reached = Some(epoch);
                break;
            }
        }
    }
    // Roll back to the best dev checkpoint. When fit-stopping, keep the
    // parameters that actually reached the fit.
    if report.fit_reached.is_none() {
        if let Some(best) = best_params {
            model.params = best;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ExampleRecord;
    use crate::encoder::EncoderConfig;
    use crate::features::{build_vocabs, encode, FeatureConfig, Vocabs};
    use crate::model::ModelConfig;
    use approx::assert_relative_eq;

    fn record(tokens: &[&str], tags: &[&str], relations: Vec<(usize, usize, &str)>) -> ExampleRecord {
        ExampleRecord {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            sentence_bounds: vec![(0, tokens.len())],
            tags: tags.iter().map(|s| s.to_string()).collect(),
            relations: relations
                .into_iter()
                .map(|(h, t, l)| (h, t, l.to_string()))
                .collect(),
            pos: None,
            coref_flags: None,
            rule_flags: None,
        }
    }

    fn tiny_set() -> (Vec<ExampleRecord>, Vocabs) {
        let records = vec![
            record(
                &["a", "laser", "emits", "coherent", "light"],
                &["O", "B-Term", "O", "B-Definition", "I-Definition"],
                vec![(3, 1, "Direct-defines")],
            ),
            record(
                &["an", "ion", "is", "a", "charged", "atom"],
                &["O", "B-Term", "O", "O", "B-Definition", "I-Definition"],
                vec![(4, 1, "Direct-defines")],
            ),
            record(
                &["это", "пример", "без", "аннотаций"],
                &["O", "O", "O", "O"],
                vec![],
            ),
        ];
        let vocabs = build_vocabs(&records, &FeatureConfig::default()).unwrap();
        (records, vocabs)
    }

    fn tiny_config(mode: TaskMode, dropout: f64) -> ModelConfig {
        ModelConfig {
            mode,
            encoder: EncoderConfig {
                n: 1,
                d_lstm: 4,
                d_tok: 6,
                d_pos: 2,
                dropout,
            },
            d_rel: 4,
            ..Default::default()
        }
    }

    fn encode_all(records: &[ExampleRecord], vocabs: &Vocabs, cfg: &ModelConfig) -> Vec<EncodedExample> {
        records
            .iter()
            .map(|r| encode(r, vocabs, &cfg.features, None).unwrap())
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![2.0, -1.0]).unwrap());
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![10.0, -0.5]).unwrap());
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, &grads);
        let w = params.get("w").unwrap().data();
        // After bias correction the first update is lr * g/(|g| + eps).
        assert_relative_eq!(w[0], 2.0 - 0.01, epsilon = 1e-6);
        assert_relative_eq!(w[1], -1.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn clipping_never_increases_the_norm() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(3, "clip-test");
        for _ in 0..50 {
            let mut grads = IndexMap::new();
            for name in ["a", "b"] {
                let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
                grads.insert(name.to_string(), Tensor::vector(data).unwrap());
            }
            let before = clip_global_norm(&mut grads.clone(), 0.0);
            let max = rng.gen_range(0.1..4.0);
            let pre = clip_global_norm(&mut grads, max);
            assert_relative_eq!(pre, before, epsilon = 1e-12);
            let post = clip_global_norm(&mut grads.clone(), 0.0);
            assert!(post <= max + 1e-9 || post <= pre);
            if before <= max {
                assert_relative_eq!(post, before, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_lr_changes_nothing_and_loss_is_flat() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Crf, 0.0);
        let examples = encode_all(&records, &vocabs, &config);
        let mut model = Model::init(config, vocabs, 17).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 0.0,
            ..Default::default()
        };
        let report = train(&mut model, &examples, &[], &cfg).unwrap();
        for (name, t) in model.params.iter() {
            assert_eq!(before.get(name).unwrap().data(), t.data(), "{name} moved");
        }
        let first = report.epochs[0].train_loss;
        for e in &report.epochs {
            assert_eq!(e.train_loss.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn same_seed_same_report() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Joint, 0.2);
        let examples = encode_all(&records, &vocabs, &config);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 0.01,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut model = Model::init(config.clone(), vocabs.clone(), 9).unwrap();
            let report = train(&mut model, &examples, &examples, &cfg).unwrap();
            (report, model.params.clone())
        };
        let (report_a, params_a) = run();
        let (report_b, params_b) = run();
        assert_eq!(report_a, report_b);
        for ((na, ta), (_, tb)) in params_a.iter().zip(params_b.iter()) {
            assert_eq!(ta.data(), tb.data(), "{na} differs between reruns");
        }
    }

    #[test]
    fn loss_decreases_on_tiny_set() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Crf, 0.0);
        let examples = encode_all(&records, &vocabs, &config);
        let mut model = Model::init(config, vocabs, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 3,
            lr: 0.05,
            ..Default::default()
        };
        let report = train(&mut model, &examples, &[], &cfg).unwrap();
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.8, "loss {first} -> {last}");
    }

    #[test]
    fn tag_only_joint_matches_crf_trajectory() {
        let (records, vocabs) = tiny_set();
        let joint_config = tiny_config(TaskMode::Joint, 0.2);
        let crf_config = tiny_config(TaskMode::Crf, 0.2);
        let examples = encode_all(&records, &vocabs, &joint_config);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            lr: 0.02,
            seed: 11,
            loss_weights: (1.0, 0.0),
            ..Default::default()
        };
        let mut joint = Model::init(joint_config, vocabs.clone(), 23).unwrap();
        let joint_report = train(&mut joint, &examples, &[], &cfg).unwrap();
        let mut crf = Model::init(crf_config, vocabs, 23).unwrap();
        let crf_report = train(&mut crf, &examples, &[], &cfg).unwrap();
        for (a, b) in joint_report.epochs.iter().zip(&crf_report.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.tagging_loss.to_bits(), b.tagging_loss.to_bits());
            assert!(a.relation_loss.is_none());
        }
        // The shared parameters end up bit-identical too.
        for (name, t) in crf.params.iter() {
            assert_eq!(joint.params.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn fit_stop_halts_at_threshold_zero() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Crf, 0.0);
        let examples = encode_all(&records, &vocabs, &config);
        let mut model = Model::init(config, vocabs, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            fit_stop: Some(FitStop {
                token_accuracy: 0.0,
                exact_relations: false,
            }),
            ..Default::default()
        };
        let report = train(&mut model, &examples, &[], &cfg).unwrap();
        assert_eq!(report.fit_reached, Some(1));
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn patience_stops_stalled_training() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Crf, 0.0);
        let examples = encode_all(&records, &vocabs, &config);
        let mut model = Model::init(config, vocabs, 3).unwrap();
        // lr 0: dev F1 can never improve after the first epoch.
        let cfg = TrainConfig {
            epochs: 30,
            lr: 0.0,
            patience: 2,
            ..Default::default()
        };
        let report = train(&mut model, &examples, &examples, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            loss_weights: (-1.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gold_triples_round_trip_through_targets() {
        let (records, vocabs) = tiny_set();
        let config = tiny_config(TaskMode::Joint, 0.0);
        let examples = encode_all(&records, &vocabs, &config);
        let triples = gold_relation_triples(&examples[0], 5).unwrap();
        assert_eq!(triples, vec![(3, 1, 1)]);
        assert!(gold_relation_triples(&examples[2], 5).unwrap().is_empty());
    }
}
