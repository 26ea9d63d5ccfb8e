//! The assembled model: encoder + tagging head (+ relation head in joint
//! mode), with loss construction, decoding, and binary checkpoints.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::{EncodedExample, FeatureConfig, Vocabs};
use crate::labels::{LabelVocab, RelationVocab};
use crate::relation;
use crate::tape::{BoundParams, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;
use crate::rng::fnv1a64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    /// Per-token softmax tagging, no chain scores, no relations.
    Simple,
    /// Linear-chain CRF tagging, no relations.
    Crf,
    /// CRF tagging plus the multi-head relation scorer.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: TaskMode,
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    /// Width of the pairwise relation features.
    pub d_rel: usize,
    /// Forbid ill-formed BIO transitions when decoding.
    pub decode_bio_mask: bool,
    /// Drop decoded relations whose head token is tagged O.
    pub mask_relations_to_tagged: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: TaskMode::Joint,
            encoder: EncoderConfig::default(),
            features: FeatureConfig::default(),
            d_rel: 64,
            decode_bio_mask: true,
            mask_relations_to_tagged: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.features.validate()?;
        if self.d_rel == 0 {
            return Err(Error::Config("d_rel must be positive".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub params: ParamSet,
    pub labels: LabelVocab,
    pub relations: RelationVocab,
}

/// Loss nodes for one example; `total` is what gets differentiated.
pub struct LossNodes {
    pub total: NodeId,
    pub tagging: NodeId,
    pub relation: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tags: Vec<usize>,
    /// (head token, tail token, positive relation label index 1..=K).
    pub relations: Vec<(usize, usize, usize)>,
}

impl Model {
    pub fn init(config: ModelConfig, vocabs: Vocabs, seed: u64) -> Result<Model> {
        config.validate()?;
        let labels = LabelVocab::new();
        let relations = RelationVocab::new();
        let mut params = ParamSet::new();
        encoder::init_params(
            &mut params,
            &config.encoder,
            &config.features,
            vocabs.tokens.len(),
            vocabs.pos.len(),
            seed,
        )?;
        let hidden = config.encoder.hidden_dim();
        crf::init_projection(&mut params, hidden, labels.len(), seed);
        match config.mode {
            TaskMode::Simple => {}
            TaskMode::Crf => crf::init_chain(&mut params, labels.len()),
            TaskMode::Joint => {
                crf::init_chain(&mut params, labels.len());
                relation::init_params(
                    &mut params,
                    hidden,
                    config.d_rel,
                    relations.positive().len(),
                    seed,
                );
            }
        }
        Ok(Model {
            config,
            vocabs,
            params,
            labels,
            relations,
        })
    }

    pub fn k_pos(&self) -> usize {
        self.relations.positive().len()
    }

    /// Build the (possibly weighted) loss for one example on a fresh tape.
    /// With a zero relation weight the relation head is skipped entirely,
    /// so the tagging loss is the same computation the tagging-only modes
    /// perform.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        example: &EncodedExample,
        weights: (f64, f64),
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossNodes> {
        let bound = tape.bind(&self.params);
        self.loss_with_bound(tape, &bound, example, weights, dropout_rng)
    }

    /// Same as [`loss_on_tape`](Model::loss_on_tape) but with the parameters
    /// already bound, so the caller can read gradients back off the tape.
    pub fn loss_with_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        example: &EncodedExample,
        weights: (f64, f64),
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossNodes> {
        let h = encoder::encode_on_tape(
            tape,
            bound,
            example,
            &self.config.encoder,
            &self.config.features,
            dropout_rng,
        )?;
        let emissions = crf::emissions_on_tape(tape, bound, h);
        let tagging = match self.config.mode {
            TaskMode::Simple => crf::simple_loss_on_tape(tape, emissions, &example.gold_tags)?,
            TaskMode::Crf | TaskMode::Joint => {
                crf::nll_on_tape(tape, bound, emissions, &example.gold_tags)?
            }
        };
        let relation = match self.config.mode {
            TaskMode::Joint if weights.1 != 0.0 => {
                let q = relation::forward_on_tape(tape, bound, h, self.k_pos());
                Some(relation::loss_on_tape(tape, q, &example.gold_targets)?)
            }
            _ => None,
        };
        let mut parts = vec![(tagging, weights.0)];
        if let Some(r) = relation {
            parts.push((r, weights.1));
        }
        let total = tape.weighted_sum(parts);
        let v = tape.scalar_value(total);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss became {v}")));
        }
        Ok(LossNodes {
            total,
            tagging,
            relation,
        })
    }

    /// Decode tags (and relations in joint mode) for one example.
    pub fn predict(&self, example: &EncodedExample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let h = encoder::encode_on_tape(
            &mut tape,
            &bound,
            example,
            &self.config.encoder,
            &self.config.features,
            None,
        )?;
        let emissions_node = crf::emissions_on_tape(&mut tape, &bound, h);
        let emissions = tape.value(emissions_node).clone();
        let mask = self.config.decode_bio_mask.then_some(&self.labels);
        let tags = match self.config.mode {
            TaskMode::Simple => {
                match mask {
                    // The simple tagger has no transition scores; repairing
                    // after argmax keeps outputs well-formed when asked.
                    Some(vocab) => {
                        let mut t = crf::simple_decode(&emissions);
                        crate::labels::repair_bio(vocab, &mut t);
                        t
                    }
                    None => crf::simple_decode(&emissions),
                }
            }
            TaskMode::Crf | TaskMode::Joint => crf::viterbi_decode(
                &emissions,
                self.params.get(crf::TRANS).expect("chain params"),
                self.params.get(crf::START).expect("chain params"),
                self.params.get(crf::END).expect("chain params"),
                mask,
            ),
        };
        let relations = match self.config.mode {
            TaskMode::Joint => {
                let q = relation::forward_on_tape(&mut tape, &bound, h, self.k_pos());
                let mut rels = relation::decode_relations(tape.value(q), self.k_pos())?;
                if self.config.mask_relations_to_tagged {
                    rels.retain(|&(head, _, _)| tags[head] != self.labels.outside_id());
                }
                rels
            }
            _ => Vec::new(),
        };
        Ok(Prediction { tags, relations })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u64(&mut out, VERSION);
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("encode config: {e}")))?;
        push_bytes(&mut out, &config);
        let vocabs = serde_json::to_vec(&self.vocabs)
            .map_err(|e| Error::Checkpoint(format!("encode vocabs: {e}")))?;
        push_bytes(&mut out, &vocabs);
        push_u64(&mut out, self.params.len() as u64);
        for (name, tensor) in self.params.iter() {
            push_bytes(&mut out, name.as_bytes());
            push_u64(&mut out, tensor.rank() as u64);
            for &d in tensor.shape() {
                push_u64(&mut out, d as u64);
            }
            push_u64(&mut out, tensor.len() as u64);
            let mut buf = vec![0u8; tensor.len() * 8];
            LittleEndian::write_f64_into(tensor.data(), &mut buf);
            out.extend_from_slice(&buf);
        }
        let checksum = fnv1a64(&out);
        push_u64(&mut out, checksum);
        Ok(out)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < MAGIC.len() + 16 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let body_len = bytes.len() - 8;
        let stored = LittleEndian::read_u64(&bytes[body_len..]);
        let actual = fnv1a64(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut cur = Cursor { bytes: &bytes[..body_len], pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = cur.u64()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig = serde_json::from_slice(cur.bytes_block()?)
            .map_err(|e| Error::Checkpoint(format!("decode config: {e}")))?;
        let vocabs: Vocabs = serde_json::from_slice(cur.bytes_block()?)
            .map_err(|e| Error::Checkpoint(format!("decode vocabs: {e}")))?;
        let count = cur.u64()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(cur.bytes_block()?.to_vec())
                .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            let rank = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n = cur.u64()? as usize;
            if n != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("shape/data mismatch for {name}")));
            }
            let raw = cur.take(n * 8)?;
            let mut data = vec![0.0f64; n];
            LittleEndian::read_f64_into(raw, &mut data);
            params.insert(name, Tensor::new(shape, data)?);
        }
        if cur.pos != cur.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        config.validate()?;
        Ok(Model {
            config,
            vocabs,
            params,
            labels: LabelVocab::new(),
            relations: RelationVocab::new(),
        })
    }
}

const MAGIC: &[u8] = b"DEFTCKPT";
const VERSION: u64 = 1;

fn push_u64(out: &mut Vec<u8>, v: u64) {
    let mut buf = [0u8; 8];
    LittleEndian::write_u64(&mut buf, v);
    out.extend_from_slice(&buf);
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    push_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn bytes_block(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Short content hash of a checkpoint file, for prediction provenance.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}
