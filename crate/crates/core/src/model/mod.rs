//! Layered transformer encoder with a probe classifier on every layer.
//!
//! Each layer is a pre-norm block (self-attention then feed-forward, both
//! residual). A reserved `[CLS]` token is prepended to every sequence; the
//! per-layer pooled representation is that token's hidden state, normalised
//! without learned parameters, and feeds an affine probe. The top layer's
//! probe is the main classifier.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Group, NodeId, ParamId, ParameterSet, WeightSnapshot};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 500,
            max_sequence_length: 24,
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            dropout_rate: 0.1,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_sequence_length", self.max_sequence_length),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_layers < 2 {
            return Err(Error::config("num_layers", "at least 2 layers are required"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "at least 2 classes are required"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "hidden_dim",
                format!("{} is not divisible by num_heads {}", self.hidden_dim, self.num_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Token id of the prepended `[CLS]` token.
    pub fn cls_token(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    /// Keys carry no bias: it would shift every score in a row equally.
    wk: ParamId,
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<BlockParams>,
    probes: Vec<(ParamId, ParamId)>,
}

impl Layout {
    fn resolve(config: &EncoderConfig, params: &ParameterSet) -> Result<Layout> {
        let id = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let pair = |prefix: String, a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((id(format!("{prefix}.{a}"))?, id(format!("{prefix}.{b}"))?))
        };
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = |part: &str| format!("layer{l}.{part}");
            blocks.push(BlockParams {
                ln1: pair(p("ln1"), "gain", "bias")?,
                wq: pair(p("attn.query"), "weight", "bias")?,
                wk: id(p("attn.key.weight"))?,
                wv: pair(p("attn.value"), "weight", "bias")?,
                wo: pair(p("attn.output"), "weight", "bias")?,
                ln2: pair(p("ln2"), "gain", "bias")?,
                ffn_in: pair(p("ffn.in"), "weight", "bias")?,
                ffn_out: pair(p("ffn.out"), "weight", "bias")?,
            });
        }
        let probes = (1..=config.num_layers)
            .map(|l| pair(format!("probe{l}"), "weight", "bias"))
            .collect::<Result<_>>()?;
        Ok(Layout {
            token_embedding: id("embed.token".into())?,
            position_embedding: id("embed.position".into())?,
            blocks,
            probes,
        })
    }
}

/// Per-sample outputs of every layer, indexed by `layer - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub pooled: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl LayerOutputs {
    /// Distribution of the main classifier.
    pub fn main(&self) -> &[f64] {
        self.probs.last().expect("at least two layers")
    }

    pub fn main_logits(&self) -> &[f64] {
        self.logits.last().expect("at least two layers")
    }

    /// Distribution of probe `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.probs[layer - 1]
    }
}

/// Graph nodes produced by one forward pass, indexed by `layer - 1`.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: Vec<NodeId>,
    pub pooled: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct LayeredModel {
    config: EncoderConfig,
    pub params: ParameterSet,
    initial: WeightSnapshot,
    layout: Layout,
}

impl LayeredModel {
    /// Builds a model with weights drawn from an RNG seeded by `config.seed`
    /// and keeps a snapshot of that initialisation.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(normal)).collect())
                .expect("shape matches")
        };

        let h = config.hidden_dim;
        let mut ps = ParameterSet::new();
        ps.add("embed.token", Group::Embeddings, draw(&[config.vocab_size + 1, h]))?;
        ps.add("embed.position", Group::Embeddings, draw(&[config.max_sequence_length + 1, h]))?;
        for l in 1..=config.num_layers {
            let g = Group::Backbone(l);
            let mut linear = |ps: &mut ParameterSet, name: &str, fan_in: usize, fan_out: usize, bias: bool| -> Result<()> {
                ps.add(format!("layer{l}.{name}.weight"), g, draw(&[fan_in, fan_out]))?;
                if bias {
                    ps.add(format!("layer{l}.{name}.bias"), g, Tensor::zeros(&[fan_out]))?;
                }
                Ok(())
            };
            let norm = |ps: &mut ParameterSet, name: &str| -> Result<()> {
                ps.add(format!("layer{l}.{name}.gain"), g, Tensor::filled(&[h], 1.0))?;
                ps.add(format!("layer{l}.{name}.bias"), g, Tensor::zeros(&[h]))?;
                Ok(())
            };
            norm(&mut ps, "ln1")?;
            linear(&mut ps, "attn.query", h, h, true)?;
            linear(&mut ps, "attn.key", h, h, false)?;
            linear(&mut ps, "attn.value", h, h, true)?;
            linear(&mut ps, "attn.output", h, h, true)?;
            norm(&mut ps, "ln2")?;
            linear(&mut ps, "ffn.in", h, config.ffn_dim, true)?;
            linear(&mut ps, "ffn.out", config.ffn_dim, h, true)?;
        }
        for l in 1..=config.num_layers {
            let g = if l == config.num_layers {
                Group::MainClassifier
            } else {
                Group::Probe(l)
            };
            ps.add(format!("probe{l}.weight"), g, draw(&[h, config.num_classes]))?;
            ps.add(format!("probe{l}.bias"), g, Tensor::zeros(&[config.num_classes]))?;
        }
        let initial = ps.snapshot(config.seed);
        Self::from_parts(config, ps, initial)
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: ParameterSet, initial: WeightSnapshot) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(LayeredModel {
            config,
            params,
            initial,
            layout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn initial_snapshot(&self) -> &WeightSnapshot {
        &self.initial
    }

    /// Group tag of probe `layer` (the top layer's probe is the main classifier).
    pub fn probe_group(&self, layer: usize) -> Group {
        if layer == self.config.num_layers {
            Group::MainClassifier
        } else {
            Group::Probe(layer)
        }
    }

    /// Restores the initialisation weights bit for bit. Trainable flags are
    /// reset to all-trainable.
    pub fn reset_to_initial(&mut self) -> Result<()> {
        self.params.restore(&self.initial)?;
        self.params.unfreeze_all();
        Ok(())
    }

    fn check_batch(&self, batch: &[&[u32]]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() > self.config.max_sequence_length {
                return Err(Error::Invalid(format!(
                    "sequence {i} has {} tokens, max is {}",
                    seq.len(),
                    self.config.max_sequence_length
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Invalid(format!(
                    "token id {t} in sequence {i} is outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass of `batch` into `graph` and returns the logits
    /// and pooled nodes of every layer. Dropout is active iff `dropout` is given.
    pub fn forward(
        &self,
        graph: &mut Graph,
        batch: &[&[u32]],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardNodes> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let rate = cfg.dropout_rate;

        let mut token_ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for seq in batch {
            segments.push((token_ids.len(), seq.len() + 1));
            token_ids.push(cfg.cls_token());
            positions.push(0);
            for (p, &t) in seq.iter().enumerate() {
                token_ids.push(t as usize);
                positions.push(p + 1);
            }
        }
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.0).collect();

        let mut drop = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep: Vec<bool> = (0..g.value(x).numel()).map(|_| rng.random::<f64>() >= rate).collect();
                    g.dropout(x, &keep, rate)
                }
                _ => Ok(x),
            }
        };

        let p = |g: &mut Graph, id: ParamId| g.param(&self.params, id);
        let lin = |g: &mut Graph, x: NodeId, (w, b): (ParamId, ParamId)| -> Result<NodeId> {
            let wn = p(g, w)?;
            let bn = p(g, b)?;
            g.linear(x, wn, bn)
        };
        let norm = |g: &mut Graph, x: NodeId, (gain, bias): (ParamId, ParamId)| -> Result<NodeId> {
            let gn = p(g, gain)?;
            let bn = p(g, bias)?;
            g.layer_norm(x, Some((gn, bn)))
        };

        let tok_table = p(graph, self.layout.token_embedding)?;
        let pos_table = p(graph, self.layout.position_embedding)?;
        let tok = graph.gather(tok_table, token_ids)?;
        let pos = graph.gather(pos_table, positions)?;
        let mut x = graph.add(tok, pos)?;
        x = drop(graph, x)?;

        let mut out = ForwardNodes {
            logits: Vec::with_capacity(cfg.num_layers),
            pooled: Vec::with_capacity(cfg.num_layers),
        };
        for (block, &probe) in self.layout.blocks.iter().zip(&self.layout.probes) {
            let a = norm(graph, x, block.ln1)?;
            let q = lin(graph, a, block.wq)?;
            let wk = p(graph, block.wk)?;
            let k = graph.matmul(a, wk)?;
            let v = lin(graph, a, block.wv)?;
            let att = graph.attention(q, k, v, cfg.num_heads, segments.clone())?;
            let o = lin(graph, att, block.wo)?;
            let o = drop(graph, o)?;
            x = graph.add(x, o)?;

            let f = norm(graph, x, block.ln2)?;
            let f = lin(graph, f, block.ffn_in)?;
            let f = graph.gelu(f)?;
            let f = lin(graph, f, block.ffn_out)?;
            let f = drop(graph, f)?;
            x = graph.add(x, f)?;

            let pooled = graph.gather(x, cls_rows.clone())?;
            let z = graph.layer_norm(pooled, None)?;
            let logits = lin(graph, z, probe)?;
            out.pooled.push(pooled);
            out.logits.push(logits);
        }
        Ok(out)
    }

    /// Runs `batch` through the model without recording gradients and
    /// returns per-sample outputs of every layer.
    pub fn forward_all_layers(&self, batch: &[&[u32]], dropout: Option<&mut ChaCha8Rng>) -> Result<Vec<LayerOutputs>> {
        let mut graph = Graph::inference();
        let nodes = self.forward(&mut graph, batch, dropout)?;
        let mut outputs: Vec<LayerOutputs> = (0..batch.len())
            .map(|_| LayerOutputs {
                pooled: Vec::with_capacity(self.config.num_layers),
                logits: Vec::with_capacity(self.config.num_layers),
                probs: Vec::with_capacity(self.config.num_layers),
            })
            .collect();
        for (&ln, &pn) in nodes.logits.iter().zip(&nodes.pooled) {
            for (o, (zrow, hrow)) in outputs
                .iter_mut()
                .zip(graph.value(ln).rows().zip(graph.value(pn).rows()))
            {
                o.probs.push(crate::nn::softmax(zrow)?);
                o.logits.push(zrow.to_vec());
                o.pooled.push(hrow.to_vec());
            }
        }
        Ok(outputs)
    }

    /// Deterministic per-layer outputs for many sequences, processed in chunks.
    pub fn predict(&self, sequences: &[&[u32]]) -> Result<Vec<LayerOutputs>> {
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(INFERENCE_CHUNK) {
            out.extend(self.forward_all_layers(chunk, None)?);
        }
        Ok(out)
    }

    /// Main-classifier distributions with dropout active, one pass per call.
    pub fn predict_stochastic(&self, sequences: &[&[u32]], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(INFERENCE_CHUNK) {
            out.extend(
                self.forward_all_layers(chunk, Some(rng))?
                    .into_iter()
                    .map(|o| o.main().to_vec()),
            );
        }
        Ok(out)
    }
}
