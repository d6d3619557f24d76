//! The 2-layer bidirectional encoder that reads an episode and emits one
//! pre-sigmoid logit for the query label.
//!
//! Context tokens bind input and label additively: `W_x x_i + W_y y_i + P_i`.
//! The query token carries no label term. Ablation variants are pure
//! configuration: they change which parameters exist, are frozen, or how
//! the sequence is tokenized, never the forward code path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;
use crate::taskgen::{Episode, TaskRng};
use crate::{Graph, Param, Tensor, ValueId};

/// LayerNorm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Derived RNG stream id for weight initialization.
const INIT_STREAM: u64 = u64::MAX;

const CHECKPOINT_FORMAT: &str = "icl-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    seed: u64,
    step: usize,
    params: Vec<ParamEntry>,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("episode does not match config: {0}")]
    EpisodeMismatch(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("layer {layer} / head {head} out of range")]
    HeadOutOfRange { layer: usize, head: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    BadCheckpoint(String),
}

/// Architecture ablations from the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Regular,
    /// Positional table identically zero and frozen.
    NoPos,
    /// Positional table random at init and frozen.
    FrozenPos,
    /// Query/key projections frozen at init; values and outputs train.
    FrozenQk,
    /// All four attention projections frozen; only FFN/embeddings train.
    FrozenAttention,
    /// GPT-style `[x1, y1, ..., xN, yN, xq]` tokenization instead of
    /// additive binding.
    Interleaved,
}

/// Whether context labels enter the token embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Bound,
    /// Label pathway disabled; context tokens carry inputs only.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_context: usize,
    pub variant: Variant,
    pub label_mode: LabelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 16,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 512,
            n_context: 32,
            variant: Variant::Regular,
            label_mode: LabelMode::Bound,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.d_x == 0
            || self.n_context == 0
        {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Sequence length seen by the encoder.
    pub fn seq_len(&self) -> usize {
        match self.variant {
            Variant::Interleaved => 2 * self.n_context + 1,
            _ => self.n_context + 1,
        }
    }

    /// Positional table rows: sized for the longest tokenization so that
    /// checkpoints are shape-compatible across variants.
    pub fn max_seq_len(&self) -> usize {
        2 * self.n_context + 1
    }
}

struct LayerWeights {
    attn_q: Param,
    attn_k: Param,
    attn_v: Param,
    attn_o: Param,
    ln1_gain: Param,
    ln1_bias: Param,
    ff_w1: Param,
    ff_b1: Param,
    ff_w2: Param,
    ff_b2: Param,
    ln2_gain: Param,
    ln2_bias: Param,
}

/// Instantiated weight set.
pub struct IclModel {
    pub config: ModelConfig,
    input_w: Param,
    input_b: Param,
    label_w: Param,
    label_b: Param,
    pos: Param,
    layers: Vec<LayerWeights>,
    readout_w: Param,
    readout_b: Param,
}

/// Residual/attention probe points recorded during a forward pass.
pub struct ForwardProbes {
    /// Token embeddings (input to layer 0), `[B,T,D]`.
    pub embedding: ValueId,
    /// Post-block residuals, one per layer, `[B,T,D]`.
    pub residuals: Vec<ValueId>,
    /// Attention weights, one per layer, `[B,H,T,T]`.
    pub attentions: Vec<ValueId>,
}

/// A recorded batched forward pass.
pub struct BatchForward {
    pub graph: Graph,
    /// `[B, 1]` pre-sigmoid logits.
    pub logits: ValueId,
    /// Parameter leaves in canonical order (see `named_params`).
    pub leaf_ids: Vec<ValueId>,
    pub probes: ForwardProbes,
}

impl BatchForward {
    pub fn logit_vec(&self) -> Vec<f64> {
        self.graph.value(self.logits).data().to_vec()
    }
}

/// Residual states and attention maps for one episode.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Query-position residual after embedding.
    pub embedding_residual: Vec<f64>,
    /// Query-position residual after each layer.
    pub layer_residuals: Vec<Vec<f64>>,
    /// Attention weights per layer, flattened `[H, T, T]`.
    pub attentions: Vec<Vec<f64>>,
    pub logit: f64,
}

impl IclModel {
    /// Initialize weights: scaled-uniform fan-in for projections, N(0, 0.02^2)
    /// for the positional table, unit/zero LayerNorm, zero biases. Frozen
    /// flags follow the variant.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = TaskRng::stream(seed, INIT_STREAM);
        let d = config.d_model;
        let (pos_trainable, qk_trainable, vo_trainable) = match config.variant {
            Variant::NoPos | Variant::FrozenPos => (false, true, true),
            Variant::FrozenQk => (true, false, true),
            Variant::FrozenAttention => (true, false, false),
            Variant::Regular | Variant::Interleaved => (true, true, true),
        };

        let mut fan_in = |rows: usize, cols: usize, rng: &mut TaskRng| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_vec_unchecked(vec![rows, cols], data)
        };

        let input_w = Param::new(fan_in(config.d_x, d, &mut rng), true);
        let input_b = Param::new(Tensor::zeros(&[d]), true);
        let label_w = Param::new(fan_in(1, d, &mut rng), true);
        let label_b = Param::new(Tensor::zeros(&[1, d]), true);
        let pos_rows = config.max_seq_len();
        let pos_data: Vec<f64> = match config.variant {
            Variant::NoPos => vec![0.0; pos_rows * d],
            _ => (0..pos_rows * d).map(|_| rng.normal() * 0.02).collect(),
        };
        let pos = Param::new(
            Tensor::from_vec_unchecked(vec![pos_rows, d], pos_data),
            pos_trainable,
        );

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_q: Param::new(fan_in(d, d, &mut rng), qk_trainable),
                attn_k: Param::new(fan_in(d, d, &mut rng), qk_trainable),
                attn_v: Param::new(fan_in(d, d, &mut rng), vo_trainable),
                attn_o: Param::new(fan_in(d, d, &mut rng), vo_trainable),
                ln1_gain: Param::new(Tensor::from_vec_unchecked(vec![d], vec![1.0; d]), true),
                ln1_bias: Param::new(Tensor::zeros(&[d]), true),
                ff_w1: Param::new(fan_in(d, config.d_ff, &mut rng), true),
                ff_b1: Param::new(Tensor::zeros(&[config.d_ff]), true),
                ff_w2: Param::new(fan_in(config.d_ff, d, &mut rng), true),
                ff_b2: Param::new(Tensor::zeros(&[d]), true),
                ln2_gain: Param::new(Tensor::from_vec_unchecked(vec![d], vec![1.0; d]), true),
                ln2_bias: Param::new(Tensor::zeros(&[d]), true),
            });
        }
        let readout_w = Param::new(fan_in(d, 1, &mut rng), true);
        let readout_b = Param::new(Tensor::zeros(&[1]), true);

        Ok(Self {
            config,
            input_w,
            input_b,
            label_w,
            label_b,
            pos,
            layers,
            readout_w,
            readout_b,
        })
    }

    /// Parameters with stable names, in the canonical order used by the
    /// optimizer, the graph leaves, and the checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = vec![
            ("input_w".into(), &self.input_w),
            ("input_b".into(), &self.input_b),
            ("label_w".into(), &self.label_w),
            ("label_b".into(), &self.label_b),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_q"), &l.attn_q));
            out.push((format!("layers.{i}.attn_k"), &l.attn_k));
            out.push((format!("layers.{i}.attn_v"), &l.attn_v));
            out.push((format!("layers.{i}.attn_o"), &l.attn_o));
            out.push((format!("layers.{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.ff_w1"), &l.ff_w1));
            out.push((format!("layers.{i}.ff_b1"), &l.ff_b1));
            out.push((format!("layers.{i}.ff_w2"), &l.ff_w2));
            out.push((format!("layers.{i}.ff_b2"), &l.ff_b2));
            out.push((format!("layers.{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2_bias"), &l.ln2_bias));
        }
        out.push(("readout_w".into(), &self.readout_w));
        out.push(("readout_b".into(), &self.readout_b));
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = vec![
            &mut self.input_w,
            &mut self.input_b,
            &mut self.label_w,
            &mut self.label_b,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            out.push(&mut l.attn_q);
            out.push(&mut l.attn_k);
            out.push(&mut l.attn_v);
            out.push(&mut l.attn_o);
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ff_w1);
            out.push(&mut l.ff_b1);
            out.push(&mut l.ff_w2);
            out.push(&mut l.ff_b2);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
        }
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Run a batched forward pass on a fresh graph.
    pub fn forward_batch(&self, episodes: &[Episode]) -> Result<BatchForward, ModelError> {
        let mut graph = Graph::new();
        let leaf_ids: Vec<ValueId> = self.params().iter().map(|p| graph.leaf(p)).collect();
        let (logits, probes) = self.forward_graph(&mut graph, &leaf_ids, episodes)?;
        Ok(BatchForward {
            graph,
            logits,
            leaf_ids,
            probes,
        })
    }

    /// Pre-sigmoid logit for one episode.
    pub fn forward(&self, episode: &Episode) -> Result<f64, ModelError> {
        let fwd = self.forward_batch(std::slice::from_ref(episode))?;
        Ok(fwd.logit_vec()[0])
    }

    /// Same logit as `forward`, plus recorded residuals and attention maps.
    pub fn forward_with_trace(&self, episode: &Episode) -> Result<(f64, Trace), ModelError> {
        let fwd = self.forward_batch(std::slice::from_ref(episode))?;
        let logit = fwd.logit_vec()[0];
        let t_len = self.config.seq_len();
        let d = self.config.d_model;
        let query_row = |id: ValueId| -> Vec<f64> {
            fwd.graph.value(id).data()[(t_len - 1) * d..t_len * d].to_vec()
        };
        let trace = Trace {
            embedding_residual: query_row(fwd.probes.embedding),
            layer_residuals: fwd.probes.residuals.iter().map(|&id| query_row(id)).collect(),
            attentions: fwd
                .probes
                .attentions
                .iter()
                .map(|&id| fwd.graph.value(id).data().to_vec())
                .collect(),
            logit,
        };
        Ok((logit, trace))
    }

    /// Accumulate this forward pass's parameter gradients (after its graph
    /// ran backward). Frozen parameters keep their zero gradient.
    pub fn accumulate_grads(&mut self, fwd: &BatchForward) {
        for (p, &id) in self.params_mut().into_iter().zip(&fwd.leaf_ids) {
            if p.trainable {
                if let Some(g) = fwd.graph.grad(id) {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    /// Token embedding for a batch: `[B, T, d_model]` with additive label
    /// binding (or the interleaved layout) plus positions.
    pub fn embed_batch(
        &self,
        graph: &mut Graph,
        leaf_ids: &[ValueId],
        episodes: &[Episode],
    ) -> Result<ValueId, ModelError> {
        self.check_episodes(episodes)?;
        let cfg = &self.config;
        let batch = episodes.len();
        let n = cfg.n_context;
        let (input_w, input_b, label_w, label_b, pos) =
            (leaf_ids[0], leaf_ids[1], leaf_ids[2], leaf_ids[3], leaf_ids[4]);

        // Inputs (context rows then query) as [B, N+1, d_x].
        let mut xs = Vec::with_capacity(batch * (n + 1) * cfg.d_x);
        for ep in episodes {
            xs.extend_from_slice(&ep.context_x);
            xs.extend_from_slice(&ep.query_x);
        }
        let x_in = graph.constant(Tensor::from_vec_unchecked(
            vec![batch, n + 1, cfg.d_x],
            xs,
        ));
        let x_emb = graph.linear(x_in, input_w, Some(input_b))?;

        // Per-episode label gate: an episode contributes label information
        // only when the model binds labels and the episode is not masked.
        let absent = cfg.label_mode == LabelMode::Absent;
        let gate = |ep: &Episode| !absent && !ep.labels_masked;
        let tokens = match cfg.variant {
            Variant::Interleaved => {
                // Label tokens [B, N, 1] -> [B, N, D]. Gated-off episodes
                // get zero label value and zero label bias, so their label
                // tokens carry positions only.
                let mut ys = Vec::with_capacity(batch * n);
                let mut mask = Vec::with_capacity(batch * n);
                for ep in episodes {
                    let on = gate(ep);
                    for &y in &ep.context_y {
                        ys.push(if on { y as f64 } else { 0.0 });
                        mask.push(if on { 1.0 } else { 0.0 });
                    }
                }
                let y_in = graph.constant(Tensor::from_vec_unchecked(vec![batch, n, 1], ys));
                let m_in = graph.constant(Tensor::from_vec_unchecked(vec![batch, n, 1], mask));
                let y_proj = graph.linear(y_in, label_w, None)?;
                let y_bias = graph.linear(m_in, label_b, None)?;
                let y_emb = graph.add(y_proj, y_bias)?;
                graph.interleave_pairs(x_emb, y_emb)?
            }
            _ if absent => x_emb,
            _ => {
                // Label values and a context-row indicator, both
                // [B, N+1, 1]; the query row stays zero in each, so it
                // receives neither label value nor label bias.
                let mut ys = Vec::with_capacity(batch * (n + 1));
                let mut mask = Vec::with_capacity(batch * (n + 1));
                for ep in episodes {
                    let on = gate(ep);
                    for &y in &ep.context_y {
                        ys.push(if on { y as f64 } else { 0.0 });
                        mask.push(if on { 1.0 } else { 0.0 });
                    }
                    ys.push(0.0);
                    mask.push(0.0);
                }
                let y_in = graph.constant(Tensor::from_vec_unchecked(vec![batch, n + 1, 1], ys));
                let m_in = graph.constant(Tensor::from_vec_unchecked(vec![batch, n + 1, 1], mask));
                let y_proj = graph.linear(y_in, label_w, None)?;
                let y_bias = graph.linear(m_in, label_b, None)?;
                let lbl = graph.add(y_proj, y_bias)?;
                graph.add(x_emb, lbl)?
            }
        };
        Ok(graph.add_rows(tokens, pos)?)
    }

    /// Build the full forward computation from existing parameter leaves.
    /// Returns the `[B,1]` logits and the probe points.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        leaf_ids: &[ValueId],
        episodes: &[Episode],
    ) -> Result<(ValueId, ForwardProbes), ModelError> {
        let cfg = &self.config;
        let embedding = self.embed_batch(graph, leaf_ids, episodes)?;
        let mut x = embedding;
        let mut residuals = Vec::with_capacity(cfg.n_layers);
        let mut attentions = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let base = 5 + li * 12;
            let (wq, wk, wv, wo) = (
                leaf_ids[base],
                leaf_ids[base + 1],
                leaf_ids[base + 2],
                leaf_ids[base + 3],
            );
            let (ln1_g, ln1_b) = (leaf_ids[base + 4], leaf_ids[base + 5]);
            let (ff_w1, ff_b1, ff_w2, ff_b2) = (
                leaf_ids[base + 6],
                leaf_ids[base + 7],
                leaf_ids[base + 8],
                leaf_ids[base + 9],
            );
            let (ln2_g, ln2_b) = (leaf_ids[base + 10], leaf_ids[base + 11]);

            let q = graph.linear(x, wq, None)?;
            let k = graph.linear(x, wk, None)?;
            let v = graph.linear(x, wv, None)?;
            let scores = graph.attention_scores(q, k, cfg.n_heads)?;
            let attn = graph.softmax(scores, 3)?;
            let ctx = graph.attention_context(attn, v, cfg.n_heads)?;
            let proj = graph.linear(ctx, wo, None)?;
            let sum1 = graph.add(x, proj)?;
            let normed = graph.layer_norm(sum1, ln1_g, ln1_b, LN_EPS)?;
            let hidden = graph.linear(normed, ff_w1, Some(ff_b1))?;
            let act = graph.gelu(hidden)?;
            let ff_out = graph.linear(act, ff_w2, Some(ff_b2))?;
            let sum2 = graph.add(normed, ff_out)?;
            x = graph.layer_norm(sum2, ln2_g, ln2_b, LN_EPS)?;

            if graph.value(x).first_nonfinite().is_some() {
                return Err(ModelError::NonFinite { layer: li });
            }
            residuals.push(x);
            attentions.push(attn);
        }
        let n_leaf = leaf_ids.len();
        let (readout_w, readout_b) = (leaf_ids[n_leaf - 2], leaf_ids[n_leaf - 1]);
        let query = graph.select_row(x, cfg.seq_len() - 1)?;
        let logits = graph.linear(query, readout_w, Some(readout_b))?;
        Ok((
            logits,
            ForwardProbes {
                embedding,
                residuals,
                attentions,
            },
        ))
    }

    /// Readout direction (without the bias), as a flat `[d_model]` vector.
    pub fn readout_direction(&self) -> Vec<f64> {
        self.readout_w.value.data().to_vec()
    }

    pub fn readout_bias(&self) -> f64 {
        self.readout_b.value.data()[0]
    }

    /// Combined value-output circuit `W_V[:, head] * W_O[head, :]` of one
    /// attention head, a d_model x d_model matrix.
    pub fn ov_matrix(&self, layer: usize, head: usize) -> Result<Tensor, ModelError> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(ModelError::HeadOutOfRange { layer, head });
        }
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let wv = self.layers[layer].attn_v.value.data();
        let wo = self.layers[layer].attn_o.value.data();
        // W_V columns for this head: [d, dh]; W_O rows for this head: [dh, d].
        let mut v_slice = vec![0.0; d * dh];
        for r in 0..d {
            v_slice[r * dh..(r + 1) * dh].copy_from_slice(&wv[r * d + head * dh..r * d + (head + 1) * dh]);
        }
        let o_slice = wo[head * dh * d..(head + 1) * dh * d].to_vec();
        let v_t = Tensor::from_vec_unchecked(vec![d, dh], v_slice);
        let o_t = Tensor::from_vec_unchecked(vec![dh, d], o_slice);
        Ok(v_t.matmul(&o_t)?)
    }

    /// Write a checkpoint: one JSON header line (config, seed, step, and
    /// the parameter manifest in canonical order), then the raw
    /// little-endian f64 data of every parameter, concatenated in that
    /// order. Round-trips bit-exactly.
    pub fn save_checkpoint(
        &self,
        path: &std::path::Path,
        seed: u64,
        step: usize,
    ) -> Result<(), ModelError> {
        use std::io::Write;
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config,
            seed,
            step,
            params: self
                .named_params()
                .iter()
                .map(|(name, p)| ParamEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            serde_json::to_writer(&mut f, &header)
                .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
            f.write_all(b"\n")?;
            for p in self.params() {
                for v in p.value.data() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load a checkpoint written by `save_checkpoint`.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<(Self, u64, usize), ModelError> {
        use std::io::{BufRead, Read};
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header_line = String::new();
        reader.read_line(&mut header_line)?;
        let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
            .map_err(|e| ModelError::BadCheckpoint(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported format tag {:?}",
                header.format
            )));
        }
        let mut model = Self::init(header.config, header.seed)?;
        let expected: Vec<ParamEntry> = model
            .named_params()
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        if expected != header.params {
            return Err(ModelError::BadCheckpoint(
                "parameter manifest does not match config".into(),
            ));
        }
        for p in model.params_mut() {
            let mut buf = vec![0u8; p.value.numel() * 8];
            reader.read_exact(&mut buf).map_err(|e| {
                ModelError::BadCheckpoint(format!("truncated parameter data: {e}"))
            })?;
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                p.value.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut extra = [0u8; 1];
        if reader.read(&mut extra)? != 0 {
            return Err(ModelError::BadCheckpoint("trailing data".into()));
        }
        Ok((model, header.seed, header.step))
    }

    fn check_episodes(&self, episodes: &[Episode]) -> Result<(), ModelError> {
        if episodes.is_empty() {
            return Err(ModelError::EpisodeMismatch("empty batch".into()));
        }
        for ep in episodes {
            if ep.dim != self.config.d_x {
                return Err(ModelError::EpisodeMismatch(format!(
                    "episode dim {} vs model d_x {}",
                    ep.dim, self.config.d_x
                )));
            }
            if ep.n_context() != self.config.n_context {
                return Err(ModelError::EpisodeMismatch(format!(
                    "episode context {} vs model n_context {}",
                    ep.n_context(),
                    self.config.n_context
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_episode, sample_params, Corruption, TaskFamily, TaskParams};

    fn episode(seed: u64, n_context: usize) -> Episode {
        let mut rng = TaskRng::new(seed);
        let params = sample_params(TaskFamily::MeanShift, 16, 3.0, &mut rng).unwrap();
        generate_episode(&params, n_context, &mut rng).unwrap()
    }

    fn variance_episode(seed: u64, n_context: usize) -> Episode {
        let mut rng = TaskRng::new(seed);
        let params = sample_params(TaskFamily::Variance, 16, 3.0, &mut rng).unwrap();
        generate_episode(&params, n_context, &mut rng).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_param_orders_agree() {
        let cfg = ModelConfig::default();
        let a = IclModel::init(cfg, 42).unwrap();
        let b = IclModel::init(cfg, 42).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data(), "param {na} differs");
        }
        // params_mut must mirror named_params exactly.
        let names: Vec<String> = a.named_params().iter().map(|(n, _)| n.clone()).collect();
        let mut c = IclModel::init(cfg, 42).unwrap();
        let shapes_mut: Vec<Vec<usize>> = c
            .params_mut()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        let shapes: Vec<Vec<usize>> = a.params().iter().map(|p| p.value.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn variant_freezing_contracts() {
        let mut cfg = ModelConfig::default();
        cfg.variant = Variant::NoPos;
        let m = IclModel::init(cfg, 1).unwrap();
        assert!(!m.pos.trainable);
        assert!(m.pos.value.data().iter().all(|&v| v == 0.0));

        cfg.variant = Variant::FrozenPos;
        let m = IclModel::init(cfg, 1).unwrap();
        assert!(!m.pos.trainable);
        assert!(m.pos.value.data().iter().any(|&v| v != 0.0));

        cfg.variant = Variant::FrozenQk;
        let m = IclModel::init(cfg, 1).unwrap();
        for l in &m.layers {
            assert!(!l.attn_q.trainable && !l.attn_k.trainable);
            assert!(l.attn_v.trainable && l.attn_o.trainable);
        }

        cfg.variant = Variant::FrozenAttention;
        let m = IclModel::init(cfg, 1).unwrap();
        for l in &m.layers {
            assert!(!l.attn_q.trainable && !l.attn_k.trainable);
            assert!(!l.attn_v.trainable && !l.attn_o.trainable);
            assert!(l.ff_w1.trainable);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.n_heads = 3;
        assert!(matches!(
            IclModel::init(cfg, 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn absent_labels_make_embedding_label_independent() {
        let mut cfg = ModelConfig::default();
        cfg.n_context = 8;
        cfg.label_mode = LabelMode::Absent;
        let m = IclModel::init(cfg, 3).unwrap();
        let ep = episode(5, 8);
        let mut flipped = ep.clone();
        for y in &mut flipped.context_y {
            *y ^= 1;
        }
        let emb = |e: &Episode| {
            let mut g = Graph::new();
            let ids: Vec<ValueId> = m.params().iter().map(|p| g.leaf(p)).collect();
            let id = m.embed_batch(&mut g, &ids, std::slice::from_ref(e)).unwrap();
            g.value(id).data().to_vec()
        };
        assert_eq!(emb(&ep), emb(&flipped), "absent labels must not leak");

        // Masked episodes behave the same way under bound labels.
        cfg.label_mode = LabelMode::Bound;
        let m = IclModel::init(cfg, 3).unwrap();
        let masked = corrupt_mask(&ep);
        let masked_flipped = corrupt_mask(&flipped);
        let emb2 = |e: &Episode| {
            let mut g = Graph::new();
            let ids: Vec<ValueId> = m.params().iter().map(|p| g.leaf(p)).collect();
            let id = m.embed_batch(&mut g, &ids, std::slice::from_ref(e)).unwrap();
            g.value(id).data().to_vec()
        };
        assert_eq!(emb2(&masked), emb2(&masked_flipped));
    }

    fn corrupt_mask(ep: &Episode) -> Episode {
        crate::taskgen::corrupt(ep, Corruption::NoLabels, &mut TaskRng::new(0)).unwrap()
    }

    #[test]
    fn label_flip_shifts_token_by_label_column() {
        let mut cfg = ModelConfig::default();
        cfg.n_context = 4;
        let m = IclModel::init(cfg, 7).unwrap();
        let ep = episode(9, 4);
        let mut flipped = ep.clone();
        flipped.context_y[2] = 1;
        let mut base = ep.clone();
        base.context_y[2] = 0;
        let emb = |e: &Episode| {
            let mut g = Graph::new();
            let ids: Vec<ValueId> = m.params().iter().map(|p| g.leaf(p)).collect();
            let id = m.embed_batch(&mut g, &ids, std::slice::from_ref(e)).unwrap();
            g.value(id).data().to_vec()
        };
        let (e0, e1) = (emb(&base), emb(&flipped));
        let d = m.config.d_model;
        let label_row = m.label_w.value.data();
        for t in 0..cfg.seq_len() {
            for j in 0..d {
                let diff = e1[t * d + j] - e0[t * d + j];
                let expect = if t == 2 { label_row[j] } else { 0.0 };
                assert!(
                    (diff - expect).abs() < 1e-15,
                    "token {t} dim {j}: diff {diff} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn no_pos_forward_is_permutation_invariant() {
        let mut cfg = ModelConfig::default();
        cfg.n_context = 16;
        cfg.variant = Variant::NoPos;
        let m = IclModel::init(cfg, 11).unwrap();
        let ep = episode(13, 16);
        let logit = m.forward(&ep).unwrap();
        for shuffle_seed in 0..4 {
            let shuffled = crate::taskgen::corrupt(
                &ep,
                Corruption::ShuffledContext,
                &mut TaskRng::new(shuffle_seed),
            )
            .unwrap();
            let l2 = m.forward(&shuffled).unwrap();
            assert!(
                (logit - l2).abs() < 1e-9,
                "permutation moved logit by {}",
                (logit - l2).abs()
            );
        }
    }

    #[test]
    fn trace_matches_forward_and_readout_identity() {
        let cfg = ModelConfig {
            n_context: 8,
            ..Default::default()
        };
        let m = IclModel::init(cfg, 17).unwrap();
        let ep = variance_episode(19, 8);
        let logit = m.forward(&ep).unwrap();
        let (tlogit, trace) = m.forward_with_trace(&ep).unwrap();
        assert_eq!(logit.to_bits(), tlogit.to_bits(), "trace must not change the logit");

        // Attention rows sum to one.
        let t_len = cfg.seq_len();
        for attn in &trace.attentions {
            for row in attn.chunks(t_len) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-10, "attention row sums to {s}");
            }
        }

        // Readout applied to the last residual reproduces the logit.
        let last = trace.layer_residuals.last().unwrap();
        let r = m.readout_direction();
        let dot: f64 = last.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((dot + m.readout_bias() - logit).abs() < 1e-10);
    }

    #[test]
    fn query_label_never_influences_logit() {
        let cfg = ModelConfig {
            n_context: 8,
            ..Default::default()
        };
        let m = IclModel::init(cfg, 23).unwrap();
        let ep = episode(29, 8);
        let mut flipped = ep.clone();
        flipped.query_y ^= 1;
        let a = m.forward(&ep).unwrap();
        let b = m.forward(&flipped).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn interleaved_uses_long_sequence() {
        let cfg = ModelConfig {
            n_context: 8,
            variant: Variant::Interleaved,
            ..Default::default()
        };
        assert_eq!(cfg.seq_len(), 17);
        let m = IclModel::init(cfg, 31).unwrap();
        let ep = episode(37, 8);
        let fwd = m.forward_batch(std::slice::from_ref(&ep)).unwrap();
        assert_eq!(fwd.graph.value(fwd.probes.embedding).shape(), &[1, 17, 128]);
        assert!(fwd.logit_vec()[0].is_finite());
    }

    #[test]
    fn forward_reports_nonfinite_layer() {
        let cfg = ModelConfig {
            n_context: 4,
            ..Default::default()
        };
        let mut m = IclModel::init(cfg, 41).unwrap();
        // Large enough that the FFN product overflows to +/-inf, which the
        // following LayerNorm turns into NaN.
        for v in m.layers[1].ff_w2.value.data_mut() {
            *v = 1e308;
        }
        let ep = episode(43, 4);
        match m.forward(&ep) {
            Err(ModelError::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("expected NonFinite error, got {other:?}"),
        }
    }

    #[test]
    fn ov_matrix_identity_and_two_route_agreement() {
        let cfg = ModelConfig {
            n_context: 4,
            ..Default::default()
        };
        let mut m = IclModel::init(cfg, 47).unwrap();
        let d = cfg.d_model;

        // Identity value/output projections: the head's OV circuit is the
        // identity restricted to its subspace.
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        m.layers[0].attn_v.value = eye.clone();
        m.layers[0].attn_o.value = eye;
        let ov = m.ov_matrix(0, 1).unwrap();
        let dh = d / cfg.n_heads;
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j && (dh..2 * dh).contains(&i) { 1.0 } else { 0.0 };
                assert_eq!(ov.data()[i * d + j], expect, "at ({i},{j})");
            }
        }

        // Random weights: slice product must equal the masked full product.
        let m = IclModel::init(cfg, 53).unwrap();
        for head in 0..cfg.n_heads {
            let ov = m.ov_matrix(1, head).unwrap();
            let wv = &m.layers[1].attn_v.value;
            let mut wo_masked = m.layers[1].attn_o.value.clone();
            for r in 0..d {
                if !(head * dh..(head + 1) * dh).contains(&r) {
                    for c in 0..d {
                        wo_masked.data_mut()[r * d + c] = 0.0;
                    }
                }
            }
            let full = wv.matmul(&wo_masked).unwrap();
            assert!(
                ov.max_abs_diff(&full) < 1e-12,
                "head {head}: slice and masked-product routes disagree"
            );
        }

        assert!(matches!(
            m.ov_matrix(2, 0),
            Err(ModelError::HeadOutOfRange { .. })
        ));
        assert!(matches!(
            m.ov_matrix(0, 4),
            Err(ModelError::HeadOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            n_context: 8,
            variant: Variant::FrozenQk,
            ..Default::default()
        };
        let m = IclModel::init(cfg, 59).unwrap();
        let dir = std::env::temp_dir().join(format!("icl-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        m.save_checkpoint(&path, 59, 1234).unwrap();
        let (loaded, seed, step) = IclModel::load_checkpoint(&path).unwrap();
        assert_eq!(seed, 59);
        assert_eq!(step, 1234);
        assert_eq!(loaded.config, m.config);
        for ((na, pa), (_, pb)) in m.named_params().iter().zip(loaded.named_params().iter()) {
            let ba: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "param {na} not bit-identical");
            assert_eq!(pa.trainable, pb.trainable);
        }
        // The episode-level forward must agree bitwise too.
        let ep = episode(61, 8);
        assert_eq!(
            m.forward(&ep).unwrap().to_bits(),
            loaded.forward(&ep).unwrap().to_bits()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn small_model_passes_grad_check() {
        use crate::numerics::grad_check;
        use rand::SeedableRng;

        let cfg = ModelConfig {
            d_x: 6,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            n_context: 5,
            variant: Variant::Regular,
            label_mode: LabelMode::Bound,
        };
        let m = IclModel::init(cfg, 67).unwrap();
        let mut rng = TaskRng::new(71);
        let params = sample_params(TaskFamily::MeanShift, 6, 3.0, &mut rng).unwrap();
        let eps: Vec<Episode> = (0..2)
            .map(|_| generate_episode(&params, 5, &mut rng).unwrap())
            .collect();
        let targets: Vec<f64> = eps.iter().map(|e| e.query_y as f64).collect();

        let mut leaves: Vec<Param> = m.params().into_iter().cloned().collect();
        let mut check_rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let err = grad_check(
            &mut leaves,
            |g, ids| {
                // forward_graph reads weights from the graph leaves, so the
                // perturbed values flow through automatically.
                let (logits, _) = m.forward_graph(g, ids, &eps).map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    other => panic!("unexpected model error: {other}"),
                })?;
                g.bce_mean(logits, &targets)
            },
            1e-5,
            40,
            &mut check_rng,
        )
        .unwrap();
        assert!(err < 1e-4, "full model grad check err = {err}");
    }
}
