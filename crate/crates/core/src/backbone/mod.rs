//! The frozen sequence model that hosts LoRA adapters.
//!
//! Token and position embeddings feed pre-norm single-head attention
//! blocks with a SiLU feed-forward. Two heads read the final hidden states:
//! a next-token LM head (used for perplexity) and a classification head over
//! mean-pooled states.

mod data;
mod pretrain;

pub use data::{Batch, Example, TaskDataset};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::AdapterWeights;
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

/// Which final hidden states feed the classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over all positions.
    Mean,
    /// The last position, which attends to the whole sequence.
    #[default]
    Last,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { vocab_size: 128, embed_dim: 32, num_blocks: 2, ffn_dim: 128, max_seq_len: 16, num_classes: 4, pooling: Pooling::default() }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab_size, self.embed_dim, self.num_blocks, self.ffn_dim, self.max_seq_len];
        if positive.contains(&0) || self.num_classes < 2 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        Ok(())
    }
}

/// A projection inside an attention block that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }

    fn slot(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
            Projection::Output => 3,
            Projection::FfnUp => 4,
            Projection::FfnDown => 6,
        }
    }

    pub fn parse(s: &str) -> Option<Projection> {
        [Projection::Query, Projection::Key, Projection::Value, Projection::Output, Projection::FfnUp, Projection::FfnDown]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// `(block, projection)` naming one injectable weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub block: usize,
    pub projection: Projection,
}

impl InjectionPoint {
    pub fn new(block: usize, projection: Projection) -> Self {
        InjectionPoint { block, projection }
    }

    pub fn name(&self) -> String {
        format!("block{}.{}", self.block, self.projection.name())
    }

    pub fn parse(s: &str) -> Option<InjectionPoint> {
        let (b, p) = s.strip_prefix("block")?.split_once('.')?;
        Some(InjectionPoint { block: b.parse().ok()?, projection: Projection::parse(p)? })
    }
}

const PER_BLOCK: usize = 8;

/// Backbone weights. Projection matrices are stored `[out × in]` so a
/// projection of row-vector activations is `x · W0ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    weights: Vec<Tensor>,
    frozen: bool,
}

/// Output of a forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    /// `[count · seq_len × vocab]` next-token logits.
    pub lm: Tensor,
    /// `[count × classes]` classification logits.
    pub class: Tensor,
}

/// Adapter matrices registered on a tape.
pub(crate) struct AdapterVars {
    pub entries: Vec<(InjectionPoint, Var, Var)>,
    pub scale: f64,
}

impl BackboneModel {
    /// Randomly initialized, unfrozen model.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut g = rng::stream(seed, "backbone-init");
        let mut weights = Vec::new();
        let BackboneConfig { vocab_size: v, embed_dim: d, ffn_dim: f, max_seq_len: t, num_classes: c, .. } = config;
        let mut normal = |r: usize, k: usize, std: f64| Tensor::raw(vec![r, k], rng::normal_vec(&mut g, r * k, std));
        weights.push(normal(v, d, 0.5));
        weights.push(normal(t, d, 0.1));
        let proj = 1.0 / (d as f64).sqrt();
        for _ in 0..config.num_blocks {
            for _ in 0..4 {
                weights.push(normal(d, d, proj));
            }
            weights.push(normal(f, d, proj));
            weights.push(Tensor::zeros(1, f));
            weights.push(normal(d, f, 1.0 / (f as f64).sqrt()));
            weights.push(Tensor::zeros(1, d));
        }
        weights.push(normal(v, d, proj));
        weights.push(Tensor::zeros(1, v));
        weights.push(normal(c, d, proj));
        weights.push(Tensor::zeros(1, c));
        Ok(BackboneModel { config, weights, frozen: false })
    }

    /// Rebuilds a model from named weights in [`BackboneModel::names`] order.
    pub fn from_weights(config: BackboneConfig, weights: Vec<Tensor>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let template = BackboneModel::init(config.clone(), 0)?;
        if template.weights.len() != weights.len() {
            return Err(Error::Layout(format!("expected {} weight tensors, got {}", template.weights.len(), weights.len())));
        }
        for (name, (want, got)) in template.names().iter().zip(template.weights.iter().zip(&weights)) {
            if want.dims() != got.dims() {
                return Err(Error::Layout(format!("{name}: expected {:?}, got {:?}", want.shape(), got.shape())));
            }
        }
        Ok(BackboneModel { config, weights, frozen })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Mutable weights, only while unfrozen.
    pub fn weights_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(Error::Invariant("attempted to modify a frozen backbone".into()));
        }
        Ok(&mut self.weights)
    }

    /// Marks the model frozen, first rounding weights to `f32` so the
    /// persisted form is exact.
    pub fn freeze(&mut self) {
        for w in &mut self.weights {
            w.round_to_f32();
        }
        self.frozen = true;
    }

    /// An unfrozen copy, for full fine-tuning baselines.
    pub fn thawed(&self) -> BackboneModel {
        BackboneModel { frozen: false, ..self.clone() }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for b in 0..self.config.num_blocks {
            for n in ["query", "key", "value", "output", "ffn_up", "ffn_up_bias", "ffn_down", "ffn_down_bias"] {
                names.push(format!("block{b}.{n}"));
            }
        }
        names.extend(["lm_head", "lm_bias", "cls_head", "cls_bias"].map(String::from));
        names
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// `(d, k)`: output and input width of an injectable projection.
    pub fn injection_shape(&self, point: InjectionPoint) -> Result<(usize, usize)> {
        if point.block >= self.config.num_blocks {
            return Err(Error::Config(format!("no block {} in a {}-block backbone", point.block, self.config.num_blocks)));
        }
        Ok(self.weights[2 + PER_BLOCK * point.block + point.projection.slot()].dims())
    }

    /// SHA-256 over names, shapes, and exact weight bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, w) in self.names().iter().zip(&self.weights) {
            h.update(name.as_bytes());
            for &s in w.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in w.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len > self.config.max_seq_len {
            return Err(Error::shape("forward", format!("sequence length {seq_len} exceeds {}", self.config.max_seq_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfVocab { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Registers the weights on `tape`, trainable only when requested.
    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights.iter().map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) }).collect()
    }

    /// Builds the forward graph. `w` must come from [`BackboneModel::register`].
    pub(crate) fn forward_tape(&self, tape: &mut Tape, w: &[Var], adapter: Option<&AdapterVars>, batch: &Batch) -> Result<(Var, Var)> {
        self.check_tokens(&batch.tokens, batch.seq_len)?;
        let (t, n) = (batch.seq_len, batch.count);
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(w[0], &batch.tokens)?;
        let pos = tape.embedding(w[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let project = |tape: &mut Tape, h: Var, block: usize, proj: Projection| -> Result<Var> {
            let base = tape.matmul_nt(h, w[2 + PER_BLOCK * block + proj.slot()])?;
            let Some(ad) = adapter else { return Ok(base) };
            let point = InjectionPoint::new(block, proj);
            match ad.entries.iter().find(|(p, _, _)| *p == point) {
                Some(&(_, a, b)) => {
                    let low = tape.matmul_nt(h, a)?;
                    let delta = tape.matmul_nt(low, b)?;
                    let delta = if ad.scale == 1.0 { delta } else { tape.scale(delta, ad.scale)? };
                    tape.add(base, delta)
                }
                None => Ok(base),
            }
        };

        for b in 0..self.config.num_blocks {
            let base = 2 + PER_BLOCK * b;
            let h = tape.rms_norm(x)?;
            let q = project(tape, h, b, Projection::Query)?;
            let k = project(tape, h, b, Projection::Key)?;
            let v = project(tape, h, b, Projection::Value)?;
            let att = tape.causal_attention(q, k, v, t)?;
            let o = project(tape, att, b, Projection::Output)?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x)?;
            let up = project(tape, h, b, Projection::FfnUp)?;
            let up = tape.add_row(up, w[base + 5])?;
            let act = tape.silu(up)?;
            let down = project(tape, act, b, Projection::FfnDown)?;
            let down = tape.add_row(down, w[base + 7])?;
            x = tape.add(x, down)?;
        }
        let head = 2 + PER_BLOCK * self.config.num_blocks;
        let hf = tape.rms_norm(x)?;
        let lm = tape.matmul_nt(hf, w[head])?;
        let lm = tape.add_row(lm, w[head + 1])?;
        let pool = match self.config.pooling {
            Pooling::Mean => Tensor::from_fn(n, n * t, |i, j| if j / t == i { 1.0 / t as f64 } else { 0.0 }),
            Pooling::Last => Tensor::from_fn(n, n * t, |i, j| if j == i * t + t - 1 { 1.0 } else { 0.0 }),
        };
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, hf)?;
        let cls = tape.matmul_nt(pooled, w[head + 2])?;
        let cls = tape.add_row(cls, w[head + 3])?;
        Ok((lm, cls))
    }

    /// Mean-pooled final hidden states `[count × d]`, the classification
    /// head's input.
    pub fn pooled_features(&self, batch: &Batch) -> Result<Tensor> {
        pooled_from_tape(self, batch)
    }

    pub fn forward_batch(&self, adapter: Option<&AdapterWeights>, batch: &Batch) -> Result<Logits> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, false);
        let ad = match adapter {
            Some(a) => Some(a.register(&mut tape, self, false)?),
            None => None,
        };
        let (lm, cls) = self.forward_tape(&mut tape, &w, ad.as_ref(), batch)?;
        Ok(Logits { lm: tape.value(lm).clone(), class: tape.value(cls).clone() })
    }

    /// Logits for one token sequence.
    pub fn forward(&self, adapter: Option<&AdapterWeights>, tokens: &[usize]) -> Result<Logits> {
        self.forward_batch(adapter, &Batch::sequence(tokens)?)
    }

    /// Class predictions for `examples`, evaluated in chunks.
    pub fn predict(&self, adapter: Option<&AdapterWeights>, examples: &[Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let logits = self.forward_batch(adapter, &Batch::new(chunk)?)?;
            out.extend((0..chunk.len()).map(|i| argmax(logits.class.row_slice(i))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, adapter: Option<&AdapterWeights>, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(adapter, examples)?;
        let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
        Ok(correct as f64 / examples.len() as f64)
    }
}

impl BackboneModel {
    /// Finite-difference audit of the task loss's gradient with respect to
    /// the backbone weights, on `coords` random coordinates.
    pub fn check_loss_gradients(
        &self,
        adapter: Option<&AdapterWeights>,
        batch: &Batch,
        lm_weight: f64,
        coords: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        check_gradients(
            &self.weights,
            |tape, w| {
                let ad = match adapter {
                    Some(a) => Some(a.register(tape, self, false)?),
                    None => None,
                };
                task_loss(self, tape, w, ad.as_ref(), batch, lm_weight)
            },
            coords,
            1e-5,
            seed,
        )
    }
}

fn pooled_from_tape(model: &BackboneModel, batch: &Batch) -> Result<Tensor> {
    // Same graph as `forward_tape` up to the pooled state, with a unit
    // classification head so the class logits equal the pooled features.
    let d = model.config.embed_dim;
    let mut probe = model.clone();
    let head = 2 + PER_BLOCK * model.config.num_blocks;
    probe.weights[head + 2] = Tensor::eye(d);
    probe.weights[head + 3] = Tensor::zeros(1, d);
    probe.config.num_classes = d;
    let mut tape = Tape::new();
    let w = probe.register(&mut tape, false);
    let (_, cls) = probe.forward_tape(&mut tape, &w, None, batch)?;
    Ok(tape.value(cls).clone())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss used for every form of task training: classification cross-entropy
/// plus `lm_weight` times next-token cross-entropy on the inputs.
pub(crate) fn task_loss(
    model: &BackboneModel,
    tape: &mut Tape,
    w: &[Var],
    adapter: Option<&AdapterVars>,
    batch: &Batch,
    lm_weight: f64,
) -> Result<Var> {
    let (lm, cls) = model.forward_tape(tape, w, adapter, batch)?;
    let cls_loss = tape.softmax_xent(cls, &batch.labels)?;
    if lm_weight == 0.0 || batch.seq_len < 2 {
        return Ok(cls_loss);
    }
    let (rows, targets) = batch.lm_targets();
    let picked = tape.embedding(lm, &rows)?;
    let lm_loss = tape.softmax_xent(picked, &targets)?;
    let lm_loss = tape.scale(lm_loss, lm_weight)?;
    tape.add(cls_loss, lm_loss)
}

const BACKBONE_MAGIC: &[u8; 4] = b"COLA";
const BACKBONE_VERSION: u16 = 1;
const BACKBONE_KIND: &str = "backbone";

impl BackboneModel {
    /// Binary form: magic `COLA`, `u16` version, the kind string
    /// `"backbone"`, the config as JSON, a frozen flag, then each weight as
    /// name, rows, cols and an `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = crate::codec::ByteWriter::new();
        w.bytes(BACKBONE_MAGIC);
        w.u16(BACKBONE_VERSION);
        w.str(BACKBONE_KIND);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.u8(self.frozen as u8);
        w.u32(self.weights.len() as u32);
        for (name, t) in self.names().iter().zip(&self.weights) {
            w.str(name);
            w.u32(t.rows() as u32);
            w.u32(t.cols() as u32);
            w.f32_slice(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BackboneModel> {
        let mut r = crate::codec::ByteReader::new(bytes);
        r.magic(BACKBONE_MAGIC)?;
        let version = r.u16()?;
        if version != BACKBONE_VERSION {
            return Err(Error::Format(format!("unsupported backbone version {version}")));
        }
        let kind = r.str()?;
        if kind != BACKBONE_KIND {
            return Err(Error::Format(format!("expected a backbone file, found {kind:?}")));
        }
        let config: BackboneConfig = serde_json::from_str(&r.str()?)?;
        let frozen = r.u8()? != 0;
        let n = r.u32()? as usize;
        let mut weights = Vec::with_capacity(n.min(1 << 12));
        let mut names = Vec::with_capacity(n.min(1 << 12));
        for _ in 0..n {
            names.push(r.str()?);
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            weights.push(Tensor::matrix(rows, cols, r.f32_vec(rows * cols)?)?);
        }
        r.expect_done()?;
        let model = BackboneModel::from_weights(config, weights, frozen)?;
        if model.names() != names {
            return Err(Error::Format("weight names do not match the configured architecture".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<BackboneModel> {
        BackboneModel::from_bytes(&std::fs::read(path)?)
    }
}
