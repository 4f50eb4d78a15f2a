//! Contractive autoencoder over flattened adapter snapshots.
//!
//! Inputs are standardized per coordinate with statistics of the training
//! population. The encoder maps a standardized snapshot to an `m`-wide code,
//! the decoder maps it back, and reconstructions are compared to the
//! original snapshot by cosine similarity in the original coordinates.
//!
//! With `chunk_width = Some(w)` a snapshot is split into `L / w` chunks that
//! share one autoencoder; the code is the concatenation of chunk codes in
//! chunk order.

mod train;

pub use train::{train_cae, train_cae_observed, CaeReport};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::lora::{AdapterSnapshot, SnapshotLayout};
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::numerics::{cosine_similarity, gemm, sigmoid, AdamConfig, Tape, Tensor, Var};
use crate::rng;

pub const CAE_MAGIC: &[u8; 4] = b"COLA";
const CAE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Format(format!("unknown activation {other:?}"))),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn slope_on_tape(self, tape: &mut Tape, y: Var) -> Result<Var> {
        match self {
            Activation::Identity => {
                let (r, c) = tape.value(y).dims();
                Ok(tape.constant(Tensor::filled(r, c, 1.0)))
            }
            Activation::Tanh => {
                let sq = tape.square(y)?;
                let neg = tape.scale(sq, -1.0)?;
                tape.shift(neg, 1.0)
            }
            Activation::Sigmoid => {
                let sq = tape.square(y)?;
                tape.sub(y, sq)
            }
        }
    }
}

/// Fully connected layer `y = act(x Wᵀ + b)` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl Dense {
    fn init(out: usize, inp: usize, activation: Activation, g: &mut rng::Rng) -> Dense {
        let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("valid std");
        Dense {
            w: Tensor::from_fn(out, inp, |_, _| normal.sample(g)),
            b: Tensor::zeros(1, out),
            activation,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = gemm(x, false, &self.w, true).expect("dense shapes");
        let (r, c) = y.dims();
        let b = self.b.data();
        let a = self.activation;
        let d = y.data_mut();
        for i in 0..r {
            for j in 0..c {
                d[i * c + j] = a.apply(d[i * c + j] + b[j]);
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn input_width(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty mlp").w.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.layers[0].forward(x);
        for l in &self.layers[1..] {
            h = l.forward(&h);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.str(l.activation.name());
            w.u32(l.w.rows() as u32);
            w.u32(l.w.cols() as u32);
            w.f32_slice(l.w.data());
            w.f32_slice(l.b.data());
        }
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Mlp> {
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format("network without layers".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let activation = Activation::parse(&r.str()?)?;
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let w = Tensor::matrix(out, inp, r.f32_vec(out * inp)?)?;
            let b = Tensor::matrix(1, out, r.f32_vec(out)?)?;
            if let Some(prev) = layers.last().map(|l: &Dense| l.w.rows()) {
                if prev != inp {
                    return Err(Error::Format(format!("layer widths {prev} and {inp} do not chain")));
                }
            }
            layers.push(Dense { w, b, activation });
        }
        Ok(Mlp { layers })
    }
}

/// How snapshots are standardized before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardize {
    /// Per-coordinate mean and standard deviation.
    PerCoordinate,
    /// Per-coordinate mean, one shared standard deviation.
    Centered,
    /// Zero mean, one shared standard deviation.
    Scaled,
}

/// Standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Normalizer {
        Normalizer { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Population statistics; deviations below `1e-12` are replaced by one.
    pub fn fit(rows: &[&[f64]], mode: Standardize) -> Result<Normalizer> {
        let first = rows.first().ok_or(Error::Empty("normalization population"))?;
        let l = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; l];
        for r in rows {
            if r.len() != l {
                return Err(Error::shape("normalizer", format!("widths {l} and {}", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; l];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        match mode {
            Standardize::PerCoordinate => {}
            Standardize::Centered => {
                let pooled = std.iter().sum::<f64>() / l as f64;
                std.iter_mut().for_each(|s| *s = pooled);
            }
            Standardize::Scaled => {
                let pooled = rows.iter().flat_map(|r| r.iter()).map(|v| v * v).sum::<f64>() / (n * l as f64);
                std.iter_mut().for_each(|s| *s = pooled);
                mean.iter_mut().for_each(|m| *m = 0.0);
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Normalizer { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.u32(self.mean.len() as u32);
        w.f32_slice(&self.mean);
        w.f32_slice(&self.std);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Normalizer> {
        let n = r.u32()? as usize;
        let mean = r.f32_vec(n)?;
        let std = r.f32_vec(n)?;
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("non-positive normalization scale".into()));
        }
        Ok(Normalizer { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaeConfig {
    pub latent_dim: usize,
    /// Hidden width of encoder and decoder; 0 gives single-layer maps.
    pub hidden: usize,
    pub hidden_activation: Activation,
    /// Output activation of the encoder. Must be `identity` unless
    /// `hidden == 0`.
    pub latent_activation: Activation,
    pub lambda: f64,
    /// Weight of the norm-matching term `(‖θ̂‖ / ‖θ‖ − 1)²`. Cosine is blind
    /// to scale, and a rescaled adapter is a different function.
    pub magnitude_weight: f64,
    /// Score every stored code must reach.
    pub threshold: f64,
    /// Training keeps going until this score when set. Decoded adapters
    /// can lose accuracy even just above `threshold`.
    pub stop_score: Option<f64>,
    pub max_steps: usize,
    /// Steps between reconstruction checks.
    pub check_every: usize,
    pub adam: AdamConfig,
    pub chunk_width: Option<usize>,
    pub standardize: Standardize,
    pub seed: u64,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            latent_dim: 50,
            hidden: 256,
            hidden_activation: Activation::Tanh,
            latent_activation: Activation::Identity,
            lambda: 1e-4,
            magnitude_weight: 1.0,
            threshold: 0.99,
            stop_score: None,
            max_steps: 4000,
            check_every: 20,
            adam: AdamConfig::with_lr(1e-3),
            chunk_width: None,
            standardize: Standardize::PerCoordinate,
            seed: 0,
        }
    }
}

impl CaeConfig {
    fn validate(&self, input_width: usize) -> Result<()> {
        let w = self.chunk_width.unwrap_or(input_width);
        if w == 0 || input_width % w != 0 {
            return Err(Error::Config(format!("chunk width {w} does not divide snapshot width {input_width}")));
        }
        if self.latent_dim == 0 || self.latent_dim * 4 > w {
            return Err(Error::Config(format!("latent width {} must be positive and at most {w}/4", self.latent_dim)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("contractive coefficient must be positive, got {}", self.lambda)));
        }
        if !(self.magnitude_weight >= 0.0) {
            return Err(Error::Config(format!("magnitude weight must be non-negative, got {}", self.magnitude_weight)));
        }
        if self.hidden > 0 && self.latent_activation != Activation::Identity {
            return Err(Error::Config("a nonlinear latent layer needs hidden = 0".into()));
        }
        if self.check_every == 0 {
            return Err(Error::Config("check_every must be positive".into()));
        }
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (-1, 1]", self.threshold)));
        }
        if let Some(s) = self.stop_score {
            if !(s >= self.threshold && s <= 1.0) {
                return Err(Error::Config(format!("stop score {s} must lie in [threshold, 1]")));
            }
        }
        Ok(())
    }

    /// Score at which training stops.
    pub fn stop_at(&self) -> f64 {
        self.stop_score.unwrap_or(self.threshold).max(self.threshold)
    }
}

/// Latent record of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub task_id: String,
    pub z: Vec<f64>,
    /// Cosine similarity between the original and its reconstruction,
    /// measured when the code was produced. Not persisted per code, so
    /// `None` after loading a store.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaeModel {
    pub config: CaeConfig,
    input_width: usize,
    encoder: Option<Mlp>,
    decoder: Mlp,
    norm: Normalizer,
}

impl CaeModel {
    /// Fresh model for snapshots of width `input_width`.
    pub fn new(config: CaeConfig, input_width: usize) -> Result<CaeModel> {
        config.validate(input_width)?;
        let w = config.chunk_width.unwrap_or(input_width);
        let (m, h) = (config.latent_dim, config.hidden);
        let mut g = rng::stream(config.seed, "cae-init");
        let (encoder, decoder) = if h == 0 {
            (
                vec![Dense::init(m, w, config.latent_activation, &mut g)],
                vec![Dense::init(w, m, Activation::Identity, &mut g)],
            )
        } else {
            (
                vec![Dense::init(h, w, config.hidden_activation, &mut g), Dense::init(m, h, Activation::Identity, &mut g)],
                vec![Dense::init(h, m, config.hidden_activation, &mut g), Dense::init(w, h, Activation::Identity, &mut g)],
            )
        };
        Ok(CaeModel {
            config,
            input_width,
            encoder: Some(Mlp { layers: encoder }),
            decoder: Mlp { layers: decoder },
            norm: Normalizer::identity(input_width),
        })
    }

    /// Model with explicit networks, e.g. to probe the penalty of a
    /// hand-built encoder.
    pub fn from_parts(config: CaeConfig, encoder: Option<Mlp>, decoder: Mlp, norm: Normalizer) -> Result<CaeModel> {
        let input_width = norm.width();
        config.validate(input_width)?;
        let w = config.chunk_width.unwrap_or(input_width);
        if let Some(e) = &encoder {
            if e.input_width() != w || e.output_width() != config.latent_dim {
                return Err(Error::shape("cae encoder", format!("{} -> {}", e.input_width(), e.output_width())));
            }
            if e.layers.len() > 2 || (e.layers.len() == 2 && e.layers[1].activation != Activation::Identity) {
                return Err(Error::Config("encoder must be one layer, or two with a linear top".into()));
            }
        }
        if decoder.input_width() != config.latent_dim || decoder.output_width() != w {
            return Err(Error::shape("cae decoder", format!("{} -> {}", decoder.input_width(), decoder.output_width())));
        }
        Ok(CaeModel { config, input_width, encoder, decoder, norm })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    fn chunk(&self) -> usize {
        self.config.chunk_width.unwrap_or(self.input_width)
    }

    fn chunks(&self) -> usize {
        self.input_width / self.chunk()
    }

    /// Length of a stored code: latent width times chunk count.
    pub fn code_len(&self) -> usize {
        self.chunks() * self.config.latent_dim
    }

    pub fn encoder(&self) -> Option<&Mlp> {
        self.encoder.as_ref()
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn encoder_retained(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn discard_encoder(&mut self) {
        self.encoder = None;
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width {
            return Err(Error::shape("cae input", format!("expected width {}, got {}", self.input_width, x.len())));
        }
        Ok(())
    }

    /// Code of a flat snapshot.
    pub fn encode_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let enc = self.encoder.as_ref().ok_or(Error::EncoderDiscarded)?;
        let xs = Tensor::raw(vec![self.chunks(), self.chunk()], self.norm.apply(x));
        Ok(enc.forward(&xs).into_data())
    }

    /// Flat reconstruction of a code, in original coordinates.
    pub fn decode_flat(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.code_len() {
            return Err(Error::shape("cae code", format!("expected width {}, got {}", self.code_len(), z.len())));
        }
        let zs = Tensor::raw(vec![self.chunks(), self.config.latent_dim], z.to_vec());
        Ok(self.norm.invert(self.decoder.forward(&zs).data()))
    }

    /// Cosine between `x` and the reconstruction of its f32-rounded code.
    pub fn reconstruction_score(&self, x: &[f64]) -> Result<f64> {
        let z = round_vec(self.encode_flat(x)?);
        cosine_similarity(x, &self.decode_flat(&z)?)
    }

    /// Encodes a snapshot, recording its reconstruction score. The code is
    /// rounded to f32 so it survives persistence unchanged.
    pub fn encode(&self, snapshot: &AdapterSnapshot) -> Result<LatentCode> {
        let z = round_vec(self.encode_flat(&snapshot.flat)?);
        let score = cosine_similarity(&snapshot.flat, &self.decode_flat(&z)?)?;
        Ok(LatentCode { task_id: snapshot.task_id.clone(), z, score: Some(score) })
    }

    pub fn decode(&self, code: &LatentCode, layout: &SnapshotLayout) -> Result<AdapterSnapshot> {
        let flat = self.decode_flat(&code.z)?;
        if layout.len() != flat.len() {
            return Err(Error::Layout(format!("layout covers {} values, decoder yields {}", layout.len(), flat.len())));
        }
        Ok(AdapterSnapshot { task_id: code.task_id.clone(), flat, layout: layout.clone() })
    }

    /// Squared Frobenius norm of the encoder Jacobian, taken with respect
    /// to the standardized input and summed over chunks.
    pub fn contractive_penalty(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xs = tape.constant(Tensor::raw(vec![self.chunks(), self.chunk()], self.norm.apply(x)));
        let (_, pen) = self.encode_tape(&mut tape, &vars, xs, true)?;
        tape.value(pen.expect("penalty requested")).item()
    }

    /// Mean over the batch of
    /// `1 − cos(θ, θ̂) + μ·(‖θ̂‖/‖θ‖ − 1)² + λ·penalty(θ)` with `μ` the
    /// configured magnitude weight.
    pub fn loss(&self, batch: &[&[f64]]) -> Result<f64> {
        self.loss_with(batch, self.config.lambda)
    }

    /// [`CaeModel::loss`] with an explicit contractive coefficient.
    pub fn loss_with(&self, batch: &[&[f64]], lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let loss = self.loss_tape(&mut tape, &vars, batch, lambda)?;
        tape.value(loss).item()
    }

    /// Copy with every stored number rounded to f32.
    pub fn rounded(&self) -> CaeModel {
        let mut m = self.clone();
        if let Some(e) = m.encoder.as_mut() {
            e.round_to_f32();
        }
        m.decoder.round_to_f32();
        m.norm.round_to_f32();
        m
    }

    /// Finite-difference audit of the training loss, contractive term
    /// included, with respect to every encoder and decoder weight.
    pub fn check_loss_gradients(&self, batch: &[&[f64]], lambda: f64, coords: usize, seed: u64) -> Result<GradCheckReport> {
        if self.encoder.is_none() {
            return Err(Error::EncoderDiscarded);
        }
        let params: Vec<Tensor> = self.params().into_iter().cloned().collect();
        check_gradients(&params, |tape, vars| self.loss_tape(tape, vars, batch, lambda), coords, 1e-5, seed)
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.as_ref().map(Mlp::tensors).unwrap_or_default();
        p.extend(self.decoder.tensors());
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.as_mut().map(Mlp::tensors_mut).unwrap_or_default();
        p.extend(self.decoder.tensors_mut());
        p
    }

    pub(crate) fn set_normalizer(&mut self, norm: Normalizer) {
        self.norm = norm;
    }

    /// Registers encoder then decoder parameters, each layer as `(W, b)`.
    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        if self.encoder.is_none() {
            return Err(Error::EncoderDiscarded);
        }
        Ok(self
            .params()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect())
    }

    fn layer_tape(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let pre = tape.matmul_nt(x, w)?;
        let pre = tape.add_row(pre, b)?;
        act.on_tape(tape, pre)
    }

    /// Codes `[rows × m]` of standardized chunk rows and, if asked, the
    /// summed contractive penalty over those rows.
    fn encode_tape(&self, tape: &mut Tape, vars: &[Var], xs: Var, penalty: bool) -> Result<(Var, Option<Var>)> {
        let enc = self.encoder.as_ref().ok_or(Error::EncoderDiscarded)?;
        let mut h = xs;
        let mut outs = Vec::new();
        for (i, l) in enc.layers.iter().enumerate() {
            h = Self::layer_tape(tape, h, vars[2 * i], vars[2 * i + 1], l.activation)?;
            outs.push(h);
        }
        if !penalty {
            return Ok((h, None));
        }
        let w1 = vars[0];
        let s = enc.layers[0].activation.slope_on_tape(tape, outs[0])?;
        let pen = if enc.layers.len() == 1 {
            // J = diag(s) W1, so ‖J‖² = Σ_j s_j² ‖W1_j‖².
            let wsq = tape.square(w1)?;
            let row_norms = tape.sum_cols(wsq)?;
            let s2 = tape.square(s)?;
            let per = tape.matmul(s2, row_norms)?;
            tape.sum(per)?
        } else {
            // J = W2 diag(s) W1, so ‖J‖² = sᵀ ((W2ᵀW2) ⊙ (W1W1ᵀ)) s.
            let w2 = vars[2];
            let upper = tape.matmul_tn(w2, w2)?;
            let lower = tape.matmul_nt(w1, w1)?;
            let p = tape.mul(upper, lower)?;
            let sp = tape.matmul(s, p)?;
            let quad = tape.mul(sp, s)?;
            tape.sum(quad)?
        };
        Ok((h, Some(pen)))
    }

    pub(crate) fn loss_tape(&self, tape: &mut Tape, vars: &[Var], batch: &[&[f64]], lambda: f64) -> Result<Var> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Empty("cae batch"));
        }
        let (l, w, c) = (self.input_width, self.chunk(), self.chunks());
        let mut orig = Vec::with_capacity(n * l);
        let mut std_in = Vec::with_capacity(n * l);
        let mut norms = Vec::with_capacity(n);
        for x in batch {
            self.check_width(x)?;
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 {
                return Err(Error::ZeroNorm("cae batch snapshot"));
            }
            norms.push(nx);
            orig.extend_from_slice(x);
            std_in.extend(self.norm.apply(x));
        }
        let xs = tape.constant(Tensor::raw(vec![n * c, w], std_in));
        let (z, pen) = self.encode_tape(tape, vars, xs, lambda != 0.0)?;
        let n_enc = 2 * self.encoder.as_ref().expect("checked by encode_tape").layers.len();
        let mut y = z;
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            y = Self::layer_tape(tape, y, vars[n_enc + 2 * i], vars[n_enc + 2 * i + 1], layer.activation)?;
        }
        let y = tape.reshape(y, n, l)?;
        let sigma = tape.constant(Tensor::raw(vec![1, l], self.norm.std.clone()));
        let mu = tape.constant(Tensor::raw(vec![1, l], self.norm.mean.clone()));
        let scaled = tape.mul_row(y, sigma)?;
        let recon = tape.add_row(scaled, mu)?;
        let theta = tape.constant(Tensor::raw(vec![n, l], orig));
        let prod = tape.mul(theta, recon)?;
        let dots = tape.sum_cols(prod)?;
        let sq = tape.square(recon)?;
        let rsq = tape.sum_cols(sq)?;
        let rnorm = tape.sqrt(rsq)?;
        let tnorm = tape.constant(Tensor::raw(vec![n, 1], norms));
        let denom = tape.mul(rnorm, tnorm)?;
        let cos = tape.div(dots, denom)?;
        let mean_cos = tape.mean(cos)?;
        let neg = tape.scale(mean_cos, -1.0)?;
        let mut recon_loss = tape.shift(neg, 1.0)?;
        if self.config.magnitude_weight > 0.0 {
            let ratio = tape.div(rnorm, tnorm)?;
            let dev = tape.shift(ratio, -1.0)?;
            let sq = tape.square(dev)?;
            let m = tape.mean(sq)?;
            let m = tape.scale(m, self.config.magnitude_weight)?;
            recon_loss = tape.add(recon_loss, m)?;
        }
        match pen {
            Some(p) => {
                let p = tape.scale(p, lambda / n as f64)?;
                tape.add(recon_loss, p)
            }
            None => Ok(recon_loss),
        }
    }

    /// Serialized form: magic, version, then `CFG`, optional `ENC`, `DEC`
    /// and `NRM` sections. Parameters are written as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CAE_MAGIC);
        w.u16(CAE_VERSION);
        let mut cfg = ByteWriter::new();
        cfg.u32(self.input_width as u32);
        cfg.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.section("CFG", &cfg.finish());
        if let Some(e) = &self.encoder {
            let mut s = ByteWriter::new();
            e.write(&mut s);
            w.section("ENC", &s.finish());
        }
        let mut s = ByteWriter::new();
        self.decoder.write(&mut s);
        w.section("DEC", &s.finish());
        let mut s = ByteWriter::new();
        self.norm.write(&mut s);
        w.section("NRM", &s.finish());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CaeModel> {
        let mut r = ByteReader::new(bytes);
        r.magic(CAE_MAGIC)?;
        let version = r.u16()?;
        if version != CAE_VERSION {
            return Err(Error::Format(format!("unsupported autoencoder version {version}")));
        }
        let (mut config, mut encoder, mut decoder, mut norm, mut width) = (None, None, None, None, 0);
        while let Some((tag, payload)) = r.section()? {
            let mut s = ByteReader::new(payload);
            match tag.as_str() {
                "CFG" => {
                    width = s.u32()? as usize;
                    config = Some(serde_json::from_str::<CaeConfig>(&s.str()?)?);
                }
                "ENC" => encoder = Some(Mlp::read(&mut s)?),
                "DEC" => decoder = Some(Mlp::read(&mut s)?),
                "NRM" => norm = Some(Normalizer::read(&mut s)?),
                other => return Err(Error::Format(format!("unknown autoencoder section {other:?}"))),
            }
            s.expect_done()?;
        }
        let config = config.ok_or_else(|| Error::Format("missing CFG section".into()))?;
        let decoder = decoder.ok_or_else(|| Error::Format("missing DEC section".into()))?;
        let norm = norm.ok_or_else(|| Error::Format("missing NRM section".into()))?;
        if norm.width() != width {
            return Err(Error::Format(format!("normalizer width {} for snapshots of width {width}", norm.width())));
        }
        CaeModel::from_parts(config, encoder, decoder, norm)
    }
}

pub(crate) fn round_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}
