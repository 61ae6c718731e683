//! Pre-norm decoder-only transformer with rotary, sinusoidal or no
//! positional encoding; greedy decoding and checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, RopeTable, Tape, Tensor, Var};
use crate::codec::{TokenSeq, VOCAB_SIZE};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "ckpt-1";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeKind {
    Rope,
    Sinpe,
    None,
}

impl PeKind {
    pub fn name(self) -> &'static str {
        match self {
            PeKind::Rope => "rope",
            PeKind::Sinpe => "sinpe",
            PeKind::None => "none",
        }
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rope" => Ok(PeKind::Rope),
            "sinpe" => Ok(PeKind::Sinpe),
            "none" => Ok(PeKind::None),
            _ => Err(Error::Config(format!("unknown positional encoding {s:?}"))),
        }
    }
}

/// Architecture hyperparameters. Normalisation is RMSNorm with a learned
/// gain; linear layers have no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pe_kind: PeKind,
    pub rope_base: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// d_model 64, 4 heads, 2 layers, context 512.
    pub fn desk(pe_kind: PeKind) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_mult: 4,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 512,
            pe_kind,
            rope_base: 10000.0,
            init_seed: 0,
        }
    }

    /// Hidden size 896 with 3 layers.
    pub fn paper(pe_kind: PeKind) -> Self {
        Self {
            d_model: 896,
            n_heads: 14,
            n_layers: 3,
            max_seq_len: 1024,
            ..Self::desk(pe_kind)
        }
    }

    /// A model small enough for exhaustive finite differences.
    pub fn tiny(pe_kind: PeKind) -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            ffn_mult: 2,
            max_seq_len: 32,
            ..Self::desk(pe_kind)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(2 * self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by 2·n_heads = {}",
                self.d_model,
                2 * self.n_heads
            )));
        }
        if !(1..=8).contains(&self.n_layers) {
            return Err(Error::Config(format!("n_layers {} outside 1..=8", self.n_layers)));
        }
        if self.ffn_mult == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ffn_mult, vocab_size and max_seq_len must be positive".into()));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return Err(Error::Config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_model * self.ffn_mult, self.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("w1", vec![d, f]),
                ("w2", vec![f, d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![d, v]));
        out
    }
}

const EMBED: usize = 0;
const PER_LAYER: usize = 8;

fn layer_base(l: usize) -> usize {
    1 + l * PER_LAYER
}

/// A padded batch of token rows, `[batch, seq]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn single(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            seq: tokens.len(),
        }
    }
}

/// Output of a taped forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[batch·seq, vocab]`
    pub logits: Var,
    /// Causal attention probabilities per layer, `[batch·heads, seq, seq]`.
    pub attention: Vec<Var>,
}

/// Sinusoidal table `[seq, d]` with `sin` on even and `cos` on odd columns.
pub fn sinusoidal_table(seq: usize, d: usize, offset: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq * d);
    for p in 0..seq {
        for j in 0..d {
            let i = (j / 2) as f64;
            let a = (p + offset) as f64 / 10000f64.powf(2.0 * i / d as f64);
            out.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

/// Rotate consecutive pairs of one head vector by `position · base^(−2i/d)`.
pub fn apply_rope<T: Float>(x: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    let table = RopeTable::new(1, x.len(), base, position)?;
    let mut out = x.to_vec();
    table.rotate(&mut out, 1.0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T = f32> {
    pub config: ModelConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Float> Transformer<T> {
    /// Seeded initialisation. The embedding table is N(0, 1) and frozen;
    /// projections are N(0, 1/fan_in), residual outputs further scaled by
    /// 1/sqrt(2·n_layers).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if shape.len() == 1 {
                    vec![1.0; n]
                } else {
                    let mut std = if name == "embed" { 1.0 } else { 1.0 / (shape[0] as f64).sqrt() };
                    if name.ends_with(".wo") || name.ends_with(".w2") {
                        std *= residual;
                    }
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::from_f64(&shape, &data).map(|t| t.with_grad(name != "embed"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.with_grad(i != EMBED))
            .collect();
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.params[EMBED]
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.requires_grad).map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on the tape; frozen ones get no gradient.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::Length {
                len: batch.seq,
                max: self.config.max_seq_len,
            });
        }
        if batch.tokens.len() != batch.batch * batch.seq {
            return Err(Error::Shape {
                op: "batch",
                lhs: vec![batch.batch, batch.seq],
                rhs: vec![batch.tokens.len()],
            });
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Config(format!("token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Taped forward using `vars` (as returned by [`Transformer::register`]).
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch) -> Result<Forward> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.n_heads);
        let mut x = tape.gather(vars[EMBED], &batch.tokens)?;
        if cfg.pe_kind == PeKind::Sinpe {
            let pe = Tensor::from_f64(&[s, cfg.d_model], &sinusoidal_table(s, cfg.d_model, 0))?;
            let pe = tape.constant(pe);
            let x3 = reshape_rows(tape, x, b, s, cfg.d_model)?;
            let sum = tape.add(x3, pe)?;
            x = reshape_flat(tape, sum, b * s, cfg.d_model)?;
        }
        let rope = match cfg.pe_kind {
            PeKind::Rope => Some(Arc::new(RopeTable::new(s, cfg.head_dim(), cfg.rope_base, 0)?)),
            _ => None,
        };
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = &vars[layer_base(l)..layer_base(l) + PER_LAYER];
            let hn = tape.rmsnorm(x, p[0])?;
            let q = tape.matmul(hn, p[1])?;
            let k = tape.matmul(hn, p[2])?;
            let v = tape.matmul(hn, p[3])?;
            let mut q = tape.split_heads(q, b, s, h)?;
            let mut k = tape.split_heads(k, b, s, h)?;
            let v = tape.split_heads(v, b, s, h)?;
            if let Some(table) = &rope {
                q = tape.rope(q, table.clone())?;
                k = tape.rope(k, table.clone())?;
            }
            let q = tape.scale(q, scale);
            let scores = tape.bmm_nt(q, k)?;
            let probs = tape.causal_softmax(scores)?;
            attention.push(probs);
            let o = tape.bmm(probs, v)?;
            let o = tape.merge_heads(o, b, h)?;
            let o = tape.matmul(o, p[4])?;
            x = tape.add(x, o)?;
            let hn = tape.rmsnorm(x, p[5])?;
            let f = tape.matmul(hn, p[6])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, p[7])?;
            x = tape.add(x, f)?;
        }
        let n = vars.len();
        let hn = tape.rmsnorm(x, vars[n - 2])?;
        let logits = tape.matmul(hn, vars[n - 1])?;
        Ok(Forward { logits, attention })
    }

    /// Logits `[batch·seq, vocab]` without keeping gradients.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.forward_tape(&mut tape, &vars, batch)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn decoder(&self) -> Decoder<'_, T> {
        Decoder::new(self)
    }

    /// Argmax continuation of `prompt` by `n` tokens; ties go to the
    /// smallest id.
    pub fn generate_greedy(&self, prompt: &TokenSeq, n: usize) -> Result<TokenSeq> {
        let total = prompt.len() + n;
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        if n == 0 {
            return Ok(TokenSeq::default());
        }
        if prompt.is_empty() {
            return Err(Error::Config("greedy decoding needs a non-empty prompt".into()));
        }
        let mut dec = self.decoder();
        let mut logits = Vec::new();
        for &t in prompt.ids() {
            logits = dec.step(t)?;
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < n {
                logits = dec.step(next)?;
            }
        }
        Ok(TokenSeq(out))
    }
}

fn reshape_rows<T: Float>(tape: &mut Tape<T>, x: Var, b: usize, s: usize, d: usize) -> Result<Var> {
    // split_heads with one head is a pure reshape [b·s, d] → [b, s, d].
    tape.split_heads(x, b, s, 1)
        .inspect(|v| debug_assert_eq!(tape.shape(*v), &[b, s, d]))
}

fn reshape_flat<T: Float>(tape: &mut Tape<T>, x: Var, rows: usize, d: usize) -> Result<Var> {
    let b = tape.shape(x)[0];
    tape.merge_heads(x, b, 1)
        .inspect(|v| debug_assert_eq!(tape.shape(*v), &[rows, d]))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Float>(xs: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

fn vec_mat<T: Float>(x: &[f64], w: &Tensor<T>, out: &mut [f64]) {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let xt: Vec<T> = x.iter().map(|&v| T::from_f64(v)).collect();
    out.iter_mut().for_each(|o| *o = 0.0);
    crate::autodiff::gemm(1, n, k, &xt, k, 1, w.data(), out);
}

/// Rounds through `T` so incremental results track the taped path.
fn round<T: Float>(xs: &mut [f64]) {
    for x in xs {
        *x = T::from_f64(*x).to_f64();
    }
}

fn rmsnorm_into<T: Float>(x: &[f64], g: &Tensor<T>, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    for ((o, &v), &gv) in out.iter_mut().zip(x).zip(g.data()) {
        *o = v * r * gv.to_f64();
    }
    round::<T>(out);
}

/// Incremental decoder with a key/value cache.
#[derive(Debug, Clone)]
pub struct Decoder<'a, T> {
    model: &'a Transformer<T>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a, T: Float> Decoder<'a, T> {
    pub fn new(model: &'a Transformer<T>) -> Self {
        let l = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feed one token; returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::Length {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Config(format!("token id {token} outside the vocabulary")));
        }
        let p = &self.model.params;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let mut x: Vec<f64> = p[EMBED].data()[token as usize * d..(token as usize + 1) * d]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        if cfg.pe_kind == PeKind::Sinpe {
            for (xv, pe) in x.iter_mut().zip(sinusoidal_table(1, d, self.pos)) {
                *xv += pe;
            }
            round::<T>(&mut x);
        }
        let rope = match cfg.pe_kind {
            PeKind::Rope => Some(RopeTable::new(1, dh, cfg.rope_base, self.pos)?),
            _ => None,
        };
        let scale = T::from_f64(1.0 / (dh as f64).sqrt()).to_f64();
        let f = d * cfg.ffn_mult;
        let (mut hn, mut q, mut k, mut v, mut o, mut tmp) =
            (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut ff = vec![0.0; f];
        let n = self.pos + 1;
        for l in 0..cfg.n_layers {
            let w = &p[layer_base(l)..layer_base(l) + PER_LAYER];
            rmsnorm_into(&x, &w[0], &mut hn);
            vec_mat(&hn, &w[1], &mut q);
            vec_mat(&hn, &w[2], &mut k);
            vec_mat(&hn, &w[3], &mut v);
            round::<T>(&mut q);
            round::<T>(&mut k);
            round::<T>(&mut v);
            if let Some(table) = &rope {
                table.rotate(&mut q, 1.0);
                table.rotate(&mut k, 1.0);
            }
            for qv in &mut q {
                *qv = T::from_f64(*qv * scale).to_f64();
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, vals) = (&self.keys[l], &self.values[l]);
            for head in 0..h {
                let qh = &q[head * dh..(head + 1) * dh];
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                        T::from_f64(qh.iter().zip(kj).map(|(a, b)| a * b).sum()).to_f64()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in &mut scores {
                    *s = T::from_f64((*s - mx).exp()).to_f64();
                    z += *s;
                }
                for s in &mut scores {
                    *s = T::from_f64(*s / z).to_f64();
                }
                let oh = &mut o[head * dh..(head + 1) * dh];
                oh.iter_mut().for_each(|v| *v = 0.0);
                for (j, &pj) in scores.iter().enumerate() {
                    for (ov, &vv) in oh.iter_mut().zip(&vals[j * d + head * dh..j * d + (head + 1) * dh]) {
                        *ov += pj * vv;
                    }
                }
            }
            round::<T>(&mut o);
            vec_mat(&o, &w[4], &mut tmp);
            round::<T>(&mut tmp);
            for (xv, t) in x.iter_mut().zip(&tmp) {
                *xv += t;
            }
            round::<T>(&mut x);
            rmsnorm_into(&x, &w[5], &mut hn);
            vec_mat(&hn, &w[6], &mut ff);
            for fv in &mut ff {
                let r = T::from_f64(*fv).to_f64();
                *fv = T::from_f64(crate::autodiff::gelu_f(r)).to_f64();
            }
            vec_mat(&ff, &w[7], &mut tmp);
            round::<T>(&mut tmp);
            for (xv, t) in x.iter_mut().zip(&tmp) {
                *xv += t;
            }
            round::<T>(&mut x);
        }
        let len = p.len();
        rmsnorm_into(&x, &p[len - 2], &mut hn);
        let mut logits = vec![0.0; cfg.vocab_size];
        vec_mat(&hn, &p[len - 1], &mut logits);
        self.pos += 1;
        Ok(logits.into_iter().map(T::from_f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub config: ModelConfig,
    pub step: usize,
    pub master_seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

/// A model plus its training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub step: usize,
    pub master_seed: u64,
}

impl Checkpoint {
    /// Writes `checkpoint.json` and `checkpoint.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.model.param_names().into_iter().zip(self.model.params()) {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION.to_string(),
            config: self.model.config.clone(),
            step: self.step,
            master_seed: self.master_seed,
            tensors,
            blob_bytes: blob.len(),
        };
        let bin = dir.join(CHECKPOINT_BLOB);
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&json, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format {:?} is not {CHECKPOINT_VERSION:?}",
                manifest.format_version
            )));
        }
        let bin = dir.join(CHECKPOINT_BLOB);
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if blob.len() != manifest.blob_bytes {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let expected = manifest.config.param_shapes();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint("tensor count does not match the config".into()));
        }
        let mut params = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let end = entry.offset + 4 * entry.len;
            let bytes = blob
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the blob")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            model: Transformer::from_params(manifest.config, params)?,
            step: manifest.step,
            master_seed: manifest.master_seed,
        })
    }
}
