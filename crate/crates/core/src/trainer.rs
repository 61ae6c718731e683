//! AdamW training loop with periodic ID/OOD evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::codec::{encode, BOS, PAD};
use crate::coperset::{verify_records, Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::par;
use crate::seqmodel::{argmax, Batch, Checkpoint, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossRegion {
    AnswerOnly,
    FullSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_region: LossRegion,
    /// Epochs between test-set evaluations; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Samples per split used for the per-epoch log; `None` means all.
    pub eval_limit: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Fixed number of gradient shards per batch.
    pub grad_shards: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 32, lr 1e-5, weight decay 0.01, 450 epochs.
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            epochs: 450,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_region: LossRegion::AnswerOnly,
            eval_every: 10,
            eval_limit: None,
            grad_clip: None,
            grad_shards: 4,
            seed: 0,
        }
    }

    /// Batch 32, lr 3e-4 for the 64-dim model.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 30,
            eval_every: 5,
            eval_limit: Some(200),
            grad_clip: Some(1.0),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.adam_eps];
        if rates.iter().any(|r| r.is_nan() || *r <= 0.0 || !r.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.grad_shards == 0 {
            return Err(Error::Config(
                "epochs, batch_size, eval_every and grad_shards must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `BOS + input + target` as ids, with the answer boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<u32>,
    /// Length of `BOS + input`.
    pub prompt_len: usize,
    pub p1: u32,
    pub p2: u32,
}

impl EncodedSample {
    pub fn from_record(rec: &SampleRecord) -> Result<Self> {
        let mut tokens = vec![BOS];
        tokens.extend(encode(&rec.input)?.0);
        let prompt_len = tokens.len();
        tokens.extend(encode(&rec.target)?.0);
        Ok(Self {
            tokens,
            prompt_len,
            p1: rec.p1,
            p2: rec.p2,
        })
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

pub fn encode_records(records: &[SampleRecord]) -> Result<Vec<EncodedSample>> {
    records.iter().map(EncodedSample::from_record).collect()
}

/// Inputs, next-token targets and loss mask for a padded group of samples.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub batch: Batch,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

pub fn make_loss_batch(samples: &[&EncodedSample], region: LossRegion) -> LossBatch {
    let seq = samples.iter().map(|s| s.tokens.len() - 1).max().unwrap_or(0);
    let n = samples.len() * seq;
    let (mut tokens, mut targets, mut mask) = (vec![PAD; n], vec![PAD; n], vec![false; n]);
    for (b, s) in samples.iter().enumerate() {
        let len = s.tokens.len() - 1;
        let row = b * seq;
        tokens[row..row + len].copy_from_slice(&s.tokens[..len]);
        targets[row..row + len].copy_from_slice(&s.tokens[1..]);
        for i in 0..len {
            mask[row + i] = match region {
                LossRegion::AnswerOnly => i + 1 >= s.prompt_len,
                LossRegion::FullSequence => true,
            };
        }
    }
    LossBatch {
        batch: Batch {
            tokens,
            batch: samples.len(),
            seq,
        },
        targets,
        mask,
    }
}

/// Loss, correct-token and token counts of a batch under teacher forcing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub tokens: usize,
}

impl TokenStats {
    pub fn merge(&mut self, other: TokenStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.tokens += other.tokens;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

fn batch_stats(logits: &Tensor<f32>, lb: &LossBatch, mean_loss: f64) -> TokenStats {
    let v = logits.shape()[1];
    let mut correct = 0;
    let mut tokens = 0;
    for (r, row) in logits.data().chunks_exact(v).enumerate() {
        if lb.mask[r] {
            tokens += 1;
            correct += (argmax(row) == lb.targets[r]) as usize;
        }
    }
    TokenStats {
        loss_sum: mean_loss * tokens as f64,
        correct,
        tokens,
    }
}

/// One shard's forward/backward: gradients of its mean loss.
fn shard_gradients(
    model: &Transformer<f32>,
    samples: &[&EncodedSample],
    region: LossRegion,
) -> Result<(Vec<Option<Vec<f32>>>, TokenStats)> {
    let lb = make_loss_batch(samples, region);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let out = model.forward_tape(&mut tape, &vars, &lb.batch)?;
    let loss = tape.cross_entropy(out.logits, &lb.targets, &lb.mask)?;
    let mean = tape.value(loss).item() as f64;
    let stats = batch_stats(tape.value(out.logits), &lb, mean);
    let mut grads = tape.backward(loss)?;
    let gs = vars.iter().map(|&v| grads.take(v)).collect();
    Ok((gs, stats))
}

/// Teacher-forced statistics over `samples`, evaluated in chunks.
pub fn teacher_forced(model: &Transformer<f32>, samples: &[EncodedSample], region: LossRegion) -> Result<TokenStats> {
    const CHUNK: usize = 16;
    let chunks: Vec<&[EncodedSample]> = samples.chunks(CHUNK).collect();
    let parts = par::try_map_range(chunks.len(), |i| {
        let refs: Vec<&EncodedSample> = chunks[i].iter().collect();
        let lb = make_loss_batch(&refs, region);
        let mut tape = Tape::new();
        let vars: Vec<_> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
        let out = model.forward_tape(&mut tape, &vars, &lb.batch)?;
        let loss = tape.cross_entropy(out.logits, &lb.targets, &lb.mask)?;
        let mean = tape.value(loss).item() as f64;
        Ok::<_, Error>(batch_stats(tape.value(out.logits), &lb, mean))
    })?;
    let mut total = TokenStats::default();
    for p in parts {
        total.merge(p);
    }
    Ok(total)
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<f32>]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter that has a gradient; frozen tensors are skipped.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.requires_grad {
                continue;
            }
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let wv = *w as f64;
                *w = (wv - self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * wv)) as f32;
            }
        }
    }
}

/// One logged evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    /// Teacher-forced loss per test split.
    pub split_loss: BTreeMap<Split, f64>,
    /// Teacher-forced token accuracy per test split.
    pub split_accuracy: BTreeMap<Split, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
}

impl RunLog {
    pub fn push(&mut self, rec: EvalRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::Config(format!(
                    "log epochs must increase: {} after {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// Rows `epoch,split,loss,accuracy`; OOD is the pooled hollow and
    /// extrapolation loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},TRAIN,{:.6},{:.6}", r.epoch, r.train_loss, r.train_accuracy);
            for (split, loss) in &r.split_loss {
                let acc = r.split_accuracy.get(split).copied().unwrap_or(f64::NAN);
                let _ = writeln!(out, "{},{},{:.6},{:.6}", r.epoch, split, loss, acc);
            }
            let _ = writeln!(out, "{},OOD,{:.6},", r.epoch, r.ood_loss);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("runlog.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("runlog.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Encoded test splits used for logging.
#[derive(Debug, Clone, Default)]
pub struct EvalSets {
    pub splits: BTreeMap<Split, Vec<EncodedSample>>,
}

impl EvalSets {
    pub fn from_dataset(dataset: &Dataset, limit: Option<usize>) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for split in Split::TEST {
            let recs = dataset.split(split);
            if recs.is_empty() {
                continue;
            }
            let n = limit.map_or(recs.len(), |l| l.min(recs.len()));
            splits.insert(split, encode_records(&recs[..n])?);
        }
        Ok(Self { splits })
    }

    pub fn evaluate(&self, model: &Transformer<f32>, region: LossRegion) -> Result<BTreeMap<Split, TokenStats>> {
        self.splits
            .iter()
            .map(|(s, samples)| Ok((*s, teacher_forced(model, samples, region)?)))
            .collect()
    }
}

/// Final model plus its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

/// Train `model` in place. On divergence the model keeps the parameters of
/// the last finite step and a `Divergence` error is returned.
pub fn train(model: &mut Transformer<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let report = verify_records(dataset);
    if let Some(f) = report.failure {
        return Err(Error::Config(format!(
            "dataset failed verification at {}:{}: {}",
            f.file, f.line, f.reason
        )));
    }
    let train_set = encode_records(dataset.split(Split::Train))?;
    if train_set.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let longest = train_set.iter().map(|s| s.tokens.len() - 1).max().unwrap_or(0);
    if longest > model.config.max_seq_len {
        return Err(Error::Length {
            len: longest,
            max: model.config.max_seq_len,
        });
    }
    let evals = EvalSets::from_dataset(dataset, cfg.eval_limit)?;
    train_encoded(model, &train_set, &evals, cfg)
}

/// Training on pre-encoded samples; no dataset checks.
pub fn train_encoded(
    model: &mut Transformer<f32>,
    train_set: &[EncodedSample],
    evals: &EvalSets,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg, model.params());
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_stats = TokenStats::default();
        for batch_idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&EncodedSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let shard_len = samples.len().div_ceil(cfg.grad_shards);
            let shards: Vec<&[&EncodedSample]> = samples.chunks(shard_len).collect();
            let results = par::try_map_range(shards.len(), |i| shard_gradients(model, shards[i], cfg.loss_region))?;
            let total: usize = results.iter().map(|(_, s)| s.tokens).sum();
            if total == 0 {
                continue;
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
            let mut stats = TokenStats::default();
            for (gs, s) in &results {
                let w = s.tokens as f64 / total as f64;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    if let Some(g) = g {
                        let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                        for (a, &v) in acc.iter_mut().zip(g) {
                            *a += w * v as f64;
                        }
                    }
                }
                stats.merge(*s);
            }
            step += 1;
            let loss = stats.mean_loss();
            let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Divergence { epoch, step, loss });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().flatten().flatten().for_each(|v| *v *= s);
                }
            }
            opt.update(model.params_mut(), &grads);
            epoch_stats.merge(stats);
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let per_split = evals.evaluate(model, LossRegion::AnswerOnly)?;
            let mut ood = TokenStats::default();
            for (s, st) in &per_split {
                if s.is_ood() {
                    ood.merge(*st);
                }
            }
            log.push(EvalRecord {
                epoch,
                train_loss: epoch_stats.mean_loss(),
                train_accuracy: epoch_stats.accuracy(),
                id_loss: per_split.get(&Split::TestId).map_or(0.0, TokenStats::mean_loss),
                ood_loss: ood.mean_loss(),
                split_loss: per_split.iter().map(|(s, st)| (*s, st.mean_loss())).collect(),
                split_accuracy: per_split.iter().map(|(s, st)| (*s, st.accuracy())).collect(),
            })?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: model.clone(),
            step,
            master_seed: cfg.seed,
        },
        log,
    })
}

pub type Metrics = BTreeMap<String, f64>;

/// Per-seed metrics and their elementwise mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_seed: Vec<(u64, Metrics)>,
    pub mean: Metrics,
}

/// Run `run` once per seed and average every metric present in all runs.
pub fn multi_seed<F>(seeds: &[u64], run: F) -> Result<Aggregate>
where
    F: Fn(u64) -> Result<Metrics> + Send + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("multi_seed needs at least one seed".into()));
    }
    let per_seed = par::try_map_range(seeds.len(), |i| run(seeds[i]).map(|m| (seeds[i], m)))?;
    Ok(Aggregate {
        mean: mean_metrics(per_seed.iter().map(|(_, m)| m)),
        per_seed,
    })
}

pub fn mean_metrics<'a>(runs: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let runs: Vec<&Metrics> = runs.into_iter().collect();
    let Some(first) = runs.first() else {
        return Metrics::new();
    };
    first
        .keys()
        .filter(|k| runs.iter().all(|r| r.contains_key(*k)))
        .map(|k| {
            let sum: f64 = runs.iter().map(|r| r[k]).sum();
            (k.clone(), sum / runs.len() as f64)
        })
        .collect()
}
