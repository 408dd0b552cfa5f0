//! Direct pretraining and token-level distillation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::checkpoint::save_checkpoint;
use crate::data::{PackedBatch, Packer};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::model::{forward, ModelParameters, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Half soft-target, half ground-truth cross-entropy against a teacher.
    Distill,
    /// Plain next-token cross-entropy.
    Direct,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Distill => "distill",
            TrainMode::Direct => "direct",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(TrainMode::Distill),
            "direct" => Ok(TrainMode::Direct),
            _ => Err(Error::Input(format!("unknown mode {s:?}, expected distill or direct"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub clip_norm: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    /// Steps between validation passes; `None` means every 5% of the run.
    pub eval_interval: Option<usize>,
    /// Caps the validation windows evaluated per pass.
    pub eval_windows: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            weight_decay: 0.1,
            warmup_fraction: 0.01,
            epochs: 1,
            batch_size: 8,
            seq_len: 64,
            clip_norm: 1.0,
            mode: TrainMode::Direct,
            seed: 0,
            max_steps: None,
            eval_interval: None,
            eval_windows: Some(64),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("train config: {m}")));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive");
        }
        if self.max_steps == Some(0) || self.eval_interval == Some(0) {
            return bad("max_steps and eval_interval must be positive");
        }
        Ok(())
    }

    /// Number of optimizer steps over `packer`'s full batches.
    pub fn total_steps(&self, packer: &Packer<'_>) -> Result<usize> {
        if let Some(n) = self.max_steps {
            return Ok(n);
        }
        let per_epoch = packer.num_windows() / self.batch_size;
        if per_epoch == 0 {
            return Err(Error::Input(format!(
                "{} windows do not fill one batch of {}",
                packer.num_windows(),
                self.batch_size
            )));
        }
        Ok(per_epoch * self.epochs)
    }

    fn interval(&self, total: usize) -> usize {
        self.eval_interval.unwrap_or_else(|| ((total as f64 * 0.05).round() as usize).max(1))
    }
}

/// Linear warmup over the first `⌈warmup_fraction·total⌉` steps, then
/// half-cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Input(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(cfg.peak_lr);
    }
    let s = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos()))
}

/// Row-wise softmax of teacher logits.
pub fn teacher_distribution<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut probs = logits.clone();
    let c = probs.cols();
    for row in probs.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    probs
}

/// The two halves of the distillation objective and their average.
#[derive(Clone, Copy, Debug)]
pub struct DistillLoss {
    pub total: Var,
    pub soft: Var,
    pub hard: Var,
}

/// `½·CE(softmax(teacher) → student) + ½·CE(truth → student)`, each a mean
/// over tokens.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    truth: &[usize],
) -> Result<DistillLoss> {
    if tape.value(student_logits).shape() != teacher_logits.shape() {
        return Err(Error::Validation(format!(
            "student logits {:?} vs teacher logits {:?}",
            tape.value(student_logits).shape(),
            teacher_logits.shape()
        )));
    }
    let probs = teacher_distribution(teacher_logits);
    let soft = tape.cross_entropy(student_logits, &probs)?;
    let hard = tape.cross_entropy_ids(student_logits, truth)?;
    let sum = tape.add(soft, hard)?;
    let total = tape.scale(sum, T::from_f64_lossy(0.5))?;
    Ok(DistillLoss { total, soft, hard })
}

/// Rescales `grads` so their joint ℓ2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adaptive moments with decoupled weight decay, applied to tensors of
/// rank ≥ 2 only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, params: &ModelParameters<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.named_tensors().iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ModelParameters<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::Validation("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - self.beta1), T::from_f64_lossy(1.0 - self.beta2));
        let step_size = T::from_f64_lossy(lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Validation("gradient shape differs from its parameter".into()));
            }
            let decay = if p.shape().len() >= 2 { T::from_f64_lossy(1.0 - lr * self.weight_decay) } else { T::one() };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w = *w * decay - step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub tokens_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_ppl: f64,
    pub val_last_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub batch_tokens: usize,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "step,lr,train_loss,val_ppl,val_last_acc,tokens_seen";

    pub fn tokens_seen(&self) -> usize {
        self.steps.last().map_or(0, |s| s.tokens_seen)
    }

    pub fn final_eval(&self) -> Option<&EvalPoint> {
        self.evals.last()
    }

    /// One row per step; validation columns are empty between passes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let (ppl, acc) = match evals.peek() {
                Some(e) if e.step == s.step => {
                    let e = evals.next().expect("peeked");
                    (e.val_ppl.to_string(), e.val_last_acc.to_string())
                }
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{},{},{},{ppl},{acc},{}", s.step, s.lr, s.train_loss, s.tokens_seen);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Optional collaborators of a training run.
pub struct TrainOptions<'a, T> {
    pub teacher: Option<&'a Transformer<T>>,
    /// Held-out tokens for periodic validation.
    pub validation: Option<&'a [u32]>,
    /// Where to save the last finite state if training diverges.
    pub divergence_checkpoint: Option<&'a Path>,
}

impl<T> Default for TrainOptions<'_, T> {
    fn default() -> Self {
        TrainOptions { teacher: None, validation: None, divergence_checkpoint: None }
    }
}

fn diverged<T: Scalar>(model: &Transformer<T>, step: usize, path: Option<&Path>) -> Error {
    let checkpoint = path.and_then(|p| save_checkpoint(&model.config, &model.params, p).ok().map(|_| p.to_path_buf()));
    Error::Divergence { step, checkpoint }
}

/// Loss and parameter gradients for one batch.
fn step_gradients<T: Scalar>(
    model: &Transformer<T>,
    batch: &PackedBatch,
    teacher: Option<&Transformer<T>>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = model.params.to_tape(&mut tape, true);
    let logits = forward(&mut tape, &model.config, &p, None, &batch.inputs, batch.batch, batch.seq_len)?;
    let truth: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    let loss = match teacher {
        Some(t) => {
            let tl = t.logits(&batch.inputs, batch.batch, batch.seq_len)?;
            distill_loss(&mut tape, logits, &tl, &truth)?.total
        }
        None => tape.cross_entropy_ids(logits, &truth)?,
    };
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric("loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let named = model.params.named_tensors();
    let out = p
        .all()
        .into_iter()
        .zip(named)
        .map(|(v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::new_allow_empty(t.shape().to_vec(), vec![T::zero(); t.numel()])))
        .collect();
    Ok((value, out))
}

/// Runs `total_steps` optimizer steps over `batches`.
pub fn train_on<T: Scalar>(
    model: &mut Transformer<T>,
    batches: impl IntoIterator<Item = PackedBatch>,
    total_steps: usize,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_, T>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let teacher = match (cfg.mode, opts.teacher) {
        (TrainMode::Distill, None) => return Err(Error::Validation("distill mode needs a teacher".into())),
        (TrainMode::Distill, Some(t)) => {
            if t.config.vocab_size != model.config.vocab_size {
                return Err(Error::Validation(format!(
                    "teacher vocabulary {} differs from student vocabulary {}",
                    t.config.vocab_size, model.config.vocab_size
                )));
            }
            Some(t)
        }
        (TrainMode::Direct, _) => None,
    };
    let started = Instant::now();
    let interval = cfg.interval(total_steps);
    let eval_opts = EvalOptions { batch_size: cfg.batch_size, max_windows: cfg.eval_windows };
    let mut opt = AdamW::new(cfg, &model.params);
    let mut record = RunRecord { batch_tokens: cfg.batch_tokens(), ..RunRecord::default() };
    let mut it = batches.into_iter();
    for step in 1..=total_steps {
        let batch = it
            .next()
            .ok_or_else(|| Error::Input(format!("batch stream ended after {} steps", step - 1)))?;
        if batch.batch != cfg.batch_size || batch.seq_len != cfg.seq_len {
            return Err(Error::Validation(format!(
                "batch of {}×{} does not match the configured {}×{}",
                batch.batch, batch.seq_len, cfg.batch_size, cfg.seq_len
            )));
        }
        let (loss, mut grads) = match step_gradients(model, &batch, teacher) {
            Ok(x) => x,
            Err(Error::Numeric(_)) => return Err(diverged(model, step, opts.divergence_checkpoint)),
            Err(e) => return Err(e),
        };
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(diverged(model, step, opts.divergence_checkpoint));
        }
        let lr = lr_at(step, total_steps, cfg)?;
        opt.update(&mut model.params, &grads, lr)?;
        record.steps.push(StepLog { step, lr, train_loss: loss, tokens_seen: step * cfg.batch_tokens() });
        if let Some(val) = opts.validation {
            if step % interval == 0 || step == total_steps {
                let r = evaluate(model, val, cfg.seq_len, eval_opts, "validation")?;
                log::debug!("step {step}: loss {loss:.4} val ppl {:.3}", r.perplexity);
                record.evals.push(EvalPoint { step, val_ppl: r.perplexity, val_last_acc: r.last_token_accuracy });
            }
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

/// Trains over full batches of `train_tokens` packed with `cfg`.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    train_tokens: &[u32],
    cfg: &TrainConfig,
    opts: &TrainOptions<'_, T>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let packer = Packer::new(train_tokens, cfg.seq_len, cfg.batch_size, cfg.seed)?;
    if packer.num_windows() < cfg.batch_size {
        return Err(Error::Input(format!(
            "{} windows do not fill one batch of {}",
            packer.num_windows(),
            cfg.batch_size
        )));
    }
    let total = cfg.total_steps(&packer)?;
    let bs = cfg.batch_size;
    train_on(model, packer.stream().filter(move |b| b.batch == bs), total, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { warmup_fraction: 0.1, ..TrainConfig::default() };
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, &cfg).unwrap(), cfg.peak_lr);
        assert!((lr_at(55, 100, &cfg).unwrap() - 0.5 * cfg.peak_lr).abs() < 1e-15);
        assert!(lr_at(100, 100, &cfg).unwrap().abs() < 1e-18);
        assert!(matches!(lr_at(101, 100, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f64>::full(&[3], 2.0), Tensor::full(&[2, 2], -1.0)];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 4.0).abs() < 1e-12);
        let after = g.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-6);
    }

    fn random_logits(rows: usize, v: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, v], |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn distill_matches_scalar_oracle() {
        let s = random_logits(5, 7, 1);
        let t = random_logits(5, 7, 2);
        let truth = [0usize, 3, 6, 2, 2];
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone(), true);
        let l = distill_loss(&mut tape, sv, &t, &truth).unwrap();
        let mut want = 0.0;
        for r in 0..5 {
            let lse = |row: &[f64]| row.iter().map(|x| x.exp()).sum::<f64>().ln();
            let (srow, trow) = (s.row(r), t.row(r));
            let (ls, lt) = (lse(srow), lse(trow));
            let soft: f64 = (0..7).map(|i| -(trow[i] - lt).exp() * (srow[i] - ls)).sum();
            let hard = ls - srow[truth[r]];
            want += 0.5 * soft + 0.5 * hard;
        }
        want /= 5.0;
        let got = tape.value(l.total).data()[0];
        assert!((got - want).abs() < 1e-6);
        let halves = 0.5 * (tape.value(l.soft).data()[0] + tape.value(l.hard).data()[0]);
        assert!((got - halves).abs() < 1e-12);
    }

    #[test]
    fn distill_shape_mismatch() {
        let mut tape = Tape::new();
        let sv = tape.leaf(random_logits(2, 3, 1), true);
        let r = distill_loss(&mut tape, sv, &random_logits(2, 4, 1), &[0, 1]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    fn repeating(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i % 32) * 7 % 16) as u32).collect()
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig { peak_lr: 1e-2, batch_size: 4, seq_len: 16, max_steps: Some(steps), warmup_fraction: 0.05, ..TrainConfig::default() }
    }

    #[test]
    fn deterministic_runs_and_csv() {
        let toks = repeating(2000);
        let config = ModelConfig::uniform(1, 2, 4, 8, 16, 16, 16);
        let run = || {
            let mut m = Transformer::<f32>::init(config.clone(), 3).unwrap();
            let opts = TrainOptions { validation: Some(&toks[..400]), ..TrainOptions::default() };
            let rec = train(&mut m, &toks, &small_cfg(6), &opts).unwrap();
            (m, rec)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.params.digest(), b.params.digest());
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(ra.tokens_seen(), 6 * 64);
        assert_eq!(ra.steps.len(), 6);
        let csv = ra.to_csv();
        assert!(csv.starts_with(RunRecord::CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn distill_requires_compatible_teacher() {
        let toks = repeating(500);
        let mut s = Transformer::<f32>::init(ModelConfig::uniform(1, 1, 4, 8, 8, 16, 16), 1).unwrap();
        let t = Transformer::<f32>::init(ModelConfig::uniform(1, 1, 4, 8, 8, 17, 16), 1).unwrap();
        let cfg = TrainConfig { mode: TrainMode::Distill, ..small_cfg(2) };
        let none = TrainOptions::default();
        assert!(matches!(train(&mut s, &toks, &cfg, &none), Err(Error::Validation(_))));
        let opts = TrainOptions { teacher: Some(&t), ..TrainOptions::default() };
        assert!(matches!(train(&mut s, &toks, &cfg, &opts), Err(Error::Validation(_))));
    }

    #[test]
    fn teacher_untouched_by_distillation() {
        let toks = repeating(800);
        let t = Transformer::<f32>::init(ModelConfig::uniform(1, 2, 4, 8, 16, 16, 16), 9).unwrap();
        let before = t.params.clone();
        let mut s = Transformer::<f32>::init(ModelConfig::uniform(1, 1, 4, 8, 8, 16, 16), 1).unwrap();
        let cfg = TrainConfig { mode: TrainMode::Distill, ..small_cfg(3) };
        let opts = TrainOptions { teacher: Some(&t), ..TrainOptions::default() };
        train(&mut s, &toks, &cfg, &opts).unwrap();
        assert_eq!(t.params, before);
    }

    #[test]
    fn divergence_saves_last_finite_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.cglb");
        let toks = repeating(800);
        let mut m = Transformer::<f32>::init(ModelConfig::uniform(1, 1, 4, 8, 8, 16, 16), 1).unwrap();
        m.params.tok_emb.data_mut()[0] = f32::NAN;
        let opts = TrainOptions { divergence_checkpoint: Some(&path), ..TrainOptions::default() };
        match train(&mut m, &toks, &small_cfg(3), &opts) {
            Err(Error::Divergence { step: 1, checkpoint: Some(p) }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
        assert!(path.exists());
    }

    #[test]
    fn no_decay_on_vectors() {
        let config = ModelConfig::uniform(1, 1, 2, 4, 4, 5, 4);
        let mut p = ModelParameters::<f64>::init(&config, 1).unwrap();
        let before = p.clone();
        let cfg = TrainConfig { weight_decay: 0.5, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg, &p);
        let zeros: Vec<Tensor<f64>> = p.named_tensors().iter().map(|(_, t)| Tensor::new_allow_empty(t.shape().to_vec(), vec![0.0; t.numel()])).collect();
        opt.update(&mut p, &zeros, 0.1).unwrap();
        assert_eq!(p.lnf_gain, before.lnf_gain);
        assert!((p.tok_emb.data()[0] - before.tok_emb.data()[0] * 0.95).abs() < 1e-15);
    }
}
