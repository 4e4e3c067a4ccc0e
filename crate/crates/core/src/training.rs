//! Language-modeling loss, gradients, Adam, the warmup/inverse-sqrt
//! schedule, gradient accumulation and checkpoint averaging.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::linalg::log_softmax;
use crate::model::{backward, cst, forward_cached, Dropout, Scalar, Weights};
use crate::prompt::Assembled;
use crate::{Error, Result};

/// Positions whose next-token prediction enters the loss.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Optimizer steps; in fine-tuning, `epochs` takes precedence when set.
    pub total_steps: usize,
    pub epochs: Option<usize>,
    pub tokens_per_batch: usize,
    pub accumulation_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Number of trailing checkpoints kept (and averaged) at the end.
    pub average_last: usize,
    /// Pretraining checkpoint interval in steps; fine-tuning checkpoints every epoch.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-4,
            warmup_steps: 100,
            total_steps: 1000,
            epochs: None,
            tokens_per_batch: 1024,
            accumulation_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            average_last: 1,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Written this way so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.tokens_per_batch < 1 || self.accumulation_steps < 1 || self.average_last < 1 {
            return Err(Error::Config(
                "tokens_per_batch, accumulation_steps and average_last must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Linear warmup to `peak_lr`, then decay ∝ 1/√step.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = config.warmup_steps as f64;
    config.peak_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Mean negative log-likelihood over masked positions; `logits` is
/// `seq × vocab`.
pub fn lm_loss<F: Scalar>(logits: &[F], vocab: usize, targets: &[u32], mask: &LossMask) -> Result<F> {
    assert_eq!(logits.len(), targets.len() * vocab, "logits/targets shape");
    assert_eq!(mask.0.len(), targets.len(), "mask/targets shape");
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut total = F::zero();
    for pos in mask.positions() {
        let lp = log_softmax(&logits[pos * vocab..(pos + 1) * vocab]);
        total = total - lp[targets[pos] as usize];
    }
    Ok(total / cst(count as f64))
}

/// Summed NLL over `rows` and its gradient, scaled by `scale`.
fn nll_and_grad<F: Scalar>(logits: &[F], vocab: usize, targets: &[u32], scale: F) -> (F, Vec<F>) {
    let mut total = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (r, &target) in targets.iter().enumerate() {
        let lp = log_softmax(&logits[r * vocab..(r + 1) * vocab]);
        total = total - lp[target as usize];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, &l) in g.iter_mut().zip(&lp) {
            *gi = l.exp() * scale;
        }
        g[target as usize] = g[target as usize] - scale;
    }
    (total, grad)
}

/// Mean loss over every masked position in `batch`, without gradients.
pub fn batch_loss<F: Scalar>(weights: &Weights<F>, batch: &[Assembled]) -> Result<F> {
    let count: usize = batch.iter().map(|s| s.mask.count()).sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let vocab = weights.config().vocab_size;
    let mut total = F::zero();
    for seq in batch {
        let rows = seq.mask.positions();
        if rows.is_empty() {
            continue;
        }
        let (logits, _) = forward_cached(&seq.items, weights, &rows, None)?;
        let targets: Vec<u32> = rows.iter().map(|&r| seq.targets[r]).collect();
        total = total + nll_and_grad(&logits, vocab, &targets, F::zero()).0;
    }
    Ok(total / cst(count as f64))
}

/// Adds `scale · ∇(mean batch loss)` into `grads` and returns the mean loss.
pub fn accumulate_gradients<F: Scalar>(
    weights: &Weights<F>,
    batch: &[Assembled],
    scale: F,
    grads: &mut Weights<F>,
    mut dropout: Option<&mut Dropout>,
) -> Result<F> {
    let count: usize = batch.iter().map(|s| s.mask.count()).sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let vocab = weights.config().vocab_size;
    let per_position = scale / cst(count as f64);
    let mut total = F::zero();
    for seq in batch {
        let rows = seq.mask.positions();
        if rows.is_empty() {
            continue;
        }
        let (logits, cache) = forward_cached(&seq.items, weights, &rows, dropout.as_deref_mut())?;
        let targets: Vec<u32> = rows.iter().map(|&r| seq.targets[r]).collect();
        let (nll, dlogits) = nll_and_grad(&logits, vocab, &targets, per_position);
        total = total + nll;
        backward(weights, &cache, &dlogits, grads);
    }
    Ok(total / cst(count as f64))
}

/// Fails with the name of the first tensor holding a NaN or infinity.
pub fn check_gradients<F: Scalar>(grads: &Weights<F>) -> Result<()> {
    for ((name, _), tensor) in grads.named_shapes().into_iter().zip(grads.tensors()) {
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam update with bias correction for one tensor. `step` counts from 1.
pub fn adam_update<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    step: usize,
    lr: f64,
    config: &AdamConfig,
) {
    let b1 = cst::<F>(config.beta1);
    let b2 = cst::<F>(config.beta2);
    let one = F::one();
    let c1 = cst::<F>(1.0 - config.beta1.powi(step as i32));
    let c2 = cst::<F>(1.0 - config.beta2.powi(step as i32));
    let lr = cst::<F>(lr);
    let eps = cst::<F>(config.epsilon);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Weights<F>,
    pub v: Weights<F>,
    pub step: usize,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(weights: &Weights<F>) -> Self {
        AdamState {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            step: 0,
        }
    }
}

pub fn adam_step<F: Scalar>(
    weights: &mut Weights<F>,
    grads: &Weights<F>,
    state: &mut AdamState<F>,
    lr: f64,
    config: &AdamConfig,
) {
    state.step += 1;
    let step = state.step;
    let params = weights.tensors_mut();
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    assert_eq!(params.len(), grads.len(), "adam state does not match parameters");
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        adam_update(p, g, m, v, step, lr, config);
    }
}

/// Elementwise mean. Values are summed in sorted order so the result does
/// not depend on the order of `weights`.
pub fn average_weights(weights: &[Weights<f32>]) -> Result<Weights<f32>> {
    let first = weights
        .first()
        .ok_or_else(|| Error::CheckpointMismatch("nothing to average".into()))?;
    let shapes = first.named_shapes();
    for w in &weights[1..] {
        if w.config() != first.config() || w.named_shapes() != shapes {
            return Err(Error::CheckpointMismatch(
                "checkpoints do not share a configuration".into(),
            ));
        }
    }
    let k = weights.len() as f64;
    let mut out = first.clone();
    let sources: Vec<Vec<&Vec<f32>>> = weights.iter().map(Weights::tensors).collect();
    let mut column = vec![0f32; weights.len()];
    for (ti, target) in out.tensors_mut().into_iter().enumerate() {
        for (i, value) in target.iter_mut().enumerate() {
            for (c, src) in column.iter_mut().zip(&sources) {
                *c = src[ti][i];
            }
            column.sort_by(f32::total_cmp);
            let sum: f64 = column.iter().map(|&v| v as f64).sum();
            *value = (sum / k) as f32;
        }
    }
    Ok(out)
}

/// Loads and averages checkpoint files. Metadata is taken from the first file.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let mut loaded = Vec::with_capacity(paths.len());
    for p in paths {
        loaded.push(Checkpoint::load(p.as_ref())?);
    }
    let weights: Vec<Weights<f32>> = loaded.iter().map(|c| c.weights.clone()).collect();
    let averaged = average_weights(&weights)?;
    let mut out = loaded
        .into_iter()
        .next()
        .ok_or_else(|| Error::CheckpointMismatch("nothing to average".into()))?;
    out.weights = averaged;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final weights, or the last good weights when training diverged.
    pub weights: Weights<f32>,
    /// Trailing checkpoints as `(step, weights)`, at most `average_last` of them.
    pub checkpoints: Vec<(usize, Weights<f32>)>,
    pub log: Vec<LossRecord>,
    pub diverged: Option<Divergence>,
}

impl TrainOutcome {
    /// Mean of the retained trailing checkpoints.
    pub fn averaged(&self) -> Result<Weights<f32>> {
        if self.checkpoints.is_empty() {
            return Ok(self.weights.clone());
        }
        let ws: Vec<Weights<f32>> = self.checkpoints.iter().map(|(_, w)| w.clone()).collect();
        average_weights(&ws)
    }
}

/// Greedy packing of sequences into micro-batches of at most
/// `tokens_per_batch` tokens (one sequence minimum).
pub fn pack_batches(lengths: &[usize], order: &[usize], tokens_per_batch: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for &i in order {
        if !current.is_empty() && tokens + lengths[i] > tokens_per_batch {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        tokens += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Runs the optimizer over `data`. Every step consumes
/// `accumulation_steps` micro-batches whose gradients are each divided by
/// `accumulation_steps`.
pub fn train_loop(
    initial: Weights<f32>,
    data: &[Assembled],
    config: &TrainConfig,
    mode: TrainMode,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.iter().all(|s| s.mask.count() == 0) {
        return Err(Error::EmptyMask);
    }
    let mut weights = initial;
    let mut state = AdamState::new(&weights);
    let adam = config.adam();
    let lengths: Vec<usize> = data.iter().map(|s| s.items.len()).collect();
    let dropout_rate = weights.config().dropout;
    let mut dropout = (dropout_rate > 0.0).then(|| Dropout::new(dropout_rate, config.seed ^ 0x9e37_79b9_7f4a_7c15));

    let max_steps = match (mode, config.epochs) {
        (TrainMode::Finetune, Some(_)) => usize::MAX,
        _ => config.total_steps,
    };
    let max_epochs = match (mode, config.epochs) {
        (TrainMode::Finetune, Some(e)) => e,
        _ => usize::MAX,
    };
    let accum = config.accumulation_steps;
    let scale = 1.0f32 / accum as f32;

    let mut log = Vec::new();
    let mut checkpoints: Vec<(usize, Weights<f32>)> = Vec::new();
    let keep = |checkpoints: &mut Vec<(usize, Weights<f32>)>, step: usize, w: &Weights<f32>| {
        checkpoints.push((step, w.clone()));
        if checkpoints.len() > config.average_last {
            checkpoints.remove(0);
        }
    };
    let mut step = 0;
    let mut epoch = 0;
    'outer: while epoch < max_epochs && step < max_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let batches = pack_batches(&lengths, &order, config.tokens_per_batch);
        for group in batches.chunks(accum) {
            if step >= max_steps {
                break 'outer;
            }
            let lr = lr_at(step + 1, config);
            let mut grads = weights.zeros_like();
            let mut loss_sum = 0.0f64;
            let mut counted = 0;
            for batch in group {
                let seqs: Vec<Assembled> = batch.iter().map(|&i| data[i].clone()).collect();
                if seqs.iter().all(|s| s.mask.count() == 0) {
                    continue;
                }
                let loss = accumulate_gradients(&weights, &seqs, scale, &mut grads, dropout.as_mut())?;
                loss_sum += loss as f64;
                counted += 1;
            }
            if counted == 0 {
                continue;
            }
            let loss = loss_sum / counted as f64;
            if !loss.is_finite() || check_gradients(&grads).is_err() {
                log::error!("training diverged at step {} (loss {loss})", step + 1);
                return Ok(TrainOutcome {
                    weights,
                    checkpoints,
                    log,
                    diverged: Some(Divergence { step: step + 1, loss }),
                });
            }
            adam_step(&mut weights, &grads, &mut state, lr, &adam);
            step += 1;
            let record = LossRecord { step, loss, lr };
            on_step(&record);
            log.push(record);
            if mode == TrainMode::Pretrain && config.checkpoint_every.is_some_and(|n| step % n == 0) {
                keep(&mut checkpoints, step, &weights);
            }
        }
        epoch += 1;
        if mode == TrainMode::Finetune {
            keep(&mut checkpoints, step, &weights);
        }
    }
    if checkpoints.last().map(|(s, _)| *s) != Some(step) {
        keep(&mut checkpoints, step, &weights);
    }
    Ok(TrainOutcome {
        weights,
        checkpoints,
        log,
        diverged: None,
    })
}
