use std::path::PathBuf;

use super::{save_checkpoint, AdamMoments, ModelError, ModelState, Mode};
use crate::corpus::{batch_iter, TokenShard};
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Cosine decay bottoms out at this fraction of the peak rate.
const MIN_LR_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    /// Window length; 0 means the model's `context_len`.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Blocks per recomputation segment; 1 keeps every activation.
    pub checkpoint_segments: usize,
    /// Write `<out_dir>/<step>.itf` every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Validation cross-entropy every this many steps (0 = never).
    pub eval_every: u64,
    /// Cap on validation tokens scored per evaluation (0 = all).
    pub eval_tokens: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 0,
            learning_rate: 3e-4,
            warmup_steps: 100,
            max_steps: 1000,
            grad_clip: 1.0,
            checkpoint_segments: 1,
            checkpoint_every: 100,
            eval_every: 100,
            eval_tokens: 8192,
            seed: 0,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Global step after the update.
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub val_cross_entropy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Largest activation footprint (elements) seen in any step.
    pub peak_activations: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Linear warmup to the peak rate, then cosine decay. `step` counts from 1.
pub fn learning_rate(step: u64, hyper: &TrainHyper) -> f64 {
    let peak = hyper.learning_rate;
    if hyper.warmup_steps > 0 && step <= hyper.warmup_steps {
        return peak * step as f64 / hyper.warmup_steps as f64;
    }
    let span = hyper.max_steps.saturating_sub(hyper.warmup_steps).max(1) as f64;
    let progress = ((step - hyper.warmup_steps.min(step)) as f64 / span).min(1.0);
    let floor = peak * MIN_LR_RATIO;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Runs `hyper.max_steps` Adam updates on random windows of `train_shard`.
///
/// A non-finite loss or gradient aborts before the update is applied, so
/// `state` and any written checkpoints stay at the last good step.
pub fn train<T: Scalar>(
    state: &mut ModelState<T>,
    train_shard: &TokenShard,
    validation: Option<&TokenShard>,
    hyper: &TrainHyper,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainLog, ModelError> {
    state.config.validate()?;
    state.shape_audit()?;
    let mut log = TrainLog::default();
    if hyper.max_steps == 0 {
        return Ok(log);
    }
    if hyper.batch_size == 0 || hyper.checkpoint_segments == 0 {
        return Err(ModelError::ConfigError(
            "batch_size and checkpoint_segments must be at least 1".into(),
        ));
    }
    if !(hyper.learning_rate.is_finite() && hyper.learning_rate > 0.0) {
        return Err(ModelError::ConfigError(format!(
            "learning rate {} must be positive",
            hyper.learning_rate
        )));
    }
    let seq = match hyper.seq_len {
        0 => state.config.context_len,
        s if s <= state.config.context_len => s,
        s => {
            return Err(ModelError::ConfigError(format!(
                "seq_len {s} exceeds context_len {}",
                state.config.context_len
            )))
        }
    };
    train_shard.check_vocab(state.config.vocab_size)?;
    if let Some(v) = validation {
        v.check_vocab(state.config.vocab_size)?;
    }
    if let Some(dir) = &hyper.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let start = state.step;
    let mut batches = batch_iter(train_shard, seq, hyper.batch_size, hyper.seed.wrapping_add(start))?;
    let mut moments = state
        .moments
        .take()
        .unwrap_or_else(|| AdamMoments::zeros(&state.config));
    let result = run_steps(state, &mut moments, &mut batches, validation, hyper, seq, &mut log, on_step);
    state.moments = Some(moments);
    result.map(|_| log)
}

#[allow(clippy::too_many_arguments)]
fn run_steps<T: Scalar>(
    state: &mut ModelState<T>,
    moments: &mut AdamMoments<T>,
    batches: &mut impl Iterator<Item = crate::corpus::Batch>,
    validation: Option<&TokenShard>,
    hyper: &TrainHyper,
    seq: usize,
    log: &mut TrainLog,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(), ModelError> {
    let start = state.step;
    let mut last_checkpoint: Option<PathBuf> = None;
    for local in 1..=hyper.max_steps {
        let global = start + local;
        let batch = batches.next().expect("batch stream is endless");
        let dropout_seed = state.config.seed ^ hyper.seed.rotate_left(32) ^ global.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, mut grads, stats) = state.loss_and_grads(
            &batch.inputs,
            &batch.targets,
            hyper.batch_size,
            seq,
            hyper.checkpoint_segments,
            Mode::Train { dropout_seed },
        )?;
        log.peak_activations = log.peak_activations.max(stats.peak);
        let norm = grads.iter().map(|g| g.sum_squares()).sum::<T>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: global,
                last_checkpoint,
            });
        }
        if hyper.grad_clip > 0.0 && norm.as_f64() > hyper.grad_clip {
            let factor = T::of(hyper.grad_clip / norm.as_f64());
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= factor;
                }
            }
        }
        let lr = learning_rate(local, hyper);
        adam_update(state, moments, &grads, lr);
        state.step = global;

        let val_cross_entropy = match validation {
            Some(v) if hyper.eval_every > 0 && (local % hyper.eval_every == 0 || local == hyper.max_steps) => {
                let cap = if hyper.eval_tokens == 0 { v.len() } else { hyper.eval_tokens.min(v.len()) };
                let nll = state.token_nlls(&v.ids[..cap])?;
                Some(nll.iter().sum::<f64>() / nll.len().max(1) as f64)
            }
            _ => None,
        };
        let record = StepRecord {
            step: global,
            loss: loss.as_f64(),
            learning_rate: lr,
            grad_norm: norm.as_f64(),
            val_cross_entropy,
        };
        on_step(&record);
        log.records.push(record);

        if let Some(dir) = &hyper.out_dir {
            if hyper.checkpoint_every > 0 && local % hyper.checkpoint_every == 0 {
                let path = dir.join(format!("{global}.itf"));
                let saved = ModelState {
                    config: state.config.clone(),
                    params: state.params.clone(),
                    step: state.step,
                    moments: Some(moments.clone()),
                };
                save_checkpoint(&saved, &path)?;
                log.checkpoints.push(path.clone());
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(())
}

fn adam_update<T: Scalar>(
    state: &mut ModelState<T>,
    moments: &mut AdamMoments<T>,
    grads: &[crate::numerics::Tensor<T>],
    lr: f64,
) {
    moments.t += 1;
    let t = moments.t as f64;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step = T::of(lr / (1.0 - BETA1.powf(t)));
    let v_corr = T::of(1.0 / (1.0 - BETA2.powf(t)));
    let eps = T::of(ADAM_EPS);
    for (((p, g), m), v) in state
        .params
        .iter_mut()
        .zip(grads)
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            p[i] -= step * m[i] / ((v[i] * v_corr).sqrt() + eps);
        }
    }
}
