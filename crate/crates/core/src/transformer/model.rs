use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelState};
use crate::numerics::kernels;
use crate::numerics::{ActivationStats, NumericsError, Tape, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Eval,
    /// Dropout masks drawn from a generator seeded with `dropout_seed`.
    Train { dropout_seed: u64 },
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T, S]`
    pub logits: Var,
    /// One leaf per parameter, in canonical order.
    pub params: Vec<Var>,
    /// Post-softmax attention weights `[B, H, T, T]` per layer.
    pub attention: Vec<Var>,
}

struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var, NumericsError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let n = tape.shape(x).iter().product();
        let keep = T::of(1.0 / (1.0 - self.p));
        let p = self.p;
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        tape.dropout(x, mask)
    }
}

impl<T: Scalar> ModelState<T> {
    fn check_inputs(&self, ids: &[u32], batch: usize, seq: usize) -> Result<(), ModelError> {
        let c = &self.config;
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(NumericsError::ShapeError(format!(
                "{} ids for batch {batch} x seq {seq}",
                ids.len()
            ))
            .into());
        }
        if seq > c.context_len {
            return Err(NumericsError::ShapeError(format!(
                "sequence length {seq} exceeds context_len {}",
                c.context_len
            ))
            .into());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(NumericsError::ShapeError(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            ))
            .into());
        }
        Ok(())
    }

    /// Records the forward pass for `ids` (`batch × seq`, row-major) on `tape`,
    /// calling [`Tape::mark`] at every block boundary.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        ids: &[u32],
        batch: usize,
        seq: usize,
        mode: Mode,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_inputs(ids, batch, seq)?;
        let c = &self.config;
        let params: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let mut dropout = Dropout {
            p: c.dropout,
            rng: match mode {
                Mode::Train { dropout_seed } if c.dropout > 0.0 => {
                    Some(ChaCha8Rng::seed_from_u64(dropout_seed))
                }
                _ => None,
            },
        };
        let eps = T::of(LN_EPS);
        let (wte, wpe) = (params[0], params[1]);

        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let tok = tape.embed_gather(wte, ids, &[batch, seq])?;
        let pos = tape.embed_gather(wpe, &positions, &[batch, seq])?;
        let mut x = tape.add(tok, pos)?;
        x = dropout.apply(tape, x)?;
        tape.mark();

        let attn_scale = T::one() / T::of(c.head_dim() as f64).sqrt();
        let mut attention = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let n = ModelConfig::PER_LAYER;
            let p = &params[2 + n * l..2 + n * (l + 1)];
            let h = tape.layer_norm(x, p[0], p[1], eps)?;
            let q = tape.matmul(h, p[2], false)?;
            let q = tape.add_bias(q, p[3])?;
            let q = tape.split_heads(q, c.n_heads)?;
            let k = tape.matmul(h, p[4], false)?;
            let k = tape.split_heads(k, c.n_heads)?;
            let v = tape.matmul(h, p[5], false)?;
            let v = tape.add_bias(v, p[6])?;
            let v = tape.split_heads(v, c.n_heads)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, attn_scale)?;
            let scores = tape.causal_mask_fill(scores)?;
            let weights = tape.softmax(scores, 3)?;
            attention.push(weights);
            let ctx = tape.batch_matmul(weights, v, false)?;
            let ctx = tape.merge_heads(ctx)?;
            let out = tape.matmul(ctx, p[7], false)?;
            let out = tape.add_bias(out, p[8])?;
            let out = dropout.apply(tape, out)?;
            x = tape.add(x, out)?;

            let h = tape.layer_norm(x, p[9], p[10], eps)?;
            let up = tape.matmul(h, p[11], false)?;
            let up = tape.add_bias(up, p[12])?;
            let act = tape.gelu(up)?;
            let down = tape.matmul(act, p[13], false)?;
            let down = tape.add_bias(down, p[14])?;
            let down = dropout.apply(tape, down)?;
            x = tape.add(x, down)?;
            tape.mark();
        }

        let n = params.len();
        let h = tape.layer_norm(x, params[n - 2], params[n - 1], eps)?;
        let logits = tape.matmul(h, wte, true)?;
        Ok(ForwardOutput {
            logits,
            params,
            attention,
        })
    }

    /// Eval-mode logits `[batch, seq, vocab_size]`.
    pub fn forward(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, ids, batch, seq, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits for the last position of a single sequence.
    pub fn next_logits(&self, ids: &[u32]) -> Result<Vec<T>, ModelError> {
        let logits = self.forward(ids, 1, ids.len())?;
        let s = self.config.vocab_size;
        Ok(logits.data()[logits.len() - s..].to_vec())
    }

    /// Post-softmax attention weights `[batch, heads, seq, seq]` for each layer.
    pub fn attention_maps(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, ids, batch, seq, Mode::Eval)?;
        Ok(out.attention.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Mean next-token cross-entropy and its gradient for every parameter.
    ///
    /// `segment_size > 1` records a checkpointed tape that keeps every
    /// `segment_size`-th block boundary and recomputes the rest in backward.
    pub fn loss_and_grads(
        &self,
        inputs: &[u32],
        targets: &[u32],
        batch: usize,
        seq: usize,
        segment_size: usize,
        mode: Mode,
    ) -> Result<(T, Vec<Tensor<T>>, ActivationStats), ModelError> {
        let mut tape = Tape::checkpointed(segment_size.max(1))?;
        let out = self.forward_on(&mut tape, inputs, batch, seq, mode)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let stats = tape.stats();
        let g = out
            .params
            .iter()
            .map(|&p| grads.take(p).expect("every parameter receives a gradient"))
            .collect();
        Ok((value, g, stats))
    }

    /// Mean next-token cross-entropy in eval mode (no gradient).
    pub fn loss(&self, inputs: &[u32], targets: &[u32], batch: usize, seq: usize) -> Result<T, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, inputs, batch, seq, Mode::Eval)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok(tape.value(loss).item()?)
    }

    /// Negative log-likelihood (nats) of every token after the first, scored
    /// in non-overlapping windows of `context_len` predictions.
    pub fn token_nlls(&self, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        const WINDOWS_PER_PASS: usize = 8;
        let c = self.config.context_len;
        let s = self.config.vocab_size;
        let predicted = ids.len().saturating_sub(1);
        let mut out = Vec::with_capacity(predicted);
        let full = predicted / c;
        let mut w = 0;
        while w < full {
            let n = WINDOWS_PER_PASS.min(full - w);
            let inputs: Vec<u32> = (w..w + n).flat_map(|i| ids[i * c..(i + 1) * c].iter().copied()).collect();
            let logits = self.forward(&inputs, n, c)?;
            for (row, i) in logits.data().chunks(s).zip(w * c..) {
                out.push(kernels::token_nll(row, ids[i + 1] as usize).as_f64());
            }
            w += n;
        }
        let rest = predicted - full * c;
        if rest > 0 {
            let start = full * c;
            let logits = self.forward(&ids[start..start + rest], 1, rest)?;
            for (row, i) in logits.data().chunks(s).zip(start..) {
                out.push(kernels::token_nll(row, ids[i + 1] as usize).as_f64());
            }
        }
        Ok(out)
    }
}
