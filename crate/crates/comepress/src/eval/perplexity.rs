//! Perplexity evaluation.
//!
//! Mean next-token NLL over all predicted tokens of the given windows, with
//! PPL = exp(mean NLL). Per-window sums are accumulated in f64 and reduced in
//! window-index order, so the result does not depend on batch grouping or on
//! how many workers ran the windows.

use super::{worker_count, Window};
use crate::error::{Error, Result};
use crate::model::{CaptureSpec, TokenBatch, ToyModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalResult {
    pub ppl: f64,
    pub nll_per_token: f64,
    pub token_count: usize,
}

/// Sum of -log p(target) over one batch of windows, per window.
fn batch_window_nll(model: &ToyModel<f32>, windows: &[&Window]) -> Result<Vec<f64>> {
    let seq = windows[0].seq();
    if windows.iter().any(|w| w.seq() != seq) {
        return Err(Error::Contract("windows in a batch must share seq".into()));
    }
    let mut ids = Vec::with_capacity(windows.len() * seq);
    for w in windows {
        ids.extend_from_slice(&w.input);
    }
    let batch = TokenBatch::new(windows.len(), seq, ids)?;
    let (logits, _) = model.forward(&batch, &CaptureSpec::hidden_only())?;
    let vocab = model.config.vocab_size;
    let mut out = Vec::with_capacity(windows.len());
    for (wi, w) in windows.iter().enumerate() {
        let mut nll = 0.0f64;
        for (pos, &target) in w.targets.iter().enumerate() {
            let row = &logits.data()[(wi * seq + pos) * vocab..(wi * seq + pos + 1) * vocab];
            // log-softmax in f64.
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                max = max.max(v as f64);
            }
            let mut lse = 0.0f64;
            for &v in row {
                lse += (v as f64 - max).exp();
            }
            nll += max + lse.ln() - row[target as usize] as f64;
        }
        out.push(nll);
    }
    Ok(out)
}

/// Mean NLL over all predicted tokens, in window-index order.
pub fn mean_nll(model: &ToyModel<f32>, windows: &[Window], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Contract("no evaluation windows".into()));
    }
    let batch_size = batch_size.max(1);
    let threads = worker_count().min(windows.len());
    let mut sums = vec![0.0f64; windows.len()];
    if threads <= 1 {
        for (i, chunk) in windows.chunks(batch_size).enumerate() {
            let refs: Vec<&Window> = chunk.iter().collect();
            let nlls = batch_window_nll(model, &refs)?;
            sums[i * batch_size..i * batch_size + nlls.len()].copy_from_slice(&nlls);
        }
    } else {
        let chunk_len = windows.len().div_ceil(threads);
        let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = windows
                .chunks(chunk_len)
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut part = Vec::with_capacity(chunk.len());
                        for batch in chunk.chunks(batch_size) {
                            let refs: Vec<&Window> = batch.iter().collect();
                            part.extend(batch_window_nll(model, &refs)?);
                        }
                        Ok(part)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut at = 0;
        for part in results {
            let part = part?;
            sums[at..at + part.len()].copy_from_slice(&part);
            at += part.len();
        }
    }
    let tokens: usize = windows.iter().map(|w| w.targets.len()).sum();
    let total: f64 = sums.iter().sum();
    let nll = total / tokens as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("mean NLL is {nll}")));
    }
    Ok(nll)
}

pub fn perplexity(model: &ToyModel<f32>, windows: &[Window], batch_size: usize) -> Result<EvalResult> {
    let nll = mean_nll(model, windows, batch_size)?;
    let tokens: usize = windows.iter().map(|w| w.targets.len()).sum();
    Ok(EvalResult { ppl: nll.exp(), nll_per_token: nll, token_count: tokens })
}
