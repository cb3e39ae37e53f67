//! Importance metrics.
//!
//! Channel sensitivity: the expected l1-norm of the output perturbation when
//! an input channel of a linear map is zeroed, which factors into
//! mean(|x_i|) * ||W[:,i]||_1 over the calibration activations. FFN channels
//! are scored on the down-projection; attention heads on the o-projection,
//! averaging the per-channel scores inside each head slice.
//!
//! Block influence (BI): one minus the mean per-token cosine between a
//! layer's input and output hidden states. Skip-block influence (SBI) is the
//! same quantity across a contiguous group of layers. Cosine is computed per
//! token vector and averaged over (sample, position); zero-norm tokens are
//! skipped and tallied instead of propagating NaN.
//!
//! The baseline layer scores (magnitude, taylor, posterior perplexity) mirror
//! the direct-layer-pruning heuristics this crate compares against.

use crate::error::{Error, Result};
use crate::eval::perplexity::mean_nll;
use crate::eval::Window;
use crate::model::{ActivationTrace, ModelConfig, TokenBatch, ToyModel};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Per-structure channel scores for one layer. Scores are nonnegative;
/// `head[h]` is the mean of the d_head per-channel o-projection input scores
/// inside head h.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelScores {
    pub layer: usize,
    pub ffn_channel: Vec<f64>,
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Bi,
    Magnitude,
    Taylor,
    PosteriorPpl,
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScoreMethod::Bi => "bi",
            ScoreMethod::Magnitude => "magnitude",
            ScoreMethod::Taylor => "taylor",
            ScoreMethod::PosteriorPpl => "posterior_ppl",
        };
        f.write_str(s)
    }
}

/// Raw per-layer scores plus their min-max normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerScoreSet {
    pub method: ScoreMethod,
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl LayerScoreSet {
    pub fn new(method: ScoreMethod, scores: Vec<f64>) -> Self {
        let normalized = normalize(&scores);
        LayerScoreSet { method, scores, normalized }
    }
}

/// (scores - min) / (max - min); all zeros when the scores are constant.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        scores.iter().map(|s| (s - min) / (max - min)).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

/// Sensitivity of each input channel of a linear map `weight_columns` (shape
/// [v, u], column i feeds input channel i) over calibration activations
/// `inputs` (shape [tokens, u]): s_i = mean_t(|x_ti|) * ||W[:, i]||_1.
pub fn channel_sensitivity<T: Scalar>(
    weight_columns: &Tensor<T>,
    inputs: &Tensor<T>,
) -> Result<Vec<f64>> {
    if weight_columns.ndim() != 2 {
        return Err(Error::Dimension("weight must be 2D".into()));
    }
    let (v, u) = (weight_columns.shape()[0], weight_columns.shape()[1]);
    let cols = inputs.last_dim();
    let tokens = inputs.rows_2d();
    if cols != u {
        return Err(Error::Dimension(format!(
            "weight has {u} input channels but activations have {cols}"
        )));
    }
    if tokens == 0 {
        return Err(Error::Contract("empty calibration set".into()));
    }
    let mut col_l1 = vec![0.0f64; u];
    for r in 0..v {
        let row = &weight_columns.data()[r * u..(r + 1) * u];
        for (i, &w) in row.iter().enumerate() {
            col_l1[i] += w.abs().as_f64();
        }
    }
    let mut mean_abs = vec![0.0f64; u];
    for t in 0..tokens {
        let row = &inputs.data()[t * u..(t + 1) * u];
        for (i, &x) in row.iter().enumerate() {
            mean_abs[i] += x.abs().as_f64();
        }
    }
    let n = tokens as f64;
    Ok(mean_abs.iter().zip(&col_l1).map(|(&m, &w)| (m / n) * w).collect())
}

/// Channel scores for one layer: FFN channels from the down projection and
/// its intermediate activations, heads from the o projection and the
/// attention context. The trace must have captured both for this layer.
pub fn score_layer_channels<T: Scalar>(
    model: &ToyModel<T>,
    trace: &ActivationTrace<T>,
    layer_index: usize,
) -> Result<ChannelScores> {
    let layer = model
        .layers
        .get(layer_index)
        .ok_or_else(|| Error::Contract(format!("layer {layer_index} out of range")))?;
    let inter = trace.ffn_intermediate.get(layer_index).and_then(|o| o.as_ref()).ok_or_else(
        || Error::Contract(format!("ffn_intermediate not captured for layer {layer_index}")),
    )?;
    let ctx = trace.attn_context.get(layer_index).and_then(|o| o.as_ref()).ok_or_else(|| {
        Error::Contract(format!("attn_context not captured for layer {layer_index}"))
    })?;
    let ffn_channel = channel_sensitivity(&layer.down, inter)?;
    let per_channel = channel_sensitivity(&layer.o, ctx)?;
    let (n_heads, d_head) = (model.config.n_heads, model.config.d_head);
    let head = (0..n_heads)
        .map(|h| {
            let slice = &per_channel[h * d_head..(h + 1) * d_head];
            slice.iter().sum::<f64>() / d_head as f64
        })
        .collect();
    Ok(ChannelScores { layer: layer_index, ffn_channel, head })
}

/// Zero-norm token tally from a BI/SBI computation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CosineDiagnostics {
    pub skipped_tokens: usize,
    /// Set when every token of some comparison was skipped (score forced to 0).
    pub degenerate: bool,
}

/// 1 - mean per-token cosine between `hidden[from]` and `hidden[to]`.
/// BI and SBI both come through here, so their equality at m = 0 is the same
/// code path rather than a numerical coincidence.
fn cosine_influence<T: Scalar>(
    trace: &ActivationTrace<T>,
    from: usize,
    to: usize,
    diag: &mut CosineDiagnostics,
) -> f64 {
    let a = &trace.hidden[from];
    let b = &trace.hidden[to];
    let d = a.last_dim();
    let rows = a.rows_2d();
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    for r in 0..rows {
        let ar = &a.data()[r * d..(r + 1) * d];
        let br = &b.data()[r * d..(r + 1) * d];
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..d {
            let (x, y) = (ar[i].as_f64(), br[i].as_f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            diag.skipped_tokens += 1;
            continue;
        }
        sum += dot / (na.sqrt() * nb.sqrt());
        counted += 1;
    }
    if counted == 0 {
        diag.degenerate = true;
        return 0.0;
    }
    1.0 - sum / counted as f64
}

/// Block influence of every layer: bi[l] compares hidden[l] with hidden[l+1].
pub fn bi_scores<T: Scalar>(trace: &ActivationTrace<T>) -> (Vec<f64>, CosineDiagnostics) {
    let mut diag = CosineDiagnostics::default();
    let scores =
        (0..trace.n_layers()).map(|l| cosine_influence(trace, l, l + 1, &mut diag)).collect();
    (scores, diag)
}

/// Skip-block influence of the group starting at `start` spanning `m + 1`
/// layers: compares hidden[start] with hidden[start + m + 1]. `sbi_score(t, l,
/// 0)` equals `bi_scores(t)[l]` exactly.
pub fn sbi_score<T: Scalar>(
    trace: &ActivationTrace<T>,
    start: usize,
    m: usize,
) -> Result<(f64, CosineDiagnostics)> {
    let end = start + m + 1;
    if end >= trace.hidden.len() {
        return Err(Error::Contract(format!(
            "sbi group [{start}, {}] exceeds {} layers",
            start + m,
            trace.n_layers()
        )));
    }
    let mut diag = CosineDiagnostics::default();
    let score = cosine_influence(trace, start, end, &mut diag);
    Ok((score, diag))
}

/// Sum of |w| over all nine tensors of each layer, norm gammas included.
pub fn magnitude_importance<T: Scalar>(model: &ToyModel<T>) -> LayerScoreSet {
    let scores = model
        .layers
        .iter()
        .map(|l| l.tensors().iter().map(|t| t.l1().as_f64()).sum())
        .collect();
    LayerScoreSet::new(ScoreMethod::Magnitude, scores)
}

/// Per layer, sum over the layer's weights of |dL/dw * w| where L is the mean
/// next-token cross-entropy on the calibration batch.
pub fn taylor_importance<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &TokenBatch,
    targets: &[u32],
) -> Result<LayerScoreSet> {
    let mut tape = Tape::new();
    let fwd = model.forward_tape(&mut tape, inputs, None, true)?;
    let logits = fwd.logits.expect("requested logits");
    let loss = tape.cross_entropy(logits, targets)?;
    let grads = tape.backward(loss)?;
    let mut scores = Vec::with_capacity(model.layers.len());
    for (li, layer_vars) in fwd.params.layers.iter().enumerate() {
        let mut acc = 0.0f64;
        for (var, tensor) in layer_vars.vars().iter().zip(model.layers[li].tensors()) {
            if let Some(g) = grads.get(*var) {
                for (gv, wv) in g.data().iter().zip(tensor.data()) {
                    acc += (gv.as_f64() * wv.as_f64()).abs();
                }
            }
        }
        scores.push(acc);
    }
    Ok(LayerScoreSet::new(ScoreMethod::Taylor, scores))
}

/// `taylor_importance` over a window set, accumulating gradients in chunks so
/// tape memory stays bounded by the chunk size.
pub fn taylor_importance_windows(
    model: &ToyModel<f32>,
    windows: &[Window],
    chunk_windows: usize,
) -> Result<LayerScoreSet> {
    if windows.is_empty() {
        return Err(Error::Contract("empty calibration set".into()));
    }
    let chunk_windows = chunk_windows.max(1);
    let total_tokens: usize = windows.iter().map(|w| w.targets.len()).sum();
    // Mean-loss gradients accumulate as token-weighted chunk means.
    let mut acc: Vec<Vec<Tensor<f64>>> =
        model.layers.iter().map(|l| l.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()).collect();
    for chunk in windows.chunks(chunk_windows) {
        let seq = chunk[0].seq();
        let mut ids = Vec::with_capacity(chunk.len() * seq);
        let mut targets = Vec::with_capacity(chunk.len() * seq);
        for w in chunk {
            if w.seq() != seq {
                return Err(Error::Contract("calibration windows must share seq".into()));
            }
            ids.extend_from_slice(&w.input);
            targets.extend_from_slice(&w.targets);
        }
        let batch = TokenBatch::new(chunk.len(), seq, ids)?;
        let weight = targets.len() as f64 / total_tokens as f64;
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &batch, None, true)?;
        let loss = tape.cross_entropy(fwd.logits.expect("requested logits"), &targets)?;
        let grads = tape.backward(loss)?;
        for (li, lv) in fwd.params.layers.iter().enumerate() {
            for (slot, var) in acc[li].iter_mut().zip(lv.vars()) {
                if let Some(g) = grads.get(var) {
                    for (dst, src) in slot.data_mut().iter_mut().zip(g.data()) {
                        *dst += *src as f64 * weight;
                    }
                }
            }
        }
    }
    let scores = model
        .layers
        .iter()
        .zip(&acc)
        .map(|(layer, grads)| {
            layer
                .tensors()
                .iter()
                .zip(grads)
                .map(|(w, g)| {
                    w.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&wv, &gv)| (gv * wv as f64).abs())
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(LayerScoreSet::new(ScoreMethod::Taylor, scores))
}

/// Score each layer by the mean NLL of the model with that layer removed
/// (lower = more redundant). The greedy iterative variant lives in the
/// pruner, which re-runs this on the current model each round.
pub fn posterior_ppl_importance(
    model: &ToyModel<f32>,
    windows: &[Window],
    batch_size: usize,
) -> Result<LayerScoreSet> {
    if model.n_layers() < 2 {
        return Err(Error::Contract("posterior scoring needs at least 2 layers".into()));
    }
    let mut scores = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let candidate = model.without_layer(l)?;
        scores.push(mean_nll(&candidate, windows, batch_size)?);
    }
    Ok(LayerScoreSet::new(ScoreMethod::PosteriorPpl, scores))
}

/// Report rows for the `score` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_layers: usize,
    pub methods: Vec<LayerScoreSet>,
}

/// Configuration sanity for traces produced elsewhere.
pub fn check_trace_shape<T: Scalar>(cfg: &ModelConfig, trace: &ActivationTrace<T>) -> Result<()> {
    if trace.hidden.len() != cfg.n_layers + 1 {
        return Err(Error::Contract(format!(
            "trace has {} hidden entries for {} layers",
            trace.hidden.len(),
            cfg.n_layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CaptureSpec;
    use crate::rng::CounterRng;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn sensitivity_hand_case() {
        // W = [[1,0],[0,2]], single token x = [1,1] -> s = [1, 2]
        let w = t64(&[2, 2], &[1., 0., 0., 2.]);
        let x = t64(&[1, 2], &[1., 1.]);
        let s = channel_sensitivity(&w, &x).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
    }

    #[test]
    fn sensitivity_dead_channel_scores_zero() {
        let w = t64(&[2, 2], &[1., 2., 3., 4.]);
        let x = t64(&[1, 2], &[0., 5.]);
        let s = channel_sensitivity(&w, &x).unwrap();
        assert_eq!(s, vec![0.0, 30.0]);
    }

    #[test]
    fn sensitivity_empty_calibration_is_contract_error() {
        let w = t64(&[2, 2], &[1., 0., 0., 2.]);
        let x = Tensor::<f64>::zeros(&[0, 2]);
        assert!(matches!(channel_sensitivity(&w, &x), Err(Error::Contract(_))));
    }

    /// Brute-force oracle: mean over tokens of ||W x - W x|_{x_i = 0}||_1.
    fn zeroing_oracle(w: &Tensor<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let (_v, u) = (w.shape()[0], w.shape()[1]);
        let tokens = x.shape()[0];
        let mut scores = vec![0.0; u];
        for i in 0..u {
            let mut acc = 0.0;
            for t in 0..tokens {
                let full = Tensor::matmul(w, false, &x.slice_axis(0, t, 1).unwrap(), true).unwrap();
                let mut xz = x.slice_axis(0, t, 1).unwrap();
                xz.data_mut()[i] = 0.0;
                let cut = Tensor::matmul(w, false, &xz, true).unwrap();
                acc += full
                    .data()
                    .iter()
                    .zip(cut.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            }
            scores[i] = acc / tokens as f64;
        }
        scores
    }

    #[test]
    fn sensitivity_matches_zeroing_oracle() {
        let mut rng = CounterRng::new(31);
        let w = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[64, 8], 1.0, &mut rng);
        let s = channel_sensitivity(&w, &x).unwrap();
        let oracle = zeroing_oracle(&w, &x);
        for (a, b) in s.iter().zip(&oracle) {
            let rel = (a - b).abs() / b.abs().max(1e-300);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sensitivity_is_1_homogeneous_in_the_column() {
        let mut rng = CounterRng::new(37);
        let w = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[16, 5], 1.0, &mut rng);
        let base = channel_sensitivity(&w, &x).unwrap();
        let mut w2 = w.clone();
        for r in 0..6 {
            w2.data_mut()[r * 5 + 2] *= 3.0;
        }
        let scaled = channel_sensitivity(&w2, &x).unwrap();
        for i in 0..5 {
            if i == 2 {
                assert!((scaled[i] - 3.0 * base[i]).abs() < 1e-9 * base[i].max(1.0));
            } else {
                assert_eq!(scaled[i], base[i]);
            }
        }
    }

    fn trace_from(hs: Vec<Tensor<f64>>) -> ActivationTrace<f64> {
        let n = hs.len() - 1;
        ActivationTrace { hidden: hs, ffn_intermediate: vec![None; n], attn_context: vec![None; n] }
    }

    #[test]
    fn bi_zero_on_identical_and_two_on_antipodal() {
        let mut rng = CounterRng::new(41);
        let h = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let anti = h.scale(-1.0);
        let (bi, diag) = bi_scores(&trace_from(vec![h.clone(), h.clone(), anti]));
        assert_eq!(bi[0], 0.0);
        assert!((bi[1] - 2.0).abs() < 1e-12);
        assert_eq!(diag.skipped_tokens, 0);
    }

    #[test]
    fn bi_skips_zero_norm_tokens() {
        let mut a = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        // Second token of the input side is all zeros.
        a.data_mut()[2] = 0.0;
        a.data_mut()[3] = 0.0;
        let b = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let (bi, diag) = bi_scores(&trace_from(vec![a, b]));
        assert_eq!(diag.skipped_tokens, 1);
        assert!(bi[0].abs() < 1e-12);
    }

    #[test]
    fn bi_degenerate_all_skipped_yields_zero() {
        let z = Tensor::<f64>::zeros(&[1, 2, 2]);
        let (bi, diag) = bi_scores(&trace_from(vec![z.clone(), z]));
        assert_eq!(bi[0], 0.0);
        assert!(diag.degenerate);
    }

    #[test]
    fn sbi_at_m0_equals_bi_bitwise() {
        for seed in 0..10 {
            let mut rng = CounterRng::new(100 + seed);
            let hs: Vec<Tensor<f64>> =
                (0..5).map(|_| Tensor::<f64>::randn(&[2, 4, 8], 1.0, &mut rng)).collect();
            let trace = trace_from(hs);
            let (bi, _) = bi_scores(&trace);
            for l in 0..4 {
                let (s, _) = sbi_score(&trace, l, 0).unwrap();
                assert_eq!(s.to_bits(), bi[l].to_bits());
            }
        }
    }

    #[test]
    fn sbi_range_check() {
        let mut rng = CounterRng::new(43);
        let hs: Vec<Tensor<f64>> =
            (0..3).map(|_| Tensor::<f64>::randn(&[1, 2, 4], 1.0, &mut rng)).collect();
        let trace = trace_from(hs);
        assert!(sbi_score(&trace, 1, 1).is_err());
        assert!(sbi_score(&trace, 0, 1).is_ok());
    }

    #[test]
    fn bi_invariant_to_positive_token_rescaling() {
        let mut rng = CounterRng::new(47);
        let a = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng);
        let (bi, _) = bi_scores(&trace_from(vec![a.clone(), b.clone()]));
        // Rescale each token of both sides by its own positive factor.
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for t in 0..3 {
            let f = 0.5 + t as f64;
            for i in 0..4 {
                a2.data_mut()[t * 4 + i] *= f;
                b2.data_mut()[t * 4 + i] *= 2.0 * f;
            }
        }
        let (bi2, _) = bi_scores(&trace_from(vec![a2, b2]));
        assert!((bi[0] - bi2[0]).abs() < 1e-12);
    }

    #[test]
    fn direct_per_token_oracle_for_bi() {
        let mut rng = CounterRng::new(53);
        let a = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        let (bi, _) = bi_scores(&trace_from(vec![a.clone(), b.clone()]));
        let mut acc = 0.0;
        for t in 0..10 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for i in 0..6 {
                dot += a.data()[t * 6 + i] * b.data()[t * 6 + i];
                na += a.data()[t * 6 + i].powi(2);
                nb += b.data()[t * 6 + i].powi(2);
            }
            acc += dot / (na.sqrt() * nb.sqrt());
        }
        let oracle = 1.0 - acc / 10.0;
        assert!((bi[0] - oracle).abs() < 1e-7);
    }

    #[test]
    fn magnitude_zero_layer_and_homogeneity() {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers: 2,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(59);
        let mut model = ToyModel::<f64>::init(cfg.clone(), &mut rng).unwrap();
        for t in model.layers[0].tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let set = magnitude_importance(&model);
        assert_eq!(set.scores[0], 0.0);
        // Doubling a layer doubles its score exactly.
        let before = set.scores[1];
        for t in model.layers[1].tensors_mut() {
            *t = t.scale(2.0);
        }
        let after = magnitude_importance(&model).scores[1];
        assert_eq!(after, 2.0 * before);
        // Oracle: direct abs-sum.
        let direct: f64 = model.layers[1]
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert_eq!(after, direct);
    }

    #[test]
    fn normalized_hits_zero_and_one() {
        let set = LayerScoreSet::new(ScoreMethod::Magnitude, vec![3.0, 1.0, 2.0]);
        assert_eq!(set.normalized, vec![1.0, 0.0, 0.5]);
        let flat = LayerScoreSet::new(ScoreMethod::Magnitude, vec![2.0, 2.0]);
        assert_eq!(flat.normalized, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_heads_score_equal() {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers: 1,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(61);
        let mut model = ToyModel::<f64>::init(cfg.clone(), &mut rng).unwrap();
        // Clone head 0 of q/k/v rows and o columns into head 1.
        let d = cfg.d_model;
        let dh = cfg.d_head;
        {
            let layer = &mut model.layers[0];
            for t in [&mut layer.q, &mut layer.k, &mut layer.v] {
                let (head0, rest) = t.data_mut().split_at_mut(dh * d);
                rest[..dh * d].copy_from_slice(head0);
            }
        }
        let o = &mut model.layers[0].o;
        for r in 0..d {
            for c in 0..dh {
                let v = o.data()[r * d + c];
                o.data_mut()[r * d + dh + c] = v;
            }
        }
        let ids: Vec<u32> = (0..16).map(|i| (i * 13 % 258) as u32).collect();
        let toks = TokenBatch::new(2, 8, ids).unwrap();
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        let scores = score_layer_channels(&model, &trace, 0).unwrap();
        // Identical head weights + identical inputs -> identical context slices.
        assert!(
            (scores.head[0] - scores.head[1]).abs() < 1e-12,
            "{:?}",
            scores.head
        );
    }

    #[test]
    fn zeroed_down_column_scores_zero() {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers: 1,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(67);
        let mut model = ToyModel::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let down = &mut model.layers[0].down;
        let (rows, cols) = (down.shape()[0], down.shape()[1]);
        for r in 0..rows {
            down.data_mut()[r * cols + 3] = 0.0;
        }
        let ids: Vec<u32> = (0..8).map(|i| (i * 31 % 258) as u32).collect();
        let toks = TokenBatch::new(1, 8, ids).unwrap();
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        let scores = score_layer_channels(&model, &trace, 0).unwrap();
        assert_eq!(scores.ffn_channel[3], 0.0);
        assert!(scores.ffn_channel.iter().all(|&s| s >= 0.0 && s.is_finite()));
    }

    #[test]
    fn missing_captures_is_contract_error() {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers: 1,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(71);
        let model = ToyModel::<f32>::init(cfg, &mut rng).unwrap();
        let toks = TokenBatch::new(1, 4, vec![1, 2, 3, 4]).unwrap();
        let (_, trace) = model.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        assert!(matches!(
            score_layer_channels(&model, &trace, 0),
            Err(Error::Contract(_))
        ));
    }
}
