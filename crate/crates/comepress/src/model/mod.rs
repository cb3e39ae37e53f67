//! Decoder-only transformer at desk scale.
//!
//! Pre-norm residual blocks with RMSNorm, rotary positions on q/k, SiLU-gated
//! FFN, no biases, untied embedding/unembedding. Multi-head attention only
//! (no grouped-query variants): the merge rules treat each head as an atomic
//! unit, which requires the plain MHA layout.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::nn;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Default toy shape: minutes-scale CPU runs, byte-level vocabulary.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 258,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            n_layers: 8,
            max_seq: 128,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size < 258 {
            return Err(Error::Config(format!(
                "vocab_size {} below byte vocabulary minimum 258",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config("d_head must be even for rotary positions".into()));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 0.0) {
            return Err(Error::Config("rms_eps and rope_base must be positive".into()));
        }
        Ok(())
    }
}

/// One decoder layer. q/k/v/o are [d_model, d_model] with n_heads contiguous
/// head blocks (q/k/v by output rows, o by input columns). gate/up row i and
/// down column i together define FFN intermediate channel i.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights<T> {
    pub attn_norm_gamma: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub o: Tensor<T>,
    pub ffn_norm_gamma: Tensor<T>,
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

pub const LAYER_TENSOR_NAMES: [&str; 9] =
    ["attn_norm_gamma", "q", "k", "v", "o", "ffn_norm_gamma", "gate", "up", "down"];

impl<T: Scalar> DecoderLayerWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        DecoderLayerWeights {
            attn_norm_gamma: Tensor::full(&[d], T::one()),
            q: Tensor::zeros(&[d, d]),
            k: Tensor::zeros(&[d, d]),
            v: Tensor::zeros(&[d, d]),
            o: Tensor::zeros(&[d, d]),
            ffn_norm_gamma: Tensor::full(&[d], T::one()),
            gate: Tensor::zeros(&[cfg.d_ff, d]),
            up: Tensor::zeros(&[cfg.d_ff, d]),
            down: Tensor::zeros(&[d, cfg.d_ff]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm_gamma,
            &self.q,
            &self.k,
            &self.v,
            &self.o,
            &self.ffn_norm_gamma,
            &self.gate,
            &self.up,
            &self.down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm_gamma,
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.ffn_norm_gamma,
            &mut self.gate,
            &mut self.up,
            &mut self.down,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> DecoderLayerWeights<U> {
        DecoderLayerWeights {
            attn_norm_gamma: self.attn_norm_gamma.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            ffn_norm_gamma: self.ffn_norm_gamma.cast(),
            gate: self.gate.cast(),
            up: self.up.cast(),
            down: self.down.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<DecoderLayerWeights<T>>,
    pub final_norm_gamma: Tensor<T>,
    pub unembed: Tensor<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Seeded Gaussian init (std 0.02), norms at one.
    pub fn init(config: ModelConfig, rng: &mut CounterRng) -> Result<Self> {
        config.validate()?;
        let std = 0.02;
        let d = config.d_model;
        let r = rng.derive(0xe_b0);
        let embed = Tensor::randn(&[config.vocab_size, d], std, &mut r.derive(1));
        let unembed = Tensor::randn(&[config.vocab_size, d], std, &mut r.derive(2));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let lr = r.derive(100 + l as u64);
            layers.push(DecoderLayerWeights {
                attn_norm_gamma: Tensor::full(&[d], T::one()),
                q: Tensor::randn(&[d, d], std, &mut lr.derive(0)),
                k: Tensor::randn(&[d, d], std, &mut lr.derive(1)),
                v: Tensor::randn(&[d, d], std, &mut lr.derive(2)),
                o: Tensor::randn(&[d, d], std, &mut lr.derive(3)),
                ffn_norm_gamma: Tensor::full(&[d], T::one()),
                gate: Tensor::randn(&[config.d_ff, d], std, &mut lr.derive(4)),
                up: Tensor::randn(&[config.d_ff, d], std, &mut lr.derive(5)),
                down: Tensor::randn(&[d, config.d_ff], std, &mut lr.derive(6)),
            });
        }
        Ok(ToyModel {
            config,
            embed,
            layers,
            final_norm_gamma: Tensor::full(&[d], T::one()),
            unembed,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            final_norm_gamma: self.final_norm_gamma.cast(),
            unembed: self.unembed.cast(),
        }
    }

    /// Clone with one layer removed; config.n_layers follows.
    pub fn without_layer(&self, layer: usize) -> Result<ToyModel<T>> {
        if layer >= self.layers.len() {
            return Err(Error::Contract(format!(
                "layer {layer} out of range {}",
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        out.layers.remove(layer);
        out.config.n_layers = out.layers.len();
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.embed.numel() + self.unembed.numel() + self.final_norm_gamma.numel();
        for l in &self.layers {
            n += l.tensors().iter().map(|t| t.numel()).sum::<usize>();
        }
        n
    }
}

/// Token ids laid out row-major [batch, seq].
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "{} ids for batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }
}

/// Which activations `forward` keeps. Hidden states are always captured;
/// the per-layer extras are opt-in (and can be restricted to a layer range)
/// because they dominate trace memory.
#[derive(Debug, Clone, Default)]
pub struct CaptureSpec {
    pub ffn_intermediate: bool,
    pub attn_context: bool,
    /// Inclusive layer range for the optional captures.
    pub layer_range: Option<(usize, usize)>,
}

impl CaptureSpec {
    pub fn hidden_only() -> Self {
        CaptureSpec::default()
    }

    pub fn full() -> Self {
        CaptureSpec { ffn_intermediate: true, attn_context: true, layer_range: None }
    }

    pub fn for_layers(start: usize, end: usize) -> Self {
        CaptureSpec { ffn_intermediate: true, attn_context: true, layer_range: Some((start, end)) }
    }

    fn wants(&self, layer: usize) -> bool {
        match self.layer_range {
            Some((s, e)) => layer >= s && layer <= e,
            None => true,
        }
    }
}

/// Per-layer hidden states captured over a batch.
///
/// `hidden[0]` is the post-embedding stream; `hidden[l + 1]` is the output of
/// layer `l`, giving n_layers + 1 entries of shape [batch, seq, d_model].
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub hidden: Vec<Tensor<T>>,
    pub ffn_intermediate: Vec<Option<Tensor<T>>>,
    pub attn_context: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() - 1
    }
}

impl<T: Scalar> ToyModel<T> {
    /// y = x @ w^T where x is [..., in] and w is [out, in].
    fn linear_t(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = x.rows_2d();
        let k = x.last_dim();
        if w.ndim() != 2 || w.shape()[1] != k {
            return Err(Error::Dimension(format!(
                "linear weight {:?} does not accept input dim {k}",
                w.shape()
            )));
        }
        let out_dim = w.shape()[0];
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut out = Tensor::zeros(&out_shape);
        unsafe {
            T::gemm(
                rows,
                k,
                out_dim,
                x.data().as_ptr(),
                k as isize,
                1,
                w.data().as_ptr(),
                1,
                k as isize,
                T::zero(),
                out.data_mut().as_mut_ptr(),
                out_dim as isize,
                1,
            );
        }
        Ok(out)
    }

    fn validate_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq {
            return Err(Error::Input(format!(
                "seq {} exceeds max_seq {}",
                tokens.seq, self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &TokenBatch) -> Tensor<T> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.ids.len() * d);
        for &id in &tokens.ids {
            let id = id as usize;
            data.extend_from_slice(&self.embed.data()[id * d..(id + 1) * d]);
        }
        Tensor::from_vec(vec![tokens.batch, tokens.seq, d], data).expect("counted")
    }

    /// Causal forward pass. Returns logits [batch, seq, vocab] and the trace.
    pub fn forward(
        &self,
        tokens: &TokenBatch,
        capture: &CaptureSpec,
    ) -> Result<(Tensor<T>, ActivationTrace<T>)> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let eps = T::from_f64(cfg.rms_eps);
        let mut x = self.embed_tokens(tokens);
        let mut trace = ActivationTrace {
            hidden: Vec::with_capacity(self.layers.len() + 1),
            ffn_intermediate: vec![None; self.layers.len()],
            attn_context: vec![None; self.layers.len()],
        };
        trace.hidden.push(x.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let keep = capture.wants(li);
            let xn = nn::rms_norm(&x, &layer.attn_norm_gamma, eps)?;
            let q = nn::rope(&Self::linear_t(&xn, &layer.q)?, cfg.n_heads, cfg.rope_base, false)?;
            let k = nn::rope(&Self::linear_t(&xn, &layer.k)?, cfg.n_heads, cfg.rope_base, false)?;
            let v = Self::linear_t(&xn, &layer.v)?;
            let (ctx, _) = nn::causal_attention(&q, &k, &v, cfg.n_heads, false)?;
            if capture.attn_context && keep {
                trace.attn_context[li] = Some(ctx.clone());
            }
            x = x.add(&Self::linear_t(&ctx, &layer.o)?)?;
            let yn = nn::rms_norm(&x, &layer.ffn_norm_gamma, eps)?;
            let gate = nn::silu(&Self::linear_t(&yn, &layer.gate)?);
            let up = Self::linear_t(&yn, &layer.up)?;
            let inter = gate.mul(&up)?;
            if capture.ffn_intermediate && keep {
                trace.ffn_intermediate[li] = Some(inter.clone());
            }
            x = x.add(&Self::linear_t(&inter, &layer.down)?)?;
            trace.hidden.push(x.clone());
        }
        let fin = nn::rms_norm(&x, &self.final_norm_gamma, eps)?;
        let logits = Self::linear_t(&fin, &self.unembed)?;
        Ok((logits, trace))
    }
}

/// Tape handles for every model parameter.
pub struct LayerVars {
    pub attn_norm_gamma: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub ffn_norm_gamma: Var,
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

impl LayerVars {
    pub fn vars(&self) -> [Var; 9] {
        [
            self.attn_norm_gamma,
            self.q,
            self.k,
            self.v,
            self.o,
            self.ffn_norm_gamma,
            self.gate,
            self.up,
            self.down,
        ]
    }
}

pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm_gamma: Var,
    pub unembed: Var,
}

pub struct TapeForward {
    pub params: ModelVars,
    /// hidden[0] is the embedding output; hidden[l + 1] the output of layer l.
    pub hidden: Vec<Var>,
    /// Logits flattened to [batch * seq, vocab]; present only when requested.
    pub logits: Option<Var>,
}

impl<T: Scalar> ToyModel<T> {
    /// Stage every parameter as a tape leaf.
    pub fn stage_params(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            embed: tape.leaf(self.embed.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm_gamma: tape.leaf(l.attn_norm_gamma.clone()),
                    q: tape.leaf(l.q.clone()),
                    k: tape.leaf(l.k.clone()),
                    v: tape.leaf(l.v.clone()),
                    o: tape.leaf(l.o.clone()),
                    ffn_norm_gamma: tape.leaf(l.ffn_norm_gamma.clone()),
                    gate: tape.leaf(l.gate.clone()),
                    up: tape.leaf(l.up.clone()),
                    down: tape.leaf(l.down.clone()),
                })
                .collect(),
            final_norm_gamma: tape.leaf(self.final_norm_gamma.clone()),
            unembed: tape.leaf(self.unembed.clone()),
        }
    }

    /// Differentiable forward on the tape. `upto_layer` (inclusive) limits the
    /// pass for feature-level training; logits are skipped unless requested.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &TokenBatch,
        upto_layer: Option<usize>,
        with_logits: bool,
    ) -> Result<TapeForward> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let (b, s, d) = (tokens.batch, tokens.seq, cfg.d_model);
        let params = self.stage_params(tape);
        let last = upto_layer.unwrap_or(self.layers.len().saturating_sub(1));
        if last >= self.layers.len() {
            return Err(Error::Contract(format!(
                "upto_layer {last} out of range {}",
                self.layers.len()
            )));
        }
        let mut hidden = Vec::with_capacity(last + 2);
        let mut x = tape.embedding(params.embed, &tokens.ids, b, s)?;
        hidden.push(x);
        for (li, lv) in params.layers.iter().enumerate().take(last + 1) {
            let xn = tape.rms_norm(x, lv.attn_norm_gamma, cfg.rms_eps)?;
            let xn2 = tape.reshape(xn, &[b * s, d])?;
            let q2 = tape.matmul(xn2, false, lv.q, true)?;
            let k2 = tape.matmul(xn2, false, lv.k, true)?;
            let v2 = tape.matmul(xn2, false, lv.v, true)?;
            let q = {
                let q3 = tape.reshape(q2, &[b, s, d])?;
                tape.rope(q3, cfg.n_heads, cfg.rope_base)?
            };
            let k = {
                let k3 = tape.reshape(k2, &[b, s, d])?;
                tape.rope(k3, cfg.n_heads, cfg.rope_base)?
            };
            let v = tape.reshape(v2, &[b, s, d])?;
            let ctx = tape.causal_attention(q, k, v, cfg.n_heads)?;
            let ctx2 = tape.reshape(ctx, &[b * s, d])?;
            let attn_out = tape.matmul(ctx2, false, lv.o, true)?;
            let attn3 = tape.reshape(attn_out, &[b, s, d])?;
            x = tape.add(x, attn3)?;
            let yn = tape.rms_norm(x, lv.ffn_norm_gamma, cfg.rms_eps)?;
            let yn2 = tape.reshape(yn, &[b * s, d])?;
            let g = tape.matmul(yn2, false, lv.gate, true)?;
            let u = tape.matmul(yn2, false, lv.up, true)?;
            let sg = tape.silu(g);
            let inter = tape.mul(sg, u)?;
            let down_out = tape.matmul(inter, false, lv.down, true)?;
            let d3 = tape.reshape(down_out, &[b, s, d])?;
            x = tape.add(x, d3)?;
            hidden.push(x);
            let _ = li;
        }
        let logits = if with_logits {
            let fin = tape.rms_norm(x, params.final_norm_gamma, cfg.rms_eps)?;
            let fin2 = tape.reshape(fin, &[b * s, d])?;
            Some(tape.matmul(fin2, false, params.unembed, true)?)
        } else {
            None
        };
        Ok(TapeForward { params, hidden, logits })
    }
}
