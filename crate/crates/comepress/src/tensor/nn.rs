//! Neural-net kernels shared by the inference forward pass and the tape ops.
//!
//! Keeping one set of kernels bounds the risk of the two paths drifting
//! apart; `forward_tape_matches_plain` in the model tests pins them together.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(data[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                sum = sum + e;
            }
            for j in 0..n {
                data[base + j * inner] = data[base + j * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Backward of softmax given its output `p` and upstream grad `g`:
/// dx = p * (g - sum(g * p, axis)).
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = p.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let mut dx = Tensor::zeros(shape);
    let (pd, gd, xd) = (p.data(), g.data(), dx.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + pd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..n {
                let k = base + j * inner;
                xd[k] = pd[k] * (gd[k] - dot);
            }
        }
    }
    dx
}

/// y = x / sqrt(mean(x^2) + eps) * gamma over the last axis.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.shape() != [d] {
        return Err(Error::Dimension(format!(
            "rms_norm gamma shape {:?} does not match last dim {d}",
            gamma.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Contract("rms_norm eps must be > 0".into()));
    }
    let rows = x.rows_2d();
    let mut out = x.clone();
    let od = out.data_mut();
    let gd = gamma.data();
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &mut od[r * d..(r + 1) * d];
        let mut ms = T::zero();
        for &v in row.iter() {
            ms = ms + v * v;
        }
        let a = (ms * inv_d + eps).sqrt().recip();
        for (v, &g) in row.iter_mut().zip(gd) {
            *v = *v * a * g;
        }
    }
    Ok(out)
}

/// Backward of rms_norm. Returns (dx, dgamma).
pub fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let rows = x.rows_2d();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let inv_d = T::one() / T::from_f64(d as f64);
    let (xd, gd, ud) = (x.data(), gamma.data(), g.data());
    let dgd = dgamma.data_mut();
    let dxd = dx.data_mut();
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let ur = &ud[r * d..(r + 1) * d];
        let mut ms = T::zero();
        for &v in xr {
            ms = ms + v * v;
        }
        let a = (ms * inv_d + eps).sqrt().recip();
        // s = sum_i u_i * gamma_i * x_i
        let mut s = T::zero();
        for i in 0..d {
            s = s + ur[i] * gd[i] * xr[i];
            dgd[i] = dgd[i] + ur[i] * xr[i] * a;
        }
        let a3 = a * a * a;
        for i in 0..d {
            dxd[r * d + i] = a * gd[i] * ur[i] - a3 * inv_d * xr[i] * s;
        }
    }
    (dx, dgamma)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    x.zip_map(g, |v, gv| {
        let s = sigmoid(v);
        gv * s * (T::one() + v * (T::one() - s))
    })
    .expect("shapes checked at op creation")
}

fn sigmoid<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Rotary position embedding over `[batch, seq, d_model]`, applied per head.
/// Channel pairs are (i, i + d_head/2) within each head slice; position index
/// is the sequence position. `inverse` rotates by the negative angle, which is
/// the backward map since rotation is orthogonal.
pub fn rope<T: Scalar>(x: &Tensor<T>, n_heads: usize, base: f64, inverse: bool) -> Result<Tensor<T>> {
    rope_with_offset(x, n_heads, base, inverse, 0)
}

/// `rope` with all positions shifted by `pos_offset`.
pub fn rope_with_offset<T: Scalar>(
    x: &Tensor<T>,
    n_heads: usize,
    base: f64,
    inverse: bool,
    pos_offset: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("rope wants [batch, seq, d], got {shape:?}")));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if d % n_heads != 0 {
        return Err(Error::Dimension(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    if dh % 2 != 0 {
        return Err(Error::Dimension(format!("head dim {dh} must be even for rope")));
    }
    let half = dh / 2;
    let mut out = x.clone();
    let od = out.data_mut();
    let sign = if inverse { -1.0 } else { 1.0 };
    for bi in 0..b {
        for pos in 0..s {
            let row = (bi * s + pos) * d;
            for h in 0..n_heads {
                let hoff = row + h * dh;
                for i in 0..half {
                    let theta = sign
                        * (pos + pos_offset) as f64
                        * base.powf(-2.0 * i as f64 / dh as f64);
                    let (sin_t, cos_t) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                    let a = od[hoff + i];
                    let c = od[hoff + i + half];
                    od[hoff + i] = a * cos_t - c * sin_t;
                    od[hoff + i + half] = a * sin_t + c * cos_t;
                }
            }
        }
    }
    Ok(out)
}

/// Causal multi-head attention forward.
///
/// q, k, v: `[batch, seq, d_model]` already rotated; returns the per-token
/// context (the o-projection input). When `keep_probs` is set the attention
/// probabilities `[batch, heads, seq, seq]` are returned for the backward
/// pass; inference leaves them out to keep memory flat.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    keep_probs: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let shape = q.shape();
    if shape.len() != 3 || k.shape() != shape || v.shape() != shape {
        return Err(Error::Dimension(format!(
            "attention wants matching [batch, seq, d] inputs, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if d % n_heads != 0 {
        return Err(Error::Dimension(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = Tensor::zeros(&[b, s, d]);
    let mut probs = if keep_probs { Some(Tensor::<T>::zeros(&[b, n_heads, s, s])) } else { None };
    let mut scores = vec![T::zero(); s * s];
    for bi in 0..b {
        for h in 0..n_heads {
            head_scores(q, k, bi, h, dh, n_heads, &mut scores);
            // Causal softmax row by row over the prefix.
            for i in 0..s {
                let row = &mut scores[i * s..(i + 1) * s];
                let mut max = T::neg_infinity();
                for &x in row[..=i].iter() {
                    let x = x * scale;
                    if x > max {
                        max = x;
                    }
                }
                let mut sum = T::zero();
                for x in row[..=i].iter_mut() {
                    let e = (*x * scale - max).exp();
                    *x = e;
                    sum = sum + e;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / sum;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            if let Some(p) = probs.as_mut() {
                let off = (bi * n_heads + h) * s * s;
                p.data_mut()[off..off + s * s].copy_from_slice(&scores);
            }
            // ctx_h = P @ V_h
            let v_ptr = v.data()[(bi * s * d + h * dh)..].as_ptr();
            let c_ptr = ctx.data_mut()[(bi * s * d + h * dh)..].as_mut_ptr();
            unsafe {
                T::gemm(
                    s,
                    s,
                    dh,
                    scores.as_ptr(),
                    s as isize,
                    1,
                    v_ptr,
                    d as isize,
                    1,
                    T::zero(),
                    c_ptr,
                    d as isize,
                    1,
                );
            }
        }
    }
    Ok((ctx, probs))
}

/// S = Q_h @ K_h^T for one (batch, head), unscaled.
fn head_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    bi: usize,
    h: usize,
    dh: usize,
    n_heads: usize,
    scores: &mut [T],
) {
    let d = dh * n_heads;
    let s = q.shape()[1];
    let q_ptr = q.data()[(bi * s * d + h * dh)..].as_ptr();
    let k_ptr = k.data()[(bi * s * d + h * dh)..].as_ptr();
    unsafe {
        T::gemm(
            s,
            dh,
            s,
            q_ptr,
            d as isize,
            1,
            k_ptr,
            1,
            d as isize,
            T::zero(),
            scores.as_mut_ptr(),
            s as isize,
            1,
        );
    }
}

/// Backward of causal attention. Returns (dq, dk, dv).
pub fn causal_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    g: &Tensor<T>,
    n_heads: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = q.shape();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(shape);
    let mut dk = Tensor::zeros(shape);
    let mut dv = Tensor::zeros(shape);
    let mut dp = vec![T::zero(); s * s];
    let mut ds = vec![T::zero(); s * s];
    for bi in 0..b {
        for h in 0..n_heads {
            let off = bi * s * d + h * dh;
            let poff = (bi * n_heads + h) * s * s;
            let p = &probs.data()[poff..poff + s * s];
            unsafe {
                // dV_h = P^T @ dCtx_h
                T::gemm(
                    s, s, dh,
                    p.as_ptr(), 1, s as isize,
                    g.data()[off..].as_ptr(), d as isize, 1,
                    T::one(),
                    dv.data_mut()[off..].as_mut_ptr(), d as isize, 1,
                );
                // dP = dCtx_h @ V_h^T
                T::gemm(
                    s, dh, s,
                    g.data()[off..].as_ptr(), d as isize, 1,
                    v.data()[off..].as_ptr(), 1, d as isize,
                    T::zero(),
                    dp.as_mut_ptr(), s as isize, 1,
                );
            }
            // dS = P * (dP - rowsum(dP * P)), then scale; masked entries have P = 0.
            for i in 0..s {
                let mut dot = T::zero();
                for j in 0..s {
                    dot = dot + dp[i * s + j] * p[i * s + j];
                }
                for j in 0..s {
                    ds[i * s + j] = p[i * s + j] * (dp[i * s + j] - dot) * scale;
                }
            }
            unsafe {
                // dQ_h = dS @ K_h
                T::gemm(
                    s, s, dh,
                    ds.as_ptr(), s as isize, 1,
                    k.data()[off..].as_ptr(), d as isize, 1,
                    T::one(),
                    dq.data_mut()[off..].as_mut_ptr(), d as isize, 1,
                );
                // dK_h = dS^T @ Q_h
                T::gemm(
                    s, s, dh,
                    ds.as_ptr(), 1, s as isize,
                    q.data()[off..].as_ptr(), d as isize, 1,
                    T::one(),
                    dk.data_mut()[off..].as_mut_ptr(), d as isize, 1,
                );
            }
        }
    }
    (dq, dk, dv)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
/// plus the softmax probabilities for the backward pass.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<(T, Tensor<T>)> {
    if logits.ndim() != 2 {
        return Err(Error::Dimension(format!("cross_entropy wants [n, vocab], got {:?}", logits.shape())));
    }
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for {} rows", targets.len(), n)));
    }
    let probs = softmax_axis(logits, 1)?;
    let mut nll = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if (t as usize) >= v {
            return Err(Error::Input(format!("target {t} out of vocab {v}")));
        }
        let p = probs.data()[r * v + t as usize].as_f64();
        nll -= p.max(f64::MIN_POSITIVE).ln();
    }
    Ok((T::from_f64(nll / n as f64), probs))
}

/// KL(p || q) per row over the last axis, averaged over rows. Inputs are
/// probability distributions; values are clamped away from zero inside the
/// logs so an underflowed softmax bin cannot produce NaN.
pub fn kl_div<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "kl_div shape mismatch: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let d = p.last_dim();
    let rows = p.rows_2d();
    let tiny = f64::MIN_POSITIVE;
    let mut total = 0.0f64;
    for r in 0..rows {
        let mut acc = 0.0f64;
        for i in 0..d {
            let pi = p.data()[r * d + i].as_f64().max(tiny);
            let qi = q.data()[r * d + i].as_f64().max(tiny);
            acc += pi * (pi.ln() - qi.ln());
        }
        total += acc;
    }
    Ok(T::from_f64(total / rows as f64))
}

/// Backward of `kl_div`: dp = (ln(p/q) + 1)/rows, dq = -(p/q)/rows.
pub fn kl_div_backward<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, upstream: T) -> (Tensor<T>, Tensor<T>) {
    let rows = p.rows_2d();
    let scale = upstream.as_f64() / rows as f64;
    let tiny = f64::MIN_POSITIVE;
    let mut dp = Tensor::zeros(p.shape());
    let mut dq = Tensor::zeros(q.shape());
    for i in 0..p.numel() {
        let pi = p.data()[i].as_f64().max(tiny);
        let qi = q.data()[i].as_f64().max(tiny);
        dp.data_mut()[i] = T::from_f64(((pi / qi).ln() + 1.0) * scale);
        dq.data_mut()[i] = T::from_f64(-(pi / qi) * scale);
    }
    (dp, dq)
}
