//! AdamW with decoupled weight decay, cosine decay, and global-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First/second moment accumulators for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One decoupled-decay update. `lr_now` overrides `hp.lr` so schedules can
/// drive the step size; decay applies to the pre-update parameter value.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    hp: &AdamWParams,
    lr_now: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer arity mismatch: {} params, {} grads, {} slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
    let eps = T::from_f64(hp.eps);
    let lr = T::from_f64(lr_now);
    let decay = T::from_f64(lr_now * hp.weight_decay);
    let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "grad shape {:?} vs param {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + ob1 * gd[i];
            vd[i] = b2 * vd[i] + ob2 * gd[i] * gd[i];
            let mhat = md[i] * ibc1;
            let vhat = vd[i] * ibc2;
            pd[i] = pd[i] - decay * pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// lr0 * 0.5 * (1 + cos(pi * step / total)).
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Scale all grads by max_norm / ||g||_global when the global l2 exceeds it.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut state = OptimizerState::new(&[&p]);
        let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
        let before = p.clone();
        adamw_step(&mut [&mut p], &[&g], &mut state, &hp, hp.lr).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grads_with_decay_shrink_by_lr_times_decay() {
        let mut p = Tensor::from_vec(vec![2], vec![2.0f64, -4.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = OptimizerState::new(&[&p]);
        let hp = AdamWParams { lr: 0.1, weight_decay: 0.5, ..AdamWParams::default() };
        adamw_step(&mut [&mut p], &[&g], &mut state, &hp, hp.lr).unwrap();
        let factor = 1.0 - 0.1 * 0.5;
        assert!((p.data()[0] - 2.0 * factor).abs() < 1e-12);
        assert!((p.data()[1] - -4.0 * factor).abs() < 1e-12);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(w) = w^2, grad = 2w, from w = 1. The rate is small enough that
        // the iterate cannot overshoot zero within 100 steps.
        let mut w = Tensor::from_vec(vec![1], vec![1.0f64]).unwrap();
        let mut state = OptimizerState::new(&[&w]);
        let hp = AdamWParams { lr: 0.004, weight_decay: 0.0, ..AdamWParams::default() };
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let g = Tensor::from_vec(vec![1], vec![2.0 * w.data()[0]]).unwrap();
            adamw_step(&mut [&mut w], &[&g], &mut state, &hp, hp.lr).unwrap();
            let now = w.data()[0];
            assert!(now < prev, "{now} !< {prev}");
            assert!(now > 0.0);
            prev = now;
        }
        assert!(prev < 0.7, "w should move toward 0, got {prev}");
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_to_the_cap() {
        let mut grads = vec![Tensor::from_vec(vec![2], vec![3.0f64, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
