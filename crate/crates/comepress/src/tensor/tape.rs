//! Reverse-mode gradient tape over dense tensors.
//!
//! Nodes form a Wengert list: operations append in execution order and
//! `backward` walks the list once in reverse, so the traversal is acyclic by
//! construction and each node is visited exactly once. A tape is single-owner
//! and `backward` consumes it, which rules out a second backward pass without
//! rebuilding the graph.

use super::nn;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Silu { a: Var },
    Softmax { a: Var, axis: usize },
    RmsNorm { x: Var, gamma: Var, eps: T },
    Rope { x: Var, n_heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Tensor<T> },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Tensor<T> },
    KlDiv { p: Var, q: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAll { a: Var },
    SumAll { a: Var },
    L1 { a: Var },
    L2 { a: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by `Tape::backward`, indexed by `Var`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input (parameter or constant) node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, ta, b, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = nn::silu(self.value(a));
        self.push(out, Op::Silu { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = nn::softmax_axis(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax { a, axis }))
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let eps = T::from_f64(eps);
        let out = nn::rms_norm(self.value(x), self.value(gamma), eps)?;
        Ok(self.push(out, Op::RmsNorm { x, gamma, eps }))
    }

    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64) -> Result<Var> {
        let out = nn::rope(self.value(x), n_heads, base, false)?;
        Ok(self.push(out, Op::Rope { x, n_heads, base }))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (ctx, probs) =
            nn::causal_attention(self.value(q), self.value(k), self.value(v), n_heads, true)?;
        let probs = probs.expect("keep_probs requested");
        Ok(self.push(ctx, Op::Attention { q, k, v, n_heads, probs }))
    }

    /// Row lookup: out[i] = table[ids[i]] reshaped to [batch, seq, d].
    pub fn embedding(&mut self, table: Var, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::Dimension("embedding table must be 2D".into()));
        }
        if ids.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "{} ids for batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} out of vocab {vocab}")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(vec![batch, seq, d], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean next-token negative log-likelihood over all rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (loss, probs) = nn::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// KL(p || q) along the last axis, averaged over leading rows. Both sides
    /// are probability distributions (e.g. softmax outputs).
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let loss = nn::kl_div(self.value(p), self.value(q))?;
        Ok(self.push(Tensor::scalar(loss), Op::KlDiv { p, q }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2d()?;
        Ok(self.push(out, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(out, Op::Slice { a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_axis(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll { a })
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).l1());
        self.push(out, Op::L1 { a })
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).l2());
        self.push(out, Op::L2 { a })
    }

    /// Reverse sweep from a scalar root. Consumes the tape, so a second
    /// backward without rebuilding the graph is rejected at compile time.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, ta, b, tb } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    // d(A@B): dA = G @ B^T, dB = A^T @ G, with transposes folded in.
                    let da = if *ta {
                        Tensor::matmul(bv, *tb, &g, true)?
                    } else {
                        Tensor::matmul(&g, false, bv, !*tb)?
                    };
                    let db = if *tb {
                        Tensor::matmul(&g, true, av, *ta)?
                    } else {
                        Tensor::matmul(av, !*ta, &g, false)?
                    };
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul { a, b } => {
                    let da = g.mul(&self.nodes[b.0].value)?;
                    let db = g.mul(&self.nodes[a.0].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale { a, c } => {
                    accumulate(&mut grads, *a, g.scale(*c))?;
                }
                Op::Silu { a } => {
                    let da = nn::silu_backward(&self.nodes[a.0].value, &g);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Softmax { a, axis } => {
                    let da = nn::softmax_backward(&node.value, &g, *axis);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::RmsNorm { x, gamma, eps } => {
                    let (dx, dgamma) = nn::rms_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        *eps,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                }
                Op::Rope { x, n_heads, base } => {
                    let dx = nn::rope(&g, *n_heads, *base, true)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Attention { q, k, v, n_heads, probs } => {
                    let (dq, dk, dv) = nn::causal_attention_backward(
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        probs,
                        &g,
                        *n_heads,
                    );
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::Embedding { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let d = t.shape()[1];
                    let mut dt = Tensor::zeros(t.shape());
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        for j in 0..d {
                            dt.data_mut()[dst + j] =
                                dt.data_mut()[dst + j] + g.data()[row * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    // dlogits = (softmax - onehot) * upstream / n
                    let n = targets.len();
                    let v = probs.shape()[1];
                    let scale = g.scalar_value() / T::from_f64(n as f64);
                    let mut dl = probs.scale(scale);
                    for (r, &t) in targets.iter().enumerate() {
                        let k = r * v + t as usize;
                        dl.data_mut()[k] = dl.data_mut()[k] - scale;
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
                Op::KlDiv { p, q } => {
                    let (dp, dq) = nn::kl_div_backward(
                        &self.nodes[p.0].value,
                        &self.nodes[q.0].value,
                        g.scalar_value(),
                    );
                    accumulate(&mut grads, *p, dp)?;
                    accumulate(&mut grads, *q, dq)?;
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads, *a, g.transpose2d()?)?;
                }
                Op::Reshape { a } => {
                    let da = g.reshape(self.nodes[a.0].value.shape())?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Slice { a, axis, start } => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(src.shape());
                    scatter_slice(&mut da, &g, *axis, *start);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Concat { parts, axis } => {
                    let mut at = 0;
                    for part in parts {
                        let len = self.nodes[part.0].value.shape()[*axis];
                        let dpart = g.slice_axis(*axis, at, len)?;
                        accumulate(&mut grads, *part, dpart)?;
                        at += len;
                    }
                }
                Op::MeanAll { a } => {
                    let src = &self.nodes[a.0].value;
                    let c = g.scalar_value() / T::from_f64(src.numel() as f64);
                    accumulate(&mut grads, *a, Tensor::full(src.shape(), c))?;
                }
                Op::SumAll { a } => {
                    let src = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, Tensor::full(src.shape(), g.scalar_value()))?;
                }
                Op::L1 { a } => {
                    let gv = g.scalar_value();
                    let da = self.nodes[a.0].value.map(|x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, da)?;
                }
                Op::L2 { a } => {
                    let norm = node.value.scalar_value();
                    if norm > T::zero() {
                        let c = g.scalar_value() / norm;
                        accumulate(&mut grads, *a, self.nodes[a.0].value.scale(c))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, add: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&add)?,
        slot @ None => *slot = Some(add),
    }
    Ok(())
}

/// Write `g` into the region of `dst` that a slice(axis, start) came from.
fn scatter_slice<T: Scalar>(dst: &mut Tensor<T>, g: &Tensor<T>, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let len = g.shape()[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let dst_stride = shape[axis] * inner;
    let src_stride = len * inner;
    for o in 0..outer {
        let d = o * dst_stride + start * inner;
        let s = o * src_stride;
        dst.data_mut()[d..d + src_stride].copy_from_slice(&g.data()[s..s + src_stride]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaves_gives_unit_grads() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[2, 3], 2.0));
        let root = tape.sum_all(a);
        let grads = tape.backward(root).unwrap();
        let ga = grads.get(a).unwrap();
        assert!(ga.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_grad_is_the_weight() {
        // 0.5 * ||w||^2 -> grad = w
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq);
        let root = tape.scale(s, 0.5);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn diamond_graph_sums_path_adjoints() {
        // y = (x*x) + (x*x) reusing the same intermediate: dy/dx = 2 * 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let both = tape.add(sq, sq).unwrap();
        let root = tape.sum_all(both);
        let grads = tape.backward(root).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[12.0, -4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.add(a, a).unwrap();
        assert!(tape.backward(b).is_err());
    }

    #[test]
    fn embedding_scatter_accumulates_repeated_ids() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::from_vec(vec![3, 2], vec![0.; 6]).unwrap());
        let e = tape.embedding(table, &[1, 1, 2], 1, 3).unwrap();
        let root = tape.sum_all(e);
        let grads = tape.backward(root).unwrap();
        let gt = grads.get(table).unwrap();
        assert_eq!(gt.data(), &[0., 0., 2., 2., 1., 1.]);
    }
}
