//! Weight-sum merge baselines and direct layer removal.

use super::LayerGroup;
use crate::error::{Error, Result};
use crate::model::{DecoderLayerWeights, ToyModel};
use crate::tensor::Scalar;

/// W* = alpha * W(l) + (1 - alpha) * W(l+1), elementwise over all nine
/// tensors of an adjacent pair.
pub fn alpha_blend_merge<T: Scalar>(
    model: &ToyModel<T>,
    pair_start: usize,
    alpha: f64,
) -> Result<ToyModel<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let group = LayerGroup::new(pair_start, 2);
    group.validate(model.n_layers())?;
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    let shallow = &model.layers[pair_start];
    let deep = &model.layers[pair_start + 1];
    let mut merged = shallow.clone();
    for (dst, (s, d)) in merged
        .tensors_mut()
        .into_iter()
        .zip(shallow.tensors().into_iter().zip(deep.tensors()))
    {
        *dst = s.scale(a).add(&d.scale(b))?;
    }
    replace_group(model, group, merged)
}

/// Difference-folding merge: W* = W(l) + sum_i (W(l+i) - W(l)), computed in
/// its telescoped form sum_i W(l+i) - (m-1) * W(l) so the two-layer case is
/// exactly the deeper layer.
pub fn laco_merge<T: Scalar>(model: &ToyModel<T>, group: LayerGroup) -> Result<ToyModel<T>> {
    group.validate(model.n_layers())?;
    let shallow = &model.layers[group.start];
    let deepers: Vec<&DecoderLayerWeights<T>> =
        (group.start + 1..=group.end()).map(|l| &model.layers[l]).collect();
    let mut merged = deepers[0].clone();
    for other in &deepers[1..] {
        for (dst, src) in merged.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_assign(src)?;
        }
    }
    let extra = deepers.len() as f64 - 1.0;
    if extra > 0.0 {
        let c = T::from_f64(extra);
        for (dst, src) in merged.tensors_mut().into_iter().zip(shallow.tensors()) {
            *dst = dst.zip_map(src, |acc, s| acc - c * s)?;
        }
    }
    replace_group(model, group, merged)
}

fn replace_group<T: Scalar>(
    model: &ToyModel<T>,
    group: LayerGroup,
    merged: DecoderLayerWeights<T>,
) -> Result<ToyModel<T>> {
    let mut out = model.clone();
    out.layers.splice(group.indices(), std::iter::once(merged));
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Drop the given layers (any order, deduplicated).
pub fn remove_layers<T: Scalar>(model: &ToyModel<T>, layers: &[usize]) -> Result<ToyModel<T>> {
    let mut sorted: Vec<usize> = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(Error::Contract("duplicate layer in removal set".into()));
    }
    if sorted.last().is_some_and(|&l| l >= model.n_layers()) {
        return Err(Error::Contract(format!(
            "removal index out of range for {} layers",
            model.n_layers()
        )));
    }
    let mut out = model.clone();
    for &l in sorted.iter().rev() {
        out.layers.remove(l);
    }
    out.config.n_layers = out.layers.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use crate::rng::CounterRng;

    fn model(n_layers: usize, seed: u64) -> ToyModel<f32> {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            n_layers,
            max_seq: 8,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(seed);
        ToyModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn alpha_one_keeps_the_shallow_layer_exactly() {
        let m = model(3, 1);
        let merged = alpha_blend_merge(&m, 1, 1.0).unwrap();
        assert_eq!(merged.layers[1], m.layers[1]);
        assert_eq!(merged.n_layers(), 2);
    }

    #[test]
    fn alpha_half_is_elementwise_mean() {
        let mut m = model(2, 3);
        m.layers[0].q = Tensor::from_vec(vec![8, 8], vec![2.0; 64]).unwrap();
        m.layers[1].q = Tensor::from_vec(vec![8, 8], vec![4.0; 64]).unwrap();
        let merged = alpha_blend_merge(&m, 0, 0.5).unwrap();
        assert!(merged.layers[0].q.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let m = model(2, 5);
        assert!(alpha_blend_merge(&m, 0, 1.5).is_err());
        assert!(alpha_blend_merge(&m, 0, -0.1).is_err());
    }

    #[test]
    fn laco_pair_telescopes_to_the_deeper_layer() {
        let m = model(4, 7);
        let merged = laco_merge(&m, LayerGroup::new(1, 2)).unwrap();
        assert_eq!(merged.layers[1], m.layers[2]);
        assert_eq!(merged.n_layers(), 3);
    }

    #[test]
    fn laco_triple_matches_hand_formula() {
        let m = model(3, 9);
        let merged = laco_merge(&m, LayerGroup::new(0, 3)).unwrap();
        for ((w0, w1), (w2, out)) in m.layers[0]
            .tensors()
            .into_iter()
            .zip(m.layers[1].tensors())
            .zip(m.layers[2].tensors().into_iter().zip(merged.layers[0].tensors()))
        {
            for i in 0..w0.numel() {
                let expect = w1.data()[i] + w2.data()[i] - w0.data()[i];
                assert!((out.data()[i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn remove_layers_rejects_duplicates_and_out_of_range() {
        let m = model(3, 11);
        assert!(remove_layers(&m, &[1, 1]).is_err());
        assert!(remove_layers(&m, &[3]).is_err());
        let out = remove_layers(&m, &[2, 0]).unwrap();
        assert_eq!(out.n_layers(), 1);
        assert_eq!(out.layers[0], m.layers[1]);
    }
}
