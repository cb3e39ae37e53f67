//! Concatenation-based layer merging.
//!
//! The merged layer is assembled by gathering whole structures from the group
//! members, never by averaging weights: FFN intermediate channels travel as
//! (gate row, up row, down column) triples and attention heads as (q/k/v row
//! block, o column block) units, concatenated in group order with no
//! rescaling. The residual stream absorbs any magnitude change. Norm gammas
//! are the one exception, combined per `NormMode`.

use super::{LayerGroup, MergePlan, NormMode};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, DecoderLayerWeights, ToyModel};
use crate::scoring::{bi_scores, score_layer_channels};
use crate::tensor::{Scalar, Tensor};

/// Pick the top `count` indices by score (descending, index-ascending on
/// ties) and return them in ascending index order.
fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(count).collect();
    picked.sort_unstable();
    picked
}

/// Build the channel/head selection plan for a group from its sensitivity
/// scores and block-influence ratios. The trace must carry ffn_intermediate
/// and attn_context captures for every group layer.
pub fn build_merge_plan<T: Scalar>(
    model: &ToyModel<T>,
    trace: &ActivationTrace<T>,
    group: LayerGroup,
    p: f64,
    rho: f64,
    norm_mode: NormMode,
) -> Result<MergePlan> {
    group.validate(model.n_layers())?;
    let (bi, _) = bi_scores(trace);
    let group_bi = &bi[group.indices()];
    let (ratios, _) = super::retention_ratios(group_bi, p, rho)?;
    build_merge_plan_with_ratios(model, trace, group, &ratios, norm_mode)
}

/// Same as `build_merge_plan` but with the retention ratios given directly
/// (used by the posterior search and the sweep harness).
pub fn build_merge_plan_with_ratios<T: Scalar>(
    model: &ToyModel<T>,
    trace: &ActivationTrace<T>,
    group: LayerGroup,
    ratios: &[f64],
    norm_mode: NormMode,
) -> Result<MergePlan> {
    group.validate(model.n_layers())?;
    if ratios.len() != group.len {
        return Err(Error::Contract(format!(
            "{} ratios for a group of {}",
            ratios.len(),
            group.len
        )));
    }
    let ffn_counts = super::allocate_counts(ratios, model.config.d_ff);
    let head_counts = super::allocate_counts(ratios, model.config.n_heads);
    let mut ffn_selected = Vec::with_capacity(group.len);
    let mut heads_selected = Vec::with_capacity(group.len);
    for (slot, layer) in group.indices().enumerate() {
        let scores = score_layer_channels(model, trace, layer)?;
        ffn_selected.push(top_indices(&scores.ffn_channel, ffn_counts[slot]));
        heads_selected.push(top_indices(&scores.head, head_counts[slot]));
    }
    let plan = MergePlan {
        group,
        ratios: ratios.to_vec(),
        ffn_selected,
        heads_selected,
        norm_mode,
    };
    plan.validate(&model.config)?;
    Ok(plan)
}

/// Replace the plan's group with a single assembled layer.
pub fn apply_concat_merge<T: Scalar>(model: &ToyModel<T>, plan: &MergePlan) -> Result<ToyModel<T>> {
    plan.validate(&model.config)?;
    let merged = assemble_merged_layer(model, plan)?;
    let mut out = model.clone();
    out.layers.splice(plan.group.indices(), std::iter::once(merged));
    out.config.n_layers = out.layers.len();
    Ok(out)
}

fn assemble_merged_layer<T: Scalar>(
    model: &ToyModel<T>,
    plan: &MergePlan,
) -> Result<DecoderLayerWeights<T>> {
    let cfg = &model.config;
    let d_head = cfg.d_head;
    let members: Vec<&DecoderLayerWeights<T>> =
        plan.group.indices().map(|l| &model.layers[l]).collect();

    // FFN: gather gate/up rows and down columns per selected channel.
    let mut gate_parts = Vec::new();
    let mut up_parts = Vec::new();
    let mut down_parts = Vec::new();
    for (slot, layer) in members.iter().enumerate() {
        let sel = &plan.ffn_selected[slot];
        if sel.is_empty() {
            continue;
        }
        gate_parts.push(layer.gate.select_rows(sel)?);
        up_parts.push(layer.up.select_rows(sel)?);
        down_parts.push(layer.down.select_cols(sel)?);
    }
    let gate = Tensor::concat_axis(&gate_parts.iter().collect::<Vec<_>>(), 0)?;
    let up = Tensor::concat_axis(&up_parts.iter().collect::<Vec<_>>(), 0)?;
    let down = Tensor::concat_axis(&down_parts.iter().collect::<Vec<_>>(), 1)?;

    // MHA: gather whole heads; q/k/v by row blocks, o by column blocks.
    let mut q_parts = Vec::new();
    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    let mut o_parts = Vec::new();
    for (slot, layer) in members.iter().enumerate() {
        for &h in &plan.heads_selected[slot] {
            let rows: Vec<usize> = (h * d_head..(h + 1) * d_head).collect();
            q_parts.push(layer.q.select_rows(&rows)?);
            k_parts.push(layer.k.select_rows(&rows)?);
            v_parts.push(layer.v.select_rows(&rows)?);
            o_parts.push(layer.o.select_cols(&rows)?);
        }
    }
    let q = Tensor::concat_axis(&q_parts.iter().collect::<Vec<_>>(), 0)?;
    let k = Tensor::concat_axis(&k_parts.iter().collect::<Vec<_>>(), 0)?;
    let v = Tensor::concat_axis(&v_parts.iter().collect::<Vec<_>>(), 0)?;
    let o = Tensor::concat_axis(&o_parts.iter().collect::<Vec<_>>(), 1)?;

    let (attn_norm_gamma, ffn_norm_gamma) = match plan.norm_mode {
        NormMode::Average => {
            let scale = T::from_f64(1.0 / plan.group.len as f64);
            let mut attn = Tensor::zeros(&[cfg.d_model]);
            let mut ffn = Tensor::zeros(&[cfg.d_model]);
            for layer in &members {
                attn.add_assign(&layer.attn_norm_gamma)?;
                ffn.add_assign(&layer.ffn_norm_gamma)?;
            }
            (attn.scale(scale), ffn.scale(scale))
        }
        NormMode::FollowBase => {
            let base = members[plan.base_layer()];
            (base.attn_norm_gamma.clone(), base.ffn_norm_gamma.clone())
        }
    };

    Ok(DecoderLayerWeights {
        attn_norm_gamma,
        q,
        k,
        v,
        o,
        ffn_norm_gamma,
        gate,
        up,
        down,
    })
}

/// Reorder the FFN channels (gate/up rows with matching down columns) and the
/// heads (q/k/v row blocks with matching o columns) of one layer. Outputs are
/// invariant to these permutations up to float summation order, which is what
/// makes concatenation order immaterial.
pub fn permute_layer_units<T: Scalar>(
    layer: &DecoderLayerWeights<T>,
    d_head: usize,
    ffn_perm: &[usize],
    head_perm: &[usize],
) -> Result<DecoderLayerWeights<T>> {
    let head_rows: Vec<usize> =
        head_perm.iter().flat_map(|&h| h * d_head..(h + 1) * d_head).collect();
    Ok(DecoderLayerWeights {
        attn_norm_gamma: layer.attn_norm_gamma.clone(),
        q: layer.q.select_rows(&head_rows)?,
        k: layer.k.select_rows(&head_rows)?,
        v: layer.v.select_rows(&head_rows)?,
        o: layer.o.select_cols(&head_rows)?,
        ffn_norm_gamma: layer.ffn_norm_gamma.clone(),
        gate: layer.gate.select_rows(ffn_perm)?,
        up: layer.up.select_rows(ffn_perm)?,
        down: layer.down.select_cols(ffn_perm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CaptureSpec, ModelConfig, TokenBatch};
    use crate::rng::CounterRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 258,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ff: 16,
            n_layers: 3,
            max_seq: 16,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        }
    }

    fn traced_model(seed: u64) -> (ToyModel<f32>, ActivationTrace<f32>, TokenBatch) {
        let mut rng = CounterRng::new(seed);
        let model = ToyModel::<f32>::init(cfg(), &mut rng).unwrap();
        let ids: Vec<u32> = (0..32).map(|_| rng.below(258) as u32).collect();
        let toks = TokenBatch::new(2, 16, ids).unwrap();
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        (model, trace, toks)
    }

    #[test]
    fn full_shallow_budget_copies_the_first_layer() {
        let (model, trace, toks) = traced_model(101);
        let group = LayerGroup::new(1, 2);
        let plan = build_merge_plan_with_ratios(
            &model,
            &trace,
            group,
            &[1.0, 0.0],
            NormMode::FollowBase,
        )
        .unwrap();
        let merged = apply_concat_merge(&model, &plan).unwrap();
        assert_eq!(merged.n_layers(), 2);
        assert_eq!(merged.layers[1], model.layers[1]);
        // Forward equals the model with the deeper layer simply deleted.
        let removed = model.without_layer(2).unwrap();
        let (la, _) = merged.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        let (lb, _) = removed.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn hand_constructed_selection() {
        // Two layers, d_ff = 16, equal split: rig the sensitivity so layer A
        // prefers channels {0, 3, ...} and layer B prefers {1, 2, ...}.
        let (mut model, _, toks) = traced_model(103);
        // Zero most down-projection columns, leaving distinct survivors.
        let keep_a: Vec<usize> = vec![0, 3, 5, 7, 9, 11, 13, 15];
        let keep_b: Vec<usize> = vec![1, 2, 4, 6, 8, 10, 12, 14];
        for (layer, keep) in [(0usize, &keep_a), (1usize, &keep_b)] {
            let down = &mut model.layers[layer].down;
            let (rows, cols) = (down.shape()[0], down.shape()[1]);
            for r in 0..rows {
                for c in 0..cols {
                    if !keep.contains(&c) {
                        down.data_mut()[r * cols + c] = 0.0;
                    }
                }
            }
        }
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        let plan = build_merge_plan_with_ratios(
            &model,
            &trace,
            LayerGroup::new(0, 2),
            &[0.5, 0.5],
            NormMode::Average,
        )
        .unwrap();
        assert_eq!(plan.ffn_selected[0], keep_a);
        assert_eq!(plan.ffn_selected[1], keep_b);
    }

    #[test]
    fn equal_scores_pick_lowest_indices() {
        assert_eq!(top_indices(&[1.0; 6], 3), vec![0, 1, 2]);
        assert_eq!(top_indices(&[0.5, 0.9, 0.5, 0.9], 2), vec![1, 3]);
    }

    #[test]
    fn average_norm_mode_takes_elementwise_mean() {
        let (mut model, _, toks) = traced_model(107);
        model.layers[0].attn_norm_gamma = Tensor::full(&[16], 1.0);
        model.layers[1].attn_norm_gamma = Tensor::full(&[16], 3.0);
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        let plan = build_merge_plan_with_ratios(
            &model,
            &trace,
            LayerGroup::new(0, 2),
            &[0.5, 0.5],
            NormMode::Average,
        )
        .unwrap();
        let merged = apply_concat_merge(&model, &plan).unwrap();
        assert!(merged.layers[0].attn_norm_gamma.data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn merged_model_keeps_dimension_invariants() {
        let (model, trace, toks) = traced_model(109);
        let plan =
            build_merge_plan(&model, &trace, LayerGroup::new(0, 2), 1.0, 0.0, NormMode::Average)
                .unwrap();
        let merged = apply_concat_merge(&model, &plan).unwrap();
        assert_eq!(merged.n_layers(), 2);
        assert_eq!(merged.config.n_layers, 2);
        let l = &merged.layers[0];
        assert_eq!(l.q.shape(), &[16, 16]);
        assert_eq!(l.gate.shape(), &[16, 16]);
        assert_eq!(l.down.shape(), &[16, 16]);
        // Forward still runs with unchanged output shape.
        let (logits, _) = merged.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        assert_eq!(logits.shape(), &[2, 16, 258]);
    }

    #[test]
    fn identical_layers_merge_back_to_the_layer_at_ratio_endpoints() {
        // Duplicate layer 0 into layer 1. Giving either copy the whole budget
        // gathers all of its channels in ascending order, which is a bit-exact
        // copy of the shared layer; the merged model then equals the model
        // with the duplicate dropped.
        let (mut model, _, toks) = traced_model(113);
        model.layers[1] = model.layers[0].clone();
        let (_, trace) = model.forward(&toks, &CaptureSpec::full()).unwrap();
        for ratios in [[1.0, 0.0], [0.0, 1.0]] {
            let plan = build_merge_plan_with_ratios(
                &model,
                &trace,
                LayerGroup::new(0, 2),
                &ratios,
                NormMode::Average,
            )
            .unwrap();
            let merged = apply_concat_merge(&model, &plan).unwrap();
            assert_eq!(merged.layers[0], model.layers[0]);
            let reference = model.without_layer(1).unwrap();
            let (la, _) = merged.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
            let (lb, _) = reference.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
            assert_eq!(la.data(), lb.data());
        }
    }

    #[test]
    fn channel_and_head_order_is_output_invariant() {
        let (model, trace, toks) = traced_model(127);
        let plan =
            build_merge_plan(&model, &trace, LayerGroup::new(0, 2), 1.0, 0.0, NormMode::Average)
                .unwrap();
        let merged = apply_concat_merge(&model, &plan).unwrap();
        let mut rng = CounterRng::new(131);
        let mut ffn_perm: Vec<usize> = (0..16).collect();
        let mut head_perm: Vec<usize> = (0..2).collect();
        rng.shuffle(&mut ffn_perm);
        rng.shuffle(&mut head_perm);
        let mut shuffled = merged.clone();
        shuffled.layers[0] =
            permute_layer_units(&merged.layers[0], 8, &ffn_perm, &head_perm).unwrap();
        let (la, _) = merged.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        let (lb, _) = shuffled.forward(&toks, &CaptureSpec::hidden_only()).unwrap();
        for (a, b) in la.data().iter().zip(lb.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
