//! Ratio-sweep harness: merge one adjacent pair at a grid of mixing ratios
//! and chart the perplexity, for the weight-sum and concatenation operators
//! side by side.
//!
//! Only the named structure is merged; the remaining tensors and both norm
//! gammas come from the deeper layer, so the ratio-0 record coincides exactly
//! with plain retention of the deeper layer. For whole-layer concatenation
//! the norms follow the larger-ratio side, which preserves the same endpoint.

use super::perplexity::perplexity;
use super::Window;
use crate::error::{Error, Result};
use crate::merging::concat::build_merge_plan_with_ratios;
use crate::merging::prune::calibration_batch;
use crate::merging::{apply_concat_merge, LayerGroup, NormMode};
use crate::model::{ActivationTrace, CaptureSpec, DecoderLayerWeights, ToyModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStructure {
    Mha,
    Ffn,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    AlphaBlend,
    Concat,
}

/// One (structure, method, ratio) evaluation. `ratio` is the shallower
/// layer's share; 0 keeps only the deeper layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepRecord {
    pub structure: SweepStructure,
    pub method: SweepMethod,
    pub ratio: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub pair: (usize, usize),
    pub grid_n: usize,
    /// Direct retention baselines: drop the shallower / deeper layer.
    pub retain_deeper_ppl: f64,
    pub retain_shallow_ppl: f64,
    pub records: Vec<SweepRecord>,
}

fn blend(shallow: &Tensor<f32>, deep: &Tensor<f32>, alpha: f64) -> Result<Tensor<f32>> {
    if alpha == 0.0 {
        return Ok(deep.clone());
    }
    if alpha == 1.0 {
        return Ok(shallow.clone());
    }
    let a = alpha as f32;
    shallow.zip_map(deep, |s, d| a * s + (1.0 - a) * d)
}

/// Merge only the chosen structure of the pair at the given ratio.
fn merge_pair_structure(
    model: &ToyModel<f32>,
    trace: &ActivationTrace<f32>,
    pair_start: usize,
    structure: SweepStructure,
    method: SweepMethod,
    ratio: f64,
) -> Result<ToyModel<f32>> {
    let group = LayerGroup::new(pair_start, 2);
    group.validate(model.n_layers())?;
    let shallow = &model.layers[pair_start];
    let deep = &model.layers[pair_start + 1];

    // Whole-layer merges reuse the pruner's assembly path.
    if structure == SweepStructure::Layer && method == SweepMethod::Concat {
        let plan = build_merge_plan_with_ratios(
            model,
            trace,
            group,
            &[ratio, 1.0 - ratio],
            NormMode::FollowBase,
        )?;
        return apply_concat_merge(model, &plan);
    }

    let merged: DecoderLayerWeights<f32> = match (structure, method) {
        (SweepStructure::Layer, SweepMethod::AlphaBlend) => DecoderLayerWeights {
            attn_norm_gamma: blend(&shallow.attn_norm_gamma, &deep.attn_norm_gamma, ratio)?,
            q: blend(&shallow.q, &deep.q, ratio)?,
            k: blend(&shallow.k, &deep.k, ratio)?,
            v: blend(&shallow.v, &deep.v, ratio)?,
            o: blend(&shallow.o, &deep.o, ratio)?,
            ffn_norm_gamma: blend(&shallow.ffn_norm_gamma, &deep.ffn_norm_gamma, ratio)?,
            gate: blend(&shallow.gate, &deep.gate, ratio)?,
            up: blend(&shallow.up, &deep.up, ratio)?,
            down: blend(&shallow.down, &deep.down, ratio)?,
        },
        (SweepStructure::Mha, SweepMethod::AlphaBlend) => DecoderLayerWeights {
            q: blend(&shallow.q, &deep.q, ratio)?,
            k: blend(&shallow.k, &deep.k, ratio)?,
            v: blend(&shallow.v, &deep.v, ratio)?,
            o: blend(&shallow.o, &deep.o, ratio)?,
            ..deep.clone()
        },
        (SweepStructure::Ffn, SweepMethod::AlphaBlend) => DecoderLayerWeights {
            gate: blend(&shallow.gate, &deep.gate, ratio)?,
            up: blend(&shallow.up, &deep.up, ratio)?,
            down: blend(&shallow.down, &deep.down, ratio)?,
            ..deep.clone()
        },
        (mha_or_ffn, SweepMethod::Concat) => {
            // Gather units through a whole-layer plan, then keep only the
            // requested structure from it; everything else stays deep.
            let plan = build_merge_plan_with_ratios(
                model,
                trace,
                group,
                &[ratio, 1.0 - ratio],
                NormMode::FollowBase,
            )?;
            let assembled = apply_concat_merge(model, &plan)?.layers[pair_start].clone();
            match mha_or_ffn {
                SweepStructure::Mha => DecoderLayerWeights {
                    q: assembled.q,
                    k: assembled.k,
                    v: assembled.v,
                    o: assembled.o,
                    ..deep.clone()
                },
                SweepStructure::Ffn => DecoderLayerWeights {
                    gate: assembled.gate,
                    up: assembled.up,
                    down: assembled.down,
                    ..deep.clone()
                },
                SweepStructure::Layer => unreachable!("handled above"),
            }
        }
    };
    let mut out = model.clone();
    out.layers.splice(group.indices(), std::iter::once(merged));
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Evaluate one method over the ratio grid {i / grid_n}.
pub fn ratio_sweep(
    model: &ToyModel<f32>,
    pair_start: usize,
    structure: SweepStructure,
    method: SweepMethod,
    grid_n: usize,
    calib_windows: &[Window],
    eval_windows: &[Window],
    batch_size: usize,
) -> Result<Vec<SweepRecord>> {
    if grid_n < 2 {
        return Err(Error::Contract(format!("grid_n must be >= 2, got {grid_n}")));
    }
    LayerGroup::new(pair_start, 2).validate(model.n_layers())?;
    let trace = if method == SweepMethod::Concat {
        let calib = calibration_batch(calib_windows)?;
        let (_, t) =
            model.forward(&calib, &CaptureSpec::for_layers(pair_start, pair_start + 1))?;
        Some(t)
    } else {
        None
    };
    let empty_trace;
    let trace_ref = match &trace {
        Some(t) => t,
        None => {
            empty_trace = ActivationTrace {
                hidden: Vec::new(),
                ffn_intermediate: Vec::new(),
                attn_context: Vec::new(),
            };
            &empty_trace
        }
    };
    let mut records = Vec::with_capacity(grid_n + 1);
    for i in 0..=grid_n {
        let ratio = i as f64 / grid_n as f64;
        let candidate =
            merge_pair_structure(model, trace_ref, pair_start, structure, method, ratio)?;
        let ppl = perplexity(&candidate, eval_windows, batch_size)?.ppl;
        records.push(SweepRecord { structure, method, ratio, ppl });
    }
    Ok(records)
}

/// Run the requested structures/methods and bundle the retention baselines.
#[allow(clippy::too_many_arguments)]
pub fn sweep_report(
    model: &ToyModel<f32>,
    pair_start: usize,
    structures: &[SweepStructure],
    methods: &[SweepMethod],
    grid_n: usize,
    calib_windows: &[Window],
    eval_windows: &[Window],
    batch_size: usize,
) -> Result<SweepReport> {
    let retain_deeper = model.without_layer(pair_start)?;
    let retain_shallow = model.without_layer(pair_start + 1)?;
    let mut records = Vec::new();
    for &structure in structures {
        for &method in methods {
            records.extend(ratio_sweep(
                model,
                pair_start,
                structure,
                method,
                grid_n,
                calib_windows,
                eval_windows,
                batch_size,
            )?);
        }
    }
    Ok(SweepReport {
        pair: (pair_start, pair_start + 1),
        grid_n,
        retain_deeper_ppl: perplexity(&retain_deeper, eval_windows, batch_size)?.ppl,
        retain_shallow_ppl: perplexity(&retain_shallow, eval_windows, batch_size)?.ppl,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::windows;
    use crate::model::ModelConfig;
    use crate::rng::CounterRng;

    fn setup() -> (ToyModel<f32>, Vec<Window>, Vec<Window>) {
        let cfg = ModelConfig {
            vocab_size: 258,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            n_layers: 4,
            max_seq: 16,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        };
        let mut rng = CounterRng::new(601);
        let model = ToyModel::<f32>::init(cfg, &mut rng).unwrap();
        let data: Vec<u8> = (0..800u32).map(|i| (i * 13 % 89 + 33) as u8).collect();
        let calib = windows(&data, 16, 16).unwrap();
        let eval = windows(&data[..320], 16, 16).unwrap();
        (model, calib, eval)
    }

    #[test]
    fn grid_produces_n_plus_one_records_per_series() {
        let (model, calib, eval) = setup();
        for method in [SweepMethod::AlphaBlend, SweepMethod::Concat] {
            let recs = ratio_sweep(
                &model,
                1,
                SweepStructure::Layer,
                method,
                10,
                &calib,
                &eval,
                8,
            )
            .unwrap();
            assert_eq!(recs.len(), 11);
            assert_eq!(recs[0].ratio, 0.0);
            assert_eq!(recs[10].ratio, 1.0);
        }
    }

    #[test]
    fn ratio_zero_equals_direct_retention_of_the_deeper_layer() {
        let (model, calib, eval) = setup();
        let baseline = perplexity(&model.without_layer(1).unwrap(), &eval, 8).unwrap().ppl;
        for structure in [SweepStructure::Mha, SweepStructure::Ffn, SweepStructure::Layer] {
            for method in [SweepMethod::AlphaBlend, SweepMethod::Concat] {
                let recs =
                    ratio_sweep(&model, 1, structure, method, 2, &calib, &eval, 8).unwrap();
                assert!(
                    (recs[0].ppl - baseline).abs() < 1e-9,
                    "{structure:?}/{method:?}: {} vs {baseline}",
                    recs[0].ppl
                );
            }
        }
    }

    #[test]
    fn full_sweep_bundle_counts() {
        let (model, calib, eval) = setup();
        let report = sweep_report(
            &model,
            2,
            &[SweepStructure::Mha, SweepStructure::Ffn, SweepStructure::Layer],
            &[SweepMethod::AlphaBlend, SweepMethod::Concat],
            4,
            &calib,
            &eval,
            8,
        )
        .unwrap();
        assert_eq!(report.records.len(), 3 * 2 * 5);
        assert!(report.retain_deeper_ppl.is_finite());
    }

    #[test]
    fn non_adjacent_pair_rejected() {
        let (model, calib, eval) = setup();
        assert!(ratio_sweep(
            &model,
            3,
            SweepStructure::Layer,
            SweepMethod::AlphaBlend,
            4,
            &calib,
            &eval,
            8
        )
        .is_err());
    }
}
