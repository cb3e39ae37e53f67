//! Pruning loops: progressive concatenation merging, its posterior-search
//! variant, and the direct-removal / weight-sum baselines.
//!
//! All loops re-derive traces and scores from the *current* model each
//! iteration. Ties (group choice, candidate ratio, score order) always break
//! toward the lower index or ratio so runs replay bit-identically.

use super::concat::{apply_concat_merge, build_merge_plan, build_merge_plan_with_ratios};
use super::weight_sum::{laco_merge, remove_layers};
use super::{IterationRecord, LayerGroup, LayerMapping, NormMode, PruneReport};
use crate::error::{Error, Result};
use crate::eval::perplexity::perplexity;
use crate::eval::Window;
use crate::model::{CaptureSpec, TokenBatch, ToyModel};
use crate::scoring::{bi_scores, posterior_ppl_importance, sbi_score, LayerScoreSet};

#[derive(Debug, Clone)]
pub struct ComeOptions {
    pub target_layers: usize,
    /// Layers skipped by SBI: each iteration merges m' + 1 layers.
    pub m: usize,
    pub p: f64,
    pub rho: f64,
    pub norm_mode: NormMode,
    /// Ratio-grid granularity for the posterior variant.
    pub n: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ComeOptions {
    fn default() -> Self {
        ComeOptions {
            target_layers: 6,
            m: 1,
            p: 1.0,
            rho: 0.0,
            norm_mode: NormMode::Average,
            n: 20,
            seed: 42,
            batch_size: 32,
        }
    }
}

/// Stack calibration windows into one [n_windows, seq] batch.
pub fn calibration_batch(windows: &[Window]) -> Result<TokenBatch> {
    let first = windows.first().ok_or_else(|| Error::Contract("empty calibration set".into()))?;
    let seq = first.seq();
    let mut ids = Vec::with_capacity(windows.len() * seq);
    for w in windows {
        if w.seq() != seq {
            return Err(Error::Contract("calibration windows must share seq".into()));
        }
        ids.extend_from_slice(&w.input);
    }
    TokenBatch::new(windows.len(), seq, ids)
}

/// Index bookkeeping from original layers to the shrinking current model.
struct OriginTracker {
    /// deepest_orig[i] = deepest original layer absorbed into current layer i.
    deepest_orig: Vec<usize>,
    mapping: Vec<(usize, usize)>,
}

impl OriginTracker {
    fn new(n_layers: usize) -> Self {
        OriginTracker { deepest_orig: (0..n_layers).collect(), mapping: Vec::new() }
    }

    /// Record that `group` collapsed into one layer at `group.start`.
    fn merge(&mut self, group: LayerGroup) {
        let teacher = self.deepest_orig[group.end()];
        self.deepest_orig.splice(group.indices(), std::iter::once(teacher));
        let removed = group.len - 1;
        // Entries for layers absorbed by this merge fold into the new entry;
        // deeper entries shift left.
        self.mapping.retain(|&(_, b)| !group.indices().contains(&b));
        for pair in self.mapping.iter_mut() {
            if pair.1 > group.end() {
                pair.1 -= removed;
            }
        }
        self.mapping.push((teacher, group.start));
        self.mapping.sort_unstable_by_key(|&(_, b)| b);
    }

    fn mapping(&self) -> LayerMapping {
        LayerMapping { pairs: self.mapping.clone() }
    }
}

fn argmin_sbi(
    trace: &crate::model::ActivationTrace<f32>,
    n_layers: usize,
    m_eff: usize,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for start in 0..=(n_layers - m_eff - 1) {
        let (s, _) = sbi_score(trace, start, m_eff)?;
        if best.map_or(true, |(_, b)| s < b) {
            best = Some((start, s));
        }
    }
    best.ok_or_else(|| Error::Contract("no candidate group".into()))
}

fn validate_target(n_layers: usize, target: usize) -> Result<()> {
    if target < 1 {
        return Err(Error::Contract("target layer count must be >= 1".into()));
    }
    if target >= n_layers {
        return Err(Error::Contract(format!(
            "target {target} does not reduce the {n_layers}-layer model"
        )));
    }
    Ok(())
}

/// Iterative concatenation-based merging: pick the group with minimal SBI,
/// allocate the channel/head budget by block influence, merge, repeat until
/// the layer target is reached.
pub fn progressive_prune(
    model: &ToyModel<f32>,
    calib_windows: &[Window],
    eval_windows: &[Window],
    opts: &ComeOptions,
) -> Result<(ToyModel<f32>, PruneReport)> {
    validate_target(model.n_layers(), opts.target_layers)?;
    if opts.m < 1 {
        return Err(Error::Contract("m must be >= 1".into()));
    }
    let calib = calibration_batch(calib_windows)?;
    let ppl_before = perplexity(model, eval_windows, opts.batch_size)?.ppl;
    let mut current = model.clone();
    let mut tracker = OriginTracker::new(model.n_layers());
    let mut iterations = Vec::new();
    while current.n_layers() > opts.target_layers {
        let m_eff = opts.m.min(current.n_layers() - opts.target_layers);
        let (_, trace) = current.forward(&calib, &CaptureSpec::hidden_only())?;
        let (bi, _) = bi_scores(&trace);
        let (start, sbi) = argmin_sbi(&trace, current.n_layers(), m_eff)?;
        let group = LayerGroup::new(start, m_eff + 1);
        let (_, trace2) =
            current.forward(&calib, &CaptureSpec::for_layers(group.start, group.end()))?;
        let plan =
            build_merge_plan(&current, &trace2, group, opts.p, opts.rho, opts.norm_mode)?;
        current = apply_concat_merge(&current, &plan)?;
        tracker.merge(group);
        iterations.push(IterationRecord {
            group,
            sbi: Some(sbi),
            bi: Some(bi[group.indices()].to_vec()),
            ratios: plan.ratios.clone(),
            ffn_counts: plan.ffn_selected.iter().map(|s| s.len()).collect(),
            head_counts: plan.heads_selected.iter().map(|s| s.len()).collect(),
            candidates: None,
            chosen_ratio: None,
        });
    }
    let ppl_after = perplexity(&current, eval_windows, opts.batch_size)?.ppl;
    let report = PruneReport {
        method: "come".into(),
        initial_layers: model.n_layers(),
        final_layers: current.n_layers(),
        seed: opts.seed,
        calib_samples: calib_windows.len(),
        p: Some(opts.p),
        rho: Some(opts.rho),
        m: Some(opts.m),
        n: None,
        iterations,
        mapping: tracker.mapping(),
        ppl_before,
        ppl_after,
    };
    Ok((current, report))
}

/// Posterior variant: merges exactly two layers per iteration, trying every
/// retention ratio in {i/n} and keeping the candidate with the lowest
/// calibration perplexity (lowest ratio on ties). The chosen perplexity can
/// never exceed the r = 0 / r = 1 endpoints because those are candidates.
pub fn posterior_prune(
    model: &ToyModel<f32>,
    calib_windows: &[Window],
    eval_windows: &[Window],
    opts: &ComeOptions,
) -> Result<(ToyModel<f32>, PruneReport)> {
    validate_target(model.n_layers(), opts.target_layers)?;
    if opts.n < 1 {
        return Err(Error::Contract("posterior grid n must be >= 1".into()));
    }
    let calib = calibration_batch(calib_windows)?;
    let ppl_before = perplexity(model, eval_windows, opts.batch_size)?.ppl;
    let mut current = model.clone();
    let mut tracker = OriginTracker::new(model.n_layers());
    let mut iterations = Vec::new();
    while current.n_layers() > opts.target_layers {
        let (_, trace) = current.forward(&calib, &CaptureSpec::hidden_only())?;
        let (start, sbi) = argmin_sbi(&trace, current.n_layers(), 1)?;
        let group = LayerGroup::new(start, 2);
        let (_, trace2) =
            current.forward(&calib, &CaptureSpec::for_layers(group.start, group.end()))?;
        let mut candidates = Vec::with_capacity(opts.n + 1);
        let mut chosen: Option<(f64, f64, ToyModel<f32>, Vec<f64>)> = None;
        for i in 0..=opts.n {
            let r = i as f64 / opts.n as f64;
            let ratios = vec![r, 1.0 - r];
            let plan = build_merge_plan_with_ratios(
                &current,
                &trace2,
                group,
                &ratios,
                opts.norm_mode,
            )?;
            let candidate = apply_concat_merge(&current, &plan)?;
            let ppl = perplexity(&candidate, calib_windows, opts.batch_size)?.ppl;
            candidates.push((r, ppl));
            if chosen.as_ref().map_or(true, |(_, best, _, _)| ppl < *best) {
                chosen = Some((r, ppl, candidate, ratios));
            }
        }
        let (r, _ppl, winner, ratios) = chosen.expect("n >= 1 yields candidates");
        current = winner;
        tracker.merge(group);
        iterations.push(IterationRecord {
            group,
            sbi: Some(sbi),
            bi: None,
            ratios,
            ffn_counts: vec![],
            head_counts: vec![],
            candidates: Some(candidates),
            chosen_ratio: Some(r),
        });
    }
    let ppl_after = perplexity(&current, eval_windows, opts.batch_size)?.ppl;
    let report = PruneReport {
        method: "come-p".into(),
        initial_layers: model.n_layers(),
        final_layers: current.n_layers(),
        seed: opts.seed,
        calib_samples: calib_windows.len(),
        p: None,
        rho: None,
        m: Some(1),
        n: Some(opts.n),
        iterations,
        mapping: tracker.mapping(),
        ppl_before,
        ppl_after,
    };
    Ok((current, report))
}

/// Direct layer pruning: remove the lowest-scoring layers in one shot.
/// `protect_ends` shields the first four and last two layers.
pub fn dlp_prune(
    model: &ToyModel<f32>,
    scores: &LayerScoreSet,
    target_layers: usize,
    protect_ends: bool,
    eval_windows: &[Window],
    batch_size: usize,
    method: &str,
    seed: u64,
) -> Result<(ToyModel<f32>, PruneReport)> {
    let n = model.n_layers();
    if scores.scores.len() != n {
        return Err(Error::Contract(format!(
            "{} scores for {} layers",
            scores.scores.len(),
            n
        )));
    }
    if target_layers > n {
        return Err(Error::Contract("target exceeds layer count".into()));
    }
    let remove_count = n - target_layers;
    let removable: Vec<usize> = (0..n)
        .filter(|&l| !protect_ends || (l >= 4 && l < n.saturating_sub(2)))
        .collect();
    if removable.len() < remove_count {
        return Err(Error::Contract(format!(
            "only {} removable layers for {} removals (protect_ends)",
            removable.len(),
            remove_count
        )));
    }
    let mut order = removable;
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(a.cmp(&b)));
    let removed: Vec<usize> = order.into_iter().take(remove_count).collect();
    let ppl_before = perplexity(model, eval_windows, batch_size)?.ppl;
    let pruned = remove_layers(model, &removed)?;
    let ppl_after = perplexity(&pruned, eval_windows, batch_size)?.ppl;
    let mut sorted_removed = removed;
    sorted_removed.sort_unstable();
    let report = PruneReport {
        method: method.to_string(),
        initial_layers: n,
        final_layers: pruned.n_layers(),
        seed,
        calib_samples: 0,
        p: None,
        rho: None,
        m: None,
        n: None,
        iterations: sorted_removed
            .iter()
            .map(|&l| IterationRecord {
                group: LayerGroup::new(l, 1),
                sbi: None,
                bi: None,
                ratios: vec![],
                ffn_counts: vec![],
                head_counts: vec![],
                candidates: None,
                chosen_ratio: None,
            })
            .collect(),
        mapping: LayerMapping::default(),
        ppl_before,
        ppl_after,
    };
    Ok((pruned, report))
}

/// Greedy posterior removal: each round drops the layer whose removal leaves
/// the lowest calibration NLL, re-scoring the shrunk model every time.
pub fn sleb_prune(
    model: &ToyModel<f32>,
    calib_windows: &[Window],
    eval_windows: &[Window],
    target_layers: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ToyModel<f32>, PruneReport)> {
    validate_target(model.n_layers(), target_layers)?;
    let ppl_before = perplexity(model, eval_windows, batch_size)?.ppl;
    let mut current = model.clone();
    let mut iterations = Vec::new();
    while current.n_layers() > target_layers {
        let set = posterior_ppl_importance(&current, calib_windows, batch_size)?;
        let mut best = 0;
        for (i, &s) in set.scores.iter().enumerate() {
            if s < set.scores[best] {
                best = i;
            }
        }
        current = current.without_layer(best)?;
        iterations.push(IterationRecord {
            group: LayerGroup::new(best, 1),
            sbi: None,
            bi: None,
            ratios: vec![],
            ffn_counts: vec![],
            head_counts: vec![],
            candidates: None,
            chosen_ratio: None,
        });
    }
    let ppl_after = perplexity(&current, eval_windows, batch_size)?.ppl;
    let report = PruneReport {
        method: "dlp-sleb".into(),
        initial_layers: model.n_layers(),
        final_layers: current.n_layers(),
        seed,
        calib_samples: calib_windows.len(),
        p: None,
        rho: None,
        m: None,
        n: None,
        iterations,
        mapping: LayerMapping::default(),
        ppl_before,
        ppl_after,
    };
    Ok((current, report))
}

/// Weight-sum baseline: the SBI-chosen adjacent pair is folded with the
/// difference-summing merge instead of concatenation.
pub fn wslp_laco_prune(
    model: &ToyModel<f32>,
    calib_windows: &[Window],
    eval_windows: &[Window],
    target_layers: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ToyModel<f32>, PruneReport)> {
    validate_target(model.n_layers(), target_layers)?;
    let calib = calibration_batch(calib_windows)?;
    let ppl_before = perplexity(model, eval_windows, batch_size)?.ppl;
    let mut current = model.clone();
    let mut tracker = OriginTracker::new(model.n_layers());
    let mut iterations = Vec::new();
    while current.n_layers() > target_layers {
        let (_, trace) = current.forward(&calib, &CaptureSpec::hidden_only())?;
        let (start, sbi) = argmin_sbi(&trace, current.n_layers(), 1)?;
        let group = LayerGroup::new(start, 2);
        current = laco_merge(&current, group)?;
        tracker.merge(group);
        iterations.push(IterationRecord {
            group,
            sbi: Some(sbi),
            bi: None,
            ratios: vec![],
            ffn_counts: vec![],
            head_counts: vec![],
            candidates: None,
            chosen_ratio: None,
        });
    }
    let ppl_after = perplexity(&current, eval_windows, batch_size)?.ppl;
    let report = PruneReport {
        method: "wslp-laco".into(),
        initial_layers: model.n_layers(),
        final_layers: current.n_layers(),
        seed,
        calib_samples: calib_windows.len(),
        p: None,
        rho: None,
        m: None,
        n: None,
        iterations,
        mapping: tracker.mapping(),
        ppl_before,
        ppl_after,
    };
    Ok((current, report))
}
