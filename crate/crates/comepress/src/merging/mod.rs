//! Layer-count reduction: retention-ratio allocation, concatenation-based
//! merging, weight-sum baselines, and the pruning loops that drive them.

pub mod concat;
pub mod prune;
pub mod ratios;
pub mod weight_sum;

pub use concat::{apply_concat_merge, build_merge_plan};
pub use prune::{dlp_prune, posterior_prune, progressive_prune, sleb_prune, wslp_laco_prune};
pub use ratios::{allocate_counts, retention_ratios, RatioDiagnostics};
pub use weight_sum::{alpha_blend_merge, laco_merge, remove_layers};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Contiguous run of layers, 0-based, `len >= 2` for merges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub start: usize,
    pub len: usize,
}

impl LayerGroup {
    pub fn new(start: usize, len: usize) -> Self {
        LayerGroup { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.len < 2 {
            return Err(Error::Contract(format!("merge group needs >= 2 layers, got {}", self.len)));
        }
        if self.end() >= n_layers {
            return Err(Error::Contract(format!(
                "group [{}, {}] out of range for {} layers",
                self.start,
                self.end(),
                n_layers
            )));
        }
        Ok(())
    }
}

/// How the merged layer's norm gammas are formed: elementwise mean over the
/// group, or copied from the layer holding the largest retention ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Average,
    FollowBase,
}

/// Everything needed to assemble one merged layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergePlan {
    pub group: LayerGroup,
    /// Per-layer retention ratios, summing to 1.
    pub ratios: Vec<f64>,
    /// Per-layer FFN channel picks, ascending, sizes summing to d_ff.
    pub ffn_selected: Vec<Vec<usize>>,
    /// Per-layer head picks, ascending, sizes summing to n_heads.
    pub heads_selected: Vec<Vec<usize>>,
    pub norm_mode: NormMode,
}

impl MergePlan {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.group.validate(cfg.n_layers)?;
        let g = self.group.len;
        if self.ratios.len() != g || self.ffn_selected.len() != g || self.heads_selected.len() != g
        {
            return Err(Error::Contract("plan arity does not match group size".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("ratios sum to {sum}, not 1")));
        }
        if self.ratios.iter().any(|&r| !(0.0..=1.0 + 1e-12).contains(&r)) {
            return Err(Error::Contract(format!("ratio outside [0, 1]: {:?}", self.ratios)));
        }
        let ffn_total: usize = self.ffn_selected.iter().map(|s| s.len()).sum();
        if ffn_total != cfg.d_ff {
            return Err(Error::Contract(format!(
                "selected {ffn_total} FFN channels, need {}",
                cfg.d_ff
            )));
        }
        let head_total: usize = self.heads_selected.iter().map(|s| s.len()).sum();
        if head_total != cfg.n_heads {
            return Err(Error::Contract(format!(
                "selected {head_total} heads, need {}",
                cfg.n_heads
            )));
        }
        for (list, bound) in self
            .ffn_selected
            .iter()
            .map(|l| (l, cfg.d_ff))
            .chain(self.heads_selected.iter().map(|l| (l, cfg.n_heads)))
        {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract("selection lists must be strictly ascending".into()));
            }
            if list.last().is_some_and(|&i| i >= bound) {
                return Err(Error::Contract("selection index out of range".into()));
            }
        }
        Ok(())
    }

    /// Index of the layer holding the largest ratio (lowest index on ties).
    pub fn base_layer(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.ratios.iter().enumerate() {
            if r > self.ratios[best] {
                best = i;
            }
        }
        best
    }
}

/// Teacher/student layer correspondences produced by pruning: `a` is the
/// deepest original layer absorbed into merged layer `b` of the pruned model.
/// Both sides strictly increase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pub pairs: Vec<(usize, usize)>,
}

impl LayerMapping {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.pairs.windows(2) {
            if w[0].0 >= w[1].0 || w[0].1 >= w[1].1 {
                return Err(Error::Contract(format!(
                    "mapping must strictly increase on both sides: {:?}",
                    self.pairs
                )));
            }
        }
        Ok(())
    }
}

/// Per-iteration record of a pruning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub group: LayerGroup,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bi: Option<Vec<f64>>,
    pub ratios: Vec<f64>,
    pub ffn_counts: Vec<usize>,
    pub head_counts: Vec<usize>,
    /// CoMe-P only: every evaluated (ratio, ppl) candidate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub initial_layers: usize,
    pub final_layers: usize,
    pub seed: u64,
    pub calib_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub iterations: Vec<IterationRecord>,
    pub mapping: LayerMapping,
    pub ppl_before: f64,
    pub ppl_after: f64,
}

impl PruneReport {
    pub fn validate(&self) -> Result<()> {
        if self.final_layers > self.initial_layers {
            return Err(Error::Corruption("final layer count exceeds initial".into()));
        }
        self.mapping.validate()
    }
}
