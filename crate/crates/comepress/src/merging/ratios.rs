//! Retention-ratio allocation and integer budget rounding.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RatioDiagnostics {
    /// All block-influence values were zero; ratios fell back to uniform.
    pub uniform_fallback: bool,
    /// The minimum-retention floor kicked in.
    pub adjusted: bool,
}

/// r_t = BI_t^p / sum(BI_i^p); if max r falls below `rho`, the dominant layer
/// (largest BI, lowest index on ties) is floored at exactly `rho` and the
/// rest rescaled to sum 1 - rho. The output sums to 1: one entry is always
/// computed as 1 minus the others so rounding cannot leak.
pub fn retention_ratios(
    bi_values: &[f64],
    p: f64,
    rho: f64,
) -> Result<(Vec<f64>, RatioDiagnostics)> {
    let g = bi_values.len();
    if g < 2 {
        return Err(Error::Contract(format!("retention needs a group of >= 2, got {g}")));
    }
    if !(p > 0.0) {
        return Err(Error::Contract(format!("p must be > 0, got {p}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho must be in [0, 1], got {rho}")));
    }
    if bi_values.iter().any(|&b| b < 0.0 || !b.is_finite()) {
        return Err(Error::Contract(format!("BI values must be finite and >= 0: {bi_values:?}")));
    }
    let mut diag = RatioDiagnostics::default();
    let weights: Vec<f64> = if bi_values.iter().all(|&b| b == 0.0) {
        diag.uniform_fallback = true;
        vec![1.0; g]
    } else {
        bi_values.iter().map(|&b| b.powf(p)).collect()
    };
    // Dominant layer: largest weight, lowest index on ties.
    let mut top = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[top] {
            top = i;
        }
    }
    let total: f64 = weights.iter().sum();
    let mut r: Vec<f64> = weights.iter().map(|&w| w / total).collect();
    // Absorb rounding into the dominant entry so the sum is exactly 1.
    r[top] = exact_complement(&r, top);

    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max < rho {
        diag.adjusted = true;
        let rest: f64 = r.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| v).sum();
        for (i, v) in r.iter_mut().enumerate() {
            if i != top {
                *v = if rest > 0.0 { (1.0 - rho) * *v / rest } else { 0.0 };
            }
        }
        r[top] = rho;
        // Re-absorb rounding into the largest non-floored entry.
        if g > 2 {
            let mut second = usize::MAX;
            for i in 0..g {
                if i != top && (second == usize::MAX || r[i] > r[second]) {
                    second = i;
                }
            }
            let others: f64 =
                r.iter().enumerate().filter(|&(i, _)| i != second).map(|(_, &v)| v).sum();
            r[second] = (1.0 - others).max(0.0);
        }
    }
    Ok((r, diag))
}

fn exact_complement(r: &[f64], skip: usize) -> f64 {
    let others: f64 = r.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, &v)| v).sum();
    (1.0 - others).max(0.0)
}

/// Largest-remainder rounding of `ratios * total` to integers that sum to
/// `total`. Remainder ties go to the larger ratio, then the lower index.
pub fn allocate_counts(ratios: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|&r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa)
            .then(ratios[b].total_cmp(&ratios[a]))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn symmetric_bi_splits_evenly() {
        let (r, d) = retention_ratios(&[0.3, 0.3], 2.0, 0.0).unwrap();
        assert_eq!(r, vec![0.5, 0.5]);
        assert!(!d.adjusted && !d.uniform_fallback);
    }

    #[test]
    fn linear_p_reproduces_proportions_exactly() {
        let (r, _) = retention_ratios(&[0.1, 0.3], 1.0, 0.0).unwrap();
        assert_eq!(r, vec![0.25, 0.75]);
    }

    #[test]
    fn floor_applies_with_tie_to_lower_index() {
        let (r, d) = retention_ratios(&[0.5, 0.5], 1.0, 0.97).unwrap();
        assert!(d.adjusted);
        assert_eq!(r[0], 0.97);
        assert_eq!(r[0] + r[1], 1.0);
        assert!((r[1] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn all_zero_bi_falls_back_to_uniform() {
        let (r, d) = retention_ratios(&[0.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        assert!(d.uniform_fallback);
        let sum: f64 = r.iter().sum();
        assert_eq!(sum, 1.0);
        for &v in &r {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn randomized_contract_sum_and_floor() {
        let mut rng = CounterRng::new(1234);
        for _ in 0..1000 {
            let g = 2 + rng.below(4);
            let bi: Vec<f64> = (0..g).map(|_| rng.uniform() * 2.0).collect();
            let p = 0.25 + rng.uniform() * 4.0;
            let rho = rng.uniform();
            let (r, d) = retention_ratios(&bi, p, rho).unwrap();
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
            assert!(r.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            if d.adjusted {
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(max, rho, "floored max must equal rho exactly");
            }
        }
    }

    #[test]
    fn count_allocation_examples() {
        assert_eq!(allocate_counts(&[0.75, 0.25], 4), vec![3, 1]);
        assert_eq!(allocate_counts(&[0.5, 0.5], 5), vec![3, 2]);
        assert_eq!(allocate_counts(&[1.0, 0.0], 256), vec![256, 0]);
    }

    #[test]
    fn counts_sum_exactly_and_stay_within_one_of_quota() {
        let mut rng = CounterRng::new(99);
        for _ in 0..1000 {
            let g = 2 + rng.below(5);
            let raw: Vec<f64> = (0..g).map(|_| rng.uniform() + 1e-9).collect();
            let total_raw: f64 = raw.iter().sum();
            let ratios: Vec<f64> = raw.iter().map(|&x| x / total_raw).collect();
            let total = rng.below(512);
            let counts = allocate_counts(&ratios, total);
            assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, r) in counts.iter().zip(&ratios) {
                assert!((*c as f64 - r * total as f64).abs() < 1.0);
            }
        }
    }
}
