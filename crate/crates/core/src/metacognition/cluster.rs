//! One-dimensional two-means clustering for threshold fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fitted two-cluster split of one statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    /// Cluster centroids, low then high.
    pub centroids: (f64, f64),
    /// Midpoint of the centroids; strictly between them.
    pub threshold: f64,
    /// Candidate partitions examined by the fit.
    pub iterations: usize,
    /// Within-cluster sum of squared deviations of the chosen partition.
    pub inertia: f64,
}

/// Exact two-means clustering in one dimension.
///
/// The SSE-optimal two-cluster partition of scalars is contiguous in sorted
/// order, so scanning every split point with prefix sums finds the global
/// optimum (the fixpoint Lloyd's iterations reach from the best start;
/// plain min/max-initialized Lloyd can stall in a worse local minimum).
/// Deterministic and order-invariant. The threshold is the centroid
/// midpoint.
pub fn fit_two_means(values: &[f64]) -> Result<ThresholdFit> {
    if values.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite values in threshold fit".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    let n = sorted.len();
    if sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateFit(
            "all values identical; no threshold separates them".into(),
        ));
    }

    // prefix sums of x and x^2 make every split's SSE O(1)
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        sum[i + 1] = sum[i] + v;
        sq[i + 1] = sq[i] + v * v;
    }
    let sse = |a: usize, b: usize| {
        // sum of squared deviations of sorted[a..b]
        let count = (b - a) as f64;
        let s = sum[b] - sum[a];
        (sq[b] - sq[a]) - s * s / count
    };

    let mut best_split = 1;
    let mut best_sse = f64::INFINITY;
    let mut iterations = 0;
    for split in 1..n {
        iterations += 1;
        let total = sse(0, split) + sse(split, n);
        if total < best_sse {
            best_sse = total;
            best_split = split;
        }
    }

    let lo = (sum[best_split] - sum[0]) / best_split as f64;
    let hi = (sum[n] - sum[best_split]) / (n - best_split) as f64;
    let threshold = 0.5 * (lo + hi);
    if !(lo < threshold && threshold < hi) {
        return Err(Error::DegenerateFit(format!(
            "centroids collapsed: ({lo}, {hi})"
        )));
    }
    Ok(ThresholdFit {
        centroids: (lo, hi),
        threshold,
        iterations,
        inertia: best_sse.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive SSE-optimal two-cluster split: in one dimension the optimum
    /// is contiguous in sorted order, so trying every split point finds it.
    pub(crate) fn brute_force_two_means(values: &[f64]) -> (f64, f64, f64) {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for split in 1..sorted.len() {
            let (a, b) = sorted.split_at(split);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let sse = |s: &[f64], c: f64| s.iter().map(|&v| (v - c) * (v - c)).sum::<f64>();
            let (ca, cb) = (mean(a), mean(b));
            let total = sse(a, ca) + sse(b, cb);
            if total < best.0 {
                best = (total, ca, cb);
            }
        }
        (best.1, best.2, best.0)
    }

    #[test]
    fn four_point_example_matches_brute_force() {
        let values = [0.10, 0.12, 0.90, 0.95];
        let fit = fit_two_means(&values).unwrap();
        let (lo, hi, sse) = brute_force_two_means(&values);
        assert!((fit.centroids.0 - lo).abs() < 1e-12);
        assert!((fit.centroids.1 - hi).abs() < 1e-12);
        assert!((fit.inertia - sse).abs() < 1e-12);
        assert!((fit.centroids.0 - 0.11).abs() < 1e-12);
        assert!((fit.centroids.1 - 0.925).abs() < 1e-12);
        assert!((fit.threshold - 0.5175).abs() < 1e-12);
    }

    #[test]
    fn two_values_threshold_is_midpoint() {
        let fit = fit_two_means(&[0.2, 0.8]).unwrap();
        assert!((fit.threshold - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_values_are_degenerate() {
        assert!(matches!(
            fit_two_means(&[0.3, 0.3, 0.3]),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(fit_two_means(&[0.3]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn order_invariant_over_shuffles() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut values: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.5)).collect();
        let reference = fit_two_means(&values).unwrap();
        for _ in 0..100 {
            values.shuffle(&mut rng);
            let fit = fit_two_means(&values).unwrap();
            assert!((fit.threshold - reference.threshold).abs() < 1e-12);
            assert!((fit.centroids.0 - reference.centroids.0).abs() < 1e-12);
            assert!((fit.centroids.1 - reference.centroids.1).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_exhaustive_optimum_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..200 {
            let n = rng.gen_range(2..=12);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let fit = match fit_two_means(&values) {
                Ok(f) => f,
                Err(Error::DegenerateFit(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            let (lo, hi, sse) = brute_force_two_means(&values);
            assert!(
                (fit.inertia - sse).abs() < 1e-9,
                "trial {trial}: lloyd {} vs optimal {} for {values:?}",
                fit.inertia,
                sse
            );
            assert!((fit.centroids.0 - lo).abs() < 1e-9);
            assert!((fit.centroids.1 - hi).abs() < 1e-9);
            assert!(fit.centroids.0 < fit.threshold && fit.threshold < fit.centroids.1);
        }
    }
}
