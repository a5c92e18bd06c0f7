//! Training-time expert budget ramp (the rehearsal for interventions).

/// Expert budget for `epoch` (1-based) out of `max_epochs`.
///
/// Flat at `t` through the first half, then a linear ramp that reaches
/// exactly `t_prime` at the final epoch. Values round half-up.
pub fn pseudo_intervention_budget(epoch: usize, max_epochs: usize, t: usize, t_prime: usize) -> usize {
    debug_assert!(epoch >= 1 && epoch <= max_epochs);
    let half = max_epochs / 2;
    if epoch <= half {
        return t;
    }
    let progress = (epoch - half) as f64 / (max_epochs - half) as f64;
    let raw = t as f64 + (t_prime as f64 - t as f64) * progress;
    (raw + 0.5).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_match_stated_formula() {
        assert_eq!(pseudo_intervention_budget(15, 30, 2, 6), 2);
        assert_eq!(pseudo_intervention_budget(30, 30, 2, 6), 6);
        // e=23: 2 + 4*8/15 = 4.133... -> 4
        assert_eq!(pseudo_intervention_budget(23, 30, 2, 6), 4);
    }

    #[test]
    fn ramp_is_non_decreasing_with_exact_endpoints() {
        // exhaustive over small budgets and every length up to 100
        for max_epochs in 1..=100usize {
            for t in 1..=6usize {
                for t_prime in (t + 1)..=8usize {
                    let mut prev = 0;
                    for epoch in 1..=max_epochs {
                        let b = pseudo_intervention_budget(epoch, max_epochs, t, t_prime);
                        assert!(b >= prev, "decrease at epoch {epoch} ({max_epochs}, {t}, {t_prime})");
                        assert!(b >= t && b <= t_prime);
                        if epoch <= max_epochs / 2 {
                            assert_eq!(b, t);
                        }
                        prev = b;
                    }
                    assert_eq!(prev, t_prime, "final epoch must hit t_prime");
                }
            }
        }
    }
}
