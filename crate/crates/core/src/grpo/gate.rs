use super::{EntropyGate, GrpoError};

/// Number of tokens the top-`rho` quantile admits out of `n`: `ceil(rho * n)`,
/// at least one. Products within 1e-9 of an integer are taken as that integer
/// so that e.g. `0.2 * 5` admits exactly one token.
pub fn pass_count(rho: f64, n: usize) -> usize {
    let x = rho * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Gate threshold for a batch of pooled token entropies.
///
/// Quantile mode uses nearest rank: the threshold is the `k`-th largest
/// entropy with `k = pass_count(rho, n)`. Since the predicate is
/// `H >= threshold`, tokens tied with the threshold all pass.
pub fn entropy_threshold(entropies: &[f64], gate: EntropyGate) -> Result<f64, GrpoError> {
    match gate {
        EntropyGate::Off => Ok(f64::NEG_INFINITY),
        EntropyGate::Fixed { tau } => Ok(tau),
        EntropyGate::Quantile { rho } => {
            if entropies.is_empty() {
                return Err(GrpoError::EmptyBatch);
            }
            let mut sorted = entropies.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Ok(sorted[pass_count(rho, sorted.len()) - 1])
        }
    }
}

pub fn entropy_mask(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|&h| h >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_on_five_values() {
        let h = [0.0, 1.0, 2.0, 3.0, 4.0];
        let t = entropy_threshold(&h, EntropyGate::Quantile { rho: 0.2 }).unwrap();
        assert_eq!(t, 4.0);
        assert_eq!(entropy_mask(&h, t), vec![false, false, false, false, true]);
        let t = entropy_threshold(&h, EntropyGate::Quantile { rho: 0.5 }).unwrap();
        assert_eq!(t, 2.0);
    }

    #[test]
    fn off_passes_everything() {
        let t = entropy_threshold(&[], EntropyGate::Off).unwrap();
        assert_eq!(t, f64::NEG_INFINITY);
        assert!(entropy_mask(&[0.0, 1e9], t).iter().all(|&m| m));
    }

    #[test]
    fn fixed_threshold() {
        let t = entropy_threshold(&[0.2, 0.9], EntropyGate::Fixed { tau: 0.5 }).unwrap();
        assert_eq!(entropy_mask(&[0.2, 0.9], t), vec![false, true]);
    }

    #[test]
    fn ties_at_threshold_all_pass() {
        let h = [1.0, 3.0, 3.0, 3.0, 0.5];
        let t = entropy_threshold(&h, EntropyGate::Quantile { rho: 0.2 }).unwrap();
        assert_eq!(t, 3.0);
        assert_eq!(entropy_mask(&h, t).iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(
            entropy_threshold(&[], EntropyGate::Quantile { rho: 0.2 }),
            Err(GrpoError::EmptyBatch)
        ));
    }

    #[test]
    fn pass_counts() {
        assert_eq!(pass_count(0.2, 5), 1);
        assert_eq!(pass_count(0.2, 10), 2);
        assert_eq!(pass_count(0.2, 11), 3);
        assert_eq!(pass_count(0.01, 3), 1);
        assert_eq!(pass_count(0.7, 10), 7);
    }
}
