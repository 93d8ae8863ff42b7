use crate::error::{PlanError, Result};
use crate::scalar::Scalar;

/// 1-based ranks with ties sharing their average rank.
fn average_ranks<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].cmp_total(&xs[b]));
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1) / 2
        let avg = T::from_count(i + j + 2) / T::lit(2.0);
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = T::from_count(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut cov, mut va, mut vb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        cov = cov + (x - ma) * (y - mb);
        va = va + (x - ma) * (x - ma);
        vb = vb + (y - mb) * (y - mb);
    }
    if va == T::zero() || vb == T::zero() {
        return T::zero();
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn rank_correlation<T: Scalar>(estimates: &[T], simulated: &[T]) -> Result<T> {
    if estimates.len() != simulated.len() {
        return Err(PlanError::LengthMismatch {
            left: estimates.len(),
            right: simulated.len(),
        });
    }
    if estimates.len() < 3 {
        return Err(PlanError::Invalid(
            "rank correlation needs at least 3 pairs".into(),
        ));
    }
    let r = pearson(&average_ranks(estimates), &average_ranks(simulated));
    Ok(r.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(rank_correlation(&a, &a).unwrap(), 1.0);
        let r = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(rank_correlation(&a, &r).unwrap(), -1.0);
    }

    #[test]
    fn one_swap() {
        let rho: f64 = rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 30.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            rank_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(PlanError::LengthMismatch { .. })
        ));
        assert!(rank_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
