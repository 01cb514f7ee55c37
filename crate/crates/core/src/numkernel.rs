//! Numeric primitives shared by the rest of the crate. Everything is `f64`.

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Plain feature/prototype storage.
pub type VecF = Vec<f64>;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Inner product `Σ a_k b_k`.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// Unit-length copy of `a`.
pub fn l2_normalize(a: &[f64]) -> Result<VecF> {
    let n = norm(a);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// `log Σ exp(x_k)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::Empty("log_sum_exp of no values"))?;
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Huber-style box loss with unit transition point.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dot_matches_reverse_order_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut reference = 0.0;
        for k in (0..200).rev() {
            reference += a[k] * b[k];
        }
        assert!((dot(&a, &b).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = [0.0, 1.0, 0.0];
        let w = l2_normalize(&u).unwrap();
        for (x, y) in u.iter().zip(&w) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[3.25]).unwrap(), 3.25);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn lse_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert_eq!(smooth_l1_grad(-1.0), -1.0);
        assert!((smooth_l1_grad(0.999_999_999) - 1.0).abs() < 1e-8);
        assert_eq!(smooth_l1(1.0), 0.5);
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn dot_symmetric_bilinear(a in vec_strategy(8), b in vec_strategy(8), c in vec_strategy(8), s in -5.0f64..5.0) {
            prop_assert!((dot(&a, &b).unwrap() - dot(&b, &a).unwrap()).abs() < 1e-12);
            let sa_c: Vec<f64> = a.iter().zip(&c).map(|(x, y)| s * x + y).collect();
            let lhs = dot(&sa_c, &b).unwrap();
            let rhs = s * dot(&a, &b).unwrap() + dot(&c, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()) * 100.0);
        }

        #[test]
        fn normalize_idempotent_and_scale_free(a in vec_strategy(6), c in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3);
            let u = l2_normalize(&a).unwrap();
            let uu = l2_normalize(&u).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            let us = l2_normalize(&scaled).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
            for k in 0..a.len() {
                prop_assert!((u[k] - uu[k]).abs() < 1e-12);
                prop_assert!((u[k] - us[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_shift(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&xs).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn smooth_l1_derivative_matches_fd(x in -4.0f64..4.0) {
            prop_assume!((x.abs() - 1.0).abs() > 1e-5);
            let h = 1e-6;
            let fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
            let an = smooth_l1_grad(x);
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            prop_assert!(rel < 1e-6 || (fd - an).abs() < 1e-9);
        }
    }
}
