use super::ModelError;

/// Value, first and second derivative (in the prediction) of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub value: f64,
    pub gradient: f64,
    pub hessian: f64,
}

/// Squared error weighted by the inverse measured energy,
/// `(predicted - measured)^2 / measured`.
///
/// Low-energy kernels get the largest weights, so the fit is tightest where
/// the search cares most.
pub fn weighted_sq_loss(predicted: f64, measured: f64) -> Result<LossTerms, ModelError> {
    if !(measured > 0.0) {
        return Err(ModelError::NonPositiveEnergy(measured));
    }
    let diff = predicted - measured;
    Ok(LossTerms {
        value: diff * diff / measured,
        gradient: 2.0 * diff / measured,
        hessian: 2.0 / measured,
    })
}

/// Ceiling on [`snr_db`], reached when predictions are (numerically) exact.
pub const SNR_CAP_DB: f64 = 100.0;

/// Signal-to-error ratio in decibels:
/// `10 log10(sum measured^2 / sum (predicted - measured)^2)`, capped at
/// [`SNR_CAP_DB`].
pub fn snr_db(predicted: &[f64], measured: &[f64]) -> Result<f64, ModelError> {
    if predicted.len() != measured.len() {
        return Err(ModelError::LengthMismatch {
            predicted: predicted.len(),
            measured: measured.len(),
        });
    }
    if measured.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if let Some(&bad) = measured.iter().find(|&&m| !(m > 0.0)) {
        return Err(ModelError::NonPositiveEnergy(bad));
    }
    let signal: f64 = measured.iter().map(|m| m * m).sum();
    let error: f64 = predicted.iter().zip(measured).map(|(p, m)| (p - m) * (p - m)).sum();
    if error == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    let db = 10.0 * (signal / error).log10();
    Ok(if db.is_finite() { db.min(SNR_CAP_DB) } else { SNR_CAP_DB })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn exact_prediction_costs_nothing() {
        let t = weighted_sq_loss(5.0, 5.0).unwrap();
        assert_eq!((t.value, t.gradient), (0.0, 0.0));
    }

    #[test]
    fn direct_substitution() {
        let t = weighted_sq_loss(2.0, 1.0).unwrap();
        assert_eq!(t.value, 1.0);
        assert_eq!(t.gradient, 2.0);
        assert_eq!(t.hessian, 2.0);
        let fd = central_diff(|p| weighted_sq_loss(p, 1.0).unwrap().value, 2.0);
        assert!((fd - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_positive_measurement_is_rejected() {
        assert_eq!(weighted_sq_loss(1.0, 0.0), Err(ModelError::NonPositiveEnergy(0.0)));
        assert!(weighted_sq_loss(1.0, -2.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = rng.random_range(0.1..100.0);
            let m = rng.random_range(0.1..100.0);
            let t = weighted_sq_loss(p, m).unwrap();
            let g = central_diff(|x| weighted_sq_loss(x, m).unwrap().value, p);
            let h = central_diff(|x| weighted_sq_loss(x, m).unwrap().gradient, p);
            assert!((g - t.gradient).abs() <= 1e-6 * t.gradient.abs().max(1.0), "{p} {m}");
            assert!((h - t.hessian).abs() <= 1e-6 * t.hessian.abs().max(1.0), "{p} {m}");
        }
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr_db(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), SNR_CAP_DB);
        assert!(snr_db(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap().abs() < 1e-12);
        // 10 log10(2 / 0.02)
        assert!((snr_db(&[1.1, 0.9], &[1.0, 1.0]).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn snr_errors() {
        assert_eq!(snr_db(&[1.0], &[1.0, 2.0]), Err(ModelError::LengthMismatch { predicted: 1, measured: 2 }));
        assert_eq!(snr_db(&[], &[]), Err(ModelError::EmptyInput));
        assert_eq!(snr_db(&[1.0], &[0.0]), Err(ModelError::NonPositiveEnergy(0.0)));
    }

    proptest! {
        #[test]
        fn snr_is_scale_invariant(
            pairs in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..20),
            scale in 0.01f64..100.0,
        ) {
            let (p, m): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = snr_db(&p, &m).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v * scale).collect();
            let ms: Vec<f64> = m.iter().map(|v| v * scale).collect();
            let b = snr_db(&ps, &ms).unwrap();
            prop_assert!((a - b).abs() < 1e-6 || (a == SNR_CAP_DB && b == SNR_CAP_DB));
        }
    }
}
