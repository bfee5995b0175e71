//! Closed-form population cluster indices for Gaussian data and for a
//! two-component Gaussian mixture with a common mean shift.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Per-feature variances `lambda` (the first one largest), a mean shift
/// `a` applied to every feature of one component, and the mixing
/// proportion `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    lambdas: Vec<f64>,
    a: f64,
    eta: f64,
}

impl MixtureSpec {
    pub fn new(lambdas: Vec<f64>, a: f64, eta: f64) -> Result<Self> {
        validate_lambdas(&lambdas)?;
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidInput(format!("shift must be >= 0, got {a}")));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidInput(format!("eta must lie in (0, 1), got {eta}")));
        }
        Ok(MixtureSpec { lambdas, a, eta })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    fn p(&self) -> f64 {
        self.lambdas.len() as f64
    }

    /// `eta (1 - eta) a^2`, the variance the shift adds to each feature.
    fn shift_variance(&self) -> f64 {
        self.eta * (1.0 - self.eta) * self.a * self.a
    }
}

fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("need at least one variance".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput(format!("variances must be positive, got {l}")));
    }
    let max = lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lambdas[0] < max {
        return Err(Error::InvalidInput("the first variance must be the largest".into()));
    }
    Ok(())
}

/// `1 - (2/pi) lambda_1 / sum(lambda)`.
pub fn tci_gauss(lambdas: &[f64]) -> Result<f64> {
    validate_lambdas(lambdas)?;
    let total: f64 = lambdas.iter().sum();
    Ok(1.0 - 2.0 / PI * lambdas[0] / total)
}

/// Population CI of the unimodal null fitted to the mixture: the
/// Gaussian value with every variance inflated by the shift.
pub fn tci_null_mixture(spec: &MixtureSpec) -> f64 {
    let total: f64 = spec.lambdas.iter().sum();
    let sv = spec.shift_variance();
    1.0 - 2.0 / PI * (spec.lambdas[0] + sv) / (spec.p() * sv + total)
}

/// Population CI of the mixture itself, `WSS / TSS` with
/// `WSS = sum(lambda) - 2 lambda_1 / pi` and
/// `TSS = p eta (1 - eta) a^2 + sum(lambda)`.
pub fn tci_mix(spec: &MixtureSpec) -> f64 {
    let total: f64 = spec.lambdas.iter().sum();
    let wss = total - 2.0 * spec.lambdas[0] / PI;
    let tss = spec.p() * spec.shift_variance() + total;
    wss / tss
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_values() {
        assert_abs_diff_eq!(tci_gauss(&[1.0]).unwrap(), 0.363_380, epsilon = 1e-6);
        assert_abs_diff_eq!(tci_gauss(&[1.0, 1.0]).unwrap(), 0.681_690, epsilon = 1e-6);
        assert_abs_diff_eq!(tci_gauss(&[1.0, 1.0]).unwrap(), 1.0 - 1.0 / PI, epsilon = 1e-15);
        let many = vec![1.0; 10_000];
        assert!(tci_gauss(&many).unwrap() > 0.9999);
    }

    #[test]
    fn gauss_rejects_bad_lambdas() {
        assert!(tci_gauss(&[]).is_err());
        assert!(tci_gauss(&[1.0, 2.0]).is_err());
        assert!(tci_gauss(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn null_mixture_values() {
        let spec = MixtureSpec::new(vec![1.0, 1.0], 0.0, 0.3).unwrap();
        assert_abs_diff_eq!(tci_null_mixture(&spec), tci_gauss(&[1.0, 1.0]).unwrap(), epsilon = 1e-15);

        let spec = MixtureSpec::new(vec![1.0, 1.0], 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(tci_null_mixture(&spec), 1.0 - 1.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(tci_null_mixture(&spec), 0.681_690, epsilon = 1e-6);

        let tiny = MixtureSpec::new(vec![2.0, 1.0], 3.0, 1e-12).unwrap();
        assert_abs_diff_eq!(tci_null_mixture(&tiny), tci_gauss(&[2.0, 1.0]).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn mix_values() {
        let spec = MixtureSpec::new(vec![3.0, 1.0, 0.5], 0.0, 0.4).unwrap();
        assert_abs_diff_eq!(tci_mix(&spec), tci_gauss(&[3.0, 1.0, 0.5]).unwrap(), epsilon = 1e-15);

        let spec = MixtureSpec::new(vec![1.0, 1.0], 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(tci_mix(&spec), (1.0 - 1.0 / PI) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tci_mix(&spec), 0.340_845, epsilon = 1e-6);
        assert!(tci_mix(&spec) < tci_null_mixture(&spec));
    }

    #[test]
    fn spec_validation() {
        assert!(MixtureSpec::new(vec![1.0], -1.0, 0.5).is_err());
        assert!(MixtureSpec::new(vec![1.0], 1.0, 0.0).is_err());
        assert!(MixtureSpec::new(vec![1.0], 1.0, 1.0).is_err());
        assert!(MixtureSpec::new(vec![1.0, 2.0], 1.0, 0.5).is_err());
    }
}
