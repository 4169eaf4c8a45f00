//! Empirical characteristic functions in feature space and the CF
//! discrepancy metric, plus a closed-form diagonal-Gaussian CF used as a
//! test oracle.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A frequency variable, one entry per feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Frequency(pub Tensor);

impl Frequency {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Complex value of a characteristic function at one frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfValue {
    pub re: f64,
    pub im: f64,
}

impl CfValue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn sub(&self, other: &CfValue) -> CfValue {
        CfValue {
            re: self.re - other.re,
            im: self.im - other.im,
        }
    }
}

/// Mean unit phasor of a feature batch: (1/|B|) sum exp(j <omega, v>).
pub fn empirical_cf(features: &[Tensor], omega: &Frequency) -> Result<CfValue> {
    if features.is_empty() {
        return Err(Error::EmptyInput("empirical_cf batch"));
    }
    let mut re = 0.0;
    let mut im = 0.0;
    for v in features {
        let theta = omega.0.dot(v)?;
        re += theta.cos();
        im += theta.sin();
    }
    let n = features.len() as f64;
    Ok(CfValue {
        re: re / n,
        im: im / n,
    })
}

/// Mean over frequencies of |Phi_a(omega) - Phi_b(omega)|. A pseudometric on
/// batches; this is the Monte-Carlo integrand of the condensation objective.
pub fn cf_discrepancy(feat_a: &[Tensor], feat_b: &[Tensor], omegas: &[Frequency]) -> Result<f64> {
    if omegas.is_empty() {
        return Err(Error::EmptyInput("cf_discrepancy omega list"));
    }
    let mut acc = 0.0;
    for omega in omegas {
        let a = empirical_cf(feat_a, omega)?;
        let b = empirical_cf(feat_b, omega)?;
        acc += a.sub(&b).modulus();
    }
    Ok(acc / omegas.len() as f64)
}

/// Closed-form CF of a diagonal Gaussian:
/// exp(j <omega, mu> - 1/2 sum sigma_i^2 omega_i^2).
pub fn gaussian_cf(mean: &Tensor, var_diag: &Tensor, omega: &Frequency) -> Result<CfValue> {
    if var_diag.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let phase = omega.0.dot(mean)?;
    let mut quad = 0.0;
    for (w, s2) in omega.0.data().iter().zip(var_diag.data()) {
        quad += s2 * w * w;
    }
    let amp = (-0.5 * quad).exp();
    Ok(CfValue {
        re: amp * phase.cos(),
        im: amp * phase.sin(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};

    fn freq(v: Vec<f64>) -> Frequency {
        Frequency(Tensor::vector(v).unwrap())
    }

    fn random_batch(rng: &mut Rng, n: usize, dim: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| gaussian_sample(rng, vec![dim], 0.0, 1.0).unwrap())
            .collect()
    }

    #[test]
    fn cf_at_zero_is_one_exactly() {
        let mut rng = Rng::seeded(0);
        let batch = random_batch(&mut rng, 17, 3);
        let v = empirical_cf(&batch, &freq(vec![0.0; 3])).unwrap();
        assert_eq!((v.re, v.im), (1.0, 0.0));
    }

    #[test]
    fn single_point_cf_is_unit_phasor() {
        let batch = vec![Tensor::vector(vec![1.0, 0.0]).unwrap()];
        let v = empirical_cf(&batch, &freq(vec![std::f64::consts::FRAC_PI_2, 0.0])).unwrap();
        assert!(v.re.abs() < 1e-12);
        assert!((v.im - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conjugate_pair_batch_has_real_cf() {
        let v = Tensor::vector(vec![0.7, -1.3]).unwrap();
        let batch = vec![v.clone(), v.scale(-1.0)];
        let om = freq(vec![0.4, 1.1]);
        let cf = empirical_cf(&batch, &om).unwrap();
        assert!(cf.im.abs() < 1e-12);
        assert!((cf.re - om.0.dot(&v).unwrap().cos()).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_zero_on_identical_batches() {
        let mut rng = Rng::seeded(1);
        let batch = random_batch(&mut rng, 8, 2);
        let omegas: Vec<Frequency> = (0..5)
            .map(|_| Frequency(gaussian_sample(&mut rng, vec![2], 0.0, 1.0).unwrap()))
            .collect();
        assert_eq!(cf_discrepancy(&batch, &batch, &omegas).unwrap(), 0.0);
    }

    #[test]
    fn discrepancy_zero_at_omega_zero() {
        let mut rng = Rng::seeded(2);
        let a = random_batch(&mut rng, 6, 2);
        let b = random_batch(&mut rng, 9, 2);
        let d = cf_discrepancy(&a, &b, &[freq(vec![0.0, 0.0])]).unwrap();
        assert!(d < 1e-15);
    }

    #[test]
    fn singleton_batches_match_closed_form() {
        // |e^{j<w,v1>} - e^{j<w,v2>}| = 2 |sin(<w, v1-v2>/2)|
        let v1 = Tensor::vector(vec![0.3, -0.8]).unwrap();
        let v2 = Tensor::vector(vec![1.1, 0.4]).unwrap();
        let om = freq(vec![0.9, -0.2]);
        let d = cf_discrepancy(&[v1.clone()], &[v2.clone()], &[om.clone()]).unwrap();
        let expected = 2.0 * (om.0.dot(&v1.sub(&v2).unwrap()).unwrap() / 2.0).sin().abs();
        assert!((d - expected).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_requires_omegas() {
        let batch = vec![Tensor::vector(vec![1.0]).unwrap()];
        assert!(cf_discrepancy(&batch, &batch, &[]).is_err());
    }

    #[test]
    fn gaussian_cf_standard_normal() {
        let mean = Tensor::vector(vec![0.0]).unwrap();
        let var = Tensor::vector(vec![1.0]).unwrap();
        let v = gaussian_cf(&mean, &var, &freq(vec![1.0])).unwrap();
        assert!((v.re - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(v.im, 0.0);
    }

    #[test]
    fn gaussian_cf_zero_freq_and_point_mass() {
        let mean = Tensor::vector(vec![2.0]).unwrap();
        let var = Tensor::vector(vec![0.0]).unwrap();
        let v = gaussian_cf(&mean, &var, &freq(vec![0.0])).unwrap();
        assert_eq!((v.re, v.im), (1.0, 0.0));
        // point mass at 2, omega = pi -> phasor at angle 2*pi
        let v = gaussian_cf(&mean, &var, &freq(vec![std::f64::consts::PI])).unwrap();
        assert!((v.re - 1.0).abs() < 1e-12);
        assert!(v.im.abs() < 1e-12);
    }

    #[test]
    fn gaussian_cf_rejects_negative_variance() {
        let mean = Tensor::vector(vec![0.0]).unwrap();
        let var = Tensor::vector(vec![-1.0]).unwrap();
        assert!(gaussian_cf(&mean, &var, &freq(vec![1.0])).is_err());
    }

    #[test]
    fn cf_axioms_on_random_fixtures() {
        let mut rng = Rng::seeded(9);
        for _ in 0..200 {
            let batch = random_batch(&mut rng, 5, 3);
            let om = Frequency(gaussian_sample(&mut rng, vec![3], 0.0, 2.0).unwrap());
            let v = empirical_cf(&batch, &om).unwrap();
            assert!(v.modulus() <= 1.0 + 1e-12);
            let neg = Frequency(om.0.scale(-1.0));
            let c = empirical_cf(&batch, &neg).unwrap();
            assert!((c.re - v.re).abs() < 1e-12);
            assert!((c.im + v.im).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_property_identity() {
        let mut rng = Rng::seeded(10);
        for _ in 0..100 {
            let batch = random_batch(&mut rng, 6, 3);
            let c = rng.uniform_in(-2.0, 2.0);
            let om = Frequency(gaussian_sample(&mut rng, vec![3], 0.0, 1.0).unwrap());
            let scaled: Vec<Tensor> = batch.iter().map(|t| t.scale(c)).collect();
            let lhs = empirical_cf(&scaled, &om).unwrap();
            let rhs = empirical_cf(&batch, &Frequency(om.0.scale(c))).unwrap();
            assert!((lhs.re - rhs.re).abs() < 1e-12);
            assert!((lhs.im - rhs.im).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let mut rng = Rng::seeded(12);
        for _ in 0..50 {
            let a = random_batch(&mut rng, 4, 2);
            let b = random_batch(&mut rng, 7, 2);
            let c = random_batch(&mut rng, 5, 2);
            let omegas: Vec<Frequency> = (0..8)
                .map(|_| Frequency(gaussian_sample(&mut rng, vec![2], 0.0, 1.0).unwrap()))
                .collect();
            let dab = cf_discrepancy(&a, &b, &omegas).unwrap();
            let dac = cf_discrepancy(&a, &c, &omegas).unwrap();
            let dcb = cf_discrepancy(&c, &b, &omegas).unwrap();
            let dba = cf_discrepancy(&b, &a, &omegas).unwrap();
            assert!((dab - dba).abs() < 1e-15);
            assert!(dab <= dac + dcb + 1e-12);
        }
    }
}
