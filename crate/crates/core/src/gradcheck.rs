//! Central-difference verification of every hand-derived gradient, packaged
//! so the CLI and the integration suite share one report.

use crate::cf::cf_discrepancy;
use crate::ddc::{ddc_loss, ddc_loss_grad, init_ddm_bank, InitMode};
use crate::detector::{detector_loss_grad, DetectorParams};
use crate::error::Result;
use crate::features::{init_feature_map, Nonlinearity};
use crate::numerics::{finite_diff_grad, gaussian_sample, grad_rel_error, Rng, Tensor};
use crate::sampler::{draw_noise, frequencies_from_noise, sampler_loss_grad, uniform_frequencies, SamplerParams};

pub const FD_STEP: f64 = 1e-5;
pub const FIXTURES_PER_SUITE: usize = 10;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn batch(rng: &mut Rng, n: usize, dim: usize, mean: f64) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|_| gaussian_sample(rng, vec![dim], mean, 1.0))
        .collect()
}

fn nl_for(i: usize) -> Nonlinearity {
    if i % 2 == 0 {
        Nonlinearity::Identity
    } else {
        Nonlinearity::Tanh
    }
}

/// CF-discrepancy gradient w.r.t. every map entry.
pub fn ddm_suite(seed: u64) -> Result<SuiteReport> {
    let dim = 3;
    let mut worst: f64 = 0.0;
    for i in 0..FIXTURES_PER_SUITE {
        let mut rng = Rng::seeded(seed.wrapping_add(i as u64));
        let fmap = init_feature_map(&mut rng, dim, dim, nl_for(i))?;
        let reals = batch(&mut rng, 5, dim, 0.0)?;
        let fakes = batch(&mut rng, 4, dim, 1.0)?;
        let bank = init_ddm_bank(&mut rng, 3, &[dim], InitMode::GaussianSmall, &[], &[])?;
        let alphas: Vec<f64> = (0..5).map(|_| rng.uniform_in(0.3, 0.9)).collect();
        let map_indices: Vec<usize> = (0..5).map(|_| rng.index(3)).collect();
        let omegas = uniform_frequencies(&mut rng, 6, dim, 1.0)?;

        let grads = ddc_loss_grad(&fakes, &reals, &bank, &alphas, &map_indices, &fmap, &omegas)?;
        let analytic = Tensor::vector(grads.iter().flat_map(|g| g.data().to_vec()).collect())?;
        let flat0 = Tensor::vector(
            bank.maps
                .iter()
                .flat_map(|m| m.map.data().to_vec())
                .collect(),
        )?;
        let fd = finite_diff_grad(
            |flat| {
                let mut b = bank.clone();
                for (ki, m) in b.maps.iter_mut().enumerate() {
                    m.map
                        .data_mut()
                        .copy_from_slice(&flat.data()[ki * dim..(ki + 1) * dim]);
                }
                let syn: Vec<Tensor> = reals
                    .iter()
                    .zip(&alphas)
                    .zip(&map_indices)
                    .map(|((x, &a), &ki)| {
                        x.affine_combine(a.sqrt(), &b.maps[ki].map, (1.0 - a).sqrt())
                            .unwrap()
                    })
                    .collect();
                ddc_loss(&fakes, &syn, &fmap, &omegas).unwrap()
            },
            &flat0,
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&analytic, &fd));
    }
    Ok(SuiteReport {
        name: "ddm",
        max_rel_error: worst,
        threshold: 1e-4,
    })
}

/// Pathwise gradient through the frequency sampler MLP.
pub fn sampler_suite(seed: u64) -> Result<SuiteReport> {
    let dim = 3;
    let mut worst: f64 = 0.0;
    for i in 0..FIXTURES_PER_SUITE {
        let mut rng = Rng::seeded(seed.wrapping_add(1000 + i as u64));
        let psi = SamplerParams::init(&mut rng, dim)?;
        let noise = draw_noise(psi.noise_dim, &mut rng, 4)?;
        let feat_a = batch(&mut rng, 5, dim, 0.0)?;
        let feat_b = batch(&mut rng, 4, dim, 1.5)?;

        let (_, grads) = sampler_loss_grad(&psi, &noise, &feat_a, &feat_b)?;
        let analytic = Tensor::vector(
            grads
                .w1
                .data()
                .iter()
                .chain(grads.b1.data())
                .chain(grads.w2.data())
                .chain(grads.b2.data())
                .copied()
                .collect(),
        )?;
        let fd = finite_diff_grad(
            |flat| {
                let p = psi.from_flat(flat).unwrap();
                let freqs = frequencies_from_noise(&p, &noise);
                cf_discrepancy(&feat_a, &feat_b, &freqs).unwrap()
            },
            &psi.to_flat(),
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&analytic, &fd));
    }
    Ok(SuiteReport {
        name: "sampler",
        max_rel_error: worst,
        threshold: 1e-4,
    })
}

/// Sigmoid-BCE gradient of the joint current + replay objective.
pub fn detector_suite(seed: u64) -> Result<SuiteReport> {
    let dim = 4;
    let mut worst: f64 = 0.0;
    for i in 0..FIXTURES_PER_SUITE {
        let mut rng = Rng::seeded(seed.wrapping_add(2000 + i as u64));
        let fmap = init_feature_map(&mut rng, dim, dim, nl_for(i))?;
        let current: Vec<(Tensor, u8)> = batch(&mut rng, 6, dim, 0.0)?
            .into_iter()
            .enumerate()
            .map(|(j, x)| (x, (j % 2) as u8))
            .collect();
        let replay = batch(&mut rng, 3, dim, 0.5)?;
        let theta = DetectorParams {
            weights: gaussian_sample(&mut rng, vec![dim], 0.0, 0.5)?,
            bias: rng.uniform_in(-0.5, 0.5),
        };
        let lambda = rng.uniform_in(0.0, 2.0);

        let (_, gw, gb) = detector_loss_grad(&theta, &fmap, &current, &replay, lambda)?;
        let analytic =
            Tensor::vector(gw.data().iter().copied().chain([gb]).collect())?;
        let flat0 =
            Tensor::vector(theta.weights.data().iter().copied().chain([theta.bias]).collect())?;
        let fd = finite_diff_grad(
            |flat| {
                let t = DetectorParams {
                    weights: Tensor::vector(flat.data()[..dim].to_vec()).unwrap(),
                    bias: flat.data()[dim],
                };
                detector_loss_grad(&t, &fmap, &current, &replay, lambda)
                    .unwrap()
                    .0
            },
            &flat0,
            FD_STEP,
        )?;
        worst = worst.max(grad_rel_error(&analytic, &fd));
    }
    Ok(SuiteReport {
        name: "detector",
        max_rel_error: worst,
        threshold: 1e-6,
    })
}

/// All suites, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![ddm_suite(seed)?, sampler_suite(seed)?, detector_suite(seed)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_fixed_seed() {
        for report in run_all(42).unwrap() {
            assert!(
                report.pass(),
                "{}: {} >= {}",
                report.name,
                report.max_rel_error,
                report.threshold
            );
        }
    }
}
