//! Learnable frequency distribution: a two-layer tanh MLP mapping base noise
//! to frequencies, trained by gradient ascent on the CF discrepancy (the max
//! player of the min-max condensation loop).
//!
//! omega = w2 * tanh(w1 * z + b1) + b2,  z ~ N(0, I)
//!
//! The draw is reparameterized: given the noise, the sampler is a
//! deterministic map, so its gradient is exact and directly checkable against
//! finite differences.

use crate::cf::Frequency;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, Rng, Tensor};

/// MLP weights of the frequency sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    /// [hidden, noise_dim]
    pub w1: Tensor,
    /// [hidden]
    pub b1: Tensor,
    /// [feature_dim, hidden]
    pub w2: Tensor,
    /// [feature_dim]
    pub b2: Tensor,
    pub noise_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl SamplerParams {
    /// Default architecture: noise_dim = feature_dim, hidden = 2*feature_dim,
    /// weights i.i.d. normal scaled by 1/sqrt(fan_in), zero biases.
    pub fn init(rng: &mut Rng, feature_dim: usize) -> Result<SamplerParams> {
        let noise_dim = feature_dim;
        let hidden = 2 * feature_dim;
        Ok(SamplerParams {
            w1: gaussian_sample(rng, vec![hidden, noise_dim], 0.0, 1.0 / (noise_dim as f64).sqrt())?,
            b1: Tensor::zeros(vec![hidden]),
            w2: gaussian_sample(rng, vec![feature_dim, hidden], 0.0, 1.0 / (hidden as f64).sqrt())?,
            b2: Tensor::zeros(vec![feature_dim]),
            noise_dim,
            hidden,
            feature_dim,
        })
    }

    pub fn zeros(feature_dim: usize) -> SamplerParams {
        let noise_dim = feature_dim;
        let hidden = 2 * feature_dim;
        SamplerParams {
            w1: Tensor::zeros(vec![hidden, noise_dim]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![feature_dim, hidden]),
            b2: Tensor::zeros(vec![feature_dim]),
            noise_dim,
            hidden,
            feature_dim,
        }
    }

    /// Flatten all parameters into one vector (w1, b1, w2, b2 order). Used by
    /// the finite-difference gradient suite.
    pub fn to_flat(&self) -> Tensor {
        let mut data = Vec::new();
        data.extend_from_slice(self.w1.data());
        data.extend_from_slice(self.b1.data());
        data.extend_from_slice(self.w2.data());
        data.extend_from_slice(self.b2.data());
        Tensor::vector(data).expect("finite params")
    }

    pub fn from_flat(&self, flat: &Tensor) -> Result<SamplerParams> {
        let n1 = self.w1.len();
        let n2 = self.b1.len();
        let n3 = self.w2.len();
        let n4 = self.b2.len();
        if flat.len() != n1 + n2 + n3 + n4 {
            return Err(Error::ShapeMismatch {
                expected: vec![n1 + n2 + n3 + n4],
                got: vec![flat.len()],
            });
        }
        let d = flat.data();
        Ok(SamplerParams {
            w1: Tensor::new(self.w1.shape().to_vec(), d[..n1].to_vec())?,
            b1: Tensor::new(self.b1.shape().to_vec(), d[n1..n1 + n2].to_vec())?,
            w2: Tensor::new(self.w2.shape().to_vec(), d[n1 + n2..n1 + n2 + n3].to_vec())?,
            b2: Tensor::new(self.b2.shape().to_vec(), d[n1 + n2 + n3..].to_vec())?,
            noise_dim: self.noise_dim,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
        })
    }

    /// Forward the MLP for one noise vector.
    fn forward(&self, z: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut h = vec![0.0; self.hidden];
        for (hi, row) in h.iter_mut().zip(self.w1.data().chunks_exact(self.noise_dim)) {
            let mut acc = 0.0;
            for (w, zi) in row.iter().zip(z.data()) {
                acc += w * zi;
            }
            *hi = acc;
        }
        for (hi, b) in h.iter_mut().zip(self.b1.data()) {
            *hi = (*hi + b).tanh();
        }
        let mut omega = vec![0.0; self.feature_dim];
        for (oi, row) in omega.iter_mut().zip(self.w2.data().chunks_exact(self.hidden)) {
            let mut acc = 0.0;
            for (w, hi) in row.iter().zip(&h) {
                acc += w * hi;
            }
            *oi = acc;
        }
        for (oi, b) in omega.iter_mut().zip(self.b2.data()) {
            *oi += b;
        }
        (h, omega)
    }
}

/// Deterministic frequencies from explicit noise draws.
pub fn frequencies_from_noise(psi: &SamplerParams, noise: &[Tensor]) -> Vec<Frequency> {
    noise
        .iter()
        .map(|z| {
            let (_, omega) = psi.forward(z);
            Frequency(Tensor::vector(omega).expect("finite omega"))
        })
        .collect()
}

/// Draw n standard-normal noise vectors and map them through the sampler.
pub fn sample_frequencies(psi: &SamplerParams, rng: &mut Rng, n: usize) -> Result<Vec<Frequency>> {
    let noise = draw_noise(psi.noise_dim, rng, n)?;
    Ok(frequencies_from_noise(psi, &noise))
}

pub fn draw_noise(noise_dim: usize, rng: &mut Rng, n: usize) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    (0..n)
        .map(|_| gaussian_sample(rng, vec![noise_dim], 0.0, 1.0))
        .collect()
}

/// Non-adaptive baseline: i.i.d. normal frequencies with std = scale.
pub fn uniform_frequencies(
    rng: &mut Rng,
    n: usize,
    feature_dim: usize,
    scale: f64,
) -> Result<Vec<Frequency>> {
    if scale <= 0.0 {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    (0..n)
        .map(|_| Ok(Frequency(gaussian_sample(rng, vec![feature_dim], 0.0, scale)?)))
        .collect()
}

/// Gradients of the Monte-Carlo CF discrepancy w.r.t. the sampler weights.
#[derive(Debug, Clone)]
pub struct SamplerGrads {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Loss and analytic gradient of
///   L(psi) = (1/J) sum_j |Phi_a(omega_j) - Phi_b(omega_j)|
/// with omega_j = psi(z_j), w.r.t. every entry of psi. At modulus-zero points
/// the subgradient 0 is used.
pub fn sampler_loss_grad(
    psi: &SamplerParams,
    noise: &[Tensor],
    feat_a: &[Tensor],
    feat_b: &[Tensor],
) -> Result<(f64, SamplerGrads)> {
    if feat_a.is_empty() || feat_b.is_empty() {
        return Err(Error::EmptyInput("sampler_loss_grad batch"));
    }
    if noise.is_empty() {
        return Err(Error::EmptyInput("sampler_loss_grad noise"));
    }
    let dim = psi.feature_dim;
    let nj = noise.len() as f64;

    let mut loss = 0.0;
    let mut gw1 = Tensor::zeros(psi.w1.shape().to_vec());
    let mut gb1 = Tensor::zeros(psi.b1.shape().to_vec());
    let mut gw2 = Tensor::zeros(psi.w2.shape().to_vec());
    let mut gb2 = Tensor::zeros(psi.b2.shape().to_vec());

    for z in noise {
        let (h, omega_vec) = psi.forward(z);
        let omega = Tensor::vector(omega_vec).map_err(|_| Error::NonFinite("sampler omega"))?;

        // CF difference and its omega-gradient over both batches.
        let mut re = 0.0;
        let mut im = 0.0;
        let mut dre = vec![0.0; dim];
        let mut dim_g = vec![0.0; dim];
        for (batch, sign) in [(feat_a, 1.0), (feat_b, -1.0)] {
            let inv = sign / batch.len() as f64;
            for v in batch {
                let theta = omega.dot(v)?;
                let (s, c) = theta.sin_cos();
                re += inv * c;
                im += inv * s;
                for (k, vk) in v.data().iter().enumerate() {
                    dre[k] += inv * (-s) * vk;
                    dim_g[k] += inv * c * vk;
                }
            }
        }
        let modulus = re.hypot(im);
        loss += modulus / nj;
        if modulus <= 1e-15 {
            continue;
        }

        // d|D|/domega, scaled by the Monte-Carlo weight 1/J.
        let mut gomega = vec![0.0; dim];
        for k in 0..dim {
            gomega[k] = (re * dre[k] + im * dim_g[k]) / (modulus * nj);
        }

        // Backprop through omega = w2 h + b2, h = tanh(w1 z + b1).
        for (k, &go) in gomega.iter().enumerate() {
            gb2.data_mut()[k] += go;
            let row = &mut gw2.data_mut()[k * psi.hidden..(k + 1) * psi.hidden];
            for (g, hv) in row.iter_mut().zip(&h) {
                *g += go * hv;
            }
        }
        let mut gh = vec![0.0; psi.hidden];
        for (k, &go) in gomega.iter().enumerate() {
            let row = &psi.w2.data()[k * psi.hidden..(k + 1) * psi.hidden];
            for (ghi, w) in gh.iter_mut().zip(row) {
                *ghi += go * w;
            }
        }
        for (i, (&ghi, &hv)) in gh.iter().zip(&h).enumerate() {
            let gu = ghi * (1.0 - hv * hv);
            gb1.data_mut()[i] += gu;
            let row = &mut gw1.data_mut()[i * psi.noise_dim..(i + 1) * psi.noise_dim];
            for (g, zv) in row.iter_mut().zip(z.data()) {
                *g += gu * zv;
            }
        }
    }

    if !loss.is_finite() {
        return Err(Error::NonFinite("sampler loss"));
    }
    Ok((
        loss,
        SamplerGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    ))
}

/// One gradient ascent step on the CF discrepancy w.r.t. psi. Noise is drawn
/// from rng; the returned parameters are a fresh copy.
pub fn sampler_grad_step(
    psi: &SamplerParams,
    feat_fake: &[Tensor],
    feat_syn: &[Tensor],
    rng: &mut Rng,
    n: usize,
    lr: f64,
) -> Result<SamplerParams> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
    }
    let noise = draw_noise(psi.noise_dim, rng, n)?;
    let (_, g) = sampler_loss_grad(psi, &noise, feat_fake, feat_syn)?;
    if g.w1.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampler gradient"));
    }
    let mut out = psi.clone();
    for (p, gr) in [
        (&mut out.w1, &g.w1),
        (&mut out.b1, &g.b1),
        (&mut out.w2, &g.w2),
        (&mut out.b2, &g.b2),
    ] {
        for (pv, gv) in p.data_mut().iter_mut().zip(gr.data()) {
            *pv += lr * gv;
        }
    }
    Ok(out)
}
