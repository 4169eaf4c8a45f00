//! Distribution-discrepancy condensation: learn a per-task bank of
//! discrepancy maps by min-max CF matching, then freeze the bank into an
//! append-only memory. Only the fake class is condensed; the memory never
//! stores raw samples.

use std::io::{Read, Write};

use crate::cf::{cf_discrepancy, Frequency};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mcr::{sample_alpha, ScheduleConfig};
use crate::numerics::{gaussian_sample, Rng, Tensor};
use crate::sampler::{sample_frequencies, sampler_grad_step, SamplerParams};

pub const MEMORY_MAGIC: &[u8; 4] = b"DDMB";
pub const MEMORY_VERSION: u32 = 1;

/// One discrepancy map, shaped like a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ddm {
    pub map: Tensor,
}

/// Per-task bank of K maps, frozen once appended to memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmBank {
    pub task_id: u32,
    pub maps: Vec<Ddm>,
}

impl DdmBank {
    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn map_shape(&self) -> &[usize] {
        self.maps[0].map.shape()
    }
}

/// Ordered, append-only list of frozen banks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Memory {
    banks: Vec<DdmBank>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    pub fn banks(&self) -> &[DdmBank] {
        &self.banks
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    /// Serialize: "DDMB", version u32 LE, bank count u32 LE; per bank task_id
    /// u32, K u32, map shape (rank u32 + dims u64), then K f64-LE payloads.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MEMORY_MAGIC)?;
        w.write_all(&MEMORY_VERSION.to_le_bytes())?;
        w.write_all(&(self.banks.len() as u32).to_le_bytes())?;
        for bank in &self.banks {
            w.write_all(&bank.task_id.to_le_bytes())?;
            w.write_all(&(bank.k() as u32).to_le_bytes())?;
            let shape = bank.map_shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for m in &bank.maps {
                for &v in m.map.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Memory> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Format(format!(
                "bad memory magic {magic:?}, expected {MEMORY_MAGIC:?}"
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != MEMORY_VERSION {
            return Err(Error::Format(format!(
                "unsupported memory version {version}"
            )));
        }
        r.read_exact(&mut b4)?;
        let n_banks = u32::from_le_bytes(b4);
        let mut memory = Memory::new();
        let mut b8 = [0u8; 8];
        for _ in 0..n_banks {
            r.read_exact(&mut b4)?;
            let task_id = u32::from_le_bytes(b4);
            r.read_exact(&mut b4)?;
            let k = u32::from_le_bytes(b4) as usize;
            r.read_exact(&mut b4)?;
            let rank = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut maps = Vec::with_capacity(k);
            for _ in 0..k {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    r.read_exact(&mut b8)?;
                    data.push(f64::from_le_bytes(b8));
                }
                maps.push(Ddm {
                    map: Tensor::new(shape.clone(), data)
                        .map_err(|e| Error::Format(format!("corrupt map payload: {e}")))?,
                });
            }
            if maps.is_empty() {
                return Err(Error::Format("bank with K = 0".into()));
            }
            memory = memory_append(memory, DdmBank { task_id, maps })?;
        }
        Ok(memory)
    }
}

/// Append a frozen bank; task ids must be strictly increasing.
pub fn memory_append(mut memory: Memory, bank: DdmBank) -> Result<Memory> {
    if bank.maps.is_empty() {
        return Err(Error::InvalidArgument("bank must hold at least one map".into()));
    }
    if let Some(last) = memory.banks.last() {
        if bank.task_id <= last.task_id {
            return Err(Error::InvalidArgument(format!(
                "task_id {} not greater than stored {}",
                bank.task_id, last.task_id
            )));
        }
    }
    memory.banks.push(bank);
    Ok(memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Entries ~ N(0, 0.01^2).
    GaussianSmall,
    /// Warm start: each map is (fake sample - real sample) at aligned random
    /// positions (one shared draw selects the position in both sets, so
    /// identical sets give zero maps).
    FakeMinusReal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaMode {
    /// Draw alpha per sample from the truncated cosine schedule, matching the
    /// replay-time composition law.
    VpSchedule(ScheduleConfig),
    /// Fixed coefficients (a, b) with a^2 + b^2 = 1.
    Fixed { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdcConfig {
    pub k: usize,
    pub iterations: usize,
    pub lr_ddm: f64,
    pub lr_sampler: f64,
    pub n_freq: usize,
    pub batch_size: usize,
    pub init_mode: InitMode,
    pub alpha_mode: AlphaMode,
}

impl Default for DdcConfig {
    fn default() -> DdcConfig {
        DdcConfig {
            k: 50,
            iterations: 3000,
            lr_ddm: 0.01,
            lr_sampler: 1e-3,
            n_freq: 64,
            batch_size: 128,
            init_mode: InitMode::GaussianSmall,
            alpha_mode: AlphaMode::VpSchedule(ScheduleConfig::default()),
        }
    }
}

impl DdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("ddc.k must be >= 1".into()));
        }
        if self.lr_ddm <= 0.0 || self.lr_sampler <= 0.0 {
            return Err(Error::InvalidArgument("ddc learning rates must be > 0".into()));
        }
        if self.n_freq < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "ddc.n_freq and ddc.batch_size must be >= 1".into(),
            ));
        }
        if let AlphaMode::Fixed { a, b } = self.alpha_mode {
            if (a * a + b * b - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "fixed alpha coefficients must satisfy a^2+b^2=1, got a={a}, b={b}"
                )));
            }
        }
        if let AlphaMode::VpSchedule(s) = &self.alpha_mode {
            s.validate()?;
        }
        Ok(())
    }
}

/// Initialize a bank of K maps.
pub fn init_ddm_bank(
    rng: &mut Rng,
    k: usize,
    shape: &[usize],
    init_mode: InitMode,
    reals: &[Tensor],
    fakes: &[Tensor],
) -> Result<DdmBank> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let mut maps = Vec::with_capacity(k);
    for _ in 0..k {
        let map = match init_mode {
            InitMode::GaussianSmall => gaussian_sample(rng, shape.to_vec(), 0.0, 0.01)?,
            InitMode::FakeMinusReal => {
                if reals.is_empty() || fakes.is_empty() {
                    return Err(Error::EmptyInput("fake_minus_real warm start data"));
                }
                let u = rng.next_u64();
                let fi = ((u as u128 * fakes.len() as u128) >> 64) as usize;
                let ri = ((u as u128 * reals.len() as u128) >> 64) as usize;
                fakes[fi].sub(&reals[ri])?
            }
        };
        maps.push(Ddm { map });
    }
    Ok(DdmBank { task_id: 0, maps })
}

/// A composed synthetic batch with the pairing that produced it.
#[derive(Debug, Clone)]
pub struct ComposedBatch {
    pub samples: Vec<Tensor>,
    pub map_indices: Vec<usize>,
}

/// sqrt(alpha_i) * x_i + sqrt(1 - alpha_i) * d_k(i), maps drawn uniformly
/// with replacement. Raw (unstandardized) maps: this is the condensation-time
/// composition.
pub fn compose_batch(
    reals: &[Tensor],
    bank: &DdmBank,
    alphas: &[f64],
    pairing: &mut Rng,
) -> Result<ComposedBatch> {
    if reals.is_empty() {
        return Err(Error::EmptyInput("compose_batch reals"));
    }
    if bank.maps.is_empty() {
        return Err(Error::EmptyInput("compose_batch bank"));
    }
    if alphas.len() != reals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} alphas for {} reals",
            alphas.len(),
            reals.len()
        )));
    }
    if alphas.iter().any(|&a| !(0.0..1.0).contains(&a) || a == 0.0) {
        return Err(Error::InvalidArgument("alphas must lie in (0, 1)".into()));
    }
    let mut samples = Vec::with_capacity(reals.len());
    let mut map_indices = Vec::with_capacity(reals.len());
    for (x, &alpha) in reals.iter().zip(alphas) {
        let ki = pairing.index(bank.maps.len());
        let d = &bank.maps[ki].map;
        samples.push(x.affine_combine(alpha.sqrt(), d, (1.0 - alpha).sqrt())?);
        map_indices.push(ki);
    }
    Ok(ComposedBatch {
        samples,
        map_indices,
    })
}

/// CF discrepancy between fake and synthetic batches in feature space.
pub fn ddc_loss(
    fake_batch: &[Tensor],
    syn_batch: &[Tensor],
    fmap: &FeatureMap,
    omegas: &[Frequency],
) -> Result<f64> {
    let fa = fmap.extract_batch(fake_batch)?;
    let fb = fmap.extract_batch(syn_batch)?;
    cf_discrepancy(&fa, &fb, omegas)
}

/// Analytic gradient of the Monte-Carlo CF discrepancy w.r.t. every map
/// entry, through the composition weight sqrt(1-alpha), the feature map, and
/// the empirical CF. Subgradient 0 at modulus-zero frequencies. Maps never
/// selected by the pairing get an exactly zero block.
pub fn ddc_loss_grad(
    fake_batch: &[Tensor],
    reals: &[Tensor],
    bank: &DdmBank,
    alphas: &[f64],
    map_indices: &[usize],
    fmap: &FeatureMap,
    omegas: &[Frequency],
) -> Result<Vec<Tensor>> {
    if fake_batch.is_empty() || reals.is_empty() {
        return Err(Error::EmptyInput("ddc_loss_grad batch"));
    }
    if omegas.is_empty() {
        return Err(Error::EmptyInput("ddc_loss_grad omegas"));
    }
    if map_indices.len() != reals.len() || alphas.len() != reals.len() {
        return Err(Error::InvalidArgument(
            "pairing/alphas must match the real batch".into(),
        ));
    }

    // Recompose with the given pairing.
    let syn: Vec<Tensor> = reals
        .iter()
        .zip(alphas)
        .zip(map_indices)
        .map(|((x, &a), &ki)| x.affine_combine(a.sqrt(), &bank.maps[ki].map, (1.0 - a).sqrt()))
        .collect::<Result<_>>()?;

    let feat_fake = fmap.extract_batch(fake_batch)?;
    let feat_syn = fmap.extract_batch(&syn)?;
    let m_syn = feat_syn.len() as f64;
    let nj = omegas.len() as f64;
    let out_dim = fmap.out_dim();

    // Accumulate dL/dv_i over all frequencies.
    let mut grad_feats = vec![Tensor::zeros(vec![out_dim]); feat_syn.len()];
    for omega in omegas {
        let mut re = 0.0;
        let mut im = 0.0;
        for v in &feat_fake {
            let theta = omega.0.dot(v)?;
            re += theta.cos() / feat_fake.len() as f64;
            im += theta.sin() / feat_fake.len() as f64;
        }
        let thetas: Vec<f64> = feat_syn
            .iter()
            .map(|v| omega.0.dot(v))
            .collect::<Result<_>>()?;
        for (&theta, _) in thetas.iter().zip(&feat_syn) {
            re -= theta.cos() / m_syn;
            im -= theta.sin() / m_syn;
        }
        let modulus = re.hypot(im);
        if modulus <= 1e-15 {
            continue;
        }
        for (i, &theta) in thetas.iter().enumerate() {
            let (s, c) = theta.sin_cos();
            let g_theta = (re * s - im * c) / (m_syn * modulus * nj);
            for (gv, w) in grad_feats[i].data_mut().iter_mut().zip(omega.0.data()) {
                *gv += g_theta * w;
            }
        }
    }

    // Chain through the feature map and the composition weights.
    let mut grads = vec![Tensor::zeros(bank.map_shape().to_vec()); bank.k()];
    for (i, gv) in grad_feats.iter().enumerate() {
        let gx = fmap.backprop_input(&feat_syn[i], gv)?;
        let w = (1.0 - alphas[i]).sqrt();
        let gm = grads[map_indices[i]].data_mut();
        for (g, x) in gm.iter_mut().zip(gx.data()) {
            *g += w * x;
        }
    }
    for g in &grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ddm gradient"));
        }
    }
    Ok(grads)
}

/// Output of one condensation run.
#[derive(Debug, Clone)]
pub struct CondenseOutput {
    pub bank: DdmBank,
    /// Per-iteration Monte-Carlo loss, evaluated at the frequencies used for
    /// the bank descent step.
    pub trace: Vec<f64>,
}

/// Adam state for the bank (beta1 0.9, beta2 0.999, eps 1e-8). Plain SGD at
/// lr 0.01 cannot move the maps far enough within the published 3000
/// iterations once the per-map gradient is diluted by the uniform pairing.
pub(crate) struct BankAdam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl BankAdam {
    pub(crate) fn new(k: usize, shape: &[usize]) -> BankAdam {
        BankAdam {
            m: vec![Tensor::zeros(shape.to_vec()); k],
            v: vec![Tensor::zeros(shape.to_vec()); k],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, bank: &mut DdmBank, grads: &[Tensor], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for ((ddm, g), (m, v)) in bank
            .maps
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &gv), (mv, vv)) in ddm
                .map
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = B1 * *mv + (1.0 - B1) * gv;
                *vv = B2 * *vv + (1.0 - B2) * gv * gv;
                *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
            }
        }
    }
}

fn draw_minibatch(data: &[Tensor], n: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..n).map(|_| data[rng.index(data.len())].clone()).collect()
}

fn draw_alphas(mode: &AlphaMode, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    match mode {
        AlphaMode::VpSchedule(schedule) => (0..n).map(|_| sample_alpha(schedule, rng)).collect(),
        AlphaMode::Fixed { a, .. } => Ok(vec![a * a; n]),
    }
}

/// Run the min-max condensation loop: per iteration, one sampler ascent step
/// on psi and one plain gradient descent step on the bank. Psi is freshly
/// initialized.
pub fn condense_task(
    real_data: &[Tensor],
    fake_data: &[Tensor],
    fmap: &FeatureMap,
    config: &DdcConfig,
    rng: &mut Rng,
) -> Result<CondenseOutput> {
    condense_task_with_sampler(real_data, fake_data, fmap, config, rng, None).map(|(o, _)| o)
}

/// Same loop, but optionally warm-started from a previous task's sampler
/// state; returns the final state so callers can carry it forward.
pub fn condense_task_with_sampler(
    real_data: &[Tensor],
    fake_data: &[Tensor],
    fmap: &FeatureMap,
    config: &DdcConfig,
    rng: &mut Rng,
    psi_init: Option<SamplerParams>,
) -> Result<(CondenseOutput, SamplerParams)> {
    if real_data.is_empty() || fake_data.is_empty() {
        return Err(Error::EmptyInput("condense_task datasets"));
    }
    config.validate()?;
    let shape = real_data[0].shape().to_vec();

    let mut init_rng = rng.derive("ddc-init");
    let mut loop_rng = rng.derive("ddc-loop");
    let mut bank = init_ddm_bank(
        &mut init_rng,
        config.k,
        &shape,
        config.init_mode,
        real_data,
        fake_data,
    )?;
    let mut psi = match psi_init {
        // the fresh draw happens either way so the bank init stream is
        // unaffected by the warm-start choice
        Some(prev) => {
            let _ = SamplerParams::init(&mut init_rng, fmap.out_dim())?;
            if prev.feature_dim != fmap.out_dim() {
                return Err(Error::ShapeMismatch {
                    expected: vec![fmap.out_dim()],
                    got: vec![prev.feature_dim],
                });
            }
            prev
        }
        None => SamplerParams::init(&mut init_rng, fmap.out_dim())?,
    };
    let mut adam = BankAdam::new(config.k, &shape);
    let mut trace = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let reals = draw_minibatch(real_data, config.batch_size, &mut loop_rng);
        let fakes = draw_minibatch(fake_data, config.batch_size, &mut loop_rng);
        let alphas = draw_alphas(&config.alpha_mode, reals.len(), &mut loop_rng)?;
        let composed = compose_batch(&reals, &bank, &alphas, &mut loop_rng)?;

        let feat_fake = fmap.extract_batch(&fakes)?;
        let feat_syn = fmap.extract_batch(&composed.samples)?;

        // max player
        psi = sampler_grad_step(
            &psi,
            &feat_fake,
            &feat_syn,
            &mut loop_rng,
            config.n_freq,
            config.lr_sampler,
        )?;

        // min player, at fresh frequencies from the updated sampler
        let omegas = sample_frequencies(&psi, &mut loop_rng, config.n_freq)?;
        let loss = cf_discrepancy(&feat_fake, &feat_syn, &omegas)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite DDC loss at iteration {iter}"
            )));
        }
        trace.push(loss);

        let grads = ddc_loss_grad(
            &fakes,
            &reals,
            &bank,
            &alphas,
            &composed.map_indices,
            fmap,
            &omegas,
        )?;
        adam.step(&mut bank, &grads, config.lr_ddm);
    }
    Ok((CondenseOutput { bank, trace }, psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_error, mean_var};
    use crate::sampler::uniform_frequencies;

    fn gaussian_batch(rng: &mut Rng, n: usize, dim: usize, mean: f64, std: f64) -> Vec<Tensor> {
        (0..n)
            .map(|_| gaussian_sample(rng, vec![dim], mean, std).unwrap())
            .collect()
    }

    #[test]
    fn gaussian_small_init_is_deterministic_and_small() {
        let b1 = init_ddm_bank(&mut Rng::seeded(0), 50, &[64], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        let b2 = init_ddm_bank(&mut Rng::seeded(0), 50, &[64], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        assert_eq!(b1, b2);
        let mut all = Vec::new();
        for m in &b1.maps {
            all.extend_from_slice(m.map.data());
        }
        let (_, var) = mean_var(&Tensor::vector(all).unwrap()).unwrap();
        assert!((var - 1e-4).abs() < 3e-5, "var {var}");
    }

    #[test]
    fn singleton_bank() {
        let b = init_ddm_bank(&mut Rng::seeded(1), 1, &[4], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        assert_eq!(b.k(), 1);
        assert!(init_ddm_bank(&mut Rng::seeded(1), 0, &[4], InitMode::GaussianSmall, &[], &[])
            .is_err());
    }

    #[test]
    fn fake_minus_real_on_identical_sets_is_zero() {
        let mut rng = Rng::seeded(2);
        let data = gaussian_batch(&mut rng, 10, 4, 0.0, 1.0);
        let b = init_ddm_bank(&mut Rng::seeded(3), 5, &[4], InitMode::FakeMinusReal, &data, &data)
            .unwrap();
        for m in &b.maps {
            assert!(m.map.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn compose_alpha_near_one_returns_reals() {
        let mut rng = Rng::seeded(4);
        let reals = gaussian_batch(&mut rng, 8, 4, 0.0, 1.0);
        let bank = init_ddm_bank(&mut rng.clone(), 3, &[4], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        let alphas = vec![1.0 - 1e-12; 8];
        let out = compose_batch(&reals, &bank, &alphas, &mut Rng::seeded(5)).unwrap();
        for (o, r) in out.samples.iter().zip(&reals) {
            for (a, b) in o.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn compose_hand_value() {
        let reals = vec![Tensor::vector(vec![2.0]).unwrap()];
        let bank = DdmBank {
            task_id: 0,
            maps: vec![Ddm {
                map: Tensor::vector(vec![1.0]).unwrap(),
            }],
        };
        let out = compose_batch(&reals, &bank, &[0.25], &mut Rng::seeded(0)).unwrap();
        assert!((out.samples[0].data()[0] - 1.86603).abs() < 1e-5);
    }

    #[test]
    fn compose_zero_maps_scales_reals() {
        let mut rng = Rng::seeded(6);
        let reals = gaussian_batch(&mut rng, 4, 3, 1.0, 0.5);
        let bank = DdmBank {
            task_id: 0,
            maps: vec![
                Ddm {
                    map: Tensor::zeros(vec![3]),
                };
                2
            ],
        };
        let out = compose_batch(&reals, &bank, &[0.5; 4], &mut Rng::seeded(7)).unwrap();
        for (o, r) in out.samples.iter().zip(&reals) {
            for (a, b) in o.data().iter().zip(r.data()) {
                assert!((a - 0.5f64.sqrt() * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddc_loss_trivial_cases() {
        let mut rng = Rng::seeded(8);
        let batch = gaussian_batch(&mut rng, 8, 2, 0.0, 1.0);
        let fmap = FeatureMap::identity(2);
        let omegas = uniform_frequencies(&mut rng, 4, 2, 1.0).unwrap();
        assert_eq!(ddc_loss(&batch, &batch, &fmap, &omegas).unwrap(), 0.0);
        let other = gaussian_batch(&mut rng, 8, 2, 3.0, 1.0);
        let zero = vec![Frequency(Tensor::zeros(vec![2]))];
        assert!(ddc_loss(&batch, &other, &fmap, &zero).unwrap() < 1e-15);
    }

    #[test]
    fn ddc_loss_singleton_closed_form_through_identity_map() {
        let v1 = Tensor::vector(vec![0.4, -0.9]).unwrap();
        let v2 = Tensor::vector(vec![1.2, 0.3]).unwrap();
        let om = Frequency(Tensor::vector(vec![0.7, -0.5]).unwrap());
        let fmap = FeatureMap::identity(2);
        let loss = ddc_loss(&[v1.clone()], &[v2.clone()], &fmap, &[om.clone()]).unwrap();
        let expected = 2.0 * (om.0.dot(&v1.sub(&v2).unwrap()).unwrap() / 2.0).sin().abs();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn grad_zero_when_batches_identical() {
        let mut rng = Rng::seeded(9);
        let reals = gaussian_batch(&mut rng, 6, 3, 0.0, 1.0);
        let bank = init_ddm_bank(&mut rng.clone(), 4, &[3], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        let alphas = vec![0.7; 6];
        let composed = compose_batch(&reals, &bank, &alphas, &mut Rng::seeded(10)).unwrap();
        let fmap = FeatureMap::identity(3);
        let omegas = uniform_frequencies(&mut rng, 8, 3, 1.0).unwrap();
        // fake batch equals the synthetic batch
        let grads = ddc_loss_grad(
            &composed.samples,
            &reals,
            &bank,
            &alphas,
            &composed.map_indices,
            &fmap,
            &omegas,
        )
        .unwrap();
        for g in grads {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unselected_map_gets_zero_gradient() {
        let mut rng = Rng::seeded(11);
        let reals = gaussian_batch(&mut rng, 3, 2, 0.0, 1.0);
        let fakes = gaussian_batch(&mut rng, 3, 2, 2.0, 1.0);
        let bank = init_ddm_bank(&mut rng.clone(), 5, &[2], InitMode::GaussianSmall, &[], &[])
            .unwrap();
        let alphas = vec![0.5; 3];
        let map_indices = vec![1, 1, 3];
        let fmap = FeatureMap::identity(2);
        let omegas = uniform_frequencies(&mut rng, 4, 2, 1.0).unwrap();
        let grads =
            ddc_loss_grad(&fakes, &reals, &bank, &alphas, &map_indices, &fmap, &omegas).unwrap();
        for (ki, g) in grads.iter().enumerate() {
            let selected = map_indices.contains(&ki);
            let zero = g.data().iter().all(|v| *v == 0.0);
            assert_eq!(!selected, zero, "map {ki}");
        }
    }

    #[test]
    fn ddm_gradient_matches_finite_differences() {
        for (seed, nl) in [(0u64, crate::features::Nonlinearity::Identity),
                           (1, crate::features::Nonlinearity::Tanh),
                           (2, crate::features::Nonlinearity::Identity),
                           (3, crate::features::Nonlinearity::Tanh),
                           (4, crate::features::Nonlinearity::Identity),
                           (5, crate::features::Nonlinearity::Tanh),
                           (6, crate::features::Nonlinearity::Identity),
                           (7, crate::features::Nonlinearity::Tanh),
                           (8, crate::features::Nonlinearity::Identity),
                           (9, crate::features::Nonlinearity::Tanh)] {
            let mut rng = Rng::seeded(200 + seed);
            let dim = 3;
            let fmap =
                crate::features::init_feature_map(&mut rng, dim, dim, nl).unwrap();
            let reals = gaussian_batch(&mut rng, 5, dim, 0.0, 1.0);
            let fakes = gaussian_batch(&mut rng, 4, dim, 1.0, 1.0);
            let bank = init_ddm_bank(&mut rng, 3, &[dim], InitMode::GaussianSmall, &[], &[])
                .unwrap();
            let alphas: Vec<f64> = (0..5).map(|_| rng.uniform_in(0.3, 0.9)).collect();
            let map_indices: Vec<usize> = (0..5).map(|_| rng.index(3)).collect();
            let omegas = uniform_frequencies(&mut rng, 6, dim, 1.0).unwrap();

            let grads = ddc_loss_grad(
                &fakes, &reals, &bank, &alphas, &map_indices, &fmap, &omegas,
            )
            .unwrap();
            let analytic = {
                let mut d = Vec::new();
                for g in &grads {
                    d.extend_from_slice(g.data());
                }
                Tensor::vector(d).unwrap()
            };

            // Flatten the bank, perturb, recompose, re-evaluate the loss.
            let flat0 = {
                let mut d = Vec::new();
                for m in &bank.maps {
                    d.extend_from_slice(m.map.data());
                }
                Tensor::vector(d).unwrap()
            };
            let fd = finite_diff_grad(
                |flat| {
                    let mut b = bank.clone();
                    for (ki, m) in b.maps.iter_mut().enumerate() {
                        let src = &flat.data()[ki * dim..(ki + 1) * dim];
                        m.map.data_mut().copy_from_slice(src);
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
                1e-5,
            )
            .unwrap();
            let err = grad_rel_error(&analytic, &fd);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn condense_zero_iterations_returns_init_bank() {
        let mut rng = Rng::seeded(13);
        let reals = gaussian_batch(&mut rng, 32, 4, 0.0, 0.1);
        let fakes = gaussian_batch(&mut rng, 32, 4, 2.0, 0.1);
        let fmap = FeatureMap::identity(4);
        let config = DdcConfig {
            iterations: 0,
            k: 3,
            ..DdcConfig::default()
        };
        let mut run_rng = Rng::seeded(14);
        let out = condense_task(&reals, &fakes, &fmap, &config, &mut run_rng).unwrap();
        let expected = init_ddm_bank(
            &mut Rng::seeded(14).derive("ddc-init"),
            3,
            &[4],
            InitMode::GaussianSmall,
            &reals,
            &fakes,
        )
        .unwrap();
        assert_eq!(out.bank.maps, expected.maps);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn condense_already_matched_fixture_stays_near_init() {
        // fake drawn from the same law as the initial synthetic batch:
        // maps ~ 0, so syn ~ sqrt(alpha) x. Use fixed alpha and fakes drawn
        // as sqrt(alpha) * fresh reals.
        let mut rng = Rng::seeded(15);
        let a: f64 = 0.75;
        let reals = gaussian_batch(&mut rng, 256, 4, 0.0, 1.0);
        let fakes: Vec<Tensor> = gaussian_batch(&mut rng, 256, 4, 0.0, 1.0)
            .into_iter()
            .map(|t| t.scale(a.sqrt()))
            .collect();
        let fmap = FeatureMap::identity(4);
        let config = DdcConfig {
            k: 8,
            iterations: 100,
            batch_size: 64,
            n_freq: 16,
            alpha_mode: AlphaMode::Fixed {
                a: a.sqrt(),
                b: (1.0 - a).sqrt(),
            },
            ..DdcConfig::default()
        };
        let out = condense_task(&reals, &fakes, &fmap, &config, &mut Rng::seeded(16)).unwrap();
        let first = out.trace[0];
        let last = *out.trace.last().unwrap();
        assert!(first < 0.35, "already-matched initial loss {first}");
        assert!(last < 0.35, "already-matched final loss {last}");
        // bank stays near init scale
        for m in &out.bank.maps {
            let (_, var) = mean_var(&m.map).unwrap();
            assert!(var < 0.05, "map drifted, var {var}");
        }
    }

    #[test]
    fn memory_append_contract() {
        let bank = |t| DdmBank {
            task_id: t,
            maps: vec![Ddm {
                map: Tensor::vector(vec![1.0, 2.0]).unwrap(),
            }],
        };
        let m = memory_append(Memory::new(), bank(0)).unwrap();
        assert_eq!(m.len(), 1);
        assert!(memory_append(m.clone(), bank(0)).is_err());
        let m2 = memory_append(m.clone(), bank(1)).unwrap();
        // append does not mutate existing bank bytes
        let mut before = Vec::new();
        m.write_to(&mut before).unwrap();
        let mut after_first_bank = Vec::new();
        Memory {
            banks: m2.banks()[..1].to_vec(),
        }
        .write_to(&mut after_first_bank)
        .unwrap();
        assert_eq!(before, after_first_bank);
    }

    #[test]
    fn memory_roundtrip_bit_exact() {
        let mut rng = Rng::seeded(17);
        let mut memory = Memory::new();
        for t in 0..2 {
            let bank = DdmBank {
                task_id: t,
                maps: (0..3)
                    .map(|_| Ddm {
                        map: gaussian_sample(&mut rng, vec![4], 0.0, 1.0).unwrap(),
                    })
                    .collect(),
            };
            memory = memory_append(memory, bank).unwrap();
        }
        let mut buf = Vec::new();
        memory.write_to(&mut buf).unwrap();
        let back = Memory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(memory, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn memory_bad_magic_and_truncation_rejected() {
        let mut buf = Vec::new();
        Memory::new().write_to(&mut buf).unwrap();
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            Memory::read_from(&mut corrupt.as_slice()),
            Err(Error::Format(_))
        ));
        // truncated payload
        let mut rng = Rng::seeded(18);
        let memory = memory_append(
            Memory::new(),
            DdmBank {
                task_id: 0,
                maps: vec![Ddm {
                    map: gaussian_sample(&mut rng, vec![8], 0.0, 1.0).unwrap(),
                }],
            },
        )
        .unwrap();
        let mut full = Vec::new();
        memory.write_to(&mut full).unwrap();
        full.truncate(full.len() - 4);
        assert!(Memory::read_from(&mut full.as_slice()).is_err());
    }
}
