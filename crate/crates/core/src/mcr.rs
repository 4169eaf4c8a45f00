//! Manifold-consistent replay: standardize stored discrepancy maps and
//! compose them with current real samples under the variance-preserving rule
//! x~ = sqrt(alpha) x + sqrt(1-alpha) d^, alpha drawn from a truncated cosine
//! schedule. All synthesized samples carry the fake label.

use crate::ddc::{Ddm, Memory};
use crate::error::{Error, Result};
use crate::numerics::{mean_var, Rng, Tensor};

/// Truncated cosine schedule for the mixing coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Cosine offset of the schedule.
    pub s_offset: f64,
    /// Number of discrete schedule positions.
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> ScheduleConfig {
        ScheduleConfig {
            alpha_lo: 0.45,
            alpha_hi: 0.95,
            s_offset: 0.008,
            steps: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha_lo && self.alpha_lo < self.alpha_hi && self.alpha_hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule requires 0 < alpha_lo < alpha_hi < 1, got alpha_lo={}, alpha_hi={}",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if self.s_offset <= 0.0 || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule s_offset must be > 0 and steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine schedule value: alpha_bar(u) = cos^2(((u + s) / (1 + s)) * pi/2).
pub fn alpha_bar(u: f64, s_offset: f64) -> f64 {
    let angle = ((u + s_offset) / (1.0 + s_offset)) * std::f64::consts::FRAC_PI_2;
    let c = angle.cos();
    c * c
}

/// Inverse of alpha_bar on [0, 1].
fn u_from_alpha(alpha: f64, s_offset: f64) -> f64 {
    let angle = alpha.sqrt().clamp(-1.0, 1.0).acos();
    (angle / std::f64::consts::FRAC_PI_2) * (1.0 + s_offset) - s_offset
}

/// Draw alpha from the schedule restricted to [alpha_lo, alpha_hi]. alpha_bar
/// is monotone decreasing in u, so the truncation is an interval in u.
pub fn sample_alpha(schedule: &ScheduleConfig, rng: &mut Rng) -> Result<f64> {
    schedule.validate()?;
    let u_lo = u_from_alpha(schedule.alpha_hi, schedule.s_offset).clamp(0.0, 1.0);
    let u_hi = u_from_alpha(schedule.alpha_lo, schedule.s_offset).clamp(0.0, 1.0);
    let frac = if schedule.steps == 1 {
        0.0
    } else {
        rng.index(schedule.steps) as f64 / (schedule.steps - 1) as f64
    };
    let u = u_lo + (u_hi - u_lo) * frac;
    Ok(alpha_bar(u, schedule.s_offset).clamp(schedule.alpha_lo, schedule.alpha_hi))
}

/// A standardized discrepancy map with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDdm {
    pub map: Tensor,
    /// (task_id, index within the bank)
    pub source: (u32, usize),
}

/// (d - mu) / (sigma + eps), population statistics over all entries.
pub fn standardize_ddm(d: &Ddm, eps: f64) -> Result<StandardizedDdm> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be > 0".into()));
    }
    let (mu, var) = mean_var(&d.map)?;
    let denom = var.sqrt() + eps;
    let data = d.map.data().iter().map(|v| (v - mu) / denom).collect();
    Ok(StandardizedDdm {
        map: Tensor::new(d.map.shape().to_vec(), data)?,
        source: (0, 0),
    })
}

/// Variance-preserving composition: sqrt(alpha) x + sqrt(1-alpha) d^.
pub fn compose_vp(x_real: &Tensor, d_std: &StandardizedDdm, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    x_real.affine_combine(alpha.sqrt(), &d_std.map, (1.0 - alpha).sqrt())
}

/// How replay samples are synthesized; the non-default variants are the
/// ablation paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayStyle {
    /// Standardize, then variance-preserving composition.
    VpStandardized,
    /// Skip standardization, keep the VP composition.
    VpRaw,
    /// Standardize, then naive direct addition x + d^.
    DirectAdd,
}

/// One synthesized replay sample. Label is always fake.
#[derive(Debug, Clone)]
pub struct ReplaySample {
    pub x: Tensor,
    pub label: u8,
    pub source_task: u32,
    pub map_index: usize,
    pub alpha: f64,
}

/// For each stored bank draw n_per_task (real, map, alpha) triples and
/// compose them; all outputs are labeled fake and tagged with their source
/// task.
pub fn build_replay_set(
    memory: &Memory,
    current_reals: &[Tensor],
    schedule: &ScheduleConfig,
    rng: &mut Rng,
    n_per_task: usize,
) -> Result<Vec<ReplaySample>> {
    build_replay_set_styled(
        memory,
        current_reals,
        schedule,
        rng,
        n_per_task,
        ReplayStyle::VpStandardized,
        1e-6,
    )
}

pub fn build_replay_set_styled(
    memory: &Memory,
    current_reals: &[Tensor],
    schedule: &ScheduleConfig,
    rng: &mut Rng,
    n_per_task: usize,
    style: ReplayStyle,
    eps: f64,
) -> Result<Vec<ReplaySample>> {
    if n_per_task < 1 {
        return Err(Error::InvalidArgument("n_per_task must be >= 1".into()));
    }
    if memory.is_empty() {
        return Ok(Vec::new());
    }
    if current_reals.is_empty() {
        return Err(Error::EmptyInput("build_replay_set current_reals"));
    }
    let mut out = Vec::with_capacity(memory.len() * n_per_task);
    for bank in memory.banks() {
        for _ in 0..n_per_task {
            let xi = rng.index(current_reals.len());
            let ki = rng.index(bank.k());
            let alpha = sample_alpha(schedule, rng)?;
            let d = &bank.maps[ki];
            let d_used = match style {
                ReplayStyle::VpStandardized | ReplayStyle::DirectAdd => {
                    let mut s = standardize_ddm(d, eps)?;
                    s.source = (bank.task_id, ki);
                    s
                }
                ReplayStyle::VpRaw => StandardizedDdm {
                    map: d.map.clone(),
                    source: (bank.task_id, ki),
                },
            };
            let x = match style {
                ReplayStyle::DirectAdd => current_reals[xi].add(&d_used.map)?,
                _ => compose_vp(&current_reals[xi], &d_used, alpha)?,
            };
            out.push(ReplaySample {
                x,
                label: 1,
                source_task: bank.task_id,
                map_index: ki,
                alpha,
            });
        }
    }
    Ok(out)
}
