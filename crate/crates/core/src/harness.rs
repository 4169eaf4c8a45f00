//! Synthetic task sequences, the end-to-end continual loop
//! (train -> condense -> append -> replay), evaluation metrics, ablation
//! variants, and the feature-space analyses of replay quality.

use serde::{Deserialize, Serialize};

use crate::cf::{empirical_cf, CfValue, Frequency};
use crate::ddc::{
    compose_batch, condense_task_with_sampler, memory_append, CondenseOutput, DdcConfig, DdmBank,
    Memory,
};
use crate::sampler::SamplerParams;
use crate::detector::{predict, train_task, DetectorParams, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mcr::{build_replay_set_styled, sample_alpha, ReplayStyle, ScheduleConfig};
use crate::numerics::{gaussian_sample, Rng, Tensor};

// ---------------------------------------------------------------------------
// Task generation
// ---------------------------------------------------------------------------

/// How a task's fake distribution is produced from real-like draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeTransform {
    /// Add delta to every dimension.
    Shift(f64),
    /// Add delta to one dimension only.
    ShiftAxis { axis: usize, delta: f64 },
    /// Multiply every dimension by s.
    Scale(f64),
    /// Rotate dimensions (0, 1) by the angle.
    Rotate2d(f64),
    /// Scale by 1.5, then shift by 1.
    Mix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub dim: usize,
    pub n_train_real: usize,
    pub n_train_fake: usize,
    pub n_test_real: usize,
    pub n_test_fake: usize,
    pub real_mean: f64,
    pub real_std: f64,
    pub fake_transform: FakeTransform,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument("task dim must be >= 2".into()));
        }
        if self.n_train_real == 0
            || self.n_train_fake == 0
            || self.n_test_real == 0
            || self.n_test_fake == 0
        {
            return Err(Error::InvalidArgument("task sample counts must be positive".into()));
        }
        if self.real_std < 0.0 {
            return Err(Error::InvalidArgument("task real_std must be >= 0".into()));
        }
        if let FakeTransform::ShiftAxis { axis, .. } = self.fake_transform {
            if axis >= self.dim {
                return Err(Error::InvalidArgument(format!(
                    "shift_axis axis {axis} out of range for dim {}",
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Materialized labeled data for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train_real: Vec<Tensor>,
    pub train_fake: Vec<Tensor>,
    pub test: Vec<(Tensor, u8)>,
}

impl TaskData {
    /// Combined labeled training batch (reals 0, fakes 1).
    pub fn train_labeled(&self) -> Vec<(Tensor, u8)> {
        self.train_real
            .iter()
            .map(|x| (x.clone(), 0u8))
            .chain(self.train_fake.iter().map(|x| (x.clone(), 1u8)))
            .collect()
    }
}

fn apply_transform(x: &Tensor, transform: FakeTransform) -> Tensor {
    match transform {
        FakeTransform::Shift(delta) => {
            Tensor::vector(x.data().iter().map(|v| v + delta).collect()).expect("finite")
        }
        FakeTransform::ShiftAxis { axis, delta } => {
            let mut data = x.data().to_vec();
            data[axis] += delta;
            Tensor::vector(data).expect("finite")
        }
        FakeTransform::Scale(s) => x.scale(s),
        FakeTransform::Rotate2d(angle) => {
            let mut data = x.data().to_vec();
            let (s, c) = angle.sin_cos();
            let (a, b) = (data[0], data[1]);
            data[0] = c * a - s * b;
            data[1] = s * a + c * b;
            Tensor::vector(data).expect("finite")
        }
        FakeTransform::Mix => {
            Tensor::vector(x.data().iter().map(|v| 1.5 * v + 1.0).collect()).expect("finite")
        }
    }
}

/// Deterministic labeled train/test splits per task. Fakes are fresh
/// real-like draws pushed through the task's transform.
pub fn make_task_sequence(specs: &[TaskSpec], rng: &Rng) -> Result<Vec<TaskData>> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("make_task_sequence specs"));
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut task_rng = rng.derive(&format!("task-data-{}", spec.task_id));
        let mut draw = |n: usize| -> Result<Vec<Tensor>> {
            (0..n)
                .map(|_| gaussian_sample(&mut task_rng, vec![spec.dim], spec.real_mean, spec.real_std))
                .collect()
        };
        let train_real = draw(spec.n_train_real)?;
        let train_fake: Vec<Tensor> = draw(spec.n_train_fake)?
            .iter()
            .map(|x| apply_transform(x, spec.fake_transform))
            .collect();
        let test_real = draw(spec.n_test_real)?;
        let test_fake: Vec<Tensor> = draw(spec.n_test_fake)?
            .iter()
            .map(|x| apply_transform(x, spec.fake_transform))
            .collect();
        let test = test_real
            .into_iter()
            .map(|x| (x, 0u8))
            .chain(test_fake.into_iter().map(|x| (x, 1u8)))
            .collect();
        out.push(TaskData {
            spec: spec.clone(),
            train_real,
            train_fake,
            test,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// AA_t = mean accuracy over tasks seen at stage t.
/// AF_t = mean over strictly previous tasks of (learned-time acc - stage-t
/// acc); undefined at the first stage.
pub fn metric_aa_af(
    acc_matrix: &[Vec<f64>],
    learned_time_acc: &[f64],
) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    if acc_matrix.len() != learned_time_acc.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![acc_matrix.len()],
            got: vec![learned_time_acc.len()],
        });
    }
    let mut aa = Vec::with_capacity(acc_matrix.len());
    let mut af = Vec::with_capacity(acc_matrix.len());
    for (t, row) in acc_matrix.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![t + 1],
                got: vec![row.len()],
            });
        }
        aa.push(row.iter().sum::<f64>() / row.len() as f64);
        if t == 0 {
            af.push(None);
        } else {
            let drop_sum: f64 = (0..t).map(|s| learned_time_acc[s] - row[s]).sum();
            af.push(Some(drop_sum / t as f64));
        }
    }
    Ok((aa, af))
}

/// Rank-based AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("auc requires both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    Ok((rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Step-interpolated average precision over descending score thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::InvalidArgument("average_precision requires both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                tp += 1;
            }
            seen += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(ap)
}

fn centroid(feats: &[Tensor]) -> Result<Tensor> {
    if feats.is_empty() {
        return Err(Error::EmptyInput("centroid"));
    }
    let mut c = Tensor::zeros(feats[0].shape().to_vec());
    for f in feats {
        c = c.add(f)?;
    }
    Ok(c.scale(1.0 / feats.len() as f64))
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let na = a.dot(a)?.sqrt();
    let nb = b.dot(b)?.sqrt();
    if nb == 0.0 {
        return Err(Error::InvalidArgument("zero-norm centroid".into()));
    }
    if na == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Mean cosine similarity of replay features to the fake-feature centroid.
pub fn cosine_to_fake_centroid(replay_feats: &[Tensor], fake_feats: &[Tensor]) -> Result<f64> {
    if replay_feats.is_empty() {
        return Err(Error::EmptyInput("cosine_to_fake_centroid replay"));
    }
    let c = centroid(fake_feats)?;
    let mut acc = 0.0;
    for f in replay_feats {
        acc += cosine(f, &c)?;
    }
    Ok(acc / replay_feats.len() as f64)
}

/// Mean cosine to the fake centroid minus mean cosine to the real centroid.
/// Positive means the replay sits closer to the fakes.
pub fn fake_real_margin(
    replay_feats: &[Tensor],
    fake_feats: &[Tensor],
    real_feats: &[Tensor],
) -> Result<f64> {
    Ok(cosine_to_fake_centroid(replay_feats, fake_feats)?
        - cosine_to_fake_centroid(replay_feats, real_feats)?)
}

/// Train a fresh linear head on (old reals -> 0, replay fakes -> 1) and
/// evaluate AUC and average precision on the old-task test set.
pub fn linear_probe(
    old_reals: &[Tensor],
    replay_fakes: &[Tensor],
    test_set: &[(Tensor, u8)],
    fmap: &FeatureMap,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if old_reals.is_empty() || replay_fakes.is_empty() {
        return Err(Error::EmptyInput("linear_probe training data"));
    }
    let data: Vec<(Tensor, u8)> = old_reals
        .iter()
        .map(|x| (x.clone(), 0u8))
        .chain(replay_fakes.iter().map(|x| (x.clone(), 1u8)))
        .collect();
    let config = TrainConfig {
        lambda_rep: 0.0,
        ..TrainConfig::default()
    };
    let theta = train_task(
        &DetectorParams::zeros(fmap.out_dim()),
        &data,
        &[],
        fmap,
        &config,
        rng,
    )?;
    let scores: Vec<f64> = test_set
        .iter()
        .map(|(x, _)| predict(&theta, fmap, x))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = test_set.iter().map(|(_, y)| *y).collect();
    Ok((auc(&scores, &labels)?, average_precision(&scores, &labels)?))
}

/// Paired CF evaluations over a fixed frequency grid, for external plotting.
pub fn cf_trace(
    batch_a: &[Tensor],
    batch_b: &[Tensor],
    fmap: &FeatureMap,
    omega_grid: &[Frequency],
) -> Result<Vec<(usize, CfValue, CfValue)>> {
    let fa = fmap.extract_batch(batch_a)?;
    let fb = fmap.extract_batch(batch_b)?;
    omega_grid
        .iter()
        .enumerate()
        .map(|(i, om)| Ok((i, empirical_cf(&fa, om)?, empirical_cf(&fb, om)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Continual loop
// ---------------------------------------------------------------------------

/// Which pipeline variant a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    /// Maps trained by detector BCE on the fake label instead of CF matching.
    NoDdc,
    /// Replay skips map standardization.
    NoStd,
    /// Replay uses naive direct addition instead of the VP composition.
    NoMcr,
    /// No replay and no condensation; lambda_rep forced to zero.
    NoReplay,
}

impl AblationMode {
    pub fn replay_style(self) -> ReplayStyle {
        match self {
            AblationMode::NoStd => ReplayStyle::VpRaw,
            AblationMode::NoMcr => ReplayStyle::DirectAdd,
            _ => ReplayStyle::VpStandardized,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContinualConfig {
    pub ddc: DdcConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub n_replay_per_task: usize,
    pub mode: AblationMode,
    pub with_analysis: bool,
    /// Reinitialize the frequency sampler at every task's condensation
    /// (default); false carries the sampler state across tasks.
    pub sampler_reinit: bool,
}

/// Per-previous-task replay quality scores at the final stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisScores {
    pub task_id: u32,
    pub cosine_to_fake: f64,
    pub fake_real_margin: f64,
    pub probe_auc: f64,
    pub probe_ap: f64,
}

/// Matrices and metric histories of one continual run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub mode: AblationMode,
    pub acc_matrix: Vec<Vec<f64>>,
    pub auc_matrix: Vec<Vec<f64>>,
    pub aa_history: Vec<f64>,
    pub af_history: Vec<Option<f64>>,
    pub analysis: Option<Vec<AnalysisScores>>,
}

/// Everything a run produces beyond the serializable result.
#[derive(Debug, Clone)]
pub struct ContinualOutput {
    pub result: RunResult,
    pub memory: Memory,
    pub detector: DetectorParams,
    /// One condensation loss trace per condensed task.
    pub traces: Vec<Vec<f64>>,
}

fn evaluate(
    theta: &DetectorParams,
    fmap: &FeatureMap,
    test: &[(Tensor, u8)],
) -> Result<(f64, f64)> {
    let scores: Vec<f64> = test
        .iter()
        .map(|(x, _)| predict(theta, fmap, x))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = test.iter().map(|(_, y)| *y).collect();
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(s, y)| (**s >= 0.5) == (**y == 1))
        .count();
    Ok((correct as f64 / test.len() as f64, auc(&scores, &labels)?))
}

/// Ablation path: optimize the bank by descending detector BCE on the fake
/// label of the composed samples (no distribution matching).
fn condense_task_bce(
    real_data: &[Tensor],
    theta: &DetectorParams,
    fmap: &FeatureMap,
    config: &DdcConfig,
    rng: &mut Rng,
) -> Result<CondenseOutput> {
    if real_data.is_empty() {
        return Err(Error::EmptyInput("condense_task_bce real_data"));
    }
    config.validate()?;
    let shape = real_data[0].shape().to_vec();
    let mut init_rng = rng.derive("ddc-init");
    let mut loop_rng = rng.derive("ddc-loop");
    let mut bank = crate::ddc::init_ddm_bank(
        &mut init_rng,
        config.k,
        &shape,
        config.init_mode,
        real_data,
        real_data,
    )?;
    let mut trace = Vec::with_capacity(config.iterations);
    let mut adam = crate::ddc::BankAdam::new(config.k, &shape);
    for iter in 0..config.iterations {
        let reals: Vec<Tensor> = (0..config.batch_size)
            .map(|_| real_data[loop_rng.index(real_data.len())].clone())
            .collect();
        let alphas: Vec<f64> = match &config.alpha_mode {
            crate::ddc::AlphaMode::VpSchedule(s) => (0..reals.len())
                .map(|_| sample_alpha(s, &mut loop_rng))
                .collect::<Result<_>>()?,
            crate::ddc::AlphaMode::Fixed { a, .. } => vec![a * a; reals.len()],
        };
        let composed = compose_batch(&reals, &bank, &alphas, &mut loop_rng)?;
        let m = composed.samples.len() as f64;
        let mut grads = vec![Tensor::zeros(shape.clone()); bank.k()];
        let mut loss = 0.0;
        for (i, x) in composed.samples.iter().enumerate() {
            let v = fmap.extract(x)?;
            let z = theta.weights.dot(&v)? + theta.bias;
            let p = 1.0 / (1.0 + (-z).exp());
            loss += crate::detector::bce_loss(p, 1) / m;
            let dz = (p - 1.0) / m;
            let gv = theta.weights.scale(dz);
            let gx = fmap.backprop_input(&v, &gv)?;
            let w = (1.0 - alphas[i]).sqrt();
            for (g, xv) in grads[composed.map_indices[i]]
                .data_mut()
                .iter_mut()
                .zip(gx.data())
            {
                *g += w * xv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite BCE condensation loss at iteration {iter}"
            )));
        }
        trace.push(loss);
        adam.step(&mut bank, &grads, config.lr_ddm);
    }
    Ok(CondenseOutput { bank, trace })
}

/// The continual pipeline: for each task, train the detector (with replay
/// from memory when the mode allows), evaluate on all seen test sets,
/// condense the task, and append the frozen bank.
pub fn run_continual(
    sequence: &[TaskData],
    fmap: &FeatureMap,
    cfg: &ContinualConfig,
    seed: u64,
    rng: &Rng,
) -> Result<ContinualOutput> {
    if sequence.is_empty() {
        return Err(Error::EmptyInput("run_continual sequence"));
    }
    let mut memory = Memory::new();
    let mut theta = DetectorParams::zeros(fmap.out_dim());
    let mut psi_carry: Option<SamplerParams> = None;
    let mut acc_matrix = Vec::new();
    let mut auc_matrix = Vec::new();
    let mut traces = Vec::new();

    for (t, task) in sequence.iter().enumerate() {
        // replay from strictly previous tasks
        let replay: Vec<(Tensor, u8)> = if cfg.mode == AblationMode::NoReplay || memory.is_empty()
        {
            Vec::new()
        } else {
            build_replay_set_styled(
                &memory,
                &task.train_real,
                &cfg.schedule,
                &mut rng.derive(&format!("replay-{t}")),
                cfg.n_replay_per_task,
                cfg.mode.replay_style(),
                1e-6,
            )?
            .into_iter()
            .map(|s| (s.x, s.label))
            .collect()
        };

        let mut train_cfg = cfg.train.clone();
        if cfg.mode == AblationMode::NoReplay {
            train_cfg.lambda_rep = 0.0;
        }
        theta = train_task(
            &theta,
            &task.train_labeled(),
            &replay,
            fmap,
            &train_cfg,
            &mut rng.derive(&format!("train-task-{t}")),
        )?;

        let mut acc_row = Vec::with_capacity(t + 1);
        let mut auc_row = Vec::with_capacity(t + 1);
        for seen in &sequence[..=t] {
            let (acc, auc_v) = evaluate(&theta, fmap, &seen.test)?;
            acc_row.push(acc);
            auc_row.push(auc_v);
        }
        acc_matrix.push(acc_row);
        auc_matrix.push(auc_row);

        if cfg.mode != AblationMode::NoReplay {
            let mut cond_rng = rng.derive(&format!("condense-{t}"));
            let mut out = match cfg.mode {
                AblationMode::NoDdc => {
                    condense_task_bce(&task.train_real, &theta, fmap, &cfg.ddc, &mut cond_rng)?
                }
                _ => {
                    let warm = if cfg.sampler_reinit {
                        None
                    } else {
                        psi_carry.take()
                    };
                    let (out, psi) = condense_task_with_sampler(
                        &task.train_real,
                        &task.train_fake,
                        fmap,
                        &cfg.ddc,
                        &mut cond_rng,
                        warm,
                    )?;
                    psi_carry = Some(psi);
                    out
                }
            };
            out.bank.task_id = t as u32;
            traces.push(out.trace);
            memory = memory_append(memory, out.bank)?;
        }
    }

    let learned_time: Vec<f64> = (0..sequence.len()).map(|t| acc_matrix[t][t]).collect();
    let (aa_history, af_history) = metric_aa_af(&acc_matrix, &learned_time)?;

    let analysis = if cfg.with_analysis && !memory.is_empty() && sequence.len() > 1 {
        let t_last = sequence.len() - 1;
        let carriers = &sequence[t_last].train_real;
        let mut scores = Vec::new();
        for bank in memory.banks()[..memory.len().min(t_last)].iter() {
            let s = bank.task_id as usize;
            let single = single_bank_memory(bank.clone())?;
            let replay = build_replay_set_styled(
                &single,
                carriers,
                &cfg.schedule,
                &mut rng.derive(&format!("analysis-replay-{s}")),
                cfg.n_replay_per_task,
                cfg.mode.replay_style(),
                1e-6,
            )?;
            let replay_x: Vec<Tensor> = replay.into_iter().map(|r| r.x).collect();
            let replay_feats = fmap.extract_batch(&replay_x)?;
            let fake_feats = fmap.extract_batch(&sequence[s].train_fake)?;
            let real_feats = fmap.extract_batch(&sequence[s].train_real)?;
            let cos = cosine_to_fake_centroid(&replay_feats, &fake_feats)?;
            let margin = fake_real_margin(&replay_feats, &fake_feats, &real_feats)?;
            let old_test_reals: Vec<Tensor> = sequence[s]
                .test
                .iter()
                .filter(|(_, y)| *y == 0)
                .map(|(x, _)| x.clone())
                .collect();
            let (probe_auc, probe_ap) = linear_probe(
                &old_test_reals,
                &replay_x,
                &sequence[s].test,
                fmap,
                &mut rng.derive(&format!("analysis-probe-{s}")),
            )?;
            scores.push(AnalysisScores {
                task_id: bank.task_id,
                cosine_to_fake: cos,
                fake_real_margin: margin,
                probe_auc,
                probe_ap,
            });
        }
        Some(scores)
    } else {
        None
    };

    Ok(ContinualOutput {
        result: RunResult {
            seed,
            mode: cfg.mode,
            acc_matrix,
            auc_matrix,
            aa_history,
            af_history,
            analysis,
        },
        memory,
        detector: theta,
        traces,
    })
}

fn single_bank_memory(bank: DdmBank) -> Result<Memory> {
    memory_append(Memory::new(), bank)
}
