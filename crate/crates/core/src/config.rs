//! Flat key=value experiment configuration and the file formats of a run:
//! memory snapshots, structured result documents, and CSV exports. Unknown
//! or duplicate keys are rejected, defaults are filled, and identical
//! configs always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cf::CfValue;
use crate::ddc::{AlphaMode, DdcConfig, InitMode, Memory};
use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::features::Nonlinearity;
use crate::harness::{AblationMode, ContinualConfig, FakeTransform, RunResult, TaskSpec};
use crate::mcr::{ReplaySample, ScheduleConfig};
use crate::numerics::Tensor;

/// Everything one experiment needs: task layout, algorithm hyperparameters,
/// seeds, and output location.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskSpec>,
    pub ddc: DdcConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub n_replay_per_task: usize,
    pub with_analysis: bool,
    pub sampler_reinit: bool,
    pub nonlinearity: Nonlinearity,
    pub feature_out_dim: usize,
}

impl ExperimentConfig {
    pub fn continual_config(&self) -> ContinualConfig {
        ContinualConfig {
            ddc: self.ddc.clone(),
            train: self.train.clone(),
            schedule: self.schedule.clone(),
            n_replay_per_task: self.n_replay_per_task,
            mode: self.mode,
            with_analysis: self.with_analysis,
            sampler_reinit: self.sampler_reinit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks.count must be >= 1".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        self.ddc.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must be nonempty".into()));
        }
        if self.n_replay_per_task == 0 {
            return Err(Error::Config("replay.n_per_task must be >= 1".into()));
        }
        if self.feature_out_dim == 0 {
            return Err(Error::Config("features.out_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical flat form with every default filled, echoed into results.
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let ins = |m: &mut BTreeMap<String, String>, k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        ins(&mut m, "tasks.count", self.tasks.len().to_string());
        let t0 = &self.tasks[0];
        ins(&mut m, "tasks.dim", t0.dim.to_string());
        ins(&mut m, "tasks.n_train_real", t0.n_train_real.to_string());
        ins(&mut m, "tasks.n_train_fake", t0.n_train_fake.to_string());
        ins(&mut m, "tasks.n_test_real", t0.n_test_real.to_string());
        ins(&mut m, "tasks.n_test_fake", t0.n_test_fake.to_string());
        ins(&mut m, "tasks.real_mean", fmt_f64(t0.real_mean));
        ins(&mut m, "tasks.real_std", fmt_f64(t0.real_std));
        for (i, t) in self.tasks.iter().enumerate() {
            ins(
                &mut m,
                &format!("task.{i}.transform"),
                fmt_transform(t.fake_transform),
            );
        }
        ins(&mut m, "ddc.k", self.ddc.k.to_string());
        ins(&mut m, "ddc.iterations", self.ddc.iterations.to_string());
        ins(&mut m, "ddc.lr_ddm", fmt_f64(self.ddc.lr_ddm));
        ins(&mut m, "ddc.lr_sampler", fmt_f64(self.ddc.lr_sampler));
        ins(&mut m, "ddc.n_freq", self.ddc.n_freq.to_string());
        ins(&mut m, "ddc.batch_size", self.ddc.batch_size.to_string());
        ins(
            &mut m,
            "ddc.init_mode",
            match self.ddc.init_mode {
                InitMode::GaussianSmall => "gaussian_small".into(),
                InitMode::FakeMinusReal => "fake_minus_real".into(),
            },
        );
        ins(
            &mut m,
            "ddc.alpha_mode",
            match &self.ddc.alpha_mode {
                AlphaMode::VpSchedule(_) => "vp_schedule".into(),
                AlphaMode::Fixed { a, b } => format!("fixed:{},{}", fmt_f64(*a), fmt_f64(*b)),
            },
        );
        ins(&mut m, "ddc.sampler_reinit", self.sampler_reinit.to_string());
        ins(&mut m, "train.lr", fmt_f64(self.train.lr));
        ins(&mut m, "train.epochs", self.train.epochs.to_string());
        ins(&mut m, "train.batch_size", self.train.batch_size.to_string());
        ins(&mut m, "train.lambda_rep", fmt_f64(self.train.lambda_rep));
        ins(&mut m, "schedule.alpha_lo", fmt_f64(self.schedule.alpha_lo));
        ins(&mut m, "schedule.alpha_hi", fmt_f64(self.schedule.alpha_hi));
        ins(&mut m, "schedule.s_offset", fmt_f64(self.schedule.s_offset));
        ins(&mut m, "schedule.steps", self.schedule.steps.to_string());
        ins(
            &mut m,
            "replay.n_per_task",
            self.n_replay_per_task.to_string(),
        );
        ins(&mut m, "run.mode", fmt_mode(self.mode).into());
        ins(
            &mut m,
            "run.seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        ins(
            &mut m,
            "run.output_dir",
            self.output_dir.display().to_string(),
        );
        ins(&mut m, "run.analysis", self.with_analysis.to_string());
        ins(
            &mut m,
            "features.nonlinearity",
            match self.nonlinearity {
                Nonlinearity::Identity => "identity".into(),
                Nonlinearity::Tanh => "tanh".into(),
            },
        );
        ins(
            &mut m,
            "features.out_dim",
            self.feature_out_dim.to_string(),
        );
        m
    }
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        parse_config_str("").expect("empty config is the default")
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip formatting keeps the echo stable
    format!("{v}")
}

fn fmt_transform(t: FakeTransform) -> String {
    match t {
        FakeTransform::Shift(d) => format!("shift:{}", fmt_f64(d)),
        FakeTransform::ShiftAxis { axis, delta } => {
            format!("shift_axis:{axis}:{}", fmt_f64(delta))
        }
        FakeTransform::Scale(s) => format!("scale:{}", fmt_f64(s)),
        FakeTransform::Rotate2d(a) => format!("rotate2d:{}", fmt_f64(a)),
        FakeTransform::Mix => "mix".into(),
    }
}

fn fmt_mode(m: AblationMode) -> &'static str {
    match m {
        AblationMode::Full => "full",
        AblationMode::NoDdc => "no_ddc",
        AblationMode::NoStd => "no_std",
        AblationMode::NoMcr => "no_mcr",
        AblationMode::NoReplay => "no_replay",
    }
}

struct KeyBag {
    entries: BTreeMap<String, String>,
}

impl KeyBag {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T, what: &str) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("key {key}: expected {what}, got {raw:?}"))
            }),
        }
    }
}

fn parse_bool(bag: &mut KeyBag, key: &str, default: bool) -> Result<bool> {
    match bag.take(key) {
        None => Ok(default),
        Some(raw) => match raw.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Config(format!(
                "key {key}: expected true or false, got {raw:?}"
            ))),
        },
    }
}

fn parse_transform(key: &str, raw: &str) -> Result<FakeTransform> {
    let bad = || {
        Error::Config(format!(
            "key {key}: expected shift:<f64>, shift_axis:<usize>:<f64>, scale:<f64>, \
             rotate2d:<f64> or mix, got {raw:?}"
        ))
    };
    if raw == "mix" {
        return Ok(FakeTransform::Mix);
    }
    if let Some(rest) = raw.strip_prefix("shift_axis:") {
        let (axis, delta) = rest.split_once(':').ok_or_else(bad)?;
        return Ok(FakeTransform::ShiftAxis {
            axis: axis.parse().map_err(|_| bad())?,
            delta: delta.parse().map_err(|_| bad())?,
        });
    }
    let (name, arg) = raw.split_once(':').ok_or_else(bad)?;
    let v: f64 = arg.parse().map_err(|_| bad())?;
    if !v.is_finite() {
        return Err(bad());
    }
    match name {
        "shift" => Ok(FakeTransform::Shift(v)),
        "scale" => Ok(FakeTransform::Scale(v)),
        "rotate2d" => Ok(FakeTransform::Rotate2d(v)),
        _ => Err(bad()),
    }
}

fn default_transform(i: usize) -> FakeTransform {
    // distinct per-dimension structure per stage so each task stays
    // separable but shifts the decision boundary
    const PI: f64 = std::f64::consts::PI;
    match i % 5 {
        0 => FakeTransform::Rotate2d(PI),
        1 => FakeTransform::Scale(3.0),
        2 => FakeTransform::Rotate2d(PI / 2.0),
        3 => FakeTransform::Mix,
        _ => FakeTransform::Shift(2.0),
    }
}

/// Parse the flat dotted key=value text form. Lines starting with '#' and
/// blank lines are skipped; every other line must be key=value. Unknown and
/// duplicate keys are errors.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        let k = k.trim().to_string();
        let v = v.trim().to_string();
        if entries.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("key {k}: duplicated")));
        }
    }
    let mut bag = KeyBag { entries };

    let count: usize = bag.parsed("tasks.count", 3, "a positive integer")?;
    if count == 0 {
        return Err(Error::Config("key tasks.count: must be >= 1".into()));
    }
    let dim: usize = bag.parsed("tasks.dim", 8, "an integer >= 2")?;
    let n_train_real: usize = bag.parsed("tasks.n_train_real", 256, "a positive integer")?;
    let n_train_fake: usize = bag.parsed("tasks.n_train_fake", 256, "a positive integer")?;
    let n_test_real: usize = bag.parsed("tasks.n_test_real", 128, "a positive integer")?;
    let n_test_fake: usize = bag.parsed("tasks.n_test_fake", 128, "a positive integer")?;
    let real_mean: f64 = bag.parsed("tasks.real_mean", 1.0, "a finite number")?;
    let real_std: f64 = bag.parsed("tasks.real_std", 0.5, "a finite number")?;
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let key = format!("task.{i}.transform");
        let transform = match bag.take(&key) {
            None => default_transform(i),
            Some(raw) => parse_transform(&key, &raw)?,
        };
        tasks.push(TaskSpec {
            task_id: i as u32,
            dim,
            n_train_real,
            n_train_fake,
            n_test_real,
            n_test_fake,
            real_mean,
            real_std,
            fake_transform: transform,
        });
    }

    let schedule = ScheduleConfig {
        alpha_lo: bag.parsed("schedule.alpha_lo", 0.45, "a number in (0, 1)")?,
        alpha_hi: bag.parsed("schedule.alpha_hi", 0.95, "a number in (0, 1)")?,
        s_offset: bag.parsed("schedule.s_offset", 0.008, "a positive number")?,
        steps: bag.parsed("schedule.steps", 1000, "a positive integer")?,
    };
    if schedule.alpha_lo >= schedule.alpha_hi {
        return Err(Error::Config(format!(
            "keys schedule.alpha_lo, schedule.alpha_hi: need alpha_lo < alpha_hi, got {} >= {}",
            schedule.alpha_lo, schedule.alpha_hi
        )));
    }

    let init_mode = match bag.take("ddc.init_mode").as_deref() {
        None | Some("gaussian_small") => InitMode::GaussianSmall,
        Some("fake_minus_real") => InitMode::FakeMinusReal,
        Some(other) => {
            return Err(Error::Config(format!(
                "key ddc.init_mode: expected gaussian_small or fake_minus_real, got {other:?}"
            )))
        }
    };
    let alpha_mode = match bag.take("ddc.alpha_mode") {
        None => AlphaMode::VpSchedule(schedule.clone()),
        Some(raw) if raw == "vp_schedule" => AlphaMode::VpSchedule(schedule.clone()),
        Some(raw) => match raw.strip_prefix("fixed:").and_then(|rest| {
            let (a, b) = rest.split_once(',')?;
            Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?))
        }) {
            Some((a, b)) => AlphaMode::Fixed { a, b },
            None => {
                return Err(Error::Config(format!(
                    "key ddc.alpha_mode: expected vp_schedule or fixed:<a>,<b>, got {raw:?}"
                )))
            }
        },
    };
    let ddc = DdcConfig {
        k: bag.parsed("ddc.k", 50, "a positive integer")?,
        iterations: bag.parsed("ddc.iterations", 3000, "a nonnegative integer")?,
        lr_ddm: bag.parsed("ddc.lr_ddm", 0.01, "a positive number")?,
        lr_sampler: bag.parsed("ddc.lr_sampler", 1e-3, "a positive number")?,
        n_freq: bag.parsed("ddc.n_freq", 64, "a positive integer")?,
        batch_size: bag.parsed("ddc.batch_size", 128, "a positive integer")?,
        init_mode,
        alpha_mode,
    };
    let sampler_reinit = parse_bool(&mut bag, "ddc.sampler_reinit", true)?;

    let train = TrainConfig {
        lr: bag.parsed("train.lr", 0.05, "a positive number")?,
        epochs: bag.parsed("train.epochs", 20, "a positive integer")?,
        batch_size: bag.parsed("train.batch_size", 64, "a positive integer")?,
        lambda_rep: bag.parsed("train.lambda_rep", 1.0, "a nonnegative number")?,
    };

    let mode = match bag.take("run.mode").as_deref() {
        None | Some("full") => AblationMode::Full,
        Some("no_ddc") => AblationMode::NoDdc,
        Some("no_std") => AblationMode::NoStd,
        Some("no_mcr") => AblationMode::NoMcr,
        Some("no_replay") => AblationMode::NoReplay,
        Some(other) => {
            return Err(Error::Config(format!(
                "key run.mode: expected full, no_ddc, no_std, no_mcr or no_replay, got {other:?}"
            )))
        }
    };
    let seeds: Vec<u64> = match bag.take("run.seeds") {
        None => vec![0],
        Some(raw) => raw
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "key run.seeds: expected comma-separated u64 list, got {raw:?}"
                    ))
                })
            })
            .collect::<Result<_>>()?,
    };
    let output_dir = PathBuf::from(bag.take("run.output_dir").unwrap_or_else(|| "results".into()));
    let with_analysis = parse_bool(&mut bag, "run.analysis", false)?;
    let n_replay_per_task: usize = bag.parsed("replay.n_per_task", 64, "a positive integer")?;

    let nonlinearity = match bag.take("features.nonlinearity").as_deref() {
        None | Some("identity") => Nonlinearity::Identity,
        Some("tanh") => Nonlinearity::Tanh,
        Some(other) => {
            return Err(Error::Config(format!(
                "key features.nonlinearity: expected identity or tanh, got {other:?}"
            )))
        }
    };
    let feature_out_dim: usize = bag.parsed("features.out_dim", dim, "a positive integer")?;

    if let Some(unknown) = bag.entries.keys().next() {
        return Err(Error::Config(format!("unknown key {unknown}")));
    }

    let config = ExperimentConfig {
        tasks,
        ddc,
        train,
        schedule,
        mode,
        seeds,
        output_dir,
        n_replay_per_task,
        with_analysis,
        sampler_reinit,
        nonlinearity,
        feature_out_dim,
    };
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn save_memory(memory: &Memory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    memory.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<Memory> {
    let mut r = BufReader::new(File::open(path)?);
    Memory::read_from(&mut r)
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    Tensor::read_from(&mut r)
}

/// Stack equally-shaped vectors into one rank-2 tensor [n, dim].
pub fn stack_batch(batch: &[Tensor]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("stack_batch"));
    }
    let dim = batch[0].len();
    let mut data = Vec::with_capacity(batch.len() * dim);
    for t in batch {
        if t.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: vec![dim],
                got: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![batch.len(), dim], data)
}

/// Split a rank-2 tensor [n, dim] back into row vectors.
pub fn unstack_batch(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![2],
            got: vec![t.shape().len()],
        });
    }
    let (n, dim) = (t.shape()[0], t.shape()[1]);
    (0..n)
        .map(|i| Tensor::new(vec![dim], t.data()[i * dim..(i + 1) * dim].to_vec()))
        .collect()
}

/// The structured result document of one seed: config echo plus metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ResultDocument {
    pub config: BTreeMap<String, String>,
    pub result: RunResult,
}

/// Byte-stable JSON (struct field order fixed, map keys sorted, trailing
/// newline). Timestamps never enter this file.
pub fn result_document_bytes(doc: &ResultDocument) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(doc)
        .map_err(|e| Error::Format(format!("result serialization: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_result_json(doc: &ResultDocument, path: &Path) -> Result<()> {
    std::fs::write(path, result_document_bytes(doc)?)?;
    Ok(())
}

/// Condensation loss traces, one row per (task, iteration).
pub fn write_trace_csv(traces: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "task,iteration,loss")?;
    for (t, trace) in traces.iter().enumerate() {
        for (i, loss) in trace.iter().enumerate() {
            writeln!(w, "{t},{i},{loss}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per stage x seen task, for spreadsheets.
pub fn write_flat_table(result: &RunResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "stage,task,acc,auc,aa,af")?;
    for (t, row) in result.acc_matrix.iter().enumerate() {
        for (s, acc) in row.iter().enumerate() {
            let af = result.af_history[t]
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{t},{s},{acc},{},{},{af}",
                result.auc_matrix[t][s], result.aa_history[t]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Paired CF evaluations: omega_id, re_a, im_a, re_b, im_b.
pub fn write_cf_trace_csv(trace: &[(usize, CfValue, CfValue)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "omega_id,re_a,im_a,re_b,im_b")?;
    for (id, a, b) in trace {
        writeln!(w, "{id},{},{},{},{}", a.re, a.im, b.re, b.im)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar manifest of a composed replay batch: provenance per row.
pub fn write_replay_manifest(samples: &[ReplaySample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "row,source_task,map_index,alpha,label")?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{}",
            s.source_task, s.map_index, s.alpha, s.label
        )?;
    }
    w.flush()?;
    Ok(())
}
