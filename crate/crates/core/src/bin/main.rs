//! Command-line entry points: condense one task into a memory file, compose
//! a replay batch, run the full continual pipeline, verify gradients, or
//! analyze replay quality. Identical config and seed always produce
//! byte-identical result payloads; wall-clock goes to a sidecar file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use ddm_replay::config::{
    load_memory, parse_config, result_document_bytes, save_memory, save_tensor, stack_batch,
    write_cf_trace_csv, write_flat_table, write_replay_manifest, write_trace_csv,
    ExperimentConfig, ResultDocument,
};
use ddm_replay::ddc::{condense_task, memory_append, Memory};
use ddm_replay::features::{init_feature_map, FeatureMap, Nonlinearity};
use ddm_replay::gradcheck;
use ddm_replay::harness::{cf_trace, cosine_to_fake_centroid, fake_real_margin, linear_probe,
    make_task_sequence, run_continual, TaskData};
use ddm_replay::mcr::build_replay_set_styled;
use ddm_replay::numerics::Rng;
use ddm_replay::sampler::uniform_frequencies;
use ddm_replay::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ddm-replay",
    about = "Condense task discrepancies into map banks and replay them",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condense one task's discrepancy into a bank and write a memory file.
    Condense {
        #[arg(long)]
        config: PathBuf,
        /// Task index to condense.
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value = "memory.ddmb")]
        out: PathBuf,
        /// Overrides the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional loss-trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compose a replay batch from a memory file and current reals.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        /// Output batch (rank-2 tensor, one row per sample).
        #[arg(long, default_value = "replay.cft")]
        out: PathBuf,
        /// Sidecar manifest: source task, map index, alpha per row.
        #[arg(long, default_value = "replay_manifest.csv")]
        manifest: PathBuf,
        /// Task whose reals carry the replay; defaults to the last task.
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the continual pipeline for every configured seed.
    Continual {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify all hand-derived gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Replay-quality scores and CF traces for a stored memory.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape",
        Error::EmptyInput(_) => "empty-input",
        Error::NonFinite(_) => "non-finite",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Diverged(_) => "diverged",
        Error::Format(_) => "format",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}

fn build_feature_map(cfg: &ExperimentConfig, rng: &Rng) -> Result<FeatureMap> {
    let dim = cfg.tasks[0].dim;
    if cfg.nonlinearity == Nonlinearity::Identity && cfg.feature_out_dim == dim {
        Ok(FeatureMap::identity(dim))
    } else {
        init_feature_map(
            &mut rng.derive("features"),
            dim,
            cfg.feature_out_dim,
            cfg.nonlinearity,
        )
    }
}

fn load_fixture(
    config: &Path,
    seed: Option<u64>,
) -> Result<(ExperimentConfig, u64, Rng, Vec<TaskData>, FeatureMap)> {
    let cfg = parse_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let root = Rng::seeded(seed);
    let specs: Vec<_> = cfg.tasks.clone();
    let sequence = make_task_sequence(&specs, &root)?;
    let fmap = build_feature_map(&cfg, &root)?;
    Ok((cfg, seed, root, sequence, fmap))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Condense {
            config,
            task,
            out,
            seed,
            trace,
        } => {
            let (cfg, seed, root, sequence, fmap) = load_fixture(&config, seed)?;
            let data = sequence.get(task).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "task index {task} out of range for {} tasks",
                    cfg.tasks.len()
                ))
            })?;
            let mut cond_rng = root.derive(&format!("condense-{task}"));
            let mut output = condense_task(
                &data.train_real,
                &data.train_fake,
                &fmap,
                &cfg.ddc,
                &mut cond_rng,
            )?;
            output.bank.task_id = task as u32;
            let final_loss = output.trace.last().copied().unwrap_or(f64::NAN);
            if let Some(trace_path) = trace {
                write_trace_csv(std::slice::from_ref(&output.trace), &trace_path)?;
            }
            let memory = memory_append(Memory::new(), output.bank)?;
            save_memory(&memory, &out)?;
            println!(
                "condensed task {task} seed {seed}: K={} final_loss={final_loss:.6} -> {}",
                cfg.ddc.k,
                out.display()
            );
            Ok(())
        }
        Command::Replay {
            config,
            memory,
            out,
            manifest,
            task,
            seed,
        } => {
            let (cfg, seed, root, sequence, _) = load_fixture(&config, seed)?;
            let memory = load_memory(&memory)?;
            let carrier = task.unwrap_or(sequence.len() - 1);
            let data = sequence.get(carrier).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "task index {carrier} out of range for {} tasks",
                    cfg.tasks.len()
                ))
            })?;
            let samples = build_replay_set_styled(
                &memory,
                &data.train_real,
                &cfg.schedule,
                &mut root.derive(&format!("replay-{carrier}")),
                cfg.n_replay_per_task,
                cfg.mode.replay_style(),
                1e-6,
            )?;
            if samples.is_empty() {
                return Err(Error::EmptyInput("replay from empty memory"));
            }
            let xs: Vec<_> = samples.iter().map(|s| s.x.clone()).collect();
            save_tensor(&stack_batch(&xs)?, &out)?;
            write_replay_manifest(&samples, &manifest)?;
            println!(
                "replayed {} samples seed {seed} -> {} + {}",
                samples.len(),
                out.display(),
                manifest.display()
            );
            Ok(())
        }
        Command::Continual { config } => {
            let cfg = parse_config(&config)?;
            let ccfg = cfg.continual_config();
            for &seed in &cfg.seeds {
                let root = Rng::seeded(seed);
                let sequence = make_task_sequence(&cfg.tasks, &root)?;
                let fmap = build_feature_map(&cfg, &root)?;
                let out = run_continual(&sequence, &fmap, &ccfg, seed, &root)?;

                let dir = cfg.output_dir.join(format!("seed-{seed}"));
                std::fs::create_dir_all(&dir)?;
                save_memory(&out.memory, &dir.join("memory.ddmb"))?;
                let doc = ResultDocument {
                    config: cfg.to_flat(),
                    result: out.result.clone(),
                };
                std::fs::write(dir.join("result.json"), result_document_bytes(&doc)?)?;
                write_trace_csv(&out.traces, &dir.join("trace.csv"))?;
                write_flat_table(&out.result, &dir.join("table.csv"))?;
                let wall = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                std::fs::write(dir.join("run_meta.txt"), format!("finished_unix={wall}\n"))?;
                let t = out.result.aa_history.len() - 1;
                println!(
                    "seed {seed}: AA={:.4} AF={} -> {}",
                    out.result.aa_history[t],
                    out.result.af_history[t]
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    dir.display()
                );
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let reports = gradcheck::run_all(seed)?;
            println!("{:<10} {:>14} {:>10} {:>6}", "suite", "max_rel_error", "threshold", "pass");
            let mut all_pass = true;
            for r in &reports {
                all_pass &= r.pass();
                println!(
                    "{:<10} {:>14.3e} {:>10.0e} {:>6}",
                    r.name,
                    r.max_rel_error,
                    r.threshold,
                    if r.pass() { "yes" } else { "NO" }
                );
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::InvalidArgument(
                    "gradient check failed, see table above".into(),
                ))
            }
        }
        Command::Analyze {
            config,
            memory,
            out_dir,
            seed,
        } => {
            let (cfg, seed, root, sequence, fmap) = load_fixture(&config, seed)?;
            let memory = load_memory(&memory)?;
            if memory.is_empty() {
                return Err(Error::EmptyInput("analyze on empty memory"));
            }
            std::fs::create_dir_all(&out_dir)?;
            let carriers = &sequence.last().expect("nonempty").train_real;
            let grid = uniform_frequencies(
                &mut root.derive("cf-grid"),
                64,
                fmap.out_dim(),
                1.0,
            )?;
            let mut rows = BTreeMap::new();
            for bank in memory.banks() {
                let s = bank.task_id as usize;
                let task = sequence.get(s).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "memory bank for task {s} has no matching task in the config"
                    ))
                })?;
                let single = memory_append(Memory::new(), bank.clone())?;
                let replay = build_replay_set_styled(
                    &single,
                    carriers,
                    &cfg.schedule,
                    &mut root.derive(&format!("analysis-replay-{s}")),
                    cfg.n_replay_per_task,
                    cfg.mode.replay_style(),
                    1e-6,
                )?;
                let replay_x: Vec<_> = replay.into_iter().map(|r| r.x).collect();
                let replay_feats = fmap.extract_batch(&replay_x)?;
                let fake_feats = fmap.extract_batch(&task.train_fake)?;
                let real_feats = fmap.extract_batch(&task.train_real)?;
                let cos = cosine_to_fake_centroid(&replay_feats, &fake_feats)?;
                let margin = fake_real_margin(&replay_feats, &fake_feats, &real_feats)?;
                let old_reals: Vec<_> = task
                    .test
                    .iter()
                    .filter(|(_, y)| *y == 0)
                    .map(|(x, _)| x.clone())
                    .collect();
                let (probe_auc, probe_ap) = linear_probe(
                    &old_reals,
                    &replay_x,
                    &task.test,
                    &fmap,
                    &mut root.derive(&format!("analysis-probe-{s}")),
                )?;
                rows.insert(s, (cos, margin, probe_auc, probe_ap));
                let trace = cf_trace(&task.train_fake, &replay_x, &fmap, &grid)?;
                write_cf_trace_csv(&trace, &out_dir.join(format!("cf_trace_task{s}.csv")))?;
            }
            let mut csv = String::from("task,cosine_to_fake,fake_real_margin,probe_auc,probe_ap\n");
            for (s, (cos, margin, pauc, pap)) in &rows {
                csv.push_str(&format!("{s},{cos},{margin},{pauc},{pap}\n"));
            }
            std::fs::write(out_dir.join("analysis.csv"), csv)?;
            println!(
                "analyzed {} banks seed {seed} -> {}",
                rows.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}
