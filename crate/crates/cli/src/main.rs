//! Command-line surface for the diffusion nowcasting workflow.

mod config;
mod font;
mod plot;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use syncast_core::align::{run_stage, Stage, StageLogRecord};
use syncast_core::checkpoint::PolicyCheckpoint;
use syncast_core::data::{split_context_target, Dataset, Split};
use syncast_core::diffusion::DiffusionSchedule;
use syncast_core::error::Error as CoreError;
use syncast_core::metrics::ScoreReport;
use syncast_core::prefs::{build_preference_dataset, stack_batch, PairArchive};
use syncast_core::train::{
    ensure_dataset, evaluate_model, run_pipeline, sample_ensemble, train_base, RunConfig, RunLock,
};
use syncast_core::util::derive_seed;

#[derive(Parser)]
#[command(
    name = "syncast",
    about = "Conditional diffusion nowcasting with metric-preference post-training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Validate the configuration and print the plan without side effects.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Dotted config overrides, e.g. --training.steps=500 --seed=3.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        config::load_config(self.config.as_deref(), self.output_dir.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic radar archive.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generator seed (shortcut for --data.gen.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of events (shortcut for --data.gen.events).
        #[arg(long)]
        events: Option<usize>,
    },
    /// Train the base policy on the train split.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Resume from a training-state snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build FAR and CSI preference pairs from the base policy's samples.
    BuildPrefs {
        #[command(flatten)]
        common: Common,
        /// Base policy checkpoint (default: <output-dir>/pi0.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pair archive destination (default: <output-dir>/pairs).
        #[arg(long)]
        pairs_out: Option<PathBuf>,
    },
    /// Run one alignment stage (far: stage 1, csi: stage 2).
    Align {
        /// Which metric to align on.
        #[arg(value_parser = ["far", "csi"])]
        metric: String,
        #[command(flatten)]
        common: Common,
        /// Pair archive (default: <output-dir>/pairs).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Base policy checkpoint (default: <output-dir>/pi0.ckpt).
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
        /// Stage-1 checkpoint, required for csi (default: <output-dir>/pi_alpha.ckpt).
        #[arg(long)]
        far_checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint to evaluate (default: <output-dir>/pi0.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset split (train, val, test).
        #[arg(long, default_value = "test")]
        split: String,
        /// Report destination (default: <output-dir>/reports/<ckpt>_<split>.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample forecasts for one event and write frames plus a preview strip.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint (default: <output-dir>/pi0.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset split to pick the event from.
        #[arg(long, default_value = "test")]
        split: String,
        /// Event index within the split.
        #[arg(long, default_value_t = 0)]
        event_index: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ensemble members to draw.
        #[arg(long, default_value_t = 1)]
        members: usize,
    },
    /// Run the full three-step procedure and compare the three policies.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Render per-lead-time curves, policy comparison bars, and stage logs.
    Plot {
        #[command(flatten)]
        common: Common,
        /// ScoreReport JSON files (labels from file stems).
        #[arg(long, num_args = 1..)]
        report: Vec<PathBuf>,
        /// Stage log JSONL files.
        #[arg(long, num_args = 0..)]
        stage_log: Vec<PathBuf>,
        /// Plot output directory (default: <output-dir>/plots).
        #[arg(long)]
        plots_out: Option<PathBuf>,
    },
}

/// Outcome of one CLI invocation.
struct CommandResult {
    artifacts: Vec<PathBuf>,
    summary: String,
}

impl CommandResult {
    fn print(&self) {
        println!("{}", self.summary);
        for a in &self.artifacts {
            println!("  artifact: {}", a.display());
        }
    }
}

fn main() {
    if let Ok(v) = std::env::var("SYNCAST_NUM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(result) => {
            result.print();
            std::process::exit(0);
        }
        Err(e) => {
            if e.downcast_ref::<config::UsageError>().is_some() {
                eprintln!("error: {e}");
                eprintln!("usage: syncast <COMMAND> [--config FILE] [--output-dir DIR] [--<key.path>=<value> ...]");
                eprintln!("run 'syncast --help' for the command list");
                std::process::exit(2);
            }
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cmd: Command) -> Result<CommandResult> {
    match cmd {
        Command::GenData { common, seed, events } => gen_data(common, seed, events),
        Command::TrainBase { common, resume } => cmd_train_base(common, resume),
        Command::BuildPrefs { common, checkpoint, pairs_out } => cmd_build_prefs(common, checkpoint, pairs_out),
        Command::Align { metric, common, pairs, base_checkpoint, far_checkpoint } => {
            cmd_align(common, &metric, pairs, base_checkpoint, far_checkpoint)
        }
        Command::Evaluate { common, checkpoint, split, report } => cmd_evaluate(common, checkpoint, &split, report),
        Command::Sample { common, checkpoint, split, event_index, seed, members } => {
            cmd_sample(common, checkpoint, &split, event_index, seed, members)
        }
        Command::Pipeline { common } => cmd_pipeline(common),
        Command::Plot { common, report, stage_log, plots_out } => cmd_plot(common, report, stage_log, plots_out),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(|e| anyhow!("{e}"))
}

fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    PolicyCheckpoint::load(path).map_err(|e| anyhow!("{e}"))
}

fn schedule_of(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    cfg.schedule.build().map_err(|e| anyhow!("{e}"))
}

fn gen_data(common: Common, seed: Option<u64>, events: Option<usize>) -> Result<CommandResult> {
    let mut cfg = common.load()?;
    if let Some(s) = seed {
        cfg.data.gen.seed = s;
    }
    if let Some(n) = events {
        cfg.data.gen.events = n;
    }
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would generate {} events ({}x{} grid, {} frames) under {}",
                cfg.data.gen.events,
                cfg.data.gen.grid.0,
                cfg.data.gen.grid.1,
                cfg.data.gen.n_frames,
                cfg.data.root.display()
            ),
        });
    }
    let manifest = syncast_core::data::write_synthetic_archive(&cfg.data.root, &cfg.data.gen)
        .map_err(|e| anyhow!("{e}"))?;
    let counts: Vec<String> = manifest
        .splits
        .iter()
        .map(|(split, v)| format!("{split}: {}", v.len()))
        .collect();
    Ok(CommandResult {
        artifacts: vec![cfg.data.root.clone()],
        summary: format!("generated {} events ({})", cfg.data.gen.events, counts.join(", ")),
    })
}

fn cmd_train_base(common: Common, resume: Option<PathBuf>) -> Result<CommandResult> {
    let cfg = common.load()?;
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would train {} steps (batch {}) on {} into {}",
                cfg.training.steps,
                cfg.training.batch_size,
                cfg.data.root.display(),
                cfg.output_dir.display()
            ),
        });
    }
    let _lock = RunLock::acquire(&cfg.output_dir).map_err(|e| anyhow!("{e}"))?;
    let dataset = ensure_dataset(&cfg).map_err(|e| anyhow!("{e}"))?;
    let resume = resume.map(|p| config::resolve(&cfg.output_dir, &p));
    let ckpt = train_base(&cfg, &dataset, resume.as_deref()).map_err(|e| anyhow!("{e}"))?;
    let path = cfg.output_dir.join("pi0.ckpt");
    Ok(CommandResult {
        artifacts: vec![path, cfg.output_dir.join("train.jsonl")],
        summary: format!(
            "trained base policy for {} steps ({} parameters)",
            cfg.training.steps,
            ckpt.model.n_params()
        ),
    })
}

fn cmd_build_prefs(
    common: Common,
    checkpoint: Option<PathBuf>,
    pairs_out: Option<PathBuf>,
) -> Result<CommandResult> {
    let cfg = common.load()?;
    let ckpt_path = config::resolve(&cfg.output_dir, checkpoint.as_deref().unwrap_or(Path::new("pi0.ckpt")));
    let out = config::resolve(&cfg.output_dir, pairs_out.as_deref().unwrap_or(Path::new("pairs")));
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would build {}+1 candidates per event ({:?} strategy) from {} into {}",
                cfg.prefs.n_candidates,
                cfg.prefs.strategy,
                ckpt_path.display(),
                out.display()
            ),
        });
    }
    let policy = load_checkpoint(&ckpt_path)?;
    let dataset = Dataset::open(&cfg.data.root).map_err(|e| anyhow!("{e}"))?;
    let sched = schedule_of(&cfg)?;
    let thresholds = cfg.eval.threshold_set().map_err(|e| anyhow!("{e}"))?;
    let summary = build_preference_dataset(
        &policy,
        &sched,
        &dataset,
        Split::Train,
        cfg.prefs.n_candidates,
        &thresholds,
        cfg.prefs.strategy,
        &cfg.sampler.trajectory(0),
        derive_seed(cfg.seed, 100),
        &out,
    )
    .map_err(|e| anyhow!("{e}"))?;
    Ok(CommandResult {
        artifacts: vec![out],
        summary: format!(
            "built {} FAR and {} CSI pairs over {} events ({} skipped)",
            summary.n_far_pairs,
            summary.n_csi_pairs,
            summary.n_events,
            summary.skipped.len()
        ),
    })
}

fn cmd_align(
    common: Common,
    metric: &str,
    pairs: Option<PathBuf>,
    base_checkpoint: Option<PathBuf>,
    far_checkpoint: Option<PathBuf>,
) -> Result<CommandResult> {
    let cfg = common.load()?;
    let pairs_dir = config::resolve(&cfg.output_dir, pairs.as_deref().unwrap_or(Path::new("pairs")));
    let base_path = config::resolve(&cfg.output_dir, base_checkpoint.as_deref().unwrap_or(Path::new("pi0.ckpt")));
    let stage = match metric {
        "far" => Stage::FarAlign,
        "csi" => Stage::CsiAlign,
        other => bail!("unknown alignment metric '{other}'"),
    };
    let (steps, seed_salt, out_name, log_name) = match stage {
        Stage::FarAlign => (cfg.alignment.far_steps, 101u64, "pi_alpha.ckpt", "far_align.jsonl"),
        Stage::CsiAlign => (cfg.alignment.csi_steps, 102u64, "pi_beta.ckpt", "csi_align.jsonl"),
    };
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would run {stage} for {steps} steps from {} with pairs {}",
                base_path.display(),
                pairs_dir.display()
            ),
        });
    }
    let pi0 = load_checkpoint(&base_path)?;
    let alpha = match stage {
        Stage::FarAlign => None,
        Stage::CsiAlign => {
            let p = config::resolve(
                &cfg.output_dir,
                far_checkpoint.as_deref().unwrap_or(Path::new("pi_alpha.ckpt")),
            );
            Some(load_checkpoint(&p)?)
        }
    };
    let archive = PairArchive::open(&pairs_dir).map_err(|e| anyhow!("{e}"))?;
    let dataset = Dataset::open(&cfg.data.root).map_err(|e| anyhow!("{e}"))?;
    let sched = schedule_of(&cfg)?;
    let out = run_stage(
        stage,
        &pi0,
        alpha.as_ref(),
        &archive,
        &dataset,
        Split::Train,
        &cfg.alignment.config(steps, derive_seed(cfg.seed, seed_salt)),
        &sched,
        Some(&cfg.output_dir.join("logs").join(log_name)),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let out_path = cfg.output_dir.join(out_name);
    out.save(&out_path).map_err(|e| anyhow!("{e}"))?;
    Ok(CommandResult {
        artifacts: vec![out_path, cfg.output_dir.join("logs").join(log_name)],
        summary: format!("{stage} finished after {steps} steps (role {})", out.role),
    })
}

fn cmd_evaluate(
    common: Common,
    checkpoint: Option<PathBuf>,
    split: &str,
    report: Option<PathBuf>,
) -> Result<CommandResult> {
    let cfg = common.load()?;
    let split = parse_split(split)?;
    let ckpt_path = config::resolve(&cfg.output_dir, checkpoint.as_deref().unwrap_or(Path::new("pi0.ckpt")));
    let stem = ckpt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("policy").to_string();
    let default_report = PathBuf::from(format!("reports/{stem}_{split}.json"));
    let report_path = config::resolve(&cfg.output_dir, report.as_deref().unwrap_or(&default_report));
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would evaluate {} on split {split} into {}",
                ckpt_path.display(),
                report_path.display()
            ),
        });
    }
    let policy = load_checkpoint(&ckpt_path)?;
    let dataset = Dataset::open(&cfg.data.root).map_err(|e| anyhow!("{e}"))?;
    let sched = schedule_of(&cfg)?;
    let result = evaluate_model(&policy.model, &dataset, split, &cfg.eval, &sched, &cfg.sampler)
        .map_err(|e| anyhow!("{e}"))?;
    if let Some(dir) = report_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&report_path, result.to_json().map_err(|e| anyhow!("{e}"))?)?;
    Ok(CommandResult {
        artifacts: vec![report_path],
        summary: format!(
            "evaluated {stem} on {split}: csi_m={} far_m={} hss={} crps={:.6}",
            fmt_opt(result.csi_m),
            fmt_opt(result.far_m),
            fmt_opt(result.hss),
            result.crps
        ),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undef".to_string())
}

fn cmd_sample(
    common: Common,
    checkpoint: Option<PathBuf>,
    split: &str,
    event_index: usize,
    seed: u64,
    members: usize,
) -> Result<CommandResult> {
    let cfg = common.load()?;
    let split = parse_split(split)?;
    let ckpt_path = config::resolve(&cfg.output_dir, checkpoint.as_deref().unwrap_or(Path::new("pi0.ckpt")));
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would sample {members} member(s) for event {event_index} of {split} with {}",
                ckpt_path.display()
            ),
        });
    }
    let policy = load_checkpoint(&ckpt_path)?;
    let dataset = Dataset::open(&cfg.data.root).map_err(|e| anyhow!("{e}"))?;
    let dirs = dataset.event_dirs(split);
    let dir = dirs
        .get(event_index)
        .ok_or_else(|| anyhow!("split {split} has only {} events", dirs.len()))?;
    let record = dataset.load_event(dir, split).map_err(|e| anyhow!("{e}"))?;
    let (ctx, target) = split_context_target(&record.sequence, dataset.manifest().context_len)
        .map_err(|e| anyhow!("{e}"))?;
    let context = stack_batch(&ctx.to_stack());
    let sched = schedule_of(&cfg)?;
    let out_dir = cfg.output_dir.join("samples").join(&record.event_id);
    std::fs::create_dir_all(&out_dir)?;
    let ens = sample_ensemble(&policy.model, &context, members.max(1), &sched, &cfg.sampler, seed)
        .map_err(|e| anyhow!("{e}"))?;
    let mut artifacts = Vec::new();
    for (i, member) in ens.iter().enumerate() {
        let bin = out_dir.join(format!("member_{i}.bin"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&bin)?);
        syncast_core::util::write_f32_le(&mut w, &member.clone().into_dyn()).map_err(|e| anyhow!("{e}"))?;
        let png = out_dir.join(format!("member_{i}.png"));
        plot::frame_strip(member, &png)?;
        artifacts.push(bin);
        artifacts.push(png);
    }
    let obs_png = out_dir.join("observed.png");
    plot::frame_strip(&stack_batch(&target.to_stack()), &obs_png)?;
    artifacts.push(obs_png);
    Ok(CommandResult {
        artifacts,
        summary: format!(
            "sampled {} member(s) for event {} (seed {seed})",
            ens.len(),
            record.event_id
        ),
    })
}

fn cmd_pipeline(common: Common) -> Result<CommandResult> {
    let cfg = common.load()?;
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would run the full pipeline ({} base steps, {}+{} alignment steps) into {}",
                cfg.training.steps,
                cfg.alignment.far_steps,
                cfg.alignment.csi_steps,
                cfg.output_dir.display()
            ),
        });
    }
    let report = run_pipeline(&cfg).map_err(|e| match e {
        CoreError::Stage { .. } => anyhow!("{e}"),
        other => anyhow!("stage pipeline: {other}"),
    })?;
    let mut lines = vec!["pipeline finished; policy comparison on the test split:".to_string()];
    for row in &report.rows {
        lines.push(format!(
            "  {:9} csi_m={} far_m={} hss={} crps={:.6}",
            row.role,
            fmt_opt(row.csi_m),
            fmt_opt(row.far_m),
            fmt_opt(row.hss),
            row.crps
        ));
    }
    let mut artifacts = report.checkpoints.clone();
    artifacts.push(cfg.output_dir.join("summary.json"));
    for row in &report.rows {
        artifacts.push(row.report_path.clone());
    }
    Ok(CommandResult { artifacts, summary: lines.join("\n") })
}

fn cmd_plot(
    common: Common,
    reports: Vec<PathBuf>,
    stage_logs: Vec<PathBuf>,
    plots_out: Option<PathBuf>,
) -> Result<CommandResult> {
    let cfg = common.load()?;
    let out_dir = config::resolve(&cfg.output_dir, plots_out.as_deref().unwrap_or(Path::new("plots")));
    if reports.is_empty() && stage_logs.is_empty() {
        bail!("plot needs at least one --report or --stage-log file");
    }
    if common.dry_run {
        return Ok(CommandResult {
            artifacts: vec![],
            summary: format!(
                "dry-run: would render {} report(s) and {} stage log(s) into {}",
                reports.len(),
                stage_logs.len(),
                out_dir.display()
            ),
        });
    }
    let mut loaded = Vec::new();
    for p in &reports {
        let p = config::resolve(&cfg.output_dir, p);
        let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
        let report = ScoreReport::from_json(&text).map_err(|e| anyhow!("{}: {e}", p.display()))?;
        let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
        loaded.push(plot::LabeledReport { label, report });
    }
    let mut artifacts = Vec::new();
    if !loaded.is_empty() {
        let lead_csi = out_dir.join("lead_csi.png");
        plot::lead_time_chart(&loaded, "csi", &lead_csi)?;
        let lead_far = out_dir.join("lead_far.png");
        plot::lead_time_chart(&loaded, "far", &lead_far)?;
        let cmp = out_dir.join("policy_comparison.png");
        plot::comparison_chart(&loaded, &cmp)?;
        artifacts.extend([lead_csi, lead_far, cmp]);
    }
    if !stage_logs.is_empty() {
        let mut logs = Vec::new();
        for p in &stage_logs {
            let p = config::resolve(&cfg.output_dir, p);
            let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
            let records: Vec<StageLogRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| anyhow!("{}: {e}", p.display()))?;
            let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("stage").to_string();
            logs.push((label, records));
        }
        let path = out_dir.join("alignment_stages.png");
        plot::stage_log_chart(&logs, &path)?;
        artifacts.push(path);
    }
    let n = artifacts.len();
    Ok(CommandResult {
        artifacts,
        summary: format!("rendered {n} figure(s) into {}", out_dir.display()),
    })
}
