//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use syncast_core::data::Dataset;
use syncast_core::denoiser::{DenoiserConfig, PredictionRegime};
use syncast_core::diffusion::{SamplerKind, ScheduleKind};
use syncast_core::train::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_syncast"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn micro_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        output_dir: dir.join("run"),
        ..Default::default()
    };
    cfg.data.root = dir.join("data");
    cfg.data.gen.seed = 11;
    cfg.data.gen.events = 10;
    cfg.data.gen.grid = (16, 16);
    cfg.data.gen.n_frames = 5;
    cfg.data.gen.n_cells = 1;
    cfg.data.gen.context_len = 2;
    cfg.data.gen.horizon = 3;
    cfg.model = DenoiserConfig {
        base_channels: 4,
        channel_mults: vec![1],
        n_res_blocks: 1,
        attention_resolutions: vec![16],
        cond_embed_dim: 8,
        time_embed_dim: 8,
        target_frames: 3,
        context_frames: 2,
        height: 16,
        width: 16,
        cond_token_pools: 1,
        norm_groups: 2,
        regime: PredictionRegime::Epsilon,
    };
    cfg.schedule.t_d = 40;
    cfg.schedule.kind = ScheduleKind::Linear;
    cfg.schedule.beta_min = 1e-3;
    cfg.schedule.beta_max = 0.1;
    cfg.sampler.kind = SamplerKind::Ddim;
    cfg.sampler.n_steps = 8;
    cfg.training.steps = 6;
    cfg.training.batch_size = 2;
    cfg.training.val_every = 0;
    cfg.training.checkpoint_every = 0;
    cfg.training.log_every = 3;
    cfg.prefs.n_candidates = 2;
    cfg.alignment.far_steps = 2;
    cfg.alignment.csi_steps = 2;
    cfg.alignment.batch_size = 2;
    cfg.eval.ensemble = 2;
    cfg.eval.max_events = Some(2);
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, toml::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_creates_archive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = run(
        &["gen-data", "--config", config.to_str().unwrap(), "--seed", "0", "--events", "20"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ds = Dataset::open(&cfg.data.root).unwrap();
    let total: usize = [
        syncast_core::data::Split::Train,
        syncast_core::data::Split::Val,
        syncast_core::data::Split::Test,
    ]
    .iter()
    .map(|s| ds.n_events(*s))
    .sum();
    assert_eq!(total, 20);
}

#[test]
fn dry_run_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = run(&["gen-data", "--config", config.to_str().unwrap(), "--dry-run"], dir.path());
    assert!(out.status.success());
    assert!(!cfg.data.root.exists(), "dry-run must not create the archive");
    let out = run(&["pipeline", "--config", config.to_str().unwrap(), "--dry-run"], dir.path());
    assert!(out.status.success());
    assert!(!cfg.output_dir.exists(), "dry-run must not create the run directory");
}

#[test]
fn evaluate_missing_checkpoint_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = run(
        &["evaluate", "--config", config.to_str().unwrap(), "--checkpoint", "missing.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.ckpt"), "stderr should name the path: {stderr}");
}

#[test]
fn unknown_command_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["evaluate", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train-base", "build-prefs", "align", "evaluate", "sample", "pipeline", "plot"] {
        let out = run(&[cmd, "--help"], dir.path());
        assert!(out.status.success(), "{cmd} --help failed");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn align_csi_without_stage_one_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = run(&["align", "csi", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_then_plot_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let out = run(&["pipeline", "--config", config.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pi0"), "{stdout}");
    assert!(stdout.contains("pi_alpha"));
    assert!(stdout.contains("pi_beta"));

    let out = run(
        &[
            "plot",
            "--config", config.to_str().unwrap(),
            "--report", "reports/pi0.json", "reports/pi_alpha.json", "reports/pi_beta.json",
            "--stage-log", "logs/far_align.jsonl", "logs/csi_align.jsonl",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for figure in ["lead_csi.png", "lead_far.png", "policy_comparison.png", "alignment_stages.png"] {
        assert!(cfg.output_dir.join("plots").join(figure).exists(), "{figure} missing");
    }

    let out = run(
        &[
            "sample",
            "--config", config.to_str().unwrap(),
            "--checkpoint", "checkpoints/pi_beta.ckpt",
            "--members", "2",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let samples = cfg.output_dir.join("samples");
    assert!(samples.exists());

    // Dotted overrides reach the config: this evaluate uses 1 event only.
    let out = run(
        &[
            "evaluate",
            "--config", config.to_str().unwrap(),
            "--checkpoint", "checkpoints/pi0.ckpt",
            "--report", "reports/limited.json",
            "--eval.max_events=1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(cfg.output_dir.join("reports/limited.json").exists());
}
