//! Synthetic radar-advection event generator.
//!
//! Produces Gaussian-profile precipitation cells advected across the grid
//! with per-cell velocities, slow intensity growth/decay, and small
//! stochastic perturbations. Pure function of (seed, params).

use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{write_event_dir, write_manifest, DatasetManifest, EventRecord, RadarSequence, Split};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Advection dynamics for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionParams {
    /// Max per-axis cell speed in pixels per frame.
    pub max_speed: f64,
    /// Gaussian cell radius range in pixels.
    pub sigma_range: (f64, f64),
    /// Initial peak intensity range.
    pub amplitude_range: (f64, f64),
    /// Multiplicative per-frame intensity growth/decay range.
    pub growth_range: (f64, f64),
    /// Std of per-frame velocity jitter (pixels per frame).
    pub velocity_jitter: f64,
    /// Std of per-frame relative amplitude jitter.
    pub amplitude_jitter: f64,
}

impl Default for AdvectionParams {
    fn default() -> Self {
        Self {
            max_speed: 1.2,
            sigma_range: (2.5, 5.0),
            amplitude_range: (0.45, 0.95),
            growth_range: (0.985, 1.015),
            velocity_jitter: 0.15,
            amplitude_jitter: 0.02,
        }
    }
}

struct Cell {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    sigma: f64,
    amplitude: f64,
    growth: f64,
}

/// Generates one synthetic event. Deterministic given `seed`.
pub fn generate_synthetic_event(
    seed: u64,
    grid: (usize, usize),
    n_frames: usize,
    n_cells: usize,
    params: &AdvectionParams,
) -> Result<RadarSequence> {
    let (h, w) = grid;
    if h < 16 || w < 16 {
        return Err(Error::parameter(format!("grid must be at least 16x16, got {h}x{w}")));
    }
    if n_frames < 4 {
        return Err(Error::parameter(format!("n_frames must be >= 4, got {n_frames}")));
    }
    if n_cells < 1 {
        return Err(Error::parameter("n_cells must be >= 1"));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cells: Vec<Cell> = (0..n_cells)
        .map(|_| {
            let x = rng.random_range(0.15 * w as f64..0.85 * w as f64);
            let y = rng.random_range(0.15 * h as f64..0.85 * h as f64);
            let speed = rng.random_range(0.3 * params.max_speed..params.max_speed);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Cell {
                x,
                y,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                sigma: rng.random_range(params.sigma_range.0..params.sigma_range.1),
                amplitude: rng.random_range(params.amplitude_range.0..params.amplitude_range.1),
                growth: rng.random_range(params.growth_range.0..params.growth_range.1),
            }
        })
        .collect();

    let mut frames = Array4::<f64>::zeros((n_frames, 1, h, w));
    for t in 0..n_frames {
        for cell in &cells {
            let inv = 1.0 / (2.0 * cell.sigma * cell.sigma);
            // Gaussians decay fast; only rasterize a 4-sigma box.
            let r = (4.0 * cell.sigma).ceil() as isize;
            let cx = cell.x.round() as isize;
            let cy = cell.y.round() as isize;
            for py in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
                for px in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                    let dx = px as f64 - cell.x;
                    let dy = py as f64 - cell.y;
                    let v = cell.amplitude * (-(dx * dx + dy * dy) * inv).exp();
                    frames[[t, 0, py as usize, px as usize]] += v;
                }
            }
        }
        for cell in cells.iter_mut() {
            cell.x += cell.vx + rng.random_range(-1.0..1.0) * params.velocity_jitter;
            cell.y += cell.vy + rng.random_range(-1.0..1.0) * params.velocity_jitter;
            cell.amplitude *= cell.growth * (1.0 + rng.random_range(-1.0..1.0) * params.amplitude_jitter);
            cell.amplitude = cell.amplitude.clamp(0.0, 1.0);
            // Bounce off grid edges so cells stay in frame for long horizons.
            if cell.x < 0.0 {
                cell.x = -cell.x;
                cell.vx = -cell.vx;
            }
            if cell.x > (w - 1) as f64 {
                cell.x = 2.0 * (w - 1) as f64 - cell.x;
                cell.vx = -cell.vx;
            }
            if cell.y < 0.0 {
                cell.y = -cell.y;
                cell.vy = -cell.vy;
            }
            if cell.y > (h - 1) as f64 {
                cell.y = 2.0 * (h - 1) as f64 - cell.y;
                cell.vy = -cell.vy;
            }
        }
    }
    frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
    RadarSequence::new(frames, 10)
}

/// Configuration for generating a whole synthetic archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub events: usize,
    pub grid: (usize, usize),
    pub n_frames: usize,
    pub n_cells: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub interval_minutes: u32,
    /// Fractions assigned to train and val; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
    pub params: AdvectionParams,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            events: 64,
            grid: (32, 32),
            n_frames: 12,
            n_cells: 2,
            context_len: 4,
            horizon: 8,
            interval_minutes: 10,
            train_frac: 0.7,
            val_frac: 0.1,
            params: AdvectionParams::default(),
        }
    }
}

/// Generates `cfg.events` events and writes a dataset archive under `root`.
///
/// Returns the manifest that was written.
pub fn write_synthetic_archive(root: &Path, cfg: &GenDataConfig) -> Result<DatasetManifest> {
    if cfg.context_len + cfg.horizon > cfg.n_frames {
        return Err(Error::parameter(format!(
            "context_len + horizon = {} exceeds n_frames = {}",
            cfg.context_len + cfg.horizon,
            cfg.n_frames
        )));
    }
    if cfg.events == 0 {
        return Err(Error::parameter("events must be positive"));
    }
    std::fs::create_dir_all(root)?;
    let n_train = (cfg.events as f64 * cfg.train_frac).round() as usize;
    let n_val = (cfg.events as f64 * cfg.val_frac).round() as usize;
    let mut splits: std::collections::BTreeMap<Split, Vec<String>> = Default::default();
    for i in 0..cfg.events {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let seq = generate_synthetic_event(
            derive_seed(cfg.seed, i as u64),
            cfg.grid,
            cfg.n_frames,
            cfg.n_cells,
            &cfg.params,
        )?;
        let seq = RadarSequence {
            interval_minutes: cfg.interval_minutes,
            ..seq
        };
        let event_id = format!("event_{i:05}");
        let record = EventRecord { sequence: seq, event_id: event_id.clone(), split };
        write_event_dir(&root.join(&event_id), &record, 1.0)?;
        splits.entry(split).or_default().push(event_id);
    }
    let manifest = DatasetManifest {
        context_len: cfg.context_len,
        horizon: cfg.horizon,
        value_scale: 1.0,
        crop: None,
        downscale: None,
        splits,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
