//! Preference alignment losses and the two-stage post-training procedure:
//! stage 1 aligns the base policy against false-alarm preference pairs,
//! stage 2 aligns against hit-rate pairs while a constraint term preserves
//! the stage-1 behavior.
//!
//! Both losses are denoising-style pairwise objectives: corrupt the win and
//! lose sequences at a shared timestep, compare each policy's
//! reconstruction errors, and push the trainable policy to reconstruct the
//! win branch better than its reference does, through a Bradley-Terry
//! log-sigmoid. The squared-error terms are mean-reduced over elements and
//! the combined coefficient `beta * T_d` is exposed as one scalar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph};
use crate::checkpoint::{PolicyCheckpoint, PolicyRole, StageMetadata};
use crate::data::{split_context_target, Dataset, Split};
use crate::denoiser::{DenoiseModel, Denoiser};
use crate::diffusion::{standard_normal_like, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::{average_grads, AdamW};
use crate::prefs::{stack_batch, MetricKind, PairArchive, PreferencePair};
/// Timestep weighting of the pairwise objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Constant weight 1; the signal-to-noise ratio is logged but unused.
    #[default]
    ConstantOne,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Combined coefficient `beta * T_d` multiplying the sigma argument.
    pub beta_td: f64,
    /// Weight of the stage-1 preservation term in stage 2.
    pub alpha_far: f64,
    pub omega: OmegaMode,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            beta_td: 1000.0,
            alpha_far: 1.0,
            omega: OmegaMode::ConstantOne,
            batch_size: 4,
            lr: 1e-4,
            steps: 150,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_td <= 0.0 {
            return Err(Error::config("beta_td must be positive"));
        }
        if self.alpha_far < 0.0 {
            return Err(Error::config("alpha_far must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Diagnostic decomposition of one loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Preference part of the sigma argument (the trainable-policy term).
    pub csi_term: f64,
    /// Constraint part of the sigma argument (stage 2 only, zero otherwise).
    pub far_preservation_term: f64,
    /// 1 when the sigma argument is positive, 0 when negative; an exact
    /// zero (e.g. trainable policy identical to its reference) counts 0.5.
    pub implicit_accuracy: f64,
}

fn accuracy_of(arg: f64) -> f64 {
    if arg > 0.0 {
        1.0
    } else if arg < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Mean squared reconstruction error of a frozen model on one branch,
/// computed outside any gradient path.
fn frozen_branch_error<M: DenoiseModel>(
    model: &M,
    y_t: &Array4<f64>,
    t: usize,
    eps: &Array4<f64>,
    context: &Array4<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let y_node = g.constant(y_t.clone().into_dyn());
    let pred = model.predict_into(&mut g, y_node, &[t as f64], context, false)?;
    g.check_finite(pred, t, "frozen model output")?;
    let eps_node = g.constant(eps.clone().into_dyn());
    let diff = g.sub(eps_node, pred);
    let sq = g.square(diff);
    let loss = g.mean_all(sq);
    Ok(g.scalar(loss))
}

fn corrupt(y0: &Array4<f64>, t: usize, eps: &Array4<f64>, sched: &DiffusionSchedule) -> Array4<f64> {
    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    let mut y = Array4::<f64>::zeros(y0.dim());
    ndarray::Zip::from(&mut y).and(y0).and(eps).for_each(|d, &yv, &ev| {
        *d = a * yv + s * ev;
    });
    y
}

/// Pairwise preference loss at explicit draws; see [`dpo_loss`] for the
/// randomized wrapper. Only `theta` receives gradients.
pub fn dpo_loss_at<M: DenoiseModel, R: DenoiseModel>(
    theta: &M,
    reference: &R,
    pair: &PreferencePair,
    t: usize,
    eps_w: &Array4<f64>,
    eps_l: &Array4<f64>,
    sched: &DiffusionSchedule,
    cfg: &AlignmentConfig,
) -> Result<(LossBreakdown, Grads)> {
    cfg.validate()?;
    if t >= sched.t_d() {
        return Err(Error::parameter(format!("step {t} out of range")));
    }
    let y_t_w = corrupt(&pair.y_win, t, eps_w, sched);
    let y_t_l = corrupt(&pair.y_lose, t, eps_l, sched);
    let d_ref_w = frozen_branch_error(reference, &y_t_w, t, eps_w, &pair.condition)?;
    let d_ref_l = frozen_branch_error(reference, &y_t_l, t, eps_l, &pair.condition)?;

    let mut g = Graph::new();
    let branch = |g: &mut Graph, y_t: &Array4<f64>, eps: &Array4<f64>| -> Result<crate::autodiff::NodeId> {
        let y_node = g.constant(y_t.clone().into_dyn());
        let pred = theta.predict_into(g, y_node, &[t as f64], &pair.condition, true)?;
        g.check_finite(pred, t, "trainable model output")?;
        let eps_node = g.constant(eps.clone().into_dyn());
        let diff = g.sub(eps_node, pred);
        let sq = g.square(diff);
        Ok(g.mean_all(sq))
    };
    let d_theta_w = branch(&mut g, &y_t_w, eps_w)?;
    let d_theta_l = branch(&mut g, &y_t_l, eps_l)?;
    // argument = -beta_td * [(d_theta_w - d_ref_w) - (d_theta_l - d_ref_l)]
    let d_diff = g.sub(d_theta_w, d_theta_l);
    let scaled = g.scale(d_diff, -cfg.beta_td * omega(cfg));
    let offset = cfg.beta_td * omega(cfg) * (d_ref_w - d_ref_l);
    let arg = g.add_scalar(scaled, offset);
    let loss = g.neg_log_sigmoid(arg);
    g.backward(loss)?;
    let arg_v = g.scalar(arg);
    let total = g.scalar(loss);
    if !total.is_finite() {
        return Err(Error::Numeric { step: t, msg: "non-finite preference loss".into() });
    }
    Ok((
        LossBreakdown {
            total,
            csi_term: arg_v,
            far_preservation_term: 0.0,
            implicit_accuracy: accuracy_of(arg_v),
        },
        g.param_grads(),
    ))
}

fn omega(cfg: &AlignmentConfig) -> f64 {
    match cfg.omega {
        OmegaMode::ConstantOne => 1.0,
    }
}

/// Draws a shared timestep and per-branch noises, then evaluates the
/// pairwise preference loss.
pub fn dpo_loss<M: DenoiseModel, R: DenoiseModel>(
    theta: &M,
    reference: &R,
    pair: &PreferencePair,
    sched: &DiffusionSchedule,
    cfg: &AlignmentConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(LossBreakdown, Grads)> {
    let t = rng.random_range(0..sched.t_d());
    let shape = pair.y_win.shape();
    let eps_w = standard_normal_like(rng, shape).into_dimensionality().expect("4d");
    let eps_l = standard_normal_like(rng, shape).into_dimensionality().expect("4d");
    dpo_loss_at(theta, reference, pair, t, &eps_w, &eps_l, sched, cfg)
}

/// A frozen reference model carrying its pipeline role marker.
#[derive(Clone, Copy)]
pub struct RoleTagged<'a, M: DenoiseModel> {
    pub role: PolicyRole,
    pub model: &'a M,
}

impl PolicyCheckpoint {
    /// Borrows the checkpoint as a role-tagged frozen reference.
    pub fn tagged(&self) -> RoleTagged<'_, Denoiser> {
        RoleTagged { role: self.role, model: &self.model }
    }
}

/// Stage-2 loss at explicit draws. `pi_beta` is trainable; `pi_alpha`
/// (stage-1 aligned) and `pi0` (base) are frozen references. Only the
/// trainable-policy terms carry gradients; the preservation term shifts
/// the sigma argument without contributing gradient.
#[allow(clippy::too_many_arguments)]
pub fn spo_loss_at<B, A, Z>(
    pi_beta: &B,
    pi_alpha: &RoleTagged<'_, A>,
    pi0: &RoleTagged<'_, Z>,
    pair_csi: &PreferencePair,
    t: usize,
    eps_w: &Array4<f64>,
    eps_l: &Array4<f64>,
    sched: &DiffusionSchedule,
    cfg: &AlignmentConfig,
) -> Result<(LossBreakdown, Grads)>
where
    B: DenoiseModel,
    A: DenoiseModel,
    Z: DenoiseModel,
{
    cfg.validate()?;
    check_roles(pi_alpha.role, pi0.role)?;
    if pair_csi.metric != MetricKind::Csi {
        return Err(Error::config(format!(
            "stage-2 alignment consumes CSI pairs, got {}",
            pair_csi.metric
        )));
    }
    if t >= sched.t_d() {
        return Err(Error::parameter(format!("step {t} out of range")));
    }
    let y_t_w = corrupt(&pair_csi.y_win, t, eps_w, sched);
    let y_t_l = corrupt(&pair_csi.y_lose, t, eps_l, sched);
    let cond = &pair_csi.condition;
    let d_far_w = frozen_branch_error(pi_alpha.model, &y_t_w, t, eps_w, cond)?;
    let d_far_l = frozen_branch_error(pi_alpha.model, &y_t_l, t, eps_l, cond)?;
    // The preservation term is constant in pi_beta: evaluate it outside the
    // gradient path, and skip the base-policy forwards when alpha is zero.
    let b_term = if cfg.alpha_far != 0.0 {
        let d_pi0_w = frozen_branch_error(pi0.model, &y_t_w, t, eps_w, cond)?;
        let d_pi0_l = frozen_branch_error(pi0.model, &y_t_l, t, eps_l, cond)?;
        d_far_w - d_pi0_w - d_far_l + d_pi0_l
    } else {
        0.0
    };

    let mut g = Graph::new();
    let branch = |g: &mut Graph, y_t: &Array4<f64>, eps: &Array4<f64>| -> Result<crate::autodiff::NodeId> {
        let y_node = g.constant(y_t.clone().into_dyn());
        let pred = pi_beta.predict_into(g, y_node, &[t as f64], cond, true)?;
        g.check_finite(pred, t, "trainable model output")?;
        let eps_node = g.constant(eps.clone().into_dyn());
        let diff = g.sub(eps_node, pred);
        let sq = g.square(diff);
        Ok(g.mean_all(sq))
    };
    let d_csi_w = branch(&mut g, &y_t_w, eps_w)?;
    let d_csi_l = branch(&mut g, &y_t_l, eps_l)?;
    let w = omega(cfg);
    // argument = -beta_td*w*A + alpha*beta_td*w*B with
    // A = d_csi_w - d_far_w - d_csi_l + d_far_l.
    let d_diff = g.sub(d_csi_w, d_csi_l);
    let scaled = g.scale(d_diff, -cfg.beta_td * w);
    let a_offset = -cfg.beta_td * w * (d_far_l - d_far_w);
    let b_offset = cfg.alpha_far * cfg.beta_td * w * b_term;
    let arg = g.add_scalar(scaled, a_offset + b_offset);
    let loss = g.neg_log_sigmoid(arg);
    g.backward(loss)?;
    let arg_v = g.scalar(arg);
    let total = g.scalar(loss);
    if !total.is_finite() {
        return Err(Error::Numeric { step: t, msg: "non-finite preference loss".into() });
    }
    Ok((
        LossBreakdown {
            total,
            csi_term: arg_v - b_offset,
            far_preservation_term: b_offset,
            implicit_accuracy: accuracy_of(arg_v),
        },
        g.param_grads(),
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn spo_loss<B, A, Z>(
    pi_beta: &B,
    pi_alpha: &RoleTagged<'_, A>,
    pi0: &RoleTagged<'_, Z>,
    pair_csi: &PreferencePair,
    sched: &DiffusionSchedule,
    cfg: &AlignmentConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(LossBreakdown, Grads)>
where
    B: DenoiseModel,
    A: DenoiseModel,
    Z: DenoiseModel,
{
    let t = rng.random_range(0..sched.t_d());
    let shape = pair_csi.y_win.shape();
    let eps_w = standard_normal_like(rng, shape).into_dimensionality().expect("4d");
    let eps_l = standard_normal_like(rng, shape).into_dimensionality().expect("4d");
    spo_loss_at(pi_beta, pi_alpha, pi0, pair_csi, t, &eps_w, &eps_l, sched, cfg)
}

fn check_roles(alpha_role: PolicyRole, base_role: PolicyRole) -> Result<()> {
    if alpha_role != PolicyRole::FarAligned {
        return Err(Error::config(format!(
            "stage-1 reference must carry the pi_alpha role, got {alpha_role}"
        )));
    }
    if base_role != PolicyRole::Base {
        return Err(Error::config(format!(
            "base reference must carry the pi0 role, got {base_role}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FarAlign,
    CsiAlign,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::FarAlign => write!(f, "far_align"),
            Stage::CsiAlign => write!(f, "csi_align"),
        }
    }
}

/// One line of the append-only stage log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLogRecord {
    pub step: usize,
    pub total: f64,
    pub csi_term: f64,
    pub far_preservation_term: f64,
    pub implicit_accuracy: f64,
    pub lambda_t_mean: f64,
    pub lambda_t_min: f64,
    pub lambda_t_max: f64,
}

/// Optimizes the stage's trainable policy against the pair archive.
///
/// Stage 1 clones the base policy and aligns it on FAR pairs with the base
/// as reference; stage 2 clones the stage-1 policy and aligns it on CSI
/// pairs with the stage-1 policy and the base as frozen references. The
/// emitted checkpoint carries the stage's role marker; reference policies
/// are never mutated.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: Stage,
    pi0: &PolicyCheckpoint,
    pi_alpha: Option<&PolicyCheckpoint>,
    archive: &PairArchive,
    dataset: &Dataset,
    split: Split,
    cfg: &AlignmentConfig,
    sched: &DiffusionSchedule,
    log_path: Option<&Path>,
) -> Result<PolicyCheckpoint> {
    cfg.validate()?;
    if pi0.role != PolicyRole::Base {
        return Err(Error::config(format!("expected pi0 role, got {}", pi0.role)));
    }
    if archive.events().is_empty() {
        return Err(Error::config("pair archive is empty"));
    }
    let (metric, parent): (MetricKind, &PolicyCheckpoint) = match stage {
        Stage::FarAlign => (MetricKind::Far, pi0),
        Stage::CsiAlign => {
            let alpha = pi_alpha.ok_or_else(|| {
                Error::config("stage 2 requires a stage-1 (pi_alpha) checkpoint")
            })?;
            check_roles(alpha.role, pi0.role)?;
            (MetricKind::Csi, alpha)
        }
    };

    // Materialize pairs with their conditions up front.
    let context_len = dataset.manifest().context_len;
    let pairs: Vec<PreferencePair> = archive
        .events()
        .iter()
        .map(|event_id| -> Result<PreferencePair> {
            let (win, lose, meta) = archive.load_pair(event_id, metric)?;
            let record = dataset.load_event(event_id, split)?;
            let (ctx_seq, _) = split_context_target(&record.sequence, context_len)?;
            let condition = stack_batch(&ctx_seq.to_stack());
            Ok(PreferencePair {
                condition,
                y_win: win,
                y_lose: lose,
                metric,
                strategy: meta.strategy,
                provenance: meta.provenance,
            })
        })
        .collect::<Result<_>>()?;

    let mut policy = parent.model.clone();
    let mut opt = AdamW::new(cfg.lr, 0.9, 0.95, 0.0);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut log = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };

    for step in 0..cfg.steps {
        // Randomness is drawn sequentially, then the per-pair losses are
        // computed in parallel and reduced in index order.
        let draws: Vec<(usize, usize, u64)> = (0..cfg.batch_size)
            .map(|_| {
                let pair_idx = rng.random_range(0..pairs.len());
                let t = rng.random_range(0..sched.t_d());
                let sub_seed: u64 = rng.random();
                (pair_idx, t, sub_seed)
            })
            .collect();
        let results: Vec<Result<(LossBreakdown, Grads, f64)>> = draws
            .par_iter()
            .map(|&(pair_idx, t, sub_seed)| {
                let pair = &pairs[pair_idx];
                let mut sub = ChaCha12Rng::seed_from_u64(sub_seed);
                let shape = pair.y_win.shape();
                let eps_w: Array4<f64> =
                    standard_normal_like(&mut sub, shape).into_dimensionality().expect("4d");
                let eps_l: Array4<f64> =
                    standard_normal_like(&mut sub, shape).into_dimensionality().expect("4d");
                let (breakdown, grads) = match stage {
                    Stage::FarAlign => {
                        dpo_loss_at(&policy, &pi0.model, pair, t, &eps_w, &eps_l, sched, cfg)?
                    }
                    Stage::CsiAlign => spo_loss_at(
                        &policy,
                        &pi_alpha.expect("checked above").tagged(),
                        &pi0.tagged(),
                        pair,
                        t,
                        &eps_w,
                        &eps_l,
                        sched,
                        cfg,
                    )?,
                };
                Ok((breakdown, grads, sched.snr(t)))
            })
            .collect();
        let mut parts = Vec::with_capacity(cfg.batch_size);
        let mut total = 0.0;
        let mut csi_term = 0.0;
        let mut far_term = 0.0;
        let mut acc = 0.0;
        let mut lambda = Vec::with_capacity(cfg.batch_size);
        for r in results {
            let (breakdown, grads, snr) = r?;
            total += breakdown.total;
            csi_term += breakdown.csi_term;
            far_term += breakdown.far_preservation_term;
            acc += breakdown.implicit_accuracy;
            lambda.push(snr);
            parts.push(grads);
        }
        let n = cfg.batch_size as f64;
        let grads = average_grads(&parts);
        opt.update(&mut policy.params, &grads)?;
        if let Some(w) = log.as_mut() {
            let record = StageLogRecord {
                step,
                total: total / n,
                csi_term: csi_term / n,
                far_preservation_term: far_term / n,
                implicit_accuracy: acc / n,
                lambda_t_mean: lambda.iter().sum::<f64>() / n,
                lambda_t_min: lambda.iter().cloned().fold(f64::INFINITY, f64::min),
                lambda_t_max: lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")?;
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    let (role, stage_name) = match stage {
        Stage::FarAlign => (PolicyRole::FarAligned, "far_align"),
        Stage::CsiAlign => (PolicyRole::CsiAligned, "csi_align"),
    };
    Ok(PolicyCheckpoint::new(
        role,
        StageMetadata {
            stage: stage_name.to_string(),
            trained_steps: cfg.steps as u64,
            seed: cfg.seed,
            parent_hash: Some(parent.content_hash()),
        },
        policy,
    ))
}
