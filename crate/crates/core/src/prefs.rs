//! Preference pair construction: N+1 candidate forecasts per event, frame
//! scoring, and win/lose assembly under the frame-level, whole-sample, and
//! dual-metric strategies.
//!
//! Candidates are quantized to f32 precision at generation time so that the
//! persisted archive re-scores bit-identically after a round-trip.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::PolicyCheckpoint;
use crate::data::{split_context_target, Dataset, Split};
use crate::diffusion::{sample, DiffusionSchedule, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::metrics::{binarize, contingency, csi, far, ThresholdSet};
use crate::util::{derive_seed, read_f32_le, write_f32_le};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricKind {
    Far,
    Csi,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Far => write!(f, "FAR"),
            MetricKind::Csi => write!(f, "CSI"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    FrameLevel,
    WholeSample,
    DualMetric,
}

/// N sampled forecasts plus their ensemble mean.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// `[1, T', H, W]` context stack.
    pub condition: Array4<f64>,
    /// N+1 tensors `[1, F, H, W]`; index N is the element-wise mean of 0..N.
    pub candidates: Vec<Array4<f64>>,
    pub seeds: Vec<u64>,
}

impl CandidateSet {
    pub fn n_members(&self) -> usize {
        self.seeds.len()
    }
}

/// Per-frame candidate scores; `None` marks an undefined score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameScoreTable {
    /// `[candidate][lead]` mean CSI over thresholds with defined values.
    pub csi_m: Vec<Vec<Option<f64>>>,
    /// `[candidate][lead]` mean FAR over thresholds with defined values.
    pub far_m: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameProvenance {
    pub win: usize,
    pub lose: usize,
    /// True when every candidate's score was undefined at this lead time;
    /// both sides then copy candidate 0.
    pub neutral: bool,
}

#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub condition: Array4<f64>,
    pub y_win: Array4<f64>,
    pub y_lose: Array4<f64>,
    pub metric: MetricKind,
    pub strategy: Strategy,
    /// Frame-level only: per-lead candidate indices.
    pub provenance: Option<Vec<FrameProvenance>>,
}

impl PreferencePair {
    /// Win and lose must differ somewhere; shapes must agree.
    pub fn validate(&self) -> Result<()> {
        if self.y_win.dim() != self.y_lose.dim() {
            return Err(Error::parameter("win/lose shape mismatch"));
        }
        if self
            .y_win
            .iter()
            .zip(self.y_lose.iter())
            .all(|(a, b)| a == b)
        {
            return Err(Error::data("degenerate pair: win equals lose everywhere"));
        }
        Ok(())
    }
}

fn quantize_f32(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v as f32 as f64);
}

/// Runs the sampler N times with recorded seeds and appends the ensemble
/// mean. Deterministic given `sampler_cfg.seed`.
pub fn generate_candidates(
    policy: &PolicyCheckpoint,
    sched: &DiffusionSchedule,
    condition: &Array4<f64>,
    n: usize,
    sampler_cfg: &TrajectoryConfig,
) -> Result<CandidateSet> {
    if n < 2 {
        return Err(Error::parameter(format!("need at least 2 candidates, got {n}")));
    }
    let mut candidates = Vec::with_capacity(n + 1);
    let mut seeds = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(sampler_cfg.seed, i as u64);
        let cfg = TrajectoryConfig { seed, ..sampler_cfg.clone() };
        let mut y = sample(&policy.model, condition, sched, &cfg, policy.model.config.regime)
            .map_err(|e| match e {
                Error::Numeric { step, msg } => Error::Numeric {
                    step,
                    msg: format!("candidate {i}: {msg}"),
                },
                other => other,
            })?;
        y.mapv_inplace(|v| v.clamp(0.0, 1.0));
        quantize_f32(&mut y);
        candidates.push(y);
        seeds.push(seed);
    }
    let mut mean = Array4::<f64>::zeros(candidates[0].dim());
    for c in &candidates {
        mean += c;
    }
    mean.mapv_inplace(|v| v / n as f64);
    quantize_f32(&mut mean);
    candidates.push(mean);
    Ok(CandidateSet { condition: condition.clone(), candidates, seeds })
}

fn frame_scores(
    plane_pred: ndarray::ArrayView2<'_, f64>,
    plane_obs: ndarray::ArrayView2<'_, f64>,
    thresholds: &ThresholdSet,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut csi_vals = Vec::new();
    let mut far_vals = Vec::new();
    for &thr in thresholds.values() {
        let counts = contingency(&binarize(plane_pred, thr), &binarize(plane_obs, thr))?;
        if let Some(v) = csi(&counts) {
            csi_vals.push(v);
        }
        if let Some(v) = far(&counts) {
            far_vals.push(v);
        }
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok((avg(&csi_vals), avg(&far_vals)))
}

/// Scores every candidate frame against the target at the native resolution.
pub fn score_frames(
    cands: &CandidateSet,
    target: &Array4<f64>,
    thresholds: &ThresholdSet,
) -> Result<FrameScoreTable> {
    let n_frames = target.dim().1;
    for c in &cands.candidates {
        if c.dim() != target.dim() {
            return Err(Error::parameter(format!(
                "candidate shape {:?} does not match target {:?}",
                c.dim(),
                target.dim()
            )));
        }
    }
    let mut csi_m = Vec::with_capacity(cands.candidates.len());
    let mut far_m = Vec::with_capacity(cands.candidates.len());
    for c in &cands.candidates {
        let mut row_csi = Vec::with_capacity(n_frames);
        let mut row_far = Vec::with_capacity(n_frames);
        for k in 0..n_frames {
            let (c_k, f_k) = frame_scores(
                c.slice(ndarray::s![0, k, .., ..]),
                target.slice(ndarray::s![0, k, .., ..]),
                thresholds,
            )?;
            row_csi.push(c_k);
            row_far.push(f_k);
        }
        csi_m.push(row_csi);
        far_m.push(row_far);
    }
    Ok(FrameScoreTable { csi_m, far_m })
}

/// Ordering key for candidate ranking. For CSI higher is better and an
/// undefined score ranks below every defined one (no hit evidence); for FAR
/// lower is better and undefined ranks above every defined one (no alarms
/// issued).
fn better(metric: MetricKind, a: Option<f64>, b: Option<f64>) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match metric {
        MetricKind::Csi => match (a, b) {
            (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Equal).reverse(),
            (Some(_), None) => Less,
            (None, Some(_)) => Greater,
            (None, None) => Equal,
        },
        MetricKind::Far => match (a, b) {
            (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Equal),
            (Some(_), None) => Greater,
            (None, Some(_)) => Less,
            (None, None) => Equal,
        },
    }
}

fn table_for<'t>(table: &'t FrameScoreTable, metric: MetricKind) -> &'t Vec<Vec<Option<f64>>> {
    match metric {
        MetricKind::Csi => &table.csi_m,
        MetricKind::Far => &table.far_m,
    }
}

/// Builds a win/lose pair by taking, at each lead time, the best and worst
/// candidate frames under the metric. Ties break toward the lowest index;
/// fully undefined frames copy candidate 0 into both sides.
pub fn assemble_frame_level(
    cands: &CandidateSet,
    table: &FrameScoreTable,
    metric: MetricKind,
) -> Result<PreferencePair> {
    let n_cands = cands.candidates.len();
    let n_frames = cands.candidates[0].dim().1;
    let scores = table_for(table, metric);
    if scores.len() != n_cands || scores.iter().any(|row| row.len() != n_frames) {
        return Err(Error::parameter("score table does not cover all candidates/frames"));
    }
    let mut y_win = cands.candidates[0].clone();
    let mut y_lose = cands.candidates[0].clone();
    let mut provenance = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let all_undefined = (0..n_cands).all(|i| scores[i][k].is_none());
        if all_undefined {
            provenance.push(FrameProvenance { win: 0, lose: 0, neutral: true });
            continue; // already holds candidate 0's frame on both sides
        }
        let mut best = 0usize;
        let mut worst = 0usize;
        for i in 1..n_cands {
            if better(metric, scores[i][k], scores[best][k]) == std::cmp::Ordering::Less {
                best = i;
            }
            if better(metric, scores[i][k], scores[worst][k]) == std::cmp::Ordering::Greater {
                worst = i;
            }
        }
        y_win
            .slice_mut(ndarray::s![0, k, .., ..])
            .assign(&cands.candidates[best].slice(ndarray::s![0, k, .., ..]));
        y_lose
            .slice_mut(ndarray::s![0, k, .., ..])
            .assign(&cands.candidates[worst].slice(ndarray::s![0, k, .., ..]));
        provenance.push(FrameProvenance { win: best, lose: worst, neutral: false });
    }
    Ok(PreferencePair {
        condition: cands.condition.clone(),
        y_win,
        y_lose,
        metric,
        strategy: Strategy::FrameLevel,
        provenance: Some(provenance),
    })
}

/// Sequence-level aggregate score of one candidate (counts micro-averaged
/// over all frames, then mean over thresholds with defined values).
fn sequence_score(
    candidate: &Array4<f64>,
    target: &Array4<f64>,
    thresholds: &ThresholdSet,
    metric: MetricKind,
) -> Result<Option<f64>> {
    let n_frames = target.dim().1;
    let mut vals = Vec::new();
    for &thr in thresholds.values() {
        let mut counts = crate::metrics::ContingencyCounts::default();
        for k in 0..n_frames {
            let c = contingency(
                &binarize(candidate.slice(ndarray::s![0, k, .., ..]), thr),
                &binarize(target.slice(ndarray::s![0, k, .., ..]), thr),
            )?;
            counts.merge(&c);
        }
        let v = match metric {
            MetricKind::Csi => csi(&counts),
            MetricKind::Far => far(&counts),
        };
        if let Some(v) = v {
            vals.push(v);
        }
    }
    Ok(if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

/// Picks the whole best and worst candidate sequences under the metric.
pub fn assemble_whole_sample(
    cands: &CandidateSet,
    target: &Array4<f64>,
    thresholds: &ThresholdSet,
    metric: MetricKind,
) -> Result<PreferencePair> {
    let scores: Vec<Option<f64>> = cands
        .candidates
        .iter()
        .map(|c| sequence_score(c, target, thresholds, metric))
        .collect::<Result<_>>()?;
    let mut best = 0usize;
    let mut worst = 0usize;
    for i in 1..scores.len() {
        if better(metric, scores[i], scores[best]) == std::cmp::Ordering::Less {
            best = i;
        }
        if better(metric, scores[i], scores[worst]) == std::cmp::Ordering::Greater {
            worst = i;
        }
    }
    Ok(PreferencePair {
        condition: cands.condition.clone(),
        y_win: cands.candidates[best].clone(),
        y_lose: cands.candidates[worst].clone(),
        metric,
        strategy: Strategy::WholeSample,
        provenance: None,
    })
}

/// Ranks candidates by both metrics; a win must sit in the top two of both
/// rankings and a lose in the bottom two of both. Returns `None` when no
/// candidate qualifies on either side.
pub fn assemble_dual_metric(
    cands: &CandidateSet,
    target: &Array4<f64>,
    thresholds: &ThresholdSet,
) -> Result<Option<PreferencePair>> {
    let n = cands.candidates.len();
    if n < 4 {
        return Err(Error::parameter("dual-metric selection needs at least 4 candidates"));
    }
    let csi_scores: Vec<Option<f64>> = cands
        .candidates
        .iter()
        .map(|c| sequence_score(c, target, thresholds, MetricKind::Csi))
        .collect::<Result<_>>()?;
    let far_scores: Vec<Option<f64>> = cands
        .candidates
        .iter()
        .map(|c| sequence_score(c, target, thresholds, MetricKind::Far))
        .collect::<Result<_>>()?;
    // rank[i] = position of candidate i when sorted best-first.
    let rank = |scores: &[Option<f64>], metric: MetricKind| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| better(metric, scores[a], scores[b]).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            rank[i] = pos;
        }
        rank
    };
    let csi_rank = rank(&csi_scores, MetricKind::Csi);
    let far_rank = rank(&far_scores, MetricKind::Far);
    let wins: Vec<usize> = (0..n).filter(|&i| csi_rank[i] < 2 && far_rank[i] < 2).collect();
    let loses: Vec<usize> = (0..n)
        .filter(|&i| csi_rank[i] >= n - 2 && far_rank[i] >= n - 2)
        .collect();
    let Some(&win) = wins.iter().min_by_key(|&&i| (csi_rank[i], i)) else {
        return Ok(None);
    };
    let Some(&lose) = loses.iter().max_by_key(|&&i| (csi_rank[i], usize::MAX - i)) else {
        return Ok(None);
    };
    if win == lose {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        condition: cands.condition.clone(),
        y_win: cands.candidates[win].clone(),
        y_lose: cands.candidates[lose].clone(),
        metric: MetricKind::Csi,
        strategy: Strategy::DualMetric,
        provenance: None,
    }))
}

/// Sidecar stored with each persisted pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    pub event_id: String,
    pub metric: MetricKind,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub target_shape: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<FrameProvenance>>,
    /// Per-frame scores of the assembled win/lose sequences.
    pub win_scores: Vec<Option<f64>>,
    pub lose_scores: Vec<Option<f64>>,
}

/// Top-level sidecar for a pair archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub strategy: Strategy,
    pub n_candidates: usize,
    pub base_seed: u64,
    pub thresholds: ThresholdSet,
    pub sampler: TrajectoryConfig,
    pub events: Vec<String>,
    pub skipped: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct PairArchive {
    root: PathBuf,
    pub meta: ArchiveMeta,
}

fn pair_dir_name(metric: MetricKind) -> &'static str {
    match metric {
        MetricKind::Far => "pair_far",
        MetricKind::Csi => "pair_csi",
    }
}

fn write_pair(event_dir: &Path, pair: &PreferencePair, meta: &PairMeta) -> Result<()> {
    let dir = event_dir.join(pair_dir_name(pair.metric));
    std::fs::create_dir_all(&dir)?;
    let mut w = BufWriter::new(File::create(dir.join("win.bin"))?);
    write_f32_le(&mut w, &pair.y_win.clone().into_dyn())?;
    let mut w = BufWriter::new(File::create(dir.join("lose.bin"))?);
    write_f32_le(&mut w, &pair.y_lose.clone().into_dyn())?;
    let f = File::create(dir.join("pair_meta.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), meta)?;
    Ok(())
}

impl PairArchive {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("archive_meta.json");
        let f = File::open(&path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
        let meta: ArchiveMeta = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Format(format!("malformed archive_meta.json: {e}")))?;
        Ok(Self { root, meta })
    }

    pub fn events(&self) -> &[String] {
        &self.meta.events
    }

    pub fn load_pair(&self, event_id: &str, metric: MetricKind) -> Result<(Array4<f64>, Array4<f64>, PairMeta)> {
        let dir = self.root.join(event_id).join(pair_dir_name(metric));
        let f = File::open(dir.join("pair_meta.json"))
            .map_err(|e| Error::Format(format!("event {event_id}: missing pair_meta.json: {e}")))?;
        let meta: PairMeta = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Format(format!("event {event_id}: malformed pair_meta.json: {e}")))?;
        let shape: Vec<usize> = meta.target_shape.to_vec();
        let mut r = BufReader::new(File::open(dir.join("win.bin"))?);
        let win = read_f32_le(&mut r, &shape)?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Format(format!("win.bin shape: {e}")))?;
        let mut r = BufReader::new(File::open(dir.join("lose.bin"))?);
        let lose = read_f32_le(&mut r, &shape)?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Format(format!("lose.bin shape: {e}")))?;
        Ok((win, lose, meta))
    }
}

/// Summary returned by [`build_preference_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairArchiveSummary {
    pub root: PathBuf,
    pub n_events: usize,
    pub n_far_pairs: usize,
    pub n_csi_pairs: usize,
    pub skipped: BTreeMap<String, String>,
}

/// Generates candidates for every event of `split`, assembles one FAR pair
/// and one CSI pair per event under `strategy`, and persists the archive.
///
/// Per-event seeds derive from `base_seed` and the event index, so the
/// archive is reproducible bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn build_preference_dataset(
    policy: &PolicyCheckpoint,
    sched: &DiffusionSchedule,
    dataset: &Dataset,
    split: Split,
    n: usize,
    thresholds: &ThresholdSet,
    strategy: Strategy,
    sampler_cfg: &TrajectoryConfig,
    base_seed: u64,
    out_dir: &Path,
) -> Result<PairArchiveSummary> {
    let event_dirs = dataset.event_dirs(split);
    if event_dirs.is_empty() {
        return Err(Error::config(format!("no events in split {split}")));
    }
    std::fs::create_dir_all(out_dir)?;
    let context_len = dataset.manifest().context_len;

    struct EventOutcome {
        event_id: String,
        pairs: Vec<(PreferencePair, PairMeta)>,
        skip_reason: Option<String>,
    }

    let outcomes: Vec<Result<EventOutcome>> = event_dirs
        .par_iter()
        .enumerate()
        .map(|(idx, dir_name)| -> Result<EventOutcome> {
            let record = dataset.load_event(dir_name, split)?;
            let (ctx_seq, tgt_seq) = split_context_target(&record.sequence, context_len)?;
            let condition = stack_batch(&ctx_seq.to_stack());
            let target = stack_batch(&tgt_seq.to_stack());
            let event_seed = derive_seed(base_seed, idx as u64);
            let cfg = TrajectoryConfig { seed: event_seed, ..sampler_cfg.clone() };
            let cands = generate_candidates(policy, sched, &condition, n, &cfg)
                .map_err(|e| Error::Data(format!("event {}: {e}", record.event_id)))?;
            let table = score_frames(&cands, &target, thresholds)?;

            let mut pairs = Vec::new();
            let mut skip_reason = None;
            match strategy {
                Strategy::FrameLevel => {
                    for metric in [MetricKind::Far, MetricKind::Csi] {
                        let pair = assemble_frame_level(&cands, &table, metric)?;
                        match pair.validate() {
                            Ok(()) => pairs.push(with_meta(pair, &record.event_id, &cands, &table)),
                            Err(e) => skip_reason = Some(format!("{metric}: {e}")),
                        }
                    }
                }
                Strategy::WholeSample => {
                    for metric in [MetricKind::Far, MetricKind::Csi] {
                        let pair = assemble_whole_sample(&cands, &target, thresholds, metric)?;
                        match pair.validate() {
                            Ok(()) => pairs.push(with_meta(pair, &record.event_id, &cands, &table)),
                            Err(e) => skip_reason = Some(format!("{metric}: {e}")),
                        }
                    }
                }
                Strategy::DualMetric => {
                    match assemble_dual_metric(&cands, &target, thresholds)? {
                        Some(pair) if pair.validate().is_ok() => {
                            // The dual-metric winner/loser qualify on both
                            // metrics; persist the same pair under both tags.
                            let mut far_pair = pair.clone();
                            far_pair.metric = MetricKind::Far;
                            pairs.push(with_meta(far_pair, &record.event_id, &cands, &table));
                            pairs.push(with_meta(pair, &record.event_id, &cands, &table));
                        }
                        Some(_) => skip_reason = Some("degenerate dual-metric pair".to_string()),
                        None => skip_reason = Some("no candidate in top/bottom two of both rankings".to_string()),
                    }
                }
            }
            Ok(EventOutcome { event_id: record.event_id, pairs, skip_reason })
        })
        .collect();

    let mut events = Vec::new();
    let mut skipped = BTreeMap::new();
    let mut n_far = 0usize;
    let mut n_csi = 0usize;
    for outcome in outcomes {
        let outcome = outcome?;
        if let Some(reason) = outcome.skip_reason {
            skipped.insert(outcome.event_id.clone(), reason);
            continue;
        }
        let event_dir = out_dir.join(&outcome.event_id);
        for (pair, meta) in &outcome.pairs {
            write_pair(&event_dir, pair, meta)?;
            match pair.metric {
                MetricKind::Far => n_far += 1,
                MetricKind::Csi => n_csi += 1,
            }
        }
        events.push(outcome.event_id);
    }
    let archive_meta = ArchiveMeta {
        strategy,
        n_candidates: n,
        base_seed,
        thresholds: thresholds.clone(),
        sampler: TrajectoryConfig { seed: base_seed, ..sampler_cfg.clone() },
        events: events.clone(),
        skipped: skipped.clone(),
    };
    let f = File::create(out_dir.join("archive_meta.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &archive_meta)?;
    Ok(PairArchiveSummary {
        root: out_dir.to_path_buf(),
        n_events: events.len(),
        n_far_pairs: n_far,
        n_csi_pairs: n_csi,
        skipped,
    })
}

fn with_meta(
    pair: PreferencePair,
    event_id: &str,
    cands: &CandidateSet,
    table: &FrameScoreTable,
) -> (PreferencePair, PairMeta) {
    let n_frames = pair.y_win.dim().1;
    let scores = table_for(table, pair.metric);
    let (win_scores, lose_scores) = match &pair.provenance {
        Some(prov) => (
            prov.iter().enumerate().map(|(k, p)| scores[p.win][k]).collect(),
            prov.iter().enumerate().map(|(k, p)| scores[p.lose][k]).collect(),
        ),
        None => (vec![None; n_frames], vec![None; n_frames]),
    };
    let d = pair.y_win.dim();
    let meta = PairMeta {
        event_id: event_id.to_string(),
        metric: pair.metric,
        strategy: pair.strategy,
        seeds: cands.seeds.clone(),
        target_shape: [d.0, d.1, d.2, d.3],
        provenance: pair.provenance.clone(),
        win_scores,
        lose_scores,
    };
    (pair, meta)
}

/// Lifts a `[T, H, W]` stack into the `[1, T, H, W]` batch form.
pub fn stack_batch(stack: &ndarray::Array3<f64>) -> Array4<f64> {
    let (t, h, w) = stack.dim();
    stack
        .clone()
        .into_shape_with_order((1, t, h, w))
        .expect("contiguous stack")
}
