//! Thresholded categorical verification scores (CSI, FAR, HSS), multi-scale
//! pooled variants, aggregate CSI-M/FAR-M, and ensemble CRPS.
//!
//! All operations are pure functions on immutable inputs. Counts are
//! micro-averaged: summed over frames and events first, ratios computed
//! from the aggregate. A score whose denominator is zero is undefined and
//! excluded from CSI-M/FAR-M averaging.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::RadarSequence;
use crate::error::{Error, Result};

/// Pool sizes reported alongside the native resolution.
pub const POOL_SIZES: [usize; 3] = [1, 4, 16];

/// Per-threshold 2x2 contingency table cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn merge(&mut self, other: &ContingencyCounts) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
    }
}

/// Critical Success Index: H / (H + M + F). Undefined when H + M + F = 0.
pub fn csi(c: &ContingencyCounts) -> Option<f64> {
    let denom = c.hits + c.misses + c.false_alarms;
    if denom == 0 {
        None
    } else {
        Some(c.hits as f64 / denom as f64)
    }
}

/// False Alarm Ratio: F / (H + F). Undefined when H + F = 0.
pub fn far(c: &ContingencyCounts) -> Option<f64> {
    let denom = c.hits + c.false_alarms;
    if denom == 0 {
        None
    } else {
        Some(c.false_alarms as f64 / denom as f64)
    }
}

/// Heidke Skill Score:
/// 2(H*CN - M*F) / ((H+M)(M+CN) + (H+F)(F+CN)). Undefined when the
/// denominator is 0.
pub fn hss(c: &ContingencyCounts) -> Option<f64> {
    let (h, m, f, cn) = (
        c.hits as f64,
        c.misses as f64,
        c.false_alarms as f64,
        c.correct_negatives as f64,
    );
    let denom = (h + m) * (m + cn) + (h + f) * (f + cn);
    if denom == 0.0 {
        None
    } else {
        Some(2.0 * (h * cn - m * f) / denom)
    }
}

/// A strictly ascending set of thresholds in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::parameter("threshold set must be nonempty"));
        }
        for pair in thresholds.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::parameter("thresholds must be strictly ascending"));
            }
        }
        for &t in &thresholds {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::parameter(format!("threshold {t} not in (0, 1)")));
            }
        }
        Ok(Self(thresholds))
    }

    /// VIL levels {16, 74, 133, 160, 181, 219} on a 0-255 scale, normalized.
    pub fn sevir_levels() -> Self {
        Self::new([16.0, 74.0, 133.0, 160.0, 181.0, 219.0].iter().map(|v| v / 255.0).collect())
            .expect("static thresholds valid")
    }

    /// Default levels sized to the synthetic generator's intensity range.
    pub fn synthetic_default() -> Self {
        Self::new(vec![0.2, 0.4, 0.6]).expect("static thresholds valid")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ThresholdSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ThresholdSet::new(v)
    }
}

impl From<ThresholdSet> for Vec<f64> {
    fn from(t: ThresholdSet) -> Vec<f64> {
        t.0
    }
}

/// field[i] >= threshold, elementwise.
pub fn binarize(field: ArrayView2<'_, f64>, threshold: f64) -> Array2<bool> {
    field.mapv(|v| v >= threshold)
}

/// Counts hits/misses/false-alarms/correct-negatives of `pred` against `obs`.
pub fn contingency(pred: &Array2<bool>, obs: &Array2<bool>) -> Result<ContingencyCounts> {
    if pred.dim() != obs.dim() {
        return Err(Error::parameter(format!(
            "shape mismatch: pred {:?} vs obs {:?}",
            pred.dim(),
            obs.dim()
        )));
    }
    let mut c = ContingencyCounts::default();
    for (&p, &o) in pred.iter().zip(obs.iter()) {
        match (p, o) {
            (true, true) => c.hits += 1,
            (true, false) => c.false_alarms += 1,
            (false, true) => c.misses += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

/// Non-overlapping k x k mean pooling; k = 1 is the identity. Fields whose
/// sides do not divide k are reflect-padded up to the next multiple.
pub fn pool(field: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::parameter("pool size must be positive"));
    }
    if k == 1 {
        return Ok(field.to_owned());
    }
    let (h, w) = field.dim();
    let padded;
    let view = if h % k == 0 && w % k == 0 {
        field
    } else {
        padded = reflect_pad(field, h.div_ceil(k) * k, w.div_ceil(k) * k);
        padded.view()
    };
    let (ph, pw) = view.dim();
    let (oh, ow) = (ph / k, pw / k);
    let mut out = Array2::<f64>::zeros((oh, ow));
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += view[[oy * k + dy, ox * k + dx]];
                }
            }
            out[[oy, ox]] = s * norm;
        }
    }
    Ok(out)
}

/// Reflects (without repeating the edge sample) to reach `(th, tw)`.
fn reflect_pad(field: ArrayView2<'_, f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = field.dim();
    let mut out = Array2::<f64>::zeros((th, tw));
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            // mirror about the last sample: n-2, n-3, ...
            let over = i - n;
            n.saturating_sub(2 + over).min(n - 1)
        }
    };
    for y in 0..th {
        for x in 0..tw {
            out[[y, x]] = field[[reflect(y, h), reflect(x, w)]];
        }
    }
    out
}

/// How the pairwise CRPS term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrpsForm {
    /// Pairwise term divided by m^2; a single member degenerates to MAE.
    #[default]
    MemberSquared,
    /// Unbiased ("fair") form dividing by m(m-1); falls back to MAE at m = 1.
    Fair,
}

/// Empirical ensemble CRPS of member grids against an observed grid,
/// averaged over pixels.
pub fn crps(ensemble: &[ArrayView2<'_, f64>], obs: ArrayView2<'_, f64>, form: CrpsForm) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::parameter("CRPS needs a nonempty ensemble"));
    }
    for member in ensemble {
        if member.dim() != obs.dim() {
            return Err(Error::parameter(format!(
                "shape mismatch: member {:?} vs obs {:?}",
                member.dim(),
                obs.dim()
            )));
        }
    }
    let m = ensemble.len();
    let (h, w) = obs.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let o = obs[[y, x]];
            let mut dist_obs = 0.0;
            for member in ensemble {
                dist_obs += (member[[y, x]] - o).abs();
            }
            dist_obs /= m as f64;
            let mut dist_pair = 0.0;
            if m > 1 {
                for i in 0..m {
                    for j in 0..m {
                        dist_pair += (ensemble[i][[y, x]] - ensemble[j][[y, x]]).abs();
                    }
                }
                let denom = match form {
                    CrpsForm::MemberSquared => (m * m) as f64,
                    CrpsForm::Fair => (m * (m - 1)) as f64,
                };
                dist_pair /= denom;
            }
            total += dist_obs - 0.5 * dist_pair;
        }
    }
    Ok(total / (h * w) as f64)
}

/// CSI/FAR/HSS of one contingency table; `None` marks an undefined score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoricalScores {
    pub csi: Option<f64>,
    pub far: Option<f64>,
    pub hss: Option<f64>,
}

impl From<&ContingencyCounts> for CategoricalScores {
    fn from(c: &ContingencyCounts) -> Self {
        Self { csi: csi(c), far: far(c), hss: hss(c) }
    }
}

/// Per-lead-time score breakdown at the native resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeadScores {
    pub lead: usize,
    pub csi_m: Option<f64>,
    pub far_m: Option<f64>,
    pub hss: Option<f64>,
    pub crps: f64,
}

/// Aggregate verification report.
///
/// `per_threshold` holds native-resolution scores; `pooled` holds one
/// per-threshold map for each pool size (1, 4, 16); `csi_m`, `far_m`, `hss`
/// are unweighted means over thresholds with defined values at pool 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub per_threshold: BTreeMap<String, CategoricalScores>,
    pub pooled: BTreeMap<String, BTreeMap<String, CategoricalScores>>,
    pub csi_m: Option<f64>,
    pub far_m: Option<f64>,
    pub hss: Option<f64>,
    pub crps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_lead_time: Option<Vec<LeadScores>>,
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Stable string key for a threshold (used in serialized maps).
pub fn threshold_key(t: f64) -> String {
    format!("{t:.6}")
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Accumulates contingency counts and CRPS across events, then renders a
/// [`ScoreReport`] from the aggregate.
#[derive(Debug, Clone)]
pub struct Scorer {
    thresholds: ThresholdSet,
    crps_form: CrpsForm,
    /// counts[pool_idx][threshold_idx][lead]
    counts: Vec<Vec<Vec<ContingencyCounts>>>,
    crps_sum_per_lead: Vec<f64>,
    n_frames_per_lead: Vec<u64>,
    n_leads: Option<usize>,
}

impl Scorer {
    pub fn new(thresholds: ThresholdSet) -> Self {
        Self {
            thresholds,
            crps_form: CrpsForm::default(),
            counts: Vec::new(),
            crps_sum_per_lead: Vec::new(),
            n_frames_per_lead: Vec::new(),
            n_leads: None,
        }
    }

    pub fn with_crps_form(mut self, form: CrpsForm) -> Self {
        self.crps_form = form;
        self
    }

    fn ensure_leads(&mut self, n_leads: usize) -> Result<()> {
        match self.n_leads {
            None => {
                self.n_leads = Some(n_leads);
                self.counts = vec![
                    vec![vec![ContingencyCounts::default(); n_leads]; self.thresholds.len()];
                    POOL_SIZES.len()
                ];
                self.crps_sum_per_lead = vec![0.0; n_leads];
                self.n_frames_per_lead = vec![0; n_leads];
                Ok(())
            }
            Some(n) if n == n_leads => Ok(()),
            Some(n) => Err(Error::parameter(format!(
                "inconsistent horizon: scorer has {n} leads, event has {n_leads}"
            ))),
        }
    }

    /// Adds one event. `members` is the forecast ensemble (at least one
    /// member); categorical scores use the first member, CRPS uses all.
    pub fn add_event(&mut self, members: &[&RadarSequence], obs: &RadarSequence) -> Result<()> {
        if members.is_empty() {
            return Err(Error::parameter("at least one prediction member required"));
        }
        for m in members {
            if m.frames().dim() != obs.frames().dim() {
                return Err(Error::parameter(format!(
                    "shape mismatch: pred {:?} vs obs {:?}",
                    m.frames().dim(),
                    obs.frames().dim()
                )));
            }
        }
        let n_leads = obs.n_frames();
        self.ensure_leads(n_leads)?;
        for lead in 0..n_leads {
            let obs_plane = obs.frames().slice(ndarray::s![lead, 0, .., ..]);
            let pred_plane = members[0].frames().slice(ndarray::s![lead, 0, .., ..]);
            for (pi, &k) in POOL_SIZES.iter().enumerate() {
                let pp = pool(pred_plane, k)?;
                let po = pool(obs_plane, k)?;
                for (ti, &thr) in self.thresholds.values().iter().enumerate() {
                    let c = contingency(&binarize(pp.view(), thr), &binarize(po.view(), thr))?;
                    self.counts[pi][ti][lead].merge(&c);
                }
            }
            let member_planes: Vec<_> = members
                .iter()
                .map(|m| m.frames().slice(ndarray::s![lead, 0, .., ..]))
                .collect();
            self.crps_sum_per_lead[lead] += crps(&member_planes, obs_plane, self.crps_form)?;
            self.n_frames_per_lead[lead] += 1;
        }
        Ok(())
    }

    /// Merges the counts of another scorer (same thresholds and horizon).
    pub fn merge(&mut self, other: &Scorer) -> Result<()> {
        if other.n_leads.is_none() {
            return Ok(());
        }
        self.ensure_leads(other.n_leads.unwrap())?;
        for (pi, per_thr) in other.counts.iter().enumerate() {
            for (ti, per_lead) in per_thr.iter().enumerate() {
                for (lead, c) in per_lead.iter().enumerate() {
                    self.counts[pi][ti][lead].merge(c);
                }
            }
        }
        for (lead, v) in other.crps_sum_per_lead.iter().enumerate() {
            self.crps_sum_per_lead[lead] += v;
        }
        for (lead, n) in other.n_frames_per_lead.iter().enumerate() {
            self.n_frames_per_lead[lead] += n;
        }
        Ok(())
    }

    fn aggregate_counts(&self, pool_idx: usize, thr_idx: usize) -> ContingencyCounts {
        let mut c = ContingencyCounts::default();
        for lead_counts in &self.counts[pool_idx][thr_idx] {
            c.merge(lead_counts);
        }
        c
    }

    pub fn finish(&self) -> Result<ScoreReport> {
        let n_leads = self
            .n_leads
            .ok_or_else(|| Error::parameter("no events scored"))?;
        let mut pooled = BTreeMap::new();
        let mut per_threshold = BTreeMap::new();
        for (pi, &k) in POOL_SIZES.iter().enumerate() {
            let mut map = BTreeMap::new();
            for (ti, &thr) in self.thresholds.values().iter().enumerate() {
                let counts = self.aggregate_counts(pi, ti);
                map.insert(threshold_key(thr), CategoricalScores::from(&counts));
            }
            if k == 1 {
                per_threshold = map.clone();
            }
            pooled.insert(k.to_string(), map);
        }
        let csi_m = mean_defined(per_threshold.values().map(|s| s.csi));
        let far_m = mean_defined(per_threshold.values().map(|s| s.far));
        let hss_m = mean_defined(per_threshold.values().map(|s| s.hss));
        let total_frames: u64 = self.n_frames_per_lead.iter().sum();
        let total_crps: f64 = self.crps_sum_per_lead.iter().sum();
        let crps = if total_frames == 0 { 0.0 } else { total_crps / total_frames as f64 };

        let mut per_lead = Vec::with_capacity(n_leads);
        for lead in 0..n_leads {
            let mut csi_vals = Vec::new();
            let mut far_vals = Vec::new();
            let mut hss_vals = Vec::new();
            for ti in 0..self.thresholds.len() {
                let c = &self.counts[0][ti][lead];
                csi_vals.push(csi(c));
                far_vals.push(far(c));
                hss_vals.push(hss(c));
            }
            let n = self.n_frames_per_lead[lead].max(1) as f64;
            per_lead.push(LeadScores {
                lead,
                csi_m: mean_defined(csi_vals.into_iter()),
                far_m: mean_defined(far_vals.into_iter()),
                hss: mean_defined(hss_vals.into_iter()),
                crps: self.crps_sum_per_lead[lead] / n,
            });
        }

        Ok(ScoreReport {
            per_threshold,
            pooled,
            csi_m,
            far_m,
            hss: hss_m,
            crps,
            per_lead_time: Some(per_lead),
        })
    }
}

/// Scores a single event: ensemble (or single) prediction against
/// observations. See [`Scorer`] for multi-event aggregation.
pub fn score_sequences(
    members: &[&RadarSequence],
    obs: &RadarSequence,
    thresholds: &ThresholdSet,
) -> Result<ScoreReport> {
    let mut scorer = Scorer::new(thresholds.clone());
    scorer.add_event(members, obs)?;
    scorer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn binarize_basics() {
        let f = Array2::from_shape_vec((1, 3), vec![0.2, 0.5, 0.9]).unwrap();
        let b = binarize(f.view(), 0.5);
        assert_eq!(b.as_slice().unwrap(), &[false, true, true]);
        let above = binarize(f.view(), 0.95);
        assert!(above.iter().all(|&v| !v));
        // Idempotent on {0,1} fields at 0.5.
        let bits = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 1.0]).unwrap();
        let once = binarize(bits.view(), 0.5);
        let again = binarize(once.mapv(|v| if v { 1.0 } else { 0.0 }).view(), 0.5);
        assert_eq!(once, again);
    }

    #[test]
    fn contingency_corners() {
        let t = Array2::from_elem((2, 2), true);
        let f = Array2::from_elem((2, 2), false);
        let c = contingency(&t, &t).unwrap();
        assert_eq!((c.hits, c.misses, c.false_alarms, c.correct_negatives), (4, 0, 0, 0));
        let c = contingency(&t, &f).unwrap();
        assert_eq!(c.false_alarms, 4);
        assert!(contingency(&t, &Array2::from_elem((2, 3), true)).is_err());
    }

    #[test]
    fn contingency_matches_pixel_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.5));
            let obs = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.5));
            let fast = contingency(&pred, &obs).unwrap();
            let mut slow = ContingencyCounts::default();
            for y in 0..8 {
                for x in 0..8 {
                    match (pred[[y, x]], obs[[y, x]]) {
                        (true, true) => slow.hits += 1,
                        (true, false) => slow.false_alarms += 1,
                        (false, true) => slow.misses += 1,
                        (false, false) => slow.correct_negatives += 1,
                    }
                }
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn csi_far_hss_formulas() {
        let c = ContingencyCounts { hits: 3, misses: 1, false_alarms: 1, correct_negatives: 0 };
        assert!((csi(&c).unwrap() - 0.6).abs() < 1e-12);
        let c = ContingencyCounts { hits: 3, false_alarms: 1, ..Default::default() };
        assert!((far(&c).unwrap() - 0.25).abs() < 1e-12);
        let c = ContingencyCounts { hits: 0, misses: 5, false_alarms: 5, correct_negatives: 0 };
        assert_eq!(csi(&c), Some(0.0));
        assert_eq!(far(&c), Some(1.0));
        // Degenerate denominators are undefined.
        let empty = ContingencyCounts { correct_negatives: 4, ..Default::default() };
        assert_eq!(csi(&empty), None);
        assert_eq!(far(&empty), None);
        // Perfect forecast.
        let perfect = ContingencyCounts { hits: 5, correct_negatives: 5, ..Default::default() };
        assert_eq!(hss(&perfect), Some(1.0));
        // Anti-perfect: pred = !obs.
        let anti = ContingencyCounts { misses: 4, false_alarms: 4, ..Default::default() };
        assert_eq!(hss(&anti), Some(-1.0));
    }

    #[test]
    fn hss_matches_reference_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c = ContingencyCounts {
                hits: rng.random_range(0..20),
                misses: rng.random_range(0..20),
                false_alarms: rng.random_range(0..20),
                correct_negatives: rng.random_range(0..20),
            };
            let (h, m, f, cn) =
                (c.hits as f64, c.misses as f64, c.false_alarms as f64, c.correct_negatives as f64);
            let denom = (h + m) * (m + cn) + (h + f) * (f + cn);
            let expected = if denom == 0.0 { None } else { Some(2.0 * (h * cn - m * f) / denom) };
            assert_eq!(hss(&c), expected);
        }
    }

    #[test]
    fn pool_identity_and_blocks() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let f = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        assert_eq!(pool(f.view(), 1).unwrap(), f);
        let p = pool(f.view(), 4).unwrap();
        assert_eq!(p.dim(), (2, 2));
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += f[[oy * 4 + dy, ox * 4 + dx]];
                    }
                }
                assert!((p[[oy, ox]] - s / 16.0).abs() < 1e-12);
            }
        }
        // Constant field pools to the constant at any size (with padding).
        let c = Array2::from_elem((10, 10), 0.37);
        for k in [1, 4, 16] {
            let p = pool(c.view(), k).unwrap();
            assert!(p.iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn crps_single_member_is_mae() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..1.0));
            let b = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..1.0));
            let mae = a
                .iter()
                .zip(b.iter())
                .map(|(x, y): (&f64, &f64)| (x - y).abs())
                .sum::<f64>()
                / 25.0;
            let c = crps(&[a.view()], b.view(), CrpsForm::MemberSquared).unwrap();
            assert!((c - mae).abs() < 1e-12);
            // Duplicated members leave the score unchanged.
            let c2 = crps(&[a.view(), a.view(), a.view()], b.view(), CrpsForm::MemberSquared).unwrap();
            assert!((c2 - mae).abs() < 1e-12);
        }
    }

    #[test]
    fn crps_matches_cdf_integral() {
        // Numerical integration of (F(z) - 1{y <= z})^2 over a fine grid.
        let members = [
            Array2::from_shape_vec((2, 2), vec![0.1, 0.4, 0.8, 0.3]).unwrap(),
            Array2::from_shape_vec((2, 2), vec![0.2, 0.9, 0.7, 0.2]).unwrap(),
            Array2::from_shape_vec((2, 2), vec![0.6, 0.5, 0.75, 0.5]).unwrap(),
        ];
        let obs = Array2::from_shape_vec((2, 2), vec![0.25, 0.55, 0.9, 0.1]).unwrap();
        let views: Vec<_> = members.iter().map(|m| m.view()).collect();
        let fast = crps(&views, obs.view(), CrpsForm::MemberSquared).unwrap();

        let n_grid = 400_000usize;
        let (lo, hi) = (-0.5, 1.5);
        let dz = (hi - lo) / n_grid as f64;
        let mut total = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let o: f64 = obs[[y, x]];
                let mut acc = 0.0;
                for g in 0..n_grid {
                    let z = lo + (g as f64 + 0.5) * dz;
                    let f = members.iter().filter(|m| m[[y, x]] <= z).count() as f64 / 3.0;
                    let h = if o <= z { 1.0 } else { 0.0 };
                    acc += (f - h) * (f - h) * dz;
                }
                total += acc;
            }
        }
        let oracle = total / 4.0;
        assert!((fast - oracle).abs() < 1e-3, "fast {fast} vs oracle {oracle}");
    }

    fn seq_from(vals: Array4<f64>) -> RadarSequence {
        RadarSequence::new(vals, 10).unwrap()
    }

    #[test]
    fn perfect_forecast_scores() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let frames = Array4::from_shape_fn((4, 1, 8, 8), |_| rng.random_range(0.0..1.0));
        let obs = seq_from(frames.clone());
        let pred = seq_from(frames);
        let report =
            score_sequences(&[&pred], &obs, &ThresholdSet::synthetic_default()).unwrap();
        assert_eq!(report.csi_m, Some(1.0));
        assert_eq!(report.far_m, Some(0.0));
        assert_eq!(report.hss, Some(1.0));
        assert!(report.crps < 1e-12);
    }

    #[test]
    fn all_zero_prediction_has_zero_csi() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let frames = Array4::from_shape_fn((4, 1, 8, 8), |_| rng.random_range(0.3..1.0));
        let obs = seq_from(frames);
        let pred = seq_from(Array4::from_elem((4, 1, 8, 8), 0.0));
        let report = score_sequences(&[&pred], &obs, &ThresholdSet::synthetic_default()).unwrap();
        for scores in report.per_threshold.values() {
            assert_eq!(scores.csi, Some(0.0));
        }
    }

    #[test]
    fn aggregation_matches_pixel_loop_oracle() {
        // Two toy events scored together must equal a per-pixel loop over the
        // union of all pixels.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let thresholds = ThresholdSet::synthetic_default();
        let ev: Vec<(RadarSequence, RadarSequence)> = (0..2)
            .map(|_| {
                let p = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random_range(0.0..1.0));
                let o = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random_range(0.0..1.0));
                (seq_from(p), seq_from(o))
            })
            .collect();
        let mut scorer = Scorer::new(thresholds.clone());
        for (p, o) in &ev {
            scorer.add_event(&[p], o).unwrap();
        }
        let report = scorer.finish().unwrap();

        for &thr in thresholds.values() {
            let mut c = ContingencyCounts::default();
            for (p, o) in &ev {
                for (pv, ov) in p.frames().iter().zip(o.frames().iter()) {
                    match (*pv >= thr, *ov >= thr) {
                        (true, true) => c.hits += 1,
                        (true, false) => c.false_alarms += 1,
                        (false, true) => c.misses += 1,
                        (false, false) => c.correct_negatives += 1,
                    }
                }
            }
            let got = &report.per_threshold[&threshold_key(thr)];
            assert_eq!(got.csi, csi(&c));
            assert_eq!(got.far, far(&c));
            assert_eq!(got.hss, hss(&c));
        }
    }

    #[test]
    fn report_json_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let frames = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0));
        let obs = seq_from(frames.clone());
        let pred = seq_from(frames.mapv(|v| (v * 0.9).clamp(0.0, 1.0)));
        let report = score_sequences(&[&pred], &obs, &ThresholdSet::synthetic_default()).unwrap();
        let json = report.to_json().unwrap();
        let back = ScoreReport::from_json(&json).unwrap();
        assert_eq!(report, back);
    }

    proptest! {
        #[test]
        fn score_ranges(h in 0u64..100, m in 0u64..100, f in 0u64..100, cn in 0u64..100) {
            let c = ContingencyCounts { hits: h, misses: m, false_alarms: f, correct_negatives: cn };
            if let Some(v) = csi(&c) { prop_assert!((0.0..=1.0).contains(&v)); }
            if let Some(v) = far(&c) { prop_assert!((0.0..=1.0).contains(&v)); }
            if let Some(v) = hss(&c) { prop_assert!(v <= 1.0 + 1e-12); }
        }

        #[test]
        fn far_monotone_csi_antitone_in_false_alarms(
            h in 0u64..50, m in 0u64..50, f in 0u64..50, cn in 0u64..50, extra in 1u64..50
        ) {
            let base = ContingencyCounts { hits: h, misses: m, false_alarms: f, correct_negatives: cn };
            let more = ContingencyCounts { false_alarms: f + extra, ..base };
            if let (Some(a), Some(b)) = (far(&base), far(&more)) {
                prop_assert!(b >= a - 1e-12);
            }
            if let (Some(a), Some(b)) = (csi(&base), csi(&more)) {
                prop_assert!(b <= a + 1e-12);
            }
        }

        #[test]
        fn pooling_preserves_mean_when_divisible(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
            for k in [1usize, 4, 16] {
                let p = pool(f.view(), k).unwrap();
                let mean_f = f.iter().sum::<f64>() / f.len() as f64;
                let mean_p = p.iter().sum::<f64>() / p.len() as f64;
                prop_assert!((mean_f - mean_p).abs() < 1e-12);
            }
        }
    }
}
