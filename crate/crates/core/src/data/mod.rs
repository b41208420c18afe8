//! Sequence and event types, the synthetic advection generator, and
//! archive ingestion.

mod archive;
mod synthetic;

pub use archive::{write_event_dir, write_manifest, Dataset};
pub use synthetic::{generate_synthetic_event, write_synthetic_archive, AdvectionParams, GenDataConfig};

use std::collections::BTreeMap;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized radar echo sequence: `[T, C, H, W]` with values in `[0, 1]`
/// and a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarSequence {
    frames: Array4<f64>,
    pub interval_minutes: u32,
    pub origin_time: Option<String>,
}

impl RadarSequence {
    /// Validates invariants: all values finite in `[0, 1]`, `C == 1`, `T >= 2`.
    pub fn new(frames: Array4<f64>, interval_minutes: u32) -> Result<Self> {
        let (t, c, _h, _w) = frames.dim();
        if c != 1 {
            return Err(Error::data(format!("expected 1 channel, got {c}")));
        }
        if t < 2 {
            return Err(Error::data(format!("sequence needs at least 2 frames, got {t}")));
        }
        if interval_minutes == 0 {
            return Err(Error::parameter("interval_minutes must be positive"));
        }
        for &v in frames.iter() {
            if !v.is_finite() {
                return Err(Error::data("non-finite value in radar frames".to_string()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("value {v} outside [0, 1]")));
            }
        }
        Ok(Self { frames, interval_minutes, origin_time: None })
    }

    pub fn with_origin(mut self, origin_time: impl Into<String>) -> Self {
        self.origin_time = Some(origin_time.into());
        self
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// (H, W) of each frame.
    pub fn grid(&self) -> (usize, usize) {
        let (_, _, h, w) = self.frames.dim();
        (h, w)
    }

    /// Flattens `[T, 1, H, W]` into a `[T, H, W]`-shaped channel stack used as
    /// model input/output, keeping `T` on the leading axis.
    pub fn to_stack(&self) -> ndarray::Array3<f64> {
        let (t, _, h, w) = self.frames.dim();
        self.frames
            .to_shape((t, h, w))
            .expect("C == 1 by invariant")
            .to_owned()
    }

    /// Rebuilds a sequence from a `[T, H, W]` stack, clamping into `[0, 1]`.
    pub fn from_stack(stack: &ndarray::Array3<f64>, interval_minutes: u32) -> Result<Self> {
        let (t, h, w) = stack.dim();
        let mut frames = Array4::<f64>::zeros((t, 1, h, w));
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    frames[[ti, 0, y, x]] = stack[[ti, y, x]].clamp(0.0, 1.0);
                }
            }
        }
        Self::new(frames, interval_minutes)
    }
}

/// Splits `seq` into the first `context_len` frames and the remainder.
///
/// Concatenating the two halves reproduces the input exactly.
pub fn split_context_target(seq: &RadarSequence, context_len: usize) -> Result<(RadarSequence, RadarSequence)> {
    let t = seq.n_frames();
    if context_len == 0 || context_len >= t {
        return Err(Error::parameter(format!(
            "context_len must be in (0, {t}), got {context_len}"
        )));
    }
    let ctx = seq.frames.slice(ndarray::s![..context_len, .., .., ..]).to_owned();
    let tgt = seq.frames.slice(ndarray::s![context_len.., .., .., ..]).to_owned();
    // Context with a single frame is legal here even though a standalone
    // sequence requires T >= 2, so bypass the constructor for the halves.
    let mk = |frames: Array4<f64>| RadarSequence {
        frames,
        interval_minutes: seq.interval_minutes,
        origin_time: seq.origin_time.clone(),
    };
    Ok((mk(ctx), mk(tgt)))
}

/// Concatenates context and target along the time axis.
pub fn concat_frames(context: &RadarSequence, target: &RadarSequence) -> Result<RadarSequence> {
    let frames = ndarray::concatenate(
        ndarray::Axis(0),
        &[context.frames.view(), target.frames.view()],
    )
    .map_err(|e| Error::parameter(format!("cannot concatenate: {e}")))?;
    RadarSequence::new(frames, context.interval_minutes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::parameter(format!("unknown split '{other}'"))),
        }
    }
}

/// One event: a sequence plus identity and split assignment.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub sequence: RadarSequence,
    pub event_id: String,
    pub split: Split,
}

/// Dataset-level description persisted as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub context_len: usize,
    pub horizon: usize,
    pub value_scale: f64,
    /// Optional top-left crop `[H, W]` applied before downscaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 2]>,
    /// Optional area-average pooling factor applied after cropping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downscale: Option<usize>,
    /// Event directory names per split.
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.horizon == 0 {
            return Err(Error::parameter("context_len and horizon must be positive"));
        }
        if self.value_scale <= 0.0 || !self.value_scale.is_finite() {
            return Err(Error::parameter("value_scale must be positive and finite"));
        }
        if let Some(k) = self.downscale {
            if k == 0 {
                return Err(Error::parameter("downscale factor must be positive"));
            }
        }
        Ok(())
    }

    pub fn event_dirs(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Per-event sidecar persisted as `meta.json` next to `frames.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventMeta {
    pub shape: [usize; 4],
    pub interval_minutes: u32,
    pub event_id: String,
    pub value_scale: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn seq(t: usize) -> RadarSequence {
        let frames = Array4::from_elem((t, 1, 4, 4), 0.5);
        RadarSequence::new(frames, 10).unwrap()
    }

    #[test]
    fn rejects_multichannel() {
        let frames = Array4::from_elem((4, 2, 4, 4), 0.5);
        assert!(RadarSequence::new(frames, 10).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        let mut frames = Array4::from_elem((4, 1, 4, 4), 0.5);
        frames[[0, 0, 0, 0]] = 1.5;
        assert!(RadarSequence::new(frames, 10).is_err());
        let mut frames = Array4::from_elem((4, 1, 4, 4), 0.5);
        frames[[1, 0, 2, 2]] = f64::NAN;
        assert!(RadarSequence::new(frames, 10).is_err());
    }

    #[test]
    fn rejects_short_sequences() {
        let frames = Array4::from_elem((1, 1, 4, 4), 0.5);
        assert!(RadarSequence::new(frames, 10).is_err());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let s = seq(16);
        let (ctx, tgt) = split_context_target(&s, 6).unwrap();
        assert_eq!(ctx.n_frames(), 6);
        assert_eq!(tgt.n_frames(), 10);
        let rebuilt = concat_frames(&ctx, &tgt).unwrap();
        assert_eq!(rebuilt.frames(), s.frames());
    }

    #[test]
    fn split_rejects_out_of_range_context() {
        let s = seq(8);
        assert!(split_context_target(&s, 0).is_err());
        assert!(split_context_target(&s, 8).is_err());
        assert!(split_context_target(&s, 9).is_err());
    }
}
