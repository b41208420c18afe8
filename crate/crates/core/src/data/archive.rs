//! On-disk dataset archive.
//!
//! Layout: one directory per event containing `frames.bin` (raw little-endian
//! f32, `[T, C, H, W]` order, C-contiguous) and `meta.json`; a top-level
//! `manifest.json` lists event directories per split.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};

use super::{DatasetManifest, EventMeta, EventRecord, RadarSequence, Split};
use crate::error::{Error, Result};

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let f = File::create(root.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), manifest)?;
    Ok(())
}

/// Writes one event directory. Frames are stored de-normalized by
/// `value_scale` so that ingestion reverses it exactly.
pub fn write_event_dir(dir: &Path, record: &EventRecord, value_scale: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let frames = record.sequence.frames();
    let (t, c, h, w) = frames.dim();
    let meta = EventMeta {
        shape: [t, c, h, w],
        interval_minutes: record.sequence.interval_minutes,
        event_id: record.event_id.clone(),
        value_scale,
    };
    let f = File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta)?;
    let raw = frames.mapv(|v| v * value_scale).into_dyn();
    let mut out = BufWriter::new(File::create(dir.join("frames.bin"))?);
    crate::util::write_f32_le(&mut out, &raw)?;
    Ok(())
}

/// A lazily loading dataset handle. Read-only after construction; safe for
/// concurrent iteration.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    /// Opens an archive rooted at `root` by reading `manifest.json`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let f = File::open(&path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Format(format!("malformed manifest.json: {e}")))?;
        manifest.validate()?;
        Ok(Self { root, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn event_dirs(&self, split: Split) -> &[String] {
        self.manifest.event_dirs(split)
    }

    pub fn n_events(&self, split: Split) -> usize {
        self.event_dirs(split).len()
    }

    /// Loads and normalizes a single event by directory name.
    pub fn load_event(&self, dir_name: &str, split: Split) -> Result<EventRecord> {
        let dir = self.root.join(dir_name);
        let meta_path = dir.join("meta.json");
        let f = File::open(&meta_path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", meta_path.display())))?;
        let meta: EventMeta = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Format(format!("malformed header in {}: {e}", meta_path.display())))?;
        let [t, c, h, w] = meta.shape;
        if c != 1 {
            return Err(Error::Format(format!(
                "event {}: expected 1 channel, header says {c}",
                meta.event_id
            )));
        }
        if meta.value_scale <= 0.0 || !meta.value_scale.is_finite() {
            return Err(Error::Format(format!(
                "event {}: invalid value_scale {}",
                meta.event_id, meta.value_scale
            )));
        }
        let mut reader = BufReader::new(File::open(dir.join("frames.bin"))?);
        let raw = crate::util::read_f32_le(&mut reader, &[t, c, h, w])?;
        let mut frames: Array4<f64> = raw
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Format(format!("frames.bin shape: {e}")))?;
        for &v in frames.iter() {
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "event {}: non-finite value in frames",
                    meta.event_id
                )));
            }
        }
        frames.mapv_inplace(|v| v / meta.value_scale);
        let eps = 1e-6;
        for &v in frames.iter() {
            if !(-eps..=1.0 + eps).contains(&v) {
                return Err(Error::data(format!(
                    "event {}: value {v} outside [0, 1] after normalization (check value_scale)",
                    meta.event_id
                )));
            }
        }
        frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
        if let Some([ch, cw]) = self.manifest.crop {
            if ch > h || cw > w {
                return Err(Error::parameter(format!(
                    "crop {ch}x{cw} exceeds frame size {h}x{w}"
                )));
            }
            frames = frames.slice(ndarray::s![.., .., ..ch, ..cw]).to_owned();
        }
        if let Some(k) = self.manifest.downscale {
            if k > 1 {
                frames = area_pool_frames(&frames, k)?;
            }
        }
        let sequence = RadarSequence::new(frames, meta.interval_minutes)?;
        if sequence.n_frames() < self.manifest.context_len + self.manifest.horizon {
            return Err(Error::data(format!(
                "event {}: {} frames, need at least {}",
                meta.event_id,
                sequence.n_frames(),
                self.manifest.context_len + self.manifest.horizon
            )));
        }
        Ok(EventRecord { sequence, event_id: meta.event_id, split })
    }

    /// Lazily iterates a split in manifest order.
    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = Result<EventRecord>> + '_ {
        self.event_dirs(split)
            .iter()
            .map(move |d| self.load_event(d, split))
    }
}

/// Non-overlapping k x k area-average pooling over the spatial axes.
/// Requires divisibility (ingest-time downscaling is configured, not padded).
fn area_pool_frames(frames: &Array4<f64>, k: usize) -> Result<Array4<f64>> {
    let (t, c, h, w) = frames.dim();
    if h % k != 0 || w % k != 0 {
        return Err(Error::parameter(format!(
            "downscale factor {k} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Array4::<f64>::zeros((t, c, oh, ow));
    let norm = 1.0 / (k * k) as f64;
    for ti in 0..t {
        for ci in 0..c {
            let plane = frames.index_axis(Axis(0), ti);
            let plane = plane.index_axis(Axis(0), ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += plane[[oy * k + dy, ox * k + dx]];
                        }
                    }
                    out[[ti, ci, oy, ox]] = s * norm;
                }
            }
        }
    }
    Ok(out)
}
