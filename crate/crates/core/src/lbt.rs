//! Local binary tracklets.
//!
//! A tracklet of `L + 1` points yields `L` motion steps. Each step is hashed
//! to a one-hot polar histogram of `b_o * b_m` bins, the `L` histograms are
//! concatenated into a tracklet code, and codes are summed per
//! spatio-temporal patch to form patch histograms. A frame descriptor is the
//! row-major concatenation of its patch histograms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u64,
    pub start_frame: i64,
    pub points: Vec<(f64, f64)>,
}

impl Tracklet {
    /// Number of motion steps (`points.len() - 1`).
    pub fn length(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn middle_index(&self) -> usize {
        self.length() / 2
    }

    pub fn middle_frame(&self) -> i64 {
        self.start_frame + self.middle_index() as i64
    }

    pub fn middle_point(&self) -> (f64, f64) {
        self.points[self.middle_index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStep {
    /// Orientation in `[-pi, pi]`.
    pub orientation: f64,
    /// Displacement magnitude in pixels/frame.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub orientation_bins: usize,
    pub magnitude_bins: usize,
    pub magnitude_max: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            orientation_bins: 8,
            magnitude_bins: 5,
            magnitude_max: 10.0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orientation_bins < 2 {
            return Err(Error::Config("orientation_bins must be >= 2".into()));
        }
        if self.magnitude_bins < 1 {
            return Err(Error::Config("magnitude_bins must be >= 1".into()));
        }
        if !(self.magnitude_max > 0.0 && self.magnitude_max.is_finite()) {
            return Err(Error::Config("magnitude_max must be positive".into()));
        }
        Ok(())
    }

    pub fn pattern_len(&self) -> usize {
        self.orientation_bins * self.magnitude_bins
    }

    /// Sets the magnitude cap to the given percentile of all step magnitudes
    /// in `tracklets`. Leaves the cap untouched when there is no motion.
    pub fn with_percentile_cap(mut self, tracklets: &[Tracklet], percentile: f64) -> Self {
        let mut mags: Vec<f64> = tracklets
            .iter()
            .flat_map(derive_motion)
            .map(|s| s.magnitude)
            .collect();
        if mags.is_empty() {
            return self;
        }
        mags.sort_by(f64::total_cmp);
        let rank = ((percentile / 100.0) * mags.len() as f64).ceil() as usize;
        let cap = mags[rank.clamp(1, mags.len()) - 1];
        if cap > 0.0 {
            self.magnitude_max = cap;
        }
        self
    }
}

/// One-hot polar histogram of a single motion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionPattern {
    pub bit: usize,
    pub len: usize,
}

/// Concatenated motion patterns of one tracklet, stored as set-bit indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackletCode {
    pub bits: Vec<usize>,
    pub len: usize,
}

impl TrackletCode {
    pub fn popcount(&self) -> usize {
        self.bits.len()
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.len];
        for &b in &self.bits {
            v[b] = 1;
        }
        v
    }
}

pub fn derive_motion(tr: &Tracklet) -> Vec<MotionStep> {
    tr.points
        .windows(2)
        .map(|w| {
            let dx = w[1].0 - w[0].0;
            let dy = w[1].1 - w[0].1;
            let magnitude = dx.hypot(dy);
            let orientation = if magnitude == 0.0 { 0.0 } else { dy.atan2(dx) };
            MotionStep {
                orientation,
                magnitude,
            }
        })
        .collect()
}

pub fn quantize(step: MotionStep, cfg: &QuantizerConfig) -> MotionPattern {
    let bo = cfg.orientation_bins;
    let bm = cfg.magnitude_bins;
    let o_width = 2.0 * PI / bo as f64;
    let o_bin = (((step.orientation + PI) / o_width).floor().max(0.0) as usize).min(bo - 1);
    let m_width = cfg.magnitude_max / bm as f64;
    let m_bin = ((step.magnitude / m_width).floor().max(0.0) as usize).min(bm - 1);
    MotionPattern {
        bit: m_bin * bo + o_bin,
        len: bo * bm,
    }
}

pub fn tracklet_code(tr: &Tracklet, cfg: &QuantizerConfig) -> TrackletCode {
    let plen = cfg.pattern_len();
    let steps = derive_motion(tr);
    TrackletCode {
        bits: steps
            .iter()
            .enumerate()
            .map(|(l, &s)| l * plen + quantize(s, cfg).bit)
            .collect(),
        len: plen * steps.len(),
    }
}

/// Regular rows x cols partition of a `width x height` frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tessellation {
    pub rows: usize,
    pub cols: usize,
    pub width: f64,
    pub height: f64,
}

impl Tessellation {
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major patch index containing `(x, y)`, or `None` outside the frame.
    pub fn patch_of(&self, (x, y): (f64, f64)) -> Option<usize> {
        if !(x >= 0.0 && x < self.width && y >= 0.0 && y < self.height) {
            return None;
        }
        let col = ((x / (self.width / self.cols as f64)) as usize).min(self.cols - 1);
        let row = ((y / (self.height / self.rows as f64)) as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(
                "tessellation needs at least one row and column".into(),
            ));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Config("frame size must be positive".into()));
        }
        Ok(())
    }
}

/// Which tracklet points decide that a tracklet passes a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    #[default]
    MiddlePoint,
    AnyPoint,
}

/// A tracklet together with its code, ready for aggregation.
#[derive(Debug, Clone)]
pub struct EncodedTracklet {
    pub tracklet: Tracklet,
    pub code: TrackletCode,
}

impl EncodedTracklet {
    pub fn new(tracklet: Tracklet, cfg: &QuantizerConfig) -> Self {
        let code = tracklet_code(&tracklet, cfg);
        Self { tracklet, code }
    }

    /// Patches this tracklet passes under `membership`, deduplicated.
    pub fn patches(&self, tess: &Tessellation, membership: Membership) -> Vec<usize> {
        match membership {
            Membership::MiddlePoint => tess
                .patch_of(self.tracklet.middle_point())
                .into_iter()
                .collect(),
            Membership::AnyPoint => {
                let mut v: Vec<usize> = self
                    .tracklet
                    .points
                    .iter()
                    .filter_map(|&p| tess.patch_of(p))
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchHistogram {
    pub frame: i64,
    pub patch: usize,
    pub counts: Vec<u32>,
}

impl PatchHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Sums the codes of all tracklets centred on `frame` that pass `patch`.
pub fn aggregate(
    frame: i64,
    patch: usize,
    tracklets: &[EncodedTracklet],
    tess: &Tessellation,
    membership: Membership,
    code_len: usize,
) -> PatchHistogram {
    let mut counts = vec![0u32; code_len];
    for et in tracklets {
        if et.tracklet.middle_frame() != frame {
            continue;
        }
        if !et.patches(tess, membership).contains(&patch) {
            continue;
        }
        for &b in &et.code.bits {
            counts[b] += 1;
        }
    }
    PatchHistogram {
        frame,
        patch,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    pub frame: i64,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u32>,
}

/// Concatenates patch histograms (given in row-major patch order).
pub fn frame_descriptor(
    frame: i64,
    tess: &Tessellation,
    histograms: &[PatchHistogram],
) -> Result<FrameDescriptor> {
    if histograms.len() != tess.patches() {
        return Err(Error::DimensionMismatch {
            expected: tess.patches(),
            found: histograms.len(),
        });
    }
    let mut values = Vec::new();
    for (s, h) in histograms.iter().enumerate() {
        if h.patch != s || h.frame != frame {
            return Err(Error::InvalidInput(format!(
                "histogram {s} belongs to patch {} of frame {}",
                h.patch, h.frame
            )));
        }
        values.extend_from_slice(&h.counts);
    }
    Ok(FrameDescriptor {
        frame,
        rows: tess.rows,
        cols: tess.cols,
        values,
    })
}

/// Descriptors for frames `first..first + n_frames`, bucketing tracklets by
/// middle frame and patch in one pass.
pub fn frame_descriptors(
    tracklets: &[EncodedTracklet],
    tess: &Tessellation,
    membership: Membership,
    code_len: usize,
    first: i64,
    n_frames: usize,
) -> Vec<FrameDescriptor> {
    let patch_len = code_len;
    let mut out: Vec<FrameDescriptor> = (0..n_frames)
        .map(|i| FrameDescriptor {
            frame: first + i as i64,
            rows: tess.rows,
            cols: tess.cols,
            values: vec![0; tess.patches() * patch_len],
        })
        .collect();
    for et in tracklets {
        debug_assert_eq!(et.code.len, code_len);
        let offset = et.tracklet.middle_frame() - first;
        if offset < 0 || offset as usize >= n_frames {
            continue;
        }
        let desc = &mut out[offset as usize];
        for s in et.patches(tess, membership) {
            let base = s * patch_len;
            for &b in &et.code.bits {
                desc.values[base + b] += 1;
            }
        }
    }
    out
}

/// Sum of frame descriptors over a video.
pub fn video_descriptor(frames: &[FrameDescriptor]) -> Result<Vec<u64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("video has no frames".into()))?;
    let mut acc = vec![0u64; first.values.len()];
    for f in frames {
        if f.rows != first.rows || f.cols != first.cols || f.values.len() != acc.len() {
            return Err(Error::InvalidInput(format!(
                "frame {} uses tessellation {}x{} (expected {}x{})",
                f.frame, f.rows, f.cols, first.rows, first.cols
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&f.values) {
            *a += u64::from(v);
        }
    }
    Ok(acc)
}
