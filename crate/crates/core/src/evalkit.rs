//! Detection metrics and evaluation protocols.
//!
//! Scores are "larger = more abnormal"; label `true` marks an abnormal
//! sample.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::PixelMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                found: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("scores must be finite".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_pairs(pairs: &[(f64, bool)]) -> Result<Self> {
        Self::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Sweeps thresholds over `+inf`, the midpoints between consecutive unique
/// scores, and `-inf`. A sample is predicted abnormal when its score is
/// strictly above the threshold.
pub fn roc(set: &ScoreSet) -> Result<RocCurve> {
    let (n_pos, n_neg) = set.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both normal and abnormal samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match order.get(i) {
            Some(&next) => 0.5 * (s + set.scores[next]),
            None => f64::NEG_INFINITY,
        };
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve { points })
}

pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
        .sum()
}

/// Operating point where the false-positive rate equals the miss rate,
/// linearly interpolated between the bracketing ROC points.
pub fn eer(curve: &RocCurve) -> f64 {
    // g = fpr - (1 - tpr) is non-decreasing along the curve, from -1 to +1
    let g = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in curve.points.windows(2) {
        let (g0, g1) = (g(&w[0]), g(&w[1]));
        if g0 <= 0.0 && g1 >= 0.0 {
            if g1 == g0 {
                return w[0].fpr;
            }
            let f = -g0 / (g1 - g0);
            return w[0].fpr + f * (w[1].fpr - w[0].fpr);
        }
    }
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auc: f64,
    pub eer: f64,
    pub roc_points: Vec<RocPoint>,
}

pub fn evaluate(set: &ScoreSet) -> Result<Evaluation> {
    let curve = roc(set)?;
    Ok(Evaluation {
        auc: auc(&curve),
        eer: eer(&curve),
        roc_points: curve.points,
    })
}

/// Frame score is the largest cell value of the frame's map.
pub fn frame_scores(maps: &[Vec<f64>]) -> Vec<f64> {
    maps.iter()
        .map(|m| m.iter().copied().fold(0.0f64, f64::max))
        .collect()
}

pub fn frame_level(maps: &[Vec<f64>], labels: &[bool]) -> Result<ScoreSet> {
    if maps.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: maps.len(),
        });
    }
    ScoreSet::new(frame_scores(maps), labels.to_vec())
}

/// A frame is abnormal at `threshold` when any cell exceeds it.
pub fn frame_predictions(maps: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    maps.iter()
        .map(|m| m.iter().any(|&v| v > threshold))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelDecision {
    TruePositive,
    FalsePositive,
    /// No detection in the frame.
    Negative,
    /// Neither detection nor ground truth.
    Excluded,
}

/// Minimum fraction of ground-truth abnormal pixels a detection must cover
/// (as `COVERAGE_NUM / COVERAGE_DEN`) to be a true positive.
pub const COVERAGE_NUM: usize = 2;
pub const COVERAGE_DEN: usize = 5;

pub fn pixel_decision(detection: &PixelMask, truth: &PixelMask) -> Result<PixelDecision> {
    if detection.width != truth.width || detection.height != truth.height {
        return Err(Error::DimensionMismatch {
            expected: truth.width * truth.height,
            found: detection.width * detection.height,
        });
    }
    let det = detection.count();
    let gt = truth.count();
    if det == 0 {
        return Ok(if gt == 0 {
            PixelDecision::Excluded
        } else {
            PixelDecision::Negative
        });
    }
    if gt == 0 {
        return Ok(PixelDecision::FalsePositive);
    }
    let covered = detection
        .pixels
        .iter()
        .zip(&truth.pixels)
        .filter(|(&d, &t)| d && t)
        .count();
    // integer comparison keeps the 40% boundary exact
    Ok(if covered * COVERAGE_DEN >= gt * COVERAGE_NUM {
        PixelDecision::TruePositive
    } else {
        PixelDecision::FalsePositive
    })
}

pub fn pixel_level(detections: &[PixelMask], truths: &[PixelMask]) -> Result<Vec<PixelDecision>> {
    if detections.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            found: detections.len(),
        });
    }
    detections
        .iter()
        .zip(truths)
        .map(|(d, t)| pixel_decision(d, t))
        .collect()
}

/// Pixel-level ROC: detections are `map > threshold`. TPR is the fraction of
/// abnormal frames (non-empty ground truth) that are true positives; FPR is
/// the fraction of normal frames with any detection.
pub fn pixel_level_roc(
    maps: &[Vec<f64>],
    truths: &[PixelMask],
    thresholds: &[f64],
) -> Result<RocCurve> {
    if maps.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            found: maps.len(),
        });
    }
    let n_abn = truths.iter().filter(|t| t.count() > 0).count();
    let n_norm = truths.len() - n_abn;
    if n_abn == 0 || n_norm == 0 {
        return Err(Error::UndefinedMetric(
            "pixel-level ROC needs normal and abnormal frames".into(),
        ));
    }
    let mut thr: Vec<f64> = thresholds.to_vec();
    thr.sort_by(|a, b| b.total_cmp(a));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for &th in &thr {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (m, t) in maps.iter().zip(truths) {
            if m.len() != t.pixels.len() {
                return Err(Error::DimensionMismatch {
                    expected: t.pixels.len(),
                    found: m.len(),
                });
            }
            let det = PixelMask {
                width: t.width,
                height: t.height,
                pixels: m.iter().map(|&v| v > th).collect(),
            };
            match pixel_decision(&det, t)? {
                PixelDecision::TruePositive => tp += 1,
                PixelDecision::FalsePositive if t.count() == 0 => fp += 1,
                _ => {}
            }
        }
        points.push(RocPoint {
            threshold: th,
            fpr: fp as f64 / n_norm as f64,
            tpr: tp as f64 / n_abn as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(RocCurve { points })
}

/// Divides by the per-video maximum. An all-zero (or empty) signal is
/// returned unchanged with a warning.
pub fn normalize_signal(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        warn!("signal has no positive values; normalization skipped");
        return values.to_vec();
    }
    values.iter().map(|v| v / max).collect()
}

/// Nearest-rank percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of empty signal".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

pub fn calibrate_threshold(normal_signal: &[f64], p: f64) -> Result<f64> {
    percentile(normal_signal, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn concordance_auc(set: &ScoreSet) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in set.labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in set.labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                let (a, b) = (set.scores[i], set.scores[j]);
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / pairs
    }

    #[test]
    fn perfect_separation() {
        let set =
            ScoreSet::from_pairs(&[(0.9, true), (0.8, true), (0.4, false), (0.3, false)]).unwrap();
        let e = evaluate(&set).unwrap();
        assert_eq!(e.auc, 1.0);
        assert_eq!(e.eer, 0.0);
    }

    #[test]
    fn half_concordant() {
        let set =
            ScoreSet::from_pairs(&[(0.9, true), (0.3, true), (0.8, false), (0.4, false)]).unwrap();
        assert_eq!(concordance_auc(&set), 0.5);
        assert!((auc(&roc(&set).unwrap()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        let set = ScoreSet::from_pairs(&[(0.9, true), (0.3, true)]).unwrap();
        assert!(matches!(roc(&set), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn roc_has_endpoints_and_is_monotone() {
        let set =
            ScoreSet::from_pairs(&[(1.0, true), (1.0, false), (0.5, true), (0.2, false)]).unwrap();
        let c = roc(&set).unwrap();
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn frame_level_rules() {
        let zero = vec![vec![0.0; 6]];
        assert_eq!(frame_predictions(&zero, 1e-9), vec![false]);
        let hot = vec![vec![0.0, 0.9, 0.1]];
        assert_eq!(frame_predictions(&hot, 0.89), vec![true]);
        assert_eq!(frame_predictions(&hot, 0.9), vec![false]);
        let permuted = vec![vec![0.1, 0.0, 0.9]];
        assert_eq!(frame_scores(&hot), frame_scores(&permuted));
        assert!(frame_level(&hot, &[true, false]).is_err());
    }

    fn mask_with(n_true: usize, total: usize, offset: usize) -> PixelMask {
        let mut p = vec![false; total];
        for v in p.iter_mut().skip(offset).take(n_true) {
            *v = true;
        }
        PixelMask::new(total, 1, p).unwrap()
    }

    #[test]
    fn pixel_forty_percent_boundary() {
        let gt = mask_with(100, 200, 0);
        assert_eq!(
            pixel_decision(&mask_with(39, 200, 0), &gt).unwrap(),
            PixelDecision::FalsePositive
        );
        assert_eq!(
            pixel_decision(&mask_with(40, 200, 0), &gt).unwrap(),
            PixelDecision::TruePositive
        );
        assert_eq!(
            pixel_decision(&gt, &gt).unwrap(),
            PixelDecision::TruePositive
        );
        let empty = PixelMask::empty(200, 1);
        assert_eq!(
            pixel_decision(&empty, &empty).unwrap(),
            PixelDecision::Excluded
        );
        // detection outside the ground truth
        assert_eq!(
            pixel_decision(&mask_with(50, 200, 150), &gt).unwrap(),
            PixelDecision::FalsePositive
        );
        assert!(pixel_decision(&PixelMask::empty(10, 1), &gt).is_err());
    }

    #[test]
    fn normalization_and_percentile() {
        assert_eq!(normalize_signal(&[2.0, 4.0, 8.0]), vec![0.25, 0.5, 1.0]);
        assert_eq!(normalize_signal(&[3.0, 3.0]), vec![1.0, 1.0]);
        assert_eq!(normalize_signal(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&v, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn pixel_roc_basic() {
        let truths = vec![mask_with(2, 4, 0), PixelMask::empty(4, 1)];
        let maps = vec![vec![0.9, 0.8, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.0]];
        let c = pixel_level_roc(&maps, &truths, &[0.7, 0.4]).unwrap();
        assert_eq!((c.points[1].fpr, c.points[1].tpr), (0.0, 1.0));
        assert_eq!((c.points[2].fpr, c.points[2].tpr), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn auc_matches_concordance_and_is_rank_invariant(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0) / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let set = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let a = auc(&roc(&set).unwrap());
            prop_assert!((a - concordance_auc(&set)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let e = eer(&roc(&set).unwrap());
            prop_assert!((0.0..=1.0).contains(&e));
            let mono = ScoreSet::new(scores.iter().map(|s| (3.0 * s).exp()).collect(), labels).unwrap();
            prop_assert!((auc(&roc(&mono).unwrap()) - a).abs() < 1e-12);
        }
    }
}
