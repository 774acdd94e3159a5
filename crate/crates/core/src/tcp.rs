//! Temporal pattern irregularity over binary-code histograms.
//!
//! Each frame carries a grid of binary codes (one per cell). Overlapping
//! blocks of `length` frames are cut from the sequence; for every cell the
//! block histogram counts how often each code occurs. The irregularity of a
//! histogram is the summed squared deviation of every bin from the dominant
//! bin, evaluated over a support domain of bins.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::FlowMap;
use crate::error::{Error, Result};

/// Normalized values below this are treated as background.
pub const BACKGROUND_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub length: usize,
    pub overlap: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            length: 14,
            overlap: 13,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.overlap >= self.length {
            return Err(Error::Config(format!(
                "block overlap {} must be below block length {}",
                self.overlap, self.length
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.length - self.overlap
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHistogram {
    pub counts: BTreeMap<u32, u32>,
}

impl BlockHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    pub fn get(&self, bin: u32) -> u32 {
        self.counts.get(&bin).copied().unwrap_or(0)
    }

    /// Dominant bin; ties go to the lowest code.
    pub fn mode(&self) -> Option<(u32, u32)> {
        self.counts
            .iter()
            .fold(None, |best: Option<(u32, u32)>, (&b, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((b, c)),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    /// Frame the block is attributed to.
    pub middle: usize,
    pub rows: usize,
    pub cols: usize,
    /// One histogram per grid cell, row-major.
    pub histograms: Vec<BlockHistogram>,
}

pub fn build_blocks(frames: &[CodeGrid], spec: &BlockSpec) -> Result<Vec<Block>> {
    spec.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("no code grids given".into()))?;
    if frames.len() < spec.length {
        return Err(Error::InvalidInput(format!(
            "{} frames is fewer than the block length {}",
            frames.len(),
            spec.length
        )));
    }
    let cells = first.rows * first.cols;
    for (i, f) in frames.iter().enumerate() {
        if f.rows != first.rows || f.cols != first.cols || f.codes.len() != cells {
            return Err(Error::InvalidInput(format!(
                "code grid {i} does not match the first grid's shape"
            )));
        }
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    while start + spec.length <= frames.len() {
        let mut histograms = vec![BlockHistogram::default(); cells];
        for f in &frames[start..start + spec.length] {
            for (h, &code) in histograms.iter_mut().zip(&f.codes) {
                *h.counts.entry(code).or_insert(0) += 1;
            }
        }
        blocks.push(Block {
            start,
            middle: start + spec.length / 2,
            rows: first.rows,
            cols: first.cols,
            histograms,
        });
        start += spec.stride();
    }
    Ok(blocks)
}

/// Bin universe over which the irregularity sum runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Support {
    /// Every code in `0..2^bits`.
    AllBins { bits: u32 },
    /// Only the listed codes (typically those observed anywhere in the video).
    Observed(BTreeSet<u32>),
}

impl Support {
    pub fn observed_in(frames: &[CodeGrid]) -> Self {
        Support::Observed(
            frames
                .iter()
                .flat_map(|f| f.codes.iter().copied())
                .collect(),
        )
    }
}

/// Sum over `support` of `(h(j) - h(j_max))^2`.
pub fn tcp_measure(h: &BlockHistogram, support: &Support) -> Result<f64> {
    let (_, peak) = h
        .mode()
        .filter(|_| h.total() > 0)
        .ok_or_else(|| Error::InvalidInput("empty histogram".into()))?;
    let peak = f64::from(peak);
    let term = |c: u32| {
        let d = f64::from(c) - peak;
        d * d
    };
    Ok(match support {
        Support::AllBins { bits } => {
            let n_bins = 1u64 << bits;
            let present: f64 = h.counts.values().map(|&c| term(c)).sum();
            let absent = n_bins.saturating_sub(h.counts.len() as u64) as f64;
            present + absent * peak * peak
        }
        Support::Observed(bins) => {
            let mut sum: f64 = bins.iter().map(|&b| term(h.get(b))).sum();
            // bins present in h but missing from the support still count
            sum += h
                .counts
                .iter()
                .filter(|(b, _)| !bins.contains(b))
                .map(|(_, &c)| term(c))
                .sum::<f64>();
            sum
        }
    })
}

/// Dense-histogram form: every slot is a bin.
pub fn tcp_dense(counts: &[u32]) -> Result<f64> {
    let peak = counts
        .iter()
        .copied()
        .max()
        .filter(|_| counts.iter().any(|&c| c > 0))
        .ok_or_else(|| Error::InvalidInput("empty histogram".into()))?;
    Ok(counts
        .iter()
        .map(|&c| {
            let d = f64::from(c) - f64::from(peak);
            d * d
        })
        .sum())
}

/// Per-cell scalar map on the code grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMap {
    pub frame: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CellMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn tcp_map(block: &Block, support: &Support) -> Result<CellMap> {
    Ok(CellMap {
        frame: block.middle,
        rows: block.rows,
        cols: block.cols,
        values: block
            .histograms
            .iter()
            .map(|h| tcp_measure(h, support))
            .collect::<Result<_>>()?,
    })
}

/// Divides every map by the largest value in the sequence, then zeroes
/// cells below [`BACKGROUND_THRESHOLD`]. A sequence without positive values
/// is left as is.
pub fn normalize_maps(maps: &mut [CellMap], background: f64) {
    let max = maps.iter().map(CellMap::max).fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("map sequence has no positive values; normalization skipped");
        return;
    }
    for m in maps.iter_mut() {
        for v in &mut m.values {
            *v /= max;
            if *v < background {
                *v = 0.0;
            }
        }
    }
}

/// Dense pixel map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Nearest-cell replication up to `width x height` pixels.
pub fn upsample(map: &CellMap, width: usize, height: usize) -> DenseMap {
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let r = (y * map.rows / height).min(map.rows - 1);
        for x in 0..width {
            let c = (x * map.cols / width).min(map.cols - 1);
            values.push(map.values[r * map.cols + c]);
        }
    }
    DenseMap {
        width,
        height,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(
                "fusion weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

/// Element-wise `alpha * flow + beta * tcp`.
pub fn fuse(tcp: &CellMap, flow: &CellMap, w: &FusionWeights) -> Result<CellMap> {
    w.validate()?;
    if tcp.rows != flow.rows || tcp.cols != flow.cols {
        return Err(Error::DimensionMismatch {
            expected: tcp.rows * tcp.cols,
            found: flow.rows * flow.cols,
        });
    }
    Ok(CellMap {
        frame: tcp.frame,
        rows: tcp.rows,
        cols: tcp.cols,
        values: tcp
            .values
            .iter()
            .zip(&flow.values)
            .map(|(&c, &d)| w.alpha * d + w.beta * c)
            .collect(),
    })
}

/// Optical-flow magnitude summed over the frames of a block and over the
/// pixels of each grid cell.
pub fn block_flow_map(
    flows: &[FlowMap],
    block_frames: std::ops::Range<usize>,
    frame: usize,
    rows: usize,
    cols: usize,
) -> Result<CellMap> {
    let mut values = vec![0.0; rows * cols];
    for f in flows
        .get(block_frames.clone())
        .ok_or_else(|| Error::InvalidInput(format!("flow frames {block_frames:?} out of range")))?
    {
        let (w, h) = (f.width as usize, f.height as usize);
        for y in 0..h {
            let r = (y * rows / h).min(rows - 1);
            for x in 0..w {
                let c = (x * cols / w).min(cols - 1);
                values[r * cols + c] += f.magnitude(y * w + x);
            }
        }
    }
    Ok(CellMap {
        frame,
        rows,
        cols,
        values,
    })
}

/// Keeps map values only at pixels where the flow magnitude is positive.
pub fn motion_mask(map: &DenseMap, flow: &FlowMap) -> Result<DenseMap> {
    if map.width != flow.width as usize || map.height != flow.height as usize {
        return Err(Error::DimensionMismatch {
            expected: map.width * map.height,
            found: flow.cells.len(),
        });
    }
    Ok(DenseMap {
        width: map.width,
        height: map.height,
        values: map
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if flow.magnitude(i) > 0.0 { v } else { 0.0 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(counts: &[u32]) -> BlockHistogram {
        BlockHistogram {
            counts: counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(b, &c)| (b as u32, c))
                .collect(),
        }
    }

    fn all(n: u32) -> Support {
        Support::Observed((0..n).collect())
    }

    fn brute(counts: &[u32]) -> f64 {
        let mut best = 0;
        for (j, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = j;
            }
        }
        let mut s = 0.0;
        for &c in counts {
            let d = f64::from(c) - f64::from(counts[best]);
            s += d * d;
        }
        s
    }

    #[test]
    fn tcp_hand_cases() {
        assert_eq!(tcp_measure(&hist(&[2, 2, 2, 2]), &all(4)).unwrap(), 0.0);
        assert_eq!(tcp_measure(&hist(&[4, 0, 0, 0]), &all(4)).unwrap(), 48.0);
        assert_eq!(tcp_measure(&hist(&[3, 1, 0]), &all(3)).unwrap(), 13.0);
        assert_eq!(tcp_dense(&[4, 0, 0, 0]).unwrap(), 48.0);
        assert_eq!(tcp_dense(&[3, 1, 0]).unwrap(), 13.0);
        assert!(tcp_measure(&BlockHistogram::default(), &all(3)).is_err());
        assert!(tcp_dense(&[0, 0]).is_err());
    }

    #[test]
    fn all_bins_support_counts_empty_bins() {
        // 2 bits -> 4 bins; equals the dense evaluation
        let h = hist(&[3, 1]);
        assert_eq!(
            tcp_measure(&h, &Support::AllBins { bits: 2 }).unwrap(),
            tcp_dense(&[3, 1, 0, 0]).unwrap()
        );
    }

    #[test]
    fn mode_ties_prefer_lowest_bin() {
        assert_eq!(hist(&[0, 5, 5, 1]).mode(), Some((1, 5)));
    }

    fn grid(codes: Vec<u32>) -> CodeGrid {
        CodeGrid {
            rows: 1,
            cols: codes.len(),
            codes,
        }
    }

    #[test]
    fn block_counts() {
        let frames: Vec<_> = (0..20).map(|i| grid(vec![i % 3, 7])).collect();
        let spec = BlockSpec {
            length: 14,
            overlap: 13,
        };
        let blocks = build_blocks(&frames, &spec).unwrap();
        assert_eq!(blocks.len(), 7);
        assert_eq!(blocks[0].middle, 7);
        for b in &blocks {
            assert!(b.histograms.iter().all(|h| h.total() == 14));
        }
        let part = build_blocks(
            &frames,
            &BlockSpec {
                length: 6,
                overlap: 0,
            },
        )
        .unwrap();
        assert_eq!(part.len(), 3);
        let one = build_blocks(&frames[..14], &spec).unwrap();
        assert_eq!(one.len(), 1);
        assert!(build_blocks(&frames[..5], &spec).is_err());
        assert!(build_blocks(
            &frames,
            &BlockSpec {
                length: 3,
                overlap: 3
            }
        )
        .is_err());
    }

    #[test]
    fn upsample_replicates() {
        let m = CellMap {
            frame: 0,
            rows: 2,
            cols: 2,
            values: vec![1.0, 2.0, 3.0, 4.0],
        };
        let d = upsample(&m, 4, 4);
        #[rustfmt::skip]
        let expect = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(d.values, expect);
    }

    #[test]
    fn normalization_and_background() {
        let mut maps = vec![CellMap {
            frame: 0,
            rows: 1,
            cols: 3,
            values: vec![5.0, 5.0, 5.0],
        }];
        normalize_maps(&mut maps, BACKGROUND_THRESHOLD);
        assert_eq!(maps[0].values, vec![1.0; 3]);
        let mut maps = vec![CellMap {
            frame: 0,
            rows: 1,
            cols: 2,
            values: vec![0.5, 10.0],
        }];
        normalize_maps(&mut maps, BACKGROUND_THRESHOLD);
        // 0.05 after normalization -> background
        assert_eq!(maps[0].values, vec![0.0, 1.0]);
    }

    #[test]
    fn fusion_rules() {
        let c = CellMap {
            frame: 0,
            rows: 1,
            cols: 3,
            values: vec![0.2, 0.4, 0.8],
        };
        let w = FusionWeights::default();
        assert_eq!(fuse(&c, &c, &w).unwrap().values, c.values);
        let d = CellMap {
            values: vec![1.0, 2.0, 3.0],
            ..c.clone()
        };
        let only_flow = fuse(
            &c,
            &d,
            &FusionWeights {
                alpha: 0.7,
                beta: 0.0,
            },
        )
        .unwrap();
        assert_eq!(only_flow.values, vec![0.7, 1.4, 0.7 * 3.0]);
        let zero = CellMap {
            values: vec![0.0; 3],
            ..c.clone()
        };
        let f = fuse(
            &c,
            &zero,
            &FusionWeights {
                alpha: 0.3,
                beta: 0.5,
            },
        )
        .unwrap();
        assert_eq!(f.values, vec![0.1, 0.2, 0.4]);
        let other = CellMap {
            rows: 3,
            cols: 1,
            ..c.clone()
        };
        assert!(fuse(&c, &other, &w).is_err());
        assert!(FusionWeights {
            alpha: 0.0,
            beta: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn motion_mask_rules() {
        let map = DenseMap {
            width: 2,
            height: 2,
            values: vec![0.5, 0.6, 0.7, 0.8],
        };
        let still = FlowMap::new(2, 2, vec![(0.0, 0.0); 4]).unwrap();
        assert_eq!(motion_mask(&map, &still).unwrap().values, vec![0.0; 4]);
        let moving = FlowMap::new(2, 2, vec![(1.0, 0.0); 4]).unwrap();
        assert_eq!(motion_mask(&map, &moving).unwrap(), map);
        let one =
            FlowMap::new(2, 2, vec![(0.0, 0.0), (0.0, 0.0), (0.0, -0.5), (0.0, 0.0)]).unwrap();
        assert_eq!(
            motion_mask(&map, &one).unwrap().values,
            vec![0.0, 0.0, 0.7, 0.0]
        );
        let wrong = FlowMap::new(1, 4, vec![(1.0, 0.0); 4]).unwrap();
        assert!(motion_mask(&map, &wrong).is_err());
    }

    #[test]
    fn block_flow_sums_cells() {
        let f = FlowMap::new(2, 2, vec![(3.0, 4.0), (0.0, 1.0), (0.0, 0.0), (1.0, 0.0)]).unwrap();
        let flows = vec![f.clone(), f];
        let m = block_flow_map(&flows, 0..2, 1, 1, 2).unwrap();
        assert_eq!(m.values, vec![10.0, 4.0]);
    }

    proptest! {
        #[test]
        fn tcp_matches_brute_force_and_is_permutation_invariant(
            counts in proptest::collection::vec(0u32..30, 1..40),
            seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let n = counts.len() as u32;
            let v = tcp_measure(&hist(&counts), &all(n)).unwrap();
            prop_assert_eq!(v, brute(&counts));
            prop_assert!(v >= 0.0);
            let uniform = counts.iter().all(|&c| c == counts[0]);
            prop_assert_eq!(v == 0.0, uniform);

            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut p = counts.clone();
            p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(tcp_measure(&hist(&p), &all(n)).unwrap(), v);
        }
    }
}
