//! Batch self-organizing map with a diagonally weighted Euclidean distance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(Σ w_i (a_i − b_i)²)`.
pub fn weighted_distance(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub epochs: usize,
    /// Neighborhood width at the first epoch; `None` means `max(rows, cols) / 2`.
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
    pub seed: u64,
}

impl Default for SomConfig {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 12,
            epochs: 50,
            sigma_start: None,
            sigma_end: 0.1,
            seed: 0,
        }
    }
}

impl SomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("SOM grid must be at least 1x1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("SOM epochs must be positive".into()));
        }
        let start = self.sigma_start.unwrap_or(1.0);
        if !(self.sigma_end > 0.0 && start > 0.0) {
            return Err(Error::Config(
                "SOM neighborhood widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn units(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Som {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    /// Row-major over the grid.
    pub neurons: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SomFit {
    pub som: Som,
    pub assignments: Vec<usize>,
    /// Mean distance of each sample to its best unit, after each epoch.
    pub objective: Vec<f64>,
}

impl Som {
    pub fn grid_pos(&self, unit: usize) -> (usize, usize) {
        (unit / self.cols, unit % self.cols)
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        weighted_distance(a, b, &self.weights)
    }

    /// Best-matching unit; ties go to the lowest index.
    pub fn best_unit(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, n) in self.neurons.iter().enumerate() {
            let d = self.distance(x, n);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }

    /// 4-neighborhood on the grid.
    pub fn grid_neighbors(&self, unit: usize) -> Vec<usize> {
        let (r, c) = self.grid_pos(unit);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(unit - self.cols);
        }
        if c > 0 {
            out.push(unit - 1);
        }
        if c + 1 < self.cols {
            out.push(unit + 1);
        }
        if r + 1 < self.rows {
            out.push(unit + self.cols);
        }
        out
    }
}

pub fn train(data: &[Vec<f64>], weights: &[f64], cfg: &SomConfig) -> Result<SomFit> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("SOM needs at least one sample".into()));
    }
    let dim = weights.len();
    for row in data {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite SOM sample".into()));
        }
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config("SOM weights must be non-negative".into()));
    }

    let units = cfg.units();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let neurons: Vec<Vec<f64>> = if data.len() >= units {
        let mut idx = sample(&mut rng, data.len(), units).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| data[i].clone()).collect()
    } else {
        (0..units).map(|j| data[j % data.len()].clone()).collect()
    };
    let mut som = Som {
        rows: cfg.rows,
        cols: cfg.cols,
        weights: weights.to_vec(),
        neurons,
    };

    let sigma0 = cfg
        .sigma_start
        .unwrap_or(cfg.rows.max(cfg.cols) as f64 / 2.0)
        .max(cfg.sigma_end);
    let grid: Vec<(f64, f64)> = (0..units)
        .map(|j| {
            let (r, c) = som.grid_pos(j);
            (r as f64, c as f64)
        })
        .collect();

    let mut assignments: Vec<usize> = data.iter().map(|x| som.best_unit(x)).collect();
    let mut objective = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 {
            epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            1.0
        };
        let sigma = sigma0 + (cfg.sigma_end - sigma0) * frac;
        let denom = 2.0 * sigma * sigma;

        let mut counts = vec![0usize; units];
        let mut sums = vec![vec![0.0; dim]; units];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..units {
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for b in 0..units {
                if counts[b] == 0 {
                    continue;
                }
                let dr = grid[j].0 - grid[b].0;
                let dc = grid[j].1 - grid[b].1;
                let h = (-(dr * dr + dc * dc) / denom).exp();
                if h == 0.0 {
                    continue;
                }
                den += h * counts[b] as f64;
                for (n, s) in num.iter_mut().zip(&sums[b]) {
                    *n += h * s;
                }
            }
            if den > 0.0 {
                som.neurons[j] = num.into_iter().map(|v| v / den).collect();
            }
        }

        assignments = data.iter().map(|x| som.best_unit(x)).collect();
        let total: f64 = data
            .iter()
            .zip(&assignments)
            .map(|(x, &a)| som.distance(x, &som.neurons[a]))
            .sum();
        objective.push(total / data.len() as f64);
    }

    Ok(SomFit {
        som,
        assignments,
        objective,
    })
}
