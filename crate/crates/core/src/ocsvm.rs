//! ν one-class support vector machine.
//!
//! Dual problem, with `C = 1 / (ν n)`:
//!
//! ```text
//! min_α  ½ αᵀ K α    s.t.  0 ≤ α_i ≤ C,  Σ α_i = 1
//! ```
//!
//! solved by pairwise (SMO) updates with second-order working-set selection
//! and no shrinking. The decision function is `f(x) = Σ α_i k(x_i, x) − ρ`;
//! larger is more normal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Linear,
    /// `exp(-γ ‖x − y‖²)`; `None` means `1 / dim`.
    Rbf {
        gamma: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcSvmConfig {
    pub nu: f64,
    pub kernel: Kernel,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for OcSvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.1,
            kernel: Kernel::Rbf { gamma: None },
            tolerance: 1e-6,
            max_iter: 10_000_000,
        }
    }
}

impl OcSvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!(
                "nu must be in (0, 1], got {}",
                self.nu
            )));
        }
        if let Kernel::Rbf { gamma: Some(g) } = self.kernel {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel with its bandwidth resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResolvedKernel {
    Linear,
    Rbf { gamma: f64 },
}

impl ResolvedKernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            ResolvedKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            ResolvedKernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation; constant features get scale 1.
    pub fn fit(data: &[Vec<f64>]) -> Self {
        let n = data.len() as f64;
        let d = data[0].len();
        let mut mean = vec![0.0; d];
        for row in data {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSvmModel {
    pub nu: f64,
    pub kernel: ResolvedKernel,
    pub scaling: Standardizer,
    /// Standardized support vectors.
    pub support_vectors: Vec<Vec<f64>>,
    /// Indices of the support vectors in the training set.
    pub support_indices: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub rho: f64,
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Normal,
    Abnormal,
}

/// Raw dual solution on a precomputed kernel matrix.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn upper_bound(nu: f64, n: usize) -> f64 {
    1.0 / (nu * n as f64)
}

/// SMO on a dense row-major `n x n` kernel matrix.
pub fn solve_dual(k: &[f64], n: usize, nu: f64, tol: f64, max_iter: usize) -> DualSolution {
    let c = upper_bound(nu, n);
    let kk = |i: usize, j: usize| k[i * n + j];

    let mut alpha = vec![0.0; n];
    let full = ((nu * n as f64).floor() as usize).min(n);
    for a in alpha.iter_mut().take(full) {
        *a = c;
    }
    if full < n {
        alpha[full] = (1.0 - full as f64 * c).max(0.0);
    }

    let mut grad = vec![0.0; n];
    for (j, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            for (i, g) in grad.iter_mut().enumerate() {
                *g += a * kk(i, j);
            }
        }
    }

    let can_grow = |a: f64| a < c;
    let can_shrink = |a: f64| a > 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // i gains mass (smallest gradient), j loses mass
        let mut i = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if can_grow(alpha[t]) && grad[t] < g_min {
                g_min = grad[t];
                i = t;
            }
            if can_shrink(alpha[t]) && grad[t] > g_max {
                g_max = grad[t];
            }
        }
        if i == usize::MAX || g_max - g_min < tol {
            converged = true;
            break;
        }
        let mut j = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for t in 0..n {
            if !can_shrink(alpha[t]) || grad[t] <= g_min {
                continue;
            }
            let diff = grad[t] - g_min;
            let curv = curvature(kk(i, i) + kk(t, t) - 2.0 * kk(i, t));
            let gain = diff * diff / curv;
            if gain > best {
                best = gain;
                j = t;
            }
        }
        if j == usize::MAX {
            converged = true;
            break;
        }
        let curv = curvature(kk(i, i) + kk(j, j) - 2.0 * kk(i, j));
        let step = ((grad[j] - grad[i]) / curv).min(c - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        // snap to the box so bound membership stays exact
        if c - alpha[i] < 1e-15 * c {
            alpha[i] = c;
        }
        if alpha[j] < 1e-15 * c {
            alpha[j] = 0.0;
        }
        for (t, g) in grad.iter_mut().enumerate() {
            *g += step * (kk(t, i) - kk(t, j));
        }
        iterations += 1;
    }

    let rho = offset(&alpha, &grad, c);
    DualSolution {
        alpha,
        rho,
        iterations,
        converged,
    }
}

fn curvature(a: f64) -> f64 {
    if a > 1e-12 {
        a
    } else {
        1e-12
    }
}

fn offset(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let mut sum = 0.0;
    let mut free = 0usize;
    let mut lower = f64::NEG_INFINITY; // max gradient at the upper bound
    let mut upper = f64::INFINITY; // min gradient at zero
    for (&a, &g) in alpha.iter().zip(grad) {
        if a >= c {
            lower = lower.max(g);
        } else if a <= 0.0 {
            upper = upper.min(g);
        } else {
            sum += g;
            free += 1;
        }
    }
    if free > 0 {
        sum / free as f64
    } else if lower.is_finite() && upper.is_finite() {
        0.5 * (lower + upper)
    } else if lower.is_finite() {
        lower
    } else {
        upper
    }
}

pub fn train(data: &[Vec<f64>], cfg: &OcSvmConfig) -> Result<OcSvmModel> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "one-class SVM needs at least 2 samples, found {n}"
        )));
    }
    let dim = data[0].len();
    if dim == 0 {
        return Err(Error::InvalidInput("empty feature vectors".into()));
    }
    for row in data {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
    }

    let scaling = Standardizer::fit(data);
    let xs: Vec<Vec<f64>> = data.iter().map(|r| scaling.apply(r)).collect();
    let kernel = match cfg.kernel {
        Kernel::Linear => ResolvedKernel::Linear,
        Kernel::Rbf { gamma } => ResolvedKernel::Rbf {
            gamma: gamma.unwrap_or(1.0 / dim as f64),
        },
    };
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&xs[i], &xs[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }

    let sol = solve_dual(&k, n, cfg.nu, cfg.tolerance, cfg.max_iter);
    if !sol.converged {
        log::warn!(
            "one-class SVM stopped after {} iterations without reaching tolerance",
            sol.iterations
        );
    }
    let mut support_vectors = Vec::new();
    let mut support_indices = Vec::new();
    let mut coefficients = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(xs[i].clone());
            support_indices.push(i);
            coefficients.push(a);
        }
    }
    Ok(OcSvmModel {
        nu: cfg.nu,
        kernel,
        scaling,
        support_vectors,
        support_indices,
        coefficients,
        rho: sol.rho,
        n_train: n,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

impl OcSvmModel {
    pub fn dim(&self) -> usize {
        self.scaling.mean.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let z = self.scaling.apply(x);
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, a)| a * self.kernel.eval(sv, &z))
            .sum();
        Ok(s - self.rho)
    }

    pub fn classify(&self, x: &[f64]) -> Result<Class> {
        Ok(if self.score(x)? >= 0.0 {
            Class::Normal
        } else {
            Class::Abnormal
        })
    }

    pub fn upper_bound(&self) -> f64 {
        upper_bound(self.nu, self.n_train)
    }
}
