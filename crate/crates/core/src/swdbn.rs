//! Shared-level learning for the switching dynamic model.
//!
//! An unmotivated Kalman filter (position persists, velocity annihilated)
//! turns a trajectory into generalized states `[x, y, vx, vy]` whose velocity
//! is the innovation divided by the time step. A weighted batch SOM clusters
//! the states into superstates; each carries a mean `xi`, covariance,
//! control velocity `u` and validity radius `psi`. Superstate-to-superstate
//! transitions are counted per dwell-time bin.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, SymmetricEigen, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dataio::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::som::{self, Som, SomConfig};

/// `[x, y, vx, vy]` in scene units and scene units per sample.
pub type GeneralizedState = Vector4<f64>;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub dt: f64,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
}

#[derive(Debug, Clone)]
pub struct KfUpdate {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub innovation: Vector2<f64>,
    /// Innovation covariance `H P Hᵀ + R`.
    pub s: Matrix2<f64>,
}

impl LinearModel {
    pub fn isotropic(dt: f64, q: f64, r: f64) -> Self {
        Self {
            dt,
            q: Matrix4::identity() * q,
            r: Matrix2::identity() * r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !is_psd(&self.q) || self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "Q must be symmetric positive semidefinite".into(),
            ));
        }
        let r = self.r;
        let det = r[(0, 0)] * r[(1, 1)] - r[(0, 1)] * r[(1, 0)];
        if !(r[(0, 0)] > 0.0 && det > 0.0 && (r[(0, 1)] - r[(1, 0)]).abs() < 1e-15) {
            return Err(Error::Config(
                "R must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn a(&self) -> Matrix4<f64> {
        let mut a = Matrix4::zeros();
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        a
    }

    pub fn b(&self) -> Matrix4x2<f64> {
        let mut b = Matrix4x2::zeros();
        b[(0, 0)] = self.dt;
        b[(1, 1)] = self.dt;
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        b
    }

    pub fn h(&self) -> Matrix2x4<f64> {
        let mut h = Matrix2x4::zeros();
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        h
    }

    /// `A x + B u`, `A P Aᵀ + Q`.
    pub fn predict(
        &self,
        mean: &Vector4<f64>,
        cov: &Matrix4<f64>,
        control: &Vector2<f64>,
    ) -> (Vector4<f64>, Matrix4<f64>) {
        let a = self.a();
        let m = a * mean + self.b() * control;
        let p = symmetrize(a * cov * a.transpose() + self.q);
        (m, p)
    }

    /// Joseph-form update.
    pub fn update(
        &self,
        mean: &Vector4<f64>,
        cov: &Matrix4<f64>,
        z: &Vector2<f64>,
    ) -> Result<KfUpdate> {
        let h = self.h();
        let innovation = z - h * mean;
        let s = symmetrize2(h * cov * h.transpose() + self.r);
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular innovation covariance".into()))?;
        let k = cov * h.transpose() * s_inv;
        let ikh = Matrix4::identity() - k * h;
        let p = symmetrize(ikh * cov * ikh.transpose() + k * self.r * k.transpose());
        Ok(KfUpdate {
            mean: mean + k * innovation,
            cov: p,
            innovation,
            s,
        })
    }
}

pub(crate) fn symmetrize(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn symmetrize2(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Matrix4<f64>) -> f64 {
    SymmetricEigen::new(*m).eigenvalues.min()
}

fn is_psd(m: &Matrix4<f64>) -> bool {
    (m - m.transpose()).amax() < 1e-12 && min_eigenvalue(m) >= -1e-12
}

/// One emitted step of the unmotivated filter.
#[derive(Debug, Clone, PartialEq)]
pub struct UkfStep {
    pub t: u64,
    pub posterior: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub innovation: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl UkfStep {
    /// Posterior position with the innovation velocity.
    pub fn state(&self) -> GeneralizedState {
        Vector4::new(
            self.posterior[0],
            self.posterior[1],
            self.velocity[0],
            self.velocity[1],
        )
    }
}

/// Runs the zero-force filter; the first observation initializes the state,
/// so `n` observations give `n - 1` steps.
pub fn unmotivated_filter(
    observations: &[TrajectoryRecord],
    model: &LinearModel,
) -> Result<Vec<UkfStep>> {
    model.validate()?;
    if observations.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 observations, found {}",
            observations.len()
        )));
    }
    check_finite(&observations[0], 0)?;
    let z0 = &observations[0];
    let mut mean = Vector4::new(z0.x, z0.y, 0.0, 0.0);
    let mut cov = Matrix4::zeros();
    cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.r);
    cov.fixed_view_mut::<2, 2>(2, 2)
        .copy_from(&model.q.fixed_view::<2, 2>(2, 2));

    let zero = Vector2::zeros();
    let mut out = Vec::with_capacity(observations.len() - 1);
    for (k, obs) in observations.iter().enumerate().skip(1) {
        check_finite(obs, k)?;
        let (pm, pc) = model.predict(&mean, &cov, &zero);
        let upd = model
            .update(&pm, &pc, &Vector2::new(obs.x, obs.y))
            .map_err(|e| e.at_step(k))?;
        out.push(UkfStep {
            t: obs.t,
            posterior: upd.mean,
            cov: upd.cov,
            innovation: upd.innovation,
            velocity: upd.innovation / model.dt,
        });
        mean = upd.mean;
        cov = upd.cov;
    }
    Ok(out)
}

fn check_finite(r: &TrajectoryRecord, step: usize) -> Result<()> {
    if r.x.is_finite() && r.y.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("non-finite observation".into()).at_step(step))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SomWeights {
    /// Weight on velocity components.
    pub alpha: f64,
    /// Weight on position components.
    pub beta: f64,
}

impl Default for SomWeights {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 0.25,
        }
    }
}

impl SomWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0
            && self.alpha > self.beta
            && (self.alpha + self.beta - 1.0).abs() < 1e-12)
        {
            return Err(Error::Config(format!(
                "SOM weights need alpha > beta >= 0 and alpha + beta = 1, got {} / {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Diagonal of `D = diag(β, β, α, α)`.
    pub fn diagonal(&self) -> [f64; 4] {
        [self.beta, self.beta, self.alpha, self.alpha]
    }

    pub fn distance(&self, a: &Vector4<f64>, b: &Vector4<f64>) -> f64 {
        som::weighted_distance(a.as_slice(), b.as_slice(), &self.diagonal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    #[default]
    Grid4,
    AllPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superstate {
    pub id: usize,
    pub xi: Vector4<f64>,
    pub q: Matrix4<f64>,
    pub u: Vector2<f64>,
    pub psi: f64,
    pub empty: bool,
    pub members: usize,
}

/// `mean + 3 * sd` (population) of a distance vector; an empty vector gives
/// an unbounded radius.
pub fn three_sigma_radius(distances: &[f64]) -> f64 {
    if distances.is_empty() {
        return f64::MAX;
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / n;
    mean + 3.0 * var.sqrt()
}

pub fn build_vocabulary(
    states: &[GeneralizedState],
    assignments: &[usize],
    som: &Som,
    adjacency: Adjacency,
) -> Result<Vec<Superstate>> {
    if states.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: states.len(),
            found: assignments.len(),
        });
    }
    let units = som.neurons.len();
    let mut groups: Vec<Vec<&GeneralizedState>> = vec![Vec::new(); units];
    for (s, &a) in states.iter().zip(assignments) {
        if a >= units {
            return Err(Error::InvalidInput(format!(
                "assignment {a} outside {units} units"
            )));
        }
        groups[a].push(s);
    }

    let neuron = |j: usize| -> &[f64] { &som.neurons[j] };
    let mut out = Vec::with_capacity(units);
    for (j, members) in groups.iter().enumerate() {
        let others: Vec<usize> = match adjacency {
            Adjacency::Grid4 => som.grid_neighbors(j),
            Adjacency::AllPairs => (0..units).filter(|&b| b != j).collect(),
        };
        let dists: Vec<f64> = others
            .iter()
            .map(|&b| som.distance(neuron(j), neuron(b)))
            .collect();
        let psi = three_sigma_radius(&dists);

        if members.is_empty() {
            out.push(Superstate {
                id: j,
                xi: Vector4::from_column_slice(neuron(j)),
                q: Matrix4::zeros(),
                u: Vector2::zeros(),
                psi,
                empty: true,
                members: 0,
            });
            continue;
        }
        let n = members.len() as f64;
        let xi = members.iter().fold(Vector4::zeros(), |acc, s| acc + **s) / n;
        let q = members.iter().fold(Matrix4::zeros(), |acc, s| {
            let d = **s - xi;
            acc + d * d.transpose()
        }) / n;
        out.push(Superstate {
            id: j,
            xi,
            q: symmetrize(q),
            u: Vector2::new(xi[2], xi[3]),
            psi,
            empty: false,
            members: members.len(),
        });
    }
    Ok(out)
}

/// Row-stochastic matrices over learned superstates plus a trailing dummy
/// state, one per dwell-time bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub n_states: usize,
    /// Upper edges of the dwell bins; dwell `d` falls in the first bin with
    /// `d <= edge`, or the last bin past every edge.
    pub dwell_edges: Vec<u32>,
    /// `[bin][from][to]`, each `(n_states + 1)` square.
    pub matrices: Vec<Vec<Vec<f64>>>,
    /// All bins pooled.
    pub pooled: Vec<Vec<f64>>,
}

impl TransitionModel {
    pub fn dummy(&self) -> usize {
        self.n_states
    }

    pub fn bin_of(&self, dwell: u32) -> usize {
        self.dwell_edges
            .iter()
            .position(|&e| dwell <= e)
            .unwrap_or(self.dwell_edges.len())
    }

    pub fn row(&self, from: usize, dwell: u32) -> &[f64] {
        &self.matrices[self.bin_of(dwell)][from]
    }

    /// Stationary distribution of the pooled chain over learned states,
    /// by power iteration on the lazy chain `(I + P) / 2`.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.n_states;
        if n == 0 {
            return Vec::new();
        }
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (i, &p) in pi.iter().enumerate() {
                next[i] += 0.5 * p;
                for (j, v) in next.iter_mut().enumerate() {
                    *v += 0.5 * p * self.pooled[i][j];
                }
            }
            let s: f64 = next.iter().sum();
            if s > 0.0 {
                next.iter_mut().for_each(|v| *v /= s);
            }
            let delta = pi
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }
}

/// Counts `(S_{k-1}, S_k)` per dwell bin of `S_{k-1}` over each sequence.
/// With `smoothing`, one pseudo-count is added to every successor observed
/// from the same row in any bin. Rows without data fall back to the pooled
/// row, then to a self-transition.
pub fn learn_transitions(
    sequences: &[Vec<usize>],
    n_states: usize,
    dwell_edges: &[u32],
    smoothing: bool,
) -> Result<TransitionModel> {
    if !dwell_edges.windows(2).all(|w| w[0] < w[1]) || dwell_edges.first() == Some(&0) {
        return Err(Error::Config(
            "dwell edges must be positive and increasing".into(),
        ));
    }
    if sequences.iter().all(|s| s.len() < 2) {
        return Err(Error::InvalidInput(
            "transition learning needs a sequence of length >= 2".into(),
        ));
    }
    let size = n_states + 1;
    let bins = dwell_edges.len() + 1;
    let bin_of = |d: u32| {
        dwell_edges
            .iter()
            .position(|&e| d <= e)
            .unwrap_or(dwell_edges.len())
    };
    let mut counts = vec![vec![vec![0.0f64; size]; size]; bins];
    for seq in sequences {
        let mut dwell = 0u32;
        for k in 1..seq.len() {
            let (from, to) = (seq[k - 1], seq[k]);
            if from >= n_states || to >= n_states {
                return Err(Error::InvalidInput(format!(
                    "superstate id outside 0..{n_states}"
                )));
            }
            dwell = if k >= 2 && seq[k - 2] == from {
                dwell + 1
            } else {
                1
            };
            counts[bin_of(dwell)][from][to] += 1.0;
        }
    }

    let mut pooled_counts = vec![vec![0.0; size]; size];
    for b in &counts {
        for (i, row) in b.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                pooled_counts[i][j] += v;
            }
        }
    }
    let smooth = |row: &[f64], i: usize| -> Vec<f64> {
        let mut r = row.to_vec();
        if smoothing {
            for (j, v) in r.iter_mut().enumerate() {
                if pooled_counts[i][j] > 0.0 {
                    *v += 1.0;
                }
            }
        }
        r
    };
    let normalize = |mut r: Vec<f64>| -> Option<Vec<f64>> {
        let s: f64 = r.iter().sum();
        if s > 0.0 {
            r.iter_mut().for_each(|v| *v /= s);
            Some(r)
        } else {
            None
        }
    };
    let self_row = |i: usize| {
        let mut r = vec![0.0; size];
        r[i] = 1.0;
        r
    };

    let pooled: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            if i == n_states || pooled_counts[i].iter().sum::<f64>() == 0.0 {
                self_row(i)
            } else {
                normalize(smooth(&pooled_counts[i], i)).unwrap_or_else(|| self_row(i))
            }
        })
        .collect();
    let matrices = counts
        .iter()
        .map(|b| {
            (0..size)
                .map(|i| {
                    if i == n_states || b[i].iter().sum::<f64>() == 0.0 {
                        pooled[i].clone()
                    } else {
                        normalize(smooth(&b[i], i)).unwrap_or_else(|| pooled[i].clone())
                    }
                })
                .collect()
        })
        .collect();

    Ok(TransitionModel {
        n_states,
        dwell_edges: dwell_edges.to_vec(),
        matrices,
        pooled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlConfig {
    pub dt: f64,
    /// Observation noise sd; `R = σ² I` for both filters.
    pub observation_sigma: f64,
    /// Process noise of the motivated filters, `Q = q I`.
    pub process_noise: f64,
    /// Process noise of the unmotivated filter used for velocity estimation.
    pub unmotivated_process_noise: f64,
    pub som: SomConfig,
    pub weights: SomWeights,
    pub adjacency: Adjacency,
    pub dwell_edges: Vec<u32>,
    pub smoothing: bool,
}

impl Default for SlConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            observation_sigma: 0.01,
            process_noise: 1e-4,
            unmotivated_process_noise: 1e-2,
            som: SomConfig::default(),
            weights: SomWeights::default(),
            adjacency: Adjacency::Grid4,
            dwell_edges: vec![5, 20],
            smoothing: true,
        }
    }
}

impl SlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.observation_sigma > 0.0 && self.observation_sigma.is_finite()) {
            return Err(Error::Config("observation_sigma must be positive".into()));
        }
        if !(self.process_noise > 0.0 && self.unmotivated_process_noise > 0.0) {
            return Err(Error::Config("process noise must be positive".into()));
        }
        self.motivated_model().validate()?;
        self.som.validate()?;
        self.weights.validate()
    }

    pub fn motivated_model(&self) -> LinearModel {
        LinearModel::isotropic(self.dt, self.process_noise, self.observation_sigma.powi(2))
    }

    pub fn unmotivated_model(&self) -> LinearModel {
        LinearModel::isotropic(
            self.dt,
            self.unmotivated_process_noise,
            self.observation_sigma.powi(2),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedLevelModel {
    pub format_version: u32,
    pub model: LinearModel,
    pub weights: SomWeights,
    pub som: Som,
    pub superstates: Vec<Superstate>,
    pub transitions: TransitionModel,
}

/// Learned artifacts with the intermediate states kept for inspection.
#[derive(Debug, Clone)]
pub struct SlTraining {
    pub model: SharedLevelModel,
    pub states: Vec<GeneralizedState>,
    pub assignments: Vec<usize>,
    pub objective: Vec<f64>,
}

pub fn train(trajectories: &[Vec<TrajectoryRecord>], cfg: &SlConfig) -> Result<SlTraining> {
    cfg.validate()?;
    let ukf = cfg.unmotivated_model();
    let mut states = Vec::new();
    let mut lengths = Vec::new();
    for tr in trajectories {
        let steps = unmotivated_filter(tr, &ukf)?;
        lengths.push(steps.len());
        states.extend(steps.iter().map(UkfStep::state));
    }
    let rows: Vec<Vec<f64>> = states.iter().map(|s| s.as_slice().to_vec()).collect();
    let fit = som::train(&rows, &cfg.weights.diagonal(), &cfg.som)?;
    let superstates = build_vocabulary(&states, &fit.assignments, &fit.som, cfg.adjacency)?;

    let mut sequences = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for len in lengths {
        sequences.push(fit.assignments[at..at + len].to_vec());
        at += len;
    }
    let transitions = learn_transitions(
        &sequences,
        superstates.len(),
        &cfg.dwell_edges,
        cfg.smoothing,
    )?;

    Ok(SlTraining {
        model: SharedLevelModel {
            format_version: FORMAT_VERSION,
            model: cfg.motivated_model(),
            weights: cfg.weights,
            som: fit.som,
            superstates,
            transitions,
        },
        states,
        assignments: fit.assignments,
        objective: fit.objective,
    })
}

impl SharedLevelModel {
    pub fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        Ok(())
    }

    /// Index of the closest non-empty superstate to `x`.
    pub fn nearest(&self, x: &Vector4<f64>) -> Option<usize> {
        self.superstates
            .iter()
            .filter(|s| !s.empty)
            .map(|s| (s.id, self.weights.distance(x, &s.xi)))
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 <= c.1 => Some(b),
                _ => Some(c),
            })
            .map(|b| b.0)
    }
}
