//! Markov jump particle filter.
//!
//! Each particle holds a superstate (or the dummy state), its dwell count and
//! a Kalman belief over the generalized state. Per observation, particles
//! jump between superstates using the dwell-binned transition matrices,
//! predict with the superstate's control velocity, fall back to the dummy
//! random walk when the prediction leaves the superstate's validity radius,
//! update, and are reweighted by the observation likelihood. The abnormality
//! signal is the median innovation norm across particles.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::swdbn::SharedLevelModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalityNorm {
    Euclidean,
    #[default]
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MjpfConfig {
    pub n_particles: usize,
    /// Resample when the effective sample size drops below this fraction of
    /// the particle count; `0` disables resampling.
    pub resample_threshold: f64,
    pub seed: u64,
    pub norm: AbnormalityNorm,
}

impl Default for MjpfConfig {
    fn default() -> Self {
        Self {
            n_particles: 200,
            resample_threshold: 0.5,
            seed: 0,
            norm: AbnormalityNorm::Mahalanobis,
        }
    }
}

impl MjpfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("mjpf.n_particles must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config(
                "mjpf.resample_threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// `None` is the dummy superstate.
    pub superstate: Option<usize>,
    pub dwell: u32,
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub y: f64,
    pub map_superstate: Option<usize>,
    /// Weighted mean of the particle posteriors before resampling.
    pub posterior_mean: Vector4<f64>,
    pub innovation_norms: Vec<f64>,
    pub resampled: bool,
}

pub struct Mjpf<'a> {
    model: &'a SharedLevelModel,
    cfg: MjpfConfig,
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
    steps: usize,
}

impl<'a> Mjpf<'a> {
    /// Particles start in superstates drawn from the stationary distribution
    /// of the pooled transition chain, with beliefs centred on `xi`.
    pub fn new(model: &'a SharedLevelModel, cfg: MjpfConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_version()?;
        let live: Vec<usize> = model
            .superstates
            .iter()
            .filter(|s| !s.empty)
            .map(|s| s.id)
            .collect();
        if live.is_empty() {
            return Err(Error::InvalidInput(
                "vocabulary has no trained superstates".into(),
            ));
        }
        let pi = model.transitions.stationary();
        let mut mass: Vec<f64> = live
            .iter()
            .map(|&i| pi.get(i).copied().unwrap_or(0.0))
            .collect();
        if mass.iter().sum::<f64>() <= 0.0 {
            mass = vec![1.0; live.len()];
        }
        let dist = WeightedIndex::new(&mass)
            .map_err(|e| Error::Numeric(format!("stationary distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = 1.0 / cfg.n_particles as f64;
        let particles = (0..cfg.n_particles)
            .map(|_| {
                let s = &model.superstates[live[dist.sample(&mut rng)]];
                Particle {
                    superstate: Some(s.id),
                    dwell: 1,
                    mean: s.xi,
                    cov: s.q + model.model.q,
                    weight: w,
                }
            })
            .collect();
        Ok(Self {
            model,
            cfg,
            particles,
            rng,
            steps: 0,
        })
    }

    /// Starts from an explicit particle set.
    pub fn with_particles(
        model: &'a SharedLevelModel,
        cfg: MjpfConfig,
        particles: Vec<Particle>,
    ) -> Result<Self> {
        cfg.validate()?;
        model.check_version()?;
        if particles.is_empty() {
            return Err(Error::Config("particle set is empty".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            particles,
            rng,
            steps: 0,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    /// Processes one observation. The first call only updates the initial
    /// beliefs; later calls jump and predict first.
    pub fn step(&mut self, z: Vector2<f64>) -> Result<StepOutput> {
        if !(z[0].is_finite() && z[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let first = self.steps == 0;
        self.steps += 1;
        let lm = &self.model.model;
        let n_states = self.model.transitions.n_states;

        let mut log_w = Vec::with_capacity(self.particles.len());
        let mut norms = Vec::with_capacity(self.particles.len());
        for idx in 0..self.particles.len() {
            let (mean, cov) = if first {
                let p = &self.particles[idx];
                (p.mean, p.cov)
            } else {
                self.jump(idx, n_states);
                self.predict(idx)
            };
            let upd = lm.update(&mean, &cov, &z)?;
            let s_inv = upd
                .s
                .try_inverse()
                .ok_or_else(|| Error::Numeric("singular innovation covariance".into()))?;
            let maha2 = (upd.innovation.transpose() * s_inv * upd.innovation)[(0, 0)].max(0.0);
            norms.push(match self.cfg.norm {
                AbnormalityNorm::Mahalanobis => maha2.sqrt(),
                AbnormalityNorm::Euclidean => upd.innovation.norm(),
            });
            let p = &mut self.particles[idx];
            log_w.push(p.weight.ln() + log_likelihood(maha2, &upd.s));
            p.mean = upd.mean;
            p.cov = upd.cov;
        }

        normalize_log_weights(&mut log_w)?;
        for (p, lw) in self.particles.iter_mut().zip(&log_w) {
            p.weight = lw.exp();
        }
        let posterior_mean = self
            .particles
            .iter()
            .fold(Vector4::zeros(), |acc, p| acc + p.mean * p.weight);
        let map_superstate = self.map_superstate(n_states);
        let y = median(&norms);

        let ess = 1.0
            / self
                .particles
                .iter()
                .map(|p| p.weight * p.weight)
                .sum::<f64>();
        let resampled = self.cfg.resample_threshold > 0.0
            && ess < self.cfg.resample_threshold * self.particles.len() as f64;
        if resampled {
            self.resample();
        }
        Ok(StepOutput {
            y,
            map_superstate,
            posterior_mean,
            innovation_norms: norms,
            resampled,
        })
    }

    fn jump(&mut self, idx: usize, n_states: usize) {
        let model = self.model;
        let p = &self.particles[idx];
        let next = match p.superstate {
            Some(cur) => {
                let row = model.transitions.row(cur, p.dwell);
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                let mut pick = cur;
                for (j, &pr) in row.iter().enumerate() {
                    acc += pr;
                    if u < acc && pr > 0.0 {
                        pick = j;
                        break;
                    }
                }
                (pick < n_states).then_some(pick)
            }
            None => model.nearest(&p.mean),
        };
        let p = &mut self.particles[idx];
        p.dwell = if next == p.superstate {
            p.dwell.saturating_add(1)
        } else {
            1
        };
        p.superstate = next;
    }

    fn predict(&mut self, idx: usize) -> (Vector4<f64>, Matrix4<f64>) {
        let model = self.model;
        let lm = &model.model;
        let p = &mut self.particles[idx];
        if let Some(s) = p.superstate.map(|i| &model.superstates[i]) {
            let (m, c) = lm.predict(&p.mean, &p.cov, &s.u);
            if !s.empty && model.weights.distance(&m, &s.xi) <= s.psi {
                return (m, c);
            }
            let was = p.superstate;
            p.superstate = None;
            if was.is_some() {
                p.dwell = 1;
            }
        }
        lm.predict(&p.mean, &p.cov, &Vector2::zeros())
    }

    fn map_superstate(&self, n_states: usize) -> Option<usize> {
        let mut mass = vec![0.0; n_states + 1];
        for p in &self.particles {
            mass[p.superstate.unwrap_or(n_states)] += p.weight;
        }
        let best = mass
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &m)| if m > b.1 { (i, m) } else { b },
            )
            .0;
        (best < n_states).then_some(best)
    }

    /// Systematic resampling; weights reset to uniform.
    fn resample(&mut self) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let start: f64 = self.rng.random::<f64>() * step;
        let mut out = Vec::with_capacity(n);
        let mut acc = self.particles[0].weight;
        let mut i = 0;
        for m in 0..n {
            let u = start + m as f64 * step;
            while u > acc && i + 1 < n {
                i += 1;
                acc += self.particles[i].weight;
            }
            let mut p = self.particles[i].clone();
            p.weight = step;
            out.push(p);
        }
        self.particles = out;
    }
}

fn log_likelihood(maha2: f64, s: &Matrix2<f64>) -> f64 {
    let det = s.determinant().max(f64::MIN_POSITIVE);
    -0.5 * maha2 - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

fn normalize_log_weights(log_w: &mut [f64]) -> Result<()> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("all particle weights vanished".into()));
    }
    let lse = max + log_w.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    log_w.iter_mut().for_each(|v| *v -= lse);
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub k: u64,
    pub y: f64,
    pub superstate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub signal: Vec<SignalRow>,
    pub posterior_means: Vec<Vector4<f64>>,
}

impl RunOutput {
    pub fn values(&self) -> Vec<f64> {
        self.signal.iter().map(|r| r.y).collect()
    }
}

pub fn run(
    observations: &[TrajectoryRecord],
    model: &SharedLevelModel,
    cfg: &MjpfConfig,
) -> Result<RunOutput> {
    let mut filter = Mjpf::new(model, *cfg)?;
    run_filter(&mut filter, observations)
}

pub fn run_filter(filter: &mut Mjpf<'_>, observations: &[TrajectoryRecord]) -> Result<RunOutput> {
    let mut signal = Vec::with_capacity(observations.len());
    let mut posterior_means = Vec::with_capacity(observations.len());
    for (k, obs) in observations.iter().enumerate() {
        let out = filter
            .step(Vector2::new(obs.x, obs.y))
            .map_err(|e| e.at_step(k))?;
        signal.push(SignalRow {
            k: obs.t,
            y: out.y,
            superstate: out.map_superstate,
        });
        posterior_means.push(out.posterior_mean);
    }
    Ok(RunOutput {
        signal,
        posterior_means,
    })
}

/// `k,Y,superstate_id`; the dummy superstate is written as `-1`.
pub fn write_signal<W: Write>(writer: W, rows: &[SignalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "Y", "superstate_id"])?;
    for r in rows {
        let id = r.superstate.map_or(-1, |s| s as i64);
        w.write_record([r.k.to_string(), r.y.to_string(), id.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signal<R: Read>(reader: R) -> Result<Vec<SignalRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["k", "Y", "superstate_id"] {
        return Err(Error::Format(format!(
            "expected signal header k,Y,superstate_id, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let parse_err = |m: String| Error::Parse { line, message: m };
        let k = field(0)
            .parse::<u64>()
            .map_err(|e| parse_err(format!("k: {e}")))?;
        let y = field(1)
            .parse::<f64>()
            .map_err(|e| parse_err(format!("Y: {e}")))?;
        let id = field(2)
            .parse::<i64>()
            .map_err(|e| parse_err(format!("superstate_id: {e}")))?;
        out.push(SignalRow {
            k,
            y,
            superstate: usize::try_from(id).ok(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn log_weights_normalize() {
        let mut w = vec![-1000.0, -1001.0, -1002.0];
        normalize_log_weights(&mut w).unwrap();
        let s: f64 = w.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let mut bad = vec![f64::NEG_INFINITY; 2];
        assert!(normalize_log_weights(&mut bad).is_err());
    }

    #[test]
    fn signal_round_trip() {
        let rows = vec![
            SignalRow {
                k: 0,
                y: 1.25,
                superstate: Some(3),
            },
            SignalRow {
                k: 1,
                y: 0.1 + 0.2,
                superstate: None,
            },
        ];
        let mut buf = Vec::new();
        write_signal(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .contains("1,0.30000000000000004,-1"));
        assert_eq!(read_signal(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn config_rejects_zero_particles() {
        let cfg = MjpfConfig {
            n_particles: 0,
            ..MjpfConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
