//! Hierarchy of predictors grown from high-innovation clusters.
//!
//! A base predictor is trained on a seed subset. The whole corpus is scored
//! with the best existing level per sample, `(encoding, innovation)` pairs are
//! clustered with a SOM, and the cluster with the largest mean innovation at
//! or above `theta` trains a new level on its samples. This repeats until no
//! cluster qualifies or `max_levels` is reached. At test time a sample is
//! abnormal only when every level rejects it and its innovation exceeds the
//! calibrated threshold.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_json, to_json_bytes};
use crate::error::{Error, Result};
use crate::evalkit::percentile;
use crate::som::{self, SomConfig};
use crate::swdbn::three_sigma_radius;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

pub trait Predictor {
    type Model: Clone + Serialize + DeserializeOwned;

    fn train(&self, samples: &[&Sample]) -> Result<Self::Model>;

    fn predict(&self, model: &Self::Model, sample: &Sample) -> Vec<f64>;

    /// Component-wise non-negative innovation.
    fn innovate(&self, sample: &Sample, prediction: &[f64]) -> Vec<f64> {
        sample
            .target
            .iter()
            .zip(prediction)
            .map(|(t, p)| (t - p).abs())
            .collect()
    }

    /// State representation used for clustering.
    fn encode(&self, _model: &Self::Model, sample: &Sample) -> Vec<f64> {
        sample.input.clone()
    }
}

/// Mean of the innovation components.
pub fn scalar_innovation(innovation: &[f64]) -> f64 {
    if innovation.is_empty() {
        0.0
    } else {
        innovation.iter().sum::<f64>() / innovation.len() as f64
    }
}

/// One-step linear predictor `target = W [input; 1]` fitted by ridge least
/// squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub ridge: f64,
}

impl Default for LinearPredictor {
    fn default() -> Self {
        Self { ridge: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    /// `out x (in + 1)`, last column is the bias.
    pub w: DMatrix<f64>,
}

impl Predictor for LinearPredictor {
    type Model = LinearWeights;

    fn train(&self, samples: &[&Sample]) -> Result<LinearWeights> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot train on an empty subset".into()))?;
        let (din, dout) = (first.input.len(), first.target.len());
        for s in samples {
            if s.input.len() != din || s.target.len() != dout {
                return Err(Error::DimensionMismatch {
                    expected: din,
                    found: s.input.len(),
                });
            }
        }
        let n = samples.len();
        let x = DMatrix::from_fn(
            din + 1,
            n,
            |r, c| {
                if r < din {
                    samples[c].input[r]
                } else {
                    1.0
                }
            },
        );
        let y = DMatrix::from_fn(dout, n, |r, c| samples[c].target[r]);
        let gram = &x * x.transpose() + DMatrix::identity(din + 1, din + 1) * self.ridge;
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular ridge system".into()))?;
        Ok(LinearWeights {
            w: y * x.transpose() * inv,
        })
    }

    fn predict(&self, model: &LinearWeights, sample: &Sample) -> Vec<f64> {
        let mut v = sample.input.clone();
        v.push(1.0);
        (&model.w * DVector::from_vec(v)).iter().copied().collect()
    }
}

/// Per-level acceptance region: SOM units over the level's training
/// `(encoding, innovation)` vectors, each with a radius of mean + 3 sd of its
/// members' distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub neurons: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub members: Vec<usize>,
}

impl Validity {
    fn fit(joint: &[Vec<f64>], cfg: &SomConfig) -> Result<Self> {
        let w = vec![1.0; joint[0].len()];
        let fit = som::train(joint, &w, cfg)?;
        let units = fit.som.neurons.len();
        let mut dists = vec![Vec::new(); units];
        for (x, &a) in joint.iter().zip(&fit.assignments) {
            dists[a].push(som::weighted_distance(x, &fit.som.neurons[a], &w));
        }
        Ok(Self {
            psi: dists
                .iter()
                .map(|d| {
                    if d.is_empty() {
                        0.0
                    } else {
                        three_sigma_radius(d)
                    }
                })
                .collect(),
            members: dists.iter().map(Vec::len).collect(),
            neurons: fit.som.neurons,
        })
    }

    /// True when the closest populated unit is within its radius.
    pub fn accepts(&self, joint: &[f64]) -> bool {
        let w = vec![1.0; joint.len()];
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, n) in self.neurons.iter().enumerate() {
            if self.members[j] == 0 {
                continue;
            }
            let d = som::weighted_distance(joint, n, &w);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0 != usize::MAX && best.1 <= self.psi[best.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Serialize + DeserializeOwned")]
pub struct Level<M> {
    pub model: M,
    pub validity: Validity,
    /// Corpus indices used to train this level.
    pub trained_on: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Spawn threshold; `None` means the 90th percentile of base-level
    /// innovations on the seed subset.
    pub theta: Option<f64>,
    pub max_levels: usize,
    /// Spawn one level from the union of all qualifying clusters.
    pub merge_spawns: bool,
    pub cluster_som: SomConfig,
    pub validity_som: SomConfig,
    /// Percentile of corpus innovations used as the test-time threshold.
    pub y_th_percentile: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        let som = SomConfig {
            rows: 3,
            cols: 3,
            epochs: 30,
            ..SomConfig::default()
        };
        Self {
            theta: None,
            max_levels: 5,
            merge_spawns: false,
            cluster_som: som,
            validity_som: som,
            y_th_percentile: 99.0,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_levels == 0 {
            return Err(Error::Config(
                "hierarchy.max_levels must be at least 1".into(),
            ));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config("hierarchy.theta must be positive".into()));
            }
        }
        if !(0.0..=100.0).contains(&self.y_th_percentile) {
            return Err(Error::Config(
                "hierarchy.y_th_percentile must be in [0, 100]".into(),
            ));
        }
        self.cluster_som.validate()?;
        self.validity_som.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Serialize + DeserializeOwned")]
pub struct HierarchyModel<M> {
    pub levels: Vec<Level<M>>,
    pub theta: f64,
    pub y_th: f64,
    pub max_levels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_level: Vec<f64>,
    /// Index of the level with the smallest innovation.
    pub best_level: usize,
    pub innovation: f64,
    /// Per level, whether the sample falls outside its validity region.
    pub dummy: Vec<bool>,
    pub abnormal: bool,
}

struct Scored {
    joint: Vec<f64>,
    innovation: f64,
}

fn score_with<P: Predictor>(p: &P, model: &P::Model, s: &Sample) -> Scored {
    let pred = p.predict(model, s);
    let inn = p.innovate(s, &pred);
    let mut joint = p.encode(model, s);
    let y = scalar_innovation(&inn);
    joint.extend(inn);
    Scored {
        joint,
        innovation: y,
    }
}

fn score_best<P: Predictor>(p: &P, levels: &[Level<P::Model>], s: &Sample) -> Scored {
    levels
        .iter()
        .map(|l| score_with(p, &l.model, s))
        .fold(None, |best: Option<Scored>, c| match best {
            Some(b) if b.innovation <= c.innovation => Some(b),
            _ => Some(c),
        })
        .expect("at least one level")
}

fn train_level<P: Predictor>(
    p: &P,
    corpus: &[Sample],
    subset: Vec<usize>,
    cfg: &HierarchyConfig,
) -> Result<Level<P::Model>> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("empty spawn subset".into()));
    }
    let refs: Vec<&Sample> = subset.iter().map(|&i| &corpus[i]).collect();
    let model = p.train(&refs)?;
    let joint: Vec<Vec<f64>> = refs
        .iter()
        .map(|s| score_with(p, &model, s).joint)
        .collect();
    let validity = Validity::fit(&joint, &cfg.validity_som)?;
    Ok(Level {
        model,
        validity,
        trained_on: subset,
    })
}

pub fn build<P: Predictor>(
    predictor: &P,
    corpus: &[Sample],
    seed_subset: &[usize],
    cfg: &HierarchyConfig,
) -> Result<HierarchyModel<P::Model>> {
    cfg.validate()?;
    if seed_subset.is_empty() {
        return Err(Error::InvalidInput("seed subset is empty".into()));
    }
    if let Some(&i) = seed_subset.iter().find(|&&i| i >= corpus.len()) {
        return Err(Error::InvalidInput(format!(
            "seed index {i} outside corpus"
        )));
    }
    let seed: Vec<usize> = seed_subset
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut used: BTreeSet<usize> = seed.iter().copied().collect();
    let base = train_level(predictor, corpus, seed.clone(), cfg)?;

    let theta = match cfg.theta {
        Some(t) => t,
        None => {
            let v: Vec<f64> = seed
                .iter()
                .map(|&i| score_with(predictor, &base.model, &corpus[i]).innovation)
                .collect();
            percentile(&v, 90.0)?.max(f64::MIN_POSITIVE)
        }
    };
    let mut levels = vec![base];

    while levels.len() < cfg.max_levels {
        let scored: Vec<Scored> = corpus
            .iter()
            .map(|s| score_best(predictor, &levels, s))
            .collect();
        let joint: Vec<Vec<f64>> = scored.iter().map(|s| s.joint.clone()).collect();
        let w = vec![1.0; joint[0].len()];
        let fit = som::train(&joint, &w, &cfg.cluster_som)?;
        let units = fit.som.neurons.len();
        let mut members = vec![Vec::new(); units];
        for (i, &a) in fit.assignments.iter().enumerate() {
            members[a].push(i);
        }
        let mut qualifying: Vec<(usize, f64)> = members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(c, m)| {
                (
                    c,
                    m.iter().map(|&i| scored[i].innovation).sum::<f64>() / m.len() as f64,
                )
            })
            .filter(|&(_, mu)| mu >= theta)
            .collect();
        qualifying.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let fresh = |c: usize| -> Vec<usize> {
            members[c]
                .iter()
                .copied()
                .filter(|i| !used.contains(i))
                .collect()
        };
        let subset: Vec<usize> = if cfg.merge_spawns {
            let mut all: Vec<usize> = qualifying.iter().flat_map(|&(c, _)| fresh(c)).collect();
            all.sort_unstable();
            all
        } else {
            qualifying
                .iter()
                .map(|&(c, _)| fresh(c))
                .find(|s| !s.is_empty())
                .unwrap_or_default()
        };
        if subset.is_empty() {
            if !qualifying.is_empty() {
                log::warn!("qualifying clusters contain only samples already used for training");
            }
            break;
        }
        used.extend(subset.iter().copied());
        levels.push(train_level(predictor, corpus, subset, cfg)?);
    }

    let corpus_scores: Vec<f64> = corpus
        .iter()
        .map(|s| score_best(predictor, &levels, s).innovation)
        .collect();
    let y_th = percentile(&corpus_scores, cfg.y_th_percentile)?;
    Ok(HierarchyModel {
        levels,
        theta,
        y_th,
        max_levels: cfg.max_levels,
    })
}

impl<M: Clone + Serialize + DeserializeOwned> HierarchyModel<M> {
    pub fn evaluate<P: Predictor<Model = M>>(&self, predictor: &P, sample: &Sample) -> Evaluation {
        let scored: Vec<Scored> = self
            .levels
            .iter()
            .map(|l| score_with(predictor, &l.model, sample))
            .collect();
        let per_level: Vec<f64> = scored.iter().map(|s| s.innovation).collect();
        let (best_level, innovation) =
            per_level
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |b, (i, v)| if v < b.1 { (i, v) } else { b },
                );
        let dummy: Vec<bool> = self
            .levels
            .iter()
            .zip(&scored)
            .map(|(l, s)| !l.validity.accepts(&s.joint))
            .collect();
        let abnormal = dummy.iter().all(|&d| d) && innovation > self.y_th;
        Evaluation {
            per_level,
            best_level,
            innovation,
            dummy,
            abnormal,
        }
    }

    /// Mean innovation of the corpus under the best-level rule.
    pub fn mean_innovation<P: Predictor<Model = M>>(
        &self,
        predictor: &P,
        corpus: &[Sample],
    ) -> f64 {
        if corpus.is_empty() {
            return 0.0;
        }
        corpus
            .iter()
            .map(|s| self.evaluate(predictor, s).innovation)
            .sum::<f64>()
            / corpus.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub theta: f64,
    pub y_th: f64,
    pub max_levels: usize,
    pub levels: Vec<String>,
}

/// Writes `manifest.json` plus one `level_<i>.json` per level into `dir`.
pub fn save<M: Serialize + DeserializeOwned + Clone>(
    model: &HierarchyModel<M>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(model.levels.len());
    for (i, level) in model.levels.iter().enumerate() {
        let name = format!("level_{i}.json");
        fs::write(dir.join(&name), to_json_bytes(level)?)?;
        names.push(name);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        theta: model.theta,
        y_th: model.y_th,
        max_levels: model.max_levels,
        levels: names,
    };
    fs::write(dir.join("manifest.json"), to_json_bytes(&manifest)?)?;
    Ok(())
}

pub fn load<M: Serialize + DeserializeOwned + Clone>(dir: &Path) -> Result<HierarchyModel<M>> {
    let manifest: Manifest = read_json(dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "hierarchy format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.levels.is_empty() {
        return Err(Error::Format("hierarchy manifest lists no levels".into()));
    }
    let levels = manifest
        .levels
        .iter()
        .map(|name| {
            if name.contains('/') || name.contains('\\') || name.contains("..") {
                return Err(Error::Format(format!(
                    "level file {name} must be a bare file name"
                )));
            }
            read_json(dir.join(name))
        })
        .collect::<Result<Vec<Level<M>>>>()?;
    Ok(HierarchyModel {
        levels,
        theta: manifest.theta,
        y_th: manifest.y_th,
        max_levels: manifest.max_levels,
    })
}
