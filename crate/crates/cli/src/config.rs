//! Run configuration: one JSON document with a section per stage, plus
//! dotted `key=value` overrides.

use std::path::Path;

use noveltykit::binhash::RotationInit;
use noveltykit::hierarchy::HierarchyConfig;
use noveltykit::lbt::{Membership, QuantizerConfig, Tessellation};
use noveltykit::mjpf::{AbnormalityNorm, MjpfConfig};
use noveltykit::ocsvm::OcSvmConfig;
use noveltykit::simulator::ScenarioSpec;
use noveltykit::som::SomConfig;
use noveltykit::swdbn::{Adjacency, SlConfig, SomWeights};
use noveltykit::tcp::{BlockSpec, FusionWeights, BACKGROUND_THRESHOLD};
use noveltykit::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every stochastic stage (SOMs, ITQ rotation, particle filter).
    pub seed: u64,
    pub simulate: ScenarioSpec,
    pub lbt: LbtSection,
    pub ocsvm: OcSvmConfig,
    pub itq: ItqSection,
    pub tcp: TcpSection,
    pub swdbn: SwdbnSection,
    pub mjpf: MjpfSection,
    pub hierarchy: HierarchySection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbtSection {
    /// Motion steps per tracklet (`L`); files hold `L + 1` points each.
    pub tracklet_length: usize,
    /// Reject (instead of drop) tracklets with the wrong point count.
    pub strict: bool,
    pub orientation_bins: usize,
    pub magnitude_bins: usize,
    /// Fixed magnitude cap; `null` derives it from `magnitude_percentile`.
    pub magnitude_max: Option<f64>,
    pub magnitude_percentile: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub frame_width: f64,
    pub frame_height: f64,
    pub membership: Membership,
}

impl Default for LbtSection {
    fn default() -> Self {
        Self {
            tracklet_length: 11,
            strict: false,
            orientation_bins: 8,
            magnitude_bins: 5,
            magnitude_max: None,
            magnitude_percentile: 95.0,
            grid_rows: 4,
            grid_cols: 6,
            frame_width: 360.0,
            frame_height: 240.0,
            membership: Membership::MiddlePoint,
        }
    }
}

impl LbtSection {
    pub fn quantizer(&self) -> QuantizerConfig {
        QuantizerConfig {
            orientation_bins: self.orientation_bins,
            magnitude_bins: self.magnitude_bins,
            magnitude_max: self
                .magnitude_max
                .unwrap_or(QuantizerConfig::default().magnitude_max),
        }
    }

    pub fn tessellation(&self) -> Tessellation {
        Tessellation {
            rows: self.grid_rows,
            cols: self.grid_cols,
            width: self.frame_width,
            height: self.frame_height,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tracklet_length == 0 {
            return Err(Error::Config("lbt.tracklet_length must be positive".into()));
        }
        if !(self.magnitude_percentile > 0.0 && self.magnitude_percentile <= 100.0) {
            return Err(Error::Config(
                "lbt.magnitude_percentile must be in (0, 100]".into(),
            ));
        }
        self.quantizer().validate()?;
        self.tessellation().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItqSection {
    pub bits: usize,
    pub iterations: usize,
    /// Training cells above this count are uniformly subsampled.
    pub train_cap: usize,
    pub init: RotationInit,
}

impl Default for ItqSection {
    fn default() -> Self {
        Self {
            bits: 7,
            iterations: 50,
            train_cap: noveltykit::binhash::DEFAULT_TRAIN_CAP,
            init: RotationInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcpSection {
    pub block: BlockSpec,
    /// Evaluate every histogram over all `2^bits` codes instead of the codes
    /// observed in the video.
    pub all_bins: bool,
    pub background: f64,
    pub fusion: FusionWeights,
}

impl Default for TcpSection {
    fn default() -> Self {
        Self {
            block: BlockSpec::default(),
            all_bins: false,
            background: BACKGROUND_THRESHOLD,
            fusion: FusionWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwdbnSection {
    pub dt: f64,
    pub observation_sigma: f64,
    pub process_noise: f64,
    pub unmotivated_process_noise: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub epochs: usize,
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
    pub alpha: f64,
    pub beta: f64,
    pub adjacency: Adjacency,
    pub dwell_edges: Vec<u32>,
    pub smoothing: bool,
}

impl Default for SwdbnSection {
    fn default() -> Self {
        let sl = SlConfig::default();
        Self {
            dt: sl.dt,
            observation_sigma: sl.observation_sigma,
            process_noise: sl.process_noise,
            unmotivated_process_noise: sl.unmotivated_process_noise,
            grid_rows: sl.som.rows,
            grid_cols: sl.som.cols,
            epochs: sl.som.epochs,
            sigma_start: sl.som.sigma_start,
            sigma_end: sl.som.sigma_end,
            alpha: sl.weights.alpha,
            beta: sl.weights.beta,
            adjacency: sl.adjacency,
            dwell_edges: sl.dwell_edges,
            smoothing: sl.smoothing,
        }
    }
}

impl SwdbnSection {
    pub fn to_core(&self, seed: u64) -> SlConfig {
        SlConfig {
            dt: self.dt,
            observation_sigma: self.observation_sigma,
            process_noise: self.process_noise,
            unmotivated_process_noise: self.unmotivated_process_noise,
            som: SomConfig {
                rows: self.grid_rows,
                cols: self.grid_cols,
                epochs: self.epochs,
                sigma_start: self.sigma_start,
                sigma_end: self.sigma_end,
                seed,
            },
            weights: SomWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            adjacency: self.adjacency,
            dwell_edges: self.dwell_edges.clone(),
            smoothing: self.smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MjpfSection {
    pub n_particles: usize,
    pub resample_threshold: f64,
    pub norm: AbnormalityNorm,
}

impl Default for MjpfSection {
    fn default() -> Self {
        let m = MjpfConfig::default();
        Self {
            n_particles: m.n_particles,
            resample_threshold: m.resample_threshold,
            norm: m.norm,
        }
    }
}

impl MjpfSection {
    pub fn to_core(&self, seed: u64) -> MjpfConfig {
        MjpfConfig {
            n_particles: self.n_particles,
            resample_threshold: self.resample_threshold,
            seed,
            norm: self.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySection {
    pub theta: Option<f64>,
    pub max_levels: usize,
    pub merge_spawns: bool,
    pub cluster_rows: usize,
    pub cluster_cols: usize,
    pub validity_rows: usize,
    pub validity_cols: usize,
    pub epochs: usize,
    pub y_th_percentile: f64,
    pub ridge: f64,
}

impl Default for HierarchySection {
    fn default() -> Self {
        let h = HierarchyConfig::default();
        Self {
            theta: h.theta,
            max_levels: h.max_levels,
            merge_spawns: h.merge_spawns,
            cluster_rows: h.cluster_som.rows,
            cluster_cols: h.cluster_som.cols,
            validity_rows: h.validity_som.rows,
            validity_cols: h.validity_som.cols,
            epochs: h.cluster_som.epochs,
            y_th_percentile: h.y_th_percentile,
            ridge: noveltykit::hierarchy::LinearPredictor::default().ridge,
        }
    }
}

impl HierarchySection {
    pub fn to_core(&self, seed: u64) -> HierarchyConfig {
        let som = |rows, cols| SomConfig {
            rows,
            cols,
            epochs: self.epochs,
            seed,
            ..SomConfig::default()
        };
        HierarchyConfig {
            theta: self.theta,
            max_levels: self.max_levels,
            merge_spawns: self.merge_spawns,
            cluster_som: som(self.cluster_rows, self.cluster_cols),
            validity_som: som(self.validity_rows, self.validity_cols),
            y_th_percentile: self.y_th_percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Percentile of a normal-run signal used as the anomaly threshold.
    pub calibration_percentile: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            calibration_percentile: 99.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?;
                // reject unknown keys before defaults are merged in
                serde_json::from_value::<RunConfig>(v.clone())
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?;
                merge(serde_json::to_value(RunConfig::default())?, v)
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.lbt.validate()?;
        self.ocsvm.validate()?;
        if self.itq.bits == 0 || self.itq.bits > 32 {
            return Err(Error::Config("itq.bits must be in 1..=32".into()));
        }
        if self.itq.train_cap < 2 {
            return Err(Error::Config("itq.train_cap must be at least 2".into()));
        }
        self.tcp.block.validate()?;
        self.tcp.fusion.validate()?;
        if !(0.0..1.0).contains(&self.tcp.background) {
            return Err(Error::Config("tcp.background must be in [0, 1)".into()));
        }
        self.swdbn.to_core(self.seed).validate()?;
        if self.swdbn.dwell_edges.windows(2).any(|w| w[0] >= w[1])
            || self.swdbn.dwell_edges.first() == Some(&0)
        {
            return Err(Error::Config(
                "swdbn.dwell_edges must be positive and increasing".into(),
            ));
        }
        self.mjpf.to_core(self.seed).validate()?;
        self.hierarchy.to_core(self.seed).validate()?;
        if !(self.hierarchy.ridge >= 0.0 && self.hierarchy.ridge.is_finite()) {
            return Err(Error::Config("hierarchy.ridge must be non-negative".into()));
        }
        if !(0.0..=100.0).contains(&self.eval.calibration_percentile) {
            return Err(Error::Config(
                "eval.calibration_percentile must be in [0, 100]".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, o) => o,
    }
}

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a
/// string. The key must already exist in the configuration.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
