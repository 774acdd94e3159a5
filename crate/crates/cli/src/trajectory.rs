//! Trajectory pipeline: simulation, shared-level training, the particle
//! filter and the hierarchy of predictors.

use std::path::{Path, PathBuf};

use noveltykit::dataio::{self, TrajectoryRecord};
use noveltykit::hierarchy::{self, HierarchyModel, LinearPredictor, LinearWeights, Sample};
use noveltykit::simulator::{self, ScenarioSpec};
use noveltykit::swdbn::{self, SharedLevelModel};
use noveltykit::{mjpf, Error, Result};

use crate::io::Run;

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn simulate(
    run: &mut Run,
    spec: Option<&Path>,
    out: &Path,
    labels: Option<&Path>,
) -> Result<()> {
    let spec: ScenarioSpec = match spec {
        Some(p) => dataio::read_json(run.input(p)).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("scenario {}: {j}", p.display())),
            other => other,
        })?,
        None => run.cfg.simulate.clone(),
    };
    spec.validate()?;
    let sc = simulator::simulate(&spec)?;
    run.write(
        out,
        &csv_bytes(|b| dataio::write_trajectory(b, &sc.trajectory))?,
    )?;
    if let Some(l) = labels {
        run.write(
            l,
            &csv_bytes(|b| dataio::write_labels(b, &sc.labels.labels))?,
        )?;
    }
    Ok(())
}

fn read_trajectories(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<Vec<TrajectoryRecord>>> {
    paths
        .iter()
        .map(|p| dataio::read_trajectory_all(run.input(p)))
        .collect()
}

pub fn sl_train(run: &mut Run, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let trajs = read_trajectories(run, inputs)?;
    let cfg = run.cfg.swdbn.to_core(run.cfg.seed);
    let training = swdbn::train(&trajs, &cfg)?;
    let empty = training
        .model
        .superstates
        .iter()
        .filter(|s| s.empty)
        .count();
    log::info!(
        "trained {} superstates ({empty} empty) from {} states",
        training.model.superstates.len(),
        training.states.len()
    );
    run.write(out, &dataio::to_json_bytes(&training.model)?)
}

pub fn load_sl_model(run: &mut Run, path: &Path) -> Result<SharedLevelModel> {
    let model: SharedLevelModel = dataio::read_json(run.input(path))?;
    model.check_version()?;
    Ok(model)
}

pub fn mjpf_run(run: &mut Run, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_sl_model(run, model)?;
    let obs = dataio::read_trajectory_all(run.input(input))?;
    let cfg = run.cfg.mjpf.to_core(run.cfg.seed);
    let output = mjpf::run(&obs, &model, &cfg)?;
    run.write(out, &csv_bytes(|b| mjpf::write_signal(b, &output.signal))?)
}

/// One sample per consecutive pair of filtered generalized states: the
/// current state predicts the next. Returns the samples with the time of
/// each target.
pub fn state_samples(run: &Run, traj: &[TrajectoryRecord]) -> Result<Vec<(u64, Sample)>> {
    let ukf = run.cfg.swdbn.to_core(run.cfg.seed).unmotivated_model();
    let steps = swdbn::unmotivated_filter(traj, &ukf)?;
    Ok(steps
        .windows(2)
        .map(|w| {
            (
                w[1].t,
                Sample {
                    input: w[0].state().as_slice().to_vec(),
                    target: w[1].state().as_slice().to_vec(),
                },
            )
        })
        .collect())
}

fn predictor(run: &Run) -> LinearPredictor {
    LinearPredictor {
        ridge: run.cfg.hierarchy.ridge,
    }
}

pub fn hier_build(run: &mut Run, seed: &[PathBuf], inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut corpus = Vec::new();
    for traj in read_trajectories(run, seed)? {
        corpus.extend(state_samples(run, &traj)?.into_iter().map(|(_, s)| s));
    }
    let seed_subset: Vec<usize> = (0..corpus.len()).collect();
    for traj in read_trajectories(run, inputs)? {
        corpus.extend(state_samples(run, &traj)?.into_iter().map(|(_, s)| s));
    }
    let cfg = run.cfg.hierarchy.to_core(run.cfg.seed);
    let model = hierarchy::build(&predictor(run), &corpus, &seed_subset, &cfg)?;
    log::info!(
        "hierarchy has {} levels (theta {})",
        model.levels.len(),
        model.theta
    );
    run.write_dir(out, |dir| hierarchy::save(&model, dir))
}

pub fn hier_eval(run: &mut Run, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let h: HierarchyModel<LinearWeights> = hierarchy::load(run.input(model))?;
    let traj = dataio::read_trajectory_all(run.input(input))?;
    let p = predictor(run);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "innovation", "level", "abnormal"])?;
    for (t, s) in state_samples(run, &traj)? {
        let e = h.evaluate(&p, &s);
        w.write_record([
            t.to_string(),
            e.innovation.to_string(),
            e.best_level.to_string(),
            u8::from(e.abnormal).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    run.write(out, &bytes)
}
