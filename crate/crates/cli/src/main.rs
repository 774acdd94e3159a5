//! Command-line front end for the noveltykit detectors.

mod config;
mod eval;
mod io;
mod trajectory;
mod video;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use noveltykit::{Error, ErrorKind, Result};

use crate::config::RunConfig;
use crate::io::Run;

#[derive(Parser)]
#[command(
    name = "noveltykit",
    version,
    about = "Novelty and anomaly detection toolkit"
)]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `mjpf.n_particles=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patrol trajectory and its labels.
    Simulate {
        /// Scenario JSON; defaults to the `simulate` config section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Turn a tracklet CSV into per-frame descriptors.
    LbtExtract {
        #[arg(long)]
        tracklets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar of a previous extraction whose quantizer to reuse.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Number of frames; defaults to the last tracklet frame plus one.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a one-class SVM on normal descriptors.
    LbtTrain {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score descriptors with a trained one-class SVM.
    LbtScore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a binary hashing rotation from dense features.
    ItqFit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode dense features into per-cell hex codes.
    ItqEncode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute commotion maps from code grids.
    Tcp {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame maximum as `frame,value` CSV.
        #[arg(long)]
        signal: Option<PathBuf>,
    },
    /// Fuse commotion maps with optical flow.
    Fuse {
        #[arg(long)]
        tcp: PathBuf,
        /// Flow files in frame order, or one directory of `.nvfl` files.
        #[arg(long, required = true, num_args = 1..)]
        flow: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        signal: Option<PathBuf>,
    },
    /// Learn the shared-level vocabulary and transitions from trajectories.
    SlTrain {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the particle filter and write the abnormality signal.
    MjpfRun {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a hierarchy of predictors from a seed set and a wider corpus.
    HierBuild {
        #[arg(long, required = true, num_args = 1..)]
        seed: Vec<PathBuf>,
        #[arg(long = "in", num_args = 0..)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trajectory against a built hierarchy.
    HierEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROC, AUC and EER of a score column against labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Score column name; defaults to the second column.
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        labels: PathBuf,
        /// Normal-run scores used to calibrate a detection threshold.
        #[arg(long)]
        normal: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::LbtExtract { .. } => "lbt-extract",
            Command::LbtTrain { .. } => "lbt-train",
            Command::LbtScore { .. } => "lbt-score",
            Command::ItqFit { .. } => "itq-fit",
            Command::ItqEncode { .. } => "itq-encode",
            Command::Tcp { .. } => "tcp",
            Command::Fuse { .. } => "fuse",
            Command::SlTrain { .. } => "sl-train",
            Command::MjpfRun { .. } => "mjpf-run",
            Command::HierBuild { .. } => "hier-build",
            Command::HierEval { .. } => "hier-eval",
            Command::Eval { .. } => "eval",
        }
    }

    fn paths(&self) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let one = |p: &PathBuf| vec![p.clone()];
        let opt = |p: &Option<PathBuf>| p.iter().cloned().collect::<Vec<_>>();
        match self {
            Command::Simulate { spec, out, labels } => {
                (opt(spec), [one(out), opt(labels)].concat())
            }
            Command::LbtExtract {
                tracklets,
                out,
                reference,
                ..
            } => (
                [one(tracklets), opt(reference)].concat(),
                vec![out.clone(), video::sidecar_path(out)],
            ),
            Command::LbtTrain { inputs, out } | Command::SlTrain { inputs, out } => {
                (inputs.clone(), one(out))
            }
            Command::LbtScore { model, input, out }
            | Command::ItqEncode { model, input, out }
            | Command::MjpfRun { model, input, out }
            | Command::HierEval { model, input, out } => {
                (vec![model.clone(), input.clone()], one(out))
            }
            Command::ItqFit { input, out } => (one(input), one(out)),
            Command::Tcp { codes, out, signal } => (one(codes), [one(out), opt(signal)].concat()),
            Command::Fuse {
                tcp,
                flow,
                out,
                signal,
            } => (
                [one(tcp), flow.clone()].concat(),
                [one(out), opt(signal)].concat(),
            ),
            Command::HierBuild { seed, inputs, out } => {
                ([seed.clone(), inputs.clone()].concat(), one(out))
            }
            Command::Eval {
                scores,
                labels,
                normal,
                out,
                roc,
                ..
            } => (
                [one(scores), one(labels), opt(normal)].concat(),
                [one(out), opt(roc)].concat(),
            ),
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let (inputs, outputs) = cli.command.paths();
    io::check_disjoint(&inputs, &outputs)?;
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(Error::InvalidInput(format!(
            "input {} does not exist",
            missing.display()
        )));
    }
    let mut run = Run::new(&cfg, cli.command.name());
    match &cli.command {
        Command::Simulate { spec, out, labels } => {
            trajectory::simulate(&mut run, spec.as_deref(), out, labels.as_deref())
        }
        Command::LbtExtract {
            tracklets,
            out,
            reference,
            frames,
        } => video::lbt_extract(&mut run, tracklets, out, reference.as_deref(), *frames),
        Command::LbtTrain { inputs, out } => video::lbt_train(&mut run, inputs, out),
        Command::LbtScore { model, input, out } => video::lbt_score(&mut run, model, input, out),
        Command::ItqFit { input, out } => video::itq_fit(&mut run, input, out),
        Command::ItqEncode { model, input, out } => video::itq_encode(&mut run, model, input, out),
        Command::Tcp { codes, out, signal } => video::tcp(&mut run, codes, out, signal.as_deref()),
        Command::Fuse {
            tcp,
            flow,
            out,
            signal,
        } => video::fuse(&mut run, tcp, flow, out, signal.as_deref()),
        Command::SlTrain { inputs, out } => trajectory::sl_train(&mut run, inputs, out),
        Command::MjpfRun { model, input, out } => trajectory::mjpf_run(&mut run, model, input, out),
        Command::HierBuild { seed, inputs, out } => {
            trajectory::hier_build(&mut run, seed, inputs, out)
        }
        Command::HierEval { model, input, out } => {
            trajectory::hier_eval(&mut run, model, input, out)
        }
        Command::Eval {
            scores,
            column,
            labels,
            normal,
            out,
            roc,
        } => eval::eval(
            &mut run,
            eval::EvalArgs {
                scores,
                column: column.as_deref(),
                labels,
                normal: normal.as_deref(),
                out,
                roc: roc.as_deref(),
            },
        ),
    }?;
    run.finish()
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let step = match &e {
                Error::AtStep { step, .. } => Some(*step),
                _ => None,
            };
            let body = serde_json::json!({
                "error": {
                    "kind": format!("{kind:?}").to_lowercase(),
                    "message": e.to_string(),
                    "step": step,
                }
            });
            eprintln!("{body}");
            ExitCode::from(exit_code(kind))
        }
    }
}
