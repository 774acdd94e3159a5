#![allow(dead_code)]

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use noveltykit::dataio::{self, FeatureFrame, FlowMap};
use noveltykit::lbt::Tracklet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noveltykit"))
}

/// Runs the binary in `dir` and returns its output.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn noveltykit")
}

pub fn run_ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn write_json(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Random tracklets of `length` steps inside a 360 x 240 frame.
pub fn random_tracklets(n: usize, length: usize, frames: i64, seed: u64) -> Vec<Tracklet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let mut p = (rng.random_range(0.0..360.0), rng.random_range(0.0..240.0));
            let v: (f64, f64) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let points = (0..=length)
                .map(|_| {
                    let cur = p;
                    p.0 += v.0 + rng.random_range(-1.0..1.0);
                    p.1 += v.1 + rng.random_range(-1.0..1.0);
                    cur
                })
                .collect();
            Tracklet {
                id: id as u64,
                start_frame: rng.random_range(0..frames),
                points,
            }
        })
        .collect()
}

/// Inputs for every video subcommand, written into `dir`.
pub struct VideoFixture {
    pub tracklets: PathBuf,
    pub features: PathBuf,
    pub flow_dir: PathBuf,
    pub labels: PathBuf,
}

pub fn video_fixture(dir: &Path) -> VideoFixture {
    let tracklets = dir.join("tracklets.csv");
    dataio::write_tracklets(
        File::create(&tracklets).unwrap(),
        &random_tracklets(300, 11, 60, 1),
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<FeatureFrame> = (0..30)
        .map(|_| FeatureFrame {
            grid_w: 6,
            grid_h: 4,
            dim: 16,
            values: (0..6 * 4 * 16)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        })
        .collect();
    let features = dir.join("features.nvfs");
    dataio::write_feature_maps(File::create(&features).unwrap(), &frames).unwrap();

    let flow_dir = dir.join("flow");
    fs::create_dir_all(&flow_dir).unwrap();
    for f in 0..30 {
        let cells = (0..36 * 24)
            .map(|i| {
                if (i + f) % 5 == 0 {
                    (0.0, 0.0)
                } else {
                    (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
                }
            })
            .collect();
        let map = FlowMap::new(36, 24, cells).unwrap();
        dataio::write_flowmap(
            File::create(flow_dir.join(format!("{f:04}.nvfl"))).unwrap(),
            &map,
        )
        .unwrap();
    }

    let labels = dir.join("frame_labels.csv");
    let l: Vec<bool> = (0..72).map(|f| (30..45).contains(&f)).collect();
    dataio::write_labels(File::create(&labels).unwrap(), &l).unwrap();

    VideoFixture {
        tracklets,
        features,
        flow_dir,
        labels,
    }
}

pub const NORMAL_SPEC: &str = r#"{"seed": 1, "anomaly": {"kind": "none"}}"#;
pub const UTURN_SPEC: &str = r#"{"seed": 3, "anomaly": {"kind": "u_turn", "trigger_index": 500}}"#;

/// Every subcommand, run in `dir` with relative paths.
pub fn full_pipeline(dir: &Path) {
    video_fixture(dir);
    write_json(&dir.join("normal.json"), NORMAL_SPEC);
    write_json(&dir.join("uturn.json"), UTURN_SPEC);
    let steps: &[&[&str]] = &[
        &["simulate", "--spec", "normal.json", "--out", "train.csv"],
        &[
            "simulate",
            "--spec",
            "uturn.json",
            "--out",
            "test.csv",
            "--labels",
            "labels.csv",
        ],
        &["sl-train", "--in", "train.csv", "--out", "model.json"],
        &[
            "mjpf-run",
            "--model",
            "model.json",
            "--in",
            "test.csv",
            "--out",
            "signal.csv",
        ],
        &[
            "mjpf-run",
            "--model",
            "model.json",
            "--in",
            "train.csv",
            "--out",
            "normal_signal.csv",
        ],
        &[
            "eval",
            "--scores",
            "signal.csv",
            "--column",
            "Y",
            "--labels",
            "labels.csv",
            "--normal",
            "normal_signal.csv",
            "--out",
            "eval.json",
            "--roc",
            "roc.csv",
        ],
        &["hier-build", "--seed", "train.csv", "--out", "hier"],
        &[
            "hier-eval",
            "--model",
            "hier",
            "--in",
            "test.csv",
            "--out",
            "hier.csv",
        ],
        &[
            "lbt-extract",
            "--tracklets",
            "tracklets.csv",
            "--out",
            "desc.csv",
        ],
        &[
            "lbt-extract",
            "--tracklets",
            "tracklets.csv",
            "--reference",
            "desc.csv.json",
            "--out",
            "desc_test.csv",
        ],
        &["lbt-train", "--in", "desc.csv", "--out", "svm.json"],
        &[
            "lbt-score",
            "--model",
            "svm.json",
            "--in",
            "desc_test.csv",
            "--out",
            "lbt_scores.csv",
        ],
        &[
            "eval",
            "--scores",
            "lbt_scores.csv",
            "--column",
            "abnormality",
            "--labels",
            "frame_labels.csv",
            "--out",
            "lbt_eval.json",
        ],
        &["itq-fit", "--in", "features.nvfs", "--out", "itq.json"],
        &[
            "itq-encode",
            "--model",
            "itq.json",
            "--in",
            "features.nvfs",
            "--out",
            "codes.txt",
        ],
        &[
            "tcp",
            "--codes",
            "codes.txt",
            "--out",
            "tcp.nvm1",
            "--signal",
            "tcp.csv",
        ],
        &[
            "fuse",
            "--tcp",
            "tcp.nvm1",
            "--flow",
            "flow",
            "--out",
            "fused.nvm1",
            "--signal",
            "fused.csv",
        ],
    ];
    for args in steps {
        run_ok(dir, args);
    }
}

/// Relative path and contents of every file under `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
