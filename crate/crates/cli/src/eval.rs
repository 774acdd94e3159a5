//! Score evaluation against ground-truth labels.

use std::path::Path;

use noveltykit::dataio;
use noveltykit::evalkit::{self, RocPoint, ScoreSet};
use noveltykit::{Error, Result};
use serde::Serialize;

use crate::io::Run;

/// Index column (first) and the named score column of a CSV.
pub fn read_scores(path: &Path, column: Option<&str>) -> Result<Vec<(u64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = match column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{} has no column `{name}`", path.display())))?,
        None if headers.len() >= 2 => 1,
        None => {
            return Err(Error::Format(format!(
                "{} needs an index and a score column",
                path.display()
            )))
        }
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let bad = |m: String| Error::Parse { line, message: m };
        let k = rec[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("index: {e}")))?;
        let v = rec
            .get(col)
            .unwrap_or("")
            .parse::<f64>()
            .map_err(|e| bad(format!("score: {e}")))?;
        out.push((k, v));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Report {
    auc: f64,
    eer: f64,
    roc_points: Vec<RocPoint>,
    n_samples: usize,
    n_abnormal: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flagged: Option<usize>,
}

pub struct EvalArgs<'a> {
    pub scores: &'a Path,
    pub column: Option<&'a str>,
    pub labels: &'a Path,
    pub normal: Option<&'a Path>,
    pub out: &'a Path,
    pub roc: Option<&'a Path>,
}

pub fn eval(run: &mut Run, a: EvalArgs) -> Result<()> {
    let scores = read_scores(run.input(a.scores), a.column)?;
    let labels = dataio::read_labels(run.input(a.labels))?.labels;
    let mut values = Vec::with_capacity(scores.len());
    let mut truth = Vec::with_capacity(scores.len());
    for &(k, v) in &scores {
        let l = labels.get(k as usize).ok_or_else(|| {
            Error::InvalidInput(format!(
                "score index {k} has no label ({} labels)",
                labels.len()
            ))
        })?;
        values.push(v);
        truth.push(*l);
    }
    let set = ScoreSet::new(values.clone(), truth)?;
    let e = evalkit::evaluate(&set)?;
    let threshold = match a.normal {
        Some(p) => {
            let normal: Vec<f64> = read_scores(run.input(p), a.column)?
                .into_iter()
                .map(|r| r.1)
                .collect();
            Some(evalkit::calibrate_threshold(
                &normal,
                run.cfg.eval.calibration_percentile,
            )?)
        }
        None => None,
    };
    let report = Report {
        auc: e.auc,
        eer: e.eer,
        n_samples: set.labels.len(),
        n_abnormal: set.labels.iter().filter(|&&l| l).count(),
        flagged: threshold.map(|t| values.iter().filter(|&&v| v > t).count()),
        threshold,
        roc_points: e.roc_points,
    };
    run.write(a.out, &dataio::to_json_bytes(&report)?)?;
    if let Some(r) = a.roc {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &report.roc_points {
            w.write_record([
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
        run.write(r, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    }
    Ok(())
}
