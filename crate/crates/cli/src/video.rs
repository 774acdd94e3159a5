//! Video pipeline: tracklet descriptors with a one-class SVM, binary
//! feature codes, commotion maps and their fusion with optical flow.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use noveltykit::binhash::{self, ItqModel};
use noveltykit::dataio::{self, FlowMap, ScalarMap};
use noveltykit::lbt::{self, EncodedTracklet, Membership, QuantizerConfig, Tessellation};
use noveltykit::ocsvm::{self, OcSvmModel};
use noveltykit::tcp::{self, CellMap, CodeGrid, Support};
use noveltykit::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::io::Run;

/// Settings an extraction ran with, so test videos can reuse the training
/// quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorSidecar {
    pub tracklet_length: usize,
    pub quantizer: QuantizerConfig,
    pub tessellation: Tessellation,
    pub membership: Membership,
    pub first_frame: i64,
    pub n_frames: usize,
    pub tracklets: usize,
    pub dropped: usize,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn lbt_extract(
    run: &mut Run,
    tracklets: &Path,
    out: &Path,
    reference: Option<&Path>,
    frames: Option<usize>,
) -> Result<()> {
    let reference: Option<DescriptorSidecar> = reference
        .map(|p| dataio::read_json(run.input(p)))
        .transpose()?;
    let cfg = &run.cfg.lbt;
    let length = reference
        .as_ref()
        .map_or(cfg.tracklet_length, |r| r.tracklet_length);
    let load = dataio::read_tracklets(run.input(tracklets), length, cfg.strict)?;
    for w in &load.warnings {
        log::warn!("{w}");
    }
    if load.tracklets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no usable tracklets in {}",
            tracklets.display()
        )));
    }
    let (quantizer, tess, membership) = match &reference {
        Some(r) => (r.quantizer, r.tessellation, r.membership),
        None => {
            let q = match cfg.magnitude_max {
                Some(_) => cfg.quantizer(),
                None => cfg
                    .quantizer()
                    .with_percentile_cap(&load.tracklets, cfg.magnitude_percentile),
            };
            (q, cfg.tessellation(), cfg.membership)
        }
    };
    quantizer.validate()?;
    tess.validate()?;
    let last = load
        .tracklets
        .iter()
        .map(|t| t.start_frame + t.length() as i64)
        .max()
        .unwrap_or(0);
    let n_frames = frames.unwrap_or(last.max(0) as usize + 1);
    let n_tracklets = load.tracklets.len();
    let encoded: Vec<EncodedTracklet> = load
        .tracklets
        .into_iter()
        .map(|t| EncodedTracklet::new(t, &quantizer))
        .collect();
    let code_len = length * quantizer.pattern_len();
    let descs = lbt::frame_descriptors(&encoded, &tess, membership, code_len, 0, n_frames);

    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = tess.patches() * code_len;
    let mut header = vec!["frame".to_string()];
    header.extend((0..dim).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for d in &descs {
        let mut rec = vec![d.frame.to_string()];
        rec.extend(d.values.iter().map(u32::to_string));
        w.write_record(&rec)?;
    }
    run.write(out, &finish_csv(w)?)?;
    let sidecar = DescriptorSidecar {
        tracklet_length: length,
        quantizer,
        tessellation: tess,
        membership,
        first_frame: 0,
        n_frames,
        tracklets: n_tracklets,
        dropped: load.warnings.len(),
    };
    run.write(&sidecar_path(out), &dataio::to_json_bytes(&sidecar)?)
}

/// Frame indices and rows of a `frame,d0,d1,...` descriptor table.
pub fn read_descriptors(path: &Path) -> Result<(Vec<i64>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.get(0) != Some("frame") {
        return Err(Error::Format(format!(
            "{} is not a descriptor table",
            path.display()
        )));
    }
    let (mut frames, mut rows) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let bad = |m: String| Error::Parse { line, message: m };
        frames.push(
            rec[0]
                .parse::<i64>()
                .map_err(|e| bad(format!("frame: {e}")))?,
        );
        rows.push(
            rec.iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value: {e}"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((frames, rows))
}

pub fn lbt_train(run: &mut Run, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut data = Vec::new();
    for p in inputs {
        data.extend(read_descriptors(run.input(p))?.1);
    }
    let model = ocsvm::train(&data, &run.cfg.ocsvm)?;
    if !model.converged {
        log::warn!(
            "one-class SVM stopped after {} iterations without converging",
            model.iterations
        );
    }
    run.write(out, &dataio::to_json_bytes(&model)?)
}

pub fn lbt_score(run: &mut Run, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let model: OcSvmModel = dataio::read_json(run.input(model))?;
    let (frames, rows) = read_descriptors(run.input(input))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "score", "abnormality"])?;
    for (f, x) in frames.iter().zip(&rows) {
        let s = model.score(x)?;
        w.write_record([f.to_string(), s.to_string(), (-s).to_string()])?;
    }
    run.write(out, &finish_csv(w)?)
}

fn read_features(path: &Path) -> Result<Vec<dataio::FeatureFrame>> {
    dataio::read_feature_maps(path)?.collect()
}

pub fn itq_fit(run: &mut Run, input: &Path, out: &Path) -> Result<()> {
    let frames = read_features(run.input(input))?;
    let dim = frames.first().map_or(0, |f| f.dim as usize);
    let values: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.values.iter().map(|&v| f64::from(v)))
        .collect();
    let n = values.len() / dim.max(1);
    let data = DMatrix::from_row_slice(n, dim, &values);
    let c = &run.cfg.itq;
    let model = binhash::fit_capped_with(
        &data,
        c.bits,
        c.iterations,
        run.cfg.seed,
        c.train_cap,
        c.init,
    )?;
    log::info!(
        "quantization loss {:.4} -> {:.4}",
        model.loss_history.first().copied().unwrap_or(f64::NAN),
        model.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    run.write(out, &dataio::to_json_bytes(&model)?)
}

const CODES_MAGIC: &str = "nvcodes";

/// Header line `nvcodes <grid_w> <grid_h> <bits>`, then one line per frame
/// with the grid's codes in row-major order as space-separated hex.
pub fn itq_encode(run: &mut Run, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let model: ItqModel = dataio::read_json(run.input(model))?;
    let frames = read_features(run.input(input))?;
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("feature file has no frames".into()))?;
    let mut text = format!(
        "{CODES_MAGIC} {} {} {}\n",
        first.grid_w, first.grid_h, model.bits
    );
    let mut cell = Vec::new();
    for f in &frames {
        let codes = f
            .cells()
            .map(|c| {
                cell.clear();
                cell.extend(c.iter().map(|&v| f64::from(v)));
                model.encode(&cell).map(|b| b.to_hex())
            })
            .collect::<Result<Vec<_>>>()?;
        text.push_str(&codes.join(" "));
        text.push('\n');
    }
    run.write(out, text.as_bytes())
}

pub fn read_codes(path: &Path) -> Result<(Vec<CodeGrid>, u32)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let bad_header = || {
        Error::Format(format!(
            "{} lacks a `{CODES_MAGIC} w h bits` header",
            path.display()
        ))
    };
    if header.len() != 4 || header[0] != CODES_MAGIC {
        return Err(bad_header());
    }
    let nums: Vec<usize> = header[1..]
        .iter()
        .map(|v| v.parse().map_err(|_| bad_header()))
        .collect::<Result<_>>()?;
    let (cols, rows, bits) = (nums[0], nums[1], nums[2]);
    if bits == 0 || bits > 32 {
        return Err(Error::Format(format!(
            "code width {bits} is outside 1..=32"
        )));
    }
    let mut grids = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let codes = line
            .split_whitespace()
            .map(|h| {
                u32::from_str_radix(h, 16)
                    .ok()
                    .filter(|&c| bits == 32 || c >> bits == 0)
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("`{h}` is not a {bits}-bit hex code"),
                    })
            })
            .collect::<Result<Vec<u32>>>()?;
        if codes.len() != rows * cols {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} codes, found {}", rows * cols, codes.len()),
            });
        }
        grids.push(CodeGrid { rows, cols, codes });
    }
    Ok((grids, bits as u32))
}

fn maps_to_nvm1(maps: impl IntoIterator<Item = (usize, usize, Vec<f64>)>) -> Result<Vec<u8>> {
    let maps = maps
        .into_iter()
        .map(|(w, h, v)| {
            ScalarMap::new(
                w as u32,
                h as u32,
                v.into_iter().map(|x| x as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(dataio::encode_scalar_maps(&maps))
}

fn signal_csv(rows: impl IntoIterator<Item = (usize, f64)>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "value"])?;
    for (f, v) in rows {
        w.write_record([f.to_string(), v.to_string()])?;
    }
    finish_csv(w)
}

pub fn tcp(run: &mut Run, codes: &Path, out: &Path, signal: Option<&Path>) -> Result<()> {
    let (grids, bits) = read_codes(run.input(codes))?;
    let c = &run.cfg.tcp;
    let blocks = tcp::build_blocks(&grids, &c.block)?;
    let support = if c.all_bins {
        Support::AllBins { bits }
    } else {
        Support::observed_in(&grids)
    };
    let mut maps = blocks
        .iter()
        .map(|b| tcp::tcp_map(b, &support))
        .collect::<Result<Vec<CellMap>>>()?;
    tcp::normalize_maps(&mut maps, c.background);
    run.write(
        out,
        &maps_to_nvm1(maps.iter().map(|m| (m.cols, m.rows, m.values.clone())))?,
    )?;
    if let Some(s) = signal {
        run.write(s, &signal_csv(maps.iter().map(|m| (m.frame, m.max())))?)?;
    }
    Ok(())
}

fn flow_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [dir] = paths {
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "nvfl"))
                .collect();
            files.sort();
            return Ok(files);
        }
    }
    Ok(paths.to_vec())
}

/// Combines commotion maps with per-block flow magnitude maps, both
/// normalized per video, upsamples to flow resolution and keeps only moving
/// pixels. Map `i` covers frames `i * stride .. i * stride + length`.
pub fn fuse(
    run: &mut Run,
    tcp_maps: &Path,
    flow: &[PathBuf],
    out: &Path,
    signal: Option<&Path>,
) -> Result<()> {
    let maps = dataio::read_scalar_maps(run.input(tcp_maps))?;
    let flows = flow_files(flow)?
        .iter()
        .map(|p| dataio::read_flowmap(run.input(p)))
        .collect::<Result<Vec<FlowMap>>>()?;
    let first = flows
        .first()
        .ok_or_else(|| Error::InvalidInput("no flow maps given".into()))?;
    let (fw, fh) = (first.width as usize, first.height as usize);
    if flows
        .iter()
        .any(|f| (f.width as usize, f.height as usize) != (fw, fh))
    {
        return Err(Error::InvalidInput("flow maps differ in size".into()));
    }
    let c = &run.cfg.tcp;
    let spec = c.block;
    let mut tcp_cells = Vec::with_capacity(maps.len());
    let mut flow_cells = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let (rows, cols) = (m.height as usize, m.width as usize);
        let start = i * spec.stride();
        let frame = start + spec.length / 2;
        tcp_cells.push(CellMap {
            frame,
            rows,
            cols,
            values: m.values.iter().map(|&v| f64::from(v)).collect(),
        });
        flow_cells.push(tcp::block_flow_map(
            &flows,
            start..start + spec.length,
            frame,
            rows,
            cols,
        )?);
    }
    tcp::normalize_maps(&mut flow_cells, c.background);
    let mut dense = Vec::with_capacity(maps.len());
    for (t, d) in tcp_cells.iter().zip(&flow_cells) {
        let fused = tcp::fuse(t, d, &c.fusion)?;
        let up = tcp::upsample(&fused, fw, fh);
        dense.push((fused.frame, tcp::motion_mask(&up, &flows[fused.frame])?));
    }
    run.write(
        out,
        &maps_to_nvm1(
            dense
                .iter()
                .map(|(_, m)| (m.width, m.height, m.values.clone())),
        )?,
    )?;
    if let Some(s) = signal {
        let rows = dense
            .iter()
            .map(|(f, m)| (*f, m.values.iter().copied().fold(0.0, f64::max)));
        run.write(s, &signal_csv(rows)?)?;
    }
    Ok(())
}
