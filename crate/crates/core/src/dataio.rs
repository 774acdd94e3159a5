//! Readers and writers for the toolkit's interchange files.
//!
//! CSV files are UTF-8, comma separated and always carry a header row.
//! Binary map files are little-endian:
//!
//! * `NVFL` flow map: magic, `u32` width, `u32` height, then `width * height`
//!   `(dx, dy)` pairs of `f32`, row-major.
//! * `NVM1` scalar map: magic, `u32` width, `u32` height, then `width * height`
//!   `f32` values. A file may hold several maps back to back.
//! * `NVFS` feature map sequence: magic, `u32` grid width, `u32` grid height,
//!   `u32` dim, then frames of `grid_w * grid_h * dim` `f32` values until EOF.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind as IoErrorKind, Read, Write};
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbt::Tracklet;

pub const FLOW_MAGIC: &[u8; 4] = b"NVFL";
pub const SCALAR_MAP_MAGIC: &[u8; 4] = b"NVM1";
pub const FEATURE_MAGIC: &[u8; 4] = b"NVFS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

/// Streaming reader over a `t,x,y` trajectory CSV.
pub struct TrajectoryReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    last_t: Option<u64>,
    count: usize,
    failed: bool,
}

impl<R: Read> TrajectoryReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        expect_header(rdr.headers()?, &["t", "x", "y"])?;
        Ok(Self {
            records: rdr.into_records(),
            last_t: None,
            count: 0,
            failed: false,
        })
    }

    /// Number of records yielded so far.
    pub fn records_read(&self) -> usize {
        self.count
    }

    fn parse(&mut self, rec: csv::StringRecord) -> Result<TrajectoryRecord> {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let t: u64 = parse_field(&rec[0], line, "t")?;
        let x: f64 = parse_field(&rec[1], line, "x")?;
        let y: f64 = parse_field(&rec[2], line, "y")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Validation {
                line,
                message: "non-finite position".into(),
            });
        }
        if let Some(prev) = self.last_t {
            if t <= prev {
                return Err(Error::Validation {
                    line,
                    message: format!("t = {t} does not increase (previous {prev})"),
                });
            }
        }
        self.last_t = Some(t);
        Ok(TrajectoryRecord { t, x, y })
    }
}

impl<R: Read> Iterator for TrajectoryReader<R> {
    type Item = Result<TrajectoryRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = match self.records.next()? {
            Ok(rec) => self.parse(rec),
            Err(e) => Err(e.into()),
        };
        match &item {
            Ok(_) => self.count += 1,
            Err(_) => self.failed = true,
        }
        Some(item)
    }
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<TrajectoryReader<BufReader<File>>> {
    TrajectoryReader::new(BufReader::new(File::open(path)?))
}

pub fn read_trajectory_all(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    read_trajectory(path)?.collect()
}

pub fn write_trajectory<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "t,x,y")?;
    for r in records {
        writeln!(w, "{},{},{}", r.t, r.x, r.y)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

/// Ground truth for one sequence: a binary label per frame and optional
/// per-frame pixel masks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub labels: Vec<bool>,
    pub masks: Option<Vec<PixelMask>>,
}

impl LabelTrack {
    pub fn from_labels(labels: Vec<bool>) -> Self {
        Self {
            labels,
            masks: None,
        }
    }

    pub fn with_masks(labels: Vec<bool>, masks: Vec<PixelMask>) -> Result<Self> {
        if masks.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                found: masks.len(),
            });
        }
        if let Some(first) = masks.first() {
            if masks
                .iter()
                .any(|m| m.width != first.width || m.height != first.height)
            {
                return Err(Error::InvalidInput(
                    "pixel masks differ in size across frames".into(),
                ));
            }
        }
        Ok(Self {
            labels,
            masks: Some(masks),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Writes `frame,label` rows.
pub fn write_labels<W: Write>(writer: W, labels: &[bool]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "frame,label")?;
    for (i, &l) in labels.iter().enumerate() {
        writeln!(w, "{},{}", i, u8::from(l))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `frame,label` CSV. Frames must be 0, 1, 2, ... in order.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTrack> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(File::open(path)?));
    expect_header(rdr.headers()?, &["frame", "label"])?;
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let frame: usize = parse_field(rec.get(0).unwrap_or(""), line, "frame")?;
        if frame != labels.len() {
            return Err(Error::Validation {
                line,
                message: format!("expected frame {}, found {frame}", labels.len()),
            });
        }
        let label = match rec.get(1).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        labels.push(label);
    }
    Ok(LabelTrack::from_labels(labels))
}

/// Dense optical-flow field: per-pixel displacement in pixels/frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMap {
    pub width: u32,
    pub height: u32,
    pub cells: Vec<(f32, f32)>,
}

impl FlowMap {
    pub fn new(width: u32, height: u32, cells: Vec<(f32, f32)>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if cells.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: cells.len(),
            });
        }
        if cells
            .iter()
            .any(|(dx, dy)| !dx.is_finite() || !dy.is_finite())
        {
            return Err(Error::Format("non-finite flow value".into()));
        }
        Ok(Self {
            width,
            height,
            cells,
        })
    }

    pub fn magnitude(&self, idx: usize) -> f64 {
        let (dx, dy) = self.cells[idx];
        (f64::from(dx)).hypot(f64::from(dy))
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.cells.len()).map(|i| self.magnitude(i)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.cells.len() * 8);
        buf.extend_from_slice(FLOW_MAGIC);
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.height.to_le_bytes());
        for (dx, dy) in &self.cells {
            buf.extend_from_slice(&dx.to_le_bytes());
            buf.extend_from_slice(&dy.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let (width, height) = read_map_header(&mut cur, FLOW_MAGIC)?;
        let n = width as usize * height as usize;
        if cur.len() < n * 8 {
            return Err(Error::Format(format!(
                "truncated flow payload: need {} bytes, have {}",
                n * 8,
                cur.len()
            )));
        }
        if cur.len() > n * 8 {
            return Err(Error::Format("trailing bytes after flow payload".into()));
        }
        let cells = cur
            .chunks_exact(8)
            .map(|c| {
                (
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                )
            })
            .collect();
        Self::new(width, height, cells)
    }
}

pub fn read_flowmap(path: impl AsRef<Path>) -> Result<FlowMap> {
    FlowMap::decode(&std::fs::read(path)?)
}

pub fn write_flowmap<W: Write>(mut writer: W, map: &FlowMap) -> Result<()> {
    writer.write_all(&map.encode())?;
    writer.flush()?;
    Ok(())
}

/// Single-channel dense map (scores, TCP maps, masks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl ScalarMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite map value".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(SCALAR_MAP_MAGIC);
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_scalar_maps(maps: &[ScalarMap]) -> Vec<u8> {
    let mut buf = Vec::new();
    for m in maps {
        m.encode_into(&mut buf);
    }
    buf
}

pub fn decode_scalar_maps(bytes: &[u8]) -> Result<Vec<ScalarMap>> {
    let mut cur = bytes;
    let mut maps = Vec::new();
    while !cur.is_empty() {
        let (width, height) = read_map_header(&mut cur, SCALAR_MAP_MAGIC)?;
        let n = width as usize * height as usize;
        if cur.len() < n * 4 {
            return Err(Error::Format(format!(
                "truncated map payload in map {}",
                maps.len()
            )));
        }
        let (payload, rest) = cur.split_at(n * 4);
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        maps.push(ScalarMap::new(width, height, values)?);
        cur = rest;
    }
    Ok(maps)
}

pub fn read_scalar_maps(path: impl AsRef<Path>) -> Result<Vec<ScalarMap>> {
    decode_scalar_maps(&std::fs::read(path)?)
}

fn read_map_header(cur: &mut &[u8], magic: &[u8; 4]) -> Result<(u32, u32)> {
    if cur.len() < 12 {
        return Err(Error::Format("truncated header".into()));
    }
    if &cur[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&cur[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let width = u32::from_le_bytes([cur[4], cur[5], cur[6], cur[7]]);
    let height = u32::from_le_bytes([cur[8], cur[9], cur[10], cur[11]]);
    *cur = &cur[12..];
    Ok((width, height))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackletFileRecord {
    pub tracklet_id: u64,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrackletLoad {
    pub tracklets: Vec<Tracklet>,
    pub warnings: Vec<String>,
}

/// Reads a `tracklet_id,frame,x,y` CSV and groups rows into tracklets of
/// `length + 1` points, ordered by id.
///
/// Ids with the wrong number of points are an error when `strict`, and are
/// dropped with a warning otherwise. A gap or duplicate frame within an id
/// is always an error.
pub fn read_tracklets(path: impl AsRef<Path>, length: usize, strict: bool) -> Result<TrackletLoad> {
    parse_tracklets(BufReader::new(File::open(path)?), length, strict)
}

pub fn parse_tracklets<R: Read>(reader: R, length: usize, strict: bool) -> Result<TrackletLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    expect_header(rdr.headers()?, &["tracklet_id", "frame", "x", "y"])?;

    let mut groups: BTreeMap<u64, Vec<(i64, f64, f64, u64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let id: u64 = parse_field(&rec[0], line, "tracklet_id")?;
        let frame: i64 = parse_field(&rec[1], line, "frame")?;
        let x: f64 = parse_field(&rec[2], line, "x")?;
        let y: f64 = parse_field(&rec[3], line, "y")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Validation {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        groups.entry(id).or_default().push((frame, x, y, line));
    }

    let mut out = TrackletLoad::default();
    for (id, mut rows) in groups {
        rows.sort_by_key(|r| r.0);
        for pair in rows.windows(2) {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(Error::Validation {
                    line: pair[1].3,
                    message: format!(
                        "tracklet {id}: frame {} follows frame {} (frames must be consecutive)",
                        pair[1].0, pair[0].0
                    ),
                });
            }
        }
        if rows.len() != length + 1 {
            let msg = format!(
                "tracklet {id} has {} points, expected {}",
                rows.len(),
                length + 1
            );
            if strict {
                return Err(Error::Validation {
                    line: rows[0].3,
                    message: msg,
                });
            }
            warn!("{msg}; dropped");
            out.warnings.push(msg);
            continue;
        }
        out.tracklets.push(Tracklet {
            id,
            start_frame: rows[0].0,
            points: rows.iter().map(|r| (r.1, r.2)).collect(),
        });
    }
    Ok(out)
}

pub fn write_tracklets<W: Write>(writer: W, tracklets: &[Tracklet]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "tracklet_id,frame,x,y")?;
    for tr in tracklets {
        for (i, (x, y)) in tr.points.iter().enumerate() {
            writeln!(w, "{},{},{},{}", tr.id, tr.start_frame + i as i64, x, y)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One dense feature grid: `grid_w * grid_h` cells of `dim` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub grid_w: u32,
    pub grid_h: u32,
    pub dim: u32,
    pub values: Vec<f32>,
}

impl FeatureFrame {
    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim as usize)
    }
}

/// Frame-at-a-time reader over an `NVFS` feature map sequence.
pub struct FeatureMapReader<R: Read> {
    inner: R,
    grid_w: u32,
    grid_h: u32,
    dim: u32,
    index: usize,
    done: bool,
}

impl<R: Read> FeatureMapReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; 16];
        inner
            .read_exact(&mut header)
            .map_err(|_| Error::Format("truncated feature sequence header".into()))?;
        if &header[..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"NVFS\"",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let word =
            |i: usize| u32::from_le_bytes([header[i], header[i + 1], header[i + 2], header[i + 3]]);
        let (grid_w, grid_h, dim) = (word(4), word(8), word(12));
        if dim == 0 {
            return Err(Error::Format("feature dim must be positive".into()));
        }
        Ok(Self {
            inner,
            grid_w,
            grid_h,
            dim,
            index: 0,
            done: false,
        })
    }

    pub fn grid(&self) -> (u32, u32, u32) {
        (self.grid_w, self.grid_h, self.dim)
    }

    fn read_frame(&mut self) -> Result<Option<FeatureFrame>> {
        let n = self.grid_w as usize * self.grid_h as usize * self.dim as usize;
        let mut buf = vec![0u8; n * 4];
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(k) => filled += k,
                Err(e) if e.kind() == IoErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < buf.len() {
            return Err(Error::Format(format!(
                "truncated feature frame {}",
                self.index
            )));
        }
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value in feature frame {}",
                self.index
            )));
        }
        self.index += 1;
        Ok(Some(FeatureFrame {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            dim: self.dim,
            values,
        }))
    }
}

impl<R: Read> Iterator for FeatureMapReader<R> {
    type Item = Result<FeatureFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_feature_maps(path: impl AsRef<Path>) -> Result<FeatureMapReader<BufReader<File>>> {
    FeatureMapReader::new(BufReader::new(File::open(path)?))
}

pub fn write_feature_maps<W: Write>(writer: W, frames: &[FeatureFrame]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let (gw, gh, dim) = match frames.first() {
        Some(f) => (f.grid_w, f.grid_h, f.dim),
        None => return Err(Error::InvalidInput("empty feature sequence".into())),
    };
    w.write_all(FEATURE_MAGIC)?;
    for v in [gw, gh, dim] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in frames {
        if (f.grid_w, f.grid_h, f.dim) != (gw, gh, dim) {
            return Err(Error::InvalidInput(
                "feature frames must share grid and dim".into(),
            ));
        }
        if f.values.len() != (gw * gh * dim) as usize {
            return Err(Error::DimensionMismatch {
                expected: (gw * gh * dim) as usize,
                found: f.values.len(),
            });
        }
        for v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

fn expect_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                expected.join(","),
                found.join(",")
            ),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(raw: &str, line: u64, name: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} value {raw:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(text: &str) -> Result<Vec<TrajectoryRecord>> {
        TrajectoryReader::new(text.as_bytes())?.collect()
    }

    #[test]
    fn trajectory_reads_records_in_order() {
        let recs = traj("t,x,y\n0,0.0,0.0\n1,1.0,0.0").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(
            recs[1],
            TrajectoryRecord {
                t: 1,
                x: 1.0,
                y: 0.0
            }
        );
    }

    #[test]
    fn trajectory_empty_body() {
        assert!(traj("t,x,y\n").unwrap().is_empty());
    }

    #[test]
    fn trajectory_count_is_reported() {
        let mut rdr = TrajectoryReader::new("t,x,y\n0,1,2\n5,3,4\n".as_bytes()).unwrap();
        for r in rdr.by_ref() {
            r.unwrap();
        }
        assert_eq!(rdr.records_read(), 2);
    }

    #[test]
    fn trajectory_non_monotonic_reports_line() {
        let err = traj("t,x,y\n3,0,0\n2,0,0\n").unwrap_err();
        match err {
            Error::Validation { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trajectory_malformed_row_reports_line() {
        let err = traj("t,x,y\n0,0,0\n1,abc,0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trajectory_bad_header() {
        assert!(matches!(traj("a,b,c\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn flowmap_single_cell() {
        let mut bytes = b"NVFL".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        let map = FlowMap::decode(&bytes).unwrap();
        assert_eq!(
            map,
            FlowMap {
                width: 1,
                height: 1,
                cells: vec![(2.0, -1.0)]
            }
        );
        assert_eq!(map.encode(), bytes);
    }

    #[test]
    fn flowmap_bad_magic() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(FlowMap::decode(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn flowmap_truncated_and_non_finite() {
        let map = FlowMap::new(2, 1, vec![(1.0, 1.0), (0.5, 0.0)]).unwrap();
        let bytes = map.encode();
        assert!(FlowMap::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(FlowMap::decode(&bad).is_err());
    }

    #[test]
    fn tracklets_group_and_sort() {
        let mut csv = String::from("tracklet_id,frame,x,y\n");
        for f in (0..12).rev() {
            csv.push_str(&format!("7,{f},{},{}\n", f as f64, 2.0));
        }
        let load = parse_tracklets(csv.as_bytes(), 11, true).unwrap();
        assert_eq!(load.tracklets.len(), 1);
        let tr = &load.tracklets[0];
        assert_eq!(tr.points.len(), 12);
        assert_eq!(tr.start_frame, 0);
        assert_eq!(tr.points[3], (3.0, 2.0));
    }

    #[test]
    fn tracklets_short_id_dropped_when_lenient() {
        let mut csv = String::from("tracklet_id,frame,x,y\n");
        for f in 0..5 {
            csv.push_str(&format!("1,{f},0,0\n"));
        }
        let load = parse_tracklets(csv.as_bytes(), 11, false).unwrap();
        assert!(load.tracklets.is_empty());
        assert_eq!(load.warnings.len(), 1);
        assert!(parse_tracklets(csv.as_bytes(), 11, true).is_err());
    }

    #[test]
    fn tracklets_gap_is_error() {
        let csv = "tracklet_id,frame,x,y\n1,0,0,0\n1,1,0,0\n1,3,0,0\n";
        let err = parse_tracklets(csv.as_bytes(), 2, false).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![false, true, true, false];
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(&p, &buf).unwrap();
        assert_eq!(read_labels(&p).unwrap().labels, labels);
    }

    #[test]
    fn feature_sequence_round_trip_and_truncation() {
        let frames: Vec<FeatureFrame> = (0..3)
            .map(|k| FeatureFrame {
                grid_w: 2,
                grid_h: 1,
                dim: 3,
                values: (0..6).map(|i| (i + k) as f32 * 0.5).collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_feature_maps(&mut buf, &frames).unwrap();
        let back: Vec<FeatureFrame> = FeatureMapReader::new(buf.as_slice())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, frames);
        let truncated = &buf[..buf.len() - 2];
        let res: Result<Vec<_>> = FeatureMapReader::new(truncated).unwrap().collect();
        assert!(res.is_err());
    }

    proptest! {
        #[test]
        fn flowmap_round_trip_bit_exact(w in 1u32..6, h in 1u32..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cells = (0..w * h)
                .map(|_| (rng.random_range(-50.0f32..50.0), rng.random_range(-50.0f32..50.0)))
                .collect();
            let map = FlowMap::new(w, h, cells).unwrap();
            let bytes = map.encode();
            let back = FlowMap::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back, map);
        }

        #[test]
        fn scalar_maps_and_trajectories_round_trip(
            vals in proptest::collection::vec(-1e6f32..1e6, 1..20),
            pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 0..20),
        ) {
            let map = ScalarMap::new(vals.len() as u32, 1, vals).unwrap();
            let maps = vec![map.clone(), map];
            let bytes = encode_scalar_maps(&maps);
            prop_assert_eq!(decode_scalar_maps(&bytes).unwrap(), maps);

            let recs: Vec<TrajectoryRecord> = pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| TrajectoryRecord { t: i as u64, x, y })
                .collect();
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &recs).unwrap();
            let back: Vec<_> = TrajectoryReader::new(buf.as_slice()).unwrap().collect::<Result<_>>().unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
