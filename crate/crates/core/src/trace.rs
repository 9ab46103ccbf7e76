//! Trace files: a JSON header line followed by one JSON object per image.
//!
//! ```text
//! {"n":3,"providers":["a","b","c"],"feature_dim":4,"coords":"xyxy","normalized":false}
//! {"image_id":"1","features":[...],"providers":[[{"label":"dog","score":0.9,"box":[...]}],[],[]],"gt":[{"category":"dog","box":[...]}]}
//! ```
//!
//! Boxes are converted to corner form on load, and traces are always written
//! in corner form.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{BBox, BoxError, BoxFormat, RawDetection};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: invalid record: {msg}")]
    Invalid { path: String, line: usize, msg: String },
    #[error("image ids do not align across inputs: {0:?}")]
    IdMismatch(Vec<String>),
    #[error("trace has no header line")]
    MissingHeader,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub n: usize,
    pub providers: Vec<String>,
    pub feature_dim: usize,
    #[serde(default)]
    pub coords: BoxFormat,
    #[serde(default)]
    pub normalized: bool,
    /// Optional category template carried with synthetic traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub image_id: String,
    pub features: Vec<f64>,
    pub per_provider: Vec<Vec<RawDetection>>,
    pub gt: Option<Vec<GtEntry>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct WireDetection {
    label: String,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireGt {
    category: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    image_id: String,
    features: Vec<f64>,
    providers: Vec<Vec<WireDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<WireGt>>,
}

fn decode_box(raw: [f64; 4], fmt: BoxFormat) -> Result<BBox, String> {
    BBox::from_format(raw, fmt).map_err(|e: BoxError| e.to_string())
}

fn decode_detection(w: WireDetection, fmt: BoxFormat) -> Result<RawDetection, String> {
    if w.label.trim().is_empty() {
        return Err("empty label".into());
    }
    if !(0.0..=1.0).contains(&w.score) {
        return Err(format!("score {} outside [0,1]", w.score));
    }
    Ok(RawDetection { label: w.label, score: w.score, bbox: decode_box(w.bbox, fmt)? })
}

impl TraceRecord {
    fn from_wire(w: WireRecord, header: &TraceHeader) -> Result<Self, String> {
        if w.features.len() != header.feature_dim {
            return Err(format!("{} features, header declares {}", w.features.len(), header.feature_dim));
        }
        if w.features.iter().any(|f| !f.is_finite()) {
            return Err("non-finite feature".into());
        }
        if w.providers.len() != header.n {
            return Err(format!("{} provider lists, header declares {}", w.providers.len(), header.n));
        }
        let per_provider = w
            .providers
            .into_iter()
            .map(|list| list.into_iter().map(|d| decode_detection(d, header.coords)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let gt = match w.gt {
            None => None,
            Some(list) => Some(
                list.into_iter()
                    .map(|g| Ok(GtEntry { label: g.category, bbox: decode_box(g.bbox, header.coords)? }))
                    .collect::<Result<Vec<_>, String>>()?,
            ),
        };
        Ok(Self { image_id: w.image_id, features: w.features, per_provider, gt })
    }

    fn to_wire(&self) -> WireRecord {
        WireRecord {
            image_id: self.image_id.clone(),
            features: self.features.clone(),
            providers: self
                .per_provider
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|d| WireDetection { label: d.label.clone(), score: d.score, bbox: d.bbox.to_array() })
                        .collect()
                })
                .collect(),
            gt: self.gt.as_ref().map(|g| {
                g.iter().map(|e| WireGt { category: e.label.clone(), bbox: e.bbox.to_array() }).collect()
            }),
        }
    }
}

impl Trace {
    pub fn n_providers(&self) -> usize {
        self.header.n
    }

    pub fn parse(reader: impl BufRead, origin: &str) -> Result<Self, TraceError> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(TraceError::MissingHeader)?;
        let io = |source| TraceError::Io { path: origin.to_string(), source };
        let mut header: TraceHeader = serde_json::from_str(&first.map_err(io)?)
            .map_err(|e| TraceError::Parse { path: origin.to_string(), line: 1, msg: e.to_string() })?;
        if header.providers.len() != header.n {
            return Err(TraceError::Invalid {
                path: origin.to_string(),
                line: 1,
                msg: format!("{} provider names for n = {}", header.providers.len(), header.n),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|source| TraceError::Io { path: origin.to_string(), source })?;
            let wire: WireRecord = serde_json::from_str(&line)
                .map_err(|e| TraceError::Parse { path: origin.to_string(), line: i + 1, msg: e.to_string() })?;
            let rec = TraceRecord::from_wire(wire, &header)
                .map_err(|msg| TraceError::Invalid { path: origin.to_string(), line: i + 1, msg })?;
            records.push(rec);
        }
        header.coords = BoxFormat::Xyxy;
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let f = File::open(path).map_err(io_err(path))?;
        Self::parse(BufReader::new(f), &path.display().to_string())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = self.header.clone();
        header.coords = BoxFormat::Xyxy;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, &r.to_wire())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        let f = File::create(path).map_err(io_err(path))?;
        self.write_to(BufWriter::new(f)).map_err(io_err(path))
    }

    /// Every label observed in provider outputs and ground truth, lowercased.
    pub fn labels(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for r in &self.records {
            for d in r.per_provider.iter().flatten() {
                out.insert(crate::grouping::canonical_label(&d.label));
            }
            for g in r.gt.iter().flatten() {
                out.insert(crate::grouping::canonical_label(&g.label));
            }
        }
        out
    }
}

/// Inputs to [`ingest`]: one raw dump per provider plus features and ground truth.
pub struct IngestInputs<'a> {
    /// (provider name, dump path). Each dump is a JSON object mapping
    /// image_id to a list of `{label, score, box}`.
    pub providers: &'a [(String, std::path::PathBuf)],
    /// JSON lines `{"image_id": .., "features": [..]}`; fixes record order.
    pub features: &'a Path,
    /// JSON lines `{"image_id": .., "gt": [{category, box}]}`.
    pub gt: Option<&'a Path>,
    pub coords: BoxFormat,
    pub normalized: bool,
}

#[derive(Deserialize)]
struct FeatureLine {
    image_id: String,
    features: Vec<f64>,
}

#[derive(Deserialize)]
struct GtLine {
    image_id: String,
    gt: Vec<WireGt>,
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TraceError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn mismatch(expected: &BTreeSet<&str>, got: &BTreeSet<&str>) -> Vec<String> {
    expected.symmetric_difference(got).map(|s| s.to_string()).collect()
}

/// Compiles raw provider dumps, a feature file and optional ground truth into a trace.
pub fn ingest(inputs: &IngestInputs<'_>) -> Result<Trace, TraceError> {
    let features: Vec<FeatureLine> = read_json_lines(inputs.features)?;
    let ids: BTreeSet<&str> = features.iter().map(|f| f.image_id.as_str()).collect();
    if ids.len() != features.len() {
        let mut seen = BTreeSet::new();
        let dups = features.iter().filter(|f| !seen.insert(&f.image_id)).map(|f| f.image_id.clone()).collect();
        return Err(TraceError::IdMismatch(dups));
    }
    let feature_dim = features.first().map_or(0, |f| f.features.len());
    let fmt = inputs.coords;
    let origin = |p: &Path| p.display().to_string();

    let mut dumps: Vec<BTreeMap<String, Vec<WireDetection>>> = Vec::new();
    for (_, path) in inputs.providers {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let dump: BTreeMap<String, Vec<WireDetection>> = serde_json::from_str(&text)
            .map_err(|e| TraceError::Parse { path: origin(path), line: 0, msg: e.to_string() })?;
        let got: BTreeSet<&str> = dump.keys().map(String::as_str).collect();
        let bad = mismatch(&ids, &got);
        if !bad.is_empty() {
            return Err(TraceError::IdMismatch(bad));
        }
        dumps.push(dump);
    }
    let mut gts: Option<BTreeMap<String, Vec<WireGt>>> = None;
    if let Some(p) = inputs.gt {
        let lines: Vec<GtLine> = read_json_lines(p)?;
        let map: BTreeMap<String, Vec<WireGt>> = lines.into_iter().map(|l| (l.image_id, l.gt)).collect();
        let got: BTreeSet<&str> = map.keys().map(String::as_str).collect();
        let bad = mismatch(&ids, &got);
        if !bad.is_empty() {
            return Err(TraceError::IdMismatch(bad));
        }
        gts = Some(map);
    }

    let header = TraceHeader {
        n: inputs.providers.len(),
        providers: inputs.providers.iter().map(|(n, _)| n.clone()).collect(),
        feature_dim,
        coords: BoxFormat::Xyxy,
        normalized: inputs.normalized,
        categories: None,
    };
    let mut records = Vec::with_capacity(features.len());
    for (line, f) in features.into_iter().enumerate() {
        let invalid = |msg: String| TraceError::Invalid { path: origin(inputs.features), line: line + 1, msg };
        let wire = WireRecord {
            providers: dumps.iter_mut().map(|d| d.remove(&f.image_id).unwrap_or_default()).collect(),
            gt: gts.as_mut().and_then(|g| g.remove(&f.image_id)),
            image_id: f.image_id,
            features: f.features,
        };
        let header_in = TraceHeader { coords: fmt, ..header.clone() };
        records.push(TraceRecord::from_wire(wire, &header_in).map_err(invalid)?);
    }
    Ok(Trace { header, records })
}

/// Detection count per provider, for ingestion summaries.
pub fn detection_counts(trace: &Trace) -> Vec<usize> {
    let mut counts = vec![0; trace.header.n];
    for r in &trace.records {
        for (c, l) in counts.iter_mut().zip(&r.per_provider) {
            *c += l.len();
        }
    }
    counts
}
