//! Dataset containers and their on-disk formats.
//!
//! Epochs: `EPC1` | u32 n_trials | u32 n_channels | u32 n_timepoints |
//! f32 sample_rate | n·C·T f32 samples (trial, channel, time order), with
//! per-trial metadata in a `<name>.meta.json` sidecar.
//!
//! Embeddings: `EMB1` | u32 n_rows | u32 dim | u8 kind | row-major f32
//! payload, sidecar `{"row_ids": [...], "concept_names": [...]?}`.
//!
//! All integers and floats are little-endian. Samples live in memory as
//! `f64` and are narrowed to `f32` on write, so a round trip is exact for
//! values that are already `f32`-representable (anything that was read
//! from disk).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_json, sidecar_path, write_json, Reader, Writer};
use crate::error::{Error, Result};
use crate::num::check_finite;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialMeta {
    pub stimulus_id: String,
    pub subject_id: String,
    pub repetition: u32,
}

impl TrialMeta {
    /// Identifier used as the row id of every per-trial matrix or grid.
    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.subject_id, self.stimulus_id, self.repetition)
    }
}

/// n trials × C channels × T timepoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    n_channels: usize,
    n_timepoints: usize,
    sample_rate_hz: f64,
    data: Vec<f64>,
    meta: Vec<TrialMeta>,
}

impl EpochSet {
    pub fn new(
        n_channels: usize,
        n_timepoints: usize,
        sample_rate_hz: f64,
        data: Vec<f64>,
        meta: Vec<TrialMeta>,
    ) -> Result<Self> {
        if n_channels == 0 || n_timepoints == 0 {
            return Err(Error::InvalidShape(
                "epochs need at least one channel and one timepoint".into(),
            ));
        }
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sample rate {sample_rate_hz} must be positive"
            )));
        }
        let per_trial = n_channels * n_timepoints;
        if data.len() != meta.len() * per_trial {
            return Err(Error::InvalidShape(format!(
                "{} trials of {n_channels}x{n_timepoints} need {} samples, got {}",
                meta.len(),
                meta.len() * per_trial,
                data.len()
            )));
        }
        check_finite(&data, "epoch samples")?;
        Ok(EpochSet {
            n_channels,
            n_timepoints,
            sample_rate_hz,
            data,
            meta,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.meta.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn meta(&self) -> &[TrialMeta] {
        &self.meta
    }

    /// Channel-major `C·T` samples of trial `i`.
    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.n_channels * self.n_timepoints;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn trial_labels(&self) -> Vec<String> {
        self.meta.iter().map(TrialMeta::label).collect()
    }

    pub fn select_trials(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.n_channels * self.n_timepoints);
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_trials() {
                return Err(Error::InvalidParameter(format!("trial index {i} out of range")));
            }
            data.extend_from_slice(self.trial(i));
            meta.push(self.meta[i].clone());
        }
        EpochSet::new(self.n_channels, self.n_timepoints, self.sample_rate_hz, data, meta)
    }

    pub fn filter_subject(&self, subject_id: &str) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_trials())
            .filter(|&i| self.meta[i].subject_id == subject_id)
            .collect();
        if idx.is_empty() {
            return Err(Error::EmptyInput("no trials for the requested subject"));
        }
        self.select_trials(&idx)
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.n_channels) {
            return Err(Error::InvalidParameter(format!("channel {c} out of range")));
        }
        let t = self.n_timepoints;
        let mut data = Vec::with_capacity(self.n_trials() * channels.len() * t);
        for i in 0..self.n_trials() {
            let trial = self.trial(i);
            for &c in channels {
                data.extend_from_slice(&trial[c * t..(c + 1) * t]);
            }
        }
        EpochSet::new(channels.len(), t, self.sample_rate_hz, data, self.meta.clone())
    }

    pub fn crop_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_timepoints {
            return Err(Error::OutOfRange {
                start,
                len,
                timepoints: self.n_timepoints,
            });
        }
        let t = self.n_timepoints;
        let mut data = Vec::with_capacity(self.n_trials() * self.n_channels * len);
        for i in 0..self.n_trials() {
            let trial = self.trial(i);
            for c in 0..self.n_channels {
                data.extend_from_slice(&trial[c * t + start..c * t + start + len]);
            }
        }
        EpochSet::new(self.n_channels, len, self.sample_rate_hz, data, self.meta.clone())
    }
}

/// Average all trials sharing `(stimulus_id, subject_id)`.
///
/// Groups appear in first-appearance order; each output trial has
/// repetition 0.
pub fn average_repetitions(epochs: &EpochSet) -> Result<EpochSet> {
    if epochs.n_trials() == 0 {
        return Err(Error::EmptyInput("no trials to average"));
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut members: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for (i, m) in epochs.meta.iter().enumerate() {
        let key = (m.stimulus_id.clone(), m.subject_id.clone());
        members
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let per_trial = epochs.n_channels * epochs.n_timepoints;
    let mut data = Vec::with_capacity(order.len() * per_trial);
    let mut meta = Vec::with_capacity(order.len());
    for key in &order {
        let idx = &members[key];
        let mut acc = vec![0.0; per_trial];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(epochs.trial(i)) {
                *a += v;
            }
        }
        let n = idx.len() as f64;
        data.extend(acc.into_iter().map(|a| a / n));
        meta.push(TrialMeta {
            stimulus_id: key.0.clone(),
            subject_id: key.1.clone(),
            repetition: 0,
        });
    }
    EpochSet::new(
        epochs.n_channels,
        epochs.n_timepoints,
        epochs.sample_rate_hz,
        data,
        meta,
    )
}

#[derive(Serialize, Deserialize)]
struct EpochSidecar {
    trials: Vec<TrialMeta>,
}

pub fn write_epochs(epochs: &EpochSet, path: &Path) -> Result<()> {
    let mut w = Writer::new(b"EPC1");
    w.u32(epochs.n_trials())?;
    w.u32(epochs.n_channels)?;
    w.u32(epochs.n_timepoints)?;
    w.f32(epochs.sample_rate_hz);
    for &v in &epochs.data {
        w.f32(v);
    }
    fs::write(path, w.finish())?;
    write_json(
        &sidecar_path(path),
        &EpochSidecar {
            trials: epochs.meta.clone(),
        },
    )
}

pub fn read_epochs(path: &Path) -> Result<EpochSet> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"EPC1")?;
    let n = r.u32()?;
    let c = r.u32()?;
    let t = r.u32()?;
    let rate = r.f32()?;
    let data = r.f32_vec(n * c * t)?;
    r.finish()?;
    let side: EpochSidecar = read_json(&sidecar_path(path))?;
    if side.trials.len() != n {
        return Err(Error::MetaMismatch(format!(
            "header has {n} trials, sidecar has {}",
            side.trials.len()
        )));
    }
    EpochSet::new(c, t, rate, data, side.trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Signal,
    Concept,
}

impl EmbeddingKind {
    fn to_byte(self) -> u8 {
        match self {
            EmbeddingKind::Signal => 0,
            EmbeddingKind::Concept => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(EmbeddingKind::Signal),
            1 => Ok(EmbeddingKind::Concept),
            other => Err(Error::MetaMismatch(format!("unknown embedding kind byte {other}"))),
        }
    }
}

/// Ordered, unique, non-empty concept labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNames(Vec<String>);

impl ConceptNames {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::InvalidParameter("empty concept name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateRowId(n.clone()));
            }
        }
        Ok(ConceptNames(names))
    }

    /// `concept_00`, `concept_01`, ...
    pub fn numbered(n: usize) -> Self {
        ConceptNames((0..n).map(|j| format!("concept_{j:02}")).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn get(&self, j: usize) -> &str {
        &self.0[j]
    }
}

/// n_rows × dim real matrix with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    row_ids: Vec<String>,
    kind: EmbeddingKind,
    concept_names: Option<ConceptNames>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>, row_ids: Vec<String>, kind: EmbeddingKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidShape("embedding dim must be at least 1".into()));
        }
        if data.len() != row_ids.len() * dim {
            return Err(Error::InvalidShape(format!(
                "{} rows of dim {dim} need {} values, got {}",
                row_ids.len(),
                row_ids.len() * dim,
                data.len()
            )));
        }
        check_finite(&data, "embedding")?;
        let mut seen = HashSet::new();
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateRowId(id.clone()));
            }
        }
        Ok(EmbeddingMatrix {
            dim,
            data,
            row_ids,
            kind,
            concept_names: None,
        })
    }

    pub fn with_concept_names(mut self, names: ConceptNames) -> Result<Self> {
        if names.len() != self.dim {
            return Err(Error::MetaMismatch(format!(
                "{} concept names for dim {}",
                names.len(),
                self.dim
            )));
        }
        self.concept_names = Some(names);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn concept_names(&self) -> Option<&ConceptNames> {
        self.concept_names.as_ref()
    }

    /// Concept names if present, otherwise numbered placeholders.
    pub fn names_or_numbered(&self) -> ConceptNames {
        self.concept_names
            .clone()
            .unwrap_or_else(|| ConceptNames::numbered(self.dim))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.row_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_rows() {
                return Err(Error::InvalidParameter(format!("row index {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.row_ids[i].clone());
        }
        let m = EmbeddingMatrix::new(self.dim, data, ids, self.kind)?;
        match &self.concept_names {
            Some(n) => m.with_concept_names(n.clone()),
            None => Ok(m),
        }
    }
}

/// One concept row per trial, looked up by the trial's stimulus id, with
/// row ids replaced by trial labels so the result aligns 1:1 with the
/// encoded epochs.
pub fn align_concepts(epochs: &EpochSet, concepts: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let index = concepts.row_index();
    let mut data = Vec::with_capacity(epochs.n_trials() * concepts.dim());
    for m in epochs.meta() {
        let &i = index
            .get(m.stimulus_id.as_str())
            .ok_or_else(|| Error::RowMismatch(format!("no concept row for stimulus {:?}", m.stimulus_id)))?;
        data.extend_from_slice(concepts.row(i));
    }
    let aligned = EmbeddingMatrix::new(concepts.dim(), data, epochs.trial_labels(), concepts.kind())?;
    match concepts.concept_names() {
        Some(n) => aligned.with_concept_names(n.clone()),
        None => Ok(aligned),
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingSidecar {
    row_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    concept_names: Option<Vec<String>>,
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut w = Writer::new(b"EMB1");
    w.u32(m.n_rows())?;
    w.u32(m.dim)?;
    w.u8(m.kind.to_byte());
    for &v in &m.data {
        w.f32(v);
    }
    fs::write(path, w.finish())?;
    let side = EmbeddingSidecar {
        row_ids: m.row_ids.clone(),
        concept_names: m.concept_names.as_ref().map(|n| n.0.clone()),
    };
    write_json(&sidecar_path(path), &side)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"EMB1")?;
    let n = r.u32()?;
    let dim = r.u32()?;
    let kind = EmbeddingKind::from_byte(r.u8()?)?;
    let data = r.f32_vec(n * dim)?;
    r.finish()?;
    let side: EmbeddingSidecar = read_json(&sidecar_path(path))?;
    if side.row_ids.len() != n {
        return Err(Error::MetaMismatch(format!(
            "header has {n} rows, sidecar has {}",
            side.row_ids.len()
        )));
    }
    let m = EmbeddingMatrix::new(dim, data, side.row_ids, kind)?;
    match side.concept_names {
        Some(names) => m.with_concept_names(ConceptNames::new(names)?),
        None => Ok(m),
    }
}

/// CSV export: header of concept names (or dimension indices), then one
/// line of values per row.
pub fn embeddings_to_csv(m: &EmbeddingMatrix) -> String {
    let header: Vec<String> = match &m.concept_names {
        Some(n) => n.0.clone(),
        None => (0..m.dim).map(|j| j.to_string()).collect(),
    };
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..m.n_rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parse the CSV export back. Row ids are the 0-based line numbers; a
/// header of plain integers `0..dim` is read as "no concept names".
pub fn embeddings_from_csv(text: &str, kind: EmbeddingKind) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or(Error::EmptyInput("csv has no header"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let dim = header.len();
    let mut data = Vec::new();
    let mut ids = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::MetaMismatch(format!(
                "row {i} has {} values, header has {dim}",
                fields.len()
            )));
        }
        for f in fields {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {i}: {e}")))?,
            );
        }
        ids.push(i.to_string());
    }
    let m = EmbeddingMatrix::new(dim, data, ids, kind)?;
    let numbered = header.iter().enumerate().all(|(j, h)| h == &j.to_string());
    if numbered {
        Ok(m)
    } else {
        m.with_concept_names(ConceptNames::new(header)?)
    }
}
