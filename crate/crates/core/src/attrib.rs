//! Temporal occlusion sweep and the attribution grids it produces.
//!
//! For every trial and every mask start `t_k`, the window `[t_k, t_k + L)`
//! is blanked in all channels, the epoch is re-encoded and pushed through
//! the ridge map, and three quantities are recorded:
//!
//! * `M1 = pearson(c, p̃)`, the masked prediction against the reference;
//! * `M2 = pearson(c, p) − pearson(c, p̃)`, the drop caused by the mask
//!   (larger means the window mattered more);
//! * `M3_j = p_j − p̃_j`, the activation drop of each concept.
//!
//! Cells are independent pure computations, so the result does not depend
//! on the worker count or on the order of the starts.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_json, sidecar_path, write_json, Reader, Writer};
use crate::data::{EmbeddingMatrix, EpochSet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::num::pearson;
use crate::ridge::RidgeModel;

pub const DEFAULT_MASK_LEN: usize = 50;
pub const DEFAULT_LAST_START: usize = 200;
pub const DEFAULT_TOP_Q: f64 = 0.1;

/// What masked samples are replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskValue {
    #[default]
    Zero,
    /// The channel's mean over the whole (unmasked) epoch.
    ChannelMean,
}

impl MaskValue {
    pub(crate) fn fill_values(self, epoch: &[f64], n_channels: usize, n_timepoints: usize) -> Vec<f64> {
        match self {
            MaskValue::Zero => vec![0.0; n_channels],
            MaskValue::ChannelMean => epoch
                .chunks(n_timepoints)
                .map(|ch| ch.iter().sum::<f64>() / n_timepoints as f64)
                .collect(),
        }
    }
}

/// Copy of `epoch` (channel-major C×T) with `[start, start+len)` replaced
/// in every channel.
pub fn mask_epoch(
    epoch: &[f64],
    n_channels: usize,
    n_timepoints: usize,
    start: usize,
    len: usize,
    value: MaskValue,
) -> Result<Vec<f64>> {
    if epoch.len() != n_channels * n_timepoints {
        return Err(Error::DimMismatch {
            expected: n_channels * n_timepoints,
            got: epoch.len(),
        });
    }
    if start + len > n_timepoints {
        return Err(Error::OutOfRange {
            start,
            len,
            timepoints: n_timepoints,
        });
    }
    let fill = value.fill_values(epoch, n_channels, n_timepoints);
    let mut out = epoch.to_vec();
    for (c, f) in fill.iter().enumerate() {
        out[c * n_timepoints + start..c * n_timepoints + start + len].fill(*f);
    }
    Ok(out)
}

/// Mask length and the ordered list of start indices (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub length: usize,
    pub starts: Vec<usize>,
}

impl MaskSpec {
    pub fn new(length: usize, starts: Vec<usize>) -> Result<Self> {
        if starts.is_empty() {
            return Err(Error::InvalidParameter("mask needs at least one start".into()));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "mask starts must be strictly increasing".into(),
            ));
        }
        Ok(MaskSpec { length, starts })
    }

    /// L = 50 with starts 0..=200.
    pub fn default_sweep() -> Self {
        MaskSpec {
            length: DEFAULT_MASK_LEN,
            starts: (0..=DEFAULT_LAST_START).collect(),
        }
    }

    pub fn validate(&self, n_timepoints: usize) -> Result<()> {
        match self.starts.iter().find(|&&s| s + self.length > n_timepoints) {
            Some(&start) => Err(Error::OutOfRange {
                start,
                len: self.length,
                timepoints: n_timepoints,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "m1")]
    MaskedVsTruePearson,
    #[serde(rename = "m2")]
    DeltaPredTruePearson,
    #[serde(rename = "m3")]
    DeltaActivation,
}

impl Metric {
    fn to_byte(self) -> u8 {
        match self {
            Metric::MaskedVsTruePearson => 1,
            Metric::DeltaPredTruePearson => 2,
            Metric::DeltaActivation => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Metric::MaskedVsTruePearson),
            2 => Ok(Metric::DeltaPredTruePearson),
            3 => Ok(Metric::DeltaActivation),
            other => Err(Error::MetaMismatch(format!("unknown metric byte {other}"))),
        }
    }

    fn bound(self) -> Option<f64> {
        match self {
            Metric::MaskedVsTruePearson => Some(1.0),
            Metric::DeltaPredTruePearson => Some(2.0),
            Metric::DeltaActivation => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::MaskedVsTruePearson => "m1",
            Metric::DeltaPredTruePearson => "m2",
            Metric::DeltaActivation => "m3",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(Metric::MaskedVsTruePearson),
            "m2" => Ok(Metric::DeltaPredTruePearson),
            "m3" => Ok(Metric::DeltaActivation),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

/// Metric values indexed by row (trial or concept) × mask start. Missing
/// cells are explicit `None`s.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionGrid {
    metric: Metric,
    row_ids: Vec<String>,
    starts: Vec<usize>,
    values: Vec<Option<f64>>,
    mask_length: usize,
    concept_index: Option<usize>,
}

impl AttributionGrid {
    pub fn new(
        metric: Metric,
        row_ids: Vec<String>,
        starts: Vec<usize>,
        values: Vec<Option<f64>>,
        mask_length: usize,
        concept_index: Option<usize>,
    ) -> Result<Self> {
        if values.len() != row_ids.len() * starts.len() {
            return Err(Error::InvalidShape(format!(
                "{} rows x {} starts need {} cells, got {}",
                row_ids.len(),
                starts.len(),
                row_ids.len() * starts.len(),
                values.len()
            )));
        }
        for v in values.iter().flatten() {
            if !v.is_finite() {
                return Err(Error::NonFinite("attribution grid"));
            }
            if let Some(b) = metric.bound() {
                if v.abs() > b {
                    return Err(Error::InvalidParameter(format!(
                        "{metric} value {v} outside [-{b}, {b}]"
                    )));
                }
            }
        }
        Ok(AttributionGrid {
            metric,
            row_ids,
            starts,
            values,
            mask_length,
            concept_index,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn mask_length(&self) -> usize {
        self.mask_length
    }

    pub fn concept_index(&self) -> Option<usize> {
        self.concept_index
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_starts(&self) -> usize {
        self.starts.len()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        let k = self.starts.len();
        &self.values[i * k..(i + 1) * k]
    }

    /// Row `i` with every cell present, or `None`.
    pub fn complete_row(&self, i: usize) -> Option<Vec<f64>> {
        self.row(i).iter().copied().collect()
    }

    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        self.values[i * self.starts.len() + k]
    }
}

/// Which reference vector the Pearson metrics compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The true concept embedding of the trial's stimulus.
    #[default]
    True,
    /// The unmasked prediction.
    Predicted,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub mask_value: MaskValue,
    pub reference: Reference,
    pub workers: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            mask_value: MaskValue::Zero,
            reference: Reference::True,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub m1: AttributionGrid,
    pub m2: AttributionGrid,
    /// One grid per concept dimension.
    pub m3: Vec<AttributionGrid>,
}

/// Row of `concepts` for a trial: by trial label first, then by stimulus id.
pub(crate) fn concept_row_for<'a>(
    concepts: &'a EmbeddingMatrix,
    index: &std::collections::HashMap<&str, usize>,
    label: &str,
    stimulus_id: Option<&str>,
) -> Result<&'a [f64]> {
    index
        .get(label)
        .or_else(|| stimulus_id.and_then(|s| index.get(s)))
        .map(|&i| concepts.row(i))
        .ok_or_else(|| Error::RowMismatch(format!("no concept row for {label:?}")))
}

fn pearson_or_missing(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    match pearson(a, b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::ZeroVariance) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Cell {
    m1: Option<f64>,
    m2: Option<f64>,
    m3: Vec<f64>,
}

pub fn mask_sweep(
    epochs: &EpochSet,
    encoder: &Encoder,
    model: &RidgeModel,
    mask: &MaskSpec,
    true_concepts: &EmbeddingMatrix,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    mask.validate(epochs.n_timepoints())?;
    if opts.workers == 0 {
        return Err(Error::InvalidParameter("workers must be at least 1".into()));
    }
    if true_concepts.dim() != model.n_targets() {
        return Err(Error::DimMismatch {
            expected: model.n_targets(),
            got: true_concepts.dim(),
        });
    }
    let labels = epochs.trial_labels();
    let index = true_concepts.row_index();
    let references: Vec<&[f64]> = labels
        .iter()
        .zip(epochs.meta())
        .map(|(l, m)| concept_row_for(true_concepts, &index, l, Some(&m.stimulus_id)))
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let n = epochs.n_trials();
    let k = mask.starts.len();
    let fc = model.n_targets();

    let cells: Vec<Cell> = pool.install(|| -> Result<Vec<Cell>> {
        // per trial: unmasked embedding, prediction, and reference
        let bases: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let e = encoder.encode(epochs.trial(i), &labels[i], None)?;
                let p = model.predict(&e)?;
                let r = match opts.reference {
                    Reference::True => references[i].to_vec(),
                    Reference::Predicted => p.clone(),
                };
                Ok((e, p, r))
            })
            .collect::<Result<_>>()?;
        let unmasked: Vec<Option<f64>> = bases
            .iter()
            .map(|(_, p, r)| pearson_or_missing(r, p))
            .collect::<Result<_>>()?;

        (0..n * k)
            .into_par_iter()
            .map(|cell| {
                let (i, kk) = (cell / k, cell % k);
                let start = mask.starts[kk];
                let (e, p, r) = &bases[i];
                let masked_e =
                    encoder.encode_masked(epochs.trial(i), &labels[i], start, mask.length, opts.mask_value, e)?;
                let masked_p = model.predict(&masked_e)?;
                let m1 = pearson_or_missing(r, &masked_p)?;
                let m2 = match (unmasked[i], m1) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                };
                let m3 = p.iter().zip(&masked_p).map(|(a, b)| a - b).collect();
                Ok(Cell { m1, m2, m3 })
            })
            .collect()
    })?;

    let starts = mask.starts.clone();
    let m1 = AttributionGrid::new(
        Metric::MaskedVsTruePearson,
        labels.clone(),
        starts.clone(),
        cells.iter().map(|x| x.m1).collect(),
        mask.length,
        None,
    )?;
    let m2 = AttributionGrid::new(
        Metric::DeltaPredTruePearson,
        labels.clone(),
        starts.clone(),
        cells.iter().map(|x| x.m2).collect(),
        mask.length,
        None,
    )?;
    let m3 = (0..fc)
        .map(|j| {
            AttributionGrid::new(
                Metric::DeltaActivation,
                labels.clone(),
                starts.clone(),
                cells.iter().map(|x| Some(x.m3[j])).collect(),
                mask.length,
                Some(j),
            )
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult { m1, m2, m3 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    MeanOverTrials,
    /// One row per concept: mean over the trials whose true activation of
    /// that concept is in the top `q` fraction (at least one trial).
    PerConceptTopQ {
        q: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub grid: AttributionGrid,
    /// Rows (concept names) for which no selected trial had any data; these
    /// rows are emitted fully missing.
    pub empty_groups: Vec<String>,
}

fn column_means(grid: &AttributionGrid, rows: &[usize]) -> Vec<Option<f64>> {
    (0..grid.n_starts())
        .map(|k| {
            let present: Vec<f64> = rows.iter().filter_map(|&i| grid.get(i, k)).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect()
}

/// Collapse a per-trial grid. `true_concepts` resolves each grid row id
/// (trial label, or the stimulus id embedded in it) to its concept vector;
/// it is only consulted for [`Aggregation::PerConceptTopQ`].
pub fn aggregate_curves(
    grid: &AttributionGrid,
    group: Aggregation,
    true_concepts: &EmbeddingMatrix,
) -> Result<Aggregated> {
    if grid.n_rows() == 0 {
        return Err(Error::EmptyInput("grid has no rows"));
    }
    match group {
        Aggregation::MeanOverTrials => {
            let rows: Vec<usize> = (0..grid.n_rows()).collect();
            let values = column_means(grid, &rows);
            let empty = if values.iter().all(Option::is_none) {
                vec!["mean".to_string()]
            } else {
                vec![]
            };
            let out = AttributionGrid::new(
                grid.metric,
                vec!["mean".to_string()],
                grid.starts.clone(),
                values,
                grid.mask_length,
                grid.concept_index,
            )?;
            Ok(Aggregated {
                grid: out,
                empty_groups: empty,
            })
        }
        Aggregation::PerConceptTopQ { q } => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidParameter(format!("q = {q} must be in (0, 1]")));
            }
            let index = true_concepts.row_index();
            let activations: Vec<&[f64]> = grid
                .row_ids
                .iter()
                .map(|id| concept_row_for(true_concepts, &index, id, stimulus_of_label(id)))
                .collect::<Result<_>>()?;
            let n = grid.n_rows();
            let take = ((q * n as f64).ceil() as usize).clamp(1, n);
            let names = true_concepts.names_or_numbered();
            let mut values = Vec::with_capacity(true_concepts.dim() * grid.n_starts());
            let mut empty_groups = Vec::new();
            for j in 0..true_concepts.dim() {
                let mut order: Vec<usize> = (0..n).collect();
                // descending activation, lower trial index first on ties
                order.sort_by(|&a, &b| activations[b][j].total_cmp(&activations[a][j]).then(a.cmp(&b)));
                let chosen: Vec<usize> = order[..take]
                    .iter()
                    .copied()
                    .filter(|&i| grid.row(i).iter().any(Option::is_some))
                    .collect();
                if chosen.is_empty() {
                    empty_groups.push(names.get(j).to_string());
                }
                values.extend(column_means(grid, &chosen));
            }
            let out = AttributionGrid::new(
                grid.metric,
                names.as_slice().to_vec(),
                grid.starts.clone(),
                values,
                grid.mask_length,
                None,
            )?;
            Ok(Aggregated {
                grid: out,
                empty_groups,
            })
        }
    }
}

/// `subject:stimulus:repetition` → `stimulus`.
fn stimulus_of_label(label: &str) -> Option<&str> {
    let mut parts = label.split(':');
    let (_, stim, _) = (parts.next()?, parts.next()?, parts.next()?);
    parts.next().is_none().then_some(stim)
}

/// The `k` most strongly predicted concepts for one epoch, descending, ties
/// broken by lower concept index.
pub fn top_k_concepts(
    model: &RidgeModel,
    encoder: &Encoder,
    epoch: &[f64],
    trial_id: &str,
    names: &crate::data::ConceptNames,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let pred = model.predict(&encoder.encode(epoch, trial_id, None)?)?;
    top_k_of(&pred, names, k)
}

pub fn top_k_of(pred: &[f64], names: &crate::data::ConceptNames, k: usize) -> Result<Vec<(String, f64)>> {
    if names.len() != pred.len() {
        return Err(Error::DimMismatch {
            expected: pred.len(),
            got: names.len(),
        });
    }
    if k > pred.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds {} concepts",
            pred.len()
        )));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]).then(a.cmp(&b)));
    Ok(order[..k]
        .iter()
        .map(|&j| (names.get(j).to_string(), pred[j]))
        .collect())
}

// ---- persistence ----

/// CSV with header `row_id,start_<t0>,start_<t1>,...`; missing cells are
/// empty fields.
pub fn grid_to_csv(grid: &AttributionGrid) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row_id".to_string()];
    header.extend(grid.starts.iter().map(|s| format!("start_{s}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..grid.n_rows() {
        let mut rec = vec![grid.row_ids[i].clone()];
        rec.extend(grid.row(i).iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Parse [`grid_to_csv`] output. The CSV carries no metric tag or mask
/// length, so the caller supplies them.
pub fn grid_from_csv(text: &str, metric: Metric, mask_length: usize) -> Result<AttributionGrid> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("row_id") {
        return Err(Error::Parse("grid csv must start with a row_id column".into()));
    }
    let starts: Vec<usize> = header
        .iter()
        .skip(1)
        .map(|h| {
            h.strip_prefix("start_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad grid column {h:?}")))
        })
        .collect::<Result<_>>()?;
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != starts.len() + 1 {
            return Err(Error::MetaMismatch(format!(
                "grid row has {} fields, header has {}",
                rec.len(),
                starts.len() + 1
            )));
        }
        row_ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            values.push(if f.is_empty() {
                None
            } else {
                Some(f.parse::<f64>().map_err(|e| Error::Parse(format!("{f:?}: {e}")))?)
            });
        }
    }
    AttributionGrid::new(metric, row_ids, starts, values, mask_length, None)
}

pub fn write_grid_csv(grid: &AttributionGrid, path: &Path) -> Result<()> {
    fs::write(path, grid_to_csv(grid)?)?;
    Ok(())
}

pub fn read_grid_csv(path: &Path, metric: Metric, mask_length: usize) -> Result<AttributionGrid> {
    grid_from_csv(&fs::read_to_string(path)?, metric, mask_length)
}

const NO_CONCEPT: usize = u32::MAX as usize;

#[derive(Serialize, Deserialize)]
struct GridSidecar {
    row_ids: Vec<String>,
}

/// `ATG1` | u32 n_rows | u32 n_starts | u8 metric | u32 mask_length |
/// u32 concept_index (0xFFFFFFFF = none) | n_starts × u32 starts |
/// row-major f32 payload with NaN marking missing cells. Row ids go to the
/// JSON sidecar.
pub fn write_grid(grid: &AttributionGrid, path: &Path) -> Result<()> {
    let mut w = Writer::new(b"ATG1");
    w.u32(grid.n_rows())?;
    w.u32(grid.n_starts())?;
    w.u8(grid.metric.to_byte());
    w.u32(grid.mask_length)?;
    w.u32(grid.concept_index.unwrap_or(NO_CONCEPT))?;
    for &s in &grid.starts {
        w.u32(s)?;
    }
    for v in &grid.values {
        w.f32(v.unwrap_or(f64::NAN));
    }
    fs::write(path, w.finish())?;
    write_json(
        &sidecar_path(path),
        &GridSidecar {
            row_ids: grid.row_ids.clone(),
        },
    )
}

pub fn read_grid(path: &Path) -> Result<AttributionGrid> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"ATG1")?;
    let n = r.u32()?;
    let k = r.u32()?;
    let metric = Metric::from_byte(r.u8()?)?;
    let mask_length = r.u32()?;
    let concept = r.u32()?;
    r.expect_remaining(4 * k + 4 * n * k)?;
    let starts = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let values = r
        .f32_vec(n * k)?
        .into_iter()
        .map(|v| (!v.is_nan()).then_some(v))
        .collect();
    r.finish()?;
    let side: GridSidecar = read_json(&sidecar_path(path))?;
    if side.row_ids.len() != n {
        return Err(Error::MetaMismatch(format!(
            "header has {n} rows, sidecar has {}",
            side.row_ids.len()
        )));
    }
    let concept_index = (concept != NO_CONCEPT).then_some(concept);
    AttributionGrid::new(metric, side.row_ids, starts, values, mask_length, concept_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ConceptNames, EmbeddingKind, TrialMeta};
    use crate::encoder::EncoderSpec;
    use crate::num::{Matrix, Rng};
    use crate::ridge::{ridge_fit, FitOptions};

    #[test]
    fn mask_epoch_examples() {
        assert_eq!(
            mask_epoch(&[1.0, 2.0, 3.0, 4.0], 1, 4, 1, 2, MaskValue::Zero).unwrap(),
            vec![1.0, 0.0, 0.0, 4.0]
        );
        assert_eq!(
            mask_epoch(&[1.0, 2.0, 3.0, 4.0], 1, 4, 0, 4, MaskValue::Zero).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(
            mask_epoch(&[1.0, 2.0, 3.0, 4.0], 1, 4, 2, 0, MaskValue::Zero).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert!(matches!(
            mask_epoch(&[1.0; 4], 1, 4, 3, 2, MaskValue::Zero),
            Err(Error::OutOfRange { .. })
        ));
        // all channels, mean fill
        let two = [1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 0.0, 4.0];
        assert_eq!(
            mask_epoch(&two, 2, 4, 1, 1, MaskValue::ChannelMean).unwrap(),
            vec![1.0, 3.0, 3.0, 6.0, 0.0, 1.0, 0.0, 4.0]
        );
    }

    #[test]
    fn mask_spec_validation() {
        assert!(MaskSpec::new(5, vec![3, 3]).is_err());
        assert!(MaskSpec::new(5, vec![]).is_err());
        let m = MaskSpec::default_sweep();
        assert_eq!(m.starts.len(), 201);
        assert!(m.validate(250).is_ok());
        assert!(matches!(m.validate(249), Err(Error::OutOfRange { start: 200, .. })));
    }

    struct Fixture {
        epochs: EpochSet,
        concepts: EmbeddingMatrix,
        encoder: Encoder,
        model: RidgeModel,
    }

    fn fixture(seed: u64) -> Fixture {
        let (c, t, n, fc) = (2, 12, 30, 4);
        let mut rng = Rng::new(seed);
        let meta: Vec<TrialMeta> = (0..n)
            .map(|i| TrialMeta {
                stimulus_id: format!("s{i}"),
                subject_id: "sub".into(),
                repetition: 0,
            })
            .collect();
        let mut data: Vec<f64> = (0..n * c * t).map(|_| rng.gaussian()).collect();
        // keep [8, 12) all zero in the first trial
        for ch in 0..c {
            data[ch * t + 8..ch * t + 12].fill(0.0);
        }
        let epochs = EpochSet::new(c, t, 100.0, data, meta).unwrap();
        let encoder = Encoder::new(&EncoderSpec::WindowMean { window_len: 3 }, c, t).unwrap();
        let x = encoder.encode_batch(&epochs).unwrap();
        let concepts_data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let r = x.row(i).to_vec();
                (0..fc).map(move |j| r[j] + 0.5 * r[j + 4]).collect::<Vec<_>>()
            })
            .map(|v| v + 0.1 * rng.gaussian())
            .collect();
        let concepts = EmbeddingMatrix::new(fc, concepts_data, epochs.trial_labels(), EmbeddingKind::Concept).unwrap();
        let model = ridge_fit(&x, &concepts, 0.5, FitOptions::default()).unwrap();
        Fixture {
            epochs,
            concepts,
            encoder,
            model,
        }
    }

    fn sweep(f: &Fixture, mask: &MaskSpec, opts: &SweepOptions) -> SweepResult {
        mask_sweep(&f.epochs, &f.encoder, &f.model, mask, &f.concepts, opts).unwrap()
    }

    #[test]
    fn empty_mask_is_a_no_op() {
        let f = fixture(1);
        let res = sweep(&f, &MaskSpec::new(0, vec![0, 4, 9]).unwrap(), &SweepOptions::default());
        assert!(res.m2.values().iter().all(|v| *v == Some(0.0)));
        assert!(res.m3.iter().all(|g| g.values().iter().all(|v| *v == Some(0.0))));
        for i in 0..f.epochs.n_trials() {
            let p = f
                .model
                .predict(&f.encoder.encode(f.epochs.trial(i), "", None).unwrap())
                .unwrap();
            let r = pearson(f.concepts.row(i), &p).unwrap();
            assert!(res.m1.row(i).iter().all(|v| *v == Some(r)));
        }
    }

    #[test]
    fn masking_zero_window_changes_nothing() {
        let f = fixture(2);
        let res = sweep(&f, &MaskSpec::new(4, vec![2, 8]).unwrap(), &SweepOptions::default());
        assert_eq!(res.m2.get(0, 1), Some(0.0));
        assert!(res.m2.get(0, 0).unwrap() != 0.0);
        assert!(res.m3.iter().all(|g| g.get(0, 1) == Some(0.0)));
    }

    #[test]
    fn m1_m2_identity_and_bounds() {
        let f = fixture(3);
        let mask = MaskSpec::new(3, (0..=9).collect()).unwrap();
        let res = sweep(&f, &mask, &SweepOptions::default());
        for i in 0..f.epochs.n_trials() {
            let p = f
                .model
                .predict(&f.encoder.encode(f.epochs.trial(i), "", None).unwrap())
                .unwrap();
            let r = pearson(f.concepts.row(i), &p).unwrap();
            for k in 0..mask.starts.len() {
                let m1 = res.m1.get(i, k).unwrap();
                assert!((-1.0..=1.0).contains(&m1));
                assert!((res.m2.get(i, k).unwrap() + m1 - r).abs() <= 1e-12);
            }
        }
        assert_eq!(res.m1.n_starts(), 10);
        assert_eq!(res.m3.len(), 4);
    }

    #[test]
    fn sweep_is_independent_of_workers_and_start_order() {
        let f = fixture(4);
        let mask = MaskSpec::new(3, (0..=9).collect()).unwrap();
        let one = sweep(
            &f,
            &mask,
            &SweepOptions {
                workers: 1,
                ..Default::default()
            },
        );
        let many = sweep(
            &f,
            &mask,
            &SweepOptions {
                workers: 6,
                ..Default::default()
            },
        );
        assert_eq!(one, many);
        // a sub-sweep reproduces the matching columns bit-for-bit
        let sub = sweep(&f, &MaskSpec::new(3, vec![2, 7]).unwrap(), &SweepOptions::default());
        for i in 0..f.epochs.n_trials() {
            assert_eq!(sub.m2.get(i, 0), one.m2.get(i, 2));
            assert_eq!(sub.m2.get(i, 1), one.m2.get(i, 7));
        }
    }

    #[test]
    fn m3_is_additive_over_disjoint_masks() {
        let f = fixture(5);
        let t = f.epochs.n_timepoints();
        for i in 0..5 {
            let x = f.epochs.trial(i);
            let e = f.encoder.encode(x, "", None).unwrap();
            let p = f.model.predict(&e).unwrap();
            let pred_masked = |spans: &[(usize, usize)]| {
                let mut m = x.to_vec();
                for &(s, l) in spans {
                    m = mask_epoch(&m, 2, t, s, l, MaskValue::Zero).unwrap();
                }
                f.model.predict(&f.encoder.encode(&m, "", None).unwrap()).unwrap()
            };
            let a = pred_masked(&[(0, 3)]);
            let b = pred_masked(&[(5, 4)]);
            let ab = pred_masked(&[(0, 3), (5, 4)]);
            for j in 0..4 {
                let lhs = p[j] - ab[j];
                let rhs = (p[j] - a[j]) + (p[j] - b[j]);
                assert!((lhs - rhs).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn predicted_reference_gives_self_correlation() {
        let f = fixture(6);
        let res = sweep(
            &f,
            &MaskSpec::new(0, vec![0]).unwrap(),
            &SweepOptions {
                reference: Reference::Predicted,
                ..Default::default()
            },
        );
        assert!(res.m1.values().iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_variance_cells_are_missing() {
        // a model that predicts a constant vector
        let f = fixture(7);
        let model = RidgeModel::new(
            Matrix::zeros(4, f.encoder.out_dim()),
            vec![1.0; 4],
            0.5,
            vec![0.0; f.encoder.out_dim()],
            vec![0.0; 4],
        )
        .unwrap();
        let res = mask_sweep(
            &f.epochs,
            &f.encoder,
            &model,
            &MaskSpec::new(2, vec![0, 3]).unwrap(),
            &f.concepts,
            &SweepOptions::default(),
        )
        .unwrap();
        assert!(res.m1.values().iter().all(Option::is_none));
        assert!(res.m2.values().iter().all(Option::is_none));
        assert!(res.m3[0].values().iter().all(|v| *v == Some(0.0)));
    }

    fn grid(rows: Vec<Vec<f64>>) -> AttributionGrid {
        let k = rows[0].len();
        let ids = (0..rows.len()).map(|i| format!("t{i}")).collect();
        AttributionGrid::new(
            Metric::DeltaActivation,
            ids,
            (0..k).collect(),
            rows.into_iter().flatten().map(Some).collect(),
            1,
            None,
        )
        .unwrap()
    }

    fn concepts_for(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::new(
            dim,
            rows.concat(),
            (0..rows.len()).map(|i| format!("t{i}")).collect(),
            EmbeddingKind::Concept,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let g = grid(vec![vec![0.0, 1.0], vec![2.0, 3.0]]);
        let c = concepts_for(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mean = aggregate_curves(&g, Aggregation::MeanOverTrials, &c).unwrap();
        assert_eq!(mean.grid.values(), &[Some(1.0), Some(2.0)]);

        let single = grid(vec![vec![0.3, -0.2, 0.1]]);
        let c1 = concepts_for(&[vec![1.0]]);
        assert_eq!(
            aggregate_curves(&single, Aggregation::MeanOverTrials, &c1)
                .unwrap()
                .grid
                .values(),
            single.values()
        );

        let all = aggregate_curves(&g, Aggregation::PerConceptTopQ { q: 1.0 }, &c).unwrap();
        assert_eq!(all.grid.n_rows(), 2);
        assert_eq!(all.grid.row(0), mean.grid.row(0));
        assert_eq!(all.grid.row(1), mean.grid.row(0));
        assert_eq!(all.grid.row_ids(), &["concept_00", "concept_01"]);

        // q = 0.5 of 2 trials: the single most active trial per concept
        let half = aggregate_curves(&g, Aggregation::PerConceptTopQ { q: 0.5 }, &c).unwrap();
        assert_eq!(half.grid.row(0), g.row(0));
        assert_eq!(half.grid.row(1), g.row(1));
        assert!(aggregate_curves(&g, Aggregation::PerConceptTopQ { q: 0.0 }, &c).is_err());
    }

    #[test]
    fn aggregate_reports_empty_groups() {
        let g = AttributionGrid::new(
            Metric::DeltaPredTruePearson,
            vec!["t0".into(), "t1".into()],
            vec![0, 1],
            vec![None, None, Some(1.0), Some(2.0)],
            1,
            None,
        )
        .unwrap();
        let c = concepts_for(&[vec![5.0, 0.0], vec![0.0, 5.0]]);
        let out = aggregate_curves(&g, Aggregation::PerConceptTopQ { q: 0.5 }, &c).unwrap();
        assert_eq!(out.empty_groups, vec!["concept_00".to_string()]);
        assert_eq!(out.grid.row(0), &[None, None]);
        assert_eq!(out.grid.row(1), &[Some(1.0), Some(2.0)]);
    }

    #[test]
    fn top_k_examples() {
        let names = ConceptNames::new(vec!["concept1".into(), "concept2".into(), "concept3".into()]).unwrap();
        let top = top_k_of(&[0.1, 0.9, 0.5], &names, 2).unwrap();
        assert_eq!(top, vec![("concept2".to_string(), 0.9), ("concept3".to_string(), 0.5)]);
        let full = top_k_of(&[0.1, 0.9, 0.5], &names, 3).unwrap();
        assert_eq!(full.last().unwrap().0, "concept1");
        let tied = top_k_of(&[0.5, 0.5, 0.5], &names, 3).unwrap();
        assert_eq!(
            tied.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(),
            ["concept1", "concept2", "concept3"]
        );
        assert!(top_k_of(&[0.1, 0.9, 0.5], &names, 4).is_err());
    }

    #[test]
    fn grid_csv_round_trip_with_missing() {
        let g = AttributionGrid::new(
            Metric::DeltaPredTruePearson,
            vec!["a:b:0".into(), "needs,quote".into()],
            vec![0, 5, 10],
            vec![Some(0.1), None, Some(-0.25), Some(1.5), Some(0.0), None],
            50,
            None,
        )
        .unwrap();
        let csv = grid_to_csv(&g).unwrap();
        assert!(csv.starts_with("row_id,start_0,start_5,start_10\n"));
        assert!(csv.contains("a:b:0,0.1,,-0.25\n"));
        assert_eq!(grid_from_csv(&csv, Metric::DeltaPredTruePearson, 50).unwrap(), g);
    }

    #[test]
    fn grid_binary_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.atg");
        let g = grid(vec![vec![0.5, 0.25]]);
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_grid(&path), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn grid_rejects_out_of_range_pearson() {
        assert!(AttributionGrid::new(
            Metric::MaskedVsTruePearson,
            vec!["a".into()],
            vec![0],
            vec![Some(1.5)],
            1,
            None
        )
        .is_err());
        assert!(AttributionGrid::new(
            Metric::DeltaPredTruePearson,
            vec!["a".into()],
            vec![0],
            vec![Some(1.5)],
            1,
            None
        )
        .is_ok());
    }
}
