//! Synthetic epochs with planted per-concept temporal windows.
//!
//! Each concept `j` owns a window and a fixed Gaussian spatio-temporal
//! template (unit std, zero outside the window). A stimulus draws concept
//! activations `c ~ N(0, I)`; every repetition of it is
//! `Σⱼ c[j]·templateⱼ + noise` with i.i.d. noise of std `1/snr`. With unit
//! activations and templates, `snr` is the in-window signal std over the
//! noise std.

use serde::{Deserialize, Serialize};

use crate::attrib::AttributionGrid;
use crate::data::{ConceptNames, EmbeddingKind, EmbeddingMatrix, EpochSet, TrialMeta};
use crate::error::{Error, Result};
use crate::num::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub n_concepts: usize,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub sample_rate_hz: f64,
    /// One window per concept.
    pub windows: Vec<Window>,
    pub snr: f64,
    pub trials_per_stimulus: usize,
    pub n_stimuli: usize,
    pub seed: u64,
    #[serde(default = "default_subject")]
    pub subject_id: String,
}

fn default_subject() -> String {
    "sub-01".to_string()
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            n_concepts: 8,
            n_channels: 16,
            n_timepoints: 250,
            sample_rate_hz: 250.0,
            windows: (0..8)
                .map(|j| Window {
                    start: 10 + 25 * j,
                    length: 40,
                })
                .collect(),
            snr: 5.0,
            trials_per_stimulus: 4,
            n_stimuli: 60,
            seed: 0,
            subject_id: default_subject(),
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_concepts == 0 || self.n_channels == 0 || self.n_timepoints == 0 {
            return bad("counts must be at least 1".into());
        }
        if self.trials_per_stimulus == 0 || self.n_stimuli == 0 {
            return bad("trials_per_stimulus and n_stimuli must be at least 1".into());
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr {} must be positive", self.snr));
        }
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return bad(format!("sample rate {} must be positive", self.sample_rate_hz));
        }
        if self.windows.len() != self.n_concepts {
            return bad(format!(
                "{} windows for {} concepts",
                self.windows.len(),
                self.n_concepts
            ));
        }
        for (j, w) in self.windows.iter().enumerate() {
            if w.length == 0 || w.start + w.length > self.n_timepoints {
                return bad(format!(
                    "window {j} [{}, {}) outside [0, {})",
                    w.start,
                    w.start + w.length,
                    self.n_timepoints
                ));
            }
        }
        if self.subject_id.is_empty() {
            return bad("subject_id must be non-empty".into());
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        1.0 / self.snr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub epochs: EpochSet,
    /// One row per stimulus, row ids are stimulus ids.
    pub true_concepts: EmbeddingMatrix,
    pub names: ConceptNames,
    /// `n_concepts × C × T` planted templates (zero outside each window).
    pub templates: Vec<f64>,
}

pub fn stimulus_id(s: usize) -> String {
    format!("stim-{s:04}")
}

/// Deterministic in `spec.seed`: templates are drawn first (concept,
/// channel, time order), then for each stimulus its activations followed by
/// the noise of each repetition.
pub fn generate(spec: &PlantSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (fc, c, t) = (spec.n_concepts, spec.n_channels, spec.n_timepoints);
    let per_trial = c * t;
    let mut rng = Rng::new(spec.seed);

    let mut templates = vec![0.0; fc * per_trial];
    for (j, w) in spec.windows.iter().enumerate() {
        for ch in 0..c {
            for tt in w.start..w.start + w.length {
                templates[j * per_trial + ch * t + tt] = rng.gaussian();
            }
        }
    }

    let noise_std = spec.noise_std();
    let n_trials = spec.n_stimuli * spec.trials_per_stimulus;
    let mut data = Vec::with_capacity(n_trials * per_trial);
    let mut meta = Vec::with_capacity(n_trials);
    let mut concepts = Vec::with_capacity(spec.n_stimuli * fc);
    let mut ids = Vec::with_capacity(spec.n_stimuli);
    for s in 0..spec.n_stimuli {
        let act: Vec<f64> = (0..fc).map(|_| rng.gaussian()).collect();
        let mut clean = vec![0.0; per_trial];
        for (j, a) in act.iter().enumerate() {
            for (x, tpl) in clean.iter_mut().zip(&templates[j * per_trial..(j + 1) * per_trial]) {
                *x += a * tpl;
            }
        }
        for rep in 0..spec.trials_per_stimulus {
            if noise_std > 0.0 {
                data.extend(clean.iter().map(|x| x + noise_std * rng.gaussian()));
            } else {
                data.extend_from_slice(&clean);
            }
            meta.push(TrialMeta {
                stimulus_id: stimulus_id(s),
                subject_id: spec.subject_id.clone(),
                repetition: rep as u32,
            });
        }
        concepts.extend(act);
        ids.push(stimulus_id(s));
    }
    let names = ConceptNames::numbered(fc);
    let epochs = EpochSet::new(c, t, spec.sample_rate_hz, data, meta)?;
    let true_concepts =
        EmbeddingMatrix::new(fc, concepts, ids, EmbeddingKind::Concept)?.with_concept_names(names.clone())?;
    Ok(SyntheticData {
        epochs,
        true_concepts,
        names,
        templates,
    })
}

/// Index of the largest present value; earliest on ties.
pub fn argmax(row: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in row.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub per_concept_hit: Vec<bool>,
    pub hit_rate: f64,
    /// Mask start at each row's argmax.
    pub peak_starts: Vec<Option<usize>>,
}

/// Concept `j` is a hit when the argmax start of row `j` lies within
/// `tolerance` of some start whose mask overlaps window `j`.
pub fn score_recovery(grid: &AttributionGrid, spec: &PlantSpec, tolerance: usize) -> Result<Recovery> {
    if grid.n_rows() != spec.n_concepts {
        return Err(Error::SpecGridMismatch(format!(
            "grid has {} rows, spec has {} concepts",
            grid.n_rows(),
            spec.n_concepts
        )));
    }
    if grid
        .starts()
        .iter()
        .any(|&s| s + grid.mask_length() > spec.n_timepoints)
    {
        return Err(Error::SpecGridMismatch(
            "mask extends past the spec's timepoints".into(),
        ));
    }
    let l = grid.mask_length() as i64;
    let tol = tolerance as i64;
    let mut hits = Vec::with_capacity(spec.n_concepts);
    let mut peaks = Vec::with_capacity(spec.n_concepts);
    for (j, w) in spec.windows.iter().enumerate() {
        let peak = argmax(grid.row(j)).map(|k| grid.starts()[k]);
        peaks.push(peak);
        // overlapping starts: s − L + 1 ..= s + len − 1 (with L = 0 read as 1)
        let lo = w.start as i64 - l.max(1) + 1 - tol;
        let hi = (w.start + w.length) as i64 - 1 + tol;
        hits.push(peak.is_some_and(|p| (lo..=hi).contains(&(p as i64))));
    }
    let hit_rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Ok(Recovery {
        per_concept_hit: hits,
        hit_rate,
        peak_starts: peaks,
    })
}
