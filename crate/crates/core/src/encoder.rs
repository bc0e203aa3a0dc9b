//! Surrogate signal encoders: epoch (C×T) → embedding (F_e).
//!
//! Both computed surrogates are linear, so masking effects are analytically
//! predictable. Embeddings from an external (possibly nonlinear) model can
//! be slotted in through [`EncoderSpec::Precomputed`], one table per mask
//! configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attrib::{mask_epoch, MaskValue};
use crate::data::{read_embeddings, EmbeddingKind, EmbeddingMatrix, EpochSet};
use crate::error::{Error, Result};
use crate::num::{dot, Matrix, Rng};

pub const DEFAULT_OUT_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// `P · vec(epoch)` with `P` an `out_dim × (C·T)` Gaussian matrix drawn
    /// from `seed`, entries scaled by `1/√(C·T)`.
    FlattenProjection { out_dim: usize, seed: u64 },
    /// Per-channel means over consecutive windows; a trailing partial window
    /// is averaged over its actual length.
    WindowMean { window_len: usize },
    /// Tables `emb_mask_none.bin` and `emb_mask_<start>_<len>.bin` in `dir`.
    Precomputed { dir: PathBuf },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::FlattenProjection {
            out_dim: DEFAULT_OUT_DIM,
            seed: 0,
        }
    }
}

/// Table key for a mask configuration: `none` or `<start>_<len>`.
pub fn mask_key(mask: Option<(usize, usize)>) -> String {
    match mask {
        None => "none".to_string(),
        Some((start, len)) => format!("{start}_{len}"),
    }
}

pub fn precomputed_file_name(mask: Option<(usize, usize)>) -> String {
    format!("emb_mask_{}.bin", mask_key(mask))
}

#[derive(Debug, Clone)]
enum Kind {
    Flatten {
        projection: Matrix,
    },
    WindowMean {
        window_len: usize,
    },
    Precomputed {
        tables: HashMap<String, EmbeddingMatrix>,
        out_dim: usize,
    },
}

/// An [`EncoderSpec`] instantiated for fixed epoch dimensions.
#[derive(Debug, Clone)]
pub struct Encoder {
    n_channels: usize,
    n_timepoints: usize,
    kind: Kind,
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, n_channels: usize, n_timepoints: usize) -> Result<Self> {
        let kind = match spec {
            EncoderSpec::FlattenProjection { out_dim, seed } => {
                if *out_dim == 0 {
                    return Err(Error::InvalidParameter("encoder out_dim must be at least 1".into()));
                }
                Kind::Flatten {
                    projection: projection_matrix(*seed, n_channels, n_timepoints, *out_dim),
                }
            }
            EncoderSpec::WindowMean { window_len } => {
                if *window_len == 0 {
                    return Err(Error::InvalidParameter("window_len must be at least 1".into()));
                }
                Kind::WindowMean {
                    window_len: *window_len,
                }
            }
            EncoderSpec::Precomputed { dir } => {
                return Encoder::precomputed(load_tables(dir)?, n_channels, n_timepoints)
            }
        };
        Ok(Encoder {
            n_channels,
            n_timepoints,
            kind,
        })
    }

    /// Build from in-memory tables keyed by [`mask_key`]. The `none` table
    /// is required.
    pub fn precomputed(
        tables: HashMap<String, EmbeddingMatrix>,
        n_channels: usize,
        n_timepoints: usize,
    ) -> Result<Self> {
        let out_dim = tables
            .get("none")
            .ok_or_else(|| Error::MissingPrecomputedRow {
                trial: "*".into(),
                mask_key: "none".into(),
            })?
            .dim();
        if let Some(t) = tables.values().find(|t| t.dim() != out_dim) {
            return Err(Error::DimMismatch {
                expected: out_dim,
                got: t.dim(),
            });
        }
        Ok(Encoder {
            n_channels,
            n_timepoints,
            kind: Kind::Precomputed { tables, out_dim },
        })
    }

    pub fn out_dim(&self) -> usize {
        match &self.kind {
            Kind::Flatten { projection } => projection.rows(),
            Kind::WindowMean { window_len } => self.n_channels * self.n_timepoints.div_ceil(*window_len),
            Kind::Precomputed { out_dim, .. } => *out_dim,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, Kind::Precomputed { .. })
    }

    fn check_dims(&self, epoch: &[f64]) -> Result<()> {
        let expected = self.n_channels * self.n_timepoints;
        if epoch.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: epoch.len(),
            });
        }
        Ok(())
    }

    /// Encode one epoch. `trial_id` and `mask` only matter for precomputed
    /// tables, where the epoch samples themselves are not consulted.
    pub fn encode(&self, epoch: &[f64], trial_id: &str, mask: Option<(usize, usize)>) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Flatten { projection } => {
                self.check_dims(epoch)?;
                projection.mat_vec(epoch)
            }
            Kind::WindowMean { window_len } => {
                self.check_dims(epoch)?;
                Ok(window_means(epoch, self.n_channels, self.n_timepoints, *window_len))
            }
            Kind::Precomputed { tables, .. } => lookup(tables, trial_id, mask),
        }
    }

    /// Embedding of `epoch` with `[start, start+len)` masked, given the
    /// unmasked embedding `base`.
    ///
    /// For the flatten projection only the masked columns are touched:
    /// `base − P[:, window] · (x[window] − fill)`.
    pub fn encode_masked(
        &self,
        epoch: &[f64],
        trial_id: &str,
        start: usize,
        len: usize,
        value: MaskValue,
        base: &[f64],
    ) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Flatten { projection } => {
                self.check_dims(epoch)?;
                let t = self.n_timepoints;
                if start + len > t {
                    return Err(Error::OutOfRange {
                        start,
                        len,
                        timepoints: t,
                    });
                }
                let fill = value.fill_values(epoch, self.n_channels, t);
                let mut shifted = Vec::with_capacity(self.n_channels * len);
                for (c, f) in fill.iter().enumerate() {
                    shifted.extend(epoch[c * t + start..c * t + start + len].iter().map(|v| v - f));
                }
                let mut out = base.to_vec();
                for (r, o) in out.iter_mut().enumerate() {
                    let row = projection.row(r);
                    let mut delta = 0.0;
                    for c in 0..self.n_channels {
                        delta += dot(
                            &row[c * t + start..c * t + start + len],
                            &shifted[c * len..(c + 1) * len],
                        );
                    }
                    *o -= delta;
                }
                Ok(out)
            }
            Kind::WindowMean { .. } => {
                let masked = mask_epoch(epoch, self.n_channels, self.n_timepoints, start, len, value)?;
                self.encode(&masked, trial_id, Some((start, len)))
            }
            Kind::Precomputed { tables, .. } => lookup(tables, trial_id, Some((start, len))),
        }
    }

    /// Row `i` == `encode(trial i)`; row ids are the trial labels.
    pub fn encode_batch(&self, epochs: &EpochSet) -> Result<EmbeddingMatrix> {
        if epochs.n_channels() != self.n_channels || epochs.n_timepoints() != self.n_timepoints {
            return Err(Error::DimMismatch {
                expected: self.n_channels * self.n_timepoints,
                got: epochs.n_channels() * epochs.n_timepoints(),
            });
        }
        let labels = epochs.trial_labels();
        let mut data = Vec::with_capacity(labels.len() * self.out_dim());
        for (i, label) in labels.iter().enumerate() {
            data.extend(self.encode(epochs.trial(i), label, None)?);
        }
        EmbeddingMatrix::new(self.out_dim(), data, labels, EmbeddingKind::Signal)
    }
}

fn projection_matrix(seed: u64, n_channels: usize, n_timepoints: usize, out_dim: usize) -> Matrix {
    let cols = n_channels * n_timepoints;
    let scale = 1.0 / (cols as f64).sqrt();
    let mut rng = Rng::new(seed);
    let data: Vec<f64> = (0..out_dim * cols).map(|_| rng.gaussian() * scale).collect();
    Matrix::from_vec(out_dim, cols, data).expect("shape is consistent by construction")
}

fn window_means(epoch: &[f64], n_channels: usize, n_timepoints: usize, window_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_channels * n_timepoints.div_ceil(window_len));
    for c in 0..n_channels {
        let channel = &epoch[c * n_timepoints..(c + 1) * n_timepoints];
        for w in channel.chunks(window_len) {
            out.push(w.iter().sum::<f64>() / w.len() as f64);
        }
    }
    out
}

fn lookup(tables: &HashMap<String, EmbeddingMatrix>, trial_id: &str, mask: Option<(usize, usize)>) -> Result<Vec<f64>> {
    let key = mask_key(mask);
    let missing = || Error::MissingPrecomputedRow {
        trial: trial_id.to_string(),
        mask_key: key.clone(),
    };
    let table = tables.get(&key).ok_or_else(missing)?;
    let i = table
        .row_ids()
        .iter()
        .position(|id| id == trial_id)
        .ok_or_else(missing)?;
    Ok(table.row(i).to_vec())
}

/// Load every `emb_mask_*.bin` table in `dir`.
pub fn load_tables(dir: &Path) -> Result<HashMap<String, EmbeddingMatrix>> {
    let mut tables = HashMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(key) = name.strip_prefix("emb_mask_").and_then(|n| n.strip_suffix(".bin")) {
            tables.insert(key.to_string(), read_embeddings(&path)?);
        }
    }
    Ok(tables)
}
