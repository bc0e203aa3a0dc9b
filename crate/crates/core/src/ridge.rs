//! Ridge map from signal embeddings to concept embeddings.
//!
//! Minimizes `(1/n) Σᵢ ‖yᵢ − (W xᵢ + b)‖² + λ ‖W‖²_F`. The bias is left
//! unpenalized by centering, which turns the problem into the normal
//! equations `(X_cᵀ X_c + n λ I) Wᵀ = X_cᵀ Y_c` with `b = ȳ − W x̄`.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::num::{check_finite, pearson, spd_solve, Matrix, SymMatrix};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// F_c × F_e
    weights: Matrix,
    bias: Vec<f64>,
    lambda: f64,
    feature_means: Vec<f64>,
    target_means: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Standardize features to unit population std before fitting; the
    /// scaling is folded back into `W` so the model still acts on raw
    /// embeddings.
    pub zscore_features: bool,
}

impl RidgeModel {
    pub fn new(
        weights: Matrix,
        bias: Vec<f64>,
        lambda: f64,
        feature_means: Vec<f64>,
        target_means: Vec<f64>,
    ) -> Result<Self> {
        let (fc, fe) = (weights.rows(), weights.cols());
        if bias.len() != fc || target_means.len() != fc {
            return Err(Error::DimMismatch {
                expected: fc,
                got: bias.len().min(target_means.len()),
            });
        }
        if feature_means.len() != fe {
            return Err(Error::DimMismatch {
                expected: fe,
                got: feature_means.len(),
            });
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda {lambda} must be a finite non-negative number"
            )));
        }
        check_finite(weights.data(), "ridge weights")?;
        check_finite(&bias, "ridge bias")?;
        check_finite(&feature_means, "ridge feature means")?;
        check_finite(&target_means, "ridge target means")?;
        Ok(RidgeModel {
            weights,
            bias,
            lambda,
            feature_means,
            target_means,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn feature_means(&self) -> &[f64] {
        &self.feature_means
    }

    pub fn target_means(&self) -> &[f64] {
        &self.target_means
    }

    pub fn n_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_targets(&self) -> usize {
        self.weights.rows()
    }

    /// `W · e + b`.
    pub fn predict(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weights.mat_vec(embedding)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    /// Value of the training objective on `(x, y)`.
    pub fn objective(&self, x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
        check_aligned(x, y)?;
        let mut loss = 0.0;
        for i in 0..x.n_rows() {
            let p = self.predict(x.row(i))?;
            loss += p.iter().zip(y.row(i)).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        }
        let penalty: f64 = self.weights.data().iter().map(|w| w * w).sum();
        Ok(loss / x.n_rows() as f64 + self.lambda * penalty)
    }
}

fn check_aligned(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.n_rows() != y.n_rows() {
        return Err(Error::RowMismatch(format!(
            "{} signal rows vs {} concept rows",
            x.n_rows(),
            y.n_rows()
        )));
    }
    if let Some(i) = (0..x.n_rows()).find(|&i| x.row_ids()[i] != y.row_ids()[i]) {
        return Err(Error::RowMismatch(format!(
            "row {i}: {:?} vs {:?}",
            x.row_ids()[i],
            y.row_ids()[i]
        )));
    }
    Ok(())
}

fn column_means(m: &EmbeddingMatrix) -> Vec<f64> {
    let mut means = vec![0.0; m.dim()];
    for i in 0..m.n_rows() {
        for (a, v) in means.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    let n = m.n_rows() as f64;
    means.iter_mut().for_each(|a| *a /= n);
    means
}

pub fn ridge_fit(x: &EmbeddingMatrix, y: &EmbeddingMatrix, lambda: f64, opts: FitOptions) -> Result<RidgeModel> {
    check_aligned(x, y)?;
    let n = x.n_rows();
    if n < 2 {
        return Err(Error::InvalidShape(format!("ridge needs at least 2 rows, got {n}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} must be a finite non-negative number"
        )));
    }
    let (fe, fc) = (x.dim(), y.dim());
    let x_mean = column_means(x);
    let y_mean = column_means(y);

    let mut xc = Vec::with_capacity(n * fe);
    for i in 0..n {
        xc.extend(x.row(i).iter().zip(&x_mean).map(|(v, m)| v - m));
    }
    let scale: Vec<f64> = if opts.zscore_features {
        (0..fe)
            .map(|k| {
                let var = (0..n).map(|i| xc[i * fe + k] * xc[i * fe + k]).sum::<f64>() / n as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; fe]
    };
    if opts.zscore_features {
        for row in xc.chunks_mut(fe) {
            row.iter_mut().zip(&scale).for_each(|(v, s)| *v /= s);
        }
    }

    // Gram = X_cᵀX_c + nλI (upper triangle), rhs = X_cᵀY_c
    let mut gram = SymMatrix::zeros(fe);
    let mut rhs = Matrix::zeros(fe, fc);
    for i in 0..n {
        let xr = &xc[i * fe..(i + 1) * fe];
        let yr = y.row(i);
        for a in 0..fe {
            let xa = xr[a];
            if xa == 0.0 {
                continue;
            }
            for (g, xb) in gram.upper_row_mut(a).iter_mut().zip(&xr[a..]) {
                *g += xa * xb;
            }
            for (t, (yv, ym)) in yr.iter().zip(&y_mean).enumerate() {
                rhs.set(a, t, rhs.get(a, t) + xa * (yv - ym));
            }
        }
    }
    let ridge = n as f64 * lambda;
    for a in 0..fe {
        gram.set(a, a, gram.get(a, a) + ridge);
    }
    let wt = spd_solve(&gram, &rhs)?;

    let mut weights = Matrix::zeros(fc, fe);
    for t in 0..fc {
        for a in 0..fe {
            weights.set(t, a, wt.get(a, t) / scale[a]);
        }
    }
    let bias: Vec<f64> = (0..fc)
        .map(|t| y_mean[t] - weights.row(t).iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>())
        .collect();
    RidgeModel::new(weights, bias, lambda, x_mean, y_mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeScore {
    /// Pearson between predicted and true values across rows, per concept
    /// dimension; `None` where either side is constant.
    pub per_dim_pearson: Vec<Option<f64>>,
    /// Mean over the non-missing dimensions.
    pub mean_pearson: Option<f64>,
}

pub fn ridge_score(model: &RidgeModel, x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<RidgeScore> {
    check_aligned(x, y)?;
    let n = x.n_rows();
    if n < 3 {
        return Err(Error::InvalidShape(format!("scoring needs at least 3 rows, got {n}")));
    }
    if y.dim() != model.n_targets() {
        return Err(Error::DimMismatch {
            expected: model.n_targets(),
            got: y.dim(),
        });
    }
    let fc = model.n_targets();
    let mut pred = vec![Vec::with_capacity(n); fc];
    let mut truth = vec![Vec::with_capacity(n); fc];
    for i in 0..n {
        let p = model.predict(x.row(i))?;
        for j in 0..fc {
            pred[j].push(p[j]);
            truth[j].push(y.row(i)[j]);
        }
    }
    let per_dim_pearson: Vec<Option<f64>> = (0..fc)
        .map(|j| match pearson(&pred[j], &truth[j]) {
            Ok(r) => Ok(Some(r)),
            Err(Error::ZeroVariance) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let present: Vec<f64> = per_dim_pearson.iter().flatten().copied().collect();
    let mean_pearson = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(RidgeScore {
        per_dim_pearson,
        mean_pearson,
    })
}

/// `RDG1` | u32 F_c | u32 F_e | f64 λ | W | b | feature means | target means,
/// all little-endian f64.
pub fn write_model(model: &RidgeModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn model_to_bytes(model: &RidgeModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(b"RDG1");
    w.u32(model.n_targets())?;
    w.u32(model.n_features())?;
    w.f64(model.lambda);
    for v in model
        .weights
        .data()
        .iter()
        .chain(&model.bias)
        .chain(&model.feature_means)
        .chain(&model.target_means)
    {
        w.f64(*v);
    }
    Ok(w.finish())
}

pub fn read_model(path: &Path) -> Result<RidgeModel> {
    model_from_bytes(&fs::read(path)?)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<RidgeModel> {
    let mut r = Reader::new(bytes, b"RDG1")?;
    let fc = r.u32()?;
    let fe = r.u32()?;
    let lambda = r.f64()?;
    r.expect_remaining(8 * (fc * fe + 2 * fc + fe))?;
    let weights = Matrix::from_vec(fc, fe, r.f64_vec(fc * fe)?)?;
    let bias = r.f64_vec(fc)?;
    let feature_means = r.f64_vec(fe)?;
    let target_means = r.f64_vec(fc)?;
    r.finish()?;
    RidgeModel::new(weights, bias, lambda, feature_means, target_means)
}
