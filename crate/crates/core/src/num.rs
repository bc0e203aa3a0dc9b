//! Numeric primitives shared by the rest of the pipeline.
//!
//! Nothing here is general-purpose linear algebra: there is a dense
//! row-major [`Matrix`], a packed [`SymMatrix`], a Cholesky-based SPD solve,
//! Pearson correlation, and a splitmix64/Box–Muller generator whose stream is
//! reproducible bit-for-bit on every platform (transcendentals come from
//! `libm`, not the host C library).

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Symmetric matrix; each off-diagonal entry is stored once (packed upper
/// triangle, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    order: usize,
    packed: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(order: usize) -> Self {
        SymMatrix {
            order,
            packed: vec![0.0; order * (order + 1) / 2],
        }
    }

    /// Build from a full square matrix, rejecting asymmetric input.
    pub fn from_full(m: &Matrix) -> Result<Self> {
        if m.rows != m.cols || m.rows == 0 {
            return Err(Error::InvalidShape(format!(
                "{}x{} is not a square matrix",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut s = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::InvalidShape(format!("entry ({i},{j}) is not symmetric")));
                }
                s.set(i, j, m.get(i, j));
            }
        }
        Ok(s)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        // rows 0..a contribute (order - r) entries each
        a * self.order - a * (a + 1) / 2 + b
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.packed[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.index(i, j);
        self.packed[k] = v;
    }

    /// Entries `(i, i..order)` as one contiguous slice.
    pub fn upper_row_mut(&mut self, i: usize) -> &mut [f64] {
        let start = self.index(i, i);
        &mut self.packed[start..start + self.order - i]
    }

    pub fn to_full(&self) -> Matrix {
        let n = self.order;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.packed.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput("mean of an empty vector"));
    }
    Ok(x.iter().sum::<f64>() / x.len() as f64)
}

/// Population variance (divides by n).
pub fn variance(x: &[f64]) -> Result<f64> {
    let m = mean(x)?;
    Ok(x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64)
}

pub fn std_dev(x: &[f64]) -> Result<f64> {
    variance(x).map(f64::sqrt)
}

/// Pearson correlation in population form, clamped to `[-1, 1]`.
///
/// Constant inputs are rejected with [`Error::ZeroVariance`] rather than
/// producing NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "pearson needs at least 2 values, got {}",
            x.len()
        )));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Lower-triangular Cholesky factor of an SPD matrix, returned dense.
pub fn cholesky(a: &SymMatrix) -> Result<Matrix> {
    let n = a.order();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let ajj = a.get(j, j);
        let d = ajj - dot(lj, lj);
        // pivots lost to cancellation count as singular
        if !(d > ajj.abs() * n as f64 * f64::EPSILON) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in j + 1..n {
            let s = a.get(i, j) - dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
            l.data[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `A·X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &SymMatrix, b: &Matrix) -> Result<Matrix> {
    let n = a.order();
    if b.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: b.rows(),
        });
    }
    let l = cholesky(a)?;
    let k = b.cols();
    let mut x = b.clone();
    // forward: L·Y = B
    for i in 0..n {
        for c in 0..k {
            let mut s = x.get(i, c);
            for j in 0..i {
                s -= l.get(i, j) * x.get(j, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    // backward: Lᵀ·X = Y
    for i in (0..n).rev() {
        for c in 0..k {
            let mut s = x.get(i, c);
            for j in i + 1..n {
                s -= l.get(j, i) * x.get(j, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// splitmix64 generator with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Next standard normal variate. Each Box–Muller pair yields two draws;
    /// the second is held for the following call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    // Direct evaluation of the defining sums, written independently of
    // `pearson` (sample form, no clamping).
    fn pearson_by_definition(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        cov / (sx * sy)
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]).unwrap(), -1.0);
        // sxy = 4, sxx = syy = 5 → 0.8
        let oracle = pearson_by_definition(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((oracle - 0.8).abs() < 1e-15);
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15, "{r}");
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            pearson(&[0.1; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spd_solve_identity_and_diagonal() {
        let b = Matrix::from_vec(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
        let x = spd_solve(&SymMatrix::from_full(&Matrix::identity(3)).unwrap(), &b).unwrap();
        assert_eq!(x, b);

        let a = SymMatrix::from_full(&Matrix::from_vec(2, 2, vec![4.0, 0.0, 0.0, 9.0]).unwrap()).unwrap();
        let b = Matrix::from_vec(2, 1, vec![8.0, 27.0]).unwrap();
        let x = spd_solve(&a, &b).unwrap();
        assert_eq!(x.data(), &[2.0, 3.0]);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = SymMatrix::from_full(&Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap()).unwrap();
        let b = Matrix::zeros(2, 1);
        assert!(matches!(
            spd_solve(&a, &b),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        let singular = SymMatrix::zeros(2);
        assert!(matches!(
            spd_solve(&singular, &b),
            Err(Error::NotPositiveDefinite { pivot: 0, .. })
        ));
    }

    // Gaussian elimination with partial pivoting on the full system.
    fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.rows();
        let k = b.cols();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = a.row(i).to_vec();
                row.extend_from_slice(b.row(i));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| aug[p][col].abs().total_cmp(&aug[q][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = aug[r][col] / aug[col][col];
                    for c in col..n + k {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let mut x = Matrix::zeros(n, k);
        for i in 0..n {
            for c in 0..k {
                x.set(i, c, aug[i][n + c] / aug[i][i]);
            }
        }
        x
    }

    fn random_spd(rng: &mut Rng, n: usize) -> SymMatrix {
        let g: Vec<f64> = (0..n * n).map(|_| rng.gaussian()).collect();
        let mut s = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum();
                s.set(i, j, v + if i == j { n as f64 } else { 0.0 });
            }
        }
        s
    }

    #[test]
    fn spd_solve_matches_gaussian_elimination() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 6);
            let b = Matrix::from_vec(6, 3, (0..18).map(|_| rng.gaussian()).collect()).unwrap();
            let x = spd_solve(&a, &b).unwrap();
            let oracle = gauss_solve(&a.to_full(), &b);
            for (u, v) in x.data().iter().zip(oracle.data()) {
                assert!((u - v).abs() <= 1e-10 * v.abs().max(1e-300), "{u} vs {v}");
            }
            // residual bound
            let full = a.to_full();
            let mut resid: f64 = 0.0;
            for i in 0..6 {
                for c in 0..3 {
                    let ax: f64 = (0..6).map(|j| full.get(i, j) * x.get(j, c)).sum();
                    resid = resid.max((ax - b.get(i, c)).abs());
                }
            }
            assert!(resid <= 1e-8 * (full.max_abs() * x.max_abs() + b.max_abs()));
        }
    }

    #[test]
    fn rng_determinism_and_moments() {
        let mut a = Rng::new(0);
        let draws: Vec<f64> = (0..100_000).map(|_| a.gaussian()).collect();
        let m = mean(&draws).unwrap();
        assert!(m.abs() <= 0.02, "{m}");
        let v = variance(&draws).unwrap();
        assert!((v - 1.0).abs() < 0.02, "{v}");

        let mut b = Rng::new(0);
        assert!(draws.iter().all(|d| *d == b.gaussian()));

        let mut c = Rng::new(1);
        let mut d = Rng::new(2);
        let first_c: Vec<f64> = (0..16).map(|_| c.gaussian()).collect();
        let first_d: Vec<f64> = (0..16).map(|_| d.gaussian()).collect();
        assert!(first_c.iter().zip(&first_d).all(|(x, y)| x != y));
    }

    #[test]
    fn splitmix_reference_values() {
        // splitmix64 reference outputs for seed 0
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn sym_matrix_stores_once() {
        let mut s = SymMatrix::zeros(4);
        s.set(3, 1, 2.5);
        assert_eq!(s.get(1, 3), 2.5);
        assert_eq!(s.packed.len(), 10);
        let asym = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        assert!(SymMatrix::from_full(&asym).is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine((x, y) in vec_pair(), a in 0.1f64..10.0, c in -50.0f64..50.0) {
            let Ok(r) = pearson(&x, &y) else { return Ok(()); };
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((pearson(&y, &x).unwrap() - r).abs() <= 1e-15);
            let ax: Vec<f64> = x.iter().map(|v| a * v + c).collect();
            prop_assert!((pearson(&ax, &y).unwrap() - r).abs() <= 1e-12);
            let nx: Vec<f64> = x.iter().map(|v| -a * v + c).collect();
            prop_assert!((pearson(&nx, &y).unwrap() + r).abs() <= 1e-12);
        }

        #[test]
        fn spd_solve_recovers_solution(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = Rng::new(seed);
            let a = random_spd(&mut rng, n);
            let x0 = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.gaussian()).collect()).unwrap();
            let full = a.to_full();
            let mut b = Matrix::zeros(n, 2);
            for i in 0..n {
                for c in 0..2 {
                    b.set(i, c, (0..n).map(|j| full.get(i, j) * x0.get(j, c)).sum());
                }
            }
            let x = spd_solve(&a, &b).unwrap();
            let err = x.data().iter().zip(x0.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-8 * x0.max_abs());
        }
    }
}
