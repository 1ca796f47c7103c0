//! Basis families for depth-dependent weight functions and the three basis
//! transformations: interpolation at control points, L2 projection via
//! Gauss-Legendre quadrature, and point-cloud least squares.
//!
//! All operations here are pure functions over immutable inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis needs K >= 1, got {0}")]
    InvalidK(usize),
    #[error("basis needs T > 0 and finite, got {0}")]
    InvalidT(f64),
    #[error("t={t} outside the basis domain [0, {t_final}]")]
    Domain { t: f64, t_final: f64 },
    #[error("source has T={source_t} but target has T={target_t}")]
    MismatchedT { source_t: f64, target_t: f64 },
    #[error("coefficient matrix has {len} entries, expected {k} x {p}")]
    CoeffShape { len: usize, k: usize, p: usize },
    #[error("projection system is numerically singular at row {0}")]
    Singular(usize),
    #[error("point cloud leaves basis function {index} uncovered (rank-deficient design)")]
    Coverage { index: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud samples disagree on width: {0} vs {1}")]
    RaggedCloud(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    PiecewiseConstant,
    PiecewiseLinear,
}

impl BasisFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            BasisFamily::PiecewiseConstant => "piecewise_constant",
            BasisFamily::PiecewiseLinear => "piecewise_linear",
        }
    }
}

impl std::fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BasisFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "piecewise_constant" | "pc" | "constant" => Ok(BasisFamily::PiecewiseConstant),
            "piecewise_linear" | "pl" | "linear" => Ok(BasisFamily::PiecewiseLinear),
            other => Err(format!("unknown basis family: {other}")),
        }
    }
}

/// A basis family with `k` functions on `[0, t_final]`.
///
/// Piecewise-constant uses `k` half-open cells of width `t_final / k`
/// (with `t = t_final` assigned to the last cell so evaluation is a
/// function). Piecewise-linear uses hat functions at `k` evenly spaced
/// control points; `k = 1` degenerates to the constant function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub k: usize,
    pub t_final: f64,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, k: usize, t_final: f64) -> Result<Self, BasisError> {
        if k < 1 {
            return Err(BasisError::InvalidK(k));
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(BasisError::InvalidT(t_final));
        }
        Ok(BasisSpec { family, k, t_final })
    }

    fn check_domain(&self, t: f64) -> Result<(), BasisError> {
        if !(0.0..=self.t_final).contains(&t) {
            return Err(BasisError::Domain {
                t,
                t_final: self.t_final,
            });
        }
        Ok(())
    }

    /// Evaluate all `k` basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, BasisError> {
        self.check_domain(t)?;
        let mut phi = vec![0.0; self.k];
        match self.family {
            BasisFamily::PiecewiseConstant => {
                let dt = self.t_final / self.k as f64;
                let cell = ((t / dt) as usize).min(self.k - 1);
                phi[cell] = 1.0;
            }
            BasisFamily::PiecewiseLinear => {
                if self.k == 1 {
                    phi[0] = 1.0;
                } else {
                    let h = self.t_final / (self.k - 1) as f64;
                    let cell = ((t / h) as usize).min(self.k - 2);
                    let local = (t - cell as f64 * h) / h;
                    phi[cell] = 1.0 - local;
                    phi[cell + 1] = local;
                }
            }
        }
        Ok(phi)
    }

    /// Control points at which coefficients equal function values: cell
    /// centers for piecewise-constant, element boundaries for
    /// piecewise-linear.
    pub fn control_points(&self) -> Vec<f64> {
        match self.family {
            BasisFamily::PiecewiseConstant => {
                let dt = self.t_final / self.k as f64;
                (0..self.k).map(|k| (k as f64 + 0.5) * dt).collect()
            }
            BasisFamily::PiecewiseLinear => {
                if self.k == 1 {
                    vec![self.t_final / 2.0]
                } else {
                    let h = self.t_final / (self.k - 1) as f64;
                    (0..self.k).map(|k| k as f64 * h).collect()
                }
            }
        }
    }

    /// Refinement target used by multi-level training: `2K` for
    /// piecewise-constant, `2K - 1` for piecewise-linear.
    pub fn next_k(&self) -> usize {
        match self.family {
            BasisFamily::PiecewiseConstant => 2 * self.k,
            BasisFamily::PiecewiseLinear => (2 * self.k).saturating_sub(1).max(1),
        }
    }

    pub fn refined(&self) -> BasisSpec {
        BasisSpec {
            family: self.family,
            k: self.next_k(),
            t_final: self.t_final,
        }
    }
}

/// A depth-dependent weight function: `theta(t) = sum_k phi_k(t) * coeffs[k, :]`.
///
/// `coeffs` has shape `(k, p)` where `p` is the flattened parameter width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub spec: BasisSpec,
    pub coeffs: Tensor,
}

impl WeightFunction {
    pub fn new(spec: BasisSpec, coeffs: Tensor) -> Result<Self, BasisError> {
        let (rows, _) = coeffs.dims2().map_err(|_| BasisError::CoeffShape {
            len: coeffs.len(),
            k: spec.k,
            p: 0,
        })?;
        if rows != spec.k {
            return Err(BasisError::CoeffShape {
                len: coeffs.len(),
                k: spec.k,
                p: coeffs.len() / rows.max(1),
            });
        }
        Ok(WeightFunction { spec, coeffs })
    }

    pub fn width(&self) -> usize {
        self.coeffs.dims2().map(|(_, p)| p).unwrap_or(0)
    }

    /// `theta(t)`: length-`p` combination of coefficient rows.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, BasisError> {
        let phi = self.spec.eval(t)?;
        let (k, p) = self.coeffs.dims2().expect("validated at construction");
        let mut out = vec![0.0; p];
        for (row, w) in phi.iter().enumerate().take(k) {
            if *w == 0.0 {
                continue;
            }
            let src = &self.coeffs.data()[row * p..(row + 1) * p];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        Ok(out)
    }

    /// Change of basis by evaluating at the target's control points.
    pub fn interpolate(&self, target: &BasisSpec) -> Result<WeightFunction, BasisError> {
        if (self.spec.t_final - target.t_final).abs() > 0.0 {
            return Err(BasisError::MismatchedT {
                source_t: self.spec.t_final,
                target_t: target.t_final,
            });
        }
        let p = self.width();
        let mut data = Vec::with_capacity(target.k * p);
        for t in target.control_points() {
            data.extend_from_slice(&self.eval(t)?);
        }
        Ok(WeightFunction {
            spec: *target,
            coeffs: Tensor::from_vec(vec![target.k, p], data).expect("sized above"),
        })
    }

    /// L2-optimal change of basis via quadrature (one factorization applied
    /// to all coefficient columns).
    pub fn project(&self, target: &BasisSpec) -> Result<WeightFunction, BasisError> {
        let a = projection_matrix(&self.spec, target)?;
        let coeffs = mat_product(&a, target.k, self.spec.k, &self.coeffs);
        Ok(WeightFunction {
            spec: *target,
            coeffs,
        })
    }
}

/// Samples `(t_i, value_i)` collected at integration stage times.
#[derive(Clone, Debug, Default)]
pub struct StatePointCloud {
    samples: Vec<(f64, Vec<f64>)>,
}

impl StatePointCloud {
    pub fn new() -> Self {
        StatePointCloud::default()
    }

    pub fn push(&mut self, t: f64, value: Vec<f64>) {
        self.samples.push((t, value));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(f64, Vec<f64>)] {
        &self.samples
    }

    /// Least-squares fit of the cloud onto `target` via normal equations,
    /// solved once for all value columns. Returns a `(k, p)` coefficient
    /// tensor.
    pub fn project(&self, target: &BasisSpec) -> Result<Tensor, BasisError> {
        if self.samples.is_empty() {
            return Err(BasisError::EmptyCloud);
        }
        let p = self.samples[0].1.len();
        for (_, v) in &self.samples {
            if v.len() != p {
                return Err(BasisError::RaggedCloud(p, v.len()));
            }
        }
        let k = target.k;
        // Normal equations: (Phi^T Phi) theta = Phi^T V, accumulated row by
        // row without materializing Phi.
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k * p];
        for (t, value) in &self.samples {
            let phi = target.eval(*t)?;
            for i in 0..k {
                if phi[i] == 0.0 {
                    continue;
                }
                for j in 0..k {
                    gram[i * k + j] += phi[i] * phi[j];
                }
                for (c, v) in value.iter().enumerate() {
                    rhs[i * p + c] += phi[i] * v;
                }
            }
        }
        let chol = cholesky(&gram, k).map_err(|index| BasisError::Coverage { index })?;
        cholesky_solve_columns(&chol, k, &mut rhs, p);
        Ok(Tensor::from_vec(vec![k, p], rhs).expect("sized above"))
    }
}

/// Breakpoints where a basis loses smoothness: cell boundaries for
/// piecewise-constant, element boundaries for piecewise-linear.
fn breakpoints(spec: &BasisSpec) -> Vec<f64> {
    let elems = match spec.family {
        BasisFamily::PiecewiseConstant => spec.k,
        BasisFamily::PiecewiseLinear => (spec.k - 1).max(1),
    };
    (0..=elems)
        .map(|i| spec.t_final * i as f64 / elems as f64)
        .collect()
}

/// The `K2 x K1` operator `A = H^{-1} R` mapping source coefficients to
/// L2-projected target coefficients.
///
/// Sub-cells are the union of both bases' breakpoints so every integrand is
/// a polynomial on each sub-cell; a 4-point Gauss-Legendre rule per sub-cell
/// (exact through polynomial degree 7) then integrates exactly.
pub fn projection_matrix(source: &BasisSpec, target: &BasisSpec) -> Result<Vec<f64>, BasisError> {
    if (source.t_final - target.t_final).abs() > 0.0 {
        return Err(BasisError::MismatchedT {
            source_t: source.t_final,
            target_t: target.t_final,
        });
    }
    let (k1, k2) = (source.k, target.k);
    let mut cuts = breakpoints(source);
    cuts.extend(breakpoints(target));
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * source.t_final);

    let (nodes, weights) = gauss_legendre_4();
    let mut hessian = vec![0.0; k2 * k2];
    let mut transfer = vec![0.0; k2 * k1];
    for pair in cuts.windows(2) {
        let (left, right) = (pair[0], pair[1]);
        let cell_width = right - left;
        for (xi, w) in nodes.iter().zip(weights.iter()) {
            let t = left + 0.5 * cell_width * (xi + 1.0);
            let scaled = w * 0.5 * cell_width;
            let phi2 = target.eval(t)?;
            let phi1 = source.eval(t)?;
            for j in 0..k2 {
                if phi2[j] == 0.0 {
                    continue;
                }
                let row_h = &mut hessian[j * k2..(j + 1) * k2];
                for (m, p2) in phi2.iter().enumerate() {
                    row_h[m] += scaled * phi2[j] * p2;
                }
                let row_r = &mut transfer[j * k1..(j + 1) * k1];
                for (a, p1) in phi1.iter().enumerate() {
                    row_r[a] += scaled * phi2[j] * p1;
                }
            }
        }
    }

    let chol = cholesky(&hessian, k2).map_err(BasisError::Singular)?;
    cholesky_solve_columns(&chol, k2, &mut transfer, k1);
    Ok(transfer)
}

/// 4-point Gauss-Legendre rule on `[-1, 1]`.
fn gauss_legendre_4() -> ([f64; 4], [f64; 4]) {
    let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
    let wa = (18.0 + 30.0f64.sqrt()) / 36.0;
    let wb = (18.0 - 30.0f64.sqrt()) / 36.0;
    ([-b, -a, a, b], [wb, wa, wa, wb])
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with the row index whose pivot falls below `1e-12 * max diagonal`.
fn cholesky(mat: &[f64], n: usize) -> Result<Vec<f64>, usize> {
    let max_diag = (0..n)
        .map(|i| mat[i * n + i].abs())
        .fold(0.0f64, f64::max);
    let threshold = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = mat[i * n + j];
            for m in 0..j {
                sum -= l[i * n + m] * l[j * n + m];
            }
            if i == j {
                if sum <= threshold {
                    return Err(i);
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// In-place solve of `L L^T X = B` for `B` with `cols` columns.
fn cholesky_solve_columns(l: &[f64], n: usize, b: &mut [f64], cols: usize) {
    // forward substitution
    for i in 0..n {
        for m in 0..i {
            let lim = l[i * n + m];
            for c in 0..cols {
                let v = b[m * cols + c];
                b[i * cols + c] -= lim * v;
            }
        }
        let d = l[i * n + i];
        for c in 0..cols {
            b[i * cols + c] /= d;
        }
    }
    // back substitution
    for i in (0..n).rev() {
        for m in (i + 1)..n {
            let lmi = l[m * n + i];
            for c in 0..cols {
                let v = b[m * cols + c];
                b[i * cols + c] -= lmi * v;
            }
        }
        let d = l[i * n + i];
        for c in 0..cols {
            b[i * cols + c] /= d;
        }
    }
}

/// `(rows x inner) * (inner x p)` with the left factor as a flat slice.
fn mat_product(a: &[f64], rows: usize, inner: usize, coeffs: &Tensor) -> Tensor {
    let (_, p) = coeffs.dims2().expect("coeffs validated");
    let mut out = vec![0.0; rows * p];
    for i in 0..rows {
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            let src = &coeffs.data()[k * p..(k + 1) * p];
            let dst = &mut out[i * p..(i + 1) * p];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += aik * s;
            }
        }
    }
    Tensor::from_vec(vec![rows, p], out).expect("sized above")
}
