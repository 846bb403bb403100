//! Base forecast error covariance `W_h` estimated from in-sample `h`-step
//! residuals.
//!
//! The shrinkage estimator pulls correlations toward zero and variances
//! toward their median, with data-driven intensities:
//!
//! * `w_ij = r_ij^shr * sqrt(v_i * v_j)`, `r_ij^shr = (1 - lambda_cor) * r_ij`
//!   off the diagonal and `1` on it;
//! * `v_i = lambda_var * median(w) + (1 - lambda_var) * w_i`;
//! * `lambda_cor = min(1, sum_{i!=j} var(r_ij) / sum_{i!=j} r_ij^2)`;
//! * `lambda_var = min(1, sum_i var(w_i) / sum_i (w_i - median)^2)`.
//!
//! With standardized residuals `x_ki` and `w_kij = x_ki * x_kj`, the sampling
//! variance is `var(r_ij) = n / (n - 1)^3 * sum_k (w_kij - mean_k w_kij)^2`.
//! `var(w_i)` uses the same form on squared centered residuals.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::forecasting::FittedForecaster;
use crate::ingestion::Panel;
use crate::linalg::{asymmetry, cholesky};

/// `h`-step in-sample forecast errors `e_{t,h} = z_t - zhat_{t|t-h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    residuals: DMatrix<f64>,
    horizon: usize,
    start: usize,
}

impl ResidualMatrix {
    /// `start` is the (0-based) training row of the first residual's target.
    pub fn new(residuals: DMatrix<f64>, horizon: usize, start: usize) -> Result<Self> {
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(FlapError::InvalidData("residuals contain non-finite entries".into()));
        }
        Ok(Self {
            residuals,
            horizon,
            start,
        })
    }

    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Training row index of the first residual's target.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Effective sample count.
    pub fn n(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.residuals.ncols()
    }

    /// Drops leading rows so the first target row is `start`.
    pub fn trim_to(&self, start: usize) -> Result<Self> {
        if start < self.start {
            return Err(FlapError::Dimension(format!(
                "cannot trim residuals starting at row {} back to {start}",
                self.start
            )));
        }
        let skip = start - self.start;
        if skip > self.n() {
            return Err(FlapError::InsufficientData("no residual rows left after alignment".into()));
        }
        Ok(Self {
            residuals: self.residuals.rows(skip, self.n() - skip).into_owned(),
            horizon: self.horizon,
            start,
        })
    }

    /// Aligns both matrices to the later start and places them side by side.
    pub fn hstack(&self, other: &ResidualMatrix) -> Result<Self> {
        if self.horizon != other.horizon {
            return Err(FlapError::Dimension("residual horizons differ".into()));
        }
        let start = self.start.max(other.start);
        let a = self.trim_to(start)?;
        let b = other.trim_to(start)?;
        let n = a.n().min(b.n());
        let (ka, kb) = (a.n_series(), b.n_series());
        let mut out = DMatrix::zeros(n, ka + kb);
        out.columns_mut(0, ka).copy_from(&a.residuals.rows(0, n));
        out.columns_mut(ka, kb).copy_from(&b.residuals.rows(0, n));
        Ok(Self {
            residuals: out,
            horizon: self.horizon,
            start,
        })
    }

    pub(crate) fn map_values(&self, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            residuals: f(&self.residuals),
            horizon: self.horizon,
            start: self.start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceKind {
    Empirical,
    Shrunk,
    Identity,
    Known,
    ProportionalToH1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda_cor: f64,
    pub lambda_var: f64,
}

/// A base forecast error covariance matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    w: DMatrix<f64>,
    kind: CovarianceKind,
    horizon: usize,
    lambdas: Option<Lambdas>,
    warnings: Vec<String>,
}

impl CovarianceEstimate {
    /// A covariance supplied by the caller (e.g. a population value).
    pub fn known(w: DMatrix<f64>, horizon: usize) -> Result<Self> {
        if !w.is_square() {
            return Err(FlapError::Dimension(format!(
                "covariance must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(FlapError::InvalidData("covariance has non-finite entries".into()));
        }
        Ok(Self {
            w,
            kind: CovarianceKind::Known,
            horizon,
            lambdas: None,
            warnings: Vec::new(),
        })
    }

    pub fn identity(n: usize, horizon: usize) -> Self {
        Self {
            w: DMatrix::identity(n, n),
            kind: CovarianceKind::Identity,
            horizon,
            lambdas: None,
            warnings: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambdas(&self) -> Option<Lambdas> {
        self.lambdas
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// The same estimate with every entry multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            w: &self.w * alpha,
            ..self.clone()
        }
    }

    /// Leading `n x n` principal submatrix.
    pub fn leading(&self, n: usize) -> Self {
        Self {
            w: self.w.view((0, 0), (n, n)).into_owned(),
            lambdas: None,
            ..self.clone()
        }
    }

    /// Writes the matrix as headerless CSV plus the JSON sidecar.
    pub fn write<W1: Write, W2: Write>(&self, csv_out: W1, json_out: W2) -> Result<()> {
        write_matrix_csv(&self.w, csv_out)?;
        let sidecar = serde_json::json!({
            "kind": self.kind,
            "horizon": self.horizon,
            "lambda_cor": self.lambdas.map(|l| l.lambda_cor),
            "lambda_var": self.lambdas.map(|l| l.lambda_var),
        });
        serde_json::to_writer_pretty(json_out, &sidecar)?;
        Ok(())
    }
}

pub(crate) fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a headerless numeric CSV matrix.
pub fn read_matrix_csv<R: std::io::Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(FlapError::InvalidData("ragged matrix CSV".into()));
        }
        for field in record.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| {
                FlapError::InvalidData(format!("matrix entry `{field}`: {e}"))
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovarianceOptions {
    /// Subtract column means from the residuals before estimation.
    pub center: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self { center: true }
    }
}

fn centered(r: &ResidualMatrix, opts: CovarianceOptions) -> DMatrix<f64> {
    let mut x = r.residuals.clone();
    if opts.center {
        let n = x.nrows() as f64;
        for mut col in x.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
    }
    x
}

pub fn empirical_cov(r: &ResidualMatrix) -> Result<CovarianceEstimate> {
    empirical_cov_with(r, CovarianceOptions::default())
}

/// Sample covariance with divisor `n - 1`; may be singular.
pub fn empirical_cov_with(r: &ResidualMatrix, opts: CovarianceOptions) -> Result<CovarianceEstimate> {
    let n = r.n();
    if n < 2 {
        return Err(FlapError::InsufficientData(format!(
            "empirical covariance needs at least 2 residual rows, got {n}"
        )));
    }
    let x = centered(r, opts);
    let mut w = x.transpose() * &x / (n as f64 - 1.0);
    w = (&w + w.transpose()) * 0.5;
    Ok(CovarianceEstimate {
        w,
        kind: CovarianceKind::Empirical,
        horizon: r.horizon,
        lambdas: None,
        warnings: Vec::new(),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn shrink_cov(r: &ResidualMatrix) -> Result<CovarianceEstimate> {
    shrink_cov_with(r, CovarianceOptions::default())
}

/// Correlation and variance shrinkage estimator; positive definite for any
/// `n >= 3` with non-degenerate residuals.
pub fn shrink_cov_with(r: &ResidualMatrix, opts: CovarianceOptions) -> Result<CovarianceEstimate> {
    let (n, k) = r.residuals.shape();
    if n < 3 {
        return Err(FlapError::InsufficientData(format!(
            "shrinkage covariance needs at least 3 residual rows, got {n}"
        )));
    }
    let nf = n as f64;
    let xc = centered(r, opts);
    let variances: Vec<f64> = xc
        .column_iter()
        .map(|c| c.norm_squared() / (nf - 1.0))
        .collect();
    if variances.iter().all(|&v| v == 0.0) {
        return Err(FlapError::DegenerateResiduals);
    }
    let mut warnings = Vec::new();

    // Standardized residuals; constant columns contribute zero correlation.
    let mut xs = xc.clone();
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        let sd = variances[j].sqrt();
        if sd > 0.0 {
            col /= sd;
        } else {
            col.fill(0.0);
        }
    }
    let corr = xs.transpose() * &xs / (nf - 1.0);
    let scale = nf / (nf - 1.0).powi(3);

    // Sum_t (x_ti x_tj - mean_ij)^2 = Sum_t x_ti^2 x_tj^2 - n mean_ij^2
    let sq = xs.map(|v| v * v);
    let fourth = sq.transpose() * &sq;
    let mut var_r_sum = 0.0;
    let mut r2_sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let mean = corr[(i, j)] * (nf - 1.0) / nf;
            let ss = (fourth[(i, j)] - nf * mean * mean).max(0.0);
            var_r_sum += 2.0 * scale * ss;
            r2_sum += 2.0 * corr[(i, j)] * corr[(i, j)];
        }
    }
    let lambda_cor = if r2_sum > 0.0 {
        (var_r_sum / r2_sum).clamp(0.0, 1.0)
    } else {
        if k > 1 {
            warnings.push("correlation shrinkage denominator is zero; lambda_cor set to 1".into());
        }
        1.0
    };

    let target = median(&variances);
    let mut var_w_sum = 0.0;
    let mut dev_sum = 0.0;
    for (j, col) in xc.column_iter().enumerate() {
        let mean = col.norm_squared() / nf;
        let ss: f64 = col.iter().map(|v| (v * v - mean).powi(2)).sum();
        var_w_sum += scale * ss;
        dev_sum += (variances[j] - target).powi(2);
    }
    let lambda_var = if dev_sum > 0.0 {
        (var_w_sum / dev_sum).clamp(0.0, 1.0)
    } else {
        warnings.push("variance shrinkage denominator is zero; lambda_var set to 1".into());
        1.0
    };
    for msg in &warnings {
        log::warn!("{msg}");
    }

    let shrunk_var: Vec<f64> = variances
        .iter()
        .map(|&v| lambda_var * target + (1.0 - lambda_var) * v)
        .collect();
    let sd: Vec<f64> = shrunk_var.iter().map(|v| v.sqrt()).collect();
    let w = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            shrunk_var[i]
        } else {
            (1.0 - lambda_cor) * corr[(i, j)] * sd[i] * sd[j]
        }
    });
    debug_assert!(asymmetry(&w) <= 1e-12 * w.amax().max(1.0));
    let w = (&w + w.transpose()) * 0.5;
    if cholesky(&w).is_none() {
        return Err(FlapError::CovarianceNotPd(
            "shrunk covariance failed Cholesky (too many zero-variance residual columns)".into(),
        ));
    }
    Ok(CovarianceEstimate {
        w,
        kind: CovarianceKind::Shrunk,
        horizon: r.horizon,
        lambdas: Some(Lambdas {
            lambda_cor,
            lambda_var,
        }),
        warnings,
    })
}

/// `h`-step in-sample residuals of a fitted model on `panel`.
pub fn hstep_residuals(model: &FittedForecaster, panel: &Panel, h: usize) -> Result<ResidualMatrix> {
    model.hstep_residuals(panel.values(), h)
}

/// Reuses the one-step estimate for horizon `h` under `W_h = eta_h * W_1`.
/// The factor `eta_h` cancels in the projection, so the matrix is unchanged.
pub fn proportional_w(base: &CovarianceEstimate, h: usize) -> Result<CovarianceEstimate> {
    if base.horizon != 1 {
        return Err(FlapError::Config(format!(
            "proportional covariance needs a one-step base, got horizon {}",
            base.horizon
        )));
    }
    if h == 1 {
        return Ok(base.clone());
    }
    Ok(CovarianceEstimate {
        kind: CovarianceKind::ProportionalToH1,
        horizon: h,
        ..base.clone()
    })
}
