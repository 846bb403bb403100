//! Base forecasters for the augmented panel `[y, c]`.
//!
//! Mean, naive, seasonal naive and AR models are univariate; VAR is joint
//! over all series; the dynamic factor model (DFM) fits a direct regression
//! per target and horizon on lagged principal-component factors and lagged
//! target values, with `(k, n, s)` picked by BIC.
//!
//! Residual convention: a model with warm-up `w` needs `w` observations
//! before its first forecast origin. The `h`-step in-sample residuals then
//! target rows `t = w + h - 1 ..= T - 1` (0-based), so there are
//! `T - w - h + 1` of them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{form_components, pca_weights, Transform, WeightMatrix};
use crate::covariance::ResidualMatrix;
use crate::error::{FlapError, Result};
use crate::ingestion::Panel;
use crate::linalg::{cholesky, least_squares, spectral_radius};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoCriterion {
    #[default]
    Aicc,
    Aic,
    Bic,
}

impl InfoCriterion {
    /// `n ln(rss / n)` plus the penalty for `k` estimated parameters.
    pub fn value(self, rss: f64, n: usize, k: usize) -> f64 {
        let nf = n as f64;
        let kf = k as f64;
        let fit = nf * (rss.max(f64::MIN_POSITIVE) / nf).ln();
        match self {
            InfoCriterion::Aic => fit + 2.0 * kf,
            InfoCriterion::Aicc => {
                if n <= k + 1 {
                    f64::INFINITY
                } else {
                    fit + 2.0 * kf + 2.0 * kf * (kf + 1.0) / (nf - kf - 1.0)
                }
            }
            InfoCriterion::Bic => fit + kf * nf.ln(),
        }
    }
}

/// Meta-parameter grid for the DFM: `k` factors, `n` factor lags, `s`
/// target lags. `k = 0` yields a direct autoregression on the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfmGrid {
    pub k_min: usize,
    pub k_max: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub s_min: usize,
    pub s_max: usize,
}

impl Default for DfmGrid {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 6,
            n_min: 1,
            n_max: 3,
            s_min: 1,
            s_max: 3,
        }
    }
}

impl DfmGrid {
    /// All `(k, n, s)` combinations; with `k = 0` the factor lag count is
    /// irrelevant and reported as 0.
    pub fn points(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for k in self.k_min..=self.k_max {
            let n_range: Vec<usize> = if k == 0 {
                vec![0]
            } else {
                (self.n_min.max(1)..=self.n_max).collect()
            };
            for &n in &n_range {
                for s in self.s_min..=self.s_max {
                    if k == 0 && s == 0 {
                        continue;
                    }
                    out.push((k, n, s));
                }
            }
        }
        out
    }

    /// Observations needed before the first origin.
    pub fn warmup(&self) -> usize {
        self.n_max.max(self.s_max).max(1)
    }
}

/// What to fit for a set of series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ForecasterSpec {
    Mean,
    Naive,
    SeasonalNaive {
        period: usize,
    },
    /// AR with order chosen by an information criterion over `0..=max_order`.
    Ar {
        max_order: usize,
        #[serde(default = "default_true")]
        intercept: bool,
        #[serde(default)]
        ic: InfoCriterion,
    },
    Var {
        order: usize,
        #[serde(default = "default_true")]
        intercept: bool,
    },
    Dfm {
        #[serde(default)]
        grid: DfmGrid,
    },
}

fn default_true() -> bool {
    true
}

impl ForecasterSpec {
    pub fn ar(max_order: usize) -> Self {
        ForecasterSpec::Ar {
            max_order,
            intercept: true,
            ic: InfoCriterion::Aicc,
        }
    }

    pub fn is_univariate(&self) -> bool {
        !matches!(self, ForecasterSpec::Var { .. } | ForecasterSpec::Dfm { .. })
    }

    /// Model name used in method labels.
    pub fn label(&self) -> &'static str {
        match self {
            ForecasterSpec::Mean => "Mean",
            ForecasterSpec::Naive => "Naive",
            ForecasterSpec::SeasonalNaive { .. } => "SNaive",
            ForecasterSpec::Ar { .. } => "AR",
            ForecasterSpec::Var { .. } => "VAR",
            ForecasterSpec::Dfm { .. } => "DFM",
        }
    }

    /// Observations required before the first forecast origin.
    pub fn warmup(&self) -> usize {
        match self {
            ForecasterSpec::Mean | ForecasterSpec::Naive => 1,
            ForecasterSpec::SeasonalNaive { period } => (*period).max(1),
            ForecasterSpec::Ar { max_order, .. } => (*max_order).max(1),
            ForecasterSpec::Var { order, .. } => (*order).max(1),
            ForecasterSpec::Dfm { grid } => grid.warmup(),
        }
    }
}

/// The fitted model structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Family {
    Mean,
    Naive,
    SeasonalNaive { period: usize },
    Ar { order: usize, intercept: bool },
    Var { order: usize, intercept: bool },
    Dfm { target: usize, horizon: usize, k: usize, n: usize, s: usize },
}

/// One evaluated candidate during model selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// AR: `[order]`; DFM: `[k, n, s]`.
    pub params: Vec<usize>,
    pub rss: f64,
    pub n_obs: usize,
    pub n_params: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SelectionInfo {
    pub criterion: Option<InfoCriterion>,
    pub candidates: Vec<Candidate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct DfmModel {
    target: usize,
    horizon: usize,
    k: usize,
    n: usize,
    s: usize,
    transform: Transform,
    /// `k x m` factor loadings.
    loadings: DMatrix<f64>,
    beta: DVector<f64>,
}

impl DfmModel {
    fn regressors(&self, factors: &DMatrix<f64>, data: &DMatrix<f64>, origin: usize) -> DVector<f64> {
        dfm_row(factors, data.column(self.target).as_slice(), origin, self.k, self.n, self.s)
    }

    fn factors(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        self.transform.apply(data) * self.loadings.transpose()
    }
}

fn dfm_row(factors: &DMatrix<f64>, target: &[f64], origin: usize, k: usize, n: usize, s: usize) -> DVector<f64> {
    let mut row = DVector::zeros(1 + k * n + s);
    row[0] = 1.0;
    let mut idx = 1;
    for j in 0..n {
        for f in 0..k {
            row[idx] = factors[(origin - j, f)];
            idx += 1;
        }
    }
    for j in 0..s {
        row[idx] = target[origin - j];
        idx += 1;
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Mean(DVector<f64>),
    Naive,
    SeasonalNaive(usize),
    Ar { intercept: f64, coefs: Vec<f64> },
    Var { intercept: DVector<f64>, coefs: Vec<DMatrix<f64>> },
    Dfm(Box<DfmModel>),
}

/// A fitted base forecaster together with its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedForecaster {
    family: Family,
    model: Model,
    warmup: usize,
    selection: SelectionInfo,
    spectral_radius: Option<f64>,
    history: DMatrix<f64>,
}

/// Point forecasts for horizons `1..=H` from one origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastMatrix {
    /// Row `h - 1` holds the `h`-step-ahead forecasts.
    pub values: DMatrix<f64>,
    /// Number of training observations (the origin `T`).
    pub origin: usize,
}

impl ForecastMatrix {
    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, h: usize) -> DVector<f64> {
        self.values.row(h - 1).transpose()
    }
}

impl FittedForecaster {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn training_length(&self) -> usize {
        self.history.nrows()
    }

    pub fn series_count(&self) -> usize {
        self.history.ncols()
    }

    pub fn selection_info(&self) -> &SelectionInfo {
        &self.selection
    }

    /// Companion-matrix spectral radius for AR/VAR fits.
    pub fn spectral_radius(&self) -> Option<f64> {
        self.spectral_radius
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    /// `(intercept, [phi_1, ..., phi_p])` for AR fits.
    pub fn ar_coefficients(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            Model::Ar { intercept, coefs } => Some((*intercept, coefs)),
            _ => None,
        }
    }

    /// `(intercept, [A_1, ..., A_p])` for VAR fits.
    pub fn var_coefficients(&self) -> Option<(&DVector<f64>, &[DMatrix<f64>])> {
        match &self.model {
            Model::Var { intercept, coefs } => Some((intercept, coefs)),
            _ => None,
        }
    }

    /// Forecasts for horizons `1..=horizon` from the end of the training data.
    ///
    /// DFM fits are horizon-specific: only their own horizon is available,
    /// returned in the last row with earlier rows left as `NaN`-free copies
    /// of it is not meaningful, so DFM requires `horizon` to equal the
    /// fitted horizon and returns a single row.
    pub fn forecast(&self, horizon: usize) -> Result<ForecastMatrix> {
        if horizon == 0 {
            return Err(FlapError::Config("forecast horizon must be at least 1".into()));
        }
        let t = self.training_length();
        let values = match &self.model {
            Model::Dfm(d) => {
                if horizon != d.horizon {
                    return Err(FlapError::Config(format!(
                        "DFM fitted for horizon {} cannot forecast horizon {horizon}",
                        d.horizon
                    )));
                }
                let factors = d.factors(&self.history);
                let x = d.regressors(&factors, &self.history, t - 1);
                DMatrix::from_element(1, 1, x.dot(&d.beta))
            }
            _ => self.predict_path(&self.history, t, horizon),
        };
        Ok(ForecastMatrix { values, origin: t })
    }

    /// Iterated forecasts for `1..=horizon` using rows `0..origin_len` of `data`.
    fn predict_path(&self, data: &DMatrix<f64>, origin_len: usize, horizon: usize) -> DMatrix<f64> {
        let k = data.ncols();
        let mut out = DMatrix::zeros(horizon, k);
        match &self.model {
            Model::Mean(mean) => {
                for h in 0..horizon {
                    out.set_row(h, &mean.transpose());
                }
            }
            Model::Naive => {
                let last = data.row(origin_len - 1);
                for h in 0..horizon {
                    out.set_row(h, &last);
                }
            }
            Model::SeasonalNaive(period) => {
                for h in 1..=horizon {
                    let back = period * h.div_ceil(*period);
                    out.set_row(h - 1, &data.row(origin_len + h - 1 - back));
                }
            }
            Model::Ar { intercept, coefs } => {
                let p = coefs.len();
                let mut buf: Vec<f64> = data.column(0).as_slice()[origin_len.saturating_sub(p)..origin_len].to_vec();
                for h in 0..horizon {
                    let len = buf.len();
                    let mut v = *intercept;
                    for (j, phi) in coefs.iter().enumerate() {
                        v += phi * buf[len - 1 - j];
                    }
                    buf.push(v);
                    out[(h, 0)] = v;
                }
            }
            Model::Var { intercept, coefs } => {
                let p = coefs.len();
                let mut buf: Vec<DVector<f64>> = (origin_len.saturating_sub(p)..origin_len)
                    .map(|i| data.row(i).transpose())
                    .collect();
                for h in 0..horizon {
                    let len = buf.len();
                    let mut v = intercept.clone();
                    for (j, a) in coefs.iter().enumerate() {
                        v += a * &buf[len - 1 - j];
                    }
                    out.set_row(h, &v.transpose());
                    buf.push(v);
                }
            }
            Model::Dfm(_) => unreachable!("DFM forecasts are direct"),
        }
        out
    }

    /// `h`-step in-sample residuals on `data` (`T x series`), holding the
    /// fitted coefficients fixed.
    pub fn hstep_residuals(&self, data: &DMatrix<f64>, h: usize) -> Result<ResidualMatrix> {
        Ok(self.residuals_up_to(data, h)?.pop().expect("at least one horizon"))
    }

    /// Residual matrices for every horizon `1..=horizon`.
    pub fn residuals_up_to(&self, data: &DMatrix<f64>, horizon: usize) -> Result<Vec<ResidualMatrix>> {
        if horizon == 0 {
            return Err(FlapError::Config("residual horizon must be at least 1".into()));
        }
        if data.ncols() != self.series_count() {
            return Err(FlapError::Dimension(format!(
                "model fitted on {} series, data has {}",
                self.series_count(),
                data.ncols()
            )));
        }
        let t = data.nrows();
        let w = self.warmup;
        if t < w + horizon {
            return Err(FlapError::InsufficientData(format!(
                "{t} observations cannot give {horizon}-step residuals after a warm-up of {w}"
            )));
        }
        if let Model::Dfm(d) = &self.model {
            if horizon != d.horizon {
                return Err(FlapError::Config(format!(
                    "DFM fitted for horizon {} cannot produce horizon-{horizon} residuals",
                    d.horizon
                )));
            }
            let factors = d.factors(data);
            let n = t - w - horizon + 1;
            let target = data.column(d.target);
            let resid = DMatrix::from_fn(n, 1, |i, _| {
                let origin = w - 1 + i;
                target[origin + horizon] - d.regressors(&factors, data, origin).dot(&d.beta)
            });
            let mut out = Vec::with_capacity(horizon);
            for _ in 1..horizon {
                out.push(ResidualMatrix::new(DMatrix::zeros(0, 1), 0, 0)?);
            }
            out.push(ResidualMatrix::new(resid, horizon, w + horizon - 1)?);
            return Ok(out);
        }
        let k = data.ncols();
        let mut mats: Vec<DMatrix<f64>> = (1..=horizon)
            .map(|h| DMatrix::zeros(t - w - h + 1, k))
            .collect();
        for origin_len in w..t {
            let steps = horizon.min(t - origin_len);
            let path = self.predict_path(data, origin_len, steps);
            for h in 1..=steps {
                let target = origin_len + h - 1;
                let row = origin_len - w;
                for j in 0..k {
                    mats[h - 1][(row, j)] = data[(target, j)] - path[(h - 1, j)];
                }
            }
        }
        mats.into_iter()
            .enumerate()
            .map(|(i, m)| ResidualMatrix::new(m, i + 1, w + i))
            .collect()
    }
}

/// Fits a univariate model to one series.
pub fn fit_univariate(series: &DVector<f64>, spec: &ForecasterSpec) -> Result<FittedForecaster> {
    let t = series.len();
    let history = DMatrix::from_column_slice(t, 1, series.as_slice());
    if t == 0 {
        return Err(FlapError::InsufficientData("empty series".into()));
    }
    let warmup = spec.warmup();
    let plain = |family, model| FittedForecaster {
        family,
        model,
        warmup,
        selection: SelectionInfo::default(),
        spectral_radius: None,
        history: history.clone(),
    };
    match *spec {
        ForecasterSpec::Mean => {
            let mean = series.sum() / t as f64;
            Ok(plain(Family::Mean, Model::Mean(DVector::from_element(1, mean))))
        }
        ForecasterSpec::Naive => Ok(plain(Family::Naive, Model::Naive)),
        ForecasterSpec::SeasonalNaive { period } => {
            if period == 0 || t < period {
                return Err(FlapError::InsufficientData(format!(
                    "seasonal naive with period {period} needs at least {period} observations"
                )));
            }
            Ok(plain(Family::SeasonalNaive { period }, Model::SeasonalNaive(period)))
        }
        ForecasterSpec::Ar {
            max_order,
            intercept,
            ic,
        } => fit_ar(series, max_order, intercept, ic),
        ForecasterSpec::Var { .. } | ForecasterSpec::Dfm { .. } => Err(FlapError::Config(format!(
            "{} is not a univariate forecaster",
            spec.label()
        ))),
    }
}

fn ar_design(y: &[f64], start: usize, order: usize, intercept: bool) -> DMatrix<f64> {
    let n = y.len() - start;
    let cols = order + usize::from(intercept);
    DMatrix::from_fn(n, cols, |i, j| {
        let t = start + i;
        if intercept && j == 0 {
            1.0
        } else {
            let lag = j + 1 - usize::from(intercept);
            y[t - lag]
        }
    })
}

fn companion(coefs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = coefs.len();
    if p == 0 {
        return DMatrix::zeros(0, 0);
    }
    let m = coefs[0].nrows();
    let mut f = DMatrix::zeros(m * p, m * p);
    for (j, a) in coefs.iter().enumerate() {
        f.view_mut((0, j * m), (m, m)).copy_from(a);
    }
    if p > 1 {
        f.view_mut((m, 0), (m * (p - 1), m * (p - 1))).fill_with_identity();
    }
    f
}

/// Companion-matrix spectral radius of `y_t = sum_j A_j y_{t-j}`.
pub fn companion_radius(coefs: &[DMatrix<f64>]) -> f64 {
    spectral_radius(&companion(coefs))
}

/// AR(`order`) by least squares with the order chosen by `ic` over
/// `0..=max_order`. All candidates share the estimation sample
/// `t = max_order..T`.
pub fn fit_ar(series: &DVector<f64>, max_order: usize, intercept: bool, ic: InfoCriterion) -> Result<FittedForecaster> {
    let t = series.len();
    if t < max_order + 10 {
        return Err(FlapError::InsufficientData(format!(
            "AR with max order {max_order} needs at least {} observations, got {t}",
            max_order + 10
        )));
    }
    let y = series.as_slice();
    let start = max_order;
    let n = t - start;
    let target = DMatrix::from_column_slice(n, 1, &y[start..]);
    let mut selection = SelectionInfo {
        criterion: Some(ic),
        ..SelectionInfo::default()
    };
    let mut best: Option<(f64, usize, DMatrix<f64>)> = None;
    for order in 0..=max_order {
        let x = ar_design(y, start, order, intercept);
        let Some(beta) = least_squares(&x, &target) else {
            let msg = format!("AR({order}) lag matrix is collinear; order skipped");
            log::warn!("{msg}");
            selection.warnings.push(msg);
            continue;
        };
        let rss = (&target - &x * &beta).norm_squared();
        let n_params = x.ncols() + 1;
        let value = ic.value(rss, n, n_params);
        selection.candidates.push(Candidate {
            params: vec![order],
            rss,
            n_obs: n,
            n_params,
            value,
        });
        if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
            best = Some((value, order, beta));
        }
    }
    let (_, order, beta) = best.ok_or_else(|| FlapError::Numerical("no AR order could be fitted".into()))?;
    let (c, coefs) = if intercept {
        (beta[0], beta.as_slice()[1..].to_vec())
    } else {
        (0.0, beta.as_slice().to_vec())
    };
    let radius = companion_radius(
        &coefs
            .iter()
            .map(|&v| DMatrix::from_element(1, 1, v))
            .collect::<Vec<_>>(),
    );
    Ok(FittedForecaster {
        family: Family::Ar { order, intercept },
        model: Model::Ar { intercept: c, coefs },
        warmup: max_order.max(1),
        selection,
        spectral_radius: Some(radius),
        history: DMatrix::from_column_slice(t, 1, y),
    })
}

/// VAR(`order`) by equation-wise least squares. A singular regressor
/// cross-product falls back to a ridge of `1e-8 * trace`.
pub fn fit_var(panel: &DMatrix<f64>, order: usize, intercept: bool) -> Result<FittedForecaster> {
    let (t, m) = panel.shape();
    if t < m * order + 10 {
        return Err(FlapError::InsufficientData(format!(
            "VAR({order}) on {m} series needs at least {} observations, got {t}",
            m * order + 10
        )));
    }
    let ic = usize::from(intercept);
    let cols = ic + m * order;
    let n = t - order;
    let x = DMatrix::from_fn(n, cols, |i, j| {
        let row = order + i;
        if intercept && j == 0 {
            1.0
        } else {
            let jj = j - ic;
            let (lag, series) = (jj / m + 1, jj % m);
            panel[(row - lag, series)]
        }
    });
    let y = panel.rows(order, n).into_owned();
    let mut selection = SelectionInfo::default();
    let beta = if cols == 0 {
        DMatrix::zeros(0, m)
    } else {
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let usable = cholesky(&xtx).filter(|ch| {
            let d = ch.l_dirty().diagonal();
            let (lo, hi) = (d.min(), d.max());
            hi > 0.0 && (lo / hi).powi(2) > 1e-14
        });
        match usable {
            Some(ch) => ch.solve(&xty),
            None => {
                let ridge = 1e-8 * xtx.trace().max(f64::MIN_POSITIVE);
                let msg = format!("VAR regressor cross-product is singular; ridge {ridge:e} applied");
                log::warn!("{msg}");
                selection.warnings.push(msg);
                let mut reg = xtx.clone();
                for i in 0..cols {
                    reg[(i, i)] += ridge;
                }
                cholesky(&reg)
                    .ok_or_else(|| FlapError::Numerical("VAR normal equations are not solvable".into()))?
                    .solve(&xty)
            }
        }
    };
    let intercept_vec = if intercept {
        beta.row(0).transpose()
    } else {
        DVector::zeros(m)
    };
    let coefs: Vec<DMatrix<f64>> = (0..order)
        .map(|j| beta.rows(ic + j * m, m).transpose())
        .collect();
    let radius = companion_radius(&coefs);
    if radius >= 1.0 {
        selection
            .warnings
            .push(format!("fitted VAR is not stable (spectral radius {radius:.4})"));
    }
    Ok(FittedForecaster {
        family: Family::Var { order, intercept },
        model: Model::Var {
            intercept: intercept_vec,
            coefs,
        },
        warmup: order.max(1),
        selection,
        spectral_radius: Some(radius),
        history: panel.clone(),
    })
}

/// Factors for a DFM: loadings and transform from PCA on the standardized panel.
fn dfm_factors(panel: &Panel, k_max: usize) -> Result<(Transform, DMatrix<f64>, DMatrix<f64>)> {
    let k = k_max.min(panel.n_series());
    let w = pca_weights(panel, k, true)?;
    let transform = w.transform().cloned().expect("PCA weights carry a transform");
    let loadings = w.weights().clone();
    let factors = transform.apply(panel.values()) * loadings.transpose();
    Ok((transform, loadings, factors))
}

/// Direct `h`-step DFM for series `target`, meta-parameters chosen by BIC.
pub fn fit_dfm(panel: &Panel, target: usize, h: usize, grid: &DfmGrid) -> Result<FittedForecaster> {
    let (transform, loadings, factors) = dfm_factors(panel, grid.k_max)?;
    fit_dfm_with_factors(panel, target, h, grid, &transform, &loadings, &factors)
}

fn fit_dfm_with_factors(
    panel: &Panel,
    target: usize,
    h: usize,
    grid: &DfmGrid,
    transform: &Transform,
    loadings: &DMatrix<f64>,
    factors: &DMatrix<f64>,
) -> Result<FittedForecaster> {
    let (t, m) = (panel.n_obs(), panel.n_series());
    if t < 30 {
        return Err(FlapError::InsufficientData(format!("DFM needs T >= 30, got {t}")));
    }
    if target >= m {
        return Err(FlapError::Dimension(format!("target {target} out of range for {m} series")));
    }
    if h == 0 {
        return Err(FlapError::Config("DFM horizon must be at least 1".into()));
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(FlapError::Config("DFM grid is empty".into()));
    }
    let warmup = grid.warmup();
    if t < warmup + h + 1 {
        return Err(FlapError::InsufficientData("too few observations for the DFM grid".into()));
    }
    let mut selection = SelectionInfo {
        criterion: Some(InfoCriterion::Bic),
        ..SelectionInfo::default()
    };
    let y = panel.column(target);
    let n_obs = t - warmup - h + 1;
    let response = DMatrix::from_fn(n_obs, 1, |i, _| y[warmup - 1 + i + h]);
    let mut best: Option<(f64, (usize, usize, usize), DVector<f64>)> = None;
    for (k, n, s) in points {
        if k > loadings.nrows() {
            let msg = format!("grid point k={k} exceeds {} available factors; skipped", loadings.nrows());
            selection.warnings.push(msg);
            continue;
        }
        let n_params = 1 + k * n + s;
        if n_obs <= n_params + 1 {
            continue;
        }
        let mut x = DMatrix::zeros(n_obs, n_params);
        for i in 0..n_obs {
            x.set_row(i, &dfm_row(factors, y.as_slice(), warmup - 1 + i, k, n, s).transpose());
        }
        let Some(beta) = least_squares(&x, &response) else {
            let msg = format!("DFM regression k={k}, n={n}, s={s} is rank deficient; skipped");
            log::warn!("{msg}");
            selection.warnings.push(msg);
            continue;
        };
        let rss = (&response - &x * &beta).norm_squared();
        let value = InfoCriterion::Bic.value(rss, n_obs, n_params);
        selection.candidates.push(Candidate {
            params: vec![k, n, s],
            rss,
            n_obs,
            n_params,
            value,
        });
        if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
            best = Some((value, (k, n, s), beta.column(0).into_owned()));
        }
    }
    let (_, (k, n, s), beta) =
        best.ok_or_else(|| FlapError::Numerical("no DFM grid point could be fitted".into()))?;
    Ok(FittedForecaster {
        family: Family::Dfm { target, horizon: h, k, n, s },
        model: Model::Dfm(Box::new(DfmModel {
            target,
            horizon: h,
            k,
            n,
            s,
            transform: transform.clone(),
            loadings: loadings.rows(0, k).into_owned(),
            beta,
        })),
        warmup,
        selection,
        spectral_radius: None,
        history: panel.values().clone(),
    })
}

/// Base forecasts and in-sample residuals for every series of a panel.
#[derive(Debug, Clone)]
pub struct BaseForecast {
    pub forecasts: ForecastMatrix,
    /// One residual matrix per horizon `1..=H`.
    pub residuals: Vec<ResidualMatrix>,
    pub models: Vec<FittedForecaster>,
}

/// Fits `spec` to `panel` and forecasts horizons `1..=horizon`.
pub fn forecast_panel(panel: &Panel, spec: &ForecasterSpec, horizon: usize) -> Result<BaseForecast> {
    if horizon == 0 {
        return Err(FlapError::Config("forecast horizon must be at least 1".into()));
    }
    let data = panel.values();
    let (t, k) = data.shape();
    match spec {
        ForecasterSpec::Var { order, intercept } => {
            let model = fit_var(data, *order, *intercept)?;
            let forecasts = model.forecast(horizon)?;
            let residuals = model.residuals_up_to(data, horizon)?;
            Ok(BaseForecast {
                forecasts,
                residuals,
                models: vec![model],
            })
        }
        ForecasterSpec::Dfm { grid } => {
            let (transform, loadings, factors) = dfm_factors(panel, grid.k_max)?;
            let fits: Vec<Vec<FittedForecaster>> = (0..k)
                .into_par_iter()
                .map(|target| {
                    (1..=horizon)
                        .map(|h| fit_dfm_with_factors(panel, target, h, grid, &transform, &loadings, &factors))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let mut values = DMatrix::zeros(horizon, k);
            let mut residuals = Vec::with_capacity(horizon);
            for h in 1..=horizon {
                let start = grid.warmup() + h - 1;
                let mut mat = DMatrix::zeros(t - start, k);
                for (target, models) in fits.iter().enumerate() {
                    let model = &models[h - 1];
                    values[(h - 1, target)] = model.forecast(h)?.values[(0, 0)];
                    let r = model.hstep_residuals(data, h)?;
                    mat.set_column(target, &r.residuals().column(0));
                }
                residuals.push(ResidualMatrix::new(mat, h, start)?);
            }
            Ok(BaseForecast {
                forecasts: ForecastMatrix { values, origin: t },
                residuals,
                models: fits.into_iter().flatten().collect(),
            })
        }
        _ => {
            let fits: Vec<(FittedForecaster, ForecastMatrix, Vec<ResidualMatrix>)> = (0..k)
                .into_par_iter()
                .map(|j| {
                    let col = data.column(j).into_owned();
                    let model = fit_univariate(&col, spec)?;
                    let f = model.forecast(horizon)?;
                    let r = model.residuals_up_to(&DMatrix::from_column_slice(t, 1, col.as_slice()), horizon)?;
                    Ok((model, f, r))
                })
                .collect::<Result<Vec<_>>>()?;
            let warmup = spec.warmup();
            if t < warmup + horizon {
                return Err(FlapError::InsufficientData(format!(
                    "{t} observations are too few for horizon {horizon}"
                )));
            }
            let mut values = DMatrix::zeros(horizon, k);
            let mut mats: Vec<DMatrix<f64>> = (1..=horizon)
                .map(|h| DMatrix::zeros(t - warmup - h + 1, k))
                .collect();
            for (j, (_, f, r)) in fits.iter().enumerate() {
                values.set_column(j, &f.values.column(0));
                for (h, res) in r.iter().enumerate() {
                    mats[h].set_column(j, &res.residuals().column(0));
                }
            }
            let residuals = mats
                .into_iter()
                .enumerate()
                .map(|(i, m)| ResidualMatrix::new(m, i + 1, warmup + i))
                .collect::<Result<Vec<_>>>()?;
            Ok(BaseForecast {
                forecasts: ForecastMatrix { values, origin: t },
                residuals,
                models: fits.into_iter().map(|(m, _, _)| m).collect(),
            })
        }
    }
}

/// Base forecasts of the augmented vector `z = [transform(y); c]`.
#[derive(Debug, Clone)]
pub struct AugmentedForecast {
    /// `H x (m + p)`.
    pub zhat: ForecastMatrix,
    /// Per-horizon residuals over the `m + p` augmented series.
    pub residuals: Vec<ResidualMatrix>,
    pub m: usize,
}

impl AugmentedForecast {
    pub fn p(&self) -> usize {
        self.zhat.values.ncols() - self.m
    }

    /// Keeps the original series and the first `p` components.
    pub fn leading(&self, p: usize) -> Result<Self> {
        if p > self.p() {
            return Err(FlapError::Dimension(format!("cannot keep {p} of {} components", self.p())));
        }
        let cols = self.m + p;
        Ok(Self {
            zhat: ForecastMatrix {
                values: self.zhat.values.columns(0, cols).into_owned(),
                origin: self.zhat.origin,
            },
            residuals: self
                .residuals
                .iter()
                .map(|r| r.map_values(|v| v.columns(0, cols).into_owned()))
                .collect(),
            m: self.m,
        })
    }
}

/// Forms components, forecasts all `m + p` series and collects residuals.
/// Components are always forecast with the univariate `component` spec.
pub fn forecast_augmented(
    panel_y: &Panel,
    w: &WeightMatrix,
    original: &ForecasterSpec,
    component: &ForecasterSpec,
    horizon: usize,
) -> Result<AugmentedForecast> {
    let base = forecast_panel(panel_y, original, horizon)?;
    augment_base(&base, panel_y, w, component, horizon)
}

/// As [`forecast_augmented`] but reusing already computed base forecasts of `y`.
pub fn augment_base(
    base: &BaseForecast,
    panel_y: &Panel,
    w: &WeightMatrix,
    component: &ForecasterSpec,
    horizon: usize,
) -> Result<AugmentedForecast> {
    if !component.is_univariate() {
        return Err(FlapError::Config(format!(
            "components must use a univariate forecaster, got {}",
            component.label()
        )));
    }
    let m = panel_y.n_series();
    if base.forecasts.values.ncols() != m || base.residuals.len() < horizon {
        return Err(FlapError::Dimension("base forecasts do not match the panel".into()));
    }
    let zy = w.apply_transform(&base.forecasts.values.rows(0, horizon).into_owned());
    let ry: Vec<ResidualMatrix> = base.residuals[..horizon]
        .iter()
        .map(|r| r.map_values(|v| w.scale_residuals(v)))
        .collect();
    if w.p() == 0 {
        return Ok(AugmentedForecast {
            zhat: ForecastMatrix {
                values: zy,
                origin: base.forecasts.origin,
            },
            residuals: ry,
            m,
        });
    }
    let comps = form_components(panel_y, w)?;
    let cf = forecast_panel(&comps, component, horizon)?;
    let p = w.p();
    let mut values = DMatrix::zeros(horizon, m + p);
    values.columns_mut(0, m).copy_from(&zy);
    values.columns_mut(m, p).copy_from(&cf.forecasts.values);
    let residuals = ry
        .iter()
        .zip(cf.residuals.iter())
        .map(|(a, b)| a.hstack(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedForecast {
        zhat: ForecastMatrix {
            values,
            origin: base.forecasts.origin,
        },
        residuals,
        m,
    })
}
