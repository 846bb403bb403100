//! Expanding-window cross-validation, squared-error scoring and rank tests.
//!
//! Within an origin every method sharing a base forecaster consumes the same
//! base forecasts (checked by hash), and every FLAP variant of one component
//! family is cut from a single weight matrix and set of component forecasts
//! built for the largest requested `p`. Nested sweeps therefore share their
//! leading components exactly.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::components::{
    concat_weights, orthonormal_weights, pca_weights, random_weights, RandomDist, WeightMatrix,
};
use crate::covariance::{proportional_w, shrink_cov, CovarianceEstimate};
use crate::error::{FlapError, Result};
use crate::forecasting::{augment_base, forecast_panel, AugmentedForecast, BaseForecast, ForecasterSpec};
use crate::ingestion::Panel;
use crate::projection::{build_constraint, build_projection};

/// Separator used in method labels (an en dash with spaces).
pub const LABEL_SEP: &str = " \u{2013} ";

/// Share of failed cells above which a method aborts the run.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

/// Expanding-window plan: the first window holds `initial_train`
/// observations, each later one `step` more, and every window is followed
/// by an `horizon`-step test period inside the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub initial_train: usize,
    #[serde(default = "default_step")]
    pub step: usize,
    pub horizon: usize,
}

fn default_step() -> usize {
    1
}

impl CvPlan {
    pub fn new(initial_train: usize, step: usize, horizon: usize) -> Result<Self> {
        if initial_train == 0 || step == 0 || horizon == 0 {
            return Err(FlapError::Config(
                "initial_train, step and horizon must all be positive".into(),
            ));
        }
        Ok(Self {
            initial_train,
            step,
            horizon,
        })
    }

    /// Training lengths of every origin for a sample of `t` observations.
    pub fn origins(&self, t: usize) -> Result<Vec<usize>> {
        if self.initial_train == 0 || self.step == 0 || self.horizon == 0 {
            return Err(FlapError::Config(
                "initial_train, step and horizon must all be positive".into(),
            ));
        }
        if self.initial_train + self.horizon > t {
            return Err(FlapError::Config(format!(
                "initial_train {} + horizon {} exceeds the {t} observations",
                self.initial_train, self.horizon
            )));
        }
        Ok((self.initial_train..=t - self.horizon)
            .step_by(self.step)
            .collect())
    }

    pub fn n_origins(&self, t: usize) -> Result<usize> {
        Ok(self.origins(t)?.len())
    }
}

/// Component weight families, nested in `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentScheme {
    Pca,
    Normal,
    Uniform,
    Orthonormal,
    /// PCA for the first `min(p, m)` components, normal weights after that.
    PcaNormal,
    PcaUniform,
    OrthonormalNormal,
}

impl ComponentScheme {
    pub fn label(self) -> &'static str {
        match self {
            ComponentScheme::Pca => "PCA",
            ComponentScheme::Normal => "Norm",
            ComponentScheme::Uniform => "Unif",
            ComponentScheme::Orthonormal => "Ortho",
            ComponentScheme::PcaNormal => "PCA+Norm",
            ComponentScheme::PcaUniform => "PCA+Unif",
            ComponentScheme::OrthonormalNormal => "Ortho+Norm",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pca" => ComponentScheme::Pca,
            "norm" | "normal" => ComponentScheme::Normal,
            "unif" | "uniform" => ComponentScheme::Uniform,
            "ortho" | "orthonormal" => ComponentScheme::Orthonormal,
            "pca+norm" | "pcanormal" | "pcanorm" => ComponentScheme::PcaNormal,
            "pca+unif" | "pcauniform" | "pcaunif" => ComponentScheme::PcaUniform,
            "ortho+norm" | "orthonormalnormal" | "orthonorm" => ComponentScheme::OrthonormalNormal,
            _ => return Err(FlapError::Config(format!("unknown component scheme `{name}`"))),
        })
    }

    /// Builds `p` weight rows on the training panel.
    pub fn weights(self, panel: &Panel, p: usize, standardize: bool, seed: u64) -> Result<WeightMatrix> {
        let m = panel.n_series();
        if p == 0 {
            return Ok(WeightMatrix::empty(m));
        }
        let split = |head: WeightMatrix, dist: RandomDist| -> Result<WeightMatrix> {
            if p <= m {
                head.truncate(p)
            } else {
                concat_weights(&head, &random_weights(m, p - m, dist, seed)?)
            }
        };
        match self {
            ComponentScheme::Pca => pca_weights(panel, p, standardize),
            ComponentScheme::Normal => random_weights(m, p, RandomDist::Normal, seed),
            ComponentScheme::Uniform => random_weights(m, p, RandomDist::Uniform, seed),
            ComponentScheme::Orthonormal => orthonormal_weights(m, p, seed),
            ComponentScheme::PcaNormal => split(pca_weights(panel, m, standardize)?, RandomDist::Normal),
            ComponentScheme::PcaUniform => split(pca_weights(panel, m, standardize)?, RandomDist::Uniform),
            ComponentScheme::OrthonormalNormal => split(orthonormal_weights(m, m, seed)?, RandomDist::Normal),
        }
    }
}

/// How `W_h` is obtained for the projection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Shrinkage estimate from the `h`-step residuals, for each `h`.
    #[default]
    PerHorizon,
    /// Shrinkage estimate from one-step residuals, used for every `h`.
    Proportional,
    Identity,
    /// Fixed matrices per horizon; the leading `(m+p)` block is used.
    #[serde(skip)]
    Known(Vec<DMatrix<f64>>),
}

impl CovarianceMode {
    fn tag(&self) -> &'static str {
        match self {
            CovarianceMode::PerHorizon => "",
            CovarianceMode::Proportional => " (prop)",
            CovarianceMode::Identity => " (I)",
            CovarianceMode::Known(_) => " (known)",
        }
    }
}

/// FLAP settings of a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub scheme: ComponentScheme,
    pub p: usize,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
    /// Univariate forecaster for the component series.
    pub forecaster: ForecasterSpec,
    #[serde(default)]
    pub covariance: CovarianceMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodKind {
    /// Base forecasts of `y` only.
    Benchmark,
    Flap(ComponentSpec),
    /// Forecasts equal to the realized values.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub base: ForecasterSpec,
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn benchmark(base: ForecasterSpec) -> Self {
        Self {
            base,
            kind: MethodKind::Benchmark,
        }
    }

    pub fn flap(base: ForecasterSpec, components: ComponentSpec) -> Self {
        Self {
            base,
            kind: MethodKind::Flap(components),
        }
    }

    pub fn oracle() -> Self {
        Self {
            base: ForecasterSpec::Naive,
            kind: MethodKind::Oracle,
        }
    }

    /// `Model – Component Weights – Number of Components`, or
    /// `Model – Benchmark`.
    pub fn label(&self) -> String {
        match &self.kind {
            MethodKind::Benchmark => format!("{}{LABEL_SEP}Benchmark", self.base.label()),
            MethodKind::Oracle => "Oracle".to_string(),
            MethodKind::Flap(c) => format!(
                "{}{LABEL_SEP}{}{LABEL_SEP}{}{}",
                self.base.label(),
                c.scheme.label(),
                c.p,
                c.covariance.tag()
            ),
        }
    }

    /// Label without the component count; methods of one family differ only in `p`.
    pub fn family(&self) -> String {
        match &self.kind {
            MethodKind::Flap(c) => format!(
                "{}{LABEL_SEP}{}{}",
                self.base.label(),
                c.scheme.label(),
                c.covariance.tag()
            ),
            _ => self.label(),
        }
    }

    pub fn p(&self) -> Option<usize> {
        match &self.kind {
            MethodKind::Flap(c) => Some(c.p),
            _ => None,
        }
    }
}

/// Description of a scored method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub label: String,
    pub family: String,
    pub model: String,
    pub p: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub origin: usize,
    pub method: String,
    pub cause: String,
}

/// Training window and first scored row of one origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub origin: usize,
    pub train_end: usize,
    pub first_scored: usize,
}

/// Squared errors indexed by method, origin, horizon and series. Failed
/// cells hold `NaN`.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    methods: Vec<MethodInfo>,
    series: Vec<String>,
    origins: Vec<usize>,
    horizon: usize,
    se: Vec<f64>,
    failures: Vec<CellFailure>,
    audit: Vec<AuditEntry>,
    base_hashes: Vec<BTreeMap<String, u64>>,
}

impl ScoreTable {
    fn index(&self, method: usize, origin: usize, h: usize, series: usize) -> usize {
        ((method * self.origins.len() + origin) * self.horizon + (h - 1)) * self.series.len() + series
    }

    pub fn methods(&self) -> &[MethodInfo] {
        &self.methods
    }

    pub fn method_labels(&self) -> Vec<String> {
        self.methods.iter().map(|m| m.label.clone()).collect()
    }

    pub fn series(&self) -> &[String] {
        &self.series
    }

    /// Training lengths of the origins.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn failures(&self) -> &[CellFailure] {
        &self.failures
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Hash of the base forecasts per base forecaster, for each origin.
    pub fn base_hashes(&self) -> &[BTreeMap<String, u64>] {
        &self.base_hashes
    }

    pub fn method_index(&self, label: &str) -> Result<usize> {
        self.methods
            .iter()
            .position(|m| m.label == label)
            .ok_or_else(|| FlapError::Config(format!("method `{label}` is not in the score table")))
    }

    /// Squared error of one cell (`origin` is a position in [`Self::origins`]).
    pub fn se(&self, method: usize, origin: usize, h: usize, series: usize) -> f64 {
        self.se[self.index(method, origin, h, series)]
    }

    /// Origins at which every method has a score for horizon `h`.
    fn complete_origins(&self, h: usize) -> Vec<usize> {
        (0..self.origins.len())
            .filter(|&o| {
                (0..self.methods.len())
                    .all(|mi| (0..self.series.len()).all(|s| self.se(mi, o, h, s).is_finite()))
            })
            .collect()
    }

    /// Mean squared error per series (rows) and method (columns) at horizon
    /// `h`, over origins where no method failed.
    pub fn mse_by_series(&self, h: usize) -> Result<DMatrix<f64>> {
        self.check_h(h)?;
        let keep = self.complete_origins(h);
        let dropped = self.origins.len() - keep.len();
        if dropped > 0 {
            log::warn!("{dropped} origins excluded at h={h} because of failed cells");
        }
        if keep.is_empty() {
            return Err(FlapError::InsufficientData(format!("no complete origin at h={h}")));
        }
        let n = keep.len() as f64;
        Ok(DMatrix::from_fn(self.series.len(), self.methods.len(), |s, mi| {
            keep.iter().map(|&o| self.se(mi, o, h, s)).sum::<f64>() / n
        }))
    }

    /// MSE of a method at horizon `h`, averaged over series and complete origins.
    pub fn mean_mse(&self, method: usize, h: usize) -> Result<f64> {
        let by_series = self.mse_by_series(h)?;
        Ok(by_series.column(method).mean())
    }

    fn check_h(&self, h: usize) -> Result<()> {
        if h == 0 || h > self.horizon {
            return Err(FlapError::Config(format!("horizon {h} outside 1..={}", self.horizon)));
        }
        Ok(())
    }

    /// Long format `origin,series,h,method,se` in stable order; failed cells are `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["origin", "series", "h", "method", "se"])?;
        for (oi, origin) in self.origins.iter().enumerate() {
            for (si, name) in self.series.iter().enumerate() {
                for h in 1..=self.horizon {
                    for (mi, method) in self.methods.iter().enumerate() {
                        let v = self.se(mi, oi, h, si);
                        let cell = if v.is_finite() { v.to_string() } else { "NA".into() };
                        wtr.write_record([origin.to_string(), name.clone(), h.to_string(), method.label.clone(), cell])?;
                    }
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a table written by [`Self::write_csv`]. Method families and
    /// component counts are recovered from the labels.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| FlapError::InvalidData(format!("scores file lacks column `{name}`")))
        };
        let (c_origin, c_series, c_h, c_method, c_se) = (col("origin")?, col("series")?, col("h")?, col("method")?, col("se")?);
        let mut origins = Vec::new();
        let mut series = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        let mut horizon = 0;
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_usize = |i: usize| {
                rec[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| FlapError::InvalidData(format!("`{}`: {e}", &rec[i])))
            };
            let origin = parse_usize(c_origin)?;
            let h = parse_usize(c_h)?;
            let se = match rec[c_se].trim() {
                "NA" | "" => f64::NAN,
                v => v
                    .parse::<f64>()
                    .map_err(|e| FlapError::InvalidData(format!("`{v}`: {e}")))?,
            };
            if !origins.contains(&origin) {
                origins.push(origin);
            }
            if !series.contains(&rec[c_series].to_string()) {
                series.push(rec[c_series].to_string());
            }
            if !methods.contains(&rec[c_method].to_string()) {
                methods.push(rec[c_method].to_string());
            }
            horizon = horizon.max(h);
            cells.push((origin, rec[c_series].to_string(), h, rec[c_method].to_string(), se));
        }
        let methods: Vec<MethodInfo> = methods.iter().map(|l| info_from_label(l)).collect();
        let mut table = ScoreTable {
            methods,
            series,
            origins,
            horizon,
            se: Vec::new(),
            failures: Vec::new(),
            audit: Vec::new(),
            base_hashes: Vec::new(),
        };
        table.se = vec![f64::NAN; table.methods.len() * table.origins.len() * horizon * table.series.len()];
        let mut filled = vec![false; table.se.len()];
        for (origin, s, h, method, se) in cells {
            let oi = table.origins.iter().position(|&o| o == origin).expect("seen");
            let si = table.series.iter().position(|n| *n == s).expect("seen");
            let mi = table.methods.iter().position(|m| m.label == method).expect("seen");
            let idx = table.index(mi, oi, h, si);
            if filled[idx] {
                return Err(FlapError::DuplicateCell {
                    time: format!("origin {origin}, h {h}, method {method}"),
                    series: s,
                });
            }
            filled[idx] = true;
            table.se[idx] = se;
        }
        if let Some(idx) = filled.iter().position(|f| !f) {
            let per_method = table.origins.len() * horizon * table.series.len();
            return Err(FlapError::InvalidData(format!(
                "scores file is incomplete (method `{}` has missing cells)",
                table.methods[idx / per_method].label
            )));
        }
        Ok(table)
    }
}

fn info_from_label(label: &str) -> MethodInfo {
    let parts: Vec<&str> = label.split(LABEL_SEP).collect();
    if parts.len() == 3 {
        let (count, tag) = match parts[2].split_once(' ') {
            Some((c, t)) => (c, format!(" {t}")),
            None => (parts[2], String::new()),
        };
        if let Ok(p) = count.parse::<usize>() {
            return MethodInfo {
                label: label.to_string(),
                family: format!("{}{LABEL_SEP}{}{tag}", parts[0], parts[1]),
                model: parts[0].to_string(),
                p: Some(p),
            };
        }
    }
    MethodInfo {
        label: label.to_string(),
        family: label.to_string(),
        model: parts[0].to_string(),
        p: None,
    }
}

fn hash_matrix(m: &DMatrix<f64>) -> u64 {
    let mut hasher = DefaultHasher::new();
    m.shape().hash(&mut hasher);
    for v in m.iter() {
        v.to_bits().hash(&mut hasher);
    }
    hasher.finish()
}

/// Key of methods that share one weight matrix and component forecasts.
fn group_key(base: &ForecasterSpec, c: &ComponentSpec) -> String {
    format!("{base:?}|{:?}|{}|{}|{:?}", c.scheme, c.standardize, c.seed, c.forecaster)
}

struct Group {
    weights: WeightMatrix,
    aug: AugmentedForecast,
}

/// Projected forecasts in original units with the covariances used.
#[derive(Debug, Clone)]
pub struct ProjectedForecast {
    /// `H x m`.
    pub values: DMatrix<f64>,
    /// One estimate per horizon; empty when `p = 0`.
    pub covariances: Vec<CovarianceEstimate>,
}

/// Projects augmented forecasts for horizons `1..=horizon` under `mode`
/// and maps them back to original units. With no components the base
/// forecasts are returned unchanged.
pub fn project_augmented(
    base: &BaseForecast,
    weights: &WeightMatrix,
    aug: &AugmentedForecast,
    mode: &CovarianceMode,
    horizon: usize,
) -> Result<ProjectedForecast> {
    let m = aug.m;
    let p = weights.p();
    if p == 0 {
        return Ok(ProjectedForecast {
            values: base.forecasts.values.rows(0, horizon).into_owned(),
            covariances: Vec::new(),
        });
    }
    if aug.p() != p {
        return Err(FlapError::Dimension(format!(
            "{p} weight rows but {} forecast components",
            aug.p()
        )));
    }
    let constraint = build_constraint(weights);
    let k = m + p;
    let mut projected = DMatrix::zeros(horizon, m);
    let mut covariances: Vec<CovarianceEstimate> = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let cov = match mode {
            CovarianceMode::PerHorizon => shrink_cov(&aug.residuals[h - 1])?,
            CovarianceMode::Proportional => match covariances.first() {
                Some(first) => proportional_w(first, h)?,
                None => shrink_cov(&aug.residuals[0])?,
            },
            CovarianceMode::Identity => CovarianceEstimate::identity(k, h),
            CovarianceMode::Known(list) => {
                let full = list.get(h - 1).ok_or_else(|| {
                    FlapError::Config(format!("no known covariance supplied for h={h}"))
                })?;
                if full.nrows() < k || full.ncols() < k {
                    return Err(FlapError::Dimension(format!(
                        "known covariance is {} x {}, need at least {k}",
                        full.nrows(),
                        full.ncols()
                    )));
                }
                CovarianceEstimate::known(full.view((0, 0), (k, k)).into_owned(), h)?
            }
        };
        let op = build_projection(&constraint, &cov)?;
        let row = op.project_y(&aug.zhat.row(h))?;
        projected.set_row(h - 1, &row.transpose());
        covariances.push(cov);
    }
    Ok(ProjectedForecast {
        values: weights.invert_transform(&projected),
        covariances,
    })
}

fn flap_forecast(base: &BaseForecast, group: &Group, spec: &ComponentSpec, horizon: usize) -> Result<DMatrix<f64>> {
    if spec.p == 0 {
        return Ok(base.forecasts.values.rows(0, horizon).into_owned());
    }
    let w = group.weights.truncate(spec.p)?;
    let aug = group.aug.leading(spec.p)?;
    Ok(project_augmented(base, &w, &aug, &spec.covariance, horizon)?.values)
}

type OriginResult = (Vec<std::result::Result<DMatrix<f64>, String>>, BTreeMap<String, u64>);

fn run_origin(panel: &Panel, t0: usize, horizon: usize, methods: &[MethodSpec]) -> OriginResult {
    let train = panel.head(t0);
    let actual = panel.values().rows(t0, horizon).into_owned();
    let mut bases: BTreeMap<String, std::result::Result<BaseForecast, String>> = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for spec in methods {
        if matches!(spec.kind, MethodKind::Oracle) {
            continue;
        }
        let key = format!("{:?}", spec.base);
        if !bases.contains_key(&key) {
            let fit = forecast_panel(&train, &spec.base, horizon).map_err(|e| e.to_string());
            if let Ok(b) = &fit {
                hashes.insert(spec.base.label().to_string() + &key, hash_matrix(&b.forecasts.values));
            }
            bases.insert(key, fit);
        }
    }
    let mut group_p: BTreeMap<String, usize> = BTreeMap::new();
    for spec in methods {
        if let MethodKind::Flap(c) = &spec.kind {
            let e = group_p.entry(group_key(&spec.base, c)).or_insert(0);
            *e = (*e).max(c.p);
        }
    }
    let mut groups: BTreeMap<String, std::result::Result<Group, String>> = BTreeMap::new();
    let mut out = Vec::with_capacity(methods.len());
    for spec in methods {
        let forecast: std::result::Result<DMatrix<f64>, String> = match &spec.kind {
            MethodKind::Oracle => Ok(actual.clone()),
            MethodKind::Benchmark => match &bases[&format!("{:?}", spec.base)] {
                Ok(b) => Ok(b.forecasts.values.clone()),
                Err(e) => Err(e.clone()),
            },
            MethodKind::Flap(c) => match &bases[&format!("{:?}", spec.base)] {
                Err(e) => Err(e.clone()),
                Ok(base) => {
                    debug_assert_eq!(
                        hashes[&(spec.base.label().to_string() + &format!("{:?}", spec.base))],
                        hash_matrix(&base.forecasts.values)
                    );
                    let key = group_key(&spec.base, c);
                    let group = groups.entry(key.clone()).or_insert_with(|| {
                        let p_max = group_p[&key];
                        let weights = c
                            .scheme
                            .weights(&train, p_max, c.standardize, c.seed)
                            .map_err(|e| e.to_string())?;
                        let aug = augment_base(base, &train, &weights, &c.forecaster, horizon)
                            .map_err(|e| e.to_string())?;
                        Ok(Group { weights, aug })
                    });
                    match group {
                        Err(e) => Err(e.clone()),
                        Ok(g) => flap_forecast(base, g, c, horizon).map_err(|e| e.to_string()),
                    }
                }
            },
        };
        out.push(forecast.map(|f| (&actual - f).map(|e| e * e)));
    }
    (out, hashes)
}

/// Expanding-window cross-validation of `methods` on `panel`.
///
/// Everything (weights, base and component forecasters, covariances) is
/// fitted on the training window only. A method with more than 1% failed
/// cells aborts the run with [`FlapError::MethodFailed`].
pub fn run_cv(panel: &Panel, plan: &CvPlan, methods: &[MethodSpec]) -> Result<ScoreTable> {
    if methods.is_empty() {
        return Err(FlapError::Config("no methods to evaluate".into()));
    }
    let labels: Vec<String> = methods.iter().map(MethodSpec::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(FlapError::Config(format!("duplicate method `{l}`")));
        }
    }
    let origins = plan.origins(panel.n_obs())?;
    let horizon = plan.horizon;
    let results: Vec<OriginResult> = origins
        .par_iter()
        .map(|&t0| run_origin(panel, t0, horizon, methods))
        .collect();

    let m = panel.n_series();
    let n_o = origins.len();
    let mut table = ScoreTable {
        methods: methods
            .iter()
            .map(|s| MethodInfo {
                label: s.label(),
                family: s.family(),
                model: s.base.label().to_string(),
                p: s.p(),
            })
            .collect(),
        series: panel.names().to_vec(),
        origins: origins.clone(),
        horizon,
        se: vec![f64::NAN; methods.len() * n_o * horizon * m],
        failures: Vec::new(),
        audit: origins
            .iter()
            .enumerate()
            .map(|(i, &t0)| AuditEntry {
                origin: i,
                train_end: t0,
                first_scored: t0,
            })
            .collect(),
        base_hashes: Vec::with_capacity(n_o),
    };
    for (oi, (cells, hashes)) in results.into_iter().enumerate() {
        for (mi, cell) in cells.into_iter().enumerate() {
            match cell {
                Ok(se) => {
                    for h in 1..=horizon {
                        for s in 0..m {
                            let idx = table.index(mi, oi, h, s);
                            table.se[idx] = se[(h - 1, s)];
                        }
                    }
                }
                Err(cause) => {
                    log::warn!("{} failed at origin {}: {cause}", labels[mi], origins[oi]);
                    table.failures.push(CellFailure {
                        origin: origins[oi],
                        method: labels[mi].clone(),
                        cause,
                    });
                }
            }
        }
        table.base_hashes.push(hashes);
    }
    let cells = n_o * horizon * m;
    for label in &labels {
        let failed: Vec<&CellFailure> = table.failures.iter().filter(|f| &f.method == label).collect();
        let failed_cells = failed.len() * horizon * m;
        if failed_cells as f64 > MAX_FAILURE_SHARE * cells as f64 {
            return Err(FlapError::MethodFailed {
                method: label.clone(),
                failed: failed_cells,
                cells,
                cause: failed[0].cause.clone(),
            });
        }
    }
    if !table.failures.is_empty() {
        log::warn!("{} failed cells excluded pairwise", table.failures.len() * horizon * m);
    }
    Ok(table)
}

/// Upper quantiles of the studentized range with infinite degrees of
/// freedom for `k = 2..=20` groups (Harter's tables).
const Q_001: [f64; 19] = [
    3.642773, 4.120303, 4.402801, 4.602821, 4.757047, 4.882166, 4.987183, 5.077506, 5.156635, 5.226963,
    5.290196, 5.347592, 5.400105, 5.448476, 5.493291, 5.535020, 5.574047, 5.610690, 5.645215,
];
const Q_005: [f64; 19] = [
    2.771808, 3.314493, 3.633160, 3.857656, 4.030092, 4.169554, 4.286309, 4.386509, 4.474124, 4.551864,
    4.621655, 4.684920, 4.742732, 4.795924, 4.845154, 4.890951, 4.933745, 4.973892, 5.011689,
];
const Q_010: [f64; 19] = [
    2.326174, 2.902380, 3.240446, 3.478281, 3.660721, 3.808098, 3.931349, 4.037023, 4.129346, 4.211200,
    4.284635, 4.351158, 4.411913, 4.467782, 4.519464, 4.567519, 4.612403, 4.654494, 4.694104,
];

/// Studentized range quantile `q_{alpha,k}` (infinite df).
pub fn studentized_range_quantile(alpha: f64, k: usize) -> Result<f64> {
    let table = if (alpha - 0.01).abs() < 1e-12 {
        &Q_001
    } else if (alpha - 0.05).abs() < 1e-12 {
        &Q_005
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_010
    } else {
        return Err(FlapError::Config(format!("alpha must be 0.01, 0.05 or 0.10, got {alpha}")));
    };
    if !(2..=20).contains(&k) {
        return Err(FlapError::Config(format!("rank tests support 2 to 20 methods, got {k}")));
    }
    Ok(table[k - 2])
}

/// Nemenyi critical distance `q_{alpha,k} sqrt(k (k+1) / (12 N))`.
pub fn critical_distance(alpha: f64, k: usize, n: usize) -> Result<f64> {
    let q = studentized_range_quantile(alpha, k)?;
    Ok(q * ((k * (k + 1)) as f64 / (12.0 * n as f64)).sqrt())
}

/// Ranks `1..=k` with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let k = values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; k];
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j + 1 < k && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub methods: Vec<String>,
    pub mean_ranks: Vec<f64>,
    pub n_obs: usize,
    pub alpha: f64,
    pub friedman_statistic: f64,
    pub p_value: f64,
    pub critical_distance: f64,
    /// `[rank - CD/2, rank + CD/2]` per method.
    pub intervals: Vec<(f64, f64)>,
    /// Index of the method with the smallest mean rank.
    pub best: usize,
    /// Mean rank exceeds the best one by more than CD (intervals disjoint).
    pub worse_than_best: Vec<bool>,
    /// `|R_i - R_j| > CD`.
    pub pairwise: Vec<Vec<bool>>,
}

impl RankReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Friedman test with Nemenyi critical distance and MCB intervals on an
/// `N x k` score matrix (rows are observations, lower is better).
pub fn friedman_nemenyi(scores: &DMatrix<f64>, methods: &[String], alpha: f64) -> Result<RankReport> {
    let (n, k) = scores.shape();
    if k < 2 || n < 2 {
        return Err(FlapError::Config(format!(
            "rank tests need at least 2 methods and 2 observations, got {k} and {n}"
        )));
    }
    if methods.len() != k {
        return Err(FlapError::Dimension(format!("{} labels for {k} methods", methods.len())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(FlapError::InvalidData("scores contain non-finite values".into()));
    }
    let cd = critical_distance(alpha, k, n)?;
    let mut rank_sums = vec![0.0; k];
    let mut sum_sq = 0.0;
    for row in scores.row_iter() {
        let values: Vec<f64> = row.iter().copied().collect();
        for (j, r) in average_ranks(&values).into_iter().enumerate() {
            rank_sums[j] += r;
            sum_sq += r * r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let denom = sum_sq - nf * kf * (kf + 1.0).powi(2) / 4.0;
    if denom.abs() <= 1e-12 * sum_sq {
        return Err(FlapError::DegenerateRanks);
    }
    let center = nf * (kf + 1.0) / 2.0;
    let numer: f64 = rank_sums.iter().map(|r| (r - center).powi(2)).sum();
    let statistic = (kf - 1.0) * numer / denom;
    let chi2 = ChiSquared::new(kf - 1.0).map_err(|e| FlapError::Numerical(e.to_string()))?;
    let p_value = chi2.sf(statistic);
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|r| r / nf).collect();
    let best = (0..k)
        .min_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]))
        .expect("k >= 2");
    let intervals = mean_ranks.iter().map(|r| (r - cd / 2.0, r + cd / 2.0)).collect();
    let worse_than_best = mean_ranks.iter().map(|r| r - mean_ranks[best] > cd).collect();
    let pairwise = (0..k)
        .map(|i| (0..k).map(|j| (mean_ranks[i] - mean_ranks[j]).abs() > cd).collect())
        .collect();
    Ok(RankReport {
        methods: methods.to_vec(),
        mean_ranks,
        n_obs: n,
        alpha,
        friedman_statistic: statistic,
        p_value,
        critical_distance: cd,
        intervals,
        best,
        worse_than_best,
        pairwise,
    })
}

/// One-sided paired sign test of `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(Binomial(wins + losses, 1/2) >= wins)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(FlapError::Dimension(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| FlapError::Numerical(e.to_string()))?;
        bin.sf(wins as u64 - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// One point of an MSE-vs-`p` curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub family: String,
    pub p: usize,
    pub h: usize,
    pub mse: f64,
    /// MSE of the benchmark with the same base model.
    pub base_mse: f64,
}

/// Mean MSE per FLAP family, `p` in `sweep` and horizon, with the matching
/// benchmark as reference.
pub fn mse_curves(table: &ScoreTable, sweep: &[usize]) -> Result<Vec<CurvePoint>> {
    let mut families: Vec<(String, String)> = Vec::new();
    for m in table.methods() {
        if m.p.is_some() && !families.iter().any(|(f, _)| *f == m.family) {
            families.push((m.family.clone(), m.model.clone()));
        }
    }
    let mut out = Vec::new();
    for h in 1..=table.horizon() {
        let by_series = table.mse_by_series(h)?;
        let mean = |i: usize| by_series.column(i).mean();
        for (family, model) in &families {
            let base_label = format!("{model}{LABEL_SEP}Benchmark");
            let base = table.method_index(&base_label).map_err(|_| {
                FlapError::Config(format!("benchmark `{base_label}` for family `{family}` is missing"))
            })?;
            for &p in sweep {
                let idx = table
                    .methods()
                    .iter()
                    .position(|m| m.family == *family && m.p == Some(p))
                    .ok_or_else(|| FlapError::Config(format!("missing sweep cell: family `{family}`, p = {p}")))?;
                out.push(CurvePoint {
                    family: family.clone(),
                    p,
                    h,
                    mse: mean(idx),
                    base_mse: mean(base),
                });
            }
        }
    }
    Ok(out)
}

/// Tidy CSV `family,p,h,mse,base_mse`.
pub fn write_curves<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["family", "p", "h", "mse", "base_mse"])?;
    for pt in points {
        wtr.write_record([
            pt.family.clone(),
            pt.p.to_string(),
            pt.h.to_string(),
            pt.mse.to_string(),
            pt.base_mse.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
