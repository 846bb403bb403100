//! Component weight matrices `Phi` (`p x m`, one row per component) and the
//! formation of component series `c_t = Phi * y_t`.
//!
//! PCA weights carry the centering (and optional scaling) used to compute
//! them. Components, and the constraint they imply, live in that transformed
//! space: `c_t = Phi * (y_t - center) / scale`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::ingestion::{column_means, default_names, mean_sd, Panel};
use crate::linalg::sorted_symmetric_eigen;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Pca,
    RandomNormal,
    RandomUniform,
    RandomOrthonormal,
    PcaPlusNormal,
    PcaPlusUniform,
    OrthonormalPlusNormal,
    Custom,
}

impl Scheme {
    /// Short label used in method names, e.g. `PCA+Norm`.
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Pca => "PCA",
            Scheme::RandomNormal => "Norm",
            Scheme::RandomUniform => "Unif",
            Scheme::RandomOrthonormal => "Ortho",
            Scheme::PcaPlusNormal => "PCA+Norm",
            Scheme::PcaPlusUniform => "PCA+Unif",
            Scheme::OrthonormalPlusNormal => "Ortho+Norm",
            Scheme::Custom => "Custom",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(
            self,
            Scheme::RandomNormal | Scheme::RandomUniform | Scheme::RandomOrthonormal
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomDist {
    /// Standard normal.
    Normal,
    /// Uniform on `(-1, 1)`.
    Uniform,
}

/// Affine map `x -> (x - center) / scale` applied to each observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Transform {
    pub fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (c, s) = (self.center[j], self.scale[j]);
            col.apply(|v| *v = (*v - c) / s);
        }
        out
    }

    pub fn invert(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (c, s) = (self.center[j], self.scale[j]);
            col.apply(|v| *v = *v * s + c);
        }
        out
    }

    /// Scales columns only; used for residuals, which are unaffected by
    /// the centering.
    pub fn apply_scale(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = e.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let s = self.scale[j];
            col.apply(|v| *v /= s);
        }
        out
    }
}

/// Component weights `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    weights: DMatrix<f64>,
    scheme: Scheme,
    seed: Option<u64>,
    transform: Option<Transform>,
}

impl WeightMatrix {
    /// User-supplied weights with no data transform.
    pub fn custom(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(FlapError::InvalidData("weights contain non-finite entries".into()));
        }
        Ok(Self {
            weights,
            scheme: Scheme::Custom,
            seed: None,
            transform: None,
        })
    }

    /// No components (`p = 0`) for `m` series.
    pub fn empty(m: usize) -> Self {
        Self {
            weights: DMatrix::zeros(0, m),
            scheme: Scheme::Custom,
            seed: None,
            transform: None,
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Number of components.
    pub fn p(&self) -> usize {
        self.weights.nrows()
    }

    /// Number of original series.
    pub fn m(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn transform(&self) -> Option<&Transform> {
        self.transform.as_ref()
    }

    /// Subtracted means (zeros when the weights carry no transform).
    pub fn centering(&self) -> DVector<f64> {
        match &self.transform {
            Some(t) => DVector::from_vec(t.center.clone()),
            None => DVector::zeros(self.m()),
        }
    }

    /// Divisors (ones when unscaled).
    pub fn scaling(&self) -> DVector<f64> {
        match &self.transform {
            Some(t) => DVector::from_vec(t.scale.clone()),
            None => DVector::from_element(self.m(), 1.0),
        }
    }

    /// The first `p` components; used to build nested sequences.
    pub fn truncate(&self, p: usize) -> Result<Self> {
        if p > self.p() {
            return Err(FlapError::Dimension(format!(
                "cannot keep {p} of {} components",
                self.p()
            )));
        }
        Ok(Self {
            weights: self.weights.rows(0, p).into_owned(),
            ..self.clone()
        })
    }

    /// Maps original observations (`T x m`) into the space the components
    /// are defined on.
    pub fn apply_transform(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.transform {
            Some(t) => t.apply(y),
            None => y.clone(),
        }
    }

    pub fn invert_transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.transform {
            Some(t) => t.invert(x),
            None => x.clone(),
        }
    }

    pub fn scale_residuals(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.transform {
            Some(t) => t.apply_scale(e),
            None => e.clone(),
        }
    }
}

/// Principal-component weights: the top `p` eigenvectors of the sample
/// covariance (divisor `T - 1`) of the demeaned, optionally standardized,
/// panel. Each row's largest-magnitude entry is made positive.
pub fn pca_weights(panel: &Panel, p: usize, standardize: bool) -> Result<WeightMatrix> {
    let (t, m) = (panel.n_obs(), panel.n_series());
    if p > m {
        return Err(FlapError::Dimension(format!(
            "requested {p} principal components from {m} series"
        )));
    }
    if t < 2 || m == 0 {
        return Err(FlapError::InsufficientData(format!(
            "PCA needs T >= 2 and m >= 1, got T = {t}, m = {m}"
        )));
    }
    let mut center = Vec::with_capacity(m);
    let mut scale = Vec::with_capacity(m);
    for j in 0..m {
        let (mean, sd) = mean_sd(panel.column(j));
        center.push(mean);
        if standardize {
            if !(sd > 0.0) {
                return Err(FlapError::DegenerateSeries {
                    column: panel.names()[j].clone(),
                });
            }
            scale.push(sd);
        } else {
            scale.push(1.0);
        }
    }
    let transform = Transform { center, scale };
    let x = transform.apply(panel.values());
    let cov = (x.transpose() * &x) / (t as f64 - 1.0);
    let (_, vectors) = sorted_symmetric_eigen(&cov);
    let mut weights = DMatrix::zeros(p, m);
    for i in 0..p {
        let mut row = vectors.column(i).transpose();
        let lead = row
            .iter()
            .copied()
            .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            row.neg_mut();
        }
        weights.set_row(i, &row);
    }
    Ok(WeightMatrix {
        weights,
        scheme: Scheme::Pca,
        seed: None,
        transform: Some(transform),
    })
}

/// Raw `p x m` draws before row normalization. Rows are drawn one after
/// another, so the first `q` rows do not depend on `p >= q`.
pub fn random_raw(m: usize, p: usize, dist: RandomDist, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_column = match dist {
        RandomDist::Normal => DMatrix::from_fn(m, p, |_, _| StandardNormal.sample(&mut rng)),
        RandomDist::Uniform => {
            let unif = Uniform::new(-1.0, 1.0).expect("valid uniform bounds");
            DMatrix::from_fn(m, p, |_, _| unif.sample(&mut rng))
        }
    };
    by_column.transpose()
}

/// Random component weights with each row scaled to unit Euclidean norm.
pub fn random_weights(m: usize, p: usize, dist: RandomDist, seed: u64) -> Result<WeightMatrix> {
    if m == 0 || p == 0 {
        return Err(FlapError::Config(format!(
            "random weights need m >= 1 and p >= 1, got m = {m}, p = {p}"
        )));
    }
    let mut weights = random_raw(m, p, dist, seed);
    for mut row in weights.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    Ok(WeightMatrix {
        weights,
        scheme: match dist {
            RandomDist::Normal => Scheme::RandomNormal,
            RandomDist::Uniform => Scheme::RandomUniform,
        },
        seed: Some(seed),
        transform: None,
    })
}

/// Haar-distributed orthonormal rows: QR of an `m x m` Gaussian matrix with
/// the sign of each `R` diagonal entry folded into `Q`.
pub fn orthonormal_weights(m: usize, p: usize, seed: u64) -> Result<WeightMatrix> {
    if p > m {
        return Err(FlapError::Dimension(format!(
            "{p} orthonormal rows requested in dimension {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
    let qr = gauss.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let weights = q.columns(0, p).transpose();
    Ok(WeightMatrix {
        weights,
        scheme: Scheme::RandomOrthonormal,
        seed: Some(seed),
        transform: None,
    })
}

/// Stacks `second` below `first`.
///
/// Weights without a transform (random schemes) adopt the other side's
/// transform; two different transforms are rejected.
pub fn concat_weights(first: &WeightMatrix, second: &WeightMatrix) -> Result<WeightMatrix> {
    if first.m() != second.m() {
        return Err(FlapError::Dimension(format!(
            "cannot stack weights over {} and {} series",
            first.m(),
            second.m()
        )));
    }
    let transform = match (&first.transform, &second.transform) {
        (Some(a), Some(b)) if a != b => {
            return Err(FlapError::IncompatibleTransform(
                "both weight matrices carry different centering/scaling".into(),
            ))
        }
        (Some(a), _) => Some(a.clone()),
        (None, b) => b.clone(),
    };
    let scheme = match (first.scheme, second.scheme) {
        (Scheme::Pca, Scheme::RandomNormal) => Scheme::PcaPlusNormal,
        (Scheme::Pca, Scheme::RandomUniform) => Scheme::PcaPlusUniform,
        (Scheme::RandomOrthonormal, Scheme::RandomNormal) => Scheme::OrthonormalPlusNormal,
        (s, _) if first.p() > 0 && second.p() == 0 => s,
        (_, s) if first.p() == 0 => s,
        _ => Scheme::Custom,
    };
    let (p1, p2, m) = (first.p(), second.p(), first.m());
    let mut weights = DMatrix::zeros(p1 + p2, m);
    weights.rows_mut(0, p1).copy_from(&first.weights);
    weights.rows_mut(p1, p2).copy_from(&second.weights);
    Ok(WeightMatrix {
        weights,
        scheme,
        seed: first.seed.or(second.seed),
        transform,
    })
}

/// Component series `c_t = Phi * transform(y_t)`, named `C1..Cp`.
pub fn form_components(panel: &Panel, w: &WeightMatrix) -> Result<Panel> {
    if panel.n_series() != w.m() {
        return Err(FlapError::Dimension(format!(
            "panel has {} series, weights expect {}",
            panel.n_series(),
            w.m()
        )));
    }
    let x = w.apply_transform(panel.values());
    let c = x * w.weights.transpose();
    Ok(panel.with_values(c, default_names("C", w.p())))
}

/// The augmented panel `z_t = [transform(y_t); c_t]` with `m + p` columns.
pub fn augment(panel: &Panel, w: &WeightMatrix) -> Result<Panel> {
    let comps = form_components(panel, w)?;
    let x = w.apply_transform(panel.values());
    let (t, m, p) = (panel.n_obs(), w.m(), w.p());
    let mut z = DMatrix::zeros(t, m + p);
    z.columns_mut(0, m).copy_from(&x);
    z.columns_mut(m, p).copy_from(comps.values());
    let mut names = panel.names().to_vec();
    names.extend(comps.names().iter().cloned());
    Ok(panel.with_values(z, names))
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightSidecar {
    scheme: Scheme,
    seed: Option<u64>,
    centering: Vec<f64>,
    scaling: Vec<f64>,
    has_transform: bool,
}

/// Writes the weights as CSV (header = series names) and the JSON sidecar.
pub fn write_weights<W1: Write, W2: Write>(
    w: &WeightMatrix,
    series_names: &[String],
    csv_out: W1,
    json_out: W2,
) -> Result<()> {
    if series_names.len() != w.m() {
        return Err(FlapError::Dimension(format!(
            "{} names for {} weight columns",
            series_names.len(),
            w.m()
        )));
    }
    let mut wtr = csv::Writer::from_writer(csv_out);
    wtr.write_record(series_names)?;
    for row in w.weights.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    let sidecar = WeightSidecar {
        scheme: w.scheme,
        seed: w.seed,
        centering: w.centering().as_slice().to_vec(),
        scaling: w.scaling().as_slice().to_vec(),
        has_transform: w.transform.is_some(),
    };
    serde_json::to_writer_pretty(json_out, &sidecar)?;
    Ok(())
}

pub fn read_weights<R1: Read, R2: Read>(
    csv_in: R1,
    json_in: R2,
) -> Result<(WeightMatrix, Vec<String>)> {
    let mut rdr = csv::Reader::from_reader(csv_in);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let m = names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        for field in record.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| {
                FlapError::InvalidData(format!("weight entry `{field}`: {e}"))
            })?);
        }
        rows += 1;
    }
    if data.len() != rows * m {
        return Err(FlapError::InvalidData("ragged weight CSV".into()));
    }
    let sidecar: WeightSidecar = serde_json::from_reader(json_in)?;
    let transform = sidecar.has_transform.then(|| Transform {
        center: sidecar.centering,
        scale: sidecar.scaling,
    });
    let mut w = WeightMatrix::custom(DMatrix::from_row_slice(rows, m, &data))?;
    w.scheme = sidecar.scheme;
    w.seed = sidecar.seed;
    w.transform = transform;
    Ok((w, names))
}

pub fn save_weights(w: &WeightMatrix, series_names: &[String], csv_path: &Path) -> Result<()> {
    let json_path = csv_path.with_extension("json");
    write_weights(
        w,
        series_names,
        std::fs::File::create(csv_path)?,
        std::fs::File::create(json_path)?,
    )
}

/// Column means of the transformed panel; zero for PCA-transformed data.
pub fn transformed_means(panel: &Panel, w: &WeightMatrix) -> DVector<f64> {
    column_means(&w.apply_transform(panel.values()))
}
