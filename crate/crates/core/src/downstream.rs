//! Linear phenotype heads on latents and the 3 x K prediction heatmap
//! comparing ECG-only, MRI-only and fused inputs.

use serde::{Deserialize, Serialize};

use crate::ae::LatentVector;
use crate::cohort::{representative, RepresentativeMethod};
use crate::error::{Error, Result};
use crate::latent::{LatentSource, LatentTable};
use crate::synth::{Covariate, CovariateValue, Dataset, Split, SubjectRecord};

pub const HEAD_L2: f64 = 1e-3;
pub const LOGISTIC_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypeKind {
    Binary,
    Continuous,
}

/// Ground-truth factor names usable as phenotype sources.
pub const FACTOR_SOURCES: [&str; 6] = [
    "heart_scale",
    "heart_rate",
    "wall_thickness",
    "rr_jitter",
    "axis_deg",
    "sphericity",
];

fn factor_value(subject: &SubjectRecord, name: &str) -> Option<f64> {
    let f = &subject.factors;
    let v = match name {
        "heart_scale" => f.heart_scale,
        "heart_rate" => f.heart_rate,
        "wall_thickness" => f.wall_thickness,
        "rr_jitter" => f.rr_jitter,
        "axis_deg" => f.axis_deg,
        "sphericity" => f.sphericity,
        _ => return None,
    };
    Some(v as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeSpec {
    pub name: String,
    pub kind: PhenotypeKind,
    /// A covariate name or a ground-truth factor name.
    pub source: String,
}

impl PhenotypeSpec {
    pub fn new(name: &str, kind: PhenotypeKind, source: &str) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            kind,
            source: source.to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (Covariate::from_name(&self.source), self.kind) {
            (Some(c), PhenotypeKind::Binary) => c.categories().len() == 2,
            (Some(c), PhenotypeKind::Continuous) => c.range().is_some(),
            (None, PhenotypeKind::Continuous) => FACTOR_SOURCES.contains(&self.source.as_str()),
            (None, PhenotypeKind::Binary) => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "phenotype {:?}: source {:?} cannot supply a {:?} label",
                self.name, self.source, self.kind
            )))
        }
    }

    /// Binary labels are 1 for the second category (`true`, `male`).
    pub fn label(&self, subject: &SubjectRecord) -> f64 {
        match Covariate::from_name(&self.source) {
            Some(c) => match subject.covariates.value(c) {
                CovariateValue::Numeric(v) => v,
                CovariateValue::Category(cat) => {
                    if c.categories()[1] == cat {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
            None => factor_value(subject, &self.source).expect("validated factor source"),
        }
    }
}

/// Table 1 comorbidities plus chamber size as the LV-mass analog.
pub fn default_phenotypes() -> Vec<PhenotypeSpec> {
    let mut specs: Vec<PhenotypeSpec> = [
        Covariate::AtrialFibrillation,
        Covariate::CoronaryArteryDisease,
        Covariate::DiabetesType2,
        Covariate::Hypertension,
        Covariate::HypertrophicCardiomyopathy,
    ]
    .iter()
    .map(|c| PhenotypeSpec {
        name: c.name().to_string(),
        kind: PhenotypeKind::Binary,
        source: c.name().to_string(),
    })
    .collect();
    specs.push(PhenotypeSpec {
        name: "heart_scale".into(),
        kind: PhenotypeKind::Continuous,
        source: "heart_scale".into(),
    });
    specs
}

/// Heatmap rows, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    EcgOnly,
    MriOnly,
    EcgAndMri,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::EcgOnly, Condition::MriOnly, Condition::EcgAndMri];

    pub fn source(self) -> LatentSource {
        match self {
            Condition::EcgOnly => LatentSource::Ecg,
            Condition::MriOnly => LatentSource::Mri,
            Condition::EcgAndMri => LatentSource::Fused,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::EcgOnly => "ecg_only",
            Condition::MriOnly => "mri_only",
            Condition::EcgAndMri => "ecg_and_mri",
        }
    }
}

/// Affine head in raw latent coordinates; parameters are kept in f32 so a
/// saved head predicts exactly like the fitted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub kind: PhenotypeKind,
    pub weights: Vec<f32>,
    pub bias: f32,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LinearHead {
    pub fn score(&self, z: &[f32]) -> f64 {
        self.bias as f64
            + self
                .weights
                .iter()
                .zip(z)
                .map(|(&w, &v)| w as f64 * v as f64)
                .sum::<f64>()
    }

    /// Probability for binary heads, value for continuous heads.
    pub fn predict(&self, z: &[f32]) -> Result<f64> {
        if z.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "head expects {} latent values, got {}",
                self.weights.len(),
                z.len()
            )));
        }
        let s = self.score(z);
        Ok(match self.kind {
            PhenotypeKind::Binary => sigmoid(s),
            PhenotypeKind::Continuous => s,
        })
    }

    fn from_f64(kind: PhenotypeKind, weights: &[f64], bias: f64) -> Self {
        Self {
            kind,
            weights: weights.iter().map(|&w| w as f32).collect(),
            bias: bias as f32,
        }
    }
}

fn column_stats(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|k| {
            let v = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn check_design(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!(
            "design has {} rows and {} labels",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("design rows must share a non-zero width".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "head design".into(),
        });
    }
    Ok(d)
}

/// Mean logistic loss plus `(l2 / 2) * |w|²` for standardized features.
fn logistic_objective(xs: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs
        .iter()
        .zip(y)
        .map(|(r, &t)| {
            let s = b + r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            // log(1 + e^s) - t * s, computed stably.
            let softplus = if s > 0.0 { s + (-s).exp().ln_1p() } else { s.exp().ln_1p() };
            softplus - t * s
        })
        .sum::<f64>()
        / n;
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Largest eigenvalue of `X̃ᵀX̃ / n` for the bias-augmented design, by power
/// iteration, padded and capped by the trace so the step stays safe.
fn curvature_bound(xs: &[Vec<f64>]) -> f64 {
    let n = xs.len() as f64;
    let d = xs[0].len() + 1;
    let mut g = vec![0.0; d * d];
    for r in xs {
        for i in 0..d {
            let ri = if i + 1 == d { 1.0 } else { r[i] };
            for j in 0..d {
                let rj = if j + 1 == d { 1.0 } else { r[j] };
                g[i * d + j] += ri * rj / n;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| g[i * d + i]).sum();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let gv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| g[i * d + j] * v[j]).sum()).collect();
        let norm = gv.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = v.iter().zip(&gv).map(|(a, b)| a * b).sum();
        v = gv.iter().map(|a| a / norm).collect();
    }
    (1.05 * lambda).min(trace).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub head: LinearHead,
    /// Objective before the first step and after every step.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent with step `1/L` (L = Lipschitz bound of the
/// gradient) on standardized features, folded back to raw coordinates.
pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], l2: f64, iterations: usize) -> Result<LogisticFit> {
    let d = check_design(x, y)?;
    if y.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid("logistic labels must be 0 or 1"));
    }
    let (mean, std) = column_stats(x);
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(k, v)| (v - mean[k]) / std[k]).collect())
        .collect();
    let n = xs.len() as f64;
    let step = 1.0 / (0.25 * curvature_bound(&xs) + l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut loss_trace = vec![logistic_objective(&xs, y, &w, b, l2)];
    for _ in 0..iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &t) in xs.iter().zip(y) {
            let s = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = sigmoid(s) - t;
            for (g, a) in gw.iter_mut().zip(r) {
                *g += e * a / n;
            }
            gb += e / n;
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= step * (g + l2 * *wk);
        }
        b -= step * gb;
        loss_trace.push(logistic_objective(&xs, y, &w, b, l2));
    }
    let raw_w: Vec<f64> = w.iter().zip(&std).map(|(wk, s)| wk / s).collect();
    let raw_b = b - raw_w.iter().zip(&mean).map(|(wk, m)| wk * m).sum::<f64>();
    Ok(LogisticFit {
        head: LinearHead::from_f64(PhenotypeKind::Binary, &raw_w, raw_b),
        loss_trace,
    })
}

/// Solves the symmetric positive-definite system `a x = b` (row-major).
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::Shape(format!("{}-element matrix for {n} unknowns", a.len())));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Numeric {
                        iteration: i,
                        message: "matrix is not positive definite".into(),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Ok(x)
}

/// Ridge coefficients in f64 minimizing `mean (y - b - wᵀx)² + l2 |w|²`,
/// via `(XcᵀXc / n + l2 I) w = Xcᵀyc / n` on centred data.
pub fn ridge_coefficients(x: &[Vec<f64>], y: &[f64], l2: f64) -> Result<(Vec<f64>, f64)> {
    let d = check_design(x, y)?;
    let n = x.len() as f64;
    let (mean, _) = column_stats(x);
    let y_mean = y.iter().sum::<f64>() / n;
    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (r, &t) in x.iter().zip(y) {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            rhs[i] += c[i] * (t - y_mean) / n;
            for j in 0..d {
                a[i * d + j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        a[i * d + i] += l2;
    }
    let w = cholesky_solve(&a, &rhs)?;
    let b = y_mean - w.iter().zip(&mean).map(|(wk, m)| wk * m).sum::<f64>();
    Ok((w, b))
}

pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], l2: f64) -> Result<LinearHead> {
    let (w, b) = ridge_coefficients(x, y, l2)?;
    Ok(LinearHead::from_f64(PhenotypeKind::Continuous, &w, b))
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks
/// for ties; `None` when one class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Some(u / (n1 as f64 * n0 as f64))
}

/// Coefficient of determination; `None` for constant targets.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Option<f64> {
    if targets.is_empty() || predictions.len() != targets.len() {
        return None;
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    R2,
}

impl PhenotypeKind {
    pub fn metric(self) -> Metric {
        match self {
            PhenotypeKind::Binary => Metric::Auroc,
            PhenotypeKind::Continuous => Metric::R2,
        }
    }
}

/// All heads for one phenotype, indexed like [`Condition::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadColumn {
    pub phenotype: PhenotypeSpec,
    /// Why no heads were fitted, if so.
    pub skipped: Option<String>,
    pub heads: Vec<Option<LinearHead>>,
    /// Test-split metric per condition.
    pub metrics: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedHeads {
    pub latent_dim: usize,
    pub columns: Vec<HeadColumn>,
}

fn split_design(
    table: &LatentTable,
    subjects: &[&SubjectRecord],
    source: LatentSource,
) -> Result<Vec<Vec<f64>>> {
    subjects
        .iter()
        .map(|s| Ok(table.values(s.id, source)?.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// One head per (phenotype, condition) on the training split, scored on
/// the test split.
pub fn fit_heads(table: &LatentTable, dataset: &Dataset, phenotypes: &[PhenotypeSpec]) -> Result<FittedHeads> {
    for (i, p) in phenotypes.iter().enumerate() {
        p.validate()?;
        if phenotypes[..i].iter().any(|q| q.name == p.name) {
            return Err(Error::invalid(format!("duplicate phenotype name {:?}", p.name)));
        }
    }
    if table.len() != dataset.len() {
        return Err(Error::invalid("latent table does not match the dataset"));
    }
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    if train.is_empty() {
        return Err(Error::invalid("head fitting needs a non-empty training split"));
    }
    let designs = Condition::ALL
        .iter()
        .map(|c| Ok((split_design(table, &train, c.source())?, split_design(table, &test, c.source())?)))
        .collect::<Result<Vec<_>>>()?;

    let mut columns = Vec::with_capacity(phenotypes.len());
    for spec in phenotypes {
        let y_train: Vec<f64> = train.iter().map(|s| spec.label(s)).collect();
        let y_test: Vec<f64> = test.iter().map(|s| spec.label(s)).collect();
        let first = y_train[0];
        if y_train.iter().all(|&v| v == first) {
            columns.push(HeadColumn {
                phenotype: spec.clone(),
                skipped: Some(format!("training labels are all {first}")),
                heads: vec![None; 3],
                metrics: vec![None; 3],
            });
            continue;
        }
        let mut heads = Vec::with_capacity(3);
        let mut metrics = Vec::with_capacity(3);
        for (x_train, x_test) in &designs {
            let head = match spec.kind {
                PhenotypeKind::Binary => fit_logistic(x_train, &y_train, HEAD_L2, LOGISTIC_ITERATIONS)?.head,
                PhenotypeKind::Continuous => fit_ridge(x_train, &y_train, HEAD_L2)?,
            };
            let preds: Vec<f64> = x_test
                .iter()
                .map(|r| head.score(&r.iter().map(|&v| v as f32).collect::<Vec<_>>()))
                .collect();
            metrics.push(match spec.kind {
                PhenotypeKind::Binary => {
                    let labels: Vec<bool> = y_test.iter().map(|&v| v == 1.0).collect();
                    auroc(&preds, &labels)
                }
                PhenotypeKind::Continuous => r_squared(&preds, &y_test),
            });
            heads.push(Some(head));
        }
        columns.push(HeadColumn {
            phenotype: spec.clone(),
            skipped: None,
            heads,
            metrics,
        });
    }
    Ok(FittedHeads {
        latent_dim: table.dim(),
        columns,
    })
}

/// Heatmap: rows in [`Condition::ALL`] order, one column per phenotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub rows: Vec<Condition>,
    pub columns: Vec<String>,
    pub kinds: Vec<PhenotypeKind>,
    /// `None` marks an unavailable (skipped) head.
    pub cells: Vec<Vec<Option<f64>>>,
    pub metric: Vec<Metric>,
    /// Test-split metric of the head behind each cell.
    pub metrics: Vec<Vec<Option<f64>>>,
    pub skipped: Vec<Option<String>>,
}

impl FittedHeads {
    fn matrix_with(&self, mut latent_for: impl FnMut(Condition) -> Result<LatentVector>) -> Result<PredictionMatrix> {
        let mut cells = Vec::with_capacity(3);
        let mut metrics = Vec::with_capacity(3);
        for (row, &condition) in Condition::ALL.iter().enumerate() {
            let z = latent_for(condition)?;
            if z.dim() != self.latent_dim {
                return Err(Error::invalid(format!(
                    "heads expect {} latent values, got {}",
                    self.latent_dim,
                    z.dim()
                )));
            }
            cells.push(
                self.columns
                    .iter()
                    .map(|c| c.heads[row].as_ref().map(|h| h.predict(&z.values)).transpose())
                    .collect::<Result<Vec<_>>>()?,
            );
            metrics.push(self.columns.iter().map(|c| c.metrics[row]).collect());
        }
        Ok(PredictionMatrix {
            rows: Condition::ALL.to_vec(),
            columns: self.columns.iter().map(|c| c.phenotype.name.clone()).collect(),
            kinds: self.columns.iter().map(|c| c.phenotype.kind).collect(),
            cells,
            metric: self.columns.iter().map(|c| c.phenotype.kind.metric()).collect(),
            metrics,
            skipped: self.columns.iter().map(|c| c.skipped.clone()).collect(),
        })
    }

    /// Group prediction from the group's mean latent under each condition
    /// (fused latents are fused per subject, then averaged).
    pub fn predict_matrix(&self, table: &LatentTable, members: &[u64]) -> Result<PredictionMatrix> {
        self.matrix_with(|c| Ok(representative(table, members, RepresentativeMethod::Mean, c.source())?.0))
    }

    /// Every condition's heads applied to one edited or interpolated latent.
    pub fn predict_latent(&self, z: &LatentVector) -> Result<PredictionMatrix> {
        self.matrix_with(|_| Ok(z.clone()))
    }
}
