//! Cohort data layer: covariate histograms, AND-only filters, lasso
//! selection on 2-D layouts, representative latents, and named groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ae::LatentVector;
use crate::error::{Error, Result};
use crate::latent::{LatentSource, LatentTable};
use crate::synth::{Covariate, CovariateKind, CovariateValue, Dataset, Modality, SubjectRecord};
use crate::tsne::Embedding2D;

pub const AGE_BIN_WIDTH: f64 = 5.0;
pub const BMI_BIN_WIDTH: f64 = 2.5;

fn bin_width(c: Covariate) -> Option<f64> {
    match c {
        Covariate::Age => Some(AGE_BIN_WIDTH),
        Covariate::Bmi => Some(BMI_BIN_WIDTH),
        _ => None,
    }
}

/// Bin labels for a covariate: categories, or `lo-hi` ranges (the last bin
/// is closed on the right).
pub fn bin_labels(c: Covariate) -> Vec<String> {
    match (c.range(), bin_width(c)) {
        (Some((lo, hi)), Some(w)) => {
            let n = ((hi - lo) / w).round() as usize;
            (0..n)
                .map(|i| {
                    let a = lo + i as f64 * w;
                    format!("{}-{}", a, a + w)
                })
                .collect()
        }
        _ => c.categories().iter().map(|s| s.to_string()).collect(),
    }
}

/// Bin index of a subject's covariate value.
pub fn bin_index(c: Covariate, subject: &SubjectRecord) -> usize {
    match subject.covariates.value(c) {
        CovariateValue::Numeric(v) => {
            let (lo, hi) = c.range().expect("numeric covariates have ranges");
            let w = bin_width(c).expect("numeric covariates have bin widths");
            let n = ((hi - lo) / w).round() as usize;
            (((v - lo) / w).floor().max(0.0) as usize).min(n - 1)
        }
        CovariateValue::Category(cat) => c
            .categories()
            .iter()
            .position(|&k| k == cat)
            .expect("category values come from the schema"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateHistogram {
    pub covariate: Covariate,
    pub labels: Vec<String>,
    pub all: Vec<usize>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    pub total: usize,
    pub selected: usize,
    pub covariates: Vec<CovariateHistogram>,
}

/// Per-covariate bar counts for the whole cohort and for `selection`
/// (duplicates in `selection` count once).
pub fn histogram(dataset: &Dataset, selection: &[u64]) -> Result<HistogramSet> {
    let mut chosen = vec![false; dataset.len()];
    for &id in selection {
        match chosen.get_mut(id as usize) {
            Some(slot) => *slot = true,
            None => return Err(Error::invalid(format!("unknown subject id {id}"))),
        }
    }
    let covariates = Covariate::ALL
        .iter()
        .map(|&c| {
            let labels = bin_labels(c);
            let mut all = vec![0; labels.len()];
            let mut sel = vec![0; labels.len()];
            for s in &dataset.subjects {
                let b = bin_index(c, s);
                all[b] += 1;
                if chosen[s.id as usize] {
                    sel[b] += 1;
                }
            }
            CovariateHistogram {
                covariate: c,
                labels,
                all,
                selected: sel,
            }
        })
        .collect();
    Ok(HistogramSet {
        total: dataset.len(),
        selected: chosen.iter().filter(|&&b| b).count(),
        covariates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    Categories(Vec<String>),
    /// Closed interval.
    Interval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub covariate: Covariate,
    pub constraint: Constraint,
}

impl Clause {
    pub fn categories(covariate: Covariate, allowed: &[&str]) -> Self {
        Self {
            covariate,
            constraint: Constraint::Categories(allowed.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn interval(covariate: Covariate, lo: f64, hi: f64) -> Self {
        Self {
            covariate,
            constraint: Constraint::Interval { lo, hi },
        }
    }

    fn validate(&self) -> Result<()> {
        let name = self.covariate.name();
        match (&self.constraint, self.covariate.kind()) {
            (Constraint::Categories(cats), CovariateKind::Categorical) => {
                let schema = self.covariate.categories();
                if let Some(bad) = cats.iter().find(|c| !schema.contains(&c.as_str())) {
                    return Err(Error::invalid(format!(
                        "{name} has no category {bad:?} (expected one of {schema:?})"
                    )));
                }
                Ok(())
            }
            (Constraint::Interval { lo, hi }, CovariateKind::Numeric) => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::invalid(format!(
                        "malformed interval [{lo}, {hi}] for {name}"
                    )));
                }
                Ok(())
            }
            (Constraint::Categories(_), CovariateKind::Numeric) => Err(Error::invalid(format!(
                "{name} is numeric; filter it with an interval"
            ))),
            (Constraint::Interval { .. }, CovariateKind::Categorical) => Err(Error::invalid(
                format!("{name} is categorical; filter it with categories"),
            )),
        }
    }

    pub fn matches(&self, subject: &SubjectRecord) -> bool {
        match (&self.constraint, subject.covariates.value(self.covariate)) {
            (Constraint::Categories(cats), CovariateValue::Category(v)) => cats.iter().any(|c| c == v),
            (Constraint::Interval { lo, hi }, CovariateValue::Numeric(v)) => *lo <= v && v <= *hi,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawClause {
    covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interval: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawPredicate {
    #[serde(default)]
    clauses: Vec<RawClause>,
}

/// Conjunction of per-covariate clauses (at most one per covariate).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawPredicate", into = "RawPredicate")]
pub struct FilterPredicate {
    clauses: Vec<Clause>,
}

impl FilterPredicate {
    pub fn new(clauses: Vec<Clause>) -> Result<Self> {
        for (i, c) in clauses.iter().enumerate() {
            c.validate()?;
            if clauses[..i].iter().any(|p| p.covariate == c.covariate) {
                return Err(Error::invalid(format!(
                    "more than one clause for {}",
                    c.covariate.name()
                )));
            }
        }
        Ok(Self { clauses })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn matches(&self, subject: &SubjectRecord) -> bool {
        self.clauses.iter().all(|c| c.matches(subject))
    }
}

impl TryFrom<RawPredicate> for FilterPredicate {
    type Error = Error;

    fn try_from(raw: RawPredicate) -> Result<Self> {
        let clauses = raw
            .clauses
            .into_iter()
            .map(|rc| {
                let covariate = Covariate::from_name(&rc.covariate)
                    .ok_or_else(|| Error::invalid(format!("unknown covariate {:?}", rc.covariate)))?;
                let constraint = match (rc.categories, rc.interval) {
                    (Some(cats), None) => Constraint::Categories(cats),
                    (None, Some([lo, hi])) => Constraint::Interval { lo, hi },
                    _ => {
                        return Err(Error::invalid(format!(
                            "clause for {} needs exactly one of categories or interval",
                            rc.covariate
                        )))
                    }
                };
                Ok(Clause {
                    covariate,
                    constraint,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FilterPredicate::new(clauses)
    }
}

impl From<FilterPredicate> for RawPredicate {
    fn from(p: FilterPredicate) -> Self {
        RawPredicate {
            clauses: p
                .clauses
                .into_iter()
                .map(|c| {
                    let (categories, interval) = match c.constraint {
                        Constraint::Categories(cats) => (Some(cats), None),
                        Constraint::Interval { lo, hi } => (None, Some([lo, hi])),
                    };
                    RawClause {
                        covariate: c.covariate.name().to_string(),
                        categories,
                        interval,
                    }
                })
                .collect(),
        }
    }
}

/// Ids of subjects satisfying every clause, ascending.
pub fn filter_cohort(dataset: &Dataset, predicate: &FilterPredicate) -> Vec<u64> {
    dataset
        .subjects
        .iter()
        .filter(|s| predicate.matches(s))
        .map(|s| s.id)
        .collect()
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    cross == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Even–odd rule with a rightward ray; points on an edge count as inside.
/// The crossing test compares products of coordinate differences, so it is
/// exact for integer-valued inputs and invariant under exact translations.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let n = polygon.len();
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let lhs = (p[0] - a[0]) * (b[1] - a[1]);
            let rhs = (p[1] - a[1]) * (b[0] - a[0]);
            let left_of_crossing = if b[1] > a[1] { lhs < rhs } else { lhs > rhs };
            if left_of_crossing {
                inside = !inside;
            }
        }
    }
    inside
}

/// Subjects whose layout point falls inside the (implicitly closed) polygon.
pub fn lasso_select(embedding: &Embedding2D, polygon: &[[f64; 2]]) -> Result<Vec<u64>> {
    if polygon.len() < 3 {
        return Err(Error::invalid(format!(
            "lasso polygon needs at least 3 vertices, got {}",
            polygon.len()
        )));
    }
    if polygon.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::invalid("lasso polygon has non-finite vertices"));
    }
    let mut ids: Vec<u64> = embedding
        .ids
        .iter()
        .zip(&embedding.points)
        .filter(|(_, &p)| point_in_polygon(p, polygon))
        .map(|(&id, _)| id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeMethod {
    NearestSubject,
    Mean,
    Median,
    /// Same statistic as `Mean` for a finite point set.
    Centroid,
}

fn component_mean(rows: &[&[f32]], dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..dim)
        .map(|k| rows.iter().map(|r| r[k] as f64).sum::<f64>() / n)
        .collect()
}

/// A single latent standing in for a group, plus the subject it belongs to
/// when it is a real member.
pub fn representative(
    table: &LatentTable,
    members: &[u64],
    method: RepresentativeMethod,
    source: LatentSource,
) -> Result<(LatentVector, Option<u64>)> {
    if members.is_empty() {
        return Err(Error::invalid("cannot summarize an empty group"));
    }
    let mut ids = members.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let rows = ids
        .iter()
        .map(|&id| table.values(id, source))
        .collect::<Result<Vec<_>>>()?;
    let dim = table.dim();
    let origin = source.origin();
    match method {
        RepresentativeMethod::Mean | RepresentativeMethod::Centroid => {
            let mean = component_mean(&rows, dim);
            Ok((
                LatentVector::new(mean.iter().map(|&v| v as f32).collect(), origin)?,
                None,
            ))
        }
        RepresentativeMethod::Median => {
            let values = (0..dim)
                .map(|k| {
                    let mut col: Vec<f32> = rows.iter().map(|r| r[k]).collect();
                    col.sort_by(f32::total_cmp);
                    col[(col.len() - 1) / 2]
                })
                .collect();
            Ok((LatentVector::new(values, origin)?, None))
        }
        RepresentativeMethod::NearestSubject => {
            let centre = component_mean(&rows, dim);
            let mut best = (f64::INFINITY, 0usize);
            for (i, r) in rows.iter().enumerate() {
                let d: f64 = r
                    .iter()
                    .zip(&centre)
                    .map(|(&v, c)| (v as f64 - c).powi(2))
                    .sum();
                // Ids ascend, so strict improvement keeps the smallest id on ties.
                if d < best.0 {
                    best = (d, i);
                }
            }
            Ok((LatentVector::new(rows[best.1].to_vec(), origin)?, Some(ids[best.1])))
        }
    }
}

/// How a group's members were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Filter {
        predicate: FilterPredicate,
    },
    Lasso {
        modality: Modality,
        polygon: Vec<[f64; 2]>,
    },
    /// Members common to existing groups, optionally narrowed by a filter.
    Intersection {
        groups: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicate: Option<FilterPredicate>,
    },
    /// Ids supplied directly by the client.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortGroup {
    pub id: u64,
    pub name: String,
    pub provenance: Provenance,
    pub subject_ids: Vec<u64>,
}

/// Named groups with stable ids; ids are never reused.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupRegistry {
    next_id: u64,
    groups: BTreeMap<u64, CohortGroup>,
}

fn normalize_members(ids: &[u64], population: usize) -> Result<Vec<u64>> {
    if ids.is_empty() {
        return Err(Error::invalid("a group needs at least one subject"));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= population) {
        return Err(Error::invalid(format!("unknown subject id {bad}")));
    }
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

impl GroupRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a group over a dataset of `population` subjects.
    pub fn create(
        &mut self,
        name: &str,
        subject_ids: &[u64],
        provenance: Provenance,
        population: usize,
    ) -> Result<&CohortGroup> {
        let subject_ids = normalize_members(subject_ids, population)?;
        let id = self.next_id;
        self.next_id += 1;
        let group = CohortGroup {
            id,
            name: name.to_string(),
            provenance,
            subject_ids,
        };
        Ok(self.groups.entry(id).or_insert(group))
    }

    pub fn get(&self, id: u64) -> Result<&CohortGroup> {
        self.groups
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("unknown group id {id}")))
    }

    pub fn remove(&mut self, id: u64) -> Result<CohortGroup> {
        self.groups
            .remove(&id)
            .ok_or_else(|| Error::invalid(format!("unknown group id {id}")))
    }

    pub fn groups(&self) -> impl Iterator<Item = &CohortGroup> {
        self.groups.values()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Members shared by all `groups`, in ascending order.
    pub fn intersect(&self, groups: &[u64]) -> Result<Vec<u64>> {
        let (first, rest) = groups
            .split_first()
            .ok_or_else(|| Error::invalid("intersection needs at least one group"))?;
        let mut ids = self.get(*first)?.subject_ids.clone();
        for g in rest {
            let other = &self.get(*g)?.subject_ids;
            ids.retain(|id| other.binary_search(id).is_ok());
        }
        Ok(ids)
    }

    pub fn export_json(&self) -> Result<String> {
        let groups: Vec<&CohortGroup> = self.groups.values().collect();
        Ok(serde_json::to_string_pretty(&groups)?)
    }

    /// Replaces the registry with exported groups, validated against a
    /// dataset of `population` subjects.
    pub fn import_json(json: &str, population: usize) -> Result<Self> {
        let groups: Vec<CohortGroup> = serde_json::from_str(json)?;
        let mut registry = Self::new();
        for mut g in groups {
            g.subject_ids = normalize_members(&g.subject_ids, population)?;
            if registry.groups.contains_key(&g.id) {
                return Err(Error::Format(format!("duplicate group id {}", g.id)));
            }
            registry.next_id = registry.next_id.max(g.id + 1);
            registry.groups.insert(g.id, g);
        }
        Ok(registry)
    }
}
