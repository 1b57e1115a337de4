use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Path, Query, State};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use xmodal_core::ae::{LatentVector, TrainConfig};
use xmodal_core::cohort::{
    filter_cohort, histogram, lasso_select, CohortGroup, FilterPredicate, HistogramSet, Provenance,
    RepresentativeMethod,
};
use xmodal_core::downstream::{Metric, PhenotypeKind, PredictionMatrix};
use xmodal_core::latent::{self, LatentSource, PerturbationRequest};
use xmodal_core::synth::{covariate_schema, CovariateRecord, CovariateSchemaEntry, GroundTruthFactors, Modality, Split, SplitCounts};

use crate::encoding::{encode_samples, sample_shape, EncodedSample, EncodedSamples};
use crate::error::ApiError;
use crate::session::SessionState;

type Shared = State<Arc<SessionState>>;
type ApiResult<T> = Result<axum::Json<T>, ApiError>;

/// JSON body extractor whose rejections are [`ApiError`]s.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct Json<T>(pub T);

pub fn router(state: Arc<SessionState>) -> Router {
    Router::new()
        .route("/api/summary", get(summary))
        .route("/api/histogram", get(histogram_handler))
        .route("/api/embedding/{modality}", get(embedding))
        .route("/api/cohort/filter", post(cohort_filter))
        .route("/api/cohort/lasso", post(cohort_lasso))
        .route("/api/group", post(create_group).get(list_groups))
        .route("/api/reconstruct", post(reconstruct))
        .route("/api/perturb", post(perturb))
        .route("/api/interpolate", post(interpolate))
        .route("/api/translate", post(translate))
        .route("/api/subject/{id}", get(subject))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

fn parse_modality(name: &str) -> Result<Modality, ApiError> {
    Modality::ALL
        .into_iter()
        .find(|m| m.as_str() == name)
        .ok_or_else(|| ApiError::not_found(format!("unknown modality {name:?}")))
}

fn default_method() -> RepresentativeMethod {
    RepresentativeMethod::Mean
}

fn default_source() -> LatentSource {
    LatentSource::Fused
}

fn default_modalities() -> Vec<Modality> {
    Modality::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub name: Modality,
    pub shape: Vec<usize>,
    pub value_range: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeInfo {
    pub name: String,
    pub kind: PhenotypeKind,
    pub metric: Metric,
    /// Test-split metric per condition, ECG-only / MRI-only / both.
    pub metrics: Vec<Option<f64>>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub split_sizes: SplitCounts,
    pub covariate_schema: Vec<CovariateSchemaEntry>,
    pub latent_dim: usize,
    pub display_range: Vec<f32>,
    pub modalities: Vec<ModalityInfo>,
    pub phenotypes: Vec<PhenotypeInfo>,
    pub training: TrainConfig,
    pub epoch_of_best: usize,
    pub validation_loss_at_best: f64,
    pub groups: usize,
}

async fn summary(State(s): Shared) -> ApiResult<Summary> {
    let ckpt = &s.checkpoint;
    Ok(axum::Json(Summary {
        count: s.dataset.len(),
        seed: s.dataset.seed,
        fingerprint: ckpt.dataset_fingerprint.clone(),
        split_sizes: s.dataset.split_counts(),
        covariate_schema: covariate_schema(),
        latent_dim: s.table.dim(),
        display_range: s.table.display_range().to_vec(),
        modalities: Modality::ALL
            .iter()
            .map(|&m| ModalityInfo {
                name: m,
                shape: sample_shape(m),
                value_range: m.value_range(),
            })
            .collect(),
        phenotypes: s
            .heads
            .columns
            .iter()
            .map(|c| PhenotypeInfo {
                name: c.phenotype.name.clone(),
                kind: c.phenotype.kind,
                metric: c.phenotype.kind.metric(),
                metrics: c.metrics.clone(),
                skipped: c.skipped.clone(),
            })
            .collect(),
        training: ckpt.config.clone(),
        epoch_of_best: ckpt.epoch_of_best,
        validation_loss_at_best: ckpt.validation_loss_at_best,
        groups: s.groups().len(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct HistogramQuery {
    /// Comma-separated subject ids, or `group:<id>`.
    #[serde(default)]
    pub selection: Option<String>,
}

fn parse_selection(s: &SessionState, raw: &str) -> Result<Vec<u64>, ApiError> {
    let raw = raw.trim();
    if let Some(group) = raw.strip_prefix("group:") {
        let id: u64 = group
            .parse()
            .map_err(|_| ApiError::bad_request(format!("bad group id {group:?}")))?;
        return Ok(s.groups().get(id)?.subject_ids.clone());
    }
    raw.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| ApiError::bad_request(format!("bad subject id {t:?}"))))
        .collect()
}

async fn histogram_handler(
    State(s): Shared,
    query: Result<Query<HistogramQuery>, QueryRejection>,
) -> ApiResult<HistogramSet> {
    let Query(q) = query?;
    let selection = parse_selection(&s, q.selection.as_deref().unwrap_or(""))?;
    Ok(axum::Json(histogram(&s.dataset, &selection)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub modality: Modality,
    pub ids: Vec<u64>,
    pub points: Vec<[f64; 2]>,
    pub perplexity: f64,
    pub kl_final: f64,
}

async fn embedding(State(s): Shared, Path(name): Path<String>) -> ApiResult<EmbeddingResponse> {
    let modality = parse_modality(&name)?;
    let emb = &s.embeddings[&modality];
    Ok(axum::Json(EmbeddingResponse {
        modality,
        ids: emb.ids.clone(),
        points: emb.points.clone(),
        perplexity: emb.config.perplexity,
        kl_final: emb.kl_final,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdsResponse {
    pub ids: Vec<u64>,
}

async fn cohort_filter(State(s): Shared, Json(predicate): Json<FilterPredicate>) -> ApiResult<IdsResponse> {
    Ok(axum::Json(IdsResponse {
        ids: filter_cohort(&s.dataset, &predicate),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoRequest {
    pub modality: Modality,
    pub polygon: Vec<[f64; 2]>,
}

async fn cohort_lasso(State(s): Shared, Json(req): Json<LassoRequest>) -> ApiResult<IdsResponse> {
    Ok(axum::Json(IdsResponse {
        ids: lasso_select(&s.embeddings[&req.modality], &req.polygon)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRequest {
    pub name: String,
    #[serde(default)]
    pub ids: Option<Vec<u64>>,
    /// When given, members are derived from it; explicit `ids` must agree.
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCreated {
    pub id: u64,
    pub name: String,
    pub size: usize,
}

fn members_for(s: &SessionState, provenance: &Provenance) -> Result<Option<Vec<u64>>, ApiError> {
    Ok(match provenance {
        Provenance::Filter { predicate } => Some(filter_cohort(&s.dataset, predicate)),
        Provenance::Lasso { modality, polygon } => Some(lasso_select(&s.embeddings[modality], polygon)?),
        Provenance::Intersection { groups, predicate } => {
            let mut ids = s.groups().intersect(groups)?;
            if let Some(p) = predicate {
                ids.retain(|&id| s.dataset.get(id).is_some_and(|subject| p.matches(subject)));
            }
            Some(ids)
        }
        Provenance::Explicit => None,
    })
}

async fn create_group(State(s): Shared, Json(req): Json<GroupRequest>) -> ApiResult<GroupCreated> {
    let provenance = req.provenance.unwrap_or(Provenance::Explicit);
    let ids = match (members_for(&s, &provenance)?, req.ids) {
        (Some(derived), None) => derived,
        (None, Some(ids)) => ids,
        (None, None) => {
            return Err(ApiError::bad_request("a group needs `ids` or a non-explicit `provenance`"));
        }
        (Some(derived), Some(mut ids)) => {
            ids.sort_unstable();
            ids.dedup();
            if ids != derived {
                return Err(ApiError::bad_request("`ids` disagree with the members implied by `provenance`"));
            }
            derived
        }
    };
    let mut groups = s.groups_mut();
    let g = groups.create(&req.name, &ids, provenance, s.dataset.len())?;
    Ok(axum::Json(GroupCreated {
        id: g.id,
        name: g.name.clone(),
        size: g.subject_ids.len(),
    }))
}

async fn list_groups(State(s): Shared) -> ApiResult<Vec<CohortGroup>> {
    Ok(axum::Json(s.groups().groups().cloned().collect()))
}

fn group_members(s: &SessionState, id: u64) -> Result<Vec<u64>, ApiError> {
    Ok(s.groups().get(id)?.subject_ids.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRequest {
    pub group_id: u64,
    #[serde(default = "default_method")]
    pub method: RepresentativeMethod,
    #[serde(default = "default_source")]
    pub source: LatentSource,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructResponse {
    pub group_id: u64,
    pub method: RepresentativeMethod,
    pub source: LatentSource,
    pub latent: LatentVector,
    pub subject_id: Option<u64>,
    pub samples: EncodedSamples,
    /// Group-level prediction from each condition's mean latent.
    pub prediction: PredictionMatrix,
}

async fn reconstruct(State(s): Shared, Json(req): Json<ReconstructRequest>) -> ApiResult<ReconstructResponse> {
    let members = group_members(&s, req.group_id)?;
    let model = &s.checkpoint.model;
    let rec = latent::reconstruct_group(model, &s.table, &members, req.method, req.source, &req.modalities)?;
    Ok(axum::Json(ReconstructResponse {
        group_id: req.group_id,
        method: req.method,
        source: req.source,
        samples: encode_samples(&rec.samples),
        latent: rec.latent,
        subject_id: rec.subject_id,
        prediction: s.heads.predict_matrix(&s.table, &members)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbRequest {
    pub base: LatentVector,
    pub k: usize,
    pub value: f32,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub original: EncodedSample,
    pub perturbed: EncodedSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub original: PredictionMatrix,
    pub perturbed: PredictionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbResponse {
    pub original: LatentVector,
    pub perturbed: LatentVector,
    pub samples: BTreeMap<Modality, SamplePair>,
    pub prediction: PredictionPair,
}

async fn perturb(State(s): Shared, Json(req): Json<PerturbRequest>) -> ApiResult<PerturbResponse> {
    let request = PerturbationRequest {
        base: req.base,
        dimension: req.k,
        value: req.value,
    };
    let p = latent::perturb(&s.checkpoint.model, s.table.display_range(), &request, &req.modalities)?;
    let samples = req
        .modalities
        .iter()
        .map(|&m| {
            let pair = SamplePair {
                original: EncodedSample::new(m, &p.original_samples[&m]),
                perturbed: EncodedSample::new(m, &p.perturbed_samples[&m]),
            };
            (m, pair)
        })
        .collect();
    Ok(axum::Json(PerturbResponse {
        prediction: PredictionPair {
            original: s.heads.predict_latent(&p.original)?,
            perturbed: s.heads.predict_latent(&p.perturbed)?,
        },
        original: p.original,
        perturbed: p.perturbed,
        samples,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub group_a: u64,
    pub group_b: u64,
    pub t: f32,
    #[serde(default = "default_method")]
    pub method: RepresentativeMethod,
    #[serde(default = "default_source")]
    pub source: LatentSource,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub t: f32,
    pub latent: LatentVector,
    pub samples: EncodedSamples,
    /// Every condition's heads applied to the interpolated latent.
    pub prediction: PredictionMatrix,
}

async fn interpolate(State(s): Shared, Json(req): Json<InterpolateRequest>) -> ApiResult<InterpolateResponse> {
    let (a, b) = (group_members(&s, req.group_a)?, group_members(&s, req.group_b)?);
    let (za, _) = xmodal_core::cohort::representative(&s.table, &a, req.method, req.source)?;
    let (zb, _) = xmodal_core::cohort::representative(&s.table, &b, req.method, req.source)?;
    let out = latent::interpolate(&s.checkpoint.model, &za, &zb, req.t, &req.modalities)?;
    Ok(axum::Json(InterpolateResponse {
        t: req.t,
        prediction: s.heads.predict_latent(&out.latent)?,
        samples: encode_samples(&out.samples),
        latent: out.latent,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    pub subject_id: u64,
    pub from: Modality,
    pub to: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub subject_id: u64,
    pub from: Modality,
    pub to: Modality,
    pub sample: EncodedSample,
}

fn find_subject(s: &SessionState, id: u64) -> Result<&xmodal_core::synth::SubjectRecord, ApiError> {
    s.dataset
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown subject id {id}")))
}

async fn translate(State(s): Shared, Json(req): Json<TranslateRequest>) -> ApiResult<TranslateResponse> {
    let subject = find_subject(&s, req.subject_id)?;
    let out = latent::translate(&s.checkpoint.model, subject.sample(req.from), req.from, req.to)?;
    Ok(axum::Json(TranslateResponse {
        subject_id: req.subject_id,
        from: req.from,
        to: req.to,
        sample: EncodedSample::new(req.to, &out),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResponse {
    pub id: u64,
    pub split: Split,
    pub covariates: CovariateRecord,
    /// Generating factors; synthetic data has them, real cohorts would not.
    pub factors: GroundTruthFactors,
    pub samples: EncodedSamples,
}

async fn subject(State(s): Shared, Path(raw): Path<String>) -> ApiResult<SubjectResponse> {
    let id: u64 = raw
        .parse()
        .map_err(|_| ApiError::bad_request(format!("bad subject id {raw:?}")))?;
    let subject = find_subject(&s, id)?;
    Ok(axum::Json(SubjectResponse {
        id,
        split: subject.split,
        covariates: subject.covariates.clone(),
        factors: subject.factors,
        samples: Modality::ALL
            .iter()
            .map(|&m| (m, EncodedSample::new(m, subject.sample(m))))
            .collect(),
    }))
}
