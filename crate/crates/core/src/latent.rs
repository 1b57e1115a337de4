//! Latent-space verbs: reconstruct a group, perturb one dimension,
//! interpolate between two vectors, translate across modalities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ae::{fuse, CrossModalAe, LatentOrigin, LatentVector};
use crate::cohort::{representative, RepresentativeMethod};
use crate::error::{Error, Result};
use crate::synth::{Dataset, Modality, Split};
use crate::tensor::DenseTensor;

/// Perturbation axes span this many training standard deviations.
pub const DISPLAY_RANGE_STDS: f64 = 4.0;

/// Which latent of a subject to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Ecg,
    Mri,
    Fused,
}

impl LatentSource {
    pub const ALL: [LatentSource; 3] = [LatentSource::Ecg, LatentSource::Mri, LatentSource::Fused];

    pub fn origin(self) -> LatentOrigin {
        match self {
            LatentSource::Ecg => LatentOrigin::Ecg,
            LatentSource::Mri => LatentOrigin::Mri,
            LatentSource::Fused => LatentOrigin::Fused,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LatentSource::Ecg => "ecg",
            LatentSource::Mri => "mri",
            LatentSource::Fused => "fused",
        }
    }
}

impl From<Modality> for LatentSource {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Ecg => LatentSource::Ecg,
            Modality::Mri => LatentSource::Mri,
        }
    }
}

/// Every subject's ECG, MRI and fused latent, encoded once.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    dim: usize,
    splits: Vec<Split>,
    ecg: Vec<f32>,
    mri: Vec<f32>,
    fused: Vec<f32>,
    display_range: Vec<f32>,
}

const ENCODE_CHUNK: usize = 256;

impl LatentTable {
    pub fn compute(model: &CrossModalAe<f32>, dataset: &Dataset) -> Result<Self> {
        let dim = model.latent_dim();
        let mut ecg = Vec::with_capacity(dataset.len());
        let mut mri = Vec::with_capacity(dataset.len());
        for chunk in dataset.subjects.chunks(ENCODE_CHUNK) {
            for m in Modality::ALL {
                let mut data = Vec::with_capacity(chunk.len() * m.sample_len());
                for s in chunk {
                    data.extend_from_slice(s.sample(m));
                }
                let x = DenseTensor::new(vec![chunk.len(), m.sample_len()], data)?;
                let z = model.encode_batch(&x, m)?;
                z.ensure_finite(&format!("{} latents", m.as_str()))?;
                let rows = z.data().chunks(dim).map(<[f32]>::to_vec);
                match m {
                    Modality::Ecg => ecg.extend(rows),
                    Modality::Mri => mri.extend(rows),
                }
            }
        }
        let splits: Vec<Split> = dataset.subjects.iter().map(|s| s.split).collect();
        Self::from_latents(&ecg, &mri, &splits)
    }

    /// Builds a table from precomputed per-subject latents (row `i` belongs to
    /// subject id `i`); fused latents are derived.
    pub fn from_latents(ecg: &[Vec<f32>], mri: &[Vec<f32>], splits: &[Split]) -> Result<Self> {
        if ecg.len() != mri.len() || ecg.len() != splits.len() || ecg.is_empty() {
            return Err(Error::Shape("latent rows and splits must align and be non-empty".into()));
        }
        let dim = ecg[0].len();
        let mut table = Self {
            dim,
            splits: splits.to_vec(),
            ecg: Vec::with_capacity(ecg.len() * dim),
            mri: Vec::with_capacity(ecg.len() * dim),
            fused: Vec::with_capacity(ecg.len() * dim),
            display_range: Vec::new(),
        };
        for (e, m) in ecg.iter().zip(mri) {
            let f = fuse(
                &LatentVector::new(e.clone(), LatentOrigin::Ecg)?,
                &LatentVector::new(m.clone(), LatentOrigin::Mri)?,
            )?;
            if f.dim() != dim {
                return Err(Error::Shape("latent rows differ in length".into()));
            }
            table.ecg.extend_from_slice(e);
            table.mri.extend_from_slice(m);
            table.fused.extend_from_slice(&f.values);
        }
        table.display_range = table.training_display_range()?;
        Ok(table)
    }

    /// `R_k = 4 * std_k` over the training split's ECG and MRI latents.
    fn training_display_range(&self) -> Result<Vec<f32>> {
        let rows: Vec<&[f32]> = (0..self.len())
            .filter(|&i| self.splits[i] == Split::Train)
            .flat_map(|i| [self.row(i, LatentSource::Ecg), self.row(i, LatentSource::Mri)])
            .collect();
        if rows.len() < 2 {
            return Err(Error::invalid("display range needs training latents"));
        }
        let n = rows.len() as f64;
        Ok((0..self.dim)
            .map(|k| {
                let mean = rows.iter().map(|r| r[k] as f64).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[k] as f64 - mean).powi(2)).sum::<f64>() / n;
                (DISPLAY_RANGE_STDS * var.sqrt()) as f32
            })
            .collect())
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn display_range(&self) -> &[f32] {
        &self.display_range
    }

    pub fn split_of(&self, id: u64) -> Option<Split> {
        self.splits.get(id as usize).copied()
    }

    fn row(&self, i: usize, source: LatentSource) -> &[f32] {
        let data = match source {
            LatentSource::Ecg => &self.ecg,
            LatentSource::Mri => &self.mri,
            LatentSource::Fused => &self.fused,
        };
        &data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self, id: u64, source: LatentSource) -> Result<&[f32]> {
        if (id as usize) >= self.len() {
            return Err(Error::invalid(format!("unknown subject id {id}")));
        }
        Ok(self.row(id as usize, source))
    }

    pub fn vector(&self, id: u64, source: LatentSource) -> Result<LatentVector> {
        LatentVector::new(self.values(id, source)?.to_vec(), source.origin())
    }

    /// All latents of one source in id order, widened for t-SNE.
    pub fn rows_f64(&self, source: LatentSource) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.row(i, source).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

pub type Samples = BTreeMap<Modality, Vec<f32>>;

pub fn decode_all(model: &CrossModalAe<f32>, z: &LatentVector, modalities: &[Modality]) -> Result<Samples> {
    if modalities.is_empty() {
        return Err(Error::invalid("request at least one modality"));
    }
    modalities.iter().map(|&m| Ok((m, model.decode(z, m)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub latent: LatentVector,
    /// Set when the representative is a real subject.
    pub subject_id: Option<u64>,
    pub samples: Samples,
}

pub fn reconstruct_group(
    model: &CrossModalAe<f32>,
    table: &LatentTable,
    members: &[u64],
    method: RepresentativeMethod,
    source: LatentSource,
    modalities: &[Modality],
) -> Result<Reconstruction> {
    let (latent, subject_id) = representative(table, members, method, source)?;
    let samples = decode_all(model, &latent, modalities)?;
    Ok(Reconstruction {
        latent,
        subject_id,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRequest {
    pub base: LatentVector,
    pub dimension: usize,
    pub value: f32,
}

impl PerturbationRequest {
    pub fn validate(&self, display_range: &[f32]) -> Result<()> {
        if self.base.dim() != display_range.len() {
            return Err(Error::invalid(format!(
                "base vector has {} values, latent dimension is {}",
                self.base.dim(),
                display_range.len()
            )));
        }
        if self.dimension >= display_range.len() {
            return Err(Error::invalid(format!(
                "dimension {} out of range 0..{}",
                self.dimension,
                display_range.len()
            )));
        }
        let r = display_range[self.dimension];
        if !self.value.is_finite() || self.value.abs() > r {
            return Err(Error::invalid(format!(
                "value {} for dimension {} outside display range [-R, R] with R = {r}",
                self.value, self.dimension
            )));
        }
        Ok(())
    }

    /// The base vector with exactly one coordinate replaced.
    pub fn perturbed(&self) -> Result<LatentVector> {
        let mut values = self.base.values.clone();
        values[self.dimension] = self.value;
        LatentVector::new(values, self.base.origin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub original: LatentVector,
    pub perturbed: LatentVector,
    pub original_samples: Samples,
    pub perturbed_samples: Samples,
}

pub fn perturb(
    model: &CrossModalAe<f32>,
    display_range: &[f32],
    request: &PerturbationRequest,
    modalities: &[Modality],
) -> Result<Perturbation> {
    request.validate(display_range)?;
    let perturbed = request.perturbed()?;
    Ok(Perturbation {
        original_samples: decode_all(model, &request.base, modalities)?,
        perturbed_samples: decode_all(model, &perturbed, modalities)?,
        original: request.base.clone(),
        perturbed,
    })
}

/// `(1 - t) * z_a + t * z_b`; exact at both endpoints.
pub fn interpolate_vectors(z_a: &LatentVector, z_b: &LatentVector, t: f32) -> Result<LatentVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} must lie in [0, 1]")));
    }
    if z_a.dim() != z_b.dim() {
        return Err(Error::Shape(format!(
            "cannot interpolate latents of length {} and {}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    let values = z_a
        .values
        .iter()
        .zip(&z_b.values)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let origin = if z_a.origin == z_b.origin {
        z_a.origin
    } else {
        LatentOrigin::Synthetic
    };
    LatentVector::new(values, origin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    pub latent: LatentVector,
    pub samples: Samples,
}

pub fn interpolate(
    model: &CrossModalAe<f32>,
    z_a: &LatentVector,
    z_b: &LatentVector,
    t: f32,
    modalities: &[Modality],
) -> Result<Interpolation> {
    let latent = interpolate_vectors(z_a, z_b, t)?;
    let samples = decode_all(model, &latent, modalities)?;
    Ok(Interpolation { latent, samples })
}

/// Decode the other modality from one modality's encoding.
pub fn translate(model: &CrossModalAe<f32>, sample: &[f32], from: Modality, to: Modality) -> Result<Vec<f32>> {
    if from == to {
        return Err(Error::invalid(
            "translation needs two different modalities; use reconstruct for self-decoding",
        ));
    }
    let z = model.encode(sample, from)?;
    model.decode(&z, to)
}
