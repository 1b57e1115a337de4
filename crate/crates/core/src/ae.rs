//! Cross-modal autoencoder: one encoder and one decoder per modality, all
//! meeting in a shared latent space. Trained with per-modality
//! reconstruction plus a symmetric InfoNCE term that pulls a subject's ECG
//! and MRI embeddings together and pushes other subjects' apart.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp, MlpSpec};
use crate::synth::{Dataset, Modality, Split, SubjectRecord};
use crate::tensor::{DenseTensor, Real};

pub const DEFAULT_LATENT_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    Ecg,
    Mri,
    Fused,
    Synthetic,
}

impl From<Modality> for LatentOrigin {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Ecg => LatentOrigin::Ecg,
            Modality::Mri => LatentOrigin::Mri,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f32>,
    pub origin: LatentOrigin,
}

impl LatentVector {
    pub fn new(values: Vec<f32>, origin: LatentOrigin) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "latent vector".into(),
            });
        }
        Ok(Self { values, origin })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Element-wise mean of an ECG and an MRI embedding.
pub fn fuse(z_ecg: &LatentVector, z_mri: &LatentVector) -> Result<LatentVector> {
    if z_ecg.dim() != z_mri.dim() {
        return Err(Error::Shape(format!(
            "cannot fuse latents of length {} and {}",
            z_ecg.dim(),
            z_mri.dim()
        )));
    }
    let values = z_ecg
        .values
        .iter()
        .zip(&z_mri.values)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    LatentVector::new(values, LatentOrigin::Fused)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    /// Softmax temperature of the contrastive term.
    pub temperature: f64,
    /// Weight of the contrastive term relative to reconstruction.
    pub contrastive_weight: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    /// Also reconstruct each modality from the other modality's embedding.
    pub cross_reconstruction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            hidden_width: 512,
            temperature: 0.1,
            contrastive_weight: 1.0,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            lr: 1e-3,
            seed: 0,
            cross_reconstruction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("latent and hidden widths must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::invalid("contrastive weight must be non-negative"));
        }
        if self.batch_size == 0 || (self.contrastive_weight > 0.0 && self.batch_size < 2) {
            return Err(Error::invalid(
                "batch size must be at least 2 when the contrastive term is active",
            ));
        }
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            temperature: self.temperature,
            contrastive_weight: self.contrastive_weight,
            cross_reconstruction: self.cross_reconstruction,
        }
    }
}

/// Loss weights used when scoring a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub temperature: f64,
    pub contrastive_weight: f64,
    pub cross_reconstruction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_ecg: f64,
    pub recon_mri: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(self, w: f64) -> Self {
        Self {
            recon_ecg: self.recon_ecg * w,
            recon_mri: self.recon_mri * w,
            contrastive: self.contrastive * w,
            total: self.total * w,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            recon_ecg: self.recon_ecg + o.recon_ecg,
            recon_mri: self.recon_mri + o.recon_mri,
            contrastive: self.contrastive + o.contrastive,
            total: self.total + o.total,
        }
    }
}

/// Mean squared error with 64-bit accumulation.
pub fn reconstruction_loss<T: Real>(x: &[T], x_hat: &[T]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!(
            "reconstruction of {} values against {}",
            x_hat.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty sample".into()));
    }
    let sum: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

fn normalize_rows(z: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = vec![0.0; rows * cols];
    let mut norms = vec![0.0; rows];
    for i in 0..rows {
        let r = &z[i * cols..(i + 1) * cols];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms[i] = norm;
        for (o, v) in n[i * cols..(i + 1) * cols].iter_mut().zip(r) {
            *o = v / norm;
        }
    }
    (n, norms)
}

/// Symmetric InfoNCE over cosine similarities with positives on the
/// diagonal. Returns the loss and its gradients with respect to both
/// embedding batches.
pub fn contrastive_loss_and_grad<T: Real>(
    z_ecg: &DenseTensor<T>,
    z_mri: &DenseTensor<T>,
    temperature: f64,
) -> Result<(f64, DenseTensor<T>, DenseTensor<T>)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z_ecg.shape() != z_mri.shape() || z_ecg.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "contrastive batches {:?} and {:?}",
            z_ecg.shape(),
            z_mri.shape()
        )));
    }
    let (b, d) = (z_ecg.rows(), z_ecg.cols());
    let ze: Vec<f64> = z_ecg.data().iter().map(|v| v.to_f64_lossy()).collect();
    let zm: Vec<f64> = z_mri.data().iter().map(|v| v.to_f64_lossy()).collect();
    let (ne, norm_e) = normalize_rows(&ze, b, d);
    let (nm, norm_m) = normalize_rows(&zm, b, d);

    let mut s = vec![0.0; b * b];
    f64::gemm(b, d, b, 1.0 / temperature, &ne, false, &nm, true, 0.0, &mut s);

    // Row-wise (ECG -> MRI) and column-wise (MRI -> ECG) softmax.
    let mut row_sm = vec![0.0; b * b];
    let mut col_sm = vec![0.0; b * b];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &s[i * b..(i + 1) * b];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[i];
        for j in 0..b {
            row_sm[i * b + j] = (row[j] - max).exp() / sum;
        }
    }
    for j in 0..b {
        let max = (0..b).map(|i| s[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b).map(|i| (s[i * b + j] - max).exp()).sum();
        loss += max + sum.ln() - s[j * b + j];
        for i in 0..b {
            col_sm[i * b + j] = (s[i * b + j] - max).exp() / sum;
        }
    }
    let loss = loss / (2.0 * b as f64);

    let scale = 1.0 / (2.0 * b as f64);
    let mut g = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 2.0 } else { 0.0 };
            g[i * b + j] = scale * (row_sm[i * b + j] + col_sm[i * b + j] - delta);
        }
    }
    // dL/dn_e = G n_m / tau,  dL/dn_m = G^T n_e / tau
    let mut g_ne = vec![0.0; b * d];
    let mut g_nm = vec![0.0; b * d];
    f64::gemm(b, b, d, 1.0 / temperature, &g, false, &nm, false, 0.0, &mut g_ne);
    f64::gemm(b, b, d, 1.0 / temperature, &g, true, &ne, false, 0.0, &mut g_nm);

    let back = |gn: &[f64], n: &[f64], norms: &[f64]| -> Vec<T> {
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let gi = &gn[i * d..(i + 1) * d];
            let ni = &n[i * d..(i + 1) * d];
            let dot: f64 = gi.iter().zip(ni).map(|(a, c)| a * c).sum();
            for k in 0..d {
                out.push(T::of((gi[k] - ni[k] * dot) / norms[i]));
            }
        }
        out
    };
    let grad_e = DenseTensor::new(vec![b, d], back(&g_ne, &ne, &norm_e))?;
    let grad_m = DenseTensor::new(vec![b, d], back(&g_nm, &nm, &norm_m))?;
    Ok((loss, grad_e, grad_m))
}

/// Symmetric InfoNCE on two aligned batches of latent vectors.
pub fn contrastive_loss(
    z_ecg: &[LatentVector],
    z_mri: &[LatentVector],
    temperature: f64,
) -> Result<f64> {
    if z_ecg.len() != z_mri.len() || z_ecg.is_empty() {
        return Err(Error::Shape(format!(
            "contrastive batches of {} and {} vectors",
            z_ecg.len(),
            z_mri.len()
        )));
    }
    let to_tensor = |zs: &[LatentVector]| {
        let rows: Vec<&[f32]> = zs.iter().map(|z| z.values.as_slice()).collect();
        DenseTensor::<f32>::from_rows(&rows)
    };
    let (loss, _, _) = contrastive_loss_and_grad(&to_tensor(z_ecg)?, &to_tensor(z_mri)?, temperature)?;
    Ok(loss)
}

/// Decoder input and target for modality `m`: both embeddings against a
/// duplicated target under cross reconstruction, else only its own.
fn decoder_io<T: Real>(
    m: Modality,
    ze: &DenseTensor<T>,
    zm: &DenseTensor<T>,
    x: &DenseTensor<T>,
    cross: bool,
) -> Result<(DenseTensor<T>, DenseTensor<T>)> {
    if cross {
        Ok((ze.vstack(zm)?, x.vstack(x)?))
    } else {
        let own = match m {
            Modality::Ecg => ze,
            Modality::Mri => zm,
        };
        Ok((own.clone(), x.clone()))
    }
}

/// A batch of paired samples; row `i` of both matrices is the same subject.
#[derive(Debug, Clone)]
pub struct PairedBatch<T = f32> {
    pub ecg: DenseTensor<T>,
    pub mri: DenseTensor<T>,
}

impl<T: Real> PairedBatch<T> {
    pub fn from_subjects(subjects: &[&SubjectRecord]) -> Result<Self> {
        let gather = |m: Modality| {
            let mut data = Vec::with_capacity(subjects.len() * m.sample_len());
            for s in subjects {
                data.extend(s.sample(m).iter().map(|&v| T::of(v as f64)));
            }
            DenseTensor::new(vec![subjects.len(), m.sample_len()], data)
        };
        Ok(Self {
            ecg: gather(Modality::Ecg)?,
            mri: gather(Modality::Mri)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ecg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct CrossModalAe<T = f32> {
    pub ecg_encoder: Mlp<T>,
    pub mri_encoder: Mlp<T>,
    pub ecg_decoder: Mlp<T>,
    pub mri_decoder: Mlp<T>,
}

pub const NETWORK_NAMES: [&str; 4] = ["ecg_encoder", "mri_encoder", "ecg_decoder", "mri_decoder"];

impl<T: Real> CrossModalAe<T> {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (h, d) = (config.hidden_width, config.latent_dim);
        let seed = |i: u64| config.seed.wrapping_mul(4).wrapping_add(i);
        let enc = |m: Modality, i| {
            MlpSpec::new(vec![m.sample_len(), h, d], Activation::Relu, seed(i))
                .and_then(Mlp::init)
        };
        let dec = |m: Modality, i| {
            MlpSpec::new(vec![d, h, m.sample_len()], Activation::Relu, seed(i))
                .and_then(Mlp::init)
        };
        Ok(Self {
            ecg_encoder: enc(Modality::Ecg, 0)?,
            mri_encoder: enc(Modality::Mri, 1)?,
            ecg_decoder: dec(Modality::Ecg, 2)?,
            mri_decoder: dec(Modality::Mri, 3)?,
        })
    }

    pub fn from_networks(networks: [Mlp<T>; 4]) -> Result<Self> {
        let [ecg_encoder, mri_encoder, ecg_decoder, mri_decoder] = networks;
        let d = ecg_encoder.spec().output_width();
        let ok = ecg_encoder.spec().input_width() == Modality::Ecg.sample_len()
            && mri_encoder.spec().input_width() == Modality::Mri.sample_len()
            && mri_encoder.spec().output_width() == d
            && ecg_decoder.spec().input_width() == d
            && mri_decoder.spec().input_width() == d
            && ecg_decoder.spec().output_width() == Modality::Ecg.sample_len()
            && mri_decoder.spec().output_width() == Modality::Mri.sample_len();
        if !ok {
            return Err(Error::Shape("networks do not share one latent space".into()));
        }
        Ok(Self {
            ecg_encoder,
            mri_encoder,
            ecg_decoder,
            mri_decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.ecg_encoder.spec().output_width()
    }

    pub fn encoder(&self, m: Modality) -> &Mlp<T> {
        match m {
            Modality::Ecg => &self.ecg_encoder,
            Modality::Mri => &self.mri_encoder,
        }
    }

    pub fn decoder(&self, m: Modality) -> &Mlp<T> {
        match m {
            Modality::Ecg => &self.ecg_decoder,
            Modality::Mri => &self.mri_decoder,
        }
    }

    pub fn networks(&self) -> [&Mlp<T>; 4] {
        [
            &self.ecg_encoder,
            &self.mri_encoder,
            &self.ecg_decoder,
            &self.mri_decoder,
        ]
    }

    pub fn parameters(&self) -> Vec<&DenseTensor<T>> {
        self.networks().into_iter().flat_map(|n| n.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        let mut out = self.ecg_encoder.parameters_mut();
        out.extend(self.mri_encoder.parameters_mut());
        out.extend(self.ecg_decoder.parameters_mut());
        out.extend(self.mri_decoder.parameters_mut());
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.networks()
            .into_iter()
            .zip(NETWORK_NAMES)
            .flat_map(|(n, name)| n.parameter_names(name))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CrossModalAe<U> {
        CrossModalAe {
            ecg_encoder: self.ecg_encoder.cast(),
            mri_encoder: self.mri_encoder.cast(),
            ecg_decoder: self.ecg_decoder.cast(),
            mri_decoder: self.mri_decoder.cast(),
        }
    }

    /// Encodes a batch of samples (one per row) of one modality.
    pub fn encode_batch(&self, samples: &DenseTensor<T>, m: Modality) -> Result<DenseTensor<T>> {
        if samples.shape().len() != 2 || samples.cols() != m.sample_len() {
            return Err(Error::invalid(format!(
                "{} samples must have {} values, got shape {:?}",
                m.as_str(),
                m.sample_len(),
                samples.shape()
            )));
        }
        self.encoder(m).predict(samples)
    }

    /// Decodes a batch of latents; outputs are clamped to the modality's range.
    pub fn decode_batch(&self, latents: &DenseTensor<T>, m: Modality) -> Result<DenseTensor<T>> {
        latents.ensure_finite("latent vector")?;
        if latents.shape().len() != 2 || latents.cols() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent vectors must have {} values, got shape {:?}",
                self.latent_dim(),
                latents.shape()
            )));
        }
        let mut out = self.decoder(m).predict(latents)?;
        let (lo, hi) = m.value_range();
        let (lo, hi) = (T::of(lo as f64), T::of(hi as f64));
        for v in out.data_mut() {
            *v = v.max(lo).min(hi);
        }
        Ok(out)
    }

    /// Scores one batch under `objective`.
    pub fn loss(&self, batch: &PairedBatch<T>, objective: Objective) -> Result<LossBreakdown> {
        let ze = self.ecg_encoder.predict(&batch.ecg)?;
        let zm = self.mri_encoder.predict(&batch.mri)?;
        let recon = |m: Modality, x: &DenseTensor<T>| -> Result<f64> {
            let (input, target) = decoder_io(m, &ze, &zm, x, objective.cross_reconstruction)?;
            let out = self.decoder(m).predict(&input)?;
            reconstruction_loss(target.data(), out.data())
        };
        let recon_ecg = recon(Modality::Ecg, &batch.ecg)?;
        let recon_mri = recon(Modality::Mri, &batch.mri)?;
        let contrastive = if objective.contrastive_weight > 0.0 {
            contrastive_loss_and_grad(&ze, &zm, objective.temperature)?.0
        } else {
            0.0
        };
        Ok(LossBreakdown {
            recon_ecg,
            recon_mri,
            contrastive,
            total: recon_ecg + recon_mri + objective.contrastive_weight * contrastive,
        })
    }

    /// Loss and gradients in the order of [`Self::parameters`].
    ///
    /// Under cross reconstruction each decoder reconstructs its modality from
    /// both embeddings and `recon_*` is the mean of the self and cross paths.
    pub fn loss_and_gradients(
        &self,
        batch: &PairedBatch<T>,
        objective: Objective,
    ) -> Result<(LossBreakdown, Vec<DenseTensor<T>>)> {
        let b = batch.len();
        let d = self.latent_dim();
        let (ze, cache_e) = self.ecg_encoder.forward(&batch.ecg)?;
        let (zm, cache_m) = self.mri_encoder.forward(&batch.mri)?;
        let cross = objective.cross_reconstruction;

        let mut grad_z = vec![T::zero(); 2 * b * d];
        let mut decode = |m: Modality, x: &DenseTensor<T>| -> Result<(f64, Vec<DenseTensor<T>>)> {
            let (input, target) = decoder_io(m, &ze, &zm, x, cross)?;
            let dec = self.decoder(m);
            let (out, cache) = dec.forward(&input)?;
            let loss = reconstruction_loss(target.data(), out.data())?;
            let scale = T::of(2.0 / out.len() as f64);
            let g: Vec<T> = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(&o, &t)| scale * (o - t))
                .collect();
            let grads = dec.backward(&cache, &DenseTensor::new(out.shape().to_vec(), g)?)?;
            // Stacked [ecg; mri] embeddings, or only this modality's half.
            let offset = match (cross, m) {
                (true, _) | (false, Modality::Ecg) => 0,
                (false, Modality::Mri) => b * d,
            };
            for (acc, v) in grad_z[offset..].iter_mut().zip(grads.input.data()) {
                *acc = *acc + *v;
            }
            Ok((loss, grads.tensors().into_iter().cloned().collect()))
        };
        let (recon_ecg, g_dec_e) = decode(Modality::Ecg, &batch.ecg)?;
        let (recon_mri, g_dec_m) = decode(Modality::Mri, &batch.mri)?;

        let mut contrastive = 0.0;
        if objective.contrastive_weight > 0.0 {
            let (loss, ge, gm) = contrastive_loss_and_grad(&ze, &zm, objective.temperature)?;
            contrastive = loss;
            let w = T::of(objective.contrastive_weight);
            for (acc, v) in grad_z.iter_mut().zip(ge.data().iter().chain(gm.data())) {
                *acc = *acc + w * *v;
            }
        }
        let (g_ze, g_zm) = grad_z.split_at(b * d);
        let g_enc_e = self
            .ecg_encoder
            .backward(&cache_e, &DenseTensor::new(vec![b, d], g_ze.to_vec())?)?;
        let g_enc_m = self
            .mri_encoder
            .backward(&cache_m, &DenseTensor::new(vec![b, d], g_zm.to_vec())?)?;

        let mut grads: Vec<DenseTensor<T>> = g_enc_e.tensors().into_iter().cloned().collect();
        grads.extend(g_enc_m.tensors().into_iter().cloned());
        grads.extend(g_dec_e);
        grads.extend(g_dec_m);
        let total = recon_ecg + recon_mri + objective.contrastive_weight * contrastive;
        Ok((
            LossBreakdown {
                recon_ecg,
                recon_mri,
                contrastive,
                total,
            },
            grads,
        ))
    }

    /// Loss over `subjects` scored in consecutive chunks of `batch_size`
    /// (in the given order), averaged with chunk-size weights.
    pub fn evaluate(
        &self,
        subjects: &[&SubjectRecord],
        batch_size: usize,
        objective: Objective,
    ) -> Result<LossBreakdown> {
        if subjects.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let mut acc = LossBreakdown::default();
        for chunk in subjects.chunks(batch_size.max(1)) {
            let batch = PairedBatch::from_subjects(chunk)?;
            acc = acc.add(self.loss(&batch, objective)?.weighted(chunk.len() as f64));
        }
        Ok(acc.weighted(1.0 / subjects.len() as f64))
    }
}

impl CrossModalAe<f32> {
    pub fn encode(&self, sample: &[f32], m: Modality) -> Result<LatentVector> {
        if sample.len() != m.sample_len() {
            return Err(Error::invalid(format!(
                "{} sample must have {} values, got {}",
                m.as_str(),
                m.sample_len(),
                sample.len()
            )));
        }
        let x = DenseTensor::new(vec![1, sample.len()], sample.to_vec())?;
        let z = self.encode_batch(&x, m)?;
        LatentVector::new(z.into_data(), m.into())
    }

    pub fn decode(&self, z: &LatentVector, m: Modality) -> Result<Vec<f32>> {
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "latent vector".into(),
            });
        }
        if z.dim() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent vector has {} values, model expects {}",
                z.dim(),
                self.latent_dim()
            )));
        }
        let x = DenseTensor::new(vec![1, z.dim()], z.values.clone())?;
        Ok(self.decode_batch(&x, m)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; zero for epoch 0.
    pub train_loss: f64,
    pub validation: LossBreakdown,
}

/// Result of a training run: best weights and the validation trace.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: CrossModalAe<f32>,
    pub config: TrainConfig,
    pub epoch_of_best: usize,
    pub validation_loss_at_best: f64,
    /// Epoch 0 is the untrained network.
    pub history: Vec<EpochRecord>,
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    train_with_observer(dataset, config, |_| {})
}

/// Trains with ADAM and early stopping on validation loss. `observer` sees
/// every evaluated epoch, including the initial one.
pub fn train_with_observer(
    dataset: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    config.validate()?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Validation);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let objective = config.objective();
    let mut model = CrossModalAe::<f32>::init(config)?;
    let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|p| p.shape().to_vec()).collect();
    let mut adam = AdamState::<f32>::new(
        AdamConfig::with_lr(config.lr),
        model
            .parameter_names()
            .into_iter()
            .zip(shapes.iter().map(Vec::as_slice)),
    )?;

    let initial = model.evaluate(&val_set, config.batch_size, objective)?;
    if !initial.total.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            batch: 0,
            message: "initial validation loss is not finite".into(),
        });
    }
    let first = EpochRecord {
        epoch: 0,
        train_loss: 0.0,
        validation: initial,
    };
    observer(&first);
    let mut history = vec![first];
    let mut best = (model.clone(), 0usize, initial.total);
    let mut since_best = 0usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let min_batch = if config.contrastive_weight > 0.0 { 2 } else { 1 };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < min_batch {
                continue;
            }
            let members: Vec<&SubjectRecord> = idx.iter().map(|&i| train_set[i]).collect();
            let batch = PairedBatch::from_subjects(&members)?;
            let (loss, grads) = model.loss_and_gradients(&batch, objective)?;
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    message: format!("loss became {}", loss.total),
                });
            }
            let grad_refs: Vec<&DenseTensor<f32>> = grads.iter().collect();
            adam.step(&mut model.parameters_mut(), &grad_refs)
                .map_err(|e| Error::Training {
                    epoch,
                    batch: bi,
                    message: e.to_string(),
                })?;
            loss_sum += loss.total * idx.len() as f64;
            seen += idx.len();
        }
        let validation = model.evaluate(&val_set, config.batch_size, objective)?;
        if !validation.total.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                message: "validation loss is not finite".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            validation,
        };
        observer(&record);
        history.push(record);
        if validation.total < best.2 {
            best = (model.clone(), epoch, validation.total);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (model, epoch_of_best, validation_loss_at_best) = best;
    Ok(TrainedModel {
        model,
        config: config.clone(),
        epoch_of_best,
        validation_loss_at_best,
        history,
    })
}
