//! WebAssembly bindings for a single-page demo. A small cohort is generated
//! and a small autoencoder trained in the page; the page then renders
//! samples from generating factors, interpolates between two subjects and
//! perturbs one latent dimension.

use wasm_bindgen::prelude::*;
use xmodal_core::ae::{self, CrossModalAe, LatentVector, TrainConfig};
use xmodal_core::latent::{self, LatentSource, LatentTable, PerturbationRequest};
use xmodal_core::synth::{self, generate_cohort, Dataset, GroundTruthFactors, Modality};

fn js(err: xmodal_core::Error) -> JsError {
    JsError::new(&err.to_string())
}

/// Factors chosen on the page's sliders; the rest keep their defaults.
pub fn factors(heart_scale: f32, heart_rate: f32, wall_thickness: f32, axis_deg: f32, sphericity: f32) -> GroundTruthFactors {
    GroundTruthFactors {
        heart_scale,
        heart_rate,
        wall_thickness,
        axis_deg,
        sphericity,
        ..GroundTruthFactors::default()
    }
    .clamped()
}

/// Noise-free 32x32 MRI slice for the given factors, row-major in [0, 1].
#[wasm_bindgen]
pub fn render_mri(heart_scale: f32, heart_rate: f32, wall_thickness: f32, axis_deg: f32, sphericity: f32) -> Vec<f32> {
    let f = factors(heart_scale, heart_rate, wall_thickness, axis_deg, sphericity);
    synth::render_mri_with_noise(&f, 0.0)
}

/// Noise-free 4x256 ECG for the given factors, lead-major.
#[wasm_bindgen]
pub fn render_ecg(heart_scale: f32, heart_rate: f32, wall_thickness: f32, axis_deg: f32, sphericity: f32) -> Vec<f32> {
    let f = factors(heart_scale, heart_rate, wall_thickness, axis_deg, sphericity);
    synth::render_ecg_with_noise(&f, 0.0)
}

/// Bright-pixel count of an MRI slice, the demo's chamber-size readout.
#[wasm_bindgen]
pub fn mri_area(image: &[f32]) -> usize {
    synth::bright_area(image)
}

#[wasm_bindgen]
pub struct Explorer {
    dataset: Dataset,
    model: CrossModalAe<f32>,
    table: LatentTable,
}

impl Explorer {
    pub fn train(n: usize, seed: u64, epochs: usize) -> xmodal_core::Result<Self> {
        let dataset = generate_cohort(n, seed)?;
        let config = TrainConfig {
            hidden_width: 64,
            max_epochs: epochs,
            patience: epochs.max(1),
            seed,
            ..TrainConfig::default()
        };
        let model = ae::train(&dataset, &config)?.model;
        let table = LatentTable::compute(&model, &dataset)?;
        Ok(Self { dataset, model, table })
    }

    fn fused(&self, id: u64) -> xmodal_core::Result<LatentVector> {
        self.table.vector(id, LatentSource::Fused)
    }

    pub fn interpolate(&self, a: u64, b: u64, t: f32, m: Modality) -> xmodal_core::Result<Vec<f32>> {
        let out = latent::interpolate(&self.model, &self.fused(a)?, &self.fused(b)?, t, &[m])?;
        Ok(out.samples[&m].clone())
    }

    pub fn perturb(&self, id: u64, dimension: usize, value: f32, m: Modality) -> xmodal_core::Result<Vec<f32>> {
        let request = PerturbationRequest {
            base: self.fused(id)?,
            dimension,
            value,
        };
        let out = latent::perturb(&self.model, self.table.display_range(), &request, &[m])?;
        Ok(out.perturbed_samples[&m].clone())
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }
}

fn modality(name: &str) -> Result<Modality, JsError> {
    Modality::ALL
        .into_iter()
        .find(|m| m.as_str() == name)
        .ok_or_else(|| JsError::new(&format!("unknown modality {name:?}; use \"ecg\" or \"mri\"")))
}

#[wasm_bindgen]
impl Explorer {
    /// Generates `n` subjects and trains for at most `epochs` epochs.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u64, epochs: usize) -> Result<Explorer, JsError> {
        Self::train(n, seed, epochs).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.dataset.len()
    }

    #[wasm_bindgen(getter)]
    pub fn latent_dim(&self) -> usize {
        self.table.dim()
    }

    /// Slider limits: the perturbation range of every latent dimension.
    #[wasm_bindgen(getter)]
    pub fn display_range(&self) -> Vec<f32> {
        self.table.display_range().to_vec()
    }

    /// The subject's fused latent vector.
    pub fn latent(&self, id: u64) -> Result<Vec<f32>, JsError> {
        Ok(self.fused(id).map_err(js)?.values)
    }

    pub fn heart_scale(&self, id: u64) -> Result<f32, JsError> {
        let s = self.dataset.get(id).ok_or_else(|| JsError::new(&format!("unknown subject {id}")))?;
        Ok(s.factors.heart_scale)
    }

    /// Recorded sample of one subject.
    pub fn sample(&self, id: u64, modality_name: &str) -> Result<Vec<f32>, JsError> {
        let m = modality(modality_name)?;
        let s = self.dataset.get(id).ok_or_else(|| JsError::new(&format!("unknown subject {id}")))?;
        Ok(s.sample(m).to_vec())
    }

    /// Decodes `(1 - t) * z_a + t * z_b` from the subjects' fused latents.
    #[wasm_bindgen(js_name = interpolate)]
    pub fn interpolate_js(&self, a: u64, b: u64, t: f32, modality_name: &str) -> Result<Vec<f32>, JsError> {
        self.interpolate(a, b, t, modality(modality_name)?).map_err(js)
    }

    /// Decodes the subject's fused latent with one coordinate replaced.
    #[wasm_bindgen(js_name = perturb)]
    pub fn perturb_js(&self, id: u64, dimension: usize, value: f32, modality_name: &str) -> Result<Vec<f32>, JsError> {
        self.perturb(id, dimension, value, modality(modality_name)?).map_err(js)
    }
}
