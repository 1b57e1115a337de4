use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use xmodal_core::latent::Samples;
use xmodal_core::synth::{Modality, ECG_LEADS, ECG_SAMPLES, MRI_SIDE};

use crate::error::ApiError;

pub const SAMPLE_DTYPE: &str = "f32le";

/// A sample on the wire: base64 of its little-endian f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

pub fn sample_shape(m: Modality) -> Vec<usize> {
    match m {
        Modality::Mri => vec![MRI_SIDE, MRI_SIDE],
        Modality::Ecg => vec![ECG_LEADS, ECG_SAMPLES],
    }
}

impl EncodedSample {
    pub fn new(m: Modality, values: &[f32]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: sample_shape(m),
            dtype: SAMPLE_DTYPE.to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>, ApiError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| ApiError::bad_request(format!("sample is not valid base64: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if self.dtype != SAMPLE_DTYPE || bytes.len() != 4 * expected {
            return Err(ApiError::bad_request(format!(
                "expected {expected} {SAMPLE_DTYPE} values, got {} bytes of {}",
                bytes.len(),
                self.dtype
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub type EncodedSamples = std::collections::BTreeMap<Modality, EncodedSample>;

pub fn encode_samples(samples: &Samples) -> EncodedSamples {
    samples.iter().map(|(&m, v)| (m, EncodedSample::new(m, v))).collect()
}
