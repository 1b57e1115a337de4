//! `model.ckpt`: a 16-byte magic, a little-endian u64 header length, a JSON
//! header (network specs, training metadata, tensor directory) and the
//! concatenated little-endian f32 tensor blobs. Fitted phenotype heads are
//! an optional `heads` section using the same directory convention.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ae::{CrossModalAe, EpochRecord, TrainConfig, TrainedModel, NETWORK_NAMES};
use crate::downstream::{Condition, FittedHeads, HeadColumn, LinearHead, PhenotypeSpec};
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpSpec};
use crate::synth::{Dataset, Split};
use crate::tensor::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"XMODAL-AE-CKPT-1";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Allowed gap between the stored best validation loss and a re-evaluation.
pub const REVALIDATION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob region.
    offset: u64,
    /// Byte length (4 per element).
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    spec: MlpSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadColumnEntry {
    phenotype: PhenotypeSpec,
    skipped: Option<String>,
    metrics: Vec<Option<f64>>,
    /// Tensor name prefix per condition; `None` for unfitted heads.
    heads: Vec<Option<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadsSection {
    latent_dim: usize,
    columns: Vec<HeadColumnEntry>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    networks: Vec<NetworkEntry>,
    config: TrainConfig,
    epoch_of_best: usize,
    validation_loss_at_best: f64,
    dataset_fingerprint: String,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heads: Option<HeadsSection>,
}

/// Best weights of a training run plus everything needed to trust them.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: CrossModalAe<f32>,
    pub config: TrainConfig,
    pub epoch_of_best: usize,
    pub validation_loss_at_best: f64,
    pub dataset_fingerprint: String,
    pub history: Vec<EpochRecord>,
    pub heads: Option<FittedHeads>,
}

struct BlobWriter {
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) -> TensorEntry {
        let offset = self.blob.len() as u64;
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            name,
            shape,
            offset,
            length: 4 * data.len() as u64,
        }
    }
}

struct BlobReader<'a> {
    blob: &'a [u8],
    entries: HashMap<&'a str, &'a TensorEntry>,
}

impl<'a> BlobReader<'a> {
    fn new(blob: &'a [u8], tensors: &'a [TensorEntry]) -> Result<Self> {
        let mut entries = HashMap::new();
        for t in tensors {
            let elements: usize = t.shape.iter().product();
            let end = t.offset.checked_add(t.length);
            if t.length != 4 * elements as u64 || end.is_none_or(|e| e > blob.len() as u64) {
                return Err(Error::Format(format!(
                    "tensor {} has an inconsistent directory entry",
                    t.name
                )));
            }
            if entries.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Format(format!("tensor {} listed twice", t.name)));
            }
        }
        Ok(Self { blob, entries })
    }

    fn read(&self, name: &str) -> Result<DenseTensor<f32>> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let bytes = &self.blob[t.offset as usize..(t.offset + t.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        DenseTensor::new(t.shape.clone(), data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))
    }
}

fn head_prefix(phenotype: &str, condition: Condition) -> String {
    format!("heads.{phenotype}.{}", condition.as_str())
}

impl ModelCheckpoint {
    pub fn from_trained(trained: TrainedModel, dataset: &Dataset) -> Self {
        Self {
            model: trained.model,
            config: trained.config,
            epoch_of_best: trained.epoch_of_best,
            validation_loss_at_best: trained.validation_loss_at_best,
            dataset_fingerprint: dataset.fingerprint(),
            history: trained.history,
            heads: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut writer = BlobWriter { blob: Vec::new() };
        let tensors = self
            .model
            .parameter_names()
            .into_iter()
            .zip(self.model.parameters())
            .map(|(name, t)| writer.push(name, t.shape().to_vec(), t.data()))
            .collect();
        let heads = self.heads.as_ref().map(|fitted| {
            let mut head_tensors = Vec::new();
            let columns = fitted
                .columns
                .iter()
                .map(|col| HeadColumnEntry {
                    phenotype: col.phenotype.clone(),
                    skipped: col.skipped.clone(),
                    metrics: col.metrics.clone(),
                    heads: col
                        .heads
                        .iter()
                        .zip(Condition::ALL)
                        .map(|(h, cond)| {
                            h.as_ref().map(|h| {
                                let prefix = head_prefix(&col.phenotype.name, cond);
                                head_tensors.push(writer.push(
                                    format!("{prefix}.weights"),
                                    vec![h.weights.len()],
                                    &h.weights,
                                ));
                                head_tensors.push(writer.push(format!("{prefix}.bias"), vec![1], &[h.bias]));
                                prefix
                            })
                        })
                        .collect(),
                })
                .collect();
            HeadsSection {
                latent_dim: fitted.latent_dim,
                columns,
                tensors: head_tensors,
            }
        });
        let header = Header {
            networks: self
                .model
                .networks()
                .into_iter()
                .zip(NETWORK_NAMES)
                .map(|(n, name)| NetworkEntry {
                    name: name.to_string(),
                    spec: n.spec().clone(),
                })
                .collect(),
            config: self.config.clone(),
            epoch_of_best: self.epoch_of_best,
            validation_loss_at_best: self.validation_loss_at_best,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            history: self.history.clone(),
            tensors,
            heads,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + json.len() + writer.blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&writer.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..16] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic prefix)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let blob_start = 24u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("checkpoint header length exceeds the file".into()))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[24..blob_start])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob = &bytes[blob_start..];

        let names: Vec<&str> = header.networks.iter().map(|n| n.name.as_str()).collect();
        if names != NETWORK_NAMES {
            return Err(Error::Format(format!("unexpected networks {names:?}")));
        }
        let reader = BlobReader::new(blob, &header.tensors)?;
        let mut nets = Vec::with_capacity(4);
        for entry in &header.networks {
            let layers = entry.spec.n_layers();
            let weights = (0..layers)
                .map(|l| reader.read(&format!("{}.w{l}", entry.name)))
                .collect::<Result<Vec<_>>>()?;
            let biases = (0..layers)
                .map(|l| reader.read(&format!("{}.b{l}", entry.name)))
                .collect::<Result<Vec<_>>>()?;
            nets.push(
                Mlp::from_parts(entry.spec.clone(), weights, biases)
                    .map_err(|e| Error::Format(format!("network {}: {e}", entry.name)))?,
            );
        }
        let nets: [Mlp<f32>; 4] = nets.try_into().map_err(|_| Error::Format("expected 4 networks".into()))?;
        let model = CrossModalAe::from_networks(nets).map_err(|e| Error::Format(e.to_string()))?;

        let heads = match &header.heads {
            None => None,
            Some(section) => Some(Self::read_heads(blob, section)?),
        };
        Ok(Self {
            model,
            config: header.config,
            epoch_of_best: header.epoch_of_best,
            validation_loss_at_best: header.validation_loss_at_best,
            dataset_fingerprint: header.dataset_fingerprint,
            history: header.history,
            heads,
        })
    }

    fn read_heads(blob: &[u8], section: &HeadsSection) -> Result<FittedHeads> {
        let reader = BlobReader::new(blob, &section.tensors)?;
        let columns = section
            .columns
            .iter()
            .map(|col| {
                if col.heads.len() != Condition::ALL.len() || col.metrics.len() != Condition::ALL.len() {
                    return Err(Error::Format(format!(
                        "heads for {} must cover {} conditions",
                        col.phenotype.name,
                        Condition::ALL.len()
                    )));
                }
                let heads = col
                    .heads
                    .iter()
                    .map(|prefix| {
                        prefix
                            .as_ref()
                            .map(|p| {
                                let weights = reader.read(&format!("{p}.weights"))?;
                                let bias = reader.read(&format!("{p}.bias"))?;
                                if weights.len() != section.latent_dim || bias.len() != 1 {
                                    return Err(Error::Format(format!("head {p} has the wrong shape")));
                                }
                                Ok(LinearHead {
                                    kind: col.phenotype.kind,
                                    weights: weights.into_data(),
                                    bias: bias.data()[0],
                                })
                            })
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(HeadColumn {
                    phenotype: col.phenotype.clone(),
                    skipped: col.skipped.clone(),
                    heads,
                    metrics: col.metrics.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FittedHeads {
            latent_dim: section.latent_dim,
            columns,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Validation loss of the stored weights, scored exactly as in training.
    pub fn revalidate(&self, dataset: &Dataset) -> Result<f64> {
        let val = dataset.split(Split::Validation);
        Ok(self
            .model
            .evaluate(&val, self.config.batch_size, self.config.objective())?
            .total)
    }

    /// Checks the dataset fingerprint and replays the stored validation loss.
    pub fn verify(&self, dataset: &Dataset) -> Result<()> {
        let fingerprint = dataset.fingerprint();
        if fingerprint != self.dataset_fingerprint {
            return Err(Error::Contract(format!(
                "checkpoint was trained on dataset {}, loaded dataset is {}",
                self.dataset_fingerprint, fingerprint
            )));
        }
        let replay = self.revalidate(dataset)?;
        if (replay - self.validation_loss_at_best).abs() > REVALIDATION_TOLERANCE {
            return Err(Error::Contract(format!(
                "stored validation loss {} but re-evaluation gives {replay}",
                self.validation_loss_at_best
            )));
        }
        Ok(())
    }
}
