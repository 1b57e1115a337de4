use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use xmodal_core::checkpoint::ModelCheckpoint;
use xmodal_core::cohort::GroupRegistry;
use xmodal_core::downstream::{default_phenotypes, fit_heads, FittedHeads};
use xmodal_core::latent::{LatentSource, LatentTable};
use xmodal_core::synth::{Dataset, Modality};
use xmodal_core::tsne::{tsne_fit, Embedding2D, TsneConfig};
use xmodal_core::{Error, Result};

pub type Embeddings = BTreeMap<Modality, Embedding2D>;

/// t-SNE layouts of every subject's per-modality latent.
pub fn compute_embeddings(table: &LatentTable, ids: &[u64], config: &TsneConfig) -> Result<Embeddings> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| {
                scope.spawn(move || -> Result<(Modality, Embedding2D)> {
                    let source = LatentSource::from(m);
                    let emb = tsne_fit(&table.rows_f64(source), config)?
                        .with_ids(ids.to_vec())?
                        .with_source(source.origin());
                    Ok((m, emb))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("t-SNE worker panicked"))
            .collect()
    })
}

pub fn save_embeddings(embeddings: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec(embeddings)?)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Everything the API serves. Only the group registry changes after startup.
#[derive(Debug)]
pub struct SessionState {
    pub dataset: Dataset,
    pub checkpoint: ModelCheckpoint,
    pub table: LatentTable,
    pub embeddings: Embeddings,
    pub heads: FittedHeads,
    groups: RwLock<GroupRegistry>,
}

impl SessionState {
    /// Verifies the checkpoint against the dataset, then fills in whatever
    /// is missing: heads when the checkpoint has none, layouts when
    /// `embeddings` is `None`.
    pub fn new(dataset: Dataset, checkpoint: ModelCheckpoint, embeddings: Option<Embeddings>) -> Result<Self> {
        checkpoint.verify(&dataset)?;
        let table = LatentTable::compute(&checkpoint.model, &dataset)?;
        let heads = match &checkpoint.heads {
            Some(h) => h.clone(),
            None => fit_heads(&table, &dataset, &default_phenotypes())?,
        };
        if heads.latent_dim != table.dim() {
            return Err(Error::Contract(format!(
                "heads expect {} latent values, model produces {}",
                heads.latent_dim,
                table.dim()
            )));
        }
        let ids = dataset.ids();
        let embeddings = match embeddings {
            Some(e) => e,
            None => compute_embeddings(&table, &ids, &TsneConfig::default())?,
        };
        for m in Modality::ALL {
            let emb = embeddings
                .get(&m)
                .ok_or_else(|| Error::Contract(format!("no {} embedding", m.as_str())))?;
            if emb.ids != ids || emb.points.len() != ids.len() {
                return Err(Error::Contract(format!(
                    "{} embedding does not cover the loaded subjects",
                    m.as_str()
                )));
            }
        }
        Ok(Self {
            dataset,
            checkpoint,
            table,
            embeddings,
            heads,
            groups: RwLock::new(GroupRegistry::new()),
        })
    }

    pub fn load(dataset_dir: impl AsRef<Path>, checkpoint: impl AsRef<Path>, embeddings: Option<&Path>) -> Result<Self> {
        let dataset = Dataset::load(dataset_dir)?;
        let checkpoint = ModelCheckpoint::load(checkpoint)?;
        let embeddings = embeddings.map(load_embeddings).transpose()?;
        Self::new(dataset, checkpoint, embeddings)
    }

    pub fn groups(&self) -> RwLockReadGuard<'_, GroupRegistry> {
        self.groups.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn groups_mut(&self) -> RwLockWriteGuard<'_, GroupRegistry> {
        self.groups.write().unwrap_or_else(|e| e.into_inner())
    }
}
