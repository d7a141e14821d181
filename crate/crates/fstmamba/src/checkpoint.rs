//! Checkpoint files: a multi-tensor container in double precision whose
//! header carries the model config, seed and step.

use std::path::Path;

use fstmamba_core::model::FstMamba;
use fstmamba_core::train::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Header, Kind, TensorEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: fstmamba_core::model::ModelConfig,
    seed: u64,
    step: usize,
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut header = Header::new(Kind::Checkpoint, &[]);
    header.atlas = ck.config.atlas.name.clone();
    header.provenance = "fstmamba checkpoint".into();
    header.tensors = ck.params.iter().map(|(n, t)| TensorEntry { name: n.clone(), dims: t.shape().to_vec() }).collect();
    header.meta = serde_json::to_value(CheckpointMeta { config: ck.config.clone(), seed: ck.config.seed, step: ck.step })?;
    let values = ck.params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    Container { header, values }.write(path)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let c = Container::read_kind(path, Kind::Checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(c.header.meta.clone())
        .map_err(|e| Error::Container { path: path.to_path_buf(), msg: format!("checkpoint manifest: {e}") })?;
    Ok(Checkpoint { config: meta.config, step: meta.step, params: c.named_tensors()? })
}

pub fn load_model(path: &Path) -> Result<FstMamba> {
    Ok(load(path)?.to_model()?)
}
