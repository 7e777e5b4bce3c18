//! Self-describing JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatteModel, ModelConfig, ModelError, Param, ParamStore, Result};
use crate::relalgebra::MetaRelation;

const FORMAT: &str = "latte-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    node_types: Vec<String>,
    input_dims: Vec<usize>,
    attributed: Vec<bool>,
    counts: Vec<usize>,
    target_type: usize,
    num_classes: usize,
    relations: Vec<Vec<MetaRelation>>,
    params: Vec<Param>,
}

impl LatteModel {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: FORMAT.into(),
            config: self.config.clone(),
            node_types: self.type_names.clone(),
            input_dims: self.input_dims.clone(),
            attributed: self.attributed.clone(),
            counts: self.counts.clone(),
            target_type: self.target_type,
            num_classes: self.num_classes,
            relations: (0..self.layers.len())
                .map(|l| self.relations(l).into_iter().cloned().collect())
                .collect(),
            params: self.params.iter().cloned().collect(),
        };
        serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format != FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        let mut model = LatteModel::assemble(
            file.config,
            file.node_types,
            file.input_dims,
            file.attributed,
            file.counts,
            file.target_type,
            file.num_classes,
            file.relations,
            0,
        )?;
        let stored = ParamStore::from_vec(file.params);
        if stored.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} stored parameters, structure needs {}",
                stored.len(),
                model.params.len()
            )));
        }
        let mut values = Vec::with_capacity(stored.len());
        for p in model.params.iter() {
            let s = stored
                .by_name(&p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if s.value.shape() != p.value.shape() || s.kind != p.kind {
                return Err(ModelError::Checkpoint(format!("parameter {} has the wrong shape or kind", p.name)));
            }
            values.push(s.value.clone());
        }
        model.params.set_values(values);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
