//! Versioned JSON checkpoints.
//!
//! Parameters are stored as a flat name → array map. Floats are written in
//! shortest round-trip form and parsed exactly, so a loaded model reproduces
//! the saved one's forwards bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, HeadMode};
use crate::datagen::PredicatePrior;
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::models::sgtr::AlignLayers;
use crate::models::{AnyModel, EvalMode, MiniMotifs, MiniSgtr, MotifsDims, SceneGraphModel, SgtrDims};
use crate::params::{Mat, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model skeleton before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    MiniSgtr { dims: SgtrDims, head_mode: HeadMode, align_layers: AlignLayers },
    MiniMotifs { dims: MotifsDims, head_mode: HeadMode, prior: PredicatePrior, detector_trained: bool },
}

impl ModelSpec {
    pub fn of(model: &AnyModel) -> Self {
        match model {
            AnyModel::Sgtr(m) => ModelSpec::MiniSgtr { dims: m.dims, head_mode: m.head_mode, align_layers: m.align_layers },
            AnyModel::Motifs(m) => ModelSpec::MiniMotifs {
                dims: m.dims,
                head_mode: m.head_mode,
                prior: m.prior().clone(),
                detector_trained: m.detector.trained,
            },
        }
    }

    /// Skeleton with freshly initialised weights.
    pub fn build(&self) -> AnyModel {
        match self {
            ModelSpec::MiniSgtr { dims, head_mode, align_layers } => {
                let mut m = MiniSgtr::new(*dims, *head_mode, 0);
                m.align_layers = *align_layers;
                AnyModel::Sgtr(m)
            }
            ModelSpec::MiniMotifs { dims, head_mode, prior, detector_trained } => {
                let mut m = MiniMotifs::new(*dims, prior.clone(), *head_mode, 0);
                m.detector.trained = *detector_trained;
                AnyModel::Motifs(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub corpus_hash: String,
    pub align: AlignConfig,
    pub mask: MaskConfig,
    pub mode: EvalMode,
    pub iteration: usize,
    pub model: ModelSpec,
    pub params: BTreeMap<String, StoredArray>,
}

impl Checkpoint {
    pub fn capture(model: &AnyModel, corpus_hash: &str, align: AlignConfig, mask: MaskConfig, mode: EvalMode, iteration: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            corpus_hash: corpus_hash.to_string(),
            align,
            mask,
            mode,
            iteration,
            model: ModelSpec::of(model),
            params: store_to_map(model.store()),
        }
    }

    pub fn restore(&self) -> Result<AnyModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = self.model.build();
        load_map_into(model.store_mut(), &self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }
}

pub fn store_to_map(store: &ParamStore) -> BTreeMap<String, StoredArray> {
    store
        .entries()
        .map(|(_, e)| {
            let (r, c) = e.value.dim();
            (e.name.clone(), StoredArray { shape: [r, c], data: e.value.iter().copied().collect(), frozen: e.frozen })
        })
        .collect()
}

/// Overwrites every parameter of `store` from `map`; names and shapes must
/// match exactly.
pub fn load_map_into(store: &mut ParamStore, map: &BTreeMap<String, StoredArray>) -> Result<()> {
    if map.len() != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} arrays, model expects {}", map.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let arr = map.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let m = Mat::from_shape_vec((arr.shape[0], arr.shape[1]), arr.data.clone())
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if m.dim() != store.get(id).dim() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", m.dim(), store.get(id).dim())));
        }
        *store.get_mut(id) = m;
        if arr.frozen {
            store.freeze(id);
        }
    }
    Ok(())
}
