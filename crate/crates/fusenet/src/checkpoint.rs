//! Parameter checkpoints. Same framing as VGR with magic `b"FCK1"`: the JSON
//! header carries free-form metadata plus the tensor directory, and the
//! payload is every tensor's f32 values in directory order.

use std::fs;
use std::path::Path;

use fusenet_core::clf3d::{ClassifierConfig, ClassifierModel, FusionMode};
use fusenet_core::fusion::{DyFAAggregator, SelectionReport};
use fusenet_core::gradnet::{ParamStore, Real, Shape};
use fusenet_core::segnet::{SegNetConfig, SegNetModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGroup {
    pub name: String,
    pub frozen: bool,
    pub tensors: Vec<(String, Shape, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub groups: Vec<TensorGroup>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    frozen_groups: Vec<String>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self { meta, groups: Vec::new() }
    }

    pub fn with_store<T: Real>(mut self, group: &str, store: &ParamStore<T>) -> Self {
        self.groups.push(TensorGroup { name: group.into(), frozen: store.all_frozen() && !store.is_empty(), tensors: store.export_values() });
        self
    }

    pub fn group(&self, name: &str) -> Option<&TensorGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Overwrites `store` from the named group and restores its frozen state.
    pub fn load_into<T: Real>(&self, group: &str, store: &mut ParamStore<T>) -> Result<()> {
        let g = self.group(group).ok_or_else(|| Error::MissingArtifacts(format!("checkpoint group {group}")))?;
        store.load_values(&g.tensors)?;
        if g.frozen {
            store.freeze_all();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            frozen_groups: self.groups.iter().filter(|g| g.frozen).map(|g| g.name.clone()).collect(),
            tensors: self
                .groups
                .iter()
                .flat_map(|g| g.tensors.iter().map(|(n, s, _)| Entry { group: g.name.clone(), name: n.clone(), shape: *s }))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for g in &self.groups {
            for (_, _, values) in &g.tensors {
                out.extend(values.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::HeaderMismatch("truncated checkpoint".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
        let json = bytes.get(8..8 + h).ok_or_else(|| Error::HeaderMismatch("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut payload = &bytes[8 + h..];
        let mut groups: Vec<TensorGroup> = Vec::new();
        for e in header.tensors {
            let n = fusenet_core::gradnet::numel(e.shape) * 4;
            if payload.len() < n {
                return Err(Error::HeaderMismatch(format!("payload ends inside {}", e.name)));
            }
            let values = payload[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            payload = &payload[n..];
            if groups.last().is_none_or(|g| g.name != e.group) {
                let frozen = header.frozen_groups.contains(&e.group);
                groups.push(TensorGroup { name: e.group.clone(), frozen, tensors: Vec::new() });
            }
            groups.last_mut().expect("pushed").tensors.push((e.name, e.shape, values));
        }
        if !payload.is_empty() {
            return Err(Error::HeaderMismatch(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self { meta: header.meta, groups })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::vgr::write_bytes(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        Self::from_bytes(&fs::read(p).map_err(|e| Error::io(p, e))?)
    }
}

pub fn segnet_checkpoint<T: Real>(model: &SegNetModel<T>) -> Result<Checkpoint> {
    let meta = serde_json::json!({ "kind": "segnet", "config": model.config });
    Ok(Checkpoint::new(meta).with_store("segnet", &model.store))
}

pub fn load_segnet(ckpt: &Checkpoint) -> Result<SegNetModel<f32>> {
    if ckpt.meta["kind"] != "segnet" {
        return Err(Error::HeaderMismatch("not a segnet checkpoint".into()));
    }
    let config: SegNetConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
    let mut model = SegNetModel::new(config, 0)?;
    ckpt.load_into("segnet", &mut model.store)?;
    Ok(model)
}

/// A trained classifier together with everything inference needs besides
/// the segnet.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub mode: FusionMode,
    pub model: ClassifierModel<f32>,
    pub aggregator: Option<DyFAAggregator<f32>>,
    pub selection: SelectionReport,
    pub steps: u64,
}

impl ClassifierBundle {
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "classifier",
            "mode": self.mode,
            "config": self.model.config,
            "selection": self.selection,
            "steps": self.steps,
        });
        let mut ck = Checkpoint::new(meta).with_store("classifier", &self.model.store);
        if let Some(a) = &self.aggregator {
            ck = ck.with_store("aggregator", &a.store);
        }
        ck
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta["kind"] != "classifier" {
            return Err(Error::HeaderMismatch("not a classifier checkpoint".into()));
        }
        let mode: FusionMode = serde_json::from_value(ckpt.meta["mode"].clone())?;
        let config: ClassifierConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let selection: SelectionReport = serde_json::from_value(ckpt.meta["selection"].clone())?;
        let steps = ckpt.meta["steps"].as_u64().unwrap_or(0);
        let mut model = ClassifierModel::new(config, 0)?;
        ckpt.load_into("classifier", &mut model.store)?;
        let aggregator = match mode {
            FusionMode::Dyfa => {
                let mut a = DyFAAggregator::new(selection.selected.len())?;
                ckpt.load_into("aggregator", &mut a.store)?;
                Some(a)
            }
            _ => None,
        };
        Ok(Self { mode, model, aggregator, selection, steps })
    }
}
