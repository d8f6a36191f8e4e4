//! Checkpoint directory: `manifest` (key=value), `model.json`, one `<group>.bin` per
//! parameter group. Loading rebuilds the architecture from `model.json` and refuses
//! to continue when its hash or the stored content checksum disagree.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, MtlModel};
use crate::curriculum::{log_kernel, LoGKernel};
use crate::error::{Error, Result};
use crate::fsio;
use crate::params::ParamGroup;
use crate::tensor::Tensor;

const FORMAT: &str = "scene-mtl-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub regime: String,
    pub phase: String,
    pub epoch: usize,
    /// Curriculum σ in force when the weights were saved; `None` once filtering is off.
    pub sigma: Option<f64>,
    /// Kernel radius that goes with `sigma`.
    pub radius: usize,
}

impl CheckpointMeta {
    /// The curriculum kernel the weights were evaluated with.
    pub fn kernel(&self) -> Result<Option<LoGKernel>> {
        self.sigma.map(|s| log_kernel(s, self.radius)).transpose()
    }
}

fn group_file(group: ParamGroup) -> String {
    format!("{}.bin", group.as_str())
}

pub fn save_checkpoint(model: &MtlModel, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fsio::create_dir_all(dir)?;
    let mut digest = Sha256::new();
    for group in ParamGroup::ALL {
        let ids = model.store.ids_in(group);
        let mut buf = Vec::new();
        buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            fsio::encode_tensor(model.store.value(id), &mut buf);
        }
        digest.update(&buf);
        fsio::write_atomic(&dir.join(group_file(group)), &buf)?;
    }
    fsio::write_atomic(&dir.join("model.json"), &serde_json::to_vec_pretty(&model.config)?)?;
    let mut m = BTreeMap::new();
    m.insert("format".into(), FORMAT.to_string());
    m.insert("arch_hash".into(), model.arch_hash());
    m.insert("content_sha256".into(), hex::encode(digest.finalize()));
    m.insert("label".into(), meta.label.clone());
    m.insert("regime".into(), meta.regime.clone());
    m.insert("phase".into(), meta.phase.clone());
    m.insert("epoch".into(), meta.epoch.to_string());
    m.insert("radius".into(), meta.radius.to_string());
    m.insert("sigma".into(), meta.sigma.map_or_else(|| "none".to_string(), |s| format!("{s:?}")));
    fsio::write_atomic(&dir.join("manifest"), fsio::format_kv(&m).as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(MtlModel, CheckpointMeta)> {
    let mpath = dir.join("manifest");
    let m = fsio::parse_kv(&mpath, &fsio::read_string(&mpath)?)?;
    let corrupt = |p: &Path, msg: String| Error::Corrupt { path: p.to_path_buf(), message: msg };
    if fsio::kv_get(&mpath, &m, "format")? != FORMAT {
        return Err(corrupt(&mpath, "unknown checkpoint format".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&fsio::read(&dir.join("model.json"))?)?;
    let skeleton = MtlModel::new(config.clone(), 0)?;
    let expected = fsio::kv_get(&mpath, &m, "arch_hash")?;
    let found = skeleton.arch_hash();
    if expected != found {
        return Err(Error::ArchitectureMismatch { expected: expected.to_string(), found });
    }

    let mut digest = Sha256::new();
    let mut per_group: BTreeMap<ParamGroup, std::vec::IntoIter<Tensor>> = BTreeMap::new();
    for group in ParamGroup::ALL {
        let path = dir.join(group_file(group));
        let bytes = fsio::read(&path)?;
        digest.update(&bytes);
        let count = bytes.get(..4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
        let count = count.ok_or_else(|| corrupt(&path, "truncated group file".into()))?;
        let mut pos = 4;
        let mut ts = Vec::with_capacity(count);
        for _ in 0..count {
            ts.push(fsio::decode_tensor(&path, &bytes, &mut pos)?);
        }
        if pos != bytes.len() {
            return Err(corrupt(&path, "trailing bytes".into()));
        }
        per_group.insert(group, ts.into_iter());
    }
    if fsio::kv_get(&mpath, &m, "content_sha256")? != hex::encode(digest.finalize()) {
        return Err(corrupt(&mpath, "parameter checksum mismatch".into()));
    }
    let mut values = Vec::with_capacity(skeleton.store.len());
    for (_, p) in skeleton.store.iter() {
        let t = per_group
            .get_mut(&p.group)
            .and_then(Iterator::next)
            .ok_or_else(|| corrupt(dir, format!("missing parameter {}", p.name)))?;
        values.push(t);
    }
    let model = MtlModel::with_values(config, values).map_err(|e| corrupt(dir, e.to_string()))?;
    let sigma = match fsio::kv_get(&mpath, &m, "sigma")? {
        "none" => None,
        s => Some(s.parse().map_err(|_| corrupt(&mpath, format!("bad sigma `{s}`")))?),
    };
    let meta = CheckpointMeta {
        label: fsio::kv_get(&mpath, &m, "label")?.to_string(),
        regime: fsio::kv_get(&mpath, &m, "regime")?.to_string(),
        phase: fsio::kv_get(&mpath, &m, "phase")?.to_string(),
        epoch: fsio::kv_parse(&mpath, &m, "epoch")?,
        sigma,
        radius: fsio::kv_parse(&mpath, &m, "radius")?,
    };
    Ok((model, meta))
}
