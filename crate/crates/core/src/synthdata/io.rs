//! On-disk layout: `manifest` (key=value), `config.json`, and per frame
//! `frames/NNNNN.bin` (image tensor) plus `frames/NNNNN.json` (nodes, edges, caption).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetConfig, Domain, DomainShiftSpec, Edge, Node, SceneDataset, SceneInstance};
use crate::error::{Error, Result};
use crate::fsio;

const FORMAT: &str = "scene-mtl-dataset/1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: DatasetConfig,
    shift: Option<DomainShiftSpec>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    caption: Vec<usize>,
}

pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fsio::create_dir_all(&frames_dir)?;
    for (pos, f) in ds.frames.iter().enumerate() {
        let mut bin = Vec::new();
        fsio::encode_tensor(&f.image, &mut bin);
        fsio::write_atomic(&frames_dir.join(format!("{pos:05}.bin")), &bin)?;
        let side = Sidecar { id: f.id, nodes: f.nodes.clone(), edges: f.edges.clone(), caption: f.caption.clone() };
        fsio::write_atomic(&frames_dir.join(format!("{pos:05}.json")), &serde_json::to_vec(&side)?)?;
    }
    let header = Header { config: ds.config.clone(), shift: ds.shift.clone() };
    fsio::write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&header)?)?;

    let mut m = BTreeMap::new();
    m.insert("format".to_string(), FORMAT.to_string());
    m.insert("seed".to_string(), ds.seed.to_string());
    m.insert("domain".to_string(), ds.domain.as_str().to_string());
    m.insert("config_hash".to_string(), ds.config.config_hash());
    m.insert("n_frames".to_string(), ds.len().to_string());
    m.insert("n_train".to_string(), ds.train.len().to_string());
    m.insert("n_val".to_string(), ds.val.len().to_string());
    m.insert("train".to_string(), fsio::format_indices(&ds.train));
    m.insert("val".to_string(), fsio::format_indices(&ds.val));
    fsio::write_atomic(&dir.join("manifest"), fsio::format_kv(&m).as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let mpath = dir.join("manifest");
    let m = fsio::parse_kv(&mpath, &fsio::read_string(&mpath)?)?;
    let corrupt = |msg: String| Error::Corrupt { path: mpath.clone(), message: msg };
    if fsio::kv_get(&mpath, &m, "format")? != FORMAT {
        return Err(corrupt("unknown dataset format".into()));
    }
    let header: Header = serde_json::from_slice(&fsio::read(&dir.join("config.json"))?)?;
    if fsio::kv_get(&mpath, &m, "config_hash")? != header.config.config_hash() {
        return Err(corrupt("config hash does not match config.json".into()));
    }
    let domain = Domain::parse(fsio::kv_get(&mpath, &m, "domain")?).ok_or_else(|| corrupt("bad domain".into()))?;
    let n: usize = fsio::kv_parse(&mpath, &m, "n_frames")?;
    let train = fsio::parse_indices(&mpath, fsio::kv_get(&mpath, &m, "train")?)?;
    let val = fsio::parse_indices(&mpath, fsio::kv_get(&mpath, &m, "val")?)?;
    if train.len() != fsio::kv_parse::<usize>(&mpath, &m, "n_train")?
        || val.len() != fsio::kv_parse::<usize>(&mpath, &m, "n_val")?
        || train.iter().chain(&val).any(|&i| i >= n)
    {
        return Err(corrupt("split indices disagree with counts".into()));
    }

    let frames_dir = dir.join("frames");
    let mut frames = Vec::with_capacity(n);
    for pos in 0..n {
        let bpath = frames_dir.join(format!("{pos:05}.bin"));
        let bytes = fsio::read(&bpath)?;
        let mut at = 0;
        let image = fsio::decode_tensor(&bpath, &bytes, &mut at)?;
        let side: Sidecar = serde_json::from_slice(&fsio::read(&frames_dir.join(format!("{pos:05}.json")))?)?;
        let frame = SceneInstance { id: side.id, image, nodes: side.nodes, edges: side.edges, caption: side.caption };
        frame.validate(&header.config).map_err(|e| Error::Corrupt { path: bpath.clone(), message: e.to_string() })?;
        frames.push(frame);
    }
    Ok(SceneDataset {
        config: header.config,
        seed: fsio::kv_parse(&mpath, &m, "seed")?,
        domain,
        frames,
        train,
        val,
        shift: header.shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, split_domains};

    #[test]
    fn round_trip_is_bitwise() {
        let ds = generate_dataset(&DatasetConfig { n_frames: 30, ..Default::default() }, 21).unwrap();
        let (sd, td) = split_domains(&ds, &DomainShiftSpec::default(), 2).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        for (name, d) in [("full", &ds), ("sd", &sd), ("td", &td)] {
            let p = tmp.path().join(name);
            save_dataset(d, &p).unwrap();
            let back = load_dataset(&p).unwrap();
            assert!(back.bitwise_eq(d), "{name}");
        }
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let ds = generate_dataset(&DatasetConfig { n_frames: 3, ..Default::default() }, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_dataset(&ds, tmp.path()).unwrap();
        let mp = tmp.path().join("manifest");
        let text = std::fs::read_to_string(&mp).unwrap().replace("n_frames=3", "n_frames=4");
        std::fs::write(&mp, text).unwrap();
        assert!(load_dataset(tmp.path()).is_err());
    }
}
