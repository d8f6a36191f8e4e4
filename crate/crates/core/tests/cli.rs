use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "
seed=3
dataset.sd_frames=8
dataset.td_frames=8
model.crop_size=16
model.channels=4,8
model.d_model=16
model.n_memory=2
model.n_enc=1
model.n_dec=1
model.ffn_dim=16
model.semantic_dim=8
model.graph_hidden=16
model.edge_hidden=8
curriculum.radius=1
regime.pretrain.epochs=1
regime.caption.epochs=1
regime.scenegraph.epochs=1
regime.finetune.epochs=1
regime.joint.epochs=1
regime.adapt.epochs=1
regime.warmup_steps=4
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scene-mtl")).args(args).output().expect("spawn scene-mtl")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.d_modle=16\n");
    let out = cli(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_modle"));
}

#[test]
fn bad_regime_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = cli(&["train", "--config", &cfg, "--regime", "MTL_X", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = cli(&["gen-data", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["sd", "td"] {
        let files = files_under(&a.join(sub));
        assert!(!files.is_empty());
        for rel in files {
            assert_eq!(fs::read(a.join(sub).join(&rel)).unwrap(), fs::read(b.join(sub).join(&rel)).unwrap(), "{sub}/{} differs", rel.display());
        }
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for e in fs::read_dir(root.join(&rel)).unwrap() {
            let e = e.unwrap();
            let r = rel.join(e.file_name());
            if e.file_type().unwrap().is_dir() {
                stack.push(r);
            } else {
                out.push(r);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_few_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = cli(&["train", "--config", &cfg, "--protocol", "few", "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ADAPT"), "no adapt phase in:\n{text}");
    assert!(run.join("manifest.json").exists());
    assert!(run.join("metrics.jsonl").exists());

    let ckpt = fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).expect("a checkpoint");
    let out = cli(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", run.join("data").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 2, "expected an sd and a td line:\n{text}");
}
