use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::metrics::Split;
use crate::trainers::{Phase, Regime};

const TINY: &str = "
dataset.sd_frames=12
dataset.td_frames=10
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
regime.warmup_steps=10
";

fn tiny(regime: &str, protocol: &str, out: &Path) -> ExperimentConfig {
    let text = format!("{TINY}\nregime.regime={regime}\nprotocol={protocol}\noutput_dir={}\n", out.display());
    ExperimentConfig::parse(&text, None).unwrap()
}

fn config_key(e: Error) -> String {
    match e {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn text_round_trip_is_identity() {
    for profile in [Profile::Desk, Profile::Paper] {
        for regime in Regime::ALL {
            let c = ExperimentConfig::new(profile, regime, Protocol::Few);
            let back = ExperimentConfig::parse(&c.to_text(), None).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), c.to_text());
        }
    }
    let c = tiny("MTL_KD", "FEW", Path::new("/tmp/x"));
    assert_eq!(ExperimentConfig::parse(&c.to_text(), None).unwrap(), c);
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let e = ExperimentConfig::parse("regime.finetun.epochs=3", None).unwrap_err();
    assert_eq!(config_key(e), "regime.finetun.epochs");
    let e = ExperimentConfig::parse("dataset.n_frames=3", None).unwrap_err();
    assert_eq!(config_key(e), "dataset.n_frames");
    let e = ExperimentConfig::parse("regime.seed=3", None).unwrap_err();
    assert_eq!(config_key(e), "regime.seed");
    let e = ExperimentConfig::parse("regime=3", None).unwrap_err();
    assert_eq!(config_key(e), "regime");
}

#[test]
fn bad_values_name_their_key() {
    for (text, key) in [
        ("seed=abc", "seed"),
        ("seed=-1", "seed"),
        ("regime.regime=MTL_X", "regime.regime"),
        ("protocol=ZERO", "protocol"),
        ("model.attention_norm=sideways", "model.attention_norm"),
        ("model.region_pos_enc=maybe", "model.region_pos_enc"),
        ("loss.supcon_tau=0", "loss.supcon_tau"),
        ("regime.finetune.batch_size=0", "regime.finetune.batch_size"),
        ("curriculum.decay_factor=1.5", "curriculum.decay_factor"),
        ("shift.novel_class_ids=0", "shift.novel_class_ids"),
        ("model.d_model=18", "model.d_model"),
        ("profile=huge", "profile"),
        ("seed=1\nseed=2", "seed"),
        ("just text", "line 1"),
    ] {
        let e = ExperimentConfig::parse(text, None).unwrap_err();
        assert_eq!(config_key(e), key, "{text}");
    }
}

#[test]
fn values_are_typed_by_their_defaults() {
    let c = ExperimentConfig::parse(
        "profile=paper\nregime.regime=mtl_kd_ft\nseed=9\nmodel.channels=8,16\nshift.novel_class_ids=7,9\nregime.grad_clip=5\nloss.kd_temperature=3",
        None,
    )
    .unwrap();
    assert_eq!(c.profile, Profile::Paper);
    assert_eq!(c.regime.regime, Regime::MtlKdFt);
    assert_eq!(c.regime.scenegraph.epochs, 250);
    assert_eq!(c.seed, 9);
    assert_eq!(c.train_config().regime.seed, 9);
    assert_eq!(c.model.channels, vec![8, 16]);
    assert_eq!(c.shift.novel_class_ids.iter().copied().collect::<Vec<_>>(), vec![7, 9]);
    assert_eq!(c.regime.grad_clip, Some(5.0));
    assert_eq!(c.loss.kd_temperature, 3.0);
    let c = ExperimentConfig::parse(&c.to_text().replace("regime.grad_clip=5.0", "regime.grad_clip=none"), None).unwrap();
    assert_eq!(c.regime.grad_clip, None);
}

#[test]
fn profile_argument_overrides_the_file() {
    let c = ExperimentConfig::parse("profile=desk", Some(Profile::Paper)).unwrap();
    assert_eq!(c.profile, Profile::Paper);
    assert_eq!(c.regime.caption.batch_size, 50);
    let d = ExperimentConfig::parse("", None).unwrap();
    assert_eq!(d, ExperimentConfig::desk(Regime::MtlFt, Protocol::Uda));
    assert_eq!((d.dataset.sd_frames, d.dataset.td_frames), (64, 32));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn random_overrides_round_trip(
        seed in any::<u64>(),
        epochs in 1usize..500,
        lr in 1e-9f64..10.0,
        tau in 1e-3f64..5.0,
        clip in proptest::option::of(1e-3f64..100.0),
        few in any::<bool>(),
    ) {
        let mut c = ExperimentConfig::desk(Regime::MtlV, if few { Protocol::Few } else { Protocol::Uda });
        c.seed = seed;
        c.regime.joint.epochs = epochs;
        c.regime.joint.lr = lr;
        c.loss.supcon_tau = tau;
        c.regime.grad_clip = clip;
        c.regime.seed = seed;
        let back = ExperimentConfig::parse(&c.to_text(), None).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}

#[test]
fn uda_run_writes_a_complete_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_FT", "UDA", &dir.path().join("run"));
    let m = run(&cfg).unwrap();
    assert!(m.is_success());
    assert_eq!(m.phase_log(), vec![Phase::PretrainCicl, Phase::Caption, Phase::SceneGraph, Phase::Finetune]);
    assert_eq!(m.reports.len(), 4);
    for kind in [CheckpointKind::Bg, CheckpointKind::Bc] {
        for split in [Split::Sd, Split::Td] {
            assert!(m.report(kind, split).is_some(), "{kind:?} {split:?}");
        }
    }
    let out = &cfg.output_dir;
    assert_eq!(RunManifest::read(out).unwrap(), m);
    assert_eq!(ExperimentConfig::load(&out.join(CONFIG_FILE), None).unwrap().hash(), m.config_hash);
    assert!(out.join(METRICS_FILE).exists());
    assert!(!out.join(".lock").exists());
    for e in &m.reports {
        assert!(out.join("checkpoints").join(&e.label).join("manifest").exists(), "{}", e.label);
    }
    let sd = crate::synthdata::load_dataset(&out.join("data/sd")).unwrap();
    let (gen_sd, _) = generate_data(&cfg).unwrap();
    assert!(sd.bitwise_eq(&gen_sd));
}

#[test]
fn few_shot_run_adds_incremental_pretraining_and_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_FT", "FEW", &dir.path().join("run"));
    let m = run(&cfg).unwrap();
    assert_eq!(
        m.phase_log(),
        vec![Phase::PretrainCicl, Phase::PretrainCicl, Phase::Caption, Phase::SceneGraph, Phase::Finetune, Phase::Adapt]
    );
    let bg = m.reports.iter().find(|e| e.checkpoint == CheckpointKind::Bg).unwrap();
    assert!(bg.selected);
    let (model, _) = crate::models::load_checkpoint(&cfg.output_dir.join("checkpoints").join(&bg.label)).unwrap();
    assert_eq!(model.k_cls(), cfg.dataset.generator().k_cls());
}

#[test]
fn distillation_run_trains_and_saves_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_KD_FT", "UDA", &dir.path().join("run"));
    let m = run(&cfg).unwrap();
    assert_eq!(m.phase_log(), vec![Phase::PretrainCicl, Phase::StlCaption, Phase::StlSceneGraph, Phase::Kd, Phase::Finetune]);
    let teachers = load_teachers(&cfg.output_dir.join("checkpoints")).unwrap();
    assert_eq!(teachers.caption.model.config.k_int, cfg.dataset.n_interactions);
}

#[test]
fn same_config_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&tiny("MTL_V", "FEW", &dir.path().join("a"))).unwrap();
    let b = run(&tiny("MTL_V", "FEW", &dir.path().join("b"))).unwrap();
    assert!(a.max_report_diff(&b) <= 1e-12);
    assert_ne!(a.config_hash, b.config_hash, "output_dir is part of the config");
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_FT", "UDA", &dir.path().join("run"));
    let _lock = RunLock::acquire(&cfg.output_dir).unwrap();
    assert!(matches!(run(&cfg), Err(Error::Locked(_))));
    assert!(!cfg.output_dir.join(MANIFEST_FILE).exists());
}

#[test]
fn diverging_run_leaves_a_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("MTL_V", "UDA", &dir.path().join("run"));
    cfg.regime.joint.lr = 1e300;
    cfg.regime.joint.epochs = 3;
    let err = run(&cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let m: RunManifest = serde_json::from_slice(&std::fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert!(!m.is_success());
    assert_eq!(m.phase_log(), vec![Phase::PretrainCicl]);
    assert!(m.reports.is_empty());
}

#[test]
fn evaluation_is_pure_and_tagged_by_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_FT", "UDA", &dir.path().join("run"));
    let m = run(&cfg).unwrap();
    let bc = m.reports.iter().find(|e| e.checkpoint == CheckpointKind::Bc && e.report.split == Split::Sd).unwrap();
    let ckpt = cfg.output_dir.join("checkpoints").join(&bc.label);
    let data = cfg.output_dir.join("data");
    let a = evaluate(&ckpt, &data.join("sd"), &cfg.eval).unwrap();
    let b = evaluate(&ckpt, &data.join("sd"), &cfg.eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, bc.report);
    let t = evaluate(&ckpt, &data.join("td"), &cfg.eval).unwrap();
    assert_eq!((a.split, t.split), (Split::Sd, Split::Td));

    let bin = ckpt.join("shared.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(evaluate(&ckpt, &data.join("sd"), &cfg.eval), Err(Error::Corrupt { .. })));
}

#[test]
fn pretrain_stage_then_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("MTL_FT", "UDA", &dir.path().join("pre"));
    let m = run_stage(&cfg, Stage::Pretrain).unwrap();
    assert_eq!(m.stage, "pretrain");
    assert_eq!(m.phase_log(), vec![Phase::PretrainCicl]);
    assert!(m.reports.iter().all(|e| !e.selected));

    let mut acfg = tiny("MTL_FT", "FEW", &dir.path().join("adapt"));
    acfg.seed = cfg.seed;
    let a = run_adapt(&acfg, &cfg.output_dir.join("checkpoints/pretrained"), None).unwrap();
    assert_eq!(a.phase_log(), vec![Phase::PretrainCicl, Phase::Adapt]);
    assert!(a.report(CheckpointKind::Bg, Split::Td).is_some());
}

#[test]
fn grid_summary_marks_missing_runs_absent() {
    let dir = tempfile::tempdir().unwrap();
    let t = grid_summary(dir.path());
    assert_eq!(t.rows.len(), 16);
    assert!(t.rows.iter().all(GridRow::is_absent));
    assert_eq!(t.to_markdown().matches("absent").count(), 16 * 10);

    let cfg = tiny("MTL_V", "UDA", &dir.path().join(run_dir_name(Regime::MtlV, Protocol::Uda)));
    let m = run(&cfg).unwrap();
    let t = grid_summary(dir.path());
    let row = t.row(Regime::MtlV, Protocol::Uda, CheckpointKind::Bg).unwrap();
    assert_eq!(row.sd.as_ref(), m.report(CheckpointKind::Bg, Split::Sd));
    assert_eq!(row.td.as_ref(), m.report(CheckpointKind::Bg, Split::Td));
    assert_eq!(t.rows.iter().filter(|r| !r.is_absent()).count(), 2);
    let tsv = t.to_tsv();
    assert_eq!(tsv.lines().count(), 17);
    assert!(tsv.contains(&format!("{:?}", m.report(CheckpointKind::Bc, Split::Td).unwrap().map)));
}
