use super::*;
use crate::curriculum::log_kernel;
use crate::losses::{caption_ce_loss_grad, interaction_ml_loss_grad};
use crate::synthdata::{generate_dataset, DatasetConfig};
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        k_cls: 6,
        k_int: 3,
        vocab_size: 12,
        max_caption_len: 8,
        crop_size: 24,
        channels: vec![3, 4, 5],
        d_model: 16,
        n_heads: 2,
        n_memory: 2,
        n_enc: 2,
        n_dec: 2,
        ffn_dim: 8,
        semantic_dim: 4,
        graph_hidden: 9,
        edge_hidden: 6,
        attention_norm: AttentionNorm::PerDestination,
        region_pos_enc: false,
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spatial_rows(e: usize, seed: u64) -> Tensor {
    random_tensor(&[e, SPATIAL_DIM], seed)
}

#[test]
fn extractor_contracts() {
    let m = MtlModel::new(tiny_config(), 1).unwrap();
    let one = random_tensor(&[1, 3, 24, 24], 2);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let two = Tensor::new(vec![2, 3, 24, 24], two).unwrap();
    let f = m.extract_features(&two, None).unwrap();
    assert_eq!(f.shape(), &[2, 5]);
    assert_eq!(f.row(0), f.row(1));
    let k = log_kernel(1.0, 1).unwrap();
    let filtered = m.extract_features(&two, Some(&k)).unwrap();
    assert!(filtered.max_abs_diff(&f) > 0.0);
    let sched = crate::curriculum::CurriculumSchedule { sigma0: 0.4, sigma_min: 0.4, ..Default::default() };
    let inactive = sched.kernel_at(0).unwrap();
    assert!(m.extract_features(&two, inactive.as_ref()).unwrap().bitwise_eq(&f));
    assert!(m.extract_features(&random_tensor(&[1, 4, 24, 24], 0), None).is_err());
    assert!(m.extract_features(&random_tensor(&[1, 3, 16, 16], 0), None).is_err());
}

#[test]
fn classifier_is_affine() {
    let m = MtlModel::new(tiny_config(), 3).unwrap();
    let z = m.classify_features(&Tensor::zeros(&[2, 5])).unwrap();
    let b = m.store.value(m.classifier.b);
    assert_eq!(z.row(0), b.data());
    let (x, y) = (random_tensor(&[3, 5], 1), random_tensor(&[3, 5], 2));
    let mut s = x.clone();
    s.add_scaled(&y, 2.0);
    let (lx, ly, ls) = (m.classify_features(&x).unwrap(), m.classify_features(&y).unwrap(), m.classify_features(&s).unwrap());
    for i in 0..ls.numel() {
        let bias = b.data()[i % 6];
        let expect = (lx.data()[i] - bias) + 2.0 * (ly.data()[i] - bias) + bias;
        assert!((ls.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn expansion_preserves_old_logits() {
    let m = MtlModel::new(tiny_config(), 4).unwrap();
    let probe = random_tensor(&[4, 5], 9);
    let before = m.classify_features(&probe).unwrap();
    let e2 = expand_classifier_head(&m, 2, 7).unwrap();
    assert_eq!(e2.k_cls(), 8);
    let after = e2.classify_features(&probe).unwrap();
    assert_eq!(after.shape(), &[4, 8]);
    for i in 0..4 {
        for k in 0..6 {
            assert_eq!(after.row(i)[k].to_bits(), before.row(i)[k].to_bits());
        }
    }
    let e11 = expand_classifier_head(&expand_classifier_head(&m, 1, 1).unwrap(), 1, 2).unwrap();
    let twice = e11.classify_features(&probe).unwrap();
    for i in 0..4 {
        assert_eq!(&twice.row(i)[..6], &after.row(i)[..6]);
    }
    assert!(expand_classifier_head(&m, 0, 0).is_err());
    assert_ne!(m.arch_hash(), e2.arch_hash());
}

#[test]
fn caption_is_causal_and_region_permutation_invariant() {
    let m = MtlModel::new(tiny_config(), 5).unwrap();
    let regions = random_tensor(&[3, 5], 11);
    let toks = vec![1, 4, 7, 5, 9, 2];
    let base = m.caption_forward(&regions, &toks, None).unwrap();
    assert_eq!(base.shape(), &[6, 12]);
    let mut alt = toks.clone();
    alt[4] = 10;
    alt[5] = 6;
    let pert = m.caption_forward(&regions, &alt, None).unwrap();
    for t in 0..4 {
        assert_eq!(base.row(t), pert.row(t));
    }
    assert_ne!(base.row(4), pert.row(4));

    let perm = Tensor::from_rows(&[regions.row(2).to_vec(), regions.row(0).to_vec(), regions.row(1).to_vec()]).unwrap();
    let permuted = m.caption_forward(&perm, &toks, None).unwrap();
    assert!(permuted.max_abs_diff(&base) < 1e-12);
    assert!(m.caption_forward(&regions, &[1; 9], None).is_err());
    for r in 1..=5 {
        assert_eq!(m.caption_forward(&random_tensor(&[r, 5], r as u64), &toks, None).unwrap().shape(), &[6, 12]);
    }
}

#[test]
fn greedy_generation_matches_teacher_forcing() {
    let m = MtlModel::new(tiny_config(), 6).unwrap();
    let regions = random_tensor(&[2, 5], 3);
    let a = m.caption_generate(&regions, 8, None).unwrap();
    let b = m.caption_generate(&regions, 8, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens[0], BOS);
    assert!(*a.tokens.last().unwrap() == EOS || a.tokens.len() == 8);
    for (t, step) in a.step_logits.iter().enumerate() {
        let tf = m.caption_forward(&regions, &a.tokens[..=t], None).unwrap();
        let row = tf.row(t);
        let diff = row.iter().zip(step.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "step {t}: {diff}");
    }
}

fn star_graph(m: &MtlModel, n_inst: usize, seed: u64) -> (Tensor, Tensor, Tensor, Vec<(usize, usize)>) {
    let visual = random_tensor(&[n_inst + 1, 5], seed);
    let semantic = random_tensor(&[n_inst + 1, m.config.semantic_dim], seed + 1);
    let spatial = spatial_rows(n_inst, seed + 2);
    let edges = (1..=n_inst).map(|i| (0, i)).collect();
    (visual, semantic, spatial, edges)
}

#[test]
fn graph_shapes_and_equivariance() {
    let m = MtlModel::new(tiny_config(), 7).unwrap();
    for n in 1..=5 {
        let (v, s, sp, e) = star_graph(&m, n, n as u64);
        assert_eq!(m.scenegraph_forward(&v, &s, &sp, &e, None).unwrap().shape(), &[n, 3]);
    }
    let (v, s, sp, e) = star_graph(&m, 3, 40);
    let base = m.scenegraph_forward(&v, &s, &sp, &e, None).unwrap();
    // node order [2, 0, 3, 1]; edge order reversed
    let node_perm = [2usize, 0, 3, 1];
    let inv = |old: usize| node_perm.iter().position(|&p| p == old).unwrap();
    let pv = Tensor::from_rows(&node_perm.iter().map(|&p| v.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
    let ps = Tensor::from_rows(&node_perm.iter().map(|&p| s.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
    let psp = Tensor::from_rows(&(0..3).rev().map(|k| sp.row(k).to_vec()).collect::<Vec<_>>()).unwrap();
    let pe: Vec<(usize, usize)> = e.iter().rev().map(|&(t, i)| (inv(t), inv(i))).collect();
    let out = m.scenegraph_forward(&pv, &ps, &psp, &pe, None).unwrap();
    for k in 0..3 {
        for j in 0..3 {
            assert!((out.row(2 - k)[j] - base.row(k)[j]).abs() < 1e-12);
        }
    }
    assert!(m.scenegraph_forward(&v, &s, &Tensor::zeros(&[0, SPATIAL_DIM]), &[], None).is_err());
}

#[test]
fn duplicated_instrument_variant_behaviour() {
    let mut m = MtlModel::new(tiny_config(), 8).unwrap();
    let (v, s, sp, e) = star_graph(&m, 2, 50);
    let dup = |t: &Tensor, row: usize| {
        let mut rows: Vec<Vec<f64>> = (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect();
        rows.push(t.row(row).to_vec());
        Tensor::from_rows(&rows).unwrap()
    };
    let (v2, s2, sp2) = (dup(&v, 2), dup(&s, 2), dup(&sp, 1));
    let mut e2 = e.clone();
    e2.push((0, 3));
    for norm in [AttentionNorm::PerEdgePair, AttentionNorm::PerDestination] {
        m.config.attention_norm = norm;
        let a = m.scenegraph_forward(&v, &s, &sp, &e, None).unwrap();
        let b = m.scenegraph_forward(&v2, &s2, &sp2, &e2, None).unwrap();
        let diff = (0..2).flat_map(|k| (0..3).map(move |j| (k, j))).map(|(k, j)| (a.row(k)[j] - b.row(k)[j]).abs()).fold(0.0, f64::max);
        match norm {
            AttentionNorm::PerEdgePair => assert_eq!(diff, 0.0),
            AttentionNorm::PerDestination => assert!(diff > 1e-9, "aggregation should see the new neighbour"),
        }
    }
}

#[test]
fn caption_loss_has_no_graph_gradient() {
    let m = MtlModel::new(tiny_config(), 9).unwrap();
    let mut g = Graph::new();
    let crops = g.input(random_tensor(&[2, 3, 24, 24], 1));
    let f = m.extract(&mut g, crops, None).unwrap();
    let y = m.caption_logits(&mut g, f, &[1, 4, 5], None).unwrap();
    let (l, gr) = caption_ce_loss_grad(g.value(y), &[4, 5, 2], &[true; 3]).unwrap();
    let root = g.fused_scalar(l, &[y], vec![gr]).unwrap();
    let grads = g.backward(root).unwrap();
    let touched: std::collections::BTreeSet<ParamGroup> = grads.param_grads().into_iter().map(|(id, _)| m.store.get(id).group).collect();
    assert!(touched.contains(&ParamGroup::Shared) && touched.contains(&ParamGroup::Caption));
    assert!(!touched.contains(&ParamGroup::SceneGraph) && !touched.contains(&ParamGroup::Classifier));
}

/// Caption plus interaction loss summed over `frames`, with its gradients.
fn two_frame_loss(m: &MtlModel, frames: &[FramePrep], kernel: Option<&LoGKernel>) -> (f64, crate::autograd::Grads) {
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for fr in frames {
        let crops = g.input(fr.crops.clone());
        let f = m.extract(&mut g, crops, kernel).unwrap();
        let toks = &fr.caption[..fr.caption.len() - 1];
        let y = m.caption_logits(&mut g, f, toks, kernel).unwrap();
        let (l, gr) = caption_ce_loss_grad(g.value(y), &fr.caption[1..], &vec![true; toks.len()]).unwrap();
        terms.push(g.fused_scalar(l, &[y], vec![gr]).unwrap());
        let input = GraphInput { visual: f, semantic: fr.semantic.clone(), spatial: fr.spatial.clone(), edges: fr.edges.clone() };
        let z = m.graph_logits(&mut g, &input, kernel).unwrap();
        let (l, gr) = interaction_ml_loss_grad(g.value(z), &fr.labels).unwrap();
        terms.push(g.fused_scalar(l, &[z], vec![gr]).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    let v = g.value(total).item();
    (v, g.backward(total).unwrap())
}

#[test]
fn end_to_end_gradient_check() {
    let ds_cfg = DatasetConfig { n_frames: 2, n_instrument_classes: 4, n_interactions: 3, max_instruments: 2, ..Default::default() };
    let ds = generate_dataset(&ds_cfg, 3).unwrap();
    let mut cfg = tiny_config();
    cfg.k_cls = ds_cfg.k_cls();
    cfg.vocab_size = ds_cfg.vocabulary().len();
    cfg.max_caption_len = ds_cfg.max_caption_len;
    let m = MtlModel::new(cfg.clone(), 10).unwrap();
    let frames: Vec<FramePrep> = ds.frames.iter().map(|f| prepare_frame(f, &cfg).unwrap()).collect();
    let kernel = log_kernel(1.0, 1).unwrap();
    let (_, grads) = two_frame_loss(&m, &frames, Some(&kernel));
    let analytic: std::collections::HashMap<ParamId, Tensor> = grads.param_grads().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for (id, p) in m.store.iter() {
        if p.group == ParamGroup::Classifier {
            continue;
        }
        let a = analytic.get(&id).unwrap_or_else(|| panic!("no gradient for {}", p.name));
        for _ in 0..2 {
            let j = rng.random_range(0..p.value.numel());
            // Small step: larger ones straddle ReLU kinks in the extractor.
            let h = 1e-6;
            let mut mp = m.clone();
            mp.store.value_mut(id).data_mut()[j] += h;
            let mut mm = m.clone();
            mm.store.value_mut(id).data_mut()[j] -= h;
            let fd = (two_frame_loss(&mp, &frames, Some(&kernel)).0 - two_frame_loss(&mm, &frames, Some(&kernel)).0) / (2.0 * h);
            let an = a.data()[j];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-8, "{}[{j}]: fd {fd} vs analytic {an}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn eval_is_bitwise_deterministic() {
    let ds = generate_dataset(&DatasetConfig { n_frames: 1, ..Default::default() }, 1).unwrap();
    let cfg = ModelConfig::for_dataset(&ds.config);
    let m = MtlModel::new(cfg.clone(), 1).unwrap();
    let fr = prepare_frame(&ds.frames[0], &cfg).unwrap();
    let k = log_kernel(1.0, 3).unwrap();
    let (c1, s1) = m.predict(&fr, Some(&k)).unwrap();
    let (c2, s2) = m.predict(&fr, Some(&k)).unwrap();
    assert_eq!(c1, c2);
    assert!(s1.bitwise_eq(&s2));
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let m = expand_classifier_head(&MtlModel::new(tiny_config(), 12).unwrap(), 2, 3).unwrap();
    let meta = CheckpointMeta { label: "x".into(), regime: "mtl_ft".into(), phase: "finetune".into(), epoch: 4, sigma: Some(0.81), radius: 3 };
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &meta, tmp.path()).unwrap();
    let (back, bm) = load_checkpoint(tmp.path()).unwrap();
    assert_eq!(bm, meta);
    assert_eq!(back.config, m.config);
    for ((_, a), (_, b)) in back.store.iter().zip(m.store.iter()) {
        assert!(a.value.bitwise_eq(&b.value));
    }

    let mp = tmp.path().join("manifest");
    let text = std::fs::read_to_string(&mp).unwrap();
    let line = text.lines().find(|l| l.starts_with("arch_hash=")).unwrap().to_string();
    std::fs::write(&mp, text.replace(&line, "arch_hash=deadbeef")).unwrap();
    assert!(matches!(load_checkpoint(tmp.path()), Err(Error::ArchitectureMismatch { .. })));
    std::fs::write(&mp, &text).unwrap();

    let bin = tmp.path().join("caption.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(tmp.path()), Err(Error::Corrupt { .. })));
}
