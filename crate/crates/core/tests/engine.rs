use dpcl_diff::corpus::synthetic::single_fact;
use dpcl_diff::corpus::{build_periodic_index, Quad, QuadStore, Split, Vocab};
use dpcl_diff::dpcl::{DpclVars, MappingStrategy};
use dpcl_diff::engine::{
    evaluate_joint_loss, init_checkpoint, joint_loss_on_tape, load_checkpoint, resume, save_checkpoint, train,
    Checkpoint, TrainConfig, CHECKPOINT_VERSION,
};
use dpcl_diff::evaluate::{predict, Component};
use dpcl_diff::gndiff::DenoiserVars;
use dpcl_diff::numkit::{grad_check, NumError, SeedRng, Tensor};
use dpcl_diff::ModelError;

fn tiny(epochs1: usize, epochs2: usize) -> TrainConfig {
    TrainConfig {
        d_dpcl: 6,
        d_diff: 8,
        batch: 4,
        lr: 0.02,
        epochs_stage1: epochs1,
        epochs_stage2: epochs2,
        diffusion_steps: 5,
        chains: 4,
        val_every: 0,
        ..TrainConfig::default()
    }
}

/// Five entities, two relations, a handful of timestamps with some repeats.
fn five_entity_store() -> QuadStore {
    let quads = vec![
        Quad::new(0, 0, 1, 0),
        Quad::new(2, 1, 3, 0),
        Quad::new(0, 0, 1, 1),
        Quad::new(4, 0, 2, 1),
        Quad::new(2, 1, 0, 2),
        Quad::new(0, 0, 3, 2),
        Quad::new(1, 1, 4, 3),
        Quad::new(0, 0, 1, 3),
        Quad::new(2, 1, 3, 4),
        Quad::new(4, 0, 2, 5),
    ];
    QuadStore::from_parts(
        quads,
        Vocab::from_ordered((0..5).map(|i| format!("e{i}")).collect()),
        Vocab::from_ordered(vec!["r0".into(), "r1".into()]),
        (0..6).map(|t| t.to_string()).collect(),
        4,
        5,
    )
    .unwrap()
}

#[test]
fn single_fact_is_memorized() {
    let store = single_fact(5, 3, 1);
    let cfg = TrainConfig { epochs_stage1: 30, epochs_stage2: 20, ..tiny(0, 0) };
    let quads = store.split(Split::Train).to_vec();
    let init = init_checkpoint(&cfg, &store).unwrap();
    let out = train(&cfg, &store, |_| {}).unwrap();
    let before = evaluate_joint_loss(&init.model, &cfg, &store, &quads, true, 7).unwrap();
    let after = evaluate_joint_loss(&out.last.model, &cfg, &store, &quads, true, 7).unwrap();
    assert!(after < before, "loss {before} -> {after}");
    let index = build_periodic_index(&store, cfg.lambda, &Split::ALL).unwrap();
    let q = [Quad::new(0, 0, 3, 1)];
    for c in [Component::Full, Component::DpclOnly, Component::GndiffOnly] {
        let p = predict(&out.last.model, &cfg, &index, &q, c).unwrap().remove(0);
        let argmax = (0..5).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(argmax, 3, "{c:?}: {p:?}");
    }
}

#[test]
fn diffusion_tail_concentrates_after_overfitting() {
    let store = single_fact(5, 3, 8);
    let cfg = TrainConfig { no_dpcl: true, epochs_stage1: 150, lr: 0.03, ..tiny(0, 0) };
    let out = train(&cfg, &store, |_| {}).unwrap();
    let index = build_periodic_index(&store, cfg.lambda, &Split::ALL).unwrap();
    let p = predict(&out.last.model, &cfg, &index, &[Quad::new(0, 0, 3, 8)], Component::Full).unwrap();
    assert!(p[0][3] > 0.9, "{:?}", p[0]);
}

#[test]
fn single_fact_joint_loss_settles() {
    let store = single_fact(5, 3, 8);
    let cfg = TrainConfig { epochs_stage1: 25, ..tiny(0, 0) };
    let quads = store.split(Split::Train).to_vec();
    let mut ckpt = init_checkpoint(&cfg, &store).unwrap();
    let mut curve = Vec::new();
    for e in 1..=cfg.epochs() {
        ckpt = resume(ckpt, &store, e, |_| {}).unwrap().last;
        curve.push(evaluate_joint_loss(&ckpt.model, &cfg, &store, &quads, false, 99).unwrap());
    }
    for w in curve[3..].windows(2) {
        assert!(w[1] <= w[0], "{curve:?}");
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let store = five_entity_store();
    let cfg = tiny(2, 2);
    let a = train(&cfg, &store, |_| {}).unwrap();
    let b = train(&cfg, &store, |_| {}).unwrap();
    let curve = |o: &dpcl_diff::engine::TrainOutcome| o.metrics.iter().map(|m| m.loss_total.to_bits()).collect::<Vec<_>>();
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(a.last.to_bytes(), b.last.to_bytes());
    let other = train(&TrainConfig { seed: 1, ..cfg }, &store, |_| {}).unwrap();
    assert_ne!(curve(&a), curve(&other));
}

#[test]
fn checkpoint_round_trips_byte_for_byte() {
    let store = five_entity_store();
    let ckpt = train(&tiny(1, 1), &store, |_| {}).unwrap().last;
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("nested/b.ckpt");
    save_checkpoint(&ckpt, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_error_paths() {
    let store = five_entity_store();
    let bytes = init_checkpoint(&tiny(1, 0), &store).unwrap().to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(ModelError::Checkpoint { .. })));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&newer, "x") {
        Err(ModelError::Incompatible { found, expected, .. }) => assert_eq!((found, expected), (2, 1)),
        other => panic!("{other:?}"),
    }

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], "x"), Err(ModelError::Checkpoint { .. })));
    }
    assert!(matches!(load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")), Err(ModelError::Io { .. })));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let store = five_entity_store();
    let cfg = TrainConfig { val_every: 1, ..tiny(2, 2) };
    let full = train(&cfg, &store, |_| {}).unwrap();

    let half = resume(init_checkpoint(&cfg, &store).unwrap(), &store, 3, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&half.last, &path).unwrap();
    let rest = resume(load_checkpoint(&path).unwrap(), &store, cfg.epochs(), |_| {}).unwrap();

    let a = full.metrics.last().unwrap().loss_total;
    let b = rest.metrics.last().unwrap().loss_total;
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    assert_eq!(full.last.model, rest.last.model);
}

#[test]
fn ablations_freeze_the_excluded_component() {
    let store = five_entity_store();
    for (no_gndiff, no_dpcl) in [(true, false), (false, true)] {
        let cfg = TrainConfig { no_gndiff, no_dpcl, ..tiny(1, 1) };
        let init = init_checkpoint(&cfg, &store).unwrap();
        let out = train(&cfg, &store, |_| {}).unwrap().last;
        let bits = |ts: &[&Tensor]| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        let (d0, d1) = (bits(&init.model.dpcl.tensors()), bits(&out.model.dpcl.tensors()));
        let (n0, n1) = (bits(&init.model.denoiser.tensors()), bits(&out.model.denoiser.tensors()));
        if no_gndiff {
            assert_eq!(n0, n1);
            assert_ne!(d0, d1);
        } else {
            assert_eq!(d0, d1);
            assert_ne!(n0, n1);
        }
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let store = five_entity_store();
    let index = build_periodic_index(&store, 2.0, &Split::ALL).unwrap();
    let quads = store.split(Split::Train).to_vec();
    for (stage2, mapping) in [(false, MappingStrategy::HypEuc), (true, MappingStrategy::HypHyp)] {
        let cfg = TrainConfig { mapping_strategy: mapping, d_dpcl: 3, d_diff: 4, ..tiny(1, 1) };
        let model = init_checkpoint(&cfg, &store).unwrap().model;
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let report = grad_check(
            |tape, v| {
                let dv = DpclVars {
                    entity: v[0],
                    relation: v[1],
                    w_p: v[2],
                    b_p: v[3],
                    w_np: v[4],
                    b_np: v[5],
                    w_c: v[6],
                    b_c: v[7],
                };
                let nv = DenoiserVars { token_emb: v[8], w_hidden: v[9], b_hidden: v[10], w_out: v[11], b_out: v[12] };
                let mut rng = SeedRng::new(5);
                joint_loss_on_tape(tape, &dv, &nv, &model, &cfg, stage2, &quads, &index, &mut rng)
                    .map(|(root, _)| root)
                    .map_err(|e| match e {
                        ModelError::Num(n) => n,
                        other => NumError::Domain { op: "joint", detail: other.to_string() },
                    })
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "stage2={stage2}: {:?}", report.max_rel_error);
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let store = five_entity_store();
    let cfg = tiny(1, 0);
    let mut ckpt = init_checkpoint(&cfg, &store).unwrap();
    ckpt.model.dpcl.relation.data_mut()[0] = f64::NAN;
    match resume(ckpt, &store, 1, |_| {}) {
        Err(ModelError::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        Err(other) => panic!("{other}"),
        Ok(_) => panic!("expected failure"),
    }
}

#[test]
fn empty_training_split_is_rejected() {
    let store = five_entity_store().with_quads(vec![Quad::new(0, 0, 1, 5)]);
    assert!(train(&tiny(1, 0), &store, |_| {}).is_err());
}
