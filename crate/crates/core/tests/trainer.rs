use evil_core::checkpoint::Checkpoint;
use evil_core::config::{Preset, RunConfig, TrainMode};
use evil_core::data::{generate_synthetic, partition_patients, split_labeled, Sample, SyntheticSpec};
use evil_core::eval::predict_with_uncertainty;
use evil_core::loss::{poly_lr, ScheduleState};
use evil_core::trainer::{
    consistency_pass, draw_batch, supervised_pass, train, train_step, RunOutputs, TrainData, TrainState,
};
use evil_core::EvilError;
use ndarray::Array4;

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Acceptance);
    cfg.data.size = 16;
    cfg.data.labeled_ratio = 0.3;
    cfg.model.depth = 2;
    cfg.model.base_width = 4;
    cfg.train.total_iters = 40;
    cfg.train.batch_labeled = 2;
    cfg.train.batch_unlabeled = 2;
    cfg.train.eval_every = 4;
    cfg
}

fn tiny_data(cfg: &RunConfig) -> TrainData {
    let spec = SyntheticSpec {
        n_patients: 10,
        slices_per_patient: 3,
        size: cfg.data.size,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let part = partition_patients(&ds.patients(), 0).unwrap();
    let train_set = ds.subset(&part.train.iter().cloned().collect());
    let (labeled, unlabeled) = split_labeled(&train_set, &cfg.split_spec()).unwrap();
    TrainData {
        labeled,
        unlabeled,
        val: ds.subset(&part.val.iter().cloned().collect()),
    }
}

fn batches(cfg: &RunConfig, data: &TrainData, iter: u64) -> (Vec<Sample>, Vec<Sample>) {
    (
        draw_batch(&data.labeled, cfg.train.batch_labeled, iter, 0, cfg),
        draw_batch(&data.unlabeled, cfg.train.batch_unlabeled, iter, 1, cfg),
    )
}

fn refs(v: &[Sample]) -> Vec<&Sample> {
    v.iter().collect()
}

#[test]
fn zero_lambda_equals_supervised_co_training() {
    let mut cfg = tiny_cfg();
    cfg.train.lam_max = 0.0;
    let data = tiny_data(&cfg);
    let (lab, unl) = batches(&cfg, &data, 0);

    let mut a = TrainState::new(&cfg).unwrap();
    train_step(&mut a, &cfg.train, &refs(&lab), &refs(&unl)).unwrap();

    let mut b = TrainState::new(&cfg).unwrap();
    let schedule = ScheduleState::at(0, cfg.train.total_iters, 0.0, cfg.train.gamma, cfg.train.t_mask).unwrap();
    let sup = supervised_pass(&mut b.nets, &refs(&lab), &schedule, true).unwrap();
    // the gradients are recomputed here from the public pieces
    let (ge, gs) = sup.gradients(&b.nets).unwrap();
    let lr = poly_lr(0, cfg.train.total_iters, cfg.train.lr0).unwrap() as f32;
    b.opt_enet.step(b.nets.enet.params_mut(), &ge.unwrap(), lr);
    b.opt_snet.step(b.nets.snet.params_mut(), &gs, lr);

    assert_eq!(a.nets.enet.params(), b.nets.enet.params());
    assert_eq!(a.nets.snet.params(), b.nets.snet.params());
}

#[test]
fn empty_mask_gives_zero_snet_consistency_gradient() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let (_, unl) = batches(&cfg, &data, 0);
    let mut state = TrainState::new(&cfg).unwrap();
    // threshold 0 keeps no pixel since u > 0 everywhere
    let schedule = ScheduleState::at(10, 40, 0.1, 1.0, 0.0).unwrap();
    let con = consistency_pass(&mut state.nets, &refs(&unl), &schedule).unwrap();
    assert_eq!(con.mask.retained(), 0);
    assert_eq!(con.masked_ce, 0.0);
    let (_, gs) = con.gradients(&state.nets, 1.0).unwrap();
    assert!(gs.iter().all(|&g| g == 0.0));
}

#[test]
fn mask_fraction_matches_uncertainty_count() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let (_, unl) = batches(&cfg, &data, 3);
    let mut state = TrainState::new(&cfg).unwrap();
    let schedule = ScheduleState::at(20, 40, 0.1, 1.0, 0.2).unwrap();
    let con = consistency_pass(&mut state.nets, &refs(&unl), &schedule).unwrap();
    let below = con.uncertainty.iter().filter(|&&u| u < 0.2).count();
    assert_eq!(con.mask.retained(), below);
    assert_eq!(con.mask.fraction(), below as f64 / con.uncertainty.len() as f64);
    for (&m, &u) in con.mask.values().iter().zip(con.uncertainty.iter()) {
        assert_eq!(m, u < 0.2);
    }
}

#[test]
fn pseudo_labels_carry_no_gradient() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let (_, unl) = batches(&cfg, &data, 1);
    let schedule = ScheduleState::at(30, 40, 0.1, 1.0, 0.2).unwrap();
    let mut base = TrainState::new(&cfg).unwrap();
    let c0 = consistency_pass(&mut base.nets, &refs(&unl), &schedule).unwrap();
    let (ge0, gs0) = c0.gradients(&base.nets, 1.0).unwrap();

    // nudging the S-Net changes its logits but not its argmax, so the E-Net
    // gradient must be untouched; likewise in the other direction
    let mut s_moved = TrainState::new(&cfg).unwrap();
    let last = s_moved.nets.snet.params().len() - 1;
    s_moved.nets.snet.params_mut()[last] += 1e-3;
    let c1 = consistency_pass(&mut s_moved.nets, &refs(&unl), &schedule).unwrap();
    assert_eq!(c1.pseudo_snet, c0.pseudo_snet);
    assert_ne!(c1.masked_ce, c0.masked_ce);
    let (ge1, _) = c1.gradients(&s_moved.nets, 1.0).unwrap();
    assert_eq!(ge1, ge0);

    let mut e_moved = TrainState::new(&cfg).unwrap();
    let last = e_moved.nets.enet.params().len() - 1;
    e_moved.nets.enet.params_mut()[last] += 1e-3;
    let c2 = consistency_pass(&mut e_moved.nets, &refs(&unl), &schedule).unwrap();
    assert_eq!(c2.pseudo_enet, c0.pseudo_enet);
    assert_eq!(c2.mask, c0.mask);
    assert_ne!(c2.evidential, c0.evidential);
    let (_, gs2) = c2.gradients(&e_moved.nets, 1.0).unwrap();
    assert_eq!(gs2, gs0);
}

#[test]
fn zero_lambda_isolates_the_networks() {
    let mut cfg = tiny_cfg();
    cfg.train.lam_max = 0.0;
    let data = tiny_data(&cfg);
    let (lab, unl) = batches(&cfg, &data, 0);
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    b.nets.enet.params_mut().iter_mut().for_each(|p| *p *= 1.5);
    let mut c = TrainState::new(&cfg).unwrap();
    c.nets.snet.params_mut().iter_mut().for_each(|p| *p *= 0.5);
    for s in [&mut a, &mut b, &mut c] {
        train_step(s, &cfg.train, &refs(&lab), &refs(&unl)).unwrap();
    }
    assert_eq!(a.nets.snet.params(), b.nets.snet.params());
    assert_eq!(a.nets.enet.params(), c.nets.enet.params());
}

#[test]
fn identical_seeds_give_identical_loss_sequences() {
    let mut cfg = tiny_cfg();
    cfg.train.total_iters = 50;
    let data = tiny_data(&cfg);
    let run = || {
        let mut s = TrainState::new(&cfg).unwrap();
        (0..50)
            .map(|it| {
                let (lab, unl) = batches(&cfg, &data, it);
                let r = train_step(&mut s, &cfg.train, &refs(&lab), &refs(&unl)).unwrap();
                (r.loss_sup.to_bits(), r.loss_con.to_bits(), r.mask_frac.to_bits())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_logs_and_keeps_the_best_checkpoint() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutputs { dir: dir.path().to_path_buf() };
    let outcome = train(&cfg, &data, TrainState::new(&cfg).unwrap(), None, Some(&out)).unwrap();
    assert_eq!(outcome.log.len(), 10);
    assert!(outcome.log.iter().all(|r| outcome.best_score >= r.dsc_enet));
    let text = std::fs::read_to_string(out.log_path()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,lr,lambda,beta,mask_frac,loss_sup,loss_con,dsc_enet,dsc_snet,hd95,asd");
    assert_eq!(lines.len(), 11);
    for (row, line) in outcome.log.iter().zip(&lines[1..]) {
        let f: Vec<&str> = line.split(',').collect();
        let t = row.step.iter;
        assert_eq!(f[0].parse::<u64>().unwrap(), row.iter);
        let lam = evil_core::loss::lambda_rampup(t, 40, 0.1).unwrap();
        let beta = evil_core::loss::beta_schedule(t, 40).unwrap();
        assert_eq!(row.step.lambda, lam);
        assert_eq!(row.step.beta, beta);
        assert_eq!(f[2], format!("{lam:.8}"));
        assert_eq!(f[3], format!("{beta:.8}"));
    }
    let best = Checkpoint::load(&out.best_path()).unwrap();
    assert_eq!(best.state.iter, outcome.best_iter);
    assert_eq!(best.state.nets.enet.params(), outcome.best.nets.enet.params());
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let full = train(&cfg, &data, TrainState::new(&cfg).unwrap(), None, None).unwrap();

    let mut state = TrainState::new(&cfg).unwrap();
    for it in 0..20 {
        let (lab, unl) = batches(&cfg, &data, it);
        train_step(&mut state, &cfg.train, &refs(&lab), &refs(&unl)).unwrap();
    }
    let best = evil_core::trainer::BestSoFar { score: f64::NEG_INFINITY, iter: 0 };
    let bytes = Checkpoint::new(&cfg, &state, best).to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored.state.iter, 20);
    let resumed = train(&cfg, &data, restored.state, None, None).unwrap();
    assert_eq!(resumed.last.nets.enet.params(), full.last.nets.enet.params());
    assert_eq!(resumed.last.nets.snet.params(), full.last.nets.snet.params());
    assert_eq!(resumed.last.nets.snet.running_stats(), full.last.nets.snet.running_stats());
    assert_eq!(resumed.last.opt_enet.velocity, full.last.opt_enet.velocity);
    let tail: Vec<u64> = full.steps[20..].iter().map(|s| s.loss_sup.to_bits()).collect();
    let again: Vec<u64> = resumed.steps.iter().map(|s| s.loss_sup.to_bits()).collect();
    assert_eq!(tail, again);
}

#[test]
fn supervised_only_leaves_enet_untouched() {
    let mut cfg = tiny_cfg();
    cfg.train.mode = TrainMode::SupervisedOnly;
    cfg.train.total_iters = 8;
    let data = tiny_data(&cfg);
    let init = TrainState::new(&cfg).unwrap();
    let out = train(&cfg, &data, init.clone(), None, None).unwrap();
    assert_eq!(out.last.nets.enet.params(), init.nets.enet.params());
    assert_ne!(out.last.nets.snet.params(), init.nets.snet.params());
    assert!(out.steps.iter().all(|s| s.loss_con == 0.0 && s.lambda == 0.0));
}

#[test]
fn non_finite_loss_reports_batch_and_schedule() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let (lab, unl) = batches(&cfg, &data, 0);
    let mut state = TrainState::new(&cfg).unwrap();
    state.nets.snet.params_mut()[0] = f32::NAN;
    let err = train_step(&mut state, &cfg.train, &refs(&lab), &refs(&unl)).unwrap_err();
    let EvilError::NonFinite(msg) = err else { panic!("expected a non-finite error") };
    assert!(msg.contains("beta=") && msg.contains("lambda="), "{msg}");
    assert!(msg.contains(&lab[0].stem()), "{msg}");
}

#[test]
fn zero_logits_give_half_uncertainty() {
    let cfg = tiny_cfg();
    let mut state = TrainState::new(&cfg).unwrap();
    state.nets.enet.params_mut().fill(0.0);
    let x = Array4::from_shape_fn((2, 1, 16, 16), |(_, _, y, x)| (y * x) as f32 / 256.0);
    let p = predict_with_uncertainty(&state.nets.enet, &x).unwrap();
    assert!(p.uncertainty.iter().all(|&u| u == 0.5));
    let again = predict_with_uncertainty(&state.nets.enet, &x).unwrap();
    assert_eq!(p, again);
    let bad = Array4::<f32>::zeros((1, 1, 18, 16));
    let err = predict_with_uncertainty(&state.nets.enet, &bad).unwrap_err().to_string();
    assert!(err.contains("divisible by 2^depth = 4"), "{err}");
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let cfg = tiny_cfg();
    let data = tiny_data(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    for it in 0..3 {
        let (lab, unl) = batches(&cfg, &data, it);
        train_step(&mut state, &cfg.train, &refs(&lab), &refs(&unl)).unwrap();
    }
    let best = evil_core::trainer::BestSoFar { score: 0.25, iter: 2 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    Checkpoint::new(&cfg, &state, best).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.best, best);
    assert_eq!(back.config, cfg);
    assert_eq!(back.state.iter, 3);
    assert_eq!(back.state.nets.enet.params(), state.nets.enet.params());
    assert_eq!(back.state.nets.enet.running_stats(), state.nets.enet.running_stats());
    assert_eq!(back.state.opt_snet, state.opt_snet);

    let bytes = std::fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    let err = Checkpoint::from_bytes(&bytes[..10]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
    let mut other = bytes.clone();
    other[0] = b'X';
    assert!(Checkpoint::from_bytes(&other).unwrap_err().to_string().contains("magic"));

    let mut wider = cfg.model;
    wider.base_width = 8;
    let err = back.check_model(&wider).unwrap_err().to_string();
    assert!(err.contains("architecture mismatch"), "{err}");
    back.check_model(&cfg.model).unwrap();
}
