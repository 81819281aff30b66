//! The co-training loop: supervised and cross-supervision losses for the
//! E-Net/S-Net pair, scheduling, validation, logging and checkpoints.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig, TrainMode};
use crate::data::{augment, stack_images, stack_labels, Dataset, EpochSampler, Sample};
use crate::error::{ensure, EvilError, Result};
use crate::eval::{evaluate_case, predict_with_uncertainty, EmptyMaskPolicy, MetricReport};
use crate::evidential::{argmax_classes, belief_and_uncertainty, default_tau, evidence_from_logits, Logits};
use crate::loss::{
    consistency_loss, eseg_loss, poly_lr, sseg_loss, OneHotLabels, ScheduleState, UncertaintyMask,
};
use crate::nn::{init_dualnet, DualNet, Sgd, Tape, UNet};

pub const LOG_HEADER: &str = "iter,lr,lambda,beta,mask_frac,loss_sup,loss_con,dsc_enet,dsc_snet,hd95,asd";

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub nets: DualNet<f32>,
    pub opt_enet: Sgd<f32>,
    pub opt_snet: Sgd<f32>,
    /// Completed optimizer steps.
    pub iter: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let nets = init_dualnet::<f32>(&cfg.model, cfg.train.seed_enet, cfg.train.seed_snet)?;
        let n = nets.enet.params().len();
        let (mu, wd) = (cfg.train.momentum as f32, cfg.train.weight_decay as f32);
        Ok(TrainState {
            nets,
            opt_enet: Sgd::new(n, mu, wd),
            opt_snet: Sgd::new(n, mu, wd),
            iter: 0,
        })
    }
}

/// Loss terms and schedule values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub iter: u64,
    pub lr: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Fraction of unlabeled pixels with `u < T`.
    pub mask_frac: f64,
    pub loss_eseg: f64,
    pub loss_sseg: f64,
    pub loss_sup: f64,
    pub loss_con: f64,
    pub loss_con_evidential: f64,
    pub loss_con_masked_ce: f64,
    pub loss_total: f64,
}

fn to_f64(x: &Array4<f32>) -> Array4<f64> {
    x.mapv(f64::from)
}

fn to_f32(x: &Array4<f64>) -> Array4<f32> {
    x.mapv(|v| v as f32)
}

fn check_finite(out: &Array4<f32>, net: &str) -> Result<()> {
    ensure!(out.iter().all(|v| v.is_finite()), NonFinite, "{net} produced non-finite logits");
    Ok(())
}

fn batch_ids(samples: &[&Sample]) -> String {
    samples.iter().map(|s| s.stem()).collect::<Vec<_>>().join(",")
}

/// Supervised terms on a labeled batch.
pub struct SupervisedPass {
    pub eseg: f64,
    pub sseg: f64,
    tape_e: Option<Tape<f32>>,
    grad_e: Option<Array4<f32>>,
    tape_s: Tape<f32>,
    grad_s: Array4<f32>,
}

/// Runs both networks (or only the S-Net) on a labeled batch.
pub fn supervised_pass(
    nets: &mut DualNet<f32>,
    labeled: &[&Sample],
    schedule: &ScheduleState,
    with_enet: bool,
) -> Result<SupervisedPass> {
    let x = stack_images(labeled);
    let k = nets.snet.config().num_classes;
    let y = OneHotLabels::from_classes(&stack_labels(labeled), k)?;
    let (mut eseg, mut tape_e, mut grad_e) = (0.0, None, None);
    if with_enet {
        let (out, tape) = nets.enet.forward_train(&x)?;
        check_finite(&out, "E-Net")?;
        let evidence = evidence_from_logits(&Logits::new(to_f64(&out))?, default_tau(k))?;
        let params = belief_and_uncertainty(&evidence)?;
        let l = eseg_loss(&params, &y, schedule)?;
        eseg = l.value;
        grad_e = Some(to_f32(&evidence.backprop(&l.grad)));
        tape_e = Some(tape);
    }
    let (out, tape_s) = nets.snet.forward_train(&x)?;
    check_finite(&out, "S-Net")?;
    let l = sseg_loss(&to_f64(&out), &y)?;
    Ok(SupervisedPass {
        eseg,
        sseg: l.value,
        tape_e,
        grad_e,
        tape_s,
        grad_s: to_f32(&l.grad),
    })
}

/// Cross-supervision terms on an unlabeled batch.
pub struct ConsistencyPass {
    pub value: f64,
    pub evidential: f64,
    pub masked_ce: f64,
    pub mask: UncertaintyMask,
    /// E-Net uncertainty `[B, 1, H, W]`.
    pub uncertainty: Array4<f64>,
    pub pseudo_enet: Array3<u8>,
    pub pseudo_snet: Array3<u8>,
    tape_e: Tape<f32>,
    grad_e: Array4<f64>,
    tape_s: Tape<f32>,
    grad_s: Array4<f64>,
}

/// Pseudo labels from each network supervise the other; both are plain
/// integer grids, so no gradient reaches the network that produced them.
pub fn consistency_pass(nets: &mut DualNet<f32>, unlabeled: &[&Sample], schedule: &ScheduleState) -> Result<ConsistencyPass> {
    let x = stack_images(unlabeled);
    let (out_e, tape_e) = nets.enet.forward_train(&x)?;
    let (out_s, tape_s) = nets.snet.forward_train(&x)?;
    check_finite(&out_e, "E-Net")?;
    check_finite(&out_s, "S-Net")?;
    let k = out_e.shape()[1];
    let evidence = evidence_from_logits(&Logits::new(to_f64(&out_e))?, default_tau(k))?;
    let params = belief_and_uncertainty(&evidence)?;
    let logits_s = to_f64(&out_s);
    let pseudo_enet = params.argmax_belief();
    let pseudo_snet = argmax_classes(&logits_s);
    let mask = UncertaintyMask::from_uncertainty(&params.uncertainty, schedule.t_mask);
    let con = consistency_loss(&params, &logits_s, &pseudo_enet, &pseudo_snet, &mask, schedule.beta)?;
    Ok(ConsistencyPass {
        value: con.value,
        evidential: con.evidential,
        masked_ce: con.masked_ce,
        mask,
        uncertainty: params.uncertainty,
        pseudo_enet,
        pseudo_snet,
        tape_e,
        grad_e: evidence.backprop(&con.grad_alpha),
        tape_s,
        grad_s: con.grad_logits,
    })
}

impl SupervisedPass {
    /// Parameter gradients `(E-Net, S-Net)`; the E-Net entry is `None` when
    /// it was not run.
    pub fn gradients(&self, nets: &DualNet<f32>) -> Result<(Option<Vec<f32>>, Vec<f32>)> {
        let ge = match (&self.tape_e, &self.grad_e) {
            (Some(tape), Some(g)) => Some(nets.enet.backward(tape, g)?),
            _ => None,
        };
        Ok((ge, nets.snet.backward(&self.tape_s, &self.grad_s)?))
    }
}

impl ConsistencyPass {
    /// Parameter gradients `(E-Net, S-Net)` of the unweighted consistency
    /// term, each scaled by `scale`.
    pub fn gradients(&self, nets: &DualNet<f32>, scale: f64) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((
            nets.enet.backward(&self.tape_e, &to_f32(&(&self.grad_e * scale)))?,
            nets.snet.backward(&self.tape_s, &to_f32(&(&self.grad_s * scale)))?,
        ))
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// One joint optimizer step on `L = L_sup + lambda(t) * L_con`.
///
/// In supervised-only mode only the S-Net is trained, on `L_sseg`, and
/// `unlabeled` is ignored.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
) -> Result<StepReport> {
    ensure!(!labeled.is_empty(), Validation, "empty labeled batch");
    let t = state.iter;
    ensure!(
        t < cfg.total_iters,
        Validation,
        "iteration {t} is past total_iters {}",
        cfg.total_iters
    );
    let schedule = ScheduleState::at(t, cfg.total_iters, cfg.lam_max, cfg.gamma, cfg.t_mask)?;
    let lr = poly_lr(t, cfg.total_iters, cfg.lr0)?;
    let evil = cfg.mode == TrainMode::Evil;
    ensure!(!evil || !unlabeled.is_empty(), Validation, "empty unlabeled batch");

    let diagnose = |what: String, sup: f64, con: f64, mask: f64| {
        EvilError::NonFinite(format!(
            "iter {t}: {what}; loss_sup={sup} loss_con={con} lr={lr} lambda={} beta={} mask_frac={mask}; labeled batch [{}]; unlabeled batch [{}]",
            schedule.lam,
            schedule.beta,
            batch_ids(labeled),
            batch_ids(unlabeled)
        ))
    };
    let lift = |e: EvilError| match e {
        EvilError::NonFinite(m) => diagnose(m, f64::NAN, f64::NAN, f64::NAN),
        other => other,
    };
    let sup = supervised_pass(&mut state.nets, labeled, &schedule, evil).map_err(lift)?;
    let con = if evil {
        Some(consistency_pass(&mut state.nets, unlabeled, &schedule).map_err(lift)?)
    } else {
        None
    };

    let mut report = StepReport {
        iter: t,
        lr,
        lambda: if evil { schedule.lam } else { 0.0 },
        beta: schedule.beta,
        loss_eseg: sup.eseg,
        loss_sseg: sup.sseg,
        loss_sup: sup.eseg + sup.sseg,
        ..StepReport::default()
    };
    if let Some(c) = &con {
        report.mask_frac = c.mask.fraction();
        report.loss_con = c.value;
        report.loss_con_evidential = c.evidential;
        report.loss_con_masked_ce = c.masked_ce;
    }
    report.loss_total = report.loss_sup + report.lambda * report.loss_con;
    if !report.loss_total.is_finite() {
        return Err(diagnose(
            "total loss is not finite".into(),
            report.loss_sup,
            report.loss_con,
            report.mask_frac,
        ));
    }

    let (mut grad_e, mut grad_s) = sup.gradients(&state.nets)?;
    if let Some(c) = &con {
        if report.lambda != 0.0 {
            let (ge, gs) = c.gradients(&state.nets, report.lambda)?;
            add_into(&mut grad_s, &gs);
            add_into(grad_e.as_mut().expect("E-Net trained in this mode"), &ge);
        }
    }
    let lr32 = lr as f32;
    state.opt_snet.step(state.nets.snet.params_mut(), &grad_s, lr32);
    if let Some(g) = grad_e {
        state.opt_enet.step(state.nets.enet.params_mut(), &g, lr32);
    }
    state.iter += 1;
    Ok(report)
}

/// Labeled, unlabeled and validation partitions for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub val: Dataset,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Batch for iteration `iter` of a stream: a pure function of the config
/// seeds and `iter`, which makes resumed runs follow the same order.
pub fn draw_batch(data: &Dataset, batch: usize, iter: u64, stream: u64, cfg: &RunConfig) -> Vec<Sample> {
    let sampler = EpochSampler {
        len: data.len(),
        seed: cfg.train.data_seed,
        stream,
    };
    sampler
        .take(iter * batch as u64, batch)
        .into_iter()
        .enumerate()
        .map(|(slot, i)| {
            let s = &data.samples[i];
            if cfg.data.augment {
                augment(s, mix_seed(&[cfg.train.data_seed, stream, iter, slot as u64]))
            } else {
                s.clone()
            }
        })
        .collect()
}

/// Validation summary for one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub enet: MetricReport,
    pub snet: MetricReport,
}

pub const EVAL_BATCH: usize = 8;

/// E-Net metrics from the certain-part prediction `argmax b`, S-Net metrics
/// from `argmax softmax`. One case per slice.
pub fn validate(nets: &DualNet<f32>, data: &Dataset, policy: EmptyMaskPolicy) -> Result<Validation> {
    let k = nets.enet.config().num_classes;
    let mut enet = MetricReport::default();
    let mut snet = MetricReport::default();
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_images(&refs);
        let pred_e = predict_with_uncertainty(&nets.enet, &x)?.classes;
        let pred_s = argmax_classes(&to_f64(&nets.snet.forward(&x)?));
        for (i, s) in chunk.iter().enumerate() {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| EvilError::Validation(format!("validation slice {} has no label", s.stem())))?;
            enet.push(s.stem(), evaluate_case(pred_e.index_axis(Axis(0), i), gt.view(), k, policy)?);
            snet.push(s.stem(), evaluate_case(pred_s.index_axis(Axis(0), i), gt.view(), k, policy)?);
        }
    }
    Ok(Validation { enet, snet })
}

/// Segmentation from one network: E-Net via belief, S-Net via softmax.
pub fn segment(net: &UNet<f32>, evidential: bool, x: &Array4<f32>) -> Result<Array3<u8>> {
    if evidential {
        Ok(predict_with_uncertainty(net, x)?.classes)
    } else {
        Ok(argmax_classes(&to_f64(&net.forward(x)?)))
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Completed iterations.
    pub iter: u64,
    pub step: StepReport,
    pub dsc_enet: f64,
    pub dsc_snet: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{},{}",
            self.iter,
            self.step.lr,
            self.step.lambda,
            self.step.beta,
            self.step.mask_frac,
            self.step.loss_sup,
            self.step.loss_con,
            self.dsc_enet,
            self.dsc_snet,
            opt(self.hd95),
            opt(self.asd)
        )
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: TrainState,
    pub best: TrainState,
    pub best_score: f64,
    pub best_iter: u64,
    pub log: Vec<LogRow>,
    /// Per-step reports of this invocation.
    pub steps: Vec<StepReport>,
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

/// Best-checkpoint bookkeeping carried across resumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestSoFar {
    pub score: f64,
    pub iter: u64,
}

/// Runs the remaining iterations of `state`, validating every
/// `eval_every` iterations and at the end. The best state is chosen by
/// E-Net validation DSC (S-Net in supervised-only mode).
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    state: TrainState,
    best: Option<(TrainState, BestSoFar)>,
    out: Option<&RunOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let evil = t.mode == TrainMode::Evil;
    ensure!(!data.labeled.is_empty(), Config, "no labeled training slices");
    ensure!(
        !evil || !data.unlabeled.is_empty(),
        Config,
        "semi-supervised training needs unlabeled slices; lower data.labeled_ratio"
    );
    ensure!(!data.val.is_empty(), Config, "no validation slices");
    ensure!(state.iter <= t.total_iters, Validation, "state is past total_iters");

    let mut log_file = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| EvilError::io(&o.dir, e))?;
            let path = o.log_path();
            let fresh = state.iter == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| EvilError::io(&path, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| EvilError::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut state = state;
    let (mut best_state, mut best) = match best {
        Some((s, b)) => (s, b),
        None => (
            state.clone(),
            BestSoFar {
                score: f64::NEG_INFINITY,
                iter: state.iter,
            },
        ),
    };
    let mut log = Vec::new();
    let mut steps = Vec::new();
    while state.iter < t.total_iters {
        let it = state.iter;
        let lab = draw_batch(&data.labeled, t.batch_labeled, it, 0, cfg);
        let unl = if evil { draw_batch(&data.unlabeled, t.batch_unlabeled, it, 1, cfg) } else { Vec::new() };
        let lab_refs: Vec<&Sample> = lab.iter().collect();
        let unl_refs: Vec<&Sample> = unl.iter().collect();
        let report = match train_step(&mut state, t, &lab_refs, &unl_refs) {
            Ok(r) => r,
            Err(e @ EvilError::NonFinite(_)) => {
                if let Some(o) = out {
                    let path = o.dir.join("nonfinite_dump.txt");
                    fs::write(&path, format!("{e}\n")).map_err(|err| EvilError::io(&path, err))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        steps.push(report);
        let done = state.iter;
        if done % t.eval_every == 0 || done == t.total_iters {
            let v = validate(&state.nets, &data.val, cfg.eval.empty_mask)?;
            let (agg_e, agg_s) = (v.enet.aggregate(), v.snet.aggregate());
            // surface metrics follow the head that is being trained and selected
            let head = if evil { agg_e } else { agg_s };
            let row = LogRow {
                iter: done,
                step: report,
                dsc_enet: agg_e.dsc,
                dsc_snet: agg_s.dsc,
                hd95: head.hd95,
                asd: head.asd,
            };
            log::info!("{}", row.to_csv());
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", row.to_csv()).map_err(|e| EvilError::io(&*path, e))?;
            }
            log.push(row);
            let score = head.dsc;
            if score > best.score {
                best = BestSoFar { score, iter: done };
                best_state = state.clone();
                if let Some(o) = out {
                    Checkpoint::new(cfg, &best_state, best).save(&o.best_path())?;
                }
            }
            if let Some(o) = out {
                Checkpoint::new(cfg, &state, best).save(&o.last_path())?;
            }
        }
    }
    Ok(TrainOutcome {
        last: state,
        best: best_state,
        best_score: best.score,
        best_iter: best.iter,
        log,
        steps,
    })
}

/// Mean `u` of the E-Net over the boundary band and over interior foreground.
pub fn uncertainty_localization(net: &UNet<f32>, data: &Dataset, radius: usize) -> Result<(f64, f64)> {
    let (mut band, mut interior, mut n) = (0.0, 0.0, 0usize);
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = predict_with_uncertainty(net, &stack_images(&refs))?;
        for (i, s) in chunk.iter().enumerate() {
            let gt = s.label.as_ref().ok_or_else(|| EvilError::Validation(format!("slice {} has no label", s.stem())))?;
            let (b, int) = crate::eval::band_vs_interior(pred.uncertainty.index_axis(Axis(0), i), gt.view(), radius);
            band += b;
            interior += int;
            n += 1;
        }
    }
    Ok((band / n.max(1) as f64, interior / n.max(1) as f64))
}
