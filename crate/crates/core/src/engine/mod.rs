//! Two-stage joint training of the DPCL heads and the diffusion denoiser.

mod checkpoint;
mod config;

use std::time::Instant;

use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossReduction, TrainConfig};

use crate::corpus::{build_periodic_index, token_entropies, PeriodicIndex, Quad, QuadStore, Split, TokenEntropy};
use crate::dpcl::{ce_loss, nonperiodic_scores, periodic_scores, supcon_loss, DpclParams, DpclVars, QueryBatch};
use crate::error::ModelError;
use crate::evaluate::{evaluate_queries, Component};
use crate::geometry::{project_rows_in_place, DistanceKind};
use crate::gndiff::{diffusion_loss, DenoiserParams, DenoiserVars, NodeSequence, TokenSpace};
use crate::numkit::{AdamConfig, AdamState, NumError, SeedRng, Tape, Tensor, Var};

/// Trainable state plus the corpus statistics the diffusion schedule needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub space: TokenSpace,
    pub dpcl: DpclParams,
    pub denoiser: DenoiserParams,
    pub entropies: TokenEntropy,
}

pub const NUM_DPCL_TENSORS: usize = 8;

impl Model {
    pub fn init(cfg: &TrainConfig, store: &QuadStore) -> Self {
        let space = TokenSpace::new(store.num_entities(), store.num_relations());
        let mut rng = SeedRng::with_stream(cfg.seed, 0);
        let dpcl = DpclParams::init(space.num_entities, space.num_relations, cfg.d_dpcl, &mut rng);
        let denoiser = DenoiserParams::init(space, cfg.d_diff, &mut rng);
        Model { space, dpcl, denoiser, entropies: token_entropies(store) }
    }

    /// DPCL tensors followed by denoiser tensors.
    pub fn params(&self) -> Vec<&Tensor> {
        self.dpcl.tensors().into_iter().chain(self.denoiser.tensors()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.dpcl.tensors_mut().into_iter().chain(self.denoiser.tensors_mut()).collect()
    }

    /// Optimizer slots that may change under the ablation flags.
    pub fn active_mask(cfg: &TrainConfig) -> Vec<bool> {
        let mut active = vec![!cfg.no_dpcl; NUM_DPCL_TENSORS];
        active.extend([!cfg.no_gndiff; 5]);
        active
    }
}

/// `α·L_diff + (1−α)·(L_ce + L_sup)` with the ablation flags applied and
/// `L_sup` dropped in stage 1.
pub fn joint_loss(cfg: &TrainConfig, stage2: bool, ce: f64, sup: f64, diff: f64) -> f64 {
    let alpha = cfg.effective_alpha();
    let sup = if stage2 { sup } else { 0.0 };
    alpha * diff + (1.0 - alpha) * (ce + sup)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub sup: f64,
    pub diff: f64,
}

/// Registers the model and records the joint loss of one batch. Components
/// with zero weight are not built.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    dv: &DpclVars,
    nv: &DenoiserVars,
    model: &Model,
    cfg: &TrainConfig,
    stage2: bool,
    quads: &[Quad],
    index: &PeriodicIndex,
    rng: &mut SeedRng,
) -> Result<(Var, StepLosses), ModelError> {
    let alpha = cfg.effective_alpha();
    let scale = match cfg.loss_reduction {
        LossReduction::Mean => 1.0,
        LossReduction::Sum => quads.len() as f64,
    };
    let mut losses = StepLosses::default();
    let mut terms = Vec::new();
    if alpha < 1.0 {
        let batch = QueryBatch::build(quads, index);
        let sp = periodic_scores(tape, dv, &batch, &cfg.scoring())?;
        let snp = nonperiodic_scores(tape, dv, &batch, &cfg.scoring())?;
        let mut dpcl = ce_loss(tape, sp, snp, &batch.targets())?;
        losses.ce = tape.value(dpcl).item() * scale;
        if stage2 {
            let sup = supcon_loss(tape, dv, &batch, cfg.tau)?;
            losses.sup = tape.value(sup).item() * scale;
            dpcl = tape.add(dpcl, sup)?;
        }
        terms.push(tape.scale(dpcl, (1.0 - alpha) * scale)?);
    }
    if alpha > 0.0 {
        let x0s: Vec<NodeSequence> = quads.iter().map(|q| model.space.sequence(q.s, q.r, q.o)).collect();
        let diff = diffusion_loss(tape, nv, &model.space, &model.entropies, &cfg.diffusion(), &x0s, rng)?;
        losses.diff = tape.value(diff).item() * scale;
        terms.push(tape.scale(diff, alpha * scale)?);
    }
    let total = match terms.as_slice() {
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("at least one loss component is active"),
    };
    losses.total = tape.value(total).item();
    Ok((total, losses))
}

fn uses_ball(cfg: &TrainConfig) -> bool {
    let s = cfg.scoring().mapping;
    s.periodic() == DistanceKind::Poincare || s.nonperiodic() == DistanceKind::Poincare
}

fn non_finite(epoch: usize, batch: usize, l: StepLosses) -> ModelError {
    ModelError::NonFiniteLoss { epoch, batch, ce: l.ce, sup: l.sup, diff: l.diff }
}

/// Forward, backward, Adam update, and ball re-projection for one batch.
pub fn train_step(
    ckpt: &mut Checkpoint,
    stage2: bool,
    quads: &[Quad],
    index: &PeriodicIndex,
    rng: &mut SeedRng,
    batch_no: usize,
) -> Result<StepLosses, ModelError> {
    let cfg = &ckpt.config;
    let mut tape = Tape::new();
    let dv = DpclVars::register(&mut tape, &ckpt.model.dpcl, !cfg.no_dpcl);
    let nv = DenoiserVars::register(&mut tape, &ckpt.model.denoiser, !cfg.no_gndiff);
    let (root, losses) = match joint_loss_on_tape(&mut tape, &dv, &nv, &ckpt.model, cfg, stage2, quads, index, rng) {
        Ok(v) => v,
        Err(ModelError::Num(NumError::NonFinite { .. })) => {
            let nan = StepLosses { total: f64::NAN, ce: f64::NAN, sup: f64::NAN, diff: f64::NAN };
            return Err(non_finite(ckpt.epoch, batch_no, nan));
        }
        Err(e) => return Err(e),
    };
    if !losses.total.is_finite() {
        return Err(non_finite(ckpt.epoch, batch_no, losses));
    }
    let grads = tape.backward(root)?;
    let vars: Vec<Var> = dv.all().into_iter().chain(nv.all()).collect();
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let active = Model::active_mask(cfg);
    let ball = uses_ball(cfg) && !cfg.no_dpcl;
    let mut params = ckpt.model.params_mut();
    ckpt.optimizer.update(&mut params, &grads, Some(&active))?;
    if ball {
        project_rows_in_place(&mut ckpt.model.dpcl.entity);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_sup: f64,
    pub loss_diff: f64,
    pub val_mrr: Option<f64>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Snapshot with the best validation MRR seen during this run.
    pub best: Option<Checkpoint>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn init_checkpoint(cfg: &TrainConfig, store: &QuadStore) -> Result<Checkpoint, ModelError> {
    cfg.validate()?;
    let model = Model::init(cfg, store);
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let optimizer = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &shape_refs);
    Ok(Checkpoint {
        config: cfg.clone(),
        model,
        optimizer,
        epoch: 0,
        rng: epoch_rng(cfg.seed, 0).state(),
        best_val_mrr: None,
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> SeedRng {
    SeedRng::with_stream(seed, 1 + epoch as u64)
}

/// Full run from a fresh initialization.
pub fn train(
    cfg: &TrainConfig,
    store: &QuadStore,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, ModelError> {
    let ckpt = init_checkpoint(cfg, store)?;
    resume(ckpt, store, cfg.epochs(), on_epoch)
}

/// Continues `ckpt` until `stop_after` completed epochs.
pub fn resume(
    mut ckpt: Checkpoint,
    store: &QuadStore,
    stop_after: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, ModelError> {
    ckpt.config.validate()?;
    let train_quads = store.split(Split::Train).to_vec();
    if train_quads.is_empty() {
        return Err(ModelError::Config("training split is empty".into()));
    }
    let index = build_periodic_index(store, ckpt.config.lambda, &Split::ALL)?;
    let valid = store.split(Split::Valid).to_vec();
    let mut best: Option<Checkpoint> = None;
    let mut metrics = Vec::new();
    let stop_after = stop_after.min(ckpt.config.epochs());
    while ckpt.epoch < stop_after {
        let started = Instant::now();
        let stage2 = ckpt.epoch >= ckpt.config.epochs_stage1;
        let mut rng = SeedRng::from_state(ckpt.rng);
        let mut order = train_quads.clone();
        rng.shuffle(&mut order);
        let mut sums = StepLosses::default();
        for (b, chunk) in order.chunks(ckpt.config.batch).enumerate() {
            let l = train_step(&mut ckpt, stage2, chunk, &index, &mut rng, b)?;
            let w = chunk.len() as f64;
            sums.total += l.total * w;
            sums.ce += l.ce * w;
            sums.sup += l.sup * w;
            sums.diff += l.diff * w;
        }
        ckpt.epoch += 1;
        ckpt.rng = epoch_rng(ckpt.config.seed, ckpt.epoch).state();
        let every = ckpt.config.val_every;
        let val_mrr = if every > 0 && !valid.is_empty() && ckpt.epoch % every == 0 {
            let reports = evaluate_queries(&ckpt.model, &ckpt.config, &index, &valid, Component::Full)?;
            Some(reports.mrr)
        } else {
            None
        };
        if let Some(mrr) = val_mrr {
            if ckpt.best_val_mrr.is_none_or(|b| mrr > b) {
                ckpt.best_val_mrr = Some(mrr);
                best = Some(ckpt.clone());
            }
        }
        let n = train_quads.len() as f64;
        let m = EpochMetrics {
            epoch: ckpt.epoch,
            loss_total: sums.total / n,
            loss_ce: sums.ce / n,
            loss_sup: sums.sup / n,
            loss_diff: sums.diff / n,
            val_mrr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.6} (ce {:.6}, sup {:.6}, diff {:.6}) val_mrr {:?}",
            m.epoch,
            m.loss_total,
            m.loss_ce,
            m.loss_sup,
            m.loss_diff,
            m.val_mrr
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { last: ckpt, best, metrics })
}

/// Joint loss of `quads` under fixed diffusion draws from `seed`, without
/// updating anything. Repeated calls on the same model agree exactly.
pub fn evaluate_joint_loss(
    model: &Model,
    cfg: &TrainConfig,
    store: &QuadStore,
    quads: &[Quad],
    stage2: bool,
    seed: u64,
) -> Result<f64, ModelError> {
    let index = build_periodic_index(store, cfg.lambda, &Split::ALL)?;
    let mut rng = SeedRng::new(seed);
    let mut total = 0.0;
    for chunk in quads.chunks(cfg.batch) {
        let mut tape = Tape::new();
        let dv = DpclVars::register(&mut tape, &model.dpcl, false);
        let nv = DenoiserVars::register(&mut tape, &model.denoiser, false);
        let (_, l) = joint_loss_on_tape(&mut tape, &dv, &nv, model, cfg, stage2, chunk, &index, &mut rng)?;
        total += l.total * chunk.len() as f64;
    }
    Ok(total / quads.len().max(1) as f64)
}
