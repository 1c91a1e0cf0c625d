use std::collections::HashMap;
use std::rc::Rc;

use super::{CandidateCurves, DenoiserVars, DiffusionConfig, DiffusionSchedule, NodeSequence, TokenSpace};
use crate::corpus::TokenEntropy;
use crate::error::ModelError;
use crate::numkit::{SeedRng, Tape, Tensor, Var};

/// `KL(q(x_T | x_0) ‖ p(x_T))`: both sides are the all-mask point mass.
pub const PRIOR_KL: f64 = 0.0;

/// Samples one step `t ∈ [1, T]` and one corrupted state per clean
/// sequence, then returns [`diffusion_loss_at`] for those draws.
pub fn diffusion_loss(
    tape: &mut Tape,
    vars: &DenoiserVars,
    space: &TokenSpace,
    entropies: &TokenEntropy,
    cfg: &DiffusionConfig,
    x0s: &[NodeSequence],
    rng: &mut SeedRng,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let mut ts = Vec::with_capacity(x0s.len());
    let mut xts = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let t = 1 + rng.below(cfg.steps);
        let schedule = DiffusionSchedule::from_entropies(x0.0.map(|tok| entropies.get(tok)), cfg)?;
        let mut xt = *x0;
        for pos in 0..3 {
            if rng.uniform() >= schedule.alpha(t, pos) {
                xt.0[pos] = space.mask();
            }
        }
        ts.push(t);
        xts.push(xt);
    }
    diffusion_loss_at(tape, vars, space, entropies, cfg, x0s, &xts, &ts)
}

/// Batch-averaged one-step term of the variational bound,
/// `KL(q(x_{t−1} | x_t, x_0) ‖ p_θ(x_{t−1} | x_t))`, summed over positions.
///
/// `p_θ` marginalizes the analytic posterior over the predicted x̂0, and
/// each candidate reverts with its own survival curve. Unmasked positions
/// contribute zero; at `t = 1` a masked position contributes
/// `−log p_θ(x_0 | x_1)`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_at(
    tape: &mut Tape,
    vars: &DenoiserVars,
    space: &TokenSpace,
    entropies: &TokenEntropy,
    cfg: &DiffusionConfig,
    x0s: &[NodeSequence],
    xts: &[NodeSequence],
    ts: &[usize],
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let (k, mask) = (space.size(), space.mask());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut row_mask = Vec::new();
    let mut weights = Vec::new();
    let mut c_log_p = Vec::new();
    let mut c_log_m = Vec::new();
    let mut constant = 0.0;
    let mut cache: HashMap<(usize, u64), CandidateCurves> = HashMap::new();
    for (b, ((x0, xt), &t)) in x0s.iter().zip(xts).zip(ts).enumerate() {
        space.check(x0, false)?;
        if t == 0 || t > cfg.steps {
            return Err(ModelError::Config(format!("step {t} outside [1, {}]", cfg.steps)));
        }
        for pos in 0..3 {
            if xt.0[pos] != mask {
                continue;
            }
            let role = space.role_range(pos);
            let other: f64 = (0..3).filter(|&j| j != pos).map(|j| entropies.get(x0.0[j])).sum();
            let curves = cache
                .entry((usize::from(pos == 1), other.to_bits()))
                .or_insert_with(|| CandidateCurves::build(&entropies.entropy[role.clone()], other, cfg));
            let truth = x0.0[pos];
            let rho = curves.revert(truth - role.start, t);
            let stay = 1.0 - rho;
            rows.push(3 * b + pos);
            targets.push(truth);
            c_log_p.push(rho);
            c_log_m.push(stay);
            if stay > 0.0 {
                constant += stay * stay.ln();
            }
            for tok in 0..k {
                let allowed = role.contains(&tok);
                row_mask.push(allowed);
                weights.push(match (allowed, stay > 0.0) {
                    (false, _) => 0.0,
                    // the mask-mass term is multiplied by zero; keep its log finite
                    (true, false) => 1.0,
                    (true, true) => 1.0 - curves.revert(tok - role.start, t),
                });
            }
        }
    }
    let batch = x0s.len().max(1) as f64;
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = rows.len();
    let logits = vars.logits(tape, space, xts, ts)?;
    let picked_logits = tape.gather_rows(logits, &rows)?;
    let row_mask = Rc::new(row_mask);
    let log_p = tape.masked_log_softmax_rows(picked_logits, row_mask.clone())?;
    let log_p_true = tape.pick(log_p, &targets)?;
    let p = tape.masked_softmax_rows(picked_logits, row_mask)?;
    let w = tape.constant(Tensor::new(vec![n, k], weights)?);
    let weighted = tape.mul(p, w)?;
    let mask_mass = tape.sum_rows(weighted)?;
    let log_mask_mass = tape.log(mask_mass)?;
    let c1 = tape.constant(Tensor::new(vec![n, 1], c_log_p)?);
    let c2 = tape.constant(Tensor::new(vec![n, 1], c_log_m)?);
    let a = tape.mul(log_p_true, c1)?;
    let b = tape.mul(log_mask_mass, c2)?;
    let both = tape.add(a, b)?;
    let total = tape.sum(both)?;
    let kl = tape.scale(total, -1.0)?;
    let kl = tape.add_scalar(kl, constant)?;
    Ok(tape.scale(kl, 1.0 / batch)?)
}
