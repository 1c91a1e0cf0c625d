//! Absorbing-state discrete diffusion over `(subject, relation, object)`
//! node sequences.
//!
//! Every position survives the forward process with probability `ᾱ_t^i`
//! and is otherwise replaced by the mask token. The survival curve bends
//! with the token's entropy so that informative tokens are masked first.

mod denoiser;
mod loss;
mod sample;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenEntropy;
use crate::error::ModelError;
use crate::numkit::{NumError, Tensor};

pub use denoiser::{denoise_x0, time_embedding, DenoiserParams, DenoiserVars, X0Predictor, DENOISER_TENSOR_NAMES};
pub use loss::{diffusion_loss, diffusion_loss_at, PRIOR_KL};
pub use sample::{p_diff, p_diff_batch, sample_conditional, sample_trace, SamplingMode, TraceStep};

/// Combined vocabulary `entities ++ relations ++ [M]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub num_entities: usize,
    pub num_relations: usize,
}

impl TokenSpace {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        TokenSpace { num_entities, num_relations }
    }

    /// Vocabulary size `K`, including the mask.
    pub fn size(&self) -> usize {
        self.num_entities + self.num_relations + 1
    }

    pub fn mask(&self) -> usize {
        self.num_entities + self.num_relations
    }

    pub fn relation_token(&self, r: usize) -> usize {
        self.num_entities + r
    }

    /// Tokens a clean sequence may hold at `pos`.
    pub fn role_range(&self, pos: usize) -> std::ops::Range<usize> {
        if pos == 1 {
            self.num_entities..self.num_entities + self.num_relations
        } else {
            0..self.num_entities
        }
    }

    pub fn allowed(&self, pos: usize, token: usize) -> bool {
        self.role_range(pos).contains(&token)
    }

    /// `(s, r, o)` as combined-vocabulary tokens.
    pub fn sequence(&self, s: u32, r: u32, o: u32) -> NodeSequence {
        NodeSequence([s as usize, self.relation_token(r as usize), o as usize])
    }

    pub fn check(&self, seq: &NodeSequence, allow_mask: bool) -> Result<(), NumError> {
        for (pos, &tok) in seq.0.iter().enumerate() {
            if !(self.allowed(pos, tok) || (allow_mask && tok == self.mask())) {
                return Err(NumError::Domain {
                    op: "node_sequence",
                    detail: format!("token {tok} is not valid at position {pos}"),
                });
            }
        }
        Ok(())
    }
}

/// Three combined-vocabulary token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeSequence(pub [usize; 3]);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub mu: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { steps: 50, mu: 0.25 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps < 2 {
            return Err(ModelError::Config(format!("diffusion steps must be at least 2, got {}", self.steps)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(ModelError::Config(format!("schedule amplitude must be non-negative, got {}", self.mu)));
        }
        Ok(())
    }
}

fn bend(t: usize, steps: usize, mu: f64) -> f64 {
    if t == 0 || t == steps {
        0.0
    } else {
        mu * (t as f64 * PI / steps as f64).sin()
    }
}

/// `1 − (Σ_j H_j) / (n·H_i)`; zero for a token with no information.
pub fn normalized_entropy(h: f64, total: f64, n: usize) -> f64 {
    if h > 0.0 {
        1.0 - total / (n as f64 * h)
    } else {
        0.0
    }
}

/// Unclamped survival probability.
pub fn raw_alpha(t: usize, steps: usize, mu: f64, h_tilde: f64) -> f64 {
    if t == steps {
        return 0.0;
    }
    1.0 - t as f64 / steps as f64 - bend(t, steps, mu) * h_tilde
}

/// Clamped, non-increasing survival curve `ᾱ_0..ᾱ_T` for one position.
pub fn alpha_curve(steps: usize, mu: f64, h_tilde: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut prev = 1.0f64;
    for t in 0..=steps {
        let a = raw_alpha(t, steps, mu, h_tilde).clamp(0.0, 1.0).min(prev);
        out.push(a);
        prev = a;
    }
    out
}

/// Probability that a masked position reverts to its clean token on the
/// step `t → t−1`.
pub fn revert_probability(alpha_prev: f64, alpha_t: f64) -> f64 {
    if alpha_t >= 1.0 {
        1.0
    } else {
        ((alpha_prev - alpha_t) / (1.0 - alpha_t)).clamp(0.0, 1.0)
    }
}

/// Per-position survival schedule of one clean sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub mu: f64,
    pub entropy: [f64; 3],
    pub h_tilde: [f64; 3],
    /// `ᾱ_t` before clamping, `t = 0..=T`.
    pub raw: Vec<[f64; 3]>,
    pub alpha: Vec<[f64; 3]>,
    /// Interior steps where clamping changed at least one position.
    pub saturated_steps: usize,
}

impl DiffusionSchedule {
    pub fn from_entropies(entropy: [f64; 3], cfg: &DiffusionConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let total: f64 = entropy.iter().sum();
        let h_tilde = entropy.map(|h| normalized_entropy(h, total, 3));
        let steps = cfg.steps;
        let raw: Vec<[f64; 3]> =
            (0..=steps).map(|t| h_tilde.map(|ht| raw_alpha(t, steps, cfg.mu, ht))).collect();
        let curves = h_tilde.map(|ht| alpha_curve(steps, cfg.mu, ht));
        let alpha: Vec<[f64; 3]> = (0..=steps).map(|t| [curves[0][t], curves[1][t], curves[2][t]]).collect();
        let saturated_steps = (1..steps).filter(|&t| raw[t] != alpha[t]).count();
        if 2 * saturated_steps > steps - 1 {
            log::warn!(
                "schedule clamping saturated {saturated_steps} of {} interior steps (mu = {})",
                steps - 1,
                cfg.mu
            );
        }
        Ok(DiffusionSchedule { steps, mu: cfg.mu, entropy, h_tilde, raw, alpha, saturated_steps })
    }

    pub fn alpha(&self, t: usize, pos: usize) -> f64 {
        self.alpha[t][pos]
    }

    /// `β_t = 1 − ᾱ_t/ᾱ_{t−1}`, one once the position is fully masked.
    pub fn beta(&self, t: usize, pos: usize) -> f64 {
        let prev = self.alpha[t - 1][pos];
        if prev == 0.0 {
            1.0
        } else {
            1.0 - self.alpha[t][pos] / prev
        }
    }

    pub fn revert(&self, t: usize, pos: usize) -> f64 {
        revert_probability(self.alpha[t - 1][pos], self.alpha[t][pos])
    }
}

pub fn build_schedule(
    entropies: &TokenEntropy,
    seq: &NodeSequence,
    cfg: &DiffusionConfig,
) -> Result<DiffusionSchedule, ModelError> {
    DiffusionSchedule::from_entropies(seq.0.map(|tok| entropies.get(tok)), cfg)
}

fn check_t(op: &'static str, t: usize, lo: usize, steps: usize) -> Result<(), NumError> {
    if t < lo || t > steps {
        return Err(NumError::Domain { op, detail: format!("t = {t} outside [{lo}, {steps}]") });
    }
    Ok(())
}

/// `q(x_t | x_0)` per position as a `3 × K` tensor.
pub fn forward_marginal(
    schedule: &DiffusionSchedule,
    space: &TokenSpace,
    x0: &NodeSequence,
    t: usize,
) -> Result<Tensor, NumError> {
    check_t("forward_marginal", t, 0, schedule.steps)?;
    space.check(x0, false)?;
    let k = space.size();
    let mut out = Tensor::zeros(&[3, k]);
    for pos in 0..3 {
        let a = schedule.alpha(t, pos);
        let row = out.row_mut(pos);
        row[x0.0[pos]] += a;
        row[space.mask()] += 1.0 - a;
    }
    Ok(out)
}

/// `q(x_{t−1} | x_t, x_0)` per position as a `3 × K` tensor.
pub fn posterior(
    schedule: &DiffusionSchedule,
    space: &TokenSpace,
    x_t: &NodeSequence,
    x0: &NodeSequence,
    t: usize,
) -> Result<Tensor, NumError> {
    check_t("posterior", t, 1, schedule.steps)?;
    space.check(x0, false)?;
    let mask = space.mask();
    let mut out = Tensor::zeros(&[3, space.size()]);
    for pos in 0..3 {
        let (cur, clean) = (x_t.0[pos], x0.0[pos]);
        let row = out.row_mut(pos);
        if cur == clean {
            row[cur] = 1.0;
        } else if cur == mask {
            let rho = schedule.revert(t, pos);
            row[clean] = rho;
            row[mask] += 1.0 - rho;
        } else {
            return Err(NumError::Domain {
                op: "posterior",
                detail: format!("x_t token {cur} at position {pos} is neither x_0 ({clean}) nor the mask"),
            });
        }
    }
    Ok(out)
}

/// One-step absorbing transition matrix `Q_t` for `pos`: every token stays
/// with probability `1 − β_t` and jumps to the mask otherwise.
pub fn transition_matrix(schedule: &DiffusionSchedule, space: &TokenSpace, pos: usize, t: usize) -> Result<Tensor, NumError> {
    check_t("transition_matrix", t, 1, schedule.steps)?;
    let k = space.size();
    let beta = schedule.beta(t, pos);
    let mut q = Tensor::zeros(&[k, k]);
    for j in 0..k {
        let row = q.row_mut(j);
        if j == space.mask() {
            row[j] = 1.0;
        } else {
            row[j] = 1.0 - beta;
            row[space.mask()] = beta;
        }
    }
    Ok(q)
}

/// Survival curves for every candidate token at one position, with the
/// other two positions' entropies held fixed. Tokens with equal entropy
/// share a curve.
#[derive(Clone, Debug)]
pub(crate) struct CandidateCurves {
    /// Curve index for each candidate, in role order.
    pub group: Vec<usize>,
    pub curves: Vec<Vec<f64>>,
}

impl CandidateCurves {
    pub fn build(entropies: &[f64], other_sum: f64, cfg: &DiffusionConfig) -> Self {
        let mut curves = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let group = entropies
            .iter()
            .map(|&h| {
                *lookup.entry(h.to_bits()).or_insert_with(|| {
                    curves.push(alpha_curve(cfg.steps, cfg.mu, normalized_entropy(h, other_sum + h, 3)));
                    curves.len() - 1
                })
            })
            .collect();
        CandidateCurves { group, curves }
    }

    pub fn revert(&self, candidate: usize, t: usize) -> f64 {
        let c = &self.curves[self.group[candidate]];
        revert_probability(c[t - 1], c[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeedRng;

    fn cfg(steps: usize, mu: f64) -> DiffusionConfig {
        DiffusionConfig { steps, mu }
    }

    #[test]
    fn zero_amplitude_is_linear() {
        let s = DiffusionSchedule::from_entropies([1.0, 2.0, 5.0], &cfg(10, 0.0)).unwrap();
        for t in 0..=10 {
            for pos in 0..3 {
                assert!((s.alpha(t, pos) - (1.0 - t as f64 / 10.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn entropy_weighted_survival_is_linear_before_clamping() {
        let mut rng = SeedRng::new(5);
        for _ in 0..50 {
            let h = [rng.uniform_in(0.1, 8.0), rng.uniform_in(0.1, 8.0), rng.uniform_in(0.1, 8.0)];
            let s = DiffusionSchedule::from_entropies(h, &cfg(50, rng.uniform_in(0.0, 2.0))).unwrap();
            let total: f64 = h.iter().sum();
            for t in 0..=50 {
                let lhs: f64 = (0..3).map(|i| s.raw[t][i] * h[i]).sum();
                assert!((lhs - (1.0 - t as f64 / 50.0) * total).abs() < 1e-12, "t = {t}");
            }
        }
    }

    #[test]
    fn boundaries_monotonicity_and_ordering() {
        let s = DiffusionSchedule::from_entropies([0.5, 3.0, 9.0], &cfg(20, 0.8)).unwrap();
        for pos in 0..3 {
            assert_eq!(s.alpha(0, pos), 1.0);
            assert_eq!(s.alpha(20, pos), 0.0);
            for t in 1..=20 {
                assert!(s.alpha(t, pos) <= s.alpha(t - 1, pos));
                assert!((0.0..=1.0).contains(&s.beta(t, pos)));
            }
        }
        for t in 1..20 {
            assert!(s.raw[t][0] > s.raw[t][1] && s.raw[t][1] > s.raw[t][2]);
        }
        let same = DiffusionSchedule::from_entropies([2.0, 2.0, 7.0], &cfg(20, 0.5)).unwrap();
        assert!(same.alpha.iter().all(|a| a[0] == a[1]));
    }

    #[test]
    fn heavy_amplitude_is_reported() {
        let s = DiffusionSchedule::from_entropies([0.01, 5.0, 5.0], &cfg(10, 5.0)).unwrap();
        assert!(2 * s.saturated_steps > 9);
        assert!(DiffusionSchedule::from_entropies([1.0; 3], &cfg(1, 0.1)).is_err());
    }

    #[test]
    fn marginals_and_posteriors_are_distributions() {
        let space = TokenSpace::new(3, 1);
        let s = DiffusionSchedule::from_entropies([1.0, 0.5, 2.0], &cfg(5, 0.3)).unwrap();
        let x0 = space.sequence(0, 0, 2);
        let m = space.mask();
        assert_eq!(forward_marginal(&s, &space, &x0, 0).unwrap().row(0)[0], 1.0);
        let end = forward_marginal(&s, &space, &x0, 5).unwrap();
        assert!((0..3).all(|p| end.row(p)[m] == 1.0));
        for t in 1..=5 {
            let xt = NodeSequence([m, x0.0[1], m]);
            let post = posterior(&s, &space, &xt, &x0, t).unwrap();
            for p in 0..3 {
                assert!((post.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(post.row(1)[x0.0[1]], 1.0);
        }
        let bad = NodeSequence([1, x0.0[1], m]);
        assert!(posterior(&s, &space, &bad, &x0, 2).is_err());
    }

    #[test]
    fn last_step_reverts_with_previous_survival() {
        let mut s = DiffusionSchedule::from_entropies([1.0; 3], &cfg(4, 0.0)).unwrap();
        s.alpha[3] = [0.5; 3];
        let space = TokenSpace::new(2, 1);
        let x0 = space.sequence(0, 0, 1);
        let xt = NodeSequence([space.mask(); 3]);
        let post = posterior(&s, &space, &xt, &x0, 4).unwrap();
        assert_eq!(post.row(2)[1], 0.5);
        // general form: q(x_t|x_{t-1}) q(x_{t-1}|x_0) / q(x_t|x_0)
        let q = transition_matrix(&s, &space, 2, 4).unwrap();
        let prior = forward_marginal(&s, &space, &x0, 3).unwrap();
        let marg = forward_marginal(&s, &space, &x0, 4).unwrap();
        let m = space.mask();
        let general = q.get(1, m) * prior.row(2)[1] / marg.row(2)[m];
        assert!((general - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let s = DiffusionSchedule::from_entropies([1.0, 2.0, 3.0], &cfg(6, 0.2)).unwrap();
        let space = TokenSpace::new(3, 2);
        for t in 1..=6 {
            for pos in 0..3 {
                let q = transition_matrix(&s, &space, pos, t).unwrap();
                for j in 0..space.size() {
                    assert!((q.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                assert_eq!(q.get(space.mask(), space.mask()), 1.0);
            }
        }
    }

    #[test]
    fn candidate_curves_match_full_schedules() {
        let c = cfg(12, 0.4);
        let h = [0.7, 2.5, 2.5, 4.0];
        let curves = CandidateCurves::build(&h, 3.0, &c);
        assert_eq!(curves.curves.len(), 3);
        for (k, &hk) in h.iter().enumerate() {
            let full = DiffusionSchedule::from_entropies([1.0, 2.0, hk], &c).unwrap();
            for t in 1..=12 {
                assert_eq!(curves.revert(k, t), full.revert(t, 2));
            }
        }
    }
}
