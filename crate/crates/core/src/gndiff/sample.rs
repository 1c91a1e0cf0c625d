//! Reverse chains conditioned on `(s, r)`: the first two positions are
//! clamped at every step and only the tail is denoised.

use serde::{Deserialize, Serialize};

use super::{CandidateCurves, DiffusionConfig, NodeSequence, TokenSpace, X0Predictor};
use crate::corpus::TokenEntropy;
use crate::numkit::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Stochastic,
    /// Always take the most probable outcome of each reverse step.
    Greedy,
}

/// State of one conditional chain around step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub t: usize,
    /// `x_t` as produced by the reverse step (all-mask at `t = T`).
    pub drawn: NodeSequence,
    /// `x_t` after writing `(s, r)` into the first two positions.
    pub clamped: NodeSequence,
}

struct Chain {
    tail: Option<usize>,
    /// x̂0 tail prediction made at the step that revealed the tail.
    dist: Vec<f64>,
    rng: SeedRng,
}

fn query_curves(entropies: &TokenEntropy, space: &TokenSpace, s: u32, r: u32, cfg: &DiffusionConfig) -> CandidateCurves {
    let other = entropies.get(s as usize) + entropies.get(space.relation_token(r as usize));
    CandidateCurves::build(&entropies.entropy[..space.num_entities], other, cfg)
}

/// One reverse step for a masked tail: reveal entity `k` with probability
/// `p̂_k ρ_k(t)`, stay masked otherwise.
fn step(chain: &mut Chain, probs: &[f64], curves: &CandidateCurves, t: usize, mode: SamplingMode) {
    let mut weights: Vec<f64> = probs.iter().enumerate().map(|(k, p)| p * curves.revert(k, t)).collect();
    let stay: f64 = probs.iter().zip(&weights).map(|(p, w)| p - w).sum::<f64>().max(0.0);
    weights.push(if t == 1 { 0.0 } else { stay });
    let pick = match mode {
        SamplingMode::Stochastic => chain.rng.categorical(&weights),
        SamplingMode::Greedy => {
            let mut best = 0;
            for (i, w) in weights.iter().enumerate() {
                if *w > weights[best] {
                    best = i;
                }
            }
            best
        }
    };
    if pick < probs.len() {
        chain.tail = Some(pick);
        chain.dist = probs.to_vec();
    }
}

fn chain_rng(seed: u64, query_key: u64, chain: usize) -> SeedRng {
    SeedRng::with_stream(seed ^ query_key.wrapping_mul(0x9E37_79B9_7F4A_7C15), chain as u64)
}

/// Runs `chains` conditional chains per query, advancing all queries in
/// lock-step so each step needs one batched denoiser call.
fn run<P: X0Predictor>(
    predictor: &P,
    entropies: &TokenEntropy,
    space: &TokenSpace,
    cfg: &DiffusionConfig,
    queries: &[(u32, u32)],
    mut chains: Vec<Vec<Chain>>,
    mode: SamplingMode,
) -> Vec<Vec<Chain>> {
    let curves: Vec<CandidateCurves> = queries.iter().map(|&(s, r)| query_curves(entropies, space, s, r, cfg)).collect();
    for t in (1..=cfg.steps).rev() {
        let active: Vec<usize> = (0..queries.len()).filter(|&q| chains[q].iter().any(|c| c.tail.is_none())).collect();
        if active.is_empty() {
            break;
        }
        let pairs: Vec<(u32, u32)> = active.iter().map(|&q| queries[q]).collect();
        let preds = predictor.tail_probs(&pairs, t);
        for (&q, probs) in active.iter().zip(&preds) {
            for chain in chains[q].iter_mut().filter(|c| c.tail.is_none()) {
                step(chain, probs, &curves[q], t, mode);
            }
        }
    }
    chains
}

/// One conditional chain from all-mask. Returns the final tail entity and
/// the x̂0 tail distribution of the step that revealed it.
pub fn sample_conditional<P: X0Predictor>(
    predictor: &P,
    entropies: &TokenEntropy,
    space: &TokenSpace,
    cfg: &DiffusionConfig,
    s: u32,
    r: u32,
    mode: SamplingMode,
    rng: SeedRng,
) -> (usize, Vec<f64>) {
    let chain = Chain { tail: None, dist: Vec::new(), rng };
    let mut out = run(predictor, entropies, space, cfg, &[(s, r)], vec![vec![chain]], mode);
    let c = out.remove(0).remove(0);
    (c.tail.expect("the last step always reveals"), c.dist)
}

/// Step-by-step states of one conditional chain, from `t = T` to `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn sample_trace<P: X0Predictor>(
    predictor: &P,
    entropies: &TokenEntropy,
    space: &TokenSpace,
    cfg: &DiffusionConfig,
    s: u32,
    r: u32,
    mode: SamplingMode,
    rng: SeedRng,
) -> Vec<TraceStep> {
    let m = space.mask();
    let clamped = |tail: usize| NodeSequence([s as usize, space.relation_token(r as usize), tail]);
    let curves = query_curves(entropies, space, s, r, cfg);
    let mut chain = Chain { tail: None, dist: Vec::new(), rng };
    let mut trace = vec![TraceStep { t: cfg.steps, drawn: NodeSequence([m; 3]), clamped: clamped(m) }];
    for t in (1..=cfg.steps).rev() {
        if chain.tail.is_none() {
            let probs = predictor.tail_probs(&[(s, r)], t).remove(0);
            step(&mut chain, &probs, &curves, t, mode);
        }
        let state = clamped(chain.tail.unwrap_or(m));
        trace.push(TraceStep { t: t - 1, drawn: state, clamped: state });
    }
    trace
}

/// Diffusion distribution over entities for each `(s, r)` query: the mean
/// over `chains` conditional chains of each chain's final x̂0 tail
/// distribution. `query_keys` and `seed` select the chains' random streams.
#[allow(clippy::too_many_arguments)]
pub fn p_diff_batch<P: X0Predictor>(
    predictor: &P,
    entropies: &TokenEntropy,
    space: &TokenSpace,
    cfg: &DiffusionConfig,
    queries: &[(u32, u32)],
    query_keys: &[u64],
    chains: usize,
    mode: SamplingMode,
    seed: u64,
) -> Vec<Vec<f64>> {
    assert_eq!(queries.len(), query_keys.len());
    let chains = chains.max(1);
    let init = query_keys
        .iter()
        .map(|&key| {
            (0..chains).map(|c| Chain { tail: None, dist: Vec::new(), rng: chain_rng(seed, key, c) }).collect()
        })
        .collect();
    run(predictor, entropies, space, cfg, queries, init, mode)
        .into_iter()
        .map(|cs| {
            let mut mean = vec![0.0; predictor.num_entities()];
            for c in &cs {
                for (m, p) in mean.iter_mut().zip(&c.dist) {
                    *m += p / cs.len() as f64;
                }
            }
            mean
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn p_diff<P: X0Predictor>(
    predictor: &P,
    entropies: &TokenEntropy,
    space: &TokenSpace,
    cfg: &DiffusionConfig,
    s: u32,
    r: u32,
    chains: usize,
    mode: SamplingMode,
    seed: u64,
) -> Vec<f64> {
    p_diff_batch(predictor, entropies, space, cfg, &[(s, r)], &[0], chains, mode, seed).remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::entropies_from_counts;

    struct Fixed {
        probs: Vec<f64>,
    }

    impl X0Predictor for Fixed {
        fn num_entities(&self) -> usize {
            self.probs.len()
        }

        fn tail_probs(&self, pairs: &[(u32, u32)], _t: usize) -> Vec<Vec<f64>> {
            vec![self.probs.clone(); pairs.len()]
        }
    }

    /// Prediction depends on the step so the reveal time matters.
    struct Drifting;

    impl X0Predictor for Drifting {
        fn num_entities(&self) -> usize {
            3
        }

        fn tail_probs(&self, pairs: &[(u32, u32)], t: usize) -> Vec<Vec<f64>> {
            let a = 1.0 / (1.0 + t as f64);
            vec![vec![a, (1.0 - a) / 2.0, (1.0 - a) / 2.0]; pairs.len()]
        }
    }

    fn setup() -> (TokenEntropy, TokenSpace, DiffusionConfig) {
        let counts = [4, 2, 1, 6, 0];
        let te = TokenEntropy { counts: counts.to_vec(), entropy: entropies_from_counts(&counts), total_positions: 13 };
        (te, TokenSpace::new(3, 1), DiffusionConfig { steps: 8, mu: 0.25 })
    }

    #[test]
    fn degenerate_predictor_fixes_tail() {
        let (te, space, cfg) = setup();
        let fixed = Fixed { probs: vec![0.0, 0.0, 1.0] };
        for c in 0..50 {
            let (tail, dist) =
                sample_conditional(&fixed, &te, &space, &cfg, 0, 0, SamplingMode::Stochastic, SeedRng::new(c));
            assert_eq!(tail, 2);
            assert_eq!(dist, vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn trace_starts_all_masked_then_clamps() {
        let (te, space, cfg) = setup();
        let m = space.mask();
        let trace = sample_trace(&Drifting, &te, &space, &cfg, 1, 0, SamplingMode::Stochastic, SeedRng::new(2));
        assert_eq!(trace[0].drawn, NodeSequence([m, m, m]));
        assert_eq!(trace[0].clamped, NodeSequence([1, 3, m]));
        assert_eq!(trace.len(), cfg.steps + 1);
        let last = trace.last().unwrap();
        assert_eq!(last.t, 0);
        assert!(last.clamped.0[2] < 3);
        // once revealed the tail never changes or re-masks
        let first = trace.iter().position(|s| s.clamped.0[2] != m).unwrap();
        assert!(trace[first..].iter().all(|s| s.clamped == last.clamped));
        assert!(trace.iter().all(|s| s.clamped.0[..2] == [1, 3]));
    }

    #[test]
    fn single_greedy_chain_is_its_own_distribution() {
        let (te, space, cfg) = setup();
        let p = p_diff(&Drifting, &te, &space, &cfg, 0, 0, 1, SamplingMode::Greedy, 7);
        let (_, dist) = sample_conditional(&Drifting, &te, &space, &cfg, 0, 0, SamplingMode::Greedy, SeedRng::new(99));
        assert_eq!(p, dist);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_sums_to_one_and_is_seeded() {
        let (te, space, cfg) = setup();
        let queries = [(0, 0), (2, 0), (1, 0)];
        let a = p_diff_batch(&Drifting, &te, &space, &cfg, &queries, &[0, 1, 2], 8, SamplingMode::Stochastic, 5);
        let b = p_diff_batch(&Drifting, &te, &space, &cfg, &queries, &[0, 1, 2], 8, SamplingMode::Stochastic, 5);
        assert_eq!(a, b);
        for p in &a {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // a query's result does not depend on its batch neighbours
        let solo = p_diff_batch(&Drifting, &te, &space, &cfg, &queries[1..2], &[1], 8, SamplingMode::Stochastic, 5);
        assert_eq!(solo[0], a[1]);
    }
}
