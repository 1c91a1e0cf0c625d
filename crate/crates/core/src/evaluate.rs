//! Probability combination, time-filtered ranking, stratified reports, and
//! the ablation / mapping-strategy harness.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{PeriodicIndex, Quad, QuadStore, Split};
use crate::dpcl::{combined_scores, MappingStrategy, QueryBatch};
use crate::engine::{train, Model, TrainConfig};
use crate::error::ModelError;
use crate::gndiff::p_diff_batch;
use crate::numkit::{softmax_rows_plain, NumError};

const EVAL_CHUNK: usize = 256;

/// Which predictor produces the candidate distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Component {
    /// The configured model, honouring ablation and routing flags.
    Full,
    GndiffOnly,
    DpclOnly,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Full => "DPCL-Diff",
            Component::GndiffOnly => "GNDiff-only",
            Component::DpclOnly => "DPCL-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratum {
    All,
    NewEvents,
    Periodic,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::NewEvents => "new-events",
            Stratum::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Option<Stratum> {
        match s {
            "all" => Some(Stratum::All),
            "new" | "new-events" => Some(Stratum::NewEvents),
            "periodic" => Some(Stratum::Periodic),
            _ => None,
        }
    }
}

/// Softmax over the combined head scores, one row per query.
pub fn p_dpcl(model: &Model, cfg: &TrainConfig, batch: &QueryBatch) -> Result<Vec<Vec<f64>>, NumError> {
    let scores = combined_scores(&model.dpcl, batch, &cfg.scoring(), cfg.score_combine)?;
    let probs = softmax_rows_plain(&scores, None)?;
    Ok((0..probs.rows()).map(|i| probs.row(i).to_vec()).collect())
}

/// `½ (P_diff + P_dpcl)`.
pub fn combine(p_diff: &[f64], p_dpcl: &[f64]) -> Result<Vec<f64>, NumError> {
    if p_diff.len() != p_dpcl.len() {
        return Err(NumError::shape_pair("combine", &[p_diff.len()], &[p_dpcl.len()]));
    }
    Ok(p_diff.iter().zip(p_dpcl).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Candidate distributions for `queries`. Chain streams are keyed by the
/// query's position in `queries`.
pub fn predict(
    model: &Model,
    cfg: &TrainConfig,
    index: &PeriodicIndex,
    queries: &[Quad],
    component: Component,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let (want_diff, want_dpcl) = match component {
        Component::GndiffOnly => (true, false),
        Component::DpclOnly => (false, true),
        Component::Full => (!cfg.no_gndiff, !cfg.no_dpcl),
    };
    let mut out = Vec::with_capacity(queries.len());
    for (c, chunk) in queries.chunks(EVAL_CHUNK).enumerate() {
        let dpcl = if want_dpcl { Some(p_dpcl(model, cfg, &QueryBatch::build(chunk, index))?) } else { None };
        let diff = if want_diff {
            let pairs: Vec<(u32, u32)> = chunk.iter().map(|q| (q.s, q.r)).collect();
            let keys: Vec<u64> = (0..chunk.len()).map(|i| (c * EVAL_CHUNK + i) as u64).collect();
            Some(p_diff_batch(
                &model.denoiser,
                &model.entropies,
                &model.space,
                &cfg.diffusion(),
                &pairs,
                &keys,
                cfg.chains,
                cfg.sampling,
                cfg.seed,
            ))
        } else {
            None
        };
        for (i, q) in chunk.iter().enumerate() {
            let p = match (&diff, &dpcl) {
                (Some(d), Some(p)) if component == Component::Full && cfg.route_by_novelty => {
                    // queries without any history go to the diffusion model
                    if index.history(q.s, q.r, q.t).is_empty() {
                        d[i].clone()
                    } else {
                        p[i].clone()
                    }
                }
                (Some(d), Some(p)) => combine(&d[i], &p[i])?,
                (Some(d), None) => d[i].clone(),
                (None, Some(p)) => p[i].clone(),
                (None, None) => unreachable!("at least one component is enabled"),
            };
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankPair {
    pub filtered: usize,
    pub raw: usize,
}

/// 1-based rank of `truth` with ties counted against it. `also_true` lists
/// other correct objects for the same `(s, r, t)`; they are skipped in the
/// filtered rank.
pub fn filtered_rank(probs: &[f64], truth: usize, also_true: &[u32]) -> RankPair {
    let p = probs[truth];
    let mut raw = 1;
    let mut filtered = 1;
    for (o, &v) in probs.iter().enumerate() {
        if o == truth || v < p {
            continue;
        }
        raw += 1;
        if !also_true.contains(&(o as u32)) {
            filtered += 1;
        }
    }
    RankPair { filtered, raw }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRank {
    pub s: u32,
    pub r: u32,
    pub o: u32,
    pub t: u32,
    pub rank: usize,
    pub raw_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub stratum: Stratum,
    pub queries: usize,
    pub empty: bool,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<QueryRank>>,
}

impl RankReport {
    pub fn from_ranks(stratum: Stratum, ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return RankReport {
                stratum,
                queries: 0,
                empty: true,
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
                ranks: None,
            };
        }
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        RankReport {
            stratum,
            queries: n,
            empty: false,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
            hits1: frac(1),
            hits3: frac(3),
            hits10: frac(10),
            ranks: None,
        }
    }
}

/// Objects true for each `(s, r, t)` in `quads`.
fn same_time_truths(quads: &[Quad]) -> HashMap<(u32, u32, u32), Vec<u32>> {
    let mut map: HashMap<(u32, u32, u32), Vec<u32>> = HashMap::new();
    for q in quads {
        map.entry((q.s, q.r, q.t)).or_default().push(q.o);
    }
    map
}

pub fn rank_queries(probs: &[Vec<f64>], quads: &[Quad]) -> Vec<QueryRank> {
    let truths = same_time_truths(quads);
    quads
        .iter()
        .zip(probs)
        .map(|(q, p)| {
            let pair = filtered_rank(p, q.o as usize, &truths[&(q.s, q.r, q.t)]);
            QueryRank { s: q.s, r: q.r, o: q.o, t: q.t, rank: pair.filtered, raw_rank: pair.raw }
        })
        .collect()
}

/// Reports for each requested stratum over already ranked queries.
pub fn stratify(ranks: &[QueryRank], index: &PeriodicIndex, strata: &[Stratum], keep_ranks: bool) -> Vec<RankReport> {
    strata
        .iter()
        .map(|&stratum| {
            let chosen: Vec<&QueryRank> = ranks
                .iter()
                .filter(|q| match stratum {
                    Stratum::All => true,
                    Stratum::NewEvents => index.is_new_event(q.s, q.r, q.o, q.t),
                    Stratum::Periodic => !index.is_new_event(q.s, q.r, q.o, q.t),
                })
                .collect();
            let values: Vec<usize> = chosen.iter().map(|q| q.rank).collect();
            let mut report = RankReport::from_ranks(stratum, &values);
            if keep_ranks {
                report.ranks = Some(chosen.into_iter().cloned().collect());
            }
            report
        })
        .collect()
}

/// `all`-stratum report for one predictor over `quads`.
pub fn evaluate_queries(
    model: &Model,
    cfg: &TrainConfig,
    index: &PeriodicIndex,
    quads: &[Quad],
    component: Component,
) -> Result<RankReport, ModelError> {
    let probs = predict(model, cfg, index, quads, component)?;
    let ranks = rank_queries(&probs, quads);
    Ok(stratify(&ranks, index, &[Stratum::All], false).remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub label: String,
    pub reports: Vec<RankReport>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub strata: Vec<Stratum>,
    /// Add GNDiff-only and DPCL-only rows.
    pub components: bool,
    pub per_query: bool,
}

/// Stratified reports for `split`; `all` is always included first.
pub fn evaluate_split(
    model: &Model,
    cfg: &TrainConfig,
    store: &QuadStore,
    index: &PeriodicIndex,
    split: Split,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>, ModelError> {
    evaluate_quads(model, cfg, index, store.split(split), opts)
}

pub fn evaluate_quads(
    model: &Model,
    cfg: &TrainConfig,
    index: &PeriodicIndex,
    quads: &[Quad],
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>, ModelError> {
    let mut strata = vec![Stratum::All];
    for s in &opts.strata {
        if !strata.contains(s) {
            strata.push(*s);
        }
    }
    let mut components = vec![Component::Full];
    if opts.components {
        components.extend([Component::GndiffOnly, Component::DpclOnly]);
    }
    let mut rows = Vec::new();
    for c in components {
        let probs = predict(model, cfg, index, quads, c)?;
        let ranks = rank_queries(&probs, quads);
        rows.push(EvalRow { label: c.label().to_owned(), reports: stratify(&ranks, index, &strata, opts.per_query) });
    }
    Ok(rows)
}

/// Aligned plain-text table: one line per row, MRR and Hits@k per stratum.
pub fn render_table(rows: &[EvalRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "Model");
    if let Some(first) = rows.first() {
        for rep in &first.reports {
            let tag = rep.stratum.name();
            let _ = write!(out, "  {:>16} {:>8} {:>8} {:>8}", format!("{tag} MRR"), "H@1", "H@3", "H@10");
        }
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:width$}", row.label);
        for rep in &row.reports {
            if rep.empty {
                let _ = write!(out, "  {:>16} {:>8} {:>8} {:>8}", "(empty)", "-", "-", "-");
            } else {
                let _ = write!(
                    out,
                    "  {:>16.4} {:>8.4} {:>8.4} {:>8.4}",
                    rep.mrr, rep.hits1, rep.hits3, rep.hits10
                );
            }
        }
        out.push('\n');
    }
    out
}

/// Configurations of the ablation table: the full model, the two single
/// component ablations, and DPCL alone under each mapping strategy.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = vec![
        ("full".to_owned(), TrainConfig { no_gndiff: false, no_dpcl: false, ..base.clone() }),
        ("no_gndiff".to_owned(), TrainConfig { no_gndiff: true, no_dpcl: false, ..base.clone() }),
        ("no_dpcl".to_owned(), TrainConfig { no_gndiff: false, no_dpcl: true, ..base.clone() }),
    ];
    out.extend(mapping_configs(base));
    out
}

/// DPCL without diffusion under every mapping strategy, sharing the seed.
pub fn mapping_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    MappingStrategy::ALL
        .iter()
        .map(|&m| {
            (
                format!("DPCL {m}"),
                TrainConfig { mapping_strategy: m, no_gndiff: true, no_dpcl: false, ..base.clone() },
            )
        })
        .collect()
}

/// Trains every configuration and evaluates it on the test split.
pub fn run_harness(
    grid: &[(String, TrainConfig)],
    store: &QuadStore,
    strata: &[Stratum],
) -> Result<Vec<EvalRow>, ModelError> {
    let mut rows = Vec::new();
    for (label, cfg) in grid {
        let outcome = train(cfg, store, |_| {})?;
        let model = outcome.best.as_ref().unwrap_or(&outcome.last);
        let index = crate::corpus::build_periodic_index(store, cfg.lambda, &Split::ALL)?;
        let opts = EvalOptions { strata: strata.to_vec(), components: false, per_query: false };
        let mut row = evaluate_split(&model.model, cfg, store, &index, Split::Test, &opts)?.remove(0);
        row.label = label.clone();
        rows.push(row);
    }
    Ok(rows)
}

/// Hyperparameter swept by [`sweep_configs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Option<SweepParam> {
        match s {
            "alpha" => Some(SweepParam::Alpha),
            "lambda" => Some(SweepParam::Lambda),
            _ => None,
        }
    }

    /// alpha in 0.1..=0.9 by 0.1, lambda in 1..=8.
    pub fn grid(self) -> Vec<f64> {
        match self {
            SweepParam::Alpha => (1..=9).map(|i| i as f64 / 10.0).collect(),
            SweepParam::Lambda => (1..=8).map(f64::from).collect(),
        }
    }
}

/// One configuration per grid point, labelled with the value.
pub fn sweep_configs(base: &TrainConfig, param: SweepParam) -> Vec<(String, TrainConfig)> {
    param
        .grid()
        .into_iter()
        .map(|v| {
            let cfg = match param {
                SweepParam::Alpha => TrainConfig { alpha: v, ..base.clone() },
                SweepParam::Lambda => TrainConfig { lambda: v, ..base.clone() },
            };
            (format!("{v}"), cfg)
        })
        .collect()
}

pub fn mapping_strategy_harness(base: &TrainConfig, store: &QuadStore) -> Result<Vec<EvalRow>, ModelError> {
    run_harness(&mapping_configs(base), store, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeedRng;

    #[test]
    fn combine_cases() {
        let u = vec![0.25; 4];
        assert_eq!(combine(&u, &u).unwrap(), u);
        let point = vec![0.0, 0.0, 1.0, 0.0];
        let c = combine(&u, &point).unwrap();
        assert!((c[2] - (0.5 + 1.0 / 8.0)).abs() < 1e-15);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(combine(&u, &point[..3]).is_err());
    }

    #[test]
    fn rank_definitions() {
        assert_eq!(filtered_rank(&[0.1, 0.6, 0.3], 1, &[]), RankPair { filtered: 1, raw: 1 });
        // competitor 2 is also true at the same time and gets filtered
        assert_eq!(filtered_rank(&[0.1, 0.3, 0.6], 1, &[2]), RankPair { filtered: 1, raw: 2 });
        // ties count against the truth
        assert_eq!(filtered_rank(&[0.25; 4], 0, &[]).filtered, 4);
    }

    #[test]
    fn report_arithmetic() {
        let r = RankReport::from_ranks(Stratum::All, &[1, 2, 4]);
        assert!((r.mrr - 1.75 / 3.0).abs() < 1e-9);
        assert_eq!((r.hits1, r.hits3, r.hits10), (1.0 / 3.0, 2.0 / 3.0, 1.0));
        let e = RankReport::from_ranks(Stratum::NewEvents, &[]);
        assert!(e.empty && e.mrr == 0.0);
    }

    #[test]
    fn brute_force_ranks_on_six_entities() {
        let mut rng = SeedRng::new(11);
        let quads: Vec<Quad> =
            (0..40).map(|_| Quad::new(rng.below(3) as u32, 0, rng.below(6) as u32, rng.below(3) as u32)).collect();
        let probs: Vec<Vec<f64>> = quads.iter().map(|_| (0..6).map(|_| (rng.below(4) as f64) / 4.0).collect()).collect();
        let ranks = rank_queries(&probs, &quads);
        for ((q, p), got) in quads.iter().zip(&probs).zip(&ranks) {
            let truth = p[q.o as usize];
            let mut filtered = 1;
            let mut raw = 1;
            for o in 0..6u32 {
                if o == q.o || p[o as usize] < truth {
                    continue;
                }
                raw += 1;
                let same_time = quads.iter().any(|x| x.s == q.s && x.r == q.r && x.t == q.t && x.o == o);
                if !same_time {
                    filtered += 1;
                }
            }
            assert_eq!((got.rank, got.raw_rank), (filtered, raw));
            assert!(got.rank <= got.raw_rank);
        }
    }

    #[test]
    fn table_lists_every_row() {
        let rows = vec![
            EvalRow { label: "a".into(), reports: vec![RankReport::from_ranks(Stratum::All, &[1, 3])] },
            EvalRow { label: "longer".into(), reports: vec![RankReport::from_ranks(Stratum::All, &[])] },
        ];
        let t = render_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("(empty)"));
        assert_eq!(ablation_configs(&TrainConfig::default()).len(), 7);
    }

    #[test]
    fn sweep_grids_have_one_config_per_point() {
        let base = TrainConfig::default();
        let a = sweep_configs(&base, SweepParam::Alpha);
        assert_eq!(a.len(), 9);
        assert_eq!((a[0].1.alpha, a[8].1.alpha), (0.1, 0.9));
        let l = sweep_configs(&base, SweepParam::Lambda);
        assert_eq!(l.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["1", "2", "3", "4", "5", "6", "7", "8"]);
        assert!(l.iter().all(|(_, c)| c.alpha == base.alpha));
    }
}
