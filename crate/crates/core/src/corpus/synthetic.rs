//! Seeded synthetic corpora with planted structure, used by the tests and
//! the acceptance suite.

use std::collections::HashSet;

use super::{Quad, QuadStore, Vocab};
use crate::numkit::SeedRng;

pub struct SyntheticCorpus {
    pub store: QuadStore,
    /// Planted `(s, r, o)` patterns.
    pub patterns: Vec<(u32, u32, u32)>,
}

fn names(prefix: &str, n: usize) -> Vocab {
    Vocab::from_ordered((0..n).map(|i| format!("{prefix}{i}")).collect())
}

fn timestamp_labels(n: usize) -> Vec<String> {
    (0..n).map(|t| t.to_string()).collect()
}

#[derive(Clone, Debug)]
pub struct PlantedPeriodConfig {
    pub entities: usize,
    pub relations: usize,
    pub period: u32,
    pub timestamps: u32,
    pub patterns: usize,
}

impl Default for PlantedPeriodConfig {
    fn default() -> Self {
        PlantedPeriodConfig { entities: 20, relations: 4, period: 5, timestamps: 60, patterns: 40 }
    }
}

/// Distinct `(s, r)` pairs, each bound to one object that recurs every
/// `period` timestamps from a random phase. Split 80/10/10 by timestamp.
pub fn planted_period_with(seed: u64, cfg: &PlantedPeriodConfig) -> SyntheticCorpus {
    let mut rng = SeedRng::new(seed);
    let mut pairs: Vec<(u32, u32)> =
        (0..cfg.entities as u32).flat_map(|s| (0..cfg.relations as u32).map(move |r| (s, r))).collect();
    rng.shuffle(&mut pairs);
    let mut patterns = Vec::with_capacity(cfg.patterns);
    let mut quads = Vec::new();
    for &(s, r) in pairs.iter().take(cfg.patterns) {
        let mut o = rng.below(cfg.entities) as u32;
        while o == s {
            o = rng.below(cfg.entities) as u32;
        }
        let phase = rng.below(cfg.period as usize) as u32;
        patterns.push((s, r, o));
        quads.extend((phase..cfg.timestamps).step_by(cfg.period as usize).map(|t| Quad::new(s, r, o, t)));
    }
    let train_before = (cfg.timestamps as f64 * 0.8).round() as u32;
    let valid_before = (cfg.timestamps as f64 * 0.9).round() as u32;
    let store = QuadStore::from_parts(
        quads,
        names("e", cfg.entities),
        names("r", cfg.relations),
        timestamp_labels(cfg.timestamps as usize),
        train_before,
        valid_before,
    )
    .expect("synthetic ids are in range");
    SyntheticCorpus { store, patterns }
}

/// 20 entities, 4 relations, 40 period-5 patterns over 60 timestamps.
pub fn planted_period(seed: u64) -> SyntheticCorpus {
    planted_period_with(seed, &PlantedPeriodConfig::default())
}

/// Single repeated fact `(0, 0, target)` over `timestamps` steps, all in
/// the training split.
pub fn single_fact(entities: usize, target: u32, timestamps: u32) -> QuadStore {
    let quads = (0..timestamps).map(|t| Quad::new(0, 0, target, t)).collect();
    QuadStore::from_parts(
        quads,
        names("e", entities),
        names("r", 1),
        timestamp_labels(timestamps as usize),
        timestamps,
        timestamps,
    )
    .expect("synthetic ids are in range")
}

#[derive(Clone, Debug)]
pub struct NoveltyConfig {
    pub entities: usize,
    pub relations: usize,
    pub period: u32,
    pub timestamps: u32,
    pub patterns: usize,
    /// Objects each relation draws its first-occurrence facts from, with
    /// Zipf weights `1/(k+1)`.
    pub pool_size: usize,
    /// Entities held back from training; test-window new events use them as
    /// subjects. Zero lets every entity act as a subject throughout.
    pub fresh_subjects: usize,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        NoveltyConfig { entities: 30, relations: 3, period: 4, timestamps: 60, patterns: 24, pool_size: 8, fresh_subjects: 8 }
    }
}

/// Planted periodic patterns interleaved with first-occurrence facts: at
/// every timestamp, each recurring fact is matched by one never-seen
/// `(s, r, o)` whose object comes from a relation-specific pool. Half of
/// every split is therefore new events. Split 80/10/10 by timestamp.
pub fn novelty_mix(seed: u64, cfg: &NoveltyConfig) -> SyntheticCorpus {
    assert!(cfg.fresh_subjects + cfg.pool_size < cfg.entities, "not enough entities");
    let known = cfg.entities - cfg.fresh_subjects;
    let base = planted_period_with(
        seed,
        &PlantedPeriodConfig {
            entities: known,
            relations: cfg.relations,
            period: cfg.period,
            timestamps: cfg.timestamps,
            patterns: cfg.patterns,
        },
    );
    let mut rng = SeedRng::with_stream(seed, 1);
    let pools: Vec<Vec<u32>> = (0..cfg.relations)
        .map(|_| {
            let mut all: Vec<u32> = (0..known as u32).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.pool_size);
            all
        })
        .collect();
    let weights: Vec<f64> = (0..cfg.pool_size).map(|k| 1.0 / (k + 1) as f64).collect();
    let test_from = (cfg.timestamps as f64 * 0.9).round() as u32;
    let mut used: HashSet<(u32, u32, u32)> = base.patterns.iter().copied().collect();
    let mut quads = base.store.quads().to_vec();
    for t in 0..cfg.timestamps {
        let subjects = if t >= test_from && cfg.fresh_subjects > 0 { known..cfg.entities } else { 0..known };
        let recurring = base.store.quads().iter().filter(|q| q.t == t).count();
        let mut added = 0;
        let mut attempts = 0;
        while added < recurring {
            attempts += 1;
            assert!(attempts < 100_000, "pools too small for the requested number of new events");
            let s = (subjects.start + rng.below(subjects.len())) as u32;
            let r = rng.below(cfg.relations) as u32;
            let o = pools[r as usize][rng.categorical(&weights)];
            if o != s && used.insert((s, r, o)) {
                quads.push(Quad::new(s, r, o, t));
                added += 1;
            }
        }
    }
    let store = QuadStore::from_parts(
        quads,
        names("e", cfg.entities),
        names("r", cfg.relations),
        timestamp_labels(cfg.timestamps as usize),
        base.store.train_boundary(),
        base.store.valid_boundary(),
    )
    .expect("synthetic ids are in range");
    SyntheticCorpus { store, patterns: base.patterns }
}

/// Fraction of quads in `quads` whose triple occurs earlier in `store`.
pub fn repeat_fraction(store: &QuadStore, quads: &[Quad]) -> f64 {
    let mut seen: HashSet<(u32, u32, u32, u32)> = HashSet::new();
    for q in store.quads() {
        seen.insert((q.s, q.r, q.o, q.t));
    }
    let repeats = quads
        .iter()
        .filter(|q| store.quads().iter().any(|p| p.s == q.s && p.r == q.r && p.o == q.o && p.t < q.t))
        .count();
    repeats as f64 / quads.len().max(1) as f64
}
