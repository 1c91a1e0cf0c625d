use std::collections::HashMap;

use super::{CorpusError, QuadStore, Split};

/// Default magnitude of the signed frequency indicator.
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Answers "which objects did `(s, r)` reach strictly before `t`" for the
/// facts in the indexed splits.
#[derive(Clone, Debug)]
pub struct PeriodicIndex {
    lambda: f64,
    num_entities: usize,
    /// Per `(s, r)`: `(first timestamp, object)`, sorted by timestamp.
    first_seen: HashMap<(u32, u32), Vec<(u32, u32)>>,
}

pub fn build_periodic_index(store: &QuadStore, lambda: f64, scope: &[Split]) -> Result<PeriodicIndex, CorpusError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CorpusError::Config(format!("lambda must be positive, got {lambda}")));
    }
    let mut earliest: HashMap<(u32, u32, u32), u32> = HashMap::new();
    for split in Split::ALL.iter().filter(|s| scope.contains(s)) {
        for q in store.split(*split) {
            earliest.entry((q.s, q.r, q.o)).and_modify(|t| *t = (*t).min(q.t)).or_insert(q.t);
        }
    }
    let mut first_seen: HashMap<(u32, u32), Vec<(u32, u32)>> = HashMap::new();
    for ((s, r, o), t) in earliest {
        first_seen.entry((s, r)).or_default().push((t, o));
    }
    for list in first_seen.values_mut() {
        list.sort_unstable();
    }
    Ok(PeriodicIndex { lambda, num_entities: store.num_entities(), first_seen })
}

impl PeriodicIndex {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    fn prefix(&self, s: u32, r: u32, t: u32) -> &[(u32, u32)] {
        match self.first_seen.get(&(s, r)) {
            Some(list) => &list[..list.partition_point(|&(k, _)| k < t)],
            None => &[],
        }
    }

    /// Objects seen with `(s, r)` at some timestamp `< t`, ascending by id.
    pub fn history(&self, s: u32, r: u32, t: u32) -> Vec<u32> {
        let mut objs: Vec<u32> = self.prefix(s, r, t).iter().map(|&(_, o)| o).collect();
        objs.sort_unstable();
        objs
    }

    pub fn contains(&self, s: u32, r: u32, o: u32, t: u32) -> bool {
        self.prefix(s, r, t).iter().any(|&(_, x)| x == o)
    }

    pub fn z_value(&self, s: u32, r: u32, o: u32, t: u32) -> f64 {
        if self.contains(s, r, o, t) {
            self.lambda
        } else {
            -self.lambda
        }
    }

    /// `Z` over every entity: `+λ` for history members, `−λ` otherwise.
    pub fn z_row(&self, s: u32, r: u32, t: u32) -> Vec<f64> {
        let mut row = vec![-self.lambda; self.num_entities];
        for &(_, o) in self.prefix(s, r, t) {
            row[o as usize] = self.lambda;
        }
        row
    }

    /// True when `(s, r, o)` has no occurrence before `t`.
    pub fn is_new_event(&self, s: u32, r: u32, o: u32, t: u32) -> bool {
        !self.contains(s, r, o, t)
    }
}
