//! Quadruple datasets: vocabularies, time-ordered splits, periodic history
//! lookups, and token entropies.

mod bundle;
mod entropy;
mod periodic;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{load_bundle, save_bundle, write_vocab_tsv, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use entropy::{entropies_from_counts, token_entropies, TokenEntropy};
pub use periodic::{build_periodic_index, PeriodicIndex, DEFAULT_LAMBDA};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("{0}: dataset is empty")]
    Empty(PathBuf),
    #[error("splits overlap in time: {0}")]
    SplitOrder(String),
    #[error("bundle {path}: {detail}")]
    Bundle { path: PathBuf, detail: String },
    #[error("invalid parameter: {0}")]
    Config(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// One fact `(subject, relation, object, timestamp-index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quad {
    pub s: u32,
    pub r: u32,
    pub o: u32,
    pub t: u32,
}

impl Quad {
    pub fn new(s: u32, r: u32, o: u32, t: u32) -> Self {
        Quad { s, r, o, t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Bidirectional string ↔ dense id map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Ids follow numeric order when every name is an integer, otherwise
    /// lexicographic order, so ids never depend on line order.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct: Vec<&str> = names.into_iter().collect::<HashSet<_>>().into_iter().collect();
        sort_labels(&mut distinct);
        Vocab::from_ordered(distinct.into_iter().map(str::to_owned).collect())
    }

    /// Keeps the given order; names must be distinct.
    pub fn from_ordered(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
        Vocab { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn sort_labels(labels: &mut [&str]) {
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
    } else {
        labels.sort_unstable();
    }
}

/// Index of the first quad of the validation and test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMarks {
    pub train_end: usize,
    pub valid_end: usize,
}

/// Time-ordered facts with vocabularies and split boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadStore {
    quads: Vec<Quad>,
    entities: Vocab,
    relations: Vocab,
    timestamps: Vec<String>,
    marks: SplitMarks,
}

/// Counts reported by `prepare`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub timestamps: usize,
}

/// How a raw row list is divided into splits.
#[derive(Clone, Copy, Debug)]
pub enum SplitSpec {
    /// 80/10/10 by timestamp quantile.
    Auto,
    /// Rows arrive as train, then valid, then test with these sizes.
    Given { train: usize, valid: usize },
}

pub type RawRow = [String; 4];

impl QuadStore {
    /// Builds a store from already-dense parts, checking every invariant.
    pub fn from_parts(
        mut quads: Vec<Quad>,
        entities: Vocab,
        relations: Vocab,
        timestamps: Vec<String>,
        train_before: u32,
        valid_before: u32,
    ) -> Result<Self, CorpusError> {
        if let Some(q) = quads.iter().find(|q| {
            q.s as usize >= entities.len()
                || q.o as usize >= entities.len()
                || q.r as usize >= relations.len()
                || q.t as usize >= timestamps.len()
        }) {
            return Err(CorpusError::Config(format!("quad {q:?} references an unknown id")));
        }
        if train_before > valid_before {
            return Err(CorpusError::SplitOrder(format!("train boundary {train_before} after valid boundary {valid_before}")));
        }
        quads.sort_by_key(|q| (q.t, q.s, q.r, q.o));
        let train_end = quads.partition_point(|q| q.t < train_before);
        let valid_end = quads.partition_point(|q| q.t < valid_before);
        Ok(QuadStore { quads, entities, relations, timestamps, marks: SplitMarks { train_end, valid_end } })
    }

    /// Maps raw string rows onto dense ids and splits them.
    pub fn from_raw(rows: &[RawRow], spec: SplitSpec) -> Result<Self, CorpusError> {
        let entities = Vocab::from_names(rows.iter().flat_map(|r| [r[0].as_str(), r[2].as_str()]));
        let relations = Vocab::from_names(rows.iter().map(|r| r[1].as_str()));
        let ts_vocab = Vocab::from_names(rows.iter().map(|r| r[3].as_str()));
        let quads: Vec<Quad> = rows
            .iter()
            .map(|r| {
                Quad::new(
                    entities.id(&r[0]).unwrap(),
                    relations.id(&r[1]).unwrap(),
                    entities.id(&r[2]).unwrap(),
                    ts_vocab.id(&r[3]).unwrap(),
                )
            })
            .collect();
        let n_ts = ts_vocab.len() as u32;
        let (train_before, valid_before) = match spec {
            SplitSpec::Auto => auto_boundaries(&quads, n_ts),
            SplitSpec::Given { train, valid } => {
                let (tr, rest) = quads.split_at(train);
                let (va, te) = rest.split_at(valid);
                let span = |qs: &[Quad]| {
                    (qs.iter().map(|q| q.t).min(), qs.iter().map(|q| q.t).max())
                };
                let ((_, tr_max), (va_min, va_max), (te_min, _)) = (span(tr), span(va), span(te));
                let ordered = |a: Option<u32>, b: Option<u32>| match (a, b) {
                    (Some(a), Some(b)) => a < b,
                    _ => true,
                };
                if !ordered(tr_max, va_min) || !ordered(va_max, te_min) || !ordered(tr_max, te_min) {
                    return Err(CorpusError::SplitOrder(format!(
                        "train max {tr_max:?}, valid [{va_min:?}, {va_max:?}], test min {te_min:?}"
                    )));
                }
                let valid_before = te_min.unwrap_or(n_ts);
                let train_before = va_min.unwrap_or(valid_before);
                (train_before, valid_before)
            }
        };
        QuadStore::from_parts(quads, entities, relations, ts_vocab.names, train_before, valid_before)
    }

    pub fn quads(&self) -> &[Quad] {
        &self.quads
    }

    pub fn split(&self, split: Split) -> &[Quad] {
        let SplitMarks { train_end, valid_end } = self.marks;
        match split {
            Split::Train => &self.quads[..train_end],
            Split::Valid => &self.quads[train_end..valid_end],
            Split::Test => &self.quads[valid_end..],
        }
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Raw timestamp labels indexed by dense timestamp index.
    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn marks(&self) -> SplitMarks {
        self.marks
    }

    /// First timestamp index belonging to validation (or test, when the
    /// validation split is empty).
    pub fn train_boundary(&self) -> u32 {
        self.boundary(self.marks.train_end)
    }

    pub fn valid_boundary(&self) -> u32 {
        self.boundary(self.marks.valid_end)
    }

    fn boundary(&self, at: usize) -> u32 {
        self.quads.get(at).map_or(self.timestamps.len() as u32, |q| q.t)
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            train: self.split(Split::Train).len(),
            valid: self.split(Split::Valid).len(),
            test: self.split(Split::Test).len(),
            timestamps: self.timestamps.len(),
        }
    }

    /// Same vocabularies and boundaries with a different quad list.
    pub fn with_quads(&self, quads: Vec<Quad>) -> QuadStore {
        let (tb, vb) = (self.train_boundary(), self.valid_boundary());
        QuadStore::from_parts(quads, self.entities.clone(), self.relations.clone(), self.timestamps.clone(), tb, vb)
            .expect("ids come from this store")
    }
}

/// Timestamp boundaries at the 80% and 90% quad quantiles, adjusted so each
/// split owns at least one timestamp when there are three or more.
fn auto_boundaries(quads: &[Quad], n_ts: u32) -> (u32, u32) {
    let mut ts: Vec<u32> = quads.iter().map(|q| q.t).collect();
    ts.sort_unstable();
    let n = ts.len();
    let at = |frac: f64| ts[((frac * n as f64).floor() as usize).min(n - 1)];
    let mut b1 = at(0.8);
    let mut b2 = at(0.9);
    if n_ts >= 3 {
        b1 = b1.clamp(1, n_ts - 2);
        b2 = b2.clamp(b1 + 1, n_ts - 1);
    } else {
        b2 = b2.max(b1);
    }
    (b1, b2)
}

fn read_rows(path: &Path) -> Result<Vec<RawRow>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(k) = fields[..4].iter().position(|f| f.trim().is_empty()) {
            return Err(CorpusError::Parse { path: path.to_path_buf(), line: i + 1, detail: format!("field {} is empty", k + 1) });
        }
        rows.push(std::array::from_fn(|k| fields[k].trim().to_owned()));
    }
    Ok(rows)
}

/// Loads one TSV file and splits it 80/10/10 by timestamp.
pub fn load_quads(path: &Path) -> Result<QuadStore, CorpusError> {
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    QuadStore::from_raw(&rows, SplitSpec::Auto)
}

/// Loads explicit train/valid/test files.
pub fn load_split_files(train: &Path, valid: &Path, test: &Path) -> Result<QuadStore, CorpusError> {
    let tr = read_rows(train)?;
    if tr.is_empty() {
        return Err(CorpusError::Empty(train.to_path_buf()));
    }
    let va = read_rows(valid)?;
    let te = read_rows(test)?;
    let spec = SplitSpec::Given { train: tr.len(), valid: va.len() };
    let rows: Vec<RawRow> = tr.into_iter().chain(va).chain(te).collect();
    QuadStore::from_raw(&rows, spec)
}

/// Keeps only the earliest occurrence of every distinct `(s, r, o)`.
pub fn extract_new_events(store: &QuadStore) -> QuadStore {
    let mut seen = HashSet::new();
    let kept = store.quads().iter().filter(|q| seen.insert((q.s, q.r, q.o))).copied().collect();
    store.with_quads(kept)
}
