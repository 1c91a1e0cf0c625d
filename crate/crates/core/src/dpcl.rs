//! Dual-domain periodic scoring heads and their two training losses.
//!
//! The periodic head scores every candidate object as
//! `tanh(W_p [s; r] + b_p) · Eᵀ + Z + d(s, o)` and the non-periodic head as
//! `tanh(W_np [s; r] + b_np) · Eᵀ − Z + d'(s, o)`, where `Z` is the signed
//! history indicator and the two distances come from the configured
//! [`MappingStrategy`] (Poincaré for the periodic head by default).

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PeriodicIndex, Quad};
use crate::error::ModelError;
use crate::geometry::{project_rows_to_ball, DistanceKind};
use crate::numkit::{NumError, SeedRng, Tape, Tensor, Var};

/// Which distance feeds the periodic / non-periodic head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingStrategy {
    #[serde(rename = "Hyp/Euc")]
    HypEuc,
    #[serde(rename = "Euc/Hyp")]
    EucHyp,
    #[serde(rename = "Hyp/Hyp")]
    HypHyp,
    #[serde(rename = "Euc/Euc")]
    EucEuc,
}

impl MappingStrategy {
    pub const ALL: [MappingStrategy; 4] =
        [MappingStrategy::HypEuc, MappingStrategy::EucHyp, MappingStrategy::HypHyp, MappingStrategy::EucEuc];

    pub fn periodic(self) -> DistanceKind {
        match self {
            MappingStrategy::HypEuc | MappingStrategy::HypHyp => DistanceKind::Poincare,
            _ => DistanceKind::Euclidean,
        }
    }

    pub fn nonperiodic(self) -> DistanceKind {
        match self {
            MappingStrategy::EucHyp | MappingStrategy::HypHyp => DistanceKind::Poincare,
            _ => DistanceKind::Euclidean,
        }
    }
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingStrategy::HypEuc => "Hyp/Euc",
            MappingStrategy::EucHyp => "Euc/Hyp",
            MappingStrategy::HypHyp => "Hyp/Hyp",
            MappingStrategy::EucEuc => "Euc/Euc",
        })
    }
}

impl FromStr for MappingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MappingStrategy::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mapping strategy `{s}` (expected Hyp/Euc, Euc/Hyp, Hyp/Hyp or Euc/Euc)"))
    }
}

/// How the two heads merge into one inference score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreCombine {
    Sum,
    Max,
}

impl FromStr for ScoreCombine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(ScoreCombine::Sum),
            "max" => Ok(ScoreCombine::Max),
            _ => Err(format!("unknown score combination `{s}` (expected sum or max)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub mapping: MappingStrategy,
    /// `+1` adds the distance term to both heads, `−1` subtracts it.
    pub distance_sign: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { mapping: MappingStrategy::HypEuc, distance_sign: 1.0 }
    }
}

/// Entity/relation tables plus the two head projections and the
/// contrastive query projection. Matrices are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpclParams {
    pub entity: Tensor,
    pub relation: Tensor,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub w_np: Tensor,
    pub b_np: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
}

pub const DPCL_TENSOR_NAMES: [&str; 8] =
    ["dpcl.entity", "dpcl.relation", "dpcl.w_p", "dpcl.b_p", "dpcl.w_np", "dpcl.b_np", "dpcl.w_c", "dpcl.b_c"];

fn uniform(rng: &mut SeedRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()).expect("finite")
}

impl DpclParams {
    /// Embedding rows start well inside the unit ball; projections use
    /// Glorot-uniform bounds.
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, rng: &mut SeedRng) -> Self {
        let emb = 0.5 / (dim as f64).sqrt();
        let glorot = (6.0 / (3 * dim) as f64).sqrt();
        DpclParams {
            entity: uniform(rng, &[num_entities, dim], emb),
            relation: uniform(rng, &[num_relations, dim], emb),
            w_p: uniform(rng, &[dim, 2 * dim], glorot),
            b_p: Tensor::zeros(&[dim]),
            w_np: uniform(rng, &[dim, 2 * dim], glorot),
            b_np: Tensor::zeros(&[dim]),
            w_c: uniform(rng, &[dim, 2 * dim], glorot),
            b_c: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.entity, &self.relation, &self.w_p, &self.b_p, &self.w_np, &self.b_np, &self.w_c, &self.b_c]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.entity,
            &mut self.relation,
            &mut self.w_p,
            &mut self.b_p,
            &mut self.w_np,
            &mut self.b_np,
            &mut self.w_c,
            &mut self.b_c,
        ]
    }

    pub fn from_tensors(mut ts: Vec<Tensor>) -> Result<Self, ModelError> {
        if ts.len() != 8 {
            return Err(ModelError::Config(format!("expected 8 DPCL tensors, got {}", ts.len())));
        }
        let b_c = ts.pop().unwrap();
        let w_c = ts.pop().unwrap();
        let b_np = ts.pop().unwrap();
        let w_np = ts.pop().unwrap();
        let b_p = ts.pop().unwrap();
        let w_p = ts.pop().unwrap();
        let relation = ts.pop().unwrap();
        let entity = ts.pop().unwrap();
        let p = DpclParams { entity, relation, w_p, b_p, w_np, b_np, w_c, b_c };
        let d = p.dim();
        let ok = p.relation.cols() == d
            && [&p.w_p, &p.w_np, &p.w_c].iter().all(|w| w.shape() == [d, 2 * d])
            && [&p.b_p, &p.b_np, &p.b_c].iter().all(|b| b.len() == d);
        if !ok {
            return Err(ModelError::Config("DPCL tensor shapes are inconsistent".into()));
        }
        Ok(p)
    }
}

/// [`DpclParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DpclVars {
    pub entity: Var,
    pub relation: Var,
    pub w_p: Var,
    pub b_p: Var,
    pub w_np: Var,
    pub b_np: Var,
    pub w_c: Var,
    pub b_c: Var,
}

impl DpclVars {
    /// Leaves when `trainable`, constants otherwise.
    pub fn register(tape: &mut Tape, p: &DpclParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        DpclVars {
            entity: put(&p.entity),
            relation: put(&p.relation),
            w_p: put(&p.w_p),
            b_p: put(&p.b_p),
            w_np: put(&p.w_np),
            b_np: put(&p.b_np),
            w_c: put(&p.w_c),
            b_c: put(&p.b_c),
        }
    }

    pub fn all(&self) -> [Var; 8] {
        [self.entity, self.relation, self.w_p, self.b_p, self.w_np, self.b_np, self.w_c, self.b_c]
    }
}

/// Object-prediction queries with their signed history rows and labels.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub queries: Vec<Quad>,
    /// `batch × |E|` signed frequency values.
    pub z: Tensor,
    /// True when the ground-truth object is in the query's history.
    pub periodic: Vec<bool>,
}

impl QueryBatch {
    pub fn build(queries: &[Quad], index: &PeriodicIndex) -> Self {
        let n = index.num_entities();
        let mut z = Vec::with_capacity(queries.len() * n);
        let mut periodic = Vec::with_capacity(queries.len());
        for q in queries {
            z.extend(index.z_row(q.s, q.r, q.t));
            periodic.push(index.contains(q.s, q.r, q.o, q.t));
        }
        QueryBatch {
            queries: queries.to_vec(),
            z: Tensor::new(vec![queries.len(), n], z).expect("finite"),
            periodic,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.s as usize).collect()
    }

    pub fn relations(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.r as usize).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.o as usize).collect()
    }
}

fn query_input(tape: &mut Tape, v: &DpclVars, batch: &QueryBatch) -> Result<Var, NumError> {
    let s = tape.gather_rows(v.entity, &batch.subjects())?;
    let r = tape.gather_rows(v.relation, &batch.relations())?;
    tape.concat_cols(&[s, r])
}

fn affine_scores(tape: &mut Tape, v: &DpclVars, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let pre = tape.matmul_t(x, w)?;
    let pre = tape.add(pre, b)?;
    let h = tape.tanh(pre)?;
    tape.matmul_t(h, v.entity)
}

fn distance_term(tape: &mut Tape, v: &DpclVars, batch: &QueryBatch, kind: DistanceKind) -> Result<Var, NumError> {
    let table = match kind {
        DistanceKind::Poincare => project_rows_to_ball(tape, v.entity)?,
        DistanceKind::Euclidean => v.entity,
    };
    let s = tape.gather_rows(table, &batch.subjects())?;
    kind.pairwise(tape, s, table)
}

fn head(
    tape: &mut Tape,
    v: &DpclVars,
    batch: &QueryBatch,
    cfg: &ScoringConfig,
    periodic: bool,
) -> Result<Var, NumError> {
    let x = query_input(tape, v, batch)?;
    let (w, b, kind) = if periodic {
        (v.w_p, v.b_p, cfg.mapping.periodic())
    } else {
        (v.w_np, v.b_np, cfg.mapping.nonperiodic())
    };
    let aff = affine_scores(tape, v, x, w, b)?;
    let z = tape.constant(batch.z.clone());
    let with_z = if periodic { tape.add(aff, z)? } else { tape.sub(aff, z)? };
    let dist = distance_term(tape, v, batch, kind)?;
    let dist = tape.scale(dist, cfg.distance_sign)?;
    tape.add(with_z, dist)
}

/// `batch × |E|` periodic dependency scores.
pub fn periodic_scores(tape: &mut Tape, v: &DpclVars, batch: &QueryBatch, cfg: &ScoringConfig) -> Result<Var, NumError> {
    head(tape, v, batch, cfg, true)
}

/// `batch × |E|` non-periodic dependency scores.
pub fn nonperiodic_scores(
    tape: &mut Tape,
    v: &DpclVars,
    batch: &QueryBatch,
    cfg: &ScoringConfig,
) -> Result<Var, NumError> {
    head(tape, v, batch, cfg, false)
}

/// `−log(softmax(S_p)[gt] + softmax(S_np)[gt])`, averaged over the batch.
/// The sum of the two probabilities is evaluated as a log-sum-exp of the two
/// log-probabilities.
pub fn ce_loss(tape: &mut Tape, s_p: Var, s_np: Var, targets: &[usize]) -> Result<Var, NumError> {
    if tape.value(s_p).shape() != tape.value(s_np).shape() {
        return Err(NumError::shape_pair("ce_loss", tape.value(s_p).shape(), tape.value(s_np).shape()));
    }
    let lp = tape.log_softmax_rows(s_p)?;
    let lnp = tape.log_softmax_rows(s_np)?;
    let a = tape.pick(lp, targets)?;
    let b = tape.pick(lnp, targets)?;
    let pair = tape.concat_cols(&[a, b])?;
    let pair_ls = tape.log_softmax_rows(pair)?;
    let first = vec![0; targets.len()];
    let x0 = tape.pick(pair, &first)?;
    let ls0 = tape.pick(pair_ls, &first)?;
    let log_sum = tape.sub(x0, ls0)?;
    let m = tape.mean(log_sum)?;
    tape.neg(m)
}

/// Contrastive query representation: unit-normalized
/// `tanh(W_c [s; r] + b_c)`.
pub fn query_embeddings(tape: &mut Tape, v: &DpclVars, batch: &QueryBatch) -> Result<Var, NumError> {
    let x = query_input(tape, v, batch)?;
    let pre = tape.matmul_t(x, v.w_c)?;
    let pre = tape.add(pre, v.b_c)?;
    tape.tanh(pre)
}

/// Supervised contrastive loss over the rows of `z` (normalized here),
/// averaged over the batch. Anchors without a same-label partner add 0.
pub fn supcon_from_embeddings(tape: &mut Tape, z: Var, labels: &[bool], tau: f64) -> Result<Var, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
    }
    let b = labels.len();
    if tape.value(z).rows() != b {
        return Err(NumError::Shape { op: "supcon", detail: format!("{} labels for {} rows", b, tape.value(z).rows()) }.into());
    }
    if b < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let unit = tape.normalize_rows(z)?;
    let sim = tape.matmul_t(unit, unit)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let off_diag: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let logp = tape.masked_log_softmax_rows(sim, Rc::new(off_diag))?;
    let mut weights = vec![0.0; b * b];
    for q in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != q && labels[p] == labels[q]).collect();
        for &p in &positives {
            weights[q * b + p] = 1.0 / positives.len() as f64;
        }
    }
    let w = tape.constant(Tensor::new(vec![b, b], weights)?);
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, -1.0 / b as f64)?)
}

pub fn supcon_loss(tape: &mut Tape, v: &DpclVars, batch: &QueryBatch, tau: f64) -> Result<Var, ModelError> {
    let z = query_embeddings(tape, v, batch)?;
    supcon_from_embeddings(tape, z, &batch.periodic, tau)
}

/// Inference score `s(o | q)` for every query row.
pub fn combined_scores(
    params: &DpclParams,
    batch: &QueryBatch,
    cfg: &ScoringConfig,
    combine: ScoreCombine,
) -> Result<Tensor, NumError> {
    let mut tape = Tape::new();
    let v = DpclVars::register(&mut tape, params, false);
    let sp = periodic_scores(&mut tape, &v, batch, cfg)?;
    let snp = nonperiodic_scores(&mut tape, &v, batch, cfg)?;
    let (a, b) = (tape.value(sp), tape.value(snp));
    let data = match combine {
        ScoreCombine::Sum => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        ScoreCombine::Max => a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect(),
    };
    Tensor::new(a.shape().to_vec(), data)
}
