use std::rc::Rc;

use super::{NodeSequence, TokenSpace};
use crate::error::ModelError;
use crate::numkit::{gemm_nt, NumError, SeedRng, Tape, Tensor, Var};

pub const DENOISER_TENSOR_NAMES: [&str; 5] =
    ["gndiff.token_emb", "gndiff.w_hidden", "gndiff.b_hidden", "gndiff.w_out", "gndiff.b_out"];

/// x̂0 predictor: embeddings of the three (possibly masked) tokens and of
/// the step feed one tanh layer, whose output is read out as three rows of
/// logits over the combined vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub space: TokenSpace,
    /// `K × w`.
    pub token_emb: Tensor,
    /// `w × 4w`.
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    /// `3K × w`.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn uniform(rng: &mut SeedRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()).expect("finite")
}

/// Fixed sinusoidal features of the step index.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for j in 0..half {
        let freq = (10_000f64).powf(-(j as f64) / half.max(1) as f64);
        out[j] = (t as f64 * freq).sin();
        out[half + j] = (t as f64 * freq).cos();
    }
    out
}

impl DenoiserParams {
    pub fn init(space: TokenSpace, width: usize, rng: &mut SeedRng) -> Self {
        let k = space.size();
        DenoiserParams {
            space,
            token_emb: uniform(rng, &[k, width], (3.0 / width as f64).sqrt()),
            w_hidden: uniform(rng, &[width, 4 * width], (6.0 / (5 * width) as f64).sqrt()),
            b_hidden: Tensor::zeros(&[width]),
            w_out: uniform(rng, &[3 * k, width], (6.0 / (width + k) as f64).sqrt()),
            b_out: Tensor::zeros(&[3 * k]),
        }
    }

    pub fn width(&self) -> usize {
        self.token_emb.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.token_emb, &self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.token_emb, &mut self.w_hidden, &mut self.b_hidden, &mut self.w_out, &mut self.b_out]
    }

    pub fn from_tensors(space: TokenSpace, mut ts: Vec<Tensor>) -> Result<Self, ModelError> {
        if ts.len() != 5 {
            return Err(ModelError::Config(format!("expected 5 denoiser tensors, got {}", ts.len())));
        }
        let b_out = ts.pop().unwrap();
        let w_out = ts.pop().unwrap();
        let b_hidden = ts.pop().unwrap();
        let w_hidden = ts.pop().unwrap();
        let token_emb = ts.pop().unwrap();
        let p = DenoiserParams { space, token_emb, w_hidden, b_hidden, w_out, b_out };
        let (k, w) = (space.size(), p.width());
        let ok = p.token_emb.rows() == k
            && p.w_hidden.shape() == [w, 4 * w]
            && p.b_hidden.len() == w
            && p.w_out.shape() == [3 * k, w]
            && p.b_out.len() == 3 * k;
        if !ok {
            return Err(ModelError::Config("denoiser tensor shapes are inconsistent".into()));
        }
        Ok(p)
    }

    /// `3B × K` validity mask for the rows produced by [`DenoiserVars::logits`].
    pub fn role_mask(&self, batch: usize) -> Rc<Vec<bool>> {
        let k = self.space.size();
        let mut mask = Vec::with_capacity(3 * batch * k);
        for _ in 0..batch {
            for pos in 0..3 {
                mask.extend((0..k).map(|tok| self.space.allowed(pos, tok)));
            }
        }
        Rc::new(mask)
    }

    fn input_rows(&self, states: &[NodeSequence], ts: &[usize]) -> Vec<f64> {
        let w = self.width();
        let mut x = Vec::with_capacity(states.len() * 4 * w);
        for (seq, &t) in states.iter().zip(ts) {
            for &tok in &seq.0 {
                x.extend_from_slice(self.token_emb.row(tok));
            }
            x.extend(time_embedding(t, w));
        }
        x
    }

    fn hidden(&self, states: &[NodeSequence], ts: &[usize]) -> Vec<f64> {
        let (b, w) = (states.len(), self.width());
        let x = self.input_rows(states, ts);
        let mut h = vec![0.0; b * w];
        gemm_nt(b, 4 * w, w, &x, self.w_hidden.data(), &mut h, false);
        for row in h.chunks_mut(w) {
            for (v, bias) in row.iter_mut().zip(self.b_hidden.data()) {
                *v = (*v + bias).tanh();
            }
        }
        h
    }
}

/// Predicts the clean tail entity of `(s, r, [M])` states.
pub trait X0Predictor {
    fn num_entities(&self) -> usize;

    /// Distribution over entities for each `(s, r)` at step `t`.
    fn tail_probs(&self, pairs: &[(u32, u32)], t: usize) -> Vec<Vec<f64>>;
}

impl X0Predictor for DenoiserParams {
    fn num_entities(&self) -> usize {
        self.space.num_entities
    }

    fn tail_probs(&self, pairs: &[(u32, u32)], t: usize) -> Vec<Vec<f64>> {
        let (b, w, k, e) = (pairs.len(), self.width(), self.space.size(), self.space.num_entities);
        let states: Vec<NodeSequence> = pairs
            .iter()
            .map(|&(s, r)| NodeSequence([s as usize, self.space.relation_token(r as usize), self.space.mask()]))
            .collect();
        let h = self.hidden(&states, &vec![t; b]);
        // tail rows of the output layer are contiguous, entities first
        let tail = &self.w_out.data()[2 * k * w..(2 * k + e) * w];
        let mut logits = vec![0.0; b * e];
        gemm_nt(b, w, e, &h, tail, &mut logits, false);
        let bias = &self.b_out.data()[2 * k..2 * k + e];
        logits
            .chunks(e)
            .map(|row| {
                let shifted: Vec<f64> = row.iter().zip(bias).map(|(x, b)| x + b).collect();
                let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = shifted.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = ex.iter().sum();
                ex.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }
}

/// [`DenoiserParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub token_emb: Var,
    pub w_hidden: Var,
    pub b_hidden: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl DenoiserVars {
    pub fn register(tape: &mut Tape, p: &DenoiserParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        DenoiserVars {
            token_emb: put(&p.token_emb),
            w_hidden: put(&p.w_hidden),
            b_hidden: put(&p.b_hidden),
            w_out: put(&p.w_out),
            b_out: put(&p.b_out),
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.token_emb, self.w_hidden, self.b_hidden, self.w_out, self.b_out]
    }

    /// Raw `3B × K` logits, row `3b + i` for position `i` of state `b`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        space: &TokenSpace,
        states: &[NodeSequence],
        ts: &[usize],
    ) -> Result<Var, NumError> {
        let b = states.len();
        let w = tape.value(self.token_emb).cols();
        let mut parts = Vec::with_capacity(4);
        for pos in 0..3 {
            let ids: Vec<usize> = states.iter().map(|s| s.0[pos]).collect();
            parts.push(tape.gather_rows(self.token_emb, &ids)?);
        }
        let time: Vec<f64> = ts.iter().flat_map(|&t| time_embedding(t, w)).collect();
        parts.push(tape.constant(Tensor::new(vec![b, w], time)?));
        let x = tape.concat_cols(&parts)?;
        let pre = tape.matmul_t(x, self.w_hidden)?;
        let pre = tape.add(pre, self.b_hidden)?;
        let h = tape.tanh(pre)?;
        let out = tape.matmul_t(h, self.w_out)?;
        let out = tape.add(out, self.b_out)?;
        tape.reshape(out, &[3 * b, space.size()])
    }
}

/// Logits for `x_0` given `(x_t, t)`, one row of `K` per position, with
/// `−∞` at tokens the position's role forbids.
pub fn denoise_x0(params: &DenoiserParams, x_t: &NodeSequence, t: usize) -> Result<Vec<Vec<f64>>, NumError> {
    params.space.check(x_t, true)?;
    let (k, w) = (params.space.size(), params.width());
    let h = params.hidden(std::slice::from_ref(x_t), &[t]);
    let mut out = params.b_out.data().to_vec();
    gemm_nt(1, w, 3 * k, &h, params.w_out.data(), &mut out, true);
    Ok(out
        .chunks(k)
        .enumerate()
        .map(|(pos, row)| {
            row.iter()
                .enumerate()
                .map(|(tok, &v)| if params.space.allowed(pos, tok) { v } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect())
}
