//! Poincaré-ball and Euclidean distances, plain and taped.

use serde::{Deserialize, Serialize};

use crate::numkit::{CustomOp, NumError, Tape, Tensor, Var};

/// Margin kept between projected points and the unit sphere.
pub const BALL_EPS: f64 = 1e-5;

/// A point strictly inside the unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
}

impl PoincarePoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.coords)
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Factor that maps `v` onto the ball of radius `1 - BALL_EPS` when it lies
/// on or outside it; `1.0` otherwise.
fn ball_scale(v: &[f64]) -> f64 {
    let norm = sq_norm(v).sqrt();
    let limit = 1.0 - BALL_EPS;
    if norm >= limit {
        limit / norm
    } else {
        1.0
    }
}

pub fn project_to_ball(v: &[f64]) -> PoincarePoint {
    let c = ball_scale(v);
    PoincarePoint { coords: v.iter().map(|x| x * c).collect() }
}

/// In-place projection of every row of a matrix.
pub fn project_rows_in_place(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let c = ball_scale(row);
        if c != 1.0 {
            row.iter_mut().for_each(|x| *x *= c);
        }
    }
}

fn arcosh_argument(a: &[f64], b: &[f64]) -> f64 {
    let num = sq_dist(a, b);
    let den = (1.0 - sq_norm(a)) * (1.0 - sq_norm(b));
    (1.0 + 2.0 * num / den).max(1.0)
}

pub fn poincare_distance(s: &PoincarePoint, o: &PoincarePoint) -> f64 {
    arcosh_argument(&s.coords, &o.coords).acosh()
}

pub fn euclidean_distance(s: &[f64], o: &[f64]) -> Result<f64, NumError> {
    if s.len() != o.len() {
        return Err(NumError::shape_pair("euclidean_distance", &[s.len()], &[o.len()]));
    }
    Ok(sq_dist(s, o).sqrt())
}

/// Which metric a score head uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    Poincare,
    Euclidean,
}

impl DistanceKind {
    /// Taped `rows(s) × rows(o)` distance matrix.
    pub fn pairwise(self, tape: &mut Tape, s: Var, o: Var) -> Result<Var, NumError> {
        match self {
            DistanceKind::Poincare => pairwise_poincare(tape, s, o),
            DistanceKind::Euclidean => pairwise_euclidean(tape, s, o),
        }
    }
}

struct ProjectRows {
    scales: Vec<f64>,
}

impl CustomOp for ProjectRows {
    fn name(&self) -> &'static str {
        "project_rows_to_ball"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let n = x.cols();
        let mut d = grad.data().to_vec();
        let lim = 1.0 - BALL_EPS;
        for (i, &c) in self.scales.iter().enumerate() {
            if c == 1.0 {
                continue;
            }
            // y = lim·u with u = v/|v|, so dy/dv = c·(I − u uᵀ) where c = lim/|v|
            let y = output.row(i);
            let dot: f64 = (0..n).map(|j| grad.get(i, j) * y[j] / lim).sum();
            for j in 0..n {
                d[i * n + j] = c * (grad.get(i, j) - (y[j] / lim) * dot);
            }
        }
        vec![Tensor::new(x.shape().to_vec(), d).expect("finite")]
    }
}

/// Taped row-wise [`project_to_ball`].
pub fn project_rows_to_ball(tape: &mut Tape, v: Var) -> Result<Var, NumError> {
    let x = tape.value(v);
    let mut out = x.clone();
    let scales: Vec<f64> = (0..x.rows()).map(|i| ball_scale(x.row(i))).collect();
    for (i, &c) in scales.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|e| *e *= c);
    }
    tape.custom(&[v], out, Box::new(ProjectRows { scales }))
}

fn check_pair(op: &'static str, tape: &Tape, s: Var, o: Var) -> Result<(usize, usize, usize), NumError> {
    let (a, b) = (tape.value(s), tape.value(o));
    if a.cols() != b.cols() {
        return Err(NumError::shape_pair(op, a.shape(), b.shape()));
    }
    Ok((a.rows(), b.rows(), a.cols()))
}

struct PairwisePoincare;

impl CustomOp for PairwisePoincare {
    fn name(&self) -> &'static str {
        "pairwise_poincare"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (s, o) = (inputs[0], inputs[1]);
        let (m, n, d) = (s.rows(), o.rows(), s.cols());
        let alpha: Vec<f64> = (0..m).map(|i| 1.0 - sq_norm(s.row(i))).collect();
        let beta: Vec<f64> = (0..n).map(|j| 1.0 - sq_norm(o.row(j))).collect();
        let mut gs = vec![0.0; m * d];
        let mut go = vec![0.0; n * d];
        for i in 0..m {
            let si = s.row(i);
            for j in 0..n {
                let g = grad.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let oj = o.row(j);
                let num = sq_dist(si, oj);
                if num == 0.0 {
                    continue;
                }
                let ab = alpha[i] * beta[j];
                let x = 1.0 + 2.0 * num / ab;
                if x <= 1.0 {
                    continue;
                }
                let c = g / (x * x - 1.0).sqrt();
                let k_diff = 4.0 / ab;
                let k_s = 4.0 * num / (alpha[i] * ab);
                let k_o = 4.0 * num / (beta[j] * ab);
                for k in 0..d {
                    let diff = si[k] - oj[k];
                    gs[i * d + k] += c * (k_diff * diff + k_s * si[k]);
                    go[j * d + k] += c * (-k_diff * diff + k_o * oj[k]);
                }
            }
        }
        vec![
            Tensor::new(s.shape().to_vec(), gs).expect("finite"),
            Tensor::new(o.shape().to_vec(), go).expect("finite"),
        ]
    }
}

/// Taped Poincaré distance between every row of `s` and every row of `o`.
/// Rows must already lie inside the unit ball. At coincident points the
/// gradient is zero.
pub fn pairwise_poincare(tape: &mut Tape, s: Var, o: Var) -> Result<Var, NumError> {
    let (m, n, _) = check_pair("pairwise_poincare", tape, s, o)?;
    let (a, b) = (tape.value(s), tape.value(o));
    for t in [a, b] {
        if let Some(i) = (0..t.rows()).find(|&i| sq_norm(t.row(i)) >= 1.0) {
            return Err(NumError::Domain { op: "pairwise_poincare", detail: format!("row {i} outside the unit ball") });
        }
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(arcosh_argument(a.row(i), b.row(j)).acosh());
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    tape.custom(&[s, o], t, Box::new(PairwisePoincare))
}

struct PairwiseEuclidean;

impl CustomOp for PairwiseEuclidean {
    fn name(&self) -> &'static str {
        "pairwise_euclidean"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (s, o) = (inputs[0], inputs[1]);
        let (m, n, d) = (s.rows(), o.rows(), s.cols());
        let mut gs = vec![0.0; m * d];
        let mut go = vec![0.0; n * d];
        for i in 0..m {
            for j in 0..n {
                let dist = output.get(i, j);
                let g = grad.get(i, j);
                if dist == 0.0 || g == 0.0 {
                    continue;
                }
                let c = g / dist;
                for k in 0..d {
                    let diff = s.get(i, k) - o.get(j, k);
                    gs[i * d + k] += c * diff;
                    go[j * d + k] -= c * diff;
                }
            }
        }
        vec![
            Tensor::new(s.shape().to_vec(), gs).expect("finite"),
            Tensor::new(o.shape().to_vec(), go).expect("finite"),
        ]
    }
}

/// Taped Euclidean distance matrix; zero gradient at coincident points.
pub fn pairwise_euclidean(tape: &mut Tape, s: Var, o: Var) -> Result<Var, NumError> {
    let (m, n, _) = check_pair("pairwise_euclidean", tape, s, o)?;
    let (a, b) = (tape.value(s), tape.value(o));
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(sq_dist(a.row(i), b.row(j)).sqrt());
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    tape.custom(&[s, o], t, Box::new(PairwiseEuclidean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{grad_check, SeedRng};

    fn random_ball_point(rng: &mut SeedRng, d: usize, radius: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let n = sq_norm(&v).sqrt();
        let r = radius * rng.uniform();
        v.iter().map(|x| x / n * r).collect()
    }

    #[test]
    fn projection_cases() {
        let inside = project_to_ball(&[0.3, 0.4]);
        assert_eq!(inside.coords(), &[0.3, 0.4]);
        let out = project_to_ball(&[3.0, 4.0]);
        assert!((out.sq_norm().sqrt() - 0.99999).abs() < 1e-12);
        let again = project_to_ball(out.coords());
        assert_eq!(again, out);
    }

    #[test]
    fn poincare_closed_form() {
        let o = project_to_ball(&[0.0, 0.0]);
        let p = project_to_ball(&[0.5, 0.0]);
        assert!((poincare_distance(&o, &p) - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn symmetric_and_zero_on_self() {
        let mut rng = SeedRng::new(11);
        for _ in 0..100 {
            let a = project_to_ball(&random_ball_point(&mut rng, 5, 0.99));
            let b = project_to_ball(&random_ball_point(&mut rng, 5, 0.99));
            assert!((poincare_distance(&a, &b) - poincare_distance(&b, &a)).abs() < 1e-12);
            assert_eq!(poincare_distance(&a, &a), 0.0);
        }
    }

    #[test]
    fn euclidean_cases() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = SeedRng::new(5);
        for _ in 0..100 {
            let [a, b, c]: [Vec<f64>; 3] = std::array::from_fn(|_| (0..4).map(|_| rng.uniform_in(-3.0, 3.0)).collect());
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn small_radius_limit_is_twice_euclidean() {
        let mut rng = SeedRng::new(3);
        for _ in 0..100 {
            let a = random_ball_point(&mut rng, 3, 0.01);
            let b = random_ball_point(&mut rng, 3, 0.01);
            let dp = poincare_distance(&project_to_ball(&a), &project_to_ball(&b));
            let de = euclidean_distance(&a, &b).unwrap();
            assert!((dp - 2.0 * de).abs() <= 0.01 * 2.0 * de, "{dp} vs {de}");
        }
    }

    #[test]
    fn distance_from_origin_increases_with_radius() {
        let origin = project_to_ball(&[0.0, 0.0]);
        let mut prev = 0.0;
        for k in 1..1000 {
            let r = (1.0 - BALL_EPS) * k as f64 / 1000.0;
            let d = poincare_distance(&origin, &project_to_ball(&[r * 0.6, r * 0.8]));
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn taped_distances_match_plain_and_gradients_check() {
        let mut rng = SeedRng::new(9);
        let s: Vec<f64> = (0..3).flat_map(|_| random_ball_point(&mut rng, 4, 0.9)).collect();
        let o: Vec<f64> = (0..5).flat_map(|_| random_ball_point(&mut rng, 4, 0.9)).collect();
        let st = Tensor::new(vec![3, 4], s).unwrap();
        let ot = Tensor::new(vec![5, 4], o).unwrap();
        for kind in [DistanceKind::Poincare, DistanceKind::Euclidean] {
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(st.clone()), tape.constant(ot.clone()));
            let dm = kind.pairwise(&mut tape, a, b).unwrap();
            for i in 0..3 {
                for j in 0..5 {
                    let expected = match kind {
                        DistanceKind::Poincare => {
                            poincare_distance(&project_to_ball(st.row(i)), &project_to_ball(ot.row(j)))
                        }
                        DistanceKind::Euclidean => euclidean_distance(st.row(i), ot.row(j)).unwrap(),
                    };
                    assert!((tape.value(dm).get(i, j) - expected).abs() < 1e-12);
                }
            }
            let rep = grad_check(
                |t, v| {
                    let d = kind.pairwise(t, v[0], v[1])?;
                    let w = t.constant(Tensor::new(vec![3, 5], (0..15).map(|k| 0.1 * k as f64 - 0.7).collect())?);
                    let p = t.mul(d, w)?;
                    t.sum(p)
                },
                &[st.clone(), ot.clone()],
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{kind:?} {rep:?}");
        }
    }

    #[test]
    fn coincident_points_have_zero_gradient() {
        for kind in [DistanceKind::Poincare, DistanceKind::Euclidean] {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap());
            let b = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap());
            let d = kind.pairwise(&mut tape, a, b).unwrap();
            assert_eq!(tape.value(d).item(), 0.0);
            let s = tape.sum(d).unwrap();
            let g = tape.backward(s).unwrap();
            assert_eq!(g.wrt(a).data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn taped_projection_gradient() {
        let x = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.1, 0.2]).unwrap();
        let rep = grad_check(
            |t, v| {
                let p = project_rows_to_ball(t, v[0])?;
                let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])?);
                let q = t.mul(p, w)?;
                t.sum(q)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
