use super::{NumError, Tape, Tensor, Var};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator so entries whose true gradient
/// is zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences at `params`.
///
/// `f` receives a fresh tape plus one leaf per parameter and must return a
/// single-element variable. Disagreement is reported, not raised.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst: f64 = 0.0;
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error, tolerance })
}
