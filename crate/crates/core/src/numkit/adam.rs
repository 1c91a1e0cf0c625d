use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update of the parameters selected by `active`
    /// (`None` means all). Unselected tensors and their moments are left
    /// untouched. The step counter advances by exactly one.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        active: Option<&[bool]>,
    ) -> Result<(), NumError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumError::Shape {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.first.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NumError::shape_pair("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single-tensor Adam step; `state` must have been created with one slot.
pub fn adam_step(state: &mut AdamState, params: &Tensor, grads: &Tensor) -> Result<Tensor, NumError> {
    let mut p = params.clone();
    state.update(&mut [&mut p], std::slice::from_ref(grads), None)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&[3]]);
        let mut cur = p.clone();
        for _ in 0..10 {
            cur = adam_step(&mut st, &cur, &Tensor::zeros(&[3])).unwrap();
        }
        assert_eq!(cur, p);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(AdamConfig::default(), &[&[1]]);
        let p = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        let out = adam_step(&mut st, &p, &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction: Δ = lr / (1 + ε)
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((out.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut st = AdamState::new(AdamConfig::default(), &[&[2]]);
        let err = adam_step(&mut st, &Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, NumError::Shape { .. }));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn inactive_slots_stay_bitwise_unchanged() {
        let mut st = AdamState::new(AdamConfig::default(), &[&[2], &[2]]);
        let mut a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let g = Tensor::vector(vec![0.5, -0.5]).unwrap();
        st.update(&mut [&mut a, &mut b], &[g.clone(), g], Some(&[true, false])).unwrap();
        assert_ne!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[3.0, 4.0]);
        assert_eq!(st.second[1].data(), &[0.0, 0.0]);
    }
}
