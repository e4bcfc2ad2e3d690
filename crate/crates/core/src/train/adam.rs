use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tape::Gradients;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(layout: &ParamSet) -> Self {
        Self {
            m: layout.zeros_like(),
            v: layout.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, hyper: AdamHyper) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .filter(|g| g.shape() == p.shape())
            .ok_or_else(|| Error::shape("adam_step", format!("gradient for `{name}` missing or misshapen")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::shape("adam_step", format!("no state for `{name}`")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::shape("adam_step", format!("no state for `{name}`")))?;
        if m.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("state for `{name}` has the wrong shape")));
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert("x".into(), Tensor::scalar(v));
        g
    }

    const HYPER: AdamHyper = AdamHyper {
        learning_rate: 0.001,
        beta1: 0.9,
        beta2: 0.999,
    };

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grad(1.0), &mut s, HYPER).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(1.5);
        let mut s = AdamState::new(&p);
        for _ in 0..20 {
            adam_step(&mut p, &grad(0.0), &mut s, HYPER).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        // minimize (x − 3)²
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let h = AdamHyper { learning_rate: 0.1, beta1: 0.9, beta2: 0.98 };
        for t in 1..=10 {
            let g = 2.0 * (p.get("x").unwrap().item() - 3.0);
            adam_step(&mut p, &grad(g), &mut s, h).unwrap();
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.98f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("x").unwrap().item() - x).abs() < 1e-12);
        }
        assert_eq!(s.step(), 10);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &Gradients::default(), &mut s, HYPER).is_err());
    }
}
