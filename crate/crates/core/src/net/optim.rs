use super::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v ← momentum·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&Gradients> {
        self.velocity.as_ref()
    }

    /// Applies one update. Non-finite gradients abort the step and leave both
    /// parameters and velocity untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let layout_ok = grads.0.len() == params.tensors.len()
            && grads.0.iter().zip(&params.tensors).all(|(g, t)| g.len() == t.data.len());
        if !layout_ok {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient; step skipped".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| params.zero_grads());
        for (v, g) in velocity.0.iter_mut().zip(&grads.0) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
        }
        let lr = self.lr;
        for (p, v) in params.values_mut().zip(&velocity.0) {
            for (pi, vi) in p.iter_mut().zip(v) {
                *pi -= lr * vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Arch, ConvSpec, InputShape};

    fn small() -> ModelParams {
        let arch = Arch {
            input: InputShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            conv: vec![ConvSpec {
                channels: 2,
                kernel: 3,
            }],
            hidden: vec![],
            embedding_dim: 2,
            class_count: 2,
        };
        init_params(11, &arch).unwrap()
    }

    fn filled(p: &ModelParams, v: f64) -> Gradients {
        let mut g = p.zero_grads();
        g.0.iter_mut().flatten().for_each(|x| *x = v);
        g
    }

    #[test]
    fn first_step_from_rest_moves_by_lr_times_grad() {
        let mut p = small();
        let before = p.clone();
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let g = filled(&p, 0.5);
        opt.step(&mut p, &g).unwrap();
        for (a, b) in p.values().flatten().zip(before.values().flatten()) {
            assert!((b - a - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_identity_and_zero_momentum_is_plain_descent() {
        let mut p = small();
        let before = p.clone();
        let mut opt = SgdMomentum::new(0.0, 0.9);
        let g = filled(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);

        let mut opt = SgdMomentum::new(0.1, 0.0);
        let g = filled(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        for (a, b) in p.values().flatten().zip(before.values().flatten()) {
            assert!((b - a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = small();
        let before = p.clone();
        let mut opt = SgdMomentum::new(1.0, 0.5);
        let g = filled(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.5; total displacement 2.5.
        for (a, b) in p.values().flatten().zip(before.values().flatten()) {
            assert!((b - a - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_state() {
        let mut p = small();
        let before = p.clone();
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let mut g = filled(&p, 1.0);
        g.0[0][0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Numeric(_))));
        assert_eq!(p, before);
        assert!(opt.velocity().is_none());
    }
}
