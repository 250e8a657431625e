use std::collections::BTreeSet;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Per-parameter running averages of squared gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub accumulators: ParamSet,
}

impl OptimizerState {
    pub fn for_params(params: &ParamSet) -> Self {
        Self {
            accumulators: params.zeros_like(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl RmsProp {
    /// One update of every non-frozen parameter:
    /// `s ← ρ s + (1−ρ) g²`, `p ← p − lr g / √(s + ε)`.
    ///
    /// A parameter absent from `grads` is treated as having a zero gradient.
    /// Frozen parameters and their accumulators are left untouched.
    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &ParamSet,
        state: &mut OptimizerState,
        lr: impl Fn(&str) -> f64,
        frozen: &BTreeSet<String>,
    ) -> Result<()> {
        for (name, p) in params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if !g.same_shape(p) {
                    return Err(Error::Shape {
                        op: "rmsprop_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
            if !state.accumulators.contains(name) {
                state.accumulators.insert(name, Tensor::zeros(p.shape()));
            }
            let s = state.accumulators.get_mut(name).unwrap();
            if !s.same_shape(p) {
                return Err(Error::Shape {
                    op: "rmsprop_state",
                    left: p.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            let rate = lr(name);
            match g {
                Some(g) => {
                    for ((pv, sv), gv) in p.data_mut().iter_mut().zip(s.data_mut()).zip(g.data()) {
                        *sv = self.rho * *sv + (1.0 - self.rho) * gv * gv;
                        *pv -= rate * gv / (*sv + self.eps).sqrt();
                    }
                }
                None => s.data_mut().iter_mut().for_each(|sv| *sv *= self.rho),
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so that their joint L2 norm over `names` is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<'a>(
    grads: &mut ParamSet,
    names: impl Iterator<Item = &'a str> + Clone,
    max_norm: f64,
) -> f64 {
    let norm = names
        .clone()
        .filter_map(|n| grads.get(n))
        .map(Tensor::norm_sq)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for n in names {
            if let Some(g) = grads.get_mut(n) {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_decays_accumulator_only() {
        let mut params = single("w", 1.25);
        let mut state = OptimizerState {
            accumulators: single("w", 0.4),
        };
        RmsProp::default()
            .step(
                &mut params,
                &single("w", 0.0),
                &mut state,
                |_| 0.1,
                &BTreeSet::new(),
            )
            .unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.25]);
        assert!((state.accumulators.get("w").unwrap().data()[0] - 0.36).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        let (lr, rho, eps, g) = (0.01, 0.9, 1e-8, -0.3);
        let mut params = single("w", 0.0);
        let mut state = OptimizerState::for_params(&params);
        RmsProp { rho, eps }
            .step(
                &mut params,
                &single("w", g),
                &mut state,
                |_| lr,
                &BTreeSet::new(),
            )
            .unwrap();
        let expected = -lr * g / ((1.0 - rho) * g * g + eps).sqrt();
        assert_eq!(params.get("w").unwrap().data()[0], expected);
        // ≈ −lr·sign(g)/√(1−ρ)
        assert!((expected - lr / (1.0f64 - rho).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut params = single("w", 0.123);
        params.insert("v", Tensor::vector(vec![1.0]));
        let mut grads = single("w", 5.0);
        grads.insert("v", Tensor::vector(vec![1.0]));
        let mut state = OptimizerState::for_params(&params);
        let frozen: BTreeSet<String> = ["w".to_owned()].into();
        RmsProp::default()
            .step(&mut params, &grads, &mut state, |_| 0.1, &frozen)
            .unwrap();
        assert_eq!(
            params.get("w").unwrap().data()[0].to_bits(),
            0.123f64.to_bits()
        );
        assert_eq!(state.accumulators.get("w").unwrap().data(), &[0.0]);
        assert_ne!(params.get("v").unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = single("w", 0.0);
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut state = OptimizerState::default();
        let err = RmsProp::default()
            .step(&mut params, &grads, &mut state, |_| 0.1, &BTreeSet::new())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                op: "rmsprop_step",
                ..
            }
        ));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::vector(vec![3.0]));
        g.insert("b", Tensor::vector(vec![4.0]));
        let before = clip_global_norm(&mut g, ["a", "b"].into_iter(), 1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
