use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{check_same_layout, ParameterVector};

/// SGD hyperparameters. `weight_decay` is coupled (added to the gradient
/// before the momentum update), not decoupled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffer plus settings. One state per locally-trained model; the
/// buffer starts at zero.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    buffer: Vec<f64>,
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings, num_params: usize) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            settings,
            buffer: vec![0.0; num_params],
        })
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }
}

/// One SGD-with-momentum step:
///
/// ```text
/// buf <- momentum * buf + grad + weight_decay * params
/// params <- params - lr * buf
/// ```
///
/// Consumes and returns the parameter vector; the momentum buffer advances in
/// `state`. The gradient must be finite, and the step must keep the
/// parameters finite.
pub fn sgd_step(
    mut params: ParameterVector,
    grad: &ParameterVector,
    state: &mut OptimizerState,
) -> Result<ParameterVector> {
    check_same_layout(&params, grad)?;
    if state.buffer.len() != params.len() {
        return Err(Error::Input(format!(
            "optimizer buffer has {} entries, parameters have {}",
            state.buffer.len(),
            params.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("gradient contains non-finite values".into()));
    }
    let OptimizerSettings {
        lr,
        momentum,
        weight_decay,
    } = state.settings;
    for ((p, g), buf) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.buffer.iter_mut())
    {
        *buf = momentum * *buf + *g + weight_decay * *p;
        *p -= lr * *buf;
    }
    if !params.is_finite() {
        return Err(Error::Numeric(
            "parameters became non-finite after SGD step".into(),
        ));
    }
    Ok(params)
}

/// Central-finite-difference gradient verification.
///
/// `f` maps parameters to `(loss, analytic gradient)` and must be
/// deterministic. Returns the maximum elementwise relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(params: &ParameterVector, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&ParameterVector) -> Result<(f64, ParameterVector)>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Input(format!("eps must be > 0, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is non-finite at the base point".into()));
    }
    check_same_layout(params, &analytic)?;

    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    for i in 0..params.len() {
        let base = params.values()[i];
        probe.values_mut()[i] = base + eps;
        let (loss_plus, _) = f(&probe)?;
        probe.values_mut()[i] = base - eps;
        let (loss_minus, _) = f(&probe)?;
        probe.values_mut()[i] = base;
        let numeric = (loss_plus - loss_minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "finite-difference probe at index {i} is non-finite"
            )));
        }
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelArch};
    use std::sync::Arc;

    fn scalar_params(vals: &[f64]) -> ParameterVector {
        let layout = Arc::new(vec![crate::nn::ParamEntry {
            id: "trunk0.bias".into(),
            offset: 0,
            shape: vec![vals.len()],
        }]);
        ParameterVector::from_values(layout, vals.to_vec()).unwrap()
    }

    #[test]
    fn plain_step_without_momentum() {
        let params = scalar_params(&[1.0]);
        let grad = scalar_params(&[1.0]);
        let mut state = OptimizerState::new(
            OptimizerSettings {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            1,
        )
        .unwrap();
        let params = sgd_step(params, &grad, &mut state).unwrap();
        assert!((params.values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        // From zero with constant gradient 1: step 1 lands at -0.1,
        // step 2 at -0.1 - 0.1*(0.9 + 1) = -0.29.
        let mut params = scalar_params(&[0.0]);
        let grad = scalar_params(&[1.0]);
        let mut state = OptimizerState::new(
            OptimizerSettings {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            1,
        )
        .unwrap();
        params = sgd_step(params, &grad, &mut state).unwrap();
        assert!((params.values()[0] + 0.1).abs() < 1e-12);
        params = sgd_step(params, &grad, &mut state).unwrap();
        assert!((params.values()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let params = scalar_params(&[2.0]);
        let grad = scalar_params(&[0.0]);
        let mut state = OptimizerState::new(
            OptimizerSettings {
                lr: 1.0,
                momentum: 0.0,
                weight_decay: 0.1,
            },
            1,
        )
        .unwrap();
        let params = sgd_step(params, &grad, &mut state).unwrap();
        assert!((params.values()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_settings_and_nonfinite_gradients() {
        assert!(OptimizerSettings {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(OptimizerSettings {
            lr: 0.1,
            momentum: 1.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(OptimizerSettings {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: -0.1
        }
        .validate()
        .is_err());

        let params = scalar_params(&[1.0]);
        let grad = scalar_params(&[f64::NAN]);
        let mut state = OptimizerState::new(OptimizerSettings::default(), 1).unwrap();
        match sgd_step(params, &grad, &mut state) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_accepts_correct_quadratic_gradient() {
        let arch = ModelArch {
            input_dim: 2,
            trunk_dims: vec![3],
            num_classes: 2,
            aux_head: None,
            activation: Activation::Relu,
        };
        let params = arch.init_params(42).unwrap();
        let f = |p: &ParameterVector| {
            let loss: f64 = p.values().iter().map(|v| v * v).sum();
            let mut grad = p.clone();
            grad.scale(2.0);
            Ok((loss, grad))
        };
        let max_rel = grad_check(&params, f, 1e-5).unwrap();
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        let params = scalar_params(&[0.7, -0.3]);
        let f = |p: &ParameterVector| {
            let loss: f64 = p.values().iter().map(|v| v * v).sum();
            let mut grad = p.clone();
            grad.scale(3.0); // wrong: true gradient is 2x
            Ok((loss, grad))
        };
        let max_rel = grad_check(&params, f, 1e-5).unwrap();
        assert!(max_rel > 0.1, "wrong gradient slipped through: {max_rel}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let params = scalar_params(&[1.0]);
        let f = |p: &ParameterVector| Ok((p.values()[0], p.clone()));
        match grad_check(&params, f, 0.0) {
            Err(Error::Input(_)) => {}
            other => panic!("expected input error, got {other:?}"),
        }
    }
}
