use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the parameter directly instead of being
    /// added to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: false,
        }
    }
}

/// Per-tensor optimizer options.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamSpec {
    pub weight_decay: bool,
    /// Values are projected into `[lower, upper]` after every step.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    specs: &[ParamSpec],
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), specs.len());
    assert_eq!(params.len(), state.m.len());
    let iteration = state.step + 1;
    for (p, g) in params.iter().zip(grads) {
        assert_eq!(p.dim(), g.dim(), "parameter and gradient shapes differ");
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration });
        }
    }
    state.step = iteration;
    let t = iteration as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let spec = specs[k];
        let wd = if spec.weight_decay { config.weight_decay } else { 0.0 };
        let coupled = if config.decoupled { 0.0 } else { wd };
        let decoupled = if config.decoupled { wd } else { 0.0 };
        Zip::from(p)
            .and(g)
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .for_each(|p, &g, m, v| {
                let g = g + coupled * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * decoupled * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
                if let Some(lo) = spec.lower {
                    *p = p.max(lo);
                }
                if let Some(hi) = spec.upper {
                    *p = p.min(hi);
                }
            });
    }
    Ok(())
}
