//! Adam with L2 weight decay folded into the gradient.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Moment state is keyed by parameter name, so parameters can leave and
/// rejoin the trainable set (encoder freezing) without losing it.
pub struct Adam {
    params: AdamParams,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> candle_core::Result<()> {
        let AdamParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if weight_decay != 0.0 {
                g = (g + p.affine(weight_decay, 0.0)?)?;
            }
            let st = match self.state.get_mut(name) {
                Some(s) => s,
                None => self.state.entry(name.clone()).or_insert(Moments {
                    m: p.zeros_like()?,
                    v: p.zeros_like()?,
                    t: 0,
                }),
            };
            st.t += 1;
            st.m = (st.m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            st.v = (st.v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let m_hat = st.m.affine(1.0 / (1.0 - beta1.powi(st.t)), 0.0)?;
            let v_hat = st.v.affine(1.0 / (1.0 - beta2.powi(st.t)), 0.0)?;
            let update = (m_hat / v_hat.sqrt()?.affine(1.0, eps)?)?;
            var.set(&(p - update.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }
}
