use std::collections::BTreeMap;

use super::{NnError, ParamSet, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Bias-corrected Adam update in place, then clears all gradients.
///
/// Every parameter must carry a gradient; nothing is modified otherwise.
pub fn adam_step(ps: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = ps.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(NnError::MissingGrad(name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in ps.iter_mut() {
        let g = p.grad.take().expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.raw_dim()));
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(&g)
            .for_each(|w, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
