use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `alpha0 * (1 - epoch / total)^0.9`.
pub fn lr_schedule(alpha0: f64, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::invalid(
            "lr_schedule",
            format!("epoch {epoch} outside 0..={total} (total must be positive)"),
        ));
    }
    if epoch == total {
        return Ok(0.0);
    }
    Ok(alpha0 * (1.0 - epoch as f64 / total as f64).powf(0.9))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update in place.
///
/// `names` labels parameters in diagnostics; a non-finite gradient aborts the
/// step before anything is modified.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
    names: &[&str],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} / {} moments",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i} ({name}) {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "non-finite gradient {} at element {j} of parameter {i} ({name}), step {}",
                    g.data()[j],
                    state.step + 1
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
