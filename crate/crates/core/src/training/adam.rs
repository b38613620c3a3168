use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightDecay {
    /// `p ← p − lr·wd·p`, applied before and outside the adaptive step.
    #[default]
    Decoupled,
    /// `g ← g + wd·p`, folded into the gradient.
    L2,
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam step over `params`, reading their accumulated
/// gradients (missing gradients count as zero).
///
/// Returns fresh leaves holding the updated values; the old leaves have
/// their gradients cleared.
pub fn adam_step(
    params: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    mode: WeightDecay,
) -> Result<Vec<Tensor>> {
    if params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} names, {} moment buffers",
            params.len(),
            names.len(),
            state.m.len()
        )));
    }
    let grads: Vec<Vec<f64>> = params
        .iter()
        .zip(names)
        .map(|(p, name)| {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            match g.iter().position(|v| !v.is_finite()) {
                Some(i) => Err(Error::Divergence {
                    location: format!("parameter {name}[{i}]"),
                    reason: format!("non-finite gradient {}", g[i]),
                }),
                None => Ok(g),
            }
        })
        .collect::<Result<_>>()?;

    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut updated = Vec::with_capacity(params.len());
    for (i, (p, mut g)) in params.iter().zip(grads).enumerate() {
        let mut values = p.data().to_vec();
        match mode {
            WeightDecay::Decoupled if weight_decay != 0.0 => {
                values.iter_mut().for_each(|x| *x -= lr * weight_decay * *x);
            }
            WeightDecay::L2 if weight_decay != 0.0 => {
                g.iter_mut().zip(p.data()).for_each(|(gv, x)| *gv += weight_decay * x);
            }
            _ => {}
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..values.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.zero_grad();
        updated.push(p.with_data(values)?);
    }
    Ok(updated)
}
