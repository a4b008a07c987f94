use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// The base rate at every step.
    #[default]
    Constant,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, _step: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
        }
    }
}

/// First and second moments per trainable tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<'a>(trainables: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<_> = trainables
            .into_iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect();
        OptimizerState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place.
///
/// ```text
/// t += 1
/// m = b1 m + (1 - b1) g
/// v = b2 v + (1 - b2) g^2
/// p = p - lr wd p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Every gradient is checked for finiteness before anything is modified.
pub fn adamw_step(
    trainables: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    names: &[String],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let n = trainables.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "{n} trainables, {} grads, {} moment tensors",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in trainables.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() {
            return Err(Error::Shape(format!(
                "tensor {i}: param {:?}, grad {:?}, moment {:?}",
                p.dim(),
                g.dim(),
                state.m[i].dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                step: state.t + 1,
            });
        }
    }

    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = lr * cfg.weight_decay;
    for (i, p) in trainables.iter_mut().enumerate() {
        Zip::from(&mut **p)
            .and(&grads[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - decay * *p - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
