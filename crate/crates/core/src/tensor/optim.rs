use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub t: u64,
}

/// AdamW with decoupled weight decay. Moments persist across calls and are
/// created lazily the first time a parameter is updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }

    /// One update of every non-frozen parameter. Frozen parameters are not
    /// read or written; their moments are left as they were.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let names = store.trainable_names();
        for n in &names {
            let g = grads
                .get(n)
                .ok_or_else(|| Error::Consistency(format!("missing gradient for '{n}'")))?;
            if g.shape() != store.get(n).expect("listed").shape() {
                return Err(Error::Consistency(format!("gradient shape mismatch for '{n}'")));
            }
            g.check_finite(n)?;
        }
        let clip = match self.cfg.clip_norm {
            Some(max) => {
                let norm = names.iter().map(|n| grads[n].sq_norm()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        for n in &names {
            let p = store.get_mut(n).expect("listed");
            let g = &grads[n];
            let st = self.state.entry(n.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(())
    }
}
