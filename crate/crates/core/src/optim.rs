//! Adam over a subset of parameter groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Mat, ParamId};
use crate::vae::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    groups: Vec<ParamGroup>,
    moments: BTreeMap<ParamId, (Mat, Mat)>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: &[ParamGroup]) -> Result<Self> {
        config.validate()?;
        if groups.is_empty() {
            return Err(Error::Config("optimizer needs at least one parameter group".into()));
        }
        Ok(Self {
            config,
            groups: groups.to_vec(),
            moments: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from `grads`. Gradients for parameters outside this
    /// optimizer's groups are a configuration error. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        let mut collected: BTreeMap<ParamId, &Mat> = BTreeMap::new();
        for (id, g) in grads.params() {
            if !self.groups.contains(&params.group(id)) {
                return Err(Error::Config(format!(
                    "gradient for {:?} parameter reached an optimizer over {:?}",
                    params.group(id),
                    self.groups
                )));
            }
            if collected.insert(id, g).is_some() {
                return Err(Error::Config("parameter bound twice in one graph".into()));
            }
        }
        let norm = collected.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient norm".into()));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in collected {
            let value = params.value_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Mat::zeros(value.dim()), Mat::zeros(value.dim())));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Graph;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("w", ParamGroup::Decoder, array![[3.0, -2.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[ParamGroup::Decoder],
        )
        .unwrap();
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(id, store.value(id).clone());
            let sq = g.square(w);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn foreign_group_gradient_is_config_error() {
        let mut store = ParamStore::default();
        let id = store.add("w", ParamGroup::Classifier, array![[1.0]]);
        let mut opt = Adam::new(AdamConfig::default(), &ParamGroup::GENERATIVE).unwrap();
        let mut g = Graph::new();
        let w = g.param(id, store.value(id).clone());
        let loss = g.sum_all(w);
        let grads = g.backward(loss);
        assert!(matches!(opt.step(&mut store, &grads), Err(Error::Config(_))));
        assert!(Adam::new(AdamConfig::default(), &[]).is_err());
    }
}
