use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::io::TensorFile;
use crate::nn::{Module, SlotMut};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// A named set of parameters sharing one learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub steps: u64,
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with decoupled weight decay. Each parameter belongs to at most one
/// group, chosen by `group_of(name)`; parameters outside every group are
/// left untouched.
pub struct AdamW {
    pub config: AdamWConfig,
    groups: Vec<ParamGroup>,
    group_of: fn(&str) -> &'static str,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>, group_of: fn(&str) -> &'static str) -> Self {
        AdamW {
            config,
            groups,
            group_of,
            state: BTreeMap::new(),
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn set_lr(&mut self, group: &str, lr: f64) {
        if let Some(g) = self.groups.iter_mut().find(|g| g.name == group) {
            g.lr = lr;
        }
    }

    pub fn lr(&self, group: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == group).map(|g| g.lr)
    }

    fn group_index(&self, name: &str) -> Option<usize> {
        let key = (self.group_of)(name);
        self.groups.iter().position(|g| g.name == key)
    }

    /// One update using the gradients currently stored on `module`.
    pub fn step(&mut self, module: &mut dyn Module) {
        for g in &mut self.groups {
            g.steps += 1;
        }
        let cfg = self.config;
        let groups = self.groups.clone();
        let group_of = self.group_of;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            let key = group_of(name);
            let Some(group) = groups.iter().find(|g| g.name == key) else {
                return;
            };
            let lr = group.lr;
            let bc1 = 1.0 - cfg.beta1.powi(group.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(group.steps as i32);
            let decay = if p.role.decays() { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i] as f64;
                let m = cfg.beta1 * st.m[i] as f64 + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * st.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                values[i] = (values[i] as f64 * decay - update) as f32;
            }
        });
    }

    /// Whether `name` would be updated by [`AdamW::step`].
    pub fn updates(&self, name: &str) -> bool {
        self.group_index(name).is_some()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        for (name, st) in &self.state {
            let n = st.m.len();
            file.tensors.insert(format!("exp_avg.{name}"), Tensor::from_vec(&[n], st.m.clone()).expect("shape"));
            file.tensors.insert(format!("exp_avg_sq.{name}"), Tensor::from_vec(&[n], st.v.clone()).expect("shape"));
        }
        file.metadata.insert("groups".into(), serde_json::to_string(&self.groups).expect("groups"));
        file.metadata.insert("config".into(), serde_json::to_string(&self.config).expect("config"));
        file
    }

    pub fn from_tensor_file(file: &TensorFile, group_of: fn(&str) -> &'static str) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Resume(format!("optimizer state: {m}"));
        let groups: Vec<ParamGroup> = serde_json::from_str(file.metadata.get("groups").ok_or_else(|| bad("no groups".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let config: AdamWConfig = serde_json::from_str(file.metadata.get("config").ok_or_else(|| bad("no config".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let mut state = BTreeMap::new();
        for (key, t) in &file.tensors {
            if let Some(name) = key.strip_prefix("exp_avg.") {
                let v = file
                    .tensors
                    .get(&format!("exp_avg_sq.{name}"))
                    .ok_or_else(|| bad(format!("no second moment for {name}")))?;
                state.insert(
                    name.to_string(),
                    Moments {
                        m: t.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        Ok(AdamW {
            config,
            groups,
            group_of,
            state,
        })
    }
}
