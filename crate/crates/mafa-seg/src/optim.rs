//! Named parameter storage, the Adam optimizer, and the staircase learning
//! rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use std::collections::HashMap;

/// Ordered set of named parameter tensors. Insertion order is stable and
/// defines the checkpoint layout. Batchnorm running statistics live here too
/// but are not trainable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor4>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor4) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor4 {
        let i = self.index[name];
        &self.tensors[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor4> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor4 {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalar values across all tensors.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Running statistics are carried state, not learned weights.
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.names
            .iter()
            .filter(|n| Self::is_trainable(n))
            .cloned()
            .collect()
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: HashMap<String, Tensor4>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: Tensor4) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.grads.get(name)
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<(String, Tensor4)>,
    pub v: Vec<(String, Tensor4)>,
}

impl AdamState {
    /// Zero state shaped after the trainable parameters of `params`.
    pub fn new(params: &ParamSet) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.iter() {
            if ParamSet::is_trainable(name) {
                m.push((name.to_string(), Tensor4::zeros(t.dims)));
                v.push((name.to_string(), Tensor4::zeros(t.dims)));
            }
        }
        AdamState { step: 0, m, v }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction over every trainable parameter.
/// Parameters missing from `grads` are treated as zero-gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument("adam_step: lr must be > 0".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((name, m), (_, v)) in state.m.iter_mut().zip(state.v.iter_mut()) {
        let zero;
        let g = match grads.get(name) {
            Some(g) => {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {name}")));
                }
                g
            }
            None => {
                zero = Tensor4::zeros(m.dims);
                &zero
            }
        };
        if g.dims != m.dims {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} != parameter shape {:?} for {name}",
                g.dims, m.dims
            )));
        }
        let p = params.get_mut(name);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Staircase exponential decay: `base * decay^floor(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub step_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.0005,
            decay: 0.5,
            step_epochs: 15,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.step_epochs) as i32)
    }
}

/// The default schedule's learning rate at a given epoch.
pub fn lr_at(epoch: usize) -> f64 {
    LrSchedule::default().lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamSet, AdamState) {
        let mut p = ParamSet::new();
        p.insert("w", Tensor4::filled([1, 1, 1, 2], v)).unwrap();
        let s = AdamState::new(&p);
        (p, s)
    }

    #[test]
    fn first_step_is_signed_lr() {
        // bias-corrected m̂ = g, v̂ = g², so the first update is -lr·sign(g)
        let (mut p, mut s) = one_param(1.0);
        let mut g = GradMap::new();
        g.accumulate(
            "w",
            Tensor4::from_vec([1, 1, 1, 2], vec![0.3, -2.0]).unwrap(),
        );
        adam_step(&mut p, &g, &mut s, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert!((p.get("w").data[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p.get("w").data[1] - (1.0 + 0.01)).abs() < 1e-6);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, mut s) = one_param(0.7);
        let mut g = GradMap::new();
        g.accumulate("w", Tensor4::zeros([1, 1, 1, 2]));
        adam_step(&mut p, &g, &mut s, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(p.get("w").data, vec![0.7, 0.7]);
    }

    #[test]
    fn effective_step_shrinks_as_v_accumulates() {
        let (mut p, mut s) = one_param(0.0);
        let mut g = GradMap::new();
        g.accumulate("w", Tensor4::filled([1, 1, 1, 2], 1.0));
        adam_step(&mut p, &g, &mut s, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        let d1 = p.get("w").data[0].abs();
        let before = p.get("w").data[0];
        adam_step(&mut p, &g, &mut s, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        let d2 = (p.get("w").data[0] - before).abs();
        assert!(d2 <= d1 + 1e-12, "d1={d1} d2={d2}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut p, mut s) = one_param(0.0);
        let mut g = GradMap::new();
        g.accumulate(
            "w",
            Tensor4::from_vec([1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap(),
        );
        let err = adam_step(&mut p, &g, &mut s, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
            .unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn lr_schedule_constants() {
        assert_eq!(lr_at(0), 0.0005);
        assert_eq!(lr_at(14), 0.0005);
        assert_eq!(lr_at(15), 0.00025);
        assert_eq!(lr_at(30), 0.000125);
    }

    #[test]
    fn running_stats_not_trainable() {
        assert!(ParamSet::is_trainable("enc.stage0.conv.weight"));
        assert!(!ParamSet::is_trainable("enc.stage0.bn.running_mean"));
        assert!(!ParamSet::is_trainable("enc.stage0.bn.running_var"));
    }
}
