use std::collections::HashMap;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Stable handle to a parameter inside one [`ParameterRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    velocity: Option<Vec<f64>>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Momentum SGD with coupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Ordered set of named parameters. Registration order is the checkpoint
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            velocity: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Drops every parameter registered after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        for p in self.params.drain(len.min(self.params.len())..) {
            self.by_name.remove(&p.name);
        }
    }

    /// Adds the parameter adjoints from a backward sweep into the registry.
    /// Every parameter ends up with a populated gradient; those the loss does
    /// not reach get zeros.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for (id, g) in grads.params() {
            if let Some(acc) = self.params.get_mut(id.0).and_then(|p| p.grad.as_mut()) {
                for (a, v) in acc.data_mut().iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`,
    /// then clears gradients.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<()> {
        cfg.validate()?;
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Invariant(format!(
                "parameter {:?} has no gradient; run backward first",
                p.name
            )));
        }
        for p in &mut self.params {
            let grad = p.grad.take().expect("checked above");
            let velocity = p.velocity.get_or_insert_with(|| vec![0.0; grad.numel()]);
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
        }
        Ok(())
    }

    /// Copies values (not optimiser state) from another registry with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParameterRegistry) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Validation(format!(
                "registry size {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {:?} does not match {:?}",
                    mine.name, theirs.name
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn registry_with_grad(value: f64, grad: f64) -> (ParameterRegistry, ParamId) {
        let mut reg = ParameterRegistry::new();
        let id = reg.register("w", Tensor::full(&[3], value)).unwrap();
        reg.params[0].grad = Some(Tensor::full(&[3], grad));
        (reg, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParameterRegistry::new();
        reg.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(reg.register("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn vanilla_sgd() {
        let (mut reg, id) = registry_with_grad(1.0, 0.5);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        reg.sgd_step(&cfg).unwrap();
        assert_eq!(reg.get(id).value().data(), &[1.0 - 0.1 * 0.5; 3]);
        assert!(reg.get(id).grad().is_none());
    }

    #[test]
    fn zero_grad_fixed_point() {
        let (mut reg, id) = registry_with_grad(1.25, 0.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        reg.sgd_step(&cfg).unwrap();
        assert_eq!(reg.get(id).value().data(), &[1.25; 3]);
    }

    #[test]
    fn momentum_two_steps() {
        let (mut reg, id) = registry_with_grad(0.0, 1.0);
        let cfg = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
        reg.sgd_step(&cfg).unwrap();
        reg.params[0].grad = Some(Tensor::full(&[3], 1.0));
        reg.sgd_step(&cfg).unwrap();
        for &w in reg.get(id).value().data() {
            assert!((w + 2.9 * 0.01).abs() < 1e-15, "{w}");
        }
    }

    #[test]
    fn missing_grad_is_invariant_error() {
        let mut reg = ParameterRegistry::new();
        reg.register("w", Tensor::zeros(&[2])).unwrap();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(matches!(reg.sgd_step(&cfg), Err(Error::Invariant(_))));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut reg = ParameterRegistry::new();
        let a = reg.register("a", Tensor::full(&[2], 3.0)).unwrap();
        let b = reg.register("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let av = g.param(&reg, a);
        let s = g.sum(av);
        let grads = g.backward(s).unwrap();
        reg.accumulate(&grads);
        assert_eq!(reg.get(a).grad().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(reg.get(b).grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn truncate_forgets_names() {
        let mut reg = ParameterRegistry::new();
        reg.register("a", Tensor::zeros(&[1])).unwrap();
        reg.register("b", Tensor::zeros(&[1])).unwrap();
        reg.truncate(1);
        assert_eq!(reg.len(), 1);
        assert!(reg.lookup("b").is_none());
        reg.register("b", Tensor::zeros(&[1])).unwrap();
    }
}
