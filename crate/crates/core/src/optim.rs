//! Named parameter storage and plain SGD with weight decay and a step
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Parameters keyed by name; iteration order is the name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds `grad` onto the named parameter's accumulator.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::Optimizer(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != grad.shape() {
            return Err(TensorError::Shape(format!(
                "gradient shape {:?} for parameter {name:?} of shape {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }
}

/// Step schedule milestone: from `iteration` on, divide the rate by `divisor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Milestone {
    pub iteration: usize,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Vec<Milestone>,
    pub total_iterations: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].iteration <= pair[0].iteration {
                return bad("milestones must be strictly increasing".into());
            }
        }
        if let Some(m) = self.schedule.iter().find(|m| m.divisor.is_nan() || m.divisor <= 1.0) {
            return bad(format!("milestone divisor {} must exceed 1", m.divisor));
        }
        Ok(())
    }

    /// Base rate divided by every milestone already reached.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|m| m.iteration <= iteration)
            .fold(self.learning_rate, |lr, m| lr / m.divisor)
    }

    /// Milestones at the same fractions of `total` as 10k and 13k of 15k
    /// iterations, each dividing by 10.
    pub fn scaled_schedule(learning_rate: f64, weight_decay: f64, total: usize) -> Self {
        let at = |num: usize| (total * num).div_ceil(15).max(1);
        let mut schedule = vec![
            Milestone { iteration: at(10), divisor: 10.0 },
            Milestone { iteration: at(13), divisor: 10.0 },
        ];
        schedule.dedup_by_key(|m| m.iteration);
        Self {
            learning_rate,
            weight_decay,
            schedule,
            total_iterations: total,
        }
    }
}

/// `p ← p − lr·(grad + weight_decay·p)` for each named parameter, then the
/// gradients are reset to zero.
pub fn sgd_step<'a, I>(params: &mut ParamSet, names: I, config: &SgdConfig, iteration: usize) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: Vec<&str> = names.into_iter().collect();
    for name in &names {
        match params.params.get(*name) {
            None => return Err(TensorError::Optimizer(format!("unknown parameter {name:?}"))),
            Some(p) if p.grad.is_none() => {
                return Err(TensorError::Optimizer(format!("parameter {name:?} has no gradient")))
            }
            Some(_) => {}
        }
    }
    let lr = config.lr_at(iteration);
    let wd = config.weight_decay;
    for name in names {
        let p = params.params.get_mut(name).expect("checked above");
        let grad = p.grad.as_mut().expect("checked above");
        for (w, g) in p.value.data_mut().iter_mut().zip(grad.data_mut()) {
            *w -= lr * (*g + wd * *w);
            *g = 0.0;
        }
    }
    Ok(())
}
