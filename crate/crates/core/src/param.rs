use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nerfcodec_autodiff::{Tape, Tensor, Var};

use crate::error::{CodecError, Result};
use crate::precision::Precision;

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Learning-rate family of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    /// Feature planes, plane deltas and entropy-model parameters.
    Field,
    /// Network weights and low-rank adapters.
    Network,
}

/// A named, shareable learnable tensor.
///
/// Cloning keeps the identity key, so a clone is the same parameter as far as
/// [`Trainable`] and [`Graph`] are concerned; values are copy-on-write.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
    key: u64,
    group: LrGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, group: LrGroup) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            group,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> &Arc<Tensor> {
        &self.value
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn group(&self) -> LrGroup {
        self.group
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn make_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(CodecError::Shape(format!(
                "{}: {:?} replaced by {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    /// Same value under a fresh identity.
    pub fn fork(&self) -> Self {
        Self {
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            ..self.clone()
        }
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.clone()));
        out
    }
}

impl Module for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(|m| m.visit(f))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_mut(f))
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

/// The set of parameters an optimizer may change.
#[derive(Clone, Debug, Default)]
pub struct Trainable {
    keys: HashSet<u64>,
    count: usize,
}

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn add(&mut self, m: &dyn Module) -> &mut Self {
        m.visit(&mut |p| {
            if self.keys.insert(p.key()) {
                self.count += p.len();
            }
        });
        self
    }

    pub fn with(mut self, m: &dyn Module) -> Self {
        self.add(m);
        self
    }

    pub fn contains(&self, p: &Param) -> bool {
        self.keys.contains(&p.key())
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of scalar entries across the set.
    pub fn scalar_count(&self) -> usize {
        self.count
    }
}

/// A tape plus the mapping from parameters to the tape nodes bound for them.
pub struct Graph<'a, T: Precision = f32> {
    pub tape: Tape<T>,
    trainable: &'a Trainable,
    bound: HashMap<u64, Var>,
    leaves: Vec<(u64, Var)>,
}

impl<'a, T: Precision> Graph<'a, T> {
    pub fn new(trainable: &'a Trainable) -> Self {
        Self {
            tape: Tape::new(),
            trainable,
            bound: HashMap::new(),
            leaves: Vec::new(),
        }
    }

    /// Tape node for `p`: a leaf when trainable, a constant otherwise. Binding
    /// the same parameter twice yields the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.key()) {
            return v;
        }
        let value = T::lift(p.shared());
        let v = if self.trainable.contains(p) {
            let v = self.tape.leaf_shared(value);
            self.leaves.push((p.key(), v));
            v
        } else {
            self.tape.constant_shared(value)
        };
        self.bound.insert(p.key(), v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn lift(&mut self, t: Tensor<f32>) -> Var {
        self.tape.constant(T::lift_owned(t))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Gradients of `loss` for every trainable parameter bound on this graph.
    pub fn gradients(&self, loss: Var) -> Result<GradMap> {
        let mut g = self.tape.backward(loss)?;
        let mut out = GradMap::default();
        for &(key, v) in &self.leaves {
            if let Some(t) = g.take(v) {
                out.add(key, T::lower(t));
            }
        }
        Ok(out)
    }

    pub fn gradients_with(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<GradMap> {
        let mut g = self.tape.backward_with(seeds)?;
        let mut out = GradMap::default();
        for &(key, v) in &self.leaves {
            if let Some(t) = g.take(v) {
                out.add(key, T::lower(t));
            }
        }
        Ok(out)
    }
}

/// Parameter gradients keyed by parameter identity.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: BTreeMap<u64, Tensor>,
}

impl GradMap {
    pub fn add(&mut self, key: u64, g: Tensor) {
        match self.grads.get_mut(&key) {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(key, g);
            }
        }
    }

    /// Adds `other` into `self`; callers merge chunks in a fixed order.
    pub fn merge(&mut self, other: GradMap) {
        for (k, g) in other.grads {
            self.add(k, g);
        }
    }

    pub fn get(&self, p: &Param) -> Option<&Tensor> {
        self.grads.get(&p.key())
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr_field: f32,
    pub lr_network: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_field: 1e-2,
            lr_network: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-group learning rates and no schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `module` that has a gradient.
    pub fn step(&mut self, module: &mut dyn Module, grads: &GradMap) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = &mut self.moments;
        module.visit_mut(&mut |p| {
            let Some(g) = grads.get(p) else { return };
            let lr = match p.group() {
                LrGroup::Field => c.lr_field,
                LrGroup::Network => c.lr_network,
            };
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = p.make_mut();
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *wi -= lr * mh / (vh.sqrt() + c.eps);
            }
        });
    }

    /// Moments as named tensors, for checkpoints.
    pub fn state(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("adam.m/{name}"), m.clone()));
            out.push((format!("adam.v/{name}"), v.clone()));
        }
        (self.step, out)
    }

    pub fn restore(config: AdamConfig, step: u64, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("adam.m/") {
                moments.entry(n.to_string()).or_default().0 = Some(t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                moments.entry(n.to_string()).or_default().1 = Some(t.clone());
            }
        }
        let mut out = BTreeMap::new();
        for (name, pair) in moments {
            match pair {
                (Some(m), Some(v)) => {
                    out.insert(name, (m, v));
                }
                _ => return Err(CodecError::Config(format!("optimizer state for {name} is incomplete"))),
            }
        }
        Ok(Self {
            config,
            step,
            moments: out,
        })
    }
}
