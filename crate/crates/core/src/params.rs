//! Flat parameter storage, tape binding and the AdamW optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::Matrix;

/// Handle to one named section of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Section {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable values of a model laid out in one flat vector.
///
/// Sections are appended in construction order, so two stores built by the
/// same model constructor have identical layouts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    data: Vec<f64>,
    sections: Vec<Section>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let section = Section { name: name.into(), offset: self.data.len(), rows: value.rows(), cols: value.cols() };
        self.data.extend_from_slice(value.data());
        self.sections.push(section);
        ParamId(self.sections.len() - 1)
    }

    /// Weight matrix drawn from U(-1/sqrt(rows), 1/sqrt(rows)).
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / libm::sqrt(rows as f64);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, id: ParamId) -> &Section {
        &self.sections[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.sections.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let s = &self.sections[id.0];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn matrix(&self, id: ParamId) -> Matrix {
        let s = &self.sections[id.0];
        Matrix::from_vec(s.rows, s.cols, self.slice(id).to_vec())
    }

    /// Replaces the flat values; the layout must match.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            bail!(Argument, "parameter vector has {} values, store expects {}", values.len(), self.data.len());
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.sections == other.sections
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Lazily pushes the parameters of one store onto a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.sections.len()] }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.matrix(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Tape node of a section if it was used in the forward pass.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Flat gradient aligned with the store; unused sections are zero.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.store.len()];
        for (section, var) in self.store.sections.iter().zip(&self.vars) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                out[section.offset..section.offset + section.len()].copy_from_slice(g.data());
            }
        }
        out
    }
}

/// A tape together with one bound parameter store: the context every layer
/// forward function receives.
pub struct Fwd<'t, 'a> {
    pub tape: &'t mut Tape,
    pub params: &'t mut Bound<'a>,
}

impl<'t, 'a> Fwd<'t, 'a> {
    pub fn new(tape: &'t mut Tape, params: &'t mut Bound<'a>) -> Self {
        Self { tape, params }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.params.var(self.tape, id)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.tape.constant(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            bail!(Argument, "optimizer state length {} does not match parameters {} / gradient {}", self.m.len(), params.len(), grad.len());
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * (m_hat / (libm::sqrt(v_hat) + c.eps) + c.weight_decay * params[i]);
        }
        Ok(())
    }
}
