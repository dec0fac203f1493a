//! Named parameter and buffer storage.
//!
//! Layers hold indices into a [`ParamStore`]; the store owns every trainable
//! tensor plus the non-trainable batch-norm statistics. Names are stable
//! across builds of the same configuration, which is what checkpoints and
//! [`crate::network::Model::strip_auxiliary`] key on.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Which part of the network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Main,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Weight decay applies to convolution kernels only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub kind: ParamKind,
    pub branch: Branch,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub branch: Branch,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(
        &mut self,
        name: String,
        value: ArrayD<T>,
        kind: ParamKind,
        branch: Branch,
    ) -> ParamId {
        debug_assert!(self.param_id(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            branch,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, value: ArrayD<T>, branch: Branch) -> BufferId {
        self.buffers.push(Buffer {
            name,
            value,
            branch,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalar_count_in(&self, branch: Branch) -> usize {
        self.params
            .iter()
            .filter(|p| p.branch == branch)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Registers parameters under a hierarchical name prefix while a model is built.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    branch: Branch,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            branch: Branch::Main,
        }
    }

    /// A child builder whose names are prefixed with `name.`
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            branch: self.branch,
        }
    }

    pub fn with_branch(&mut self, branch: Branch) -> Builder<'_, T> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            branch,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize, kind: ParamKind) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data");
        let name = self.full_name(leaf);
        self.store.add_param(name, value, kind, self.branch)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, kind: ParamKind) -> ParamId {
        let arr = ArrayD::from_elem(IxDyn(shape), T::of(value));
        let name = self.full_name(leaf);
        self.store.add_param(name, arr, kind, self.branch)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> BufferId {
        let arr = ArrayD::from_elem(IxDyn(shape), T::of(value));
        let name = self.full_name(leaf);
        self.store.add_buffer(name, arr, self.branch)
    }
}
