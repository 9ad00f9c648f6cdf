//! Central registry of learnable arrays.
//!
//! Master weights live here as plain `Vec<f64>`. Each training sample builds
//! its own graph on its own thread: `Graph::leaf` materializes a gradient
//! leaf per parameter (cached, so reuse within one sample accumulates), and
//! `Graph::take_grads` harvests the results after backward. The optimizer
//! mutates the master arrays between steps.

use std::cell::RefCell;

use rand::Rng;

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// U(−b, b) with b = √(1/fan_in); fan_in = product of all dims but the
    /// first for ≥2-D shapes (rows are output units for conv kernels), and
    /// the first dim for 2-D x·W layouts is handled by `UniformIn`.
    UniformFanIn,
    /// U(−b, b) with b = √(1/shape[0]); for [in,out] matrices applied as x·W.
    UniformIn,
    /// U(−b, b) with the given bound.
    Uniform(f64),
}

pub fn init_data(init: Init, shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(v) => vec![v; n],
        Init::UniformFanIn => {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let b = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-b..b)).collect()
        }
        Init::UniformIn => {
            let b = (1.0 / shape[0].max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-b..b)).collect()
        }
        Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), data });
        id
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = init_data(init, shape, rng);
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Constant (no-grad) tensor view of a parameter; for inference paths.
    pub fn const_tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::from_vec(e.data.clone(), &e.shape).expect("stored shapes are consistent")
    }
}

/// Per-sample view of the store that materializes gradient leaves on demand.
pub struct Graph<'a> {
    store: &'a ParamStore,
    leaves: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, leaves: RefCell::new(vec![None; store.len()]) }
    }

    /// The sample-local leaf for `id`; one leaf per parameter per graph, so
    /// repeated use accumulates gradients correctly.
    pub fn leaf(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.0] {
            return t.clone();
        }
        let e = &self.store.entries[id.0];
        let t = Tensor::param(e.data.clone(), &e.shape).expect("stored shapes are consistent");
        leaves[id.0] = Some(t.clone());
        t
    }

    /// Gradients per parameter index; `None` where the parameter was unused
    /// or received no gradient.
    pub fn take_grads(self) -> Vec<Option<Vec<f64>>> {
        self.leaves
            .into_inner()
            .into_iter()
            .map(|l| l.and_then(|t| t.take_grad()))
            .collect()
    }
}
