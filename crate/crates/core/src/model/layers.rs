//! Named parameter storage and the small layer primitives the model is
//! assembled from.
//!
//! Parameters live in a [`ParamStore`] (ordered name -> tensor map) owned by
//! the model. Each forward pass injects them into a fresh [`Graph`] via
//! [`ParamStore::bind`]; layers hold [`ParamId`] handles and look their
//! variables up in the resulting [`BoundParams`].

use crate::autograd::{Graph, Var};
use crate::rng::DetRng;
use ndarray::{Array1, ArrayD};
use std::collections::HashMap;

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn def(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Inject every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self.entries.iter().map(|(_, v)| g.param(v.clone())).collect();
        BoundParams { vars }
    }
}

/// Per-graph variables for every parameter in a store, aligned by [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// He-normal init for a tensor with the given fan-in.
pub fn he_normal(rng: &mut DetRng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_normal() * std).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

/// 2-D convolution layer (square kernel).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.def(&format!("{name}.w"), he_normal(rng, &[cout, cin, k, k], cin * k * k));
        let b = store.def(&format!("{name}.b"), zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// 1-D temporal convolution layer.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    k: usize,
    cin: usize,
    cout: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.def(&format!("{name}.w"), he_normal(rng, &[cout, cin, k], cin * k));
        let b = store.def(&format!("{name}.b"), zeros(&[cout]));
        Self { w, b, stride, pad, k, cin, cout }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv1d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }

    /// Overwrite with the center-tap identity kernel (requires cin == cout).
    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.cin, self.cout, "identity needs matching channels");
        let mut w = ArrayD::zeros(vec![self.cout, self.cin, self.k]);
        for c in 0..self.cout {
            w[[c, c, self.k / 2]] = 1.0;
        }
        *store.get_mut(self.w) = w;
        *store.get_mut(self.b) = zeros(&[self.cout]);
    }

    /// Overwrite with all-zero weights and bias.
    pub fn set_zero(&self, store: &mut ParamStore) {
        *store.get_mut(self.w) = zeros(&[self.cout, self.cin, self.k]);
        *store.get_mut(self.b) = zeros(&[self.cout]);
    }
}

/// Fully-connected layer.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = store.def(&format!("{name}.w"), he_normal(rng, &[cin, cout], cin));
        let b = store.def(&format!("{name}.b"), zeros(&[cout]));
        Self { w, b }
    }

    /// Zero-initialized variant, used where a block must start as an
    /// identity perturbation.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.def(&format!("{name}.w"), zeros(&[cin, cout]));
        let b = store.def(&format!("{name}.b"), zeros(&[cout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }

    /// The layer applied to an all-zero input: just the bias.
    pub fn bias_value(&self, store: &ParamStore) -> Array1<f64> {
        store
            .get(self.b)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_preserves_definition_order() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(0);
        let a = store.def("a", he_normal(&mut rng, &[2, 2], 2));
        let b = store.def("b", zeros(&[3]));
        assert_eq!(store.name(a), "a");
        assert_eq!(store.name(b), "b");
        assert_eq!(store.id_of("b"), Some(b));
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(store.num_scalars(), 7);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.def("x", zeros(&[1]));
        store.def("x", zeros(&[1]));
    }

    #[test]
    fn bound_params_track_store_values() {
        let mut store = ParamStore::new();
        let id = store.def("w", ArrayD::from_elem(vec![2], 1.5));
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        assert_eq!(g.value(bound.var(id)).as_slice().unwrap(), &[1.5, 1.5]);
    }

    #[test]
    fn conv1d_identity_round_trips() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(1);
        let conv = Conv1dLayer::new(&mut store, &mut rng, "c", 3, 3, 3, 1, 1);
        conv.set_identity(&mut store);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = ndarray::Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let xv = g.input(x.clone().into_dyn());
        let y = conv.forward(&mut g, &bound, xv);
        assert_eq!(g.value(y).to_owned(), x.into_dyn());
    }
}
