use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::Tensor;
use super::{Graph, GraphError, NodeId};

/// Named learnable tensors. Iteration order is the sorted name order, so
/// checkpoints and optimizer sweeps are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Conv weight [cout, cin, kh, kw] with fan-in scaled uniform init, plus
    /// a zero bias under `<name>.b`.
    pub fn add_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut impl Rng,
    ) {
        let w = fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng);
        self.insert(&alloc::format!("{name}.w"), w);
        self.insert(&alloc::format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// Linear weight [cout, cin] plus zero bias.
    pub fn add_linear(&mut self, name: &str, cout: usize, cin: usize, rng: &mut impl Rng) {
        let w = fan_in_uniform(&[cout, cin], cin, rng);
        self.insert(&alloc::format!("{name}.w"), w);
        self.insert(&alloc::format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// Instance-norm gain (ones) and shift (zeros).
    pub fn add_norm(&mut self, name: &str, c: usize) {
        self.insert(&alloc::format!("{name}.g"), Tensor::full(&[c], 1.0));
        self.insert(&alloc::format!("{name}.s"), Tensor::zeros(&[c]));
    }
}

/// Bind a stored parameter into a graph as a snapshot leaf.
pub fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId, GraphError> {
    let value = store
        .get(name)
        .ok_or_else(|| GraphError::UnknownName(name.to_string()))?;
    Ok(g.param_leaf(name, value.clone().with_grad()))
}
