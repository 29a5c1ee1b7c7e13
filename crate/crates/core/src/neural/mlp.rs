use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b`, `W` is out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(n_out, n_in),
            bias: DVector::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// ReLU multilayer perceptron. Hidden layers use ReLU, the output layer is
/// affine. Samples are stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped on every parameter change so stale caches can be detected.
    #[serde(skip)]
    generation: u64,
}

/// Activations retained by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in(), l.n_out()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|g| *g *= c);
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Mlp {
    /// Build from layer sizes `[in, h1, .., out]` with He-uniform weights
    /// and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        for layer in &mut model.layers {
            let bound = (6.0 / layer.n_in() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            generation: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed input {}",
                    pair[0].n_out(),
                    pair[1].n_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.n_out() {
                return Err(Error::Dimension(
                    "bias length differs from layer width".into(),
                ));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].n_in()];
        d.extend(self.layers.iter().map(|l| l.n_out()));
        d
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> ParamSet {
        ParamSet {
            layers: self.layers.clone(),
        }
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let candidate = Self::from_layers(params.layers)?;
        if candidate.dims() != self.dims() {
            return Err(Error::Dimension(
                "parameter shapes differ from the model".into(),
            ));
        }
        self.layers = candidate.layers;
        self.generation += 1;
        Ok(())
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().to_vec()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    /// Forward a batch (one sample per column).
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if input.nrows() != self.n_in() {
            return Err(Error::Dimension(format!(
                "model expects {} inputs, got {}",
                self.n_in(),
                input.nrows()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(a);
            if k == last {
                a = z;
            } else {
                a = z.map(|v| v.max(0.0));
                pre.push(z);
            }
        }
        Ok((
            a,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Forward without keeping a cache.
    pub fn predict(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(input)?.0)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.forward(&DMatrix::from_column_slice(input.len(), 1, input))?;
        Ok((out.as_slice().to_vec(), cache))
    }

    /// Reverse pass. `upstream` is `∂L/∂output` with the same layout as the
    /// forward output. Returns parameter gradients and `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(ParamSet, DMatrix<f64>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.inputs[0].ncols();
        if upstream.nrows() != self.n_out() || upstream.ncols() != batch {
            return Err(Error::Dimension(format!(
                "upstream gradient is {}x{}, expected {}x{batch}",
                upstream.nrows(),
                upstream.ncols(),
                self.n_out()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a_in = &cache.inputs[k];
            let weight = &delta * a_in.transpose();
            let bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Layer { weight, bias });
            let mut back = layer.weight.tr_mul(&delta);
            if k > 0 {
                // ReLU subgradient at 0 is 0
                back.zip_apply(&cache.pre[k - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        grads.reverse();
        Ok((ParamSet { layers: grads }, delta))
    }

    pub(crate) fn apply_update<F: FnMut(&mut f64, f64, usize)>(
        &mut self,
        grads: &ParamSet,
        mut f: F,
    ) {
        self.generation += 1;
        let params = self
            .layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
        for (idx, (p, g)) in params.zip(grads.iter()).enumerate() {
            f(p, *g, idx);
        }
    }
}
