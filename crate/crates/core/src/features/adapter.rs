use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{slice_of, slice_of_mut, Params};

/// `y = x W + b`, with `W` stored `d_in x d_out` and `b` as a `1 x d_out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Affine {
    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Stack of fully connected layers with ReLU between them, projecting
/// encoder features to the language model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub layers: Vec<Affine>,
}

/// Gradients share the adapter's layout.
pub type AdapterGrads = Adapter;

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Adapter {
    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("adapter needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape(format!(
                    "adapter layer widths {} -> {} do not chain",
                    pair[0].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Affine { weight: Array2::eye(d), bias: Array2::zeros((1, d)) }],
        }
    }

    pub fn constant(d_in: usize, bias: &[f64]) -> Self {
        Self {
            layers: vec![Affine {
                weight: Array2::zeros((d_in, bias.len())),
                bias: Array2::from_shape_vec((1, bias.len()), bias.to_vec()).unwrap(),
            }],
        }
    }

    /// `depth` layers `d_in -> d_model -> ... -> d_model`, Xavier-normal weights, zero bias.
    pub fn random(d_in: usize, d_model: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..depth.max(1))
            .map(|i| {
                let fan_in = if i == 0 { d_in } else { d_model };
                let std = (2.0 / (fan_in + d_model) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                Affine {
                    weight: Array2::from_shape_fn((fan_in, d_model), |_| normal.sample(&mut rng)),
                    bias: Array2::zeros((1, d_model)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn zeros_like(&self) -> AdapterGrads {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.d_in() && x.nrows() > 0 {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, AdapterCache)> {
        self.check_input(x)?;
        if x.nrows() == 0 {
            return Ok((
                Array2::zeros((0, self.d_out())),
                AdapterCache { inputs: Vec::new(), pre_activations: Vec::new() },
            ));
        }
        let mut cache = AdapterCache { inputs: Vec::new(), pre_activations: Vec::new() };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            cache.inputs.push(h);
            h = if i + 1 < self.layers.len() { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            cache.pre_activations.push(z);
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &AdapterCache, dy: &Array2<f64>, grads: &mut AdapterGrads) -> Array2<f64> {
        if cache.inputs.is_empty() {
            return Array2::zeros((0, self.d_in()));
        }
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let z = &cache.pre_activations[i];
                d.zip_mut_with(z, |g, &zv| {
                    if zv <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let input = &cache.inputs[i];
            grads.layers[i].weight += &input.t().dot(&d);
            grads.layers[i].bias += &d.sum_axis(Axis(0)).insert_axis(Axis(0));
            d = d.dot(&self.layers[i].weight.t());
        }
        d
    }
}

impl Params for Adapter {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(slice_of(&l.weight));
            f(slice_of(&l.bias));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(slice_of_mut(&mut l.weight));
            f(slice_of_mut(&mut l.bias));
        }
    }
}
