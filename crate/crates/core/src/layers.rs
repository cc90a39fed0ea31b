//! Fully connected layers with ReLU between them, shared by the encoder and the margin network.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Anything that exposes its trainable parameters as flat slices in a fixed order.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;

    /// Mutable view of the parameters. Implementations treat this as a write and
    /// invalidate outstanding activation caches.
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        }
        assert_eq!(offset, values.len(), "parameter count mismatch");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let mut layer = Dense::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = dist.sample(rng);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for n in 0..x.rows() {
            let xr = x.row(n);
            let or = out.row_mut(n);
            for (o, ov) in or.iter_mut().enumerate() {
                let wr = self.weight.row(o);
                let mut acc = self.bias[o];
                for (w, xv) in wr.iter().zip(xr) {
                    acc += w * xv;
                }
                *ov = acc;
            }
        }
        out
    }
}

/// Linear layers with ReLU after every layer except the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl MlpCache {
    /// Pre-activation of the final layer.
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }

    pub(crate) fn generation(&self) -> u64 {
        self.generation
    }

    pub fn batch_len(&self) -> usize {
        self.inputs[0].rows()
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        Ok(Mlp {
            layers,
            generation: 0,
        })
    }

    /// Glorot-initialized network with the given layer widths (`dims[0]` is the input).
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("network needs input and output widths".into()));
        }
        Mlp::new(dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// A zero-valued network with the same shape, used to hold gradients.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&current);
            inputs.push(current);
            if i + 1 < self.layers.len() {
                let mut act = out.clone();
                act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                pre.push(out);
                current = act;
            } else {
                pre.push(out);
                current = Matrix::zeros(0, 0);
            }
        }
        Ok(MlpCache {
            generation: self.generation,
            inputs,
            pre,
        })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient w.r.t. the input.
    /// `d_out` is the gradient w.r.t. the final pre-activation.
    pub fn backward_into(&self, cache: &MlpCache, d_out: &Matrix, grad: &mut Mlp) -> Result<Matrix> {
        if cache.generation != self.generation
            || cache.pre.len() != self.layers.len()
            || d_out.rows() != cache.batch_len()
            || d_out.cols() != self.output_dim()
        {
            return Err(Error::StaleCache);
        }
        let mut delta = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                // ReLU mask; subgradient at 0 is 0.
                for (d, p) in delta.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            let g = &mut grad.layers[i];
            for n in 0..delta.rows() {
                let dr = delta.row(n);
                let xr = input.row(n);
                for (o, &dv) in dr.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    for (gw, xv) in g.weight.row_mut(o).iter_mut().zip(xr) {
                        *gw += dv * xv;
                    }
                }
            }
            let mut d_in = Matrix::zeros(delta.rows(), layer.input_dim());
            for n in 0..delta.rows() {
                let dr = delta.row(n);
                let dir = d_in.row_mut(n);
                for (o, &dv) in dr.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (di, w) in dir.iter_mut().zip(layer.weight.row(o)) {
                        *di += dv * w;
                    }
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

impl Parameters for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}
