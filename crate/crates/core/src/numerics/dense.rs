//! Fully connected layers and GeLU perceptron stacks.

use alloc::{format, string::String, vec::Vec};

use super::matrix::Matrix;
use super::ops::{gelu, gelu_backward};
use super::Parameters;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// `y = x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Gaussian weights with variance `1 / fan_in`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        Dense {
            weight: rng::normal_matrix(rng, fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.fan_in() {
            return Err(Error::dim(
                "Dense::forward",
                format!("input width {} for fan-in {}", x.cols(), self.fan_in()),
            ));
        }
        Ok(self.apply(x))
    }

    pub(crate) fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.mm(&self.weight);
        let b = self.bias.as_slice();
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates into `grad`, returns the input gradient.
    pub(crate) fn backward(&self, x: &Matrix, upstream: &Matrix, grad: &mut Dense) -> Matrix {
        grad.weight.add_assign(&x.mm_tn(upstream));
        let gb = grad.bias.as_mut_slice();
        for r in upstream.iter_rows() {
            for (g, u) in gb.iter_mut().zip(r) {
                *g += u;
            }
        }
        upstream.mm_nt(&self.weight)
    }
}

/// Dense layers with GeLU between consecutive layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl MlpCache {
    /// Batch rows of the recorded input.
    pub fn rows(&self) -> usize {
        self.inputs[0].rows()
    }
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn init(widths: &[usize], rng: &mut Stream) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Mlp {
            layers: widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_width() {
            return Err(Error::dim(
                "Mlp::forward",
                format!("input width {} for fan-in {}", x.cols(), self.input_width()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = gelu(&z);
                pre_activations.push(z);
            }
        }
        Ok((
            h,
            MlpCache {
                inputs,
                pre_activations,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &MlpCache, upstream: &Matrix, grad: &mut Mlp) -> Matrix {
        let mut g = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g = gelu_backward(&cache.pre_activations[i], &g);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i]);
        }
        g
    }
}

impl Parameters for Dense {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        alloc::vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.weight, &mut self.bias]
    }
}

impl Parameters for Mlp {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
