//! Shared parameter containers for the three networks: dense layers, small
//! MLPs, and fan-in initialization.

use crate::error::Result;
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Negative slope shared by every hidden activation in the model.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Fan-in gaussian std with the leaky-ReLU slope correction.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

pub fn gaussian_tensor<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// One dense layer; the weight is stored `[in, out]` so the forward pass is
/// `x @ w + b` without a transpose.
pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: gaussian_tensor(rng, &[fan_in, fan_out], fan_in_std(fan_in)),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

#[derive(Clone, Copy)]
pub struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
}

/// Stack of dense layers with leaky-ReLU between them; the last layer emits
/// raw logits.
pub struct Mlp<S: Scalar> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `dims = [in, h1, ..., out]`.
    pub fn init(rng: &mut impl Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|d| Linear::init(rng, d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn insert(&self, g: &mut Graph<S>, trainable: bool) -> MlpIds {
        let ids = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (l.w.clone(), l.b.clone());
                if trainable {
                    LinearIds { w: g.input(w), b: g.input(b) }
                } else {
                    LinearIds { w: g.constant(w), b: g.constant(b) }
                }
            })
            .collect();
        MlpIds(ids)
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.fc{}.w", i + 1), &l.w));
            out.push((format!("{prefix}.fc{}.b", i + 1), &l.b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.fc{}.w", i + 1), &mut l.w));
            out.push((format!("{prefix}.fc{}.b", i + 1), &mut l.b));
        }
        out
    }
}

pub struct MlpIds(pub Vec<LinearIds>);

impl MlpIds {
    /// Parameter ids in the same order as [`Mlp::named_tensors`].
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        self.0.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Logits of the stack: leaky-ReLU after every layer but the last.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for (i, l) in self.0.iter().enumerate() {
            let y = g.matmul(h, l.w)?;
            h = g.add(y, l.b)?;
            if i + 1 < self.0.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}
