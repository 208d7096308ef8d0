//! Location-prediction head: 8-way classification of a neighboring patch's
//! relative position from the difference of the two embeddings.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpIds};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::pe::EMBED_DIM;
use rand::Rng;

/// The eight neighbor positions around an anchor patch.
pub const NUM_DIRECTIONS: usize = 8;

/// Probabilities are clamped here before the log in the cross-entropy.
const PROB_FLOOR: f64 = 1e-12;

pub struct LpNetwork<S: Scalar> {
    pub mlp: Mlp<S>,
}

impl<S: Scalar> LpNetwork<S> {
    pub fn init(rng: &mut impl Rng) -> Self {
        LpNetwork { mlp: Mlp::init(rng, &[EMBED_DIM, 128, 128, NUM_DIRECTIONS]) }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn insert(&self, g: &mut Graph<S>, trainable: bool) -> LpIds {
        LpIds { mlp: self.mlp.insert(g, trainable) }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        self.mlp.named_tensors(prefix)
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        self.mlp.named_tensors_mut(prefix)
    }
}

pub struct LpIds {
    pub mlp: MlpIds,
}

impl LpIds {
    /// `softmax(MLP(z - z_prime))` per row: `z` holds anchor embeddings,
    /// `z_prime` the corresponding neighbors, both `[N,Z]`. Output `[N,8]`.
    pub fn predict<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        z: TensorId,
        z_prime: TensorId,
    ) -> Result<TensorId> {
        if g.shape(z) != g.shape(z_prime) {
            return Err(Error::InvalidArgument(format!(
                "embedding batches differ: {:?} vs {:?}",
                g.shape(z),
                g.shape(z_prime)
            )));
        }
        let d = g.sub(z, z_prime)?;
        let logits = self.mlp.forward(g, d)?;
        g.softmax(logits, 1)
    }
}

/// Mean cross-entropy of predicted direction probabilities `[N,8]` against
/// integer labels: `-(1/N) sum_i log l_hat[i, label_i]`.
pub fn lp_loss<S: Scalar>(
    g: &mut Graph<S>,
    l_hat: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let sh = g.shape(l_hat).to_vec();
    if sh.len() != 2 || sh[1] != NUM_DIRECTIONS || sh[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "lp_loss expects l_hat[N,{NUM_DIRECTIONS}] with N labels; got {sh:?} and {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_DIRECTIONS) {
        return Err(Error::InvalidArgument(format!("direction label {bad} out of range")));
    }
    let n = sh[0];
    let mut onehot = vec![S::zero(); n * NUM_DIRECTIONS];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * NUM_DIRECTIONS + l] = S::one();
    }
    let mask = g.constant(Tensor::raw(vec![n, NUM_DIRECTIONS], onehot));
    let clamped = g.clamp_min(l_hat, PROB_FLOOR);
    let lnp = g.ln(clamped);
    let picked = g.mul(lnp, mask)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}
