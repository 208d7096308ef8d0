//! Density-estimation head: membership prediction, batch GMM statistics,
//! the likelihood loss, and the covariance singularity penalty.
//!
//! Membership weights come from a small MLP with a softmax; mixture
//! coefficients, means, and covariances are weighted batch moments, all kept
//! inside the autodiff graph so the loss trains the encoder end to end.
//! Likelihoods are evaluated in log-space through Cholesky factors.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpIds};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::linalg::cholesky;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::pe::EMBED_DIM;
use rand::Rng;

pub const DEFAULT_K: usize = 5;

/// Added to membership-sum denominators so empty components divide cleanly.
const DENOM_EPS: f64 = 1e-12;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Normalization constant of each Gaussian component.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Normalizer {
    /// `(2pi)^{Z/2} |Sigma|^{1/2}`: the proper multivariate density constant.
    Standard,
    /// `sqrt(2pi |Sigma|)`: drops the dimension exponent; comparison only.
    Sqrt2Pi,
}

impl Normalizer {
    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Standard => "standard",
            Normalizer::Sqrt2Pi => "sqrt2pi",
        }
    }

    pub fn parse(s: &str) -> Option<Normalizer> {
        match s {
            "standard" => Some(Normalizer::Standard),
            "sqrt2pi" => Some(Normalizer::Sqrt2Pi),
            _ => None,
        }
    }
}

/// Batch reduction of the likelihood loss.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DenReduction {
    /// `-(1/N) sum_i log P(z_i)`: mean negative log-likelihood.
    MeanLog,
    /// `-(1/N) log sum_i P(z_i)`: one log over the summed probabilities;
    /// comparison only.
    LogSum,
}

impl DenReduction {
    pub fn name(self) -> &'static str {
        match self {
            DenReduction::MeanLog => "mean_log",
            DenReduction::LogSum => "log_sum",
        }
    }

    pub fn parse(s: &str) -> Option<DenReduction> {
        match s {
            "mean_log" => Some(DenReduction::MeanLog),
            "log_sum" => Some(DenReduction::LogSum),
            _ => None,
        }
    }
}

pub struct DeNetwork<S: Scalar> {
    pub mlp: Mlp<S>,
    pub k: usize,
}

impl<S: Scalar> DeNetwork<S> {
    pub fn init(rng: &mut impl Rng, k: usize) -> Self {
        Self::with_dims(rng, &[EMBED_DIM, 128, 64, 32, k])
    }

    /// Arbitrary layer widths; `dims[0]` is the embedding dimension and the
    /// last entry is K.
    pub fn with_dims(rng: &mut impl Rng, dims: &[usize]) -> Self {
        DeNetwork { mlp: Mlp::init(rng, dims), k: dims[dims.len() - 1] }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn insert(&self, g: &mut Graph<S>, trainable: bool) -> DeIds {
        DeIds { mlp: self.mlp.insert(g, trainable), k: self.k }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        self.mlp.named_tensors(prefix)
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        self.mlp.named_tensors_mut(prefix)
    }
}

pub struct DeIds {
    pub mlp: MlpIds,
    pub k: usize,
}

impl DeIds {
    /// Membership weights `[N,K]`: softmax over the MLP logits, rows sum to 1.
    pub fn membership<S: Scalar>(&self, g: &mut Graph<S>, z: TensorId) -> Result<TensorId> {
        let logits = self.mlp.forward(g, z)?;
        membership_from_logits(g, logits)
    }
}

pub fn membership_from_logits<S: Scalar>(g: &mut Graph<S>, logits: TensorId) -> Result<TensorId> {
    g.softmax(logits, 1)
}

/// Graph handles for one batch's mixture statistics.
pub struct GmmIds {
    /// `[K]` mixture coefficients, sum 1.
    pub phi: TensorId,
    /// `[K,Z]` component means.
    pub mu: TensorId,
    /// `[K,Z,Z]` symmetric component covariances.
    pub sigma: TensorId,
}

/// Weighted batch moments: `phi_k = mean_i gamma_ik`,
/// `mu_k = sum_i gamma_ik z_i / sum_i gamma_ik`,
/// `sigma_k = sum_i gamma_ik d_i d_i^T / sum_i gamma_ik` with `d_i = z_i - mu_k`.
pub fn estimate_gmm<S: Scalar>(
    g: &mut Graph<S>,
    z: TensorId,
    gamma: TensorId,
) -> Result<GmmIds> {
    let (zsh, gsh) = (g.shape(z).to_vec(), g.shape(gamma).to_vec());
    if zsh.len() != 2 || gsh.len() != 2 || zsh[0] != gsh[0] {
        return Err(Error::InvalidArgument(format!(
            "estimate_gmm expects z[N,Z] and gamma[N,K]; got {zsh:?}, {gsh:?}"
        )));
    }
    let (n, zdim, k) = (zsh[0], zsh[1], gsh[1]);
    if n < 2 {
        return Err(Error::InvalidArgument("estimate_gmm needs N >= 2".into()));
    }
    let gsum = g.sum_axis(gamma, 0, false)?; // [K]
    let phi = g.scale(gsum, 1.0 / n as f64);
    let eps = g.constant(Tensor::scalar(S::from_f64(DENOM_EPS)));
    let denom = g.add(gsum, eps)?;
    let gt = g.transpose_last2(gamma)?; // [K,N]
    let wsum = g.matmul(gt, z)?; // [K,Z]
    let denom_col = g.reshape(denom, &[k, 1])?;
    let mu = g.div(wsum, denom_col)?;
    let mu3 = g.reshape(mu, &[k, 1, zdim])?;
    let diff = g.sub(z, mu3)?; // [K,N,Z] by broadcast
    let gt3 = g.reshape(gt, &[k, n, 1])?;
    let wdiff = g.mul(diff, gt3)?;
    let wdiff_t = g.transpose_last2(wdiff)?; // [K,Z,N]
    let num = g.bmm(wdiff_t, diff)?; // [K,Z,Z]
    let denom3 = g.reshape(denom, &[k, 1, 1])?;
    let scaled = g.div(num, denom3)?;
    let sigma = g.symmetrize(scaled)?;
    Ok(GmmIds { phi, mu, sigma })
}

/// Per-sample mixture log density `[N]` under the batch statistics.
pub fn mixture_log_prob<S: Scalar>(
    g: &mut Graph<S>,
    z: TensorId,
    gmm: &GmmIds,
    normalizer: Normalizer,
) -> Result<TensorId> {
    let zsh = g.shape(z).to_vec();
    let k = g.shape(gmm.phi)[0];
    if zsh.len() != 2 {
        return Err(Error::InvalidArgument(format!("expected z[N,Z], got {zsh:?}")));
    }
    let (n, zdim) = (zsh[0], zsh[1]);
    let const_term = match normalizer {
        Normalizer::Standard => -0.5 * zdim as f64 * ln_2pi(),
        Normalizer::Sqrt2Pi => -0.5 * ln_2pi(),
    };
    let lnphi = g.ln(gmm.phi);
    let mut terms = Vec::with_capacity(k);
    for comp in 0..k {
        let sig3 = g.slice_rows(gmm.sigma, comp, 1)?;
        let sig = g.reshape(sig3, &[zdim, zdim])?;
        let mu_row = g.slice_rows(gmm.mu, comp, 1)?; // [1,Z]
        let diff = g.sub(z, mu_row)?; // [N,Z]
        let diff_t = g.transpose_last2(diff)?; // [Z,N]
        let sol = g.chol_solve(sig, diff_t, comp)?;
        let prod = g.mul(diff_t, sol)?;
        let quad = g.sum_axis(prod, 0, false)?; // [N]
        let logdet = g.chol_logdet(sig, comp)?;
        let lnphi_k = g.slice_rows(lnphi, comp, 1)?; // [1]
        let t = g.scale(quad, -0.5);
        let t = g.add(t, lnphi_k)?;
        let half_ld = g.scale(logdet, -0.5);
        let t = g.add(t, half_ld)?;
        let c = g.constant(Tensor::scalar(S::from_f64(const_term)));
        let t = g.add(t, c)?;
        terms.push(g.reshape(t, &[1, n])?);
    }
    let stacked = g.concat(&terms, 0)?; // [K,N]
    g.logsumexp(stacked, 0)
}

/// Likelihood loss for a batch against given mixture statistics.
pub fn den_loss_from<S: Scalar>(
    g: &mut Graph<S>,
    z: TensorId,
    gmm: &GmmIds,
    normalizer: Normalizer,
    reduction: DenReduction,
) -> Result<TensorId> {
    let n = g.shape(z)[0];
    let logp = mixture_log_prob(g, z, gmm, normalizer)?;
    Ok(match reduction {
        DenReduction::MeanLog => {
            let m = g.mean_all(logp);
            g.scale(m, -1.0)
        }
        DenReduction::LogSum => {
            let lse = g.logsumexp(logp, 0)?;
            g.scale(lse, -1.0 / n as f64)
        }
    })
}

/// Full likelihood-loss path for one batch: membership, batch statistics,
/// then the loss. Returns the statistics for reuse (penalty term, EMA).
pub fn den_loss<S: Scalar>(
    g: &mut Graph<S>,
    de: &DeIds,
    z: TensorId,
    normalizer: Normalizer,
    reduction: DenReduction,
) -> Result<(TensorId, GmmIds)> {
    let gamma = de.membership(g, z)?;
    let gmm = estimate_gmm(g, z, gamma)?;
    let loss = den_loss_from(g, z, &gmm, normalizer, reduction)?;
    Ok((loss, gmm))
}

/// Singularity penalty: sum over components and coordinates of the
/// reciprocal covariance diagonal.
pub fn reg_loss<S: Scalar>(g: &mut Graph<S>, sigma: TensorId) -> Result<TensorId> {
    let d = g.diag_part(sigma)?;
    let r = g.recip(d);
    Ok(g.sum_all(r))
}

/// Plain mixture statistics outside the graph: EMA diagnostics, checkpoints,
/// and test oracles.
#[derive(Clone)]
pub struct GmmParams<S: Scalar> {
    pub phi: Tensor<S>,
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
}

impl<S: Scalar> GmmParams<S> {
    pub fn zeros(k: usize, zdim: usize) -> Self {
        GmmParams {
            phi: Tensor::zeros(&[k]),
            mu: Tensor::zeros(&[k, zdim]),
            sigma: Tensor::zeros(&[k, zdim, zdim]),
        }
    }

    pub fn from_graph(g: &Graph<S>, ids: &GmmIds) -> Self {
        GmmParams {
            phi: g.value(ids.phi).clone(),
            mu: g.value(ids.mu).clone(),
            sigma: g.value(ids.sigma).clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn zdim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// `self = decay * self + (1 - decay) * new`.
    pub fn ema_update(&mut self, new: &GmmParams<S>, decay: f64) {
        let d = S::from_f64(decay);
        let omd = S::from_f64(1.0 - decay);
        for (dst, src) in [
            (self.phi.data_mut(), new.phi.data()),
            (self.mu.data_mut(), new.mu.data()),
            (self.sigma.data_mut(), new.sigma.data()),
        ] {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = d * *a + omd * b;
            }
        }
    }
}

/// Log mixture density of a single embedding, evaluated directly through
/// Cholesky factors. Independent of the graph path; used for diagnostics and
/// as a readable reference.
pub fn mixture_log_likelihood<S: Scalar>(
    params: &GmmParams<S>,
    z: &[S],
    normalizer: Normalizer,
) -> Result<f64> {
    let (k, zdim) = (params.k(), params.zdim());
    if z.len() != zdim {
        return Err(Error::InvalidArgument(format!(
            "embedding length {} does not match Z={zdim}",
            z.len()
        )));
    }
    let const_term = match normalizer {
        Normalizer::Standard => -0.5 * zdim as f64 * ln_2pi(),
        Normalizer::Sqrt2Pi => -0.5 * ln_2pi(),
    };
    let mut terms = Vec::with_capacity(k);
    for comp in 0..k {
        let sig = &params.sigma.data()[comp * zdim * zdim..(comp + 1) * zdim * zdim];
        let mu = &params.mu.data()[comp * zdim..(comp + 1) * zdim];
        let factor = cholesky(sig, zdim, comp)?;
        let diff: Vec<S> = z.iter().zip(mu).map(|(&a, &b)| a - b).collect();
        let sol = factor.solve(&diff, 1);
        let quad: f64 = diff.iter().zip(&sol).map(|(&d, &s)| (d * s).as_f64()).sum();
        let phi = params.phi.data()[comp].as_f64();
        terms.push(phi.ln() - 0.5 * quad - 0.5 * factor.logdet().as_f64() + const_term);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}
