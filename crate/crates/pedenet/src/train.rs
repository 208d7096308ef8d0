//! Joint optimization of the encoder and both heads: batch sampling, the
//! composite objective, and the step loop with its smoothed mixture
//! statistics.

use crate::dataset::sampling::{sample_neighbor_pair, sample_patch, DEFAULT_JITTER};
use crate::dataset::{ClassDataset, Image, CHANNELS};
use crate::density::{
    den_loss, reg_loss, DeIds, DeNetwork, DenReduction, GmmIds, GmmParams, Normalizer, DEFAULT_K,
};
use crate::error::{Error, Result};
use crate::lp::{lp_loss, LpIds, LpNetwork, NUM_DIRECTIONS};
use crate::numerics::adam::{Adam, AdamConfig};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::scalar::{DType, Scalar};
use crate::numerics::tensor::Tensor;
use crate::pe::{PeIds, PeNetwork, PATCH_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Redraws allowed when a batch yields a covariance that stays singular
/// through the factorization jitter ladder.
const SINGULAR_RETRIES: usize = 3;

/// Hyperparameters of one training run. Library callers pick the scalar
/// width through the `ModelState` type parameter; `dtype` must agree and is
/// what checkpoints record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the likelihood loss.
    pub lambda1: f64,
    /// Weight of the location-prediction loss.
    pub lambda2: f64,
    /// Weight of the covariance singularity penalty.
    pub lambda3: f64,
    /// Mixture components.
    pub k: usize,
    /// Patches per step for the density batch.
    pub batch_den: usize,
    /// Neighbor pairs per step for the location batch.
    pub batch_lp_pairs: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Pixel jitter applied to neighbor patches.
    pub jitter: usize,
    /// Smoothing factor for the running mixture statistics.
    pub ema_decay: f64,
    pub normalizer: Normalizer,
    pub reduction: DenReduction,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.005,
            k: DEFAULT_K,
            batch_den: 128,
            batch_lp_pairs: 36,
            learning_rate: 1e-4,
            steps: 5000,
            seed: 0,
            jitter: DEFAULT_JITTER,
            ema_decay: 0.99,
            normalizer: Normalizer::Standard,
            reduction: DenReduction::MeanLog,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.batch_den < 2 {
            return Err(Error::InvalidArgument("batch_den must be at least 2".into()));
        }
        if self.batch_lp_pairs < 2 {
            return Err(Error::InvalidArgument("batch_lp_pairs must be at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay must lie in [0,1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }

    /// Serialized form shared by checkpoints and config files.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("dtype".into(), self.dtype.to_string()),
            ("lambda1".into(), self.lambda1.to_string()),
            ("lambda2".into(), self.lambda2.to_string()),
            ("lambda3".into(), self.lambda3.to_string()),
            ("k".into(), self.k.to_string()),
            ("batch_den".into(), self.batch_den.to_string()),
            ("batch_lp_pairs".into(), self.batch_lp_pairs.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("jitter".into(), self.jitter.to_string()),
            ("ema_decay".into(), self.ema_decay.to_string()),
            ("normalizer".into(), self.normalizer.name().into()),
            ("reduction".into(), self.reduction.name().into()),
        ]
    }

    /// Set one field from its config-file key. Unknown keys are an error so
    /// typos surface instead of silently keeping a default.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value}")))
        }
        match key {
            "dtype" => {
                self.dtype = match value {
                    "32" => DType::F32,
                    "64" => DType::F64,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "dtype must be 32 or 64, got {value}"
                        )))
                    }
                }
            }
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "batch_den" => self.batch_den = num(key, value)?,
            "batch_lp_pairs" => self.batch_lp_pairs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "jitter" => self.jitter = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "normalizer" => {
                self.normalizer = Normalizer::parse(value).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown normalizer: {value}"))
                })?
            }
            "reduction" => {
                self.reduction = DenReduction::parse(value).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown reduction: {value}"))
                })?
            }
            _ => return Err(Error::InvalidArgument(format!("unknown config key: {key}"))),
        }
        Ok(())
    }
}

/// The three networks plus optimizer and bookkeeping for one run.
pub struct ModelState<S: Scalar> {
    pub config: TrainConfig,
    pub pe: PeNetwork<S>,
    pub de: DeNetwork<S>,
    pub lp: LpNetwork<S>,
    pub adam: Adam<S>,
    /// Mixture statistics smoothed across steps; `None` until the first
    /// completed step.
    pub gmm: Option<GmmParams<S>>,
    pub step: u64,
}

impl<S: Scalar> ModelState<S> {
    pub fn init(config: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(config, &mut rng)
    }

    /// Weights are drawn from `rng` in a fixed order, so the caller can keep
    /// sampling batches from the same stream afterwards.
    pub fn init_with_rng(config: TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if config.dtype != S::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "config dtype is {} but the model scalar is {}",
                config.dtype,
                S::DTYPE
            )));
        }
        let pe = PeNetwork::init(rng);
        let de = DeNetwork::init(rng, config.k);
        let lp = LpNetwork::init(rng);
        let adam = Adam::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });
        Ok(ModelState { config, pe, de, lp, adam, gmm: None, step: 0 })
    }

    pub fn param_count(&self) -> usize {
        self.pe.param_count() + self.de.param_count() + self.lp.param_count()
    }

    /// Every trainable tensor with its checkpoint name, in the canonical
    /// order shared by the optimizer and the graph insertion.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.pe.named_tensors("pe");
        out.extend(self.de.named_tensors("de"));
        out.extend(self.lp.named_tensors("lp"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.pe.named_tensors_mut("pe");
        out.extend(self.de.named_tensors_mut("de"));
        out.extend(self.lp.named_tensors_mut("lp"));
        out
    }

    /// Parameter data in canonical order; the counterpart of [`set_params`].
    ///
    /// [`set_params`]: ModelState::set_params
    pub fn param_values(&self) -> Vec<Vec<S>> {
        self.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn set_params(&mut self, values: &[Vec<S>]) -> Result<()> {
        let mut named = self.named_params_mut();
        if named.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                named.len(),
                values.len()
            )));
        }
        for ((name, t), v) in named.iter_mut().zip(values) {
            if t.numel() != v.len() {
                return Err(Error::InvalidArgument(format!(
                    "{name} holds {} values, got {}",
                    t.numel(),
                    v.len()
                )));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn insert_networks(&self, g: &mut Graph<S>, trainable: bool) -> NetIds {
        NetIds {
            pe: self.pe.insert(g, trainable),
            de: self.de.insert(g, trainable),
            lp: self.lp.insert(g, trainable),
        }
    }

    /// Forward-only loss on one batch.
    pub fn evaluate_batch(&self, batch: &StepBatch<S>) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let nets = self.insert_networks(&mut g, false);
        let ids = total_loss(&mut g, &nets, batch, &self.config)?;
        Ok(breakdown_of(&g, &ids))
    }

    /// Loss, batch mixture statistics, and the gradient of the weighted total
    /// for every parameter in canonical order.
    pub fn batch_gradients(
        &self,
        batch: &StepBatch<S>,
    ) -> Result<(LossBreakdown, GmmParams<S>, Vec<Vec<S>>)> {
        let mut g = Graph::new();
        let nets = self.insert_networks(&mut g, true);
        let ids = total_loss(&mut g, &nets, batch, &self.config)?;
        g.backward(ids.total)?;
        let grads = nets
            .tensor_ids()
            .into_iter()
            .map(|id| g.grad(id).map(|s| s.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((breakdown_of(&g, &ids), GmmParams::from_graph(&g, &ids.gmm), grads))
    }
}

/// Graph-side handles for all three networks.
pub struct NetIds {
    pub pe: PeIds,
    pub de: DeIds,
    pub lp: LpIds,
}

impl NetIds {
    /// Parameter ids in [`ModelState::named_params`] order.
    pub fn tensor_ids(&self) -> Vec<TensorId> {
        let mut out = self.pe.tensor_ids();
        out.extend(self.de.mlp.tensor_ids());
        out.extend(self.lp.mlp.tensor_ids());
        out
    }
}

/// One step's input: density patches, then anchors, then the matching
/// neighbors, stacked into a single `[B,3,64,64]` tensor so the encoder
/// runs once.
pub struct StepBatch<S: Scalar> {
    pub patches: Tensor<S>,
    /// Direction label per pair.
    pub labels: Vec<usize>,
    /// Rows `0..n_den` of `patches` belong to the density batch.
    pub n_den: usize,
}

impl<S: Scalar> StepBatch<S> {
    pub fn n_pairs(&self) -> usize {
        self.labels.len()
    }
}

fn fill_slot<S: Scalar>(data: &mut [S], slot: usize, plen: usize, src: &[f32]) {
    let dst = &mut data[slot * plen..(slot + 1) * plen];
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = S::from_f64(s as f64);
    }
}

/// Draw one step's patches from uniformly chosen training images.
pub fn sample_batch<S: Scalar>(
    dataset: &ClassDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepBatch<S>> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let plen = CHANNELS * PATCH_SIZE * PATCH_SIZE;
    let (n_den, n_lp) = (config.batch_den, config.batch_lp_pairs);
    let mut data = vec![S::zero(); (n_den + 2 * n_lp) * plen];
    for i in 0..n_den {
        let img = &dataset.train[rng.gen_range(0..dataset.train.len())];
        let (patch, _) = sample_patch(img, PATCH_SIZE, rng)?;
        fill_slot(&mut data, i, plen, &patch);
    }
    let mut labels = Vec::with_capacity(n_lp);
    for j in 0..n_lp {
        let img = &dataset.train[rng.gen_range(0..dataset.train.len())];
        let pair = sample_neighbor_pair(img, PATCH_SIZE, config.jitter, rng)?;
        fill_slot(&mut data, n_den + j, plen, &pair.patch_a);
        fill_slot(&mut data, n_den + n_lp + j, plen, &pair.patch_b);
        labels.push(pair.label);
    }
    Ok(StepBatch {
        patches: Tensor::raw(vec![n_den + 2 * n_lp, CHANNELS, PATCH_SIZE, PATCH_SIZE], data),
        labels,
        n_den,
    })
}

/// Ids of the assembled objective; the raw terms stay addressable so callers
/// can log them or reuse the batch statistics.
pub struct LossIds {
    pub total: TensorId,
    pub den: TensorId,
    pub lp: TensorId,
    pub reg: TensorId,
    pub gmm: GmmIds,
}

/// The three raw terms and their weighted sum, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub den: f64,
    pub lp: f64,
    pub reg: f64,
}

/// Build the composite objective on `batch`. All three raw terms are always
/// evaluated; the weights only decide their share of `total`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    nets: &NetIds,
    batch: &StepBatch<S>,
    config: &TrainConfig,
) -> Result<LossIds> {
    let (n_den, n_lp) = (batch.n_den, batch.n_pairs());
    let expect = [n_den + 2 * n_lp, CHANNELS, PATCH_SIZE, PATCH_SIZE];
    if batch.patches.shape() != expect || n_den < 2 || n_lp == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch shape {:?} does not hold {n_den} density patches plus 2x{n_lp} pair patches",
            batch.patches.shape()
        )));
    }
    let x = g.constant(batch.patches.clone());
    let z = nets.pe.embed(g, x)?;
    let z_den = g.slice_rows(z, 0, n_den)?;
    let z_anchor = g.slice_rows(z, n_den, n_lp)?;
    let z_neighbor = g.slice_rows(z, n_den + n_lp, n_lp)?;
    let (den, gmm) = den_loss(g, &nets.de, z_den, config.normalizer, config.reduction)?;
    let l_hat = nets.lp.predict(g, z_anchor, z_neighbor)?;
    let lp = lp_loss(g, l_hat, &batch.labels)?;
    let reg = reg_loss(g, gmm.sigma)?;
    let wden = g.scale(den, config.lambda1);
    let wlp = g.scale(lp, config.lambda2);
    let wreg = g.scale(reg, config.lambda3);
    let partial = g.add(wden, wlp)?;
    let total = g.add(partial, wreg)?;
    Ok(LossIds { total, den, lp, reg, gmm })
}

fn breakdown_of<S: Scalar>(g: &Graph<S>, ids: &LossIds) -> LossBreakdown {
    LossBreakdown {
        total: g.value(ids.total).item().as_f64(),
        den: g.value(ids.den).item().as_f64(),
        lp: g.value(ids.lp).item().as_f64(),
        reg: g.value(ids.reg).item().as_f64(),
    }
}

fn params_mut_in_order<'a, S: Scalar>(
    pe: &'a mut PeNetwork<S>,
    de: &'a mut DeNetwork<S>,
    lp: &'a mut LpNetwork<S>,
) -> Vec<&'a mut Tensor<S>> {
    let mut out: Vec<&mut Tensor<S>> =
        pe.named_tensors_mut("pe").into_iter().map(|(_, t)| t).collect();
    out.extend(de.named_tensors_mut("de").into_iter().map(|(_, t)| t));
    out.extend(lp.named_tensors_mut("lp").into_iter().map(|(_, t)| t));
    out
}

/// One optimization step: sample, differentiate, update, then fold the batch
/// statistics into the running estimate. A batch whose covariance cannot be
/// factorized is discarded and redrawn up to [`SINGULAR_RETRIES`] times
/// before the error propagates.
pub fn train_step<S: Scalar>(
    state: &mut ModelState<S>,
    dataset: &ClassDataset,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut redraws = 0;
    loop {
        let batch = sample_batch(dataset, &state.config, rng)?;
        match apply_step(state, &batch) {
            Err(Error::SingularMatrix { .. }) if redraws < SINGULAR_RETRIES => redraws += 1,
            other => return other,
        }
    }
}

fn apply_step<S: Scalar>(state: &mut ModelState<S>, batch: &StepBatch<S>) -> Result<LossBreakdown> {
    let (loss, stats, grads) = state.batch_gradients(batch)?;
    let mut params = params_mut_in_order(&mut state.pe, &mut state.de, &mut state.lp);
    for (p, grad) in params.iter_mut().zip(grads) {
        p.set_grad(grad);
    }
    state.adam.step(&mut params)?;
    match &mut state.gmm {
        Some(ema) => ema.ema_update(&stats, state.config.ema_decay),
        None => state.gmm = Some(stats),
    }
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Header of the loss log; one [`log_line`] per step follows it.
pub const LOG_HEADER: &str = "step, L, L_DEN, L_LPN, L_reg";

pub fn log_line(record: &StepRecord) -> String {
    format!(
        "{}, {}, {}, {}, {}",
        record.step, record.loss.total, record.loss.den, record.loss.lp, record.loss.reg
    )
}

/// Run `config.steps` optimization steps from a fresh seed-derived state.
/// `observer` sees the state after every step; log lines and mid-run
/// checkpoints both hang off it.
pub fn train<S: Scalar>(
    dataset: &ClassDataset,
    config: TrainConfig,
    mut observer: impl FnMut(&ModelState<S>, &StepRecord) -> Result<()>,
) -> Result<ModelState<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = ModelState::init_with_rng(config, &mut rng)?;
    for _ in 0..config.steps {
        let loss = train_step(&mut state, dataset, &mut rng)?;
        let record = StepRecord { step: state.step, loss };
        observer(&state, &record)?;
    }
    Ok(state)
}

/// Fraction of freshly drawn neighbor pairs whose predicted direction is the
/// sampled one. Pairs come from `images` with the run's jitter; `seed` keeps
/// the check reproducible.
pub fn lp_accuracy<S: Scalar>(
    state: &ModelState<S>,
    images: &[Image],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() || n_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one image and one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plen = CHANNELS * PATCH_SIZE * PATCH_SIZE;
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < n_pairs {
        let m = (n_pairs - done).min(64);
        let mut data = vec![S::zero(); 2 * m * plen];
        let mut labels = Vec::with_capacity(m);
        for j in 0..m {
            let img = &images[rng.gen_range(0..images.len())];
            let pair = sample_neighbor_pair(img, PATCH_SIZE, state.config.jitter, &mut rng)?;
            fill_slot(&mut data, j, plen, &pair.patch_a);
            fill_slot(&mut data, m + j, plen, &pair.patch_b);
            labels.push(pair.label);
        }
        let mut g = Graph::new();
        let pe_ids = state.pe.insert(&mut g, false);
        let lp_ids = state.lp.insert(&mut g, false);
        let x = g.constant(Tensor::raw(vec![2 * m, CHANNELS, PATCH_SIZE, PATCH_SIZE], data));
        let z = pe_ids.embed(&mut g, x)?;
        let z_anchor = g.slice_rows(z, 0, m)?;
        let z_neighbor = g.slice_rows(z, m, m)?;
        let probs = lp_ids.predict(&mut g, z_anchor, z_neighbor)?;
        let p = g.value(probs);
        for (j, &label) in labels.iter().enumerate() {
            let row = &p.data()[j * NUM_DIRECTIONS..(j + 1) * NUM_DIRECTIONS];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("probabilities are ordered"))
                .map(|(i, _)| i)
                .expect("eight directions");
            if best == label {
                correct += 1;
            }
        }
        done += m;
    }
    Ok(correct as f64 / n_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IMAGE_SIZE;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 2,
            batch_den: 6,
            batch_lp_pairs: 3,
            steps: 1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    /// Smooth random ramps: enough spatial structure for the location head
    /// to have signal, cheap to synthesize.
    fn ramp_dataset(n: usize, seed: u64) -> ClassDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::with_capacity(n);
        for _ in 0..n {
            let (ay, ax, b): (f32, f32, f32) = (rng.gen(), rng.gen(), rng.gen());
            let mut data = vec![0.0f32; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
            for c in 0..CHANNELS {
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let ramp = (ay * y as f32 + ax * x as f32) / (2.0 * IMAGE_SIZE as f32);
                        data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] =
                            0.2 + 0.5 * ramp + 0.1 * b * c as f32 / 3.0;
                    }
                }
            }
            train.push(Image::from_channels_first(data));
        }
        ClassDataset { class_name: "ramps".into(), train, test: Vec::new() }
    }

    #[test]
    fn defaults_match_the_contract() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (1.0, 1.0, 0.005));
        assert_eq!((c.k, c.batch_den, c.batch_lp_pairs), (5, 128, 36));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.steps, 5000);
        assert_eq!(c.jitter, 8);
        assert_eq!(c.ema_decay, 0.99);
        assert_eq!(c.normalizer, Normalizer::Standard);
        assert_eq!(c.reduction, DenReduction::MeanLog);
        assert_eq!(c.dtype, DType::F32);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = TrainConfig::default();
        assert!(TrainConfig { lambda2: -0.1, ..base }.validate().is_err());
        assert!(TrainConfig { lambda1: f64::NAN, ..base }.validate().is_err());
        assert!(TrainConfig { batch_den: 1, ..base }.validate().is_err());
        assert!(TrainConfig { batch_lp_pairs: 1, ..base }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..base }.validate().is_err());
        assert!(TrainConfig { k: 0, ..base }.validate().is_err());
        assert!(TrainConfig { ema_decay: 1.0, ..base }.validate().is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = TrainConfig {
            lambda3: 0.125,
            k: 3,
            seed: 42,
            learning_rate: 2.5e-4,
            normalizer: Normalizer::Sqrt2Pi,
            reduction: DenReduction::LogSum,
            dtype: DType::F64,
            ..TrainConfig::default()
        };
        cfg.steps = 777;
        let mut rebuilt = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            rebuilt.apply_pair(&k, &v).unwrap();
        }
        assert_eq!(rebuilt, cfg);
        assert!(rebuilt.apply_pair("no_such_key", "1").is_err());
        assert!(rebuilt.apply_pair("lambda1", "abc").is_err());
    }

    #[test]
    fn dtype_must_match_the_scalar() {
        assert!(ModelState::<f64>::init(TrainConfig::default()).is_err());
        let cfg = TrainConfig { dtype: DType::F64, ..TrainConfig::default() };
        assert!(ModelState::<f64>::init(cfg).is_ok());
    }

    #[test]
    fn sample_batch_stacks_density_then_pairs() {
        let data = ramp_dataset(2, 3);
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: StepBatch<f32> = sample_batch(&data, &cfg, &mut rng).unwrap();
        assert_eq!(batch.patches.shape(), &[12, 3, 64, 64]);
        assert_eq!(batch.n_den, 6);
        assert_eq!(batch.n_pairs(), 3);
        assert!(batch.labels.iter().all(|&l| l < NUM_DIRECTIONS));
        assert!(batch.patches.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn breakdown_satisfies_the_weighted_sum() {
        let data = ramp_dataset(2, 7);
        let cfg = TrainConfig { lambda1: 2.0, lambda2: 0.7, lambda3: 0.3, ..tiny_config() };
        let state = ModelState::<f32>::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = sample_batch(&data, &cfg, &mut rng).unwrap();
        let b = state.evaluate_batch(&batch).unwrap();
        let expect = 2.0 * b.den + 0.7 * b.lp + 0.3 * b.reg;
        assert!(
            (b.total - expect).abs() <= 1e-6 * expect.abs().max(1.0),
            "total {} vs recombined {expect}",
            b.total
        );
    }

    #[test]
    fn lp_only_weights_reduce_to_the_pair_loss() {
        let data = ramp_dataset(2, 9);
        let cfg = TrainConfig { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, ..tiny_config() };
        let state = ModelState::<f32>::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&data, &cfg, &mut rng).unwrap();
        let b = state.evaluate_batch(&batch).unwrap();
        assert_eq!(b.total, b.lp);
        assert!(b.den != 0.0 && b.reg != 0.0, "raw terms must still be evaluated");
    }

    #[test]
    fn lambda2_zero_makes_the_total_ignore_pairs() {
        let data = ramp_dataset(2, 13);
        let cfg = TrainConfig {
            lambda2: 0.0,
            dtype: DType::F64,
            ..tiny_config()
        };
        let state = ModelState::<f64>::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch_a = sample_batch::<f64>(&data, &cfg, &mut rng).unwrap();

        let mut patches = batch_a.patches.clone();
        let plen = CHANNELS * PATCH_SIZE * PATCH_SIZE;
        for v in patches.data_mut()[batch_a.n_den * plen..].iter_mut() {
            *v = rng.gen::<f64>();
        }
        let labels = batch_a.labels.iter().map(|&l| (l + 1) % NUM_DIRECTIONS).collect();
        let batch_b = StepBatch { patches, labels, n_den: batch_a.n_den };

        let a = state.evaluate_batch(&batch_a).unwrap();
        let b = state.evaluate_batch(&batch_b).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.den, b.den);
        assert_eq!(a.reg, b.reg);
        assert_ne!(a.lp, b.lp);
    }

    #[test]
    fn zero_weights_leave_parameters_fixed() {
        let data = ramp_dataset(2, 17);
        let cfg = TrainConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..tiny_config() };
        let mut state = ModelState::<f32>::init(cfg).unwrap();
        let before = state.param_values();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(&mut state, &data, &mut rng).unwrap();
        assert_eq!(state.param_values(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn one_step_moves_every_network() {
        let data = ramp_dataset(2, 19);
        let mut state = ModelState::<f32>::init(tiny_config()).unwrap();
        let before = state.param_values();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(&mut state, &data, &mut rng).unwrap();
        let after = state.param_values();
        let names: Vec<String> =
            state.named_params().into_iter().map(|(n, _)| n).collect();
        for prefix in ["pe.", "de.", "lp."] {
            let moved = names
                .iter()
                .zip(before.iter().zip(&after))
                .filter(|(n, _)| n.starts_with(prefix))
                .any(|(_, (b, a))| b != a);
            assert!(moved, "no parameter under {prefix} changed");
        }
    }

    #[test]
    fn same_seed_replays_the_same_run() {
        let data = ramp_dataset(2, 23);
        let cfg = TrainConfig { steps: 3, ..tiny_config() };
        let mut losses_a = Vec::new();
        let state_a = train::<f32>(&data, cfg, |_, r| {
            losses_a.push(*r);
            Ok(())
        })
        .unwrap();
        let mut losses_b = Vec::new();
        let state_b = train::<f32>(&data, cfg, |_, r| {
            losses_b.push(*r);
            Ok(())
        })
        .unwrap();
        let lines_a: Vec<String> = losses_a.iter().map(log_line).collect();
        let lines_b: Vec<String> = losses_b.iter().map(log_line).collect();
        assert_eq!(lines_a, lines_b);
        assert_eq!(state_a.param_values(), state_b.param_values());
    }

    #[test]
    fn log_line_is_plain_comma_separated_text() {
        let record = StepRecord {
            step: 3,
            loss: LossBreakdown { total: 1.5, den: 0.5, lp: 0.75, reg: 0.25 },
        };
        assert_eq!(LOG_HEADER, "step, L, L_DEN, L_LPN, L_reg");
        assert_eq!(log_line(&record), "3, 1.5, 0.5, 0.75, 0.25");
    }

    #[test]
    fn smoothed_loss_drops_over_500_steps() {
        let data = ramp_dataset(2, 29);
        let cfg = TrainConfig {
            batch_den: 8,
            batch_lp_pairs: 4,
            k: 2,
            learning_rate: 1e-3,
            steps: 500,
            seed: 31,
            ..TrainConfig::default()
        };
        let mut totals = Vec::new();
        train::<f32>(&data, cfg, |_, r| {
            totals.push(r.loss.total);
            Ok(())
        })
        .unwrap();
        let window = |end: usize| totals[end - 50..end].iter().sum::<f64>() / 50.0;
        let (early, late) = (window(50), window(500));
        assert!(late < early, "smoothed loss rose: {early} -> {late}");
    }

    #[test]
    fn untrained_direction_accuracy_sits_near_chance() {
        let data = ramp_dataset(2, 37);
        let state = ModelState::<f32>::init(tiny_config()).unwrap();
        let acc = lp_accuracy(&state, &data.train, 64, 5).unwrap();
        assert!(acc < 0.4, "untrained accuracy {acc}");
        assert!(lp_accuracy(&state, &[], 4, 0).is_err());
    }
}
