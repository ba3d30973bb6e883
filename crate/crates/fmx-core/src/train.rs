//! Training: stochastic layer masking, variance-matched initialization, the
//! reconstruction objective with analytic gradients, Adam with global-norm
//! gradient clipping, and the training loop.
//!
//! The objective is the layer-averaged squared reconstruction error of the
//! clean activations, with the encoder fed (possibly masked) inputs. The
//! backward pass treats the top-k selection as a fixed mask: gradients flow
//! only through selected coordinates.

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::code::SparseCode;
use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::model::{batch_topk, CrosscoderModel, ModelDims};
use crate::weights::{
    decode_batch, decoder_backward, encoder_backward, encoder_forward_cached, CpFactors,
    DenseWeights3, TrFactors, Weights, WeightsGrad,
};

/// Hyperparameters for a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub mask_p: f32,
    pub seed: u64,
    /// Log every `eval_every` steps (the final step is always logged).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            batch_size: 256,
            steps: 1000,
            mask_p: 0.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return Err(Error::Config(format!("mask_p = {} must lie in [0, 1]", self.mask_p)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-(token, layer) keep bits: 0 with probability `p`, independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    bits: Array2<u8>,
}

impl LayerMask {
    pub fn keep(&self, token: usize, layer: usize) -> bool {
        self.bits[[token, layer]] == 1
    }

    pub fn zero_fraction(&self) -> f64 {
        let total = self.bits.len();
        if total == 0 {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b == 0).count() as f64 / total as f64
    }
}

/// Draw a Bernoulli layer mask and apply it: `masked[t, l, :] = bit * batch[t, l, :]`.
/// The input batch is left untouched.
pub fn apply_layer_mask(
    batch: &ActivationBatch,
    p: f32,
    rng: &mut ChaCha8Rng,
) -> (ActivationBatch, LayerMask) {
    let (tokens, layers) = (batch.tokens(), batch.layers());
    let mut masked = batch.clone();
    let mut bits = Array2::<u8>::ones((tokens, layers));
    for t in 0..tokens {
        for l in 0..layers {
            if rng.random::<f64>() < p as f64 {
                bits[[t, l]] = 0;
                masked.data_mut().slice_mut(s![t, l, ..]).fill(0.0);
            }
        }
    }
    (masked, LayerMask { bits })
}

/// Weight parameterization requested for a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantSpec {
    Dense,
    Tr { ranks: (usize, usize, usize) },
    Cp { rank: usize },
}

impl VariantSpec {
    pub fn name(&self) -> &'static str {
        match self {
            VariantSpec::Dense => "dense",
            VariantSpec::Tr { .. } => "tr",
            VariantSpec::Cp { .. } => "cp",
        }
    }
}

// Factor entries are drawn so the materialized tensor matches the per-element
// variance of a Kaiming-uniform 2-D slice (rectifier gain): v = 2 / fan_in.
// A product of three independent zero-mean factors has element variance
// (number of rank terms) * sigma^6, hence sigma = (v / terms)^(1/6).
fn factor_sigma(target_var: f64, rank_terms: usize) -> f64 {
    (target_var / rank_terms as f64).powf(1.0 / 6.0)
}

fn sample_array3(
    shape: (usize, usize, usize),
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let dist = Normal::new(0.0f64, sigma).expect("positive sigma");
    Array3::from_shape_simple_fn(shape, || dist.sample(rng) as f32)
}

fn sample_array2(shape: (usize, usize), sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let dist = Normal::new(0.0f64, sigma).expect("positive sigma");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng) as f32)
}

fn init_weights(dims: crate::weights::Dims3, fan_in: usize, variant: VariantSpec, rng: &mut ChaCha8Rng) -> Result<Weights> {
    let v = 2.0 / fan_in as f64;
    Ok(match variant {
        VariantSpec::Dense => {
            let sigma = v.sqrt();
            Weights::Dense(DenseWeights3::new(sample_array3(
                (dims.n1, dims.n2, dims.n3),
                sigma,
                rng,
            )))
        }
        VariantSpec::Tr { ranks: (r1, r2, r3) } => {
            if r1 == 0 || r2 == 0 || r3 == 0 {
                return Err(Error::Config("ring ranks must be >= 1".into()));
            }
            let sigma = factor_sigma(v, r1 * r2 * r3);
            Weights::Tr(TrFactors::new([
                sample_array3((r1, dims.n1, r2), sigma, rng),
                sample_array3((r2, dims.n2, r3), sigma, rng),
                sample_array3((r3, dims.n3, r1), sigma, rng),
            ])?)
        }
        VariantSpec::Cp { rank } => {
            if rank == 0 {
                return Err(Error::Config("cp rank must be >= 1".into()));
            }
            let sigma = factor_sigma(v, rank);
            Weights::Cp(CpFactors::new([
                sample_array2((dims.n1, rank), sigma, rng),
                sample_array2((dims.n2, rank), sigma, rng),
                sample_array2((dims.n3, rank), sigma, rng),
            ])?)
        }
    })
}

/// Variance-matched Gaussian initialization; biases start at zero.
///
/// Encoder slices target variance `2 / d`, decoder slices `2 / d_sae`. A ring
/// decoder uses the reversed rank cycle `(r3, r2, r1)` so that each tensor
/// mode carries the same rank product as in the encoder and the two tensors
/// hold exactly the same number of parameters.
pub fn init_model(
    dims: ModelDims,
    variant: VariantSpec,
    k: usize,
    mask_p: f32,
    rng: &mut ChaCha8Rng,
) -> Result<CrosscoderModel> {
    let encoder = init_weights(dims.encoder_dims(), dims.d, variant, rng)?;
    let decoder_variant = match variant {
        VariantSpec::Tr { ranks: (r1, r2, r3) } => VariantSpec::Tr { ranks: (r3, r2, r1) },
        other => other,
    };
    let decoder = init_weights(dims.decoder_dims(), dims.d_sae, decoder_variant, rng)?;
    CrosscoderModel::new(
        encoder,
        decoder,
        Array1::zeros(dims.d_sae),
        Array2::zeros((dims.layers, dims.d)),
        k,
        mask_p,
    )
}

/// Gradients for every parameter group of a model, in the parameter ordering
/// used by checkpoints and the optimizer.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub enc: WeightsGrad,
    pub dec: WeightsGrad,
    pub b_enc: Array1<f64>,
    pub b_dec: Array2<f64>,
}

impl LossGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.enc.slices();
        out.extend(self.dec.slices());
        out.push(self.b_enc.as_slice().expect("standard layout"));
        out.push(self.b_dec.as_slice().expect("standard layout"));
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm. A norm at or below the threshold is left
    /// untouched.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            self.scale(scale);
        }
        norm
    }

    fn scale(&mut self, factor: f64) {
        let apply = |a: &mut [f64]| a.iter_mut().for_each(|v| *v *= factor);
        match &mut self.enc {
            WeightsGrad::Dense(a) => apply(a.as_slice_mut().unwrap()),
            WeightsGrad::Tr(cs) => cs.iter_mut().for_each(|c| apply(c.as_slice_mut().unwrap())),
            WeightsGrad::Cp(fs) => fs.iter_mut().for_each(|f| apply(f.as_slice_mut().unwrap())),
        }
        match &mut self.dec {
            WeightsGrad::Dense(a) => apply(a.as_slice_mut().unwrap()),
            WeightsGrad::Tr(cs) => cs.iter_mut().for_each(|c| apply(c.as_slice_mut().unwrap())),
            WeightsGrad::Cp(fs) => fs.iter_mut().for_each(|f| apply(f.as_slice_mut().unwrap())),
        }
        apply(self.b_enc.as_slice_mut().unwrap());
        apply(self.b_dec.as_slice_mut().unwrap());
    }
}

/// Loss value, gradients, and the sparse code the loss was computed under.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: LossGrads,
    pub code: SparseCode,
}

/// Per-token selected latent sets, used to hold the top-k mask fixed across
/// loss evaluations (finite-difference checks and the backward contract).
#[derive(Debug, Clone)]
pub struct Selection {
    rows: Vec<Vec<u32>>,
}

impl Selection {
    pub fn from_code(code: &SparseCode) -> Self {
        let rows = code
            .iter_tokens()
            .map(|entries| entries.iter().map(|&(i, _)| i).collect())
            .collect();
        Self { rows }
    }
}

fn check_finite(batch: &ActivationBatch, what: &str) -> Result<()> {
    if batch.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value in {what} activations")));
    }
    Ok(())
}

fn check_same_shape(model: &CrosscoderModel, clean: &ActivationBatch, masked: &ActivationBatch) -> Result<()> {
    let dims = model.dims();
    for (name, b) in [("clean", clean), ("masked", masked)] {
        if b.layers() != dims.layers || b.dim() != dims.d {
            return Err(Error::Dim(format!(
                "{name} batch ({}, {}, {}) does not match model (d = {}, L = {})",
                b.tokens(),
                b.layers(),
                b.dim(),
                dims.d,
                dims.layers
            )));
        }
    }
    if clean.tokens() != masked.tokens() {
        return Err(Error::Dim(format!(
            "clean batch has {} tokens, masked batch {}",
            clean.tokens(),
            masked.tokens()
        )));
    }
    Ok(())
}

/// Mean squared reconstruction error of the clean targets from the (possibly
/// masked) inputs, averaged over tokens and layers, with gradients for every
/// parameter group. The top-k mask is the batch top-k of this forward pass.
pub fn recon_loss(
    model: &CrosscoderModel,
    clean: &ActivationBatch,
    masked: &ActivationBatch,
) -> Result<LossOutput> {
    loss_impl(model, clean, masked, None)
}

/// Same objective with a caller-fixed selection mask instead of a fresh
/// batch top-k pass.
pub fn recon_loss_with_selection(
    model: &CrosscoderModel,
    clean: &ActivationBatch,
    masked: &ActivationBatch,
    selection: &Selection,
) -> Result<LossOutput> {
    loss_impl(model, clean, masked, Some(selection))
}

fn loss_impl(
    model: &CrosscoderModel,
    clean: &ActivationBatch,
    masked: &ActivationBatch,
    selection: Option<&Selection>,
) -> Result<LossOutput> {
    check_same_shape(model, clean, masked)?;
    check_finite(clean, "clean")?;
    check_finite(masked, "masked")?;
    let dims = model.dims();
    let tokens = clean.tokens();

    let (linear, enc_cache) = encoder_forward_cached(model.encoder(), masked)?;

    // Biased pre-activations and the sparse code under the active selection.
    let code = match selection {
        None => {
            let mut pre = linear.clone();
            for mut row in pre.rows_mut() {
                for (v, &b) in row.iter_mut().zip(model.b_enc().iter()) {
                    let biased = *v + b as f64;
                    *v = if biased > 0.0 { biased } else { 0.0 };
                }
            }
            batch_topk(&pre, model.k())?
        }
        Some(sel) => {
            if sel.rows.len() != tokens {
                return Err(Error::Dim(format!(
                    "selection has {} tokens, batch has {tokens}",
                    sel.rows.len()
                )));
            }
            let rows = sel
                .rows
                .iter()
                .enumerate()
                .map(|(t, indices)| {
                    indices
                        .iter()
                        .map(|&i| {
                            let biased = linear[[t, i as usize]] + model.b_enc()[i as usize] as f64;
                            (i, biased.max(0.0))
                        })
                        .collect()
                })
                .collect();
            SparseCode::from_rows(rows)
        }
    };

    let (recon, dec_cache) = decode_batch(model.decoder(), &code, dims.layers)?;

    // Residuals r = x_hat - x (decoder bias included), loss = mean_{t,l} ||r||^2.
    let scale = 2.0 / (tokens as f64 * dims.layers as f64);
    let mut dresid = Array3::<f64>::zeros(recon.raw_dim());
    let mut loss = 0.0f64;
    for t in 0..tokens {
        for l in 0..dims.layers {
            for j in 0..dims.d {
                let r = recon[[t, l, j]] + model.b_dec()[[l, j]] as f64
                    - clean.data()[[t, l, j]] as f64;
                loss += r * r;
                dresid[[t, l, j]] = scale * r;
            }
        }
    }
    loss /= tokens as f64 * dims.layers as f64;

    let mut b_dec_grad = Array2::<f64>::zeros((dims.layers, dims.d));
    for t in 0..tokens {
        for l in 0..dims.layers {
            let mut row = b_dec_grad.row_mut(l);
            for (g, &dr) in row.iter_mut().zip(dresid.slice(s![t, l, ..]).iter()) {
                *g += dr;
            }
        }
    }

    let (dec_grad, dz) = decoder_backward(model.decoder(), &code, &dec_cache, &dresid);

    // Cotangent on pre-activations: selected coordinates with positive values
    // pass straight through ReLU; everything else is blocked.
    let mut dpre = Array2::<f64>::zeros((tokens, dims.d_sae));
    let mut pos = 0;
    for t in 0..tokens {
        for &(i, _) in code.token(t) {
            dpre[[t, i as usize]] = dz[pos];
            pos += 1;
        }
    }

    let mut b_enc_grad = Array1::<f64>::zeros(dims.d_sae);
    for t in 0..tokens {
        for (g, &d) in b_enc_grad.iter_mut().zip(dpre.row(t).iter()) {
            *g += d;
        }
    }

    let enc_grad = encoder_backward(model.encoder(), masked, &enc_cache, &dpre);

    Ok(LossOutput {
        loss,
        grads: LossGrads { enc: enc_grad, dec: dec_grad, b_enc: b_enc_grad, b_dec: b_dec_grad },
        code,
    })
}

/// Adam moment buffers over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        Self { m: vec![0.0; param_len], v: vec![0.0; param_len], step: 0 }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// One Adam update with bias correction, applied after global-norm clipping.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &mut LossGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("non-finite gradient (global norm {norm})"),
        });
    }
    grads.clip_global_norm(cfg.grad_clip_norm);

    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != state.m.len() {
        return Err(Error::Dim(format!(
            "optimizer state sized for {} parameters, model has {total}",
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let mut offset = 0;
    for (pslice, gslice) in params.iter_mut().zip(grads.slices()) {
        debug_assert_eq!(pslice.len(), gslice.len());
        for (idx, (p, &g)) in pslice.iter_mut().zip(gslice.iter()).enumerate() {
            let i = offset + idx;
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            let update = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            *p = (*p as f64 - update) as f32;
        }
        offset += pslice.len();
    }
    Ok(())
}

/// Mutable flat views of every model parameter, in optimizer order.
pub fn model_param_slices(model: &mut CrosscoderModel) -> Vec<&mut [f32]> {
    let (enc, dec, b_enc, b_dec) = model.parts_mut();
    let mut out = enc.param_slices_mut();
    out.extend(dec.param_slices_mut());
    out.push(b_enc.as_slice_mut().expect("standard layout"));
    out.push(b_dec.as_slice_mut().expect("standard layout"));
    out
}

pub fn model_param_len(model: &CrosscoderModel) -> usize {
    model.param_count()
}

/// Yields training batches. Sources are free to cycle forever or to run dry,
/// in which case training truncates at the last full step.
pub trait BatchSource {
    fn next_batch(&mut self) -> Option<ActivationBatch>;
}

/// Endless source that reshuffles token order every epoch.
pub struct CyclingSource {
    data: ActivationBatch,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSource {
    pub fn new(data: ActivationBatch, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || data.tokens() == 0 {
            return Err(Error::Config("cycling source needs tokens and a positive batch size".into()));
        }
        let mut src = Self {
            data,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
        };
        src.reshuffle();
        Ok(src)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.data.tokens()).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }
}

impl BatchSource for CyclingSource {
    fn next_batch(&mut self) -> Option<ActivationBatch> {
        if self.pos + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let take = self.batch_size.min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        Some(self.data.select_tokens(&idx).expect("indices in range"))
    }
}

/// Finite source: sequential batches, one pass, then `None`.
pub struct OnePassSource {
    data: ActivationBatch,
    batch_size: usize,
    pos: usize,
}

impl OnePassSource {
    pub fn new(data: ActivationBatch, batch_size: usize) -> Self {
        Self { data, batch_size, pos: 0 }
    }
}

impl BatchSource for OnePassSource {
    fn next_batch(&mut self) -> Option<ActivationBatch> {
        if self.pos >= self.data.tokens() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.data.tokens());
        let batch = self.data.slice_tokens(self.pos, end).expect("range in bounds");
        self.pos = end;
        Some(batch)
    }
}

/// One metrics record. `wall_ms` is wall-clock and is excluded from the
/// determinism contract; everything else is reproducible bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub mean_active: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    /// True when the data source ran dry before the step budget.
    pub truncated: bool,
    pub final_loss: f64,
}

/// Run the training loop: per step draw a batch, draw a layer mask, forward
/// on the masked input, score against the clean batch, clip, and update.
/// Deterministic given (seed, config, data); the masking RNG stream is
/// independent of the data order so masking ablations see identical batches.
pub fn train(
    model: &mut CrosscoderModel,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut state = AdamState::new(model_param_len(model));
    let mut log = TrainLog { steps: Vec::new(), truncated: false, final_loss: f64::NAN };
    let start = std::time::Instant::now();

    for step in 0..cfg.steps {
        let Some(batch) = source.next_batch() else {
            log.truncated = true;
            break;
        };
        let (masked, _mask) = apply_layer_mask(&batch, cfg.mask_p, &mut mask_rng);
        let out = recon_loss(model, &batch, &masked)?;
        let LossOutput { loss, mut grads, code } = out;
        adam_step(&mut model_param_slices(model), &mut grads, &mut state, cfg)?;
        log.final_loss = loss;
        if step % cfg.eval_every.max(1) == 0 || step + 1 == cfg.steps {
            log.steps.push(StepMetrics {
                step,
                loss,
                mean_active: code.mean_active(),
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(log)
}
