//! Crosscoder models: a shared latent space over `L` layers with dense or
//! factorized encoder/decoder tensors, a ReLU pre-activation, and a BatchTopK
//! sparsifier. The single-layer SAE is the `L = 1` degenerate case.

use ndarray::{Array1, Array2, Array3};

use crate::code::SparseCode;
use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::weights::{decode_batch, encoder_contract, Dims3, Weights};

/// Model dimensions: activation dim, dictionary width, layer count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub d_sae: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(d: usize, d_sae: usize, layers: usize) -> Self {
        Self { d, d_sae, layers }
    }

    pub fn encoder_dims(&self) -> Dims3 {
        Dims3::new(self.d, self.d_sae, self.layers)
    }

    pub fn decoder_dims(&self) -> Dims3 {
        Dims3::new(self.d_sae, self.d, self.layers)
    }
}

/// Evaluation-time sparsification rule.
///
/// Training always uses batch top-k; at evaluation time the selection rule is
/// a caller choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsifyMode {
    /// Keep the `T * k` largest positive pre-activations across the batch.
    BatchTopK { k: usize },
    /// Keep each token's `k` largest positive pre-activations.
    PerTokenTopK { k: usize },
    /// Keep pre-activations strictly greater than `theta` (`theta >= 0`).
    Threshold { theta: f64 },
}

/// Encoder/decoder pair with shared encoder bias and per-layer decoder biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderModel {
    dims: ModelDims,
    encoder: Weights,
    decoder: Weights,
    b_enc: Array1<f32>,
    b_dec: Array2<f32>,
    k: usize,
    mask_p: f32,
}

impl CrosscoderModel {
    pub fn new(
        encoder: Weights,
        decoder: Weights,
        b_enc: Array1<f32>,
        b_dec: Array2<f32>,
        k: usize,
        mask_p: f32,
    ) -> Result<Self> {
        let enc_dims = encoder.dims();
        let dims = ModelDims::new(enc_dims.n1, enc_dims.n2, enc_dims.n3);
        if decoder.dims() != dims.decoder_dims() {
            return Err(Error::Dim(format!(
                "decoder dims {:?} do not mirror encoder dims {:?}",
                decoder.dims(),
                enc_dims
            )));
        }
        if std::mem::discriminant(&encoder) != std::mem::discriminant(&decoder) {
            return Err(Error::Config(format!(
                "encoder variant {} and decoder variant {} must match",
                encoder.variant_name(),
                decoder.variant_name()
            )));
        }
        if let (Weights::Tr(enc), Weights::Tr(dec)) = (&encoder, &decoder) {
            // Decoder rings carry the reversed rank cycle so the two tensors
            // hold identical parameter counts and checkpoints stay compact.
            let (r1, r2, r3) = enc.ranks();
            if dec.ranks() != (r3, r2, r1) {
                return Err(Error::Config(format!(
                    "decoder ring ranks {:?} must be the reversed encoder cycle {:?}",
                    dec.ranks(),
                    (r3, r2, r1)
                )));
            }
        }
        if let (Weights::Cp(enc), Weights::Cp(dec)) = (&encoder, &decoder) {
            if enc.rank() != dec.rank() {
                return Err(Error::Config(format!(
                    "decoder cp rank {} must match encoder rank {}",
                    dec.rank(),
                    enc.rank()
                )));
            }
        }
        if b_enc.len() != dims.d_sae {
            return Err(Error::Dim(format!(
                "encoder bias length {} != d_sae {}",
                b_enc.len(),
                dims.d_sae
            )));
        }
        if b_dec.shape() != [dims.layers, dims.d] {
            return Err(Error::Dim(format!(
                "decoder bias shape {:?} != (L, d) = ({}, {})",
                b_dec.shape(),
                dims.layers,
                dims.d
            )));
        }
        if k == 0 || k > dims.d_sae {
            return Err(Error::Config(format!(
                "sparsity budget k = {k} must satisfy 1 <= k <= d_sae = {}",
                dims.d_sae
            )));
        }
        if !(0.0..=1.0).contains(&mask_p) {
            return Err(Error::Config(format!("mask_p = {mask_p} must lie in [0, 1]")));
        }
        Ok(Self { dims, encoder, decoder, b_enc, b_dec, k, mask_p })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn encoder(&self) -> &Weights {
        &self.encoder
    }

    pub fn decoder(&self) -> &Weights {
        &self.decoder
    }

    pub fn b_enc(&self) -> &Array1<f32> {
        &self.b_enc
    }

    pub fn b_dec(&self) -> &Array2<f32> {
        &self.b_dec
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask_p(&self) -> f32 {
        self.mask_p
    }

    pub fn variant_name(&self) -> &'static str {
        self.encoder.variant_name()
    }

    /// The training-time selection rule applied at evaluation by default.
    pub fn default_eval_mode(&self) -> SparsifyMode {
        SparsifyMode::BatchTopK { k: self.k }
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut Weights, &mut Weights, &mut Array1<f32>, &mut Array2<f32>) {
        (&mut self.encoder, &mut self.decoder, &mut self.b_enc, &mut self.b_dec)
    }

    /// ReLU pre-activations `relu(sum_l E_l^T x_l + b_enc)`, one row per token.
    /// With `skip_layer` set, that layer's contribution is zeroed (the
    /// layer-ablation operator used by the coherence diagnostics).
    pub fn preactivations(
        &self,
        batch: &ActivationBatch,
        skip_layer: Option<usize>,
    ) -> Result<Array2<f64>> {
        let mut pre = encoder_contract(&self.encoder, batch, skip_layer)?;
        for mut row in pre.rows_mut() {
            for (v, &b) in row.iter_mut().zip(self.b_enc.iter()) {
                let with_bias = *v + b as f64;
                *v = if with_bias > 0.0 { with_bias } else { 0.0 };
            }
        }
        Ok(pre)
    }

    /// Encode a batch under the given sparsification rule.
    pub fn encode(
        &self,
        batch: &ActivationBatch,
        mode: SparsifyMode,
        skip_layer: Option<usize>,
    ) -> Result<SparseCode> {
        let pre = self.preactivations(batch, skip_layer)?;
        sparsify_eval(&pre, mode)
    }

    /// Full forward map: sparse code plus reconstructions `(T, L, d)`.
    pub fn forward(
        &self,
        batch: &ActivationBatch,
        mode: SparsifyMode,
    ) -> Result<(SparseCode, Array3<f64>)> {
        let code = self.encode(batch, mode, None)?;
        let recon = self.decode(&code)?;
        Ok((code, recon))
    }

    /// Reconstructions for an existing code: `D_l z + b_l` per token and layer.
    pub fn decode(&self, code: &SparseCode) -> Result<Array3<f64>> {
        let (mut recon, _) = decode_batch(&self.decoder, code, self.dims.layers)?;
        for t in 0..code.tokens() {
            for l in 0..self.dims.layers {
                let mut row = recon.slice_mut(ndarray::s![t, l, ..]);
                for (v, &b) in row.iter_mut().zip(self.b_dec.row(l).iter()) {
                    *v += b as f64;
                }
            }
        }
        Ok(recon)
    }

    /// Total learnable parameter count (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.param_count_weights() + self.dims.d_sae + self.dims.layers * self.dims.d
    }

    /// Weight-only parameter count (excludes biases).
    pub fn param_count_weights(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

/// BatchTopK: keep the `T * k` largest positive values across the whole
/// batch; fewer positives than the budget means all positives survive. Ties
/// at the boundary are broken toward the lower (token, latent) pair.
pub fn batch_topk(preacts: &Array2<f64>, k: usize) -> Result<SparseCode> {
    if k == 0 {
        return Err(Error::Config("top-k budget must be >= 1".into()));
    }
    let tokens = preacts.nrows();
    let budget = tokens * k;
    let mut positive: Vec<(f64, u32, u32)> = Vec::new();
    for ((t, i), &v) in preacts.indexed_iter() {
        if v > 0.0 {
            positive.push((v, t as u32, i as u32));
        }
    }
    if positive.len() > budget {
        let rank =
            |a: &(f64, u32, u32), b: &(f64, u32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
        positive.select_nth_unstable_by(budget - 1, rank);
        positive.truncate(budget);
    }
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); tokens];
    for (v, t, i) in positive {
        rows[t as usize].push((i, v));
    }
    Ok(SparseCode::from_rows(rows))
}

/// Evaluation-time sparsification under the chosen mode.
pub fn sparsify_eval(preacts: &Array2<f64>, mode: SparsifyMode) -> Result<SparseCode> {
    match mode {
        SparsifyMode::BatchTopK { k } => batch_topk(preacts, k),
        SparsifyMode::PerTokenTopK { k } => {
            if k == 0 {
                return Err(Error::Config("top-k budget must be >= 1".into()));
            }
            let mut rows = Vec::with_capacity(preacts.nrows());
            for row in preacts.rows() {
                let mut entries: Vec<(u32, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|&(_, &v)| v > 0.0)
                    .map(|(i, &v)| (i as u32, v))
                    .collect();
                if entries.len() > k {
                    entries
                        .select_nth_unstable_by(k - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    entries.truncate(k);
                }
                rows.push(entries);
            }
            Ok(SparseCode::from_rows(rows))
        }
        SparsifyMode::Threshold { theta } => {
            if theta < 0.0 {
                return Err(Error::Config(format!("threshold {theta} must be >= 0")));
            }
            let rows = preacts
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|&(_, &v)| v > theta)
                        .map(|(i, &v)| (i as u32, v))
                        .collect()
                })
                .collect();
            Ok(SparseCode::from_rows(rows))
        }
    }
}

/// Per-tensor TR parameter count for rank tuple `(r1, r2, r3)`.
pub fn tr_param_count(d: usize, d_sae: usize, layers: usize, ranks: (usize, usize, usize)) -> usize {
    let (r1, r2, r3) = ranks;
    r1 * d * r2 + r2 * d_sae * r3 + r3 * layers * r1
}

// Candidate windows around the rank-ratio rays: +/- max(1, 10%) of the ray
// point, clamped to >= 1.
fn ray_window(center: f64) -> std::ops::RangeInclusive<usize> {
    let slack = (0.1 * center).max(1.0);
    let lo = ((center - slack).floor().max(1.0)) as usize;
    let hi = (center + slack).ceil() as usize;
    lo..=hi.max(1)
}

/// Pick TR ranks near the ratio rays `r2/r1 = sqrt(d/L)`, `r3/r1 =
/// sqrt(d_sae/d)` maximizing the per-tensor parameter count subject to
/// `count <= budget / 2`. Explicit user-supplied tuples bypass this search.
pub fn select_tr_ranks(
    d: usize,
    d_sae: usize,
    layers: usize,
    param_budget: usize,
) -> Result<(usize, usize, usize)> {
    if d == 0 || d_sae == 0 || layers == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    let per_tensor = param_budget / 2;
    let rho2 = (d as f64 / layers as f64).sqrt();
    let rho3 = (d_sae as f64 / d as f64).sqrt();

    let mut best: Option<(usize, f64, (usize, usize, usize))> = None;
    let mut dry_streak = 0;
    let mut r1 = 1usize;
    loop {
        let c2 = r1 as f64 * rho2;
        let c3 = r1 as f64 * rho3;
        let mut feasible_here = false;
        for r2 in ray_window(c2) {
            for r3 in ray_window(c3) {
                let count = tr_param_count(d, d_sae, layers, (r1, r2, r3));
                if count > per_tensor {
                    continue;
                }
                feasible_here = true;
                let dist = (r2 as f64 - c2).powi(2) + (r3 as f64 - c3).powi(2);
                let candidate = (count, dist, (r1, r2, r3));
                let better = match &best {
                    None => true,
                    Some((bc, bd, bt)) => {
                        count > *bc
                            || (count == *bc && dist < *bd)
                            || (count == *bc && dist == *bd && (r1, r2, r3) < *bt)
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
        if feasible_here {
            dry_streak = 0;
        } else {
            dry_streak += 1;
            if dry_streak >= 3 && best.is_some() {
                break;
            }
            if dry_streak >= 3 && r1 > 2 {
                break;
            }
        }
        r1 += 1;
    }
    best.map(|(_, _, t)| t).ok_or_else(|| {
        Error::Config(format!(
            "budget {param_budget} infeasible for TR ranks at dims ({d}, {d_sae}, {layers})"
        ))
    })
}

/// CP rank matching the parameter budget: the nearest integer to
/// `(budget / 2) / (d + d_sae + L)`. A rank of zero is infeasible.
pub fn select_cp_rank(d: usize, d_sae: usize, layers: usize, param_budget: usize) -> Result<usize> {
    let denom = d + d_sae + layers;
    if denom == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    // round(budget / (2 * denom)) computed exactly in integers (half away from zero).
    let num = param_budget as u128;
    let den = 2 * denom as u128;
    let rank = ((2 * num + den) / (2 * den)) as usize;
    if rank == 0 {
        return Err(Error::Config(format!(
            "budget {param_budget} infeasible for CP rank at dims ({d}, {d_sae}, {layers})"
        )));
    }
    Ok(rank)
}
