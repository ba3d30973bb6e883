//! Weight tensors for multi-layer encoders/decoders: dense 3-D storage and
//! tensor-ring (TR) / canonical polyadic (CP) factorized forms, plus the
//! contractions that apply them to activation batches.
//!
//! A weight tensor has three modes `(n1, n2, n3)`. Encoders use
//! `(d, d_sae, L)` and decoders `(d_sae, d, L)`. Factorized contractions never
//! materialize the full `n1 x n2 x n3` tensor: the encoder path goes through
//! per-chunk rank-space intermediates and the decoder path touches only the
//! latents that are active in the sparse code.
//!
//! Storage is 32-bit; every contraction accumulates in 64-bit.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayViewMut2};

use crate::code::SparseCode;
use crate::data::ActivationBatch;
use crate::error::{Error, Result};

/// Mode sizes of a 3-D weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3 {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl Dims3 {
    pub fn new(n1: usize, n2: usize, n3: usize) -> Self {
        Self { n1, n2, n3 }
    }

    fn check_index(&self, i1: usize, i2: usize, i3: usize) -> Result<()> {
        if i1 >= self.n1 || i2 >= self.n2 || i3 >= self.n3 {
            return Err(Error::Index(format!(
                "({i1}, {i2}, {i3}) out of bounds for tensor {:?}",
                (self.n1, self.n2, self.n3)
            )));
        }
        Ok(())
    }
}

/// Fully materialized 3-D weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights3 {
    data: Array3<f32>,
}

impl DenseWeights3 {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn dims(&self) -> Dims3 {
        let s = self.data.shape();
        Dims3::new(s[0], s[1], s[2])
    }
}

/// Tensor-ring factors. `cores[k]` has shape `(r_k, n_k, r_{k+1 mod 3})`, and
/// an element of the represented tensor is the trace of the product of the
/// three matrix slices selected by the element's indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrFactors {
    cores: [Array3<f32>; 3],
}

impl TrFactors {
    pub fn new(cores: [Array3<f32>; 3]) -> Result<Self> {
        for k in 0..3 {
            let left = cores[k].shape()[2];
            let right = cores[(k + 1) % 3].shape()[0];
            if left != right {
                return Err(Error::Dim(format!(
                    "ring mismatch between core {k} (trailing rank {left}) and core {} (leading rank {right})",
                    (k + 1) % 3
                )));
            }
            if cores[k].shape().iter().any(|&n| n == 0) {
                return Err(Error::Dim(format!("core {k} has a zero dimension")));
            }
        }
        Ok(Self { cores })
    }

    pub fn cores(&self) -> &[Array3<f32>; 3] {
        &self.cores
    }

    pub fn ranks(&self) -> (usize, usize, usize) {
        (
            self.cores[0].shape()[0],
            self.cores[1].shape()[0],
            self.cores[2].shape()[0],
        )
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::new(
            self.cores[0].shape()[1],
            self.cores[1].shape()[1],
            self.cores[2].shape()[1],
        )
    }

    /// Element `(i1, i2, i3)` as the trace of the slice product.
    pub fn element(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        let (r1, r2, r3) = self.ranks();
        let g1 = &self.cores[0];
        let g2 = &self.cores[1];
        let g3 = &self.cores[2];
        // trace(A B C) with A = g1[:, i1, :], B = g2[:, i2, :], C = g3[:, i3, :].
        let mut total = 0.0f64;
        for a in 0..r1 {
            for c in 0..r3 {
                let mut ab = 0.0f64;
                for b in 0..r2 {
                    ab += g1[[a, i1, b]] as f64 * g2[[b, i2, c]] as f64;
                }
                total += ab * g3[[c, i3, a]] as f64;
            }
        }
        total
    }
}

/// Canonical polyadic factors. `factors[k]` has shape `(n_k, rank)`; an
/// element is the rank-summed product of one row from each factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    factors: [Array2<f32>; 3],
}

impl CpFactors {
    pub fn new(factors: [Array2<f32>; 3]) -> Result<Self> {
        let rank = factors[0].shape()[1];
        for (k, f) in factors.iter().enumerate() {
            if f.shape()[1] != rank {
                return Err(Error::Dim(format!(
                    "factor {k} rank {} does not match factor 0 rank {rank}",
                    f.shape()[1]
                )));
            }
            if f.shape().iter().any(|&n| n == 0) {
                return Err(Error::Dim(format!("factor {k} has a zero dimension")));
            }
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Array2<f32>; 3] {
        &self.factors
    }

    pub fn rank(&self) -> usize {
        self.factors[0].shape()[1]
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::new(
            self.factors[0].shape()[0],
            self.factors[1].shape()[0],
            self.factors[2].shape()[0],
        )
    }

    pub fn element(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        let mut total = 0.0f64;
        for r in 0..self.rank() {
            total += self.factors[0][[i1, r]] as f64
                * self.factors[1][[i2, r]] as f64
                * self.factors[2][[i3, r]] as f64;
        }
        total
    }
}

/// A weight tensor in one of the supported parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Dense(DenseWeights3),
    Tr(TrFactors),
    Cp(CpFactors),
}

impl Weights {
    pub fn dims(&self) -> Dims3 {
        match self {
            Weights::Dense(w) => w.dims(),
            Weights::Tr(w) => w.dims(),
            Weights::Cp(w) => w.dims(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Weights::Dense(_) => "dense",
            Weights::Tr(_) => "tr",
            Weights::Cp(_) => "cp",
        }
    }

    /// Bounds-checked elementwise evaluation (64-bit accumulation).
    pub fn element(&self, i1: usize, i2: usize, i3: usize) -> Result<f64> {
        self.dims().check_index(i1, i2, i3)?;
        Ok(match self {
            Weights::Dense(w) => w.data[[i1, i2, i3]] as f64,
            Weights::Tr(w) => w.element(i1, i2, i3),
            Weights::Cp(w) => w.element(i1, i2, i3),
        })
    }

    /// Materialize the full tensor into 32-bit dense storage. `target` must
    /// match the factor dimensions.
    pub fn materialize(&self, target: Dims3) -> Result<DenseWeights3> {
        let dims = self.dims();
        if dims != target {
            return Err(Error::Dim(format!(
                "target shape {:?} does not match factor dims {:?}",
                (target.n1, target.n2, target.n3),
                (dims.n1, dims.n2, dims.n3)
            )));
        }
        match self {
            Weights::Dense(w) => Ok(w.clone()),
            Weights::Tr(w) => {
                let data = Array3::from_shape_fn((dims.n1, dims.n2, dims.n3), |(a, b, c)| {
                    w.element(a, b, c) as f32
                });
                Ok(DenseWeights3::new(data))
            }
            Weights::Cp(w) => {
                let data = Array3::from_shape_fn((dims.n1, dims.n2, dims.n3), |(a, b, c)| {
                    w.element(a, b, c) as f32
                });
                Ok(DenseWeights3::new(data))
            }
        }
    }

    /// Mode-1 fiber: the `n1`-vector at fixed `(i2, i3)`. For an encoder this
    /// is the read direction of latent `i2` at layer `i3`.
    pub fn fiber_mode1(&self, i2: usize, i3: usize) -> Result<Array1<f64>> {
        let dims = self.dims();
        dims.check_index(0, i2, i3)?;
        Ok(match self {
            Weights::Dense(w) => w.data.slice(s![.., i2, i3]).mapv(|v| v as f64),
            Weights::Tr(w) => {
                let (r1, r2, r3) = w.ranks();
                // K[b][a] = sum_c g2[b, i2, c] * g3[c, i3, a]
                let mut k = Array2::<f64>::zeros((r2, r1));
                for b in 0..r2 {
                    for a in 0..r1 {
                        let mut acc = 0.0f64;
                        for c in 0..r3 {
                            acc += w.cores[1][[b, i2, c]] as f64 * w.cores[2][[c, i3, a]] as f64;
                        }
                        k[[b, a]] = acc;
                    }
                }
                let mut out = Array1::<f64>::zeros(dims.n1);
                for j in 0..dims.n1 {
                    let mut acc = 0.0f64;
                    for a in 0..r1 {
                        for b in 0..r2 {
                            acc += w.cores[0][[a, j, b]] as f64 * k[[b, a]];
                        }
                    }
                    out[j] = acc;
                }
                out
            }
            Weights::Cp(w) => {
                let rank = w.rank();
                let mut coeff = Array1::<f64>::zeros(rank);
                for r in 0..rank {
                    coeff[r] = w.factors[1][[i2, r]] as f64 * w.factors[2][[i3, r]] as f64;
                }
                let mut out = Array1::<f64>::zeros(dims.n1);
                for j in 0..dims.n1 {
                    let mut acc = 0.0f64;
                    for r in 0..rank {
                        acc += w.factors[0][[j, r]] as f64 * coeff[r];
                    }
                    out[j] = acc;
                }
                out
            }
        })
    }

    /// Mode-2 fiber: the `n2`-vector at fixed `(i1, i3)`. For a decoder this
    /// is the dictionary direction of latent `i1` at layer `i3`.
    pub fn fiber_mode2(&self, i1: usize, i3: usize) -> Result<Array1<f64>> {
        let dims = self.dims();
        dims.check_index(i1, 0, i3)?;
        Ok(match self {
            Weights::Dense(w) => w.data.slice(s![i1, .., i3]).mapv(|v| v as f64),
            Weights::Tr(w) => {
                let (r1, r2, r3) = w.ranks();
                // K[c][b] = sum_a g3[c, i3, a] * g1[a, i1, b]
                let mut k = Array2::<f64>::zeros((r3, r2));
                for c in 0..r3 {
                    for b in 0..r2 {
                        let mut acc = 0.0f64;
                        for a in 0..r1 {
                            acc += w.cores[2][[c, i3, a]] as f64 * w.cores[0][[a, i1, b]] as f64;
                        }
                        k[[c, b]] = acc;
                    }
                }
                let mut out = Array1::<f64>::zeros(dims.n2);
                for j in 0..dims.n2 {
                    let mut acc = 0.0f64;
                    for b in 0..r2 {
                        for c in 0..r3 {
                            acc += w.cores[1][[b, j, c]] as f64 * k[[c, b]];
                        }
                    }
                    out[j] = acc;
                }
                out
            }
            Weights::Cp(w) => {
                let rank = w.rank();
                let mut coeff = Array1::<f64>::zeros(rank);
                for r in 0..rank {
                    coeff[r] = w.factors[0][[i1, r]] as f64 * w.factors[2][[i3, r]] as f64;
                }
                let mut out = Array1::<f64>::zeros(dims.n2);
                for j in 0..dims.n2 {
                    let mut acc = 0.0f64;
                    for r in 0..rank {
                        acc += w.factors[1][[j, r]] as f64 * coeff[r];
                    }
                    out[j] = acc;
                }
                out
            }
        })
    }

    /// Weight parameter count of this tensor.
    pub fn param_count(&self) -> usize {
        match self {
            Weights::Dense(w) => w.data.len(),
            Weights::Tr(w) => w.cores.iter().map(|c| c.len()).sum(),
            Weights::Cp(w) => w.factors.iter().map(|f| f.len()).sum(),
        }
    }

    /// Parameter tensors as flat slices, in declaration order (the checkpoint
    /// and optimizer ordering).
    pub fn param_slices(&self) -> Vec<&[f32]> {
        match self {
            Weights::Dense(w) => vec![w.data.as_slice().expect("standard layout")],
            Weights::Tr(w) => w.cores.iter().map(|c| c.as_slice().expect("standard layout")).collect(),
            Weights::Cp(w) => w.factors.iter().map(|f| f.as_slice().expect("standard layout")).collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Weights::Dense(w) => vec![w.data.as_slice_mut().expect("standard layout")],
            Weights::Tr(w) => {
                let [a, b, c] = &mut w.cores;
                vec![
                    a.as_slice_mut().expect("standard layout"),
                    b.as_slice_mut().expect("standard layout"),
                    c.as_slice_mut().expect("standard layout"),
                ]
            }
            Weights::Cp(w) => {
                let [a, b, c] = &mut w.factors;
                vec![
                    a.as_slice_mut().expect("standard layout"),
                    b.as_slice_mut().expect("standard layout"),
                    c.as_slice_mut().expect("standard layout"),
                ]
            }
        }
    }
}

/// Gradients with the same structure as a [`Weights`] value.
#[derive(Debug, Clone)]
pub enum WeightsGrad {
    Dense(Array3<f64>),
    Tr([Array3<f64>; 3]),
    Cp([Array2<f64>; 3]),
}

impl WeightsGrad {
    pub fn zeros_like(w: &Weights) -> Self {
        match w {
            Weights::Dense(d) => WeightsGrad::Dense(Array3::zeros(d.data.raw_dim())),
            Weights::Tr(t) => WeightsGrad::Tr([
                Array3::zeros(t.cores[0].raw_dim()),
                Array3::zeros(t.cores[1].raw_dim()),
                Array3::zeros(t.cores[2].raw_dim()),
            ]),
            Weights::Cp(c) => WeightsGrad::Cp([
                Array2::zeros(c.factors[0].raw_dim()),
                Array2::zeros(c.factors[1].raw_dim()),
                Array2::zeros(c.factors[2].raw_dim()),
            ]),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            WeightsGrad::Dense(a) => vec![a.as_slice().expect("standard layout")],
            WeightsGrad::Tr(cs) => cs.iter().map(|c| c.as_slice().expect("standard layout")).collect(),
            WeightsGrad::Cp(fs) => fs.iter().map(|f| f.as_slice().expect("standard layout")).collect(),
        }
    }
}

/// Token chunk size for the streaming contraction paths. Keeps rank-space
/// transients bounded independently of the evaluation batch size.
const CHUNK: usize = 256;

fn check_encoder_dims(w: &Weights, batch: &ActivationBatch) -> Result<Dims3> {
    let dims = w.dims();
    if dims.n1 != batch.dim() || dims.n3 != batch.layers() {
        return Err(Error::Dim(format!(
            "encoder tensor ({}, {}, {}) does not match batch (d = {}, L = {})",
            dims.n1,
            dims.n2,
            dims.n3,
            batch.dim(),
            batch.layers()
        )));
    }
    Ok(dims)
}

/// Linear part of the encoder map: `out[t, i] = sum_{l, j} W[j, i, l] * x[t, l, j]`
/// with `skip_layer` contributions zeroed when given. Never materializes the
/// dense tensor for factorized weights.
pub fn encoder_contract(w: &Weights, batch: &ActivationBatch, skip_layer: Option<usize>) -> Result<Array2<f64>> {
    let dims = check_encoder_dims(w, batch)?;
    if let Some(l) = skip_layer {
        if l >= dims.n3 {
            return Err(Error::Index(format!("skip layer {l} out of 0..{}", dims.n3)));
        }
    }
    let tokens = batch.tokens();
    let mut out = Array2::<f64>::zeros((tokens, dims.n2));
    let mut start = 0;
    while start < tokens {
        let end = (start + CHUNK).min(tokens);
        encode_chunk(w, batch, skip_layer, start, end, &mut out.slice_mut(s![start..end, ..]), None);
        start = end;
    }
    Ok(out)
}

/// Same contraction over the whole batch in one pass, additionally returning
/// the rank-space intermediates needed by the backward pass.
pub fn encoder_forward_cached(w: &Weights, batch: &ActivationBatch) -> Result<(Array2<f64>, EncCache)> {
    let dims = check_encoder_dims(w, batch)?;
    let tokens = batch.tokens();
    let mut out = Array2::<f64>::zeros((tokens, dims.n2));
    let mut cache = EncCache::prepare(w, tokens, dims.n3);
    encode_chunk(w, batch, None, 0, tokens, &mut out.slice_mut(s![.., ..]), Some(&mut cache));
    Ok((out, cache))
}

/// Rank-space intermediates of an encoder forward pass.
#[derive(Debug)]
pub enum EncCache {
    Dense,
    /// `h`: per (token, layer) grid of r1 x r2 blocks; `m`: per-token r3 x r2 blocks.
    Tr { h: Array2<f64>, m: Array2<f64> },
    /// `p`: per (token, layer) rank projections; `s`: layer-summed projections.
    Cp { p: Array2<f64>, s: Array2<f64> },
}

impl EncCache {
    fn prepare(w: &Weights, tokens: usize, layers: usize) -> Self {
        match w {
            Weights::Dense(_) => EncCache::Dense,
            Weights::Tr(t) => {
                let (r1, r2, r3) = t.ranks();
                EncCache::Tr {
                    h: Array2::zeros((tokens * layers, r1 * r2)),
                    m: Array2::zeros((tokens, r3 * r2)),
                }
            }
            Weights::Cp(c) => EncCache::Cp {
                p: Array2::zeros((tokens * layers, c.rank())),
                s: Array2::zeros((tokens, c.rank())),
            },
        }
    }
}

fn layer_slice_f64(batch: &ActivationBatch, layer: usize, start: usize, end: usize) -> Array2<f64> {
    batch.data().slice(s![start..end, layer, ..]).mapv(|v| v as f64)
}

fn encode_chunk(
    w: &Weights,
    batch: &ActivationBatch,
    skip_layer: Option<usize>,
    start: usize,
    end: usize,
    out: &mut ArrayViewMut2<f64>,
    mut cache: Option<&mut EncCache>,
) {
    let layers = batch.layers();
    let c = end - start;
    match w {
        Weights::Dense(dense) => {
            for l in 0..layers {
                if skip_layer == Some(l) {
                    continue;
                }
                let x = layer_slice_f64(batch, l, start, end);
                let e = dense.data.slice(s![.., .., l]).mapv(|v| v as f64);
                general_mat_mul(1.0, &x, &e, 1.0, out);
            }
        }
        Weights::Tr(tr) => {
            let (r1, r2, r3) = tr.ranks();
            let d = tr.dims().n1;
            // a[j, r1*R2 + r2] = g1[r1, j, r2]
            let a = Array2::from_shape_fn((d, r1 * r2), |(j, col)| {
                tr.cores[0][[col / r2, j, col % r2]] as f64
            });
            // p[r3*R2 + r2, i] = g2[r2, i, r3]
            let p = mid_core_matrix(&tr.cores[1]);
            let g3: Vec<Array2<f64>> = (0..layers)
                .map(|l| tr.cores[2].slice(s![.., l, ..]).mapv(|v| v as f64))
                .collect();

            let mut xc = Array2::<f64>::zeros((c * layers, d));
            for (row, t) in (start..end).enumerate() {
                for l in 0..layers {
                    if skip_layer == Some(l) {
                        continue;
                    }
                    let src = batch.data().slice(s![t, l, ..]);
                    let mut dst = xc.row_mut(row * layers + l);
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o = v as f64;
                    }
                }
            }
            let h = xc.dot(&a); // (c*L, r1*r2)
            let mut mmat = Array2::<f64>::zeros((c, r3 * r2));
            for t in 0..c {
                let mut mview = mmat
                    .row_mut(t)
                    .into_shape_with_order((r3, r2))
                    .expect("contiguous row");
                for l in 0..layers {
                    if skip_layer == Some(l) {
                        continue;
                    }
                    let hview = h
                        .row(t * layers + l)
                        .into_shape_with_order((r1, r2))
                        .expect("contiguous row");
                    general_mat_mul(1.0, &g3[l], &hview, 1.0, &mut mview);
                }
            }
            general_mat_mul(1.0, &mmat, &p, 1.0, out);
            if let Some(EncCache::Tr { h: ch, m: cm }) = cache.as_deref_mut() {
                ch.slice_mut(s![start * layers..end * layers, ..]).assign(&h);
                cm.slice_mut(s![start..end, ..]).assign(&mmat);
            }
        }
        Weights::Cp(cp) => {
            let rank = cp.rank();
            let d = cp.dims().n1;
            let wf = cp.factors[0].mapv(|v| v as f64); // (d, R)
            let uf = cp.factors[1].mapv(|v| v as f64); // (n2, R)
            let vf = cp.factors[2].mapv(|v| v as f64); // (L, R)

            let mut xc = Array2::<f64>::zeros((c * layers, d));
            for (row, t) in (start..end).enumerate() {
                for l in 0..layers {
                    if skip_layer == Some(l) {
                        continue;
                    }
                    let src = batch.data().slice(s![t, l, ..]);
                    let mut dst = xc.row_mut(row * layers + l);
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o = v as f64;
                    }
                }
            }
            let proj = xc.dot(&wf); // (c*L, R)
            let mut smat = Array2::<f64>::zeros((c, rank));
            for t in 0..c {
                let mut srow = smat.row_mut(t);
                for l in 0..layers {
                    if skip_layer == Some(l) {
                        continue;
                    }
                    let prow = proj.row(t * layers + l);
                    for r in 0..rank {
                        srow[r] += vf[[l, r]] * prow[r];
                    }
                }
            }
            general_mat_mul(1.0, &smat, &uf.t(), 1.0, out);
            if let Some(EncCache::Cp { p: cp_p, s: cp_s }) = cache.as_deref_mut() {
                cp_p.slice_mut(s![start * layers..end * layers, ..]).assign(&proj);
                cp_s.slice_mut(s![start..end, ..]).assign(&smat);
            }
        }
    }
}

/// Backward of [`encoder_forward_cached`] with cotangent `dpre` on the linear
/// output; returns gradients for the encoder parameters.
pub fn encoder_backward(
    w: &Weights,
    batch: &ActivationBatch,
    cache: &EncCache,
    dpre: &Array2<f64>,
) -> WeightsGrad {
    let layers = batch.layers();
    let tokens = batch.tokens();
    match (w, cache) {
        (Weights::Dense(dense), EncCache::Dense) => {
            let dims = dense.dims();
            let mut grad = Array3::<f64>::zeros((dims.n1, dims.n2, dims.n3));
            for l in 0..layers {
                let x = layer_slice_f64(batch, l, 0, tokens);
                let mut g = grad.slice_mut(s![.., .., l]);
                general_mat_mul(1.0, &x.t(), dpre, 1.0, &mut g);
            }
            WeightsGrad::Dense(grad)
        }
        (Weights::Tr(tr), EncCache::Tr { h, m }) => {
            let (r1, r2, r3) = tr.ranks();
            let d = tr.dims().n1;
            let g3: Vec<Array2<f64>> = (0..layers)
                .map(|l| tr.cores[2].slice(s![.., l, ..]).mapv(|v| v as f64))
                .collect();

            // dG2[r2, i, r3] = sum_t dpre[t, i] * m[t, r3*R2 + r2]
            let dmid = dpre.t().dot(m); // (n2, r3*r2)
            let n2 = tr.dims().n2;
            let mut dg2 = Array3::<f64>::zeros((r2, n2, r3));
            for i in 0..n2 {
                for c3 in 0..r3 {
                    for b in 0..r2 {
                        dg2[[b, i, c3]] = dmid[[i, c3 * r2 + b]];
                    }
                }
            }

            // dM[t, r3*R2 + r2] = sum_i dpre[t, i] * g2[r2, i, r3]
            let p = mid_core_matrix(&tr.cores[1]); // (r3*r2, n2)
            let dm = dpre.dot(&p.t()); // (tokens, r3*r2)

            let mut dg3 = Array3::<f64>::zeros((r3, layers, r1));
            let mut dh = Array2::<f64>::zeros((tokens * layers, r1 * r2));
            for t in 0..tokens {
                let dmv = dm.row(t).into_shape_with_order((r3, r2)).expect("contiguous");
                for l in 0..layers {
                    let hv = h
                        .row(t * layers + l)
                        .into_shape_with_order((r1, r2))
                        .expect("contiguous");
                    // dG3(l) += dM_t . H_tl^T
                    let mut dg3v = dg3.slice_mut(s![.., l, ..]);
                    general_mat_mul(1.0, &dmv, &hv.t(), 1.0, &mut dg3v);
                    // dH_tl = G3(l)^T . dM_t
                    let mut dhv = dh
                        .row_mut(t * layers + l)
                        .into_shape_with_order((r1, r2))
                        .expect("contiguous");
                    general_mat_mul(1.0, &g3[l].t(), &dmv, 1.0, &mut dhv);
                }
            }

            // dA = X^T . dH, then scatter back to core layout.
            let mut xc = Array2::<f64>::zeros((tokens * layers, d));
            for t in 0..tokens {
                for l in 0..layers {
                    let src = batch.data().slice(s![t, l, ..]);
                    let mut dst = xc.row_mut(t * layers + l);
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o = v as f64;
                    }
                }
            }
            let da = xc.t().dot(&dh); // (d, r1*r2)
            let mut dg1 = Array3::<f64>::zeros((r1, d, r2));
            for j in 0..d {
                for a in 0..r1 {
                    for b in 0..r2 {
                        dg1[[a, j, b]] = da[[j, a * r2 + b]];
                    }
                }
            }
            WeightsGrad::Tr([dg1, dg2, dg3])
        }
        (Weights::Cp(cp), EncCache::Cp { p, s }) => {
            let rank = cp.rank();
            let d = cp.dims().n1;
            let uf = cp.factors[1].mapv(|v| v as f64);
            let vf = cp.factors[2].mapv(|v| v as f64);

            let du = dpre.t().dot(s); // (n2, R)
            let ds = dpre.dot(&uf); // (tokens, R)

            let mut dv = Array2::<f64>::zeros((layers, rank));
            let mut dp = Array2::<f64>::zeros((tokens * layers, rank));
            for t in 0..tokens {
                let dsrow = ds.row(t);
                for l in 0..layers {
                    let prow = p.row(t * layers + l);
                    let mut dprow = dp.row_mut(t * layers + l);
                    for r in 0..rank {
                        dv[[l, r]] += dsrow[r] * prow[r];
                        dprow[r] = dsrow[r] * vf[[l, r]];
                    }
                }
            }

            let mut xc = Array2::<f64>::zeros((tokens * layers, d));
            for t in 0..tokens {
                for l in 0..layers {
                    let src = batch.data().slice(s![t, l, ..]);
                    let mut dst = xc.row_mut(t * layers + l);
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o = v as f64;
                    }
                }
            }
            let dw = xc.t().dot(&dp); // (d, R)
            WeightsGrad::Cp([dw, du, dv])
        }
        _ => unreachable!("cache variant does not match weights variant"),
    }
}

// p[r3*R2 + r2, i] = core[r2, i, r3] for the middle core of a ring.
fn mid_core_matrix(core: &Array3<f32>) -> Array2<f64> {
    let (r2, n, r3) = (core.shape()[0], core.shape()[1], core.shape()[2]);
    Array2::from_shape_fn((r3 * r2, n), |(row, i)| core[[row % r2, i, row / r2]] as f64)
}

fn check_decoder_dims(w: &Weights, layers: usize) -> Result<Dims3> {
    let dims = w.dims();
    if dims.n3 != layers {
        return Err(Error::Dim(format!(
            "decoder tensor has {} layers, expected {layers}",
            dims.n3
        )));
    }
    Ok(dims)
}

/// Apply a decoder to one token's sparse entries at one layer:
/// `sum_{(i, z)} z * fiber_mode2(i, layer)`, touching only active latents.
pub fn decoder_apply(w: &Weights, entries: &[(u32, f64)], layer: usize) -> Result<Array1<f64>> {
    let dims = w.dims();
    if layer >= dims.n3 {
        return Err(Error::Index(format!("layer {layer} out of 0..{}", dims.n3)));
    }
    if let Some(&(i, _)) = entries.iter().find(|&&(i, _)| (i as usize) >= dims.n1) {
        return Err(Error::Index(format!("latent {i} out of 0..{}", dims.n1)));
    }
    let mut out = Array1::<f64>::zeros(dims.n2);
    match w {
        Weights::Dense(dense) => {
            for &(i, z) in entries {
                let fiber = dense.data.slice(s![i as usize, .., layer]);
                for (o, &v) in out.iter_mut().zip(fiber.iter()) {
                    *o += z * v as f64;
                }
            }
        }
        Weights::Tr(tr) => {
            let (r1, r2, r3) = tr.ranks();
            // Q = sum_i z_i * g1[:, i, :], shared across the fiber sum.
            let mut q = Array2::<f64>::zeros((r1, r2));
            for &(i, z) in entries {
                let slice = tr.cores[0].slice(s![.., i as usize, ..]);
                for a in 0..r1 {
                    for b in 0..r2 {
                        q[[a, b]] += z * slice[[a, b]] as f64;
                    }
                }
            }
            let g3 = tr.cores[2].slice(s![.., layer, ..]).mapv(|v| v as f64); // (r3, r1)
            let k = g3.dot(&q); // (r3, r2)
            for j in 0..dims.n2 {
                let mut acc = 0.0f64;
                for b in 0..r2 {
                    for c in 0..r3 {
                        acc += tr.cores[1][[b, j, c]] as f64 * k[[c, b]];
                    }
                }
                out[j] = acc;
            }
        }
        Weights::Cp(cp) => {
            let rank = cp.rank();
            let mut q = vec![0.0f64; rank];
            for &(i, z) in entries {
                for r in 0..rank {
                    q[r] += z * cp.factors[0][[i as usize, r]] as f64;
                }
            }
            for r in 0..rank {
                q[r] *= cp.factors[2][[layer, r]] as f64;
            }
            for j in 0..dims.n2 {
                let mut acc = 0.0f64;
                for r in 0..rank {
                    acc += cp.factors[1][[j, r]] as f64 * q[r];
                }
                out[j] = acc;
            }
        }
    }
    Ok(out)
}

/// Rank-space intermediates of a batched decode.
#[derive(Debug)]
pub enum DecCache {
    Dense,
    Tr { q: Array2<f64>, c: Array2<f64> },
    Cp { q: Array2<f64>, y: Array2<f64> },
}

/// Decode a whole sparse code into `(T, L, n2)` reconstructions (bias not
/// included), sharing per-token rank-space work across layers.
pub fn decode_batch(w: &Weights, code: &SparseCode, layers: usize) -> Result<(Array3<f64>, DecCache)> {
    let dims = check_decoder_dims(w, layers)?;
    let tokens = code.tokens();
    let mut out = Array3::<f64>::zeros((tokens, layers, dims.n2));
    let cache = match w {
        Weights::Dense(dense) => {
            for t in 0..tokens {
                for &(i, z) in code.token(t) {
                    if i as usize >= dims.n1 {
                        return Err(Error::Index(format!("latent {i} out of 0..{}", dims.n1)));
                    }
                    for l in 0..layers {
                        let fiber = dense.data.slice(s![i as usize, .., l]);
                        let mut row = out.slice_mut(s![t, l, ..]);
                        for (o, &v) in row.iter_mut().zip(fiber.iter()) {
                            *o += z * v as f64;
                        }
                    }
                }
            }
            DecCache::Dense
        }
        Weights::Tr(tr) => {
            let (r1, r2, r3) = tr.ranks();
            let g3: Vec<Array2<f64>> = (0..layers)
                .map(|l| tr.cores[2].slice(s![.., l, ..]).mapv(|v| v as f64))
                .collect();
            let g2p = mid_core_matrix(&tr.cores[1]); // (r3*r2, n2)

            let mut q = Array2::<f64>::zeros((tokens, r1 * r2));
            for t in 0..tokens {
                let mut qv = q.row_mut(t).into_shape_with_order((r1, r2)).expect("contiguous");
                for &(i, z) in code.token(t) {
                    if i as usize >= dims.n1 {
                        return Err(Error::Index(format!("latent {i} out of 0..{}", dims.n1)));
                    }
                    let slice = tr.cores[0].slice(s![.., i as usize, ..]);
                    for a in 0..r1 {
                        for b in 0..r2 {
                            qv[[a, b]] += z * slice[[a, b]] as f64;
                        }
                    }
                }
            }
            let mut cmat = Array2::<f64>::zeros((tokens * layers, r3 * r2));
            for t in 0..tokens {
                let qv = q.row(t).into_shape_with_order((r1, r2)).expect("contiguous");
                for l in 0..layers {
                    let mut cv = cmat
                        .row_mut(t * layers + l)
                        .into_shape_with_order((r3, r2))
                        .expect("contiguous");
                    general_mat_mul(1.0, &g3[l], &qv, 0.0, &mut cv);
                }
            }
            let flat = cmat.dot(&g2p); // (T*L, n2)
            out.assign(
                &flat
                    .into_shape_with_order((tokens, layers, dims.n2))
                    .expect("contiguous"),
            );
            DecCache::Tr { q, c: cmat }
        }
        Weights::Cp(cp) => {
            let rank = cp.rank();
            let vf = cp.factors[2].mapv(|v| v as f64);
            let wf = cp.factors[1].mapv(|v| v as f64); // (n2, R)

            let mut q = Array2::<f64>::zeros((tokens, rank));
            for t in 0..tokens {
                let mut qrow = q.row_mut(t);
                for &(i, z) in code.token(t) {
                    if i as usize >= dims.n1 {
                        return Err(Error::Index(format!("latent {i} out of 0..{}", dims.n1)));
                    }
                    for r in 0..rank {
                        qrow[r] += z * cp.factors[0][[i as usize, r]] as f64;
                    }
                }
            }
            let mut y = Array2::<f64>::zeros((tokens * layers, rank));
            for t in 0..tokens {
                let qrow = q.row(t);
                for l in 0..layers {
                    let mut yrow = y.row_mut(t * layers + l);
                    for r in 0..rank {
                        yrow[r] = qrow[r] * vf[[l, r]];
                    }
                }
            }
            let flat = y.dot(&wf.t()); // (T*L, n2)
            out.assign(
                &flat
                    .into_shape_with_order((tokens, layers, dims.n2))
                    .expect("contiguous"),
            );
            DecCache::Cp { q, y }
        }
    };
    Ok((out, cache))
}

/// Backward of [`decode_batch`]: given the cotangent on the reconstructions,
/// produce decoder parameter gradients and the cotangent on each sparse code
/// entry (aligned with [`SparseCode::entries`]).
pub fn decoder_backward(
    w: &Weights,
    code: &SparseCode,
    cache: &DecCache,
    dresid: &Array3<f64>,
) -> (WeightsGrad, Vec<f64>) {
    let dims = w.dims();
    let tokens = code.tokens();
    let layers = dims.n3;
    let mut dz = vec![0.0f64; code.total_active()];
    let grad = match (w, cache) {
        (Weights::Dense(dense), DecCache::Dense) => {
            let mut dd = Array3::<f64>::zeros((dims.n1, dims.n2, dims.n3));
            let mut pos = 0;
            for t in 0..tokens {
                for &(i, z) in code.token(t) {
                    let mut acc = 0.0f64;
                    for l in 0..layers {
                        let g = dresid.slice(s![t, l, ..]);
                        let fiber = dense.data.slice(s![i as usize, .., l]);
                        let mut dfiber = dd.slice_mut(s![i as usize, .., l]);
                        for ((df, &gv), &fv) in dfiber.iter_mut().zip(g.iter()).zip(fiber.iter()) {
                            *df += z * gv;
                            acc += gv * fv as f64;
                        }
                    }
                    dz[pos] = acc;
                    pos += 1;
                }
            }
            WeightsGrad::Dense(dd)
        }
        (Weights::Tr(tr), DecCache::Tr { q, c }) => {
            let (r1, r2, r3) = tr.ranks();
            let g3: Vec<Array2<f64>> = (0..layers)
                .map(|l| tr.cores[2].slice(s![.., l, ..]).mapv(|v| v as f64))
                .collect();
            let g2p = mid_core_matrix(&tr.cores[1]); // (r3*r2, n2)
            let flat = dresid
                .view()
                .into_shape_with_order((tokens * layers, dims.n2))
                .expect("contiguous");

            // dG2 via the same (r3*r2, n2) layout used forward.
            let dmid = flat.t().dot(c); // (n2, r3*r2)
            let mut dg2 = Array3::<f64>::zeros((r2, dims.n2, r3));
            for j in 0..dims.n2 {
                for c3 in 0..r3 {
                    for b in 0..r2 {
                        dg2[[b, j, c3]] = dmid[[j, c3 * r2 + b]];
                    }
                }
            }

            let dc = flat.dot(&g2p.t()); // (T*L, r3*r2)
            let mut dg3 = Array3::<f64>::zeros((r3, layers, r1));
            let mut dq = Array2::<f64>::zeros((tokens, r1 * r2));
            for t in 0..tokens {
                let qv = q.row(t).into_shape_with_order((r1, r2)).expect("contiguous");
                let mut dqv = dq
                    .row_mut(t)
                    .into_shape_with_order((r1, r2))
                    .expect("contiguous");
                for l in 0..layers {
                    let dcv = dc
                        .row(t * layers + l)
                        .into_shape_with_order((r3, r2))
                        .expect("contiguous");
                    let mut dg3v = dg3.slice_mut(s![.., l, ..]);
                    general_mat_mul(1.0, &dcv, &qv.t(), 1.0, &mut dg3v);
                    general_mat_mul(1.0, &g3[l].t(), &dcv, 1.0, &mut dqv);
                }
            }

            let mut dg1 = Array3::<f64>::zeros((r1, dims.n1, r2));
            let mut pos = 0;
            for t in 0..tokens {
                let dqv = dq.row(t).into_shape_with_order((r1, r2)).expect("contiguous");
                for &(i, z) in code.token(t) {
                    let slice = tr.cores[0].slice(s![.., i as usize, ..]);
                    let mut acc = 0.0f64;
                    for a in 0..r1 {
                        for b in 0..r2 {
                            dg1[[a, i as usize, b]] += z * dqv[[a, b]];
                            acc += slice[[a, b]] as f64 * dqv[[a, b]];
                        }
                    }
                    dz[pos] = acc;
                    pos += 1;
                }
            }
            WeightsGrad::Tr([dg1, dg2, dg3])
        }
        (Weights::Cp(cp), DecCache::Cp { q, y }) => {
            let rank = cp.rank();
            let vf = cp.factors[2].mapv(|v| v as f64);
            let wf = cp.factors[1].mapv(|v| v as f64);
            let flat = dresid
                .view()
                .into_shape_with_order((tokens * layers, dims.n2))
                .expect("contiguous");

            let dwf = flat.t().dot(y); // (n2, R)
            let dy = flat.dot(&wf); // (T*L, R)

            let mut dvf = Array2::<f64>::zeros((layers, rank));
            let mut dq = Array2::<f64>::zeros((tokens, rank));
            for t in 0..tokens {
                let qrow = q.row(t);
                let mut dqrow = dq.row_mut(t);
                for l in 0..layers {
                    let dyrow = dy.row(t * layers + l);
                    for r in 0..rank {
                        dvf[[l, r]] += dyrow[r] * qrow[r];
                        dqrow[r] += dyrow[r] * vf[[l, r]];
                    }
                }
            }

            let mut duf = Array2::<f64>::zeros((dims.n1, rank));
            let mut pos = 0;
            for t in 0..tokens {
                let dqrow = dq.row(t);
                for &(i, z) in code.token(t) {
                    let mut acc = 0.0f64;
                    for r in 0..rank {
                        duf[[i as usize, r]] += z * dqrow[r];
                        acc += cp.factors[0][[i as usize, r]] as f64 * dqrow[r];
                    }
                    dz[pos] = acc;
                    pos += 1;
                }
            }
            WeightsGrad::Cp([duf, dwf, dvf])
        }
        _ => unreachable!("cache variant does not match weights variant"),
    };
    (grad, dz)
}
