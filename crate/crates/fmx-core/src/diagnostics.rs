//! Coherence diagnostics and reconstruction metrics.
//!
//! Norm coherence scores how evenly a latent's decoder weight mass spreads
//! over layers; functional coherence scores how evenly its activation depends
//! on the layers, measured by zeroing one layer of the input at a time. Both
//! range from 1 (all mass / dependence on a single layer) to `L`.

use ndarray::{s, Array2};

use crate::code::SparseCode;
use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::model::{CrosscoderModel, SparsifyMode};

/// Numerical-stability constant in the sensitivity denominator.
pub const SENSITIVITY_EPS: f64 = 1e-8;

/// Per-latent coherence summary.
#[derive(Debug, Clone)]
pub struct CoherenceReport {
    /// Per-layer decoder fiber norms, `(d_sae, L)`.
    pub norm: Array2<f64>,
    /// Per-layer sensitivities, `(d_sae, L)`.
    pub sensitivity: Array2<f64>,
    /// Norm coherence per latent; `None` when every fiber is zero.
    pub c_n: Vec<Option<f64>>,
    /// Functional coherence per latent; `None` for latents never active on
    /// the evaluation set (or with zero sensitivity everywhere).
    pub c_f: Vec<Option<f64>>,
    /// Tokens on which each latent was active in the unmasked pass.
    pub active_counts: Vec<usize>,
}

impl CoherenceReport {
    pub fn mean_c_n(&self) -> Option<f64> {
        mean_defined(&self.c_n)
    }

    pub fn mean_c_f(&self) -> Option<f64> {
        mean_defined(&self.c_f)
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

// sum / max of a nonnegative row; None when the max is zero.
fn coherence_ratio(row: &[f64]) -> Option<f64> {
    let max = row.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        None
    } else {
        Some(row.iter().sum::<f64>() / max)
    }
}

/// Decoder-norm matrix `N[i, l] = ||decoder fiber(i, l)||_2` and the per-latent
/// norm coherence `sum_l N / max_l N`.
pub fn norm_coherence(model: &CrosscoderModel) -> Result<(Array2<f64>, Vec<Option<f64>>)> {
    let dims = model.dims();
    let mut norm = Array2::<f64>::zeros((dims.d_sae, dims.layers));
    for i in 0..dims.d_sae {
        for l in 0..dims.layers {
            let fiber = model.decoder().fiber_mode2(i, l)?;
            norm[[i, l]] = fiber.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    let c_n = (0..dims.d_sae)
        .map(|i| coherence_ratio(norm.row(i).as_slice().expect("contiguous row")))
        .collect();
    Ok((norm, c_n))
}

/// Sensitivity matrix `S[i, l]`: mean over tokens with `z_i > 0` of the
/// relative activation change when layer `l` is zeroed at the input. Also
/// returns the per-latent active-token counts of the unmasked pass.
pub fn layer_sensitivity(
    model: &CrosscoderModel,
    data: &ActivationBatch,
    mode: SparsifyMode,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if data.tokens() == 0 {
        return Err(Error::Data("layer sensitivity needs a nonempty evaluation set".into()));
    }
    let dims = model.dims();
    let clean = model.encode(data, mode, None)?;
    let active_counts = clean.active_counts(dims.d_sae);

    let mut sums = Array2::<f64>::zeros((dims.d_sae, dims.layers));
    for l in 0..dims.layers {
        let ablated = model.encode(data, mode, Some(l))?;
        accumulate_sensitivity(&clean, &ablated, l, &mut sums);
    }
    for i in 0..dims.d_sae {
        if active_counts[i] > 0 {
            let c = active_counts[i] as f64;
            sums.row_mut(i).mapv_inplace(|v| v / c);
        }
    }
    Ok((sums, active_counts))
}

fn accumulate_sensitivity(
    clean: &SparseCode,
    ablated: &SparseCode,
    layer: usize,
    sums: &mut Array2<f64>,
) {
    for t in 0..clean.tokens() {
        let base = clean.token(t);
        let masked = ablated.token(t);
        // Merge walk over two index-sorted rows; only clean-active latents
        // qualify (the ratio is anchored on the unmasked activation).
        let mut mi = 0;
        for &(i, z) in base {
            while mi < masked.len() && masked[mi].0 < i {
                mi += 1;
            }
            let z_masked = if mi < masked.len() && masked[mi].0 == i { masked[mi].1 } else { 0.0 };
            sums[[i as usize, layer]] += (z - z_masked).abs() / (z + SENSITIVITY_EPS);
        }
    }
}

/// Functional coherence from a sensitivity matrix: `sum_l S / max_l S` per
/// latent, undefined for latents that never qualified.
pub fn functional_coherence(
    sensitivity: &Array2<f64>,
    active_counts: &[usize],
) -> Vec<Option<f64>> {
    (0..sensitivity.nrows())
        .map(|i| {
            if active_counts[i] == 0 {
                None
            } else {
                coherence_ratio(sensitivity.row(i).as_slice().expect("contiguous row"))
            }
        })
        .collect()
}

/// Full coherence report: decoder norms plus masked-input sensitivities.
pub fn coherence_report(
    model: &CrosscoderModel,
    data: &ActivationBatch,
    mode: SparsifyMode,
) -> Result<CoherenceReport> {
    let (norm, c_n) = norm_coherence(model)?;
    let (sensitivity, active_counts) = layer_sensitivity(model, data, mode)?;
    let c_f = functional_coherence(&sensitivity, &active_counts);
    Ok(CoherenceReport { norm, sensitivity, c_n, c_f, active_counts })
}

/// Histogram with `bins` equal-width bins over `[lo, hi]`; values outside the
/// range clamp to the edge bins.
pub fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let mut idx = if width > 0.0 { ((v - lo) / width).floor() as i64 } else { 0 };
        idx = idx.clamp(0, bins as i64 - 1);
        counts[idx as usize] += 1;
    }
    counts
}

/// Per-layer reconstruction error summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecon {
    /// Mean over tokens of `||x - x_hat||^2 / d`.
    pub mse_per_dim: f64,
    /// Mean over tokens of `||x - x_hat||^2`.
    pub mse_raw: f64,
}

/// Reconstruction metrics over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconMetrics {
    /// Mean over (token, layer) of `||x - x_hat||^2 / d`.
    pub mse_per_dim: f64,
    /// Same without the per-dimension normalization.
    pub mse_raw: f64,
    /// Pooled explained variance; `None` on zero-variance data.
    pub ev: Option<f64>,
    /// Mean cosine similarity between raw `x` and `x_hat`; pairs where either
    /// vector is zero are skipped. `None` if every pair was skipped.
    pub cs: Option<f64>,
    pub per_layer: Vec<LayerRecon>,
}

/// Compute MSE / EV / CS streaming over token chunks (reconstructions are
/// never materialized for the whole set at once).
pub fn recon_metrics(
    model: &CrosscoderModel,
    data: &ActivationBatch,
    mode: SparsifyMode,
) -> Result<ReconMetrics> {
    if data.tokens() == 0 {
        return Err(Error::Data("reconstruction metrics need a nonempty evaluation set".into()));
    }
    let dims = model.dims();
    let tokens = data.tokens();
    let layers = dims.layers;
    let means = data.layer_means();

    // Selection runs over the full evaluation set, then decoding streams.
    let code = model.encode(data, mode, None)?;

    let mut err = vec![0.0f64; layers];
    let mut dev = vec![0.0f64; layers];
    let mut cs_sum = 0.0f64;
    let mut cs_count = 0usize;

    const EVAL_CHUNK: usize = 2048;
    let mut start = 0;
    while start < tokens {
        let end = (start + EVAL_CHUNK).min(tokens);
        let chunk_code = code.slice_tokens(start, end);
        let recon = {
            let (mut r, _) = crate::weights::decode_batch(model.decoder(), &chunk_code, layers)?;
            for t in 0..end - start {
                for l in 0..layers {
                    let mut row = r.slice_mut(s![t, l, ..]);
                    for (v, &b) in row.iter_mut().zip(model.b_dec().row(l).iter()) {
                        *v += b as f64;
                    }
                }
            }
            r
        };
        for (t_local, t) in (start..end).enumerate() {
            for l in 0..layers {
                let x = data.data().slice(s![t, l, ..]);
                let xh = recon.slice(s![t_local, l, ..]);
                let mut e = 0.0f64;
                let mut dv = 0.0f64;
                let mut dot = 0.0f64;
                let mut nx = 0.0f64;
                let mut nxh = 0.0f64;
                for j in 0..dims.d {
                    let xi = x[j] as f64;
                    let xhi = xh[j];
                    let r = xi - xhi;
                    e += r * r;
                    let c = xi - means[[l, j]];
                    dv += c * c;
                    dot += xi * xhi;
                    nx += xi * xi;
                    nxh += xhi * xhi;
                }
                err[l] += e;
                dev[l] += dv;
                if nx > 0.0 && nxh > 0.0 {
                    cs_sum += dot / (nx.sqrt() * nxh.sqrt());
                    cs_count += 1;
                }
            }
        }
        start = end;
    }

    let per_layer: Vec<LayerRecon> = err
        .iter()
        .map(|&e| LayerRecon {
            mse_per_dim: e / (tokens as f64 * dims.d as f64),
            mse_raw: e / tokens as f64,
        })
        .collect();
    let total_err: f64 = err.iter().sum();
    let total_dev: f64 = dev.iter().sum();
    let denom = (tokens * layers) as f64;
    Ok(ReconMetrics {
        mse_per_dim: total_err / (denom * dims.d as f64),
        mse_raw: total_err / denom,
        ev: if total_dev > 0.0 { Some(1.0 - total_err / total_dev) } else { None },
        cs: if cs_count > 0 { Some(cs_sum / cs_count as f64) } else { None },
        per_layer,
    })
}
