//! Synthetic multi-layer activations with planted features.
//!
//! Each planted feature owns a set of layers (its support), a unit direction
//! per support layer, a firing probability, and a log-normal magnitude
//! distribution. A firing feature writes `magnitude * direction` into every
//! layer of its support; isotropic Gaussian noise is added on top. The firing
//! record doubles as the recovery oracle for trained dictionaries.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::code::SparseCode;
use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::model::{CrosscoderModel, SparsifyMode};

/// How a multi-layer feature picks its per-layer directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionPolicy {
    /// One direction shared by every layer in the support.
    Shared,
    /// A fresh direction per support layer.
    Independent,
}

#[derive(Debug, Clone)]
pub struct PlantedFeature {
    /// Sorted layer indices this feature writes to.
    pub support: Vec<usize>,
    /// Unit direction per support layer.
    pub directions: Vec<Array1<f32>>,
    pub fire_prob: f64,
    /// Log-normal magnitude parameters.
    pub magnitude_mu: f64,
    pub magnitude_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub d: usize,
    pub layers: usize,
    pub features: Vec<PlantedFeature>,
    pub noise_sigma: f64,
    /// When set, tokens are labeled 1 iff this feature fired.
    pub concept_feature: Option<usize>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (f, feat) in self.features.iter().enumerate() {
            if feat.support.is_empty() {
                return Err(Error::Config(format!("feature {f} has empty layer support")));
            }
            if feat.support.iter().any(|&l| l >= self.layers) {
                return Err(Error::Config(format!("feature {f} support exceeds layer count")));
            }
            if feat.support.len() != feat.directions.len() {
                return Err(Error::Config(format!(
                    "feature {f} has {} directions for {} support layers",
                    feat.directions.len(),
                    feat.support.len()
                )));
            }
            if !(feat.fire_prob > 0.0 && feat.fire_prob < 1.0) {
                return Err(Error::Config(format!("feature {f} firing probability must be in (0, 1)")));
            }
            for dir in &feat.directions {
                if dir.len() != self.d {
                    return Err(Error::Config(format!("feature {f} direction length != d")));
                }
                let norm: f64 = dir.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(Error::Config(format!("feature {f} direction norm {norm} != 1")));
                }
            }
        }
        if let Some(c) = self.concept_feature {
            if c >= self.features.len() {
                return Err(Error::Config(format!("concept feature {c} out of range")));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }
}

/// Knobs for sampling a [`SynthSpec`] with a mix of single-layer and
/// multi-layer features.
#[derive(Debug, Clone)]
pub struct SynthSampleConfig {
    pub d: usize,
    pub layers: usize,
    pub n_single_layer: usize,
    pub n_cross_layer: usize,
    /// Support size of each cross-layer feature.
    pub cross_support: usize,
    pub policy: DirectionPolicy,
    pub fire_prob: f64,
    pub magnitude_sigma: f64,
    pub noise_sigma: f64,
    /// Designate feature 0 as the labeling concept.
    pub concept_label: bool,
}

impl Default for SynthSampleConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 8,
            n_single_layer: 32,
            n_cross_layer: 32,
            cross_support: 4,
            policy: DirectionPolicy::Shared,
            fire_prob: 0.08,
            magnitude_sigma: 0.5,
            noise_sigma: 0.05,
            concept_label: true,
        }
    }
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Array1<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("unit sigma");
    loop {
        let v = Array1::from_shape_simple_fn(d, || normal.sample(rng));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.mapv(|x| (x / norm) as f32);
        }
    }
}

/// Sample a spec: single-layer features on rotating layers, cross-layer
/// features on random supports of the configured size.
pub fn sample_spec(cfg: &SynthSampleConfig, rng: &mut ChaCha8Rng) -> Result<SynthSpec> {
    if cfg.cross_support == 0 || cfg.cross_support > cfg.layers {
        return Err(Error::Config(format!(
            "cross-layer support {} must lie in 1..={}",
            cfg.cross_support, cfg.layers
        )));
    }
    let mut features = Vec::with_capacity(cfg.n_single_layer + cfg.n_cross_layer);
    for f in 0..cfg.n_single_layer {
        let layer = f % cfg.layers;
        features.push(PlantedFeature {
            support: vec![layer],
            directions: vec![unit_direction(cfg.d, rng)],
            fire_prob: cfg.fire_prob,
            magnitude_mu: 0.0,
            magnitude_sigma: cfg.magnitude_sigma,
        });
    }
    for _ in 0..cfg.n_cross_layer {
        let mut layers: Vec<usize> = (0..cfg.layers).collect();
        for i in (1..layers.len()).rev() {
            let j = rng.random_range(0..=i);
            layers.swap(i, j);
        }
        let mut support = layers[..cfg.cross_support].to_vec();
        support.sort_unstable();
        let directions = match cfg.policy {
            DirectionPolicy::Shared => {
                let dir = unit_direction(cfg.d, rng);
                vec![dir; cfg.cross_support]
            }
            DirectionPolicy::Independent => {
                (0..cfg.cross_support).map(|_| unit_direction(cfg.d, rng)).collect()
            }
        };
        features.push(PlantedFeature {
            support,
            directions,
            fire_prob: cfg.fire_prob,
            magnitude_mu: 0.0,
            magnitude_sigma: cfg.magnitude_sigma,
        });
    }
    let spec = SynthSpec {
        d: cfg.d,
        layers: cfg.layers,
        features,
        noise_sigma: cfg.noise_sigma,
        concept_feature: if cfg.concept_label { Some(0) } else { None },
    };
    spec.validate()?;
    Ok(spec)
}

/// Generate `tokens` activations plus the firing record (`tokens x features`
/// magnitudes, zero when silent). Deterministic given (spec, tokens, rng seed).
pub fn generate(
    spec: &SynthSpec,
    tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ActivationBatch, Array2<f64>)> {
    spec.validate()?;
    let mut data = Array3::<f32>::zeros((tokens, spec.layers, spec.d));
    let mut firing = Array2::<f64>::zeros((tokens, spec.n_features()));
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0f64, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    for t in 0..tokens {
        for (f, feat) in spec.features.iter().enumerate() {
            if rng.random::<f64>() >= feat.fire_prob {
                continue;
            }
            let magnitude = LogNormal::new(feat.magnitude_mu, feat.magnitude_sigma)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(rng);
            firing[[t, f]] = magnitude;
            for (pos, &layer) in feat.support.iter().enumerate() {
                let dir = &feat.directions[pos];
                let mut row = data.slice_mut(s![t, layer, ..]);
                for (v, &u) in row.iter_mut().zip(dir.iter()) {
                    *v += (magnitude * u as f64) as f32;
                }
            }
        }
        if let Some(dist) = &noise {
            for l in 0..spec.layers {
                let mut row = data.slice_mut(s![t, l, ..]);
                for v in row.iter_mut() {
                    *v += dist.sample(rng) as f32;
                }
            }
        }
    }

    let labels = spec.concept_feature.map(|c| {
        (0..tokens).map(|t| u8::from(firing[[t, c]] > 0.0)).collect::<Vec<u8>>()
    });
    let batch = ActivationBatch::new(data, labels)?;
    Ok((batch, firing))
}

/// One planted feature's best-matching latent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatch {
    pub feature: usize,
    pub latent: usize,
    /// Absolute Pearson correlation between the planted firing magnitudes and
    /// the matched latent's activations.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub matches: Vec<FeatureMatch>,
    pub mean_correlation: f64,
}

/// Greedy one-to-one matching of planted features to latents by absolute
/// Pearson correlation over the batch. Index-free: permuting latents permutes
/// the matches but not the correlations.
pub fn match_features(code: &SparseCode, d_sae: usize, firing: &Array2<f64>) -> Result<RecoveryReport> {
    let tokens = code.tokens();
    if firing.nrows() != tokens {
        return Err(Error::Dim(format!(
            "firing record has {} rows, code has {tokens} tokens",
            firing.nrows()
        )));
    }
    let n_features = firing.ncols();
    if tokens == 0 || n_features == 0 {
        return Err(Error::Data("empty recovery problem".into()));
    }

    // Moment accumulators; activations are sparse, firings nearly so.
    let mut z_sum = vec![0.0f64; d_sae];
    let mut z_sq = vec![0.0f64; d_sae];
    let mut f_sum = vec![0.0f64; n_features];
    let mut f_sq = vec![0.0f64; n_features];
    let mut cross = Array2::<f64>::zeros((n_features, d_sae));
    for t in 0..tokens {
        for &(i, z) in code.token(t) {
            z_sum[i as usize] += z;
            z_sq[i as usize] += z * z;
        }
        for f in 0..n_features {
            let m = firing[[t, f]];
            if m != 0.0 {
                f_sum[f] += m;
                f_sq[f] += m * m;
                for &(i, z) in code.token(t) {
                    cross[[f, i as usize]] += m * z;
                }
            }
        }
    }

    let n = tokens as f64;
    let corr = |f: usize, i: usize| -> f64 {
        let cov = cross[[f, i]] - f_sum[f] * z_sum[i] / n;
        let var_f = f_sq[f] - f_sum[f] * f_sum[f] / n;
        let var_z = z_sq[i] - z_sum[i] * z_sum[i] / n;
        if var_f <= 0.0 || var_z <= 0.0 {
            0.0
        } else {
            (cov / (var_f.sqrt() * var_z.sqrt())).abs()
        }
    };

    let mut feature_done = vec![false; n_features];
    let mut latent_done = vec![false; d_sae];
    let mut matches = Vec::with_capacity(n_features);
    for _ in 0..n_features.min(d_sae) {
        let mut best: Option<(f64, usize, usize)> = None;
        for f in 0..n_features {
            if feature_done[f] {
                continue;
            }
            for i in 0..d_sae {
                if latent_done[i] {
                    continue;
                }
                let c = corr(f, i);
                let better = match best {
                    None => true,
                    Some((bc, bf, bi)) => c > bc || (c == bc && (f, i) < (bf, bi)),
                };
                if better {
                    best = Some((c, f, i));
                }
            }
        }
        let (c, f, i) = best.expect("unmatched pairs remain");
        feature_done[f] = true;
        latent_done[i] = true;
        matches.push(FeatureMatch { feature: f, latent: i, correlation: c });
    }
    matches.sort_by_key(|m| m.feature);
    let mean_correlation =
        matches.iter().map(|m| m.correlation).sum::<f64>() / matches.len().max(1) as f64;
    Ok(RecoveryReport { matches, mean_correlation })
}

/// Encode the batch with the model and match planted features to latents.
pub fn recovery_score(
    model: &CrosscoderModel,
    batch: &ActivationBatch,
    firing: &Array2<f64>,
    mode: SparsifyMode,
) -> Result<RecoveryReport> {
    let code = model.encode(batch, mode, None)?;
    match_features(&code, model.dims().d_sae, firing)
}
