//! Acceptance suite: one test per release criterion, each printing a PASS
//! line with the measured quantities (run with `--nocapture` to see them).
//!
//! Criteria 4 and 5 share a single trained-model suite (standard crosscoder
//! vs tensor-ring variants with and without layer masking) built once.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmx_core::checkpoint::{parse_checkpoint, read_checkpoint, write_checkpoint};
use fmx_core::data::{parse_cache, read_cache, write_cache, ActivationBatch};
use fmx_core::diagnostics::{coherence_report, layer_sensitivity, recon_metrics, functional_coherence};
use fmx_core::error::Error;
use fmx_core::judge::{
    build_prompt, context_window, judge_latents, parse_verdict, JudgeCounts, JudgeLabel,
    LatentEvidence, StubBackend, TokenEvidence,
};
use fmx_core::model::{
    batch_topk, select_cp_rank, sparsify_eval, CrosscoderModel, ModelDims, SparsifyMode,
};
use fmx_core::probe::{run_probe, wasserstein1, ProbeTask};
use fmx_core::synth::{generate, sample_spec, DirectionPolicy, SynthSampleConfig};
use fmx_core::train::{
    apply_layer_mask, init_model, recon_loss, recon_loss_with_selection, train, model_param_slices,
    CyclingSource, Selection, TrainConfig, VariantSpec,
};
use fmx_core::weights::{
    decoder_apply, encoder_contract, CpFactors, DenseWeights3, Dims3, TrFactors, Weights,
};
use fmx_core::SparseCode;

// ---------------------------------------------------------------------------
// Independent oracles (plain index loops, no shared code with the library).
// ---------------------------------------------------------------------------

fn tr_oracle_tensor(cores: &[Array3<f32>; 3]) -> Array3<f64> {
    let (r1, r2, r3) = (cores[0].shape()[0], cores[1].shape()[0], cores[2].shape()[0]);
    let (n1, n2, n3) = (cores[0].shape()[1], cores[1].shape()[1], cores[2].shape()[1]);
    Array3::from_shape_fn((n1, n2, n3), |(a, b, c)| {
        let mut acc = 0.0f64;
        for x in 0..r1 {
            for y in 0..r2 {
                for z in 0..r3 {
                    acc += cores[0][[x, a, y]] as f64
                        * cores[1][[y, b, z]] as f64
                        * cores[2][[z, c, x]] as f64;
                }
            }
        }
        acc
    })
}

fn cp_oracle_tensor(factors: &[Array2<f32>; 3]) -> Array3<f64> {
    let (n1, n2, n3) = (factors[0].shape()[0], factors[1].shape()[0], factors[2].shape()[0]);
    let rank = factors[0].shape()[1];
    Array3::from_shape_fn((n1, n2, n3), |(a, b, c)| {
        (0..rank)
            .map(|r| {
                factors[0][[a, r]] as f64 * factors[1][[b, r]] as f64 * factors[2][[c, r]] as f64
            })
            .sum()
    })
}

fn oracle_encode(tensor: &Array3<f64>, batch: &ActivationBatch) -> Array2<f64> {
    let (d, n2, layers) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
    let mut out = Array2::<f64>::zeros((batch.tokens(), n2));
    for t in 0..batch.tokens() {
        for i in 0..n2 {
            let mut acc = 0.0;
            for l in 0..layers {
                for j in 0..d {
                    acc += tensor[[j, i, l]] * batch.data()[[t, l, j]] as f64;
                }
            }
            out[[t, i]] = acc;
        }
    }
    out
}

fn oracle_decode(tensor: &Array3<f64>, entries: &[(u32, f64)], layer: usize) -> Array1<f64> {
    let n2 = tensor.shape()[1];
    let mut out = Array1::<f64>::zeros(n2);
    for &(i, z) in entries {
        for j in 0..n2 {
            out[j] += z * tensor[[i as usize, j, layer]];
        }
    }
    out
}

fn rel_err_matrix(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).mapv(|v| v * v).sum().sqrt();
    let den = b.mapv(|v| v * v).sum().sqrt();
    num / den.max(1e-30)
}

fn rel_err_vec(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let num = (a - b).mapv(|v| v * v).sum().sqrt();
    let den = b.mapv(|v| v * v).sum().sqrt();
    num / den.max(1e-30)
}

// ---------------------------------------------------------------------------
// Criterion 1: factorization oracle equivalence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_factorization_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_64 = 0.0f64;
    let mut worst_32 = 0.0f64;

    for case in 0..100 {
        let d = rng.random_range(2..=16);
        let d_sae = rng.random_range(4..=64);
        let layers = rng.random_range(1..=8);
        let enc_dims = Dims3::new(d, d_sae, layers);

        let weights = if case % 2 == 0 {
            let r1 = rng.random_range(1..=3);
            let r2 = rng.random_range(1..=8);
            let r3 = rng.random_range(1..=4);
            Weights::Tr(
                TrFactors::new([
                    Array3::from_shape_fn((r1, d, r2), |_| rng.random_range(-1.0f32..1.0)),
                    Array3::from_shape_fn((r2, d_sae, r3), |_| rng.random_range(-1.0f32..1.0)),
                    Array3::from_shape_fn((r3, layers, r1), |_| rng.random_range(-1.0f32..1.0)),
                ])
                .unwrap(),
            )
        } else {
            let rank = rng.random_range(1..=16);
            Weights::Cp(
                CpFactors::new([
                    Array2::from_shape_fn((d, rank), |_| rng.random_range(-1.0f32..1.0)),
                    Array2::from_shape_fn((d_sae, rank), |_| rng.random_range(-1.0f32..1.0)),
                    Array2::from_shape_fn((layers, rank), |_| rng.random_range(-1.0f32..1.0)),
                ])
                .unwrap(),
            )
        };

        let oracle = match &weights {
            Weights::Tr(tr) => tr_oracle_tensor(tr.cores()),
            Weights::Cp(cp) => cp_oracle_tensor(cp.factors()),
            Weights::Dense(_) => unreachable!(),
        };

        // Elementwise evaluation vs the 64-bit oracle.
        for a in 0..d {
            for b in 0..d_sae {
                for c in 0..layers {
                    let got = weights.element(a, b, c).unwrap();
                    let want = oracle[[a, b, c]];
                    let rel = (got - want).abs() / want.abs().max(1.0);
                    worst_64 = worst_64.max(rel);
                }
            }
        }

        // Materialized 32-bit tensor vs the oracle.
        let dense = weights.materialize(enc_dims).unwrap();
        for a in 0..d {
            for b in 0..d_sae {
                for c in 0..layers {
                    let got = dense.data()[[a, b, c]] as f64;
                    let want = oracle[[a, b, c]];
                    let rel = (got - want).abs() / want.abs().max(1.0);
                    worst_32 = worst_32.max(rel);
                }
            }
        }

        // Contraction paths.
        let tokens = rng.random_range(1..=6);
        let batch = ActivationBatch::new(
            Array3::from_shape_fn((tokens, layers, d), |_| rng.random_range(-1.0f32..1.0)),
            None,
        )
        .unwrap();
        let contracted = encoder_contract(&weights, &batch, None).unwrap();
        worst_64 = worst_64.max(rel_err_matrix(&contracted, &oracle_encode(&oracle, &batch)));
        let via_dense = oracle_encode(&dense.data().mapv(|v| v as f64).into_owned(), &batch);
        worst_32 = worst_32.max(rel_err_matrix(&contracted, &via_dense));

        // Decoder orientation for the sparse apply path.
        let dec_dims = Dims3::new(d_sae, d, layers);
        let dec = match &weights {
            Weights::Tr(_) => {
                let r1 = rng.random_range(1..=3);
                let r2 = rng.random_range(1..=8);
                let r3 = rng.random_range(1..=4);
                Weights::Tr(
                    TrFactors::new([
                        Array3::from_shape_fn((r1, d_sae, r2), |_| rng.random_range(-1.0f32..1.0)),
                        Array3::from_shape_fn((r2, d, r3), |_| rng.random_range(-1.0f32..1.0)),
                        Array3::from_shape_fn((r3, layers, r1), |_| rng.random_range(-1.0f32..1.0)),
                    ])
                    .unwrap(),
                )
            }
            _ => {
                let rank = rng.random_range(1..=16);
                Weights::Cp(
                    CpFactors::new([
                        Array2::from_shape_fn((d_sae, rank), |_| rng.random_range(-1.0f32..1.0)),
                        Array2::from_shape_fn((d, rank), |_| rng.random_range(-1.0f32..1.0)),
                        Array2::from_shape_fn((layers, rank), |_| rng.random_range(-1.0f32..1.0)),
                    ])
                    .unwrap(),
                )
            }
        };
        let dec_oracle = match &dec {
            Weights::Tr(tr) => tr_oracle_tensor(tr.cores()),
            Weights::Cp(cp) => cp_oracle_tensor(cp.factors()),
            Weights::Dense(_) => unreachable!(),
        };
        let k = rng.random_range(1..=d_sae.min(8));
        let entries: Vec<(u32, f64)> = {
            let mut idx: Vec<u32> = (0..d_sae as u32).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let mut chosen: Vec<u32> = idx[..k].to_vec();
            chosen.sort_unstable();
            chosen.iter().map(|&i| (i, rng.random_range(0.1f64..2.0))).collect()
        };
        let layer = rng.random_range(0..layers);
        let applied = decoder_apply(&dec, &entries, layer).unwrap();
        worst_64 = worst_64.max(rel_err_vec(&applied, &oracle_decode(&dec_oracle, &entries, layer)));
        let dec_dense = dec.materialize(dec_dims).unwrap().data().mapv(|v| v as f64);
        worst_32 = worst_32.max(rel_err_vec(&applied, &oracle_decode(&dec_dense, &entries, layer)));
    }

    let elapsed = started.elapsed();
    assert!(worst_64 < 1e-10, "64-bit path disagreement {worst_64}");
    assert!(worst_32 < 1e-5, "32-bit path disagreement {worst_32}");
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "[PASS] criterion 1: factorization oracle equivalence (worst 64-bit {worst_64:.3e}, worst 32-bit {worst_32:.3e}, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient correctness via central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_gradient_correctness() {
    let started = Instant::now();
    let dims = ModelDims::new(8, 16, 4);
    let mut worst = 0.0f64;
    for (variant, seed) in [
        (VariantSpec::Dense, 111u64),
        (VariantSpec::Tr { ranks: (2, 3, 2) }, 112),
        (VariantSpec::Cp { rank: 5 }, 113),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = init_model(dims, variant, 3, 0.0, &mut rng).unwrap();
        let clean = ActivationBatch::new(
            Array3::from_shape_fn((6, dims.layers, dims.d), |_| rng.random_range(-1.0f32..1.0)),
            None,
        )
        .unwrap();
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let (masked, _) = apply_layer_mask(&clean, 0.25, &mut mask_rng);

        let base = recon_loss(&model, &clean, &masked).unwrap();
        let selection = Selection::from_code(&base.code);
        let analytic = recon_loss_with_selection(&model, &clean, &masked, &selection).unwrap();

        let group_grads: Vec<Vec<f64>> =
            analytic.grads.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-3f32;
        for (group, grads) in group_grads.iter().enumerate() {
            let mut fd = vec![0.0f64; grads.len()];
            for idx in 0..grads.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let (p_plus, p_minus);
                {
                    let mut s = model_param_slices(&mut plus);
                    s[group][idx] += h;
                    p_plus = s[group][idx] as f64;
                }
                {
                    let mut s = model_param_slices(&mut minus);
                    s[group][idx] -= h;
                    p_minus = s[group][idx] as f64;
                }
                let lp = recon_loss_with_selection(&plus, &clean, &masked, &selection)
                    .unwrap()
                    .loss;
                let lm = recon_loss_with_selection(&minus, &clean, &masked, &selection)
                    .unwrap()
                    .loss;
                fd[idx] = (lp - lm) / (p_plus - p_minus);
            }
            let num: f64 =
                fd.iter().zip(grads.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            let rel = num / den.max(1e-12);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "variant {} group {group}: gradient mismatch {rel}",
                variant.name()
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("[PASS] criterion 2: gradient correctness (worst group error {worst:.3e}, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// Criterion 3: coherence bounds and calibration fixtures.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_coherence_bounds_and_fixtures() {
    let dims = ModelDims::new(8, 24, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let data = ActivationBatch::new(
        Array3::from_shape_fn((200, dims.layers, dims.d), |_| rng.random_range(-1.0f32..1.0)),
        None,
    )
    .unwrap();
    for variant in [
        VariantSpec::Dense,
        VariantSpec::Tr { ranks: (2, 4, 3) },
        VariantSpec::Cp { rank: 6 },
    ] {
        let model = init_model(dims, variant, 6, 0.0, &mut rng).unwrap();
        let report = coherence_report(&model, &data, model.default_eval_mode()).unwrap();
        for c in report.c_n.iter().chain(report.c_f.iter()).flatten() {
            assert!(
                *c >= 1.0 - 1e-12 && *c <= dims.layers as f64 + 1e-9,
                "{}: coherence {c} outside [1, L]",
                variant.name()
            );
        }
    }

    // Single-layer latent: functional coherence exactly 1.
    let layers = 6;
    let d = 4;
    let mut enc = Array3::<f32>::zeros((d, 2, layers));
    enc[[0, 0, 2]] = 1.0;
    let dec = Array3::<f32>::zeros((2, d, layers));
    let model = CrosscoderModel::new(
        Weights::Dense(DenseWeights3::new(enc)),
        Weights::Dense(DenseWeights3::new(dec)),
        Array1::zeros(2),
        Array2::zeros((layers, d)),
        2,
        0.0,
    )
    .unwrap();
    let mut fixture = ActivationBatch::zeros(20, layers, d);
    let mut frng = ChaCha8Rng::seed_from_u64(132);
    for t in 0..20 {
        for l in 0..layers {
            for j in 0..d {
                fixture.data_mut()[[t, l, j]] = frng.random_range(0.1f32..1.0);
            }
        }
    }
    let (s, counts) =
        layer_sensitivity(&model, &fixture, SparsifyMode::Threshold { theta: 0.0 }).unwrap();
    let c_f = functional_coherence(&s, &counts);
    assert_eq!(c_f[0].unwrap(), 1.0, "single-layer latent must have c_f = 1 exactly");

    // Symmetric fixture: same direction read equally from all layers on
    // noise-free data -> c_f >= 0.95 L.
    let mut enc = Array3::<f32>::zeros((d, 2, layers));
    let mut dec = Array3::<f32>::zeros((2, d, layers));
    for l in 0..layers {
        enc[[0, 0, l]] = 1.0;
        dec[[0, 0, l]] = 1.0;
    }
    let model = CrosscoderModel::new(
        Weights::Dense(DenseWeights3::new(enc)),
        Weights::Dense(DenseWeights3::new(dec)),
        Array1::zeros(2),
        Array2::zeros((layers, d)),
        2,
        0.0,
    )
    .unwrap();
    let mut fixture = ActivationBatch::zeros(20, layers, d);
    for t in 0..20 {
        let mag = 0.5 + 0.1 * t as f32;
        for l in 0..layers {
            fixture.data_mut()[[t, l, 0]] = mag;
        }
    }
    let (s, counts) =
        layer_sensitivity(&model, &fixture, SparsifyMode::Threshold { theta: 0.0 }).unwrap();
    let c_f = functional_coherence(&s, &counts)[0].unwrap();
    assert!(c_f >= 0.95 * layers as f64, "symmetric fixture c_f {c_f}");
    println!("[PASS] criterion 3: coherence bounds and fixtures (symmetric c_f {c_f:.4} of {layers})");
}

// ---------------------------------------------------------------------------
// Criteria 4 + 5: directional coherence and reconstruction claims on the
// planted-feature suite (one shared training run).
// ---------------------------------------------------------------------------

struct DirectionalSuite {
    mse_std: f64,
    mse_tr_p0: f64,
    mse_tr_p01: f64,
    mean_cf_std: f64,
    mean_cf_tr_p01: f64,
    elapsed: Duration,
}

fn directional_suite() -> &'static DirectionalSuite {
    static SUITE: OnceLock<DirectionalSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let started = Instant::now();
        let dims = ModelDims::new(32, 256, 8);
        let cfg = SynthSampleConfig {
            d: dims.d,
            layers: dims.layers,
            n_single_layer: 32,
            n_cross_layer: 32,
            cross_support: 4,
            policy: DirectionPolicy::Shared,
            fire_prob: 0.08,
            magnitude_sigma: 0.5,
            noise_sigma: 0.25,
            concept_label: false,
        };
        let spec = sample_spec(&cfg, &mut ChaCha8Rng::seed_from_u64(141)).unwrap();
        let (train_data, eval_data) = {
            let (all, _) = generate(&spec, 220_000, &mut ChaCha8Rng::seed_from_u64(142)).unwrap();
            let train = all.slice_tokens(0, 200_000).unwrap();
            let eval = all.slice_tokens(200_000, 220_000).unwrap();
            (train, eval)
        };

        let budget = 2 * dims.d * dims.d_sae * dims.layers;
        let tr_ranks = fmx_core::select_tr_ranks(dims.d, dims.d_sae, dims.layers, budget).unwrap();

        let train_cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            steps: 2000,
            seed: 143,
            eval_every: 200,
            ..TrainConfig::default()
        };

        let mut run = |variant: VariantSpec, mask_p: f32| -> CrosscoderModel {
            let mut model = init_model(
                dims,
                variant,
                16,
                mask_p,
                &mut ChaCha8Rng::seed_from_u64(144),
            )
            .unwrap();
            let cfg = TrainConfig { mask_p, ..train_cfg.clone() };
            let mut source = CyclingSource::new(train_data.clone(), cfg.batch_size, cfg.seed).unwrap();
            train(&mut model, &mut source, &cfg).unwrap();
            model
        };

        let std_model = run(VariantSpec::Dense, 0.0);
        let tr_p0 = run(VariantSpec::Tr { ranks: tr_ranks }, 0.0);
        let tr_p01 = run(VariantSpec::Tr { ranks: tr_ranks }, 0.1);

        let mode = SparsifyMode::BatchTopK { k: 16 };
        let mse = |m: &CrosscoderModel| recon_metrics(m, &eval_data, mode).unwrap().mse_per_dim;
        let mean_cf = |m: &CrosscoderModel| {
            coherence_report(m, &eval_data, mode).unwrap().mean_c_f().unwrap()
        };

        let suite = DirectionalSuite {
            mse_std: mse(&std_model),
            mse_tr_p0: mse(&tr_p0),
            mse_tr_p01: mse(&tr_p01),
            mean_cf_std: mean_cf(&std_model),
            mean_cf_tr_p01: mean_cf(&tr_p01),
            elapsed: started.elapsed(),
        };
        eprintln!(
            "directional suite: mse std {:.5} / tr p0 {:.5} / tr p0.1 {:.5}; mean c_f std {:.3} / tr p0.1 {:.3}; ranks {:?}; {:?}",
            suite.mse_std, suite.mse_tr_p0, suite.mse_tr_p01, suite.mean_cf_std, suite.mean_cf_tr_p01, tr_ranks, suite.elapsed
        );
        suite
    })
}

#[test]
fn criterion_04_directional_coherence_gain() {
    let s = directional_suite();
    assert!(
        s.mean_cf_tr_p01 >= 1.3 * s.mean_cf_std,
        "mean c_f: masked factorized {:.4} vs standard {:.4} (ratio {:.3} < 1.3)",
        s.mean_cf_tr_p01,
        s.mean_cf_std,
        s.mean_cf_tr_p01 / s.mean_cf_std
    );
    assert!(s.elapsed < Duration::from_secs(900), "suite took {:?}", s.elapsed);
    println!(
        "[PASS] criterion 4: directional coherence gain (ratio {:.3}, suite {:?})",
        s.mean_cf_tr_p01 / s.mean_cf_std,
        s.elapsed
    );
}

#[test]
fn criterion_05_directional_reconstruction() {
    let s = directional_suite();
    assert!(
        s.mse_tr_p0 <= s.mse_std,
        "factorized p=0 MSE {:.6} exceeds standard {:.6}",
        s.mse_tr_p0,
        s.mse_std
    );
    assert!(
        s.mse_tr_p01 <= 1.15 * s.mse_tr_p0,
        "masked MSE {:.6} more than 15% above unmasked {:.6}",
        s.mse_tr_p01,
        s.mse_tr_p0
    );
    println!(
        "[PASS] criterion 5: directional reconstruction (std {:.5}, tr p0 {:.5}, tr p0.1 {:.5})",
        s.mse_std, s.mse_tr_p0, s.mse_tr_p01
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: BatchTopK exactness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_batch_topk_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(161);
    for _ in 0..50 {
        let tokens = rng.random_range(1..=12);
        let d_sae = rng.random_range(4..=40);
        let k = rng.random_range(1..=d_sae.min(6));
        // All-positive pre-activations guarantee >= T*k positives.
        let pre = Array2::from_shape_fn((tokens, d_sae), |_| rng.random_range(0.001f64..5.0));
        let code = batch_topk(&pre, k).unwrap();
        assert_eq!(code.total_active(), tokens * k, "budget not exactly filled");
        let kept_min = code.entries().iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
        let mut discarded_max = f64::NEG_INFINITY;
        for t in 0..tokens {
            for i in 0..d_sae {
                if pre[[t, i]] > 0.0 && code.value(t, i as u32) == 0.0 {
                    discarded_max = discarded_max.max(pre[[t, i]]);
                }
            }
        }
        assert!(kept_min >= discarded_max, "kept {kept_min} < discarded {discarded_max}");
    }

    // T = 1 reduces to per-token top-k.
    for _ in 0..20 {
        let d_sae = rng.random_range(4..=32);
        let k = rng.random_range(1..=d_sae);
        let pre = Array2::from_shape_fn((1, d_sae), |_| rng.random_range(-1.0f64..2.0));
        let via_batch = batch_topk(&pre, k).unwrap();
        let via_token = sparsify_eval(&pre, SparsifyMode::PerTokenTopK { k }).unwrap();
        assert_eq!(via_batch, via_token);
    }
    println!("[PASS] criterion 6: batch top-k exactness");
}

// ---------------------------------------------------------------------------
// Criterion 7: rank and parameter regressions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_rank_parameter_regression() {
    let d_sae = 16384;
    let layers = 8;
    let published_cp = [(768usize, 5866usize), (1024, 7707), (2048, 14557), (2304, 16153)];
    for (d, want) in published_cp {
        let budget = 2 * d * d_sae * layers;
        let got = select_cp_rank(d, d_sae, layers, budget).unwrap();
        assert_eq!(got, want, "cp rank for d = {d}");
    }
    let published_tr: [(usize, (usize, usize, usize)); 4] = [
        (768, (5, 244, 25)),
        (1024, (7, 302, 27)),
        (2048, (11, 501, 31)),
        (2304, (12, 545, 32)),
    ];
    for (d, ranks) in published_tr {
        let dense = 2 * d * d_sae * layers;
        let (r1, r2, r3) = ranks;
        let per_tensor = r1 * d * r2 + r2 * d_sae * r3 + r3 * layers * r1;
        let ratio = (2 * per_tensor) as f64 / dense as f64;
        assert!(
            (0.98..=1.02).contains(&ratio),
            "tr tuple {ranks:?} for d = {d}: ratio {ratio}"
        );
    }
    println!("[PASS] criterion 7: rank/parameter regression (4 CP ranks, 4 TR tuples)");
}

// ---------------------------------------------------------------------------
// Criterion 8: Wasserstein oracle and metric axioms.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_wasserstein_oracle() {
    // Greedy sorted-atom transport as the independent brute force.
    fn transport(a: &[f64], b: &[f64]) -> f64 {
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_unstable_by(f64::total_cmp);
        sb.sort_unstable_by(f64::total_cmp);
        let wa = 1.0 / sa.len() as f64;
        let wb = 1.0 / sb.len() as f64;
        let (mut ia, mut ib, mut ra, mut rb, mut cost) = (0usize, 0usize, wa, wb, 0.0f64);
        while ia < sa.len() && ib < sb.len() {
            let moved = ra.min(rb);
            cost += moved * (sa[ia] - sb[ib]).abs();
            ra -= moved;
            rb -= moved;
            if ra <= 1e-15 {
                ia += 1;
                ra = wa;
            }
            if rb <= 1e-15 {
                ib += 1;
                rb = wb;
            }
        }
        cost
    }

    let mut rng = ChaCha8Rng::seed_from_u64(181);
    for _ in 0..300 {
        let na = rng.random_range(1..=10);
        let nb = rng.random_range(1..=10);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(-4.0f64..4.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-4.0f64..4.0)).collect();
        let got = wasserstein1(&a, &b).unwrap();
        let want = transport(&a, &b);
        assert!((got - want).abs() < 1e-9, "w1 {got} vs transport {want}");
    }

    // Metric axioms on integer-valued equal-size triples: n * W1 values are
    // integer sums, so the comparisons below are exact.
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-20i64..=20) as f64).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let c = draw(&mut rng);
        let wab = wasserstein1(&a, &b).unwrap() * n as f64;
        let wba = wasserstein1(&b, &a).unwrap() * n as f64;
        let wbc = wasserstein1(&b, &c).unwrap() * n as f64;
        let wac = wasserstein1(&a, &c).unwrap() * n as f64;
        assert_eq!(wab.round() as i64, wba.round() as i64, "symmetry");
        assert!((wab - wab.round()).abs() < 1e-9, "integer samples give integer n*W1");
        assert!(
            wac.round() as i64 <= (wab.round() + wbc.round()) as i64,
            "triangle inequality"
        );
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        assert_eq!(wab == 0.0, sa == sb, "zero iff equal multisets");
    }
    println!("[PASS] criterion 8: Wasserstein oracle agreement and metric axioms");
}

// ---------------------------------------------------------------------------
// Criterion 9: probing ground truth and the permutation null.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_probing_ground_truth() {
    // Planted concept: latent 3 reads the concept direction (basis vector 2)
    // at layer 0; positives carry it, negatives don't.
    let (d, d_sae, layers) = (8, 6, 3);
    let mut enc = Array3::<f32>::zeros((d, d_sae, layers));
    enc[[2, 3, 0]] = 1.0;
    enc[[4, 1, 1]] = 1.0; // distractor reading a noise direction
    let model = CrosscoderModel::new(
        Weights::Dense(DenseWeights3::new(enc)),
        Weights::Dense(DenseWeights3::new(Array3::zeros((d_sae, d, layers)))),
        Array1::zeros(d_sae),
        Array2::zeros((layers, d)),
        d_sae,
        0.0,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(191);
    let mut build = |n: usize, rng: &mut ChaCha8Rng| {
        let mut data = Array3::<f32>::zeros((n, layers, d));
        let mut labels = vec![0u8; n];
        for t in 0..n {
            let positive = rng.random::<f64>() < 0.4;
            labels[t] = u8::from(positive);
            if positive {
                data[[t, 0, 2]] = rng.random_range(0.8f32..1.6);
            }
            data[[t, 1, 4]] = rng.random_range(0.0f32..0.5);
        }
        ActivationBatch::new(data, Some(labels)).unwrap()
    };
    let train_split = build(400, &mut rng);
    let eval_split = build(400, &mut rng);
    let task = ProbeTask::new("planted-concept", train_split, eval_split.clone()).unwrap();
    let mode = SparsifyMode::Threshold { theta: 0.0 };
    let result = run_probe(&model, &task, mode).unwrap();
    assert_eq!(result.latent, 3, "selected latent {}", result.latent);
    assert_eq!(result.f1, 1.0, "eval F1 {}", result.f1);

    // Permutation null: F1 of the frozen rule against shuffled eval labels.
    let shuffle_labels = |rng: &mut ChaCha8Rng| {
        let mut labels = eval_split.labels().unwrap().to_vec();
        for i in (1..labels.len()).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        labels
    };
    let mut null_rng = ChaCha8Rng::seed_from_u64(192);
    let f1_of = |labels: &[u8]| {
        let mut shuffled = eval_split.clone();
        shuffled.set_labels(Some(labels.to_vec())).unwrap();
        let task = ProbeTask::new("shuffled", task.train.clone(), shuffled).unwrap();
        run_probe(&model, &task, mode).unwrap().f1
    };
    let observed = f1_of(&shuffle_labels(&mut null_rng));
    let null: Vec<f64> = (0..300).map(|_| f1_of(&shuffle_labels(&mut null_rng))).collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let var = null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64;
    let sd = var.sqrt();
    assert!(
        (observed - mean).abs() <= 3.0 * sd.max(1e-9),
        "shuffled F1 {observed} vs null {mean} +/- {sd}"
    );
    println!(
        "[PASS] criterion 9: probing ground truth (planted F1 1.0; shuffled {observed:.3} within null {mean:.3} +/- {sd:.3})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: masking identities.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_masking_identities() {
    let dims = ModelDims::new(8, 24, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let data = ActivationBatch::new(
        Array3::from_shape_fn((512, dims.layers, dims.d), |_| rng.random_range(-1.0f32..1.0)),
        None,
    )
    .unwrap();

    // p = 0 is the identity.
    let (masked, mask) = apply_layer_mask(&data, 0.0, &mut ChaCha8Rng::seed_from_u64(202));
    assert_eq!(masked, data);
    assert_eq!(mask.zero_fraction(), 0.0);

    // p = 1 training converges toward the bias-only floor on centered data.
    let centered = data.centered();
    let mut floor = 0.0f64;
    for t in 0..centered.tokens() {
        for l in 0..centered.layers() {
            for j in 0..centered.dim() {
                floor += (centered.data()[[t, l, j]] as f64).powi(2);
            }
        }
    }
    floor /= (centered.tokens() * centered.layers()) as f64;

    let mut model = init_model(dims, VariantSpec::Dense, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(203)).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 128,
        mask_p: 1.0,
        seed: 204,
        ..TrainConfig::default()
    };
    let mut source = CyclingSource::new(centered.clone(), cfg.batch_size, cfg.seed).unwrap();
    train(&mut model, &mut source, &cfg).unwrap();
    let zeroed = ActivationBatch::zeros(centered.tokens(), dims.layers, dims.d);
    let loss = recon_loss(&model, &centered, &zeroed).unwrap().loss;
    assert!(
        (loss - floor).abs() / floor < 0.10,
        "p=1 steady loss {loss} vs analytic floor {floor}"
    );
    println!("[PASS] criterion 10: masking identities (floor {floor:.4}, trained {loss:.4})");
}

// ---------------------------------------------------------------------------
// Criterion 11: judge pipeline.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_judge_pipeline() {
    // Golden prompt, byte for byte.
    let golden = include_str!("golden/judge_prompt.txt");
    let evidence = LatentEvidence::new(
        1234,
        vec![
            TokenEvidence::new(
                "Philadelphia",
                vec![
                    context_window("flew back to ", "Philadelphia", " on Sunday night"),
                    context_window("the mayor of ", "Philadelphia", " announced"),
                ],
            )
            .unwrap(),
            TokenEvidence::new(
                "Pennsylvania",
                vec![context_window("a town in rural ", "Pennsylvania", ", where")],
            )
            .unwrap(),
            TokenEvidence::new("Maryland", vec![]).unwrap(),
        ],
    )
    .unwrap();
    assert_eq!(build_prompt(&evidence).as_bytes(), golden.as_bytes());

    // Parsing, clipping, labeling.
    let v = parse_verdict(r#"{"semantic_score": 0.85, "surface_score": 0.1}"#).unwrap();
    assert_eq!(v.label, JudgeLabel::Semantic);
    let v = parse_verdict(r#"{"semantic_score": 0.5, "surface_score": 0.5}"#).unwrap();
    assert_eq!(v.label, JudgeLabel::Unlabeled);
    let v = parse_verdict(r#"{"semantic_score": 1.3, "surface_score": 0.0}"#).unwrap();
    assert_eq!(v.semantic_score, 1.0);
    assert_eq!(v.label, JudgeLabel::Semantic);

    // Stub endpoint integration: exact counts from a scripted transcript.
    let semantic = r#"{"semantic_score": 0.9, "surface_score": 0.05}"#;
    let surface = r#"{"semantic_score": 0.05, "surface_score": 0.9}"#;
    let neither = r#"{"semantic_score": 0.6, "surface_score": 0.4}"#;
    let mut replies = Vec::new();
    for _ in 0..4 {
        replies.push(Ok(semantic.to_string()));
    }
    for _ in 0..5 {
        replies.push(Ok(surface.to_string()));
    }
    replies.push(Ok(neither.to_string()));
    let mut stub = StubBackend::new(replies);
    let evs: Vec<LatentEvidence> = (0..10)
        .map(|i| {
            LatentEvidence::new(i, vec![TokenEvidence::new(format!("t{i}"), vec![]).unwrap()])
                .unwrap()
        })
        .collect();
    let (_, counts) = judge_latents(&evs, &mut stub, "system");
    assert_eq!(counts, JudgeCounts { semantic: 4, surface: 5, unlabeled: 1, errored: 0 });
    println!("[PASS] criterion 11: judge pipeline (golden prompt, parse cases, stub counts 4/5/1)");
}

// ---------------------------------------------------------------------------
// Criterion 12: format round-trips and corruption handling.
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_format_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(221);

    // Cache: bit-identical round-trip including labels and signed zeros.
    let mut data = Array3::from_shape_fn((17, 3, 5), |_| rng.random_range(-2.0f32..2.0));
    data[[0, 0, 0]] = -0.0;
    let labels: Vec<u8> = (0..17).map(|t| (t % 2) as u8).collect();
    let batch = ActivationBatch::new(data, Some(labels)).unwrap();
    let cache_path = dir.path().join("roundtrip.fmxa");
    write_cache(&batch, &cache_path).unwrap();
    let bytes1 = std::fs::read(&cache_path).unwrap();
    let back = read_cache(&cache_path).unwrap();
    assert_eq!(back, batch);
    write_cache(&back, &cache_path).unwrap();
    assert_eq!(std::fs::read(&cache_path).unwrap(), bytes1);

    // Checkpoint: bit-identical round-trip for all variants.
    let dims = ModelDims::new(5, 9, 3);
    for variant in [
        VariantSpec::Dense,
        VariantSpec::Tr { ranks: (2, 3, 2) },
        VariantSpec::Cp { rank: 4 },
    ] {
        let model = init_model(dims, variant, 3, 0.05, &mut rng).unwrap();
        let path = dir.path().join(format!("{}.fmxc", variant.name()));
        write_checkpoint(&model, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        write_checkpoint(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);

        // Header corruption and truncation: format errors, never panics.
        for cut in 0..bytes1.len().min(80) {
            match parse_checkpoint(&bytes1[..cut]) {
                Err(Error::Format(_)) => {}
                other => panic!("truncated checkpoint at {cut}: {other:?}"),
            }
        }
        let mut corrupt = bytes1.clone();
        corrupt[0] = b'Q';
        assert!(matches!(parse_checkpoint(&corrupt), Err(Error::Format(_))));
    }

    let cache_bytes = std::fs::read(&cache_path).unwrap();
    for cut in 0..cache_bytes.len().min(80) {
        match parse_cache(&cache_bytes[..cut]) {
            Err(Error::Format(_)) => {}
            other => panic!("truncated cache at {cut}: {other:?}"),
        }
    }
    let mut corrupt = cache_bytes.clone();
    corrupt[3] = b'!';
    assert!(matches!(parse_cache(&corrupt), Err(Error::Format(_))));
    println!("[PASS] criterion 12: format round-trips and corruption handling");
}

// Shared helper: SparseCode is re-exported at the crate root; silence the
// unused-import lint when only some criteria touch it.
#[allow(unused)]
fn _type_uses(_: Option<SparseCode>) {}
