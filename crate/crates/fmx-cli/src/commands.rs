//! Subcommand implementations. Every command resolves its configuration,
//! runs deterministically given the resolved values, and writes the resolved
//! config next to its outputs.

use std::path::{Path, PathBuf};

use fmx_core::checkpoint::{read_checkpoint, write_checkpoint};
use fmx_core::data::{read_cache, write_cache, ActivationBatch};
use fmx_core::diagnostics::{coherence_report, histogram, recon_metrics};
use fmx_core::error::{Error, Result};
use fmx_core::judge::{
    judge_latents, ChatBackend, HttpBackend, JudgeConfig, LatentEvidence, StubBackend,
    TokenEvidence,
};
use fmx_core::model::{select_cp_rank, select_tr_ranks, tr_param_count, CrosscoderModel, ModelDims, SparsifyMode};
use fmx_core::probe::{run_probe, ProbeTask};
use fmx_core::synth::{generate, sample_spec, DirectionPolicy, SynthSampleConfig};
use fmx_core::train::{init_model, train, CyclingSource, TrainConfig, VariantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn cmd_generate(cfg: &Config) -> Result<()> {
    let out = cfg.require_path("generate.out")?;
    let tokens = cfg.get_usize("generate.tokens", 10_000)?;
    let seed = cfg.get_u64("seed", 0)?;

    let policy = match cfg.get_str("synth.policy", "shared")?.as_str() {
        "shared" => DirectionPolicy::Shared,
        "independent" => DirectionPolicy::Independent,
        other => {
            return Err(Error::Config(format!(
                "synth.policy must be \"shared\" or \"independent\", got {other:?}"
            )))
        }
    };
    let sample_cfg = SynthSampleConfig {
        d: cfg.get_usize("synth.d", 32)?,
        layers: cfg.get_usize("synth.layers", 8)?,
        n_single_layer: cfg.get_usize("synth.n_single_layer", 32)?,
        n_cross_layer: cfg.get_usize("synth.n_cross_layer", 32)?,
        cross_support: cfg.get_usize("synth.cross_support", 4)?,
        policy,
        fire_prob: cfg.get_f64("synth.fire_prob", 0.08)?,
        magnitude_sigma: cfg.get_f64("synth.magnitude_sigma", 0.5)?,
        noise_sigma: cfg.get_f64("synth.noise_sigma", 0.05)?,
        concept_label: cfg.get_bool("synth.labels", false)?,
    };

    let spec = sample_spec(&sample_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (batch, _firing) = generate(&spec, tokens, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x64617461))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_cache(&batch, &out)?;
    cfg.write_resolved(&sidecar(&out))?;
    println!(
        "wrote {} ({} tokens, {} layers, d = {}, labels: {})",
        out.display(),
        batch.tokens(),
        batch.layers(),
        batch.dim(),
        batch.labels().is_some()
    );
    Ok(())
}

fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved.toml");
    output.with_file_name(name)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn variant_from_config(cfg: &Config, dims: ModelDims) -> Result<VariantSpec> {
    let budget = cfg.get_usize(
        "model.param_budget",
        2 * dims.d * dims.d_sae * dims.layers,
    )?;
    match cfg.get_str("model.variant", "crosscoder")?.as_str() {
        "crosscoder" | "dense" => Ok(VariantSpec::Dense),
        "tr" => {
            let ranks = match cfg.get_usize_array("model.tr_ranks")? {
                Some(v) if v.len() == 3 => (v[0], v[1], v[2]),
                Some(v) => {
                    return Err(Error::Config(format!(
                        "model.tr_ranks must have exactly 3 entries, got {}",
                        v.len()
                    )))
                }
                None => select_tr_ranks(dims.d, dims.d_sae, dims.layers, budget)?,
            };
            Ok(VariantSpec::Tr { ranks })
        }
        "cp" => {
            let rank = match cfg.get_usize("model.cp_rank", 0)? {
                0 => select_cp_rank(dims.d, dims.d_sae, dims.layers, budget)?,
                r => r,
            };
            Ok(VariantSpec::Cp { rank })
        }
        other => Err(Error::Config(format!(
            "unknown model.variant {other:?} (expected crosscoder, tr, or cp)"
        ))),
    }
}

fn train_config(cfg: &Config, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        learning_rate: cfg.get_f64("train.learning_rate", 3e-4)?,
        beta1: cfg.get_f64("train.beta1", 0.9)?,
        beta2: cfg.get_f64("train.beta2", 0.999)?,
        adam_eps: cfg.get_f64("train.adam_eps", 1e-8)?,
        grad_clip_norm: cfg.get_f64("train.grad_clip_norm", 1.0)?,
        batch_size: cfg.get_usize("train.batch_size", 256)?,
        steps: cfg.get_usize("train.steps", 1000)?,
        mask_p: cfg.get_f64("train.mask_p", 0.0)? as f32,
        seed,
        eval_every: cfg.get_usize("train.eval_every", 1)?,
    })
}

pub fn cmd_train(cfg: &Config) -> Result<()> {
    let cache = cfg.require_path("data.cache")?;
    let out_dir = cfg.require_path("train.out")?;
    ensure_dir(&out_dir)?;
    let seed = cfg.get_u64("seed", 0)?;

    let data = read_cache(&cache)?;
    let dims = ModelDims::new(
        data.dim(),
        cfg.get_usize("model.d_sae", 256)?,
        data.layers(),
    );
    let variant = variant_from_config(cfg, dims)?;
    let k = cfg.get_usize("model.k", 16)?;
    let tcfg = train_config(cfg, seed)?;

    let mut model = init_model(dims, variant, k, tcfg.mask_p, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let param_count = model.param_count();
    let mut source = CyclingSource::new(data, tcfg.batch_size, seed)?;
    let log = train(&mut model, &mut source, &tcfg)?;

    write_checkpoint(&model, &out_dir.join("checkpoint.fmxc"))?;
    let mut metrics = String::new();
    for step in &log.steps {
        metrics.push_str(&serde_json::json!({
            "step": step.step,
            "loss": step.loss,
            "mean_active": step.mean_active,
            "wall_ms": step.wall_ms,
        }).to_string());
        metrics.push('\n');
    }
    write_text(&out_dir.join("metrics.ndjson"), &metrics)?;
    let summary = serde_json::json!({
        "variant": variant.name(),
        "d": dims.d,
        "d_sae": dims.d_sae,
        "layers": dims.layers,
        "k": k,
        "mask_p": tcfg.mask_p,
        "param_count": param_count,
        "steps_run": log.steps.last().map(|s| s.step + 1).unwrap_or(0),
        "truncated": log.truncated,
        "final_loss": log.final_loss,
    });
    write_text(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!(
        "trained {} model ({param_count} params) for {} steps; final loss {:.6}",
        variant.name(),
        tcfg.steps,
        log.final_loss
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared evaluation plumbing
// ---------------------------------------------------------------------------

fn eval_mode(cfg: &Config, model: &CrosscoderModel) -> Result<SparsifyMode> {
    match cfg.get_str("eval.mode", "batch_topk")?.as_str() {
        "batch_topk" => Ok(SparsifyMode::BatchTopK { k: cfg.get_usize("eval.k", model.k())? }),
        "per_token_topk" => {
            Ok(SparsifyMode::PerTokenTopK { k: cfg.get_usize("eval.k", model.k())? })
        }
        "threshold" => Ok(SparsifyMode::Threshold { theta: cfg.get_f64("eval.theta", 0.0)? }),
        other => Err(Error::Config(format!(
            "unknown eval.mode {other:?} (expected batch_topk, per_token_topk, or threshold)"
        ))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &Config) -> Result<()> {
    let model = read_checkpoint(&cfg.require_path("eval.checkpoint")?)?;
    let data = read_cache(&cfg.require_path("eval.cache")?)?;
    let out_dir = cfg.require_path("eval.out")?;
    ensure_dir(&out_dir)?;
    let mode = eval_mode(cfg, &model)?;

    let metrics = recon_metrics(&model, &data, mode)?;
    let mut csv = String::from("scope,mse_per_dim,mse_raw,ev,cs\n");
    for (l, layer) in metrics.per_layer.iter().enumerate() {
        csv.push_str(&format!("layer{l},{},{},,\n", layer.mse_per_dim, layer.mse_raw));
    }
    csv.push_str(&format!(
        "pooled,{},{},{},{}\n",
        metrics.mse_per_dim,
        metrics.mse_raw,
        fmt_opt(metrics.ev),
        fmt_opt(metrics.cs)
    ));
    write_text(&out_dir.join("recon.csv"), &csv)?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!(
        "mse {:.6} (per-dim) | ev {} | cs {}",
        metrics.mse_per_dim,
        fmt_opt(metrics.ev),
        fmt_opt(metrics.cs)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// coherence
// ---------------------------------------------------------------------------

pub fn cmd_coherence(cfg: &Config) -> Result<()> {
    let model = read_checkpoint(&cfg.require_path("coherence.checkpoint")?)?;
    let data = read_cache(&cfg.require_path("coherence.cache")?)?;
    let out_dir = cfg.require_path("coherence.out")?;
    ensure_dir(&out_dir)?;
    let mode = eval_mode(cfg, &model)?;
    let bins = cfg.get_usize("coherence.bins", 40)?;

    let report = coherence_report(&model, &data, mode)?;
    let mut csv = String::from("latent,c_n,c_f,active_count\n");
    for i in 0..report.c_n.len() {
        csv.push_str(&format!(
            "{i},{},{},{}\n",
            fmt_opt(report.c_n[i]),
            fmt_opt(report.c_f[i]),
            report.active_counts[i]
        ));
    }
    write_text(&out_dir.join("coherence.csv"), &csv)?;

    let layers = model.dims().layers as f64;
    let mut hist = String::from("metric,bin_lo,bin_hi,count\n");
    for (name, values) in [("c_n", &report.c_n), ("c_f", &report.c_f)] {
        let counts = histogram(values.iter().flatten().copied(), 1.0, layers, bins);
        let width = (layers - 1.0) / bins as f64;
        for (b, count) in counts.iter().enumerate() {
            let lo = 1.0 + b as f64 * width;
            hist.push_str(&format!("{name},{lo},{},{count}\n", lo + width));
        }
    }
    write_text(&out_dir.join("histogram.csv"), &hist)?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!(
        "mean c_n {} | mean c_f {} | defined latents {}",
        fmt_opt(report.mean_c_n()),
        fmt_opt(report.mean_c_f()),
        report.c_f.iter().flatten().count()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

fn split_task(
    name: &str,
    data: &ActivationBatch,
    train_fraction: f64,
    seed: u64,
) -> Result<ProbeTask> {
    if data.labels().is_none() {
        return Err(Error::Data("probing requires a labeled cache".into()));
    }
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "probe.train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..data.tokens()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c69);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let cut = ((data.tokens() as f64) * train_fraction).round() as usize;
    let train = data.select_tokens(&order[..cut])?;
    let eval = data.select_tokens(&order[cut..])?;
    ProbeTask::new(name, train, eval)
}

pub fn cmd_probe(cfg: &Config) -> Result<()> {
    let model = read_checkpoint(&cfg.require_path("probe.checkpoint")?)?;
    let data = read_cache(&cfg.require_path("probe.cache")?)?;
    let out_dir = cfg.require_path("probe.out")?;
    ensure_dir(&out_dir)?;
    let mode = eval_mode(cfg, &model)?;
    let task_name = cfg.get_str("probe.task", "task0")?;
    let fraction = cfg.get_f64("probe.train_fraction", 0.5)?;
    let seed = cfg.get_u64("seed", 0)?;

    let task = split_task(&task_name, &data, fraction, seed)?;
    let result = run_probe(&model, &task, mode)?;
    let mut csv = String::from("task,latent,threshold,f1_pct,w1_milli\n");
    csv.push_str(&format!(
        "{},{},{},{},{}\n",
        result.task,
        result.latent,
        result.threshold,
        result.f1 * 100.0,
        result.wasserstein * 1000.0
    ));
    write_text(&out_dir.join("probe.csv"), &csv)?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!(
        "{}: latent {} @ {:.4} -> F1 {:.1}% / W1 {:.3}e-3",
        result.task,
        result.latent,
        result.threshold,
        result.f1 * 100.0,
        result.wasserstein * 1000.0
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn fmt_cell(v: f64) -> String {
    // Short deterministic tag for directory names: 0.1 -> "0.1".
    let s = format!("{v}");
    s.replace('/', "_")
}

pub fn cmd_sweep(cfg: &Config) -> Result<()> {
    let cache = cfg.require_path("sweep.cache")?;
    let out_dir = cfg.require_path("sweep.out")?;
    ensure_dir(&out_dir)?;
    let seed = cfg.get_u64("seed", 0)?;
    let data = read_cache(&cache)?;
    if data.labels().is_none() {
        return Err(Error::Data("sweep needs a labeled cache for the probing column".into()));
    }

    let p_values = cfg.get_f64_array("sweep.p_values", &[0.0, 0.02, 0.05, 0.1])?;
    let reductions = cfg.get_f64_array("sweep.reductions", &[1.0, 0.5, 0.25, 0.125])?;
    let variant_name = cfg.get_str("sweep.variant", "tr")?;
    let d_sae = cfg.get_usize("model.d_sae", 256)?;
    let k = cfg.get_usize("model.k", 16)?;
    let dims = ModelDims::new(data.dim(), d_sae, data.layers());
    let dense_budget = 2 * dims.d * dims.d_sae * dims.layers;

    let base_train = TrainConfig {
        learning_rate: cfg.get_f64("sweep.learning_rate", 1e-3)?,
        batch_size: cfg.get_usize("sweep.batch_size", 256)?,
        steps: cfg.get_usize("sweep.steps", 300)?,
        seed,
        eval_every: cfg.get_usize("train.eval_every", 50)?,
        ..TrainConfig::default()
    };
    let fraction = cfg.get_f64("probe.train_fraction", 0.5)?;

    let mut rows: Vec<serde_json::Value> = Vec::new();
    for &reduction in &reductions {
        if !(reduction > 0.0 && reduction <= 1.0) {
            return Err(Error::Config(format!("sweep reduction {reduction} must lie in (0, 1]")));
        }
        let budget = (dense_budget as f64 * reduction) as usize;
        let variant = match variant_name.as_str() {
            "tr" => VariantSpec::Tr {
                ranks: select_tr_ranks(dims.d, dims.d_sae, dims.layers, budget)?,
            },
            "cp" => VariantSpec::Cp {
                rank: select_cp_rank(dims.d, dims.d_sae, dims.layers, budget)?,
            },
            other => return Err(Error::Config(format!("unknown sweep.variant {other:?}"))),
        };
        for &p in &p_values {
            let cell_dir = out_dir.join(format!("cell_p{}_r{}", fmt_cell(p), fmt_cell(reduction)));
            let cell_json = cell_dir.join("cell.json");
            if !cell_json.exists() {
                ensure_dir(&cell_dir)?;
                let tcfg = TrainConfig { mask_p: p as f32, ..base_train.clone() };
                let mut model =
                    init_model(dims, variant, k, tcfg.mask_p, &mut ChaCha8Rng::seed_from_u64(seed))?;
                let mut source = CyclingSource::new(data.clone(), tcfg.batch_size, seed)?;
                train(&mut model, &mut source, &tcfg)?;
                write_checkpoint(&model, &cell_dir.join("checkpoint.fmxc"))?;

                let mode = SparsifyMode::BatchTopK { k };
                let task = split_task("sweep", &data, fraction, seed)?;
                let mse = recon_metrics(&model, &task.eval, mode)?.mse_per_dim;
                let probe = run_probe(&model, &task, mode)?;
                let coherence = coherence_report(&model, &task.eval, mode)?;
                let cell = serde_json::json!({
                    "p": p,
                    "reduction": reduction,
                    "variant": variant.name(),
                    "param_count": model.param_count(),
                    "mse": mse,
                    "mean_f1": probe.f1,
                    "mean_cf": coherence.mean_c_f(),
                });
                write_text(&cell_json, &serde_json::to_string_pretty(&cell).unwrap())?;
            }
            let cell: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&cell_json)?)
                    .map_err(|e| Error::Format(format!("cell.json: {e}")))?;
            rows.push(cell);
        }
    }

    let mut csv = String::from("p,reduction,variant,param_count,mse,mean_f1,mean_cf\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row["p"],
            row["reduction"],
            row["variant"].as_str().unwrap_or(""),
            row["param_count"],
            row["mse"],
            row["mean_f1"],
            row["mean_cf"]
        ));
    }
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!("sweep complete: {} cells -> {}", rows.len(), out_dir.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// judge
// ---------------------------------------------------------------------------

fn harvest_evidence(
    model: &CrosscoderModel,
    data: &ActivationBatch,
    mode: SparsifyMode,
    tokens_text: Option<&[String]>,
    n_latents: usize,
    top_tokens: usize,
) -> Result<Vec<LatentEvidence>> {
    let code = model.encode(data, mode, None)?;
    let d_sae = model.dims().d_sae;
    // Max activation and occurrences per latent.
    let mut occurrences: Vec<Vec<(f64, usize)>> = vec![Vec::new(); d_sae];
    for t in 0..code.tokens() {
        for &(i, z) in code.token(t) {
            occurrences[i as usize].push((z, t));
        }
    }
    let mut by_activity: Vec<usize> = (0..d_sae).filter(|&i| !occurrences[i].is_empty()).collect();
    by_activity.sort_by_key(|&i| (std::cmp::Reverse(occurrences[i].len()), i));
    by_activity.truncate(n_latents);
    by_activity.sort_unstable();

    let token_text = |t: usize| -> String {
        match tokens_text {
            Some(list) => list.get(t).cloned().unwrap_or_else(|| format!("t{t}")),
            None => format!("t{t}"),
        }
    };

    let mut evidence = Vec::with_capacity(by_activity.len());
    for latent in by_activity {
        let mut occ = occurrences[latent].clone();
        occ.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        // Deduplicate by token string, keeping the highest activation.
        let mut seen = std::collections::BTreeSet::new();
        let mut tokens = Vec::new();
        for &(act, t) in &occ {
            let text = token_text(t);
            if !seen.insert(text.clone()) {
                continue;
            }
            let contexts = match tokens_text {
                Some(list) => {
                    let window = 12usize;
                    let before: String = list[t.saturating_sub(window)..t].join(" ");
                    let after_end = (t + 1 + window).min(list.len());
                    let after: String = list[t + 1..after_end].join(" ");
                    vec![fmx_core::judge::context_window(&before, &text, &after)]
                }
                None => Vec::new(),
            };
            tokens.push(TokenEvidence::new(text, contexts)?);
            let _ = act;
            if tokens.len() >= top_tokens {
                break;
            }
        }
        evidence.push(LatentEvidence::new(latent, tokens)?);
    }
    Ok(evidence)
}

pub fn cmd_judge(cfg: &Config) -> Result<()> {
    let model = read_checkpoint(&cfg.require_path("judge.checkpoint")?)?;
    let data = read_cache(&cfg.require_path("judge.cache")?)?;
    let out_dir = cfg.require_path("judge.out")?;
    ensure_dir(&out_dir)?;
    let mode = eval_mode(cfg, &model)?;

    let tokens_text: Option<Vec<String>> = match cfg.get_str("judge.tokens_file", "")?.as_str() {
        "" => None,
        path => {
            let text = std::fs::read_to_string(path)?;
            Some(text.lines().map(str::to_string).collect())
        }
    };
    let evidence = harvest_evidence(
        &model,
        &data,
        mode,
        tokens_text.as_deref(),
        cfg.get_usize("judge.latents", 16)?,
        cfg.get_usize("judge.top_tokens", 20)?,
    )?;

    let system_message = cfg.get_str(
        "judge.system_message",
        fmx_core::judge::DEFAULT_SYSTEM_MESSAGE,
    )?;
    let stub_file = cfg.get_str("judge.stub_file", "")?;
    let mut backend: Box<dyn ChatBackend> = if stub_file.is_empty() {
        Box::new(HttpBackend::new(JudgeConfig {
            base_url: cfg.get_str("judge.base_url", "")?,
            model: cfg.get_str("judge.model", "")?,
            auth_env: cfg.get_str("judge.auth_env", "FMX_JUDGE_API_KEY")?,
            system_message: system_message.clone(),
            max_retries: cfg.get_usize("judge.max_retries", 3)?,
            backoff_base_ms: cfg.get_u64("judge.backoff_base_ms", 500)?,
            requests_per_second: cfg.get_f64("judge.rps", 2.0)?,
            timeout_secs: cfg.get_u64("judge.timeout_secs", 60)?,
        })?)
    } else {
        let text = std::fs::read_to_string(&stub_file)?;
        let mut replies = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("stub file line {}: {e}", n + 1)))?;
            let content = v["content"]
                .as_str()
                .ok_or_else(|| Error::Format(format!("stub file line {}: no content", n + 1)))?;
            replies.push(Ok(content.to_string()));
        }
        Box::new(StubBackend::new(replies))
    };

    let (outcomes, counts) = judge_latents(&evidence, backend.as_mut(), &system_message);

    let mut audit = String::new();
    for o in &outcomes {
        let record = match &o.verdict {
            Some(v) => serde_json::json!({
                "feature_id": o.feature_id,
                "semantic_score": v.semantic_score,
                "surface_score": v.surface_score,
                "label": v.label.as_str(),
                "raw": v.raw,
            }),
            None => serde_json::json!({
                "feature_id": o.feature_id,
                "error": o.error,
            }),
        };
        audit.push_str(&record.to_string());
        audit.push('\n');
    }
    write_text(&out_dir.join("verdicts.ndjson"), &audit)?;
    let counts_json = serde_json::json!({
        "semantic": counts.semantic,
        "surface": counts.surface,
        "unlabeled": counts.unlabeled,
        "errored": counts.errored,
    });
    write_text(&out_dir.join("counts.json"), &serde_json::to_string_pretty(&counts_json).unwrap())?;
    cfg.write_resolved(&out_dir.join("resolved.toml"))?;
    println!(
        "judged {} latents: {} semantic, {} surface, {} unlabeled, {} errored",
        outcomes.len(),
        counts.semantic,
        counts.surface,
        counts.unlabeled,
        counts.errored
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ranks
// ---------------------------------------------------------------------------

pub fn cmd_ranks(cfg: &Config) -> Result<()> {
    let d = cfg.get_usize("ranks.d", 0)?;
    let d_sae = cfg.get_usize("ranks.d_sae", 16384)?;
    let layers = cfg.get_usize("ranks.layers", 8)?;
    if d == 0 {
        return Err(Error::Config("ranks.d is required".into()));
    }
    let dense_budget = 2 * d * d_sae * layers;
    let budget = cfg.get_usize("ranks.budget", dense_budget)?;

    let tr = match cfg.get_usize_array("ranks.tr")? {
        Some(v) if v.len() == 3 => {
            // Explicit tuples are accepted verbatim.
            (v[0], v[1], v[2])
        }
        Some(v) => {
            return Err(Error::Config(format!(
                "ranks.tr must have exactly 3 entries, got {}",
                v.len()
            )))
        }
        None => select_tr_ranks(d, d_sae, layers, budget)?,
    };
    let cp = select_cp_rank(d, d_sae, layers, budget)?;
    let tr_params = 2 * tr_param_count(d, d_sae, layers, tr);
    let cp_params = 2 * cp * (d + d_sae + layers);
    println!("dims: d = {d}, d_sae = {d_sae}, L = {layers}; budget = {budget}");
    println!(
        "tr ranks: ({}, {}, {}) -> {} weight params ({:.2}% of budget)",
        tr.0,
        tr.1,
        tr.2,
        tr_params,
        100.0 * tr_params as f64 / budget as f64
    );
    println!(
        "cp rank: {cp} -> {cp_params} weight params ({:.2}% of budget)",
        100.0 * cp_params as f64 / budget as f64
    );
    Ok(())
}
