//! Sparse probing: pick the single latent that best separates a binary task
//! by F1 on a training split, then report held-out F1 and the 1-Wasserstein
//! distance between the two classes' activation distributions.

use crate::data::ActivationBatch;
use crate::error::{Error, Result};
use crate::model::{CrosscoderModel, SparsifyMode};

/// A binary probing task over labeled activation batches.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub name: String,
    pub train: ActivationBatch,
    pub eval: ActivationBatch,
}

impl ProbeTask {
    pub fn new(name: impl Into<String>, train: ActivationBatch, eval: ActivationBatch) -> Result<Self> {
        let task = Self { name: name.into(), train, eval };
        for (split, batch) in [("train", &task.train), ("eval", &task.eval)] {
            let labels = batch
                .labels()
                .ok_or_else(|| Error::Data(format!("{split} split has no labels")))?;
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == labels.len() {
                return Err(Error::Data(format!(
                    "{split} split must contain both classes (positives: {pos} of {})",
                    labels.len()
                )));
            }
        }
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task: String,
    pub latent: usize,
    pub threshold: f64,
    /// F1 on the evaluation split with the frozen (latent, threshold) rule.
    pub f1: f64,
    /// 1-Wasserstein distance between the positive- and negative-class
    /// activation samples of the chosen latent on the evaluation split.
    pub wasserstein: f64,
}

/// F1 = 2TP / (2TP + FP + FN); defined as 0 when the denominator vanishes.
pub fn f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "prediction count {} != label count {}",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("f1 needs a nonempty sample".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for (&p, &l) in preds.iter().zip(labels.iter()) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fnn += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

// Per-latent activations of every token (zeros included), taken from the
// sparse code under the evaluation sparsifier.
fn latent_activations(
    model: &CrosscoderModel,
    batch: &ActivationBatch,
    mode: SparsifyMode,
) -> Result<Vec<Vec<f64>>> {
    let code = model.encode(batch, mode, None)?;
    let d_sae = model.dims().d_sae;
    let mut acts = vec![vec![0.0f64; batch.tokens()]; d_sae];
    for t in 0..code.tokens() {
        for &(i, z) in code.token(t) {
            acts[i as usize][t] = z;
        }
    }
    Ok(acts)
}

// Best F1 over the decision rule "positive iff activation > theta", sweeping
// theta over the observed values, zero, and an always-positive sentinel.
// Returns (f1, theta); among equal F1 the largest threshold wins.
fn best_threshold(acts: &[f64], labels: &[u8]) -> (f64, f64) {
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    let mut order: Vec<usize> = (0..acts.len()).collect();
    order.sort_unstable_by(|&a, &b| acts[b].total_cmp(&acts[a]));

    // Walk distinct activation levels from above; the prefix above each
    // threshold accumulates predictions.
    let mut best_f1 = -1.0f64;
    let mut best_theta = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let consider = |theta: f64, tp: usize, fp: usize, best_f1: &mut f64, best_theta: &mut f64| {
        let denom = 2 * tp + fp + (total_pos - tp);
        let f = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        if f > *best_f1 || (f == *best_f1 && theta > *best_theta) {
            *best_f1 = f;
            *best_theta = theta;
        }
    };

    let mut pos = 0;
    while pos < order.len() {
        let v = acts[order[pos]];
        if v <= 0.0 {
            break;
        }
        // Threshold at this value keeps the strictly-greater prefix.
        consider(v, tp, fp, &mut best_f1, &mut best_theta);
        while pos < order.len() && acts[order[pos]] == v {
            if labels[order[pos]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            pos += 1;
        }
    }
    // theta = 0: everything with a positive activation is predicted positive.
    consider(0.0, tp, fp, &mut best_f1, &mut best_theta);
    // Always-positive rule (threshold below every activation).
    let all_pos = labels.len() - total_pos;
    consider(-1.0, total_pos, all_pos, &mut best_f1, &mut best_theta);
    (best_f1, best_theta)
}

/// Select the latent (and threshold) maximizing train-split F1; ties resolve
/// to the lower latent index.
pub fn select_best_latent(
    model: &CrosscoderModel,
    train: &ActivationBatch,
    mode: SparsifyMode,
) -> Result<(usize, f64)> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Data("train split has no labels".into()))?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data("train split must contain both classes".into()));
    }
    let acts = latent_activations(model, train, mode)?;
    let mut best: Option<(f64, usize, f64)> = None;
    for (i, latent_acts) in acts.iter().enumerate() {
        let (f, theta) = best_threshold(latent_acts, labels);
        let better = match best {
            None => true,
            Some((bf, _, _)) => f > bf,
        };
        if better {
            best = Some((f, i, theta));
        }
    }
    let (_, latent, theta) = best.expect("d_sae >= 1");
    Ok((latent, theta))
}

/// Empirical 1-Wasserstein distance between two one-dimensional samples,
/// computed as the integral of the CDF gap over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("wasserstein distance needs nonempty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);

    let mut values: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    values.sort_unstable_by(f64::total_cmp);
    values.dedup();

    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0.0f64;
    for w in values.windows(2) {
        while ia < sa.len() && sa[ia] <= w[0] {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= w[0] {
            ib += 1;
        }
        let fa = ia as f64 / sa.len() as f64;
        let fb = ib as f64 / sb.len() as f64;
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Run the full protocol: select on train, freeze the rule, report eval F1
/// and the between-class Wasserstein distance of the chosen latent.
pub fn run_probe(model: &CrosscoderModel, task: &ProbeTask, mode: SparsifyMode) -> Result<ProbeResult> {
    let (latent, threshold) = select_best_latent(model, &task.train, mode)?;
    let eval_labels = task
        .eval
        .labels()
        .ok_or_else(|| Error::Data("eval split has no labels".into()))?;
    let acts = latent_activations(model, &task.eval, mode)?;
    let chosen = &acts[latent];
    let preds: Vec<u8> = chosen.iter().map(|&a| u8::from(a > threshold)).collect();
    let f1_eval = f1(&preds, eval_labels)?;
    let pos: Vec<f64> = chosen
        .iter()
        .zip(eval_labels.iter())
        .filter(|&(_, &l)| l == 1)
        .map(|(&a, _)| a)
        .collect();
    let neg: Vec<f64> = chosen
        .iter()
        .zip(eval_labels.iter())
        .filter(|&(_, &l)| l == 0)
        .map(|(&a, _)| a)
        .collect();
    let w = wasserstein1(&pos, &neg)?;
    Ok(ProbeResult { task: task.name.clone(), latent, threshold, f1: f1_eval, wasserstein: w })
}
