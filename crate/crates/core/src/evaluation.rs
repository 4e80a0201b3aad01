//! Metrics, the token-deletion experiment, K sweeps and planted-signal diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::TrainConfig;
use crate::corpus::{Batch, Example, TokenId};
use crate::error::{AfaError, Result};
use crate::masking::rank_by_weight;
use crate::nn::Mode;
use crate::target::TargetModel;
use crate::trainer::{fit, FitOptions};

/// Batch size used when a caller has no preference.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro P/R/F1.
///
/// Precision or recall with a zero denominator is 0, and so is F1 when both
/// are 0. Every class counts in the macro mean, including classes that never
/// occur.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(AfaError::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(AfaError::contract(format!(
                "class {} outside [0, {num_classes})",
                p.max(y)
            )));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..num_classes).map(|y| confusion[y][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        macro_p: mean(&precision),
        macro_r: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        confusion,
    })
}

fn chunks(data: &[Example], batch_size: usize) -> Result<impl Iterator<Item = &[Example]>> {
    if batch_size == 0 {
        return Err(AfaError::config("batch_size", "must be positive"));
    }
    Ok(data.chunks(batch_size))
}

pub fn predict_all(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in chunks(data, batch_size)? {
        out.extend(target.predict(&Batch::from_examples(chunk)?)?);
    }
    Ok(out)
}

/// Live-position attention rows, one per example.
pub fn attention_rows(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in chunks(data, batch_size)? {
        let res = target.forward(&Batch::from_examples(chunk)?, Mode::Infer)?;
        out.extend((0..chunk.len()).map(|b| res.attention_row(b).to_vec()));
    }
    Ok(out)
}

pub fn evaluate(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<Metrics> {
    let preds = predict_all(target, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    compute_metrics(&preds, &labels, target.dims.num_classes)
}

pub fn accuracy(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<f64> {
    let preds = predict_all(target, data, batch_size)?;
    let correct = preds.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(ratio(correct, data.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    /// `(N, accuracy)` for `N = 0..=N_max`.
    pub points: Vec<(usize, f64)>,
    pub evaluated: usize,
    /// Examples too short to lose `N_max` tokens.
    pub skipped: usize,
}

fn without(ids: &[TokenId], drop: &[usize]) -> Vec<TokenId> {
    ids.iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, &t)| t)
        .collect()
}

/// Accuracy after physically removing each sequence's `N` highest-attention tokens.
///
/// By default the ranking comes from one pass over the intact sequence. With
/// `rerank` the top token is removed one at a time and attention recomputed
/// on the shortened sequence before the next removal.
pub fn deletion_curve(
    target: &TargetModel,
    data: &[Example],
    n_max: usize,
    rerank: bool,
    batch_size: usize,
) -> Result<DeletionCurve> {
    let kept: Vec<&Example> = data.iter().filter(|e| e.len() > n_max).collect();
    let skipped = data.len() - kept.len();
    let mut current: Vec<Example> = kept.iter().map(|e| (*e).clone()).collect();
    let labels: Vec<usize> = current.iter().map(|e| e.label).collect();
    let rankings: Vec<Vec<usize>> = if rerank {
        Vec::new()
    } else {
        attention_rows(target, &current, batch_size)?
            .iter()
            .map(|a| rank_by_weight(a))
            .collect()
    };
    let mut points = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            if rerank {
                let rows = attention_rows(target, &current, batch_size)?;
                for (ex, a) in current.iter_mut().zip(rows) {
                    ex.token_ids = without(&ex.token_ids, &rank_by_weight(&a)[..1]);
                }
            } else {
                for ((ex, orig), rank) in current.iter_mut().zip(&kept).zip(&rankings) {
                    ex.token_ids = without(&orig.token_ids, &rank[..n]);
                }
            }
        }
        let preds = predict_all(target, &current, batch_size)?;
        let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        points.push((n, ratio(correct, labels.len())));
    }
    Ok(DeletionCurve {
        points,
        evaluated: kept.len(),
        skipped,
    })
}

/// Mean and 95% t-interval half-width `t_{0.975, n−1} · s / √n`.
pub fn t_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(AfaError::config("trials", "a t-interval needs at least 2 values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| AfaError::Input(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

/// Trains one model per `(k, trial)` with seed `cfg.seed + trial` and reports
/// test accuracy per `k`. Up to `jobs` trainings run concurrently.
pub fn sweep_k(
    cfg: &TrainConfig,
    vocab_size: usize,
    train: &[Example],
    test: &[Example],
    k_values: &[usize],
    trials: usize,
    jobs: usize,
) -> Result<SweepResult> {
    if trials < 2 {
        return Err(AfaError::config("trials", "must be at least 2"));
    }
    let runs: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| (0..trials).map(move |t| (k, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AfaError::Input(e.to_string()))?;
    let accs: Vec<f64> = pool.install(|| {
        runs.par_iter()
            .map(|&(k, t)| {
                let mut c = cfg.clone();
                c.k = k;
                c.seed = cfg.seed.wrapping_add(t as u64);
                let (trainer, _) = fit(&c, vocab_size, train, FitOptions::default())?;
                accuracy(&trainer.target, test, c.batch_size)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let records = k_values
        .iter()
        .zip(accs.chunks(trials))
        .map(|(&k, a)| {
            let (mean, half) = t_interval(a)?;
            Ok(SweepRecord {
                k,
                accuracies: a.to_vec(),
                mean_accuracy: mean,
                ci_half_width: half,
                trials,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult { records })
}

/// Attention mass `a` places on `positions`.
pub fn signal_mass(a: &[f64], positions: &[usize]) -> f64 {
    positions.iter().filter_map(|&i| a.get(i)).sum()
}

fn signal_positions(data: &[Example]) -> Result<Vec<&[usize]>> {
    data.iter()
        .map(|e| {
            e.signal_positions
                .as_deref()
                .ok_or_else(|| AfaError::Input("example has no signal positions".into()))
        })
        .collect()
}

/// Mean over examples of the attention mass on the planted signal positions.
pub fn signal_attention_mass(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<f64> {
    let positions = signal_positions(data)?;
    let rows = attention_rows(target, data, batch_size)?;
    let total: f64 = rows.iter().zip(&positions).map(|(a, p)| signal_mass(a, p)).sum();
    Ok(total / data.len().max(1) as f64)
}

/// Fraction of examples whose highest-attention position is a signal position.
pub fn signal_top1_rate(target: &TargetModel, data: &[Example], batch_size: usize) -> Result<f64> {
    let positions = signal_positions(data)?;
    let rows = attention_rows(target, data, batch_size)?;
    let hits = rows
        .iter()
        .zip(&positions)
        .filter(|(a, p)| p.contains(&rank_by_weight(a)[0]))
        .count();
    Ok(ratio(hits, data.len()))
}
