//! Training, evaluation and ablation loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PostRecord;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    forward, forward_backward, loss_value, LossReport, ModelConfig, ModelParams, Variant,
};
use crate::optim::{cosine_lr_scale, AdamWConfig, GroupRates, OptimState};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rates: GroupRates,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    /// 20 epochs, batch 16, the default group rates and AdamW constants.
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            rates: GroupRates::default(),
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Checks that every record fits the model's patch and vocabulary sizes.
pub fn check_dataset(config: &ModelConfig, records: &[PostRecord]) -> Result<()> {
    for r in records {
        r.validate(config.num_classes)?;
        let err = |message: String| Error::Record { id: r.id, message };
        if r.image_patches.len() != config.num_patches {
            return Err(err(format!(
                "{} image patches, model expects {}",
                r.image_patches.len(),
                config.num_patches
            )));
        }
        if let Some(p) = r.image_patches.first() {
            if p.len() != config.patch_dim {
                return Err(err(format!(
                    "patch length {}, model expects {}",
                    p.len(),
                    config.patch_dim
                )));
            }
        }
        let tokens = r.text_tokens.iter().chain(r.ocr_tokens.iter().flatten());
        if let Some(t) = tokens.copied().find(|&t| t >= config.vocab_size) {
            return Err(err(format!(
                "token {t} outside vocabulary of {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Mean of per-batch losses.
    pub loss: LossReport,
    pub predictions: Vec<usize>,
}

fn mean_loss(losses: &[LossReport]) -> LossReport {
    let n = losses.len().max(1) as f64;
    let mean = |f: fn(&LossReport) -> f64| losses.iter().map(f).sum::<f64>() / n;
    LossReport {
        cls: mean(|l| l.cls),
        exc: mean(|l| l.exc),
        con: mean(|l| l.con),
        total: mean(|l| l.total),
    }
}

/// Scores `records` in their given order, `batch_size` posts per forward pass.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    records: &[PostRecord],
    batch_size: usize,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    check_dataset(config, records)?;
    let mut losses = Vec::new();
    let mut predictions = Vec::with_capacity(records.len());
    for batch in records.chunks(batch_size.max(1)) {
        let r = forward(batch, params, config)?;
        predictions.extend(r.predictions());
        losses.push(r.loss);
    }
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    Ok(Evaluation {
        metrics: metrics::compute(&labels, &predictions, config.num_classes)?,
        loss: mean_loss(&losses),
        predictions,
    })
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub loss: LossReport,
}

impl HistoryRow {
    fn new(epoch: usize, split: &str, metrics: &MetricsReport, loss: LossReport) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            accuracy: metrics.accuracy,
            weighted_f1: metrics.weighted_f1,
            macro_f1: metrics.macro_f1,
            loss,
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch,split,acc,wF1,mF1,L_cls,L_exc,L_con";

/// CSV with full-precision floats.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch,
            r.split,
            r.accuracy,
            r.weighted_f1,
            r.macro_f1,
            r.loss.cls,
            r.loss.exc,
            r.loss.con
        )
        .unwrap();
    }
    s
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, history_csv(rows))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy; the
    /// earliest such epoch wins ties.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub last: ModelParams,
    /// A `train` and a `val` row per epoch, epochs numbered from 1.
    pub history: Vec<HistoryRow>,
}

/// Trains from `ModelParams::init(config, config.seed)`.
pub fn train(
    config: &ModelConfig,
    run: &TrainConfig,
    train_set: &[PostRecord],
    val_set: &[PostRecord],
) -> Result<TrainOutcome> {
    train_observed(config, run, train_set, val_set, |_| {})
}

/// Like [`train`], calling `observe` with the history rows of each finished
/// epoch.
pub fn train_observed(
    config: &ModelConfig,
    run: &TrainConfig,
    train_set: &[PostRecord],
    val_set: &[PostRecord],
    mut observe: impl FnMut(&[HistoryRow]),
) -> Result<TrainOutcome> {
    config.validate()?;
    run.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty { op: "train" });
    }
    if val_set.is_empty() {
        return Err(Error::Empty { op: "validation" });
    }
    check_dataset(config, train_set)?;
    check_dataset(config, val_set)?;

    let mut params = ModelParams::init(config, config.seed)?;
    let mut optim = OptimState::new(&params.to_tensors(), params.groups(), run.rates, run.adamw)?;
    let batches_per_epoch = train_set.len().div_ceil(run.batch_size);
    let total_steps = (batches_per_epoch * run.epochs) as u64;
    let labels: Vec<usize> = train_set.iter().map(|r| r.label).collect();

    let mut step = 0u64;
    let mut history = Vec::with_capacity(2 * run.epochs);
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(run.batch_size);

    for epoch in 1..=run.epochs {
        order.sort_unstable();
        Rng::new(derive_seed(config.seed, epoch as u64)).shuffle(&mut order);
        let mut losses = Vec::with_capacity(batches_per_epoch);
        let mut predictions = vec![0; train_set.len()];
        for ids in order.chunks(run.batch_size) {
            batch.clear();
            batch.extend(ids.iter().map(|&i| train_set[i].clone()));
            let at = step as usize;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step: at,
                detail,
            };
            let (result, grads) = match forward_backward(&batch, &params, config) {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            };
            if !result.loss.total.is_finite() {
                return Err(diverged(format!("loss {:?}", result.loss)));
            }
            if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
                return Err(diverged(format!(
                    "non-finite gradient for {}",
                    params.names()[k]
                )));
            }
            for (&i, p) in ids.iter().zip(result.predictions()) {
                predictions[i] = p;
            }
            losses.push(result.loss);
            let scale = cosine_lr_scale(step, total_steps)?;
            optim.step(&mut params.tensors_mut(), &grads, scale)?;
            step += 1;
            if !params.is_finite() {
                return Err(diverged("parameters became non-finite".into()));
            }
        }

        let train_metrics = metrics::compute(&labels, &predictions, config.num_classes)?;
        let val = evaluate(&params, config, val_set, run.batch_size)?;
        let rows = [
            HistoryRow::new(epoch, "train", &train_metrics, mean_loss(&losses)),
            HistoryRow::new(epoch, "val", &val.metrics, val.loss),
        ];
        observe(&rows);
        history.extend(rows);
        if best.as_ref().is_none_or(|b| val.metrics.accuracy > b.2) {
            best = Some((params.clone(), epoch, val.metrics.accuracy));
        }
    }

    let (best, best_epoch, best_val_accuracy) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_accuracy,
        last: params,
        history,
    })
}

/// Finite-difference check of every parameter of the model on one batch.
pub fn model_grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[PostRecord],
    check: GradCheckConfig,
) -> Result<GradCheckReport> {
    check_dataset(config, batch)?;
    let (_, analytic) = forward_backward(batch, params, config)?;
    let mut tensors = params.to_tensors();
    let names = params.names();
    let mut scratch = params.clone();
    grad_check(&mut tensors, &analytic, &names, check, |ts| {
        scratch.assign(ts);
        loss_value(batch, &scratch, config)
    })
}

/// Test-set scores of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
    pub macro_f1: MeanStd,
}

/// `sqrt(s_a²/n_a + s_b²/n_b)` for the difference of two means.
pub fn pooled_standard_error(a: &AblationSummary, b: &AblationSummary) -> f64 {
    (a.accuracy.std.powi(2) / a.runs as f64 + b.accuracy.std.powi(2) / b.runs as f64).sqrt()
}

pub fn summarize(runs: &[AblationRun], variants: &[Variant]) -> Vec<AblationSummary> {
    variants
        .iter()
        .filter_map(|&variant| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            if rs.is_empty() {
                return None;
            }
            let col = |f: fn(&AblationRun) -> f64| {
                MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Some(AblationSummary {
                variant,
                runs: rs.len(),
                accuracy: col(|r| r.accuracy),
                weighted_f1: col(|r| r.weighted_f1),
                macro_f1: col(|r| r.macro_f1),
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,runs,acc_mean,acc_std,wF1_mean,wF1_std,mF1_mean,mF1_std";

pub fn ablation_csv(summaries: &[AblationSummary]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for a in summaries {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            a.variant,
            a.runs,
            a.accuracy.mean,
            a.accuracy.std,
            a.weighted_f1.mean,
            a.weighted_f1.std,
            a.macro_f1.mean,
            a.macro_f1.std
        )
        .unwrap();
    }
    s
}

/// Trains every variant once per seed and scores the best-validation
/// parameters on `test_set`.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &ModelConfig,
    run: &TrainConfig,
    train_set: &[PostRecord],
    val_set: &[PostRecord],
    test_set: &[PostRecord],
    variants: &[Variant],
    seeds: &[u64],
    mut observe: impl FnMut(&AblationRun),
) -> Result<(Vec<AblationRun>, Vec<AblationSummary>)> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &variant in variants {
            let config = ModelConfig {
                variant,
                seed,
                ..base.clone()
            };
            let outcome = train(&config, run, train_set, val_set)?;
            let test = evaluate(&outcome.best, &config, test_set, run.batch_size)?;
            let r = AblationRun {
                variant,
                seed,
                accuracy: test.metrics.accuracy,
                weighted_f1: test.metrics.weighted_f1,
                macro_f1: test.metrics.macro_f1,
            };
            observe(&r);
            runs.push(r);
        }
    }
    let summaries = summarize(&runs, variants);
    Ok((runs, summaries))
}
