//! Teacher training: Adam on the negative soft Spearman, with gradients
//! accumulated over whole trading days up to the effective batch size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, Adam, BackboneConfig, ModelParams};
use crate::data::{DayBatch, MarketPanel, SplitSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::objectives::soft_spearman;
use crate::priors::{BuiltPrior, PriorSpec, TeacherSetSpec};
use crate::seed::derive_seed;
use crate::stats;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Effective batch in (stock, day) samples; days are accumulated until
    /// their stock count reaches it.
    pub batch_samples: usize,
    pub sharpness: f64,
    pub seed: u64,
    /// Return the parameters of the epoch with the best validation ρ.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_samples: 256,
            sharpness: 50.0,
            seed: 0,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_samples == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.sharpness > 0.0) {
            return Err(Error::config(
                "learning rate and sharpness must be positive",
            ));
        }
        Ok(())
    }

    pub fn days_per_step(&self, stocks: usize) -> usize {
        self.batch_samples.div_ceil(stocks.max(1)).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of −ρ_s over training days.
    pub train_loss: f64,
    /// Mean exact Spearman over validation days (NaN without validation days).
    pub valid_rho: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub prior: String,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn final_valid_rho(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.valid_rho)
    }

    pub fn best_valid_rho(&self) -> f64 {
        self.history
            .get(self.best_epoch)
            .map_or(f64::NAN, |e| e.valid_rho)
    }
}

/// Precomputed train and validation cross-sections.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<DayBatch>,
    pub valid: Vec<DayBatch>,
}

impl TrainData {
    pub fn new(panel: &MarketPanel, split: &SplitSpec, lookback: usize) -> Self {
        Self {
            train: panel.batches(&split.train_days(), lookback),
            valid: panel.batches(&split.valid_days(), lookback),
        }
    }

    pub fn stocks(&self) -> usize {
        self.train.first().map_or(0, |b| b.labels.len())
    }
}

/// A day contributes to the ranking loss only when its labels are finite and
/// not all equal.
pub fn rankable(labels: &[f64]) -> bool {
    labels.len() >= 2
        && labels.iter().all(|v| v.is_finite())
        && labels.iter().any(|&v| v != labels[0])
}

/// Loss value and gradients for one day.
fn day_gradient(
    params: &ModelParams,
    prior: &BuiltPrior,
    batch: &DayBatch,
    sharpness: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant_shared(batch.x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = forward(&bound, &params.config, prior, x, Some(&mut rng))?;
    let loss = soft_spearman(out.logits, &batch.labels, sharpness)?.neg();
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            stage: "teacher loss".into(),
            layer: None,
            epoch: None,
        });
    }
    loss.backward()?;
    Ok((value, bound.grads()))
}

/// Mean of per-day gradients, summed in day order.
pub(crate) fn average_grads(parts: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    acc
}

pub(crate) fn check_finite(params: &ModelParams, stage: &str, epoch: usize) -> Result<()> {
    if params
        .tensors
        .iter()
        .any(|t| t.tensor.has_nan() || t.tensor.data().iter().any(|v| v.is_infinite()))
    {
        return Err(Error::Divergence {
            stage: stage.into(),
            layer: None,
            epoch: Some(epoch),
        });
    }
    Ok(())
}

/// Logits for every batch, without gradient tracking.
pub fn predict_days(
    params: &ModelParams,
    prior: &BuiltPrior,
    batches: &[DayBatch],
) -> Result<Vec<Vec<f64>>> {
    exec::map(batches, |b| params.logits(prior, &b.x))
        .into_iter()
        .collect()
}

/// Mean exact Spearman between logits and labels over rankable days.
pub fn evaluate_days(
    params: &ModelParams,
    prior: &BuiltPrior,
    batches: &[DayBatch],
) -> Result<f64> {
    let preds = predict_days(params, prior, batches)?;
    let rhos: Vec<f64> = preds
        .iter()
        .zip(batches)
        .filter(|(_, b)| rankable(&b.labels))
        .filter_map(|(p, b)| stats::spearman(p, &b.labels))
        .collect();
    Ok(if rhos.is_empty() {
        f64::NAN
    } else {
        stats::mean(&rhos)
    })
}

/// Trains one teacher. The initialization and shuffling streams are derived
/// from `cfg.seed` and the prior kind only.
pub fn train_teacher(
    data: &TrainData,
    backbone: &BackboneConfig,
    prior: &PriorSpec,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let kind = prior.kind().name();
    let built = prior.build(backbone.lookback, backbone.heads)?;
    let mut params = ModelParams::init(
        backbone,
        prior,
        derive_seed(cfg.seed, &format!("init/{kind}")),
    )?;
    let mut opt = Adam::new(&params, cfg.lr);
    let mut order: Vec<usize> = (0..data.train.len())
        .filter(|&i| rankable(&data.train[i].labels))
        .collect();
    if order.is_empty() {
        return Err(Error::data("no rankable training days"));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{kind}")));
    let step_days = cfg.days_per_step(data.stocks());
    let mut report = TrainReport {
        prior: kind.into(),
        ..Default::default()
    };
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut losses = Vec::with_capacity(order.len());
        for chunk in order.chunks(step_days) {
            let parts = exec::map(chunk, |&i| {
                let seed = derive_seed(cfg.seed, &format!("dropout/{kind}/{epoch}/{i}"));
                day_gradient(&params, &built, &data.train[i], cfg.sharpness, seed)
            });
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (l, g) = p.map_err(|e| e.at_epoch(epoch))?;
                losses.push(l);
                grads.push(g);
            }
            opt.step(&mut params, &average_grads(grads));
            check_finite(&params, "teacher update", epoch)?;
        }
        let valid_rho =
            evaluate_days(&params, &built, &data.valid).map_err(|e| e.at_epoch(epoch))?;
        let train_loss = stats::mean(&losses);
        log::info!("{kind} epoch {epoch}: train {train_loss:.4} valid rho {valid_rho:.4}");
        report.history.push(EpochLog {
            epoch,
            train_loss,
            valid_rho,
        });
        if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| valid_rho > *b) {
            best = Some((valid_rho, params.clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, p)) = best {
        return Ok((p, report));
    }
    report.best_epoch = report.history.len() - 1;
    Ok((params, report))
}

/// Trains each spec independently; the first failure aborts with its identity.
pub fn train_teachers(
    data: &TrainData,
    backbone: &BackboneConfig,
    specs: &[PriorSpec],
    cfg: &TrainConfig,
) -> Result<Vec<(ModelParams, TrainReport)>> {
    if specs.is_empty() {
        return Err(Error::config("no teachers selected"));
    }
    exec::map(specs, |spec| {
        train_teacher(data, backbone, spec, cfg).map_err(|e| match e {
            Error::Divergence {
                stage,
                layer,
                epoch,
            } => Error::Divergence {
                stage: format!("{} teacher: {stage}", spec.kind()),
                layer,
                epoch,
            },
            Error::Config(m) => Error::config(format!("{} teacher: {m}", spec.kind())),
            Error::Data(m) => Error::data(format!("{} teacher: {m}", spec.kind())),
            other => other,
        })
    })
    .into_iter()
    .collect()
}

pub fn train_all_teachers(
    data: &TrainData,
    backbone: &BackboneConfig,
    set: &TeacherSetSpec,
    cfg: &TrainConfig,
) -> Result<Vec<(ModelParams, TrainReport)>> {
    if set.specs().len() != TeacherSetSpec::SIZE {
        return Err(Error::config(format!(
            "expected 7 teachers, got {}",
            set.specs().len()
        )));
    }
    train_teachers(data, backbone, set.specs(), cfg)
}
