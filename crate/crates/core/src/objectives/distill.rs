//! Student distillation from a frozen teacher ensemble.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{distill_loss, ensemble_target, smooth_target, soft_spearman};
use crate::data::DayBatch;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    average_grads, check_finite, evaluate_days, forward, rankable, Adam, BackboneConfig, EpochLog,
    ModelParams, TrainData,
};
use crate::priors::{BuiltPrior, PriorSpec};
use crate::seed::derive_seed;
use crate::stats;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub smoothing: f64,
    pub swa_epochs: usize,
    pub total_epochs: usize,
    pub lr: f64,
    /// Weight of the distillation term; the rest goes to −ρ_s on the labels.
    pub lambda: f64,
    pub sharpness: f64,
    pub batch_samples: usize,
    pub use_ls: bool,
    pub use_swa: bool,
    /// Compute teacher logits once up front instead of every epoch.
    pub precompute: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            smoothing: 0.9,
            swa_epochs: 10,
            total_epochs: 20,
            lr: 1e-4,
            lambda: 1.0,
            sharpness: 50.0,
            batch_samples: 256,
            use_ls: true,
            use_swa: true,
            precompute: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Plain distillation: τ = 1, no smoothing, no averaging.
    pub fn vanilla() -> Self {
        Self {
            temperature: 1.0,
            use_ls: false,
            use_swa: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::config(format!(
                "smoothing must lie in [0, 1], got {}",
                self.smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.total_epochs == 0 || self.swa_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "need 0 < swa_epochs ({}) <= total_epochs ({})",
                self.swa_epochs, self.total_epochs
            )));
        }
        if self.use_swa && self.swa_epochs == 0 {
            return Err(Error::config("SWA enabled with zero averaging epochs"));
        }
        if !(self.lr > 0.0 && self.sharpness > 0.0) || self.batch_samples == 0 {
            return Err(Error::config(
                "lr, sharpness and batch size must be positive",
            ));
        }
        Ok(())
    }

    pub fn effective_smoothing(&self) -> f64 {
        if self.use_ls {
            self.smoothing
        } else {
            0.0
        }
    }
}

/// A frozen teacher with its resolved prior.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub params: ModelParams,
    pub prior: BuiltPrior,
}

impl TeacherModel {
    pub fn new(params: ModelParams, spec: &PriorSpec) -> Result<Self> {
        let prior = spec.build(params.config.lookback, params.config.heads)?;
        Ok(Self { params, prior })
    }

    pub fn logits(&self, batch: &DayBatch) -> Result<Vec<f64>> {
        self.params.logits(&self.prior, &batch.x)
    }
}

/// Per-teacher logits for one day.
pub fn teacher_logits(teachers: &[TeacherModel], batch: &DayBatch) -> Result<Vec<Vec<f64>>> {
    exec::map(teachers, |t| t.logits(batch))
        .into_iter()
        .collect()
}

/// Element-wise mean of parameter snapshots.
pub fn swa_average(snapshots: &[ModelParams]) -> Result<ModelParams> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::config("no snapshots to average"))?;
    if snapshots.iter().any(|s| !s.same_layout(first)) {
        return Err(Error::config("snapshots have different parameter layouts"));
    }
    let n = snapshots.len() as f64;
    let mut out = first.clone();
    for (i, t) in out.tensors.iter_mut().enumerate() {
        for (j, v) in t.tensor.data_mut().iter_mut().enumerate() {
            let sum: f64 = snapshots
                .iter()
                .map(|s| s.tensors[i].tensor.data()[j])
                .sum();
            *v = sum / n;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub history: Vec<EpochLog>,
    pub snapshots_averaged: usize,
    /// Validation Spearman of the returned (possibly averaged) parameters.
    pub final_valid_rho: f64,
}

fn student_day(
    params: &ModelParams,
    prior: &BuiltPrior,
    batch: &DayBatch,
    target: &[f64],
    cfg: &DistillConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant_shared(batch.x.clone());
    let out = forward(&bound, &params.config, prior, x, None)?;
    let mut loss = distill_loss(out.logits, target)?.scale(cfg.lambda);
    if cfg.lambda < 1.0 && rankable(&batch.labels) {
        let rho = soft_spearman(out.logits, &batch.labels, cfg.sharpness)?;
        loss = loss.sub(rho.scale(1.0 - cfg.lambda))?;
    }
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            stage: "student loss".into(),
            layer: None,
            epoch: None,
        });
    }
    loss.backward()?;
    Ok((value, bound.grads()))
}

/// Trains a vanilla-prior student on teacher targets only (unless
/// `lambda < 1`) and returns the SWA average of the final epochs.
pub fn train_student(
    data: &TrainData,
    backbone: &BackboneConfig,
    teachers: &[TeacherModel],
    cfg: &DistillConfig,
) -> Result<(ModelParams, StudentReport)> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::config("distillation needs at least one teacher"));
    }
    if data.train.is_empty() {
        return Err(Error::data("no training days"));
    }
    let spec = PriorSpec::Vanilla;
    let prior = spec.build(backbone.lookback, backbone.heads)?;
    let mut params = ModelParams::init(backbone, &spec, derive_seed(cfg.seed, "init/student"))?;
    let mut opt = Adam::new(&params, cfg.lr);
    let eps = cfg.effective_smoothing();
    let target_for = |b: &DayBatch| -> Result<Vec<f64>> {
        let logits = teacher_logits(teachers, b)?;
        smooth_target(&ensemble_target(&logits, cfg.temperature)?, eps)
    };
    let cached: Option<Vec<Vec<f64>>> = if cfg.precompute {
        Some(
            exec::map(&data.train, &target_for)
                .into_iter()
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle/student"));
    let step_days = cfg.batch_samples.div_ceil(data.stocks().max(1)).max(1);
    let mut report = StudentReport::default();
    let mut snapshots = Vec::new();
    let swa_start = cfg.total_epochs - cfg.swa_epochs;
    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut shuffle);
        let mut losses = Vec::with_capacity(order.len());
        for chunk in order.chunks(step_days) {
            let parts = exec::map(chunk, |&i| {
                let b = &data.train[i];
                let target = match &cached {
                    Some(c) => c[i].clone(),
                    None => target_for(b)?,
                };
                student_day(&params, &prior, b, &target, cfg)
            });
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (l, g) = p.map_err(|e| e.at_epoch(epoch))?;
                losses.push(l);
                grads.push(g);
            }
            opt.step(&mut params, &average_grads(grads));
            check_finite(&params, "student update", epoch)?;
        }
        let valid_rho =
            evaluate_days(&params, &prior, &data.valid).map_err(|e| e.at_epoch(epoch))?;
        let train_loss = stats::mean(&losses);
        log::info!("student epoch {epoch}: loss {train_loss:.5} valid rho {valid_rho:.4}");
        report.history.push(EpochLog {
            epoch,
            train_loss,
            valid_rho,
        });
        if cfg.use_swa && epoch >= swa_start {
            snapshots.push(params.clone());
        }
    }
    let out = if cfg.use_swa {
        swa_average(&snapshots)?
    } else {
        params
    };
    report.snapshots_averaged = snapshots.len();
    report.final_valid_rho = evaluate_days(&out, &prior, &data.valid)?;
    Ok((out, report))
}
