//! Training recipe: Adam, warmup with inverse square-root decay, NLL loss
//! and patience-based early stopping on validation EER.

use std::collections::BTreeMap;
use std::path::PathBuf;

use accent_core::augment::{self, AugmentConfig};
use accent_core::eval::eer_from_pairs;
use accent_core::frontend::{
    fix_duration, load_audio, DurationMode, FeatureCache, FeatureExtractor, FeatureMatrix, FrontendConfig,
};
use accent_core::{seed, Label, Manifest};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Classifier, ParamBlob};
use crate::optim::{Adam, AdamParams};
use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    InverseSqrt,
    SslExponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub patience_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer updates.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub schedule_kind: ScheduleKind,
    pub ssl_freeze_epochs: usize,
    pub ssl_warmup_epochs: usize,
    /// Per-epoch decay factor after the SSL warmup.
    pub ssl_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 1000,
            weight_decay: 1e-4,
            patience_epochs: 12,
            batch_size: 32,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            augment: AugmentConfig::default(),
            schedule_kind: ScheduleKind::InverseSqrt,
            ssl_freeze_epochs: 10,
            ssl_warmup_epochs: 5,
            ssl_gamma: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if self.patience_epochs < 1 {
            return bad("patience_epochs must be at least 1");
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(self.ssl_gamma > 0.0 && self.ssl_gamma <= 1.0) {
            return bad("ssl_gamma must lie in (0, 1]");
        }
        self.augment
            .validate()
            .map_err(|e| NnError::Config(format!("augment: {e}")))
    }
}

/// `base_lr * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = config.warmup_steps.max(1) as f64;
    config.base_lr * (s / w).min((w / s).sqrt())
}

/// `(encoder_frozen, lr_scale)` for a 1-based epoch.
pub fn ssl_training_policy(epoch: usize, config: &TrainConfig) -> (bool, f64) {
    let frozen = epoch <= config.ssl_freeze_epochs;
    let warm = config.ssl_warmup_epochs;
    let scale = if warm > 0 && epoch <= warm {
        epoch as f64 / warm as f64
    } else {
        config.ssl_gamma.powi((epoch - warm) as i32)
    };
    (frozen, scale)
}

/// Indexed supply of labelled feature matrices.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn label(&self, index: usize) -> Label;
    /// Features of one item. Training sources may vary them by epoch.
    fn features(&self, index: usize, epoch: u64) -> Result<FeatureMatrix, NnError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct InMemorySource {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub features: Vec<FeatureMatrix>,
}

impl FeatureSource for InMemorySource {
    fn len(&self) -> usize {
        self.features.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn label(&self, index: usize) -> Label {
        self.labels[index]
    }

    fn features(&self, index: usize, _epoch: u64) -> Result<FeatureMatrix, NnError> {
        Ok(self.features[index].clone())
    }
}

/// Features computed from manifest audio.
///
/// Training sources augment, then crop per `train_mode` with offsets keyed
/// by `(seed, utt_id, epoch)`. Evaluation sources never augment and crop the
/// centre, and use the feature cache when one is configured.
pub struct ManifestSource {
    manifest: Manifest,
    frontend: FrontendConfig,
    augment: AugmentConfig,
    seed: u64,
    train: bool,
    extractor: FeatureExtractor,
    cache: Option<FeatureCache>,
}

impl ManifestSource {
    pub fn new(
        manifest: Manifest,
        frontend: &FrontendConfig,
        augment: &AugmentConfig,
        seed: u64,
        train: bool,
    ) -> Self {
        let cache = frontend
            .cache_dir
            .as_ref()
            .map(|d| FeatureCache::new(d.join(format!("center-{}s", frontend.duration_sec)), &frontend.features));
        Self {
            manifest,
            frontend: frontend.clone(),
            augment: augment.clone(),
            seed,
            train,
            extractor: FeatureExtractor::new(frontend.features.clone()),
            cache,
        }
    }

    pub fn evaluation(manifest: Manifest, frontend: &FrontendConfig) -> Self {
        Self::new(manifest, frontend, &AugmentConfig::disabled(), 0, false)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn audio_path(&self, index: usize) -> PathBuf {
        self.manifest.resolve_audio(&self.manifest.records()[index])
    }

}

impl FeatureSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.manifest.records()[index].utt_id
    }

    fn label(&self, index: usize) -> Label {
        self.manifest.records()[index].label
    }

    fn features(&self, index: usize, epoch: u64) -> Result<FeatureMatrix, NnError> {
        let id = self.id(index);
        let cache = self.cache.as_ref().filter(|_| !self.train);
        if let Some(hit) = cache.and_then(|c| c.get(id)) {
            return Ok(hit);
        }
        let mut wave = load_audio(self.audio_path(index), self.frontend.features.sample_rate)?;
        let mode = if self.train {
            wave = augment::apply_random(&wave, &self.augment, id, epoch, self.seed)?;
            self.frontend.train_mode
        } else {
            DurationMode::CropCenter
        };
        let key = seed::derive(self.seed, "trainer.crop", &[id.as_bytes(), &epoch.to_le_bytes()]);
        let wave = fix_duration(&wave, self.frontend.duration_sec, mode, key)?;
        let f = self.extractor.extract(&wave)?;
        if let Some(c) = cache {
            c.put(id, &f)?;
        }
        Ok(f)
    }
}

/// Score every item of a source. Scores are `log p(bona) - log p(spoof)`.
pub fn score_source(
    model: &Classifier,
    source: &dyn FeatureSource,
    batch_size: usize,
) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(source.len());
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let feats = load_batch(source, chunk, 0)?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        out.extend(model.scores(&refs)?);
    }
    Ok(out)
}

fn load_batch(source: &dyn FeatureSource, indices: &[usize], epoch: u64) -> Result<Vec<FeatureMatrix>, NnError> {
    indices.par_iter().map(|&i| source.features(i, epoch)).collect()
}

/// Produces the early-stopping metric after each epoch; lower is better.
pub trait Validator {
    fn evaluate(&mut self, model: &Classifier) -> Result<f64, NnError>;
}

/// Pooled EER over a validation source.
pub struct EerValidator<'a> {
    pub source: &'a dyn FeatureSource,
    pub batch_size: usize,
}

impl Validator for EerValidator<'_> {
    fn evaluate(&mut self, model: &Classifier) -> Result<f64, NnError> {
        let scores = score_source(model, self.source, self.batch_size)?;
        let mut pairs: Vec<(f64, Label)> = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, self.source.label(i)))
            .collect();
        Ok(eer_from_pairs(&mut pairs)?.eer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub valid_metric: f64,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub encoder_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stop_reason: StopReason,
    pub base_lr: f64,
    pub batch_size: usize,
}

pub struct TrainOutcome {
    /// Parameters of the best epoch; also loaded into the model.
    pub best_params: BTreeMap<String, ParamBlob>,
    pub history: TrainHistory,
}

/// Improvement threshold on the validation metric.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

pub fn train(
    model: &mut Classifier,
    train_source: &dyn FeatureSource,
    validator: &mut dyn Validator,
    config: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    config.validate()?;
    let n = train_source.len();
    let bona = (0..n).filter(|&i| train_source.label(i) == Label::BonaFide).count();
    if bona == 0 || bona == n {
        return Err(NnError::SingleClass { items: n, bona_fide: bona });
    }
    let mut opt = Adam::new(AdamParams {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        weight_decay: config.weight_decay,
    });
    let device = model.device().clone();
    let mut step: u64 = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, ParamBlob>)> = None;
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let (frozen, lr_scale) = match config.schedule_kind {
            ScheduleKind::SslExponential => ssl_training_policy(epoch, config),
            ScheduleKind::InverseSqrt => (false, 1.0),
        };
        model.set_encoder_frozen(frozen);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(config.seed, "trainer.shuffle", &[&(epoch as u64).to_le_bytes()]));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        let mut out_of_steps = false;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                out_of_steps = true;
                break;
            }
            step += 1;
            lr = match config.schedule_kind {
                ScheduleKind::InverseSqrt => lr_at(step, config),
                ScheduleKind::SslExponential => config.base_lr * lr_scale,
            };
            let feats = load_batch(train_source, chunk, epoch as u64)?;
            let refs: Vec<&FeatureMatrix> = feats.iter().collect();
            let x = model.batch_tensor(&refs)?;
            let y: Vec<u32> = chunk
                .iter()
                .map(|&i| train_source.label(i).class_index() as u32)
                .collect();
            let y = Tensor::new(y.as_slice(), &device)?;
            let logp = model.forward_t(&x, true)?;
            let loss = candle_nn::loss::nll(&logp, &y)?;
            let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(NnError::Diverged { epoch, step, loss: lv });
            }
            let grads = loss.backward()?;
            opt.step(&model.trainable(), &grads, lr)?;
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            stop = StopReason::MaxSteps;
            break;
        }

        let metric = validator.evaluate(model)?;
        tracing::info!(epoch, step, train_loss = loss_sum / seen as f64, valid = metric, lr, "epoch done");
        epochs.push(EpochRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / seen as f64,
            valid_metric: metric,
            lr,
            encoder_frozen: frozen,
        });
        let improved = match &best {
            None => true,
            Some((_, b, _)) => metric < b - MIN_IMPROVEMENT,
        };
        if improved {
            best = Some((epoch, metric, model.state_dict()?));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if out_of_steps || config.max_steps.is_some_and(|m| step >= m) {
            stop = StopReason::MaxSteps;
            break 'epochs;
        }
        if since_best >= config.patience_epochs {
            stop = StopReason::Patience;
            break 'epochs;
        }
    }

    let (best_epoch, best_metric, best_params) =
        best.ok_or_else(|| NnError::Config("training ran no epochs".into()))?;
    model.load_state_dict(&best_params)?;
    Ok(TrainOutcome {
        best_params,
        history: TrainHistory {
            epochs,
            best_epoch,
            best_metric,
            stop_reason: stop,
            base_lr: config.base_lr,
            batch_size: config.batch_size,
        },
    })
}
