//! Mini-batch training with the clean/masked dual pass, per-epoch
//! validation with best-checkpoint selection, and evaluation.

use std::path::Path;

use hero_tensor::{load_checkpoint, save_checkpoint, Adam, AdamConfig, LrSchedule, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, Vocabulary};
use crate::head::Span;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{evaluate, HitRule, MetricsReport};
use crate::model::{Batch, HeroModel, ModelConfig};
use crate::synth::{Dataset, Sample, Split};
use crate::{HeroError, Result};

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    PerStep,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub decay: Decay,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub hit_rule: HitRule,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 5e-4,
            clip: Some(1.0),
            decay: Decay::PerStep,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            hit_rule: HitRule::AtLeast,
            eval_batch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HeroError::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(HeroError::config("batch_size", "must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(HeroError::config("eval_batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HeroError::config("lr", "must be a positive finite value"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(HeroError::config("clip", "must be a positive finite value"));
            }
        }
        for (name, v) in [("loss.lambda1", self.loss.lambda1), ("loss.lambda2", self.loss.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HeroError::config(name, "must be a finite value >= 0"));
            }
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub test_iid: Option<MetricsReport>,
    pub test_ov: Option<MetricsReport>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,l_tsgv,l_rs,l_cl,total,lr";

    pub fn steps_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e}\n",
                s.step, s.loss.l_tsgv, s.loss.l_rs, s.loss.l_cl, s.loss.total, s.lr
            ));
        }
        out
    }
}

/// A trained model with its parameters.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: HeroModel,
    pub store: ParamStore,
    pub log: TrainLog,
}

/// Observer for progress reporting.
pub trait TrainObserver {
    fn step(&mut self, _log: &StepLog) {}
    fn epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

pub fn build_model(cfg: &TrainConfig, table: &EmbeddingTable, d_v: usize) -> Result<(HeroModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = HeroModel::new(&mut store, cfg.model.clone(), table, d_v, cfg.seed)?;
    Ok((model, store))
}

/// Inference over `samples` in batches of `batch`.
pub fn predict(model: &HeroModel, store: &ParamStore, vocab: &Vocabulary, samples: &[Sample], batch: usize) -> Result<Vec<Span>> {
    let mut spans = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        spans.extend(model.predict(store, &Batch::new(&refs, vocab)?)?);
    }
    Ok(spans)
}

pub fn evaluate_model(
    model: &HeroModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    samples: &[Sample],
    rule: HitRule,
    batch: usize,
) -> Result<MetricsReport> {
    let preds = predict(model, store, vocab, samples, batch)?;
    let gts: Vec<Span> = samples.iter().map(|s| s.span).collect();
    evaluate(&preds, &gts, rule)
}

/// Loss of one mini-batch on a fresh tape, with gradients accumulated into
/// `store`.
pub fn train_step(
    model: &HeroModel,
    store: &mut ParamStore,
    batch: &Batch,
    masked_ids: Option<&[usize]>,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, batch, masked_ids)?;
    let agg = &out.aggregated;
    let heads = [Some(agg.p_s), Some(agg.p_e), Some(agg.rs), agg.rs_m];
    if heads.into_iter().flatten().any(|v| tape.value(v).iter().any(|x| !x.is_finite())) {
        // overflowed activations; the caller reports the divergence
        return Ok(LossBreakdown {
            l_tsgv: f64::NAN,
            l_rs: f64::NAN,
            l_cl: f64::NAN,
            total: f64::NAN,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
        });
    }
    let (total, breakdown) = total_loss(&mut tape, &out.aggregated, &batch.spans, loss)?;
    if breakdown.total.is_finite() {
        tape.backward(total)?;
        store.accumulate(&tape);
    }
    Ok(breakdown)
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<Trained> {
    train_observed(cfg, ds, &mut ())
}

pub fn train_observed(cfg: &TrainConfig, ds: &Dataset, obs: &mut dyn TrainObserver) -> Result<Trained> {
    cfg.validate()?;
    let train = ds.split(Split::Train)?;
    let val = ds.split(Split::Val)?;
    let vocab = &ds.world.vocab;
    let (model, mut store) = build_model(cfg, &ds.world.table, ds.world.d_v)?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam_cfg = AdamConfig::new(cfg.lr, total_steps);
    adam_cfg.clip_norm = cfg.clip;
    adam_cfg.schedule = match cfg.decay {
        Decay::PerStep => LrSchedule::LinearPerStep,
        Decay::PerEpoch => LrSchedule::LinearPerEpoch { steps_per_epoch },
    };
    let mut adam = Adam::new(adam_cfg, &store);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    // the mask stream exists only when the masked branch does
    let mut mask_rng = model.uses_masking().then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(MASK_STREAM);
        r
    });

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&samples, vocab)?;
            let masked = match mask_rng.as_mut() {
                Some(rng) => {
                    let seeds: Vec<u64> = (0..batch.size()).map(|_| rng.gen()).collect();
                    Some(batch.masked_ids(cfg.model.mask_ratio, &seeds)?)
                }
                None => None,
            };
            let step = log.steps.len();
            let breakdown = train_step(&model, &mut store, &batch, masked.as_deref(), &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(HeroError::Divergence {
                    step,
                    value: breakdown.total,
                });
            }
            let lr = adam.step(&mut store)?;
            epoch_total += breakdown.total;
            let entry = StepLog {
                step,
                loss: breakdown,
                lr,
            };
            obs.step(&entry);
            log.steps.push(entry);
        }
        let report = evaluate_model(&model, &store, vocab, val, cfg.hit_rule, cfg.eval_batch)?;
        let entry = EpochLog {
            epoch,
            mean_total: epoch_total / steps_per_epoch as f64,
            val: report.clone(),
        };
        obs.epoch(&entry);
        log.epochs.push(entry);
        if best.as_ref().map_or(true, |(m, _)| report.miou > *m) {
            best = Some((report.miou, store.clone()));
            log.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        store = params;
    }
    for (split, slot) in [(Split::TestIid, &mut log.test_iid), (Split::TestOv, &mut log.test_ov)] {
        if let Ok(samples) = ds.split(split) {
            *slot = Some(evaluate_model(&model, &store, vocab, samples, cfg.hit_rule, cfg.eval_batch)?);
        }
    }
    Ok(Trained { model, store, log })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    d_v: usize,
}

pub fn save_model(path: &Path, cfg: &TrainConfig, model: &HeroModel, store: &ParamStore) -> Result<()> {
    let meta = serde_json::to_value(CheckpointMeta {
        config: cfg.clone(),
        d_v: model.d_v(),
    })?;
    Ok(save_checkpoint(store, meta, path)?)
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
/// Frozen embedding rows come from `table`.
pub fn load_model(path: &Path, table: &EmbeddingTable) -> Result<(TrainConfig, HeroModel, ParamStore)> {
    let (loaded, meta) = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let (model, mut store) = build_model(&meta.config, table, meta.d_v)?;
    store.copy_values_from(&loaded)?;
    Ok((meta.config, model, store))
}
