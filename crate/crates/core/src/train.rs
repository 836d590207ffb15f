//! Deterministic SGD training harness.
//!
//! One run = seeded initialization, per-epoch seeded shuffles, plain SGD with
//! a step-decayed learning rate, and retention of the parameters with the
//! best validation accuracy (earliest epoch on ties). Per-sample work may
//! run on several threads but gradients are reduced in batch order, so a
//! fixed seed gives the same bytes regardless of thread count.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{batch_step, BatchItem, LossConfig, SaliencyReduction};
use crate::model::{argmax, log_softmax, CamClass, Classifier, ParamSpec, ReferenceBackboneConfig};
use crate::preprocess::LabeledSample;
use crate::saliency::{resize_to_cam, HumanSaliencyMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Cross-entropy only on the limited training set.
    CeOnly,
    /// Composite saliency + cross-entropy loss.
    #[default]
    Cyborg,
    /// Cross-entropy only on an enlarged training set.
    CeExtraData,
}

impl Scenario {
    pub fn uses_saliency(self) -> bool {
        self == Scenario::Cyborg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// `0` evaluates the initialization without updating it.
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub scenario: Scenario,
    pub cam_class: CamClass,
    pub saliency_reduction: SaliencyReduction,
    pub backbone: ReferenceBackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            epochs: 50,
            lr_decay_factor: 0.1,
            lr_decay_every: 12,
            batch_size: 32,
            alpha: 0.5,
            seed: 0,
            scenario: Scenario::default(),
            cam_class: CamClass::default(),
            saliency_reduction: SaliencyReduction::default(),
            backbone: ReferenceBackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("lr must be > 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::validation("lr_decay_factor must be in (0, 1]"));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::validation("lr_decay_every and batch_size must be >= 1"));
        }
        self.loss_config().validate()?;
        self.backbone.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.lr_decay_every) as i32;
        // Dividing by the reciprocal keeps 0.005 · 0.1^k on the nearest double.
        self.lr / (1.0 / self.lr_decay_factor).powi(decays)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: if self.scenario.uses_saliency() { self.alpha } else { 1.0 },
            saliency_reduction: self.saliency_reduction,
            ..Default::default()
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        total: f64,
        human_term: f64,
        ce_term: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        mean_train_loss: f64,
        train_accuracy: f64,
        val_accuracy: f64,
        best_epoch: usize,
    },
    Abort {
        step: usize,
        epoch: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config_hash: String,
    epoch: usize,
    validation_accuracy: f64,
    backbone: ReferenceBackboneConfig,
    params: Vec<ParamSpec>,
}

const CHECKPOINT_FORMAT: &str = "cyborg-checkpoint-v1";

/// Parameter snapshot plus the metadata needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub specs: Vec<ParamSpec>,
    /// Number of completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub validation_accuracy: f64,
    pub config_hash: String,
    pub backbone: ReferenceBackboneConfig,
}

impl Checkpoint {
    /// JSON header line followed by little-endian `f64` parameter arrays in
    /// spec order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            validation_accuracy: self.validation_accuracy,
            backbone: self.backbone.clone(),
            params: self.specs.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for spec in &self.specs {
            for v in &self.params[spec.offset..spec.offset + spec.len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("unknown checkpoint format {:?}", header.format)));
        }
        let mut raw = Vec::new();
        reader
            .read_to_end(&mut raw)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let total: usize = header.params.iter().map(|s| s.len).sum();
        let n = header.params.iter().map(|s| s.offset + s.len).max().unwrap_or(0);
        if raw.len() != total * 8 || total != n {
            return Err(Error::shape(format!("{} parameter bytes", n * 8), format!("{} bytes", raw.len())));
        }
        let mut params = vec![0.0; n];
        let mut chunks = raw.chunks_exact(8);
        for spec in &header.params {
            for p in &mut params[spec.offset..spec.offset + spec.len] {
                let c = chunks.next().expect("length checked");
                *p = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        Ok(Checkpoint {
            params,
            specs: header.params,
            epoch: header.epoch,
            validation_accuracy: header.validation_accuracy,
            config_hash: header.config_hash,
            backbone: header.backbone,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_reader(f)
    }

    pub fn to_model(&self) -> Result<Classifier> {
        let mut model = Classifier::from_config(self.backbone.clone(), 0)?;
        if model.param_specs() != self.specs.as_slice() {
            return Err(Error::validation("checkpoint parameters do not match its backbone"));
        }
        model.set_params(self.params.clone())?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, epoch: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot (the initialization if nothing trained).
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub status: RunStatus,
    /// Validation accuracy per completed epoch.
    pub val_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn metrics_jsonl(&self) -> Result<Vec<u8>> {
        crate::jsonl::to_bytes(&self.metrics)
    }
}

fn checkpoint_of(model: &Classifier, cfg: &TrainConfig, epoch: usize, val_acc: f64) -> Checkpoint {
    Checkpoint {
        params: model.params().to_vec(),
        specs: model.param_specs().to_vec(),
        epoch,
        validation_accuracy: val_acc,
        config_hash: cfg.hash(),
        backbone: cfg.backbone.clone(),
    }
}

/// Fraction of samples whose argmax logit equals the label. No saliency term.
pub fn accuracy(model: &Classifier, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            model
                .forward_sample(&s.pixels)
                .map(|(o, _)| usize::from(argmax(&o.logits) == s.label.index()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Softmax probability of the synthetic class for each sample.
pub fn synthetic_scores(model: &Classifier, samples: &[LabeledSample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| {
            model
                .forward_sample(&s.pixels)
                .map(|(o, _)| log_softmax(&o.logits)[1].exp())
        })
        .collect()
}

/// Train one model. Non-finite losses stop the run early; the outcome then
/// carries [`RunStatus::Aborted`] and the last good best-validation snapshot.
pub fn train_one(cfg: &TrainConfig, train: &[LabeledSample], val: &[LabeledSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("training and validation sets must be nonempty"));
    }
    let mut model = Classifier::from_config(cfg.backbone.clone(), cfg.seed)?;
    let [_, cam_h, cam_w] = cfg.backbone.feature_shape();
    let cam_maps: Vec<Option<HumanSaliencyMap>> = if cfg.scenario.uses_saliency() {
        let maps = train
            .iter()
            .map(|s| s.saliency.as_ref().map(|m| resize_to_cam(m, cam_h, cam_w)).transpose())
            .collect::<Result<Vec<_>>>()?;
        if maps.iter().all(Option::is_none) {
            return Err(Error::validation("saliency-guided training needs at least one human saliency map"));
        }
        maps
    } else {
        vec![None; train.len()]
    };
    let loss_cfg = cfg.loss_config();

    let init_acc = accuracy(&model, val)?;
    let mut best = checkpoint_of(&model, cfg, 0, init_acc);
    let mut metrics = Vec::new();
    let mut val_history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    input: &train[i].pixels,
                    label: train[i].label.index(),
                    saliency: cam_maps[i].as_ref(),
                })
                .collect();
            let result = batch_step(&model, &batch, &loss_cfg, cfg.cam_class, true).and_then(|s| {
                if s.grads.iter().all(|g| g.is_finite()) {
                    Ok(s)
                } else {
                    Err(Error::Numerical("non-finite gradient".into()))
                }
            });
            let out = match result {
                Ok(out) => out,
                Err(Error::Numerical(reason)) => {
                    log::error!("run with seed {} aborted at step {step}: {reason}", cfg.seed);
                    metrics.push(MetricRecord::Abort {
                        step,
                        epoch,
                        reason: reason.clone(),
                    });
                    return Ok(TrainOutcome {
                        checkpoint: best,
                        metrics,
                        status: RunStatus::Aborted { step, epoch, reason },
                        val_history,
                    });
                }
                Err(e) => return Err(e),
            };
            for (p, g) in model.params_mut().iter_mut().zip(&out.grads) {
                *p -= lr * g;
            }
            correct += out
                .logits
                .iter()
                .zip(&batch)
                .filter(|(l, b)| argmax(l) == b.label)
                .count();
            loss_sum += out.loss.total * batch.len() as f64;
            metrics.push(MetricRecord::Step {
                step,
                epoch,
                lr,
                total: out.loss.total,
                human_term: out.loss.human_term,
                ce_term: out.loss.ce_term,
            });
            step += 1;
        }

        let val_acc = accuracy(&model, val)?;
        val_history.push(val_acc);
        if epoch == 0 || val_acc > best.validation_accuracy {
            best = checkpoint_of(&model, cfg, epoch + 1, val_acc);
        }
        metrics.push(MetricRecord::Epoch {
            epoch,
            lr,
            mean_train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy: val_acc,
            best_epoch: best.epoch,
        });
        log::debug!("seed {} epoch {epoch}: val acc {val_acc:.4}", cfg.seed);
    }
    Ok(TrainOutcome {
        checkpoint: best,
        metrics,
        status: RunStatus::Completed,
        val_history,
    })
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug)]
pub struct RunSet {
    pub runs: Vec<RunRecord>,
}

impl RunSet {
    /// True when any run stopped early.
    pub fn is_partial(&self) -> bool {
        self.runs
            .iter()
            .any(|r| matches!(r.outcome.status, RunStatus::Aborted { .. }))
    }
}

/// Train `n_seeds` independent runs with seeds `cfg.seed .. cfg.seed + n`.
pub fn run_replicates(
    cfg: &TrainConfig,
    n_seeds: usize,
    train: &[LabeledSample],
    val: &[LabeledSample],
) -> Result<RunSet> {
    if n_seeds == 0 {
        return Err(Error::validation("need at least one seed"));
    }
    let runs = (0..n_seeds as u64)
        .map(|i| {
            let run_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            };
            train_one(&run_cfg, train, val).map(|outcome| RunRecord {
                seed: run_cfg.seed,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunSet { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.005);
        assert_eq!(cfg.lr_at(11), 0.005);
        assert_eq!(cfg.lr_at(12), 0.0005);
        assert_eq!(cfg.lr_at(24), 0.00005);
        assert_eq!(cfg.lr_at(36), 0.000005);
        assert_eq!(cfg.lr_at(47), 0.000005);
    }

    #[test]
    fn validation_rules() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lr_decay_factor: 0.0, ..ok.clone() },
            TrainConfig { lr_decay_factor: 1.5, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { alpha: 2.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn ce_scenarios_ignore_alpha() {
        let cfg = TrainConfig {
            scenario: Scenario::CeOnly,
            alpha: 0.3,
            ..Default::default()
        };
        assert_eq!(cfg.loss_config().alpha, 1.0);
    }

    #[test]
    fn hash_changes_with_config() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
