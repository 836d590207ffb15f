//! The CYBORG composite loss.
//!
//! For a batch of `K` samples:
//!
//! ```text
//! human = (1/K_s) Σ_k d(s_human_k, s_model_k)     (samples with a saliency map)
//! ce    = -(1/K)  Σ_k log p_model(y_k)
//! total = (1 - α) · human + α · ce
//! ```
//!
//! where `d` is the squared ℓ2 distance, optionally divided by the number
//! of map elements, and `s_model_k` is the min–max normalized CAM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{cam, log_softmax, argmax, Backbone, CamClass, CamOutput, Classifier};
use crate::saliency::HumanSaliencyMap;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyReduction {
    #[default]
    MeanOverElements,
    SumOverElements,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingSaliencyPolicy {
    #[default]
    SkipTerm,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub saliency_reduction: SaliencyReduction,
    pub missing_saliency_policy: MissingSaliencyPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            saliency_reduction: SaliencyReduction::default(),
            missing_saliency_policy: MissingSaliencyPolicy::default(),
        }
    }
}

impl LossConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        LossConfig {
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Per-sample inputs to [`cyborg_loss`].
#[derive(Clone, Copy, Debug)]
pub struct SampleLossInput<'a> {
    pub logits: &'a [f64],
    pub cam: Option<&'a CamOutput>,
    /// Human map already resized to the CAM resolution.
    pub saliency: Option<&'a HumanSaliencyMap>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub saliency_sq_err: Option<f64>,
    pub neg_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub total: f64,
    pub human_term: f64,
    pub ce_term: f64,
    pub k: usize,
    pub per_sample: Vec<SampleLoss>,
}

/// Gradient of the batch total w.r.t. one sample's logits and CAM grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub d_logits: Vec<f64>,
    pub d_cam: Option<Grid<f64>>,
}

pub fn cyborg_loss(inputs: &[SampleLossInput<'_>], cfg: &LossConfig) -> Result<BatchLossBreakdown> {
    evaluate(inputs, cfg, false).map(|(b, _)| b)
}

pub fn cyborg_loss_with_grads(
    inputs: &[SampleLossInput<'_>],
    cfg: &LossConfig,
) -> Result<(BatchLossBreakdown, Vec<SampleGrad>)> {
    evaluate(inputs, cfg, true)
}

fn evaluate(
    inputs: &[SampleLossInput<'_>],
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(BatchLossBreakdown, Vec<SampleGrad>)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let k = inputs.len();
    let mut k_sal = 0usize;
    for (i, s) in inputs.iter().enumerate() {
        if s.label >= s.logits.len() {
            return Err(Error::validation(format!("sample {i}: label {} has no logit", s.label)));
        }
        match (s.saliency, s.cam) {
            (Some(h), Some(c)) => {
                if h.grid.dims() != c.grid.dims() {
                    return Err(Error::shape(
                        format!("saliency at CAM size {:?}", c.grid.dims()),
                        format!("{:?}", h.grid.dims()),
                    ));
                }
                k_sal += 1;
            }
            (Some(_), None) => {
                return Err(Error::validation(format!("sample {i}: saliency given without a CAM")));
            }
            (None, _) if cfg.missing_saliency_policy == MissingSaliencyPolicy::Error => {
                return Err(Error::validation(format!("sample {i}: missing human saliency map")));
            }
            (None, _) => {}
        }
    }

    let alpha = cfg.alpha;
    let mut per_sample = Vec::with_capacity(k);
    let mut grads = Vec::with_capacity(if want_grads { k } else { 0 });
    let (mut human_sum, mut ce_sum) = (0.0, 0.0);
    for s in inputs {
        let log_p = log_softmax(s.logits);
        let nll = -log_p[s.label];
        ce_sum += nll;
        let mut d_cam = None;
        let sq_err = match (s.saliency, s.cam) {
            (Some(h), Some(c)) => {
                let m = c.grid.len() as f64;
                let norm = match cfg.saliency_reduction {
                    SaliencyReduction::MeanOverElements => m,
                    SaliencyReduction::SumOverElements => 1.0,
                };
                let diffs: Vec<f64> = c
                    .grid
                    .as_slice()
                    .iter()
                    .zip(h.grid.as_slice())
                    .map(|(&model, &human)| model - human as f64)
                    .collect();
                let d = diffs.iter().map(|e| e * e).sum::<f64>() / norm;
                human_sum += d;
                if want_grads {
                    let scale = 2.0 * (1.0 - alpha) / (k_sal as f64 * norm);
                    d_cam = Some(
                        Grid::from_vec(c.grid.height(), c.grid.width(), diffs.iter().map(|e| scale * e).collect())
                            .expect("same dims"),
                    );
                }
                Some(d)
            }
            _ => None,
        };
        if want_grads {
            let d_logits = log_p
                .iter()
                .enumerate()
                .map(|(c, lp)| {
                    let onehot = if c == s.label { 1.0 } else { 0.0 };
                    alpha / k as f64 * (lp.exp() - onehot)
                })
                .collect();
            grads.push(SampleGrad { d_logits, d_cam });
        }
        per_sample.push(SampleLoss {
            saliency_sq_err: sq_err,
            neg_log_prob: nll,
        });
    }
    let human_term = if k_sal > 0 { human_sum / k_sal as f64 } else { 0.0 };
    let ce_term = ce_sum / k as f64;
    let total = (1.0 - alpha) * human_term + alpha * ce_term;
    Ok((
        BatchLossBreakdown {
            total,
            human_term,
            ce_term,
            k,
            per_sample,
        },
        grads,
    ))
}

/// One sample as seen by the training step.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub input: &'a Tensor3,
    pub label: usize,
    /// Human map at CAM resolution.
    pub saliency: Option<&'a HumanSaliencyMap>,
}

/// Result of a full forward (and optional backward) pass over a batch.
#[derive(Clone, Debug)]
pub struct BatchStep {
    pub loss: BatchLossBreakdown,
    /// Flat gradient in the classifier's parameter layout (empty when not requested).
    pub grads: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

/// Forward every sample, evaluate the loss and, if asked, back-propagate
/// into the flat gradient. Per-sample work runs in parallel; gradients are
/// summed in batch order so the result does not depend on thread count.
pub fn batch_step<B: Backbone>(
    model: &Classifier<B>,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
    cam_class: CamClass,
    want_grads: bool,
) -> Result<BatchStep> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let head = model.head();
    let forwards = batch
        .par_iter()
        .map(|item| {
            let (out, cache) = model.forward_sample(item.input)?;
            let cam_out = match item.saliency {
                Some(_) => {
                    let class = match cam_class {
                        CamClass::TrueLabel => item.label,
                        CamClass::ArgmaxPrediction => argmax(&out.logits),
                    };
                    Some(cam(&out.features, &head, class)?)
                }
                None => None,
            };
            Ok((out, cache, cam_out))
        })
        .collect::<Result<Vec<_>>>()?;

    let inputs: Vec<SampleLossInput<'_>> = batch
        .iter()
        .zip(&forwards)
        .map(|(item, (out, _, cam_out))| SampleLossInput {
            logits: &out.logits,
            cam: cam_out.as_ref(),
            saliency: item.saliency,
            label: item.label,
        })
        .collect();
    let (loss, sample_grads) = evaluate(&inputs, cfg, want_grads)?;
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", loss.total)));
    }
    let logits = forwards.iter().map(|(o, _, _)| o.logits.clone()).collect();

    let mut grads = Vec::new();
    if want_grads {
        let n = model.params().len();
        let partials: Vec<Vec<f64>> = batch
            .par_iter()
            .zip(forwards.par_iter())
            .zip(sample_grads.par_iter())
            .map(|((item, (out, cache, cam_out)), g)| {
                let mut acc = vec![0.0; n];
                let cam_grad = match (cam_out, &g.d_cam) {
                    (Some(c), Some(d)) => Some((c, d)),
                    _ => None,
                };
                model.backward_sample(item.input, cache, out, &g.d_logits, cam_grad, &mut acc);
                acc
            })
            .collect();
        grads = vec![0.0; n];
        for p in &partials {
            for (g, v) in grads.iter_mut().zip(p) {
                *g += v;
            }
        }
    }
    Ok(BatchStep { loss, grads, logits })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest analytic gradient magnitude among backbone (conv) parameters.
    pub max_backbone_grad: f64,
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Compare analytic gradients of the batch total against central finite
/// differences for every parameter of `model`. Relative error is
/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn loss_gradcheck<B: Backbone + Clone>(
    model: &Classifier<B>,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
    cam_class: CamClass,
    epsilon: f64,
) -> Result<GradcheckReport> {
    let analytic = batch_step(model, batch, cfg, cam_class, true)?.grads;
    let backbone_len = model
        .param_specs()
        .iter()
        .find(|s| s.name == "head.weight")
        .map_or(0, |s| s.offset);
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        max_backbone_grad: analytic[..backbone_len].iter().fold(0.0f64, |m, g| m.max(g.abs())),
    };
    let eval = |probe: &Classifier<B>, index: usize| -> Result<f64> {
        let total = batch_step(probe, batch, cfg, cam_class, false)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} while perturbing {}", model.param_name(index))),
                other => other,
            })?
            .loss
            .total;
        Ok(total)
    };
    for i in 0..analytic.len() {
        let original = model.params()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.params_mut()[i] = original + offset;
            eval(&probe, i)
        };
        // Five-point central stencil, truncation error O(ε⁴).
        let (p1, m1, p2, m2) = (at(epsilon)?, at(-epsilon)?, at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
        probe.params_mut()[i] = original;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel;
            report.worst_param = model.param_name(i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam_from(grid: Vec<f64>, h: usize, w: usize) -> CamOutput {
        CamOutput {
            grid: Grid::from_vec(h, w, grid).unwrap(),
            class_used: 0,
            raw_min: 0.0,
            raw_max: 1.0,
            argmin: 0,
            argmax: 0,
        }
    }

    fn human(grid: Vec<f32>, h: usize, w: usize) -> HumanSaliencyMap {
        HumanSaliencyMap::new("h", Grid::from_vec(h, w, grid).unwrap(), 1).unwrap()
    }

    #[test]
    fn worked_example() {
        // p(y) = 0.8 for y = 0 with logits (ln 0.8, ln 0.2).
        let logits = [0.8f64.ln(), 0.2f64.ln()];
        let c = cam_from(vec![0.5, 0.0, 0.0, 0.0], 2, 2);
        let h = human(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        let out = cyborg_loss(
            &[SampleLossInput {
                logits: &logits,
                cam: Some(&c),
                saliency: Some(&h),
                label: 0,
            }],
            &LossConfig::default(),
        )
        .unwrap();
        assert!((out.human_term - 0.0625).abs() < 1e-15);
        assert!((out.ce_term - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert!((out.total - 0.142_821_775_657_104_87).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_is_plain_cross_entropy() {
        let logits = [0.3, -0.4];
        let c = cam_from(vec![0.1, 0.9], 1, 2);
        let h = human(vec![1.0, 0.0], 1, 2);
        let out = cyborg_loss(
            &[SampleLossInput {
                logits: &logits,
                cam: Some(&c),
                saliency: Some(&h),
                label: 1,
            }],
            &LossConfig::with_alpha(1.0),
        )
        .unwrap();
        assert_eq!(out.total, out.ce_term);
        assert_eq!(out.ce_term, -log_softmax(&logits)[1]);
    }

    #[test]
    fn perfect_prediction_and_saliency_is_zero() {
        let logits = [0.0, -1e6];
        let c = cam_from(vec![0.25, 1.0], 1, 2);
        let h = human(vec![0.25, 1.0], 1, 2);
        let out = cyborg_loss(
            &[SampleLossInput {
                logits: &logits,
                cam: Some(&c),
                saliency: Some(&h),
                label: 0,
            }],
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn sum_reduction_skips_element_count() {
        let logits = [0.0, 0.0];
        let c = cam_from(vec![0.5, 0.0, 0.0, 0.0], 2, 2);
        let h = human(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        let cfg = LossConfig {
            saliency_reduction: SaliencyReduction::SumOverElements,
            ..Default::default()
        };
        let out = cyborg_loss(
            &[SampleLossInput {
                logits: &logits,
                cam: Some(&c),
                saliency: Some(&h),
                label: 0,
            }],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.human_term, 0.25);
    }

    #[test]
    fn missing_saliency_shrinks_denominator_or_errors() {
        let logits = [0.0, 0.0];
        let c = cam_from(vec![0.0, 1.0], 1, 2);
        let h = human(vec![1.0, 0.0], 1, 2);
        let with = SampleLossInput {
            logits: &logits,
            cam: Some(&c),
            saliency: Some(&h),
            label: 0,
        };
        let without = SampleLossInput {
            saliency: None,
            ..with
        };
        let out = cyborg_loss(&[with, without], &LossConfig::default()).unwrap();
        assert_eq!(out.human_term, 1.0);
        assert_eq!(out.per_sample[1].saliency_sq_err, None);
        let strict = LossConfig {
            missing_saliency_policy: MissingSaliencyPolicy::Error,
            ..Default::default()
        };
        assert!(cyborg_loss(&[with, without], &strict).is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(cyborg_loss(&[], &LossConfig::default()).is_err());
        let logits = [0.0, 0.0];
        let c = cam_from(vec![0.0, 1.0], 1, 2);
        let h = human(vec![1.0, 0.0], 2, 1);
        let bad = SampleLossInput {
            logits: &logits,
            cam: Some(&c),
            saliency: Some(&h),
            label: 0,
        };
        assert!(matches!(cyborg_loss(&[bad], &LossConfig::default()), Err(Error::Shape { .. })));
        assert!(LossConfig::with_alpha(1.5).validate().is_err());
    }
}
