//! Synthetic shift benchmark.
//!
//! Each image is noise with a class-dependent stripe texture in a fixed
//! central patch ("the face") and, optionally, a bright corner marker whose
//! correlation with the label is flipped between training and test data. A
//! model that learns the marker generalizes badly; the human saliency map
//! (the blurred patch region) tells the saliency-guided loss where to look.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, mean_std, ScoreSet};
use crate::grid::Grid;
use crate::model::{ConvBlockSpec, ReferenceBackboneConfig};
use crate::preprocess::{save_image, Label, LabeledSample};
use crate::saliency::{aggregate, export_saliency, AnnotatorMask, SaliencyBuildConfig};
use crate::tensor::Tensor3;
use crate::train::{run_replicates, synthetic_scores, Scenario, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToySplit {
    Train,
    Val,
    Test,
}

impl ToySplit {
    fn stream(self) -> u64 {
        match self {
            ToySplit::Train => 1,
            ToySplit::Val => 2,
            ToySplit::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToySplit::Train => "train",
            ToySplit::Val => "val",
            ToySplit::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBenchSpec {
    /// Square image side.
    pub size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    /// Draw the class texture in the central patch.
    pub salient_patch: bool,
    pub patch_size: usize,
    pub patch_amplitude: f64,
    /// Stripe period in pixels (even).
    pub stripe_period: usize,
    /// Draw the corner marker.
    pub spurious_cue: bool,
    pub cue_size: usize,
    pub cue_amplitude: f64,
    /// Probability that the marker follows the label in train/val data.
    /// Test data always uses the opposite assignment.
    pub cue_correlation: f64,
    pub blur_sigma: f64,
    pub data_seed: u64,
    pub blocks: Vec<ConvBlockSpec>,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub alpha: f64,
}

impl Default for ToyBenchSpec {
    fn default() -> Self {
        ToyBenchSpec {
            size: 64,
            channels: 1,
            train_per_class: 64,
            val_per_class: 32,
            test_per_class: 200,
            noise_std: 0.1,
            salient_patch: true,
            patch_size: 24,
            patch_amplitude: 0.25,
            stripe_period: 4,
            spurious_cue: true,
            cue_size: 12,
            cue_amplitude: 0.35,
            cue_correlation: 1.0,
            blur_sigma: 5.0,
            data_seed: 2022,
            blocks: vec![
                ConvBlockSpec { out_channels: 8, kernel: 3, pool: true },
                ConvBlockSpec { out_channels: 16, kernel: 3, pool: true },
                ConvBlockSpec { out_channels: 16, kernel: 3, pool: true },
            ],
            epochs: 20,
            lr: 0.1,
            lr_decay_every: 8,
            batch_size: 8,
            alpha: 0.5,
        }
    }
}

impl ToyBenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.channels == 0 {
            return Err(Error::validation("toy images need size >= 16 and >= 1 channel"));
        }
        if self.patch_size == 0 || self.patch_size > self.size / 2 {
            return Err(Error::validation("patch must fit in the central half of the image"));
        }
        if self.cue_size == 0 || self.cue_size > self.size / 4 {
            return Err(Error::validation("corner marker must fit in a quarter of the side"));
        }
        if self.stripe_period < 2 || !self.stripe_period.is_multiple_of(2) {
            return Err(Error::validation("stripe period must be even and >= 2"));
        }
        if !(0.0..=1.0).contains(&self.cue_correlation) || self.noise_std < 0.0 {
            return Err(Error::validation("cue correlation must be in [0, 1] and noise >= 0"));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::validation("every split needs samples of both classes"));
        }
        self.train_config(Scenario::CeOnly, 0).validate()
    }

    /// Top-left corner of the salient patch.
    pub fn patch_origin(&self) -> usize {
        (self.size - self.patch_size) / 2
    }

    /// Top-left corner of the marker (inset from the image corner).
    pub fn cue_origin(&self) -> usize {
        self.cue_size / 2
    }

    pub fn backbone(&self) -> ReferenceBackboneConfig {
        ReferenceBackboneConfig {
            input_channels: self.channels,
            input_height: self.size,
            input_width: self.size,
            blocks: self.blocks.clone(),
            num_classes: 2,
            input_shift: 0.5,
        }
    }

    pub fn train_config(&self, scenario: Scenario, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            lr_decay_every: self.lr_decay_every,
            batch_size: self.batch_size,
            alpha: self.alpha,
            seed,
            scenario,
            backbone: self.backbone(),
            ..TrainConfig::default()
        }
    }

    fn per_class(&self, split: ToySplit) -> usize {
        match split {
            ToySplit::Train => self.train_per_class,
            ToySplit::Val => self.val_per_class,
            ToySplit::Test => self.test_per_class,
        }
    }

    fn in_patch(&self, y: usize, x: usize) -> bool {
        let o = self.patch_origin();
        (o..o + self.patch_size).contains(&y) && (o..o + self.patch_size).contains(&x)
    }

    fn in_cue(&self, y: usize, x: usize) -> bool {
        let o = self.cue_origin();
        (o..o + self.cue_size).contains(&y) && (o..o + self.cue_size).contains(&x)
    }

    /// The annotators' region: the salient patch.
    pub fn patch_mask(&self) -> Grid<u8> {
        Grid::from_fn(self.size, self.size, |y, x| u8::from(self.in_patch(y, x)))
    }
}

/// Square wave in `{-1, 1}` with the given period.
fn stripe(t: usize, period: usize) -> f64 {
    if (t % period) < period / 2 {
        1.0
    } else {
        -1.0
    }
}

/// Generate one split. Real images carry horizontal stripes, synthetic ones
/// vertical stripes, each with a random phase. Samples alternate real,
/// synthetic, real, ...
pub fn generate(spec: &ToyBenchSpec, split: ToySplit) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    rng.set_stream(split.stream());
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::validation(e.to_string()))?;
    let saliency = aggregate(
        &[AnnotatorMask {
            image_id: String::new(),
            annotator_id: "oracle".into(),
            mask: spec.patch_mask(),
            correct: true,
        }],
        &SaliencyBuildConfig {
            blur_sigma: spec.blur_sigma,
            ..Default::default()
        },
    )?;
    let n = spec.size;
    let mut out = Vec::with_capacity(2 * spec.per_class(split));
    for i in 0..2 * spec.per_class(split) {
        let label = if i % 2 == 0 { Label::Real } else { Label::Synthetic };
        let follows = rng.random::<f64>() < spec.cue_correlation;
        // Train/val: marker on synthetic images when it follows the label.
        // Test: marker on real images instead.
        let marked = match split {
            ToySplit::Test => label == Label::Real,
            _ => (label == Label::Synthetic) == follows,
        };
        let phase = rng.random_range(0..spec.stripe_period);
        let mut plane = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut v = 0.5;
                if spec.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                if spec.salient_patch && spec.in_patch(y, x) {
                    let t = if label == Label::Real { y } else { x };
                    v += spec.patch_amplitude * stripe(t + phase, spec.stripe_period);
                }
                if spec.spurious_cue && marked && spec.in_cue(y, x) {
                    v += spec.cue_amplitude;
                }
                plane[y * n + x] = v.clamp(0.0, 1.0);
            }
        }
        let mut data = Vec::with_capacity(spec.channels * n * n);
        for _ in 0..spec.channels {
            data.extend_from_slice(&plane);
        }
        let image_id = format!("{}_{i:05}", split.name());
        let mut map = saliency.clone();
        map.image_id = image_id.clone();
        out.push(LabeledSample {
            image_id,
            pixels: Tensor3::from_vec(spec.channels, n, n, data)?,
            label,
            saliency: Some(map),
        });
    }
    Ok(out)
}

fn split_auc(scores: Vec<f64>, samples: &[LabeledSample]) -> Result<f64> {
    let set = ScoreSet::new(
        "toybench",
        scores.into_iter().zip(samples.iter().map(|s| s.label)).collect(),
    )?;
    auc(&set)
}

/// Test AUC of a hand-built detector that only looks at the patch: the
/// energy of vertical minus horizontal differences at the stripe half-period.
pub fn patch_oracle_auc(spec: &ToyBenchSpec, samples: &[LabeledSample]) -> Result<f64> {
    let o = spec.patch_origin();
    let d = spec.stripe_period / 2;
    let n = spec.size;
    let scores = samples
        .iter()
        .map(|s| {
            let p = s.pixels.plane(0);
            let (mut horiz, mut vert) = (0.0, 0.0);
            for y in o..o + spec.patch_size - d {
                for x in o..o + spec.patch_size - d {
                    let v = p[y * n + x];
                    horiz += (v - p[(y + d) * n + x]).powi(2);
                    vert += (v - p[y * n + x + d]).powi(2);
                }
            }
            // Vertical stripes change along x.
            vert - horiz
        })
        .collect();
    split_auc(scores, samples)
}

/// Test AUC of a detector that only reads the corner marker brightness.
pub fn cue_only_auc(spec: &ToyBenchSpec, samples: &[LabeledSample]) -> Result<f64> {
    let o = spec.cue_origin();
    let n = spec.size;
    let scores = samples
        .iter()
        .map(|s| {
            let p = s.pixels.plane(0);
            (o..o + spec.cue_size)
                .flat_map(|y| (o..o + spec.cue_size).map(move |x| (y, x)))
                .map(|(y, x)| p[y * n + x])
                .sum()
        })
        .collect();
    split_auc(scores, samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub test_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchResult {
    pub spec: ToyBenchSpec,
    pub ce_only: ScenarioResult,
    pub cyborg: ScenarioResult,
}

impl ToyBenchResult {
    pub fn gap(&self) -> f64 {
        self.cyborg.mean_auc - self.ce_only.mean_auc
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from("scenario   mean_auc  std_auc  runs\n");
        for r in [&self.ce_only, &self.cyborg] {
            let name = match r.scenario {
                Scenario::CeOnly => "ce_only",
                Scenario::Cyborg => "cyborg",
                Scenario::CeExtraData => "ce_extra",
            };
            let _ = writeln!(
                s,
                "{name:<10} {:>8.4}  {:>7.4}  {}{}",
                r.mean_auc,
                r.std_auc,
                r.test_aucs.len(),
                if r.partial { " (partial)" } else { "" }
            );
        }
        let _ = writeln!(s, "gap        {:>8.4}", self.gap());
        s
    }
}

fn run_scenario(
    spec: &ToyBenchSpec,
    scenario: Scenario,
    seeds: usize,
    first_seed: u64,
    data: &ToyData,
) -> Result<ScenarioResult> {
    let cfg = spec.train_config(scenario, first_seed);
    let runs = run_replicates(&cfg, seeds, &data.train, &data.val)?;
    let mut test_aucs = Vec::with_capacity(seeds);
    for run in &runs.runs {
        let model = run.outcome.checkpoint.to_model()?;
        test_aucs.push(split_auc(synthetic_scores(&model, &data.test)?, &data.test)?);
    }
    let (mean_auc, std_auc) = mean_std(&test_aucs);
    Ok(ScenarioResult {
        scenario,
        seeds: runs.runs.iter().map(|r| r.seed).collect(),
        test_aucs,
        mean_auc,
        std_auc,
        partial: runs.is_partial(),
    })
}

pub struct ToyData {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl ToyData {
    pub fn generate(spec: &ToyBenchSpec) -> Result<Self> {
        Ok(ToyData {
            train: generate(spec, ToySplit::Train)?,
            val: generate(spec, ToySplit::Val)?,
            test: generate(spec, ToySplit::Test)?,
        })
    }
}

/// Train `seeds` replicates of each scenario (seeds `first_seed..`) and
/// compare test AUCs.
pub fn toybench(spec: &ToyBenchSpec, seeds: usize, first_seed: u64) -> Result<ToyBenchResult> {
    spec.validate()?;
    let data = ToyData::generate(spec)?;
    Ok(ToyBenchResult {
        spec: spec.clone(),
        ce_only: run_scenario(spec, Scenario::CeOnly, seeds, first_seed, &data)?,
        cyborg: run_scenario(spec, Scenario::Cyborg, seeds, first_seed, &data)?,
    })
}

/// Write a split as PNG images under `dir/{real,synthetic}` plus saliency
/// maps under `dir/saliency`, the layout `preprocess` reads.
pub fn export_split(samples: &[LabeledSample], dir: &Path) -> Result<()> {
    for s in samples {
        let class_dir = dir.join(match s.label {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        });
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        save_image(&s.pixels, &class_dir.join(format!("{}.png", s.image_id)))?;
        if let Some(map) = &s.saliency {
            export_saliency(map, &dir.join("saliency"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = ToyBenchSpec {
            train_per_class: 5,
            ..Default::default()
        };
        let a = generate(&spec, ToySplit::Train).unwrap();
        let b = generate(&spec, ToySplit::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label == Label::Synthetic).count(), 5);
        assert!(a.iter().all(|s| s.pixels.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn saliency_is_the_blurred_patch() {
        let spec = ToyBenchSpec {
            train_per_class: 1,
            ..Default::default()
        };
        let s = &generate(&spec, ToySplit::Train).unwrap()[0];
        let map = s.saliency.as_ref().unwrap();
        let c = spec.size / 2;
        assert_eq!(map.grid.get(c, c), 1.0);
        assert_eq!(map.grid.get(0, 0), 0.0);
    }

    #[test]
    fn cues_behave_by_construction() {
        let spec = ToyBenchSpec::default();
        let test = generate(&spec, ToySplit::Test).unwrap();
        assert!(patch_oracle_auc(&spec, &test).unwrap() >= 0.95);
        assert!(cue_only_auc(&spec, &test).unwrap() <= 0.05);
        let train = generate(&spec, ToySplit::Train).unwrap();
        assert!(cue_only_auc(&spec, &train).unwrap() >= 0.95);
    }
}
