//! Seeded inputs shared by the benchmarks.

use cyborg_core::annotate::RleMask;
use cyborg_core::eval::ScoreSet;
use cyborg_core::model::{Classifier, ConvBlockSpec, ReferenceBackboneConfig};
use cyborg_core::preprocess::Label;
use cyborg_core::saliency::{AnnotatorMask, HumanSaliencyMap};
use cyborg_core::{Grid, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The toy benchmark's backbone at `size × size`.
pub fn backbone(channels: usize, size: usize) -> ReferenceBackboneConfig {
    ReferenceBackboneConfig {
        input_channels: channels,
        input_height: size,
        input_width: size,
        blocks: [(8, true), (16, true), (16, true)]
            .into_iter()
            .map(|(out_channels, pool)| ConvBlockSpec {
                out_channels,
                kernel: 3,
                pool,
            })
            .collect(),
        num_classes: 2,
        input_shift: 0.5,
    }
}

pub struct Batch {
    pub model: Classifier,
    pub inputs: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub maps: Vec<HumanSaliencyMap>,
}

pub fn batch(cfg: ReferenceBackboneConfig, k: usize, seed: u64) -> Batch {
    let [_, h, w] = cfg.feature_shape();
    let (c, ih, iw) = (cfg.input_channels, cfg.input_height, cfg.input_width);
    let model = Classifier::from_config(cfg, seed).expect("valid bench config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..k)
        .map(|_| Tensor3::from_vec(c, ih, iw, (0..c * ih * iw).map(|_| rng.random()).collect()).unwrap())
        .collect();
    let maps = (0..k)
        .map(|_| HumanSaliencyMap::new("b", Grid::from_fn(h, w, |_, _| rng.random::<f32>()), 1).unwrap())
        .collect();
    Batch {
        model,
        inputs,
        labels: (0..k).map(|i| i % 2).collect(),
        maps,
    }
}

pub fn scores(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Synthetic };
            (rng.random::<f64>() + (i % 2) as f64 * 0.3, label)
        })
        .collect();
    ScoreSet::new("bench", scores).unwrap()
}

/// `n` annotators' random rectangles on one `size × size` image.
pub fn masks(n: usize, size: usize, seed: u64) -> Vec<AnnotatorMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|a| {
            let (y0, x0) = (rng.random_range(0..size / 2), rng.random_range(0..size / 2));
            let (y1, x1) = (y0 + rng.random_range(1..size / 2), x0 + rng.random_range(1..size / 2));
            AnnotatorMask {
                image_id: "img".into(),
                annotator_id: format!("a{a}"),
                mask: Grid::from_fn(size, size, |y, x| (y >= y0 && y < y1 && x >= x0 && x < x1) as u8),
                correct: true,
            }
        })
        .collect()
}

pub fn rle(mask: &Grid<u8>) -> RleMask {
    RleMask::encode(mask)
}
