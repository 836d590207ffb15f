//! Finite-difference checks of the full loss gradient (CAM included).

use cyborg_core::loss::{loss_gradcheck, BatchItem, LossConfig};
use cyborg_core::model::{CamClass, Classifier, ConvBlockSpec, ReferenceBackboneConfig};
use cyborg_core::saliency::HumanSaliencyMap;
use cyborg_core::{Grid, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    model: Classifier,
    inputs: Vec<Tensor3>,
    labels: Vec<usize>,
    maps: Vec<Option<HumanSaliencyMap>>,
}

fn block(out_channels: usize, pool: bool) -> ConvBlockSpec {
    ConvBlockSpec {
        out_channels,
        kernel: 3,
        pool,
    }
}

fn fixture(seed: u64, channels: usize, size: usize, blocks: Vec<ConvBlockSpec>, k: usize) -> Fixture {
    let cfg = ReferenceBackboneConfig {
        input_channels: channels,
        input_height: size,
        input_width: size,
        blocks,
        num_classes: 2,
        input_shift: 0.5,
    };
    let [_, h, w] = cfg.feature_shape();
    let model = Classifier::from_config(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let inputs = (0..k)
        .map(|_| {
            let n = channels * size * size;
            Tensor3::from_vec(channels, size, size, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
        })
        .collect();
    let labels = (0..k).map(|i| i % 2).collect();
    let maps = (0..k)
        .map(|_| {
            let g = Grid::from_fn(h, w, |_, _| rng.random::<f32>());
            Some(HumanSaliencyMap::new("fixture", g, 1).unwrap())
        })
        .collect();
    Fixture {
        model,
        inputs,
        labels,
        maps,
    }
}

fn suite() -> Vec<Fixture> {
    vec![
        fixture(1, 2, 4, vec![block(3, false)], 2),
        fixture(2, 1, 8, vec![block(2, true), block(4, false)], 2),
        fixture(3, 3, 8, vec![block(3, true), block(4, false)], 1),
        fixture(4, 2, 8, vec![block(4, false), block(4, true)], 2),
    ]
}

fn items(f: &Fixture) -> Vec<BatchItem<'_>> {
    f.inputs
        .iter()
        .zip(&f.labels)
        .zip(&f.maps)
        .map(|((input, &label), map)| BatchItem {
            input,
            label,
            saliency: map.as_ref(),
        })
        .collect()
}

#[test]
fn gradcheck_suite_report() {
    for (i, f) in suite().iter().enumerate() {
        for alpha in [0.0, 0.5, 1.0] {
            let r = loss_gradcheck(&f.model, &items(f), &LossConfig::with_alpha(alpha), CamClass::TrueLabel, 1e-5).unwrap();
            println!("fixture {i} alpha {alpha}: {r:?}");
            assert!(r.max_rel_error <= 1e-6, "fixture {i} alpha {alpha}: {r:?}");
        }
    }
}
