use cyborg_core::annotate::{AnnotationStore, ImageRef, NextPair, PairSpec, Prompt, RleMask};
use cyborg_core::eval::{auc, roc, ScoreSet};
use cyborg_core::grid::Grid;
use cyborg_core::loss::{cyborg_loss, LossConfig, SampleLossInput};
use cyborg_core::model::{cam, ClassifierHead};
use cyborg_core::preprocess::{expand_box, BoxSource, FaceBox, Label};
use cyborg_core::saliency::{aggregate, resize_to_cam, AnnotatorMask, HumanSaliencyMap, SaliencyBuildConfig};
use cyborg_core::Tensor3;
use proptest::prelude::*;

fn masks_strategy() -> impl Strategy<Value = (usize, usize, Vec<Vec<u8>>)> {
    (2usize..10, 2usize..10, 1usize..5).prop_flat_map(|(h, w, n)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(prop::collection::vec(0u8..2, h * w), n),
        )
    })
}

fn to_masks(h: usize, w: usize, raw: &[Vec<u8>]) -> Vec<AnnotatorMask> {
    raw.iter()
        .enumerate()
        .map(|(i, m)| AnnotatorMask {
            image_id: "img".into(),
            annotator_id: format!("a{i}"),
            mask: Grid::from_vec(h, w, m.clone()).unwrap(),
            correct: true,
        })
        .collect()
}

fn cfg(sigma: f64) -> SaliencyBuildConfig {
    SaliencyBuildConfig {
        blur_sigma: sigma,
        ..Default::default()
    }
}

fn score_set(scores: &[(f64, bool)]) -> ScoreSet {
    ScoreSet::new(
        "p",
        scores
            .iter()
            .map(|&(s, pos)| (s, if pos { Label::Synthetic } else { Label::Real }))
            .collect(),
    )
    .unwrap()
}

fn scores_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((-50i32..50).prop_map(|v| v as f64 / 10.0), any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn saliency_stays_in_unit_range((h, w, raw) in masks_strategy(), sigma in prop::sample::select(vec![0.0, 1.0, 2.5])) {
        let map = aggregate(&to_masks(h, w, &raw), &cfg(sigma)).unwrap();
        prop_assert!(map.grid.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let any = raw.iter().flatten().any(|&v| v != 0);
        let max = map.grid.as_slice().iter().copied().fold(0.0f32, f32::max);
        let constant = map.grid.as_slice().iter().all(|&v| v == map.grid.as_slice()[0]);
        if any && !constant {
            prop_assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn saliency_ignores_mask_order((h, w, raw) in masks_strategy(), sigma in prop::sample::select(vec![0.0, 2.0])) {
        let masks = to_masks(h, w, &raw);
        let mut reversed = masks.clone();
        reversed.reverse();
        let a = aggregate(&masks, &cfg(sigma)).unwrap();
        let b = aggregate(&reversed, &cfg(sigma)).unwrap();
        prop_assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn saliency_monotone_in_coverage((h, w, raw) in masks_strategy()) {
        let map = aggregate(&to_masks(h, w, &raw), &cfg(0.0)).unwrap();
        let cover: Vec<usize> = (0..h * w).map(|i| raw.iter().filter(|m| m[i] != 0).count()).collect();
        for p in 0..h * w {
            for q in 0..h * w {
                if cover[p] > cover[q] {
                    prop_assert!(map.grid.as_slice()[p] >= map.grid.as_slice()[q]);
                }
            }
        }
    }

    #[test]
    fn downsampling_stays_bounded(h in 2usize..16, w in 2usize..16, seed in any::<u64>(), ch in 1usize..8, cw in 1usize..8) {
        prop_assume!(ch <= h && cw <= w);
        let mut s = seed;
        let grid = Grid::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        });
        let map = HumanSaliencyMap::new("x", grid, 1).unwrap();
        let out = resize_to_cam(&map, ch, cw).unwrap();
        prop_assert_eq!(out.grid.dims(), (ch, cw));
        prop_assert!(out.grid.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn expanded_box_contains_original(
        img_h in 8usize..300, img_w in 8usize..300,
        fx in 0.0f64..0.9, fy in 0.0f64..0.9, fw in 0.05f64..1.0, fh in 0.05f64..1.0,
    ) {
        let x0 = fx * img_w as f64;
        let y0 = fy * img_h as f64;
        let x1 = (x0 + fw * img_w as f64).min(img_w as f64);
        let y1 = (y0 + fh * img_h as f64).min(img_h as f64);
        prop_assume!(x1 > x0 && y1 > y0);
        let face = FaceBox { x0, y0, x1, y1, source: BoxSource::ProvidedFile };
        let e = expand_box(face, img_h, img_w).unwrap();
        prop_assert!(e.x0 <= x0 && e.y0 <= y0 && e.x1 >= x1 && e.y1 >= y1);
        prop_assert!(e.x0 >= 0.0 && e.y0 >= 0.0 && e.x1 <= img_w as f64 && e.y1 <= img_h as f64);
    }

    #[test]
    fn cam_invariant_to_positive_affine_maps(
        n in 1usize..4, h in 1usize..5, w in 2usize..5,
        seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0,
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let feats = Tensor3::from_vec(n, h, w, (0..n * h * w).map(|_| next()).collect()).unwrap();
        let weight: Vec<f64> = (0..2 * n).map(|_| next()).collect();
        let head = ClassifierHead::new(2, n, weight.clone(), vec![0.0, 0.0]).unwrap();
        let base = cam(&feats, &head, 1).unwrap();
        // Scaling the class weights scales the raw map.
        let scaled_w: Vec<f64> = weight.iter().map(|v| v * scale).collect();
        let scaled = cam(&feats, &ClassifierHead::new(2, n, scaled_w, vec![0.0, 0.0]).unwrap(), 1).unwrap();
        // A constant extra channel with weight `shift` shifts it.
        let mut data = feats.data.clone();
        data.extend(std::iter::repeat_n(1.0, h * w));
        let feats2 = Tensor3::from_vec(n + 1, h, w, data).unwrap();
        let mut w2 = Vec::new();
        for c in 0..2 {
            w2.extend_from_slice(&weight[c * n..(c + 1) * n]);
            w2.push(shift);
        }
        let shifted = cam(&feats2, &ClassifierHead::new(2, n + 1, w2, vec![0.0, 0.0]).unwrap(), 1).unwrap();
        for ((a, b), c) in base.grid.as_slice().iter().zip(scaled.grid.as_slice()).zip(shifted.grid.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
            prop_assert!((a - c).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn loss_is_affine_in_alpha(
        logits in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..6),
        sal_seed in any::<u64>(),
        alpha in 0.0f64..1.0,
    ) {
        let k = logits.len();
        let mut s = sal_seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let head = ClassifierHead::new(2, 2, vec![1.0, -0.5, 0.3, 0.8], vec![0.0, 0.0]).unwrap();
        let feats: Vec<Tensor3> = (0..k)
            .map(|_| Tensor3::from_vec(2, 3, 3, (0..18).map(|_| next()).collect()).unwrap())
            .collect();
        let cams: Vec<_> = feats.iter().enumerate().map(|(i, f)| cam(f, &head, i % 2).unwrap()).collect();
        let maps: Vec<_> = (0..k)
            .map(|_| HumanSaliencyMap::new("m", Grid::from_fn(3, 3, |_, _| next() as f32), 1).unwrap())
            .collect();
        let inputs: Vec<SampleLossInput<'_>> = (0..k)
            .map(|i| SampleLossInput { logits: &logits[i], cam: Some(&cams[i]), saliency: Some(&maps[i]), label: i % 2 })
            .collect();
        let at = |a: f64| cyborg_loss(&inputs, &LossConfig::with_alpha(a)).unwrap().total;
        let expect = (1.0 - alpha) * at(0.0) + alpha * at(1.0);
        prop_assert!((at(alpha) - expect).abs() <= 1e-12 * (1.0 + expect.abs()));

        // Duplicating the batch leaves the means unchanged.
        let doubled: Vec<_> = inputs.iter().chain(inputs.iter()).copied().collect();
        let d = cyborg_loss(&doubled, &LossConfig::with_alpha(alpha)).unwrap().total;
        prop_assert!((d - at(alpha)).abs() <= 1e-12 * (1.0 + d.abs()));

        // Sample order does not matter beyond rounding.
        let rev: Vec<_> = inputs.iter().rev().copied().collect();
        let r = cyborg_loss(&rev, &LossConfig::with_alpha(alpha)).unwrap().total;
        prop_assert!((r - at(alpha)).abs() <= 1e-12 * (1.0 + r.abs()));
    }

    #[test]
    fn auc_invariant_under_increasing_maps(scores in scores_strategy()) {
        let base = auc(&score_set(&scores)).unwrap();
        let mapped: Vec<(f64, bool)> = scores.iter().map(|&(s, p)| ((s / 3.0).exp() * 2.0 + 7.0, p)).collect();
        prop_assert!((auc(&score_set(&mapped)).unwrap() - base).abs() <= 1e-12);
        let flipped = auc(&score_set(&scores).flipped()).unwrap();
        prop_assert!((base + flipped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn roc_is_monotone(scores in scores_strategy()) {
        let curve = roc(&score_set(&scores)).unwrap();
        prop_assert_eq!((curve.points[0].fpr, curve.points[0].tpr), (0.0, 0.0));
        let last = curve.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn rle_round_trips(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut s = seed;
        let mask = Grid::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            u8::from((s >> 60) & 1 == 1)
        });
        let rle = RleMask::encode(&mask);
        for r in &rle.runs {
            prop_assert_eq!(r[0] / w, (r[0] + r[1] - 1) / w);
        }
        prop_assert_eq!(rle.decode().unwrap(), mask);
    }

    #[test]
    fn prompts_stay_balanced(n_pairs in 1usize..6, annotators in 1usize..20, seed in any::<u64>()) {
        let pairs: Vec<PairSpec> = (0..n_pairs)
            .map(|i| PairSpec {
                pair_id: format!("p{i}"),
                family: String::new(),
                real: ImageRef { image_id: format!("r{i}"), path: None, width: 0, height: 0 },
                fake: ImageRef { image_id: format!("f{i}"), path: None, width: 0, height: 0 },
            })
            .collect();
        let mut store = AnnotationStore::in_memory(pairs, seed).unwrap();
        for a in 0..annotators {
            while let NextPair::Pair(s) = store.next_pair(&format!("a{a}")).unwrap() {
                prop_assert_eq!(s.prompt, Prompt::for_serving(s.pair_serving_index));
            }
        }
        for i in 0..n_pairs {
            let [r, f] = store.prompt_counts(&format!("p{i}"));
            prop_assert!(r.abs_diff(f) <= 1);
            prop_assert_eq!(r + f, annotators);
        }
    }
}
