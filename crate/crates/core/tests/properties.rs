use lesion_core::data::{
    balanced_batches, class_distribution, class_weights, shuffled_batches, stratified_split, val_count,
    ClassDistribution, ClassLabel, Manifest, Sample, WeightMode,
};
use lesion_core::ensemble::{average, read_predictions, write_predictions, PredictionSet};
use lesion_core::imaging::{flip_horizontal, flip_vertical, normalize, resize, white_patch_retinex, ImageU8};
use lesion_core::metrics::{self, confusion, ConfusionMatrix, MicroMetric};
use lesion_core::nn::{softmax, weighted_ce_loss, Tensor};
use lesion_core::NUM_CLASSES;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = ImageU8> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), w * h * 3).prop_map(move |px| ImageU8::new(w, h, px).unwrap())
    })
}

fn label() -> impl Strategy<Value = ClassLabel> {
    (0usize..NUM_CLASSES).prop_map(|i| ClassLabel::from_index(i).unwrap())
}

fn manifest() -> impl Strategy<Value = Manifest> {
    proptest::collection::vec(label(), 1..200).prop_map(|labels| {
        let rows = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| Sample {
                image_id: format!("img_{i:05}"),
                label,
            })
            .collect();
        Manifest::new(rows, "").unwrap()
    })
}

fn prob_row() -> impl Strategy<Value = [f64; NUM_CLASSES]> {
    proptest::array::uniform8(0.001f64..1.0).prop_map(|r| {
        let s: f64 = r.iter().sum();
        r.map(|v| v / s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retinex_is_idempotent_and_hits_255(img in image()) {
        let once = white_patch_retinex(&img);
        prop_assert_eq!(&white_patch_retinex(&once), &once);
        for c in 0..3 {
            let had = img.pixels().chunks_exact(3).any(|p| p[c] > 0);
            let max = once.pixels().chunks_exact(3).map(|p| p[c]).max().unwrap();
            prop_assert_eq!(max, if had { 255 } else { 0 });
        }
    }

    #[test]
    fn retinex_keeps_channel_order(img in image()) {
        let out = white_patch_retinex(&img);
        for c in 0..3 {
            let src: Vec<u8> = img.pixels().iter().skip(c).step_by(3).copied().collect();
            let dst: Vec<u8> = out.pixels().iter().skip(c).step_by(3).copied().collect();
            for i in 0..src.len() {
                for j in 0..src.len() {
                    if src[i] <= src[j] {
                        prop_assert!(dst[i] <= dst[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions(img in image()) {
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&img)), &img);
        prop_assert_eq!(&flip_vertical(&flip_vertical(&img)), &img);
    }

    #[test]
    fn normalize_round_trips(img in image()) {
        let f = normalize(&img);
        prop_assert!(f.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&f.to_u8(), &img);
    }

    #[test]
    fn resize_to_same_size_is_identity(img in image()) {
        prop_assert_eq!(&resize(&img, img.width(), img.height()).unwrap(), &img);
    }

    #[test]
    fn resize_of_constant_is_constant(v in any::<u8>(), w in 1usize..9, h in 1usize..9, ow in 1usize..15, oh in 1usize..15) {
        let img = ImageU8::filled(w, h, v).unwrap();
        let out = resize(&img, ow, oh).unwrap();
        prop_assert!(out.pixels().iter().all(|&p| p == v));
    }

    #[test]
    fn split_partitions_every_class(m in manifest(), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let s = stratified_split(&m, frac, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.val.len(), m.len());
        let all = class_distribution(&m);
        let va = class_distribution(&s.val);
        for c in ClassLabel::ALL {
            prop_assert_eq!(va.count(c), val_count(all.count(c), frac));
        }
        let mut ids: Vec<&str> = s.train.rows.iter().chain(&s.val.rows).map(|r| r.image_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), m.len());
        prop_assert_eq!(stratified_split(&m, frac, seed).unwrap(), s);
    }

    #[test]
    fn min_over_count_weights_balance_classes(counts in proptest::array::uniform8(1usize..5000)) {
        let d = ClassDistribution::from_counts(counts);
        let w = class_weights(&d, &WeightMode::MinOverCount).unwrap();
        let min = *counts.iter().min().unwrap() as f64;
        for (wc, &n) in w.weights.iter().zip(&counts) {
            prop_assert!((wc * n as f64 - min).abs() < 1e-9);
            prop_assert!(*wc <= 1.0);
        }
        prop_assert!(w.weights.contains(&1.0));
    }

    #[test]
    fn shuffled_batches_cover_each_index_once(n in 1usize..300, bs in 1usize..40, seed in any::<u64>()) {
        let plan = shuffled_batches(n, bs, seed).unwrap();
        let mut seen: Vec<usize> = plan.batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.batches.iter().all(|b| b.len() <= bs && !b.is_empty()));
    }

    #[test]
    fn balanced_batches_share_slots_evenly(
        sizes in proptest::collection::vec(0usize..30, NUM_CLASSES),
        bs in 1usize..33,
        nb in 1usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(sizes.iter().any(|&s| s > 0));
        let mut next = 0;
        let classes: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&s| {
                let v = (next..next + s).collect();
                next += s;
                v
            })
            .collect();
        let owner = |i: usize| classes.iter().position(|v| v.contains(&i)).unwrap();
        let plan = balanced_batches(&classes, bs, nb, seed).unwrap();
        let active = sizes.iter().filter(|&&s| s > 0).count();
        let mut per_class = [0usize; NUM_CLASSES];
        for b in &plan.batches {
            prop_assert_eq!(b.len(), bs);
            for &i in b {
                per_class[owner(i)] += 1;
            }
        }
        let drawn: Vec<usize> = (0..NUM_CLASSES).filter(|&c| sizes[c] > 0).map(|c| per_class[c]).collect();
        let lo = *drawn.iter().min().unwrap();
        let hi = *drawn.iter().max().unwrap();
        prop_assert!(hi - lo <= 1, "{drawn:?}");
        prop_assert_eq!(drawn.iter().sum::<usize>(), bs * nb);
        prop_assert_eq!(drawn.len(), active);
    }

    #[test]
    fn metrics_agree_with_counting(pairs in proptest::collection::vec((label(), label()), 1..300)) {
        let (t, p): (Vec<ClassLabel>, Vec<ClassLabel>) = pairs.iter().copied().unzip();
        let cm = confusion(&t, &p).unwrap();
        prop_assert_eq!(cm.total() as usize, pairs.len());
        let correct = pairs.iter().filter(|(a, b)| a == b).count();
        prop_assert_eq!(metrics::accuracy(&cm), correct as f64 / pairs.len() as f64);
        for mm in [MicroMetric::Precision, MicroMetric::Recall, MicroMetric::F1] {
            prop_assert_eq!(metrics::micro_average(&cm, mm), metrics::accuracy(&cm));
        }
        let recall = metrics::recall_per_class(&cm);
        for c in ClassLabel::ALL {
            let support = t.iter().filter(|&&x| x == c).count();
            if support > 0 {
                let hit = pairs.iter().filter(|(a, b)| *a == c && *b == c).count();
                prop_assert_eq!(recall[c.index()], hit as f64 / support as f64);
            }
        }
    }

    #[test]
    fn metrics_ignore_sample_order(pairs in proptest::collection::vec((label(), label()), 1..200), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut lesion_core::rng::seeded(seed));
        let split = |v: &[(ClassLabel, ClassLabel)]| -> ConfusionMatrix {
            let (t, p): (Vec<_>, Vec<_>) = v.iter().copied().unzip();
            confusion(&t, &p).unwrap()
        };
        prop_assert_eq!(metrics::report(&split(&pairs)), metrics::report(&split(&shuffled)));
    }

    #[test]
    fn softmax_rows_are_distributions(z in proptest::collection::vec(-50.0f64..50.0, 8..=40)) {
        let b = z.len() / 8;
        let t = Tensor::new(vec![b, 8], z[..b * 8].to_vec()).unwrap();
        let p = softmax(&t).unwrap();
        for i in 0..b {
            let row = p.row(i);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_linear_in_weights(rows in proptest::collection::vec(prob_row(), 1..6), k in 0.01f64..100.0, seed in 0usize..8) {
        let b = rows.len();
        let probs = Tensor::new(vec![b, 8], rows.concat()).unwrap();
        let labels: Vec<ClassLabel> = (0..b).map(|i| ClassLabel::from_index((i + seed) % 8).unwrap()).collect();
        let base = lesion_core::data::ClassWeights::uniform();
        let scaled = base.clone().scaled(&[k; NUM_CLASSES]);
        let l1 = weighted_ce_loss(&probs, &labels, &base).unwrap();
        let lk = weighted_ce_loss(&probs, &labels, &scaled).unwrap();
        prop_assert!(l1 >= 0.0);
        prop_assert!((lk - k * l1).abs() <= 1e-12 * lk.abs().max(1.0));
    }

    #[test]
    fn averaging_ignores_model_order(rows in proptest::collection::vec(prob_row(), 2..6)) {
        let sets: Vec<PredictionSet> = rows
            .iter()
            .map(|r| {
                let mut s = PredictionSet::new();
                s.insert("a", *r).unwrap();
                s
            })
            .collect();
        let mut rev = sets.clone();
        rev.reverse();
        let fwd = average(&sets).unwrap();
        prop_assert_eq!(&fwd, &average(&rev).unwrap());
        prop_assert!((fwd.rows["a"].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_csv_round_trips(rows in proptest::collection::vec(prob_row(), 1..20)) {
        let mut s = PredictionSet::new();
        for (i, r) in rows.iter().enumerate() {
            s.insert(format!("id{i}"), *r).unwrap();
        }
        let mut buf = Vec::new();
        write_predictions(&s, &mut buf).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        prop_assert!(back.renormalized.is_empty());
        for (id, r) in &s.rows {
            let got = back.set.get(id).unwrap();
            for c in 0..NUM_CLASSES {
                prop_assert!((got[c] - r[c]).abs() <= 1e-6);
            }
        }
        let mut again = Vec::new();
        write_predictions(&back.set, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}
