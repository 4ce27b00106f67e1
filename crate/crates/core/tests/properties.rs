use egcnn::data::{decode_volume, encode_volume, normalize_mri, Modality, PhantomSpec, VolumeRecord};
use egcnn::edge::{edges_from_labels, soft_boundary, BoundaryMode};
use egcnn::losses::{consistency_loss, dice_loss, ConsistencyOptions};
use egcnn::nn::{EdgeGatedLayer, Graph, ModelConfig, ParamStore};
use egcnn::tensor::pairwise_sum;
use egcnn::train::{dice_metric, lr_schedule, AdamState, Checkpoint};
use egcnn::{LabelVolume, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..5, 1usize..5, 1usize..5]
}

fn labels(k: u8) -> impl Strategy<Value = LabelVolume> {
    dims().prop_flat_map(move |[d, h, w]| {
        proptest::collection::vec(0..k, d * h * w)
            .prop_map(move |data| LabelVolume::new([1, d, h, w], data).unwrap())
    })
}

fn label_pair() -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    dims().prop_flat_map(|[d, h, w]| {
        let n = d * h * w;
        (proptest::collection::vec(0..2u8, n), proptest::collection::vec(0..2u8, n)).prop_map(move |(a, b)| {
            (LabelVolume::new([1, d, h, w], a).unwrap(), LabelVolume::new([1, d, h, w], b).unwrap())
        })
    })
}

fn tensor(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-range..range, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

fn softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let s = tape.softmax_channels(v).unwrap();
    tape.value(s).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in tensor(vec![2, 3, 2, 2, 2], 30.0), shift in -50.0..50.0f64) {
        let p = softmax(&x);
        for s in 0..2 {
            for v in 0..8 {
                let total: f64 = (0..3).map(|c| p.data()[(s * 3 + c) * 8 + v]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted = softmax(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn reductions_are_deterministic(values in proptest::collection::vec(-1e6..1e6f64, 0..300)) {
        let a = pairwise_sum(&values);
        let b = pairwise_sum(&values.clone());
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let naive: f64 = values.iter().sum();
        prop_assert!((a - naive).abs() <= 1e-9 * (1.0 + values.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn gate_coefficients_lie_in_unit_interval(seed in any::<u64>(), scale in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = EdgeGatedLayer::new(&mut store, &mut rng, "g", 0, 2, 3);
        let e = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| scale * ((i as f64 * 0.7 + seed as f64).sin()));
        let m = Tensor::from_fn(&[1, 3, 2, 2, 2], |i| scale * ((i as f64 * 1.3).cos()));
        let mut g = Graph::new(&store, false).unwrap();
        let ev = g.tape.constant(e).unwrap();
        let mv = g.tape.constant(m).unwrap();
        let out = layer.forward(&mut g, ev, mv).unwrap();
        // ReLU before the sigmoid puts alpha in [1/2, 1).
        prop_assert!(g.tape.value(out.alpha).data().iter().all(|&a| (0.5..1.0).contains(&a)));
    }

    #[test]
    fn dice_metric_symmetric_and_reflexive(a in labels(3), seed in any::<u64>()) {
        let [_, d, h, w] = a.dims();
        let b = LabelVolume::from_fn([1, d, h, w], |_, z, y, x| ((z * 7 + y * 3 + x + seed as usize) % 3) as u8);
        for c in 0..3 {
            prop_assert_eq!(dice_metric(&a, &b, c).unwrap(), dice_metric(&b, &a, c).unwrap());
            prop_assert_eq!(dice_metric(&a, &a, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn dice_loss_is_bounded_and_symmetric_for_binary((a, b) in label_pair()) {
        let (ta, tb) = (a.as_field(), b.as_field());
        let mut tape = Tape::new();
        let va = tape.constant(ta).unwrap();
        let vb = tape.constant(tb).unwrap();
        let ab = dice_loss(&mut tape, va, vb, 1e-5).unwrap();
        let ba = dice_loss(&mut tape, vb, va, 1e-5).unwrap();
        let ab = tape.value(ab).item().unwrap();
        prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
        prop_assert_eq!(ab, tape.value(ba).item().unwrap());
    }

    #[test]
    fn consistency_vanishes_on_one_hot(l in labels(3)) {
        let mut tape = Tape::new();
        let p = tape.constant(l.one_hot(3).unwrap()).unwrap();
        let opts = ConsistencyOptions { tau: 1.0, mode: BoundaryMode::Deterministic, full_volume: false };
        let loss = consistency_loss(&mut tape, p, &l, opts).unwrap();
        prop_assert!(tape.value(loss).item().unwrap() < 1e-10);
    }

    #[test]
    fn stochastic_boundary_repeats_for_equal_seeds(x in tensor(vec![1, 3, 3, 3, 3], 4.0), seed in any::<u64>()) {
        let p = softmax(&x);
        let run = |mode| {
            let mut tape = Tape::new();
            let v = tape.constant(p.clone()).unwrap();
            let b = soft_boundary(&mut tape, v, 0.5, mode).unwrap();
            tape.value(b).clone()
        };
        let stochastic = BoundaryMode::Stochastic { seed };
        prop_assert_eq!(run(stochastic), run(stochastic));
        prop_assert_eq!(run(BoundaryMode::Deterministic), run(BoundaryMode::Deterministic));
    }

    #[test]
    fn edges_ignore_label_permutation(l in labels(4), fg in Just([1u8, 2, 3]).prop_shuffle()) {
        // Outside the volume is background, so class 0 stays put.
        let perm = [0, fg[0], fg[1], fg[2]];
        let permuted = LabelVolume::new(l.dims(), l.data().iter().map(|&c| perm[c as usize]).collect()).unwrap();
        prop_assert_eq!(edges_from_labels(&l, 4).unwrap(), edges_from_labels(&permuted, 4).unwrap());
    }

    #[test]
    fn egv_round_trips(l in labels(4), seed in any::<u64>(), ct in any::<bool>()) {
        let [_, d, h, w] = l.dims();
        let image = Tensor::from_fn(&[2, d, h, w], |i| ((i as u64 ^ seed) % 1000) as f64 * 0.25 - 100.0);
        let modality = if ct { Modality::CtLike } else { Modality::MriLike };
        let rec = VolumeRecord::new(format!("v{seed}"), modality, [1.0, 0.5, 2.0], 4, image, l).unwrap();
        let back = decode_volume(&encode_volume(&rec), "mem").unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn mri_normalization_keeps_background(values in proptest::collection::vec(prop_oneof![Just(0.0), 1.0..500.0f64], 8..64)) {
        prop_assume!(values.iter().filter(|&&v| v != 0.0).count() >= 2);
        let distinct = values.iter().filter(|&&v| v != 0.0).any(|&v| v != values.iter().copied().find(|&u| u != 0.0).unwrap());
        prop_assume!(distinct);
        let n = values.len();
        let x = Tensor::new(vec![1, 1, 1, n], values.clone()).unwrap();
        let y = normalize_mri(&x).unwrap();
        let mut inside = Vec::new();
        for (a, b) in values.iter().zip(y.data()) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            } else {
                inside.push(*b);
            }
        }
        let m = inside.iter().sum::<f64>() / inside.len() as f64;
        let var = inside.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / inside.len() as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn phantom_lesions_nest_inside_organs(seed in any::<u64>(), ct in any::<bool>()) {
        let modality = if ct { Modality::CtLike } else { Modality::MriLike };
        let spec = PhantomSpec { extent: 24, organ_radius: [5.0, 8.0], lesion_radius: [2.0, 4.0], organ_jitter: 2.0, ..PhantomSpec::new(modality, 3, seed) };
        let rec = egcnn::data::generate_phantom(&spec).unwrap();
        let l = rec.labels();
        let [_, d, h, w] = l.dims();
        let at = |z: isize, y: isize, x: isize| -> u8 {
            if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
                0
            } else {
                l.data()[(z as usize * h + y as usize) * w + x as usize]
            }
        };
        prop_assert!(l.count(1) > 0);
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(z, y, x) == 2 {
                        for dz in -1..=1 {
                            for dy in -1..=1 {
                                for dx in -1..=1 {
                                    prop_assert!(at(z + dz, y + dy, x + dx) >= 1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lr_schedule_decreases(alpha in 1e-6..1.0f64, total in 1usize..500) {
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let lr = lr_schedule(alpha, e, total).unwrap();
            prop_assert!(lr >= 0.0 && lr <= alpha);
            prop_assert!(lr < prev);
            prev = lr;
        }
        prop_assert_eq!(lr_schedule(alpha, 0, total).unwrap(), alpha);
        prop_assert_eq!(prev, 0.0);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), epoch in 0usize..1000, step in any::<u32>()) {
        let model = egcnn::nn::EgModel::new(ModelConfig { resolutions: 2, base_channels: 2, seed, ..ModelConfig::default() }).unwrap();
        let mut adam = AdamState::new(model.params.values());
        adam.step = step as u64;
        for (i, m) in adam.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f64 * 1e-3 - 0.1);
        }
        let ckpt = Checkpoint::capture(&model, &adam, epoch, seed);
        prop_assert_eq!(Checkpoint::decode(&ckpt.encode(), "mem").unwrap(), ckpt);
    }
}
