//! Optimized kernels against direct scalar-loop evaluations.

use egcnn::edge::{edges_from_labels, sobel3d};
use egcnn::losses::{balanced_bce, dice_loss};
use egcnn::nn::{EdgeGatedLayer, Graph, ParamStore};
use egcnn::train::dice_metric;
use egcnn::{LabelVolume, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{conv, conv_reference, edges_reference, random, TOL};

#[test]
fn conv3d_two_by_two_kernel_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 1, 4, 4, 4]);
    let w = random(&mut rng, &[2, 1, 2, 2, 2]);
    let got = conv(&x, &w, None, 1, 0).unwrap();
    assert!(got.max_abs_diff(&conv_reference(&x, &w, None, 1, 0)) < TOL);
}


#[test]
fn conv3d_identity_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 1, 3, 4, 5]);
    let one = Tensor::ones(&[1, 1, 1, 1, 1]);
    assert_eq!(conv(&x, &one, None, 1, 0).unwrap(), x);
    let zero = Tensor::zeros(&[1, 2, 3, 3, 3]);
    let w = random(&mut rng, &[3, 2, 3, 3, 3]);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = conv(&zero, &w, Some(&b), 1, 1).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[i / 27]);
    }
}

#[test]
fn conv3d_rejects_bad_shapes() {
    let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
    assert!(conv(&x, &Tensor::zeros(&[1, 3, 1, 1, 1]), None, 1, 0).is_err());
    assert!(conv(&x, &Tensor::zeros(&[1, 2, 5, 5, 5]), None, 1, 0).is_err());
    assert!(conv(&x, &Tensor::zeros(&[1, 2, 1, 1, 1]), None, 0, 0).is_err());
}

/// Align-corners-false linear interpolation along one axis of length `n`.
fn interp_1d(values: &[f64], scale: usize, o: usize) -> f64 {
    let n = values.len();
    let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = src - i0 as f64;
    values[i0] * (1.0 - t) + values[i1] * t
}

#[test]
fn upsample_ramp_matches_closed_form() {
    let (d, scale) = (5, 2);
    let ramp: Vec<f64> = (0..d).map(|z| 1.5 * z as f64 - 2.0).collect();
    let x = Tensor::from_fn(&[1, 1, d, 2, 3], |i| ramp[i / 6]);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let y = tape.trilinear_upsample(xv, scale).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[1, 1, d * scale, 4, 6]);
    for (i, v) in y.data().iter().enumerate() {
        let z = i / 24;
        assert!((v - interp_1d(&ramp, scale, z)).abs() < TOL);
    }
}

#[test]
fn upsample_random_volume_matches_separable_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, h, w) = (3, 2, 4);
    let x = random(&mut rng, &[1, 2, d, h, w]);
    for scale in 1..=3 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.trilinear_upsample(xv, scale).unwrap();
        let y = tape.value(y);
        let (od, oh, ow) = (d * scale, h * scale, w * scale);
        for c in 0..2 {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        // Interpolate along W, then H, then D.
                        let along_w = |zi: usize, yi: usize| {
                            let row: Vec<f64> = (0..w).map(|k| x.data()[((c * d + zi) * h + yi) * w + k]).collect();
                            interp_1d(&row, scale, xx)
                        };
                        let along_h = |zi: usize| {
                            let col: Vec<f64> = (0..h).map(|yi| along_w(zi, yi)).collect();
                            interp_1d(&col, scale, yy)
                        };
                        let depth: Vec<f64> = (0..d).map(along_h).collect();
                        let want = interp_1d(&depth, scale, z);
                        let got = y.data()[((c * od + z) * oh + yy) * ow + xx];
                        assert!((got - want).abs() < TOL, "scale {scale} at {c},{z},{yy},{xx}");
                    }
                }
            }
        }
    }
}


#[test]
fn edge_gated_layer_constant_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let layer = EdgeGatedLayer::new(&mut store, &mut rng, "gate", 0, 2, 3);
    let e = random(&mut rng, &[1, 2, 2, 2, 2]);
    let m = random(&mut rng, &[1, 3, 2, 2, 2]);
    let mut g = Graph::new(&store, false).unwrap();
    let zero = g.tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2])).unwrap();
    let mv = g.tape.constant(m.clone()).unwrap();
    let out = layer.forward(&mut g, zero, mv).unwrap();
    assert!(g.tape.value(out.output).data().iter().all(|&v| v == 0.0));
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new(&store, false).unwrap();
    let ev = g.tape.constant(e.clone()).unwrap();
    let mv = g.tape.constant(m).unwrap();
    let out = layer.forward(&mut g, ev, mv).unwrap();
    assert!(g.tape.value(out.alpha).data().iter().all(|&a| a == 0.5));
    assert!(g.tape.value(out.output).max_abs_diff(&e.map(|v| 1.5 * v)) < TOL);
    let bad = g.tape.constant(Tensor::zeros(&[1, 3, 1, 2, 2])).unwrap();
    assert!(layer.forward(&mut g, ev, bad).is_err());
}


#[test]
fn balanced_bce_saturated_correct_is_tiny() {
    let edges: Vec<u8> = (0..64).map(|i| (i % 5 == 0) as u8).collect();
    let logits = Tensor::new(vec![1, 1, 4, 4, 4], edges.iter().map(|&e| if e == 1 { 40.0 } else { -40.0 }).collect())
        .unwrap();
    let map = egcnn::edge::EdgeMap::new([1, 4, 4, 4], edges).unwrap();
    let mut tape = Tape::new();
    let lv = tape.constant(logits).unwrap();
    let loss = balanced_bce(&mut tape, lv, &map).unwrap();
    assert!(tape.value(loss).item().unwrap() < 1e-10);
}


#[test]
fn single_voxel_and_planar_edges() {
    let n = 5;
    let dot = LabelVolume::from_fn([1, n, n, n], |_, z, y, x| (z == 2 && y == 2 && x == 2) as u8);
    let got = edges_from_labels(&dot, 2).unwrap();
    assert_eq!(got.data(), &edges_reference(&dot, 2)[..]);
    // The whole 3^3 neighbourhood responds except its centre, where every
    // derivative tap on the dot is zero.
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let off = [z, y, x].map(|c| (c as isize - 2).abs());
                let near = off.iter().all(|&o| o <= 1) && off.iter().sum::<isize>() > 0;
                assert_eq!(got.data()[(z * n + y) * n + x] == 1, near, "at {z},{y},{x}");
            }
        }
    }
    let plane = LabelVolume::from_fn([1, 6, 4, 4], |_, z, _, _| (z >= 3) as u8);
    let got = edges_from_labels(&plane, 2).unwrap();
    for z in 0..6 {
        for y in 0..4 {
            for x in 0..4 {
                let side = y == 0 || y == 3 || x == 0 || x == 3;
                let foreground_face = z >= 3 && side || z == 5;
                let near_interface = z == 2 || z == 3;
                let e = got.data()[(z * 4 + y) * 4 + x] == 1;
                assert_eq!(e, near_interface || foreground_face, "at {z},{y},{x}");
            }
        }
    }
    for k in 1..=3 {
        let constant = LabelVolume::from_fn([1, 3, 3, 3], |_, _, _, _| 0);
        assert_eq!(edges_from_labels(&constant, k).unwrap().edge_count(), 0);
    }
    // A non-background class filling the volume lights up every face voxel.
    let filled = LabelVolume::from_fn([1, 3, 3, 3], |_, _, _, _| 1);
    assert_eq!(edges_from_labels(&filled, 2).unwrap().edge_count(), 26);
}

#[test]
fn sobel_on_ramp_is_32() {
    let n = 5;
    let ramp = Tensor::from_fn(&[1, 1, n, n, n], |i| (i / 25) as f64);
    let mut tape = Tape::new();
    let v = tape.constant(ramp.clone()).unwrap();
    let r = sobel3d(&mut tape, v).unwrap();
    let r = tape.value(r).clone();
    let rev = ramp.map(|v| -v);
    let v2 = tape.constant(rev).unwrap();
    let r2 = sobel3d(&mut tape, v2).unwrap();
    let r2 = tape.value(r2).clone();
    let vox = n * n * n;
    for z in 1..n - 1 {
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let i = (z * n + y) * n + x;
                assert_eq!(r.data()[i], 32.0);
                assert_eq!(r.data()[vox + i], 0.0);
                assert_eq!(r.data()[2 * vox + i], 0.0);
            }
        }
    }
    for (a, b) in r.data().iter().zip(r2.data()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn dice_loss_half_overlap() {
    let target = Tensor::from_fn(&[1, 1, 2, 2, 4], |i| (i < 8) as u8 as f64);
    let pred = Tensor::from_fn(&[1, 1, 2, 2, 4], |i| (i < 4) as u8 as f64);
    let mut tape = Tape::new();
    let p = tape.constant(pred).unwrap();
    let t = tape.constant(target).unwrap();
    let l = dice_loss(&mut tape, p, t, 1e-5).unwrap();
    let l = tape.value(l).item().unwrap();
    assert!((l - (1.0 - 8.0 / (12.0 + 1e-5))).abs() < TOL);
    assert!((l - 1.0 / 3.0).abs() < 1e-6);
}


#[test]
fn dice_metric_by_hand() {
    let truth = LabelVolume::from_fn([1, 2, 2, 4], |_, z, _, _| (z == 0) as u8);
    let pred = LabelVolume::from_fn([1, 2, 2, 4], |_, z, y, _| (z == y) as u8);
    assert_eq!(dice_metric(&pred, &truth, 1).unwrap(), 0.5);
    let none = LabelVolume::from_fn([1, 2, 2, 4], |_, z, _, _| (z == 1) as u8);
    assert_eq!(dice_metric(&none, &truth, 1).unwrap(), 0.0);
    assert_eq!(dice_metric(&truth, &truth, 1).unwrap(), 1.0);
    assert_eq!(dice_metric(&truth, &truth, 2).unwrap(), 1.0);
}

#[test]
fn conv3d_exhaustive_small_shapes() {
    let (cases, err) = common::conv3d_sweep();
    assert!(cases > 100);
    assert!(err < TOL, "{err}");
}

#[test]
fn edge_gated_layer_matches_per_voxel_evaluation() {
    let err = common::edge_gate_sweep();
    assert!(err < TOL, "{err}");
}

#[test]
fn balanced_bce_matches_loop() {
    let err = common::balanced_bce_sweep();
    assert!(err < TOL, "{err}");
}

#[test]
fn edges_from_labels_matches_stencil_exhaustively() {
    assert_eq!(common::edges_sweep(), 0);
}

#[test]
fn composite_dice_matches_set_counts() {
    let err = common::composite_dice_sweep();
    assert!(err < TOL, "{err}");
}
