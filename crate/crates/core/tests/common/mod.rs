//! Scalar-loop oracles shared by the oracle tests and the acceptance report.
#![allow(dead_code)]

use egcnn::edge::edges_from_labels;
use egcnn::losses::balanced_bce;
use egcnn::nn::{EdgeGatedLayer, Graph, ParamStore};
use egcnn::train::composite_dice;
use egcnn::{LabelVolume, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-12;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Seven nested loops over output and kernel coordinates.
pub fn conv_reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, d, h, wd] = x.shape().try_into().unwrap();
    let [k, _, kd, kh, kw] = w.shape().try_into().unwrap();
    let out = |e: usize, kk: usize| (e + 2 * pad - kk) / stride + 1;
    let (od, oh, ow) = (out(d, kd), out(h, kh), out(wd, kw));
    let xi = |s: usize, ch: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(((s * c + ch) * d + z as usize) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut data = Vec::with_capacity(n * k * od * oh * ow);
    for s in 0..n {
        for o in 0..k {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for ch in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let wv = w.data()[(((o * c + ch) * kd + a) * kh + bb) * kw + cc];
                                        acc += wv
                                            * xi(
                                                s,
                                                ch,
                                                (z * stride + a) as isize - pad as isize,
                                                (y * stride + bb) as isize - pad as isize,
                                                (xx * stride + cc) as isize - pad as isize,
                                            );
                                    }
                                }
                            }
                        }
                        data.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, od, oh, ow], data).unwrap()
}

pub fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> egcnn::Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let wv = tape.constant(w.clone())?;
    let bv = b.map(|b| tape.constant(b.clone())).transpose()?;
    let y = tape.conv3d(xv, wv, bv, stride, pad)?;
    Ok(tape.value(y).clone())
}

/// Brute-force Sobel magnitude per class, evaluated with explicit stencils.
pub fn edges_reference(labels: &LabelVolume, k: usize) -> Vec<u8> {
    let [n, d, h, w] = labels.dims();
    let smooth = [1.0, 2.0, 1.0];
    let deriv = [-1.0, 0.0, 1.0];
    // Outside the volume is background.
    let at = |s: usize, z: isize, y: isize, x: isize| -> u8 {
        if z >= 0 && y >= 0 && x >= 0 && z < d as isize && y < h as isize && x < w as isize {
            labels.data()[((s * d + z as usize) * h + y as usize) * w + x as usize]
        } else {
            0
        }
    };
    let mut out = vec![0u8; labels.len()];
    for s in 0..n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for class in 0..k {
                        let mut sq = 0.0;
                        for axis in 0..3 {
                            let mut g = 0.0;
                            for a in 0..3 {
                                for b in 0..3 {
                                    for c in 0..3 {
                                        let idx = [a, b, c];
                                        let wgt: f64 = (0..3)
                                            .map(|ax| if ax == axis { deriv[idx[ax]] } else { smooth[idx[ax]] })
                                            .product();
                                        let v = at(
                                            s,
                                            z as isize + a as isize - 1,
                                            y as isize + b as isize - 1,
                                            x as isize + c as isize - 1,
                                        );
                                        if v == class as u8 {
                                            g += wgt;
                                        }
                                    }
                                }
                            }
                            sq += g * g;
                        }
                        if sq.sqrt() > 1e-6 {
                            out[((s * d + z) * h + y) * w + x] = 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Set counts over voxel coordinates.
pub fn dice_by_sets(pred: &[u8], truth: &[u8], keep: impl Fn(u8) -> bool) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| keep(pred[i])).collect();
    let b: BTreeSet<usize> = (0..truth.len()).filter(|&i| keep(truth[i])).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}


/// Largest deviation from the loop reference over every small conv shape,
/// with the number of shapes compared.
pub fn conv3d_sweep() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cases, mut worst) = (0, 0.0f64);
    for extent in 1..=5 {
        for kernel in 1..=3 {
            for stride in 1..=2 {
                for pad in 0..=kernel / 2 + 1 {
                    if extent + 2 * pad < kernel {
                        continue;
                    }
                    for (n, c, k) in [(1, 1, 1), (2, 2, 3)] {
                        // Anisotropic extents exercise the index arithmetic per axis.
                        let x = random(&mut rng, &[n, c, extent, extent.max(kernel), 5]);
                        let w = random(&mut rng, &[k, c, kernel, kernel, kernel]);
                        let b = random(&mut rng, &[k]);
                        let want = conv_reference(&x, &w, Some(&b), stride, pad);
                        let got = conv(&x, &w, Some(&b), stride, pad).unwrap();
                        worst = worst.max(if got.shape() == want.shape() { got.max_abs_diff(&want) } else { f64::INFINITY });
                        cases += 1;
                    }
                }
            }
        }
    }
    (cases, worst)
}

/// Gate output and coefficient against per-voxel evaluation.
pub fn edge_gate_sweep() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for (ce, cm, extent) in [(1, 1, 1), (2, 3, 2), (4, 4, 4), (3, 2, 3), (1, 4, 5)] {
        let mut store = ParamStore::new();
        let layer = EdgeGatedLayer::new(&mut store, &mut rng, "gate", 0, ce, cm);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let e = random(&mut rng, &[1, ce, extent, extent, extent]);
        let m = random(&mut rng, &[1, cm, extent, extent, extent]);
        let mut g = Graph::new(&store, false).unwrap();
        let ev = g.tape.constant(e.clone()).unwrap();
        let mv = g.tape.constant(m.clone()).unwrap();
        let out = layer.forward(&mut g, ev, mv).unwrap();
        let got = g.tape.value(out.output);
        let alphas = g.tape.value(out.alpha);
        let we = store.get(layer.proj_e.weight).data();
        let be = store.get(layer.proj_e.bias).data()[0];
        let wm = store.get(layer.proj_m.weight).data();
        let bm = store.get(layer.proj_m.bias).data()[0];
        let vox = extent * extent * extent;
        for v in 0..vox {
            let mut s = be + bm;
            for c in 0..ce {
                s += we[c] * e.data()[c * vox + v];
            }
            for c in 0..cm {
                s += wm[c] * m.data()[c * vox + v];
            }
            let alpha = sigmoid(s.max(0.0));
            worst = worst.max((alphas.data()[v] - alpha).abs());
            for c in 0..ce {
                let x = e.data()[c * vox + v];
                worst = worst.max((got.data()[c * vox + v] - (x * alpha + x)).abs());
            }
        }
    }
    worst
}

/// Class-balanced cross-entropy against a direct sum.
pub fn balanced_bce_sweep() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for extent in 1..=4 {
        for _ in 0..5 {
            let shape = [2, 1, extent, extent, extent];
            let n = 2 * extent * extent * extent;
            let logits = Tensor::from_fn(&shape, |_| rng.random_range(-6.0..6.0));
            let edges: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
            let map = egcnn::edge::EdgeMap::new([2, extent, extent, extent], edges.clone()).unwrap();
            let mut tape = Tape::new();
            let lv = tape.constant(logits.clone()).unwrap();
            let loss = balanced_bce(&mut tape, lv, &map).unwrap();
            let got = tape.value(loss).item().unwrap();
            let pos = edges.iter().filter(|&&e| e == 1).count() as f64;
            let beta = 1.0 - pos / n as f64;
            let mut want = 0.0;
            for (i, &e) in edges.iter().enumerate() {
                let p = sigmoid(logits.data()[i]);
                want += if e == 1 { -beta * p.ln() } else { -(1.0 - beta) * (1.0 - p).ln() };
            }
            want /= n as f64;
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

/// Voxels where the extracted edge map disagrees with the stencil reference.
pub fn edges_sweep() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for d in 1..=4 {
        for h in 1..=4 {
            for w in [1, 3, 5] {
                for k in 1..=3u8 {
                    let labels = LabelVolume::from_fn([2, d, h, w], |_, _, _, _| rng.random_range(0..k));
                    let got = edges_from_labels(&labels, k as usize).unwrap();
                    let want = edges_reference(&labels, k as usize);
                    mismatches += got.data().iter().zip(&want).filter(|(a, b)| a != b).count();
                }
            }
        }
    }
    mismatches
}

/// Per-class, mean foreground and composite Dice against set counts.
pub fn composite_dice_sweep() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for extent in 1..=5 {
        for trial in 0..8 {
            let dims = [1, extent, extent, extent];
            let truth = LabelVolume::from_fn(dims, |_, _, _, _| rng.random_range(0..3));
            let pred = LabelVolume::from_fn(dims, |_, _, _, _| rng.random_range(0..3));
            let pred = if trial == 0 { truth.clone() } else { pred };
            let got = composite_dice(&pred, &truth, 3).unwrap();
            for c in 0..3u8 {
                let want = dice_by_sets(pred.data(), truth.data(), |l| l == c);
                worst = worst.max((got.per_class[c as usize] - want).abs());
            }
            let organ = dice_by_sets(pred.data(), truth.data(), |l| l >= 1);
            let lesion = dice_by_sets(pred.data(), truth.data(), |l| l == 2);
            worst = worst.max((got.composite.unwrap() - (organ + lesion) / 2.0).abs());
            worst = worst.max((got.mean_foreground - (got.per_class[1] + got.per_class[2]) / 2.0).abs());
        }
    }
    worst
}
