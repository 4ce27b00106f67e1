//! Central finite-difference checks of every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::edge::{gradient_magnitude, sobel3d, soft_boundary, BoundaryMode, EdgeMap, MAGNITUDE_EPS};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::losses::{balanced_bce, consistency_loss, dice_loss, edge_loss, total_loss, ConsistencyOptions, LossWeights};
use crate::nn::{EdgeGatedLayer, EgModel, Graph, ModelConfig, ParamStore, ResidualBlock};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for checks through the straight-through surrogate.
pub const SURROGATE_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per tensor; larger tensors are sampled at even strides.
pub const MAX_PROBES: usize = 48;

pub const MODULES: &[&str] = &["tensor-core", "nn-blocks", "edge-ops", "losses"];

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub module: &'static str,
    pub name: &'static str,
    /// `|a - n| / max(|a|, |n|)` over all probed coordinates (2-norms).
    pub rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// Builds a scalar from the parameters bound in `g` and the extra inputs.
pub type Objective<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn probes(len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|i| i * len / MAX_PROBES + (len / MAX_PROBES) / 2).collect()
    }
}

fn evaluate(store: &ParamStore, inputs: &[Tensor], f: &Objective, trainable: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new(store, trainable)?;
    let vars = inputs
        .iter()
        .map(|t| g.tape.leaf(t.clone(), trainable))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if !g.tape.value(out).is_scalar() {
        return Err(Error::shape("gradcheck", "objective must be scalar"));
    }
    Ok((g, vars, out))
}

/// Relative error between backward and central differences of `f` with
/// respect to every parameter in `store` and every tensor in `inputs`.
pub fn check(store: &ParamStore, inputs: &[Tensor], f: &Objective) -> Result<(f64, usize)> {
    let (mut g, vars, out) = evaluate(store, inputs, f, true)?;
    g.tape.backward(out)?;
    let mut analytic: Vec<Tensor> = g.param_grads()?;
    for &v in &vars {
        analytic.push(g.tape.take_grad(v).ok_or_else(|| Error::Tape("input gradient missing".into()))?);
    }
    let value_at = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let (g, _, out) = evaluate(store, inputs, f, false)?;
        g.tape.value(out).item()
    };
    let (mut diff, mut norm_a, mut norm_n, mut count) = (0.0, 0.0, 0.0, 0);
    let total = store.len() + inputs.len();
    for slot in 0..total {
        let len = if slot < store.len() {
            store.values()[slot].numel()
        } else {
            inputs[slot - store.len()].numel()
        };
        for i in probes(len) {
            let shifted = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                let mut x = inputs.to_vec();
                let t = if slot < store.len() {
                    &mut s.values_mut()[slot]
                } else {
                    &mut x[slot - store.len()]
                };
                t.data_mut()[i] += delta;
                value_at(&s, &x)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            let a = analytic[slot].data()[i];
            diff += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
            count += 1;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    // An identically zero gradient verifies nothing; report it as a failure.
    let rel = if scale == 0.0 { f64::INFINITY } else { diff.sqrt() / scale };
    Ok((rel, count))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Away from zero, for checks through kinks at the origin.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `sum(x * r)` for fixed random `r`, reducing any output to a scalar.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.tape.constant(random(&mut rng, &shape, -1.0, 1.0))?;
    let prod = g.tape.mul(x, r)?;
    g.tape.sum(prod)
}

/// Labels with a 2x2x2 foreground cube inside a 4^3 volume.
pub fn cube_labels() -> LabelVolume {
    LabelVolume::from_fn([1, 4, 4, 4], |_, z, y, x| {
        ((1..3).contains(&z) && (1..3).contains(&y) && (0..2).contains(&x)) as u8
    })
}

struct Case {
    module: &'static str,
    name: &'static str,
    tolerance: f64,
    run: Box<dyn Fn() -> Result<(f64, usize)>>,
}

fn op_case(
    module: &'static str,
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        module,
        name,
        tolerance: TOLERANCE,
        run: Box::new(move || check(&ParamStore::new(), &inputs, &f)),
    }
}

fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vol = [1, 2, 4, 4, 4];
    let mut cases = Vec::new();
    let tc = "tensor-core";

    let x = random(&mut rng, &vol, -1.0, 1.0);
    let w = random(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[2], -0.5, 0.5);
    cases.push(op_case(tc, "conv3d", vec![x.clone(), w, b], |g, v| {
        let y = g.tape.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        project(g, y, 1)
    }));
    let w2 = random(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
    cases.push(op_case(tc, "conv3d_stride2", vec![x.clone(), w2], |g, v| {
        let y = g.tape.conv3d(v[0], v[1], None, 2, 1)?;
        project(g, y, 2)
    }));
    let w3 = random(&mut rng, &[3, 2, 1, 1, 1], -0.5, 0.5);
    cases.push(op_case(tc, "conv3d_pointwise", vec![x.clone(), w3], |g, v| {
        let y = g.tape.conv3d(v[0], v[1], None, 1, 0)?;
        project(g, y, 3)
    }));
    let coarse = random(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
    cases.push(op_case(tc, "trilinear_upsample", vec![coarse], |g, v| {
        let y = g.tape.trilinear_upsample(v[0], 2)?;
        project(g, y, 4)
    }));
    cases.push(op_case(tc, "relu", vec![signed_away(&mut rng, &vol)], |g, v| {
        let y = g.tape.relu(v[0])?;
        project(g, y, 5)
    }));
    cases.push(op_case(tc, "sigmoid", vec![random(&mut rng, &vol, -3.0, 3.0)], |g, v| {
        let y = g.tape.sigmoid(v[0])?;
        project(g, y, 6)
    }));
    cases.push(op_case(tc, "softplus", vec![random(&mut rng, &vol, -3.0, 3.0)], |g, v| {
        let y = g.tape.softplus(v[0])?;
        project(g, y, 7)
    }));
    cases.push(op_case(tc, "sqrt", vec![random(&mut rng, &vol, 0.5, 2.0)], |g, v| {
        let y = g.tape.sqrt(v[0])?;
        project(g, y, 8)
    }));
    cases.push(op_case(tc, "abs", vec![signed_away(&mut rng, &vol)], |g, v| {
        let y = g.tape.abs(v[0])?;
        project(g, y, 9)
    }));
    cases.push(op_case(
        tc,
        "arithmetic",
        vec![random(&mut rng, &vol, -1.0, 1.0), random(&mut rng, &vol, 0.5, 1.5)],
        |g, v| {
            let s = g.tape.square(v[0])?;
            let q = g.tape.div(s, v[1])?;
            let m = g.tape.mul(q, v[1])?;
            let d = g.tape.sub(m, v[1])?;
            let d = g.tape.scale(d, 0.7)?;
            let d = g.tape.add_scalar(d, 0.1)?;
            project(g, d, 10)
        },
    ));
    let gn_x = random(&mut rng, &[2, 4, 4, 4, 4], -1.0, 1.0);
    let gamma = random(&mut rng, &[4], 0.5, 1.5);
    let beta = random(&mut rng, &[4], -0.5, 0.5);
    cases.push(op_case(tc, "group_norm", vec![gn_x, gamma, beta], |g, v| {
        let y = g.tape.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
        project(g, y, 11)
    }));
    cases.push(op_case(tc, "softmax_channels", vec![random(&mut rng, &vol, -2.0, 2.0)], |g, v| {
        let y = g.tape.softmax_channels(v[0])?;
        project(g, y, 12)
    }));
    cases.push(op_case(
        tc,
        "channel_ops",
        vec![random(&mut rng, &vol, -1.0, 1.0), random(&mut rng, &[1, 1, 4, 4, 4], -1.0, 1.0)],
        |g, v| {
            let e = g.tape.expand_channels(v[1], 2)?;
            let c = g.tape.concat_channels(&[v[0], e])?;
            let s = g.tape.slice_channels(c, 1, 2)?;
            let r = g.tape.sum_axes(s, &[2, 3])?;
            let m = g.tape.mean_axes(s, &[1])?;
            let r = g.tape.reshape(r, &[1, 2, 4])?;
            let a = project(g, r, 13)?;
            let b = project(g, m, 14)?;
            g.tape.add(a, b)
        },
    ));

    let nb = "nn-blocks";
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(11);
    let gate = EdgeGatedLayer::new(&mut store, &mut init, "gate", 0, 2, 3);
    randomize_biases(&mut store, &mut init);
    let e_in = random(&mut rng, &vol, -1.0, 1.0);
    let m_in = random(&mut rng, &[1, 3, 4, 4, 4], -1.0, 1.0);
    cases.push(Case {
        module: nb,
        name: "edge_gated_layer",
        tolerance: TOLERANCE,
        run: Box::new(move || {
            check(&store, &[e_in.clone(), m_in.clone()], &|g, v| {
                let out = gate.forward(g, v[0], v[1])?;
                project(g, out.output, 15)
            })
        }),
    });
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(12);
    let block = ResidualBlock::new(&mut store, &mut init, "block", 4, 2);
    randomize_biases(&mut store, &mut init);
    let rb_x = random(&mut rng, &[1, 4, 4, 4, 4], -1.0, 1.0);
    cases.push(Case {
        module: nb,
        name: "residual_block",
        tolerance: TOLERANCE,
        run: Box::new(move || {
            check(&store, std::slice::from_ref(&rb_x), &|g, v| {
                let y = block.forward(g, v[0])?;
                project(g, y, 16)
            })
        }),
    });
    let model = EgModel::new(ModelConfig {
        resolutions: 2,
        base_channels: 2,
        classes: 2,
        groups: 2,
        seed: 13,
        ..ModelConfig::default()
    })
    .expect("valid config");
    let mut model_store = model.params.clone();
    randomize_biases(&mut model_store, &mut init);
    let model_x = random(&mut rng, &[1, 1, 4, 4, 4], -1.0, 1.0);
    cases.push(Case {
        module: nb,
        name: "model_total_loss",
        tolerance: TOLERANCE,
        run: Box::new(move || {
            let labels = cube_labels();
            check(&model_store, std::slice::from_ref(&model_x), &|g, v| {
                let out = model.forward(g, v[0])?;
                let bundle = total_loss(&mut g.tape, &out, &labels, &LossWeights::default(), BoundaryMode::Softened)?;
                Ok(bundle.total)
            })
        }),
    });

    let eo = "edge-ops";
    cases.push(op_case(eo, "sobel_magnitude", vec![random(&mut rng, &[1, 1, 4, 4, 4], -1.0, 1.0)], |g, v| {
        let s = sobel3d(&mut g.tape, v[0])?;
        let m = gradient_magnitude(&mut g.tape, s, MAGNITUDE_EPS)?;
        project(g, m, 17)
    }));
    cases.push(Case {
        tolerance: SURROGATE_TOLERANCE,
        ..op_case(eo, "soft_boundary_softened", vec![random(&mut rng, &vol, -2.0, 2.0)], |g, v| {
            let p = g.tape.softmax_channels(v[0])?;
            let b = soft_boundary(&mut g.tape, p, 0.5, BoundaryMode::Softened)?;
            project(g, b, 18)
        })
    });

    let lo = "losses";
    let labels = cube_labels();
    let target = labels.one_hot(2).expect("binary labels");
    cases.push(op_case(lo, "dice_loss", vec![random(&mut rng, &vol, -2.0, 2.0), target], |g, v| {
        let p = g.tape.softmax_channels(v[0])?;
        dice_loss(&mut g.tape, p, v[1], 1e-5)
    }));
    // Every voxel of a 4^3 label volume is within the zero-padded Sobel
    // support, so the balanced losses get a mixed edge map instead.
    let mixed = EdgeMap::new([1, 4, 4, 4], (0..64).map(|i| (i % 3 == 0) as u8).collect()).expect("edges");
    let bce_edges = mixed.clone();
    cases.push(op_case(lo, "balanced_bce", vec![random(&mut rng, &[1, 1, 4, 4, 4], -2.0, 2.0)], move |g, v| {
        balanced_bce(&mut g.tape, v[0], &bce_edges)
    }));
    let el_edges = mixed;
    cases.push(op_case(
        lo,
        "edge_loss",
        vec![random(&mut rng, &[1, 1, 4, 4, 4], -2.0, 2.0)],
        move |g, v| {
            edge_loss(&mut g.tape, v[0], &el_edges, &LossWeights::default())
        },
    ));
    cases.push(Case {
        tolerance: SURROGATE_TOLERANCE,
        ..op_case(lo, "consistency_loss_softened", vec![random(&mut rng, &vol, -2.0, 2.0)], move |g, v| {
            let p = g.tape.softmax_channels(v[0])?;
            let opts = ConsistencyOptions {
                tau: 1.0,
                mode: BoundaryMode::Softened,
                full_volume: false,
            };
            consistency_loss(&mut g.tape, p, &labels, opts)
        })
    });
    cases
}

/// Non-zero biases so that checks exercise their gradients away from init.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") || store.name(id).ends_with(".beta") {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Runs every check, or those of one module.
pub fn run_gradchecks(module: Option<&str>) -> Result<Vec<GradCheck>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::invalid(
                "gradcheck",
                format!("unknown module {m:?}; expected one of {MODULES:?}"),
            ));
        }
    }
    cases()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
        .map(|c| {
            let (rel_error, probes) = (c.run)()?;
            Ok(GradCheck {
                module: c.module,
                name: c.name,
                rel_error,
                tolerance: c.tolerance,
                probes,
            })
        })
        .collect()
}
