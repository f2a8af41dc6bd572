//! Oracles shared by the integration tests: central differences and flood fill.

#![allow(dead_code)]

use std::collections::BTreeSet;

use pgcam_core::localizer::Mask;
use pgcam_core::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(lo..hi))
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps round-off on
/// vanishing gradients from reading as a large relative error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at 0, or `None` when steps of `FD_STEP` and
/// `FD_STEP / 10` disagree, which means `[-FD_STEP, FD_STEP]` straddles
/// a kink (ReLU at zero, max-pool switch) and the probe is meaningless.
pub fn central_difference(f: impl Fn(f64) -> f64) -> Option<f64> {
    let wide = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
    let h = FD_STEP / 10.0;
    let narrow = (f(h) - f(-h)) / (2.0 * h);
    ((wide - narrow).abs() <= 1e-6 * wide.abs().max(1e-3)).then_some(wide)
}

/// Draws probes until `probes` smooth ones have been scored; returns the
/// worst relative error. Panics if kinks swallow most draws.
pub fn probe_loop(probes: usize, mut one: impl FnMut() -> Option<f64>) -> f64 {
    let mut worst = 0.0f64;
    let (mut scored, mut draws) = (0, 0);
    while scored < probes {
        draws += 1;
        assert!(draws <= 4 * probes, "only {scored} of {draws} probes were smooth");
        if let Some(e) = one() {
            worst = worst.max(e);
            scored += 1;
        }
    }
    worst
}

/// Worst relative error over `probes` random coordinates of `inputs`.
///
/// `build` records a scalar-valued function of the inputs (registered as
/// parameters, in order) and returns the scalar's id.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    probes: usize,
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &ids);
        (tape, ids, out)
    };
    let (tape, ids, out) = eval(inputs);
    assert_eq!(tape.value(out).numel(), 1, "gradcheck needs a scalar output");
    let grads = tape.backward(out).expect("backward");
    let mut r = rng(seed);
    probe_loop(probes, || {
        let t = r.random_range(0..inputs.len());
        let j = r.random_range(0..inputs[t].numel());
        let analytic = grads.grad_of(ids[t]).expect("input gradient").data()[j];
        let numeric = central_difference(|delta| {
            let mut xs = inputs.to_vec();
            xs[t].data_mut()[j] += delta;
            let (tape, _, out) = eval(&xs);
            tape.value(out).item()
        })?;
        Some(rel_err(analytic, numeric))
    })
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output element contributes a distinct amount to the gradient.
pub fn project(tape: &mut Tape<f64>, x: TensorId, seed: u64) -> TensorId {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let dims = tape.shape(x).dims().to_vec();
    let w = random_tensor(&mut r, &dims, -1.0, 1.0);
    tape.weighted_sum(x, w).expect("weighted sum")
}

use pgcam_core::models::{Model, ModelConfig, ModelKind};
use pgcam_core::tensor::{BnMode, BnState};

/// Gives the zero-initialized classifier random weights and biases so
/// saliency and gradient checks on untrained models are not vacuous.
pub fn randomize_head<T: pgcam_core::tensor::Element>(model: &mut Model<T>, seed: u64) {
    let mut r = rng(seed ^ 0x4ead);
    for name in ["head.weight", "head.bias"] {
        let i = model.params().index_of(name).expect("head parameter");
        for v in model.params_mut().get_mut(i).data_mut() {
            *v = T::from_f64(r.random_range(-1.0..1.0));
        }
    }
}

pub const PROBES: usize = 24;

/// Worst relative error per layer operation, each over [`PROBES`] probes.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let x = random_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut r, &[4], -0.5, 0.5);
    let x7 = random_tensor(&mut r, &[2, 3, 7, 7], -1.0, 1.0);
    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d stride 2", 2, 1), ("conv2d unpadded", 1, 0)] {
        let input = if stride == 2 { x7.clone() } else { x.clone() };
        let e = gradcheck(&[input, w.clone(), b.clone()], PROBES, seed + 1, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap();
            project(t, y, 1)
        });
        out.push((name, e));
    }
    let wt = random_tensor(&mut r, &[3, 2, 2, 2], -0.5, 0.5);
    out.push((
        "transposed_conv2d",
        gradcheck(&[x.clone(), wt], PROBES, seed + 2, |t, ids| {
            let y = t.transposed_conv2d(ids[0], ids[1], 2).unwrap();
            project(t, y, 2)
        }),
    ));
    out.push((
        "maxpool2d",
        gradcheck(std::slice::from_ref(&x), PROBES, seed + 3, |t, ids| {
            let y = t.maxpool2d(ids[0], 2, 2).unwrap();
            project(t, y, 3)
        }),
    ));
    out.push((
        "relu",
        gradcheck(std::slice::from_ref(&x), PROBES, seed + 4, |t, ids| {
            let y = t.relu(ids[0]).unwrap();
            project(t, y, 4)
        }),
    ));
    let gamma = random_tensor(&mut r, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut r, &[3], -0.5, 0.5);
    let mut state = BnState::<f64>::new(3);
    state.running_mean = vec![0.1, -0.2, 0.3];
    state.running_var = vec![0.5, 1.5, 2.0];
    for (name, mode) in [("batch_norm train", BnMode::Train), ("batch_norm infer", BnMode::Infer)] {
        let e = gradcheck(&[x.clone(), gamma.clone(), beta.clone()], PROBES, seed + 5, |t, ids| {
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], &state, mode).unwrap();
            project(t, y, 5)
        });
        out.push((name, e));
    }
    let x2 = random_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
    out.push((
        "concat_channels",
        gradcheck(&[x.clone(), x2], PROBES, seed + 6, |t, ids| {
            let y = t.concat_channels(&[ids[0], ids[1]]).unwrap();
            project(t, y, 6)
        }),
    ));
    out.push((
        "slice_channels",
        gradcheck(std::slice::from_ref(&x), PROBES, seed + 7, |t, ids| {
            let y = t.slice_channels(ids[0], 1, 2).unwrap();
            project(t, y, 7)
        }),
    ));
    out.push((
        "global_avg_pool",
        gradcheck(std::slice::from_ref(&x), PROBES, seed + 8, |t, ids| {
            let y = t.global_avg_pool(ids[0]).unwrap();
            project(t, y, 8)
        }),
    ));
    let v = random_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let lw = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let lb = random_tensor(&mut r, &[4], -1.0, 1.0);
    out.push((
        "linear",
        gradcheck(&[v.clone(), lw, lb], PROBES, seed + 9, |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2]).unwrap();
            project(t, y, 9)
        }),
    ));
    let logits = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    out.push((
        "softmax_cross_entropy",
        gradcheck(std::slice::from_ref(&logits), PROBES, seed + 10, |t, ids| {
            t.softmax_cross_entropy(ids[0], &[0, 3, 1]).unwrap()
        }),
    ));
    out.push((
        "class_score",
        gradcheck(std::slice::from_ref(&logits), PROBES, seed + 11, |t, ids| t.class_score(ids[0], 2).unwrap()),
    ));
    out.push((
        "class_log_prob",
        gradcheck(&[logits], PROBES, seed + 12, |t, ids| t.class_log_prob(ids[0], 1).unwrap()),
    ));
    out.push((
        "scale",
        gradcheck(&[v], PROBES, seed + 13, |t, ids| {
            let y = t.scale(ids[0], -1.7).unwrap();
            project(t, y, 13)
        }),
    ));
    out
}

/// Worst relative error of the full DC-FPN training loss against its
/// parameters, on a small but complete four-scale network.
pub fn dcfpn_loss_gradcheck(seed: u64, probes: usize) -> f64 {
    let cfg = ModelConfig {
        input_size: 16,
        scales: 4,
        base_channels: 2,
        seed,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(ModelKind::Dcfpn, &cfg).unwrap();
    randomize_head(&mut model, seed);
    let mut r = rng(seed + 100);
    let images = random_tensor(&mut r, &[3, 1, 16, 16], 0.0, 1.0);
    let labels = [0usize, 1, 1];
    let loss = |m: &Model<f64>| {
        let mut f = m.forward(&images, &[], BnMode::Train).unwrap();
        let l = f.tape.softmax_cross_entropy(f.logits, &labels).unwrap();
        (f, l)
    };
    let (f, l) = loss(&model);
    let grads = f.tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = f.params.iter().map(|&id| grads.grad_of(id).unwrap().clone()).collect();
    probe_loop(probes, || {
        let i = r.random_range(0..analytic.len());
        let j = r.random_range(0..analytic[i].numel());
        let numeric = central_difference(|delta| {
            let mut m = model.clone();
            m.params_mut().get_mut(i).data_mut()[j] += delta;
            let (f, l) = loss(&m);
            f.tape.value(l).item()
        })?;
        Some(rel_err(analytic[i].data()[j], numeric))
    })
}

/// 8-connected components by depth-first flood fill, as pixel sets.
pub fn flood_fill(m: &Mask) -> BTreeSet<BTreeSet<(u32, u32)>> {
    let (h, w) = (m.height(), m.width());
    let mut seen = vec![false; h * w];
    let mut out = BTreeSet::new();
    for start in 0..h * w {
        if seen[start] || !m.bits()[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            comp.insert((x as u32, y as u32));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.bits()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.insert(comp);
    }
    out
}
