//! Shared oracles for the integration suites: finite-difference gradients,
//! finite-difference-of-gradient HVPs, exact traces via basis-vector HVPs,
//! and a generator of random small models. These stay independent of the
//! analytic code paths they check (they only call forward_loss / backward).

use cwhawq_core::engine::{backward, forward_loss, Batch, HvpEngine};
use cwhawq_core::model::{Model, ModelBuilder};
use cwhawq_core::rng::substream;
use cwhawq_core::tensor::Tensor;
use rand::Rng;

/// Central-difference gradient of the mean loss, step h per coordinate.
pub fn fd_gradient(model: &Model, batch: &Batch, h: f64) -> Vec<f64> {
    let base = model.flatten_params();
    let mut out = vec![0.0; base.len()];
    for p in 0..base.len() {
        let mut m = model.clone();
        let mut theta = base.clone();
        theta[p] = base[p] + h;
        m.unflatten_params(&theta).unwrap();
        let (lp, _) = forward_loss(&m, batch).unwrap();
        theta[p] = base[p] - h;
        m.unflatten_params(&theta).unwrap();
        let (lm, _) = forward_loss(&m, batch).unwrap();
        out[p] = (lp - lm) / (2.0 * h);
    }
    out
}

/// Finite difference of analytic gradients: (g(w + eps v) - g(w - eps v)) / 2 eps.
pub fn fd_hvp(model: &Model, batch: &Batch, v: &[f64], eps: f64) -> Vec<f64> {
    let base = model.flatten_params();
    let shifted = |sign: f64| -> Vec<f64> {
        let mut m = model.clone();
        let theta: Vec<f64> = base.iter().zip(v).map(|(b, d)| b + sign * eps * d).collect();
        m.unflatten_params(&theta).unwrap();
        let (_, cache) = forward_loss(&m, batch).unwrap();
        backward(&m, &cache).unwrap().flatten()
    };
    let gp = shifted(1.0);
    let gm = shifted(-1.0);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
}

/// Exact trace of one layer's weight-block Hessian diagonal via basis-vector
/// HVPs through the full-parameter path.
pub fn exact_layer_trace(engine: &HvpEngine, model: &Model, layer_index: usize) -> f64 {
    let span = model
        .param_layout()
        .into_iter()
        .find(|s| s.layer_index == layer_index)
        .expect("layer has params");
    let p_total = model.param_count();
    let mut trace = 0.0;
    for k in 0..span.weight_len {
        let mut e = vec![0.0; p_total];
        e[span.weight_offset + k] = 1.0;
        let he = engine.hvp_weights(&e).unwrap();
        trace += he[span.weight_offset + k];
    }
    trace
}

/// Smallest distance of any relu input to its kink and of any pool window to
/// an argmax switch. Finite differences are only valid when perturbations
/// cannot cross one of these (the backward pass defines relu'(0) = 0 and a
/// deterministic pool tie-break, where difference quotients disagree).
pub fn kink_margin(model: &Model, batch: &Batch) -> f64 {
    use cwhawq_core::engine::forward_layers;
    use cwhawq_core::model::LayerKind;
    let (acts, _) = forward_layers(model, &batch.inputs).unwrap();
    let mut margin = f64::INFINITY;
    let shapes = model.infer_shapes().unwrap();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Relu => {
                for &v in acts[i].data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerKind::MaxPool2x2 => {
                let in_shape = &shapes[i];
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let n = acts[i].shape()[0];
                let xd = acts[i].data();
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * h * w;
                        for bi in 0..h / 2 {
                            for bj in 0..w / 2 {
                                let mut vals = [
                                    xd[off + 2 * bi * w + 2 * bj],
                                    xd[off + 2 * bi * w + 2 * bj + 1],
                                    xd[off + (2 * bi + 1) * w + 2 * bj],
                                    xd[off + (2 * bi + 1) * w + 2 * bj + 1],
                                ];
                                vals.sort_by(f64::total_cmp);
                                // ties among post-relu zeros are flat on both
                                // sides (dead cells); only two live cells can
                                // produce an argmax switch under perturbation
                                if vals[2] > 0.0 {
                                    margin = margin.min(vals[3] - vals[2]);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Random small architecture (dense stacks, sometimes a conv prefix) with at
/// most ~2000 parameters, plus a compatible random batch whose activations
/// sit safely away from relu/pool kinks.
pub fn random_model_and_batch(seed: u64) -> (Model, Batch) {
    let mut rng = substream(seed, "random-model", &[]);
    let classes = 2 + (rng.random::<u32>() % 4) as usize;
    let use_conv = rng.random::<bool>();
    let mut model = if use_conv {
        let side = 6 + 2 * (rng.random::<u32>() % 2) as usize; // 6 or 8
        let c1 = 1 + (rng.random::<u32>() % 3) as usize;
        let pooled = side / 2;
        let flat = c1 * pooled * pooled;
        let hidden = 4 + (rng.random::<u32>() % 8) as usize;
        ModelBuilder::new(vec![1, side, side])
            .conv2d(1, c1, 3, 3, &mut rng)
            .relu()
            .maxpool()
            .flatten()
            .dense(flat, hidden, &mut rng)
            .relu()
            .dense(hidden, classes, &mut rng)
            .softmax_ce(classes)
            .unwrap()
    } else {
        let d_in = 3 + (rng.random::<u32>() % 8) as usize;
        let h1 = 4 + (rng.random::<u32>() % 12) as usize;
        let h2 = 3 + (rng.random::<u32>() % 8) as usize;
        ModelBuilder::new(vec![d_in])
            .dense(d_in, h1, &mut rng)
            .relu()
            .dense(h1, h2, &mut rng)
            .relu()
            .dense(h2, classes, &mut rng)
            .softmax_ce(classes)
            .unwrap()
    };
    assert!(model.param_count() <= 2000, "model too large: {}", model.param_count());

    // nonzero biases keep freshly initialized relu inputs off the exact kink
    for l in model.layers.iter_mut() {
        if let Some(b) = &mut l.bias {
            for v in b.data_mut() {
                *v = rng.random::<f64>() * 0.4 - 0.2;
            }
        }
    }

    let n = 3 + (rng.random::<u32>() % 6) as usize;
    let per: usize = model.input_shape.iter().product();
    for attempt in 0..64u64 {
        let mut brng = substream(seed, "random-batch", &[attempt]);
        let inputs: Vec<f64> = (0..n * per).map(|_| brng.random::<f64>() * 2.0 - 1.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| brng.random_range(0..classes)).collect();
        let shape: Vec<usize> = std::iter::once(n).chain(model.input_shape.iter().copied()).collect();
        let batch = Batch::new(Tensor::new(shape, inputs).unwrap(), labels).unwrap();
        if kink_margin(&model, &batch) > 2e-3 {
            return (model, batch);
        }
    }
    panic!("no kink-safe batch found for seed {seed}");
}

/// Per-coordinate relative agreement with an absolute floor tied to the
/// gradient scale (pure relative error is meaningless at zero coordinates).
pub fn per_coordinate_close(a: &[f64], b: &[f64], rel: f64, scale_floor: f64) -> std::result::Result<(), String> {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = rel * x.abs().max(y.abs()) + scale_floor * scale;
        if (x - y).abs() > tol {
            return Err(format!(
                "coordinate {i}: {x} vs {y} (diff {}, tol {tol})",
                (x - y).abs()
            ));
        }
    }
    Ok(())
}

/// Relative L2 distance.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
