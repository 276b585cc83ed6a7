//! Cross-module behavior: policy application on real models, reward
//! evaluation contracts, PACT fine-tuning, and trace convergence.

mod common;

use common::exact_layer_trace;
use cwhawq_core::alloc::{ratios_to_assignment, sort_channels, uniform_policy};
use cwhawq_core::data::gen_synthetic;
use cwhawq_core::ddpg::reward_of;
use cwhawq_core::engine::{forward_loss, grad_minibatch, Batch, HvpEngine};
use cwhawq_core::model::{mlp_s, LayerKind, LossHead, Model, ModelBuilder};
use cwhawq_core::pipeline::calibrate_sawb;
use cwhawq_core::quant::{apply_policy, calibrate_pact_alphas, PactQuant};
use cwhawq_core::rng::substream;
use cwhawq_core::tensor::Tensor;
use cwhawq_core::trace::{
    estimate_traces, trace_convergence, Granularity, ProbeConfig, TraceTarget,
};
use cwhawq_core::train::{evaluate, sgd_step, train_epoch, train_epochs};

fn trained_mlp() -> (Model, cwhawq_core::data::Dataset, f64) {
    let data = gen_synthetic(21, 4, 400, 16, 6.0).unwrap();
    let model = mlp_s(16, 4, 9);
    let (m, top1) = train_epochs(&model, &data, 0.1, 5, 32, 3).unwrap();
    (m, data, top1)
}

#[test]
fn eight_bit_policy_is_near_lossless() {
    let (model, data, float_top1) = trained_mlp();
    assert!(float_top1 >= 0.95, "baseline too weak: {float_top1}");
    let coeffs = calibrate_sawb(3).unwrap();

    let probe_cfg = ProbeConfig {
        probes: 4,
        batch_size: 16,
        seed: 2,
    };
    let report = estimate_traces(&model, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
    let sorted = sort_channels(&report).unwrap();
    let policy = uniform_policy(&sorted, 8).unwrap();
    let quantized = apply_policy(&model, &policy, &coeffs, None).unwrap();
    let q_top1 = evaluate(&quantized, &data).unwrap();
    assert!(
        (float_top1 - q_top1).abs() <= 0.005 + 1e-12,
        "8-bit drop too large: {float_top1} -> {q_top1}"
    );

    // reward_of on the same policy sits within 0.5% of the float accuracy too
    let r = reward_of(&policy, &model, &data, &coeffs, None, 0.01, 32, 7).unwrap();
    assert!((0.0..=1.0).contains(&r));
    assert!((float_top1 - r).abs() <= 0.005 + 1e-12, "reward {r} vs float {float_top1}");
    let r2 = reward_of(&policy, &model, &data, &coeffs, None, 0.01, 32, 7).unwrap();
    assert_eq!(r.to_bits(), r2.to_bits(), "reward not deterministic");
}

#[test]
fn two_bit_channel_has_four_level_weights() {
    let (model, data, _) = trained_mlp();
    let coeffs = calibrate_sawb(3).unwrap();
    let probe_cfg = ProbeConfig {
        probes: 4,
        batch_size: 16,
        seed: 2,
    };
    let report = estimate_traces(&model, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
    let sorted = sort_channels(&report).unwrap();
    // smallest possible 2-bit segment: exactly the lowest-trace channel
    let frac = sorted.entries.last().unwrap().elements as f64 / sorted.total_elements as f64;
    let policy = ratios_to_assignment(&sorted, &[frac, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let two_bit: Vec<_> = policy
        .assignment
        .iter()
        .filter(|(_, b)| *b == 2)
        .map(|(k, _)| k.clone())
        .collect();
    assert!(!two_bit.is_empty());
    let quantized = apply_policy(&model, &policy, &coeffs, None).unwrap();
    let x = data.train_batch_cycled(0, 8);
    let (_, cache) = forward_loss(&quantized, &x).unwrap();
    let _ = cache; // the forward ran on quantized weights; inspect them directly
    for key in &two_bit {
        let li = quantized.layer_index(&key.layer).unwrap();
        let layer = &quantized.layers[li];
        let per = layer.channel_elements();
        let w = layer.weight.as_ref().unwrap();
        let slice = &w.data()[key.channel * per..(key.channel + 1) * per];
        let q = cwhawq_core::quant::quantize_channel(slice, 2, &coeffs);
        let mut lv: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
        lv.sort_unstable();
        lv.dedup();
        assert!(lv.len() <= 4, "channel {}:{} has {} levels", key.layer, key.channel, lv.len());
    }
}

#[test]
fn apply_policy_rejects_incomplete_and_empty() {
    let (model, data, _) = trained_mlp();
    let coeffs = calibrate_sawb(3).unwrap();
    let probe_cfg = ProbeConfig {
        probes: 2,
        batch_size: 16,
        seed: 2,
    };
    let report = estimate_traces(&model, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
    let sorted = sort_channels(&report).unwrap();
    let mut policy = uniform_policy(&sorted, 6).unwrap();
    policy.assignment.pop();
    let err = apply_policy(&model, &policy, &coeffs, None).unwrap_err();
    assert!(err.to_string().contains("missing assignment"), "{err}");

    // a model with no weight-bearing layers cannot take a weight policy
    let empty = Model::new(
        vec![],
        LossHead::SoftmaxCrossEntropy { classes: 4 },
        vec![4],
    )
    .unwrap();
    let full = uniform_policy(&sorted, 8).unwrap();
    assert!(apply_policy(&empty, &full, &coeffs, None).is_err());
}

#[test]
fn pact_finetuning_decreases_loss_over_50_steps() {
    // single dense+relu layer with trainable clips on a fixed batch
    let mut rng = substream(5, "init", &[]);
    let mut model = ModelBuilder::new(vec![8])
        .dense(8, 6, &mut rng)
        .relu()
        .dense(6, 3, &mut rng)
        .softmax_ce(3)
        .unwrap();
    let relu_idx = model
        .layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Relu))
        .unwrap();
    model.layers[relu_idx].act_quant = Some(PactQuant {
        bits: vec![3],
        alphas: vec![0.35], // deliberately tight: saturation pressure on alpha
    });
    let mut drng = substream(6, "data", &[]);
    let inputs: Vec<f64> = (0..24 * 8).map(|_| rand::Rng::random::<f64>(&mut drng) * 2.0 - 1.0).collect();
    let labels: Vec<usize> = (0..24).map(|_| rand::Rng::random_range(&mut drng, 0..3)).collect();
    let batch = Batch::new(Tensor::new(vec![24, 8], inputs).unwrap(), labels).unwrap();

    let (l0, _) = forward_loss(&model, &batch).unwrap();
    let alpha0 = model.layers[relu_idx].act_quant.as_ref().unwrap().alphas[0];
    for _ in 0..50 {
        let (_, grad) = grad_minibatch(&model, &batch).unwrap();
        sgd_step(&mut model, &grad, 0.05);
    }
    let (l1, _) = forward_loss(&model, &batch).unwrap();
    let alpha1 = model.layers[relu_idx].act_quant.as_ref().unwrap().alphas[0];
    assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    assert_ne!(alpha0, alpha1, "alpha did not train");
}

#[test]
fn activation_policy_roundtrip_on_mlp() {
    let (model, data, float_top1) = trained_mlp();
    let coeffs = calibrate_sawb(3).unwrap();
    let probe_cfg = ProbeConfig {
        probes: 4,
        batch_size: 16,
        seed: 4,
    };
    let report =
        estimate_traces(&model, &data, TraceTarget::Activations, Granularity::Channel, &probe_cfg).unwrap();
    let sorted = sort_channels(&report).unwrap();
    let policy = uniform_policy(&sorted, 8).unwrap();
    let calib = data.train_batch_cycled(0, 64);
    let alphas = calibrate_pact_alphas(&model, &calib.inputs).unwrap();
    let quantized = apply_policy(&model, &policy, &coeffs, Some(&alphas)).unwrap();
    let q_top1 = evaluate(&quantized, &data).unwrap();
    assert!(
        (float_top1 - q_top1).abs() <= 0.005 + 1e-12,
        "8-bit activation drop: {float_top1} -> {q_top1}"
    );
    // applying an activation policy without calibrated clips is an error
    assert!(apply_policy(&model, &policy, &coeffs, None).is_err());
}

#[test]
fn trace_convergence_error_shrinks_for_most_seeds() {
    let data = gen_synthetic(11, 4, 200, 16, 6.0).unwrap();
    let model = mlp_s(16, 4, 7);
    let batch = data.train_batch_cycled(0, 16);
    let engine = HvpEngine::new(&model, &batch).unwrap();
    let li = model.layer_index("dense1").unwrap();
    let exact = exact_layer_trace(&engine, &model, li);

    let mut good = 0;
    let seeds = 20u64;
    for seed in 0..seeds {
        let cfg = ProbeConfig {
            probes: 1000,
            batch_size: 16,
            seed,
        };
        let est = trace_convergence(&model, &data, TraceTarget::Weights, "dense1", &cfg, &[10, 100, 1000]).unwrap();
        let errs: Vec<f64> = est.iter().map(|e| (e - exact).abs()).collect();
        let mut non_increasing = 0;
        if errs[1] <= errs[0] {
            non_increasing += 1;
        }
        if errs[2] <= errs[1] {
            non_increasing += 1;
        }
        if errs[2] <= errs[0] {
            non_increasing += 1;
        }
        if non_increasing >= 2 {
            good += 1;
        }
    }
    assert!(
        good as f64 >= 0.9 * seeds as f64,
        "error shrank in only {good}/{seeds} seeds"
    );
}

#[test]
fn gradient_flatten_roundtrip_is_exact() {
    let (model, data, _) = trained_mlp();
    let batch = data.train_batch_cycled(0, 8);
    let (_, cache) = forward_loss(&model, &batch).unwrap();
    let grad = cwhawq_core::engine::backward(&model, &cache).unwrap();
    let flat = grad.flatten();
    let rebuilt = cwhawq_core::engine::Gradient::from_flat(&model, &flat).unwrap();
    assert_eq!(rebuilt.flatten(), flat);
}

#[test]
fn generous_budget_two_phase_application_is_near_lossless() {
    // both phases applied at 8 bits through the same machinery the pipeline
    // uses, then fine-tuned once each: accuracy stays within 0.5%
    let (model, data, float_top1) = trained_mlp();
    let coeffs = calibrate_sawb(3).unwrap();
    let probe_cfg = ProbeConfig {
        probes: 4,
        batch_size: 16,
        seed: 6,
    };

    let act_report =
        estimate_traces(&model, &data, TraceTarget::Activations, Granularity::Channel, &probe_cfg).unwrap();
    let act_sorted = sort_channels(&act_report).unwrap();
    let act_policy = uniform_policy(&act_sorted, 8).unwrap();
    let calib = data.train_batch_cycled(0, 64);
    let alphas = calibrate_pact_alphas(&model, &calib.inputs).unwrap();
    let q1 = apply_policy(&model, &act_policy, &coeffs, Some(&alphas)).unwrap();
    let (m1, _) = train_epoch(&q1, &data, 0.01, 31, 32).unwrap();

    let w_report =
        estimate_traces(&m1, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
    let w_sorted = sort_channels(&w_report).unwrap();
    let w_policy = uniform_policy(&w_sorted, 8).unwrap();
    let q2 = apply_policy(&m1, &w_policy, &coeffs, None).unwrap();
    let (_, final_top1) = train_epoch(&q2, &data, 0.01, 32, 32).unwrap();

    assert!(
        final_top1 >= float_top1 - 0.005 - 1e-12,
        "two-phase 8-bit run dropped too far: {float_top1} -> {final_top1}"
    );
}
