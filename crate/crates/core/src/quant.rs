//! Simulated ("fake") quantization: symmetric uniform weight grids, SAWB-style
//! 2-bit clipping, PACT activation clipping with a trainable threshold, and
//! per-channel policy application. All quantizers operate on f64 carriers and
//! keep gradients flowable via straight-through rules.

use crate::alloc::QuantPolicy;
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Allowed bit widths for any channel.
pub const BIT_MIN: u8 = 2;
pub const BIT_MAX: u8 = 8;

/// SAWB clip coefficients: alpha* = c1 * sqrt(E[w^2]) + c2 * E[|w|].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SawbCoefficients {
    pub c1: f64,
    pub c2: f64,
    /// Calibration provenance.
    pub families: Vec<String>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Per-channel weight quantization state attached to a dense/conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuant {
    /// Bit width per output channel.
    pub bits: Vec<u8>,
    /// Clip coefficients for 2-bit channels.
    pub sawb: SawbCoefficients,
    /// Channels where the SAWB clip came out non-positive at application time
    /// and the max-abs fallback was used.
    pub sawb_fallback: Vec<usize>,
}

/// PACT activation quantization state attached to a relu layer.
/// One (bits, alpha) pair per activation channel (conv feature map, or the
/// whole layer for dense activations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PactQuant {
    pub bits: Vec<u8>,
    pub alphas: Vec<f64>,
}

/// Symmetric uniform weight quantizer for 3..=8 bits: 2^bits - 1 levels on
/// [-alpha, alpha], clip then round to nearest, ties away from zero.
pub fn quantize_weights_uniform(w: &[f64], bits: u8, alpha: f64) -> Result<Vec<f64>> {
    if !(3..=BIT_MAX).contains(&bits) {
        return Err(Error::Invalid(format!(
            "uniform weight quantizer needs bits in 3..=8, got {bits}"
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Invalid(format!("clip alpha must be positive, got {alpha}")));
    }
    let levels = (1u32 << bits) - 1; // odd count, includes 0 and ±alpha
    let step = 2.0 * alpha / (levels - 1) as f64;
    Ok(w.iter()
        .map(|&x| {
            let c = x.clamp(-alpha, alpha);
            // f64::round ties away from zero; + 0.0 canonicalizes -0.0
            (c / step).round() * step + 0.0
        })
        .collect())
}

/// 4-level SAWB grid {-a, -a/3, a/3, a}; midpoints at 0 and ±2a/3.
fn sawb_round(x: f64, alpha: f64) -> f64 {
    let t = 2.0 * alpha / 3.0;
    let mag = if x.abs() >= t { alpha } else { alpha / 3.0 };
    if x >= 0.0 {
        mag
    } else {
        -mag
    }
}

fn mean_abs(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
}

fn rms(w: &[f64]) -> f64 {
    (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt()
}

/// MSE of the 4-level quantizer at clip `alpha`.
pub fn sawb_mse(w: &[f64], alpha: f64) -> f64 {
    w.iter()
        .map(|&x| {
            let q = sawb_round(x.clamp(-alpha, alpha), alpha);
            (x - q) * (x - q)
        })
        .sum::<f64>()
        / w.len() as f64
}

/// Grid search for the MSE-optimal 4-level clip of one tensor.
pub fn sawb_grid_search(w: &[f64]) -> f64 {
    let scale = rms(w);
    if scale == 0.0 {
        return 0.0;
    }
    let mut best = (f64::INFINITY, scale);
    for i in 1..=600 {
        let alpha = scale * 3.0 * i as f64 / 600.0;
        let mse = sawb_mse(w, alpha);
        if mse < best.0 {
            best = (mse, alpha);
        }
    }
    best.1
}

/// Fit (c1, c2) of alpha* = c1·rms + c2·mean|w| by least squares against
/// grid-search optima over sample tensors from several distribution families.
///
/// Degenerate samples (zero variance) are rejected from the fit.
pub fn sawb_calibrate(samples: &[(String, Vec<f64>)], seed: u64) -> Result<SawbCoefficients> {
    let mut families: Vec<String> = samples.iter().map(|(f, _)| f.clone()).collect();
    families.sort();
    families.dedup();

    let usable: Vec<&Vec<f64>> = samples
        .iter()
        .filter(|(_, w)| rms(w) > 0.0 && w.iter().any(|&x| x != w[0]))
        .map(|(_, w)| w)
        .collect();
    if usable.len() < 2 {
        return Err(Error::Invalid(format!(
            "SAWB fit underdetermined: {} usable samples",
            usable.len()
        )));
    }

    // Normal equations for 2 regressors.
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for w in &usable {
        let x1 = rms(w);
        let x2 = mean_abs(w);
        let y = sawb_grid_search(w);
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        t1 += x1 * y;
        t2 += x2 * y;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-12 * s11.max(s22).max(1e-300) {
        return Err(Error::Numerical(
            "SAWB normal equations are singular; need >= 2 distinct shapes".into(),
        ));
    }
    let c1 = (t1 * s22 - t2 * s12) / det;
    let c2 = (s11 * t2 - s12 * t1) / det;
    Ok(SawbCoefficients {
        c1,
        c2,
        families,
        sample_count: usable.len(),
        seed,
    })
}

/// SAWB clip for one channel slice. Returns (alpha, used_fallback).
pub fn sawb_alpha(w: &[f64], coeffs: &SawbCoefficients) -> (f64, bool) {
    let a = coeffs.c1 * rms(w) + coeffs.c2 * mean_abs(w);
    if a > 0.0 {
        (a, false)
    } else {
        let m = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        (m, true)
    }
}

/// 2-bit SAWB weight quantizer: clip to ±alpha*, round to {-a, -a/3, a/3, a}.
pub fn quantize_weights_sawb2(w: &[f64], coeffs: &SawbCoefficients) -> (Vec<f64>, bool) {
    let (alpha, fallback) = sawb_alpha(w, coeffs);
    if alpha <= 0.0 {
        // all-zero channel: quantized output is identically zero magnitude
        return (vec![0.0; w.len()], fallback);
    }
    (
        w.iter()
            .map(|&x| sawb_round(x.clamp(-alpha, alpha), alpha))
            .collect(),
        fallback,
    )
}

/// Quantize one weight channel slice according to its assigned bit width.
/// Bits >= 3 use the per-channel max-abs clip; bits == 2 uses SAWB.
pub fn quantize_channel(w: &[f64], bits: u8, coeffs: &SawbCoefficients) -> Vec<f64> {
    if bits == 2 {
        quantize_weights_sawb2(w, coeffs).0
    } else {
        let alpha = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if alpha == 0.0 {
            return w.to_vec(); // all-zero channel is its own fixed point
        }
        quantize_weights_uniform(w, bits, alpha).expect("bits/alpha validated")
    }
}

/// PACT forward: clip to [0, alpha], then 2^bits uniform levels on [0, alpha].
/// Inputs must be post-relu (non-negative up to a tiny tolerance).
pub fn pact_quantize(a: &[f64], alpha: f64, bits: u8) -> Result<Vec<f64>> {
    if alpha <= 0.0 {
        return Err(Error::Invalid(format!("PACT alpha must be positive, got {alpha}")));
    }
    if !(BIT_MIN..=BIT_MAX).contains(&bits) {
        return Err(Error::Invalid(format!("PACT bits must be in 2..=8, got {bits}")));
    }
    if let Some(bad) = a.iter().find(|&&x| x < -1e-12) {
        return Err(Error::Invalid(format!(
            "PACT input must be post-relu non-negative, got {bad}"
        )));
    }
    let levels = (1u32 << bits) - 1;
    let step = alpha / levels as f64;
    Ok(a.iter()
        .map(|&x| {
            let c = x.clamp(0.0, alpha);
            (c / step).round() * step + 0.0
        })
        .collect())
}

/// PACT straight-through derivative wrt the input: 1 on (0, alpha), else 0.
#[inline]
pub fn pact_pass(x: f64, alpha: f64) -> f64 {
    if x > 0.0 && x < alpha {
        1.0
    } else {
        0.0
    }
}

/// PACT derivative wrt alpha: 1 where the input saturates (x >= alpha).
#[inline]
pub fn pact_dalpha(x: f64, alpha: f64) -> f64 {
    if x >= alpha {
        1.0
    } else {
        0.0
    }
}

/// Wrap each weight channel of `model` with its assigned quantizer, or attach
/// PACT state to relu layers for an activation policy. The other target is
/// left untouched. Forward passes see quantized values; gradients follow the
/// straight-through (weights) / PACT (activations) rules.
///
/// `pact_alphas`, required for activation policies, holds the calibrated
/// initial clip per relu layer (see [`calibrate_pact_alphas`]).
pub fn apply_policy(
    model: &Model,
    policy: &QuantPolicy,
    coeffs: &SawbCoefficients,
    pact_alphas: Option<&[(String, Vec<f64>)]>,
) -> Result<Model> {
    let mut out = model.clone();
    match policy.target {
        crate::alloc::PolicyTarget::Weights => {
            let mut any = false;
            for layer in out.layers.iter_mut() {
                if !layer.kind.has_params() {
                    continue;
                }
                any = true;
                let nch = layer.out_channels();
                let mut bits = Vec::with_capacity(nch);
                for c in 0..nch {
                    let b = policy.bits_for(&layer.id, c).ok_or_else(|| {
                        Error::Invalid(format!(
                            "policy missing assignment for weight channel {}:{c}",
                            layer.id
                        ))
                    })?;
                    bits.push(b);
                }
                // record application-time fallback channels for the report
                let mut fallback = Vec::new();
                let w = layer.weight.as_ref().expect("weight-bearing layer");
                let per = layer.channel_elements();
                for (c, &b) in bits.iter().enumerate() {
                    if b == 2 {
                        let slice = &w.data()[c * per..(c + 1) * per];
                        if sawb_alpha(slice, coeffs).1 {
                            fallback.push(c);
                        }
                    }
                }
                layer.weight_quant = Some(WeightQuant {
                    bits,
                    sawb: coeffs.clone(),
                    sawb_fallback: fallback,
                });
            }
            if !any {
                return Err(Error::Invalid(
                    "model has no weight-bearing layers to quantize".into(),
                ));
            }
        }
        crate::alloc::PolicyTarget::Activations => {
            let alphas = pact_alphas.ok_or_else(|| {
                Error::Invalid("activation policy application requires calibrated PACT alphas".into())
            })?;
            let act_channels = activation_channels(&out)?;
            if act_channels.is_empty() {
                return Err(Error::Invalid(
                    "model has no relu activations to quantize".into(),
                ));
            }
            for (layer_id, nch) in act_channels {
                let li = out.layer_index(&layer_id).expect("listed layer exists");
                let alpha = alphas
                    .iter()
                    .find(|(id, _)| *id == layer_id)
                    .map(|(_, a)| a.clone())
                    .ok_or_else(|| {
                        Error::Invalid(format!("no calibrated PACT alpha for layer {layer_id}"))
                    })?;
                if alpha.len() != nch {
                    return Err(Error::shape(
                        format!("PACT alphas for {layer_id}"),
                        nch,
                        alpha.len(),
                    ));
                }
                let mut bits = Vec::with_capacity(nch);
                for c in 0..nch {
                    let b = policy.bits_for(&layer_id, c).ok_or_else(|| {
                        Error::Invalid(format!(
                            "policy missing assignment for activation channel {layer_id}:{c}"
                        ))
                    })?;
                    bits.push(b);
                }
                out.layers[li].act_quant = Some(PactQuant { bits, alphas: alpha });
            }
        }
    }
    Ok(out)
}

/// Relu layers of the model with their activation channel counts:
/// feature-map channels for conv-shaped activations, one channel otherwise.
pub fn activation_channels(model: &Model) -> Result<Vec<(String, usize)>> {
    let shapes = model.infer_shapes()?;
    Ok(model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Relu))
        .map(|(i, l)| {
            let shape = &shapes[i + 1];
            let nch = if shape.len() == 3 { shape[0] } else { 1 };
            (l.id.clone(), nch)
        })
        .collect())
}

/// Per-channel element counts of relu activations for one probe batch of
/// `batch_size` samples: batch × spatial extent per feature-map channel.
pub fn activation_channel_elements(model: &Model, batch_size: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let shapes = model.infer_shapes()?;
    Ok(model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Relu))
        .map(|(i, l)| {
            let shape = &shapes[i + 1];
            let counts = if shape.len() == 3 {
                vec![batch_size * shape[1] * shape[2]; shape[0]]
            } else {
                vec![batch_size * shape.iter().product::<usize>()]
            };
            (l.id.clone(), counts)
        })
        .collect())
}

/// One calibration pass: the 99.9th percentile (nearest rank) of each
/// activation channel's post-relu values over `inputs`, floored at 1e-3.
pub fn calibrate_pact_alphas(
    model: &Model,
    inputs: &Tensor,
) -> Result<Vec<(String, Vec<f64>)>> {
    let cache = crate::engine::forward_activations(model, inputs)?;
    let shapes = model.infer_shapes()?;
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Relu) {
            continue;
        }
        let act = &cache[i + 1];
        let shape = &shapes[i + 1];
        let n = act.shape()[0];
        let (nch, per) = if shape.len() == 3 {
            (shape[0], shape[1] * shape[2])
        } else {
            (1, shape.iter().product())
        };
        let mut alphas = Vec::with_capacity(nch);
        for c in 0..nch {
            let mut vals = Vec::with_capacity(n * per);
            for s in 0..n {
                let base = s * nch * per + c * per;
                vals.extend_from_slice(&act.data()[base..base + per]);
            }
            vals.sort_by(f64::total_cmp);
            let rank = ((vals.len() as f64 - 1.0) * 0.999).floor() as usize;
            alphas.push(vals[rank].max(1e-3));
        }
        out.push((layer.id.clone(), alphas));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = substream(seed, "quant-test", &[]);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    #[test]
    fn uniform_grid_3bit() {
        // bits = 3, alpha = 1 -> levels {-1, -2/3, -1/3, 0, 1/3, 2/3, 1}
        let q = quantize_weights_uniform(&[0.4, -0.4, 0.95, 0.0, 5.0], 3, 1.0).unwrap();
        let third = 1.0 / 3.0;
        assert!((q[0] - third).abs() < 1e-15);
        assert!((q[1] + third).abs() < 1e-15);
        assert!((q[2] - 1.0).abs() < 1e-15);
        assert_eq!(q[3], 0.0);
        assert!((q[4] - 1.0).abs() < 1e-15, "clipped to alpha");
    }

    #[test]
    fn uniform_rejects_bad_args() {
        assert!(quantize_weights_uniform(&[0.0], 2, 1.0).is_err());
        assert!(quantize_weights_uniform(&[0.0], 9, 1.0).is_err());
        assert!(quantize_weights_uniform(&[0.0], 4, 0.0).is_err());
        assert!(quantize_weights_uniform(&[0.0], 4, -1.0).is_err());
    }

    #[test]
    fn uniform_idempotent_and_monotone() {
        let w = gaussian(4096, 9, 0.7);
        let alpha = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for bits in 3..=8 {
            let q1 = quantize_weights_uniform(&w, bits, alpha).unwrap();
            let q2 = quantize_weights_uniform(&q1, bits, alpha).unwrap();
            assert_eq!(q1, q2, "idempotence at {bits} bits");
            // monotone in the input
            let mut pairs: Vec<(f64, f64)> = w.iter().copied().zip(q1.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for win in pairs.windows(2) {
                assert!(win[1].1 >= win[0].1);
            }
            // codomain cardinality
            let mut lv: Vec<u64> = q1.iter().map(|v| v.to_bits()).collect();
            lv.sort_unstable();
            lv.dedup();
            assert!(lv.len() <= (1usize << bits) - 1);
        }
    }

    #[test]
    fn uniform_mse_matches_bruteforce() {
        // independent recomputation: nearest level by explicit scan
        let w = gaussian(2000, 0, 1.0);
        let alpha = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bits = 4;
        let q = quantize_weights_uniform(&w, bits, alpha).unwrap();
        let mse: f64 = w.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w.len() as f64;

        let levels: Vec<f64> = (0..(1 << bits) - 1)
            .map(|i| -alpha + 2.0 * alpha * i as f64 / ((1 << bits) - 2) as f64)
            .collect();
        let brute: f64 = w
            .iter()
            .map(|&x| {
                let c = x.clamp(-alpha, alpha);
                let nearest = levels
                    .iter()
                    .copied()
                    .min_by(|a, b| {
                        let (da, db) = ((c - a).abs(), (c - b).abs());
                        da.total_cmp(&db).then_with(|| b.abs().total_cmp(&a.abs()))
                    })
                    .unwrap();
                (x - nearest) * (x - nearest)
            })
            .sum::<f64>()
            / w.len() as f64;
        assert!((mse - brute).abs() <= 1e-12 * brute.max(1e-30), "{mse} vs {brute}");
    }

    fn calib_samples(seed: u64, per_family: usize) -> Vec<(String, Vec<f64>)> {
        let mut rng = substream(seed, "sawb-calib", &[]);
        let mut out = Vec::new();
        for i in 0..per_family {
            let scale = 0.5 + rng.random::<f64>() * 2.0;
            let g: Vec<f64> = (0..800)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            out.push(("gaussian".to_string(), g));
            let l: Vec<f64> = (0..800)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                })
                .collect();
            out.push(("laplace".to_string(), l));
            let u: Vec<f64> = (0..800)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect();
            out.push(("uniform".to_string(), u));
            let _ = i;
        }
        out
    }

    #[test]
    fn sawb_scale_equivariance() {
        let samples = calib_samples(3, 40);
        let a = sawb_calibrate(&samples, 3).unwrap();
        let scaled: Vec<(String, Vec<f64>)> = samples
            .iter()
            .map(|(f, w)| (f.clone(), w.iter().map(|v| v * 7.5).collect()))
            .collect();
        let b = sawb_calibrate(&scaled, 3).unwrap();
        assert!((a.c1 - b.c1).abs() <= 1e-9 * a.c1.abs().max(1.0), "{} vs {}", a.c1, b.c1);
        assert!((a.c2 - b.c2).abs() <= 1e-9 * a.c2.abs().max(1.0));
    }

    #[test]
    fn sawb_prediction_close_to_grid_search_on_gaussians() {
        let samples = calib_samples(5, 40);
        let coeffs = sawb_calibrate(&samples, 5).unwrap();
        for s in 0..10 {
            let w = gaussian(3000, 100 + s, 1.3);
            let (pred, fb) = sawb_alpha(&w, &coeffs);
            assert!(!fb);
            let opt = sawb_grid_search(&w);
            assert!(
                (pred - opt).abs() <= 0.05 * opt,
                "predicted {pred} vs grid {opt}"
            );
        }
    }

    #[test]
    fn sawb_rejects_degenerate_and_small_sets() {
        let constant = vec![("gaussian".to_string(), vec![0.25; 64])];
        assert!(sawb_calibrate(&constant, 0).is_err());
        let one = vec![("gaussian".to_string(), gaussian(64, 1, 1.0))];
        assert!(sawb_calibrate(&one, 0).is_err());
    }

    #[test]
    fn sawb2_codomain_and_idempotence() {
        let samples = calib_samples(7, 40);
        let coeffs = sawb_calibrate(&samples, 7).unwrap();
        let w = gaussian(4096, 11, 0.9);
        let (q, fb) = quantize_weights_sawb2(&w, &coeffs);
        assert!(!fb);
        let mut lv: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
        lv.sort_unstable();
        lv.dedup();
        assert!(lv.len() <= 4, "at most 4 distinct values, got {}", lv.len());
        let (q2, _) = quantize_weights_sawb2(&q, &coeffs);
        // the grid of q is not exactly the grid of q2 (stats change); check the
        // documented fixed-point property instead: re-quantizing with the same
        // alpha reproduces q exactly
        let (alpha, _) = sawb_alpha(&w, &coeffs);
        let refixed: Vec<f64> = q.iter().map(|&x| sawb_round(x.clamp(-alpha, alpha), alpha)).collect();
        assert_eq!(q, refixed);
        let _ = q2;
    }

    #[test]
    fn sawb2_mse_within_5pct_of_grid_optimum() {
        let samples = calib_samples(13, 40);
        let coeffs = sawb_calibrate(&samples, 13).unwrap();
        let held_out = gaussian(4000, 77, 2.1);
        let (alpha, _) = sawb_alpha(&held_out, &coeffs);
        let mse = sawb_mse(&held_out, alpha);
        let opt = sawb_mse(&held_out, sawb_grid_search(&held_out));
        assert!(mse <= 1.05 * opt, "mse {mse} vs optimal {opt}");
    }

    #[test]
    fn pact_grid_and_saturation() {
        // bits = 2, alpha = 3 -> levels {0, 1, 2, 3}
        let q = pact_quantize(&[1.4, 0.0, 6.0, 2.6], 3.0, 2).unwrap();
        assert_eq!(q, vec![1.0, 0.0, 3.0, 3.0]);
        // saturation branch derivatives
        assert_eq!(pact_pass(6.0, 3.0), 0.0);
        assert_eq!(pact_dalpha(6.0, 3.0), 1.0);
        assert_eq!(pact_pass(1.4, 3.0), 1.0);
        assert_eq!(pact_dalpha(1.4, 3.0), 0.0);
    }

    #[test]
    fn pact_rejects_negative_inputs() {
        assert!(pact_quantize(&[-0.5], 1.0, 4).is_err());
        // tiny negative noise inside tolerance is accepted and clipped
        assert_eq!(pact_quantize(&[-1e-13], 1.0, 4).unwrap(), vec![0.0]);
    }

    #[test]
    fn pact_idempotent_monotone_codomain() {
        let mut rng = substream(21, "pact", &[]);
        let a: Vec<f64> = (0..4096).map(|_| rng.random::<f64>() * 2.0).collect();
        for bits in 2..=8 {
            let q1 = pact_quantize(&a, 1.5, bits).unwrap();
            let q2 = pact_quantize(&q1, 1.5, bits).unwrap();
            assert_eq!(q1, q2);
            let mut lv: Vec<u64> = q1.iter().map(|v| v.to_bits()).collect();
            lv.sort_unstable();
            lv.dedup();
            assert!(lv.len() <= 1 << bits);
        }
    }
}
