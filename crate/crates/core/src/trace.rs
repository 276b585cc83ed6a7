//! Masked Hutchinson estimation of average Hessian traces, per layer and per
//! channel, for weights and activations.
//!
//! A probe z with independent Rademacher entries satisfies E[zᵀHz] = Tr(H);
//! masking z to a channel's index set estimates that channel's diagonal block
//! trace. Probes are shared across the channels of one layer (one z per
//! (layer, probe index), masked per channel), and every probe draws from its
//! own named substream so parallel fan-out cannot perturb results.

use crate::data::Dataset;
use crate::engine::HvpEngine;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quant::activation_channels;
use crate::rng::substream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceTarget {
    Weights,
    Activations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Channel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Probe count: m for weights, the batch/probe count N for activations.
    pub probes: usize,
    /// Samples per Hessian batch.
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub layer: String,
    pub channel: Option<usize>,
    pub raw: f64,
    pub elements: usize,
    pub average: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceReport {
    pub target: TraceTarget,
    pub granularity: Granularity,
    pub seed: u64,
    pub m: usize,
    pub batch_size: usize,
    pub entries: Vec<TraceEntry>,
}

impl TraceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("trace report parse: {e}")))
    }
}

/// Channel index set over one layer's flat weight-tensor range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layer: String,
    pub channel: usize,
    pub indices: Vec<usize>,
}

/// Masks of every weight-bearing layer; per layer they partition the flat
/// weight index range (pairwise disjoint, union complete).
pub fn weight_channel_masks(model: &Model) -> Vec<ChannelMask> {
    let mut out = Vec::new();
    for layer in &model.layers {
        if !layer.kind.has_params() {
            continue;
        }
        let per = layer.channel_elements();
        for c in 0..layer.out_channels() {
            out.push(ChannelMask {
                layer: layer.id.clone(),
                channel: c,
                indices: (c * per..(c + 1) * per).collect(),
            });
        }
    }
    out
}

fn rademacher(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Generic masked Hutchinson on an explicit H·v oracle: raw trace estimates
/// per mask, sharing one probe across all masks of a call. Used directly by
/// the closed-form curvature fixtures.
pub fn hutchinson_masked<F>(apply_h: F, dim: usize, masks: &[Vec<usize>], m: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if m == 0 {
        return Err(Error::Invalid("probe count must be >= 1".into()));
    }
    let per_probe: Vec<Vec<f64>> = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "masked-probe", &[i]);
            let z = rademacher(&mut rng, dim);
            masks
                .iter()
                .map(|mask| {
                    let mut zm = vec![0.0; dim];
                    for &ix in mask {
                        zm[ix] = z[ix];
                    }
                    let hz = apply_h(&zm);
                    mask.iter().map(|&ix| z[ix] * hz[ix]).sum()
                })
                .collect()
        })
        .collect();
    let mut sums = vec![0.0; masks.len()];
    for row in &per_probe {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut sums {
        *s /= m as f64;
    }
    Ok(sums)
}

/// Estimate average Hessian traces of `model` on a deterministic batch stream
/// drawn from `data`'s training split.
///
/// Weights: one fixed batch, probes restricted per layer (layer granularity)
/// or masked per channel with a shared per-probe z (channel granularity).
/// Activations: one fresh batch per probe index, probes over the post-relu
/// activation tensors.
pub fn estimate_traces(
    model: &Model,
    data: &Dataset,
    target: TraceTarget,
    granularity: Granularity,
    cfg: &ProbeConfig,
) -> Result<TraceReport> {
    if cfg.probes == 0 {
        return Err(Error::Invalid("probe count must be >= 1".into()));
    }
    if data.train_len() == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    for layer in &model.layers {
        if let Some(w) = &layer.weight {
            w.ensure_finite(&format!("weights of {}", layer.id))?;
        }
    }
    let entries = match target {
        TraceTarget::Weights => weight_traces(model, data, granularity, cfg)?,
        TraceTarget::Activations => activation_traces(model, data, granularity, cfg)?,
    };
    Ok(TraceReport {
        target,
        granularity,
        seed: cfg.seed,
        m: cfg.probes,
        batch_size: cfg.batch_size,
        entries,
    })
}

fn weight_traces(
    model: &Model,
    data: &Dataset,
    granularity: Granularity,
    cfg: &ProbeConfig,
) -> Result<Vec<TraceEntry>> {
    let batch = data.train_batch_cycled(0, cfg.batch_size.min(data.train_len()).max(1));
    let engine = HvpEngine::new(model, &batch)?;
    let mut entries = Vec::new();

    for (li, layer) in model.layers.iter().enumerate() {
        if !layer.kind.has_params() {
            continue;
        }
        let w_len = layer.weight.as_ref().unwrap().numel();
        let per = layer.channel_elements();
        let nch = layer.out_channels();

        match granularity {
            Granularity::Layer => {
                let forms: Vec<f64> = (0..cfg.probes as u64)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = substream(cfg.seed, "weight-probe", &[li as u64, i]);
                        let z = rademacher(&mut rng, w_len);
                        engine.weight_layer_form(li, &z)
                    })
                    .collect();
                let raw = forms.iter().sum::<f64>() / cfg.probes as f64;
                entries.push(TraceEntry {
                    layer: layer.id.clone(),
                    channel: None,
                    raw,
                    elements: w_len,
                    average: raw / w_len as f64,
                });
            }
            Granularity::Channel => {
                let forms: Vec<Vec<f64>> = (0..cfg.probes as u64)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = substream(cfg.seed, "weight-probe", &[li as u64, i]);
                        let z = rademacher(&mut rng, w_len);
                        (0..nch)
                            .map(|c| engine.weight_channel_form(li, c, &z[c * per..(c + 1) * per]))
                            .collect()
                    })
                    .collect();
                for c in 0..nch {
                    let raw: f64 = forms.iter().map(|row| row[c]).sum::<f64>() / cfg.probes as f64;
                    entries.push(TraceEntry {
                        layer: layer.id.clone(),
                        channel: Some(c),
                        raw,
                        elements: per,
                        average: raw / per as f64,
                    });
                }
            }
        }
    }
    Ok(entries)
}

fn activation_traces(
    model: &Model,
    data: &Dataset,
    granularity: Granularity,
    cfg: &ProbeConfig,
) -> Result<Vec<TraceEntry>> {
    let channels = activation_channels(model)?;
    if channels.is_empty() {
        return Err(Error::Invalid(
            "model has no relu activations to trace".into(),
        ));
    }
    let shapes = model.infer_shapes()?;
    let b = cfg.batch_size.min(data.train_len()).max(1);

    // per probe: one fresh batch, one probe per relu layer
    struct ProbeRow {
        per_layer: Vec<Vec<f64>>, // [relu ordinal][channel] quadratic forms (layer form = single entry)
    }
    let rows: Vec<Result<ProbeRow>> = (0..cfg.probes as u64)
        .into_par_iter()
        .map(|i| {
            let batch = data.train_batch_cycled(i as usize * b, b);
            let engine = HvpEngine::new(model, &batch)?;
            let mut per_layer = Vec::new();
            for (layer_id, nch) in &channels {
                let li = model.layer_index(layer_id).expect("relu layer exists");
                let numel = engine.activation_numel(li);
                let mut rng = substream(cfg.seed, "act-probe", &[li as u64, i]);
                let z = rademacher(&mut rng, numel);
                let shape = &shapes[li + 1];
                let (c_count, plane) = if shape.len() == 3 {
                    (shape[0], shape[1] * shape[2])
                } else {
                    (1, shape.iter().product())
                };
                let forms: Vec<f64> = match granularity {
                    Granularity::Layer => vec![engine.activation_form(li, &z)],
                    Granularity::Channel => (0..*nch)
                        .map(|c| {
                            let mut zm = vec![0.0; numel];
                            for s in 0..b {
                                let base = s * c_count * plane + c * plane;
                                zm[base..base + plane].copy_from_slice(&z[base..base + plane]);
                            }
                            engine.activation_form(li, &zm)
                        })
                        .collect(),
                };
                per_layer.push(forms);
            }
            Ok(ProbeRow { per_layer })
        })
        .collect();

    let mut acc: Vec<Vec<f64>> = Vec::new();
    for row in rows {
        let row = row?;
        if acc.is_empty() {
            acc = row.per_layer.clone();
        } else {
            for (a, r) in acc.iter_mut().zip(&row.per_layer) {
                for (x, y) in a.iter_mut().zip(r) {
                    *x += y;
                }
            }
        }
    }

    let mut entries = Vec::new();
    for (ord, (layer_id, nch)) in channels.iter().enumerate() {
        let li = model.layer_index(layer_id).unwrap();
        let shape = &shapes[li + 1];
        let plane = if shape.len() == 3 {
            shape[1] * shape[2]
        } else {
            shape.iter().product()
        };
        match granularity {
            Granularity::Layer => {
                let raw = acc[ord][0] / cfg.probes as f64;
                let elements = b * plane * if shape.len() == 3 { shape[0] } else { 1 };
                entries.push(TraceEntry {
                    layer: layer_id.clone(),
                    channel: None,
                    raw,
                    elements,
                    average: raw / elements as f64,
                });
            }
            Granularity::Channel => {
                for c in 0..*nch {
                    let raw = acc[ord][c] / cfg.probes as f64;
                    let elements = b * plane;
                    entries.push(TraceEntry {
                        layer: layer_id.clone(),
                        channel: Some(c),
                        raw,
                        elements,
                        average: raw / elements as f64,
                    });
                }
            }
        }
    }
    Ok(entries)
}

/// Running layer-trace estimates after each probe-count checkpoint, over one
/// shared probe stream; the last value is bit-identical to `estimate_traces`
/// at m = last checkpoint.
pub fn trace_convergence(
    model: &Model,
    data: &Dataset,
    target: TraceTarget,
    layer_id: &str,
    cfg: &ProbeConfig,
    checkpoints: &[usize],
) -> Result<Vec<f64>> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid("checkpoints must be non-empty".into()));
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints[0] == 0 {
        return Err(Error::Invalid("checkpoints must be ascending and positive".into()));
    }
    let li = model
        .layer_index(layer_id)
        .ok_or_else(|| Error::Invalid(format!("no layer '{layer_id}'")))?;
    let last = *checkpoints.last().unwrap();

    let forms: Vec<f64> = match target {
        TraceTarget::Weights => {
            let layer = &model.layers[li];
            if !layer.kind.has_params() {
                return Err(Error::Invalid(format!("layer {layer_id} has no weights")));
            }
            let w_len = layer.weight.as_ref().unwrap().numel();
            let batch = data.train_batch_cycled(0, cfg.batch_size.min(data.train_len()).max(1));
            let engine = HvpEngine::new(model, &batch)?;
            (0..last as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(cfg.seed, "weight-probe", &[li as u64, i]);
                    let z = rademacher(&mut rng, w_len);
                    engine.weight_layer_form(li, &z)
                })
                .collect()
        }
        TraceTarget::Activations => {
            let b = cfg.batch_size.min(data.train_len()).max(1);
            let results: Vec<Result<f64>> = (0..last as u64)
                .into_par_iter()
                .map(|i| {
                    let batch = data.train_batch_cycled(i as usize * b, b);
                    let engine = HvpEngine::new(model, &batch)?;
                    let numel = engine.activation_numel(li);
                    let mut rng = substream(cfg.seed, "act-probe", &[li as u64, i]);
                    let z = rademacher(&mut rng, numel);
                    Ok(engine.activation_form(li, &z))
                })
                .collect();
            results.into_iter().collect::<Result<Vec<f64>>>()?
        }
    };

    let mut out = Vec::with_capacity(checkpoints.len());
    let mut sum = 0.0;
    let mut done = 0;
    for &ck in checkpoints {
        for v in &forms[done..ck] {
            sum += v;
        }
        done = ck;
        out.push(sum / ck as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{mlp_s, ModelBuilder};
    use crate::tensor::Tensor;

    /// H = diag(1, 2, 3); masks {0} and {1, 2} -> raw traces exactly 1 and 5.
    #[test]
    fn diagonal_quadratic_masks_are_exact() {
        let h = [1.0, 2.0, 3.0];
        let apply = |v: &[f64]| -> Vec<f64> { v.iter().zip(h).map(|(x, d)| x * d).collect() };
        for m in [1, 3, 17] {
            for seed in [0u64, 9, 1234] {
                let raw = hutchinson_masked(apply, 3, &[vec![0], vec![1, 2]], m, seed).unwrap();
                assert!((raw[0] - 1.0).abs() < 1e-12, "m={m} seed={seed}: {raw:?}");
                assert!((raw[1] - 5.0).abs() < 1e-12);
                // averages: raw / element count -> 1 and 2.5
                assert!((raw[1] / 2.0 - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_partition_is_complete_and_disjoint() {
        let m = crate::model::convnet_s(10, 0);
        let masks = weight_channel_masks(&m);
        for layer in m.layers.iter().filter(|l| l.kind.has_params()) {
            let mut seen: Vec<usize> = masks
                .iter()
                .filter(|mk| mk.layer == layer.id)
                .flat_map(|mk| mk.indices.iter().copied())
                .collect();
            seen.sort_unstable();
            let want: Vec<usize> = (0..layer.weight.as_ref().unwrap().numel()).collect();
            assert_eq!(seen, want, "layer {}", layer.id);
        }
    }

    #[test]
    fn single_channel_layer_matches_layer_granularity() {
        // dense layer with a single output row: channel report == layer report
        let mut rng = substream(0, "init", &[]);
        let m = ModelBuilder::new(vec![4])
            .dense(4, 1, &mut rng)
            .softmax_ce(1)
            .unwrap();
        // softmax with a single class is degenerate; use quadratic head instead
        let mut rng = substream(0, "init", &[]);
        let m2 = ModelBuilder::new(vec![4])
            .dense(4, 1, &mut rng)
            .quadratic(Tensor::new(vec![1, 1], vec![2.0]).unwrap())
            .unwrap();
        let _ = m;
        let data = gen_synthetic(3, 2, 40, 4, 4.0).unwrap();
        let cfg = ProbeConfig {
            probes: 5,
            batch_size: 8,
            seed: 11,
        };
        let layer = estimate_traces(&m2, &data, TraceTarget::Weights, Granularity::Layer, &cfg).unwrap();
        let chan = estimate_traces(&m2, &data, TraceTarget::Weights, Granularity::Channel, &cfg).unwrap();
        assert_eq!(layer.entries.len(), 1);
        assert_eq!(chan.entries.len(), 1);
        assert_eq!(layer.entries[0].raw.to_bits(), chan.entries[0].raw.to_bits());
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let m = mlp_s(8, 3, 4);
        let data = gen_synthetic(5, 3, 60, 8, 5.0).unwrap();
        let cfg = ProbeConfig {
            probes: 3,
            batch_size: 16,
            seed: 21,
        };
        let a = estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Channel, &cfg).unwrap();
        let b = estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Channel, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let parsed = TraceReport::from_json(&a.to_json()).unwrap();
        assert_eq!(parsed.entries.len(), a.entries.len());
    }

    #[test]
    fn convergence_shares_the_probe_stream() {
        let m = mlp_s(8, 3, 4);
        let data = gen_synthetic(5, 3, 60, 8, 5.0).unwrap();
        let cfg = ProbeConfig {
            probes: 7,
            batch_size: 16,
            seed: 33,
        };
        let conv = trace_convergence(
            &m,
            &data,
            TraceTarget::Weights,
            "dense1",
            &cfg,
            &[2, 5, 7],
        )
        .unwrap();
        let report = estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Layer, &cfg).unwrap();
        let e = report.entries.iter().find(|e| e.layer == "dense1").unwrap();
        assert_eq!(conv.last().unwrap().to_bits(), e.raw.to_bits());
        assert!(trace_convergence(&m, &data, TraceTarget::Weights, "dense1", &cfg, &[]).is_err());
        assert!(trace_convergence(&m, &data, TraceTarget::Weights, "dense1", &cfg, &[5, 2]).is_err());
    }

    #[test]
    fn rejects_zero_probes_and_empty_data() {
        let m = mlp_s(8, 3, 4);
        let data = gen_synthetic(5, 3, 60, 8, 5.0).unwrap();
        let cfg = ProbeConfig {
            probes: 0,
            batch_size: 16,
            seed: 0,
        };
        assert!(estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Layer, &cfg).is_err());
    }

    #[test]
    fn activation_trace_channels_cover_relu_layers() {
        let m = mlp_s(8, 3, 4);
        let data = gen_synthetic(5, 3, 60, 8, 5.0).unwrap();
        let cfg = ProbeConfig {
            probes: 4,
            batch_size: 8,
            seed: 2,
        };
        let rep = estimate_traces(&m, &data, TraceTarget::Activations, Granularity::Channel, &cfg).unwrap();
        // MLP-S has one relu, treated as a single activation channel
        assert_eq!(rep.entries.len(), 1);
        assert_eq!(rep.entries[0].layer, "relu1");
        assert_eq!(rep.entries[0].elements, 8 * 128);
    }
}
