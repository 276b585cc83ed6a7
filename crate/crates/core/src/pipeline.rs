//! End-to-end orchestration: dataset ingestion, baseline training, the
//! two-step activation-then-weights search protocol, final quantization +
//! fine-tuning, reports, and the perturbation loss landscape.

use crate::alloc::{
    size_mb, sort_channels, QuantPolicy, SortedChannelList,
};
use crate::checkpoint;
use crate::config::{RunConfig, RunEcho};
use crate::data::{gen_synthetic, ingest_mnist, Dataset};
use crate::ddpg::{reward_of, run_search, SearchConfig, SearchResult};
use crate::engine::{forward_loss, Batch};
use crate::error::{Error, Result};
use crate::model::{build_named, Model};
use crate::quant::{apply_policy, calibrate_pact_alphas, sawb_calibrate, SawbCoefficients};
use crate::rng::{derive_seed, substream};
use crate::trace::{estimate_traces, Granularity, ProbeConfig, TraceReport, TraceTarget};
use crate::train::{evaluate, train_epoch};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BASELINE_CKPT: &str = "baseline.nnq";
pub const PHASE1_CKPT: &str = "phase1.nnq";
pub const FINAL_CKPT: &str = "final.nnq";
pub const REPORT_FILE: &str = "report.json";
pub const SAWB_FILE: &str = "sawb.json";
pub const ACT_TRACE_FILE: &str = "act_trace.json";
pub const W_TRACE_FILE: &str = "w_trace.json";
pub const ACT_POLICY_FILE: &str = "act_policy.json";
pub const W_POLICY_FILE: &str = "w_policy.json";
pub const ACT_LOG_FILE: &str = "act_search_log.jsonl";
pub const W_LOG_FILE: &str = "w_search_log.jsonl";
pub const LANDSCAPE_FILE: &str = "landscape.csv";

/// Load the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset_parts(&cfg.data, cfg.seed)
}

pub fn load_dataset_parts(data: &crate::config::DataConfig, seed: u64) -> Result<Dataset> {
    match data.dataset.as_str() {
        "synthetic" => gen_synthetic(
            derive_seed(seed, "data", &[]),
            data.classes,
            data.synth_n,
            data.synth_dim,
            data.separation,
        ),
        "mnist" => {
            let dir = data
                .mnist_dir
                .as_ref()
                .ok_or_else(|| Error::Config("dataset = mnist requires mnist_dir".into()))?;
            ingest_mnist(Path::new(dir))
        }
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    build_named(
        &cfg.model,
        &data.input_shape,
        data.classes,
        derive_seed(cfg.seed, "model-init", &[]),
    )
}

/// SAWB coefficients calibrated in-repo from seeded Gaussian/Laplace/uniform
/// weight samples.
pub fn calibrate_sawb(seed: u64) -> Result<SawbCoefficients> {
    let mut rng = substream(seed, "sawb-calibration", &[]);
    let mut samples = Vec::new();
    for _ in 0..40 {
        let scale = 0.2 + rng.random::<f64>() * 2.0;
        let n = 600;
        let g: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        samples.push(("gaussian".to_string(), g));
        let l: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        samples.push(("laplace".to_string(), l));
        let u: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        samples.push(("uniform".to_string(), u));
    }
    sawb_calibrate(&samples, seed)
}

pub struct BaselineOut {
    pub model: Model,
    pub top1: f64,
    pub path: PathBuf,
}

/// Train the configured model to its baseline accuracy and checkpoint it.
pub fn train_baseline(cfg: &RunConfig) -> Result<BaselineOut> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let data = load_dataset(cfg)?;
    let mut model = build_model(cfg, &data)?;
    let mut top1 = evaluate(&model, &data)?;
    for e in 0..cfg.train.baseline_epochs {
        let seed = derive_seed(cfg.seed, "baseline-epoch", &[e as u64]);
        let (m, t) = train_epoch(&model, &data, cfg.train.lr, seed, cfg.train.batch_size)?;
        model = m;
        top1 = t;
    }
    let path = cfg.out_dir.join(BASELINE_CKPT);
    checkpoint::save(&model, Some(&cfg.echo()), &path)?;
    Ok(BaselineOut { model, top1, path })
}

fn write_string(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn search_log_jsonl(result: &SearchResult) -> String {
    let mut out = String::new();
    for entry in &result.log {
        out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

/// Budget in total bits for a weight policy from a compression-ratio target.
pub fn weight_budget_bits(total_elements: usize, wcomp: f64) -> f64 {
    total_elements as f64 * 32.0 / wcomp
}

/// Budget in total bits for an activation policy from an average-bits target.
pub fn activation_budget_bits(total_elements: usize, abits: f64) -> f64 {
    total_elements as f64 * abits
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub policy_file: String,
    pub search_reward: f64,
    pub best_episode: usize,
    pub top1_after_finetune: f64,
    pub avg_bits: f64,
    pub compression: f64,
    pub size_bits: u64,
    pub budget_bits: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub baseline_top1: f64,
    pub phase1_activations: PhaseReport,
    pub phase2_weights: PhaseReport,
    pub final_top1: f64,
    pub top1_drop: f64,
    pub avg_w_bits: f64,
    pub avg_a_bits: f64,
    pub w_comp: f64,
    pub weight_size_bits: u64,
    pub weight_size_mb: f64,
    /// Element-weighted average QBN per layer.
    pub per_layer_qbn_weights: Vec<(String, f64)>,
    pub per_layer_qbn_activations: Vec<(String, f64)>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("run report parse: {e}")))
    }
}

/// Element-weighted average bits per layer, from a policy and its sorted list.
pub fn per_layer_average_bits(policy: &QuantPolicy, sorted: &SortedChannelList) -> Vec<(String, f64)> {
    let mut acc: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    for ((key, bits), entry) in policy.assignment.iter().zip(&sorted.entries) {
        debug_assert_eq!(key.layer, entry.layer);
        debug_assert_eq!(key.channel, entry.channel);
        let e = acc.entry(key.layer.clone()).or_insert((0, 0));
        e.0 += *bits as u64 * entry.elements as u64;
        e.1 += entry.elements as u64;
    }
    acc.into_iter()
        .map(|(layer, (bits, elems))| (layer, bits as f64 / elems as f64))
        .collect()
}

struct PhaseOutput {
    result: SearchResult,
    finetuned: Model,
    top1: f64,
    sorted: SortedChannelList,
    budget_bits: f64,
}

/// One search phase: trace -> sort -> DDPG search under the budget -> apply
/// the best policy -> fine-tune once.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Model,
    target: TraceTarget,
    coeffs: &SawbCoefficients,
    pact_alphas: Option<&[(String, Vec<f64>)]>,
    trace_file: &Path,
    phase_tag: u64,
) -> Result<PhaseOutput> {
    let probes = match target {
        TraceTarget::Weights => cfg.trace.weight_probes,
        TraceTarget::Activations => cfg.trace.act_probes,
    };
    let probe_cfg = ProbeConfig {
        probes,
        batch_size: cfg.trace.batch_size,
        seed: derive_seed(cfg.seed, "trace", &[phase_tag]),
    };
    let report = estimate_traces(model, data, target, Granularity::Channel, &probe_cfg)?;
    write_string(trace_file, &report.to_json())?;
    let sorted = sort_channels(&report)?;

    let budget_bits = match target {
        TraceTarget::Weights => weight_budget_bits(sorted.total_elements, cfg.search.wcomp_budget),
        TraceTarget::Activations => {
            activation_budget_bits(sorted.total_elements, cfg.search.abits_budget)
        }
    };

    let search_cfg = SearchConfig::new(cfg.search.episodes, derive_seed(cfg.seed, "search", &[phase_tag]));
    let mut episode = 0u64;
    let mut reward = |policy: &QuantPolicy| -> Result<f64> {
        let seed = derive_seed(cfg.seed, "reward-finetune", &[phase_tag, episode]);
        episode += 1;
        reward_of(
            policy,
            model,
            data,
            coeffs,
            pact_alphas,
            cfg.train.finetune_lr,
            cfg.train.batch_size,
            seed,
        )
    };
    let result = run_search(&sorted, budget_bits, &search_cfg, &mut reward)?;

    if result.best_policy.size_bits as f64 > budget_bits {
        return Err(Error::Budget(format!(
            "best policy size {} exceeds budget {budget_bits}",
            result.best_policy.size_bits
        )));
    }

    let quantized = apply_policy(model, &result.best_policy, coeffs, pact_alphas)?;
    let ft_seed = derive_seed(cfg.seed, "phase-finetune", &[phase_tag]);
    let (finetuned, top1) = train_epoch(
        &quantized,
        data,
        cfg.train.finetune_lr,
        ft_seed,
        cfg.train.batch_size,
    )?;
    Ok(PhaseOutput {
        result,
        finetuned,
        top1,
        sorted,
        budget_bits,
    })
}

/// The two-step protocol: search + quantize + fine-tune activations on the
/// baseline, then search + quantize + fine-tune weights on the phase-1 model.
pub fn run_two_step(cfg: &RunConfig) -> Result<RunReport> {
    let data = load_dataset(cfg)?;
    let baseline_path = cfg.out_dir.join(BASELINE_CKPT);
    if !baseline_path.exists() {
        return Err(Error::Config(format!(
            "baseline checkpoint {} not found; run train-baseline first",
            baseline_path.display()
        )));
    }
    let (baseline, _) = checkpoint::load(&baseline_path)?;
    let baseline_top1 = evaluate(&baseline, &data)?;

    let coeffs = calibrate_sawb(derive_seed(cfg.seed, "sawb-seed", &[]))?;
    write_string(
        &cfg.out_dir.join(SAWB_FILE),
        &serde_json::to_string_pretty(&coeffs).expect("coeffs serialize"),
    )?;

    // phase 1: activations
    let calib = data.train_batch_cycled(0, cfg.train.calib_samples.min(data.train_len()));
    let pact_alphas = calibrate_pact_alphas(&baseline, &calib.inputs)?;
    let p1 = run_phase(
        cfg,
        &data,
        &baseline,
        TraceTarget::Activations,
        &coeffs,
        Some(&pact_alphas),
        &cfg.out_dir.join(ACT_TRACE_FILE),
        1,
    )?;
    write_string(&cfg.out_dir.join(ACT_POLICY_FILE), &p1.result.best_policy.to_json())?;
    write_string(&cfg.out_dir.join(ACT_LOG_FILE), &search_log_jsonl(&p1.result))?;
    checkpoint::save(&p1.finetuned, Some(&cfg.echo()), &cfg.out_dir.join(PHASE1_CKPT))?;

    // phase 2: weights, traced on the phase-1 fine-tuned model
    let p2 = run_phase(
        cfg,
        &data,
        &p1.finetuned,
        TraceTarget::Weights,
        &coeffs,
        None,
        &cfg.out_dir.join(W_TRACE_FILE),
        2,
    )?;
    write_string(&cfg.out_dir.join(W_POLICY_FILE), &p2.result.best_policy.to_json())?;
    write_string(&cfg.out_dir.join(W_LOG_FILE), &search_log_jsonl(&p2.result))?;
    checkpoint::save(&p2.finetuned, Some(&cfg.echo()), &cfg.out_dir.join(FINAL_CKPT))?;

    let final_top1 = p2.top1;
    let avg_w_bits = p2.result.best_policy.avg_bits;
    let avg_a_bits = p1.result.best_policy.avg_bits;
    let report = RunReport {
        model: cfg.model.clone(),
        seed: cfg.seed,
        baseline_top1,
        phase1_activations: PhaseReport {
            policy_file: ACT_POLICY_FILE.into(),
            search_reward: p1.result.best_reward,
            best_episode: p1.result.best_episode,
            top1_after_finetune: p1.top1,
            avg_bits: avg_a_bits,
            compression: p1.result.best_policy.compression,
            size_bits: p1.result.best_policy.size_bits,
            budget_bits: p1.budget_bits,
        },
        phase2_weights: PhaseReport {
            policy_file: W_POLICY_FILE.into(),
            search_reward: p2.result.best_reward,
            best_episode: p2.result.best_episode,
            top1_after_finetune: p2.top1,
            avg_bits: avg_w_bits,
            compression: p2.result.best_policy.compression,
            size_bits: p2.result.best_policy.size_bits,
            budget_bits: p2.budget_bits,
        },
        final_top1,
        top1_drop: baseline_top1 - final_top1,
        avg_w_bits,
        avg_a_bits,
        w_comp: 32.0 / avg_w_bits,
        weight_size_bits: p2.result.best_policy.size_bits,
        weight_size_mb: size_mb(p2.result.best_policy.total_elements, avg_w_bits),
        per_layer_qbn_weights: per_layer_average_bits(&p2.result.best_policy, &p2.sorted),
        per_layer_qbn_activations: per_layer_average_bits(&p1.result.best_policy, &p1.sorted),
    };
    write_string(&cfg.out_dir.join(REPORT_FILE), &report.to_json())?;
    Ok(report)
}

/// Matched-budget uniform baseline: the largest uniform integer bit widths
/// whose sizes fit the same budgets, run through the identical two-phase
/// apply + fine-tune protocol (no search).
pub fn run_uniform_baseline(cfg: &RunConfig) -> Result<(f64, u8, u8)> {
    let data = load_dataset(cfg)?;
    let baseline_path = cfg.out_dir.join(BASELINE_CKPT);
    let (baseline, _) = checkpoint::load(&baseline_path)?;
    let coeffs = calibrate_sawb(derive_seed(cfg.seed, "sawb-seed", &[]))?;

    // activation phase
    let probe_cfg = ProbeConfig {
        probes: cfg.trace.act_probes,
        batch_size: cfg.trace.batch_size,
        seed: derive_seed(cfg.seed, "trace", &[1]),
    };
    let act_report = estimate_traces(&baseline, &data, TraceTarget::Activations, Granularity::Channel, &probe_cfg)?;
    let act_sorted = sort_channels(&act_report)?;
    let act_budget = activation_budget_bits(act_sorted.total_elements, cfg.search.abits_budget);
    let abits = crate::alloc::max_uniform_bits_within(&act_sorted, act_budget)?;
    let act_policy = crate::alloc::uniform_policy(&act_sorted, abits)?;
    let calib = data.train_batch_cycled(0, cfg.train.calib_samples.min(data.train_len()));
    let pact_alphas = calibrate_pact_alphas(&baseline, &calib.inputs)?;
    let q1 = apply_policy(&baseline, &act_policy, &coeffs, Some(&pact_alphas))?;
    let (m1, _) = train_epoch(
        &q1,
        &data,
        cfg.train.finetune_lr,
        derive_seed(cfg.seed, "phase-finetune", &[1]),
        cfg.train.batch_size,
    )?;

    // weight phase on the fine-tuned model
    let probe_cfg2 = ProbeConfig {
        probes: cfg.trace.weight_probes,
        batch_size: cfg.trace.batch_size,
        seed: derive_seed(cfg.seed, "trace", &[2]),
    };
    let w_report = estimate_traces(&m1, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg2)?;
    let w_sorted = sort_channels(&w_report)?;
    let w_budget = weight_budget_bits(w_sorted.total_elements, cfg.search.wcomp_budget);
    let wbits = crate::alloc::max_uniform_bits_within(&w_sorted, w_budget)?;
    let w_policy = crate::alloc::uniform_policy(&w_sorted, wbits)?;
    let q2 = apply_policy(&m1, &w_policy, &coeffs, None)?;
    let (_, top1) = train_epoch(
        &q2,
        &data,
        cfg.train.finetune_lr,
        derive_seed(cfg.seed, "phase-finetune", &[2]),
        cfg.train.batch_size,
    )?;
    Ok((top1, wbits, abits))
}

// ---------------------------------------------------------------------------
// Loss landscape around one channel.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelector {
    MinTrace,
    MaxTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeTable {
    pub layer: String,
    pub channel: usize,
    pub radius: f64,
    pub steps: usize,
    /// (dx, dy, loss) over the steps x steps grid, row-major.
    pub rows: Vec<(f64, f64, f64)>,
}

impl LandscapeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dx,dy,loss\n");
        for (dx, dy, loss) in &self.rows {
            out.push_str(&format!("{dx},{dy},{loss}\n"));
        }
        out
    }
}

/// Perturb one channel's weights along two fixed orthonormal random directions
/// over a [-radius, radius] grid and record the loss at each grid point.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape(
    model: &Model,
    data: &Dataset,
    report: &TraceReport,
    selector: ChannelSelector,
    radius: f64,
    steps: usize,
    seed: u64,
    samples: usize,
) -> Result<LandscapeTable> {
    if report.granularity != Granularity::Channel || report.target != TraceTarget::Weights {
        return Err(Error::Invalid(
            "landscape needs a channel-granularity weight trace report".into(),
        ));
    }
    if steps < 2 {
        return Err(Error::Invalid("steps must be >= 2".into()));
    }
    let entry = match selector {
        ChannelSelector::MinTrace => report
            .entries
            .iter()
            .min_by(|a, b| a.average.total_cmp(&b.average)),
        ChannelSelector::MaxTrace => report
            .entries
            .iter()
            .max_by(|a, b| a.average.total_cmp(&b.average)),
    }
    .ok_or_else(|| Error::Invalid("trace report has no entries".into()))?;
    let layer = entry.layer.clone();
    let channel = entry
        .channel
        .ok_or_else(|| Error::Invalid("report entry lacks a channel index".into()))?;
    landscape_for_channel(model, data, &layer, channel, radius, steps, seed, samples)
}

#[allow(clippy::too_many_arguments)]
pub fn landscape_for_channel(
    model: &Model,
    data: &Dataset,
    layer_id: &str,
    channel: usize,
    radius: f64,
    steps: usize,
    seed: u64,
    samples: usize,
) -> Result<LandscapeTable> {
    let li = model
        .layer_index(layer_id)
        .ok_or_else(|| Error::Invalid(format!("no layer '{layer_id}'")))?;
    let layer = &model.layers[li];
    if !layer.kind.has_params() || channel >= layer.out_channels() {
        return Err(Error::Invalid(format!(
            "channel {layer_id}:{channel} not found"
        )));
    }
    let per = layer.channel_elements();

    // two orthonormal directions in the channel's weight subspace
    let mut rng = substream(seed, "landscape-directions", &[]);
    let mut d1: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n1 = d1.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut d1 {
        *v /= n1;
    }
    let mut d2: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
    let dot: f64 = d1.iter().zip(&d2).map(|(a, b)| a * b).sum();
    for (v, u) in d2.iter_mut().zip(&d1) {
        *v -= dot * u;
    }
    let n2 = d2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n2 < 1e-12 {
        return Err(Error::Numerical("degenerate perturbation directions".into()));
    }
    for v in &mut d2 {
        *v /= n2;
    }

    let batch = data.train_batch_cycled(0, samples.min(data.train_len()).max(1));
    let grid: Vec<(usize, usize)> = (0..steps)
        .flat_map(|i| (0..steps).map(move |j| (i, j)))
        .collect();
    let coord = |k: usize| -> f64 {
        if steps == 1 {
            0.0
        } else {
            -radius + 2.0 * radius * k as f64 / (steps - 1) as f64
        }
    };
    let losses: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&(i, j)| {
            let (dx, dy) = (coord(i), coord(j));
            let mut m = model.clone();
            {
                let w = m.layers[li].weight.as_mut().unwrap();
                let slice = &mut w.data_mut()[channel * per..(channel + 1) * per];
                for (k, wv) in slice.iter_mut().enumerate() {
                    *wv += dx * d1[k] + dy * d2[k];
                }
            }
            let b = Batch::new(batch.inputs.clone(), batch.labels.clone())?;
            Ok(forward_loss(&m, &b)?.0)
        })
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for (&(i, j), loss) in grid.iter().zip(losses) {
        rows.push((coord(i), coord(j), loss?));
    }
    Ok(LandscapeTable {
        layer: layer_id.to_string(),
        channel,
        radius,
        steps,
        rows,
    })
}

/// Rebuild the dataset recorded in a checkpoint's config echo.
pub fn dataset_from_echo(echo: &RunEcho) -> Result<Dataset> {
    load_dataset_parts(&echo.data, echo.seed)
}
