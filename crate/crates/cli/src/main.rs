//! `cwhawq`: channel-wise Hessian-trace mixed-precision quantization driver.
//!
//! Exit codes: 0 success, 2 config error, 3 budget infeasible, 4 data/format
//! error, 5 numerical failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use cwhawq_core::alloc::{sort_channels, QuantPolicy};
use cwhawq_core::checkpoint;
use cwhawq_core::config::RunConfig;
use cwhawq_core::data::write_synthetic_idx_dir;
use cwhawq_core::ddpg::{reward_of, run_search, SearchConfig};
use cwhawq_core::error::{Error, Result};
use cwhawq_core::pipeline::{
    self, activation_budget_bits, calibrate_sawb, dataset_from_echo, loss_landscape, run_two_step,
    train_baseline, weight_budget_bits, ChannelSelector, LANDSCAPE_FILE, REPORT_FILE,
};
use cwhawq_core::quant::{apply_policy, calibrate_pact_alphas};
use cwhawq_core::rng::derive_seed;
use cwhawq_core::trace::{estimate_traces, Granularity, ProbeConfig, TraceReport, TraceTarget};
use cwhawq_core::train::{evaluate, train_epoch};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cwhawq", version, about = "Channel-wise Hessian-trace mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Weights,
    Activations,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Layer,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Weights,
    Activations,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Min,
    Max,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write the baseline checkpoint.
    TrainBaseline(TrainBaselineArgs),
    /// Estimate average Hessian traces of a checkpointed model.
    Trace(TraceArgs),
    /// DDPG search for bit ratios under a budget.
    Search(SearchArgs),
    /// Apply a policy to a checkpoint (fake quantization).
    Quantize(QuantizeArgs),
    /// Fine-tune a checkpointed model with straight-through gradients.
    Finetune(FinetuneArgs),
    /// Print and validate a run report.
    Report(ReportArgs),
    /// Emit SVG/CSV figures for a run directory.
    Plot(PlotArgs),
    /// Perturbation loss landscape around a min/max-trace channel.
    Landscape(LandscapeArgs),
    /// Write a deterministic synthetic IDX image dataset.
    GenData(GenDataArgs),
    /// Run the full two-step search pipeline from a config.
    Run(RunArgs),
}

#[derive(Args)]
struct TrainBaselineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    target: TargetArg,
    #[arg(long, value_enum, default_value = "channel")]
    granularity: GranularityArg,
    /// Probe count (m for weights, batch count N for activations).
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Weight budget: minimum compression ratio (32 / avg bits).
    #[arg(long, conflicts_with = "budget_abits")]
    budget_wcomp: Option<f64>,
    /// Activation budget: maximum average bits.
    #[arg(long)]
    budget_abits: Option<f64>,
    #[arg(long, default_value_t = 120)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the policy and search log (default: ckpt's dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    channel: ChannelArg,
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    #[arg(long, default_value_t = 11)]
    steps: usize,
    /// Output CSV (default: landscape.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 256)]
    eval: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

fn load_ckpt_with_data(
    path: &Path,
) -> Result<(cwhawq_core::model::Model, cwhawq_core::config::RunEcho, cwhawq_core::data::Dataset)> {
    let (model, echo) = checkpoint::load(path)?;
    let echo = echo.ok_or_else(|| {
        Error::Data(format!(
            "{} carries no run configuration; re-create it with train-baseline",
            path.display()
        ))
    })?;
    let data = dataset_from_echo(&echo)?;
    Ok((model, echo, data))
}

fn read_policy(path: &Path) -> Result<QuantPolicy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    QuantPolicy::from_json(&text)
}

fn cmd_trace(a: &TraceArgs) -> Result<()> {
    let (model, echo, data) = load_ckpt_with_data(&a.ckpt)?;
    let cfg = ProbeConfig {
        probes: a.m,
        batch_size: echo.trace.batch_size,
        seed: a.seed,
    };
    let target = match a.target {
        TargetArg::Weights => TraceTarget::Weights,
        TargetArg::Activations => TraceTarget::Activations,
    };
    let granularity = match a.granularity {
        GranularityArg::Layer => Granularity::Layer,
        GranularityArg::Channel => Granularity::Channel,
    };
    let report = estimate_traces(&model, &data, target, granularity, &cfg)?;
    std::fs::write(&a.out, report.to_json()).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    println!("wrote {} ({} entries)", a.out.display(), report.entries.len());
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<()> {
    let (model, echo, data) = load_ckpt_with_data(&a.ckpt)?;
    let text = std::fs::read_to_string(&a.trace).map_err(|e| Error::io(a.trace.display().to_string(), e))?;
    let report = TraceReport::from_json(&text)?;
    let sorted = sort_channels(&report)?;

    let budget_bits = match a.phase {
        PhaseArg::Weights => {
            let wcomp = a.budget_wcomp.ok_or_else(|| {
                Error::Config("phase weights requires --budget-wcomp".into())
            })?;
            weight_budget_bits(sorted.total_elements, wcomp)
        }
        PhaseArg::Activations => {
            let abits = a.budget_abits.ok_or_else(|| {
                Error::Config("phase activations requires --budget-abits".into())
            })?;
            activation_budget_bits(sorted.total_elements, abits)
        }
    };

    let coeffs = calibrate_sawb(derive_seed(echo.seed, "sawb-seed", &[]))?;
    let pact_alphas = match a.phase {
        PhaseArg::Activations => {
            let calib = data.train_batch_cycled(0, echo.train.calib_samples.min(data.train_len()));
            Some(calibrate_pact_alphas(&model, &calib.inputs)?)
        }
        PhaseArg::Weights => None,
    };

    let search_cfg = SearchConfig::new(a.episodes, a.seed);
    let mut episode = 0u64;
    let mut reward = |policy: &QuantPolicy| -> Result<f64> {
        let seed = derive_seed(a.seed, "reward-finetune", &[episode]);
        episode += 1;
        reward_of(
            policy,
            &model,
            &data,
            &coeffs,
            pact_alphas.as_deref(),
            echo.train.finetune_lr,
            echo.train.batch_size,
            seed,
        )
    };
    let result = run_search(&sorted, budget_bits, &search_cfg, &mut reward)?;

    let out_dir = a
        .out_dir
        .clone()
        .or_else(|| a.ckpt.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let tag = match a.phase {
        PhaseArg::Weights => "weights",
        PhaseArg::Activations => "activations",
    };
    let policy_path = out_dir.join(format!("{tag}_policy.json"));
    let log_path = out_dir.join(format!("{tag}_search_log.jsonl"));
    std::fs::write(&policy_path, result.best_policy.to_json())
        .map_err(|e| Error::io(policy_path.display().to_string(), e))?;
    let mut log = String::new();
    for entry in &result.log {
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!(
        "best reward {:.4} at episode {}; avg bits {:.3}, compression {:.2}x",
        result.best_reward, result.best_episode, result.best_policy.avg_bits, result.best_policy.compression
    );
    println!("wrote {} and {}", policy_path.display(), log_path.display());
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let (model, echo, data) = load_ckpt_with_data(&a.ckpt)?;
    let policy = read_policy(&a.policy)?;
    let coeffs = calibrate_sawb(derive_seed(echo.seed, "sawb-seed", &[]))?;
    let pact_alphas = match policy.target {
        cwhawq_core::alloc::PolicyTarget::Activations => {
            let calib = data.train_batch_cycled(0, echo.train.calib_samples.min(data.train_len()));
            Some(calibrate_pact_alphas(&model, &calib.inputs)?)
        }
        cwhawq_core::alloc::PolicyTarget::Weights => None,
    };
    let quantized = apply_policy(&model, &policy, &coeffs, pact_alphas.as_deref())?;
    checkpoint::save(&quantized, Some(&echo), &a.out)?;
    let top1 = evaluate(&quantized, &data)?;
    println!("wrote {}; top-1 before fine-tuning {:.4}", a.out.display(), top1);
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let (mut model, echo, data) = load_ckpt_with_data(&a.ckpt)?;
    let mut top1 = evaluate(&model, &data)?;
    for e in 0..a.epochs {
        let seed = derive_seed(a.seed, "cli-finetune", &[e as u64]);
        let (m, t) = train_epoch(&model, &data, echo.train.finetune_lr, seed, echo.train.batch_size)?;
        model = m;
        top1 = t;
    }
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        a.ckpt.with_file_name(format!("{stem}-ft.nnq"))
    });
    checkpoint::save(&model, Some(&echo), &out)?;
    println!("wrote {}; top-1 {:.4}", out.display(), top1);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let path = a.run.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let report = cwhawq_core::pipeline::RunReport::from_json(&text)?;

    // artifact integrity: policies exist and still satisfy their budgets
    for (file, budget) in [
        (&report.phase1_activations.policy_file, report.phase1_activations.budget_bits),
        (&report.phase2_weights.policy_file, report.phase2_weights.budget_bits),
    ] {
        let p = a.run.join(file);
        let policy = read_policy(&p)?;
        if policy.size_bits as f64 > budget {
            return Err(Error::Budget(format!(
                "{}: size {} bits exceeds budget {budget}",
                p.display(),
                policy.size_bits
            )));
        }
    }

    println!("model            {}", report.model);
    println!("seed             {}", report.seed);
    println!("baseline top-1   {:.4}", report.baseline_top1);
    println!("phase1 (a-bits)  avg {:.3} bits, top-1 {:.4}", report.avg_a_bits, report.phase1_activations.top1_after_finetune);
    println!("phase2 (w-bits)  avg {:.3} bits, top-1 {:.4}", report.avg_w_bits, report.phase2_weights.top1_after_finetune);
    println!("final top-1      {:.4} (drop {:.4})", report.final_top1, report.top1_drop);
    println!("W-Comp           {:.2}x", report.w_comp);
    println!("weight size      {} bits ({:.4} MB)", report.weight_size_bits, report.weight_size_mb);
    println!("per-layer weight QBN:");
    for (layer, bits) in &report.per_layer_qbn_weights {
        println!("  {layer:<10} {bits:.3}");
    }
    println!("per-layer activation QBN:");
    for (layer, bits) in &report.per_layer_qbn_activations {
        println!("  {layer:<10} {bits:.3}");
    }
    Ok(())
}

fn cmd_landscape(a: &LandscapeArgs) -> Result<()> {
    let (model, echo, data) = load_ckpt_with_data(&a.ckpt)?;
    let text = std::fs::read_to_string(&a.trace).map_err(|e| Error::io(a.trace.display().to_string(), e))?;
    let report = TraceReport::from_json(&text)?;
    let selector = match a.channel {
        ChannelArg::Min => ChannelSelector::MinTrace,
        ChannelArg::Max => ChannelSelector::MaxTrace,
    };
    let table = loss_landscape(
        &model,
        &data,
        &report,
        selector,
        a.radius,
        a.steps,
        derive_seed(echo.seed, "landscape", &[]),
        echo.train.calib_samples,
    )?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.ckpt
            .parent()
            .map(|d| d.join(LANDSCAPE_FILE))
            .unwrap_or_else(|| PathBuf::from(LANDSCAPE_FILE))
    });
    std::fs::write(&out, table.to_csv()).map_err(|e| Error::io(out.display().to_string(), e))?;
    let center = table
        .rows
        .iter()
        .find(|r| r.0 == 0.0 && r.1 == 0.0)
        .map(|r| r.2);
    let peak = table.rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "wrote {} (channel {}:{}, center loss {:?}, peak loss {peak:.6})",
        out.display(),
        table.layer,
        table.channel,
        center
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBaseline(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let out = train_baseline(&cfg)?;
            println!("baseline top-1 {:.4}; wrote {}", out.top1, out.path.display());
            Ok(())
        }
        Command::Run(a) => {
            let cfg = RunConfig::load(&a.config)?;
            if !cfg.out_dir.join(pipeline::BASELINE_CKPT).exists() {
                let out = train_baseline(&cfg)?;
                println!("baseline top-1 {:.4}", out.top1);
            }
            let report = run_two_step(&cfg)?;
            println!(
                "final top-1 {:.4} (drop {:.4}); avg w-bits {:.3}, avg a-bits {:.3}, W-Comp {:.2}x",
                report.final_top1, report.top1_drop, report.avg_w_bits, report.avg_a_bits, report.w_comp
            );
            Ok(())
        }
        Command::Trace(a) => cmd_trace(a),
        Command::Search(a) => cmd_search(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Report(a) => cmd_report(a),
        Command::Plot(a) => {
            let written = cwhawq_core::plots::emit_plots(&a.run)?;
            for f in &written {
                println!("wrote {}", a.run.join(f).display());
            }
            Ok(())
        }
        Command::Landscape(a) => cmd_landscape(a),
        Command::GenData(a) => {
            write_synthetic_idx_dir(&a.out, a.seed, a.train, a.eval, a.classes)?;
            println!(
                "wrote IDX dataset to {} ({} train / {} eval, {} classes)",
                a.out.display(),
                a.train,
                a.eval,
                a.classes
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
