//! Timing and accuracy calibration for the desk-scale defaults.
//! Not part of the test suite; run manually:
//!   cargo run -p cwhawq-core --example calibrate -- <experiment>

use cwhawq_core::config::RunConfig;
use cwhawq_core::data::{ingest_mnist, write_synthetic_idx_dir};
use cwhawq_core::ddpg::{run_search, SearchConfig};
use cwhawq_core::model::convnet_s;
use cwhawq_core::pipeline::*;
use cwhawq_core::trace::{estimate_traces, Granularity, ProbeConfig, TraceTarget};
use cwhawq_core::train::{evaluate, train_epoch};
use std::time::Instant;

fn convnet_cfg(dir: &std::path::Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::defaults();
    cfg.model = "convnet-s".into();
    cfg.data.dataset = "mnist".into();
    cfg.data.mnist_dir = Some(dir.join("idx").display().to_string());
    cfg.seed = seed;
    cfg.out_dir = dir.join(format!("run{seed}"));
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(String::as_str).unwrap_or("baseline");
    let dir = std::path::PathBuf::from("/tmp/cwhawq-calib");
    std::fs::create_dir_all(&dir).unwrap();

    match what {
        "baseline" => {
            let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
            let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
            let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
            let t0 = Instant::now();
            write_synthetic_idx_dir(&dir.join("idx"), 7, 512, 256, 10).unwrap();
            println!("idx gen: {:?}", t0.elapsed());
            let cfg = convnet_cfg(&dir, 0);
            let data = ingest_mnist(std::path::Path::new(cfg.data.mnist_dir.as_ref().unwrap())).unwrap();
            let model = convnet_s(10, 0);
            let t0 = Instant::now();
            let mut m = model;
            for e in 0..epochs as u64 {
                let te = Instant::now();
                let (m2, top1) = train_epoch(&m, &data, lr, e, batch).unwrap();
                m = m2;
                println!("epoch {e}: top1 {top1:.4} ({:?})", te.elapsed());
            }
            println!("total train: {:?}", t0.elapsed());

            let t0 = Instant::now();
            let probe_cfg = ProbeConfig { probes: 12, batch_size: 32, seed: 0 };
            let rep = estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
            println!("weight channel trace ({} entries): {:?}", rep.entries.len(), t0.elapsed());
            let t0 = Instant::now();
            let rep_a = estimate_traces(&m, &data, TraceTarget::Activations, Granularity::Channel, &probe_cfg).unwrap();
            println!("act channel trace ({} entries): {:?}", rep_a.entries.len(), t0.elapsed());
            // trace spread
            let mut avgs: Vec<f64> = rep.entries.iter().map(|e| e.average).collect();
            avgs.sort_by(f64::total_cmp);
            println!("weight avg-trace min {:.3e} max {:.3e}", avgs[0], avgs[avgs.len()-1]);
        }
        "twostep" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
            write_synthetic_idx_dir(&dir.join("idx"), 7, 512, 256, 10).unwrap();
            let mut cfg = convnet_cfg(&dir, seed);
            cfg.search.episodes = 120;
            cfg.train.baseline_epochs = 8;
            let t0 = Instant::now();
            let b = train_baseline(&cfg).unwrap();
            println!("baseline: top1 {:.4} in {:?}", b.top1, t0.elapsed());
            let t0 = Instant::now();
            let rep = run_two_step(&cfg).unwrap();
            println!(
                "two-step: final {:.4} (drop {:.4}), w {:.3} bits, a {:.3} bits, wcomp {:.2} in {:?}",
                rep.final_top1, rep.top1_drop, rep.avg_w_bits, rep.avg_a_bits, rep.w_comp, t0.elapsed()
            );
            let t0 = Instant::now();
            let (utop1, wb, ab) = run_uniform_baseline(&cfg).unwrap();
            println!("uniform: top1 {utop1:.4} at w{wb}/a{ab} in {:?}", t0.elapsed());
        }
        "ddpg" => {
            // analytic-reward sanity: optimum at avg bits 4.0
            use cwhawq_core::alloc::{sort_channels, QuantPolicy};
            use cwhawq_core::trace::{TraceEntry, TraceReport};
            let entries: Vec<TraceEntry> = (0..98)
                .map(|i| TraceEntry {
                    layer: format!("l{}", i / 25),
                    channel: Some(i % 25),
                    raw: 0.0,
                    elements: 9 + (i % 7) * 31,
                    average: 1.0 / (i + 1) as f64,
                })
                .collect();
            let report = TraceReport {
                target: TraceTarget::Weights,
                granularity: Granularity::Channel,
                seed: 0,
                m: 1,
                batch_size: 1,
                entries,
            };
            let sorted = sort_channels(&report).unwrap();
            let budget = sorted.total_elements as f64 * 8.0;
            for seed in 0..5u64 {
                let t0 = Instant::now();
                let cfg = SearchConfig::new(120, seed);
                let mut reward = |p: &QuantPolicy| -> cwhawq_core::error::Result<f64> {
                    Ok(1.0 - (p.avg_bits - 4.0).abs() / 8.0)
                };
                let res = run_search(&sorted, budget, &cfg, &mut reward).unwrap();
                println!(
                    "seed {seed}: best reward {:.4} (avg bits {:.3}) at ep {} in {:?}",
                    res.best_reward, res.best_policy.avg_bits, res.best_episode, t0.elapsed()
                );
            }
        }
        "landscape" => {
            write_synthetic_idx_dir(&dir.join("idx"), 7, 512, 256, 10).unwrap();
            let cfg = convnet_cfg(&dir, 0);
            let data = ingest_mnist(std::path::Path::new(cfg.data.mnist_dir.as_ref().unwrap())).unwrap();
            let model = convnet_s(10, 0);
            let mut m = model;
            for e in 0..4 {
                let (m2, _) = train_epoch(&m, &data, 0.1, e, 32).unwrap();
                m = m2;
            }
            println!("trained; eval {:.4}", evaluate(&m, &data).unwrap());
            let probe_cfg = ProbeConfig { probes: 12, batch_size: 32, seed: 3 };
            let rep = estimate_traces(&m, &data, TraceTarget::Weights, Granularity::Channel, &probe_cfg).unwrap();
            for seed in 0..5u64 {
                let t0 = Instant::now();
                let hi = loss_landscape(&m, &data, &rep, ChannelSelector::MaxTrace, 0.5, 5, seed, 128).unwrap();
                let lo = loss_landscape(&m, &data, &rep, ChannelSelector::MinTrace, 0.5, 5, seed, 128).unwrap();
                let center = |t: &LandscapeTable| t.rows.iter().find(|r| r.0 == 0.0 && r.1 == 0.0).unwrap().2;
                let ring = |t: &LandscapeTable| {
                    let c = center(t);
                    let r: Vec<f64> = t
                        .rows
                        .iter()
                        .filter(|r| r.0.abs() == 0.5 || r.1.abs() == 0.5)
                        .map(|r| r.2 - c)
                        .collect();
                    r.iter().sum::<f64>() / r.len() as f64
                };
                println!(
                    "seed {seed}: max-ch {}:{} rise {:.5} | min-ch {}:{} rise {:.5} ({:?})",
                    hi.layer, hi.channel, ring(&hi), lo.layer, lo.channel, ring(&lo), t0.elapsed()
                );
            }
        }
        "exact" => {
            use cwhawq_core::data::gen_synthetic;
            use cwhawq_core::engine::HvpEngine;
            use cwhawq_core::model::mlp_s;
            let classes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
            let data = gen_synthetic(11, classes, 400, 16, 6.0).unwrap();
            let mut model = mlp_s(16, classes, 7);
            for e in 0..epochs as u64 {
                let (m2, _) = train_epoch(&model, &data, 0.1, e, 32).unwrap();
                model = m2;
            }
            let model = model;
            for batch_size in [16usize, 32] {
                let batch = data.train_batch_cycled(0, batch_size);
                let engine = HvpEngine::new(&model, &batch).unwrap();
                let exact: Vec<(String, f64)> = model
                    .layers
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.kind.has_params())
                    .map(|(li, l)| {
                        let span = model.param_layout().into_iter().find(|s| s.layer_index == li).unwrap();
                        let mut tr = 0.0;
                        for k in 0..span.weight_len {
                            let mut e = vec![0.0; model.param_count()];
                            e[span.weight_offset + k] = 1.0;
                            tr += engine.hvp_weights(&e).unwrap()[span.weight_offset + k];
                        }
                        (l.id.clone(), tr)
                    })
                    .collect();
                for seed in 5..13u64 {
                    let cfg = ProbeConfig { probes: 1000, batch_size, seed };
                    let rep = estimate_traces(&model, &data, TraceTarget::Weights, Granularity::Layer, &cfg).unwrap();
                    let rels: Vec<String> = rep
                        .entries
                        .iter()
                        .map(|e| {
                            let ex = exact.iter().find(|(l, _)| l == &e.layer).unwrap().1;
                            format!("{} {:.4}", e.layer, (e.raw - ex).abs() / ex.abs())
                        })
                        .collect();
                    println!("B={batch_size} seed={seed} layer rels: {rels:?}");
                }
                // channel-sum part at 1e4 probes
                let t0 = Instant::now();
                let cfg = ProbeConfig { probes: 10_000, batch_size, seed: 9 };
                let rep = estimate_traces(&model, &data, TraceTarget::Weights, Granularity::Channel, &cfg).unwrap();
                for (l, ex) in &exact {
                    let sum: f64 = rep.entries.iter().filter(|e| &e.layer == l).map(|e| e.raw).sum();
                    println!(
                        "B={batch_size} channel-sum {l}: rel {:.4} ({:?})",
                        (sum - ex).abs() / ex.abs(),
                        t0.elapsed()
                    );
                }
            }
        }
        other => eprintln!("unknown experiment {other}"),
    }
}
