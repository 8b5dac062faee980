//! Command-line entry point: `synth`, `train`, `evaluate`, `bench-sampling`.
//!
//! Flags are `--config <path>`, `--seed <u64>`, `--out <dir>`,
//! `--profile <name>`, plus any `--section.key <value>` override of the
//! flat run configuration. Every command echoes its effective config and
//! seed into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{
    chronological_split, generate_synthetic, load_csv, make_windows, write_adjacency_csv,
    write_oracle_csv, write_signals_csv, NormStats, STGDataset, SyntheticOracle, SyntheticSpec,
};
use crate::diffusion::{ensemble_sample, EtaMode, STGWindow, SampleConfig, SampleMode};
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::metrics::{EvalReport, Evaluator};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::trainer::{train, write_log_csv, TrainConfig};
use crate::ugnet::{load_checkpoint, save_checkpoint, UGnet, UGnetConfig};

pub const HELP: &str = "\
stgcast - probabilistic spatio-temporal graph forecasting with denoising diffusion

usage: stgcast <command> [--config <path>] [--seed <u64>] [--out <dir>]
               [--profile <name>] [--<section.key> <value>]...

commands:
  synth           write signals.csv, adjacency.csv and oracle.csv for the
                  synthetic ring process (requires an explicit --seed)
  train           train the denoiser; writes checkpoint/ and log.csv
  evaluate        sample forecasts on a split; writes report.csv and one
                  band CSV per requested window index
  bench-sampling  time sampling configurations; writes bench.csv

profiles: tiny (desk-scale smoke configuration)

output files and exact column orders:
  log.csv     epoch,train_loss,val_crps,lr,wall_seconds,clipped_steps
  report.csv  split,horizon,crps,mae,rmse,crps_raw,mae_raw,rmse_raw,S,k,M,mode,points
              (one row per horizon step, then a summary row with horizon=all;
              crps/mae/rmse are in standardized units, *_raw on the data scale)
  window_<i>_bands.csv  horizon,truth,mean,p5,p25,p75,p95 (raw scale)
  bench.csv   M,k,S,trajectories,median_seconds,speedup_vs_baseline
              (baseline: largest M in the grid at k=1, same S)

config keys are listed in the README; every key can be set in the --config
file as 'section.key = value' or overridden with '--section.key value'.
";

pub fn run(args: &[String]) -> Result<()> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        print!("{}", HELP);
        return Ok(());
    }
    let command = args[0].clone();
    let (config, out) = parse_flags(&args[1..])?;
    match command.as_str() {
        "synth" => cmd_synth(&config, &out),
        "train" => cmd_train(&config, &out),
        "evaluate" => cmd_evaluate(&config, &out),
        "bench-sampling" => cmd_bench_sampling(&config, &out),
        other => Err(Error::Config(format!("unknown command '{}'; try --help", other))),
    }
}

fn parse_flags(args: &[String]) -> Result<(RunConfig, PathBuf)> {
    let mut config = RunConfig::default();
    let mut out = PathBuf::from("out");
    // first pass so --config applies below --profile and dotted overrides
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --flag, got '{}'", flag)))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("flag '--{}' needs a value", key)))?
            .clone();
        pairs.push((key.to_string(), value));
        i += 2;
    }
    if let Some((_, path)) = pairs.iter().find(|(k, _)| k == "config") {
        config.apply_file(Path::new(path))?;
    }
    for (key, value) in &pairs {
        match key.as_str() {
            "config" => {}
            "out" => out = PathBuf::from(value),
            "profile" => config.apply_profile(value)?,
            "seed" => config.set("run.seed", value)?,
            dotted => config.set(dotted, value)?,
        }
    }
    Ok((config, out))
}

fn write_echo(out: &Path, command: &str, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let body = format!("command = {}\n{}", command, config.echo());
    std::fs::write(out.join("config_echo.txt"), body)?;
    Ok(())
}

fn schedule_from(config: &RunConfig) -> Result<NoiseSchedule> {
    let kind = match config.require("diffusion.schedule")? {
        "quadratic" => ScheduleKind::Quadratic,
        "linear" => ScheduleKind::Linear,
        other => return Err(Error::Config(format!("unknown schedule '{}'", other))),
    };
    NoiseSchedule::new(
        kind,
        config.get_usize("diffusion.N")?,
        config.get_f64("diffusion.beta_1")?,
        config.get_f64("diffusion.beta_N")?,
    )
}

fn ugnet_config_from(config: &RunConfig, f: usize, v: usize, t: usize) -> Result<UGnetConfig> {
    let mut cfg = UGnetConfig::new(
        f,
        v,
        t,
        config.get_usize("ugnet.C")?,
        config.get_usize("ugnet.K")?,
        config.get_usize("ugnet.depth")?,
        config.get_usize("ugnet.d_embed")?,
    );
    cfg.gcn_activation = match config.require("ugnet.gcn_activation")? {
        "identity" => Activation::Identity,
        "relu" => Activation::Relu,
        other => return Err(Error::Config(format!("unknown gcn activation '{}'", other))),
    };
    cfg.channel_growth = config.get_bool("ugnet.channel_growth")?;
    cfg.no_spatial = config.get_bool("ugnet.no_spatial")?;
    cfg.no_temporal = config.get_bool("ugnet.no_temporal")?;
    cfg.no_ustructure = config.get_bool("ugnet.no_ustructure")?;
    Ok(cfg)
}

fn sample_config_from(config: &RunConfig, n_steps: usize, seed: u64) -> Result<SampleConfig> {
    let m_raw = config.get_usize("sample.M")?;
    let m = if m_raw == 0 { n_steps } else { m_raw };
    let mode = match config.require("sample.mode")? {
        "ddpm" => SampleMode::Ddpm,
        "ddim" => SampleMode::Ddim,
        other => return Err(Error::Config(format!("unknown sample mode '{}'", other))),
    };
    Ok(SampleConfig {
        s: config.get_usize("sample.S")?,
        k: config.get_usize("sample.k")?,
        mode,
        m,
        eta: EtaMode::DdpmEquivalent,
        seed,
    })
}

/// Check the data paths exist before any compute happens.
fn validate_data_paths(config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let signals = config
        .get_path("data.signals")
        .map_err(|_| Error::Config("missing 'data.signals' path".to_string()))?;
    let adjacency = config
        .get_path("data.adjacency")
        .map_err(|_| Error::Config("missing 'data.adjacency' path".to_string()))?;
    if !signals.exists() {
        return Err(Error::Config(format!("signals file not found: {}", signals.display())));
    }
    if !adjacency.exists() {
        return Err(Error::Config(format!("adjacency file not found: {}", adjacency.display())));
    }
    Ok((signals, adjacency))
}

fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let seed = config
        .seed()?
        .ok_or_else(|| Error::Config("synth requires an explicit --seed for reproducibility".to_string()))?;
    let spec = SyntheticSpec {
        v: config.get_usize("synth.V")?,
        rho: config.get_f64("synth.rho")?,
        lambda: config.get_f64("synth.lambda")?,
        sigma: config.get_f64("synth.sigma")?,
        length: config.get_usize("synth.length")?,
    };
    let t_p = config.get_usize("data.t_p")?;
    let t_h = config.get_usize("data.t_h")?;
    let dataset = generate_synthetic::<f32>(&spec, seed)?;
    let oracle = SyntheticOracle::build(&spec, t_p)?;
    std::fs::create_dir_all(out)?;
    write_signals_csv(&out.join("signals.csv"), &dataset.signals)?;
    write_adjacency_csv(&out.join("adjacency.csv"), dataset.graph.adjacency())?;
    write_oracle_csv(&out.join("oracle.csv"), &dataset, &oracle, t_h)?;
    write_echo(out, "synth", config)?;
    println!(
        "synth: wrote {} rows x {} nodes to {}",
        dataset.rows(),
        dataset.nodes(),
        out.display()
    );
    Ok(())
}

struct LoadedData {
    dataset: STGDataset<f32>,
    stats: NormStats,
    t_h: usize,
    t_p: usize,
    splits: crate::data::Splits,
}

fn load_data(config: &RunConfig) -> Result<LoadedData> {
    let (signals, adjacency) = validate_data_paths(config)?;
    let dataset = load_csv::<f32>(&signals, &adjacency)?;
    let t_h = config.get_usize("data.t_h")?;
    let t_p = config.get_usize("data.t_p")?;
    let splits = chronological_split(dataset.rows(), t_h + t_p)?;
    let stats = dataset.norm_stats(splits.train.clone())?;
    Ok(LoadedData { dataset, stats, t_h, t_p, splits })
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let seed = config.seed()?.unwrap_or(0);
    let stride = config.get_usize("data.stride")?;
    let train_windows = make_windows(
        &data.dataset,
        data.splits.train.clone(),
        &data.stats,
        data.t_h,
        data.t_p,
        stride,
    )?;
    let val_windows = make_windows(
        &data.dataset,
        data.splits.val.clone(),
        &data.stats,
        data.t_h,
        data.t_p,
        stride,
    )?;
    let schedule = schedule_from(config)?;
    let net_cfg = ugnet_config_from(
        config,
        data.dataset.features(),
        data.dataset.nodes(),
        data.t_h + data.t_p,
    )?;
    let mut net = UGnet::<f32>::new(net_cfg, seed)?;
    let clip = config.get_f64("train.clip_norm")?;
    let train_cfg = TrainConfig {
        batch_size: config.get_usize("train.batch_size")?,
        lr: config.get_f64("train.lr")?,
        lr_halve_every: config.get_usize("train.lr_halve_every")?,
        patience: config.get_usize("train.patience")?,
        max_epochs: config.get_usize("train.max_epochs")?,
        seed,
        val_s: config.get_usize("train.val_s")?,
        val_m: config.get_usize("train.val_m")?,
        val_window_stride: config.get_usize("train.val_window_stride")?,
        future_only: config.get_bool("loss.future_only")?,
        clip_norm: if clip > 0.0 { Some(clip) } else { None },
        max_steps_per_epoch: config.get_usize("train.max_steps_per_epoch")?,
    };
    let started = Instant::now();
    let run = train(&mut net, &data.dataset.graph, &schedule, &train_windows, &val_windows, &train_cfg)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint"), &run.best)?;
    write_log_csv(&out.join("log.csv"), &run.log)?;
    let mut effective = config.clone();
    effective.set("run.seed", &seed.to_string())?;
    write_echo(out, "train", &effective)?;
    println!(
        "train: best epoch {} (val CRPS {:.4}) after {} epochs, {:.1}s; checkpoint in {}",
        run.best_epoch,
        run.best_val_crps,
        run.log.len(),
        started.elapsed().as_secs_f64(),
        out.join("checkpoint").display()
    );
    Ok(())
}

fn split_range(data: &LoadedData, which: &str) -> Result<std::ops::Range<usize>> {
    Ok(match which {
        "train" => data.splits.train.clone(),
        "val" => data.splits.val.clone(),
        "test" => data.splits.test.clone(),
        other => return Err(Error::Config(format!("unknown split '{}'", other))),
    })
}

fn load_net_for(config: &RunConfig, data: &LoadedData) -> Result<UGnet<f32>> {
    let ckpt = config
        .get_path("eval.checkpoint")
        .map_err(|_| Error::Config("missing 'eval.checkpoint' path".to_string()))?;
    let net = load_checkpoint::<f32>(&ckpt)?;
    let t = data.t_h + data.t_p;
    if net.config.v != data.dataset.nodes() || net.config.t != t || net.config.f != data.dataset.features() {
        return Err(Error::Config(format!(
            "checkpoint expects F={} V={} T={}, dataset provides F={} V={} T={}",
            net.config.f,
            net.config.v,
            net.config.t,
            data.dataset.features(),
            data.dataset.nodes(),
            t
        )));
    }
    Ok(net)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

fn write_report_csv(
    path: &Path,
    split: &str,
    report: &EvalReport,
    sample_cfg: &SampleConfig,
) -> Result<()> {
    let mode = match sample_cfg.mode {
        SampleMode::Ddpm => "ddpm",
        SampleMode::Ddim => "ddim",
    };
    let mut outp = String::from("split,horizon,crps,mae,rmse,crps_raw,mae_raw,rmse_raw,S,k,M,mode,points\n");
    let t_p = report.standardized.per_horizon_crps.len();
    for h in 0..t_p {
        outp.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            split,
            h + 1,
            report.standardized.per_horizon_crps[h],
            report.standardized.per_horizon_mae[h],
            report.standardized.per_horizon_rmse[h],
            report.raw.per_horizon_crps[h],
            report.raw.per_horizon_mae[h],
            report.raw.per_horizon_rmse[h],
            sample_cfg.s,
            sample_cfg.k,
            sample_cfg.m,
            mode,
            report.points / t_p,
        ));
    }
    outp.push_str(&format!(
        "{},all,{},{},{},{},{},{},{},{},{},{},{}\n",
        split,
        report.standardized.crps,
        report.standardized.mae,
        report.standardized.rmse,
        report.raw.crps,
        report.raw.mae,
        report.raw.rmse,
        sample_cfg.s,
        sample_cfg.k,
        sample_cfg.m,
        mode,
        report.points,
    ));
    std::fs::write(path, outp)?;
    Ok(())
}

fn write_band_csv(
    path: &Path,
    window: &STGWindow<f32>,
    samples_raw: &[Tensor<f32>],
    truth_raw: &Tensor<f32>,
) -> Result<()> {
    let sh = truth_raw.shape();
    let (v_n, t_p) = (sh[1], sh[2]);
    let mut outp = String::from("node,horizon,truth,mean,p5,p25,p75,p95\n");
    for v in 0..v_n {
        for h in 0..t_p {
            let idx = v * t_p + h;
            let mut vals: Vec<f64> = samples_raw.iter().map(|s| s.data()[idx] as f64).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            outp.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                v,
                h + 1,
                truth_raw.data()[idx],
                mean,
                percentile(&vals, 5.0),
                percentile(&vals, 25.0),
                percentile(&vals, 75.0),
                percentile(&vals, 95.0),
            ));
        }
    }
    let _ = window;
    std::fs::write(path, outp)?;
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let net = load_net_for(config, &data)?;
    let schedule = schedule_from(config)?;
    let seed = config.seed()?.unwrap_or(0);
    let split_name = config.require("eval.split")?.to_string();
    let range = split_range(&data, &split_name)?;
    let windows = make_windows(&data.dataset, range, &data.stats, data.t_h, data.t_p, 1)?;
    let stride = config.get_usize("eval.window_stride")?.max(1);
    let max_windows = config.get_usize("eval.max_windows")?;
    let sample_cfg = sample_config_from(config, schedule.len(), seed)?;

    let mut evaluator = Evaluator::new(data.t_p, Some(data.stats.clone()));
    let mut evaluated = 0usize;
    for w in windows.iter().step_by(stride) {
        if max_windows > 0 && evaluated >= max_windows {
            break;
        }
        let cfg_w = SampleConfig { seed: seed.wrapping_add(w.start_row as u64), ..sample_cfg.clone() };
        let ensemble = ensemble_sample(&net, w, &data.dataset.graph, &schedule, &cfg_w)?;
        evaluator.add(&ensemble, &w.future()?)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Invalid("no windows evaluated".to_string()));
    }
    let report = evaluator.finish()?;
    std::fs::create_dir_all(out)?;
    write_report_csv(&out.join("report.csv"), &split_name, &report, &sample_cfg)?;

    for idx in config.get_usize_list("eval.windows")? {
        let w = windows.get(idx).ok_or_else(|| {
            Error::Invalid(format!(
                "window index {} out of range: {} split has {} windows",
                idx,
                split_name,
                windows.len()
            ))
        })?;
        let cfg_w = SampleConfig { seed: seed.wrapping_add(w.start_row as u64), ..sample_cfg.clone() };
        let ensemble = ensemble_sample(&net, w, &data.dataset.graph, &schedule, &cfg_w)?;
        let samples_raw: Vec<Tensor<f32>> = ensemble
            .samples
            .iter()
            .map(|s| crate::data::destandardize_block(s, &data.stats))
            .collect::<Result<_>>()?;
        let truth_raw = crate::data::destandardize_block(&w.future()?, &data.stats)?;
        write_band_csv(&out.join(format!("window_{idx}_bands.csv")), w, &samples_raw, &truth_raw)?;
    }
    let mut effective = config.clone();
    effective.set("run.seed", &seed.to_string())?;
    write_echo(out, "evaluate", &effective)?;
    println!(
        "evaluate: {} windows of {} split; CRPS {:.4} (standardized), {:.4} (raw); report in {}",
        evaluated,
        split_name,
        report.standardized.crps,
        report.raw.crps,
        out.join("report.csv").display()
    );
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

fn cmd_bench_sampling(config: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(config)?;
    let net = load_net_for(config, &data)?;
    let schedule = schedule_from(config)?;
    let seed = config.seed()?.unwrap_or(0);
    let windows = make_windows(
        &data.dataset,
        data.splits.test.clone(),
        &data.stats,
        data.t_h,
        data.t_p,
        1,
    )?;
    let window = windows
        .first()
        .ok_or_else(|| Error::Invalid("test split has no windows".to_string()))?;
    let m_list = config.get_usize_list("bench.M_list")?;
    let k_list = config.get_usize_list("bench.k_list")?;
    let s_list = config.get_usize_list("bench.S_list")?;
    let repeats = config.get_usize("bench.repeats")?.max(1);
    if m_list.is_empty() || k_list.is_empty() || s_list.is_empty() {
        return Err(Error::Config("bench grids must be non-empty".to_string()));
    }
    let m_max = *m_list.iter().max().expect("non-empty");

    let mut rows = Vec::new();
    let mut timings: std::collections::HashMap<(usize, usize, usize), f64> =
        std::collections::HashMap::new();
    for &s in &s_list {
        for &m in &m_list {
            for &k in &k_list {
                if k > s || k > m {
                    continue;
                }
                let cfg = SampleConfig {
                    s,
                    k,
                    mode: SampleMode::Ddim,
                    m: m.min(schedule.len()),
                    eta: EtaMode::DdpmEquivalent,
                    seed,
                };
                let mut times = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let started = Instant::now();
                    let _ = ensemble_sample(&net, window, &data.dataset.graph, &schedule, &cfg)?;
                    times.push(started.elapsed().as_secs_f64());
                }
                let med = median(&mut times);
                timings.insert((m, k, s), med);
                rows.push((m, k, s, s.div_ceil(k), med));
            }
        }
    }
    let mut outp = String::from("M,k,S,trajectories,median_seconds,speedup_vs_baseline\n");
    for (m, k, s, traj, med) in rows {
        let baseline = timings.get(&(m_max, 1, s)).copied().unwrap_or(med);
        outp.push_str(&format!("{},{},{},{},{},{}\n", m, k, s, traj, med, baseline / med));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("bench.csv"), outp)?;
    let mut effective = config.clone();
    effective.set("run.seed", &seed.to_string())?;
    write_echo(out, "bench-sampling", &effective)?;
    println!("bench-sampling: wrote {}", out.join("bench.csv").display());
    Ok(())
}
