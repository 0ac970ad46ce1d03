use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use streamtse_core::bench::{ablate_cost, bench_rtf, eval_isr, selftest, RtfConfig};
use streamtse_core::codec::{correlation, HistoryDepth};
use streamtse_core::engine::{run_session, FaultPlan, ModelBundle, SessionConfig};
use streamtse_core::frontend::{read_wav, synth_scene_with_reference, write_wav, SynthScene};
use streamtse_core::layout::Strategy;
use streamtse_core::model::ModelConfig;
use streamtse_core::train::{train_toy, Optimizer, ToyConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "streamtse", version, about = "Streaming target speaker extraction toolkit")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// Chunk duration in milliseconds (multiple of 40).
    #[arg(long, global = true, default_value_t = 560)]
    chunk_ms: u32,
    /// Acoustic layout strategy: interleaved, sequential or ref-only.
    #[arg(long, global = true, default_value = "interleaved")]
    strategy: Strategy,
    /// Decoder history: none, one or full.
    #[arg(long, global = true, default_value = "one")]
    history: HistoryDepth,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 32)]
    model_dim: usize,
    /// Layers in the encoder and in each language model.
    #[arg(long, global = true, default_value_t = 1)]
    layers: usize,
    /// Load model parameters from this checkpoint instead of initialising.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output path (report JSON, or audio for `extract`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract the reference speaker from a mixture.
    Extract {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Where to write the session report (stdout if omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure the real-time factor on a synthetic mixture.
    BenchRtf {
        #[arg(long, default_value_t = 5.6)]
        duration_s: f64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value = "unspecified")]
        hardware_label: String,
        /// Extra sleep per chunk as a fraction of the chunk duration.
        #[arg(long, default_value_t = 0.0)]
        inject_delay: f64,
    },
    /// Inference success rate over synthetic scenes with fault injection.
    EvalIsr {
        #[arg(long, default_value_t = 4)]
        runs: usize,
        /// Number of runs (the first ones) forced to emit the end token.
        #[arg(long, default_value_t = 0)]
        faults: usize,
        /// Step at which injected faults fire.
        #[arg(long, default_value_t = 1)]
        fault_step: usize,
        #[arg(long, default_value_t = 2240)]
        duration_ms: u32,
        #[arg(long)]
        parallel: bool,
    },
    /// Cache cost per step for each strategy, measured and predicted.
    AblateCost {
        #[arg(long, value_delimiter = ',', default_value = "80,160,400,560,800,2000")]
        chunks: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "interleaved,sequential,ref-only")]
        strategies: Vec<Strategy>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Train a micro model on one synthetic scene and save a checkpoint.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long)]
        adam: bool,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        /// Training log, one JSON line per step.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the training scene as mixture/reference/target WAVs here.
        #[arg(long)]
        scene_dir: Option<PathBuf>,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Selftest,
}

fn load_model(shared: &Shared) -> Result<ModelBundle> {
    match &shared.checkpoint {
        Some(path) => ModelBundle::load(path).with_context(|| format!("loading {}", path.display())),
        None => {
            let cfg = ModelConfig { seed: shared.seed, ..ModelConfig::default() }.with_dim(shared.model_dim).with_layers(shared.layers);
            Ok(ModelBundle::new(cfg)?)
        }
    }
}

fn session_config(shared: &Shared) -> SessionConfig {
    SessionConfig::new(shared.chunk_ms, shared.strategy, shared.history)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let shared = &cli.shared;
    match cli.command {
        Command::Extract { mixture, reference, report } => {
            let out = shared.out.as_deref().context("extract needs --out for the audio")?;
            let bundle = load_model(shared)?;
            let mix = read_wav(&mixture).with_context(|| format!("reading {}", mixture.display()))?;
            let reference = read_wav(&reference).with_context(|| format!("reading {}", reference.display()))?;
            let (wave, rep, _) = run_session(&bundle, session_config(shared), &reference, &mix)?;
            write_wav(out, &wave)?;
            emit(&rep, report.as_deref())?;
        }
        Command::BenchRtf { duration_s, repeats, hardware_label, inject_delay } => {
            let bundle = load_model(shared)?;
            let cfg = RtfConfig {
                session: session_config(shared),
                duration_s,
                repeats,
                seed: shared.seed,
                injected_delay: inject_delay,
                hardware_label,
                ..RtfConfig::default()
            };
            emit(&bench_rtf(&bundle, &cfg)?, shared.out.as_deref())?;
        }
        Command::EvalIsr { runs, faults, fault_step, duration_ms, parallel } => {
            if faults > runs {
                bail!("{faults} faults requested for {runs} runs");
            }
            let bundle = load_model(shared)?;
            let scenes: Vec<SynthScene> =
                (0..runs as u64).map(|i| synth_scene_with_reference(shared.seed + i, duration_ms, 1000, 2.5)).collect();
            let plans: Vec<FaultPlan> =
                (0..runs).map(|i| if i < faults { FaultPlan::at_steps([fault_step]) } else { FaultPlan::none() }).collect();
            emit(&eval_isr(&bundle, &session_config(shared), &scenes, &plans, parallel)?, shared.out.as_deref())?;
        }
        Command::AblateCost { chunks, strategies, steps } => {
            let bundle = load_model(shared)?;
            let table = ablate_cost(&bundle, &chunks, &strategies, steps, shared.seed)?;
            emit(&table, shared.out.as_deref())?;
            return Ok(table.all_match());
        }
        Command::TrainToy { iterations, lr, adam, lambda1, lambda2, log, scene_dir } => {
            let out = shared.out.as_deref().context("train-toy needs --out for the checkpoint")?;
            let defaults = ToyConfig::default();
            let cfg = ToyConfig {
                model: ModelConfig { seed: shared.seed, ..defaults.model.clone() }.with_dim(shared.model_dim).with_layers(shared.layers),
                train: TrainConfig { lr, lambda1, lambda2, optimizer: if adam { Optimizer::adam() } else { Optimizer::Gd }, ..TrainConfig::default() },
                iterations,
                ..defaults
            };
            let mut writer = log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
            let mut io_err = None;
            let toy = train_toy(&cfg, |line| {
                if let Some(w) = writer.as_mut() {
                    if let Err(e) = serde_json::to_writer(&mut *w, line).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(w)?)) {
                        io_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            let bundle = ModelBundle::with_params(toy.trainer.config.clone(), toy.trainer.params.clone())?;
            bundle.save(out)?;
            let scene = &toy.batch.scenes[0].scene;
            let config = SessionConfig::new(cfg.chunk_ms, shared.strategy, shared.history);
            let (wave, _, _) = run_session(&bundle, config, &scene.reference, &scene.mixture)?;
            if let Some(dir) = scene_dir {
                std::fs::create_dir_all(&dir)?;
                write_wav(&dir.join("mixture.wav"), &scene.mixture)?;
                write_wav(&dir.join("reference.wav"), &scene.reference)?;
                write_wav(&dir.join("target.wav"), &scene.target)?;
                write_wav(&dir.join("interferer.wav"), &scene.interferer)?;
            }
            let first = toy.log.first().map_or(f64::NAN, |l| l.total);
            let last = toy.log.last().map_or(f64::NAN, |l| l.total);
            emit(
                &serde_json::json!({
                    "iterations": iterations,
                    "initial_total": first,
                    "final_total": last,
                    "ratio": last / first,
                    "corr_target": correlation(wave.samples(), scene.target.samples()),
                    "corr_interferer": correlation(wave.samples(), scene.interferer.samples()),
                    "chunk_ms": cfg.chunk_ms,
                }),
                None,
            )?;
        }
        Command::Selftest => {
            let report = selftest(shared.seed);
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            emit(&report, shared.out.as_deref())?;
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
