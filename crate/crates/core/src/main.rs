use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use probesel::harness::report::{write_degradation, DEGRADATION_CSV};
use probesel::harness::training::{write_ablation, ABLATION_CSV};
use probesel::harness::{
    ablate_offline, gen_dataset, load_models, measure_degradation, report, run_online, run_online_with_events,
    train_models, AblationAxis, Datasets, ExperimentConfig, Injected, Models, ResultBundle,
};
use probesel::netsim::write_event_log;
use probesel::selector::PolicyKind;
use probesel::videostream::AbrTable;

#[derive(Parser)]
#[command(name = "probesel", version, about = "Probe-driven channel selection for video streaming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; environment variables override its keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and write the video and probe datasets.
    GenDataset(Common),
    /// Train both classifiers on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding video.csv, probe.csv and dataset_meta.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Accuracy of both classifiers along one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// probe_burst or history.
        #[arg(long)]
        axis: AblationAxis,
        /// Axis values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        points: Vec<usize>,
    },
    /// Run one policy, or all of them, and write per-GoP logs and CDFs.
    RunOnline {
        #[command(flatten)]
        common: Common,
        /// Policy name or "all"; defaults to run.policy.
        #[arg(long)]
        policy: Option<String>,
        /// Directory with video_model.json and probe_model.json.
        #[arg(long)]
        models: Option<PathBuf>,
        /// ABR rate table CSV; the built-in table is used otherwise.
        #[arg(long)]
        abr_table: Option<PathBuf>,
        /// Also write the delivery log of every injected packet.
        #[arg(long)]
        event_log: bool,
    },
    /// Background throughput loss caused by injected streams.
    Degradation {
        #[command(flatten)]
        common: Common,
        /// Injected streams: none, video, probes_<burst>.
        #[arg(long, value_delimiter = ',', default_value = "none,probes_10,video")]
        injected: Vec<Injected>,
    },
    /// Every policy, the degradation table and training accuracy in one summary.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        abr_table: Option<PathBuf>,
    },
}

fn config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref()).context("loading configuration")
}

fn abr_table(path: Option<&Path>) -> anyhow::Result<AbrTable> {
    Ok(match path {
        Some(p) => AbrTable::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => AbrTable::shipped(),
    })
}

fn policies(name: Option<&str>, cfg: &ExperimentConfig) -> anyhow::Result<Vec<PolicyKind>> {
    Ok(match name {
        Some("all") => PolicyKind::ALL.to_vec(),
        Some(n) => vec![n.parse()?],
        None => vec![cfg.policy],
    })
}

fn run_policies(
    cfg: &ExperimentConfig,
    kinds: &[PolicyKind],
    models: Option<&Path>,
    table: &AbrTable,
    out: &Path,
    event_log: bool,
) -> anyhow::Result<ResultBundle> {
    let loaded = match models {
        Some(dir) => Some(load_models(dir).with_context(|| format!("loading models from {}", dir.display()))?),
        None => None,
    };
    let models = loaded.as_ref().map(|(video, probe)| Models { video, probe });
    let mut bundle = ResultBundle {
        seed: cfg.sim.seed,
        ..ResultBundle::default()
    };
    std::fs::create_dir_all(out)?;
    for &kind in kinds {
        let run = if event_log {
            let (run, events) = run_online_with_events(cfg, kind, models, table)?;
            write_event_log(&events, BufWriter::new(File::create(out.join(format!("events_{kind}.csv")))?))?;
            run
        } else {
            run_online(cfg, kind, models, table)?
        };
        log::info!("{kind}: mean PSNR {:.3} dB, {} switches", run.mean_psnr(), run.switches());
        bundle.runs.push(run);
    }
    Ok(bundle)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenDataset(common) => {
            let cfg = config(&common)?;
            gen_dataset(&cfg)?.write(&common.out)?;
        }
        Command::Train { common, data } => {
            let cfg = config(&common)?;
            let datasets = Datasets::read(&data).with_context(|| format!("reading datasets from {}", data.display()))?;
            train_models(&cfg, &datasets)?.write(&common.out)?;
        }
        Command::Ablate { common, axis, points } => {
            let cfg = config(&common)?;
            let points = if points.is_empty() { axis.default_points() } else { points };
            let rows = ablate_offline(&cfg, axis, &points)?;
            std::fs::create_dir_all(&common.out)?;
            write_ablation(&rows, BufWriter::new(File::create(common.out.join(ABLATION_CSV))?))?;
        }
        Command::RunOnline {
            common,
            policy,
            models,
            abr_table: table,
            event_log,
        } => {
            let cfg = config(&common)?;
            let kinds = policies(policy.as_deref(), &cfg)?;
            let table = abr_table(table.as_deref())?;
            let bundle = run_policies(&cfg, &kinds, models.as_deref(), &table, &common.out, event_log)?;
            report(&bundle, &common.out)?;
        }
        Command::Degradation { common, injected } => {
            let cfg = config(&common)?;
            let rows = measure_degradation(&cfg, &injected)?;
            std::fs::create_dir_all(&common.out)?;
            write_degradation(&rows, BufWriter::new(File::create(common.out.join(DEGRADATION_CSV))?))?;
        }
        Command::Report {
            common,
            models,
            abr_table: table,
        } => {
            let cfg = config(&common)?;
            let table = abr_table(table.as_deref())?;
            let mut bundle = run_policies(&cfg, &PolicyKind::ALL, Some(&models), &table, &common.out, false)?;
            let train_report = std::fs::read_to_string(models.join(probesel::harness::training::TRAIN_REPORT))
                .ok()
                .map(|s| serde_json::from_str(&s))
                .transpose()?;
            bundle.accuracy = train_report;
            bundle.degradation = measure_degradation(&cfg, &[Injected::None, Injected::Probes(10), Injected::Video])?;
            let summary = report(&bundle, &common.out)?;
            for p in &summary.policies {
                println!("{:<10} {:>8.3} dB", p.policy.as_str(), p.mean_psnr);
            }
        }
    }
    Ok(())
}
