//! Online policy runs and the throughput degradation study.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SlotFeatures;
use crate::harness::config::ExperimentConfig;
use crate::netsim::{AppClass, ChannelId, EventRow, SimState, SlotReport};
use crate::predictor::CnnModel;
use crate::probing::{make_probe_burst, ProbeConfig};
use crate::selector::{step, Policy, PolicyKind, SelectionState};
use crate::videostream::{packetize_gop, AbrTable};

/// One GoP of an online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GopLog {
    pub slot: u64,
    pub channel: usize,
    pub psnr: f64,
    pub switched: bool,
    /// Features observed on every channel in this slot, channel order.
    pub features: Vec<SlotFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub policy: PolicyKind,
    pub gops: Vec<GopLog>,
    /// Background accounting per slot, kept for cross-policy comparison.
    pub background: Vec<SlotReport>,
}

impl PolicyRun {
    pub fn mean_psnr(&self) -> f64 {
        if self.gops.is_empty() {
            return f64::NAN;
        }
        self.gops.iter().map(|g| g.psnr).sum::<f64>() / self.gops.len() as f64
    }

    pub fn switches(&self) -> usize {
        self.gops.iter().filter(|g| g.switched).count()
    }
}

/// Models the predictive policy needs.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub video: &'a CnnModel,
    pub probe: &'a CnnModel,
}

/// Runs `cfg.num_gops` slots under `policy` from the configured seed.
pub fn run_online(
    cfg: &ExperimentConfig,
    policy: PolicyKind,
    models: Option<Models<'_>>,
    table: &AbrTable,
) -> Result<PolicyRun> {
    run_online_inner(cfg, policy, models, table, false).map(|(run, _)| run)
}

/// [`run_online`] that also returns the delivery record of every injected
/// packet.
pub fn run_online_with_events(
    cfg: &ExperimentConfig,
    policy: PolicyKind,
    models: Option<Models<'_>>,
    table: &AbrTable,
) -> Result<(PolicyRun, Vec<EventRow>)> {
    run_online_inner(cfg, policy, models, table, true)
}

fn run_online_inner(
    cfg: &ExperimentConfig,
    policy: PolicyKind,
    models: Option<Models<'_>>,
    table: &AbrTable,
    log_events: bool,
) -> Result<(PolicyRun, Vec<EventRow>)> {
    cfg.validate()?;
    let policy = match policy {
        PolicyKind::Fixed => Policy::Fixed,
        PolicyKind::Delay => Policy::DelayBased,
        PolicyKind::Predictive => {
            let m = models.ok_or_else(|| Error::Config("predictive policy needs trained models".into()))?;
            for model in [m.video, m.probe] {
                if model.arch.history_len != cfg.history_len() {
                    return Err(Error::Config(format!(
                        "model history {} differs from configured history {}",
                        model.arch.history_len,
                        cfg.history_len()
                    )));
                }
            }
            Policy::Predictive {
                video: m.video,
                probe: m.probe,
            }
        }
        PolicyKind::Oracle => Policy::Oracle {
            window: cfg.oracle_window,
        },
        PolicyKind::Abr => Policy::Abr { table },
    };
    let mut sim = SimState::new(cfg.sim.clone())?;
    if log_events {
        sim.enable_event_log();
    }
    let mut state = SelectionState::new(
        sim.num_channels(),
        cfg.history_len(),
        ChannelId(cfg.initial_channel),
    )?;
    let setup = cfg.stream_setup();
    let mut gops = Vec::with_capacity(cfg.num_gops as usize);
    let mut background = Vec::with_capacity(cfg.num_gops as usize);
    for _ in 0..cfg.num_gops {
        let out = step(&policy, &mut sim, &mut state, &setup)?;
        gops.push(GopLog {
            slot: out.gop.gop_index,
            channel: out.channel.0,
            psnr: out.gop.psnr,
            switched: out.switched,
            features: out.features.iter().map(|(f, _)| *f).collect(),
        });
        background.push(out.report);
    }
    let run = PolicyRun {
        policy: policy.kind(),
        gops,
        background,
    };
    Ok((run, sim.event_log().map(<[EventRow]>::to_vec).unwrap_or_default()))
}

/// Traffic added to the measured channel in a degradation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "burst", rename_all = "snake_case")]
pub enum Injected {
    None,
    Probes(u32),
    Video,
}

impl Injected {
    pub fn label(&self) -> String {
        match self {
            Injected::None => "none".into(),
            Injected::Probes(b) => format!("probes_{b}"),
            Injected::Video => "video".into(),
        }
    }
}

impl std::str::FromStr for Injected {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Injected::None),
            "video" => Ok(Injected::Video),
            other => other
                .strip_prefix("probes")
                .map(|b| b.trim_start_matches(['_', ':', '=']))
                .and_then(|b| b.parse().ok())
                .filter(|&b| b > 0)
                .map(Injected::Probes)
                .ok_or_else(|| Error::Config(format!("unknown injected stream '{other}'"))),
        }
    }
}

/// Achieved background throughput of one class on the measured channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThroughput {
    pub app_class: AppClass,
    pub bps: f64,
}

/// Mean achieved throughput per application class on `cfg.initial_channel`.
pub fn class_throughput(cfg: &ExperimentConfig, injected: Injected) -> Result<Vec<ClassThroughput>> {
    cfg.validate()?;
    let channel = ChannelId(cfg.initial_channel);
    let mut sim = SimState::new(cfg.sim.clone())?;
    let mut bits = vec![0.0; AppClass::ALL.len()];
    let g = cfg.sim.gop_duration;
    for _ in 0..cfg.num_gops {
        let p = sim.slot();
        let start = sim.slot_start();
        let deadline = start + g - cfg.deadline_allowance;
        let packets = match injected {
            Injected::None => Vec::new(),
            Injected::Probes(b) => make_probe_burst(
                p,
                start,
                deadline,
                &ProbeConfig {
                    burst_size: b,
                    ..cfg.probe.clone()
                },
            ),
            Injected::Video => packetize_gop(p, &cfg.video, start, deadline, cfg.sim.seed),
        };
        sim.transmit_burst(channel, &packets)?;
        let report = sim.advance_gop();
        for f in &report.flows[channel.index()] {
            bits[class_index(f.app_class)] += f.achieved_bps * g;
        }
    }
    let elapsed = cfg.num_gops as f64 * g;
    Ok(AppClass::ALL
        .iter()
        .zip(bits)
        .map(|(&app_class, b)| ClassThroughput {
            app_class,
            bps: b / elapsed,
        })
        .collect())
}

fn class_index(c: AppClass) -> usize {
    AppClass::ALL.iter().position(|&x| x == c).expect("listed class")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub injected: Injected,
    pub app_class: AppClass,
    pub baseline_bps: f64,
    pub injected_bps: f64,
    /// Percent loss; `None` when the class carried nothing without injection.
    pub loss_pct: Option<f64>,
}

/// Background throughput loss caused by each injected stream, relative to a
/// run without injection.
pub fn measure_degradation(cfg: &ExperimentConfig, injected: &[Injected]) -> Result<Vec<DegradationRow>> {
    let baseline = class_throughput(cfg, Injected::None)?;
    let mut rows = Vec::new();
    for &inj in injected {
        let with = if inj == Injected::None {
            baseline.clone()
        } else {
            class_throughput(cfg, inj)?
        };
        for (b, w) in baseline.iter().zip(&with) {
            let loss_pct = (b.bps > 0.0).then(|| 100.0 * (b.bps - w.bps) / b.bps);
            rows.push(DegradationRow {
                injected: inj,
                app_class: b.app_class,
                baseline_bps: b.bps,
                injected_bps: w.bps,
                loss_pct,
            });
        }
    }
    Ok(rows)
}

/// Throughput-weighted loss over all classes for one injected stream.
pub fn aggregate_loss(rows: &[DegradationRow], injected: Injected) -> Option<f64> {
    let (base, with) = rows
        .iter()
        .filter(|r| r.injected == injected)
        .fold((0.0, 0.0), |(b, w), r| (b + r.baseline_bps, w + r.injected_bps));
    (base > 0.0).then(|| 100.0 * (base - with) / base)
}
