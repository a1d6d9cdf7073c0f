//! Per-GoP channel selection.
//!
//! [`step`] runs one GoP: it picks a channel from information gathered in
//! earlier slots only, sends the video there and probes everywhere else, then
//! folds the new observations into the [`SelectionState`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    build_feature_matrix, extract_slot_features, FeatureMatrix, History, SlotFeatures, Source, NUM_FEATURES,
};
use crate::netsim::{ChannelId, SimState, SlotReport};
use crate::predictor::Scorer;
use crate::probing::{schedule_probes, ProbeConfig};
use crate::videostream::{
    abr_select, compute_psnr, packetize_gop, packetize_rate, AbrTable, EncoderProfile, GopOutcome,
    PsnrModel,
};

/// First index holding the maximum; `None` for an empty slice.
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Channel with the highest soft score; ties go to the lowest index.
pub fn select_predictive(scores: &[f64]) -> Result<ChannelId> {
    argmax(scores)
        .map(ChannelId::from_index)
        .ok_or(Error::Empty("channel scores"))
}

/// Channel with the smallest last-slot average delay; ties go to the lowest
/// index.
pub fn select_delay_based(delays: &[f64]) -> Result<ChannelId> {
    let negated: Vec<f64> = delays.iter().map(|d| -d).collect();
    argmax(&negated)
        .map(ChannelId::from_index)
        .ok_or(Error::Empty("channel delays"))
}

/// Channel with the best mean PSNR over its window of (counterfactual) future
/// GoPs; ties go to the lowest index.
pub fn select_oracle(windows: &[Vec<f64>]) -> Result<ChannelId> {
    let first = windows.first().ok_or(Error::Empty("oracle windows"))?;
    if first.is_empty() {
        return Err(Error::Empty("oracle window"));
    }
    if let Some(bad) = windows.iter().find(|w| w.len() != first.len()) {
        return Err(Error::Length {
            what: "oracle window",
            expected: first.len(),
            got: bad.len(),
        });
    }
    let means: Vec<f64> = windows
        .iter()
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    Ok(ChannelId::from_index(argmax(&means).expect("non-empty")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Fixed,
    Delay,
    Predictive,
    Oracle,
    Abr,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Fixed,
        PolicyKind::Delay,
        PolicyKind::Predictive,
        PolicyKind::Oracle,
        PolicyKind::Abr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Fixed => "fixed",
            PolicyKind::Delay => "delay",
            PolicyKind::Predictive => "predictive",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Abr => "abr",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy '{s}' (expected fixed, delay, predictive, oracle or abr)"
                ))
            })
    }
}

/// A selection policy together with whatever it needs at decision time.
pub enum Policy<'a> {
    /// Stays on the current channel.
    Fixed,
    DelayBased,
    /// The current channel is scored by `video`, all others by `probe`.
    Predictive {
        video: &'a dyn Scorer,
        probe: &'a dyn Scorer,
    },
    /// Reads the counterfactual PSNR of the next `window` GoPs on every channel.
    Oracle { window: usize },
    /// Fixed channel, encoding bitrate matched to the known available
    /// throughput of every slot.
    Abr { table: &'a AbrTable },
}

impl Policy<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Fixed => PolicyKind::Fixed,
            Policy::DelayBased => PolicyKind::Delay,
            Policy::Predictive { .. } => PolicyKind::Predictive,
            Policy::Oracle { .. } => PolicyKind::Oracle,
            Policy::Abr { .. } => PolicyKind::Abr,
        }
    }
}

/// Stream parameters shared by every step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSetup {
    pub profile: EncoderProfile,
    pub probe: ProbeConfig,
    pub psnr: PsnrModel,
    /// Deadline reduction that leaves room for inference, seconds.
    pub deadline_allowance: f64,
    /// Master seed of the packetization stream.
    pub seed: u64,
}

impl StreamSetup {
    pub fn deadline(&self, sim: &SimState) -> f64 {
        sim.slot_end() - self.deadline_allowance
    }
}

#[derive(Debug, Clone)]
pub struct SelectionState {
    current: ChannelId,
    histories: Vec<History>,
    scores: Vec<Option<f64>>,
    slots_observed: u64,
    history_len: usize,
}

impl SelectionState {
    pub fn new(num_channels: usize, history_len: usize, initial: ChannelId) -> Result<Self> {
        if initial.0 == 0 || initial.0 > num_channels {
            return Err(Error::UnknownChannel {
                channel: initial.0,
                count: num_channels,
            });
        }
        Ok(SelectionState {
            current: initial,
            histories: (0..num_channels).map(|_| History::new(history_len)).collect(),
            scores: vec![None; num_channels],
            slots_observed: 0,
            history_len,
        })
    }

    pub fn current(&self) -> ChannelId {
        self.current
    }

    pub fn history(&self, channel: ChannelId) -> &History {
        &self.histories[channel.index()]
    }

    pub fn scores(&self) -> &[Option<f64>] {
        &self.scores
    }

    /// Still filling the feature histories.
    pub fn warming_up(&self) -> bool {
        self.slots_observed < (self.history_len + 1) as u64
    }

    fn refresh_scores(&mut self, video: &dyn Scorer, probe: &dyn Scorer) -> Result<()> {
        for (score, hist) in self.scores.iter_mut().zip(&self.histories) {
            *score = match hist.latest() {
                Some((_, Source::Video)) => aligned_matrix(hist, Source::Video, video, probe)?
                    .map(|m| video.score(&m))
                    .transpose()?,
                Some((_, Source::Probe)) => aligned_matrix(hist, Source::Probe, probe, video)?
                    .map(|m| probe.score(&m))
                    .transpose()?,
                None => None,
            };
        }
        Ok(())
    }
}

/// History matrix with slots of the other source mapped onto the target
/// scorer's feature scale by matching z-scores.
fn aligned_matrix(
    hist: &History,
    target: Source,
    target_scorer: &dyn Scorer,
    other_scorer: &dyn Scorer,
) -> Result<Option<FeatureMatrix>> {
    if !hist.is_full() {
        return Ok(None);
    }
    let stats = target_scorer.norm().zip(other_scorer.norm());
    let slots: Vec<SlotFeatures> = hist
        .slots()
        .map(|(f, src)| match stats {
            Some((to, from)) if *src != target => {
                let x = f.as_array();
                let y: [f64; NUM_FEATURES] = std::array::from_fn(|r| {
                    if from.std[r] > 0.0 {
                        to.mean[r] + (x[r] - from.mean[r]) / from.std[r] * to.std[r]
                    } else {
                        to.mean[r]
                    }
                });
                SlotFeatures {
                    avg_delay: y[0],
                    delay_variance: y[1],
                    loss_fraction: y[2],
                }
            }
            _ => *f,
        })
        .collect();
    build_feature_matrix(&slots, hist.len() - 1).map(Some)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub channel: ChannelId,
    pub switched: bool,
    pub gop: GopOutcome,
    /// Features observed in this slot, per channel.
    pub features: Vec<(SlotFeatures, Source)>,
    pub report: SlotReport,
}

/// Runs GoP `sim.slot()` under `policy`.
pub fn step(
    policy: &Policy<'_>,
    sim: &mut SimState,
    state: &mut SelectionState,
    setup: &StreamSetup,
) -> Result<StepOutcome> {
    let p = sim.slot();
    let start = sim.slot_start();
    let deadline = setup.deadline(sim);
    let gop_duration = sim.config().gop_duration;

    let previous = state.current;
    let chosen = if state.warming_up() {
        previous
    } else {
        match policy {
            Policy::Fixed | Policy::Abr { .. } => previous,
            Policy::DelayBased => {
                let delays: Vec<f64> = state
                    .histories
                    .iter()
                    .map(|h| h.latest().map_or(f64::INFINITY, |(f, _)| f.avg_delay))
                    .collect();
                select_delay_based(&delays)?
            }
            Policy::Predictive { .. } => {
                let scores: Option<Vec<f64>> = state.scores.iter().copied().collect();
                match scores {
                    Some(s) => select_predictive(&s)?,
                    None => previous,
                }
            }
            Policy::Oracle { window } => {
                let windows = oracle_windows(sim, setup, *window)?;
                select_oracle(&windows)?
            }
        }
    };
    state.current = chosen;

    let (records, psnr) = match policy {
        Policy::Abr { table } => {
            let tier = abr_select(sim.available_throughput(chosen)?, table);
            let packets = packetize_rate(p, tier.bitrate_bps, gop_duration, &setup.profile, start, deadline);
            (sim.transmit_burst(chosen, &packets)?, tier.avg_psnr_db)
        }
        _ => {
            let packets = packetize_gop(p, &setup.profile, start, deadline, setup.seed);
            let records = sim.transmit_burst(chosen, &packets)?;
            let psnr = compute_psnr(&records, &setup.psnr)?;
            (records, psnr)
        }
    };
    let probes = schedule_probes(sim, chosen, deadline, &setup.probe)?;

    let mut features = Vec::with_capacity(sim.num_channels());
    for id in sim.channel_ids() {
        let (recs, source) = if id == chosen {
            (&records, Source::Video)
        } else {
            (&probes[&id], Source::Probe)
        };
        let f = extract_slot_features(recs, gop_duration)?;
        state.histories[id.index()].push(f, source);
        features.push((f, source));
    }
    let report = sim.advance_gop();
    state.slots_observed += 1;

    if let Policy::Predictive { video, probe } = policy {
        state.refresh_scores(*video, *probe)?;
    }

    Ok(StepOutcome {
        channel: chosen,
        switched: chosen != previous,
        gop: GopOutcome {
            gop_index: p,
            records,
            psnr,
        },
        features,
        report,
    })
}

/// Counterfactual PSNR of the next `window` GoPs, video moved to each channel
/// from the open slot onwards.
pub fn oracle_windows(sim: &SimState, setup: &StreamSetup, window: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 {
        return Err(Error::Config("oracle window must be at least 1".into()));
    }
    let g = sim.config().gop_duration;
    let p0 = sim.slot();
    let bursts: Vec<_> = (0..window as u64)
        .map(|k| {
            let p = p0 + k;
            let start = p as f64 * g;
            let deadline = (p + 1) as f64 * g - setup.deadline_allowance;
            packetize_gop(p, &setup.profile, start, deadline, setup.seed)
        })
        .collect();
    sim.channel_ids()
        .map(|id| {
            sim.counterfactual_horizon(id, &bursts)?
                .iter()
                .map(|recs| compute_psnr(recs, &setup.psnr))
                .collect()
        })
        .collect()
}
