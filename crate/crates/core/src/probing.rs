//! Probe trains sent on the channels that are not carrying the video.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{ChannelId, DeliveryRecord, PacketKind, PacketSpec, SimState};

/// Flow id carried by probe packets.
pub const PROBE_FLOW_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Packets per GoP slot.
    pub burst_size: u32,
    /// Bytes per probe packet.
    pub packet_size: u32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            burst_size: 50,
            packet_size: 100,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burst_size < 1 || self.packet_size < 1 {
            return Err(Error::Config(
                "probe burst_size and packet_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn bytes_per_slot(&self) -> u64 {
        u64::from(self.burst_size) * u64::from(self.packet_size)
    }
}

/// Back-to-back train of `burst_size` probes at the start of slot `p`.
pub fn make_probe_burst(p: u64, slot_start: f64, deadline: f64, cfg: &ProbeConfig) -> Vec<PacketSpec> {
    (0..cfg.burst_size)
        .map(|_| PacketSpec {
            injection_time: slot_start,
            size: cfg.packet_size,
            kind: PacketKind::Probe,
            gop_index: p,
            flow_id: PROBE_FLOW_ID,
            deadline,
        })
        .collect()
}

/// Probes every channel except `video_channel` in the open slot.
pub fn schedule_probes(
    sim: &mut SimState,
    video_channel: ChannelId,
    deadline: f64,
    cfg: &ProbeConfig,
) -> Result<BTreeMap<ChannelId, Vec<DeliveryRecord>>> {
    sim.channel(video_channel)?;
    let burst = make_probe_burst(sim.slot(), sim.slot_start(), deadline, cfg);
    let targets: Vec<ChannelId> = sim.channel_ids().filter(|&c| c != video_channel).collect();
    let mut out = BTreeMap::new();
    for channel in targets {
        out.insert(channel, sim.transmit_burst(channel, &burst)?);
    }
    Ok(out)
}
