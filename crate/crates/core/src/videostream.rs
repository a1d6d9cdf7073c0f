//! GoP packetization, the delivery-outcome to PSNR model and the ABR table.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{DeliveryRecord, PacketKind, PacketSpec};
use crate::rng::{stream_rng, Stream};

/// Flow id carried by video packets.
pub const VIDEO_FLOW_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub frames_per_gop: u32,
    pub ref_frame_packets: u32,
    /// Bytes per video packet.
    pub packet_size: u32,
    pub diff_frame_packets_min: u32,
    pub diff_frame_packets_max: u32,
    /// Frames per second.
    pub frame_rate: f64,
}

impl Default for EncoderProfile {
    fn default() -> Self {
        EncoderProfile {
            frames_per_gop: 30,
            ref_frame_packets: 42,
            packet_size: 1400,
            diff_frame_packets_min: 2,
            diff_frame_packets_max: 4,
            frame_rate: 30.0,
        }
    }
}

impl EncoderProfile {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_gop < 1 {
            return Err(Error::Config("frames_per_gop must be at least 1".into()));
        }
        if self.ref_frame_packets < 1 {
            return Err(Error::Config("ref_frame_packets must be at least 1".into()));
        }
        if self.packet_size < 1 {
            return Err(Error::Config("video packet_size must be positive".into()));
        }
        if !(1 <= self.diff_frame_packets_min
            && self.diff_frame_packets_min <= self.diff_frame_packets_max)
        {
            return Err(Error::Config(
                "differential packet counts need 1 <= min <= max".into(),
            ));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        Ok(())
    }

    /// Smallest and largest possible packet count of one GoP.
    pub fn packet_count_bounds(&self) -> (u32, u32) {
        let diff_frames = self.frames_per_gop - 1;
        (
            self.ref_frame_packets + diff_frames * self.diff_frame_packets_min,
            self.ref_frame_packets + diff_frames * self.diff_frame_packets_max,
        )
    }
}

/// Packets of GoP `p`. Frame `i` is injected at `slot_start + i / frame_rate`;
/// the differential burst sizes come from the GoP's own random stream, so a
/// GoP is identical wherever and however often it is packetized.
pub fn packetize_gop(
    p: u64,
    profile: &EncoderProfile,
    slot_start: f64,
    deadline: f64,
    seed: u64,
) -> Vec<PacketSpec> {
    let mut rng = stream_rng(seed, Stream::Packetize, p);
    let mut packets = Vec::with_capacity(profile.packet_count_bounds().1 as usize);
    for frame in 0..profile.frames_per_gop {
        let t = slot_start + f64::from(frame) / profile.frame_rate;
        let (count, kind) = if frame == 0 {
            (profile.ref_frame_packets, PacketKind::Reference)
        } else {
            (
                rng.random_range(profile.diff_frame_packets_min..=profile.diff_frame_packets_max),
                PacketKind::Differential,
            )
        };
        packets.extend((0..count).map(|_| PacketSpec {
            injection_time: t,
            size: profile.packet_size,
            kind,
            gop_index: p,
            flow_id: VIDEO_FLOW_ID,
            deadline,
        }));
    }
    packets
}

/// Constant-bitrate GoP for the ABR baseline: `bitrate * gop_duration` bits
/// spread evenly over the frames.
pub fn packetize_rate(
    p: u64,
    bitrate: f64,
    gop_duration: f64,
    profile: &EncoderProfile,
    slot_start: f64,
    deadline: f64,
) -> Vec<PacketSpec> {
    let bytes = bitrate * gop_duration / 8.0;
    let total = (bytes / f64::from(profile.packet_size)).ceil().max(1.0) as u32;
    let frames = profile.frames_per_gop;
    (0..total)
        .map(|k| {
            let frame = k % frames;
            PacketSpec {
                injection_time: slot_start + f64::from(frame) / profile.frame_rate,
                size: profile.packet_size,
                kind: if frame == 0 {
                    PacketKind::Reference
                } else {
                    PacketKind::Differential
                },
                gop_index: p,
                flow_id: VIDEO_FLOW_ID,
                deadline,
            }
        })
        .collect()
}

/// Linear loss-penalty PSNR model, clamped to `[psnr_min, psnr_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrModel {
    pub psnr_max: f64,
    pub psnr_min: f64,
    /// dB per lost reference packet.
    pub w_ref: f64,
    /// dB per lost differential packet.
    pub w_diff: f64,
}

impl Default for PsnrModel {
    fn default() -> Self {
        PsnrModel {
            psnr_max: 55.0,
            psnr_min: 15.0,
            w_ref: 1.5,
            w_diff: 0.5,
        }
    }
}

impl PsnrModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.psnr_max > self.psnr_min) {
            return Err(Error::Config("psnr_max must exceed psnr_min".into()));
        }
        if !(self.w_ref > 0.0 && self.w_diff > 0.0) {
            return Err(Error::Config("PSNR loss weights must be positive".into()));
        }
        Ok(())
    }

    pub fn psnr_from_losses(&self, ref_lost: usize, diff_lost: usize) -> f64 {
        let raw = self.psnr_max - self.w_ref * ref_lost as f64 - self.w_diff * diff_lost as f64;
        raw.clamp(self.psnr_min, self.psnr_max)
    }
}

/// PSNR of one GoP from its packets' delivery flags. Late packets count as
/// lost; probe and background records are ignored.
pub fn compute_psnr(records: &[DeliveryRecord], model: &PsnrModel) -> Result<f64> {
    if let Some(first) = records.first() {
        let gop = first.packet.gop_index;
        if let Some(other) = records.iter().find(|r| r.packet.gop_index != gop) {
            return Err(Error::MixedGop {
                first: gop,
                other: other.packet.gop_index,
            });
        }
    }
    let lost = |kind| {
        records
            .iter()
            .filter(|r| r.packet.kind == kind && !r.delivered)
            .count()
    };
    Ok(model.psnr_from_losses(lost(PacketKind::Reference), lost(PacketKind::Differential)))
}

/// Delivery summary of one GoP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GopOutcome {
    pub gop_index: u64,
    pub records: Vec<DeliveryRecord>,
    pub psnr: f64,
}

impl GopOutcome {
    pub fn from_records(
        gop_index: u64,
        records: Vec<DeliveryRecord>,
        model: &PsnrModel,
    ) -> Result<Self> {
        let psnr = compute_psnr(&records, model)?;
        Ok(GopOutcome {
            gop_index,
            records,
            psnr,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbrTier {
    pub bitrate_bps: f64,
    pub file_size_bytes: u64,
    pub avg_psnr_db: f64,
}

/// Encoding bitrate to file size and achievable PSNR, highest bitrate first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbrTable {
    tiers: Vec<AbrTier>,
}

const SHIPPED_ABR_TABLE: &str = include_str!("../data/abr_table.csv");

impl AbrTable {
    pub fn new(mut tiers: Vec<AbrTier>) -> Result<Self> {
        if tiers.is_empty() {
            return Err(Error::Empty("ABR table"));
        }
        tiers.sort_by(|a, b| b.bitrate_bps.total_cmp(&a.bitrate_bps));
        for pair in tiers.windows(2) {
            if pair[0].bitrate_bps == pair[1].bitrate_bps {
                return Err(Error::Config("duplicate ABR bitrate".into()));
            }
            if pair[1].avg_psnr_db > pair[0].avg_psnr_db {
                return Err(Error::Config(
                    "ABR PSNR must not increase as bitrate decreases".into(),
                ));
            }
        }
        Ok(AbrTable { tiers })
    }

    /// The seven-tier table bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_csv(SHIPPED_ABR_TABLE.as_bytes()).expect("bundled ABR table is valid")
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["bitrate_bps", "file_size_bytes", "avg_psnr_db"];
        if headers.iter().ne(expected) {
            return Err(Error::Parse(format!(
                "ABR table header must be {}",
                expected.join(",")
            )));
        }
        let tiers = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<AbrTier>, _>>()?;
        Self::new(tiers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn tiers(&self) -> &[AbrTier] {
        &self.tiers
    }

    pub fn lowest(&self) -> &AbrTier {
        self.tiers.last().expect("non-empty")
    }
}

/// Highest tier whose bitrate fits the throughput, else the lowest tier.
pub fn abr_select(predicted_throughput: f64, table: &AbrTable) -> &AbrTier {
    table
        .tiers
        .iter()
        .find(|t| t.bitrate_bps <= predicted_throughput)
        .unwrap_or_else(|| table.lowest())
}
