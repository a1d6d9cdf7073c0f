//! Labelled dataset generation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    extract_slot_features, label_window, FeatureMatrix, History, LabelConfig, NormStats, Source,
    NUM_FEATURES,
};
use crate::harness::config::ExperimentConfig;
use crate::netsim::{ChannelId, PacketSpec, SimState};
use crate::probing::{schedule_probes, ProbeConfig};
use crate::videostream::{compute_psnr, packetize_gop};

pub const VIDEO_CSV: &str = "video.csv";
pub const PROBE_CSV: &str = "probe.csv";
pub const META_JSON: &str = "dataset_meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    /// Newest slot of the feature history.
    pub gop_index: u64,
    pub channel: ChannelId,
    pub source: Source,
    pub matrix: FeatureMatrix,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub history_len: usize,
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn new(history_len: usize) -> Self {
        Dataset {
            history_len,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fraction of rows labelled 1.
    pub fn positive_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.label == 1).count() as f64 / self.rows.len() as f64
    }

    pub fn samples(&self) -> Vec<(FeatureMatrix, u8)> {
        self.rows.iter().map(|r| (r.matrix.clone(), r.label)).collect()
    }

    /// Same rows with the history cut down to `history_len`.
    pub fn truncated(&self, history_len: usize) -> Result<Dataset> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                Ok(DatasetRow {
                    matrix: r.matrix.truncated(history_len)?,
                    ..r.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { history_len, rows })
    }

    pub fn header(history_len: usize) -> Vec<String> {
        let mut h = vec!["gop_index".to_string(), "channel".into(), "source".into()];
        for name in ["D", "V", "P"] {
            h.extend((0..=history_len).map(|i| if i == 0 { format!("{name}0") } else { format!("{name}-{i}") }));
        }
        h.push("label".into());
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.history_len))?;
        for r in &self.rows {
            let mut rec = vec![
                r.gop_index.to_string(),
                r.channel.0.to_string(),
                r.source.as_str().to_string(),
            ];
            rec.extend(r.matrix.values().iter().map(|v| v.to_string()));
            rec.push(r.label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Dataset> {
        let mut rd = csv::Reader::from_reader(input);
        let width = rd.headers()?.len();
        let cells = width
            .checked_sub(4)
            .filter(|c| *c > 0 && c % NUM_FEATURES == 0)
            .ok_or_else(|| Error::Parse(format!("dataset has {width} columns")))?;
        let history_len = cells / NUM_FEATURES - 1;
        let mut ds = Dataset::new(history_len);
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number '{}'", &rec[i])))
            };
            let source = match &rec[2] {
                "video" => Source::Video,
                "probe" => Source::Probe,
                other => return Err(Error::Parse(format!("unknown source '{other}'"))),
            };
            let values = (3..3 + cells).map(num).collect::<Result<Vec<_>>>()?;
            let label = match &rec[3 + cells] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Parse(format!("bad label '{other}'"))),
            };
            ds.rows.push(DatasetRow {
                gop_index: rec[0].parse().map_err(|_| Error::Parse("bad gop_index".into()))?,
                channel: ChannelId(rec[1].parse().map_err(|_| Error::Parse("bad channel".into()))?),
                source,
                matrix: FeatureMatrix::from_values(history_len, values)?,
                label,
            });
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub rows: usize,
    pub positives: usize,
    pub positive_fraction: f64,
}

impl ClassBalance {
    pub fn of(ds: &Dataset) -> Self {
        ClassBalance {
            rows: ds.len(),
            positives: ds.rows.iter().filter(|r| r.label == 1).count(),
            positive_fraction: ds.positive_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub num_gops: u64,
    pub history_len: usize,
    pub rotation_period: u64,
    pub deadline_allowance: f64,
    pub label: LabelConfig,
    pub probe: ProbeConfig,
    pub video_balance: ClassBalance,
    pub probe_balance: ClassBalance,
    /// Row statistics over the whole dataset; models store their own.
    pub video_norm: NormStats,
    pub probe_norm: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub video: Dataset,
    pub probe: Dataset,
    pub meta: DatasetMeta,
}

/// Channel carrying the video in slot `p` of a collection run.
pub fn rotation_channel(p: u64, period: u64, num_channels: usize) -> ChannelId {
    ChannelId::from_index(((p / period) % num_channels as u64) as usize)
}

fn gop_burst(cfg: &ExperimentConfig, p: u64) -> Vec<PacketSpec> {
    let g = cfg.sim.gop_duration;
    let start = p as f64 * g;
    packetize_gop(p, &cfg.video, start, start + g - cfg.deadline_allowance, cfg.sim.seed)
}

/// Simulates `cfg.num_gops` slots with the video rotating across channels.
///
/// The row for channel `c` at slot `q` holds the history ending at `q` and is
/// labelled by replaying the video on `c` over slots `q+1 ..= q+W`. Rows whose
/// window runs past the end of the run are dropped.
pub fn gen_dataset(cfg: &ExperimentConfig) -> Result<Datasets> {
    cfg.validate()?;
    let h = cfg.history_len();
    let w = cfg.label.window as u64;
    let mut sim = SimState::new(cfg.sim.clone())?;
    let mut histories: Vec<History> = (0..sim.num_channels()).map(|_| History::new(h)).collect();
    let mut video = Dataset::new(h);
    let mut probe = Dataset::new(h);
    let setup = cfg.stream_setup();
    let mut pending: Vec<(ChannelId, Source, FeatureMatrix)> = Vec::new();

    for p in 0..cfg.num_gops {
        if !pending.is_empty() && p + w <= cfg.num_gops {
            let bursts: Vec<_> = (p..p + w).map(|k| gop_burst(cfg, k)).collect();
            for (channel, source, matrix) in pending.drain(..) {
                let psnrs = sim
                    .counterfactual_horizon(channel, &bursts)?
                    .iter()
                    .map(|recs| compute_psnr(recs, &cfg.psnr))
                    .collect::<Result<Vec<f64>>>()?;
                let row = DatasetRow {
                    gop_index: p - 1,
                    channel,
                    source,
                    matrix,
                    label: label_window(&psnrs, &cfg.label)?,
                };
                match source {
                    Source::Video => video.rows.push(row),
                    Source::Probe => probe.rows.push(row),
                }
            }
        }
        pending.clear();

        let carrier = rotation_channel(p, cfg.rotation_period, sim.num_channels());
        let deadline = setup.deadline(&sim);
        let records = sim.transmit_burst(carrier, &gop_burst(cfg, p))?;
        let probes = schedule_probes(&mut sim, carrier, deadline, &cfg.probe)?;
        for id in sim.channel_ids().collect::<Vec<_>>() {
            let (recs, source) = if id == carrier {
                (&records, Source::Video)
            } else {
                (&probes[&id], Source::Probe)
            };
            let hist = &mut histories[id.index()];
            hist.push(extract_slot_features(recs, cfg.sim.gop_duration)?, source);
            if let Some(m) = hist.matrix() {
                pending.push((id, source, m));
            }
        }
        sim.advance_gop();
    }

    let meta = DatasetMeta {
        seed: cfg.sim.seed,
        num_gops: cfg.num_gops,
        history_len: h,
        rotation_period: cfg.rotation_period,
        deadline_allowance: cfg.deadline_allowance,
        label: cfg.label.clone(),
        probe: cfg.probe.clone(),
        video_balance: ClassBalance::of(&video),
        probe_balance: ClassBalance::of(&probe),
        video_norm: fit_or_identity(&video)?,
        probe_norm: fit_or_identity(&probe)?,
    };
    log::info!(
        "dataset: {} video rows ({:.1}% class 1), {} probe rows ({:.1}% class 1)",
        video.len(),
        100.0 * meta.video_balance.positive_fraction,
        probe.len(),
        100.0 * meta.probe_balance.positive_fraction
    );
    Ok(Datasets { video, probe, meta })
}

fn fit_or_identity(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        Ok(NormStats::identity())
    } else {
        NormStats::fit(ds.rows.iter().map(|r| &r.matrix))
    }
}

impl Datasets {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.video.write_csv(BufWriter::new(File::create(dir.join(VIDEO_CSV))?))?;
        self.probe.write_csv(BufWriter::new(File::create(dir.join(PROBE_CSV))?))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join(META_JSON), meta + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Datasets> {
        let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(dir.join(name))?)) };
        Ok(Datasets {
            video: Dataset::read_csv(open(VIDEO_CSV)?)?,
            probe: Dataset::read_csv(open(PROBE_CSV)?)?,
            meta: serde_json::from_reader(open(META_JSON)?)?,
        })
    }
}
