//! Classifier training and offline ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{gen_dataset, ClassBalance, Dataset, Datasets};
use crate::predictor::{train, CnnArch, CnnModel, EvalReport, TrainOutcome};

pub const VIDEO_MODEL: &str = "video_model.json";
pub const PROBE_MODEL: &str = "probe_model.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub balance: ClassBalance,
    pub train_size: usize,
    pub final_loss: f64,
    pub held_out: EvalReport,
}

impl ClassifierSummary {
    fn of(ds: &Dataset, out: &TrainOutcome) -> Self {
        ClassifierSummary {
            balance: ClassBalance::of(ds),
            train_size: out.train_size,
            final_loss: out.epoch_loss.last().copied().unwrap_or(f64::NAN),
            held_out: out.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub video: ClassifierSummary,
    pub probe: ClassifierSummary,
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub video: CnnModel,
    pub probe: CnnModel,
    pub report: TrainReport,
}

fn arch_for(cfg: &ExperimentConfig, history_len: usize) -> CnnArch {
    CnnArch {
        history_len,
        ..cfg.arch.clone()
    }
}

/// Trains the video-feature and probe-feature classifiers.
pub fn train_models(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainedModels> {
    let arch = arch_for(cfg, data.video.history_len);
    let video = train(&data.video.samples(), arch.clone(), &cfg.train)?;
    log::info!("video classifier accuracy {:.4}", video.report.accuracy);
    let probe = train(&data.probe.samples(), arch, &cfg.train)?;
    log::info!("probe classifier accuracy {:.4}", probe.report.accuracy);
    let report = TrainReport {
        video: ClassifierSummary::of(&data.video, &video),
        probe: ClassifierSummary::of(&data.probe, &probe),
    };
    Ok(TrainedModels {
        video: video.model,
        probe: probe.model,
        report,
    })
}

impl TrainedModels {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.video.save(&dir.join(VIDEO_MODEL))?;
        self.probe.save(&dir.join(PROBE_MODEL))?;
        let report = serde_json::to_string_pretty(&self.report)?;
        std::fs::write(dir.join(TRAIN_REPORT), report + "\n")?;
        Ok(())
    }
}

/// Loads both classifiers from `dir`.
pub fn load_models(dir: &Path) -> Result<(CnnModel, CnnModel)> {
    Ok((CnnModel::load(&dir.join(VIDEO_MODEL))?, CnnModel::load(&dir.join(PROBE_MODEL))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ProbeBurst,
    History,
}

impl AblationAxis {
    pub fn default_points(self) -> Vec<usize> {
        match self {
            AblationAxis::ProbeBurst => vec![5, 10, 20, 50],
            AblationAxis::History => vec![2, 4, 6, 8, 10],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::ProbeBurst => "probe_burst",
            AblationAxis::History => "history",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe_burst" | "probe-burst" | "probe" => Ok(AblationAxis::ProbeBurst),
            "history" | "h" => Ok(AblationAxis::History),
            other => Err(crate::Error::Config(format!("unknown ablation axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    pub video_accuracy: f64,
    pub probe_accuracy: f64,
    pub video_rows: usize,
    pub probe_rows: usize,
}

/// Held-out accuracy of both classifiers at every point of `axis`.
///
/// Probe burst points regenerate the datasets. History points generate once
/// at the largest history and keep the newest columns; the kernel length is
/// capped at `H + 1` for short histories.
pub fn ablate_offline(cfg: &ExperimentConfig, axis: AblationAxis, points: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(points.len());
    let shared = match axis {
        AblationAxis::History => {
            let mut base = cfg.clone();
            base.arch.history_len = points.iter().copied().max().unwrap_or(cfg.arch.history_len);
            Some(gen_dataset(&base)?)
        }
        AblationAxis::ProbeBurst => None,
    };
    for &value in points {
        let data = match &shared {
            Some(full) => Datasets {
                video: full.video.truncated(value)?,
                probe: full.probe.truncated(value)?,
                meta: full.meta.clone(),
            },
            None => {
                let mut point = cfg.clone();
                point.probe.burst_size = value as u32;
                gen_dataset(&point)?
            }
        };
        let mut point = cfg.clone();
        if axis == AblationAxis::History {
            point.arch.kernel_len = point.arch.kernel_len.min(value + 1);
        }
        let trained = train_models(&point, &data)?;
        log::info!(
            "{}={value}: video {:.4} probe {:.4}",
            axis.as_str(),
            trained.report.video.held_out.accuracy,
            trained.report.probe.held_out.accuracy
        );
        rows.push(AblationRow {
            axis,
            value,
            video_accuracy: trained.report.video.held_out.accuracy,
            probe_accuracy: trained.report.probe.held_out.accuracy,
            video_rows: data.video.len(),
            probe_rows: data.probe.len(),
        });
    }
    Ok(rows)
}

pub fn write_ablation<W: std::io::Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis", "value", "video_accuracy", "probe_accuracy", "video_rows", "probe_rows"])?;
    for r in rows {
        w.write_record([
            r.axis.as_str().to_string(),
            r.value.to_string(),
            r.video_accuracy.to_string(),
            r.probe_accuracy.to_string(),
            r.video_rows.to_string(),
            r.probe_rows.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
