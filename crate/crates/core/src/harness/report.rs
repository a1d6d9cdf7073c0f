//! Result bundles and their file formats.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::online::{DegradationRow, PolicyRun};
use crate::harness::training::TrainReport;
use crate::selector::PolicyKind;

pub const SUMMARY_JSON: &str = "summary.json";
pub const DEGRADATION_CSV: &str = "degradation.csv";

/// CDF bin width in dB.
pub const CDF_BIN_DB: f64 = 0.5;

/// Empirical CDF evaluated at multiples of [`CDF_BIN_DB`] spanning the data.
pub fn psnr_cdf(psnrs: &[f64]) -> Vec<(f64, f64)> {
    if psnrs.is_empty() {
        return Vec::new();
    }
    let mut sorted = psnrs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = (sorted[0] / CDF_BIN_DB).floor() as i64;
    let hi = (sorted[sorted.len() - 1] / CDF_BIN_DB).ceil() as i64;
    let n = sorted.len() as f64;
    let mut below = 0;
    (lo..=hi)
        .map(|k| {
            let edge = k as f64 * CDF_BIN_DB;
            while below < sorted.len() && sorted[below] <= edge {
                below += 1;
            }
            (edge, below as f64 / n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub num_gops: usize,
    pub mean_psnr: f64,
    pub switches: usize,
    pub cdf: Vec<(f64, f64)>,
}

impl PolicySummary {
    pub fn of(run: &PolicyRun) -> Self {
        let psnrs: Vec<f64> = run.gops.iter().map(|g| g.psnr).collect();
        PolicySummary {
            policy: run.policy,
            num_gops: run.gops.len(),
            mean_psnr: run.mean_psnr(),
            switches: run.switches(),
            cdf: psnr_cdf(&psnrs),
        }
    }
}

/// Everything `report` writes to `summary.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub policies: Vec<PolicySummary>,
    pub accuracy: Option<TrainReport>,
    pub degradation: Vec<DegradationRow>,
}

impl Summary {
    pub fn mean_psnr(&self, policy: PolicyKind) -> Option<f64> {
        self.policies.iter().find(|p| p.policy == policy).map(|p| p.mean_psnr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultBundle {
    pub seed: u64,
    pub runs: Vec<PolicyRun>,
    pub accuracy: Option<TrainReport>,
    pub degradation: Vec<DegradationRow>,
}

impl ResultBundle {
    pub fn summary(&self) -> Summary {
        Summary {
            seed: self.seed,
            policies: self.runs.iter().map(PolicySummary::of).collect(),
            accuracy: self.accuracy.clone(),
            degradation: self.degradation.clone(),
        }
    }
}

pub fn gop_csv_name(policy: PolicyKind) -> String {
    format!("gops_{policy}.csv")
}

pub fn cdf_csv_name(policy: PolicyKind) -> String {
    format!("cdf_{policy}.csv")
}

/// Per-GoP log: slot, chosen channel, PSNR, then D/V/P of every channel.
pub fn write_gop_log<W: std::io::Write>(run: &PolicyRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let channels = run.gops.first().map_or(0, |g| g.features.len());
    let mut header = vec!["slot".to_string(), "channel".into(), "psnr_db".into(), "switched".into()];
    for c in 1..=channels {
        header.extend([format!("D_{c}"), format!("V_{c}"), format!("P_{c}")]);
    }
    w.write_record(&header)?;
    for g in &run.gops {
        let mut rec = vec![
            g.slot.to_string(),
            g.channel.to_string(),
            g.psnr.to_string(),
            u8::from(g.switched).to_string(),
        ];
        for f in &g.features {
            rec.extend(f.as_array().iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf<W: std::io::Write>(cdf: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["psnr_db", "cum_fraction"])?;
    for (x, f) in cdf {
        w.write_record([x.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cdf<R: std::io::Read>(input: R) -> Result<Vec<(f64, f64)>> {
    let mut rd = csv::Reader::from_reader(input);
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse("bad CDF row".into()))
            };
            Ok((num(0)?, num(1)?))
        })
        .collect()
}

pub fn write_degradation<W: std::io::Write>(rows: &[DegradationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["injected", "app_class", "baseline_bps", "injected_bps", "loss_pct"])?;
    for r in rows {
        w.write_record([
            r.injected.label(),
            r.app_class.as_str().to_string(),
            r.baseline_bps.to_string(),
            r.injected_bps.to_string(),
            r.loss_pct.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the summary, per-GoP logs, CDFs and degradation table into `dir`.
pub fn report(bundle: &ResultBundle, dir: &Path) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    let summary = bundle.summary();
    for (run, s) in bundle.runs.iter().zip(&summary.policies) {
        write_gop_log(run, BufWriter::new(File::create(dir.join(gop_csv_name(run.policy)))?))?;
        write_cdf(&s.cdf, BufWriter::new(File::create(dir.join(cdf_csv_name(run.policy)))?))?;
    }
    if !bundle.degradation.is_empty() {
        write_degradation(&bundle.degradation, BufWriter::new(File::create(dir.join(DEGRADATION_CSV))?))?;
    }
    std::fs::write(dir.join(SUMMARY_JSON), summary.to_json()?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gop_cdf_is_one_step() {
        assert_eq!(psnr_cdf(&[55.0]), vec![(55.0, 1.0)]);
        assert_eq!(psnr_cdf(&[37.3]), vec![(37.0, 0.0), (37.5, 1.0)]);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let cdf = psnr_cdf(&[20.0, 55.0, 41.2, 41.2, 30.7]);
        assert!(cdf.windows(2).all(|w| w[0].1 <= w[1].1 && w[1].0 - w[0].0 == CDF_BIN_DB));
        assert_eq!(cdf.last().unwrap(), &(55.0, 1.0));
        assert_eq!(cdf[0], (20.0, 0.2));
    }

    #[test]
    fn cdf_csv_roundtrip() {
        let cdf = psnr_cdf(&[18.63, 36.95, 55.0]);
        let mut buf = Vec::new();
        write_cdf(&cdf, &mut buf).unwrap();
        assert!(buf.starts_with(b"psnr_db,cum_fraction\n"));
        assert_eq!(read_cdf(buf.as_slice()).unwrap(), cdf);
    }
}
