//! Per-slot delay/variance/loss features, the history matrix fed to the
//! classifier, and the future-quality class label.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::DeliveryRecord;

/// Number of feature rows: average delay, delay variance, loss fraction.
pub const NUM_FEATURES: usize = 3;

/// What a channel carried in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Video,
    Probe,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Video => "video",
            Source::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotFeatures {
    /// Mean delay of on-time packets, seconds.
    pub avg_delay: f64,
    /// Population variance of the same delays, seconds squared.
    pub delay_variance: f64,
    /// Fraction of packets that missed the deadline or were dropped.
    pub loss_fraction: f64,
}

impl SlotFeatures {
    pub fn as_array(&self) -> [f64; NUM_FEATURES] {
        [self.avg_delay, self.delay_variance, self.loss_fraction]
    }
}

/// Features of one slot's records. Only on-time packets contribute to the
/// delay statistics; a slot with none gets the sentinel delay `gop_duration`.
pub fn extract_slot_features(records: &[DeliveryRecord], gop_duration: f64) -> Result<SlotFeatures> {
    if records.is_empty() {
        return Err(Error::Empty("slot records"));
    }
    // Sorted for order-independent sums.
    let mut delays: Vec<f64> = records
        .iter()
        .filter(|r| r.delivered)
        .filter_map(DeliveryRecord::delay)
        .collect();
    delays.sort_by(f64::total_cmp);

    let lost = records.len() - delays.len();
    let loss_fraction = lost as f64 / records.len() as f64;
    if delays.is_empty() {
        return Ok(SlotFeatures {
            avg_delay: gop_duration,
            delay_variance: 0.0,
            loss_fraction,
        });
    }
    let n = delays.len() as f64;
    let mean = delays.iter().sum::<f64>() / n;
    let variance = if delays.len() < 2 {
        0.0
    } else {
        delays.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n
    };
    Ok(SlotFeatures {
        avg_delay: mean,
        delay_variance: variance,
        loss_fraction,
    })
}

/// Feature rows by GoP slot, newest slot in column 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    history_len: usize,
    /// Row-major, `NUM_FEATURES x (history_len + 1)`.
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_values(history_len: usize, values: Vec<f64>) -> Result<Self> {
        let expected = NUM_FEATURES * (history_len + 1);
        if values.len() != expected {
            return Err(Error::Length {
                what: "feature matrix values",
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("feature matrix entries must be finite".into()));
        }
        Ok(FeatureMatrix {
            history_len,
            values,
        })
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn cols(&self) -> usize {
        self.history_len + 1
    }

    pub fn rows(&self) -> usize {
        NUM_FEATURES
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keeps the newest `history_len + 1` slots.
    pub fn truncated(&self, history_len: usize) -> Result<FeatureMatrix> {
        if history_len > self.history_len {
            return Err(Error::Length {
                what: "truncated history",
                expected: self.history_len,
                got: history_len,
            });
        }
        let values = (0..NUM_FEATURES)
            .flat_map(|r| self.row(r)[..=history_len].iter().copied())
            .collect();
        FeatureMatrix::from_values(history_len, values)
    }
}

/// Assembles `history` (exactly `history_len + 1` slots, newest first).
pub fn build_feature_matrix(history: &[SlotFeatures], history_len: usize) -> Result<FeatureMatrix> {
    if history.len() != history_len + 1 {
        return Err(Error::Length {
            what: "feature history",
            expected: history_len + 1,
            got: history.len(),
        });
    }
    let mut values = Vec::with_capacity(NUM_FEATURES * history.len());
    for row in 0..NUM_FEATURES {
        values.extend(history.iter().map(|s| s.as_array()[row]));
    }
    FeatureMatrix::from_values(history_len, values)
}

/// Per-row z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl NormStats {
    /// Leaves every row untouched.
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
        }
    }

    /// Mean and population standard deviation of every row over all columns
    /// of all matrices.
    pub fn fit<'a, I>(matrices: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut sum = [0.0; NUM_FEATURES];
        let mut sum_sq = [0.0; NUM_FEATURES];
        let mut count = 0usize;
        let mut seen: Vec<&FeatureMatrix> = Vec::new();
        for m in matrices {
            for (i, s) in sum.iter_mut().enumerate() {
                *s += m.row(i).iter().sum::<f64>();
            }
            count += m.cols();
            seen.push(m);
        }
        if count == 0 {
            return Err(Error::Empty("normalization set"));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        for m in &seen {
            for (i, acc) in sum_sq.iter_mut().enumerate() {
                *acc += m.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>();
            }
        }
        let std = sum_sq.map(|s| (s / n).sqrt());
        Ok(NormStats { mean, std })
    }
}

/// Per-row z-score. Rows whose std is zero pass through unchanged.
pub fn normalize(matrix: &FeatureMatrix, stats: &NormStats) -> FeatureMatrix {
    let cols = matrix.cols();
    let values = matrix
        .values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let row = k / cols;
            let std = stats.std[row];
            if std > 0.0 {
                (v - stats.mean[row]) / std
            } else {
                v
            }
        })
        .collect();
    FeatureMatrix {
        history_len: matrix.history_len,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Future GoPs per label window.
    pub window: usize,
    /// PSNR threshold, dB.
    pub threshold_db: f64,
    /// Minimum number of GoPs strictly above the threshold.
    pub k: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            window: 10,
            threshold_db: 40.0,
            k: 6,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("label window must be at least 1".into()));
        }
        if self.k > self.window {
            return Err(Error::Config(format!(
                "label k={} exceeds window {}",
                self.k, self.window
            )));
        }
        Ok(())
    }
}

/// 1 when at least `k` of the `window` PSNRs are strictly above the threshold.
pub fn label_window(psnrs: &[f64], cfg: &LabelConfig) -> Result<u8> {
    if psnrs.len() != cfg.window {
        return Err(Error::Length {
            what: "PSNR window",
            expected: cfg.window,
            got: psnrs.len(),
        });
    }
    let good = psnrs.iter().filter(|&&v| v > cfg.threshold_db).count();
    Ok(u8::from(good >= cfg.k))
}

/// Rolling per-channel history of slot features, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    capacity: usize,
    slots: VecDeque<(SlotFeatures, Source)>,
}

impl History {
    /// Keeps the last `history_len + 1` slots.
    pub fn new(history_len: usize) -> Self {
        History {
            capacity: history_len + 1,
            slots: VecDeque::with_capacity(history_len + 1),
        }
    }

    pub fn push(&mut self, features: SlotFeatures, source: Source) {
        if self.slots.len() == self.capacity {
            self.slots.pop_back();
        }
        self.slots.push_front((features, source));
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn latest(&self) -> Option<&(SlotFeatures, Source)> {
        self.slots.front()
    }

    /// Slots, newest first.
    pub fn slots(&self) -> impl Iterator<Item = &(SlotFeatures, Source)> {
        self.slots.iter()
    }

    /// Matrix of the full history, `None` until enough slots are observed.
    pub fn matrix(&self) -> Option<FeatureMatrix> {
        if !self.is_full() {
            return None;
        }
        let slots: Vec<SlotFeatures> = self.slots.iter().map(|(f, _)| *f).collect();
        build_feature_matrix(&slots, self.capacity - 1).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{PacketKind, PacketSpec};

    fn rec(delay: Option<f64>, delivered: bool) -> DeliveryRecord {
        DeliveryRecord {
            packet: PacketSpec {
                injection_time: 2.0,
                size: 100,
                kind: PacketKind::Probe,
                gop_index: 2,
                flow_id: 1,
                deadline: 3.0,
            },
            delivery_time: delay.map(|d| 2.0 + d),
            delivered,
        }
    }

    fn sf(d: f64, v: f64, p: f64) -> SlotFeatures {
        SlotFeatures {
            avg_delay: d,
            delay_variance: v,
            loss_fraction: p,
        }
    }

    #[test]
    fn identical_delays() {
        let recs: Vec<_> = (0..5).map(|_| rec(Some(0.25), true)).collect();
        let f = extract_slot_features(&recs, 1.0).unwrap();
        assert_eq!(f, sf(0.25, 0.0, 0.0));
    }

    #[test]
    fn total_loss_uses_sentinel() {
        let recs = [rec(None, false), rec(Some(1.5), false)];
        let f = extract_slot_features(&recs, 1.0).unwrap();
        assert_eq!(f, sf(1.0, 0.0, 1.0));
    }

    #[test]
    fn mixed_slot_statistics() {
        let recs = [rec(Some(0.01), true), rec(Some(0.03), true), rec(None, false)];
        let f = extract_slot_features(&recs, 1.0).unwrap();
        assert!((f.avg_delay - 0.02).abs() < 1e-15);
        assert!((f.delay_variance - 0.0001).abs() < 1e-15);
        assert!((f.loss_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(matches!(extract_slot_features(&[], 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn matrix_shapes() {
        let hist: Vec<_> = (0..11).map(|i| sf(i as f64, 0.0, 0.0)).collect();
        let m = build_feature_matrix(&hist, 10).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 11));
        assert_eq!(m.row(0)[3], 3.0);

        let one = build_feature_matrix(&[sf(0.1, 0.2, 0.3)], 0).unwrap();
        assert_eq!(one.values(), &[0.1, 0.2, 0.3]);

        assert!(matches!(
            build_feature_matrix(&hist, 9),
            Err(Error::Length { expected: 10, got: 11, .. })
        ));
    }

    #[test]
    fn column_order_matters() {
        let a = [sf(1.0, 0.0, 0.0), sf(2.0, 0.0, 0.0)];
        let b = [sf(2.0, 0.0, 0.0), sf(1.0, 0.0, 0.0)];
        assert_ne!(
            build_feature_matrix(&a, 1).unwrap(),
            build_feature_matrix(&b, 1).unwrap()
        );
    }

    #[test]
    fn normalize_examples() {
        let m = FeatureMatrix::from_values(1, vec![0.0, 2.0, 5.0, 5.0, 0.3, 0.3]).unwrap();
        let stats = NormStats {
            mean: [1.0, 5.0, 0.3],
            std: [1.0, 0.0, 2.0],
        };
        let n = normalize(&m, &stats);
        assert_eq!(n.row(0), &[-1.0, 1.0]);
        // std-0 guard leaves the row as is
        assert_eq!(n.row(1), &[5.0, 5.0]);
        // row equal to the mean maps to zeros
        assert_eq!(n.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn fitted_stats_standardize_the_fit_set() {
        let ms: Vec<_> = (0..20)
            .map(|i| {
                let x = i as f64;
                FeatureMatrix::from_values(1, vec![x, x * 2.0, 1.0, 1.0, 0.5 * x, x.sin()]).unwrap()
            })
            .collect();
        let stats = NormStats::fit(&ms).unwrap();
        let normed: Vec<_> = ms.iter().map(|m| normalize(m, &stats)).collect();
        let again = NormStats::fit(&normed).unwrap();
        for i in [0, 2] {
            assert!(again.mean[i].abs() < 1e-12);
            assert!((again.std[i] - 1.0).abs() < 1e-12);
        }
        assert_eq!(stats.std[1], 0.0);
    }

    #[test]
    fn label_examples() {
        let cfg = LabelConfig::default();
        let mut v = vec![30.0; 10];
        for x in v.iter_mut().take(7) {
            *x = 50.0;
        }
        assert_eq!(label_window(&v, &cfg).unwrap(), 1);
        v[6] = 30.0;
        assert_eq!(label_window(&v, &cfg).unwrap(), 1);
        v[5] = 40.0;
        assert_eq!(label_window(&v, &cfg).unwrap(), 0);
        assert_eq!(label_window(&[40.0; 10], &cfg).unwrap(), 0);
        assert!(label_window(&[50.0; 9], &cfg).is_err());
    }

    #[test]
    fn history_rolls() {
        let mut h = History::new(2);
        assert!(h.matrix().is_none());
        for i in 0..5 {
            h.push(sf(i as f64, 0.0, 0.0), Source::Probe);
        }
        assert_eq!(h.len(), 3);
        assert_eq!(h.matrix().unwrap().row(0), &[4.0, 3.0, 2.0]);
        assert_eq!(h.latest().unwrap().1, Source::Probe);
    }
}
