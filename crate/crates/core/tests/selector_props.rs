use probesel::features::FeatureMatrix;
use probesel::netsim::{ChannelId, SimConfig, SimState};
use probesel::predictor::Scorer;
use probesel::probing::ProbeConfig;
use probesel::selector::{oracle_windows, select_delay_based, select_predictive, step, Policy, SelectionState, StreamSetup};
use probesel::videostream::{EncoderProfile, PsnrModel};
use proptest::prelude::*;

fn setup() -> StreamSetup {
    StreamSetup {
        profile: EncoderProfile::default(),
        probe: ProbeConfig::default(),
        psnr: PsnrModel::default(),
        deadline_allowance: 5e-6,
        seed: 42,
    }
}

/// Delivered fraction of the newest slot minus its mean delay in seconds.
struct LossAndDelay;

impl Scorer for LossAndDelay {
    fn score(&self, matrix: &FeatureMatrix) -> probesel::Result<f64> {
        Ok(1.0 - matrix.get(2, 0) - matrix.get(0, 0))
    }
}

proptest! {
    #[test]
    fn predictive_choice_survives_increasing_transforms(ticks in prop::collection::vec(0u32..=64, 2..8)) {
        let scores: Vec<f64> = ticks.iter().map(|&t| f64::from(t) / 64.0).collect();
        let chosen = select_predictive(&scores).unwrap();
        let transforms: [fn(f64) -> f64; 4] = [|x| x * x * x, f64::exp, |x| 2.0 * x + 0.5, |x| (x + 1.0).ln()];
        for f in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(select_predictive(&mapped).unwrap(), chosen);
        }
    }

    #[test]
    fn delay_policy_decides_from_earlier_slots_only(seed in any::<u64>(), slots in 12usize..40) {
        let mut cfg = SimConfig::with_channels(3);
        cfg.seed = seed;
        let mut sim = SimState::new(cfg).unwrap();
        let mut state = SelectionState::new(3, 10, ChannelId(1)).unwrap();
        let setup = setup();
        for _ in 0..slots {
            let expected = if state.warming_up() {
                state.current()
            } else {
                let delays: Vec<f64> = (1..=3)
                    .map(|c| state.history(ChannelId(c)).latest().unwrap().0.avg_delay)
                    .collect();
                select_delay_based(&delays).unwrap()
            };
            let out = step(&Policy::DelayBased, &mut sim, &mut state, &setup).unwrap();
            prop_assert_eq!(out.channel, expected);
        }
    }
}

#[test]
fn predictive_leaves_a_collapsed_channel() {
    const COLLAPSE: u64 = 20;
    const WINDOW: u64 = 10;
    let mut cfg = SimConfig::with_channels(2).without_background();
    // Slower but steady: probes there queue longer than the video does on an
    // intact channel 2.
    cfg.channels[0].nominal_rate = 1.2e6;
    cfg.channels[1].nominal_rate = 8e6;
    let mut sim = SimState::new(cfg).unwrap();
    let mut state = SelectionState::new(2, 10, ChannelId(2)).unwrap();
    let setup = setup();
    let policy = Policy::Predictive {
        video: &LossAndDelay,
        probe: &LossAndDelay,
    };
    let mut first_effect = None;
    let mut departed = None;
    for p in 0..COLLAPSE + 2 * WINDOW {
        if p == COLLAPSE {
            sim.set_service_rate(ChannelId(2), 0.6e6).unwrap();
            let windows = oracle_windows(&sim, &setup, WINDOW as usize).unwrap();
            let mean = |w: &Vec<f64>| w.iter().sum::<f64>() / w.len() as f64;
            assert!(mean(&windows[0]) > mean(&windows[1]), "replay must favour channel 1");
        }
        let out = step(&policy, &mut sim, &mut state, &setup).unwrap();
        if p < COLLAPSE {
            assert_eq!(out.channel, ChannelId(2), "slot {p}");
        }
        if first_effect.is_none() && out.features[1].0.loss_fraction > 0.0 {
            first_effect = Some(p);
        }
        if departed.is_none() && p > COLLAPSE && out.channel == ChannelId(1) {
            departed = Some(p);
        }
    }
    let effect = first_effect.expect("collapse shows up in channel 2 features");
    assert!(effect >= COLLAPSE);
    let left = departed.expect("policy leaves channel 2");
    assert!(left <= effect + WINDOW, "left at {left}, effect at {effect}");
}
