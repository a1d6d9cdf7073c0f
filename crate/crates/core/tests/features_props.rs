mod common;

use probesel::features::{build_feature_matrix, extract_slot_features, label_window, LabelConfig, SlotFeatures};
use probesel::netsim::{DeliveryRecord, PacketKind, PacketSpec};
use proptest::prelude::*;

fn label_cfg() -> impl Strategy<Value = LabelConfig> {
    (1usize..=15, 20.0f64..50.0)
        .prop_flat_map(|(window, threshold_db)| (0..=window).prop_map(move |k| LabelConfig { window, threshold_db, k }))
}

/// Records with an injection offset, an optional delay and a deadline 1 s out.
fn record_strategy() -> impl Strategy<Value = DeliveryRecord> {
    (0.0f64..0.9, prop::option::of(0.0f64..1.5)).prop_map(|(t, delay)| {
        let packet = PacketSpec {
            injection_time: t,
            size: 100,
            kind: PacketKind::Probe,
            gop_index: 0,
            flow_id: 1,
            deadline: 1.0,
        };
        let delivery_time = delay.map(|d| t + d);
        DeliveryRecord {
            packet,
            delivery_time,
            delivered: delivery_time.is_some_and(|x| x <= 1.0),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn raising_a_psnr_never_flips_the_label_down(
        (cfg, psnrs, i, bump) in label_cfg().prop_flat_map(|cfg| {
            let w = cfg.window;
            (Just(cfg), prop::collection::vec(15.0f64..55.0, w), 0..w, 0.0f64..20.0)
        })
    ) {
        let before = label_window(&psnrs, &cfg).unwrap();
        let mut raised = psnrs.clone();
        raised[i] += bump;
        prop_assert!(label_window(&raised, &cfg).unwrap() >= before);
    }

    #[test]
    fn label_matches_brute_force(
        (cfg, psnrs) in label_cfg().prop_flat_map(|cfg| {
            let w = cfg.window;
            (Just(cfg), prop::collection::vec(15.0f64..55.0, w))
        })
    ) {
        prop_assert_eq!(label_window(&psnrs, &cfg).unwrap(), common::brute_force_label(&psnrs, &cfg));
    }

    #[test]
    fn extraction_ignores_record_order(
        (records, perm) in prop::collection::vec(record_strategy(), 1..80)
            .prop_flat_map(|r| { let n = r.len(); (Just(r), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) })
    ) {
        let shuffled: Vec<DeliveryRecord> = perm.iter().map(|&i| records[i]).collect();
        prop_assert_eq!(extract_slot_features(&records, 1.0).unwrap(), extract_slot_features(&shuffled, 1.0).unwrap());
    }

    #[test]
    fn features_stay_in_range(records in prop::collection::vec(record_strategy(), 1..80)) {
        let f = extract_slot_features(&records, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.avg_delay));
        prop_assert!(f.delay_variance >= 0.0);
        prop_assert!((0.0..=1.0).contains(&f.loss_fraction));
        if f.loss_fraction == 1.0 {
            prop_assert_eq!(f.avg_delay, 1.0);
            prop_assert_eq!(f.delay_variance, 0.0);
        }
    }

    #[test]
    fn truncation_matches_a_shorter_build(
        slots in prop::collection::vec((0.0f64..1.0, 0.0f64..0.1, 0.0f64..1.0), 2..12),
        keep in any::<prop::sample::Index>(),
    ) {
        let feats: Vec<SlotFeatures> = slots
            .iter()
            .map(|&(d, v, p)| SlotFeatures { avg_delay: d, delay_variance: v, loss_fraction: p })
            .collect();
        let h = feats.len() - 1;
        let short = keep.index(feats.len());
        let full = build_feature_matrix(&feats, h).unwrap();
        prop_assert_eq!(full.truncated(short).unwrap(), build_feature_matrix(&feats[..=short], short).unwrap());
    }
}
