use perfmodel::benchkit::SynthHardwareModel;
use perfmodel::predict::{predict_batch_time, sweep, OracleSource, RegressorBank, Scaled};
use perfmodel::workload::{stage_inventory, ClusterSpec, Direction, ModelConfig, ParallelLayout};
use proptest::prelude::*;

/// Model, layout and cluster with every divisibility constraint satisfied
/// and enough encoders for any stage count drawn here.
fn config() -> impl Strategy<Value = (ModelConfig, ParallelLayout, ClusterSpec)> {
    (0u32..4, 0u32..4, 0u32..3, 1u64..4, 1u64..4, 24u64..48, 1u64..4, 1u64..17, any::<bool>()).prop_map(
        |(mp_e, pp_e, dp_e, hk, dk, n, b, m, flash)| {
            let (mp, pp, dp) = (1u64 << mp_e, 1u64 << pp_e, 1u64 << dp_e);
            let h = mp * hk * 4;
            let model = ModelConfig {
                name: "prop".into(),
                hidden_dim: h * 16 * dk,
                attention_heads: h,
                seq_len: 512,
                num_encoders: n,
                micro_batch: b,
                micro_batches_per_update: m,
                flash_attention: flash,
                fused_softmax: false,
                ..ModelConfig::gpt_20b()
            };
            let world = pp * mp * dp;
            let gpn = world.min(4);
            (model, ParallelLayout::new(pp, mp, dp), ClusterSpec::new(world / gpn, gpn, "prop"))
        },
    )
}

fn oracle() -> OracleSource {
    OracleSource::new(&SynthHardwareModel::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_every_latency_scales_overall((m, l, c) in config(), k in -4i32..5) {
        let base = oracle();
        let factor = 2f64.powi(k);
        let scaled = Scaled { inner: &base, factor };
        let a = predict_batch_time(&m, &l, &c, &base).unwrap().breakdown.overall;
        let b = predict_batch_time(&m, &l, &c, &scaled).unwrap().breakdown.overall;
        prop_assert_eq!(b, a * factor);
    }

    #[test]
    fn more_encoders_never_faster((m, l, c) in config(), extra in 1u64..8) {
        let bigger = ModelConfig { num_encoders: m.num_encoders + extra, ..m.clone() };
        let src = oracle();
        let a = predict_batch_time(&m, &l, &c, &src).unwrap().breakdown.overall;
        let b = predict_batch_time(&bigger, &l, &c, &src).unwrap().breakdown.overall;
        prop_assert!(b >= a, "{} encoders: {}, {}: {}", m.num_encoders, a, bigger.num_encoders, b);
    }

    #[test]
    fn prediction_is_pure((m, l, c) in config()) {
        let src = oracle();
        prop_assert_eq!(
            predict_batch_time(&m, &l, &c, &src).unwrap(),
            predict_batch_time(&m, &l, &c, &src).unwrap()
        );
    }

    #[test]
    fn breakdown_recomposes((m, l, c) in config()) {
        let b = predict_batch_time(&m, &l, &c, &oracle()).unwrap().breakdown;
        let slots = (b.micro_batches + b.stages - 1) as f64;
        let expect = slots * (b.stage_fwd_max + b.stage_bwd_max) + b.dp_allreduce_first_stage + b.max_update;
        prop_assert!((b.overall - expect).abs() <= 1e-9 * expect);
        let phases: f64 = b.phase_proportions().iter().map(|(_, v)| v).sum();
        prop_assert!((phases - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn constant_bank_overall_counts_by_hand() {
    let m = ModelConfig {
        micro_batches_per_update: 16,
        ..ModelConfig::gpt_20b()
    };
    let l = ParallelLayout::new(4, 4, 8);
    let c = ClusterSpec::perlmutter();
    let mut max_f = 0;
    let mut max_b = 0;
    for s in 0..4 {
        let inv = stage_inventory(&m, &l, &c, s).unwrap();
        max_f = max_f.max(inv.op_count(Direction::Fwd));
        max_b = max_b.max(inv.op_count(Direction::Bwd));
    }
    // one gradient all-reduce; optimizer step plus parameter all-gather
    let expect_us = 19 * (max_f + max_b) + 1 + 2;
    let b = predict_batch_time(&m, &l, &c, &RegressorBank::constant(1.0)).unwrap().breakdown;
    assert!((b.overall - expect_us as f64 * 1e-6).abs() < 1e-15, "{} vs {expect_us} us", b.overall);
}

#[test]
fn sweep_flags_heads_not_divisible_by_mp() {
    let m = ModelConfig {
        attention_heads: 12,
        hidden_dim: 768,
        num_encoders: 24,
        ..ModelConfig::gpt_20b()
    };
    let layouts = [ParallelLayout::new(2, 4, 1), ParallelLayout::new(1, 8, 1)];
    let c = ClusterSpec::new(2, 4, "two");
    let rows = sweep(std::slice::from_ref(&m), &layouts, &[c], &RegressorBank::constant(1.0));
    assert_eq!(rows.len(), 2);
    assert!(rows[0].outcome.is_ok());
    assert_eq!(rows[1].layout, layouts[1]);
    assert!(rows[1].outcome.is_err(), "{}", rows[1].status());
}
