use heatstop::chamber::{BatchPolicy, Problem, ProgramId};
use heatstop::plantsim::{
    generate_orders, simulate, split_into_batches, PlateType, Scenario, SimulationRun,
};
use heatstop::randkit::{seed_for, RngStream};
use heatstop::stoppol::{PolicySpec, SbaParams};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn opt(factor: f64) -> BatchPolicy {
    BatchPolicy {
        policy: PolicySpec::Opt { factor },
        rework_factor: 0.1,
    }
}

fn sba(beta: f64) -> BatchPolicy {
    BatchPolicy {
        policy: PolicySpec::Sba(SbaParams {
            beta,
            alpha0: 0.2,
            alpha_floor: 0.02,
        }),
        rework_factor: 0.1,
    }
}

fn check_flow(s: &Scenario, run: &SimulationRun) {
    let mut by_order: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    let mut last_end = 0.0;
    let mut last_key = None;
    for r in &run.records {
        let order = &run.orders[r.order_id as usize];
        assert!(r.started_at >= order.release_time);
        assert!(r.started_at >= last_end, "chamber overlap");
        assert!(r.completed_at <= run.horizon_minutes);
        assert_eq!(r.in_warmup, r.completed_at < run.warmup_minutes);
        assert!(r.pallets >= 1 && r.pallets <= s.config().chamber_capacity);
        let key = (r.order_id, r.batch_index);
        assert!(last_key.is_none_or(|k| key > k), "not FIFO");
        last_key = Some(key);
        last_end = r.completed_at;
        by_order.entry(r.order_id).or_default().push(r.pallets);
    }
    // every pallet is treated once; only the last order touched may be cut short
    let last_order = run.records.last().map(|r| r.order_id);
    for (id, pallets) in &by_order {
        let lot = run.orders[*id as usize].lot_size;
        let sum: u32 = pallets.iter().sum();
        if Some(*id) == last_order {
            assert!(sum <= lot);
        } else {
            assert_eq!(sum, lot, "order {id}");
        }
    }
    let busy: f64 = run.records.iter().map(|r| r.duration()).sum();
    assert!(busy <= run.busy_minutes + 1e-6);
    assert!(run.utilization() > 0.0 && run.utilization() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plant_flow_invariants(point in 0u64..5000, rep in 0u32..50, factor in 0.7f64..1.25,
                             beta in 0.4f64..0.95, use_sba in any::<bool>()) {
        let s = Scenario::bundled().with_horizon(2.0, 0.5).unwrap();
        let policy = if use_sba { sba(beta) } else { opt(factor) };
        let run = simulate(&s, &policy, &seed_for(point, rep)).unwrap();
        check_flow(&s, &run);
    }

    #[test]
    fn orders_are_well_formed(seed in any::<u64>()) {
        let s = Scenario::bundled();
        let orders = generate_orders(s.config(), &mut RngStream::new(seed, 7), s.horizon_minutes()).unwrap();
        prop_assert!(!orders.is_empty());
        for w in orders.windows(2) {
            prop_assert!(w[1].arrival_time > w[0].arrival_time);
        }
        for (i, o) in orders.iter().enumerate() {
            prop_assert_eq!(o.order_id, i as u64);
            prop_assert!(o.lot_size >= 1);
            prop_assert!(o.release_time > o.arrival_time);
            prop_assert!(o.arrival_time < s.horizon_minutes());
            let kind = s.config().plate_types.iter().find(|t| t.id == o.type_id).unwrap();
            prop_assert_eq!(kind.program, o.program);
        }
    }

    #[test]
    fn split_covers_lot(lot in 1u32..500, cap in 1u32..64) {
        let parts = split_into_batches(lot, cap);
        prop_assert_eq!(parts.iter().sum::<u32>(), lot);
        prop_assert_eq!(parts.len() as u32, lot.div_ceil(cap));
        prop_assert!(parts.iter().all(|&p| p >= 1 && p <= cap));
        prop_assert!(parts[..parts.len() - 1].iter().all(|&p| p == cap));
    }
}

#[test]
fn simulation_is_deterministic() {
    let s = Scenario::bundled().with_horizon(2.0, 0.5).unwrap();
    for policy in [opt(1.0), sba(0.6)] {
        let a = simulate(&s, &policy, &seed_for(3, 4)).unwrap();
        let b = simulate(&s, &policy, &seed_for(3, 4)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&s, &policy, &seed_for(3, 5)).unwrap();
        assert_ne!(a.records, c.records);
    }
}

#[test]
fn orders_are_shared_across_design_points() {
    let s = Scenario::bundled().with_horizon(2.0, 0.5).unwrap();
    let a = simulate(&s, &opt(1.0), &seed_for(0, 9)).unwrap();
    let b = simulate(&s, &sba(0.7), &seed_for(811, 9)).unwrap();
    assert_eq!(a.orders, b.orders);
}

#[test]
fn about_78_orders_in_three_years() {
    let s = Scenario::bundled();
    let horizon = 3.0 * s.minutes_per_year();
    let n: usize = (0..200)
        .map(|r| {
            generate_orders(s.config(), &mut RngStream::new(r, 0), horizon)
                .unwrap()
                .len()
        })
        .sum();
    let mean = n as f64 / 200.0;
    assert!((mean - 78.0).abs() < 1.5, "{mean}");
}

#[test]
fn type_frequencies_follow_probabilities() {
    let s = Scenario::bundled();
    let types = &s.config().plate_types;
    let mean_gap = s.config().interarrival_days.mean * 1440.0;
    let orders =
        generate_orders(s.config(), &mut RngStream::new(11, 0), 100_500.0 * mean_gap).unwrap();
    let n = orders.len() as f64;
    assert!(n > 100_000.0);
    let mut counts = BTreeMap::new();
    for o in &orders {
        *counts.entry(o.type_id).or_insert(0.0) += 1.0;
    }
    let chi2: f64 = types
        .iter()
        .map(|t| {
            let expected = n * t.probability;
            let seen = counts.get(&t.id).copied().unwrap_or(0.0);
            (seen - expected).powi(2) / expected
        })
        .sum();
    // 20 degrees of freedom, 0.999 quantile
    assert!(chi2 < 45.31, "chi2 = {chi2}");
}

#[test]
fn single_type_gets_every_order() {
    let s = Scenario::bundled();
    let mut types = s.config().plate_types.clone();
    for t in &mut types {
        t.probability = 0.0;
    }
    types[4].probability = 1.0;
    let only = types[4].clone();
    let s = s.with_plate_types(types).unwrap();
    let orders =
        generate_orders(s.config(), &mut RngStream::new(1, 0), s.horizon_minutes()).unwrap();
    assert!(orders
        .iter()
        .all(|o| o.type_id == only.id && o.program == only.program));
    let run = simulate(&s, &opt(1.0), &seed_for(0, 0)).unwrap();
    assert!(run.records.iter().all(|r| r.program_id == only.program));
}

#[test]
fn zero_horizon_gives_no_batches() {
    let s = Scenario::bundled();
    let orders = generate_orders(s.config(), &mut RngStream::new(1, 0), 0.0).unwrap();
    assert!(orders.is_empty());
    let short = s.with_horizon(0.01, 0.0).unwrap();
    let run = simulate(&short, &opt(1.0), &seed_for(0, 0)).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(run.utilization(), 0.0);
}

#[test]
fn warmup_records_are_excluded_from_kpis() {
    let s = Scenario::bundled();
    let run = simulate(&s, &opt(1.0), &seed_for(0, 0)).unwrap();
    let all = heatstop::metrics::RunSummary::from_records(&run.records).unwrap();
    assert_eq!(all.batches, run.post_warmup().count());
    assert!(run.records.iter().any(|r| r.in_warmup));
}

#[test]
fn warmup_sigma_is_near_seed_at_cv_0_3() {
    let s = Scenario::bundled().with_cv(0.3).unwrap();
    let run = simulate(&s, &sba(0.6), &seed_for(5, 0)).unwrap();
    assert_eq!(run.sigma.len(), 2 * ProgramId::ALL.len());
    for est in &run.sigma {
        let seed = 0.3 * s.program(est.program).expected_min_energy(est.problem);
        if est.from_warmup && est.samples >= 10 {
            let ratio = est.value / seed;
            assert!((0.5..2.0).contains(&ratio), "{:?} ratio {ratio}", est);
        } else if !est.from_warmup {
            assert_eq!(est.value, seed);
        }
    }
    // the dominant programs have enough warm-up batches
    for problem in Problem::BOTH {
        let neg = run
            .sigma
            .iter()
            .find(|e| e.program == ProgramId::Negative && e.problem == problem)
            .unwrap();
        assert!(neg.from_warmup);
    }
}

#[test]
fn variants_change_the_digest() {
    let s = Scenario::bundled();
    let digests = [
        s.digest().to_string(),
        s.with_cv(0.45).unwrap().digest().to_string(),
        s.with_horizon(2.0, 0.5).unwrap().digest().to_string(),
    ];
    assert!(digests[0] != digests[1] && digests[0] != digests[2] && digests[1] != digests[2]);
    assert_eq!(s.with_cv(0.45).unwrap().digest(), digests[1]);
}

#[test]
fn plate_type_validation_rejects_bad_probabilities() {
    let s = Scenario::bundled();
    let mut types: Vec<PlateType> = s.config().plate_types.clone();
    types[0].probability += 0.1;
    assert!(s.with_plate_types(types).is_err());
}
