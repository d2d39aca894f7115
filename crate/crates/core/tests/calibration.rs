use heatstop::calib::{
    back_calculate, bundled_inspections, calibration_report, demand_shares,
    estimate_expected_min_energy, forward_quantile, parse_inspections, weighted_baseline,
};
use heatstop::chamber::ProgramId;
use heatstop::plantsim::Scenario;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn back_calculation_round_trips(e in 10.0f64..5000.0, cv in 0.01f64..0.6, r in 0.02f64..0.98) {
        let planned = forward_quantile(e, cv, r);
        prop_assume!(planned > 0.0);
        let back = back_calculate(planned, cv, r).unwrap();
        prop_assert!((back - e).abs() < 1e-9 * e);
    }

    #[test]
    fn more_rework_means_higher_requirement(planned in 50.0f64..3000.0, cv in 0.05f64..0.5,
                                            r in 0.05f64..0.9, dr in 0.001f64..0.05) {
        let lo = back_calculate(planned, cv, r).unwrap();
        let hi = back_calculate(planned, cv, r + dr).unwrap();
        prop_assert!(hi > lo);
    }
}

#[test]
fn negative_row_gives_309_kwh() {
    let rows = bundled_inspections();
    let neg = rows
        .iter()
        .find(|r| r.program_id == ProgramId::Negative)
        .unwrap();
    let e = estimate_expected_min_energy(neg).unwrap();
    assert!((e - 309.36).abs() < 0.5, "{e}");
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(back_calculate(-1.0, 0.3, 0.3).is_err());
    assert!(back_calculate(300.0, 0.0, 0.3).is_err());
    assert!(back_calculate(300.0, 0.3, 1.0).is_err());
    // 1 + cv * z <= 0 when almost every batch is reworked
    assert!(back_calculate(300.0, 0.5, 0.999).is_err());
}

#[test]
fn bundled_demand_shares() {
    let shares = demand_shares(Scenario::bundled().config());
    let expect = [
        (ProgramId::Negative, 0.61),
        (ProgramId::Positive, 0.13),
        (ProgramId::PositiveVap, 0.06),
        (ProgramId::StartStop, 0.19),
    ];
    for (id, s) in expect {
        assert!((shares[&id] - s).abs() <= 0.02, "{id} {}", shares[&id]);
    }
    assert!((shares.values().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn weighted_baseline_matches_plant_values() {
    let shares = demand_shares(Scenario::bundled().config());
    let w = weighted_baseline(&bundled_inspections(), &shares).unwrap();
    assert!((w.cv - 0.31).abs() <= 0.01, "{}", w.cv);
    assert!((w.factor - 1.21).abs() <= 0.02, "{}", w.factor);
}

#[test]
fn report_lists_every_row() {
    let shares = demand_shares(Scenario::bundled().config());
    let rows = bundled_inspections();
    let report = calibration_report(&rows, &shares);
    assert_eq!(report.len(), 4);
    let ss = report
        .iter()
        .find(|l| l.program_id == ProgramId::StartStop)
        .unwrap();
    assert!(ss.estimated_curing_kwh.is_none());
    assert!(ss.provided_ratio.is_some());
}

#[test]
fn malformed_table_is_an_error() {
    assert!(parse_inspections("program_id,planned_time_maturation_h\nNegative,abc\n").is_err());
}
