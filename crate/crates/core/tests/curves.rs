use heatstop::chamber::{Problem, ProgramId};
use heatstop::curvekit::{build_cumulative, EnergyCurve, StepLabel};
use heatstop::plantsim::Scenario;

/// Left Riemann sum of the rate on a 0.01-minute grid, in kWh.
fn riemann(curve: &EnergyCurve, until: f64) -> f64 {
    let h = 0.01;
    let steps = (until / h).round() as usize;
    (0..steps)
        .map(|i| curve.rate_at((i as f64 + 0.5) * h) * h / 60.0)
        .sum()
}

#[test]
fn two_segment_example_matches_fine_grid() {
    let c = EnergyCurve::new(
        "x",
        StepLabel::Maturation,
        vec![(0.0, 6.0), (60.0, 12.0), (120.0, 12.0)],
    )
    .unwrap();
    let cum = build_cumulative(&c, 60.0).unwrap();
    assert_eq!(cum.measured(), &[9.0, 21.0]);
    for k in 0..2 {
        assert!((cum.cumulative_at(k) - riemann(&c, 60.0 * (k + 1) as f64)).abs() < 1e-6);
    }
    // held final rate: 12 kW adds 12 kWh per hour
    assert!((cum.cumulative_at(3) - 45.0).abs() < 1e-12);
    assert_eq!(cum.invert(9.0).unwrap(), 0);
    assert_eq!(cum.invert(9.000001).unwrap(), 1);
}

#[test]
fn bundled_curves_match_fine_grid() {
    let s = Scenario::bundled();
    for id in ProgramId::ALL {
        for problem in Problem::BOTH {
            let curve = s.program(id).curve(problem);
            let cum = s.program(id).cumulative(problem);
            for k in [0usize, 5, 17, 60, 150, 400] {
                let t = (k + 1) as f64 * cum.tau();
                let oracle = riemann(curve, t);
                assert!(
                    (cum.cumulative_at(k) - oracle).abs() < 1e-6 * oracle.max(1.0),
                    "{id} {problem} {k}"
                );
            }
        }
    }
}

#[test]
fn bundled_curves_hit_planned_energies() {
    // (maturation minutes, kWh), (drying minutes, kWh) at the company's planned times
    let anchors = [
        (ProgramId::Negative, (1200.0, 352.0), (1080.0, 689.0)),
        (ProgramId::Positive, (2160.0, 731.0), (1320.0, 664.0)),
        (ProgramId::PositiveVap, (2160.0, 1216.0), (720.0, 480.0)),
        (ProgramId::StartStop, (1440.0, 355.0), (3360.0, 1545.0)),
    ];
    let s = Scenario::bundled();
    for (id, (tm, em), (td, ed)) in anchors {
        let p = s.program(id);
        assert!(
            (p.curve(Problem::Curing).energy_until(tm) - em).abs() < 0.01 * em,
            "{id}"
        );
        assert!(
            (p.curve(Problem::Humidity).energy_until(td) - ed).abs() < 0.01 * ed,
            "{id}"
        );
    }
}

#[test]
fn baseline_time_for_negative_lies_beyond_the_planned_time() {
    // a requirement of 1.1 * 390 = 429 kWh sits past the 352 kWh planned point
    // on a monotone curve
    let s = Scenario::bundled();
    let cum = s.program(ProgramId::Negative).cumulative(Problem::Curing);
    let k = cum.invert(429.0).unwrap();
    assert!((k + 1) as f64 * cum.tau() > 1200.0);
}

#[test]
fn bundled_rewarm_energies_are_first_drying_hour() {
    let s = Scenario::bundled();
    for id in ProgramId::ALL {
        let p = s.program(id);
        let first_hour = p.curve(Problem::Humidity).energy_until(60.0);
        assert!((p.rewarm_energy() - first_hour).abs() < 1e-12);
        assert!(p.rewarm_energy() > 30.0 && p.rewarm_energy() < 50.0);
    }
}
