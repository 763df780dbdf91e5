use proptest::prelude::*;
use safety_net::experiment::{Experiment, ExperimentConfig};
use safety_net::roa::{compare, Lattice, RoaEstimate};

fn experiment(name: &str, nodes: usize, lattice: usize) -> Experiment {
    let mut cfg = ExperimentConfig::preset(name).unwrap();
    cfg.numeric.nodes = vec![nodes; 2];
    cfg.lattice.nx = lattice;
    cfg.lattice.ny = lattice;
    Experiment::new(cfg).unwrap()
}

#[test]
fn zero_flow_leaves_the_field_unchanged() {
    let exp = experiment("zero_flow_debug", 41, 41);
    let (snaps, stats) = exp.numeric(&[0.0, 0.5]).unwrap();
    assert_eq!(snaps.len(), 3);
    assert_eq!(snaps[0].field.values, snaps[2].field.values);
    assert!(stats.max_increase <= 0.0);
}

#[test]
fn closed_roa_grid_solution_only_grows() {
    let exp = experiment("ex1_closed_roa", 61, 41);
    let (snaps, stats) = exp.numeric(&[0.0, 5.0, 10.0, 20.0]).unwrap();
    assert!(stats.max_increase <= 1e-12, "{}", stats.max_increase);
    let members: Vec<Vec<bool>> = snaps
        .iter()
        .map(|s| exp.numeric_estimate(s).unwrap().membership())
        .collect();
    for w in members.windows(2) {
        assert!(w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b));
    }
    assert!(
        members.last().unwrap().iter().filter(|m| **m).count()
            > members[0].iter().filter(|m| **m).count()
    );
    let last = exp.numeric_estimate(snaps.last().unwrap()).unwrap();
    assert_eq!(
        last.closed_contours_around([std::f64::consts::FRAC_PI_2; 2]),
        1
    );
}

#[test]
fn grid_and_trajectory_oracles_agree_on_the_closed_roa() {
    let exp = experiment("ex1_closed_roa", 61, 31);
    let (snaps, _) = exp.numeric(&[]).unwrap();
    let grid = exp.numeric_estimate(snaps.last().unwrap()).unwrap();
    let traj = exp.trajectory_estimate(None).unwrap();
    let report = compare(&grid, &traj, 2).unwrap();
    assert!(report.agreement >= 0.95, "{report:?}");
}

fn estimate(values: Vec<f64>, n: usize) -> RoaEstimate {
    let l = Lattice::planar(&[[-1.0, 1.0], [-1.0, 1.0]], n, n).unwrap();
    RoaEstimate::from_values(l, 0.0, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compare_is_reflexive_and_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 81),
        b in prop::collection::vec(-1.0f64..1.0, 81),
        band in 0usize..3,
    ) {
        let ea = estimate(a, 9);
        let eb = estimate(b, 9);
        // Noisy fields can leave no node outside the band; that is an error.
        if let Ok(same) = compare(&ea, &ea, band) {
            prop_assert_eq!(same.agreement, 1.0);
            prop_assert_eq!(same.symmetric_difference, 0.0);
        }
        match (compare(&ea, &eb, band), compare(&eb, &ea, band)) {
            (Ok(ab), Ok(ba)) => {
                prop_assert_eq!(ab.agreement, ba.agreement);
                prop_assert_eq!(ab.compared, ba.compared);
                prop_assert_eq!(ab.symmetric_difference, ba.symmetric_difference);
                prop_assert!((0.0..=1.0).contains(&ab.agreement));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "compare is not symmetric in failing"),
        }
        prop_assert!(compare(&ea, &ea, 0).unwrap().agreement == 1.0);
    }

    #[test]
    fn contours_of_a_disc_are_closed(cx in -0.3f64..0.3, cy in -0.3f64..0.3, r in 0.2f64..0.5) {
        let n = 41;
        let l = Lattice::planar(&[[-1.0, 1.0], [-1.0, 1.0]], n, n).unwrap();
        let values: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| ((l.xi(i) - cx).powi(2) + (l.yj(j) - cy).powi(2)).sqrt() - r + 1e-9)
            .collect();
        let est = RoaEstimate::from_values(l, 0.0, values).unwrap();
        prop_assert_eq!(est.contours.len(), 1);
        prop_assert_eq!(est.closed_contours_around([cx, cy]), 1);
    }
}
