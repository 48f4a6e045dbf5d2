use proptest::prelude::*;

use kkflow_core::elliptic::{lapse_residual, solve_lapse, SolverConfig};
use kkflow_core::energy::*;
use kkflow_core::grid::max_abs;
use kkflow_core::mesh::Geometry;
use kkflow_core::verify::gauge_test;
use kkflow_core::*;

fn flat(n: usize) -> GridChart {
    build_flat_torus_chart([n; 3], [2.0 * std::f64::consts::PI / n as f64; 3], 1).unwrap()
}

proptest! {
    #[test]
    fn ode_rate_is_two_thirds_at_lambda0(x in -10.0..10.0f64, xd in -10.0..10.0f64) {
        let lam = 2.0 / 9.0;
        let c = EnergyConstants::for_ode(lam).unwrap().c_e_ode;
        let e = ode_energy(lam, c, x, xd);
        let r = ode_energy_rate(lam, c, x, xd);
        prop_assert!((r + 2.0 / 3.0 * e).abs() <= 1e-12 * (1.0 + e.abs()));
    }

    #[test]
    fn ode_energy_is_positive_definite(lambda0 in 0.01..0.5f64, extra in 0.0..1.0f64) {
        prop_assume!((lambda0 - 1.0 / 9.0).abs() > 1e-3);
        let c = EnergyConstants::for_ode(lambda0).unwrap().c_e_ode;
        let (a, b, d) = ode_energy_form(lambda0 + extra, c);
        prop_assert!(sym2_eigen(a, b, d).0 > 0.0);
    }

    #[test]
    fn ode_energy_never_grows(lambda0 in 0.01..0.5f64, x in -1.0..1.0f64, xd in -1.0..1.0f64) {
        prop_assume!((lambda0 - 1.0 / 9.0).abs() > 1e-3);
        let c = EnergyConstants::for_ode(lambda0).unwrap().c_e_ode;
        prop_assert!(ode_energy_rate(lambda0, c, x, xd) <= 1e-15);
    }

    #[test]
    fn composition_weights_omega_by_exp(t in 0.0..5.0f64, g in 0.0..1.0f64, o in 0.0..1.0f64, p in 0.0..1.0f64) {
        let e = compose_total(t, g, o, p);
        prop_assert_eq!(e, g + (-2.0 * t).exp() * o + p);
        prop_assert!(compose_total(t + 0.1, g, o, p) <= e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lapse_obeys_the_maximum_principle(base in 0.0..2.0f64, amp in 0.0..1.0f64, k in 1..3i32) {
        let chart = flat(8);
        let grid = chart.grid;
        let geom = Geometry::new(&chart.gamma).unwrap();
        let pot = grid.sample(|x| base + amp * (1.0 + (k as f64 * x[0] + x[2]).sin()));
        let (n, _) = solve_lapse(&geom, &pot, &SolverConfig::default()).unwrap();
        prop_assert!(n.iter().all(|v| *v > 0.0 && *v <= 3.0 + 1e-10));
        prop_assert!(max_abs(&lapse_residual(&geom, &pot, &n)) <= 1e-9);
    }

    #[test]
    fn gauge_conditions_hold_for_any_seed(seed in 0..1000u64) {
        let r = gauge_test(8, seed, 1.0).unwrap();
        prop_assert!(r.within(1e-8), "{:?}", r);
    }

    #[test]
    fn phi_energy_is_quadratic(seed in 0..50u64, k in -3.0..3.0f64) {
        prop_assume!(k.abs() > 0.1);
        let sc = Scenario::parse(&format!("preset = full-kk\ngrid.dims = 6\nseed = {}\nperturb.amplitude = 1e-2\n", seed)).unwrap();
        let pr = sc.prepare().unwrap();
        let s = &pr.state;
        let geom = Geometry::new(&s.g).unwrap();
        let c = sc.energy_constants(&pr.chart).unwrap().c_e_ode;
        let e1 = energy_phi(&geom, &s.phi, &s.phi_dot, 2, c).unwrap();
        let ek = energy_phi(&geom, &s.phi.scaled(k), &s.phi_dot.scaled(k), 2, c).unwrap();
        prop_assert!((ek - k * k * e1).abs() <= 1e-12 * (k * k * e1).abs());
    }

    #[test]
    fn seeded_initial_data_is_reproducible(seed in 0..1000u64) {
        let text = format!("preset = full-kk\ngrid.dims = 4\nseed = {}\n", seed);
        let a = Scenario::parse(&text).unwrap().prepare().unwrap().state;
        let b = Scenario::parse(&text).unwrap().prepare().unwrap().state;
        prop_assert_eq!(a.max_diff(&b), 0.0);
    }
}
