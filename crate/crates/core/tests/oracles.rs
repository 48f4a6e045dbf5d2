//! Frozen reference values computed independently of the implementation.

use approx::assert_relative_eq;

use kkflow_core::elliptic::{solve_lapse, SolverConfig};
use kkflow_core::energy::*;
use kkflow_core::grid::SYM;
use kkflow_core::matter::{assemble_matter, assemble_tilde_stress, identity_densities, matter_from_stress, MatterInputs, MatterSnapshot};
use kkflow_core::mesh::Geometry;
use kkflow_core::spectral::{SpectralPreconditioner, Stencil};
use kkflow_core::*;

#[test]
fn ode_exact_underdamped() {
    // λ = 2/9: X = e^{−t/3}(cos(t/3) + sin(t/3)) from X(0) = 1, Ẋ(0) = 0
    let (x, xd) = ode_exact(2.0 / 9.0, 1.0, 0.0, 3.0);
    assert_relative_eq!(x, 0.5083259859995252, max_relative = 1e-13);
    assert_relative_eq!(xd, -0.20637325043540813, max_relative = 1e-13);
}

#[test]
fn ode_exact_critical() {
    let (x, _) = ode_exact(1.0 / 9.0, 1.0, 0.0, 3.0);
    assert_relative_eq!(x, 0.7357588823428847, max_relative = 1e-12);
}

#[test]
fn energy_constants_above_one_ninth() {
    let c = EnergyConstants::new(2.0 / 9.0, 1e-3).unwrap();
    assert_eq!((c.alpha, c.c_e_geom, c.alpha_ode, c.c_e_ode), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn energy_constants_below_one_ninth() {
    let c = EnergyConstants::new(1.0 / 18.0, 1e-3).unwrap();
    assert_relative_eq!(c.delta_alpha, 0.7134423592694787, max_relative = 1e-14);
    assert_relative_eq!(c.alpha, 0.28655764073052126, max_relative = 1e-13);
    assert_relative_eq!(c.c_e_geom, 0.491, max_relative = 1e-14);
    assert_relative_eq!(c.alpha_ode, 0.2928932188134524, max_relative = 1e-14);
    assert_relative_eq!(c.c_e_ode, 0.5, max_relative = 1e-15);
}

#[test]
fn one_ninth_is_excluded_for_the_ode() {
    assert!(matches!(EnergyConstants::for_ode(1.0 / 9.0), Err(Error::Domain(_))));
    assert!(ode_model(0.3, 1.0 / 9.0, 1.0, 0.0, 1.0, 0.01).is_err());
}

#[test]
fn rk4_tracks_the_exact_energy() {
    let run = ode_model(2.0 / 9.0, 2.0 / 9.0, 1.0, 0.5, 10.0, 1e-2).unwrap();
    for s in &run.samples {
        assert_relative_eq!(s.e, s.e_exact, max_relative = 1e-8);
    }
    assert_relative_eq!(run.rate.unwrap().exponent, -2.0 / 3.0, epsilon = 1e-6);
}

#[test]
fn decay_fit_recovers_a_pure_exponential() {
    let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
    let e: Vec<f64> = t.iter().map(|t| 3.0 * (-1.7 * t).exp()).collect();
    let fit = fit_decay_rate(&t, &e, Some((1.0, 4.0))).unwrap();
    assert_relative_eq!(fit.exponent, -1.7, max_relative = 1e-12);
    assert!(fit.residual < 1e-12);
}

fn flat(n: usize) -> GridChart {
    build_flat_torus_chart([n; 3], [2.0 * std::f64::consts::PI / n as f64; 3], 1).unwrap()
}

#[test]
fn constant_potential_lapse() {
    let chart = flat(8);
    let geom = Geometry::new(&chart.gamma).unwrap();
    for s in [0.0, 0.25, 4.0] {
        let (n, _) = solve_lapse(&geom, &vec![s; chart.grid.len()], &SolverConfig::default()).unwrap();
        for v in n {
            assert_relative_eq!(v, 3.0 / (1.0 + 3.0 * s), max_relative = 1e-12);
        }
    }
}

#[test]
fn spectral_inverse_of_a_fourier_mode() {
    let chart = flat(16);
    let grid = chart.grid;
    let pc = SpectralPreconditioner::new(grid, [1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 1.0 / 3.0, Stencil::Compact);
    // compact symbol 4 sin²(kh/2)/h² + 1/3 at k = 1 and k = 2
    for (k, want) in [(1.0, 0.7572612852644732), (2.0, 0.24201951846157066)] {
        let f = grid.sample(|x| (k * x[1]).sin());
        let u = pc.apply(&f);
        for (a, b) in u.iter().zip(&f) {
            assert!((a - want * b).abs() < 1e-12);
        }
    }
}

#[test]
fn scenario_rejects_bad_input() {
    let cases = [
        ("preset = milne\npreset = milne\n", "line 2"),
        ("preset = milne\ngrid.dimz = 8\n", "grid.dimz"),
        ("preset = milne\njust words\n", "line 2"),
        ("preset = nowhere\n", "nowhere"),
    ];
    for (text, needle) in cases {
        let e = Scenario::parse(text).unwrap_err();
        assert!(e.to_string().contains(needle), "{} lacks {}", e, needle);
        assert_eq!(e.exit_code(), 1);
    }
    let mut sc = Scenario::preset(Preset::Milne);
    sc.tau0 = 0.5;
    assert!(sc.validate().unwrap_err().to_string().contains("model.tau0"));
    sc.tau0 = -1.0;
    sc.t_final = 0.0;
    assert!(sc.validate().is_err());
}

#[test]
fn milne_carries_no_matter() {
    let pr = Scenario::parse("preset = milne\ngrid.dims = 6\n").unwrap().prepare().unwrap();
    let ev = Evolution::new(&pr.chart, pr.state, pr.evolution).unwrap();
    let c = ev.context();
    assert_eq!(c.matter.rho.iter().fold(0.0_f64, |m, x| m.max(x.abs())), 0.0);
    assert_eq!(c.matter.stress.max_abs(), 0.0);
}

/// Frozen Φ on the unperturbed Milne slice: the reduced matter is a free
/// Maxwell field, so the stress is traceless with `ρ ∝ E² + B²` and `j ∝ E × B`.
#[test]
fn maxwell_stress_on_milne() {
    let text = "preset = einstein-maxwell\ngrid.dims = 8\nflags.no_backreaction = true\nperturb.g = 0\nperturb.sigma = 0\n";
    let pr = Scenario::parse(text).unwrap().prepare().unwrap();
    let ev = Evolution::new(&pr.chart, pr.state, pr.evolution).unwrap();
    let s = ev.state();
    let c = ev.context();
    assert_eq!(s.tau(), -1.0);
    let geom = Geometry::new(&s.g).unwrap();
    let snap = MatterSnapshot {
        t: s.t,
        tau: s.tau(),
        g: s.g.clone(),
        sigma: s.sigma.clone(),
        lapse: s.lapse.clone(),
        shift: s.shift.clone(),
        matter: c.matter.clone(),
        stress: c.stress.clone(),
    };
    let d = identity_densities(&snap, &geom);
    let f = &c.faraday;
    let scale = d.rho.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    assert!(scale > 0.0);
    for p in 0..geom.n() {
        let (mut e2b2, mut poynting) = (0.0, [0.0; 3]);
        for m in 0..f.q() {
            let e: [f64; 3] = std::array::from_fn(|i| f.electric[m].comp[i][p]);
            let b = [f.f(m, p, 1, 2), f.f(m, p, 2, 0), f.f(m, p, 0, 1)];
            e2b2 += e.iter().chain(&b).map(|x| x * x).sum::<f64>();
            poynting[0] += e[1] * b[2] - e[2] * b[1];
            poynting[1] += e[2] * b[0] - e[0] * b[2];
            poynting[2] += e[0] * b[1] - e[1] * b[0];
        }
        assert!((d.rho[p] - 0.25 * e2b2).abs() <= 1e-12 * scale, "rho at {}", p);
        let tr: f64 = (0..3).map(|i| d.tup.comp[SYM[i][i]][p]).sum();
        assert!((tr - d.rho[p]).abs() <= 1e-12 * scale, "trace at {}", p);
        for i in 0..3 {
            assert!((d.current.comp[i][p] - 0.5 * poynting[i]).abs() <= 1e-12 * scale, "current at {}", p);
        }
    }
}

#[test]
fn vacuum_input_gives_exact_zeros() {
    let pr = Scenario::parse("preset = full-kk\ngrid.dims = 6\nperturb.amplitude = 0\n").unwrap().prepare().unwrap();
    let ev = Evolution::new(&pr.chart, pr.state, pr.evolution).unwrap();
    let c = ev.context();
    let s = ev.state();
    let inp = MatterInputs { geom: &c.geom, lapse: &s.lapse, shift: &s.shift, tau: s.tau(), phi: &s.phi, phi_dot: &s.phi_dot, faraday: &c.faraday };
    let (ms, _) = assemble_matter(&inp).unwrap();
    assert!(ms.rho.iter().all(|x| *x == 0.0));
    // the full assembly agrees with the shortcut
    let ts = assemble_tilde_stress(&inp).unwrap();
    let full = matter_from_stress(&inp, &ts).unwrap();
    assert!(full.rho.iter().chain(&full.eta).all(|x| x.abs() < 1e-15));
    assert!(full.stress.max_abs() < 1e-15 && full.current.max_abs() < 1e-15);
}
