//! Self-contained verification studies behind the command-line subcommands.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elliptic::{exterior_derivative, slice_adapted_gauge, PotentialData, SolverConfig};
use crate::error::{Error, Result};
use crate::evolution::Evolution;
use crate::grid::{axpy, Field3, MultiOneFormField};
use crate::matter::{verify_conformal_identities, SyntheticChart};
use crate::mesh::{build_flat_torus_chart, harmonic_oneform_basis, Geometry};
use crate::scenario::Scenario;

/// Residuals of one slice-adapted gauge solve.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeTestReport {
    pub n: usize,
    pub seed: u64,
    /// `‖div_g ω‖_{L²}`.
    pub div_l2: f64,
    /// Largest projection of `ω` onto a harmonic one-form.
    pub harmonic: f64,
    /// `|∫ Ψ dV_g|`.
    pub psi_mean: f64,
    /// `max |dω − F|` against the closed-form `F`.
    pub curl_error: f64,
    pub max_omega: f64,
}

impl GaugeTestReport {
    pub fn within(&self, tol: f64) -> bool {
        self.div_l2 <= tol && self.harmonic <= tol && self.psi_mean <= tol
    }
}

/// Gauge-fix a random potential `B = Σ a sin(k·x + φ) e_i` on the flat `n³`
/// torus and compare `dω` with the exact `F = dB`. `amplitude = 0` gives `F = 0`.
pub fn gauge_test(n: usize, seed: u64, amplitude: f64) -> Result<GaugeTestReport> {
    if n < 4 {
        return Err(Error::Usage(format!("gauge test needs at least 4 points per axis, got {}", n)));
    }
    let chart = build_flat_torus_chart([n; 3], [2.0 * PI / n as f64; 3], 1)?;
    let grid = chart.grid;
    let geom = Geometry::new(&chart.gamma)?;
    let basis = harmonic_oneform_basis(&chart.gamma)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut b = MultiOneFormField::zeros(grid, 1);
    let mut exact: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; grid.len()]);
    let pairs = [(0, 1), (0, 2), (1, 2)];
    for _ in 0..6 {
        let i = r.gen_range(0..3);
        let k = [r.gen_range(-2..=2) as f64, r.gen_range(-2..=2) as f64, r.gen_range(1..=2) as f64];
        let ph = r.gen_range(0.0..2.0 * PI);
        let a = amplitude * r.gen_range(-1.0..1.0);
        let arg = move |x: [f64; 3]| k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph;
        axpy(&mut b.channels[0].comp[i], 1.0, &grid.sample(|x| a * arg(x).sin()));
        let dv = grid.sample(|x| a * arg(x).cos());
        for (s, (p, q)) in pairs.iter().enumerate() {
            if *q == i {
                axpy(&mut exact[s], k[*p], &dv);
            }
            if *p == i {
                axpy(&mut exact[s], -k[*q], &dv);
            }
        }
    }
    let e0 = grid.sample(|x| amplitude * (x[0] + 2.0 * x[1]).cos());
    let data = PotentialData { b_dot: b.scaled(0.5), b_e0: vec![e0], b };
    let lapse = vec![3.0; grid.len()];
    let out = slice_adapted_gauge(&geom, Some(&basis), &data, &lapse, &Field3::zeros(grid), &SolverConfig::default())?;
    let w = &out.omega.channels[0];
    let div = geom.weighted_div(w);
    let da = exterior_derivative(&grid, w);
    let curl_error = (0..3)
        .map(|s| da[s].iter().zip(&exact[s]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    Ok(GaugeTestReport {
        n,
        seed,
        div_l2: geom.integrate(&div.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt(),
        harmonic: basis.projections(&geom, w).iter().fold(0.0_f64, |m, x| m.max(x.abs())),
        psi_mean: geom.integrate(&out.psi[0]).abs(),
        curl_error,
        max_omega: w.max_abs(),
    })
}

/// Observed orders `log₂(e_l / e_{l+1})` between successive refinements.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderStudy {
    pub name: &'static str,
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Finite-difference conformal transformation formulas at steps `0.08 / 2^l`.
pub fn operator_convergence(levels: usize) -> Result<Vec<OrderStudy>> {
    if levels < 2 {
        return Err(Error::Usage("a convergence study needs at least two levels".into()));
    }
    let data = SyntheticChart::new(0.2, 2);
    let steps: Vec<f64> = (0..levels).map(|l| 0.08 / 2f64.powi(l as i32)).collect();
    let reports: Vec<[f64; 4]> = steps.iter().map(|h| verify_conformal_identities(&data, *h).as_array()).collect();
    Ok(["ricci", "scalar", "hessian", "wave"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let errors: Vec<f64> = reports.iter().map(|r| r[i]).collect();
            OrderStudy { name, steps: steps.clone(), orders: orders(&errors), errors }
        })
        .collect())
}

/// Homogeneous Brans-Dicke run to `T = 2` at steps `0.2 / 2^l` against the
/// closed form `Φ = Φ₀ exp(3r₀(1 − e^{−2T})/2)`.
pub fn integrator_convergence(levels: usize) -> Result<OrderStudy> {
    if levels < 2 {
        return Err(Error::Usage("a convergence study needs at least two levels".into()));
    }
    let t_final = 2.0;
    let steps: Vec<f64> = (0..levels).map(|l| 0.2 / 2f64.powi(l as i32)).collect();
    let mut errors = Vec::with_capacity(levels);
    for dt in &steps {
        let text = format!(
            "preset = brans-dicke-homogeneous\ngrid.dims = 4\ntime.dt = {}\ntime.cfl = 1\ntime.t_final = {}\nflags.no_backreaction = true\n",
            dt, t_final
        );
        let pr = Scenario::parse(&text)?.prepare()?;
        let (phi0, pd0) = (pr.state.phi.comp[0][0], pr.state.phi_dot.comp[0][0]);
        let r0 = pd0 / phi0;
        let mut ev = Evolution::new(&pr.chart, pr.state, pr.evolution)?;
        for _ in 0..(t_final / dt).round() as usize {
            ev.step(*dt)?;
        }
        let s = ev.state();
        let decay = (-2.0 * s.t).exp();
        let phi = phi0 * (1.5 * r0 * (1.0 - decay)).exp();
        let pd = r0 * decay * phi;
        let e_phi = s.phi.comp[0].iter().map(|x| (x - phi).abs()).fold(0.0, f64::max);
        let e_pd = s.phi_dot.comp[0].iter().map(|x| (x - pd).abs()).fold(0.0, f64::max);
        errors.push(e_phi.max(e_pd));
    }
    Ok(OrderStudy { name: "rk4", steps, orders: orders(&errors), errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_gives_zero_potential() {
        let r = gauge_test(8, 1, 0.0).unwrap();
        assert_eq!(r.max_omega, 0.0);
        assert_eq!(r.curl_error, 0.0);
    }

    #[test]
    fn gauge_test_is_deterministic() {
        assert_eq!(gauge_test(8, 5, 1.0).unwrap(), gauge_test(8, 5, 1.0).unwrap());
    }

    #[test]
    fn operator_orders_are_two() {
        for s in operator_convergence(3).unwrap() {
            for o in s.orders {
                assert!((1.8..=2.2).contains(&o), "{} order {}", s.name, o);
            }
        }
    }
}
