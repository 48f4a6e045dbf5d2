//! Corrected energies, the model ODE and decay-rate diagnostics.

use crate::error::{Error, Result};
use crate::grid::*;
use crate::mesh::{lichnerowicz_operator, Connection, Geometry, GridChart};

const ONE_NINTH: f64 = 1.0 / 9.0;

/// Correction constants derived from the lowest eigenvalue `λ₀` of the
/// Einstein operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub lambda0: f64,
    pub epsilon_prime: f64,
    /// `√(1 − 9(λ₀ − ε′))`, only meaningful for `λ₀ ≤ 1/9`.
    pub delta_alpha: f64,
    pub alpha: f64,
    pub c_e_geom: f64,
    /// Rate constant of the model ODE, `1 − √(1 − 9λ₀)` below `1/9`.
    pub alpha_ode: f64,
    pub c_e_ode: f64,
}

impl EnergyConstants {
    pub fn new(lambda0: f64, epsilon_prime: f64) -> Result<Self> {
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", lambda0)));
        }
        if !(epsilon_prime > 0.0 && epsilon_prime < 1.0) {
            return Err(Error::Config(format!("epsilon_prime must lie in (0, 1), got {}", epsilon_prime)));
        }
        let above = lambda0 > ONE_NINTH;
        let delta_alpha = (1.0 - 9.0 * (lambda0 - epsilon_prime)).max(0.0).sqrt();
        let c_e_geom = if above { 1.0 } else { 9.0 * (lambda0 - epsilon_prime) };
        if !(c_e_geom > 0.0 && c_e_geom <= 1.0) {
            return Err(Error::Config(format!("epsilon_prime = {} leaves no positive correction constant", epsilon_prime)));
        }
        Ok(EnergyConstants {
            lambda0,
            epsilon_prime,
            delta_alpha,
            alpha: if above { 1.0 } else { 1.0 - delta_alpha },
            c_e_geom,
            alpha_ode: if above { 1.0 } else { 1.0 - (1.0 - 9.0 * lambda0).sqrt() },
            c_e_ode: if above { 1.0 } else { 9.0 * lambda0 },
        })
    }

    /// Constants for the model ODE; `λ₀ = 1/9` is excluded there.
    pub fn for_ode(lambda0: f64) -> Result<Self> {
        if (lambda0 - ONE_NINTH).abs() <= 1e-15 {
            return Err(Error::Domain("lambda0 = 1/9 is excluded for the model ODE energy".into()));
        }
        Self::new(lambda0, 1e-3_f64.min(0.5 * lambda0))
    }
}

// ---------------------------------------------------------------------------
// Field energies.

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryEnergy {
    pub value: f64,
    /// `𝓔_(m)` for `m = 1..=s`.
    pub e_parts: Vec<f64>,
    /// `Γ_(m)` for `m = 1..=s`.
    pub gamma_parts: Vec<f64>,
}

fn sym_inner(geom: &Geometry, u: &SymTensorField, v: &SymTensorField) -> f64 {
    let f: Vec<f64> = (0..geom.n()).map(|p| geom.sym_dot_at(p, u, v)).collect();
    geom.integrate(&f)
}

/// Geometric energy as a quadratic form in `(h, Σ)` with the operator,
/// inner products and volume taken from `op`.
pub fn energy_geometry_form(chart: &GridChart, op: &Geometry, h: &SymTensorField, sigma: &SymTensorField, s: usize, c_e: f64) -> Result<GeometryEnergy> {
    if s == 0 {
        return Err(Error::Config("geometric energy order must be at least 1".into()));
    }
    let six_sigma = sigma.scaled(6.0);
    let mut l_sigma = six_sigma.clone(); // 𝓛^{m−1} 6Σ
    let mut l_h_prev = h.clone(); // 𝓛^{m−1} h
    let mut e_parts = Vec::with_capacity(s);
    let mut gamma_parts = Vec::with_capacity(s);
    let mut value = 0.0;
    for m in 1..=s {
        if m > 1 {
            l_sigma = lichnerowicz_operator(chart, &op.inv, &l_sigma)?;
        }
        let l_h = lichnerowicz_operator(chart, &op.inv, &l_h_prev)?;
        let e = 0.5 * sym_inner(op, &six_sigma, &l_sigma) + 4.5 * sym_inner(op, h, &l_h);
        let gm = sym_inner(op, &six_sigma, &l_h_prev);
        value += e + c_e * gm;
        e_parts.push(e);
        gamma_parts.push(gm);
        l_h_prev = l_h;
    }
    Ok(GeometryEnergy { value, e_parts, gamma_parts })
}

/// `E_s(g − γ, Σ)` with the operator evaluated at `g`.
pub fn energy_geometry(chart: &GridChart, g: &MetricField, sigma: &SymTensorField, s: usize, consts: &EnergyConstants) -> Result<GeometryEnergy> {
    let geom = Geometry::new(g)?;
    let h = g.sub(&chart.gamma);
    energy_geometry_form(chart, &geom, &h, sigma, s, consts.c_e_geom)
}

fn oneform_inner(geom: &Geometry, u: &OneFormField, v: &OneFormField) -> f64 {
    let f: Vec<f64> = (0..geom.n()).map(|p| geom.oneform_dot_at(p, u, v)).collect();
    geom.integrate(&f)
}

/// `E_k(ω)` summed over channels, with `Δ_H` built from `conn` and `ric`.
pub fn energy_omega(geom: &Geometry, conn: &Connection, ric: &SymTensorField, omega: &MultiOneFormField, omega_dot: &MultiOneFormField, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("one-form energy order must be at least 1".into()));
    }
    let mut total = 0.0;
    for (w, wd) in omega.channels.iter().zip(&omega_dot.channels) {
        let mut hw = geom.hodge_laplacian(w, conn, ric); // Δ_H^{l+1} ω
        let mut hwd = wd.clone(); // Δ_H^l 𝓛ₑ₀ω
        for l in 0..k {
            if l > 0 {
                hw = geom.hodge_laplacian(&hw, conn, ric);
                hwd = geom.hodge_laplacian(&hwd, conn, ric);
            }
            total += oneform_inner(geom, &hwd, wd) + oneform_inner(geom, &hw, w);
        }
    }
    Ok(total)
}

/// `E_k(Φ)` over all `q²` entries, with `Φ^⊥` the deviation from the `dV_g`-mean.
pub fn energy_phi(geom: &Geometry, phi: &PhiField, phi_dot: &PhiField, k: usize, c_e: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("shape-field energy order must be at least 1".into()));
    }
    let q = phi.q;
    let n = geom.n();
    let neg_lap = |f: &[f64]| -> Vec<f64> { geom.laplacian(f).into_iter().map(|x| -x).collect() };
    let inner = |a: &[f64], b: &[f64]| -> f64 { geom.integrate(&(0..n).map(|p| a[p] * b[p]).collect::<Vec<_>>()) };
    let mut total = 0.0;
    for a in 0..q {
        for b in 0..q {
            let c = pidx(q, a, b);
            let mut perp = phi.comp[c].clone();
            geom.remove_mean(&mut perp);
            let dot = &phi_dot.comp[c];
            let mut ld = dot.clone(); // (−Δ)^l ∂ₑ₀Φ
            let mut lp = neg_lap(&perp); // (−Δ)^{l+1} Φ^⊥
            for l in 0..k {
                if l > 0 {
                    ld = neg_lap(&ld);
                    lp = neg_lap(&lp);
                }
                total += inner(&ld, dot) + 0.5 * inner(&lp, &perp) + c_e / 3.0 * inner(&ld, &perp);
            }
        }
    }
    Ok(total)
}

/// Smallest eigenvalue of the single-mode form of `E_k(Φ)` for a Laplace
/// eigenvalue `μ`: `[[1, c/6], [c/6, μ/2]]` scaled by `μ^l`.
pub fn phi_mode_form_min_eigen(mu: f64, c_e: f64) -> f64 {
    sym2_eigen(1.0, c_e / 6.0, 0.5 * mu).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyBreakdown {
    pub t: f64,
    pub s: usize,
    pub k: usize,
    pub geom: GeometryEnergy,
    pub e_geom: f64,
    pub e_omega: f64,
    pub e_phi: f64,
    pub e_tot: f64,
    pub constants: EnergyConstants,
}

/// Total energy `E_geom + e^{−2T} E_omega + E_phi`.
#[allow(clippy::too_many_arguments)]
pub fn energy_total(
    chart: &GridChart,
    t: f64,
    g: &MetricField,
    sigma: &SymTensorField,
    phi: &PhiField,
    phi_dot: &PhiField,
    omega: &MultiOneFormField,
    omega_dot: &MultiOneFormField,
    orders: (usize, usize),
    consts: &EnergyConstants,
) -> Result<EnergyBreakdown> {
    let (s, k) = orders;
    let geom = Geometry::new(g)?;
    let geo = energy_geometry_form(chart, &geom, &g.sub(&chart.gamma), sigma, s, consts.c_e_geom)?;
    let e_omega = if omega.max_abs() == 0.0 && omega_dot.max_abs() == 0.0 {
        0.0
    } else {
        let conn = geom.connection();
        let ric = if conn.flat { SymTensorField::zeros(geom.grid) } else { geom.ricci() };
        energy_omega(&geom, &conn, &ric, omega, omega_dot, k)?
    };
    let e_phi = energy_phi(&geom, phi, phi_dot, k, consts.c_e_ode)?;
    let e_geom = geo.value;
    Ok(EnergyBreakdown {
        t,
        s,
        k,
        e_tot: compose_total(t, e_geom, e_omega, e_phi),
        geom: geo,
        e_geom,
        e_omega,
        e_phi,
        constants: *consts,
    })
}

#[inline]
pub fn compose_total(t: f64, e_geom: f64, e_omega: f64, e_phi: f64) -> f64 {
    e_geom + (-2.0 * t).exp() * e_omega + e_phi
}

// ---------------------------------------------------------------------------
// Model ODE `Ẍ + (2/3)Ẋ + λX = 0`.

/// `E = ½Ẋ² + (λ/2)X² + (c/3)XẊ`.
pub fn ode_energy(lambda: f64, c_e: f64, x: f64, xd: f64) -> f64 {
    0.5 * xd * xd + 0.5 * lambda * x * x + c_e / 3.0 * x * xd
}

/// `Ė` with `Ẍ` eliminated through the model equation.
pub fn ode_energy_rate(lambda: f64, c_e: f64, x: f64, xd: f64) -> f64 {
    (-2.0 / 3.0 + c_e / 3.0) * xd * xd - 2.0 * c_e / 9.0 * x * xd - c_e * lambda / 3.0 * x * x
}

/// Matrix of `Ė + (2/3)αE` in the basis `(Ẋ, X)`, as `(a, b, d)` for `[[a, b], [b, d]]`.
pub fn ode_dissipation_form(lambda: f64, c_e: f64, alpha: f64) -> (f64, f64, f64) {
    let r = 2.0 / 3.0 * alpha;
    let a = -2.0 / 3.0 + c_e / 3.0 + r * 0.5;
    let b = 0.5 * (-2.0 * c_e / 9.0 + r * c_e / 3.0);
    let d = -c_e * lambda / 3.0 + r * lambda * 0.5;
    (a, b, d)
}

/// Matrix of `E` in the basis `(Ẋ, X)`.
pub fn ode_energy_form(lambda: f64, c_e: f64) -> (f64, f64, f64) {
    (0.5, c_e / 6.0, 0.5 * lambda)
}

/// Eigenvalues of `[[a, b], [b, d]]`, ascending.
pub fn sym2_eigen(a: f64, b: f64, d: f64) -> (f64, f64) {
    let m = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (m - r, m + r)
}

/// Exact solution `(X, Ẋ)` at time `t`.
pub fn ode_exact(lambda: f64, x0: f64, xd0: f64, t: f64) -> (f64, f64) {
    let a = -1.0 / 3.0;
    let disc = ONE_NINTH - lambda;
    if disc.abs() < 1e-14 {
        // repeated root a
        let c2 = xd0 - a * x0;
        let e = (a * t).exp();
        let x = (x0 + c2 * t) * e;
        return (x, a * x + c2 * e);
    }
    if disc > 0.0 {
        let s = disc.sqrt();
        let (r1, r2) = (a + s, a - s);
        let c1 = (xd0 - r2 * x0) / (r1 - r2);
        let c2 = x0 - c1;
        let (e1, e2) = ((r1 * t).exp(), (r2 * t).exp());
        return (c1 * e1 + c2 * e2, c1 * r1 * e1 + c2 * r2 * e2);
    }
    let w = (-disc).sqrt();
    let b = (xd0 - a * x0) / w;
    let e = (a * t).exp();
    let (sn, cs) = (w * t).sin_cos();
    let x = e * (x0 * cs + b * sn);
    let xd = a * x + e * (-x0 * w * sn + b * w * cs);
    (x, xd)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeSample {
    pub t: f64,
    pub x: f64,
    pub xdot: f64,
    pub e: f64,
    pub e_exact: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeRun {
    pub lambda: f64,
    pub constants: EnergyConstants,
    pub samples: Vec<OdeSample>,
    /// Least-squares exponent of `E(T)` over the whole run.
    pub rate: Option<DecayFit>,
}

impl OdeRun {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,X,Xdot,E,E_exact\n");
        for p in &self.samples {
            s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", p.t, p.x, p.xdot, p.e, p.e_exact));
        }
        s
    }
}

/// Integrate the model ODE with classical RK4 and step `dt`, alongside the exact solution.
pub fn ode_model(lambda: f64, lambda0: f64, x0: f64, xd0: f64, t_final: f64, dt: f64) -> Result<OdeRun> {
    let consts = EnergyConstants::for_ode(lambda0)?;
    if lambda < lambda0 {
        return Err(Error::Domain(format!("lambda = {} lies below lambda0 = {}", lambda, lambda0)));
    }
    if !(dt > 0.0 && t_final > 0.0) {
        return Err(Error::Config("ode step and final time must be positive".into()));
    }
    let c = consts.c_e_ode;
    let f = |x: f64, v: f64| (v, -2.0 / 3.0 * v - lambda * x);
    let steps = (t_final / dt).round() as usize;
    let h = t_final / steps as f64;
    let (mut x, mut v) = (x0, xd0);
    let mut samples = Vec::with_capacity(steps + 1);
    let sample = |t: f64, x: f64, v: f64| {
        let (xe, ve) = ode_exact(lambda, x0, xd0, t);
        OdeSample { t, x, xdot: v, e: ode_energy(lambda, c, x, v), e_exact: ode_energy(lambda, c, xe, ve) }
    };
    samples.push(sample(0.0, x, v));
    for i in 0..steps {
        let (k1x, k1v) = f(x, v);
        let (k2x, k2v) = f(x + 0.5 * h * k1x, v + 0.5 * h * k1v);
        let (k3x, k3v) = f(x + 0.5 * h * k2x, v + 0.5 * h * k2v);
        let (k4x, k4v) = f(x + h * k3x, v + h * k3v);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        samples.push(sample((i + 1) as f64 * h, x, v));
    }
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let es: Vec<f64> = samples.iter().map(|s| s.e).collect();
    let rate = fit_decay_rate(&ts, &es, None).ok();
    Ok(OdeRun { lambda, constants: consts, samples, rate })
}

// ---------------------------------------------------------------------------
// Rate fitting.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub exponent: f64,
    pub intercept: f64,
    /// RMS residual of `log E` about the fitted line.
    pub residual: f64,
    /// Standard error of the exponent.
    pub std_error: f64,
    pub samples: usize,
}

/// Least-squares slope of `log E` against `T` over the samples with `T` in `window`.
pub fn fit_decay_rate(t: &[f64], e: &[f64], window: Option<(f64, f64)>) -> Result<DecayFit> {
    if t.len() != e.len() {
        return Err(Error::Usage("time and energy series differ in length".into()));
    }
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let mut pts = Vec::new();
    for (&ti, &ei) in t.iter().zip(e) {
        if ti < lo || ti > hi {
            continue;
        }
        if !(ei > 0.0) {
            return Err(Error::Domain(format!("nonpositive energy {} at T = {}", ei, ti)));
        }
        pts.push((ti, ei.ln()));
    }
    if pts.len() < 10 {
        return Err(Error::Domain(format!("rate fit needs at least 10 samples, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mt;
    let ss: f64 = pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    Ok(DecayFit {
        exponent: slope,
        intercept: icpt,
        residual: (ss / n).sqrt(),
        std_error: (ss / (n - 2.0) / sxx).sqrt(),
        samples: pts.len(),
    })
}

// ---------------------------------------------------------------------------
// Mean-value evolution.

/// Fields needed by [`mean_value_monitor`] at one time.
#[derive(Clone, Debug)]
pub struct MeanValueSnapshot {
    pub t: f64,
    pub g: MetricField,
    pub sigma: SymTensorField,
    pub lapse: Vec<f64>,
    pub phi: PhiField,
    pub phi_dot: PhiField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanValueReport {
    /// Finite-difference `∂_T ū` per packed channel.
    pub lhs: Vec<f64>,
    /// `⨍ N ∂ₑ₀u − ⨍ tr_gΠ u^⊥` as stated.
    pub rhs_literal: Vec<f64>,
    /// `⨍ N ∂ₑ₀u − ⨍ N tr_gΠ u^⊥`, which follows from `∂_T g = −2NΠ − 𝓛_X g`.
    pub rhs_weighted: Vec<f64>,
    pub residual_literal: f64,
    pub residual_weighted: f64,
}

fn mean_value_rhs(s: &MeanValueSnapshot, c: usize) -> Result<(f64, f64)> {
    let geom = Geometry::new(&s.g)?;
    let n = geom.n();
    let pi = crate::mesh::second_fundamental_form(&s.g, &s.sigma, &s.lapse);
    let tr = geom.trace(&pi);
    let mut perp = s.phi.comp[c].clone();
    geom.remove_mean(&mut perp);
    let nd: Vec<f64> = (0..n).map(|p| s.lapse[p] * s.phi_dot.comp[c][p]).collect();
    let a = geom.mean(&nd);
    let lit = geom.mean(&(0..n).map(|p| tr[p] * perp[p]).collect::<Vec<_>>());
    let wt = geom.mean(&(0..n).map(|p| s.lapse[p] * tr[p] * perp[p]).collect::<Vec<_>>());
    Ok((a - lit, a - wt))
}

/// Compare the finite-difference evolution of `ū` with its mean-value formula,
/// for every packed entry of `Φ`; the right side is averaged over both snapshots.
pub fn mean_value_monitor(a: &MeanValueSnapshot, b: &MeanValueSnapshot) -> Result<MeanValueReport> {
    let dt = b.t - a.t;
    if !(dt > 0.0) {
        return Err(Error::Usage("snapshots must be ordered in time".into()));
    }
    let ga = Geometry::new(&a.g)?;
    let gb = Geometry::new(&b.g)?;
    let np = a.phi.comp.len();
    let mut rep = MeanValueReport {
        lhs: Vec::with_capacity(np),
        rhs_literal: Vec::with_capacity(np),
        rhs_weighted: Vec::with_capacity(np),
        residual_literal: 0.0,
        residual_weighted: 0.0,
    };
    for c in 0..np {
        let lhs = (gb.mean(&b.phi.comp[c]) - ga.mean(&a.phi.comp[c])) / dt;
        let (la, wa) = mean_value_rhs(a, c)?;
        let (lb, wb) = mean_value_rhs(b, c)?;
        let lit = 0.5 * (la + lb);
        let wt = 0.5 * (wa + wb);
        rep.residual_literal = rep.residual_literal.max((lhs - lit).abs());
        rep.residual_weighted = rep.residual_weighted.max((lhs - wt).abs());
        rep.lhs.push(lhs);
        rep.rhs_literal.push(lit);
        rep.rhs_weighted.push(wt);
    }
    Ok(rep)
}
