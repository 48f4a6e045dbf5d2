//! Method-of-lines integration of the rescaled system with elliptic solves at
//! every stage.
//!
//! Time derivatives are taken in `T` and converted with `∂_T = N ∂ₑ₀ − X`,
//! where the transport term is the Lie derivative along the shift.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3};

use crate::elliptic::*;
use crate::energy::{energy_total, EnergyBreakdown, EnergyConstants};
use crate::error::{Error, Result};
use crate::grid::*;
use crate::matter::{assemble_matter, phi_inverse, phi_trace_grad, MatterInputs, MatterSet, TildeStress};
use crate::mesh::*;
use crate::state::FieldState;

/// Which parts of the coupled system are evolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sector {
    Full,
    /// `F ≡ 0`: the potential stays zero and its solves are skipped.
    BransDicke,
    /// `Φ` held constant.
    EinsteinMaxwell,
}

/// Reading of the `δ_ij` inside the curvature block of the `Σ` equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaReading {
    /// Omitted, which keeps the background a fixed point.
    Dropped,
    /// Kronecker symbol in chart coordinates.
    Kronecker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolutionConfig {
    pub cfl: f64,
    pub solver: SolverConfig,
    pub sector: Sector,
    pub no_backreaction: bool,
    pub delta_reading: DeltaReading,
    pub spd_margin: f64,
    pub blowup_norm: f64,
    /// Passes of the matter/lapse/shift coupling loop per stage.
    pub coupling_max: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            cfl: 0.5,
            solver: SolverConfig::default(),
            sector: Sector::Full,
            no_backreaction: false,
            delta_reading: DeltaReading::Dropped,
            spd_margin: 1e-10,
            blowup_norm: 1e6,
            coupling_max: 6,
        }
    }
}

/// `Π`, the vector `2 div Π − D tr Π` and the frame coefficients.
#[derive(Clone, Debug)]
pub struct ComputedKinematics {
    pub pi: SymTensorField,
    pub sigma_vec: OneFormField,
    pub lapse: Vec<f64>,
    pub shift: VectorField,
}

pub fn compute_kinematics(geom: &Geometry, state: &FieldState) -> Result<ComputedKinematics> {
    if let Some(p) = state.lapse.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::Numeric { point: p, msg: format!("lapse must be positive, got {}", state.lapse[p]) });
    }
    let pi = second_fundamental_form(&state.g, &state.sigma, &state.lapse);
    let sigma_vec = sigma_vector(geom, &pi);
    Ok(ComputedKinematics { pi, sigma_vec, lapse: state.lapse.clone(), shift: state.shift.clone() })
}

/// Ricci tensor entering the Einstein-flow equations.
pub fn model_ricci(geom: &Geometry, model: CurvatureModel) -> SymTensorField {
    let mut r = geom.ricci();
    if model == CurvatureModel::EinsteinStandIn {
        r.axpy(-2.0 / 9.0, &geom.g);
    }
    r
}

/// `(∂_T g, ∂_T Σ)`.
pub fn rhs_geometry(
    geom: &Geometry,
    ric: &SymTensorField,
    delta: DeltaReading,
    state: &FieldState,
    stress: &SymTensorField,
) -> (SymTensorField, SymTensorField) {
    let grid = geom.grid;
    let n = geom.n();
    let tau = state.tau();
    let lapse = &state.lapse;
    let sig = &state.sigma;
    let hess = geom.hessian(lapse);
    let lie_g = lie_sym(&grid, &state.shift, &state.g);
    let lie_s = lie_sym(&grid, &state.shift, sig);
    let mut dg = SymTensorField::zeros(grid);
    let mut ds = SymTensorField::zeros(grid);
    for p in 0..n {
        let nn = lapse[p];
        let gi = geom.inv.at(p);
        let s = sig.at(p);
        let g = state.g.at(p);
        let c = nn / 3.0 - 1.0;
        for k in 0..6 {
            let (i, j) = SYM_PAIRS[k];
            dg.comp[k][p] = 2.0 * nn * s.0[k] + 2.0 * c * g.0[k] - lie_g.comp[k][p];
            // Σ_ik Σ^k_j
            let mut ss = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    ss += s.get(i, a) * gi.get(a, b) * s.get(b, j);
                }
            }
            let kron = if delta == DeltaReading::Kronecker && i == j { 1.0 } else { 0.0 };
            ds.comp[k][p] = -2.0 * s.0[k] - nn * (ric.comp[k][p] - kron + 2.0 / 9.0 * g.0[k]) + hess.comp[k][p] + 2.0 * nn * ss
                - c / 3.0 * g.0[k]
                - c * s.0[k]
                - lie_s.comp[k][p]
                + nn * tau * stress.comp[k][p];
        }
    }
    (dg, ds)
}

/// `∂ₑ₀(∂ₑ₀Φ)` from the shape-field equation.
pub fn rhs_phi(
    geom: &Geometry,
    lapse: &[f64],
    pi: &SymTensorField,
    phi: &PhiField,
    phi_dot: &PhiField,
    faraday: &FaradayField,
    tau: f64,
) -> Result<PhiField> {
    let grid = geom.grid;
    let n = geom.n();
    let q = phi.q;
    let mut out = PhiField::zeros(grid, q);
    let lap: Vec<Vec<f64>> = phi.comp.iter().map(|c| geom.laplacian(c)).collect();
    let dphi: Vec<[Vec<f64>; 3]> = phi.comp.iter().map(|c| grad(&grid, c)).collect();
    let logn: Vec<f64> = lapse.iter().map(|x| x.ln()).collect();
    let dlogn = grad(&grid, &logn);
    let trpi = geom.trace(pi);
    let qf = faraday.q();
    let coup = tau * tau;
    for p in 0..n {
        let (inv, det) = phi_inverse(phi, p)?;
        let sdet = det.sqrt();
        let gi = geom.inv.at(p);
        let lin = -2.0 / 3.0 - (-trpi[p] - 2.0 * (1.0 / 3.0 - 1.0 / lapse[p]));
        for m in 0..q {
            for nn in m..q {
                let k = pidx(q, m, nn);
                let mut v = lap[k][p] + lin * phi_dot.comp[k][p];
                // −(**): the transport term by ∇ log N
                for i in 0..3 {
                    for j in 0..3 {
                        v += gi.get(i, j) * dlogn[i][p] * dphi[k][j][p];
                    }
                }
                // −(*)
                let mut star = 0.0;
                for a in 0..q {
                    for b in 0..q {
                        let ip = inv[a * q + b];
                        if ip == 0.0 {
                            continue;
                        }
                        let ka = pidx(q, m, a);
                        let kb = pidx(q, nn, b);
                        let mut sp = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                sp += gi.get(i, j) * dphi[ka][i][p] * dphi[kb][j][p];
                            }
                        }
                        star += ip * (sp - phi_dot.comp[ka][p] * phi_dot.comp[kb][p]);
                    }
                }
                if m < qf && nn < qf {
                    let mut ff = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    ff += gi.get(i, a) * gi.get(j, b) * faraday.f(m, p, i, j) * faraday.f(nn, p, a, b);
                                }
                            }
                            ff -= 2.0 * gi.get(i, j) * faraday.electric[m].comp[i][p] * faraday.electric[nn].comp[j][p];
                        }
                    }
                    star += sdet * coup * ff;
                }
                out.comp[k][p] = v - star;
            }
        }
    }
    Ok(out)
}

/// Inputs of [`rhs_omega`] beyond the geometry.
pub struct OmegaInputs<'a> {
    pub lapse: &'a [f64],
    pub pi: &'a SymTensorField,
    pub omega: &'a MultiOneFormField,
    pub psi: &'a [Vec<f64>],
    /// `∂ₑ₀Ψ` per channel.
    pub dpsi_e0: &'a [Vec<f64>],
    /// `∂ₑ₀ log N`.
    pub dlogn_e0: &'a [f64],
    pub faraday: &'a FaradayField,
    pub phi: &'a PhiField,
    pub phi_dot: &'a PhiField,
}

/// `𝓛ₑ₀(𝓛ₑ₀ω)` for every channel.
pub fn rhs_omega(geom: &Geometry, conn: &Connection, ric: &SymTensorField, inp: &OmegaInputs) -> Result<MultiOneFormField> {
    let grid = geom.grid;
    let n = geom.n();
    let q = inp.omega.q();
    let mut out = MultiOneFormField::zeros(grid, q);
    if q == 0 {
        return Ok(out);
    }
    let pq = inp.phi.q;
    let tgrad = phi_trace_grad(&grid, inp.phi)?;
    let mut t0 = vec![0.0; n];
    for (p, t) in t0.iter_mut().enumerate() {
        let (inv, _) = phi_inverse(inp.phi, p)?;
        let mut s = 0.0;
        for a in 0..pq {
            for b in 0..pq {
                s += inv[a * pq + b] * inp.phi_dot.comp[pidx(pq, b, a)][p];
            }
        }
        *t = s;
    }
    let dn = grad(&grid, inp.lapse);
    let dl = grad(&grid, inp.dlogn_e0);
    let trpi = geom.trace(inp.pi);
    for m in 0..q {
        let w = &inp.omega.channels[m];
        if w.max_abs() == 0.0 && inp.faraday.electric[m].max_abs() == 0.0 && max_abs(&inp.psi[m]) == 0.0 && max_abs(&inp.dpsi_e0[m]) == 0.0 {
            continue;
        }
        let hl = geom.hodge_laplacian(w, conn, ric);
        let ddpsi = grad(&grid, &inp.dpsi_e0[m]);
        let e = &inp.faraday.electric[m];
        let o = &mut out.channels[m];
        for p in 0..n {
            let gi = geom.inv.at(p);
            let pl = inp.pi.at(p);
            let nn = inp.lapse[p];
            let psi = inp.psi[m][p];
            let pd = inp.dpsi_e0[m][p];
            for k in 0..3 {
                let mut v = -hl.comp[k][p] + ddpsi[k][p] + pd * dn[k][p] / nn + psi * dl[k][p];
                for i in 0..3 {
                    for j in 0..3 {
                        let gij = gi.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        v += gij * dn[i][p] / nn * inp.faraday.f(m, p, j, k);
                        v += 2.0 * gij * pl.get(i, k) * e.comp[j][p];
                        v += 0.5 * gij * inp.faraday.f(m, p, i, k) * tgrad[j][p];
                    }
                }
                v += -trpi[p] * e.comp[k][p] + 0.5 * e.comp[k][p] * t0[p];
                o.comp[k][p] = v;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Constraints.

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintReport {
    pub ham_l2: f64,
    pub ham_linf: f64,
    pub mom_l2: f64,
    pub mom_linf: f64,
    pub sigma_trace_max: f64,
    /// Smallest eigenvalue of `g` over the grid.
    pub g_margin: f64,
    /// Smallest eigenvalue of `Φ` over the grid.
    pub phi_margin: f64,
}

impl ConstraintReport {
    pub fn is_finite(&self) -> bool {
        [self.ham_l2, self.ham_linf, self.mom_l2, self.mom_linf, self.sigma_trace_max, self.g_margin, self.phi_margin]
            .iter()
            .all(|x| x.is_finite())
    }
}

fn min_eigen3(s: &Sym3) -> f64 {
    let f = s.full();
    let m = Matrix3::from_fn(|i, j| f[i][j]);
    m.symmetric_eigenvalues().min()
}

fn min_eigen_q(m: &[f64], q: usize) -> f64 {
    if q == 1 {
        return m[0];
    }
    DMatrix::from_row_slice(q, q, m).symmetric_eigenvalues().min()
}

/// Smallest pointwise eigenvalues of `g` and `Φ`, with the points where they occur.
pub fn spd_margins(g: &MetricField, phi: &PhiField) -> ((f64, usize), (f64, usize)) {
    let mut gm = (f64::INFINITY, 0);
    let mut pm = (f64::INFINITY, 0);
    for p in 0..g.grid.len() {
        let e = min_eigen3(&g.at(p));
        if !(e >= gm.0) {
            gm = (e, p);
        }
        let e = min_eigen_q(&phi.matrix(p), phi.q);
        if !(e >= pm.0) {
            pm = (e, p);
        }
    }
    (gm, pm)
}

/// Hamiltonian and momentum residuals `R − |Σ|² + 2/3 − 4τρ` and `D^iΣ_ij − τ² j_j`.
pub fn constraint_report(geom: &Geometry, model: CurvatureModel, state: &FieldState, matter: &MatterSet) -> ConstraintReport {
    let n = geom.n();
    let tau = state.tau();
    let ric = model_ricci(geom, model);
    let r = geom.trace(&ric);
    let s2 = geom.sym_norm_sq(&state.sigma);
    let ham: Vec<f64> = (0..n).map(|p| r[p] - s2[p] + 2.0 / 3.0 - 4.0 * tau * matter.rho[p]).collect();
    let mut mom = geom.div_sym(&state.sigma);
    let jl = geom.lower(&matter.current);
    mom.axpy(-tau * tau, &jl);
    let msq: Vec<f64> = (0..n).map(|p| geom.oneform_dot_at(p, &mom, &mom)).collect();
    let tr = geom.trace(&state.sigma);
    let ((gm, _), (pm, _)) = spd_margins(&state.g, &state.phi);
    ConstraintReport {
        ham_l2: geom.integrate(&ham.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt(),
        ham_linf: max_abs(&ham),
        mom_l2: geom.integrate(&msq).sqrt(),
        mom_linf: msq.iter().fold(0.0_f64, |a, b| a.max(b.sqrt())),
        sigma_trace_max: max_abs(&tr),
        g_margin: gm,
        phi_margin: pm,
    }
}

// ---------------------------------------------------------------------------
// Stepping.

/// Largest characteristic speed `N √λ_max(g⁻¹) + |X|_g`.
pub fn max_speed(g: &MetricField, lapse: &[f64], shift: &VectorField) -> f64 {
    let mut m: f64 = 0.0;
    for p in 0..g.grid.len() {
        let gp = g.at(p);
        let lmin = min_eigen3(&gp);
        let x = shift.at(p);
        let mut x2 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                x2 += gp.get(i, j) * x[i] * x[j];
            }
        }
        m = m.max(lapse[p] / lmin.max(f64::MIN_POSITIVE).sqrt() + x2.sqrt());
    }
    m
}

/// Largest stable step `cfl · h_min / max_speed`.
pub fn cfl_limit(state: &FieldState, cfl: f64) -> f64 {
    let s = max_speed(&state.g, &state.lapse, &state.shift);
    if s == 0.0 {
        f64::INFINITY
    } else {
        cfl * state.grid().min_spacing() / s
    }
}

/// Derived quantities of a state with solved lapse, shift and Ψ.
#[derive(Clone, Debug)]
pub struct StageContext {
    pub geom: Geometry,
    pub conn: Connection,
    pub pi: SymTensorField,
    /// Ricci tensor of the curvature model.
    pub ric: SymTensorField,
    pub faraday: FaradayField,
    pub matter: MatterSet,
    pub stress: TildeStress,
}

/// Accepted-step data for the backward differences of Ψ and log N.
#[derive(Clone, Debug)]
struct History {
    t: f64,
    psi: Vec<Vec<f64>>,
    logn: Vec<f64>,
}

/// `T`-derivatives of the evolved fields.
#[derive(Clone, Debug)]
struct Rates {
    g: SymTensorField,
    sigma: SymTensorField,
    phi: PhiField,
    phi_dot: PhiField,
    omega: MultiOneFormField,
    omega_dot: MultiOneFormField,
}

fn combine(base: &FieldState, dt: f64, k: &Rates) -> FieldState {
    let mut s = base.clone();
    s.t = base.t + dt;
    s.g.axpy(dt, &k.g);
    s.sigma.axpy(dt, &k.sigma);
    s.phi.axpy(dt, &k.phi);
    s.phi_dot.axpy(dt, &k.phi_dot);
    s.omega.axpy(dt, &k.omega);
    s.omega_dot.axpy(dt, &k.omega_dot);
    s
}

fn rates_axpy(acc: &mut Rates, a: f64, k: &Rates) {
    acc.g.axpy(a, &k.g);
    acc.sigma.axpy(a, &k.sigma);
    acc.phi.axpy(a, &k.phi);
    acc.phi_dot.axpy(a, &k.phi_dot);
    acc.omega.axpy(a, &k.omega);
    acc.omega_dot.axpy(a, &k.omega_dot);
}

/// Remove the `g`-trace of `Σ` pointwise.
pub fn project_trace_free(g: &MetricField, sigma: &mut SymTensorField) {
    for p in 0..g.grid.len() {
        let gp = g.at(p);
        let Some((gi, _)) = gp.inverse() else { continue };
        let s = sigma.at(p);
        let tr = s.trace_with(&gi);
        let mut out = s;
        for k in 0..6 {
            out.0[k] -= tr / 3.0 * gp.0[k];
        }
        sigma.set(p, out);
    }
}

fn blowup(t: f64, e: Error) -> Error {
    match e {
        Error::Numeric { point, msg } => Error::BlowUp { t, point, msg },
        other => other,
    }
}

/// Owns the evolving state together with its elliptic solution and diagnostics.
pub struct Evolution<'a> {
    pub chart: &'a GridChart,
    pub cfg: EvolutionConfig,
    state: FieldState,
    ctx: StageContext,
    hist: Option<History>,
    pub log: SolverLog,
    pub steps: usize,
}

impl<'a> Evolution<'a> {
    /// Solve lapse, shift and Ψ for the initial data.
    pub fn new(chart: &'a GridChart, mut state: FieldState, cfg: EvolutionConfig) -> Result<Self> {
        if !(state.tau0 < 0.0) {
            return Err(Error::Config(format!("tau0 must be negative, got {}", state.tau0)));
        }
        if state.grid() != chart.grid {
            return Err(Error::Usage("state and chart live on different grids".into()));
        }
        if cfg.sector == Sector::BransDicke && (state.omega.max_abs() != 0.0 || state.omega_dot.max_abs() != 0.0) {
            return Err(Error::Config("the Brans-Dicke sector requires a vanishing potential".into()));
        }
        let mut log = SolverLog::default();
        if cfg.no_backreaction {
            // geometry is frozen: lapse and shift are solved once in vacuum
            let geom = Geometry::new(&state.g)?;
            let zero = MatterSet::zeros(state.grid(), state.tau());
            let ric = model_ricci(&geom, chart.curvature_model);
            Self::solve_lapse_shift(chart, &cfg, &geom, &ric, &mut state, &zero, &mut log)?;
        }
        let mut evo = Evolution { chart, cfg, ctx: Self::placeholder_ctx(&state)?, state, hist: None, log, steps: 0 };
        let mut st = evo.state.clone();
        evo.ctx = evo.solve_stage(&mut st, true)?;
        evo.state = st;
        Ok(evo)
    }

    fn placeholder_ctx(state: &FieldState) -> Result<StageContext> {
        let geom = Geometry::new(&state.g)?;
        let grid = state.grid();
        let n = grid.len();
        Ok(StageContext {
            conn: Connection::flat(n),
            pi: SymTensorField::zeros(grid),
            ric: SymTensorField::zeros(grid),
            faraday: FaradayField::zeros(grid, state.omega.q()),
            matter: MatterSet::zeros(grid, state.tau()),
            stress: TildeStress::zeros(grid),
            geom,
        })
    }

    pub fn state(&self) -> &FieldState {
        &self.state
    }

    pub fn context(&self) -> &StageContext {
        &self.ctx
    }

    pub fn matter(&self) -> &MatterSet {
        &self.ctx.matter
    }

    pub fn constraint_report(&self) -> ConstraintReport {
        constraint_report(&self.ctx.geom, self.chart.curvature_model, &self.state, &self.ctx.matter)
    }

    pub fn energies(&self, orders: (usize, usize), consts: &EnergyConstants) -> Result<EnergyBreakdown> {
        let s = &self.state;
        energy_total(self.chart, s.t, &s.g, &s.sigma, &s.phi, &s.phi_dot, &s.omega, &s.omega_dot, orders, consts)
    }

    fn solve_lapse_shift(
        chart: &GridChart,
        cfg: &EvolutionConfig,
        geom: &Geometry,
        ric: &SymTensorField,
        state: &mut FieldState,
        matter: &MatterSet,
        log: &mut SolverLog,
    ) -> Result<()> {
        let n = geom.n();
        let tau = state.tau();
        let s2 = geom.sym_norm_sq(&state.sigma);
        let pot: Vec<f64> = (0..n).map(|p| s2[p] + tau * matter.eta[p]).collect();
        let (lapse, rl) = solve_lapse_from(geom, &pot, Some(&state.lapse), &cfg.solver)?;
        log.push(rl);
        state.lapse = lapse;
        let conn = geom.connection();
        let tj = matter.current.scaled(tau * tau);
        let sp = ShiftProblem {
            geom,
            conn: &conn,
            ricci: ric,
            gamma_hat: &chart.gamma_geometry.gamma,
            lapse: &state.lapse,
            sigma: &state.sigma,
            tau2_current: &tj,
            curvature_model: chart.curvature_model,
        };
        let (x, rs) = solve_shift(&sp, Some(&state.shift), &cfg.solver)?;
        log.push(rs);
        state.shift = x;
        Ok(())
    }

    fn uses_potential(&self, state: &FieldState) -> bool {
        self.cfg.sector != Sector::BransDicke && (state.omega.max_abs() != 0.0 || state.omega_dot.max_abs() != 0.0)
    }

    fn solve_psi_all(&mut self, geom: &Geometry, state: &mut FieldState) -> Result<()> {
        let q = state.omega.q();
        if !self.uses_potential(state) {
            for p in state.psi.iter_mut() {
                p.iter_mut().for_each(|x| *x = 0.0);
            }
            return Ok(());
        }
        let pi = second_fundamental_form(&state.g, &state.sigma, &state.lapse);
        let tg = phi_trace_grad(&geom.grid, &state.phi)?;
        for m in 0..q {
            let pr = PsiProblem {
                geom,
                pi: &pi,
                lapse: &state.lapse,
                omega: &state.omega.channels[m],
                omega_dot: &state.omega_dot.channels[m],
                phi_trace_grad: &tg,
            };
            let (psi, rep) = solve_psi(&pr, Some(&state.psi[m]), &self.cfg.solver)?;
            self.log.push(rep);
            state.psi[m] = psi;
        }
        Ok(())
    }

    fn matter_of(&self, geom: &Geometry, state: &FieldState, faraday: &FaradayField) -> Result<(MatterSet, TildeStress)> {
        assemble_matter(&MatterInputs {
            geom,
            lapse: &state.lapse,
            shift: &state.shift,
            tau: state.tau(),
            phi: &state.phi,
            phi_dot: &state.phi_dot,
            faraday,
        })
    }

    /// Solve the elliptic system for `state` in place and assemble the stage data.
    fn solve_stage(&mut self, state: &mut FieldState, resolve: bool) -> Result<StageContext> {
        let t = state.t;
        let geom = Geometry::new(&state.g).map_err(|e| blowup(t, e))?;
        let grid = geom.grid;
        let ric = model_ricci(&geom, self.chart.curvature_model);
        if resolve {
            if self.cfg.no_backreaction {
                self.solve_psi_all(&geom, state).map_err(|e| blowup(t, e))?;
            } else {
                let mut converged = false;
                let mut change = f64::INFINITY;
                for _ in 0..self.cfg.coupling_max.max(1) {
                    let far = reconstruct_faraday(&grid, &state.omega, &state.omega_dot, &state.psi, &state.lapse);
                    let (matter, _) = self.matter_of(&geom, state, &far).map_err(|e| blowup(t, e))?;
                    let old = state.lapse.clone();
                    let mut log = SolverLog::default();
                    Self::solve_lapse_shift(self.chart, &self.cfg, &geom, &ric, state, &matter, &mut log).map_err(|e| blowup(t, e))?;
                    self.log.extend(log);
                    self.solve_psi_all(&geom, state).map_err(|e| blowup(t, e))?;
                    change = old.iter().zip(&state.lapse).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    let vacuum = matter.max_abs() == 0.0;
                    if change <= self.cfg.solver.fixed_point_tol || (vacuum && !self.uses_potential(state)) {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    self.log.push(EllipticSolveReport {
                        op: "coupling".into(),
                        iterations: self.cfg.coupling_max,
                        residual: change,
                        tolerance: self.cfg.solver.fixed_point_tol,
                        discarded_mean: 0.0,
                        kernel_projected: false,
                    });
                }
            }
        }
        let conn = geom.connection();
        let pi = second_fundamental_form(&state.g, &state.sigma, &state.lapse);
        let faraday = reconstruct_faraday(&grid, &state.omega, &state.omega_dot, &state.psi, &state.lapse);
        let (matter, stress) = self.matter_of(&geom, state, &faraday).map_err(|e| blowup(t, e))?;
        Ok(StageContext { geom, conn, pi, ric, faraday, matter, stress })
    }

    /// `∂ₑ₀Ψ` and `∂ₑ₀ log N` by backward differences against `hist`.
    fn e0_differences(&self, state: &FieldState, hist: Option<&History>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let grid = state.grid();
        let n = grid.len();
        let q = state.omega.q();
        let Some(h) = hist else {
            return (vec![vec![0.0; n]; q], vec![0.0; n]);
        };
        let dt = state.t - h.t;
        let logn: Vec<f64> = state.lapse.iter().map(|x| x.ln()).collect();
        let conv = |cur: &[f64], prev: &[f64]| -> Vec<f64> {
            let adv = advect(&grid, &state.shift, cur);
            (0..n).map(|p| ((cur[p] - prev[p]) / dt + adv[p]) / state.lapse[p]).collect()
        };
        let dpsi = (0..q).map(|m| conv(&state.psi[m], &h.psi[m])).collect();
        (dpsi, conv(&logn, &h.logn))
    }

    fn rates(&self, state: &FieldState, ctx: &StageContext, hist: Option<&History>) -> Result<Rates> {
        let grid = state.grid();
        let n = grid.len();
        let q = state.q();
        let t = state.t;
        let geom = &ctx.geom;
        let (dg, ds) = if self.cfg.no_backreaction {
            (SymTensorField::zeros(grid), SymTensorField::zeros(grid))
        } else {
            rhs_geometry(geom, &ctx.ric, self.cfg.delta_reading, state, &ctx.matter.stress)
        };
        let lapse = &state.lapse;
        let x = &state.shift;
        let mut dphi = PhiField::zeros(grid, q);
        let mut dphid = PhiField::zeros(grid, q);
        if self.cfg.sector != Sector::EinsteinMaxwell {
            let acc = rhs_phi(geom, lapse, &ctx.pi, &state.phi, &state.phi_dot, &ctx.faraday, state.tau()).map_err(|e| blowup(t, e))?;
            for k in 0..state.phi.comp.len() {
                let a1 = advect(&grid, x, &state.phi.comp[k]);
                let a2 = advect(&grid, x, &state.phi_dot.comp[k]);
                for p in 0..n {
                    dphi.comp[k][p] = lapse[p] * state.phi_dot.comp[k][p] - a1[p];
                    dphid.comp[k][p] = lapse[p] * acc.comp[k][p] - a2[p];
                }
            }
        }
        let qo = state.omega.q();
        let mut dw = MultiOneFormField::zeros(grid, qo);
        let mut dwd = MultiOneFormField::zeros(grid, qo);
        if self.uses_potential(state) {
            let (dpsi, dlogn) = self.e0_differences(state, hist);
            let ric = if ctx.conn.flat {
                SymTensorField::zeros(grid)
            } else if self.chart.curvature_model == CurvatureModel::EinsteinStandIn {
                let mut r = ctx.ric.clone();
                r.axpy(2.0 / 9.0, &geom.g);
                r
            } else {
                ctx.ric.clone()
            };
            let acc = rhs_omega(
                geom,
                &ctx.conn,
                &ric,
                &OmegaInputs {
                    lapse,
                    pi: &ctx.pi,
                    omega: &state.omega,
                    psi: &state.psi,
                    dpsi_e0: &dpsi,
                    dlogn_e0: &dlogn,
                    faraday: &ctx.faraday,
                    phi: &state.phi,
                    phi_dot: &state.phi_dot,
                },
            )
            .map_err(|e| blowup(t, e))?;
            for m in 0..qo {
                let l1 = lie_oneform(&grid, x, &state.omega.channels[m]);
                let l2 = lie_oneform(&grid, x, &state.omega_dot.channels[m]);
                for i in 0..3 {
                    for p in 0..n {
                        dw.channels[m].comp[i][p] = lapse[p] * state.omega_dot.channels[m].comp[i][p] - l1.comp[i][p];
                        dwd.channels[m].comp[i][p] = lapse[p] * acc.channels[m].comp[i][p] - l2.comp[i][p];
                    }
                }
            }
        }
        Ok(Rates { g: dg, sigma: ds, phi: dphi, phi_dot: dphid, omega: dw, omega_dot: dwd })
    }

    fn history_of(state: &FieldState) -> History {
        History { t: state.t, psi: state.psi.clone(), logn: state.lapse.iter().map(|x| x.ln()).collect() }
    }

    /// One classical fourth-order step of size `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {}", dt)));
        }
        let limit = cfl_limit(&self.state, self.cfg.cfl);
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!("dt = {} exceeds the CFL limit {:.6e}", dt, limit)));
        }
        let y0 = self.state.clone();
        if self.hist.is_none() && self.uses_potential(&y0) {
            // predictor solve one step ahead, reflected to stand in for the missing past
            let k = self.rates(&y0, &self.ctx.clone(), None)?;
            let mut yp = combine(&y0, dt, &k);
            self.solve_stage(&mut yp, true)?;
            let psi = y0.psi.iter().zip(&yp.psi).map(|(a, b)| a.iter().zip(b).map(|(x, y)| 2.0 * x - y).collect()).collect();
            let logn = y0.lapse.iter().zip(&yp.lapse).map(|(a, b)| 2.0 * a.ln() - b.ln()).collect();
            self.hist = Some(History { t: y0.t - dt, psi, logn });
        }
        let hist = self.hist.clone();
        let ctx0 = self.ctx.clone();
        let k1 = self.rates(&y0, &ctx0, hist.as_ref())?;
        let mut y = combine(&y0, 0.5 * dt, &k1);
        let c = self.solve_stage(&mut y, true)?;
        let k2 = self.rates(&y, &c, hist.as_ref())?;
        let mut y = combine(&y0, 0.5 * dt, &k2);
        let c = self.solve_stage(&mut y, true)?;
        let k3 = self.rates(&y, &c, hist.as_ref())?;
        let mut y = combine(&y0, dt, &k3);
        let c = self.solve_stage(&mut y, true)?;
        let k4 = self.rates(&y, &c, hist.as_ref())?;
        let mut acc = k1;
        rates_axpy(&mut acc, 2.0, &k2);
        rates_axpy(&mut acc, 2.0, &k3);
        rates_axpy(&mut acc, 1.0, &k4);
        let mut next = combine(&y0, dt / 6.0, &acc);
        next.t = y0.t + dt;
        next.lapse = y.lapse.clone();
        next.shift = y.shift.clone();
        next.psi = y.psi.clone();
        if !self.cfg.no_backreaction {
            project_trace_free(&next.g, &mut next.sigma);
        }
        self.check_blowup(&next)?;
        let ctx = self.solve_stage(&mut next, true)?;
        self.hist = Some(Self::history_of(&y0));
        self.state = next;
        self.ctx = ctx;
        self.steps += 1;
        Ok(())
    }

    fn check_blowup(&self, s: &FieldState) -> Result<()> {
        let ((gm, gp), (pm, pp)) = spd_margins(&s.g, &s.phi);
        if !(gm >= self.cfg.spd_margin) {
            return Err(Error::BlowUp { t: s.t, point: gp, msg: format!("metric SPD margin {:.3e}", gm) });
        }
        if !(pm >= self.cfg.spd_margin) {
            return Err(Error::BlowUp { t: s.t, point: pp, msg: format!("shape-field SPD margin {:.3e}", pm) });
        }
        let norms = [
            ("g", s.g.max_abs()),
            ("Sigma", s.sigma.max_abs()),
            ("Phi", s.phi.max_abs()),
            ("PhiDot", s.phi_dot.max_abs()),
            ("omega", s.omega.max_abs()),
            ("omegaDot", s.omega_dot.max_abs()),
        ];
        for (name, v) in norms {
            if !(v <= self.cfg.blowup_norm) {
                return Err(Error::BlowUp { t: s.t, point: 0, msg: format!("{} norm {:.3e} exceeds the blow-up threshold", name, v) });
            }
        }
        Ok(())
    }
}

/// Single step from a state whose elliptic fields are re-solved first.
pub fn step(chart: &GridChart, state: FieldState, dt: f64, cfg: EvolutionConfig) -> Result<FieldState> {
    let mut evo = Evolution::new(chart, state, cfg)?;
    evo.step(dt)?;
    Ok(evo.state)
}

// ---------------------------------------------------------------------------
// Runs.

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub tau: f64,
    pub e_geom: f64,
    pub e_omega: f64,
    pub e_phi: f64,
    pub e_tot: f64,
    pub ham_l2: f64,
    pub ham_linf: f64,
    pub mom_l2: f64,
    pub min_n: f64,
    pub max_n: f64,
    pub max_x: f64,
    pub det_phi_min: f64,
    pub lapse_iters: usize,
    pub shift_iters: usize,
    pub psi_iters: usize,
    pub phidot_max: f64,
    pub sigma_trace_max: f64,
}

pub const TIME_SERIES_HEADER: [&str; 18] = [
    "T",
    "tau",
    "E_geom",
    "E_omega",
    "E_phi",
    "E_tot",
    "ham_res_L2",
    "ham_res_Linf",
    "mom_res_L2",
    "minN",
    "maxN",
    "maxX",
    "detPhi_min",
    "lapse_iters",
    "shift_iters",
    "psi_iters",
    "phidot_max",
    "trace_sigma_max",
];

impl TimeSeriesRow {
    pub fn record(&self) -> Vec<String> {
        let f = |x: f64| format!("{:.17e}", x);
        vec![
            f(self.t),
            f(self.tau),
            f(self.e_geom),
            f(self.e_omega),
            f(self.e_phi),
            f(self.e_tot),
            f(self.ham_l2),
            f(self.ham_linf),
            f(self.mom_l2),
            f(self.min_n),
            f(self.max_n),
            f(self.max_x),
            f(self.det_phi_min),
            self.lapse_iters.to_string(),
            self.shift_iters.to_string(),
            self.psi_iters.to_string(),
            f(self.phidot_max),
            f(self.sigma_trace_max),
        ]
    }
}

pub fn write_time_series<W: Write>(w: W, rows: &[TimeSeriesRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TIME_SERIES_HEADER)?;
    for r in rows {
        wr.write_record(r.record())?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub dt: f64,
    pub t_final: f64,
    pub sample_every: usize,
    pub snapshot_every: Option<usize>,
    pub orders: (usize, usize),
    pub constants: EnergyConstants,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<TimeSeriesRow>,
    pub final_state: FieldState,
    pub log: SolverLog,
    pub steps: usize,
    /// First error encountered; the rows up to that point are kept.
    pub error: Option<Error>,
}

fn sample_row(evo: &Evolution, run: &RunConfig, since: &[EllipticSolveReport]) -> Result<TimeSeriesRow> {
    let s = evo.state();
    let e = evo.energies(run.orders, &run.constants)?;
    let c = evo.constraint_report();
    let mut det_min = f64::INFINITY;
    for p in 0..s.grid().len() {
        let (_, det) = phi_inverse(&s.phi, p).unwrap_or((vec![], f64::NAN));
        det_min = det_min.min(det);
    }
    let iters = |op: &str| since.iter().filter(|r| r.op.starts_with(op)).map(|r| r.iterations).sum();
    let mut max_x: f64 = 0.0;
    for p in 0..s.grid().len() {
        let x = s.shift.at(p);
        max_x = max_x.max((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt());
    }
    Ok(TimeSeriesRow {
        t: s.t,
        tau: s.tau(),
        e_geom: e.e_geom,
        e_omega: e.e_omega,
        e_phi: e.e_phi,
        e_tot: e.e_tot,
        ham_l2: c.ham_l2,
        ham_linf: c.ham_linf,
        mom_l2: c.mom_l2,
        min_n: s.lapse.iter().copied().fold(f64::INFINITY, f64::min),
        max_n: s.lapse.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_x,
        det_phi_min: det_min,
        lapse_iters: iters("lapse"),
        shift_iters: iters("shift"),
        psi_iters: iters("psi"),
        phidot_max: s.phi_dot.max_abs(),
        sigma_trace_max: c.sigma_trace_max,
    })
}

/// Step until `t_final`, sampling diagnostics every `sample_every` steps.
/// `snapshot` receives the state every `snapshot_every` steps.
pub fn run(
    chart: &GridChart,
    initial: FieldState,
    cfg: EvolutionConfig,
    run: &RunConfig,
    snapshot: &mut dyn FnMut(usize, &FieldState) -> Result<()>,
) -> Result<RunOutcome> {
    if !(run.t_final > 0.0) {
        return Err(Error::Config(format!("t_final must be positive, got {}", run.t_final)));
    }
    if run.sample_every == 0 {
        return Err(Error::Config("sample interval must be at least one step".into()));
    }
    let limit = cfl_limit(&initial, cfg.cfl);
    if !(run.dt > 0.0) || run.dt > limit {
        return Err(Error::Config(format!("dt = {} violates the CFL limit {:.6e}", run.dt, limit)));
    }
    let mut evo = Evolution::new(chart, initial, cfg)?;
    let steps = ((run.t_final - evo.state().t) / run.dt - 1e-9).ceil().max(0.0) as usize;
    let mut rows = Vec::new();
    let mut mark = 0;
    let out = |evo: &Evolution, rows: &mut Vec<TimeSeriesRow>, mark: &mut usize| -> Result<()> {
        rows.push(sample_row(evo, run, &evo.log.entries[*mark..])?);
        *mark = evo.log.entries.len();
        Ok(())
    };
    let mut error = None;
    if let Err(e) = out(&evo, &mut rows, &mut mark) {
        error = Some(e);
    }
    let t0 = evo.state().t;
    for i in 0..steps {
        if error.is_some() {
            break;
        }
        let target = (t0 + (i + 1) as f64 * run.dt).min(run.t_final);
        let h = target - evo.state().t;
        if let Err(e) = evo.step(h) {
            error = Some(e);
            break;
        }
        if (i + 1) % run.sample_every == 0 || i + 1 == steps {
            if let Err(e) = out(&evo, &mut rows, &mut mark) {
                error = Some(e);
                break;
            }
        }
        if let Some(k) = run.snapshot_every {
            if k > 0 && (i + 1) % k == 0 {
                if let Err(e) = snapshot(i + 1, evo.state()) {
                    error = Some(e);
                    break;
                }
            }
        }
    }
    Ok(RunOutcome { rows, steps: evo.steps, log: evo.log.clone(), final_state: evo.state().clone(), error })
}

/// Text dump of a state: the chart header followed by every field.
pub fn snapshot_text(state: &FieldState) -> String {
    use std::fmt::Write as _;
    let grid = state.grid();
    let mut s = String::new();
    let _ = writeln!(s, "kkflow-snapshot 1");
    let d = grid.dims;
    let h = grid.spacing;
    let _ = writeln!(s, "dims {} {} {}", d[0], d[1], d[2]);
    let _ = writeln!(s, "spacing {} {} {}", h[0], h[1], h[2]);
    let _ = writeln!(s, "q {}", state.q());
    let _ = writeln!(s, "T {:e}", state.t);
    let _ = writeln!(s, "tau0 {:e}", state.tau0);
    let mut section = |name: &str, cols: Vec<&[f64]>| {
        let _ = writeln!(s, "{}", name);
        for p in 0..grid.len() {
            let row: Vec<String> = cols.iter().map(|c| format!("{:e}", c[p])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    };
    section("metric", state.g.comp.iter().map(|c| c.as_slice()).collect());
    section("sigma", state.sigma.comp.iter().map(|c| c.as_slice()).collect());
    section("phi", state.phi.comp.iter().map(|c| c.as_slice()).collect());
    section("phidot", state.phi_dot.comp.iter().map(|c| c.as_slice()).collect());
    section("omega", state.omega.channels.iter().flat_map(|w| w.comp.iter().map(|c| c.as_slice())).collect());
    section("omegadot", state.omega_dot.channels.iter().flat_map(|w| w.comp.iter().map(|c| c.as_slice())).collect());
    section("lapse", vec![state.lapse.as_slice()]);
    section("shift", state.shift.comp.iter().map(|c| c.as_slice()).collect());
    section("psi", state.psi.iter().map(|c| c.as_slice()).collect());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn milne(n: usize, q: usize) -> (GridChart, FieldState) {
        let chart = build_flat_torus_chart([n; 3], [1.0; 3], q).unwrap();
        let mut pb = vec![0.0; q * q];
        for a in 0..q {
            pb[a * q + a] = 1.0;
        }
        let s = FieldState::milne(chart.grid, &chart.gamma, q, -1.0, &pb);
        (chart, s)
    }

    #[test]
    fn background_is_a_fixed_point() {
        let (chart, s) = milne(4, 2);
        let mut evo = Evolution::new(&chart, s.clone(), EvolutionConfig::default()).unwrap();
        for _ in 0..3 {
            evo.step(0.1).unwrap();
        }
        let mut expect = s;
        expect.t = evo.state().t;
        assert!(evo.state().max_diff(&expect) < 1e-12, "drift {}", evo.state().max_diff(&expect));
    }

    #[test]
    fn kronecker_reading_moves_the_background() {
        let (chart, s) = milne(4, 1);
        let cfg = EvolutionConfig { delta_reading: DeltaReading::Kronecker, ..Default::default() };
        let geom = Geometry::new(&s.g).unwrap();
        let ric = model_ricci(&geom, chart.curvature_model);
        let (_, ds) = rhs_geometry(&geom, &ric, cfg.delta_reading, &s, &SymTensorField::zeros(s.grid()));
        assert!((ds.comp[0][0] - 3.0).abs() < 1e-12);
        let (_, ds) = rhs_geometry(&geom, &ric, DeltaReading::Dropped, &s, &SymTensorField::zeros(s.grid()));
        assert!(ds.max_abs() < 1e-12);
    }

    #[test]
    fn trace_projection_leaves_trace_free_part() {
        let g = SymTensorField::identity(Grid::new([4; 3], [1.0; 3]).unwrap(), 2.0);
        let mut s = SymTensorField::identity(g.grid, 5.0);
        s.comp[1][3] = 0.25;
        project_trace_free(&g, &mut s);
        assert!(s.comp[0][3].abs() < 1e-14);
        assert_eq!(s.comp[1][3], 0.25);
    }
}
