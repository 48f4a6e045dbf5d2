//! Matrix-free Krylov solvers and the per-step elliptic problems.

use crate::error::{Error, Result};
use crate::grid::*;
use crate::mesh::{commutator_div, Connection, CurvatureModel, Geometry, HarmonicBasis};
use crate::spectral::{SpectralPreconditioner, Stencil};

/// Tolerances shared by all elliptic solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-10, max_iter: 2000, fixed_point_tol: 1e-10, fixed_point_max: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipticSolveReport {
    pub op: String,
    pub iterations: usize,
    /// L² norm of the final residual of the unweighted equation.
    pub residual: f64,
    pub tolerance: f64,
    /// Mean removed from the right side of a semidefinite problem.
    pub discarded_mean: f64,
    pub kernel_projected: bool,
}

impl EllipticSolveReport {
    pub fn converged(&self) -> bool {
        self.residual <= self.tolerance
    }

    fn into_result(self) -> Result<Self> {
        if self.converged() {
            Ok(self)
        } else {
            Err(Error::SolverDivergence { op: self.op, iterations: self.iterations, residual: self.residual })
        }
    }
}

/// Append-only record of every elliptic solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverLog {
    pub entries: Vec<EllipticSolveReport>,
}

impl SolverLog {
    pub fn push(&mut self, r: EllipticSolveReport) {
        self.entries.push(r);
    }
    pub fn total_iterations(&self) -> usize {
        self.entries.iter().map(|e| e.iterations).sum()
    }
    pub fn extend(&mut self, other: SolverLog) {
        self.entries.extend(other.entries);
    }
    /// One CSV line per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,iterations,residual,tolerance,discarded_mean,kernel_projected\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                e.op, e.iterations, e.residual, e.tolerance, e.discarded_mean, e.kernel_projected
            ));
        }
        s
    }
}

/// Grid L² norm `(Σ v² h³)^{1/2}`.
pub fn grid_l2(grid: &Grid, v: &[f64]) -> f64 {
    (dot(v, v) * grid.cell_volume()).sqrt()
}

/// Diagonal scaling as a preconditioner.
pub fn jacobi(diag: &[f64]) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |r| r.iter().zip(diag).map(|(a, d)| a / d).collect()
}

/// Preconditioned conjugate gradients for a symmetric positive (semi)definite
/// operator. Stops once `norm(r) <= tol`; returns the iteration count and
/// final residual norm.
pub fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
    norm: impl Fn(&[f64]) -> f64,
) -> (usize, f64) {
    let n = b.len();
    let ax = apply(x);
    let mut r: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
    let mut rn = norm(&r);
    if rn <= tol {
        return (0, rn);
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap == 0.0 || !pap.is_finite() {
            return (it, rn);
        }
        let a = rz / pap;
        axpy(x, a, &p);
        axpy(&mut r, -a, &ap);
        rn = norm(&r);
        if rn <= tol {
            return (it, rn);
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (max_iter, rn)
}

/// Right-preconditioned BiCGSTAB for nonsymmetric operators.
pub fn bicgstab(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
    norm: impl Fn(&[f64]) -> f64,
) -> (usize, f64) {
    let n = b.len();
    let ax = apply(x);
    let mut r: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
    let mut rn = norm(&r);
    if rn <= tol {
        return (0, rn);
    }
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return (it, rn);
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        v = apply(&ph);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return (it, rn);
        }
        alpha = rho / r0v;
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) <= tol {
            axpy(x, alpha, &ph);
            let ax = apply(x);
            let rf: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
            return (it, norm(&rf));
        }
        let sh = precond(&s);
        let t = apply(&sh);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        axpy(x, alpha, &ph);
        axpy(x, omega, &sh);
        for i in 0..n {
            r[i] = s[i] - omega * t[i];
        }
        rn = norm(&r);
        if rn <= tol || omega == 0.0 {
            return (it, rn);
        }
    }
    (max_iter, rn)
}

/// Grid means of `√g g^{ij}` or `g^{ij}` for the spectral preconditioners.
fn mean_coefficients(geom: &Geometry, weighted: bool) -> [f64; 6] {
    let n = geom.n() as f64;
    std::array::from_fn(|s| {
        let c = &geom.inv.comp[s];
        if weighted {
            c.iter().zip(&geom.sqrt_det).map(|(a, w)| a * w).sum::<f64>() / n
        } else {
            c.iter().sum::<f64>() / n
        }
    })
}

/// Solve `∂_i(√g g^{ij} ∂_j f) = rhs` with centered differences; `f` is returned
/// with zero `dV_g` mean. The right side must be a centered divergence.
pub fn solve_div_grad(geom: &Geometry, rhs: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, EllipticSolveReport)> {
    let grid = geom.grid;
    let n = geom.n();
    let pc = SpectralPreconditioner::new(grid, mean_coefficients(geom, true), 0.0, Stencil::Wide);
    let b: Vec<f64> = rhs.iter().map(|x| -x).collect();
    let mut f = vec![0.0; n];
    let apply = |v: &[f64]| -> Vec<f64> { geom.weighted_div_grad(v).into_iter().map(|x| -x).collect() };
    let (it, _) = pcg(apply, |r| pc.apply(r), &b, &mut f, tol, max_iter, |r| grid_l2(&grid, r));
    geom.remove_mean(&mut f);
    let res: Vec<f64> = geom.weighted_div_grad(&f).iter().zip(rhs).map(|(a, b)| a - b).collect();
    let rep = EllipticSolveReport {
        op: "div-grad".into(),
        iterations: it,
        residual: grid_l2(&grid, &res),
        tolerance: tol,
        discarded_mean: 0.0,
        kernel_projected: true,
    };
    Ok((f, rep))
}

/// Result of the slice-adapted gauge construction for every channel.
#[derive(Clone, Debug)]
pub struct GaugeOutput {
    pub omega: MultiOneFormField,
    /// `𝓛ₑ₀ω` of the gauged potential.
    pub omega_dot: MultiOneFormField,
    pub psi: Vec<Vec<f64>>,
    /// Gauge functions `f` per channel (zero mean).
    pub f: Vec<Vec<f64>>,
    /// `∂_T c` per channel, fixing `∫Ψ dV_g = 0`.
    pub dc_dt: Vec<f64>,
    /// Harmonic coefficients removed per channel.
    pub harmonic_removed: Vec<Vec<f64>>,
    pub reports: Vec<EllipticSolveReport>,
}

/// Input potential `B` for the gauge construction on a fixed slice: spatial
/// part, its `∂_T` derivative and the normal component `B(e₀)`.
#[derive(Clone, Debug)]
pub struct PotentialData {
    pub b: MultiOneFormField,
    pub b_dot: MultiOneFormField,
    pub b_e0: Vec<Vec<f64>>,
}

/// Slice-adapted gauge: `A = B + d(f + c) − η` with `div_g ω = 0`,
/// `ω ⊥ ker Δ_H` and `∫Ψ dV_g = 0`. The slice metric is held fixed, so `∂_T f`
/// solves the same Poisson problem with `∂_T B` as data.
pub fn slice_adapted_gauge(
    geom: &Geometry,
    basis: Option<&HarmonicBasis>,
    data: &PotentialData,
    lapse: &[f64],
    shift: &VectorField,
    cfg: &SolverConfig,
) -> Result<GaugeOutput> {
    let basis = basis.ok_or_else(|| Error::Usage("slice-adapted gauge needs the harmonic basis of the chart".into()))?;
    let grid = geom.grid;
    let n = geom.n();
    let q = data.b.q();
    let mut out = GaugeOutput {
        omega: MultiOneFormField::zeros(grid, q),
        omega_dot: MultiOneFormField::zeros(grid, q),
        psi: Vec::with_capacity(q),
        f: Vec::with_capacity(q),
        dc_dt: Vec::with_capacity(q),
        harmonic_removed: Vec::with_capacity(q),
        reports: Vec::new(),
    };
    let inv_n_int = geom.integrate(&lapse.iter().map(|x| 1.0 / x).collect::<Vec<_>>());
    for m in 0..q {
        let solve = |w: &OneFormField| -> Result<(Vec<f64>, EllipticSolveReport)> {
            let rhs: Vec<f64> = geom.weighted_div(w).into_iter().map(|x| -x).collect();
            let (f, mut rep) = solve_div_grad(geom, &rhs, cfg.tol, cfg.max_iter)?;
            rep.op = format!("gauge[{}]", m);
            Ok((f, rep.into_result()?))
        };
        let (f, r1) = solve(&data.b.channels[m])?;
        let (fdot, r2) = solve(&data.b_dot.channels[m])?;
        out.reports.push(r1);
        out.reports.push(r2);
        let mut w = data.b.channels[m].clone();
        let df = grad(&grid, &f);
        for i in 0..3 {
            axpy(&mut w.comp[i], 1.0, &df[i]);
        }
        let coef = basis.project_out(geom, &mut w);
        let mut wdot = data.b_dot.channels[m].clone();
        let dfdot = grad(&grid, &fdot);
        for i in 0..3 {
            axpy(&mut wdot.comp[i], 1.0, &dfdot[i]);
        }
        basis.project_out(geom, &mut wdot);
        // 𝓛ₑ₀ω = N⁻¹(∂_T ω + 𝓛_X ω)
        let lie = crate::mesh::lie_oneform(&grid, shift, &w);
        let mut le = Field3::zeros(grid);
        for i in 0..3 {
            for p in 0..n {
                le.comp[i][p] = (wdot.comp[i][p] + lie.comp[i][p]) / lapse[p];
            }
        }
        // Ψ = B(e₀) + e₀(f) + N⁻¹ ∂_T c
        let adv = crate::mesh::advect(&grid, shift, &f);
        let mut psi: Vec<f64> = (0..n).map(|p| data.b_e0[m][p] + (fdot[p] + adv[p]) / lapse[p]).collect();
        let dc = -geom.integrate(&psi) / inv_n_int;
        for p in 0..n {
            psi[p] += dc / lapse[p];
        }
        out.omega.channels[m] = w;
        out.omega_dot.channels[m] = le;
        out.psi.push(psi);
        out.f.push(f);
        out.dc_dt.push(dc);
        out.harmonic_removed.push(coef);
    }
    Ok(out)
}

/// Electric and magnetic parts of the Faraday field for every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FaradayField {
    /// `(F_01, F_02, F_12)` per channel.
    pub spatial: Vec<[Vec<f64>; 3]>,
    /// `E_i = F(∂_i, e₀)` per channel.
    pub electric: Vec<OneFormField>,
}

/// Packed index of the antisymmetric pair `(i, j)`, `i < j`.
pub const ASYM: [[usize; 3]; 3] = [[usize::MAX, 0, 1], [usize::MAX, usize::MAX, 2], [usize::MAX; 3]];

impl FaradayField {
    pub fn zeros(grid: Grid, q: usize) -> Self {
        let n = grid.len();
        FaradayField {
            spatial: (0..q).map(|_| std::array::from_fn(|_| vec![0.0; n])).collect(),
            electric: (0..q).map(|_| Field3::zeros(grid)).collect(),
        }
    }
    pub fn q(&self) -> usize {
        self.spatial.len()
    }
    /// `F_ij` for channel `m`, antisymmetric by construction.
    #[inline]
    pub fn f(&self, m: usize, p: usize, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.spatial[m][ASYM[i][j]][p],
            std::cmp::Ordering::Greater => -self.spatial[m][ASYM[j][i]][p],
            std::cmp::Ordering::Equal => 0.0,
        }
    }
    pub fn max_abs(&self) -> f64 {
        let s = self.spatial.iter().flatten().map(|c| max_abs(c)).fold(0.0, f64::max);
        let e = self.electric.iter().map(|c| c.max_abs()).fold(0.0, f64::max);
        s.max(e)
    }
    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }
}

/// Centered exterior derivative of a one-form as `(F_01, F_02, F_12)`.
pub fn exterior_derivative(grid: &Grid, w: &OneFormField) -> [Vec<f64>; 3] {
    let pairs = [(0, 1), (0, 2), (1, 2)];
    pairs.map(|(i, j)| {
        let a = d1(grid, &w.comp[j], i);
        let b = d1(grid, &w.comp[i], j);
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    })
}

/// `F = dω` and `E_i = ∂_iΨ + (∂_iN/N)Ψ − (𝓛ₑ₀ω)_i`.
pub fn reconstruct_faraday(
    grid: &Grid,
    omega: &MultiOneFormField,
    omega_dot: &MultiOneFormField,
    psi: &[Vec<f64>],
    lapse: &[f64],
) -> FaradayField {
    let n = grid.len();
    let q = omega.q();
    let logn: Vec<f64> = lapse.iter().map(|x| x.ln()).collect();
    let dlogn = grad(grid, &logn);
    let mut f = FaradayField::zeros(*grid, q);
    for m in 0..q {
        f.spatial[m] = exterior_derivative(grid, &omega.channels[m]);
        let dpsi = grad(grid, &psi[m]);
        for i in 0..3 {
            for p in 0..n {
                f.electric[m].comp[i][p] = dpsi[i][p] + dlogn[i][p] * psi[m][p] - omega_dot.channels[m].comp[i][p];
            }
        }
    }
    f
}

/// Solve `(Δ − 1/3) N = N (|Σ|²_g + τη) − 1`.
///
/// `potential` is `|Σ|²_g + τη`. The weighted operator
/// `−√g Δ + √g (1/3 + V)` is symmetric positive definite whenever `1/3 + V > 0`.
pub fn solve_lapse(geom: &Geometry, potential: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, EllipticSolveReport)> {
    solve_lapse_from(geom, potential, None, cfg)
}

/// [`solve_lapse`] started from `guess` instead of the pointwise value `1/(1/3 + V)`.
pub fn solve_lapse_from(geom: &Geometry, potential: &[f64], guess: Option<&[f64]>, cfg: &SolverConfig) -> Result<(Vec<f64>, EllipticSolveReport)> {
    let grid = geom.grid;
    let n = geom.n();
    for (p, v) in potential.iter().enumerate() {
        if !(1.0 / 3.0 + v > 0.0) {
            return Err(Error::Numeric { point: p, msg: format!("lapse operator indefinite (potential {:.3e})", v) });
        }
    }
    let c: Vec<f64> = (0..n).map(|p| geom.sqrt_det[p] * (1.0 / 3.0 + potential[p])).collect();
    let mass = c.iter().sum::<f64>() / n as f64;
    let pc = SpectralPreconditioner::new(grid, mean_coefficients(geom, true), mass, Stencil::Compact);
    let apply = |v: &[f64]| -> Vec<f64> {
        let l = geom.weighted_laplacian(v);
        (0..n).map(|p| -l[p] + c[p] * v[p]).collect()
    };
    let b = geom.sqrt_det.clone();
    let mut lapse: Vec<f64> = match guess {
        Some(g) => g.to_vec(),
        None => potential.iter().map(|v| 1.0 / (1.0 / 3.0 + v)).collect(),
    };
    let (it, _) = pcg(apply, |r| pc.apply(r), &b, &mut lapse, 0.1 * cfg.tol, cfg.max_iter, |r| grid_l2(&grid, r));
    let res = lapse_residual(geom, potential, &lapse);
    let rep = EllipticSolveReport {
        op: "lapse".into(),
        iterations: it,
        residual: grid_l2(&grid, &res),
        tolerance: cfg.tol,
        discarded_mean: 0.0,
        kernel_projected: false,
    }
    .into_result()?;
    if potential.iter().all(|v| *v >= 0.0) {
        for (p, v) in lapse.iter().enumerate() {
            if !(*v > 0.0 && *v <= 3.0 + 1e-8) {
                return Err(Error::Invariant(format!("lapse maximum principle violated at point {}: N = {}", p, v)));
            }
        }
    }
    Ok((lapse, rep))
}

/// `(Δ − 1/3 − V) N + 1`.
pub fn lapse_residual(geom: &Geometry, potential: &[f64], lapse: &[f64]) -> Vec<f64> {
    let l = geom.laplacian(lapse);
    (0..geom.n()).map(|p| l[p] - (1.0 / 3.0 + potential[p]) * lapse[p] + 1.0).collect()
}

/// Data entering the Ψ equation for one channel.
pub struct PsiProblem<'a> {
    pub geom: &'a Geometry,
    pub pi: &'a SymTensorField,
    pub lapse: &'a [f64],
    pub omega: &'a OneFormField,
    pub omega_dot: &'a OneFormField,
    /// `Φ^{mp} ∂_j Φ_mp` per axis.
    pub phi_trace_grad: &'a [Vec<f64>; 3],
}

/// Right side of the Ψ equation for a given Ψ.
pub fn psi_rhs(pr: &PsiProblem, psi: &[f64], comm: &[f64]) -> Vec<f64> {
    let geom = pr.geom;
    let grid = geom.grid;
    let n = geom.n();
    let logn: Vec<f64> = pr.lapse.iter().map(|x| x.ln()).collect();
    let dlogn = grad(&grid, &logn);
    let mut flux = Field3::zeros(grid);
    for i in 0..3 {
        for p in 0..n {
            flux.comp[i][p] = psi[p] * dlogn[i][p];
        }
    }
    let div = geom.div_oneform(&flux);
    let dpsi = grad(&grid, psi);
    let mut out = vec![0.0; n];
    for p in 0..n {
        // −½ g^{ij} E_i Φ^{mp}∂_jΦ_mp with E_i = ∂_iΨ + ∂_i log N Ψ − (𝓛ₑ₀ω)_i
        let mut coup = 0.0;
        for i in 0..3 {
            let e = dpsi[i][p] + dlogn[i][p] * psi[p] - pr.omega_dot.comp[i][p];
            for j in 0..3 {
                coup += geom.inv.comp[SYM[i][j]][p] * e * pr.phi_trace_grad[j][p];
            }
        }
        out[p] = -div[p] - comm[p] - 0.5 * coup;
    }
    out
}

/// Solve the Ψ equation for one channel by lagged fixed-point iteration,
/// projecting every right side onto its mean-free part.
pub fn solve_psi(pr: &PsiProblem, guess: Option<&[f64]>, cfg: &SolverConfig) -> Result<(Vec<f64>, EllipticSolveReport)> {
    let geom = pr.geom;
    let grid = geom.grid;
    let n = geom.n();
    let comm = commutator_div(geom, pr.pi, pr.lapse, pr.omega, pr.omega_dot);
    let pc = SpectralPreconditioner::new(grid, mean_coefficients(geom, true), 0.0, Stencil::Compact);
    let apply = |v: &[f64]| -> Vec<f64> { geom.weighted_laplacian(v).into_iter().map(|x| -x).collect() };
    let mut psi = guess.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    geom.remove_mean(&mut psi);
    let mut total_it = 0;
    let mut discarded = 0.0;
    for _ in 0..cfg.fixed_point_max {
        let mut rhs = psi_rhs(pr, &psi, &comm);
        discarded = geom.remove_mean(&mut rhs);
        let b: Vec<f64> = (0..n).map(|p| -geom.sqrt_det[p] * rhs[p]).collect();
        let mut next = psi.clone();
        let (it, _) = pcg(&apply, |r| pc.apply(r), &b, &mut next, 0.1 * cfg.tol, cfg.max_iter, |r| grid_l2(&grid, r));
        total_it += it;
        geom.remove_mean(&mut next);
        let change: Vec<f64> = next.iter().zip(&psi).map(|(a, b)| a - b).collect();
        let delta = grid_l2(&grid, &change);
        psi = next;
        if delta <= cfg.fixed_point_tol {
            let mut rhs = psi_rhs(pr, &psi, &comm);
            discarded = geom.remove_mean(&mut rhs);
            let lap = geom.laplacian(&psi);
            let res: Vec<f64> = (0..n).map(|p| lap[p] - rhs[p]).collect();
            let rep = EllipticSolveReport {
                op: "psi".into(),
                iterations: total_it,
                residual: grid_l2(&grid, &res),
                tolerance: cfg.tol,
                discarded_mean: discarded,
                kernel_projected: true,
            };
            return Ok((psi, rep.into_result()?));
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::SolverDivergence { op: "psi fixed point".into(), iterations: total_it, residual: discarded.abs().max(f64::NAN) })
}

/// Data for the shift equation.
pub struct ShiftProblem<'a> {
    pub geom: &'a Geometry,
    pub conn: &'a Connection,
    /// Ricci tensor used in the operator (already shifted for the stand-in model).
    pub ricci: &'a SymTensorField,
    /// Christoffel symbols of the background metric.
    pub gamma_hat: &'a crate::mesh::Christoffel,
    pub lapse: &'a [f64],
    pub sigma: &'a SymTensorField,
    /// `τ² jⁱ`.
    pub tau2_current: &'a VectorField,
    pub curvature_model: CurvatureModel,
}

/// `ΔXⁱ + Rⁱ_j X^j`.
pub fn shift_operator(sp: &ShiftProblem, x: &VectorField) -> VectorField {
    let geom = sp.geom;
    let mut out = geom.vector_laplacian(x, sp.conn);
    for p in 0..geom.n() {
        for i in 0..3 {
            let mut v = 0.0;
            for j in 0..3 {
                let mut rij = 0.0;
                for k in 0..3 {
                    rij += geom.inv.comp[SYM[i][k]][p] * sp.ricci.comp[SYM[k][j]][p];
                }
                v += rij * x.comp[j][p];
            }
            out.comp[i][p] += v;
        }
    }
    out
}

/// Right side of the shift equation with the `D^j X^k` term evaluated at `x_lag`.
pub fn shift_rhs(sp: &ShiftProblem, x_lag: &VectorField) -> VectorField {
    let geom = sp.geom;
    let grid = geom.grid;
    let n = geom.n();
    let dn = grad(&grid, sp.lapse);
    let dx: [[Vec<f64>; 3]; 3] = std::array::from_fn(|a| std::array::from_fn(|k| d1(&grid, &x_lag.comp[k], a)));
    let mut out = Field3::zeros(grid);
    for p in 0..n {
        let gi = geom.inv.at(p);
        let s = sp.sigma.at(p);
        // Σ^{ij}
        let mut sup = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        v += gi.get(i, a) * gi.get(j, b) * s.get(a, b);
                    }
                }
                sup[i][j] = v;
            }
        }
        // D_l X^k
        let mut dxk = [[0.0; 3]; 3];
        for l in 0..3 {
            for k in 0..3 {
                let mut v = dx[l][k][p];
                for m in 0..3 {
                    v += geom.gamma.at(p, k, l, m) * x_lag.comp[m][p];
                }
                dxk[l][k] = v;
            }
        }
        for i in 0..3 {
            let mut v = 0.0;
            for j in 0..3 {
                v += 2.0 * dn[j][p] * sup[j][i];
                v -= gi.get(i, j) * dn[j][p] / 3.0;
            }
            v += 2.0 * sp.lapse[p] * sp.tau2_current.comp[i][p];
            for j in 0..3 {
                for k in 0..3 {
                    let dg = geom.gamma.at(p, i, j, k) - sp.gamma_hat.at(p, i, j, k);
                    if dg == 0.0 {
                        continue;
                    }
                    let djxk: f64 = (0..3).map(|l| gi.get(j, l) * dxk[l][k]).sum();
                    v -= (2.0 * sp.lapse[p] * sup[j][k] - djxk) * dg;
                }
            }
            out.comp[i][p] = v;
        }
    }
    out
}

fn flatten3(v: &Field3) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * v.comp[0].len());
    for c in &v.comp {
        out.extend_from_slice(c);
    }
    out
}

fn unflatten3(grid: Grid, v: &[f64]) -> Field3 {
    let n = grid.len();
    Field3 { grid, comp: std::array::from_fn(|i| v[i * n..(i + 1) * n].to_vec()) }
}

/// Solve the shift equation by lagged fixed-point iteration around BiCGSTAB.
/// When the operator has no curvature term the constant fields are a kernel and
/// the problem is solved in the mean-free complement.
pub fn solve_shift(sp: &ShiftProblem, guess: Option<&VectorField>, cfg: &SolverConfig) -> Result<(VectorField, EllipticSolveReport)> {
    let geom = sp.geom;
    let grid = geom.grid;
    let n = geom.n();
    let kernel = sp.ricci.max_abs() < 1e-12;
    let project = |v: &mut Field3| {
        if kernel {
            for c in v.comp.iter_mut() {
                geom.remove_mean(c);
            }
        }
    };
    // negated operator: −c^{ij}∂_i∂_j − ⅓ tr(g⁻¹Ric)
    let rbar = (0..n)
        .map(|p| (0..3).map(|i| (0..3).map(|k| geom.inv.comp[SYM[i][k]][p] * sp.ricci.comp[SYM[k][i]][p]).sum::<f64>()).sum::<f64>())
        .sum::<f64>()
        / (3.0 * n as f64);
    let pc = SpectralPreconditioner::new(grid, mean_coefficients(geom, false), -rbar, Stencil::Compact);
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut x = unflatten3(grid, v);
        project(&mut x);
        let mut y = shift_operator(sp, &x);
        project(&mut y);
        flatten3(&y).into_iter().map(|z| -z).collect()
    };
    let norm = |r: &[f64]| grid_l2(&grid, r);
    let mut x = guess.cloned().unwrap_or_else(|| Field3::zeros(grid));
    project(&mut x);
    let mut total_it = 0;
    let mut discarded = 0.0;
    let has_lag = sp.gamma_hat.max_abs() > 0.0 || geom.gamma.max_abs() > 0.0;
    let passes = if has_lag { cfg.fixed_point_max } else { 1 };
    for _ in 0..passes {
        let mut rhs = shift_rhs(sp, &x);
        if kernel {
            discarded = rhs.comp.iter_mut().map(|c| geom.remove_mean(c).abs()).fold(0.0, f64::max);
        }
        let b: Vec<f64> = flatten3(&rhs).into_iter().map(|z| -z).collect();
        let mut xv = flatten3(&x);
        let (it, _) = bicgstab(&apply, |r| pc.apply_blocks(r), &b, &mut xv, 0.1 * cfg.tol, cfg.max_iter, norm);
        total_it += it;
        let mut next = unflatten3(grid, &xv);
        project(&mut next);
        let mut change = next.clone();
        change.axpy(-1.0, &x);
        let delta = norm(&flatten3(&change));
        x = next;
        if delta <= cfg.fixed_point_tol || !has_lag {
            let mut rhs = shift_rhs(sp, &x);
            if kernel {
                rhs.comp.iter_mut().for_each(|c| {
                    geom.remove_mean(c);
                });
            }
            let mut res = shift_operator(sp, &x);
            res.axpy(-1.0, &rhs);
            let rep = EllipticSolveReport {
                op: "shift".into(),
                iterations: total_it,
                residual: norm(&flatten3(&res)),
                tolerance: cfg.tol,
                discarded_mean: discarded,
                kernel_projected: kernel,
            };
            return Ok((x, rep.into_result()?));
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::SolverDivergence { op: "shift fixed point".into(), iterations: total_it, residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcg_solves_diagonal() {
        let d = vec![2.0, 3.0, 4.0];
        let b = vec![2.0, 3.0, 4.0];
        let mut x = vec![0.0; 3];
        let dd = d.clone();
        let (it, r) = pcg(move |v| v.iter().zip(&dd).map(|(a, b)| a * b).collect(), jacobi(&d), &b, &mut x, 1e-14, 10, |r| dot(r, r).sqrt());
        assert!(it <= 1 && r < 1e-14);
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn bicgstab_nonsymmetric() {
        // upper bidiagonal 3×3
        let apply = |v: &[f64]| vec![2.0 * v[0] + v[1], 2.0 * v[1] + v[2], 2.0 * v[2]];
        let b = vec![3.0, 3.0, 2.0];
        let mut x = vec![0.0; 3];
        let (_, r) = bicgstab(apply, jacobi(&[2.0; 3]), &b, &mut x, 1e-13, 50, |r| dot(r, r).sqrt());
        assert!(r < 1e-13);
        for v in x {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
