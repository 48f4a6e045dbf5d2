//! Stress-energy assembly for the reduced Kaluza-Klein matter and the
//! consistency checks of the reduction.
//!
//! Spacetime indices run over `(τ, x¹, x², x³)` in the unrescaled chart. The
//! conformal 4-metric is built from the rescaled data as
//! `h̃_00 = τ⁻⁴(−N² + |X|²)`, `h̃_0i = τ⁻³X_i`, `h̃_ij = τ⁻²g_ij`.

use crate::elliptic::FaradayField;
use crate::error::{Error, Result};
use crate::grid::*;
use crate::mesh::{sobolev_norm_geom, CovTensor, Geometry};

/// Pointwise inputs of the stress assembly.
pub struct MatterInputs<'a> {
    pub geom: &'a Geometry,
    pub lapse: &'a [f64],
    pub shift: &'a VectorField,
    pub tau: f64,
    pub phi: &'a PhiField,
    /// `∂ₑ₀Φ`.
    pub phi_dot: &'a PhiField,
    pub faraday: &'a FaradayField,
}

/// Components of the conformal stress tensor `T̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct TildeStress {
    pub t00: Vec<f64>,
    /// `T̃_0i`.
    pub t0i: OneFormField,
    pub tij: SymTensorField,
    /// `g̃^{ij} T̃_ij`.
    pub spatial_trace: Vec<f64>,
    /// `h̃^{αβ} T̃_αβ`.
    pub trace: Vec<f64>,
}

impl TildeStress {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        TildeStress {
            t00: vec![0.0; n],
            t0i: Field3::zeros(grid),
            tij: SymTensorField::zeros(grid),
            spatial_trace: vec![0.0; n],
            trace: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatterSet {
    pub rho: Vec<f64>,
    pub current: VectorField,
    pub eta: Vec<f64>,
    pub eta_under: Vec<f64>,
    pub stress: SymTensorField,
    pub tau: f64,
}

impl MatterSet {
    pub fn zeros(grid: Grid, tau: f64) -> Self {
        let n = grid.len();
        MatterSet {
            rho: vec![0.0; n],
            current: Field3::zeros(grid),
            eta: vec![0.0; n],
            eta_under: vec![0.0; n],
            stress: SymTensorField::zeros(grid),
            tau,
        }
    }
    pub fn max_abs(&self) -> f64 {
        [max_abs(&self.rho), self.current.max_abs(), max_abs(&self.eta), max_abs(&self.eta_under), self.stress.max_abs()]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// `Φ^{mp} ∂_j Φ_mp` per axis.
pub fn phi_trace_grad(grid: &Grid, phi: &PhiField) -> Result<[Vec<f64>; 3]> {
    let q = phi.q;
    let n = grid.len();
    let dphi: Vec<[Vec<f64>; 3]> = phi.comp.iter().map(|c| grad(grid, c)).collect();
    let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    for p in 0..n {
        let (inv, _) = phi_inverse(phi, p)?;
        for (j, o) in out.iter_mut().enumerate() {
            let mut t = 0.0;
            for a in 0..q {
                for b in 0..q {
                    t += inv[a * q + b] * dphi[pidx(q, b, a)][j][p];
                }
            }
            o[p] = t;
        }
    }
    Ok(out)
}

/// `Φ⁻¹` and `det Φ` at a point, with positive definiteness enforced.
pub fn phi_inverse(phi: &PhiField, p: usize) -> Result<(Vec<f64>, f64)> {
    let q = phi.q;
    let m = phi.matrix(p);
    if !small_is_spd(&m, q) {
        return Err(Error::Numeric { point: p, msg: "Φ is not positive definite".into() });
    }
    small_inverse(&m, q).ok_or_else(|| Error::Numeric { point: p, msg: "Φ is singular".into() })
}

/// Inverse of the conformal 4-metric in ADM form.
fn h_tilde_inverse(tau: f64, lapse: f64, x_up: [f64; 3], ginv: &Sym3) -> [[f64; 4]; 4] {
    // Ñ = N τ⁻², X̃ = X τ⁻¹, g̃^{ij} = τ² g^{ij}
    let nt2 = (lapse / (tau * tau)).powi(2);
    let xt = [x_up[0] / tau, x_up[1] / tau, x_up[2] / tau];
    let mut h = [[0.0; 4]; 4];
    h[0][0] = -1.0 / nt2;
    for i in 0..3 {
        h[0][i + 1] = xt[i] / nt2;
        h[i + 1][0] = xt[i] / nt2;
        for j in 0..3 {
            h[i + 1][j + 1] = tau * tau * ginv.get(i, j) - xt[i] * xt[j] / nt2;
        }
    }
    h
}

fn h_tilde(tau: f64, lapse: f64, x_up: [f64; 3], g: &Sym3) -> [[f64; 4]; 4] {
    let xl: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| g.get(i, j) * x_up[j]).sum());
    let x2: f64 = (0..3).map(|i| xl[i] * x_up[i]).sum();
    let mut h = [[0.0; 4]; 4];
    h[0][0] = (-lapse * lapse + x2) / tau.powi(4);
    for i in 0..3 {
        h[0][i + 1] = xl[i] / tau.powi(3);
        h[i + 1][0] = h[0][i + 1];
        for j in 0..3 {
            h[i + 1][j + 1] = g.get(i, j) / (tau * tau);
        }
    }
    h
}

/// Evaluate the conformal stress tensor exactly as displayed for the reduced
/// model: a first line `A_αβ` plus a common bracket `B` multiplying a metric
/// factor, with the off-diagonal factor `|τ|⁻³X_i`.
pub fn assemble_tilde_stress(inp: &MatterInputs) -> Result<TildeStress> {
    let geom = inp.geom;
    let grid = geom.grid;
    let n = grid.len();
    let q = inp.phi.q;
    let tau = inp.tau;
    if tau == 0.0 {
        return Err(Error::Domain("mean curvature τ = 0 makes the rescaling singular".into()));
    }
    if inp.faraday.q() != q && !inp.faraday.spatial.is_empty() {
        return Err(Error::Usage("Faraday channel count does not match Φ".into()));
    }
    let qf = inp.faraday.q();
    let dphi: Vec<[Vec<f64>; 3]> = inp.phi.comp.iter().map(|c| grad(&grid, c)).collect();
    let mut out = TildeStress::zeros(grid);
    let np = packed_len(q);
    for p in 0..n {
        let lapse = inp.lapse[p];
        if !(lapse > 0.0) {
            return Err(Error::Numeric { point: p, msg: format!("lapse must be positive, got {}", lapse) });
        }
        let (phinv, det) = phi_inverse(inp.phi, p)?;
        let sdet = det.sqrt();
        let g = geom.g.at(p);
        let ginv = geom.inv.at(p);
        let x_up = inp.shift.at(p);
        let hi = h_tilde_inverse(tau, lapse, x_up, &ginv);
        let hl = h_tilde(tau, lapse, x_up, &g);
        // ∇_α Φ as dense q×q matrices: α = 0 is ∂_τ = −τ⁻¹ ∂_T with ∂_T = N∂ₑ₀ − X·∂
        let mut dmat: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; q * q]);
        for a in 0..q {
            for b in 0..q {
                let k = pidx(q, a, b);
                let adv: f64 = (0..3).map(|i| x_up[i] * dphi[k][i][p]).sum();
                dmat[0][a * q + b] = -(lapse * inp.phi_dot.comp[k][p] - adv) / tau;
                for i in 0..3 {
                    dmat[i + 1][a * q + b] = dphi[k][i][p];
                }
            }
        }
        let _ = np;
        let mm: [Vec<f64>; 4] = std::array::from_fn(|a| small_mul(&phinv, &dmat[a], q));
        let mut t1 = [[0.0; 4]; 4];
        let mut t2 = [0.0; 4];
        for a in 0..4 {
            t2[a] = small_trace(&mm[a], q);
            for b in a..4 {
                t1[a][b] = small_trace_prod(&mm[a], &mm[b], q);
                t1[b][a] = t1[a][b];
            }
        }
        // F_{μν,m} in the (τ, x) chart
        let fm: Vec<[[f64; 4]; 4]> = (0..qf)
            .map(|m| {
                let mut f = [[0.0; 4]; 4];
                for i in 0..3 {
                    for j in 0..3 {
                        f[i + 1][j + 1] = inp.faraday.f(m, p, i, j);
                    }
                }
                for i in 0..3 {
                    // F_{iT} = N E_i − X^j F_ij, F_{τi} = τ⁻¹ F_{iT}
                    let fit = lapse * inp.faraday.electric[m].comp[i][p]
                        - (0..3).map(|j| x_up[j] * inp.faraday.f(m, p, i, j)).sum::<f64>();
                    f[0][i + 1] = fit / tau;
                    f[i + 1][0] = -fit / tau;
                }
                f
            })
            .collect();
        // raised F^{μν}
        let fup: Vec<[[f64; 4]; 4]> = fm
            .iter()
            .map(|f| {
                let mut u = [[0.0; 4]; 4];
                for a in 0..4 {
                    for b in 0..4 {
                        let mut v = 0.0;
                        for c in 0..4 {
                            for d in 0..4 {
                                v += hi[a][c] * hi[b][d] * f[c][d];
                            }
                        }
                        u[a][b] = v;
                    }
                }
                u
            })
            .collect();
        let ff = |m: usize, k: usize| -> f64 {
            let mut v = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    v += fm[m][a][b] * fup[k][a][b];
                }
            }
            v
        };
        // first-line tensor A_αβ
        let mut amat = [[0.0; 4]; 4];
        for al in 0..4 {
            for be in al..4 {
                let mut fterm = 0.0;
                for f in fm.iter() {
                    for mu in 0..4 {
                        for nu in 0..4 {
                            fterm += hi[mu][nu] * f[be][nu] * f[al][mu];
                        }
                    }
                }
                let v = 0.5 * sdet * fterm + 0.25 * t1[al][be] + 0.125 * t2[al] * t2[be];
                amat[al][be] = v;
                amat[be][al] = v;
            }
        }
        let mut hc_t1 = 0.0;
        let mut hc_t2 = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                hc_t1 += hi[a][b] * t1[a][b];
                hc_t2 += hi[a][b] * t2[a] * t2[b];
            }
        }
        let mut f2 = 0.0;
        let mut fphi = 0.0;
        for m in 0..qf {
            f2 += ff(m, m);
            for k in 0..qf {
                fphi += phinv[m * q + k] * ff(m, k);
            }
        }
        let bracket = -0.25 * sdet * f2 - 0.375 * hc_t1 - 0.0625 * hc_t2 + 0.25 * hc_t1 + 0.125 * sdet * fphi;
        let xl: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| g.get(i, j) * x_up[j]).sum());
        let x2: f64 = (0..3).map(|i| xl[i] * x_up[i]).sum();
        out.t00[p] = amat[0][0] + bracket * (-lapse * lapse + x2) / tau.powi(4);
        for i in 0..3 {
            out.t0i.comp[i][p] = amat[0][i + 1] + bracket * xl[i] / tau.abs().powi(3);
        }
        let mut gtr_a = 0.0;
        for s in 0..6 {
            let (i, j) = SYM_PAIRS[s];
            out.tij.comp[s][p] = amat[i + 1][j + 1] + bracket * g.get(i, j) / (tau * tau);
        }
        for i in 0..3 {
            for j in 0..3 {
                gtr_a += ginv.get(i, j) * amat[i + 1][j + 1];
            }
        }
        out.spatial_trace[p] = tau * tau * gtr_a + 3.0 * bracket;
        let mut tr = hi[0][0] * out.t00[p];
        for i in 0..3 {
            tr += 2.0 * hi[0][i + 1] * out.t0i.comp[i][p];
            for j in 0..3 {
                tr += hi[i + 1][j + 1] * out.tij.comp[SYM[i][j]][p];
            }
        }
        out.trace[p] = tr;
        let _ = hl;
    }
    Ok(out)
}

/// Rescaled matter quantities from the conformal stress tensor.
pub fn matter_from_stress(inp: &MatterInputs, ts: &TildeStress) -> Result<MatterSet> {
    let geom = inp.geom;
    let grid = geom.grid;
    let n = grid.len();
    let tau = inp.tau;
    if tau == 0.0 {
        return Err(Error::Domain("mean curvature τ = 0 makes the rescaling singular".into()));
    }
    let pi4 = 4.0 * std::f64::consts::PI;
    let pi8 = 8.0 * std::f64::consts::PI;
    let mut ms = MatterSet::zeros(grid, tau);
    for p in 0..n {
        let lapse = inp.lapse[p];
        let x = inp.shift.at(p);
        let ginv = geom.inv.at(p);
        let mut xxt = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                xxt += x[i] * x[j] * ts.tij.comp[SYM[i][j]][p];
            }
        }
        let rho = pi4 * tau / (lapse * lapse) * (ts.t00[p] + xxt / (tau * tau));
        ms.rho[p] = rho;
        for j in 0..3 {
            let mut v = 0.0;
            for i in 0..3 {
                let tki: f64 = (0..3).map(|k| ts.tij.comp[SYM[k][i]][p] * x[k]).sum();
                v += ginv.get(i, j) * (-ts.t0i.comp[i][p] * tau.abs() + tki);
            }
            ms.current.comp[j][p] = pi8 / (tau * tau * lapse) * v;
        }
        // ρ̃ = ρ τ³ / 4π
        let rho_t = rho * tau.powi(3) / pi4;
        ms.eta[p] = pi4 * (rho_t + ts.spatial_trace[p]) / tau.powi(3);
        ms.eta_under[p] = pi4 * ts.spatial_trace[p] / tau.powi(5);
        for s in 0..6 {
            let gt = geom.g.comp[s][p] / (tau * tau);
            ms.stress.comp[s][p] = pi8 / tau * (ts.tij.comp[s][p] - 0.5 * gt * ts.trace[p]);
        }
    }
    Ok(ms)
}

/// `T̃` and the matter set in one pass. Vacuum input returns exact zeros.
pub fn assemble_matter(inp: &MatterInputs) -> Result<(MatterSet, TildeStress)> {
    let grid = inp.geom.grid;
    let constant = |c: &Vec<f64>| c.iter().all(|x| *x == c[0]);
    let vacuum = inp.phi_dot.max_abs() == 0.0 && inp.faraday.is_zero() && inp.phi.comp.iter().all(constant);
    if vacuum && inp.tau != 0.0 && inp.lapse.iter().all(|x| *x > 0.0) {
        return Ok((MatterSet::zeros(grid, inp.tau), TildeStress::zeros(grid)));
    }
    let ts = assemble_tilde_stress(inp)?;
    let ms = matter_from_stress(inp, &ts)?;
    Ok((ms, ts))
}

/// One inequality of the matter-norm bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBound {
    pub name: &'static str,
    pub lhs: f64,
    /// Right side without the constant.
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatterNormReport {
    pub order: usize,
    pub f_norm: f64,
    pub phi_norm: f64,
    pub constant: f64,
    pub bounds: Vec<NormBound>,
}

impl MatterNormReport {
    pub fn all_hold(&self) -> bool {
        self.bounds.iter().all(|b| b.holds)
    }
}

/// `⦀F⦀_ℓ`: Sobolev norms of `|τ| F_{0i}` and `F_ij` with `∂_τ`-components.
pub fn faraday_norm(geom: &Geometry, tau: f64, lapse: &[f64], shift: &VectorField, f: &FaradayField, order: usize) -> Result<f64> {
    let grid = geom.grid;
    let n = grid.len();
    let mut total = 0.0;
    for m in 0..f.q() {
        // F_{0i} = −F_{τ... } with F_{τi} = τ⁻¹(N E_i − X^j F_ij)
        let mut f0 = Field3::zeros(grid);
        for p in 0..n {
            for i in 0..3 {
                let fit = lapse[p] * f.electric[m].comp[i][p] - (0..3).map(|j| shift.comp[j][p] * f.f(m, p, i, j)).sum::<f64>();
                f0.comp[i][p] = tau.abs() * fit / tau;
            }
        }
        let a = sobolev_norm_geom(geom, &CovTensor::from_oneform(&f0), order)?;
        let s = &f.spatial[m];
        let b = sobolev_norm_geom(geom, &CovTensor::from_two_form(grid, &s[0], &s[1], &s[2]), order)?;
        // the two-form contraction double counts each independent component
        total += a * a + 0.5 * b * b;
    }
    Ok(total.sqrt())
}

/// `⦀Φ⦀_ℓ` measured against the constant reference `phi_b`.
pub fn phi_norm(geom: &Geometry, tau: f64, lapse: &[f64], shift: &VectorField, phi: &PhiField, phi_dot: &PhiField, phi_b: &[f64], order: usize) -> Result<f64> {
    let grid = geom.grid;
    let n = grid.len();
    let q = phi.q;
    let mut total = 0.0;
    for a in 0..q {
        for b in 0..q {
            let k = pidx(q, a, b);
            let adv = crate::mesh::advect(&grid, shift, &phi.comp[k]);
            let d0: Vec<f64> = (0..n).map(|p| -(lapse[p] * phi_dot.comp[k][p] - adv[p]) / tau).collect();
            if order >= 1 {
                let s = sobolev_norm_geom(geom, &CovTensor::scalar(grid, &d0), order - 1)?;
                total += s * s;
            }
            let pert: Vec<f64> = phi.comp[k].iter().map(|x| x - phi_b[a * q + b]).collect();
            let s = sobolev_norm_geom(geom, &CovTensor::scalar(grid, &pert), order)?;
            total += s * s / (tau * tau);
        }
    }
    Ok(total.sqrt())
}

/// Inputs of [`matter_norm_report`] beyond the matter inputs.
pub struct NormContext<'a> {
    pub matter: &'a MatterSet,
    pub phi_b: &'a [f64],
    pub order: usize,
    pub constant: f64,
}

/// Both sides of each matter bound `‖·‖_ℓ ≤ C |τ|^a (1 + ‖X/N‖²_ℓ)(⦀F⦀² + ⦀Φ⦀²)`.
pub fn matter_norm_report(inp: &MatterInputs, ctx: &NormContext) -> Result<MatterNormReport> {
    let geom = inp.geom;
    let grid = geom.grid;
    let n = grid.len();
    let l = ctx.order;
    if l > crate::mesh::MAX_SOBOLEV_ORDER {
        return Err(Error::Config(format!("norm order {} exceeds the build maximum", l)));
    }
    let fnorm = faraday_norm(geom, inp.tau, inp.lapse, inp.shift, inp.faraday, l)?;
    let pnorm = phi_norm(geom, inp.tau, inp.lapse, inp.shift, inp.phi, inp.phi_dot, ctx.phi_b, l)?;
    let mut xhat = Field3::zeros(grid);
    for i in 0..3 {
        for p in 0..n {
            xhat.comp[i][p] = inp.shift.comp[i][p] / inp.lapse[p];
        }
    }
    let xn = sobolev_norm_geom(geom, &CovTensor::from_oneform(&geom.lower(&xhat)), l)?;
    let base = (1.0 + xn * xn) * (fnorm * fnorm + pnorm * pnorm);
    let t = inp.tau.abs();
    let m = ctx.matter;
    let sc = |v: &[f64]| sobolev_norm_geom(geom, &CovTensor::scalar(grid, v), l);
    let entries = [
        ("rho", sc(&m.rho)?, t * base),
        ("eta", sc(&m.eta)?, t * base),
        ("current", sobolev_norm_geom(geom, &CovTensor::from_oneform(&geom.lower(&m.current)), l)?, base),
        ("stress", sobolev_norm_geom(geom, &CovTensor::from_sym(&m.stress), l)?, t * base),
    ];
    let bounds = entries
        .into_iter()
        .map(|(name, lhs, rhs)| NormBound { name, lhs, rhs, holds: lhs <= ctx.constant * rhs * (1.0 + 1e-12) })
        .collect();
    Ok(MatterNormReport { order: l, f_norm: fnorm, phi_norm: pnorm, constant: ctx.constant, bounds })
}

// ---------------------------------------------------------------------------
// Conformal transformation identities on a synthetic 4D chart.

/// Smooth Lorentzian test data around the origin of `R⁴`.
pub trait ConformalData {
    fn metric(&self, x: [f64; 4]) -> [[f64; 4]; 4];
    /// Conformal exponent `u`.
    fn u(&self, x: [f64; 4]) -> f64;
    /// Test function for the Hessian and wave-operator identities.
    fn f(&self, x: [f64; 4]) -> f64;
}

/// Lorentzian metric `−(1 + a sin)dt² + (δ + b·modes)dx²` with
/// `u = −¼ log det Φ` for `Φ = (1 + ε sin(k·x)) Id_q`.
#[derive(Clone, Debug)]
pub struct SyntheticChart {
    pub amp_metric: f64,
    pub phi_amp: f64,
    pub q: usize,
    pub k: [f64; 4],
}

impl SyntheticChart {
    pub fn new(phi_amp: f64, q: usize) -> Self {
        SyntheticChart { amp_metric: 0.1, phi_amp, q, k: [0.7, 1.1, -0.9, 0.5] }
    }
    pub fn phi_scalar(&self, x: [f64; 4]) -> f64 {
        let s: f64 = (0..4).map(|a| self.k[a] * x[a]).sum();
        1.0 + self.phi_amp * s.sin()
    }
}

impl ConformalData for SyntheticChart {
    fn metric(&self, x: [f64; 4]) -> [[f64; 4]; 4] {
        let a = self.amp_metric;
        let mut h = [[0.0; 4]; 4];
        h[0][0] = -(1.0 + a * (x[1] + 0.5 * x[0]).sin());
        h[1][1] = 1.0 + a * (x[2] + 0.3 * x[0]).cos();
        h[2][2] = 1.0 + a * (x[3] - x[1]).sin();
        h[3][3] = 1.0 + 0.5 * a * (x[1] + x[2]).cos();
        h[0][1] = 0.5 * a * (x[3] + x[0]).sin();
        h[1][0] = h[0][1];
        h[1][2] = 0.3 * a * (x[0] - x[3]).cos();
        h[2][1] = h[1][2];
        h[2][3] = 0.2 * a * x[1].sin();
        h[3][2] = h[2][3];
        h
    }
    fn u(&self, x: [f64; 4]) -> f64 {
        // det Φ = φ^q
        -0.25 * self.q as f64 * self.phi_scalar(x).ln()
    }
    fn f(&self, x: [f64; 4]) -> f64 {
        (0.4 * x[0] + 0.8 * x[1]).sin() * (1.0 + 0.3 * (x[2] - 0.6 * x[3]).cos())
    }
}

type M4 = [[f64; 4]; 4];

fn inv4(m: &M4) -> M4 {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let (inv, _) = small_inverse(&flat, 4).expect("test metric is nondegenerate");
    std::array::from_fn(|i| std::array::from_fn(|j| inv[i * 4 + j]))
}

fn shift(x: [f64; 4], a: usize, s: f64) -> [f64; 4] {
    let mut y = x;
    y[a] += s;
    y
}

/// Geometry of a metric given as a function, differentiated with step `h`.
struct FdMetric<'a> {
    metric: &'a dyn Fn([f64; 4]) -> M4,
    h: f64,
}

impl FdMetric<'_> {
    /// `Γ^k_ij` at `x`.
    fn christoffel(&self, x: [f64; 4]) -> [M4; 4] {
        let h = self.h;
        let gi = inv4(&(self.metric)(x));
        let dg: [M4; 4] = std::array::from_fn(|a| {
            let p = (self.metric)(shift(x, a, h));
            let m = (self.metric)(shift(x, a, -h));
            std::array::from_fn(|i| std::array::from_fn(|j| (p[i][j] - m[i][j]) / (2.0 * h)))
        });
        std::array::from_fn(|k| {
            std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    (0..4).map(|l| 0.5 * gi[k][l] * (dg[i][j][l] + dg[j][i][l] - dg[l][i][j])).sum()
                })
            })
        })
    }

    fn ricci(&self, x: [f64; 4]) -> M4 {
        let h = self.h;
        let gam = self.christoffel(x);
        let dgam: [[M4; 4]; 4] = std::array::from_fn(|a| {
            let p = self.christoffel(shift(x, a, h));
            let m = self.christoffel(shift(x, a, -h));
            std::array::from_fn(|k| std::array::from_fn(|i| std::array::from_fn(|j| (p[k][i][j] - m[k][i][j]) / (2.0 * h))))
        });
        std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let mut r = 0.0;
                for k in 0..4 {
                    r += dgam[k][k][i][j] - dgam[j][k][k][i];
                    for l in 0..4 {
                        r += gam[k][k][l] * gam[l][i][j] - gam[k][j][l] * gam[l][k][i];
                    }
                }
                r
            })
        })
    }

    fn grad(&self, f: &dyn Fn([f64; 4]) -> f64, x: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|a| (f(shift(x, a, self.h)) - f(shift(x, a, -self.h))) / (2.0 * self.h))
    }

    fn hessian(&self, f: &dyn Fn([f64; 4]) -> f64, x: [f64; 4]) -> M4 {
        let h = self.h;
        let gam = self.christoffel(x);
        let df = self.grad(f, x);
        std::array::from_fn(|a| {
            std::array::from_fn(|b| {
                let d2 = if a == b {
                    (f(shift(x, a, h)) - 2.0 * f(x) + f(shift(x, a, -h))) / (h * h)
                } else {
                    (f(shift(shift(x, a, h), b, h)) - f(shift(shift(x, a, h), b, -h)) - f(shift(shift(x, a, -h), b, h))
                        + f(shift(shift(x, a, -h), b, -h)))
                        / (4.0 * h * h)
                };
                d2 - (0..4).map(|k| gam[k][a][b] * df[k]).sum::<f64>()
            })
        })
    }
}

fn trace4(gi: &M4, t: &M4) -> f64 {
    let mut s = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            s += gi[a][b] * t[a][b];
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalReport {
    pub step: f64,
    pub ricci: f64,
    pub scalar: f64,
    pub hessian: f64,
    pub wave: f64,
}

impl ConformalReport {
    pub fn as_array(&self) -> [f64; 4] {
        [self.ricci, self.scalar, self.hessian, self.wave]
    }
}

/// Residuals at the origin of the four transformation formulas for
/// `h̄ = e^{2u} h̃` in dimension 4, with all derivatives by central differences of step `h`.
pub fn verify_conformal_identities(data: &dyn ConformalData, h: f64) -> ConformalReport {
    let x0 = [0.0; 4];
    let nd = 4.0;
    let base = |x: [f64; 4]| data.metric(x);
    let bar = |x: [f64; 4]| {
        let e = (2.0 * data.u(x)).exp();
        let m = data.metric(x);
        std::array::from_fn(|i| std::array::from_fn(|j| e * m[i][j]))
    };
    let mt = FdMetric { metric: &base, h };
    let mb = FdMetric { metric: &bar, h };
    let u = |x: [f64; 4]| data.u(x);
    let f = |x: [f64; 4]| data.f(x);
    let ht = data.metric(x0);
    let hti = inv4(&ht);
    let hb = bar(x0);
    let hbi = inv4(&hb);
    let e2u = (2.0 * data.u(x0)).exp();
    let du = mt.grad(&u, x0);
    let df = mt.grad(&f, x0);
    let hu = mt.hessian(&u, x0);
    let hf_t = mt.hessian(&f, x0);
    let hf_b = mb.hessian(&f, x0);
    let box_u = trace4(&hti, &hu);
    let box_f_t = trace4(&hti, &hf_t);
    let mut du2 = 0.0;
    let mut dudf = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            du2 += hti[a][b] * du[a] * du[b];
            dudf += hti[a][b] * du[a] * df[b];
        }
    }
    let rt = mt.ricci(x0);
    let rb = mb.ricci(x0);
    let mut ricci_res: f64 = 0.0;
    let mut hess_res: f64 = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            let rhs = rt[a][b] - (nd - 2.0) * (hu[a][b] - du[a] * du[b]) - (box_u + (nd - 2.0) * du2) * ht[a][b];
            ricci_res = ricci_res.max((rb[a][b] - rhs).abs());
            let hrhs = hf_t[a][b] - du[a] * df[b] - du[b] * df[a] + dudf * ht[a][b];
            hess_res = hess_res.max((hf_b[a][b] - hrhs).abs());
        }
    }
    let rs_t = trace4(&hti, &rt);
    let rs_b = trace4(&hbi, &rb);
    let scal_rhs = (rs_t - 2.0 * (nd - 1.0) * box_u - (nd - 2.0) * (nd - 1.0) * du2) / e2u;
    let box_f_b = trace4(&hbi, &hf_b);
    let wave_rhs = (box_f_t + (nd - 2.0) * dudf) / e2u;
    ConformalReport {
        step: h,
        ricci: ricci_res,
        scalar: (rs_b - scal_rhs).abs(),
        hessian: hess_res,
        wave: (box_f_b - wave_rhs).abs(),
    }
}

// ---------------------------------------------------------------------------
// Divergence identity of the stress tensor.

/// State of the geometry and matter at one time, in rescaled variables.
#[derive(Clone, Debug)]
pub struct MatterSnapshot {
    pub t: f64,
    pub tau: f64,
    pub g: MetricField,
    pub sigma: SymTensorField,
    pub lapse: Vec<f64>,
    pub shift: VectorField,
    pub matter: MatterSet,
    pub stress: TildeStress,
}

/// Densities in the normalization of the divergence identity:
/// `ρ = |τ|⁻³ρ̃`, `jⁱ = |τ|⁻⁵j̃ⁱ`, `T^{ij} = |τ|⁻⁷ g̃^{ik} g̃^{jl} T̃_kl`.
pub struct IdentityDensities {
    pub rho: Vec<f64>,
    pub current: VectorField,
    pub tup: SymTensorField,
}

pub fn identity_densities(s: &MatterSnapshot, geom: &Geometry) -> IdentityDensities {
    let n = geom.n();
    let pi4 = 4.0 * std::f64::consts::PI;
    let pi8 = 8.0 * std::f64::consts::PI;
    let rho: Vec<f64> = s.matter.rho.iter().map(|r| -r / pi4).collect();
    let current = s.matter.current.scaled(1.0 / pi8);
    let mut tup = SymTensorField::zeros(geom.grid);
    let f = s.tau.abs().powi(-3);
    for p in 0..n {
        let gi = geom.inv.at(p);
        for sidx in 0..6 {
            let (i, j) = SYM_PAIRS[sidx];
            let mut v = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    v += gi.get(i, k) * gi.get(j, l) * s.stress.tij.comp[SYM[k][l]][p];
                }
            }
            tup.comp[sidx][p] = f * v;
        }
    }
    IdentityDensities { rho, current, tup }
}

#[derive(Clone, Debug)]
pub struct DivergenceReport {
    pub rho_residual: Vec<f64>,
    pub current_residual: VectorField,
    pub rho_l2: f64,
    pub rho_linf: f64,
    pub current_l2: f64,
    pub current_linf: f64,
}

/// Right sides of the energy and momentum balance laws at one snapshot.
pub fn divergence_rhs(s: &MatterSnapshot) -> Result<(Vec<f64>, VectorField)> {
    let geom = Geometry::new(&s.g)?;
    let grid = geom.grid;
    let n = grid.len();
    let d = identity_densities(s, &geom);
    let tau = s.tau;
    let lapse = &s.lapse;
    let x = &s.shift;
    let drho = grad(&grid, &d.rho);
    let mut n2j = Field3::zeros(grid);
    for i in 0..3 {
        for p in 0..n {
            n2j.comp[i][p] = lapse[p] * lapse[p] * d.current.comp[i][p];
        }
    }
    let div_n2j = geom.div_vector(&n2j);
    let dj: [[Vec<f64>; 3]; 3] = std::array::from_fn(|a| std::array::from_fn(|k| d1(&grid, &d.current.comp[k], a)));
    let dx: [[Vec<f64>; 3]; 3] = std::array::from_fn(|a| std::array::from_fn(|k| d1(&grid, &x.comp[k], a)));
    let ntup: [Vec<f64>; 6] = std::array::from_fn(|sidx| (0..n).map(|p| lapse[p] * d.tup.comp[sidx][p]).collect());
    let dnt: [[Vec<f64>; 6]; 3] = std::array::from_fn(|a| std::array::from_fn(|sidx| d1(&grid, &ntup[sidx], a)));
    let dn = grad(&grid, lapse);
    let mut rrho = vec![0.0; n];
    let mut rj = Field3::zeros(grid);
    for p in 0..n {
        let g = geom.g.at(p);
        let gi = geom.inv.at(p);
        let sig = s.sigma.at(p);
        let mut gt = 0.0;
        let mut st = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let t = d.tup.comp[SYM[i][j]][p];
                gt += g.get(i, j) * t;
                st += sig.get(i, j) * t;
            }
        }
        let adv: f64 = (0..3).map(|i| x.comp[i][p] * drho[i][p]).sum();
        rrho[p] = (3.0 - lapse[p]) * d.rho[p] - adv + tau / lapse[p] * div_n2j[p] - tau * tau * lapse[p] / 3.0 * gt
            - tau * tau * lapse[p] * st;
        // ∇_k X^l and ∇_k j^l
        let cov = |dv: &[[Vec<f64>; 3]; 3], v: &Field3, k: usize, l: usize| -> f64 {
            dv[k][l][p] + (0..3).map(|m| geom.gamma.at(p, l, k, m) * v.comp[m][p]).sum::<f64>()
        };
        for i in 0..3 {
            let mut v = 5.0 / 3.0 * (3.0 - lapse[p]) * d.current.comp[i][p];
            for j in 0..3 {
                v -= x.comp[j][p] * cov(&dj, &d.current, j, i);
            }
            // (∇^i X_j) j^j = g^{ik} g_{jl} ∇_k X^l j^j
            for j in 0..3 {
                let mut nix = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        nix += gi.get(i, k) * g.get(j, l) * cov(&dx, x, k, l);
                    }
                }
                v -= nix * d.current.comp[j][p];
            }
            // ∇_j(N T^{ij})
            let mut div = 0.0;
            for j in 0..3 {
                div += dnt[j][SYM[i][j]][p];
                for k in 0..3 {
                    div += geom.gamma.at(p, i, j, k) * ntup[SYM[k][j]][p];
                    div += geom.gamma.at(p, j, j, k) * ntup[SYM[i][k]][p];
                }
            }
            v += tau * div;
            // Σ^i_j j^j
            for j in 0..3 {
                let sij: f64 = (0..3).map(|k| gi.get(i, k) * sig.get(k, j)).sum();
                v -= 2.0 * lapse[p] * sij * d.current.comp[j][p];
            }
            let dni: f64 = (0..3).map(|k| gi.get(i, k) * dn[k][p]).sum();
            v -= d.rho[p] / tau.abs() * dni;
            rj.comp[i][p] = v;
        }
    }
    Ok((rrho, rj))
}

/// Forward-difference check of the balance laws between two snapshots.
pub fn verify_divergence_identity(a: &MatterSnapshot, b: &MatterSnapshot) -> Result<DivergenceReport> {
    let dt = b.t - a.t;
    if !(dt > 0.0) {
        return Err(Error::Usage("snapshots must be ordered in time".into()));
    }
    let ga = Geometry::new(&a.g)?;
    let gb = Geometry::new(&b.g)?;
    let da = identity_densities(a, &ga);
    let db = identity_densities(b, &gb);
    let (rr, rj) = divergence_rhs(a)?;
    let grid = ga.grid;
    let n = grid.len();
    let rho_res: Vec<f64> = (0..n).map(|p| (db.rho[p] - da.rho[p]) / dt - rr[p]).collect();
    let mut cur_res = Field3::zeros(grid);
    for i in 0..3 {
        for p in 0..n {
            cur_res.comp[i][p] = (db.current.comp[i][p] - da.current.comp[i][p]) / dt - rj.comp[i][p];
        }
    }
    let l2 = |v: &[f64]| ga.integrate(&v.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
    let cur_sq: Vec<f64> = (0..n).map(|p| ga.oneform_dot_at(p, &ga.lower(&cur_res), &ga.lower(&cur_res))).collect();
    Ok(DivergenceReport {
        rho_l2: l2(&rho_res),
        rho_linf: max_abs(&rho_res),
        current_l2: ga.integrate(&cur_sq).sqrt(),
        current_linf: cur_res.max_abs(),
        rho_residual: rho_res,
        current_residual: cur_res,
    })
}
