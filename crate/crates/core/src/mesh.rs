//! Discrete geometry on the periodic chart.
//!
//! Pure second derivatives use the compact three-point stencil and mixed
//! derivatives the centered cross stencil, so constants and constant forms are
//! annihilated exactly and no checkerboard modes enter the kernels of the
//! Laplace-type operators.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::*;

/// Rayleigh-quotient threshold separating harmonic forms from the rest of the spectrum.
pub const KERNEL_TOL: f64 = 1e-8;
/// Highest derivative order supported by [`sobolev_norm`].
pub const MAX_SOBOLEV_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundKind {
    FlatTorus,
    SuppliedMetric,
}

/// How the evolution equations evaluate spatial Ricci curvature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurvatureModel {
    /// Discrete Ricci tensor of the evolved metric.
    Discrete,
    /// Discrete Ricci tensor shifted by `-(2/9) g`, so that the flat chart
    /// carries the Einstein constant of the hyperbolic background.
    EinsteinStandIn,
}

/// Christoffel symbols `Γ^k_ij` with `(i, j)` packed symmetrically.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    pub comp: [[Vec<f64>; 6]; 3],
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel { comp: std::array::from_fn(|_| std::array::from_fn(|_| vec![0.0; n])) }
    }
    #[inline]
    pub fn at(&self, p: usize, k: usize, i: usize, j: usize) -> f64 {
        self.comp[k][SYM[i][j]][p]
    }
    pub fn max_abs(&self) -> f64 {
        self.comp.iter().flatten().map(|c| max_abs(c)).fold(0.0, f64::max)
    }
}

/// A Levi-Civita connection with its first derivatives, as needed by the
/// compact rough Laplacians.
#[derive(Clone, Debug)]
pub struct Connection {
    pub gamma: Christoffel,
    /// `dgamma[a].comp[k][s] = ∂_a Γ^k_s`
    pub dgamma: [Christoffel; 3],
    pub flat: bool,
}

impl Connection {
    pub fn flat(n: usize) -> Self {
        Connection { gamma: Christoffel::zeros(n), dgamma: std::array::from_fn(|_| Christoffel::zeros(n)), flat: true }
    }
}

/// Metric together with inverse, volume density, first derivatives and Christoffels.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub grid: Grid,
    pub g: MetricField,
    pub inv: MetricField,
    pub sqrt_det: Vec<f64>,
    /// `dg[k][s] = ∂_k g_s`
    pub dg: [[Vec<f64>; 6]; 3],
    pub gamma: Christoffel,
}

impl Geometry {
    pub fn new(g: &MetricField) -> Result<Self> {
        let grid = g.grid;
        let n = grid.len();
        let mut inv = SymTensorField::zeros(grid);
        let mut sqrt_det = vec![0.0; n];
        for p in 0..n {
            let m = g.at(p);
            let (mi, det) = m.inverse().ok_or_else(|| Error::Numeric {
                point: p,
                msg: format!("singular metric (det = {:.3e})", m.det()),
            })?;
            if det <= 0.0 || !m.is_spd() {
                return Err(Error::Numeric { point: p, msg: "metric is not positive definite".into() });
            }
            inv.set(p, mi);
            sqrt_det[p] = det.sqrt();
        }
        let dg: [[Vec<f64>; 6]; 3] = std::array::from_fn(|k| std::array::from_fn(|s| d1(&grid, &g.comp[s], k)));
        let mut gamma = Christoffel::zeros(n);
        for p in 0..n {
            let gi = inv.at(p);
            for s in 0..6 {
                let (i, j) = SYM_PAIRS[s];
                // Γ_{l,ij} = ½(∂_i g_jl + ∂_j g_il − ∂_l g_ij)
                let mut low = [0.0; 3];
                for (l, lo) in low.iter_mut().enumerate() {
                    *lo = 0.5 * (dg[i][SYM[j][l]][p] + dg[j][SYM[i][l]][p] - dg[l][SYM[i][j]][p]);
                }
                for k in 0..3 {
                    gamma.comp[k][s][p] = (0..3).map(|l| gi.get(k, l) * low[l]).sum();
                }
            }
        }
        Ok(Geometry { grid, g: g.clone(), inv, sqrt_det, dg, gamma })
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    /// True when every Christoffel symbol vanishes identically.
    pub fn is_flat_connection(&self) -> bool {
        self.gamma.max_abs() == 0.0
    }

    pub fn connection(&self) -> Connection {
        if self.is_flat_connection() {
            return Connection::flat(self.n());
        }
        let grid = self.grid;
        let dgamma = std::array::from_fn(|a| Christoffel {
            comp: std::array::from_fn(|k| std::array::from_fn(|s| d1(&grid, &self.gamma.comp[k][s], a))),
        });
        Connection { gamma: self.gamma.clone(), dgamma, flat: false }
    }

    /// Riemannian volume of the chart.
    pub fn volume(&self) -> f64 {
        self.sqrt_det.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `∫ f dV_g`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.sqrt_det).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_volume()
    }

    /// `⨍ f dV_g`.
    pub fn mean(&self, f: &[f64]) -> f64 {
        self.integrate(f) / self.volume()
    }

    /// Remove the `dV_g`-weighted mean; returns the removed value.
    pub fn remove_mean(&self, f: &mut [f64]) -> f64 {
        let m = self.mean(f);
        f.iter_mut().for_each(|x| *x -= m);
        m
    }

    /// Ricci tensor from second derivatives of the metric.
    pub fn ricci(&self) -> SymTensorField {
        let grid = self.grid;
        let n = self.n();
        let mut ric = SymTensorField::zeros(grid);
        // d2g[ab][s] = ∂_a∂_b g_s
        let d2g: Vec<[Vec<f64>; 6]> = SYM_PAIRS.iter().map(|&(a, b)| std::array::from_fn(|s| d2(&grid, &self.g.comp[s], a, b))).collect();
        for p in 0..n {
            let gi = self.inv.at(p).full();
            let dd = |a: usize, b: usize, i: usize, j: usize| d2g[SYM[a][b]][SYM[i][j]][p];
            let dgp = |k: usize, i: usize, j: usize| self.dg[k][SYM[i][j]][p];
            // dginv[j][k][l] = ∂_j g^{kl} = −g^{ka} ∂_j g_ab g^{bl}
            let mut dginv = [[[0.0; 3]; 3]; 3];
            for (j, out) in dginv.iter_mut().enumerate() {
                let mut t = [[0.0; 3]; 3];
                for a in 0..3 {
                    for l in 0..3 {
                        t[a][l] = (0..3).map(|b| dgp(j, a, b) * gi[b][l]).sum();
                    }
                }
                for k in 0..3 {
                    for l in 0..3 {
                        out[k][l] = -(0..3).map(|a| gi[k][a] * t[a][l]).sum::<f64>();
                    }
                }
            }
            let dginv_div: [f64; 3] = std::array::from_fn(|l| (0..3).map(|k| dginv[k][k][l]).sum());
            // Γ^k_kl
            let trg: [f64; 3] = std::array::from_fn(|l| (0..3).map(|k| self.gamma.at(p, k, k, l)).sum());
            for s in 0..6 {
                let (i, j) = SYM_PAIRS[s];
                let mut r = 0.0;
                for l in 0..3 {
                    let low = 0.5 * (dgp(i, j, l) + dgp(j, i, l) - dgp(l, i, j));
                    r += dginv_div[l] * low;
                }
                for k in 0..3 {
                    for l in 0..3 {
                        let gkl = gi[k][l];
                        if gkl != 0.0 {
                            r += 0.5 * gkl * (dd(k, i, j, l) + dd(k, j, i, l) - dd(k, l, i, j) - dd(i, j, k, l));
                        }
                        r -= 0.5 * dginv[j][k][l] * dgp(i, k, l);
                    }
                }
                for l in 0..3 {
                    r += trg[l] * self.gamma.at(p, l, i, j);
                    for k in 0..3 {
                        r -= self.gamma.at(p, k, j, l) * self.gamma.at(p, l, k, i);
                    }
                }
                ric.comp[s][p] = r;
            }
        }
        ric
    }

    /// `R = g^{ij} R_ij`.
    pub fn trace(&self, t: &SymTensorField) -> Vec<f64> {
        (0..self.n()).map(|p| t.at(p).trace_with(&self.inv.at(p))).collect()
    }

    /// Symmetric divergence-form operator `√g Δ_g f`.
    ///
    /// Diagonal terms use half-point averaged coefficients with one-sided
    /// differences, off-diagonal terms nested centered differences. The result
    /// is exactly symmetric in the Euclidean inner product and annihilates constants.
    pub fn weighted_laplacian(&self, f: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let n = self.n();
        let a: [Vec<f64>; 6] =
            std::array::from_fn(|s| (0..n).map(|p| self.sqrt_det[p] * self.inv.comp[s][p]).collect());
        let mut out = vec![0.0; n];
        let offdiag = a[1].iter().chain(&a[2]).chain(&a[4]).any(|x| *x != 0.0);
        // flux terms for the off-diagonal part: F_i = Σ_{j≠i} a^{ij} ∂_j f
        let flux: Option<[Vec<f64>; 3]> = if offdiag {
            let df = grad(&grid, f);
            Some(std::array::from_fn(|i| {
                (0..n).map(|p| (0..3).filter(|j| *j != i).map(|j| a[SYM[i][j]][p] * df[j][p]).sum()).collect()
            }))
        } else {
            None
        };
        for p in 0..n {
            let c = grid.coords(p);
            let mut s = 0.0;
            for i in 0..3 {
                let h = grid.spacing[i];
                let mut dp = [0isize; 3];
                dp[i] = 1;
                let mut dm = [0isize; 3];
                dm[i] = -1;
                let pp = grid.offset(c, dp);
                let pm = grid.offset(c, dm);
                let aii = &a[SYM[i][i]];
                let ap = 0.5 * (aii[p] + aii[pp]);
                let am = 0.5 * (aii[p] + aii[pm]);
                s += (ap * (f[pp] - f[p]) - am * (f[p] - f[pm])) / (h * h);
                if let Some(fl) = &flux {
                    s += (fl[i][pp] - fl[i][pm]) / (2.0 * h);
                }
            }
            out[p] = s;
        }
        out
    }

    /// Diagonal of [`Self::weighted_laplacian`].
    pub fn weighted_laplacian_diag(&self) -> Vec<f64> {
        let grid = self.grid;
        (0..self.n())
            .map(|p| {
                let c = grid.coords(p);
                let mut s = 0.0;
                for i in 0..3 {
                    let h = grid.spacing[i];
                    let mut dp = [0isize; 3];
                    dp[i] = 1;
                    let mut dm = [0isize; 3];
                    dm[i] = -1;
                    let aii = |q: usize| self.sqrt_det[q] * self.inv.comp[SYM[i][i]][q];
                    s -= (0.5 * (aii(p) + aii(grid.offset(c, dp))) + 0.5 * (aii(p) + aii(grid.offset(c, dm)))) / (h * h);
                }
                s
            })
            .collect()
    }

    /// Scalar Laplacian `Δ_g f`.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let mut l = self.weighted_laplacian(f);
        l.iter_mut().zip(&self.sqrt_det).for_each(|(x, s)| *x /= s);
        l
    }

    /// Wide-stencil operator `∂_i(√g g^{ij} ∂_j f)` with centered differences,
    /// the composition of [`Self::div_oneform`] (times `√g`) and the centered gradient.
    pub fn weighted_div_grad(&self, f: &[f64]) -> Vec<f64> {
        let df = grad(&self.grid, f);
        let w = OneFormField { grid: self.grid, comp: df };
        self.weighted_div(&w)
    }

    /// `∂_i(√g g^{ij} ω_j)` with centered differences.
    pub fn weighted_div(&self, w: &OneFormField) -> Vec<f64> {
        let n = self.n();
        let flux: [Vec<f64>; 3] = std::array::from_fn(|i| {
            (0..n)
                .map(|p| self.sqrt_det[p] * (0..3).map(|j| self.inv.comp[SYM[i][j]][p] * w.comp[j][p]).sum::<f64>())
                .collect()
        });
        let mut out = vec![0.0; n];
        for (i, fl) in flux.iter().enumerate() {
            let d = d1(&self.grid, fl, i);
            axpy(&mut out, 1.0, &d);
        }
        out
    }

    /// `div_g ω = (1/√g) ∂_i(√g g^{ij} ω_j)`.
    pub fn div_oneform(&self, w: &OneFormField) -> Vec<f64> {
        let mut d = self.weighted_div(w);
        d.iter_mut().zip(&self.sqrt_det).for_each(|(x, s)| *x /= s);
        d
    }

    /// `div_g X = (1/√g) ∂_i(√g X^i)`.
    pub fn div_vector(&self, x: &VectorField) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for i in 0..3 {
            let f: Vec<f64> = (0..n).map(|p| self.sqrt_det[p] * x.comp[i][p]).collect();
            axpy(&mut out, 1.0, &d1(&self.grid, &f, i));
        }
        out.iter_mut().zip(&self.sqrt_det).for_each(|(x, s)| *x /= s);
        out
    }

    /// Covariant Hessian `D_i D_j f`.
    pub fn hessian(&self, f: &[f64]) -> SymTensorField {
        let grid = self.grid;
        let mut h = SymTensorField::zeros(grid);
        for p in 0..self.n() {
            let c = grid.coords(p);
            let df = [d1_at(&grid, f, c, 0), d1_at(&grid, f, c, 1), d1_at(&grid, f, c, 2)];
            for s in 0..6 {
                let (i, j) = SYM_PAIRS[s];
                let mut v = d2_at(&grid, f, c, i, j);
                for (k, dk) in df.iter().enumerate() {
                    v -= self.gamma.comp[k][s][p] * dk;
                }
                h.comp[s][p] = v;
            }
        }
        h
    }

    /// `D^i f = g^{ij} ∂_j f`.
    pub fn gradient_up(&self, f: &[f64]) -> VectorField {
        let df = grad(&self.grid, f);
        self.raise(&OneFormField { grid: self.grid, comp: df })
    }

    pub fn raise(&self, w: &OneFormField) -> VectorField {
        let mut v = Field3::zeros(self.grid);
        for p in 0..self.n() {
            for i in 0..3 {
                v.comp[i][p] = (0..3).map(|j| self.inv.comp[SYM[i][j]][p] * w.comp[j][p]).sum();
            }
        }
        v
    }

    pub fn lower(&self, x: &VectorField) -> OneFormField {
        let mut v = Field3::zeros(self.grid);
        for p in 0..self.n() {
            for i in 0..3 {
                v.comp[i][p] = (0..3).map(|j| self.g.comp[SYM[i][j]][p] * x.comp[j][p]).sum();
            }
        }
        v
    }

    /// `(D^i Σ_ij)` as a one-form.
    pub fn div_sym(&self, t: &SymTensorField) -> OneFormField {
        let grid = self.grid;
        let n = self.n();
        let dt: [[Vec<f64>; 6]; 3] = std::array::from_fn(|k| std::array::from_fn(|s| d1(&grid, &t.comp[s], k)));
        let mut out = Field3::zeros(grid);
        for p in 0..n {
            for j in 0..3 {
                let mut v = 0.0;
                for i in 0..3 {
                    for k in 0..3 {
                        let gik = self.inv.comp[SYM[i][k]][p];
                        if gik == 0.0 {
                            continue;
                        }
                        // D_k t_ij = ∂_k t_ij − Γ^l_ki t_lj − Γ^l_kj t_il
                        let mut d = dt[k][SYM[i][j]][p];
                        for l in 0..3 {
                            d -= self.gamma.at(p, l, k, i) * t.comp[SYM[l][j]][p];
                            d -= self.gamma.at(p, l, k, j) * t.comp[SYM[i][l]][p];
                        }
                        v += gik * d;
                    }
                }
                out.comp[j][p] = v;
            }
        }
        out
    }

    /// Lie derivative of a symmetric covariant tensor along a vector field.
    pub fn lie_sym(&self, x: &VectorField, t: &SymTensorField) -> SymTensorField {
        lie_sym(&self.grid, x, t)
    }

    /// Hodge Laplacian on one-forms in Weitzenböck form `−g^{ij} D_i D_j ω + Ric(ω)`.
    pub fn hodge_laplacian(&self, w: &OneFormField, conn: &Connection, ric: &SymTensorField) -> OneFormField {
        let t = CovTensor::from_oneform(w);
        let r = rough_laplacian(&self.grid, &self.inv, conn, &t);
        let mut out = Field3::zeros(self.grid);
        for p in 0..self.n() {
            for k in 0..3 {
                let mut v = -r.comp[k][p];
                for l in 0..3 {
                    let mut ricup = 0.0;
                    for m in 0..3 {
                        ricup += self.inv.comp[SYM[l][m]][p] * ric.comp[SYM[m][k]][p];
                    }
                    v += ricup * w.comp[l][p];
                }
                out.comp[k][p] = v;
            }
        }
        out
    }

    /// Rough Laplacian of a vector field, `(ΔX)^i = g^{ik} (Δ X♭)_k`.
    pub fn vector_laplacian(&self, x: &VectorField, conn: &Connection) -> VectorField {
        let low = self.lower(x);
        let r = rough_laplacian(&self.grid, &self.inv, conn, &CovTensor::from_oneform(&low));
        self.raise(&r.to_oneform())
    }

    /// Pointwise `⟨u, v⟩_g` of symmetric tensors.
    #[inline]
    pub fn sym_dot_at(&self, p: usize, u: &SymTensorField, v: &SymTensorField) -> f64 {
        let gi = self.inv.at(p);
        let a = u.at(p);
        let b = v.at(p);
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let aij = a.get(i, j);
                if aij == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    let gik = gi.get(i, k);
                    if gik == 0.0 {
                        continue;
                    }
                    for l in 0..3 {
                        s += gik * gi.get(j, l) * aij * b.get(k, l);
                    }
                }
            }
        }
        s
    }

    /// Pointwise `|t|²_g` of a symmetric tensor.
    pub fn sym_norm_sq(&self, t: &SymTensorField) -> Vec<f64> {
        (0..self.n()).map(|p| self.sym_dot_at(p, t, t)).collect()
    }

    /// Pointwise `⟨u, v⟩_g` of one-forms.
    #[inline]
    pub fn oneform_dot_at(&self, p: usize, u: &OneFormField, v: &OneFormField) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.inv.comp[SYM[i][j]][p] * u.comp[i][p] * v.comp[j][p];
            }
        }
        s
    }
}

/// Lie derivative of a symmetric covariant tensor: `X^k ∂_k t_ij + t_kj ∂_i X^k + t_ik ∂_j X^k`.
pub fn lie_sym(grid: &Grid, x: &VectorField, t: &SymTensorField) -> SymTensorField {
    let n = grid.len();
    let mut out = SymTensorField::zeros(*grid);
    if x.max_abs() == 0.0 {
        return out;
    }
    let dx: [[Vec<f64>; 3]; 3] = std::array::from_fn(|a| std::array::from_fn(|k| d1(grid, &x.comp[k], a)));
    let dt: [[Vec<f64>; 6]; 3] = std::array::from_fn(|a| std::array::from_fn(|s| d1(grid, &t.comp[s], a)));
    for p in 0..n {
        for s in 0..6 {
            let (i, j) = SYM_PAIRS[s];
            let mut v = 0.0;
            for k in 0..3 {
                v += x.comp[k][p] * dt[k][s][p];
                v += t.comp[SYM[k][j]][p] * dx[i][k][p];
                v += t.comp[SYM[i][k]][p] * dx[j][k][p];
            }
            out.comp[s][p] = v;
        }
    }
    out
}

/// Lie derivative of a one-form: `X^k ∂_k ω_i + ω_k ∂_i X^k`.
pub fn lie_oneform(grid: &Grid, x: &VectorField, w: &OneFormField) -> OneFormField {
    let n = grid.len();
    let mut out = Field3::zeros(*grid);
    if x.max_abs() == 0.0 {
        return out;
    }
    for p in 0..n {
        let c = grid.coords(p);
        for i in 0..3 {
            let mut v = 0.0;
            for k in 0..3 {
                v += x.comp[k][p] * d1_at(grid, &w.comp[i], c, k);
                v += w.comp[k][p] * d1_at(grid, &x.comp[k], c, i);
            }
            out.comp[i][p] = v;
        }
    }
    out
}

/// Directional derivative `X^k ∂_k f`.
pub fn advect(grid: &Grid, x: &VectorField, f: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if x.max_abs() == 0.0 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|p| {
            let c = grid.coords(p);
            (0..3).map(|k| x.comp[k][p] * d1_at(grid, f, c, k)).sum()
        })
        .collect()
}

/// Covariant tensor of arbitrary rank with all `3^rank` components stored.
/// Component `(i_1, …, i_r)` lives at flat index `Σ i_s 3^{r-1-s}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovTensor {
    pub grid: Grid,
    pub rank: usize,
    pub comp: Vec<Vec<f64>>,
}

fn multi_index(mut flat: usize, rank: usize) -> Vec<usize> {
    let mut idx = vec![0; rank];
    for s in (0..rank).rev() {
        idx[s] = flat % 3;
        flat /= 3;
    }
    idx
}

fn flat_index(idx: &[usize]) -> usize {
    idx.iter().fold(0, |acc, i| acc * 3 + i)
}

impl CovTensor {
    pub fn scalar(grid: Grid, f: &[f64]) -> Self {
        CovTensor { grid, rank: 0, comp: vec![f.to_vec()] }
    }
    pub fn from_oneform(w: &OneFormField) -> Self {
        CovTensor { grid: w.grid, rank: 1, comp: w.comp.to_vec() }
    }
    pub fn from_sym(t: &SymTensorField) -> Self {
        let comp = (0..9).map(|f| t.comp[SYM[f / 3][f % 3]].clone()).collect();
        CovTensor { grid: t.grid, rank: 2, comp }
    }
    /// Antisymmetric 2-tensor from its three independent components `(F_01, F_02, F_12)`.
    pub fn from_two_form(grid: Grid, f01: &[f64], f02: &[f64], f12: &[f64]) -> Self {
        let n = f01.len();
        let z = vec![0.0; n];
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let comp = vec![
            z.clone(),
            f01.to_vec(),
            f02.to_vec(),
            neg(f01),
            z.clone(),
            f12.to_vec(),
            neg(f02),
            neg(f12),
            z,
        ];
        CovTensor { grid, rank: 2, comp }
    }
    pub fn to_oneform(&self) -> OneFormField {
        assert_eq!(self.rank, 1);
        Field3 { grid: self.grid, comp: [self.comp[0].clone(), self.comp[1].clone(), self.comp[2].clone()] }
    }
    pub fn to_sym(&self) -> SymTensorField {
        assert_eq!(self.rank, 2);
        let mut t = SymTensorField::zeros(self.grid);
        for s in 0..6 {
            let (i, j) = SYM_PAIRS[s];
            let a = &self.comp[i * 3 + j];
            let b = &self.comp[j * 3 + i];
            t.comp[s] = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        }
        t
    }

    /// Covariant derivative with centered differences; the new index is first.
    pub fn covariant_derivative(&self, geom: &Geometry) -> CovTensor {
        let grid = geom.grid;
        let n = grid.len();
        let r = self.rank;
        let nc = self.comp.len();
        let mut comp = vec![vec![0.0; n]; nc * 3];
        for a in 0..3 {
            for f in 0..nc {
                let idx = multi_index(f, r);
                let mut out = d1(&grid, &self.comp[f], a);
                for s in 0..r {
                    let mut j = idx.clone();
                    for l in 0..3 {
                        j[s] = l;
                        let src = &self.comp[flat_index(&j)];
                        let gam = &geom.gamma.comp[l][SYM[a][idx[s]]];
                        for p in 0..n {
                            out[p] -= gam[p] * src[p];
                        }
                    }
                }
                comp[a * nc + f] = out;
            }
        }
        CovTensor { grid, rank: r + 1, comp }
    }

    /// Pointwise full contraction `g^{a1 b1} ⋯ g^{ar br} t_A u_B`.
    pub fn dot(&self, other: &CovTensor, geom: &Geometry) -> Vec<f64> {
        let raised = self.raise_all(geom);
        let n = geom.n();
        let mut out = vec![0.0; n];
        for (a, b) in raised.iter().zip(&other.comp) {
            for p in 0..n {
                out[p] += a[p] * b[p];
            }
        }
        out
    }

    fn raise_all(&self, geom: &Geometry) -> Vec<Vec<f64>> {
        let n = geom.n();
        let r = self.rank;
        let mut cur = self.comp.clone();
        for s in 0..r {
            let mut next = vec![vec![0.0; n]; cur.len()];
            for (f, nf) in next.iter_mut().enumerate() {
                let idx = multi_index(f, r);
                let mut j = idx.clone();
                for l in 0..3 {
                    j[s] = l;
                    let src = &cur[flat_index(&j)];
                    let gi = &geom.inv.comp[SYM[idx[s]][l]];
                    for p in 0..n {
                        nf[p] += gi[p] * src[p];
                    }
                }
            }
            cur = next;
        }
        cur
    }
}

/// Compact rough Laplacian `h^{ij} (D_i D_j t)` of a covariant tensor, where
/// `h^{ij}` is `contr` and `D` the connection `conn`.
pub fn rough_laplacian(grid: &Grid, contr: &MetricField, conn: &Connection, t: &CovTensor) -> CovTensor {
    let n = grid.len();
    let r = t.rank;
    let nc = t.comp.len();
    let mut out = vec![vec![0.0; n]; nc];
    // principal part with compact diagonal stencils
    for (f, o) in out.iter_mut().enumerate() {
        let src = &t.comp[f];
        for i in 0..3 {
            for j in i..3 {
                let h = &contr.comp[SYM[i][j]];
                if h.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let w = if i == j { 1.0 } else { 2.0 };
                let dd = d2(grid, src, i, j);
                for p in 0..n {
                    o[p] += w * h[p] * dd[p];
                }
            }
        }
    }
    if conn.flat {
        return CovTensor { grid: *grid, rank: r, comp: out };
    }
    let g = &conn.gamma;
    // ∂_a t_I
    let dt: Vec<[Vec<f64>; 3]> = t.comp.iter().map(|c| std::array::from_fn(|a| d1(grid, c, a))).collect();
    // (D_a t)_I = ∂_a t_I − Σ_s Γ^l_{a i_s} t_{I[s→l]}
    let mut dtc: Vec<[Vec<f64>; 3]> = dt.clone();
    for (f, d) in dtc.iter_mut().enumerate() {
        let idx = multi_index(f, r);
        for (a, da) in d.iter_mut().enumerate() {
            for s in 0..r {
                let mut j = idx.clone();
                for l in 0..3 {
                    j[s] = l;
                    let src = &t.comp[flat_index(&j)];
                    let gam = &g.comp[l][SYM[a][idx[s]]];
                    for p in 0..n {
                        da[p] -= gam[p] * src[p];
                    }
                }
            }
        }
    }
    for (f, o) in out.iter_mut().enumerate() {
        let idx = multi_index(f, r);
        // flat index of t_{I[s→l]}
        let subs: Vec<[usize; 3]> = (0..r)
            .map(|s| {
                std::array::from_fn(|l| {
                    let mut m = idx.clone();
                    m[s] = l;
                    flat_index(&m)
                })
            })
            .collect();
        for p in 0..n {
            let mut v = 0.0;
            for i in 0..3 {
                for jj in 0..3 {
                    let hij = contr.comp[SYM[i][jj]][p];
                    if hij == 0.0 {
                        continue;
                    }
                    let mut lower = 0.0;
                    for (s, sub) in subs.iter().enumerate() {
                        let ks = idx[s];
                        for l in 0..3 {
                            let fl = sub[l];
                            // −∂_i(Γ^l_{j k_s} t_{I[s→l]})
                            let gam = g.comp[l][SYM[jj][ks]][p];
                            let dgam = conn.dgamma[i].comp[l][SYM[jj][ks]][p];
                            lower -= dgam * t.comp[fl][p] + gam * dt[fl][i][p];
                            // −Σ_s Γ^l_{i k_s} (D_j t)_{I[s→l]}
                            lower -= g.comp[l][SYM[i][ks]][p] * dtc[fl][jj][p];
                        }
                    }
                    // −Γ^l_{ij} (D_l t)_I
                    for l in 0..3 {
                        lower -= g.comp[l][SYM[i][jj]][p] * dtc[f][l][p];
                    }
                    v += hij * lower;
                }
            }
            o[p] += v;
        }
    }
    CovTensor { grid: *grid, rank: r, comp: out }
}

/// Background chart: grid plus the fixed metric γ and its derived data.
#[derive(Clone, Debug)]
pub struct GridChart {
    pub grid: Grid,
    pub q: usize,
    pub background_kind: BackgroundKind,
    pub gamma: MetricField,
    pub gamma_geometry: Geometry,
    pub gamma_connection: Connection,
    pub gamma_ricci: SymTensorField,
    pub lambda0: Option<f64>,
    /// `‖Ric(γ) + (2/9)γ‖∞` recorded for supplied charts.
    pub einstein_residual: Option<f64>,
    pub curvature_model: CurvatureModel,
}

impl GridChart {
    fn from_metric(grid: Grid, q: usize, kind: BackgroundKind, gamma: MetricField) -> Result<Self> {
        if q == 0 {
            return Err(Error::Config("torus dimension q must be at least 1".into()));
        }
        let geom = Geometry::new(&gamma).map_err(|e| match e {
            Error::Numeric { point, msg } => Error::Data { point, msg },
            other => other,
        })?;
        let conn = geom.connection();
        let ric = if conn.flat && kind == BackgroundKind::FlatTorus {
            SymTensorField::zeros(grid)
        } else {
            geom.ricci()
        };
        let model = match kind {
            BackgroundKind::FlatTorus => CurvatureModel::EinsteinStandIn,
            BackgroundKind::SuppliedMetric => CurvatureModel::Discrete,
        };
        Ok(GridChart {
            grid,
            q,
            background_kind: kind,
            gamma,
            gamma_geometry: geom,
            gamma_connection: conn,
            gamma_ricci: ric,
            lambda0: None,
            einstein_residual: None,
            curvature_model: model,
        })
    }

    /// Residual `‖Ric(γ) + (2/9)γ‖∞` of the Einstein condition.
    pub fn einstein_condition_residual(&self) -> f64 {
        let mut r = self.gamma_ricci.clone();
        r.axpy(2.0 / 9.0, &self.gamma);
        r.max_abs()
    }

    pub fn with_lambda0(mut self, l: f64) -> Self {
        self.lambda0 = Some(l);
        self
    }

    pub fn with_curvature_model(mut self, m: CurvatureModel) -> Self {
        self.curvature_model = m;
        self
    }

    /// Serialize to the text chart format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kkflow-chart 1");
        let d = self.grid.dims;
        let h = self.grid.spacing;
        let _ = writeln!(s, "dims {} {} {}", d[0], d[1], d[2]);
        let _ = writeln!(s, "spacing {} {} {}", h[0], h[1], h[2]);
        let _ = writeln!(s, "q {}", self.q);
        if let Some(l) = self.lambda0 {
            let _ = writeln!(s, "lambda0 {}", l);
        }
        let _ = writeln!(s, "metric");
        for p in 0..self.grid.len() {
            let m = self.gamma.at(p).0;
            let _ = writeln!(s, "{} {} {} {} {} {}", m[0], m[1], m[2], m[3], m[4], m[5]);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        load_supplied_chart_str(&text)
    }
}

/// Flat torus chart with `γ = δ`.
pub fn build_flat_torus_chart(dims: [usize; 3], spacings: [f64; 3], q: usize) -> Result<GridChart> {
    let grid = Grid::new(dims, spacings)?;
    GridChart::from_metric(grid, q, BackgroundKind::FlatTorus, SymTensorField::identity(grid, 1.0))
}

/// Chart from a supplied metric; the Einstein-condition residual is attached.
pub fn build_supplied_chart(grid: Grid, q: usize, gamma: MetricField, lambda0: Option<f64>) -> Result<GridChart> {
    for p in 0..grid.len() {
        if !gamma.at(p).is_spd() {
            return Err(Error::Data { point: p, msg: "supplied metric is not positive definite".into() });
        }
    }
    let mut chart = GridChart::from_metric(grid, q, BackgroundKind::SuppliedMetric, gamma)?;
    chart.lambda0 = lambda0;
    chart.einstein_residual = Some(chart.einstein_condition_residual());
    Ok(chart)
}

pub fn load_supplied_chart(path: &Path) -> Result<GridChart> {
    GridChart::load(path)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parse the text chart format produced by [`GridChart::to_text`].
pub fn load_supplied_chart_str(text: &str) -> Result<GridChart> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (ln, magic) = lines.next().ok_or_else(|| parse_err(1, "empty chart file"))?;
    if magic.trim() != "kkflow-chart 1" {
        return Err(parse_err(ln + 1, "missing 'kkflow-chart 1' header"));
    }
    let mut dims = None;
    let mut spacing = None;
    let mut q = None;
    let mut lambda0 = None;
    let nums = |ln: usize, rest: &[&str]| -> Result<Vec<f64>> {
        rest.iter().map(|t| t.parse::<f64>().map_err(|_| parse_err(ln + 1, format!("bad number '{}'", t)))).collect()
    };
    loop {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(0, "missing 'metric' section"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "dims" => {
                let v: Vec<usize> = toks[1..]
                    .iter()
                    .map(|t| t.parse::<usize>().map_err(|_| parse_err(ln + 1, format!("bad extent '{}'", t))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(parse_err(ln + 1, "dims needs three values"));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            "spacing" => {
                let v = nums(ln, &toks[1..])?;
                if v.len() != 3 {
                    return Err(parse_err(ln + 1, "spacing needs three values"));
                }
                spacing = Some([v[0], v[1], v[2]]);
            }
            "q" => {
                q = Some(toks.get(1).and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| parse_err(ln + 1, "bad q"))?);
            }
            "lambda0" => {
                let v = nums(ln, &toks[1..])?;
                lambda0 = v.first().copied();
            }
            "metric" => break,
            other => return Err(parse_err(ln + 1, format!("unknown header key '{}'", other))),
        }
    }
    let dims = dims.ok_or_else(|| parse_err(0, "missing dims"))?;
    let spacing = spacing.ok_or_else(|| parse_err(0, "missing spacing"))?;
    let q = q.ok_or_else(|| parse_err(0, "missing q"))?;
    let grid = Grid::new(dims, spacing)?;
    let mut gamma = SymTensorField::zeros(grid);
    for p in 0..grid.len() {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(0, format!("expected {} metric rows, got {}", grid.len(), p)))?;
        let v = nums(ln, &line.split_whitespace().collect::<Vec<_>>())?;
        if v.len() != 6 {
            return Err(parse_err(ln + 1, "metric row needs six components"));
        }
        gamma.set(p, Sym3([v[0], v[1], v[2], v[3], v[4], v[5]]));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln + 1, "trailing data after metric rows"));
    }
    build_supplied_chart(grid, q, gamma, lambda0)
}

/// Christoffel symbols of `g`.
pub fn christoffels(g: &MetricField) -> Result<Christoffel> {
    Ok(Geometry::new(g)?.gamma)
}

pub fn ricci(g: &MetricField) -> Result<SymTensorField> {
    Ok(Geometry::new(g)?.ricci())
}

pub fn scalar_curvature(g: &MetricField) -> Result<ScalarField> {
    let geom = Geometry::new(g)?;
    let r = geom.ricci();
    Ok(ScalarField { grid: g.grid, data: geom.trace(&r) })
}

fn check_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::Usage("fields live on different charts".into()));
    }
    Ok(())
}

pub fn scalar_laplacian(g: &MetricField, f: &ScalarField) -> Result<ScalarField> {
    check_grid(&g.grid, &f.grid)?;
    let geom = Geometry::new(g)?;
    Ok(ScalarField { grid: g.grid, data: geom.laplacian(&f.data) })
}

pub fn hodge_laplacian_1form(g: &MetricField, w: &OneFormField) -> Result<OneFormField> {
    check_grid(&g.grid, &w.grid)?;
    let geom = Geometry::new(g)?;
    let conn = geom.connection();
    let ric = if conn.flat { SymTensorField::zeros(g.grid) } else { geom.ricci() };
    Ok(geom.hodge_laplacian(w, &conn, &ric))
}

/// Curvature action `(R̊ u)_ab = R_acbd u^cd` of the background metric, with
/// the three-dimensional Riemann tensor expressed through its Ricci tensor.
pub fn curvature_action(chart: &GridChart, u: &SymTensorField) -> SymTensorField {
    let n = chart.grid.len();
    let mut out = SymTensorField::zeros(chart.grid);
    if chart.gamma_ricci.max_abs() == 0.0 {
        return out;
    }
    let geom = &chart.gamma_geometry;
    for p in 0..n {
        let g = chart.gamma.at(p);
        let gi = geom.inv.at(p);
        let r = chart.gamma_ricci.at(p);
        let rs = r.trace_with(&gi);
        // u^{cd}
        let uf = u.at(p).full();
        let mut up = [[0.0; 3]; 3];
        for c in 0..3 {
            for d in 0..3 {
                let mut v = 0.0;
                for e in 0..3 {
                    for f in 0..3 {
                        v += gi.get(c, e) * gi.get(d, f) * uf[e][f];
                    }
                }
                up[c][d] = v;
            }
        }
        for s in 0..6 {
            let (a, b) = SYM_PAIRS[s];
            let mut v = 0.0;
            for c in 0..3 {
                for d in 0..3 {
                    let riem = g.get(a, b) * r.get(c, d) - g.get(a, d) * r.get(c, b) + g.get(c, d) * r.get(a, b)
                        - g.get(c, b) * r.get(a, d)
                        - 0.5 * rs * (g.get(a, b) * g.get(c, d) - g.get(a, d) * g.get(c, b));
                    v += riem * up[c][d];
                }
            }
            out.comp[s][p] = v;
        }
    }
    out
}

/// Tensor operator `𝓛_{g,γ} u = −Δ_{g,γ} u − 2 R̊[γ] u`, where `Δ_{g,γ}` contracts
/// the γ-covariant Hessian with `g^{ij}`.
pub fn lichnerowicz_operator(chart: &GridChart, g_inv: &MetricField, u: &SymTensorField) -> Result<SymTensorField> {
    check_grid(&chart.grid, &u.grid)?;
    let r = rough_laplacian(&chart.grid, g_inv, &chart.gamma_connection, &CovTensor::from_sym(u)).to_sym();
    let mut out = r.scaled(-1.0);
    let ra = curvature_action(chart, u);
    out.axpy(-2.0, &ra);
    Ok(out)
}

/// Pointwise inner products and integrals for the field types.
pub trait L2Field {
    fn grid(&self) -> Grid;
    fn pointwise_dot(&self, other: &Self, geom: &Geometry) -> Vec<f64>;
    fn to_cov(&self, geom: &Geometry) -> CovTensor;
}

impl L2Field for ScalarField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn pointwise_dot(&self, o: &Self, _geom: &Geometry) -> Vec<f64> {
        self.data.iter().zip(&o.data).map(|(a, b)| a * b).collect()
    }
    fn to_cov(&self, _geom: &Geometry) -> CovTensor {
        CovTensor::scalar(self.grid, &self.data)
    }
}

impl L2Field for Field3 {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn pointwise_dot(&self, o: &Self, geom: &Geometry) -> Vec<f64> {
        (0..geom.n()).map(|p| geom.oneform_dot_at(p, self, o)).collect()
    }
    fn to_cov(&self, _geom: &Geometry) -> CovTensor {
        CovTensor::from_oneform(self)
    }
}

impl L2Field for SymTensorField {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn pointwise_dot(&self, o: &Self, geom: &Geometry) -> Vec<f64> {
        (0..geom.n()).map(|p| geom.sym_dot_at(p, self, o)).collect()
    }
    fn to_cov(&self, _geom: &Geometry) -> CovTensor {
        CovTensor::from_sym(self)
    }
}

/// `∫ ⟨u, v⟩_g dV_g`, exact for grid functions under the periodic trapezoid rule.
pub fn l2_inner<F: L2Field>(g: &MetricField, u: &F, v: &F) -> Result<f64> {
    check_grid(&g.grid, &u.grid())?;
    check_grid(&g.grid, &v.grid())?;
    let geom = Geometry::new(g)?;
    Ok(geom.integrate(&u.pointwise_dot(v, &geom)))
}

/// `‖u‖²_{H^k} = Σ_{l≤k} ∫ |D^l u|²_g dV_g`, returned as the square root.
pub fn sobolev_norm<F: L2Field>(g: &MetricField, u: &F, k: usize) -> Result<f64> {
    check_grid(&g.grid, &u.grid())?;
    let geom = Geometry::new(g)?;
    sobolev_norm_geom(&geom, &u.to_cov(&geom), k)
}

pub fn sobolev_norm_geom(geom: &Geometry, t: &CovTensor, k: usize) -> Result<f64> {
    if k > MAX_SOBOLEV_ORDER {
        return Err(Error::Config(format!("Sobolev order {} exceeds the supported maximum {}", k, MAX_SOBOLEV_ORDER)));
    }
    let mut cur = t.clone();
    cur.grid = geom.grid;
    let mut total = 0.0;
    for l in 0..=k {
        if l > 0 {
            cur = cur.covariant_derivative(geom);
        }
        total += geom.integrate(&cur.dot(&cur, geom));
    }
    Ok(total.sqrt())
}

/// Harmonic one-forms of the chart metric with their Rayleigh quotients.
#[derive(Clone, Debug)]
pub struct HarmonicBasis {
    pub forms: Vec<OneFormField>,
    pub rayleigh: Vec<f64>,
}

impl HarmonicBasis {
    pub fn count(&self) -> usize {
        self.forms.len()
    }
    /// `Σ_a ⟨w, ω_a⟩ ω_a` removed from `w`; returns the coefficients.
    pub fn project_out(&self, geom: &Geometry, w: &mut OneFormField) -> Vec<f64> {
        let coef: Vec<f64> = self.forms.iter().map(|b| geom.integrate(&w.pointwise_dot(b, geom))).collect();
        for (c, b) in coef.iter().zip(&self.forms) {
            w.axpy(-c, b);
        }
        coef
    }
    pub fn projections(&self, geom: &Geometry, w: &OneFormField) -> Vec<f64> {
        self.forms.iter().map(|b| geom.integrate(&w.pointwise_dot(b, geom))).collect()
    }
}

/// L²(g)-orthonormal basis of harmonic one-forms.
///
/// For a spatially constant metric the constant forms are an exact discrete
/// kernel of Δ_H. Otherwise each coordinate form is made co-closed by a
/// Poisson solve, which keeps it closed in the centered complex.
pub fn harmonic_oneform_basis(g: &MetricField) -> Result<HarmonicBasis> {
    let geom = Geometry::new(g)?;
    let grid = g.grid;
    let n = grid.len();
    let constant = (0..6).all(|s| g.comp[s].iter().all(|x| *x == g.comp[s][0]));
    let mut raw = Vec::new();
    for a in 0..3 {
        let mut w = Field3::zeros(grid);
        w.comp[a] = vec![1.0; n];
        if !constant {
            let rhs = geom.weighted_div(&w);
            let neg: Vec<f64> = rhs.iter().map(|x| -x).collect();
            let (f, rep) = crate::elliptic::solve_div_grad(&geom, &neg, 1e-12, 2000)?;
            if !rep.converged() {
                return Err(Error::Numeric { point: 0, msg: "harmonic-form Poisson solve did not converge".into() });
            }
            let df = grad(&grid, &f);
            for i in 0..3 {
                axpy(&mut w.comp[i], 1.0, &df[i]);
            }
        }
        raw.push(w);
    }
    // Gram-Schmidt in L²(g), done twice for stability
    let mut forms: Vec<OneFormField> = Vec::new();
    for mut w in raw {
        for _ in 0..2 {
            for b in &forms {
                let c = geom.integrate(&w.pointwise_dot(b, &geom));
                w.axpy(-c, b);
            }
        }
        let nrm = geom.integrate(&w.pointwise_dot(&w, &geom)).sqrt();
        if nrm < 1e-12 {
            return Err(Error::Numeric { point: 0, msg: "degenerate harmonic basis".into() });
        }
        forms.push(w.scaled(1.0 / nrm));
    }
    let conn = geom.connection();
    let ric = if conn.flat { SymTensorField::zeros(grid) } else { geom.ricci() };
    let rayleigh = forms
        .iter()
        .map(|w| {
            let l = geom.hodge_laplacian(w, &conn, &ric);
            geom.integrate(&l.pointwise_dot(w, &geom))
        })
        .collect();
    Ok(HarmonicBasis { forms, rayleigh })
}

/// Kinematic snapshot used by the commutator diagnostic.
#[derive(Clone, Debug)]
pub struct KinematicSnapshot {
    pub t: f64,
    pub g: MetricField,
    pub sigma: SymTensorField,
    pub lapse: Vec<f64>,
    pub shift: VectorField,
}

/// Residuals of the two commutator identities.
#[derive(Clone, Debug, PartialEq)]
pub struct CommutatorReport {
    pub div_residual_l2: f64,
    pub div_residual_linf: f64,
    pub laplace_residual_l2: f64,
    pub laplace_residual_linf: f64,
}

/// `Π = −Σ + N⁻¹(1 − N/3) g`.
pub fn second_fundamental_form(g: &MetricField, sigma: &SymTensorField, lapse: &[f64]) -> SymTensorField {
    let mut pi = sigma.scaled(-1.0);
    for p in 0..g.grid.len() {
        let c = (1.0 - lapse[p] / 3.0) / lapse[p];
        for s in 0..6 {
            pi.comp[s][p] += c * g.comp[s][p];
        }
    }
    pi
}

/// `S = 2 div_g Π − D tr_g Π` as a one-form.
pub fn sigma_vector(geom: &Geometry, pi: &SymTensorField) -> OneFormField {
    let mut s = geom.div_sym(pi).scaled(2.0);
    let tr = geom.trace(pi);
    let dtr = grad(&geom.grid, &tr);
    for i in 0..3 {
        axpy(&mut s.comp[i], -1.0, &dtr[i]);
    }
    s
}

/// Right side of the commutator identity `[𝓛ₑ₀, div_g]η` for a one-form `η`:
/// `2⟨Π,Dη⟩ + ⟨D log N, 𝓛ₑ₀η⟩ + ⟨S,η⟩ + 2⟨Π, D log N ⊗ η⟩ − tr_gΠ ⟨D log N, η⟩`.
/// With `η = df` and `𝓛ₑ₀η = d(∂ₑ₀f)` it is the right side for `[𝓛ₑ₀, Δ_g]f`.
pub fn commutator_div(
    geom: &Geometry,
    pi: &SymTensorField,
    lapse: &[f64],
    eta: &OneFormField,
    le0_eta: &OneFormField,
) -> Vec<f64> {
    let grid = geom.grid;
    let n = grid.len();
    let s = sigma_vector(geom, pi);
    let trpi = geom.trace(pi);
    let logn: Vec<f64> = lapse.iter().map(|x| x.ln()).collect();
    let dlogn = OneFormField { grid, comp: grad(&grid, &logn) };
    let deta = CovTensor::from_oneform(eta).covariant_derivative(geom);
    let mut out = vec![0.0; n];
    for p in 0..n {
        let gi = geom.inv.at(p);
        let pl = pi.at(p);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut pij = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        pij += gi.get(i, a) * gi.get(j, b) * pl.get(a, b);
                    }
                }
                acc += pij * (2.0 * deta.comp[i * 3 + j][p] + 2.0 * dlogn.comp[i][p] * eta.comp[j][p]);
            }
        }
        out[p] = acc + geom.oneform_dot_at(p, &dlogn, le0_eta) + geom.oneform_dot_at(p, &s, eta)
            - trpi[p] * geom.oneform_dot_at(p, &dlogn, eta);
    }
    out
}

struct CommutatorTerms {
    div_rhs: Vec<f64>,
    lap_rhs: Vec<f64>,
    div_eta: Vec<f64>,
    lap_f: Vec<f64>,
}

fn commutator_terms(
    snap: &KinematicSnapshot,
    f: &[f64],
    de0_f: &[f64],
    eta: &OneFormField,
    le0_eta: &OneFormField,
) -> Result<CommutatorTerms> {
    let geom = Geometry::new(&snap.g)?;
    let grid = geom.grid;
    let pi = second_fundamental_form(&snap.g, &snap.sigma, &snap.lapse);
    let df = OneFormField { grid, comp: grad(&grid, f) };
    let dde0f = OneFormField { grid, comp: grad(&grid, de0_f) };
    Ok(CommutatorTerms {
        div_rhs: commutator_div(&geom, &pi, &snap.lapse, eta, le0_eta),
        lap_rhs: commutator_div(&geom, &pi, &snap.lapse, &df, &dde0f),
        div_eta: geom.div_oneform(eta),
        lap_f: geom.laplacian(f),
    })
}

/// Check `[𝓛ₑ₀, div_g]η` and `[𝓛ₑ₀, Δ_g]f` against finite differences across two
/// snapshots. Time derivatives are centered at the midpoint and the right-hand
/// sides are averaged over both snapshots.
pub fn verify_commutators(
    snaps: [&KinematicSnapshot; 2],
    f: [&[f64]; 2],
    eta: [&OneFormField; 2],
) -> Result<CommutatorReport> {
    let dt = snaps[1].t - snaps[0].t;
    if !(dt > 0.0) {
        return Err(Error::Usage("snapshots must be ordered in time".into()));
    }
    let grid = snaps[0].g.grid;
    let n = grid.len();
    // ∂_T at the midpoint, transported quantities at both ends
    let df_dt: Vec<f64> = (0..n).map(|p| (f[1][p] - f[0][p]) / dt).collect();
    let deta_dt: [Vec<f64>; 3] = std::array::from_fn(|i| (0..n).map(|p| (eta[1].comp[i][p] - eta[0].comp[i][p]) / dt).collect());
    let mut terms = Vec::new();
    let mut e0f_ends = Vec::new();
    let mut le0eta_ends = Vec::new();
    for k in 0..2 {
        let s = snaps[k];
        let adv = advect(&grid, &s.shift, f[k]);
        let e0f: Vec<f64> = (0..n).map(|p| (df_dt[p] + adv[p]) / s.lapse[p]).collect();
        let lie = lie_oneform(&grid, &s.shift, eta[k]);
        let mut le = Field3::zeros(grid);
        for i in 0..3 {
            for p in 0..n {
                le.comp[i][p] = (deta_dt[i][p] + lie.comp[i][p]) / s.lapse[p];
            }
        }
        terms.push(commutator_terms(s, f[k], &e0f, eta[k], &le)?);
        e0f_ends.push(e0f);
        le0eta_ends.push(le);
    }
    // 𝓛ₑ₀(div η) and 𝓛ₑ₀(Δ f) at the midpoint
    let mid = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect() };
    let lapse_mid = mid(&snaps[0].lapse, &snaps[1].lapse);
    let shift_mid = Field3 { grid, comp: std::array::from_fn(|i| mid(&snaps[0].shift.comp[i], &snaps[1].shift.comp[i])) };
    let e0_of = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let m = mid(a, b);
        let adv = advect(&grid, &shift_mid, &m);
        (0..n).map(|p| ((b[p] - a[p]) / dt + adv[p]) / lapse_mid[p]).collect()
    };
    let e0_div = e0_of(&terms[0].div_eta, &terms[1].div_eta);
    let e0_lap = e0_of(&terms[0].lap_f, &terms[1].lap_f);
    // div(𝓛ₑ₀η) and Δ(∂ₑ₀ f) evaluated with the midpoint metric
    let g_mid = SymTensorField { grid, comp: std::array::from_fn(|s| mid(&snaps[0].g.comp[s], &snaps[1].g.comp[s])) };
    let geom_mid = Geometry::new(&g_mid)?;
    let le_mid = Field3 { grid, comp: std::array::from_fn(|i| mid(&le0eta_ends[0].comp[i], &le0eta_ends[1].comp[i])) };
    let e0f_mid = mid(&e0f_ends[0], &e0f_ends[1]);
    let div_le = geom_mid.div_oneform(&le_mid);
    let lap_e0f = geom_mid.laplacian(&e0f_mid);
    let div_rhs = mid(&terms[0].div_rhs, &terms[1].div_rhs);
    let lap_rhs = mid(&terms[0].lap_rhs, &terms[1].lap_rhs);
    let rd: Vec<f64> = (0..n).map(|p| e0_div[p] - div_le[p] - div_rhs[p]).collect();
    let rl: Vec<f64> = (0..n).map(|p| e0_lap[p] - lap_e0f[p] - lap_rhs[p]).collect();
    let l2 = |v: &[f64]| (geom_mid.integrate(&v.iter().map(|x| x * x).collect::<Vec<_>>())).sqrt();
    Ok(CommutatorReport {
        div_residual_l2: l2(&rd),
        div_residual_linf: max_abs(&rd),
        laplace_residual_l2: l2(&rl),
        laplace_residual_linf: max_abs(&rl),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_chart_basics() {
        let h = 2.0 * std::f64::consts::PI / 8.0;
        let chart = build_flat_torus_chart([8, 8, 8], [h; 3], 1).unwrap();
        assert_eq!(chart.gamma.at(17), Sym3::IDENTITY);
        assert_eq!(chart.gamma_geometry.gamma.max_abs(), 0.0);
        assert!(chart.lambda0.is_none());
        assert!(build_flat_torus_chart([3, 8, 8], [h; 3], 1).is_err());
    }

    #[test]
    fn multi_index_roundtrip() {
        for r in 0..4 {
            for f in 0..3usize.pow(r as u32) {
                assert_eq!(flat_index(&multi_index(f, r)), f);
            }
        }
    }
}
