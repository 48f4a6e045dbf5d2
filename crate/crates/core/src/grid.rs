//! Periodic structured grid, field containers and finite-difference stencils.
//!
//! Points are stored row-major with the last axis fastest. All stencils wrap
//! periodically. Fields keep one `Vec<f64>` per component.

use crate::error::{Error, Result};

/// Minimum extent along each axis (the cross stencil needs distinct neighbours).
pub const MIN_DIM: usize = 4;

/// Packed index of the symmetric pair (i, j) in `[xx, xy, xz, yy, yz, zz]` order.
pub const SYM: [[usize; 3]; 3] = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];
/// Unpacked index pairs of the six symmetric components.
pub const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < MIN_DIM {
                return Err(Error::Config(format!(
                    "grid extent {} along axis {} is below the minimum {}",
                    dims[a], a, MIN_DIM
                )));
            }
            if !(spacing[a].is_finite() && spacing[a] > 0.0) {
                return Err(Error::Config(format!("grid spacing along axis {} must be positive, got {}", a, spacing[a])));
            }
        }
        Ok(Grid { dims, spacing })
    }

    /// Cubic grid covering `[0, 2π)³`.
    pub fn periodic_cube(n: usize) -> Result<Self> {
        let h = 2.0 * std::f64::consts::PI / n as f64;
        Grid::new([n; 3], [h; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    #[inline]
    pub fn coords(&self, p: usize) -> [usize; 3] {
        let k = p % self.dims[2];
        let r = p / self.dims[2];
        [r / self.dims[1], r % self.dims[1], k]
    }

    /// Physical coordinates of a point, `x_a = i_a h_a`.
    pub fn position(&self, p: usize) -> [f64; 3] {
        let c = self.coords(p);
        [c[0] as f64 * self.spacing[0], c[1] as f64 * self.spacing[1], c[2] as f64 * self.spacing[2]]
    }

    /// Periodic neighbour of `c` displaced by `d`.
    #[inline]
    pub fn offset(&self, c: [usize; 3], d: [isize; 3]) -> usize {
        let mut w = [0usize; 3];
        for a in 0..3 {
            let n = self.dims[a] as isize;
            let mut x = c[a] as isize + d[a];
            if x < 0 {
                x += n;
            } else if x >= n {
                x -= n;
            }
            if !(0..n).contains(&x) {
                x = x.rem_euclid(n);
            }
            w[a] = x as usize;
        }
        self.index(w)
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Same extents with every spacing halved and every extent doubled.
    pub fn refined(&self) -> Grid {
        Grid {
            dims: [self.dims[0] * 2, self.dims[1] * 2, self.dims[2] * 2],
            spacing: [self.spacing[0] / 2.0, self.spacing[1] / 2.0, self.spacing[2] / 2.0],
        }
    }

    /// Sample a function of position.
    pub fn sample(&self, f: impl Fn([f64; 3]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|p| f(self.position(p))).collect()
    }
}

#[inline]
fn unit(a: usize, s: isize) -> [isize; 3] {
    let mut d = [0isize; 3];
    d[a] = s;
    d
}

/// Centered first derivative at one point.
#[inline]
pub fn d1_at(g: &Grid, f: &[f64], c: [usize; 3], a: usize) -> f64 {
    (f[g.offset(c, unit(a, 1))] - f[g.offset(c, unit(a, -1))]) / (2.0 * g.spacing[a])
}

/// Second derivative at one point: compact 3-point for `a == b`, centered cross otherwise.
#[inline]
pub fn d2_at(g: &Grid, f: &[f64], c: [usize; 3], a: usize, b: usize) -> f64 {
    if a == b {
        let h = g.spacing[a];
        (f[g.offset(c, unit(a, 1))] - 2.0 * f[g.index(c)] + f[g.offset(c, unit(a, -1))]) / (h * h)
    } else {
        let mut pp = [0isize; 3];
        pp[a] = 1;
        pp[b] = 1;
        let mut pm = pp;
        pm[b] = -1;
        let mut mp = pp;
        mp[a] = -1;
        let mut mm = pm;
        mm[a] = -1;
        (f[g.offset(c, pp)] - f[g.offset(c, pm)] - f[g.offset(c, mp)] + f[g.offset(c, mm)])
            / (4.0 * g.spacing[a] * g.spacing[b])
    }
}

/// Forward difference `(f(x+h e_a) - f(x)) / h`.
#[inline]
pub fn dplus_at(g: &Grid, f: &[f64], c: [usize; 3], a: usize) -> f64 {
    (f[g.offset(c, unit(a, 1))] - f[g.index(c)]) / g.spacing[a]
}

/// Backward difference `(f(x) - f(x-h e_a)) / h`.
#[inline]
pub fn dminus_at(g: &Grid, f: &[f64], c: [usize; 3], a: usize) -> f64 {
    (f[g.index(c)] - f[g.offset(c, unit(a, -1))]) / g.spacing[a]
}

/// Visit every point with its periodic neighbours `(p, p + e_a, p − e_a)`.
#[inline]
pub fn for_each_along(g: &Grid, a: usize, mut body: impl FnMut(usize, usize, usize)) {
    let [n0, n1, n2] = g.dims;
    let stride = [n1 * n2, n2, 1][a];
    let na = g.dims[a];
    let wrap = na * stride;
    let mut p = 0;
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                let c = [i, j, k][a];
                let up = if c + 1 == na { p + stride - wrap } else { p + stride };
                let dn = if c == 0 { p + wrap - stride } else { p - stride };
                body(p, up, dn);
                p += 1;
            }
        }
    }
}

pub fn d1(g: &Grid, f: &[f64], a: usize) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    let s = 0.5 / g.spacing[a];
    for_each_along(g, a, |p, up, dn| out[p] = (f[up] - f[dn]) * s);
    out
}

/// Same stencils as [`d2_at`]; the cross stencil is the product of centered differences.
pub fn d2(g: &Grid, f: &[f64], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        let mut out = vec![0.0; g.len()];
        let s = 1.0 / (g.spacing[a] * g.spacing[a]);
        for_each_along(g, a, |p, up, dn| out[p] = (f[up] - 2.0 * f[p] + f[dn]) * s);
        out
    } else {
        d1(g, &d1(g, f, a), b)
    }
}

/// Centered gradient of a scalar array, one array per axis.
pub fn grad(g: &Grid, f: &[f64]) -> [Vec<f64>; 3] {
    [d1(g, f, 0), d1(g, f, 1), d1(g, f, 2)]
}

/// Scalar field on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, data: vec![0.0; grid.len()] }
    }
    pub fn constant(grid: Grid, v: f64) -> Self {
        ScalarField { grid, data: vec![v; grid.len()] }
    }
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        ScalarField { grid, data: grid.sample(f) }
    }
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }
}

/// Three-component field. Used for covariant one-forms and contravariant vectors alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Field3 {
    pub grid: Grid,
    pub comp: [Vec<f64>; 3],
}

/// Covariant components `ω_i`.
pub type OneFormField = Field3;
/// Contravariant components `X^i`.
pub type VectorField = Field3;

impl Field3 {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Field3 { grid, comp: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = Field3::zeros(grid);
        for p in 0..grid.len() {
            let v = f(grid.position(p));
            for i in 0..3 {
                out.comp[i][p] = v[i];
            }
        }
        out
    }
    #[inline]
    pub fn at(&self, p: usize) -> [f64; 3] {
        [self.comp[0][p], self.comp[1][p], self.comp[2][p]]
    }
    #[inline]
    pub fn set(&mut self, p: usize, v: [f64; 3]) {
        for i in 0..3 {
            self.comp[i][p] = v[i];
        }
    }
    pub fn max_abs(&self) -> f64 {
        self.comp.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }
    pub fn scaled(&self, s: f64) -> Self {
        let mut o = self.clone();
        o.comp.iter_mut().for_each(|c| c.iter_mut().for_each(|x| *x *= s));
        o
    }
    pub fn axpy(&mut self, a: f64, x: &Field3) {
        for i in 0..3 {
            axpy(&mut self.comp[i], a, &x.comp[i]);
        }
    }
}

/// Symmetric rank-2 field with six packed components.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    pub grid: Grid,
    pub comp: [Vec<f64>; 6],
}

/// Riemannian metric on the grid.
pub type MetricField = SymTensorField;

impl SymTensorField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        SymTensorField { grid, comp: std::array::from_fn(|_| vec![0.0; n]) }
    }
    /// `c · δ_ij` at every point.
    pub fn identity(grid: Grid, c: f64) -> Self {
        let mut t = SymTensorField::zeros(grid);
        for d in [0usize, 3, 5] {
            t.comp[d].iter_mut().for_each(|x| *x = c);
        }
        t
    }
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> [f64; 6]) -> Self {
        let mut out = SymTensorField::zeros(grid);
        for p in 0..grid.len() {
            let v = f(grid.position(p));
            for s in 0..6 {
                out.comp[s][p] = v[s];
            }
        }
        out
    }
    #[inline]
    pub fn at(&self, p: usize) -> Sym3 {
        Sym3(std::array::from_fn(|s| self.comp[s][p]))
    }
    #[inline]
    pub fn set(&mut self, p: usize, v: Sym3) {
        for s in 0..6 {
            self.comp[s][p] = v.0[s];
        }
    }
    #[inline]
    pub fn get(&self, p: usize, i: usize, j: usize) -> f64 {
        self.comp[SYM[i][j]][p]
    }
    pub fn max_abs(&self) -> f64 {
        self.comp.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }
    pub fn scaled(&self, s: f64) -> Self {
        let mut o = self.clone();
        o.comp.iter_mut().for_each(|c| c.iter_mut().for_each(|x| *x *= s));
        o
    }
    pub fn axpy(&mut self, a: f64, x: &SymTensorField) {
        for s in 0..6 {
            axpy(&mut self.comp[s], a, &x.comp[s]);
        }
    }
    pub fn sub(&self, o: &SymTensorField) -> SymTensorField {
        let mut r = self.clone();
        r.axpy(-1.0, o);
        r
    }
}

/// `R^q`-valued one-form `ω_{i,m}`, one covariant field per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOneFormField {
    pub grid: Grid,
    pub channels: Vec<OneFormField>,
}

impl MultiOneFormField {
    pub fn zeros(grid: Grid, q: usize) -> Self {
        MultiOneFormField { grid, channels: (0..q).map(|_| Field3::zeros(grid)).collect() }
    }
    pub fn q(&self) -> usize {
        self.channels.len()
    }
    pub fn max_abs(&self) -> f64 {
        self.channels.iter().map(|c| c.max_abs()).fold(0.0, f64::max)
    }
    pub fn scaled(&self, s: f64) -> Self {
        MultiOneFormField { grid: self.grid, channels: self.channels.iter().map(|c| c.scaled(s)).collect() }
    }
    pub fn axpy(&mut self, a: f64, x: &MultiOneFormField) {
        for (c, xc) in self.channels.iter_mut().zip(&x.channels) {
            c.axpy(a, xc);
        }
    }
}

/// Packed index of `(m, n)` in the upper-triangular storage of a `q × q` symmetric matrix.
#[inline]
pub fn pidx(q: usize, m: usize, n: usize) -> usize {
    let (a, b) = if m <= n { (m, n) } else { (n, m) };
    a * q - a * (a + 1) / 2 + b
}

/// Number of packed components of a symmetric `q × q` matrix.
#[inline]
pub fn packed_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Per-point symmetric `q × q` matrix field, packed upper-triangular.
/// Also used for `∂ₑ₀Φ`, which shares the storage layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiField {
    pub grid: Grid,
    pub q: usize,
    pub comp: Vec<Vec<f64>>,
}

impl PhiField {
    pub fn zeros(grid: Grid, q: usize) -> Self {
        PhiField { grid, q, comp: (0..packed_len(q)).map(|_| vec![0.0; grid.len()]).collect() }
    }
    /// `c · Id` at every point.
    pub fn identity(grid: Grid, q: usize, c: f64) -> Self {
        let mut f = PhiField::zeros(grid, q);
        for m in 0..q {
            f.comp[pidx(q, m, m)].iter_mut().for_each(|x| *x = c);
        }
        f
    }
    /// Dense row-major `q × q` matrix at a point.
    pub fn matrix(&self, p: usize) -> Vec<f64> {
        let q = self.q;
        let mut m = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..q {
                m[a * q + b] = self.comp[pidx(q, a, b)][p];
            }
        }
        m
    }
    pub fn set_matrix(&mut self, p: usize, m: &[f64]) {
        let q = self.q;
        for a in 0..q {
            for b in a..q {
                self.comp[pidx(q, a, b)][p] = 0.5 * (m[a * q + b] + m[b * q + a]);
            }
        }
    }
    pub fn max_abs(&self) -> f64 {
        self.comp.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }
    pub fn scaled(&self, s: f64) -> Self {
        let mut o = self.clone();
        o.comp.iter_mut().for_each(|c| c.iter_mut().for_each(|x| *x *= s));
        o
    }
    pub fn axpy(&mut self, a: f64, x: &PhiField) {
        for (c, xc) in self.comp.iter_mut().zip(&x.comp) {
            axpy(c, a, xc);
        }
    }
}

/// Symmetric 3×3 matrix in packed `[xx, xy, xz, yy, yz, zz]` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym3(pub [f64; 6]);

impl Sym3 {
    pub const IDENTITY: Sym3 = Sym3([1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    pub const ZERO: Sym3 = Sym3([0.0; 6]);

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[SYM[i][j]]
    }

    #[inline]
    pub fn full(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.get(i, j)))
    }

    pub fn from_full(m: &[[f64; 3]; 3]) -> Sym3 {
        Sym3(std::array::from_fn(|s| {
            let (i, j) = SYM_PAIRS[s];
            0.5 * (m[i][j] + m[j][i])
        }))
    }

    #[inline]
    pub fn det(&self) -> f64 {
        let [a, b, c, d, e, f] = self.0;
        a * (d * f - e * e) - b * (b * f - e * c) + c * (b * e - d * c)
    }

    /// Closed-form inverse; `None` when `|det| < DET_TOL`.
    #[inline]
    pub fn inverse(&self) -> Option<(Sym3, f64)> {
        let [a, b, c, d, e, f] = self.0;
        let det = self.det();
        if !(det.abs() >= DET_TOL) {
            return None;
        }
        let inv = 1.0 / det;
        Some((
            Sym3([
                (d * f - e * e) * inv,
                (c * e - b * f) * inv,
                (b * e - c * d) * inv,
                (a * f - c * c) * inv,
                (b * c - a * e) * inv,
                (a * d - b * b) * inv,
            ]),
            det,
        ))
    }

    /// Positive definiteness by leading principal minors.
    pub fn is_spd(&self) -> bool {
        let [a, b, _, d, _, _] = self.0;
        a > 0.0 && a * d - b * b > 0.0 && self.det() > 0.0
    }

    #[inline]
    pub fn trace_with(&self, inv: &Sym3) -> f64 {
        let mut t = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                t += inv.get(i, j) * self.get(i, j);
            }
        }
        t
    }
}

/// Determinant threshold below which a per-point inverse is a hard error.
pub const DET_TOL: f64 = 1e-14;

/// Inverse and determinant of a dense row-major `q × q` matrix by Gauss-Jordan
/// elimination with partial pivoting.
pub fn small_inverse(m: &[f64], q: usize) -> Option<(Vec<f64>, f64)> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; q * q];
    for i in 0..q {
        inv[i * q + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..q {
        let mut piv = col;
        for r in col + 1..q {
            if a[r * q + col].abs() > a[piv * q + col].abs() {
                piv = r;
            }
        }
        if a[piv * q + col] == 0.0 {
            return None;
        }
        if piv != col {
            for k in 0..q {
                a.swap(col * q + k, piv * q + k);
                inv.swap(col * q + k, piv * q + k);
            }
            det = -det;
        }
        let d = a[col * q + col];
        det *= d;
        for k in 0..q {
            a[col * q + k] /= d;
            inv[col * q + k] /= d;
        }
        for r in 0..q {
            if r != col {
                let f = a[r * q + col];
                if f != 0.0 {
                    for k in 0..q {
                        a[r * q + k] -= f * a[col * q + k];
                        inv[r * q + k] -= f * inv[col * q + k];
                    }
                }
            }
        }
    }
    if !(det.abs() >= DET_TOL) {
        return None;
    }
    Some((inv, det))
}

/// Cholesky test for positive definiteness of a dense symmetric matrix.
pub fn small_is_spd(m: &[f64], q: usize) -> bool {
    let mut l = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..=i {
            let mut s = m[i * q + j];
            for k in 0..j {
                s -= l[i * q + k] * l[j * q + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * q + i] = s.sqrt();
            } else {
                l[i * q + j] = s / l[j * q + j];
            }
        }
    }
    true
}

/// Dense `q × q` product `a b`.
pub fn small_mul(a: &[f64], b: &[f64], q: usize) -> Vec<f64> {
    let mut c = vec![0.0; q * q];
    for i in 0..q {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != 0.0 {
                for j in 0..q {
                    c[i * q + j] += aik * b[k * q + j];
                }
            }
        }
    }
    c
}

#[inline]
pub fn small_trace(a: &[f64], q: usize) -> f64 {
    (0..q).map(|i| a[i * q + i]).sum()
}

/// `tr(a b)` for dense square matrices.
#[inline]
pub fn small_trace_prod(a: &[f64], b: &[f64], q: usize) -> f64 {
    let mut t = 0.0;
    for i in 0..q {
        for k in 0..q {
            t += a[i * q + k] * b[k * q + i];
        }
    }
    t
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_index_roundtrip() {
        let q = 4;
        let mut seen = vec![false; packed_len(q)];
        for m in 0..q {
            for n in m..q {
                let k = pidx(q, m, n);
                assert_eq!(k, pidx(q, n, m));
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn coords_roundtrip() {
        let g = Grid::new([4, 5, 6], [1.0; 3]).unwrap();
        for p in 0..g.len() {
            assert_eq!(g.index(g.coords(p)), p);
        }
        assert_eq!(g.offset([0, 0, 0], [-1, 0, 0]), g.index([3, 0, 0]));
    }

    #[test]
    fn sym_inverse() {
        let s = Sym3([2.0, 0.3, -0.1, 1.5, 0.2, 1.2]);
        let (inv, _) = s.inverse().unwrap();
        let a = s.full();
        let b = inv.full();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(Sym3::ZERO.inverse().is_none());
    }

    #[test]
    fn small_inverse_matches() {
        let m = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let (inv, det) = small_inverse(&m, 3).unwrap();
        let s = Sym3([4.0, 1.0, 0.5, 3.0, 0.2, 2.0]);
        assert!((det - s.det()).abs() < 1e-12);
        let id = small_mul(&m, &inv, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((id[i * 3 + j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(small_is_spd(&m, 3));
        assert!(!small_is_spd(&[1.0, 2.0, 2.0, 1.0], 2));
    }

    #[test]
    fn rejects_small_grid() {
        assert!(Grid::new([3, 8, 8], [1.0; 3]).is_err());
        assert!(Grid::new([8, 8, 8], [0.0, 1.0, 1.0]).is_err());
    }
}
