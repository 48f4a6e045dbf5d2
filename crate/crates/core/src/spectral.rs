//! FFT inverse of constant-coefficient periodic operators, used as a
//! preconditioner for the variable-coefficient elliptic solves.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Grid, SYM};

/// Stencil family of the pure second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// Three-point `f(x+h) − 2f(x) + f(x−h)`.
    Compact,
    /// Composition of two centered first differences.
    Wide,
}

/// Exact inverse of `−c^{ij} D_i D_j + m` on the periodic grid, where `D_i D_j`
/// are the discrete stencils of the solvers. Modes where the symbol vanishes
/// are mapped to zero.
pub struct SpectralPreconditioner {
    grid: Grid,
    inv_symbol: Vec<f64>,
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for SpectralPreconditioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPreconditioner").field("grid", &self.grid).finish()
    }
}

impl SpectralPreconditioner {
    /// `coef` is packed symmetric (`SYM` order), `mass` the zeroth-order term.
    pub fn new(grid: Grid, coef: [f64; 6], mass: f64, stencil: Stencil) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = std::array::from_fn(|a| planner.plan_fft_forward(grid.dims[a]));
        let inv = std::array::from_fn(|a| planner.plan_fft_inverse(grid.dims[a]));
        // per-axis factors: sin(κh)/h and the pure second-derivative symbol
        let axis: [Vec<(f64, f64)>; 3] = std::array::from_fn(|a| {
            let n = grid.dims[a];
            let h = grid.spacing[a];
            (0..n)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    let s1 = th.sin() / h;
                    let s2 = match stencil {
                        Stencil::Compact => 4.0 * (0.5 * th).sin().powi(2) / (h * h),
                        Stencil::Wide => s1 * s1,
                    };
                    (s1, s2)
                })
                .collect()
        });
        let n = grid.len();
        let mut symbol = vec![0.0; n];
        for (p, s) in symbol.iter_mut().enumerate() {
            let c = grid.coords(p);
            let mut v = mass;
            for i in 0..3 {
                v += coef[SYM[i][i]] * axis[i][c[i]].1;
                for j in 0..3 {
                    if i != j {
                        v += coef[SYM[i][j]] * axis[i][c[i]].0 * axis[j][c[j]].0;
                    }
                }
            }
            *s = v;
        }
        let scale = symbol.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let inv_symbol = symbol.iter().map(|s| if *s > 1e-12 * scale { 1.0 / (*s * n as f64) } else { 0.0 }).collect();
        SpectralPreconditioner { grid, inv_symbol, fwd, inv }
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let d = self.grid.dims;
        let strides = [d[1] * d[2], d[2], 1];
        for a in 0..3 {
            let len = d[a];
            let st = strides[a];
            let mut line = vec![Complex64::new(0.0, 0.0); len];
            let mut scratch = vec![Complex64::new(0.0, 0.0); plans[a].get_inplace_scratch_len()];
            for base in 0..self.grid.len() {
                // first point of each line has coordinate 0 along the axis
                if (base / st) % len != 0 {
                    continue;
                }
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[base + k * st];
                }
                plans[a].process_with_scratch(&mut line, &mut scratch);
                for (k, v) in line.iter().enumerate() {
                    data[base + k * st] = *v;
                }
            }
        }
    }

    /// Apply the inverse operator to one scalar field.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut data: Vec<Complex64> = r.iter().map(|x| Complex64::new(*x, 0.0)).collect();
        self.transform(&mut data, &self.fwd);
        for (v, s) in data.iter_mut().zip(&self.inv_symbol) {
            *v *= *s;
        }
        self.transform(&mut data, &self.inv);
        data.iter().map(|z| z.re).collect()
    }

    /// Apply to each of `blocks` consecutive scalar fields.
    pub fn apply_blocks(&self, r: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        r.chunks(n).flat_map(|c| self.apply(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{d2, Grid};

    #[test]
    fn inverts_the_discrete_operator() {
        let grid = Grid::new([6, 4, 5], [0.5, 0.7, 0.3]).unwrap();
        let coef = [1.3, 0.2, -0.1, 0.9, 0.05, 1.1];
        let pc = SpectralPreconditioner::new(grid, coef, 0.4, Stencil::Compact);
        let f = grid.sample(|x| (x[0] * 2.0).sin() + (x[1] + 3.0 * x[2]).cos() + 0.3);
        let mut af: Vec<f64> = f.iter().map(|v| 0.4 * v).collect();
        for i in 0..3 {
            for j in 0..3 {
                let dd = d2(&grid, &f, i, j);
                for p in 0..grid.len() {
                    af[p] -= coef[SYM[i][j]] * dd[p];
                }
            }
        }
        let back = pc.apply(&af);
        let err = back.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{}", err);
    }
}
