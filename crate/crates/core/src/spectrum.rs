//! Dense spectra of the discrete operators on small grids.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::*;
use crate::mesh::{lichnerowicz_operator, Connection, Geometry, GridChart};

/// Largest grid on which dense matrices are assembled.
pub const MAX_DENSE_POINTS: usize = 8 * 8 * 8;

/// Assemble the matrix of a linear map on `R^dim` column by column.
pub fn dense_matrix(dim: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    let mut e = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        let col = apply(&e);
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    m
}

/// Eigenvalues sorted ascending. Symmetric matrices use the symmetric solver,
/// otherwise the real parts of the Schur eigenvalues are returned.
pub fn eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let asym = (&m - m.transpose()).amax();
    let mut ev: Vec<f64> = if asym <= 1e-12 * m.amax().max(1.0) {
        m.symmetric_eigenvalues().iter().copied().collect()
    } else {
        m.complex_eigenvalues().iter().map(|z| z.re).collect()
    };
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

fn check_size(grid: &Grid) -> Result<()> {
    if grid.len() > MAX_DENSE_POINTS {
        return Err(Error::Config(format!("dense spectra are limited to {} grid points, got {}", MAX_DENSE_POINTS, grid.len())));
    }
    Ok(())
}

/// Spectrum of the Hodge Laplacian on one-forms.
pub fn hodge_spectrum(geom: &Geometry, conn: &Connection, ric: &SymTensorField) -> Result<Vec<f64>> {
    let grid = geom.grid;
    check_size(&grid)?;
    let n = grid.len();
    let m = dense_matrix(3 * n, |v| {
        let w = Field3 { grid, comp: std::array::from_fn(|i| v[i * n..(i + 1) * n].to_vec()) };
        let out = geom.hodge_laplacian(&w, conn, ric);
        out.comp.concat()
    });
    Ok(eigenvalues(m))
}

/// Number of Hodge eigenvalues with modulus below `tol`.
pub fn hodge_kernel_dimension(g: &MetricField, tol: f64) -> Result<(usize, Vec<f64>)> {
    let geom = Geometry::new(g)?;
    let conn = geom.connection();
    let ric = if conn.flat { SymTensorField::zeros(g.grid) } else { geom.ricci() };
    let ev = hodge_spectrum(&geom, &conn, &ric)?;
    Ok((ev.iter().filter(|x| x.abs() < tol).count(), ev))
}

/// Dense matrix of `𝓛_{γ,γ}` on symmetric tensors in packed component order.
pub fn einstein_operator_matrix(chart: &GridChart) -> Result<DMatrix<f64>> {
    let grid = chart.grid;
    check_size(&grid)?;
    let n = grid.len();
    let mut err = None;
    let m = dense_matrix(6 * n, |v| {
        let u = SymTensorField { grid, comp: std::array::from_fn(|s| v[s * n..(s + 1) * n].to_vec()) };
        match lichnerowicz_operator(chart, &chart.gamma_geometry.inv, &u) {
            Ok(o) => o.comp.concat(),
            Err(e) => {
                err = Some(e);
                vec![0.0; 6 * n]
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(m),
    }
}

/// Eigenvalue of the dense background operator closest to `shift`, by inverse
/// power iteration. The operator acts on all symmetric tensors, so the result
/// bounds the transverse-traceless value from below.
pub fn lowest_einstein_eigenvalue(chart: &GridChart, shift: f64, max_iter: usize) -> Result<f64> {
    let a = einstein_operator_matrix(chart)?;
    let dim = a.nrows();
    let shifted = &a - DMatrix::identity(dim, dim) * shift;
    let lu = shifted.lu();
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7919) % 97) as f64 / 97.0);
    v /= v.norm();
    let mut lambda = shift;
    for _ in 0..max_iter {
        let w = lu.solve(&v).ok_or_else(|| Error::Numeric { point: 0, msg: "shifted operator is singular".into() })?;
        let nw = w.norm();
        let next = &w / nw;
        let av = &a * &next;
        let rq = next.dot(&av);
        let done = (rq - lambda).abs() <= 1e-12 * rq.abs().max(1.0);
        lambda = rq;
        v = next;
        if done {
            return Ok(lambda);
        }
    }
    Ok(lambda)
}
