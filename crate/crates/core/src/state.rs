use crate::grid::*;

/// Rescaled evolution variables on one slice.
///
/// `lapse`, `shift` and `psi` always hold the elliptic solutions belonging to
/// the other fields; the stepper keeps that invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub t: f64,
    pub tau0: f64,
    pub g: MetricField,
    pub sigma: SymTensorField,
    pub phi: PhiField,
    /// `∂ₑ₀Φ`.
    pub phi_dot: PhiField,
    pub omega: MultiOneFormField,
    /// `𝓛ₑ₀ω`.
    pub omega_dot: MultiOneFormField,
    pub lapse: Vec<f64>,
    pub shift: VectorField,
    pub psi: Vec<Vec<f64>>,
}

impl FieldState {
    /// Milne data on `grid`: `g = γ`, `Σ = 0`, `N = 3`, `X = 0`, `Φ = phi_b`, no potential.
    pub fn milne(grid: Grid, gamma: &MetricField, q: usize, tau0: f64, phi_b: &[f64]) -> Self {
        let n = grid.len();
        let mut phi = PhiField::zeros(grid, q);
        for p in 0..n {
            phi.set_matrix(p, phi_b);
        }
        FieldState {
            t: 0.0,
            tau0,
            g: gamma.clone(),
            sigma: SymTensorField::zeros(grid),
            phi,
            phi_dot: PhiField::zeros(grid, q),
            omega: MultiOneFormField::zeros(grid, q),
            omega_dot: MultiOneFormField::zeros(grid, q),
            lapse: vec![3.0; n],
            shift: Field3::zeros(grid),
            psi: vec![vec![0.0; n]; q],
        }
    }

    pub fn grid(&self) -> Grid {
        self.g.grid
    }

    pub fn q(&self) -> usize {
        self.phi.q
    }

    /// `τ = τ₀ e^{−T}`.
    pub fn tau(&self) -> f64 {
        self.tau0 * (-self.t).exp()
    }

    /// Largest pointwise difference over every evolved and solved field.
    pub fn max_diff(&self, other: &FieldState) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let mut m: f64 = 0.0;
        for s in 0..6 {
            m = m.max(d(&self.g.comp[s], &other.g.comp[s]));
            m = m.max(d(&self.sigma.comp[s], &other.sigma.comp[s]));
        }
        for (a, b) in self.phi.comp.iter().zip(&other.phi.comp) {
            m = m.max(d(a, b));
        }
        for (a, b) in self.phi_dot.comp.iter().zip(&other.phi_dot.comp) {
            m = m.max(d(a, b));
        }
        for c in 0..self.omega.q() {
            for i in 0..3 {
                m = m.max(d(&self.omega.channels[c].comp[i], &other.omega.channels[c].comp[i]));
                m = m.max(d(&self.omega_dot.channels[c].comp[i], &other.omega_dot.channels[c].comp[i]));
            }
        }
        m = m.max(d(&self.lapse, &other.lapse));
        for i in 0..3 {
            m = m.max(d(&self.shift.comp[i], &other.shift.comp[i]));
        }
        for (a, b) in self.psi.iter().zip(&other.psi) {
            m = m.max(d(a, b));
        }
        m
    }
}
