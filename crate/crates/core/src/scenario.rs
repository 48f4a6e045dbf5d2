//! Scenario files and initial data.
//!
//! A scenario is flat `key = value` text; keys are dotted (`grid.dims`,
//! `time.dt`, ...). Unknown and repeated keys are rejected with their line.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elliptic::{slice_adapted_gauge, PotentialData, SolverConfig};
use crate::energy::EnergyConstants;
use crate::error::{Error, Result};
use crate::evolution::{cfl_limit, DeltaReading, EvolutionConfig, RunConfig, Sector};
use crate::grid::*;
use crate::mesh::{build_flat_torus_chart, harmonic_oneform_basis, load_supplied_chart, Geometry, GridChart};
use crate::state::FieldState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Milne,
    BransDickeHomogeneous,
    EinsteinMaxwell,
    FullKk,
    Custom,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        Some(match s {
            "milne" => Preset::Milne,
            "brans-dicke-homogeneous" => Preset::BransDickeHomogeneous,
            "einstein-maxwell" => Preset::EinsteinMaxwell,
            "full-kk" => Preset::FullKk,
            "custom" => Preset::Custom,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Milne => "milne",
            Preset::BransDickeHomogeneous => "brans-dicke-homogeneous",
            Preset::EinsteinMaxwell => "einstein-maxwell",
            Preset::FullKk => "full-kk",
            Preset::Custom => "custom",
        }
    }

    fn default_q(self) -> usize {
        match self {
            Preset::FullKk => 2,
            _ => 1,
        }
    }

    fn default_weights(self) -> Weights {
        let w = |g, s, p, pd, o, od| Weights { g, sigma: s, phi: p, phi_dot: pd, omega: o, omega_dot: od, diffeo: 0.0 };
        match self {
            Preset::Milne | Preset::Custom | Preset::BransDickeHomogeneous => w(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            Preset::EinsteinMaxwell => w(1.0, 1.0, 0.0, 0.0, 1.0, 1.0),
            Preset::FullKk => w(1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
        }
    }
}

/// Relative amplitude of the perturbation in each field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub g: f64,
    pub sigma: f64,
    pub phi: f64,
    pub phi_dot: f64,
    pub omega: f64,
    pub omega_dot: f64,
    /// Displacement along which the flat metric is pulled back.
    pub diffeo: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub preset: Preset,
    pub dims: [usize; 3],
    /// Grid spacing; `None` means a periodic box of side 2π.
    pub spacing: Option<[f64; 3]>,
    pub chart: Option<PathBuf>,
    pub q: usize,
    pub tau0: f64,
    pub sector: Sector,
    pub delta_reading: DeltaReading,
    pub t_final: f64,
    pub dt: Option<f64>,
    pub cfl: f64,
    pub amplitude: f64,
    pub modes: Vec<[i32; 3]>,
    pub weights: Weights,
    pub solver: SolverConfig,
    pub coupling_max: usize,
    pub orders: (usize, usize),
    pub lambda0: Option<f64>,
    pub epsilon_prime: f64,
    pub no_backreaction: bool,
    pub out_dir: Option<PathBuf>,
    pub snapshot_every: Option<usize>,
    pub sample_every: usize,
    pub seed: u64,
}

/// Every key a scenario file may set.
pub const SCENARIO_KEYS: &[&str] = &[
    "preset",
    "seed",
    "grid.dims",
    "grid.spacing",
    "grid.length",
    "grid.chart",
    "model.q",
    "model.tau0",
    "model.sector",
    "model.delta",
    "time.t_final",
    "time.dt",
    "time.cfl",
    "perturb.amplitude",
    "perturb.modes",
    "perturb.g",
    "perturb.sigma",
    "perturb.phi",
    "perturb.phi_dot",
    "perturb.omega",
    "perturb.omega_dot",
    "perturb.diffeo",
    "solver.tol",
    "solver.max_iter",
    "solver.fixed_point_tol",
    "solver.coupling_max",
    "energy.s",
    "energy.k",
    "constants.lambda0",
    "constants.epsilon_prime",
    "flags.no_backreaction",
    "output.dir",
    "output.snapshot_every",
    "output.sample_every",
];

impl Scenario {
    pub fn preset(preset: Preset) -> Scenario {
        let bd = preset == Preset::BransDickeHomogeneous;
        Scenario {
            preset,
            dims: [8; 3],
            spacing: None,
            chart: None,
            q: preset.default_q(),
            tau0: -1.0,
            sector: match preset {
                Preset::BransDickeHomogeneous => Sector::BransDicke,
                Preset::EinsteinMaxwell => Sector::EinsteinMaxwell,
                _ => Sector::Full,
            },
            delta_reading: DeltaReading::Dropped,
            t_final: if bd { 5.0 } else { 1.0 },
            dt: None,
            cfl: 0.25,
            amplitude: match preset {
                Preset::Milne | Preset::Custom => 0.0,
                _ => 1e-3,
            },
            modes: vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            weights: preset.default_weights(),
            solver: SolverConfig::default(),
            coupling_max: EvolutionConfig::default().coupling_max,
            orders: (2, 2),
            lambda0: None,
            epsilon_prime: 1e-3,
            no_backreaction: false,
            out_dir: None,
            snapshot_every: None,
            sample_every: 1,
            seed: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("expected 'key = value', got '{}'", body) })?;
            let k = k.trim();
            if !SCENARIO_KEYS.contains(&k) {
                return Err(Error::Parse { line, msg: format!("unknown key '{}'", k) });
            }
            if let Some((first, _)) = kv.get(k) {
                return Err(Error::Parse { line, msg: format!("key '{}' already set on line {}", k, first) });
            }
            kv.insert(k.to_string(), (line, v.trim().to_string()));
        }
        let preset = match kv.get("preset") {
            Some((line, v)) => Preset::parse(v).ok_or_else(|| Error::Parse { line: *line, msg: format!("unknown preset '{}'", v) })?,
            None => Preset::Custom,
        };
        let mut sc = Scenario::preset(preset);
        let get = |k: &str| kv.get(k).map(|(l, v)| (*l, v.as_str()));
        fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| Error::Parse { line, msg: format!("{}: cannot parse '{}'", key, v) })
        }
        fn triple<T: std::str::FromStr + Copy>(line: usize, key: &str, v: &str) -> Result<[T; 3]> {
            let parts: Vec<T> = v.split(',').map(|s| num(line, key, s.trim())).collect::<Result<_>>()?;
            match parts.len() {
                1 => Ok([parts[0]; 3]),
                3 => Ok([parts[0], parts[1], parts[2]]),
                _ => Err(Error::Parse { line, msg: format!("{}: expected one or three values", key) }),
            }
        }
        fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Parse { line, msg: format!("{}: expected a boolean, got '{}'", key, v) }),
            }
        }
        if let Some((l, v)) = get("seed") {
            sc.seed = num(l, "seed", v)?;
        }
        if let Some((l, v)) = get("grid.dims") {
            sc.dims = triple(l, "grid.dims", v)?;
        }
        match (get("grid.spacing"), get("grid.length")) {
            (Some((l, _)), Some(_)) => return Err(Error::Parse { line: l, msg: "grid.spacing and grid.length are exclusive".into() }),
            (Some((l, v)), None) => sc.spacing = Some(triple(l, "grid.spacing", v)?),
            (None, Some((l, v))) => {
                let len: [f64; 3] = triple(l, "grid.length", v)?;
                sc.spacing = Some(std::array::from_fn(|a| len[a] / sc.dims[a] as f64));
            }
            (None, None) => {}
        }
        if let Some((_, v)) = get("grid.chart") {
            sc.chart = Some(PathBuf::from(v));
        }
        if let Some((l, v)) = get("model.q") {
            sc.q = num(l, "model.q", v)?;
        }
        if let Some((l, v)) = get("model.tau0") {
            sc.tau0 = num(l, "model.tau0", v)?;
        }
        if let Some((l, v)) = get("model.sector") {
            if preset != Preset::Custom {
                return Err(Error::Parse { line: l, msg: "model.sector is only settable with preset = custom".into() });
            }
            sc.sector = match v {
                "full" => Sector::Full,
                "brans-dicke" => Sector::BransDicke,
                "einstein-maxwell" => Sector::EinsteinMaxwell,
                _ => return Err(Error::Parse { line: l, msg: format!("model.sector: unknown sector '{}'", v) }),
            };
        }
        if let Some((l, v)) = get("model.delta") {
            sc.delta_reading = match v {
                "dropped" => DeltaReading::Dropped,
                "kronecker" => DeltaReading::Kronecker,
                _ => return Err(Error::Parse { line: l, msg: format!("model.delta: expected dropped or kronecker, got '{}'", v) }),
            };
        }
        if let Some((l, v)) = get("time.t_final") {
            sc.t_final = num(l, "time.t_final", v)?;
        }
        if let Some((l, v)) = get("time.dt") {
            sc.dt = Some(num(l, "time.dt", v)?);
        }
        if let Some((l, v)) = get("time.cfl") {
            sc.cfl = num(l, "time.cfl", v)?;
        }
        if let Some((l, v)) = get("perturb.amplitude") {
            sc.amplitude = num(l, "perturb.amplitude", v)?;
        }
        if let Some((l, v)) = get("perturb.modes") {
            sc.modes = v
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    let t: Vec<i32> = s.split(',').map(|x| num(l, "perturb.modes", x.trim())).collect::<Result<_>>()?;
                    if t.len() != 3 {
                        return Err(Error::Parse { line: l, msg: "perturb.modes: each mode needs three integers".into() });
                    }
                    Ok([t[0], t[1], t[2]])
                })
                .collect::<Result<_>>()?;
        }
        let weights: [(&str, &mut f64); 7] = [
            ("perturb.g", &mut sc.weights.g),
            ("perturb.sigma", &mut sc.weights.sigma),
            ("perturb.phi", &mut sc.weights.phi),
            ("perturb.phi_dot", &mut sc.weights.phi_dot),
            ("perturb.omega", &mut sc.weights.omega),
            ("perturb.omega_dot", &mut sc.weights.omega_dot),
            ("perturb.diffeo", &mut sc.weights.diffeo),
        ];
        for (k, slot) in weights {
            if let Some((l, v)) = get(k) {
                *slot = num(l, k, v)?;
            }
        }
        if let Some((l, v)) = get("solver.tol") {
            sc.solver.tol = num(l, "solver.tol", v)?;
        }
        if let Some((l, v)) = get("solver.max_iter") {
            sc.solver.max_iter = num(l, "solver.max_iter", v)?;
        }
        if let Some((l, v)) = get("solver.fixed_point_tol") {
            sc.solver.fixed_point_tol = num(l, "solver.fixed_point_tol", v)?;
        }
        if let Some((l, v)) = get("solver.coupling_max") {
            sc.coupling_max = num(l, "solver.coupling_max", v)?;
        }
        if let Some((l, v)) = get("energy.s") {
            sc.orders.0 = num(l, "energy.s", v)?;
        }
        if let Some((l, v)) = get("energy.k") {
            sc.orders.1 = num(l, "energy.k", v)?;
        }
        if let Some((l, v)) = get("constants.lambda0") {
            sc.lambda0 = Some(num(l, "constants.lambda0", v)?);
        }
        if let Some((l, v)) = get("constants.epsilon_prime") {
            sc.epsilon_prime = num(l, "constants.epsilon_prime", v)?;
        }
        if let Some((l, v)) = get("flags.no_backreaction") {
            sc.no_backreaction = flag(l, "flags.no_backreaction", v)?;
        }
        if let Some((_, v)) = get("output.dir") {
            sc.out_dir = Some(PathBuf::from(v));
        }
        if let Some((l, v)) = get("output.snapshot_every") {
            let k: usize = num(l, "output.snapshot_every", v)?;
            sc.snapshot_every = (k > 0).then_some(k);
        }
        if let Some((l, v)) = get("output.sample_every") {
            sc.sample_every = num(l, "output.sample_every", v)?;
        }
        sc.validate()?;
        Ok(sc)
    }

    /// Range checks that do not need the chart.
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: String| Err(Error::Config(format!("{}: {}", k, msg)));
        if !(self.tau0 < 0.0) {
            return bad("model.tau0", format!("must be negative, got {}", self.tau0));
        }
        if !(self.t_final > 0.0) {
            return bad("time.t_final", format!("must be positive, got {}", self.t_final));
        }
        if !(self.amplitude >= 0.0) {
            return bad("perturb.amplitude", format!("must be nonnegative, got {}", self.amplitude));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return bad("time.dt", format!("must be positive, got {}", dt));
            }
        }
        if !(self.cfl > 0.0) {
            return bad("time.cfl", format!("must be positive, got {}", self.cfl));
        }
        if self.q == 0 {
            return bad("model.q", "must be at least 1".into());
        }
        if self.sector == Sector::BransDicke && self.q != 1 {
            return bad("model.q", format!("the Brans-Dicke sector has q = 1, got {}", self.q));
        }
        if self.orders.0 == 0 || self.orders.1 == 0 || self.orders.0 > crate::mesh::MAX_SOBOLEV_ORDER || self.orders.1 > crate::mesh::MAX_SOBOLEV_ORDER {
            return bad("energy", format!("orders must lie in 1..={}, got {:?}", crate::mesh::MAX_SOBOLEV_ORDER, self.orders));
        }
        if self.sample_every == 0 {
            return bad("output.sample_every", "must be at least 1".into());
        }
        if let Some(s) = self.spacing {
            if s.iter().any(|h| !(*h > 0.0)) {
                return bad("grid.spacing", format!("must be positive, got {:?}", s));
            }
        }
        if self.modes.iter().any(|m| *m == [0, 0, 0]) {
            return bad("perturb.modes", "the zero mode is not a perturbation".into());
        }
        let w = &self.weights;
        if [w.g, w.sigma, w.phi, w.phi_dot, w.omega, w.omega_dot, w.diffeo].iter().any(|x| !x.is_finite()) {
            return bad("perturb", "weights must be finite".into());
        }
        if self.sector == Sector::BransDicke && (w.omega != 0.0 || w.omega_dot != 0.0) {
            return bad("perturb.omega", "the Brans-Dicke sector has no potential".into());
        }
        if self.sector == Sector::EinsteinMaxwell && (w.phi != 0.0 || w.phi_dot != 0.0) {
            return bad("perturb.phi", "the Einstein-Maxwell sector holds the shape field constant".into());
        }
        Ok(())
    }

    pub fn chart(&self) -> Result<GridChart> {
        match &self.chart {
            Some(path) => {
                let c = load_supplied_chart(path)?;
                if c.q != self.q {
                    return Err(Error::Config(format!("model.q = {} but the chart declares q = {}", self.q, c.q)));
                }
                Ok(c)
            }
            None => {
                let h = self.spacing.unwrap_or(std::array::from_fn(|a| 2.0 * PI / self.dims[a] as f64));
                build_flat_torus_chart(self.dims, h, self.q)
            }
        }
    }

    pub fn energy_constants(&self, chart: &GridChart) -> Result<EnergyConstants> {
        EnergyConstants::new(self.lambda0.or(chart.lambda0).unwrap_or(2.0 / 9.0), self.epsilon_prime)
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            cfl: self.cfl,
            solver: self.solver,
            sector: self.sector,
            no_backreaction: self.no_backreaction,
            delta_reading: self.delta_reading,
            coupling_max: self.coupling_max,
            ..EvolutionConfig::default()
        }
    }

    /// Chart, initial state and run parameters.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let chart = self.chart()?;
        let state = initial_state(self, &chart)?;
        let dt = match self.dt {
            Some(dt) => dt,
            // margin for the lapse and metric moving away from the initial values
            None => 0.9 * cfl_limit(&state, self.cfl),
        };
        let run = RunConfig {
            dt,
            t_final: self.t_final,
            sample_every: self.sample_every,
            snapshot_every: self.snapshot_every,
            orders: self.orders,
            constants: self.energy_constants(&chart)?,
        };
        Ok(Prepared { evolution: self.evolution_config(), run, state, chart })
    }
}

#[derive(Debug)]
pub struct Prepared {
    pub chart: GridChart,
    pub state: FieldState,
    pub evolution: EvolutionConfig,
    pub run: RunConfig,
}

/// One Fourier mode `a cos(κ·x) + b sin(κ·x)` with random coefficients.
struct Mode {
    kappa: [f64; 3],
    /// Discrete wave vector `sin(κ_a h_a)/h_a` seen by centered differences.
    kappa_d: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Mode {
    fn value(&self, x: [f64; 3]) -> f64 {
        let ph = self.kappa[0] * x[0] + self.kappa[1] * x[1] + self.kappa[2] * x[2];
        self.cos * ph.cos() + self.sin * ph.sin()
    }
    fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let ph = self.kappa[0] * x[0] + self.kappa[1] * x[1] + self.kappa[2] * x[2];
        let d = -self.cos * ph.sin() + self.sin * ph.cos();
        [self.kappa[0] * d, self.kappa[1] * d, self.kappa[2] * d]
    }
}

struct ModeDraw<'a> {
    rng: ChaCha8Rng,
    grid: Grid,
    modes: &'a [[i32; 3]],
}

impl ModeDraw<'_> {
    fn next_mode(&mut self, k: [i32; 3]) -> Mode {
        let len: [f64; 3] = std::array::from_fn(|a| self.grid.dims[a] as f64 * self.grid.spacing[a]);
        let kappa: [f64; 3] = std::array::from_fn(|a| 2.0 * PI * k[a] as f64 / len[a]);
        let kappa_d = std::array::from_fn(|a| (kappa[a] * self.grid.spacing[a]).sin() / self.grid.spacing[a]);
        Mode { kappa, kappa_d, cos: self.rng.gen_range(-1.0..1.0), sin: self.rng.gen_range(-1.0..1.0) }
    }

    /// A scalar field summed over all configured modes.
    fn scalar(&mut self) -> Vec<f64> {
        let ms: Vec<Mode> = self.modes.to_vec().into_iter().map(|k| self.next_mode(k)).collect();
        self.grid.sample(|x| ms.iter().map(|m| m.value(x)).sum())
    }

    /// A one-form whose discrete flat divergence vanishes mode by mode.
    fn solenoidal(&mut self) -> OneFormField {
        let grid = self.grid;
        let mut out = Field3::zeros(grid);
        for k in self.modes.to_vec() {
            let m = self.next_mode(k);
            let mut c: [f64; 3] = std::array::from_fn(|_| self.rng.gen_range(-1.0..1.0));
            let kd = m.kappa_d;
            let k2 = kd[0] * kd[0] + kd[1] * kd[1] + kd[2] * kd[2];
            if k2 > 0.0 {
                let proj = (c[0] * kd[0] + c[1] * kd[1] + c[2] * kd[2]) / k2;
                for a in 0..3 {
                    c[a] -= proj * kd[a];
                }
            }
            let v = grid.sample(|x| m.value(x));
            for a in 0..3 {
                axpy(&mut out.comp[a], c[a], &v);
            }
        }
        out
    }

    /// A symmetric tensor field, transverse and traceless mode by mode with
    /// respect to the flat metric.
    fn transverse_traceless(&mut self) -> SymTensorField {
        let grid = self.grid;
        let mut out = SymTensorField::zeros(grid);
        for k in self.modes.to_vec() {
            let m = self.next_mode(k);
            let a: [f64; 6] = std::array::from_fn(|_| self.rng.gen_range(-1.0..1.0));
            let kk = m.kappa;
            let k2 = kk[0] * kk[0] + kk[1] * kk[1] + kk[2] * kk[2];
            let pr: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 } - kk[i] * kk[j] / k2));
            // P A P − ½ P tr(P A P)
            let mut pap = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for x in 0..3 {
                        for y in 0..3 {
                            pap[i][j] += pr[i][x] * a[SYM[x][y]] * pr[y][j];
                        }
                    }
                }
            }
            let tr = pap[0][0] + pap[1][1] + pap[2][2];
            let v = grid.sample(|x| m.value(x));
            for (s, (i, j)) in SYM_PAIRS.iter().enumerate() {
                axpy(&mut out.comp[s], pap[*i][*j] - 0.5 * pr[*i][*j] * tr, &v);
            }
        }
        out
    }

    /// Smooth displacement and its analytic Jacobian `∂_i ξ^j`.
    fn displacement(&mut self) -> Vec<[[f64; 3]; 3]> {
        let ms: Vec<[Mode; 3]> = self.modes.to_vec().into_iter().map(|k| [self.next_mode(k), self.next_mode(k), self.next_mode(k)]).collect();
        (0..self.grid.len())
            .map(|p| {
                let x = self.grid.position(p);
                let mut jac = [[0.0; 3]; 3];
                for trio in &ms {
                    for (j, m) in trio.iter().enumerate() {
                        let d = m.gradient(x);
                        for i in 0..3 {
                            jac[i][j] += d[i];
                        }
                    }
                }
                jac
            })
            .collect()
    }
}

/// Milne data plus the configured perturbation.
pub fn initial_state(sc: &Scenario, chart: &GridChart) -> Result<FieldState> {
    let grid = chart.grid;
    let n = grid.len();
    let q = sc.q;
    let mut pb = vec![0.0; q * q];
    for a in 0..q {
        pb[a * q + a] = 1.0;
    }
    let mut s = FieldState::milne(grid, &chart.gamma, q, sc.tau0, &pb);
    let eps = sc.amplitude;
    if sc.preset == Preset::BransDickeHomogeneous {
        s.phi_dot = PhiField::identity(grid, 1, eps);
    }
    if eps == 0.0 {
        return Ok(s);
    }
    let w = sc.weights;
    let mut draw = ModeDraw { rng: ChaCha8Rng::seed_from_u64(sc.seed), grid, modes: &sc.modes };
    if w.diffeo != 0.0 {
        // g = φ*γ for x ↦ x + εξ(x), exact for constant γ
        let jac = draw.displacement();
        for p in 0..n {
            let gm = chart.gamma.at(p).full();
            let mut d = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    d[i][j] = if i == j { 1.0 } else { 0.0 } + eps * w.diffeo * jac[p][i][j];
                }
            }
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            out[i][j] += d[i][a] * gm[a][b] * d[j][b];
                        }
                    }
                }
            }
            s.g.set(p, Sym3::from_full(&out));
        }
    }
    if w.g != 0.0 {
        let h = draw.transverse_traceless();
        s.g.axpy(eps * w.g, &h);
    }
    for p in 0..n {
        if !s.g.at(p).is_spd() {
            return Err(Error::Config(format!("perturb.amplitude = {} destroys positivity of the metric at point {}", eps, p)));
        }
    }
    if w.sigma != 0.0 {
        let h = draw.transverse_traceless();
        s.sigma.axpy(eps * w.sigma, &h);
        crate::evolution::project_trace_free(&s.g, &mut s.sigma);
    }
    let np = packed_len(q);
    if w.phi != 0.0 {
        for c in 0..np {
            let f = draw.scalar();
            axpy(&mut s.phi.comp[c], eps * w.phi, &f);
        }
        for p in 0..n {
            if !small_is_spd(&s.phi.matrix(p), q) {
                return Err(Error::Config(format!("perturb.amplitude = {} destroys positivity of the shape field at point {}", eps, p)));
            }
        }
    }
    if w.phi_dot != 0.0 {
        for c in 0..np {
            let f = draw.scalar();
            axpy(&mut s.phi_dot.comp[c], eps * w.phi_dot, &f);
        }
    }
    if sc.sector != Sector::BransDicke && (w.omega != 0.0 || w.omega_dot != 0.0) {
        let mut b = MultiOneFormField::zeros(grid, q);
        let mut bd = MultiOneFormField::zeros(grid, q);
        for m in 0..q {
            if w.omega != 0.0 {
                b.channels[m] = draw.solenoidal().scaled(eps * w.omega);
            }
            if w.omega_dot != 0.0 {
                // ∂_T B = N 𝓛ₑ₀ω with N = 3 and X = 0
                bd.channels[m] = draw.solenoidal().scaled(3.0 * eps * w.omega_dot);
            }
        }
        let geom = Geometry::new(&s.g)?;
        let basis = harmonic_oneform_basis(&s.g)?;
        let data = PotentialData { b, b_dot: bd, b_e0: vec![vec![0.0; n]; q] };
        let out = slice_adapted_gauge(&geom, Some(&basis), &data, &s.lapse, &s.shift, &sc.solver)?;
        s.omega = out.omega;
        s.omega_dot = out.omega_dot;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_line() {
        let e = Scenario::parse("preset = milne\n\ngrid.dimz = 8\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{:?}", e);
    }

    #[test]
    fn positive_tau0_is_rejected_by_name() {
        let e = Scenario::parse("preset = milne\nmodel.tau0 = 1\n").unwrap_err();
        assert!(e.to_string().contains("model.tau0"), "{}", e);
    }

    #[test]
    fn repeated_key_is_rejected() {
        assert!(matches!(Scenario::parse("seed = 1\nseed = 2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn length_sets_spacing() {
        let sc = Scenario::parse("grid.dims = 4,8,8\ngrid.length = 4\n").unwrap();
        assert_eq!(sc.spacing, Some([1.0, 0.5, 0.5]));
    }

    #[test]
    fn seeded_draws_repeat() {
        let sc = Scenario::parse("preset = full-kk\ngrid.dims = 4\nseed = 7\n").unwrap();
        let chart = sc.chart().unwrap();
        let a = initial_state(&sc, &chart).unwrap();
        let b = initial_state(&sc, &chart).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma.max_abs() > 0.0 && a.omega.max_abs() > 0.0);
    }
}
