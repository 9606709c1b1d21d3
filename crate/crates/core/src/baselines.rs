//! Grid-based comparison methods: on-grid orthogonal matching pursuit and a
//! matched-filter periodogram, plus the Rayleigh resolution cells that set
//! their grids.
//!
//! Both methods score candidate tuples (tau, f_D, theta) by correlation with
//! an atom that is never materialized per grid node. For a fixed bearing the
//! atom factorizes into a slow/fast-time phase ramp times a beamformed
//! symbol scalar, so the whole (tau, f_D) face of the grid reduces to two
//! nested one-dimensional phase sums over a beamformed data table:
//!
//! ```text
//! <atom, d> = sum_m e^{+j 2 pi m df tau} sum_k e^{-j 2 pi k T_s f} g_theta[m,k],
//! g_theta[m,k] = conj(s_theta[m,k]) * sum_n conj(a_n) d[m,k,n],
//! ```
//!
//! with `s_theta = a^T x` the transmit-beamformed symbol. Atom norms depend
//! on bearing alone: `||atom||^2 = N * sum_{m,k} |s_theta[m,k]|^2`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::detector::DetectionResult;
use crate::posterior::PriorConfig;
use crate::waveform::{atom, steering_vector, SystemConfig, Target, C};
use crate::{Error, Result};

// ─── Rayleigh resolution ─────────────────────────────────────────────────────

/// Classical matched-filter resolution cells.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RayleighCells {
    pub range_m: f64,
    pub velocity_mps: f64,
    pub angle_rad: f64,
}

/// Rayleigh cells for a configuration:
/// `dr = c / (2 M df)`, `dv = lambda / (2 K T_s)`,
/// `dtheta = 0.886 lambda / D` with aperture `D = lambda (N-1) / 2`.
pub fn rayleigh_cells(cfg: &SystemConfig) -> RayleighCells {
    let lambda = cfg.wavelength_m();
    let aperture = lambda * (cfg.n_antennas as f64 - 1.0) / 2.0;
    RayleighCells {
        range_m: C / (2.0 * cfg.n_subcarriers as f64 * cfg.subcarrier_spacing_hz),
        velocity_mps: lambda / (2.0 * cfg.n_symbols as f64 * cfg.symbol_duration_s()),
        angle_rad: 0.886 * lambda / aperture,
    }
}

// ─── Grid specification ──────────────────────────────────────────────────────

/// A rectangular search grid in natural units (delay, Doppler, bearing).
/// Points are cell-centered within each interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub delay_s: (f64, f64),
    pub n_delay: usize,
    pub doppler_hz: (f64, f64),
    pub n_doppler: usize,
    pub angle_rad: (f64, f64),
    pub n_angle: usize,
}

impl GridSpec {
    /// One point per Rayleigh cell across the prior support: the
    /// matched-filter-limit grid.
    pub fn coarse(cfg: &SystemConfig, pc: &PriorConfig) -> Self {
        Self::with_density(cfg, pc, 1.0)
    }

    /// Four points per Rayleigh cell: the dense grid for the pursuit curves.
    pub fn fine(cfg: &SystemConfig, pc: &PriorConfig) -> Self {
        Self::with_density(cfg, pc, 4.0)
    }

    fn with_density(cfg: &SystemConfig, pc: &PriorConfig, per_cell: f64) -> Self {
        let cell = rayleigh_cells(cfg);
        let lambda = cfg.wavelength_m();
        let cell_tau = 2.0 * cell.range_m / C;
        let cell_fd = 2.0 * cell.velocity_mps / lambda;
        let count = |lo: f64, hi: f64, cell: f64| -> usize {
            (((hi - lo) / cell * per_cell).ceil() as usize).max(1)
        };
        Self {
            delay_s: (pc.delay_s.min, pc.delay_s.max),
            n_delay: count(pc.delay_s.min, pc.delay_s.max, cell_tau),
            doppler_hz: (pc.doppler_hz.min, pc.doppler_hz.max),
            n_doppler: count(pc.doppler_hz.min, pc.doppler_hz.max, cell_fd),
            angle_rad: (pc.angle_rad.min, pc.angle_rad.max),
            n_angle: count(pc.angle_rad.min, pc.angle_rad.max, cell.angle_rad),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi), n) in [
            ("delay", self.delay_s, self.n_delay),
            ("doppler", self.doppler_hz, self.n_doppler),
            ("angle", self.angle_rad, self.n_angle),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("grid {name} bounds invalid")));
            }
            if n == 0 {
                return Err(Error::Config(format!("grid {name} needs at least one point")));
            }
        }
        if self.delay_s.0 < 0.0 {
            return Err(Error::Config("grid delays must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_delay * self.n_doppler * self.n_angle
    }

    /// Flat index of grid node (delay i, Doppler j, bearing a).
    pub fn idx(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.n_doppler + j) * self.n_angle + a
    }

    fn centered(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        let step = (hi - lo) / n as f64;
        (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect()
    }

    pub fn delay_points(&self) -> Vec<f64> {
        Self::centered(self.delay_s.0, self.delay_s.1, self.n_delay)
    }

    pub fn doppler_points(&self) -> Vec<f64> {
        Self::centered(self.doppler_hz.0, self.doppler_hz.1, self.n_doppler)
    }

    pub fn angle_points(&self) -> Vec<f64> {
        Self::centered(self.angle_rad.0, self.angle_rad.1, self.n_angle)
    }
}

// ─── Factorized grid scan ────────────────────────────────────────────────────

/// Correlations of every grid atom with a data vector, plus per-bearing
/// squared atom norms.
struct Scan {
    corr: Vec<Complex64>,
    norm2_by_angle: Vec<f64>,
}

fn scan_grid(data: &[Complex64], x: &[Complex64], cfg: &SystemConfig, grid: &GridSpec) -> Scan {
    let (m_n, k_n, n_n) = (cfg.n_subcarriers, cfg.n_symbols, cfg.n_antennas);
    let taus = grid.delay_points();
    let fds = grid.doppler_points();
    let angles = grid.angle_points();
    let w_m = 2.0 * PI * cfg.subcarrier_spacing_hz;
    let w_k = 2.0 * PI * cfg.symbol_duration_s();

    let mut corr = vec![Complex64::new(0.0, 0.0); grid.n_total()];
    let mut norm2_by_angle = vec![0.0; angles.len()];
    let mut g = vec![Complex64::new(0.0, 0.0); m_n * k_n];
    let mut gf = vec![Complex64::new(0.0, 0.0); m_n];

    for (ia, &theta) in angles.iter().enumerate() {
        let a = steering_vector(theta, cfg);
        let mut norm2 = 0.0;
        for m in 0..m_n {
            for k in 0..k_n {
                let base = cfg.idx(m, k, 0);
                let mut s = Complex64::new(0.0, 0.0);
                let mut beamformed = Complex64::new(0.0, 0.0);
                for n in 0..n_n {
                    s += a[n] * x[base + n];
                    beamformed += a[n].conj() * data[base + n];
                }
                norm2 += s.norm_sqr();
                g[m * k_n + k] = s.conj() * beamformed;
            }
        }
        norm2_by_angle[ia] = n_n as f64 * norm2;

        for (jf, &fd) in fds.iter().enumerate() {
            for m in 0..m_n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..k_n {
                    acc += Complex64::from_polar(1.0, -w_k * k as f64 * fd) * g[m * k_n + k];
                }
                gf[m] = acc;
            }
            for (it, &tau) in taus.iter().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..m_n {
                    acc += Complex64::from_polar(1.0, w_m * m as f64 * tau) * gf[m];
                }
                corr[grid.idx(it, jf, ia)] = acc;
            }
        }
    }
    Scan {
        corr,
        norm2_by_angle,
    }
}

fn node_target(grid: &GridSpec, cfg: &SystemConfig, flat: usize, gain: Complex64) -> Target {
    let ia = flat % grid.n_angle;
    let jf = (flat / grid.n_angle) % grid.n_doppler;
    let it = flat / (grid.n_angle * grid.n_doppler);
    Target::new(
        C * grid.delay_points()[it] / 2.0,
        cfg.wavelength_m() * grid.doppler_points()[jf] / 2.0,
        grid.angle_points()[ia],
        gain,
    )
}

// ─── Orthogonal matching pursuit ─────────────────────────────────────────────

/// When to stop adding atoms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Select exactly this many atoms (or fewer if the grid is exhausted).
    MaxTargets(usize),
    /// Stop once the residual norm drops to this fraction of the data norm.
    ResidualTol(f64),
}

/// Hard cap on pursuit iterations under a residual-tolerance rule.
const OMP_MAX_SELECTIONS: usize = 64;

/// Pursuit outcome: the detections plus the residual-norm trace, starting at
/// the data norm and appending one value per refit.
#[derive(Debug, Clone)]
pub struct OmpResult {
    pub detection: DetectionResult,
    pub residual_norms: Vec<f64>,
}

/// On-grid orthogonal matching pursuit: greedily select the grid atom with
/// the largest normalized correlation against the residual, refit all
/// selected coefficients by least squares, and repeat until the stop rule
/// fires or the residual stops improving.
pub fn omp(
    y: &[Complex64],
    x: &[Complex64],
    cfg: &SystemConfig,
    grid: &GridSpec,
    stop: StopRule,
) -> Result<OmpResult> {
    grid.validate()?;
    if y.len() != cfg.n_entries() || x.len() != cfg.n_entries() {
        return Err(Error::Config("tensor shape mismatch in pursuit".into()));
    }
    let y_norm = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let limit = match stop {
        StopRule::MaxTargets(t) => {
            if t == 0 {
                return Err(Error::Config("pursuit needs max_targets >= 1".into()));
            }
            t.min(grid.n_total())
        }
        StopRule::ResidualTol(tol) => {
            if !(tol >= 0.0) {
                return Err(Error::Config("residual tolerance must be >= 0".into()));
            }
            OMP_MAX_SELECTIONS.min(grid.n_total())
        }
    };

    let mut residual = y.to_vec();
    let mut selected: Vec<usize> = Vec::new();
    let mut atoms: Vec<Vec<Complex64>> = Vec::new();
    let mut coefs: Vec<Complex64> = Vec::new();
    let mut residual_norms = vec![y_norm];

    while selected.len() < limit {
        let scan = scan_grid(&residual, x, cfg, grid);
        let mut best: Option<(usize, f64)> = None;
        for flat in 0..grid.n_total() {
            if selected.contains(&flat) {
                continue;
            }
            let norm2 = scan.norm2_by_angle[flat % grid.n_angle];
            if norm2 <= 0.0 {
                continue;
            }
            let metric = scan.corr[flat].norm_sqr() / norm2;
            if best.map_or(true, |(_, b)| metric > b) {
                best = Some((flat, metric));
            }
        }
        let Some((pick, _)) = best else { break };
        selected.push(pick);
        let t = node_target(grid, cfg, pick, Complex64::new(1.0, 0.0));
        atoms.push(atom(t.delay_s(), t.doppler_hz(cfg), t.angle_rad, cfg, x));

        coefs = least_squares(&atoms, y)?;
        residual = y.to_vec();
        for (a, c) in atoms.iter().zip(&coefs) {
            for (r, v) in residual.iter_mut().zip(a) {
                *r -= c * v;
            }
        }
        let r_norm = residual.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let previous = *residual_norms.last().unwrap();
        residual_norms.push(r_norm);
        match stop {
            StopRule::ResidualTol(tol) => {
                if r_norm <= tol * y_norm {
                    break;
                }
                // No meaningful progress: the dictionary is exhausted of
                // explanatory atoms.
                if r_norm >= previous * (1.0 - 1e-12) {
                    break;
                }
            }
            StopRule::MaxTargets(_) => {}
        }
    }

    let mut targets: Vec<Target> = selected
        .iter()
        .zip(&coefs)
        .map(|(&flat, &c)| node_target(grid, cfg, flat, c))
        .collect();
    targets.sort_by(|a, b| {
        b.gain()
            .norm()
            .partial_cmp(&a.gain().norm())
            .unwrap()
    });
    Ok(OmpResult {
        detection: DetectionResult { targets },
        residual_norms,
    })
}

/// Refit complex amplitudes for a fixed set of positions (on- or off-grid)
/// by joint least squares. Returns the coefficients, ordered like `targets`,
/// and the residual norm of the fit.
pub(crate) fn refit_gains(
    y: &[Complex64],
    x: &[Complex64],
    cfg: &SystemConfig,
    targets: &[Target],
) -> Result<(Vec<Complex64>, f64)> {
    if targets.is_empty() {
        let r_norm = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        return Ok((Vec::new(), r_norm));
    }
    let atoms: Vec<Vec<Complex64>> = targets
        .iter()
        .map(|t| atom(t.delay_s(), t.doppler_hz(cfg), t.angle_rad, cfg, x))
        .collect();
    let coefs = least_squares(&atoms, y)?;
    let mut residual = y.to_vec();
    for (a, c) in atoms.iter().zip(&coefs) {
        for (r, v) in residual.iter_mut().zip(a) {
            *r -= c * v;
        }
    }
    let r_norm = residual.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    Ok((coefs, r_norm))
}

/// Solve `min ||y - A c||` over the selected atoms via the normal equations.
fn least_squares(atoms: &[Vec<Complex64>], y: &[Complex64]) -> Result<Vec<Complex64>> {
    use nalgebra::{DMatrix, DVector};
    let s = atoms.len();
    let mut gram = DMatrix::<Complex64>::zeros(s, s);
    let mut rhs = DVector::<Complex64>::zeros(s);
    for i in 0..s {
        for j in i..s {
            let dot: Complex64 = atoms[i].iter().zip(&atoms[j]).map(|(u, v)| u.conj() * v).sum();
            gram[(i, j)] = dot;
            gram[(j, i)] = dot.conj();
        }
        rhs[i] = atoms[i].iter().zip(y).map(|(u, v)| u.conj() * v).sum();
    }
    let solution = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Numeric("pursuit refit system is singular".into()))?;
    Ok(solution.iter().copied().collect())
}

// ─── Periodogram ─────────────────────────────────────────────────────────────

/// Matched-filter power over the whole grid.
#[derive(Debug, Clone)]
pub struct PowerMap {
    pub grid: GridSpec,
    /// Normalized power |<atom, y>|^2 / ||atom||^2 per grid node, indexed by
    /// `grid.idx`.
    pub power: Vec<f64>,
}

/// Evaluate the normalized matched-filter power at every grid node.
pub fn periodogram(
    y: &[Complex64],
    x: &[Complex64],
    cfg: &SystemConfig,
    grid: &GridSpec,
) -> Result<PowerMap> {
    grid.validate()?;
    if y.len() != cfg.n_entries() || x.len() != cfg.n_entries() {
        return Err(Error::Config("tensor shape mismatch in periodogram".into()));
    }
    let scan = scan_grid(y, x, cfg, grid);
    let power = (0..grid.n_total())
        .map(|flat| {
            let norm2 = scan.norm2_by_angle[flat % grid.n_angle];
            if norm2 > 0.0 {
                scan.corr[flat].norm_sqr() / norm2
            } else {
                0.0
            }
        })
        .collect();
    Ok(PowerMap {
        grid: grid.clone(),
        power,
    })
}

impl PowerMap {
    /// Peak extraction by non-maximum suppression: visit nodes in descending
    /// power and keep those not within one Rayleigh cell (per dimension) of
    /// an already-kept peak. Gains carry the root power.
    pub fn peaks(&self, cfg: &SystemConfig, max_peaks: usize) -> Vec<Target> {
        let cell = rayleigh_cells(cfg);
        let mut order: Vec<usize> = (0..self.power.len()).collect();
        order.sort_by(|&a, &b| self.power[b].partial_cmp(&self.power[a]).unwrap());
        let mut kept: Vec<Target> = Vec::new();
        for flat in order {
            if kept.len() >= max_peaks {
                break;
            }
            let cand = node_target(
                &self.grid,
                cfg,
                flat,
                Complex64::new(self.power[flat].max(0.0).sqrt(), 0.0),
            );
            let suppressed = kept.iter().any(|p| {
                (p.range_m - cand.range_m).abs() < cell.range_m
                    && (p.velocity_mps - cand.velocity_mps).abs() < cell.velocity_mps
                    && (p.angle_rad - cand.angle_rad).abs() < cell.angle_rad
            });
            if !suppressed {
                kept.push(cand);
            }
        }
        kept
    }
}
