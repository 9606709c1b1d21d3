//! Bayesian Cramér–Rao bound for the multi-target parameter vector.
//!
//! The bound is computed for the stacked vector
//!
//! ```text
//! zeta = [ b_R(1..L) | b_I(1..L) | tau(1..L) | f_D(1..L) | theta(1..L) | xi ]
//! ```
//!
//! of dimension 5L+1. The channel (data) information matrix is
//!
//! ```text
//! [I_C]_{ij} = 2 xi Re{ d_i^H d_j },    d_i = d mu / d zeta_i,
//! ```
//!
//! where `mu` is the noiseless received vector, plus the exact noise-precision
//! entry `[I_C]_{xi,xi} = M K N / xi^2`. Every derivative column factorizes
//! into at most two rank-one terms `g[m,k] * c[n]`, so inner products over the
//! full M*K*N index collapse into short dot products over subcarrier-symbol
//! and antenna indices separately; the matrix assembly never materializes an
//! M*K*N-length vector.
//!
//! The Bayesian information matrix averages `I_C` over parameter draws and
//! adds the diagonal prior information `I_P`; bounds on range, velocity, and
//! bearing come from the corresponding diagonal entries of its inverse,
//! converted to physical units.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::posterior::PriorConfig;
use crate::waveform::{SystemConfig, Target, C};
use crate::{Error, Result};

// ─── Derivative columns ──────────────────────────────────────────────────────

/// One rank-one factor of a derivative column: entry `(m,k,n)` equals
/// `g[m*K+k] * c[n]`.
struct Rank1 {
    g: Vec<Complex64>,
    c: Vec<Complex64>,
}

/// A derivative column as a sum of rank-one factors (one, or two for the
/// angle derivative).
struct Column {
    parts: Vec<Rank1>,
}

/// Per-target tables shared by all of its columns:
/// `ws[mk] = omega[mk] * (a^T x)[mk]`, `wt[mk] = omega[mk] * (sum_p p a_p x_p)[mk]`,
/// and the receive steering vector `a[n]`.
fn target_tables(
    t: &Target,
    x: &[Complex64],
    cfg: &SystemConfig,
) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let (m_n, k_n, n_n) = (cfg.n_subcarriers, cfg.n_symbols, cfg.n_antennas);
    let tau = t.delay_s();
    let fd = t.doppler_hz(cfg);
    let sin_th = t.angle_rad.sin();
    let a: Vec<Complex64> = (0..n_n)
        .map(|n| Complex64::from_polar(1.0, PI * n as f64 * sin_th))
        .collect();
    let wm = 2.0 * PI * cfg.subcarrier_spacing_hz;
    let wk = 2.0 * PI * cfg.symbol_duration_s();
    let mut ws = vec![Complex64::new(0.0, 0.0); m_n * k_n];
    let mut wt = vec![Complex64::new(0.0, 0.0); m_n * k_n];
    for m in 0..m_n {
        for k in 0..k_n {
            let mk = m * k_n + k;
            let omega = Complex64::from_polar(1.0, -wm * m as f64 * tau + wk * k as f64 * fd);
            let base = mk * n_n;
            let mut s = Complex64::new(0.0, 0.0);
            let mut tsum = Complex64::new(0.0, 0.0);
            for p in 0..n_n {
                let ap_x = a[p] * x[base + p];
                s += ap_x;
                tsum += ap_x * p as f64;
            }
            ws[mk] = omega * s;
            wt[mk] = omega * tsum;
        }
    }
    (ws, wt, a)
}

/// Build the 5L mean-derivative columns in `zeta` order.
fn derivative_columns(targets: &[Target], x: &[Complex64], cfg: &SystemConfig) -> Vec<Column> {
    let l_n = targets.len();
    let (k_n, n_n) = (cfg.n_symbols, cfg.n_antennas);
    let j = Complex64::new(0.0, 1.0);
    let wm = 2.0 * PI * cfg.subcarrier_spacing_hz;
    let wk = 2.0 * PI * cfg.symbol_duration_s();

    let mut by_group: Vec<Vec<Column>> = (0..5).map(|_| Vec::with_capacity(l_n)).collect();
    for t in targets {
        let (ws, wt, a) = target_tables(t, x, cfg);
        let b = t.gain();
        let m_of = |mk: usize| (mk / k_n) as f64;
        let k_of = |mk: usize| (mk % k_n) as f64;

        let g_tau: Vec<Complex64> = ws
            .iter()
            .enumerate()
            .map(|(mk, w)| -j * wm * m_of(mk) * b * w)
            .collect();
        let g_fd: Vec<Complex64> = ws
            .iter()
            .enumerate()
            .map(|(mk, w)| j * wk * k_of(mk) * b * w)
            .collect();
        let kappa = j * PI * t.angle_rad.cos();
        let g_th1: Vec<Complex64> = ws.iter().map(|w| kappa * b * w).collect();
        let g_th2: Vec<Complex64> = wt.iter().map(|w| kappa * b * w).collect();
        let c_na: Vec<Complex64> = (0..n_n).map(|n| a[n] * n as f64).collect();
        let g_bi: Vec<Complex64> = ws.iter().map(|w| j * w).collect();

        by_group[0].push(Column {
            parts: vec![Rank1 {
                g: ws.clone(),
                c: a.clone(),
            }],
        });
        by_group[1].push(Column {
            parts: vec![Rank1 {
                g: g_bi,
                c: a.clone(),
            }],
        });
        by_group[2].push(Column {
            parts: vec![Rank1 {
                g: g_tau,
                c: a.clone(),
            }],
        });
        by_group[3].push(Column {
            parts: vec![Rank1 {
                g: g_fd,
                c: a.clone(),
            }],
        });
        by_group[4].push(Column {
            parts: vec![
                Rank1 { g: g_th1, c: c_na },
                Rank1 { g: g_th2, c: a },
            ],
        });
    }
    by_group.into_iter().flatten().collect()
}

/// Expand the derivative columns into dense length-MKN vectors, in `zeta`
/// order. Intended for validation against finite differences; the bound
/// computation itself never calls this.
pub fn mean_derivative_vectors(
    targets: &[Target],
    x: &[Complex64],
    cfg: &SystemConfig,
) -> Vec<Vec<Complex64>> {
    let n_n = cfg.n_antennas;
    let h = cfg.n_entries();
    derivative_columns(targets, x, cfg)
        .iter()
        .map(|col| {
            let mut v = vec![Complex64::new(0.0, 0.0); h];
            for part in &col.parts {
                for (mk, g) in part.g.iter().enumerate() {
                    for (n, c) in part.c.iter().enumerate() {
                        v[mk * n_n + n] += g * c;
                    }
                }
            }
            v
        })
        .collect()
}

// ─── Information matrices ────────────────────────────────────────────────────

/// Channel information matrix `I_C(zeta)` of size `(5L+1) x (5L+1)` for the
/// given draw, noise precision `xi`, and transmit frame `x`.
pub fn classical_fim(
    targets: &[Target],
    xi: f64,
    x: &[Complex64],
    cfg: &SystemConfig,
) -> Result<DMatrix<f64>> {
    if !(xi > 0.0) {
        return Err(Error::Numeric("noise precision must be positive".into()));
    }
    if x.len() != cfg.n_entries() {
        return Err(Error::Config(format!(
            "transmit frame has {} entries, expected {}",
            x.len(),
            cfg.n_entries()
        )));
    }
    let l_n = targets.len();
    let d = 5 * l_n + 1;
    let cols = derivative_columns(targets, x, cfg);
    let mut fim = DMatrix::zeros(d, d);
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
        a.iter().zip(b).map(|(u, v)| u.conj() * v).sum()
    };
    for i in 0..5 * l_n {
        for jcol in i..5 * l_n {
            let mut acc = Complex64::new(0.0, 0.0);
            for pa in &cols[i].parts {
                for pb in &cols[jcol].parts {
                    acc += dot(&pa.g, &pb.g) * dot(&pa.c, &pb.c);
                }
            }
            let v = 2.0 * xi * acc.re;
            fim[(i, jcol)] = v;
            fim[(jcol, i)] = v;
        }
    }
    fim[(d - 1, d - 1)] = cfg.n_entries() as f64 / (xi * xi);
    Ok(fim)
}

/// Diagonal prior information for `zeta`, in the same ordering.
///
/// Gains contribute `2 chi_rho / (kappa_rho - 1)` (the expected precision of
/// the scale mixture), bounded parameters contribute the inverse variance of
/// their truncated-Gaussian prior, and the noise precision contributes
/// `chi_xi^2 / (kappa_xi - 2)`.
///
/// # Errors
///
/// Requires `kappa_rho > 1` and `kappa_xi > 2` for the expectations to exist.
pub fn prior_fim(pc: &PriorConfig, n_targets: usize) -> Result<DVector<f64>> {
    if pc.kappa_rho <= 1.0 {
        return Err(Error::Numeric(
            "gain prior information requires kappa_rho > 1".into(),
        ));
    }
    if pc.kappa_xi <= 2.0 {
        return Err(Error::Numeric(
            "noise prior information requires kappa_xi > 2".into(),
        ));
    }
    let l_n = n_targets;
    let d = 5 * l_n + 1;
    let mut diag = DVector::zeros(d);
    let gain_info = 2.0 * pc.chi_rho / (pc.kappa_rho - 1.0);
    for l in 0..l_n {
        diag[l] = gain_info;
        diag[l_n + l] = gain_info;
        diag[2 * l_n + l] = 1.0 / (pc.delay_s.std * pc.delay_s.std);
        diag[3 * l_n + l] = 1.0 / (pc.doppler_hz.std * pc.doppler_hz.std);
        diag[4 * l_n + l] = 1.0 / (pc.angle_rad.std * pc.angle_rad.std);
    }
    diag[d - 1] = pc.chi_xi * pc.chi_xi / (pc.kappa_xi - 2.0);
    Ok(diag)
}

/// Trace of the inverse of an information matrix: the total variance bound.
pub fn crb_trace(fim: &DMatrix<f64>) -> Result<f64> {
    Ok(invert_pd(fim)?.trace())
}

fn invert_pd(fim: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = fim
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("information matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    if inv.diagonal().iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Numeric(
            "information matrix is too ill-conditioned to invert".into(),
        ));
    }
    Ok(inv)
}

// ─── Bounds in physical units ────────────────────────────────────────────────

/// Root bounds per dimension, aggregated over targets as the root of the
/// mean variance bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BcrbBounds {
    /// Trace of the inverted information matrix (all coordinates, mixed units).
    pub trace: f64,
    pub range_rms_m: f64,
    pub velocity_rms_mps: f64,
    pub angle_rms_rad: f64,
}

/// Invert an information matrix for `n_targets` targets and convert the
/// delay/Doppler/angle diagonal blocks to range, velocity, and bearing
/// bounds.
pub fn bounds_from_fim(
    fim: &DMatrix<f64>,
    n_targets: usize,
    cfg: &SystemConfig,
) -> Result<BcrbBounds> {
    let d = 5 * n_targets + 1;
    if fim.nrows() != d || fim.ncols() != d {
        return Err(Error::Config(format!(
            "information matrix is {}x{}, expected {d}x{d}",
            fim.nrows(),
            fim.ncols()
        )));
    }
    let inv = invert_pd(fim)?;
    let mean_var = |group: usize| -> f64 {
        (0..n_targets)
            .map(|l| inv[(group * n_targets + l, group * n_targets + l)])
            .sum::<f64>()
            / n_targets as f64
    };
    let lambda = cfg.wavelength_m();
    Ok(BcrbBounds {
        trace: inv.trace(),
        range_rms_m: (C / 2.0) * mean_var(2).sqrt(),
        velocity_rms_mps: (lambda / 2.0) * mean_var(3).sqrt(),
        angle_rms_rad: mean_var(4).sqrt(),
    })
}

// ─── Monte-Carlo averaged bound ──────────────────────────────────────────────

/// How parameter draws for the information-matrix average are generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DrawSpec {
    /// Draw gains and noise precision from the hierarchical prior.
    Hierarchical,
    /// Fix the gain modulus (uniform phase) and the noise precision, matching
    /// a generative scene; delays, Dopplers, and angles still follow their
    /// priors.
    Fixed { gain_modulus: f64, xi: f64 },
}

/// Monte-Carlo Bayesian bound: average `I_C` over `n_draws` parameter draws,
/// add the prior information, invert, and convert to physical units.
pub fn bcrb_monte_carlo(
    pc: &PriorConfig,
    spec: &DrawSpec,
    n_targets: usize,
    x: &[Complex64],
    cfg: &SystemConfig,
    n_draws: usize,
    seed: u64,
) -> Result<BcrbBounds> {
    if n_targets == 0 || n_draws == 0 {
        return Err(Error::Config(
            "bound requires at least one target and one draw".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 5 * n_targets + 1;
    let mut acc = DMatrix::<f64>::zeros(d, d);
    let gamma_rho = Gamma::new(pc.kappa_rho, 1.0 / pc.chi_rho)
        .map_err(|e| Error::Numeric(format!("gain-power prior: {e}")))?;
    let gamma_xi = Gamma::new(pc.kappa_xi, 1.0 / pc.chi_xi)
        .map_err(|e| Error::Numeric(format!("noise prior: {e}")))?;
    let lambda = cfg.wavelength_m();
    for _ in 0..n_draws {
        let mut targets = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            let tau = pc.delay_s.sample(&mut rng);
            let fd = pc.doppler_hz.sample(&mut rng);
            let theta = pc.angle_rad.sample(&mut rng);
            let gain = match spec {
                DrawSpec::Hierarchical => {
                    let rho = gamma_rho
                        .sample(&mut rng)
                        .clamp(pc.rho_min, pc.rho_max);
                    let s = (rho / 2.0).sqrt();
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(s * re, s * im)
                }
                DrawSpec::Fixed { gain_modulus, .. } => {
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    Complex64::from_polar(*gain_modulus, phase)
                }
            };
            targets.push(Target::new(C * tau / 2.0, lambda * fd / 2.0, theta, gain));
        }
        let xi = match spec {
            DrawSpec::Hierarchical => gamma_xi.sample(&mut rng).clamp(pc.xi_min, pc.xi_max),
            DrawSpec::Fixed { xi, .. } => *xi,
        };
        acc += classical_fim(&targets, xi, x, cfg)?;
    }
    acc /= n_draws as f64;
    let prior = prior_fim(pc, n_targets)?;
    for i in 0..d {
        acc[(i, i)] += prior[i];
    }
    bounds_from_fim(&acc, n_targets, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{atom, generate_symbols};
    use approx::assert_relative_eq;

    fn small_cfg() -> SystemConfig {
        SystemConfig {
            n_antennas: 4,
            n_subcarriers: 8,
            n_symbols: 3,
            ..SystemConfig::default()
        }
    }

    fn symbols(cfg: &SystemConfig, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_symbols(cfg, &mut rng)
    }

    fn two_targets() -> Vec<Target> {
        vec![
            Target::new(120.0, 14.0, 0.3, Complex64::new(0.8, -0.4)),
            Target::new(410.0, -22.0, -0.7, Complex64::new(-0.3, 1.1)),
        ]
    }

    fn mean_vector(targets: &[Target], x: &[Complex64], cfg: &SystemConfig) -> Vec<Complex64> {
        let mut mu = vec![Complex64::new(0.0, 0.0); cfg.n_entries()];
        for t in targets {
            let at = atom(t.delay_s(), t.doppler_hz(cfg), t.angle_rad, cfg, x);
            for (m, a) in mu.iter_mut().zip(at) {
                *m += t.gain() * a;
            }
        }
        mu
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 71);
        let targets = two_targets();
        let cols = mean_derivative_vectors(&targets, &x, &cfg);
        let l_n = targets.len();

        // Step sizes scaled to each coordinate's natural oscillation rate.
        let h_tau = 1e-4 / (2.0 * PI * cfg.subcarrier_spacing_hz * cfg.n_subcarriers as f64);
        let h_fd = 1e-4 / (2.0 * PI * cfg.symbol_duration_s() * cfg.n_symbols as f64);
        let h_th = 1e-4 / (PI * cfg.n_antennas as f64);
        let h_b = 1e-6;

        let perturb = |group: usize, l: usize, delta: f64| -> Vec<Complex64> {
            let mut t = targets.clone();
            match group {
                0 => {
                    let g = t[l].gain() + Complex64::new(delta, 0.0);
                    t[l].gain_re = g.re;
                    t[l].gain_im = g.im;
                }
                1 => {
                    let g = t[l].gain() + Complex64::new(0.0, delta);
                    t[l].gain_re = g.re;
                    t[l].gain_im = g.im;
                }
                2 => t[l].range_m += C * delta / 2.0,
                3 => t[l].velocity_mps += cfg.wavelength_m() * delta / 2.0,
                4 => t[l].angle_rad += delta,
                _ => unreachable!(),
            }
            mean_vector(&t, &x, &cfg)
        };

        let mut worst = 0.0f64;
        for group in 0..5 {
            let h = [h_b, h_b, h_tau, h_fd, h_th][group];
            for l in 0..l_n {
                let plus = perturb(group, l, h);
                let minus = perturb(group, l, -h);
                let analytic = &cols[group * l_n + l];
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..plus.len() {
                    let fd = (plus[i] - minus[i]) / (2.0 * h);
                    num += (fd - analytic[i]).norm_sqr();
                    den += analytic[i].norm_sqr();
                }
                let rel = (num / den.max(1e-300)).sqrt();
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-6, "worst relative derivative error {worst:.3e}");
    }

    #[test]
    fn collapsed_fim_matches_dense_assembly() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 72);
        let targets = two_targets();
        let xi = 3.7;
        let fast = classical_fim(&targets, xi, &x, &cfg).unwrap();
        let cols = mean_derivative_vectors(&targets, &x, &cfg);
        let d = 5 * targets.len() + 1;
        let mut dense = DMatrix::<f64>::zeros(d, d);
        for i in 0..cols.len() {
            for j in 0..cols.len() {
                let dot: Complex64 = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .map(|(u, v)| u.conj() * v)
                    .sum();
                dense[(i, j)] = 2.0 * xi * dot.re;
            }
        }
        dense[(d - 1, d - 1)] = cfg.n_entries() as f64 / (xi * xi);
        let diff = (&fast - &dense).norm() / dense.norm();
        assert!(diff < 1e-10, "relative mismatch {diff:.3e}");
    }

    #[test]
    fn noise_precision_block_is_exact() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 73);
        let targets = two_targets();
        let xi = 2.5;
        let fim = classical_fim(&targets, xi, &x, &cfg).unwrap();
        let d = fim.nrows();
        assert_relative_eq!(
            fim[(d - 1, d - 1)],
            cfg.n_entries() as f64 / (xi * xi),
            max_relative = 1e-14
        );
        for i in 0..d - 1 {
            assert_eq!(fim[(i, d - 1)], 0.0);
            assert_eq!(fim[(d - 1, i)], 0.0);
        }
    }

    #[test]
    fn information_matrix_is_positive_definite() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 74);
        let fim = classical_fim(&two_targets(), 1.8, &x, &cfg).unwrap();
        assert!(fim.clone().cholesky().is_some(), "expected a PD matrix");
        assert!(crb_trace(&fim).unwrap() > 0.0);
    }

    #[test]
    fn prior_information_tightens_the_bound() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 75);
        let targets = two_targets();
        let fim = classical_fim(&targets, 1.8, &x, &cfg).unwrap();
        let pc = PriorConfig::for_intervals(
            2,
            (1e-7, 4e-6),
            (-3000.0, 3000.0),
            (-1.4, 1.4),
        );
        let prior = prior_fim(&pc, targets.len()).unwrap();
        let mut with_prior = fim.clone();
        for i in 0..fim.nrows() {
            with_prior[(i, i)] += prior[i];
        }
        let loose = crb_trace(&fim).unwrap();
        let tight = crb_trace(&with_prior).unwrap();
        assert!(
            tight <= loose * (1.0 + 1e-12),
            "prior must not loosen the bound: {tight} vs {loose}"
        );
    }

    #[test]
    fn bounds_are_invariant_to_target_order() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 76);
        let mut targets = two_targets();
        let a = classical_fim(&targets, 1.3, &x, &cfg).unwrap();
        targets.reverse();
        let b = classical_fim(&targets, 1.3, &x, &cfg).unwrap();
        let ba = bounds_from_fim(&a, 2, &cfg).unwrap();
        let bb = bounds_from_fim(&b, 2, &cfg).unwrap();
        assert_relative_eq!(ba.trace, bb.trace, max_relative = 1e-9);
        assert_relative_eq!(ba.range_rms_m, bb.range_rms_m, max_relative = 1e-9);
        assert_relative_eq!(ba.velocity_rms_mps, bb.velocity_rms_mps, max_relative = 1e-9);
        assert_relative_eq!(ba.angle_rms_rad, bb.angle_rms_rad, max_relative = 1e-9);
    }

    #[test]
    fn prior_fim_rejects_heavy_tails() {
        let mut pc = PriorConfig::for_intervals(
            2,
            (1e-7, 4e-6),
            (-3000.0, 3000.0),
            (-1.4, 1.4),
        );
        pc.kappa_rho = 1.0;
        assert!(prior_fim(&pc, 2).is_err());
        pc.kappa_rho = 2.0;
        pc.kappa_xi = 2.0;
        assert!(prior_fim(&pc, 2).is_err());
    }

    #[test]
    fn unit_conversion_from_diagonal_fim() {
        let cfg = SystemConfig::default();
        let l_n = 1;
        let d = 5 * l_n + 1;
        let mut fim = DMatrix::<f64>::zeros(d, d);
        // Diagonal information: variance bound is the reciprocal.
        let vals = [4.0, 4.0, 1e16, 1e4, 1e4, 1e-4];
        for (i, v) in vals.iter().enumerate() {
            fim[(i, i)] = *v;
        }
        let b = bounds_from_fim(&fim, l_n, &cfg).unwrap();
        assert_relative_eq!(b.range_rms_m, (C / 2.0) * 1e-8, max_relative = 1e-12);
        assert_relative_eq!(
            b.velocity_rms_mps,
            (cfg.wavelength_m() / 2.0) * 1e-2,
            max_relative = 1e-12
        );
        assert_relative_eq!(b.angle_rms_rad, 1e-2, max_relative = 1e-12);
        let trace_expected: f64 = vals.iter().map(|v| 1.0 / v).sum();
        assert_relative_eq!(b.trace, trace_expected, max_relative = 1e-12);
    }

    #[test]
    fn monte_carlo_bound_is_reproducible_and_finite() {
        let cfg = small_cfg();
        let x = symbols(&cfg, 77);
        let pc = PriorConfig::for_intervals(
            2,
            (3e-7, 4e-6),
            (-6000.0, 6000.0),
            (-1.4, 1.4),
        );
        let spec = DrawSpec::Fixed {
            gain_modulus: 1.0,
            xi: 10.0,
        };
        let a = bcrb_monte_carlo(&pc, &spec, 2, &x, &cfg, 5, 99).unwrap();
        let b = bcrb_monte_carlo(&pc, &spec, 2, &x, &cfg, 5, 99).unwrap();
        assert_eq!(a.range_rms_m.to_bits(), b.range_rms_m.to_bits());
        assert!(a.range_rms_m > 0.0 && a.range_rms_m.is_finite());
        assert!(a.velocity_rms_mps > 0.0);
        assert!(a.angle_rms_rad > 0.0);
        // A different seed moves the estimate but not wildly.
        let c = bcrb_monte_carlo(&pc, &spec, 2, &x, &cfg, 40, 100).unwrap();
        assert!(c.range_rms_m > 0.0 && c.range_rms_m.is_finite());
    }
}
