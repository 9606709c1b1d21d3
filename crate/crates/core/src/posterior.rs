//! Hierarchical probabilistic model and mini-batch-tempered log-posterior.
//!
//! Conditioned on the scatterer parameters, the vectorized observation is
//! Gaussian: each entry contributes `ln(xi/pi) - xi*|y_i - mu_i|^2`, where
//! `mu_i` superposes the per-slot responses and `xi` is the noise precision.
//! A fixed budget of Q candidate slots carries the sparse hierarchy:
//!
//! ```text
//! b_q | rho_q ~ CN(0, rho_q)        rho_q ~ Gamma(kappa_rho, chi_rho)
//! xi          ~ Gamma(kappa_xi, chi_xi)
//! tau_q, f_q, theta_q ~ truncated Gaussians on their feasible intervals
//! ```
//!
//! The sampler never touches the full likelihood. Each iteration scores a
//! random mini-batch of B entries with the tempered objective
//!
//! ```text
//! pi(eta) = (H^gamma / B) * sum_{i in batch} ln p(y_i | eta) + ln p(eta)
//! ```
//!
//! whose stationary distribution raises the full likelihood to the power
//! `H^(gamma-1)`. With `gamma = 1` and the batch equal to the whole record,
//! the plain log-posterior is recovered exactly.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::waveform::ObservationBlock;
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

// ─── Truncated Gaussian prior ────────────────────────────────────────────────

/// Gaussian restricted to `[min, max]`, renormalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedGaussian {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl TruncatedGaussian {
    /// Weakly informative default over an interval: mean at the midpoint,
    /// standard deviation equal to the half-width.
    pub fn spanning(min: f64, max: f64) -> Self {
        Self {
            min,
            max,
            mean: 0.5 * (min + max),
            std: 0.5 * (max - min),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) {
            return Err(Error::Config("truncated Gaussian needs min < max".into()));
        }
        if !(self.std > 0.0) {
            return Err(Error::Config("truncated Gaussian needs std > 0".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    fn std_cdf(z: f64) -> f64 {
        0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
    }

    /// Probability mass of the untruncated Gaussian inside `[min, max]`.
    fn coverage(&self) -> f64 {
        Self::std_cdf((self.max - self.mean) / self.std)
            - Self::std_cdf((self.min - self.mean) / self.std)
    }

    /// Log-density; negative infinity outside the support.
    pub fn logpdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - (self.std * (TWO_PI).sqrt() * self.coverage()).ln()
    }

    /// Derivative of the log-density inside the support; the normalizer does
    /// not depend on x.
    pub fn grad_log(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.std * self.std)
    }

    /// Inverse-CDF sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lo = Self::std_cdf((self.min - self.mean) / self.std);
        let hi = Self::std_cdf((self.max - self.mean) / self.std);
        let u: f64 = rng.gen_range(lo..hi);
        let x = self.mean + self.std * std_normal_quantile(u);
        x.clamp(self.min, self.max)
    }
}

/// Standard-normal quantile via Acklam's rational approximation refined with
/// one Halley step; accurate to ~1e-15 over (0, 1).
fn std_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must be in (0,1)");
    // Rational approximation (relative error < 1.15e-9).
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const CC: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let plow = 0.02425;
    let mut x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((CC[0] * q + CC[1]) * q + CC[2]) * q + CC[3]) * q + CC[4]) * q + CC[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((CC[0] * q + CC[1]) * q + CC[2]) * q + CC[3]) * q + CC[4]) * q + CC[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley refinement against the exact CDF.
    let e = TruncatedGaussian::std_cdf(x) - p;
    let u = e * (TWO_PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    x
}

// ─── Prior configuration ─────────────────────────────────────────────────────

/// Hyperparameters of the hierarchical prior plus the sampler's legal boxes
/// for the positive-domain coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Candidate scatterer slots Q (upper bound on model order).
    pub n_slots: usize,
    pub delay_s: TruncatedGaussian,
    pub doppler_hz: TruncatedGaussian,
    pub angle_rad: TruncatedGaussian,
    /// Shape of the Gamma prior on slot powers rho.
    pub kappa_rho: f64,
    /// Rate of the Gamma prior on slot powers rho.
    pub chi_rho: f64,
    /// Shape of the Gamma prior on the noise precision xi.
    pub kappa_xi: f64,
    /// Rate of the Gamma prior on the noise precision xi.
    pub chi_xi: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub xi_min: f64,
    pub xi_max: f64,
}

impl PriorConfig {
    /// Defaults used throughout: weakly informative Gammas and spanning
    /// truncated Gaussians over the given feasible intervals.
    pub fn for_intervals(
        n_slots: usize,
        delay_s: (f64, f64),
        doppler_hz: (f64, f64),
        angle_rad: (f64, f64),
    ) -> Self {
        Self {
            n_slots,
            delay_s: TruncatedGaussian::spanning(delay_s.0, delay_s.1),
            doppler_hz: TruncatedGaussian::spanning(doppler_hz.0, doppler_hz.1),
            angle_rad: TruncatedGaussian::spanning(angle_rad.0, angle_rad.1),
            kappa_rho: 2.0,
            chi_rho: 0.01,
            kappa_xi: 3.0,
            chi_xi: 0.01,
            rho_min: 1e-8,
            rho_max: 1e4,
            xi_min: 1e-8,
            xi_max: 1e8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::Config("need at least one slot".into()));
        }
        self.delay_s.validate()?;
        self.doppler_hz.validate()?;
        self.angle_rad.validate()?;
        for (name, v) in [
            ("kappa_rho", self.kappa_rho),
            ("chi_rho", self.chi_rho),
            ("kappa_xi", self.kappa_xi),
            ("chi_xi", self.chi_xi),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_max) {
            return Err(Error::Config("rho bounds must satisfy 0 < min < max".into()));
        }
        if !(self.xi_min > 0.0 && self.xi_min < self.xi_max) {
            return Err(Error::Config("xi bounds must satisfy 0 < min < max".into()));
        }
        Ok(())
    }

    /// True when every coordinate lies inside the sampler's legal region
    /// (closed intervals for the bounded parameters, boxes for rho and xi).
    pub fn in_bounds(&self, s: &ParamState) -> bool {
        s.delay_s.iter().all(|&v| self.delay_s.contains(v))
            && s.doppler_hz.iter().all(|&v| self.doppler_hz.contains(v))
            && s.angle_rad.iter().all(|&v| self.angle_rad.contains(v))
            && s.rho.iter().all(|&v| (self.rho_min..=self.rho_max).contains(&v))
            && (self.xi_min..=self.xi_max).contains(&s.xi)
    }

    /// True when every coordinate lies strictly inside the legal region, so
    /// one-sided boundary effects cannot corrupt gradients.
    pub fn strictly_inside(&self, s: &ParamState) -> bool {
        let open = |v: f64, lo: f64, hi: f64| v > lo && v < hi;
        s.delay_s.iter().all(|&v| open(v, self.delay_s.min, self.delay_s.max))
            && s.doppler_hz.iter().all(|&v| open(v, self.doppler_hz.min, self.doppler_hz.max))
            && s.angle_rad.iter().all(|&v| open(v, self.angle_rad.min, self.angle_rad.max))
            && s.rho.iter().all(|&v| open(v, self.rho_min, self.rho_max))
            && open(s.xi, self.xi_min, self.xi_max)
    }
}

// ─── Parameter state ─────────────────────────────────────────────────────────

/// One point in parameter space: Q slots of (delay, Doppler, angle, complex
/// gain, slot power) plus the shared noise precision. The flat layout groups
/// coordinates by kind: `[tau | f | theta | b_re | b_im | rho | xi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub delay_s: Vec<f64>,
    pub doppler_hz: Vec<f64>,
    pub angle_rad: Vec<f64>,
    pub gain_re: Vec<f64>,
    pub gain_im: Vec<f64>,
    pub rho: Vec<f64>,
    pub xi: f64,
}

impl ParamState {
    pub fn zeros(n_slots: usize) -> Self {
        Self {
            delay_s: vec![0.0; n_slots],
            doppler_hz: vec![0.0; n_slots],
            angle_rad: vec![0.0; n_slots],
            gain_re: vec![0.0; n_slots],
            gain_im: vec![0.0; n_slots],
            rho: vec![1.0; n_slots],
            xi: 1.0,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.delay_s.len()
    }

    /// Number of real coordinates, 6 Q + 1.
    pub fn dim(&self) -> usize {
        6 * self.n_slots() + 1
    }

    pub fn gain(&self, q: usize) -> Complex64 {
        Complex64::new(self.gain_re[q], self.gain_im[q])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.delay_s);
        v.extend_from_slice(&self.doppler_hz);
        v.extend_from_slice(&self.angle_rad);
        v.extend_from_slice(&self.gain_re);
        v.extend_from_slice(&self.gain_im);
        v.extend_from_slice(&self.rho);
        v.push(self.xi);
        v
    }

    pub fn from_flat(flat: &[f64], n_slots: usize) -> Self {
        assert_eq!(flat.len(), 6 * n_slots + 1, "flat state has wrong length");
        let q = n_slots;
        Self {
            delay_s: flat[0..q].to_vec(),
            doppler_hz: flat[q..2 * q].to_vec(),
            angle_rad: flat[2 * q..3 * q].to_vec(),
            gain_re: flat[3 * q..4 * q].to_vec(),
            gain_im: flat[4 * q..5 * q].to_vec(),
            rho: flat[5 * q..6 * q].to_vec(),
            xi: flat[6 * q],
        }
    }

    /// Draw an initial state from the full hierarchical prior: bounded
    /// parameters from their truncated Gaussians, powers and precision from
    /// their Gammas (clamped to the legal boxes), and each gain from
    /// `CN(0, rho)` given its slot power.
    ///
    /// Gains must start away from zero: an exactly-zero gain kills the
    /// likelihood gradient of its slot's position coordinates, which inflates
    /// the preconditioned proposal noise there and can wedge a fresh chain in
    /// permanent out-of-bounds rejection.
    pub fn init_from_prior<R: Rng + ?Sized>(pc: &PriorConfig, rng: &mut R) -> Self {
        let q = pc.n_slots;
        let gamma_draw = |shape: f64, rate: f64, rng: &mut R| -> f64 {
            let g = rand_distr::Gamma::new(shape, 1.0 / rate).expect("gamma params");
            rand_distr::Distribution::sample(&g, rng)
        };
        let mut s = Self::zeros(q);
        for i in 0..q {
            s.delay_s[i] = pc.delay_s.sample(rng);
            s.doppler_hz[i] = pc.doppler_hz.sample(rng);
            s.angle_rad[i] = pc.angle_rad.sample(rng);
            s.rho[i] = gamma_draw(pc.kappa_rho, pc.chi_rho, rng).clamp(pc.rho_min, pc.rho_max);
            let comp_std = (s.rho[i] / 2.0).sqrt();
            s.gain_re[i] = comp_std * standard_normal(rng);
            s.gain_im[i] = comp_std * standard_normal(rng);
        }
        s.xi = gamma_draw(pc.kappa_xi, pc.chi_xi, rng).clamp(pc.xi_min, pc.xi_max);
        s
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

// ─── Densities ───────────────────────────────────────────────────────────────

/// Log-density of Gamma(shape, rate) at x; negative infinity for x <= 0.
pub(crate) fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Full-data Gaussian log-likelihood `H ln(xi/pi) - xi * ||y - D b||^2`.
pub fn log_likelihood(state: &ParamState, block: &ObservationBlock) -> f64 {
    if !(state.xi > 0.0) {
        return f64::NEG_INFINITY;
    }
    let h = block.sys.n_entries();
    let batch: Vec<usize> = (0..h).collect();
    let mut ev = Evaluator::new(block, state.n_slots());
    let (sum_sq, _) = ev.residual_stats(state, &batch);
    h as f64 * (state.xi / std::f64::consts::PI).ln() - state.xi * sum_sq
}

/// Log-prior of the full hierarchy; negative infinity outside the support.
pub fn log_prior(state: &ParamState, pc: &PriorConfig) -> f64 {
    let mut lp = 0.0;
    for q in 0..state.n_slots() {
        lp += pc.delay_s.logpdf(state.delay_s[q]);
        lp += pc.doppler_hz.logpdf(state.doppler_hz[q]);
        lp += pc.angle_rad.logpdf(state.angle_rad[q]);
        let rho = state.rho[q];
        if rho <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let b2 = state.gain(q).norm_sqr();
        lp += -(std::f64::consts::PI * rho).ln() - b2 / rho;
        lp += gamma_logpdf(rho, pc.kappa_rho, pc.chi_rho);
    }
    lp += gamma_logpdf(state.xi, pc.kappa_xi, pc.chi_xi);
    lp
}

/// Tempering exponent `gamma = upsilon * ln(B) / ln(H)`.
///
/// # Errors
///
/// Rejects `B = 0`, `B > H`, `H < 2` (degenerate logarithms) and
/// `upsilon` outside `(0, 1]`.
pub fn gamma_exponent(batch_size: usize, n_entries: usize, upsilon: f64) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Numeric("batch size must be positive".into()));
    }
    if n_entries < 2 {
        return Err(Error::Numeric("need at least two observations".into()));
    }
    if batch_size > n_entries {
        return Err(Error::Numeric("batch size cannot exceed record length".into()));
    }
    if !(upsilon > 0.0 && upsilon <= 1.0) {
        return Err(Error::Numeric("upsilon must lie in (0, 1]".into()));
    }
    Ok(upsilon * (batch_size as f64).ln() / (n_entries as f64).ln())
}

/// Draw a mini-batch of distinct entry indices, uniformly without
/// replacement.
pub fn draw_batch<R: Rng + ?Sized>(
    n_entries: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n_entries {
        return Err(Error::Numeric(format!(
            "batch size {batch_size} invalid for {n_entries} entries"
        )));
    }
    let mut taken = vec![false; n_entries];
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let i = rng.gen_range(0..n_entries);
        if !taken[i] {
            taken[i] = true;
            out.push(i);
        }
    }
    Ok(out)
}

// ─── Batch evaluator ─────────────────────────────────────────────────────────

/// Reusable workspace for scoring mini-batches against a fixed observation
/// block. Per-slot phase tables over subcarriers, symbols, and antennas are
/// rebuilt per state; per-entry work is then a handful of complex products.
pub struct Evaluator<'a> {
    block: &'a ObservationBlock,
    n_slots: usize,
    // Per-slot phase tables, row-major [q][m], [q][k], [q][n].
    wm: Vec<Complex64>,
    wk: Vec<Complex64>,
    an: Vec<Complex64>,
    // Per-entry stashes indexed by slot.
    phi: Vec<Complex64>,
    dth: Vec<Complex64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(block: &'a ObservationBlock, n_slots: usize) -> Self {
        let sys = &block.sys;
        Self {
            block,
            n_slots,
            wm: vec![Complex64::default(); n_slots * sys.n_subcarriers],
            wk: vec![Complex64::default(); n_slots * sys.n_symbols],
            an: vec![Complex64::default(); n_slots * sys.n_antennas],
            phi: vec![Complex64::default(); n_slots],
            dth: vec![Complex64::default(); n_slots],
        }
    }

    /// Rebuild the per-slot phase tables for a state.
    fn load_tables(&mut self, state: &ParamState) {
        let sys = &self.block.sys;
        let (mm, kk, nn) = (sys.n_subcarriers, sys.n_symbols, sys.n_antennas);
        for q in 0..self.n_slots {
            let step_m = Complex64::from_polar(
                1.0,
                -TWO_PI * sys.subcarrier_spacing_hz * state.delay_s[q],
            );
            let mut w = Complex64::new(1.0, 0.0);
            for m in 0..mm {
                self.wm[q * mm + m] = w;
                w *= step_m;
            }
            let step_k = Complex64::from_polar(
                1.0,
                TWO_PI * state.doppler_hz[q] * sys.symbol_duration_s(),
            );
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..kk {
                self.wk[q * kk + k] = w;
                w *= step_k;
            }
            let spatial = TWO_PI * (sys.antenna_spacing_m() / sys.wavelength_m())
                * state.angle_rad[q].sin();
            for n in 0..nn {
                self.an[q * nn + n] = Complex64::from_polar(1.0, spatial * n as f64);
            }
        }
    }

    /// Sum of squared residuals over the batch; also returns the batch length
    /// actually consumed (for callers that only need the sum).
    pub fn residual_stats(&mut self, state: &ParamState, batch: &[usize]) -> (f64, usize) {
        self.load_tables(state);
        let sys = &self.block.sys;
        let (kk, nn) = (sys.n_symbols, sys.n_antennas);
        let mut sum_sq = 0.0;
        for &i in batch {
            let (m, k, n) = sys.unpack(i);
            let xs = &self.block.x[(m * kk + k) * nn..(m * kk + k) * nn + nn];
            let mut mu = Complex64::new(0.0, 0.0);
            for q in 0..self.n_slots {
                let arow = &self.an[q * nn..q * nn + nn];
                let mut s0 = Complex64::new(0.0, 0.0);
                for np in 0..nn {
                    s0 += arow[np] * xs[np];
                }
                let omega = self.wm[q * sys.n_subcarriers + m] * self.wk[q * kk + k];
                mu += state.gain(q) * (omega * arow[n] * s0);
            }
            sum_sq += (self.block.y[i] - mu).norm_sqr();
        }
        (sum_sq, batch.len())
    }

    /// Tempered log-posterior of `state` on `batch`.
    ///
    /// Returns negative infinity when the state violates the legal region.
    pub fn tempered_logpost(
        &mut self,
        state: &ParamState,
        batch: &[usize],
        pc: &PriorConfig,
        gamma: f64,
    ) -> f64 {
        if !pc.in_bounds(state) {
            return f64::NEG_INFINITY;
        }
        let h = self.block.sys.n_entries() as f64;
        let b = batch.len() as f64;
        let scale = h.powf(gamma) / b;
        let (sum_sq, _) = self.residual_stats(state, batch);
        let lik = b * (state.xi / std::f64::consts::PI).ln() - state.xi * sum_sq;
        scale * lik + log_prior(state, pc)
    }

    /// Tempered log-posterior and its gradient with respect to the natural
    /// (physical-unit) coordinates, in flat layout.
    ///
    /// # Errors
    ///
    /// The state must lie strictly inside the legal region; boundary or
    /// exterior states have no usable gradient.
    pub fn grad_tempered(
        &mut self,
        state: &ParamState,
        batch: &[usize],
        pc: &PriorConfig,
        gamma: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !pc.strictly_inside(state) {
            return Err(Error::Numeric(
                "gradient requested on or outside the legal region".into(),
            ));
        }
        self.load_tables(state);
        let sys = &self.block.sys;
        let (mm, kk, nn) = (sys.n_subcarriers, sys.n_symbols, sys.n_antennas);
        let nq = self.n_slots;
        let xi = state.xi;
        let dtau = TWO_PI * sys.subcarrier_spacing_hz;
        let dk = TWO_PI * sys.symbol_duration_s();
        let spatial_scale = TWO_PI * (sys.antenna_spacing_m() / sys.wavelength_m());

        let mut g = vec![0.0; 6 * nq + 1];
        let (gt, rest) = g.split_at_mut(nq);
        let (gf, rest) = rest.split_at_mut(nq);
        let (gth, rest) = rest.split_at_mut(nq);
        let (gbr, rest) = rest.split_at_mut(nq);
        let (gbi, rest) = rest.split_at_mut(nq);
        let (_grho, gxi) = rest.split_at_mut(nq);

        let cos_scaled: Vec<f64> = (0..nq)
            .map(|q| spatial_scale * state.angle_rad[q].cos())
            .collect();
        let gains: Vec<Complex64> = (0..nq).map(|q| state.gain(q)).collect();

        let mut sum_sq = 0.0;
        let mut sum_xi = 0.0;
        for &i in batch {
            let (m, k, n) = sys.unpack(i);
            let base = (m * kk + k) * nn;
            let xs = &self.block.x[base..base + nn];
            let mut mu = Complex64::new(0.0, 0.0);
            for q in 0..nq {
                let arow = &self.an[q * nn..q * nn + nn];
                let mut s0 = Complex64::new(0.0, 0.0);
                let mut s1 = Complex64::new(0.0, 0.0);
                for np in 0..nn {
                    let t = arow[np] * xs[np];
                    s0 += t;
                    s1 += t * np as f64;
                }
                let omega = self.wm[q * mm + m] * self.wk[q * kk + k];
                let lead = omega * arow[n];
                let phi = lead * s0;
                self.phi[q] = phi;
                // d phi / d theta = j * cos_scaled * lead * (n*s0 + s1)
                self.dth[q] = lead * (s0 * n as f64 + s1);
                mu += gains[q] * phi;
            }
            let e = self.block.y[i] - mu;
            let econj = e.conj();
            sum_sq += e.norm_sqr();
            sum_xi += 1.0 / xi - e.norm_sqr();
            let cm = dtau * m as f64;
            let ck = dk * k as f64;
            for q in 0..nq {
                let z = econj * (gains[q] * self.phi[q]);
                // d mu/d tau = -j*cm*b*phi  =>  2 xi Re(econj * dmu) = 2 xi cm Im(z)
                gt[q] += 2.0 * xi * cm * z.im;
                // d mu/d f = +j*ck*b*phi  =>  -2 xi ck Im(z)
                gf[q] -= 2.0 * xi * ck * z.im;
                // d mu/d theta = j*cos_scaled*b*dth
                let zth = econj * (gains[q] * self.dth[q]);
                gth[q] -= 2.0 * xi * cos_scaled[q] * zth.im;
                let zb = econj * self.phi[q];
                gbr[q] += 2.0 * xi * zb.re;
                // d mu/d b_im = j*phi  =>  -2 xi Im(econj*phi)
                gbi[q] -= 2.0 * xi * zb.im;
            }
        }
        gxi[0] = sum_xi;

        let h = sys.n_entries() as f64;
        let b = batch.len() as f64;
        let scale = h.powf(gamma) / b;
        for v in g.iter_mut() {
            *v *= scale;
        }

        // Prior contributions.
        for q in 0..nq {
            g[q] += pc.delay_s.grad_log(state.delay_s[q]);
            g[nq + q] += pc.doppler_hz.grad_log(state.doppler_hz[q]);
            g[2 * nq + q] += pc.angle_rad.grad_log(state.angle_rad[q]);
            let rho = state.rho[q];
            g[3 * nq + q] += -2.0 * state.gain_re[q] / rho;
            g[4 * nq + q] += -2.0 * state.gain_im[q] / rho;
            let b2 = state.gain(q).norm_sqr();
            g[5 * nq + q] = b2 / (rho * rho) - 1.0 / rho + (pc.kappa_rho - 1.0) / rho - pc.chi_rho;
        }
        g[6 * nq] += (pc.kappa_xi - 1.0) / xi - pc.chi_xi;

        let value = scale * (b * (xi / std::f64::consts::PI).ln() - xi * sum_sq)
            + log_prior(state, pc);
        Ok((value, g))
    }
}

/// Natural scale of each flat coordinate: the prior interval width for the
/// bounded parameters, one for gains, slot powers, and the precision. The
/// sampler divides by these to work in unitless coordinates, and tests use
/// them to pick finite-difference steps.
pub fn coordinate_scales(pc: &PriorConfig, n_slots: usize) -> Vec<f64> {
    let q = n_slots;
    let mut w = vec![1.0; 6 * q + 1];
    for i in 0..q {
        w[i] = pc.delay_s.width();
        w[q + i] = pc.doppler_hz.width();
        w[2 * q + i] = pc.angle_rad.width();
    }
    w
}

/// Convenience wrapper around [`Evaluator::tempered_logpost`] for one-off
/// evaluations.
pub fn tempered_logpost(
    state: &ParamState,
    batch: &[usize],
    block: &ObservationBlock,
    pc: &PriorConfig,
    gamma: f64,
) -> f64 {
    Evaluator::new(block, state.n_slots()).tempered_logpost(state, batch, pc, gamma)
}

/// Convenience wrapper around [`Evaluator::grad_tempered`]; returns the
/// tempered log-posterior and its gradient in natural units.
pub fn grad_tempered(
    state: &ParamState,
    batch: &[usize],
    block: &ObservationBlock,
    pc: &PriorConfig,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    Evaluator::new(block, state.n_slots()).grad_tempered(state, batch, pc, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{self, Scene, SystemConfig, Target};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> SystemConfig {
        SystemConfig {
            n_antennas: 2,
            n_subcarriers: 4,
            n_symbols: 3,
            ..SystemConfig::default()
        }
    }

    fn test_prior(cfg: &SystemConfig, n_slots: usize) -> PriorConfig {
        let lam = cfg.wavelength_m();
        PriorConfig::for_intervals(
            n_slots,
            (2.0 * 50.0 / waveform::C, 2.0 * 600.0 / waveform::C),
            (2.0 * -30.0 / lam, 2.0 * 30.0 / lam),
            ((-80f64).to_radians(), 80f64.to_radians()),
        )
    }

    fn random_block(cfg: &SystemConfig, targets: Vec<Target>, nv: f64, seed: u64) -> ObservationBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = waveform::generate_symbols(cfg, &mut rng);
        let scene = Scene {
            targets,
            clutter: vec![],
            noise_var: nv,
        };
        waveform::synthesize(&scene, &x, cfg, &mut rng)
    }

    fn interior_state(pc: &PriorConfig, seed: u64) -> ParamState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamState::init_from_prior(pc, &mut rng);
        for q in 0..s.n_slots() {
            s.gain_re[q] = 0.4 * (q as f64 + 1.0) / s.n_slots() as f64;
            s.gain_im[q] = -0.2 * (q as f64 + 1.0) / s.n_slots() as f64;
            s.rho[q] = 0.5 + 0.1 * q as f64;
        }
        s.xi = 3.0;
        s
    }

    #[test]
    fn likelihood_of_exact_fit_single_entry() {
        // One antenna, one subcarrier, one symbol: with y reproduced exactly
        // and xi = 1, the log-likelihood is ln(1/pi).
        let cfg = SystemConfig {
            n_antennas: 1,
            n_subcarriers: 1,
            n_symbols: 1,
            ..SystemConfig::default()
        };
        let x = vec![Complex64::new(1.0, 0.0)];
        let y = vec![Complex64::new(1.0, 0.0)];
        let block = ObservationBlock {
            sys: cfg,
            x,
            y,
        };
        let mut s = ParamState::zeros(1);
        s.gain_re[0] = 1.0;
        s.xi = 1.0;
        let ll = log_likelihood(&s, &block);
        assert_relative_eq!(ll, (1.0 / std::f64::consts::PI).ln(), max_relative = 1e-12);
    }

    #[test]
    fn gamma_logpdf_unit_case() {
        // Gamma(1, 1) at x = 1: density is e^{-1}, log-density is -1.
        assert_relative_eq!(gamma_logpdf(1.0, 1.0, 1.0), -1.0, max_relative = 1e-12);
        assert_eq!(gamma_logpdf(0.0, 1.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(gamma_logpdf(-1.0, 2.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn truncated_gaussian_normalizes_to_one() {
        // Simpson quadrature of the pdf over the support.
        let tg = TruncatedGaussian::spanning(-2.0, 5.0);
        let n = 20_000;
        let hstep = tg.width() / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = tg.min + i as f64 * hstep;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * tg.logpdf(x).exp();
        }
        acc *= hstep / 3.0;
        assert_relative_eq!(acc, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn truncated_gaussian_samples_stay_inside() {
        let tg = TruncatedGaussian::spanning(1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let x = tg.sample(&mut rng);
            assert!(tg.contains(x));
            mean += x;
        }
        mean /= n as f64;
        // Symmetric truncation keeps the mean at the midpoint.
        assert!((mean - 1.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for p in [1e-9, 1e-4, 0.2, 0.5, 0.77, 1.0 - 1e-6] {
            let x = std_normal_quantile(p);
            assert_relative_eq!(TruncatedGaussian::std_cdf(x), p, max_relative = 1e-10);
        }
    }

    #[test]
    fn gamma_exponent_limits_and_errors() {
        assert_relative_eq!(gamma_exponent(1, 100, 0.9).unwrap(), 0.0);
        assert_relative_eq!(gamma_exponent(100, 100, 1.0).unwrap(), 1.0, max_relative = 1e-12);
        let g = gamma_exponent(128, 14336, 0.9).unwrap();
        let want = 0.9 * (128f64).ln() / (14336f64).ln();
        assert_relative_eq!(g, want, max_relative = 1e-12);
        assert!((g - 0.4563).abs() < 5e-4);
        assert!(gamma_exponent(0, 100, 0.9).is_err());
        assert!(gamma_exponent(10, 1, 0.9).is_err());
        assert!(gamma_exponent(200, 100, 0.9).is_err());
        assert!(gamma_exponent(10, 100, 0.0).is_err());
        assert!(gamma_exponent(10, 100, 1.5).is_err());
    }

    #[test]
    fn draw_batch_is_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = draw_batch(100, 40, &mut rng).unwrap();
        assert_eq!(b.len(), 40);
        let mut seen = vec![false; 100];
        for &i in &b {
            assert!(i < 100);
            assert!(!seen[i], "duplicate index {i}");
            seen[i] = true;
        }
        assert!(draw_batch(10, 0, &mut rng).is_err());
        assert!(draw_batch(10, 11, &mut rng).is_err());
    }

    #[test]
    fn full_batch_tempering_recovers_plain_posterior() {
        let cfg = tiny_cfg();
        let pc = test_prior(&cfg, 2);
        let t = Target::new(200.0, 10.0, 0.1, Complex64::new(0.7, 0.1));
        let block = random_block(&cfg, vec![t], 0.05, 21);
        let s = interior_state(&pc, 3);
        let h = cfg.n_entries();
        let batch: Vec<usize> = (0..h).collect();
        let gamma = gamma_exponent(h, h, 1.0).unwrap();
        let tempered = tempered_logpost(&s, &batch, &block, &pc, gamma);
        let plain = log_likelihood(&s, &block) + log_prior(&s, &pc);
        assert_relative_eq!(tempered, plain, max_relative = 1e-12);
    }

    #[test]
    fn batch_average_matches_full_objective() {
        // Linearity: averaging the tempered likelihood part over all
        // C(H, B) batches reproduces H^(gamma-1) times the full
        // log-likelihood part, for any gamma.
        let cfg = SystemConfig {
            n_antennas: 1,
            n_subcarriers: 2,
            n_symbols: 2,
            ..SystemConfig::default()
        };
        let pc = test_prior(&cfg, 1);
        let t = Target::new(150.0, -12.0, -0.2, Complex64::new(0.5, -0.3));
        let block = random_block(&cfg, vec![t], 0.1, 4);
        let s = interior_state(&pc, 8);
        let gamma = 0.6;
        let h = cfg.n_entries();
        assert_eq!(h, 4);
        let prior = log_prior(&s, &pc);
        let mut mean_lik_part = 0.0;
        let mut count = 0.0;
        for i in 0..h {
            for j in (i + 1)..h {
                let batch = vec![i, j];
                mean_lik_part += tempered_logpost(&s, &batch, &block, &pc, gamma) - prior;
                count += 1.0;
            }
        }
        mean_lik_part /= count;
        let full: Vec<usize> = (0..h).collect();
        let full_lik = tempered_logpost(&s, &full, &block, &pc, 1.0) - prior;
        let want = (h as f64).powf(gamma - 1.0) * full_lik;
        assert_relative_eq!(mean_lik_part, want, max_relative = 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = tiny_cfg();
        let pc = test_prior(&cfg, 2);
        let t = Target::new(250.0, 18.0, 0.4, Complex64::new(0.9, -0.4));
        let block = random_block(&cfg, vec![t], 0.02, 33);
        let s = interior_state(&pc, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let batch = draw_batch(cfg.n_entries(), 8, &mut rng).unwrap();
        let gamma = gamma_exponent(8, cfg.n_entries(), 0.9).unwrap();
        let (_, grad) = grad_tempered(&s, &batch, &block, &pc, gamma).unwrap();

        let flat = s.to_flat();
        let widths = coordinate_scales(&pc, s.n_slots());
        let mut worst = 0.0f64;
        for (i, w) in widths.iter().enumerate() {
            let step = 1e-7 * w;
            let mut up = flat.clone();
            up[i] += step;
            let mut dn = flat.clone();
            dn[i] -= step;
            let fu = tempered_logpost(
                &ParamState::from_flat(&up, s.n_slots()),
                &batch,
                &block,
                &pc,
                gamma,
            );
            let fd = tempered_logpost(
                &ParamState::from_flat(&dn, s.n_slots()),
                &batch,
                &block,
                &pc,
                gamma,
            );
            let fd_grad = (fu - fd) / (2.0 * step);
            let denom = grad[i].abs().max(fd_grad.abs()).max(1e-6);
            worst = worst.max((grad[i] - fd_grad).abs() / denom);
        }
        assert!(worst < 1e-6, "worst relative gradient error {worst:e}");
    }

    #[test]
    fn log_prior_is_permutation_invariant() {
        let cfg = tiny_cfg();
        let pc = test_prior(&cfg, 3);
        let s = interior_state(&pc, 2);
        let mut sp = s.clone();
        // Rotate all slot coordinates by one.
        for v in [
            &mut sp.delay_s,
            &mut sp.doppler_hz,
            &mut sp.angle_rad,
            &mut sp.gain_re,
            &mut sp.gain_im,
            &mut sp.rho,
        ] {
            v.rotate_left(1);
        }
        assert_relative_eq!(log_prior(&s, &pc), log_prior(&sp, &pc), max_relative = 1e-12);
        let t = Target::new(300.0, 20.0, -0.5, Complex64::new(0.6, 0.2));
        let block = random_block(&cfg, vec![t], 0.1, 6);
        assert_relative_eq!(
            log_likelihood(&s, &block),
            log_likelihood(&sp, &block),
            max_relative = 1e-10
        );
    }

    #[test]
    fn out_of_support_states_are_rejected() {
        let cfg = tiny_cfg();
        let pc = test_prior(&cfg, 1);
        let mut s = interior_state(&pc, 1);
        s.delay_s[0] = pc.delay_s.max * 4.0;
        assert_eq!(log_prior(&s, &pc), f64::NEG_INFINITY);
        let t = Target::new(100.0, 8.0, 0.0, Complex64::new(1.0, 0.0));
        let block = random_block(&cfg, vec![t], 0.1, 7);
        let batch = vec![0, 1, 2];
        assert_eq!(
            tempered_logpost(&s, &batch, &block, &pc, 0.5),
            f64::NEG_INFINITY
        );
        assert!(grad_tempered(&s, &batch, &block, &pc, 0.5).is_err());
        // Exactly on a bound: logpost is finite, gradient refuses.
        let mut sb = interior_state(&pc, 1);
        sb.delay_s[0] = pc.delay_s.min;
        assert!(tempered_logpost(&sb, &batch, &block, &pc, 0.5).is_finite());
        assert!(grad_tempered(&sb, &batch, &block, &pc, 0.5).is_err());
    }

    #[test]
    fn flat_round_trip_preserves_state() {
        let cfg = tiny_cfg();
        let pc = test_prior(&cfg, 4);
        let s = interior_state(&pc, 11);
        let rt = ParamState::from_flat(&s.to_flat(), 4);
        assert_eq!(s, rt);
        assert_eq!(s.dim(), 25);
    }
}
