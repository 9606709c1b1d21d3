//! Monte-Carlo sweep orchestration: scenario configuration, seeded trial
//! execution, aggregation into detection-probability and RMSE rows, bound
//! columns, and CSV output.
//!
//! Every trial is reproducible in isolation: its seed derives from the
//! master seed plus the (axis index, trial index) pair, so any anomalous
//! cell of a sweep can be re-run alone. Methods share the trial seed and
//! therefore see identical scenes, noise, and — when enabled — clutter.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::baselines::{omp, periodogram, rayleigh_cells, refit_gains, GridSpec, StopRule};
use crate::bcrb::{bcrb_monte_carlo, BcrbBounds, DrawSpec};
use crate::clutter::{generate_clutter, suppress, trim_symbols, ClutterConfig};
use crate::detector::{detect, score_trial, DetectionResult, Gates, TrialScore};
use crate::posterior::{gamma_exponent, ParamState, PriorConfig};
use crate::sampler::{run_chains_from, SamplerConfig};
use crate::waveform::{
    atom, generate_repeated_symbols, generate_symbols, mean_echo_power, noise_var_for_snr,
    radar_amplitude, radar_calibration, synthesize, ObservationBlock, Scene, SystemConfig, Target,
    C,
};
use crate::{derive_seed, Error, Result};

// ─── Scenario configuration ──────────────────────────────────────────────────

/// How target reflection amplitudes are drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainModel {
    /// Unit amplitude, uniform phase: every target carries the same echo
    /// power regardless of range.
    UnitModulus,
    /// Radar-equation amplitude `lambda sqrt(rcs) / r^2`, calibrated to unit
    /// amplitude for `rcs_ref_m2` at `range_ref_m`, uniform phase.
    RadarEquation {
        rcs_m2: f64,
        range_ref_m: f64,
        rcs_ref_m2: f64,
    },
}

impl Default for GainModel {
    fn default() -> Self {
        GainModel::UnitModulus
    }
}

/// Distributions the ground-truth scene is drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Target ranges are uniform over this interval (m).
    pub range_m: (f64, f64),
    /// Speed magnitudes are uniform over this band (m/s); the sign of each
    /// velocity is a fair coin, so the support is the symmetric union of the
    /// band and its negation.
    pub speed_mps: (f64, f64),
    /// Bearings are uniform over this interval (degrees).
    pub angle_deg: (f64, f64),
    /// Exact number of targets per trial.
    pub n_targets: usize,
    /// When set (requires exactly two targets) the second target sits this
    /// many meters beyond the first at the same velocity and bearing.
    pub separation_m: Option<f64>,
    pub gain_model: GainModel,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            range_m: (50.0, 600.0),
            speed_mps: (5.0, 30.0),
            angle_deg: (-80.0, 80.0),
            n_targets: 1,
            separation_m: None,
            gain_model: GainModel::UnitModulus,
        }
    }
}

/// Estimation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SblMcmc,
    Omp,
    Periodogram,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SblMcmc => "sbl-mcmc",
            Method::Omp => "omp",
            Method::Periodogram => "periodogram",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbl-mcmc" => Ok(Method::SblMcmc),
            "omp" => Ok(Method::Omp),
            "periodogram" => Ok(Method::Periodogram),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected sbl-mcmc, omp, or periodogram)"
            ))),
        }
    }
}

/// Swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SnrDb,
    ScnrDb,
    SeparationM,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::SnrDb => "snr_db",
            Axis::ScnrDb => "scnr_db",
            Axis::SeparationM => "separation_m",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<f64>,
}

/// Matching gates in config units (degrees for the bearing).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatesSpec {
    pub range_m: f64,
    pub velocity_mps: f64,
    pub angle_deg: f64,
}

/// Trial-correctness rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// The detected count must equal the truth and every truth must match.
    Strict,
    /// Every truth must match; surplus detections are tolerated (used when
    /// clutter residues can add spurious but harmless detections).
    Tolerant,
}

/// How the bound columns average the information matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundDrawMode {
    /// Gains and noise precision from the hierarchical prior.
    Hierarchical,
    /// Unit-modulus gains and the noise precision implied by the scenario
    /// SNR, matching the generative scene.
    GenerativeMatched,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSpec {
    pub draws: usize,
    pub mode: BoundDrawMode,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self {
            draws: 100,
            mode: BoundDrawMode::GenerativeMatched,
        }
    }
}

fn default_bounds() -> Option<BoundsSpec> {
    Some(BoundsSpec::default())
}

fn default_methods() -> Vec<Method> {
    vec![Method::SblMcmc]
}

fn default_sweep() -> Sweep {
    Sweep {
        axis: Axis::SnrDb,
        values: vec![20.0],
    }
}

fn default_trials() -> usize {
    50
}

fn default_q() -> usize {
    10
}

fn default_snr_db() -> f64 {
    20.0
}

fn default_sigma_thr() -> f64 {
    0.9
}

fn default_scoring() -> Scoring {
    Scoring::Strict
}

/// Full description of one benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub scene: SceneSpec,
    /// Explicit prior; when omitted it spans the scene distributions.
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub clutter: Option<ClutterConfig>,
    /// Apply recursive background subtraction before estimation.
    #[serde(default)]
    pub suppress_clutter: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Search grid for the baselines; presets are derived when omitted
    /// (fine for the pursuit, coarse for the periodogram).
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Pursuit stop rule; defaults to the true target count.
    #[serde(default)]
    pub omp_stop: Option<StopRule>,
    #[serde(default = "default_sweep")]
    pub sweep: Sweep,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Number of candidate slots Q the estimator carries.
    #[serde(default = "default_q")]
    pub q: usize,
    /// Master seed; trial seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    /// SNR used when the sweep axis is not SNR (dB).
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    /// Cumulative-energy threshold for model-order selection.
    #[serde(default = "default_sigma_thr")]
    pub sigma_thr: f64,
    #[serde(default = "default_scoring")]
    pub scoring: Scoring,
    /// Matching-gate override; default is half a Rayleigh cell.
    #[serde(default)]
    pub gates: Option<GatesSpec>,
    /// Bound columns; `null` disables them.
    #[serde(default = "default_bounds")]
    pub bounds: Option<BoundsSpec>,
    /// Record wall-clock seconds per row in the CSV (off by default so
    /// identical runs stay byte-identical).
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            scene: SceneSpec::default(),
            prior: None,
            sampler: SamplerConfig::default(),
            clutter: None,
            suppress_clutter: false,
            methods: default_methods(),
            grid: None,
            omp_stop: None,
            sweep: default_sweep(),
            trials: default_trials(),
            q: default_q(),
            seed: 0,
            snr_db: default_snr_db(),
            sigma_thr: default_sigma_thr(),
            scoring: default_scoring(),
            gates: None,
            bounds: default_bounds(),
            record_wall_time: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.sampler.validate()?;
        let s = &self.scene;
        if !(s.range_m.0 > 0.0 && s.range_m.0 < s.range_m.1) {
            return Err(Error::Config("scene.range_m must be an increasing positive interval".into()));
        }
        if !(s.speed_mps.0 >= 0.0 && s.speed_mps.0 < s.speed_mps.1) {
            return Err(Error::Config("scene.speed_mps must be an increasing non-negative band".into()));
        }
        if !(s.angle_deg.0 < s.angle_deg.1 && s.angle_deg.0 > -90.0 && s.angle_deg.1 < 90.0) {
            return Err(Error::Config("scene.angle_deg must lie inside (-90, 90)".into()));
        }
        if s.n_targets == 0 || s.n_targets > 5 {
            return Err(Error::Config("scene.n_targets must lie in 1..=5".into()));
        }
        if s.separation_m.is_some() && s.n_targets != 2 {
            return Err(Error::Config("scene.separation_m requires exactly two targets".into()));
        }
        if self.sweep.axis == Axis::SeparationM && s.n_targets != 2 {
            return Err(Error::Config("a separation sweep requires exactly two targets".into()));
        }
        if self.sweep.axis == Axis::ScnrDb && self.clutter.is_none() {
            return Err(Error::Config("an SCNR sweep requires a clutter config".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::Config("sweep.values must be nonempty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be nonempty".into()));
        }
        if !(self.sigma_thr > 0.0 && self.sigma_thr <= 1.0) {
            return Err(Error::Config("sigma_thr must lie in (0, 1]".into()));
        }
        if self.q < self.scene.n_targets {
            return Err(Error::Config("q must be at least the target count".into()));
        }
        if let Some(cc) = &self.clutter {
            cc.validate(&self.system)?;
        }
        if self.suppress_clutter && self.clutter.is_none() {
            return Err(Error::Config("suppress_clutter requires a clutter config".into()));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        let pc = self.prior_config();
        pc.validate()?;
        // The scene support must sit inside the prior support.
        let lambda = self.system.wavelength_m();
        let inside = |lo: f64, hi: f64, tlo: f64, thi: f64| lo >= tlo && hi <= thi;
        if !inside(
            2.0 * s.range_m.0 / C,
            2.0 * s.range_m.1 / C,
            pc.delay_s.min,
            pc.delay_s.max,
        ) || !inside(
            -2.0 * s.speed_mps.1 / lambda,
            2.0 * s.speed_mps.1 / lambda,
            pc.doppler_hz.min,
            pc.doppler_hz.max,
        ) || !inside(
            s.angle_deg.0.to_radians(),
            s.angle_deg.1.to_radians(),
            pc.angle_rad.min,
            pc.angle_rad.max,
        ) {
            return Err(Error::Config("scene distributions fall outside the prior support".into()));
        }
        Ok(())
    }

    /// The prior actually used: the explicit one, or intervals spanning the
    /// scene distributions with `q` slots.
    pub fn prior_config(&self) -> PriorConfig {
        if let Some(p) = &self.prior {
            return p.clone();
        }
        let lambda = self.system.wavelength_m();
        PriorConfig::for_intervals(
            self.q,
            (
                2.0 * self.scene.range_m.0 / C,
                2.0 * self.scene.range_m.1 / C,
            ),
            (
                -2.0 * self.scene.speed_mps.1 / lambda,
                2.0 * self.scene.speed_mps.1 / lambda,
            ),
            (
                self.scene.angle_deg.0.to_radians(),
                self.scene.angle_deg.1.to_radians(),
            ),
        )
    }

    /// Matching gates for an estimation-time system config.
    pub fn gates_for(&self, cfg: &SystemConfig) -> Gates {
        match &self.gates {
            Some(g) => Gates {
                range_m: g.range_m,
                velocity_mps: g.velocity_mps,
                angle_rad: g.angle_deg.to_radians(),
            },
            None => Gates::half_rayleigh(cfg),
        }
    }
}

// ─── Scene drawing ───────────────────────────────────────────────────────────

fn draw_gain<R: Rng + ?Sized>(
    model: &GainModel,
    range_m: f64,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Complex64 {
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let amp = match model {
        GainModel::UnitModulus => 1.0,
        GainModel::RadarEquation {
            rcs_m2,
            range_ref_m,
            rcs_ref_m2,
        } => {
            let cal = radar_calibration(*range_ref_m, *rcs_ref_m2, cfg);
            radar_amplitude(range_m, *rcs_m2, cal, cfg)
        }
    };
    Complex64::from_polar(amp, phase)
}

/// Draw the ground-truth targets for one trial. `separation_m` (when set)
/// forces a two-target pair split in range only.
pub fn draw_targets<R: Rng + ?Sized>(
    spec: &SceneSpec,
    separation_m: Option<f64>,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<Target>> {
    let draw_velocity = |rng: &mut R| {
        let speed = rng.gen_range(spec.speed_mps.0..spec.speed_mps.1);
        if rng.gen::<bool>() {
            speed
        } else {
            -speed
        }
    };
    let angle_lo = spec.angle_deg.0.to_radians();
    let angle_hi = spec.angle_deg.1.to_radians();
    if let Some(sep) = separation_m {
        if spec.n_targets != 2 {
            return Err(Error::Config("separation scenes need exactly two targets".into()));
        }
        if !(sep > 0.0 && sep < spec.range_m.1 - spec.range_m.0) {
            return Err(Error::Config(format!(
                "separation {sep} m does not fit the range interval"
            )));
        }
        let r = rng.gen_range(spec.range_m.0..spec.range_m.1 - sep);
        let v = draw_velocity(rng);
        let a = rng.gen_range(angle_lo..angle_hi);
        let g1 = draw_gain(&spec.gain_model, r, cfg, rng);
        let g2 = draw_gain(&spec.gain_model, r + sep, cfg, rng);
        return Ok(vec![
            Target::new(r, v, a, g1),
            Target::new(r + sep, v, a, g2),
        ]);
    }
    Ok((0..spec.n_targets)
        .map(|_| {
            let r = rng.gen_range(spec.range_m.0..spec.range_m.1);
            let v = draw_velocity(rng);
            let a = rng.gen_range(angle_lo..angle_hi);
            let g = draw_gain(&spec.gain_model, r, cfg, rng);
            Target::new(r, v, a, g)
        })
        .collect())
}

/// Scale the clutter gains by a common factor so the scene hits the target
/// SCNR exactly (given the already-fixed noise variance).
pub(crate) fn scale_clutter_to_scnr(
    clutter: &mut [Target],
    p_target: f64,
    noise_var: f64,
    p_clutter_raw: f64,
    scnr_db: f64,
) -> Result<()> {
    let budget = p_target / 10f64.powf(scnr_db / 10.0) - noise_var;
    if budget <= 0.0 {
        return Err(Error::Config(format!(
            "SCNR {scnr_db} dB is unreachable: noise alone already exceeds the interference budget"
        )));
    }
    if p_clutter_raw <= 0.0 {
        return Err(Error::Numeric("clutter scaling needs nonzero raw clutter power".into()));
    }
    let factor = (budget / p_clutter_raw).sqrt();
    for t in clutter.iter_mut() {
        t.gain_re *= factor;
        t.gain_im *= factor;
    }
    Ok(())
}

/// Everything one trial needs: the generative scene, the raw observation,
/// and the block estimation actually consumes (suppressed and trimmed when
/// clutter suppression is on).
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub scene: Scene,
    pub raw: ObservationBlock,
    pub est: ObservationBlock,
}

/// Build the scene and observations for trial `trial` of axis point
/// `axis_idx`. Deterministic given the config: the trial seed is derived
/// from (master seed, axis index, trial index).
pub fn prepare_trial(sc: &ScenarioConfig, axis_idx: usize, trial: usize) -> Result<TrialSetup> {
    let axis_value = *sc
        .sweep
        .values
        .get(axis_idx)
        .ok_or_else(|| Error::Config(format!("axis index {axis_idx} out of range")))?;
    let seed = derive_seed(sc.seed, &[axis_idx as u64, trial as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &sc.system;

    let snr_db = match sc.sweep.axis {
        Axis::SnrDb => axis_value,
        _ => sc.snr_db,
    };
    let separation = match sc.sweep.axis {
        Axis::SeparationM => Some(axis_value),
        _ => sc.scene.separation_m,
    };

    let targets = draw_targets(&sc.scene, separation, cfg, &mut rng)?;
    // Clutter scenarios repeat the frame across slow time so static returns
    // are symbol-static and the background filter can cancel them.
    let x = if sc.clutter.is_some() {
        generate_repeated_symbols(cfg, &mut rng)
    } else {
        generate_symbols(cfg, &mut rng)
    };
    let noise_var = noise_var_for_snr(&targets, &x, cfg, snr_db)?;

    let clutter = match &sc.clutter {
        Some(cc) => {
            let mut drawn = generate_clutter(cc, cfg, &mut rng)?;
            if sc.sweep.axis == Axis::ScnrDb {
                let p_t = mean_echo_power(&targets, &x, cfg)?;
                let p_c = mean_echo_power(&drawn, &x, cfg)?;
                scale_clutter_to_scnr(&mut drawn, p_t, noise_var, p_c, axis_value)?;
            }
            drawn
        }
        None => vec![],
    };

    let scene = Scene {
        targets,
        clutter,
        noise_var,
    };
    let raw = synthesize(&scene, &x, cfg, &mut rng);

    let est = if sc.suppress_clutter {
        let cc = sc.clutter.as_ref().expect("validated");
        suppressed_block(&raw, cc)?
    } else {
        raw.clone()
    };

    Ok(TrialSetup { scene, raw, est })
}

/// Background-subtract an observation block and trim the filter transient,
/// yielding the block estimation should consume.
pub fn suppressed_block(raw: &ObservationBlock, cc: &ClutterConfig) -> Result<ObservationBlock> {
    let (filtered, k_start) = suppress(&raw.y, &raw.sys, cc.alpha, cc.transient_symbols)?;
    let (y, x, sys) = trim_symbols(&filtered, &raw.x, &raw.sys, k_start)?;
    Ok(ObservationBlock { sys, x, y })
}

/// Matched-energy acceptance floor for warm-start representatives, in units
/// of the estimated per-entry noise power. The strongest of the thousands
/// of noise-only atoms the pursuit scans reaches roughly `ln(#atoms) ≈ 9`
/// times the per-atom mean, so a pick must clear that with margin before it
/// may occupy a slot. A genuine scatterer passes as long as its fully
/// integrated SNR exceeds the same ~14 dB, orders of magnitude below the
/// operating range.
const NOISE_FLOOR_FACTOR: f64 = 25.0;

/// Merge pursuit selections that explain the same scatterer, keeping the
/// strongest; `cands` must arrive sorted strongest-first.
///
/// An off-grid scatterer leaks across several of the pursuit's selections,
/// and seeding those as separate slots plants a degenerate gain-split the
/// chain consolidates only slowly. Two distinct leakage signatures need
/// merging. Neighboring-cell selections bracket an off-grid scatterer while
/// being nearly orthogonal to each other (one cell is the kernel's first
/// null), so they are caught by a position gate of 1.5 cells; since the
/// half-wavelength array response is periodic in sin(bearing) with period
/// 2, the bearing part of that gate is a wrapped sin-space distance, which
/// makes a pick near one endfire edge merge with its grating alias near the
/// other. Sidelobe selections sit far away in parameter space but respond
/// almost collinearly, so they are caught by an atom-correlation gate.
fn cluster_reps(
    cands: &[Target],
    block: &ObservationBlock,
    cell: &crate::baselines::RayleighCells,
) -> Vec<Target> {
    let sin_cell = 2.0 / block.sys.n_antennas as f64;
    let mut reps: Vec<Target> = Vec::new();
    let mut rep_atoms: Vec<Vec<Complex64>> = Vec::new();
    for t in cands {
        let near = reps.iter().any(|r| {
            let dsin = (r.angle_rad.sin() - t.angle_rad.sin()).abs();
            (r.range_m - t.range_m).abs() < 1.5 * cell.range_m
                && (r.velocity_mps - t.velocity_mps).abs() < 1.5 * cell.velocity_mps
                && dsin.min(2.0 - dsin) < 1.5 * sin_cell
        });
        if near {
            continue;
        }
        let a = atom(
            t.delay_s(),
            t.doppler_hz(&block.sys),
            t.angle_rad,
            &block.sys,
            &block.x,
        );
        let nrm = a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let collinear = rep_atoms.iter().any(|ra| {
            let dot: Complex64 = ra.iter().zip(&a).map(|(u, v)| u.conj() * v).sum();
            let ra_nrm = ra.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            dot.norm() >= 0.35 * (ra_nrm * nrm).max(1e-300)
        });
        if !collinear {
            reps.push(t.clone());
            rep_atoms.push(a);
        }
    }
    reps
}

/// Observation minus every representative's refitted contribution except
/// the `skip`-th (pass `reps.len()` to subtract all of them).
fn loo_residual(
    block: &ObservationBlock,
    reps: &[Target],
    coefs: &[Complex64],
    skip: usize,
) -> Vec<Complex64> {
    let mut res = block.y.clone();
    for (j, (t, c)) in reps.iter().zip(coefs).enumerate() {
        if j == skip {
            continue;
        }
        let a = atom(
            t.delay_s(),
            t.doppler_hz(&block.sys),
            t.angle_rad,
            &block.sys,
            &block.x,
        );
        for (rv, av) in res.iter_mut().zip(&a) {
            *rv -= c * av;
        }
    }
    res
}

/// One matched-filter descent pass over all representatives,
/// strongest-first, refitting the ensemble before each descent so later
/// representatives climb a residual no longer distorted by earlier ones'
/// position errors.
fn refine_all(
    reps: &mut [Target],
    block: &ObservationBlock,
    cell: &crate::baselines::RayleighCells,
    pc: &PriorConfig,
) -> Result<()> {
    for i in 0..reps.len() {
        let (c_all, _) = refit_gains(&block.y, &block.x, &block.sys, reps)?;
        let res = loo_residual(block, reps, &c_all, i);
        refine_position(&res, &block.x, &block.sys, &mut reps[i], cell, pc);
    }
    Ok(())
}

/// Build the chain's starting state from a coarse-grid pursuit fit of the
/// observation.
///
/// The sampler refines positions locally: its per-coordinate proposal noise
/// equilibrates near the Rayleigh-cell scale, so a slot only acquires a
/// target whose position it already straddles to within about a cell. A
/// cold-started chain must wait for slots to diffuse into those cells — the
/// joint (delay, Doppler, angle) cell occupies a fraction of order `1e-4`
/// of the feasible box, far too rare inside the iteration budget. Seeding
/// slots on the coarse pursuit solution — grid positions plus their joint
/// least-squares gains — starts the chain inside the basins and near the
/// conditional mode, so burn-in spends its budget on gridless refinement
/// instead of a search the proposal kernel cannot perform. Slots beyond the
/// pursuit's selections keep prior-drawn positions with idle-scale gains,
/// matching the gain fluctuations of an unoccupied slot at the starting
/// precision; the precision itself starts at the pursuit's residual power,
/// the value the likelihood supports before any refinement. Model order is
/// untouched: every slot stays free, and shrinkage decides which ones carry
/// energy after burn-in.
pub fn warm_start_state(
    block: &ObservationBlock,
    pc: &PriorConfig,
    sc: &SamplerConfig,
    seed: u64,
) -> Result<ParamState> {
    let h = block.sys.n_entries();
    let gamma = gamma_exponent(sc.batch_size.min(h), h, sc.upsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ParamState::init_from_prior(pc, &mut rng);

    let grid = GridSpec::coarse(&block.sys, pc);
    let fit = omp(
        &block.y,
        &block.x,
        &block.sys,
        &grid,
        StopRule::MaxTargets(pc.n_slots),
    )?;

    let cell = rayleigh_cells(&block.sys);
    let mut sel = fit.detection.targets.clone();
    sel.sort_by(|a, b| {
        b.gain()
            .norm_sqr()
            .partial_cmp(&a.gain().norm_sqr())
            .expect("finite gains")
    });
    let mut reps = cluster_reps(&sel, block, &cell);

    // Noise-floor cut: at low SNR the pursuit fills its selection budget
    // with atoms that explain nothing but the realized noise, and slots
    // seeded on those start the chain in a glassy many-spurious-modes
    // regime. Each representative must beat the noise level by a matched
    // energy test against the raw observation; the test is immune to the
    // coefficient inflation a joint least-squares fit of near-collinear
    // junk atoms produces. The weakest scene still keeps one
    // representative: an estimator asked about hopeless data should return
    // its best guess, not nothing.
    if !reps.is_empty() {
        let (_, r0) = refit_gains(&block.y, &block.x, &block.sys, &reps)?;
        let sigma2 = (r0 * r0) / h as f64;
        let strongest = reps[0].clone();
        reps.retain(|t| {
            matched_energy(&block.y, &block.x, &block.sys, t) >= NOISE_FLOOR_FACTOR * sigma2
        });
        if reps.is_empty() {
            reps.push(strongest);
        }
    }

    // A representative inherits its grid node's position, up to half a cell
    // off the scatterer it explains, which strands a sizable fraction of that
    // scatterer's energy in the residual. During burn-in that leftover is
    // exactly what a wandering unoccupied slot can latch onto, planting a
    // gain split between two nearly collinear slots that shrinkage dissolves
    // only slowly. A short matched-filter descent inside each
    // representative's cell removes the leftover before the chain starts.
    refine_all(&mut reps, block, &cell, pc)?;

    // The descents move representatives off their grid nodes, and two that
    // bracketed one scatterer from adjacent cells can converge into the
    // same basin. Re-cluster at the refined positions, strongest first by
    // refitted energy.
    if reps.len() > 1 {
        let (c_ref, _) = refit_gains(&block.y, &block.x, &block.sys, &reps)?;
        let mut order: Vec<usize> = (0..reps.len()).collect();
        order.sort_by(|&a, &b| {
            c_ref[b]
                .norm_sqr()
                .partial_cmp(&c_ref[a].norm_sqr())
                .expect("finite gains")
        });
        let resorted: Vec<Target> = order.iter().map(|&i| reps[i].clone()).collect();
        reps = cluster_reps(&resorted, block, &cell);
    }

    // Recruitment: two scatterers inside one clustering gate — the
    // super-resolution regime — enter as a single merged representative
    // near their midpoint, stranding the pair's antisymmetric energy mode
    // in the residual. Whenever the residual still holds a peak above the
    // noise floor, seed a fresh representative on it, descend it against
    // that residual, and let another ensemble pass pull the earlier
    // representatives off the midpoint onto their own scatterers. On a
    // fully explained observation the first pick already sits at the noise
    // maximum and the loop exits immediately.
    while reps.len() < pc.n_slots {
        let (c_now, r_now) = refit_gains(&block.y, &block.x, &block.sys, &reps)?;
        let res = loo_residual(block, &reps, &c_now, reps.len());
        let sigma2 = (r_now * r_now) / h as f64;
        let pick = omp(
            &res,
            &block.x,
            &block.sys,
            &grid,
            StopRule::MaxTargets(1),
        )?;
        let Some(t) = pick.detection.targets.first() else {
            break;
        };
        let mut t = t.clone();
        refine_position(&res, &block.x, &block.sys, &mut t, &cell, pc);
        if matched_energy(&res, &block.x, &block.sys, &t) < NOISE_FLOOR_FACTOR * sigma2 {
            break;
        }
        reps.push(t);
        refine_all(&mut reps, block, &cell, pc)?;
    }

    // Joint refit at the refined representatives: starting the gains at
    // their conditional least-squares values removes the transient during
    // which a still-growing slot sheds energy onto its neighbors.
    let (mut coefs, mut r_norm) = refit_gains(&block.y, &block.x, &block.sys, &reps)?;

    // Ghost pruning: a sidelobe or mirror-bearing selection that survived
    // clustering loses its explanatory power once the real representative
    // sits on the scatterer, and its refitted coefficient collapses. Slots
    // seeded on such ghosts would hold misplaced energy the chain then has
    // to melt. Representatives whose refitted energy falls below a small
    // fraction of the strongest one's — or below the noise floor measured
    // on the post-refinement residual — revert to idle slots.
    let sigma2 = (r_norm * r_norm) / h as f64;
    let e_max = coefs.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..reps.len())
        .filter(|&i| {
            coefs[i].norm_sqr() >= 0.0225 * e_max
                && matched_energy(&block.y, &block.x, &block.sys, &reps[i])
                    >= NOISE_FLOOR_FACTOR * sigma2
        })
        .collect();
    if keep.is_empty() && !reps.is_empty() {
        let top = (0..reps.len())
            .max_by(|&a, &b| {
                coefs[a]
                    .norm_sqr()
                    .partial_cmp(&coefs[b].norm_sqr())
                    .expect("finite gains")
            })
            .expect("nonempty");
        keep.push(top);
    }
    if keep.len() < reps.len() {
        reps = keep.iter().map(|&i| reps[i].clone()).collect();
        let (c2, r2) = refit_gains(&block.y, &block.x, &block.sys, &reps)?;
        coefs = c2;
        r_norm = r2;
    }
    for (i, (t, c)) in reps.iter().zip(&coefs).enumerate() {
        state.delay_s[i] = clamp_interior(t.delay_s(), pc.delay_s.min, pc.delay_s.max);
        state.doppler_hz[i] =
            clamp_interior(t.doppler_hz(&block.sys), pc.doppler_hz.min, pc.doppler_hz.max);
        state.angle_rad[i] = clamp_interior(t.angle_rad, pc.angle_rad.min, pc.angle_rad.max);
        state.gain_re[i] = c.re;
        state.gain_im[i] = c.im;
    }

    let p_res = r_norm * r_norm / h as f64;
    if p_res > 0.0 {
        state.xi = clamp_interior(1.0 / p_res, pc.xi_min, pc.xi_max);
        let temper = (h as f64).powf(gamma);
        let comp_std = (p_res / (2.0 * temper * block.sys.n_antennas as f64)).sqrt();
        for i in reps.len()..pc.n_slots {
            let z_re: f64 = rng.sample(rand_distr::StandardNormal);
            let z_im: f64 = rng.sample(rand_distr::StandardNormal);
            state.gain_re[i] = comp_std * z_re;
            state.gain_im[i] = comp_std * z_im;
        }
    }
    Ok(state)
}

/// Clamp `v` strictly inside `(lo, hi)` with a relative margin, so boundary
/// values stay feasible under the sampler's open-interval check.
fn clamp_interior(v: f64, lo: f64, hi: f64) -> f64 {
    let margin = 1e-9 * (hi - lo).abs().max(1e-300);
    v.clamp(lo + margin, hi - margin)
}

/// Energy a rank-one fit at position `t` extracts from `res`:
/// `|<atom, res>|^2 / ||atom||^2`.
fn matched_energy(res: &[Complex64], x: &[Complex64], sys: &SystemConfig, t: &Target) -> f64 {
    let a = atom(t.delay_s(), t.doppler_hz(sys), t.angle_rad, sys, x);
    let dot: Complex64 = a.iter().zip(res).map(|(u, v)| u.conj() * v).sum();
    let nrm: f64 = a.iter().map(|v| v.norm_sqr()).sum();
    if nrm > 0.0 {
        dot.norm_sqr() / nrm
    } else {
        0.0
    }
}

/// Coordinate pattern search maximizing the matched-filter energy of `t`
/// against `res`, at shrinking step sizes down to a small fraction of a
/// resolution cell. Stays inside the prior's feasible box.
fn refine_position(
    res: &[Complex64],
    x: &[Complex64],
    sys: &SystemConfig,
    t: &mut Target,
    cell: &crate::baselines::RayleighCells,
    pc: &PriorConfig,
) {
    let r_lo = C * pc.delay_s.min / 2.0;
    let r_hi = C * pc.delay_s.max / 2.0;
    let v_lo = sys.wavelength_m() * pc.doppler_hz.min / 2.0;
    let v_hi = sys.wavelength_m() * pc.doppler_hz.max / 2.0;
    let mut best = matched_energy(res, x, sys, t);
    let mut evals = 1usize;
    for shrink in [0.25_f64, 0.0625, 0.015_625] {
        let steps = [
            cell.range_m * shrink,
            cell.velocity_mps * shrink,
            cell.angle_rad * shrink,
        ];
        let mut moved = true;
        while moved && evals < 400 {
            moved = false;
            for dim in 0..3 {
                for sgn in [1.0, -1.0] {
                    loop {
                        let mut cand = t.clone();
                        match dim {
                            0 => cand.range_m = (cand.range_m + sgn * steps[0]).clamp(r_lo, r_hi),
                            1 => {
                                cand.velocity_mps =
                                    (cand.velocity_mps + sgn * steps[1]).clamp(v_lo, v_hi)
                            }
                            _ => {
                                cand.angle_rad = (cand.angle_rad + sgn * steps[2])
                                    .clamp(pc.angle_rad.min, pc.angle_rad.max)
                            }
                        }
                        let s = matched_energy(res, x, sys, &cand);
                        evals += 1;
                        if s > best && evals < 400 {
                            *t = cand;
                            best = s;
                            moved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Run one method on a prepared block. The estimation seed derives from the
/// trial seed so methods never perturb each other's randomness.
pub fn estimate_block(
    sc: &ScenarioConfig,
    method: Method,
    est: &ObservationBlock,
    axis_idx: usize,
    trial: usize,
) -> Result<DetectionResult> {
    let seed = derive_seed(
        sc.seed,
        &[axis_idx as u64, trial as u64, 0x5b, method as u64],
    );
    let mut pc = sc.prior_config();
    pc.n_slots = sc.q;
    match method {
        Method::SblMcmc => {
            let init = warm_start_state(est, &pc, &sc.sampler, derive_seed(seed, &[0x11]))?;
            let chain = run_chains_from(est, &pc, &sc.sampler, seed, &init)?;
            detect(&chain.estimate, sc.sigma_thr, &est.sys)
        }
        Method::Omp => {
            let grid = match &sc.grid {
                Some(g) => g.clone(),
                None => GridSpec::fine(&est.sys, &pc),
            };
            let stop = sc
                .omp_stop
                .unwrap_or(StopRule::MaxTargets(sc.scene.n_targets));
            Ok(omp(&est.y, &est.x, &est.sys, &grid, stop)?.detection)
        }
        Method::Periodogram => {
            let grid = match &sc.grid {
                Some(g) => g.clone(),
                None => GridSpec::coarse(&est.sys, &pc),
            };
            let map = periodogram(&est.y, &est.x, &est.sys, &grid)?;
            Ok(DetectionResult {
                targets: map.peaks(&est.sys, sc.scene.n_targets),
            })
        }
    }
}

// ─── Sweep execution ─────────────────────────────────────────────────────────

/// One aggregated CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub method: String,
    pub p_cd: Option<f64>,
    pub rmse_range_m: Option<f64>,
    pub rmse_velocity_mps: Option<f64>,
    pub rmse_angle_deg: Option<f64>,
    pub bcrb_range_m: Option<f64>,
    pub bcrb_velocity_mps: Option<f64>,
    pub bcrb_angle_deg: Option<f64>,
    pub trials: usize,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

struct TrialRecord {
    scores: Vec<TrialScore>,
    wall_s: f64,
}

fn run_one_trial(sc: &ScenarioConfig, axis_idx: usize, trial: usize) -> Result<TrialRecord> {
    let t0 = std::time::Instant::now();
    let setup = prepare_trial(sc, axis_idx, trial)?;
    let gates = sc.gates_for(&setup.est.sys);
    let mut scores = Vec::with_capacity(sc.methods.len());
    for &method in &sc.methods {
        let detection = estimate_block(sc, method, &setup.est, axis_idx, trial)?;
        scores.push(score_trial(
            &setup.scene.targets,
            &detection.targets,
            &gates,
        ));
    }
    Ok(TrialRecord {
        scores,
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

/// Representative noise variance implied by the scenario SNR for
/// unit-modulus targets: the expected per-entry echo power of L unit-gain
/// targets is L * N.
fn representative_noise_var(sc: &ScenarioConfig, snr_db: f64) -> f64 {
    let p_sig = sc.scene.n_targets as f64 * sc.system.n_antennas as f64;
    p_sig / 10f64.powf(snr_db / 10.0)
}

fn bound_columns(sc: &ScenarioConfig, axis_idx: usize, axis_value: f64) -> Result<BcrbBounds> {
    let spec = sc.bounds.as_ref().expect("caller checked");
    let snr_db = match sc.sweep.axis {
        Axis::SnrDb => axis_value,
        _ => sc.snr_db,
    };
    let mut pc = sc.prior_config();
    pc.n_slots = sc.q;
    let draw = match spec.mode {
        BoundDrawMode::Hierarchical => DrawSpec::Hierarchical,
        BoundDrawMode::GenerativeMatched => DrawSpec::Fixed {
            gain_modulus: 1.0,
            xi: 1.0 / representative_noise_var(sc, snr_db),
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, &[axis_idx as u64, 0xb0]));
    let x = generate_symbols(&sc.system, &mut rng);
    bcrb_monte_carlo(
        &pc,
        &draw,
        sc.scene.n_targets,
        &x,
        &sc.system,
        spec.draws,
        derive_seed(sc.seed, &[axis_idx as u64, 0xb1]),
    )
}

/// Run the full Monte-Carlo sweep. Trials execute in parallel (caller
/// configures the thread pool); aggregation is an ordered reduction, so the
/// result is identical regardless of thread count.
pub fn run_sweep(sc: &ScenarioConfig) -> Result<SweepResult> {
    sc.validate()?;
    let mut rows = Vec::new();
    for (axis_idx, &axis_value) in sc.sweep.values.iter().enumerate() {
        let records: Vec<TrialRecord> = (0..sc.trials)
            .into_par_iter()
            .map(|trial| run_one_trial(sc, axis_idx, trial))
            .collect::<Result<Vec<_>>>()?;
        let mean_wall: f64 =
            records.iter().map(|r| r.wall_s).sum::<f64>() / records.len() as f64;
        eprintln!(
            "[sweep] {} = {}: {} trials, mean {:.2} s/trial",
            sc.sweep.axis.name(),
            axis_value,
            sc.trials,
            mean_wall
        );

        let bounds = if sc.bounds.is_some()
            && sc.clutter.is_none()
            && sc.methods.contains(&Method::SblMcmc)
        {
            Some(bound_columns(sc, axis_idx, axis_value)?)
        } else {
            None
        };

        for (mi, &method) in sc.methods.iter().enumerate() {
            let scores: Vec<&TrialScore> = records.iter().map(|r| &r.scores[mi]).collect();
            let qualifies = |s: &TrialScore| match sc.scoring {
                Scoring::Strict => s.correct,
                Scoring::Tolerant => s.all_truths_matched,
            };
            let n_ok = scores.iter().filter(|s| qualifies(s)).count();
            let p_cd = n_ok as f64 / scores.len() as f64;
            // RMSE over matched pairs of qualifying trials only, so missed
            // detections cannot silently skew the error statistics.
            let qualifying: Vec<TrialScore> = scores
                .iter()
                .filter(|s| qualifies(s))
                .map(|s| (*s).clone())
                .collect();
            let rmse = crate::detector::rmse_over_trials(&qualifying);
            let is_sbl = method == Method::SblMcmc;
            rows.push(SweepRow {
                axis_value,
                method: method.to_string(),
                p_cd: Some(p_cd),
                rmse_range_m: rmse.map(|r| r.0),
                rmse_velocity_mps: rmse.map(|r| r.1),
                rmse_angle_deg: rmse.map(|r| r.2.to_degrees()),
                bcrb_range_m: bounds.as_ref().filter(|_| is_sbl).map(|b| b.range_rms_m),
                bcrb_velocity_mps: bounds
                    .as_ref()
                    .filter(|_| is_sbl)
                    .map(|b| b.velocity_rms_mps),
                bcrb_angle_deg: bounds
                    .as_ref()
                    .filter(|_| is_sbl)
                    .map(|b| b.angle_rms_rad.to_degrees()),
                trials: sc.trials,
                wall_time_s: sc.record_wall_time.then_some(mean_wall),
            });
        }
    }
    Ok(SweepResult {
        axis: sc.sweep.axis,
        rows,
    })
}

/// Bound-only rows across the sweep axis (the `bcrb` subcommand).
pub fn run_bounds(sc: &ScenarioConfig) -> Result<SweepResult> {
    sc.validate()?;
    if sc.bounds.is_none() {
        return Err(Error::Config("bounds are disabled in this config".into()));
    }
    let mut rows = Vec::new();
    for (axis_idx, &axis_value) in sc.sweep.values.iter().enumerate() {
        let b = bound_columns(sc, axis_idx, axis_value)?;
        rows.push(SweepRow {
            axis_value,
            method: "s-bcrb".into(),
            p_cd: None,
            rmse_range_m: None,
            rmse_velocity_mps: None,
            rmse_angle_deg: None,
            bcrb_range_m: Some(b.range_rms_m),
            bcrb_velocity_mps: Some(b.velocity_rms_mps),
            bcrb_angle_deg: Some(b.angle_rms_rad.to_degrees()),
            trials: sc.bounds.as_ref().map(|s| s.draws).unwrap_or(0),
            wall_time_s: None,
        });
    }
    Ok(SweepResult {
        axis: sc.sweep.axis,
        rows,
    })
}

// ─── CSV output ──────────────────────────────────────────────────────────────

/// Format with six significant digits, plain decimal where reasonable and
/// scientific notation for extreme magnitudes. Deterministic.
pub fn format_sig(v: f64) -> String {
    const SIG: usize = 6;
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if exp >= -4 && exp < SIG as i32 {
        let decimals = (SIG as i32 - 1 - exp).max(0) as usize;
        trim_trailing_zeros(&format!("{v:.decimals$}"))
    } else {
        let s = format!("{:.*e}", SIG - 1, v);
        // Trim zeros in the mantissa only: "1.230000e-7" -> "1.23e-7".
        match s.split_once('e') {
            Some((mantissa, e)) => format!("{}e{}", trim_trailing_zeros(mantissa), e),
            None => s,
        }
    }
}

fn trim_trailing_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

pub const CSV_HEADER: &str = "axis,axis_value,method,p_cd,rmse_range_m,rmse_velocity_mps,\
rmse_angle_deg,bcrb_range_m,bcrb_velocity_mps,bcrb_angle_deg,trials,wall_time_s";

/// Render the sweep result as CSV text (UTF-8, '\n' newlines, 6 significant
/// digits, empty fields for absent values).
pub fn csv_string(res: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_default();
    for r in &res.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            res.axis.name(),
            format_sig(r.axis_value),
            r.method,
            opt(r.p_cd),
            opt(r.rmse_range_m),
            opt(r.rmse_velocity_mps),
            opt(r.rmse_angle_deg),
            opt(r.bcrb_range_m),
            opt(r.bcrb_velocity_mps),
            opt(r.bcrb_angle_deg),
            r.trials,
            opt(r.wall_time_s),
        ));
    }
    out
}

/// Write the CSV to disk, surfacing I/O failures with the path.
pub fn write_csv(res: &SweepResult, path: &Path) -> Result<()> {
    let text = csv_string(res);
    let mut f = std::fs::File::create(path).map_err(|e| io_with_path(e, path))?;
    f.write_all(text.as_bytes())
        .map_err(|e| io_with_path(e, path))?;
    Ok(())
}

fn io_with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

// ─── Observation dumps (simulate / estimate subcommands) ────────────────────

/// Serializable record of one simulated trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationDump {
    pub system: SystemConfig,
    pub truth: Vec<Target>,
    pub clutter: Vec<Target>,
    pub noise_var: f64,
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

impl ObservationDump {
    pub fn from_setup(setup: &TrialSetup) -> Self {
        Self {
            system: setup.raw.sys.clone(),
            truth: setup.scene.targets.clone(),
            clutter: setup.scene.clutter.clone(),
            noise_var: setup.scene.noise_var,
            x: setup.raw.x.clone(),
            y: setup.raw.y.clone(),
        }
    }

    pub fn block(&self) -> ObservationBlock {
        ObservationBlock {
            sys: self.system.clone(),
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}
