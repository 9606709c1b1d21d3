//! Model-order selection, physical-unit extraction, and trial scoring.
//!
//! The sampler returns posterior-mean parameters for all Q candidate slots.
//! Detection reads the model order off the slot energies: slots are ranked by
//! |b| and the smallest prefix whose cumulative energy reaches a fraction
//! `sigma_thr` of the total is declared present. Estimates convert to range,
//! velocity, and bearing via `r = c tau / 2`, `v = lambda f_D / 2`.
//!
//! Scoring matches estimates to ground truth one-to-one under per-dimension
//! gates. A pair may match only if range, velocity, and angle errors are all
//! inside their gates; among assignments the scorer maximizes the number of
//! matches, breaking ties by the smallest total gate-normalized squared
//! distance. Small problems are solved exactly by enumeration, larger ones
//! greedily.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::rayleigh_cells;
use crate::posterior::ParamState;
use crate::waveform::{SystemConfig, Target, C};
use crate::{Error, Result};

/// Exact assignment is enumerated up to this many elements on the smaller
/// side; beyond it the scorer falls back to greedy matching.
const EXACT_ASSIGN_LIMIT: usize = 6;

/// Detected scatterers in physical units, strongest first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub targets: Vec<Target>,
}

impl DetectionResult {
    pub fn n_detected(&self) -> usize {
        self.targets.len()
    }
}

/// Per-dimension matching gates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gates {
    pub range_m: f64,
    pub velocity_mps: f64,
    pub angle_rad: f64,
}

impl Gates {
    /// Default gates: half a Rayleigh resolution cell per dimension.
    pub fn half_rayleigh(cfg: &SystemConfig) -> Self {
        let cell = rayleigh_cells(cfg);
        Self {
            range_m: 0.5 * cell.range_m,
            velocity_mps: 0.5 * cell.velocity_mps,
            angle_rad: 0.5 * cell.angle_rad,
        }
    }
}

/// Declare the model order and extract the detected slots.
///
/// Slots are sorted by descending |b|; the reported set is the shortest
/// prefix reaching `sigma_thr` of the total slot energy. A state with all
/// gains at zero yields an empty detection.
///
/// # Errors
///
/// `sigma_thr` must lie in (0, 1].
pub fn detect(state: &ParamState, sigma_thr: f64, cfg: &SystemConfig) -> Result<DetectionResult> {
    if !(sigma_thr > 0.0 && sigma_thr <= 1.0) {
        return Err(Error::Numeric("sigma_thr must lie in (0, 1]".into()));
    }
    let q = state.n_slots();
    let mut order: Vec<usize> = (0..q).collect();
    let energy = |i: usize| state.gain(i).norm_sqr();
    order.sort_by(|&a, &b| energy(b).partial_cmp(&energy(a)).unwrap());
    let total: f64 = (0..q).map(energy).sum();
    if total <= 0.0 {
        return Ok(DetectionResult { targets: vec![] });
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for (h, &i) in order.iter().enumerate() {
        cum += energy(i);
        if cum >= sigma_thr * total {
            keep = h + 1;
            break;
        }
    }
    let lambda = cfg.wavelength_m();
    let targets = order[..keep]
        .iter()
        .map(|&i| {
            Target::new(
                C * state.delay_s[i] / 2.0,
                lambda * state.doppler_hz[i] / 2.0,
                state.angle_rad[i],
                Complex64::new(state.gain_re[i], state.gain_im[i]),
            )
        })
        .collect();
    Ok(DetectionResult { targets })
}

/// Outcome of matching one trial's detections against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialScore {
    pub n_true: usize,
    pub n_detected: usize,
    pub matched: usize,
    /// Every true target was matched within the gates.
    pub all_truths_matched: bool,
    /// Correct detection: the count is exact and every truth is matched.
    pub correct: bool,
    /// Squared errors of matched pairs, one entry per pair.
    pub sq_err_range_m2: Vec<f64>,
    pub sq_err_velocity_mps2: Vec<f64>,
    pub sq_err_angle_rad2: Vec<f64>,
}

/// Match detections to truths one-to-one under the gates and record
/// per-dimension squared errors for the matched pairs.
pub fn score_trial(truth: &[Target], detected: &[Target], gates: &Gates) -> TrialScore {
    let pair_cost = |t: &Target, e: &Target| -> Option<f64> {
        let dr = (t.range_m - e.range_m) / gates.range_m;
        let dv = (t.velocity_mps - e.velocity_mps) / gates.velocity_mps;
        let da = (t.angle_rad - e.angle_rad) / gates.angle_rad;
        if dr.abs() <= 1.0 && dv.abs() <= 1.0 && da.abs() <= 1.0 {
            Some(dr * dr + dv * dv + da * da)
        } else {
            None
        }
    };

    // Cost table indexed [truth][estimate].
    let costs: Vec<Vec<Option<f64>>> = truth
        .iter()
        .map(|t| detected.iter().map(|e| pair_cost(t, e)).collect())
        .collect();

    let small = truth.len().min(detected.len());
    let assignment = if small <= EXACT_ASSIGN_LIMIT {
        exact_assignment(&costs, truth.len(), detected.len())
    } else {
        greedy_assignment(&costs, truth.len(), detected.len())
    };

    let mut sq_r = Vec::new();
    let mut sq_v = Vec::new();
    let mut sq_a = Vec::new();
    let mut matched_truths = 0usize;
    for &(ti, ei) in &assignment {
        let (t, e) = (&truth[ti], &detected[ei]);
        matched_truths += 1;
        sq_r.push((t.range_m - e.range_m).powi(2));
        sq_v.push((t.velocity_mps - e.velocity_mps).powi(2));
        sq_a.push((t.angle_rad - e.angle_rad).powi(2));
    }
    let all_matched = matched_truths == truth.len();
    TrialScore {
        n_true: truth.len(),
        n_detected: detected.len(),
        matched: matched_truths,
        all_truths_matched: all_matched,
        correct: all_matched && detected.len() == truth.len(),
        sq_err_range_m2: sq_r,
        sq_err_velocity_mps2: sq_v,
        sq_err_angle_rad2: sq_a,
    }
}

/// Enumerate injections of the smaller side into the larger side, keeping
/// the assignment with the most gate-feasible pairs and, among those, the
/// least total cost. Returns matched (truth, estimate) pairs.
fn exact_assignment(
    costs: &[Vec<Option<f64>>],
    n_truth: usize,
    n_det: usize,
) -> Vec<(usize, usize)> {
    let truth_small = n_truth <= n_det;
    let (ns, nl) = if truth_small {
        (n_truth, n_det)
    } else {
        (n_det, n_truth)
    };
    let cost_at = |s: usize, l: usize| -> Option<f64> {
        if truth_small {
            costs[s][l]
        } else {
            costs[l][s]
        }
    };

    let mut best_pairs: Vec<(usize, usize)> = Vec::new();
    let mut best_key = (0usize, f64::INFINITY); // (matches, cost)
    let mut used = vec![false; nl];
    let mut current: Vec<Option<usize>> = vec![None; ns];

    fn recurse(
        s: usize,
        ns: usize,
        nl: usize,
        used: &mut [bool],
        current: &mut [Option<usize>],
        cost_at: &dyn Fn(usize, usize) -> Option<f64>,
        best_key: &mut (usize, f64),
        best_pairs: &mut Vec<(usize, usize)>,
        truth_small: bool,
    ) {
        if s == ns {
            let mut matches = 0usize;
            let mut total = 0.0;
            let mut pairs = Vec::new();
            for (si, li) in current.iter().enumerate() {
                if let Some(l) = li {
                    if let Some(c) = cost_at(si, *l) {
                        matches += 1;
                        total += c;
                        pairs.push(if truth_small { (si, *l) } else { (*l, si) });
                    }
                }
            }
            if matches > best_key.0 || (matches == best_key.0 && total < best_key.1) {
                *best_key = (matches, total);
                *best_pairs = pairs;
            }
            return;
        }
        for l in 0..nl {
            if !used[l] {
                used[l] = true;
                current[s] = Some(l);
                recurse(
                    s + 1,
                    ns,
                    nl,
                    used,
                    current,
                    cost_at,
                    best_key,
                    best_pairs,
                    truth_small,
                );
                used[l] = false;
                current[s] = None;
            }
        }
        // Leaving this element unassigned is only useful when the larger side
        // has been exhausted, which cannot happen for an injection; feasible
        // pairs never hurt because infeasible mappings cost nothing.
    }

    if ns == 0 {
        return best_pairs;
    }
    recurse(
        0,
        ns,
        nl,
        &mut used,
        &mut current,
        &cost_at,
        &mut best_key,
        &mut best_pairs,
        truth_small,
    );
    best_pairs
}

/// Greedy fallback: repeatedly take the cheapest feasible pair.
fn greedy_assignment(
    costs: &[Vec<Option<f64>>],
    n_truth: usize,
    n_det: usize,
) -> Vec<(usize, usize)> {
    let mut t_used = vec![false; n_truth];
    let mut e_used = vec![false; n_det];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for t in 0..n_truth {
            if t_used[t] {
                continue;
            }
            for e in 0..n_det {
                if e_used[e] {
                    continue;
                }
                if let Some(c) = costs[t][e] {
                    if best.map_or(true, |(_, _, bc)| c < bc) {
                        best = Some((t, e, c));
                    }
                }
            }
        }
        match best {
            Some((t, e, _)) => {
                t_used[t] = true;
                e_used[e] = true;
                pairs.push((t, e));
            }
            None => break,
        }
    }
    pairs
}

/// Root-mean-square errors aggregated over matched pairs of many trials.
/// Returns `(range_m, velocity_mps, angle_rad)`, `None` when no pairs
/// matched.
pub fn rmse_over_trials(scores: &[TrialScore]) -> Option<(f64, f64, f64)> {
    let mut n = 0usize;
    let (mut sr, mut sv, mut sa) = (0.0, 0.0, 0.0);
    for s in scores {
        n += s.sq_err_range_m2.len();
        sr += s.sq_err_range_m2.iter().sum::<f64>();
        sv += s.sq_err_velocity_mps2.iter().sum::<f64>();
        sa += s.sq_err_angle_rad2.iter().sum::<f64>();
    }
    if n == 0 {
        return None;
    }
    let inv = 1.0 / n as f64;
    Some(((sr * inv).sqrt(), (sv * inv).sqrt(), (sa * inv).sqrt()))
}
