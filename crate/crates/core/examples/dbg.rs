// Scratch diagnostics: per-trial error breakdown through the sweep path.
use isac_sbl::harness::{
    estimate_block, prepare_trial, warm_start_state, Method, ScenarioConfig,
};
use isac_sbl::sampler::run_chain_from;
use isac_sbl::waveform::C;

fn deep(trial: usize, snr: Option<f64>) {
    let mut sc = ScenarioConfig::default();
    sc.trials = 64;
    sc.seed = 7;
    sc.scene.n_targets = 1;
    sc.bounds = None;
    if let Some(s) = snr {
        sc.sweep.values = vec![s];
    }
    let setup = prepare_trial(&sc, 0, trial).unwrap();
    for truth in &setup.scene.targets {
        println!(
            "truth: r {:.3} v {:.3} th {:.3} |b| {:.3}, noise_var {:.4}",
            truth.range_m,
            truth.velocity_mps,
            truth.angle_rad.to_degrees(),
            truth.gain().norm(),
            setup.scene.noise_var
        );
    }
    let truth = &setup.scene.targets[0];
    let mut pc = sc.prior_config();
    pc.n_slots = sc.q;
    let init = warm_start_state(&setup.est, &pc, &sc.sampler, 0x99).unwrap();
    for q in 0..init.n_slots() {
        let b = init.gain(q).norm();
        if b > 0.02 {
            println!(
                "init slot {q}: |b| = {:.4}, r = {:.2}, v = {:.2}, th = {:.2}",
                b,
                C * init.delay_s[q] / 2.0,
                setup.est.sys.wavelength_m() * init.doppler_hz[q] / 2.0,
                init.angle_rad[q].to_degrees()
            );
        }
    }
    println!("init xi = {:.3}", init.xi);
    for cs in 0..6u64 {
        let r = run_chain_from(&setup.est, &pc, &sc.sampler, cs, &init).unwrap();
        let d = &r.diagnostics;
        let e = &r.estimate;
        print!(
            "chain {cs}: acc {:.2} oob {:.2} lp {:.1} xi {:.1} |",
            d.accepted as f64 / d.iterations as f64,
            d.out_of_bounds as f64 / d.iterations as f64,
            d.final_full_logpost,
            e.xi
        );
        for q in 0..e.n_slots() {
            let b = e.gain(q).norm();
            if b > 0.02 {
                print!(
                    " s{q}: b {:.3} ({:+.3}, {:+.3}, {:+.3})",
                    b,
                    C * e.delay_s[q] / 2.0 - truth.range_m,
                    setup.est.sys.wavelength_m() * e.doppler_hz[q] / 2.0 - truth.velocity_mps,
                    e.angle_rad[q].to_degrees() - truth.angle_rad.to_degrees()
                );
            }
        }
        println!();
    }
}

fn main() {
    if let Some(t) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        if std::env::args().nth(1).as_deref() == Some("deep") {
            deep(t, std::env::args().nth(3).and_then(|s| s.parse().ok()));
            return;
        }
    }
    let trials: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let mut sc = ScenarioConfig::default();
    sc.trials = trials;
    sc.seed = 7;
    sc.scene.n_targets = 1;
    sc.bounds = None;
    if let Some(snr) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        sc.sweep.values = vec![snr];
    }
    let mut sq = [0.0f64; 3];
    let mut n_ok = 0usize;
    for trial in 0..trials {
        let setup = prepare_trial(&sc, 0, trial).unwrap();
        let truth = &setup.scene.targets[0];
        let t0 = std::time::Instant::now();
        let det = estimate_block(&sc, Method::SblMcmc, &setup.est, 0, trial).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        // nearest detection in range
        let best = det
            .targets
            .iter()
            .min_by(|a, b| {
                (a.range_m - truth.range_m)
                    .abs()
                    .partial_cmp(&(b.range_m - truth.range_m).abs())
                    .unwrap()
            })
            .cloned();
        match best {
            Some(b) => {
                let er = b.range_m - truth.range_m;
                let ev = b.velocity_mps - truth.velocity_mps;
                let et = (b.angle_rad - truth.angle_rad).to_degrees();
                sq[0] += er * er;
                sq[1] += ev * ev;
                sq[2] += et * et;
                n_ok += 1;
                println!(
                    "trial {trial:2}: L={} truth th {:6.2} v {:6.2} | err r {:+.4} m, v {:+.4} m/s, th {:+.4} deg [{dt:.1} s]",
                    det.targets.len(),
                    truth.angle_rad.to_degrees(),
                    truth.velocity_mps,
                    er,
                    ev,
                    et
                );
            }
            None => println!("trial {trial:2}: NO DETECTION"),
        }
    }
    let n = n_ok.max(1) as f64;
    println!(
        "RMSE over {n_ok}: r {:.4} m, v {:.4} m/s, th {:.4} deg",
        (sq[0] / n).sqrt(),
        (sq[1] / n).sqrt(),
        (sq[2] / n).sqrt()
    );
}
