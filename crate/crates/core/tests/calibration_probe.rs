//! End-to-end estimator behavior on testbed scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ronchi_core::em::{run_calibration, EmConfig, LikelihoodMode};
use ronchi_core::testbed::{make_scenario, TestbedSource};

fn run_one(
    scenario: &str,
    seed: u64,
    tweak: impl Fn(&mut EmConfig),
    noiseless: bool,
) -> ronchi_core::em::CalibrationTrace {
    let mut sc = make_scenario(scenario).unwrap();
    if noiseless {
        sc.map.noise_variance = vec![0.0; 3];
        sc.model.kernel.noise_variance = vec![1e-6; 3];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let true_x0: Vec<f64> = (0..3).map(|_| rng.random_range(-200.0..200.0)).collect();
    let mut source = TestbedSource { map: sc.map.clone(), true_x0 };
    let mut cfg = EmConfig { candidates: 256, ..EmConfig::default() };
    tweak(&mut cfg);
    run_calibration(&mut source, &sc.model, &cfg, &mut rng).unwrap()
}

#[test]
fn exact_prior_runs_converge() {
    let mut below_10_at_10 = 0;
    let runs = 10;
    for seed in 0..runs {
        let trace = run_one("exact-prior", 100 + seed, |_| {}, false);
        let errs: Vec<f64> = trace.steps.iter().filter_map(|s| s.error_norm).collect();
        let at10 = errs.get(10.min(errs.len() - 1)).cloned().unwrap_or(f64::INFINITY);
        let last = *errs.last().unwrap();
        eprintln!(
            "seed {seed}: steps {} err@0 {:.1} err@5 {:.1} err@10 {:.1} final {:.2}",
            errs.len(),
            errs[0],
            errs.get(5).cloned().unwrap_or(f64::NAN),
            at10,
            last
        );
        if at10 < 10.0 {
            below_10_at_10 += 1;
        }
    }
    eprintln!("below 10 nm at step 10: {below_10_at_10}/{runs}");
    assert!(below_10_at_10 * 2 >= runs, "{below_10_at_10}/{runs}");
}

#[test]
fn mismatch_03_full_vs_fixed_prior() {
    let mut full_terminal = Vec::new();
    let mut full_at20 = Vec::new();
    let mut base_terminal = Vec::new();
    let runs = 10;
    for seed in 0..runs {
        let tr_full = run_one("mismatch-0.3", 200 + seed, |c| c.convergence_threshold = 0.0, false);
        let tr_base = run_one(
            "mismatch-0.3",
            200 + seed,
            |c| { c.likelihood = LikelihoodMode::FixedPriorMean; c.convergence_threshold = 0.0; },
            false,
        );
        let ef: Vec<f64> = tr_full.steps.iter().filter_map(|s| s.error_norm).collect();
        let eb: Vec<f64> = tr_base.steps.iter().filter_map(|s| s.error_norm).collect();
        let fmt: Vec<String> = ef.iter().map(|e| format!("{e:.0}")).collect();
        eprintln!(
            "seed {seed}: full len {} @20 {:.2} final {:.2} | fixed final {:.2} | {}",
            ef.len(),
            ef.get(20).cloned().unwrap_or(*ef.last().unwrap()),
            ef.last().unwrap(),
            eb.last().unwrap(),
            fmt.join(" ")
        );
        full_at20.push(ef.get(20).cloned().unwrap_or(*ef.last().unwrap()));
        full_terminal.push(*ef.last().unwrap());
        base_terminal.push(*eb.last().unwrap());
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let m_at20 = med(&mut full_at20);
    let m_full = med(&mut full_terminal);
    let m_base = med(&mut base_terminal);
    eprintln!("median: full@20 {m_at20:.2} full terminal {m_full:.2} fixed terminal {m_base:.2}");
}

#[test]
fn noiseless_oracle_reaches_sub_nm() {
    let trace = run_one(
        "exact-prior",
        7,
        |c| {
            c.horizon = 10;
            c.perturb_sigma = 5.0;
            c.convergence_threshold = 0.0;
        },
        true,
    );
    let errs: Vec<f64> = trace.steps.iter().filter_map(|s| s.error_norm).collect();
    eprintln!("noiseless errors: {errs:?}");
    eprintln!("final: {}", errs.last().unwrap());
}

#[test]
fn zero_inputs_split_mass_between_mirror_modes() {
    let mut sc = make_scenario("exact-prior").unwrap();
    sc.map.noise_variance = vec![1e-6; 3];
    sc.model.kernel.noise_variance = vec![1e-4; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let true_x0 = vec![130.0, -90.0, 50.0];
    let mut source = TestbedSource { map: sc.map.clone(), true_x0: true_x0.clone() };
    let cfg = EmConfig { select_inputs: false, horizon: 12, convergence_threshold: 0.0, ..EmConfig::default() };
    let trace = run_calibration(&mut source, &sc.model, &cfg, &mut rng).unwrap();
    // Terminal weight mass near +x0 and -x0.
    let set = ronchi_core::em::CandidateSet::with_weights(
        trace.final_states.clone(),
        trace.final_weights.clone(),
    )
    .unwrap();
    let neg: Vec<f64> = true_x0.iter().map(|v| -v).collect();
    let radius = 60.0;
    let plus = set.mass_within(&true_x0, radius);
    let minus = set.mass_within(&neg, radius);
    eprintln!("mass near +x0: {plus:.3}, near -x0: {minus:.3}");
}
