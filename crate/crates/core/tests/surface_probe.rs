//! Probe the candidate log-likelihood surface along a line through the truth
//! after a calibration run's trajectory has been collected.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ronchi_core::em::*;
use ronchi_core::gp::log_marginal_likelihood;
use ronchi_core::testbed::{make_scenario, TestbedSource};

#[test]
#[ignore]
fn likelihood_surface_after_run() {
    let seed: u64 = std::env::var("DIAG_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(204);
    let sc = make_scenario("mismatch-0.3").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let true_x0: Vec<f64> = (0..3).map(|_| rng.random_range(-200.0..200.0)).collect();
    let mut source = TestbedSource { map: sc.map.clone(), true_x0: true_x0.clone() };
    let cfg = EmConfig { candidates: 256, convergence_threshold: 0.0, ..EmConfig::default() };
    let trace = run_calibration(&mut source, &sc.model, &cfg, &mut rng).unwrap();
    let final_est = trace.steps.last().unwrap().estimate.clone();
    let final_err = trace.steps.last().unwrap().error_norm.unwrap();
    eprintln!("truth {true_x0:?}\nfinal est {final_est:?} err {final_err:.2}");

    // Rebuild the dataset the run saw (same rng consumption order).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: Vec<f64> = (0..3).map(|_| rng.random_range(-200.0..200.0)).collect();
    let mut source = TestbedSource { map: sc.map.clone(), true_x0: true_x0.clone() };
    let mut dataset = LatentDataset::new();
    let mut cum = vec![0.0; 3];
    let z0 = source.observe(&cum, &mut rng).unwrap();
    dataset.push(z0, cum.clone()).unwrap();
    let mut candidates =
        CandidateSet::sample_uniform(3, cfg.candidates, cfg.state_bound, &mut rng).unwrap();
    for step in trace.steps.iter() {
        if let Some(u) = &step.input {
            // Reproduce refinement + selection rng consumption.
            let out = em_iterate(&sc.model, &dataset, &candidates, &cfg).unwrap();
            candidates = refine_candidates(&out.candidates, &cfg, &mut rng).unwrap();
            let _ = select_input(&sc.model, &dataset, &candidates, &cfg, &mut rng).unwrap();
            for d in 0..3 {
                cum[d] += u[d];
            }
            let z = source.observe(&cum, &mut rng).unwrap();
            dataset.push(z, cum.clone()).unwrap();
        }
    }
    eprintln!("dataset size {}", dataset.len());
    let mut radii: Vec<f64> = dataset
        .cumulative()
        .iter()
        .map(|s| {
            (0..3)
                .map(|d| (true_x0[d] + s[d]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fmt: Vec<String> = radii.iter().map(|r| format!("{r:.0}")).collect();
    eprintln!("true-state radii visited (sorted): {}", fmt.join(" "));

    // Line scan: truth + t * dir where dir points toward the final estimate.
    let mut dir: Vec<f64> = final_est.iter().zip(&true_x0).map(|(a, b)| a - b).collect();
    let nrm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut dir {
        *v /= nrm.max(1e-9);
    }
    let ll_at = |x: &[f64]| {
        log_marginal_likelihood(&sc.model, dataset.latents(), dataset.cumulative(), x).unwrap()
    };
    let ll_truth = ll_at(&true_x0);
    eprintln!("loglik(truth) = {ll_truth:.3}");
    for t in [-30.0, -20.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 30.0, nrm] {
        let x: Vec<f64> = (0..3).map(|d| true_x0[d] + t * dir[d]).collect();
        eprintln!("  t = {t:7.2}: loglik - ll(truth) = {:+.3}", ll_at(&x) - ll_truth);
    }
    let _ = DVector::<f64>::zeros(1);
}
