//! End-to-end runs of the sampling designs, the fit, and the replication driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psmatch::normal::normal_quantile;
use psmatch::oracle::direct_variance;
use psmatch::propensity::{fit_mle, propensity_scores, FitOptions};
use psmatch::simulation::{
    draw_units, generate_design, m_grid, run_monte_carlo, run_replication, CellRecord, DesignSpec, MonteCarloConfig,
    SimTuning,
};
use psmatch::variance::default_q;

fn inverse_2x2(a: &[f64]) -> [f64; 4] {
    let det = a[0] * a[3] - a[1] * a[2];
    [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det]
}

#[test]
fn mle_recovers_design_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ds = generate_design(&DesignSpec::design1(), 4096, &mut rng).unwrap();
    let fit = fit_mle(&ds, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    let inv = inverse_2x2(fit.fisher_info.as_slice());
    let n = ds.n() as f64;
    for (j, truth) in [1.0, 2.0].into_iter().enumerate() {
        let se = (inv[j * 3] / n).sqrt();
        let z = (fit.theta_hat[j] - truth) / se;
        assert!(z.abs() < 3.0, "coefficient {j}: {} (se {se})", fit.theta_hat[j]);
    }
}

#[test]
fn design_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let units = draw_units(&DesignSpec::design1(), 1_000_000, &mut rng);
    let n = units.len() as f64;
    let p = units.iter().filter(|u| u.w).count() as f64 / n;
    let effect = units.iter().map(|u| u.y1 - u.y0).sum::<f64>() / n;
    assert!((p - 0.5).abs() < 0.002, "treated share {p}");
    assert!((effect - 5.0).abs() < 0.01, "mean effect {effect}");
    assert!(units.iter().all(|u| u.x.iter().all(|v| (-0.5..=0.5).contains(v))));
}

#[test]
fn replication_matches_direct_trace() {
    let spec = DesignSpec::design2();
    let (n, seed) = (256, 42);
    let grid = m_grid(n);
    let rec = run_replication(&spec, n, &grid, SimTuning::default(), seed);
    assert!(rec.failure.is_none());
    assert_eq!(rec.cells.len(), grid.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = generate_design(&spec, n, &mut rng).unwrap();
    let fit = fit_mle(&ds, &FitOptions::default()).unwrap();
    let scores = propensity_scores(&ds, &fit.theta_hat).unwrap();
    let q = default_q(n, ds.n0().min(ds.n1()));
    let z95 = normal_quantile(0.975).unwrap();

    for cell in &rec.cells {
        let CellRecord::Estimated { m, estimate } = *cell else { panic!("cell skipped: {cell:?}") };
        let d = direct_variance(&ds, &scores, &fit.theta_hat, m, q, 4).unwrap();
        let inv = inverse_2x2(&d.info_hat);
        let quad: f64 = (0..2).map(|a| (0..2).map(|b| d.c_hat[a] * inv[a * 2 + b] * d.c_hat[b]).sum::<f64>()).sum();
        let adjusted = d.sigma2_hat - quad;
        let half = z95 * (adjusted / n as f64).sqrt();
        let tol = |v: f64| 1e-9 * v.abs().max(1.0);
        assert!((estimate.tau_hat - d.tau_hat).abs() < tol(d.tau_hat));
        assert!((estimate.adjusted - adjusted).abs() < tol(adjusted), "m = {m}");
        assert!((estimate.ci95.0 - (d.tau_hat - half)).abs() < tol(d.tau_hat));
        assert!((estimate.ci95.1 - (d.tau_hat + half)).abs() < tol(d.tau_hat));
        assert!(estimate.ci90.1 - estimate.ci90.0 < estimate.ci95.1 - estimate.ci95.0);
    }
}

fn small_config(reps: usize) -> MonteCarloConfig {
    MonteCarloConfig {
        design: DesignSpec::design1(),
        n_list: vec![128, 512],
        reps,
        base_seed: 7,
        tuning: SimTuning::default(),
        m_override: None,
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let config = small_config(24);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&config).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.to_csv(), four.to_csv());
    assert_eq!(one, four);
}

#[test]
fn single_replication_table() {
    let config = small_config(1);
    let table = run_monte_carlo(&config).unwrap();
    let ms: Vec<usize> = table.rows.iter().filter(|r| r.n == 512).map(|r| r.m).collect();
    assert_eq!(ms, vec![1, 2, 4, 8, 16]);
    for row in &table.rows {
        let m = row.metrics.expect("one replication always succeeds here");
        assert_eq!(m.rmse, m.mae);
        assert!(m.nsd.is_nan());
        assert!(m.cover95 == 0.0 || m.cover95 == 1.0);
        assert!(m.cover95 >= m.cover90);
    }
    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# design=1"));
    assert_eq!(lines.next().unwrap(), "n,m,rmse,mae,cover95,cover90,nsd,failed_reps");
}
