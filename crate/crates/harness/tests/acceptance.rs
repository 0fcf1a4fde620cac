//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p gradnoise --test acceptance`. Set
//! `ACCEPTANCE_ONLY=4,8` to run a subset.

use std::time::{Duration, Instant};

use gradnoise::config::ExperimentConfig;
use gradnoise::experiments::{self, Context};
use gradnoise_core::bounds::{self, flags, EnsembleSamples, GTildeChoice, TerminalOptions, TrajectoryInputs};
use gradnoise_core::dynamics::{self, EnsemblePlan, Mode, TrainConfig};
use gradnoise_core::gradstats::{
    self, column_mean, leave_one_out_subsets, loo_from_gradients, minibatch_gnc, per_example_gradients,
    plug_in_covariance, GradSnapshot,
};
use gradnoise_core::linalg::{self, gaussian_kl, log_det, solve_stationary_covariance, GaussianDist, StationaryMode};
use gradnoise_core::problems::{self, DataSpec, Example, Family, QuadraticProblem};
use gradnoise_core::{SpdMatrix, SymmetricMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::json;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> SymmetricMatrix {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    SymmetricMatrix::new(&a * a.transpose() / d as f64 + DMatrix::identity(d, d) * ridge).unwrap()
}

fn config(v: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).expect("acceptance config")
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn quad3() -> DataSpec {
    let a = SymmetricMatrix::from_rows(&[vec![1.5, 0.4, 0.0], vec![0.4, 1.0, 0.3], vec![0.0, 0.3, 0.7]]).unwrap();
    DataSpec::quadratic(&a, &[1.0, 0.0, -1.0], &SymmetricMatrix::identity(3))
}

// 1. Covariance of the batch-mean gradient over all batches.
fn minibatch_factor() -> Outcome {
    let spec = quad3();
    let p = spec.build().unwrap();
    let n = 8;
    let data = problems::generate_dataset(&spec, 11, n).unwrap();
    let w = DVector::from_vec(vec![0.3, -0.2, 0.5]);
    let grads = per_example_gradients(p.as_ref(), &w, &data.examples);
    let sigma = plug_in_covariance(&grads);
    let mut worst: f64 = 0.0;
    for b in [1, 2, 4] {
        let means: Vec<DVector<f64>> =
            combinations(n, b).iter().map(|s| column_mean(&grads.select_columns(s))).collect();
        let k = means.len() as f64;
        let mu = means.iter().fold(DVector::zeros(3), |a, m| a + m) / k;
        let cov = means.iter().fold(DMatrix::zeros(3, 3), |a, m| {
            let c = m - &mu;
            a + &c * c.transpose()
        }) / k;
        let expected = sigma.as_matrix() * ((n - b) as f64 / (b as f64 * (n - 1) as f64));
        worst = worst.max((cov - expected).abs().max());
    }
    check(worst <= 1e-12, format!("max entry error {worst:.2e} (tol 1e-12)"))
}

// 2. Leave-one-out identities with C = Σ/b.
fn loo_identities() -> Outcome {
    let spec = quad3();
    let p = spec.build().unwrap();
    let w = DVector::from_vec(vec![-0.1, 0.7, 0.2]);
    let mut worst: f64 = 0.0;
    for n in [4usize, 6, 8] {
        let data = problems::generate_dataset(&spec, 100 + n as u64, n).unwrap();
        let grads = per_example_gradients(p.as_ref(), &w, &data.examples);
        let sigma = plug_in_covariance(&grads);
        for b in 1..n - 1 {
            let c = sigma.as_matrix() / b as f64;
            let subsets = leave_one_out_subsets(n);
            let (mut xx, mut cj) = (DMatrix::zeros(3, 3), DMatrix::zeros(3, 3));
            for j in &subsets {
                let q = loo_from_gradients(&grads, j, b);
                xx += &q.xi * q.xi.transpose();
                cj += q.loo_gnc.as_matrix();
            }
            let k = subsets.len() as f64;
            let nm1 = (n - 1) as f64;
            let e1 = (xx / k - &c * (b as f64 / (nm1 * nm1))).abs().max();
            let e2 = (cj / k - &c * (n as f64 * (n as f64 - 2.0) / (nm1 * nm1))).abs().max();
            worst = worst.max(e1).max(e2);
        }
    }
    check(worst <= 1e-10, format!("max entry error {worst:.2e} (tol 1e-10)"))
}

// 3. Closed-form Gaussian KL against Monte Carlo.
fn kl_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(u64, GaussianDist, GaussianDist)> = (0..20)
        .map(|k| {
            let d = rng.random_range(1..=5);
            let mut g = || {
                let m = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
                let c = random_spd(&mut rng, d, 0.5);
                GaussianDist::new(m, SpdMatrix::strict(&c).unwrap()).unwrap()
            };
            let (p, q) = (g(), g());
            (k, p, q)
        })
        .collect();
    let errs: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(k, p, q)| {
            let d = p.dim();
            let lp = p.cov.matrix().as_matrix().clone().cholesky().unwrap().l();
            let q_chol = q.cov.matrix().as_matrix().clone().cholesky().unwrap();
            let half_logdet = |l: &DMatrix<f64>| l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let (hp, hq) = (half_logdet(&lp), half_logdet(&q_chol.l()));
            let mut r = ChaCha8Rng::seed_from_u64(1000 + k);
            let samples = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..samples {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
                let x = &p.mean + &lp * &z;
                let y = q_chol.l().solve_lower_triangular(&(&x - &q.mean)).unwrap();
                acc += -0.5 * z.norm_squared() - hp + 0.5 * y.norm_squared() + hq;
            }
            let mc = acc / samples as f64;
            let exact = gaussian_kl(p, q).unwrap();
            ((exact - mc).abs(), exact)
        })
        .collect();
    let worst = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_kl = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    check(worst <= 1e-2, format!("max |closed - MC| {worst:.2e} over 20 pairs (largest KL {max_kl:.2}, tol 1e-2)"))
}

// 4. Stationary covariance: solve, long SDE run, small-lr form.
fn stationary_covariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 5;
    let a = random_spd(&mut rng, d, 0.5);
    let z_cov = random_spd(&mut rng, d, 0.3);
    let commutator = (a.as_matrix() * z_cov.as_matrix() - z_cov.as_matrix() * a.as_matrix()).norm();
    let steps = 1_000_000;
    let cfg = config(json!({
        "problem": {
            "family": {"kind": "quadratic-gaussian", "a": a.to_rows(), "z_mean": vec![0.0; d], "z_cov": z_cov.to_rows()},
            "population_oracle_size": 10
        },
        "train": {"b": 5, "lr": 0.05, "steps": steps, "mode": "sde", "log_every": steps, "cov_refresh": steps, "burn_in": 50_000},
        "n": 100,
        "seed": 4
    }));
    let ctx = Context::new(&cfg).unwrap();
    let rep = experiments::stationary(&ctx).map_err(|e| e.to_string())?;
    let general = &rep.solves[0];
    let residual = general.residual.ok_or("general solve failed")?;
    let rel = general.rel_frobenius.unwrap();

    // small-lr form under H = b C and 2/η ≫ λ₁
    let b = 4;
    let c = random_spd(&mut rng, d, 0.5);
    let h = c.scale(b as f64);
    let eta = 1e-4;
    let small = solve_stationary_covariance(&h, &c, eta, StationaryMode::SmallLr, b).unwrap();
    let exact = small == SymmetricMatrix::identity(d).scale(eta / (2.0 * b as f64));
    let hmg = solve_stationary_covariance(&h, &c, eta, StationaryMode::HessianMatchesGnc, b).unwrap();
    let lam1 = h.max_eigenvalue().unwrap();
    let hmg_res = linalg::stationary_residual(&hmg, &h, &c, eta) / (eta * c.frobenius_norm());
    let gap = (&hmg - &small).frobenius_norm() / small.frobenius_norm();
    check(
        residual <= 1e-9 && rel <= 0.10 && exact && gap <= eta * lam1 && hmg_res <= 1e-9,
        format!(
            "residual {residual:.1e}, SDE tail vs solve {:.2}% (tol 10%), ‖[H,Σz]‖ {commutator:.2}, small-lr exact: {exact}, \
             (2/η-H)⁻¹/b vs ηI/2b {gap:.1e} ≤ ηλ₁ {:.1e}",
            100.0 * rel,
            eta * lam1
        ),
    )
}

// 5. Seed-averaged SGD vs SDE terminal test accuracy.
fn sgd_sde_agreement() -> Outcome {
    let cfg = config(json!({
        "problem": {
            "family": {"kind": "logistic-two-gaussians", "mean": vec![0.15; 20], "bias": false},
            "population_oracle_size": 20_000
        },
        "train": {"b": 20, "lr": 0.5, "steps": 5000, "mode": "sgd", "log_every": 500, "cov_refresh": 10},
        "n": 2000,
        "seed": 5,
        "compare": {"seeds": 10}
    }));
    let ctx = Context::new(&cfg).unwrap();
    let res = experiments::compare(&ctx).map_err(|e| e.to_string())?;
    let s = &res.summary;
    let diff = s.test_acc_abs_diff_pp.ok_or("no accuracy")?;
    check(
        diff <= 1.0 && s.sgd_runs_used == 10 && s.sde_runs_used == 10,
        format!(
            "test acc SGD {:.2}% vs SDE {:.2}%: |diff| {diff:.3} pp (tol 1 pp)",
            100.0 * s.terminal_sgd.test_acc.unwrap(),
            100.0 * s.terminal_sde.test_acc.unwrap()
        ),
    )
}

fn synthetic_snapshot(step: usize, pop: &SymmetricMatrix, sigma: &SymmetricMatrix, n: usize, b: usize) -> GradSnapshot {
    let d = pop.dim();
    let c = minibatch_gnc(sigma, n, b).unwrap();
    GradSnapshot {
        step,
        full_grad: DVector::zeros(d),
        grad_norm_sq: 0.0,
        trace_sigma: sigma.trace(),
        trace_c: c.trace(),
        diag_sigma: sigma.diagonal(),
        single_draw_gnc: Some(sigma.clone()),
        minibatch_gnc: Some(c),
        trace_pop: Some(pop.trace()),
        diag_pop: Some(pop.diagonal()),
        pop_gnc: Some(pop.clone()),
        pop_grad: Some(DVector::zeros(d)),
        n,
        b,
    }
}

// 6. Anisotropic trajectory core ≤ isotropic core at every step.
fn bound_ordering() -> Outcome {
    let mut cfg = config(json!({
        "problem": {"family": {"kind": "logistic-two-gaussians", "mean": [1.0, -0.5]}, "population_oracle_size": 5000},
        "train": {"b": 5, "lr": 0.1, "steps": 300, "mode": "sgd", "log_every": 10},
        "n": 200,
        "seed": 6,
        "ensemble": {"datasets": 2, "runs": 2},
        "bounds": ["traj-isotropic", "traj-anisotropic"],
        "g_tilde": "population-gradient"
    }));
    cfg.out = std::env::temp_dir();
    let ctx = Context::new(&cfg).unwrap();
    let ev = experiments::evaluate(&ctx, cfg.n, &cfg.bounds).map_err(|e| e.to_string())?;
    let iso = ev.bounds[0].series.get("running_core_identity_h1").ok_or("no identity series")?;
    let aniso = &ev.bounds[1].series["running_core"];
    let violations = iso.iter().zip(aniso).filter(|(i, a)| **a > **i + 1e-12).count();
    let min_gap = iso.iter().zip(aniso).skip(1).map(|(i, a)| i - a).fold(f64::INFINITY, f64::min);

    // Equal-diagonal population GNC, b = 1: both cores coincide.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, b, d, t) = (50, 1, 4, 20);
    let pop = SymmetricMatrix::identity(d).scale(0.7);
    let runs: Vec<Vec<GradSnapshot>> = (0..3)
        .map(|_| (0..t).map(|s| synthetic_snapshot(s, &pop, &random_spd(&mut rng, d, 0.3), n, b)).collect())
        .collect();
    let inputs = TrajectoryInputs {
        runs: runs.iter().map(Vec::as_slice).collect(),
        n,
        b,
        steps: t,
        eta: 0.1,
        mode: Some(Mode::Sgd),
        r: 1.0,
        m: 1.0,
        floor: Default::default(),
    };
    let iso_eq = bounds::traj_bound_isotropic(&inputs, &GTildeChoice::PopulationGradient).unwrap();
    let aniso_eq = bounds::traj_bound_anisotropic(&inputs).unwrap();
    let eq_err = (iso_eq.components["core_identity_h1"] - aniso_eq.core).abs();
    check(
        violations == 0 && eq_err <= 1e-9,
        format!(
            "{violations} violations over {} steps (smallest gap {min_gap:.2e}); equal-diagonal case |diff| {eq_err:.1e} (tol 1e-9)",
            iso.len()
        ),
    )
}

// 7. Closed-form prior scales against a 10³-point grid.
fn prior_scale_optimality() -> Outcome {
    let grid = |lo: f64, hi: f64| (0..1000).map(move |i| lo * (hi / lo).powf(i as f64 / 999.0));
    let reg = |m: &SymmetricMatrix| SpdMatrix::regularize(m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut checked = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..5);
        let b = rng.random_range(1..6);
        let eye = SymmetricMatrix::identity(d);

        let c = random_spd(&mut rng, d, 0.2);
        let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let g_tilde = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let c_spd = reg(&c);
        let h1 = (&g - &g_tilde).norm_squared() + c.trace();
        let closed = 0.5 * bounds::isotropic_step_term(h1, log_det(&c_spd).unwrap(), d);
        let post = GaussianDist::new(g.clone(), c_spd).unwrap();
        let best = grid(1e-3, 1e3)
            .map(|s| gaussian_kl(&post, &GaussianDist::new(g_tilde.clone(), reg(&eye.scale(s * s))).unwrap()).unwrap())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(closed - best);

        let pop = random_spd(&mut rng, d, 0.2);
        let delta = DVector::from_fn(d, |_, _| rng.random_range(-0.05..0.05));
        let ca = SymmetricMatrix::new(pop.as_matrix() / b as f64 - &delta * delta.transpose()).unwrap();
        if let Ok(ca_spd) = SpdMatrix::strict(&ca) {
            let closed = 0.5
                * bounds::anisotropic_step_term(log_det(&reg(&pop)).unwrap(), log_det(&reg(&ca.scale(b as f64))).unwrap());
            let post = GaussianDist::new(delta, ca_spd).unwrap();
            let best = grid(1e-3, 1e3)
                .map(|ct| gaussian_kl(&post, &GaussianDist::new(DVector::zeros(d), reg(&pop.scale(ct))).unwrap()).unwrap())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(closed - best);
            checked += 1;
        }

        let eta = rng.random_range(0.01..0.5);
        let w_star = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let w_hat = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let dist = (&w_star - &w_hat).norm_squared();
        let closed = 0.5 * bounds::terminal_isotropic_term(dist, eta, b, d);
        let post = GaussianDist::new(w_star, reg(&eye.scale(eta / (2.0 * b as f64)))).unwrap();
        let best = grid(1e-3, 1e2)
            .map(|s| gaussian_kl(&post, &GaussianDist::new(w_hat.clone(), reg(&eye.scale(s * s))).unwrap()).unwrap())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(closed - best);
    }
    check(
        worst <= 1e-9,
        format!("largest grid improvement {worst:.2e} (tol 1e-9); 100 isotropic, {checked} anisotropic, 100 terminal inputs"),
    )
}

// 8. Terminal general vs anisotropic vs the analytic value.
fn terminal_consistency() -> Outcome {
    let (d, n) = (3, 50);
    let a = SymmetricMatrix::from_rows(&[vec![1.2, 0.3, 0.0], vec![0.3, 0.9, 0.2], vec![0.0, 0.2, 0.6]]).unwrap();
    let z_cov = SymmetricMatrix::from_rows(&[vec![1.0, 0.2, 0.1], vec![0.2, 0.8, 0.0], vec![0.1, 0.0, 0.5]]).unwrap();
    let eta = 0.002;
    let steps = 20_000;
    let spec = DataSpec::quadratic(&a, &vec![0.0; d], &z_cov);
    let p = spec.build().unwrap();
    let mut tc = TrainConfig::new(Mode::Sde, 1, eta, steps);
    tc.log_every = steps;
    tc.cov_refresh = steps;
    tc.burn_in = 8000;
    tc.tail_every = 300;
    let plan = EnsemblePlan { n, n_datasets: 16, n_runs: 16, base_seed: 8 };
    let ens = dynamics::run_ensemble(p.as_ref(), &spec, None, &tc, &plan).map_err(|e| e.to_string())?;
    let s = EnsembleSamples::from_ensemble(&ens);
    let opts = TerminalOptions::default();
    let general = bounds::terminal_bound_general(&s, &opts).map_err(|e| e.to_string())?;
    let curv = bounds::terminal_curvature(p.as_ref(), &ens, &s).map_err(|e| e.to_string())?;
    let aniso = bounds::terminal_bound_anisotropic(&s, &curv, &opts).map_err(|e| e.to_string())?;

    let factor = gradstats::minibatch_factor(n, 1).unwrap();
    let c = SymmetricMatrix::new(a.as_matrix() * z_cov.as_matrix() * a.as_matrix() * factor).unwrap();
    let lambda = solve_stationary_covariance(&a, &c, eta, StationaryMode::General, 1).unwrap();
    let pooled = SymmetricMatrix::new(z_cov.as_matrix() / n as f64 + lambda.as_matrix()).unwrap();
    let analytic =
        ((log_det(&SpdMatrix::strict(&pooled).unwrap()).unwrap() - log_det(&SpdMatrix::strict(&lambda).unwrap()).unwrap())
            / (2.0 * n as f64))
            .sqrt();
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs();
    let (ga, gx, ax) = (rel(general.core, aniso.core), rel(general.core, analytic), rel(aniso.core, analytic));
    check(
        ga <= 0.15 && gx <= 0.15 && ax <= 0.15,
        format!(
            "general {:.4}, anisotropic {:.4}, analytic {analytic:.4}: rel diffs {:.1}% / {:.1}% / {:.1}% (tol 15%)",
            general.core,
            aniso.core,
            100.0 * ga,
            100.0 * gx,
            100.0 * ax
        ),
    )
}

// 9. Logistic sweep over n.
fn sweep_trend() -> Outcome {
    let cfg = config(json!({
        "problem": {
            "family": {"kind": "logistic-two-gaussians", "mean": [1.0, -0.5, 0.5, 0.25]},
            "population_oracle_size": 100_000
        },
        "train": {"b": 10, "lr": 0.1, "steps": 4000, "mode": "sgd", "log_every": 4000, "burn_in": 2000, "tail_every": 20},
        "n": 100,
        "seed": 9,
        "n_sweep": [100, 300, 1000, 3000],
        "ensemble": {"datasets": 10, "runs": 2},
        "bounds": ["terminal-anisotropic", "terminal-general", "terminal-isotropic", "terminal-isotropic-init"]
    }));
    let ctx = Context::new(&cfg).unwrap();
    let (_, s) = experiments::sweep(&ctx).map_err(|e| e.to_string())?;
    let aniso = &s.bounds[0];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" > ");
    let contrast: Vec<String> = s.bounds.iter().map(|t| format!("{} ρ={:+.1}", t.bound, t.spearman)).collect();
    check(
        s.gen_error_spearman == -1.0 && aniso.spearman == -1.0,
        format!(
            "gen error {} (ρ={:+.1}); anisotropic core {} (ρ={:+.1}); {}; grows with n: [{}]",
            fmt(&s.gen_error),
            s.gen_error_spearman,
            fmt(&aniso.core),
            aniso.spearman,
            contrast.join(", "),
            s.grows_with_n.join(", ")
        ),
    )
}

// 10. Gradients and HVPs against central differences.
fn finite_differences() -> Outcome {
    let mut logistic = DataSpec::logistic(vec![1.0, -0.5, 0.3], 1.0);
    if let Family::LogisticTwoGaussians { l2, .. } = &mut logistic.family {
        *l2 = 0.01;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let quad = DataSpec::quadratic(&random_spd(&mut rng, 4, 0.3), &[0.5, 0.0, -0.5, 1.0], &random_spd(&mut rng, 4, 0.3));
    let specs = [("quadratic", quad), ("logistic", logistic), ("mlp", DataSpec::mlp(4, 6, 3))];
    let mut report = Vec::new();
    let mut ok = true;
    for (name, spec) in specs {
        let p = spec.build().unwrap();
        let d = p.dim();
        let data = problems::generate_dataset(&spec, 10, 50).unwrap();
        let (mut g_err, mut h_err): (f64, f64) = (0.0, 0.0);
        for k in 0..100 {
            let w = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let z: &Example = &data.examples[k % data.examples.len()];
            let g = p.grad(&w, z);
            let h = 1e-5;
            for i in 0..d {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[i] += h;
                wm[i] -= h;
                let fd = (p.loss(wp.as_slice(), z) - p.loss(wm.as_slice(), z)) / (2.0 * h);
                g_err = g_err.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1.0));
            }
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let hv = p.hvp(&w, std::slice::from_ref(z), &v);
            let fd = (p.grad(&(&w + &v * h), z) - p.grad(&(&w - &v * h), z)) / (2.0 * h);
            for i in 0..d {
                h_err = h_err.max((fd[i] - hv[i]).abs() / fd[i].abs().max(hv[i].abs()).max(1.0));
            }
        }
        ok &= g_err <= 1e-6 && h_err <= 1e-5;
        report.push(format!("{name} grad {g_err:.1e} hvp {h_err:.1e}"));
    }
    check(ok, format!("{} (tol 1e-6 / 1e-5)", report.join(", ")))
}

// 11. Zero-noise ensemble hits the flooring cap.
fn deterministic_limit() -> Outcome {
    let spec = quad3();
    let p = spec.build().unwrap();
    let n = 20;
    let mut tc = TrainConfig::new(Mode::Sgd, n, 0.1, 500);
    tc.log_every = 500;
    let plan = EnsemblePlan { n, n_datasets: 3, n_runs: 4, base_seed: 11 };
    let ens = dynamics::run_ensemble(p.as_ref(), &spec, None, &tc, &plan).map_err(|e| e.to_string())?;
    let rep = bounds::terminal_bound_general(&EnsembleSamples::from_ensemble(&ens), &TerminalOptions::default())
        .map_err(|e| e.to_string())?;
    let cap = rep.components["flooring_cap"];
    let flagged = rep.has_flag(flags::DETERMINISTIC_FAILURE);
    check(
        flagged && (rep.core - cap).abs() <= 1e-12 * cap,
        format!("core {:.6} vs flooring cap {cap:.6}, deterministic-failure flag: {flagged}", rep.core),
    )
}

// 12. Influence estimate vs exact leave-one-out refits.
fn influence_demo() -> Outcome {
    let one = SymmetricMatrix::identity(1);
    let spec = DataSpec::quadratic(&one, &[0.0], &one);
    let q = QuadraticProblem::from_spec(&spec).unwrap();
    let two = vec![Example { features: vec![-1.0], label: 0.0 }, Example { features: vec![1.0], label: 0.0 }];
    let w_star = q.erm_solution(&two);
    let est = bounds::influence_estimate(&q, &w_star, &two, 0, 1e-14, 0.0).map_err(|e| e.to_string())?;
    let true2 = q.erm_solution(&two[1..])[0] - w_star[0];
    let small_ok = est.shift[0] == 0.5 && true2 == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = DataSpec::quadratic(&random_spd(&mut rng, 3, 0.5), &[0.5, -0.5, 1.0], &random_spd(&mut rng, 3, 0.5));
    let q = QuadraticProblem::from_spec(&spec).unwrap();
    let n = 1000;
    let data = problems::generate_dataset(&spec, 12, n).unwrap();
    let w_star = q.erm_solution(&data.examples);
    let (mut corrected, mut raw): (f64, f64) = (0.0, 0.0);
    for i in [0, 17, 256, 999] {
        let rest: Vec<Example> =
            data.examples.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, z)| z.clone()).collect();
        let truth = q.erm_solution(&rest) - &w_star;
        let est = bounds::influence_estimate(&q, &w_star, &data.examples, i, 1e-14, 0.0).map_err(|e| e.to_string())?;
        corrected = corrected.max((&est.shift * (n as f64 / (n as f64 - 1.0)) - &truth).amax());
        raw = raw.max((&est.shift - &truth).amax());
    }
    check(
        small_ok && corrected <= 1e-6,
        format!(
            "n=2: estimate {} vs true {true2}; n=1000: corrected error {corrected:.1e} (tol 1e-6), uncorrected {raw:.1e}",
            est.shift[0]
        ),
    )
}

#[allow(clippy::type_complexity)]
fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 12] = [
        (1, "mini-batch GNC factor by enumeration", Duration::from_secs(1), minibatch_factor),
        (2, "leave-one-out identities", Duration::from_secs(1), loo_identities),
        (3, "Gaussian KL vs Monte Carlo", Duration::from_secs(30), kl_monte_carlo),
        (4, "stationary covariance", Duration::from_secs(120), stationary_covariance),
        (5, "SGD/SDE agreement", Duration::from_secs(120), sgd_sde_agreement),
        (6, "bound ordering", Duration::MAX, bound_ordering),
        (7, "prior-scale optimality", Duration::MAX, prior_scale_optimality),
        (8, "terminal-bound consistency", Duration::from_secs(300), terminal_consistency),
        (9, "sweep trend", Duration::from_secs(600), sweep_trend),
        (10, "gradient/HVP finite differences", Duration::from_secs(30), finite_differences),
        (11, "deterministic-limit divergence", Duration::MAX, deterministic_limit),
        (12, "influence-function demonstration", Duration::MAX, influence_demo),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, limit, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (pass, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let in_time = took <= limit;
        if !in_time {
            detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
        let pass = pass && in_time;
        println!("{} [{id:>2}] {name}: {detail} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
