//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 train full-size models and take several minutes; they
//! run only when `DSSE_ACCEPTANCE_FULL=1` and print SKIP otherwise.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use dsse::grid::BusNetwork;
use dsse::measurement::{
    add_noise, make_plan, sigma_theta, MeasurementKind, MeasurementPlan, MeasurementSpec, Scenario,
    StateVector, SIGMA_POWER, SIGMA_THETA_DEG, SIGMA_V,
};
use dsse::pipelines::{ps_batch_gradient, ImplicitLayer, PseudoSigma};
use dsse::powerflow::{sample_demand, solve_power_flow};
use dsse::rng::rng_from_seed;
use dsse::wls::{wls_adjoint, wls_sensitivity, wls_solve, WeightMatrix, WlsOptions};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

type Outcome = (bool, String);
type Check = fn() -> Outcome;

fn main() {
    let full = std::env::var("DSSE_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, Option<Check>)> = vec![
        ("1 noiseless recovery", Some(noiseless_recovery)),
        ("2 jacobian vs finite differences", Some(jacobian_fd)),
        ("3 sensitivity vs finite differences", Some(sensitivity_fd)),
        ("4 adjoint duality and backward cost", Some(adjoint_duality)),
        ("5 linear-case exactness", Some(linear_case)),
        ("6 end-to-end gradient", Some(end_to_end_gradient)),
        ("7 noise calibration", Some(noise_calibration)),
        (
            "8 ieee33/PMU/10% desk-scale ordering",
            full.then_some(desk_scale_ieee33 as Check),
        ),
        (
            "9 ieee30/HIG/5% order of magnitude",
            full.then_some(desk_scale_ieee30 as Check),
        ),
        ("10 repro determinism", Some(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check {
            Some(f) => {
                let t = Instant::now();
                let (ok, detail) = f();
                let status = if ok { "PASS" } else { "FAIL" };
                if !ok {
                    failed += 1;
                }
                println!(
                    "{status} criterion {name}: {detail} [{:.1}s]",
                    t.elapsed().as_secs_f64()
                );
            }
            None => println!("SKIP criterion {name}: set DSSE_ACCEPTANCE_FULL=1 to run"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn tight(max_iters: usize) -> WlsOptions {
    WlsOptions {
        max_iters,
        step_tol: 0.0,
        opt_tol: 1e-6,
    }
}

fn truth(net: &BusNetwork, variability: f64, seed: u64) -> StateVector {
    solve_power_flow(net, &sample_demand(net, variability, seed).unwrap()).unwrap()
}

fn noiseless_recovery() -> Outcome {
    let net = BusNetwork::ieee33();
    let plan = all_kinds_plan(&net);
    let w = WeightMatrix::for_plan(&plan).unwrap();
    let opts = WlsOptions {
        max_iters: 10,
        step_tol: 1e-12,
        opt_tol: 1e-6,
    };
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut recovered = 0;
    let mut max_iters = 0;
    for seed in 0..100 {
        let x = truth(&net, 0.5, seed);
        let z = plan.eval_h(&x, &net).unwrap();
        let sol = wls_solve(
            &z,
            &plan,
            &net,
            &w,
            &StateVector::flat_start(net.n_bus()),
            &opts,
        )
        .unwrap();
        let err = sol
            .x_hat
            .to_flat()
            .iter()
            .zip(x.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        max_iters = max_iters.max(sol.iterations);
        if err <= 1e-8 {
            recovered += 1;
        }
    }
    let elapsed = start.elapsed();
    (
        recovered == 100 && elapsed < Duration::from_secs(5),
        format!(
            "{recovered}/100 within 1e-8, worst {worst:.2e}, max {max_iters} iterations, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn jacobian_fd() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for (net, seed) in [(BusNetwork::ieee30(), 30), (BusNetwork::ieee33(), 33)] {
        let plan = all_kinds_plan(&net);
        let mut rng = rng_from_seed(seed);
        let h = 1e-6;
        for _ in 0..50 {
            let x = random_state(net.n_bus(), &mut rng);
            let jac = plan.eval_jacobian(&x, &net).unwrap();
            let flat = x.to_flat();
            let mut fd = DMatrix::zeros(plan.m(), flat.len());
            for c in 0..flat.len() {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[c] += h;
                dn[c] -= h;
                let hu = plan
                    .eval_h(&StateVector::from_flat(&up, net.n_bus()).unwrap(), &net)
                    .unwrap();
                let hd = plan
                    .eval_h(&StateVector::from_flat(&dn, net.n_bus()).unwrap(), &net)
                    .unwrap();
                fd.set_column(c, &((hu - hd) / (2.0 * h)));
            }
            for (k, spec) in plan.specs().iter().enumerate() {
                let scale = jac.row(k).amax().max(1e-12);
                let err = (jac.row(k) - fd.row(k)).amax() / scale;
                let e = worst.entry(kind_name(spec.kind)).or_insert(0.0);
                *e = e.max(err);
            }
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        max <= 1e-6 && worst.len() == MeasurementKind::ALL.len(),
        format!("row-relative max error {detail}"),
    )
}

fn sensitivity_fd() -> Outcome {
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)
        .unwrap()
        .merged(&net)
        .unwrap();
    let w = WeightMatrix::for_plan(&plan).unwrap();
    let x = truth(&net, 0.1, 7);
    let z = plan.eval_h(&x, &net).unwrap();
    let flat = StateVector::flat_start(net.n_bus());
    let sol = wls_solve(&z, &plan, &net, &w, &flat, &tight(30)).unwrap();
    let s = wls_sensitivity(&sol, &w).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..plan.m() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += eps;
        zm[j] -= eps;
        let xp = wls_solve(&zp, &plan, &net, &w, &sol.x_hat, &tight(8))
            .unwrap()
            .x_hat
            .to_flat();
        let xm = wls_solve(&zm, &plan, &net, &w, &sol.x_hat, &tight(8))
            .unwrap()
            .x_hat
            .to_flat();
        let fd = DVector::from_iterator(
            xp.len(),
            xp.iter().zip(&xm).map(|(a, b)| (a - b) / (2.0 * eps)),
        );
        let col = s.column(j);
        worst = worst.max((&fd - col).norm() / col.norm());
    }
    (
        worst <= 1e-4,
        format!(
            "{} channels, worst column relative error {worst:.2e}",
            plan.m()
        ),
    )
}

fn median_time(mut f: impl FnMut(), reps: usize) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

fn adjoint_duality() -> Outcome {
    let net = BusNetwork::ieee33();
    let plan = make_plan(Scenario::Pmu, &net)
        .unwrap()
        .merged(&net)
        .unwrap();
    let w = WeightMatrix::for_plan(&plan).unwrap();
    let x = truth(&net, 0.1, 11);
    let z = add_noise(&plan.eval_h(&x, &net).unwrap(), &plan.sigma_vector(), 5).unwrap();
    let flat = StateVector::flat_start(net.n_bus());
    let sol = wls_solve(&z, &plan, &net, &w, &flat, &WlsOptions::evaluation()).unwrap();
    let st = wls_sensitivity(&sol, &w).unwrap().transpose();
    let mut rng = rng_from_seed(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = DVector::from_fn(net.n_state(), |_, _| StandardNormal.sample(&mut rng));
        let adj = wls_adjoint(&sol, &w, &g).unwrap();
        let explicit = &st * &g;
        worst = worst.max((&adj - &explicit).norm() / explicit.norm());
    }
    let g = DVector::from_element(net.n_state(), 1.0);
    let s5 = wls_solve(&z, &plan, &net, &w, &flat, &tight(5)).unwrap();
    let s50 = wls_solve(&z, &plan, &net, &w, &flat, &tight(50)).unwrap();
    let t5 = median_time(|| drop(wls_adjoint(&s5, &w, &g).unwrap()), 301);
    let t50 = median_time(|| drop(wls_adjoint(&s50, &w, &g).unwrap()), 301);
    let ratio = t5 / t50;
    (
        worst <= 1e-10 && (0.5..=2.0).contains(&ratio),
        format!("worst relative mismatch {worst:.2e}, backward time ratio K=5/K=50 {ratio:.2}"),
    )
}

fn linear_case() -> Outcome {
    let net = BusNetwork::ieee33();
    let n = net.n_bus();
    // two voltage and two angle channels per state, different accuracies
    let mut specs = Vec::new();
    for b in 1..=n {
        specs.push(MeasurementSpec::voltage(b, 1e-3));
        specs.push(MeasurementSpec::voltage(b, 2.5e-3));
        if b > 1 {
            specs.push(MeasurementSpec::angle(b, 1e-3));
            specs.push(MeasurementSpec::angle(b, 4e-3));
        }
    }
    let plan = MeasurementPlan::new(specs.clone(), vec![], &net).unwrap();
    let w = WeightMatrix::for_plan(&plan).unwrap();
    let x = truth(&net, 0.1, 3);
    let z = add_noise(&plan.eval_h(&x, &net).unwrap(), &plan.sigma_vector(), 8).unwrap();
    let sol = wls_solve(&z, &plan, &net, &w, &StateVector::flat_start(n), &tight(1)).unwrap();

    // selection matrix and weighted averages built from the spec list
    let ns = net.n_state();
    let mut hmat = DMatrix::zeros(specs.len(), ns);
    for (k, s) in specs.iter().enumerate() {
        let dsse::measurement::Location::Bus(b) = s.location else {
            unreachable!()
        };
        let col = if s.kind == MeasurementKind::V {
            b - 1
        } else {
            n + b - 2
        };
        hmat[(k, col)] = 1.0;
    }
    let wd: Vec<f64> = specs.iter().map(|s| s.sigma.powi(-2)).collect();
    let mut num = vec![0.0; ns];
    let mut den = vec![0.0; ns];
    for (k, row) in hmat.row_iter().enumerate() {
        let c = row.iter().position(|&v| v == 1.0).unwrap();
        num[c] += wd[k] * z[k];
        den[c] += wd[k];
    }
    let closed: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    let state_err = sol
        .x_hat
        .to_flat()
        .iter()
        .zip(&closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let sqrt_w = DMatrix::from_diagonal(&DVector::from_iterator(
        wd.len(),
        wd.iter().map(|v| v.sqrt()),
    ));
    let pinv = (&sqrt_w * &hmat).pseudo_inverse(1e-14).unwrap() * &sqrt_w;
    let s = wls_sensitivity(&sol, &w).unwrap();
    let sens_err = (&s - &pinv).amax();
    (
        state_err <= 1e-12 && sens_err <= 1e-12,
        format!("state deviation {state_err:.1e}, sensitivity deviation {sens_err:.1e}"),
    )
}

fn end_to_end_gradient() -> Outcome {
    let net = two_bus();
    let plan = toy_plan(&net);
    let dataset = toy_dataset(&net, &plan, 6, 1e-4);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let zd = dataset.z_d_matrix(&all);
    let center: Vec<f64> = zd.row_iter().map(|r| r.mean()).collect();
    let predictor = near_consistent_predictor(&dataset, 8, &center, 4);
    let weights = PseudoSigma::new(vec![1e-2; 4])
        .unwrap()
        .weights(&plan)
        .unwrap();
    let idx = dataset.indices(dsse::pipelines::Part::Train).to_vec();
    let eps = 1e-6;
    let mut ok = true;
    let mut parts = Vec::new();
    for gamma in [0.0, 0.5, 1.0] {
        let layer =
            ImplicitLayer::new(&dataset, &net, &plan, weights.clone(), gamma, tight(40)).unwrap();
        let analytic = DMatrix::from_row_slice(
            1,
            predictor.model.n_params(),
            &layer.batch(&predictor, &idx).unwrap().grads.to_vec(),
        );
        let flat = predictor.model.flat_params();
        let mut fd = DMatrix::zeros(1, flat.len());
        for k in 0..flat.len() {
            let mut p = predictor.clone();
            let mut up = flat.clone();
            up[k] += eps;
            p.model.set_flat_params(&up).unwrap();
            let lu = layer.loss(&p, &idx).unwrap().0;
            let mut dn = flat.clone();
            dn[k] -= eps;
            p.model.set_flat_params(&dn).unwrap();
            let ld = layer.loss(&p, &idx).unwrap().0;
            fd[(0, k)] = (lu - ld) / (2.0 * eps);
        }
        let err = rel_err(&analytic, &fd);
        ok &= err <= 1e-4;
        parts.push(format!("gamma {gamma}: {err:.1e}"));
        if gamma == 0.0 {
            let ps = ps_batch_gradient(&predictor, &dataset, &idx)
                .unwrap()
                .grads
                .to_vec();
            let diff = analytic
                .iter()
                .zip(&ps)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ok &= diff <= 1e-10;
            parts.push(format!("gamma 0 vs PS {diff:.1e}"));
        }
    }
    (ok, parts.join(", "))
}

fn noise_calibration() -> Outcome {
    // literal values, independent of the crate constants
    let expected = [
        ("V", 0.001, SIGMA_V),
        ("theta", 0.1f64.to_radians(), sigma_theta()),
        ("P/Q", 0.01, SIGMA_POWER),
    ];
    let mut ok = (SIGMA_THETA_DEG - 0.1).abs() < 1e-15;
    let draws = 100_000;
    let sigma = DVector::from_fn(3 * draws, |i, _| expected[i % 3].2);
    let clean = DVector::from_fn(3 * draws, |i, _| i as f64 * 1e-3);
    let noisy = add_noise(&clean, &sigma, 2024).unwrap();
    let mut parts = Vec::new();
    for (c, (name, literal, used)) in expected.iter().enumerate() {
        ok &= (used - literal).abs() <= 1e-15 * literal;
        let e: Vec<f64> = (0..draws)
            .map(|k| noisy[3 * k + c] - clean[3 * k + c])
            .collect();
        let mean = e.iter().sum::<f64>() / draws as f64;
        let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let ratio = sd / literal;
        ok &= (ratio - 1.0).abs() <= 0.02;
        parts.push(format!("{name} std/sigma {ratio:.4}"));
    }
    // scenario plans must carry the same stds
    for sc in Scenario::ALL {
        let net = if matches!(sc, Scenario::Pmu | Scenario::End | Scenario::Bif) {
            BusNetwork::ieee33()
        } else {
            BusNetwork::ieee30()
        };
        let Ok(plan) = make_plan(sc, &net) else {
            continue;
        };
        for s in plan.specs() {
            let want = match s.kind {
                MeasurementKind::V => 0.001,
                MeasurementKind::Theta => 0.1f64.to_radians(),
                _ => 0.01,
            };
            ok &= (s.sigma - want).abs() <= 1e-15;
        }
    }
    (ok, parts.join(", "))
}

fn dsse_bin() -> &'static str {
    env!("CARGO_BIN_EXE_dsse")
}

fn run_repro(out: &Path, args: &[&str], workers: Option<&str>) -> std::result::Result<(), String> {
    let mut cmd = Command::new(dsse_bin());
    cmd.arg("repro")
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn");
    match workers {
        Some(w) => cmd.env("DSSE_WORKERS", w),
        None => cmd.env_remove("DSSE_WORKERS"),
    };
    let output = cmd.output().map_err(|e| e.to_string())?;
    if output.status.success() {
        Ok(())
    } else {
        Err(format!(
            "repro exited with {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr).trim()
        ))
    }
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// Rows of a CSV file keyed by header name.
fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(String::from))
                .collect()
        })
        .collect()
}

fn summary_means(dir: &Path, metric: &str) -> Vec<(String, f64)> {
    read_rows(&dir.join("summary.csv"))
        .into_iter()
        .map(|r| {
            let label = match r["gamma"].as_str() {
                "" => r["method"].clone(),
                g => format!("{}{g}", r["method"]),
            };
            (label, r[&format!("rmse_{metric}_mean")].parse().unwrap())
        })
        .collect()
}

fn desk_scale_ieee33() -> Outcome {
    let dir = fresh_dir("ieee33_pmu_10");
    let start = Instant::now();
    if let Err(e) = run_repro(
        &dir,
        &[
            "--cell",
            "ieee33/PMU/0.10",
            "--seeds",
            "3",
            "--counts",
            "1400,300,300",
        ],
        None,
    ) {
        return (false, e);
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let v = read_rows(&dir.join("improvement.csv"))
        .into_iter()
        .find(|r| r["metric"] == "v")
        .unwrap();
    let ps_v: f64 = v["ps"].parse().unwrap();
    let il_v: f64 = v["best_il"].parse().unwrap();
    let pct: f64 = v["improvement_pct"].parse().unwrap();
    let p = summary_means(&dir, "p");
    let sf_p = p.iter().find(|(l, _)| l == "sf").unwrap().1;
    let others_below = p.iter().filter(|(l, _)| l != "sf").all(|(_, v)| *v < sf_p);
    let ok = il_v < ps_v && pct >= 5.0 && others_below && minutes <= 30.0;
    (
        ok,
        format!(
            "RMSE_V PS {ps_v:.3e}, best IL {il_v:.3e} (gamma {}), improvement {pct:.1}% (need >= 5%); \
             RMSE_P {}; {minutes:.1} min; outputs in {}",
            v["best_gamma"],
            p.iter().map(|(l, v)| format!("{l} {v:.2e}")).collect::<Vec<_>>().join(" "),
            dir.display()
        ),
    )
}

fn desk_scale_ieee30() -> Outcome {
    let dir = fresh_dir("ieee30_hig_5");
    if let Err(e) = run_repro(
        &dir,
        &[
            "--cell",
            "ieee30/HIG/0.05",
            "--seeds",
            "3",
            "--counts",
            "1400,300,300",
        ],
        None,
    ) {
        return (false, e);
    }
    let v = summary_means(&dir, "v");
    let ok = v
        .iter()
        .filter(|(l, _)| l != "sf")
        .all(|(_, x)| (1e-4..=1e-2).contains(x));
    (
        ok,
        format!(
            "RMSE_V {}; manifest {}",
            v.iter()
                .map(|(l, x)| format!("{l} {x:.2e}"))
                .collect::<Vec<_>>()
                .join(" "),
            dir.join("manifest.json").display()
        ),
    )
}

fn determinism() -> Outcome {
    let args = [
        "--cell",
        "ieee33/PMU/0.10",
        "--seeds",
        "2",
        "--counts",
        "60,20,20",
        "--max-epochs",
        "4",
        "--batch-size",
        "25",
    ];
    let a = fresh_dir("repro_a");
    let b = fresh_dir("repro_b");
    for dir in [&a, &b] {
        if let Err(e) = run_repro(dir, &args, Some("1")) {
            return (false, e);
        }
    }
    let files = ["dataset.csv", "runs.csv", "summary.csv", "improvement.csv"];
    let mut same = Vec::new();
    for f in files {
        same.push(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    }
    let effective = |d: &Path| -> serde_json::Value {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap())
                .unwrap();
        m["effective"].clone()
    };
    let manifests = effective(&a) == effective(&b);
    let ok = same.iter().all(|s| *s) && manifests;
    (
        ok,
        format!(
            "{}/{} CSV outputs byte-identical, effective manifests {}",
            same.iter().filter(|s| **s).count(),
            files.len(),
            if manifests { "equal" } else { "differ" }
        ),
    )
}
