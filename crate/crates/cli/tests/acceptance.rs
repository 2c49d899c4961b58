//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line to stderr (uncaptured) and fails on FAIL.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mlmi::diagnostics::{autocorrelation, potential_scale_reduction};
use mlmi::gibbs::{default_prior, observed_variances, ImputationMode};
use mlmi::pooling::{lrt_statistics, rubin_scalar, Which};
use mlmi::synthetic::{Amputation, Mechanism};
use mlmi::{
    ampute, build_design, fit_lmm, generate_two_level, icc, pirls_like, pool_chisq_d2,
    pool_constraints, pool_estimates, pool_lrt_d3, run_imputation, AnalysisModel, Dataset,
    Estimates, ImputationSpec, LmmFit, Method, TwoLevelSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn criterion(n: usize, title: &str, budget: Duration, body: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let res = body();
    let took = start.elapsed();
    let res = match res {
        Ok(d) if took > budget => Err(format!("{d}; took {took:.1?}, budget {budget:?}")),
        other => other,
    };
    let line = match &res {
        Ok(d) => format!("acceptance {n:>2} PASS  {title}: {d} ({took:.1?})\n"),
        Err(d) => format!("acceptance {n:>2} FAIL  {title}: {d} ({took:.1?})\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(d) = res {
        panic!("criterion {n} failed: {d}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: mlmi::Error) -> String {
    err.to_string()
}

fn mcar(d: &Dataset, var: &str, rate: f64, seed: u64) -> Dataset {
    ampute(
        d,
        &Amputation {
            mechanism: Mechanism::Mcar,
            rates: vec![(var.into(), rate)],
            seed,
        },
    )
    .unwrap()
}

#[test]
fn c01_rubin_rules_oracle() {
    criterion(1, "Rubin's rules m=2 fixture", Duration::from_secs(1), || {
        let r = rubin_scalar(&[1.0, 2.0], &[0.5, 0.5], None).map_err(e)?;
        // B = 0.5, Ū = 0.5, T = Ū + 1.5B, r = 1.5B/Ū, ν = (m−1)(1 + 1/r)²
        let nu = 25.0 / 9.0;
        let lambda = (1.5 + 2.0 / (nu + 3.0)) / 2.5;
        let got = [r.qbar, r.t, r.riv, r.df, r.fmi];
        let want = [1.5, 1.25, 1.5, nu, lambda];
        for (g, w) in got.iter().zip(&want) {
            check((g - w).abs() <= 1e-10, || format!("{got:?} vs {want:?}"))?;
        }
        Ok(format!("ν = {:.4}, λ = {:.4}", r.df, r.fmi))
    });
}

#[test]
fn c02_identity_pipeline() {
    criterion(2, "complete data through the pipeline", Duration::from_secs(10), || {
        let mut spec = TwoLevelSpec::random_intercept(30, 10, 0.3, 0.7, 8);
        spec.covariates = vec!["x".into()];
        spec.beta = DMatrix::from_column_slice(2, 1, &[1.0, 0.4]);
        let (d, _) = generate_two_level(&spec).map_err(e)?;
        let imp = ImputationSpec::new("y ~ 1 + x + (1|group)", 100, 20, 5, 3);
        let res = run_imputation(&imp, &d).map_err(e)?;
        check(res.imputations.len() == 5, || "expected 5 datasets".into())?;
        check(res.imputations.iter().all(|i| i == &d), || "imputed datasets differ from input".into())?;
        let model = AnalysisModel::parse("y ~ 1 + x + (1|group)", Method::Reml).map_err(e)?;
        let single = fit_lmm(&model, &d).map_err(e)?;
        let sets: Vec<Estimates> = res
            .imputations
            .iter()
            .map(|i| fit_lmm(&model, i).map(|f| Estimates::from_fit(&f)))
            .collect::<mlmi::Result<_>>()
            .map_err(e)?;
        let pooled = pool_estimates(&sets, false).map_err(e)?;
        let se = single.standard_errors();
        for (k, p) in pooled.parameters.iter().enumerate() {
            check(p.estimate == single.beta[k] && p.std_error == se[k], || {
                format!("{}: pooled {} ± {} vs single {} ± {}", p.name, p.estimate, p.std_error, single.beta[k], se[k])
            })?;
            check(p.fmi.abs() <= 1e-12, || format!("{}: FMI {}", p.name, p.fmi))?;
        }
        Ok(format!("{} parameters, FMI = 0", pooled.parameters.len()))
    });
}

#[test]
fn c03_balanced_anova_oracle() {
    criterion(3, "REML vs ANOVA estimators (J=50, n=10)", Duration::from_secs(5), || {
        let (j, n) = (50usize, 10usize);
        let (d, _) = generate_two_level(&TwoLevelSpec::random_intercept(j, n, 0.4, 1.0, 31)).map_err(e)?;
        let y = &d.column("y").unwrap().values;
        let gi = d.group_index();
        let grand = y.iter().map(|v| v.unwrap()).sum::<f64>() / (j * n) as f64;
        let (mut ssb, mut ssw) = (0.0, 0.0);
        for rows in &gi.rows {
            let m = rows.iter().map(|&i| y[i].unwrap()).sum::<f64>() / n as f64;
            ssb += n as f64 * (m - grand).powi(2);
            ssw += rows.iter().map(|&i| (y[i].unwrap() - m).powi(2)).sum::<f64>();
        }
        let msb = ssb / (j - 1) as f64;
        let msw = ssw / (j * (n - 1)) as f64;
        let tau = (msb - msw) / n as f64;
        check(tau > 0.0, || "draw has MSB < MSW; oracle not applicable".into())?;
        let fit = fit_lmm(&AnalysisModel::parse("y ~ 1 + (1|group)", Method::Reml).map_err(e)?, &d).map_err(e)?;
        let (dt, ds) = ((fit.psi[(0, 0)] - tau).abs(), (fit.sigma2 - msw).abs());
        check(dt <= 1e-6 && ds <= 1e-6, || format!("τ² off by {dt:.2e}, σ² off by {ds:.2e}"))?;
        Ok(format!("|Δτ²| = {dt:.1e}, |Δσ²| = {ds:.1e}"))
    });
}

/// Batch-means standard error of the mean.
fn mc_se(x: &[f64], batches: usize) -> f64 {
    let len = x.len() / batches;
    let means: Vec<f64> = x.chunks(len).take(batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

#[test]
fn c04_conjugate_posterior_oracle() {
    criterion(4, "β posterior mean vs GLS with Σ, Ψ fixed", Duration::from_secs(30), || {
        let mut spec = TwoLevelSpec::random_intercept(15, 8, 0.5, 1.0, 44);
        spec.covariates = vec!["x".into()];
        spec.beta = DMatrix::from_column_slice(2, 1, &[0.5, -0.8]);
        let (d, _) = generate_two_level(&spec).map_err(e)?;
        let (psi, s2) = (0.5, 1.0);
        let mut imp = ImputationSpec::new("y ~ 1 + x + (1|group)", 0, 20_000, 1, 12);
        imp.trace_stride = 1;
        imp.fixed_sigma = Some(DMatrix::from_element(1, 1, s2));
        imp.fixed_psi = Some(DMatrix::from_element(1, 1, psi));
        let res = run_imputation(&imp, &d).map_err(e)?;

        let (y, x) = (d.column("y").unwrap(), d.column("x").unwrap());
        let mut xtvx = DMatrix::zeros(2, 2);
        let mut xtvy = DVector::zeros(2);
        for rows in d.group_index().rows {
            let n = rows.len();
            let v = DMatrix::from_element(n, n, psi) + DMatrix::identity(n, n) * s2;
            let vinv = v.try_inverse().unwrap();
            let xj = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { x.values[rows[i]].unwrap() });
            let yj = DVector::from_fn(n, |i, _| y.values[rows[i]].unwrap());
            xtvx += xj.transpose() * &vinv * &xj;
            xtvy += xj.transpose() * &vinv * yj;
        }
        let gls = xtvx.try_inverse().unwrap() * xtvy;
        let mut detail = Vec::new();
        for (k, name) in ["Beta[1,1]", "Beta[2,1]"].iter().enumerate() {
            let t = res.chain.imputation_trace(name).unwrap();
            check(t.len() == 20_000, || format!("{} stored draws", t.len()))?;
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let z = (mean - gls[k]) / mc_se(t, 50);
            check(z.abs() < 3.0, || format!("{name}: {mean} vs GLS {} (z = {z:.2})", gls[k]))?;
            detail.push(format!("{name} z = {z:.2}"));
        }
        Ok(detail.join(", "))
    });
}

fn mean_icc(imps: &[Dataset]) -> Result<f64, String> {
    let model = AnalysisModel::parse("y ~ 1 + (1|group)", Method::Reml).map_err(e)?;
    let v: Vec<f64> = imps
        .par_iter()
        .map(|d| fit_lmm(&model, d).and_then(|f| icc(&f)))
        .collect::<mlmi::Result<_>>()
        .map_err(e)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[test]
fn c05_icc_preservation() {
    criterion(5, "ICC preserved by multilevel MI, attenuated by flat MI", Duration::from_secs(300), || {
        let (full, _) = generate_two_level(&TwoLevelSpec::random_intercept(100, 20, 0.2, 0.8, 505)).map_err(e)?;
        let d = mcar(&full, "y", 0.3, 506);
        let mut imp = ImputationSpec::new("y ~ 1 + (1|group)", 1000, 100, 20, 507);
        let ml = run_imputation(&imp, &d).map_err(e)?;
        imp.mode = ImputationMode::SingleLevel;
        let flat = run_imputation(&imp, &d).map_err(e)?;
        let (icc_ml, icc_flat) = (mean_icc(&ml.imputations)?, mean_icc(&flat.imputations)?);
        check((icc_ml - 0.2).abs() <= 0.05, || format!("multilevel ICC {icc_ml:.3}"))?;
        check(0.2 - icc_flat > 0.05, || format!("flat ICC {icc_flat:.3} not attenuated"))?;
        Ok(format!("multilevel {icc_ml:.3}, flat {icc_flat:.3}, truth 0.200"))
    });
}

#[test]
fn c06_diagnostics_discrimination() {
    criterion(6, "R̂ separates stationary and drifting chains; AR(1) ACF", Duration::from_secs(60), || {
        let n = 40_000;
        let (stable, drift): (Vec<bool>, Vec<bool>) = (0..100u64)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(rep);
                let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let d: Vec<f64> = w.iter().enumerate().map(|(t, v)| v + 3.0 * t as f64 / n as f64).collect();
                let a = potential_scale_reduction(&w, 4).unwrap().value;
                let b = potential_scale_reduction(&d, 4).unwrap().value;
                (a < 1.02, b > 1.05)
            })
            .unzip();
        let ok_stable = stable.iter().filter(|&&b| b).count();
        let ok_drift = drift.iter().filter(|&&b| b).count();
        check(ok_stable >= 95, || format!("white noise below 1.02 in {ok_stable}/100"))?;
        check(ok_drift >= 95, || format!("drift above 1.05 in {ok_drift}/100"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let mut x = Vec::with_capacity(n);
        let mut prev: f64 = StandardNormal.sample(&mut rng);
        prev /= (1.0f64 - 0.64).sqrt();
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            prev = 0.8 * prev + z;
            x.push(prev);
        }
        let acf1 = autocorrelation(&x, &[1]).map_err(e)?[0].unwrap();
        check((acf1 - 0.8).abs() <= 0.02, || format!("AR(1) lag-1 ACF {acf1:.4}"))?;
        Ok(format!("stable {ok_stable}/100, drift {ok_drift}/100, ACF(1) = {acf1:.3}"))
    });
}

fn random_estimates(rng: &mut ChaCha8Rng) -> (Vec<Estimates>, usize) {
    let m = rng.random_range(2..=10);
    let p = rng.random_range(1..=4);
    let names: Vec<String> = (0..p).map(|i| format!("b{i}")).collect();
    let sets = (0..m)
        .map(|_| {
            let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let vcov = &a * a.transpose() + DMatrix::identity(p, p) * 0.1;
            let values = (0..p).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
            Estimates::new(names.clone(), values, vcov).unwrap()
        })
        .collect();
    (sets, p)
}

fn ml_fits(model: &AnalysisModel, imps: &[Dataset]) -> mlmi::Result<Vec<LmmFit>> {
    imps.par_iter().map(|d| fit_lmm(model, d)).collect()
}

fn d3(full_model: &AnalysisModel, null_model: &AnalysisModel, imps: &[Dataset]) -> mlmi::Result<mlmi::DTestResult> {
    let full = ml_fits(full_model, imps)?;
    let null = ml_fits(null_model, imps)?;
    let df: Vec<_> = imps.iter().map(|d| build_design(&full_model.formula, d)).collect::<mlmi::Result<_>>()?;
    let dn: Vec<_> = imps.iter().map(|d| build_design(&null_model.formula, d)).collect::<mlmi::Result<_>>()?;
    pool_lrt_d3(&full, &null, |w, l, p| {
        let design = if w == Which::Full { &df[l] } else { &dn[l] };
        mlmi::lmm::loglik_design(design, &p.beta, &p.psi, p.sigma2)
    })
}

#[test]
fn c07_cross_procedure_consistency() {
    criterion(7, "D1/t², D3 self-comparison, D2 equal statistics", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (sets, p) = random_estimates(&mut rng);
            let k = rng.random_range(0..p);
            let pooled = pool_estimates(&sets, false).map_err(e)?;
            let name = format!("b{k}");
            let d1 = pool_constraints(&sets, &[name.as_str()]).map_err(e)?;
            let t2 = pooled.parameters[k].t_value.powi(2);
            let rel = (d1.f_value - t2).abs() / t2.max(1.0);
            worst = worst.max(rel);
            check(rel <= 1e-8, || format!("D1 {} vs t² {t2}", d1.f_value))?;
        }

        let mut spec = TwoLevelSpec::random_intercept(20, 8, 0.3, 1.0, 71);
        spec.covariates = vec!["x".into()];
        spec.beta = DMatrix::from_column_slice(2, 1, &[0.0, 0.5]);
        let (d, _) = generate_two_level(&spec).map_err(e)?;
        let d = mcar(&d, "y", 0.25, 72);
        let res = run_imputation(&ImputationSpec::new("y ~ 1 + x + (1|group)", 200, 20, 5, 73), &d).map_err(e)?;
        let model = AnalysisModel::parse("y ~ 1 + x + (1|group)", Method::Ml).map_err(e)?;
        let same = d3(&model, &model, &res.imputations).map_err(e)?;
        check(same.f_value == 0.0 && same.p_value == 1.0, || format!("self D3 F={} p={}", same.f_value, same.p_value))?;

        let stats = [3.7; 6];
        let d2 = pool_chisq_d2(&stats, 2).map_err(e)?;
        check((d2.f_value - 3.7 / 2.0).abs() <= 1e-12, || format!("D2 F = {}", d2.f_value))?;

        let null = AnalysisModel::parse("y ~ 1 + (1|group)", Method::Ml).map_err(e)?;
        let (lr, k) = lrt_statistics(&ml_fits(&model, &res.imputations).map_err(e)?, &ml_fits(&null, &res.imputations).map_err(e)?).map_err(e)?;
        check(k == 1 && lr.iter().all(|s| *s >= 0.0), || format!("LRT statistics {lr:?}, k = {k}"))?;
        Ok(format!("max |D1 − t²| rel {worst:.1e}; self D3 F = 0, p = 1; D2 F = d̄/k"))
    });
}

fn slope_replication(rep: u64, slope_var: f64) -> mlmi::Result<bool> {
    let spec = TwoLevelSpec {
        n_groups: 150,
        group_size: 25,
        group_name: "group".into(),
        responses: vec!["y".into()],
        covariates: vec!["x".into()],
        covariate_icc: 0.0,
        random_slopes: vec!["x".into()],
        beta: DMatrix::from_column_slice(2, 1, &[10.0, 2.0]),
        psi: DMatrix::from_row_slice(2, 2, &[10.0, 0.0, 0.0, slope_var]),
        sigma: DMatrix::from_element(1, 1, 50.0),
        seed: 8000 + rep,
    };
    let (full, _) = generate_two_level(&spec)?;
    let d = mcar(&full, "y", 0.2, 9000 + rep);
    let mut imp = ImputationSpec::new("y ~ 1 + x + (1 + x|group)", 500, 50, 20, 10_000 + rep);
    // The default Ψ scale (observed variance of y) adds about var(y)/J of
    // slope variance to the imputations and pushes the null rejection rate
    // to ~13%; a scale 100 times smaller keeps it near nominal.
    let design = build_design(&mlmi::parse_formula(&imp.formula)?, &d)?;
    let mut prior = default_prior(1, 2, &observed_variances(&design))?;
    prior.lambda_psi *= 0.01;
    imp.prior = Some(prior);
    let res = run_imputation(&imp, &d)?;
    let alt = AnalysisModel::parse("y ~ 1 + x + (1 + x|group)", Method::Ml)?;
    let null = AnalysisModel::parse("y ~ 1 + x + (1|group)", Method::Ml)?;
    Ok(d3(&alt, &null, &res.imputations)?.p_value < 0.05)
}

#[test]
fn c08_pooled_lrt_power() {
    criterion(8, "D3 rejects zero slope variance (J=150, n=25, m=20, weak Ψ prior)", Duration::from_secs(1800), || {
        let alt: Vec<bool> = (0..20u64).into_par_iter().map(|r| slope_replication(r, 1.5)).collect::<mlmi::Result<_>>().map_err(e)?;
        let null: Vec<bool> = (0..20u64).into_par_iter().map(|r| slope_replication(100 + r, 0.0)).collect::<mlmi::Result<_>>().map_err(e)?;
        let power = alt.iter().filter(|&&b| b).count();
        let size = null.iter().filter(|&&b| b).count();
        check(power >= 16, || format!("rejected {power}/20 under the alternative"))?;
        check(size <= 2, || format!("rejected {size}/20 under the null"))?;
        Ok(format!("power {power}/20, null rejections {size}/20"))
    });
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 6] = [
        &["synth", "two-level", "--config", "truth_spec.json", "--ampute", "y=0.3", "--out", "d.csv"],
        &["impute", "--config", "impute.json", "--out", "run"],
        &["diagnose", "--chain", "run", "--plot", "Psi[1,1]", "--out", "run/diagnose.txt"],
        &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x + (1 + x|group)", "--method", "ml", "--out", "full"],
        &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x + (1|group)", "--method", "ml", "--out", "null"],
        &["pool", "estimates", "--fits", "full", "--out", "pooled.txt"],
    ];
    let extra: [&[&str]; 2] = [
        &["pool", "compare", "--full", "full", "--null", "null", "--format", "json", "--out", "d3.json"],
        &["pool", "constraints", "--fits", "full", "--constraint", "x", "--out", "d1.txt"],
    ];
    for args in steps.iter().chain(extra.iter()) {
        let out = Command::new(env!("CARGO_BIN_EXE_mlmi"))
            .current_dir(dir)
            .args(*args)
            .output()
            .map_err(|err| err.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

#[test]
fn c09_cli_determinism() {
    criterion(9, "CLI pipeline re-run is byte-identical", Duration::from_secs(120), || {
        let spec = r#"{"n_groups": 40, "group_size": 10, "responses": ["y"], "covariates": ["x"],
            "random_slopes": ["x"], "beta": [[1.0], [0.5]], "psi": [[0.5, 0.1], [0.1, 0.3]],
            "sigma": [[1.0]], "seed": 99}"#;
        let cfg = r#"{"data": "d.csv", "group": "group", "formula": "y ~ 1 + x + (1 + x|group)",
            "n_burn": 300, "n_between": 30, "m": 5, "seed": 2024}"#;
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            fs::write(d.path().join("truth_spec.json"), spec).unwrap();
            fs::write(d.path().join("impute.json"), cfg).unwrap();
            run_pipeline(d.path())?;
        }
        let mut files = vec![
            "d.csv", "d.truth.json", "run/chain.csv", "run/spec.json", "run/diagnose.txt",
            "run/plots/Psi_1_1_trace.svg", "pooled.txt", "d3.json", "d1.txt", "full/analysis.json",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        for l in 1..=5 {
            files.push(format!("run/imp_{l:03}.csv"));
            files.push(format!("full/fit_{l:03}.json"));
        }
        for f in &files {
            let a = fs::read(dirs[0].path().join(f)).map_err(|err| format!("{f}: {err}"))?;
            let b = fs::read(dirs[1].path().join(f)).map_err(|err| format!("{f}: {err}"))?;
            check(a == b, || format!("{f} differs between runs"))?;
        }
        Ok(format!("{} output files identical", files.len()))
    });
}

#[test]
fn c10_pirls_like_fidelity() {
    criterion(10, "pirls_like demo data", Duration::from_secs(60), || {
        let d = pirls_like(2024).map_err(e)?;
        let dpm = d.column("DPM").unwrap().n_missing() as f64 / d.n_rows() as f64;
        check((dpm - 0.614).abs() <= 0.02, || format!("DPM missing {dpm:.3}"))?;
        let r = mlmi::data::pairwise_correlations(&d).map_err(e)?;
        let ma_ra = r.get("MA", "RA").unwrap();
        check((ma_ra - 0.528).abs() <= 0.03, || format!("MA–RA {ma_ra:.3}"))?;
        let p = mlmi::data::pattern_summary(&d, 1.0);
        let dpm_idx = p.names.iter().position(|n| n == "DPM").unwrap();
        let (a, b) = (&p.rows[0].missing, &p.rows[1].missing);
        let diff: Vec<usize> = (0..a.len()).filter(|&k| a[k] != b[k]).collect();
        check(diff == vec![dpm_idx], || format!("top patterns differ in columns {diff:?}"))?;
        Ok(format!(
            "N = {}, DPM missing {:.1}%, MA–RA {ma_ra:.3}, top patterns {:.1}% / {:.1}%",
            d.n_rows(),
            100.0 * dpm,
            100.0 * p.rows[0].rel_pct,
            100.0 * p.rows[1].rel_pct
        ))
    });
}
