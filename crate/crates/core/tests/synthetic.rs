use mlmi::data::{pairwise_correlations, pattern_summary};
use mlmi::synthetic::{ampute, generate_two_level, pirls_like, Amputation, Mechanism, TwoLevelSpec};
use mlmi::{fit_lmm, icc, AnalysisModel, Method};
use nalgebra::DMatrix;

#[test]
fn pirls_like_matches_targets() {
    let d = pirls_like(1).unwrap();
    assert_eq!(d.n_rows(), 8767);
    assert_eq!(d.group_index().n_groups(), 475);
    let rate = |v: &str| d.column(v).unwrap().n_missing() as f64 / d.n_rows() as f64;
    assert!((rate("DPM") - 0.614).abs() < 0.02, "DPM {}", rate("DPM"));
    assert!((rate("MA") - 0.194).abs() < 0.02, "MA {}", rate("MA"));
    assert!((rate("SES") - 0.35).abs() < 0.02, "SES {}", rate("SES"));
    assert!((rate("DPR") - 0.215).abs() < 0.02, "DPR {}", rate("DPR"));
    assert!((rate("SC") - 0.217).abs() < 0.02, "SC {}", rate("SC"));
    assert_eq!(rate("RA"), 0.0);
    assert_eq!(rate("CA"), 0.0);
    let r = pairwise_correlations(&d).unwrap();
    let ma_ra = r.get("MA", "RA").unwrap();
    assert!((ma_ra - 0.528).abs() < 0.03, "MA-RA {ma_ra}");
    let dpm_dpr = r.get("DPM", "DPR").unwrap();
    assert!((dpm_dpr - 0.782).abs() < 0.03, "DPM-DPR {dpm_dpr}");

    let p = pattern_summary(&d, 0.95);
    let top: Vec<&Vec<bool>> = p.rows.iter().take(2).map(|r| &r.missing).collect();
    let dpm = p.names.iter().position(|n| n == "DPM").unwrap();
    let diff: Vec<usize> = (0..7).filter(|&k| top[0][k] != top[1][k]).collect();
    assert_eq!(diff, vec![dpm], "{top:?}");
    assert!(p.rows.iter().take(2).any(|r| r.missing.iter().all(|&m| !m)));
}

#[test]
fn pirls_like_icc_near_targets() {
    let d = pirls_like(2).unwrap();
    let ma = d.select_rows(&(0..d.n_rows()).filter(|&i| d.column("MA").unwrap().values[i].is_some()).collect::<Vec<_>>()).unwrap();
    let fit = fit_lmm(&AnalysisModel::parse("MA ~ 1 + (1|ID)", Method::Reml).unwrap(), &ma).unwrap();
    let v = icc(&fit).unwrap();
    assert!((v - 0.121).abs() < 0.04, "{v}");
}

#[test]
fn generated_icc_matches_truth() {
    let spec = TwoLevelSpec::random_intercept(200, 20, 0.2, 0.8, 12);
    let (d, truth) = generate_two_level(&spec).unwrap();
    assert!((truth.icc[0].1 - 0.2).abs() < 1e-15);
    let fit = fit_lmm(&AnalysisModel::parse("y ~ 1 + (1|group)", Method::Reml).unwrap(), &d).unwrap();
    assert!((icc(&fit).unwrap() - 0.2).abs() < 0.03);
}

#[test]
fn generated_moments_within_three_se() {
    // Grand mean of J group means has variance (ψ + σ²/n)/J.
    let (j, n, psi, s2) = (300usize, 10usize, 0.5, 1.0);
    let mut spec = TwoLevelSpec::random_intercept(j, n, psi, s2, 5);
    spec.beta = DMatrix::from_element(1, 1, 3.0);
    let (d, _) = generate_two_level(&spec).unwrap();
    let y: Vec<f64> = d.column("y").unwrap().observed().collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let se = ((psi + s2 / n as f64) / j as f64).sqrt();
    assert!((mean - 3.0).abs() < 3.0 * se, "{mean}");
}

#[test]
fn mcar_and_mar_rates() {
    let mut spec = TwoLevelSpec::random_intercept(100, 100, 0.2, 0.8, 1);
    spec.covariates = vec!["x".into()];
    spec.beta = DMatrix::from_column_slice(2, 1, &[0.0, 0.5]);
    let (d, _) = generate_two_level(&spec).unwrap();
    let mcar = ampute(
        &d,
        &Amputation {
            mechanism: Mechanism::Mcar,
            rates: vec![("y".into(), 0.3)],
            seed: 4,
        },
    )
    .unwrap();
    let rate = mcar.column("y").unwrap().n_missing() as f64 / 10_000.0;
    assert!((rate - 0.3).abs() < 0.01, "{rate}");

    let mar = ampute(
        &d,
        &Amputation {
            mechanism: Mechanism::Mar {
                driver: "x".into(),
                slope: 1.0,
            },
            rates: vec![("y".into(), 0.3)],
            seed: 4,
        },
    )
    .unwrap();
    let y = &mar.column("y").unwrap().values;
    let x = &mar.column("x").unwrap().values;
    let (mut miss, mut obs) = (Vec::new(), Vec::new());
    for (yi, xi) in y.iter().zip(x) {
        if yi.is_none() {
            miss.push(xi.unwrap());
        } else {
            obs.push(xi.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&miss) > mean(&obs) + 0.3);
    let rate = miss.len() as f64 / 10_000.0;
    assert!((rate - 0.3).abs() < 0.015, "{rate}");
}
