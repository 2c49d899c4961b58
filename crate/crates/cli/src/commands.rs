use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mlmi::data::{pairwise_correlations, pattern_summary};
use mlmi::diagnostics::{convergence_report, export_plot_data, PlotKind};
use mlmi::gibbs::ImputationMode;
use mlmi::lmm::loglik_design;
use mlmi::pooling::{lrt_statistics, Which};
use mlmi::synthetic::{pirls_correlation, pirls_covariances, Amputation, Mechanism, PIRLS_VARIABLES};
use mlmi::transforms::{apply_script, apply_to_all, parse_script, Transform};
use mlmi::{
    ampute, build_design, fit_lmm, generate_two_level, load_dataset, pirls_like, pool_chisq_d2,
    pool_constraints, pool_estimates, pool_lrt_d3, run_imputation, AnalysisModel, ChainStore,
    Dataset, DesignMatrices, Estimates, ImputationSpec, LmmFit, LoadOptions, Method, Prior,
    TwoLevelSpec,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::files::{
    create_dir, delimiter_byte, emit, list_numbered, numbered_name, read_json, read_text, to_json,
    write_json, write_text,
};
use crate::{
    usage, AnalyzeArgs, CliError, CliResult, CompareMethod, CorrelateArgs, DataArgs, DiagnoseArgs,
    Format, ImputeArgs, ModeArg, PatternsArgs, PoolCommand, ReportArgs, SynthArgs, SynthModel,
    TransformArgs, TwoLevelArgs,
};

const IMP_PREFIX: &str = "imp";
const FIT_PREFIX: &str = "fit";
const CHAIN_FILE: &str = "chain.csv";
const SPEC_FILE: &str = "spec.json";
const ANALYSIS_FILE: &str = "analysis.json";

fn load_file(path: &Path, group: &str, delimiter: u8, columns: Option<Vec<String>>) -> CliResult<Dataset> {
    let text = read_text(path)?;
    let opts = LoadOptions {
        group: group.to_string(),
        delimiter,
        columns,
    };
    load_dataset(text.as_bytes(), &opts).map_err(|e| {
        eprintln!("while reading {}", path.display());
        e.into()
    })
}

fn load_data(a: &DataArgs) -> CliResult<Dataset> {
    load_file(&a.data, &a.group, delimiter_byte(a.delimiter)?, a.columns.clone())
}

fn report<T: Serialize>(r: &ReportArgs, value: &T, text: impl FnOnce() -> String) -> CliResult<()> {
    let body = match r.format {
        Format::Text => text(),
        Format::Json => to_json(value),
    };
    emit(r.out.as_deref(), &body)
}

/// Removes stale `prefix_N.ext` outputs of an earlier run.
fn clear_numbered(dir: &Path, prefix: &str, ext: &str) -> CliResult<()> {
    if let Ok(old) = list_numbered(dir, prefix, ext) {
        for p in old {
            fs::remove_file(&p).map_err(|source| CliError::Io { path: p.clone(), source })?;
        }
    }
    Ok(())
}

pub(crate) fn patterns(a: PatternsArgs) -> CliResult<()> {
    if !(a.cumulative > 0.0 && a.cumulative <= 100.0) {
        return Err(usage("--cumulative must be in (0, 100]"));
    }
    let d = load_data(&a.data)?;
    let table = pattern_summary(&d, a.cumulative / 100.0);
    report(&a.report, &table, || table.to_text())
}

pub(crate) fn correlate(a: CorrelateArgs) -> CliResult<()> {
    let d = load_data(&a.data)?;
    let table = pairwise_correlations(&d)?;
    report(&a.report, &table, || table.to_text())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn truth_path(out: &Path, truth: Option<PathBuf>) -> PathBuf {
    truth.unwrap_or_else(|| out.with_extension("truth.json"))
}

pub(crate) fn synth(a: SynthArgs) -> CliResult<()> {
    match a.model {
        SynthModel::Pirls { seed, out, truth } => {
            let d = pirls_like(seed)?;
            write_text(&out, &d.to_delimited_string(b',')?)?;
            let (between, within) = pirls_covariances();
            let sidecar = serde_json::json!({
                "model": "pirls_like",
                "seed": seed,
                "n_rows": d.n_rows(),
                "n_groups": d.group_index().n_groups(),
                "group": d.group_name(),
                "variables": PIRLS_VARIABLES,
                "correlation": matrix_rows(&pirls_correlation()),
                "between_standardized": matrix_rows(&between),
                "within_standardized": matrix_rows(&within),
            });
            write_json(&truth_path(&out, truth), &sidecar)
        }
        SynthModel::TwoLevel(t) => synth_two_level(t),
    }
}

fn parse_rate(s: &str) -> CliResult<(String, f64)> {
    let (var, rate) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("--ampute expects VAR=RATE, got '{s}'")))?;
    let rate: f64 = rate
        .trim()
        .parse()
        .map_err(|_| usage(format!("--ampute rate '{rate}' is not a number")))?;
    Ok((var.trim().to_string(), rate))
}

fn synth_two_level(a: TwoLevelArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => read_json::<TwoLevelSpec>(p)?,
        None => {
            let icc = a
                .icc
                .ok_or_else(|| usage("two-level needs --config or --icc"))?;
            if !(0.0..1.0).contains(&icc) {
                return Err(usage("--icc must be in [0, 1)"));
            }
            let seed = a.seed.ok_or_else(|| usage("--seed is required"))?;
            TwoLevelSpec::random_intercept(a.groups.unwrap_or(100), a.size.unwrap_or(20), icc, 1.0 - icc, seed)
        }
    };
    if let Some(g) = a.groups {
        spec.n_groups = g;
    }
    if let Some(n) = a.size {
        spec.group_size = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (mut d, truth) = generate_two_level(&spec)?;
    let amputation = if a.ampute.is_empty() {
        None
    } else {
        let rates = a.ampute.iter().map(|s| parse_rate(s)).collect::<CliResult<Vec<_>>>()?;
        let mechanism = match &a.driver {
            Some(driver) => Mechanism::Mar {
                driver: driver.clone(),
                slope: a.slope,
            },
            None => Mechanism::Mcar,
        };
        let amp = Amputation {
            mechanism,
            rates,
            seed: a.ampute_seed.unwrap_or(spec.seed.wrapping_add(1)),
        };
        d = ampute(&d, &amp)?;
        Some(amp)
    };
    write_text(&a.out, &d.to_delimited_string(b',')?)?;
    let icc: serde_json::Map<String, serde_json::Value> = truth
        .icc
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::json!(v)))
        .collect();
    let sidecar = serde_json::json!({
        "model": "two_level",
        "spec": truth.spec,
        "icc": icc,
        "amputation": amputation,
    });
    write_json(&truth_path(&a.out, a.truth), &sidecar)
}

/// Run configuration of `impute`; the resolved form is echoed as spec.json
/// and can be passed back with --config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImputeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_burn: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_between: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace_stride: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<ImputationMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delimiter: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<Prior>,
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("--{flag} is required (flag or config)")))
}

pub(crate) fn impute(a: ImputeArgs) -> CliResult<()> {
    let mut cfg: ImputeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ImputeConfig::default(),
    };
    cfg.data = a.data.or(cfg.data);
    cfg.group = a.group.or(cfg.group);
    cfg.formula = a.formula.or(cfg.formula);
    cfg.n_burn = a.burnin.or(cfg.n_burn).or(Some(1000));
    cfg.n_between = a.between.or(cfg.n_between).or(Some(100));
    cfg.m = a.m.or(cfg.m).or(Some(20));
    cfg.seed = a.seed.or(cfg.seed);
    cfg.trace_stride = a.stride.or(cfg.trace_stride).or(Some(10));
    cfg.mode = a
        .mode
        .map(|m| match m {
            ModeArg::Multilevel => ImputationMode::Multilevel,
            ModeArg::SingleLevel => ImputationMode::SingleLevel,
        })
        .or(cfg.mode)
        .or(Some(ImputationMode::Multilevel));
    cfg.delimiter = a.delimiter.or(cfg.delimiter).or(Some(','));

    let data_path = required(cfg.data.clone(), "data")?;
    let group = required(cfg.group.clone(), "group")?;
    let mut spec = ImputationSpec::new(
        required(cfg.formula.clone(), "formula")?,
        cfg.n_burn.unwrap(),
        cfg.n_between.unwrap(),
        cfg.m.unwrap(),
        required(cfg.seed, "seed")?,
    );
    spec.trace_stride = cfg.trace_stride.unwrap();
    spec.mode = cfg.mode.unwrap();
    spec.prior = cfg.prior.clone();
    let delim = delimiter_byte(cfg.delimiter.unwrap())?;

    let d = load_file(&data_path, &group, delim, None)?;
    let res = run_imputation(&spec, &d)?;

    create_dir(&a.out)?;
    clear_numbered(&a.out, IMP_PREFIX, "csv")?;
    for (l, imp) in res.imputations.iter().enumerate() {
        let name = numbered_name(IMP_PREFIX, l + 1, spec.m, "csv");
        write_text(&a.out.join(name), &imp.to_delimited_string(delim)?)?;
    }
    let mut chain = Vec::new();
    res.chain.write_delimited(&mut chain)?;
    write_text(&a.out.join(CHAIN_FILE), &String::from_utf8_lossy(&chain))?;
    write_json(&a.out.join(SPEC_FILE), &cfg)?;
    eprintln!(
        "imputed {} datasets ({} iterations) in {:.2?} -> {}",
        res.imputations.len(),
        res.iterations,
        res.elapsed,
        a.out.display()
    );
    Ok(())
}

fn plot_stem(param: &str) -> String {
    let s: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    s.trim_end_matches('_').to_string()
}

pub(crate) fn diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let chain_path = if a.chain.is_dir() {
        a.chain.join(CHAIN_FILE)
    } else {
        a.chain.clone()
    };
    let text = read_text(&chain_path)?;
    let store = ChainStore::read_delimited(text.as_bytes())?;
    let rep = convergence_report(&store, a.segments, a.threshold)?;
    report(&a.report, &rep, || rep.to_text())?;

    if a.plot.is_empty() {
        return Ok(());
    }
    let kinds: Vec<PlotKind> = if a.kind.is_empty() {
        vec![PlotKind::Trace, PlotKind::Acf, PlotKind::Posterior]
    } else {
        a.kind.iter().map(|k| k.parse()).collect::<mlmi::Result<_>>()?
    };
    let dir = a.plot_dir.clone().unwrap_or_else(|| {
        chain_path
            .parent()
            .map(|p| p.join("plots"))
            .unwrap_or_else(|| PathBuf::from("plots"))
    });
    create_dir(&dir)?;
    for param in &a.plot {
        for &kind in &kinds {
            let data = export_plot_data(&store, param, kind)?;
            let suffix = match kind {
                PlotKind::Trace => "trace",
                PlotKind::Acf => "acf",
                PlotKind::Posterior => "posterior",
            };
            let stem = format!("{}_{suffix}", plot_stem(param));
            write_text(&dir.join(format!("{stem}.csv")), &data.table)?;
            write_text(&dir.join(format!("{stem}.svg")), &data.svg)?;
        }
    }
    eprintln!("plot data written to {}", dir.display());
    Ok(())
}

fn script_from(a: &TransformArgs) -> CliResult<Vec<Transform>> {
    let text = match (&a.script, &a.script_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => read_text(p)?,
        (None, None) => return Err(usage("--script or --script-file is required")),
    };
    Ok(parse_script(&text)?)
}

pub(crate) fn transform(a: TransformArgs) -> CliResult<()> {
    let script = script_from(&a)?;
    let delim = delimiter_byte(a.delimiter)?;
    if a.input.is_dir() {
        let files = list_numbered(&a.input, IMP_PREFIX, "csv")?;
        let sets = files
            .iter()
            .map(|p| load_file(p, &a.group, delim, None))
            .collect::<CliResult<Vec<_>>>()?;
        let out = apply_to_all(&sets, &script)?;
        create_dir(&a.out)?;
        for (p, d) in files.iter().zip(&out) {
            let name = p.file_name().expect("listed file has a name");
            write_text(&a.out.join(name), &d.to_delimited_string(delim)?)?;
        }
        eprintln!("transformed {} datasets -> {}", out.len(), a.out.display());
    } else {
        let d = load_file(&a.input, &a.group, delim, None)?;
        let out = apply_script(&d, &script)?;
        write_text(&a.out, &out.to_delimited_string(delim)?)?;
    }
    Ok(())
}

/// Run configuration of `analyze`, echoed as analysis.json.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    imputations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delimiter: Option<char>,
}

/// Imputed (or single) datasets named by an analysis config, transformed.
fn analysis_datasets(cfg: &AnalyzeConfig) -> CliResult<Vec<Dataset>> {
    let group = required(cfg.group.clone(), "group")?;
    let delim = delimiter_byte(cfg.delimiter.unwrap_or(','))?;
    let files = match (&cfg.imputations, &cfg.data) {
        (Some(dir), _) => list_numbered(dir, IMP_PREFIX, "csv")?,
        (None, Some(f)) => vec![f.clone()],
        (None, None) => return Err(usage("--imputations or --data is required")),
    };
    let sets = files
        .iter()
        .map(|p| load_file(p, &group, delim, None))
        .collect::<CliResult<Vec<_>>>()?;
    match cfg.transform.as_deref() {
        Some(t) if !t.trim().is_empty() => Ok(apply_to_all(&sets, &parse_script(t)?)?),
        _ => Ok(sets),
    }
}

fn thread_pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| usage(format!("cannot start worker pool: {e}")))
}

pub(crate) fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let mut cfg: AnalyzeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AnalyzeConfig::default(),
    };
    if a.imputations.is_some() {
        cfg.imputations = a.imputations;
        cfg.data = None;
    } else if a.data.is_some() {
        cfg.data = a.data;
        cfg.imputations = None;
    }
    cfg.group = a.group.or(cfg.group);
    cfg.formula = a.formula.or(cfg.formula);
    cfg.method = match a.method {
        Some(m) => Some(m.parse::<Method>()?),
        None => cfg.method.or(Some(Method::Reml)),
    };
    cfg.transform = a.transform.or(cfg.transform);
    cfg.delimiter = a.delimiter.or(cfg.delimiter).or(Some(','));

    let model = AnalysisModel::parse(&required(cfg.formula.clone(), "formula")?, cfg.method.unwrap())?;
    let sets = analysis_datasets(&cfg)?;
    let start = Instant::now();
    let pool = thread_pool(a.jobs)?;
    let fits: Vec<mlmi::Result<LmmFit>> = pool.install(|| sets.par_iter().map(|d| fit_lmm(&model, d)).collect());
    let fits = fits
        .into_iter()
        .enumerate()
        .map(|(l, f)| {
            f.map_err(|e| {
                eprintln!("fit of dataset {} failed", l + 1);
                CliError::from(e)
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    create_dir(&a.out)?;
    clear_numbered(&a.out, FIT_PREFIX, "json")?;
    for (l, fit) in fits.iter().enumerate() {
        if !fit.converged {
            eprintln!("warning: fit {} did not meet the convergence tolerance", l + 1);
        }
        write_json(&a.out.join(numbered_name(FIT_PREFIX, l + 1, fits.len(), "json")), fit)?;
    }
    write_json(&a.out.join(ANALYSIS_FILE), &cfg)?;
    let boundary = fits.iter().filter(|f| f.boundary).count();
    if boundary > 0 {
        eprintln!("note: {boundary} fit(s) have a variance component on the boundary");
    }
    eprintln!("fitted {} datasets in {:.2?} -> {}", fits.len(), start.elapsed(), a.out.display());
    Ok(())
}

fn load_fits(dir: &Path) -> CliResult<Vec<LmmFit>> {
    list_numbered(dir, FIT_PREFIX, "json")?
        .iter()
        .map(|p| read_json(p))
        .collect()
}

pub(crate) fn pool(cmd: PoolCommand) -> CliResult<()> {
    match cmd {
        PoolCommand::Estimates { fits, adjust_df, report: r } => {
            let sets: Vec<Estimates> = load_fits(&fits)?.iter().map(Estimates::from_fit).collect();
            let pooled = pool_estimates(&sets, adjust_df)?;
            report(&r, &pooled, || pooled.to_text())
        }
        PoolCommand::Constraints { fits, constraint, report: r } => {
            let sets: Vec<Estimates> = load_fits(&fits)?.iter().map(Estimates::from_fit).collect();
            let refs: Vec<&str> = constraint.iter().map(String::as_str).collect();
            let res = pool_constraints(&sets, &refs)?;
            report(&r, &res, || res.to_text())
        }
        PoolCommand::Compare { full, null, method, imputations, report: r } => {
            let full_fits = load_fits(&full)?;
            let null_fits = load_fits(&null)?;
            let res = match method {
                CompareMethod::D2 => {
                    let (stats, k) = lrt_statistics(&full_fits, &null_fits)?;
                    pool_chisq_d2(&stats, k)?
                }
                CompareMethod::D3 => compare_d3(&full, &full_fits, &null_fits, imputations)?,
            };
            report(&r, &res, || res.to_text())
        }
    }
}

fn compare_d3(
    full_dir: &Path,
    full: &[LmmFit],
    null: &[LmmFit],
    imputations: Option<PathBuf>,
) -> CliResult<mlmi::DTestResult> {
    let echo = full_dir.join(ANALYSIS_FILE);
    let mut cfg: AnalyzeConfig = if echo.exists() {
        read_json(&echo)?
    } else {
        AnalyzeConfig::default()
    };
    if let Some(dir) = imputations {
        cfg.imputations = Some(dir);
        cfg.data = None;
    }
    if cfg.imputations.is_none() && cfg.data.is_none() {
        return Err(usage(format!(
            "D3 needs the imputed datasets: pass --imputations or keep {} next to the fits",
            ANALYSIS_FILE
        )));
    }
    let first = full.first().ok_or_else(|| usage("no fits of the full model"))?;
    cfg.group = Some(first.group.clone());
    let sets = analysis_datasets(&cfg)?;
    if sets.len() != full.len() {
        return Err(usage(format!(
            "{} imputed datasets but {} fits",
            sets.len(),
            full.len()
        )));
    }
    let designs = |fit: &LmmFit| -> CliResult<Vec<DesignMatrices>> {
        let model = AnalysisModel::parse(&fit.formula, Method::Ml)?;
        sets.iter()
            .map(|d| build_design(&model.formula, d).map_err(CliError::from))
            .collect()
    };
    let df = designs(first)?;
    let dn = designs(null.first().ok_or_else(|| usage("no fits of the null model"))?)?;
    Ok(pool_lrt_d3(full, null, |which, l, p| {
        let design = match which {
            Which::Full => &df[l],
            Which::Null => &dn[l],
        };
        loglik_design(design, &p.beta, &p.psi, p.sigma2)
    })?)
}
