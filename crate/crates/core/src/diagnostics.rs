//! Convergence checks for stored sampler traces.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::gibbs::ChainStore;

pub const DEFAULT_SEGMENTS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rhat {
    pub value: f64,
    pub n_segments: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Gelman–Rubin statistic over `n_segments` contiguous segments of one
/// chain. Leading values that do not fill a segment are dropped.
pub fn potential_scale_reduction(trace: &[f64], n_segments: usize) -> Result<Rhat> {
    if n_segments < 2 {
        return Err(Error::validation("at least 2 segments are required"));
    }
    if trace.len() < 2 * n_segments {
        return Err(Error::validation(format!(
            "trace of length {} is too short for {n_segments} segments",
            trace.len()
        )));
    }
    let len = trace.len() / n_segments;
    let kept = &trace[trace.len() - len * n_segments..];
    let segments: Vec<&[f64]> = kept.chunks(len).collect();
    let w = segments.iter().map(|s| sample_variance(s)).sum::<f64>() / n_segments as f64;
    let means: Vec<f64> = segments.iter().map(|s| mean(s)).collect();
    let b = len as f64 * sample_variance(&means);
    let l = len as f64;
    // Relative tolerance so that affine rescaling cannot flip the branch.
    let scale = kept.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let tiny = (scale * 1e-15).powi(2);
    let value = if w <= tiny && b <= tiny * l {
        1.0
    } else if w <= tiny {
        f64::INFINITY
    } else {
        (((l - 1.0) / l * w + b / l) / w).sqrt()
    };
    Ok(Rhat { value, n_segments })
}

/// Sample autocorrelations at the given lags; `None` for every lag when the
/// trace has no variance.
pub fn autocorrelation(trace: &[f64], lags: &[usize]) -> Result<Vec<Option<f64>>> {
    let n = trace.len();
    if let Some(&bad) = lags.iter().find(|&&k| k >= n) {
        return Err(Error::validation(format!(
            "lag {bad} is not smaller than the trace length {n}"
        )));
    }
    let m = mean(trace);
    let dev: Vec<f64> = trace.iter().map(|v| v - m).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom <= 0.0 || !denom.is_finite() {
        return Ok(vec![None; lags.len()]);
    }
    Ok(lags
        .iter()
        .map(|&k| {
            if k == 0 {
                return Some(1.0);
            }
            let num: f64 = dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum();
            Some(num / denom)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

/// Quantile by linear interpolation between order statistics at position
/// `(n − 1)·prob`.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn posterior_summary(trace: &[f64]) -> Result<PosteriorSummary> {
    if trace.is_empty() {
        return Err(Error::validation("empty trace"));
    }
    let mut sorted = trace.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = if trace.len() > 1 {
        sample_variance(trace).sqrt()
    } else {
        0.0
    };
    Ok(PosteriorSummary {
        n: trace.len(),
        mean: mean(trace),
        sd,
        q025: quantile(&sorted, 0.025),
        q500: quantile(&sorted, 0.5),
        q975: quantile(&sorted, 0.975),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSummary {
    pub block: String,
    pub min: f64,
    pub q25: f64,
    pub mean: f64,
    pub q75: f64,
    pub max: f64,
    pub largest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub n_segments: usize,
    pub threshold: f64,
    pub iterations_used: usize,
    pub parameters: Vec<(String, f64)>,
    pub blocks: Vec<BlockSummary>,
    pub worst: (String, f64),
    /// Parameters whose R̂ exceeds the threshold, in storage order.
    pub flagged: Vec<String>,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Potential scale reduction (Rhat, imputation phase, {} segments, {} iterations):\n",
            self.n_segments, self.iterations_used
        );
        let _ = writeln!(
            s,
            "{:<7}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "", "Min", "25%", "Mean", "75%", "Max"
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:<7}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
                format!("{}:", b.block),
                b.min,
                b.q25,
                b.mean,
                b.q75,
                b.max
            );
        }
        let _ = writeln!(s, "\nLargest potential scale reduction:");
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}: {}", b.block, b.largest.trim_start_matches(&b.block)))
            .collect();
        let _ = writeln!(s, "{}", parts.join(", "));
        let _ = writeln!(s, "\nWorst: {} = {:.3}", self.worst.0, self.worst.1);
        if self.flagged.is_empty() {
            let _ = writeln!(s, "All parameters below {:.3}.", self.threshold);
        } else {
            let _ = writeln!(
                s,
                "Above {:.3} (longer burn-in may be needed): {}",
                self.threshold,
                self.flagged.join(", ")
            );
        }
        s
    }
}

fn block_of(name: &str) -> &str {
    name.split('[').next().unwrap_or(name)
}

/// R̂ for every parameter over the imputation phase, summarized by block.
pub fn convergence_report(
    store: &ChainStore,
    n_segments: usize,
    threshold: f64,
) -> Result<ConvergenceReport> {
    let start = store.imputation_start();
    let used = store.len() - start;
    if used == 0 {
        return Err(Error::validation("chain has no stored imputation-phase iterations"));
    }
    let parameters: Vec<(String, f64)> = store
        .names
        .iter()
        .zip(&store.values)
        .map(|(n, v)| Ok((n.clone(), potential_scale_reduction(&v[start..], n_segments)?.value)))
        .collect::<Result<_>>()?;

    let mut order: Vec<&str> = Vec::new();
    for (n, _) in &parameters {
        let b = block_of(n);
        if !order.contains(&b) {
            order.push(b);
        }
    }
    let blocks = order
        .iter()
        .map(|&b| {
            let members: Vec<&(String, f64)> =
                parameters.iter().filter(|(n, _)| block_of(n) == b).collect();
            let mut vals: Vec<f64> = members.iter().map(|(_, v)| *v).collect();
            vals.sort_by(f64::total_cmp);
            let largest = worst_of(members.iter().copied()).0;
            BlockSummary {
                block: b.to_string(),
                min: vals[0],
                q25: quantile(&vals, 0.25),
                mean: mean(&vals),
                q75: quantile(&vals, 0.75),
                max: vals[vals.len() - 1],
                largest,
            }
        })
        .collect();
    let worst = worst_of(parameters.iter());
    let flagged = parameters
        .iter()
        .filter(|(_, v)| *v > threshold)
        .map(|(n, _)| n.clone())
        .collect();
    Ok(ConvergenceReport {
        n_segments,
        threshold,
        iterations_used: used,
        parameters,
        blocks,
        worst,
        flagged,
    })
}

/// Largest value; ties go to the name that sorts first.
fn worst_of<'a>(it: impl Iterator<Item = &'a (String, f64)>) -> (String, f64) {
    let mut best: Option<&(String, f64)> = None;
    for p in it {
        best = match best {
            None => Some(p),
            Some(b) => match p.1.total_cmp(&b.1) {
                std::cmp::Ordering::Greater => Some(p),
                std::cmp::Ordering::Equal if p.0 < b.0 => Some(p),
                _ => Some(b),
            },
        };
    }
    best.cloned().unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Trace,
    Acf,
    Posterior,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trace" => Ok(PlotKind::Trace),
            "acf" => Ok(PlotKind::Acf),
            "posterior" => Ok(PlotKind::Posterior),
            other => Err(Error::validation(format!(
                "unknown plot kind '{other}' (expected trace, acf or posterior)"
            ))),
        }
    }
}

/// Delimited table plus an SVG rendering.
#[derive(Debug, Clone)]
pub struct PlotData {
    pub table: String,
    pub svg: String,
}

pub const DEFAULT_MAX_LAG: usize = 30;

/// Trace export covers every stored iteration; the ACF and posterior
/// summary use the imputation phase only.
pub fn export_plot_data(store: &ChainStore, parameter: &str, kind: PlotKind) -> Result<PlotData> {
    let k = store.index_of(parameter).ok_or_else(|| {
        Error::validation(format!("unknown parameter '{parameter}'"))
    })?;
    let all = &store.values[k];
    let post = &all[store.imputation_start()..];
    let mut table = String::new();
    match kind {
        PlotKind::Trace => {
            table.push_str("iteration,phase,value\n");
            for (i, v) in all.iter().enumerate() {
                let _ = writeln!(
                    table,
                    "{},{},{}",
                    store.iterations[i],
                    store.phase(i).as_str(),
                    fmt_f64(*v)
                );
            }
            let pts: Vec<(f64, f64)> = store
                .iterations
                .iter()
                .zip(all)
                .map(|(&t, &v)| (t as f64, v))
                .collect();
            let svg = svg_polyline(parameter, "iteration", &pts);
            Ok(PlotData { table, svg })
        }
        PlotKind::Acf => {
            if post.is_empty() {
                return Err(Error::validation("no imputation-phase iterations stored"));
            }
            let max_lag = DEFAULT_MAX_LAG.min(post.len() - 1);
            let lags: Vec<usize> = (0..=max_lag).collect();
            let acf = autocorrelation(post, &lags)?;
            table.push_str("lag,rho\n");
            let mut pts = Vec::new();
            for (lag, rho) in lags.iter().zip(&acf) {
                match rho {
                    Some(r) => {
                        let _ = writeln!(table, "{lag},{}", fmt_f64(*r));
                        pts.push((*lag as f64, *r));
                    }
                    None => {
                        let _ = writeln!(table, "{lag},undefined");
                    }
                }
            }
            let svg = svg_polyline(parameter, "lag", &pts);
            Ok(PlotData { table, svg })
        }
        PlotKind::Posterior => {
            let s = posterior_summary(post)?;
            table.push_str("statistic,value\n");
            for (name, v) in [
                ("n", s.n as f64),
                ("mean", s.mean),
                ("sd", s.sd),
                ("q2.5", s.q025),
                ("q50", s.q500),
                ("q97.5", s.q975),
            ] {
                let _ = writeln!(table, "{name},{}", fmt_f64(v));
            }
            let pts = density_points(post);
            let svg = svg_polyline(parameter, "value", &pts);
            Ok(PlotData { table, svg })
        }
    }
}

/// Histogram-based density outline with 40 bins.
fn density_points(x: &[f64]) -> Vec<(f64, f64)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![(lo, 1.0)];
    }
    let bins = 40;
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x {
        let b = (((v - lo) / w) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| (lo + (b as f64 + 0.5) * w, c as f64 / (x.len() as f64 * w)))
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_polyline(title: &str, xlabel: &str, pts: &[(f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if pts.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
            let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<title>{title}</title>\n",
            "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
            "<text x=\"{tx}\" y=\"{ly}\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>\n",
            "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{points}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        ly = h - 8.0,
        title = xml_escape(title),
        xlabel = xml_escape(xlabel),
        points = coords.join(" ")
    )
}
