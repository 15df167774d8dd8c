//! Convergence diagnostics and posterior summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParameterTable};
use crate::sampler::DrawStore;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic (non-split) potential scale reduction factor.
pub fn psrf(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Numerical("psrf needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Numerical(
            "psrf needs equal-length chains of two or more draws".into(),
        ));
    }
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / chains.len() as f64;
    if !(w > 0.0) {
        return Err(Error::Numerical("zero within-chain variance".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = var(&means);
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Normalized autocorrelations at lags `0..=max_lag`.
pub fn autocorr(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if c0 == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            (0..n - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum::<f64>() / c0
        })
        .collect()
}

fn autocorr_at(x: &[f64], m: f64, c0: f64, k: usize) -> f64 {
    (0..x.len() - k)
        .map(|t| (x[t] - m) * (x[t + k] - m))
        .sum::<f64>()
        / c0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    /// Set when the draws have no variance.
    pub degenerate: bool,
}

/// Effective sample size pooled over chains: S / (1 + 2 Σ ρ̂_k), with ρ̂_k
/// averaged across chains and the sum stopped at the first ρ̂_k ≤ 0.
pub fn ess(chains: &[&[f64]]) -> Ess {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let stats: Vec<(f64, f64)> = chains
        .iter()
        .map(|c| {
            let m = mean(c);
            (m, c.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        })
        .collect();
    let live: Vec<usize> = (0..chains.len()).filter(|&i| stats[i].1 > 0.0).collect();
    if live.is_empty() {
        return Ess {
            ess: total as f64,
            degenerate: true,
        };
    }
    let min_len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let mut sum = 0.0;
    for k in 1..min_len {
        let rho = live
            .iter()
            .map(|&i| autocorr_at(chains[i], stats[i].0, stats[i].1, k))
            .sum::<f64>()
            / live.len() as f64;
        if rho <= 0.0 {
            break;
        }
        sum += rho;
    }
    Ess {
        ess: total as f64 / (1.0 + 2.0 * sum),
        degenerate: false,
    }
}

/// Shortest interval covering ⌈mass·S⌉ sorted draws; ties go to the lowest
/// start.
pub fn hpd(draws: &[f64], mass: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::Numerical("hpd of an empty sample".into()));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((mass * s.len() as f64).ceil() as usize).clamp(1, s.len());
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=s.len() - k {
        let w = s[i + k - 1] - s[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    Ok((s[best], s[best + k - 1]))
}

pub fn median(draws: &[f64]) -> f64 {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Mode of a Gaussian kernel density estimate evaluated on a 512-point grid.
pub fn kde_mode(draws: &[f64]) -> f64 {
    let n = draws.len();
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let sd = var(&s).sqrt();
    let q = |p: f64| {
        let h = (n - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return s[0];
    }
    let bw = 0.9 * spread * (n as f64).powf(-0.2);
    let (lo, hi) = (s[0] - 3.0 * bw, s[n - 1] + 3.0 * bw);
    let grid = 512;
    let mut best = (f64::NEG_INFINITY, s[0]);
    for g in 0..grid {
        let x = lo + (hi - lo) * g as f64 / (grid - 1) as f64;
        // sorted draws: only those within 8 bandwidths matter
        let a = s.partition_point(|v| *v < x - 8.0 * bw);
        let b = s.partition_point(|v| *v <= x + 8.0 * bw);
        let d: f64 = s[a..b]
            .iter()
            .map(|v| (-0.5 * ((x - v) / bw).powi(2)).exp())
            .sum();
        if d > best.0 {
            best = (d, x);
        }
    }
    best.1
}

pub fn posterior_sd(draws: &[f64]) -> f64 {
    var(draws).sqrt()
}

pub fn posterior_mean(draws: &[f64]) -> f64 {
    mean(draws)
}

/// One line of the posterior summary, aligned with a parameter-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub lhs: String,
    pub op: String,
    pub rhs: String,
    pub group: usize,
    pub label: Option<String>,
    /// 1-based free index; `None` for fixed rows.
    pub free: Option<usize>,
    /// Posterior mean, or the fixed value.
    pub post_mean: f64,
    pub post_sd: Option<f64>,
    pub hpd_lower: Option<f64>,
    pub hpd_upper: Option<f64>,
    /// `None` for fixed rows and single-chain runs.
    pub psrf: Option<f64>,
    /// Shown on the first row reading each free parameter only.
    pub prior: Option<String>,
    pub post_median: Option<f64>,
    pub post_mode: Option<f64>,
    pub n_eff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryOptions {
    pub hpd_mass: f64,
    /// Add median, mode and effective sample size.
    pub extra: bool,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions {
            hpd_mass: 0.95,
            extra: false,
        }
    }
}

struct FreeStats {
    mean: f64,
    sd: f64,
    hpd: (f64, f64),
    psrf: Option<f64>,
    median: Option<f64>,
    mode: Option<f64>,
    n_eff: Option<f64>,
}

/// Posterior summary in parameter-table order. `priors[k]` is the prior
/// string of free parameter `k` (0-based).
pub fn summarize(
    draws: &DrawStore,
    table: &ParameterTable,
    priors: &[String],
    opts: &SummaryOptions,
) -> Result<Vec<SummaryRow>> {
    let k = table.n_free();
    if draws.n_params() != k || priors.len() != k {
        return Err(Error::Config(format!(
            "summary expects {k} free parameters, got {} draw columns and {} priors",
            draws.n_params(),
            priors.len()
        )));
    }
    if draws.total() == 0 {
        return Err(Error::Numerical("no draws to summarize".into()));
    }
    let stats: Vec<FreeStats> = (0..k)
        .map(|j| {
            let per: Vec<Vec<f64>> = (0..draws.n_chains()).map(|c| draws.param(c, j)).collect();
            let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
            let pooled = draws.pooled(j);
            Ok(FreeStats {
                mean: mean(&pooled),
                sd: if pooled.len() > 1 {
                    var(&pooled).sqrt()
                } else {
                    0.0
                },
                hpd: hpd(&pooled, opts.hpd_mass)?,
                psrf: psrf(&refs).ok(),
                median: opts.extra.then(|| median(&pooled)),
                mode: opts.extra.then(|| kde_mode(&pooled)),
                n_eff: opts.extra.then(|| ess(&refs).ess),
            })
        })
        .collect::<Result<_>>()?;

    let mut seen = vec![false; k];
    Ok(table
        .rows
        .iter()
        .map(|row| {
            let base = SummaryRow {
                name: row.name(),
                lhs: row.lhs.clone(),
                op: row.op.clone(),
                rhs: row.rhs.clone(),
                group: row.group,
                label: row.label.clone(),
                free: row.free,
                post_mean: row.fixed.unwrap_or(0.0),
                post_sd: None,
                hpd_lower: None,
                hpd_upper: None,
                psrf: None,
                prior: None,
                post_median: None,
                post_mode: None,
                n_eff: None,
            };
            let Some(f) = row.free else { return base };
            let s = &stats[f - 1];
            let first = !std::mem::replace(&mut seen[f - 1], true);
            SummaryRow {
                post_mean: s.mean,
                post_sd: Some(s.sd),
                hpd_lower: Some(s.hpd.0),
                hpd_upper: Some(s.hpd.1),
                psrf: s.psrf,
                prior: first.then(|| priors[f - 1].clone()),
                post_median: s.median,
                post_mode: s.mode,
                n_eff: s.n_eff,
                ..base
            }
        })
        .collect())
}

/// Significant-digit style used by the summary table: three decimals,
/// trailing zeros trimmed for HPD bounds.
fn fmt_num(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt_trim(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Loadings,
    Regressions,
    Covariances,
    Intercepts,
    Variances,
}

const SECTIONS: [(Section, &str); 5] = [
    (Section::Loadings, "Latent Variables"),
    (Section::Regressions, "Regressions"),
    (Section::Covariances, "Covariances"),
    (Section::Intercepts, "Intercepts"),
    (Section::Variances, "Variances"),
];

/// Renders summary rows as a plain-text table grouped the way lavaan prints
/// them. Residual terms get a leading dot.
pub fn render_summary(rows: &[SummaryRow], table: &ParameterTable, extra: bool) -> String {
    let endogenous = |v: &str| {
        !table.is_latent(v)
            || table.rows.iter().any(|r| r.op == "~" && r.lhs == v)
            || table.rows.iter().any(|r| r.op == "=~" && r.rhs == v)
    };
    let resid = |v: &str| {
        if endogenous(v) {
            format!(".{v}")
        } else {
            v.to_string()
        }
    };
    let section = |r: &SummaryRow| {
        let row = table
            .rows
            .iter()
            .find(|t| t.lhs == r.lhs && t.op == r.op && t.rhs == r.rhs && t.group == r.group);
        match r.op.as_str() {
            "=~" => Section::Loadings,
            "~" => Section::Regressions,
            "~1" => Section::Intercepts,
            _ => match row.map(|t| table.kind(t)) {
                Some(ParamKind::LatentVariance | ParamKind::ManifestVariance) => Section::Variances,
                _ if r.lhs == r.rhs => Section::Variances,
                _ => Section::Covariances,
            },
        }
    };
    let mut header = format!(
        "{:19}{:>8}{:>9}{:>9}{:>9}{:>9}",
        "", "Estimate", "Post.SD", "HPD.025", "HPD.975", "PSRF"
    );
    if extra {
        header.push_str(&format!("{:>9}{:>9}{:>9}", "Median", "Mode", "Neff"));
    }
    header.push_str("    Prior");

    let mut out = String::new();
    let n_groups = table.n_groups();
    for g in 1..=n_groups {
        if n_groups > 1 {
            let level = table.groups.levels.get(g - 1).cloned().unwrap_or_default();
            out.push_str(&format!("\nGroup {g} [{level}]:\n"));
        }
        for (sec, title) in SECTIONS {
            let rs: Vec<&SummaryRow> = rows
                .iter()
                .filter(|r| r.group == g && section(r) == sec)
                .collect();
            if rs.is_empty() {
                continue;
            }
            out.push_str(&format!("\n{title}:\n{header}\n"));
            let mut current: Option<String> = None;
            for r in rs {
                let (head, item) = match sec {
                    Section::Loadings => {
                        (Some(format!("  {} =~", r.lhs)), format!("    {}", r.rhs))
                    }
                    Section::Regressions => {
                        (Some(format!("  {} ~", r.lhs)), format!("    {}", r.rhs))
                    }
                    Section::Covariances => (
                        Some(format!(" {} ~~", resid(&r.lhs))),
                        format!("   {}", resid(&r.rhs)),
                    ),
                    Section::Intercepts | Section::Variances => {
                        (None, format!("   {}", resid(&r.lhs)))
                    }
                };
                if let Some(h) = head {
                    if current.as_deref() != Some(h.as_str()) {
                        out.push_str(&h);
                        out.push('\n');
                        current = Some(h);
                    }
                }
                let lab = r
                    .label
                    .as_ref()
                    .map(|l| format!("({l})"))
                    .unwrap_or_default();
                let mut line = format!("{:15}{:>4}{:>8}", item, lab, fmt_num(r.post_mean));
                let opt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_default();
                line.push_str(&format!(
                    "{:>9}{:>9}{:>9}{:>9}",
                    opt(r.post_sd, fmt_num),
                    opt(r.hpd_lower, fmt_trim),
                    opt(r.hpd_upper, fmt_trim),
                    if r.free.is_some() && r.psrf.is_none() {
                        "NA".to_string()
                    } else {
                        opt(r.psrf, fmt_num)
                    },
                ));
                if extra {
                    line.push_str(&format!(
                        "{:>9}{:>9}{:>9}",
                        opt(r.post_median, fmt_num),
                        opt(r.post_mode, fmt_num),
                        r.n_eff
                            .map(|v| format!("{}", v.round() as i64))
                            .unwrap_or_default()
                    ));
                }
                if let Some(p) = &r.prior {
                    line.push_str(&format!(" {p:>16}"));
                }
                out.push_str(line.trim_end());
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let e = normals(n, seed);
        let mut x = vec![0.0; n];
        x[0] = e[0] / (1.0 - phi * phi).sqrt();
        for t in 1..n {
            x[t] = phi * x[t - 1] + e[t];
        }
        x
    }

    #[test]
    fn psrf_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_relative_eq!(
            psrf(&[&a, &a]).unwrap(),
            (2.0f64 / 3.0).sqrt(),
            epsilon = 1e-15
        );
        assert!(psrf(&[&[0.0; 5], &[5.0; 5]]).is_err());
        assert!(psrf(&[&a]).is_err());
        let x = normals(100_000, 1);
        let y = normals(100_000, 2);
        let r = psrf(&[&x, &y]).unwrap();
        assert!((0.99..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn psrf_affine_invariance() {
        let x = ar1(2000, 0.7, 3);
        let y = ar1(2000, 0.7, 4);
        let r = psrf(&[&x, &y]).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| 3.0 * v - 7.0).collect();
        let ty: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
        assert_relative_eq!(psrf(&[&tx, &ty]).unwrap(), r, epsilon = 1e-12);
    }

    #[test]
    fn autocorr_examples() {
        let x = normals(10_000, 5);
        let ac = autocorr(&x, 3);
        assert_eq!(ac[0], 1.0);
        assert!(ac[1].abs() < 3.0 / (x.len() as f64).sqrt(), "{}", ac[1]);
        let y = ar1(100_000, 0.8, 6);
        let ac = autocorr(&y, 1);
        assert!((ac[1] - 0.8).abs() < 0.04, "{}", ac[1]);
    }

    #[test]
    fn ess_examples() {
        let x = normals(100_000, 7);
        let e = ess(&[&x]);
        assert!((0.9..=1.1).contains(&(e.ess / 1e5)), "{}", e.ess);
        let y = ar1(100_000, 0.5, 8);
        let e = ess(&[&y]);
        let ratio = e.ess / 1e5;
        assert!((ratio - 1.0 / 3.0).abs() < 0.1 / 3.0, "{ratio}");
        let c = [2.0; 50];
        let e = ess(&[&c]);
        assert!(e.degenerate);
        assert_eq!(e.ess, 50.0);
    }

    #[test]
    fn hpd_examples() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(hpd(&d, 0.95).unwrap(), (1.0, 95.0));
        let x = normals(20_000, 9);
        let (lo, hi) = hpd(&x, 0.95).unwrap();
        assert!((lo + hi).abs() < 0.1, "{lo} {hi}");
        let k = x.iter().filter(|v| **v >= lo && **v <= hi).count();
        assert_eq!(k, (0.95 * 20_000f64).ceil() as usize);
    }

    #[test]
    fn kde_mode_of_normal_sample() {
        let x: Vec<f64> = normals(5000, 10).iter().map(|v| v + 2.0).collect();
        assert!((kde_mode(&x) - 2.0).abs() < 0.2);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
