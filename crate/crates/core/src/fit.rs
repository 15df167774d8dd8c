//! Posterior model assessment: PPP, DIC, WAIC, PSIS-LOO, Laplace marginal
//! likelihood and BIC.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::Parameterization;
use crate::likelihood::{implied_moments, sample_stats, total_loglik, ImpliedMoments, SampleStats};
use crate::model::{realize, ParameterTable};
use crate::priors;
use crate::sampler::{DrawStore, Plan, Role, Sys};

const PPP_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeasures {
    pub npar: usize,
    pub logl: f64,
    pub ppp: Option<f64>,
    pub bic: f64,
    pub dic: f64,
    pub p_dic: f64,
    pub waic: Option<f64>,
    pub p_waic: Option<f64>,
    pub looic: Option<f64>,
    pub p_loo: Option<f64>,
    pub margloglik: Option<f64>,
    /// Cases whose Pareto k̂ exceeds 0.7.
    pub high_pareto_k: Vec<usize>,
    pub warnings: Vec<String>,
}

impl FitMeasures {
    /// `name value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
        let rows = [
            ("npar", self.npar.to_string()),
            ("logl", f(Some(self.logl))),
            ("ppp", f(self.ppp)),
            ("bic", f(Some(self.bic))),
            ("dic", f(Some(self.dic))),
            ("p_dic", f(Some(self.p_dic))),
            ("waic", f(self.waic)),
            ("p_waic", f(self.p_waic)),
            ("looic", f(self.looic)),
            ("p_loo", f(self.p_loo)),
            ("margloglik", f(self.margloglik)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:>12} {v:>12}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Upper bound on PPP replicates; draws are thinned evenly.
    pub ppp_replicates: usize,
    pub seed: u64,
    pub threads: bool,
    pub laplace: LaplaceMeasure,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ppp_replicates: 1000,
            seed: 1,
            threads: true,
            laplace: LaplaceMeasure::Reported,
        }
    }
}

fn log_sum_exp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = x.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Casewise log-likelihoods laid out case-major: `ll[i * S + s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CasewiseLoglik {
    pub n: usize,
    pub s: usize,
    pub values: Vec<f64>,
}

impl CasewiseLoglik {
    pub fn from_draw_major(rows: &[Vec<f64>]) -> Self {
        let s = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut values = vec![0.0; n * s];
        for (si, r) in rows.iter().enumerate() {
            for (i, v) in r.iter().enumerate() {
                values[i * s + si] = *v;
            }
        }
        CasewiseLoglik { n, s, values }
    }

    pub fn case(&self, i: usize) -> &[f64] {
        &self.values[i * self.s..(i + 1) * self.s]
    }

    pub fn lppd(&self) -> f64 {
        (0..self.n)
            .map(|i| log_sum_exp(self.case(i).iter().copied()) - (self.s as f64).ln())
            .sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record((1..=self.n).map(|i| format!("case{i}")))?;
        for s in 0..self.s {
            wr.write_record((0..self.n).map(|i| format!("{}", self.values[i * self.s + s])))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// WAIC and its effective number of parameters.
pub fn waic(ll: &CasewiseLoglik) -> Result<(f64, f64)> {
    if ll.s < 2 {
        return Err(Error::Numerical("waic needs at least two draws".into()));
    }
    let lppd = ll.lppd();
    let mut efp = 0.0;
    for i in 0..ll.n {
        let c = ll.case(i);
        let m = c.iter().sum::<f64>() / ll.s as f64;
        efp += c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ll.s as f64 - 1.0);
    }
    Ok((-2.0 * lppd + 2.0 * efp, efp))
}

/// Number of tail weights replaced by generalized Pareto order statistics.
pub fn psis_tail_length(s: usize) -> usize {
    let a = (0.2 * s as f64).ceil() as usize;
    let b = (3.0 * (s as f64).sqrt()).ceil() as usize;
    a.min(b)
}

/// Generalized Pareto fit by probability-weighted moments; returns the
/// shape k̂ (positive = heavy tail) and scale σ̂. `x` must be sorted
/// ascending and nonnegative.
pub fn gpd_fit_pwm(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let a0 = x.iter().sum::<f64>() / n;
    let a1 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (n - 1.0 - i as f64) / (n - 1.0) * v)
        .sum::<f64>()
        / n;
    let d = a0 - 2.0 * a1;
    if !(d > 0.0) || !(a0 > 0.0) {
        return (0.0, a0.max(f64::MIN_POSITIVE));
    }
    let k_hw = a0 / d - 2.0;
    let sigma = 2.0 * a0 * a1 / d;
    (-k_hw, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma / k * ((1.0 - p).powf(-k) - 1.0)
    }
}

/// Pareto-smoothed log weights for one case; returns k̂.
pub fn psis_smooth(lw: &mut [f64]) -> f64 {
    let s = lw.len();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in lw.iter_mut() {
        *v -= max;
    }
    let m = psis_tail_length(s);
    if m < 5 || m >= s {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let cutoff_idx = order[s - m - 1];
    let cutoff = lw[cutoff_idx].exp();
    let tail: Vec<usize> = order[s - m..].to_vec();
    let exceed: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - cutoff).collect();
    if exceed.iter().all(|v| *v <= 0.0) {
        return f64::NAN;
    }
    let (k, sigma) = gpd_fit_pwm(&exceed);
    let raw_max = 0.0; // log of the largest raw weight after shifting
    for (z, &i) in tail.iter().enumerate() {
        let p = (z as f64 + 0.5) / m as f64;
        let v = (cutoff + gpd_quantile(p, k, sigma)).ln();
        lw[i] = v.min(raw_max);
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loo {
    pub looic: f64,
    pub p_loo: f64,
    pub pareto_k: Vec<f64>,
}

pub fn loo(ll: &CasewiseLoglik) -> Result<Loo> {
    if ll.s < 10 {
        return Err(Error::Numerical("loo needs at least ten draws".into()));
    }
    let mut elpd = 0.0;
    let mut ks = Vec::with_capacity(ll.n);
    let mut lw = vec![0.0; ll.s];
    for i in 0..ll.n {
        let c = ll.case(i);
        for (w, v) in lw.iter_mut().zip(c) {
            *w = -v;
        }
        let constant = c.iter().all(|v| *v == c[0]);
        let k = if constant { 0.0 } else { psis_smooth(&mut lw) };
        ks.push(k);
        let num = log_sum_exp(lw.iter().zip(c).map(|(w, v)| w + v));
        let den = log_sum_exp(lw.iter().copied());
        elpd += num - den;
    }
    let looic = -2.0 * elpd;
    Ok(Loo {
        looic,
        p_loo: ll.lppd() + looic / 2.0,
        pareto_k: ks,
    })
}

/// DIC from the log-likelihood at the posterior mean and the per-draw
/// log-likelihoods.
pub fn dic(logl_at_mean: f64, draw_logl: &[f64]) -> (f64, f64) {
    let mean = draw_logl.iter().sum::<f64>() / draw_logl.len() as f64;
    let efp = 2.0 * (logl_at_mean - mean);
    (-2.0 * logl_at_mean + 2.0 * efp, efp)
}

pub fn bic(logl: f64, npar: usize, n: usize) -> f64 {
    -2.0 * logl + npar as f64 * (n as f64).ln()
}

/// Log of the Laplace approximation to ∫ exp(h(u)) du around `mode`.
///
/// The Hessian is taken by central differences with step 1e-4·max(1,|uᵢ|).
/// Returns `None` when h is not finite at the mode or the Hessian is not
/// negative definite.
pub fn laplace_log_integral(h: impl Fn(&[f64]) -> f64, mode: &[f64]) -> Option<f64> {
    let q = mode.len();
    let h0 = h(mode);
    if !h0.is_finite() {
        return None;
    }
    if q == 0 {
        return Some(h0);
    }
    let step: Vec<f64> = mode.iter().map(|x| 1e-4 * x.abs().max(1.0)).collect();
    let mut hess = DMatrix::zeros(q, q);
    let mut u = mode.to_vec();
    let eval = |u: &mut Vec<f64>, i: usize, di: f64, j: usize, dj: f64| {
        let (oi, oj) = (u[i], u[j]);
        u[i] += di;
        u[j] += dj;
        let v = h(u);
        u[i] = oi;
        u[j] = oj;
        v
    };
    for i in 0..q {
        let hi = step[i];
        let fp = eval(&mut u, i, hi, i, 0.0);
        let fm = eval(&mut u, i, -hi, i, 0.0);
        hess[(i, i)] = (fp - 2.0 * h0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = step[j];
            let fpp = eval(&mut u, i, hi, j, hj);
            let fpm = eval(&mut u, i, hi, j, -hj);
            let fmp = eval(&mut u, i, -hi, j, hj);
            let fmm = eval(&mut u, i, -hi, j, -hj);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let neg = -hess;
    let chol = neg.cholesky()?;
    let log_det_info = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_info + h0)
}

/// Coordinates used for the Laplace approximation: linear parameters as is,
/// variances on the scale their prior describes, srs covariances as
/// correlations, and unrestricted blocks through their precision matrix.
struct Coords<'a> {
    table: &'a ParameterTable,
    plan: &'a Plan,
}

impl Coords<'_> {
    fn var_of(&self, theta: &[f64], g: usize, sys: Sys, i: usize) -> Option<f64> {
        let mats = realize(self.table, theta).ok()?;
        let gm = &mats.groups[g];
        Some(match sys {
            Sys::Manifest => gm.theta[(i, i)],
            Sys::Latent => gm.psi[(i, i)],
        })
    }

    fn to_coords(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let plan = self.plan;
        let mut u = theta.to_vec();
        let mats = realize(self.table, theta).ok()?;
        for t in 0..plan.n_free {
            match plan.roles[t] {
                Role::Variance { .. } => u[t] = priors::to_native(plan.priors[t].scale, theta[t])?,
                Role::Pair { g, sys, pair } => {
                    let pat = plan.groups[g].pattern(sys);
                    let gm = &mats.groups[g];
                    let cov = match sys {
                        Sys::Manifest => &gm.theta,
                        Sys::Latent => &gm.psi,
                    };
                    let (r, c) = (pat.r[pair], pat.c[pair]);
                    u[t] = theta[t] / (cov[(r, r)] * cov[(c, c)]).sqrt();
                }
                _ => {}
            }
        }
        for (g, gp) in plan.groups.iter().enumerate() {
            for (b, bp) in gp.blocks.iter().enumerate() {
                let k = bp.members.len();
                let psi = DMatrix::from_fn(k, k, |a, c| {
                    mats.groups[g].psi[(bp.members[a], bp.members[c])]
                });
                let omega = psi.cholesky()?.inverse();
                for t in 0..plan.n_free {
                    if let Role::Block { g: gg, block, i, j } = plan.roles[t] {
                        if gg == g && block == b {
                            let a = bp.members.iter().position(|x| *x == i)?;
                            let c = bp.members.iter().position(|x| *x == j)?;
                            u[t] = omega[(a, c)];
                        }
                    }
                }
            }
        }
        Some(u)
    }

    /// Inverse of `to_coords` plus the log prior density in coordinates.
    fn from_coords(&self, u: &[f64]) -> Option<(Vec<f64>, f64)> {
        let plan = self.plan;
        let mut theta = u.to_vec();
        let mut lp = 0.0;
        for t in 0..plan.n_free {
            let prior = &plan.priors[t];
            match plan.roles[t] {
                Role::Linear { .. } => lp += priors::log_density(prior, u[t]),
                Role::Variance { .. } => {
                    lp += priors::log_density_native(prior, u[t]);
                    theta[t] = priors::from_native(prior.scale, u[t]);
                    if !(theta[t] > 0.0) {
                        return None;
                    }
                }
                Role::Pair { .. } => lp += priors::log_density(prior, u[t]),
                Role::Block { .. } => {}
                Role::FaVariance { .. } => return None,
            }
        }
        for t in 0..plan.n_free {
            if let Role::Pair { g, sys, pair } = plan.roles[t] {
                let pat = plan.groups[g].pattern(sys);
                let (r, c) = (pat.r[pair], pat.c[pair]);
                let vr = self.var_of(&theta, g, sys, r)?;
                let vc = self.var_of(&theta, g, sys, c)?;
                theta[t] = u[t] * (vr * vc).sqrt();
            }
        }
        for (g, gp) in plan.groups.iter().enumerate() {
            for (b, bp) in gp.blocks.iter().enumerate() {
                let k = bp.members.len();
                let mut omega = DMatrix::zeros(k, k);
                let mut ts = Vec::new();
                for t in 0..plan.n_free {
                    if let Role::Block { g: gg, block, i, j } = plan.roles[t] {
                        if gg == g && block == b {
                            let a = bp.members.iter().position(|x| *x == i)?;
                            let c = bp.members.iter().position(|x| *x == j)?;
                            omega[(a, c)] = u[t];
                            omega[(c, a)] = u[t];
                            ts.push((t, a, c));
                        }
                    }
                }
                lp += wishart_identity_log_density(&omega, bp.df);
                let psi = omega.cholesky()?.inverse();
                for (t, a, c) in ts {
                    theta[t] = psi[(a, c)];
                }
            }
        }
        Some((theta, lp))
    }
}

/// Log density of Wishart(I, df) at Ω.
fn wishart_identity_log_density(omega: &DMatrix<f64>, df: f64) -> f64 {
    let k = omega.nrows();
    let Some(chol) = omega.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kf = k as f64;
    0.5 * (df - kf - 1.0) * log_det
        - 0.5 * omega.trace()
        - 0.5 * df * kf * std::f64::consts::LN_2
        - priors::ln_multivariate_gamma(k, 0.5 * df)
}

/// Measure the Laplace integral is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LaplaceMeasure {
    /// Reported parameters (variances, covariances), with each prior density
    /// evaluated on the scale it is written on and no change-of-variable
    /// term.
    #[default]
    Reported,
    /// Sampled coordinates (variances on their prior's scale, correlations,
    /// block precisions) with a proper prior density.
    Sampled,
}

impl std::str::FromStr for LaplaceMeasure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reported" => Ok(LaplaceMeasure::Reported),
            "sampled" => Ok(LaplaceMeasure::Sampled),
            _ => Err(Error::Config(format!(
                "laplace measure must be `reported` or `sampled`, got `{s}`"
            ))),
        }
    }
}

/// log |det ∂θ/∂u| by central differences.
fn log_abs_det_jacobian(coords: &Coords, u: &[f64]) -> Option<f64> {
    let q = u.len();
    let mut jac = DMatrix::zeros(q, q);
    let mut x = u.to_vec();
    for b in 0..q {
        let h = 1e-6 * u[b].abs().max(1.0);
        x[b] = u[b] + h;
        let (tp, _) = coords.from_coords(&x)?;
        x[b] = u[b] - h;
        let (tm, _) = coords.from_coords(&x)?;
        x[b] = u[b];
        for a in 0..q {
            jac[(a, b)] = (tp[a] - tm[a]) / (2.0 * h);
        }
    }
    let det = jac.lu().determinant();
    (det != 0.0 && det.is_finite()).then(|| det.abs().ln())
}

/// Laplace approximation of the log marginal likelihood at `theta_star`.
///
/// The Hessian is always taken in the sampled coordinates, where the
/// posterior is closest to normal. Under [`LaplaceMeasure::Reported`] the
/// result is moved to the reported-parameter measure by adding
/// log |det ∂θ/∂u| at the mode.
pub fn marg_loglik(
    table: &ParameterTable,
    plan: &Plan,
    stats: &[SampleStats],
    theta_star: &[f64],
    measure: LaplaceMeasure,
) -> Result<Option<f64>> {
    if plan.cp == Parameterization::Fa
        && plan
            .roles
            .iter()
            .any(|r| matches!(r, Role::FaVariance { .. } | Role::Pair { .. }))
    {
        return Ok(None);
    }
    let coords = Coords { table, plan };
    let Some(mode) = coords.to_coords(theta_star) else {
        return Ok(None);
    };
    let h = |u: &[f64]| -> f64 {
        let Some((theta, lp)) = coords.from_coords(u) else {
            return f64::NEG_INFINITY;
        };
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        loglik_at(table, stats, &theta).map_or(f64::NEG_INFINITY, |ll| ll + lp)
    };
    let Some(v) = laplace_log_integral(h, &mode) else {
        return Ok(None);
    };
    Ok(match measure {
        LaplaceMeasure::Sampled => Some(v),
        LaplaceMeasure::Reported => log_abs_det_jacobian(&coords, &mode).map(|j| v + j),
    })
}

/// Marginal (latent-integrated) log-likelihood at a parameter vector.
pub fn loglik_at(table: &ParameterTable, stats: &[SampleStats], theta: &[f64]) -> Result<f64> {
    let mom = implied_moments(&realize(table, theta)?)?;
    total_loglik(stats, &mom)
}

pub fn posterior_means(draws: &DrawStore) -> Vec<f64> {
    let k = draws.n_params();
    let mut m = vec![0.0; k];
    for d in draws.all_draws() {
        for (a, v) in m.iter_mut().zip(d) {
            *a += v;
        }
    }
    let total = draws.total() as f64;
    m.iter_mut().for_each(|v| *v /= total);
    m
}

fn moments_of(table: &ParameterTable, theta: &[f64]) -> Result<ImpliedMoments> {
    implied_moments(&realize(table, theta)?)
}

/// Per-draw casewise log-likelihoods, draws ordered chain by chain.
pub fn casewise_over_draws(
    table: &ParameterTable,
    draws: &DrawStore,
    data: &[DMatrix<f64>],
    threads: bool,
) -> Result<CasewiseLoglik> {
    let per_chain = |c: usize| -> Result<Vec<Vec<f64>>> {
        let k = draws.n_params();
        draws.chains[c]
            .chunks(k.max(1))
            .take(draws.n_iter)
            .map(|theta| {
                let mom = moments_of(table, theta)?;
                crate::likelihood::casewise_loglik(data, &mom)
            })
            .collect()
    };
    let chains: Vec<Vec<Vec<f64>>> = if threads && draws.n_chains() > 1 {
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..draws.n_chains())
                .map(|c| s.spawn(move || per_chain(c)))
                .collect();
            hs.into_iter()
                .map(|h| {
                    h.join()
                        .map_err(|_| Error::Numerical("worker thread panicked".into()))?
                })
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..draws.n_chains())
            .map(per_chain)
            .collect::<Result<_>>()?
    };
    let rows: Vec<Vec<f64>> = chains.into_iter().flatten().collect();
    Ok(CasewiseLoglik::from_draw_major(&rows))
}

fn simulate(
    mom: &crate::likelihood::Moments,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let p = mom.mu.len();
    let l = mom
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("implied covariance is not positive definite".into()))?
        .l();
    let mut y = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for j in 0..p {
            z[j] = StandardNormal.sample(rng);
        }
        let x = &mom.mu + &l * &z;
        for j in 0..p {
            y[(i, j)] = x[j];
        }
    }
    Ok(y)
}

/// Posterior predictive p-value of the likelihood-ratio statistic over up
/// to `replicates` evenly thinned draws.
pub fn ppp(
    table: &ParameterTable,
    draws: &DrawStore,
    data: &[DMatrix<f64>],
    replicates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let total = draws.total();
    let r = replicates.min(total);
    if r == 0 {
        return Err(Error::Numerical("ppp needs at least one draw".into()));
    }
    let obs_stats = sample_stats(data);
    let obs_sat: f64 = obs_stats
        .iter()
        .map(|s| s.saturated_loglik())
        .sum::<Result<f64>>()?;
    let all: Vec<&[f64]> = draws.all_draws().take(total).collect();
    let mut exceed = 0usize;
    for j in 0..r {
        let idx = j * total / r;
        let theta = all[idx];
        let mom = moments_of(table, theta)?;
        let lrt_obs = -2.0 * total_loglik(&obs_stats, &mom)? + 2.0 * obs_sat;
        let rep: Vec<DMatrix<f64>> = data
            .iter()
            .zip(&mom)
            .map(|(y, m)| simulate(m, y.nrows(), rng))
            .collect::<Result<_>>()?;
        let rep_stats = sample_stats(&rep);
        let rep_sat: f64 = rep_stats
            .iter()
            .map(|s| s.saturated_loglik())
            .sum::<Result<f64>>()?;
        let lrt_rep = -2.0 * total_loglik(&rep_stats, &mom)? + 2.0 * rep_sat;
        if lrt_rep > lrt_obs {
            exceed += 1;
        }
    }
    Ok(exceed as f64 / r as f64)
}

/// Every fit measure from a completed run.
pub fn fit_measures(
    table: &ParameterTable,
    plan: &Plan,
    draws: &DrawStore,
    data: &[DMatrix<f64>],
    opts: &FitOptions,
) -> Result<FitMeasures> {
    let npar = plan.n_free;
    let n: usize = data.iter().map(|d| d.nrows()).sum();
    let stats = sample_stats(data);
    let mut warnings = Vec::new();
    let theta_hat = posterior_means(draws);
    let logl = loglik_at(table, &stats, &theta_hat)?;

    let draw_ll: Vec<f64> = draws
        .all_draws()
        .take(draws.total())
        .map(|t| loglik_at(table, &stats, t))
        .collect::<Result<_>>()?;
    let (dic, p_dic) = if draw_ll.is_empty() {
        (-2.0 * logl, 0.0)
    } else {
        dic(logl, &draw_ll)
    };

    let ll = casewise_over_draws(table, draws, data, opts.threads)?;
    let (waic_v, p_waic) = match waic(&ll) {
        Ok((w, p)) => (Some(w), Some(p)),
        Err(e) => {
            warnings.push(format!("waic: {e}"));
            (None, None)
        }
    };
    let (looic, p_loo, high) = match loo(&ll) {
        Ok(l) => {
            let high: Vec<usize> = l
                .pareto_k
                .iter()
                .enumerate()
                .filter(|(_, k)| **k > 0.7)
                .map(|(i, _)| i + 1)
                .collect();
            if !high.is_empty() {
                warnings.push(format!("{} cases have Pareto k above 0.7", high.len()));
            }
            (Some(l.looic), Some(l.p_loo), high)
        }
        Err(e) => {
            warnings.push(format!("loo: {e}"));
            (None, None, Vec::new())
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(PPP_STREAM);
    let ppp_v = match ppp(table, draws, data, opts.ppp_replicates, &mut rng) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("ppp: {e}"));
            None
        }
    };
    let margloglik = marg_loglik(table, plan, &stats, &theta_hat, opts.laplace)?;
    if margloglik.is_none() {
        warnings.push("marginal log-likelihood unavailable (Hessian not negative definite or fa parameterization)".into());
    }
    Ok(FitMeasures {
        npar,
        logl,
        ppp: ppp_v,
        bic: bic(logl, npar, n),
        dic,
        p_dic,
        waic: waic_v,
        p_waic,
        looic,
        p_loo,
        margloglik,
        high_pareto_k: high,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn waic_hand_example() {
        let ll = CasewiseLoglik::from_draw_major(&[vec![0.2f64.ln()], vec![0.4f64.ln()]]);
        let (w, p) = waic(&ll).unwrap();
        let lppd = 0.3f64.ln();
        let d = 0.4f64.ln() - 0.2f64.ln();
        let efp = d * d / 2.0;
        assert_relative_eq!(ll.lppd(), lppd, epsilon = 1e-12);
        assert_relative_eq!(p, efp, epsilon = 1e-12);
        assert_relative_eq!(w, -2.0 * lppd + 2.0 * efp, epsilon = 1e-12);
        assert!((p - 0.2402).abs() < 5e-5);
        assert!((w - 2.888).abs() < 5e-4);
    }

    #[test]
    fn identical_draws() {
        let rows = vec![vec![-1.0, -2.0]; 20];
        let ll = CasewiseLoglik::from_draw_major(&rows);
        let (w, p) = waic(&ll).unwrap();
        assert_eq!(p, 0.0);
        assert_relative_eq!(w, 6.0, epsilon = 1e-12);
        let l = loo(&ll).unwrap();
        assert_relative_eq!(l.looic, 6.0, epsilon = 1e-12);
        assert_relative_eq!(l.p_loo, 0.0, epsilon = 1e-12);
        assert!(waic(&CasewiseLoglik::from_draw_major(&[vec![0.0]])).is_err());
        assert!(loo(&CasewiseLoglik::from_draw_major(&vec![vec![0.0]; 9])).is_err());
        let (d, pd) = dic(-3.0, &[-3.0, -3.0]);
        assert_eq!((d, pd), (6.0, 0.0));
    }

    #[test]
    fn tail_rule_and_gpd_fit() {
        assert_eq!(psis_tail_length(4000), 190);
        assert_eq!(psis_tail_length(100), 20);
        // exponential exceedances: k ≈ 0, σ ≈ 1
        let mut x: Vec<f64> = (1..=2000)
            .map(|i| -(1.0 - (i as f64 - 0.5) / 2000.0).ln())
            .collect();
        x.sort_by(f64::total_cmp);
        let (k, s) = gpd_fit_pwm(&x);
        assert!(k.abs() < 0.02 && (s - 1.0).abs() < 0.02, "{k} {s}");
        // Pareto quantiles with shape 0.5
        let x: Vec<f64> = (1..=2000)
            .map(|i| gpd_quantile((i as f64 - 0.5) / 2000.0, 0.5, 2.0))
            .collect();
        let (k, s) = gpd_fit_pwm(&x);
        assert!((k - 0.5).abs() < 0.03 && (s - 2.0).abs() < 0.1, "{k} {s}");
    }

    #[test]
    fn bic_formula() {
        assert_relative_eq!(
            bic(-1550.336, 39, 75),
            3100.672 + 39.0 * 75f64.ln(),
            epsilon = 1e-9
        );
        assert_eq!(bic(-10.0, 0, 50), 20.0);
        assert_relative_eq!(
            bic(-10.0, 3, 100) - bic(-10.0, 3, 50),
            3.0 * 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn laplace_is_exact_for_gaussian_integrand() {
        // ∫ exp(-½ uᵀAu + c) du = c + (q/2)ln 2π − ½ ln|A|
        let a = [[2.0, 0.3], [0.3, 1.0]];
        let h = |u: &[f64]| {
            -0.5 * (a[0][0] * u[0] * u[0] + 2.0 * a[0][1] * u[0] * u[1] + a[1][1] * u[1] * u[1])
                + 1.5
        };
        let det: f64 = 2.0 * 1.0 - 0.09;
        let exact = 1.5 + (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        assert_relative_eq!(
            laplace_log_integral(h, &[0.0, 0.0]).unwrap(),
            exact,
            epsilon = 1e-6
        );
        assert!(laplace_log_integral(|u: &[f64]| u[0] * u[0], &[0.0]).is_none());
    }
}
