//! One MCMC chain: working-model state and its update kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use super::plan::{LinCell, LinearMethod, Plan, Role, Step, Sys};
use crate::error::{Error, Result};
use crate::expansion::{sign, Parameterization};
use crate::likelihood::SampleStats;
use crate::model::{realize, GroupMatrices, ParameterTable};
use crate::priors::{self, Family};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const ADAPT_BATCH: usize = 25;
const TARGET_ACCEPT: f64 = 0.44;

/// Working-model parameters of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Work {
    pub nu: DVector<f64>,
    pub alpha: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    /// Inferential variances (diagonals of Θ and Ψ).
    pub theta_var: DVector<f64>,
    pub psi_var: DVector<f64>,
    /// Manifest phantom loadings, variances, correlations (srs) and Θ*.
    pub ld: DMatrix<f64>,
    pub psi_d: DVector<f64>,
    pub rho_d: Vec<f64>,
    pub theta_star: DVector<f64>,
    /// Latent phantom loadings, variances, correlations (srs) and Ψ*.
    pub be: DMatrix<f64>,
    pub psi_e: DVector<f64>,
    pub rho_e: Vec<f64>,
    pub psi_star: DMatrix<f64>,
}

impl Work {
    pub fn from_matrices(gm: &GroupMatrices, plan: &Plan, g: usize) -> Result<Self> {
        let gp = &plan.groups[g];
        let (p, m, v, w) = (plan.p, plan.m, gp.man.v(), gp.lat.v());
        let mut work = Work {
            nu: gm.nu.clone(),
            alpha: gm.alpha.clone(),
            lambda: gm.lambda.clone(),
            beta: gm.beta.clone(),
            theta_var: gm.theta.diagonal(),
            psi_var: gm.psi.diagonal(),
            ld: DMatrix::zeros(p, v),
            psi_d: DVector::from_element(v, 1.0),
            rho_d: vec![0.0; v],
            theta_star: gm.theta.diagonal(),
            be: DMatrix::zeros(m, w),
            psi_e: DVector::from_element(w, 1.0),
            rho_e: vec![0.0; w],
            psi_star: DMatrix::from_diagonal(&gm.psi.diagonal()),
        };
        for b in &gp.blocks {
            for &i in &b.members {
                for &j in &b.members {
                    work.psi_star[(i, j)] = gm.psi[(i, j)];
                }
            }
            let sub = DMatrix::from_fn(b.members.len(), b.members.len(), |a, c| {
                gm.psi[(b.members[a], b.members[c])]
            });
            if sub.cholesky().is_none() {
                return Err(Error::Sampler(
                    "initial latent covariance block is not positive definite".into(),
                ));
            }
        }
        for sys in [Sys::Manifest, Sys::Latent] {
            let pat = gp.pattern(sys);
            let cov = match sys {
                Sys::Manifest => &gm.theta,
                Sys::Latent => &gm.psi,
            };
            for (j, (r, c)) in pat.pairs().enumerate() {
                let s = cov[(r, r)] * cov[(c, c)];
                match plan.cp {
                    Parameterization::Srs => {
                        let rho = cov[(r, c)] / s.sqrt();
                        if !(rho.abs() < 1.0) {
                            return Err(Error::Sampler(
                                "initial correlation outside (-1, 1)".into(),
                            ));
                        }
                        work.rho_mut(sys)[j] = rho;
                    }
                    Parameterization::Fa => {
                        let x = cov[(r, c)];
                        let l = x.abs().sqrt();
                        let ld = work.loadings_mut(sys);
                        ld[(c, j)] = l;
                        ld[(r, j)] = sign(x) * l;
                    }
                }
            }
            let dim = match sys {
                Sys::Manifest => p,
                Sys::Latent => m,
            };
            for i in 0..dim {
                if pat.block_of(i).is_some() {
                    continue;
                }
                if plan.cp == Parameterization::Fa && !pat.pairs_of(i).is_empty() {
                    // Θ* = Θ_ii − Σ λ²ψ
                    let total = work.var(sys, i);
                    let used: f64 = pat
                        .pairs_of(i)
                        .iter()
                        .map(|&j| work.loadings(sys)[(i, j)].powi(2))
                        .sum();
                    work.set_star(sys, i, total - used);
                }
                work.refresh(plan, g, sys, i);
                if !(work.star(sys, i) > 0.0) {
                    return Err(Error::Sampler(
                        "initial values leave a non-positive residual variance in the working model".into(),
                    ));
                }
            }
        }
        Ok(work)
    }

    fn rho_mut(&mut self, sys: Sys) -> &mut Vec<f64> {
        match sys {
            Sys::Manifest => &mut self.rho_d,
            Sys::Latent => &mut self.rho_e,
        }
    }

    fn rho(&self, sys: Sys) -> &[f64] {
        match sys {
            Sys::Manifest => &self.rho_d,
            Sys::Latent => &self.rho_e,
        }
    }

    fn loadings(&self, sys: Sys) -> &DMatrix<f64> {
        match sys {
            Sys::Manifest => &self.ld,
            Sys::Latent => &self.be,
        }
    }

    fn loadings_mut(&mut self, sys: Sys) -> &mut DMatrix<f64> {
        match sys {
            Sys::Manifest => &mut self.ld,
            Sys::Latent => &mut self.be,
        }
    }

    fn phantom_var(&self, sys: Sys) -> &DVector<f64> {
        match sys {
            Sys::Manifest => &self.psi_d,
            Sys::Latent => &self.psi_e,
        }
    }

    fn var(&self, sys: Sys, i: usize) -> f64 {
        match sys {
            Sys::Manifest => self.theta_var[i],
            Sys::Latent => self.psi_var[i],
        }
    }

    fn set_var(&mut self, sys: Sys, i: usize, v: f64) {
        match sys {
            Sys::Manifest => self.theta_var[i] = v,
            Sys::Latent => self.psi_var[i] = v,
        }
    }

    fn star(&self, sys: Sys, i: usize) -> f64 {
        match sys {
            Sys::Manifest => self.theta_star[i],
            Sys::Latent => self.psi_star[(i, i)],
        }
    }

    fn set_star(&mut self, sys: Sys, i: usize, v: f64) {
        match sys {
            Sys::Manifest => self.theta_star[i] = v,
            Sys::Latent => self.psi_star[(i, i)] = v,
        }
    }

    /// Re-derives the working quantities tied to variable `i`.
    ///
    /// srs: Θ*_ii and the phantom loadings on `i` follow from the variance
    /// and the pair correlations. fa: the inferential variance follows from
    /// Θ*_ii, the loadings and the phantom variances.
    fn refresh(&mut self, plan: &Plan, g: usize, sys: Sys, i: usize) {
        let pat = plan.groups[g].pattern(sys);
        let pairs = pat.pairs_of(i);
        match plan.cp {
            Parameterization::Srs => {
                let var = self.var(sys, i);
                let mut star = var;
                for &j in &pairs {
                    let (r, _) = (pat.r[j], pat.c[j]);
                    let rho = self.rho(sys)[j];
                    let a = rho.abs();
                    let l = (a * var).sqrt();
                    self.loadings_mut(sys)[(i, j)] = if i == r { sign(rho) * l } else { l };
                    star -= a * var;
                }
                self.set_star(sys, i, star);
            }
            Parameterization::Fa => {
                if pairs.is_empty() {
                    let v = self.var(sys, i);
                    self.set_star(sys, i, v);
                } else {
                    let total = self.star(sys, i)
                        + pairs
                            .iter()
                            .map(|&j| self.loadings(sys)[(i, j)].powi(2) * self.phantom_var(sys)[j])
                            .sum::<f64>();
                    self.set_var(sys, i, total);
                }
            }
        }
    }

    fn lin(&self, cell: LinCell) -> f64 {
        match cell {
            LinCell::Nu(j) => self.nu[j],
            LinCell::Lambda(j, k) => self.lambda[(j, k)],
            LinCell::Alpha(k) => self.alpha[k],
            LinCell::Beta(k, l) => self.beta[(k, l)],
        }
    }

    fn set_lin(&mut self, cell: LinCell, v: f64) {
        match cell {
            LinCell::Nu(j) => self.nu[j] = v,
            LinCell::Lambda(j, k) => self.lambda[(j, k)] = v,
            LinCell::Alpha(k) => self.alpha[k] = v,
            LinCell::Beta(k, l) => self.beta[(k, l)] = v,
        }
    }

    /// Residuals of manifest equation `a` for every case.
    fn man_resid(&self, y: &DMatrix<f64>, u: &DMatrix<f64>, a: usize, out: &mut Vec<f64>) {
        let m = self.lambda.ncols();
        let v = self.ld.ncols();
        out.clear();
        let lam: Vec<(usize, f64)> = (0..m)
            .map(|k| (k, self.lambda[(a, k)]))
            .filter(|x| x.1 != 0.0)
            .collect();
        let ld: Vec<(usize, f64)> = (0..v)
            .map(|j| (m + j, self.ld[(a, j)]))
            .filter(|x| x.1 != 0.0)
            .collect();
        for i in 0..y.nrows() {
            let mut e = y[(i, a)] - self.nu[a];
            for &(k, l) in lam.iter().chain(&ld) {
                e -= l * u[(i, k)];
            }
            out.push(e);
        }
    }

    /// Residuals of latent equation `k` for every case.
    fn lat_resid(&self, u: &DMatrix<f64>, k: usize, out: &mut Vec<f64>) {
        let m = self.beta.nrows();
        let v = self.ld.ncols();
        let w = self.be.ncols();
        out.clear();
        let b: Vec<(usize, f64)> = (0..m)
            .map(|l| (l, self.beta[(k, l)]))
            .filter(|x| x.1 != 0.0)
            .collect();
        let be: Vec<(usize, f64)> = (0..w)
            .map(|e| (m + v + e, self.be[(k, e)]))
            .filter(|x| x.1 != 0.0)
            .collect();
        for i in 0..u.nrows() {
            let mut z = u[(i, k)] - self.alpha[k];
            for &(c, l) in b.iter().chain(&be) {
                z -= l * u[(i, c)];
            }
            out.push(z);
        }
    }

    fn resid(&self, sys: Sys, y: &DMatrix<f64>, u: &DMatrix<f64>, i: usize, out: &mut Vec<f64>) {
        match sys {
            Sys::Manifest => self.man_resid(y, u, i, out),
            Sys::Latent => self.lat_resid(u, i, out),
        }
    }
}

/// Adaptive random-walk proposal for one Metropolis target.
#[derive(Debug, Clone, PartialEq)]
pub struct MhSlot {
    pub log_scale: f64,
    batch_accepts: usize,
    batch_tries: usize,
    batches: usize,
    pub accepts: u64,
    pub tries: u64,
}

impl Default for MhSlot {
    fn default() -> Self {
        MhSlot {
            log_scale: 0.5f64.ln(),
            batch_accepts: 0,
            batch_tries: 0,
            batches: 0,
            accepts: 0,
            tries: 0,
        }
    }
}

impl MhSlot {
    fn record(&mut self, accepted: bool, adapting: bool) {
        self.tries += 1;
        self.accepts += accepted as u64;
        if !adapting {
            return;
        }
        self.batch_tries += 1;
        self.batch_accepts += accepted as usize;
        if self.batch_tries == ADAPT_BATCH {
            let rate = self.batch_accepts as f64 / ADAPT_BATCH as f64;
            self.batches += 1;
            self.log_scale += 3.0 * (rate - TARGET_ACCEPT) / (self.batches as f64).sqrt();
            self.batch_tries = 0;
            self.batch_accepts = 0;
        }
    }
}

/// Map from a bounded or half-bounded support to the real line.
#[derive(Debug, Clone, Copy)]
enum Transform {
    Identity,
    LogLower(f64),
    LogUpper(f64),
    Logit(f64, f64),
}

impl Transform {
    fn for_support((lo, hi): (f64, f64)) -> Self {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => Transform::Logit(lo, hi),
            (true, false) => Transform::LogLower(lo),
            (false, true) => Transform::LogUpper(hi),
            (false, false) => Transform::Identity,
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::LogLower(lo) => (x - lo).ln(),
            Transform::LogUpper(hi) => (hi - x).ln(),
            Transform::Logit(lo, hi) => ((x - lo) / (hi - x)).ln(),
        }
    }

    fn inverse(self, z: f64) -> f64 {
        match self {
            Transform::Identity => z,
            Transform::LogLower(lo) => lo + z.exp(),
            Transform::LogUpper(hi) => hi - z.exp(),
            Transform::Logit(lo, hi) => {
                let s = 1.0 / (1.0 + (-z).exp());
                lo + (hi - lo) * s
            }
        }
    }

    /// log |dx/dz| at x.
    fn log_jac(self, x: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::LogLower(lo) => (x - lo).ln(),
            Transform::LogUpper(hi) => (hi - x).ln(),
            Transform::Logit(lo, hi) => (x - lo).ln() + (hi - x).ln() - (hi - lo).ln(),
        }
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gamma_draw(shape: f64, rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Ψ ~ inverse-Wishart(scale, df), via the Bartlett decomposition of Ψ⁻¹.
pub fn sample_inverse_wishart(
    scale: &DMatrix<f64>,
    df: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let k = scale.nrows();
    let inv = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("inverse-Wishart scale is not positive definite".into()))?
        .inverse();
    let l = inv
        .cholesky()
        .ok_or_else(|| Error::Numerical("inverse-Wishart scale is not positive definite".into()))?
        .l();
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = l * a;
    let omega = &la * la.transpose();
    let psi = omega
        .cholesky()
        .ok_or_else(|| Error::Numerical("Wishart draw is singular".into()))?
        .inverse();
    Ok(0.5 * (&psi + psi.transpose()))
}

pub struct Chain {
    pub works: Vec<Work>,
    /// Per group n×(m+v+w) latent, phantom-D and phantom-E scores.
    pub u: Vec<DMatrix<f64>>,
    pub mh: Vec<MhSlot>,
    pub rng: ChaCha8Rng,
    scratch: Vec<f64>,
    scratch2: Vec<f64>,
    marginal: Option<Vec<Marginal>>,
    stats: Vec<SampleStats>,
}

impl Chain {
    pub fn new(
        table: &ParameterTable,
        plan: &Plan,
        data: &[DMatrix<f64>],
        theta0: &[f64],
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mats = realize(table, theta0)?;
        let works = mats
            .groups
            .iter()
            .enumerate()
            .map(|(g, gm)| Work::from_matrices(gm, plan, g))
            .collect::<Result<Vec<_>>>()?;
        let u = data
            .iter()
            .enumerate()
            .map(|(g, y)| {
                DMatrix::zeros(
                    y.nrows(),
                    plan.m + plan.groups[g].man.v() + plan.groups[g].lat.v(),
                )
            })
            .collect();
        Ok(Chain {
            works,
            u,
            mh: vec![MhSlot::default(); plan.n_mh],
            rng,
            scratch: Vec::new(),
            scratch2: Vec::new(),
            marginal: None,
            stats: data.iter().map(SampleStats::new).collect(),
        })
    }

    /// One full sweep: latent scores, then every parameter step.
    pub fn iterate(&mut self, plan: &Plan, data: &[DMatrix<f64>], adapting: bool) -> Result<()> {
        let mut drawn = false;
        for step in &plan.steps {
            if !drawn && !step.is_marginal() {
                for g in 0..data.len() {
                    draw_latents(
                        &self.works[g],
                        plan,
                        g,
                        &data[g],
                        &mut self.u[g],
                        &mut self.rng,
                    )?;
                }
                drawn = true;
            }
            match *step {
                Step::Linear {
                    t,
                    method,
                    marginal: true,
                } => {
                    if self.marginal.is_none() {
                        self.marginal = Some(
                            (0..data.len())
                                .map(|g| marginal_moments(&self.works[g], &data[g]))
                                .collect::<Result<_>>()?,
                        );
                    }
                    self.step_linear(plan, data, t, method, adapting, true)?
                }
                Step::Linear { t, method, .. } => {
                    self.step_linear(plan, data, t, method, adapting, false)?
                }
                Step::Collapsed { t, mh } => {
                    self.step_collapsed(plan, t, mh, adapting)?;
                    self.marginal = None;
                }
                Step::Variance { t, conj, mh } => {
                    self.step_variance(plan, data, t, conj, mh, adapting)?
                }
                Step::Rho { t, mh } => self.step_rho(plan, data, t, mh, adapting)?,
                Step::FaLoading { g, sys, pair, end } => {
                    self.step_fa_loading(plan, data, g, sys, pair, end)
                }
                Step::FaPsi { g, sys, pair } => self.step_fa_psi(plan, g, sys, pair),
                Step::FaStar { g, sys, var } => self.step_fa_star(plan, data, g, sys, var),
                Step::Block { g, block } => self.step_block(plan, g, block)?,
            }
        }
        if !drawn {
            for g in 0..data.len() {
                draw_latents(
                    &self.works[g],
                    plan,
                    g,
                    &data[g],
                    &mut self.u[g],
                    &mut self.rng,
                )?;
            }
        }
        self.marginal = None;
        Ok(())
    }

    /// Current inferential parameter vector.
    pub fn theta(&self, plan: &Plan) -> Vec<f64> {
        (0..plan.n_free).map(|t| self.theta_one(plan, t)).collect()
    }

    fn theta_one(&self, plan: &Plan, t: usize) -> f64 {
        {
            match plan.roles[t] {
                Role::Linear { ref cells } => {
                    let (g, c) = cells[0];
                    self.works[g].lin(c)
                }
                Role::Variance { ref cells } => {
                    let (g, s, i) = cells[0];
                    self.works[g].var(s, i)
                }
                Role::FaVariance { g, sys, var } => self.works[g].var(sys, var),
                Role::Pair { g, sys, pair } => {
                    let w = &self.works[g];
                    let pat = plan.groups[g].pattern(sys);
                    let (r, c) = (pat.r[pair], pat.c[pair]);
                    match plan.cp {
                        Parameterization::Srs => {
                            w.rho(sys)[pair] * (w.var(sys, r) * w.var(sys, c)).sqrt()
                        }
                        Parameterization::Fa => {
                            let ld = w.loadings(sys);
                            ld[(r, pair)] * ld[(c, pair)] * w.phantom_var(sys)[pair]
                        }
                    }
                }
                Role::Block { g, i, j, .. } => self.works[g].psi_star[(i, j)],
            }
        }
    }

    fn step_linear(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        t: usize,
        method: LinearMethod,
        adapting: bool,
        marginal: bool,
    ) -> Result<()> {
        let Role::Linear { cells } = &plan.roles[t] else {
            unreachable!("linear step on a linear role")
        };
        let current = self.works[cells[0].0].lin(cells[0].1);
        let mut prec = 0.0;
        let mut lin = 0.0;
        let mut gs: Vec<usize> = cells.iter().map(|c| c.0).collect();
        gs.dedup();
        for g in gs {
            let gc: Vec<LinCell> = cells.iter().filter(|c| c.0 == g).map(|c| c.1).collect();
            let (a, b) = if marginal {
                self.marginal_stats(g, &gc)
            } else {
                self.linear_stats(plan, &data[g], g, &gc, current)?
            };
            prec += a;
            lin += b;
        }
        let prior = &plan.priors[t];
        let value = match method {
            LinearMethod::Conjugate => {
                let (m0, t0) = prior.conjugate_normal().expect("conjugate prior");
                let pp = prec + t0;
                (lin + t0 * m0) / pp + std_normal(&mut self.rng) / pp.sqrt()
            }
            LinearMethod::Truncated => {
                let (lo, hi) = prior.support();
                let (m0, t0) = match prior.family {
                    Family::Normal { mean, precision } => (mean, precision),
                    _ => (0.0, 0.0),
                };
                let pp = prec + t0;
                if pp > 0.0 {
                    let mean = (lin + t0 * m0) / pp;
                    priors::sample_truncated_normal(mean, pp.sqrt().recip(), lo, hi, &mut self.rng)
                        .unwrap_or(current)
                } else {
                    let u: f64 = self.rng.random();
                    lo + u * (hi - lo)
                }
            }
            LinearMethod::Metropolis(slot) => {
                let target = |b: f64| -0.5 * prec * b * b + lin * b + priors::log_density(prior, b);
                let tr = Transform::for_support(prior.support());
                self.metropolis(slot, tr, current, target, adapting)
            }
        };
        for &(g, c) in cells {
            self.works[g].set_lin(c, value);
        }
        Ok(())
    }

    /// Sets free parameter `t` (inferential value, or ρ for srs pairs) and
    /// re-derives the working quantities that depend on it.
    fn set_param(&mut self, plan: &Plan, t: usize, v: f64) {
        match &plan.roles[t] {
            Role::Linear { cells } => {
                for &(g, c) in cells {
                    self.works[g].set_lin(c, v);
                }
            }
            Role::Variance { cells } => {
                for &(g, s, i) in cells {
                    self.works[g].set_var(s, i, v);
                    self.works[g].refresh(plan, g, s, i);
                }
            }
            Role::Pair { g, sys, pair } => {
                let pat = plan.groups[*g].pattern(*sys);
                let (r, c) = (pat.r[*pair], pat.c[*pair]);
                self.works[*g].rho_mut(*sys)[*pair] = v;
                self.works[*g].refresh(plan, *g, *sys, r);
                self.works[*g].refresh(plan, *g, *sys, c);
            }
            _ => unreachable!("collapsed moves cover linear, variance and srs pair roles"),
        }
    }

    fn get_param(&self, plan: &Plan, t: usize) -> f64 {
        match plan.roles[t] {
            Role::Pair { g, sys, pair } => self.works[g].rho(sys)[pair],
            _ => self.theta_one(plan, t),
        }
    }

    fn collapsed_loglik(&self, groups: &[usize]) -> f64 {
        groups
            .iter()
            .map(|&g| marginal_loglik(&self.works[g], &self.stats[g]).unwrap_or(f64::NEG_INFINITY))
            .sum()
    }

    fn step_collapsed(&mut self, plan: &Plan, t: usize, slot: usize, adapting: bool) -> Result<()> {
        let mut groups: Vec<usize> = match &plan.roles[t] {
            Role::Linear { cells } => cells.iter().map(|c| c.0).collect(),
            Role::Variance { cells } => cells.iter().map(|c| c.0).collect(),
            Role::Pair { g, .. } => vec![*g],
            _ => unreachable!(),
        };
        groups.sort_unstable();
        groups.dedup();
        let prior = &plan.priors[t];
        let current = self.get_param(plan, t);
        let tr = Transform::for_support(prior.support());
        let cur = self.collapsed_loglik(&groups)
            + priors::log_density(prior, current)
            + tr.log_jac(current);
        if !cur.is_finite() {
            return Err(Error::Sampler(format!(
                "{}: posterior density is zero at the current state",
                plan.names[t]
            )));
        }
        let prop = tr.inverse(
            tr.forward(current) + self.mh[slot].log_scale.exp() * std_normal(&mut self.rng),
        );
        let lp = priors::log_density(prior, prop);
        let accepted = if lp.is_finite() {
            self.set_param(plan, t, prop);
            let new = self.collapsed_loglik(&groups) + lp + tr.log_jac(prop);
            let u: f64 = self.rng.random();
            new.is_finite() && u.ln() < new - cur
        } else {
            false
        };
        if !accepted {
            self.set_param(plan, t, current);
        }
        self.mh[slot].record(accepted, adapting);
        Ok(())
    }

    /// As `linear_stats` for manifest intercepts, with the latent and
    /// phantom scores integrated out: y_i ~ N(ν + m, Σ).
    fn marginal_stats(&self, g: usize, cells: &[LinCell]) -> (f64, f64) {
        let mm = &self.marginal.as_ref().expect("computed before the step")[g];
        if mm.n == 0.0 {
            return (0.0, 0.0);
        }
        let nu = &self.works[g].nu;
        let x: Vec<usize> = cells.iter().map(|c| c.equation()).collect();
        let (mut prec, mut lin) = (0.0, 0.0);
        for &a in &x {
            for &b in &x {
                prec += mm.n * mm.prec[(a, b)];
            }
            for b in 0..nu.len() {
                // e0_b = ȳ_b − m_b − ν_b, plus ν_b back in for the cells being drawn
                let mut e = mm.ybar[b] - mm.offset[b] - nu[b];
                if x.contains(&b) {
                    e += nu[b];
                }
                lin += mm.n * mm.prec[(a, b)] * e;
            }
        }
        (prec, lin)
    }

    /// Quadratic coefficients (precision, linear term) of the complete-data
    /// log-likelihood in one linear parameter, for one group.
    fn linear_stats(
        &mut self,
        plan: &Plan,
        y: &DMatrix<f64>,
        g: usize,
        cells: &[LinCell],
        beta: f64,
    ) -> Result<(f64, f64)> {
        let n = y.nrows();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        let work = &self.works[g];
        let u = &self.u[g];
        let sys = cells[0].sys();
        let mut eqs: Vec<usize> = cells.iter().map(|c| c.equation()).collect();
        eqs.sort_unstable();
        eqs.dedup();

        // regressor per touched equation
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(eqs.len());
        for &eq in &eqs {
            let mut x = vec![0.0; n];
            for c in cells.iter().filter(|c| c.equation() == eq) {
                match *c {
                    LinCell::Nu(_) | LinCell::Alpha(_) => x.iter_mut().for_each(|v| *v += 1.0),
                    LinCell::Lambda(_, k) | LinCell::Beta(_, k) => {
                        for i in 0..n {
                            x[i] += u[(i, k)];
                        }
                    }
                }
            }
            xs.push(x);
        }

        let blocks = &plan.groups[g].blocks;
        let full = sys == Sys::Latent
            && eqs
                .iter()
                .any(|&k| blocks.iter().any(|b| b.members.contains(&k)));
        let (mut prec, mut lin) = (0.0, 0.0);
        if !full {
            for (a, &eq) in eqs.iter().enumerate() {
                let pa = 1.0 / work.star(sys, eq);
                work.resid(sys, y, u, eq, &mut self.scratch);
                let x = &xs[a];
                for i in 0..n {
                    let e0 = self.scratch[i] + beta * x[i];
                    prec += pa * x[i] * x[i];
                    lin += pa * x[i] * e0;
                }
            }
            return Ok((prec, lin));
        }

        // Latent equations inside an unrestricted block: use the full precision.
        let pmat = work
            .psi_star
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::Sampler("latent residual covariance is not positive definite".into())
            })?
            .inverse();
        let mut involved: Vec<usize> = eqs.clone();
        for b in blocks {
            if b.members.iter().any(|k| eqs.contains(k)) {
                involved.extend(b.members.iter().copied());
            }
        }
        involved.sort_unstable();
        involved.dedup();
        let mut e0: Vec<Vec<f64>> = Vec::with_capacity(involved.len());
        for &k in &involved {
            work.lat_resid(u, k, &mut self.scratch);
            let mut col = self.scratch.clone();
            if let Some(a) = eqs.iter().position(|&e| e == k) {
                for i in 0..n {
                    col[i] += beta * xs[a][i];
                }
            }
            e0.push(col);
        }
        for (a, &ea) in eqs.iter().enumerate() {
            for (b, &eb) in eqs.iter().enumerate() {
                let p = pmat[(ea, eb)];
                if p != 0.0 {
                    prec += p * (0..n).map(|i| xs[a][i] * xs[b][i]).sum::<f64>();
                }
            }
            for (c, &ec) in involved.iter().enumerate() {
                let p = pmat[(ea, ec)];
                if p != 0.0 {
                    lin += p * (0..n).map(|i| xs[a][i] * e0[c][i]).sum::<f64>();
                }
            }
        }
        Ok((prec, lin))
    }

    /// Sets a variance in every cell sharing the free index and returns the
    /// complete-data log-likelihood of the affected equations.
    fn set_variance(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        cells: &[(usize, Sys, usize)],
        v: f64,
    ) -> f64 {
        for &(g, s, i) in cells {
            self.works[g].set_var(s, i, v);
            self.works[g].refresh(plan, g, s, i);
        }
        let mut ll = 0.0;
        for &(g, s, i) in cells {
            ll += self.equation_loglik(data, g, s, i);
        }
        ll
    }

    fn equation_loglik(&mut self, data: &[DMatrix<f64>], g: usize, sys: Sys, i: usize) -> f64 {
        let work = &self.works[g];
        let star = work.star(sys, i);
        if !(star > 0.0) {
            return f64::NEG_INFINITY;
        }
        work.resid(sys, &data[g], &self.u[g], i, &mut self.scratch);
        let ss: f64 = self.scratch.iter().map(|e| e * e).sum();
        let n = self.scratch.len() as f64;
        -0.5 * n * (LN_2PI + star.ln()) - 0.5 * ss / star
    }

    fn step_variance(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        t: usize,
        conj: Option<(f64, f64)>,
        slot: usize,
        adapting: bool,
    ) -> Result<()> {
        let Role::Variance { cells } = &plan.roles[t] else {
            unreachable!("variance step on a variance role")
        };
        let (g0, s0, i0) = cells[0];
        let current = self.works[g0].var(s0, i0);
        if let Some((a, b)) = conj {
            let mut n = 0.0;
            let mut ss = 0.0;
            for &(g, s, i) in cells {
                self.works[g].resid(s, &data[g], &self.u[g], i, &mut self.scratch);
                n += self.scratch.len() as f64;
                ss += self.scratch.iter().map(|e| e * e).sum::<f64>();
            }
            let tau = gamma_draw(a + 0.5 * n, b + 0.5 * ss, &mut self.rng);
            self.set_variance(plan, data, cells, 1.0 / tau);
            return Ok(());
        }
        let prior = &plan.priors[t];
        let tr = Transform::for_support(prior.support());
        let cur_ll =
            self.set_variance(plan, data, cells, current) + priors::log_density(prior, current);
        if !cur_ll.is_finite() {
            return Err(Error::Sampler(format!(
                "{}: posterior density is zero at the current state",
                plan.names[t]
            )));
        }
        let z = tr.forward(current);
        let prop_z = z + self.mh[slot].log_scale.exp() * std_normal(&mut self.rng);
        let prop = tr.inverse(prop_z);
        let accepted = if prop.is_finite() && prop > 0.0 {
            let prop_ll =
                self.set_variance(plan, data, cells, prop) + priors::log_density(prior, prop);
            let log_r = prop_ll + tr.log_jac(prop) - cur_ll - tr.log_jac(current);
            let u: f64 = self.rng.random();
            u.ln() < log_r
        } else {
            false
        };
        if !accepted {
            self.set_variance(plan, data, cells, current);
        }
        self.mh[slot].record(accepted, adapting);
        Ok(())
    }

    fn set_rho(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        g: usize,
        sys: Sys,
        pair: usize,
        rho: f64,
    ) -> f64 {
        let pat = plan.groups[g].pattern(sys);
        let (r, c) = (pat.r[pair], pat.c[pair]);
        self.works[g].rho_mut(sys)[pair] = rho;
        self.works[g].refresh(plan, g, sys, r);
        self.works[g].refresh(plan, g, sys, c);
        self.equation_loglik(data, g, sys, r) + self.equation_loglik(data, g, sys, c)
    }

    fn step_rho(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        t: usize,
        slot: usize,
        adapting: bool,
    ) -> Result<()> {
        let Role::Pair { g, sys, pair } = plan.roles[t] else {
            unreachable!("rho step on a pair role")
        };
        let prior = &plan.priors[t];
        let current = self.works[g].rho(sys)[pair];
        let tr = Transform::for_support(prior.support());
        let cur_ll =
            self.set_rho(plan, data, g, sys, pair, current) + priors::log_density(prior, current);
        if !cur_ll.is_finite() {
            return Err(Error::Sampler(format!(
                "{}: posterior density is zero at the current state",
                plan.names[t]
            )));
        }
        let prop = tr.inverse(
            tr.forward(current) + self.mh[slot].log_scale.exp() * std_normal(&mut self.rng),
        );
        let prop_ll =
            self.set_rho(plan, data, g, sys, pair, prop) + priors::log_density(prior, prop);
        let log_r = prop_ll + tr.log_jac(prop) - cur_ll - tr.log_jac(current);
        let u: f64 = self.rng.random();
        let accepted = prop_ll.is_finite() && u.ln() < log_r;
        if !accepted {
            self.set_rho(plan, data, g, sys, pair, current);
        }
        self.mh[slot].record(accepted, adapting);
        Ok(())
    }

    fn step_fa_loading(
        &mut self,
        plan: &Plan,
        data: &[DMatrix<f64>],
        g: usize,
        sys: Sys,
        pair: usize,
        end: usize,
    ) {
        let pat = plan.groups[g].pattern(sys);
        let var = if end == 0 { pat.c[pair] } else { pat.r[pair] };
        let col = match sys {
            Sys::Manifest => plan.m + pair,
            Sys::Latent => plan.m + plan.groups[g].man.v() + pair,
        };
        let work = &self.works[g];
        let u = &self.u[g];
        let lam = work.loadings(sys)[(var, pair)];
        let pa = 1.0 / work.star(sys, var);
        work.resid(sys, &data[g], u, var, &mut self.scratch);
        let (mut prec, mut lin) = (0.0, 0.0);
        for i in 0..u.nrows() {
            let x = u[(i, col)];
            prec += pa * x * x;
            lin += pa * x * (self.scratch[i] + lam * x);
        }
        let prior = crate::expansion::fa_default_priors().lambda;
        let (m0, t0) = prior.conjugate_normal().expect("normal working prior");
        let pp = prec + t0;
        let value = (lin + t0 * m0) / pp + std_normal(&mut self.rng) / pp.sqrt();
        self.works[g].loadings_mut(sys)[(var, pair)] = value;
        self.works[g].refresh(plan, g, sys, var);
    }

    fn step_fa_psi(&mut self, plan: &Plan, g: usize, sys: Sys, pair: usize) {
        let col = match sys {
            Sys::Manifest => plan.m + pair,
            Sys::Latent => plan.m + plan.groups[g].man.v() + pair,
        };
        let u = &self.u[g];
        let ss: f64 = (0..u.nrows()).map(|i| u[(i, col)].powi(2)).sum();
        let (a, b) = crate::expansion::fa_default_priors()
            .psi_d
            .conjugate_gamma()
            .expect("gamma working prior");
        let tau = gamma_draw(a + 0.5 * u.nrows() as f64, b + 0.5 * ss, &mut self.rng);
        let w = &mut self.works[g];
        match sys {
            Sys::Manifest => w.psi_d[pair] = 1.0 / tau,
            Sys::Latent => w.psi_e[pair] = 1.0 / tau,
        }
        let pat = plan.groups[g].pattern(sys);
        let (r, c) = (pat.r[pair], pat.c[pair]);
        w.refresh(plan, g, sys, r);
        w.refresh(plan, g, sys, c);
    }

    fn step_fa_star(&mut self, plan: &Plan, data: &[DMatrix<f64>], g: usize, sys: Sys, var: usize) {
        self.works[g].resid(sys, &data[g], &self.u[g], var, &mut self.scratch);
        let ss: f64 = self.scratch.iter().map(|e| e * e).sum();
        let (a, b) = crate::expansion::fa_default_priors()
            .theta_star
            .conjugate_gamma()
            .expect("gamma working prior");
        let tau = gamma_draw(
            a + 0.5 * self.scratch.len() as f64,
            b + 0.5 * ss,
            &mut self.rng,
        );
        self.works[g].set_star(sys, var, 1.0 / tau);
        self.works[g].refresh(plan, g, sys, var);
    }

    fn step_block(&mut self, plan: &Plan, g: usize, block: usize) -> Result<()> {
        let bp = &plan.groups[g].blocks[block];
        let k = bp.members.len();
        let u = &self.u[g];
        let n = u.nrows();
        let mut scale = DMatrix::identity(k, k);
        let work = &self.works[g];
        self.scratch2.clear();
        for i in 0..n {
            self.scratch2.clear();
            for &a in &bp.members {
                self.scratch2.push(u[(i, a)] - work.alpha[a]);
            }
            for a in 0..k {
                for b in 0..k {
                    scale[(a, b)] += self.scratch2[a] * self.scratch2[b];
                }
            }
        }
        let psi = sample_inverse_wishart(&scale, bp.df + n as f64, &mut self.rng)?;
        let w = &mut self.works[g];
        for (a, &i) in bp.members.iter().enumerate() {
            for (b, &j) in bp.members.iter().enumerate() {
                w.psi_star[(i, j)] = psi[(a, b)];
            }
            w.psi_var[i] = psi[(a, a)];
        }
        Ok(())
    }

    fn metropolis(
        &mut self,
        slot: usize,
        tr: Transform,
        current: f64,
        target: impl Fn(f64) -> f64,
        adapting: bool,
    ) -> f64 {
        let cur = target(current) + tr.log_jac(current);
        let prop = tr.inverse(
            tr.forward(current) + self.mh[slot].log_scale.exp() * std_normal(&mut self.rng),
        );
        let new = target(prop) + tr.log_jac(prop);
        let u: f64 = self.rng.random();
        let accepted = new.is_finite() && u.ln() < new - cur;
        self.mh[slot].record(accepted, adapting);
        if accepted {
            prop
        } else {
            current
        }
    }
}

/// Group moments of the data with the latent scores integrated out.
struct Marginal {
    n: f64,
    ybar: DVector<f64>,
    /// Λ(I−B)⁻¹α, the mean beyond ν.
    offset: DVector<f64>,
    prec: DMatrix<f64>,
}

fn marginal_moments(w: &Work, y: &DMatrix<f64>) -> Result<Marginal> {
    let n = y.nrows();
    let p = w.nu.len();
    let m = w.alpha.len();
    let ybar = if n > 0 {
        DVector::from_fn(p, |j, _| y.column(j).mean())
    } else {
        DVector::zeros(p)
    };
    let ib = (DMatrix::identity(m, m) - &w.beta)
        .try_inverse()
        .ok_or_else(|| Error::Sampler("I - B is singular".into()))?;
    let lat_cov = &w.psi_star + &w.be * DMatrix::from_diagonal(&w.psi_e) * w.be.transpose();
    let eta_cov = &ib * lat_cov * ib.transpose();
    let sigma = &w.lambda * eta_cov * w.lambda.transpose()
        + &w.ld * DMatrix::from_diagonal(&w.psi_d) * w.ld.transpose()
        + DMatrix::from_diagonal(&w.theta_star);
    let prec = sigma
        .cholesky()
        .ok_or_else(|| Error::Sampler("implied covariance is not positive definite".into()))?
        .inverse();
    Ok(Marginal {
        n: n as f64,
        ybar,
        offset: &w.lambda * (ib * &w.alpha),
        prec,
    })
}

/// Normal log-likelihood of a group from its sufficient statistics, with
/// the latent and phantom scores integrated out.
fn marginal_loglik(w: &Work, st: &SampleStats) -> Option<f64> {
    if st.n == 0 {
        return Some(0.0);
    }
    if w.theta_star.iter().any(|v| !(*v > 0.0))
        || (0..w.alpha.len()).any(|k| !(w.psi_star[(k, k)] > 0.0))
    {
        return None;
    }
    let m = w.alpha.len();
    let ib = (DMatrix::identity(m, m) - &w.beta).try_inverse()?;
    let lat_cov = &w.psi_star + &w.be * DMatrix::from_diagonal(&w.psi_e) * w.be.transpose();
    let eta_cov = &ib * lat_cov * ib.transpose();
    let sigma = &w.lambda * eta_cov * w.lambda.transpose()
        + &w.ld * DMatrix::from_diagonal(&w.psi_d) * w.ld.transpose()
        + DMatrix::from_diagonal(&w.theta_star);
    let mu = &w.nu + &w.lambda * (ib * &w.alpha);
    let chol = sigma.cholesky()?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol.solve(&st.cov).trace();
    let d = &st.mean - mu;
    let maha = d.dot(&chol.solve(&d));
    let n = st.n as f64;
    let p = w.nu.len() as f64;
    Some(-0.5 * n * (p * LN_2PI + log_det + trace + maha))
}

/// Draws every case's (η, D, E) jointly from its full conditional.
///
/// With A = [I−B, 0, −B_E] and C = [Λ, Λ_D, 0], the precision is
/// Q = AᵀΨ*⁻¹A + CᵀΘ*⁻¹C + diag(0, Ψ_D⁻¹, Ψ_E⁻¹), shared by all cases, and
/// the mean for case i is Q⁻¹(AᵀΨ*⁻¹α + CᵀΘ*⁻¹(y_i − ν)).
pub fn draw_latents(
    work: &Work,
    plan: &Plan,
    g: usize,
    y: &DMatrix<f64>,
    u: &mut DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = y.nrows();
    let (p, m) = (plan.p, plan.m);
    let v = plan.groups[g].man.v();
    let w = plan.groups[g].lat.v();
    let q = m + v + w;
    if n == 0 || q == 0 {
        return Ok(());
    }
    if work.theta_star.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Sampler(
            "non-positive residual variance in the working model".into(),
        ));
    }
    let mut a = DMatrix::zeros(m, q);
    let mut c = DMatrix::zeros(p, q);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = if i == j { 1.0 } else { 0.0 } - work.beta[(i, j)];
        }
        for e in 0..w {
            a[(i, m + v + e)] = -work.be[(i, e)];
        }
    }
    for j in 0..p {
        for k in 0..m {
            c[(j, k)] = work.lambda[(j, k)];
        }
        for d in 0..v {
            c[(j, m + d)] = work.ld[(j, d)];
        }
    }
    let mut q_mat = DMatrix::zeros(q, q);
    let mut c0 = DVector::zeros(q);
    if m > 0 {
        let p_lat = work
            .psi_star
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::Sampler("latent residual covariance is not positive definite".into())
            })?
            .inverse();
        let at_p = a.transpose() * &p_lat;
        q_mat += &at_p * &a;
        c0 = &at_p * &work.alpha;
    }
    let mut k_mat = c.transpose();
    for j in 0..p {
        let tj = 1.0 / work.theta_star[j];
        for r in 0..q {
            k_mat[(r, j)] *= tj;
        }
    }
    q_mat += &k_mat * &c;
    for d in 0..v {
        q_mat[(m + d, m + d)] += 1.0 / work.psi_d[d];
    }
    for e in 0..w {
        q_mat[(m + v + e, m + v + e)] += 1.0 / work.psi_e[e];
    }
    let chol = q_mat.cholesky().ok_or_else(|| {
        Error::Sampler("latent full-conditional precision is not positive definite".into())
    })?;
    let mut centered = DMatrix::zeros(p, n);
    for i in 0..n {
        for j in 0..p {
            centered[(j, i)] = y[(i, j)] - work.nu[j];
        }
    }
    let mut rhs = &k_mat * centered;
    for i in 0..n {
        for r in 0..q {
            rhs[(r, i)] += c0[r];
        }
    }
    let mean = chol.solve(&rhs);
    let mut z = DMatrix::zeros(q, n);
    for i in 0..n {
        for r in 0..q {
            z[(r, i)] = std_normal(rng);
        }
    }
    let l = chol.l();
    let noise = l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Sampler("singular Cholesky factor".into()))?;
    for i in 0..n {
        for r in 0..q {
            u[(i, r)] = mean[(r, i)] + noise[(r, i)];
        }
    }
    Ok(())
}
