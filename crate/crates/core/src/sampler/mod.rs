//! Data-augmented MCMC for the expanded working model.

mod chain;
mod plan;

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use chain::{draw_latents, sample_inverse_wishart, Chain, MhSlot, Work};
pub use plan::{compile, BlockPlan, GroupPlan, LinCell, LinearMethod, Plan, Role, Step, Sys};

use crate::diagnostics::psrf;
use crate::error::{Error, Result};
use crate::model::{ParamKind, ParameterTable};
use crate::priors::sample_prior;

const AUTO_WINDOW: usize = 4000;
const AUTO_CAP: usize = 100_000;
const PSRF_TARGET: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convergence {
    Manual,
    Auto,
}

impl FromStr for Convergence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(Convergence::Manual),
            "auto" => Ok(Convergence::Auto),
            _ => Err(Error::Config(format!(
                "convergence must be `manual` or `auto`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inits {
    Prior,
    Simple,
    /// One vector of free-parameter values per chain.
    User(Vec<Vec<f64>>),
}

impl FromStr for Inits {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Inits::Prior),
            "simple" => Ok(Inits::Simple),
            _ => Err(Error::Config(format!(
                "inits must be `prior` or `simple`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub adapt: usize,
    pub burnin: usize,
    pub sample: usize,
    pub convergence: Convergence,
    pub seed: u64,
    pub inits: Inits,
    /// Run chains on separate threads.
    pub threads: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 3,
            adapt: 1000,
            burnin: 4000,
            sample: 10000,
            convergence: Convergence::Manual,
            seed: 1,
            inits: Inits::Prior,
            threads: true,
        }
    }
}

/// Posterior draws of the free parameters, one row-major S×K block per chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawStore {
    pub names: Vec<String>,
    pub chains: Vec<Vec<f64>>,
    pub n_iter: usize,
}

impl DrawStore {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draw(&self, chain: usize, s: usize) -> &[f64] {
        let k = self.n_params();
        &self.chains[chain][s * k..(s + 1) * k]
    }

    /// Draws of parameter `k` in chain `c`.
    pub fn param(&self, c: usize, k: usize) -> Vec<f64> {
        let kk = self.n_params();
        (0..self.n_iter)
            .map(|s| self.chains[c][s * kk + k])
            .collect()
    }

    /// Parameter `k` pooled over chains.
    pub fn pooled(&self, k: usize) -> Vec<f64> {
        (0..self.n_chains())
            .flat_map(|c| self.param(c, k))
            .collect()
    }

    /// Every draw from every chain, chain by chain.
    pub fn all_draws(&self) -> impl Iterator<Item = &[f64]> {
        let k = self.n_params().max(1);
        self.chains.iter().flat_map(move |c| c.chunks(k))
    }

    pub fn total(&self) -> usize {
        self.n_iter * self.n_chains()
    }

    pub fn write_chain_csv<W: std::io::Write>(&self, c: usize, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.names)?;
        for s in 0..self.n_iter {
            wr.write_record(self.draw(c, s).iter().map(|v| format!("{v}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_chain_csv<R: std::io::Read>(r: R) -> Result<(Vec<String>, Vec<f64>, usize)> {
        let mut rd = csv::Reader::from_reader(r);
        let names: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let mut vals = Vec::new();
        let mut n = 0;
        for rec in rd.records() {
            let rec = rec?;
            for cell in rec.iter() {
                vals.push(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad draw `{cell}`")))?,
                );
            }
            n += 1;
        }
        Ok((names, vals, n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Per-parameter PSRF over the sampling phase (None with one chain or
    /// zero variance).
    pub psrf: Vec<Option<f64>>,
    /// Burn-in iterations actually run.
    pub burnin: usize,
    pub warnings: Vec<String>,
    /// Metropolis acceptance rate per parameter over the sampling phase.
    pub acceptance: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub draws: DrawStore,
    pub report: ConvergenceReport,
    pub inits: Vec<Vec<f64>>,
}

/// Starting values for one chain.
pub fn initial_values(
    strategy: &Inits,
    table: &ParameterTable,
    plan: &Plan,
    data: &[DMatrix<f64>],
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let k = plan.n_free;
    if let Inits::User(v) = strategy {
        let vals = v
            .get(chain)
            .or_else(|| v.first())
            .ok_or_else(|| Error::Config("no user initial values".into()))?;
        if vals.len() != k {
            return Err(Error::Config(format!(
                "user initial values have {} entries, model has {k}",
                vals.len()
            )));
        }
        return Ok(vals.clone());
    }
    let mut theta = vec![0.0; k];
    let mut set = vec![false; k];
    // start values from the model syntax win
    for row in &table.rows {
        if let (Some(f), Some(s)) = (row.free, row.start) {
            theta[f - 1] = s;
            set[f - 1] = true;
        }
    }
    let prior_mode = matches!(strategy, Inits::Prior);
    let mut blocks: Vec<Vec<Option<DMatrix<f64>>>> = plan
        .groups
        .iter()
        .map(|g| vec![None; g.blocks.len()])
        .collect();

    for t in 0..k {
        if set[t] || matches!(plan.roles[t], Role::Pair { .. }) {
            continue;
        }
        let prior = &plan.priors[t];
        theta[t] = match &plan.roles[t] {
            Role::Linear { cells } => {
                let slope = matches!(plan.kinds[t], ParamKind::Loading | ParamKind::Regression);
                if prior_mode {
                    if slope {
                        let mut v = 1.0;
                        for _ in 0..100 {
                            let d = sample_prior(prior, rng)?;
                            if d > 0.5 && d < 1.5 {
                                v = d;
                                break;
                            }
                        }
                        v
                    } else {
                        sample_prior(prior, rng)?
                    }
                } else {
                    match (plan.kinds[t], cells[0].1) {
                        (ParamKind::Loading | ParamKind::Regression, _) => 1.0,
                        (ParamKind::ManifestIntercept, LinCell::Nu(j)) => {
                            let y = &data[cells[0].0];
                            if y.nrows() > 0 {
                                y.column(j).mean()
                            } else {
                                0.0
                            }
                        }
                        _ => 0.0,
                    }
                }
            }
            Role::Variance { cells } => {
                let (g, sys, i) = cells[0];
                simple_or_prior_variance(prior_mode, prior, sys, &data[g], i, rng)?
            }
            Role::FaVariance { g, sys, var } => {
                simple_or_prior_variance(prior_mode, prior, *sys, &data[*g], *var, rng)?
            }
            Role::Block { g, block, i, j } => {
                let bp = &plan.groups[*g].blocks[*block];
                let slot = &mut blocks[*g][*block];
                if slot.is_none() {
                    let kk = bp.members.len();
                    *slot = Some(if prior_mode {
                        sample_inverse_wishart(&DMatrix::identity(kk, kk), bp.df, rng)?
                    } else {
                        DMatrix::identity(kk, kk)
                    });
                }
                let a = bp.members.iter().position(|x| x == i).expect("member");
                let b = bp.members.iter().position(|x| x == j).expect("member");
                slot.as_ref().expect("filled")[(a, b)]
            }
            Role::Pair { .. } => unreachable!(),
        };
    }

    // Covariances last: they scale with the variances just chosen.
    let mats = crate::model::realize(table, &theta)?;
    for t in 0..k {
        let Role::Pair { g, sys, pair } = plan.roles[t] else {
            continue;
        };
        if set[t] {
            continue;
        }
        let rho = if prior_mode {
            let mut v = 0.0;
            for _ in 0..100 {
                let d = sample_prior(&plan.priors[t], rng)?;
                if d.abs() < 0.1 {
                    v = d;
                    break;
                }
            }
            v
        } else {
            0.0
        };
        let pat = plan.groups[g].pattern(sys);
        let (r, c) = (pat.r[pair], pat.c[pair]);
        let gm = &mats.groups[g];
        let cov = match sys {
            Sys::Manifest => &gm.theta,
            Sys::Latent => &gm.psi,
        };
        theta[t] = rho * (cov[(r, r)] * cov[(c, c)]).sqrt();
    }
    Ok(theta)
}

fn simple_or_prior_variance(
    prior_mode: bool,
    prior: &crate::priors::PriorSpec,
    sys: Sys,
    y: &DMatrix<f64>,
    i: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if prior_mode {
        return sample_prior(prior, rng);
    }
    Ok(match sys {
        Sys::Latent => 1.0,
        Sys::Manifest => {
            let n = y.nrows();
            if n < 2 {
                1.0
            } else {
                let col = y.column(i);
                let m = col.mean();
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                if v > 0.0 {
                    0.5 * v
                } else {
                    1.0
                }
            }
        }
    })
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

/// Runs `n` iterations on every chain, optionally recording draws.
fn advance(
    chains: &mut [Chain],
    plan: &Plan,
    data: &[DMatrix<f64>],
    n: usize,
    adapting: bool,
    record: bool,
    threads: bool,
) -> Result<Vec<Vec<f64>>> {
    let work = |c: &mut Chain| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(if record { n * plan.n_free } else { 0 });
        for _ in 0..n {
            c.iterate(plan, data, adapting)?;
            if record {
                out.extend(c.theta(plan));
            }
        }
        Ok(out)
    };
    if threads && chains.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = chains
                .iter_mut()
                .map(|c| s.spawn(move || work(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .map_err(|_| Error::Sampler("chain thread panicked".into()))?
                })
                .collect()
        })
    } else {
        chains.iter_mut().map(work).collect()
    }
}

fn psrf_all(store: &[Vec<f64>], k: usize, n: usize) -> Vec<Option<f64>> {
    if store.len() < 2 || n < 2 {
        return vec![None; k];
    }
    (0..k)
        .map(|j| {
            let cols: Vec<Vec<f64>> = store
                .iter()
                .map(|c| (0..n).map(|s| c[s * k + j]).collect())
                .collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            psrf(&refs).ok()
        })
        .collect()
}

/// Runs the sampler. `data` holds one n_g×p matrix per group, columns in
/// the table's manifest order.
pub fn run(
    table: &ParameterTable,
    plan: &Plan,
    data: &[DMatrix<f64>],
    cfg: &SamplerConfig,
) -> Result<SamplerOutput> {
    if cfg.n_chains == 0 {
        return Err(Error::Config("at least one chain is required".into()));
    }
    if data.len() != plan.groups.len() {
        return Err(Error::Data(format!(
            "model has {} groups, data has {}",
            plan.groups.len(),
            data.len()
        )));
    }
    let k = plan.n_free;
    let names = plan.names.clone();
    if k == 0 {
        return Ok(SamplerOutput {
            draws: DrawStore {
                names,
                chains: vec![Vec::new(); cfg.n_chains],
                n_iter: 0,
            },
            report: ConvergenceReport {
                converged: true,
                psrf: Vec::new(),
                burnin: 0,
                warnings: Vec::new(),
                acceptance: Vec::new(),
            },
            inits: vec![Vec::new(); cfg.n_chains],
        });
    }

    let mut inits = Vec::with_capacity(cfg.n_chains);
    let mut chains = Vec::with_capacity(cfg.n_chains);
    for c in 0..cfg.n_chains {
        let mut rng = chain_rng(cfg.seed, c);
        let theta0 = initial_values(&cfg.inits, table, plan, data, c, &mut rng)?;
        chains.push(Chain::new(table, plan, data, &theta0, rng)?);
        inits.push(theta0);
    }

    let mut warnings = Vec::new();
    advance(&mut chains, plan, data, cfg.adapt, true, false, cfg.threads)?;
    let (burnin, converged) = match cfg.convergence {
        Convergence::Manual => {
            advance(
                &mut chains,
                plan,
                data,
                cfg.burnin,
                false,
                false,
                cfg.threads,
            )?;
            (cfg.burnin, None)
        }
        Convergence::Auto => {
            let mut done = 0;
            let mut window = cfg.burnin.max(1);
            let ok = loop {
                let st = advance(&mut chains, plan, data, window, false, true, cfg.threads)?;
                done += window;
                let ps = psrf_all(&st, k, window);
                if ps.iter().all(|r| r.is_some_and(|r| r < PSRF_TARGET)) {
                    break true;
                }
                if done >= AUTO_CAP {
                    break false;
                }
                window = AUTO_WINDOW.min(AUTO_CAP - done);
            };
            if !ok {
                warnings.push(format!("chains did not reach PSRF < {PSRF_TARGET} within {AUTO_CAP} burn-in iterations"));
            }
            (done, Some(ok))
        }
    };
    for c in chains.iter_mut() {
        for slot in c.mh.iter_mut() {
            slot.accepts = 0;
            slot.tries = 0;
        }
    }
    let store = advance(
        &mut chains,
        plan,
        data,
        cfg.sample,
        false,
        true,
        cfg.threads,
    )?;
    let ps = psrf_all(&store, k, cfg.sample);
    let bad: Vec<&str> = ps
        .iter()
        .zip(&names)
        .filter(|(r, _)| r.is_some_and(|r| r > PSRF_TARGET))
        .map(|(_, n)| n.as_str())
        .collect();
    if !bad.is_empty() && cfg.convergence == Convergence::Manual {
        warnings.push(format!("PSRF above {PSRF_TARGET} for: {}", bad.join(", ")));
    }
    let converged = converged.unwrap_or(bad.is_empty());

    let acceptance = (0..k)
        .map(|t| {
            let slot = plan.steps.iter().find_map(|s| match *s {
                Step::Linear {
                    t: tt,
                    method: LinearMethod::Metropolis(m),
                    ..
                } if tt == t => Some(m),
                Step::Variance {
                    t: tt,
                    conj: None,
                    mh,
                } if tt == t => Some(mh),
                Step::Rho { t: tt, mh } if tt == t => Some(mh),
                _ => None,
            })?;
            let (a, n) = chains.iter().fold((0u64, 0u64), |(a, n), c| {
                (a + c.mh[slot].accepts, n + c.mh[slot].tries)
            });
            (n > 0).then(|| a as f64 / n as f64)
        })
        .collect();

    Ok(SamplerOutput {
        draws: DrawStore {
            names,
            chains: store,
            n_iter: cfg.sample,
        },
        report: ConvergenceReport {
            converged,
            psrf: ps,
            burnin,
            warnings,
            acceptance,
        },
        inits,
    })
}
