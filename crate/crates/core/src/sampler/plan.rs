//! Compiles a parameter table into the update schedule used by each chain.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expansion::{plan_expansion, CovPattern, Parameterization};
use crate::model::{Cell, ParamKind, ParameterTable};
use crate::priors::{DefaultPriors, Family, PriorSpec};

/// Equation system a variance or covariance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sys {
    Manifest,
    Latent,
}

/// Cell of a parameter that enters the mean structure linearly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinCell {
    Nu(usize),
    Lambda(usize, usize),
    Alpha(usize),
    Beta(usize, usize),
}

impl LinCell {
    pub fn sys(self) -> Sys {
        match self {
            LinCell::Nu(_) | LinCell::Lambda(..) => Sys::Manifest,
            LinCell::Alpha(_) | LinCell::Beta(..) => Sys::Latent,
        }
    }

    /// Equation the cell appears in.
    pub fn equation(self) -> usize {
        match self {
            LinCell::Nu(j) | LinCell::Lambda(j, _) => j,
            LinCell::Alpha(k) | LinCell::Beta(k, _) => k,
        }
    }
}

/// How a free parameter is sampled and where its value lives.
#[derive(Debug, Clone, PartialEq)]
pub enum Role {
    Linear {
        cells: Vec<(usize, LinCell)>,
    },
    /// Variance updated on its own (conjugate or Metropolis).
    Variance {
        cells: Vec<(usize, Sys, usize)>,
    },
    /// fa: variance of a variable in a phantom pair, derived from working
    /// parameters.
    FaVariance {
        g: usize,
        sys: Sys,
        var: usize,
    },
    /// Covariance represented by a phantom pair.
    Pair {
        g: usize,
        sys: Sys,
        pair: usize,
    },
    /// Entry of an unrestricted latent block.
    Block {
        g: usize,
        block: usize,
        i: usize,
        j: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub members: Vec<usize>,
    pub df: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub man: CovPattern,
    pub lat: CovPattern,
    pub blocks: Vec<BlockPlan>,
    /// Free index (0-based) of each phantom pair.
    pub man_pair_param: Vec<usize>,
    pub lat_pair_param: Vec<usize>,
}

impl GroupPlan {
    pub fn pattern(&self, sys: Sys) -> &CovPattern {
        match sys {
            Sys::Manifest => &self.man,
            Sys::Latent => &self.lat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearMethod {
    Conjugate,
    /// Normal likelihood times a uniform or truncated-normal prior.
    Truncated,
    Metropolis(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// `marginal`: every cell is a manifest intercept, so the update can
    /// integrate the latent scores out.
    Linear {
        t: usize,
        method: LinearMethod,
        marginal: bool,
    },
    Variance {
        t: usize,
        conj: Option<(f64, f64)>,
        mh: usize,
    },
    Rho {
        t: usize,
        mh: usize,
    },
    /// Random-walk move on the likelihood with latent scores integrated out.
    Collapsed {
        t: usize,
        mh: usize,
    },
    FaLoading {
        g: usize,
        sys: Sys,
        pair: usize,
        end: usize,
    },
    FaPsi {
        g: usize,
        sys: Sys,
        pair: usize,
    },
    FaStar {
        g: usize,
        sys: Sys,
        var: usize,
    },
    Block {
        g: usize,
        block: usize,
    },
}

impl Step {
    pub fn is_marginal(&self) -> bool {
        matches!(
            self,
            Step::Linear { marginal: true, .. } | Step::Collapsed { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub cp: Parameterization,
    pub p: usize,
    pub m: usize,
    pub n_free: usize,
    pub roles: Vec<Role>,
    pub kinds: Vec<ParamKind>,
    pub priors: Vec<PriorSpec>,
    pub names: Vec<String>,
    pub groups: Vec<GroupPlan>,
    pub steps: Vec<Step>,
    pub n_mh: usize,
}

impl Plan {
    pub fn prior_label(&self, t: usize) -> String {
        self.priors[t].source.clone()
    }
}

fn plain(row: &crate::model::ParameterRow) -> bool {
    row.free.is_some() && row.label.is_none() && row.prior.is_none()
}

pub fn compile(
    table: &ParameterTable,
    defaults: &DefaultPriors,
    cp: Parameterization,
) -> Result<Plan> {
    let p = table.manifest.len();
    let m = table.latent.len();
    let n_groups = table.n_groups();
    let free = table.free_params();
    let n_free = free.len();

    for row in &table.rows {
        let kind = table.kind(row);
        if let Some(v) = row.fixed {
            if kind.is_variance() && !(v > 0.0) {
                return Err(Error::Model(format!(
                    "{}: fixed variances must be positive",
                    row.name()
                )));
            }
            if kind.is_covariance() && v != 0.0 {
                return Err(Error::Model(format!(
                    "{}: covariances can only be fixed at zero",
                    row.name()
                )));
            }
        }
    }
    for fp in &free {
        if fp.kind.is_covariance() && fp.rows.len() > 1 {
            return Err(Error::Model(format!(
                "{}: equality constraints on covariances are not supported",
                fp.name
            )));
        }
    }

    // Per-group expansion plans.
    let mut groups = Vec::with_capacity(n_groups);
    for g in 1..=n_groups {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.group == g).collect();
        let mut man_pat = DMatrix::from_element(p, p, false);
        let mut lat_pat = DMatrix::from_element(m, m, false);
        let mut endogenous = vec![false; m];
        let mut eligible = vec![true; m];
        for r in &rows {
            match (table.kind(r), table.cell(r)) {
                (ParamKind::Regression, Cell::Beta(k, _)) => endogenous[k] = true,
                (ParamKind::ManifestCovariance, Cell::Theta(a, b)) if r.free.is_some() => {
                    man_pat[(a, b)] = true;
                    man_pat[(b, a)] = true;
                }
                (ParamKind::LatentCovariance, Cell::Psi(a, b)) if r.free.is_some() => {
                    lat_pat[(a, b)] = true;
                    lat_pat[(b, a)] = true;
                    if !plain(r) {
                        eligible[a] = false;
                        eligible[b] = false;
                    }
                }
                (ParamKind::LatentVariance, Cell::Psi(a, _)) if !plain(r) => eligible[a] = false,
                _ => {}
            }
        }
        for k in 0..m {
            if endogenous[k] {
                eligible[k] = false;
            }
        }
        let man = plan_expansion(&man_pat, &vec![false; p]);
        let lat = plan_expansion(&lat_pat, &eligible);
        let find = |sys: Sys, a: usize, b: usize| -> usize {
            rows.iter()
                .find(|r| {
                    let c = table.cell(r);
                    match sys {
                        Sys::Manifest => c == Cell::Theta(a.max(b), a.min(b)),
                        Sys::Latent => c == Cell::Psi(a.max(b), a.min(b)),
                    }
                })
                .and_then(|r| r.free)
                .expect("pattern built from free rows")
                - 1
        };
        let man_pair_param = man
            .pairs()
            .map(|(r, c)| find(Sys::Manifest, r, c))
            .collect();
        let lat_pair_param = lat.pairs().map(|(r, c)| find(Sys::Latent, r, c)).collect();
        let blocks = lat
            .blocks
            .iter()
            .map(|members| {
                let df = match defaults.ibpsi.family {
                    Family::Wishart { df: Some(df) } => df,
                    _ => members.len() as f64 + 1.0,
                };
                if !(df > members.len() as f64 - 1.0) {
                    return Err(Error::Model(format!(
                        "Wishart degrees of freedom {df} too small for a block of {} latent variables",
                        members.len()
                    )));
                }
                Ok(BlockPlan { members: members.clone(), df })
            })
            .collect::<Result<_>>()?;
        groups.push(GroupPlan {
            man,
            lat,
            blocks,
            man_pair_param,
            lat_pair_param,
        });
    }

    let in_pair = |g: usize, sys: Sys, i: usize| !groups[g].pattern(sys).pairs_of(i).is_empty();

    let mut roles = Vec::with_capacity(n_free);
    let mut priors = Vec::with_capacity(n_free);
    let mut steps = Vec::new();
    let mut n_mh = 0;
    for fp in &free {
        let first = &table.rows[fp.rows[0]];
        let mut prior = table.row_prior(first, defaults)?;
        let cells: Vec<(usize, Cell)> = fp
            .rows
            .iter()
            .map(|&i| (table.rows[i].group - 1, table.cell(&table.rows[i])))
            .collect();
        let role = match fp.kind {
            k if k.is_linear() => Role::Linear {
                cells: cells
                    .iter()
                    .map(|&(g, c)| {
                        let lc = match c {
                            Cell::Nu(j) => LinCell::Nu(j),
                            Cell::Lambda(j, k) => LinCell::Lambda(j, k),
                            Cell::Alpha(k) => LinCell::Alpha(k),
                            Cell::Beta(k, l) => LinCell::Beta(k, l),
                            _ => unreachable!("linear kinds map to mean cells"),
                        };
                        (g, lc)
                    })
                    .collect(),
            },
            ParamKind::ManifestVariance | ParamKind::LatentVariance => {
                let vcells: Vec<(usize, Sys, usize)> = cells
                    .iter()
                    .map(|&(g, c)| match c {
                        Cell::Theta(i, _) => (g, Sys::Manifest, i),
                        Cell::Psi(i, _) => (g, Sys::Latent, i),
                        _ => unreachable!(),
                    })
                    .collect();
                let (g0, s0, i0) = vcells[0];
                if s0 == Sys::Latent {
                    if let Some(b) = groups[g0].lat.block_of(i0) {
                        prior = defaults.ibpsi.clone();
                        Role::Block {
                            g: g0,
                            block: b,
                            i: i0,
                            j: i0,
                        }
                    } else {
                        Role::Variance { cells: vcells }
                    }
                } else {
                    Role::Variance { cells: vcells }
                }
            }
            _ => {
                let (g, c) = cells[0];
                let (sys, a, b) = match c {
                    Cell::Theta(a, b) => (Sys::Manifest, a, b),
                    Cell::Psi(a, b) => (Sys::Latent, a, b),
                    _ => unreachable!(),
                };
                let pat = groups[g].pattern(sys);
                if sys == Sys::Latent && pat.block_of(a).is_some() {
                    prior = defaults.ibpsi.clone();
                    Role::Block {
                        g,
                        block: pat.block_of(a).expect("checked"),
                        i: a,
                        j: b,
                    }
                } else {
                    let pair = pat
                        .pairs()
                        .position(|(r, cc)| r == a && cc == b)
                        .expect("free covariance appears in the plan");
                    Role::Pair { g, sys, pair }
                }
            }
        };

        // Variances of fa-paired variables are derived quantities.
        let role = match role {
            Role::Variance { cells }
                if cp == Parameterization::Fa
                    && cells.iter().any(|&(g, s, i)| in_pair(g, s, i)) =>
            {
                if cells.len() > 1 {
                    return Err(Error::Model(format!(
                        "{}: equality constraints on variances of covarying variables need --cp srs",
                        fp.name
                    )));
                }
                let (g, sys, var) = cells[0];
                Role::FaVariance { g, sys, var }
            }
            other => other,
        };

        match &role {
            Role::Linear { .. } => {
                let method = if prior.conjugate_normal().is_some() {
                    LinearMethod::Conjugate
                } else if matches!(prior.family, Family::Uniform { .. })
                    || matches!(prior.family, Family::Normal { .. })
                {
                    LinearMethod::Truncated
                } else {
                    n_mh += 1;
                    LinearMethod::Metropolis(n_mh - 1)
                };
                let marginal = match &role {
                    Role::Linear { cells } => cells.iter().all(|c| matches!(c.1, LinCell::Nu(_))),
                    _ => false,
                };
                steps.push(Step::Linear {
                    t: fp.index,
                    method,
                    marginal,
                });
            }
            Role::Variance { cells } => {
                let paired = cells.iter().any(|&(g, s, i)| in_pair(g, s, i));
                let conj = if paired {
                    None
                } else {
                    prior.conjugate_gamma()
                };
                n_mh += 1;
                steps.push(Step::Variance {
                    t: fp.index,
                    conj,
                    mh: n_mh - 1,
                });
            }
            Role::Pair { .. } if cp == Parameterization::Srs => {
                n_mh += 1;
                steps.push(Step::Rho {
                    t: fp.index,
                    mh: n_mh - 1,
                });
            }
            _ => {}
        }
        let collapsible = match &role {
            Role::Linear { cells } => !cells.iter().all(|c| matches!(c.1, LinCell::Nu(_))),
            Role::Variance { .. } => true,
            Role::Pair { .. } => cp == Parameterization::Srs,
            _ => false,
        };
        if collapsible {
            n_mh += 1;
            steps.push(Step::Collapsed {
                t: fp.index,
                mh: n_mh - 1,
            });
        }
        roles.push(role);
        priors.push(prior);
    }

    // fa working parameters, then unrestricted blocks.
    for (g, gp) in groups.iter().enumerate() {
        if cp == Parameterization::Fa {
            for sys in [Sys::Manifest, Sys::Latent] {
                let pat = gp.pattern(sys);
                for pair in 0..pat.v() {
                    steps.push(Step::FaLoading {
                        g,
                        sys,
                        pair,
                        end: 0,
                    });
                    steps.push(Step::FaLoading {
                        g,
                        sys,
                        pair,
                        end: 1,
                    });
                    steps.push(Step::FaPsi { g, sys, pair });
                }
                let mut vars: Vec<usize> = pat.pairs().flat_map(|(r, c)| [r, c]).collect();
                vars.sort_unstable();
                vars.dedup();
                for var in vars {
                    steps.push(Step::FaStar { g, sys, var });
                }
            }
        }
        for block in 0..gp.blocks.len() {
            steps.push(Step::Block { g, block });
        }
    }

    // fa rejects fixed variances on covarying variables: Θ* would be pinned.
    if cp == Parameterization::Fa {
        for row in &table.rows {
            let kind = table.kind(row);
            if kind.is_variance() && row.fixed.is_some() {
                let (sys, i) = match table.cell(row) {
                    Cell::Theta(i, _) => (Sys::Manifest, i),
                    Cell::Psi(i, _) => (Sys::Latent, i),
                    _ => unreachable!(),
                };
                if in_pair(row.group - 1, sys, i) {
                    return Err(Error::Model(format!(
                        "{}: fixed variances of covarying variables need --cp srs",
                        row.name()
                    )));
                }
            }
        }
    }

    // Steps that integrate the latent scores out run before the latent draw.
    steps.sort_by_key(|s| !s.is_marginal());

    Ok(Plan {
        cp,
        p,
        m,
        n_free,
        roles,
        kinds: free.iter().map(|f| f.kind).collect(),
        priors,
        names: free.iter().map(|f| f.name.clone()).collect(),
        groups,
        steps,
        n_mh,
    })
}
