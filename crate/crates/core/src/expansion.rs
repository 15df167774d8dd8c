//! Phantom-variable expansion of residual covariance matrices.
//!
//! A covariance matrix with a few free off-diagonal cells is rewritten as
//! `Θ = Λ_D Ψ_D Λ_Dᵀ + Θ*` with diagonal `Ψ_D` and `Θ*`. Each free cell
//! `(r_j, c_j)` gets its own phantom variable `D_j` loading on rows `r_j`
//! and `c_j`.
//!
//! Under [`Parameterization::Srs`] the phantom loadings are deterministic
//! functions of two variances and a correlation ([`srs_forward`]). Under
//! [`Parameterization::Fa`] the loadings, phantom variances and `Θ*` are
//! sampled directly with fixed priors ([`fa_default_priors`]).
//!
//! Fully free blocks of exogenous latent variables are not expanded; they
//! are flagged for a direct inverse-Wishart treatment instead.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::PriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    #[default]
    Srs,
    Fa,
}

impl FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srs" => Ok(Parameterization::Srs),
            "fa" => Ok(Parameterization::Fa),
            other => Err(Error::Config(format!(
                "unknown parameterization `{other}` (expected srs or fa)"
            ))),
        }
    }
}

/// Expansion plan for one covariance matrix. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CovPattern {
    pub dim: usize,
    /// Row of each phantom pair (`r_j > c_j`).
    pub r: Vec<usize>,
    pub c: Vec<usize>,
    /// Sets of variables handled as one unrestricted block.
    pub blocks: Vec<Vec<usize>>,
}

impl CovPattern {
    pub fn v(&self) -> usize {
        self.r.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.r.iter().copied().zip(self.c.iter().copied())
    }

    /// Phantom columns that load on variable `i`.
    pub fn pairs_of(&self, i: usize) -> Vec<usize> {
        self.pairs()
            .enumerate()
            .filter(|(_, (r, c))| *r == i || *c == i)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn block_of(&self, i: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&i))
    }
}

/// Plans the expansion of a symmetric pattern of free (or nonzero) cells.
///
/// Cells whose variables form a complete component of size two or more, all
/// of whose members are `block_eligible`, become a block. Every other
/// off-diagonal cell becomes a phantom pair, enumerated column by column.
pub fn plan_expansion(pattern: &DMatrix<bool>, block_eligible: &[bool]) -> CovPattern {
    let p = pattern.nrows();
    assert_eq!(pattern.ncols(), p, "pattern must be square");
    assert_eq!(
        block_eligible.len(),
        p,
        "eligibility flags must match dimension"
    );
    let linked = |i: usize, j: usize| i != j && (pattern[(i, j)] || pattern[(j, i)]);

    // Connected components of the off-diagonal graph.
    let mut comp = vec![usize::MAX; p];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..p {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut k = 0;
        while k < members.len() {
            let i = members[k];
            for j in 0..p {
                if comp[j] == usize::MAX && linked(i, j) {
                    comp[j] = id;
                    members.push(j);
                }
            }
            k += 1;
        }
        members.sort_unstable();
        components.push(members);
    }

    let mut blocks = Vec::new();
    let mut in_block = vec![false; p];
    for members in components.into_iter().filter(|m| m.len() >= 2) {
        let complete = members
            .iter()
            .enumerate()
            .all(|(a, &i)| members[a + 1..].iter().all(|&j| linked(i, j)));
        if complete && members.iter().all(|&i| block_eligible[i]) {
            for &i in &members {
                in_block[i] = true;
            }
            blocks.push(members);
        }
    }

    let mut r = Vec::new();
    let mut c = Vec::new();
    for col in 0..p {
        for row in col + 1..p {
            if linked(row, col) && !(in_block[row] && in_block[col]) {
                r.push(row);
                c.push(col);
            }
        }
    }
    CovPattern {
        dim: p,
        r,
        c,
        blocks,
    }
}

/// Sign convention for phantom loadings: 1 for positive values, -1 otherwise.
pub fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrsBlock {
    pub theta_11: f64,
    pub theta_22: f64,
    pub rho_12: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrsWorking {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub psi_d: f64,
    pub theta_star_11: f64,
    pub theta_star_22: f64,
}

pub fn srs_forward(block: SrsBlock) -> SrsWorking {
    let a = block.rho_12.abs();
    SrsWorking {
        lambda_1: (a * block.theta_11).sqrt(),
        lambda_2: sign(block.rho_12) * (a * block.theta_22).sqrt(),
        psi_d: 1.0,
        theta_star_11: block.theta_11 - a * block.theta_11,
        theta_star_22: block.theta_22 - a * block.theta_22,
    }
}

/// Working (expanded) form of one covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingCov {
    /// p×v phantom loadings.
    pub lambda_d: DMatrix<f64>,
    /// Phantom variances (diagonal of Ψ_D).
    pub psi_d: DVector<f64>,
    /// Θ*: diagonal except for unrestricted blocks.
    pub theta_star: DMatrix<f64>,
}

/// Θ = Λ_D Ψ_D Λ_Dᵀ + Θ*.
pub fn reconstruct(w: &WorkingCov) -> DMatrix<f64> {
    let mut out = w.theta_star.clone();
    for j in 0..w.lambda_d.ncols() {
        let col = w.lambda_d.column(j);
        let nz: Vec<usize> = (0..col.len()).filter(|&i| col[i] != 0.0).collect();
        for &a in &nz {
            for &b in &nz {
                out[(a, b)] += col[a] * col[b] * w.psi_d[j];
            }
        }
    }
    out
}

/// srs working form of an inferential covariance matrix. Returns `None`
/// when a variable shared by several pairs would get a negative `Θ*`
/// diagonal, or when a correlation falls outside (-1, 1).
pub fn srs_working(cov: &DMatrix<f64>, plan: &CovPattern) -> Option<WorkingCov> {
    let p = plan.dim;
    let v = plan.v();
    let mut lambda_d = DMatrix::zeros(p, v);
    let mut theta_star = DMatrix::zeros(p, p);
    for i in 0..p {
        theta_star[(i, i)] = cov[(i, i)];
    }
    for block in &plan.blocks {
        for &i in block {
            for &j in block {
                theta_star[(i, j)] = cov[(i, j)];
            }
        }
    }
    for (j, (r, c)) in plan.pairs().enumerate() {
        let (trr, tcc) = (cov[(r, r)], cov[(c, c)]);
        let rho = cov[(r, c)] / (trr * tcc).sqrt();
        if !(rho.abs() < 1.0) {
            return None;
        }
        // r is the later variable; λ₁ belongs to the earlier one.
        let w = srs_forward(SrsBlock {
            theta_11: tcc,
            theta_22: trr,
            rho_12: rho,
        });
        lambda_d[(c, j)] = w.lambda_1;
        lambda_d[(r, j)] = w.lambda_2;
        theta_star[(c, c)] -= tcc - w.theta_star_11;
        theta_star[(r, r)] -= trr - w.theta_star_22;
    }
    if (0..p).any(|i| !(theta_star[(i, i)] >= 0.0)) {
        return None;
    }
    Some(WorkingCov {
        lambda_d,
        psi_d: DVector::from_element(v, 1.0),
        theta_star,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrsPriors {
    /// Inverse-gamma prior per diagonal element.
    pub variances: Vec<PriorSpec>,
    pub rho: PriorSpec,
}

/// Marginal priors implied by an inverse-Wishart(S, d) prior on a p×p
/// covariance matrix, expressed per variance and per correlation.
pub fn srs_priors_for(d: f64, s: &[f64], p: usize) -> Result<SrsPriors> {
    if !(d > p as f64 - 1.0) {
        return Err(Error::Model(format!(
            "degrees of freedom {d} must exceed p - 1 = {}",
            p as f64 - 1.0
        )));
    }
    if s.len() != p || s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Model(
            "scale diagonal must hold p positive values".into(),
        ));
    }
    let shape = (d - p as f64 + 1.0) / 2.0;
    Ok(SrsPriors {
        variances: s
            .iter()
            .map(|sii| PriorSpec::inverse_gamma(shape, sii / 2.0))
            .collect(),
        rho: PriorSpec::beta_rescaled(shape, shape),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaPriors {
    pub psi_d: PriorSpec,
    pub lambda: PriorSpec,
    pub theta_star: PriorSpec,
}

/// Fixed priors on the fa working parameters.
pub fn fa_default_priors() -> FaPriors {
    FaPriors {
        psi_d: PriorSpec::inverse_gamma(1.0, 0.5),
        lambda: PriorSpec::normal(0.0, 1e-4),
        theta_star: PriorSpec::inverse_gamma(1.0, 0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{Family, Scale};
    use approx::assert_relative_eq;

    fn pattern(p: usize, cells: &[(usize, usize)]) -> DMatrix<bool> {
        let mut m = DMatrix::from_element(p, p, false);
        for &(i, j) in cells {
            m[(i, j)] = true;
            m[(j, i)] = true;
        }
        m
    }

    #[test]
    fn political_democracy_plan() {
        // x1..x3, y1..y8; 1-based cells y1~~y5 etc.
        let cells = [(8, 4), (7, 5), (9, 5), (10, 6), (11, 7), (11, 9)];
        let pat = pattern(11, &cells.map(|(r, c)| (r - 1, c - 1)));
        let plan = plan_expansion(&pat, &[false; 11]);
        assert_eq!(plan.v(), 6);
        let got: Vec<_> = plan.pairs().map(|(r, c)| (r + 1, c + 1)).collect();
        assert_eq!(got, cells);
        assert!(plan.blocks.is_empty());
        assert_eq!(plan.pairs_of(4), vec![1, 2]);
    }

    #[test]
    fn diagonal_and_block_plans() {
        let plan = plan_expansion(&pattern(4, &[]), &[true; 4]);
        assert_eq!(plan.v(), 0);
        let full = pattern(3, &[(1, 0), (2, 0), (2, 1)]);
        let plan = plan_expansion(&full, &[true; 3]);
        assert_eq!(plan.v(), 0);
        assert_eq!(plan.blocks, vec![vec![0, 1, 2]]);
        let plan = plan_expansion(&full, &[true, true, false]);
        assert_eq!(plan.v(), 3);
        assert!(plan.blocks.is_empty());
        let partial = pattern(3, &[(1, 0), (2, 1)]);
        assert_eq!(plan_expansion(&partial, &[true; 3]).v(), 2);
    }

    #[test]
    fn srs_forward_examples() {
        let w = srs_forward(SrsBlock {
            theta_11: 4.0,
            theta_22: 9.0,
            rho_12: 0.5,
        });
        assert_relative_eq!(w.lambda_1, 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(w.lambda_2, 4.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!((w.theta_star_11, w.theta_star_22, w.psi_d), (2.0, 4.5, 1.0));
        assert_relative_eq!(w.lambda_1 * w.lambda_2, 3.0, epsilon = 1e-14);

        let w = srs_forward(SrsBlock {
            theta_11: 1.0,
            theta_22: 1.0,
            rho_12: -0.5,
        });
        assert_relative_eq!(w.lambda_1, 0.5f64.sqrt());
        assert_relative_eq!(w.lambda_2, -0.5f64.sqrt());
        assert_relative_eq!(w.lambda_1 * w.lambda_2, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn sign_of_zero_is_negative() {
        assert_eq!(sign(0.0), -1.0);
        assert_eq!(sign(-0.0), -1.0);
        assert_eq!(sign(1e-300), 1.0);
        let w = srs_forward(SrsBlock {
            theta_11: 2.0,
            theta_22: 3.0,
            rho_12: 0.0,
        });
        assert_eq!(w.lambda_1, 0.0);
        assert_eq!(w.lambda_2, 0.0);
        assert!(w.lambda_2.is_sign_negative());
        assert_eq!((w.theta_star_11, w.theta_star_22), (2.0, 3.0));
    }

    #[test]
    fn reconstruct_examples() {
        let w = srs_forward(SrsBlock {
            theta_11: 4.0,
            theta_22: 9.0,
            rho_12: 0.5,
        });
        let wc = WorkingCov {
            lambda_d: DMatrix::from_column_slice(2, 1, &[w.lambda_1, w.lambda_2]),
            psi_d: DVector::from_element(1, 1.0),
            theta_star: DMatrix::from_diagonal(&DVector::from_vec(vec![
                w.theta_star_11,
                w.theta_star_22,
            ])),
        };
        let th = reconstruct(&wc);
        assert_relative_eq!(
            th,
            DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0]),
            epsilon = 1e-14
        );

        let fa = WorkingCov {
            lambda_d: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            psi_d: DVector::from_element(1, 0.5),
            theta_star: DMatrix::identity(2, 2),
        };
        assert_eq!(
            reconstruct(&fa),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 1.5])
        );

        let fa = WorkingCov {
            lambda_d: DMatrix::from_column_slice(2, 1, &[2.0, 3.0]),
            psi_d: DVector::from_element(1, 1.0),
            theta_star: DMatrix::identity(2, 2),
        };
        let th = reconstruct(&fa);
        assert_eq!((th[(0, 0)], th[(0, 1)]), (5.0, 6.0));

        let zero = WorkingCov {
            lambda_d: DMatrix::from_column_slice(2, 1, &[0.0, 0.0]),
            psi_d: DVector::from_element(1, 1.0),
            theta_star: DMatrix::identity(2, 2),
        };
        assert_eq!(reconstruct(&zero)[(0, 1)], 0.0);

        let empty = WorkingCov {
            lambda_d: DMatrix::zeros(3, 0),
            psi_d: DVector::zeros(0),
            theta_star: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
        };
        assert_eq!(reconstruct(&empty), empty.theta_star);
    }

    #[test]
    fn srs_working_round_trip_with_shared_variable() {
        // variable 1 in two pairs
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 2.0, -0.5, 0.0, -0.5, 1.0]);
        let plan = plan_expansion(&pattern(3, &[(1, 0), (2, 1)]), &[false; 3]);
        let w = srs_working(&cov, &plan).unwrap();
        assert_relative_eq!(reconstruct(&w), cov, epsilon = 1e-14);
        assert_eq!(reconstruct(&w)[(0, 2)], 0.0);

        // too much correlation mass on the shared variable
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.7, 0.0, 0.7, 1.0, 0.7, 0.0, 0.7, 1.0]);
        assert!(srs_working(&cov, &plan).is_none());
    }

    #[test]
    fn srs_prior_mapping() {
        let pr = srs_priors_for(12.0, &[1.0; 11], 11).unwrap();
        assert_eq!(
            pr.variances[0].family,
            Family::Gamma {
                shape: 1.0,
                rate: 0.5
            }
        );
        assert_eq!(pr.variances[0].scale, Scale::Precision);
        assert_eq!(pr.rho.family, Family::BetaRescaled { a: 1.0, b: 1.0 });

        let pr = srs_priors_for(5.0, &[2.0, 1.0], 2).unwrap();
        assert_eq!(
            pr.variances[0].family,
            Family::Gamma {
                shape: 2.0,
                rate: 1.0
            }
        );
        assert_eq!(pr.rho.family, Family::BetaRescaled { a: 2.0, b: 2.0 });

        assert!(srs_priors_for(10.0, &[1.0; 11], 11).is_err());
    }

    #[test]
    fn fa_priors_are_fixed() {
        let fa = fa_default_priors();
        assert_eq!(
            fa.psi_d.family,
            Family::Gamma {
                shape: 1.0,
                rate: 0.5
            }
        );
        assert_eq!(
            fa.theta_star.family,
            Family::Gamma {
                shape: 1.0,
                rate: 0.5
            }
        );
        assert_eq!(
            fa.lambda.family,
            Family::Normal {
                mean: 0.0,
                precision: 1e-4
            }
        );
    }
}
