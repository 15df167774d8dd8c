//! Model-implied moments and multivariate normal log-likelihoods.
//!
//! `μ = ν + Λ(I−B)⁻¹α` and `Σ = Λ(I−B)⁻¹Ψ(I−B)⁻ᵀΛᵀ + Θ` per group. With
//! α = 0 for every latent (the default) the mean reduces to ν.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{GroupMatrices, ModelMatrices};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

pub type ImpliedMoments = Vec<Moments>;

pub fn group_moments(g: &GroupMatrices) -> Result<Moments> {
    let m = g.beta.nrows();
    let ib = DMatrix::identity(m, m) - &g.beta;
    let ib_inv = ib
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I - B is singular".into()))?;
    let a = &g.lambda * &ib_inv;
    let mu = &g.nu + &a * &g.alpha;
    let mut sigma = &a * &g.psi * a.transpose() + &g.theta;
    // exact symmetry
    let p = sigma.nrows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(Moments { mu, sigma })
}

pub fn implied_moments(m: &ModelMatrices) -> Result<ImpliedMoments> {
    m.groups.iter().map(group_moments).collect()
}

/// Cholesky factor plus log determinant of a covariance matrix.
#[derive(Debug, Clone)]
pub struct MvnFactor {
    chol: Cholesky<f64, Dyn>,
    pub log_det: f64,
}

impl MvnFactor {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        Ok(MvnFactor { chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// (x−μ)ᵀΣ⁻¹(x−μ) for a centered vector.
    pub fn mahalanobis(&self, centered: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let p = centered.len();
        // forward substitution, lower triangle only
        let mut z = centered.clone();
        for i in 0..p {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        z.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn logpdf(&self, centered: &DVector<f64>) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis(centered))
    }
}

/// Per-case log densities, cases ordered group by group.
pub fn casewise_loglik(data: &[DMatrix<f64>], moments: &ImpliedMoments) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.iter().map(|d| d.nrows()).sum());
    casewise_into(data, moments, &mut out)?;
    Ok(out)
}

/// Appends per-case log densities to `out`.
pub fn casewise_into(
    data: &[DMatrix<f64>],
    moments: &ImpliedMoments,
    out: &mut Vec<f64>,
) -> Result<()> {
    check_groups(data, moments)?;
    for (y, mom) in data.iter().zip(moments) {
        let f = MvnFactor::new(&mom.sigma)?;
        let mut c = DVector::zeros(y.ncols());
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                c[j] = y[(i, j)] - mom.mu[j];
            }
            out.push(f.logpdf(&c));
        }
    }
    Ok(())
}

fn check_groups(data: &[DMatrix<f64>], moments: &ImpliedMoments) -> Result<()> {
    if data.len() != moments.len() {
        return Err(Error::Data(format!(
            "{} data groups but {} moment groups",
            data.len(),
            moments.len()
        )));
    }
    for (y, m) in data.iter().zip(moments) {
        if y.ncols() != m.mu.len() {
            return Err(Error::Data(format!(
                "data has {} columns, model has {}",
                y.ncols(),
                m.mu.len()
            )));
        }
    }
    Ok(())
}

/// Sample mean and ML (denominator n) covariance of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl SampleStats {
    pub fn new(y: &DMatrix<f64>) -> Self {
        let n = y.nrows();
        let p = y.ncols();
        let mut mean = DVector::zeros(p);
        for i in 0..n {
            for j in 0..p {
                mean[j] += y[(i, j)];
            }
        }
        if n > 0 {
            mean /= n as f64;
        }
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..n {
            for a in 0..p {
                let da = y[(i, a)] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += da * (y[(i, b)] - mean[b]);
                }
            }
        }
        if n > 0 {
            cov /= n as f64;
        }
        for a in 0..p {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        SampleStats { n, mean, cov }
    }

    /// Total log-likelihood of the group under N(μ, Σ), computed from the
    /// sufficient statistics.
    pub fn loglik(&self, mom: &Moments) -> Result<f64> {
        let f = MvnFactor::new(&mom.sigma)?;
        Ok(self.loglik_with(&f, &mom.mu))
    }

    pub fn loglik_with(&self, f: &MvnFactor, mu: &DVector<f64>) -> f64 {
        let p = self.mean.len() as f64;
        let inv = f.inverse();
        let tr = (&inv * &self.cov).trace();
        let d = &self.mean - mu;
        let q = f.mahalanobis(&d);
        -0.5 * self.n as f64 * (p * LN_2PI + f.log_det + tr + q)
    }

    /// Log-likelihood at the ML moments.
    pub fn saturated_loglik(&self) -> Result<f64> {
        let p = self.mean.len();
        if self.n <= p {
            return Err(Error::Data(format!(
                "saturated model needs more cases than variables (n = {}, p = {p})",
                self.n
            )));
        }
        let f = MvnFactor::new(&self.cov)
            .map_err(|_| Error::Data("sample covariance matrix is singular".into()))?;
        Ok(-0.5 * self.n as f64 * (p as f64 * LN_2PI + f.log_det + p as f64))
    }
}

pub fn sample_stats(data: &[DMatrix<f64>]) -> Vec<SampleStats> {
    data.iter().map(SampleStats::new).collect()
}

/// Saturated log-likelihood summed over groups.
pub fn saturated_loglik(data: &[DMatrix<f64>]) -> Result<f64> {
    sample_stats(data)
        .iter()
        .map(SampleStats::saturated_loglik)
        .sum()
}

/// Total log-likelihood summed over groups, from sufficient statistics.
pub fn total_loglik(stats: &[SampleStats], moments: &ImpliedMoments) -> Result<f64> {
    if stats.len() != moments.len() {
        return Err(Error::Data("group count mismatch".into()));
    }
    stats.iter().zip(moments).map(|(s, m)| s.loglik(m)).sum()
}

/// Likelihood-ratio statistic against the saturated model.
pub fn lrt(stats: &[SampleStats], moments: &ImpliedMoments) -> Result<f64> {
    let sat: f64 = stats
        .iter()
        .map(SampleStats::saturated_loglik)
        .sum::<Result<f64>>()?;
    Ok(-2.0 * total_loglik(stats, moments)? + 2.0 * sat)
}
