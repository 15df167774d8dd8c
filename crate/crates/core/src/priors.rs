//! Prior distributions.
//!
//! Prior strings follow the BUGS/JAGS conventions: `dnorm(mu, tau)` and
//! `dlnorm(mu, tau)` take a **precision** as their second argument, not a
//! standard deviation. So `dnorm(0,1e-2)` has standard deviation 10.
//!
//! A prior may carry a scale modifier (`[sd]` or `[var]`) and a truncation
//! suffix (`T(lo,hi)`):
//!
//! ```text
//! dnorm(0,1e-2)
//! dunif(0,20)[sd]
//! dnorm(9,.25)T(0,18)
//! ```
//!
//! Variance parameters default to priors on the precision. All densities
//! returned by [`log_density`] are expressed on the variance itself, with
//! the Jacobian of the precision/sd transform included.

use std::fmt;

use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{
    Beta as BetaCdf, ContinuousCDF, Gamma as GammaCdf, LogNormal as LogNormalCdf,
    Normal as NormalCdf,
};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameter classes that share a default prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorClass {
    Nu,
    Alpha,
    Lambda,
    Beta,
    Itheta,
    Ipsi,
    Rho,
    Ibpsi,
}

impl PriorClass {
    pub const ALL: [PriorClass; 8] = [
        PriorClass::Nu,
        PriorClass::Alpha,
        PriorClass::Lambda,
        PriorClass::Beta,
        PriorClass::Itheta,
        PriorClass::Ipsi,
        PriorClass::Rho,
        PriorClass::Ibpsi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorClass::Nu => "nu",
            PriorClass::Alpha => "alpha",
            PriorClass::Lambda => "lambda",
            PriorClass::Beta => "beta",
            PriorClass::Itheta => "itheta",
            PriorClass::Ipsi => "ipsi",
            PriorClass::Rho => "rho",
            PriorClass::Ibpsi => "ibpsi",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn is_variance(self) -> bool {
        matches!(self, PriorClass::Itheta | PriorClass::Ipsi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Normal {
        mean: f64,
        precision: f64,
    },
    Gamma {
        shape: f64,
        rate: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
    /// Beta distribution stretched from (0,1) to (-1,1).
    BetaRescaled {
        a: f64,
        b: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    LogNormal {
        meanlog: f64,
        precision: f64,
    },
    /// Wishart on a precision block with identity scale. `df = None` means
    /// block dimension plus one.
    Wishart {
        df: Option<f64>,
    },
}

/// What quantity the family describes, relative to the parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// The parameter itself (intercepts, loadings, correlations, ...).
    Direct,
    /// A variance parameter, prior on its inverse.
    Precision,
    /// A variance parameter, prior on its square root.
    Sd,
    /// A variance parameter, prior on the variance.
    Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub family: Family,
    pub scale: Scale,
    pub truncation: Option<(f64, f64)>,
    /// Source text as written by the user; echoed in summaries.
    pub source: String,
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PriorSpec {
    /// Normal prior given as mean and precision.
    pub fn normal(mean: f64, precision: f64) -> Self {
        PriorSpec {
            family: Family::Normal { mean, precision },
            scale: Scale::Direct,
            truncation: None,
            source: format!("dnorm({},{})", fmt_num(mean), fmt_num(precision)),
        }
    }

    /// Inverse-gamma prior on a variance, written as a gamma on the precision.
    pub fn inverse_gamma(shape: f64, rate: f64) -> Self {
        PriorSpec {
            family: Family::Gamma { shape, rate },
            scale: Scale::Precision,
            truncation: None,
            source: format!("dgamma({},{})", fmt_num(shape), fmt_num(rate)),
        }
    }

    pub fn beta_rescaled(a: f64, b: f64) -> Self {
        PriorSpec {
            family: Family::BetaRescaled { a, b },
            scale: Scale::Direct,
            truncation: None,
            source: format!("dbeta({},{})", fmt_num(a), fmt_num(b)),
        }
    }

    pub fn is_variance(&self) -> bool {
        self.scale != Scale::Direct
    }

    /// True for an untruncated normal on a direct-scale parameter.
    pub fn conjugate_normal(&self) -> Option<(f64, f64)> {
        match (self.family, self.scale, self.truncation) {
            (Family::Normal { mean, precision }, Scale::Direct, None) => Some((mean, precision)),
            _ => None,
        }
    }

    /// Shape and rate when the prior is an untruncated gamma on a precision.
    pub fn conjugate_gamma(&self) -> Option<(f64, f64)> {
        match (self.family, self.scale, self.truncation) {
            (Family::Gamma { shape, rate }, Scale::Precision, None) => Some((shape, rate)),
            _ => None,
        }
    }

    /// Support of the parameter (after undoing sd/precision transforms),
    /// including truncation.
    pub fn support(&self) -> (f64, f64) {
        let (mut lo, mut hi) = family_support(&self.family);
        if let Some((tlo, thi)) = self.truncation {
            lo = lo.max(tlo);
            hi = hi.min(thi);
        }
        match self.scale {
            Scale::Direct | Scale::Var => (lo, hi),
            Scale::Sd => (
                lo.max(0.0).powi(2),
                if hi.is_finite() { hi * hi } else { hi },
            ),
            Scale::Precision => {
                let l = if hi.is_finite() { 1.0 / hi } else { 0.0 };
                let h = if lo > 0.0 { 1.0 / lo } else { f64::INFINITY };
                (l, h)
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn family_support(f: &Family) -> (f64, f64) {
    match *f {
        Family::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        Family::Gamma { .. } | Family::LogNormal { .. } => (0.0, f64::INFINITY),
        Family::Beta { .. } => (0.0, 1.0),
        Family::BetaRescaled { .. } => (-1.0, 1.0),
        Family::Uniform { lo, hi } => (lo, hi),
        Family::Wishart { .. } => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Parses a prior string without reference to the parameter it governs.
/// Scale defaults to [`Scale::Direct`] unless a modifier is present.
fn parse_raw(src: &str) -> Result<(Family, Option<Scale>, Option<(f64, f64)>)> {
    let s: String = src.chars().filter(|c| !c.is_whitespace()).collect();
    let open = s
        .find('(')
        .ok_or_else(|| Error::prior(src, "expected `name(args)`"))?;
    let name = &s[..open];
    let close = s[open..]
        .find(')')
        .map(|i| i + open)
        .ok_or_else(|| Error::prior(src, "unbalanced parentheses"))?;
    let args: Vec<&str> = s[open + 1..close].split(',').collect();
    let mut rest = &s[close + 1..];

    let mut scale = None;
    let mut truncation = None;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix('[') {
            let end = r
                .find(']')
                .ok_or_else(|| Error::prior(src, "unterminated `[` modifier"))?;
            if scale.is_some() {
                return Err(Error::prior(src, "more than one scale modifier"));
            }
            scale = Some(match &r[..end] {
                "sd" => Scale::Sd,
                "var" => Scale::Var,
                "prec" => Scale::Precision,
                other => return Err(Error::prior(src, format!("unknown modifier [{other}]"))),
            });
            rest = &r[end + 1..];
        } else if let Some(r) = rest.strip_prefix("T(") {
            let end = r
                .find(')')
                .ok_or_else(|| Error::prior(src, "unbalanced truncation parentheses"))?;
            if truncation.is_some() {
                return Err(Error::prior(src, "more than one truncation"));
            }
            let bounds: Vec<&str> = r[..end].split(',').collect();
            if bounds.len() != 2 {
                return Err(Error::prior(src, "truncation needs two bounds"));
            }
            let lo = parse_bound(src, bounds[0], f64::NEG_INFINITY)?;
            let hi = parse_bound(src, bounds[1], f64::INFINITY)?;
            if lo >= hi {
                return Err(Error::prior(src, "truncation requires lo < hi"));
            }
            truncation = Some((lo, hi));
            rest = &r[end + 1..];
        } else {
            return Err(Error::prior(
                src,
                format!("unexpected trailing text `{rest}`"),
            ));
        }
    }

    let nums = |n: usize| -> Result<Vec<f64>> {
        if args.len() != n {
            return Err(Error::prior(
                src,
                format!("`{name}` takes {n} arguments, got {}", args.len()),
            ));
        }
        args.iter()
            .map(|a| {
                a.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::prior(src, format!("non-numeric argument `{a}`")))
            })
            .collect()
    };
    let positive = |v: f64, what: &str| -> Result<f64> {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::prior(src, format!("{what} must be positive")))
        }
    };

    let family = match name {
        "dnorm" => {
            let a = nums(2)?;
            Family::Normal {
                mean: a[0],
                precision: positive(a[1], "precision")?,
            }
        }
        "dlnorm" => {
            let a = nums(2)?;
            Family::LogNormal {
                meanlog: a[0],
                precision: positive(a[1], "precision")?,
            }
        }
        "dgamma" => {
            let a = nums(2)?;
            Family::Gamma {
                shape: positive(a[0], "shape")?,
                rate: positive(a[1], "rate")?,
            }
        }
        "dbeta" => {
            let a = nums(2)?;
            Family::Beta {
                a: positive(a[0], "first shape")?,
                b: positive(a[1], "second shape")?,
            }
        }
        "dunif" => {
            let a = nums(2)?;
            if a[0] >= a[1] {
                return Err(Error::prior(src, "uniform requires lo < hi"));
            }
            Family::Uniform { lo: a[0], hi: a[1] }
        }
        "dwish" => {
            if args.len() != 2 || args[0] != "iden" {
                return Err(Error::prior(src, "expected dwish(iden,df)"));
            }
            let df = args[1]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| Error::prior(src, "non-numeric degrees of freedom"))?;
            Family::Wishart { df: Some(df) }
        }
        other => return Err(Error::prior(src, format!("unknown distribution `{other}`"))),
    };
    Ok((family, scale, truncation))
}

fn parse_bound(src: &str, s: &str, default: f64) -> Result<f64> {
    if s.is_empty() {
        return Ok(default);
    }
    s.parse::<f64>()
        .map_err(|_| Error::prior(src, format!("non-numeric truncation bound `{s}`")))
}

/// Parses a prior string for a parameter of the given class.
///
/// `dbeta` on a correlation becomes a beta rescaled to (-1,1); scale
/// modifiers are only accepted on variance classes.
pub fn parse_prior(src: &str, class: PriorClass) -> Result<PriorSpec> {
    let (mut family, scale, truncation) = parse_raw(src)?;
    let scale = match (class.is_variance(), scale) {
        (true, None) => Scale::Precision,
        (true, Some(s)) => s,
        (false, None) => Scale::Direct,
        (false, Some(_)) => {
            return Err(Error::prior(
                src,
                format!(
                    "[sd]/[var] modifiers only apply to variances, not `{}`",
                    class.name()
                ),
            ))
        }
    };
    match (class, family) {
        (PriorClass::Rho, Family::Beta { a, b }) => family = Family::BetaRescaled { a, b },
        (PriorClass::Rho, _) => {
            return Err(Error::prior(src, "correlation priors must be dbeta"));
        }
        (PriorClass::Ibpsi, Family::Wishart { .. }) => {}
        (PriorClass::Ibpsi, _) => {
            return Err(Error::prior(
                src,
                "block covariance priors must be dwish(iden,df)",
            ));
        }
        (_, Family::Wishart { .. }) => {
            return Err(Error::prior(
                src,
                "dwish is only valid for covariance blocks",
            ));
        }
        _ => {}
    }
    if matches!(family, Family::Wishart { .. }) && truncation.is_some() {
        return Err(Error::prior(src, "dwish cannot be truncated"));
    }
    Ok(PriorSpec {
        family,
        scale,
        truncation,
        source: src.trim().to_string(),
    })
}

/// Default prior for each parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultPriors {
    pub nu: PriorSpec,
    pub alpha: PriorSpec,
    pub lambda: PriorSpec,
    pub beta: PriorSpec,
    pub itheta: PriorSpec,
    pub ipsi: PriorSpec,
    pub rho: PriorSpec,
    pub ibpsi: PriorSpec,
}

impl DefaultPriors {
    pub fn get(&self, class: PriorClass) -> &PriorSpec {
        match class {
            PriorClass::Nu => &self.nu,
            PriorClass::Alpha => &self.alpha,
            PriorClass::Lambda => &self.lambda,
            PriorClass::Beta => &self.beta,
            PriorClass::Itheta => &self.itheta,
            PriorClass::Ipsi => &self.ipsi,
            PriorClass::Rho => &self.rho,
            PriorClass::Ibpsi => &self.ibpsi,
        }
    }

    fn get_mut(&mut self, class: PriorClass) -> &mut PriorSpec {
        match class {
            PriorClass::Nu => &mut self.nu,
            PriorClass::Alpha => &mut self.alpha,
            PriorClass::Lambda => &mut self.lambda,
            PriorClass::Beta => &mut self.beta,
            PriorClass::Itheta => &mut self.itheta,
            PriorClass::Ipsi => &mut self.ipsi,
            PriorClass::Rho => &mut self.rho,
            PriorClass::Ibpsi => &mut self.ibpsi,
        }
    }

    /// `(name, prior string)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        PriorClass::ALL
            .iter()
            .map(|c| (c.name(), self.get(*c).source.clone()))
            .collect()
    }
}

impl Default for DefaultPriors {
    fn default() -> Self {
        let p = |src: &str, class| parse_prior(src, class).expect("built-in prior parses");
        DefaultPriors {
            nu: p("dnorm(0,1e-3)", PriorClass::Nu),
            alpha: p("dnorm(0,1e-2)", PriorClass::Alpha),
            lambda: p("dnorm(0,1e-2)", PriorClass::Lambda),
            beta: p("dnorm(0,1e-2)", PriorClass::Beta),
            itheta: p("dgamma(1,.5)", PriorClass::Itheta),
            ipsi: p("dgamma(1,.5)", PriorClass::Ipsi),
            rho: p("dbeta(1,1)", PriorClass::Rho),
            // Displayed for the 2x2 case; df follows the block dimension.
            ibpsi: PriorSpec {
                family: Family::Wishart { df: None },
                scale: Scale::Direct,
                truncation: None,
                source: "dwish(iden,3)".to_string(),
            },
        }
    }
}

/// Builds the default prior table with `(class name, prior string)` overrides.
pub fn default_priors<S: AsRef<str>>(overrides: &[(S, S)]) -> Result<DefaultPriors> {
    let mut table = DefaultPriors::default();
    for (key, src) in overrides {
        let key = key.as_ref();
        let class = PriorClass::from_name(key).ok_or_else(|| {
            Error::Config(format!(
                "unknown default-prior key `{key}` (expected one of nu, alpha, lambda, beta, itheta, ipsi, rho, ibpsi)"
            ))
        })?;
        *table.get_mut(class) = parse_prior(src.as_ref(), class)?;
    }
    Ok(table)
}

/// Log density of the family itself, ignoring scale and truncation.
fn family_log_density(f: &Family, x: f64) -> f64 {
    match *f {
        Family::Normal { mean, precision } => {
            0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * (x - mean).powi(2)
        }
        Family::Gamma { shape, rate } => {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
        }
        Family::Beta { a, b } => {
            if x <= 0.0 || x >= 1.0 {
                return f64::NEG_INFINITY;
            }
            (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
        }
        Family::BetaRescaled { a, b } => {
            if x <= -1.0 || x >= 1.0 {
                return f64::NEG_INFINITY;
            }
            let u = 0.5 * (x + 1.0);
            (a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u).ln() - ln_beta(a, b) - std::f64::consts::LN_2
        }
        Family::Uniform { lo, hi } => {
            if x < lo || x > hi {
                f64::NEG_INFINITY
            } else {
                -(hi - lo).ln()
            }
        }
        Family::LogNormal { meanlog, precision } => {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let lx = x.ln();
            0.5 * (precision.ln() - LN_2PI) - lx - 0.5 * precision * (lx - meanlog).powi(2)
        }
        Family::Wishart { .. } => f64::NEG_INFINITY,
    }
}

fn family_cdf(f: &Family, x: f64) -> f64 {
    match *f {
        Family::Normal { mean, precision } => NormalCdf::new(mean, precision.sqrt().recip())
            .expect("valid normal")
            .cdf(x),
        Family::Gamma { shape, rate } => {
            if x <= 0.0 {
                0.0
            } else if x.is_infinite() {
                1.0
            } else {
                GammaCdf::new(shape, rate).expect("valid gamma").cdf(x)
            }
        }
        Family::Beta { a, b } => BetaCdf::new(a, b)
            .expect("valid beta")
            .cdf(x.clamp(0.0, 1.0)),
        Family::BetaRescaled { a, b } => BetaCdf::new(a, b)
            .expect("valid beta")
            .cdf((0.5 * (x + 1.0)).clamp(0.0, 1.0)),
        Family::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
        Family::LogNormal { meanlog, precision } => {
            if x <= 0.0 {
                0.0
            } else if x.is_infinite() {
                1.0
            } else {
                LogNormalCdf::new(meanlog, precision.sqrt().recip())
                    .expect("valid lognormal")
                    .cdf(x)
            }
        }
        Family::Wishart { .. } => f64::NAN,
    }
}

fn family_quantile(f: &Family, p: f64) -> f64 {
    match *f {
        Family::Normal { mean, precision } => NormalCdf::new(mean, precision.sqrt().recip())
            .expect("valid normal")
            .inverse_cdf(p),
        Family::Gamma { shape, rate } => GammaCdf::new(shape, rate)
            .expect("valid gamma")
            .inverse_cdf(p),
        Family::Beta { a, b } => BetaCdf::new(a, b).expect("valid beta").inverse_cdf(p),
        Family::BetaRescaled { a, b } => {
            2.0 * BetaCdf::new(a, b).expect("valid beta").inverse_cdf(p) - 1.0
        }
        Family::Uniform { lo, hi } => lo + p * (hi - lo),
        Family::LogNormal { meanlog, precision } => {
            LogNormalCdf::new(meanlog, precision.sqrt().recip())
                .expect("valid lognormal")
                .inverse_cdf(p)
        }
        Family::Wishart { .. } => f64::NAN,
    }
}

/// Log of the family's mass inside the truncation interval.
fn log_truncated_mass(spec: &PriorSpec) -> f64 {
    match spec.truncation {
        None => 0.0,
        Some((lo, hi)) => {
            let mass = family_cdf(&spec.family, hi) - family_cdf(&spec.family, lo);
            mass.max(0.0).ln()
        }
    }
}

/// Maps a parameter value to the quantity the family describes, returning
/// the log Jacobian |dx/dvalue|.
fn to_family_scale(scale: Scale, value: f64) -> Option<(f64, f64)> {
    match scale {
        Scale::Direct | Scale::Var => Some((value, 0.0)),
        Scale::Precision => {
            if value <= 0.0 {
                None
            } else {
                Some((1.0 / value, -2.0 * value.ln()))
            }
        }
        Scale::Sd => {
            if value <= 0.0 {
                None
            } else {
                let sd = value.sqrt();
                Some((sd, -std::f64::consts::LN_2 - 0.5 * value.ln()))
            }
        }
    }
}

fn from_family_scale(scale: Scale, x: f64) -> f64 {
    match scale {
        Scale::Direct | Scale::Var => x,
        Scale::Precision => 1.0 / x,
        Scale::Sd => x * x,
    }
}

/// Log prior density of a parameter value. Variances are evaluated on the
/// variance scale, so sd- and precision-based priors include their Jacobian.
/// Returns `-inf` outside the support or truncation region.
pub fn log_density(spec: &PriorSpec, value: f64) -> f64 {
    if !value.is_finite() {
        return f64::NEG_INFINITY;
    }
    let Some((x, log_jac)) = to_family_scale(spec.scale, value) else {
        return f64::NEG_INFINITY;
    };
    if let Some((lo, hi)) = spec.truncation {
        if x < lo || x > hi {
            return f64::NEG_INFINITY;
        }
    }
    let lp = family_log_density(&spec.family, x);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_jac - log_truncated_mass(spec)
}

/// Value on the scale the family describes: the precision, sd or variance
/// for variance parameters, the value itself otherwise.
pub fn to_native(scale: Scale, value: f64) -> Option<f64> {
    to_family_scale(scale, value).map(|(x, _)| x)
}

pub fn from_native(scale: Scale, x: f64) -> f64 {
    from_family_scale(scale, x)
}

/// Log prior density on the family's own scale (no change-of-variable term).
pub fn log_density_native(spec: &PriorSpec, x: f64) -> f64 {
    if !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    if let Some((lo, hi)) = spec.truncation {
        if x < lo || x > hi {
            return f64::NEG_INFINITY;
        }
    }
    let lp = family_log_density(&spec.family, x);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp - log_truncated_mass(spec)
}

/// Draws a parameter value from its prior (variances on the variance scale).
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, rng: &mut R) -> Result<f64> {
    if let Family::Wishart { .. } = spec.family {
        return Err(Error::prior(
            &spec.source,
            "matrix priors cannot be sampled as scalars",
        ));
    }
    let x = match spec.truncation {
        None => sample_family(&spec.family, rng),
        Some((lo, hi)) => {
            let flo = family_cdf(&spec.family, lo);
            let fhi = family_cdf(&spec.family, hi);
            if !(fhi - flo > 1e-12) {
                return Err(Error::prior(
                    &spec.source,
                    "truncation region has negligible prior mass",
                ));
            }
            let u: f64 = rng.random();
            let x = family_quantile(&spec.family, flo + u * (fhi - flo));
            x.clamp(lo, hi)
        }
    };
    Ok(from_family_scale(spec.scale, x))
}

fn sample_family<R: Rng + ?Sized>(f: &Family, rng: &mut R) -> f64 {
    match *f {
        Family::Normal { mean, precision } => Normal::new(mean, precision.sqrt().recip())
            .expect("valid normal")
            .sample(rng),
        Family::Gamma { shape, rate } => GammaDist::new(shape, 1.0 / rate)
            .expect("valid gamma")
            .sample(rng),
        Family::Beta { a, b } => BetaDist::new(a, b).expect("valid beta").sample(rng),
        Family::BetaRescaled { a, b } => {
            2.0 * BetaDist::new(a, b).expect("valid beta").sample(rng) - 1.0
        }
        Family::Uniform { lo, hi } => Uniform::new(lo, hi).expect("valid uniform").sample(rng),
        Family::LogNormal { meanlog, precision } => {
            LogNormal::new(meanlog, precision.sqrt().recip())
                .expect("valid lognormal")
                .sample(rng)
        }
        Family::Wishart { .. } => unreachable!("handled by caller"),
    }
}

/// Draws from N(mean, sd²) restricted to (lo, hi) by inverse CDF.
///
/// Intervals in the upper tail are reflected into the lower tail, where the
/// normal CDF keeps relative precision.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Option<f64> {
    if !(sd > 0.0) || !(lo < hi) {
        return None;
    }
    let std = NormalCdf::new(0.0, 1.0).ok()?;
    let (mut a, mut b) = ((lo - mean) / sd, (hi - mean) / sd);
    let flip = a > 0.0;
    if flip {
        (a, b) = (-b, -a);
    }
    let pa = std.cdf(a);
    let pb = std.cdf(b);
    if !(pb - pa > 0.0) || !(pb > 1e-300) {
        return None;
    }
    let u: f64 = rng.random();
    let z = std.inverse_cdf(pa + u * (pb - pa)).clamp(a, b);
    let z = if flip { -z } else { z };
    Some((mean + sd * z).clamp(lo, hi))
}

/// Log density of an inverse-Wishart matrix with scale `scale` and `df`
/// degrees of freedom, i.e. the law of Ψ when Ψ⁻¹ ~ Wishart(scale⁻¹, df).
pub fn inverse_wishart_log_density(
    psi: &nalgebra::DMatrix<f64>,
    scale: &nalgebra::DMatrix<f64>,
    df: f64,
) -> f64 {
    let p = psi.nrows() as f64;
    let Some(chol) = psi.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det_psi = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let Some(chol_s) = scale.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det_s = 2.0 * chol_s.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = (scale * chol.inverse()).trace();
    0.5 * df * log_det_s
        - 0.5 * df * p * std::f64::consts::LN_2
        - ln_multivariate_gamma(p as usize, 0.5 * df)
        - 0.5 * (df + p + 1.0) * log_det_psi
        - 0.5 * trace
}

pub fn ln_multivariate_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..p).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior(src: &str, class: PriorClass) -> PriorSpec {
        parse_prior(src, class).unwrap()
    }

    #[test]
    fn parses_listed_prior_strings() {
        let p = prior("dnorm(0,1e-2)", PriorClass::Lambda);
        assert_eq!(
            p.family,
            Family::Normal {
                mean: 0.0,
                precision: 0.01
            }
        );
        assert_eq!(p.scale, Scale::Direct);

        let p = prior("dunif(0,20)[sd]", PriorClass::Itheta);
        assert_eq!(p.family, Family::Uniform { lo: 0.0, hi: 20.0 });
        assert_eq!(p.scale, Scale::Sd);

        let p = prior("dlnorm(1,.1)[sd]", PriorClass::Ipsi);
        assert_eq!(
            p.family,
            Family::LogNormal {
                meanlog: 1.0,
                precision: 0.1
            }
        );
        assert_eq!(p.scale, Scale::Sd);

        let p = prior("dnorm(9,.25)T(0,18)", PriorClass::Nu);
        assert_eq!(
            p.family,
            Family::Normal {
                mean: 9.0,
                precision: 0.25
            }
        );
        assert_eq!(p.truncation, Some((0.0, 18.0)));

        let p = prior("dbeta(3,3)", PriorClass::Rho);
        assert_eq!(p.family, Family::BetaRescaled { a: 3.0, b: 3.0 });

        let p = prior("dgamma(1,.5)", PriorClass::Itheta);
        assert_eq!(p.scale, Scale::Precision);
    }

    #[test]
    fn rejects_malformed_priors() {
        assert!(parse_prior("dfoo(1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dnorm(1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dnorm(a,1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dnorm(0,1)[sd]", PriorClass::Lambda).is_err());
        assert!(parse_prior("dnorm(0,-1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dunif(2,1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dnorm(0,1)T(3,1)", PriorClass::Nu).is_err());
        assert!(parse_prior("dunif(0,1)", PriorClass::Rho).is_err());
        assert!(parse_prior("dnorm(0,1", PriorClass::Nu).is_err());
    }

    #[test]
    fn default_table() {
        let d = default_priors::<&str>(&[]).unwrap();
        let entries = d.entries();
        let expected = [
            ("nu", "dnorm(0,1e-3)"),
            ("alpha", "dnorm(0,1e-2)"),
            ("lambda", "dnorm(0,1e-2)"),
            ("beta", "dnorm(0,1e-2)"),
            ("itheta", "dgamma(1,.5)"),
            ("ipsi", "dgamma(1,.5)"),
            ("rho", "dbeta(1,1)"),
            ("ibpsi", "dwish(iden,3)"),
        ];
        for ((k, v), (ek, ev)) in entries.iter().zip(expected) {
            assert_eq!(*k, ek);
            assert_eq!(v, ev);
        }
        assert_eq!(d.ibpsi.family, Family::Wishart { df: None });
    }

    #[test]
    fn overrides_replace_single_entries() {
        let d = default_priors(&[("nu", "dnorm(5,1e-2)")]).unwrap();
        assert_eq!(
            d.nu.family,
            Family::Normal {
                mean: 5.0,
                precision: 0.01
            }
        );
        assert_eq!(d.lambda, DefaultPriors::default().lambda);
        assert!(default_priors(&[("tau", "dnorm(0,1)")]).is_err());
    }

    #[test]
    fn log_density_examples() {
        let p = PriorSpec::normal(0.0, 1.0);
        assert!((log_density(&p, 0.0) - (-0.918_938_533_204_672_7)).abs() < 1e-12);

        let p = prior("dunif(0,20)[sd]", PriorClass::Itheta);
        assert_eq!(log_density(&p, 400.01), f64::NEG_INFINITY);
        assert!(log_density(&p, 399.0).is_finite());

        let p = prior("dbeta(1,1)", PriorClass::Rho);
        assert!((log_density(&p, 0.3) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn precision_prior_on_variance_has_jacobian() {
        // Gamma(1, .5) on precision: p(v) = .5 exp(-.5/v) / v^2.
        let p = prior("dgamma(1,.5)", PriorClass::Itheta);
        let v: f64 = 2.0;
        let expected = 0.5f64.ln() - 0.5 / v - 2.0 * v.ln();
        assert!((log_density(&p, v) - expected).abs() < 1e-12);
        assert_eq!(log_density(&p, -1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn truncated_density_renormalized() {
        let p = prior("dnorm(0,1)T(0,)", PriorClass::Nu);
        let expected = 2.0f64.ln() - 0.918_938_533_204_672_7;
        assert!((log_density(&p, 0.0) - expected).abs() < 1e-9);
        assert_eq!(log_density(&p, -0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn sample_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = prior("dunif(0,1)", PriorClass::Lambda);
        for _ in 0..1000 {
            let x = sample_prior(&p, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn truncated_normal_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = prior("dnorm(9,.25)T(0,18)", PriorClass::Nu);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_prior(&p, &mut rng).unwrap())
            .collect();
        assert!(xs.iter().all(|x| (0.0..=18.0).contains(x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 9.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn gamma_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = prior("dgamma(1,.5)", PriorClass::Lambda);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_prior(&p, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // Gamma(1, rate .5): variance 4.
        let se = (4.0 / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn negligible_truncation_mass_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = prior("dnorm(0,1)T(50,60)", PriorClass::Nu);
        assert!(sample_prior(&p, &mut rng).is_err());
    }

    #[test]
    fn truncated_normal_far_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = sample_truncated_normal(0.0, 1.0, 10.0, f64::INFINITY, &mut rng).unwrap();
        assert!(x >= 10.0 && x < 11.0);
    }
}
