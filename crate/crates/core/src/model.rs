//! Parameter tables and model matrices.
//!
//! [`build_table`] compiles parsed formulas into a flat [`ParameterTable`]
//! with the usual identification defaults:
//!
//! * the first indicator of every latent variable has its loading fixed at 1
//!   (unless the term carries an explicit modifier),
//! * every manifest and latent variable gets a free (residual) variance,
//! * manifest intercepts are free, latent intercepts are fixed at 0,
//! * exogenous latent variables covary freely,
//! * all rows are replicated per group, with `group_equal` sharing free
//!   indices across groups.
//!
//! [`realize`] maps a free-parameter vector onto per-group
//! ν, α, Λ, B, Θ and Ψ matrices.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{self, DefaultPriors, PriorClass, PriorSpec};
use crate::syntax::{FormulaSpec, Modifiers, Operator};

/// What a row parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Loading,
    Regression,
    ManifestIntercept,
    LatentIntercept,
    ManifestVariance,
    LatentVariance,
    ManifestCovariance,
    LatentCovariance,
}

impl ParamKind {
    pub fn prior_class(self) -> PriorClass {
        match self {
            ParamKind::Loading => PriorClass::Lambda,
            ParamKind::Regression => PriorClass::Beta,
            ParamKind::ManifestIntercept => PriorClass::Nu,
            ParamKind::LatentIntercept => PriorClass::Alpha,
            ParamKind::ManifestVariance => PriorClass::Itheta,
            ParamKind::LatentVariance => PriorClass::Ipsi,
            ParamKind::ManifestCovariance | ParamKind::LatentCovariance => PriorClass::Rho,
        }
    }

    pub fn is_variance(self) -> bool {
        matches!(
            self,
            ParamKind::ManifestVariance | ParamKind::LatentVariance
        )
    }

    pub fn is_covariance(self) -> bool {
        matches!(
            self,
            ParamKind::ManifestCovariance | ParamKind::LatentCovariance
        )
    }

    /// Parameters that enter the mean structure linearly.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            ParamKind::Loading
                | ParamKind::Regression
                | ParamKind::ManifestIntercept
                | ParamKind::LatentIntercept
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub id: usize,
    pub lhs: String,
    pub op: String,
    pub rhs: String,
    /// 1-based group number.
    pub group: usize,
    /// 1-based free-parameter index.
    pub free: Option<usize>,
    pub fixed: Option<f64>,
    pub label: Option<String>,
    /// Prior source string, when set on this row explicitly.
    pub prior: Option<String>,
    pub start: Option<f64>,
}

impl ParameterRow {
    pub fn operator(&self) -> Operator {
        match self.op.as_str() {
            "=~" => Operator::Loading,
            "~" => Operator::Regression,
            "~~" => Operator::Covariance,
            "~1" => Operator::Intercept,
            other => unreachable!("operator `{other}` validated on construction"),
        }
    }

    /// lavaan-style name such as `ind60=~x2`, with `.g2` for later groups.
    pub fn name(&self) -> String {
        let rhs = if self.op == "~1" { "" } else { &self.rhs };
        if self.group > 1 {
            format!("{}{}{}.g{}", self.lhs, self.op, rhs, self.group)
        } else {
            format!("{}{}{}", self.lhs, self.op, rhs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub group_variable: Option<String>,
    pub levels: Vec<String>,
    pub sizes: Vec<usize>,
}

impl GroupInfo {
    pub fn single(n: usize) -> Self {
        GroupInfo {
            group_variable: None,
            levels: vec!["1".to_string()],
            sizes: vec![n],
        }
    }

    pub fn n_groups(&self) -> usize {
        self.levels.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupEqual {
    Loadings,
    Intercepts,
}

impl std::str::FromStr for GroupEqual {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loadings" => Ok(GroupEqual::Loadings),
            "intercepts" => Ok(GroupEqual::Intercepts),
            other => Err(Error::Config(format!(
                "unknown group-equal class `{other}` (expected loadings or intercepts)"
            ))),
        }
    }
}

/// Free parameter as seen by the estimator: one entry per free index.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParam {
    /// 0-based position in the parameter vector.
    pub index: usize,
    pub kind: ParamKind,
    /// Row positions (into `ParameterTable::rows`) that read this parameter.
    pub rows: Vec<usize>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    pub rows: Vec<ParameterRow>,
    pub manifest: Vec<String>,
    pub latent: Vec<String>,
    pub groups: GroupInfo,
}

impl ParameterTable {
    pub fn n_free(&self) -> usize {
        self.rows.iter().filter_map(|r| r.free).max().unwrap_or(0)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.n_groups()
    }

    pub fn manifest_index(&self, name: &str) -> Option<usize> {
        self.manifest.iter().position(|v| v == name)
    }

    pub fn latent_index(&self, name: &str) -> Option<usize> {
        self.latent.iter().position(|v| v == name)
    }

    pub fn is_latent(&self, name: &str) -> bool {
        self.latent_index(name).is_some()
    }

    pub fn kind(&self, row: &ParameterRow) -> ParamKind {
        let lat = |n: &str| self.is_latent(n);
        match row.operator() {
            Operator::Loading => ParamKind::Loading,
            Operator::Regression => ParamKind::Regression,
            Operator::Intercept => {
                if lat(&row.lhs) {
                    ParamKind::LatentIntercept
                } else {
                    ParamKind::ManifestIntercept
                }
            }
            Operator::Covariance => match (lat(&row.lhs), row.lhs == row.rhs) {
                (true, true) => ParamKind::LatentVariance,
                (false, true) => ParamKind::ManifestVariance,
                (true, false) => ParamKind::LatentCovariance,
                (false, false) => ParamKind::ManifestCovariance,
            },
        }
    }

    /// Free parameters ordered by free index.
    pub fn free_params(&self) -> Vec<FreeParam> {
        let mut out: Vec<FreeParam> = Vec::with_capacity(self.n_free());
        for (pos, row) in self.rows.iter().enumerate() {
            if let Some(f) = row.free {
                let idx = f - 1;
                if idx < out.len() {
                    out[idx].rows.push(pos);
                } else {
                    debug_assert_eq!(idx, out.len());
                    out.push(FreeParam {
                        index: idx,
                        kind: self.kind(row),
                        rows: vec![pos],
                        name: row.name(),
                    });
                }
            }
        }
        out
    }

    /// Prior in effect for a row: its own `prior()` or the class default.
    pub fn row_prior(&self, row: &ParameterRow, defaults: &DefaultPriors) -> Result<PriorSpec> {
        let class = self.kind(row).prior_class();
        match &row.prior {
            Some(src) => priors::parse_prior(src, class),
            None => Ok(defaults.get(class).clone()),
        }
    }

    /// Writes the table as CSV, one row per parameter.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a table written by [`ParameterTable::write_csv`] (possibly
    /// edited) and re-derives the variable lists.
    pub fn read_csv<R: Read>(r: R, groups: GroupInfo) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let row: ParameterRow = rec?;
            rows.push(row);
        }
        let table = Self::from_rows(rows, groups)?;
        Ok(table)
    }

    /// Builds a table from explicit rows, validating its invariants.
    pub fn from_rows(rows: Vec<ParameterRow>, groups: GroupInfo) -> Result<Self> {
        let mut latent: Vec<String> = Vec::new();
        let mut manifest: Vec<String> = Vec::new();
        for row in &rows {
            if !matches!(row.op.as_str(), "=~" | "~" | "~~" | "~1") {
                return Err(Error::Model(format!(
                    "row {}: unknown operator `{}`",
                    row.id, row.op
                )));
            }
            if row.op == "=~" && !latent.contains(&row.lhs) {
                latent.push(row.lhs.clone());
            }
        }
        for row in &rows {
            let names: &[&str] = if row.op == "~1" {
                &[&row.lhs]
            } else {
                &[&row.lhs, &row.rhs]
            };
            for n in names {
                if !latent.iter().any(|l| l == n) && !manifest.iter().any(|m| m == n) {
                    manifest.push(n.to_string());
                }
            }
            if row.free.is_some() == row.fixed.is_some() {
                return Err(Error::Model(format!(
                    "row {} ({}): exactly one of free/fixed must be set",
                    row.id,
                    row.name()
                )));
            }
            if row.group == 0 || row.group > groups.n_groups() {
                return Err(Error::Model(format!(
                    "row {}: group {} out of range",
                    row.id, row.group
                )));
            }
        }
        let table = ParameterTable {
            rows,
            manifest,
            latent,
            groups,
        };
        table.validate_free_indices()?;
        table.validate_labels()?;
        for row in &table.rows {
            if let Some(src) = &row.prior {
                priors::parse_prior(src, table.kind(row).prior_class())?;
            }
        }
        Ok(table)
    }

    fn validate_free_indices(&self) -> Result<()> {
        let used: BTreeSet<usize> = self.rows.iter().filter_map(|r| r.free).collect();
        if let Some((pos, f)) = used.iter().enumerate().find(|(pos, f)| **f != pos + 1) {
            return Err(Error::Model(format!(
                "free indices must be contiguous from 1; index {} found at position {}",
                f,
                pos + 1
            )));
        }
        let mut first_seen = 0;
        for row in &self.rows {
            if let Some(f) = row.free {
                if f > first_seen + 1 {
                    return Err(Error::Model(format!(
                        "free index {f} appears before index {}",
                        first_seen + 1
                    )));
                }
                first_seen = first_seen.max(f);
            }
        }
        let mut kinds: HashMap<usize, ParamKind> = HashMap::new();
        for row in &self.rows {
            if let Some(f) = row.free {
                let k = self.kind(row);
                if let Some(prev) = kinds.insert(f, k) {
                    if prev != k {
                        return Err(Error::Model(format!(
                            "free index {f} is shared by incompatible parameter types"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_labels(&self) -> Result<()> {
        let mut kinds: HashMap<&str, ParamKind> = HashMap::new();
        for row in &self.rows {
            if let Some(l) = &row.label {
                let k = self.kind(row);
                if let Some(prev) = kinds.insert(l.as_str(), k) {
                    if prev != k {
                        return Err(Error::Model(format!(
                            "label `{l}` is used on incompatible parameter types"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Compiles formulas into a parameter table.
///
/// `manifest_names` are the data columns available; every non-latent name in
/// the model must be among them.
pub fn build_table(
    specs: &[FormulaSpec],
    manifest_names: &[String],
    groups: &GroupInfo,
    group_equal: &BTreeSet<GroupEqual>,
) -> Result<ParameterTable> {
    if !group_equal.is_empty() && groups.n_groups() < 2 {
        return Err(Error::Model(
            "group-equal constraints need more than one group".into(),
        ));
    }
    if groups.levels.is_empty() {
        return Err(Error::Model("at least one group is required".into()));
    }

    let mut latent: Vec<String> = Vec::new();
    for s in specs.iter().filter(|s| s.op == Operator::Loading) {
        if !latent.contains(&s.lhs) {
            latent.push(s.lhs.clone());
        }
    }
    let is_latent = |n: &str| latent.iter().any(|l| l == n);

    let mut manifest: Vec<String> = Vec::new();
    let mut note_manifest = |n: &str, line: usize| -> Result<()> {
        if is_latent(n) || manifest.iter().any(|m| m == n) {
            return Ok(());
        }
        if !manifest_names.iter().any(|c| c == n) {
            return Err(Error::Model(format!("line {line}: unknown variable `{n}`")));
        }
        manifest.push(n.to_string());
        Ok(())
    };
    for s in specs {
        match s.op {
            Operator::Loading => {
                for t in &s.terms {
                    if is_latent(&t.name) {
                        return Err(Error::Model(format!(
                            "line {}: latent `{}` used as an indicator (higher-order factors are not supported)",
                            s.line, t.name
                        )));
                    }
                    note_manifest(&t.name, s.line)?;
                }
            }
            Operator::Regression => {
                for n in
                    std::iter::once(s.lhs.as_str()).chain(s.terms.iter().map(|t| t.name.as_str()))
                {
                    if !is_latent(n) {
                        return Err(Error::Model(format!(
                            "line {}: regression involving manifest variable `{n}` is not supported",
                            s.line
                        )));
                    }
                }
            }
            Operator::Covariance => {
                for t in &s.terms {
                    if is_latent(&s.lhs) != is_latent(&t.name) {
                        return Err(Error::Model(format!(
                            "line {}: covariance between a latent and a manifest variable (`{} ~~ {}`)",
                            s.line, s.lhs, t.name
                        )));
                    }
                    note_manifest(&s.lhs, s.line)?;
                    note_manifest(&t.name, s.line)?;
                }
            }
            Operator::Intercept => note_manifest(&s.lhs, s.line)?,
        }
    }
    if manifest.is_empty() {
        return Err(Error::Model("model has no manifest variables".into()));
    }

    // Endogenous latents appear on the left of a regression.
    let endogenous: BTreeSet<&str> = specs
        .iter()
        .filter(|s| s.op == Operator::Regression)
        .map(|s| s.lhs.as_str())
        .collect();
    let exogenous: Vec<&String> = latent
        .iter()
        .filter(|l| !endogenous.contains(l.as_str()))
        .collect();

    // Template rows for one group: (lhs, op, rhs, modifiers, fix-default).
    struct Template {
        lhs: String,
        op: &'static str,
        rhs: String,
        mods: Modifiers,
        default_fixed: Option<f64>,
    }
    let mut templates: Vec<Template> = Vec::new();
    let push_user = |templates: &mut Vec<Template>,
                     lhs: &str,
                     op: &'static str,
                     rhs: &str,
                     mods: &Modifiers,
                     line: usize|
     -> Result<()> {
        let same = |t: &Template| {
            t.op == op
                && ((t.lhs == lhs && t.rhs == rhs) || (op == "~~" && t.lhs == rhs && t.rhs == lhs))
        };
        if templates.iter().any(same) {
            return Err(Error::Model(format!(
                "line {line}: parameter `{lhs} {op} {rhs}` specified twice"
            )));
        }
        templates.push(Template {
            lhs: lhs.to_string(),
            op,
            rhs: rhs.to_string(),
            mods: mods.clone(),
            default_fixed: None,
        });
        Ok(())
    };

    for s in specs.iter().filter(|s| s.op == Operator::Loading) {
        for (i, t) in s.terms.iter().enumerate() {
            push_user(&mut templates, &s.lhs, "=~", &t.name, &t.modifiers, s.line)?;
            if i == 0 && t.modifiers.is_empty() {
                templates.last_mut().expect("just pushed").default_fixed = Some(1.0);
            }
        }
    }
    for s in specs.iter().filter(|s| s.op == Operator::Regression) {
        for t in &s.terms {
            push_user(&mut templates, &s.lhs, "~", &t.name, &t.modifiers, s.line)?;
        }
    }
    for s in specs.iter().filter(|s| s.op == Operator::Covariance) {
        for t in &s.terms {
            push_user(&mut templates, &s.lhs, "~~", &t.name, &t.modifiers, s.line)?;
        }
    }
    let has = |templates: &Vec<Template>, lhs: &str, op: &str, rhs: &str| {
        templates.iter().any(|t| {
            t.op == op
                && ((t.lhs == lhs && t.rhs == rhs) || (op == "~~" && t.lhs == rhs && t.rhs == lhs))
        })
    };
    for v in manifest.iter().chain(latent.iter()) {
        if !has(&templates, v, "~~", v) {
            templates.push(Template {
                lhs: v.clone(),
                op: "~~",
                rhs: v.clone(),
                mods: Modifiers::default(),
                default_fixed: None,
            });
        }
    }
    for (i, a) in exogenous.iter().enumerate() {
        for b in &exogenous[i + 1..] {
            if !has(&templates, a, "~~", b) {
                templates.push(Template {
                    lhs: (*a).clone(),
                    op: "~~",
                    rhs: (*b).clone(),
                    mods: Modifiers::default(),
                    default_fixed: None,
                });
            }
        }
    }
    let intercept_mods: HashMap<&str, (&Modifiers, usize)> = specs
        .iter()
        .filter(|s| s.op == Operator::Intercept)
        .map(|s| {
            if s.terms.len() > 1 {
                return Err(Error::Model(format!(
                    "line {}: intercept of `{}` specified twice",
                    s.line, s.lhs
                )));
            }
            Ok((s.lhs.as_str(), (&s.terms[0].modifiers, s.line)))
        })
        .collect::<Result<_>>()?;
    for v in &manifest {
        let mods = intercept_mods
            .get(v.as_str())
            .map(|m| m.0.clone())
            .unwrap_or_default();
        templates.push(Template {
            lhs: v.clone(),
            op: "~1",
            rhs: String::new(),
            mods,
            default_fixed: None,
        });
    }
    for v in &latent {
        let (mods, default_fixed) = match intercept_mods.get(v.as_str()) {
            Some((m, _)) => ((*m).clone(), None),
            None => (Modifiers::default(), Some(0.0)),
        };
        templates.push(Template {
            lhs: v.clone(),
            op: "~1",
            rhs: String::new(),
            mods,
            default_fixed,
        });
    }

    // Replicate per group and assign free indices.
    let mut rows = Vec::new();
    let mut free_by_key: HashMap<String, usize> = HashMap::new();
    let mut next_free = 1;
    for g in 1..=groups.n_groups() {
        for t in &templates {
            let mods = &t.mods;
            let fixed = mods.fixed.or(t.default_fixed);
            let row_kind_is_loading = t.op == "=~";
            let is_manifest_intercept = t.op == "~1" && !is_latent(&t.lhs);
            let equal_key = if (row_kind_is_loading && group_equal.contains(&GroupEqual::Loadings))
                || (is_manifest_intercept && group_equal.contains(&GroupEqual::Intercepts))
            {
                Some(format!(".{}{}{}", t.lhs, t.op, t.rhs))
            } else {
                None
            };
            let free = if fixed.is_some() {
                None
            } else {
                let key = mods.label.clone().or(equal_key);
                Some(match key {
                    Some(k) => *free_by_key.entry(k).or_insert_with(|| {
                        next_free += 1;
                        next_free - 1
                    }),
                    None => {
                        next_free += 1;
                        next_free - 1
                    }
                })
            };
            rows.push(ParameterRow {
                id: rows.len() + 1,
                lhs: t.lhs.clone(),
                op: t.op.to_string(),
                rhs: t.rhs.clone(),
                group: g,
                free,
                fixed,
                label: mods.label.clone(),
                prior: mods.prior.clone(),
                start: mods.start,
            });
        }
    }

    let table = ParameterTable {
        rows,
        manifest,
        latent,
        groups: groups.clone(),
    };
    table.validate_free_indices()?;
    table.validate_labels()?;
    for row in &table.rows {
        if let Some(src) = &row.prior {
            priors::parse_prior(src, table.kind(row).prior_class())?;
        }
    }
    Ok(table)
}

/// Per-group model matrices in LISREL "all y" notation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMatrices {
    pub nu: DVector<f64>,
    pub alpha: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub groups: Vec<GroupMatrices>,
}

/// Where a row lives in the model matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Nu(usize),
    Alpha(usize),
    Lambda(usize, usize),
    Beta(usize, usize),
    Theta(usize, usize),
    Psi(usize, usize),
}

impl ParameterTable {
    pub fn cell(&self, row: &ParameterRow) -> Cell {
        let m = |n: &str| self.manifest_index(n).expect("validated manifest name");
        let l = |n: &str| self.latent_index(n).expect("validated latent name");
        match self.kind(row) {
            ParamKind::Loading => Cell::Lambda(m(&row.rhs), l(&row.lhs)),
            ParamKind::Regression => Cell::Beta(l(&row.lhs), l(&row.rhs)),
            ParamKind::ManifestIntercept => Cell::Nu(m(&row.lhs)),
            ParamKind::LatentIntercept => Cell::Alpha(l(&row.lhs)),
            ParamKind::ManifestVariance | ParamKind::ManifestCovariance => {
                let (a, b) = (m(&row.lhs), m(&row.rhs));
                Cell::Theta(a.max(b), a.min(b))
            }
            ParamKind::LatentVariance | ParamKind::LatentCovariance => {
                let (a, b) = (l(&row.lhs), l(&row.rhs));
                Cell::Psi(a.max(b), a.min(b))
            }
        }
    }

    /// Zero matrices of the right shape for every group.
    pub fn empty_matrices(&self) -> ModelMatrices {
        let p = self.manifest.len();
        let m = self.latent.len();
        ModelMatrices {
            groups: (0..self.n_groups())
                .map(|_| GroupMatrices {
                    nu: DVector::zeros(p),
                    alpha: DVector::zeros(m),
                    lambda: DMatrix::zeros(p, m),
                    beta: DMatrix::zeros(m, m),
                    theta: DMatrix::zeros(p, p),
                    psi: DMatrix::zeros(m, m),
                })
                .collect(),
        }
    }
}

fn write_cell(g: &mut GroupMatrices, cell: Cell, v: f64) {
    match cell {
        Cell::Nu(i) => g.nu[i] = v,
        Cell::Alpha(i) => g.alpha[i] = v,
        Cell::Lambda(i, j) => g.lambda[(i, j)] = v,
        Cell::Beta(i, j) => g.beta[(i, j)] = v,
        Cell::Theta(i, j) => {
            g.theta[(i, j)] = v;
            g.theta[(j, i)] = v;
        }
        Cell::Psi(i, j) => {
            g.psi[(i, j)] = v;
            g.psi[(j, i)] = v;
        }
    }
}

fn read_cell(g: &GroupMatrices, cell: Cell) -> f64 {
    match cell {
        Cell::Nu(i) => g.nu[i],
        Cell::Alpha(i) => g.alpha[i],
        Cell::Lambda(i, j) => g.lambda[(i, j)],
        Cell::Beta(i, j) => g.beta[(i, j)],
        Cell::Theta(i, j) => g.theta[(i, j)],
        Cell::Psi(i, j) => g.psi[(i, j)],
    }
}

/// Fills model matrices from a free-parameter vector.
pub fn realize(table: &ParameterTable, theta: &[f64]) -> Result<ModelMatrices> {
    let k = table.n_free();
    if theta.len() != k {
        return Err(Error::Model(format!(
            "parameter vector has length {}, table has {k} free parameters",
            theta.len()
        )));
    }
    let mut mats = table.empty_matrices();
    for row in &table.rows {
        let v = match (row.free, row.fixed) {
            (Some(f), _) => theta[f - 1],
            (None, Some(x)) => x,
            (None, None) => unreachable!("validated on construction"),
        };
        write_cell(&mut mats.groups[row.group - 1], table.cell(row), v);
    }
    Ok(mats)
}

/// Reads the free-parameter vector back out of model matrices.
pub fn extract(table: &ParameterTable, mats: &ModelMatrices) -> Vec<f64> {
    let mut out = vec![f64::NAN; table.n_free()];
    for row in &table.rows {
        if let Some(f) = row.free {
            if out[f - 1].is_nan() {
                out[f - 1] = read_cell(&mats.groups[row.group - 1], table.cell(row));
            }
        }
    }
    out
}

impl fmt::Display for ParameterTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4} {:>10} {:>3} {:<10} {:>5} {:>5} {:>8} {:>6}  prior",
            "id", "lhs", "op", "rhs", "group", "free", "fixed", "label"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>4} {:>10} {:>3} {:<10} {:>5} {:>5} {:>8} {:>6}  {}",
                r.id,
                r.lhs,
                r.op,
                r.rhs,
                r.group,
                r.free.map(|v| v.to_string()).unwrap_or_default(),
                r.fixed.map(|v| format!("{v}")).unwrap_or_default(),
                r.label.clone().unwrap_or_default(),
                r.prior.clone().unwrap_or_default()
            )?;
        }
        Ok(())
    }
}
