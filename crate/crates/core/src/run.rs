//! End-to-end fits and the on-disk run directory.
//!
//! A run directory holds everything needed to recompute the reported
//! numbers: the model as given, the data actually used, the parameter
//! table, per-chain draws and the configuration with its seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, Dataset};
use crate::diagnostics::{render_summary, summarize, SummaryOptions, SummaryRow};
use crate::error::{Error, Result};
use crate::expansion::Parameterization;
use crate::fit::{fit_measures, FitMeasures, FitOptions};
use crate::model::{build_table, GroupEqual, GroupInfo, ParameterTable};
use crate::priors::default_priors;
use crate::sampler::{compile, run, ConvergenceReport, DrawStore, Plan, SamplerConfig};
use crate::syntax::{parse_model, FormulaSpec, Operator};

const MODEL_FILE: &str = "model.lav";
const TABLE_INPUT_FILE: &str = "model_table.csv";
const DATA_FILE: &str = "data.csv";
const TABLE_FILE: &str = "partable.csv";
const CONFIG_FILE: &str = "config.json";
const CONVERGENCE_FILE: &str = "convergence.json";
const SUMMARY_JSON: &str = "summary.json";
const SUMMARY_TEXT: &str = "summary.txt";
const FIT_FILE: &str = "fitmeasures.json";

/// How the model is given: lavaan-style text or a parameter-table CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    Syntax(String),
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub model: ModelSource,
    pub group: Option<String>,
    pub group_equal: Vec<GroupEqual>,
    /// Default-prior overrides as `(class, prior string)`.
    pub dp: Vec<(String, String)>,
    pub cp: Parameterization,
    pub sampler: SamplerConfig,
    pub fit: FitOptions,
}

impl FitConfig {
    pub fn new(model: ModelSource) -> Self {
        FitConfig {
            model,
            group: None,
            group_equal: Vec::new(),
            dp: Vec::new(),
            cp: Parameterization::Srs,
            sampler: SamplerConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

/// Everything produced by one fit.
#[derive(Debug, Clone)]
pub struct FitRun {
    pub config: FitConfig,
    pub data: Dataset,
    pub table: ParameterTable,
    pub plan: Plan,
    pub draws: DrawStore,
    pub report: ConvergenceReport,
    pub inits: Vec<Vec<f64>>,
    pub summary: Vec<SummaryRow>,
    pub measures: FitMeasures,
}

impl FitRun {
    pub fn summary_text(&self) -> String {
        render_summary(&self.summary, &self.table, false)
    }
}

fn observed_in_specs(specs: &[FormulaSpec]) -> Vec<String> {
    let latent: BTreeSet<&str> = specs
        .iter()
        .filter(|s| s.op == Operator::Loading)
        .map(|s| s.lhs.as_str())
        .collect();
    let mut out: Vec<String> = Vec::new();
    let mut push = |v: &str| {
        if v != "1" && !latent.contains(v) && !out.iter().any(|o| o == v) {
            out.push(v.to_string());
        }
    };
    for s in specs {
        push(&s.lhs);
        for t in &s.terms {
            push(&t.name);
        }
    }
    out
}

fn observed_in_rows(rows: &[crate::model::ParameterRow]) -> Vec<String> {
    let latent: BTreeSet<&str> = rows
        .iter()
        .filter(|r| r.op == "=~")
        .map(|r| r.lhs.as_str())
        .collect();
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        for v in [r.lhs.as_str(), r.rhs.as_str()] {
            if !v.is_empty() && !latent.contains(v) && !out.iter().any(|o| o == v) {
                out.push(v.to_string());
            }
        }
    }
    out
}

/// Loads the data and builds the parameter table for a configuration.
pub fn prepare(cfg: &FitConfig, data_path: &Path) -> Result<(Dataset, ParameterTable)> {
    match &cfg.model {
        ModelSource::Syntax(text) => {
            let specs = parse_model(text)?;
            let observed = observed_in_specs(&specs);
            let data = load_csv(data_path, cfg.group.as_deref(), Some(&observed))?;
            let ge: BTreeSet<GroupEqual> = cfg.group_equal.iter().copied().collect();
            let table = build_table(&specs, &data.names, &data.group_info(), &ge)?;
            Ok((data, table))
        }
        ModelSource::Table(csv_text) => {
            let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
            let rows: Vec<crate::model::ParameterRow> =
                rdr.deserialize().collect::<std::result::Result<_, _>>()?;
            let observed = observed_in_rows(&rows);
            let data = load_csv(data_path, cfg.group.as_deref(), Some(&observed))?;
            if !cfg.group_equal.is_empty() {
                return Err(Error::Config(
                    "group-equal applies to model syntax; encode equalities in the table".into(),
                ));
            }
            let table = ParameterTable::from_rows(rows, data.group_info())?;
            Ok((data, table))
        }
    }
}

/// Prior string in effect for each free parameter.
pub fn free_priors(plan: &Plan) -> Vec<String> {
    (0..plan.n_free).map(|t| plan.prior_label(t)).collect()
}

/// Parses, samples, and computes the summary and fit measures.
pub fn fit(cfg: &FitConfig, data_path: &Path) -> Result<FitRun> {
    let (data, table) = prepare(cfg, data_path)?;
    let defaults = default_priors(&cfg.dp)?;
    let plan = compile(&table, &defaults, cfg.cp)?;
    let y = data.group_matrices(&table.manifest)?;
    let out = run(&table, &plan, &y, &cfg.sampler)?;
    let summary = summarize(
        &out.draws,
        &table,
        &free_priors(&plan),
        &SummaryOptions::default(),
    )?;
    let measures = fit_measures(&table, &plan, &out.draws, &y, &cfg.fit)?;
    Ok(FitRun {
        config: cfg.clone(),
        data,
        table,
        plan,
        draws: out.draws,
        report: out.report,
        inits: out.inits,
        summary,
        measures,
    })
}

pub fn chain_file(c: usize) -> String {
    format!("draws_chain{}.csv", c + 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvergenceRecord {
    report: ConvergenceReport,
    inits: Vec<Vec<f64>>,
    dropped_rows: usize,
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = data.names.clone();
    if let Some(g) = &data.group_column {
        header.push(g.clone());
    }
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..data.names.len())
            .map(|j| format!("{}", data.values[(i, j)]))
            .collect();
        if data.group_column.is_some() {
            rec.push(data.levels[data.group[i]].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a run directory, creating it if needed.
pub fn write_run(dir: &Path, r: &FitRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    match &r.config.model {
        ModelSource::Syntax(text) => fs::write(dir.join(MODEL_FILE), text)?,
        ModelSource::Table(text) => fs::write(dir.join(TABLE_INPUT_FILE), text)?,
    }
    write_dataset(&dir.join(DATA_FILE), &r.data)?;
    r.table.write_csv(fs::File::create(dir.join(TABLE_FILE))?)?;
    write_json(dir.join(CONFIG_FILE), &r.config)?;
    for c in 0..r.draws.n_chains() {
        r.draws
            .write_chain_csv(c, fs::File::create(dir.join(chain_file(c)))?)?;
    }
    write_json(
        dir.join(CONVERGENCE_FILE),
        &ConvergenceRecord {
            report: r.report.clone(),
            inits: r.inits.clone(),
            dropped_rows: r.data.dropped,
        },
    )?;
    write_json(dir.join(SUMMARY_JSON), &r.summary)?;
    fs::write(dir.join(SUMMARY_TEXT), r.summary_text())?;
    write_json(dir.join(FIT_FILE), &r.measures)?;
    Ok(())
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: FitConfig,
    pub data: Dataset,
    pub table: ParameterTable,
    pub plan: Plan,
    pub draws: DrawStore,
    pub report: ConvergenceReport,
    pub inits: Vec<Vec<f64>>,
}

impl StoredRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let config: FitConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let data_path = dir.join(DATA_FILE);
        let (data, _) = prepare(&config, &data_path)?;
        let table =
            ParameterTable::read_csv(fs::File::open(dir.join(TABLE_FILE))?, data.group_info())?;
        let defaults = default_priors(&config.dp)?;
        let plan = compile(&table, &defaults, config.cp)?;

        let mut chains = Vec::new();
        let mut names = plan.names.clone();
        let mut n_iter = 0;
        for c in 0..config.sampler.n_chains {
            let (nm, values, n) =
                DrawStore::read_chain_csv(fs::File::open(dir.join(chain_file(c)))?)?;
            if c == 0 {
                names = nm;
                n_iter = n;
            } else if n != n_iter {
                return Err(Error::Data(format!(
                    "chain {} has {n} draws, chain 1 has {n_iter}",
                    c + 1
                )));
            }
            chains.push(values);
        }
        let record: ConvergenceRecord =
            serde_json::from_str(&fs::read_to_string(dir.join(CONVERGENCE_FILE))?)?;
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            config,
            data,
            table,
            plan,
            draws: DrawStore {
                names,
                chains,
                n_iter,
            },
            report: record.report,
            inits: record.inits,
        })
    }

    pub fn summary(&self, opts: &SummaryOptions) -> Result<Vec<SummaryRow>> {
        summarize(&self.draws, &self.table, &free_priors(&self.plan), opts)
    }

    /// Recomputes every fit measure from the stored draws and data.
    pub fn fit_measures(&self) -> Result<FitMeasures> {
        let y = self.data.group_matrices(&self.table.manifest)?;
        fit_measures(&self.table, &self.plan, &self.draws, &y, &self.config.fit)
    }

    pub fn stored_fit_measures(&self) -> Result<FitMeasures> {
        Ok(serde_json::from_str(&fs::read_to_string(
            self.dir.join(FIT_FILE),
        )?)?)
    }

    pub fn group_info(&self) -> GroupInfo {
        self.data.group_info()
    }
}
