//! Run configuration, CSV loading and design selection shared by the
//! `estimate` and `diagnose` subcommands.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use factorial_weights::design::DEFAULT_RANK_TOL;
use factorial_weights::{
    build_incomplete_design, BasisFunction, BasisSpec, Dataset, Design, ModelFlavor, SolverOptions,
    TreatmentCombination,
};
use serde::{Deserialize, Serialize};

/// Input problems that map to the data-error exit code.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FactorCoding {
    /// Levels are -1 and +1.
    #[default]
    Pm1,
    /// Levels are 0 and 1, mapped to -1 and +1.
    ZeroOne,
}

impl FactorCoding {
    fn decode(self, raw: f64) -> Option<i8> {
        let low = match self {
            FactorCoding::Pm1 => -1.0,
            FactorCoding::ZeroOne => 0.0,
        };
        if raw == 1.0 {
            Some(1)
        } else if raw == low {
            Some(-1)
        } else {
            None
        }
    }

    fn expected(self) -> &'static str {
        match self {
            FactorCoding::Pm1 => "-1 or 1",
            FactorCoding::ZeroOne => "0 or 1",
        }
    }
}

/// How unobserved treatment combinations are determined.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Unobserved {
    Mode(UnobservedMode),
    /// Explicit combinations, each written in the configured factor coding.
    List(Vec<Vec<f64>>),
    #[default]
    #[serde(skip)]
    Unset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnobservedMode {
    /// Every empty cell is unobserved.
    Auto,
    /// Full design; empty cells are not treated specially.
    None,
}

impl FromStr for Unobserved {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "auto" => Ok(Unobserved::Mode(UnobservedMode::Auto)),
            "none" => Ok(Unobserved::Mode(UnobservedMode::None)),
            list => list
                .split(';')
                .map(|combo| {
                    combo
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
                        .collect()
                })
                .collect::<std::result::Result<_, _>>()
                .map(Unobserved::List),
        }
    }
}

/// Everything needed to load a data set and fit balancing weights. Fields
/// may come from a JSON file and are overridden by command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub factor_columns: Vec<String>,
    /// Defaults to every column that is neither a factor nor the outcome.
    pub covariate_columns: Vec<String>,
    pub outcome_column: Option<String>,
    pub factor_coding: FactorCoding,
    pub max_order: Option<usize>,
    pub model_flavor: Option<ModelFlavor>,
    /// Extra basis terms as products of covariate names, e.g. `age*age`.
    pub extra_terms: Vec<String>,
    pub unobserved_combinations: Unobserved,
    pub solver: SolverOptions,
    pub output_path: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
    pub weights_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| input_error(format!("config {}: {e}", path.display())))
    }

    pub fn max_order(&self) -> usize {
        self.max_order
            .unwrap_or(2)
            .min(self.factor_columns.len().max(1))
    }

    pub fn flavor(&self) -> ModelFlavor {
        self.model_flavor.unwrap_or(ModelFlavor::Heterogeneous)
    }

    pub fn unobserved(&self) -> Unobserved {
        match &self.unobserved_combinations {
            Unobserved::Unset => Unobserved::Mode(UnobservedMode::Auto),
            u => u.clone(),
        }
    }
}

/// A loaded data set with the column names it was built from.
#[derive(Debug)]
pub struct Table {
    pub data: Dataset,
    pub factor_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl Table {
    /// Effect label with factor names joined by `:`.
    pub fn effect_label(&self, effect: &factorial_weights::EffectIndex) -> String {
        effect
            .members()
            .iter()
            .map(|&k| self.factor_names[k - 1].as_str())
            .collect::<Vec<_>>()
            .join(":")
    }
}

/// Reads the CSV named in `config`. The outcome column is optional so that
/// diagnostics can run on covariates alone.
pub fn load_table(config: &RunConfig, need_outcome: bool) -> Result<Table> {
    let path = config
        .data_path
        .as_ref()
        .ok_or_else(|| input_error("no data file given (use --data or data_path)"))?;
    if config.factor_columns.is_empty() {
        return Err(input_error("no factor columns given (use --factors)"));
    }
    if need_outcome && config.outcome_column.is_none() {
        return Err(input_error("no outcome column given (use --outcome)"));
    }
    if config.max_order == Some(0) {
        return Err(input_error("max order must be at least 1"));
    }
    let file = File::open(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| input_error(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input_error(format!("column {name:?} not found in the header")))
    };
    let factor_idx = config
        .factor_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let outcome_idx = config.outcome_column.as_deref().map(find).transpose()?;
    let covariate_names: Vec<String> = if config.covariate_columns.is_empty() {
        header
            .iter()
            .filter(|h| {
                !config.factor_columns.contains(h) && config.outcome_column.as_ref() != Some(*h)
            })
            .cloned()
            .collect()
    } else {
        config.covariate_columns.clone()
    };
    let covariate_idx = covariate_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    for &i in factor_idx
        .iter()
        .chain(&covariate_idx)
        .chain(outcome_idx.iter())
    {
        if !seen.insert(i) {
            return Err(input_error(format!(
                "column {:?} is used more than once",
                header[i]
            )));
        }
    }

    let k = factor_idx.len();
    let d = covariate_idx.len();
    let (mut z, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| {
                input_error(format!(
                    "line {line}: column {:?}: cannot parse {raw:?} as a number",
                    header[i]
                ))
            })
        };
        for &i in &factor_idx {
            let v = field(i)?;
            let level = config.factor_coding.decode(v).ok_or_else(|| {
                input_error(format!(
                    "line {line}: factor {:?} has value {v}, expected {}",
                    header[i],
                    config.factor_coding.expected()
                ))
            })?;
            z.push(level);
        }
        for &i in &covariate_idx {
            let v = field(i)?;
            if !v.is_finite() {
                return Err(input_error(format!(
                    "line {line}: column {:?} is not finite",
                    header[i]
                )));
            }
            x.push(v);
        }
        y.push(match outcome_idx {
            Some(i) => field(i)?,
            None => 0.0,
        });
    }
    if y.is_empty() {
        return Err(input_error(format!("{}: no data rows", path.display())));
    }
    let data = Dataset::new(k, d, z, x, y).map_err(|e| input_error(e.to_string()))?;
    Ok(Table {
        data,
        factor_names: config.factor_columns.clone(),
        covariate_names,
    })
}

/// Constant plus one identity basis per covariate, plus any declared products.
/// Constant covariates duplicate the intercept and are left out.
pub fn basis_spec(config: &RunConfig, table: &Table) -> Result<BasisSpec> {
    let mut bases = vec![BasisFunction::Constant];
    for (j, name) in table.covariate_names.iter().enumerate() {
        let col = table.data.covariate(j);
        if col.iter().all(|&v| v == col[0]) {
            eprintln!("covariate {name} is constant; it adds nothing beyond the intercept");
        } else {
            bases.push(BasisFunction::Coordinate(j));
        }
    }
    for term in &config.extra_terms {
        let idx = term
            .split('*')
            .map(|name| {
                let name = name.trim();
                table
                    .covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| {
                        input_error(format!("term {term:?}: {name:?} is not a covariate"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        bases.push(BasisFunction::Monomial(idx));
    }
    Ok(BasisSpec::new(bases, config.flavor(), config.max_order())?)
}

/// Full design, or an incomplete one built from empty cells or an explicit list.
pub fn select_design(config: &RunConfig, table: &Table) -> Result<Design> {
    let k = table.data.factors();
    let counts = table.data.cell_counts();
    let unobserved: Vec<TreatmentCombination> = match config.unobserved() {
        Unobserved::Mode(UnobservedMode::None) | Unobserved::Unset => return Ok(Design::full(k)?),
        Unobserved::Mode(UnobservedMode::Auto) => (0..counts.len())
            .filter(|&c| counts[c] == 0)
            .map(|c| TreatmentCombination::from_index(c, k))
            .collect(),
        Unobserved::List(list) => {
            let mut out = Vec::new();
            for raw in &list {
                if raw.len() != k {
                    return Err(input_error(format!(
                        "unobserved combination {raw:?} has {} levels, expected {k}",
                        raw.len()
                    )));
                }
                let levels = raw
                    .iter()
                    .map(|&v| {
                        config.factor_coding.decode(v).ok_or_else(|| {
                            input_error(format!(
                                "unobserved combination {raw:?}: levels must be {}",
                                config.factor_coding.expected()
                            ))
                        })
                    })
                    .collect::<Result<Vec<i8>>>()?;
                let combo = TreatmentCombination::new(levels)?;
                if counts[combo.index()] > 0 {
                    let row = (0..table.data.n()).find(|&i| table.data.cell(i) == combo.index());
                    return Err(input_error(format!(
                        "combination {combo} is declared unobserved but data row {} falls in it",
                        row.unwrap_or(0) + 1
                    )));
                }
                out.push(combo);
            }
            out
        }
    };
    if unobserved.is_empty() {
        return Ok(Design::full(k)?);
    }
    Ok(Design::Incomplete(build_incomplete_design(
        k,
        config.max_order(),
        &unobserved,
        DEFAULT_RANK_TOL,
    )?))
}
