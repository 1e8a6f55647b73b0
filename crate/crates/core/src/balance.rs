//! Basis functions, per-unit constraint columns and the refined balance system.
//!
//! A constraint row pairs an effect part (summary, positive or negative) with a
//! balance term `q_{sJ}(x, z) = h_s(x)·r_J(z)`. Row `r` evaluated at unit `i` is
//! `B_{ri} = f_r(Z_i)·h_s(X_i)` where the *profile* `f_r(z)` is `r_J(z)` times
//! the unit's membership in the effect part. The matching per-unit target is
//! `b_{ri} = c_r·h_s(X_i)` with `c_r = 2^{-(K-1)} Σ_z f_r(z)` over the
//! combinations the design allows, so `Σ_i b_i` is the stacked target vector.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{effect_index_set, ContrastVector, Design, EffectIndex, TreatmentCombination};
use crate::error::{Error, Result};

/// Relative residual below which a row profile counts as dependent on earlier rows.
pub const RANK_FILTER_TOL: f64 = 1e-10;

pub type CustomBasis = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A scalar function `h_s` of the covariate row.
#[derive(Clone)]
pub enum BasisFunction {
    Constant,
    /// The covariate at a 0-based column.
    Coordinate(usize),
    /// Product of the listed 0-based columns (repeats give powers).
    Monomial(Vec<usize>),
    Custom {
        name: String,
        f: CustomBasis,
    },
}

impl BasisFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BasisFunction::Constant => 1.0,
            BasisFunction::Coordinate(j) => x[*j],
            BasisFunction::Monomial(cols) => cols.iter().map(|&j| x[j]).product(),
            BasisFunction::Custom { f, .. } => f(x),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, BasisFunction::Constant)
    }

    fn max_column(&self) -> Option<usize> {
        match self {
            BasisFunction::Coordinate(j) => Some(*j),
            BasisFunction::Monomial(cols) => cols.iter().copied().max(),
            _ => None,
        }
    }

    /// Human-readable name using the given covariate names where available.
    pub fn label(&self, names: &[String]) -> String {
        let col = |j: usize| {
            names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{}", j + 1))
        };
        match self {
            BasisFunction::Constant => "1".into(),
            BasisFunction::Coordinate(j) => col(*j),
            BasisFunction::Monomial(cols) => {
                cols.iter().map(|&j| col(j)).collect::<Vec<_>>().join("*")
            }
            BasisFunction::Custom { name, .. } => name.clone(),
        }
    }
}

impl fmt::Debug for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisFunction::Constant => write!(f, "Constant"),
            BasisFunction::Coordinate(j) => write!(f, "Coordinate({j})"),
            BasisFunction::Monomial(c) => write!(f, "Monomial({c:?})"),
            BasisFunction::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFlavor {
    /// Outcome mean separable into covariate terms plus treatment terms.
    Additive,
    /// Covariate terms may interact with treatment terms.
    Heterogeneous,
}

/// One balanced function `h_s(x)·r_J(z)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BalanceTerm {
    pub basis: usize,
    pub interaction: EffectIndex,
}

#[derive(Clone, Debug)]
pub struct BasisSpec {
    bases: Vec<BasisFunction>,
    flavor: ModelFlavor,
    max_order: usize,
}

impl BasisSpec {
    pub fn new(bases: Vec<BasisFunction>, flavor: ModelFlavor, max_order: usize) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::Config(
                "at least one basis function is required".into(),
            ));
        }
        if max_order == 0 {
            return Err(Error::Config(
                "maximum interaction order must be at least 1".into(),
            ));
        }
        Ok(BasisSpec {
            bases,
            flavor,
            max_order,
        })
    }

    /// Intercept followed by the identity on each of `d` covariates.
    pub fn identity(d: usize, flavor: ModelFlavor, max_order: usize) -> Result<Self> {
        let mut bases = vec![BasisFunction::Constant];
        bases.extend((0..d).map(BasisFunction::Coordinate));
        BasisSpec::new(bases, flavor, max_order)
    }

    pub fn flavor(&self) -> ModelFlavor {
        self.flavor
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn bases(&self) -> &[BasisFunction] {
        &self.bases
    }

    /// Bases actually used by the balance terms. The additive flavor needs a
    /// constant to carry the treatment terms and appends one if missing.
    pub fn resolved_bases(&self) -> Vec<BasisFunction> {
        let mut bases = self.bases.clone();
        if self.flavor == ModelFlavor::Additive && !bases.iter().any(BasisFunction::is_constant) {
            bases.push(BasisFunction::Constant);
        }
        bases
    }

    /// The balanced functions for `k` factors, indexing into [`Self::resolved_bases`].
    pub fn terms(&self, k: usize) -> Result<Vec<BalanceTerm>> {
        let effects = effect_index_set(k, self.max_order)?;
        let terms = match self.flavor {
            ModelFlavor::Heterogeneous => (0..self.bases.len())
                .flat_map(|s| {
                    effects.iter().map(move |j| BalanceTerm {
                        basis: s,
                        interaction: j.clone(),
                    })
                })
                .collect(),
            ModelFlavor::Additive => {
                let bases = self.resolved_bases();
                let constant = bases.iter().position(BasisFunction::is_constant).unwrap();
                let mut terms: Vec<BalanceTerm> = (0..bases.len())
                    .map(|s| BalanceTerm {
                        basis: s,
                        interaction: EffectIndex::summary(),
                    })
                    .collect();
                terms.extend(effects.into_iter().map(|j| BalanceTerm {
                    basis: constant,
                    interaction: j,
                }));
                terms
            }
        };
        Ok(terms)
    }

    fn check_columns(&self, d: usize) -> Result<()> {
        for b in &self.bases {
            if let Some(j) = b.max_column() {
                if j >= d {
                    return Err(Error::Config(format!(
                        "basis {b:?} uses covariate column {j} but the data has {d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which part of an effect contrast a row balances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Summary,
    Positive,
    Negative,
}

/// Identity of a constraint row: `(effect, part, basis, interaction)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub effect: EffectIndex,
    pub part: Part,
    pub basis: usize,
    pub interaction: EffectIndex,
}

/// Nonnegative parts `(g⁺, g⁻)` of a coefficient vector.
pub fn split_coefficients(g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    g.iter().map(|&v| (v.max(0.0), (-v).max(0.0))).unzip()
}

pub fn split_contrast(g: &ContrastVector) -> (Vec<f64>, Vec<f64>) {
    split_coefficients(&g.as_f64())
}

/// `(A⁺, A⁻)` for the combination with enumeration `index`; the caller has
/// checked that the combination is observable under `design`.
pub(crate) fn membership_at(
    design: &Design,
    effect: &EffectIndex,
    index: usize,
) -> Result<(f64, f64)> {
    if effect.is_summary() {
        return Ok((1.0, 0.0));
    }
    let g = design.contrast_entry(effect, index)?;
    Ok((g.max(0.0), (-g).max(0.0)))
}

/// How much a unit at combination `z` contributes to the positive and
/// negative parts of `effect`.
pub fn membership_indicator(
    effect: &EffectIndex,
    z: &TreatmentCombination,
    design: &Design,
) -> Result<(f64, f64)> {
    if z.factors() != design.factors() {
        return Err(Error::Domain(format!(
            "combination {z} does not have {} factors",
            design.factors()
        )));
    }
    if !design.is_observed(z.index()) {
        return Err(Error::Domain(format!(
            "combination {z} is unobserved under the design"
        )));
    }
    membership_at(design, effect, z.index())
}

fn row_profile(design: &Design, key: &RowKey) -> Result<Vec<f64>> {
    let k = design.factors();
    (0..1usize << k)
        .map(|z| {
            if !design.is_observed(z) {
                return Ok(0.0);
            }
            let r = f64::from(crate::design::sign_at_index(
                key.interaction.members(),
                z,
                k,
            ));
            let a = match key.part {
                Part::Summary => 1.0,
                Part::Positive => membership_at(design, &key.effect, z)?.0,
                Part::Negative => membership_at(design, &key.effect, z)?.1,
            };
            Ok(a * r)
        })
        .collect()
}

fn target_coefficient(profile: &[f64], k: usize) -> f64 {
    profile.iter().sum::<f64>() / (1u64 << (k - 1)) as f64
}

#[derive(Clone, Debug)]
struct PlannedRow {
    key: RowKey,
    profile: Vec<f64>,
    target_coef: f64,
}

/// The data-independent part of a balance system: which rows exist and the
/// treatment profile of each. Build once per (design, basis) and assemble
/// against many datasets.
#[derive(Clone, Debug)]
pub struct RowPlan {
    bases: Vec<BasisFunction>,
    terms: Vec<BalanceTerm>,
    rows: Vec<PlannedRow>,
    design: Design,
    effects: Vec<EffectIndex>,
    flavor: ModelFlavor,
    reduced: bool,
    dropped: usize,
}

impl RowPlan {
    /// Lays out the refined rows. On a full design these are the summary rows
    /// and the positive-part rows (with `J` canonicalized to `J∖K` when
    /// `K ⊆ J`); negative-part rows follow from the two. On an incomplete
    /// design the effective contrasts are not ±1, so positive and negative
    /// rows are both kept and no canonicalization applies.
    ///
    /// With `reduce`, rows whose profile over the allowed combinations is a
    /// linear combination of earlier rows on the same basis are dropped. This
    /// leaves the feasible set unchanged for every dataset.
    pub fn new(spec: &BasisSpec, design: &Design, reduce: bool) -> Result<Self> {
        let k = design.factors();
        if let Design::Incomplete(inc) = design {
            if inc.max_order != spec.max_order {
                return Err(Error::Config(format!(
                    "basis order {} does not match the incomplete design's order {}",
                    spec.max_order, inc.max_order
                )));
            }
        }
        let bases = spec.resolved_bases();
        let terms = spec.terms(k)?;
        let effects = effect_index_set(k, spec.max_order)?;

        let mut keys = Vec::new();
        match design {
            Design::Full { .. } => {
                for t in &terms {
                    keys.push(RowKey {
                        effect: EffectIndex::summary(),
                        part: Part::Summary,
                        basis: t.basis,
                        interaction: t.interaction.clone(),
                    });
                }
                for e in &effects {
                    for t in &terms {
                        let interaction = if e.is_subset_of(&t.interaction) {
                            t.interaction.without(e)
                        } else {
                            t.interaction.clone()
                        };
                        keys.push(RowKey {
                            effect: e.clone(),
                            part: Part::Positive,
                            basis: t.basis,
                            interaction,
                        });
                    }
                }
            }
            Design::Incomplete(_) => {
                for e in &effects {
                    for part in [Part::Positive, Part::Negative] {
                        for t in &terms {
                            keys.push(RowKey {
                                effect: e.clone(),
                                part,
                                basis: t.basis,
                                interaction: t.interaction.clone(),
                            });
                        }
                    }
                }
            }
        }

        let mut seen = HashSet::new();
        keys.retain(|key| seen.insert(key.clone()));

        let mut rows = Vec::with_capacity(keys.len());
        for key in keys {
            let profile = row_profile(design, &key)?;
            let target_coef = target_coefficient(&profile, k);
            rows.push(PlannedRow {
                key,
                profile,
                target_coef,
            });
        }

        let before = rows.len();
        if reduce {
            rows = reduce_rows(rows, &design.observed(), bases.len());
        }
        let dropped = before - rows.len();

        Ok(RowPlan {
            bases,
            terms,
            rows,
            design: design.clone(),
            effects,
            flavor: spec.flavor,
            reduced: reduce,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &RowKey> {
        self.rows.iter().map(|r| &r.key)
    }

    pub fn bases(&self) -> &[BasisFunction] {
        &self.bases
    }

    pub fn terms(&self) -> &[BalanceTerm] {
        &self.terms
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Effects the system is built to estimate, `[K]_{K'}`.
    pub fn effects(&self) -> &[EffectIndex] {
        &self.effects
    }

    pub fn flavor(&self) -> ModelFlavor {
        self.flavor
    }

    pub fn is_reduced(&self) -> bool {
        self.reduced
    }

    /// Rows removed by the rank filter.
    pub fn dropped_rows(&self) -> usize {
        self.dropped
    }

    /// Evaluates every row on `data`.
    pub fn assemble(self: &Arc<Self>, data: &Dataset) -> Result<BalanceSystem> {
        let k = self.design.factors();
        if data.factors() != k {
            return Err(Error::Data {
                row: None,
                message: format!("data has {} factors, design has {k}", data.factors()),
            });
        }
        for b in &self.bases {
            if let Some(j) = b.max_column() {
                if j >= data.covariates() {
                    return Err(Error::Config(format!(
                        "basis {b:?} uses covariate column {j} but the data has {}",
                        data.covariates()
                    )));
                }
            }
        }
        let n = data.n();
        let s_count = self.bases.len();
        let mut h = vec![0.0; n * s_count];
        for i in 0..n {
            if !self.design.is_observed(data.cell(i)) {
                return Err(Error::Domain(format!(
                    "unit {i} has combination {}, which the design treats as unobserved",
                    TreatmentCombination::from_index(data.cell(i), k)
                )));
            }
            let x = data.x_row(i);
            for (s, basis) in self.bases.iter().enumerate() {
                let v = basis.eval(x);
                if !v.is_finite() {
                    return Err(Error::data(i, format!("basis {basis:?} is not finite")));
                }
                h[i * s_count + s] = v;
            }
        }

        let p = self.rows.len();
        let mut lhs = DMatrix::zeros(p, n);
        let mut unit_targets = DMatrix::zeros(p, n);
        for i in 0..n {
            let cell = data.cell(i);
            for (r, row) in self.rows.iter().enumerate() {
                let hv = h[i * s_count + row.key.basis];
                lhs[(r, i)] = row.profile[cell] * hv;
                unit_targets[(r, i)] = row.target_coef * hv;
            }
        }
        let target = unit_targets.column_sum();
        Ok(BalanceSystem {
            plan: Arc::clone(self),
            lhs,
            unit_targets,
            target,
        })
    }
}

/// Drops rows whose profile (restricted to `allowed`) lies in the span of the
/// earlier kept profiles on the same basis. Modified Gram–Schmidt with one
/// reorthogonalization pass.
fn reduce_rows(rows: Vec<PlannedRow>, allowed: &[usize], n_bases: usize) -> Vec<PlannedRow> {
    let mut kept_dirs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_bases];
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut v: Vec<f64> = allowed.iter().map(|&z| row.profile[z]).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let dirs = &mut kept_dirs[row.key.basis];
        for _ in 0..2 {
            for q in dirs.iter() {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > RANK_FILTER_TOL * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
            out.push(row);
        }
    }
    out
}

/// The assembled system `B w = b`, with `B` stored P×N (column `i` is `B_i`).
#[derive(Clone, Debug)]
pub struct BalanceSystem {
    plan: Arc<RowPlan>,
    lhs: DMatrix<f64>,
    unit_targets: DMatrix<f64>,
    target: DVector<f64>,
}

impl BalanceSystem {
    pub fn plan(&self) -> &Arc<RowPlan> {
        &self.plan
    }

    pub fn design(&self) -> &Design {
        &self.plan.design
    }

    pub fn n(&self) -> usize {
        self.lhs.ncols()
    }

    pub fn p(&self) -> usize {
        self.lhs.nrows()
    }

    pub fn keys(&self) -> Vec<&RowKey> {
        self.plan.keys().collect()
    }

    /// `B`, P×N.
    pub fn lhs(&self) -> &DMatrix<f64> {
        &self.lhs
    }

    /// Per-unit targets `b_i` as columns of a P×N matrix.
    pub fn unit_targets(&self) -> &DMatrix<f64> {
        &self.unit_targets
    }

    /// `b = Σ_i b_i`.
    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Builds a system directly from matrices; rows get placeholder keys.
    /// Intended for solver tests on synthetic instances.
    pub fn from_parts(lhs: DMatrix<f64>, unit_targets: DMatrix<f64>) -> Result<Self> {
        if lhs.shape() != unit_targets.shape() {
            return Err(Error::Domain(
                "B and per-unit targets differ in shape".into(),
            ));
        }
        if lhs
            .iter()
            .chain(unit_targets.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Domain("non-finite entry in the system".into()));
        }
        let p = lhs.nrows();
        let rows = (0..p)
            .map(|r| PlannedRow {
                key: RowKey {
                    effect: EffectIndex::summary(),
                    part: Part::Summary,
                    basis: r,
                    interaction: EffectIndex::summary(),
                },
                profile: Vec::new(),
                target_coef: 0.0,
            })
            .collect();
        let plan = RowPlan {
            bases: Vec::new(),
            terms: Vec::new(),
            rows,
            design: Design::Full { factors: 2 },
            effects: Vec::new(),
            flavor: ModelFlavor::Heterogeneous,
            reduced: false,
            dropped: 0,
        };
        let target = unit_targets.column_sum();
        Ok(BalanceSystem {
            plan: Arc::new(plan),
            lhs,
            unit_targets,
            target,
        })
    }

    /// Same system with row `r` of `B` and of every `b_i` multiplied by `scale[r]`.
    pub fn rescaled(&self, scale: &[f64]) -> Self {
        let mut out = self.clone();
        for (r, &c) in scale.iter().enumerate() {
            out.lhs.row_mut(r).scale_mut(c);
            out.unit_targets.row_mut(r).scale_mut(c);
            out.target[r] *= c;
        }
        out
    }
}

/// Builds the refined system on `data` keeping every row.
pub fn build_balance_system(
    data: &Dataset,
    spec: &BasisSpec,
    design: &Design,
) -> Result<BalanceSystem> {
    spec.check_columns(data.covariates())?;
    Arc::new(RowPlan::new(spec, design, false)?).assemble(data)
}

/// Builds the refined system with linearly dependent rows removed.
pub fn build_reduced_balance_system(
    data: &Dataset,
    spec: &BasisSpec,
    design: &Design,
) -> Result<BalanceSystem> {
    spec.check_columns(data.covariates())?;
    Arc::new(RowPlan::new(spec, design, true)?).assemble(data)
}

/// Evaluates one row (no canonicalization) on `data`: its coefficients over
/// units and its target.
pub fn evaluate_row(
    data: &Dataset,
    bases: &[BasisFunction],
    design: &Design,
    key: &RowKey,
) -> Result<(Vec<f64>, f64)> {
    let profile = row_profile(design, key)?;
    let coef = target_coefficient(&profile, design.factors());
    let basis = bases
        .get(key.basis)
        .ok_or_else(|| Error::Domain(format!("no basis with index {}", key.basis)))?;
    let mut lhs = Vec::with_capacity(data.n());
    let mut target = 0.0;
    for i in 0..data.n() {
        let h = basis.eval(data.x_row(i));
        lhs.push(profile[data.cell(i)] * h);
        target += coef * h;
    }
    Ok((lhs, target))
}

#[derive(Clone, Debug)]
pub struct ResidualReport {
    /// `B w − b`, one entry per row.
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// Largest absolute residual among the rows of each effect (summary rows under `∅`).
    pub by_effect: Vec<(EffectIndex, f64)>,
}

pub fn balance_residuals(weights: &[f64], system: &BalanceSystem) -> Result<ResidualReport> {
    if weights.len() != system.n() {
        return Err(Error::Domain(format!(
            "{} weights for {} units",
            weights.len(),
            system.n()
        )));
    }
    let w = DVector::from_column_slice(weights);
    let r = system.lhs() * w - system.target();
    let residuals: Vec<f64> = r.iter().copied().collect();
    let max_abs = residuals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut by_effect: Vec<(EffectIndex, f64)> = Vec::new();
    for (key, v) in system.plan.keys().zip(&residuals) {
        match by_effect.iter_mut().find(|(e, _)| *e == key.effect) {
            Some((_, m)) => *m = m.max(v.abs()),
            None => by_effect.push((key.effect.clone(), v.abs())),
        }
    }
    Ok(ResidualReport {
        residuals,
        max_abs,
        by_effect,
    })
}
