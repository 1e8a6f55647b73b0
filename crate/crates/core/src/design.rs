//! Treatment combinations, factorial contrasts and (incomplete) design matrices.
//!
//! Combinations are enumerated lexicographically with −1 before +1 and the
//! last factor varying fastest, so the combination with levels `z` sits at
//! index `Σ_k [z_k = +1]·2^(K−1−k)`. Every other module uses this ordering.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Svd;

pub const MAX_FACTORS: usize = 20;

/// Relative singular-value cutoff shared by the pseudoinverse and the
/// full-row-rank check on `G_uu`.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

pub(crate) fn check_factor_count(k: usize) -> Result<()> {
    if (2..=MAX_FACTORS).contains(&k) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "number of factors must be between 2 and {MAX_FACTORS}, got {k}"
        )))
    }
}

/// One assignment of all K binary factors, coded ±1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct TreatmentCombination(Vec<i8>);

impl TreatmentCombination {
    pub fn new(levels: Vec<i8>) -> Result<Self> {
        check_factor_count(levels.len())?;
        if let Some(bad) = levels.iter().find(|&&v| v != -1 && v != 1) {
            return Err(Error::Domain(format!("factor level {bad} is not -1 or +1")));
        }
        Ok(TreatmentCombination(levels))
    }

    pub fn from_index(index: usize, k: usize) -> Self {
        let levels = (0..k)
            .map(|j| if index >> (k - 1 - j) & 1 == 1 { 1 } else { -1 })
            .collect();
        TreatmentCombination(levels)
    }

    pub fn levels(&self) -> &[i8] {
        &self.0
    }

    pub fn factors(&self) -> usize {
        self.0.len()
    }

    /// Position in the enumeration order.
    pub fn index(&self) -> usize {
        combination_index(&self.0)
    }
}

impl TryFrom<Vec<i8>> for TreatmentCombination {
    type Error = Error;
    fn try_from(levels: Vec<i8>) -> Result<Self> {
        TreatmentCombination::new(levels)
    }
}

impl From<TreatmentCombination> for Vec<i8> {
    fn from(z: TreatmentCombination) -> Self {
        z.0
    }
}

impl fmt::Display for TreatmentCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .0
            .iter()
            .map(|&v| if v > 0 { "+1" } else { "-1" })
            .collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Enumeration index of a ±1 level vector.
pub fn combination_index(levels: &[i8]) -> usize {
    levels
        .iter()
        .fold(0usize, |acc, &v| (acc << 1) | usize::from(v > 0))
}

/// Product of `levels[j-1]` over the members `j` of an effect.
pub(crate) fn sign_product(members: &[usize], levels: &[i8]) -> i8 {
    members.iter().fold(1i8, |acc, &m| acc * levels[m - 1])
}

/// Sign of `∏_{j∈members} z_j` for the combination at `index` among `k` factors.
pub(crate) fn sign_at_index(members: &[usize], index: usize, k: usize) -> i8 {
    let negatives = members
        .iter()
        .filter(|&&m| index >> (k - m) & 1 == 0)
        .count();
    if negatives % 2 == 0 {
        1
    } else {
        -1
    }
}

pub fn enumerate_combinations(k: usize) -> Result<Vec<TreatmentCombination>> {
    check_factor_count(k)?;
    Ok((0..1usize << k)
        .map(|i| TreatmentCombination::from_index(i, k))
        .collect())
}

/// A subset of factors (1-based, sorted). The empty set is the summary contrast.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct EffectIndex {
    members: Vec<usize>,
}

impl EffectIndex {
    pub fn new(members: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut members: Vec<usize> = members.into_iter().collect();
        members.sort_unstable();
        if members.first() == Some(&0) {
            return Err(Error::Domain("factor indices are 1-based".into()));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain(format!(
                "repeated factor in effect {members:?}"
            )));
        }
        Ok(EffectIndex { members })
    }

    pub fn summary() -> Self {
        EffectIndex::default()
    }

    pub fn main(factor: usize) -> Self {
        assert!(factor >= 1, "factor indices are 1-based");
        EffectIndex {
            members: vec![factor],
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn order(&self) -> usize {
        self.members.len()
    }

    pub fn is_summary(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset_of(&self, other: &EffectIndex) -> bool {
        self.members
            .iter()
            .all(|m| other.members.binary_search(m).is_ok())
    }

    /// `self ∖ other`.
    pub fn without(&self, other: &EffectIndex) -> EffectIndex {
        EffectIndex {
            members: self
                .members
                .iter()
                .copied()
                .filter(|m| other.members.binary_search(m).is_err())
                .collect(),
        }
    }

    fn check_factors(&self, k: usize) -> Result<()> {
        match self.members.last() {
            Some(&m) if m > k => Err(Error::Domain(format!(
                "effect {self} refers to factor {m} but only {k} factors exist"
            ))),
            _ => Ok(()),
        }
    }

    /// `∏_{j∈self} z_j`.
    pub fn sign(&self, levels: &[i8]) -> i8 {
        sign_product(&self.members, levels)
    }
}

impl Ord for EffectIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order()
            .cmp(&other.order())
            .then_with(|| self.members.cmp(&other.members))
    }
}

impl PartialOrd for EffectIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl TryFrom<Vec<usize>> for EffectIndex {
    type Error = Error;
    fn try_from(members: Vec<usize>) -> Result<Self> {
        EffectIndex::new(members)
    }
}

impl From<EffectIndex> for Vec<usize> {
    fn from(e: EffectIndex) -> Self {
        e.members
    }
}

impl fmt::Display for EffectIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.members.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.members.iter().map(|m| m.to_string()).collect();
        write!(f, "{}", parts.join(":"))
    }
}

/// ±1 contrast coefficients of one factorial effect over all 2^K combinations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastVector {
    pub effect: EffectIndex,
    pub entries: Vec<i8>,
}

impl ContrastVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn contrast_vector(effect: &EffectIndex, k: usize) -> Result<ContrastVector> {
    check_factor_count(k)?;
    effect.check_factors(k)?;
    let entries = (0..1usize << k)
        .map(|i| sign_at_index(effect.members(), i, k))
        .collect();
    Ok(ContrastVector {
        effect: effect.clone(),
        entries,
    })
}

/// All subsets of `{1..k}` with exactly `order` members, lexicographic.
fn subsets_of_order(k: usize, order: usize) -> Vec<EffectIndex> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (1..=order).collect();
    if order == 0 {
        return vec![EffectIndex::summary()];
    }
    if order > k {
        return out;
    }
    loop {
        out.push(EffectIndex {
            members: current.clone(),
        });
        // advance to the next combination
        let mut pos = order;
        while pos > 0 && current[pos - 1] == k - order + pos {
            pos -= 1;
        }
        if pos == 0 {
            return out;
        }
        current[pos - 1] += 1;
        for j in pos..order {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// Nonempty effects of order at most `max_order`, by order then lexicographically.
pub fn effect_index_set(k: usize, max_order: usize) -> Result<Vec<EffectIndex>> {
    check_factor_count(k)?;
    if max_order == 0 || max_order > k {
        return Err(Error::Domain(format!(
            "maximum interaction order must be in 1..={k}, got {max_order}"
        )));
    }
    Ok((1..=max_order)
        .flat_map(|o| subsets_of_order(k, o))
        .collect())
}

/// All 2^K effects in design-matrix column order (summary first).
pub fn all_effects(k: usize) -> Result<Vec<EffectIndex>> {
    check_factor_count(k)?;
    Ok((0..=k).flat_map(|o| subsets_of_order(k, o)).collect())
}

/// The full 2^K × 2^K matrix `G` of contrast columns.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub factors: usize,
    pub effects: Vec<EffectIndex>,
    /// Rows follow the combination enumeration, columns follow `effects`.
    pub matrix: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(k: usize) -> Result<Self> {
        let effects = all_effects(k)?;
        let q = 1usize << k;
        let matrix = DMatrix::from_fn(q, q, |row, col| {
            f64::from(sign_at_index(effects[col].members(), row, k))
        });
        Ok(DesignMatrix {
            factors: k,
            effects,
            matrix,
        })
    }

    pub fn column_of(&self, effect: &EffectIndex) -> Option<usize> {
        self.effects.iter().position(|e| e == effect)
    }
}

/// Observed/unobserved partition of the combinations together with the
/// effective contrasts `G_oᵀ` that identify the non-negligible effects
/// from observed cell means alone.
#[derive(Clone, Debug)]
pub struct IncompleteDesign {
    pub factors: usize,
    pub max_order: usize,
    /// Enumeration indices of observed combinations, ascending.
    pub observed: Vec<usize>,
    /// Enumeration indices of unobserved combinations, ascending.
    pub unobserved: Vec<usize>,
    /// Non-negligible effects: the summary contrast, then `[K]_{K'}`.
    pub effects: Vec<EffectIndex>,
    /// `G_oᵀ` (unscaled): one row per entry of `effects`, one column per observed combination.
    pub effective: DMatrix<f64>,
    /// Maps observed means to the implied unobserved means: `E[Y_u] = imputation · E[Y_o]`.
    pub imputation: DMatrix<f64>,
    /// Singular values of `G_uu`, descending.
    pub uu_singular_values: Vec<f64>,
    observed_pos: Vec<Option<usize>>,
}

impl IncompleteDesign {
    pub fn observed_position(&self, index: usize) -> Option<usize> {
        self.observed_pos.get(index).copied().flatten()
    }

    pub fn effect_row(&self, effect: &EffectIndex) -> Option<usize> {
        self.effects.iter().position(|e| e == effect)
    }

    /// Effective contrast row for `effect` over the observed combinations.
    pub fn effective_contrast(&self, effect: &EffectIndex) -> Option<Vec<f64>> {
        self.effect_row(effect)
            .map(|r| self.effective.row(r).iter().copied().collect())
    }

    pub fn min_uu_singular_value(&self) -> Option<f64> {
        self.uu_singular_values.last().copied()
    }
}

pub fn build_incomplete_design(
    k: usize,
    max_order: usize,
    unobserved: &[TreatmentCombination],
    tol: f64,
) -> Result<IncompleteDesign> {
    let dm = DesignMatrix::new(k)?;
    effect_index_set(k, max_order)?;
    let q = 1usize << k;

    let mut is_unobserved = vec![false; q];
    for z in unobserved {
        if z.factors() != k {
            return Err(Error::Domain(format!(
                "combination {z} has {} levels, expected {k}",
                z.factors()
            )));
        }
        is_unobserved[z.index()] = true;
    }
    let unobs: Vec<usize> = (0..q).filter(|&i| is_unobserved[i]).collect();
    let obs: Vec<usize> = (0..q).filter(|&i| !is_unobserved[i]).collect();
    let unobserved_sorted: Vec<TreatmentCombination> = unobs
        .iter()
        .map(|&i| TreatmentCombination::from_index(i, k))
        .collect();

    let plus_cols: Vec<usize> = (0..q)
        .filter(|&c| dm.effects[c].order() <= max_order)
        .collect();
    let minus_cols: Vec<usize> = (0..q)
        .filter(|&c| dm.effects[c].order() > max_order)
        .collect();
    let (q_u, q_minus) = (unobs.len(), minus_cols.len());

    if q_u > q_minus {
        return Err(Error::Identification {
            reason: format!("{q_u} unobserved combinations but only {q_minus} negligible effects"),
            unobserved: unobserved_sorted,
        });
    }

    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| dm.matrix[(rows[r], cols[c])])
    };
    let g_oo = sub(&obs, &plus_cols);
    let g_ou = sub(&unobs, &plus_cols);
    let g_uo = sub(&obs, &minus_cols);
    let g_uu = sub(&unobs, &minus_cols);

    let (effective, imputation, singular_values) = if q_u == 0 {
        (g_oo.transpose(), DMatrix::zeros(0, obs.len()), Vec::new())
    } else {
        let svd = Svd::new(&g_uu.transpose());
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let largest = sv[0];
        let smallest = *sv.last().unwrap_or(&0.0);
        if sv.len() < q_u || smallest < tol * largest || largest == 0.0 {
            return Err(Error::Identification {
                reason: format!(
                    "G_uu lacks full row rank (smallest singular value {smallest:.3e}); \
                     the negligible-interaction assumption cannot pin down the unobserved cells"
                ),
                unobserved: unobserved_sorted,
            });
        }
        let uu_t_pinv = svd.pseudo_inverse(tol * largest);
        let imputation = -(&uu_t_pinv * g_uo.transpose());
        let effective = g_oo.transpose() + g_ou.transpose() * &imputation;
        (effective, imputation, sv)
    };

    let mut observed_pos = vec![None; q];
    for (p, &i) in obs.iter().enumerate() {
        observed_pos[i] = Some(p);
    }

    Ok(IncompleteDesign {
        factors: k,
        max_order,
        observed: obs,
        unobserved: unobs,
        effects: plus_cols.iter().map(|&c| dm.effects[c].clone()).collect(),
        effective,
        imputation,
        uu_singular_values: singular_values,
        observed_pos,
    })
}

/// The factorial design the weights emulate.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Design {
    Full { factors: usize },
    Incomplete(IncompleteDesign),
}

impl Design {
    pub fn full(k: usize) -> Result<Self> {
        check_factor_count(k)?;
        Ok(Design::Full { factors: k })
    }

    pub fn factors(&self) -> usize {
        match self {
            Design::Full { factors } => *factors,
            Design::Incomplete(d) => d.factors,
        }
    }

    pub fn is_incomplete(&self) -> bool {
        matches!(self, Design::Incomplete(_))
    }

    pub fn is_observed(&self, index: usize) -> bool {
        match self {
            Design::Full { factors } => index < 1usize << factors,
            Design::Incomplete(d) => d.observed_position(index).is_some(),
        }
    }

    /// Enumeration indices of the combinations units may occupy.
    pub fn observed(&self) -> Vec<usize> {
        match self {
            Design::Full { factors } => (0..1usize << factors).collect(),
            Design::Incomplete(d) => d.observed.clone(),
        }
    }

    /// Contrast coefficient of `effect` at the combination with enumeration
    /// `index`: `g_{Kz}` on a full design, the effective `G_oᵀ` entry on an
    /// incomplete one (zero on unobserved cells).
    pub fn contrast_entry(&self, effect: &EffectIndex, index: usize) -> Result<f64> {
        match self {
            Design::Full { factors } => {
                effect.check_factors(*factors)?;
                Ok(f64::from(sign_at_index(effect.members(), index, *factors)))
            }
            Design::Incomplete(d) => {
                let row = d.effect_row(effect).ok_or_else(|| {
                    Error::Domain(format!(
                        "effect {effect} is not among the non-negligible effects of order <= {}",
                        d.max_order
                    ))
                })?;
                Ok(d.observed_position(index)
                    .map_or(0.0, |p| d.effective[(row, p)]))
            }
        }
    }

    /// Contrast coefficients of `effect` over all 2^K combinations.
    pub fn contrast_profile(&self, effect: &EffectIndex) -> Result<Vec<f64>> {
        (0..1usize << self.factors())
            .map(|i| self.contrast_entry(effect, i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(levels: &[i8]) -> TreatmentCombination {
        TreatmentCombination::new(levels.to_vec()).unwrap()
    }

    #[test]
    fn enumeration_k2() {
        let all = enumerate_combinations(2).unwrap();
        let got: Vec<&[i8]> = all.iter().map(|c| c.levels()).collect();
        assert_eq!(got, vec![&[-1, -1][..], &[-1, 1], &[1, -1], &[1, 1]]);
    }

    #[test]
    fn enumeration_k3_positions() {
        let all = enumerate_combinations(3).unwrap();
        assert_eq!(all[0].levels(), &[-1, -1, -1]);
        assert_eq!(all[1].levels(), &[-1, -1, 1]);
        assert_eq!(all[7].levels(), &[1, 1, 1]);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn enumeration_rejects_bad_counts() {
        assert!(matches!(enumerate_combinations(1), Err(Error::Config(_))));
        assert!(matches!(enumerate_combinations(21), Err(Error::Config(_))));
    }

    #[test]
    fn combination_rejects_zero_level() {
        assert!(TreatmentCombination::new(vec![1, 0, -1]).is_err());
    }

    #[test]
    fn contrast_examples() {
        let g1 = contrast_vector(&EffectIndex::main(1), 3).unwrap();
        assert_eq!(g1.entries, vec![-1, -1, -1, -1, 1, 1, 1, 1]);
        let g12 = contrast_vector(&EffectIndex::new([1, 2]).unwrap(), 3).unwrap();
        assert_eq!(g12.entries, vec![1, 1, -1, -1, -1, -1, 1, 1]);
        let g0 = contrast_vector(&EffectIndex::summary(), 2).unwrap();
        assert_eq!(g0.entries, vec![1, 1, 1, 1]);
    }

    #[test]
    fn contrast_rejects_out_of_range_member() {
        let e = EffectIndex::new([1, 4]).unwrap();
        assert!(matches!(contrast_vector(&e, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn effect_sets() {
        let e = effect_index_set(3, 1).unwrap();
        assert_eq!(
            e,
            vec![
                EffectIndex::main(1),
                EffectIndex::main(2),
                EffectIndex::main(3)
            ]
        );
        assert_eq!(effect_index_set(3, 2).unwrap().len(), 6);
        assert_eq!(effect_index_set(5, 2).unwrap().len(), 15);
        assert!(effect_index_set(3, 0).is_err());
        assert!(effect_index_set(3, 4).is_err());
    }

    #[test]
    fn effect_index_rejects_duplicates_and_zero() {
        assert!(EffectIndex::new([2, 2]).is_err());
        assert!(EffectIndex::new([0, 1]).is_err());
        assert_eq!(EffectIndex::new([3, 1]).unwrap().members(), &[1, 3]);
    }

    #[test]
    fn incomplete_rank_failure() {
        let err = build_incomplete_design(3, 2, &[z(&[1, 1, -1]), z(&[1, 1, 1])], DEFAULT_RANK_TOL)
            .unwrap_err();
        assert!(matches!(err, Error::Identification { .. }));
    }

    #[test]
    fn incomplete_too_many_unobserved() {
        let err = build_incomplete_design(
            3,
            1,
            &[
                z(&[1, 1, -1]),
                z(&[1, 1, 1]),
                z(&[1, -1, 1]),
                z(&[-1, 1, 1]),
                z(&[-1, -1, 1]),
            ],
            DEFAULT_RANK_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Identification { .. }));
    }

    #[test]
    fn incomplete_without_unobserved_matches_full() {
        let d = build_incomplete_design(3, 2, &[], DEFAULT_RANK_TOL).unwrap();
        for (r, e) in d.effects.iter().enumerate() {
            let g = contrast_vector(e, 3).unwrap().as_f64();
            let row: Vec<f64> = d.effective.row(r).iter().copied().collect();
            assert_eq!(row, g);
        }
    }

    #[test]
    fn incomplete_square_pinv_is_inverse() {
        let d = build_incomplete_design(3, 2, &[z(&[1, 1, 1])], DEFAULT_RANK_TOL).unwrap();
        // G_uu = [+1]; its inverse is itself.
        assert_eq!(d.uu_singular_values, vec![1.0]);
        let expected = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0];
        for (c, v) in expected.iter().enumerate() {
            assert!((d.imputation[(0, c)] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn design_contrast_entries() {
        let full = Design::full(3).unwrap();
        assert_eq!(full.contrast_entry(&EffectIndex::main(2), 2).unwrap(), 1.0);
        let inc = Design::Incomplete(
            build_incomplete_design(3, 2, &[z(&[1, 1, 1])], DEFAULT_RANK_TOL).unwrap(),
        );
        assert!(!inc.is_observed(7));
        assert_eq!(inc.contrast_entry(&EffectIndex::main(1), 7).unwrap(), 0.0);
        assert!((inc.contrast_entry(&EffectIndex::main(1), 1).unwrap() + 2.0).abs() < 1e-12);
        assert!(inc
            .contrast_entry(&EffectIndex::new([1, 2, 3]).unwrap(), 0)
            .is_err());
    }
}
