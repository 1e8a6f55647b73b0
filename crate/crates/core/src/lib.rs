//! Covariate-balancing weights for factorial observational studies.
//!
//! The crate builds the exact-balance constraint system that makes a
//! weighted observational sample mimic a randomized 2^K factorial design,
//! solves it through its concave dual, and turns the weights into effect
//! estimates with sandwich standard errors. Incomplete designs (some
//! treatment combinations never observed) are handled by assuming
//! interactions above a chosen order vanish.
//!
//! ```
//! use factorial_weights::{BasisSpec, Dataset, Design, EffectIndex, FitOptions, ModelFlavor};
//!
//! // one unit per cell of a 2x2 design, outcome equal to the first factor
//! let z = vec![vec![-1, -1], vec![-1, 1], vec![1, -1], vec![1, 1]];
//! let x = vec![vec![0.0]; 4];
//! let y = [-1.0, -1.0, 1.0, 1.0];
//! let data = Dataset::from_rows(&z, &x, &y).unwrap();
//! let spec = BasisSpec::identity(1, ModelFlavor::Heterogeneous, 1).unwrap();
//! let fit = factorial_weights::fit(&data, &spec, &Design::full(2).unwrap(), &FitOptions::default()).unwrap();
//! let tau = fit.point_estimate(&data, &EffectIndex::main(1)).unwrap();
//! assert!((tau - 2.0).abs() < 1e-9);
//! ```

pub mod balance;
pub mod data;
pub mod design;
pub mod error;
pub mod estimation;
pub mod fit;
pub mod linalg;
pub mod oracle;
pub mod par;
pub mod simulation;
pub mod solver;

pub use balance::{
    balance_residuals, build_balance_system, build_reduced_balance_system, membership_indicator,
    split_contrast, BalanceSystem, BasisFunction, BasisSpec, ModelFlavor, RowPlan,
};
pub use data::Dataset;
pub use design::{
    build_incomplete_design, contrast_vector, effect_index_set, enumerate_combinations, Design,
    DesignMatrix, EffectIndex, IncompleteDesign, TreatmentCombination,
};
pub use error::{Error, Result};
pub use estimation::{
    augmented_estimate, estimate_effect, ols_regression_baseline, smd_report, unadjusted_baseline,
    variance_estimate, EffectEstimate, SmdReport,
};
pub use fit::{fit, fit_with_plan, Fit, FitOptions};
pub use par::Parallelism;
pub use solver::{dual_objective, solve_dual, DualSolution, SolverOptions, SolverStatus};
