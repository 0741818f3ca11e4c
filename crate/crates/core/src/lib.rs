//! Match-adaptive randomization inference for observational studies.
//!
//! Optimal pair matching selects which units are compared, and it does so
//! by looking at the observed treatments. Permutation tests that shuffle
//! treatments within the realized pairs as if the pairs were fixed
//! overstate their evidence, because many permutations would have produced
//! a different match. This crate constructs optimal propensity-score pair
//! matches, characterizes the exact conditional distribution of treatment
//! given the realized match, and runs permutation tests and confidence
//! intervals against that distribution, with a brute-force re-matching
//! oracle for verification.

pub mod csvio;
pub mod error;
pub mod inference;
pub mod matcher;
pub mod model;
pub mod oracle;
pub mod permuter;
pub mod propensity;
pub mod rng;
pub mod simulate;
pub mod structure;

pub use error::{Error, Result};
pub use inference::{
    confidence_interval, diff_in_means, randomization_test, regression_adjusted_stat, Method,
    Sidedness, Statistic, TestResult, TestSpec,
};
pub use matcher::{
    is_crossing, match_within_strata, optimal_pair_match, optimal_pair_match_caliper, MatchProblem,
};
pub use model::{jitter_ties, validate_sample, MatchedDesign, MatchedPair, Sample, Unit};
pub use oracle::{brute_force_support, check_agreement, exact_distribution, OracleReport};
pub use permuter::{
    build_distribution, compatible_vectors, compatible_vectors_caliper, component_flip_probability,
    meta_component_distribution, sample_assignment, sample_pair_flips, sample_rejection,
    support_no_unmatched, AssignmentDistribution, PermuterContext,
};
pub use propensity::{fit_logistic, pair_probabilities, predict, PairProbabilities, PropensityModel};
pub use structure::{
    build_meta_components, build_overlap_graph, connected_components, Boundary, ConnectedComponent,
    DesignView, MetaComponent, OverlapGraph,
};
