//! Brute-force verification of the conditional support.
//!
//! Enumerates every within-pair flip of the observed treatments, re-runs
//! the matcher on each, and reports which flips reproduce the original
//! design. Deliberately free of shortcuts; its value is being obviously
//! correct at desk scale. It runs the same matcher code path as
//! production, so "optimal" means the same thing on both sides.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matcher::{optimal_pair_match, optimal_pair_match_caliper, MatchProblem};
use crate::model::{MatchedDesign, Sample};
use crate::permuter::{
    build_distribution, global_support, PermuterContext, DEFAULT_ENUM_CAP,
};
use crate::propensity::pair_probabilities;
use crate::structure::DesignView;

/// Hard cap on the number of pairs the oracle will enumerate.
pub const ORACLE_PAIR_CAP: usize = 22;

/// Exhaustive support report: flip patterns are bitmasks over the design's
/// pair indices, probabilities are the renormalized within-pair odds.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub k: usize,
    pub support: Vec<u32>,
    pub probabilities: Vec<f64>,
}

/// Re-runs the matcher for all `2^K` within-pair treatment flips and keeps
/// the flips whose optimal design equals the original: same pair set, same
/// unmatched units, objective equal to 1e-12.
pub fn brute_force_support(
    sample: &Sample,
    design: &MatchedDesign,
    caliper: Option<f64>,
) -> Result<OracleReport> {
    let k = design.pairs.len();
    if k > ORACLE_PAIR_CAP {
        return Err(Error::SizeCapExceeded {
            what: "oracle pair count",
            got: k,
            cap: ORACLE_PAIR_CAP,
        });
    }
    design.validate_against(sample)?;
    let index = sample.id_index();
    let pair_units: Vec<(usize, usize)> = design
        .pairs
        .iter()
        .map(|p| (index[p.treated.as_str()], index[p.control.as_str()]))
        .collect();

    let signature = design_signature(design);
    let objective = design.objective;

    let support: Vec<u32> = (0u32..(1u32 << k))
        .into_par_iter()
        .filter_map(|mask| {
            let mut permuted = sample.clone();
            for (bit, &(t, c)) in pair_units.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    permuted.units[t].treatment = 0;
                    permuted.units[c].treatment = 1;
                }
            }
            let problem = MatchProblem {
                sample: &permuted,
                caliper,
                use_strata: false,
            };
            let rematch = match caliper {
                Some(_) => optimal_pair_match_caliper(&problem),
                None => optimal_pair_match(&problem),
            };
            let rematch = rematch.ok()?;
            let same = design_signature(&rematch) == signature
                && (rematch.objective - objective).abs() <= 1e-12;
            same.then_some(mask)
        })
        .collect();
    let mut support = support;
    support.sort_unstable();

    let view = DesignView::from_design(sample, design)?;
    let probabilities = exact_distribution(&support, &view)?;
    Ok(OracleReport {
        k,
        support,
        probabilities,
    })
}

/// Design identity for set comparison: unordered id pairs plus the
/// unmatched id set.
fn design_signature(design: &MatchedDesign) -> (BTreeSet<(String, String)>, BTreeSet<String>) {
    let pairs = design
        .pairs
        .iter()
        .map(|p| {
            let (a, b) = (p.treated.clone(), p.control.clone());
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    let unmatched = design.unmatched.iter().map(|(id, _)| id.clone()).collect();
    (pairs, unmatched)
}

/// Renormalized within-pair odds over a support set of flip patterns.
pub fn exact_distribution(support: &[u32], view: &DesignView) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Parse("empty oracle support".into()));
    }
    let pair_logs: Vec<(f64, f64)> = view
        .pairs
        .iter()
        .map(|p| {
            let probs = pair_probabilities(p.treated_score, p.control_score)?;
            Ok((probs.p1.ln(), probs.p2.ln()))
        })
        .collect::<Result<Vec<_>>>()?;
    let logs: Vec<f64> = support
        .iter()
        .map(|&mask| {
            pair_logs
                .iter()
                .enumerate()
                .map(|(bit, &(keep, flip))| if mask >> bit & 1 == 1 { flip } else { keep })
                .sum()
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Outcome of comparing the permuter's support against the oracle's.
#[derive(Debug, Clone)]
pub struct AgreementReport {
    pub pass: bool,
    pub k: usize,
    pub oracle_support_size: usize,
    pub permuter_support_size: usize,
    /// A flip pattern on which the two sides disagree, if any.
    pub first_mismatch: Option<u32>,
    pub max_probability_diff: f64,
}

/// Materializes the permuter's global support and compares it, pattern by
/// pattern and probability by probability, against the brute-force oracle.
pub fn check_agreement(
    sample: &Sample,
    design: &MatchedDesign,
    caliper: Option<f64>,
) -> Result<AgreementReport> {
    let oracle = brute_force_support(sample, design, caliper)?;
    let view = DesignView::from_design(sample, design)?;
    let ctx = PermuterContext::build(&view, caliper)?;
    let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP)?;
    let global = global_support(&ctx, &dist, 1u128 << ORACLE_PAIR_CAP)?
        .ok_or_else(|| Error::Parse("permuter support too large to materialize".into()))?;

    let mut permuter: Vec<(u32, f64)> = global
        .pair_flips
        .iter()
        .zip(&global.probabilities)
        .map(|(flips, &p)| {
            let mask = flips
                .iter()
                .enumerate()
                .fold(0u32, |m, (bit, &f)| m | (u32::from(f) << bit));
            (mask, p)
        })
        .collect();
    permuter.sort_by_key(|&(mask, _)| mask);

    let oracle_set: BTreeSet<u32> = oracle.support.iter().copied().collect();
    let permuter_set: BTreeSet<u32> = permuter.iter().map(|&(m, _)| m).collect();
    let first_mismatch = oracle_set
        .symmetric_difference(&permuter_set)
        .next()
        .copied();

    let mut max_probability_diff = 0.0f64;
    if first_mismatch.is_none() {
        for ((&om, &op), &(pm, pp)) in oracle
            .support
            .iter()
            .zip(&oracle.probabilities)
            .zip(&permuter)
        {
            debug_assert_eq!(om, pm);
            max_probability_diff = max_probability_diff.max((op - pp).abs());
        }
    }
    Ok(AgreementReport {
        pass: first_mismatch.is_none() && max_probability_diff < 1e-9,
        k: oracle.k,
        oracle_support_size: oracle.support.len(),
        permuter_support_size: permuter.len(),
        first_mismatch,
        max_probability_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::tests::{figure_sample, random_sample, unit};
    use crate::model::Sample;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn figure_design() -> (Sample, MatchedDesign) {
        let sample = figure_sample();
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        (sample, design)
    }

    fn pattern_names(report: &OracleReport, design: &MatchedDesign) -> Vec<String> {
        report
            .support
            .iter()
            .map(|&mask| {
                let mut ids: Vec<&str> = (0..report.k)
                    .filter(|bit| mask >> bit & 1 == 1)
                    .map(|bit| design.pairs[bit].treated.as_str())
                    .collect();
                ids.sort();
                ids.join(",")
            })
            .collect()
    }

    #[test]
    fn golden_support_has_three_patterns() {
        let (sample, design) = figure_design();
        let report = brute_force_support(&sample, &design, None).unwrap();
        let mut names = pattern_names(&report, &design);
        names.sort();
        assert_eq!(names, vec!["".to_string(), "B,C".into(), "D".into()]);
        for (name, prob) in pattern_names(&report, &design).iter().zip(&report.probabilities) {
            let expected = match name.as_str() {
                "" => 0.41,
                "B,C" => 0.27,
                "D" => 0.32,
                other => panic!("unexpected pattern {other}"),
            };
            assert!((prob - expected).abs() < 0.005, "{name}: {prob}");
        }
    }

    #[test]
    fn disjoint_pairs_support_all_four_flips() {
        let sample = Sample::new(vec![
            unit("t1", 1, 0.3),
            unit("c1", 0, 0.28),
            unit("t2", 1, 0.7),
            unit("c2", 0, 0.68),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let report = brute_force_support(&sample, &design, None).unwrap();
        assert_eq!(report.support, vec![0, 1, 2, 3]);
    }

    #[test]
    fn overlapping_pairs_support_lockstep_flips_only() {
        let sample = Sample::new(vec![
            unit("t1", 1, 0.80),
            unit("c1", 0, 0.60),
            unit("t2", 1, 0.75),
            unit("c2", 0, 0.55),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let report = brute_force_support(&sample, &design, None).unwrap();
        assert_eq!(report.support, vec![0b00, 0b11]);
    }

    #[test]
    fn single_pair_probabilities_come_from_pair_odds() {
        let sample = Sample::new(vec![unit("t", 1, 0.7), unit("c", 0, 0.4)]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let report = brute_force_support(&sample, &design, None).unwrap();
        assert_eq!(report.support, vec![0, 1]);
        let p = pair_probabilities(0.7, 0.4).unwrap();
        assert!((report.probabilities[0] - p.p1).abs() < 1e-12);
        assert!((report.probabilities[1] - p.p2).abs() < 1e-12);
    }

    #[test]
    fn near_equal_scores_give_uniform_distribution() {
        let sample = Sample::new(vec![
            unit("t1", 1, 0.50000001),
            unit("c1", 0, 0.50000002),
            unit("t2", 1, 0.50000013),
            unit("c2", 0, 0.50000014),
        ]);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        let report = brute_force_support(&sample, &design, None).unwrap();
        let uniform = 1.0 / report.support.len() as f64;
        for p in &report.probabilities {
            assert!((p - uniform).abs() < 1e-4);
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        let (sample, design) = figure_design();
        let a = brute_force_support(&sample, &design, None).unwrap();
        let b = brute_force_support(&sample, &design, None).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.probabilities, b.probabilities);
    }

    #[test]
    fn pair_cap_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let sample = random_sample(&mut rng, 23, 23);
        let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
        assert!(matches!(
            brute_force_support(&sample, &design, None),
            Err(Error::SizeCapExceeded { .. })
        ));
    }

    #[test]
    fn permuter_agrees_on_goldens_and_smalls() {
        let (sample, design) = figure_design();
        let report = check_agreement(&sample, &design, None).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.oracle_support_size, 3);

        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for trial in 0..40 {
            let nt = rng.gen_range(1..=5);
            let nc = rng.gen_range(nt..=nt + 4);
            let sample = random_sample(&mut rng, nt, nc);
            let design = optimal_pair_match(&MatchProblem::new(&sample)).unwrap();
            let report = check_agreement(&sample, &design, None).unwrap();
            assert!(report.pass, "trial {trial}: {report:?}");
        }
    }
}
