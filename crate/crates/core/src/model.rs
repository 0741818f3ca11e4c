//! Shared data model: units, samples, and matched designs.
//!
//! All types are immutable after construction and cheap to share across
//! threads. Construction-time validation lives in [`validate_sample`];
//! downstream algorithms assume its invariants hold.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single study unit: binary treatment, optional outcome, covariates, and
/// an optional propensity score in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub treatment: u8,
    pub outcome: Option<f64>,
    pub covariates: Vec<f64>,
    pub score: Option<f64>,
}

/// A sample of units with optional per-unit stratum labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub units: Vec<Unit>,
    pub strata: Option<Vec<String>>,
}

impl Sample {
    pub fn new(units: Vec<Unit>) -> Self {
        Sample {
            units,
            strata: None,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Index of each unit id.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect()
    }
}

/// One matched pair, stored as ids with the within-pair score distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: String,
    pub control: String,
    pub distance: f64,
}

/// The realized match: pair set, unmatched units with frozen treatments, and
/// the total score-distance objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDesign {
    pub pairs: Vec<MatchedPair>,
    pub unmatched: Vec<(String, u8)>,
    pub objective: f64,
}

impl MatchedDesign {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Checks the structural invariants of a design against its sample:
    /// pairs disjoint with one treated and one control each, matched and
    /// unmatched units partition the sample, and the stored objective equals
    /// the recomputed sum of within-pair score distances to 1e-12.
    pub fn validate_against(&self, sample: &Sample) -> Result<()> {
        let index = sample.id_index();
        let mut seen: HashSet<&str> = HashSet::new();
        let mut total = 0.0;
        for pair in &self.pairs {
            for id in [&pair.treated, &pair.control] {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidDesign {
                        reason: format!("unit `{id}` appears in more than one pair"),
                    });
                }
            }
            let t = *index.get(pair.treated.as_str()).ok_or(Error::UnknownUnit {
                id: pair.treated.clone(),
            })?;
            let c = *index.get(pair.control.as_str()).ok_or(Error::UnknownUnit {
                id: pair.control.clone(),
            })?;
            let (zt, zc) = (sample.units[t].treatment, sample.units[c].treatment);
            if zt + zc != 1 {
                return Err(Error::InvalidDesign {
                    reason: format!(
                        "pair ({}, {}) does not contain exactly one treated unit",
                        pair.treated, pair.control
                    ),
                });
            }
            if zt != 1 {
                return Err(Error::InvalidDesign {
                    reason: format!("pair ({}, {}) lists the control first", pair.treated, pair.control),
                });
            }
            let (st, sc) = (score_of(sample, t)?, score_of(sample, c)?);
            total += (st - sc).abs();
        }
        for (id, z) in &self.unmatched {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidDesign {
                    reason: format!("unit `{id}` is both matched and unmatched"),
                });
            }
            let i = *index.get(id.as_str()).ok_or(Error::UnknownUnit { id: id.clone() })?;
            if sample.units[i].treatment != *z {
                return Err(Error::InvalidDesign {
                    reason: format!("unmatched unit `{id}` has a frozen treatment that differs from the sample"),
                });
            }
        }
        if seen.len() != sample.len() {
            return Err(Error::InvalidDesign {
                reason: format!(
                    "design covers {} units but the sample has {}",
                    seen.len(),
                    sample.len()
                ),
            });
        }
        if (total - self.objective).abs() > 1e-12 {
            return Err(Error::InvalidDesign {
                reason: format!(
                    "stored objective {} differs from recomputed {}",
                    self.objective, total
                ),
            });
        }
        Ok(())
    }
}

fn score_of(sample: &Sample, i: usize) -> Result<f64> {
    sample.units[i].score.ok_or_else(|| Error::MissingScore {
        id: sample.units[i].id.clone(),
    })
}

/// Validates unit and sample invariants, returning the sample unchanged.
///
/// Checks: unique ids, binary treatments, scores strictly inside (0, 1),
/// finite covariates of consistent length, and strata labels (when present)
/// covering every unit. Does not require distinct scores; see [`jitter_ties`].
pub fn validate_sample(sample: Sample) -> Result<Sample> {
    let mut ids = HashSet::new();
    let mut width: Option<usize> = None;
    for unit in &sample.units {
        if !ids.insert(unit.id.clone()) {
            return Err(Error::DuplicateId {
                id: unit.id.clone(),
            });
        }
        if unit.treatment > 1 {
            return Err(Error::NonBinaryTreatment {
                id: unit.id.clone(),
                value: unit.treatment as i64,
            });
        }
        if let Some(s) = unit.score {
            if !(s > 0.0 && s < 1.0) || !s.is_finite() {
                return Err(Error::ScoreOutOfRange {
                    id: unit.id.clone(),
                    value: s,
                });
            }
        }
        if unit.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteCovariate {
                id: unit.id.clone(),
            });
        }
        match width {
            None => width = Some(unit.covariates.len()),
            Some(w) => {
                if unit.covariates.len() != w {
                    return Err(Error::CovariateLengthMismatch {
                        id: unit.id.clone(),
                        got: unit.covariates.len(),
                        expected: w,
                    });
                }
            }
        }
        if let Some(y) = unit.outcome {
            if !y.is_finite() {
                return Err(Error::Parse(format!("unit `{}` has a non-finite outcome", unit.id)));
            }
        }
    }
    if let Some(strata) = &sample.strata {
        if strata.len() != sample.units.len() {
            return Err(Error::StrataLengthMismatch {
                got: strata.len(),
                expected: sample.units.len(),
            });
        }
    }
    Ok(sample)
}

/// Breaks exact ties among propensity scores with a seeded perturbation.
///
/// Tied scores move by strictly less than `magnitude`; untied scores are
/// left untouched, so the relative order of all non-tied scores is
/// preserved. Deterministic given the seed.
pub fn jitter_ties(sample: Sample, magnitude: f64, seed: u64) -> Result<Sample> {
    let scores: Vec<(usize, f64)> = sample
        .units
        .iter()
        .enumerate()
        .filter_map(|(i, u)| u.score.map(|s| (i, s)))
        .collect();

    let limit = jitter_limit(&scores);
    if !(magnitude > 0.0) || magnitude >= limit {
        return Err(Error::JitterTooLarge { magnitude, limit });
    }

    // Group indices by exact score value; only groups of size > 1 move.
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &(i, s) in &scores {
        groups.entry(s.to_bits()).or_default().push(i);
    }

    let mut sample = sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (bits, members) in groups {
        if members.len() < 2 {
            continue;
        }
        let v = f64::from_bits(bits);
        // Jitter upward unless that could leave (0, 1).
        let sign = if v + magnitude < 1.0 { 1.0 } else { -1.0 };
        loop {
            let mut offsets: Vec<f64> = (0..members.len())
                .map(|_| rng.gen_range(f64::MIN_POSITIVE..1.0) * magnitude * sign)
                .collect();
            offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let distinct = offsets.windows(2).all(|w| w[0] != w[1]);
            if distinct {
                for (&i, &d) in members.iter().zip(offsets.iter()) {
                    sample.units[i].score = Some(v + d);
                }
                break;
            }
        }
    }
    Ok(sample)
}

/// Largest admissible jitter magnitude: a quarter of the smallest nonzero
/// gap between scores, capped so jittered scores stay inside (0, 1).
fn jitter_limit(scores: &[(usize, f64)]) -> f64 {
    let mut sorted: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut limit = f64::INFINITY;
    for w in sorted.windows(2) {
        let gap = w[1] - w[0];
        if gap > 0.0 {
            limit = limit.min(gap / 4.0);
        }
    }
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        limit = limit.min(lo / 4.0).min((1.0 - hi) / 4.0).min(0.25);
    }
    limit
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit(id: &str, z: u8, score: f64) -> Unit {
        Unit {
            id: id.to_string(),
            treatment: z,
            outcome: None,
            covariates: vec![],
            score: Some(score),
        }
    }

    fn figure_scores() -> Vec<f64> {
        vec![0.80, 0.45, 0.41, 0.35, 0.65, 0.60, 0.40, 0.36, 0.30, 0.20]
    }

    #[test]
    fn accepts_ten_unit_sample() {
        let units: Vec<Unit> = figure_scores()
            .iter()
            .enumerate()
            .map(|(i, &s)| unit(&format!("u{i}"), u8::from(i < 4), s))
            .collect();
        assert!(validate_sample(Sample::new(units)).is_ok());
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let mut u = unit("bad", 0, 0.5);
        u.treatment = 2;
        let err = validate_sample(Sample::new(vec![u])).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn accepts_empty_sample() {
        let s = validate_sample(Sample::new(vec![])).unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let units = vec![unit("a", 1, 0.5), unit("a", 0, 0.4)];
        let err = validate_sample(Sample::new(units)).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { .. }));
    }

    #[test]
    fn rejects_boundary_score() {
        let err = validate_sample(Sample::new(vec![unit("a", 1, 1.0)])).unwrap_err();
        assert!(matches!(err, Error::ScoreOutOfRange { .. }));
    }

    #[test]
    fn jitter_perturbs_only_ties() {
        let units = vec![unit("a", 1, 0.4), unit("b", 0, 0.4), unit("c", 0, 0.5)];
        let out = jitter_ties(Sample::new(units), 1e-9, 7).unwrap();
        let s: Vec<f64> = out.units.iter().map(|u| u.score.unwrap()).collect();
        assert_eq!(s[2], 0.5);
        assert_ne!(s[0], s[1]);
        assert!((s[0] - 0.4).abs() < 1e-9 && (s[1] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn jitter_is_identity_on_distinct_scores() {
        let units = vec![unit("a", 1, 0.4), unit("b", 0, 0.41), unit("c", 0, 0.5)];
        let sample = Sample::new(units);
        let out = jitter_ties(sample.clone(), 1e-9, 7).unwrap();
        assert_eq!(out, sample);
    }

    #[test]
    fn jitter_is_deterministic() {
        let mk = || {
            Sample::new(vec![
                unit("a", 1, 0.4),
                unit("b", 0, 0.4),
                unit("c", 0, 0.4),
                unit("d", 0, 0.5),
            ])
        };
        let a = jitter_ties(mk(), 1e-9, 99).unwrap();
        let b = jitter_ties(mk(), 1e-9, 99).unwrap();
        assert_eq!(a, b);
        let c = jitter_ties(mk(), 1e-9, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jitter_rejects_large_magnitude() {
        let units = vec![unit("a", 1, 0.4), unit("b", 0, 0.4), unit("c", 0, 0.5)];
        let err = jitter_ties(Sample::new(units), 0.1, 7).unwrap_err();
        assert!(matches!(err, Error::JitterTooLarge { .. }));
    }

    #[test]
    fn jitter_preserves_order_of_untied_scores() {
        let mut units: Vec<Unit> = (0..20)
            .map(|i| unit(&format!("u{i}"), (i % 2) as u8, 0.05 + 0.04 * i as f64))
            .collect();
        units.push(unit("t1", 1, 0.05 + 0.04 * 3.0));
        units.push(unit("t2", 0, 0.05 + 0.04 * 3.0));
        let before: Vec<(String, f64)> = units
            .iter()
            .map(|u| (u.id.clone(), u.score.unwrap()))
            .collect();
        let out = jitter_ties(Sample::new(units), 1e-9, 3).unwrap();
        // Every strict inequality between originally-distinct scores survives.
        for (i, (_, si)) in before.iter().enumerate() {
            for (j, (_, sj)) in before.iter().enumerate() {
                if si < sj {
                    assert!(out.units[i].score.unwrap() < out.units[j].score.unwrap());
                }
            }
        }
    }
}
