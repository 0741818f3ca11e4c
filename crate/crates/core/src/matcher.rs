//! Optimal pair matching on a univariate score.
//!
//! Minimizes the total absolute score distance over disjoint treated-control
//! pairs; the caliper variant first maximizes the number of pairs subject to
//! a distance cap and then minimizes cost. Both run the same dynamic program
//! over score-sorted arms, which is exact because an optimal matching on a
//! line never crosses partners.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{MatchedDesign, MatchedPair, Sample};

/// One matching task: a sample, an optional caliper, and whether to match
/// separately within strata.
#[derive(Debug, Clone)]
pub struct MatchProblem<'a> {
    pub sample: &'a Sample,
    pub caliper: Option<f64>,
    pub use_strata: bool,
}

impl<'a> MatchProblem<'a> {
    pub fn new(sample: &'a Sample) -> Self {
        MatchProblem {
            sample,
            caliper: None,
            use_strata: false,
        }
    }

    pub fn with_caliper(mut self, c: f64) -> Self {
        self.caliper = Some(c);
        self
    }
}

/// Optimal uncalipered pair match: `min(#treated, #control)` pairs with
/// minimum total score distance.
pub fn optimal_pair_match(problem: &MatchProblem) -> Result<MatchedDesign> {
    let all: Vec<usize> = (0..problem.sample.len()).collect();
    match_subset(problem.sample, &all, f64::INFINITY, false)
}

/// Caliper variant: among matchings whose pairs all satisfy the caliper,
/// maximizes the pair count and then minimizes total distance.
pub fn optimal_pair_match_caliper(problem: &MatchProblem) -> Result<MatchedDesign> {
    let c = problem.caliper.ok_or(Error::Parse(
        "caliper matching requires a caliper on the problem".into(),
    ))?;
    if !(c > 0.0) {
        return Err(Error::Parse(format!("caliper must be positive, got {c}")));
    }
    let all: Vec<usize> = (0..problem.sample.len()).collect();
    match_subset(problem.sample, &all, c, false)
}

/// Concatenation of per-stratum optimal matches; no cross-stratum pairs.
/// A stratum missing one arm contributes all of its units as unmatched.
pub fn match_within_strata(problem: &MatchProblem) -> Result<MatchedDesign> {
    let strata = problem
        .sample
        .strata
        .as_ref()
        .ok_or_else(|| Error::Parse("sample has no strata labels".into()))?;
    let caliper = problem.caliper.unwrap_or(f64::INFINITY);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in strata.iter().enumerate() {
        groups.entry(label).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut objective = 0.0;
    for (_, indices) in groups {
        let sub = match_subset(problem.sample, &indices, caliper, true)?;
        objective += sub.objective;
        pairs.extend(sub.pairs);
        unmatched.extend(sub.unmatched);
    }
    Ok(MatchedDesign {
        pairs,
        unmatched,
        objective,
    })
}

/// True when flipping exactly the right treatments in two pairs would let
/// them swap partners at strictly smaller total distance.
pub fn is_crossing(pair1: (f64, f64), pair2: (f64, f64)) -> bool {
    let (t1, c1) = pair1;
    let (t2, c2) = pair2;
    t1.max(c2) < c1.min(t2) || t2.max(c1) < c2.min(t1)
}

fn match_subset(
    sample: &Sample,
    indices: &[usize],
    caliper: f64,
    allow_one_arm: bool,
) -> Result<MatchedDesign> {
    let mut treated: Vec<(f64, usize)> = Vec::new();
    let mut controls: Vec<(f64, usize)> = Vec::new();
    for &i in indices {
        let u = &sample.units[i];
        let s = u.score.ok_or_else(|| Error::MissingScore { id: u.id.clone() })?;
        if u.treatment == 1 {
            treated.push((s, i));
        } else {
            controls.push((s, i));
        }
    }
    if treated.is_empty() || controls.is_empty() {
        if !allow_one_arm {
            return Err(Error::EmptyArm);
        }
        let mut unmatched: Vec<(f64, usize)> = treated.into_iter().chain(controls).collect();
        unmatched.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        return Ok(MatchedDesign {
            pairs: Vec::new(),
            unmatched: unmatched
                .into_iter()
                .map(|(_, i)| (sample.units[i].id.clone(), sample.units[i].treatment))
                .collect(),
            objective: 0.0,
        });
    }
    treated.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    controls.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    check_distinct(sample, &treated, &controls)?;

    let t_scores: Vec<f64> = treated.iter().map(|&(s, _)| s).collect();
    let c_scores: Vec<f64> = controls.iter().map(|&(s, _)| s).collect();
    let chosen = pair_dp(&t_scores, &c_scores, caliper);

    let mut used_t = vec![false; treated.len()];
    let mut used_c = vec![false; controls.len()];
    let mut pairs = Vec::with_capacity(chosen.len());
    let mut objective = 0.0;
    for (ti, ci) in chosen {
        used_t[ti] = true;
        used_c[ci] = true;
        let distance = (t_scores[ti] - c_scores[ci]).abs();
        objective += distance;
        pairs.push(MatchedPair {
            treated: sample.units[treated[ti].1].id.clone(),
            control: sample.units[controls[ci].1].id.clone(),
            distance,
        });
    }
    let mut unmatched: Vec<(f64, usize)> = treated
        .iter()
        .enumerate()
        .filter(|&(ti, _)| !used_t[ti])
        .map(|(_, &(s, i))| (s, i))
        .chain(
            controls
                .iter()
                .enumerate()
                .filter(|&(ci, _)| !used_c[ci])
                .map(|(_, &(s, i))| (s, i)),
        )
        .collect();
    unmatched.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(MatchedDesign {
        pairs,
        unmatched: unmatched
            .into_iter()
            .map(|(_, i)| (sample.units[i].id.clone(), sample.units[i].treatment))
            .collect(),
        objective,
    })
}

fn check_distinct(
    sample: &Sample,
    treated: &[(f64, usize)],
    controls: &[(f64, usize)],
) -> Result<()> {
    let mut all: Vec<(f64, usize)> = treated.iter().chain(controls.iter()).copied().collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in all.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::TiedScores {
                value: w[0].0,
                a: sample.units[w[0].1].id.clone(),
                b: sample.units[w[1].1].id.clone(),
            });
        }
    }
    Ok(())
}

/// Lexicographic value: more pairs first, then lower cost.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DpValue {
    pairs: u32,
    cost: f64,
}

fn better(a: DpValue, b: DpValue) -> bool {
    a.pairs > b.pairs || (a.pairs == b.pairs && a.cost < b.cost)
}

/// Packed rows of decision bits.
struct BitMat {
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMat {
    fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitMat {
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        self.data[r * self.words_per_row + c / 64] |= 1u64 << (c % 64);
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.words_per_row + c / 64] & (1u64 << (c % 64)) != 0
    }
}

/// Suffix dynamic program over sorted arms. `value(i, j)` is the best
/// (pairs, cost) achievable with treated `i..` and controls `j..`; decisions
/// are kept as bits so the forward walk can recover the lexicographically
/// smallest optimal pairing in treated-score order.
fn pair_dp(t: &[f64], c: &[f64], caliper: f64) -> Vec<(usize, usize)> {
    let n = t.len();
    let m = c.len();
    let mut can_match = BitMat::new(n, m);
    let mut can_skip_c = BitMat::new(n, m);

    let zero = DpValue { pairs: 0, cost: 0.0 };
    let mut next: Vec<DpValue> = vec![zero; m + 1];
    let mut cur: Vec<DpValue> = vec![zero; m + 1];
    for i in (0..n).rev() {
        cur[m] = zero;
        for j in (0..m).rev() {
            let skip_c = cur[j + 1];
            let skip_t = next[j];
            let mut best = if better(skip_t, skip_c) { skip_t } else { skip_c };
            let d = (t[i] - c[j]).abs();
            let matched = if d <= caliper {
                let v = DpValue {
                    pairs: next[j + 1].pairs + 1,
                    cost: next[j + 1].cost + d,
                };
                if better(v, best) {
                    best = v;
                }
                Some(v)
            } else {
                None
            };
            if matched.is_some_and(|v| v == best) {
                can_match.set(i, j);
            }
            if skip_c == best {
                can_skip_c.set(i, j);
            }
            cur[j] = best;
        }
        std::mem::swap(&mut next, &mut cur);
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if can_match.get(i, j) {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if can_skip_c.get(i, j) {
            j += 1;
        } else {
            i += 1;
        }
    }
    pairs
}
