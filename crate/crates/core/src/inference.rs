//! Randomization tests and confidence intervals over a matched design.
//!
//! Three null distributions are supported: uniform within-pair flips,
//! covariate-adaptive flips with renormalized propensity odds, and
//! match-adaptive flips restricted to permutations compatible with the
//! realized match. P-values follow the finite-sample-valid convention:
//! exact enumeration includes the observed assignment, Monte Carlo uses
//! `(1 + #{draws at least as extreme}) / (1 + n_draws)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatchedDesign, Sample};
use crate::permuter::{
    build_distribution, global_support, sample_pair_flips, support_size, AssignmentDistribution,
    GlobalSupport, PermuterContext, DEFAULT_ENUM_CAP,
};
use crate::propensity::pair_probabilities;
use crate::rng::{keyed_rng, STREAM_PAIR_FLIPS};
use crate::structure::DesignView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    DiffInMeans,
    RegressionAdjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Uniform,
    CovariateAdaptive,
    MatchAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    Greater,
    Less,
}

/// Full test specification. `tau` shifts the null to a constant additive
/// effect by testing the adjusted outcomes `y - tau * z`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TestSpec {
    pub statistic: Statistic,
    pub method: Method,
    pub sidedness: Sidedness,
    pub n_draws: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Exact enumeration is used automatically when the null support has at
    /// most this many assignments.
    pub exact_cap: u128,
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec {
            statistic: Statistic::DiffInMeans,
            method: Method::MatchAdaptive,
            sidedness: Sidedness::Greater,
            n_draws: 50_000,
            alpha: 0.05,
            tau: 0.0,
            exact_cap: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub observed: f64,
    pub null_mean: f64,
    pub p_value: f64,
    pub exact: bool,
    pub draws_used: usize,
    pub support_size: Option<u128>,
}

/// Mean within-pair difference of outcomes, treated minus control.
pub fn diff_in_means(sample: &Sample, design: &MatchedDesign) -> Result<f64> {
    let diffs = pair_diffs(sample, design, Statistic::DiffInMeans, 0.0)?;
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Difference-in-pair-means of residuals from an ordinary least squares fit
/// of outcome on covariates (treatment excluded) over all matched units.
pub fn regression_adjusted_stat(sample: &Sample, design: &MatchedDesign) -> Result<f64> {
    let diffs = pair_diffs(sample, design, Statistic::RegressionAdjusted, 0.0)?;
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Per-pair statistic contributions under the observed assignment, after
/// the additive-effect adjustment. Flipping pair `k` negates entry `k`.
fn pair_diffs(
    sample: &Sample,
    design: &MatchedDesign,
    statistic: Statistic,
    tau: f64,
) -> Result<Vec<f64>> {
    if design.pairs.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let index = sample.id_index();
    let mut matched: Vec<(usize, usize)> = Vec::with_capacity(design.pairs.len());
    for p in &design.pairs {
        let t = *index
            .get(p.treated.as_str())
            .ok_or_else(|| Error::UnknownUnit { id: p.treated.clone() })?;
        let c = *index
            .get(p.control.as_str())
            .ok_or_else(|| Error::UnknownUnit { id: p.control.clone() })?;
        matched.push((t, c));
    }
    let adjusted = |i: usize| -> Result<f64> {
        let u = &sample.units[i];
        let y = u.outcome.ok_or_else(|| Error::MissingOutcome { id: u.id.clone() })?;
        Ok(y - tau * u.treatment as f64)
    };
    match statistic {
        Statistic::DiffInMeans => matched
            .iter()
            .map(|&(t, c)| Ok(adjusted(t)? - adjusted(c)?))
            .collect(),
        Statistic::RegressionAdjusted => {
            let units: Vec<usize> = matched.iter().flat_map(|&(t, c)| [t, c]).collect();
            let residual = fit_residuals(sample, &units, &adjusted)?;
            Ok(matched
                .iter()
                .map(|&(t, c)| residual[&t] - residual[&c])
                .collect())
        }
    }
}

/// OLS of adjusted outcome on covariates with an intercept, returning
/// per-unit residuals for the listed units.
fn fit_residuals(
    sample: &Sample,
    units: &[usize],
    adjusted: &dyn Fn(usize) -> Result<f64>,
) -> Result<std::collections::HashMap<usize, f64>> {
    let p = sample.units[units[0]].covariates.len();
    let dim = p + 1;
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![0.0; dim];
    for &i in units {
        let mut row = Vec::with_capacity(dim);
        row.push(1.0);
        row.extend_from_slice(&sample.units[i].covariates);
        let y = adjusted(i)?;
        for a in 0..dim {
            xty[a] += row[a] * y;
            for b in 0..dim {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let beta = crate::propensity::solve_symmetric(xtx, xty, "outcome regression")?;
    units
        .iter()
        .map(|&i| {
            let fitted = beta[0]
                + sample.units[i]
                    .covariates
                    .iter()
                    .zip(&beta[1..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            Ok((i, adjusted(i)? - fitted))
        })
        .collect()
}

/// Null distribution machinery for one method, built once per design and
/// reusable across statistics and effect offsets.
pub struct NullModel {
    method: Method,
    k: usize,
    /// Covariate-adaptive per-pair flip probabilities.
    cov_flip: Vec<f64>,
    match_ctx: Option<(PermuterContext, AssignmentDistribution)>,
}

impl NullModel {
    pub fn build(
        method: Method,
        sample: &Sample,
        design: &MatchedDesign,
        caliper: Option<f64>,
    ) -> Result<Self> {
        let k = design.pairs.len();
        if k == 0 {
            return Err(Error::EmptyDesign);
        }
        let mut cov_flip = Vec::new();
        let mut match_ctx = None;
        match method {
            Method::Uniform => {}
            Method::CovariateAdaptive => {
                let view = DesignView::from_design(sample, design)?;
                for p in &view.pairs {
                    cov_flip.push(pair_probabilities(p.treated_score, p.control_score)?.p2);
                }
            }
            Method::MatchAdaptive => {
                let view = DesignView::from_design(sample, design)?;
                let ctx = PermuterContext::build(&view, caliper)?;
                let dist = build_distribution(&ctx, DEFAULT_ENUM_CAP)?;
                match_ctx = Some((ctx, dist));
            }
        }
        Ok(NullModel {
            method,
            k,
            cov_flip,
            match_ctx,
        })
    }

    /// Support size when enumerable.
    pub fn support_size(&self) -> Option<u128> {
        match self.method {
            Method::Uniform | Method::CovariateAdaptive => {
                (self.k < 100).then(|| 1u128 << self.k)
            }
            Method::MatchAdaptive => {
                let (ctx, dist) = self.match_ctx.as_ref().unwrap();
                support_size(ctx, dist)
            }
        }
    }

    /// The full null distribution over pair-flip patterns, when it fits
    /// under the cap.
    pub fn enumerate(&self, cap: u128) -> Result<Option<GlobalSupport>> {
        let Some(size) = self.support_size() else {
            return Ok(None);
        };
        if size > cap {
            return Ok(None);
        }
        match self.method {
            Method::Uniform => {
                let n = 1usize << self.k;
                let prob = 1.0 / n as f64;
                Ok(Some(GlobalSupport {
                    pair_flips: (0..n).map(|m| mask_to_flips(m, self.k)).collect(),
                    probabilities: vec![prob; n],
                }))
            }
            Method::CovariateAdaptive => {
                let n = 1usize << self.k;
                let mut pair_flips = Vec::with_capacity(n);
                let mut probabilities = Vec::with_capacity(n);
                for m in 0..n {
                    let flips = mask_to_flips(m, self.k);
                    let prob = flips
                        .iter()
                        .enumerate()
                        .map(|(j, &f)| if f { self.cov_flip[j] } else { 1.0 - self.cov_flip[j] })
                        .product();
                    pair_flips.push(flips);
                    probabilities.push(prob);
                }
                Ok(Some(GlobalSupport {
                    pair_flips,
                    probabilities,
                }))
            }
            Method::MatchAdaptive => {
                let (ctx, dist) = self.match_ctx.as_ref().unwrap();
                global_support(ctx, dist, cap)
            }
        }
    }

    /// One Monte Carlo draw of pair flips into `flips`.
    pub fn draw(&self, seed: u64, draw_idx: u64, flips: &mut [bool], scratch: &mut Vec<bool>) {
        use rand::Rng;
        match self.method {
            Method::Uniform => {
                let mut rng = keyed_rng(seed, &[STREAM_PAIR_FLIPS, 0, draw_idx]);
                for f in flips.iter_mut() {
                    *f = rng.gen_bool(0.5);
                }
            }
            Method::CovariateAdaptive => {
                let mut rng = keyed_rng(seed, &[STREAM_PAIR_FLIPS, 1, draw_idx]);
                for (f, &p) in flips.iter_mut().zip(&self.cov_flip) {
                    *f = rng.gen::<f64>() < p;
                }
            }
            Method::MatchAdaptive => {
                let (ctx, dist) = self.match_ctx.as_ref().unwrap();
                sample_pair_flips(ctx, dist, seed, draw_idx, flips, scratch);
            }
        }
    }
}

fn mask_to_flips(mask: usize, k: usize) -> Vec<bool> {
    (0..k).map(|b| mask >> b & 1 == 1).collect()
}

/// Runs a randomization test against the chosen null distribution.
pub fn randomization_test(
    spec: &TestSpec,
    sample: &Sample,
    design: &MatchedDesign,
    caliper: Option<f64>,
    seed: u64,
) -> Result<TestResult> {
    let null = NullModel::build(spec.method, sample, design, caliper)?;
    run_test(spec, &null, sample, design, seed)
}

/// Test with a prebuilt null model (used when inverting over a grid).
pub fn run_test(
    spec: &TestSpec,
    null: &NullModel,
    sample: &Sample,
    design: &MatchedDesign,
    seed: u64,
) -> Result<TestResult> {
    let diffs = pair_diffs(sample, design, spec.statistic, spec.tau)?;
    let k = diffs.len() as f64;
    let base_sum: f64 = diffs.iter().sum();
    let observed = base_sum / k;
    let stat_of = |flips: &[bool]| -> f64 {
        let flipped: f64 = flips
            .iter()
            .zip(&diffs)
            .filter(|&(&f, _)| f)
            .map(|(_, d)| d)
            .sum();
        (base_sum - 2.0 * flipped) / k
    };
    let extreme = |t: f64| match spec.sidedness {
        Sidedness::Greater => t >= observed,
        Sidedness::Less => t <= observed,
    };

    if let Some(support) = null.enumerate(spec.exact_cap)? {
        let mut p_value = 0.0;
        let mut null_mean = 0.0;
        for (flips, &prob) in support.pair_flips.iter().zip(&support.probabilities) {
            let t = stat_of(flips);
            null_mean += prob * t;
            if extreme(t) {
                p_value += prob;
            }
        }
        return Ok(TestResult {
            observed,
            null_mean,
            p_value,
            exact: true,
            draws_used: 0,
            support_size: null.support_size(),
        });
    }

    let mut flips = vec![false; diffs.len()];
    let mut scratch = Vec::new();
    let mut hits = 0usize;
    let mut total = 0.0;
    for d in 0..spec.n_draws {
        null.draw(seed, d as u64, &mut flips, &mut scratch);
        let t = stat_of(&flips);
        total += t;
        if extreme(t) {
            hits += 1;
        }
    }
    Ok(TestResult {
        observed,
        null_mean: total / spec.n_draws as f64,
        p_value: (1 + hits) as f64 / (1 + spec.n_draws) as f64,
        exact: false,
        draws_used: spec.n_draws,
        support_size: null.support_size(),
    })
}

/// Confidence set by test inversion over a grid of constant additive
/// effects: the tau values whose test does not reject at `alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceInterval {
    pub retained: Vec<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub contiguous: bool,
}

pub fn confidence_interval(
    spec: &TestSpec,
    sample: &Sample,
    design: &MatchedDesign,
    caliper: Option<f64>,
    tau_grid: &[f64],
    seed: u64,
) -> Result<ConfidenceInterval> {
    if tau_grid.is_empty() {
        return Err(Error::Parse("empty tau grid".into()));
    }
    let null = NullModel::build(spec.method, sample, design, caliper)?;
    let mut retained = Vec::new();
    let mut kept_flags = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let spec_tau = TestSpec { tau, ..*spec };
        let result = run_test(&spec_tau, &null, sample, design, seed)?;
        let keep = result.p_value > spec.alpha;
        kept_flags.push(keep);
        if keep {
            retained.push(tau);
        }
    }
    let first = kept_flags.iter().position(|&k| k);
    let last = kept_flags.iter().rposition(|&k| k);
    let contiguous = match (first, last) {
        (Some(a), Some(b)) => kept_flags[a..=b].iter().all(|&k| k),
        _ => true,
    };
    Ok(ConfidenceInterval {
        lower: retained.first().copied(),
        upper: retained.last().copied(),
        retained,
        contiguous,
    })
}

/// Default inversion grid: 201 equispaced points spanning the observed
/// statistic plus or minus four standard deviations of the pair
/// differences.
pub fn default_tau_grid(sample: &Sample, design: &MatchedDesign, statistic: Statistic) -> Result<Vec<f64>> {
    let diffs = pair_diffs(sample, design, statistic, 0.0)?;
    let k = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / k;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        1.0
    };
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    let span = 4.0 * sd;
    let points = 201;
    Ok((0..points)
        .map(|i| mean - span + 2.0 * span * i as f64 / (points - 1) as f64)
        .collect())
}

/// The full covariate-adaptive null distribution over all within-pair
/// flips of a design; exactly enumerable only for small pair counts.
pub fn covariate_adaptive_distribution(
    sample: &Sample,
    design: &MatchedDesign,
) -> Result<GlobalSupport> {
    let null = NullModel::build(Method::CovariateAdaptive, sample, design, None)?;
    null.enumerate(u128::MAX)?
        .ok_or_else(|| Error::SizeCapExceeded {
            what: "covariate-adaptive enumeration",
            got: design.pairs.len(),
            cap: 127,
        })
}
