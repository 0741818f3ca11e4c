//! Type I error study at desk scale: data generation under a true null,
//! propensity fitting, matching, and rejection rates for uniform,
//! covariate-adaptive, and match-adaptive inference with estimated and true
//! propensity scores.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{randomization_test, Method, Sidedness, Statistic, TestSpec};
use crate::matcher::{optimal_pair_match, optimal_pair_match_caliper, MatchProblem};
use crate::model::{jitter_ties, Sample, Unit};
use crate::propensity::{fit_logistic, predict, DEFAULT_MAX_ITER, DEFAULT_TOL, PROB_CLAMP};
use crate::rng::{keyed_rng, STREAM_DATASET, STREAM_JITTER, STREAM_REPLICATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelForm {
    Linear,
    Nonlinear,
}

/// One simulation cell.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub n: usize,
    pub z_model: ModelForm,
    pub y_model: ModelForm,
    /// When set, matches under a caliper of 0.2 standard deviations of the
    /// scores used for matching, strictly enforced.
    pub caliper: bool,
    /// Skip fitting and carry the analytic propensity through the whole
    /// pipeline (matching, support, and permutation probabilities).
    pub use_true_propensity: bool,
    pub statistic: Statistic,
    pub replications: usize,
    pub master_seed: u64,
    pub n_draws: usize,
    pub alpha: f64,
    /// Constant additive effect added to treated outcomes (zero under the
    /// null); tests run with the matching `tau` offset when inverting.
    pub effect: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 500,
            z_model: ModelForm::Linear,
            y_model: ModelForm::Linear,
            caliper: false,
            use_true_propensity: false,
            statistic: Statistic::DiffInMeans,
            replications: 1_000,
            master_seed: 0,
            n_draws: 999,
            alpha: 0.05,
            effect: 0.0,
        }
    }
}

/// Linear predictor of the treatment model.
pub fn treatment_logit(model: ModelForm, x1: f64, x2: f64) -> f64 {
    match model {
        ModelForm::Linear => 0.1 + 0.7 * x1 - 0.4 * x2,
        ModelForm::Nonlinear => 0.2 + 0.7 * x1 - 0.4 * x2 + x1.abs().ln() - 0.5 * x2 * x2,
    }
}

/// Mean outcome surface (noise excluded).
pub fn outcome_mean(model: ModelForm, x1: f64, x2: f64) -> f64 {
    match model {
        ModelForm::Linear => x1 + 2.0 * x2,
        ModelForm::Nonlinear => 4.0 * x1.abs().powi(3) + 6.0 * x1.sin() + 2.0 * x2,
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// A generated dataset: the sample (scores unset) and the true propensity
/// of each unit.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub sample: Sample,
    pub true_propensity: Vec<f64>,
}

/// Draws covariates, treatments, and outcomes for one replication.
/// X1 has variance 5, X2 variance 1, both mean zero; treatment follows the
/// chosen logit; outcomes get standard normal noise.
pub fn generate_dataset(config: &SimConfig, rep: u64) -> GeneratedData {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut rng = keyed_rng(config.master_seed, &[STREAM_DATASET, rep]);
    let x1_dist = Normal::new(0.0, 5.0f64.sqrt()).unwrap();
    let x2_dist = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();

    let mut units = Vec::with_capacity(config.n);
    let mut true_propensity = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let x1 = x1_dist.sample(&mut rng);
        let x2 = x2_dist.sample(&mut rng);
        let lambda = clamp_prob(logistic(treatment_logit(config.z_model, x1, x2)));
        let z = u8::from(rng.gen::<f64>() < lambda);
        let y = outcome_mean(config.y_model, x1, x2)
            + noise.sample(&mut rng)
            + config.effect * z as f64;
        units.push(Unit {
            id: format!("u{i}"),
            treatment: z,
            outcome: Some(y),
            covariates: vec![x1, x2],
            score: None,
        });
        true_propensity.push(lambda);
    }
    GeneratedData {
        sample: Sample::new(units),
        true_propensity,
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Per-replication rejection indicators, one per inference method and
/// propensity-score source.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplicationOutcome {
    pub rejected_uniform: bool,
    pub rejected_cov_estimated: bool,
    pub rejected_cov_true: bool,
    pub rejected_match_estimated: bool,
    pub rejected_match_true: bool,
    /// Logistic separation (or a singular fit): the replication is flagged
    /// and excluded from the estimated-score columns.
    pub excluded_estimated: bool,
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// One full replication: generate, fit (or take the true propensity),
/// jitter, match, and test at `alpha` against the greater alternative.
pub fn run_replication(config: &SimConfig, rep: u64) -> Result<ReplicationOutcome> {
    let data = generate_dataset(config, rep);
    let jitter_seed = {
        use rand::Rng;
        keyed_rng(config.master_seed, &[STREAM_JITTER, rep]).gen()
    };
    let mut out = ReplicationOutcome::default();

    // Estimated-score pipeline, skipped in true-propensity-only mode.
    if !config.use_true_propensity {
        match fit_scores(&data.sample) {
            Err(Error::Separation) | Err(Error::SingularSystem { .. }) => {
                out.excluded_estimated = true;
            }
            Err(e) => return Err(e),
            Ok(scores) => {
                let (uniform, cov, mat) =
                    pipeline(config, &data.sample, scores, jitter_seed, rep, 0)?;
                out.rejected_uniform = uniform;
                out.rejected_cov_estimated = cov;
                out.rejected_match_estimated = mat;
            }
        }
    }

    // True-score pipeline: the analytic propensity everywhere.
    let (_, cov, mat) = pipeline(
        config,
        &data.sample,
        data.true_propensity.clone(),
        jitter_seed,
        rep,
        1,
    )?;
    out.rejected_cov_true = cov;
    out.rejected_match_true = mat;
    Ok(out)
}

fn fit_scores(sample: &Sample) -> Result<Vec<f64>> {
    let covariates: Vec<Vec<f64>> = sample.units.iter().map(|u| u.covariates.clone()).collect();
    let z: Vec<u8> = sample.units.iter().map(|u| u.treatment).collect();
    let model = fit_logistic(&covariates, &z, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    sample
        .units
        .iter()
        .map(|u| predict(&model, &u.covariates))
        .collect()
}

/// Matches on the given scores and runs the three tests; returns rejection
/// flags for (uniform, covariate-adaptive, match-adaptive).
fn pipeline(
    config: &SimConfig,
    sample: &Sample,
    scores: Vec<f64>,
    jitter_seed: u64,
    rep: u64,
    source_tag: u64,
) -> Result<(bool, bool, bool)> {
    use rand::Rng;
    let mut scored = sample.clone();
    for (u, s) in scored.units.iter_mut().zip(&scores) {
        u.score = Some(clamp_prob(*s));
    }
    let scored = jitter_ties(scored, 1e-9, jitter_seed)?;

    let caliper = config
        .caliper
        .then(|| 0.2 * sd(&scored.units.iter().map(|u| u.score.unwrap()).collect::<Vec<_>>()));
    let problem = MatchProblem {
        sample: &scored,
        caliper,
        use_strata: false,
    };
    let design = match caliper {
        Some(_) => optimal_pair_match_caliper(&problem)?,
        None => optimal_pair_match(&problem)?,
    };
    if design.pairs.is_empty() {
        return Ok((false, false, false));
    }

    let spec = TestSpec {
        statistic: config.statistic,
        sidedness: Sidedness::Greater,
        n_draws: config.n_draws,
        alpha: config.alpha,
        tau: 0.0,
        exact_cap: 0,
        method: Method::Uniform,
    };
    let mut rng = keyed_rng(config.master_seed, &[STREAM_REPLICATION, rep, source_tag]);
    let mut test = |method: Method| -> Result<bool> {
        let seed: u64 = rng.gen();
        let r = randomization_test(&TestSpec { method, ..spec }, &scored, &design, caliper, seed)?;
        Ok(r.p_value <= config.alpha)
    };
    let uniform = test(Method::Uniform)?;
    let cov = test(Method::CovariateAdaptive)?;
    let mat = test(Method::MatchAdaptive)?;
    Ok((uniform, cov, mat))
}

/// Match-adaptive confidence interval with the true propensity scores for
/// one replication: generate, match on the analytic propensity, and invert
/// the test over `tau_grid`.
pub fn replication_ci_true(
    config: &SimConfig,
    rep: u64,
    tau_grid: &[f64],
) -> Result<crate::inference::ConfidenceInterval> {
    use rand::Rng;
    let data = generate_dataset(config, rep);
    let jitter_seed = keyed_rng(config.master_seed, &[STREAM_JITTER, rep]).gen();
    let mut scored = data.sample.clone();
    for (u, s) in scored.units.iter_mut().zip(&data.true_propensity) {
        u.score = Some(*s);
    }
    let scored = jitter_ties(scored, 1e-9, jitter_seed)?;
    let caliper = config
        .caliper
        .then(|| 0.2 * sd(&scored.units.iter().map(|u| u.score.unwrap()).collect::<Vec<_>>()));
    let problem = MatchProblem {
        sample: &scored,
        caliper,
        use_strata: false,
    };
    let design = match caliper {
        Some(_) => optimal_pair_match_caliper(&problem)?,
        None => optimal_pair_match(&problem)?,
    };
    let spec = TestSpec {
        statistic: config.statistic,
        method: Method::MatchAdaptive,
        sidedness: Sidedness::Greater,
        n_draws: config.n_draws,
        alpha: config.alpha,
        tau: 0.0,
        exact_cap: 0,
    };
    let seed: u64 = keyed_rng(config.master_seed, &[STREAM_REPLICATION, rep, 2]).gen();
    crate::inference::confidence_interval(&spec, &scored, &design, caliper, tau_grid, seed)
}

/// One row of the rejection-rate table.
#[derive(Debug, Clone, Serialize)]
pub struct TypeOneErrorRow {
    pub y_model: ModelForm,
    pub z_model: ModelForm,
    pub caliper: bool,
    pub regression: bool,
    pub method: String,
    pub score_source: String,
    pub rejections: usize,
    pub replications_used: usize,
    pub excluded: usize,
    pub rate: f64,
    pub se: f64,
}

/// Runs every config, replications in parallel, and tabulates rejection
/// rates with binomial standard errors, one row per method and score
/// source.
pub fn type_one_error_table(configs: &[SimConfig]) -> Result<Vec<TypeOneErrorRow>> {
    let mut rows = Vec::new();
    for config in configs {
        let outcomes: Vec<ReplicationOutcome> = (0..config.replications as u64)
            .into_par_iter()
            .map(|rep| run_replication(config, rep))
            .collect::<Result<Vec<_>>>()?;
        let excluded = outcomes.iter().filter(|o| o.excluded_estimated).count();
        let total = outcomes.len();
        let used_est = total - excluded;
        let mut push = |method: &str, source: &str, hits: usize, used: usize| {
            let rate = if used > 0 { hits as f64 / used as f64 } else { 0.0 };
            let se = if used > 0 {
                (rate * (1.0 - rate) / used as f64).sqrt()
            } else {
                0.0
            };
            rows.push(TypeOneErrorRow {
                y_model: config.y_model,
                z_model: config.z_model,
                caliper: config.caliper,
                regression: config.statistic == Statistic::RegressionAdjusted,
                method: method.to_string(),
                score_source: source.to_string(),
                rejections: hits,
                replications_used: used,
                excluded,
                rate,
                se,
            });
        };
        let count = |f: fn(&ReplicationOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
        push(
            "uniform",
            "none",
            count(|o| o.rejected_uniform),
            used_est,
        );
        push(
            "covariate-adaptive",
            "estimated",
            count(|o| o.rejected_cov_estimated),
            used_est,
        );
        push(
            "covariate-adaptive",
            "true",
            count(|o| o.rejected_cov_true),
            total,
        );
        push(
            "match-adaptive",
            "estimated",
            count(|o| o.rejected_match_estimated),
            used_est,
        );
        push(
            "match-adaptive",
            "true",
            count(|o| o.rejected_match_true),
            total,
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_logit_at_origin() {
        let p = logistic(treatment_logit(ModelForm::Linear, 0.0, 0.0));
        assert!((p - 0.525).abs() < 1e-3);
    }

    #[test]
    fn linear_outcome_at_ones() {
        assert_eq!(outcome_mean(ModelForm::Linear, 1.0, 1.0), 3.0);
    }

    #[test]
    fn x1_variance_is_five() {
        let config = SimConfig {
            n: 100_000,
            ..SimConfig::default()
        };
        let data = generate_dataset(&config, 0);
        let x1: Vec<f64> = data.sample.units.iter().map(|u| u.covariates[0]).collect();
        let mean = x1.iter().sum::<f64>() / x1.len() as f64;
        let var = x1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x1.len() - 1) as f64;
        assert!((var - 5.0).abs() < 0.1, "var = {var}");
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn replications_are_deterministic() {
        let config = SimConfig {
            n: 120,
            replications: 2,
            n_draws: 199,
            master_seed: 42,
            ..SimConfig::default()
        };
        let a = run_replication(&config, 0).unwrap();
        let b = run_replication(&config, 0).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn table_reruns_identically() {
        let config = SimConfig {
            n: 80,
            replications: 6,
            n_draws: 99,
            master_seed: 7,
            ..SimConfig::default()
        };
        let a = type_one_error_table(std::slice::from_ref(&config)).unwrap();
        let b = type_one_error_table(std::slice::from_ref(&config)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn true_propensity_is_stored_and_clamped() {
        let config = SimConfig {
            n: 2_000,
            z_model: ModelForm::Nonlinear,
            ..SimConfig::default()
        };
        let data = generate_dataset(&config, 3);
        assert!(data
            .true_propensity
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }
}
