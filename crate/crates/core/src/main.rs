//! Command-line front end: ingestion, matching, structural audit,
//! inference, oracle checks, and the simulation study, with every run
//! replayable from the configuration embedded in its output.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use matchadapt::csvio;
use matchadapt::error::Error;
use matchadapt::inference::{self, Method, Sidedness, Statistic, TestSpec};
use matchadapt::matcher::{self, MatchProblem};
use matchadapt::model::{jitter_ties, Sample};
use matchadapt::oracle;
use matchadapt::permuter::{self, PermuterContext, DEFAULT_ENUM_CAP};
use matchadapt::propensity;
use matchadapt::simulate::{self, ModelForm, SimConfig};
use matchadapt::structure::{self, DesignView};

#[derive(Parser)]
#[command(name = "matchadapt", version, about = "Matched designs with match-adaptive randomization inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct an optimal (optionally calipered, optionally stratified)
    /// pair match and write the design.
    Match(MatchArgs),
    /// Structural audit of an existing design: overlap graph, components,
    /// meta-components.
    Audit(AuditArgs),
    /// Randomization test of a sharp null on a matched design.
    Infer(InferArgs),
    /// Confidence interval by inverting the randomization test over a grid
    /// of constant additive effects.
    Ci(CiArgs),
    /// Compare the permuter's support against the brute-force re-matching
    /// oracle.
    OracleCheck(OracleArgs),
    /// Type I error simulation study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScoreSource {
    /// Use the `score` column when present for all units, otherwise fit.
    Auto,
    /// Require the `score` column.
    Column,
    /// Fit a logistic propensity model on x1..xp.
    Fit,
}

#[derive(Args, Serialize)]
struct MatchArgs {
    #[arg(long)]
    input: PathBuf,
    /// Design CSV output path.
    #[arg(long)]
    output: PathBuf,
    /// Also write the structural audit JSON here.
    #[arg(long)]
    structure: Option<PathBuf>,
    #[arg(long)]
    caliper: Option<f64>,
    /// Match separately within the `stratum` column.
    #[arg(long)]
    strata: bool,
    #[arg(long, value_enum, default_value = "auto")]
    scores: ScoreSource,
    /// Write the fitted propensity model (plain text) here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Seed for tie-breaking jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct AuditArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    caliper: Option<f64>,
    /// Export the global support with exact probabilities (small designs).
    #[arg(long)]
    export_support: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    support_cap: u128,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Uniform,
    CovAdaptive,
    MatchAdaptive,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Uniform => Method::Uniform,
            MethodArg::CovAdaptive => Method::CovariateAdaptive,
            MethodArg::MatchAdaptive => Method::MatchAdaptive,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StatisticArg {
    DiffMeans,
    Regression,
}

impl From<StatisticArg> for Statistic {
    fn from(s: StatisticArg) -> Statistic {
        match s {
            StatisticArg::DiffMeans => Statistic::DiffInMeans,
            StatisticArg::Regression => Statistic::RegressionAdjusted,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SideArg {
    Greater,
    Less,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    design: PathBuf,
    #[arg(long, value_enum, default_value = "match-adaptive")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "diff-means")]
    statistic: StatisticArg,
    #[arg(long, value_enum, default_value = "greater")]
    side: SideArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 50_000)]
    n_draws: usize,
    /// Constant additive effect under test.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Caliper the design was matched under, if any.
    #[arg(long)]
    caliper: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "auto")]
    scores: ScoreSource,
    /// Enumerate the null exactly when its support is at most this big.
    #[arg(long, default_value_t = 10_000)]
    exact_cap: u128,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Export the null support with exact probabilities (small designs).
    #[arg(long)]
    export_support: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CiArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    grid_min: Option<f64>,
    #[arg(long)]
    grid_max: Option<f64>,
    #[arg(long, default_value_t = 201)]
    grid_points: usize,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    caliper: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    scores: ScoreSource,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1_000)]
    replications: usize,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, value_enum, default_value = "linear")]
    z_model: ModelForm,
    #[arg(long, value_enum, default_value = "linear")]
    y_model: ModelForm,
    #[arg(long)]
    caliper: bool,
    #[arg(long, value_enum, default_value = "diff-means")]
    statistic: StatisticArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 999)]
    n_draws: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(args) => cmd_match(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Ci(args) => cmd_ci(args),
        Command::OracleCheck(args) => cmd_oracle_check(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Resolves propensity scores per the requested source, fitting a logistic
/// model when needed.
fn resolve_scores(
    sample: Sample,
    source: ScoreSource,
    model_out: Option<&PathBuf>,
) -> Result<Sample, Error> {
    let have_all = sample.units.iter().all(|u| u.score.is_some());
    let use_column = match source {
        ScoreSource::Column => {
            if !have_all {
                return Err(Error::Parse(
                    "score column required but missing for some units".into(),
                ));
            }
            true
        }
        ScoreSource::Auto => have_all && !sample.units.is_empty(),
        ScoreSource::Fit => false,
    };
    if use_column {
        return Ok(sample);
    }
    let covariates: Vec<Vec<f64>> = sample.units.iter().map(|u| u.covariates.clone()).collect();
    if covariates.first().map_or(true, |c| c.is_empty()) {
        return Err(Error::Parse(
            "cannot fit a propensity model without covariate columns; provide a score column"
                .into(),
        ));
    }
    let z: Vec<u8> = sample.units.iter().map(|u| u.treatment).collect();
    let model = propensity::fit_logistic(
        &covariates,
        &z,
        propensity::DEFAULT_MAX_ITER,
        propensity::DEFAULT_TOL,
    )?;
    if let Some(path) = model_out {
        let mut file = std::fs::File::create(path)?;
        propensity::write_model(&mut file, &model)?;
    }
    let mut sample = sample;
    for u in &mut sample.units {
        u.score = Some(propensity::predict(&model, &u.covariates)?);
    }
    Ok(sample)
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn json_document(config: serde_json::Value, result: serde_json::Value, started: Instant) -> String {
    let doc = json!({
        "config": config,
        "result": result,
        "runtime_ms": started.elapsed().as_millis() as u64,
    });
    format!("{}\n", serde_json::to_string_pretty(&doc).unwrap())
}

fn cmd_match(args: MatchArgs) -> Result<ExitCode, Error> {
    let started = Instant::now();
    let sample = csvio::read_sample_path(&args.input)?;
    let sample = resolve_scores(sample, args.scores, args.model_out.as_ref())?;
    let sample = jitter_ties(sample, 1e-9, args.seed)?;

    let problem = MatchProblem {
        sample: &sample,
        caliper: args.caliper,
        use_strata: args.strata,
    };
    let design = if args.strata {
        matcher::match_within_strata(&problem)?
    } else if args.caliper.is_some() {
        matcher::optimal_pair_match_caliper(&problem)?
    } else {
        matcher::optimal_pair_match(&problem)?
    };

    let mut out = Vec::new();
    csvio::write_design(&mut out, &design)?;
    let config = serde_json::to_value(&args).unwrap();
    out.extend_from_slice(format!("# config {}\n", serde_json::to_string(&config).unwrap()).as_bytes());
    std::fs::write(&args.output, &out)?;

    if let Some(path) = &args.structure {
        let (_, report) = structural_report(&sample, &design)?;
        let doc = json_document(config, serde_json::to_value(&report).unwrap(), started);
        std::fs::write(path, doc)?;
    }
    eprintln!(
        "matched {} pairs, {} unmatched, objective {:.6}",
        design.pairs.len(),
        design.unmatched.len(),
        design.objective
    );
    Ok(ExitCode::SUCCESS)
}

fn structural_report(
    sample: &Sample,
    design: &matchadapt::MatchedDesign,
) -> Result<(DesignView, structure::StructureReport), Error> {
    let view = DesignView::from_design(sample, design)?;
    let graph = structure::build_overlap_graph(&view)?;
    let comps = structure::connected_components(&graph, &view)?;
    let metas = structure::build_meta_components(&view, &comps);
    let report = structure::structure_report(&view, &graph, &comps, &metas);
    Ok((view, report))
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode, Error> {
    let started = Instant::now();
    let sample = csvio::read_sample_path(&args.input)?;
    let design = csvio::read_design_path(&args.design)?;
    let (view, report) = structural_report(&sample, &design)?;
    if let Some(path) = &args.export_support {
        let ctx = PermuterContext::build(&view, args.caliper)?;
        let dist = permuter::build_distribution(&ctx, DEFAULT_ENUM_CAP)?;
        match permuter::global_support(&ctx, &dist, args.support_cap)? {
            Some(support) => {
                let entries: Vec<serde_json::Value> = support
                    .pair_flips
                    .iter()
                    .zip(&support.probabilities)
                    .map(|(flips, prob)| json!({ "flips": flips, "probability": prob }))
                    .collect();
                std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(&entries).unwrap()))?;
            }
            None => eprintln!("support exceeds the export cap; skipped"),
        }
    }
    let doc = json_document(
        serde_json::to_value(&args).unwrap(),
        serde_json::to_value(&report).unwrap(),
        started,
    );
    write_output(Some(&args.output), &doc)?;
    Ok(ExitCode::SUCCESS)
}

fn infer_spec(args: &InferArgs) -> TestSpec {
    TestSpec {
        statistic: args.statistic.into(),
        method: args.method.into(),
        sidedness: match args.side {
            SideArg::Greater => Sidedness::Greater,
            SideArg::Less => Sidedness::Less,
        },
        n_draws: args.n_draws,
        alpha: args.alpha,
        tau: args.tau,
        exact_cap: args.exact_cap,
    }
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, Error> {
    let started = Instant::now();
    let sample = csvio::read_sample_path(&args.input)?;
    let sample = resolve_scores(sample, args.scores, None)?;
    let design = csvio::read_design_path(&args.design)?;
    let spec = infer_spec(&args);
    let result = inference::randomization_test(&spec, &sample, &design, args.caliper, args.seed)?;

    if let Some(path) = &args.export_support {
        let null = inference::NullModel::build(spec.method, &sample, &design, args.caliper)?;
        match null.enumerate(args.exact_cap)? {
            Some(support) => {
                let entries: Vec<serde_json::Value> = support
                    .pair_flips
                    .iter()
                    .zip(&support.probabilities)
                    .map(|(flips, prob)| json!({ "flips": flips, "probability": prob }))
                    .collect();
                std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(&entries).unwrap()))?;
            }
            None => eprintln!("support too large to export; skipped"),
        }
    }

    let result_json = json!({
        "method": args.method,
        "statistic": args.statistic,
        "sidedness": args.side,
        "observed": result.observed,
        "null_mean": result.null_mean,
        "p_value": result.p_value,
        "exact": result.exact,
        "n_draws": result.draws_used,
        "support_size": result.support_size.map(|s| s.to_string()),
        "seed": args.seed,
    });
    let doc = json_document(serde_json::to_value(&args).unwrap(), result_json, started);
    write_output(args.output.as_ref(), &doc)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_ci(args: CiArgs) -> Result<ExitCode, Error> {
    let started = Instant::now();
    let sample = csvio::read_sample_path(&args.infer.input)?;
    let sample = resolve_scores(sample, args.infer.scores, None)?;
    let design = csvio::read_design_path(&args.infer.design)?;
    let spec = infer_spec(&args.infer);

    let grid = match (args.grid_min, args.grid_max) {
        (Some(lo), Some(hi)) => {
            if args.grid_points < 2 || !(hi > lo) {
                return Err(Error::Parse("need grid-min < grid-max and at least 2 points".into()));
            }
            (0..args.grid_points)
                .map(|i| lo + (hi - lo) * i as f64 / (args.grid_points - 1) as f64)
                .collect()
        }
        _ => inference::default_tau_grid(&sample, &design, spec.statistic)?,
    };
    let ci = inference::confidence_interval(&spec, &sample, &design, args.infer.caliper, &grid, args.infer.seed)?;
    let result_json = json!({
        "alpha": spec.alpha,
        "grid_size": grid.len(),
        "grid_min": grid.first(),
        "grid_max": grid.last(),
        "lower": ci.lower,
        "upper": ci.upper,
        "contiguous": ci.contiguous,
        "n_retained": ci.retained.len(),
        "seed": args.infer.seed,
    });
    let doc = json_document(serde_json::to_value(&args).unwrap(), result_json, started);
    write_output(args.infer.output.as_ref(), &doc)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check(args: OracleArgs) -> Result<ExitCode, Error> {
    let started = Instant::now();
    let sample = csvio::read_sample_path(&args.input)?;
    let sample = resolve_scores(sample, args.scores, None)?;
    let design = csvio::read_design_path(&args.design)?;
    let report = oracle::check_agreement(&sample, &design, args.caliper)?;
    let result_json = json!({
        "pass": report.pass,
        "k": report.k,
        "oracle_support_size": report.oracle_support_size,
        "permuter_support_size": report.permuter_support_size,
        "first_mismatch": report.first_mismatch.map(|m| {
            (0..report.k).map(|b| m >> b & 1 == 1).collect::<Vec<bool>>()
        }),
        "max_probability_diff": report.max_probability_diff,
    });
    let doc = json_document(serde_json::to_value(&args).unwrap(), result_json, started);
    write_output(args.output.as_ref(), &doc)?;
    if report.pass {
        eprintln!("PASS: support size {}", report.oracle_support_size);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "FAIL: oracle {} vs permuter {} (first mismatch {:?})",
            report.oracle_support_size, report.permuter_support_size, report.first_mismatch
        );
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let config = SimConfig {
        n: args.n,
        z_model: args.z_model,
        y_model: args.y_model,
        caliper: args.caliper,
        use_true_propensity: false,
        statistic: args.statistic.into(),
        replications: args.replications,
        master_seed: args.seed,
        n_draws: args.n_draws,
        alpha: args.alpha,
        effect: 0.0,
    };
    let rows = simulate::type_one_error_table(std::slice::from_ref(&config))?;
    let mut out = String::new();
    out.push_str(&format!(
        "# config {}\n",
        serde_json::to_string(&serde_json::to_value(&args).unwrap()).unwrap()
    ));
    out.push_str("y_model,z_model,caliper,regression,method,score_source,rejections,replications_used,excluded,rate,se\n");
    for r in &rows {
        out.push_str(&format!(
            "{:?},{:?},{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.y_model,
            r.z_model,
            r.caliper,
            r.regression,
            r.method,
            r.score_source,
            r.rejections,
            r.replications_used,
            r.excluded,
            r.rate,
            r.se
        ));
    }
    match &args.output {
        Some(p) => std::fs::write(p, &out)?,
        None => {
            std::io::stdout().write_all(out.as_bytes())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
