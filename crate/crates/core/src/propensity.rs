//! Propensity model fitting and within-pair assignment odds.
//!
//! The logistic fit is iteratively reweighted least squares with
//! step-halving, converged when the largest score-equation component falls
//! below the tolerance. Fitted probabilities are clamped to
//! `[1e-12, 1 - 1e-12]` so the odds in the pair probabilities stay finite.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Fitted logistic propensity model; `coefficients[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Renormalized within-pair assignment probabilities: the chance each member
/// of a matched pair is the treated one, given exactly one of them is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairProbabilities {
    pub p1: f64,
    pub p2: f64,
}

/// Maximizes the binomial log-likelihood by IRLS with step-halving.
pub fn fit_logistic(
    covariates: &[Vec<f64>],
    treatment: &[u8],
    max_iter: usize,
    tol: f64,
) -> Result<PropensityModel> {
    let n = covariates.len();
    assert_eq!(n, treatment.len(), "covariate and treatment lengths differ");
    let p = covariates.first().map_or(0, Vec::len);
    let dim = p + 1;
    if n <= dim {
        return Err(Error::TooFewObservations { n, p1: dim });
    }
    for row in covariates {
        assert_eq!(row.len(), p, "ragged covariate matrix");
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse("non-finite covariate in logistic fit".into()));
        }
    }

    let mut beta = vec![0.0; dim];
    let mut eta = vec![0.0; n];
    let mut mu = vec![0.5; n];
    let mut loglik = log_likelihood(&eta, treatment);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;

        // Score equation components g = X'(z - mu).
        let mut grad = vec![0.0; dim];
        for i in 0..n {
            let r = treatment[i] as f64 - mu[i];
            grad[0] += r;
            for j in 0..p {
                grad[j + 1] += covariates[i][j] * r;
            }
        }
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad < tol {
            converged = true;
            break;
        }
        detect_separation(&beta, &mu, treatment)?;

        // Weighted normal equations (X'WX) delta = g with W = mu(1-mu).
        let mut xtwx = vec![vec![0.0; dim]; dim];
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            let mut row = Vec::with_capacity(dim);
            row.push(1.0);
            row.extend_from_slice(&covariates[i]);
            for a in 0..dim {
                for b in a..dim {
                    xtwx[a][b] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                xtwx[a][b] = xtwx[b][a];
            }
        }
        let delta = solve_symmetric(xtwx, grad.clone(), "weighted logistic design")?;

        // Step-halving: insist the likelihood does not decrease. A slack at
        // the scale of floating-point resolution lets the final Newton
        // steps through, where the likelihood is flat but the score
        // equations still shrink quadratically.
        let slack = 1e-10 * (1.0 + loglik.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(delta.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            let (cand_eta, cand_mu) = linear_predictor(covariates, &cand);
            let cand_ll = log_likelihood(&cand_eta, treatment);
            if cand_ll >= loglik - slack {
                beta = cand;
                eta = cand_eta;
                mu = cand_mu;
                loglik = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    detect_separation(&beta, &mu, treatment)?;
    let _ = eta;
    Ok(PropensityModel {
        coefficients: beta,
        converged,
        iterations,
    })
}

/// Separation: fitted probabilities pinned at the boundary together with a
/// (near-)perfect fit or runaway coefficients.
fn detect_separation(beta: &[f64], mu: &[f64], z: &[u8]) -> Result<()> {
    let saturated = mu.iter().any(|&m| m < 1e-10 || m > 1.0 - 1e-10);
    if !saturated {
        return Ok(());
    }
    let perfect = mu
        .iter()
        .zip(z.iter())
        .all(|(&m, &zi)| (zi as f64 - m).abs() < 1e-6);
    let diverging = beta.iter().any(|b| b.abs() > 1e3);
    if perfect || diverging {
        return Err(Error::Separation);
    }
    Ok(())
}

fn linear_predictor(covariates: &[Vec<f64>], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let eta: Vec<f64> = covariates
        .iter()
        .map(|row| beta[0] + row.iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>())
        .collect();
    let mu = eta.iter().map(|&e| inv_logit(e)).collect();
    (eta, mu)
}

fn log_likelihood(eta: &[f64], z: &[u8]) -> f64 {
    eta.iter()
        .zip(z.iter())
        .map(|(&e, &zi)| {
            // z*eta - log(1 + exp(eta)), computed stably.
            zi as f64 * e - (e.max(0.0) + (-e.abs()).exp().ln_1p())
        })
        .sum()
}

fn inv_logit(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let ex = eta.exp();
        ex / (1.0 + ex)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Gaussian elimination with partial pivoting for the small symmetric
/// systems used in fitting.
pub(crate) fn solve_symmetric(
    mut a: Vec<Vec<f64>>,
    mut b: Vec<f64>,
    context: &'static str,
) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1.0);
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot < 1e-12 * scale {
            return Err(Error::SingularSystem {
                context: context.to_string(),
            });
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col][c] * x[c];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Inverse-logit of the linear predictor, clamped away from {0, 1}.
pub fn predict(model: &PropensityModel, covariates: &[f64]) -> Result<f64> {
    let expected = model.coefficients.len() - 1;
    if covariates.len() != expected {
        return Err(Error::PredictLengthMismatch {
            got: covariates.len(),
            expected,
        });
    }
    let eta = model.coefficients[0]
        + covariates
            .iter()
            .zip(&model.coefficients[1..])
            .map(|(x, b)| x * b)
            .sum::<f64>();
    Ok(inv_logit(eta))
}

/// Within-pair treated-assignment probabilities from two propensity scores:
/// `p_j = eta_j / (eta_1 + eta_2)` with `eta_j = lambda_j / (1 - lambda_j)`.
pub fn pair_probabilities(lambda1: f64, lambda2: f64) -> Result<PairProbabilities> {
    for (i, l) in [lambda1, lambda2].into_iter().enumerate() {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::ScoreOutOfRange {
                id: format!("pair member {}", i + 1),
                value: l,
            });
        }
    }
    let eta1 = lambda1 / (1.0 - lambda1);
    let eta2 = lambda2 / (1.0 - lambda2);
    let total = eta1 + eta2;
    Ok(PairProbabilities {
        p1: eta1 / total,
        p2: eta2 / total,
    })
}

/// Plain-text model export: one coefficient per line.
pub fn write_model<W: Write>(mut writer: W, model: &PropensityModel) -> Result<()> {
    writeln!(
        writer,
        "# logistic propensity model; converged={} iterations={}",
        model.converged, model.iterations
    )?;
    for c in &model.coefficients {
        writeln!(writer, "{c:?}")?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(reader: R) -> Result<PropensityModel> {
    let mut coefficients = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for line in reader.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            for token in rest.split_whitespace() {
                if let Some(v) = token.strip_prefix("converged=") {
                    converged = v == "true";
                } else if let Some(v) = token.strip_prefix("iterations=") {
                    iterations = v.parse().unwrap_or(0);
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        coefficients.push(
            line.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad coefficient `{line}`")))?,
        );
    }
    if coefficients.is_empty() {
        return Err(Error::Parse("model file has no coefficients".into()));
    }
    Ok(PropensityModel {
        coefficients,
        converged,
        iterations,
    })
}
