//! Turning the convergence results into checks on recorded runs.
//!
//! Every function here works on finished traces; none of them touch the
//! engine. Seed-level statistics use the sample standard deviation of the
//! paired per-seed residual, so a check with `n` seeds allows
//! `3 * sd / sqrt(n)` of slack.

use serde::Serialize;

use crate::engine::RoundTrace;
use crate::error::{Error, Result};
use crate::fedmath::SmoothnessConstants;

/// Contraction factor of one round:
/// `(mu / L) * sum over admitted i of (D_i / D) * (1 - p_i)`.
///
/// `admitted` holds `(client, outage probability)` pairs.
pub fn theoretical_rho(
    constants: &SmoothnessConstants,
    weights: &[f64],
    admitted: &[(usize, f64)],
) -> Result<f64> {
    let mut mass = 0.0;
    for &(i, p) in admitted {
        let w = weights
            .get(i)
            .ok_or_else(|| Error::invalid(format!("client {i} has no data weight")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "outage probability {p} outside [0, 1]"
            )));
        }
        mass += w * (1.0 - p);
    }
    Ok(constants.inverse_condition() * mass)
}

/// [`theoretical_rho`] for the admitted set and outage probabilities a
/// round actually used.
pub fn round_rho(
    constants: &SmoothnessConstants,
    weights: &[f64],
    trace: &RoundTrace,
) -> Result<f64> {
    let admitted: Vec<(usize, f64)> = trace
        .clients
        .iter()
        .filter(|c| c.admitted)
        .map(|c| (c.client_id, c.outage_probability))
        .collect();
    theoretical_rho(constants, weights, &admitted)
}

/// Rounds after which `(1 - rho)^t * f_initial <= epsilon`.
pub fn min_rounds_bound(rho: f64, epsilon: f64, f_initial: f64) -> Result<u64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(epsilon > 0.0 && f_initial > 0.0) {
        return Err(Error::invalid("epsilon and f_initial must be positive"));
    }
    if epsilon >= f_initial {
        return Ok(0);
    }
    let exact = (epsilon / f_initial).ln() / (1.0 - rho).ln();
    // Absorb rounding when the quotient is an integer in exact arithmetic.
    Ok((exact - 1e-9 * exact).ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundCheck {
    pub round: usize,
    /// Seed-mean of the quantity being bounded.
    pub observed: f64,
    /// Seed-mean bound before slack.
    pub bound: f64,
    /// Three standard errors of the paired residual.
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub seeds: usize,
    pub rounds: Vec<RoundCheck>,
    pub pass: bool,
}

impl RateReport {
    fn from_checks(seeds: usize, rounds: Vec<RoundCheck>) -> Self {
        let pass = rounds.iter().all(|r| r.pass);
        Self {
            seeds,
            rounds,
            pass,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &RoundCheck> {
        self.rounds.iter().filter(|r| !r.pass)
    }
}

fn gaps(run: &[RoundTrace]) -> Result<Vec<(f64, f64)>> {
    run.iter()
        .map(|t| match (t.gap_before, t.gap) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::OracleFailure(
                "traces carry no optimality gap; the optimum oracle did not converge".into(),
            )),
        })
        .collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check(round: usize, observed: &[f64], bound: &[f64]) -> RoundCheck {
    let resid: Vec<f64> = observed.iter().zip(bound).map(|(o, b)| o - b).collect();
    let (_, sd) = mean_sd(&resid);
    let slack = 3.0 * sd / (observed.len() as f64).sqrt();
    let (obs, _) = mean_sd(observed);
    let (bnd, _) = mean_sd(bound);
    RoundCheck {
        round,
        observed: obs,
        bound: bnd,
        slack,
        pass: obs <= bnd + slack,
    }
}

/// One-step contraction: per round, the seed-mean gap after the round is at
/// most `(1 - rho)` times the seed-mean gap before it, plus three standard
/// errors. Runs are truncated to the shortest one.
pub fn verify_rate(runs: &[Vec<RoundTrace>], rho: f64) -> Result<RateReport> {
    if runs.is_empty() {
        return Err(Error::invalid("verify_rate needs at least one run"));
    }
    let series: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| gaps(r)).collect::<Result<_>>()?;
    let rounds = series.iter().map(Vec::len).min().unwrap_or(0);
    let checks = (0..rounds)
        .map(|t| {
            let next: Vec<f64> = series.iter().map(|s| s[t].1).collect();
            let bound: Vec<f64> = series.iter().map(|s| (1.0 - rho) * s[t].0).collect();
            check(t + 1, &next, &bound)
        })
        .collect();
    Ok(RateReport::from_checks(runs.len(), checks))
}

/// Iterated contraction: the gap after round `t` against
/// `prod_{s <= t} (1 - rho_s) * gap(1)`, where `gap(1)` is the gap of the
/// initial model and `rho_s` is the per-seed, per-round factor in `rhos`.
pub fn verify_envelope(runs: &[Vec<RoundTrace>], rhos: &[Vec<f64>]) -> Result<RateReport> {
    if runs.is_empty() || runs.len() != rhos.len() {
        return Err(Error::invalid("need one rho series per run"));
    }
    let series: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| gaps(r)).collect::<Result<_>>()?;
    let rounds = series
        .iter()
        .zip(rhos)
        .map(|(s, r)| s.len().min(r.len()))
        .min()
        .unwrap_or(0);
    let mut envelope: Vec<f64> = series
        .iter()
        .map(|s| s.first().map_or(0.0, |g| g.0))
        .collect();
    let mut checks = Vec::with_capacity(rounds);
    for t in 0..rounds {
        for (e, r) in envelope.iter_mut().zip(rhos) {
            *e *= 1.0 - r[t];
        }
        let observed: Vec<f64> = series.iter().map(|s| s[t].1).collect();
        checks.push(check(t + 1, &observed, &envelope));
    }
    Ok(RateReport::from_checks(runs.len(), checks))
}

/// Per-round contraction factors of one run.
pub fn run_rhos(
    constants: &SmoothnessConstants,
    weights: &[f64],
    run: &[RoundTrace],
) -> Result<Vec<f64>> {
    run.iter()
        .map(|t| round_rho(constants, weights, t))
        .collect()
}

/// First round (1-based) whose gap is at most `epsilon`.
pub fn rounds_to_reach(run: &[RoundTrace], epsilon: f64) -> Option<usize> {
    run.iter()
        .find(|t| t.gap.is_some_and(|g| g <= epsilon))
        .map(|t| t.round)
}

/// Cumulative attempted uploads up to and including round `round`.
pub fn uploads_through(run: &[RoundTrace], round: usize) -> usize {
    run.iter()
        .take_while(|t| t.round <= round)
        .map(|t| t.uploads_attempted)
        .sum()
}

/// Cumulative attempted uploads when the gap first drops to `epsilon`.
pub fn uploads_to_reach(run: &[RoundTrace], epsilon: f64) -> Option<usize> {
    rounds_to_reach(run, epsilon).map(|r| uploads_through(run, r))
}

/// Sample Pearson correlation, `None` if either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, _) = mean_sd(xs);
    let (my, _) = mean_sd(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    /// `(epsilon, log(1/epsilon), uploads)` per target.
    pub points: Vec<(f64, f64, f64)>,
    pub correlation: f64,
}

/// Correlation between `log(1/epsilon)` and the uploads needed to reach
/// `epsilon`, with uploads averaged over the runs. Every run must reach
/// every target.
pub fn log_scaling_fit(runs: &[Vec<RoundTrace>], epsilons: &[f64]) -> Result<ScalingFit> {
    if runs.is_empty() {
        return Err(Error::invalid("need at least one run"));
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut total = 0.0;
        for run in runs {
            let u = uploads_to_reach(run, eps)
                .ok_or_else(|| Error::invalid(format!("a run never reached gap {eps:e}")))?;
            total += u as f64;
        }
        points.push((eps, (1.0 / eps).ln(), total / runs.len() as f64));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    let correlation = pearson(&xs, &ys).ok_or_else(|| Error::invalid("degenerate fit"))?;
    Ok(ScalingFit {
        points,
        correlation,
    })
}
