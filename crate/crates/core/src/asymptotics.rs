//! Lyapunov exponent, speed, crossing-time moments, the hitting-time CLT
//! variance and decay diagnostics.
//!
//! With `a_n = γ_n q_n` and `b_n = γ_n 1` the expected time to cross from
//! layer `m` to `m + 1` is the series
//!
//! ```text
//! y_{m+1} = b_m + a_m b_{m-1} + a_m a_{m-1} b_{m-2} + …
//! ```
//!
//! which converges geometrically when the top Lyapunov exponent of the
//! `a_n` products is negative. Expected times to reach layer 1 from the left
//! satisfy `u_{n-1} = y_n + η_{n-1} u_n`, second moments
//! `w_0 = Σ_k (a_0 ⋯ a_{-k+1}) γ_{-k} (2 u_{-k} - 1)`, and the speed is
//! `v = 1 / E(π · u_0)`.
//!
//! Crossing times are centred by `1/v` (the mean crossing time under the
//! `π` start) when estimating the CLT variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::exitprob::{compute_pi, solve_eta, BurnIn, EtaSequence, ExitError};
use crate::seeding::derive_seed;
use crate::smallmat::{dot, vec_norm, Direction, ScaledProduct, SquareMat};
use crate::stats::{bartlett_long_run_variance, log_mean_exp, mean_stderr, ols_slope};
use crate::strip_env::{check_condition_c, sample_window, sample_window_arc, EnvError, EnvironmentModel};
use crate::walker::{simulate_growing, StartLaw, Stop, WalkError, PI_MARGIN};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Default relative truncation tolerance for the crossing series.
pub const SERIES_TOL: f64 = 1e-12;
/// Hard cap on the number of series terms.
pub const MAX_SERIES_TERMS: usize = 1 << 16;
const INITIAL_LEFT: i64 = 192;
const MAX_LEFT: i64 = 1 << 20;

#[derive(Debug, Error)]
pub enum AsymError {
    #[error("input rejected: {0}")]
    Rejected(String),
    #[error("walk is not transient to the right: {0}")]
    NotTransient(String),
    #[error("series at layer {index} not decaying after {terms} terms (last term norm {last_norm:e})")]
    Divergence { index: i64, terms: usize, last_norm: f64 },
    #[error("exit-matrix records end at {available}, layer {needed} required")]
    InsufficientWindow { needed: i64, available: i64 },
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("bad argument: {0}")]
    Argument(String),
}

/// Writes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else if x.is_nan() {
        s.serialize_str("nan")
    } else if *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn ser_opt_f64<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => ser_f64(v, s),
        None => s.serialize_none(),
    }
}

fn ser_vec_f64<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    struct F(f64);
    impl Serialize for F {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            ser_f64(&self.0, s)
        }
    }
    let mut seq = s.serialize_seq(Some(xs.len()))?;
    for x in xs {
        seq.serialize_element(&F(*x))?;
    }
    seq.end()
}

/// Exit-matrix records covering `[from, hi]`, extending the window to the
/// left until burn-in ends at or before `from`.
pub fn eta_covering(model: &EnvironmentModel, from: i64, hi: i64, seed: u64) -> Result<EtaSequence, AsymError> {
    let model = std::sync::Arc::new(model.clone());
    let mut left = INITIAL_LEFT;
    loop {
        let window = sample_window_arc(model.clone(), from - left, hi, seed)?;
        let seq = solve_eta(&window, BurnIn::Adaptive, &SquareMat::uniform_stochastic(model.d()))?;
        if seq.first_index() <= from {
            return Ok(seq);
        }
        left *= 2;
        if left > MAX_LEFT {
            return Err(AsymError::InsufficientWindow {
                needed: from,
                available: seq.first_index(),
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransienceVerdict {
    TransientRight,
    NotTransientRight,
    Indeterminate,
}

/// `transient-right` needs `mean + max(3 se, ln(n)/n) < 0`; the `ln(n)/n`
/// floor absorbs the finite-length bias when the standard error vanishes.
pub fn transience_verdict(mean: f64, stderr: f64, chain_length: usize) -> TransienceVerdict {
    let n = chain_length.max(2) as f64;
    let se = if stderr.is_finite() { stderr } else { 0.0 };
    let margin = (3.0 * se).max(n.ln() / n);
    if mean == f64::NEG_INFINITY || mean + margin < 0.0 {
        TransienceVerdict::TransientRight
    } else if mean - margin > 0.0 {
        TransienceVerdict::NotTransientRight
    } else {
        TransienceVerdict::Indeterminate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    #[serde(serialize_with = "ser_f64")]
    pub mean: f64,
    #[serde(serialize_with = "ser_f64")]
    pub stderr: f64,
    pub verdict: TransienceVerdict,
    pub chain_length: usize,
    pub replicas: usize,
    /// Replicas whose product vanished exactly.
    pub degenerate: usize,
    pub note: Option<String>,
}

/// `(1/n) log ||a_n ⋯ a_1||` averaged over independent windows.
pub fn lyapunov(model: &EnvironmentModel, chain_length: usize, replicas: usize, seed: u64) -> Result<LyapunovEstimate, AsymError> {
    if chain_length == 0 || replicas == 0 {
        return Err(AsymError::Argument("chain length and replicas must be positive".into()));
    }
    let report = check_condition_c(model);
    if !report.c2 {
        return Err(AsymError::Rejected(report.failures.join("; ")));
    }
    let n = chain_length as i64;
    let logs = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let seq = eta_covering(model, 1, n, derive_seed(seed, "lyapunov", k))?;
            let mut prod = ScaledProduct::identity(model.d(), Direction::RightToLeft);
            for m in 1..=n {
                prod.multiply(&seq.record(m)?.a);
            }
            Ok(prod.log_norm() / chain_length as f64)
        })
        .collect::<Result<Vec<f64>, AsymError>>()?;
    let degenerate = logs.iter().filter(|l| **l == f64::NEG_INFINITY).count();
    let (mean, stderr, note) = if degenerate > 0 {
        (f64::NEG_INFINITY, 0.0, Some(format!("{degenerate} of {replicas} products vanished exactly")))
    } else {
        let (m, s) = mean_stderr(&logs);
        (m, if s.is_nan() { 0.0 } else { s }, None)
    };
    Ok(LyapunovEstimate {
        mean,
        stderr,
        verdict: transience_verdict(mean, stderr, chain_length),
        chain_length,
        replicas,
        degenerate,
        note,
    })
}

/// A truncated series `Σ_k (a_m ⋯ a_{m-k+1}) v_{m-k}`.
#[derive(Debug, Clone, PartialEq)]
struct Series {
    value: Vec<f64>,
    terms: Vec<Vec<f64>>,
    tail_bound: f64,
}

/// Sums terms until one falls to `tol` times the leading term, then bounds
/// the remainder by the first omitted term inflated by the observed
/// geometric ratio.
fn a_series(seq: &EtaSequence, m: i64, tol: f64, keep_terms: bool, v: impl Fn(i64) -> Result<Vec<f64>, AsymError>) -> Result<Series, AsymError> {
    let d = seq.d();
    let mut prod = SquareMat::identity(d);
    let mut value = vec![0.0; d];
    let mut terms = Vec::new();
    let mut norms: Vec<f64> = Vec::new();
    let mut k = 0usize;
    let record = |n: i64| {
        seq.get(n).ok_or(AsymError::InsufficientWindow {
            needed: n,
            available: seq.first_index(),
        })
    };
    loop {
        let idx = m - k as i64;
        let term = prod.mul_vec(&v(idx)?);
        let norm = vec_norm(&term);
        if k > 0 && norm <= tol * norms[0] {
            let omitted = norm;
            let j = norms.len().min(32);
            let last = *norms.last().expect("nonempty");
            let ratio = if j > 1 && norms[norms.len() - j] > 0.0 {
                (last / norms[norms.len() - j]).powf(1.0 / (j - 1) as f64)
            } else {
                0.0
            };
            let ratio = if ratio.is_finite() { ratio.clamp(0.0, 0.999) } else { 0.0 };
            // the term that failed the test is counted as omitted
            return Ok(Series {
                value,
                terms,
                tail_bound: omitted / (1.0 - ratio),
            });
        }
        for (s, t) in value.iter_mut().zip(&term) {
            *s += t;
        }
        norms.push(norm);
        if keep_terms {
            terms.push(term);
        }
        if k >= MAX_SERIES_TERMS {
            return Err(AsymError::Divergence {
                index: m,
                terms: k,
                last_norm: norm,
            });
        }
        prod = prod.mul(&record(idx)?.a);
        k += 1;
    }
}

/// Expected time to cross from layer `m` to `m + 1`, by start height.
fn crossing_vector(seq: &EtaSequence, m: i64, tol: f64) -> Result<Series, AsymError> {
    a_series(seq, m, tol, false, |n| {
        seq.get(n).map(|r| r.b.clone()).ok_or(AsymError::InsufficientWindow {
            needed: n,
            available: seq.first_index(),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingMoments {
    /// Expected crossing time by start height.
    pub u0: Vec<f64>,
    /// Terms of the `u0` series.
    pub y_terms: Vec<Vec<f64>>,
    /// Second moments by start height.
    pub w0: Vec<f64>,
    /// Number of terms in the `w0` series.
    pub truncation_depth: usize,
    pub tail_bound: f64,
}

/// First and second moments of the time to reach `at_index + 1` from
/// `(at_index, ·)`.
pub fn crossing_moments(seq: &EtaSequence, at_index: i64, tol: f64) -> Result<CrossingMoments, AsymError> {
    let d = seq.d();
    let first = a_series(seq, at_index, tol, true, |n| {
        seq.get(n).map(|r| r.b.clone()).ok_or(AsymError::InsufficientWindow {
            needed: n,
            available: seq.first_index(),
        })
    })?;
    // u_{at-k} from u_{n-1} = y_n + η_{n-1} u_n, one crossing series per layer
    let mut us: Vec<Vec<f64>> = vec![first.value.clone()];
    let mut tail = first.tail_bound;
    let extend = |us: &mut Vec<Vec<f64>>| -> Result<f64, AsymError> {
        let k = us.len() as i64;
        let n = at_index - k;
        let y = crossing_vector(seq, n, tol)?;
        let eta = &seq.get(n).ok_or(AsymError::InsufficientWindow {
            needed: n,
            available: seq.first_index(),
        })?.eta;
        let carried = eta.mul_vec(us.last().expect("nonempty"));
        us.push(y.value.iter().zip(&carried).map(|(a, b)| a + b).collect());
        Ok(y.tail_bound)
    };
    let second = {
        let mut prod = SquareMat::identity(d);
        let mut value = vec![0.0; d];
        let mut lead = 0.0;
        let mut k = 0usize;
        loop {
            let n = at_index - k as i64;
            while us.len() <= k {
                tail = tail.max(extend(&mut us)?);
            }
            let rec = seq.get(n).ok_or(AsymError::InsufficientWindow {
                needed: n,
                available: seq.first_index(),
            })?;
            let src: Vec<f64> = us[k].iter().map(|u| 2.0 * u - 1.0).collect();
            let term = prod.mul_vec(&rec.gamma.mul_vec(&src));
            let norm = vec_norm(&term);
            if k == 0 {
                lead = norm;
            } else if norm <= tol * lead {
                tail = tail.max(norm);
                break (value, k);
            }
            for (s, t) in value.iter_mut().zip(&term) {
                *s += t;
            }
            if k >= MAX_SERIES_TERMS {
                return Err(AsymError::Divergence {
                    index: at_index,
                    terms: k,
                    last_norm: norm,
                });
            }
            prod = prod.mul(&rec.a);
            k += 1;
        }
    };
    Ok(CrossingMoments {
        u0: first.value,
        y_terms: first.terms,
        w0: second.0,
        truncation_depth: second.1,
        tail_bound: tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedEstimator {
    /// Independent windows, one sample of `π · u_0` each.
    Ensemble,
    /// Shifts along one long window, batch-means error.
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedEstimate {
    pub v_p: f64,
    pub stderr: f64,
    /// `E(π · u_0)` and its standard error.
    pub mean_crossing: f64,
    pub mean_crossing_stderr: f64,
    pub estimator: SpeedEstimator,
    pub samples: usize,
}

const SPATIAL_BATCHES: usize = 20;

fn not_transient(e: AsymError) -> AsymError {
    match e {
        AsymError::Divergence { .. } | AsymError::InsufficientWindow { .. } => AsymError::NotTransient(e.to_string()),
        other => other,
    }
}

/// The common value of `u` when its entries agree to `tol`; then `π · u`
/// does not depend on `π`.
fn uniform_value(u: &[f64], tol: f64) -> Option<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = u.iter().copied().fold(f64::INFINITY, f64::min);
    (max - min <= tol * max.abs()).then(|| u.iter().sum::<f64>() / u.len() as f64)
}

/// A longer window helps when a series ran out of records or the `π`
/// columns were still collapsing.
fn should_widen(e: &AsymError) -> bool {
    match e {
        AsymError::InsufficientWindow { .. } => true,
        AsymError::Exit(ExitError::InsufficientWindow { residual, .. }) => *residual < 1e-2,
        _ => false,
    }
}

/// Expected crossing time `π_0 · u_0` for one window realization; the left
/// extent doubles until the series and the column collapse both fit.
fn pi_dot_u0(model: &EnvironmentModel, seed: u64, tol: f64) -> Result<f64, AsymError> {
    let model = std::sync::Arc::new(model.clone());
    let mut left = INITIAL_LEFT;
    loop {
        let window = sample_window_arc(model.clone(), -left, 0, seed)?;
        let attempt = solve_eta(&window, BurnIn::Adaptive, &SquareMat::uniform_stochastic(model.d()))
            .map_err(AsymError::from)
            .and_then(|seq| {
                let u = crossing_vector(&seq, 0, tol)?;
                Ok(match uniform_value(&u.value, tol) {
                    Some(x) => x,
                    None => dot(&compute_pi(&seq, 0, tol)?.pi, &u.value),
                })
            });
        match attempt {
            Err(e) if should_widen(&e) && left < MAX_LEFT => left *= 2,
            other => return other.map_err(not_transient),
        }
    }
}

/// `v = 1 / E(π · u_0)` with delta-method standard error.
pub fn speed(model: &EnvironmentModel, estimator: SpeedEstimator, budget: usize, tol: f64, seed: u64) -> Result<SpeedEstimate, AsymError> {
    if budget == 0 || !(tol > 0.0) {
        return Err(AsymError::Argument("budget and tolerance must be positive".into()));
    }
    let (mean, se, samples) = match estimator {
        SpeedEstimator::Ensemble => {
            let xs = (0..budget as u64)
                .into_par_iter()
                .map(|k| pi_dot_u0(model, derive_seed(seed, "speed-ensemble", k), tol))
                .collect::<Result<Vec<f64>, AsymError>>()?;
            let (m, s) = mean_stderr(&xs);
            (m, if s.is_nan() { 0.0 } else { s }, budget)
        }
        SpeedEstimator::Spatial => {
            let n = budget.max(SPATIAL_BATCHES) as i64;
            let mut left = INITIAL_LEFT;
            let xs = loop {
                let attempt = (|| -> Result<Vec<f64>, AsymError> {
                    let window = sample_window(model, -left, n, derive_seed(seed, "speed-spatial", 0))?;
                    let seq = solve_eta(&window, BurnIn::Adaptive, &SquareMat::uniform_stochastic(model.d()))?;
                    let mut pi = compute_pi(&seq, 0, tol)?.pi;
                    let mut xs = Vec::with_capacity(n as usize);
                    for m in 0..n {
                        let u = crossing_vector(&seq, m, tol)?;
                        xs.push(dot(&pi, &u.value));
                        pi = seq.record(m)?.eta.vec_mul(&pi);
                        let s: f64 = pi.iter().sum();
                        pi.iter_mut().for_each(|p| *p /= s);
                    }
                    Ok(xs)
                })();
                match attempt {
                    Err(e) if should_widen(&e) && left < MAX_LEFT => left *= 2,
                    other => break other.map_err(not_transient)?,
                }
            };
            let size = xs.len() / SPATIAL_BATCHES;
            let batches: Vec<f64> = xs.chunks_exact(size).take(SPATIAL_BATCHES).map(|c| c.iter().sum::<f64>() / size as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let (_, s) = mean_stderr(&batches);
            (mean, s, xs.len())
        }
    };
    if !(mean.is_finite() && mean >= 1.0 - 1e-9) {
        return Err(AsymError::NotTransient(format!("mean crossing time {mean}")));
    }
    Ok(SpeedEstimate {
        v_p: 1.0 / mean,
        stderr: se / (mean * mean),
        mean_crossing: mean,
        mean_crossing_stderr: se,
        estimator,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltEstimate {
    pub sigma2_t: f64,
    pub sigma2_t_stderr: f64,
    /// `sigma2_t · v³`.
    pub sigma2_xi: f64,
    pub sigma2_xi_stderr: f64,
    /// Replica-averaged partial sums of the tapered autocovariance series.
    pub lag_profile: Vec<f64>,
    pub v_p: f64,
    pub horizon: usize,
    pub lag_cap: usize,
    pub replicas: usize,
    /// Plug-in estimate was not positive.
    pub nonpositive: bool,
    /// Crossing times showed no variability at all.
    pub degenerate: bool,
}

/// Crossing times `τ_1, …, τ_horizon` of one walk started from `π` in a
/// fresh environment.
pub fn crossing_times(model: &EnvironmentModel, v_p: f64, horizon: usize, env_seed: u64, walk_seed: u64) -> Result<Vec<u64>, AsymError> {
    let mut window = sample_window(model, -PI_MARGIN, 64, env_seed)?;
    let cap = (50.0 * horizon as f64 / v_p) as u64 + 100_000;
    let traj = simulate_growing(&mut window, StartLaw::Pi, Stop::LevelWithin { level: horizon as i64, max_steps: cap }, walk_seed)?;
    if traj.truncated {
        return Err(AsymError::NotTransient(format!("level {horizon} not reached in {cap} steps")));
    }
    Ok(traj.crossings())
}

/// Bartlett plug-in for `Var(τ_1) + 2 Σ_n Cov(τ_1, τ_n)` with crossing times
/// centred at `1/v`, averaged over replicas.
pub fn clt_sigma(
    model: &EnvironmentModel,
    v_p: f64,
    horizon: usize,
    lag_cap: Option<usize>,
    replicas: usize,
    seed: u64,
) -> Result<CltEstimate, AsymError> {
    if !(v_p > 0.0 && v_p <= 1.0 + 1e-12) || horizon < 2 || replicas == 0 {
        return Err(AsymError::Argument(format!("v_p {v_p}, horizon {horizon}, replicas {replicas}")));
    }
    let lag_cap = lag_cap.unwrap_or((horizon as f64).sqrt().round() as usize);
    let center = 1.0 / v_p;
    let per = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let tau = crossing_times(model, v_p, horizon, derive_seed(seed, "clt-env", k), derive_seed(seed, "clt-walk", k))?;
            let z: Vec<f64> = tau.iter().map(|&t| t as f64).collect();
            let constant = z.iter().all(|&x| x == z[0]);
            let (est, profile) = bartlett_long_run_variance(&z, center, lag_cap);
            Ok((est, profile, constant))
        })
        .collect::<Result<Vec<_>, AsymError>>()?;
    let ests: Vec<f64> = per.iter().map(|p| p.0).collect();
    let (sigma2_t, se) = mean_stderr(&ests);
    let se = if se.is_nan() { 0.0 } else { se };
    let len = per.iter().map(|p| p.1.len()).min().unwrap_or(0);
    let lag_profile = (0..len).map(|h| per.iter().map(|p| p.1[h]).sum::<f64>() / replicas as f64).collect();
    let v3 = v_p.powi(3);
    Ok(CltEstimate {
        sigma2_t,
        sigma2_t_stderr: se,
        sigma2_xi: sigma2_t * v3,
        sigma2_xi_stderr: se * v3,
        lag_profile,
        v_p,
        horizon,
        lag_cap,
        replicas,
        nonpositive: sigma2_t <= 0.0,
        degenerate: per.iter().all(|p| p.2) || sigma2_t.abs() <= 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    /// `log E(·)` at `n = 1..=n_max`.
    #[serde(serialize_with = "ser_vec_f64")]
    pub log_means: Vec<f64>,
    /// Least-squares slope of `log_means` against `n`; `-inf` when the
    /// quantity vanishes.
    #[serde(serialize_with = "ser_f64")]
    pub rate: f64,
    #[serde(serialize_with = "ser_f64")]
    pub stderr: f64,
    /// `rate + 3 stderr < 0`.
    pub pass: bool,
}

impl RateEstimate {
    /// Least-squares fit of `log_means` against `n = 1, 2, …`.
    pub fn from_log_means(log_means: Vec<f64>) -> Self {
        if log_means.contains(&f64::NEG_INFINITY) {
            return RateEstimate {
                log_means,
                rate: f64::NEG_INFINITY,
                stderr: 0.0,
                pass: true,
            };
        }
        let ns: Vec<f64> = (1..=log_means.len()).map(|n| n as f64).collect();
        let (rate, se) = ols_slope(&ns, &log_means);
        let se = if se.is_nan() { 0.0 } else { se };
        RateEstimate {
            pass: rate + 3.0 * se < 0.0,
            log_means,
            rate,
            stderr: se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub n_max: usize,
    pub replicas: usize,
    /// `E ||a_0 ⋯ a_{n-1}||`.
    pub first_moment: RateEstimate,
    /// `E ||a_0 ⋯ a_{n-1}||²`.
    pub second_moment: RateEstimate,
    /// `E (c_0 ⋯ c_{n-1})`.
    pub contraction: RateEstimate,
}

impl DiagnosticsReport {
    pub fn all_pass(&self) -> bool {
        self.first_moment.pass && self.second_moment.pass && self.contraction.pass
    }
}

/// Monte Carlo growth rates of the product moments behind the CLT
/// hypotheses.
pub fn condition_diagnostics(model: &EnvironmentModel, n_max: usize, replicas: usize, seed: u64) -> Result<DiagnosticsReport, AsymError> {
    if n_max < 3 || replicas == 0 {
        return Err(AsymError::Argument("need n_max >= 3 and replicas >= 1".into()));
    }
    let rows = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let seq = eta_covering(model, 0, n_max as i64, derive_seed(seed, "diagnostics", k))?;
            let mut prod = ScaledProduct::identity(model.d(), Direction::LeftToRight);
            let mut log_c = 0.0;
            let mut norms = Vec::with_capacity(n_max);
            let mut cs = Vec::with_capacity(n_max);
            for m in 0..n_max as i64 {
                let rec = seq.record(m)?;
                prod.multiply(&rec.a);
                log_c += rec.c.ln();
                norms.push(prod.log_norm());
                cs.push(log_c);
            }
            Ok((norms, cs))
        })
        .collect::<Result<Vec<_>, AsymError>>()?;
    let column = |f: &dyn Fn(&(Vec<f64>, Vec<f64>), usize) -> f64| -> Vec<f64> {
        (0..n_max)
            .map(|j| log_mean_exp(&rows.iter().map(|r| f(r, j)).collect::<Vec<_>>()))
            .collect()
    };
    Ok(DiagnosticsReport {
        n_max,
        replicas,
        first_moment: RateEstimate::from_log_means(column(&|r, j| r.0[j])),
        second_moment: RateEstimate::from_log_means(column(&|r, j| 2.0 * r.0[j])),
        contraction: RateEstimate::from_log_means(column(&|r, j| r.1[j])),
    })
}

/// Budgets for [`analyze`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisBudget {
    pub chain_length: usize,
    pub lyapunov_replicas: usize,
    pub speed_estimator: SpeedEstimator,
    pub speed_samples: usize,
    pub series_tol: f64,
    pub clt_horizon: usize,
    pub clt_replicas: usize,
    pub lag_cap: Option<usize>,
    pub diagnostics_n_max: usize,
    pub diagnostics_replicas: usize,
}

impl Default for AnalysisBudget {
    fn default() -> Self {
        AnalysisBudget {
            chain_length: 10_000,
            lyapunov_replicas: 20,
            speed_estimator: SpeedEstimator::Ensemble,
            speed_samples: 2_000,
            series_tol: SERIES_TOL,
            clt_horizon: 2_000,
            clt_replicas: 200,
            lag_cap: None,
            diagnostics_n_max: 20,
            diagnostics_replicas: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub schema_version: u32,
    pub model_hash: String,
    pub seed: u64,
    pub budget: AnalysisBudget,
    #[serde(serialize_with = "ser_f64")]
    pub lambda_mean: f64,
    #[serde(serialize_with = "ser_f64")]
    pub lambda_stderr: f64,
    pub transience_verdict: TransienceVerdict,
    pub v_p: Option<f64>,
    pub v_p_stderr: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub sigma2_t: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub sigma2_t_stderr: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub sigma2_xi: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub sigma2_xi_stderr: Option<f64>,
    pub clt_flags: Vec<String>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub notes: Vec<String>,
}

impl AsymptoticsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Lyapunov exponent and verdict, then speed, CLT variance and diagnostics
/// when the walk is transient to the right.
pub fn analyze(model: &EnvironmentModel, budget: &AnalysisBudget, seed: u64) -> Result<AsymptoticsReport, AsymError> {
    let lyap = lyapunov(model, budget.chain_length, budget.lyapunov_replicas, derive_seed(seed, "analyze-lyapunov", 0))?;
    let mut report = AsymptoticsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_hash: model.model_hash(),
        seed,
        budget: budget.clone(),
        lambda_mean: lyap.mean,
        lambda_stderr: lyap.stderr,
        transience_verdict: lyap.verdict,
        v_p: None,
        v_p_stderr: None,
        sigma2_t: None,
        sigma2_t_stderr: None,
        sigma2_xi: None,
        sigma2_xi_stderr: None,
        clt_flags: Vec::new(),
        diagnostics: None,
        notes: lyap.note.into_iter().collect(),
    };
    if let Some(note) = model.encoding_note() {
        report.notes.push(note.to_string());
    }
    if lyap.verdict != TransienceVerdict::TransientRight {
        report.notes.push("speed and CLT variance require a transient-right verdict".into());
        return Ok(report);
    }
    let v = speed(model, budget.speed_estimator, budget.speed_samples, budget.series_tol, derive_seed(seed, "analyze-speed", 0))?;
    report.v_p = Some(v.v_p);
    report.v_p_stderr = Some(v.stderr);
    if budget.clt_replicas > 0 {
        let clt = clt_sigma(model, v.v_p, budget.clt_horizon, budget.lag_cap, budget.clt_replicas, derive_seed(seed, "analyze-clt", 0))?;
        if clt.nonpositive {
            report.clt_flags.push("nonpositive plug-in variance".into());
        }
        if clt.degenerate {
            report.clt_flags.push("degenerate crossing times".into());
        }
        report.sigma2_t = Some(clt.sigma2_t);
        report.sigma2_t_stderr = Some(clt.sigma2_t_stderr);
        report.sigma2_xi = Some(clt.sigma2_xi);
        report.sigma2_xi_stderr = Some(clt.sigma2_xi_stderr);
    }
    if budget.diagnostics_replicas > 0 {
        report.diagnostics = Some(condition_diagnostics(
            model,
            budget.diagnostics_n_max,
            budget.diagnostics_replicas,
            derive_seed(seed, "analyze-diagnostics", 0),
        )?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exitprob::{absorption_oracle_layer, solve_eta_default};
    use crate::strip_env::{persistent_walk_model, LayerTriple};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(p: f64, r: f64, q: f64) -> EnvironmentModel {
        EnvironmentModel::homogeneous(LayerTriple::scalar(p, r, q).unwrap())
    }

    fn two_point(p1: f64, p2: f64) -> EnvironmentModel {
        let s = vec![LayerTriple::scalar(p1, 0.0, 1.0 - p1).unwrap(), LayerTriple::scalar(p2, 0.0, 1.0 - p2).unwrap()];
        EnvironmentModel::iid(s, vec![0.5, 0.5]).unwrap()
    }

    fn random_letter(rng: &mut ChaCha8Rng, d: usize) -> LayerTriple {
        let mut m = [SquareMat::zeros(d), SquareMat::zeros(d), SquareMat::zeros(d)];
        for i in 0..d {
            let pm = rng.gen_range(0.4..0.7);
            let qm = rng.gen_range(0.1..0.3);
            for (k, mass) in [pm, 1.0 - pm - qm, qm].into_iter().enumerate() {
                let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                for j in 0..d {
                    m[k][(i, j)] = mass * w[j] / s;
                }
            }
        }
        let [p, r, q] = m;
        LayerTriple::new(p, r, q).unwrap()
    }

    #[test]
    fn lyapunov_examples() {
        let l = lyapunov(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), 1000, 4, 1).unwrap();
        assert!((l.mean + 2f64.ln()).abs() < 1e-12);
        assert!(l.stderr < 1e-14);
        assert_eq!(l.verdict, TransienceVerdict::TransientRight);

        let l = lyapunov(&two_point(0.6, 0.7), 4000, 40, 2).unwrap();
        let exact = ((2.0f64 / 3.0).ln() + (3.0f64 / 7.0).ln()) / 2.0;
        assert!((l.mean - exact).abs() <= 3.0 * l.stderr, "{} ± {}", l.mean, l.stderr);

        let l = lyapunov(&scalar(0.5, 0.0, 0.5), 2000, 4, 3).unwrap();
        assert!(l.mean.abs() < 1e-12);
        assert_eq!(l.verdict, TransienceVerdict::Indeterminate);
    }

    #[test]
    fn lyapunov_disjoint_seeds_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EnvironmentModel::iid(vec![random_letter(&mut rng, 2), random_letter(&mut rng, 2)], vec![0.5, 0.5]).unwrap();
        let a = lyapunov(&model, 2000, 20, 10).unwrap();
        let b = lyapunov(&model, 2000, 20, 11).unwrap();
        assert!((a.mean - b.mean).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
    }

    #[test]
    fn lyapunov_persistent_walk_is_not_transient() {
        let l = lyapunov(&persistent_walk_model(0.7, 0.7).unwrap(), 4000, 4, 1).unwrap();
        assert_ne!(l.verdict, TransienceVerdict::TransientRight);
        let l = lyapunov(&persistent_walk_model(0.8, 0.6).unwrap(), 4000, 4, 1).unwrap();
        assert_eq!(l.verdict, TransienceVerdict::TransientRight);
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(transience_verdict(-0.1, 0.01, 10_000), TransienceVerdict::TransientRight);
        assert_eq!(transience_verdict(-0.01, 0.01, 10_000), TransienceVerdict::Indeterminate);
        assert_eq!(transience_verdict(0.1, 0.01, 10_000), TransienceVerdict::NotTransientRight);
        assert_eq!(transience_verdict(f64::NEG_INFINITY, 0.0, 10), TransienceVerdict::TransientRight);
    }

    #[test]
    fn crossing_moment_closed_forms() {
        let w = sample_window(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), -400, 0, 0).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let cm = crossing_moments(&seq, 0, SERIES_TOL).unwrap();
        assert!((cm.u0[0] - 3.0).abs() < 1e-9);
        assert!((cm.w0[0] - 33.0).abs() < 1e-9);
        assert!(cm.tail_bound > 0.0 && cm.tail_bound < 1e-9);

        let m = EnvironmentModel::homogeneous(LayerTriple::right_drift(2, 1e-13).unwrap());
        let w = sample_window(&m, -400, 0, 0).unwrap();
        let seq = crate::exitprob::solve_eta(&w, BurnIn::Fixed(100), &SquareMat::identity(2)).unwrap();
        let cm = crossing_moments(&seq, 0, SERIES_TOL).unwrap();
        for i in 0..2 {
            assert!((cm.u0[i] - 1.0).abs() < 1e-10 && (cm.w0[i] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn crossing_moments_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in 1..=3 {
            let model = EnvironmentModel::iid((0..3).map(|_| random_letter(&mut rng, d)).collect(), vec![0.2, 0.3, 0.5]).unwrap();
            let w = sample_window(&model, -4000, 1, d as u64).unwrap();
            let seq = solve_eta_default(&w).unwrap();
            let cm = crossing_moments(&seq, 0, SERIES_TOL).unwrap();
            let oracle = absorption_oracle_layer(&w, 1, 0, 3000).unwrap();
            for i in 0..d {
                assert!((cm.u0[i] - oracle.mean_time[i]).abs() <= 1e-7, "u0 d={d}");
                assert!((cm.w0[i] - oracle.second_moment_time[i]).abs() <= 1e-7 * oracle.second_moment_time[i].max(1.0), "w0 d={d}");
                assert!(cm.u0[i] >= 1.0 && cm.w0[i] >= cm.u0[i].powi(2));
            }
            let k = cm.y_terms.len() as i64;
            let prod = (0..k).fold(SquareMat::identity(d), |acc, j| acc.mul(&seq.get(-j).unwrap().a));
            let first_omitted = vec_norm(&prod.mul_vec(&seq.get(-k).unwrap().b));
            assert!(cm.tail_bound >= first_omitted);
        }
    }

    #[test]
    fn divergent_series_is_reported() {
        let w = sample_window(&scalar(0.5, 0.0, 0.5), -400, 0, 0).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        assert!(matches!(
            crossing_moments(&seq, 0, SERIES_TOL),
            Err(AsymError::InsufficientWindow { .. })
        ));
        assert!(matches!(
            speed(&scalar(0.5, 0.0, 0.5), SpeedEstimator::Ensemble, 2, SERIES_TOL, 0),
            Err(AsymError::NotTransient(_))
        ));
    }

    #[test]
    fn speed_examples() {
        let s = speed(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), SpeedEstimator::Ensemble, 4, SERIES_TOL, 0).unwrap();
        assert!((s.v_p - 1.0 / 3.0).abs() < 1e-12);
        for (p, r, q) in [(0.5, 0.3, 0.2), (0.9, 0.05, 0.05), (0.45, 0.45, 0.1)] {
            let s = speed(&scalar(p, r, q), SpeedEstimator::Spatial, 40, SERIES_TOL, 0).unwrap();
            assert!((s.v_p - (p - q)).abs() < 1e-12, "{p} {r} {q}: {}", s.v_p);
        }
        let m = EnvironmentModel::homogeneous(LayerTriple::right_drift(3, 1e-13).unwrap());
        let s = speed(&m, SpeedEstimator::Ensemble, 2, SERIES_TOL, 0).unwrap();
        assert!((s.v_p - 1.0).abs() < 1e-10);

        let s = speed(&two_point(0.7, 0.8), SpeedEstimator::Ensemble, 20_000, SERIES_TOL, 1).unwrap();
        assert!((s.v_p - 0.493333).abs() <= 3.0 * s.stderr + 1e-6, "{} ± {}", s.v_p, s.stderr);
    }

    #[test]
    fn ensemble_and_spatial_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = EnvironmentModel::iid(vec![random_letter(&mut rng, 2), random_letter(&mut rng, 2)], vec![0.5, 0.5]).unwrap();
        let a = speed(&model, SpeedEstimator::Ensemble, 2000, SERIES_TOL, 1).unwrap();
        let b = speed(&model, SpeedEstimator::Spatial, 20_000, SERIES_TOL, 2).unwrap();
        assert!((a.v_p - b.v_p).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt(), "{a:?} {b:?}");
    }

    #[test]
    fn clt_examples() {
        let c = clt_sigma(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), 1.0 / 3.0, 4000, None, 100, 3).unwrap();
        assert!((c.sigma2_t - 24.0).abs() <= 4.0 * c.sigma2_t_stderr + 0.5, "{} ± {}", c.sigma2_t, c.sigma2_t_stderr);
        assert!((c.sigma2_xi - c.sigma2_t / 27.0).abs() <= 1e-12);
        assert_eq!(c.lag_profile.len(), c.lag_cap + 1);

        let m = EnvironmentModel::homogeneous(LayerTriple::right_drift(1, 1e-13).unwrap());
        let c = clt_sigma(&m, 1.0, 200, None, 4, 3).unwrap();
        assert!(c.degenerate && c.sigma2_t.abs() < 1e-12);
    }

    #[test]
    fn diagnostics_examples() {
        let r = condition_diagnostics(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), 10, 5, 0).unwrap();
        assert!((r.first_moment.rate - 0.5f64.ln()).abs() < 1e-10);
        assert!((r.second_moment.rate - 2.0 * 0.5f64.ln()).abs() < 1e-10);
        assert_eq!(r.contraction.rate, f64::NEG_INFINITY);
        assert!(r.all_pass());

        // E ρ² = (1.857² + 0.0526²)/2 > 1
        let r = condition_diagnostics(&two_point(0.35, 0.95), 12, 100_000, 1).unwrap();
        assert!(!r.second_moment.pass && r.second_moment.rate > 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = EnvironmentModel::iid(vec![random_letter(&mut rng, 2), random_letter(&mut rng, 2)], vec![0.5, 0.5]).unwrap();
        let a = condition_diagnostics(&model, 15, 2000, 1).unwrap();
        let b = condition_diagnostics(&model, 15, 2000, 2).unwrap();
        for (x, y) in [(&a.first_moment, &b.first_moment), (&a.contraction, &b.contraction)] {
            assert!(x.rate.is_finite() && y.rate.is_finite());
            assert!((x.rate - y.rate).abs() <= 3.0 * (x.stderr.powi(2) + y.stderr.powi(2)).sqrt() + 0.02);
        }
    }

    #[test]
    fn report_serializes_sentinels() {
        let model = scalar(2.0 / 3.0, 0.0, 1.0 / 3.0);
        let budget = AnalysisBudget {
            chain_length: 200,
            lyapunov_replicas: 2,
            speed_samples: 2,
            clt_horizon: 200,
            clt_replicas: 4,
            diagnostics_n_max: 5,
            diagnostics_replicas: 2,
            ..Default::default()
        };
        let rep = analyze(&model, &budget, 7).unwrap();
        assert!((rep.sigma2_xi.unwrap() - rep.sigma2_t.unwrap() * rep.v_p.unwrap().powi(3)).abs() <= 1e-12);
        let json = rep.to_json();
        assert!(json.contains("\"rate\": \"-inf\""));
        assert_eq!(json, analyze(&model, &budget, 7).unwrap().to_json());
    }
}
