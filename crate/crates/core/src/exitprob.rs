//! Exit matrices and everything derived from them.
//!
//! `η_n(i, j)` is the probability that the walk started at `(n, i)` first
//! enters layer `n + 1` at height `j`. Conditioning on the first step gives
//! `η_n = p_n + r_n η_n + q_n η_{n-1} η_n`, i.e.
//!
//! ```text
//! η_n = γ_n p_n,   γ_n = (I - q_n η_{n-1} - r_n)^{-1},   a_n = γ_n q_n,   b_n = γ_n 1.
//! ```
//!
//! [`solve_eta`] iterates this left to right from an arbitrary stochastic
//! seed; the stationary solution forgets the seed geometrically. The
//! absorbing-chain oracle in this module solves the same exit problem on a
//! finite strip by block elimination running right to left, so it shares no
//! algebra with the forward recursion.

use serde::Serialize;
use thiserror::Error;

use crate::smallmat::{resolvent, MatError, SquareMat};
use crate::strip_env::EnvironmentWindow;

/// Floor separating structural zeros of `η` from roundoff.
pub const C4_FLOOR: f64 = 1e-14;
/// Minimum number of discarded letters for the adaptive burn-in.
pub const BURN_IN_FLOOR: usize = 100;
/// Contraction certificate required by the adaptive burn-in.
pub const BURN_IN_TARGET: f64 = 1e-12;
/// Largest truncation depth tried by the adaptive oracles.
pub const MAX_TRUNCATION: usize = 1 << 14;
const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ExitError {
    #[error("layer {index}: {source}")]
    Resolvent { index: i64, source: MatError },
    #[error("layer {index}: {detail}")]
    NumericalFailure { index: i64, detail: String },
    #[error("window exhausted: need layer {needed}, window starts at {available} (achieved residual {residual:e})")]
    InsufficientWindow { needed: i64, available: i64, residual: f64 },
    #[error("absorbing system is singular at layer {layer} (walk trapped)")]
    Degenerate { layer: i64 },
    #[error("truncation did not converge: {0}")]
    Truncation(String),
    #[error("bad argument: {0}")]
    Argument(String),
}

/// Per-layer record of the exit recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAnalysis {
    pub eta: SquareMat,
    pub gamma: SquareMat,
    pub a: SquareMat,
    pub b: Vec<f64>,
    /// `1 - max_i min_j η(i, j)`.
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurnIn {
    Fixed(usize),
    /// At least [`BURN_IN_FLOOR`] letters, extended until the running product
    /// of the `c_k` is below [`BURN_IN_TARGET`].
    Adaptive,
}

/// Exit matrices over `[window.lo() + burn_in, window.hi()]`.
#[derive(Debug, Clone)]
pub struct EtaSequence {
    window: EnvironmentWindow,
    first: i64,
    records: Vec<LayerAnalysis>,
    burn_in: usize,
    certified: bool,
    contraction_bound: f64,
    seed_id: String,
}

impl EtaSequence {
    pub fn window(&self) -> &EnvironmentWindow {
        &self.window
    }

    /// First layer with a record.
    pub fn first_index(&self) -> i64 {
        self.first
    }

    pub fn last_index(&self) -> i64 {
        self.first + self.records.len() as i64 - 1
    }

    pub fn contains(&self, n: i64) -> bool {
        n >= self.first && n <= self.last_index()
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    /// Whether the c-product certificate was reached during burn-in.
    pub fn burn_in_certified(&self) -> bool {
        self.certified
    }

    /// Product of the `c_k` over the discarded letters.
    pub fn contraction_bound(&self) -> f64 {
        self.contraction_bound
    }

    pub fn seed_id(&self) -> &str {
        &self.seed_id
    }

    pub fn records(&self) -> &[LayerAnalysis] {
        &self.records
    }

    pub fn get(&self, n: i64) -> Option<&LayerAnalysis> {
        if self.contains(n) {
            Some(&self.records[(n - self.first) as usize])
        } else {
            None
        }
    }

    pub fn record(&self, n: i64) -> Result<&LayerAnalysis, ExitError> {
        self.get(n).ok_or(ExitError::InsufficientWindow {
            needed: n,
            available: self.first,
            residual: f64::NAN,
        })
    }

    pub fn d(&self) -> usize {
        self.window.d()
    }

    /// CSV: `index`, then `η`, `γ`, `a` row-major, then `b`, then `c`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string()];
        for m in ["eta", "gamma", "a"] {
            for i in 0..d {
                for j in 0..d {
                    header.push(format!("{m}_{}_{}", i + 1, j + 1));
                }
            }
        }
        header.extend((0..d).map(|i| format!("b_{}", i + 1)));
        header.push("c".into());
        w.write_record(&header)?;
        for (k, rec) in self.records.iter().enumerate() {
            let mut row = vec![(self.first + k as i64).to_string()];
            for m in [&rec.eta, &rec.gamma, &rec.a] {
                row.extend(m.as_slice().iter().map(|x| x.to_string()));
            }
            row.extend(rec.b.iter().map(|x| x.to_string()));
            row.push(rec.c.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One step of the exit recursion at layer `n`.
pub fn analyze_layer(window: &EnvironmentWindow, n: i64, eta_prev: &SquareMat) -> Result<LayerAnalysis, ExitError> {
    let t = window.triple(n);
    let gamma = resolvent(t.q(), eta_prev, t.r()).map_err(|source| ExitError::Resolvent { index: n, source })?;
    let raw = gamma.mul(t.p());
    let sums = raw.row_sums();
    if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > STOCHASTIC_TOL) {
        return Err(ExitError::NumericalFailure {
            index: n,
            detail: format!("exit matrix row sums to {s}"),
        });
    }
    // rows renormalized so roundoff does not accumulate along the sequence
    let d = raw.order();
    let mut eta = raw;
    for (i, s) in sums.iter().enumerate() {
        for j in 0..d {
            eta[(i, j)] /= s;
        }
    }
    let a = gamma.mul(t.q());
    let b = gamma.row_sums();
    let c = 1.0 - (0..eta.order()).map(|i| eta.row(i).iter().copied().fold(f64::INFINITY, f64::min)).fold(f64::NEG_INFINITY, f64::max);
    Ok(LayerAnalysis { eta, gamma, a, b, c })
}

/// Iterates the exit recursion across the window starting from
/// `η_{lo-1} = seed_matrix` and discards the first `burn_in` records.
pub fn solve_eta(window: &EnvironmentWindow, burn_in: BurnIn, seed_matrix: &SquareMat) -> Result<EtaSequence, ExitError> {
    let d = window.d();
    if seed_matrix.order() != d {
        return Err(ExitError::Argument(format!("seed of order {} for width {d}", seed_matrix.order())));
    }
    if !seed_matrix.is_nonnegative() || seed_matrix.row_sums().iter().any(|s| (s - 1.0).abs() > STOCHASTIC_TOL) {
        return Err(ExitError::Argument("seed matrix is not stochastic".into()));
    }
    let min_records = match burn_in {
        BurnIn::Fixed(b) => b.max(1),
        BurnIn::Adaptive => BURN_IN_FLOOR,
    };
    if window.len() <= min_records {
        return Err(ExitError::InsufficientWindow {
            needed: window.lo() + min_records as i64,
            available: window.lo(),
            residual: f64::NAN,
        });
    }
    let mut all = Vec::with_capacity(window.len());
    let mut prev = seed_matrix.clone();
    for n in window.lo()..=window.hi() {
        let rec = analyze_layer(window, n, &prev)?;
        prev = rec.eta.clone();
        all.push(rec);
    }
    let (burn, certified, bound) = match burn_in {
        BurnIn::Fixed(b) => {
            let b = b.max(1);
            let bound = all[..b].iter().map(|r| r.c).product::<f64>();
            (b, bound <= BURN_IN_TARGET, bound)
        }
        BurnIn::Adaptive => {
            let mut prod = 1.0;
            let mut found = None;
            for (k, r) in all.iter().enumerate() {
                prod *= r.c;
                if k + 1 >= BURN_IN_FLOOR && prod <= BURN_IN_TARGET {
                    found = Some(k + 1);
                    break;
                }
            }
            match found {
                Some(k) if k < all.len() => (k, true, prod),
                _ => {
                    let bound = all[..BURN_IN_FLOOR].iter().map(|r| r.c).product::<f64>();
                    (BURN_IN_FLOOR, false, bound)
                }
            }
        }
    };
    let records = all.split_off(burn);
    let seed_id = if *seed_matrix == SquareMat::uniform_stochastic(d) {
        "uniform".to_string()
    } else if *seed_matrix == SquareMat::identity(d) {
        "identity".to_string()
    } else {
        format!("custom:{:?}", seed_matrix.as_slice())
    };
    Ok(EtaSequence {
        window: window.clone(),
        first: window.lo() + burn as i64,
        records,
        burn_in: burn,
        certified,
        contraction_bound: bound,
        seed_id,
    })
}

/// [`solve_eta`] with the uniform seed and adaptive burn-in.
pub fn solve_eta_default(window: &EnvironmentWindow) -> Result<EtaSequence, ExitError> {
    solve_eta(window, BurnIn::Adaptive, &SquareMat::uniform_stochastic(window.d()))
}

/// The limit of `e_i η_{n-m} ⋯ η_{n-1}` as `m → ∞`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiVector {
    pub pi: Vec<f64>,
    /// Largest column spread of the last product formed.
    pub collapse_residual: f64,
    /// Number of factors used.
    pub depth: usize,
}

fn pi_product(etaseq: &EtaSequence, at_index: i64, tol: f64) -> Result<(SquareMat, f64, usize), ExitError> {
    let mut prod = etaseq.record(at_index - 1)?.eta.clone();
    let mut c_bound = etaseq.record(at_index - 1)?.c;
    let mut depth = 1;
    loop {
        let spread = prod.max_column_spread();
        if spread <= tol || c_bound <= tol {
            return Ok((prod, spread, depth));
        }
        let n = at_index - 1 - depth as i64;
        match etaseq.get(n) {
            Some(rec) => {
                prod = rec.eta.mul(&prod);
                c_bound *= rec.c;
                depth += 1;
            }
            None => {
                return Err(ExitError::InsufficientWindow {
                    needed: n,
                    available: etaseq.first_index(),
                    residual: spread,
                })
            }
        }
    }
}

/// Distribution of the entrance height into layer `at_index` in the
/// stationary regime, computed from products of exit matrices to its left.
pub fn compute_pi(etaseq: &EtaSequence, at_index: i64, tol: f64) -> Result<PiVector, ExitError> {
    let (prod, spread, depth) = pi_product(etaseq, at_index, tol)?;
    let d = prod.order();
    let mut pi = vec![0.0; d];
    for i in 0..d {
        for (p, x) in pi.iter_mut().zip(prod.row(i)) {
            *p += x / d as f64;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    Ok(PiVector {
        pi,
        collapse_residual: spread,
        depth,
    })
}

/// Row `start_height` of the collapsed product, without averaging.
pub fn compute_pi_from(etaseq: &EtaSequence, at_index: i64, tol: f64, start_height: usize) -> Result<PiVector, ExitError> {
    let (prod, spread, depth) = pi_product(etaseq, at_index, tol)?;
    Ok(PiVector {
        pi: prod.row(start_height).to_vec(),
        collapse_residual: spread,
        depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C4Report {
    pub pass: bool,
    pub min_entry: f64,
    pub at_index: i64,
}

/// Checks that every exit matrix entry exceeds `floor`.
pub fn verify_c4(etaseq: &EtaSequence, floor: f64) -> C4Report {
    let (min_entry, at_index) = etaseq
        .records()
        .iter()
        .enumerate()
        .map(|(k, r)| (r.eta.min_entry(), etaseq.first_index() + k as i64))
        .fold((f64::INFINITY, etaseq.first_index()), |acc, x| if x.0 < acc.0 { x } else { acc });
    C4Report {
        pass: min_entry > floor,
        min_entry,
        at_index,
    }
}

/// Exact solution of the exit problem on `[target - depth, target - 1]`,
/// absorbing at `target` and at the left cut `target - depth - 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub exit_dist: Vec<f64>,
    pub leak_left: f64,
    pub mean_time: f64,
    pub second_moment_time: f64,
    pub truncation_depth: usize,
}

/// All start heights of one layer at once.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOracle {
    /// Row `i`: hitting distribution on `target` from `(start, i)`.
    pub exit: SquareMat,
    pub leak_left: Vec<f64>,
    pub mean_time: Vec<f64>,
    pub second_moment_time: Vec<f64>,
    pub truncation_depth: usize,
}

/// Right-to-left block elimination for
/// `x_n - r_n x_n - p_n x_{n+1} - q_n x_{n-1} = g_n` on `[left, target - 1]`
/// with `x_{left-1} = 0`.
struct BlockSweep {
    left: i64,
    target: i64,
    /// `(I - r_n - p_n B_{n+1})^{-1}` per layer, indexed from `left`.
    inv: Vec<SquareMat>,
    /// `B_n = inv_n q_n`.
    b: Vec<SquareMat>,
}

impl BlockSweep {
    fn new(window: &EnvironmentWindow, left: i64, target: i64) -> Result<Self, ExitError> {
        let d = window.d();
        let len = (target - left) as usize;
        let mut inv = vec![SquareMat::zeros(d); len];
        let mut b = vec![SquareMat::zeros(d); len];
        let mut b_next = SquareMat::zeros(d);
        for n in (left..target).rev() {
            let t = window.triple(n);
            let m = t.r().add(&t.p().mul(&b_next)).one_minus();
            let mi = m.inverse().map_err(|_| ExitError::Degenerate { layer: n })?;
            let k = (n - left) as usize;
            b[k] = mi.mul(t.q());
            inv[k] = mi;
            b_next = b[k].clone();
        }
        Ok(BlockSweep { left, target, inv, b })
    }

    /// Matrix right-hand side: boundary value at `target`, zero source.
    fn solve_exit(&self, window: &EnvironmentWindow, boundary: &SquareMat) -> Vec<SquareMat> {
        let len = self.inv.len();
        let mut a = vec![SquareMat::zeros(boundary.order()); len];
        let mut a_next = boundary.clone();
        for n in (self.left..self.target).rev() {
            let k = (n - self.left) as usize;
            a[k] = self.inv[k].mul(&window.triple(n).p().mul(&a_next));
            a_next = a[k].clone();
        }
        let mut x = Vec::with_capacity(len);
        let mut prev = SquareMat::zeros(boundary.order());
        for k in 0..len {
            let xk = a[k].add(&self.b[k].mul(&prev));
            prev = xk.clone();
            x.push(xk);
        }
        x
    }

    /// Vector right-hand side with zero boundary at `target`.
    fn solve_source(&self, window: &EnvironmentWindow, source: impl Fn(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
        let len = self.inv.len();
        let d = window.d();
        let mut a = vec![vec![0.0; d]; len];
        let mut a_next = vec![0.0; d];
        for n in (self.left..self.target).rev() {
            let k = (n - self.left) as usize;
            let pa = window.triple(n).p().mul_vec(&a_next);
            let rhs: Vec<f64> = source(k).iter().zip(&pa).map(|(g, x)| g + x).collect();
            a[k] = self.inv[k].mul_vec(&rhs);
            a_next = a[k].clone();
        }
        let mut x = Vec::with_capacity(len);
        let mut prev = vec![0.0; d];
        for k in 0..len {
            let bx = self.b[k].mul_vec(&prev);
            let xk: Vec<f64> = a[k].iter().zip(&bx).map(|(u, v)| u + v).collect();
            prev = xk.clone();
            x.push(xk);
        }
        x
    }
}

/// Solves the absorbing chain on `[target - depth, target - 1]` for every
/// start height of layer `start_layer`.
pub fn absorption_oracle_layer(
    window: &EnvironmentWindow,
    target: i64,
    start_layer: i64,
    depth: usize,
) -> Result<LayerOracle, ExitError> {
    let left = target - depth as i64;
    if depth == 0 || start_layer >= target || start_layer < left {
        return Err(ExitError::Argument(format!(
            "start layer {start_layer} must lie in [{left}, {target})"
        )));
    }
    if !window.contains(left) || !window.contains(target - 1) {
        return Err(ExitError::InsufficientWindow {
            needed: left,
            available: window.lo(),
            residual: f64::NAN,
        });
    }
    let d = window.d();
    let sweep = BlockSweep::new(window, left, target)?;
    let k = (start_layer - left) as usize;
    let exit = sweep.solve_exit(window, &SquareMat::identity(d));
    let mean = sweep.solve_source(window, |_| vec![1.0; d]);
    let second = sweep.solve_source(window, |j| mean[j].iter().map(|m| 2.0 * m - 1.0).collect());
    let leak_left = exit[k].row_sums().into_iter().map(|s| (1.0 - s).max(0.0)).collect();
    Ok(LayerOracle {
        exit: exit[k].clone(),
        leak_left,
        mean_time: mean[k].clone(),
        second_moment_time: second[k].clone(),
        truncation_depth: depth,
    })
}

pub fn absorption_oracle(
    window: &EnvironmentWindow,
    target: i64,
    start: (i64, usize),
    depth: usize,
) -> Result<OracleResult, ExitError> {
    let (layer, height) = start;
    if height >= window.d() {
        return Err(ExitError::Argument(format!("height {height} outside strip of width {}", window.d())));
    }
    let lo = absorption_oracle_layer(window, target, layer, depth)?;
    Ok(OracleResult {
        exit_dist: lo.exit.row(height).to_vec(),
        leak_left: lo.leak_left[height],
        mean_time: lo.mean_time[height],
        second_moment_time: lo.second_moment_time[height],
        truncation_depth: depth,
    })
}

/// Doubles the truncation depth until the left leak is at most `1e-10` and
/// the second moments have stopped moving, or until [`MAX_TRUNCATION`].
pub fn absorption_oracle_adaptive(
    window: &EnvironmentWindow,
    target: i64,
    start_layer: i64,
) -> Result<LayerOracle, ExitError> {
    let mut depth = ((target - start_layer) as usize).max(1).next_power_of_two().max(16);
    let mut last: Option<LayerOracle> = None;
    while depth <= MAX_TRUNCATION {
        if !window.contains(target - depth as i64) {
            return Err(ExitError::InsufficientWindow {
                needed: target - depth as i64,
                available: window.lo(),
                residual: last.map_or(f64::NAN, |l| l.leak_left.iter().copied().fold(0.0, f64::max)),
            });
        }
        let cur = absorption_oracle_layer(window, target, start_layer, depth)?;
        let leak = cur.leak_left.iter().copied().fold(0.0, f64::max);
        if leak <= 1e-10 {
            if let Some(prev) = &last {
                let stable = prev
                    .second_moment_time
                    .iter()
                    .zip(&cur.second_moment_time)
                    .all(|(a, b)| (a - b).abs() <= 1e-11 * b.abs().max(1.0));
                if stable {
                    return Ok(cur);
                }
            }
        }
        last = Some(cur);
        depth *= 2;
    }
    Err(ExitError::Truncation(format!(
        "left leak still above 1e-10 at depth {MAX_TRUNCATION}; walk may not be transient to the right"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeftExit {
    /// `η^-_n(i, j)`: probability of first entering layer `n - 1` at `j`.
    pub eta_minus: SquareMat,
    /// `f(i)`: probability of ever descending `depth` layers from `(n, i)`.
    pub f: Vec<f64>,
    /// `η^-_n ⋯ η^-_{n-depth+1}`.
    pub product: SquareMat,
    /// `η^-_n, η^-_{n-1}, …, η^-_{n-depth+1}`.
    pub chain: Vec<SquareMat>,
    pub right_boundary: i64,
}

fn left_exit_chain(window: &EnvironmentWindow, at_index: i64, depth: usize, right: i64) -> Result<Vec<SquareMat>, ExitError> {
    let d = window.d();
    let bottom = at_index - depth as i64 + 1;
    let mut b_next = SquareMat::zeros(d);
    let mut chain = Vec::with_capacity(depth);
    for n in (bottom..right).rev() {
        let t = window.triple(n);
        let m = t.r().add(&t.p().mul(&b_next)).one_minus();
        let b = m.solve(t.q()).map_err(|_| ExitError::Degenerate { layer: n })?;
        if n <= at_index {
            chain.push(b.clone());
        }
        b_next = b;
    }
    // chain[0] is layer at_index, chain[k] layer at_index - k
    Ok(chain)
}

/// Left-exit matrix at `at_index` and the probability of descending `depth`
/// layers, on a strip truncated on the right by an absorbing boundary that
/// is pushed out until the answer is stable to `1e-10`.
pub fn left_exit(window: &EnvironmentWindow, at_index: i64, depth: usize) -> Result<LeftExit, ExitError> {
    if depth == 0 {
        return Err(ExitError::Argument("depth must be at least 1".into()));
    }
    let bottom = at_index - depth as i64 + 1;
    if !window.contains(bottom) {
        return Err(ExitError::InsufficientWindow {
            needed: bottom,
            available: window.lo(),
            residual: f64::NAN,
        });
    }
    let mut k: i64 = 8;
    let mut prev: Option<Vec<SquareMat>> = None;
    while k <= MAX_TRUNCATION as i64 {
        let right = at_index + k;
        if !window.contains(right - 1) {
            return Err(ExitError::Truncation(format!(
                "right boundary {right} beyond window end {}",
                window.hi()
            )));
        }
        let chain = left_exit_chain(window, at_index, depth, right)?;
        if let Some(p) = &prev {
            if p[0].max_abs_diff(&chain[0]) <= 1e-10 {
                let d = window.d();
                let product = chain.iter().fold(SquareMat::identity(d), |acc, m| acc.mul(m));
                let f = product.row_sums();
                return Ok(LeftExit {
                    eta_minus: chain[0].clone(),
                    f,
                    product,
                    chain,
                    right_boundary: right,
                });
            }
        }
        prev = Some(chain);
        k *= 2;
    }
    Err(ExitError::Truncation(format!(
        "left-exit matrix at {at_index} not stable by right boundary +{MAX_TRUNCATION}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strip_env::{sample_window, EnvironmentModel, LayerTriple};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_letter(rng: &mut ChaCha8Rng, d: usize) -> LayerTriple {
        let mut p = SquareMat::zeros(d);
        let mut r = SquareMat::zeros(d);
        let mut q = SquareMat::zeros(d);
        for i in 0..d {
            let pm = rng.gen_range(0.45..0.7);
            let qm = rng.gen_range(0.1..0.3);
            let rm = 1.0 - pm - qm;
            for (m, mass) in [(&mut p, pm), (&mut r, rm), (&mut q, qm)] {
                let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                for j in 0..d {
                    m[(i, j)] = mass * w[j] / s;
                }
            }
        }
        LayerTriple::new(p, r, q).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize) -> EnvironmentModel {
        let support = (0..3).map(|_| random_letter(rng, d)).collect();
        EnvironmentModel::iid(support, vec![0.3, 0.3, 0.4]).unwrap()
    }

    fn homogeneous_window(p: f64, r: f64, q: f64, lo: i64, hi: i64) -> EnvironmentWindow {
        let m = EnvironmentModel::homogeneous(LayerTriple::scalar(p, r, q).unwrap());
        sample_window(&m, lo, hi, 0).unwrap()
    }

    #[test]
    fn scalar_fixed_point() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, -300, 10);
        let seq = solve_eta(&w, BurnIn::Fixed(100), &SquareMat::scalar(1.0)).unwrap();
        for rec in seq.records() {
            assert!((rec.eta[(0, 0)] - 1.0).abs() < 1e-15);
            assert!((rec.gamma[(0, 0)] - 1.5).abs() < 1e-14);
            assert!((rec.a[(0, 0)] - 0.5).abs() < 1e-14);
            assert!((rec.b[0] - 1.5).abs() < 1e-14);
            assert_eq!(rec.c, 0.0);
        }
        // c ≡ 0 certifies immediately after the floor
        let seq = solve_eta_default(&w).unwrap();
        assert!(seq.burn_in_certified());
        assert_eq!(seq.burn_in(), BURN_IN_FLOOR);
        assert_eq!(seq.first_index(), -200);
    }

    #[test]
    fn rejects_bad_seed_and_short_window() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, 0, 50);
        assert!(matches!(solve_eta_default(&w), Err(ExitError::InsufficientWindow { .. })));
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, 0, 500);
        assert!(matches!(
            solve_eta(&w, BurnIn::Adaptive, &SquareMat::scalar(0.5)),
            Err(ExitError::Argument(_))
        ));
    }

    #[test]
    fn recursion_residual_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in 1..=4 {
            let model = random_model(&mut rng, d);
            let w = sample_window(&model, -600, 0, d as u64).unwrap();
            let seq = solve_eta_default(&w).unwrap();
            for n in seq.first_index() + 1..=seq.last_index() {
                let prev = &seq.get(n - 1).unwrap().eta;
                let rec = seq.get(n).unwrap();
                let t = w.triple(n);
                let again = resolvent(t.q(), prev, t.r()).unwrap().mul(t.p());
                assert!(rec.eta.sub(&again).norm() <= 1e-9);
                assert!(rec.a.is_nonnegative() && rec.gamma.is_nonnegative());
                assert!(rec.b.iter().all(|&b| b >= 1.0));
                assert!((0.0..1.0).contains(&rec.c));
            }
        }
    }

    #[test]
    fn seed_forgetting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 3);
        let w = sample_window(&model, -400, 0, 1).unwrap();
        let a = solve_eta(&w, BurnIn::Fixed(200), &SquareMat::uniform_stochastic(3)).unwrap();
        let b = solve_eta(&w, BurnIn::Fixed(200), &SquareMat::identity(3)).unwrap();
        for (x, y) in a.records().iter().zip(b.records()) {
            assert!(x.eta.sub(&y.eta).norm() <= 1e-10);
        }
        assert_eq!(a.seed_id(), "uniform");
        assert_eq!(b.seed_id(), "identity");
    }

    #[test]
    fn oracle_closed_forms_d1() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, -200, 1);
        let res = absorption_oracle(&w, 1, (0, 0), 100).unwrap();
        assert!((res.exit_dist[0] - 1.0).abs() < 1e-12);
        assert!(res.leak_left < 1e-12);
        assert!((res.mean_time - 3.0).abs() < 1e-9);
        assert!((res.second_moment_time - 33.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_leak_decreases_with_depth() {
        let w = homogeneous_window(0.55, 0.0, 0.45, -300, 1);
        let leaks: Vec<f64> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&depth| absorption_oracle(&w, 1, (0, 0), depth).unwrap().leak_left)
            .collect();
        assert!(leaks.windows(2).all(|p| p[1] < p[0]), "{leaks:?}");
    }

    #[test]
    fn oracle_one_step_exit() {
        let m = EnvironmentModel::homogeneous(LayerTriple::right_drift(2, 1e-13).unwrap());
        let w = sample_window(&m, -100, 1, 0).unwrap();
        let lo = absorption_oracle_adaptive(&w, 1, 0).unwrap();
        for i in 0..2 {
            assert!((lo.mean_time[i] - 1.0).abs() < 1e-10);
            assert!((lo.exit[(i, i)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_agrees_with_dense_solve() {
        // independent check of the block sweep: assemble the full generator
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = random_model(&mut rng, 2);
        let w = sample_window(&model, -10, 1, 4).unwrap();
        let depth = 6usize;
        let target = 1i64;
        let left = target - depth as i64;
        let d = 2;
        let n_states = depth * d;
        let idx = |layer: i64, h: usize| ((layer - left) as usize) * d + h;
        let mut sys = vec![vec![0.0; n_states]; n_states];
        let mut rhs = vec![vec![0.0; d]; n_states];
        for layer in left..target {
            let t = w.triple(layer);
            for i in 0..d {
                let s = idx(layer, i);
                sys[s][s] += 1.0;
                for j in 0..d {
                    sys[s][idx(layer, j)] -= t.r()[(i, j)];
                    if layer + 1 == target {
                        rhs[s][j] += t.p()[(i, j)];
                    } else {
                        sys[s][idx(layer + 1, j)] -= t.p()[(i, j)];
                    }
                    if layer > left {
                        sys[s][idx(layer - 1, j)] -= t.q()[(i, j)];
                    }
                }
            }
        }
        // Gauss-Jordan
        let mut a = sys.clone();
        let mut b = rhs.clone();
        for col in 0..n_states {
            let piv = (col..n_states).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            let pv = a[col][col];
            for row in 0..n_states {
                if row != col {
                    let f = a[row][col] / pv;
                    for k in 0..n_states {
                        a[row][k] -= f * a[col][k];
                    }
                    for k in 0..d {
                        b[row][k] -= f * b[col][k];
                    }
                }
            }
        }
        let oracle = absorption_oracle_layer(&w, target, 0, depth).unwrap();
        for i in 0..d {
            let s = idx(0, i);
            for j in 0..d {
                assert!((b[s][j] / a[s][s] - oracle.exit[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn eta_matches_oracle_random_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in 1..=4 {
            let model = random_model(&mut rng, d);
            let w = sample_window(&model, -3000, 2, 100 + d as u64).unwrap();
            let seq = solve_eta_default(&w).unwrap();
            let oracle = absorption_oracle_adaptive(&w, 1, 0).unwrap();
            let eta = &seq.get(0).unwrap().eta;
            assert!(eta.max_abs_diff(&oracle.exit) <= 1e-8, "d = {d}");
        }
    }

    #[test]
    fn pi_examples() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, -300, 0);
        let seq = solve_eta_default(&w).unwrap();
        let pi = compute_pi(&seq, 0, 1e-12).unwrap();
        assert_eq!(pi.pi, vec![1.0]);
        assert_eq!(pi.collapse_residual, 0.0);

        // p with identical rows forces η = J/2 exactly
        let half = SquareMat::filled(2, 0.25);
        let letter = LayerTriple::new(half.clone(), SquareMat::filled(2, 0.1), SquareMat::filled(2, 0.15)).unwrap();
        let w = sample_window(&EnvironmentModel::homogeneous(letter), -300, 0, 0).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let pi = compute_pi(&seq, 0, 1e-12).unwrap();
        assert_eq!(pi.depth, 1);
        assert!((pi.pi[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pi_start_independence_and_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = random_model(&mut rng, 3);
        let w = sample_window(&model, -1000, 20, 5).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let p1 = compute_pi_from(&seq, 0, 1e-10, 0).unwrap();
        let p3 = compute_pi_from(&seq, 0, 1e-10, 2).unwrap();
        for (a, b) in p1.pi.iter().zip(&p3.pi) {
            assert!((a - b).abs() <= 1e-10);
        }
        for n in 0..15 {
            let pn = compute_pi(&seq, n, 1e-13).unwrap();
            let pn1 = compute_pi(&seq, n + 1, 1e-13).unwrap();
            let prop = seq.get(n).unwrap().eta.vec_mul(&pn.pi);
            for (a, b) in prop.iter().zip(&pn1.pi) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert!(pn.pi.iter().all(|&x| x > 0.0));
            assert!((pn.pi.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn pi_reports_exhausted_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = random_model(&mut rng, 2);
        let w = sample_window(&model, -110, 0, 5).unwrap();
        let seq = solve_eta(&w, BurnIn::Fixed(100), &SquareMat::uniform_stochastic(2)).unwrap();
        match compute_pi(&seq, 0, 1e-300) {
            Err(ExitError::InsufficientWindow { residual, .. }) => assert!(residual.is_finite()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn left_exit_examples() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, -10, 400);
        let le = left_exit(&w, 0, 3).unwrap();
        assert!((le.eta_minus[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((le.f[0] - 0.125).abs() < 1e-10);

        let m = EnvironmentModel::homogeneous(LayerTriple::right_drift(2, 1e-13).unwrap());
        let w = sample_window(&m, -10, 400, 0).unwrap();
        let le = left_exit(&w, 0, 2).unwrap();
        assert!(le.eta_minus.norm() < 1e-12);
        assert!(le.f.iter().all(|&f| f < 1e-20));
    }

    #[test]
    fn c4_examples() {
        let w = homogeneous_window(2.0 / 3.0, 0.0, 1.0 / 3.0, -300, 0);
        let rep = verify_c4(&solve_eta_default(&w).unwrap(), C4_FLOOR);
        assert!(rep.pass && rep.min_entry == 1.0);

        // column 2 of p and r vanish: height 2 of the next layer is never the entrance
        let p = SquareMat::from_rows(&[&[0.5, 0.0], &[0.5, 0.0]]).unwrap();
        let r = SquareMat::from_rows(&[&[0.1, 0.0], &[0.1, 0.0]]).unwrap();
        let q = SquareMat::from_rows(&[&[0.2, 0.2], &[0.2, 0.2]]).unwrap();
        let m = EnvironmentModel::homogeneous(LayerTriple::new(p, r, q).unwrap());
        let w = sample_window(&m, -300, 0, 0).unwrap();
        let seq = solve_eta(&w, BurnIn::Fixed(100), &SquareMat::uniform_stochastic(2)).unwrap();
        let rep = verify_c4(&seq, C4_FLOOR);
        assert!(!rep.pass && rep.min_entry == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 2);
        let w = sample_window(&model, -400, 0, 0).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let rep = verify_c4(&seq, C4_FLOOR);
        assert!(rep.pass && rep.min_entry > 0.0);
        let oracle = absorption_oracle_adaptive(&w, 1, 0).unwrap();
        assert!(oracle.exit.min_entry() > 0.0);
    }

    #[test]
    fn csv_export_has_all_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 2);
        let w = sample_window(&model, -200, 0, 0).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let mut buf = Vec::new();
        seq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 1 + 12 + 2 + 1);
        assert_eq!(text.lines().count(), seq.records().len() + 1);
    }
}
