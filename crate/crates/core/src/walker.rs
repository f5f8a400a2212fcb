//! Quenched simulation of the walk, renewal extraction and the environment
//! seen from the particle.
//!
//! Heights are 0-based in the API and 1-based in CSV exports.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exitprob::{compute_pi, solve_eta_default, ExitError};
use crate::seeding::{derive_seed, fnv1a, rng_for};
use crate::strip_env::{sample_window, sample_window_arc, EnvError, EnvironmentModel, EnvironmentWindow, CHUNK};

/// Layers kept to the left of 0 when the start height is drawn from `π`.
pub const PI_MARGIN: i64 = 320;
/// Tolerance for the column collapse behind the `π` start.
pub const PI_TOL: f64 = 1e-12;
/// Default guard band for renewal certification.
pub const DEFAULT_GUARD: i64 = 50;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("walk reached layer {index} outside window [{lo}, {hi}]")]
    WindowExhausted { index: i64, lo: i64, hi: i64 },
    #[error("start law: {0}")]
    StartLaw(#[from] ExitError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("no height escapes: estimates {0:?}")]
    NoEscape(Vec<f64>),
    #[error("bad argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartLaw {
    Height(usize),
    /// Entrance law of layer 0, computed from the window to its left.
    Pi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Horizon(u64),
    Level(i64),
    /// Stop at `level` or after `max_steps` steps, whichever comes first.
    LevelWithin { level: i64, max_steps: u64 },
}

/// Cumulative step laws, one row of length `3d` per (letter, height):
/// up-moves, then level moves, then down-moves.
#[derive(Debug, Clone)]
struct StepTable {
    d: usize,
    cum: Vec<f64>,
}

impl StepTable {
    fn new(model: &EnvironmentModel) -> Self {
        let d = model.d();
        let mut cum = Vec::with_capacity(model.support().len() * d * 3 * d);
        for t in model.support() {
            for i in 0..d {
                let mut acc = 0.0;
                for m in [t.p(), t.r(), t.q()] {
                    for &x in m.row(i) {
                        acc += x;
                        cum.push(acc);
                    }
                }
                *cum.last_mut().expect("nonempty row") = f64::INFINITY;
            }
        }
        StepTable { d, cum }
    }

    /// `(level increment, new height)`.
    #[inline]
    fn step(&self, letter: usize, height: usize, u: f64) -> (i64, usize) {
        let w = 3 * self.d;
        let row = &self.cum[(letter * self.d + height) * w..][..w];
        let k = row.iter().position(|&c| u < c).unwrap_or(w - 1);
        (1 - (k / self.d) as i64, k % self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Levels `ξ_0 = 0, ξ_1, …`.
    pub xi: Vec<i64>,
    /// Heights `Y_t`.
    pub y: Vec<u8>,
    /// `hitting[n] = T_n` for `n = 0..=max level`.
    pub hitting: Vec<u64>,
    pub start_law: StartLaw,
    pub seed: u64,
    pub window_seed: u64,
    /// Window extent when the walk stopped.
    pub window_range: (i64, i64),
    /// Set when a `LevelWithin` stop ran out of steps.
    pub truncated: bool,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn final_level(&self) -> i64 {
        *self.xi.last().expect("nonempty")
    }

    pub fn max_level(&self) -> i64 {
        self.hitting.len() as i64 - 1
    }

    pub fn hitting_time(&self, n: i64) -> Option<u64> {
        usize::try_from(n).ok().and_then(|k| self.hitting.get(k).copied())
    }

    /// `τ_n = T_n - T_{n-1}` for `n = 1..=max level`.
    pub fn crossings(&self) -> Vec<u64> {
        self.hitting.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// CSV with columns `t, xi, Y`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "xi", "Y"])?;
        for (t, (x, y)) in self.xi.iter().zip(&self.y).enumerate() {
            w.write_record([t.to_string(), x.to_string(), (*y as usize + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pi_start(window: &EnvironmentWindow) -> Result<Vec<f64>, WalkError> {
    let left = window.slice(window.lo(), -1)?;
    let seq = solve_eta_default(&left)?;
    Ok(compute_pi(&seq, 0, PI_TOL)?.pi)
}

/// `π` at layer 0, widening the window to the left while it is too short.
fn pi_start_growing(window: &mut EnvironmentWindow) -> Result<Vec<f64>, WalkError> {
    if window.lo() > -PI_MARGIN || window.hi() < 0 {
        let lo = window.lo().min(-PI_MARGIN);
        let hi = window.hi().max(0);
        *window = sample_window_arc(window.model_arc().clone(), lo, hi, window.seed())?;
    }
    loop {
        match pi_start(window) {
            // widen only while the columns are visibly collapsing
            Err(WalkError::StartLaw(ExitError::InsufficientWindow { residual, .. }))
                if residual < 1e-2 && window.lo() > -(1 << 20) =>
            {
                let lo = window.lo() * 2;
                window.ensure_covers(lo, window.hi());
            }
            other => return other,
        }
    }
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn walk(
    window: &mut EnvironmentWindow,
    grow: bool,
    start: StartLaw,
    stop: Stop,
    seed: u64,
) -> Result<Trajectory, WalkError> {
    let d = window.d();
    let mut rng = rng_for(seed, "walk", 0);
    let height = match start {
        StartLaw::Height(h) if h < d => h,
        StartLaw::Height(h) => return Err(WalkError::Argument(format!("height {h} outside strip of width {d}"))),
        StartLaw::Pi => {
            let pi = if grow { pi_start_growing(window)? } else { pi_start(window)? };
            draw(&pi, &mut rng)
        }
    };
    let table = StepTable::new(window.model());
    let (horizon, target) = match stop {
        Stop::Horizon(h) => (h, i64::MAX),
        Stop::Level(n) => (u64::MAX, n),
        Stop::LevelWithin { level, max_steps } => (max_steps, level),
    };
    if target <= 0 {
        return Err(WalkError::Argument(format!("target level {target} must be positive")));
    }
    let capacity = horizon.min(1 << 16) as usize + 1;
    let mut xi = Vec::with_capacity(capacity);
    let mut y = Vec::with_capacity(capacity);
    let mut hitting = vec![0u64];
    let (mut level, mut h) = (0i64, height);
    xi.push(level);
    y.push(h as u8);
    let mut t = 0u64;
    let mut lo = window.lo();
    let mut hi = window.hi();
    while t < horizon && level < target {
        if level < lo || level > hi {
            if !grow {
                return Err(WalkError::WindowExhausted { index: level, lo, hi });
            }
            window.ensure_covers(level - CHUNK, level + CHUNK);
            lo = window.lo();
            hi = window.hi();
        }
        let letter = window.letter_indices()[(level - lo) as usize] as usize;
        let (dl, nh) = table.step(letter, h, rng.gen::<f64>());
        level += dl;
        h = nh;
        t += 1;
        xi.push(level);
        y.push(h as u8);
        if level == hitting.len() as i64 {
            hitting.push(t);
        }
    }
    Ok(Trajectory {
        xi,
        y,
        hitting,
        start_law: start,
        seed,
        window_seed: window.seed(),
        window_range: (window.lo(), window.hi()),
        truncated: matches!(stop, Stop::LevelWithin { .. }) && level < target,
    })
}

/// Simulates on a fixed window; leaving it is an error.
pub fn simulate(window: &EnvironmentWindow, start: StartLaw, stop: Stop, seed: u64) -> Result<Trajectory, WalkError> {
    let mut w = window.clone();
    walk(&mut w, false, start, stop, seed)
}

/// Simulates and grows the window in chunks whenever the walk reaches an edge.
pub fn simulate_growing(
    window: &mut EnvironmentWindow,
    start: StartLaw,
    stop: Stop,
    seed: u64,
) -> Result<Trajectory, WalkError> {
    walk(window, true, start, stop, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IStarSelection {
    pub i_star: usize,
    pub escape: Vec<f64>,
    pub stderr: Vec<f64>,
    pub budget: usize,
    pub guard: i64,
}

/// Whether the walk from `(0, height)` reaches `guard` without revisiting a
/// level `≤ 0`.
fn escapes(model: &EnvironmentModel, table: &StepTable, height: usize, guard: i64, env_seed: u64, walk_seed: u64) -> Result<bool, WalkError> {
    let window = sample_window(model, 0, guard, env_seed)?;
    let letters = window.letter_indices();
    let mut rng = rng_for(walk_seed, "walk", 0);
    let (mut level, mut h) = (0i64, height);
    loop {
        let (dl, nh) = table.step(letters[level as usize] as usize, h, rng.gen::<f64>());
        level += dl;
        h = nh;
        if level <= 0 {
            return Ok(false);
        }
        if level >= guard {
            return Ok(true);
        }
    }
}

/// Monte Carlo escape probability per start height; returns the smallest
/// height whose estimate lies within three joint standard errors of the best.
pub fn select_istar(model: &EnvironmentModel, budget: usize, guard: i64, seed: u64) -> Result<IStarSelection, WalkError> {
    if budget < 2 || guard < 1 {
        return Err(WalkError::Argument("budget must be at least 2 and guard at least 1".into()));
    }
    let table = StepTable::new(model);
    let d = model.d();
    let mut escape = Vec::with_capacity(d);
    let mut stderr = Vec::with_capacity(d);
    for i in 0..d {
        let env_label = format!("istar-env-{i}");
        let walk_label = format!("istar-walk-{i}");
        let hits = (0..budget as u64)
            .into_par_iter()
            .map(|k| escapes(model, &table, i, guard, derive_seed(seed, &env_label, k), derive_seed(seed, &walk_label, k)).map(u64::from))
            .collect::<Result<Vec<u64>, WalkError>>()?
            .into_iter()
            .sum::<u64>();
        let p = hits as f64 / budget as f64;
        escape.push(p);
        stderr.push((p * (1.0 - p) / budget as f64).sqrt());
    }
    let best = (0..d).max_by(|&a, &b| escape[a].total_cmp(&escape[b]).then(b.cmp(&a))).expect("d >= 1");
    if escape[best] == 0.0 {
        return Err(WalkError::NoEscape(escape));
    }
    let i_star = (0..d)
        .find(|&i| escape[best] - escape[i] <= 3.0 * (stderr[best].powi(2) + stderr[i].powi(2)).sqrt())
        .unwrap_or(best);
    Ok(IStarSelection {
        i_star,
        escape,
        stderr,
        budget,
        guard,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalRecord {
    pub i_star: usize,
    pub guard: i64,
    /// `(ρ_k, ξ_{ρ_k})`.
    pub renewals: Vec<(u64, i64)>,
    /// `(Δξ, Δρ)` between consecutive renewals.
    pub increments: Vec<(i64, u64)>,
}

impl RenewalRecord {
    /// CSV with columns `k, rho, xi, d_xi, d_rho`; the increment columns of
    /// row `k` refer to the step from renewal `k - 1` to `k`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "rho", "xi", "d_xi", "d_rho"])?;
        for (k, (rho, xi)) in self.renewals.iter().enumerate() {
            let (dx, dr) = if k == 0 {
                (String::new(), String::new())
            } else {
                let (a, b) = self.increments[k - 1];
                (a.to_string(), b.to_string())
            };
            w.write_record([(k + 1).to_string(), rho.to_string(), xi.to_string(), dx, dr])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Times `m` with `Y_m = i*`, `ξ_m = max_{j ≤ m} ξ_j < min_{j > m} ξ_j` and
/// `ξ_m ≤ max ξ - guard`.
pub fn extract_renewals(traj: &Trajectory, i_star: usize, guard: i64) -> RenewalRecord {
    let n = traj.xi.len();
    let mut suffix_min = vec![i64::MAX; n];
    for m in (0..n.saturating_sub(1)).rev() {
        suffix_min[m] = suffix_min[m + 1].min(traj.xi[m + 1]);
    }
    let ceiling = traj.xi.iter().copied().max().unwrap_or(0) - guard;
    let mut running_max = i64::MIN;
    let mut renewals = Vec::new();
    for m in 0..n {
        let x = traj.xi[m];
        running_max = running_max.max(x);
        if traj.y[m] as usize == i_star && x == running_max && x < suffix_min[m] && x <= ceiling {
            renewals.push((m as u64, x));
        }
    }
    let increments = renewals.windows(2).map(|w| (w[1].1 - w[0].1, w[1].0 - w[0].0)).collect();
    RenewalRecord {
        i_star,
        guard,
        renewals,
        increments,
    }
}

/// Independent re-scan of every accepted renewal against the predicate used
/// by [`extract_renewals`], plus the no-return property of each segment.
pub fn renewals_are_valid(traj: &Trajectory, rec: &RenewalRecord) -> bool {
    let n = traj.xi.len();
    let mut prefix_max = Vec::with_capacity(n);
    let mut acc = i64::MIN;
    for &x in &traj.xi {
        acc = acc.max(x);
        prefix_max.push(acc);
    }
    let mut future_min = vec![i64::MAX; n];
    for m in (0..n.saturating_sub(1)).rev() {
        future_min[m] = traj.xi[m + 1].min(future_min[m + 1]);
    }
    let top = acc;
    let each = rec.renewals.iter().all(|&(m, x)| {
        let m = m as usize;
        m < n
            && traj.xi[m] == x
            && traj.y[m] as usize == rec.i_star
            && prefix_max[m] == x
            && future_min[m] > x
            && x <= top - rec.guard
    });
    let ordered = rec.renewals.windows(2).all(|w| w[1].0 > w[0].0);
    let segments = rec
        .renewals
        .windows(2)
        .all(|w| traj.xi[w[0].0 as usize..w[1].0 as usize].iter().min() == Some(&w[0].1));
    each && ordered && segments
}

/// Counts of `(signature, height)` for the environment seen from the walker.
///
/// A signature is the 64-bit FNV-1a hash of the little-endian `i64` values
/// `round(1e6 · x)` over the entries of `p`, `r`, `q` (row-major, in that
/// order) of layers `ξ - W, …, ξ + W`, taken in increasing layer order.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvfpHistogram {
    pub radius: usize,
    pub bins: BTreeMap<(u64, usize), u64>,
    pub total: u64,
    /// Letter indices of each signature's block.
    pub blocks: BTreeMap<u64, Vec<u16>>,
}

impl EvfpHistogram {
    pub fn new(radius: usize) -> Self {
        EvfpHistogram {
            radius,
            ..Default::default()
        }
    }

    pub fn add(&mut self, signature: u64, height: usize, block: &[u16]) {
        *self.bins.entry((signature, height)).or_insert(0) += 1;
        self.total += 1;
        if !self.blocks.contains_key(&signature) {
            self.blocks.insert(signature, block.to_vec());
        }
    }

    pub fn merge(mut self, other: EvfpHistogram) -> Self {
        for (k, c) in other.bins {
            *self.bins.entry(k).or_insert(0) += c;
        }
        self.total += other.total;
        self.blocks.extend(other.blocks);
        self
    }

    pub fn height_marginal(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for ((_, h), c) in &self.bins {
            *out.entry(*h).or_insert(0) += c;
        }
        out
    }

    pub fn signature_marginal(&self) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for ((s, _), c) in &self.bins {
            *out.entry(*s).or_insert(0) += c;
        }
        out
    }

    pub fn tv_distance(&self, other: &EvfpHistogram) -> f64 {
        crate::stats::total_variation(&self.bins, &other.bins)
    }

    /// CSV with columns `signature_hash, height, count`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["signature_hash", "height", "count"])?;
        for ((s, h), c) in &self.bins {
            w.write_record([format!("{s:016x}"), (h + 1).to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with columns `signature_hash, letters` (support indices separated
    /// by `;`, lowest layer first).
    pub fn write_sidecar_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["signature_hash", "letters"])?;
        for (s, block) in &self.blocks {
            let letters: Vec<String> = block.iter().map(u16::to_string).collect();
            w.write_record([format!("{s:016x}"), letters.join(";")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quantized bytes of each support letter.
fn letter_bytes(model: &EnvironmentModel) -> Vec<Vec<u8>> {
    model
        .support()
        .iter()
        .map(|t| {
            [t.p(), t.r(), t.q()]
                .iter()
                .flat_map(|m| m.as_slice().iter().flat_map(|x| ((x * 1e6).round() as i64).to_le_bytes()))
                .collect()
        })
        .collect()
}

struct SignatureCache {
    radius: i64,
    bytes: Vec<Vec<u8>>,
    memo: HashMap<i64, (u64, Vec<u16>)>,
}

impl SignatureCache {
    fn new(model: &EnvironmentModel, radius: usize) -> Self {
        SignatureCache {
            radius: radius as i64,
            bytes: letter_bytes(model),
            memo: HashMap::new(),
        }
    }

    fn get(&mut self, window: &EnvironmentWindow, center: i64) -> Result<&(u64, Vec<u16>), WalkError> {
        if !self.memo.contains_key(&center) {
            let (lo, hi) = (center - self.radius, center + self.radius);
            if !window.contains(lo) || !window.contains(hi) {
                let index = if window.contains(lo) { hi } else { lo };
                return Err(WalkError::WindowExhausted {
                    index,
                    lo: window.lo(),
                    hi: window.hi(),
                });
            }
            let block: Vec<u16> = (lo..=hi).map(|n| window.letter_index(n) as u16).collect();
            let buf: Vec<u8> = block.iter().flat_map(|&l| self.bytes[l as usize].iter().copied()).collect();
            self.memo.insert(center, (fnv1a(&buf), block));
        }
        Ok(&self.memo[&center])
    }
}

/// Signature of the `(2W + 1)`-layer block centred at `center`.
pub fn signature(window: &EnvironmentWindow, center: i64, radius: usize) -> Result<u64, WalkError> {
    SignatureCache::new(window.model(), radius).get(window, center).map(|s| s.0)
}

/// One count per time step in `time_range` at `(signature around ξ_t, Y_t)`.
pub fn evfp_accumulate(
    traj: &Trajectory,
    window: &EnvironmentWindow,
    radius: usize,
    time_range: Range<usize>,
) -> Result<EvfpHistogram, WalkError> {
    if time_range.end > traj.xi.len() {
        return Err(WalkError::Argument(format!(
            "time range ends at {} but the trajectory has {} states",
            time_range.end,
            traj.xi.len()
        )));
    }
    let mut cache = SignatureCache::new(window.model(), radius);
    let mut hist = EvfpHistogram::new(radius);
    for t in time_range {
        let (sig, block) = cache.get(window, traj.xi[t])?;
        hist.add(*sig, traj.y[t] as usize, block);
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QReference {
    pub histogram: EvfpHistogram,
    pub replicas: usize,
    /// Excursions that exceeded the step cap and were dropped.
    pub discarded: usize,
}

/// Occupation counts over `[0, T_1)` for walks started from `π`, one fresh
/// environment per replica.
pub fn q_reference(model: &EnvironmentModel, radius: usize, replicas: usize, seed: u64, step_cap: u64) -> Result<QReference, WalkError> {
    let results = (0..replicas as u64)
        .into_par_iter()
        .map(|k| -> Result<Option<EvfpHistogram>, WalkError> {
            let r = radius as i64;
            let mut window = sample_window(model, -PI_MARGIN, 1 + r, derive_seed(seed, "qref-env", k))?;
            let traj = simulate_growing(&mut window, StartLaw::Pi, Stop::LevelWithin { level: 1, max_steps: step_cap }, derive_seed(seed, "qref-walk", k))?;
            if traj.truncated {
                return Ok(None);
            }
            let lowest = traj.xi.iter().copied().min().unwrap_or(0);
            window.ensure_covers(lowest - r, 1 + r);
            evfp_accumulate(&traj, &window, radius, 0..traj.steps()).map(Some)
        })
        .collect::<Result<Vec<_>, WalkError>>()?;
    let mut histogram = EvfpHistogram::new(radius);
    let mut discarded = 0;
    for h in results {
        match h {
            Some(h) => histogram = histogram.merge(h),
            None => discarded += 1,
        }
    }
    Ok(QReference {
        histogram,
        replicas,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exitprob::{absorption_oracle_layer, BurnIn};
    use crate::smallmat::SquareMat;
    use crate::stats::{ks_two_sample, lag1_autocorrelation};
    use crate::strip_env::LayerTriple;

    fn drift() -> EnvironmentModel {
        EnvironmentModel::homogeneous(LayerTriple::right_drift(2, 1e-13).unwrap())
    }

    fn scalar(p: f64, r: f64, q: f64) -> EnvironmentModel {
        EnvironmentModel::homogeneous(LayerTriple::scalar(p, r, q).unwrap())
    }

    fn mixed_d2() -> EnvironmentModel {
        let a = LayerTriple::new(
            SquareMat::from_rows(&[&[0.4, 0.1], &[0.15, 0.3]]).unwrap(),
            SquareMat::from_rows(&[&[0.1, 0.1], &[0.05, 0.1]]).unwrap(),
            SquareMat::from_rows(&[&[0.1, 0.2], &[0.2, 0.2]]).unwrap(),
        )
        .unwrap();
        let b = LayerTriple::new(
            SquareMat::from_rows(&[&[0.3, 0.15], &[0.1, 0.35]]).unwrap(),
            SquareMat::from_rows(&[&[0.1, 0.05], &[0.1, 0.1]]).unwrap(),
            SquareMat::from_rows(&[&[0.2, 0.2], &[0.15, 0.2]]).unwrap(),
        )
        .unwrap();
        EnvironmentModel::iid(vec![a, b], vec![0.6, 0.4]).unwrap()
    }

    #[test]
    fn deterministic_drift_walks_straight() {
        let w = sample_window(&drift(), -10, 200, 0).unwrap();
        let t = simulate(&w, StartLaw::Height(1), Stop::Horizon(100), 5).unwrap();
        assert!(t.xi.iter().enumerate().all(|(k, &x)| x == k as i64));
        assert!(t.hitting.iter().enumerate().all(|(k, &h)| h == k as u64));
        assert!(t.y.iter().all(|&y| y == 1));
        let rec = extract_renewals(&t, 1, 10);
        assert_eq!(rec.renewals.len(), 91);
        assert!(rec.increments.iter().all(|&inc| inc == (1, 1)));
    }

    #[test]
    fn determinism_and_invariants() {
        let model = mixed_d2();
        let w = sample_window(&model, -2000, 2000, 9).unwrap();
        let a = simulate(&w, StartLaw::Pi, Stop::Horizon(3000), 1).unwrap();
        let b = simulate(&w, StartLaw::Pi, Stop::Horizon(3000), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.xi[0], 0);
        assert!(a.xi.windows(2).all(|p| (p[1] - p[0]).abs() <= 1));
        assert!(a.hitting.windows(2).all(|p| p[1] > p[0]));
        assert!(a.crossings().iter().all(|&c| c >= 1));
        for (n, &t) in a.hitting.iter().enumerate() {
            assert_eq!(a.xi[t as usize], n as i64);
            assert!(a.xi[..t as usize].iter().all(|&x| x < n as i64));
        }
    }

    #[test]
    fn strict_window_errors_and_growing_window_extends() {
        let model = scalar(0.6, 0.0, 0.4);
        let w = sample_window(&model, -5, 5, 1).unwrap();
        assert!(matches!(
            simulate(&w, StartLaw::Height(0), Stop::Level(50), 3),
            Err(WalkError::WindowExhausted { .. })
        ));
        let mut g = w.clone();
        let t = simulate_growing(&mut g, StartLaw::Height(0), Stop::Level(50), 3).unwrap();
        assert_eq!(t.final_level(), 50);
        assert!(g.hi() >= 50);
    }

    #[test]
    fn one_step_law_matches_rows() {
        let model = mixed_d2();
        let table = StepTable::new(&model);
        let letter = model.support()[1].clone();
        let mut rng = rng_for(4, "step", 0);
        let n = 100_000;
        let mut counts = [0u64; 6];
        for _ in 0..n {
            let (dl, h) = table.step(1, 0, rng.gen::<f64>());
            counts[((1 - dl) as usize) * 2 + h] += 1;
        }
        let probs: Vec<f64> = [letter.p(), letter.r(), letter.q()].iter().flat_map(|m| m.row(0).to_vec()).collect();
        for (c, p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn exit_height_matches_eta_row() {
        let model = mixed_d2();
        let w = sample_window(&model, -3000, 1, 77).unwrap();
        let oracle = absorption_oracle_layer(&w, 1, 0, 2048).unwrap();
        let seq = crate::exitprob::solve_eta(&w, BurnIn::Adaptive, &SquareMat::uniform_stochastic(2)).unwrap();
        assert!(seq.get(0).unwrap().eta.max_abs_diff(&oracle.exit) < 1e-8);
        let n = 100_000u64;
        let exits: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|k| {
                let t = simulate(&w, StartLaw::Height(1), Stop::Level(1), derive_seed(11, "exit", k)).unwrap();
                t.y[t.hitting[1] as usize] as usize
            })
            .collect();
        let frac = exits.iter().filter(|&&h| h == 0).count() as f64 / n as f64;
        let p = oracle.exit[(1, 0)];
        assert!((frac - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{frac} vs {p}");
    }

    #[test]
    fn istar_examples() {
        let one = select_istar(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), 2000, 30, 1).unwrap();
        assert_eq!(one.i_star, 0);
        assert!((one.escape[0] - 1.0 / 3.0).abs() <= 4.0 * one.stderr[0]);

        // symmetric under the height swap
        let p = SquareMat::from_rows(&[&[0.4, 0.2], &[0.2, 0.4]]).unwrap();
        let r = SquareMat::from_rows(&[&[0.05, 0.05], &[0.05, 0.05]]).unwrap();
        let q = SquareMat::from_rows(&[&[0.2, 0.1], &[0.1, 0.2]]).unwrap();
        let sym = EnvironmentModel::homogeneous(LayerTriple::new(p, r, q).unwrap());
        let s = select_istar(&sym, 4000, 30, 2).unwrap();
        assert_eq!(s.i_star, 0);
        let joint = (s.stderr[0].powi(2) + s.stderr[1].powi(2)).sqrt();
        assert!((s.escape[0] - s.escape[1]).abs() <= 3.0 * joint);

        let model = mixed_d2();
        let a = select_istar(&model, 4000, 30, 3).unwrap();
        let b = select_istar(&model, 4000, 30, 4).unwrap();
        for i in 0..2 {
            let joint = (a.stderr[i].powi(2) + b.stderr[i].powi(2)).sqrt();
            assert!((a.escape[i] - b.escape[i]).abs() <= 3.0 * joint);
        }
    }

    #[test]
    fn renewals_are_sound_and_counted() {
        let model = scalar(2.0 / 3.0, 0.0, 1.0 / 3.0);
        let mut w = sample_window(&model, -100, 100, 0).unwrap();
        let t = simulate_growing(&mut w, StartLaw::Height(0), Stop::Horizon(1_000_000), 8).unwrap();
        let rec = extract_renewals(&t, 0, DEFAULT_GUARD);
        let max = t.max_level();
        assert!(renewals_are_valid(&t, &rec));
        let mut broken = rec.clone();
        broken.renewals[3].1 += 1;
        assert!(!renewals_are_valid(&t, &broken));
        // level l carries a renewal iff the walk never returns to l after T_{l+1}:
        // probability 1 - q/p = 1/2 per eligible level
        let k = rec.renewals.len() as f64;
        let eligible = (max - DEFAULT_GUARD + 1) as f64;
        assert!((k - eligible / 2.0).abs() <= 3.0 * k.sqrt(), "{k} vs {}", eligible / 2.0);

        let dx: Vec<f64> = rec.increments.iter().map(|i| i.0 as f64).collect();
        let dr: Vec<f64> = rec.increments.iter().map(|i| i.1 as f64).collect();
        let bound = 3.0 / (dx.len() as f64).sqrt();
        for s in [&dx, &dr] {
            assert!(lag1_autocorrelation(s).abs() <= bound);
            let (a, b) = s.split_at(s.len() / 2);
            assert!(ks_two_sample(a, b).1 > 0.01);
        }
    }

    #[test]
    fn evfp_examples() {
        let w = sample_window(&drift(), -10, 300, 0).unwrap();
        let t = simulate(&w, StartLaw::Height(0), Stop::Horizon(200), 1).unwrap();
        let h = evfp_accumulate(&t, &w, 2, 0..200).unwrap();
        assert_eq!(h.signature_marginal().len(), 1);
        assert_eq!(h.total, 200);
        assert_eq!(h.height_marginal()[&0], 200);
        assert!(matches!(
            evfp_accumulate(&t, &w, 20, 0..10),
            Err(WalkError::WindowExhausted { .. })
        ));

        let one = EnvironmentModel::homogeneous(LayerTriple::right_drift(1, 1e-13).unwrap());
        let q = q_reference(&one, 1, 50, 3, 1000).unwrap();
        assert_eq!(q.discarded, 0);
        assert_eq!(q.histogram.bins.len(), 1);
        assert_eq!(q.histogram.total, 50);

        let q = q_reference(&scalar(2.0 / 3.0, 0.0, 1.0 / 3.0), 1, 200, 3, 100_000).unwrap();
        assert_eq!(q.histogram.bins.len(), 1);
    }

    #[test]
    fn evfp_halves_are_close() {
        let model = mixed_d2();
        let mut w = sample_window(&model, -100, 100, 5).unwrap();
        let t = simulate_growing(&mut w, StartLaw::Height(0), Stop::Horizon(200_000), 6).unwrap();
        let lo = t.xi.iter().copied().min().unwrap();
        w.ensure_covers(lo - 1, t.max_level() + 1);
        let a = evfp_accumulate(&t, &w, 0, 0..100_000).unwrap();
        let b = evfp_accumulate(&t, &w, 0, 100_000..200_000).unwrap();
        assert!(a.tv_distance(&b) <= 0.02, "{}", a.tv_distance(&b));
    }

    #[test]
    fn signature_is_stable() {
        let w = sample_window(&scalar(0.5, 0.0, 0.5), 0, 10, 0).unwrap();
        let mut bytes = Vec::new();
        for _ in 0..3 {
            for x in [500_000i64, 0, 500_000] {
                bytes.extend(x.to_le_bytes());
            }
        }
        assert_eq!(signature(&w, 5, 1).unwrap(), fnv1a(&bytes));
    }

    #[test]
    fn csv_exports() {
        let w = sample_window(&drift(), -10, 300, 0).unwrap();
        let t = simulate(&w, StartLaw::Height(0), Stop::Horizon(20), 1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,xi,Y\n0,0,1\n1,1,1"));
        let rec = extract_renewals(&t, 0, 5);
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "2,1,1,1,1");
        let h = evfp_accumulate(&t, &w, 0, 0..20).unwrap();
        let mut buf = Vec::new();
        h.write_sidecar_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }
}
