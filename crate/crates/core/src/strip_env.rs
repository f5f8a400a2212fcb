//! Environment letters, environment laws and realized windows.
//!
//! An environment letter is the triple `(p, r, q)` of `d × d` nonnegative
//! matrices whose sum is stochastic: from site `(n, i)` the walk moves to
//! `(n + 1, j)` with probability `p(i, j)`, to `(n, j)` with `r(i, j)` and to
//! `(n - 1, j)` with `q(i, j)`. Environment laws are finitely supported:
//! i.i.d., periodic, or a stationary finite-state Markov chain over the
//! support.
//!
//! Windows are pure functions of `(model, seed, index)`. Letters are produced
//! in chunks of [`CHUNK`] indices, each chunk drawing from its own derived
//! stream, so a window can be grown in either direction without changing the
//! letters it already holds.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seeding::rng_for;
use crate::smallmat::{MatError, SquareMat, MAX_ORDER};

/// Letters are generated in chunks of this many indices.
pub const CHUNK: i64 = 4096;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid letter: {0}")]
    Letter(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("empty or reversed range [{lo}, {hi}]")]
    Range { lo: i64, hi: i64 },
    #[error("index {index} outside window [{lo}, {hi}]")]
    OutsideWindow { index: i64, lo: i64, hi: i64 },
    #[error(transparent)]
    Matrix(#[from] MatError),
    #[error("model file: {0}")]
    File(String),
}

/// One environment letter `(p, r, q)`.
#[derive(Clone, PartialEq)]
pub struct LayerTriple {
    p: SquareMat,
    r: SquareMat,
    q: SquareMat,
}

impl LayerTriple {
    pub fn new(p: SquareMat, r: SquareMat, q: SquareMat) -> Result<Self, EnvError> {
        let d = p.order();
        if r.order() != d || q.order() != d {
            return Err(EnvError::Letter(format!(
                "orders differ: p {d}, r {}, q {}",
                r.order(),
                q.order()
            )));
        }
        for (name, m) in [("p", &p), ("r", &r), ("q", &q)] {
            if !m.is_nonnegative() {
                return Err(EnvError::Letter(format!("{name} has a negative entry")));
            }
        }
        let sums = p.add(&r).add(&q).row_sums();
        if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| (**s - 1.0).abs() > ROW_TOL) {
            return Err(EnvError::Letter(format!("row {i} of p + r + q sums to {s}")));
        }
        Ok(LayerTriple { p, r, q })
    }

    /// Nearest-neighbour letter on a strip of width one.
    pub fn scalar(p: f64, r: f64, q: f64) -> Result<Self, EnvError> {
        Self::new(SquareMat::scalar(p), SquareMat::scalar(r), SquareMat::scalar(q))
    }

    /// Letter that moves right in the same height except for a tiny leak
    /// (split between staying and going left) that keeps the strict
    /// conditions satisfied.
    pub fn right_drift(d: usize, leak: f64) -> Result<Self, EnvError> {
        let p = SquareMat::identity(d).scale(1.0 - 2.0 * leak);
        let r = SquareMat::identity(d).scale(leak);
        let q = SquareMat::identity(d).scale(leak);
        Self::new(p, r, q)
    }

    pub fn d(&self) -> usize {
        self.p.order()
    }

    pub fn p(&self) -> &SquareMat {
        &self.p
    }

    pub fn r(&self) -> &SquareMat {
        &self.r
    }

    pub fn q(&self) -> &SquareMat {
        &self.q
    }
}

impl fmt::Debug for LayerTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LayerTriple")
            .field("p", &self.p)
            .field("r", &self.r)
            .field("q", &self.q)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Iid { weights: Vec<f64> },
    /// Letter at index `n` is `support[order[n mod order.len()]]`.
    Periodic { order: Vec<usize> },
    FiniteMarkov { transition: Vec<Vec<f64>> },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Iid { .. } => "iid",
            ModelKind::Periodic { .. } => "periodic",
            ModelKind::FiniteMarkov { .. } => "finite-markov",
        }
    }
}

/// A finitely supported stationary environment law.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    kind: ModelKind,
    support: Vec<LayerTriple>,
    epsilon_floor: f64,
    /// Set for embeddings of one-dimensional walks; copied into reports.
    encoding_note: Option<String>,
    stationary: Vec<f64>,
}

impl EnvironmentModel {
    pub fn new(kind: ModelKind, support: Vec<LayerTriple>, epsilon_floor: f64) -> Result<Self, EnvError> {
        let k = support.len();
        if k == 0 {
            return Err(EnvError::Model("empty support".into()));
        }
        if k > u16::MAX as usize {
            return Err(EnvError::Model(format!("support of size {k} too large")));
        }
        let d = support[0].d();
        if d == 0 || d > MAX_ORDER {
            return Err(EnvError::Model(format!("strip width {d} outside 1..={MAX_ORDER}")));
        }
        if let Some(t) = support.iter().position(|t| t.d() != d) {
            return Err(EnvError::Model(format!("support atom {t} has width {} != {d}", support[t].d())));
        }
        if !(epsilon_floor >= 0.0 && epsilon_floor.is_finite()) {
            return Err(EnvError::Model(format!("epsilon_floor {epsilon_floor} must be finite and >= 0")));
        }
        let stationary = match &kind {
            ModelKind::Iid { weights } => {
                check_probability_row(weights, k, "weights")?;
                weights.clone()
            }
            ModelKind::Periodic { order } => {
                if order.is_empty() {
                    return Err(EnvError::Model("periodic order is empty".into()));
                }
                if let Some(&bad) = order.iter().find(|&&o| o >= k) {
                    return Err(EnvError::Model(format!("periodic order refers to atom {bad} of {k}")));
                }
                let mut freq = vec![0.0; k];
                for &o in order {
                    freq[o] += 1.0 / order.len() as f64;
                }
                freq
            }
            ModelKind::FiniteMarkov { transition } => {
                if transition.len() != k {
                    return Err(EnvError::Model(format!(
                        "transition matrix has {} rows for {k} atoms",
                        transition.len()
                    )));
                }
                for (i, row) in transition.iter().enumerate() {
                    check_probability_row(row, k, &format!("transition row {i}"))?;
                }
                if !irreducible(transition) {
                    return Err(EnvError::Model("transition matrix is not irreducible".into()));
                }
                markov_stationary(transition)?
            }
        };
        Ok(EnvironmentModel {
            kind,
            support,
            epsilon_floor,
            encoding_note: None,
            stationary,
        })
    }

    pub fn iid(support: Vec<LayerTriple>, weights: Vec<f64>) -> Result<Self, EnvError> {
        Self::new(ModelKind::Iid { weights }, support, 0.0)
    }

    /// The constant environment.
    pub fn homogeneous(letter: LayerTriple) -> Self {
        Self::iid(vec![letter], vec![1.0]).expect("single-atom model is valid")
    }

    pub fn periodic(support: Vec<LayerTriple>) -> Result<Self, EnvError> {
        let order = (0..support.len()).collect();
        Self::new(ModelKind::Periodic { order }, support, 0.0)
    }

    pub fn finite_markov(support: Vec<LayerTriple>, transition: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        Self::new(ModelKind::FiniteMarkov { transition }, support, 0.0)
    }

    pub fn with_epsilon_floor(mut self, eps: f64) -> Result<Self, EnvError> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(EnvError::Model(format!("epsilon_floor {eps} must be finite and >= 0")));
        }
        self.epsilon_floor = eps;
        Ok(self)
    }

    pub fn with_encoding_note(mut self, note: impl Into<String>) -> Self {
        self.encoding_note = Some(note.into());
        self
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn support(&self) -> &[LayerTriple] {
        &self.support
    }

    pub fn d(&self) -> usize {
        self.support[0].d()
    }

    pub fn epsilon_floor(&self) -> f64 {
        self.epsilon_floor
    }

    pub fn encoding_note(&self) -> Option<&str> {
        self.encoding_note.as_deref()
    }

    /// Marginal law of a single letter.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn is_iid(&self) -> bool {
        matches!(self.kind, ModelKind::Iid { .. })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_string(&ModelFile::from(self)).expect("model serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EnvError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| EnvError::File(e.to_string()))?;
        file.into_model()
    }

    pub fn from_file(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::File(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ModelFile::from(self)).expect("model serializes")
    }
}

fn check_probability_row(row: &[f64], k: usize, what: &str) -> Result<(), EnvError> {
    if row.len() != k {
        return Err(EnvError::Model(format!("{what} has length {} for {k} atoms", row.len())));
    }
    if row.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(EnvError::Model(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(EnvError::Model(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn irreducible(transition: &[Vec<f64>]) -> bool {
    let k = transition.len();
    (0..k).all(|start| {
        let mut seen = vec![false; k];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for (j, &w) in transition[i].iter().enumerate() {
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    })
}

/// Solves `pi (P - I) = 0`, `sum pi = 1` by replacing one balance equation.
fn markov_stationary(transition: &[Vec<f64>]) -> Result<Vec<f64>, EnvError> {
    let k = transition.len();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    if k > MAX_ORDER {
        return stationary_by_power(transition);
    }
    // Row i of the system is column i of (P^T - I); the last row becomes sum = 1.
    let mut sys = SquareMat::zeros(k);
    for i in 0..k {
        for j in 0..k {
            sys[(i, j)] = transition[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        sys[(k - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; k];
    rhs[k - 1] = 1.0;
    let pi = sys.solve_vec(&rhs)?;
    Ok(pi.into_iter().map(|x| x.max(0.0)).collect())
}

fn stationary_by_power(transition: &[Vec<f64>]) -> Result<Vec<f64>, EnvError> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                // lazy chain: same stationary law, aperiodic
                next[j] += 0.5 * pi[i] * transition[i][j];
            }
            next[i] += 0.5 * pi[i];
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            return Ok(pi);
        }
    }
    Err(EnvError::Model("stationary vector iteration did not converge".into()))
}

/// Serialized form of a model: a TOML/JSON tree with matrices as flat
/// row-major lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: String,
    pub d: usize,
    #[serde(default)]
    pub epsilon_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding_note: Option<String>,
    pub support: Vec<TripleFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleFile {
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<EnvironmentModel, EnvError> {
        let support = self
            .support
            .into_iter()
            .map(|t| {
                LayerTriple::new(
                    SquareMat::from_row_major(self.d, t.p)?,
                    SquareMat::from_row_major(self.d, t.r)?,
                    SquareMat::from_row_major(self.d, t.q)?,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let k = support.len();
        let kind = match self.kind.as_str() {
            "iid" => ModelKind::Iid {
                weights: self.weights.unwrap_or_else(|| vec![1.0 / k as f64; k]),
            },
            "periodic" => ModelKind::Periodic {
                order: self.order.unwrap_or_else(|| (0..k).collect()),
            },
            "finite-markov" => ModelKind::FiniteMarkov {
                transition: self
                    .transition
                    .ok_or_else(|| EnvError::File("finite-markov model needs `transition`".into()))?,
            },
            other => return Err(EnvError::File(format!("unknown kind `{other}`"))),
        };
        let mut model = EnvironmentModel::new(kind, support, self.epsilon_floor)?;
        model.encoding_note = self.encoding_note;
        Ok(model)
    }
}

impl From<&EnvironmentModel> for ModelFile {
    fn from(m: &EnvironmentModel) -> Self {
        let (weights, order, transition) = match &m.kind {
            ModelKind::Iid { weights } => (Some(weights.clone()), None, None),
            ModelKind::Periodic { order } => (None, Some(order.clone()), None),
            ModelKind::FiniteMarkov { transition } => (None, None, Some(transition.clone())),
        };
        ModelFile {
            kind: m.kind.name().to_string(),
            d: m.d(),
            epsilon_floor: m.epsilon_floor,
            weights,
            order,
            transition,
            encoding_note: m.encoding_note.clone(),
            support: m
                .support
                .iter()
                .map(|t| TripleFile {
                    p: t.p.as_slice().to_vec(),
                    r: t.r.as_slice().to_vec(),
                    q: t.q.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

/// A realized stretch `(ω_n)_{n ∈ [lo, hi]}` of the environment.
#[derive(Debug, Clone)]
pub struct EnvironmentWindow {
    model: Arc<EnvironmentModel>,
    seed: u64,
    lo: i64,
    letters: Vec<u16>,
}

impl EnvironmentWindow {
    pub fn model(&self) -> &EnvironmentModel {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<EnvironmentModel> {
        &self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.letters.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    pub fn contains(&self, n: i64) -> bool {
        n >= self.lo && n <= self.hi()
    }

    /// Support index of the letter at layer `n`.
    pub fn letter_index(&self, n: i64) -> usize {
        assert!(self.contains(n), "layer {n} outside window [{}, {}]", self.lo, self.hi());
        self.letters[(n - self.lo) as usize] as usize
    }

    pub fn try_letter_index(&self, n: i64) -> Result<usize, EnvError> {
        if self.contains(n) {
            Ok(self.letters[(n - self.lo) as usize] as usize)
        } else {
            Err(EnvError::OutsideWindow {
                index: n,
                lo: self.lo,
                hi: self.hi(),
            })
        }
    }

    pub fn triple(&self, n: i64) -> &LayerTriple {
        &self.model.support[self.letter_index(n)]
    }

    pub fn letter_indices(&self) -> &[u16] {
        &self.letters
    }

    pub fn triples(&self) -> impl Iterator<Item = (i64, &LayerTriple)> + '_ {
        self.letters
            .iter()
            .enumerate()
            .map(move |(k, &l)| (self.lo + k as i64, &self.model.support[l as usize]))
    }

    /// The sub-window on `[lo, hi]`; letters are shared with `self`.
    pub fn slice(&self, lo: i64, hi: i64) -> Result<EnvironmentWindow, EnvError> {
        if lo > hi {
            return Err(EnvError::Range { lo, hi });
        }
        self.try_letter_index(lo)?;
        self.try_letter_index(hi)?;
        let a = (lo - self.lo) as usize;
        let b = (hi - self.lo) as usize;
        Ok(EnvironmentWindow {
            model: Arc::clone(&self.model),
            seed: self.seed,
            lo,
            letters: self.letters[a..=b].to_vec(),
        })
    }

    /// Grows the window (in whole chunks) so that it covers `[lo, hi]`.
    pub fn ensure_covers(&mut self, lo: i64, hi: i64) {
        let new_lo = if lo < self.lo { chunk_floor(lo) } else { self.lo };
        let new_hi = if hi > self.hi() { chunk_floor(hi) + CHUNK - 1 } else { self.hi() };
        if new_lo == self.lo && new_hi == self.hi() {
            return;
        }
        let mut letters = Vec::with_capacity((new_hi - new_lo + 1) as usize);
        if new_lo < self.lo {
            letters.extend(generate_letters(&self.model, self.seed, new_lo, self.lo - 1));
        }
        letters.extend_from_slice(&self.letters);
        if new_hi > self.hi() {
            letters.extend(generate_letters(&self.model, self.seed, self.hi() + 1, new_hi));
        }
        self.lo = new_lo;
        self.letters = letters;
    }

    /// CSV with columns `n, p.., r.., q..` (entries row-major).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["n".to_string()];
        for m in ["p", "r", "q"] {
            for i in 0..d {
                for j in 0..d {
                    header.push(format!("{m}_{}_{}", i + 1, j + 1));
                }
            }
        }
        w.write_record(&header)?;
        for (n, t) in self.triples() {
            let mut rec = vec![n.to_string()];
            for m in [t.p(), t.r(), t.q()] {
                rec.extend(m.as_slice().iter().map(|x| x.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn chunk_floor(n: i64) -> i64 {
    n.div_euclid(CHUNK) * CHUNK
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cum: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = cum.last_mut() {
        *last = f64::INFINITY;
    }
    cum
}

fn pick(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

/// Letters for `[lo, hi]`, a pure function of `(model, seed, index)`.
fn generate_letters(model: &EnvironmentModel, seed: u64, lo: i64, hi: i64) -> Vec<u16> {
    match &model.kind {
        ModelKind::Periodic { order } => {
            let m = order.len() as i64;
            (lo..=hi).map(|n| order[n.rem_euclid(m) as usize] as u16).collect()
        }
        ModelKind::Iid { weights } => {
            let cum = cumulative(weights);
            let mut out = Vec::with_capacity((hi - lo + 1) as usize);
            let mut chunk = chunk_floor(lo);
            while chunk <= hi {
                let mut rng = rng_for(seed, "env-iid", (chunk / CHUNK) as u64);
                let first = lo.max(chunk);
                // each f64 draw consumes two 32-bit words of the stream
                rng.set_word_pos(2 * (first - chunk) as u128);
                for _ in first..=hi.min(chunk + CHUNK - 1) {
                    out.push(pick(&cum, rng.gen::<f64>()) as u16);
                }
                chunk += CHUNK;
            }
            out
        }
        ModelKind::FiniteMarkov { transition } => {
            let k = transition.len();
            let forward: Vec<Vec<f64>> = transition.iter().map(|row| cumulative(row)).collect();
            let pi = &model.stationary;
            // time reversal: P*(i, j) = pi_j P(j, i) / pi_i
            let backward: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let row: Vec<f64> = (0..k).map(|j| pi[j] * transition[j][i] / pi[i]).collect();
                    let s: f64 = row.iter().sum();
                    cumulative(&row.iter().map(|x| x / s).collect::<Vec<_>>())
                })
                .collect();
            let mut anchor_rng = rng_for(seed, "env-markov-anchor", 0);
            let anchor = pick(&cumulative(pi), anchor_rng.gen::<f64>());
            let mut out = Vec::with_capacity((hi - lo + 1) as usize);
            if lo < 0 {
                // walk left from the anchor down to lo, then reverse
                let mut left = Vec::with_capacity((-lo) as usize);
                let mut state = anchor;
                let mut rng = rng_for(seed, "env-markov-left", 0);
                for m in 1..=(-lo) {
                    let c = (m - 1) / CHUNK;
                    if (m - 1) % CHUNK == 0 {
                        rng = rng_for(seed, "env-markov-left", c as u64);
                    }
                    state = pick(&backward[state], rng.gen::<f64>());
                    left.push(state as u16);
                }
                // left[m-1] is the letter at index -m
                for n in lo..=hi.min(-1) {
                    out.push(left[(-n - 1) as usize]);
                }
            }
            if hi >= 0 {
                let mut state = anchor;
                let mut rng = rng_for(seed, "env-markov-right", 0);
                for n in 0..=hi {
                    if n > 0 {
                        if (n - 1) % CHUNK == 0 {
                            rng = rng_for(seed, "env-markov-right", ((n - 1) / CHUNK) as u64);
                        }
                        state = pick(&forward[state], rng.gen::<f64>());
                    }
                    if n >= lo {
                        out.push(state as u16);
                    }
                }
            }
            out
        }
    }
}

/// Realizes the environment on `[lo, hi]`.
pub fn sample_window(model: &EnvironmentModel, lo: i64, hi: i64, seed: u64) -> Result<EnvironmentWindow, EnvError> {
    sample_window_arc(Arc::new(model.clone()), lo, hi, seed)
}

pub fn sample_window_arc(model: Arc<EnvironmentModel>, lo: i64, hi: i64, seed: u64) -> Result<EnvironmentWindow, EnvError> {
    if lo > hi {
        return Err(EnvError::Range { lo, hi });
    }
    let letters = generate_letters(&model, seed, lo, hi);
    Ok(EnvironmentWindow { model, seed, lo, letters })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErgodicityClass {
    /// i.i.d. letters.
    Iid,
    /// Cyclic pattern; stationary and ergodic once the phase is uniform.
    Periodic,
    /// Irreducible chain started from its stationary vector.
    FiniteMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub c1: ErgodicityClass,
    pub c2: bool,
    pub c3: bool,
    pub epsilon_floor_verified: bool,
    /// Largest of `||r + p||` and `||r + q||` over the support.
    pub worst_c2_norm: f64,
    pub min_p_row_sum: f64,
    pub failures: Vec<String>,
    pub encoding_note: Option<String>,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.c2 && self.c3 && self.epsilon_floor_verified
    }
}

/// Checks the structural conditions on a finitely supported model.
///
/// With finite support the log-moment condition reduces to the strict
/// inequalities `||r + p|| < 1` and `||r + q|| < 1` on every atom.
pub fn check_condition_c(model: &EnvironmentModel) -> ConditionReport {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut min_p_row = f64::INFINITY;
    let (mut c2, mut c3) = (true, true);
    for (k, t) in model.support.iter().enumerate() {
        let rp = t.r.add(&t.p).norm();
        let rq = t.r.add(&t.q).norm();
        worst = worst.max(rp).max(rq);
        if rp >= 1.0 {
            c2 = false;
            failures.push(format!("atom {k}: ||r + p|| = {rp}"));
        }
        if rq >= 1.0 {
            c2 = false;
            failures.push(format!("atom {k}: ||r + q|| = {rq}"));
        }
        for (name, m) in [("q", &t.q), ("p", &t.p)] {
            if let Some(j) = m.col_sums().iter().position(|&s| s <= 0.0) {
                c3 = false;
                failures.push(format!("atom {k}: column {} of {name} is zero", j + 1));
            }
        }
        min_p_row = t.p.row_sums().into_iter().fold(min_p_row, f64::min);
    }
    let eps_ok = min_p_row > model.epsilon_floor;
    if !eps_ok {
        failures.push(format!(
            "minimal row sum of p {min_p_row} does not exceed epsilon_floor {}",
            model.epsilon_floor
        ));
    }
    ConditionReport {
        c1: match model.kind {
            ModelKind::Iid { .. } => ErgodicityClass::Iid,
            ModelKind::Periodic { .. } => ErgodicityClass::Periodic,
            ModelKind::FiniteMarkov { .. } => ErgodicityClass::FiniteMarkov,
        },
        c2,
        c3,
        epsilon_floor_verified: eps_ok,
        worst_c2_norm: worst,
        min_p_row_sum: min_p_row,
        failures,
        encoding_note: model.encoding_note.clone(),
    }
}

/// The classical nearest-neighbour walk on ℤ as a strip of width one.
/// `atoms` lists `(p, r, q)` per support atom.
pub fn embed_nearest_neighbor(atoms: &[(f64, f64, f64)], weights: Vec<f64>) -> Result<EnvironmentModel, EnvError> {
    let support = atoms
        .iter()
        .enumerate()
        .map(|(k, &(p, r, q))| {
            if !(p > 0.0 && q > 0.0) {
                return Err(EnvError::Embedding(format!(
                    "atom {k}: p = {p}, q = {q} must both be positive"
                )));
            }
            LayerTriple::scalar(p, r, q)
        })
        .collect::<Result<Vec<_>, _>>()?;
    EnvironmentModel::iid(support, weights)
}

/// Jump law of one site: `(jump, probability)` pairs.
pub type JumpLaw = Vec<(i64, f64)>;

/// Blocks a walk on ℤ with jumps in `[-width, width]` onto a strip of width
/// `width`: site `m = k * width + i` becomes `(k, i + 1)`.
///
/// Each support atom of the result is a block of `width` consecutive sites,
/// every site drawing its jump law independently from `site_atoms` with
/// `weights`; the block support is the product in lexicographic order.
pub fn embed_bounded_jump(width: usize, site_atoms: &[JumpLaw], weights: &[f64]) -> Result<EnvironmentModel, EnvError> {
    if width == 0 || width > MAX_ORDER {
        return Err(EnvError::Embedding(format!("block width {width} outside 1..={MAX_ORDER}")));
    }
    if site_atoms.is_empty() || site_atoms.len() != weights.len() {
        return Err(EnvError::Embedding(format!(
            "{} site atoms with {} weights",
            site_atoms.len(),
            weights.len()
        )));
    }
    let l = width as i64;
    for (k, law) in site_atoms.iter().enumerate() {
        if let Some(&(j, _)) = law.iter().find(|(j, w)| j.abs() > l && *w > 0.0) {
            return Err(EnvError::Embedding(format!(
                "site atom {k} puts mass on jump {j}, beyond the block width {width}"
            )));
        }
        let s: f64 = law.iter().map(|(_, w)| w).sum();
        if (s - 1.0).abs() > ROW_TOL || law.iter().any(|(_, w)| *w < 0.0) {
            return Err(EnvError::Embedding(format!("site atom {k} is not a probability law")));
        }
    }
    let n_atoms = site_atoms.len();
    let n_blocks = n_atoms.checked_pow(width as u32).filter(|&n| n <= u16::MAX as usize).ok_or_else(|| {
        EnvError::Embedding(format!("{n_atoms}^{width} block letters is too many"))
    })?;
    let mut support = Vec::with_capacity(n_blocks);
    let mut block_weights = Vec::with_capacity(n_blocks);
    for code in 0..n_blocks {
        // lexicographic: site 0 is the most significant digit
        let mut digits = vec![0usize; width];
        let mut rest = code;
        for i in (0..width).rev() {
            digits[i] = rest % n_atoms;
            rest /= n_atoms;
        }
        let mut p = SquareMat::zeros(width);
        let mut r = SquareMat::zeros(width);
        let mut q = SquareMat::zeros(width);
        let mut w = 1.0;
        for (i, &a) in digits.iter().enumerate() {
            w *= weights[a];
            for &(jump, prob) in &site_atoms[a] {
                let target = i as i64 + jump;
                let layer = target.div_euclid(l);
                let height = target.rem_euclid(l) as usize;
                match layer {
                    1 => p[(i, height)] += prob,
                    0 => r[(i, height)] += prob,
                    -1 => q[(i, height)] += prob,
                    _ => unreachable!("jump range checked above"),
                }
            }
        }
        support.push(LayerTriple::new(p, r, q)?);
        block_weights.push(w);
    }
    let s: f64 = block_weights.iter().sum();
    let block_weights = block_weights.into_iter().map(|w| w / s).collect();
    Ok(EnvironmentModel::iid(support, block_weights)?
        .with_encoding_note(format!("bounded-jump walk blocked with width {width}")))
}

/// Persistent walk on ℤ with direction memory. Height 1 means the last move
/// was to the right, height 2 that it was to the left; the walk keeps its
/// direction with probability `alpha_right` (resp. `alpha_left`).
///
/// Right moves always land in height 1 and left moves in height 2, so the
/// column conditions on `p`, `q` and the positivity of exit matrices fail
/// structurally for this encoding; reports carry the encoding note.
pub fn persistent_walk_model(alpha_right: f64, alpha_left: f64) -> Result<EnvironmentModel, EnvError> {
    for (name, a) in [("alpha_right", alpha_right), ("alpha_left", alpha_left)] {
        if !(a > 0.0 && a < 1.0) {
            return Err(EnvError::Embedding(format!("{name} = {a} must lie in (0, 1)")));
        }
    }
    let p = SquareMat::from_rows(&[&[alpha_right, 0.0], &[1.0 - alpha_left, 0.0]])?;
    let q = SquareMat::from_rows(&[&[0.0, 1.0 - alpha_right], &[0.0, alpha_left]])?;
    let letter = LayerTriple::new(p, SquareMat::zeros(2), q)?;
    Ok(EnvironmentModel::homogeneous(letter)
        .with_encoding_note("persistent walk: height 1 = last move right, height 2 = last move left"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn two_by_two(rows: [[f64; 2]; 2]) -> SquareMat {
        SquareMat::from_rows(&[&rows[0], &rows[1]]).unwrap()
    }

    fn coupled_letter_a() -> LayerTriple {
        LayerTriple::new(
            two_by_two([[0.4, 0.1], [0.15, 0.3]]),
            two_by_two([[0.1, 0.1], [0.05, 0.1]]),
            two_by_two([[0.2, 0.1], [0.2, 0.2]]),
        )
        .unwrap()
    }

    #[test]
    fn letter_invariants() {
        assert!(LayerTriple::scalar(2.0 / 3.0, 0.0, 1.0 / 3.0).is_ok());
        assert!(LayerTriple::scalar(0.5, 0.0, 0.4).is_err());
        assert!(LayerTriple::scalar(1.2, 0.0, -0.2).is_err());
    }

    #[test]
    fn determinism_and_periodic_pattern() {
        let a = LayerTriple::scalar(0.7, 0.0, 0.3).unwrap();
        let b = LayerTriple::scalar(0.8, 0.0, 0.2).unwrap();
        let model = EnvironmentModel::iid(vec![a.clone(), b.clone()], vec![0.5, 0.5]).unwrap();
        let w1 = sample_window(&model, -100, 5000, 42).unwrap();
        let w2 = sample_window(&model, -100, 5000, 42).unwrap();
        assert_eq!(w1.letter_indices(), w2.letter_indices());

        let per = EnvironmentModel::periodic(vec![a.clone(), b.clone()]).unwrap();
        let w = sample_window(&per, 0, 3, 1).unwrap();
        assert_eq!(w.letter_indices(), &[0, 1, 0, 1]);
        assert_eq!(w.triple(1), &b);
        let w = sample_window(&per, -3, 0, 1).unwrap();
        assert_eq!(w.letter_indices(), &[1, 0, 1, 0]);
    }

    #[test]
    fn sub_windows_and_growth_are_consistent() {
        let a = LayerTriple::scalar(0.7, 0.0, 0.3).unwrap();
        let b = LayerTriple::scalar(0.8, 0.0, 0.2).unwrap();
        let c = LayerTriple::scalar(0.6, 0.1, 0.3).unwrap();
        let iid = EnvironmentModel::iid(vec![a.clone(), b.clone(), c.clone()], vec![0.2, 0.3, 0.5]).unwrap();
        let markov = EnvironmentModel::finite_markov(
            vec![a, b, c],
            vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5]],
        )
        .unwrap();
        for model in [iid, markov] {
            let big = sample_window(&model, -9000, 9000, 7).unwrap();
            let small = sample_window(&model, -4100, 123, 7).unwrap();
            for n in small.lo()..=small.hi() {
                assert_eq!(small.letter_index(n), big.letter_index(n));
            }
            let mut grown = sample_window(&model, 10, 20, 7).unwrap();
            grown.ensure_covers(-8000, 8500);
            assert!(grown.contains(-8000) && grown.contains(8500));
            for n in -8000..=8500 {
                assert_eq!(grown.letter_index(n), big.letter_index(n));
            }
        }
    }

    #[test]
    fn iid_frequencies_match_weights() {
        let atoms: Vec<LayerTriple> = (0..4)
            .map(|k| LayerTriple::scalar(0.5 + 0.1 * k as f64, 0.0, 0.5 - 0.1 * k as f64).unwrap())
            .collect();
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let model = EnvironmentModel::iid(atoms, weights.clone()).unwrap();
        let n = 100_000usize;
        let mut counts_by_seed = Vec::new();
        for seed in [3u64, 4] {
            let w = sample_window(&model, 0, n as i64 - 1, seed).unwrap();
            let mut counts = [0f64; 4];
            for &l in w.letter_indices() {
                counts[l as usize] += 1.0;
            }
            for k in 0..4 {
                let se = (n as f64 * weights[k] * (1.0 - weights[k])).sqrt();
                assert!((counts[k] - n as f64 * weights[k]).abs() < 4.0 * se);
            }
            counts_by_seed.push(counts);
        }
        // two-sample chi-square homogeneity test
        let (a, b) = (&counts_by_seed[0], &counts_by_seed[1]);
        let mut stat = 0.0;
        for k in 0..4 {
            let pooled = (a[k] + b[k]) / 2.0;
            stat += (a[k] - pooled).powi(2) / pooled + (b[k] - pooled).powi(2) / pooled;
        }
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn markov_windows_are_stationary() {
        let a = LayerTriple::scalar(0.7, 0.0, 0.3).unwrap();
        let b = LayerTriple::scalar(0.8, 0.0, 0.2).unwrap();
        let model = EnvironmentModel::finite_markov(vec![a, b], vec![vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        assert!((model.stationary()[0] - 0.75).abs() < 1e-12);
        // marginal at a fixed index across seeds
        let hits = (0..4000u64)
            .filter(|&s| sample_window(&model, -5, 5, s).unwrap().letter_index(-5) == 0)
            .count() as f64;
        let se = (4000.0f64 * 0.75 * 0.25).sqrt();
        assert!((hits - 3000.0).abs() < 4.0 * se);
    }

    #[test]
    fn rejects_reducible_markov() {
        let a = LayerTriple::scalar(0.7, 0.0, 0.3).unwrap();
        let err = EnvironmentModel::finite_markov(vec![a.clone(), a], vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert!(matches!(err, Err(EnvError::Model(_))));
    }

    #[test]
    fn condition_c_examples() {
        let m = EnvironmentModel::homogeneous(LayerTriple::scalar(2.0 / 3.0, 0.0, 1.0 / 3.0).unwrap());
        let rep = check_condition_c(&m);
        assert!(rep.c2 && rep.c3 && rep.epsilon_floor_verified);

        let p = two_by_two([[0.5, 0.2], [0.3, 0.3]]);
        let r = two_by_two([[0.2, 0.1], [0.2, 0.2]]);
        let no_q = EnvironmentModel::homogeneous(LayerTriple::new(p, r, SquareMat::zeros(2)).unwrap());
        let rep = check_condition_c(&no_q);
        assert!(!rep.c2 && !rep.c3);

        let p = two_by_two([[0.5, 0.0], [0.5, 0.0]]);
        let r = two_by_two([[0.1, 0.1], [0.1, 0.1]]);
        let q = two_by_two([[0.2, 0.1], [0.1, 0.2]]);
        let rep = check_condition_c(&EnvironmentModel::homogeneous(LayerTriple::new(p, r, q).unwrap()));
        assert!(rep.c2 && !rep.c3);

        let m = EnvironmentModel::homogeneous(coupled_letter_a()).with_epsilon_floor(0.5).unwrap();
        let rep = check_condition_c(&m);
        assert!(rep.c2 && rep.c3 && !rep.epsilon_floor_verified);
    }

    #[test]
    fn nearest_neighbor_embedding() {
        assert!(embed_nearest_neighbor(&[(2.0 / 3.0, 0.0, 1.0 / 3.0)], vec![1.0]).is_ok());
        assert!(matches!(
            embed_nearest_neighbor(&[(1.0, 0.0, 0.0)], vec![1.0]),
            Err(EnvError::Embedding(_))
        ));
        let m = embed_nearest_neighbor(&[(0.7, 0.0, 0.3), (0.8, 0.0, 0.2)], vec![0.5, 0.5]).unwrap();
        assert!(check_condition_c(&m).all_pass());
    }

    #[test]
    fn bounded_jump_width_one_matches_nearest_neighbor() {
        let nn = embed_nearest_neighbor(&[(0.7, 0.05, 0.25), (0.8, 0.0, 0.2)], vec![0.4, 0.6]).unwrap();
        let bj = embed_bounded_jump(
            1,
            &[vec![(-1, 0.25), (0, 0.05), (1, 0.7)], vec![(-1, 0.2), (1, 0.8)]],
            &[0.4, 0.6],
        )
        .unwrap();
        assert_eq!(nn.support(), bj.support());
        let w1 = sample_window(&nn, -500, 500, 9).unwrap();
        let w2 = sample_window(&bj, -500, 500, 9).unwrap();
        assert_eq!(w1.letter_indices(), w2.letter_indices());
    }

    #[test]
    fn bounded_jump_width_two_layout() {
        let law = vec![(-2, 0.1), (-1, 0.15), (0, 0.1), (1, 0.3), (2, 0.35)];
        let m = embed_bounded_jump(2, &[law], &[1.0]).unwrap();
        let t = &m.support()[0];
        assert_eq!(t.p(), &two_by_two([[0.35, 0.0], [0.3, 0.35]]));
        assert_eq!(t.r(), &two_by_two([[0.1, 0.3], [0.15, 0.1]]));
        assert_eq!(t.q(), &two_by_two([[0.1, 0.15], [0.0, 0.1]]));
        assert!(check_condition_c(&m).all_pass());

        let too_far = vec![(-3, 0.5), (1, 0.5)];
        assert!(matches!(embed_bounded_jump(2, &[too_far], &[1.0]), Err(EnvError::Embedding(_))));
    }

    #[test]
    fn persistent_walk_encoding() {
        let m = persistent_walk_model(0.9, 0.5).unwrap();
        let t = &m.support()[0];
        assert_eq!(t.p().row_sums(), vec![0.9, 0.5]);
        assert!(m.encoding_note().is_some());
        let rep = check_condition_c(&m);
        assert!(rep.c2 && !rep.c3);
        assert!(persistent_walk_model(1.0, 0.5).is_err());
        assert!(persistent_walk_model(0.5, 0.0).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let a = coupled_letter_a();
        let b = LayerTriple::right_drift(2, 1e-3).unwrap();
        let model = EnvironmentModel::finite_markov(vec![a, b], vec![vec![0.2, 0.8], vec![0.6, 0.4]])
            .unwrap()
            .with_epsilon_floor(0.1)
            .unwrap();
        let text = model.to_toml_string();
        let back = EnvironmentModel::from_toml_str(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.model_hash(), model.model_hash());

        let text = r#"
            kind = "iid"
            d = 1
            weights = [0.5, 0.5]
            [[support]]
            p = [0.7]
            r = [0.0]
            q = [0.3]
            [[support]]
            p = [0.8]
            r = [0.0]
            q = [0.2]
        "#;
        let m = EnvironmentModel::from_toml_str(text).unwrap();
        assert_eq!(m.support().len(), 2);
        assert!(EnvironmentModel::from_toml_str("kind = \"sparse\"\nd = 1\nsupport = []").is_err());
    }

    #[test]
    fn window_csv_layout() {
        let m = EnvironmentModel::homogeneous(coupled_letter_a());
        let w = sample_window(&m, -1, 0, 0).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 13);
        assert!(lines.next().unwrap().starts_with("-1,0.4,0.1,0.15,0.3,"));
    }
}
