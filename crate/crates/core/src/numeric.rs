//! Dense arithmetic shared by every other module: flat parameter vectors,
//! a row-major matrix, norms, seeded random streams and the central
//! finite-difference gradient oracle.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of mixing weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Identifies the architecture a flat parameter layout belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutId(pub u64);

impl LayoutId {
    /// FNV-1a over the layer sizes, so equal architectures always agree.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &s in sizes {
            for b in (s as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        LayoutId(h)
    }
}

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layout:{:016x}", self.0)
    }
}

/// Flat model parameters tagged with the layout they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: LayoutId,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: LayoutId) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(len: usize, layout: LayoutId) -> Self {
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn layout(&self) -> LayoutId {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. Callers re-check finiteness with
    /// [`ParameterVector::ensure_finite`] when divergence matters.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!("parameter {i} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn check_compatible(&self, other: &ParameterVector) -> Result<()> {
        if self.layout != other.layout || self.len() != other.len() {
            return Err(Error::Layout {
                expected: format!("{} ({} values)", self.layout, self.len()),
                found: format!("{} ({} values)", other.layout, other.len()),
            });
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ParameterVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Row-major dense matrix; rows are examples throughout the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copy of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Perturbation norm. Only the two norms the experiments use are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::L2 => f.write_str("l2"),
            Norm::Linf => f.write_str("linf"),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "L2" => Ok(Norm::L2),
            "linf" | "Linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

pub fn lp_norm(v: &[f64], p: Norm) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("norm of a non-finite vector".into()));
    }
    Ok(match p {
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    })
}

/// Weighted combination `sum_i w_i p_i` of parameter vectors.
///
/// Evaluated as `anchor + sum_i w_i (p_i - anchor)` where the anchor is the
/// heaviest input under a canonical ordering of the `(weight, params)` pairs.
/// This makes the result bit-identical under any permutation of the inputs,
/// exactly equal to the common value when all inputs coincide, and clamped
/// into the per-coordinate hull of the inputs.
pub fn convex_combine(params: &[&ParameterVector], weights: &[f64]) -> Result<ParameterVector> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} parameter vectors with {} weights",
            params.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Config(format!("mixing weight {w} is negative or non-finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!("mixing weights sum to {total}, not 1")));
    }
    for p in &params[1..] {
        params[0].check_compatible(p)?;
    }

    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a].total_cmp(&weights[b]).then_with(|| {
            params[a]
                .as_slice()
                .iter()
                .zip(params[b].as_slice())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    let (&anchor_idx, rest) = order.split_last().expect("nonempty");
    let anchor = params[anchor_idx].as_slice();

    let mut out = Vec::with_capacity(anchor.len());
    for (c, &a) in anchor.iter().enumerate() {
        let mut acc = a;
        let mut lo = a;
        let mut hi = a;
        for &i in rest {
            let x = params[i].as_slice()[c];
            acc += weights[i] * (x - a);
            lo = lo.min(x);
            hi = hi.max(x);
        }
        out.push(acc.clamp(lo, hi));
    }
    ParameterVector::new(out, params[0].layout())
}

/// Central-difference gradient estimate of `f` at `at`.
pub fn finite_diff_grad<F>(mut f: F, at: &ParameterVector, h: f64) -> Result<ParameterVector>
where
    F: FnMut(&ParameterVector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let x = at.as_slice()[i];
        probe.as_mut_slice()[i] = x + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = x - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite while probing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    ParameterVector::new(grad, at.layout())
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub word_pos: u128,
}

/// Counter-based random stream. A `(seed, stream_id, position)` triple fully
/// determines every subsequent draw, independent of platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream_id);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.state() == other.state()
    }
}
