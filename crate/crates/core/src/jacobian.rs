//! Input-output Jacobians of a network at its logits, and the matrix
//! inequalities and alignment measures built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatRef, NormOrder};
use crate::nn::Network;
use crate::rng::{sample_unit_sphere, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `d x n` derivative of the logits with respect to one flattened input.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian<T> {
    pub matrix: Tensor<T>,
    pub input_id: usize,
}

impl<T: Scalar> Jacobian<T> {
    pub fn frobenius_norm(&self) -> T {
        linalg::frobenius_norm(&self.matrix)
    }
}

/// Jacobians of `N` inputs stacked vertically into an `(N·d) x n` matrix.
#[derive(Clone, Debug)]
pub struct StackedJacobian<T> {
    pub matrix: Tensor<T>,
    pub input_ids: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> StackedJacobian<T> {
    /// Block `i`, the Jacobian of the `i`-th input.
    pub fn block(&self, i: usize) -> Tensor<T> {
        let n = self.matrix.shape()[1];
        let d = self.classes;
        Tensor::new(vec![d, n], self.matrix.data()[i * d * n..(i + 1) * d * n].to_vec()).unwrap()
    }
}

/// Inputs extracted per batched backward pass (each expands to `d` copies).
const JACOBIAN_CHUNK: usize = 16;

fn check_input<T: Scalar>(net: &Network<T>, x: &[T]) -> Result<()> {
    if x.len() != net.input_len() {
        return Err(Error::Shape(format!(
            "input of length {} for a network expecting {}",
            x.len(),
            net.input_len()
        )));
    }
    Ok(())
}

/// Rows of `batch` viewed as flattened inputs.
fn inputs_of<'a, T: Scalar>(net: &Network<T>, batch: &'a Tensor<T>) -> Result<Vec<&'a [T]>> {
    let n = net.input_len();
    if batch.shape().is_empty() || batch.len() != batch.shape()[0] * n {
        return Err(Error::Shape(format!(
            "batch {:?} does not hold inputs of length {n}",
            batch.shape()
        )));
    }
    Ok(batch.data().chunks(n).collect())
}

/// Jacobians for a group of inputs via one forward/backward pass over `d`
/// copies of each, with one-hot upstreams.
fn jacobian_group<T: Scalar>(net: &Network<T>, xs: &[&[T]]) -> Result<Vec<Tensor<T>>> {
    let d = net.num_classes();
    let n = net.input_len();
    let mut data = Vec::with_capacity(xs.len() * d * n);
    for x in xs {
        for _ in 0..d {
            data.extend_from_slice(x);
        }
    }
    let batch = Tensor::new(vec![xs.len() * d, n], data)?;
    let (_, trace) = net.forward(&batch)?;
    let upstream = Tensor::from_fn(&[xs.len() * d, d], |i| if i / d % d == i % d { T::one() } else { T::zero() });
    let g = net.backward_input(&trace, &upstream)?.into_data();
    Ok(g.chunks(d * n)
        .map(|block| Tensor::new(vec![d, n], block.to_vec()).unwrap())
        .collect())
}

/// Exact Jacobian at one input; row `k` is the input gradient of logit `k`.
pub fn jacobian_exact<T: Scalar>(net: &Network<T>, x: &[T]) -> Result<Jacobian<T>> {
    check_input(net, x)?;
    let matrix = jacobian_group(net, &[x])?.pop().unwrap();
    Ok(Jacobian { matrix, input_id: 0 })
}

/// Exact Jacobians of every input in `batch` (leading dimension = inputs),
/// computed in parallel; `input_id` is the row index.
pub fn jacobians<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<Vec<Jacobian<T>>> {
    let xs = inputs_of(net, batch)?;
    let groups: Vec<Vec<Tensor<T>>> = xs
        .par_chunks(JACOBIAN_CHUNK)
        .map(|chunk| jacobian_group(net, chunk))
        .collect::<Result<_>>()?;
    Ok(groups
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(input_id, matrix)| Jacobian { matrix, input_id })
        .collect())
}

pub fn frobenius_sq_exact<T: Scalar>(j: &Tensor<T>) -> T {
    j.data().iter().map(|&x| x * x).sum()
}

/// `(d / k) · Σ ‖vᵀ J‖²` over the given projection vectors.
pub fn projection_estimate<T: Scalar>(j: &Tensor<T>, projections: &[Vec<T>]) -> Result<T> {
    if projections.is_empty() {
        return Err(Error::Argument("need at least one projection".into()));
    }
    let (d, _) = j.dims2()?;
    let mut total = T::zero();
    for v in projections {
        let row = linalg::matvec_t(j, v)?;
        total += row.iter().map(|&x| x * x).sum::<T>();
    }
    Ok(total * T::of(d as f64) / T::of(projections.len() as f64))
}

/// Unbiased random-projection estimate of `‖J‖_F²` from an explicit Jacobian.
pub fn frobenius_sq_estimate_from<T: Scalar>(j: &Tensor<T>, n_proj: usize, rng: &mut RngStream) -> Result<T> {
    if n_proj < 1 {
        return Err(Error::Argument("n_proj must be at least 1".into()));
    }
    let (d, _) = j.dims2()?;
    let vs: Vec<Vec<T>> = (0..n_proj).map(|_| sample_unit_sphere(d, rng)).collect();
    projection_estimate(j, &vs)
}

/// Random-projection estimate of `‖J(x)‖_F²` that never forms the Jacobian:
/// each projection costs one backward pass.
pub fn frobenius_sq_estimate<T: Scalar>(net: &Network<T>, x: &[T], n_proj: usize, rng: &mut RngStream) -> Result<T> {
    if n_proj < 1 {
        return Err(Error::Argument("n_proj must be at least 1".into()));
    }
    check_input(net, x)?;
    let d = net.num_classes();
    let n = net.input_len();
    let batch = Tensor::new(vec![n_proj, n], x.repeat(n_proj))?;
    let mut v = Vec::with_capacity(n_proj * d);
    for _ in 0..n_proj {
        v.extend(sample_unit_sphere::<T>(d, rng));
    }
    let v = Tensor::new(vec![n_proj, d], v)?;
    let (_, trace) = net.forward(&batch)?;
    let g = net.backward_input(&trace, &v)?;
    Ok(frobenius_sq_exact(&g) * T::of(d as f64) / T::of(n_proj as f64))
}

/// Vertically stacked Jacobians of the rows of `batch`.
pub fn stacked_jacobian<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<StackedJacobian<T>> {
    let js = jacobians(net, batch)?;
    if js.is_empty() {
        return Err(Error::Argument("stacked Jacobian of an empty input set".into()));
    }
    let d = net.num_classes();
    let n = net.input_len();
    let ids = js.iter().map(|j| j.input_id).collect();
    let mut data = Vec::with_capacity(js.len() * d * n);
    for j in js {
        data.extend(j.matrix.into_data());
    }
    Ok(StackedJacobian {
        matrix: Tensor::new(vec![data.len() / n, n], data)?,
        input_ids: ids,
        classes: d,
    })
}

/// A maximizing direction of `‖M δ‖₂` over `‖δ‖_p = 1`.
#[derive(Clone, Debug)]
pub struct SingularDirection<T> {
    pub direction: Vec<T>,
    /// Achieved `‖M δ‖₂`.
    pub value: T,
    pub norm: NormOrder,
}

const DIRECTION_ITERS: usize = 1000;

pub fn dominant_singular_direction<T: Scalar>(m: &Tensor<T>, p: NormOrder) -> Result<SingularDirection<T>> {
    let tol = T::epsilon().sqrt() * T::of(1e-3);
    let r = linalg::power_iteration(m, p, NormOrder::L2, DIRECTION_ITERS, tol)?;
    if !r.sigma.is_finite() || r.sigma == T::zero() {
        return Err(Error::Numerical {
            msg: "no dominant direction".into(),
            residual: r.sigma.as_f64(),
        });
    }
    Ok(SingularDirection {
        direction: r.vector,
        value: r.sigma,
        norm: p,
    })
}

/// Both sides of `⟨A, B⟩ ≤ ‖A‖_F ‖B‖_F` and their ratio (0 when the bound is 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck<T> {
    pub lhs: T,
    pub rhs: T,
    pub ratio: T,
}

pub fn prop1_bound_check<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<BoundCheck<T>> {
    let lhs = linalg::frobenius_inner_product(a, b)?;
    let rhs = linalg::frobenius_norm(a) * linalg::frobenius_norm(b);
    let ratio = if rhs == T::zero() { T::zero() } else { lhs / rhs };
    Ok(BoundCheck { lhs, rhs, ratio })
}

/// Quantities around the stacked-Jacobian bound
/// `‖J̄_N‖_F ≤ (Σᵢⱼ ‖Jᵢ‖_F ‖Jⱼ‖_F)^{1/2}`.
#[derive(Clone, Copy, Debug)]
pub struct StackedBound<T> {
    /// `‖J̄_N‖_F`, from the stacked matrix itself.
    pub lhs: T,
    /// `(Σᵢⱼ ‖Jᵢ‖_F ‖Jⱼ‖_F)^{1/2} = Σᵢ ‖Jᵢ‖_F`.
    pub rhs: T,
    /// `(Σᵢⱼ ⟨Jᵢ, Jⱼ⟩)^{1/2} = ‖Σᵢ Jᵢ‖_F`, the pairwise sum that the bound
    /// majorizes term by term; equals `rhs` exactly when all blocks are
    /// positive multiples of each other.
    pub pairwise: T,
}

pub fn stacked_bound_check<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<StackedBound<T>> {
    let stacked = stacked_jacobian(net, batch)?;
    let lhs = linalg::frobenius_norm(&stacked.matrix);
    let blocks: Vec<Tensor<T>> = (0..stacked.input_ids.len()).map(|i| stacked.block(i)).collect();
    let rhs = blocks.iter().map(linalg::frobenius_norm).sum();
    let mut sum = Tensor::zeros(blocks[0].shape());
    for b in &blocks {
        sum.data_mut().iter_mut().zip(b.data()).for_each(|(s, &x)| *s += x);
    }
    Ok(StackedBound {
        lhs,
        rhs,
        pairwise: linalg::frobenius_norm(&sum),
    })
}

/// Cosine similarity of two Jacobians under the Frobenius inner product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity<T> {
    pub value: T,
    /// Set when either Jacobian is zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Similarity<T>> {
    let inner = linalg::frobenius_inner_product(a, b)?;
    let na = linalg::frobenius_norm(a);
    let nb = linalg::frobenius_norm(b);
    if na == T::zero() || nb == T::zero() {
        return Ok(Similarity {
            value: T::zero(),
            degenerate: true,
        });
    }
    let v = inner / (na * nb);
    Ok(Similarity {
        value: v.max(-T::one()).min(T::one()),
        degenerate: false,
    })
}

/// Which index pairs `(i, j)` enter a pairwise similarity summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// All ordered pairs with `i ≠ j`.
    #[default]
    Ordered,
    /// Pairs with `i < j`.
    Unordered,
    /// All `N²` ordered pairs including `i = j`.
    All,
}

impl PairMode {
    pub fn pair_count(self, n: usize) -> usize {
        match self {
            PairMode::Ordered => n * n.saturating_sub(1),
            PairMode::Unordered => n * n.saturating_sub(1) / 2,
            PairMode::All => n * n,
        }
    }

    fn includes(self, i: usize, j: usize) -> bool {
        match self {
            PairMode::Ordered => i != j,
            PairMode::Unordered => i < j,
            PairMode::All => true,
        }
    }
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairMode::Ordered => "ordered",
            PairMode::Unordered => "unordered",
            PairMode::All => "all",
        })
    }
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(PairMode::Ordered),
            "unordered" => Ok(PairMode::Unordered),
            "all" => Ok(PairMode::All),
            other => Err(Error::Argument(format!("unknown pair mode `{other}`"))),
        }
    }
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into the end bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) || !(hi > lo) {
            return Err(Error::Argument(format!("bad histogram range [{lo}, {hi}] / {bin_width}")));
        }
        let bins = ((hi - lo) / bin_width).round().max(1.0) as usize;
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let w = self.bin_width();
        (self.lo + k as f64 * w, self.lo + (k + 1) as f64 * w)
    }

    pub fn add(&mut self, x: f64) {
        let k = ((x - self.lo) / self.bin_width()).floor();
        let k = (k.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[k] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.02;

/// Summary of Jacobian cosine similarities over many input pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairwiseSimilarity {
    pub histogram: Histogram,
    pub median: f64,
    pub mean: f64,
    /// Pairs counted in the histogram.
    pub count: u64,
    /// Inputs whose Jacobian is zero.
    pub degenerate_inputs: usize,
    /// Pairs skipped because one side is degenerate.
    pub degenerate_pairs: u64,
    pub mode: PairMode,
}

/// Cosine similarities of Jacobians of all selected pairs of rows of `batch`.
///
/// All Jacobians are held in memory (in 64-bit); the pair products come from
/// one Gram matrix. Pairs touching a zero Jacobian are excluded and counted.
pub fn pairwise_similarity<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    mode: PairMode,
    bin_width: f64,
) -> Result<PairwiseSimilarity> {
    let js = jacobians(net, batch)?;
    if js.is_empty() {
        return Err(Error::Argument("no inputs for pairwise similarity".into()));
    }
    let flat: Vec<Vec<f64>> = js
        .into_iter()
        .map(|j| j.matrix.data().iter().map(|x| x.as_f64()).collect())
        .collect();
    similarity_from_flat(&flat, mode, bin_width)
}

/// Same summary from already flattened Jacobians (all of equal length).
pub fn similarity_from_flat(flat: &[Vec<f64>], mode: PairMode, bin_width: f64) -> Result<PairwiseSimilarity> {
    let n = flat.len();
    let len = flat.first().map_or(0, Vec::len);
    if n == 0 || flat.iter().any(|f| f.len() != len) {
        return Err(Error::Shape("Jacobians must be non-empty and of equal size".into()));
    }
    let data: Vec<f64> = flat.concat();
    let mut gram = vec![0.0; n * n];
    let a = MatRef::row_major(&data, n, len);
    linalg::gemm(1.0, a, a.t(), 0.0, &mut gram);
    let norms: Vec<f64> = (0..n).map(|i| gram[i * n + i].max(0.0).sqrt()).collect();
    let degenerate: Vec<bool> = norms.iter().map(|&x| x == 0.0).collect();

    let rows: Vec<(Histogram, Vec<f64>, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut h = Histogram::new(-1.0, 1.0, bin_width).unwrap();
            let mut vals = Vec::new();
            let mut skipped = 0;
            for j in 0..n {
                if !mode.includes(i, j) {
                    continue;
                }
                if degenerate[i] || degenerate[j] {
                    skipped += 1;
                    continue;
                }
                let s = (gram[i * n + j] / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                h.add(s);
                vals.push(s);
            }
            (h, vals, skipped)
        })
        .collect::<Vec<_>>();

    let mut histogram = Histogram::new(-1.0, 1.0, bin_width)?;
    let mut values = Vec::with_capacity(mode.pair_count(n));
    let mut degenerate_pairs = 0;
    for (h, v, s) in rows {
        histogram.merge(&h);
        values.extend(v);
        degenerate_pairs += s;
    }
    let count = values.len() as u64;
    let mean = if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(PairwiseSimilarity {
        histogram,
        median: median(&mut values),
        mean,
        count,
        degenerate_inputs: degenerate.iter().filter(|&&d| d).count(),
        degenerate_pairs,
        mode,
    })
}

/// Exact median (mean of the two middle values for even counts); NaN when empty.
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (lower, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}
