//! Small dense linear algebra: products, Frobenius geometry, SVD and power iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul of {m}x{k} by {k2}x{n}: inner dimensions differ"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        T::zero(),
        &mut out,
    );
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `y = M x` for a row-major matrix.
pub fn matvec<T: Scalar>(m: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let (r, c) = m.dims2()?;
    if x.len() != c {
        return Err(Error::Shape(format!("matvec {r}x{c} by vector of {}", x.len())));
    }
    Ok((0..r).map(|i| dot(m.row(i), x)).collect())
}

/// `y = Mᵀ x` for a row-major matrix.
pub fn matvec_t<T: Scalar>(m: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let (r, c) = m.dims2()?;
    if x.len() != r {
        return Err(Error::Shape(format!("matvecᵀ {r}x{c} by vector of {}", x.len())));
    }
    let mut y = vec![T::zero(); c];
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (yj, &mij) in y.iter_mut().zip(m.row(i)) {
            *yj += mij * xi;
        }
    }
    Ok(y)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn norm_inf<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn frobenius_norm<T: Scalar>(m: &Tensor<T>) -> T {
    norm2(m.data())
}

/// `⟨A, B⟩ = trace(AᵀB) = Σ aᵢⱼ bᵢⱼ`.
pub fn frobenius_inner_product<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "inner product of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(a.data(), b.data()))
}

/// Thin singular value decomposition `M = U diag(σ) Vᵀ`.
///
/// For an `m x n` input with `k = min(m, n)`: `u` is `m x k`, `v` is `n x k`,
/// both with orthonormal columns, and `sigma` is non-negative and descending.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Tensor<T>,
    pub sigma: Vec<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> Tensor<T> {
        let (m, k) = self.u.dims2().unwrap();
        let (n, _) = self.v.dims2().unwrap();
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..k {
                let x = us.at(i, j) * self.sigma[j];
                us.set(i, j, x);
            }
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::row_major(us.data(), m, k),
            MatRef::row_major(self.v.data(), n, k).t(),
            T::zero(),
            &mut out,
        );
        Tensor::from_parts_unchecked(vec![m, n], out)
    }
}

const SVD_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd<T: Scalar>(m: &Tensor<T>) -> Result<Svd<T>> {
    let (rows, cols) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    if rows < cols {
        let t = svd(&m.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let (mm, n) = (rows, cols);
    // Work on columns stored contiguously.
    let mut w: Vec<Vec<T>> = (0..n).map(|j| (0..mm).map(|i| m.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let tol = T::epsilon() * T::of(8.0);
    let tiny = T::min_positive_value();
    let mut converged = false;
    let mut worst = T::zero();
    for _ in 0..SVD_MAX_SWEEPS {
        worst = T::zero();
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha <= tiny || beta <= tiny {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            msg: format!("one-sided Jacobi did not converge in {SVD_MAX_SWEEPS} sweeps"),
            residual: worst.as_f64(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = w.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let scale = norms.iter().fold(T::zero(), |a, &b| a.max(b));
    let cutoff = scale * T::epsilon() * T::of(mm as f64);

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        v_cols.push(v[j].clone());
        if s > cutoff && s > T::zero() {
            u_cols.push(w[j].iter().map(|&x| x / s).collect());
            sigma.push(s);
        } else {
            u_cols.push(Vec::new());
            sigma.push(T::zero());
        }
    }
    complete_orthonormal(&mut u_cols, mm);

    let u = Tensor::from_fn(&[mm, n], |idx| u_cols[idx % n][idx / n]);
    let vt = Tensor::from_fn(&[n, n], |idx| v_cols[idx % n][idx / n]);
    Ok(Svd { u, sigma, v: vt })
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills empty columns with unit vectors orthogonal to all others (Gram-Schmidt on the canonical basis).
fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], dim: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < dim, "basis completion ran out of candidates");
            let mut e = vec![T::zero(); dim];
            e[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(&e, other);
                    for (x, &o) in e.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let n = norm2(&e);
            if n > T::of(0.5) {
                cols[j] = e.iter().map(|&x| x / n).collect();
                break;
            }
        }
    }
}

/// Norm order of the perturbation constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    LInf,
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormOrder::L2 => write!(f, "2"),
            NormOrder::LInf => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" | "L2" => Ok(NormOrder::L2),
            "inf" | "linf" | "Linf" | "LInf" => Ok(NormOrder::LInf),
            other => Err(Error::Argument(format!("unknown norm order `{other}`"))),
        }
    }
}

/// Result of a (p, q) power iteration.
#[derive(Clone, Debug)]
pub struct PowerResult<T> {
    /// Achieved `‖M v‖_q`.
    pub sigma: T,
    /// Maximizer with `‖v‖_p = 1`.
    pub vector: Vec<T>,
    pub iterations: usize,
}

/// Extra sign-vector starts tried by the `p = ∞` iteration.
const LINF_RESTARTS: usize = 32;
const POWER_START_SEED: u64 = 0x5eed_0f_9a;

/// Approximates `max_{‖v‖_p = 1} ‖M v‖_q`.
///
/// For `p = 2` this is classical power iteration on `MᵀM`. For `p = ∞` the
/// generalized power method with the sign dual map is run, `v ← sign(Mᵀ M v)`,
/// from the sign pattern of the leading right singular vector plus a few
/// deterministic random sign starts, with single-flip ascent at fixed points;
/// the best end point wins. Each run is monotone but only reaches a local
/// maximum over the hypercube corners.
///
/// When the top singular values are (nearly) tied the returned direction is not
/// unique; only `sigma` is stable.
pub fn power_iteration<T: Scalar>(
    m: &Tensor<T>,
    p: NormOrder,
    q: NormOrder,
    iters: usize,
    tol: T,
) -> Result<PowerResult<T>> {
    if q != NormOrder::L2 {
        return Err(Error::Argument("only q = 2 is supported".into()));
    }
    if iters == 0 {
        return Err(Error::Argument("power iteration needs at least one step".into()));
    }
    let (_, n) = m.dims2()?;
    if m.max_abs() == T::zero() {
        return Err(Error::Degenerate("power iteration on a zero matrix".into()));
    }
    let l2 = power_iteration_l2(m, iters, tol)?;
    match p {
        NormOrder::L2 => Ok(l2),
        NormOrder::LInf => {
            let mut rng = RngStream::new(POWER_START_SEED);
            let mut starts = vec![sign_vec(&l2.vector)];
            for _ in 0..LINF_RESTARTS {
                starts.push((0..n).map(|_| T::of(rng.sign())).collect());
            }
            let (rows, _) = m.dims2()?;
            let col_sq: Vec<T> = (0..n).map(|j| (0..rows).map(|i| m.at(i, j) * m.at(i, j)).sum()).collect();
            let mut best: Option<PowerResult<T>> = None;
            for start in starts {
                let r = sign_power(m, &col_sq, start, iters)?;
                if best.as_ref().map_or(true, |b| r.sigma > b.sigma) {
                    best = Some(r);
                }
            }
            Ok(best.unwrap())
        }
    }
}

fn sign_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v < T::zero() { -T::one() } else { T::one() })
        .collect()
}

fn power_iteration_l2<T: Scalar>(m: &Tensor<T>, iters: usize, tol: T) -> Result<PowerResult<T>> {
    let (_, n) = m.dims2()?;
    let mut rng = RngStream::new(POWER_START_SEED);
    let mut v: Vec<T> = (0..n).map(|_| T::of(rng.normal())).collect();
    normalize(&mut v);
    let mut sigma = T::zero();
    let mut done = 0;
    for it in 1..=iters {
        let mv = matvec(m, &v)?;
        let new_sigma = norm2(&mv);
        let mut w = matvec_t(m, &mv)?;
        if norm2(&w) == T::zero() {
            return Err(Error::Degenerate("start vector fell in the null space".into()));
        }
        normalize(&mut w);
        // MᵀM is positive semidefinite, so iterates do not flip sign.
        let moved = norm2(&w.iter().zip(&v).map(|(a, b)| *a - *b).collect::<Vec<T>>());
        v = w;
        done = it;
        let change = (new_sigma - sigma).abs();
        sigma = new_sigma;
        if it > 1 && change <= tol * sigma && moved <= tol {
            break;
        }
    }
    // Report the value at the final vector, and fix the sign by the largest entry.
    sigma = norm2(&matvec(m, &v)?);
    let pivot = v
        .iter()
        .copied()
        .fold(T::zero(), |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(PowerResult {
        sigma,
        vector: v,
        iterations: done,
    })
}

/// Sign-map iteration `v ← sign(Mᵀ M v)` from `v`. At a fixed point, single
/// coordinate flips are tried: flipping `vᵢ` raises `‖Mv‖²` by
/// `4(‖Mᵢ‖² − vᵢ gᵢ)` where `g = MᵀMv`, so the best improving flip is taken
/// and the iteration resumes. Both moves strictly increase `‖Mv‖`.
fn sign_power<T: Scalar>(m: &Tensor<T>, col_sq: &[T], mut v: Vec<T>, iters: usize) -> Result<PowerResult<T>> {
    let mut done = 0;
    for it in 1..=iters {
        let mv = matvec(m, &v)?;
        let g = matvec_t(m, &mv)?;
        let next = sign_vec(&g);
        done = it;
        if next != v {
            v = next;
            continue;
        }
        let mut best = (T::zero(), usize::MAX);
        for i in 0..v.len() {
            let gain = col_sq[i] - v[i] * g[i];
            if gain > best.0 {
                best = (gain, i);
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        v[best.1] = -v[best.1];
    }
    let sigma = norm2(&matvec(m, &v)?);
    if v[0] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(PowerResult {
        sigma,
        vector: v,
        iterations: done,
    })
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let n = norm2(v);
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
