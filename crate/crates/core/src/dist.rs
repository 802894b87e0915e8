//! Dense categorical distributions over `S^D` and conditional kernels.
//!
//! States are encoded big-endian: `index(x) = Σ_d x[d] · |S|^(D-1-d)`, so
//! dimension 0 is the most significant digit. Every module shares this
//! convention (it is also the ordering produced by `nalgebra`'s Kronecker
//! product, which the forward process relies on).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `|S|^D` accepted by [`StateSpace::new`].
pub const DEFAULT_MAX_STATES: usize = 1_000_000;
/// Normalization tolerance checked at construction.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Looser tolerance for objects produced by long kernel chains.
pub const CHAIN_TOL: f64 = 1e-10;
/// Floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSpace {
    states_per_dim: usize,
    num_dims: usize,
}

impl StateSpace {
    pub fn new(states_per_dim: usize, num_dims: usize) -> Result<Self> {
        Self::with_max(states_per_dim, num_dims, DEFAULT_MAX_STATES)
    }

    pub fn with_max(states_per_dim: usize, num_dims: usize, max_states: usize) -> Result<Self> {
        if states_per_dim < 2 {
            return Err(Error::arg(format!("|S| must be >= 2, got {states_per_dim}")));
        }
        if num_dims < 1 {
            return Err(Error::arg("D must be >= 1"));
        }
        let size = u32::try_from(num_dims)
            .ok()
            .and_then(|d| states_per_dim.checked_pow(d))
            .filter(|&n| n <= max_states)
            .ok_or_else(|| {
                Error::arg(format!(
                    "|S|^D = {states_per_dim}^{num_dims} exceeds the dense limit {max_states}"
                ))
            })?;
        debug_assert!(size >= 2);
        Ok(Self {
            states_per_dim,
            num_dims,
        })
    }

    pub fn states_per_dim(&self) -> usize {
        self.states_per_dim
    }

    pub fn num_dims(&self) -> usize {
        self.num_dims
    }

    /// Number of joint states `|S|^D`.
    pub fn size(&self) -> usize {
        self.states_per_dim.pow(self.num_dims as u32)
    }

    /// Place value of dimension `d` in the big-endian index.
    pub fn stride(&self, d: usize) -> usize {
        self.states_per_dim.pow((self.num_dims - 1 - d) as u32)
    }

    pub fn index(&self, x: &[usize]) -> usize {
        debug_assert_eq!(x.len(), self.num_dims);
        x.iter()
            .fold(0, |acc, &xd| acc * self.states_per_dim + xd)
    }

    pub fn try_index(&self, x: &[usize]) -> Result<usize> {
        if x.len() != self.num_dims {
            return Err(Error::arg(format!(
                "state has {} coordinates, expected {}",
                x.len(),
                self.num_dims
            )));
        }
        if let Some(&bad) = x.iter().find(|&&v| v >= self.states_per_dim) {
            return Err(Error::arg(format!(
                "coordinate {bad} outside 0..{}",
                self.states_per_dim
            )));
        }
        Ok(self.index(x))
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_dims];
        self.decode_into(index, &mut out);
        out
    }

    pub fn decode_into(&self, mut index: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = index % self.states_per_dim;
            index /= self.states_per_dim;
        }
    }

    /// Coordinate `d` of the state at `index`.
    pub fn coord(&self, index: usize, d: usize) -> usize {
        (index / self.stride(d)) % self.states_per_dim
    }

    /// Index of the state obtained by replacing coordinate `d` with `value`.
    pub fn with_coord(&self, index: usize, d: usize, value: usize) -> usize {
        let stride = self.stride(d);
        let old = (index / stride) % self.states_per_dim;
        index - old * stride + value * stride
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d >= self.num_dims {
            return Err(Error::arg(format!(
                "dimension {d} out of range 0..{}",
                self.num_dims
            )));
        }
        Ok(())
    }

    pub(crate) fn check_same(&self, other: &StateSpace) -> Result<()> {
        if self != other {
            return Err(Error::SpaceMismatch {
                left: format!("{self:?}"),
                right: format!("{other:?}"),
            });
        }
        Ok(())
    }
}

fn validate_probs(probs: &[f64], tol: f64, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Validation(format!("{what}: entry {i} = {p} is not a probability")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::Validation(format!("{what}: entries sum to {sum}, not 1")));
    }
    Ok(())
}

/// A dense probability vector over `S^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    space: StateSpace,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(space, probs, NORMALIZATION_TOL)
    }

    pub fn with_tolerance(space: StateSpace, probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.len() != space.size() {
            return Err(Error::arg(format!(
                "distribution has {} entries, space has {}",
                probs.len(),
                space.size()
            )));
        }
        validate_probs(&probs, tol, "distribution")?;
        Ok(Self { space, probs })
    }

    /// Trusted constructor for results of stochastic matrix products.
    pub(crate) fn from_raw(space: StateSpace, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), space.size());
        Self { space, probs }
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(space: StateSpace, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("weights must be non-negative with positive mass".into()));
        }
        Self::new(space, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(space: StateSpace) -> Self {
        let n = space.size();
        Self::from_raw(space, vec![1.0 / n as f64; n])
    }

    pub fn delta(space: StateSpace, index: usize) -> Result<Self> {
        if index >= space.size() {
            return Err(Error::arg(format!("state {index} out of range")));
        }
        let mut probs = vec![0.0; space.size()];
        probs[index] = 1.0;
        Ok(Self::from_raw(space, probs))
    }

    /// Outer product of per-dimension marginals.
    pub fn product(space: StateSpace, marginals: &[Vec<f64>]) -> Result<Self> {
        if marginals.len() != space.num_dims() {
            return Err(Error::arg("need one marginal per dimension"));
        }
        for m in marginals {
            if m.len() != space.states_per_dim() {
                return Err(Error::arg("marginal length must equal |S|"));
            }
            validate_probs(m, NORMALIZATION_TOL, "marginal")?;
        }
        let mut probs = vec![0.0; space.size()];
        let mut coords = vec![0; space.num_dims()];
        for (idx, p) in probs.iter_mut().enumerate() {
            space.decode_into(idx, &mut coords);
            *p = coords
                .iter()
                .zip(marginals)
                .map(|(&c, m)| m[c])
                .product();
        }
        Ok(Self::from_raw(space, probs))
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Exact marginal of dimension `d` (0-based).
    pub fn marginal(&self, d: usize) -> Result<Vec<f64>> {
        self.space.check_dim(d)?;
        Ok(marginal_of(&self.space, &self.probs, d))
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        (0..self.space.num_dims())
            .map(|d| marginal_of(&self.space, &self.probs, d))
            .collect()
    }

    /// Product of this distribution's marginals.
    pub fn marginal_product(&self) -> Self {
        Self::product(self.space, &self.marginals()).expect("marginals are valid")
    }

    /// KL to the product of marginals; zero iff the coordinates are independent.
    pub fn total_correlation(&self) -> f64 {
        kl_probs(&self.probs, self.marginal_product().probs())
    }

    /// `weight * a + (1 - weight) * b`.
    pub fn mix(weight: f64, a: &Self, b: &Self) -> Result<Self> {
        a.space.check_same(&b.space)?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::arg("mixing weight must lie in [0, 1]"));
        }
        let probs = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(x, y)| weight * x + (1.0 - weight) * y)
            .collect();
        Ok(Self::from_raw(a.space, probs))
    }

    pub fn entropy(&self) -> f64 {
        entropy_probs(&self.probs)
    }
}

pub(crate) fn marginal_of(space: &StateSpace, probs: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; space.states_per_dim()];
    for (idx, &p) in probs.iter().enumerate() {
        out[space.coord(idx, d)] += p;
    }
    out
}

pub fn tv_distance(p: &JointDistribution, q: &JointDistribution) -> Result<f64> {
    p.space.check_same(&q.space)?;
    Ok(tv_probs(&p.probs, &q.probs))
}

/// `Σ_{p>0} p log(p/q)`; `+∞` when `p` is not absolutely continuous w.r.t. `q`.
pub fn kl_divergence(p: &JointDistribution, q: &JointDistribution) -> Result<f64> {
    p.space.check_same(&q.space)?;
    Ok(kl_probs(&p.probs, &q.probs))
}

/// `H(p, q) = E_p[-log q]`; `+∞` on support violation.
pub fn cross_entropy(p: &JointDistribution, q: &JointDistribution) -> Result<f64> {
    p.space.check_same(&q.space)?;
    Ok(cross_entropy_probs(&p.probs, &q.probs))
}

pub fn tv_probs(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn kl_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += a * (a / b).ln();
        }
    }
    // Rounding can produce tiny negatives for p ≈ q.
    acc.max(0.0)
}

pub fn cross_entropy_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc -= a * b.ln();
        }
    }
    acc
}

pub fn entropy_probs(p: &[f64]) -> f64 {
    p.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum()
}

/// Conditional distribution `K(y | x)` for every `x`; column `x` is `K(· | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseKernel {
    space: StateSpace,
    matrix: DMatrix<f64>,
}

impl DenseKernel {
    pub fn new(space: StateSpace, matrix: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(space, matrix, NORMALIZATION_TOL)
    }

    pub fn with_tolerance(space: StateSpace, matrix: DMatrix<f64>, tol: f64) -> Result<Self> {
        let n = space.size();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::arg(format!(
                "kernel must be {n}x{n}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        for x in 0..n {
            validate_probs(&matrix.as_slice()[x * n..(x + 1) * n], tol, &format!("kernel column {x}"))?;
        }
        Ok(Self { space, matrix })
    }

    pub(crate) fn from_raw(space: StateSpace, matrix: DMatrix<f64>) -> Self {
        debug_assert_eq!(matrix.nrows(), space.size());
        Self { space, matrix }
    }

    /// Builds a kernel column by column; `fill(x, column)` writes `K(· | x)`.
    pub fn from_columns<F>(space: StateSpace, mut fill: F) -> Result<Self>
    where
        F: FnMut(usize, &mut [f64]) -> Result<()>,
    {
        let n = space.size();
        let mut data = vec![0.0; n * n];
        for (x, col) in data.chunks_mut(n).enumerate() {
            fill(x, col)?;
        }
        Self::with_tolerance(space, DMatrix::from_vec(n, n, data), CHAIN_TOL)
    }

    pub fn identity(space: StateSpace) -> Self {
        let n = space.size();
        Self::from_raw(space, DMatrix::identity(n, n))
    }

    /// Kernel whose every column equals `dist`.
    pub fn constant(dist: &JointDistribution) -> Self {
        let n = dist.space.size();
        Self::from_raw(
            dist.space,
            DMatrix::from_fn(n, n, |y, _| dist.probs[y]),
        )
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn column(&self, x: usize) -> &[f64] {
        let n = self.space.size();
        &self.matrix.as_slice()[x * n..(x + 1) * n]
    }

    pub fn entry(&self, y: usize, x: usize) -> f64 {
        self.matrix[(y, x)]
    }

    pub fn column_distribution(&self, x: usize) -> JointDistribution {
        JointDistribution::from_raw(self.space, self.column(x).to_vec())
    }

    /// Whether column `x` equals the product of its own marginals within `tol`.
    pub fn is_column_product(&self, x: usize, tol: f64) -> bool {
        let col = self.column_distribution(x);
        let prod = col.marginal_product();
        col.probs
            .iter()
            .zip(prod.probs())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// A kernel whose every column is a product distribution, stored by factors.
///
/// `factor(x, d)` is the `d`-th marginal of column `x`; layout is `[x][d][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductKernel {
    space: StateSpace,
    factors: Vec<f64>,
}

impl ProductKernel {
    pub fn new(space: StateSpace, factors: Vec<f64>) -> Result<Self> {
        let s = space.states_per_dim();
        if factors.len() != space.size() * space.num_dims() * s {
            return Err(Error::arg("factor table has the wrong length"));
        }
        for (i, f) in factors.chunks(s).enumerate() {
            validate_probs(f, CHAIN_TOL, &format!("factor {i}"))?;
        }
        Ok(Self { space, factors })
    }

    pub(crate) fn from_raw(space: StateSpace, factors: Vec<f64>) -> Self {
        debug_assert_eq!(factors.len(), space.size() * space.num_dims() * space.states_per_dim());
        Self { space, factors }
    }

    /// Per-column marginals of a dense kernel.
    pub fn marginals_of(kernel: &DenseKernel) -> Self {
        let space = kernel.space;
        let (s, dims) = (space.states_per_dim(), space.num_dims());
        let mut factors = vec![0.0; space.size() * dims * s];
        for x in 0..space.size() {
            let block = &mut factors[x * dims * s..(x + 1) * dims * s];
            for (y, &p) in kernel.column(x).iter().enumerate() {
                for d in 0..dims {
                    block[d * s + space.coord(y, d)] += p;
                }
            }
        }
        Self { space, factors }
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub(crate) fn factors_mut(&mut self) -> &mut [f64] {
        &mut self.factors
    }

    pub fn factor(&self, x: usize, d: usize) -> &[f64] {
        let s = self.space.states_per_dim();
        let off = (x * self.space.num_dims() + d) * s;
        &self.factors[off..off + s]
    }

    /// `Π_d factor(x, d)[y^d]`.
    pub fn prob(&self, y: usize, x: usize) -> f64 {
        (0..self.space.num_dims())
            .map(|d| self.factor(x, d)[self.space.coord(y, d)])
            .product()
    }

    /// Column `x` as a dense vector.
    pub fn column_into(&self, x: usize, out: &mut [f64]) {
        let block = self.space.num_dims() * self.space.states_per_dim();
        expand_product(&self.space, &self.factors[x * block..(x + 1) * block], out);
    }

    pub fn to_dense(&self) -> DenseKernel {
        let n = self.space.size();
        let mut data = vec![0.0; n * n];
        for (x, col) in data.chunks_mut(n).enumerate() {
            self.column_into(x, col);
        }
        DenseKernel::from_raw(self.space, DMatrix::from_vec(n, n, data))
    }
}

/// Dense product distribution from a `[d][a]` factor block.
pub(crate) fn expand_product(space: &StateSpace, block: &[f64], out: &mut [f64]) {
    let s = space.states_per_dim();
    out[0] = 1.0;
    let mut len = 1;
    // Expand in place; dimension 0 ends up most significant.
    for f in block.chunks(s) {
        for i in (0..len).rev() {
            let base = out[i];
            for a in (0..s).rev() {
                out[i * s + a] = base * f[a];
            }
        }
        len *= s;
    }
}

/// `(outer ∘ inner)(x | z) = Σ_y outer(x | y) inner(y | z)`.
pub fn compose(outer: &DenseKernel, inner: &DenseKernel) -> Result<DenseKernel> {
    outer.space.check_same(&inner.space)?;
    Ok(DenseKernel::from_raw(outer.space, &outer.matrix * &inner.matrix))
}

/// `E_{y ~ prior}[K(· | y)]`.
pub fn push(kernel: &DenseKernel, prior: &JointDistribution) -> Result<JointDistribution> {
    kernel.space.check_same(&prior.space)?;
    let n = kernel.space.size();
    let mut out = vec![0.0; n];
    for (y, &w) in prior.probs.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &k) in out.iter_mut().zip(kernel.column(y)) {
            *o += w * k;
        }
    }
    Ok(JointDistribution::from_raw(kernel.space, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2d2() -> StateSpace {
        StateSpace::new(2, 2).unwrap()
    }

    #[test]
    fn index_is_big_endian_bijection() {
        let space = StateSpace::new(3, 3).unwrap();
        assert_eq!(space.index(&[1, 0, 2]), 9 + 2);
        for i in 0..space.size() {
            assert_eq!(space.index(&space.decode(i)), i);
        }
        assert_eq!(space.coord(11, 0), 1);
        assert_eq!(space.with_coord(11, 2, 0), 9);
    }

    #[test]
    fn space_limits() {
        assert!(StateSpace::new(1, 3).is_err());
        assert!(StateSpace::new(2, 0).is_err());
        assert!(StateSpace::new(10, 7).is_err());
        assert!(StateSpace::new(10, 6).is_ok());
        assert!(StateSpace::new(2, 300).is_err());
    }

    #[test]
    fn marginal_examples() {
        let space = s2d2();
        let u = JointDistribution::uniform(space);
        assert_eq!(u.marginal(1).unwrap(), vec![0.5, 0.5]);

        let delta = JointDistribution::delta(space, space.index(&[0, 1])).unwrap();
        assert_eq!(delta.marginal(1).unwrap(), vec![0.0, 1.0]);

        let p = JointDistribution::new(space, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = p.marginal(0).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);

        assert!(matches!(p.marginal(2), Err(Error::Argument(_))));
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(JointDistribution::new(s2d2(), vec![0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(JointDistribution::new(s2d2(), vec![1.5, -0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tv_examples() {
        let space = StateSpace::new(2, 1).unwrap();
        let p = JointDistribution::new(space, vec![0.5, 0.5]).unwrap();
        let q = JointDistribution::new(space, vec![0.9, 0.1]).unwrap();
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert!((tv_distance(&p, &q).unwrap() - 0.4).abs() < 1e-15);
        let a = JointDistribution::delta(space, 0).unwrap();
        let b = JointDistribution::delta(space, 1).unwrap();
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        let other = JointDistribution::uniform(s2d2());
        assert!(matches!(tv_distance(&p, &other), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn kl_examples() {
        let space = StateSpace::new(2, 1).unwrap();
        let p = JointDistribution::new(space, vec![1.0, 0.0]).unwrap();
        let q = JointDistribution::new(space, vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn cross_entropy_examples() {
        let space = s2d2();
        let q = JointDistribution::new(space, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = JointDistribution::delta(space, 2).unwrap();
        assert!((cross_entropy(&d, &q).unwrap() + 0.3f64.ln()).abs() < 1e-15);

        let half = JointDistribution::new(StateSpace::new(2, 1).unwrap(), vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-15);

        // Against a product q the joint cross entropy is a per-dimension sum.
        let p = JointDistribution::new(space, vec![0.4, 0.1, 0.05, 0.45]).unwrap();
        let qm = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        let prod = JointDistribution::product(space, &qm).unwrap();
        let per_dim: f64 = (0..2)
            .map(|d| cross_entropy_probs(&p.marginal(d).unwrap(), &qm[d]))
            .sum();
        assert!((cross_entropy(&p, &prod).unwrap() - per_dim).abs() < 1e-14);
    }

    #[test]
    fn compose_and_push_basics() {
        let space = s2d2();
        let k = DenseKernel::from_columns(space, |x, col| {
            for (y, c) in col.iter_mut().enumerate() {
                *c = if y == x { 0.7 } else { 0.1 };
            }
            Ok(())
        })
        .unwrap();
        let id = DenseKernel::identity(space);
        assert_eq!(compose(&id, &k).unwrap(), k);

        let delta = JointDistribution::delta(space, 3).unwrap();
        let pushed = push(&k, &delta).unwrap();
        assert_eq!(pushed.probs(), k.column(3));

        let routed = compose(&k, &DenseKernel::constant(&delta)).unwrap();
        for x in 0..4 {
            assert_eq!(routed.column(x), k.column(3));
        }

        // k is doubly stochastic, so uniform is invariant.
        let u = JointDistribution::uniform(space);
        let pu = push(&k, &u).unwrap();
        assert!(pu.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert_eq!(push(&id, &u).unwrap(), u);
    }

    #[test]
    fn product_kernel_expansion() {
        let space = StateSpace::new(3, 2).unwrap();
        let mut factors = Vec::new();
        for x in 0..space.size() {
            for d in 0..2 {
                let w = [1.0 + x as f64, 2.0 + d as f64, 0.5];
                let z: f64 = w.iter().sum();
                factors.extend(w.iter().map(|v| v / z));
            }
        }
        let pk = ProductKernel::new(space, factors).unwrap();
        let dense = pk.to_dense();
        for x in 0..space.size() {
            assert!(dense.is_column_product(x, 1e-15));
            for y in 0..space.size() {
                assert!((dense.entry(y, x) - pk.prob(y, x)).abs() < 1e-15);
            }
        }
        let back = ProductKernel::marginals_of(&dense);
        assert!(back.factors().iter().zip(pk.factors()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn kernel_validation() {
        let space = s2d2();
        let bad = DMatrix::from_element(4, 4, 0.3);
        assert!(matches!(DenseKernel::new(space, bad), Err(Error::Validation(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn normalized(w: Vec<f64>) -> Vec<f64> {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        }

        fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(1e-6..1.0f64, n).prop_map(normalized)
        }

        fn kernel(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(dist(n), n).prop_map(|cols| cols.concat())
        }

        fn dense(space: StateSpace, cols: Vec<f64>) -> DenseKernel {
            let n = space.size();
            DenseKernel::new(space, DMatrix::from_vec(n, n, cols)).unwrap()
        }

        proptest! {
            #[test]
            fn pinsker(p in dist(6), q in dist(6)) {
                prop_assert!(tv_probs(&p, &q) <= (0.5 * kl_probs(&p, &q)).sqrt() + 1e-12);
            }

            #[test]
            fn kl_jointly_convex(p1 in dist(5), p2 in dist(5), q1 in dist(5), q2 in dist(5), l in 0.0..1.0f64) {
                let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| l * x + (1.0 - l) * y).collect() };
                let lhs = kl_probs(&mix(&p1, &p2), &mix(&q1, &q2));
                prop_assert!(lhs <= l * kl_probs(&p1, &q1) + (1.0 - l) * kl_probs(&p2, &q2) + 1e-12);
            }

            #[test]
            fn tv_metric(p in dist(4), q in dist(4), r in dist(4)) {
                prop_assert!(tv_probs(&p, &r) <= tv_probs(&p, &q) + tv_probs(&q, &r) + 1e-15);
                prop_assert!((tv_probs(&p, &q) - tv_probs(&q, &p)).abs() < 1e-15);
            }

            #[test]
            fn compose_associative(a in kernel(4), b in kernel(4), c in kernel(4), r in dist(4)) {
                let space = StateSpace::new(2, 2).unwrap();
                let (a, b, c) = (dense(space, a), dense(space, b), dense(space, c));
                let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
                let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
                prop_assert!((left.matrix() - right.matrix()).amax() < 1e-14);
                let r = JointDistribution::new(space, r).unwrap();
                let pushed = push(&left, &r).unwrap();
                let staged = push(&a, &push(&b, &push(&c, &r).unwrap()).unwrap()).unwrap();
                prop_assert!(tv_distance(&pushed, &staged).unwrap() < 1e-14);
                prop_assert!((pushed.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn index_round_trip(s in 2usize..5, d in 1usize..4, seed in any::<u64>()) {
                let space = StateSpace::new(s, d).unwrap();
                let i = (seed % space.size() as u64) as usize;
                prop_assert_eq!(space.index(&space.decode(i)), i);
            }
        }
    }
}
