//! Exact reverse-time objects of a factorized forward process.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;

use crate::dist::{DenseKernel, JointDistribution, ProductKernel, StateSpace, CHAIN_TOL};
use crate::error::{Error, Result};
use crate::forward::FactorizedForward;

/// Forward process together with its data distribution `q_0`.
///
/// Marginals `q_t` are cached by the bit pattern of `t`; the cache only ever
/// stores exact recomputations, so concurrent readers observe identical values.
#[derive(Debug)]
pub struct PosteriorContext {
    fwd: FactorizedForward,
    q0: JointDistribution,
    cache: RwLock<HashMap<u64, Arc<JointDistribution>>>,
}

impl Clone for PosteriorContext {
    fn clone(&self) -> Self {
        Self {
            fwd: self.fwd.clone(),
            q0: self.q0.clone(),
            cache: RwLock::new(self.cache.read().expect("cache poisoned").clone()),
        }
    }
}

/// Per-dimension maps `p^d_{0|t}(·|x_t) ↦ p^d_{s|t}(·|x_t)`, indexed by `(d, x_t^d)`.
///
/// `matrix(d, c)[a, b] = q^d_{s|0,t}(a | b, c)`. When `x_0^d = b` cannot reach
/// `c`, column `b` is `δ_c`. At `s = 0` every matrix is the identity.
#[derive(Clone, Debug)]
pub struct Bridges {
    states: usize,
    mats: Vec<DMatrix<f64>>,
}

impl Bridges {
    pub fn matrix(&self, d: usize, c: usize) -> &DMatrix<f64> {
        &self.mats[d * self.states + c]
    }

    /// Applies the bridges column by column.
    pub fn apply(&self, x0_model: &ProductKernel) -> ProductKernel {
        let space = x0_model.space();
        let s = space.states_per_dim();
        let mut out = x0_model.clone();
        let factors = out.factors_mut();
        for x in 0..space.size() {
            for d in 0..space.num_dims() {
                let a = self.matrix(d, space.coord(x, d));
                let off = (x * space.num_dims() + d) * s;
                let input = nalgebra::DVector::from_column_slice(x0_model.factor(x, d));
                let z = a * input;
                factors[off..off + s].copy_from_slice(z.as_slice());
            }
        }
        out
    }
}

/// Time-reversal generator; columns with `q_t(x) = 0` are zero and marked undefined.
#[derive(Clone, Debug)]
pub struct ReverseRate {
    pub matrix: DMatrix<f64>,
    pub defined: Vec<bool>,
}

impl PosteriorContext {
    pub fn new(fwd: FactorizedForward, q0: JointDistribution) -> Result<Self> {
        fwd.space().check_same(&q0.space())?;
        Ok(Self {
            fwd,
            q0,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn forward(&self) -> &FactorizedForward {
        &self.fwd
    }

    pub fn data(&self) -> &JointDistribution {
        &self.q0
    }

    pub fn space(&self) -> StateSpace {
        self.fwd.space()
    }

    /// Exact `q_t`.
    pub fn marginal(&self, t: f64) -> Result<Arc<JointDistribution>> {
        let key = t.to_bits();
        if let Some(hit) = self.cache.read().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let qt = Arc::new(self.fwd.marginal_at(&self.q0, t)?);
        self.cache
            .write()
            .expect("cache poisoned")
            .entry(key)
            .or_insert_with(|| Arc::clone(&qt));
        Ok(qt)
    }

    /// `q_t(x) > 0` for each state `x`.
    pub fn support(&self, t: f64) -> Result<Vec<bool>> {
        Ok(self.marginal(t)?.probs().iter().map(|&p| p > 0.0).collect())
    }

    /// Bayes posterior `q_{s|t}`; columns off the support of `q_t` hold `q_s`.
    pub fn true_posterior_kernel(&self, s: f64, t: f64) -> Result<DenseKernel> {
        let (s, t) = self.fwd.check_times(s, t)?;
        let space = self.space();
        let n = space.size();
        let qs = self.marginal(s)?;
        let qt = self.marginal(t)?;
        let fwd = self.fwd.joint_transition_kernel(s, t)?;
        let mut data = vec![0.0; n * n];
        for (xt, col) in data.chunks_mut(n).enumerate() {
            let denom = qt.prob(xt);
            if denom <= 0.0 {
                col.copy_from_slice(qs.probs());
                continue;
            }
            for (xs, c) in col.iter_mut().enumerate() {
                *c = fwd.entry(xt, xs) * qs.prob(xs) / denom;
            }
            let z: f64 = col.iter().sum();
            col.iter_mut().for_each(|c| *c /= z);
        }
        DenseKernel::with_tolerance(space, DMatrix::from_vec(n, n, data), CHAIN_TOL)
    }

    /// `q^d_{s|t}(· | x_t)`.
    pub fn posterior_marginal(&self, s: f64, t: f64, x_t: usize, d: usize) -> Result<Vec<f64>> {
        let space = self.space();
        space.check_dim(d)?;
        if x_t >= space.size() {
            return Err(Error::arg(format!("state {x_t} out of range")));
        }
        if self.marginal(t)?.prob(x_t) <= 0.0 {
            return Err(Error::Conditioning(format!("q_t({x_t}) = 0 at t = {t}")));
        }
        let post = self.true_posterior_kernel(s, t)?;
        let mut out = vec![0.0; space.states_per_dim()];
        for (xs, &p) in post.column(x_t).iter().enumerate() {
            out[space.coord(xs, d)] += p;
        }
        Ok(out)
    }

    /// All per-dimension posterior marginals as a product kernel.
    pub fn posterior_marginals(&self, s: f64, t: f64) -> Result<ProductKernel> {
        Ok(ProductKernel::marginals_of(&self.true_posterior_kernel(s, t)?))
    }

    /// Product of the true posterior marginals in every column.
    pub fn analytical_denoiser_kernel(&self, s: f64, t: f64) -> Result<DenseKernel> {
        Ok(self.posterior_marginals(s, t)?.to_dense())
    }

    pub fn bridges(&self, s: f64, t: f64) -> Result<Bridges> {
        let (s, t) = self.fwd.check_times(s, t)?;
        let space = self.space();
        let n = space.states_per_dim();
        let mut mats = Vec::with_capacity(space.num_dims() * n);
        for d in 0..space.num_dims() {
            if s == 0.0 {
                mats.extend((0..n).map(|_| DMatrix::identity(n, n)));
                continue;
            }
            let s0 = self.fwd.transition_matrix(d, 0.0, s)?;
            let ts = self.fwd.transition_matrix(d, s, t)?;
            let t0 = self.fwd.transition_matrix(d, 0.0, t)?;
            for c in 0..n {
                mats.push(DMatrix::from_fn(n, n, |a, b| {
                    let reach = t0[(c, b)];
                    if reach > 0.0 {
                        s0[(a, b)] * ts[(c, a)] / reach
                    } else if a == c {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
        }
        Ok(Bridges { states: n, mats })
    }

    /// `p^d_{s|t}(·|x_t) = Σ_{x_0^d} q^d_{s|0,t}(·|x_0^d, x_t^d) p^d_{0|t}(x_0^d|x_t)` per dimension.
    pub fn reparametrize(&self, x0_model: &ProductKernel, s: f64, t: f64) -> Result<ProductKernel> {
        self.space().check_same(&x0_model.space())?;
        Ok(self.bridges(s, t)?.apply(x0_model))
    }

    pub fn reparametrized_denoiser(&self, x0_model: &ProductKernel, s: f64, t: f64) -> Result<DenseKernel> {
        Ok(self.reparametrize(x0_model, s, t)?.to_dense())
    }

    /// `R_t(y, x) = Q_t(x, y) q_t(y) / q_t(x)` off the diagonal.
    pub fn reverse_rate(&self, t: f64) -> Result<ReverseRate> {
        let q = self.fwd.joint_rate(t)?;
        let qt = self.marginal(t)?;
        let n = self.space().size();
        let mut matrix = DMatrix::zeros(n, n);
        let mut defined = vec![false; n];
        for x in 0..n {
            let px = qt.prob(x);
            if px <= 0.0 {
                continue;
            }
            defined[x] = true;
            let mut out = 0.0;
            for y in 0..n {
                if y != x && q[(x, y)] != 0.0 {
                    let r = q[(x, y)] * qt.prob(y) / px;
                    matrix[(y, x)] = r;
                    out += r;
                }
            }
            matrix[(x, x)] = -out;
        }
        Ok(ReverseRate { matrix, defined })
    }

    /// Joint law `q_{0,t}(x_0, x_t)` with rows `x_0` and columns `x_t`.
    pub fn joint_pair(&self, t: f64) -> Result<DMatrix<f64>> {
        let k = self.fwd.joint_transition_kernel(0.0, t)?;
        let n = self.space().size();
        Ok(DMatrix::from_fn(n, n, |x0, xt| self.q0.prob(x0) * k.entry(xt, x0)))
    }
}
