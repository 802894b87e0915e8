//! Tabular denoisers: a product teacher and a finite-λ mixture student.
//!
//! Both models parametrize `p_{0|t}` by per-dimension softmax logits at each
//! grid time; `p_{s|t}` is always obtained through
//! [`PosteriorContext::reparametrize`].

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dist::{expand_product, DenseKernel, JointDistribution, ProductKernel, StateSpace};
use crate::error::{Error, Result};
use crate::posterior::PosteriorContext;

/// Floor for logits fitted from probabilities.
pub const FIT_FLOOR: f64 = 1e-30;
const GRID_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

impl TimeGrid {
    /// Strictly increasing times `t_0 < … < t_N` with `t_0 ≥ 0` and `N ≥ 1`.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::arg("a time grid needs at least two points"));
        }
        if !(times[0] >= 0.0) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::arg("grid times must be finite and start at t_0 >= 0"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("grid times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    /// `t_i = i T / N`.
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        Self::offset(0.0, horizon, steps)
    }

    /// `t_i = δ + i (T - δ) / N`.
    pub fn offset(delta: f64, horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("need at least one step"));
        }
        let h = (horizon - delta) / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| delta + i as f64 * h).collect();
        times[steps] = horizon;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.steps()]
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = self.nearest_index(t);
        if (self.times[i] - t).abs() <= GRID_TOL * (1.0 + t.abs()) {
            Ok(i)
        } else {
            Err(Error::arg(format!("time {t} is not on the grid")))
        }
    }

    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, &g) in self.times.iter().enumerate() {
            if (g - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` slightly below 1: return the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `Σ_k w_k Π_d π^{k,d}`: a mixture of product distributions over `S^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductMixture {
    space: StateSpace,
    weights: Vec<f64>,
    /// Layout `[k][d][a]`.
    factors: Vec<f64>,
}

impl ProductMixture {
    pub fn new(space: StateSpace, weights: Vec<f64>, factors: Vec<f64>) -> Result<Self> {
        let block = space.num_dims() * space.states_per_dim();
        if weights.is_empty() || factors.len() != weights.len() * block {
            return Err(Error::arg("mixture factor table does not match the weight count"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::Validation("mixture weights are not a distribution".into()));
        }
        for f in factors.chunks(space.states_per_dim()) {
            let z: f64 = f.iter().sum();
            if f.iter().any(|&v| !(v >= 0.0)) || (z - 1.0).abs() > 1e-10 {
                return Err(Error::Validation("mixture factor is not a distribution".into()));
            }
        }
        Ok(Self {
            space,
            weights,
            factors,
        })
    }

    pub(crate) fn from_raw(space: StateSpace, weights: Vec<f64>, factors: Vec<f64>) -> Self {
        Self {
            space,
            weights,
            factors,
        }
    }

    /// Single-component mixture equal to column `x` of a product kernel.
    pub fn from_product_column(kernel: &ProductKernel, x: usize) -> Self {
        let block = kernel.space().num_dims() * kernel.space().states_per_dim();
        let f = kernel.factors()[x * block..(x + 1) * block].to_vec();
        Self::from_raw(kernel.space(), vec![1.0], f)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self, k: usize, d: usize) -> &[f64] {
        let s = self.space.states_per_dim();
        let off = (k * self.space.num_dims() + d) * s;
        &self.factors[off..off + s]
    }

    /// `Π_d π^{k,d}(y^d)`.
    pub fn component_prob(&self, k: usize, y: usize) -> f64 {
        (0..self.space.num_dims())
            .map(|d| self.factor(k, d)[self.space.coord(y, d)])
            .product()
    }

    pub fn prob(&self, y: usize) -> f64 {
        (0..self.num_components())
            .map(|k| self.weights[k] * self.component_prob(k, y))
            .sum()
    }

    /// `log Σ_k exp(log w_k + Σ_d log π^{k,d}(y^d))`, with probabilities floored at `floor`.
    pub fn log_prob(&self, y: usize, floor: f64) -> f64 {
        let terms: Vec<f64> = (0..self.num_components())
            .map(|k| {
                let mut acc = self.weights[k].max(floor).ln();
                for d in 0..self.space.num_dims() {
                    acc += self.factor(k, d)[self.space.coord(y, d)].max(floor).ln();
                }
                acc
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// `p̄^d = Σ_k w_k π^{k,d}` for each dimension; layout `[d][a]`.
    pub fn marginals(&self) -> Vec<f64> {
        let block = self.space.num_dims() * self.space.states_per_dim();
        let mut out = vec![0.0; block];
        for (k, w) in self.weights.iter().enumerate() {
            for (o, f) in out.iter_mut().zip(&self.factors[k * block..(k + 1) * block]) {
                *o += w * f;
            }
        }
        out
    }

    pub fn to_probs(&self) -> Vec<f64> {
        let n = self.space.size();
        let mut out = vec![0.0; n];
        let mut col = vec![0.0; n];
        let block = self.space.num_dims() * self.space.states_per_dim();
        for (k, &w) in self.weights.iter().enumerate() {
            expand_product(&self.space, &self.factors[k * block..(k + 1) * block], &mut col);
            for (o, c) in out.iter_mut().zip(&col) {
                *o += w * c;
            }
        }
        out
    }

    pub fn to_joint(&self) -> JointDistribution {
        JointDistribution::from_raw(self.space, self.to_probs())
    }

    /// Draws `(k, y)`: the component index and the state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let k = sample_categorical(rng, &self.weights);
        (k, self.sample_component(k, rng))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> usize {
        let mut y = 0;
        for d in 0..self.space.num_dims() {
            y = y * self.space.states_per_dim() + sample_categorical(rng, self.factor(k, d));
        }
        y
    }
}

/// Delta-atom mixture reproducing `p` exactly: one component per support point.
pub fn universal_mixture_from_joint(p: &JointDistribution) -> ProductMixture {
    let space = p.space();
    let (s, dims) = (space.states_per_dim(), space.num_dims());
    let mut weights = Vec::new();
    let mut factors = Vec::new();
    for (z, &w) in p.probs().iter().enumerate().filter(|(_, &w)| w > 0.0) {
        weights.push(w);
        for d in 0..dims {
            let mut f = vec![0.0; s];
            f[space.coord(z, d)] = 1.0;
            factors.extend(f);
        }
    }
    ProductMixture::from_raw(space, weights, factors)
}

/// A kernel whose column `x` is a [`ProductMixture`].
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureKernel {
    space: StateSpace,
    columns: Vec<ProductMixture>,
}

impl MixtureKernel {
    pub fn new(space: StateSpace, columns: Vec<ProductMixture>) -> Result<Self> {
        if columns.len() != space.size() || columns.iter().any(|c| c.space != space) {
            return Err(Error::arg("mixture kernel needs one mixture per state"));
        }
        Ok(Self { space, columns })
    }

    /// `Σ_k w_k · component_k` with global weights.
    pub fn from_components(weights: &[f64], components: &[ProductKernel]) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::arg("no components"))?;
        let space = first.space();
        if weights.len() != components.len() || components.iter().any(|c| c.space() != space) {
            return Err(Error::arg("weights and components disagree"));
        }
        let block = space.num_dims() * space.states_per_dim();
        let columns = (0..space.size())
            .map(|x| {
                let mut f = Vec::with_capacity(block * components.len());
                for c in components {
                    f.extend_from_slice(&c.factors()[x * block..(x + 1) * block]);
                }
                ProductMixture::from_raw(space, weights.to_vec(), f)
            })
            .collect();
        Ok(Self { space, columns })
    }

    pub fn from_product(kernel: &ProductKernel) -> Self {
        Self::from_components(&[1.0], std::slice::from_ref(kernel)).expect("single component")
    }

    /// Per-column delta construction reproducing `kernel` exactly.
    pub fn universal(kernel: &DenseKernel) -> Self {
        let space = kernel.space();
        let columns = (0..space.size())
            .map(|x| universal_mixture_from_joint(&kernel.column_distribution(x)))
            .collect();
        Self { space, columns }
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn column(&self, x: usize) -> &ProductMixture {
        &self.columns[x]
    }

    pub fn columns(&self) -> &[ProductMixture] {
        &self.columns
    }

    pub fn to_dense(&self) -> DenseKernel {
        let n = self.space.size();
        let mut data = Vec::with_capacity(n * n);
        for c in &self.columns {
            data.extend(c.to_probs());
        }
        DenseKernel::from_raw(self.space, nalgebra::DMatrix::from_vec(n, n, data))
    }

    /// Per-column product of the mixture's one-dimensional marginals.
    pub fn marginal_product(&self) -> ProductKernel {
        let mut factors = Vec::new();
        for c in &self.columns {
            factors.extend(c.marginals());
        }
        ProductKernel::from_raw(self.space, factors)
    }
}

/// Anything that yields `p_{s|t}` as a mixture of products.
pub trait Denoiser: Send + Sync {
    fn space(&self) -> StateSpace;
    fn grid(&self) -> &TimeGrid;
    fn mixture_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<MixtureKernel>;

    /// `p̄_{s|t}`: the marginal-matching product.
    fn marginal_product_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<ProductKernel> {
        Ok(self.mixture_kernel(ctx, s, t)?.marginal_product())
    }

    fn denoiser_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<DenseKernel> {
        Ok(self.mixture_kernel(ctx, s, t)?.to_dense())
    }
}

fn softmax_table(space: StateSpace, logits: &[f64]) -> ProductKernel {
    let s = space.states_per_dim();
    let mut factors = vec![0.0; logits.len()];
    for (l, f) in logits.chunks(s).zip(factors.chunks_mut(s)) {
        softmax_into(l, f);
    }
    ProductKernel::from_raw(space, factors)
}

fn check_s(s: f64, t: f64) -> Result<()> {
    if !(s < t) {
        return Err(Error::arg(format!("need s < t, got s={s}, t={t}")));
    }
    Ok(())
}

/// Analytical product model: the true posterior marginals `q^d_{s|t}` in every column.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticalDenoiser {
    space: StateSpace,
    grid: TimeGrid,
}

impl AnalyticalDenoiser {
    pub fn new(space: StateSpace, grid: TimeGrid) -> Self {
        Self { space, grid }
    }
}

impl Denoiser for AnalyticalDenoiser {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn mixture_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<MixtureKernel> {
        check_s(s, t)?;
        Ok(MixtureKernel::from_product(&ctx.posterior_marginals(s, t)?))
    }
}

/// Exact posterior `q_{s|t}` as a per-column universal mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactPosteriorDenoiser {
    space: StateSpace,
    grid: TimeGrid,
}

impl ExactPosteriorDenoiser {
    pub fn new(space: StateSpace, grid: TimeGrid) -> Self {
        Self { space, grid }
    }
}

impl Denoiser for ExactPosteriorDenoiser {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn mixture_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<MixtureKernel> {
        check_s(s, t)?;
        Ok(MixtureKernel::universal(&ctx.true_posterior_kernel(s, t)?))
    }

    fn denoiser_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<DenseKernel> {
        check_s(s, t)?;
        ctx.true_posterior_kernel(s, t)
    }
}

/// Product teacher: logits laid out `[g-1][x][d][a]` for grid times `g = 1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularProductDenoiser {
    space: StateSpace,
    grid: TimeGrid,
    logits: Vec<f64>,
}

impl TabularProductDenoiser {
    pub fn block_len(space: StateSpace) -> usize {
        space.size() * space.num_dims() * space.states_per_dim()
    }

    pub fn new(space: StateSpace, grid: TimeGrid, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != grid.steps() * Self::block_len(space) {
            return Err(Error::arg("logit table has the wrong length"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Validation("logits must be finite".into()));
        }
        Ok(Self { space, grid, logits })
    }

    pub fn uniform(space: StateSpace, grid: TimeGrid) -> Self {
        let len = grid.steps() * Self::block_len(space);
        Self {
            space,
            grid,
            logits: vec![0.0; len],
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn slot(&self, t: f64) -> Result<usize> {
        match self.grid.index_of(t)? {
            0 => Err(Error::arg("the model is not defined at the first grid time")),
            g => Ok(g - 1),
        }
    }

    /// `p^d_{0|t}(·|x)` for all `x`, `d`.
    pub fn x0_table(&self, t: f64) -> Result<ProductKernel> {
        let b = Self::block_len(self.space);
        let g = self.slot(t)?;
        Ok(softmax_table(self.space, &self.logits[g * b..(g + 1) * b]))
    }

    pub fn product_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<ProductKernel> {
        check_s(s, t)?;
        ctx.reparametrize(&self.x0_table(t)?, s, t)
    }
}

impl Denoiser for TabularProductDenoiser {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn mixture_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<MixtureKernel> {
        Ok(MixtureKernel::from_product(&self.product_kernel(ctx, s, t)?))
    }
}

/// Product model whose `p_{0|t}` equals the true posterior marginals on the support of `q_t`.
pub fn fit_product_to_oracle(ctx: &PosteriorContext, grid: &TimeGrid) -> Result<TabularProductDenoiser> {
    let space = ctx.space();
    let b = TabularProductDenoiser::block_len(space);
    let per_state = space.num_dims() * space.states_per_dim();
    let mut logits = vec![0.0; grid.steps() * b];
    for (g, &t) in grid.times().iter().enumerate().skip(1) {
        let table = ctx.posterior_marginals(0.0, t)?;
        let support = ctx.support(t)?;
        let block = &mut logits[(g - 1) * b..g * b];
        for x in (0..space.size()).filter(|&x| support[x]) {
            for (l, &p) in block[x * per_state..(x + 1) * per_state]
                .iter_mut()
                .zip(&table.factors()[x * per_state..(x + 1) * per_state])
            {
                *l = p.max(FIT_FLOOR).ln();
            }
        }
    }
    TabularProductDenoiser::new(space, grid.clone(), logits)
}

/// λ-mixture student: `K` product components with softmax weights.
///
/// Component logits are laid out `[k][g-1][x][d][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMixtureDenoiser {
    space: StateSpace,
    grid: TimeGrid,
    components: usize,
    weight_logits: Vec<f64>,
    frozen_weights: bool,
    logits: Vec<f64>,
}

impl TabularMixtureDenoiser {
    pub fn new(
        space: StateSpace,
        grid: TimeGrid,
        weight_logits: Vec<f64>,
        frozen_weights: bool,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let k = weight_logits.len();
        if k == 0 {
            return Err(Error::arg("need at least one component"));
        }
        if logits.len() != k * grid.steps() * TabularProductDenoiser::block_len(space) {
            return Err(Error::arg("logit table has the wrong length"));
        }
        if logits.iter().chain(&weight_logits).any(|l| !l.is_finite()) {
            return Err(Error::Validation("logits must be finite".into()));
        }
        Ok(Self {
            space,
            grid,
            components: k,
            weight_logits,
            frozen_weights,
            logits,
        })
    }

    /// `K` copies of the teacher, with `N(0, noise²)` logit noise on components `2..K`.
    pub fn from_teacher<R: Rng + ?Sized>(
        teacher: &TabularProductDenoiser,
        components: usize,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::arg("need at least one component"));
        }
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::arg(e.to_string()))?;
        let mut logits = Vec::with_capacity(components * teacher.logits.len());
        for k in 0..components {
            logits.extend(teacher.logits.iter().map(|&l| {
                if k > 0 && noise > 0.0 {
                    l + normal.sample(rng)
                } else {
                    l
                }
            }));
        }
        Self::new(teacher.space, teacher.grid.clone(), vec![0.0; components], true, logits)
    }

    /// Copy of a mixture with independent logit noise on components `2..K`.
    pub fn perturbed<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> Result<Self> {
        let mut out = self.clone();
        if noise > 0.0 {
            let normal = Normal::new(0.0, noise).map_err(|e| Error::arg(e.to_string()))?;
            let per = self.component_len();
            for l in out.logits[per..].iter_mut() {
                *l += normal.sample(rng);
            }
        }
        Ok(out)
    }

    pub fn num_components(&self) -> usize {
        self.components
    }

    pub fn frozen_weights(&self) -> bool {
        self.frozen_weights
    }

    pub fn set_frozen_weights(&mut self, frozen: bool) {
        self.frozen_weights = frozen;
    }

    pub fn weight_logits(&self) -> &[f64] {
        &self.weight_logits
    }

    pub fn weight_logits_mut(&mut self) -> &mut [f64] {
        &mut self.weight_logits
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn component_len(&self) -> usize {
        self.grid.steps() * TabularProductDenoiser::block_len(self.space)
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.components];
        softmax_into(&self.weight_logits, &mut w);
        w
    }

    /// Offset into [`Self::logits`] of the block for `(k, t)`.
    pub fn block_offset(&self, k: usize, t: f64) -> Result<usize> {
        let g = match self.grid.index_of(t)? {
            0 => return Err(Error::arg("the model is not defined at the first grid time")),
            g => g - 1,
        };
        Ok(k * self.component_len() + g * TabularProductDenoiser::block_len(self.space))
    }

    pub fn component_x0(&self, k: usize, t: f64) -> Result<ProductKernel> {
        let off = self.block_offset(k, t)?;
        let b = TabularProductDenoiser::block_len(self.space);
        Ok(softmax_table(self.space, &self.logits[off..off + b]))
    }

    /// Reparametrized component kernels `p_{s|t}(·|·; λ_k)`.
    pub fn component_kernels(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<Vec<ProductKernel>> {
        check_s(s, t)?;
        let bridges = ctx.bridges(s, t)?;
        (0..self.components)
            .map(|k| Ok(bridges.apply(&self.component_x0(k, t)?)))
            .collect()
    }

    /// Component `k` as a standalone product model.
    pub fn component(&self, k: usize) -> TabularProductDenoiser {
        let per = self.component_len();
        TabularProductDenoiser {
            space: self.space,
            grid: self.grid.clone(),
            logits: self.logits[k * per..(k + 1) * per].to_vec(),
        }
    }
}

impl Denoiser for TabularMixtureDenoiser {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn mixture_kernel(&self, ctx: &PosteriorContext, s: f64, t: f64) -> Result<MixtureKernel> {
        MixtureKernel::from_components(&self.weights(), &self.component_kernels(ctx, s, t)?)
    }
}

/// Serialized model: either a product teacher or a mixture student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Checkpoint {
    Product(TabularProductDenoiser),
    Mixture(TabularMixtureDenoiser),
}

const MAGIC: &[u8; 4] = b"DI4C";
const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    /// Little-endian binary encoding; floats round-trip bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let (kind, space, grid, wl, frozen, logits): (u8, _, _, &[f64], bool, &[f64]) = match self {
            Checkpoint::Product(p) => (0, p.space, &p.grid, &[0.0], true, &p.logits),
            Checkpoint::Mixture(m) => (1, m.space, &m.grid, &m.weight_logits, m.frozen_weights, &m.logits),
        };
        out.push(kind);
        out.extend_from_slice(&(space.states_per_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(space.num_dims() as u32).to_le_bytes());
        out.extend_from_slice(&(grid.times.len() as u32).to_le_bytes());
        for t in &grid.times {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(wl.len() as u32).to_le_bytes());
        out.push(frozen as u8);
        for w in wl {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(logits.len() as u64).to_le_bytes());
        for l in logits {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = r.u8()?;
        let space = StateSpace::new(r.u32()? as usize, r.u32()? as usize)?;
        let n_times = r.u32()? as usize;
        let grid = TimeGrid::new((0..n_times).map(|_| r.f64()).collect::<Result<_>>()?)?;
        let k = r.u32()? as usize;
        let frozen = r.u8()? != 0;
        let wl = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let len = r.u64()? as usize;
        if len > bytes.len() / 8 {
            return Err(Error::Format("logit count exceeds file size".into()));
        }
        let logits = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        match kind {
            0 => Ok(Checkpoint::Product(TabularProductDenoiser::new(space, grid, logits)?)),
            1 => Ok(Checkpoint::Mixture(TabularMixtureDenoiser::new(space, grid, wl, frozen, logits)?)),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and re-validates a JSON checkpoint.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Checkpoint = serde_json::from_str(text)?;
        match raw {
            Checkpoint::Product(p) => Ok(Checkpoint::Product(TabularProductDenoiser::new(p.space, p.grid, p.logits)?)),
            Checkpoint::Mixture(m) => Ok(Checkpoint::Mixture(TabularMixtureDenoiser::new(
                m.space,
                m.grid,
                m.weight_logits,
                m.frozen_weights,
                m.logits,
            )?)),
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
