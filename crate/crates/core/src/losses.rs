//! Distillation, consistency and auxiliary losses.
//!
//! Exact evaluators work on dense kernels and return `+∞` on support
//! violations. Estimators work on [`MixtureKernel`]s and take an explicit RNG.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoisers::{log_sum_exp, sample_categorical, MixtureKernel, ProductMixture};
use crate::dist::{compose, cross_entropy_probs, kl_probs, DenseKernel, JointDistribution, ProductKernel};
use crate::error::{Error, Result};

/// Probability clamp inside logarithms during estimation and training.
pub const TRAIN_FLOOR: f64 = 1e-30;

fn check_kernels(kernels: &[&DenseKernel], r: &JointDistribution) -> Result<()> {
    for k in kernels {
        k.space().check_same(&r.space())?;
    }
    Ok(())
}

/// `E_{x~r} KL(teacher(·|x) ‖ student(·|x))`.
pub fn distil_exact(student: &DenseKernel, teacher: &DenseKernel, r: &JointDistribution) -> Result<f64> {
    check_kernels(&[student, teacher], r)?;
    Ok(expect_columns(r, |x| kl_probs(teacher.column(x), student.column(x))))
}

/// `E_{x~r} E_λ Σ_d KL(teacher^d(·|x) ‖ student^d(·|x; λ))` for a product teacher.
pub fn distil_surrogate(student: &MixtureKernel, teacher: &ProductKernel, r: &JointDistribution) -> Result<f64> {
    student.space().check_same(&r.space())?;
    teacher.space().check_same(&r.space())?;
    let dims = r.space().num_dims();
    Ok(expect_columns(r, |x| {
        let col = student.column(x);
        (0..col.num_components())
            .map(|k| {
                let per_dim: f64 = (0..dims).map(|d| kl_probs(teacher.factor(x, d), col.factor(k, d))).sum();
                col.weights()[k] * per_dim
            })
            .sum()
    }))
}

/// `E_{x~r} KL(student_{s|u} ∘ teacher_{u|t}(·|x) ‖ student_{s|t}(·|x))`.
pub fn consis_exact(
    student_su: &DenseKernel,
    teacher_ut: &DenseKernel,
    student_st: &DenseKernel,
    r: &JointDistribution,
) -> Result<f64> {
    check_kernels(&[student_su, teacher_ut, student_st], r)?;
    let target = compose(student_su, teacher_ut)?;
    Ok(expect_columns(r, |x| kl_probs(target.column(x), student_st.column(x))))
}

/// Cross-entropy form `E_{x~r} H(student_{s|u} ∘ teacher_{u|t}(·|x), student_{s|t}(·|x))`.
pub fn consis_cross_entropy(
    student_su: &DenseKernel,
    teacher_ut: &DenseKernel,
    student_st: &DenseKernel,
    r: &JointDistribution,
) -> Result<f64> {
    check_kernels(&[student_su, teacher_ut, student_st], r)?;
    let target = compose(student_su, teacher_ut)?;
    Ok(expect_columns(r, |x| cross_entropy_probs(target.column(x), student_st.column(x))))
}

/// `E_{(x_0, x_t) ~ J} [-log student(x_0 | x_t)]`; `joint[(x_0, x_t)]`.
pub fn data_exact(student_0t: &DenseKernel, joint: &DMatrix<f64>) -> Result<f64> {
    check_joint(student_0t, joint)?;
    let mut acc = 0.0;
    for xt in 0..joint.ncols() {
        for x0 in 0..joint.nrows() {
            let j = joint[(x0, xt)];
            if j > 0.0 {
                let p = student_0t.entry(x0, xt);
                if p <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                acc -= j * p.ln();
            }
        }
    }
    Ok(acc)
}

/// `E_{x~r} Σ_d KL(teacher^d(·|x) ‖ student^d(·|x))` on one-dimensional marginals.
pub fn marginal_exact(student_marginals: &ProductKernel, teacher_marginals: &ProductKernel, r: &JointDistribution) -> Result<f64> {
    student_marginals.space().check_same(&r.space())?;
    teacher_marginals.space().check_same(&r.space())?;
    let dims = r.space().num_dims();
    Ok(expect_columns(r, |x| {
        (0..dims)
            .map(|d| kl_probs(teacher_marginals.factor(x, d), student_marginals.factor(x, d)))
            .sum()
    }))
}

/// `E_{(x_0, x_t) ~ J} [-log p(x_0|x_t) + log p̄(x_0|x_t)]`.
pub fn corr_exact(student_0t: &DenseKernel, marginal_product: &DenseKernel, joint: &DMatrix<f64>) -> Result<f64> {
    check_joint(student_0t, joint)?;
    let mut acc = 0.0;
    for xt in 0..joint.ncols() {
        for x0 in 0..joint.nrows() {
            let j = joint[(x0, xt)];
            if j > 0.0 {
                let (p, pbar) = (student_0t.entry(x0, xt), marginal_product.entry(x0, xt));
                if p <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                acc += j * (pbar.ln() - p.ln());
            }
        }
    }
    Ok(acc)
}

fn check_joint(k: &DenseKernel, joint: &DMatrix<f64>) -> Result<()> {
    let n = k.space().size();
    if joint.nrows() != n || joint.ncols() != n {
        return Err(Error::arg("joint table does not match the kernel"));
    }
    Ok(())
}

/// `Σ_x r(x) f(x)` over the support of `r`; `+∞` propagates.
fn expect_columns(r: &JointDistribution, mut f: impl FnMut(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for (x, &w) in r.probs().iter().enumerate() {
        if w > 0.0 {
            let v = f(x);
            if v == f64::INFINITY {
                return v;
            }
            acc += w * v;
        }
    }
    acc
}

/// Monte Carlo estimate with its sampling statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Variance of `value` (per-sample variance divided by the sample count).
    pub variance: f64,
    pub sample_variance: f64,
    pub samples: usize,
}

impl Estimate {
    fn from_samples(values: &[f64]) -> Self {
        let m = values.len();
        let mean = values.iter().sum::<f64>() / m as f64;
        let sample_variance = if m > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
        } else {
            0.0
        };
        Self {
            value: mean,
            variance: sample_variance / m as f64,
            sample_variance,
            samples: m,
        }
    }

    fn exact(value: f64, samples: usize) -> Self {
        Self {
            value,
            variance: 0.0,
            sample_variance: 0.0,
            samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Number `M` of sampled `x_s` (and `x_t`) per estimate.
    pub samples: usize,
    /// `N_λ` when the λ-average inside the log is subsampled; `None` enumerates all components.
    pub lambda_samples: Option<usize>,
    /// Enumerate every `x_t`, `x_u`, `λ`, `x_s` with exact weights instead of sampling.
    pub exhaustive: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            lambda_samples: None,
            exhaustive: false,
        }
    }
}

impl EstimatorConfig {
    fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.lambda_samples == Some(0) {
            return Err(Error::arg("sample counts must be >= 1"));
        }
        Ok(())
    }
}

/// Inputs of a consistency estimate: `q = student_su ∘ teacher_ut` against `student_st`.
#[derive(Clone, Copy)]
pub struct ConsistencyTerms<'a> {
    pub student_su: &'a MixtureKernel,
    pub teacher_ut: &'a MixtureKernel,
    pub student_st: &'a MixtureKernel,
    pub reference: &'a JointDistribution,
}

impl ConsistencyTerms<'_> {
    fn check(&self) -> Result<()> {
        let space = self.reference.space();
        for k in [self.student_su, self.teacher_ut, self.student_st] {
            k.space().check_same(&space)?;
        }
        Ok(())
    }

    /// Exact target `E_{x_t~r} H(q(·|x_t), student_st(·|x_t))`.
    pub fn exact_cross_entropy(&self) -> Result<f64> {
        consis_cross_entropy(
            &self.student_su.to_dense(),
            &self.teacher_ut.to_dense(),
            &self.student_st.to_dense(),
            self.reference,
        )
    }
}

/// `log p(y)` by log-sum-exp over components, or over `n` components drawn by weight.
fn mixture_log_prob<R: Rng + ?Sized>(mix: &ProductMixture, y: usize, lambda_samples: Option<usize>, rng: &mut R) -> f64 {
    match lambda_samples {
        None => mix.log_prob(y, TRAIN_FLOOR),
        Some(n) => {
            let space = mix.space();
            let terms: Vec<f64> = (0..n)
                .map(|_| {
                    let k = sample_categorical(rng, mix.weights());
                    (0..space.num_dims())
                        .map(|d| mix.factor(k, d)[space.coord(y, d)].max(TRAIN_FLOOR).ln())
                        .sum()
                })
                .collect();
            log_sum_exp(&terms) - (n as f64).ln()
        }
    }
}

/// `log Π_d p̄^d(y^d)` from a `[d][a]` marginal block.
fn product_log_prob(marginals: &[f64], states: usize, space: &crate::dist::StateSpace, y: usize) -> f64 {
    (0..space.num_dims())
        .map(|d| marginals[d * states + space.coord(y, d)].max(TRAIN_FLOOR).ln())
        .sum()
}

/// Visits `(weight, x_t, x_u, k)` for every η, either enumerated or sampled.
fn for_each_eta<R: Rng + ?Sized>(
    terms: &ConsistencyTerms<'_>,
    cfg: &EstimatorConfig,
    rng: &mut R,
    mut visit: impl FnMut(f64, usize, usize, usize, &mut R),
) {
    if cfg.exhaustive {
        for (xt, &r) in terms.reference.probs().iter().enumerate().filter(|(_, &r)| r > 0.0) {
            let teacher = terms.teacher_ut.column(xt).to_probs();
            for (xu, &pu) in teacher.iter().enumerate().filter(|(_, &p)| p > 0.0) {
                let col = terms.student_su.column(xu);
                for (k, &w) in col.weights().iter().enumerate().filter(|(_, &w)| w > 0.0) {
                    visit(r * pu * w, xt, xu, k, rng);
                }
            }
        }
    } else {
        for _ in 0..cfg.samples {
            let xt = sample_categorical(rng, terms.reference.probs());
            let (_, xu) = terms.teacher_ut.column(xt).sample(rng);
            let k = sample_categorical(rng, terms.student_su.column(xu).weights());
            visit(1.0, xt, xu, k, rng);
        }
    }
}

/// Naive two-fold Monte Carlo estimate of the consistency cross entropy.
pub fn consis_loss_mc<R: Rng + ?Sized>(terms: &ConsistencyTerms<'_>, cfg: &EstimatorConfig, rng: &mut R) -> Result<Estimate> {
    terms.check()?;
    cfg.validate()?;
    let space = terms.reference.space();
    let n = space.size();
    let mut values = Vec::with_capacity(cfg.samples);
    let mut total = 0.0;
    let mut count = 0;
    for_each_eta(terms, cfg, rng, |weight, xt, xu, k, rng| {
        let q_eta = terms.student_su.column(xu);
        let target = terms.student_st.column(xt);
        if cfg.exhaustive {
            for xs in 0..n {
                let q = q_eta.component_prob(k, xs);
                if q > 0.0 {
                    total -= weight * q * target.log_prob(xs, TRAIN_FLOOR);
                }
            }
            count += 1;
        } else {
            let xs = q_eta.sample_component(k, rng);
            values.push(-mixture_log_prob(target, xs, cfg.lambda_samples, rng));
        }
    });
    Ok(if cfg.exhaustive {
        Estimate::exact(total, count)
    } else {
        Estimate::from_samples(&values)
    })
}

/// Control-variate estimate: `E_{x_s~q}[-log p + log p̄] + E_η[Σ_d H(q^{η,d}, p̄^d)]`.
pub fn consis_loss_cv<R: Rng + ?Sized>(terms: &ConsistencyTerms<'_>, cfg: &EstimatorConfig, rng: &mut R) -> Result<Estimate> {
    terms.check()?;
    cfg.validate()?;
    let space = terms.reference.space();
    let (n, states, dims) = (space.size(), space.states_per_dim(), space.num_dims());
    let marginals: Vec<Vec<f64>> = terms.student_st.columns().iter().map(|c| c.marginals()).collect();
    let mut values = Vec::with_capacity(cfg.samples);
    let mut total = 0.0;
    let mut count = 0;
    for_each_eta(terms, cfg, rng, |weight, xt, xu, k, rng| {
        let q_eta = terms.student_su.column(xu);
        let target = terms.student_st.column(xt);
        let pbar = &marginals[xt];
        // Dimension-wise cross entropy against the marginal product.
        let mut h_dims = 0.0;
        for d in 0..dims {
            let qd = q_eta.factor(k, d);
            for a in 0..states {
                if qd[a] > 0.0 {
                    h_dims -= qd[a] * pbar[d * states + a].max(TRAIN_FLOOR).ln();
                }
            }
        }
        if cfg.exhaustive {
            let mut corr = 0.0;
            for xs in 0..n {
                let q = q_eta.component_prob(k, xs);
                if q > 0.0 {
                    corr += q * (product_log_prob(pbar, states, &space, xs) - target.log_prob(xs, TRAIN_FLOOR));
                }
            }
            total += weight * (corr + h_dims);
            count += 1;
        } else {
            let xs = q_eta.sample_component(k, rng);
            let corr = product_log_prob(pbar, states, &space, xs) - mixture_log_prob(target, xs, cfg.lambda_samples, rng);
            values.push(corr + h_dims);
        }
    });
    Ok(if cfg.exhaustive {
        Estimate::exact(total, count)
    } else {
        Estimate::from_samples(&values)
    })
}

/// Monte Carlo datapoint loss: `x_0 ~ q_0`, `x_t ~ q_{t|0}(·|x_0)`, score `-log p(x_0|x_t)`.
pub fn data_loss_mc<R: Rng + ?Sized>(
    student_0t: &MixtureKernel,
    q0: &JointDistribution,
    forward_t0: &DenseKernel,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<Estimate> {
    cfg.validate()?;
    student_0t.space().check_same(&q0.space())?;
    forward_t0.space().check_same(&q0.space())?;
    if cfg.exhaustive {
        let n = q0.space().size();
        let joint = DMatrix::from_fn(n, n, |x0, xt| q0.prob(x0) * forward_t0.entry(xt, x0));
        return Ok(Estimate::exact(data_exact(&student_0t.to_dense(), &joint)?, n * n));
    }
    let values: Vec<f64> = (0..cfg.samples)
        .map(|_| {
            let x0 = sample_categorical(rng, q0.probs());
            let xt = sample_categorical(rng, forward_t0.column(x0));
            -mixture_log_prob(student_0t.column(xt), x0, cfg.lambda_samples, rng)
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Weight `α_t` on the correlation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AlphaSchedule {
    Zero,
    One,
    /// `α_t = t / T`.
    Linear,
    /// `g(t) = 1 / (1 + exp(10 - 20 t / T))`.
    Sigmoid,
    Scaled { scale: f64, of: Box<AlphaSchedule> },
}

impl AlphaSchedule {
    pub fn at(&self, t: f64, horizon: f64) -> f64 {
        let u = t / horizon;
        match self {
            AlphaSchedule::Zero => 0.0,
            AlphaSchedule::One => 1.0,
            AlphaSchedule::Linear => u.clamp(0.0, 1.0),
            AlphaSchedule::Sigmoid => 1.0 / (1.0 + (10.0 - 20.0 * u).exp()),
            AlphaSchedule::Scaled { scale, of } => scale * of.at(t, horizon),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AlphaSchedule::Scaled { scale, of } if (0.0..=1.0).contains(scale) => of.validate(),
            AlphaSchedule::Scaled { .. } => Err(Error::arg("alpha scale must lie in [0, 1]")),
            _ => Ok(()),
        }
    }
}

/// Gap `Δt` between `u` and `t` in the consistency loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum GapSchedule {
    Fixed { value: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl GapSchedule {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GapSchedule::Fixed { value } => value,
            GapSchedule::LogUniform { lo, hi } => (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp(),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        let ok = match *self {
            GapSchedule::Fixed { value } => value > 0.0 && value < horizon,
            GapSchedule::LogUniform { lo, hi } => 0.0 < lo && lo < hi && hi < horizon,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid consistency gap {self:?}")))
        }
    }
}

/// Distribution `r_t` under which losses are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// `r_t = q_t` from the data through the forward process.
    DataForward,
    /// `r_{t_n}` obtained by pushing `q_T` through the teacher along the grid.
    TeacherRollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub delta: f64,
    pub gap: GapSchedule,
    pub alpha: AlphaSchedule,
    pub reference: ReferenceSource,
    pub estimator: EstimatorConfig,
    pub use_control_variates: bool,
    pub stop_gradient: bool,
    /// Indicator-gated objective: distillation below `Δt`, consistency above.
    pub gated: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            gap: GapSchedule::LogUniform { lo: 0.001, hi: 0.01 },
            alpha: AlphaSchedule::Sigmoid,
            reference: ReferenceSource::DataForward,
            estimator: EstimatorConfig::default(),
            use_control_variates: true,
            stop_gradient: true,
            gated: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < horizon) {
            return Err(Error::arg("need 0 < delta < T"));
        }
        self.gap.validate(horizon)?;
        self.alpha.validate()?;
        self.estimator.validate()
    }
}

/// One row of a loss report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub name: String,
    pub exact: Option<f64>,
    pub estimate: Option<f64>,
    pub variance: Option<f64>,
    pub samples: Option<usize>,
    pub lambda_samples: Option<usize>,
    pub seed: Option<u64>,
}

impl LossRow {
    pub fn exact(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            exact: Some(value),
            estimate: None,
            variance: None,
            samples: None,
            lambda_samples: None,
            seed: None,
        }
    }

    pub fn estimated(name: &str, exact: Option<f64>, est: &Estimate, cfg: &EstimatorConfig, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            exact,
            estimate: Some(est.value),
            variance: Some(est.variance),
            samples: Some(est.samples),
            lambda_samples: cfg.lambda_samples,
            seed: Some(seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
}

impl LossReport {
    pub fn push(&mut self, row: LossRow) {
        self.rows.push(row);
    }

    pub fn get(&self, name: &str) -> Option<&LossRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// CSV with header `name,exact,estimate,variance,M,N_lambda,seed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "exact", "estimate", "variance", "M", "N_lambda", "seed"])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                f(r.exact),
                f(r.estimate),
                f(r.variance),
                u(r.samples),
                u(r.lambda_samples),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
