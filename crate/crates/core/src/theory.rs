//! Numeric verification harness: convergence of analytical sampling, the
//! two-bit lower-bound example, the student/teacher TV bound and the
//! divergence inequalities.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{softmax_into, AnalyticalDenoiser, Denoiser, MixtureKernel, TimeGrid};
use crate::dist::{compose, kl_probs, push, tv_distance, tv_probs, DenseKernel, JointDistribution, ProductKernel, StateSpace};
use crate::error::{Error, Result};
use crate::forward::{DimGenerator, FactorizedForward};
use crate::losses::{consis_exact, consis_loss_cv, consis_loss_mc, distil_exact, distil_surrogate, ConsistencyTerms, EstimatorConfig};
use crate::posterior::PosteriorContext;
use crate::samplers::ancestral_law;

/// TV of `N`-step analytical sampling on `t_i = δ + i(T−δ)/N` against `q_δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub tv: f64,
    pub n_times_tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub delta: f64,
    pub horizon: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log TV` against `log N` over the largest half of `N`;
    /// `None` when a fitted TV is zero.
    pub slope: Option<f64>,
}

impl ConvergenceReport {
    /// CSV with header `N,tv,n_times_tv`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "tv", "n_times_tv"])?;
        for r in &self.rows {
            w.write_record([r.steps.to_string(), format!("{:.16e}", r.tv), format!("{:.16e}", r.n_times_tv)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() || ys.iter().any(|&y| !(y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Exact TV between `q_δ` and `N`-step analytical sampling from `q_T`, for each `N`.
pub fn convergence_study(ctx: &PosteriorContext, delta: f64, steps: &[usize]) -> Result<ConvergenceReport> {
    let horizon = ctx.forward().horizon();
    if !(0.0..horizon).contains(&delta) {
        return Err(Error::arg("need 0 <= delta < T"));
    }
    if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) || steps[0] == 0 {
        return Err(Error::arg("step counts must be positive and strictly increasing"));
    }
    let prior = ctx.marginal(horizon)?;
    let target = ctx.marginal(delta)?;
    let rows = steps
        .par_iter()
        .map(|&n| {
            let grid = TimeGrid::offset(delta, horizon, n)?;
            let model = AnalyticalDenoiser::new(ctx.space(), grid.clone());
            let law = ancestral_law(&model, ctx, grid.times(), &prior)?;
            let tv = tv_distance(&law, &target)?;
            Ok(ConvergenceRow {
                steps: n,
                tv,
                n_times_tv: n as f64 * tv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let half = rows.len() / 2;
    let fit = &rows[half..];
    let slope = log_log_slope(
        &fit.iter().map(|r| r.steps as f64).collect::<Vec<_>>(),
        &fit.iter().map(|r| r.tv).collect::<Vec<_>>(),
    );
    Ok(ConvergenceReport {
        delta,
        horizon,
        rows,
        slope,
    })
}

/// Two bits `{a, b}²` with uniform unit-rate flips and data `½δ_aa + ½δ_bb`.
///
/// States are coded `a = 0`, `b = 1`, so `aa = 0`, `ab = 1`, `bb = 3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformExample {
    pub delta: f64,
    pub horizon: f64,
}

fn e(x: f64) -> f64 {
    (-x).exp()
}

impl UniformExample {
    pub fn new(delta: f64, horizon: f64) -> Result<Self> {
        if !(delta > 0.0 && horizon > delta) {
            return Err(Error::arg("need 0 < delta < T"));
        }
        Ok(Self { delta, horizon })
    }

    /// Same engine instance: uniform forward on `{0,1}²` with the two-point data.
    pub fn context(&self) -> Result<PosteriorContext> {
        let space = StateSpace::new(2, 2)?;
        let fwd = FactorizedForward::shared(space, DimGenerator::UniformClosedForm, self.horizon)?;
        let q0 = JointDistribution::new(space, vec![0.5, 0.0, 0.0, 0.5])?;
        PosteriorContext::new(fwd, q0)
    }

    /// `c = (2^{1/δ} e)^{−2T} (T − δ)²`.
    pub fn constant(&self) -> f64 {
        (2f64.powf(1.0 / self.delta) * std::f64::consts::E).powf(-2.0 * self.horizon) * (self.horizon - self.delta).powi(2)
    }

    /// Smallest `N` allowed by the lower-bound hypothesis `N ≥ 2(T−δ)/δ`.
    pub fn min_steps(&self) -> usize {
        (2.0 * (self.horizon - self.delta) / self.delta - 1e-9).ceil() as usize
    }

    /// `q^d_{t|s}(a|a)`.
    pub fn stay(s: f64, t: f64) -> f64 {
        0.5 * (1.0 + e(t - s))
    }

    /// `q^d_{t|s}(b|a)`.
    pub fn flip(s: f64, t: f64) -> f64 {
        0.5 * (1.0 - e(t - s))
    }

    pub fn q_t_aa(t: f64) -> f64 {
        0.25 * (1.0 + e(2.0 * t))
    }

    pub fn q_st_aa_aa(s: f64, t: f64) -> f64 {
        (1.0 + e(2.0 * s)) * (1.0 + e(t - s)).powi(2) / (4.0 * (1.0 + e(2.0 * t)))
    }

    pub fn q_st_bb_aa(s: f64, t: f64) -> f64 {
        (1.0 + e(2.0 * s)) * (1.0 - e(t - s)).powi(2) / (4.0 * (1.0 + e(2.0 * t)))
    }

    pub fn q_st_ab_aa(s: f64, t: f64) -> f64 {
        0.25 - (e(2.0 * s) + e(2.0 * (t - s))) / (4.0 * (1.0 + e(2.0 * t)))
    }

    pub fn q_st_aa_ab(s: f64, t: f64) -> f64 {
        0.25 + (e(2.0 * s) - e(2.0 * (t - s))) / (4.0 * (1.0 - e(2.0 * t)))
    }

    pub fn p_st_aa_aa(s: f64, t: f64) -> f64 {
        ((1.0 + e(t + s)) * (1.0 + e(t - s)) / (2.0 * (1.0 + e(2.0 * t)))).powi(2)
    }

    pub fn p_st_bb_aa(s: f64, t: f64) -> f64 {
        ((1.0 - e(t + s)) * (1.0 - e(t - s)) / (2.0 * (1.0 + e(2.0 * t)))).powi(2)
    }

    pub fn p_st_aa_plus_bb_aa(s: f64, t: f64) -> f64 {
        0.5 + (e(t + s) + e(t - s)).powi(2) / (2.0 * (1.0 + e(2.0 * t)).powi(2))
    }

    pub fn p_st_aa_ab(s: f64, t: f64) -> f64 {
        0.25 - ((e(t - s) - e(t + s)) / (2.0 * (1.0 - e(2.0 * t)))).powi(2)
    }

    /// `p^ε_{t−ε}(aa)` from `p^ε_t(aa)`.
    pub fn p_step(t: f64, eps: f64, p: f64) -> f64 {
        let (a, b) = (e(eps), e(2.0 * t - eps));
        let (plus, minus) = (1.0 + e(2.0 * t), 1.0 - e(2.0 * t));
        0.25 - (a - b).powi(2) / (4.0 * minus * minus)
            + ((a + b).powi(2) / (2.0 * plus * plus) + (a - b).powi(2) / (2.0 * minus * minus)) * p
    }

    /// `q_{t−ε}(aa)` from `q_t(aa)`.
    pub fn q_step(t: f64, eps: f64, q: f64) -> f64 {
        let (a, b) = (e(2.0 * eps), e(2.0 * (t - eps)));
        let (plus, minus) = (1.0 + e(2.0 * t), 1.0 - e(2.0 * t));
        0.25 - (a - b) / (4.0 * minus) + ((a + b) / (2.0 * plus) + (a - b) / (2.0 * minus)) * q
    }

    /// `Δ_{t−ε}` from `Δ_t` and `p^ε_t(aa)`.
    pub fn delta_step(t: f64, eps: f64, p: f64, delta: f64) -> f64 {
        let (plus, minus) = (1.0 + e(2.0 * t), 1.0 - e(2.0 * t));
        let sh = (eps.exp() - e(eps)).powi(2);
        let source = (e(2.0 * t) / (2.0 * plus * plus) * p + e(2.0 * t) / (2.0 * minus * minus) * (0.5 - p)) * sh;
        let coeff = 1.0 + (1.0 + e(2.0 * (2.0 * t - eps))) / (1.0 - e(4.0 * t)) * (e(2.0 * eps) - 1.0);
        source + coeff * delta
    }

    /// Iterates the recurrences from `p^ε_T = q_T` with `ε = (T−δ)/N`.
    pub fn delta_trace(&self, steps: usize) -> Result<DeltaTrace> {
        if steps < self.min_steps() {
            return Err(Error::arg(format!("need N >= {} for the lower bound, got {steps}", self.min_steps())));
        }
        let eps = (self.horizon - self.delta) / steps as f64;
        let mut p = Self::q_t_aa(self.horizon);
        let mut q = p;
        let mut delta = 0.0;
        let mut trace = DeltaTrace {
            steps,
            times: vec![self.horizon],
            from_difference: vec![0.0],
            from_recurrence: vec![0.0],
        };
        for n in 0..steps {
            let t = self.horizon - n as f64 * eps;
            delta = Self::delta_step(t, eps, p, delta);
            p = Self::p_step(t, eps, p);
            q = Self::q_step(t, eps, q);
            trace.times.push(t - eps);
            trace.from_difference.push(q - p);
            trace.from_recurrence.push(delta);
        }
        Ok(trace)
    }

    /// `Δ_δ` from the generic engine: `q_δ(aa)` minus the analytical `N`-step law at `aa`.
    pub fn engine_delta(&self, steps: usize) -> Result<f64> {
        let ctx = self.context()?;
        let grid = TimeGrid::offset(self.delta, self.horizon, steps)?;
        let model = AnalyticalDenoiser::new(ctx.space(), grid.clone());
        let law = ancestral_law(&model, &ctx, grid.times(), &*ctx.marginal(self.horizon)?)?;
        Ok(ctx.marginal(self.delta)?.prob(0) - law.prob(0))
    }

    /// Largest deviation between every closed form and the engine over `(s, t)` pairs.
    pub fn two_path_error(&self, pairs: &[(f64, f64)]) -> Result<f64> {
        let ctx = self.context()?;
        let (aa, ab, bb) = (0, 1, 3);
        let mut worst: f64 = 0.0;
        for &(s, t) in pairs {
            let q = ctx.true_posterior_kernel(s, t)?;
            let p = ctx.analytical_denoiser_kernel(s, t)?;
            let f = ctx.forward().transition_matrix(0, s, t)?;
            let qt = ctx.marginal(t)?;
            let checks = [
                (Self::stay(s, t), f[(0, 0)]),
                (Self::flip(s, t), f[(1, 0)]),
                (Self::q_t_aa(t), qt.prob(aa)),
                (Self::q_st_aa_aa(s, t), q.entry(aa, aa)),
                (Self::q_st_bb_aa(s, t), q.entry(bb, aa)),
                (Self::q_st_ab_aa(s, t), q.entry(ab, aa)),
                (Self::q_st_aa_ab(s, t), q.entry(aa, ab)),
                (Self::p_st_aa_aa(s, t), p.entry(aa, aa)),
                (Self::p_st_bb_aa(s, t), p.entry(bb, aa)),
                (Self::p_st_aa_plus_bb_aa(s, t), p.entry(aa, aa) + p.entry(bb, aa)),
                (Self::p_st_aa_ab(s, t), p.entry(aa, ab)),
            ];
            for (closed, engine) in checks {
                worst = worst.max((closed - engine).abs());
            }
        }
        Ok(worst)
    }

    /// `20` deterministic pairs `0 ≤ s < t ≤ T`.
    pub fn default_pairs(&self) -> Vec<(f64, f64)> {
        let ts = [0.15, 0.3, 0.55, 0.8, 1.0];
        let fr = [0.0, 0.25, 0.5, 0.9];
        ts.iter()
            .flat_map(|&t| fr.iter().map(move |&f| (f * t * self.horizon, t * self.horizon)))
            .collect()
    }
}

/// `Δ_t = q_t(aa) − p^ε_t(aa)` along the visited times `T, T−ε, …, δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub steps: usize,
    pub times: Vec<f64>,
    /// Difference of the `q` and `p` recurrences.
    pub from_difference: Vec<f64>,
    /// Direct `Δ` recurrence.
    pub from_recurrence: Vec<f64>,
}

impl DeltaTrace {
    pub fn final_delta(&self) -> f64 {
        *self.from_difference.last().expect("trace starts at T")
    }
}

/// Both sides of the student/teacher TV bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub distil: f64,
    pub consis: Vec<f64>,
}

impl TvBoundReport {
    /// An infinite loss makes the bound vacuous.
    pub fn vacuous(&self) -> bool {
        !self.rhs.is_finite()
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.vacuous() || self.lhs <= self.rhs + slack
    }
}

/// Kernel-level audit: `student_x0[n−1] = p^θ_{0|t_n}` and `teacher_steps[n−1] = p^ψ_{t_{n−1}|t_n}`.
pub fn tv_bound(student_x0: &[DenseKernel], teacher_steps: &[DenseKernel], r_t: &JointDistribution) -> Result<TvBoundReport> {
    let n = teacher_steps.len();
    if n == 0 || student_x0.len() != n {
        return Err(Error::arg("need one student and one teacher kernel per step"));
    }
    // refs[k] = r_{t_k}.
    let mut refs = vec![r_t.clone(); n + 1];
    for k in (0..n).rev() {
        refs[k] = push(&teacher_steps[k], &refs[k + 1])?;
    }
    let lhs = tv_distance(&refs[0], &push(&student_x0[n - 1], r_t)?)?;
    let distil = distil_exact(&student_x0[0], &teacher_steps[0], &refs[1])?;
    let consis = (1..n)
        .map(|k| consis_exact(&student_x0[k - 1], &teacher_steps[k], &student_x0[k], &refs[k + 1]))
        .collect::<Result<Vec<_>>>()?;
    let rhs = (distil.sqrt() + consis.iter().map(|c| c.sqrt()).sum::<f64>()) / std::f64::consts::SQRT_2;
    Ok(TvBoundReport { lhs, rhs, distil, consis })
}

/// Model-level audit on `times = [0, t_1, …, T]`.
pub fn tv_bound_audit(
    student: &dyn Denoiser,
    teacher: &dyn Denoiser,
    ctx: &PosteriorContext,
    r_t: &JointDistribution,
    times: &[f64],
) -> Result<TvBoundReport> {
    if times.len() < 2 || times[0] != 0.0 {
        return Err(Error::arg("times must start at 0 and contain at least one step"));
    }
    let steps = times
        .windows(2)
        .map(|w| teacher.denoiser_kernel(ctx, w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    let x0 = times[1..]
        .iter()
        .map(|&t| student.denoiser_kernel(ctx, 0.0, t))
        .collect::<Result<Vec<_>>>()?;
    tv_bound(&x0, &steps, r_t)
}

/// Student kernels equal to the teacher compositions `p^ψ_{0|t_1} ∘ … ∘ p^ψ_{t_{n−1}|t_n}`.
pub fn teacher_compositions(teacher_steps: &[DenseKernel]) -> Result<Vec<DenseKernel>> {
    let mut out: Vec<DenseKernel> = Vec::with_capacity(teacher_steps.len());
    for k in teacher_steps {
        let next = match out.last() {
            None => k.clone(),
            Some(prev) => compose(prev, k)?,
        };
        out.push(next);
    }
    Ok(out)
}

/// Random probability vector from softmax of `scale · N(0,1)`-ish logits.
pub fn random_probs<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() - 0.5) * 2.0).collect();
    let mut out = vec![0.0; n];
    softmax_into(&logits, &mut out);
    out
}

pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, space: StateSpace, scale: f64) -> JointDistribution {
    JointDistribution::from_weights(space, random_probs(rng, space.size(), scale)).expect("softmax output is a distribution")
}

pub fn random_kernel<R: Rng + ?Sized>(rng: &mut R, space: StateSpace, scale: f64) -> DenseKernel {
    let n = space.size();
    let cols: Vec<f64> = (0..n).flat_map(|_| random_probs(rng, n, scale)).collect();
    DenseKernel::from_raw(space, nalgebra::DMatrix::from_vec(n, n, cols))
}

pub fn random_product_kernel<R: Rng + ?Sized>(rng: &mut R, space: StateSpace, scale: f64) -> ProductKernel {
    let s = space.states_per_dim();
    let factors: Vec<f64> = (0..space.size() * space.num_dims()).flat_map(|_| random_probs(rng, s, scale)).collect();
    ProductKernel::new(space, factors).expect("softmax factors are normalized")
}

pub fn random_mixture_kernel<R: Rng + ?Sized>(rng: &mut R, space: StateSpace, components: usize, scale: f64) -> MixtureKernel {
    let comps: Vec<ProductKernel> = (0..components).map(|_| random_product_kernel(rng, space, scale)).collect();
    let w = random_probs(rng, components, 1.0);
    MixtureKernel::from_components(&w, &comps).expect("valid components")
}

/// `√(KL/2) − TV ≥ 0`.
pub fn pinsker_gap(p: &[f64], q: &[f64]) -> f64 {
    (0.5 * kl_probs(p, q)).sqrt() - tv_probs(p, q)
}

/// `λKL(p1‖q1) + (1−λ)KL(p2‖q2) − KL(mix ‖ mix) ≥ 0`.
pub fn kl_convexity_gap(p1: &[f64], p2: &[f64], q1: &[f64], q2: &[f64], lambda: f64) -> f64 {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect() };
    lambda * kl_probs(p1, q1) + (1.0 - lambda) * kl_probs(p2, q2) - kl_probs(&mix(p1, p2), &mix(q1, q2))
}

/// `E_{y~q1} TV(p1(·|y), p2(·|y)) + TV(q1, q2) − TV(push(p1, q1), push(p2, q2)) ≥ 0`.
pub fn tv_triangle_gap(p1: &DenseKernel, p2: &DenseKernel, q1: &JointDistribution, q2: &JointDistribution) -> Result<f64> {
    let lhs = tv_distance(&push(p1, q1)?, &push(p2, q2)?)?;
    let mean: f64 = q1
        .probs()
        .iter()
        .enumerate()
        .map(|(y, &w)| w * tv_probs(p1.column(y), p2.column(y)))
        .sum();
    Ok(mean + tv_distance(q1, q2)? - lhs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed slack or error.
    pub worst: f64,
    pub tolerance: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub trials: usize,
    pub delta: f64,
    pub horizon: f64,
    pub convergence_steps: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            delta: 0.1,
            horizon: 1.0,
            convergence_steps: vec![4, 8, 16, 32, 64, 128, 256],
        }
    }
}

/// Minimum over trials of a gap that should be non-negative.
fn min_gap(trials: usize, seed: u64, stream: u64, f: impl Fn(&mut ChaCha8Rng) -> Result<f64> + Sync) -> Result<f64> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream * 1_000_003 + i as u64);
            f(&mut rng)
        })
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))
}

fn random_space<R: Rng + ?Sized>(rng: &mut R) -> StateSpace {
    StateSpace::new(rng.random_range(2..=3), rng.random_range(1..=3)).expect("small space")
}

const ESTIMATOR_INSTANCES: usize = 4;

/// Largest `|mean − exact| / SE` of the plain and control-variate consistency estimators
/// over 4000 small-sample replications on one random instance.
fn estimator_z_score(rng: &mut ChaCha8Rng) -> Result<f64> {
    let space = StateSpace::new(rng.random_range(2..=3), 2)?;
    let ks = [rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(1..=3)];
    let su = random_mixture_kernel(rng, space, ks[0], 3.0);
    let ut = random_mixture_kernel(rng, space, ks[1], 3.0);
    let st = random_mixture_kernel(rng, space, ks[2], 3.0);
    let r = random_distribution(rng, space, 2.0);
    let terms = ConsistencyTerms {
        student_su: &su,
        teacher_ut: &ut,
        student_st: &st,
        reference: &r,
    };
    let exact = terms.exact_cross_entropy()?;
    let est_cfg = EstimatorConfig {
        samples: 2,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for est in [consis_loss_mc::<ChaCha8Rng>, consis_loss_cv::<ChaCha8Rng>] {
        let values = (0..4000).map(|_| Ok(est(&terms, &est_cfg, rng)?.value)).collect::<Result<Vec<f64>>>()?;
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        worst = worst.max((mean - exact).abs() / (var / m).sqrt());
    }
    Ok(worst)
}

/// Runs every inequality and closed-form check.
pub fn verify_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    const SLACK: f64 = 1e-12;
    let mut checks = Vec::new();
    let trials = cfg.trials;
    let seed = cfg.seed;
    let mut push_gap = |name: &str, worst: f64, tol: f64, trials: usize| {
        checks.push(CheckResult {
            name: name.to_string(),
            passed: worst >= -tol,
            worst,
            tolerance: tol,
            trials,
        });
    };

    let g = min_gap(trials, seed, 1, |rng| {
        let n = random_space(rng).size();
        let scale = rng.random_range(0.0..6.0);
        Ok(pinsker_gap(&random_probs(rng, n, scale), &random_probs(rng, n, scale)))
    })?;
    push_gap("pinsker", g, SLACK, trials);

    let g = min_gap(trials, seed, 2, |rng| {
        let n = random_space(rng).size();
        let scale = rng.random_range(0.0..6.0);
        let v: Vec<Vec<f64>> = (0..4).map(|_| random_probs(rng, n, scale)).collect();
        Ok(kl_convexity_gap(&v[0], &v[1], &v[2], &v[3], rng.random::<f64>()))
    })?;
    push_gap("kl_convexity", g, SLACK, trials);

    let g = min_gap(trials, seed, 3, |rng| {
        let space = random_space(rng);
        let scale = rng.random_range(0.0..6.0);
        let (p1, p2) = (random_kernel(rng, space, scale), random_kernel(rng, space, scale));
        let (q1, q2) = (random_distribution(rng, space, scale), random_distribution(rng, space, scale));
        tv_triangle_gap(&p1, &p2, &q1, &q2)
    })?;
    push_gap("tv_triangle", g, SLACK, trials);

    let g = min_gap(trials, seed, 4, |rng| {
        let space = random_space(rng);
        let scale = rng.random_range(0.0..6.0);
        let teacher = random_product_kernel(rng, space, scale);
        let k = rng.random_range(1..=4);
        let student = random_mixture_kernel(rng, space, k, scale);
        let r = random_distribution(rng, space, scale);
        Ok(distil_surrogate(&student, &teacher, &r)? - distil_exact(&student.to_dense(), &teacher.to_dense(), &r)?)
    })?;
    push_gap("surrogate_dominance", g, SLACK, trials);

    let g = min_gap(trials, seed, 5, |rng| {
        let space = StateSpace::new(rng.random_range(2..=3), rng.random_range(2..=3))?;
        let steps = rng.random_range(2..=3);
        let scale = rng.random_range(0.0..6.0);
        let teacher: Vec<DenseKernel> = (0..steps)
            .map(|_| random_mixture_kernel(rng, space, 1, scale).to_dense())
            .collect();
        let student: Vec<DenseKernel> = (0..steps)
            .map(|_| {
                let k = rng.random_range(1..=3);
                random_mixture_kernel(rng, space, k, scale).to_dense()
            })
            .collect();
        let rep = tv_bound(&student, &teacher, &random_distribution(rng, space, scale))?;
        Ok(if rep.vacuous() { 0.0 } else { rep.rhs - rep.lhs })
    })?;
    push_gap("tv_bound_random", g, 1e-9, trials);

    let z = (0..ESTIMATOR_INSTANCES)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(6 * 1_000_003 + i as u64);
            estimator_z_score(&mut rng)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    checks.push(CheckResult {
        name: "estimator_unbiased".into(),
        passed: z <= 4.0,
        worst: z,
        tolerance: 4.0,
        trials: 2 * ESTIMATOR_INSTANCES,
    });

    let ex = UniformExample::new(cfg.delta, cfg.horizon)?;
    let err = ex.two_path_error(&ex.default_pairs())?;
    checks.push(CheckResult {
        name: "closed_forms_two_path".into(),
        passed: err <= 1e-10,
        worst: err,
        tolerance: 1e-10,
        trials: ex.default_pairs().len(),
    });
    let mut worst: f64 = 0.0;
    for n in [20, 50, 100] {
        let n = n.max(ex.min_steps());
        worst = worst.max((ex.delta_trace(n)?.final_delta() - ex.engine_delta(n)?).abs());
    }
    checks.push(CheckResult {
        name: "delta_engine".into(),
        passed: worst <= 1e-10,
        worst,
        tolerance: 1e-10,
        trials: 3,
    });

    let study = convergence_study(&ex.context()?, cfg.delta, &cfg.convergence_steps)?;
    let slope = study.slope.unwrap_or(f64::NAN);
    checks.push(CheckResult {
        name: "convergence_slope".into(),
        passed: (-1.25..=-0.85).contains(&slope),
        worst: slope,
        tolerance: 0.2,
        trials: study.rows.len(),
    });
    let c = ex.constant();
    let worst = study
        .rows
        .iter()
        .filter(|r| r.steps >= 64)
        .map(|r| r.n_times_tv - c)
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckResult {
        name: "lower_bound_constant".into(),
        passed: worst >= 0.0,
        worst,
        tolerance: 0.0,
        trials: study.rows.iter().filter(|r| r.steps >= 64).count(),
    });
    Ok(VerifyReport { seed, checks })
}
