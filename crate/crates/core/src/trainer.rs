//! Gradient-descent distillation of a tabular mixture student.
//!
//! All student kernels used by the objective are `p_{0|t}` at grid times, so
//! the reparametrization bridges are the identity and gradients flow straight
//! into the softmax logits.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoisers::{sample_categorical, Denoiser, MixtureKernel, TabularMixtureDenoiser, TabularProductDenoiser, TimeGrid};
use crate::dist::{compose, push, tv_distance, DenseKernel, JointDistribution, ProductKernel};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, ReferenceSource, TRAIN_FLOOR};
use crate::posterior::PosteriorContext;
use crate::samplers::ancestral_law;

/// How training times are chosen at each iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TimeLaw {
    /// `δ` fixed with probability `p_fixed`, else uniform on `[δ, band_hi]`;
    /// `Δt` from the loss gap schedule; `t ~ U[δ + Δt, T]`; all digitized to the grid.
    Random { p_fixed: f64, band_hi: f64 },
    /// Every grid step at once: distillation at `t_1`, consistency on each `(t_{n-1}, t_n)`,
    /// marginal and correlation terms at every `t_n`.
    FullGrid,
}

/// Whether the consistency gradient is exact or sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Exact,
    /// Consistency term from the estimator configured in the loss config.
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// 0 disables momentum.
    pub momentum: f64,
    /// Linear learning-rate warm-up length in iterations.
    pub warmup: usize,
    pub loss: LossConfig,
    pub time_law: TimeLaw,
    pub gradient: GradientMode,
    /// Logit noise on components `2..K` at initialization.
    pub init_noise: f64,
    pub rounds: usize,
    /// Evaluate the sampling metrics every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            iterations: 1000,
            seed: 0,
            momentum: 0.9,
            warmup: 0,
            loss: LossConfig::default(),
            time_law: TimeLaw::Random {
                p_fixed: 0.5,
                band_hi: 0.02,
            },
            gradient: GradientMode::Exact,
            init_noise: 1e-2,
            rounds: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must lie in [0, 1)"));
        }
        if self.rounds == 0 {
            return Err(Error::arg("rounds must be >= 1"));
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::arg("init noise must be >= 0"));
        }
        if let TimeLaw::Random { p_fixed, band_hi } = self.time_law {
            if !(0.0..=1.0).contains(&p_fixed) || !(band_hi >= self.loss.delta && band_hi < horizon) {
                return Err(Error::arg("invalid time law"));
            }
        }
        self.loss.validate(horizon)
    }
}

/// Grid indices (and weights) entering one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeSelection {
    /// `(g, weight)` for `L_distil` at `t_g`.
    pub distil: Vec<(usize, f64)>,
    /// `(g_u, g_t, weight)` for `L_consis(r_t, 0, t_u, t_t)`.
    pub consis: Vec<(usize, usize, f64)>,
    /// `(g, weight)` for `α_t L_corr + L_marginal` at `t_g`.
    pub aux: Vec<(usize, f64)>,
}

impl TimeSelection {
    pub fn full_grid(grid: &TimeGrid) -> Self {
        let n = grid.steps();
        Self {
            distil: vec![(1, 1.0)],
            consis: (2..=n).map(|g| (g - 1, g, 1.0)).collect(),
            aux: (1..=n).map(|g| (g, 1.0)).collect(),
        }
    }

    /// One draw of the training-time law.
    pub fn sample<R: Rng + ?Sized>(law: &TimeLaw, loss: &LossConfig, grid: &TimeGrid, rng: &mut R) -> Self {
        let (p_fixed, band_hi) = match *law {
            TimeLaw::FullGrid => return Self::full_grid(grid),
            TimeLaw::Random { p_fixed, band_hi } => (p_fixed, band_hi),
        };
        let horizon = grid.end();
        let n = grid.steps();
        let delta = if rng.random::<f64>() < p_fixed {
            loss.delta
        } else {
            loss.delta + rng.random::<f64>() * (band_hi - loss.delta)
        };
        let dt = loss.gap.sample(rng);
        let lo = (delta + dt).min(horizon);
        let t = lo + rng.random::<f64>() * (horizon - lo);
        let snap = |x: f64, min: usize| grid.nearest_index(x).clamp(min, n);
        if loss.gated {
            let g = snap(t, 1);
            return if t <= dt {
                Self {
                    distil: vec![(g, 1.0 / dt)],
                    consis: vec![],
                    aux: vec![(g, 1.0)],
                }
            } else {
                let gt = snap(t, 2.min(n));
                Self {
                    distil: vec![],
                    consis: if gt >= 2 { vec![(snap(t - dt, 1).min(gt - 1), gt, 1.0)] } else { vec![] },
                    aux: vec![(gt, 1.0)],
                }
            };
        }
        let gt = snap(t, 2.min(n));
        let consis = if gt >= 2 {
            vec![(snap(t - dt, 1).min(gt - 1), gt, 1.0)]
        } else {
            vec![]
        };
        Self {
            distil: vec![(snap(delta, 1), 1.0)],
            consis,
            aux: vec![(gt, 1.0)],
        }
    }
}

/// Which loss terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub distil: bool,
    pub consis: bool,
    pub corr: bool,
    pub marginal: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        distil: true,
        consis: true,
        corr: true,
        marginal: true,
    };

    pub fn only(name: &str) -> Result<Self> {
        let mut t = Terms {
            distil: false,
            consis: false,
            corr: false,
            marginal: false,
        };
        match name {
            "distil" => t.distil = true,
            "consis" => t.consis = true,
            "corr" => t.corr = true,
            "marginal" => t.marginal = true,
            _ => return Err(Error::arg(format!("unknown loss term {name:?}"))),
        }
        Ok(t)
    }
}

/// Teacher-side quantities at one grid time.
struct TeacherAt {
    x0: DenseKernel,
    marginals: ProductKernel,
    /// `p^ψ_{t_{g-1}|t_g}`; `None` at `g = 1`.
    step: Option<DenseKernel>,
    reference: JointDistribution,
    joint: DMatrix<f64>,
}

/// Fixed teacher, data oracle and references for one training round.
pub struct TrainEnv<'a> {
    ctx: &'a PosteriorContext,
    teacher: &'a dyn Denoiser,
    grid: TimeGrid,
    loss: LossConfig,
    mode: GradientMode,
    cache: Vec<Option<TeacherAt>>,
}

impl<'a> TrainEnv<'a> {
    pub fn new(ctx: &'a PosteriorContext, teacher: &'a dyn Denoiser, loss: &LossConfig) -> Result<Self> {
        ctx.space().check_same(&teacher.space())?;
        let grid = teacher.grid().clone();
        if (grid.end() - ctx.forward().horizon()).abs() > 1e-12 {
            return Err(Error::arg("the teacher grid must end at the forward horizon"));
        }
        let times = grid.times();
        let n = grid.steps();
        let mut steps: Vec<Option<DenseKernel>> = vec![None; n + 1];
        for g in 2..=n {
            steps[g] = Some(teacher.denoiser_kernel(ctx, times[g - 1], times[g])?);
        }
        let mut refs: Vec<Option<JointDistribution>> = vec![None; n + 1];
        match loss.reference {
            ReferenceSource::DataForward => {
                for (g, r) in refs.iter_mut().enumerate().skip(1) {
                    *r = Some((*ctx.marginal(times[g])?).clone());
                }
            }
            ReferenceSource::TeacherRollout => {
                refs[n] = Some((*ctx.marginal(times[n])?).clone());
                for g in (1..n).rev() {
                    let next = push(steps[g + 1].as_ref().expect("g + 1 >= 2"), refs[g + 1].as_ref().expect("filled"))?;
                    refs[g] = Some(next);
                }
            }
        }
        let mut cache = Vec::with_capacity(n + 1);
        cache.push(None);
        for g in 1..=n {
            let t = times[g];
            let mix = teacher.mixture_kernel(ctx, 0.0, t)?;
            cache.push(Some(TeacherAt {
                x0: mix.to_dense(),
                marginals: mix.marginal_product(),
                step: steps[g].take(),
                reference: refs[g].take().expect("filled for g >= 1"),
                joint: ctx.joint_pair(t)?,
            }));
        }
        Ok(Self {
            ctx,
            teacher,
            grid,
            loss: loss.clone(),
            mode: GradientMode::Exact,
            cache,
        })
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn context(&self) -> &PosteriorContext {
        self.ctx
    }

    pub fn teacher(&self) -> &dyn Denoiser {
        self.teacher
    }

    pub fn loss(&self) -> &LossConfig {
        &self.loss
    }

    /// `r_{t_g}` used by the distillation, consistency and marginal terms.
    pub fn reference(&self, g: usize) -> Result<&JointDistribution> {
        Ok(&self.teacher_at(g)?.reference)
    }

    fn teacher_at(&self, g: usize) -> Result<&TeacherAt> {
        self.cache
            .get(g)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::arg(format!("grid index {g} is outside 1..={}", self.grid.steps())))
    }

    /// Teacher kernel `p^ψ_{t_u|t_t}`.
    fn teacher_step(&self, gu: usize, gt: usize) -> Result<DenseKernel> {
        if gu + 1 == gt {
            return Ok(self.teacher_at(gt)?.step.clone().expect("g >= 2 has a step"));
        }
        let times = self.grid.times();
        self.teacher.denoiser_kernel(self.ctx, times[gu], times[gt])
    }
}

/// Student `p_{0|t_g}`: per-component factors, weights, dense kernel and marginal product.
struct StudentAt {
    comps: Vec<ProductKernel>,
    weights: Vec<f64>,
    dense: DenseKernel,
    bar: ProductKernel,
}

impl StudentAt {
    fn new(student: &TabularMixtureDenoiser, g: usize) -> Result<Self> {
        let t = student.grid().times()[g];
        let comps: Vec<ProductKernel> = (0..student.num_components())
            .map(|k| student.component_x0(k, t))
            .collect::<Result<_>>()?;
        let weights = student.weights();
        let mix = MixtureKernel::from_components(&weights, &comps)?;
        Ok(Self {
            dense: mix.to_dense(),
            bar: mix.marginal_product(),
            comps,
            weights,
        })
    }
}

/// Adjoints with respect to `p_{0|t_g}` (dense `[(y, x)]`) and `p̄_{0|t_g}` (factors `[x][d][a]`).
struct Adjoint {
    dense: DMatrix<f64>,
    bar: Vec<f64>,
}

/// Gradient with respect to component logits and (unless frozen) weight logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub logits: Vec<f64>,
    pub weight_logits: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.logits.iter().chain(&self.weight_logits).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(&self.weight_logits).all(|g| g.is_finite())
    }
}

/// Objective value split by term; `total` applies the `α_t` weighting to `corr`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub distil: f64,
    pub consis: f64,
    pub corr: f64,
    pub marginal: f64,
}

/// Objective over `times` and its analytic gradient.
///
/// The consistency target is `target_{0|u} ∘ teacher_{u|t}`, with `target =
/// student` when `None`. Under stop-gradient the target is a constant, so
/// passing a frozen copy of the student differentiates the same function
/// numerically. Without stop-gradient `target` must be `None`.
pub fn objective(
    student: &TabularMixtureDenoiser,
    target: Option<&TabularMixtureDenoiser>,
    env: &TrainEnv<'_>,
    times: &TimeSelection,
    terms: Terms,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(ObjectiveValue, Gradient)> {
    let space = env.ctx.space();
    student.space().check_same(&space)?;
    if student.grid() != &env.grid || target.is_some_and(|m| m.grid() != &env.grid) {
        return Err(Error::arg("student and teacher grids differ"));
    }
    let stop_gradient = env.loss.stop_gradient;
    if !stop_gradient && target.is_some() {
        return Err(Error::arg("a separate consistency target requires stop-gradient"));
    }
    let estimated = env.mode == GradientMode::Estimated;
    if estimated && !stop_gradient {
        return Err(Error::arg("estimated consistency gradients require stop-gradient"));
    }
    let (n, states, dims) = (space.size(), space.states_per_dim(), space.num_dims());
    let n_grid = env.grid.steps();

    // Student slices needed by the selected terms.
    let mut needed = vec![false; n_grid + 1];
    let mut mark = |g: usize| -> Result<()> {
        if g == 0 || g > n_grid {
            return Err(Error::arg(format!("grid index {g} is outside 1..={n_grid}")));
        }
        needed[g] = true;
        Ok(())
    };
    if terms.distil {
        times.distil.iter().try_for_each(|&(g, _)| mark(g))?;
    }
    if terms.consis {
        for &(gu, gt, _) in &times.consis {
            if gu >= gt {
                return Err(Error::arg(format!("consistency needs u < t, got {gu}, {gt}")));
            }
            mark(gu)?;
            mark(gt)?;
        }
    }
    if terms.corr || terms.marginal {
        times.aux.iter().try_for_each(|&(g, _)| mark(g))?;
    }
    let students: Vec<Option<StudentAt>> = needed
        .iter()
        .enumerate()
        .map(|(g, &need)| need.then(|| StudentAt::new(student, g)).transpose())
        .collect::<Result<_>>()?;
    let slice = |g: usize| students[g].as_ref().expect("marked as needed");
    let mut adjoints: Vec<Option<Adjoint>> = needed
        .iter()
        .map(|&need| {
            need.then(|| Adjoint {
                dense: DMatrix::zeros(n, n),
                bar: vec![0.0; n * dims * states],
            })
        })
        .collect();
    fn adjoint(a: &mut [Option<Adjoint>], g: usize) -> &mut Adjoint {
        a[g].as_mut().expect("marked as needed")
    }
    let mut value = ObjectiveValue::default();

    if terms.distil {
        for &(g, w) in &times.distil {
            let teacher = env.teacher_at(g)?;
            let st = slice(g);
            let adj = adjoint(&mut adjoints, g);
            let mut v = 0.0;
            for x in (0..n).filter(|&x| teacher.reference.prob(x) > 0.0) {
                let r = teacher.reference.prob(x);
                for y in 0..n {
                    let q = teacher.x0.entry(y, x);
                    if q > 0.0 {
                        let p = st.dense.entry(y, x).max(TRAIN_FLOOR);
                        v += r * q * (q.ln() - p.ln());
                        adj.dense[(y, x)] -= w * r * q / p;
                    }
                }
            }
            value.distil += w * v;
        }
    }

    if terms.consis {
        let mut rng = rng;
        for &(gu, gt, w) in &times.consis {
            let reference = &env.teacher_at(gt)?.reference;
            let step = env.teacher_step(gu, gt)?;
            let own;
            let inner = match target {
                Some(model) => {
                    own = StudentAt::new(model, gu)?;
                    &own
                }
                None => slice(gu),
            };
            let st = slice(gt);
            if estimated {
                let rng = rng.as_deref_mut().ok_or_else(|| Error::arg("estimated gradients need an RNG"))?;
                let v = sampled_consistency(env, reference, &step, inner, st, w, adjoint(&mut adjoints, gt), rng);
                value.consis += w * v;
                continue;
            }
            let q = compose(&inner.dense, &step)?;
            let mut g_q = DMatrix::<f64>::zeros(n, n);
            let adj = adjoint(&mut adjoints, gt);
            let mut v = 0.0;
            for x in (0..n).filter(|&x| reference.prob(x) > 0.0) {
                let r = reference.prob(x);
                for y in 0..n {
                    let qy = q.entry(y, x);
                    let p = st.dense.entry(y, x).max(TRAIN_FLOOR);
                    if qy > 0.0 {
                        v += r * qy * (qy.ln() - p.ln());
                        adj.dense[(y, x)] -= w * r * qy / p;
                    }
                    if !stop_gradient {
                        g_q[(y, x)] = w * r * (qy.max(TRAIN_FLOOR).ln() - p.ln() + 1.0);
                    }
                }
            }
            value.consis += w * v;
            if !stop_gradient {
                adjoint(&mut adjoints, gu).dense += &g_q * step.matrix().transpose();
            }
        }
    }

    if terms.corr || terms.marginal {
        for &(g, w) in &times.aux {
            let teacher = env.teacher_at(g)?;
            let alpha = env.loss.alpha.at(env.grid.times()[g], env.grid.end());
            let st = slice(g);
            let adj = adjoint(&mut adjoints, g);
            if terms.corr && alpha > 0.0 {
                let scale = w * alpha;
                let mut v = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        let j = teacher.joint[(y, x)];
                        if j == 0.0 {
                            continue;
                        }
                        let p = st.dense.entry(y, x).max(TRAIN_FLOOR);
                        let mut log_bar = 0.0;
                        for d in 0..dims {
                            let a = space.coord(y, d);
                            let pb = st.bar.factor(x, d)[a].max(TRAIN_FLOOR);
                            log_bar += pb.ln();
                            adj.bar[(x * dims + d) * states + a] += scale * j / pb;
                        }
                        v += j * (log_bar - p.ln());
                        adj.dense[(y, x)] -= scale * j / p;
                    }
                }
                value.corr += w * v;
                value.total += scale * v;
            }
            if terms.marginal {
                let mut v = 0.0;
                for x in (0..n).filter(|&x| teacher.reference.prob(x) > 0.0) {
                    let r = teacher.reference.prob(x);
                    for d in 0..dims {
                        let tq = teacher.marginals.factor(x, d);
                        let sp = st.bar.factor(x, d);
                        for a in (0..states).filter(|&a| tq[a] > 0.0) {
                            let p = sp[a].max(TRAIN_FLOOR);
                            v += r * tq[a] * (tq[a].ln() - p.ln());
                            adj.bar[(x * dims + d) * states + a] -= w * r * tq[a] / p;
                        }
                    }
                }
                value.marginal += w * v;
            }
        }
    }
    value.total += value.distil + value.consis + value.marginal;

    let mut grad = Gradient {
        logits: vec![0.0; student.logits().len()],
        weight_logits: vec![0.0; student.num_components()],
    };
    let mut grad_w = vec![0.0; student.num_components()];
    for (g, adj) in adjoints.iter().enumerate() {
        if let Some(adj) = adj {
            backprop(student, g, slice(g), adj, &mut grad.logits, &mut grad_w)?;
        }
    }
    if !student.frozen_weights() {
        let w = student.weights();
        let dot: f64 = w.iter().zip(&grad_w).map(|(a, b)| a * b).sum();
        for (k, gl) in grad.weight_logits.iter_mut().enumerate() {
            *gl = w[k] * (grad_w[k] - dot);
        }
    }
    if !value.total.is_finite() || !grad.is_finite() {
        return Err(Error::Training(format!(
            "non-finite objective or gradient: {value:?}, |grad| = {}",
            grad.norm()
        )));
    }
    Ok((value, grad))
}

/// Sampled consistency cross entropy with its gradient on `p_{0|t}`; returns the estimate.
#[allow(clippy::too_many_arguments)]
fn sampled_consistency(
    env: &TrainEnv<'_>,
    reference: &JointDistribution,
    step: &DenseKernel,
    inner: &StudentAt,
    st: &StudentAt,
    w: f64,
    adj: &mut Adjoint,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let space = env.ctx.space();
    let (states, dims) = (space.states_per_dim(), space.num_dims());
    let cfg = &env.loss.estimator;
    let cv = env.loss.use_control_variates;
    let m = cfg.samples;
    let scale = w / m as f64;
    let mut total = 0.0;
    for _ in 0..m {
        let xt = sample_categorical(rng, reference.probs());
        let xu = sample_categorical(rng, step.column(xt));
        let k = sample_categorical(rng, &inner.weights);
        let mut xs = 0;
        for d in 0..dims {
            xs = xs * states + sample_categorical(rng, inner.comps[k].factor(xu, d));
        }
        let p = st.dense.entry(xs, xt).max(TRAIN_FLOOR);
        let mut sample = -p.ln();
        adj.dense[(xs, xt)] -= scale / p;
        if cv {
            for d in 0..dims {
                let bar = st.bar.factor(xt, d);
                let a = space.coord(xs, d);
                let pb = bar[a].max(TRAIN_FLOOR);
                sample += pb.ln();
                adj.bar[(xt * dims + d) * states + a] += scale / pb;
                let q = inner.comps[k].factor(xu, d);
                for b in (0..states).filter(|&b| q[b] > 0.0) {
                    let pb = bar[b].max(TRAIN_FLOOR);
                    sample -= q[b] * pb.ln();
                    adj.bar[(xt * dims + d) * states + b] -= scale * q[b] / pb;
                }
            }
        }
        total += sample;
    }
    total / m as f64
}

/// Chain rule from kernel adjoints to component and weight logits at grid index `g`.
fn backprop(
    student: &TabularMixtureDenoiser,
    g: usize,
    st: &StudentAt,
    adj: &Adjoint,
    grad_logits: &mut [f64],
    grad_w: &mut [f64],
) -> Result<()> {
    let space = student.space();
    let (n, states, dims) = (space.size(), space.states_per_dim(), space.num_dims());
    let t = student.grid().times()[g];
    let mut g_pi = vec![0.0; dims * states];
    let mut coords = vec![0usize; dims];
    for (k, comp) in st.comps.iter().enumerate() {
        let wk = st.weights[k];
        let offset = student.block_offset(k, t)?;
        for x in 0..n {
            g_pi.iter_mut().for_each(|v| *v = 0.0);
            let bar = &adj.bar[x * dims * states..(x + 1) * dims * states];
            for (d, chunk) in g_pi.chunks_mut(states).enumerate() {
                for (a, v) in chunk.iter_mut().enumerate() {
                    *v = wk * bar[d * states + a];
                    grad_w[k] += bar[d * states + a] * comp.factor(x, d)[a];
                }
            }
            for y in 0..n {
                let gy = adj.dense[(y, x)];
                if gy == 0.0 {
                    continue;
                }
                space.decode_into(y, &mut coords);
                let probs: Vec<f64> = (0..dims).map(|d| comp.factor(x, d)[coords[d]]).collect();
                grad_w[k] += gy * probs.iter().product::<f64>();
                for d in 0..dims {
                    let others: f64 = (0..dims).filter(|&e| e != d).map(|e| probs[e]).product();
                    g_pi[d * states + coords[d]] += wk * gy * others;
                }
            }
            for d in 0..dims {
                let sigma = comp.factor(x, d);
                let gd = &g_pi[d * states..(d + 1) * states];
                let dot: f64 = sigma.iter().zip(gd).map(|(s, g)| s * g).sum();
                let base = offset + (x * dims + d) * states;
                for a in 0..states {
                    grad_logits[base + a] += sigma[a] * (gd[a] - dot);
                }
            }
        }
    }
    Ok(())
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the gradient
/// against central differences with step `eps`, over all parameters.
pub fn gradient_check(
    student: &TabularMixtureDenoiser,
    env: &TrainEnv<'_>,
    times: &TimeSelection,
    terms: Terms,
    eps: f64,
) -> Result<f64> {
    let frozen = env.loss.stop_gradient.then(|| student.clone());
    let (_, grad) = objective(student, frozen.as_ref(), env, times, terms, None)?;
    let eval = |m: &TabularMixtureDenoiser| -> Result<f64> {
        Ok(objective(m, frozen.as_ref(), env, times, terms, None)?.0.total)
    };
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    let mut probe = student.clone();
    for i in 0..student.logits().len() {
        let base = probe.logits()[i];
        probe.logits_mut()[i] = base + eps;
        let up = eval(&probe)?;
        probe.logits_mut()[i] = base - eps;
        let down = eval(&probe)?;
        probe.logits_mut()[i] = base;
        let num = (up - down) / (2.0 * eps);
        diff += (num - grad.logits[i]).powi(2);
        norm_a += grad.logits[i].powi(2);
        norm_n += num * num;
    }
    if !student.frozen_weights() {
        for k in 0..student.num_components() {
            let base = probe.weight_logits()[k];
            probe.weight_logits_mut()[k] = base + eps;
            let up = eval(&probe)?;
            probe.weight_logits_mut()[k] = base - eps;
            let down = eval(&probe)?;
            probe.weight_logits_mut()[k] = base;
            let num = (up - down) / (2.0 * eps);
            diff += (num - grad.weight_logits[k]).powi(2);
            norm_a += grad.weight_logits[k].powi(2);
            norm_n += num * num;
        }
    }
    let scale = norm_a.max(norm_n).sqrt();
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

/// Law of the dense ancestral chain over `times`, started from `q_{t_last}`.
pub fn chain_law(model: &dyn Denoiser, ctx: &PosteriorContext, times: &[f64]) -> Result<JointDistribution> {
    let last = *times.last().ok_or_else(|| Error::arg("need at least one time"))?;
    ancestral_law(model, ctx, times, &*ctx.marginal(last)?)
}

/// TV metrics of one-step and full-grid sampling laws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    /// `TV(student one-step law, teacher grid-chain law)`.
    pub tv_student_teacher: f64,
    /// `TV(student one-step law, q_0)`.
    pub tv_student_data: f64,
    /// `TV(teacher grid-chain law, q_0)`.
    pub tv_teacher_data: f64,
}

pub fn evaluate(student: &dyn Denoiser, env: &TrainEnv<'_>, iteration: usize) -> Result<EvalRecord> {
    let ctx = env.ctx;
    let horizon = env.grid.end();
    let one_step = chain_law(student, ctx, &[0.0, horizon])?;
    let teacher = chain_law(env.teacher, ctx, env.grid.times())?;
    Ok(EvalRecord {
        iteration,
        tv_student_teacher: tv_distance(&one_step, &teacher)?,
        tv_student_data: tv_distance(&one_step, ctx.data())?,
        tv_teacher_data: tv_distance(&teacher, ctx.data())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub objective: ObjectiveValue,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_time_s: f64,
}

impl TrainTrace {
    /// CSV with one row per iteration.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "total", "distil", "consis", "corr", "marginal", "grad_norm"])?;
        for r in &self.iterations {
            let o = &r.objective;
            let mut row = vec![r.iteration.to_string()];
            row.extend([o.total, o.distil, o.consis, o.corr, o.marginal, r.grad_norm].map(|v| format!("{v:.16e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_eval_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "tv_student_teacher", "tv_student_data", "tv_teacher_data"])?;
        for r in &self.evals {
            let mut row = vec![r.iteration.to_string()];
            row.extend([r.tv_student_teacher, r.tv_student_data, r.tv_teacher_data].map(|v| format!("{v:.16e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Consecutive iterations above `10×` the initial objective that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Trains `student` in place, appending to `trace` so it survives an error.
pub fn train_with_trace(
    student: &mut TabularMixtureDenoiser,
    env: &TrainEnv<'_>,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    cfg.validate(env.grid.end())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Gradient {
        logits: vec![0.0; student.logits().len()],
        weight_logits: vec![0.0; student.num_components()],
    };
    let mut initial = None;
    let mut above = 0;
    let result = (|| -> Result<()> {
        for it in 0..cfg.iterations {
            if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
                trace.evals.push(evaluate(student, env, it)?);
            }
            let times = TimeSelection::sample(&cfg.time_law, &env.loss, &env.grid, &mut rng);
            let (value, grad) = objective(student, None, env, &times, Terms::ALL, Some(&mut rng))?;
            trace.iterations.push(IterRecord {
                iteration: it,
                objective: value,
                grad_norm: grad.norm(),
            });
            let init: f64 = *initial.get_or_insert(value.total);
            if value.total > 10.0 * init.abs().max(1e-12) {
                above += 1;
                if above >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged {
                        iterations: it + 1,
                        objective: value.total,
                        initial: init,
                    });
                }
            } else {
                above = 0;
            }
            let lr = match cfg.warmup {
                0 => cfg.learning_rate,
                w => cfg.learning_rate * ((it + 1) as f64 / w as f64).min(1.0),
            };
            for (v, g) in velocity.logits.iter_mut().zip(&grad.logits) {
                *v = cfg.momentum * *v + g;
            }
            for (v, g) in velocity.weight_logits.iter_mut().zip(&grad.weight_logits) {
                *v = cfg.momentum * *v + g;
            }
            for (l, v) in student.logits_mut().iter_mut().zip(&velocity.logits) {
                *l -= lr * v;
            }
            if !student.frozen_weights() {
                for (l, v) in student.weight_logits_mut().iter_mut().zip(&velocity.weight_logits) {
                    *l -= lr * v;
                }
            }
        }
        trace.evals.push(evaluate(student, env, cfg.iterations)?);
        Ok(())
    })();
    trace.wall_time_s += start.elapsed().as_secs_f64();
    result
}

pub fn train(
    student: &TabularMixtureDenoiser,
    env: &TrainEnv<'_>,
    cfg: &TrainConfig,
) -> Result<(TabularMixtureDenoiser, TrainTrace)> {
    let mut out = student.clone();
    let mut trace = TrainTrace::default();
    train_with_trace(&mut out, env, cfg, &mut trace)?;
    Ok((out, trace))
}

/// `K`-component student copied from the teacher with the configured init noise.
pub fn init_student(teacher: &TabularProductDenoiser, components: usize, cfg: &TrainConfig) -> Result<TabularMixtureDenoiser> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    TabularMixtureDenoiser::from_teacher(teacher, components, cfg.init_noise, &mut rng)
}

/// Runs `cfg.rounds` rounds; each trained student becomes the next round's teacher.
pub fn iterated_di4c(
    ctx: &PosteriorContext,
    teacher: &dyn Denoiser,
    student: &TabularMixtureDenoiser,
    cfg: &TrainConfig,
) -> Result<(TabularMixtureDenoiser, Vec<TrainTrace>)> {
    cfg.validate(ctx.forward().horizon())?;
    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut current = student.clone();
    let mut previous: Option<TabularMixtureDenoiser> = None;
    for round in 0..cfg.rounds {
        let round_teacher: &dyn Denoiser = match &previous {
            Some(p) => p,
            None => teacher,
        };
        let env = TrainEnv::new(ctx, round_teacher, &cfg.loss)?.with_gradient_mode(cfg.gradient);
        let mut round_cfg = cfg.clone();
        round_cfg.seed = cfg.seed.wrapping_add(round as u64);
        let (trained, trace) = train(&current, &env, &round_cfg)?;
        traces.push(trace);
        previous = Some(trained.clone());
        current = trained;
    }
    Ok((current, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::fit_product_to_oracle;
    use crate::forward::FactorizedForward;
    use crate::losses::{consis_exact, distil_exact, AlphaSchedule, GapSchedule};

    fn two_bit(steps: usize) -> (PosteriorContext, TabularProductDenoiser) {
        let fwd = FactorizedForward::uniform2(2).unwrap();
        let q0 = JointDistribution::new(fwd.space(), vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let ctx = PosteriorContext::new(fwd, q0).unwrap();
        let teacher = fit_product_to_oracle(&ctx, &TimeGrid::uniform(steps, 1.0).unwrap()).unwrap();
        (ctx, teacher)
    }

    fn random_student(teacher: &TabularProductDenoiser, k: usize, seed: u64, free_weights: bool) -> TabularMixtureDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = TabularMixtureDenoiser::from_teacher(teacher, k, 0.0, &mut rng).unwrap();
        for l in s.logits_mut() {
            *l += rng.random::<f64>() - 0.5;
        }
        if free_weights {
            s.set_frozen_weights(false);
            for l in s.weight_logits_mut() {
                *l = rng.random::<f64>() - 0.5;
            }
        }
        s
    }

    fn loss(stop_gradient: bool, reference: ReferenceSource) -> LossConfig {
        LossConfig {
            alpha: AlphaSchedule::One,
            stop_gradient,
            reference,
            ..Default::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ctx, teacher) = two_bit(4);
        for (seed, sg, reference) in [
            (0, true, ReferenceSource::DataForward),
            (1, false, ReferenceSource::DataForward),
            (2, true, ReferenceSource::TeacherRollout),
        ] {
            let cfg = loss(sg, reference);
            let env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap();
            let student = random_student(&teacher, 2, seed, true);
            let times = TimeSelection::full_grid(env.grid());
            for name in ["distil", "consis", "corr", "marginal"] {
                let err = gradient_check(&student, &env, &times, Terms::only(name).unwrap(), 1e-5).unwrap();
                assert!(err < 1e-6, "{name} sg={sg}: {err}");
            }
            let err = gradient_check(&student, &env, &times, Terms::ALL, 1e-5).unwrap();
            assert!(err < 1e-6, "all sg={sg}: {err}");
        }
    }

    #[test]
    fn objective_terms_match_exact_losses() {
        let (ctx, teacher) = two_bit(4);
        let cfg = loss(true, ReferenceSource::DataForward);
        let env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap();
        let student = random_student(&teacher, 3, 5, false);
        let t = env.grid().times().to_vec();
        let times = TimeSelection {
            distil: vec![(1, 1.0)],
            consis: vec![(1, 3, 1.0)],
            aux: vec![],
        };
        let (v, _) = objective(&student, None, &env, &times, Terms::ALL, None).unwrap();
        let r1 = ctx.marginal(t[1]).unwrap();
        let d = distil_exact(
            &student.denoiser_kernel(&ctx, 0.0, t[1]).unwrap(),
            &teacher.denoiser_kernel(&ctx, 0.0, t[1]).unwrap(),
            &r1,
        )
        .unwrap();
        let c = consis_exact(
            &student.denoiser_kernel(&ctx, 0.0, t[1]).unwrap(),
            &teacher.denoiser_kernel(&ctx, t[1], t[3]).unwrap(),
            &student.denoiser_kernel(&ctx, 0.0, t[3]).unwrap(),
            &ctx.marginal(t[3]).unwrap(),
        )
        .unwrap();
        assert!((v.distil - d).abs() < 1e-12 && (v.consis - c).abs() < 1e-12);
        assert!((v.total - d - c).abs() < 1e-12);
    }

    #[test]
    fn teacher_copy_objective() {
        let (ctx, teacher) = two_bit(4);
        let cfg = LossConfig {
            alpha: AlphaSchedule::Zero,
            ..Default::default()
        };
        let env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let copy = TabularMixtureDenoiser::from_teacher(&teacher, 2, 0.0, &mut rng).unwrap();
        let (v, g) = objective(&copy, None, &env, &TimeSelection::full_grid(env.grid()), Terms::ALL, None).unwrap();
        assert!(v.distil.abs() < 1e-12 && v.marginal.abs() < 1e-12);
        assert!(v.consis > 0.0 && (v.total - v.consis).abs() < 1e-12);
        assert!(g.is_finite());
    }

    #[test]
    fn gradient_step_descends() {
        let (ctx, teacher) = two_bit(4);
        let cfg = loss(true, ReferenceSource::DataForward);
        let env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap();
        let student = random_student(&teacher, 2, 9, true);
        let times = TimeSelection::full_grid(env.grid());
        let (v0, g) = objective(&student, None, &env, &times, Terms::ALL, None).unwrap();
        let mut next = student.clone();
        for (l, d) in next.logits_mut().iter_mut().zip(&g.logits) {
            *l -= 1e-3 * d;
        }
        for (l, d) in next.weight_logits_mut().iter_mut().zip(&g.weight_logits) {
            *l -= 1e-3 * d;
        }
        // Stop-gradient descends on the function with a frozen target.
        let (v1, _) = objective(&next, Some(&student), &env, &times, Terms::ALL, None).unwrap();
        assert!(v1.total < v0.total);
    }

    #[test]
    fn estimated_gradient_is_unbiased() {
        let (ctx, teacher) = two_bit(4);
        for cv in [false, true] {
            let mut cfg = loss(true, ReferenceSource::DataForward);
            cfg.use_control_variates = cv;
            cfg.estimator.samples = 64;
            let exact_env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap();
            let env = TrainEnv::new(&ctx, &teacher, &cfg).unwrap().with_gradient_mode(GradientMode::Estimated);
            let student = random_student(&teacher, 2, 3, false);
            let times = TimeSelection {
                consis: vec![(2, 3, 1.0)],
                ..Default::default()
            };
            let terms = Terms::only("consis").unwrap();
            let (_, exact) = objective(&student, None, &exact_env, &times, terms, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let reps = 2000;
            let mut mean = vec![0.0; exact.logits.len()];
            for _ in 0..reps {
                let (_, g) = objective(&student, None, &env, &times, terms, Some(&mut rng)).unwrap();
                for (m, v) in mean.iter_mut().zip(&g.logits) {
                    *m += v / reps as f64;
                }
            }
            let err: f64 = mean.iter().zip(&exact.logits).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = exact.logits.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 0.05 * scale, "cv={cv}: {err} vs {scale}");
        }
    }

    #[test]
    fn zero_iterations_is_identity_and_training_is_deterministic() {
        let (ctx, teacher) = two_bit(4);
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap();
        let student = init_student(&teacher, 2, &cfg).unwrap();
        let (out, trace) = train(&student, &env, &cfg).unwrap();
        assert_eq!(out, student);
        assert!(trace.iterations.is_empty() && trace.evals.len() == 1);

        let cfg = TrainConfig {
            iterations: 30,
            eval_every: 10,
            ..Default::default()
        };
        let (a, ta) = train(&student, &env, &cfg).unwrap();
        let (b, tb) = train(&student, &env, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.iterations, tb.iterations);
        assert_eq!(ta.evals, tb.evals);
        assert_eq!(ta.evals.len(), 4);
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let (ctx, teacher) = two_bit(4);
        let cfg = TrainConfig {
            learning_rate: 1e3,
            momentum: 0.0,
            iterations: 400,
            time_law: TimeLaw::FullGrid,
            loss: LossConfig {
                alpha: AlphaSchedule::Zero,
                gap: GapSchedule::Fixed { value: 0.01 },
                ..Default::default()
            },
            ..Default::default()
        };
        let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut student = random_student(&teacher, 2, 0, false);
        for l in student.logits_mut() {
            *l += 0.1 * (rng.random::<f64>() - 0.5);
        }
        let mut trace = TrainTrace::default();
        match train_with_trace(&mut student, &env, &cfg, &mut trace) {
            Err(Error::Diverged { iterations, .. }) => assert_eq!(trace.iterations.len(), iterations),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mixture_teacher_round() {
        let (ctx, teacher) = two_bit(4);
        let cfg = TrainConfig {
            iterations: 20,
            rounds: 2,
            time_law: TimeLaw::FullGrid,
            ..Default::default()
        };
        let student = init_student(&teacher, 2, &cfg).unwrap();
        let (_, traces) = iterated_di4c(&ctx, &teacher, &student, &cfg).unwrap();
        assert_eq!(traces.len(), 2);
        let one = TrainConfig { rounds: 1, ..cfg.clone() };
        let (r1, _) = iterated_di4c(&ctx, &teacher, &student, &one).unwrap();
        let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap();
        let (t1, _) = train(&student, &env, &one).unwrap();
        assert_eq!(r1, t1);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        TrainTrace::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "iteration,total,distil,consis,corr,marginal,grad_norm");
    }
}
