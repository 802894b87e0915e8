//! Factorized continuous-time forward processes.
//!
//! Each dimension evolves independently under its own generator, so the
//! joint transition kernel is the Kronecker product of per-dimension
//! matrices (dimension 0 outermost, matching [`StateSpace`] indexing).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dist::{DenseKernel, JointDistribution, StateSpace};
use crate::error::{Error, Result};

/// Slack allowed when validating times against `[0, T]`.
pub const TIME_TOL: f64 = 1e-12;
const RATE_TOL: f64 = 1e-10;

/// Generator `Q(y, x)` of a single-dimension chain; column `x` is the from-state.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    q: DMatrix<f64>,
}

impl RateMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() < 2 {
            return Err(Error::arg("rate matrix must be square with size >= 2"));
        }
        for x in 0..q.ncols() {
            let mut sum = 0.0;
            for y in 0..q.nrows() {
                let v = q[(y, x)];
                if !v.is_finite() || (y != x && v < 0.0) {
                    return Err(Error::Validation(format!("rate Q({y},{x}) = {v} is invalid")));
                }
                sum += v;
            }
            if sum.abs() > RATE_TOL * (1.0 + q[(x, x)].abs()) {
                return Err(Error::Validation(format!("rate column {x} sums to {sum}, not 0")));
            }
        }
        Ok(Self { q })
    }

    /// `Q(y, x) = 1/n - δ_{yx}`: jump to a uniformly drawn state at unit rate.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, n, |y, x| {
            1.0 / n as f64 - if y == x { 1.0 } else { 0.0 }
        }))
    }

    /// Birth-death chain on an ordinal alphabet with rate `rate` to each neighbour.
    pub fn nearest_neighbor(n: usize, rate: f64) -> Result<Self> {
        let mut q = DMatrix::zeros(n, n);
        for x in 0..n {
            if x > 0 {
                q[(x - 1, x)] = rate;
            }
            if x + 1 < n {
                q[(x + 1, x)] = rate;
            }
            q[(x, x)] = -q.column(x).sum();
        }
        Self::new(q)
    }

    /// Every non-absorbing state jumps to state `n-1` at rate `rate`.
    pub fn absorbing(n: usize, rate: f64) -> Result<Self> {
        let mut q = DMatrix::zeros(n, n);
        for x in 0..n - 1 {
            q[(n - 1, x)] = rate;
            q[(x, x)] = -rate;
        }
        Self::new(q)
    }

    pub fn size(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }
}

/// Time-varying scale `β(t)` of a scheduled generator, with cumulative `B(t) = ∫_0^t β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RateSchedule {
    Constant { beta: f64 },
    Linear { beta0: f64, beta1: f64 },
    /// `β(t) = a·ln(b)·b^t`.
    Exponential { a: f64, b: f64 },
}

impl RateSchedule {
    pub fn beta(&self, t: f64) -> f64 {
        match *self {
            RateSchedule::Constant { beta } => beta,
            RateSchedule::Linear { beta0, beta1 } => beta0 + beta1 * t,
            RateSchedule::Exponential { a, b } => a * b.ln() * b.powf(t),
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            RateSchedule::Constant { beta } => beta * t,
            RateSchedule::Linear { beta0, beta1 } => beta0 * t + 0.5 * beta1 * t * t,
            RateSchedule::Exponential { a, b } => a * (b.powf(t) - 1.0),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        let ok = match *self {
            RateSchedule::Constant { beta } => beta >= 0.0,
            RateSchedule::Linear { beta0, beta1 } => beta0 >= 0.0 && beta0 + beta1 * horizon >= 0.0,
            RateSchedule::Exponential { a, b } => a >= 0.0 && b > 0.0 && (a == 0.0 || b >= 1.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("rate schedule {self:?} is negative on [0, T]")))
        }
    }
}

/// Masking probability `m(t)` of absorbing diffusion, on normalized time `u = t/T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSchedule {
    /// `m = u` (log-linear noise).
    Linear,
    /// `m = 2·arccos(1 - u)/π`.
    Arccos,
    /// `m = 1 - cos(π u / 2)`.
    Cosine,
}

impl MaskSchedule {
    pub fn mask_prob(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let m = match self {
            MaskSchedule::Linear => u,
            MaskSchedule::Arccos => 2.0 * (1.0 - u).acos() / std::f64::consts::PI,
            MaskSchedule::Cosine => 1.0 - (0.5 * std::f64::consts::PI * (1.0 - u)).sin(),
        };
        m.clamp(0.0, 1.0)
    }

    /// `σ(u) = -ln(1 - m(u))`; infinite once fully masked.
    pub fn sigma(&self, u: f64) -> f64 {
        -(1.0 - self.mask_prob(u)).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DimGenerator {
    Homogeneous(RateMatrix),
    Scheduled { rate: RateMatrix, schedule: RateSchedule },
    /// Absorbing diffusion into the last state (the mask token).
    Masked(MaskSchedule),
    /// Two-state uniform diffusion evaluated in closed form.
    UniformClosedForm,
}

impl DimGenerator {
    fn has_rate(&self) -> bool {
        !matches!(self, DimGenerator::Masked(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedForward {
    space: StateSpace,
    generators: Vec<DimGenerator>,
    horizon: f64,
}

impl FactorizedForward {
    pub fn new(space: StateSpace, generators: Vec<DimGenerator>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::arg("horizon T must be positive"));
        }
        if generators.len() != space.num_dims() {
            return Err(Error::arg(format!(
                "{} generators for {} dimensions",
                generators.len(),
                space.num_dims()
            )));
        }
        let s = space.states_per_dim();
        for g in &generators {
            match g {
                DimGenerator::Homogeneous(q) if q.size() != s => {
                    return Err(Error::arg("rate matrix size differs from |S|"))
                }
                DimGenerator::Scheduled { rate, schedule } => {
                    if rate.size() != s {
                        return Err(Error::arg("rate matrix size differs from |S|"));
                    }
                    schedule.validate(horizon)?;
                }
                DimGenerator::UniformClosedForm if s != 2 => {
                    return Err(Error::arg("closed-form uniform diffusion requires |S| = 2"))
                }
                _ => {}
            }
        }
        Ok(Self {
            space,
            generators,
            horizon,
        })
    }

    /// Same generator on every dimension.
    pub fn shared(space: StateSpace, generator: DimGenerator, horizon: f64) -> Result<Self> {
        Self::new(space, vec![generator; space.num_dims()], horizon)
    }

    /// Two-state uniform diffusion on `{0,1}^D` with unit horizon.
    pub fn uniform2(num_dims: usize) -> Result<Self> {
        Self::shared(StateSpace::new(2, num_dims)?, DimGenerator::UniformClosedForm, 1.0)
    }

    /// Absorbing diffusion on `S^D`; state `|S|-1` is the mask token.
    pub fn masked(space: StateSpace, schedule: MaskSchedule, horizon: f64) -> Result<Self> {
        Self::shared(space, DimGenerator::Masked(schedule), horizon)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn generators(&self) -> &[DimGenerator] {
        &self.generators
    }

    pub fn generator(&self, d: usize) -> &DimGenerator {
        &self.generators[d]
    }

    pub fn is_masked(&self) -> bool {
        self.generators.iter().all(|g| matches!(g, DimGenerator::Masked(_)))
    }

    pub fn mask_token(&self) -> usize {
        self.space.states_per_dim() - 1
    }

    /// Masking probability of dimension `d` at time `t`, if it is masked.
    pub fn mask_prob(&self, d: usize, t: f64) -> Option<f64> {
        match &self.generators[d] {
            DimGenerator::Masked(m) => Some(m.mask_prob(t / self.horizon)),
            _ => None,
        }
    }

    /// Clamps `s ≤ t` into `[0, T]` or reports why the pair is invalid.
    pub fn check_times(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        if !(s.is_finite() && t.is_finite()) {
            return Err(Error::arg("times must be finite"));
        }
        if s < -TIME_TOL || t > self.horizon + TIME_TOL || s > t + TIME_TOL {
            return Err(Error::arg(format!(
                "need 0 <= s <= t <= T, got s={s}, t={t}, T={}",
                self.horizon
            )));
        }
        let s = s.clamp(0.0, self.horizon);
        let t = t.clamp(s, self.horizon);
        Ok((s, t))
    }

    /// `q^d_{t|s}` as an `|S|×|S|` column-stochastic matrix.
    pub fn transition_matrix(&self, d: usize, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.space.check_dim(d)?;
        let (s, t) = self.check_times(s, t)?;
        let n = self.space.states_per_dim();
        if s == t {
            return Ok(DMatrix::identity(n, n));
        }
        let m = match &self.generators[d] {
            DimGenerator::Homogeneous(q) => expm_stochastic(q.matrix() * (t - s)),
            DimGenerator::Scheduled { rate, schedule } => {
                let db = schedule.cumulative(t) - schedule.cumulative(s);
                expm_stochastic(rate.matrix() * db)
            }
            DimGenerator::UniformClosedForm => {
                let e = (-(t - s)).exp();
                let stay = 0.5 * (1.0 + e);
                DMatrix::from_fn(2, 2, |y, x| if y == x { stay } else { 1.0 - stay })
            }
            DimGenerator::Masked(sched) => {
                let ms = sched.mask_prob(s / self.horizon);
                let mt = sched.mask_prob(t / self.horizon);
                if ms >= 1.0 {
                    return Err(Error::Degenerate(format!(
                        "dimension {d} is fully masked at s={s}; q(t|s) undefined"
                    )));
                }
                let jump = ((mt - ms) / (1.0 - ms)).clamp(0.0, 1.0);
                let mask = n - 1;
                let mut m = DMatrix::zeros(n, n);
                for x in 0..mask {
                    m[(x, x)] = 1.0 - jump;
                    m[(mask, x)] = jump;
                }
                m[(mask, mask)] = 1.0;
                m
            }
        };
        Ok(m)
    }

    pub fn transition_matrices(&self, s: f64, t: f64) -> Result<Vec<DMatrix<f64>>> {
        (0..self.space.num_dims())
            .map(|d| self.transition_matrix(d, s, t))
            .collect()
    }

    /// Joint `q_{t|s}` over `S^D`.
    pub fn joint_transition_kernel(&self, s: f64, t: f64) -> Result<DenseKernel> {
        let mats = self.transition_matrices(s, t)?;
        Ok(DenseKernel::from_raw(self.space, kron_all(&mats)))
    }

    /// Instantaneous per-dimension generator `Q^d_t`.
    pub fn dim_rate(&self, d: usize, t: f64) -> Result<DMatrix<f64>> {
        self.space.check_dim(d)?;
        self.check_times(t, t)?;
        match &self.generators[d] {
            DimGenerator::Homogeneous(q) => Ok(q.matrix().clone()),
            DimGenerator::Scheduled { rate, schedule } => Ok(rate.matrix() * schedule.beta(t)),
            DimGenerator::UniformClosedForm => Ok(RateMatrix::uniform(2)?.q),
            DimGenerator::Masked(_) => Err(Error::Capability(
                "masked schedules are defined by m(t) and expose no rate matrix".into(),
            )),
        }
    }

    /// `Q_t(y, x) = Σ_d Q^d_t(y^d, x^d) Π_{d'≠d} δ(y^{d'}, x^{d'})`.
    pub fn joint_rate(&self, t: f64) -> Result<DMatrix<f64>> {
        if let Some(d) = self.generators.iter().position(|g| !g.has_rate()) {
            return Err(Error::Capability(format!(
                "dimension {d} uses a masking schedule without a rate form"
            )));
        }
        let n = self.space.size();
        let s = self.space.states_per_dim();
        let mut out = DMatrix::zeros(n, n);
        for d in 0..self.space.num_dims() {
            let qd = self.dim_rate(d, t)?;
            for x in 0..n {
                let xd = self.space.coord(x, d);
                for yd in 0..s {
                    let y = self.space.with_coord(x, d, yd);
                    out[(y, x)] += qd[(yd, xd)];
                }
            }
        }
        Ok(out)
    }

    /// Exact `q_t = push(q_{t|0}, q_0)` without forming the joint kernel.
    pub fn marginal_at(&self, q0: &JointDistribution, t: f64) -> Result<JointDistribution> {
        self.space.check_same(&q0.space())?;
        let mats = self.transition_matrices(0.0, t)?;
        Ok(JointDistribution::from_raw(
            self.space,
            apply_per_dim(&self.space, &mats, q0.probs()),
        ))
    }
}

/// Matrix exponential with round-off negatives clipped and columns renormalized.
fn expm_stochastic(a: DMatrix<f64>) -> DMatrix<f64> {
    let mut m = a.exp();
    for mut col in m.column_iter_mut() {
        col.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = col.sum();
        col /= s;
    }
    m
}

/// `M_0 ⊗ M_1 ⊗ … ⊗ M_{D-1}`.
pub fn kron_all(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut it = mats.iter();
    let first = it.next().expect("at least one factor").clone();
    it.fold(first, |acc, m| acc.kronecker(m))
}

/// `(M_0 ⊗ … ⊗ M_{D-1}) v`, contracting one dimension at a time.
pub fn apply_per_dim(space: &StateSpace, mats: &[DMatrix<f64>], v: &[f64]) -> Vec<f64> {
    let s = space.states_per_dim();
    let mut cur = v.to_vec();
    let mut next = vec![0.0; v.len()];
    for (d, m) in mats.iter().enumerate() {
        let stride = space.stride(d);
        next.iter_mut().for_each(|x| *x = 0.0);
        for (idx, &val) in cur.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            let xd = (idx / stride) % s;
            let base = idx - xd * stride;
            for yd in 0..s {
                next[base + yd * stride] += m[(yd, xd)] * val;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// JSON description of a forward process; `D` comes from the data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub kind: ForwardKind,
    /// `rate[y][x] = Q(y, x)`; rows are destination states.
    #[serde(default)]
    pub rate: Option<Vec<Vec<f64>>>,
    /// Built-in rate family when `rate` is absent: `uniform`, `nearest-neighbor`, `absorbing`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub states: Option<usize>,
    #[serde(default)]
    pub schedule: Option<MaskSchedule>,
    #[serde(default)]
    pub beta: Option<RateSchedule>,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardKind {
    Uniform2,
    Masked,
    Homogeneous,
    Scheduled,
}

impl ForwardConfig {
    pub fn uniform2() -> Self {
        Self {
            kind: ForwardKind::Uniform2,
            rate: None,
            preset: None,
            states: None,
            schedule: None,
            beta: None,
            horizon: 1.0,
        }
    }

    /// Per-dimension alphabet size implied by the config, if any.
    pub fn states_per_dim(&self) -> Option<usize> {
        match self.kind {
            ForwardKind::Uniform2 => Some(2),
            _ => self.rate.as_ref().map(|r| r.len()).or(self.states),
        }
    }

    fn rate_matrix(&self, n: usize) -> Result<RateMatrix> {
        if let Some(rows) = &self.rate {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::arg(format!("rate must be {n}x{n}")));
            }
            return RateMatrix::new(DMatrix::from_fn(n, n, |y, x| rows[y][x]));
        }
        match self.preset.as_deref().unwrap_or("uniform") {
            "uniform" => RateMatrix::uniform(n),
            "nearest-neighbor" => RateMatrix::nearest_neighbor(n, 1.0),
            "absorbing" => RateMatrix::absorbing(n, 1.0),
            other => Err(Error::arg(format!("unknown rate preset {other:?}"))),
        }
    }

    pub fn build(&self, space: StateSpace) -> Result<FactorizedForward> {
        if let Some(n) = self.states_per_dim() {
            if n != space.states_per_dim() {
                return Err(Error::arg(format!(
                    "forward process has {n} states, data has {}",
                    space.states_per_dim()
                )));
            }
        }
        let n = space.states_per_dim();
        let generator = match self.kind {
            ForwardKind::Uniform2 => DimGenerator::UniformClosedForm,
            ForwardKind::Masked => DimGenerator::Masked(self.schedule.unwrap_or(MaskSchedule::Linear)),
            ForwardKind::Homogeneous => DimGenerator::Homogeneous(self.rate_matrix(n)?),
            ForwardKind::Scheduled => DimGenerator::Scheduled {
                rate: self.rate_matrix(n)?,
                schedule: self
                    .beta
                    .clone()
                    .ok_or_else(|| Error::arg("scheduled forward process needs `beta`"))?,
            },
        };
        FactorizedForward::shared(space, generator, self.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{compose, push};

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        let diff = (a - b).abs().max();
        assert!(diff <= tol, "max diff {diff} > {tol}");
    }

    fn all_forwards() -> Vec<FactorizedForward> {
        let s3 = StateSpace::new(3, 2).unwrap();
        vec![
            FactorizedForward::uniform2(2).unwrap(),
            FactorizedForward::shared(s3, DimGenerator::Homogeneous(RateMatrix::nearest_neighbor(3, 0.7).unwrap()), 1.0)
                .unwrap(),
            FactorizedForward::shared(
                s3,
                DimGenerator::Scheduled {
                    rate: RateMatrix::uniform(3).unwrap(),
                    schedule: RateSchedule::Linear { beta0: 0.3, beta1: 2.0 },
                },
                1.0,
            )
            .unwrap(),
            FactorizedForward::masked(s3, MaskSchedule::Linear, 1.0).unwrap(),
            FactorizedForward::masked(s3, MaskSchedule::Arccos, 1.0).unwrap(),
        ]
    }

    #[test]
    fn identity_at_equal_times() {
        for f in all_forwards() {
            let m = f.transition_matrix(0, 0.4, 0.4).unwrap();
            assert_close(&m, &DMatrix::identity(m.nrows(), m.nrows()), 0.0);
        }
    }

    #[test]
    fn uniform_closed_form_value() {
        let f = FactorizedForward::uniform2(1).unwrap();
        let m = f.transition_matrix(0, 0.0, 1.0).unwrap();
        assert!((m[(0, 0)] - 0.683_939_720_585_721).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_matrix_exponential() {
        let closed = FactorizedForward::uniform2(2).unwrap();
        let expm = FactorizedForward::shared(
            closed.space(),
            DimGenerator::Homogeneous(RateMatrix::uniform(2).unwrap()),
            1.0,
        )
        .unwrap();
        for &(s, t) in &[(0.0, 0.3), (0.2, 0.9), (0.5, 1.0)] {
            assert_close(
                closed.joint_transition_kernel(s, t).unwrap().matrix(),
                expm.joint_transition_kernel(s, t).unwrap().matrix(),
                1e-13,
            );
        }
    }

    #[test]
    fn masked_examples() {
        let f = FactorizedForward::masked(StateSpace::new(3, 1).unwrap(), MaskSchedule::Linear, 1.0).unwrap();
        let m = f.transition_matrix(0, 0.25, 0.5).unwrap();
        assert!((m[(2, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((m[(2, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(2, 2)], 1.0);
        assert_eq!(MaskSchedule::Arccos.mask_prob(1.0), 1.0);
        assert_eq!(MaskSchedule::Arccos.mask_prob(0.0), 0.0);
        assert!(f.transition_matrix(0, 1.0, 1.0).is_ok());
        assert!(matches!(f.transition_matrix(0, 0.6, 0.4), Err(Error::Argument(_))));
        assert!(matches!(f.transition_matrix(0, 0.0, 1.5), Err(Error::Argument(_))));
        assert!(MaskSchedule::Cosine.sigma(1.0).is_infinite());
    }

    #[test]
    fn joint_kernel_structure() {
        let f = FactorizedForward::uniform2(2).unwrap();
        let (s, t) = (0.2, 0.7);
        let k = f.joint_transition_kernel(s, t).unwrap();
        let stay = 0.5 * (1.0 + (-(t - s)).exp());
        assert!((k.entry(0, 0) - stay * stay).abs() < 1e-15);
        for x in 0..4 {
            assert!(k.is_column_product(x, 1e-15));
        }
        let one = FactorizedForward::uniform2(1).unwrap();
        assert_close(
            one.joint_transition_kernel(s, t).unwrap().matrix(),
            &one.transition_matrix(0, s, t).unwrap(),
            0.0,
        );
    }

    #[test]
    fn chapman_kolmogorov() {
        for f in all_forwards() {
            for &(s, u, t) in &[(0.0, 0.3, 0.8), (0.1, 0.5, 1.0), (0.45, 0.5, 0.55)] {
                let lhs = compose(
                    &f.joint_transition_kernel(u, t).unwrap(),
                    &f.joint_transition_kernel(s, u).unwrap(),
                )
                .unwrap();
                let rhs = f.joint_transition_kernel(s, t).unwrap();
                assert_close(lhs.matrix(), rhs.matrix(), 1e-9);
            }
        }
    }

    #[test]
    fn kolmogorov_forward_equation() {
        for f in all_forwards().into_iter().filter(|f| !f.is_masked()) {
            let (s, t) = (0.1, 0.6);
            let q = f.joint_rate(t).unwrap();
            let mut errs = Vec::new();
            for &h in &[1e-2, 5e-3] {
                let plus = f.joint_transition_kernel(s, t + h).unwrap();
                let minus = f.joint_transition_kernel(s, t - h).unwrap();
                let deriv = (plus.matrix() - minus.matrix()) / (2.0 * h);
                let expected = &q * f.joint_transition_kernel(s, t).unwrap().matrix();
                errs.push((deriv - &expected).abs().max() / expected.abs().max());
            }
            assert!(errs[0] < 1e-3, "{errs:?}");
            // Central differences: halving h quarters the error.
            assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
        }
    }

    #[test]
    fn joint_rate_properties() {
        let f = FactorizedForward::uniform2(2).unwrap();
        let q = f.joint_rate(0.5).unwrap();
        for x in 0..4 {
            assert!(q.column(x).sum().abs() < 1e-15);
        }
        let space = f.space();
        for x in 0..4 {
            for y in 0..4 {
                let diff = (0..2).filter(|&d| space.coord(x, d) != space.coord(y, d)).count();
                if diff >= 2 {
                    assert_eq!(q[(y, x)], 0.0);
                }
            }
        }
        let one = FactorizedForward::uniform2(1).unwrap();
        assert_close(&one.joint_rate(0.3).unwrap(), &one.dim_rate(0, 0.3).unwrap(), 0.0);

        let h = 1e-6;
        let k = f.joint_transition_kernel(0.5, 0.5 + h).unwrap();
        let fd = (k.matrix() - DMatrix::identity(4, 4)) / h;
        assert_close(&fd, &q, 1e-5);

        let m = FactorizedForward::masked(StateSpace::new(3, 2).unwrap(), MaskSchedule::Linear, 1.0).unwrap();
        assert!(matches!(m.joint_rate(0.5), Err(Error::Capability(_))));
    }

    #[test]
    fn marginal_at_examples() {
        let f = FactorizedForward::uniform2(2).unwrap();
        let q0 = JointDistribution::new(f.space(), vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(f.marginal_at(&q0, 0.0).unwrap(), q0);
        let qt = f.marginal_at(&q0, 0.4).unwrap();
        assert!((qt.prob(0) - qt.prob(3)).abs() < 1e-15);
        assert!((qt.prob(1) - qt.prob(2)).abs() < 1e-15);
        let dense = push(&f.joint_transition_kernel(0.0, 0.4).unwrap(), &q0).unwrap();
        assert!(dense.probs().iter().zip(qt.probs()).all(|(a, b)| (a - b).abs() < 1e-15));

        let space = StateSpace::new(3, 2).unwrap();
        let m = FactorizedForward::masked(space, MaskSchedule::Arccos, 1.0).unwrap();
        let p0 = JointDistribution::from_weights(space, (1..=9).map(f64::from).collect()).unwrap();
        let pt = m.marginal_at(&p0, 1.0).unwrap();
        assert!((pt.prob(space.index(&[2, 2])) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_keeps_unmasked_tokens() {
        let space = StateSpace::new(4, 2).unwrap();
        let f = FactorizedForward::masked(space, MaskSchedule::Cosine, 1.0).unwrap();
        let k = f.joint_transition_kernel(0.2, 0.7).unwrap();
        for x in 0..space.size() {
            for y in 0..space.size() {
                for d in 0..2 {
                    let (xd, yd) = (space.coord(x, d), space.coord(y, d));
                    if xd != yd && yd != 3 {
                        assert_eq!(k.entry(y, x), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"kind":"scheduled","preset":"uniform","states":3,"beta":{"type":"exponential","a":0.5,"b":4.0},"T":1.0}"#;
        let cfg: ForwardConfig = serde_json::from_str(json).unwrap();
        let f = cfg.build(StateSpace::new(3, 2).unwrap()).unwrap();
        let m = f.transition_matrix(1, 0.0, 1.0).unwrap();
        let expected = (RateMatrix::uniform(3).unwrap().matrix() * 1.5).exp();
        assert_close(&m, &expected, 1e-13);
        assert!(cfg.build(StateSpace::new(2, 2).unwrap()).is_err());

        let rate = r#"{"kind":"homogeneous","rate":[[-1.0,2.0],[1.0,-2.0]]}"#;
        let cfg: ForwardConfig = serde_json::from_str(rate).unwrap();
        let f = cfg.build(StateSpace::new(2, 1).unwrap()).unwrap();
        assert_eq!(f.dim_rate(0, 0.0).unwrap()[(0, 1)], 2.0);

        let bad = r#"{"kind":"homogeneous","rate":[[-1.0,2.0],[0.5,-2.0]]}"#;
        let cfg: ForwardConfig = serde_json::from_str(bad).unwrap();
        assert!(matches!(cfg.build(StateSpace::new(2, 1).unwrap()), Err(Error::Validation(_))));
    }

    #[test]
    fn scheduled_cumulative_is_integral() {
        for sched in [
            RateSchedule::Constant { beta: 1.3 },
            RateSchedule::Linear { beta0: 0.2, beta1: 1.5 },
            RateSchedule::Exponential { a: 0.7, b: 3.0 },
        ] {
            assert_eq!(sched.cumulative(0.0), 0.0);
            let h = 1e-5;
            let fd = (sched.cumulative(0.5 + h) - sched.cumulative(0.5 - h)) / (2.0 * h);
            assert!((fd - sched.beta(0.5)).abs() < 1e-8);
        }
    }
}
