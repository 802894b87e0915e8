//! Ancestral, τ-leaping and confidence-based masked samplers.
//!
//! Every chain owns a ChaCha stream `(seed, chain index)`, so results do not
//! depend on the thread count.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{sample_categorical, Denoiser, MixtureKernel};
use crate::dist::{push, JointDistribution, StateSpace};
use crate::error::{Error, Result};
use crate::forward::MaskSchedule;
use crate::posterior::{PosteriorContext, ReverseRate};

const GUMBEL_CLAMP: f64 = 1e-12;
const CFG_FLOOR: f64 = 1e-30;

pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::arg("need at least two strictly increasing times"));
    }
    Ok(())
}

/// One chain `x_{t_N} → … → x_{t_0}`; `trajectory[0]` is the initial state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRun {
    pub seed: u64,
    pub chain: usize,
    pub trajectory: Vec<usize>,
}

impl SampleRun {
    pub fn final_state(&self) -> usize {
        *self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Samples and the empirical law of their final states.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub times: Vec<f64>,
    pub runs: Vec<SampleRun>,
}

impl SampleSet {
    pub fn empirical(&self, space: StateSpace) -> Result<JointDistribution> {
        let mut counts = vec![0.0; space.size()];
        for r in &self.runs {
            counts[r.final_state()] += 1.0;
        }
        JointDistribution::from_weights(space, counts)
    }

    /// One row per sample: chain index then the coordinates of the final state.
    pub fn write_csv<W: Write>(&self, space: StateSpace, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string()];
        header.extend((0..space.num_dims()).map(|d| format!("x{d}")));
        w.write_record(&header)?;
        for r in &self.runs {
            let mut row = vec![r.chain.to_string()];
            row.extend(space.decode(r.final_state()).iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact law of the ancestral chain over `times`, started from `prior` at the last time.
pub fn ancestral_law(
    model: &dyn Denoiser,
    ctx: &PosteriorContext,
    times: &[f64],
    prior: &JointDistribution,
) -> Result<JointDistribution> {
    check_times(times)?;
    let mut law = prior.clone();
    for w in times.windows(2).rev() {
        law = push(&model.denoiser_kernel(ctx, w[0], w[1])?, &law)?;
    }
    Ok(law)
}

/// Stochastic ancestral sampling; one λ per step per chain.
pub fn ancestral_sample(
    model: &dyn Denoiser,
    ctx: &PosteriorContext,
    times: &[f64],
    prior: &JointDistribution,
    count: usize,
    seed: u64,
) -> Result<SampleSet> {
    check_times(times)?;
    prior.space().check_same(&model.space())?;
    let kernels: Vec<MixtureKernel> = times
        .windows(2)
        .rev()
        .map(|w| model.mixture_kernel(ctx, w[0], w[1]))
        .collect::<Result<_>>()?;
    let runs = (0..count)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(seed, chain);
            let mut x = sample_categorical(&mut rng, prior.probs());
            let mut trajectory = Vec::with_capacity(kernels.len() + 1);
            trajectory.push(x);
            for k in &kernels {
                x = k.column(x).sample(&mut rng).1;
                trajectory.push(x);
            }
            SampleRun { seed, chain, trajectory }
        })
        .collect();
    Ok(SampleSet {
        times: times.to_vec(),
        runs,
    })
}

/// Counts steps whose jump probabilities had to be renormalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TauLeapStats {
    pub steps: usize,
    pub overflows: usize,
}

/// Per-dimension jump distributions of one τ-leap step from `x`: `[d][v]`.
fn tau_leap_jumps(rate: &ReverseRate, space: StateSpace, x: usize, eps: f64) -> Result<(Vec<f64>, bool)> {
    if !rate.defined.get(x).copied().unwrap_or(false) {
        return Err(Error::Conditioning(format!("reverse rate undefined at state {x}")));
    }
    let s = space.states_per_dim();
    let mut out = vec![0.0; space.num_dims() * s];
    let mut overflow = false;
    for d in 0..space.num_dims() {
        let row = &mut out[d * s..(d + 1) * s];
        let here = space.coord(x, d);
        let mut mass = 0.0;
        for (v, p) in row.iter_mut().enumerate() {
            if v != here {
                *p = eps * rate.matrix[(space.with_coord(x, d, v), x)].max(0.0);
                mass += *p;
            }
        }
        if mass > 1.0 {
            overflow = true;
            row.iter_mut().for_each(|p| *p /= mass);
            mass = 1.0;
        }
        row[here] = 1.0 - mass;
    }
    Ok((out, overflow))
}

/// One τ-leap step `x_t → x_{t-ε}` with independent per-dimension jumps.
pub fn tau_leap_step<R: Rng + ?Sized>(
    rate: &ReverseRate,
    space: StateSpace,
    x: usize,
    eps: f64,
    rng: &mut R,
    stats: &mut TauLeapStats,
) -> Result<usize> {
    if !(eps >= 0.0) {
        return Err(Error::arg("step must be >= 0"));
    }
    let (jumps, overflow) = tau_leap_jumps(rate, space, x, eps)?;
    stats.steps += 1;
    stats.overflows += usize::from(overflow);
    let s = space.states_per_dim();
    let mut y = 0;
    for d in 0..space.num_dims() {
        y = y * s + sample_categorical(rng, &jumps[d * s..(d + 1) * s]);
    }
    Ok(y)
}

/// Exact law of one τ-leap step from `x`.
pub fn tau_leap_step_law(rate: &ReverseRate, space: StateSpace, x: usize, eps: f64) -> Result<Vec<f64>> {
    let (jumps, _) = tau_leap_jumps(rate, space, x, eps)?;
    let s = space.states_per_dim();
    Ok((0..space.size())
        .map(|y| (0..space.num_dims()).map(|d| jumps[d * s + space.coord(y, d)]).product())
        .collect())
}

/// τ-leaping with the true reverse rate at each grid time, started from `prior`.
pub fn tau_leap_sample(
    ctx: &PosteriorContext,
    times: &[f64],
    prior: &JointDistribution,
    count: usize,
    seed: u64,
) -> Result<(SampleSet, TauLeapStats)> {
    check_times(times)?;
    let space = ctx.space();
    let rates: Vec<(ReverseRate, f64)> = times
        .windows(2)
        .rev()
        .map(|w| Ok((ctx.reverse_rate(w[1])?, w[1] - w[0])))
        .collect::<Result<_>>()?;
    let results: Vec<(SampleRun, TauLeapStats)> = (0..count)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(seed, chain);
            let mut stats = TauLeapStats::default();
            let mut x = sample_categorical(&mut rng, prior.probs());
            let mut trajectory = vec![x];
            for (rate, eps) in &rates {
                x = tau_leap_step(rate, space, x, *eps, &mut rng, &mut stats)?;
                trajectory.push(x);
            }
            Ok((SampleRun { seed, chain, trajectory }, stats))
        })
        .collect::<Result<_>>()?;
    let mut stats = TauLeapStats::default();
    let runs = results
        .into_iter()
        .map(|(r, s)| {
            stats.steps += s.steps;
            stats.overflows += s.overflows;
            r
        })
        .collect();
    Ok((
        SampleSet {
            times: times.to_vec(),
            runs,
        },
        stats,
    ))
}

/// Exact law of τ-leaping over `times` from `prior` (dense).
pub fn tau_leap_law(ctx: &PosteriorContext, times: &[f64], prior: &JointDistribution) -> Result<JointDistribution> {
    check_times(times)?;
    let space = ctx.space();
    let mut law = prior.probs().to_vec();
    for w in times.windows(2).rev() {
        let rate = ctx.reverse_rate(w[1])?;
        let mut next = vec![0.0; space.size()];
        for (x, &p) in law.iter().enumerate().filter(|(_, &p)| p > 0.0) {
            for (y, q) in tau_leap_step_law(&rate, space, x, w[1] - w[0])?.into_iter().enumerate() {
                next[y] += p * q;
            }
        }
        law = next;
    }
    JointDistribution::from_weights(space, law)
}

/// Tokens unmasked at each step, in execution order (`t_N → t_{N-1}` first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    counts: Vec<usize>,
}

impl UnmaskSchedule {
    /// `n_i = round(D m_{t_i}) − round(D m_{t_{i−1}})` (ties to even) on `t_i = i/N`;
    /// zero counts are raised to 1 and the surplus is taken from the final steps.
    pub fn new(schedule: MaskSchedule, dims: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > dims {
            return Err(Error::arg(format!("need 1 <= N <= D, got N={steps}, D={dims}")));
        }
        let masked = |i: usize| (dims as f64 * schedule.mask_prob(i as f64 / steps as f64)).round_ties_even() as i64;
        let mut counts: Vec<i64> = (1..=steps).rev().map(|i| masked(i) - masked(i - 1)).collect();
        let mut surplus = 0;
        for c in counts.iter_mut() {
            if *c < 1 {
                surplus += 1 - *c;
                *c = 1;
            }
        }
        for c in counts.iter_mut().rev() {
            let take = surplus.min(*c - 1);
            *c -= take;
            surplus -= take;
        }
        debug_assert_eq!(surplus, 0);
        Ok(Self {
            counts: counts.into_iter().map(|c| c as usize).collect(),
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Gumbel scale `c_gb(t) = 4.5 (u − 1/N) / (1 − 1/N)` on normalized time `u`.
pub fn gumbel_scale(u: f64, steps: usize) -> f64 {
    if steps <= 1 {
        return 0.0;
    }
    let h = 1.0 / steps as f64;
    4.5 * (u - h) / (1.0 - h)
}

pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

/// One confidence-based unmasking step on coordinates `x`.
///
/// `probs` holds `p^d_{0|t}(·|x_t)` as `[d][a]`; the mask token gets no mass.
pub fn confidence_sample_step<R: Rng + ?Sized>(
    probs: &[f64],
    x: &[usize],
    mask: usize,
    n_unmask: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let dims = x.len();
    if dims == 0 || !probs.len().is_multiple_of(dims) || mask >= probs.len() / dims {
        return Err(Error::arg("probability table does not match the state"));
    }
    let states = probs.len() / dims;
    let mut row = vec![0.0; states];
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for d in (0..dims).filter(|&d| x[d] == mask) {
        row.copy_from_slice(&probs[d * states..(d + 1) * states]);
        row[mask] = 0.0;
        let z: f64 = row.iter().sum();
        if !(z > 0.0) {
            return Err(Error::Degenerate(format!("no unmasked mass in dimension {d}")));
        }
        row.iter_mut().for_each(|p| *p /= z);
        let v = sample_categorical(rng, &row);
        let noise = if scale != 0.0 { scale * gumbel(rng) } else { 0.0 };
        candidates.push((row[v].ln() + noise, d, v));
    }
    // Stable: equal confidences keep the lower dimension first.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = x.to_vec();
    for &(_, d, v) in candidates.iter().take(n_unmask) {
        out[d] = v;
    }
    Ok(out)
}

/// Geometric guidance `p ∝ cond^{1+w} uncond^{−w}` per dimension (`[d][a]` tables).
pub fn cfg_combine(cond: &[f64], uncond: &[f64], states: usize, w: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() || states == 0 || !cond.len().is_multiple_of(states) {
        return Err(Error::arg("guidance tables must match"));
    }
    if w == 0.0 {
        return Ok(cond.to_vec());
    }
    let mut out: Vec<f64> = cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| {
            if c <= 0.0 {
                0.0
            } else {
                ((1.0 + w) * c.ln() - w * u.max(CFG_FLOOR).ln()).exp()
            }
        })
        .collect();
    for chunk in out.chunks_mut(states) {
        let max = chunk.iter().copied().fold(0.0, f64::max);
        if max > 0.0 && max.is_finite() {
            let z: f64 = chunk.iter().sum();
            chunk.iter_mut().for_each(|p| *p /= z);
        } else {
            return Err(Error::Degenerate("guided distribution is not normalizable".into()));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgConfig {
    pub w_cfg: f64,
}

impl CfgConfig {
    /// `w(t) = w_cfg (1 − u) N / (N − 1)` on normalized time `u`; 0 for `N = 1`.
    pub fn weight(&self, u: f64, steps: usize) -> f64 {
        if steps <= 1 {
            return 0.0;
        }
        (self.w_cfg * (1.0 - u) * steps as f64 / (steps - 1) as f64).max(0.0)
    }
}

/// Confidence-based masked generation on the grid `t_i = iT/N`, starting fully masked.
pub fn confidence_sample(
    model: &dyn Denoiser,
    ctx: &PosteriorContext,
    schedule: &UnmaskSchedule,
    guidance: Option<(&dyn Denoiser, CfgConfig)>,
    count: usize,
    seed: u64,
) -> Result<SampleSet> {
    let fwd = ctx.forward();
    if !fwd.is_masked() {
        return Err(Error::Capability("confidence sampling needs a masked process".into()));
    }
    let space = ctx.space();
    let (dims, states, mask) = (space.num_dims(), space.states_per_dim(), fwd.mask_token());
    if schedule.total() != dims {
        return Err(Error::arg("unmask schedule does not cover every dimension"));
    }
    let n = schedule.steps();
    let horizon = fwd.horizon();
    let times: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
    let kernels: Vec<(MixtureKernel, Option<MixtureKernel>)> = (1..=n)
        .rev()
        .map(|i| {
            let cond = model.mixture_kernel(ctx, 0.0, times[i])?;
            let uncond = guidance.map(|(m, _)| m.mixture_kernel(ctx, 0.0, times[i])).transpose()?;
            Ok((cond, uncond))
        })
        .collect::<Result<_>>()?;
    let start = space.index(&vec![mask; dims]);
    let runs = (0..count)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(seed, chain);
            let mut coords = vec![mask; dims];
            let mut trajectory = vec![start];
            for (step, (cond, uncond)) in kernels.iter().enumerate() {
                let i = n - step;
                let u = i as f64 / n as f64;
                let x = space.index(&coords);
                let col = cond.column(x);
                let k = sample_categorical(&mut rng, col.weights());
                let mut probs: Vec<f64> = (0..dims).flat_map(|d| col.factor(k, d).to_vec()).collect();
                if let (Some(un), Some((_, cfg))) = (uncond, guidance) {
                    let ucol = un.column(x);
                    let ku = k.min(ucol.num_components() - 1);
                    let up: Vec<f64> = (0..dims).flat_map(|d| ucol.factor(ku, d).to_vec()).collect();
                    probs = cfg_combine(&probs, &up, states, cfg.weight(u, n))?;
                }
                coords = confidence_sample_step(&probs, &coords, mask, schedule.counts()[step], gumbel_scale(u, n), &mut rng)?;
                trajectory.push(space.index(&coords));
            }
            Ok(SampleRun { seed, chain, trajectory })
        })
        .collect::<Result<_>>()?;
    Ok(SampleSet { times, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{fit_product_to_oracle, AnalyticalDenoiser, ExactPosteriorDenoiser, TimeGrid};
    use crate::dist::{compose, tv_distance};
    use crate::forward::FactorizedForward;

    fn two_bit() -> PosteriorContext {
        let fwd = FactorizedForward::uniform2(2).unwrap();
        let q0 = JointDistribution::new(fwd.space(), vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        PosteriorContext::new(fwd, q0).unwrap()
    }

    fn masked_ctx(dims: usize) -> PosteriorContext {
        let space = StateSpace::new(3, dims).unwrap();
        let fwd = FactorizedForward::masked(space, MaskSchedule::Linear, 1.0).unwrap();
        // Data lives off the mask token and is correlated.
        let mut w = vec![0.0; space.size()];
        w[space.index(&vec![0; dims])] = 0.5;
        w[space.index(&vec![1; dims])] = 0.3;
        w[space.index(&(0..dims).map(|d| d % 2).collect::<Vec<_>>())] += 0.2;
        let q0 = JointDistribution::from_weights(space, w).unwrap();
        PosteriorContext::new(fwd, q0).unwrap()
    }

    #[test]
    fn exact_single_step_recovers_data() {
        let ctx = two_bit();
        let grid = TimeGrid::uniform(1, 1.0).unwrap();
        let model = ExactPosteriorDenoiser::new(ctx.space(), grid);
        let law = ancestral_law(&model, &ctx, &[0.0, 1.0], &ctx.marginal(1.0).unwrap()).unwrap();
        assert!(tv_distance(&law, ctx.data()).unwrap() < 1e-12);
    }

    #[test]
    fn dense_mode_equals_composition() {
        let ctx = two_bit();
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let teacher = fit_product_to_oracle(&ctx, &grid).unwrap();
        let t = grid.times();
        let prior = ctx.marginal(1.0).unwrap();
        let law = ancestral_law(&teacher, &ctx, t, &prior).unwrap();
        let k = compose(
            &teacher.denoiser_kernel(&ctx, t[0], t[1]).unwrap(),
            &compose(
                &teacher.denoiser_kernel(&ctx, t[1], t[2]).unwrap(),
                &teacher.denoiser_kernel(&ctx, t[2], t[3]).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        let direct = push(&k, &prior).unwrap();
        assert!(law.probs().iter().zip(direct.probs()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn stochastic_mode_matches_dense_law() {
        let ctx = two_bit();
        let grid = TimeGrid::uniform(4, 1.0).unwrap();
        let model = AnalyticalDenoiser::new(ctx.space(), grid.clone());
        let prior = ctx.marginal(1.0).unwrap();
        let exact = ancestral_law(&model, &ctx, grid.times(), &prior).unwrap();
        let m = 100_000;
        let set = ancestral_sample(&model, &ctx, grid.times(), &prior, m, 3).unwrap();
        let emp = set.empirical(ctx.space()).unwrap();
        for (p, q) in exact.probs().iter().zip(emp.probs()) {
            let se = (p * (1.0 - p) / m as f64).sqrt();
            assert!((p - q).abs() < 4.0 * se + 1e-12, "{p} vs {q}");
        }
        assert!(set.runs.iter().all(|r| r.trajectory.len() == 5));
        let again = ancestral_sample(&model, &ctx, grid.times(), &prior, 50, 3).unwrap();
        assert_eq!(again.runs[..], set.runs[..50]);
    }

    #[test]
    fn tau_leap_small_step_matches_generator() {
        let ctx = two_bit();
        let space = ctx.space();
        let t = 0.5;
        let rate = ctx.reverse_rate(t).unwrap();
        let mut stats = TauLeapStats::default();
        let mut rng = chain_rng(0, 0);
        assert_eq!(tau_leap_step(&rate, space, 2, 0.0, &mut rng, &mut stats).unwrap(), 2);
        for eps in [1e-2, 1e-3] {
            let law = tau_leap_step_law(&rate, space, 1, eps).unwrap();
            for y in 0..4 {
                let first = f64::from(u8::from(y == 1)) + eps * rate.matrix[(y, 1)];
                assert!((law[y] - first).abs() < 10.0 * eps * eps, "eps={eps} y={y}");
            }
        }
        assert_eq!(stats.overflows, 0);
    }

    #[test]
    fn tau_leap_overflow_is_counted() {
        let ctx = two_bit();
        let rate = ctx.reverse_rate(0.05).unwrap();
        let mut stats = TauLeapStats::default();
        let mut rng = chain_rng(0, 0);
        tau_leap_step(&rate, ctx.space(), 1, 100.0, &mut rng, &mut stats).unwrap();
        assert_eq!(stats.overflows, 1);
    }

    #[test]
    fn tau_leap_law_matches_samples() {
        let ctx = two_bit();
        let times: Vec<f64> = (0..=4).map(|i| 0.1 + 0.225 * i as f64).collect();
        let prior = ctx.marginal(1.0).unwrap();
        let exact = tau_leap_law(&ctx, &times, &prior).unwrap();
        let m = 50_000;
        let (set, _) = tau_leap_sample(&ctx, &times, &prior, m, 9).unwrap();
        let emp = set.empirical(ctx.space()).unwrap();
        for (p, q) in exact.probs().iter().zip(emp.probs()) {
            assert!((p - q).abs() < 4.0 * (p * (1.0 - p) / m as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn unmask_schedules() {
        let s = UnmaskSchedule::new(MaskSchedule::Arccos, 256, 8).unwrap();
        assert_eq!(s.total(), 256);
        assert!(s.counts().iter().all(|&c| c >= 1));
        // Linear with D = N: one token per step.
        assert_eq!(UnmaskSchedule::new(MaskSchedule::Linear, 4, 4).unwrap().counts(), &[1, 1, 1, 1]);
        // Ties to even: D m = 2.5 rounds to 2.
        let s = UnmaskSchedule::new(MaskSchedule::Linear, 5, 2).unwrap();
        assert_eq!(s.counts(), &[3, 2]);
        let s = UnmaskSchedule::new(MaskSchedule::Cosine, 3, 3).unwrap();
        assert_eq!(s.total(), 3);
        assert!(s.counts().iter().all(|&c| c >= 1));
        assert!(UnmaskSchedule::new(MaskSchedule::Linear, 2, 3).is_err());
    }

    #[test]
    fn confidence_step_rules() {
        let mut rng = chain_rng(1, 0);
        // Deterministic model: top two log-probabilities win, ties to the lower index.
        let probs = vec![
            0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.5, 0.5, 0.0,
        ];
        let x = vec![2, 2, 2, 2];
        let out = confidence_sample_step(&probs, &x, 2, 2, 0.0, &mut rng).unwrap();
        assert_eq!(out, vec![1, 0, 2, 2]);
        let all = confidence_sample_step(&probs, &x, 2, 10, 0.0, &mut rng).unwrap();
        assert!(all.iter().all(|&v| v != 2));
        // Unmasked coordinates never change.
        let partial = vec![0, 2, 2, 1];
        let next = confidence_sample_step(&probs, &partial, 2, 1, 3.0, &mut rng).unwrap();
        assert_eq!((next[0], next[3]), (0, 1));
        assert_eq!(next.iter().filter(|&&v| v == 2).count(), 1);
    }

    #[test]
    fn gumbel_and_guidance() {
        assert_eq!(gumbel_scale(1.0 / 8.0, 8), 0.0);
        assert!((gumbel_scale(1.0, 8) - 4.5).abs() < 1e-15);
        let out = cfg_combine(&[0.8, 0.2], &[0.5, 0.5], 2, 1.0).unwrap();
        assert!((out[0] - 0.941_176_470_588_235_3).abs() < 1e-15 && (out[1] - 0.058_823_529_411_764_7).abs() < 1e-15);
        assert_eq!(cfg_combine(&[0.8, 0.2], &[0.5, 0.5], 2, 0.0).unwrap(), vec![0.8, 0.2]);
        let same = cfg_combine(&[0.3, 0.7], &[0.3, 0.7], 2, 2.5).unwrap();
        assert!((same[0] - 0.3).abs() < 1e-15);
        assert!(cfg_combine(&[0.5, 0.5], &[0.0, 1.0], 2, 1.0).unwrap()[0] > 0.99);
        let c = CfgConfig { w_cfg: 2.0 };
        assert!((c.weight(1.0 / 4.0, 4) - 2.0).abs() < 1e-15);
        assert_eq!(c.weight(1.0, 4), 0.0);
    }

    #[test]
    fn masked_generation_never_remasks() {
        let ctx = masked_ctx(3);
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let model = fit_product_to_oracle(&ctx, &grid).unwrap();
        let schedule = UnmaskSchedule::new(MaskSchedule::Linear, 3, 3).unwrap();
        let cfg = CfgConfig { w_cfg: 1.0 };
        let set = confidence_sample(&model, &ctx, &schedule, Some((&model as &dyn Denoiser, cfg)), 500, 4).unwrap();
        let space = ctx.space();
        for r in &set.runs {
            let mut fixed = [None; 3];
            for (step, &x) in r.trajectory.iter().enumerate() {
                let c = space.decode(x);
                assert_eq!(c.iter().filter(|&&v| v == 2).count(), 3 - step);
                for d in 0..3 {
                    if let Some(v) = fixed[d] {
                        assert_eq!(c[d], v);
                    } else if c[d] != 2 {
                        fixed[d] = Some(c[d]);
                    }
                }
            }
        }
    }
}
