use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use di4c_core::denoisers::{Checkpoint, Denoiser, TabularMixtureDenoiser};
use di4c_core::dist::{tv_distance, DenseKernel, JointDistribution};
use di4c_core::samplers::{ancestral_law, ancestral_sample, confidence_sample, tau_leap_law, tau_leap_sample, CfgConfig, UnmaskSchedule};
use di4c_core::theory::{convergence_study, tv_bound_audit, tv_bound, verify_suite, CheckResult, TvBoundReport};
use di4c_core::trainer::{chain_law, init_student, iterated_di4c};

use crate::config::{Experiment, ExperimentConfig, SamplerKind};
use crate::output::{CliError, OutDir};
use crate::{Args, CommandKind};

const DEFAULT_STEPS: [usize; 7] = [4, 8, 16, 32, 64, 128, 256];
const BOUND_SLACK: f64 = 1e-9;

fn load(args: &Args) -> Result<(Experiment, OutDir), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut exp = Experiment::new(config, &args.config)?;
    if let Some(seed) = args.seed.or(exp.config.seed) {
        exp.config.train.seed = seed;
        exp.config.verify.suite.seed = seed;
        exp.config.seed = Some(seed);
    }
    Ok((exp, OutDir::create(out)?))
}

fn seed(exp: &Experiment) -> u64 {
    exp.config.seed.unwrap_or(exp.config.train.seed)
}

pub fn run(kind: CommandKind, args: &Args) -> Result<(), CliError> {
    let (exp, out) = load(args)?;
    let (summary, failure) = match kind {
        CommandKind::Converge => converge(&exp, &out)?,
        CommandKind::Distill => distill(&exp, &out)?,
        CommandKind::Verify => verify(&exp, &out)?,
        CommandKind::Sample => sample(&exp, &out)?,
    };
    out.write_json("summary.json", &summary)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    out.write_json(
        "metadata.json",
        &json!({
            "command": format!("{kind:?}").to_lowercase(),
            "config": args.config.display().to_string(),
            "seed": seed(&exp),
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
            "created_unix_s": created,
        }),
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    } else {
        eprintln!("wrote results to {}", out.path().display());
    }
    match failure {
        Some(m) => Err(CliError::Assertion(m)),
        None => Ok(()),
    }
}

type Outcome = (Value, Option<String>);

fn converge(exp: &Experiment, out: &OutDir) -> Result<Outcome, CliError> {
    let spec = &exp.config.converge;
    let delta = spec.delta.unwrap_or(exp.config.grid.delta);
    let steps = if spec.steps.is_empty() { DEFAULT_STEPS.to_vec() } else { spec.steps.clone() };
    let report = convergence_study(&exp.ctx, delta, &steps)?;
    out.write_with("convergence.csv", |buf| report.write_csv(buf))?;
    let mut checks = Vec::new();
    if let Some([lo, hi]) = spec.expect_slope {
        let slope = report.slope.unwrap_or(f64::NAN);
        checks.push(check("slope", (lo..=hi).contains(&slope), slope, hi - lo));
    }
    if let Some(max) = spec.expect_max_tv {
        let worst = report.rows.iter().map(|r| r.tv).fold(0.0, f64::max);
        checks.push(check("max_tv", worst <= max, worst, max));
    }
    let failure = failed(&checks);
    let summary = json!({ "report": report, "checks": checks, "passed": failure.is_none() });
    out.write_json("convergence.json", &summary)?;
    Ok((summary, failure))
}

fn check(name: &str, passed: bool, worst: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        worst,
        tolerance,
        trials: 1,
    }
}

fn failed(checks: &[CheckResult]) -> Option<String> {
    let names: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    (!names.is_empty()).then(|| format!("failed checks: {}", names.join(", ")))
}

fn one_step_tv(model: &dyn Denoiser, exp: &Experiment) -> Result<f64, CliError> {
    let times = [exp.grid.start(), exp.grid.end()];
    Ok(tv_distance(&chain_law(model, &exp.ctx, &times)?, &*exp.ctx.marginal(exp.grid.start())?)?)
}

fn distill(exp: &Experiment, out: &OutDir) -> Result<Outcome, CliError> {
    if exp.grid.start() != 0.0 {
        return Err(CliError::Config("distillation needs a grid starting at 0".into()));
    }
    let cfg = &exp.config.train;
    let teacher = exp.teacher()?;
    let init = match &exp.config.model.init {
        Some(p) => match exp.load_checkpoint(p)? {
            Checkpoint::Mixture(m) => m,
            Checkpoint::Product(_) => return Err(CliError::Config("init checkpoint must be a mixture model".into())),
        },
        None => init_student(&teacher, exp.config.model.components, cfg)?,
    };
    let (student, traces) = if cfg.iterations == 0 {
        cfg.validate(exp.ctx.forward().horizon())?;
        (init.clone(), Vec::new())
    } else {
        iterated_di4c(&exp.ctx, &teacher, &init, cfg)?
    };
    write_checkpoint(out, "student", &Checkpoint::Mixture(student.clone()))?;
    write_checkpoint(out, "teacher", &Checkpoint::Product(teacher.clone()))?;
    for (r, trace) in traces.iter().enumerate() {
        let suffix = if traces.len() == 1 { String::new() } else { format!("_round{r}") };
        out.write_with(&format!("trace{suffix}.csv"), |b| trace.write_csv(b))?;
        out.write_with(&format!("eval{suffix}.csv"), |b| trace.write_eval_csv(b))?;
    }
    let student_tv = one_step_tv(&student, exp)?;
    let teacher_tv = one_step_tv(&teacher, exp)?;
    let teacher_grid_tv = tv_distance(&chain_law(&teacher, &exp.ctx, exp.grid.times())?, exp.ctx.data())?;
    let summary = json!({
        "components": student.num_components(),
        "rounds": traces.len(),
        "iterations": cfg.iterations,
        "student_one_step_tv": student_tv,
        "teacher_one_step_tv": teacher_tv,
        "teacher_grid_tv": teacher_grid_tv,
        "student_beats_teacher_one_step": student_tv < teacher_tv,
        "final_objective": traces.last().and_then(|t| t.iterations.last()).map(|r| r.objective.total),
    });
    Ok((summary, None))
}

fn write_checkpoint(out: &OutDir, stem: &str, ck: &Checkpoint) -> Result<(), CliError> {
    out.write(&format!("{stem}.bin"), &ck.to_bytes())?;
    out.write(&format!("{stem}.json"), ck.to_json()?.as_bytes())
}

fn audit_check(rep: &TvBoundReport, name: &str) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: rep.holds(BOUND_SLACK),
        worst: if rep.vacuous() { f64::INFINITY } else { rep.rhs - rep.lhs },
        tolerance: BOUND_SLACK,
        trials: 1,
    }
}

fn verify(exp: &Experiment, out: &OutDir) -> Result<Outcome, CliError> {
    let spec = &exp.config.verify;
    let teacher = exp.teacher()?;
    let times = exp.grid.times();
    let r_t = exp.ctx.marginal(exp.grid.end())?;
    let student: Option<Box<dyn Denoiser>> = match &spec.student {
        Some(p) => Some(match exp.load_checkpoint(p)? {
            Checkpoint::Product(m) => Box::new(m),
            Checkpoint::Mixture(m) => Box::new(m),
        }),
        None => None,
    };
    let audit = if let Some(kernels) = &spec.student_kernels {
        let space = exp.ctx.space();
        let n = space.size();
        if kernels.len() != exp.grid.steps() {
            return Err(CliError::Config(format!("need {} student kernels, got {}", exp.grid.steps(), kernels.len())));
        }
        let student = kernels
            .iter()
            .map(|cols| {
                if cols.len() != n || cols.iter().any(|c| c.len() != n) {
                    return Err(CliError::Config(format!("student kernels must be {n} columns of length {n}")));
                }
                Ok(DenseKernel::new(space, nalgebra::DMatrix::from_vec(n, n, cols.concat()))?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let steps = times
            .windows(2)
            .map(|w| teacher.denoiser_kernel(&exp.ctx, w[0], w[1]))
            .collect::<di4c_core::Result<Vec<_>>>()?;
        tv_bound(&student, &steps, &r_t)?
    } else {
        let fallback;
        let model: &dyn Denoiser = match &student {
            Some(m) => m.as_ref(),
            None => {
                fallback = TabularMixtureDenoiser::from_teacher(&teacher, 1, 0.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
                &fallback
            }
        };
        tv_bound_audit(model, &teacher, &exp.ctx, &r_t, times)?
    };
    let mut report = verify_suite(&spec.suite)?;
    report.checks.push(audit_check(&audit, "tv_bound_audit"));
    let failure = failed(&report.checks);
    let summary = json!({
        "passed": failure.is_none(),
        "seed": report.seed,
        "checks": report.checks,
        "audit": audit,
    });
    out.write_json("verify.json", &summary)?;
    Ok((summary, failure))
}

#[derive(Serialize)]
struct SampleSummary {
    sampler: SamplerKind,
    dense: bool,
    count: usize,
    tv_to_data: Option<f64>,
    tau_leap_overflows: Option<usize>,
}

fn write_law(out: &OutDir, law: &JointDistribution) -> Result<(), CliError> {
    let space = law.space();
    let mut text = (0..space.num_dims()).map(|d| format!("x{d},")).collect::<String>();
    text.push_str("prob\n");
    for (x, p) in law.probs().iter().enumerate() {
        for c in space.decode(x) {
            text.push_str(&format!("{c},"));
        }
        text.push_str(&format!("{p:.16e}\n"));
    }
    out.write("distribution.csv", text.as_bytes())
}

fn sample(exp: &Experiment, out: &OutDir) -> Result<Outcome, CliError> {
    let spec = &exp.config.sample;
    let ctx = &exp.ctx;
    let times = exp.grid.times();
    let prior = ctx.marginal(exp.grid.end())?;
    let seed = seed(exp);
    let mut overflows = None;
    let law = match (spec.sampler, spec.dense) {
        (SamplerKind::Ancestral, true) => Some(ancestral_law(exp.model(&spec.model)?.as_ref(), ctx, times, &prior)?),
        (SamplerKind::TauLeap, true) => Some(tau_leap_law(ctx, times, &prior)?),
        (SamplerKind::Confidence, true) => {
            return Err(CliError::Config("the confidence sampler has no dense mode".into()));
        }
        _ => None,
    };
    if let Some(law) = &law {
        write_law(out, law)?;
    } else {
        let set = match spec.sampler {
            SamplerKind::Ancestral => ancestral_sample(exp.model(&spec.model)?.as_ref(), ctx, times, &prior, spec.count, seed)?,
            SamplerKind::TauLeap => {
                let (set, stats) = tau_leap_sample(ctx, times, &prior, spec.count, seed)?;
                overflows = Some(stats.overflows);
                set
            }
            SamplerKind::Confidence => {
                if exp.grid.start() != 0.0 {
                    return Err(CliError::Config("confidence sampling needs a grid starting at 0".into()));
                }
                let schedule = UnmaskSchedule::new(spec.mask_schedule, ctx.space().num_dims(), exp.grid.steps())?;
                let model = exp.model(&spec.model)?;
                let guide = spec.guidance.as_ref().map(|g| exp.model(&g.model)).transpose()?;
                let guidance = guide
                    .as_deref()
                    .zip(spec.guidance.as_ref())
                    .map(|(m, g)| (m, CfgConfig { w_cfg: g.w_cfg }));
                confidence_sample(model.as_ref(), ctx, &schedule, guidance, spec.count, seed)?
            }
        };
        out.write_with("samples.csv", |b| set.write_csv(ctx.space(), b))?;
    }
    let tv_to_data = law.as_ref().map(|l| tv_distance(l, ctx.data())).transpose()?;
    let summary = SampleSummary {
        sampler: spec.sampler,
        dense: spec.dense,
        count: if spec.dense { 0 } else { spec.count },
        tv_to_data,
        tau_leap_overflows: overflows,
    };
    Ok((serde_json::to_value(summary).expect("summary serializes"), None))
}
