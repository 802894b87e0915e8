use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use di4c_core::denoisers::{fit_product_to_oracle, Checkpoint, Denoiser, MixtureKernel, TimeGrid};
use di4c_core::dist::{tv_distance, JointDistribution};
use di4c_core::forward::FactorizedForward;
use di4c_core::losses::{consis_loss_cv, consis_loss_mc, ConsistencyTerms, EstimatorConfig};
use di4c_core::posterior::PosteriorContext;
use di4c_core::theory::{random_distribution, random_mixture_kernel, random_product_kernel, tv_bound_audit};
use di4c_core::trainer::{chain_law, init_student, iterated_di4c, train, GradientMode, TimeLaw, TrainConfig, TrainEnv};

fn two_bit() -> PosteriorContext {
    let fwd = FactorizedForward::uniform2(2).unwrap();
    let q0 = JointDistribution::new(fwd.space(), vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    PosteriorContext::new(fwd, q0).unwrap()
}

fn one_step_tv(model: &dyn Denoiser, ctx: &PosteriorContext) -> f64 {
    tv_distance(&chain_law(model, ctx, &[0.0, 1.0]).unwrap(), ctx.data()).unwrap()
}

#[test]
fn second_round_does_not_degrade() {
    let ctx = two_bit();
    let teacher = fit_product_to_oracle(&ctx, &TimeGrid::uniform(8, 1.0).unwrap()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 5.0,
        iterations: 20_000,
        ..Default::default()
    };
    let student = init_student(&teacher, 4, &cfg).unwrap();
    let (once, first) = iterated_di4c(&ctx, &teacher, &student, &cfg).unwrap();
    let two_rounds = TrainConfig { rounds: 2, ..cfg.clone() };
    let (twice, traces) = iterated_di4c(&ctx, &teacher, &student, &two_rounds).unwrap();
    assert_eq!(traces.len(), 2);
    assert_eq!(first[0].iterations, traces[0].iterations);
    let (tv1, tv2) = (one_step_tv(&once, &ctx), one_step_tv(&twice, &ctx));
    assert!(tv2 <= tv1 + 1e-3, "round 2 {tv2} vs round 1 {tv1}");
}

#[test]
fn trained_student_satisfies_bound() {
    let ctx = two_bit();
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let teacher = fit_product_to_oracle(&ctx, &grid).unwrap();
    let cfg = TrainConfig {
        learning_rate: 5.0,
        iterations: 3000,
        time_law: TimeLaw::FullGrid,
        ..Default::default()
    };
    let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap();
    let (student, _) = train(&init_student(&teacher, 2, &cfg).unwrap(), &env, &cfg).unwrap();
    for r in [ctx.marginal(1.0).unwrap(), std::sync::Arc::new(JointDistribution::uniform(ctx.space()))] {
        let rep = tv_bound_audit(&student, &teacher, &ctx, &r, grid.times()).unwrap();
        assert!(rep.holds(1e-9), "{rep:?}");
        assert_eq!(rep.consis.len(), 3);
    }
}

#[test]
fn estimated_gradients_still_improve() {
    let ctx = two_bit();
    let teacher = fit_product_to_oracle(&ctx, &TimeGrid::uniform(8, 1.0).unwrap()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 2.0,
        iterations: 3000,
        gradient: GradientMode::Estimated,
        ..Default::default()
    };
    let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap().with_gradient_mode(cfg.gradient);
    let student = init_student(&teacher, 4, &cfg).unwrap();
    let before = one_step_tv(&student, &ctx);
    let (trained, trace) = train(&student, &env, &cfg).unwrap();
    assert!(one_step_tv(&trained, &ctx) < before);
    assert!(trace.iterations.iter().all(|r| r.objective.total.is_finite()));
}

#[test]
fn checkpoint_round_trip_preserves_law() {
    let ctx = two_bit();
    let teacher = fit_product_to_oracle(&ctx, &TimeGrid::uniform(4, 1.0).unwrap()).unwrap();
    let cfg = TrainConfig { iterations: 200, ..Default::default() };
    let env = TrainEnv::new(&ctx, &teacher, &cfg.loss).unwrap();
    let (student, _) = train(&init_student(&teacher, 3, &cfg).unwrap(), &env, &cfg).unwrap();
    let ck = Checkpoint::Mixture(student.clone());
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let json = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    for restored in [back, json] {
        let Checkpoint::Mixture(m) = restored else {
            panic!("wrong checkpoint kind");
        };
        assert_eq!(one_step_tv(&m, &ctx), one_step_tv(&student, &ctx));
    }
}

/// With product targets the control-variate term is the conditional mean of the plain one.
#[test]
fn control_variate_reduces_variance_near_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let space = di4c_core::dist::StateSpace::new(3, 2).unwrap();
    let mut wins = 0;
    let instances = 10;
    for _ in 0..instances {
        let su = MixtureKernel::from_product(&random_product_kernel(&mut rng, space, 3.0));
        let ut = random_mixture_kernel(&mut rng, space, 2, 3.0);
        let st = random_mixture_kernel(&mut rng, space, 1, 3.0);
        let r = random_distribution(&mut rng, space, 2.0);
        let terms = ConsistencyTerms {
            student_su: &su,
            teacher_ut: &ut,
            student_st: &st,
            reference: &r,
        };
        let cfg = EstimatorConfig { samples: 20_000, ..Default::default() };
        let mc = consis_loss_mc(&terms, &cfg, &mut rng).unwrap();
        let cv = consis_loss_cv(&terms, &cfg, &mut rng).unwrap();
        println!("mc var={:.4e} cv var={:.4e}", mc.sample_variance, cv.sample_variance);
        wins += usize::from(cv.sample_variance <= mc.sample_variance);
    }
    assert_eq!(wins, instances);
}
