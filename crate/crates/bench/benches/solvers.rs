use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mimpc_core::dp::ValueFunctions;
use mimpc_core::ip::IpOptions;
use mimpc_core::minlp::IntegerProfile;
use mimpc_core::ocp::{ExampleOcp, ThetaVector};
use mimpc_core::policy::{ExplorationConfig, MpcPolicy};
use mimpc_core::sens;
use mimpc_core::trainer::{TrainConfig, Trainer};

fn golden() -> f64 {
    (1.0 + 5f64.sqrt()) / 2.0
}

fn setup() -> (ExampleOcp, ThetaVector) {
    (ExampleOcp::new(10, golden()).unwrap(), ThetaVector::baseline())
}

fn ip_solve(c: &mut Criterion) {
    let (ocp, theta) = setup();
    let policy = MpcPolicy::new(&ocp, &theta, ExplorationConfig::default(), IpOptions::default()).unwrap();
    let profile = IntegerProfile::from_bits(&[1; 10]);
    c.bench_function("ip solve, fixed profile", |b| {
        b.iter(|| policy.solve_profile(black_box(0.3), &profile, 0.0, None).unwrap())
    });
}

fn dp_table(c: &mut Criterion) {
    let (ocp, theta) = setup();
    c.bench_function("dp value functions", |b| b.iter(|| ValueFunctions::integer(black_box(&ocp), &theta)));
    c.bench_function("integer policy distribution", |b| {
        let policy = MpcPolicy::new(&ocp, &theta, ExplorationConfig::default(), IpOptions::default()).unwrap();
        b.iter(|| policy.integer_policy_distribution(black_box(0.3)).unwrap())
    });
}

fn sensitivities(c: &mut Criterion) {
    let (ocp, theta) = setup();
    let policy = MpcPolicy::new(&ocp, &theta, ExplorationConfig::default(), IpOptions::default()).unwrap();
    let profile = IntegerProfile::from_bits(&[1; 10]);
    let nlp = policy.nlp(0.3, &profile, 0.0).unwrap();
    let z = policy.solve_profile(0.3, &profile, 0.0, None).unwrap();
    c.bench_function("solution sensitivity", |b| b.iter(|| sens::solution_sensitivity(black_box(&z), &nlp).unwrap()));
    c.bench_function("value gradient", |b| b.iter(|| sens::grad_value_wrt_theta(black_box(&z), &nlp, 1e-8).unwrap()));
}

fn critic(c: &mut Criterion) {
    let (ocp, theta) = setup();
    let tr = Trainer::new(ocp, Default::default(), IpOptions::default(), TrainConfig::default()).unwrap();
    let policy = tr.policy(&theta).unwrap();
    let mut g = c.benchmark_group("critic");
    g.sample_size(10);
    g.bench_function("policy evaluation", |b| b.iter(|| tr.critic(black_box(&policy)).unwrap()));
    g.finish();
}

criterion_group!(benches, ip_solve, dp_table, sensitivities, critic);
criterion_main!(benches);
