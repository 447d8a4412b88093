mod common;

use common::*;
use mimpc_core::dp::ValueFunctions;
use mimpc_core::ip::{self, IpOptions};
use mimpc_core::minlp::{ExampleMinlp, IntegerProfile, MinlpStrategy};
use mimpc_core::nlp::FixedIntegerNlp;
use mimpc_core::ocp::ExampleOcp;

#[test]
fn dual_oracle_closes_its_gap() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    for inst in random_instances(1, 40, 10) {
        let sol = dual_fixed_profile(&ocp, inst.s, &inst.theta, &inst.profile, 0.0, 1e-14);
        assert!(sol.primal - sol.dual <= 1e-13 * (1.0 + sol.primal.abs()), "gap {} after {} sweeps", sol.primal - sol.dual, sol.sweeps);
    }
}

#[test]
fn fixed_profile_dp_matches_dual_oracle() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    for (j, inst) in random_instances(2, 100, 10).into_iter().enumerate() {
        let d = if j % 2 == 0 { 0.0 } else { 0.05 };
        let sol = dual_fixed_profile(&ocp, inst.s, &inst.theta, &inst.profile, d, 1e-14);
        let v = ValueFunctions::fixed(&ocp, &inst.theta, &inst.profile[1..]);
        let plan = v.plan(inst.s, inst.profile[0], d).unwrap();
        assert!((plan.value - sol.primal).abs() < 1e-10, "instance {j}: {} vs {}", plan.value, sol.primal);
        for k in 0..10 {
            if inst.profile[k] == 1 || k == 0 {
                assert!((plan.u[k] - sol.u[k]).abs() < 1e-6, "instance {j} u{k}: {} vs {}", plan.u[k], sol.u[k]);
            }
        }
    }
}

#[test]
fn active_set_oracle_agrees_with_dual_bracket() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    for (j, inst) in random_instances(6, 100, 10).into_iter().enumerate() {
        let a = active_set_fixed_profile(&ocp, inst.s, &inst.theta, &inst.profile, 0.0);
        let b = dual_fixed_profile(&ocp, inst.s, &inst.theta, &inst.profile, 0.0, 1e-14);
        assert!(a.value <= b.primal + 1e-13 && a.value >= b.dual - 1e-13, "instance {j}: {} not in [{}, {}]", a.value, b.dual, b.primal);
    }
}

#[test]
fn interior_point_matches_active_set_oracle() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    let opts = IpOptions::default().with_tau(1e-10);
    for (j, inst) in random_instances(3, 100, 10).into_iter().enumerate() {
        let sol = active_set_fixed_profile(&ocp, inst.s, &inst.theta, &inst.profile, 0.0);
        let profile = IntegerProfile::from_bits(&inst.profile);
        let nlp = FixedIntegerNlp::scalar(&ocp, inst.s, &inst.theta, profile, 0.0).unwrap();
        let rep = ip::solve(&nlp, &opts, None).unwrap();
        assert!(rep.is_solved(), "instance {j}: {:?}", rep.status);
        assert!((rep.objective - sol.value).abs() < 1e-8, "instance {j}: {} vs {}", rep.objective, sol.value);
    }
}

#[test]
fn integer_dp_matches_enumeration() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    for (j, inst) in random_instances(4, 30, 10).into_iter().enumerate() {
        let m = ExampleMinlp::new(&ocp, &inst.theta).unwrap();
        for a in 0..2u8 {
            let dp = m.branch(inst.s, a, MinlpStrategy::DynamicProgramming).unwrap().unwrap();
            let en = m.branch(inst.s, a, MinlpStrategy::Enumerate).unwrap().unwrap();
            assert!((dp.value - en.value).abs() < 1e-10, "instance {j} a={a}: {} vs {}", dp.value, en.value);
        }
    }
}

#[test]
fn branch_and_bound_matches_enumeration() {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    let t = std::time::Instant::now();
    let mut relax = 0;
    for (j, inst) in random_instances(5, 20, 10).into_iter().enumerate() {
        let m = ExampleMinlp::new(&ocp, &inst.theta).unwrap();
        for a in 0..2u8 {
            let (bb, stats) = m.branch_and_bound(inst.s, a).unwrap();
            relax += stats.relaxations;
            let bb = bb.unwrap();
            let en = m.enumerate(inst.s, a).unwrap();
            assert!((bb.value - en.value).abs() < 1e-8, "instance {j} a={a}: {} vs {}", bb.value, en.value);
        }
    }
    eprintln!("bnb: {relax} relaxations in {:?}", t.elapsed());
}
