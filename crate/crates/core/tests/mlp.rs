use flowguide::grads::{greedy_grad, GreedyEstimator, LossSpec};
use flowguide::linalg::Vector;
use flowguide::models::{train_micro_mlp, GaussianMixtureTarget, MicroMlp, PosteriorModel, TrainConfig};
use flowguide::paths::Schedule;
use flowguide::solvers::{solve, Scheme, SolverConfig};
use flowguide::verify::dto_exactness;

fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

#[test]
fn trained_network_drives_every_engine() {
    let target = GaussianMixtureTarget::symmetric_pair(v2(1.5, 0.0), 0.1).unwrap();
    let cfg = TrainConfig {
        steps: 3000,
        hidden1: 32,
        hidden2: 32,
        heldout_size: 1024,
        seed: 7,
        ..TrainConfig::default()
    };
    let (net, report) = train_micro_mlp(&target, &Schedule::cond_ot(), &cfg).unwrap();
    assert!(report.heldout_loss < report.baseline_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    net.save(&path).unwrap();
    let loaded = MicroMlp::load(&path).unwrap();
    assert_eq!(loaded, net);

    let model = PosteriorModel::mlp(Schedule::cond_ot(), loaded);
    let analytic = PosteriorModel::mixture(Schedule::cond_ot(), target);
    let loss = LossSpec::quadratic(v2(1.5, 0.0));
    let probes = vec![v2(0.3, -0.2), v2(-1.0, 0.5)];
    for scheme in [Scheme::Euler, Scheme::Midpoint, Scheme::Rk4] {
        let worst = dto_exactness(&model, &loss, &SolverConfig::new(scheme, 16), &probes).unwrap();
        assert!(worst <= 1e-6, "{scheme:?}: {worst:e}");
    }
    let g = greedy_grad(&model, &loss, 0.5, &v2(0.3, 0.1), GreedyEstimator::Euler1).unwrap();
    assert!(g.grad.iter().all(|v| v.is_finite()));

    // The learned flow should land near one of the two modes for most noise draws.
    let solver = SolverConfig::new(Scheme::Midpoint, 32);
    let mut near = 0;
    for i in 0..20 {
        let x0 = v2((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos());
        let x1 = solve(&model, &solver, &x0).unwrap().terminal().clone();
        let exact = solve(&analytic, &solver, &x0).unwrap().terminal().clone();
        if (x1 - exact).norm() < 0.75 {
            near += 1;
        }
    }
    assert!(near >= 14, "{near}/20");
}
