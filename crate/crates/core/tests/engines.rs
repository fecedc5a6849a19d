use flowguide::grads::{dto_grad, otd_grad, AdjointConfig, LossSpec};
use flowguide::linalg::{seeded_rng, standard_normal, Vector};
use flowguide::models::{GaussianMixtureTarget, PosteriorModel};
use flowguide::paths::Schedule;
use flowguide::solvers::{Scheme, SolverConfig};
use flowguide::verify::{dto_exactness, greedy_vs_ideal_study, GreedyIdealConfig, OrderFit, StudyStatus};

fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

fn pair() -> PosteriorModel {
    PosteriorModel::mixture(
        Schedule::cond_ot(),
        GaussianMixtureTarget::symmetric_pair(v2(2.0, 0.5), 0.3).unwrap(),
    )
}

#[test]
fn euler_otd_dto_gap_is_first_order() {
    let m = pair();
    let loss = LossSpec::quadratic(v2(1.0, 0.0));
    let x = v2(0.3, 0.3);
    let adjoint = AdjointConfig {
        scheme: Scheme::Euler,
        ..AdjointConfig::default()
    };
    let mut hs = Vec::new();
    let mut gaps = Vec::new();
    for k in 4..=10 {
        let n = 1usize << k;
        let cfg = SolverConfig::new(Scheme::Euler, n);
        let dto = dto_grad(&m, &loss, &cfg, 0.0, &x).unwrap().grad;
        let otd = otd_grad(&m, &loss, &cfg, 0.0, &x, &adjoint).unwrap().grad;
        hs.push(1.0 / n as f64);
        gaps.push((otd - &dto).norm() / dto.norm());
    }
    let fit = OrderFit::assess(hs, gaps, "t", (0.65, 1.35));
    assert_eq!(fit.status, StudyStatus::Pass, "{fit:?}");
}

#[test]
fn dto_matches_finite_differences_on_random_mixtures() {
    let mut rng = seeded_rng(99);
    for dim in [2usize, 5] {
        let m = PosteriorModel::mixture(Schedule::cond_ot(), GaussianMixtureTarget::random(&mut rng, dim, 3).unwrap());
        let loss = LossSpec::quadratic(standard_normal(&mut rng, dim));
        let probes: Vec<Vector> = (0..3).map(|_| standard_normal(&mut rng, dim)).collect();
        for scheme in [Scheme::Euler, Scheme::Midpoint, Scheme::Rk4] {
            let worst = dto_exactness(&m, &loss, &SolverConfig::new(scheme, 24), &probes).unwrap();
            assert!(worst <= 1e-6, "{scheme:?} in {dim}-D: {worst:e}");
        }
    }
}

#[test]
fn greedy_gap_shrinks_toward_the_end_for_a_gaussian() {
    let m = PosteriorModel::mixture(
        Schedule::cond_ot(),
        GaussianMixtureTarget::isotropic(vec![1.0], vec![v2(0.5, -0.5)], 0.5).unwrap(),
    );
    let mut cfg = GreedyIdealConfig::new(v2(0.2, 0.1));
    cfg.n_points = 10;
    cfg.ratio = 1.5;
    let fit = greedy_vs_ideal_study(&m, &cfg).unwrap();
    assert!(fit.errors.windows(2).all(|w| w[1] < w[0]), "{:?}", fit.errors);
}
