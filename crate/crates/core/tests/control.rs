use hydrokam_core::control::{
    action, adjoint_gradient, evaluate_objective, optimize, ControlProblem, Objective, OptimizerConfig,
    StateFunctional,
};
use hydrokam_core::diffusion::{SolverConfig, SpaceTimeControl};
use hydrokam_core::seed::rng_from_seed;
use hydrokam_core::torus::{random_smooth_density, random_smooth_field, TorusGrid};

fn problem(seed: u64, objective: fn(TorusGrid, u64) -> Objective) -> ControlProblem {
    let g = TorusGrid::new(16).unwrap();
    let mut rng = rng_from_seed(seed);
    ControlProblem {
        rho0: random_smooth_density(g, 2, 0.6, &mut rng),
        horizon: 0.08,
        solver: SolverConfig {
            newton_tol: 1e-13,
            ..SolverConfig::new(0.05, 0.01)
        },
        block_steps: 2,
        objective: objective(g, seed),
    }
}

fn linear_terminal(g: TorusGrid, seed: u64) -> Objective {
    let mut rng = rng_from_seed(seed ^ 0x5a5a);
    Objective::Terminal(StateFunctional::Linear {
        phi: random_smooth_field(g, 3, 1.0, &mut rng).into_values(),
    })
}

fn entropy_discounted(_: TorusGrid, _: u64) -> Objective {
    Objective::Discounted {
        h: StateFunctional::Entropy { weight: -1.0 },
        alpha: 0.01,
    }
}

fn opt(max_iters: usize) -> OptimizerConfig {
    OptimizerConfig {
        max_iters,
        restarts: 3,
        seed: 21,
        init_scale: 0.05,
        ..OptimizerConfig::default()
    }
}

#[test]
fn estimates_are_bitwise_reproducible() {
    let p = problem(1, linear_terminal);
    let a = optimize(&p, None, &opt(10)).unwrap();
    let b = optimize(&p, None, &opt(10)).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.control, b.control);
}

#[test]
fn larger_budgets_never_lower_the_value() {
    for (seed, obj) in [(2, linear_terminal as fn(_, _) -> _), (3, entropy_discounted)] {
        let p = problem(seed, obj);
        let mut last = f64::NEG_INFINITY;
        for iters in [1, 3, 10, 30] {
            let est = optimize(&p, None, &opt(iters)).unwrap();
            assert!(est.value >= last, "budget {iters}: {} < {last}", est.value);
            assert!(est.restart_bests.windows(2).all(|w| w[1] >= w[0]));
            last = est.value;
        }
    }
}

#[test]
fn reported_value_matches_recomputed_objective() {
    let p = problem(4, linear_terminal);
    let est = optimize(&p, None, &opt(15)).unwrap();
    let (v, traj) = evaluate_objective(&p, &est.control).unwrap();
    assert!((v - est.value).abs() <= 1e-9);
    let Objective::Terminal(f) = &p.objective else { unreachable!() };
    let by_hand = f.value(p.grid(), traj.last().values()).unwrap() - est.control.cost();
    assert!((by_hand - est.value).abs() <= 1e-9, "{by_hand} vs {}", est.value);
}

#[test]
fn zero_control_is_a_candidate() {
    let p = problem(5, linear_terminal);
    let est = optimize(&p, None, &opt(5)).unwrap();
    let (free, _) = evaluate_objective(&p, &p.zero_control().unwrap()).unwrap();
    assert!(est.value >= free);
}

#[test]
fn adjoint_gradient_matches_central_differences() {
    let p = problem(6, entropy_discounted);
    let mut rng = rng_from_seed(66);
    let mut control = p.zero_control().unwrap();
    for b in control.blocks_mut() {
        for (x, y) in b.iter_mut().zip(random_smooth_field(p.grid(), 2, 0.3, &mut rng).values()) {
            *x = *y;
        }
    }
    let (_, grad) = adjoint_gradient(&p, &control).unwrap();
    let flat = control.to_flat();
    let g = grad.to_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in (0..flat.len()).step_by(7) {
        let eval = |d: f64| {
            let mut x = flat.clone();
            x[idx] += d;
            let c = SpaceTimeControl::from_flat(p.grid(), control.block_dt(), &x).unwrap();
            evaluate_objective(&p, &c).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((fd - g[idx]).abs() / g.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    assert!(worst <= 1e-4, "relative error {worst:e}");
}

#[test]
fn free_flow_has_finite_action() {
    let p = problem(7, linear_terminal);
    let (_, traj) = evaluate_objective(&p, &p.zero_control().unwrap()).unwrap();
    let a = action(&traj).unwrap().finite().unwrap();
    assert!(a.is_finite() && a >= 0.0);
}
