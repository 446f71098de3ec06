//! Oracles on the one-dimensional example with closed-form pieces.

use stopbound_core::boundary::{convergence_check, extract_boundary};
use stopbound_core::examples::{
    analytic_reference, build_example, default_grid, AnalyticReference, ExampleId, ExampleName, Quantity, Resolution,
};
use stopbound_core::pde::{mask_monotonicity_violations, solve_vi, SolverSettings, ValueSurface};
use stopbound_core::represent::{estimate_representations, estimate_value, McSettings};

fn solved(res: Resolution) -> (stopbound_core::examples::Example, ValueSurface) {
    let ex = build_example(&ExampleId::new(ExampleName::Example1)).unwrap();
    let grid = default_grid(&ex, 0.0, res);
    let surf = solve_vi(&ex.spec, &grid, &SolverSettings::default()).unwrap();
    (ex, surf)
}

fn gamma() -> f64 {
    match analytic_reference(&ExampleId::new(ExampleName::Example1), Quantity::Gamma).unwrap() {
        AnalyticReference::Scalar { value } => value,
        other => panic!("{other:?}"),
    }
}

#[test]
fn gamma_is_log_of_inverse_cost() {
    assert!((gamma() - 2.0 * (10.0f64).ln()).abs() < 1e-12);
}

#[test]
fn value_dominates_obstacle_and_mask_is_monotone() {
    let (ex, surf) = solved(Resolution::Coarse);
    assert!(surf.w.iter().all(|w| *w >= -1e-12));
    let mask = surf.classify_regions(surf.default_tol());
    assert!(mask_monotonicity_violations(&surf, &mask).is_empty());
    assert!(ex.spec.terminal_is_obstacle());
}

#[test]
fn stopping_boundary_sits_below_gamma() {
    let (_, surf) = solved(Resolution::Coarse);
    let b0 = extract_boundary(&surf, 0.0).unwrap();
    let dx = surf.grid.axes[0].step();
    let g = gamma();
    for (k, t) in b0.times.iter().enumerate() {
        let b = b0.node(k, &[]);
        assert!(b <= g + dx, "t={t}: b={b} above gamma {g}");
    }
}

#[test]
fn delta_levels_decrease_towards_b0() {
    let (_, surf) = solved(Resolution::Coarse);
    let b0 = extract_boundary(&surf, 0.0).unwrap();
    let scale = surf.w_range();
    let family: Vec<_> = [1e-2, 1e-3, 1e-4].iter().map(|r| extract_boundary(&surf, r * scale).unwrap()).collect();
    let report = convergence_check(&b0, &family, 0.5 * surf.grid.axes[0].step()).unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.worst);
    assert!(report.gaps_strictly_decreasing, "{:?}", report.sup_gaps);
}

#[test]
fn monte_carlo_matches_pde_value_and_gradient() {
    let (ex, surf) = solved(Resolution::Standard);
    let b0 = extract_boundary(&surf, 0.0).unwrap();
    let mc = McSettings::new(20_000, 1e-3, 11);
    let (t, x) = (0.2, [5.0]);
    let rep = estimate_representations(&ex.spec, t, &x, &b0, &mc).unwrap();
    let fd = surf.fd_derivatives(t, &x).unwrap();
    let v = surf.value_at(t, &x).unwrap();
    let h = surf.grid.axes[0].step();
    let slack = 2.0 * (h * h + surf.grid.dt());
    assert!((rep.value.mean - v).abs() <= 3.0 * rep.value.std_error + slack, "{} vs {v}", rep.value.mean);
    let g = &rep.gradient[0];
    assert!((g.mean - fd.grad[0].unwrap()).abs() <= 3.0 * g.std_error + slack, "{} vs {:?}", g.mean, fd.grad[0]);
    let tb = rep.time_bounds.unwrap();
    let dt = surf.grid.dt();
    assert!(tb.lower.mean - 3.0 * tb.lower.std_error - 5.0 * dt <= fd.dt);
    assert!(fd.dt <= tb.upper.mean + 3.0 * tb.upper.std_error + 5.0 * dt);
    let tu = tb.tightened_upper.expect("terminal payoff equals the obstacle");
    assert!(fd.dt <= tu.mean + 3.0 * tu.std_error + 5.0 * dt);
}

#[test]
fn starting_inside_the_stopping_set_pays_the_obstacle() {
    let (ex, surf) = solved(Resolution::Coarse);
    let b0 = extract_boundary(&surf, 0.0).unwrap();
    let x = [b0.eval(0.5, &[]) - 1.0];
    let e = estimate_value(&ex.spec, 0.5, &x, &b0, &McSettings::new(64, 1e-3, 3)).unwrap();
    assert_eq!(e.mean, ex.spec.f(0.5, &x));
    assert_eq!(e.std_error, 0.0);
}
