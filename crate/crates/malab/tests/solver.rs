use std::sync::{Arc, OnceLock};

use malab::domain::{build_domain, DomainSpec, ShapeDescriptor};
use malab::field::*;
use malab::grid::Grid;
use malab::solver::*;
use malab::wang::{wang_construct, WangSolution};
use proptest::prelude::*;

fn wang3() -> &'static WangSolution {
    static W: OnceLock<WangSolution> = OnceLock::new();
    W.get_or_init(|| wang_construct(3.0, 1e-6).unwrap())
}

fn disk() -> DomainSpec {
    build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 }).unwrap()
}

fn solve(cells: usize, domain: &DomainSpec, f: f64) -> (ConvexField, SolveReport) {
    let g = Grid::cube(2, domain.outer_radius() * 1.01, cells);
    solve_dirichlet(&g, domain, &RhsSpec::constant(f), &SolverConfig::default()).unwrap()
}

fn max_error(u: &ConvexField, exact: impl Fn([f64; 3]) -> f64) -> f64 {
    (0..u.grid.len())
        .filter(|&i| u.kind[i] != NodeKind::Exterior)
        .map(|i| (u.values[i] - exact(u.grid.point(i))).abs())
        .fold(0.0, f64::max)
}

#[test]
fn unit_disk_constant_density_exact() {
    // Second differences are exact on quadratics, so only round-off remains.
    let d = disk();
    let exact = |p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] - 1.0) / 2.0;
    let errs: Vec<f64> = [32, 64, 128].iter().map(|&c| max_error(&solve(c, &d, 1.0).0, exact)).collect();
    assert!(errs.iter().all(|e| *e < 1e-10), "{errs:?}");
}

#[test]
fn unit_disk_density_four() {
    let (u, rep) = solve(64, &disk(), 4.0);
    assert!(rep.residual <= 1e-8);
    let err = max_error(&u, |p| p[0] * p[0] + p[1] * p[1] - 1.0);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn square_self_convergence_halves() {
    let d = build_domain(&ShapeDescriptor::Cube { n: 2, half: 1.0 }).unwrap();
    let sample = |u: &ConvexField| -> Vec<f64> {
        // Nodes of the 32-cell grid are shared by all finer grids.
        let g = Grid::cube(2, d.outer_radius() * 1.01, 32);
        (0..g.len()).filter(|&i| d.contains(g.point(i))).map(|i| interpolate(u, g.point(i))).collect()
    };
    let fields: Vec<Vec<f64>> = [32, 64, 128].iter().map(|&c| sample(&solve(c, &d, 1.0).0)).collect();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let d1 = diff(&fields[0], &fields[1]);
    let d2 = diff(&fields[1], &fields[2]);
    assert!(d2 <= d1 / 2.0, "{d1} {d2}");
}

#[test]
fn radial_reference_values() {
    let g = Grid::cube(2, 1.0, 16);
    let at0 = |u: &ConvexField| u.values[g.nearest([0.0; 3])];
    assert!((at0(&radial_reference(&g, 1.0, 1.0)) + 0.5).abs() < 1e-14);
    assert!((at0(&radial_reference(&g, 1.0, 16.0)) + 2.0).abs() < 1e-14);
    let g3 = Grid::cube(3, 1.0, 12);
    let u3 = radial_reference(&g3, 1.0, 1.0);
    let h = discrete_hessian(&ConvexField { analytic: None, ..u3 }).unwrap();
    for i in (0..g3.len()).filter(|&i| h.centered(i)) {
        assert!((h.h[i].det() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn residual_of_exact_solutions() {
    let g = Grid::cube(2, 1.01, 64);
    let r = residual(&radial_reference(&g, 1.0, 1.0), &RhsSpec::constant(1.0), 0).unwrap();
    let s = g.min_spacing();
    assert!(r.nodes > 0 && r.max <= 10.0 * s * s, "{} vs s = {s}", r.max);

    let q = Quadratic { m: Sym::new2(4.0, 0.0, 0.25), b: [0.0; 3], c: -1.0 };
    let u = ConvexField::from_fn(Grid::cube(2, 1.0, 32), None, "q", |p| q.value(p));
    let r = residual(&u, &RhsSpec::constant(1.0), 0).unwrap();
    assert!(r.nodes > 0 && r.max < 1e-10, "{}", r.max);
}

#[test]
fn solver_postcondition_on_residual() {
    let (u, rep) = solve(48, &disk(), 1.0);
    assert!(rep.residual <= 1e-8);
    let r = residual(&u, &RhsSpec::constant(1.0), rep.directions).unwrap();
    assert!(r.max <= 1e-8, "{}", r.max);
}

#[test]
fn larger_density_gives_lower_solution() {
    let d = disk();
    let (u1, _) = solve(48, &d, 1.0);
    let (u2, _) = solve(48, &d, 2.0);
    for i in 0..u1.grid.len() {
        if u1.kind[i] == NodeKind::Interior {
            assert!(u2.values[i] <= u1.values[i] + 1e-12, "node {i}");
        }
    }
}

#[test]
fn residual_invariant_under_lattice_symmetries() {
    let d = build_domain(&ShapeDescriptor::Cube { n: 2, half: 1.0 }).unwrap();
    let g = Grid::cube(2, 1.01, 40);
    let rhs = RhsSpec::density("tilted", 0.5, 1.5, Arc::new(|p| 1.0 + 0.5 * p[0]));
    let (u, _) = solve_dirichlet(&g, &d, &rhs, &SolverConfig::default()).unwrap();
    let base = residual(&u, &rhs, 0).unwrap();
    // Quarter turn and diagonal reflection map the grid and stencil to themselves.
    type Map = fn([f64; 3]) -> [f64; 3];
    let maps: [(Map, Map); 2] = [(|p| [-p[1], p[0], 0.0], |p| [p[1], -p[0], 0.0]), (|p| [p[1], p[0], 0.0], |p| [p[1], p[0], 0.0])];
    for (t, t_inv) in maps {
        let mut v = u.clone();
        for i in 0..g.len() {
            let j = g.nearest(t(g.point(i)));
            v.values[j] = u.values[i];
            v.kind[j] = u.kind[i];
        }
        let f = rhs.f.clone();
        let moved = RhsSpec::density("moved", 0.5, 1.5, Arc::new(move |p| f(t_inv(p))));
        let r = residual(&v, &moved, 0).unwrap();
        assert_eq!(r.nodes, base.nodes);
        assert!((r.max - base.max).abs() < 1e-12 && (r.l1 - base.l1).abs() < 1e-12);
    }
}

#[test]
fn degenerate_exponent_accepted_and_flagged() {
    let w = wang_construct(1.0, 1e-6).unwrap();
    assert!(w.report.degenerate);
    assert!(w.report.sharp_exponent.is_infinite());
}

#[test]
fn homogeneous_solution_second_derivative_scaling() {
    let w = wang3();
    let u = &w.field;
    assert!(w.report.lambda_w > 0.0 && w.report.scale_error < 1e-6);
    let uyy = |x: f64, y: f64| {
        // Central difference of values, independent of the analytic Hessian.
        let h = 1e-4 * (1.0 + y.abs());
        (u.value([x, y + h, 0.0]) - 2.0 * u.value([x, y, 0.0]) + u.value([x, y - h, 0.0])) / (h * h)
    };
    for &(x, y) in &[(0.4, 0.3), (-0.2, 0.5), (0.6, -0.1)] {
        for t in [0.5f64, 0.25] {
            let q = [t * x, t.powi(3) * y, 0.0];
            let lhs = u.hessian(q).get(1, 1);
            let rhs = t.powi(-2) * u.hessian([x, y, 0.0]).get(1, 1);
            assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs(), "analytic at t = {t}: {lhs} vs {rhs}");
            let fd = uyy(q[0], q[1]);
            let fd_rhs = t.powi(-2) * uyy(x, y);
            assert!((fd - fd_rhs).abs() <= 1e-3 * fd_rhs.abs(), "difference at t = {t}: {fd} vs {fd_rhs}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn determinant_invariant_under_unimodular_maps(
        a in 0.2f64..4.0, b in 0.2f64..4.0, c in -0.1f64..0.1, shear in -2.0f64..2.0, s in 0.3f64..3.0, th in 0.0f64..6.3,
    ) {
        let m = Sym::new2(a, c, b);
        // T = R(th) diag(s, 1/s) [[1, shear], [0, 1]]; det T = 1.
        let (co, si) = (th.cos(), th.sin());
        let t = [[co * s, co * s * shear - si / s], [si * s, si * s * shear + co / s]];
        let det_t = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        prop_assert!((det_t - 1.0).abs() < 1e-9);
        // Hessian of u(T^{-1} x) is T^{-T} M T^{-1}.
        let ti = [[t[1][1], -t[0][1]], [-t[1][0], t[0][0]]];
        let mut h = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                h[i][j] = (0..2).flat_map(|k| (0..2).map(move |l| (k, l))).map(|(k, l)| ti[k][i] * m.get(k, l) * ti[l][j]).sum();
            }
        }
        let moved = Quadratic { m: Sym::new2(h[0][0], h[0][1], h[1][1]), b: [0.0; 3], c: 0.0 };
        let det = moved.hessian([0.0; 3]).det();
        prop_assert!((det - m.det()).abs() <= 1e-9 * m.det().abs().max(1.0));
    }

    #[test]
    fn homogeneous_scaling_identity(x in -1.0f64..1.0, y in -1.0f64..1.0, t in 0.25f64..1.0) {
        let u = &wang3().field;
        let lhs = u.value([t * x, t.powi(3) * y, 0.0]);
        let rhs = t.powi(4) * u.value([x, y, 0.0]);
        prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1e-12));
    }
}
