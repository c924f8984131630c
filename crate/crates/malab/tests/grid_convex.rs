use std::sync::Arc;

use malab::domain::{build_domain, Shape, ShapeDescriptor};
use malab::field::*;
use malab::grid::Grid;
use malab::solver::{radial_reference, solve_dirichlet, RhsSpec, SolverConfig};
use malab::Error;
use proptest::prelude::*;

fn quadratic(xx: f64, xy: f64, yy: f64) -> Arc<Quadratic> {
    Arc::new(Quadratic { m: Sym::new2(xx, xy, yy), b: [0.0; 3], c: 0.0 })
}

#[test]
fn unit_ball_and_square_accepted() {
    let d = build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 }).unwrap();
    assert!(d.contains_unit_ball && d.inside_ball_n && d.premap.is_none());
    assert_eq!((d.inradius, d.circumradius), (1.0, 1.0));
    let sq = build_domain(&ShapeDescriptor::Cube { n: 2, half: 1.0 }).unwrap();
    assert!(sq.premap.is_none());
    assert!((sq.inradius - 1.0).abs() < 1e-12);
    assert!((sq.circumradius - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn thin_ellipse_rounded_by_unit_determinant_map() {
    let d = build_domain(&ShapeDescriptor::Ellipsoid { axes: vec![4.0, 0.25] }).unwrap();
    let m = d.premap.as_ref().expect("map recorded").matrix;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    assert!((det - 1.0).abs() < 1e-12);
    assert!(d.contains_unit_ball && d.inside_ball_n);
    assert!(matches!(d.shape, Shape::Ball { radius } if (radius - 1.0).abs() < 1e-12), "{:?}", d.shape);
}

#[test]
fn nonconvex_polygon_rejected() {
    let v = vec![[-2.0, -2.0], [2.0, -2.0], [0.0, -0.5], [2.0, 2.0], [-2.0, 2.0]];
    assert!(matches!(build_domain(&ShapeDescriptor::Polygon { vertices: v }), Err(Error::NonConvexDomain(_))));
}

#[test]
fn hessian_of_quadratics() {
    let g = Grid::cube(2, 1.0, 32);
    for (q, norm) in [(quadratic(1.0, 0.0, 1.0), 1.0), (quadratic(4.0, 0.0, 0.25), 4.0)] {
        let u = ConvexField::from_fn(g.clone(), None, "q", |p| q.value(p));
        let h = discrete_hessian(&u).unwrap();
        for i in (0..g.len()).filter(|&i| h.valid[i]) {
            assert!((h.norm[i] - norm).abs() < 1e-9, "node {i}: {}", h.norm[i]);
        }
    }
}

#[test]
fn quartic_second_difference_matches_taylor() {
    // x^4/12 has fourth derivative 2, so the central difference at x = 1 is 1 + s^2/6.
    let g = Grid::cube(2, 2.0, 64);
    let s = g.spacing[0];
    let u = ConvexField::from_fn(g.clone(), None, "quartic", |p| p[0].powi(4) / 12.0 + p[1] * p[1] / 2.0);
    let h = discrete_hessian(&u).unwrap();
    let i = g.nearest([1.0, 0.0, 0.0]);
    assert!((g.point(i)[0] - 1.0).abs() < 1e-12);
    assert!((h.h[i].get(0, 0) - (1.0 + s * s / 6.0)).abs() < 1e-9);
}

#[test]
fn convexity_of_paraboloids() {
    let g = Grid::cube(2, 1.0, 24);
    let up = ConvexField::from_fn(g.clone(), None, "up", |p| (p[0] * p[0] + p[1] * p[1]) / 2.0);
    assert!(check_convexity(&up, None).is_convex());
    let down = ConvexField::from_fn(g.clone(), None, "down", |p| -(p[0] * p[0] + p[1] * p[1]) / 2.0);
    let report = check_convexity(&down, None);
    assert_eq!(report.violated_nodes().len(), down.interior_count());
}

#[test]
fn solved_field_is_discretely_convex() {
    let d = build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 }).unwrap();
    let g = Grid::cube(2, 1.01, 48);
    let (u, _) = solve_dirichlet(&g, &d, &RhsSpec::constant(1.0), &SolverConfig::default()).unwrap();
    assert!(check_convexity(&u, None).is_convex());
}

#[test]
fn radial_sup_norm_and_inner_region() {
    let g = Grid::cube(2, 1.0, 64);
    let u = radial_reference(&g, 1.0, 1.0);
    let (sup, mask) = sup_norm_and_interior(&u).unwrap();
    assert!((sup - 0.5).abs() < 1e-12);
    for i in 0..g.len() {
        let p = g.point(i);
        let r2 = p[0] * p[0] + p[1] * p[1];
        if u.kind[i] == NodeKind::Interior && (r2 - 0.5).abs() > 1e-9 {
            assert_eq!(mask[i], r2 < 0.5, "node {i}");
        }
    }
}

#[test]
fn zero_field_has_empty_inner_region() {
    let u = ConvexField::from_fn(Grid::cube(2, 1.0, 16), None, "zero", |_| 0.0);
    let (sup, mask) = sup_norm_and_interior(&u).unwrap();
    assert_eq!(sup, 0.0);
    assert!(mask.iter().all(|m| !m));
}

#[test]
fn positive_interior_value_rejected() {
    let u = ConvexField::from_fn(Grid::cube(2, 1.0, 16), None, "bump", |p| p[0] * p[0] - 0.1);
    assert!(matches!(sup_norm_and_interior(&u), Err(Error::PositiveInteriorValue { .. })));
}

#[test]
fn inner_region_measure_converges_on_square() {
    let d = build_domain(&ShapeDescriptor::Cube { n: 2, half: 1.0 }).unwrap();
    let measure = |cells| {
        let g = Grid::cube(2, 1.0, cells);
        let (u, _) = solve_dirichlet(&g, &d, &RhsSpec::constant(1.0), &SolverConfig::default()).unwrap();
        let (_, mask) = sup_norm_and_interior(&u).unwrap();
        mask_measure(&g, &mask)
    };
    let (a, b) = (measure(64), measure(128));
    assert!((a - b).abs() / b < 0.02, "{a} vs {b}");
}

#[test]
fn field_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.bin");
    let g = Grid::cube(2, 1.0, 20);
    let u = radial_reference(&g, 1.0, 1.0);
    write_field(&path, &u).unwrap();
    let v = read_field(&path).unwrap();
    assert_eq!(v.grid, u.grid);
    assert_eq!(v.kind, u.kind);
    assert!(v.values.iter().zip(&u.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(v.domain, u.domain);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hessian_exact_and_symmetric_on_quadratics(
        xx in 0.1f64..5.0, yy in 0.1f64..5.0, xy in -0.5f64..0.5, bx in -1.0f64..1.0, by in -1.0f64..1.0,
    ) {
        let g = Grid::cube(2, 1.0, 16);
        let u = ConvexField::from_fn(g.clone(), None, "q", |p| {
            0.5 * (xx * p[0] * p[0] + 2.0 * xy * p[0] * p[1] + yy * p[1] * p[1]) + bx * p[0] + by * p[1]
        });
        let h = discrete_hessian(&u).unwrap();
        for i in (0..g.len()).filter(|&i| h.centered(i)) {
            let m = &h.h[i];
            prop_assert_eq!(m.get(0, 1).to_bits(), m.get(1, 0).to_bits());
            prop_assert!((m.get(0, 0) - xx).abs() < 1e-9);
            prop_assert!((m.get(1, 1) - yy).abs() < 1e-9);
            prop_assert!((m.get(0, 1) - xy).abs() < 1e-9);
        }
    }

    #[test]
    fn convexity_report_ignores_affine_terms(
        a in -0.3f64..0.3, bx in -2.0f64..2.0, by in -2.0f64..2.0, c in -1.0f64..1.0,
    ) {
        // Grid-aligned quadratic plus a small cubic, so some directions may fail.
        let base = move |p: [f64; 3]| p[0] * p[0] - 0.2 * p[1] * p[1] + a * p[0].powi(3);
        let g = Grid::cube(2, 1.0, 16);
        let u = ConvexField::from_fn(g.clone(), None, "u", base);
        let v = ConvexField::from_fn(g, None, "v", move |p| base(p) + bx * p[0] + by * p[1] + c);
        let tol = Some(1e-9);
        let ru = check_convexity(&u, tol);
        let rv = check_convexity(&v, tol);
        prop_assert_eq!(ru.violated_nodes(), rv.violated_nodes());
    }

    #[test]
    fn inner_region_invariant_under_scaling(c in 0.01f64..100.0) {
        let g = Grid::cube(2, 1.0, 24);
        let u = radial_reference(&g, 1.0, 1.0);
        let (_, m1) = sup_norm_and_interior(&u).unwrap();
        let (_, m2) = sup_norm_and_interior(&u.scaled(c)).unwrap();
        prop_assert_eq!(m1, m2);
    }
}
