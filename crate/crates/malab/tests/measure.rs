use std::sync::Arc;

use malab::domain::{build_domain, DomainSpec, ShapeDescriptor};
use malab::field::*;
use malab::grid::Grid;
use malab::measure::*;
use malab::sections::{compute_section, john_normalize};
use malab::solver::{solve_dirichlet, RhsSpec};
use malab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square() -> DomainSpec {
    build_domain(&ShapeDescriptor::Cube { n: 2, half: 1.0 }).unwrap()
}

fn disk() -> DomainSpec {
    build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 }).unwrap()
}

fn small_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig { sets: 60, subsets: 30, resolution: 128, slab_levels: 7, seed }
}

fn mask(g: &Grid, f: impl Fn([f64; 3]) -> bool) -> Vec<bool> {
    (0..g.len()).map(|i| f(g.point(i))).collect()
}

#[test]
fn half_square_carries_half_the_mass() {
    let g = Grid::cube(2, 1.0, 200);
    let mu = MeasureSpec::power_x1(1.0);
    let s = mu_of_set(&mu, &g, &mask(&g, |_| true));
    let e = mu_of_set(&mu, &g, &mask(&g, |p| p[0] >= 0.0));
    assert!((e / s - 0.5).abs() < 1e-12, "{}", e / s);
}

#[test]
fn lebesgue_mass_is_area() {
    let g = Grid::cube(2, 1.0, 64);
    let m = mask(&g, |p| p[0] * p[0] + p[1] * p[1] < 0.5);
    let mu = mu_of_set(&MeasureSpec::lebesgue(), &g, &m);
    assert!((mu - mask_measure(&g, &m)).abs() < 1e-12);
}

#[test]
fn quadratic_weight_on_central_strip() {
    // int_{-1/2}^{1/2} x^2 / int_{-1}^{1} x^2 = (1/2)^3.
    let g = Grid::cube(2, 1.0, 400);
    let mu = MeasureSpec::power_x1(2.0);
    let s = mu_of_set(&mu, &g, &mask(&g, |_| true));
    let e = mu_of_set(&mu, &g, &mask(&g, |p| p[0].abs() <= 0.5));
    assert!((e / s - 0.125).abs() < 0.005, "{}", e / s);
    let le = mask_measure(&g, &mask(&g, |p| p[0].abs() <= 0.5)) / mask_measure(&g, &mask(&g, |_| true));
    assert!((le - 0.5).abs() < 0.005);
}

#[test]
fn lebesgue_doubling_is_equality() {
    let r = check_doubling(&MeasureSpec::lebesgue(), &disk(), &small_sampler(1)).unwrap();
    assert!((r.beta - 1.0).abs() < 1e-12, "{}", r.beta);
    assert!((r.gamma - 1.0).abs() < 1e-6, "{}", r.gamma);
    assert!(r.certified());
}

#[test]
fn power_weight_exponent_bounded_by_one_plus_alpha() {
    for alpha in [1.0, 2.0] {
        let r = check_doubling(&MeasureSpec::power_x1(alpha), &disk(), &small_sampler(2)).unwrap();
        assert!(r.beta <= (1.0 + alpha) * 1.05, "alpha {alpha}: beta {}", r.beta);
        assert!(r.beta >= 1.0 + 0.8 * alpha, "alpha {alpha}: beta {}", r.beta);
        assert!(r.certified());
        for s in &r.ratios {
            assert!(s.mu >= r.gamma * s.lebesgue.powf(r.beta));
        }
    }
}

#[test]
fn flat_weight_violates_doubling() {
    let input = DoublingInput {
        density: Arc::new(|p: [f64; 3]| if p[0] == 0.0 { 0.0 } else { (-1.0 / p[0].abs()).exp() }),
        zero_sets: vec![Arc::new(|p: [f64; 3]| p[0])],
    };
    let r = check_doubling_input(&input, &disk(), &small_sampler(3));
    assert!(matches!(r, Err(Error::PropertyViolated(_))), "{:?}", r.map(|r| r.beta));
}

#[test]
fn ratios_invariant_under_unit_determinant_maps() {
    let input = DoublingInput::from_spec(&MeasureSpec::power_x1(1.0));
    let cfg = SamplerConfig { sets: 12, subsets: 20, resolution: 64, slab_levels: 5, seed: 4 };
    let bodies = sample_bodies(&disk(), &cfg);
    let base = sample_ratios(&input, &bodies, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let (th, s, sh): (f64, f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.3..3.0), rng.random_range(-1.0..1.0));
        let (c, n) = (th.cos(), th.sin());
        // Rotation * diag(s, 1/s) * shear.
        let a = [[c * s, c * s * sh - n / s], [n * s, n * s * sh + c / s]];
        let b = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let moved: Vec<_> = bodies.iter().map(|body| body.mapped(a, b)).collect();
        let got = sample_ratios(&input.pushed(a, b), &moved, &cfg);
        assert_eq!(got.len(), base.len());
        for (x, y) in base.iter().zip(&got) {
            assert_eq!(x.kind, y.kind);
            assert!((x.lebesgue - y.lebesgue).abs() < 1e-12);
            assert!((x.mu - y.mu).abs() < 1e-9 * x.mu.max(1e-300), "{} vs {}", x.mu, y.mu);
        }
    }
}

#[test]
fn lebesgue_size_is_bounded_size_times_area_constant() {
    // For u = x^T M x / 2, |S_h| = 2 pi h / sqrt(det M), so alpha_mu / alpha = 2 pi / sqrt(det M).
    for (xx, xy, yy) in [(1.0, 0.0, 1.0), (4.0, 0.0, 0.25), (2.0, 0.5, 1.0)] {
        let m = Sym::new2(xx, xy, yy);
        let u = ConvexField::from_analytic(Grid::cube(2, 1.0, 256), None, Arc::new(Quadratic { m, b: [0.0; 3], c: 0.0 }));
        let c = u.grid.nearest([0.0; 3]);
        for h in [0.05, 0.02] {
            let sec = compute_section(&u, c, h).unwrap();
            let mn = mu_normalize_section(&u, &sec, &MeasureSpec::lebesgue()).unwrap();
            let john = john_normalize(&sec).unwrap();
            let expect = 2.0 * std::f64::consts::PI / m.det().sqrt();
            assert!((mn.alpha / john.alpha / expect - 1.0).abs() < 0.03, "{} vs {expect}", mn.alpha / john.alpha);
            assert!((mn.mass - sec.measure).abs() < 1e-12);
        }
    }
}

#[test]
fn section_on_zero_line_has_no_mass() {
    // Sections of a very steep x-profile contain only nodes on {x_1 = 0}.
    let q = Quadratic { m: Sym::new2(1e4, 0.0, 1.0), b: [0.0; 3], c: 0.0 };
    let u = ConvexField::from_analytic(Grid::cube(2, 1.0, 64), None, Arc::new(q));
    let sec = compute_section(&u, u.grid.nearest([0.0; 3]), 0.01).unwrap();
    assert!(sec.nodes.iter().all(|&i| u.grid.point(i as usize)[0] == 0.0));
    assert!(matches!(mu_normalize_section(&u, &sec, &MeasureSpec::power_x1(1.0)), Err(Error::ZeroMuMass)));
}

#[test]
fn lebesgue_pipeline_matches_bounded_solve() {
    let d = disk();
    let cfg = Thm2Config { cells: 64, sampler: small_sampler(0), ..Default::default() };
    let (u, rep) = thm2_pipeline(&d, &MeasureSpec::lebesgue(), &cfg).unwrap();
    assert!((rep.doubling.beta - 1.0).abs() < 1e-12);
    // mu(Omega) = pi on the disk, rescaled to 1: the equation is det D^2 u = 1 / pi up to quadrature.
    let g = u.grid.clone();
    let (spec, _) = mu_rhs(&MeasureSpec::lebesgue(), &g, &d);
    let (v, _) = solve_dirichlet(&g, &d, &RhsSpec::constant(spec.density([0.0; 3])), &cfg.solver).unwrap();
    let diff = u.values.iter().zip(&v.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff}");
    assert!((spec.density([0.0; 3]) * std::f64::consts::PI - 1.0).abs() < 0.02);
}

#[test]
fn degenerate_pipeline_completes() {
    let cfg = Thm2Config { cells: 64, sampler: small_sampler(0), ..Default::default() };
    let (_, rep) = thm2_pipeline(&disk(), &MeasureSpec::power_x1(1.0), &cfg).unwrap();
    assert!(rep.doubling.certified());
    assert!(rep.good.measure > 0.0);
    assert!(rep.decay.tau > 0.0 && rep.decay.tau <= 1.0);
}

#[test]
fn measure_spec_validation() {
    let bad = r#"{"terms":[{"lambda":1.0,"big_lambda":1.0,"weight":{"kind":"constant","value":1.0},"poly":[{"coef":0.0,"powers":[1,0,0]}],"alpha":1.0}]}"#;
    assert!(matches!(MeasureSpec::from_json(bad), Err(Error::Config(_))));
    let neg = r#"{"terms":[{"lambda":1.0,"big_lambda":1.0,"weight":{"kind":"constant","value":1.0},"poly":[{"coef":1.0,"powers":[1,0,0]}],"alpha":-1.0}]}"#;
    assert!(matches!(MeasureSpec::from_json(neg), Err(Error::Config(_))));
    let ok = r#"{"terms":[{"lambda":1.0,"big_lambda":1.0,"weight":{"kind":"constant","value":1.0},"poly":[{"coef":1.0,"powers":[1,0,0]}],"alpha":1.0}]}"#;
    let m = MeasureSpec::from_json(ok).unwrap();
    assert!((m.density([-0.5, 0.3, 0.0]) - 0.5).abs() < 1e-15);
    let g = Grid::cube(2, 1.0, 64);
    let n = m.normalized(&g, &square());
    assert!(mu_of_set(&n, &g, &mask(&g, |p| square().contains(p))) <= 1.0 + 1e-12);
}
