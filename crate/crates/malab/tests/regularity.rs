use std::sync::{Arc, OnceLock};

use malab::domain::{build_domain, ShapeDescriptor};
use malab::field::*;
use malab::grid::Grid;
use malab::regularity::*;
use malab::sections::compute_section;
use malab::solver::{solve_dirichlet, RhsSpec, SolverConfig};
use malab::wang::{wang_construct, WangSolution};
use malab::Error;
use proptest::prelude::*;

fn wang(alpha: f64) -> &'static WangSolution {
    static W3: OnceLock<WangSolution> = OnceLock::new();
    static W9: OnceLock<WangSolution> = OnceLock::new();
    let cell = if alpha == 3.0 { &W3 } else { &W9 };
    cell.get_or_init(|| wang_construct(alpha, 1e-6).unwrap())
}

fn wang_family(alpha: f64) -> Vec<NormSamples> {
    [10, 12, 14].iter().map(|&d| wang_samples(&wang(alpha).field, 128, d)).collect()
}

fn paraboloid(half: f64, cells: usize) -> ConvexField {
    let q = Quadratic { m: Sym::new2(1.0, 0.0, 1.0), b: [0.0; 3], c: 0.0 };
    ConvexField::from_analytic(Grid::cube(2, half, cells), None, Arc::new(q))
}

fn interior(u: &ConvexField) -> Vec<bool> {
    u.kind.iter().map(|k| *k == NodeKind::Interior).collect()
}

fn samples(norms: &[f64], weights: &[f64]) -> NormSamples {
    NormSamples { norms: norms.to_vec(), weights: weights.to_vec() }
}

/// Hessian field with prescribed norms on a small grid.
fn norm_field(norms: &[f64]) -> HessianField {
    let cells = (norms.len() as f64).sqrt().ceil() as usize;
    let grid = Grid::box2([1.0, 1.0], [cells, cells]);
    let len = grid.len();
    let mut norm = vec![0.0; len];
    norm[..norms.len()].copy_from_slice(norms);
    let h = norm.iter().map(|v| Sym::diag(2, [*v, *v, 0.0])).collect();
    let valid = (0..len).map(|i| i < norms.len()).collect();
    HessianField { grid, h, norm, valid, one_sided: vec![false; len] }
}

#[test]
fn unit_hessian_has_only_the_base_level() {
    let u = paraboloid(1.0, 32);
    let h = hessian(&u).unwrap();
    let region = interior(&u);
    let d = level_decompose(&h, &region, 2.0, None).unwrap();
    assert_eq!(d.sets[0].len(), region.iter().filter(|r| **r).count());
    assert!(d.sets[1..].iter().all(|s| s.is_empty()));
    assert!(matches!(measure_decay_check(&d), Err(Error::InsufficientLevels(1))));
    let rep = decay_iterate(&u, &h, &compute_section(&u, u.grid.nearest([0.0; 3]), 0.1).unwrap(), &d, 0.125, 4.0).unwrap();
    assert!(rep.steps.is_empty());
    assert_eq!(rep.contraction_max, 0.0);
}

#[test]
fn zero_level_count_gives_base_energy() {
    let norms: Vec<f64> = (0..50).map(|i| 0.5 + 0.1 * i as f64).collect();
    let h = norm_field(&norms);
    let region = vec![true; h.grid.len()];
    let d = level_decompose(&h, &region, 4.0, Some(0)).unwrap();
    assert_eq!(d.levels.len(), 1);
    let cell = h.grid.cell_volume();
    let expect: f64 = norms.iter().filter(|v| **v >= 1.0).sum::<f64>() * cell;
    assert!((d.levels[0].energy - expect).abs() < 1e-12 * expect);
}

#[test]
fn synthetic_measure_decay_inverts_exactly() {
    // |D_k| = M^{-(1 + 2 eps) k} |D_0| with eps = 0.1.
    let m: f64 = 4.0;
    let r = m.powf(-1.2);
    let (mut norms, mut weights) = (Vec::new(), Vec::new());
    let top = 6;
    for k in 0..=top {
        let band = if k < top { r.powi(k) - r.powi(k + 1) } else { r.powi(k) };
        for _ in 0..4 {
            norms.push(m.powi(k));
            weights.push(band / 4.0);
        }
    }
    let d = level_decompose_samples(&samples(&norms, &weights), m, None).unwrap();
    let md = measure_decay_check(&d).unwrap();
    assert_eq!(md.levels_used, top as usize + 1);
    assert!((md.eps_fit - 0.1).abs() < 1e-12, "{}", md.eps_fit);
    assert!((md.eps_slope.unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn integral_of_unit_norm_is_the_measure() {
    let s = samples(&[1.0; 10], &[0.3; 10]);
    for eps in [0.0, 0.25, 1.0, 3.0] {
        let w = w21eps_samples(&s, eps).unwrap();
        assert!((w.direct - 3.0).abs() < 1e-12 && (w.layer_cake - 3.0).abs() < 1e-9);
    }
}

#[test]
fn two_valued_integral() {
    let (m1, m2) = (0.7, 0.05);
    let s = samples(&[1.0, 8.0], &[m1, m2]);
    let w = w21eps_samples(&s, 1.0 / 3.0).unwrap();
    assert!((w.direct - (m1 + 16.0 * m2)).abs() < 1e-12);
    assert!(w.rel_diff < LAYER_CAKE_TOL);
}

#[test]
fn homogeneous_level_measures_decay_with_predicted_slope() {
    // |D_k| ~ M^{-2k} for alpha = 3; the log-linear fit over all levels at M = 16.
    let s = &wang_family(3.0)[2];
    let d = level_decompose_samples(s, 16.0, None).unwrap();
    let md = measure_decay_check(&d).unwrap();
    let slope = -(1.0 + 2.0 * md.eps_slope.unwrap());
    assert!((slope + 2.0).abs() < 0.15 * 2.0, "{slope}");
}

#[test]
fn homogeneous_tail_beats_k_log_k() {
    let s = &wang_family(3.0)[2];
    let d = level_decompose_samples(s, 4.0, None).unwrap();
    let t = tail_bound_check(&d);
    let slope = t.slope.unwrap();
    assert!((slope + 2.0).abs() < 0.2, "{slope}");
    // |F_K| K log K shrinks as K grows: the margin of the bound widens.
    let scaled: Vec<f64> = t.points.iter().map(|(k, f)| f * k * k.ln()).collect();
    let n = scaled.len();
    assert!(n >= 8);
    assert!(scaled[n - 1] < scaled[n / 2] && scaled[n / 2] < scaled[0], "{scaled:?}");
}

#[test]
fn quadratic_tail_is_empty() {
    let u = paraboloid(1.0, 32);
    let h = hessian(&u).unwrap();
    let d = level_decompose(&h, &interior(&u), 4.0, None).unwrap();
    assert!(d.tails.iter().all(|t| t.measure == 0.0));
    let t = tail_bound_check(&d);
    assert!(t.points.is_empty() && t.c_uniform == 0.0);
}

#[test]
fn energies_resum_level_bands() {
    // With bands B_j = D_j minus D_{j+1} below the last level L:
    // sum_j M^j |B_j| + M^L |D_L| <= E_k <= sum_j M^{j+1} |B_j| + E_L.
    let s = &wang_family(3.0)[1];
    let m = 4.0;
    let d = level_decompose_samples(s, m, Some(10)).unwrap();
    let lv = &d.levels;
    let last = lv.len() - 1;
    for k in 0..last {
        let bands: Vec<(f64, f64)> =
            (k..last).map(|j| (m.powi(j as i32), lv[j].measure - lv[j + 1].measure)).collect();
        let lower = bands.iter().map(|(t, b)| t * b).sum::<f64>() + m.powi(last as i32) * lv[last].measure;
        let upper = bands.iter().map(|(t, b)| m * t * b).sum::<f64>() + lv[last].energy;
        let e = lv[k].energy;
        assert!(e >= lower * (1.0 - 1e-12) && e <= upper * (1.0 + 1e-12), "k = {k}: {lower} {e} {upper}");
    }
    // Energies decay geometrically at the rate of the measure tail, M^{-1} per level.
    let ratio = lv[8].energy / lv[4].energy;
    assert!((ratio.ln() / (4.0 * m.ln()) + 1.0).abs() < 0.15, "{ratio}");
}

#[test]
fn homogeneous_epsilon_estimate_brackets_sharp_exponent() {
    let e3 = epsilon_estimate_samples(&wang_family(3.0)).unwrap();
    assert!(e3.eps > 0.0 && e3.eps >= 0.5 && e3.eps <= 2.0, "{}", e3.eps);
    let e9 = epsilon_estimate_samples(&wang_family(9.0)).unwrap();
    assert!(e9.eps < e3.eps, "{} vs {}", e9.eps, e3.eps);
}

#[test]
fn homogeneous_integral_diverges_past_sharp_exponent() {
    let t = epsilon_table(&wang_family(3.0)).unwrap();
    for r in &t.table {
        if 1.0 + r.eps > 2.0 {
            assert!(!r.stable && r.norms.windows(2).all(|w| w[1] > w[0]), "{r:?}");
        } else if 1.0 + r.eps < 2.0 - 0.25 {
            assert!(r.stable, "{r:?}");
        }
    }
}

#[test]
fn quadratic_stable_at_every_epsilon() {
    let fam: Vec<NormSamples> = [16, 32, 64]
        .iter()
        .map(|&c| {
            let u = paraboloid(1.0, c);
            NormSamples::from_hessian(&hessian(&u).unwrap(), &interior(&u))
        })
        .collect();
    let e = epsilon_estimate_samples(&fam).unwrap();
    assert!(e.table.iter().all(|r| r.stable));
    assert_eq!(e.eps, 2f64.powi(*EPS_EXPONENTS.end()));
    assert!(matches!(epsilon_estimate_samples(&fam[..2]), Err(Error::Config(_))));
}

#[test]
fn basic_inequality_on_paraboloid() {
    let u = paraboloid(2.0, 128);
    let h = hessian(&u).unwrap();
    let c = u.grid.nearest([0.0; 3]);
    let base = compute_section(&u, c, 1.0).unwrap();
    let delta = 0.125;
    let r = lemma_basic_check(&u, &h, &base, &base, delta).unwrap();
    // ||D^2 u|| = 1 and Delta u = 2 on the disk of radius sqrt 2.
    assert!((r.lhs - base.measure).abs() < 1e-9 * base.measure);
    assert!((r.trace_integral - 2.0 * base.measure).abs() < 1e-9 * base.measure);
    // The good set is all of S_delta, so C0 is the dyadic ceiling of 1 / delta.
    assert!(r.c0 <= 2.0 / delta, "{}", r.c0);
    let sc = lemma_basic_sc_check(&u, &h, &compute_section(&u, c, 0.5).unwrap(), &base, delta).unwrap();
    let plain = lemma_basic_check(&u, &h, &compute_section(&u, c, 0.5).unwrap(), &base, delta).unwrap();
    assert!((sc.alpha - 1.0).abs() < 0.02);
    assert_eq!(sc.direct.c0, plain.c0);
    assert!((sc.direct.lhs - plain.lhs).abs() < 1e-12);
}

#[test]
fn basic_constant_stable_under_refinement() {
    let d = build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 }).unwrap();
    let c0: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&cells| {
            let g = Grid::cube(2, 1.01, cells);
            let rhs = RhsSpec::density("bumpy", 0.5, 1.5, Arc::new(|p| 1.0 + 0.5 * (3.0 * p[0]).sin()));
            let (u, _) = solve_dirichlet(&g, &d, &rhs, &SolverConfig::default()).unwrap();
            let h = hessian(&u).unwrap();
            let base = compute_section(&u, g.nearest([0.0; 3]), 0.25).unwrap();
            lemma_basic_check(&u, &h, &base, &base, 0.125).unwrap().c0
        })
        .collect();
    for w in c0.windows(2) {
        assert!((w[1] / w[0]).log2().abs() <= 1.0, "{c0:?}");
    }
}

#[test]
fn rescaled_route_matches_direct_on_quadratic() {
    let q = Quadratic { m: Sym::new2(4.0, 0.0, 0.25), b: [0.0; 3], c: 0.0 };
    let u = ConvexField::from_analytic(Grid::cube(2, 2.0, 256), None, Arc::new(q));
    let h = hessian(&u).unwrap();
    let c = u.grid.nearest([0.0; 3]);
    let sec = compute_section(&u, c, 0.1).unwrap();
    let outer = compute_section(&u, c, 0.2).unwrap();
    let r = lemma_basic_sc_check(&u, &h, &sec, &outer, 0.125).unwrap();
    assert!((r.alpha - 4.0).abs() < 0.1, "{}", r.alpha);
    assert!(r.lhs_rel_diff < RESCALE_TOL && r.good_rel_diff < RESCALE_TOL, "{} {}", r.lhs_rel_diff, r.good_rel_diff);
    assert_eq!(r.direct.c0, r.rescaled.c0);
}

#[test]
fn homogeneous_section_off_axis_passes() {
    let w = wang(3.0);
    let b = w.field.level_box(1.0);
    let g = Grid::box2([1.05 * b[0], 1.05 * b[1]], [257, 257]);
    let u = ConvexField::from_analytic(g.clone(), None, Arc::new(w.field.clone()));
    let h = hessian(&u).unwrap();
    let c = g.nearest([0.3 * b[0], 0.3 * b[1], 0.0]);
    let sec = compute_section(&u, c, 0.02).unwrap();
    let outer = compute_section(&u, c, 0.04).unwrap();
    let r = lemma_basic_sc_check(&u, &h, &sec, &outer, 0.125).unwrap();
    assert!(r.direct.good > 0.0);
    assert!(r.direct.c0 <= 64.0, "{}", r.direct.c0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn levels_nested(norms in prop::collection::vec(0.01f64..1e4, 16..200), m in 1.5f64..20.0) {
        let h = norm_field(&norms);
        let region: Vec<bool> = (0..h.grid.len()).map(|i| i % 7 != 3).collect();
        let d = level_decompose(&h, &region, m, None).unwrap();
        for w in d.sets.windows(2) {
            prop_assert!(malab::sections::sorted_subset(&w[1], &w[0]));
        }
        for w in d.levels.windows(2) {
            prop_assert!(w[1].energy <= w[0].energy);
        }
        for i in 0..norms.len() {
            if region[i] && norms[i] >= 1.0 {
                prop_assert!(d.sets[0].contains(&(i as u32)));
            }
        }
    }

    #[test]
    fn layer_cake_agrees(
        norms in prop::collection::vec(0.01f64..1e3, 1..300), eps in 0.0f64..3.0,
    ) {
        let weights: Vec<f64> = (0..norms.len()).map(|i| 0.001 * (1.0 + (i % 5) as f64)).collect();
        let w = w21eps_samples(&samples(&norms, &weights), eps);
        prop_assert!(w.is_ok(), "{:?}", w);
    }

    #[test]
    fn integral_monotone_in_epsilon(
        norms in prop::collection::vec(0.01f64..1e3, 1..100), e1 in 0.0f64..2.0, de in 0.0f64..2.0,
    ) {
        let clamped: Vec<f64> = norms.iter().map(|v| v.max(1.0)).collect();
        let s = samples(&clamped, &vec![0.01; clamped.len()]);
        let a = w21eps_samples(&s, e1).unwrap().direct;
        let b = w21eps_samples(&s, e1 + de).unwrap().direct;
        prop_assert!(b >= a * (1.0 - 1e-12));
    }

    #[test]
    fn measure_decay_exact_on_geometric_levels(eps in 0.01f64..1.0, m in 2.0f64..16.0) {
        let r = m.powf(-(1.0 + 2.0 * eps));
        let (mut norms, mut weights) = (Vec::new(), Vec::new());
        for k in 0..=4 {
            let band = if k < 4 { r.powi(k) - r.powi(k + 1) } else { r.powi(k) };
            for _ in 0..4 {
                norms.push(m.powi(k) * 1.000001);
                weights.push(band / 4.0);
            }
        }
        let md = measure_decay_check(&level_decompose_samples(&samples(&norms, &weights), m, None).unwrap()).unwrap();
        prop_assert!((md.eps_fit - eps).abs() < 1e-9);
    }
}
