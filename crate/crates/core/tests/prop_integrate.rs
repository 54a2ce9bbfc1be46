use headgrow::grid::{Grid, Mask};
use headgrow::integrate::*;
use headgrow::photometric::NormalField;
use nalgebra::Vector3;
use proptest::prelude::*;

/// Normals whose forward differences reproduce `z` exactly.
fn forward_field(w: usize, h: usize, z: &impl Fn(f64, f64) -> f64, mask: &Mask) -> NormalField {
    let normals = Grid::from_fn(w, h, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let gx = z(xf + 1.0, yf) - z(xf, yf);
        let gy = z(xf, yf + 1.0) - z(xf, yf);
        mask.get(x, y).then(|| Vector3::new(-gx, -gy, 1.0).normalize())
    });
    NormalField::from_normals(&normals)
}

fn wavy(a: f64, b: f64, c: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| a * (0.3 * x).sin() + b * (0.25 * y).cos() + c * 0.01 * x * y
}

fn forward() -> IntegrationOptions {
    IntegrationOptions {
        scheme: GradientScheme::Forward,
        ..Default::default()
    }
}

fn random_mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.8), w * h).prop_map(move |v| Grid::from_vec(w, h, v))
}

fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
    Grid::from_fn(w, h, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
}

fn rms_offset_free(z: &[f64], truth: &[f64]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().zip(truth).map(|(a, b)| a - b).sum::<f64>() / n;
    (z.iter().zip(truth).map(|(a, b)| (a - b - mean).powi(2)).sum::<f64>() / n).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shifting_depth_leaves_the_residual(a in -1.0..1.0f64, b in -1.0..1.0f64, shift in -50.0..50.0f64, mask in random_mask(14, 12)) {
        prop_assume!(mask.count() > 0);
        let field = forward_field(14, 12, &wavy(a, b, 0.5), &mask);
        let system = build_gradient_system(&field, &IntegrationOptions::default()).unwrap();
        let z: Vec<f64> = (0..system.n_unknowns()).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let (r0, r1) = (system.residual_sq(&z), system.residual_sq(&shifted));
        prop_assert!((r0 - r1).abs() <= 1e-9 * (1.0 + r0));
    }

    #[test]
    fn planes_integrate_exactly_on_any_mask(gx in -2.0..2.0f64, gy in -2.0..2.0f64, mask in random_mask(16, 16)) {
        prop_assume!(mask.count() > 1);
        let n = Vector3::new(-gx, -gy, 1.0).normalize();
        let field = NormalField::from_normals(&mask.map(|&m| m.then_some(n)));
        let depth = integrate_normals(&field, None, &IntegrationOptions::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let Some(z) = depth.get(x, y) else { continue };
                if let Some(zr) = (x + 1 < 16).then(|| depth.get(x + 1, y)).flatten() {
                    prop_assert!((zr - z - gx).abs() < 1e-6, "({x},{y}) {} vs {gx}", zr - z);
                }
                if let Some(zd) = (y + 1 < 16).then(|| depth.get(x, y + 1)).flatten() {
                    prop_assert!((zd - z - gy).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn consistent_fields_integrate_exactly(
        a in -1.0..1.0f64,
        b in -1.0..1.0f64,
        c in -1.0..1.0f64,
        x0 in 0usize..5, y0 in 0usize..5, x1 in 10usize..20, y1 in 10usize..18,
    ) {
        let (w, h) = (20, 18);
        let z = wavy(a, b, c);
        let mask = rect_mask(w, h, x0, y0, x1, y1);
        let field = forward_field(w, h, &z, &mask);
        let system = build_gradient_system(&field, &forward()).unwrap();
        let sol = solve_system(&system, None, &forward(), None).unwrap();
        prop_assert!(sol.relative_residual < 1e-8);
        let truth: Vec<f64> = system.unknowns.iter().map(|&i| {
            let (x, y) = mask.coords(i);
            z(x as f64, y as f64)
        }).collect();
        prop_assert!(rms_offset_free(&sol.z, &truth) < 1e-6);
    }

    #[test]
    fn rows_are_sparse_and_annihilate_constants(
        raw in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -0.2..1.0f64), 12 * 10),
        scheme in prop::sample::select(vec![GradientScheme::Midpoint, GradientScheme::Forward]),
    ) {
        let normals = Grid::from_vec(12, 10, raw.into_iter().map(|(x, y, z)| {
            let v = Vector3::new(x, y, z);
            (v.norm() > 0.1).then(|| v.normalize())
        }).collect());
        let field = NormalField::from_normals(&normals);
        prop_assume!(field.valid_count() > 0);
        let opts = IntegrationOptions { scheme, ..Default::default() };
        let system = build_gradient_system(&field, &opts).unwrap();
        for r in &system.rows {
            prop_assert!((1..=3).contains(&r.len));
            prop_assert!(r.entries().all(|(c, v)| c < system.n_unknowns() && v.is_finite()));
        }
        let ones = vec![1.0; system.n_unknowns()];
        prop_assert!(system.apply(&ones).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stronger_boundary_weights_pull_closer(a in -1.0..1.0f64, b in -1.0..1.0f64, bump in 0.5..5.0f64) {
        let (w, h) = (16, 14);
        let z = wavy(a, b, 0.3);
        let mask = Grid::filled(w, h, true);
        let field = forward_field(w, h, &z, &mask);
        let region = rect_mask(w, h, 0, 0, 7, 13);
        // Dirichlet data that disagrees with the normals
        let z0 = Grid::from_fn(w, h, |x, y| z(x as f64, y as f64) + bump * (0.5 * x as f64).sin());
        let system = build_gradient_system(&field, &forward()).unwrap();
        let deviation = |weight: f64| {
            let bc = BoundaryConstraint::uniform(&z0, &region, weight);
            let sol = solve_system(&system, Some(&bc), &forward(), None).unwrap();
            system.unknowns.iter().zip(&sol.z)
                .filter(|(&i, _)| region.as_slice()[i])
                .map(|(&i, v)| (v - z0.as_slice()[i]).powi(2))
                .sum::<f64>()
        };
        let d: Vec<f64> = [0.01, 0.1, 1.0].map(deviation).to_vec();
        prop_assert!(d[1] <= d[0] * (1.0 + 1e-6) && d[2] <= d[1] * (1.0 + 1e-6), "{d:?}");
    }

    #[test]
    fn resolving_never_increases_the_objective(a in -1.0..1.0f64, b in -1.0..1.0f64, weight in 0.0..1.0f64) {
        let (w, h) = (14, 14);
        let z = wavy(a, b, 0.0);
        let mask = Grid::filled(w, h, true);
        // a deliberately inconsistent field: slopes from one surface, offsets from another
        let field = forward_field(w, h, &|x, y| z(x, y) + 0.2 * (x * y).sqrt(), &mask);
        let region = rect_mask(w, h, 0, 0, 13, 3);
        let bc = BoundaryConstraint::uniform(&Grid::from_fn(w, h, |x, y| z(x as f64, y as f64)), &region, weight);
        let system = build_gradient_system(&field, &IntegrationOptions::default()).unwrap();
        let opts = IntegrationOptions::default();
        let first = solve_system(&system, Some(&bc), &opts, None).unwrap();
        let again = solve_system(&system, Some(&bc), &opts, Some(&first.z)).unwrap();
        let (f1, f2) = (objective(&system, Some(&bc), &first.z), objective(&system, Some(&bc), &again.z));
        prop_assert!(f2 <= f1 * (1.0 + 1e-9) + 1e-12, "{f1} -> {f2}");
    }

    #[test]
    fn blend_weights_follow_distance(mask in random_mask(18, 15), band in 0.5..8.0f64) {
        prop_assume!(mask.count() > 0);
        let weights = make_blend_mask(&mask, band).unwrap();
        let dist = squared_distance_to_background(&mask);
        let mut inside: Vec<(f64, f64)> = Vec::new();
        for i in 0..mask.len() {
            let wv = weights.as_slice()[i];
            prop_assert!((0.0..=1.0).contains(&wv));
            if mask.as_slice()[i] {
                inside.push((dist.as_slice()[i], wv));
            } else {
                prop_assert_eq!(wv, 0.0);
            }
        }
        inside.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
        prop_assert!(inside.windows(2).all(|p| p[0].1 <= p[1].1));
    }

    #[test]
    fn undefined_references_carry_no_weight(defined in random_mask(10, 9), weight in 0.0..1.0f64) {
        let z0 = defined.map(|&d| d.then_some(1.5));
        let bc = BoundaryConstraint::new(&z0, &Grid::filled(10, 9, weight));
        for (&d, &wv) in defined.iter().zip(bc.weights.iter()) {
            prop_assert_eq!(wv, if d { weight } else { 0.0 });
        }
    }
}

#[test]
fn blend_mask_of_an_empty_region_fails() {
    assert!(matches!(
        make_blend_mask(&Grid::filled(4, 4, false), 3.0),
        Err(headgrow::Error::EmptyRegion)
    ));
}
