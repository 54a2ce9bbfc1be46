use headgrow::ambiguity::*;
use headgrow::grid::Grid;
use headgrow::photometric::NormalField;
use nalgebra::{Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw vectors `[ambient, albedo n]` with varying ambient and albedo, so
/// the four components are linearly independent over the field.
fn field(seed: u64, w: usize, h: usize) -> NormalField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw4 = Grid::from_fn(w, h, |_, _| {
        let n = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0)).normalize();
        let albedo = rng.gen_range(0.3..1.0);
        let ambient = rng.gen_range(0.05..0.4);
        Vector4::new(ambient, albedo * n.x, albedo * n.y, albedo * n.z)
    });
    let valid = Grid::from_fn(w, h, |x, y| (x * 7 + y * 3) % 11 != 0);
    NormalField::from_raw4(raw4, &valid)
}

fn transform() -> impl Strategy<Value = Matrix4<f64>> {
    prop::collection::vec(-0.5..0.5f64, 16)
        .prop_map(|v| Matrix4::identity() + Matrix4::from_iterator(v))
        .prop_filter("well conditioned", |m| condition_number(m) < 100.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn regression_inverts_a_known_transform(a0 in transform(), seed in any::<u64>()) {
        let reference = field(seed, 16, 16);
        let a0 = AmbiguityTransform::new(a0).unwrap();
        let estimated = apply_ambiguity(&a0, &reference).unwrap();
        let overlap = overlap_mask(&estimated, &reference);
        let a = solve_linear_ambiguity(&estimated, &reference, &overlap).unwrap();
        let expected = a0.matrix.try_inverse().unwrap();
        prop_assert!((a.matrix - expected).amax() < 1e-5, "{} vs {}", a.matrix, expected);
        let back = apply_ambiguity(&a, &estimated).unwrap();
        for (m, r) in back.raw4.iter().zip(reference.raw4.iter()).zip(reference.valid.iter()).filter(|(_, &v)| v).map(|(p, _)| p) {
            prop_assert!((m - r).amax() < 1e-6);
        }
    }

    #[test]
    fn applying_keeps_the_valid_set(a0 in transform(), seed in any::<u64>()) {
        let f = field(seed, 12, 9);
        let out = apply_ambiguity(&AmbiguityTransform::new(a0).unwrap(), &f).unwrap();
        prop_assert_eq!(&out.valid, &f.valid);
        for (n, &v) in out.normals.iter().zip(out.valid.iter()) {
            if v {
                prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn solution_beats_identity(a0 in transform(), seed in any::<u64>(), noise_seed in any::<u64>()) {
        let reference = field(seed, 16, 16);
        let mut estimated = apply_ambiguity(&AmbiguityTransform::new(a0).unwrap(), &reference).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for m in estimated.raw4.as_mut_slice() {
            *m += Vector4::from_fn(|_, _| rng.gen_range(-0.05..0.05));
        }
        let overlap = overlap_mask(&estimated, &reference);
        let a = solve_linear_ambiguity(&estimated, &reference, &overlap).unwrap();
        let solved = regression_objective(&a.matrix, &estimated, &reference, &overlap);
        let identity = regression_objective(&Matrix4::identity(), &estimated, &reference, &overlap);
        prop_assert!(solved <= identity * (1.0 + 1e-12));
    }
}

#[test]
fn small_overlap_is_rejected() {
    let f = field(1, 9, 9);
    let overlap = overlap_mask(&f, &f);
    assert!(overlap.count() < MIN_OVERLAP);
    assert!(matches!(
        solve_linear_ambiguity(&f, &f, &overlap),
        Err(headgrow::Error::InsufficientOverlap { .. })
    ));
}
