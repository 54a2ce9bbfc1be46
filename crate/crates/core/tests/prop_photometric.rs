use headgrow::grid::Grid;
use headgrow::grow::{solve_photometric, PipelineConfig};
use headgrow::ingest::PhotoCluster;
use headgrow::photometric::*;
use headgrow::synth::*;
use nalgebra::{DMatrix, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frontal_cluster(lights: usize, seed: u64) -> PhotoCluster {
    let scene = head_scene(&HeadSceneOptions {
        image_size: (40, 40),
        lights,
        poses: vec![0.0],
        seed,
        tessellation: (30, 60),
        ..Default::default()
    })
    .unwrap();
    let mut data = render_dataset(&scene).unwrap();
    data.clusters.clusters.remove(&0).unwrap()
}

fn random_matrix(n: usize, p: usize, noise: f64, uncovered: f64, seed: u64) -> (IntensityMatrix, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = DMatrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
    let f = DMatrix::from_fn(4, p, |_, _| rng.gen_range(-1.0..1.0));
    let values = &l * &f + DMatrix::from_fn(n, p, |_, _| noise * rng.gen_range(-1.0..1.0));
    let covered = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() >= uncovered);
    let q = IntensityMatrix {
        values,
        covered,
        pixel_index: (0..p).map(|j| (j, 0)).collect(),
        photo_ids: (0..n).map(|i| format!("p{i}")).collect(),
        region: Region::Face,
    };
    (q, l, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rank4_residual_is_the_discarded_spectrum(
        n in 4usize..20,
        p in 8usize..80,
        noise in 0.0..0.3f64,
        uncovered in 0.0..0.2f64,
        seed in any::<u64>(),
    ) {
        let (q, _, _) = random_matrix(n, p, noise, uncovered, seed);
        let fact = factor_rank4(&q).unwrap();
        let imputed = q.imputed();
        let residual = (&imputed - &fact.lighting.coefficients * &fact.factors).norm_squared();
        let tail = fact.tail_energy();
        let total = imputed.norm_squared();
        prop_assert!((residual - tail).abs() <= 1e-6 * tail + 1e-12 * total, "{residual} vs {tail}");
        prop_assert!(fact.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn lighting_columns_follow_brightness(n in 4usize..20, p in 8usize..60, seed in any::<u64>()) {
        let (q, _, _) = random_matrix(n, p, 0.05, 0.0, seed);
        let fact = factor_rank4(&q).unwrap();
        let imputed = q.imputed();
        for c in 0..4 {
            let corr: f64 = (0..n).map(|i| fact.lighting.coefficients[(i, c)] * imputed.row(i).mean()).sum();
            prop_assert!(corr >= 0.0);
        }
    }

    #[test]
    fn raw_fields_are_consistent(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw4 = Grid::from_fn(w, h, |_, _| Vector4::from_fn(|_, _| rng.gen_range(-2.0..2.0)));
        let valid = Grid::from_fn(w, h, |x, y| (x + 2 * y) % 3 != 0);
        let field = NormalField::from_raw4(raw4, &valid);
        check_field(&field)?;
    }
}

fn check_field(field: &NormalField) -> Result<(), TestCaseError> {
    for i in 0..field.valid.len() {
        if !field.valid.as_slice()[i] {
            continue;
        }
        let n = field.normals.as_slice()[i];
        let a = field.albedo.as_slice()[i];
        let m = field.raw4.as_slice()[i];
        prop_assert!((n.norm() - 1.0).abs() < 1e-9);
        prop_assert!(a >= 0.0);
        for k in 0..3 {
            prop_assert!((a * n[k] - m[k + 1]).abs() <= 1e-9 * (1.0 + a));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn estimated_fields_are_consistent(lights in 6usize..16, seed in 0u64..1000) {
        let cluster = frontal_cluster(lights, seed);
        let solve = solve_photometric(&cluster, &PipelineConfig::default()).unwrap();
        prop_assert!(solve.field.valid_count() > 0);
        check_field(&solve.field)?;
    }

    #[test]
    fn gate_admits_more_photos_as_it_widens(seed in 0u64..1000, m1 in 0.5..3.0f64, dm in 0.0..3.0f64) {
        let cluster = frontal_cluster(12, seed);
        let q = build_intensity_matrix(&cluster, &cluster.face_mask.clone().unwrap(), Region::Face).unwrap();
        let fact = factor_rank4(&q).unwrap();
        let gate = |multiplier| GateOptions { multiplier, iterations: 1, n_over_3: false };
        let narrow = estimate_pixel_normals(&cluster, &fact.lighting, &cluster.average.valid, gate(m1));
        let wide = estimate_pixel_normals(&cluster, &fact.lighting, &cluster.average.valid, gate(m1 + dm));
        for (a, b) in narrow.selected.iter().zip(wide.selected.iter()) {
            prop_assert!(a <= b);
        }
    }
}

#[test]
fn solve_is_deterministic_across_worker_counts() {
    let cluster = frontal_cluster(10, 3);
    let cfg = PipelineConfig::default();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| solve_photometric(&cluster, &cfg).unwrap())
    };
    let (a, b, c) = (run(1), run(4), run(4));
    assert_eq!(a.field, b.field);
    assert_eq!(b.field, c.field);
    assert_eq!(a.lighting, b.lighting);
    assert_eq!(a.selected, b.selected);
}

#[test]
fn too_few_photos_fail() {
    let cluster = frontal_cluster(3, 1);
    assert!(matches!(
        solve_photometric(&cluster, &PipelineConfig::default()),
        Err(headgrow::Error::TooFewPhotos { found: 3, .. })
    ));
}
