use std::sync::OnceLock;

use headgrow::manifest::Light;
use headgrow::synth::*;
use headgrow::HeadMesh;
use nalgebra::{Point3, Vector3};
use proptest::prelude::*;

fn scene() -> &'static SyntheticScene {
    static SCENE: OnceLock<SyntheticScene> = OnceLock::new();
    SCENE.get_or_init(|| {
        head_scene(&HeadSceneOptions {
            image_size: (48, 48),
            lights: 4,
            tessellation: (30, 60),
            ..Default::default()
        })
        .unwrap()
    })
}

fn pose() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0])
}

fn direction() -> impl Strategy<Value = [f64; 3]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 0.01)
        .prop_map(|(x, y, z)| Vector3::new(x, y, z).normalize().into())
}

/// Two axis-aligned squares facing the camera at depths `z1` and `z2`.
fn two_planes(z1: f64, half1: f64, z2: f64, half2: f64) -> HeadMesh {
    let quad = |z: f64, h: f64| [(-h, -h), (h, -h), (h, h), (-h, h)].map(|(x, y)| Point3::new(x, y, z));
    let vertices: Vec<_> = quad(z1, half1).into_iter().chain(quad(z2, half2)).collect();
    // wound so the faces point toward +z
    let faces = vec![[0, 2, 1], [0, 3, 2], [4, 6, 5], [4, 7, 6]];
    HeadMesh::new(vertices, faces, 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn radiance_is_bounded(
        pose in pose(),
        direction in direction(),
        ambient in 0.0..0.5f64,
        intensity in 0.0..1.5f64,
        albedo in 0.01..1.0f64,
    ) {
        let mut s = scene().clone();
        s.albedo = Albedo::Uniform(albedo);
        let geo = PoseRender::new(&s, pose).unwrap();
        let light = Light { direction, intensity, ambient };
        let bound = 255.0 * albedo * (ambient + intensity);
        for (&r, &q) in geo.radiance(&light).iter().zip(geo.shade(&light).iter()) {
            prop_assert!(r >= 0.0 && r <= bound + 1e-9, "{r} > {bound}");
            prop_assert!((0.0..=255.0).contains(&q));
        }
    }

    #[test]
    fn ground_truth_normals_are_unit(pose in pose()) {
        let geo = PoseRender::new(scene(), pose).unwrap();
        let field = geo.gt_normals();
        prop_assert!(field.valid_count() > 0);
        for (n, &v) in field.normals.iter().zip(field.valid.iter()) {
            if v {
                prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
        for n in geo.normals.iter().flatten() {
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn light_contributions_add(
        pose in pose(),
        direction in direction(),
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let geo = PoseRender::new(scene(), pose).unwrap();
        let light = |intensity| Light { direction, intensity, ambient: 0.0 };
        let (ra, rb, rab) = (geo.radiance(&light(a)), geo.radiance(&light(b)), geo.radiance(&light(a + b)));
        for ((x, y), z) in ra.iter().zip(rb.iter()).zip(rab.iter()) {
            prop_assert!((x + y - z).abs() < 1e-9);
        }
    }

    #[test]
    fn nearer_surface_wins(z1 in -20.0..20.0f64, gap in 0.5..15.0f64, half1 in 3.0..10.0f64, half2 in 3.0..10.0f64, near_first in any::<bool>()) {
        let (near, far) = (z1 + gap, z1);
        let (z_a, z_b) = if near_first { (near, far) } else { (far, near) };
        let mesh = two_planes(z_a, half1, z_b, half2);
        let geo = render_geometry(&mesh, &Albedo::Uniform(1.0), &[0; 7], (32, 32), 0.0).unwrap();
        let (h_near, h_far) = if near_first { (half1, half2) } else { (half2, half1) };
        let c = 15.5;
        for y in 0..32 {
            for x in 0..32 {
                let (dx, dy) = ((x as f64 - c).abs(), (y as f64 - c).abs());
                let d = *geo.depth.get(x, y);
                // stay clear of the edges, where coverage rules decide
                if dx < h_near - 0.6 && dy < h_near - 0.6 {
                    prop_assert!((d.unwrap() - near).abs() < 1e-9, "({x},{y}) {d:?} vs {near}");
                } else if (dx > h_near + 0.6 || dy > h_near + 0.6) && dx < h_far - 0.6 && dy < h_far - 0.6 {
                    prop_assert!((d.unwrap() - far).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn one_photo_per_light_and_pose() {
    let data = render_dataset(scene()).unwrap();
    assert_eq!(data.clusters.total_photos(), 4 * 7);
    assert_eq!(data.truth.len(), 7);
}
