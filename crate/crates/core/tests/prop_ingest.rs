use std::collections::{BTreeMap, BTreeSet};

use headgrow::geometry::{fit_similarity, Similarity2};
use headgrow::grid::Grid;
use headgrow::ingest::*;
use nalgebra::Point2;
use proptest::prelude::*;

const SIZE: usize = 120;

fn layout(jitter: &[(f64, f64)]) -> Fiducials {
    let base = [(-20.0, -15.0), (20.0, -15.0), (0.0, 2.0), (-12.0, 18.0), (12.0, 18.0), (-30.0, 0.0), (30.0, 0.0)];
    let c = (SIZE as f64 - 1.0) / 2.0;
    std::array::from_fn(|i| Point2::new(c + base[i].0 + jitter[i].0, c + base[i].1 + jitter[i].1))
}

fn photo(id: &str, fid: Fiducials, azimuth: f64, seed: u64) -> Photo {
    let pixels = Grid::from_fn(SIZE, SIZE, |x, y| ((x * 31 + y * 17 + seed as usize * 7) % 251) as f64);
    let mask = Grid::from_fn(SIZE, SIZE, |x, y| (x + y + seed as usize) % 5 != 0);
    Photo::new(id, pixels, mask, fid, azimuth).unwrap()
}

fn jitter() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-4.0..4.0f64, -4.0..4.0f64), 7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aligning_to_own_fiducials_is_identity(j in jitter()) {
        let fid = layout(&j);
        let a = rigid_align(&photo("p", fid, 0.0, 1), &fid).unwrap();
        prop_assert!(a.transform.is_identity(1e-9), "{:?}", a.transform);
        prop_assert!(a.residual_rms < 1e-9);
    }

    #[test]
    fn alignment_recovers_inverse_similarity(
        j in jitter(),
        scale in 0.7..1.4f64,
        angle in -0.6..0.6f64,
        tx in -10.0..10.0f64,
        ty in -10.0..10.0f64,
    ) {
        let reference = layout(&j);
        // rotate and scale about the image center, then shift
        let c = (SIZE as f64 - 1.0) / 2.0;
        let about = Similarity2::from_params(1.0, 0.0, c, c)
            .compose(&Similarity2::from_params(scale, angle, tx, ty))
            .compose(&Similarity2::from_params(1.0, 0.0, -c, -c));
        let moved: Fiducials = reference.map(|p| about.apply(p));
        let inside = moved.iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= c * 2.0 && p.y <= c * 2.0);
        prop_assume!(inside);
        let a = rigid_align(&photo("p", moved, 0.0, 2), &reference).unwrap();
        let expected = about.inverse();
        prop_assert!(a.transform.max_param_diff(&expected) < 1e-6, "{:?} vs {:?}", a.transform, expected);
        prop_assert!(a.residual_rms < 1e-6);
        let fit = fit_similarity(&moved, &reference).unwrap();
        prop_assert!(fit.max_param_diff(&expected) < 1e-6);
    }

    #[test]
    fn average_ignores_photo_order(n in 1usize..6, rot in 0usize..6) {
        let fid = layout(&[(0.0, 0.0); 7]);
        let photos: Vec<Photo> = (0..n).map(|i| photo(&format!("p{i}"), fid, 0.0, i as u64)).collect();
        let mut shuffled = photos.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = average_photos(&photos).unwrap();
        let b = average_photos(&shuffled).unwrap();
        prop_assert_eq!(&a.valid, &b.valid);
        prop_assert_eq!(&a.counts, &b.counts);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn clusters_partition_the_photos(azimuths in prop::collection::vec(-179.0..179.0f64, 0..12)) {
        let fid = layout(&[(0.0, 0.0); 7]);
        let mut photos = vec![photo("front", fid, 3.0, 0)];
        for (i, &az) in azimuths.iter().enumerate() {
            photos.push(photo(&format!("p{i}"), fid, az, i as u64 + 1));
        }
        let expected: BTreeMap<String, i32> =
            photos.iter().map(|p| (p.id.clone(), assign_cluster(p.azimuth))).collect();
        let set = ClusterSet::from_photos(photos, &BTreeMap::new(), None).unwrap();
        prop_assert_eq!(set.total_photos(), azimuths.len() + 1);
        let mut ids = BTreeSet::new();
        for (&k, cluster) in &set.clusters {
            prop_assert!(!cluster.is_empty());
            for p in &cluster.photos {
                prop_assert!(ids.insert(p.id.clone()), "{} appears twice", p.id);
                prop_assert_eq!(expected[&p.id], k);
            }
        }
        prop_assert_eq!(ids.len(), expected.len());
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let fid = layout(&[(0.0, 0.0); 7]);
    let photos = vec![photo("a", fid, 0.0, 0), photo("a", fid, 30.0, 1)];
    assert!(ClusterSet::from_photos(photos, &BTreeMap::new(), None).is_err());
}
