use mdal::bbox::{iou, BoundingBox};
use mdal::scenes::io::{read_dataset, write_dataset};
use mdal::scenes::{generate_dataset, generate_scene, split, DatasetSpec};
use proptest::prelude::*;

fn spec(n: usize) -> DatasetSpec {
    DatasetSpec {
        n_scenes: n,
        ..DatasetSpec::default()
    }
}

#[test]
fn same_seed_same_scenes() {
    let s = spec(30);
    let a = generate_dataset(&s).unwrap();
    let b = generate_dataset(&s).unwrap();
    assert_eq!(a, b);
    for i in [0, 7, 29] {
        assert_eq!(generate_scene(&s, i).unwrap(), a[i]);
    }
    let other = generate_dataset(&DatasetSpec { seed: 1, ..s }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn class_frequencies_follow_weights() {
    let weights = [0.7, 0.1, 0.1, 0.1];
    let s = DatasetSpec {
        n_scenes: 5000,
        min_objects: 2,
        max_objects: 2,
        class_weights: weights.to_vec(),
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&s).unwrap();
    let mut counts = [0usize; 4];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        counts[o.class - 1] += 1;
    }
    let total: usize = counts.iter().sum();
    assert!(total >= 9_900, "only {total} objects");
    for (c, w) in counts.iter().zip(weights) {
        let f = *c as f64 / total as f64;
        assert!((f - w).abs() <= 0.02, "frequency {f} vs weight {w}");
    }
}

/// Tight bounding box of the bright pixels, computed straight from the image.
fn bright_extent(image: &[f64], size: usize) -> Option<BoundingBox> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in 0..size {
        for x in 0..size {
            if image[y * size + x] > 0.5 {
                ext = Some(match ext {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    ext.map(|(a, b, c, d)| BoundingBox::from_corners(a as f64, b as f64, c as f64 + 1.0, d as f64 + 1.0))
}

#[test]
fn noiseless_box_is_tight_around_the_drawn_shape() {
    // One object per scene, so the bright pixels are exactly its mask
    // (background stays below 0.4, shapes are drawn at 0.65 or above).
    let s = DatasetSpec {
        n_scenes: 200,
        min_objects: 1,
        max_objects: 1,
        pixel_noise_sd: 0.0,
        ..DatasetSpec::default()
    };
    for scene in generate_dataset(&s).unwrap() {
        assert_eq!(scene.objects.len(), 1);
        let mask = bright_extent(&scene.image, scene.size).expect("shape drawn");
        let o = &scene.objects[0];
        assert_eq!(iou(&o.bbox, &mask), 1.0, "scene {}", scene.id);
        assert_eq!(o.bbox, o.rendered);
    }
}

#[test]
fn jittered_labels_stay_in_frame() {
    let base = spec(50);
    let jittered = DatasetSpec {
        box_jitter_sd: 2.0,
        ..base.clone()
    };
    assert!(generate_dataset(&base).unwrap().iter().flat_map(|s| &s.objects).all(|o| !o.jittered));
    let noisy = generate_dataset(&jittered).unwrap();
    let mut moved = 0;
    for n in &noisy {
        for on in &n.objects {
            assert!(on.jittered);
            assert!(on.bbox.within(64.0) && on.bbox.w >= 1.0 && on.bbox.h >= 1.0);
            if on.bbox != on.rendered {
                moved += 1;
            }
        }
    }
    assert!(moved > 0);
}

#[test]
fn dataset_round_trips_through_disk() {
    let s = DatasetSpec {
        occlusion_prob: 0.5,
        box_jitter_sd: 1.5,
        ..spec(12)
    };
    let scenes = generate_dataset(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s, &scenes).unwrap();
    let (spec_back, scenes_back) = read_dataset(dir.path()).unwrap();
    assert_eq!(spec_back, s);
    assert_eq!(scenes_back, scenes);
}

#[test]
fn truncated_scene_file_is_rejected() {
    let s = spec(2);
    let scenes = generate_dataset(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s, &scenes).unwrap();
    let victim = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e != "json"))
        .expect("scene file");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let cases = [
        DatasetSpec { num_classes: 0, ..spec(5) },
        DatasetSpec { min_objects: 4, max_objects: 2, ..spec(5) },
        DatasetSpec { class_weights: vec![1.0, 0.0], ..spec(5) },
        DatasetSpec { min_object_size: 80.0, max_object_size: 90.0, ..spec(5) },
        DatasetSpec { occlusion_prob: 1.5, ..spec(5) },
    ];
    for c in cases {
        assert!(generate_dataset(&c).is_err(), "{c:?}");
    }
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 2usize..300, seed in any::<u64>(), f in 0.1f64..0.9) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        match split(&ids, (f, 1.0 - f), seed) {
            Ok((train, test)) => {
                prop_assert_eq!(train.len() + test.len(), n);
                let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(&all, &ids);
                prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(test.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(train.len(), (n as f64 * f).round() as usize);
                let again = split(&ids, (f, 1.0 - f), seed).unwrap();
                prop_assert_eq!(again, (train, test));
            }
            Err(_) => {
                let k = (n as f64 * f).round() as usize;
                prop_assert!(k == 0 || k == n);
            }
        }
    }
}

#[test]
fn more_jitter_moves_labels_further() {
    let displacement = |sd: f64| {
        let s = DatasetSpec {
            n_scenes: 600,
            box_jitter_sd: sd,
            ..DatasetSpec::default()
        };
        let objs: Vec<_> = generate_dataset(&s).unwrap().into_iter().flat_map(|s| s.objects).collect();
        assert!(objs.len() >= 1000);
        objs.iter()
            .map(|o| {
                let (a, b) = (o.bbox, o.rendered);
                (a.x - b.x).abs() + (a.y - b.y).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
            })
            .sum::<f64>()
            / objs.len() as f64
    };
    let d: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0].into_iter().map(displacement).collect();
    assert_eq!(d[0], 0.0);
    assert!(d.windows(2).all(|w| w[0] < w[1]), "{d:?}");
}
