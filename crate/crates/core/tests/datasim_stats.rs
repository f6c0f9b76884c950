use tubelet_core::datasim::{generate_cloud_mask, generate_scene, make_dataset};

#[test]
fn masked_fraction_stays_in_band_across_seeds() {
    let inside = (0..100u64)
        .filter(|&seed| {
            let m = generate_cloud_mask(seed, 6, 60, 60, 20, 0.3).unwrap();
            (0.05..=0.60).contains(&m.fraction())
        })
        .count();
    assert!(inside >= 95, "only {inside} of 100 masks in [0.05, 0.60]");
}

#[test]
fn more_clouds_cover_more() {
    let mean = |clouds| (0..30u64).map(|s| generate_cloud_mask(s, 6, 60, 60, clouds, 0.3).unwrap().fraction()).sum::<f64>() / 30.0;
    assert!(mean(30) > mean(20));
}

#[test]
fn generation_is_pure() {
    assert_eq!(generate_scene(9, 30, 30, 5).unwrap().msi, generate_scene(9, 30, 30, 5).unwrap().msi);
    let a = make_dataset(3, 6, 20, 20, 8, 0.3).unwrap();
    let b = make_dataset(3, 6, 20, 20, 8, 0.3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_dataset(4, 6, 20, 20, 8, 0.3).unwrap());
}
