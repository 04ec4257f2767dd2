//! Image codec, scene directory layout and synthetic scenes.

use std::fs;

use lftracy::data::{
    decode_image, encode_image, generate_synthetic_scene, load_dataset, load_scene, normalize_stack, write_scene,
    FocalStack, Image, STACK_SIZE,
};
use lftracy::Error;
use proptest::prelude::*;

fn byte_image(channels: usize, h: usize, w: usize, bytes: &[u8]) -> Image {
    Image::new(channels, h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pnm_round_trip_is_exact(
        color in any::<bool>(), h in 1usize..9, w in 1usize..9,
        bytes in proptest::collection::vec(any::<u8>(), 3 * 64),
    ) {
        let c = if color { 3 } else { 1 };
        let img = byte_image(c, h, w, &bytes[..c * h * w]);
        let back = decode_image(&encode_image(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn normalized_stack_cycles_inputs(k in 1usize..20) {
        let slices: Vec<Image> = (0..k).map(|i| Image::filled(3, 2, 2, i as f64 / 32.0).unwrap()).collect();
        let out = normalize_stack(&FocalStack::new(slices.clone()).unwrap()).unwrap();
        prop_assert_eq!(out.len(), STACK_SIZE);
        for (i, s) in out.slices().iter().enumerate() {
            prop_assert_eq!(s, &slices[i % k]);
        }
    }

    #[test]
    fn synthetic_scenes_are_valid(seed in 0u64..1000, slices in 1usize..13, shapes in 0usize..5) {
        let s = generate_synthetic_scene(seed, 32, slices, shapes).unwrap();
        s.validate().unwrap();
        prop_assert_eq!(s.size(), (32, 32));
        prop_assert!(s.af.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn scene_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = generate_synthetic_scene(3, 24, 5, 2).unwrap();
    scene.name = "alpha".into();
    let path = write_scene(dir.path(), &scene).unwrap();
    assert!(path.join("af.ppm").is_file());
    assert!(path.join("gt.pgm").is_file());
    assert!(path.join("fs").join("slice_11.ppm").is_file());
    let back = load_scene(&path, None).unwrap();
    assert_eq!(back.name, "alpha");
    assert_eq!(back.gt, scene.gt);
    for (a, b) in back.fs.slices().iter().zip(scene.fs.slices()) {
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
}

#[test]
fn dataset_loads_sorted_and_resized() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b", "a", "c"] {
        let mut s = generate_synthetic_scene(name.len() as u64, 32, 3, 1).unwrap();
        s.name = name.into();
        write_scene(dir.path(), &s).unwrap();
    }
    fs::create_dir(dir.path().join("not_a_scene")).unwrap();
    let scenes = load_dataset(dir.path(), Some(16)).unwrap();
    let names: Vec<_> = scenes.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    assert!(scenes.iter().all(|s| s.size() == (16, 16) && s.gt.is_binary()));
}

#[test]
fn short_stacks_are_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = generate_synthetic_scene(1, 16, 12, 1).unwrap();
    s.name = "short".into();
    let path = write_scene(dir.path(), &s).unwrap();
    for i in 5..12 {
        fs::remove_file(path.join("fs").join(format!("slice_{i:02}.ppm"))).unwrap();
    }
    let back = load_scene(&path, None).unwrap();
    assert_eq!(back.fs.len(), STACK_SIZE);
    assert_eq!(back.fs.slices()[5], back.fs.slices()[0]);
}

#[test]
fn load_errors_name_scene_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = generate_synthetic_scene(1, 16, 2, 1).unwrap();
    s.name = "broken".into();
    let path = write_scene(dir.path(), &s).unwrap();

    fs::write(path.join("gt.pgm"), encode_image(&Image::filled(1, 8, 8, 0.0).unwrap())).unwrap();
    match load_scene(&path, None) {
        Err(Error::Scene { scene, file, .. }) => assert_eq!((scene.as_str(), file.as_str()), ("broken", "gt.pgm")),
        other => panic!("{other:?}"),
    }

    fs::write(path.join("gt.pgm"), b"P7\n").unwrap();
    match load_scene(&path, None) {
        Err(e @ Error::Scene { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("{other:?}"),
    }

    write_scene(dir.path(), &s).unwrap();
    fs::remove_dir_all(path.join("fs")).unwrap();
    fs::create_dir(path.join("fs")).unwrap();
    assert!(matches!(load_scene(&path, None), Err(Error::Scene { .. })));
}

#[test]
fn missing_dataset_is_io_error() {
    let err = load_dataset(std::path::Path::new("/nonexistent/lftracy"), None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn synthetic_scene_is_deterministic() {
    let a = generate_synthetic_scene(42, 64, 12, 3).unwrap();
    let b = generate_synthetic_scene(42, 64, 12, 3).unwrap();
    let c = generate_synthetic_scene(43, 64, 12, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.af, c.af);
    assert!(a.gt.pixels().iter().any(|&p| p == 1.0));
}
