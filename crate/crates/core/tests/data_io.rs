use std::path::Path;

use decidenet::data_io::{
    format_points, load_scene, load_split, parse_points, save_scene, write_dataset, DatasetSpec, Image, Scene, Split,
    DETECTIONS_FILE, IMAGE_FILE, POINTS_FILE,
};
use decidenet::density::{gt_density, DensityMap, GaussianKernelSpec, PointSet};
use decidenet::detector_sim::{format_detections, parse_detections};
use decidenet::numerics::{Checkpoint, Tensor};
use proptest::prelude::*;

fn synthetic(index: usize) -> Scene {
    DatasetSpec::default().scene(Split::Train, index).unwrap()
}

#[test]
fn scene_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = synthetic(3);
    s.density = Some(gt_density(&s.points, s.extent(), &GaussianKernelSpec::default()).unwrap());
    let path = dir.path().join(&s.id);
    save_scene(&s, &path).unwrap();
    assert_eq!(load_scene(&path).unwrap(), s);

    // optional files disappear when the scene no longer has them
    let bare = Scene {
        detections: None,
        density: None,
        ..s.clone()
    };
    save_scene(&bare, &path).unwrap();
    assert!(!path.join(DETECTIONS_FILE).exists());
    assert_eq!(load_scene(&path).unwrap(), bare);
}

#[test]
fn seventeen_points_load_seventeen() {
    let mut text = String::from("# x y\n");
    for i in 0..17 {
        text.push_str(&format!("{}.5 {}\n", i * 3, i + 2));
    }
    let p = parse_points(&text, Path::new("points.txt")).unwrap();
    assert_eq!(p.len(), 17);
    assert_eq!(parse_points(&format_points(&p), Path::new("again")).unwrap(), p);
}

#[test]
fn out_of_bounds_point_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let s = synthetic(1);
    save_scene(&s, dir.path()).unwrap();
    std::fs::write(dir.path().join(POINTS_FILE), "10 10\n500 4\n").unwrap();
    let e = load_scene(dir.path()).unwrap_err().to_string();
    assert!(e.contains(POINTS_FILE) && e.contains('2'), "{e}");
}

#[test]
fn malformed_files_name_path_and_line() {
    let e = parse_points("1 2\n3\n", Path::new("p.txt")).unwrap_err().to_string();
    assert!(e.contains("p.txt:2"), "{e}");
    let e = parse_detections("1 2 3 4 0.5\n1 2 3 4 1.5\n", Path::new("d.txt")).unwrap_err().to_string();
    assert!(e.contains("d.txt:2"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(IMAGE_FILE), b"P6\n2 2\n255\nxx").unwrap();
    std::fs::write(dir.path().join(POINTS_FILE), "").unwrap();
    assert!(load_scene(dir.path()).is_err());
    assert!(load_scene(&dir.path().join("absent")).is_err());
}

#[test]
fn dataset_round_trip_keeps_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        train: 3,
        val: 1,
        test: 2,
        ..DatasetSpec::default()
    };
    let entries = write_dataset(&spec, dir.path()).unwrap();
    assert_eq!(entries.len(), 6);
    for split in Split::ALL {
        assert_eq!(load_split(dir.path(), split).unwrap(), spec.split(split).unwrap());
    }
    let empty = tempfile::tempdir().unwrap();
    let none = DatasetSpec {
        train: 0,
        val: 0,
        test: 0,
        ..DatasetSpec::default()
    };
    assert!(write_dataset(&none, empty.path()).unwrap().is_empty());
    assert!(load_split(empty.path(), Split::Train).unwrap().is_empty());
}

#[test]
fn grayscale_ppm_replicates_channel() {
    let mut bytes = b"P5\n# small\n3 2\n255\n".to_vec();
    bytes.extend([0u8, 10, 20, 30, 40, 50]);
    let img = Image::from_ppm(&bytes, Path::new("g.pgm")).unwrap();
    assert_eq!(img.pixel(1, 2), [50, 50, 50]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn image_bytes_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u8>()) {
        let data: Vec<u8> = (0..h * w * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = Image::new(h, w, data).unwrap();
        prop_assert_eq!(Image::from_ppm(&img.to_ppm(), Path::new("x")).unwrap(), img);
    }

    #[test]
    fn density_bytes_round_trip(v in prop::collection::vec(0.0..1e3f64, 12)) {
        let m = DensityMap::new(3, 4, v).unwrap();
        prop_assert_eq!(DensityMap::from_bytes(&m.to_bytes(), Path::new("m")).unwrap(), m);
    }

    #[test]
    fn checkpoint_bytes_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
        let mut ck = Checkpoint::new();
        let n = v.len();
        ck.push("a.w", Tensor::new(vec![n], v).unwrap()).unwrap();
        ck.push("a.b", Tensor::scalar(1.5)).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("c")).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn points_and_detections_text_round_trip(index in 0usize..50) {
        let s = synthetic(index);
        let p = parse_points(&format_points(&s.points), Path::new("p")).unwrap();
        prop_assert_eq!(&p, &s.points);
        let d = s.detections.clone().unwrap();
        prop_assert_eq!(parse_detections(&format_detections(&d), Path::new("d")).unwrap(), d);
        prop_assert!(PointSet(p.0).first_out_of_bounds(s.extent()).is_none());
    }
}
