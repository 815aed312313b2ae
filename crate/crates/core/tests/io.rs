use cloudcrf::imaging::{load_image, sidecar_mask_path};
use cloudcrf::{Mask, MaskValue, PixelImage};

fn gradient(w: u32, h: u32) -> PixelImage {
    let px = (0..w * h)
        .map(|i| [(i % 256) as u8, (i / w * 7 % 256) as u8, 255 - (i % 200) as u8])
        .collect();
    PixelImage::new(w, h, px).unwrap()
}

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sky.png");
    let img = gradient(37, 23);
    img.save_png(&path).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.pixels(), img.pixels());
    assert!(back.ignore_mask().is_none());
}

#[test]
fn binary_ppm_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sky.ppm");
    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[10, 20, 30, 200, 210, 220]);
    std::fs::write(&path, bytes).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!(img.pixels(), &[[10, 20, 30], [200, 210, 220]]);
}

#[test]
fn sidecar_mask_marks_ignored_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.png");
    gradient(4, 2).save_png(&path).unwrap();
    // Non-zero sidecar pixels are the ones to ignore.
    let sidecar = Mask::new(
        4,
        2,
        vec![
            MaskValue::Cloud,
            MaskValue::Sky,
            MaskValue::Sky,
            MaskValue::Sky,
            MaskValue::Sky,
            MaskValue::Sky,
            MaskValue::Sky,
            MaskValue::Cloud,
        ],
    )
    .unwrap();
    sidecar.save_png(&sidecar_mask_path(&path)).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!(img.active_count(), 6);
    assert!(img.is_ignored(0) && img.is_ignored(7) && !img.is_ignored(1));
}

#[test]
fn mask_gray_levels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let values = vec![MaskValue::Sky, MaskValue::Cloud, MaskValue::Ignore];
    Mask::new(3, 1, values.clone()).unwrap().save_png(&path).unwrap();
    let gray = image::open(&path).unwrap().to_luma8();
    assert_eq!(gray.as_raw(), &[0, 255, 128]);
    assert_eq!(Mask::load(&path).unwrap().values, values);
}

#[test]
fn unsupported_and_missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("notes.txt");
    std::fs::write(&bad, "not an image").unwrap();
    assert!(load_image(&bad).is_err());
    assert!(load_image(&dir.path().join("absent.png")).is_err());
}
