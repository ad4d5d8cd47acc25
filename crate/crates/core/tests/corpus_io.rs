use std::path::Path;

use image::Rgb;
use slidelab_core::corpus::{load_manifest, normalize_for_diffusion, SlideRecord, Split};
use slidelab_core::imaging::{self, mean_intensity, FloatImage};
use slidelab_core::Error;

fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
    imaging::save_png(&imaging::filled(w, h, [0.6, 0.3, 0.6]), &dir.join(name)).unwrap();
}

#[test]
fn loads_valid_manifest_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "a.png", 20, 10);
    write_png(dir.path(), "b.png", 8, 8);
    let text = "#classes: x,y\n#source: unit test\n# comment\na\ta.png\tx\nb\tb.png\ty\ttest\n";
    std::fs::write(dir.path().join("m.tsv"), text).unwrap();
    let m = load_manifest(&dir.path().join("m.tsv")).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.source_note(), "unit test");
    assert_eq!((m.records()[0].width, m.records()[0].height), (20, 10));
    assert_eq!(m.records()[1].split, Split::Test);
    assert_eq!(m.records()[0].split, Split::Unassigned);

    m.write(&dir.path().join("copy.tsv")).unwrap();
    assert_eq!(load_manifest(&dir.path().join("copy.tsv")).unwrap(), m);
}

#[test]
fn empty_record_list_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.tsv"), "#classes: x\n").unwrap();
    assert_eq!(load_manifest(&dir.path().join("m.tsv")).unwrap().len(), 0);
}

#[test]
fn manifest_errors_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "a.png", 4, 4);
    std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
    let cases = [
        ("#classes: x\na\ta.png\tz\n", "label"),
        ("#classes: x\na\ta.png\tx\na\ta.png\tx\n", "duplicate"),
        ("#classes: x\na\tmissing.png\tx\n", "missing"),
        ("#classes: x\na\tjunk.png\tx\n", "decode"),
        ("a\ta.png\tx\n", "classes"),
    ];
    for (text, kind) in cases {
        std::fs::write(dir.path().join("m.tsv"), text).unwrap();
        let err = load_manifest(&dir.path().join("m.tsv")).unwrap_err();
        match (kind, &err) {
            ("label", Error::UnknownLabel { line: 2, .. }) => {}
            ("duplicate", Error::DuplicateSlide { line: 3, .. }) => {}
            ("missing", Error::MissingImage { line: 2, .. }) => {}
            ("decode", Error::Manifest { line: 2, .. }) => {}
            ("classes", Error::Manifest { .. }) => {}
            _ => panic!("{kind}: unexpected {err}"),
        }
    }
    assert!(load_manifest(&dir.path().join("nope.tsv")).is_err());
}

fn record(path: &Path, w: u32, h: u32) -> SlideRecord {
    SlideRecord {
        slide_id: "s".into(),
        path: path.to_path_buf(),
        width: w,
        height: h,
        label: "x".into(),
        split: Split::Unassigned,
    }
}

#[test]
fn normalize_outputs_requested_square() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "wide.png", 300, 120);
    let out = normalize_for_diffusion(&record(&dir.path().join("wide.png"), 300, 120), 512).unwrap();
    assert_eq!(out.dimensions(), (512, 512));
    assert!(normalize_for_diffusion(&record(&dir.path().join("wide.png"), 300, 120), 4).is_err());
    assert!(normalize_for_diffusion(&record(&dir.path().join("none.png"), 1, 1), 32).is_err());
}

#[test]
fn identity_normalization_is_pixel_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = FloatImage::new(512, 512);
    for (x, y, p) in img.enumerate_pixels_mut() {
        *p = Rgb([(x % 256) as f32 / 255.0, (y % 256) as f32 / 255.0, ((x + y) % 256) as f32 / 255.0]);
    }
    imaging::save_png(&img, &dir.path().join("sq.png")).unwrap();
    let out = normalize_for_diffusion(&record(&dir.path().join("sq.png"), 512, 512), 512).unwrap();
    assert_eq!(imaging::to_rgb8(&out), imaging::to_rgb8(&img));
}

#[test]
fn gradient_mean_preserved_against_reference_resizer() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = image::RgbImage::new(64, 64);
    for (x, y, p) in img.enumerate_pixels_mut() {
        *p = Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]);
    }
    img.save(dir.path().join("g.png")).unwrap();
    let ours = normalize_for_diffusion(&record(&dir.path().join("g.png"), 64, 64), 32).unwrap();
    let reference = image::imageops::resize(&img, 32, 32, image::imageops::FilterType::Triangle);
    let reference_mean = reference.as_raw().iter().map(|&v| v as f64).sum::<f64>() / reference.as_raw().len() as f64 / 255.0;
    assert!((mean_intensity(&ours) - reference_mean).abs() <= 1.0 / 255.0);
    assert!((mean_intensity(&ours) - mean_intensity(&imaging::from_rgb8(&img))).abs() <= 1.0 / 255.0);
}
