mod common;

use common::*;
use gsimage_core::dither::{floyd_steinberg, max_pool_patches, save_points_csv, sample_points};
use gsimage_core::ppm::gradient_ppm;
use gsimage_core::trainer::{fit, save_log_csv, structured_init, FitConfig, InitStrategy, PpmSource};
use gsimage_core::{g2di, Error, ImageBuffer, ProbabilityMap};
use tempfile::TempDir;

#[test]
fn g2di_file_roundtrip_is_exact() {
    let dir = TempDir::new().unwrap();
    let set = random_scene(&mut rng(1), 37, 50, 30, 1.0, (0.3, 9.0));
    let path = dir.path().join("m.g2d");
    g2di::save(&set, &path).unwrap();
    assert_eq!(g2di::load(&path).unwrap(), set);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + 37 * 32);
}

#[test]
fn g2di_truncation_reports_offset() {
    let set = random_scene(&mut rng(2), 3, 8, 8, 1.0, (1.0, 2.0));
    let bytes = g2di::encode(&set);
    match g2di::decode(&bytes[..bytes.len() - 5]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, (bytes.len() - 5) as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn ppmf_and_previews_roundtrip() {
    let dir = TempDir::new().unwrap();
    let img = load("chelsea");
    let map = gradient_ppm(&img).unwrap();
    let path = dir.path().join("g.ppmf");
    map.save_ppmf(&path).unwrap();
    let back = ProbabilityMap::load_ppmf(&path).unwrap();
    assert_eq!(back.dims(), map.dims());
    for (a, b) in back.values().iter().zip(map.values()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    map.save_preview(dir.path().join("g.png")).unwrap();
    map.save_preview(dir.path().join("g.pgm")).unwrap();
    let png = image::open(dir.path().join("g.png")).unwrap();
    assert_eq!((png.width(), png.height()), (128, 128));
    let pgm = std::fs::read(dir.path().join("g.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn dither_mask_and_points_files() {
    let dir = TempDir::new().unwrap();
    let map = gradient_ppm(&load("rocket")).unwrap();
    let bits = floyd_steinberg(&max_pool_patches(&map, 3).unwrap());
    let mask = dir.path().join("mask.png");
    bits.save_png(&mask).unwrap();
    let decoded = image::open(&mask).unwrap().to_luma8();
    assert_eq!((decoded.width() as usize, decoded.height() as usize), (bits.width, bits.height));
    let lit = decoded.pixels().filter(|p| p.0[0] > 0).count();
    assert_eq!(lit, bits.count());

    let points = sample_points(&map, 3).unwrap();
    assert_eq!(points.len(), bits.count());
    let csv = dir.path().join("points.csv");
    save_points_csv(&points, &csv).unwrap();
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["x", "y"]);
    let rows: Vec<(f64, f64)> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), points.len());
    assert!(rows.iter().zip(&points).all(|(r, p)| *r == (p.x, p.y)));
}

#[test]
fn mesh_obj_lists_every_triangle() {
    let dir = TempDir::new().unwrap();
    let init = structured_init(&load("coffee"), 4, &PpmSource::Gradient).unwrap();
    let path = dir.path().join("mesh.obj");
    init.mesh.save_obj(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), init.mesh.points.len());
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), init.mesh.triangles.len());
}

#[test]
fn fit_checkpoints_and_log_files() {
    let dir = TempDir::new().unwrap();
    let img = load("astronaut").crop(30, 30, 40, 40).unwrap();
    let ckpt = dir.path().join("ckpt.g2d");
    let cfg = FitConfig {
        iterations: 12,
        lr: 1e-2,
        init: InitStrategy::Random { n: 60 },
        log_every: 5,
        checkpoint_every: Some(5),
        checkpoint_path: Some(ckpt.clone()),
        ..FitConfig::default()
    };
    let res = fit(&img, &cfg).unwrap();
    assert_eq!(g2di::load(&ckpt).unwrap(), res.set);
    assert_eq!(res.log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 5, 10, 12]);

    let log = dir.path().join("log.csv");
    save_log_csv(&res.log, &log).unwrap();
    let mut reader = csv::Reader::from_path(&log).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["iteration", "elapsed_s", "psnr", "ms_ssim", "loss", "n_gaussians"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| &r[5] == "60"));
}

#[test]
fn time_budget_stop_leaves_a_loadable_checkpoint() {
    let dir = TempDir::new().unwrap();
    let img = load("rocket");
    let ckpt = dir.path().join("budget.g2d");
    let cfg = FitConfig {
        iterations: 1_000_000,
        init: InitStrategy::Random { n: 500 },
        time_budget: Some(0.3),
        checkpoint_path: Some(ckpt.clone()),
        ..FitConfig::default()
    };
    let res = fit(&img, &cfg).unwrap();
    assert!(res.stopped_early);
    assert_eq!(g2di::load(&ckpt).unwrap(), res.set);
}

#[test]
fn png_io_roundtrip_is_lossless_at_8_bits() {
    let dir = TempDir::new().unwrap();
    let img = load("coffee");
    let path = dir.path().join("copy.png");
    img.save_png(&path).unwrap();
    assert_eq!(ImageBuffer::load(&path).unwrap(), img);
}
