mod common;

use common::*;
use gsimage_core::geometry::{add_boundary_points, convex_hull, delaunay, polygon_area};
use gsimage_core::metrics::{mse_l2_grad, psnr};
use gsimage_core::raster::{render, render_backward_with, render_with, RasterConfig};
use gsimage_core::trainer::{evaluate, structured_init, PpmSource, MIN_SCALE};
use gsimage_core::{GaussianSet, ImageBuffer, PixelPos};
use rand::Rng;

/// Richardson-extrapolated central differences of the full L2 loss against
/// the f64 oracle, for Gaussians that straddle the canvas edge and are
/// strongly anisotropic. A wide cutoff keeps the truncated tails out of the
/// comparison.
#[test]
fn loss_gradient_matches_oracle_on_clipped_anisotropic_scenes() {
    let (w, h, step) = (24, 20, 1e-3);
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut set = random_scene(&mut r, 6, w, h, 1.2, (0.8, 6.0));
        set.gaussians[0].scale = [7.0, 0.9];
        let target = ImageBuffer::from_fn(w, h, |_, _| [r.gen(), r.gen(), r.gen()]);
        let wide = RasterConfig { cutoff_sigma: 8.0 };
        let (_, d_out) = mse_l2_grad(&render_with(&set, &wide).unwrap(), &target).unwrap();
        let analytic = render_backward_with(&set, &d_out, &wide).unwrap();
        let loss = |p: &[[f64; 8]]| {
            let img = brute_render(w, h, p);
            img.iter().zip(target.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / img.len() as f64
        };
        let base: Vec<[f64; 8]> = set.gaussians.iter().map(params64).collect();
        for n in 0..base.len() {
            for j in 0..8 {
                let central = |h: f64| {
                    let mut p = base.clone();
                    p[n][j] += h;
                    let up = loss(&p);
                    p[n][j] -= 2.0 * h;
                    (up - loss(&p)) / (2.0 * h)
                };
                let fd = (4.0 * central(step / 2.0) - central(step)) / 3.0;
                let a = analytic.grads[n][j];
                assert!((a - fd).abs() <= 1e-3 * fd.abs() + 1e-6, "seed {seed} gaussian {n} param {j}: {a} vs {fd}");
            }
        }
    }
}

#[test]
fn delaunay_on_lattice_and_boundary_points_covers_the_hull() {
    let mut r = rng(11);
    for _ in 0..20 {
        let n = r.gen_range(5..40);
        // Integer coordinates make many cocircular and collinear quadruples.
        let pts: Vec<PixelPos> = (0..n)
            .map(|_| PixelPos::new(r.gen_range(0..12) as f64, r.gen_range(0..12) as f64))
            .collect();
        let mut unique: Vec<PixelPos> = Vec::new();
        for p in pts {
            if !unique.iter().any(|q| q.dist(p) < 1e-9) {
                unique.push(p);
            }
        }
        let all_collinear = unique.len() >= 2
            && unique.iter().all(|p| cross([unique[0].x, unique[0].y], [unique[1].x, unique[1].y], [p.x, p.y]) == 0.0);
        if unique.len() < 3 || all_collinear {
            assert!(delaunay(&unique).is_err());
            continue;
        }
        let mesh = delaunay(&unique).unwrap();
        let hull = convex_hull(&unique);
        let hull_area = polygon_area(&unique, &hull);
        assert!((mesh.total_area() - hull_area).abs() < 1e-9 * hull_area.max(1.0));
        for t in &mesh.triangles {
            let (mut a, b, mut c) = ([unique[t[0]].x, unique[t[0]].y], [unique[t[1]].x, unique[t[1]].y], [unique[t[2]].x, unique[t[2]].y]);
            assert!(cross(a, b, c) != 0.0);
            if cross(a, b, c) < 0.0 {
                std::mem::swap(&mut a, &mut c);
            }
            for (i, p) in unique.iter().enumerate() {
                if !t.contains(&i) {
                    assert!(incircle_det(a, b, c, [p.x, p.y]) <= 0.0);
                }
            }
        }
    }
    let augmented = add_boundary_points(&[PixelPos::new(20.0, 20.0)], 40, 40, 10.0).unwrap();
    let mesh = delaunay(&augmented.points).unwrap();
    assert!((mesh.total_area() - 39.0 * 39.0).abs() < 1e-9);
}

#[test]
fn structured_init_is_well_formed_on_every_asset() {
    for name in IMAGES {
        let img = load(name);
        let init = structured_init(&img, 3, &PpmSource::Gradient).unwrap();
        assert_eq!(init.set.len(), init.mesh.triangles.len());
        assert!(init.set.gaussians.iter().all(|g| g.is_finite()));
        assert!(init.set.gaussians.iter().all(|g| g.scale[0] >= MIN_SCALE && g.scale[1] >= MIN_SCALE));
        assert!(init.set.gaussians.iter().all(|g| (0.0..=1.0).contains(&g.theta)));
        assert!(init.set.gaussians.iter().all(|g| g.mu.iter().all(|m| (-1.0..=1.0).contains(m))));
        // The mesh spans the pixel-center rectangle.
        assert!((init.mesh.total_area() - 127.0 * 127.0).abs() < 1e-6);
        let again = structured_init(&img, 3, &PpmSource::Gradient).unwrap();
        assert_eq!(again.set, init.set);
    }
}

#[test]
fn evaluate_agrees_with_direct_psnr() {
    let img = load("chelsea");
    let set: GaussianSet = random_scene(&mut rng(3), 300, 128, 128, 1.0, (1.0, 6.0));
    let report = evaluate(&set, &img).unwrap();
    let direct = psnr(&render(&set).unwrap().clamped(), &img).unwrap();
    assert_eq!(report.psnr, direct);
    assert_eq!(report.gaussian_count, 300);
}
