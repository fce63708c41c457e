//! Finite-difference verification of every adjoint: the losses, the
//! rasterizer paths, the marching-tet backward, and the fully assembled
//! geometry chain.

mod common;

use common::{central_diff, rel_err, Lcg};
use sherpa_lift::field::{
    prior_fit_loss, prior_sdf, FieldParams, PointSample, PriorScene, TetGrid,
};
use sherpa_lift::guidance::{
    semantic_loss, structural_loss, FeatureVec, GuidanceConfig, PatchStatsEncoder,
    RandomProjectionEncoder, SemanticEncoder,
};
use sherpa_lift::image::{Image, Mask};
use sherpa_lift::optimize::{geometry_loss, MeshNormalConditions, ScoreContext};
use sherpa_lift::render::{
    color_raster_backward, normal_raster_backward, rasterize_color, rasterize_normals,
    AlbedoField, CameraPose, NormalMap,
};
use sherpa_lift::score::{default_schedule, PointMassProvider, WeightSchedule};
use sherpa_lift::tessellate::{edge_interp, marching_tets, mt_backward};
use sherpa_lift::Vec3;

fn random_map(rng: &mut Lcg, h: usize, w: usize) -> NormalMap {
    let mut img = Image::zeros(h, w, 3);
    for v in &mut img.data {
        *v = rng.unit();
    }
    NormalMap {
        pixels: img,
        mask: Mask::new_true(h, w),
    }
}

#[test]
fn edge_interp_gradient_matches_fd() {
    let p_a = Vec3::new(0.1, -0.2, 0.4);
    let p_b = Vec3::new(0.9, 0.3, -0.1);
    let (s_a, s_b) = (-0.37, 0.81);
    let (_, _t) = edge_interp(p_a, p_b, s_a, s_b).unwrap();
    // d point / d s_a along each coordinate
    let dt_dsa = -s_b / ((s_a - s_b) * (s_a - s_b));
    let analytic = (p_b - p_a) * dt_dsa;
    for axis in 0..3 {
        let mut f = |s: f64| edge_interp(p_a, p_b, s, s_b).unwrap().0[axis];
        let fd = central_diff(&mut f, s_a, 1e-6);
        assert!(
            rel_err(analytic[axis], fd, 1e-9) <= 1e-6,
            "axis {axis}: {} vs {fd}",
            analytic[axis]
        );
    }
}

#[test]
fn prior_fit_loss_gradient_matches_fd_to_1e5() {
    // randomized smooth configuration on an 8^3 grid with 32 samples
    let grid = TetGrid::new(8).unwrap();
    let mut rng = Lcg(0x1234);
    let mut params = FieldParams::constant(&grid, 0.0);
    for s in &mut params.sdf {
        *s = rng.range(-0.6, 0.6);
    }
    let cap = 0.2 * grid.spacing();
    for (i, o) in params.offset.iter_mut().enumerate() {
        if !grid.is_boundary_vertex(i) {
            *o = Vec3::new(
                rng.range(-cap, cap),
                rng.range(-cap, cap),
                rng.range(-cap, cap),
            );
        }
    }
    let samples: Vec<PointSample> = (0..32)
        .map(|_| PointSample {
            position: Vec3::new(
                rng.range(-0.85, 0.85),
                rng.range(-0.85, 0.85),
                rng.range(-0.85, 0.85),
            ),
            target_sdf: rng.range(-0.5, 0.5),
        })
        .collect();
    let lambda = 0.1;
    let (_, grads) = prior_fit_loss(&grid, &params, &samples, lambda).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let vi = (rng.unit() * grid.vertex_count() as f64) as usize;
        let kind = (rng.unit() * 4.0) as usize; // 0 = sdf, 1..3 = offset axis
        let (x0, analytic) = match kind {
            0 => (params.sdf[vi], grads.sdf[vi]),
            k => (params.offset[vi][k - 1], grads.offset[vi][k - 1]),
        };
        let mut f = |x: f64| {
            let mut p = params.clone();
            match kind {
                0 => p.sdf[vi] = x,
                k => p.offset[vi][k - 1] = x,
            }
            prior_fit_loss(&grid, &p, &samples, lambda).unwrap().0
        };
        let fd = central_diff(&mut f, x0, h);
        if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(analytic, fd, 1e-6));
        checked += 1;
    }
    assert!(checked > 40, "too few informative probes: {checked}");
    assert!(worst <= 1e-5, "max relative error {worst:.3e}");
}

#[test]
fn mt_backward_matches_fd_on_single_tet_patterns() {
    // one interior crossing on a coarse grid; perturb each sdf value of
    // the crossing tet and compare vertex positions
    let grid = TetGrid::new(2).unwrap();
    let scene = PriorScene::sphere(Vec3::zeros(), 0.62).unwrap();
    let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
    let mesh = marching_tets(&grid, &params);
    assert!(!mesh.is_empty());
    let mut rng = Lcg(0xF00D);
    let mut worst = 0.0f64;
    for probe in 0..60 {
        let vi = (rng.unit() * mesh.vertices.len() as f64) as usize;
        let axis = probe % 3;
        // a unit upstream on one vertex coordinate
        let mut upstream = vec![Vec3::zeros(); mesh.vertices.len()];
        upstream[vi][axis] = 1.0;
        let grads = mt_backward(&grid, &params, &mesh, &upstream).unwrap();
        let (a, b) = mesh.provenance[vi].edge;
        for gv in [a as usize, b as usize] {
            for kind in 0..4 {
                let analytic = match kind {
                    0 => grads.sdf[gv],
                    k => grads.offset[gv][k - 1],
                };
                let x0 = match kind {
                    0 => params.sdf[gv],
                    k => params.offset[gv][k - 1],
                };
                let mut f = |x: f64| {
                    let mut p = params.clone();
                    match kind {
                        0 => p.sdf[gv] = x,
                        k => p.offset[gv][k - 1] = x,
                    }
                    let m = marching_tets(&grid, &p);
                    m.vertices[vi][axis]
                };
                let fd = central_diff(&mut f, x0, 1e-6);
                if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
                    continue;
                }
                worst = worst.max(rel_err(analytic, fd, 1e-6));
            }
        }
    }
    assert!(worst <= 1e-6, "max relative error {worst:.3e}");
}

#[test]
fn structural_loss_gradient_matches_fd() {
    let mut rng = Lcg(0xBEE);
    let cfg = GuidanceConfig::default();
    let prior = vec![random_map(&mut rng, 8, 8), random_map(&mut rng, 8, 8)];
    let mut live = vec![random_map(&mut rng, 8, 8), random_map(&mut rng, 8, 8)];
    let (_, grads) = structural_loss(&prior, &live, &cfg).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..80 {
        let view = (rng.unit() * 2.0) as usize;
        let idx = (rng.unit() * live[view].pixels.data.len() as f64) as usize;
        let x0 = live[view].pixels.data[idx];
        let analytic = grads[view].data[idx];
        let mut f = |x: f64| {
            live[view].pixels.data[idx] = x;
            let v = structural_loss(&prior, &live, &cfg).unwrap().0;
            live[view].pixels.data[idx] = x0;
            v
        };
        let fd = central_diff(&mut f, x0, 1e-5);
        if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
            continue;
        }
        worst = worst.max(rel_err(analytic, fd, 1e-7));
    }
    assert!(worst <= 1e-6, "max relative error {worst:.3e}");
}

#[test]
fn semantic_loss_and_encoder_gradients_match_fd() {
    let mut rng = Lcg(0xD1CE);
    // feature-level adjoint
    let mk_feat = |rng: &mut Lcg| {
        let raw: Vec<f64> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        FeatureVec {
            values: raw.into_iter().map(|v| v / n).collect(),
            degenerate: false,
        }
    };
    let prior = vec![mk_feat(&mut rng)];
    let mut live = vec![mk_feat(&mut rng)];
    let (_, grads) = semantic_loss(&prior, &live).unwrap();
    let mut worst = 0.0f64;
    for idx in 0..16 {
        let x0 = live[0].values[idx];
        let analytic = grads[0][idx];
        let mut f = |x: f64| {
            live[0].values[idx] = x;
            let v = semantic_loss(&prior, &live).unwrap().0;
            live[0].values[idx] = x0;
            v
        };
        let fd = central_diff(&mut f, x0, 1e-6);
        worst = worst.max(rel_err(analytic, fd, 1e-8));
    }
    assert!(worst <= 1e-6, "feature-level max relative error {worst:.3e}");

    // image-level adjoint through both encoders: loss = 1 - cos(prior, enc(img))
    for encoder in [
        Box::new(PatchStatsEncoder::new(4)) as Box<dyn SemanticEncoder>,
        Box::new(RandomProjectionEncoder::new(24, 5, 10, 10, 3)),
    ] {
        let mut img = Image::zeros(10, 10, 3);
        for v in &mut img.data {
            *v = rng.unit();
        }
        let target = {
            let mut t = Image::zeros(10, 10, 3);
            for v in &mut t.data {
                *v = rng.unit();
            }
            encoder.encode(&t)
        };
        let live_feat = encoder.encode(&img);
        let (_, fgrads) = semantic_loss(&[target.clone()], &[live_feat]).unwrap();
        let img_grad = encoder.backward(&img, &fgrads[0]);
        let mut worst = 0.0f64;
        for _ in 0..40 {
            let idx = (rng.unit() * img.data.len() as f64) as usize;
            let x0 = img.data[idx];
            let analytic = img_grad.data[idx];
            let mut f = |x: f64| {
                let mut probe = img.clone();
                probe.data[idx] = x;
                let feat = encoder.encode(&probe);
                semantic_loss(&[target.clone()], &[feat]).unwrap().0
            };
            let fd = central_diff(&mut f, x0, 1e-6);
            if fd.abs() < 1e-10 && analytic.abs() < 1e-10 {
                continue;
            }
            worst = worst.max(rel_err(analytic, fd, 1e-8));
        }
        assert!(worst <= 1e-6, "encoder-chain max relative error {worst:.3e}");
    }
}

#[test]
fn color_raster_albedo_gradient_matches_fd() {
    let grid = TetGrid::new(4).unwrap();
    let scene = PriorScene::sphere(Vec3::zeros(), 0.55).unwrap();
    let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
    let mesh = marching_tets(&grid, &params);
    let mut rng = Lcg(0xA11E);
    let mut albedo = AlbedoField::constant(grid.vertex_count(), [0.5; 3]);
    for rgb in &mut albedo.rgb {
        for c in rgb.iter_mut() {
            *c = rng.range(0.2, 0.8);
        }
    }
    let cam = CameraPose {
        radius: 2.5,
        elevation_deg: 20.0,
        azimuth_deg: -40.0,
        fov_y_deg: 45.0,
        height: 24,
        width: 24,
    };
    let light = Vec3::new(0.2, 0.5, 0.9).normalize();
    let (img, _, raster) = rasterize_color(&mesh, &albedo, &cam, light).unwrap();
    // objective: weighted sum of pixels with fixed random weights
    let mut weights = Image::zeros(24, 24, 3);
    for v in &mut weights.data {
        *v = rng.range(-1.0, 1.0);
    }
    let objective = |image: &Image| -> f64 {
        image
            .data
            .iter()
            .zip(&weights.data)
            .map(|(a, b)| a * b)
            .sum()
    };
    let _ = objective(&img);
    let (d_albedo, _) = color_raster_backward(&mesh, &albedo, &raster, light, &weights).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..80 {
        let vi = (rng.unit() * grid.vertex_count() as f64) as usize;
        let c = (rng.unit() * 3.0) as usize;
        let x0 = albedo.rgb[vi][c];
        let analytic = d_albedo[vi][c];
        let mut f = |x: f64| {
            let mut probe = albedo.clone();
            probe.rgb[vi][c] = x;
            let (im, _, _) = rasterize_color(&mesh, &probe, &cam, light).unwrap();
            objective(&im)
        };
        let fd = central_diff(&mut f, x0, 1e-5);
        if fd.abs() < 1e-10 && analytic.abs() < 1e-10 {
            continue;
        }
        worst = worst.max(rel_err(analytic, fd, 1e-8));
        checked += 1;
    }
    assert!(checked > 10, "too few covered probes");
    assert!(worst <= 1e-5, "max relative error {worst:.3e}");
}

#[test]
fn normal_raster_vertex_gradient_matches_fd_away_from_edges() {
    // single-triangle scene: pixels well inside the triangle, so coverage
    // is locally constant and only the face-normal path is active
    let mesh = sherpa_lift::tessellate::SurfaceMesh::from_parts(
        vec![
            Vec3::new(-0.8, -0.5, 0.1),
            Vec3::new(0.9, -0.4, -0.2),
            Vec3::new(0.0, 0.9, 0.0),
        ],
        vec![[0, 1, 2]],
    );
    let cam = CameraPose {
        radius: 2.5,
        elevation_deg: 5.0,
        azimuth_deg: 10.0,
        fov_y_deg: 45.0,
        height: 32,
        width: 32,
    };
    let (nm, raster) = rasterize_normals(&mesh, &cam);
    let mut rng = Lcg(0x9999);
    let mut weights = Image::zeros(32, 32, 3);
    // weight only pixels whose 2-pixel neighborhood is fully covered
    for y in 2..30 {
        for x in 2..30 {
            let all_covered = (0..5).all(|dy| (0..5).all(|dx| nm.mask.get(y + dy - 2, x + dx - 2)));
            if all_covered {
                for c in 0..3 {
                    weights.set(y, x, c, rng.range(-1.0, 1.0));
                }
            }
        }
    }
    let dv = normal_raster_backward(&mesh, &raster, &weights).unwrap();
    let objective = |m: &sherpa_lift::tessellate::SurfaceMesh| -> f64 {
        let (nm, _) = rasterize_normals(m, &cam);
        nm.pixels
            .data
            .iter()
            .zip(&weights.data)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst = 0.0f64;
    for vi in 0..3 {
        for axis in 0..3 {
            let x0 = mesh.vertices[vi][axis];
            let analytic = dv[vi][axis];
            let mut f = |x: f64| {
                let mut vertices = mesh.vertices.clone();
                vertices[vi][axis] = x;
                let probe = sherpa_lift::tessellate::SurfaceMesh::from_parts(
                    vertices,
                    mesh.triangles.clone(),
                );
                objective(&probe)
            };
            let fd = central_diff(&mut f, x0, 1e-6);
            if fd.abs() < 1e-10 && analytic.abs() < 1e-10 {
                continue;
            }
            worst = worst.max(rel_err(analytic, fd, 1e-8));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst:.3e}");
}

/// The fully assembled geometry gradient with w(t) = 0 equals finite
/// differences of gamma_struc * L_struc + gamma_sem * L_sem through
/// marching tets and the rasterizer, at a smooth configuration.
#[test]
fn guidance_only_geometry_chain_matches_fd() {
    let grid = TetGrid::new(4).unwrap();
    let scene = PriorScene::sphere(Vec3::zeros(), 0.55).unwrap();
    let prior = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
    let mut rng = Lcg(0xCAFE);
    let mut live = prior.clone();
    for s in &mut live.sdf {
        *s += rng.range(-0.02, 0.02);
    }
    // keep clear of the epsilon guard: no |s| below 1e-3
    for s in &mut live.sdf {
        if s.abs() < 1e-3 {
            *s = 1.5e-3 * s.signum();
        }
    }
    let cameras = vec![
        CameraPose {
            radius: 2.5,
            elevation_deg: 12.0,
            azimuth_deg: 25.0,
            fov_y_deg: 45.0,
            height: 16,
            width: 16,
        },
        CameraPose {
            radius: 2.5,
            elevation_deg: -8.0,
            azimuth_deg: 200.0,
            fov_y_deg: 45.0,
            height: 16,
            width: 16,
        },
    ];
    let gcfg = GuidanceConfig {
        lambda_struc: 10.0,
        lambda_sem: 30.0,
        m: 1000,
        ..GuidanceConfig::default()
    };
    let encoder = PatchStatsEncoder::new(4);
    let schedule = default_schedule();
    let schedule = std::sync::Arc::new(schedule);
    let provider = PointMassProvider::new(schedule.clone());
    let conditions = MeshNormalConditions {
        mesh: marching_tets(&grid, &prior),
    };
    let eps = Image::zeros(16, 16, 3);
    let score = ScoreContext {
        provider: &provider,
        conditions: &conditions,
        schedule: &schedule,
        cfg_scale: 0.0,
        weight: WeightSchedule::Constant(0.0),
        t: 500,
        eps: &eps,
    };
    let iteration = 3;
    let (_, grads) = geometry_loss(
        &grid, &prior, &live, &cameras, &gcfg, &encoder, &score, iteration,
    )
    .unwrap();

    let gamma_struc = sherpa_lift::guidance::anneal(gcfg.lambda_struc, iteration, gcfg.beta, gcfg.m);
    let gamma_sem = sherpa_lift::guidance::anneal(gcfg.lambda_sem, iteration, gcfg.beta, gcfg.m);
    let prior_mesh = marching_tets(&grid, &prior);
    let prior_maps: Vec<NormalMap> = cameras
        .iter()
        .map(|c| rasterize_normals(&prior_mesh, c).0)
        .collect();
    let prior_feats: Vec<FeatureVec> =
        prior_maps.iter().map(|m| encoder.encode(&m.pixels)).collect();
    let objective = |params: &FieldParams| -> f64 {
        let mesh = marching_tets(&grid, params);
        let live_maps: Vec<NormalMap> = cameras
            .iter()
            .map(|c| rasterize_normals(&mesh, c).0)
            .collect();
        let (ls, _) = structural_loss(&prior_maps, &live_maps, &gcfg).unwrap();
        let live_feats: Vec<FeatureVec> =
            live_maps.iter().map(|m| encoder.encode(&m.pixels)).collect();
        let (lm, _) = semantic_loss(&prior_feats, &live_feats).unwrap();
        gamma_struc * ls + gamma_sem * lm
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..60 {
        let vi = (rng.unit() * grid.vertex_count() as f64) as usize;
        let kind = (rng.unit() * 4.0) as usize;
        if kind > 0 && grid.is_boundary_vertex(vi) {
            continue;
        }
        let (x0, analytic) = match kind {
            0 => (live.sdf[vi], grads.sdf[vi]),
            k => (live.offset[vi][k - 1], grads.offset[vi][k - 1]),
        };
        let mut f = |x: f64| {
            let mut p = live.clone();
            match kind {
                0 => p.sdf[vi] = x,
                k => p.offset[vi][k - 1] = x,
            }
            objective(&p)
        };
        let fd = central_diff(&mut f, x0, 1e-5);
        if fd.abs() < 1e-6 && analytic.abs() < 1e-6 {
            continue;
        }
        worst = worst.max(rel_err(analytic, fd, 1e-4));
        checked += 1;
    }
    assert!(checked >= 20, "too few informative probes: {checked}");
    assert!(worst <= 1e-3, "max relative error {worst:.3e}");
}
