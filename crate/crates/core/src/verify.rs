//! Self-check suites runnable from the command line: marching-tet table
//! verification against a brute-force plane-clipping reference, gradient
//! spot checks against central finite differences, filter identities, and
//! diffusion-schedule identities.

use nalgebra::Matrix3;

use crate::field::{
    prior_fit_loss, prior_sdf, FieldParams, PointSample, PriorScene, TetGrid,
};
use crate::guidance::{
    gaussian_filter, semantic_loss, structural_descriptor, structural_loss, FeatureVec,
    GuidanceConfig,
};
use crate::image::{Image, Mask};
use crate::render::{color_raster_backward, rasterize_color, AlbedoField, NormalMap};
use crate::score::{
    cfg_combine, default_schedule, perturb, sds_image_gradient, ConditionToken, PointMassProvider,
    ScoreProvider, TimestepStrategy, WeightSchedule,
};
use crate::tessellate::{classify_tet, marching_tets, watertight_census, TET_EDGES};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn ok(name: &str, detail: String) -> Self {
        PropertyResult {
            name: name.into(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        PropertyResult {
            name: name.into(),
            passed: false,
            detail,
        }
    }

    fn from_bound(name: &str, value: f64, bound: f64) -> Self {
        if value <= bound {
            Self::ok(name, format!("{value:.3e} <= {bound:.0e}"))
        } else {
            Self::fail(name, format!("{value:.3e} > {bound:.0e}"))
        }
    }
}

pub const SUITES: [&str; 4] = ["mt-table", "gradients", "filter", "schedule"];

pub fn run_suite(name: &str) -> Result<Vec<PropertyResult>> {
    match name {
        "mt-table" => Ok(mt_table_suite()),
        "gradients" => Ok(gradients_suite()),
        "filter" => Ok(filter_suite()),
        "schedule" => Ok(schedule_suite()),
        other => Err(Error::Config {
            key: "--suite".into(),
            message: format!("unknown suite `{other}`; available: {}", SUITES.join(", ")),
        }),
    }
}

// --- brute-force plane clipping oracle ----------------------------------------

/// Zero-set polygon of the linear interpolant over one tetrahedron,
/// computed without the marching-tet tables: collect sign-change edge
/// crossings, order them around their centroid in the plane, and measure
/// the area. `gradient` is the interpolant's spatial gradient (the
/// direction from negative to positive).
pub struct ClippedCrossSection {
    pub points: Vec<Vec3>,
    pub area: f64,
    pub gradient: Vec3,
}

pub fn clip_tet_cross_section(verts: [Vec3; 4], sdf: [f64; 4]) -> ClippedCrossSection {
    let m = Matrix3::from_columns(&[verts[1] - verts[0], verts[2] - verts[0], verts[3] - verts[0]]);
    let ds = Vec3::new(sdf[1] - sdf[0], sdf[2] - sdf[0], sdf[3] - sdf[0]);
    let gradient = m
        .transpose()
        .try_inverse()
        .map(|inv| inv * ds)
        .unwrap_or_else(Vec3::zeros);

    let mut points = Vec::new();
    for (a, b) in TET_EDGES {
        let (sa, sb) = (sdf[a], sdf[b]);
        if (sa < 0.0) != (sb < 0.0) {
            let t = sa / (sa - sb);
            points.push(verts[a] + (verts[b] - verts[a]) * t);
        }
    }
    if points.len() < 3 {
        return ClippedCrossSection {
            points,
            area: 0.0,
            gradient,
        };
    }
    // order around the centroid in the cutting plane
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let n = gradient.normalize();
    let mut u = n.cross(&Vec3::new(1.0, 0.0, 0.0));
    if u.norm() < 1e-9 {
        u = n.cross(&Vec3::new(0.0, 1.0, 0.0));
    }
    let u = u.normalize();
    let v = n.cross(&u);
    let mut keyed: Vec<(f64, Vec3)> = points
        .iter()
        .map(|&p| {
            let d = p - centroid;
            (d.dot(&v).atan2(d.dot(&u)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let ordered: Vec<Vec3> = keyed.into_iter().map(|(_, p)| p).collect();
    let mut area_vec = Vec3::zeros();
    for i in 1..ordered.len() - 1 {
        area_vec += (ordered[i] - ordered[0]).cross(&(ordered[i + 1] - ordered[0]));
    }
    ClippedCrossSection {
        points: ordered,
        area: area_vec.norm() * 0.5,
        gradient,
    }
}

/// Check one sign pattern on one tet shape against the clipping oracle.
fn check_pattern(verts: [Vec3; 4], pattern: usize) -> std::result::Result<(), String> {
    let sdf: [f64; 4] = std::array::from_fn(|i| if pattern & (1 << i) != 0 { -1.0 } else { 1.0 });
    let inside: [bool; 4] = std::array::from_fn(|i| sdf[i] < 0.0);
    let tris = classify_tet(inside);
    let oracle = clip_tet_cross_section(verts, sdf);

    let neg_count = inside.iter().filter(|&&b| b).count();
    let expected_tris = match neg_count {
        0 | 4 => 0,
        1 | 3 => 1,
        2 => 2,
        _ => unreachable!(),
    };
    if tris.len() != expected_tris {
        return Err(format!(
            "pattern {pattern:04b}: {} triangles, expected {expected_tris}",
            tris.len()
        ));
    }
    if expected_tris == 0 {
        return Ok(());
    }

    // field value of the linear interpolant at a point
    let field = |p: Vec3| -> f64 { sdf[0] + oracle.gradient.dot(&(p - verts[0])) };
    let crossing = |edge: usize| -> Vec3 {
        let (a, b) = TET_EDGES[edge];
        let t = sdf[a] / (sdf[a] - sdf[b]);
        verts[a] + (verts[b] - verts[a]) * t
    };

    let mut mt_area = 0.0;
    for tri in &tris {
        let p: Vec<Vec3> = tri.iter().map(|&e| crossing(e)).collect();
        for q in &p {
            let residual = field(*q).abs();
            if residual > 1e-9 {
                return Err(format!(
                    "pattern {pattern:04b}: vertex off the zero plane by {residual:.3e}"
                ));
            }
        }
        let cross = (p[1] - p[0]).cross(&(p[2] - p[0]));
        mt_area += cross.norm() * 0.5;
        if cross.dot(&oracle.gradient) <= 0.0 {
            return Err(format!(
                "pattern {pattern:04b}: triangle normal does not point from negative to positive"
            ));
        }
    }
    if (mt_area - oracle.area).abs() > 1e-12 * (1.0 + oracle.area) {
        return Err(format!(
            "pattern {pattern:04b}: area {mt_area} vs oracle {oracle_area}",
            oracle_area = oracle.area
        ));
    }
    Ok(())
}

fn mt_table_suite() -> Vec<PropertyResult> {
    let mut results = Vec::new();

    // all 16 patterns on all 6 lattice tet shapes
    let grid = TetGrid::new(1).expect("unit grid");
    let mut failures = Vec::new();
    for tet in &grid.tets {
        let verts: [Vec3; 4] = std::array::from_fn(|i| grid.vertices[tet[i] as usize]);
        for pattern in 0..16usize {
            if let Err(e) = check_pattern(verts, pattern) {
                failures.push(e);
            }
        }
    }
    results.push(if failures.is_empty() {
        PropertyResult::ok(
            "mt-table/16-patterns",
            "96 tet/pattern combinations match the clipping oracle".into(),
        )
    } else {
        PropertyResult::fail("mt-table/16-patterns", failures.join("; "))
    });

    // sphere extraction accuracy
    let grid = TetGrid::new(16).expect("grid");
    let scene = PriorScene::sphere(Vec3::zeros(), 0.5).expect("scene");
    let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
    let mesh = marching_tets(&grid, &params);
    let worst = mesh
        .vertices
        .iter()
        .map(|v| prior_sdf(&scene, *v).abs())
        .fold(0.0, f64::max);
    results.push(PropertyResult::from_bound(
        "mt-table/sphere-vertex-distance",
        worst,
        grid.spacing(),
    ));

    results.push(match watertight_census(&mesh) {
        Ok(()) => PropertyResult::ok(
            "mt-table/watertight-census",
            format!(
                "{} triangles, every edge shared by two opposed triangles",
                mesh.triangles.len()
            ),
        ),
        Err(e) => PropertyResult::fail("mt-table/watertight-census", e),
    });

    results
}

// --- finite differences --------------------------------------------------------

/// Central finite difference of a scalar function.
pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn relative_error(analytic: f64, fd: f64, scale: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(scale)
}

fn lcg_unit(state: &mut u64) -> f64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

fn gradients_suite() -> Vec<PropertyResult> {
    let mut results = Vec::new();

    // prior_fit_loss adjoint vs finite differences
    {
        let grid = TetGrid::new(4).expect("grid");
        let mut state = 0xC0FFEEu64;
        let mut params = FieldParams::constant(&grid, 0.0);
        for s in &mut params.sdf {
            *s = lcg_unit(&mut state) - 0.5;
        }
        let cap = 0.2 * grid.spacing();
        for (i, o) in params.offset.iter_mut().enumerate() {
            if !grid.is_boundary_vertex(i) {
                *o = Vec3::new(
                    (lcg_unit(&mut state) - 0.5) * cap,
                    (lcg_unit(&mut state) - 0.5) * cap,
                    (lcg_unit(&mut state) - 0.5) * cap,
                );
            }
        }
        let samples: Vec<PointSample> = (0..32)
            .map(|_| PointSample {
                position: Vec3::new(
                    lcg_unit(&mut state) * 1.6 - 0.8,
                    lcg_unit(&mut state) * 1.6 - 0.8,
                    lcg_unit(&mut state) * 1.6 - 0.8,
                ),
                target_sdf: lcg_unit(&mut state) - 0.5,
            })
            .collect();
        let lambda = 0.1;
        let (_, grads) = prior_fit_loss(&grid, &params, &samples, lambda).expect("loss");
        let h = 1e-4;
        let mut worst = 0.0f64;
        for probe in 0..40 {
            let vi = (lcg_unit(&mut state) * grid.vertex_count() as f64) as usize;
            let mut f = |x: f64| {
                let mut p = params.clone();
                if probe % 2 == 0 {
                    p.sdf[vi] = x;
                    prior_fit_loss(&grid, &p, &samples, lambda).expect("loss").0
                } else {
                    p.offset[vi].y = x;
                    prior_fit_loss(&grid, &p, &samples, lambda).expect("loss").0
                }
            };
            let (x0, analytic) = if probe % 2 == 0 {
                (params.sdf[vi], grads.sdf[vi])
            } else {
                (params.offset[vi].y, grads.offset[vi].y)
            };
            let fd = central_difference(&mut f, x0, h);
            if fd.abs() > 1e-7 || analytic.abs() > 1e-7 {
                worst = worst.max(relative_error(analytic, fd, 1e-6));
            }
        }
        results.push(PropertyResult::from_bound(
            "gradients/prior-fit-loss",
            worst,
            1e-5,
        ));
    }

    // structural_loss adjoint on random 8x8 maps
    {
        let mut state = 0xBADC0DEu64;
        let mk = |state: &mut u64| {
            let mut img = Image::zeros(8, 8, 3);
            for v in &mut img.data {
                *v = lcg_unit(state);
            }
            NormalMap {
                pixels: img,
                mask: Mask::new_true(8, 8),
            }
        };
        let prior = vec![mk(&mut state)];
        let mut live = vec![mk(&mut state)];
        let cfg = GuidanceConfig::default();
        let (_, grads) = structural_loss(&prior, &live, &cfg).expect("loss");
        let mut worst = 0.0f64;
        for probe in 0..30 {
            let idx = (lcg_unit(&mut state) * live[0].pixels.data.len() as f64) as usize;
            let x0 = live[0].pixels.data[idx];
            let analytic = grads[0].data[idx];
            let mut f = |x: f64| {
                live[0].pixels.data[idx] = x;
                let value = structural_loss(&prior, &live, &cfg).expect("loss").0;
                live[0].pixels.data[idx] = x0;
                value
            };
            let fd = central_difference(&mut f, x0, 1e-5);
            let _ = probe;
            if fd.abs() > 1e-9 || analytic.abs() > 1e-9 {
                worst = worst.max(relative_error(analytic, fd, 1e-6));
            }
        }
        results.push(PropertyResult::from_bound(
            "gradients/structural-loss",
            worst,
            1e-6,
        ));
    }

    // semantic_loss adjoint
    {
        let mut state = 0x5EEDu64;
        let mk = |state: &mut u64| {
            let raw: Vec<f64> = (0..12).map(|_| lcg_unit(state) - 0.5).collect();
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            FeatureVec {
                values: raw.into_iter().map(|v| v / n).collect(),
                degenerate: false,
            }
        };
        let prior = vec![mk(&mut state), mk(&mut state)];
        let mut live = vec![mk(&mut state), mk(&mut state)];
        let (_, grads) = semantic_loss(&prior, &live).expect("loss");
        let mut worst = 0.0f64;
        for probe in 0..24 {
            let view = probe % 2;
            let idx = (lcg_unit(&mut state) * 12.0) as usize;
            let x0 = live[view].values[idx];
            let analytic = grads[view][idx];
            let mut f = |x: f64| {
                live[view].values[idx] = x;
                let v = semantic_loss(&prior, &live).expect("loss").0;
                live[view].values[idx] = x0;
                v
            };
            let fd = central_difference(&mut f, x0, 1e-6);
            if fd.abs() > 1e-9 || analytic.abs() > 1e-9 {
                worst = worst.max(relative_error(analytic, fd, 1e-6));
            }
        }
        results.push(PropertyResult::from_bound(
            "gradients/semantic-loss",
            worst,
            1e-6,
        ));
    }

    // rasterize_color albedo path
    {
        let grid = TetGrid::new(4).expect("grid");
        let scene = PriorScene::sphere(Vec3::zeros(), 0.55).expect("scene");
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        let mesh = marching_tets(&grid, &params);
        let mut state = 0xA1B2u64;
        let mut albedo = AlbedoField::constant(grid.vertex_count(), [0.5; 3]);
        for rgb in &mut albedo.rgb {
            for c in rgb.iter_mut() {
                *c = 0.2 + 0.6 * lcg_unit(&mut state);
            }
        }
        let cam = crate::render::CameraPose {
            radius: 2.5,
            elevation_deg: 12.0,
            azimuth_deg: 33.0,
            fov_y_deg: 45.0,
            height: 24,
            width: 24,
        };
        let light = Vec3::new(0.3, 0.4, 0.9).normalize();
        let (img, _, raster) = rasterize_color(&mesh, &albedo, &cam, light).expect("render");
        // mean-pixel objective
        let count = img.data.len() as f64;
        let upstream = Image::filled(24, 24, 3, 1.0 / count);
        let (d_albedo, _) =
            color_raster_backward(&mesh, &albedo, &raster, light, &upstream).expect("backward");
        let mut worst = 0.0f64;
        for _ in 0..30 {
            let vi = (lcg_unit(&mut state) * grid.vertex_count() as f64) as usize;
            let c = (lcg_unit(&mut state) * 3.0) as usize;
            let x0 = albedo.rgb[vi][c];
            let analytic = d_albedo[vi][c];
            let mut albedo_probe = albedo.clone();
            let mut f = |x: f64| {
                albedo_probe.rgb[vi][c] = x;
                let (img, _, _) =
                    rasterize_color(&mesh, &albedo_probe, &cam, light).expect("render");
                img.mean()
            };
            let fd = central_difference(&mut f, x0, 1e-5);
            if fd.abs() > 1e-10 || analytic.abs() > 1e-10 {
                worst = worst.max(relative_error(analytic, fd, 1e-8));
            }
        }
        results.push(PropertyResult::from_bound(
            "gradients/color-albedo-path",
            worst,
            1e-5,
        ));
    }

    results
}

fn filter_suite() -> Vec<PropertyResult> {
    let mut results = Vec::new();

    // kernel normalization: filter a constant image
    let constant = Image::filled(16, 16, 3, 0.37);
    let filtered = gaussian_filter(&constant, 1.0, 3);
    let worst = constant
        .data
        .iter()
        .zip(&filtered.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    results.push(PropertyResult::from_bound(
        "filter/kernel-sums-to-one",
        worst,
        1e-12,
    ));

    // impulse response vs the hand-normalized kernel
    let mut impulse = Image::zeros(9, 9, 1);
    impulse.set(4, 4, 0, 1.0);
    let response = gaussian_filter(&impulse, 1.0, 3);
    let g = |x: f64, y: f64| (-(x * x + y * y) / 2.0).exp();
    let mut total = 0.0;
    for y in -3..=3i32 {
        for x in -3..=3i32 {
            total += g(x as f64, y as f64);
        }
    }
    let mut worst = 0.0f64;
    for y in -3..=3i32 {
        for x in -3..=3i32 {
            let expect = g(x as f64, y as f64) / total;
            let got = response.get((4 + y) as usize, (4 + x) as usize, 0);
            worst = worst.max((expect - got).abs());
        }
    }
    results.push(PropertyResult::from_bound(
        "filter/impulse-response",
        worst,
        1e-9,
    ));

    // constant image yields an exactly zero descriptor
    let map = NormalMap {
        pixels: Image::filled(12, 12, 3, 0.8),
        mask: Mask::new_true(12, 12),
    };
    let descriptor = structural_descriptor(&map, &GuidanceConfig::default());
    let max = descriptor.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    results.push(if max == 0.0 {
        PropertyResult::ok("filter/constant-zero-descriptor", "exactly zero".into())
    } else {
        PropertyResult::fail(
            "filter/constant-zero-descriptor",
            format!("max |descriptor| = {max:.3e}"),
        )
    });

    results
}

fn schedule_suite() -> Vec<PropertyResult> {
    let mut results = Vec::new();
    let schedule = default_schedule();

    let mut worst = 0.0f64;
    for t in 1..=schedule.len() {
        let a = schedule.alpha(t);
        let s = schedule.sigma(t);
        worst = worst.max((a * a + s * s - 1.0).abs());
    }
    results.push(PropertyResult::from_bound(
        "schedule/variance-preserving",
        worst,
        1e-9,
    ));

    let a = Image::filled(4, 4, 3, 0.37);
    let combined = cfg_combine(&a, &a, 50.0).expect("combine");
    let diff = combined
        .data
        .iter()
        .zip(&a.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    results.push(PropertyResult::from_bound(
        "schedule/cfg-fixed-point",
        diff,
        0.0,
    ));

    // point-mass provider returns the injected noise
    let schedule = std::sync::Arc::new(default_schedule());
    let provider = PointMassProvider::new(schedule.clone());
    let mut state = 0xFACEu64;
    let mut x_star = Image::zeros(4, 4, 3);
    let mut eps = Image::zeros(4, 4, 3);
    for v in &mut x_star.data {
        *v = lcg_unit(&mut state);
    }
    for v in &mut eps.data {
        *v = lcg_unit(&mut state) * 2.0 - 1.0;
    }
    let mut worst = 0.0f64;
    for t in [1, 137, 950] {
        let z = perturb(&x_star, t, &eps, &schedule).expect("perturb");
        let pred = provider
            .predict_noise(&z, t, &ConditionToken::target(x_star.clone()))
            .expect("predict");
        for (p, e) in pred.data.iter().zip(&eps.data) {
            worst = worst.max((p - e).abs());
        }
    }
    results.push(PropertyResult::from_bound(
        "schedule/point-mass-noise-identity",
        worst,
        1e-12,
    ));

    // annealing identities
    let ok_hold = (0..=1000).all(|n| crate::guidance::anneal(10.0, n, 0.5, 1000) == 10.0);
    let value = crate::guidance::anneal(10.0, 1002, 0.5, 1000);
    let ok_value = (value - 3.67879441).abs() <= 1e-6;
    let mut prev = f64::INFINITY;
    let ok_monotone = (0..3000).all(|n| {
        let v = crate::guidance::anneal(10.0, n, 0.5, 1000);
        let ok = v <= prev;
        prev = v;
        ok
    });
    results.push(if ok_hold && ok_value && ok_monotone {
        PropertyResult::ok(
            "schedule/annealing",
            format!("gamma(1002) = {value:.8}"),
        )
    } else {
        PropertyResult::fail(
            "schedule/annealing",
            format!("hold={ok_hold} value={value} monotone={ok_monotone}"),
        )
    });

    // free-image descent: gradient steps on an 8x8 image reach the target
    let mut x = Image::zeros(8, 8, 3);
    let mut target = Image::zeros(8, 8, 3);
    for v in &mut target.data {
        *v = lcg_unit(&mut state);
    }
    let token = ConditionToken::target(target.clone());
    let weight = WeightSchedule::SigmaSquared;
    let mut mse = f64::INFINITY;
    for iter in 0..500 {
        let t = crate::score::sample_timestep(
            TimestepStrategy::LinearDescending,
            iter,
            500,
            schedule.len(),
            0,
        );
        let mut noise = Image::zeros(8, 8, 3);
        for v in &mut noise.data {
            *v = lcg_unit(&mut state) * 2.0 - 1.0;
        }
        let grad =
            sds_image_gradient(&provider, &x, &token, t, &noise, 0.0, &weight, &schedule)
                .expect("sds gradient");
        x.axpy(-1.0, &grad);
        mse = x
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.data.len() as f64;
        if mse < 1e-3 {
            break;
        }
    }
    results.push(PropertyResult::from_bound(
        "schedule/free-image-descent-mse",
        mse,
        1e-3,
    ));

    results
}
