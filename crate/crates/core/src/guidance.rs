//! Structural and semantic guidance between frozen prior normal maps and
//! live normal maps, plus the step-annealing schedule for their weights.
//!
//! The structural descriptor is the per-channel gradient magnitude of the
//! Gaussian-filtered encoded normal map; pixels whose 3x3 neighborhood
//! touches background are zeroed so the silhouette step edge does not
//! dominate the loss. Semantic features come from pluggable encoders that
//! L2-normalize their output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::render::NormalMap;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub lambda_struc: f64,
    pub lambda_sem: f64,
    /// Annealing decay rate.
    pub beta: f64,
    /// Annealing threshold iteration.
    pub m: usize,
    pub sigma_blur: f64,
    pub kernel_radius: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_struc: 10.0,
            lambda_sem: 30.0,
            beta: 0.5,
            m: 1000,
            sigma_blur: 1.0,
            kernel_radius: 3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_struc >= 0.0
            && self.lambda_sem >= 0.0
            && self.beta >= 0.0
            && self.sigma_blur >= 0.0;
        if !ok {
            return Err(Error::Config {
                key: "guidance".into(),
                message: "lambda, beta and sigma must be nonnegative".into(),
            });
        }
        let min_radius = (3.0 * self.sigma_blur).ceil() as usize;
        if self.kernel_radius < min_radius {
            return Err(Error::Config {
                key: "guidance.kernel_radius".into(),
                message: format!("radius {} < ceil(3 sigma) = {min_radius}", self.kernel_radius),
            });
        }
        Ok(())
    }
}

/// Step annealing: gamma = lambda * exp(-beta * max(0, n_cur - m)).
pub fn anneal(lambda: f64, n_cur: usize, beta: f64, m: usize) -> f64 {
    debug_assert!(lambda >= 0.0 && beta >= 0.0);
    let over = n_cur.saturating_sub(m) as f64;
    lambda * (-beta * over).exp()
}

// --- Gaussian filter --------------------------------------------------------

/// Normalized 1D Gaussian taps for the separable filter.
fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Mirror index across the border without repeating the edge sample
/// (reflect-101).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

/// Separable convolution with the discretized, normalized Gaussian;
/// reflect padding; per channel.
pub fn gaussian_filter(image: &Image, sigma: f64, radius: usize) -> Image {
    assert!(sigma > 0.0, "sigma must be > 0");
    let taps = gaussian_taps(sigma, radius);
    let r = radius as isize;
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut tmp = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, tap) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - r, w);
                    acc += tap * image.get(y, sx, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, tap) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - r, h);
                    acc += tap * tmp.get(sy, x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// Exact transpose of `gaussian_filter` (scatter through the same reflect
/// indices).
pub fn gaussian_filter_backward(upstream: &Image, sigma: f64, radius: usize) -> Image {
    let taps = gaussian_taps(sigma, radius);
    let r = radius as isize;
    let (h, w, ch) = (upstream.height, upstream.width, upstream.channels);
    let mut tmp = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let up = upstream.get(y, x, c);
                if up == 0.0 {
                    continue;
                }
                for (k, tap) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - r, h);
                    tmp.add_at(sy, x, c, tap * up);
                }
            }
        }
    }
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let up = tmp.get(y, x, c);
                if up == 0.0 {
                    continue;
                }
                for (k, tap) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - r, w);
                    out.add_at(y, sx, c, tap * up);
                }
            }
        }
    }
    out
}

// --- structural descriptor --------------------------------------------------

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Central differences with replicated borders.
fn central_diff(image: &Image) -> (Image, Image) {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut gx = Image::zeros(h, w, ch);
    let mut gy = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let xp = image.get(y, clamp_idx(x as isize + 1, w), c);
                let xm = image.get(y, clamp_idx(x as isize - 1, w), c);
                gx.set(y, x, c, (xp - xm) * 0.5);
                let yp = image.get(clamp_idx(y as isize + 1, h), x, c);
                let ym = image.get(clamp_idx(y as isize - 1, h), x, c);
                gy.set(y, x, c, (yp - ym) * 0.5);
            }
        }
    }
    (gx, gy)
}

/// Transpose of `central_diff`.
fn central_diff_backward(d_gx: &Image, d_gy: &Image) -> Image {
    let (h, w, ch) = (d_gx.height, d_gx.width, d_gx.channels);
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let ux = d_gx.get(y, x, c) * 0.5;
                if ux != 0.0 {
                    out.add_at(y, clamp_idx(x as isize + 1, w), c, ux);
                    out.add_at(y, clamp_idx(x as isize - 1, w), c, -ux);
                }
                let uy = d_gy.get(y, x, c) * 0.5;
                if uy != 0.0 {
                    out.add_at(clamp_idx(y as isize + 1, h), x, c, uy);
                    out.add_at(clamp_idx(y as isize - 1, h), x, c, -uy);
                }
            }
        }
    }
    out
}

/// True where every pixel of the clamped 3x3 neighborhood is covered.
fn eroded_valid(map: &NormalMap) -> Vec<bool> {
    let (h, w) = (map.mask.height, map.mask.width);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ok = true;
            'n: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if !map.mask.get(clamp_idx(y as isize + dy, h), clamp_idx(x as isize + dx, w)) {
                        ok = false;
                        break 'n;
                    }
                }
            }
            valid[y * w + x] = ok;
        }
    }
    valid
}

struct DescriptorAux {
    descriptor: Image,
    gx: Image,
    gy: Image,
    valid: Vec<bool>,
}

fn descriptor_with_aux(map: &NormalMap, cfg: &GuidanceConfig) -> DescriptorAux {
    let filtered = gaussian_filter(&map.pixels, cfg.sigma_blur, cfg.kernel_radius);
    let (gx, gy) = central_diff(&filtered);
    let valid = eroded_valid(map);
    let (h, w, ch) = (filtered.height, filtered.width, filtered.channels);
    let mut descriptor = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            if !valid[y * w + x] {
                continue;
            }
            for c in 0..ch {
                let vx = gx.get(y, x, c);
                let vy = gy.get(y, x, c);
                descriptor.set(y, x, c, (vx * vx + vy * vy).sqrt());
            }
        }
    }
    DescriptorAux {
        descriptor,
        gx,
        gy,
        valid,
    }
}

/// Per-channel gradient magnitude of the filtered map, zeroed where the
/// 3x3 neighborhood touches background. Nonnegative everywhere.
pub fn structural_descriptor(map: &NormalMap, cfg: &GuidanceConfig) -> Image {
    descriptor_with_aux(map, cfg).descriptor
}

/// Sum of squared descriptor differences over views, with the exact
/// adjoint with respect to the live maps' pixels. Live coverage is
/// treated as constant.
pub fn structural_loss(
    prior_maps: &[NormalMap],
    live_maps: &[NormalMap],
    cfg: &GuidanceConfig,
) -> Result<(f64, Vec<Image>)> {
    if prior_maps.len() != live_maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "structural loss got {} prior maps vs {} live maps",
            prior_maps.len(),
            live_maps.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(live_maps.len());
    for (prior, live) in prior_maps.iter().zip(live_maps) {
        prior.pixels.check_same_shape(&live.pixels, "structural loss view")?;
        let dp = structural_descriptor(prior, cfg);
        let aux = descriptor_with_aux(live, cfg);
        let (h, w, ch) = (dp.height, dp.width, dp.channels);
        let mut d_gx = Image::zeros(h, w, ch);
        let mut d_gy = Image::zeros(h, w, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let diff = dp.get(y, x, c) - aux.descriptor.get(y, x, c);
                    loss += diff * diff;
                    if !aux.valid[y * w + x] {
                        continue;
                    }
                    let mag = aux.descriptor.get(y, x, c);
                    if mag <= 1e-300 {
                        continue;
                    }
                    // d/d(desc_live) of (dp - dl)^2 is -2 diff
                    let d_mag = -2.0 * diff;
                    d_gx.set(y, x, c, d_mag * aux.gx.get(y, x, c) / mag);
                    d_gy.set(y, x, c, d_mag * aux.gy.get(y, x, c) / mag);
                }
            }
        }
        let d_filtered = central_diff_backward(&d_gx, &d_gy);
        let d_pixels = gaussian_filter_backward(&d_filtered, cfg.sigma_blur, cfg.kernel_radius);
        grads.push(d_pixels);
    }
    Ok((loss, grads))
}

// --- semantic encoders -------------------------------------------------------

/// Unit-norm feature vector; `degenerate` flags inputs whose raw encoding
/// collapsed to zero (the canonical basis vector is returned instead).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

const DEGENERATE_NORM: f64 = 1e-12;

fn normalize_feature(raw: Vec<f64>) -> FeatureVec {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        let mut values = vec![0.0; raw.len()];
        if !values.is_empty() {
            values[0] = 1.0;
        }
        return FeatureVec {
            values,
            degenerate: true,
        };
    }
    FeatureVec {
        values: raw.into_iter().map(|v| v / norm).collect(),
        degenerate: false,
    }
}

/// dL/draw given dL/dy for y = raw/|raw|.
fn normalize_backward(raw: &[f64], upstream: &[f64]) -> Vec<f64> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        return vec![0.0; raw.len()];
    }
    let y: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let y_dot_up: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(upstream)
        .map(|(yi, ui)| (ui - yi * y_dot_up) / norm)
        .collect()
}

pub trait SemanticEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, image: &Image) -> FeatureVec;
    /// dL/dimage given dL/dfeature. Returns zeros for degenerate inputs.
    fn backward(&self, image: &Image, upstream: &[f64]) -> Image;
}

/// Pooled patch statistics: per-cell per-channel means over a P x P grid
/// of cells, concatenated and L2-normalized. With P=4 on 3-channel maps
/// the feature dimension is 48.
#[derive(Debug, Clone)]
pub struct PatchStatsEncoder {
    pub patches: usize,
}

impl PatchStatsEncoder {
    pub fn new(patches: usize) -> Self {
        assert!(patches >= 1);
        PatchStatsEncoder { patches }
    }

    fn cell_bounds(n: usize, cells: usize, i: usize) -> (usize, usize) {
        (i * n / cells, (i + 1) * n / cells)
    }

    fn raw(&self, image: &Image) -> Vec<f64> {
        let p = self.patches;
        let mut raw = Vec::with_capacity(p * p * image.channels);
        for ci in 0..p {
            let (y0, y1) = Self::cell_bounds(image.height, p, ci);
            for cj in 0..p {
                let (x0, x1) = Self::cell_bounds(image.width, p, cj);
                let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                for c in 0..image.channels {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.get(y, x, c);
                        }
                    }
                    raw.push(sum / count);
                }
            }
        }
        raw
    }
}

impl SemanticEncoder for PatchStatsEncoder {
    fn dim(&self) -> usize {
        self.patches * self.patches * 3
    }

    fn encode(&self, image: &Image) -> FeatureVec {
        normalize_feature(self.raw(image))
    }

    fn backward(&self, image: &Image, upstream: &[f64]) -> Image {
        let raw = self.raw(image);
        let d_raw = normalize_backward(&raw, upstream);
        let p = self.patches;
        let mut out = Image::zeros(image.height, image.width, image.channels);
        let mut k = 0;
        for ci in 0..p {
            let (y0, y1) = Self::cell_bounds(image.height, p, ci);
            for cj in 0..p {
                let (x0, x1) = Self::cell_bounds(image.width, p, cj);
                let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                for c in 0..image.channels {
                    let share = d_raw[k] / count;
                    k += 1;
                    if share == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        for x in x0..x1 {
                            out.add_at(y, x, c, share);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Fixed-seed random projection followed by L2 normalization. The
/// projection matrix is drawn once for a fixed input shape.
pub struct RandomProjectionEncoder {
    dim: usize,
    height: usize,
    width: usize,
    channels: usize,
    weights: Vec<f64>,
}

impl RandomProjectionEncoder {
    pub fn new(dim: usize, seed: u64, height: usize, width: usize, channels: usize) -> Self {
        let n_in = height * width * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..dim * n_in)
            .map(|_| {
                // Box-Muller keeps us off rand_distr for one distribution
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
            })
            .collect();
        RandomProjectionEncoder {
            dim,
            height,
            width,
            channels,
            weights,
        }
    }

    fn check_shape(&self, image: &Image) {
        assert!(
            image.height == self.height
                && image.width == self.width
                && image.channels == self.channels,
            "encoder built for {}x{}x{}, got {}x{}x{}",
            self.height,
            self.width,
            self.channels,
            image.height,
            image.width,
            image.channels
        );
    }

    fn raw(&self, image: &Image) -> Vec<f64> {
        let n_in = image.data.len();
        (0..self.dim)
            .map(|row| {
                let base = row * n_in;
                image
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| self.weights[base + i] * v)
                    .sum()
            })
            .collect()
    }
}

impl SemanticEncoder for RandomProjectionEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &Image) -> FeatureVec {
        self.check_shape(image);
        normalize_feature(self.raw(image))
    }

    fn backward(&self, image: &Image, upstream: &[f64]) -> Image {
        self.check_shape(image);
        let raw = self.raw(image);
        let d_raw = normalize_backward(&raw, upstream);
        let n_in = image.data.len();
        let mut out = Image::zeros(image.height, image.width, image.channels);
        for (row, &dr) in d_raw.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let base = row * n_in;
            for i in 0..n_in {
                out.data[i] += self.weights[base + i] * dr;
            }
        }
        out
    }
}

/// Thin wrapper matching the operation name used by the pipeline.
pub fn semantic_encode(encoder: &dyn SemanticEncoder, image: &Image) -> FeatureVec {
    encoder.encode(image)
}

/// Sum over views of (1 - cos(prior, live)) with the exact gradient with
/// respect to the live features. The cosine uses the full norm-aware
/// formula so the adjoint is exact even slightly off the unit sphere.
pub fn semantic_loss(
    prior_feats: &[FeatureVec],
    live_feats: &[FeatureVec],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if prior_feats.len() != live_feats.len() {
        return Err(Error::ShapeMismatch(format!(
            "semantic loss got {} prior vs {} live features",
            prior_feats.len(),
            live_feats.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(live_feats.len());
    for (a, b) in prior_feats.iter().zip(live_feats) {
        if a.values.len() != b.values.len() {
            return Err(Error::ShapeMismatch("semantic feature dims differ".into()));
        }
        let na: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
            loss += 1.0;
            grads.push(vec![0.0; b.values.len()]);
            continue;
        }
        let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        loss += 1.0 - cos;
        let grad: Vec<f64> = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(ai, bi)| -(ai / (na * nb) - dot * bi / (na * nb * nb * nb)))
            .collect();
        grads.push(grad);
    }
    Ok((loss, grads))
}
