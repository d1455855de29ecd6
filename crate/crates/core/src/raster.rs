//! EWA splat projection and front-to-back alpha blending of arbitrary
//! channel stacks, with gradients with respect to per-Gaussian channel
//! values.
//!
//! Blending weights depend only on geometry and camera, so a [`BlendState`]
//! can be computed once per view and replayed for any channel stack.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, Scene};

/// Added to the projected covariance (pixel^2) before inversion.
pub const COV2D_REGULARIZATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;
/// Contributions below this value are skipped.
pub const MIN_CONTRIBUTION: f64 = 1.0 / 255.0;
/// Blending stops once the remaining transmittance drops below this.
pub const TRANSMITTANCE_EPSILON: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

static SINGULAR_LOGGED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGeometry {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Projected covariance `(xx, xy, yy)` before regularization.
    pub cov2d: [f64; 3],
    /// Inverse of the regularized covariance `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub gaussian_index: usize,
    pub opacity: f64,
    /// Pixel radius outside of which the contribution is below
    /// [`MIN_CONTRIBUTION`].
    pub radius: f64,
}

impl Splat2D {
    /// Inclusive pixel range `[x0, x1] x [y0, y1]` that may receive a
    /// contribution (unclipped).
    fn pixel_bounds(&self) -> [i64; 4] {
        let r = self.radius + 1.0;
        let [u, v] = self.mean2d;
        [
            (u - r - 0.5).ceil() as i64,
            (u + r - 0.5).floor() as i64,
            (v - r - 0.5).ceil() as i64,
            (v + r - 0.5).floor() as i64,
        ]
    }
}

/// Projects one Gaussian; `None` when it is culled (behind the near plane,
/// outside the image, below the contribution cutoff, or singular).
pub fn project_gaussian(g: &GaussianGeometry, index: usize, cam: &Camera) -> Option<Splat2D> {
    let p = cam.to_camera(&g.mean);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    if !(g.opacity >= MIN_CONTRIBUTION) {
        return None;
    }
    let inv_z = 1.0 / p.z;
    let u = cam.fx * p.x * inv_z + cam.cx;
    let v = cam.fy * p.y * inv_z + cam.cy;
    let jacobian = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * p.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * p.y * inv_z * inv_z,
    );
    let t = jacobian * cam.rotation;
    let cov = t * g.covariance * t.transpose();
    let (xx, xy, yy) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let a = xx + COV2D_REGULARIZATION;
    let c = yy + COV2D_REGULARIZATION;
    let det = a * c - xy * xy;
    if !(det > 0.0) || !det.is_finite() {
        if !SINGULAR_LOGGED.swap(true, Ordering::Relaxed) {
            log::warn!("skipping Gaussian {index}: singular projected covariance");
        }
        return None;
    }
    let conic = [c / det, -xy / det, a / det];
    let half_trace = 0.5 * (a + c);
    let lambda_max = half_trace + (0.25 * (a - c) * (a - c) + xy * xy).sqrt();
    let radius = (2.0 * (g.opacity / MIN_CONTRIBUTION).ln()).max(0.0).sqrt() * lambda_max.sqrt();
    let splat = Splat2D {
        mean2d: [u, v],
        cov2d: [xx, xy, yy],
        conic,
        depth: p.z,
        gaussian_index: index,
        opacity: g.opacity,
        radius,
    };
    let [x0, x1, y0, y1] = splat.pixel_bounds();
    if x1 < 0 || y1 < 0 || x0 >= cam.width as i64 || y0 >= cam.height as i64 {
        return None;
    }
    Some(splat)
}

/// `alpha * exp(-1/2 d^T conic d)` at pixel-space position `pixel`.
#[inline]
pub fn evaluate_contribution(splat: &Splat2D, pixel: [f64; 2]) -> f64 {
    let dx = pixel[0] - splat.mean2d[0];
    let dy = pixel[1] - splat.mean2d[1];
    let [a, b, c] = splat.conic;
    let m = (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy).max(0.0);
    splat.opacity * (-0.5 * m).exp()
}

/// Center of pixel `(x, y)` in continuous image coordinates.
#[inline]
pub fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

/// Front-to-back order: ascending depth, ties by lower Gaussian index.
pub fn depth_sort(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].gaussian_index.cmp(&splats[b].gaussian_index))
    });
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    pub gaussian: u32,
    /// `T_i * o_i` at this pixel.
    pub weight: f64,
}

/// Per-pixel ordered contributor lists (CSR layout) plus remaining
/// transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendState {
    pub width: u32,
    pub height: u32,
    pub gaussian_count: usize,
    offsets: Vec<usize>,
    contributors: Vec<Contributor>,
    transmittance: Vec<f64>,
}

/// Per-Gaussian channel values, one row of `channels` values per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelValues {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ChannelValues {
    pub fn zeros(count: usize, channels: usize) -> Self {
        Self { channels, data: vec![0.0; count * channels] }
    }

    pub fn count(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Row-major multi-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: u32, height: u32, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width as usize * height as usize * channels] }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// Copies channels `[start, start + count)` into a new image.
    pub fn channel_slice(&self, start: usize, count: usize) -> FeatureImage {
        let mut out = FeatureImage::zeros(self.width, self.height, count);
        for p in 0..self.pixel_count() {
            out.pixel_mut(p).copy_from_slice(&self.pixel(p)[start..start + count]);
        }
        out
    }

    /// Stacks images with equal dimensions along the channel axis.
    pub fn concat(parts: &[&FeatureImage]) -> Result<FeatureImage> {
        let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut out = FeatureImage::zeros(first.width, first.height, channels);
        for p in parts {
            if p.width != first.width || p.height != first.height {
                return Err(Error::Contract("image dimension mismatch".into()));
            }
        }
        for px in 0..first.pixel_count() {
            let mut c = 0;
            let dst = out.pixel_mut(px);
            for p in parts {
                dst[c..c + p.channels].copy_from_slice(p.pixel(px));
                c += p.channels;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl BlendState {
    pub fn empty(width: u32, height: u32, gaussian_count: usize) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, gaussian_count, offsets: vec![0; n + 1], contributors: Vec::new(), transmittance: vec![1.0; n] }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, p: usize) -> &[Contributor] {
        &self.contributors[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn remaining_transmittance(&self, p: usize) -> f64 {
        self.transmittance[p]
    }

    pub fn contributor_count(&self) -> usize {
        self.contributors.len()
    }

    /// Accumulated blending weight per pixel.
    pub fn coverage(&self) -> Vec<f64> {
        (0..self.pixel_count()).map(|p| self.pixel(p).iter().map(|c| c.weight).sum()).collect()
    }

    /// Blended image `sum_i w_i v_i` for the given per-Gaussian values.
    pub fn composite(&self, values: &ChannelValues) -> Result<FeatureImage> {
        if values.count() != self.gaussian_count && !(values.data.is_empty() && self.gaussian_count == 0) {
            return Err(Error::Contract(format!(
                "{} channel rows for {} Gaussians",
                values.count(),
                self.gaussian_count
            )));
        }
        let ch = values.channels;
        let mut out = FeatureImage::zeros(self.width, self.height, ch);
        if ch == 0 {
            return Ok(out);
        }
        out.data.par_chunks_mut(ch).enumerate().for_each(|(p, dst)| {
            for c in self.pixel(p) {
                let v = values.row(c.gaussian as usize);
                for (d, s) in dst.iter_mut().zip(v) {
                    *d += c.weight * s;
                }
            }
        });
        Ok(out)
    }

    /// `dL/dv_i = sum_u w_i(u) dL/dImage(u)`.
    pub fn blend_gradient(&self, d_image: &FeatureImage) -> Result<ChannelValues> {
        if d_image.width != self.width || d_image.height != self.height {
            return Err(Error::Contract("gradient image size differs from blend state".into()));
        }
        let ch = d_image.channels;
        let mut grads = ChannelValues::zeros(self.gaussian_count, ch);
        for p in 0..self.pixel_count() {
            let g = d_image.pixel(p);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for c in self.pixel(p) {
                let row = grads.row_mut(c.gaussian as usize);
                for (r, gv) in row.iter_mut().zip(g) {
                    *r += c.weight * gv;
                }
            }
        }
        Ok(grads)
    }

    /// Checks that the image gradient has the expected channel count.
    pub fn blend_gradient_checked(&self, d_image: &FeatureImage, channels: usize) -> Result<ChannelValues> {
        if d_image.channels != channels {
            return Err(Error::Contract(format!(
                "gradient image has {} channels, expected {channels}",
                d_image.channels
            )));
        }
        self.blend_gradient(d_image)
    }
}

/// Projects every Gaussian and computes per-pixel blending weights with
/// 16x16 tiles processed in parallel.
pub fn rasterize(geometry: &[GaussianGeometry], cam: &Camera) -> BlendState {
    rasterize_with_tile(geometry, cam, TILE_SIZE)
}

pub fn rasterize_with_tile(geometry: &[GaussianGeometry], cam: &Camera, tile: usize) -> BlendState {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let splats: Vec<Splat2D> = geometry
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam))
        .collect();
    if splats.is_empty() {
        return BlendState::empty(cam.width, cam.height, geometry.len());
    }
    let order = depth_sort(&splats);
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &s in &order {
        let [x0, x1, y0, y1] = splats[s].pixel_bounds();
        let tx0 = (x0.max(0) as usize) / tile;
        let tx1 = (x1.min(w as i64 - 1).max(0) as usize) / tile;
        let ty0 = (y0.max(0) as usize) / tile;
        let ty1 = (y1.min(h as i64 - 1).max(0) as usize) / tile;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(s as u32);
            }
        }
    }
    // Per tile: (pixel index, contributors, transmittance).
    let tile_results: Vec<Vec<(usize, Vec<Contributor>, f64)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut out = Vec::with_capacity(tile * tile);
            let bin = &bins[t];
            for y in ty * tile..((ty + 1) * tile).min(h) {
                for x in tx * tile..((tx + 1) * tile).min(w) {
                    let (list, trans) = blend_pixel(bin.iter().map(|&s| &splats[s as usize]), x, y);
                    out.push((y * w + x, list, trans));
                }
            }
            out
        })
        .collect();
    let mut per_pixel: Vec<(Vec<Contributor>, f64)> = vec![(Vec::new(), 1.0); w * h];
    for results in tile_results {
        for (p, list, trans) in results {
            per_pixel[p] = (list, trans);
        }
    }
    let mut state = BlendState::empty(cam.width, cam.height, geometry.len());
    state.contributors.reserve(per_pixel.iter().map(|p| p.0.len()).sum());
    for (p, (list, trans)) in per_pixel.into_iter().enumerate() {
        state.contributors.extend(list);
        state.offsets[p + 1] = state.contributors.len();
        state.transmittance[p] = trans;
    }
    state
}

/// Front-to-back blending of depth-ordered splats at one pixel.
fn blend_pixel<'a>(splats: impl Iterator<Item = &'a Splat2D>, x: usize, y: usize) -> (Vec<Contributor>, f64) {
    let center = pixel_center(x, y);
    let mut transmittance = 1.0;
    let mut list = Vec::new();
    for s in splats {
        let [x0, x1, y0, y1] = s.pixel_bounds();
        let (xi, yi) = (x as i64, y as i64);
        if xi < x0 || xi > x1 || yi < y0 || yi > y1 {
            continue;
        }
        let o = evaluate_contribution(s, center);
        if o < MIN_CONTRIBUTION {
            continue;
        }
        list.push(Contributor { gaussian: s.gaussian_index as u32, weight: transmittance * o });
        transmittance *= 1.0 - o;
        if transmittance < TRANSMITTANCE_EPSILON {
            break;
        }
    }
    (list, transmittance)
}

/// Rasterizes and composites in one call.
pub fn render(geometry: &[GaussianGeometry], values: &ChannelValues, cam: &Camera) -> Result<(FeatureImage, BlendState)> {
    let state = rasterize(geometry, cam);
    let image = state.composite(values)?;
    Ok((image, state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Color,
    Instance,
    Hierarchy,
    Language,
}

impl Channel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "color" => Some(Channel::Color),
            "instance" => Some(Channel::Instance),
            "hier" | "hierarchy" => Some(Channel::Hierarchy),
            "language" => Some(Channel::Language),
            _ => None,
        }
    }
}

pub struct SceneRender {
    pub images: Vec<(Channel, FeatureImage)>,
    pub state: BlendState,
}

impl SceneRender {
    pub fn image(&self, channel: Channel) -> Option<&FeatureImage> {
        self.images.iter().find(|(c, _)| *c == channel).map(|(_, i)| i)
    }
}

/// Renders the requested channels of a scene. The language channel needs
/// per-Gaussian values supplied by the language field.
pub fn render_scene(scene: &Scene, cam: &Camera, channels: &[Channel], language: Option<&ChannelValues>) -> Result<SceneRender> {
    let geometry = scene.gaussian_geometry()?;
    let state = rasterize(&geometry, cam);
    render_scene_with_state(scene, state, channels, language)
}

pub fn render_scene_with_state(
    scene: &Scene,
    state: BlendState,
    channels: &[Channel],
    language: Option<&ChannelValues>,
) -> Result<SceneRender> {
    let needs_spawn = channels.iter().any(|c| *c != Channel::Language);
    let gaussians = if needs_spawn { scene.spawn_all()? } else { Vec::new() };
    let mut images = Vec::new();
    for &channel in channels {
        let values = match channel {
            Channel::Color => ChannelValues { channels: 3, data: gaussians.iter().flat_map(|g| g.color).collect() },
            Channel::Instance => ChannelValues {
                channels: scene.config.gaussian_feature_dim,
                data: gaussians.iter().flat_map(|g| g.instance.iter().copied()).collect(),
            },
            Channel::Hierarchy => ChannelValues {
                channels: scene.config.gaussian_feature_dim,
                data: gaussians.iter().flat_map(|g| g.hierarchy.iter().copied()).collect(),
            },
            Channel::Language => language
                .cloned()
                .ok_or_else(|| Error::Contract("language channel requested without language values".into()))?,
        };
        images.push((channel, state.composite(&values)?));
    }
    Ok(SceneRender { images, state })
}

/// Projection Jacobian at camera-space point `p`.
#[cfg(test)]
fn projection_jacobian(cam: &Camera, p: Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / p.z;
    Matrix2x3::new(cam.fx * inv_z, 0.0, -cam.fx * p.x * inv_z * inv_z, 0.0, cam.fy * inv_z, -cam.fy * p.y * inv_z * inv_z)
}
