//! Small random scenes, views, masks and feature maps.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use supergseg::contrastive::{prepare_view, PreparedView};
use supergseg::dataset::{Split, View};
use supergseg::masks::MaskSet;
use supergseg::mlp::TinyMlp;
use supergseg::raster::{FeatureImage, GaussianGeometry};
use supergseg::scene::{Anchor, Camera, Decoders, Scene, SceneConfig};
use supergseg::supergaussian::Rows;

pub const SIDE: u32 = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn feature_image<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32, channels: usize) -> FeatureImage {
    let n = width as usize * height as usize * channels;
    FeatureImage { width, height, channels, data: (0..n).map(|_| normal(rng)).collect() }
}

pub fn rows<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Rows {
    Rows { dim, data: (0..count * dim).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn rect<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize, within: [usize; 4]) -> [usize; 4] {
    let [x0, y0, x1, y1] = within;
    let ax = rng.random_range(x0..x1);
    let bx = rng.random_range(ax + 1..=x1);
    let ay = rng.random_range(y0..y1);
    let by = rng.random_range(ay + 1..=y1);
    debug_assert!(bx <= w && by <= h);
    [ax, ay, bx, by]
}

fn rect_mask(w: usize, h: usize, r: [usize; 4]) -> Vec<bool> {
    (0..w * h).map(|p| (r[0]..r[2]).contains(&(p % w)) && (r[1]..r[3]).contains(&(p / w))).collect()
}

/// Object rectangles (possibly overlapping) with nested part rectangles,
/// plus the odd free-floating mask: overlapping, nested and partial
/// coverage all occur.
pub fn random_masks<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> MaskSet {
    let (w, h) = (width as usize, height as usize);
    let mut masks = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let obj = rect(rng, w, h, [0, 0, w, h]);
        masks.push(rect_mask(w, h, obj));
        for _ in 0..rng.random_range(0..=2) {
            masks.push(rect_mask(w, h, rect(rng, w, h, obj)));
        }
    }
    if rng.random_bool(0.3) {
        let n = w * h;
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        if m.iter().any(|&b| b) {
            masks.push(m);
        }
    }
    MaskSet::new(0, width, height, masks).expect("non-empty masks")
}

/// Random masks with at least two disjoint objects, so the instance loss
/// is defined.
pub fn two_object_masks<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> MaskSet {
    let (w, h) = (width as usize, height as usize);
    let mid = rng.random_range(w / 3..2 * w / 3);
    let mut masks = Vec::new();
    for half in [[0, 0, mid, h], [mid, 0, w, h]] {
        let obj = rect(rng, w, h, half);
        masks.push(rect_mask(w, h, obj));
        for _ in 0..rng.random_range(1..=2) {
            masks.push(rect_mask(w, h, rect(rng, w, h, obj)));
        }
    }
    MaskSet::new(0, width, height, masks).expect("non-empty masks")
}

/// Shrinks the output layer weights and sets its biases.
pub fn shape_output(mlp: &mut TinyMlp, weight_scale: f64, bias: impl Fn(usize) -> f64) {
    let last = mlp.layer_count() - 1;
    let (w, b) = mlp.layer_offsets(last);
    let out = mlp.output_dim();
    let params = mlp.params_mut();
    params[w..b].iter_mut().for_each(|x| *x *= weight_scale);
    for i in 0..out {
        params[b + i] = bias(i);
    }
}

pub fn camera(width: u32, height: u32) -> Camera {
    Camera::look_at(Vector3::new(0.4, -2.6, 1.4), Vector3::zeros(), Vector3::z(), 9.0 * width as f64 / 16.0, width, height).expect("valid camera")
}

/// A scene of `anchors` anchors (5 Gaussians each) with random decoders
/// shaped into small, fairly opaque blobs in front of one 16x16 camera.
pub fn tiny_scene<R: Rng + ?Sized>(rng: &mut R, anchors: usize) -> Scene {
    let config = SceneConfig { k_spawn: 5, ..SceneConfig::default() };
    let f = config.anchor_feature_dim;
    let mut decoders = Decoders::random(&config, rng);
    // non-zero biases keep hidden ReLUs away from their kinks
    for mlp in decoders.iter_mut() {
        let (_, b) = mlp.layer_offsets(0);
        let hidden = mlp.dims()[1];
        for i in 0..hidden {
            mlp.params_mut()[b + i] = 0.1 * normal(rng);
        }
    }
    shape_output(&mut decoders.opacity, 0.1, |_| 0.8);
    shape_output(&mut decoders.scale, 0.05, |_| 0.12f64.ln());
    shape_output(&mut decoders.rotation, 0.1, |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let anchors = (0..anchors)
        .map(|i| Anchor {
            id: i as u32,
            position: Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)),
            geometry: (0..f).map(|_| normal(rng)).collect(),
            segmentation: (0..f).map(|_| normal(rng)).collect(),
            scale: 0.15,
            offsets: (0..config.k_spawn).map(|_| Vector3::new(normal(rng), normal(rng), normal(rng)) * 0.5).collect(),
        })
        .collect();
    let scene = Scene { config, anchors, decoders, cameras: vec![camera(SIDE, SIDE)], trained_stage: 0 };
    scene.validate().expect("valid scene");
    scene
}

/// A training view of `scene` with random target colors and masks.
pub fn tiny_view<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> PreparedView {
    let masks = two_object_masks(rng, SIDE, SIDE);
    let labels = vec![None; masks.masks.len()];
    let mut image = FeatureImage::zeros(SIDE, SIDE, 3);
    image.data.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
    let view = View { id: 0, camera: 0, split: Split::Train, image, masks, mask_labels: labels, ground_truth: None };
    let geometry = scene.gaussian_geometry().expect("geometry");
    prepare_view(scene, &view, &geometry).expect("prepared view")
}

/// Random Gaussians around the origin; the first two share a mean.
pub fn random_geometry<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<GaussianGeometry> {
    let mut out: Vec<GaussianGeometry> = (0..count)
        .map(|_| {
            let a = Matrix3::from_fn(|_, _| normal(rng) * 0.12);
            GaussianGeometry {
                mean: Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.6..0.6)),
                covariance: a * a.transpose() + Matrix3::identity() * 1e-4,
                opacity: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    if count >= 2 {
        // an exact depth tie
        out[1].mean = out[0].mean;
    }
    out
}
