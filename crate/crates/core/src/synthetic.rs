//! Synthetic desk scenes: flat interleaved spiral objects split into parts,
//! exact per-view masks and ground truth, and an orthonormal label vocabulary.
//! They stand in for externally produced masks and embeddings.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroundTruth, Split, View};
use crate::error::{Error, Result};
use crate::language::EmbeddingVocabulary;
use crate::masks::MaskSet;
use crate::mlp::TinyMlp;
use crate::raster::{rasterize, ChannelValues, FeatureImage};
use crate::scene::{Anchor, Camera, Decoders, Scene, SceneConfig};

/// World size of the generated Gaussians and of their spawn offsets.
const BLOB_SCALE: f64 = 0.015;

const LABEL_NAMES: [&str; 8] = ["tray", "book", "phone", "mug", "lamp", "plant", "vase", "clock"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub objects: usize,
    pub parts_per_object: usize,
    pub anchors: usize,
    pub width: u32,
    pub height: u32,
    pub train_views: usize,
    pub test_views: usize,
    pub language_dim: usize,
    pub k_spawn: usize,
    /// Clearance between neighbouring objects, world units.
    pub gap: f64,
    /// Turns of each spiral arm around the center.
    pub windings: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            objects: 3,
            parts_per_object: 2,
            anchors: 1200,
            width: 64,
            height: 64,
            train_views: 8,
            test_views: 4,
            language_dim: 16,
            k_spawn: 5,
            gap: 0.04,
            windings: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.parts_per_object == 0 {
            return Err(Error::Generation("at least one object with one part is required".into()));
        }
        let pixels = self.width as usize * self.height as usize;
        if self.objects * self.parts_per_object > pixels {
            return Err(Error::Generation(format!(
                "{} parts requested for {pixels} pixels",
                self.objects * self.parts_per_object
            )));
        }
        if self.anchors < self.objects * self.parts_per_object {
            return Err(Error::Generation("fewer anchors than parts".into()));
        }
        if self.language_dim < self.objects {
            return Err(Error::Generation(format!(
                "{} labels cannot be orthogonal in {} dimensions",
                self.objects, self.language_dim
            )));
        }
        if self.train_views == 0 || self.k_spawn == 0 {
            return Err(Error::Generation("need at least one training view and one Gaussian per anchor".into()));
        }
        if !(self.gap >= 0.0) {
            return Err(Error::Generation("gap must be non-negative".into()));
        }
        if !(self.windings > 0.0) {
            return Err(Error::Generation("windings must be positive".into()));
        }
        Ok(())
    }
}

/// Generated scene plus its dataset and per-anchor ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub dataset: Dataset,
    /// Ground-truth decoders used to render the target colors.
    pub true_decoders: Decoders,
    pub labels: Vec<String>,
}

impl SyntheticScene {
    pub fn anchor_instance(&self) -> &[i32] {
        self.dataset.anchor_instance.as_deref().unwrap_or(&[])
    }

    pub fn anchor_part(&self) -> &[i32] {
        self.dataset.anchor_part.as_deref().unwrap_or(&[])
    }
}


/// Label names in object order; the vocabulary sorts them.
pub fn object_labels(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let base = LABEL_NAMES[i % LABEL_NAMES.len()];
            if i < LABEL_NAMES.len() {
                base.to_string()
            } else {
                format!("{base}_{}", i / LABEL_NAMES.len())
            }
        })
        .collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gram-Schmidt on Gaussian draws: exactly orthonormal up to rounding.
pub fn orthonormal_vectors<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Generation(format!("{count} orthonormal vectors do not fit in {dim} dimensions")));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    Ok(out)
}

/// Scales the output layer of `mlp` by `weight_scale` and sets its bias.
fn shape_output(mlp: &mut TinyMlp, weight_scale: f64, bias: impl Fn(usize) -> f64) {
    let last = mlp.layer_count() - 1;
    let (w, b) = mlp.layer_offsets(last);
    let out = mlp.output_dim();
    let params = mlp.params_mut();
    params[w..b].iter_mut().for_each(|x| *x *= weight_scale);
    for i in 0..out {
        params[b + i] = bias(i);
    }
}

/// Flat spiral arm lying on the desk: the points of the annulus
/// `inner <= r <= outer` whose spiral phase `r / pitch - theta / 2pi + twist`
/// (mod 1) lies in `[lo, hi)`. Parts are equal radial bands.
struct SpiralArm {
    inner: f64,
    outer: f64,
    pitch: f64,
    twist: f64,
    lo: f64,
    hi: f64,
    height: f64,
}

impl SpiralArm {
    fn contains(&self, x: f64, y: f64) -> bool {
        let r = x.hypot(y);
        if r < self.inner || r > self.outer {
            return false;
        }
        let phase = (r / self.pitch - y.atan2(x) / (2.0 * PI) + self.twist).rem_euclid(1.0);
        phase >= self.lo && phase < self.hi
    }

    /// Top area, estimated on a fixed grid.
    fn area(&self) -> f64 {
        const N: usize = 128;
        let side = 2.0 * self.outer;
        let cell = side / N as f64;
        let mut inside = 0;
        for i in 0..N {
            for j in 0..N {
                let x = -self.outer + cell * (i as f64 + 0.5);
                let y = -self.outer + cell * (j as f64 + 0.5);
                if self.contains(x, y) {
                    inside += 1;
                }
            }
        }
        inside as f64 * cell * cell
    }

    /// Point on the top face, with `band = Some(b)` restricted to radial
    /// band `b` of `bands`.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, band: Option<(usize, usize)>) -> Vector3<f64> {
        loop {
            let x = rng.random_range(-self.outer..self.outer);
            let y = rng.random_range(-self.outer..self.outer);
            if !self.contains(x, y) {
                continue;
            }
            let p = Vector3::new(x, y, self.height);
            if band.is_none_or(|(b, bands)| self.part_of(&p, bands) == b) {
                return p;
            }
        }
    }

    fn part_of(&self, p: &Vector3<f64>, parts: usize) -> usize {
        let t = (p.x.hypot(p.y) - self.inner) / (self.outer - self.inner);
        ((t * parts as f64).floor().max(0.0) as usize).min(parts - 1)
    }
}

/// Builds a deterministic synthetic scene and dataset from `spec`.
pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let config = SceneConfig { k_spawn: spec.k_spawn, ..SceneConfig::default() };
    let fdim = config.anchor_feature_dim;
    let parts = spec.parts_per_object;

    // Interleaved spiral arms, one per object, separated by `gap`. The arms
    // wind around the center, so no object is separable from the others by
    // a simple function of position.
    let inner = 0.1;
    let outer = 0.5;
    let pitch = (outer - inner) / spec.windings;
    let twist: f64 = rng.random();
    let height = rng.random_range(0.03..0.05);
    let slot = 1.0 / spec.objects as f64;
    let half_gap = (spec.gap / pitch / 2.0).min(slot / 4.0);
    let objects: Vec<SpiralArm> = (0..spec.objects)
        .map(|o| SpiralArm { inner, outer, pitch, twist, lo: o as f64 * slot + half_gap, hi: (o + 1) as f64 * slot - half_gap, height })
        .collect();
    let total_x = 2.0 * outer;

    let areas: Vec<f64> = objects.iter().map(SpiralArm::area).collect();
    let area_total: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas.iter().map(|a| ((a / area_total) * spec.anchors as f64).floor() as usize).collect();
    let mut i = 0;
    while counts.iter().sum::<usize>() < spec.anchors {
        counts[i % spec.objects] += 1;
        i += 1;
    }

    // Geometry features vary smoothly with position and carry no object
    // identity: random Fourier features plus a little noise.
    let waves: Vec<(Vector3<f64>, f64)> = (0..fdim)
        .map(|_| (Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * 3.0, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut anchors = Vec::with_capacity(spec.anchors);
    let mut anchor_instance = Vec::with_capacity(spec.anchors);
    let mut anchor_part = Vec::with_capacity(spec.anchors);
    for (o, obj) in objects.iter().enumerate() {
        for n in 0..counts[o] {
            // The first anchors of each object cover every part once.
            let position = obj.sample(&mut rng, (n < parts).then_some((n, parts)));
            let part = obj.part_of(&position, parts);
            let id = anchors.len() as u32;
            anchors.push(Anchor {
                id,
                position,
                geometry: waves.iter().map(|(w, phase)| (w.dot(&position) + phase).sin() * 0.5 + 0.05 * normal(&mut rng)).collect(),
                segmentation: vec![0.0; fdim],
                scale: BLOB_SCALE,
                offsets: (0..spec.k_spawn)
                    .map(|_| Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * 0.5)
                    .collect(),
            });
            anchor_instance.push(o as i32);
            anchor_part.push((o * parts + part) as i32);
        }
    }

    // Geometry decoders: small weights around fixed biases so every Gaussian
    // is a small, mostly opaque blob.
    let mut true_decoders = Decoders::random(&config, &mut rng);
    shape_output(&mut true_decoders.opacity, 0.05, |_| 2.2);
    shape_output(&mut true_decoders.scale, 0.05, |_| BLOB_SCALE.ln());
    shape_output(&mut true_decoders.rotation, 0.1, |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut decoders = Decoders::random(&config, &mut rng);
    decoders.opacity = true_decoders.opacity.clone();
    decoders.scale = true_decoders.scale.clone();
    decoders.rotation = true_decoders.rotation.clone();

    // Orbit cameras around the group.
    let half_extent = total_x / 2.0 + 0.1;
    let radius = 3.0;
    let focal = (spec.width.min(spec.height) as f64 / 2.0) * radius / half_extent;
        let target = Vector3::new(0.0, 0.0, height / 2.0);
    let orbit = |azimuth: f64, elevation: f64| -> Result<Camera> {
        let dir = Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
        Camera::look_at(target + dir * radius, target, Vector3::z(), focal, spec.width, spec.height)
    };
    let mut cameras = Vec::new();
    let mut splits = Vec::new();
    for i in 0..spec.train_views {
        cameras.push(orbit(2.0 * PI * i as f64 / spec.train_views as f64 + 0.3, 55f64.to_radians())?);
        splits.push(Split::Train);
    }
    for i in 0..spec.test_views {
        cameras.push(orbit(2.0 * PI * (i as f64 + 0.5) / spec.test_views as f64 + 0.1, 45f64.to_radians())?);
        splits.push(Split::Test);
    }

    let scene = Scene { config, anchors, decoders, cameras, trained_stage: 0 };
    scene.validate()?;

    let labels = object_labels(spec.objects);
    let vectors = orthonormal_vectors(spec.objects, spec.language_dim, &mut rng)?;
    let entries: BTreeMap<String, Vec<f64>> = labels.iter().cloned().zip(vectors).collect();
    let vocabulary = EmbeddingVocabulary::new(spec.language_dim, entries)?;
    let class_of: Vec<i32> = labels.iter().map(|l| vocabulary.class_index(l).expect("label in vocabulary") as i32).collect();

    let mut truth = scene.clone();
    truth.decoders = true_decoders.clone();
    let gaussians = truth.spawn_all()?;
    let geometry = scene.gaussian_geometry()?;
    let k = config.k_spawn;
    let colors = ChannelValues { channels: 3, data: gaussians.iter().flat_map(|g| g.color).collect() };
    let part_count = spec.objects * parts;
    let mut object_onehot = ChannelValues::zeros(gaussians.len(), spec.objects);
    let mut part_onehot = ChannelValues::zeros(gaussians.len(), part_count);
    for g in 0..gaussians.len() {
        let a = g / k;
        object_onehot.row_mut(g)[anchor_instance[a] as usize] = 1.0;
        part_onehot.row_mut(g)[anchor_part[a] as usize] = 1.0;
    }

    let mut views = Vec::new();
    for (v, cam) in scene.cameras.iter().enumerate() {
        let state = rasterize(&geometry, cam);
        let mut image = state.composite(&colors)?;
        image.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        let objw = state.composite(&object_onehot)?;
        let partw = state.composite(&part_onehot)?;
        let label_map = |w: &FeatureImage| -> Vec<i32> {
            (0..w.pixel_count())
                .map(|p| w.pixel(p).iter().position(|x| *x > 0.5).map_or(-1, |c| c as i32))
                .collect()
        };
        let instance = label_map(&objw);
        let part = label_map(&partw);
        let semantic = instance.iter().map(|&o| if o < 0 { -1 } else { class_of[o as usize] }).collect();
        let mut masks = Vec::new();
        let mut mask_labels = Vec::new();
        for o in 0..spec.objects {
            let m: Vec<bool> = instance.iter().map(|&x| x == o as i32).collect();
            if m.iter().any(|&b| b) {
                masks.push(m);
                mask_labels.push(Some(labels[o].clone()));
            }
        }
        for p in 0..part_count {
            let m: Vec<bool> = part.iter().map(|&x| x == p as i32).collect();
            if m.iter().any(|&b| b) {
                masks.push(m);
                mask_labels.push(Some(labels[p / parts].clone()));
            }
        }
        if masks.is_empty() {
            return Err(Error::Generation(format!("view {v} sees no object")));
        }
        views.push(View {
            id: v as u32,
            camera: v,
            split: splits[v],
            image,
            masks: MaskSet::new(v as u32, spec.width, spec.height, masks)?,
            mask_labels,
            ground_truth: Some(GroundTruth { semantic, instance, part }),
        });
    }

    let dataset = Dataset { views, vocabulary, anchor_instance: Some(anchor_instance), anchor_part: Some(anchor_part) };
    Ok(SyntheticScene { scene, dataset, true_decoders, labels })
}
