//! Anchors, neural-Gaussian decoding, cameras and scene persistence.

mod persist;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::TinyMlp;
use crate::raster::GaussianGeometry;

pub(crate) use persist::MlpDoc;
pub use persist::{load_scene, save_scene, scene_from_json, scene_to_json, SCENE_SCHEMA};

pub const ANCHOR_FEATURE_DIM: usize = 32;
pub const GAUSSIAN_FEATURE_DIM: usize = 16;
pub const HIDDEN_WIDTH: usize = 32;
pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 1e2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Neural Gaussians spawned per anchor.
    pub k_spawn: usize,
    pub anchor_feature_dim: usize,
    pub gaussian_feature_dim: usize,
    pub hidden_width: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            k_spawn: 5,
            anchor_feature_dim: ANCHOR_FEATURE_DIM,
            gaussian_feature_dim: GAUSSIAN_FEATURE_DIM,
            hidden_width: HIDDEN_WIDTH,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_spawn == 0 || self.anchor_feature_dim == 0 || self.gaussian_feature_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config(format!("degenerate scene config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub id: u32,
    pub position: Vector3<f64>,
    /// Geometry feature, decoded into opacity, color, rotation and scale.
    pub geometry: Vec<f64>,
    /// Segmentation feature, decoded into instance and hierarchical features.
    pub segmentation: Vec<f64>,
    pub scale: f64,
    pub offsets: Vec<Vector3<f64>>,
}

impl Anchor {
    /// Segmentation feature concatenated with the position, the input of the
    /// instance and hierarchy decoders.
    pub fn segmentation_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.segmentation.len() + 3);
        v.extend_from_slice(&self.segmentation);
        v.extend_from_slice(self.position.as_slice());
        v
    }
}

/// Decoders spawning neural-Gaussian attributes from anchor features.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoders {
    pub opacity: TinyMlp,
    pub color: TinyMlp,
    pub rotation: TinyMlp,
    pub scale: TinyMlp,
    pub instance: TinyMlp,
    pub hierarchy: TinyMlp,
}

impl Decoders {
    pub const NAMES: [&'static str; 6] = ["opacity", "color", "rotation", "scale", "instance", "hierarchy"];

    /// Zero-initialised decoders with the shapes implied by `config`.
    pub fn zeros(config: &SceneConfig) -> Self {
        let (f, h, k, g) = (config.anchor_feature_dim, config.hidden_width, config.k_spawn, config.gaussian_feature_dim);
        Self {
            opacity: TinyMlp::with_hidden(f, h, k),
            color: TinyMlp::with_hidden(f, h, 3 * k),
            rotation: TinyMlp::with_hidden(f, h, 4 * k),
            scale: TinyMlp::with_hidden(f, h, 3 * k),
            instance: TinyMlp::with_hidden(f + 3, h, g * k),
            hierarchy: TinyMlp::with_hidden(f + 3, h, g * k),
        }
    }

    pub fn random<R: Rng + ?Sized>(config: &SceneConfig, rng: &mut R) -> Self {
        let mut d = Self::zeros(config);
        for mlp in d.iter_mut() {
            mlp.init_random(rng);
        }
        d
    }

    pub fn get(&self, name: &str) -> Option<&TinyMlp> {
        match name {
            "opacity" => Some(&self.opacity),
            "color" => Some(&self.color),
            "rotation" => Some(&self.rotation),
            "scale" => Some(&self.scale),
            "instance" => Some(&self.instance),
            "hierarchy" => Some(&self.hierarchy),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TinyMlp> {
        match name {
            "opacity" => Some(&mut self.opacity),
            "color" => Some(&mut self.color),
            "rotation" => Some(&mut self.rotation),
            "scale" => Some(&mut self.scale),
            "instance" => Some(&mut self.instance),
            "hierarchy" => Some(&mut self.hierarchy),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &TinyMlp> {
        [&self.opacity, &self.color, &self.rotation, &self.scale, &self.instance, &self.hierarchy].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut TinyMlp> {
        [
            &mut self.opacity,
            &mut self.color,
            &mut self.rotation,
            &mut self.scale,
            &mut self.instance,
            &mut self.hierarchy,
        ]
        .into_iter()
    }

    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        let expected = Self::zeros(config);
        for (name, (have, want)) in Self::NAMES.iter().zip(self.iter().zip(expected.iter())) {
            if have.dims() != want.dims() {
                return Err(Error::Config(format!(
                    "decoder {name} has dims {:?}, config requires {:?}",
                    have.dims(),
                    want.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Pinhole camera; `rotation`/`translation` map world to camera space
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::Config("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty image".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if !(err < 1e-6) {
            return Err(Error::Config(format!("camera rotation not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// A renderable primitive decoded from an anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralGaussian {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    pub instance: Vec<f64>,
    pub hierarchy: Vec<f64>,
    pub anchor_id: u32,
}

impl NeuralGaussian {
    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(self.scale, self.rotation)
    }

    pub fn geometry(&self) -> Result<GaussianGeometry> {
        Ok(GaussianGeometry { mean: self.mean, covariance: self.covariance()?, opacity: self.opacity })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// `R S S^T R^T` for scale factors `s` and unit quaternion `q`.
pub fn build_covariance(s: Vector3<f64>, q: [f64; 4]) -> Result<Matrix3<f64>> {
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("scale factors must be positive, got {s:?}")));
    }
    let r = quaternion_to_matrix(normalize_quaternion(q));
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // exact symmetry
    Ok((cov + cov.transpose()) * 0.5)
}

/// Decodes the `k_spawn` neural Gaussians of one anchor.
pub fn spawn_neural_gaussians(anchor: &Anchor, decoders: &Decoders, config: &SceneConfig) -> Result<Vec<NeuralGaussian>> {
    let k = config.k_spawn;
    if anchor.geometry.len() != decoders.opacity.input_dim() {
        return Err(Error::Config(format!(
            "anchor {} geometry feature is {}-d, decoders expect {}",
            anchor.id,
            anchor.geometry.len(),
            decoders.opacity.input_dim()
        )));
    }
    if anchor.segmentation.len() + 3 != decoders.instance.input_dim() {
        return Err(Error::Config(format!(
            "anchor {} segmentation feature is {}-d, decoders expect {}",
            anchor.id,
            anchor.segmentation.len(),
            decoders.instance.input_dim() - 3
        )));
    }
    if anchor.offsets.len() != k {
        return Err(Error::Config(format!("anchor {} has {} offsets, k_spawn = {k}", anchor.id, anchor.offsets.len())));
    }
    decoders.validate(config)?;
    let opacity = decoders.opacity.forward(&anchor.geometry)?;
    let color = decoders.color.forward(&anchor.geometry)?;
    let rotation = decoders.rotation.forward(&anchor.geometry)?;
    let scale = decoders.scale.forward(&anchor.geometry)?;
    let seg_in = anchor.segmentation_input();
    let instance = decoders.instance.forward(&seg_in)?;
    let hierarchy = decoders.hierarchy.forward(&seg_in)?;
    let gd = config.gaussian_feature_dim;
    Ok((0..k)
        .map(|i| NeuralGaussian {
            mean: anchor.position + anchor.offsets[i] * anchor.scale,
            scale: Vector3::from_fn(|d, _| scale[3 * i + d].exp().clamp(MIN_SCALE, MAX_SCALE)),
            rotation: normalize_quaternion([rotation[4 * i], rotation[4 * i + 1], rotation[4 * i + 2], rotation[4 * i + 3]]),
            opacity: sigmoid(opacity[i]),
            color: [sigmoid(color[3 * i]), sigmoid(color[3 * i + 1]), sigmoid(color[3 * i + 2])],
            instance: instance[gd * i..gd * (i + 1)].to_vec(),
            hierarchy: hierarchy[gd * i..gd * (i + 1)].to_vec(),
            anchor_id: anchor.id,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub anchors: Vec<Anchor>,
    pub decoders: Decoders,
    pub cameras: Vec<Camera>,
    /// Highest completed training stage (0 = freshly created).
    pub trained_stage: u32,
}

impl Scene {
    pub fn empty(config: SceneConfig) -> Self {
        Self { config, anchors: Vec::new(), decoders: Decoders::zeros(&config), cameras: Vec::new(), trained_stage: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.decoders.validate(&self.config)?;
        for (i, a) in self.anchors.iter().enumerate() {
            if a.id as usize != i {
                return Err(Error::Config(format!("anchor ids must be dense: slot {i} holds id {}", a.id)));
            }
            if !(a.scale > 0.0) || !a.scale.is_finite() {
                return Err(Error::Config(format!("anchor {i} scale must be positive")));
            }
            if a.geometry.len() != self.config.anchor_feature_dim || a.segmentation.len() != self.config.anchor_feature_dim {
                return Err(Error::Config(format!("anchor {i} feature width mismatch")));
            }
            if a.offsets.len() != self.config.k_spawn {
                return Err(Error::Config(format!("anchor {i} offset count mismatch")));
            }
            let finite = a.position.iter().all(|v| v.is_finite())
                && a.geometry.iter().chain(&a.segmentation).all(|v| v.is_finite())
                && a.offsets.iter().all(|o| o.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Config(format!("anchor {i} has non-finite values")));
            }
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.config.k_spawn
    }

    /// Anchor owning the Gaussian with global index `g`.
    pub fn anchor_of(&self, gaussian: usize) -> usize {
        gaussian / self.config.k_spawn
    }

    pub fn spawn_all(&self) -> Result<Vec<NeuralGaussian>> {
        let mut out = Vec::with_capacity(self.gaussian_count());
        for a in &self.anchors {
            out.extend(spawn_neural_gaussians(a, &self.decoders, &self.config)?);
        }
        Ok(out)
    }

    /// Frozen render geometry of every neural Gaussian, indexed
    /// `anchor * k_spawn + slot`.
    pub fn gaussian_geometry(&self) -> Result<Vec<GaussianGeometry>> {
        let k = self.config.k_spawn;
        let mut out = Vec::with_capacity(self.gaussian_count());
        for a in &self.anchors {
            let opacity = self.decoders.opacity.forward(&a.geometry)?;
            let rotation = self.decoders.rotation.forward(&a.geometry)?;
            let scale = self.decoders.scale.forward(&a.geometry)?;
            for i in 0..k {
                let s = Vector3::from_fn(|d, _| scale[3 * i + d].exp().clamp(MIN_SCALE, MAX_SCALE));
                let q = [rotation[4 * i], rotation[4 * i + 1], rotation[4 * i + 2], rotation[4 * i + 3]];
                out.push(GaussianGeometry {
                    mean: a.position + a.offsets[i] * a.scale,
                    covariance: build_covariance(s, q)?,
                    opacity: sigmoid(opacity[i]),
                });
            }
        }
        Ok(out)
    }
}
