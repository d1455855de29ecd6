//! JSON scene document with base64 little-endian f32 tensors.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Anchor, Camera, Decoders, Scene, SceneConfig};
use crate::codec::{self, decode_f32, encode_f32, parse_json};
use crate::error::{Error, Result};
use crate::mlp::{Activation, TinyMlp};

pub const SCENE_SCHEMA: &str = "supergseg-scene/1";

#[derive(Serialize, Deserialize)]
pub(crate) struct MlpDoc {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: String,
}

impl MlpDoc {
    pub(crate) fn from_mlp(mlp: &TinyMlp) -> Self {
        Self { dims: mlp.dims().to_vec(), activations: mlp.activations().to_vec(), params: encode_f32(mlp.params()) }
    }

    pub(crate) fn to_mlp(&self, text: &str, name: &str) -> Result<TinyMlp> {
        let params = decode_f32(text, name, &self.params, None)?;
        TinyMlp::from_parts(self.dims.clone(), self.activations.clone(), params)
            .map_err(|e| Error::parse(codec::value_offset(text, &self.params), format!("decoder {name}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct AnchorsDoc {
    count: usize,
    positions: String,
    geometry: String,
    segmentation: String,
    scales: String,
    offsets: String,
}

#[derive(Serialize, Deserialize)]
struct DecodersDoc {
    opacity: MlpDoc,
    color: MlpDoc,
    rotation: MlpDoc,
    scale: MlpDoc,
    instance: MlpDoc,
    hierarchy: MlpDoc,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl CameraDoc {
    pub(crate) fn from_camera(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    pub(crate) fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from_column_slice(&self.translation),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    schema: String,
    trained_stage: u32,
    config: SceneConfig,
    anchors: AnchorsDoc,
    decoders: DecodersDoc,
    cameras: Vec<CameraDoc>,
}

pub fn scene_to_json(scene: &Scene) -> String {
    let n = scene.anchors.len();
    let f = scene.config.anchor_feature_dim;
    let k = scene.config.k_spawn;
    let mut positions = Vec::with_capacity(3 * n);
    let mut geometry = Vec::with_capacity(f * n);
    let mut segmentation = Vec::with_capacity(f * n);
    let mut scales = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(3 * k * n);
    for a in &scene.anchors {
        positions.extend_from_slice(a.position.as_slice());
        geometry.extend_from_slice(&a.geometry);
        segmentation.extend_from_slice(&a.segmentation);
        scales.push(a.scale);
        for o in &a.offsets {
            offsets.extend_from_slice(o.as_slice());
        }
    }
    let d = &scene.decoders;
    let doc = SceneDoc {
        schema: SCENE_SCHEMA.to_string(),
        trained_stage: scene.trained_stage,
        config: scene.config,
        anchors: AnchorsDoc {
            count: n,
            positions: encode_f32(&positions),
            geometry: encode_f32(&geometry),
            segmentation: encode_f32(&segmentation),
            scales: encode_f32(&scales),
            offsets: encode_f32(&offsets),
        },
        decoders: DecodersDoc {
            opacity: MlpDoc::from_mlp(&d.opacity),
            color: MlpDoc::from_mlp(&d.color),
            rotation: MlpDoc::from_mlp(&d.rotation),
            scale: MlpDoc::from_mlp(&d.scale),
            instance: MlpDoc::from_mlp(&d.instance),
            hierarchy: MlpDoc::from_mlp(&d.hierarchy),
        },
        cameras: scene.cameras.iter().map(CameraDoc::from_camera).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("scene document serializes")
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let doc: SceneDoc = parse_json(text)?;
    if doc.schema != SCENE_SCHEMA {
        return Err(Error::parse(codec::key_offset(text, "schema"), format!("unsupported schema {:?}", doc.schema)));
    }
    let config = doc.config;
    config.validate().map_err(|e| Error::parse(codec::key_offset(text, "config"), e.to_string()))?;
    let n = doc.anchors.count;
    let (f, k) = (config.anchor_feature_dim, config.k_spawn);
    let a = &doc.anchors;
    let positions = decode_f32(text, "anchors.positions", &a.positions, Some(3 * n))?;
    let geometry = decode_f32(text, "anchors.geometry", &a.geometry, Some(f * n))?;
    let segmentation = decode_f32(text, "anchors.segmentation", &a.segmentation, Some(f * n))?;
    let scales = decode_f32(text, "anchors.scales", &a.scales, Some(n))?;
    let offsets = decode_f32(text, "anchors.offsets", &a.offsets, Some(3 * k * n))?;
    let anchors = (0..n)
        .map(|i| Anchor {
            id: i as u32,
            position: Vector3::from_column_slice(&positions[3 * i..3 * i + 3]),
            geometry: geometry[f * i..f * (i + 1)].to_vec(),
            segmentation: segmentation[f * i..f * (i + 1)].to_vec(),
            scale: scales[i],
            offsets: (0..k).map(|s| Vector3::from_column_slice(&offsets[3 * (k * i + s)..3 * (k * i + s) + 3])).collect(),
        })
        .collect();
    let dd = &doc.decoders;
    let decoders = Decoders {
        opacity: dd.opacity.to_mlp(text, "opacity")?,
        color: dd.color.to_mlp(text, "color")?,
        rotation: dd.rotation.to_mlp(text, "rotation")?,
        scale: dd.scale.to_mlp(text, "scale")?,
        instance: dd.instance.to_mlp(text, "instance")?,
        hierarchy: dd.hierarchy.to_mlp(text, "hierarchy")?,
    };
    let scene = Scene {
        config,
        anchors,
        decoders,
        cameras: doc.cameras.iter().map(CameraDoc::to_camera).collect(),
        trained_stage: doc.trained_stage,
    };
    scene.validate().map_err(|e| Error::parse(codec::key_offset(text, "anchors"), e.to_string()))?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    scene_from_json(&text)
}
