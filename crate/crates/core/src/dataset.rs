//! On-disk dataset layout: a manifest (`dataset.json`) listing per-view
//! images, mask files, mask labels and optional ground-truth maps, next to
//! the embedding vocabulary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::parse_json;
use crate::error::{Error, Result};
use crate::formats::{self, IdMap, INSTANCE_MAP_MAGIC};
use crate::language::EmbeddingVocabulary;
use crate::masks::MaskSet;
use crate::raster::FeatureImage;

pub const DATASET_SCHEMA: &str = "supergseg-dataset/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth label maps, `-1` where nothing is labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Class index into the sorted vocabulary.
    pub semantic: Vec<i32>,
    pub instance: Vec<i32>,
    pub part: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: u32,
    /// Index into the scene camera list.
    pub camera: usize,
    pub split: Split,
    pub image: FeatureImage,
    pub masks: MaskSet,
    /// Vocabulary label whose embedding supervises each mask.
    pub mask_labels: Vec<Option<String>>,
    pub ground_truth: Option<GroundTruth>,
}

impl View {
    pub fn width(&self) -> u32 {
        self.image.width
    }

    pub fn height(&self) -> u32 {
        self.image.height
    }
}

/// Views plus vocabulary and optional per-anchor ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub vocabulary: EmbeddingVocabulary,
    pub anchor_instance: Option<Vec<i32>>,
    pub anchor_part: Option<Vec<i32>>,
}

impl Dataset {
    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Test)
    }

    pub fn view(&self, id: u32) -> Option<&View> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn validate(&self, camera_count: usize) -> Result<()> {
        for v in &self.views {
            if v.camera >= camera_count {
                return Err(Error::Ingestion(format!("view {} references camera {} of {camera_count}", v.id, v.camera)));
            }
            if v.masks.width != v.image.width || v.masks.height != v.image.height {
                return Err(Error::Ingestion(format!("view {}: mask and image sizes differ", v.id)));
            }
            if v.mask_labels.len() != v.masks.masks.len() {
                return Err(Error::Ingestion(format!("view {}: {} mask labels for {} masks", v.id, v.mask_labels.len(), v.masks.masks.len())));
            }
            if let Some(gt) = &v.ground_truth {
                let n = v.image.pixel_count();
                if gt.semantic.len() != n || gt.instance.len() != n || gt.part.len() != n {
                    return Err(Error::Ingestion(format!("view {}: ground-truth size mismatch", v.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ViewRecord {
    id: u32,
    camera: usize,
    split: Split,
    image: String,
    masks: String,
    mask_labels: Vec<Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_semantic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_instance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_part: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    vocabulary: String,
    views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor_instance: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor_part: Option<Vec<i32>>,
}

pub const MANIFEST_NAME: &str = "dataset.json";
pub const VOCABULARY_NAME: &str = "vocab.json";

/// Writes the dataset into `dir` (created if missing).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    dataset.vocabulary.save(&dir.join(VOCABULARY_NAME))?;
    let mut records = Vec::new();
    for v in &dataset.views {
        let stem = format!("view_{:03}", v.id);
        let image = format!("{stem}.sgfi");
        let masks = format!("{stem}.sgmk");
        formats::write_feature_image(&dir.join(&image), &v.image)?;
        formats::write_masks(&dir.join(&masks), &v.masks)?;
        let (mut gt_semantic, mut gt_instance, mut gt_part) = (None, None, None);
        if let Some(gt) = &v.ground_truth {
            for (name, ids, slot) in [
                ("semantic", &gt.semantic, &mut gt_semantic),
                ("instance", &gt.instance, &mut gt_instance),
                ("part", &gt.part, &mut gt_part),
            ] {
                let file = format!("{stem}_{name}.sgim");
                let map = IdMap { width: v.width(), height: v.height(), ids: ids.clone() };
                formats::write_id_map(&dir.join(&file), INSTANCE_MAP_MAGIC, &map)?;
                *slot = Some(file);
            }
        }
        records.push(ViewRecord {
            id: v.id,
            camera: v.camera,
            split: v.split,
            image,
            masks,
            mask_labels: v.mask_labels.clone(),
            gt_semantic,
            gt_instance,
            gt_part,
        });
    }
    let manifest = Manifest {
        schema: DATASET_SCHEMA.into(),
        vocabulary: VOCABULARY_NAME.into(),
        views: records,
        anchor_instance: dataset.anchor_instance.clone(),
        anchor_part: dataset.anchor_part.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

/// Loads a dataset from its directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = parse_json(&text)?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::Ingestion(format!("unsupported dataset schema '{}'", manifest.schema)));
    }
    let vocabulary = EmbeddingVocabulary::load(&dir.join(&manifest.vocabulary))?;
    let read_map = |file: &Option<String>| -> Result<Option<Vec<i32>>> {
        file.as_ref().map(|f| formats::read_id_map(&dir.join(f), INSTANCE_MAP_MAGIC).map(|m| m.ids)).transpose()
    };
    let mut views = Vec::new();
    for r in manifest.views {
        let image = formats::read_feature_image(&dir.join(&r.image))?;
        let masks = formats::read_masks(&dir.join(&r.masks), r.id)?;
        let ground_truth = match (read_map(&r.gt_semantic)?, read_map(&r.gt_instance)?, read_map(&r.gt_part)?) {
            (Some(semantic), Some(instance), Some(part)) => Some(GroundTruth { semantic, instance, part }),
            (None, None, None) => None,
            _ => return Err(Error::Ingestion(format!("view {}: incomplete ground truth", r.id))),
        };
        views.push(View { id: r.id, camera: r.camera, split: r.split, image, masks, mask_labels: r.mask_labels, ground_truth });
    }
    Ok(Dataset { views, vocabulary, anchor_instance: manifest.anchor_instance, anchor_part: manifest.anchor_part })
}
