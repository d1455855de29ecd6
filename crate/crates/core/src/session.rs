//! A loaded, trained model answering render, click and text queries
//! against the dataset's views.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::selection_mask;
use crate::language::{default_top_m, gaussian_language_values, text_query_3d, LanguageField, TextQueryResult};
use crate::raster::{rasterize, render_scene_with_state, BlendState, Channel, FeatureImage, GaussianGeometry};
use crate::scene::Scene;
use crate::supergaussian::{click_query, group_supergaussians, ClickStatus, Clustering, QueryMode};

pub struct Session {
    pub scene: Scene,
    pub dataset: Dataset,
    pub clustering: Clustering,
    pub instance_labels: Vec<i32>,
    pub part_labels: Vec<i32>,
    hier_features: Vec<Option<Vec<f64>>>,
    geometry: Vec<GaussianGeometry>,
    language: Option<(LanguageField, Vec<Vec<f64>>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    pub status: ClickStatus,
    pub selected_supergs: Vec<u32>,
    pub instance: Option<i32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub query: TextQueryResult,
    /// Coverage of the winning instance in the requested view.
    pub mask: Vec<bool>,
}

impl Session {
    /// Grouping is recomputed from the scene when the cluster file carries
    /// no labels.
    pub fn new(scene: Scene, dataset: Dataset, clustering: Clustering, labels: Option<(Vec<i32>, Vec<i32>)>, field: Option<LanguageField>) -> Result<Self> {
        dataset.validate(scene.cameras.len())?;
        if clustering.hard().len() != scene.anchors.len() {
            return Err(Error::Config(format!("cluster covers {} anchors, scene has {}", clustering.hard().len(), scene.anchors.len())));
        }
        let grouping = group_supergaussians(&scene, &clustering)?;
        let (instance_labels, part_labels) = labels.unwrap_or((grouping.instance, grouping.part));
        let language = match field {
            Some(f) => {
                let decoded = f.decode_all(&clustering.positions())?;
                Some((f, decoded))
            }
            None => None,
        };
        let geometry = scene.gaussian_geometry()?;
        Ok(Self { scene, dataset, clustering, instance_labels, part_labels, hier_features: grouping.hier_features, geometry, language })
    }

    pub fn has_language(&self) -> bool {
        self.language.is_some()
    }

    pub fn view_ids(&self) -> Vec<u32> {
        self.dataset.views.iter().map(|v| v.id).collect()
    }

    fn state(&self, view_id: u32) -> Result<BlendState> {
        let view = self.dataset.view(view_id).ok_or_else(|| Error::Query(format!("unknown view {view_id}")))?;
        Ok(rasterize(&self.geometry, &self.scene.cameras[view.camera]))
    }

    pub fn render(&self, view_id: u32, channel: Channel) -> Result<FeatureImage> {
        let state = self.state(view_id)?;
        let language = match channel {
            Channel::Language => {
                let (_, decoded) = self.language.as_ref().ok_or_else(|| Error::Query("no language field loaded".into()))?;
                Some(gaussian_language_values(&self.scene, self.clustering.hard(), decoded)?)
            }
            _ => None,
        };
        let r = render_scene_with_state(&self.scene, state, &[channel], language.as_ref())?;
        Ok(r.images.into_iter().next().expect("one channel requested").1)
    }

    /// Per-Gaussian flags for a Super-Gaussian selection.
    fn gaussian_selection(&self, supergs: &[u32]) -> Vec<bool> {
        let mut chosen = vec![false; self.clustering.len()];
        supergs.iter().for_each(|&j| chosen[j as usize] = true);
        let k = self.scene.config.k_spawn;
        (0..self.scene.gaussian_count()).map(|g| chosen[self.clustering.hard()[g / k] as usize]).collect()
    }

    pub fn click(&self, view_id: u32, u: u32, v: u32, mode: QueryMode) -> Result<ClickResponse> {
        let state = self.state(view_id)?;
        if u >= state.width || v >= state.height {
            return Err(Error::Query(format!("pixel ({u}, {v}) outside the {}x{} view", state.width, state.height)));
        }
        let h_map = render_scene_with_state(&self.scene, state.clone(), &[Channel::Hierarchy], None)?;
        let h_map = h_map.image(Channel::Hierarchy).expect("rendered");
        let p = (v * state.width + u) as usize;
        let sel = click_query(p, &state, h_map, &self.hier_features, &self.instance_labels, mode, self.clustering.config.tau_hier);
        let mask = match sel.status {
            ClickStatus::Ok => selection_mask(&state, &self.gaussian_selection(&sel.selected)),
            ClickStatus::Empty => vec![false; state.pixel_count()],
        };
        Ok(ClickResponse { status: sel.status, selected_supergs: sel.selected, instance: sel.instance, mask })
    }

    /// Text query by vocabulary label; the mask shows the winning
    /// instance in `view_id`.
    pub fn text(&self, label: &str, view_id: u32, top_m: Option<usize>) -> Result<TextResponse> {
        let (_, decoded) = self.language.as_ref().ok_or_else(|| Error::Query("no language field loaded".into()))?;
        let query = self.dataset.vocabulary.get(label).ok_or_else(|| Error::Query(format!("label '{label}' is not in the vocabulary")))?;
        let state = self.state(view_id)?;
        let eligible: Vec<bool> = self.clustering.supergs.iter().map(|s| !s.members.is_empty()).collect();
        let top_m = top_m.unwrap_or_else(|| default_top_m(eligible.iter().filter(|&&e| e).count()));
        let result = text_query_3d(query, decoded, &eligible, &self.instance_labels, top_m)?;
        let mask = match result.winner {
            Some(w) => {
                let sgs: Vec<u32> = (0..self.clustering.len() as u32).filter(|&j| self.instance_labels[j as usize] == w).collect();
                selection_mask(&state, &self.gaussian_selection(&sgs))
            }
            None => vec![false; state.pixel_count()],
        };
        Ok(TextResponse { query: result, mask })
    }
}

/// Run lengths of a row-major binary mask, alternating and starting with a
/// run of `false` (possibly empty).
pub fn mask_rle(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in mask {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn mask_from_rle(runs: &[u32]) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    out
}
