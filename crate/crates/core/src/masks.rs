//! Overlapping binary masks to disjoint patches, patch correlation,
//! hierarchical level sets and non-overlapping instance masks.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Pixel id of pixels covered by no mask.
pub const BACKGROUND: i32 = -1;
pub const MAX_PATCHES: usize = 4096;

/// Binary masks of one view, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    pub masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(view_id: u32, width: u32, height: u32, masks: Vec<Vec<bool>>) -> Result<Self> {
        let set = Self { view_id, width, height, masks };
        set.validate()?;
        Ok(set)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(Error::Ingestion(format!("view {}: empty mask set", self.view_id)));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != self.pixel_count() {
                return Err(Error::Ingestion(format!(
                    "view {}: mask {i} has {} pixels, expected {}x{}",
                    self.view_id,
                    m.len(),
                    self.width,
                    self.height
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Ingestion(format!("view {}: mask {i} is empty", self.view_id)));
            }
        }
        Ok(())
    }

    pub fn area(&self, mask: usize) -> usize {
        self.masks[mask].iter().filter(|&&b| b).count()
    }
}

/// Patch map plus the sorted covering-mask list of every patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patches {
    pub patch_map: Vec<i32>,
    pub masksets: Vec<Vec<u32>>,
}

/// Splits pixels into patches of identical covering-mask sets. Patch ids are
/// assigned in row-major first-occurrence order; uncovered pixels get
/// [`BACKGROUND`].
pub fn decompose_to_patches(masks: &MaskSet) -> Result<Patches> {
    masks.validate()?;
    let n = masks.pixel_count();
    let mut ids: HashMap<Vec<u32>, i32> = HashMap::new();
    let mut masksets = Vec::new();
    let mut patch_map = vec![BACKGROUND; n];
    let mut cover = Vec::with_capacity(masks.masks.len());
    for (p, slot) in patch_map.iter_mut().enumerate() {
        cover.clear();
        cover.extend(masks.masks.iter().enumerate().filter(|(_, m)| m[p]).map(|(i, _)| i as u32));
        if cover.is_empty() {
            continue;
        }
        let next = masksets.len() as i32;
        let id = *ids.entry(cover.clone()).or_insert_with(|| {
            masksets.push(cover.clone());
            next
        });
        if masksets.len() > MAX_PATCHES {
            return Err(Error::Ingestion(format!(
                "view {}: more than {MAX_PATCHES} patches; supply coarser masks",
                masks.view_id
            )));
        }
        *slot = id;
    }
    Ok(Patches { patch_map, masksets })
}

/// Symmetric patch-by-patch count of shared covering masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrelationMatrix {
    n: usize,
    data: Vec<u32>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, p: usize, q: usize) -> u32 {
        self.data[p * self.n + q]
    }

    pub fn row(&self, p: usize) -> &[u32] {
        &self.data[p * self.n..(p + 1) * self.n]
    }
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> u32 {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

pub fn correlation_matrix(masksets: &[Vec<u32>]) -> CorrelationMatrix {
    let n = masksets.len();
    let mut data = vec![0u32; n * n];
    for p in 0..n {
        for q in p..n {
            let c = sorted_intersection_len(&masksets[p], &masksets[q]);
            data[p * n + q] = c;
            data[q * n + p] = c;
        }
    }
    CorrelationMatrix { n, data }
}

/// Patch groups of `p` by descending distinct positive correlation value.
/// Level 1 holds the patches sharing the most masks with `p`, including `p`.
pub fn level_sets(p: usize, corr: &CorrelationMatrix) -> Vec<Vec<usize>> {
    let row = corr.row(p);
    let mut values: Vec<u32> = row.iter().copied().filter(|&v| v > 0).collect();
    values.sort_unstable_by(|a, b| b.cmp(a));
    values.dedup();
    values
        .into_iter()
        .map(|v| (0..row.len()).filter(|&q| row[q] == v).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceGrouping {
    pub instance_map: Vec<i32>,
    /// Instance id of every patch.
    pub patch_instance: Vec<usize>,
    /// Index of the mask defining each instance.
    pub instance_masks: Vec<usize>,
}

/// Assigns every patch to the largest-area mask covering it (ties: lower
/// mask index); patches sharing that mask form one instance.
pub fn group_instances(patches: &Patches, masks: &MaskSet) -> InstanceGrouping {
    let areas: Vec<usize> = (0..masks.masks.len()).map(|m| masks.area(m)).collect();
    let mut instance_of_mask: HashMap<usize, usize> = HashMap::new();
    let mut instance_masks = Vec::new();
    let patch_instance: Vec<usize> = patches
        .masksets
        .iter()
        .map(|set| {
            let best = set
                .iter()
                .map(|&m| m as usize)
                .max_by(|&a, &b| areas[a].cmp(&areas[b]).then(b.cmp(&a)))
                .expect("patches are covered by at least one mask");
            *instance_of_mask.entry(best).or_insert_with(|| {
                instance_masks.push(best);
                instance_masks.len() - 1
            })
        })
        .collect();
    let instance_map = patches
        .patch_map
        .iter()
        .map(|&p| if p < 0 { BACKGROUND } else { patch_instance[p as usize] as i32 })
        .collect();
    InstanceGrouping { instance_map, patch_instance, instance_masks }
}

/// Everything the contrastive losses need from one view's masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDecomposition {
    pub width: u32,
    pub height: u32,
    pub patch_map: Vec<i32>,
    pub patch_masksets: Vec<Vec<u32>>,
    pub correlation: CorrelationMatrix,
    /// `levels[p][d]` is the patch set at level `d + 1` of patch `p`.
    pub levels: Vec<Vec<Vec<usize>>>,
    pub instance_map: Vec<i32>,
    pub patch_instance: Vec<usize>,
    pub instance_masks: Vec<usize>,
}

impl PatchDecomposition {
    pub fn build(masks: &MaskSet) -> Result<Self> {
        let patches = decompose_to_patches(masks)?;
        let correlation = correlation_matrix(&patches.masksets);
        let levels = (0..patches.masksets.len()).map(|p| level_sets(p, &correlation)).collect();
        let grouping = group_instances(&patches, masks);
        Ok(Self {
            width: masks.width,
            height: masks.height,
            patch_map: patches.patch_map,
            patch_masksets: patches.masksets,
            correlation,
            levels,
            instance_map: grouping.instance_map,
            patch_instance: grouping.patch_instance,
            instance_masks: grouping.instance_masks,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patch_masksets.len()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_masks.len()
    }
}
