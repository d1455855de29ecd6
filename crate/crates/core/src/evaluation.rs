//! Segmentation metrics: per-class IoU and accuracy over label maps, and
//! per-query IoU for object selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BlendState;

/// Threshold above which an object-selection query counts as correct.
pub const SELECTION_IOU_THRESHOLD: f64 = 0.25;

/// Per-class pixel counts. Ground-truth background (-1) is ignored; a
/// prediction of -1 on a labelled pixel counts as a miss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub class_count: usize,
    /// `|pred = c and gt = c|`
    pub intersection: Vec<u64>,
    /// `|pred = c|` over pixels with a ground-truth label.
    pub predicted: Vec<u64>,
    /// `|gt = c|`
    pub ground_truth: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(class_count: usize) -> Self {
        Self { class_count, intersection: vec![0; class_count], predicted: vec![0; class_count], ground_truth: vec![0; class_count] }
    }

    pub fn add(&mut self, pred: &[i32], gt: &[i32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Evaluation(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let n = self.class_count as i32;
        for (&p, &g) in pred.iter().zip(gt) {
            if !(-1..n).contains(&p) || !(-1..n).contains(&g) {
                return Err(Error::Evaluation(format!("label out of range: pred {p}, gt {g}, {n} classes")));
            }
            if g < 0 {
                continue;
            }
            self.ground_truth[g as usize] += 1;
            if p >= 0 {
                self.predicted[p as usize] += 1;
                if p == g {
                    self.intersection[g as usize] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::Evaluation("cannot merge accumulators with different class counts".into()));
        }
        for c in 0..self.class_count {
            self.intersection[c] += other.intersection[c];
            self.predicted[c] += other.predicted[c];
            self.ground_truth[c] += other.ground_truth[c];
        }
        Ok(())
    }

    pub fn union(&self, c: usize) -> u64 {
        self.predicted[c] + self.ground_truth[c] - self.intersection[c]
    }

    /// Per-class scores; classes absent from the ground truth are `None`
    /// and left out of the means.
    pub fn report(&self) -> Result<MetricReport> {
        let mut iou = Vec::with_capacity(self.class_count);
        let mut acc = Vec::with_capacity(self.class_count);
        for c in 0..self.class_count {
            if self.ground_truth[c] == 0 {
                iou.push(None);
                acc.push(None);
            } else {
                iou.push(Some(self.intersection[c] as f64 / self.union(c) as f64));
                acc.push(Some(self.intersection[c] as f64 / self.ground_truth[c] as f64));
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        if iou.iter().all(Option::is_none) {
            return Err(Error::Evaluation("no ground-truth class present".into()));
        }
        Ok(MetricReport { miou: mean(&iou), macc: mean(&acc), iou, acc })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub macc: f64,
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
}

/// mIoU and mAcc of one label map.
pub fn miou_macc(pred: &[i32], gt: &[i32], class_count: usize) -> Result<MetricReport> {
    let mut acc = ConfusionAccumulator::new(class_count);
    acc.add(pred, gt)?;
    acc.report()
}

/// IoU of two binary masks; two empty masks agree perfectly.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Per-query IoU; `None` for skipped queries.
    pub ious: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub skipped: Vec<usize>,
}

/// Scores rendered selection masks against ground truth. Queries without
/// ground truth are skipped and listed.
pub fn object_selection_eval(pred: &[Vec<bool>], gt: &[Option<Vec<bool>>]) -> Result<SelectionReport> {
    if pred.len() != gt.len() {
        return Err(Error::Evaluation(format!("{} predictions for {} queries", pred.len(), gt.len())));
    }
    let mut ious = Vec::with_capacity(pred.len());
    let mut skipped = Vec::new();
    for (q, (p, g)) in pred.iter().zip(gt).enumerate() {
        match g {
            Some(g) if g.len() == p.len() => ious.push(Some(mask_iou(p, g))),
            Some(_) => return Err(Error::Evaluation(format!("query {q}: mask sizes differ"))),
            None => {
                skipped.push(q);
                ious.push(None);
            }
        }
    }
    let scored: Vec<f64> = ious.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Evaluation("no query has ground truth".into()));
    }
    let n = scored.len() as f64;
    Ok(SelectionReport {
        miou: scored.iter().sum::<f64>() / n,
        accuracy: scored.iter().filter(|&&x| x > SELECTION_IOU_THRESHOLD).count() as f64 / n,
        ious,
        skipped,
    })
}

/// Binary mask of a Gaussian selection: a pixel is on when the selected
/// Gaussians hold more than half of its blending weight.
pub fn selection_mask(state: &BlendState, selected: &[bool]) -> Vec<bool> {
    (0..state.pixel_count())
        .map(|p| {
            let (mut sel, mut total) = (0.0, 0.0);
            for c in state.pixel(p) {
                total += c.weight;
                if selected[c.gaussian as usize] {
                    sel += c.weight;
                }
            }
            total > 0.0 && sel > 0.5 * total
        })
        .collect()
}
