//! Stage wiring: training runners over a scene and dataset, semantic
//! evaluation on held-out views, and the ablation table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adam::OptimizerState;
use crate::contrastive::{prepare_views, train_stage1, PreparedView, Stage1Config, Stage1Record};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionAccumulator, MetricReport};
use crate::language::{init_language_field, language_target, render_language_map, semantic_map, train_stage3, LanguageField, LanguageTarget, Stage3Config, Stage3Record};
use crate::raster::rasterize;
use crate::scene::Scene;
use crate::supergaussian::{clustering_from_assignment, group_supergaussians, kmeans_baseline, train_stage2, AnchorAttributes, ClusterConfig, Clustering, Grouping};

/// Hidden width of the language decoder.
pub const LANGUAGE_HIDDEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stage1: Stage1Config,
    pub cluster: ClusterConfig,
    pub stage3: Stage3Config,
}

impl PipelineConfig {
    /// Every stage seeded from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stage1.seed = seed;
        self.cluster.seed = seed;
        self.stage3.seed = seed;
        self
    }
}

/// Stage-1 training on the train split. The optimizer state carries over
/// between calls so training can resume.
pub fn run_stage1(scene: &mut Scene, dataset: &Dataset, cfg: &Stage1Config, opt: &mut OptimizerState, on_step: impl FnMut(&Stage1Record)) -> Result<Vec<Stage1Record>> {
    dataset.validate(scene.cameras.len())?;
    let views = prepare_views(scene, dataset, Split::Train)?;
    train_stage1(scene, &views, cfg, opt, on_step)
}

/// Stage-2 clustering followed by grouping.
pub fn run_stage2(scene: &Scene, cfg: &ClusterConfig) -> Result<(Clustering, Grouping)> {
    let clustering = train_stage2(scene, cfg, |step, loss| {
        if step % 100 == 0 {
            info!("stage 2 step {step}: loss {:.6}", loss.total);
        }
    })?;
    let grouping = group_supergaussians(scene, &clustering)?;
    Ok((clustering, grouping))
}

/// KMeans assignment in place of the learned association.
pub fn run_kmeans(scene: &Scene, cfg: &ClusterConfig) -> Result<(Clustering, Grouping)> {
    cfg.validate()?;
    if scene.trained_stage < 1 {
        return Err(Error::StageOrder("clustering needs a stage-1 checkpoint".into()));
    }
    let attrs = AnchorAttributes::from_scene(scene);
    let km = kmeans_baseline(&attrs, cfg.s, cfg.seed)?;
    let clustering = clustering_from_assignment(&attrs, &km.assignment, cfg.s, cfg.clone());
    let grouping = group_supergaussians(scene, &clustering)?;
    Ok((clustering, grouping))
}

/// Language supervision for every training view.
pub fn language_views(scene: &Scene, dataset: &Dataset) -> Result<(Vec<PreparedView>, Vec<LanguageTarget>)> {
    let prepared = prepare_views(scene, dataset, Split::Train)?;
    let targets = prepared
        .iter()
        .map(|p| {
            let view = dataset.view(p.view_id).expect("prepared view exists");
            language_target(p, view, &dataset.vocabulary)
        })
        .collect();
    Ok((prepared, targets))
}

/// Stage-3 distillation from a fresh, seeded language field.
pub fn run_stage3(scene: &Scene, dataset: &Dataset, clustering: &Clustering, cfg: &Stage3Config, on_step: impl FnMut(&Stage3Record)) -> Result<(LanguageField, Vec<Stage3Record>)> {
    let (prepared, targets) = language_views(scene, dataset)?;
    let pairs: Vec<_> = prepared.iter().map(|p| &p.state).zip(&targets).collect();
    let mut field = init_language_field(clustering, dataset.vocabulary.dim, LANGUAGE_HIDDEN, cfg.seed);
    let log = train_stage3(scene, clustering, &mut field, &pairs, cfg, on_step)?;
    Ok((field, log))
}

/// Per-pixel class prediction for one camera.
pub fn predict_semantic(scene: &Scene, dataset: &Dataset, clustering: &Clustering, field: &LanguageField, camera: usize) -> Result<Vec<i32>> {
    let cam = scene.cameras.get(camera).ok_or_else(|| Error::Query(format!("unknown camera {camera}")))?;
    let state = rasterize(&scene.gaussian_geometry()?, cam);
    let map = render_language_map(scene, clustering, field, &state)?;
    semantic_map(&dataset.vocabulary, &map)
}

/// Semantic mIoU/mAcc over the test views that carry ground truth.
pub fn evaluate_semantic(scene: &Scene, dataset: &Dataset, clustering: &Clustering, field: &LanguageField) -> Result<MetricReport> {
    let mut acc = ConfusionAccumulator::new(dataset.vocabulary.len());
    let mut scored = 0;
    for view in dataset.test_views() {
        let Some(gt) = &view.ground_truth else { continue };
        let pred = predict_semantic(scene, dataset, clustering, field, view.camera)?;
        acc.add(&pred, &gt.semantic)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Evaluation("no test view has ground truth".into()));
    }
    acc.report()
}

/// Fraction of non-empty Super-Gaussians in which one ground-truth
/// instance holds at least `threshold` of the member anchors.
pub fn cluster_purity(clustering: &Clustering, anchor_instance: &[i32], threshold: f64) -> f64 {
    let mut pure = 0;
    let mut nonempty = 0;
    for sg in &clustering.supergs {
        if sg.members.is_empty() {
            continue;
        }
        nonempty += 1;
        let mut counts = BTreeMap::<i32, usize>::new();
        for &a in &sg.members {
            *counts.entry(anchor_instance[a as usize]).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        if best as f64 >= threshold * sg.members.len() as f64 {
            pure += 1;
        }
    }
    if nonempty == 0 {
        0.0
    } else {
        pure as f64 / nonempty as f64
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    CoordsOnly,
    NoInstanceFeat,
    NoHierFeat,
    KMeans,
    SuperGaussians(usize),
    Neighbors(usize),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::CoordsOnly => f.write_str("coords_only_clustering"),
            Variant::NoInstanceFeat => f.write_str("no_instance_feat"),
            Variant::NoHierFeat => f.write_str("no_hier_feat"),
            Variant::KMeans => f.write_str("kmeans"),
            Variant::SuperGaussians(s) => write!(f, "s={s}"),
            Variant::Neighbors(k) => write!(f, "k_nn={k}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let number = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad variant '{s}'")));
        match s {
            "full" => Ok(Variant::Full),
            "coords_only_clustering" | "coords_only" => Ok(Variant::CoordsOnly),
            "no_instance_feat" => Ok(Variant::NoInstanceFeat),
            "no_hier_feat" => Ok(Variant::NoHierFeat),
            "kmeans" => Ok(Variant::KMeans),
            _ => {
                if let Some(v) = s.strip_prefix("s=") {
                    Ok(Variant::SuperGaussians(number(v)?))
                } else if let Some(v) = s.strip_prefix("k_nn=") {
                    Ok(Variant::Neighbors(number(v)?))
                } else {
                    Err(Error::Config(format!("unknown variant '{s}'")))
                }
            }
        }
    }
}

impl Variant {
    /// Stage-1 settings the variant trains with.
    fn stage1(&self, base: &Stage1Config) -> Stage1Config {
        let mut cfg = base.clone();
        match self {
            Variant::NoInstanceFeat => cfg.lambda_g = 0.0,
            Variant::NoHierFeat => cfg.lambda_h = 0.0,
            _ => {}
        }
        cfg
    }

    fn cluster(&self, base: &ClusterConfig) -> ClusterConfig {
        let mut cfg = base.clone();
        match *self {
            Variant::CoordsOnly => cfg.use_segmentation = false,
            Variant::SuperGaussians(s) => cfg.s = s,
            Variant::Neighbors(k) => cfg.k_nn = k,
            _ => {}
        }
        cfg
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub supergaussians: usize,
    pub k_nn: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    /// Present when the dataset carries per-anchor instances.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub labels: Vec<String>,
    pub rows: Vec<VariantReport>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantReport> {
        let name = variant.to_string();
        self.rows.iter().find(|r| r.variant == name)
    }

    pub fn miou(&self, variant: Variant) -> Option<f64> {
        self.row(variant).and_then(|r| r.metrics.as_ref()).map(|m| m.miou)
    }
}

/// Purity threshold used in reports.
pub const PURITY_THRESHOLD: f64 = 0.9;

/// Trains and evaluates every variant from the same untrained scene and
/// seeds. Variants asking for more Super-Gaussians than anchors are
/// reported as skipped.
pub fn run_ablation(scene: &Scene, dataset: &Dataset, cfg: &PipelineConfig, variants: &[Variant]) -> Result<AblationReport> {
    // stage-1 runs keyed by their (lambda_g, lambda_h) settings
    let mut stage1: Vec<(Stage1Config, Scene)> = Vec::new();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let s1 = variant.stage1(&cfg.stage1);
        let cc = variant.cluster(&cfg.cluster);
        let mut row = VariantReport { variant: variant.to_string(), supergaussians: cc.s, k_nn: cc.k_nn, metrics: None, purity: None, skipped: None };
        if cc.s > scene.anchors.len() {
            row.skipped = Some(format!("{} Super-Gaussians requested for {} anchors", cc.s, scene.anchors.len()));
            rows.push(row);
            continue;
        }
        let trained = match stage1.iter().position(|(c, _)| *c == s1) {
            Some(i) => &stage1[i].1,
            None => {
                info!("ablation: stage 1 for {variant}");
                let mut s = scene.clone();
                run_stage1(&mut s, dataset, &s1, &mut OptimizerState::default(), |_| {})?;
                stage1.push((s1, s));
                &stage1.last().expect("just pushed").1
            }
        };
        info!("ablation: clustering for {variant}");
        let (clustering, _) = if variant == Variant::KMeans { run_kmeans(trained, &cc)? } else { run_stage2(trained, &cc)? };
        let (field, _) = run_stage3(trained, dataset, &clustering, &cfg.stage3, |_| {})?;
        row.metrics = Some(evaluate_semantic(trained, dataset, &clustering, &field)?);
        row.purity = dataset.anchor_instance.as_deref().map(|inst| cluster_purity(&clustering, inst, PURITY_THRESHOLD));
        rows.push(row);
    }
    Ok(AblationReport { labels: dataset.vocabulary.labels().iter().map(|s| s.to_string()).collect(), rows })
}
