//! Stage 1: instance and hierarchical contrastive feature fields plus
//! photometric fitting.
//!
//! Mean features and the level thresholds of the hierarchical loss are
//! treated as constants in the gradient. They are gathered into "targets"
//! computed from the current maps; the `*_frozen` loss variants take them
//! explicitly so the gradients can be checked against finite differences of
//! the same function.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{lr_schedule, OptimizerState, ParamGroup};
use crate::dataset::{Dataset, Split, View};
use crate::error::{Error, Result};
use crate::masks::PatchDecomposition;
use crate::mlp::MlpTrace;
use crate::raster::{rasterize, BlendState, ChannelValues, FeatureImage};
use crate::scene::{sigmoid, Scene};

/// Norm below which a rendered feature is treated as empty.
const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub tau: f64,
    pub lambda_decay: f64,
    pub lambda_g: f64,
    pub lambda_h: f64,
    /// Pixels sampled per instance mask or patch; `0` uses every pixel.
    pub pixels_per_mask: usize,
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_decay: 0.5,
            lambda_g: 1.0,
            lambda_h: 1.0,
            pixels_per_mask: 256,
            iterations: 2000,
            lr_initial: 0.01,
            lr_final: 0.001,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(Error::Config("lambda_decay must lie in (0, 1]".into()));
        }
        if self.pixels_per_mask == 1 {
            return Err(Error::Config("pixels_per_mask must be at least 2 (or 0 for all)".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value with its gradient with respect to the input map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: FeatureImage,
    /// Set when the loss could not be formed (e.g. one instance only).
    pub skipped: bool,
}

/// Pixel indices per group (instance or patch).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelGroups {
    pub groups: Vec<Vec<usize>>,
}

impl PixelGroups {
    /// Every pixel of every group, in scan order.
    pub fn from_map(map: &[i32], count: usize) -> Self {
        let mut groups = vec![Vec::new(); count];
        for (p, &id) in map.iter().enumerate() {
            if id >= 0 && (id as usize) < count {
                groups[id as usize].push(p);
            }
        }
        Self { groups }
    }

    /// At most `budget` pixels per group drawn without replacement, sorted.
    /// A budget of 0 keeps every pixel.
    pub fn sample<R: Rng + ?Sized>(map: &[i32], count: usize, budget: usize, rng: &mut R) -> Self {
        let all = Self::from_map(map, count);
        if budget == 0 {
            return all;
        }
        let groups = all
            .groups
            .into_iter()
            .map(|g| {
                if g.len() <= budget {
                    g
                } else {
                    let mut picked: Vec<usize> = sample_indices(rng, g.len(), budget).into_iter().map(|i| g[i]).collect();
                    picked.sort_unstable();
                    picked
                }
            })
            .collect();
        Self { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = dot(v, v).sqrt();
    (n > MIN_FEATURE_NORM).then(|| (v.iter().map(|x| x / n).collect(), n))
}

/// `d/dv` of `L(v / |v|)` given `d/d(v/|v|)`.
fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - proj * u) / norm).collect()
}

/// Normalized mean of the normalized features of each group (`None`
/// for a group without usable pixels).
pub fn group_means(map: &FeatureImage, groups: &PixelGroups) -> Vec<Option<Vec<f64>>> {
    groups
        .groups
        .iter()
        .map(|g| {
            let mut acc = vec![0.0; map.channels];
            let mut n = 0usize;
            for &p in g {
                if let Some((u, _)) = normalized(map.pixel(p)) {
                    acc.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
                    n += 1;
                }
            }
            if n == 0 {
                return None;
            }
            normalized(&acc).map(|(u, _)| u)
        })
        .collect()
}

/// Softmax over `logits` restricted to entries that are `Some`.
fn softmax(logits: &[Option<f64>]) -> Vec<f64> {
    let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |x| (x - max).exp())).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Logits `u . m_q / tau` against every available mean.
fn logits(unit: &[f64], means: &[Option<Vec<f64>>], tau: f64) -> Vec<Option<f64>> {
    means.iter().map(|m| m.as_ref().map(|m| dot(unit, m) / tau)).collect()
}

/// `-log softmax_r` and its gradient with respect to the unit feature.
fn contrast_term(unit: &[f64], means: &[Option<Vec<f64>>], probs: &[f64], lg: &[Option<f64>], r: usize, tau: f64) -> (f64, Vec<f64>) {
    let max = lg.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + lg.iter().flatten().map(|x| (x - max).exp()).sum::<f64>().ln();
    let value = lse - lg[r].expect("target mean present");
    let mut grad = vec![0.0; unit.len()];
    for (q, m) in means.iter().enumerate() {
        if let Some(m) = m {
            let c = (probs[q] - if q == r { 1.0 } else { 0.0 }) / tau;
            grad.iter_mut().zip(m).for_each(|(g, x)| *g += c * x);
        }
    }
    (value, grad)
}

/// Constants of the instance loss.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTargets {
    pub means: Vec<Option<Vec<f64>>>,
}

pub fn instance_targets(map: &FeatureImage, groups: &PixelGroups) -> InstanceTargets {
    InstanceTargets { means: group_means(map, groups) }
}

/// Instance contrastive loss: mean over instances of the mean per-pixel
/// `-log softmax` of each pixel against its own instance mean.
pub fn instance_loss(map: &FeatureImage, groups: &PixelGroups, tau: f64) -> Result<LossGrad> {
    let targets = instance_targets(map, groups);
    instance_loss_frozen(map, groups, &targets, tau)
}

pub fn instance_loss_frozen(map: &FeatureImage, groups: &PixelGroups, targets: &InstanceTargets, tau: f64) -> Result<LossGrad> {
    if targets.means.len() != groups.len() {
        return Err(Error::Contract("instance targets do not match the pixel groups".into()));
    }
    let mut grad = FeatureImage::zeros(map.width, map.height, map.channels);
    let present = targets.means.iter().filter(|m| m.is_some()).count();
    if present < 2 {
        log::debug!("instance loss skipped: {present} instance(s) in view");
        return Ok(LossGrad { loss: 0.0, grad, skipped: true });
    }
    let weight = 1.0 / present as f64;
    let mut loss = 0.0;
    for (inst, g) in groups.groups.iter().enumerate() {
        if targets.means[inst].is_none() {
            continue;
        }
        let units: Vec<(usize, Vec<f64>, f64)> = g.iter().filter_map(|&p| normalized(map.pixel(p)).map(|(u, n)| (p, u, n))).collect();
        if units.is_empty() {
            continue;
        }
        let per_pixel = weight / units.len() as f64;
        for (p, unit, norm) in &units {
            let lg = logits(unit, &targets.means, tau);
            let probs = softmax(&lg);
            let (value, gu) = contrast_term(unit, &targets.means, &probs, &lg, inst, tau);
            loss += per_pixel * value;
            let gu: Vec<f64> = gu.iter().map(|x| x * per_pixel).collect();
            let gv = normalize_backward(unit, *norm, &gu);
            grad.pixel_mut(*p).iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        }
    }
    Ok(LossGrad { loss, grad, skipped: false })
}

/// Constants of the hierarchical loss: patch means and, per patch, sampled
/// pixel and level, the running maximum of the lower-level losses.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalTargets {
    pub means: Vec<Option<Vec<f64>>>,
    /// `thresholds[p][t][d]` is the threshold used at level `d + 1`.
    pub thresholds: Vec<Vec<Vec<f64>>>,
}

fn level_losses(unit: &[f64], means: &[Option<Vec<f64>>], tau: f64) -> (Vec<Option<f64>>, Vec<f64>) {
    let lg = logits(unit, means, tau);
    let probs = softmax(&lg);
    (lg, probs)
}

fn neg_log_softmax(lg: &[Option<f64>], r: usize) -> Option<f64> {
    let target = lg[r]?;
    let max = lg.iter().flatten().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    Some(max + lg.iter().flatten().map(|x| (x - max).exp()).sum::<f64>().ln() - target)
}

pub fn hierarchical_targets(map: &FeatureImage, decomposition: &PatchDecomposition, groups: &PixelGroups, tau: f64) -> HierarchicalTargets {
    let means = group_means(map, groups);
    let thresholds = groups
        .groups
        .iter()
        .enumerate()
        .map(|(p, g)| {
            g.iter()
                .map(|&px| {
                    let Some((unit, _)) = normalized(map.pixel(px)) else {
                        return Vec::new();
                    };
                    let (lg, _) = level_losses(&unit, &means, tau);
                    let mut running = f64::NEG_INFINITY;
                    decomposition.levels[p]
                        .iter()
                        .map(|level| {
                            let thr = running;
                            for &r in level {
                                if let Some(l) = neg_log_softmax(&lg, r) {
                                    running = running.max(l.max(thr));
                                }
                            }
                            thr
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    HierarchicalTargets { means, thresholds }
}

/// Hierarchical contrastive loss, summed over patches and levels, averaged
/// over the sampled pixels of each patch.
pub fn hierarchical_loss(map: &FeatureImage, decomposition: &PatchDecomposition, groups: &PixelGroups, tau: f64, lambda: f64) -> Result<LossGrad> {
    let targets = hierarchical_targets(map, decomposition, groups, tau);
    hierarchical_loss_frozen(map, decomposition, groups, &targets, tau, lambda)
}

pub fn hierarchical_loss_frozen(
    map: &FeatureImage,
    decomposition: &PatchDecomposition,
    groups: &PixelGroups,
    targets: &HierarchicalTargets,
    tau: f64,
    lambda: f64,
) -> Result<LossGrad> {
    if groups.len() != decomposition.patch_count() || targets.means.len() != groups.len() {
        return Err(Error::Contract("hierarchical targets do not match the patch decomposition".into()));
    }
    let mut grad = FeatureImage::zeros(map.width, map.height, map.channels);
    let mut loss = 0.0;
    for (p, g) in groups.groups.iter().enumerate() {
        if targets.means[p].is_none() {
            continue;
        }
        let units: Vec<(usize, usize, Vec<f64>, f64)> = g
            .iter()
            .enumerate()
            .filter_map(|(t, &px)| normalized(map.pixel(px)).map(|(u, n)| (t, px, u, n)))
            .collect();
        if units.is_empty() {
            continue;
        }
        let per_pixel = 1.0 / units.len() as f64;
        for (t, px, unit, norm) in &units {
            let (lg, probs) = level_losses(unit, &targets.means, tau);
            let mut gu = vec![0.0; unit.len()];
            for (d, level) in decomposition.levels[p].iter().enumerate() {
                let thr = targets.thresholds[p][*t][d];
                let coef = lambda.powi(d as i32) / level.len() as f64 * per_pixel;
                for &r in level {
                    if targets.means[r].is_none() {
                        continue;
                    }
                    let (value, gr) = contrast_term(unit, &targets.means, &probs, &lg, r, tau);
                    if value >= thr {
                        loss += coef * value;
                        gu.iter_mut().zip(&gr).for_each(|(a, b)| *a += coef * b);
                    } else {
                        loss += coef * thr;
                    }
                }
            }
            let gv = normalize_backward(unit, *norm, &gu);
            grad.pixel_mut(*px).iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        }
    }
    Ok(LossGrad { loss, grad, skipped: false })
}

/// Mean absolute difference over pixels and channels; `sign(0) = 0`.
pub fn rgb_l1(rendered: &FeatureImage, target: &FeatureImage) -> Result<LossGrad> {
    if rendered.width != target.width || rendered.height != target.height || rendered.channels != target.channels {
        return Err(Error::Contract("rendered and target images differ in shape".into()));
    }
    let n = rendered.data.len().max(1) as f64;
    let mut grad = FeatureImage::zeros(rendered.width, rendered.height, rendered.channels);
    let mut loss = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = a - b;
        loss += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossGrad { loss: loss / n, grad, skipped: false })
}

/// A training view with its cached blend state and mask decomposition.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub view_id: u32,
    pub image: FeatureImage,
    pub state: BlendState,
    pub decomposition: PatchDecomposition,
}

/// Rasterizes every view of `split` once; geometry is frozen so the blend
/// states stay valid through training.
pub fn prepare_views(scene: &Scene, dataset: &Dataset, split: Split) -> Result<Vec<PreparedView>> {
    let geometry = scene.gaussian_geometry()?;
    dataset
        .views
        .iter()
        .filter(|v| v.split == split)
        .map(|v| prepare_view(scene, v, &geometry))
        .collect()
}

pub fn prepare_view(scene: &Scene, view: &View, geometry: &[crate::raster::GaussianGeometry]) -> Result<PreparedView> {
    let cam = scene
        .cameras
        .get(view.camera)
        .ok_or_else(|| Error::Ingestion(format!("view {} references missing camera {}", view.id, view.camera)))?;
    if cam.width != view.image.width || cam.height != view.image.height {
        return Err(Error::Ingestion(format!("view {}: camera and image sizes differ", view.id)));
    }
    Ok(PreparedView {
        view_id: view.id,
        image: view.image.clone(),
        state: rasterize(geometry, cam),
        decomposition: PatchDecomposition::build(&view.masks)?,
    })
}

/// Pixel samples for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Samples {
    pub instances: PixelGroups,
    pub patches: PixelGroups,
}

impl Stage1Samples {
    pub fn draw<R: Rng + ?Sized>(view: &PreparedView, budget: usize, rng: &mut R) -> Self {
        let d = &view.decomposition;
        Self {
            instances: PixelGroups::sample(&d.instance_map, d.instance_count(), budget, rng),
            patches: PixelGroups::sample(&d.patch_map, d.patch_count(), budget, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Targets {
    pub instance: InstanceTargets,
    pub hierarchy: HierarchicalTargets,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub l_c: f64,
    pub l_g: f64,
    pub l_h: f64,
    pub total: f64,
}

/// Gradients of the stage-1 loss for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Grads {
    pub color: Vec<f64>,
    pub instance: Vec<f64>,
    pub hierarchy: Vec<f64>,
    /// Anchor segmentation features, `anchor * dim + i`.
    pub segmentation: Vec<f64>,
}

struct AnchorForward {
    color: MlpTrace,
    instance: MlpTrace,
    hierarchy: MlpTrace,
}

/// Stage-1 loss and gradients for one view. With `targets = None` the
/// constants are computed from the current maps and returned.
pub fn stage1_gradients(
    scene: &Scene,
    view: &PreparedView,
    cfg: &Stage1Config,
    samples: &Stage1Samples,
    targets: Option<&Stage1Targets>,
) -> Result<(Stage1Loss, Stage1Grads, Stage1Targets)> {
    let k = scene.config.k_spawn;
    let gd = scene.config.gaussian_feature_dim;
    let dec = &scene.decoders;
    let forwards = scene
        .anchors
        .iter()
        .map(|a| {
            let seg = a.segmentation_input();
            Ok(AnchorForward {
                color: dec.color.forward_trace(&a.geometry)?,
                instance: dec.instance.forward_trace(&seg)?,
                hierarchy: dec.hierarchy.forward_trace(&seg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scene.gaussian_count();
    let channels = 3 + 2 * gd;
    let mut values = ChannelValues::zeros(n, channels);
    for (a, f) in forwards.iter().enumerate() {
        let (c, g, h) = (f.color.output(), f.instance.output(), f.hierarchy.output());
        for slot in 0..k {
            let row = values.row_mut(a * k + slot);
            for i in 0..3 {
                row[i] = sigmoid(c[3 * slot + i]);
            }
            row[3..3 + gd].copy_from_slice(&g[gd * slot..gd * (slot + 1)]);
            row[3 + gd..].copy_from_slice(&h[gd * slot..gd * (slot + 1)]);
        }
    }
    let rendered = view.state.composite(&values)?;
    let color = rendered.channel_slice(0, 3);
    let g_map = rendered.channel_slice(3, gd);
    let h_map = rendered.channel_slice(3 + gd, gd);

    let targets = match targets {
        Some(t) => t.clone(),
        None => Stage1Targets {
            instance: instance_targets(&g_map, &samples.instances),
            hierarchy: hierarchical_targets(&h_map, &view.decomposition, &samples.patches, cfg.tau),
        },
    };

    let lc = rgb_l1(&color, &view.image)?;
    let zero = |c| LossGrad { loss: 0.0, grad: FeatureImage::zeros(rendered.width, rendered.height, c), skipped: true };
    let lg = if cfg.lambda_g != 0.0 {
        instance_loss_frozen(&g_map, &samples.instances, &targets.instance, cfg.tau)?
    } else {
        zero(gd)
    };
    let lh = if cfg.lambda_h != 0.0 {
        hierarchical_loss_frozen(&h_map, &view.decomposition, &samples.patches, &targets.hierarchy, cfg.tau, cfg.lambda_decay)?
    } else {
        zero(gd)
    };
    for (name, v) in [("l_c", lc.loss), ("l_g", lg.loss), ("l_h", lh.loss)] {
        if !v.is_finite() {
            return Err(Error::Training(format!("non-finite stage-1 loss term {name}")));
        }
    }
    let loss = Stage1Loss {
        l_c: lc.loss,
        l_g: lg.loss,
        l_h: lh.loss,
        total: lc.loss + cfg.lambda_g * lg.loss + cfg.lambda_h * lh.loss,
    };

    let mut d_image = FeatureImage::zeros(rendered.width, rendered.height, channels);
    for p in 0..d_image.pixel_count() {
        let dst = d_image.pixel_mut(p);
        dst[..3].copy_from_slice(lc.grad.pixel(p));
        for (d, s) in dst[3..3 + gd].iter_mut().zip(lg.grad.pixel(p)) {
            *d = cfg.lambda_g * s;
        }
        for (d, s) in dst[3 + gd..].iter_mut().zip(lh.grad.pixel(p)) {
            *d = cfg.lambda_h * s;
        }
    }
    let d_values = view.state.blend_gradient(&d_image)?;

    let fdim = scene.config.anchor_feature_dim;
    let mut grads = Stage1Grads {
        color: vec![0.0; dec.color.param_count()],
        instance: vec![0.0; dec.instance.param_count()],
        hierarchy: vec![0.0; dec.hierarchy.param_count()],
        segmentation: vec![0.0; scene.anchors.len() * fdim],
    };
    let mut d_color = vec![0.0; 3 * k];
    let mut d_inst = vec![0.0; gd * k];
    let mut d_hier = vec![0.0; gd * k];
    for (a, f) in forwards.iter().enumerate() {
        let rows = &d_values.data[a * k * channels..(a + 1) * k * channels];
        if rows.iter().all(|v| *v == 0.0) {
            continue;
        }
        let c = f.color.output();
        for slot in 0..k {
            let row = &rows[slot * channels..(slot + 1) * channels];
            for i in 0..3 {
                let s = sigmoid(c[3 * slot + i]);
                d_color[3 * slot + i] = row[i] * s * (1.0 - s);
            }
            d_inst[gd * slot..gd * (slot + 1)].copy_from_slice(&row[3..3 + gd]);
            d_hier[gd * slot..gd * (slot + 1)].copy_from_slice(&row[3 + gd..]);
        }
        dec.color.backward(&f.color, &d_color, &mut grads.color);
        let gi = dec.instance.backward(&f.instance, &d_inst, &mut grads.instance);
        let gh = dec.hierarchy.backward(&f.hierarchy, &d_hier, &mut grads.hierarchy);
        let seg = &mut grads.segmentation[a * fdim..(a + 1) * fdim];
        for i in 0..fdim {
            seg[i] += gi[i] + gh[i];
        }
    }
    Ok((loss, grads, targets))
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub l_c: f64,
    pub l_g: f64,
    pub l_h: f64,
    pub lr: f64,
}

/// Applies one Adam step to the stage-1 parameters.
pub fn apply_stage1_update(scene: &mut Scene, grads: &Stage1Grads, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let fdim = scene.config.anchor_feature_dim;
    let mut seg: Vec<f64> = scene.anchors.iter().flat_map(|a| a.segmentation.iter().copied()).collect();
    {
        let dec = &mut scene.decoders;
        let mut groups = [
            ParamGroup::new("color", dec.color.params_mut(), &grads.color),
            ParamGroup::new("instance", dec.instance.params_mut(), &grads.instance),
            ParamGroup::new("hierarchy", dec.hierarchy.params_mut(), &grads.hierarchy),
            ParamGroup::new("segmentation", &mut seg, &grads.segmentation),
        ];
        opt.step(&mut groups, lr)?;
    }
    for (a, chunk) in scene.anchors.iter_mut().zip(seg.chunks_exact(fdim)) {
        a.segmentation.copy_from_slice(chunk);
    }
    Ok(())
}

/// One stage-1 step on `view`: sample, evaluate, update.
pub fn stage1_step<R: Rng + ?Sized>(
    scene: &mut Scene,
    view: &PreparedView,
    cfg: &Stage1Config,
    opt: &mut OptimizerState,
    lr: f64,
    rng: &mut R,
) -> Result<Stage1Loss> {
    let samples = Stage1Samples::draw(view, cfg.pixels_per_mask, rng);
    let (loss, grads, _) = stage1_gradients(scene, view, cfg, &samples, None)?;
    apply_stage1_update(scene, &grads, opt, lr)?;
    Ok(loss)
}

/// Trains stage 1 for `cfg.iterations` steps, cycling through the views.
/// `on_step` receives every log record.
pub fn train_stage1(
    scene: &mut Scene,
    views: &[PreparedView],
    cfg: &Stage1Config,
    opt: &mut OptimizerState,
    mut on_step: impl FnMut(&Stage1Record),
) -> Result<Vec<Stage1Record>> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Training("stage 1 needs at least one training view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = opt.step as usize;
    let mut log = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let step = start + i;
        let lr = lr_schedule(i, cfg.iterations, cfg.lr_initial, cfg.lr_final);
        let view = &views[step % views.len()];
        let loss = stage1_step(scene, view, cfg, opt, lr, &mut rng)?;
        let record = Stage1Record { step, l_c: loss.l_c, l_g: loss.l_g, l_h: loss.l_h, lr };
        on_step(&record);
        log.push(record);
    }
    scene.trained_stage = scene.trained_stage.max(1);
    Ok(log)
}
