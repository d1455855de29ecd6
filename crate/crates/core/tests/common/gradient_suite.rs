//! Analytic gradients against central finite differences in f64.
//!
//! Every instance is a fresh random scene of 10 anchors (50 Gaussians)
//! viewed by one 16x16 camera. The relative error of an entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`; the floor
//! keeps entries whose true gradient is zero from turning round-off into
//! a relative error.

use rand::seq::index::sample;
use rand::Rng;

use supergseg::contrastive::{
    hierarchical_loss_frozen, hierarchical_targets, instance_loss_frozen, instance_targets, rgb_l1, stage1_gradients, PixelGroups, Stage1Config, Stage1Samples,
};
use supergseg::language::{cosine_loss, stage3_gradients, LanguageField, LanguageTarget};
use supergseg::masks::PatchDecomposition;
use supergseg::raster::{rasterize, ChannelValues, FeatureImage};
use supergseg::scene::Scene;
use supergseg::supergaussian::{clustering_from_assignment, compactness_loss, knn, reconstruction_loss, AnchorAttributes, ClusterConfig};

use super::fixtures::{feature_image, rng, rows, tiny_scene, tiny_view, two_object_masks, SIDE};
use super::Check;

pub const INSTANCES: usize = 20;
pub const ANCHORS: usize = 10;
pub const LOSS_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-4;
/// Entries checked per gradient and instance.
const PROBES: usize = 48;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Checks `analytic[i]` against `(f(i, +eps) - f(i, -eps)) / 2eps` for the
/// given entries.
fn probe(check: &mut Check, tol: f64, tag: &str, analytic: &[f64], entries: &[usize], mut f: impl FnMut(usize, f64) -> f64) {
    for &i in entries {
        let numeric = (f(i, EPS) - f(i, -EPS)) / (2.0 * EPS);
        let err = rel_err(analytic[i], numeric);
        check.observe(err);
        if !(err <= tol) {
            check.fail(format!("{tag} entry {i}: analytic {:.9e} numeric {numeric:.9e} rel {err:.2e}", analytic[i]));
        }
    }
}

fn pick<R: Rng>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    sample(rng, len, count.min(len)).into_vec()
}

/// Entries of channel values belonging to pixels in `pixels`.
fn pixel_entries<R: Rng>(rng: &mut R, pixels: &[usize], channels: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| pixels[rng.random_range(0..pixels.len())] * channels + rng.random_range(0..channels)).collect()
}

fn perturbed(img: &FeatureImage, i: usize, delta: f64) -> FeatureImage {
    let mut out = img.clone();
    out.data[i] += delta;
    out
}

fn flat(groups: &PixelGroups) -> Vec<usize> {
    groups.groups.iter().flatten().copied().collect()
}

fn instance(seed: u64, checks: &mut [Check; 9]) {
    let mut rng = rng(1000 + seed);
    let tau = rng.random_range(0.1..0.5);
    let masks = two_object_masks(&mut rng, SIDE, SIDE);
    let decomposition = PatchDecomposition::build(&masks).unwrap();

    // instance contrastive loss, means frozen
    {
        let c = &mut checks[0];
        let map = feature_image(&mut rng, SIDE, SIDE, 8);
        let groups = PixelGroups::from_map(&decomposition.instance_map, decomposition.instance_count());
        let targets = instance_targets(&map, &groups);
        let lg = instance_loss_frozen(&map, &groups, &targets, tau).unwrap();
        let entries = pixel_entries(&mut rng, &flat(&groups), 8, PROBES);
        probe(c, LOSS_TOL, "instance", &lg.grad.data, &entries, |i, d| instance_loss_frozen(&perturbed(&map, i, d), &groups, &targets, tau).unwrap().loss);
        c.cases += 1;
    }
    // hierarchical loss, means and level thresholds frozen
    {
        let c = &mut checks[1];
        let map = feature_image(&mut rng, SIDE, SIDE, 8);
        let groups = PixelGroups::from_map(&decomposition.patch_map, decomposition.patch_count());
        let targets = hierarchical_targets(&map, &decomposition, &groups, tau);
        let lh = hierarchical_loss_frozen(&map, &decomposition, &groups, &targets, tau, 0.5).unwrap();
        let entries = pixel_entries(&mut rng, &flat(&groups), 8, PROBES);
        probe(c, LOSS_TOL, "hierarchical", &lh.grad.data, &entries, |i, d| {
            hierarchical_loss_frozen(&perturbed(&map, i, d), &decomposition, &groups, &targets, tau, 0.5).unwrap().loss
        });
        c.cases += 1;
    }
    // photometric L1
    {
        let c = &mut checks[2];
        let rendered = feature_image(&mut rng, SIDE, SIDE, 3);
        let target = feature_image(&mut rng, SIDE, SIDE, 3);
        let l = rgb_l1(&rendered, &target).unwrap();
        let entries = pick(&mut rng, rendered.data.len(), PROBES);
        probe(c, LOSS_TOL, "l1", &l.grad.data, &entries, |i, d| rgb_l1(&perturbed(&rendered, i, d), &target).unwrap().loss);
        c.cases += 1;
    }
    // reconstruction: with respect to the association and to the centers
    {
        let c = &mut checks[3];
        let (n, s, k, dim) = (30, 6, 3, rng.random_range(3..9));
        let values = rows(&mut rng, n, dim);
        let positions = rows(&mut rng, n, 3);
        let center_pos = rows(&mut rng, s, 3);
        let centers = rows(&mut rng, s, dim);
        let neighbors = knn(&positions, &center_pos, k).unwrap();
        let soft = random_soft(&mut rng, n, k);
        let (_, d_soft, d_centers) = reconstruction_loss(&values, &centers, &neighbors, &soft, k);
        let entries = pick(&mut rng, soft.len(), PROBES);
        probe(c, LOSS_TOL, "recon/assoc", &d_soft, &entries, |i, d| {
            let mut s2 = soft.clone();
            s2[i] += d;
            reconstruction_loss(&values, &centers, &neighbors, &s2, k).0
        });
        let entries = pick(&mut rng, centers.data.len(), PROBES);
        probe(c, LOSS_TOL, "recon/centers", &d_centers.data, &entries, |i, d| {
            let mut c2 = centers.clone();
            c2.data[i] += d;
            reconstruction_loss(&values, &c2, &neighbors, &soft, k).0
        });
        c.cases += 1;
    }
    // compactness with respect to the centers
    {
        let c = &mut checks[4];
        let (n, s, k) = (30, 6, 3);
        let positions = rows(&mut rng, n, 3);
        let centers = rows(&mut rng, s, 3);
        let neighbors = knn(&positions, &centers, k).unwrap();
        let (_, grad) = compactness_loss(&positions, &centers, &neighbors, k);
        let entries: Vec<usize> = (0..centers.data.len()).collect();
        probe(c, LOSS_TOL, "compactness", &grad.data, &entries, |i, d| {
            let mut c2 = centers.clone();
            c2.data[i] += d;
            compactness_loss(&positions, &c2, &neighbors, k).0
        });
        c.cases += 1;
    }
    // cosine distillation loss
    {
        let c = &mut checks[5];
        let rendered = feature_image(&mut rng, SIDE, SIDE, 6);
        let target = feature_image(&mut rng, SIDE, SIDE, 6);
        let valid: Vec<bool> = (0..rendered.pixel_count()).map(|_| rng.random_bool(0.7)).collect();
        let l = cosine_loss(&rendered, &target, &valid).unwrap();
        let on: Vec<usize> = (0..valid.len()).filter(|&p| valid[p]).collect();
        let entries = pixel_entries(&mut rng, &on, 6, PROBES);
        probe(c, LOSS_TOL, "cosine", &l.grad.data, &entries, |i, d| cosine_loss(&perturbed(&rendered, i, d), &target, &valid).unwrap().loss);
        c.cases += 1;
    }

    let scene = tiny_scene(&mut rng, ANCHORS);
    let view = tiny_view(&mut rng, &scene);

    // blend_gradient: L(v) = <G, composite(v)>
    {
        let c = &mut checks[6];
        let state = &view.state;
        let ch = 4;
        let values = ChannelValues { channels: ch, data: (0..scene.gaussian_count() * ch).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let g = feature_image(&mut rng, SIDE, SIDE, ch);
        let analytic = state.blend_gradient(&g).unwrap();
        let inner = |v: &ChannelValues| -> f64 { state.composite(v).unwrap().data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
        let entries = pick(&mut rng, values.data.len(), PROBES);
        probe(c, LOSS_TOL, "blend", &analytic.data, &entries, |i, d| {
            let mut v2 = values.clone();
            v2.data[i] += d;
            inner(&v2)
        });
        c.cases += 1;
    }
    // stage 1 end to end: decoders and segmentation features
    {
        let c = &mut checks[7];
        let cfg = Stage1Config { tau, lambda_g: rng.random_range(0.5..1.5), lambda_h: rng.random_range(0.5..1.5), ..Default::default() };
        let samples = Stage1Samples::draw(&view, 24, &mut rng);
        let (_, grads, targets) = stage1_gradients(&scene, &view, &cfg, &samples, None).unwrap();
        let total = |s: &Scene| stage1_gradients(s, &view, &cfg, &samples, Some(&targets)).unwrap().0.total;
        let groups: [(&str, &Vec<f64>); 3] = [("color", &grads.color), ("instance", &grads.instance), ("hierarchy", &grads.hierarchy)];
        for (name, analytic) in groups {
            let entries = pick(&mut rng, analytic.len(), PROBES);
            probe(c, END_TO_END_TOL, name, analytic, &entries, |i, d| {
                let mut s2 = scene.clone();
                s2.decoders.get_mut(name).unwrap().params_mut()[i] += d;
                total(&s2)
            });
        }
        let fdim = scene.config.anchor_feature_dim;
        let entries = pick(&mut rng, grads.segmentation.len(), PROBES);
        probe(c, END_TO_END_TOL, "segmentation", &grads.segmentation, &entries, |i, d| {
            let mut s2 = scene.clone();
            s2.anchors[i / fdim].segmentation[i % fdim] += d;
            total(&s2)
        });
        c.cases += 1;
    }
    // stage 3 end to end: latents and language decoder
    {
        let c = &mut checks[8];
        let attrs = AnchorAttributes::from_scene(&scene);
        let s = 4;
        let hard: Vec<u32> = (0..ANCHORS as u32).map(|a| a % s as u32).collect();
        let clustering = clustering_from_assignment(&attrs, &hard, s, ClusterConfig { s, k_nn: 3, ..Default::default() });
        let dim = 6;
        let field = LanguageField::new(s, dim, 16, &mut rng);
        let state = rasterize(&scene.gaussian_geometry().unwrap(), &scene.cameras[0]);
        let target = LanguageTarget {
            view_id: 0,
            target: feature_image(&mut rng, SIDE, SIDE, dim),
            valid: (0..(SIDE * SIDE) as usize).map(|_| rng.random_bool(0.8)).collect(),
        };
        let (_, grads) = stage3_gradients(&scene, &clustering, &field, &state, &target).unwrap();
        let loss = |f: &LanguageField| stage3_gradients(&scene, &clustering, f, &state, &target).unwrap().0;
        let latent_dim = field.latents[0].len();
        let entries = pick(&mut rng, grads.latents.len(), PROBES);
        probe(c, END_TO_END_TOL, "latents", &grads.latents, &entries, |i, d| {
            let mut f2 = field.clone();
            f2.latents[i / latent_dim][i % latent_dim] += d;
            loss(&f2)
        });
        let entries = pick(&mut rng, grads.decoder.len(), PROBES);
        probe(c, END_TO_END_TOL, "language decoder", &grads.decoder, &entries, |i, d| {
            let mut f2 = field.clone();
            f2.decoder.params_mut()[i] += d;
            loss(&f2)
        });
        c.cases += 1;
    }
}

fn random_soft<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<f64> {
    let mut soft = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        soft.extend(row.iter().map(|x| x / z));
    }
    soft
}

/// Runs every gradient check on `instances` random instances.
pub fn run(instances: usize) -> Vec<Check> {
    let mut checks = [
        Check::new("instance contrastive"),
        Check::new("hierarchical contrastive"),
        Check::new("photometric L1"),
        Check::new("reconstruction"),
        Check::new("compactness"),
        Check::new("cosine distillation"),
        Check::new("blend_gradient"),
        Check::new("stage-1 end to end"),
        Check::new("stage-3 end to end"),
    ];
    for seed in 0..instances as u64 {
        instance(seed, &mut checks);
    }
    checks.to_vec()
}
