//! End-to-end behaviour on a small synthetic scene: generation, stage
//! ordering, file round trips and the interactive session.

use std::sync::OnceLock;

use supergseg::adam::{load_optimizer, save_optimizer, OptimizerState};
use supergseg::dataset::{load_dataset, save_dataset};
use supergseg::error::Error;
use supergseg::language::{load_language, save_language, LanguageField};
use supergseg::pipeline::{evaluate_semantic, run_kmeans, run_stage1, run_stage2, run_stage3, PipelineConfig};
use supergseg::raster::rasterize;
use supergseg::scene::{load_scene, save_scene, scene_to_json, Scene};
use supergseg::session::{mask_from_rle, mask_rle, Session};
use supergseg::supergaussian::{load_cluster, save_cluster, ClickStatus, Clustering, Grouping, QueryMode};
use supergseg::synthetic::{generate_synthetic_scene, SyntheticScene, SyntheticSpec};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { anchors: 240, width: 32, height: 32, train_views: 4, test_views: 2, seed: 3, ..SyntheticSpec::default() }
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(3);
    cfg.stage1.iterations = 150;
    cfg.cluster.s = 12;
    cfg.cluster.iterations = 80;
    cfg.stage3.iterations = 120;
    cfg
}

struct Trained {
    syn: SyntheticScene,
    scene: Scene,
    optimizer: OptimizerState,
    clustering: Clustering,
    grouping: Grouping,
    field: LanguageField,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let syn = generate_synthetic_scene(&small_spec()).unwrap();
        let cfg = small_config();
        let mut scene = syn.scene.clone();
        let mut optimizer = OptimizerState::default();
        run_stage1(&mut scene, &syn.dataset, &cfg.stage1, &mut optimizer, |_| {}).unwrap();
        let (clustering, grouping) = run_stage2(&scene, &cfg.cluster).unwrap();
        let (field, _) = run_stage3(&scene, &syn.dataset, &clustering, &cfg.stage3, |_| {}).unwrap();
        Trained { syn, scene, optimizer, clustering, grouping, field }
    })
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic_scene(&small_spec()).unwrap();
    let b = generate_synthetic_scene(&small_spec()).unwrap();
    assert_eq!(scene_to_json(&a.scene), scene_to_json(&b.scene));
    assert_eq!(a.dataset.views.len(), b.dataset.views.len());
    for (x, y) in a.dataset.views.iter().zip(&b.dataset.views) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.masks, y.masks);
        assert_eq!(x.ground_truth, y.ground_truth);
    }
    let other = generate_synthetic_scene(&SyntheticSpec { seed: 4, ..small_spec() }).unwrap();
    assert_ne!(scene_to_json(&a.scene), scene_to_json(&other.scene));
}

#[test]
fn synthetic_labels_cover_every_object_and_part() {
    let spec = small_spec();
    let syn = generate_synthetic_scene(&spec).unwrap();
    assert_eq!(syn.scene.anchors.len(), spec.anchors);
    assert_eq!(syn.labels.len(), spec.objects);
    assert_eq!(syn.dataset.vocabulary.len(), spec.objects);
    assert_eq!(syn.dataset.vocabulary.dim, spec.language_dim);
    assert_eq!(syn.dataset.train_views().count(), spec.train_views);
    assert_eq!(syn.dataset.test_views().count(), spec.test_views);

    let parts = spec.objects * spec.parts_per_object;
    let mut per_part = vec![0usize; parts];
    for (&inst, &part) in syn.anchor_instance().iter().zip(syn.anchor_part()) {
        assert!((0..spec.objects as i32).contains(&inst));
        // parts are numbered object by object
        assert_eq!(part as usize / spec.parts_per_object, inst as usize);
        per_part[part as usize] += 1;
    }
    assert!(per_part.iter().all(|&c| c > 0), "empty part: {per_part:?}");

    // label vectors are orthonormal
    let vectors = syn.dataset.vocabulary.vectors();
    for (i, a) in vectors.iter().enumerate() {
        for (j, b) in vectors.iter().enumerate() {
            let dot: f64 = a.iter().zip(*b).map(|(x, y)| x * y).sum();
            assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }

    for view in &syn.dataset.views {
        let gt = view.ground_truth.as_ref().unwrap();
        assert_eq!(view.mask_labels.len(), view.masks.masks.len());
        for p in 0..gt.instance.len() {
            // a part pixel always lies inside its object's instance
            if gt.part[p] >= 0 {
                assert_eq!(gt.part[p] as usize / spec.parts_per_object, gt.instance[p] as usize);
            }
            assert_eq!(gt.semantic[p] >= 0, gt.instance[p] >= 0);
        }
    }
}

#[test]
fn synthetic_spec_is_validated() {
    for bad in [
        SyntheticSpec { objects: 0, ..small_spec() },
        SyntheticSpec { language_dim: 2, ..small_spec() },
        SyntheticSpec { gap: -0.1, ..small_spec() },
        SyntheticSpec { windings: 0.0, ..small_spec() },
        SyntheticSpec { anchors: 4, ..small_spec() },
    ] {
        assert!(matches!(generate_synthetic_scene(&bad), Err(Error::Generation(_))), "{bad:?}");
    }
    // tighter spirals still give every object anchors
    let syn = generate_synthetic_scene(&SyntheticSpec { windings: 2.0, ..small_spec() }).unwrap();
    for o in 0..3 {
        assert!(syn.anchor_instance().contains(&o));
    }
}

#[test]
fn clustering_requires_stage_one() {
    let syn = generate_synthetic_scene(&small_spec()).unwrap();
    let cfg = small_config();
    assert!(matches!(run_stage2(&syn.scene, &cfg.cluster), Err(Error::StageOrder(_))));
    assert!(matches!(run_kmeans(&syn.scene, &cfg.cluster), Err(Error::StageOrder(_))));
}

#[test]
fn trained_pipeline_produces_a_valid_clustering() {
    let t = trained();
    assert_eq!(t.scene.trained_stage, 1);
    assert_eq!(t.clustering.len(), 12);
    assert_eq!(t.clustering.hard().len(), t.scene.anchors.len());
    let members: usize = t.clustering.supergs.iter().map(|s| s.members.len()).sum();
    assert_eq!(members, t.scene.anchors.len());
    assert_eq!(t.grouping.instance.len(), 12);
    assert_eq!(t.field.len(), 12);
    let m = evaluate_semantic(&t.scene, &t.syn.dataset, &t.clustering, &t.field).unwrap();
    assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.macc));
}

#[test]
fn files_round_trip() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();

    // f32 storage: a second save of the loaded scene is byte identical
    let path = dir.path().join("scene.json");
    save_scene(&t.scene, &path).unwrap();
    let scene = load_scene(&path).unwrap();
    assert_eq!(scene.trained_stage, 1);
    assert_eq!(scene.anchors.len(), t.scene.anchors.len());
    for (a, b) in scene.anchors.iter().zip(&t.scene.anchors) {
        assert!((a.position - b.position).norm() < 1e-6);
    }
    assert_eq!(scene_to_json(&scene), scene_to_json(&t.scene));

    let path = dir.path().join("cluster.json");
    save_cluster(&t.clustering, Some(&t.grouping), &path).unwrap();
    let (clustering, labels) = load_cluster(&path).unwrap();
    assert_eq!(clustering.hard(), t.clustering.hard());
    assert_eq!(labels, Some((t.grouping.instance.clone(), t.grouping.part.clone())));

    let path = dir.path().join("language.json");
    save_language(&t.field, &path).unwrap();
    let field = load_language(&path).unwrap();
    assert_eq!(field.len(), t.field.len());
    assert_eq!(field.language_dim(), t.field.language_dim());

    let path = dir.path().join("optimizer.json");
    save_optimizer(&t.optimizer, &path).unwrap();
    assert_eq!(load_optimizer(&path).unwrap(), t.optimizer);

    let data = dir.path().join("dataset");
    save_dataset(&t.syn.dataset, &data).unwrap();
    let dataset = load_dataset(&data).unwrap();
    assert_eq!(dataset.views.len(), t.syn.dataset.views.len());
    for (a, b) in dataset.views.iter().zip(&t.syn.dataset.views) {
        assert_eq!((a.id, a.camera, a.split), (b.id, b.camera, b.split));
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.mask_labels, b.mask_labels);
        assert_eq!(a.ground_truth, b.ground_truth);
    }
    assert_eq!(dataset.vocabulary.labels(), t.syn.dataset.vocabulary.labels());
}

fn session() -> Session {
    let t = trained();
    Session::new(t.scene.clone(), t.syn.dataset.clone(), t.clustering.clone(), None, Some(t.field.clone())).unwrap()
}

#[test]
fn click_selects_nested_masks() {
    let s = session();
    let t = trained();
    let view = t.syn.dataset.test_views().next().unwrap();
    let gt = view.ground_truth.as_ref().unwrap();
    let w = view.width();
    let mut clicked = 0;
    for (p, _) in gt.instance.iter().enumerate().filter(|(_, &i)| i >= 0).step_by(40) {
        let (u, v) = (p as u32 % w, p as u32 / w);
        let part = s.click(view.id, u, v, QueryMode::Part).unwrap();
        let inst = s.click(view.id, u, v, QueryMode::Instance).unwrap();
        if part.status == ClickStatus::Empty {
            continue;
        }
        clicked += 1;
        assert_eq!(inst.status, ClickStatus::Ok);
        assert!(part.selected_supergs.iter().all(|j| inst.selected_supergs.contains(j)));
        assert!(part.mask.iter().zip(&inst.mask).all(|(&a, &b)| !a || b), "part mask escapes instance mask");
        assert_eq!(mask_from_rle(&mask_rle(&inst.mask)), inst.mask);
    }
    assert!(clicked > 0);
}

#[test]
fn click_on_empty_background_selects_nothing() {
    let s = session();
    let view = trained().syn.dataset.test_views().next().unwrap();
    let geometry = s.scene.gaussian_geometry().unwrap();
    let state = rasterize(&geometry, &s.scene.cameras[view.camera]);
    let p = (0..state.pixel_count()).find(|&p| state.pixel(p).is_empty()).expect("some pixel is uncovered");
    let (u, v) = (p as u32 % view.width(), p as u32 / view.width());
    for mode in [QueryMode::Part, QueryMode::Instance] {
        let r = s.click(view.id, u, v, mode).unwrap();
        assert_eq!(r.status, ClickStatus::Empty);
        assert!(r.selected_supergs.is_empty() && r.instance.is_none());
        assert!(r.mask.iter().all(|&b| !b));
    }
    assert!(matches!(s.click(view.id, view.width(), 0, QueryMode::Part), Err(Error::Query(_))));
    assert!(matches!(s.click(9999, 0, 0, QueryMode::Part), Err(Error::Query(_))));
}

#[test]
fn text_query_masks_the_winning_instance() {
    let s = session();
    let t = trained();
    let view = t.syn.dataset.test_views().next().unwrap();
    for label in t.syn.dataset.vocabulary.labels() {
        let r = s.text(label, view.id, None).unwrap();
        let winner = r.query.winner.expect("labelled Super-Gaussians exist");
        assert!(r.query.relevancy.iter().all(|&(_, rel)| (0.0..=1.0).contains(&rel)));
        let inst: Vec<u32> = (0..t.clustering.len() as u32).filter(|&j| s.instance_labels[j as usize] == winner).collect();
        assert!(!inst.is_empty());
    }
    assert!(matches!(s.text("not-a-label", view.id, None), Err(Error::Query(_))));

    let no_language = Session::new(t.scene.clone(), t.syn.dataset.clone(), t.clustering.clone(), None, None).unwrap();
    assert!(!no_language.has_language());
    assert!(matches!(no_language.text(t.syn.labels[0].as_str(), view.id, None), Err(Error::Query(_))));
}
