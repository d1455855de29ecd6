//! Structural invariants checked with proptest's runner over seeded random
//! inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};
use rand::Rng;

use supergseg::adam::lr_schedule;
use supergseg::language::{semantic_map, text_query_3d, EmbeddingVocabulary};
use supergseg::masks::PatchDecomposition;
use supergseg::raster::{rasterize, FeatureImage};
use supergseg::supergaussian::{associate, harden, knn, AnchorAttributes, AssociationNets, Centers};

use super::fixtures::{camera, normal, random_geometry, random_masks, rng, rows};
use super::Check;

pub const CASES: u32 = 64;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn record<T: std::fmt::Debug>(check: &mut Check, cases: u32, result: Result<(), TestError<T>>) {
    check.cases = cases as usize;
    if let Err(e) = result {
        check.fail(e.to_string());
    }
}

fn softmax_rows(cases: u32) -> Check {
    let mut check = Check::new("association softmax rows");
    let result = runner(cases).run(&(any::<u64>(), 2usize..30, any::<bool>()), |(seed, n, use_seg)| {
        let mut rng = rng(seed);
        let s = rng.random_range(1..=n.min(8));
        let k = rng.random_range(1..=s.min(4));
        let fdim = 4;
        let attrs = AnchorAttributes { positions: rows(&mut rng, n, 3), segmentation: rows(&mut rng, n, fdim), geometry: rows(&mut rng, n, fdim) };
        let centers = Centers { positions: rows(&mut rng, s, 3), segmentation: rows(&mut rng, s, fdim), geometry: rows(&mut rng, s, fdim) };
        let mut nets = AssociationNets::new(fdim, 8, &mut rng);
        nets.head.init_random(&mut rng);
        nets.head.params_mut().iter_mut().for_each(|x| *x *= 20.0);
        let neighbors = knn(&attrs.positions, &centers.positions, k).unwrap();
        let soft = associate(&attrs, &centers, &nets, &neighbors, k, use_seg).unwrap();
        for row in soft.chunks_exact(k) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sums to {}", sum);
            prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

fn blend_conservation(cases: u32) -> Check {
    let mut check = Check::new("blend weight conservation");
    let result = runner(cases).run(&(any::<u64>(), 1usize..60, 2u32..24), |(seed, count, side)| {
        let mut rng = rng(seed);
        let geometry = random_geometry(&mut rng, count);
        let state = rasterize(&geometry, &camera(side, side));
        for p in 0..state.pixel_count() {
            let t = state.remaining_transmittance(p);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!(state.pixel(p).iter().all(|c| c.weight >= 0.0));
            let total: f64 = state.pixel(p).iter().map(|c| c.weight).sum::<f64>() + t;
            prop_assert!((total - 1.0).abs() <= 1e-12, "pixel {} weights plus transmittance {}", p, total);
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

fn partition(cases: u32) -> Check {
    let mut check = Check::new("patch partition / refinement");
    let result = runner(cases).run(&(any::<u64>(), 2u32..14, 2u32..14), |(seed, w, h)| {
        let mut rng = rng(seed);
        let masks = random_masks(&mut rng, w, h);
        let d = PatchDecomposition::build(&masks).unwrap();
        let n = masks.pixel_count();
        for p in 0..n {
            let covered = masks.masks.iter().any(|m| m[p]);
            prop_assert_eq!(covered, d.patch_map[p] >= 0);
            if covered {
                // refinement: the patch's covering set is exactly the masks on p
                let set = &d.patch_masksets[d.patch_map[p] as usize];
                let on: Vec<u32> = (0..masks.masks.len() as u32).filter(|&m| masks.masks[m as usize][p]).collect();
                prop_assert_eq!(set, &on);
                // instance masks: the chosen mask covers the pixel
                let inst = d.instance_map[p];
                prop_assert!(inst >= 0);
                prop_assert!(masks.masks[d.instance_masks[inst as usize]][p]);
                prop_assert_eq!(inst as usize, d.patch_instance[d.patch_map[p] as usize]);
            } else {
                prop_assert_eq!(d.instance_map[p], -1);
            }
        }
        // every patch is non-empty and covering sets are distinct
        for (i, set) in d.patch_masksets.iter().enumerate() {
            prop_assert!(d.patch_map.contains(&(i as i32)));
            prop_assert!(!d.patch_masksets[..i].contains(set));
        }
        // levels partition the correlated patches and start with p itself
        for p in 0..d.patch_count() {
            let mut seen: Vec<usize> = d.levels[p].iter().flatten().copied().collect();
            prop_assert!(d.levels[p][0].contains(&p));
            seen.sort_unstable();
            let want: Vec<usize> = (0..d.patch_count()).filter(|&q| d.correlation.get(p, q) > 0).collect();
            prop_assert_eq!(seen, want);
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

fn argmax_ties(cases: u32) -> Check {
    let mut check = Check::new("argmax and tie rules");
    let result = runner(cases).run(&(any::<u64>(), 1usize..20, 1usize..5), |(seed, n, k)| {
        let mut rng = rng(seed);
        let s = k + rng.random_range(0..4);
        let mut neighbors = Vec::with_capacity(n * k);
        let mut soft = Vec::with_capacity(n * k);
        for _ in 0..n {
            let mut ids: Vec<u32> = (0..s as u32).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.random_range(0..=i));
            }
            neighbors.extend(&ids[..k]);
            // coarse values make ties common
            soft.extend((0..k).map(|_| rng.random_range(0..3) as f64 / 4.0));
        }
        let hard = harden(&neighbors, &soft, k);
        for i in 0..n {
            let row = &soft[i * k..(i + 1) * k];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let want = (0..k).filter(|&a| row[a] == best).map(|a| neighbors[i * k + a]).min().unwrap();
            prop_assert_eq!(hard[i], want);
        }

        // semantic labels: highest cosine, ties to the lower class, zero
        // features unlabeled
        let dim = 3;
        let mut entries = BTreeMap::new();
        entries.insert("a".to_string(), vec![1.0, 0.0, 0.0]);
        entries.insert("b".to_string(), vec![0.0, 1.0, 0.0]);
        entries.insert("c".to_string(), vec![0.0, 0.0, 1.0]);
        let vocab = EmbeddingVocabulary::new(dim, entries).unwrap();
        let mut map = FeatureImage::zeros(n as u32, 1, dim);
        for x in map.data.iter_mut() {
            *x = rng.random_range(0..3) as f64;
        }
        let labels = semantic_map(&vocab, &map).unwrap();
        for p in 0..n {
            let f = map.pixel(p);
            if f.iter().all(|&x| x == 0.0) {
                prop_assert_eq!(labels[p], -1);
            } else {
                let best = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(labels[p], f.iter().position(|&x| x == best).unwrap() as i32);
            }
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

fn voting_bounds(cases: u32) -> Check {
    let mut check = Check::new("voting relevancy bounds");
    let result = runner(cases).run(&(any::<u64>(), 1usize..40, 1usize..10), |(seed, s, top_m)| {
        let mut rng = rng(seed);
        let dim = 4;
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let features: Vec<Vec<f64>> = (0..s).map(|_| unit((0..dim).map(|_| normal(&mut rng)).collect())).collect();
        let mut eligible: Vec<bool> = (0..s).map(|_| rng.random_bool(0.8)).collect();
        eligible[0] = true;
        let labels: Vec<i32> = (0..s).map(|_| rng.random_range(-1..4)).collect();
        let query = unit((0..dim).map(|_| normal(&mut rng)).collect());
        let r = text_query_3d(&query, &features, &eligible, &labels, top_m).unwrap();
        let eligible_count = eligible.iter().filter(|&&e| e).count();
        prop_assert_eq!(r.selected.len(), top_m.min(eligible_count));
        prop_assert!(r.selected.iter().all(|&j| eligible[j as usize]));
        let mut voted = 0.0;
        for &(l, rel) in &r.relevancy {
            prop_assert!((0.0..=1.0).contains(&rel));
            let total = (0..s).filter(|&j| eligible[j] && labels[j] == l).count();
            voted += rel * total as f64;
        }
        let labelled = r.selected.iter().filter(|&&j| labels[j as usize] >= 0).count();
        prop_assert!((voted - labelled as f64).abs() < 1e-9);
        let best = r.relevancy.iter().map(|x| x.1).fold(0.0, f64::max);
        match r.winner {
            Some(w) => prop_assert_eq!(r.relevancy.iter().find(|x| x.0 == w).unwrap().1, best),
            None => prop_assert_eq!(best, 0.0),
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

fn lr_endpoints(cases: u32) -> Check {
    let mut check = Check::new("learning-rate schedule");
    let result = runner(cases).run(&(1usize..5000), |total| {
        prop_assert_eq!(lr_schedule(0, total, 0.01, 0.001), 0.01);
        prop_assert!((lr_schedule(total, total, 0.01, 0.001) - 0.001).abs() <= 1e-15);
        let mut last = f64::INFINITY;
        for step in (0..=total).step_by((total / 50).max(1)) {
            let lr = lr_schedule(step, total, 0.01, 0.001);
            prop_assert!(lr <= last && (0.001 - 1e-15..=0.01).contains(&lr));
            last = lr;
        }
        if total % 2 == 0 {
            prop_assert!((lr_schedule(total / 2, total, 0.01, 0.001) - (0.01f64 * 0.001).sqrt()).abs() <= 1e-15);
        }
        Ok(())
    });
    record(&mut check, cases, result);
    check
}

pub fn run(cases: u32) -> Vec<Check> {
    vec![softmax_rows(cases), blend_conservation(cases), partition(cases), argmax_ties(cases), voting_bounds(cases), lr_endpoints(cases)]
}
