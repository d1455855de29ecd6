//! Library operations against the brute-force oracles on random small
//! cases: integer results must match exactly, float results within 1e-6.

use rand::Rng;

use supergseg::evaluation::miou_macc;
use supergseg::masks::{correlation_matrix, decompose_to_patches, level_sets};
use supergseg::raster::{rasterize, rasterize_with_tile, ChannelValues};
use supergseg::supergaussian::{compactness_loss, knn, neighbor_sets, update_supergs, AnchorAttributes, Centers};

use super::fixtures::{camera, random_geometry, random_masks, rng, rows};
use super::{oracles, Check};

pub const CASES: usize = 100;
pub const FLOAT_TOL: f64 = 1e-6;

fn close(check: &mut Check, tag: &str, a: f64, b: f64) {
    let err = (a - b).abs();
    check.observe(err);
    if !(err <= FLOAT_TOL) {
        check.fail(format!("{tag}: {a} vs oracle {b}"));
    }
}

fn masks_case(seed: u64, checks: &mut [Check]) {
    let mut rng = rng(5000 + seed);
    let (w, h) = (rng.random_range(3..13), rng.random_range(3..13));
    let masks = random_masks(&mut rng, w, h);
    let (map, sets) = oracles::patches(&masks);
    let patches = decompose_to_patches(&masks).unwrap();

    let c = &mut checks[0];
    c.cases += 1;
    if patches.patch_map != map || patches.masksets != sets {
        c.fail(format!("case {seed}: patch decomposition differs"));
    }

    let c = &mut checks[1];
    c.cases += 1;
    let corr = correlation_matrix(&patches.masksets);
    let expected = oracles::correlation(&masks, &map, sets.len());
    for (p, row) in expected.iter().enumerate() {
        if corr.row(p) != row.as_slice() {
            c.fail(format!("case {seed}: correlation row {p} {:?} vs {row:?}", corr.row(p)));
        }
    }

    let c = &mut checks[2];
    c.cases += 1;
    for (p, row) in expected.iter().enumerate() {
        let got = level_sets(p, &corr);
        let want = oracles::levels(row);
        if got != want {
            c.fail(format!("case {seed}: levels of patch {p} {got:?} vs {want:?}"));
        }
    }
}

fn cluster_case(seed: u64, checks: &mut [Check]) {
    let mut rng = rng(6000 + seed);
    let n = rng.random_range(4..40);
    let s = rng.random_range(1..=n.min(12));
    let k = rng.random_range(1..=s.min(4));
    let fdim = rng.random_range(1..6);
    let attrs = AnchorAttributes { positions: rows(&mut rng, n, 3), segmentation: rows(&mut rng, n, fdim), geometry: rows(&mut rng, n, fdim) };
    // with k < s some Super-Gaussians end up in no neighbour list
    let previous = Centers { positions: rows(&mut rng, s, 3), segmentation: rows(&mut rng, s, fdim), geometry: rows(&mut rng, s, fdim) };
    let neighbors = knn(&attrs.positions, &previous.positions, k).unwrap();
    let mut soft = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let z: f64 = row.iter().sum::<f64>().max(1e-12);
        soft.extend(row.iter().map(|x| x / z));
    }

    let c = &mut checks[3];
    c.cases += 1;
    let update = update_supergs(&attrs, &neighbors, &soft, k, &previous);
    let dense = oracles::dense_association(&neighbors, &soft, k, n, s);
    for (got, values, prev) in [
        (&update.centers.positions, &attrs.positions, &previous.positions),
        (&update.centers.segmentation, &attrs.segmentation, &previous.segmentation),
        (&update.centers.geometry, &attrs.geometry, &previous.geometry),
    ] {
        let want = oracles::weighted_update(values, &dense, prev);
        for (a, b) in got.data.iter().zip(&want.data) {
            close(c, &format!("case {seed} update"), *a, *b);
        }
    }
    for j in 0..s {
        let w: f64 = dense.iter().map(|r| r[j]).sum();
        if update.orphan[j] != !(w > 0.0) {
            c.fail(format!("case {seed}: orphan flag of {j}"));
        }
    }

    let c = &mut checks[4];
    c.cases += 1;
    let want = oracles::membership(&neighbors, k, s);
    if neighbor_sets(&neighbors, k, s) != want {
        c.fail(format!("case {seed}: neighbour sets differ"));
    }
    let (value, _) = compactness_loss(&attrs.positions, &previous.positions, &neighbors, k);
    close(c, &format!("case {seed} compactness"), value, oracles::compactness(&attrs.positions, &previous.positions, &want));
}

fn raster_case(seed: u64, checks: &mut [Check]) {
    let mut rng = rng(7000 + seed);
    let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
    let cam = camera(w, h);
    let count = rng.random_range(1..50);
    let geometry = random_geometry(&mut rng, count);
    let (lists, trans) = oracles::naive_rasterize(&geometry, &cam);
    let values = ChannelValues { channels: 3, data: (0..count * 3).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let c = &mut checks[5];
    c.cases += 1;
    for state in [rasterize(&geometry, &cam), rasterize_with_tile(&geometry, &cam, rng.random_range(1..9))] {
        for p in 0..state.pixel_count() {
            let got = state.pixel(p);
            if got.len() != lists[p].len() || got.iter().zip(&lists[p]).any(|(a, b)| a.gaussian != b.0) {
                c.fail(format!("case {seed} pixel {p}: contributors differ"));
                continue;
            }
            for (a, b) in got.iter().zip(&lists[p]) {
                close(c, &format!("case {seed} pixel {p} weight"), a.weight, b.1);
            }
            close(c, &format!("case {seed} pixel {p} transmittance"), state.remaining_transmittance(p), trans[p]);
        }
        let img = state.composite(&values).unwrap();
        for p in 0..state.pixel_count() {
            for ch in 0..3 {
                let want: f64 = lists[p].iter().map(|(g, wgt)| wgt * values.row(*g as usize)[ch]).sum();
                close(c, &format!("case {seed} pixel {p} color"), img.pixel(p)[ch], want);
            }
        }
    }
}

fn metric_case(seed: u64, checks: &mut [Check]) {
    let mut rng = rng(8000 + seed);
    let classes = rng.random_range(1..6);
    let n = rng.random_range(1..200);
    let gt: Vec<i32> = (0..n).map(|_| rng.random_range(-1..classes as i32)).collect();
    let mut gt = gt;
    gt[0] = rng.random_range(0..classes as i32);
    let pred: Vec<i32> = gt
        .iter()
        .map(|&g| if g >= 0 && rng.random_bool(0.6) { g } else { rng.random_range(-1..classes as i32) })
        .collect();
    let c = &mut checks[6];
    c.cases += 1;
    let r = miou_macc(&pred, &gt, classes).unwrap();
    let (miou, macc) = oracles::miou_macc(&pred, &gt, classes);
    close(c, &format!("case {seed} miou"), r.miou, miou);
    close(c, &format!("case {seed} macc"), r.macc, macc);
}

pub fn run(cases: usize) -> Vec<Check> {
    let mut checks = vec![
        Check::new("patch decomposition"),
        Check::new("correlation matrix"),
        Check::new("level sets"),
        Check::new("weighted center update"),
        Check::new("compactness membership"),
        Check::new("rasterizer vs naive"),
        Check::new("mIoU / mAcc"),
    ];
    for seed in 0..cases as u64 {
        masks_case(seed, &mut checks);
        cluster_case(seed, &mut checks);
        raster_case(seed, &mut checks);
        metric_case(seed, &mut checks);
    }
    checks
}
