//! Brute-force reference implementations, written for clarity and
//! independently of the library code paths.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use supergseg::masks::MaskSet;
use supergseg::raster::GaussianGeometry;
use supergseg::scene::Camera;
use supergseg::supergaussian::Rows;

fn cover(masks: &MaskSet, p: usize) -> Vec<u32> {
    (0..masks.masks.len()).filter(|&m| masks.masks[m][p]).map(|m| m as u32).collect()
}

/// Patch map and covering-mask sets. Two pixels share a patch iff their
/// covering sets are equal; a patch's id is the number of distinct
/// covering sets seen strictly before its first pixel.
pub fn patches(masks: &MaskSet) -> (Vec<i32>, Vec<Vec<u32>>) {
    let n = masks.pixel_count();
    let covers: Vec<Vec<u32>> = (0..n).map(|p| cover(masks, p)).collect();
    let mut map = vec![-1; n];
    let mut sets = Vec::new();
    for p in 0..n {
        if covers[p].is_empty() {
            continue;
        }
        let first = (0..n).find(|&q| covers[q] == covers[p]).unwrap();
        let mut distinct_before: Vec<&Vec<u32>> = Vec::new();
        for q in 0..first {
            if !covers[q].is_empty() && !distinct_before.contains(&&covers[q]) {
                distinct_before.push(&covers[q]);
            }
        }
        map[p] = distinct_before.len() as i32;
        if first == p {
            sets.push(covers[p].clone());
        }
    }
    (map, sets)
}

/// Number of masks covering a pixel of patch `p` and a pixel of patch `q`.
pub fn correlation(masks: &MaskSet, patch_map: &[i32], count: usize) -> Vec<Vec<u32>> {
    let rep: Vec<usize> = (0..count).map(|c| patch_map.iter().position(|&x| x == c as i32).unwrap()).collect();
    (0..count)
        .map(|p| (0..count).map(|q| masks.masks.iter().filter(|m| m[rep[p]] && m[rep[q]]).count() as u32).collect())
        .collect()
}

/// Level of `q` relative to `p` is one plus the number of distinct
/// correlation values above `corr[p][q]`; zero correlation is excluded.
pub fn levels(row: &[u32]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (q, &c) in row.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let mut above: Vec<u32> = row.iter().copied().filter(|&v| v > c).collect();
        above.sort_unstable();
        above.dedup();
        let level = above.len();
        if out.len() <= level {
            out.resize(level + 1, Vec::new());
        }
        out[level].push(q);
    }
    out
}

/// Dense association matrix `A[i][j]`, zero outside each anchor's
/// neighbour list.
pub fn dense_association(neighbors: &[u32], soft: &[f64], k: usize, n: usize, s: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; s]; n];
    for i in 0..n {
        for slot in 0..k {
            a[i][neighbors[i * k + slot] as usize] += soft[i * k + slot];
        }
    }
    a
}

/// `c_j = sum_i A_ij v_i / sum_i A_ij`, previous value when the column is
/// empty.
pub fn weighted_update(values: &Rows, a: &[Vec<f64>], previous: &Rows) -> Rows {
    let s = previous.len();
    let mut out = Rows::zeros(s, values.dim);
    for j in 0..s {
        let w: f64 = (0..values.len()).map(|i| a[i][j]).sum();
        for d in 0..values.dim {
            out.row_mut(j)[d] = if w > 0.0 {
                (0..values.len()).map(|i| a[i][j] * values.row(i)[d]).sum::<f64>() / w
            } else {
                previous.row(j)[d]
            };
        }
    }
    out
}

/// `X_j = { i : j in N_i }` in ascending anchor order.
pub fn membership(neighbors: &[u32], k: usize, s: usize) -> Vec<Vec<u32>> {
    let n = neighbors.len() / k;
    (0..s).map(|j| (0..n).filter(|&i| neighbors[i * k..(i + 1) * k].contains(&(j as u32))).map(|i| i as u32).collect()).collect()
}

pub fn compactness(positions: &Rows, centers: &Rows, sets: &[Vec<u32>]) -> f64 {
    let s = centers.len();
    let mut total = 0.0;
    for (j, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let mean: f64 = set
            .iter()
            .map(|&i| {
                let p = positions.row(i as usize);
                let c = centers.row(j);
                (0..3).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / set.len() as f64;
        total += mean;
    }
    total / s as f64
}

/// One projected splat of the naive rasterizer.
struct NaiveSplat {
    index: usize,
    depth: f64,
    center: Vector2<f64>,
    inverse: Matrix2<f64>,
    opacity: f64,
}

/// Per pixel, every Gaussian in depth order (ties by index) evaluated with
/// the EWA footprint; contributions below 1/255 are skipped and blending
/// stops when transmittance falls under 1e-4. Returns per-pixel
/// `(gaussian, weight)` lists and the remaining transmittance.
pub fn naive_rasterize(geometry: &[GaussianGeometry], cam: &Camera) -> (Vec<Vec<(u32, f64)>>, Vec<f64>) {
    let mut splats: Vec<NaiveSplat> = Vec::new();
    for (index, g) in geometry.iter().enumerate() {
        let p = cam.rotation * g.mean + cam.translation;
        if p.z <= 0.01 || g.opacity < 1.0 / 255.0 {
            continue;
        }
        let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / (p.z * p.z), 0.0, cam.fy / p.z, -cam.fy * p.y / (p.z * p.z));
        let t = j * cam.rotation;
        let cov = t * g.covariance * t.transpose();
        let sym = Matrix2::new(cov[(0, 0)] + 0.3, 0.5 * (cov[(0, 1)] + cov[(1, 0)]), 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)] + 0.3);
        let Some(inverse) = sym.try_inverse() else { continue };
        if !(sym.determinant() > 0.0) {
            continue;
        }
        splats.push(NaiveSplat {
            index,
            depth: p.z,
            center: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
            inverse,
            opacity: g.opacity,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut lists = Vec::with_capacity(w * h);
    let mut trans = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut list = Vec::new();
            for s in &splats {
                let d = px - s.center;
                let m = (d.transpose() * s.inverse * d)[(0, 0)].max(0.0);
                let alpha = s.opacity * (-0.5 * m).exp();
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                list.push((s.index as u32, t * alpha));
                t *= 1.0 - alpha;
                if t < 1e-4 {
                    break;
                }
            }
            lists.push(list);
            trans.push(t);
        }
    }
    (lists, trans)
}

/// Mean IoU and accuracy over classes present in `gt`, by direct counting.
pub fn miou_macc(pred: &[i32], gt: &[i32], classes: usize) -> (f64, f64) {
    let mut ious = Vec::new();
    let mut accs = Vec::new();
    for c in 0..classes as i32 {
        let in_gt = gt.iter().filter(|&&g| g == c).count();
        if in_gt == 0 {
            continue;
        }
        let both = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let either = pred.iter().zip(gt).filter(|(&p, &g)| g >= 0 && (p == c || g == c)).count();
        ious.push(both as f64 / either as f64);
        accs.push(both as f64 / in_gt as f64);
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, accs.iter().sum::<f64>() / accs.len() as f64)
}
