//! Stage 2: Super-Gaussians. Anchors are softly associated with their
//! `k_nn` nearest Super-Gaussians by a learned relevancy network, centers
//! follow the association-weighted mean of their anchors, and the network is
//! trained on reconstruction and compactness losses. Also hosts the graph
//! grouping into instances and parts, click queries and the KMeans baseline.

use nalgebra::Vector3;
use petgraph::unionfind::UnionFind;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{lr_schedule, OptimizerState, ParamGroup};
use crate::codec::{self, parse_json};
use crate::error::{Error, Result};
use crate::mlp::{MlpTrace, TinyMlp};
use crate::raster::{BlendState, FeatureImage};
use crate::scene::{MlpDoc, Scene};

/// Width of each relevancy embedding.
pub const EMBEDDING_DIM: usize = 16;
/// Loss level treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Neighbours per node in the grouping graphs.
pub const GRAPH_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Number of Super-Gaussians.
    pub s: usize,
    pub k_nn: usize,
    pub iterations: usize,
    pub knn_refresh_period: usize,
    pub w_recon: f64,
    pub w_compact: f64,
    pub tau_ins: f64,
    pub tau_hier: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Feed segmentation-feature differences to the association network and
    /// reconstruct them. Off for the coordinates-only ablation.
    pub use_segmentation: bool,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            s: 1000,
            k_nn: 3,
            iterations: 1000,
            knn_refresh_period: 100,
            w_recon: 1.0,
            w_compact: 1.0,
            tau_ins: 0.8,
            tau_hier: 0.9,
            lr_initial: 0.01,
            lr_final: 0.001,
            use_segmentation: true,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 || self.s < self.k_nn {
            return Err(Error::Config(format!("need s >= k_nn >= 1 (s = {}, k_nn = {})", self.s, self.k_nn)));
        }
        for (name, t) in [("tau_ins", self.tau_ins), ("tau_hier", self.tau_hier)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        if self.knn_refresh_period == 0 {
            return Err(Error::Config("knn_refresh_period must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major table of per-item vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Rows {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Rows {
    pub fn zeros(count: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; count * dim] }
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut data = Vec::new();
        for r in rows {
            debug_assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Frozen per-anchor attributes used for clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAttributes {
    pub positions: Rows,
    pub segmentation: Rows,
    pub geometry: Rows,
}

impl AnchorAttributes {
    pub fn from_scene(scene: &Scene) -> Self {
        let fdim = scene.config.anchor_feature_dim;
        Self {
            positions: Rows::from_rows(3, scene.anchors.iter().map(|a| a.position.as_slice())),
            segmentation: Rows::from_rows(fdim, scene.anchors.iter().map(|a| a.segmentation.as_slice())),
            geometry: Rows::from_rows(fdim, scene.anchors.iter().map(|a| a.geometry.as_slice())),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Super-Gaussian centers: position and mean features.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers {
    pub positions: Rows,
    pub segmentation: Rows,
    pub geometry: Rows,
}

impl Centers {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Centers placed on the given anchors.
    pub fn from_anchors(attrs: &AnchorAttributes, indices: &[usize]) -> Self {
        let pick = |t: &Rows| Rows::from_rows(t.dim, indices.iter().map(|&i| t.row(i)));
        Self { positions: pick(&attrs.positions), segmentation: pick(&attrs.segmentation), geometry: pick(&attrs.geometry) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperGaussian {
    pub id: u32,
    pub position: Vector3<f64>,
    pub segmentation: Vec<f64>,
    pub geometry: Vec<f64>,
    pub members: Vec<u32>,
    /// No anchor had this Super-Gaussian among its neighbours in the last
    /// update.
    pub orphan: bool,
}

/// Soft and hard anchor-to-Super-Gaussian association.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMap {
    pub k_nn: usize,
    /// `neighbors[i * k_nn + a]`, nearest first.
    pub neighbors: Vec<u32>,
    pub soft: Vec<f64>,
    pub hard: Vec<u32>,
}

impl AssociationMap {
    pub fn anchor_count(&self) -> usize {
        self.neighbors.len() / self.k_nn.max(1)
    }

    pub fn neighbors_of(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k_nn..(i + 1) * self.k_nn]
    }

    pub fn soft_row(&self, i: usize) -> &[f64] {
        &self.soft[i * self.k_nn..(i + 1) * self.k_nn]
    }
}

/// Greedy farthest point sampling starting from a seeded random index.
pub fn farthest_point_sample(positions: &Rows, s: usize, seed: u64) -> Result<Vec<usize>> {
    let n = positions.len();
    if s > n {
        return Err(Error::Config(format!("cannot sample {s} points from {n}")));
    }
    if s == 0 {
        return Ok(Vec::new());
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    farthest_point_sample_from(positions, s, first)
}

/// Greedy farthest point sampling from a given first index; ties go to the
/// lowest index.
pub fn farthest_point_sample_from(positions: &Rows, s: usize, first: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if s > n {
        return Err(Error::Config(format!("cannot sample {s} points from {n}")));
    }
    if first >= n {
        return Err(Error::Config(format!("first index {first} out of range")));
    }
    let mut chosen = Vec::with_capacity(s);
    let mut dist = vec![f64::INFINITY; n];
    let mut next = first;
    while chosen.len() < s {
        chosen.push(next);
        let p = positions.row(next);
        for (i, d) in dist.iter_mut().enumerate() {
            let q = positions.row(i);
            let dd = (0..positions.dim).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            if dd < *d {
                *d = dd;
            }
        }
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in dist.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        next = best;
    }
    Ok(chosen)
}

/// The `k` nearest centers of every query point, nearest first; ties go to
/// the lower center id.
pub fn knn(queries: &Rows, centers: &Rows, k: usize) -> Result<Vec<u32>> {
    if k > centers.len() {
        return Err(Error::Config(format!("k_nn = {k} exceeds {} centers", centers.len())));
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(centers.len());
    for i in 0..queries.len() {
        let q = queries.row(i);
        scratch.clear();
        for j in 0..centers.len() {
            let c = centers.row(j);
            let d = q.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            scratch.push((d, j as u32));
        }
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_by(cmp);
        out.extend(head.iter().map(|x| x.1));
    }
    Ok(out)
}

/// The four association MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationNets {
    pub position: TinyMlp,
    pub segmentation: TinyMlp,
    pub geometry: TinyMlp,
    pub head: TinyMlp,
}

impl AssociationNets {
    pub const NAMES: [&'static str; 4] = ["assoc_position", "assoc_segmentation", "assoc_geometry", "assoc_head"];

    /// He-initialised embedding nets and a head whose output layer is zero,
    /// so the initial association is uniform.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut nets = Self {
            position: TinyMlp::with_hidden(3, hidden, EMBEDDING_DIM),
            segmentation: TinyMlp::with_hidden(feature_dim, hidden, EMBEDDING_DIM),
            geometry: TinyMlp::with_hidden(feature_dim, hidden, EMBEDDING_DIM),
            head: TinyMlp::with_hidden(3 * EMBEDDING_DIM, hidden, 1),
        };
        for m in nets.iter_mut() {
            m.init_random(rng);
        }
        let last = nets.head.layer_count() - 1;
        let (w, _) = nets.head.layer_offsets(last);
        nets.head.params_mut()[w..].iter_mut().for_each(|x| *x = 0.0);
        nets
    }

    pub fn iter(&self) -> impl Iterator<Item = &TinyMlp> {
        [&self.position, &self.segmentation, &self.geometry, &self.head].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut TinyMlp> {
        [&mut self.position, &mut self.segmentation, &mut self.geometry, &mut self.head].into_iter()
    }
}

/// Gradients for the four association MLPs, in [`AssociationNets::NAMES`]
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub position: Vec<f64>,
    pub segmentation: Vec<f64>,
    pub geometry: Vec<f64>,
    pub head: Vec<f64>,
}

impl NetGrads {
    fn zeros(nets: &AssociationNets) -> Self {
        Self {
            position: vec![0.0; nets.position.param_count()],
            segmentation: vec![0.0; nets.segmentation.param_count()],
            geometry: vec![0.0; nets.geometry.param_count()],
            head: vec![0.0; nets.head.param_count()],
        }
    }
}

struct PairTrace {
    position: MlpTrace,
    segmentation: Option<MlpTrace>,
    geometry: MlpTrace,
    head: MlpTrace,
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}

fn associate_traced(
    attrs: &AnchorAttributes,
    centers: &Centers,
    nets: &AssociationNets,
    neighbors: &[u32],
    k: usize,
    use_segmentation: bool,
) -> Result<(Vec<f64>, Vec<PairTrace>)> {
    let n = attrs.len();
    let mut soft = vec![0.0; n * k];
    let mut traces = Vec::with_capacity(n * k);
    let mut input = vec![0.0; 3 * EMBEDDING_DIM];
    for i in 0..n {
        for a in 0..k {
            let j = neighbors[i * k + a] as usize;
            let position = nets.position.forward_trace(&diff(attrs.positions.row(i), centers.positions.row(j)))?;
            let segmentation = if use_segmentation {
                Some(nets.segmentation.forward_trace(&diff(attrs.segmentation.row(i), centers.segmentation.row(j)))?)
            } else {
                None
            };
            let geometry = nets.geometry.forward_trace(&diff(attrs.geometry.row(i), centers.geometry.row(j)))?;
            input[..EMBEDDING_DIM].copy_from_slice(position.output());
            match &segmentation {
                Some(t) => input[EMBEDDING_DIM..2 * EMBEDDING_DIM].copy_from_slice(t.output()),
                None => input[EMBEDDING_DIM..2 * EMBEDDING_DIM].iter_mut().for_each(|x| *x = 0.0),
            }
            input[2 * EMBEDDING_DIM..].copy_from_slice(geometry.output());
            let head = nets.head.forward_trace(&input)?;
            soft[i * k + a] = head.output()[0];
            traces.push(PairTrace { position, segmentation, geometry, head });
        }
        softmax_in_place(&mut soft[i * k..(i + 1) * k]);
    }
    Ok((soft, traces))
}

/// Soft association of every anchor with its neighbour Super-Gaussians.
pub fn associate(
    attrs: &AnchorAttributes,
    centers: &Centers,
    nets: &AssociationNets,
    neighbors: &[u32],
    k: usize,
    use_segmentation: bool,
) -> Result<Vec<f64>> {
    if k == 0 || neighbors.len() != attrs.len() * k {
        return Err(Error::Config("neighbor table does not match k_nn".into()));
    }
    if k > centers.len() {
        return Err(Error::Config(format!("k_nn = {k} exceeds {} Super-Gaussians", centers.len())));
    }
    associate_traced(attrs, centers, nets, neighbors, k, use_segmentation).map(|(s, _)| s)
}

/// Result of the association-weighted center update.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterUpdate {
    pub centers: Centers,
    /// Total incoming association weight per Super-Gaussian.
    pub weights: Vec<f64>,
    pub orphan: Vec<bool>,
}

fn weighted_mean(values: &Rows, neighbors: &[u32], soft: &[f64], k: usize, weights: &[f64], previous: &Rows) -> Rows {
    let mut out = Rows::zeros(previous.len(), values.dim);
    for i in 0..values.len() {
        let v = values.row(i);
        for a in 0..k {
            let j = neighbors[i * k + a] as usize;
            let w = soft[i * k + a];
            out.row_mut(j).iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
    }
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            out.row_mut(j).iter_mut().for_each(|x| *x /= w);
        } else {
            out.row_mut(j).copy_from_slice(previous.row(j));
        }
    }
    out
}

/// Association-weighted mean of the anchors listing each Super-Gaussian
/// as a neighbour. Super-Gaussians with no incoming weight keep their
/// previous attributes and are flagged orphaned.
pub fn update_supergs(attrs: &AnchorAttributes, neighbors: &[u32], soft: &[f64], k: usize, previous: &Centers) -> CenterUpdate {
    let s = previous.len();
    let mut weights = vec![0.0; s];
    for (idx, &j) in neighbors.iter().enumerate() {
        weights[j as usize] += soft[idx];
    }
    let centers = Centers {
        positions: weighted_mean(&attrs.positions, neighbors, soft, k, &weights, &previous.positions),
        segmentation: weighted_mean(&attrs.segmentation, neighbors, soft, k, &weights, &previous.segmentation),
        geometry: weighted_mean(&attrs.geometry, neighbors, soft, k, &weights, &previous.geometry),
    };
    let orphan = weights.iter().map(|w| !(*w > 0.0)).collect();
    CenterUpdate { centers, weights, orphan }
}

/// `(1/N) sum_i |v_i - sum_a A_ia c_{N_i(a)}|`, with gradients with respect
/// to the soft association (centers held fixed) and to the centers.
pub fn reconstruction_loss(values: &Rows, centers: &Rows, neighbors: &[u32], soft: &[f64], k: usize) -> (f64, Vec<f64>, Rows) {
    let n = values.len();
    let mut d_soft = vec![0.0; soft.len()];
    let mut d_centers = Rows::zeros(centers.len(), centers.dim);
    if n == 0 {
        return (0.0, d_soft, d_centers);
    }
    let mut loss = 0.0;
    let mut r = vec![0.0; values.dim];
    for i in 0..n {
        r.copy_from_slice(values.row(i));
        for a in 0..k {
            let j = neighbors[i * k + a] as usize;
            let w = soft[i * k + a];
            r.iter_mut().zip(centers.row(j)).for_each(|(x, c)| *x -= w * c);
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        loss += norm;
        if norm == 0.0 {
            continue;
        }
        let scale = 1.0 / (n as f64 * norm);
        for a in 0..k {
            let j = neighbors[i * k + a] as usize;
            let w = soft[i * k + a];
            let c = centers.row(j);
            d_soft[i * k + a] -= scale * r.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
            d_centers.row_mut(j).iter_mut().zip(&r).for_each(|(d, x)| *d -= w * scale * x);
        }
    }
    (loss / n as f64, d_soft, d_centers)
}

/// Anchors listing each Super-Gaussian among their neighbours.
pub fn neighbor_sets(neighbors: &[u32], k: usize, s: usize) -> Vec<Vec<u32>> {
    let mut sets = vec![Vec::new(); s];
    for (idx, &j) in neighbors.iter().enumerate() {
        sets[j as usize].push((idx / k) as u32);
    }
    sets
}

/// `(1/S) sum_j mean_{i in X_j} |x_i - c_j|` over the neighbour sets `X_j`;
/// empty sets contribute zero. Returns the gradient with respect to the
/// centers.
pub fn compactness_loss(positions: &Rows, centers: &Rows, neighbors: &[u32], k: usize) -> (f64, Rows) {
    let s = centers.len();
    let mut d_centers = Rows::zeros(s, centers.dim);
    if s == 0 {
        return (0.0, d_centers);
    }
    let sets = neighbor_sets(neighbors, k, s);
    let mut loss = 0.0;
    for (j, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let c = centers.row(j).to_vec();
        let scale = 1.0 / (s as f64 * set.len() as f64);
        for &i in set {
            let d = diff(positions.row(i as usize), &c);
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            loss += scale * norm;
            if norm > 0.0 {
                d_centers.row_mut(j).iter_mut().zip(&d).for_each(|(g, x)| *g -= scale * x / norm);
            }
        }
    }
    (loss, d_centers)
}

/// Chains center gradients through the weighted-mean update into the soft
/// association: `dc_j/dA_ij = (v_i - c_j) / W_j`.
pub fn update_backward(values: &Rows, update_centers: &Rows, weights: &[f64], neighbors: &[u32], k: usize, d_centers: &Rows, d_soft: &mut [f64]) {
    for i in 0..values.len() {
        let v = values.row(i);
        for a in 0..k {
            let j = neighbors[i * k + a] as usize;
            if !(weights[j] > 0.0) {
                continue;
            }
            let c = update_centers.row(j);
            let g = d_centers.row(j);
            d_soft[i * k + a] += v.iter().zip(c).zip(g).map(|((x, y), gg)| (x - y) * gg).sum::<f64>() / weights[j];
        }
    }
}

/// Loss breakdown of one stage-2 evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub recon_position: f64,
    pub recon_segmentation: f64,
    pub recon_geometry: f64,
    pub compact: f64,
    pub total: f64,
}

/// Stage-2 loss as a function of the soft association, with its gradient
/// with respect to that association (including the path through the
/// center update).
pub fn stage2_loss(attrs: &AnchorAttributes, previous: &Centers, neighbors: &[u32], soft: &[f64], cfg: &ClusterConfig) -> (Stage2Loss, Vec<f64>, CenterUpdate) {
    let k = cfg.k_nn;
    let update = update_supergs(attrs, neighbors, soft, k, previous);
    let c = &update.centers;

    let mut d_soft = vec![0.0; soft.len()];
    let mut loss = Stage2Loss::default();
    // each term adds its direct gradient (centers held fixed) and the
    // gradient routed back through the center update
    let term = |values: &Rows, centers: &Rows, extra: Option<(&Rows, f64)>, d_soft: &mut [f64]| -> f64 {
        let (l, ds, mut dc) = reconstruction_loss(values, centers, neighbors, soft, k);
        d_soft.iter_mut().zip(&ds).for_each(|(a, b)| *a += cfg.w_recon * b);
        dc.data.iter_mut().for_each(|x| *x *= cfg.w_recon);
        if let Some((e, w)) = extra {
            dc.data.iter_mut().zip(&e.data).for_each(|(a, b)| *a += w * b);
        }
        update_backward(values, centers, &update.weights, neighbors, k, &dc, d_soft);
        l
    };
    let (compact, d_compact) = compactness_loss(&attrs.positions, &c.positions, neighbors, k);
    loss.recon_position = term(&attrs.positions, &c.positions, Some((&d_compact, cfg.w_compact)), &mut d_soft);
    if cfg.use_segmentation {
        loss.recon_segmentation = term(&attrs.segmentation, &c.segmentation, None, &mut d_soft);
    }
    loss.recon_geometry = term(&attrs.geometry, &c.geometry, None, &mut d_soft);
    loss.compact = compact;
    loss.total = cfg.w_recon * (loss.recon_position + loss.recon_segmentation + loss.recon_geometry) + cfg.w_compact * compact;
    (loss, d_soft, update)
}

/// Associates, updates the centers and evaluates the stage-2 loss together
/// with its gradient with respect to the association nets.
pub fn stage2_objective(
    attrs: &AnchorAttributes,
    previous: &Centers,
    nets: &AssociationNets,
    neighbors: &[u32],
    cfg: &ClusterConfig,
) -> Result<(Stage2Loss, NetGrads, Vec<f64>, CenterUpdate)> {
    let k = cfg.k_nn;
    let (soft, traces) = associate_traced(attrs, previous, nets, neighbors, k, cfg.use_segmentation)?;
    let (loss, d_soft, update) = stage2_loss(attrs, previous, neighbors, &soft, cfg);

    // softmax and network backward
    let mut grads = NetGrads::zeros(nets);
    let mut d_logits = vec![0.0; k];
    for i in 0..attrs.len() {
        let a_row = &soft[i * k..(i + 1) * k];
        let g_row = &d_soft[i * k..(i + 1) * k];
        let dot: f64 = a_row.iter().zip(g_row).map(|(a, g)| a * g).sum();
        for a in 0..k {
            d_logits[a] = a_row[a] * (g_row[a] - dot);
        }
        for a in 0..k {
            let t = &traces[i * k + a];
            let d_in = nets.head.backward(&t.head, &[d_logits[a]], &mut grads.head);
            nets.position.backward(&t.position, &d_in[..EMBEDDING_DIM], &mut grads.position);
            if let Some(st) = &t.segmentation {
                nets.segmentation.backward(st, &d_in[EMBEDDING_DIM..2 * EMBEDDING_DIM], &mut grads.segmentation);
            }
            nets.geometry.backward(&t.geometry, &d_in[2 * EMBEDDING_DIM..], &mut grads.geometry);
        }
    }
    Ok((loss, grads, soft, update))
}

/// Row-wise argmax over the neighbour slots; ties go to the lowest
/// Super-Gaussian id.
pub fn harden(neighbors: &[u32], soft: &[f64], k: usize) -> Vec<u32> {
    (0..neighbors.len() / k)
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            for a in 0..k {
                let (p, j) = (soft[i * k + a], neighbors[i * k + a]);
                if p > best.0 || (p == best.0 && j < best.1) {
                    best = (p, j);
                }
            }
            best.1
        })
        .collect()
}

/// Hard-assigned anchors of every Super-Gaussian.
pub fn members_of(hard: &[u32], s: usize) -> Vec<Vec<u32>> {
    let mut m = vec![Vec::new(); s];
    for (i, &j) in hard.iter().enumerate() {
        m[j as usize].push(i as u32);
    }
    m
}

/// Output of stage 2 (or of a baseline producing a hard assignment).
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub config: ClusterConfig,
    pub supergs: Vec<SuperGaussian>,
    pub association: AssociationMap,
    pub nets: Option<AssociationNets>,
    pub loss_history: Vec<Stage2Loss>,
}

impl Clustering {
    pub fn len(&self) -> usize {
        self.supergs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supergs.is_empty()
    }

    pub fn hard(&self) -> &[u32] {
        &self.association.hard
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.supergs.iter().map(|s| s.position).collect()
    }
}

fn build_supergs(centers: &Centers, orphan: &[bool], hard: &[u32]) -> Vec<SuperGaussian> {
    let members = members_of(hard, centers.len());
    members
        .into_iter()
        .enumerate()
        .map(|(j, members)| SuperGaussian {
            id: j as u32,
            position: Vector3::from_row_slice(centers.positions.row(j)),
            segmentation: centers.segmentation.row(j).to_vec(),
            geometry: centers.geometry.row(j).to_vec(),
            members,
            orphan: orphan[j],
        })
        .collect()
}

/// Trains the association nets and returns the hardened clustering.
pub fn train_stage2(scene: &Scene, cfg: &ClusterConfig, mut on_step: impl FnMut(usize, &Stage2Loss)) -> Result<Clustering> {
    cfg.validate()?;
    if scene.trained_stage < 1 {
        return Err(Error::StageOrder("stage 2 needs a stage-1 checkpoint".into()));
    }
    let attrs = AnchorAttributes::from_scene(scene);
    if cfg.s > attrs.len() {
        return Err(Error::Config(format!("s = {} exceeds the {} anchors", cfg.s, attrs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = AssociationNets::new(scene.config.anchor_feature_dim, scene.config.hidden_width, &mut rng);
    let init = farthest_point_sample(&attrs.positions, cfg.s, cfg.seed)?;
    let mut centers = Centers::from_anchors(&attrs, &init);
    let mut orphan = vec![false; cfg.s];
    let mut neighbors = knn(&attrs.positions, &centers.positions, cfg.k_nn)?;
    let mut opt = OptimizerState::default();
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.knn_refresh_period == 0 {
            neighbors = knn(&attrs.positions, &centers.positions, cfg.k_nn)?;
        }
        let (loss, grads, _, update) = stage2_objective(&attrs, &centers, &nets, &neighbors, cfg)?;
        if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
            return Err(Error::Training(format!("stage 2 diverged at iteration {it}: {loss:?}")));
        }
        let lr = lr_schedule(it, cfg.iterations, cfg.lr_initial, cfg.lr_final);
        let [n0, n1, n2, n3] = AssociationNets::NAMES;
        let mut groups = [
            ParamGroup::new(n0, nets.position.params_mut(), &grads.position),
            ParamGroup::new(n1, nets.segmentation.params_mut(), &grads.segmentation),
            ParamGroup::new(n2, nets.geometry.params_mut(), &grads.geometry),
            ParamGroup::new(n3, nets.head.params_mut(), &grads.head),
        ];
        opt.step(&mut groups, lr)?;
        centers = update.centers;
        orphan = update.orphan;
        on_step(it, &loss);
        history.push(loss);
    }
    let soft = associate(&attrs, &centers, &nets, &neighbors, cfg.k_nn, cfg.use_segmentation)?;
    let hard = harden(&neighbors, &soft, cfg.k_nn);
    let supergs = build_supergs(&centers, &orphan, &hard);
    Ok(Clustering {
        config: cfg.clone(),
        supergs,
        association: AssociationMap { k_nn: cfg.k_nn, neighbors, soft, hard },
        nets: Some(nets),
        loss_history: history,
    })
}

/// Clustering from a fixed hard assignment: centers are member means, each
/// anchor's only neighbour is its cluster.
pub fn clustering_from_assignment(attrs: &AnchorAttributes, hard: &[u32], s: usize, config: ClusterConfig) -> Clustering {
    let ones = vec![1.0; hard.len()];
    let previous = Centers {
        positions: Rows::zeros(s, 3),
        segmentation: Rows::zeros(s, attrs.segmentation.dim),
        geometry: Rows::zeros(s, attrs.geometry.dim),
    };
    let update = update_supergs(attrs, hard, &ones, 1, &previous);
    let supergs = build_supergs(&update.centers, &update.orphan, hard);
    Clustering {
        config,
        supergs,
        association: AssociationMap { k_nn: 1, neighbors: hard.to_vec(), soft: ones, hard: hard.to_vec() },
        nets: None,
        loss_history: Vec::new(),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Per-Super-Gaussian instance and hierarchical features: normalized means
/// of the unit features of the member anchors' Gaussians. `None` for
/// Super-Gaussians without members.
pub fn superg_features(scene: &Scene, hard: &[u32], s: usize) -> Result<(Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> {
    let gd = scene.config.gaussian_feature_dim;
    let mut inst = vec![vec![0.0; gd]; s];
    let mut hier = vec![vec![0.0; gd]; s];
    let mut count = vec![0usize; s];
    let k = scene.config.k_spawn;
    for (a, anchor) in scene.anchors.iter().enumerate() {
        let j = hard[a] as usize;
        let seg = anchor.segmentation_input();
        let g = scene.decoders.instance.forward(&seg)?;
        let h = scene.decoders.hierarchy.forward(&seg)?;
        for slot in 0..k {
            for (acc, src) in [(&mut inst[j], &g[gd * slot..gd * (slot + 1)]), (&mut hier[j], &h[gd * slot..gd * (slot + 1)])] {
                let n = src.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    acc.iter_mut().zip(src).for_each(|(x, v)| *x += v / n);
                }
            }
        }
        count[j] += 1;
    }
    let finish = |v: Vec<Vec<f64>>| -> Vec<Option<Vec<f64>>> {
        v.into_iter()
            .zip(&count)
            .map(|(m, &c)| {
                let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
                (c > 0 && n > 0.0).then(|| m.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    Ok((finish(inst), finish(hier)))
}

/// Connected components of the graph linking each node to its `k` nearest
/// eligible nodes (by position) when `linked` holds. Labels are dense and
/// ordered by lowest member; ineligible nodes get -1.
fn components(positions: &[Vector3<f64>], eligible: &[bool], k: usize, mut candidate: impl FnMut(usize, usize) -> bool, mut linked: impl FnMut(usize, usize) -> bool) -> Vec<i32> {
    let n = positions.len();
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        if !eligible[i] {
            continue;
        }
        let mut near: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && eligible[j] && candidate(i, j))
            .map(|j| ((positions[i] - positions[j]).norm_squared(), j))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in near.iter().take(k) {
            if linked(i, j) {
                uf.union(i, j);
            }
        }
    }
    let mut label_of_root = vec![-1i32; n];
    let mut next = 0;
    let mut labels = vec![-1i32; n];
    for i in 0..n {
        if !eligible[i] {
            continue;
        }
        let r = uf.find(i);
        if label_of_root[r] < 0 {
            label_of_root[r] = next;
            next += 1;
        }
        labels[i] = label_of_root[r];
    }
    labels
}

/// Instance label per Super-Gaussian: components of the k-nearest graph
/// with edges where instance-feature cosine exceeds `tau_ins`.
pub fn group_instances_graph(positions: &[Vector3<f64>], features: &[Option<Vec<f64>>], k: usize, tau_ins: f64) -> Vec<i32> {
    let eligible: Vec<bool> = features.iter().map(Option::is_some).collect();
    components(
        positions,
        &eligible,
        k,
        |_, _| true,
        |i, j| cosine(features[i].as_ref().unwrap(), features[j].as_ref().unwrap()) > tau_ins,
    )
}

/// Part label per Super-Gaussian: the same construction restricted to
/// each instance, over hierarchical features with `tau_hier`.
pub fn group_parts_graph(positions: &[Vector3<f64>], instance: &[i32], features: &[Option<Vec<f64>>], k: usize, tau_hier: f64) -> Vec<i32> {
    let eligible: Vec<bool> = instance.iter().zip(features).map(|(&l, f)| l >= 0 && f.is_some()).collect();
    components(
        positions,
        &eligible,
        k,
        |i, j| instance[i] == instance[j],
        |i, j| cosine(features[i].as_ref().unwrap(), features[j].as_ref().unwrap()) > tau_hier,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Part,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickStatus {
    Ok,
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickSelection {
    pub status: ClickStatus,
    pub selected: Vec<u32>,
    /// Instance holding most of the part selection (ties: lower label).
    pub instance: Option<i32>,
}

/// Click query at pixel `p`. Part mode selects the Super-Gaussians whose
/// hierarchical feature matches the clicked pixel's above `tau_hier` (the
/// best match is always kept); instance mode expands that selection to
/// every Super-Gaussian sharing an instance label with it.
pub fn click_query(
    p: usize,
    state: &BlendState,
    h_map: &FeatureImage,
    hier_features: &[Option<Vec<f64>>],
    instance_labels: &[i32],
    mode: QueryMode,
    tau_hier: f64,
) -> ClickSelection {
    let empty = ClickSelection { status: ClickStatus::Empty, selected: Vec::new(), instance: None };
    if p >= state.pixel_count() || state.pixel(p).is_empty() {
        return empty;
    }
    let q = h_map.pixel(p);
    let sims: Vec<Option<f64>> = hier_features.iter().map(|f| f.as_ref().map(|f| cosine(q, f))).collect();
    let mut best: Option<(f64, usize)> = None;
    for (j, s) in sims.iter().enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(b, _)| *s > b) {
                best = Some((*s, j));
            }
        }
    }
    let Some((_, best_j)) = best else {
        return empty;
    };
    let part: Vec<u32> = sims
        .iter()
        .enumerate()
        .filter(|(j, s)| *j == best_j || s.is_some_and(|s| s > tau_hier))
        .map(|(j, _)| j as u32)
        .collect();
    let mut votes = std::collections::BTreeMap::<i32, usize>::new();
    for &j in &part {
        let l = instance_labels[j as usize];
        if l >= 0 {
            *votes.entry(l).or_default() += 1;
        }
    }
    let instance = votes.iter().fold(None::<(i32, usize)>, |acc, (&l, &c)| match acc {
        Some((_, bc)) if bc >= c => acc,
        _ => Some((l, c)),
    });
    let selected = match mode {
        QueryMode::Part => part,
        QueryMode::Instance => {
            let mut all: Vec<u32> = (0..instance_labels.len() as u32)
                .filter(|&j| votes.contains_key(&instance_labels[j as usize]))
                .collect();
            for &j in &part {
                if !all.contains(&j) {
                    all.push(j);
                }
            }
            all.sort_unstable();
            all
        }
    };
    ClickSelection { status: ClickStatus::Ok, selected, instance: instance.map(|(l, _)| l) }
}

/// Result of the KMeans baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<u32>,
    /// Objective after every assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERATIONS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

/// Per-dimension standardized `x || f_s || f_g`.
pub fn standardized_features(attrs: &AnchorAttributes) -> Rows {
    let n = attrs.len();
    let dim = 3 + attrs.segmentation.dim + attrs.geometry.dim;
    let mut rows = Rows::zeros(n, dim);
    for i in 0..n {
        let r = rows.row_mut(i);
        r[..3].copy_from_slice(attrs.positions.row(i));
        r[3..3 + attrs.segmentation.dim].copy_from_slice(attrs.segmentation.row(i));
        r[3 + attrs.segmentation.dim..].copy_from_slice(attrs.geometry.row(i));
    }
    for d in 0..dim {
        let mean = (0..n).map(|i| rows.row(i)[d]).sum::<f64>() / n.max(1) as f64;
        let var = (0..n).map(|i| (rows.row(i)[d] - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let v = &mut rows.row_mut(i)[d];
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
    rows
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding on standardized features.
pub fn kmeans(points: &Rows, s: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if s == 0 || s > n {
        return Err(Error::Config(format!("cannot form {s} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Rows::zeros(s, points.dim);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..s {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // all remaining points coincide with centers
            Err(_) => rng.random_range(0..n),
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    let mut assignment = vec![0u32; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut obj = 0.0;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let mut best = (f64::INFINITY, 0u32);
            for c in 0..s {
                let d = sq_dist(points.row(i), centers.row(c));
                if d < best.0 {
                    best = (d, c as u32);
                }
            }
            assignment[i] = best.1;
            dist[i] = best.0;
            obj += best.0;
        }
        // empty clusters take the point farthest from its centroid
        let mut counts = vec![0usize; s];
        assignment.iter().for_each(|&a| counts[a as usize] += 1);
        for c in 0..s {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i] as usize] > 1)
                    .fold(None::<usize>, |b, i| match b {
                        Some(bi) if dist[bi] >= dist[i] => Some(bi),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    counts[assignment[i] as usize] -= 1;
                    obj -= dist[i];
                    dist[i] = 0.0;
                    assignment[i] = c as u32;
                    counts[c] = 1;
                    centers.row_mut(c).copy_from_slice(points.row(i));
                }
            }
        }
        objective.push(obj);
        let mut next = Rows::zeros(s, points.dim);
        for i in 0..n {
            let c = assignment[i] as usize;
            next.row_mut(c).iter_mut().zip(points.row(i)).for_each(|(a, b)| *a += b);
        }
        let mut shift: f64 = 0.0;
        for c in 0..s {
            let cnt = counts[c] as f64;
            next.row_mut(c).iter_mut().for_each(|x| *x /= cnt);
            shift = shift.max(sq_dist(next.row(c), centers.row(c)).sqrt());
        }
        centers = next;
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    Ok(KMeansResult { assignment, objective, iterations })
}

/// KMeans clustering of the standardized anchor attributes.
pub fn kmeans_baseline(attrs: &AnchorAttributes, s: usize, seed: u64) -> Result<KMeansResult> {
    kmeans(&standardized_features(attrs), s, seed)
}

/// Instance and part structure over the Super-Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub instance: Vec<i32>,
    pub part: Vec<i32>,
    pub instance_features: Vec<Option<Vec<f64>>>,
    pub hier_features: Vec<Option<Vec<f64>>>,
}

/// Feature extraction followed by instance and part grouping.
pub fn group_supergaussians(scene: &Scene, clustering: &Clustering) -> Result<Grouping> {
    let (instance_features, hier_features) = superg_features(scene, clustering.hard(), clustering.len())?;
    let positions = clustering.positions();
    let cfg = &clustering.config;
    let instance = group_instances_graph(&positions, &instance_features, GRAPH_K, cfg.tau_ins);
    let part = group_parts_graph(&positions, &instance, &hier_features, GRAPH_K, cfg.tau_hier);
    Ok(Grouping { instance, part, instance_features, hier_features })
}

pub const CLUSTER_SCHEMA: &str = "supergseg-cluster/1";

#[derive(Serialize, Deserialize)]
struct SuperGaussianDoc {
    id: u32,
    position: [f64; 3],
    segmentation: Vec<f64>,
    geometry: Vec<f64>,
    orphan: bool,
}

#[derive(Serialize, Deserialize)]
struct NetsDoc {
    position: MlpDoc,
    segmentation: MlpDoc,
    geometry: MlpDoc,
    head: MlpDoc,
}

#[derive(Serialize, Deserialize)]
struct ClusterDoc {
    schema: String,
    config: ClusterConfig,
    supergaussians: Vec<SuperGaussianDoc>,
    k_nn: usize,
    neighbors: Vec<u32>,
    soft: Vec<f64>,
    hard: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance_labels: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    part_labels: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nets: Option<NetsDoc>,
    #[serde(default)]
    loss_history: Vec<Stage2Loss>,
}

pub fn cluster_to_json(clustering: &Clustering, grouping: Option<&Grouping>) -> String {
    let doc = ClusterDoc {
        schema: CLUSTER_SCHEMA.into(),
        config: clustering.config.clone(),
        supergaussians: clustering
            .supergs
            .iter()
            .map(|s| SuperGaussianDoc {
                id: s.id,
                position: [s.position.x, s.position.y, s.position.z],
                segmentation: s.segmentation.clone(),
                geometry: s.geometry.clone(),
                orphan: s.orphan,
            })
            .collect(),
        k_nn: clustering.association.k_nn,
        neighbors: clustering.association.neighbors.clone(),
        soft: clustering.association.soft.clone(),
        hard: clustering.association.hard.clone(),
        instance_labels: grouping.map(|g| g.instance.clone()),
        part_labels: grouping.map(|g| g.part.clone()),
        nets: clustering.nets.as_ref().map(|n| NetsDoc {
            position: MlpDoc::from_mlp(&n.position),
            segmentation: MlpDoc::from_mlp(&n.segmentation),
            geometry: MlpDoc::from_mlp(&n.geometry),
            head: MlpDoc::from_mlp(&n.head),
        }),
        loss_history: clustering.loss_history.clone(),
    };
    serde_json::to_string(&doc).expect("cluster serializes")
}

/// Parses a cluster file; instance and part labels are returned when
/// present.
pub fn cluster_from_json(text: &str) -> Result<(Clustering, Option<(Vec<i32>, Vec<i32>)>)> {
    let doc: ClusterDoc = parse_json(text)?;
    let bad = |key: &str, msg: String| Error::parse(codec::key_offset(text, key), msg);
    if doc.schema != CLUSTER_SCHEMA {
        return Err(bad("schema", format!("unknown schema '{}'", doc.schema)));
    }
    let s = doc.supergaussians.len();
    let n = doc.hard.len();
    if doc.k_nn == 0 || doc.neighbors.len() != n * doc.k_nn || doc.soft.len() != n * doc.k_nn {
        return Err(bad("neighbors", "association arrays disagree with k_nn".into()));
    }
    if doc.neighbors.iter().chain(&doc.hard).any(|&j| j as usize >= s) {
        return Err(bad("neighbors", "association references a missing Super-Gaussian".into()));
    }
    for (i, sg) in doc.supergaussians.iter().enumerate() {
        if sg.id as usize != i {
            return Err(bad("supergaussians", format!("Super-Gaussian {i} has id {}", sg.id)));
        }
    }
    let labels = match (doc.instance_labels, doc.part_labels) {
        (Some(a), Some(b)) if a.len() == s && b.len() == s => Some((a, b)),
        (None, None) => None,
        _ => return Err(bad("instance_labels", "label arrays must both be present with one entry per Super-Gaussian".into())),
    };
    let nets = match doc.nets {
        Some(d) => Some(AssociationNets {
            position: d.position.to_mlp(text, "assoc_position")?,
            segmentation: d.segmentation.to_mlp(text, "assoc_segmentation")?,
            geometry: d.geometry.to_mlp(text, "assoc_geometry")?,
            head: d.head.to_mlp(text, "assoc_head")?,
        }),
        None => None,
    };
    let members = members_of(&doc.hard, s);
    let supergs = doc
        .supergaussians
        .into_iter()
        .zip(members)
        .map(|(d, members)| SuperGaussian {
            id: d.id,
            position: Vector3::from(d.position),
            segmentation: d.segmentation,
            geometry: d.geometry,
            members,
            orphan: d.orphan,
        })
        .collect();
    let clustering = Clustering {
        config: doc.config,
        supergs,
        association: AssociationMap { k_nn: doc.k_nn, neighbors: doc.neighbors, soft: doc.soft, hard: doc.hard },
        nets,
        loss_history: doc.loss_history,
    };
    Ok((clustering, labels))
}

pub fn save_cluster(clustering: &Clustering, grouping: Option<&Grouping>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, cluster_to_json(clustering, grouping))?;
    Ok(())
}

pub fn load_cluster(path: &std::path::Path) -> Result<(Clustering, Option<(Vec<i32>, Vec<i32>)>)> {
    cluster_from_json(&std::fs::read_to_string(path)?)
}
