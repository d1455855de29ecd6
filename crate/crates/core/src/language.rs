//! Language field: per-Super-Gaussian latents decoded into unit language
//! features, rendered through the hard assignment and distilled from
//! per-instance-mask embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{lr_schedule, OptimizerState, ParamGroup};
use crate::codec::{self, decode_f32, encode_f32, parse_json};
use crate::contrastive::PreparedView;
use crate::dataset::View;
use crate::error::{Error, Result};
use crate::mlp::{MlpTrace, TinyMlp};
use crate::raster::{BlendState, ChannelValues, FeatureImage};
use crate::scene::{MlpDoc, Scene};
use crate::supergaussian::Clustering;

/// Width of the per-Super-Gaussian latent.
pub const LATENT_DIM: usize = 32;
pub const LANGUAGE_SCHEMA: &str = "supergseg-language/1";

/// Label embeddings used as supervision and as text queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVocabulary {
    pub dim: usize,
    /// Sorted by label; the position of a label is its class index.
    pub entries: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyDoc {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingVocabulary {
    pub fn new(dim: usize, entries: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let v = Self { dim, entries };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("vocabulary dimension must be positive".into()));
        }
        for (label, vec) in &self.entries {
            if vec.len() != self.dim {
                return Err(Error::Config(format!("embedding '{label}' has {} values, expected {}", vec.len(), self.dim)));
            }
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::Config(format!("embedding '{label}' is not unit-norm (norm {norm})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.entries.keys().position(|k| k == label)
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    /// Embeddings in class-index order.
    pub fn vectors(&self) -> Vec<&[f64]> {
        self.entries.values().map(Vec::as_slice).collect()
    }

    pub fn to_json(&self) -> String {
        let doc = VocabularyDoc { dim: self.dim, entries: self.entries.clone() };
        serde_json::to_string_pretty(&doc).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VocabularyDoc = parse_json(text)?;
        Self::new(doc.dim, doc.entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self { iterations: 500, lr_initial: 0.01, lr_final: 0.001, seed: 0 }
    }
}

/// Per-Super-Gaussian latents and the decoder mapping `latent || center`
/// to a unit language feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageField {
    pub latents: Vec<Vec<f64>>,
    pub decoder: TinyMlp,
}

impl LanguageField {
    pub fn new<R: Rng + ?Sized>(count: usize, language_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let latents = (0..count).map(|_| (0..LATENT_DIM).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let mut decoder = TinyMlp::with_hidden(LATENT_DIM + 3, hidden, language_dim);
        decoder.init_random(rng);
        Self { latents, decoder }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn language_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn input(&self, j: usize, center: &Vector3<f64>) -> Vec<f64> {
        let mut v = Vec::with_capacity(LATENT_DIM + 3);
        v.extend_from_slice(&self.latents[j]);
        v.extend_from_slice(center.as_slice());
        v
    }

    /// Unit language feature of every Super-Gaussian; a zero decoder output
    /// stays zero.
    pub fn decode_all(&self, centers: &[Vector3<f64>]) -> Result<Vec<Vec<f64>>> {
        if centers.len() != self.len() {
            return Err(Error::Config(format!("{} centers for {} latents", centers.len(), self.len())));
        }
        centers.iter().enumerate().map(|(j, c)| decode_language(&self.decoder, &self.input(j, c))).collect()
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// `F_L(input)` normalized to unit length.
pub fn decode_language(decoder: &TinyMlp, input: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize(&decoder.forward(input)?))
}

/// Per-Gaussian language values: every neural Gaussian carries the feature
/// of its anchor's Super-Gaussian.
pub fn gaussian_language_values(scene: &Scene, hard: &[u32], features: &[Vec<f64>]) -> Result<ChannelValues> {
    if hard.len() != scene.anchors.len() {
        return Err(Error::StageOrder(format!(
            "hard assignment covers {} anchors, scene has {}",
            hard.len(),
            scene.anchors.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    let k = scene.config.k_spawn;
    let mut values = ChannelValues::zeros(hard.len() * k, dim);
    for (a, &j) in hard.iter().enumerate() {
        let f = features
            .get(j as usize)
            .ok_or_else(|| Error::StageOrder(format!("anchor {a} assigned to missing Super-Gaussian {j}")))?;
        for slot in 0..k {
            values.row_mut(a * k + slot).copy_from_slice(f);
        }
    }
    Ok(values)
}

/// Language feature map of a view through the hard assignment.
pub fn render_language_map(scene: &Scene, clustering: &Clustering, field: &LanguageField, state: &BlendState) -> Result<FeatureImage> {
    let features = field.decode_all(&clustering.positions())?;
    let values = gaussian_language_values(scene, clustering.hard(), &features)?;
    state.composite(&values)
}

/// Mean cosine loss with its gradient with respect to the rendered map.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineLoss {
    pub loss: f64,
    pub grad: FeatureImage,
    /// Valid pixels skipped because the rendered feature was zero.
    pub skipped: usize,
}

/// `mean over valid pixels of 1 - cos(rendered, target)`.
pub fn cosine_loss(rendered: &FeatureImage, target: &FeatureImage, valid: &[bool]) -> Result<CosineLoss> {
    if rendered.width != target.width || rendered.height != target.height || rendered.channels != target.channels {
        return Err(Error::Contract("rendered and target language maps differ in shape".into()));
    }
    if valid.len() != rendered.pixel_count() {
        return Err(Error::Contract("valid mask does not match the map".into()));
    }
    let mut grad = FeatureImage::zeros(rendered.width, rendered.height, rendered.channels);
    let mut skipped = 0;
    let mut used = Vec::new();
    for (p, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        let nr = rendered.pixel(p).iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = target.pixel(p).iter().map(|x| x * x).sum::<f64>().sqrt();
        if nr == 0.0 || nt == 0.0 {
            skipped += 1;
            continue;
        }
        used.push((p, nr, nt));
    }
    if used.is_empty() {
        return Ok(CosineLoss { loss: 0.0, grad, skipped });
    }
    let scale = 1.0 / used.len() as f64;
    let mut loss = 0.0;
    for (p, nr, nt) in used {
        let r = rendered.pixel(p).to_vec();
        let t = target.pixel(p);
        let cos = r.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (nr * nt);
        loss += 1.0 - cos;
        // d(-cos)/dr = -(t/|t| - cos r/|r|) / |r|
        for ((g, a), b) in grad.pixel_mut(p).iter_mut().zip(&r).zip(t) {
            *g = -scale * (b / nt - cos * a / nr) / nr;
        }
    }
    Ok(CosineLoss { loss: loss * scale, grad, skipped })
}

/// Supervision for one view: every pixel of an instance mask carries that
/// mask's label embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTarget {
    pub view_id: u32,
    pub target: FeatureImage,
    pub valid: Vec<bool>,
}

pub fn language_target(prepared: &PreparedView, view: &View, vocabulary: &EmbeddingVocabulary) -> LanguageTarget {
    let d = &prepared.decomposition;
    let mut target = FeatureImage::zeros(d.width, d.height, vocabulary.dim);
    let mut valid = vec![false; target.pixel_count()];
    let mut embedding: Vec<Option<&[f64]>> = Vec::with_capacity(d.instance_masks.len());
    for &m in &d.instance_masks {
        let e = view.mask_labels.get(m).and_then(|l| l.as_deref()).and_then(|l| vocabulary.get(l));
        if e.is_none() {
            warn!("view {}: instance mask {m} has no embedding, excluded", view.id);
        }
        embedding.push(e);
    }
    for (p, &inst) in d.instance_map.iter().enumerate() {
        if inst < 0 {
            continue;
        }
        if let Some(e) = embedding[inst as usize] {
            target.pixel_mut(p).copy_from_slice(e);
            valid[p] = true;
        }
    }
    LanguageTarget { view_id: view.id, target, valid }
}

/// Gradient of the stage-3 loss with respect to the latents and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Grads {
    pub latents: Vec<f64>,
    pub decoder: Vec<f64>,
}

/// Loss and gradients for one view.
pub fn stage3_gradients(
    scene: &Scene,
    clustering: &Clustering,
    field: &LanguageField,
    state: &BlendState,
    target: &LanguageTarget,
) -> Result<(f64, Stage3Grads)> {
    let centers = clustering.positions();
    if centers.len() != field.len() {
        return Err(Error::Config(format!("{} Super-Gaussians for {} latents", centers.len(), field.len())));
    }
    let traces: Vec<MlpTrace> = (0..field.len())
        .map(|j| field.decoder.forward_trace(&field.input(j, &centers[j])))
        .collect::<Result<_>>()?;
    let features: Vec<Vec<f64>> = traces.iter().map(|t| normalize(t.output())).collect();
    let values = gaussian_language_values(scene, clustering.hard(), &features)?;
    let rendered = state.composite(&values)?;
    let loss = cosine_loss(&rendered, &target.target, &target.valid)?;
    let d_values = state.blend_gradient(&loss.grad)?;

    let dim = field.language_dim();
    let k = scene.config.k_spawn;
    let mut d_features = vec![vec![0.0; dim]; field.len()];
    for (a, &j) in clustering.hard().iter().enumerate() {
        let acc = &mut d_features[j as usize];
        for slot in 0..k {
            acc.iter_mut().zip(d_values.row(a * k + slot)).for_each(|(x, g)| *x += g);
        }
    }
    let mut grads = Stage3Grads { latents: vec![0.0; field.len() * LATENT_DIM], decoder: vec![0.0; field.decoder.param_count()] };
    for (j, trace) in traces.iter().enumerate() {
        let g = &d_features[j];
        let v = trace.output();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || g.iter().all(|x| *x == 0.0) {
            continue;
        }
        // backward through v / |v|
        let u = &features[j];
        let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        let d_out: Vec<f64> = g.iter().zip(u).map(|(gi, ui)| (gi - dot * ui) / n).collect();
        let d_in = field.decoder.backward(trace, &d_out, &mut grads.decoder);
        grads.latents[j * LATENT_DIM..(j + 1) * LATENT_DIM].copy_from_slice(&d_in[..LATENT_DIM]);
    }
    Ok((loss.loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Record {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Distils the per-mask embeddings into the language field, cycling
/// through the views.
pub fn train_stage3(
    scene: &Scene,
    clustering: &Clustering,
    field: &mut LanguageField,
    views: &[(&BlendState, &LanguageTarget)],
    cfg: &Stage3Config,
    mut on_step: impl FnMut(&Stage3Record),
) -> Result<Vec<Stage3Record>> {
    if cfg.iterations > 0 && views.is_empty() {
        return Err(Error::Training("stage 3 needs at least one training view".into()));
    }
    let mut opt = OptimizerState::default();
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (state, target) = views[step % views.len()];
        let (loss, grads) = stage3_gradients(scene, clustering, field, state, target)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("stage 3 loss is not finite at step {step}")));
        }
        let lr = lr_schedule(step, cfg.iterations, cfg.lr_initial, cfg.lr_final);
        let mut flat: Vec<f64> = field.latents.iter().flatten().copied().collect();
        {
            let mut groups = [
                ParamGroup::new("latents", &mut flat, &grads.latents),
                ParamGroup::new("language_decoder", field.decoder.params_mut(), &grads.decoder),
            ];
            opt.step(&mut groups, lr)?;
        }
        for (l, chunk) in field.latents.iter_mut().zip(flat.chunks_exact(LATENT_DIM)) {
            l.copy_from_slice(chunk);
        }
        let record = Stage3Record { step, loss, lr };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Outcome of a text query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQueryResult {
    pub selected: Vec<u32>,
    /// `(instance, relevancy)` for every instance with Super-Gaussians.
    pub relevancy: Vec<(i32, f64)>,
    pub winner: Option<i32>,
}

/// Default number of Super-Gaussians selected by a text query.
pub fn default_top_m(supergaussians: usize) -> usize {
    (supergaussians / 20).max(1)
}

/// Selects the `top_m` eligible Super-Gaussians most similar to `query`
/// (ties to the lower id) and lets them vote: an instance's relevancy is
/// its selected count over its total count.
pub fn text_query_3d(query: &[f64], features: &[Vec<f64>], eligible: &[bool], instance_labels: &[i32], top_m: usize) -> Result<TextQueryResult> {
    if features.is_empty() || !eligible.iter().any(|&e| e) {
        return Err(Error::Query("language field is empty".into()));
    }
    if eligible.len() != features.len() || instance_labels.len() != features.len() {
        return Err(Error::Contract("query inputs disagree on the Super-Gaussian count".into()));
    }
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::Query(format!("query vector is not unit-norm (norm {norm})")));
    }
    let mut ranked: Vec<(f64, u32)> = Vec::new();
    for (j, f) in features.iter().enumerate().filter(|(j, _)| eligible[*j]) {
        if f.len() != query.len() {
            return Err(Error::Query(format!("query has {} values, field has {}", query.len(), f.len())));
        }
        ranked.push((f.iter().zip(query).map(|(a, b)| a * b).sum(), j as u32));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut selected: Vec<u32> = ranked.iter().take(top_m.max(1)).map(|x| x.1).collect();
    selected.sort_unstable();

    let mut totals = BTreeMap::<i32, usize>::new();
    for (j, &l) in instance_labels.iter().enumerate() {
        if l >= 0 && eligible[j] {
            *totals.entry(l).or_default() += 1;
        }
    }
    let mut hits = BTreeMap::<i32, usize>::new();
    for &j in &selected {
        let l = instance_labels[j as usize];
        if l >= 0 {
            *hits.entry(l).or_default() += 1;
        }
    }
    let relevancy: Vec<(i32, f64)> = totals.iter().map(|(&l, &t)| (l, *hits.get(&l).unwrap_or(&0) as f64 / t as f64)).collect();
    let winner = relevancy
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .fold(None::<(i32, f64)>, |best, &(l, r)| match best {
            Some((_, br)) if br >= r => best,
            _ => Some((l, r)),
        })
        .map(|(l, _)| l);
    Ok(TextQueryResult { selected, relevancy, winner })
}

/// Per-pixel label: the vocabulary entry with the highest cosine (ties to
/// the lower index); pixels with a zero feature get -1.
pub fn semantic_map(vocabulary: &EmbeddingVocabulary, map: &FeatureImage) -> Result<Vec<i32>> {
    if vocabulary.is_empty() {
        return Err(Error::Query("vocabulary is empty".into()));
    }
    if map.channels != vocabulary.dim {
        return Err(Error::Contract(format!("map has {} channels, vocabulary {}", map.channels, vocabulary.dim)));
    }
    let vectors = vocabulary.vectors();
    Ok((0..map.pixel_count())
        .map(|p| {
            let f = map.pixel(p);
            if f.iter().all(|x| *x == 0.0) {
                return -1;
            }
            let mut best = (f64::NEG_INFINITY, -1);
            for (c, v) in vectors.iter().enumerate() {
                let s: f64 = f.iter().zip(*v).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, c as i32);
                }
            }
            best.1
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LanguageDoc {
    schema: String,
    count: usize,
    latent_dim: usize,
    latents: String,
    decoder: MlpDoc,
}

pub fn language_to_json(field: &LanguageField) -> String {
    let flat: Vec<f64> = field.latents.iter().flatten().copied().collect();
    let doc = LanguageDoc {
        schema: LANGUAGE_SCHEMA.into(),
        count: field.len(),
        latent_dim: LATENT_DIM,
        latents: encode_f32(&flat),
        decoder: MlpDoc::from_mlp(&field.decoder),
    };
    serde_json::to_string(&doc).expect("language field serializes")
}

pub fn language_from_json(text: &str) -> Result<LanguageField> {
    let doc: LanguageDoc = parse_json(text)?;
    if doc.schema != LANGUAGE_SCHEMA {
        return Err(Error::parse(codec::value_offset(text, &doc.schema), format!("unknown schema '{}'", doc.schema)));
    }
    if doc.latent_dim != LATENT_DIM {
        return Err(Error::parse(codec::key_offset(text, "latent_dim"), format!("latent_dim must be {LATENT_DIM}")));
    }
    let flat = decode_f32(text, "latents", &doc.latents, Some(doc.count * LATENT_DIM))?;
    let decoder = doc.decoder.to_mlp(text, "language_decoder")?;
    if decoder.input_dim() != LATENT_DIM + 3 {
        return Err(Error::parse(codec::key_offset(text, "decoder"), "language decoder must take a latent and a position"));
    }
    Ok(LanguageField { latents: flat.chunks_exact(LATENT_DIM).map(<[f64]>::to_vec).collect(), decoder })
}

pub fn save_language(field: &LanguageField, path: &Path) -> Result<()> {
    std::fs::write(path, language_to_json(field))?;
    Ok(())
}

pub fn load_language(path: &Path) -> Result<LanguageField> {
    language_from_json(&std::fs::read_to_string(path)?)
}

/// Seeded fresh field sized for `clustering`.
pub fn init_language_field(clustering: &Clustering, language_dim: usize, hidden: usize, seed: u64) -> LanguageField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LanguageField::new(clustering.len(), language_dim, hidden, &mut rng)
}
