//! Subcommands and the files they read and write.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use supergseg::adam::{load_optimizer, save_optimizer, OptimizerState};
use supergseg::dataset::{load_dataset, save_dataset, Dataset};
use supergseg::formats::write_feature_image;
use supergseg::language::{load_language, save_language, LanguageField};
use supergseg::pipeline::{evaluate_semantic, run_ablation, run_kmeans, run_stage1, run_stage2, run_stage3, PipelineConfig, Variant};
use supergseg::raster::Channel;
use supergseg::scene::{load_scene, save_scene, Scene};
use supergseg::session::{mask_rle, Session};
use supergseg::supergaussian::{load_cluster, save_cluster, Clustering};
use supergseg::synthetic::{generate_synthetic_scene, SyntheticSpec};

use crate::preview::{encode_png, preview_rgb};
use crate::{service, Failure};

type Outcome = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "supergseg", version, about = "Segmentation and language-field pipeline for neural-Gaussian scenes")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and its dataset.
    Generate(GenerateArgs),
    /// Train the feature fields from masks.
    TrainStage1(Stage1Args),
    /// Cluster anchors into Super-Gaussians and group them.
    TrainStage2(Stage2Args),
    /// Distil label embeddings into the language field.
    TrainStage3(Stage3Args),
    /// Render one channel of one view.
    Render(RenderArgs),
    /// Query the language field with a vocabulary label.
    QueryText(QueryTextArgs),
    /// Semantic mIoU/mAcc on the test views.
    Eval(EvalArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Serve click and text queries over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 2)]
    pub parts: usize,
    #[arg(long, default_value_t = 1200)]
    pub anchors: usize,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, default_value_t = 8)]
    pub train_views: usize,
    #[arg(long, default_value_t = 4)]
    pub test_views: usize,
    #[arg(long, default_value_t = 16)]
    pub language_dim: usize,
    /// Clearance between neighbouring objects.
    #[arg(long)]
    pub gap: Option<f64>,
    /// Turns of each object's spiral arm.
    #[arg(long)]
    pub windings: Option<f64>,
    /// Scene file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; defaults to `data` next to the scene file.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Inputs shared by the training commands.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline configuration (JSON with `stage1`, `cluster`, `stage3`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint scene file; the optimizer state goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Optimizer state to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Line-delimited JSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    /// Stage-1 checkpoint.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of Super-Gaussians.
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub k_nn: Option<usize>,
    /// Associate on positions and geometry only.
    #[arg(long)]
    pub coords_only: bool,
    /// Use the KMeans baseline instead of the learned association.
    #[arg(long, conflicts_with = "coords_only")]
    pub kmeans: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct Stage3Args {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

/// A trained model on disk.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub view: u32,
    /// color, instance, hier or language.
    #[arg(long, default_value = "color")]
    pub channel: String,
    /// `.png` and `.ppm` write an 8-bit preview, anything else raw SGFI.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryTextArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub label: String,
    /// View for the mask; defaults to the first test view.
    #[arg(long)]
    pub view: Option<u32>,
    #[arg(long)]
    pub top_m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Untrained scene.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants, e.g. `full,coords_only_clustering,kmeans,s=500,k_nn=5`.
    #[arg(long, value_delimiter = ',', default_value = "full,coords_only_clustering,kmeans")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1024..=65535))]
    pub port: u16,
}

pub fn execute(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Generate(a) => generate(a, seed),
        Command::TrainStage1(a) => train_stage1(a, seed),
        Command::TrainStage2(a) => train_stage2(a, seed),
        Command::TrainStage3(a) => train_stage3(a, seed),
        Command::Render(a) => render(a),
        Command::QueryText(a) => query_text(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, seed),
        Command::Serve(a) => serve(a),
    }
}

fn require(path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn pipeline_config(config: &Option<PathBuf>, seed: Option<u64>) -> std::result::Result<PipelineConfig, Failure> {
    let mut cfg = match config {
        Some(path) => {
            require(path)?;
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn load_scene_checked(path: &Path) -> std::result::Result<Scene, Failure> {
    require(path)?;
    Ok(load_scene(path)?)
}

fn load_dataset_checked(path: &Path, scene: &Scene) -> std::result::Result<Dataset, Failure> {
    require(path)?;
    let d = load_dataset(path)?;
    d.validate(scene.cameras.len())?;
    Ok(d)
}

/// Optimizer state file written next to a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    checkpoint.with_file_name(format!("{stem}.opt.json"))
}

fn generate(a: GenerateArgs, seed: Option<u64>) -> Outcome {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        objects: a.objects,
        parts_per_object: a.parts,
        anchors: a.anchors,
        width: a.width,
        height: a.height,
        train_views: a.train_views,
        test_views: a.test_views,
        language_dim: a.language_dim,
        gap: a.gap.unwrap_or(defaults.gap),
        windings: a.windings.unwrap_or(defaults.windings),
        seed: seed.unwrap_or(0),
        ..defaults
    };
    let syn = generate_synthetic_scene(&spec)?;
    let data = a.data.unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("data"));
    save_scene(&syn.scene, &a.out)?;
    save_dataset(&syn.dataset, &data)?;
    println!("wrote {} and {}", a.out.display(), data.display());
    Ok(())
}

fn train_stage1(a: Stage1Args, seed: Option<u64>) -> Outcome {
    let mut cfg = pipeline_config(&a.config.config, seed)?;
    if let Some(n) = a.config.iterations {
        cfg.stage1.iterations = n;
    }
    cfg.stage1.validate()?;
    let mut scene = load_scene_checked(&a.scene)?;
    let dataset = load_dataset_checked(&a.data, &scene)?;
    let mut opt = match &a.resume {
        Some(p) => {
            require(p)?;
            load_optimizer(p)?
        }
        None => OptimizerState::default(),
    };
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut write_err = None;
    run_stage1(&mut scene, &dataset, &cfg.stage1, &mut opt, |r| {
        if r.step % 100 == 0 {
            info!("stage 1 step {}: l_c {:.4} l_g {:.4} l_h {:.4}", r.step, r.l_c, r.l_g, r.l_h);
        }
        if let Some(w) = log.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from).and_then(|_| writeln!(w)) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    save_scene(&scene, &a.out)?;
    save_optimizer(&opt, &optimizer_path(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_stage2(a: Stage2Args, seed: Option<u64>) -> Outcome {
    let mut cfg = pipeline_config(&a.config.config, seed)?;
    let c = &mut cfg.cluster;
    if let Some(n) = a.config.iterations {
        c.iterations = n;
    }
    if let Some(s) = a.s {
        c.s = s;
    }
    if let Some(k) = a.k_nn {
        c.k_nn = k;
    }
    if a.coords_only {
        c.use_segmentation = false;
    }
    c.validate()?;
    if !a.scene.exists() {
        return Err(Failure::invalid(format!("stage-1 checkpoint {} does not exist; run train-stage1 first", a.scene.display())));
    }
    let scene = load_scene(&a.scene)?;
    let (clustering, grouping) = if a.kmeans { run_kmeans(&scene, c)? } else { run_stage2(&scene, c)? };
    save_cluster(&clustering, Some(&grouping), &a.out)?;
    let instances = grouping.instance.iter().filter(|&&l| l >= 0).collect::<std::collections::BTreeSet<_>>().len();
    println!("wrote {} ({} Super-Gaussians, {instances} instances)", a.out.display(), clustering.len());
    Ok(())
}

fn load_cluster_checked(path: &Option<PathBuf>) -> std::result::Result<(Clustering, Option<(Vec<i32>, Vec<i32>)>), Failure> {
    let path = path.as_ref().ok_or_else(|| Failure::invalid("--cluster is required"))?;
    if !path.exists() {
        return Err(Failure::invalid(format!("cluster file {} does not exist; run train-stage2 first", path.display())));
    }
    Ok(load_cluster(path)?)
}

fn load_language_checked(path: &Option<PathBuf>) -> std::result::Result<Option<LanguageField>, Failure> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::invalid(format!("language file {} does not exist; run train-stage3 first", p.display())));
            }
            Ok(Some(load_language(p)?))
        }
        None => Ok(None),
    }
}

fn train_stage3(a: Stage3Args, seed: Option<u64>) -> Outcome {
    let mut cfg = pipeline_config(&a.config.config, seed)?;
    if let Some(n) = a.config.iterations {
        cfg.stage3.iterations = n;
    }
    let scene = load_scene_checked(&a.scene)?;
    let dataset = load_dataset_checked(&a.data, &scene)?;
    let (clustering, _) = load_cluster_checked(&Some(a.cluster.clone()))?;
    if clustering.hard().len() != scene.anchors.len() {
        return Err(Failure::invalid("cluster file does not match the scene"));
    }
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let (field, records) = run_stage3(&scene, &dataset, &clustering, &cfg.stage3, |r| {
        if r.step % 100 == 0 {
            info!("stage 3 step {}: loss {:.4}", r.step, r.loss);
        }
    })?;
    if let Some(w) = log.as_mut() {
        for r in &records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    save_language(&field, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Loads everything a query needs.
pub fn open_session(m: &ModelArgs) -> std::result::Result<Session, Failure> {
    let scene = load_scene_checked(&m.scene)?;
    let dataset = load_dataset_checked(&m.data, &scene)?;
    let (clustering, labels) = load_cluster_checked(&m.cluster)?;
    let field = load_language_checked(&m.language)?;
    Ok(Session::new(scene, dataset, clustering, labels, field)?)
}

fn parse_channel(s: &str) -> std::result::Result<Channel, Failure> {
    Channel::parse(s).ok_or_else(|| Failure::invalid(format!("unknown channel '{s}' (color, instance, hier, language)")))
}

fn render(a: RenderArgs) -> Outcome {
    let channel = parse_channel(&a.channel)?;
    let img = if a.model.cluster.is_none() && channel != Channel::Language {
        // plain rendering needs no trained clustering
        let scene = load_scene_checked(&a.model.scene)?;
        let dataset = load_dataset_checked(&a.model.data, &scene)?;
        let view = dataset.view(a.view).ok_or_else(|| Failure::invalid(format!("unknown view {}", a.view)))?;
        let r = supergseg::raster::render_scene(&scene, &scene.cameras[view.camera], &[channel], None)?;
        r.image(channel).expect("rendered").clone()
    } else {
        let session = open_session(&a.model)?;
        session.render(a.view, channel)?
    };
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => std::fs::write(&a.out, encode_png(img.width, img.height, &preview_rgb(&img, channel)))?,
        "ppm" => {
            let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            bytes.extend(preview_rgb(&img, channel));
            std::fs::write(&a.out, bytes)?
        }
        _ => write_feature_image(&a.out, &img)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn default_view(session: &Session) -> std::result::Result<u32, Failure> {
    session
        .dataset
        .test_views()
        .next()
        .or_else(|| session.dataset.views.first())
        .map(|v| v.id)
        .ok_or_else(|| Failure::invalid("dataset has no views"))
}

fn query_text(a: QueryTextArgs) -> Outcome {
    if a.model.language.is_none() {
        return Err(Failure::invalid("--language is required"));
    }
    let session = open_session(&a.model)?;
    let view = match a.view {
        Some(v) => v,
        None => default_view(&session)?,
    };
    let r = session.text(&a.label, view, a.top_m)?;
    let out = serde_json::json!({
        "label": a.label,
        "view": view,
        "winner_instance": r.query.winner,
        "relevancy_per_instance": r.query.relevancy,
        "selected_supergs": r.query.selected,
        "mask_rle": mask_rle(&r.mask),
    });
    println!("{out}");
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let language = a.model.language.clone().ok_or_else(|| Failure::invalid("--language is required"))?;
    let scene = load_scene_checked(&a.model.scene)?;
    let dataset = load_dataset_checked(&a.model.data, &scene)?;
    let (clustering, _) = load_cluster_checked(&a.model.cluster)?;
    let field = load_language_checked(&Some(language))?.expect("path given");
    let report = evaluate_semantic(&scene, &dataset, &clustering, &field)?;
    let labels = dataset.vocabulary.labels();
    let table = serde_json::json!({
        "classes": labels.iter().enumerate().map(|(c, l)| serde_json::json!({"label": l, "iou": report.iou[c], "acc": report.acc[c]})).collect::<Vec<_>>(),
        "miou": report.miou,
        "macc": report.macc,
    });
    if let Some(out) = &a.out {
        write_json(out, &table)?;
    }
    println!("{}", serde_json::to_string_pretty(&table).expect("json"));
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Outcome {
    let cfg = pipeline_config(&a.config, seed)?;
    let variants: Vec<Variant> = a.variants.iter().map(|v| v.trim().parse()).collect::<supergseg::Result<_>>()?;
    let scene = load_scene_checked(&a.scene)?;
    let dataset = load_dataset_checked(&a.data, &scene)?;
    let report = run_ablation(&scene, &dataset, &cfg, &variants)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    for row in &report.rows {
        match (&row.metrics, &row.skipped) {
            (Some(m), _) => println!("{:<24} mIoU {:.4}  mAcc {:.4}", row.variant, m.miou, m.macc),
            (None, Some(why)) => println!("{:<24} skipped: {why}", row.variant),
            _ => {}
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let session = open_session(&a.model)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(|e| Failure::invalid(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, service::router(session)).await
    })?;
    Ok(())
}
