use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use scenegen::evaluation::{evaluate, matrix_csv};
use scenegen::inference::{calibrate_anomaly_threshold, ANOMALY_PERCENTILE};
use scenegen::scene::{
    filter_scenes, generate_toy_dataset, load_scene_dir, save_scene_dir, scene_from_value, FilterRules, ToyRuleSpec,
};
use scenegen::training::{train, write_metrics_csv, TrainConfig};
use scenegen::{Checkpoint, CheckpointMeta, Model, ModelConfig, Scene};

use crate::server;
use crate::service::Service;

#[derive(Debug, Parser)]
#[command(name = "scenegen", version, about = "Train and sample indoor object layout models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic toy dataset as one JSON file per scene.
    GenData(GenDataArgs),
    /// Train a model on a directory of scenes and write a checkpoint.
    Train(TrainArgs),
    /// Generate scenes for a floor (a JSON file or a directory of scenes).
    Synthesize(SynthesizeArgs),
    /// Add objects to a partial scene.
    Complete(SceneArgs),
    /// Suggest one object whose centroid falls in a box.
    Suggest(SuggestArgs),
    /// Score objects and move the least likely one when it is anomalous.
    Detect(DetectArgs),
    /// Place an object of a given category.
    Place(PlaceArgs),
    /// Leave-one-out log-likelihood of every object.
    Likelihoods(SceneArgs),
    /// Compare a generated scene directory against a reference directory.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Rule spec JSON; the built-in dining-room spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Settings JSON with optional `model`, `train`, `filter` and
    /// `validation_fraction` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Overrides `train.max_iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub floor: PathBuf,
    /// Scenes to generate; with more than one, `--out` is a directory and
    /// scene `i` uses seed `seed + i` and floor `i` modulo the floor count.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub max_objects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub scene: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuggestArgs {
    #[command(flatten)]
    pub inner: SceneArgs,
    /// Centroid box as `x0,y0,z0,x1,y1,z1` in meters.
    #[arg(long = "box", allow_hyphen_values = true, value_parser = parse_box)]
    pub constraint: [f64; 6],
    #[arg(long)]
    pub max_attempts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub inner: SceneArgs,
    /// Log-likelihood threshold; the checkpoint's calibrated value when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlaceArgs {
    #[command(flatten)]
    pub inner: SceneArgs,
    /// Category name or index.
    #[arg(long)]
    pub category: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Checkpoint supplying category names; inferred from the scenes otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write co-occurrence matrices as CSV into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

/// Contents of the `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: Option<FilterRules>,
    /// Share of scenes held out for validation and threshold calibration.
    pub validation_fraction: f64,
    pub max_validation_scenes: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            filter: None,
            validation_fraction: 0.1,
            max_validation_scenes: 100,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_command(&a),
        Command::Synthesize(a) => synthesize(&a),
        Command::Complete(a) => scene_op(&a, json!({}), Service::complete),
        Command::Suggest(a) => scene_op(
            &a.inner,
            json!({"constraint_box": a.constraint, "max_attempts": a.max_attempts}),
            Service::suggest,
        ),
        Command::Detect(a) => scene_op(&a.inner, json!({"threshold": a.threshold}), Service::detect),
        Command::Place(a) => {
            let category = a
                .category
                .parse::<u64>()
                .map_or_else(|_| json!(a.category), |i| json!(i));
            scene_op(&a.inner, json!({"category": category}), Service::place)
        }
        Command::Likelihoods(a) => scene_op(&a, json!({}), Service::likelihoods),
        Command::Evaluate(a) => evaluate_command(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn parse_box(s: &str) -> Result<[f64; 6], String> {
    let nums = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    nums.try_into()
        .map_err(|v: Vec<f64>| format!("expected 6 comma-separated numbers, got {}", v.len()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_service(path: &Path) -> Result<Service> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Service::new(ck))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec: ToyRuleSpec = match &a.spec {
        Some(p) => serde_json::from_value(read_json(p)?).context("invalid rule spec")?,
        None => ToyRuleSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let data = generate_toy_dataset(&spec, a.n)?;
    save_scene_dir(&a.out, &data.scenes)?;
    log::info!(
        "wrote {} scenes to {} ({} skipped)",
        data.scenes.len(),
        a.out.display(),
        data.skipped
    );
    Ok(())
}

/// Category names from `category_name` fields, `category_<i>` where absent.
fn infer_categories(scenes: &[Scene]) -> Vec<String> {
    let n = scenes
        .iter()
        .flat_map(|s| &s.objects)
        .map(|o| o.category + 1)
        .max()
        .unwrap_or(0);
    let mut names: Vec<Option<String>> = vec![None; n];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if names[o.category].is_none() {
            names[o.category] = o.category_name.clone();
        }
    }
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.unwrap_or_else(|| format!("category_{i}")))
        .collect()
}

fn union_bounds(scenes: &[Scene]) -> Option<[f64; 6]> {
    let mut it = scenes.iter().map(|s| s.bounds.to_array());
    let first = it.next()?;
    Some(it.fold(first, |mut acc, b| {
        for i in 0..3 {
            acc[i] = acc[i].min(b[i]);
            acc[i + 3] = acc[i + 3].max(b[i + 3]);
        }
        acc
    }))
}

fn train_command(a: &TrainArgs) -> Result<()> {
    let mut settings: TrainSettings = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?).context("invalid training settings")?,
        None => TrainSettings::default(),
    };
    if let Some(n) = a.iterations {
        settings.train.max_iterations = n;
    }
    if let Some(s) = a.seed {
        settings.train.seed = s;
    }
    let mut scenes = load_scene_dir(&a.data)?;
    if let Some(rules) = &settings.filter {
        let (kept, report) = filter_scenes(scenes, rules);
        log::info!("filter kept {} scenes, rejections {:?}", report.kept, report.rejections);
        scenes = kept;
    }
    if scenes.len() < 2 {
        bail!("need at least two scenes, found {}", scenes.len());
    }
    if settings.model.category_names.is_empty() {
        settings.model.category_names = infer_categories(&scenes);
    }
    let n_val = ((scenes.len() as f64 * settings.validation_fraction).round() as usize)
        .clamp(1, settings.max_validation_scenes.max(1))
        .min(scenes.len() - 1);
    let (train_scenes, val_scenes) = scenes.split_at(scenes.len() - n_val);
    log::info!(
        "training on {} scenes, validating on {}, categories {:?}",
        train_scenes.len(),
        val_scenes.len(),
        settings.model.category_names
    );
    let mut model = Model::<f32>::new(settings.model.clone(), settings.train.seed)?;
    let report = train(&mut model, train_scenes, val_scenes, &settings.train)?;
    let threshold = calibrate_anomaly_threshold(&model, val_scenes, ANOMALY_PERCENTILE)?;
    let meta = CheckpointMeta {
        anomaly_threshold: Some(threshold),
        category_frequency: None,
        default_bounds: union_bounds(train_scenes),
        room_type: train_scenes.first().map(|s| s.room_type.clone()),
        iterations: settings.train.max_iterations,
        best_val_nll: report.best_val_nll,
        seed: Some(settings.train.seed),
    };
    Checkpoint::new(model, meta).save(&a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_metrics_csv(&metrics, &report.metrics)?;
    log::info!(
        "best validation NLL {:.4} at iteration {}, anomaly threshold {threshold:.4}; wrote {}",
        report.best_val_nll.unwrap_or(f64::NAN),
        report.best_iteration,
        a.out.display()
    );
    Ok(())
}

fn floors(path: &Path) -> Result<Vec<Value>> {
    if path.is_dir() {
        let scenes = load_scene_dir(path)?;
        if scenes.is_empty() {
            bail!("no scenes in {}", path.display());
        }
        Ok(scenes.iter().map(scenegen::scene::scene_to_value).collect())
    } else {
        Ok(vec![read_json(path)?])
    }
}

fn with_fields(mut body: Value, extra: &Value) -> Value {
    if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            b.insert(k.clone(), v.clone());
        }
    }
    body
}

fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let service = load_service(&a.model.ckpt)?;
    let floors = floors(&a.floor)?;
    let run = |i: usize| -> Result<Value> {
        let extra = json!({
            "seed": a.model.seed + i as u64,
            "temperature": a.model.temperature,
            "max_objects": a.max_objects,
        });
        let reply = service.synthesize(&with_fields(floors[i % floors.len()].clone(), &extra))?;
        if reply["truncated"] == json!(true) {
            log::warn!("scene {i} reached the object cap before the end symbol");
        }
        Ok(reply["scene"].clone())
    };
    if a.count == 1 {
        return write_output(a.model.out.as_deref(), &pretty(&run(0)?));
    }
    let dir = a
        .model
        .out
        .as_ref()
        .context("--out must name a directory when --count > 1")?;
    let scenes = (0..a.count)
        .map(|i| run(i).and_then(|v| scene_from_value(&v).map_err(Into::into)))
        .collect::<Result<Vec<_>>>()?;
    save_scene_dir(dir, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), dir.display());
    Ok(())
}

fn scene_op(a: &SceneArgs, extra: Value, op: fn(&Service, &Value) -> Result<Value, crate::ServiceError>) -> Result<()> {
    let service = load_service(&a.model.ckpt)?;
    let scene = read_json(&a.scene)?;
    let body = with_fields(
        json!({"scene": scene, "seed": a.model.seed, "temperature": a.model.temperature}),
        &extra,
    );
    let reply = op(&service, &body)?;
    write_output(a.model.out.as_deref(), &pretty(&reply))
}

fn evaluate_command(a: &EvaluateArgs) -> Result<()> {
    let gen = load_scene_dir(&a.gen)?;
    let reference = load_scene_dir(&a.reference)?;
    if gen.is_empty() || reference.is_empty() {
        bail!("both scene directories must be non-empty");
    }
    let names = match &a.ckpt {
        Some(p) => Checkpoint::load(p)?.config().category_names.clone(),
        None => {
            let mut all = reference.clone();
            all.extend(gen.iter().cloned());
            infer_categories(&all)
        }
    };
    let report = evaluate(&gen, &reference, &names);
    if let Some(dir) = &a.csv_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("cooccurrence_generated.csv"),
            matrix_csv(&names, &report.cooccurrence_generated),
        )?;
        fs::write(
            dir.join("cooccurrence_reference.csv"),
            matrix_csv(&names, &report.cooccurrence_reference),
        )?;
        fs::write(
            dir.join("cooccurrence_diff.csv"),
            matrix_csv(&names, &report.cooccurrence_diff),
        )?;
    }
    write_output(a.out.as_deref(), &pretty(&serde_json::to_value(&report)?))
}

fn serve(a: &ServeArgs) -> Result<()> {
    let service = load_service(&a.ckpt)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("invalid address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(service, addr))?;
    Ok(())
}
