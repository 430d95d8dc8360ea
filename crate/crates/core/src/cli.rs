//! Pipeline commands: synthesize scenes, project sparse labels, generate
//! pseudo-labels, train, evaluate, and render label visualizations.
//!
//! All knobs live in one JSON config (unknown keys rejected); individual
//! keys can be overridden on the command line with `--set key=value` using
//! dotted paths for nested fields.

use crate::datasets::{
    colorize_labels, read_calib, read_kitti_labels, read_kitti_points, read_label_image, read_ppm,
    synth_scene, write_kitti_labels, write_kitti_points, write_label_image, write_ppm, LabelImage,
    Scene, SynthParams,
};
use crate::distill::{history_jsonl, infer_student, train, Models, TrainConfig, TrainData};
use crate::labelgen::{generate_pseudo_labels, ppc_gtg, PLGParams, ToySegmenter};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::{ckpt, exec, Error, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Seed offset separating the held-out evaluation split from training
/// scenes.
const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene_dir: String,
    pub label_dir: String,
    pub checkpoint_path: String,
    pub history_path: String,
    pub report_path: String,
    pub render_dir: String,
    pub scene_count: usize,
    pub eval_scene_count: usize,
    pub seed: u64,

    // scene synthesis
    pub width: usize,
    pub height: usize,
    pub class_count: u16,
    pub instances: usize,
    pub points_per_class: usize,
    pub sparsity: f64,

    // pseudo-label generation
    pub lr_rows: usize,
    pub lr_cols: usize,
    pub theta_h: f64,
    pub theta_l: f64,
    pub theta_stability: f64,
    pub theta_box_nms: f64,
    pub tau: f64,
    pub delta: f64,

    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene_dir: "data/scenes".into(),
            label_dir: "data/labels".into(),
            checkpoint_path: "data/model.ckpt".into(),
            history_path: "data/history.jsonl".into(),
            report_path: "data/report.json".into(),
            render_dir: "data/render".into(),
            scene_count: 4,
            eval_scene_count: 2,
            seed: 0,
            width: 64,
            height: 64,
            class_count: 4,
            instances: 3,
            points_per_class: 8,
            sparsity: 0.05,
            // quarter-resolution hint grid; the reference mask size for
            // full-resolution imagery is 256x256
            lr_rows: 16,
            lr_cols: 16,
            theta_h: 16.0,
            theta_l: 1.0,
            theta_stability: 0.9,
            theta_box_nms: 0.7,
            tau: 0.0,
            delta: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            width: self.width,
            height: self.height,
            class_count: self.class_count,
            instances: self.instances,
            points_per_class: self.points_per_class,
            sparsity: self.sparsity,
        }
    }

    pub fn plg_params(&self) -> PLGParams {
        PLGParams {
            lr_size: (self.lr_rows, self.lr_cols),
            theta_h: self.theta_h,
            theta_l: self.theta_l,
            theta_stability: self.theta_stability,
            theta_box_nms: self.theta_box_nms,
            tau: self.tau,
            delta: self.delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = |field: &str, msg: String| Error::Validation(format!("{field}: {msg}"));
        if self.scene_count == 0 {
            return Err(named("scene_count", "must be >= 1".into()));
        }
        if self.eval_scene_count == 0 {
            return Err(named("eval_scene_count", "must be >= 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(named("width/height", "must be >= 1".into()));
        }
        if !(self.class_count >= 2 && self.class_count <= 27) {
            return Err(named("class_count", "must be in 2..=27".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(named("sparsity", "must be in (0,1]".into()));
        }
        if self.lr_rows == 0 || self.lr_rows > self.height {
            return Err(named("lr_rows", format!("must be in 1..={}", self.height)));
        }
        if self.lr_cols == 0 || self.lr_cols > self.width {
            return Err(named("lr_cols", format!("must be in 1..={}", self.width)));
        }
        if !(self.theta_h > self.theta_l && self.theta_l > 0.0) {
            return Err(named("theta_h/theta_l", "need theta_h > theta_l > 0".into()));
        }
        if !(self.theta_stability > 0.0 && self.theta_stability <= 1.0) {
            return Err(named("theta_stability", "must be in (0,1]".into()));
        }
        if !(self.theta_box_nms > 0.0 && self.theta_box_nms <= 1.0) {
            return Err(named("theta_box_nms", "must be in (0,1]".into()));
        }
        if self.delta <= 0.0 {
            return Err(named("delta", "must be > 0".into()));
        }
        self.train
            .validate()
            .map_err(|e| Error::Validation(format!("train.{e}")))?;
        Ok(())
    }
}

/// Loads the JSON config and applies `key=value` overrides (dotted paths
/// address nested fields). Unknown keys fail validation.
pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("config parse: {e}")))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set needs key=value, got '{set}'")))?;
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut parts = key.split('.').collect::<Vec<&str>>();
        let last = parts.pop().filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Validation(format!("--set {key}: empty key")))?;
        let mut node = &mut value;
        for part in parts {
            node = node
                .as_object_mut()
                .ok_or_else(|| Error::Validation(format!("--set {key}: not an object path")))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| Error::Validation(format!("--set {key}: not an object path")))?
            .insert(last.to_string(), new);
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Validation(format!("config schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// on-disk layout
// ---------------------------------------------------------------------------

fn scene_paths(cfg: &RunConfig, i: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let root = Path::new(&cfg.scene_dir);
    (
        root.join("velodyne").join(format!("{i:04}.bin")),
        root.join("labels").join(format!("{i:04}.label")),
        root.join("image").join(format!("{i:04}.ppm")),
        root.join("calib").join(format!("{i:04}.txt")),
    )
}

fn label_path(cfg: &RunConfig, kind: &str, i: usize) -> PathBuf {
    Path::new(&cfg.label_dir).join(kind).join(format!("{i:04}.label"))
}

fn calib_text(scene: &Scene) -> String {
    let c = &scene.cam;
    let p2 = [c.fx, 0.0, c.cx, 0.0, 0.0, c.fy, c.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
    let tr: Vec<f64> = (0..3)
        .flat_map(|r| (0..4).map(move |k| r * 4 + k))
        .map(|i| c.extrinsic.m[i])
        .collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!("P2: {}\nTr: {}\n", fmt(&p2), fmt(&tr))
}

fn load_scene(cfg: &RunConfig, i: usize) -> Result<Scene> {
    let (pts, lbl, img, cal) = scene_paths(cfg, i);
    let cloud = read_kitti_points(&pts)?;
    let (point_semantic, point_instance) = read_kitti_labels(&lbl)?;
    if point_semantic.len() != cloud.len() {
        return Err(Error::Format(format!("scene {i}: label/point count mismatch")));
    }
    let image = read_ppm(&img)?;
    let cam = read_calib(&cal, image.width, image.height)?;
    Ok(Scene {
        image,
        cloud,
        point_semantic,
        point_instance,
        cam,
        class_count: cfg.class_count,
    })
}

fn load_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    (0..cfg.scene_count).map(|i| load_scene(cfg, i)).collect()
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let params = cfg.synth_params();
    let scenes = exec::map_ordered(
        (0..cfg.scene_count).collect(),
        |i| synth_scene(cfg.seed + i as u64, &params),
    );
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let (pts, lbl, img, cal) = scene_paths(cfg, i);
        for p in [&pts, &lbl, &img, &cal] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        write_kitti_points(&scene.cloud, &pts)?;
        write_kitti_labels(&scene.point_semantic, &scene.point_instance, &lbl)?;
        write_ppm(&scene.image, &img)?;
        std::fs::write(&cal, calib_text(&scene))?;
    }
    Ok(())
}

pub fn cmd_project(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(cfg)?;
    for (i, scene) in scenes.iter().enumerate() {
        let sparse = ppc_gtg(scene)?;
        let out = label_path(cfg, "sparse", i);
        std::fs::create_dir_all(out.parent().unwrap())?;
        write_label_image(&sparse, &out)?;
    }
    Ok(())
}

pub fn cmd_plg(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(cfg)?;
    let params = cfg.plg_params();
    let segmenter = ToySegmenter;
    let results = exec::map_ordered(
        scenes.iter().enumerate().collect::<Vec<_>>(),
        |(i, scene)| -> Result<(usize, LabelImage)> {
            let sparse_path = label_path(cfg, "sparse", i);
            let sparse = if sparse_path.exists() {
                read_label_image(&sparse_path, scene.image.width, scene.image.height)?
            } else {
                ppc_gtg(scene)?
            };
            let pseudo = generate_pseudo_labels(scene, &sparse, &segmenter, &params)?;
            Ok((i, pseudo))
        },
    );
    for r in results {
        let (i, pseudo) = r?;
        let out = label_path(cfg, "pseudo", i);
        std::fs::create_dir_all(out.parent().unwrap())?;
        write_label_image(&pseudo, &out)?;
    }
    Ok(())
}

fn train_data(cfg: &RunConfig, scenes: Vec<Scene>) -> Result<TrainData> {
    let mut pixel_labels = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let pseudo = label_path(cfg, "pseudo", i);
        let sparse = label_path(cfg, "sparse", i);
        let labels = if pseudo.exists() {
            read_label_image(&pseudo, scene.image.width, scene.image.height)?
        } else if sparse.exists() {
            read_label_image(&sparse, scene.image.width, scene.image.height)?
        } else {
            ppc_gtg(scene)?
        };
        pixel_labels.push(labels);
    }
    TrainData::with_labels(scenes, pixel_labels)
}

fn eval_models(cfg: &RunConfig, models: &Models) -> Result<EvalReport> {
    let params = cfg.synth_params();
    let mut cm = ConfusionMatrix::new(cfg.class_count as usize)?;
    for i in 0..cfg.eval_scene_count {
        let scene = synth_scene(cfg.seed + EVAL_SEED_OFFSET + i as u64, &params)?;
        let preds = infer_student(&models.student, &scene.cloud)?;
        cm.update(&scene.point_semantic, &preds)?;
    }
    EvalReport::from_matrix(&cm)
}

fn write_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    if let Some(dir) = Path::new(&cfg.report_path).parent() {
        std::fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report json: {e}")))?;
    std::fs::write(&cfg.report_path, json + "\n")?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let scenes = load_scenes(cfg)?;
    let data = train_data(cfg, scenes)?;
    let (models, history) = train(&train_cfg, &data)?;

    if let Some(dir) = Path::new(&cfg.checkpoint_path).parent() {
        std::fs::create_dir_all(dir)?;
    }
    ckpt::save_models(&models, Path::new(&cfg.checkpoint_path))?;
    if let Some(dir) = Path::new(&cfg.history_path).parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&cfg.history_path, history_jsonl(&history)?)?;
    // the evaluation a later cmd_eval must reproduce exactly
    write_report(cfg, &eval_models(cfg, &models)?)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let models = ckpt::load_models(Path::new(&cfg.checkpoint_path))?;
    write_report(cfg, &eval_models(cfg, &models)?)
}

pub fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(cfg)?;
    std::fs::create_dir_all(&cfg.render_dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        for kind in ["sparse", "pseudo"] {
            let src = label_path(cfg, kind, i);
            if !src.exists() {
                continue;
            }
            let labels = read_label_image(&src, scene.image.width, scene.image.height)?;
            let img = colorize_labels(&labels);
            let out = Path::new(&cfg.render_dir).join(format!("{kind}_{i:04}.ppm"));
            write_ppm(&img, &out)?;
        }
        let out = Path::new(&cfg.render_dir).join(format!("image_{i:04}.ppm"));
        write_ppm(&scene.image, &out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "elite", about = "LiDAR segmentation pipeline: synth, label, distill, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Override single config keys, e.g. --set train.learning_rate=0.1
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Synth,
    /// Project point labels into sparse pixel labels.
    Project,
    /// Densify sparse labels into pseudo-labels.
    Plg,
    /// Train the student with patch-to-point distillation.
    Train,
    /// Evaluate a checkpoint on the held-out split.
    Eval,
    /// Render label visualizations as PPM images.
    Render,
}

/// 0 success, 1 validation error, 2 runtime error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(&cli.config, &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Project => cmd_project(&cfg),
        Command::Plg => cmd_plg(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Render => cmd_render(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
