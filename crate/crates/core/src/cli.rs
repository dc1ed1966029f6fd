//! `stmil` command line: `synth`, `train`, `score`, `eval`.
//!
//! Every setting is a `key = value` pair. A config file supplies defaults,
//! `--key value` flags override it. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data or format error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use log::info;

use crate::bagging::GridGeometry;
use crate::error::{Error, Result};
use crate::evalkit::{
    curve_to_text, curve_rows, frame_level_auc, localization_hit_rate, parse_annotations_sized,
    read_score_dir, roc_to_text, tracks_from_planted, write_score_file, AnnotationTrack,
    FRAMES_PER_SEGMENT, SCORE_FILE_EXT,
};
use crate::feature_store::{
    generate_synthetic, load_manifest, write_atomic_if_changed, DatasetManifest, FileLoader,
    PlantedTruth, SyntheticSpec, PLANTED_FILE,
};
use crate::mil_train::{pool_manifest, score_maps, train, HeldOut, RankingLossConfig, TrainConfig};
use crate::net::{save_checkpoint, load_checkpoint};

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const PAIR_LOG_FILE: &str = "pair_log.txt";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const ROC_FILE: &str = "roc.csv";
pub const CURVES_DIR: &str = "curves";

/// Every recognised key with its flag help.
pub const KEYS: &[(&str, &str)] = &[
    ("manifest", "dataset manifest to read"),
    ("features", "directory that relative cuboid paths resolve against (default: the manifest's)"),
    ("checkpoint", "classifier checkpoint to write (train) or read (score)"),
    ("out", "output directory"),
    ("eval_manifest", "held-out manifest evaluated during training"),
    ("annotations", "annotation file (default: derived from planted.txt next to the manifest)"),
    ("scores", "directory of per-video score files (eval)"),
    ("seed", "seed for every random draw"),
    ("n_normal_videos", "synthetic normal videos"),
    ("n_anomalous_videos", "synthetic anomalous videos"),
    ("segments_per_video", "synthetic segments per video"),
    ("channels", "cuboid channels"),
    ("time", "cuboid time steps"),
    ("height", "cuboid height"),
    ("width", "cuboid width"),
    ("cell_size", "grid cell side in feature units"),
    ("delta", "mean shift of planted cells"),
    ("anomaly_cell_count", "planted cells per anomalous video"),
    ("split", "manifest split written by synth: TRAIN or TEST"),
    ("frame_size", "frame side in pixels"),
    ("pairs_per_batch", "bag pairs per iteration"),
    ("learning_rate", "optimizer step size"),
    ("optimizer", "sgd or adagrad"),
    ("epochs", "training epochs"),
    ("iterations", "training iterations (overrides epochs)"),
    ("eval_every", "held-out evaluation period in iterations"),
    ("precision", "f32 or f64"),
    ("dropout", "dropout probability"),
    ("bn_momentum", "batch-norm running-statistics momentum"),
    ("margin", "ranking margin"),
    ("lambda_sparsity", "weight of the positive-bag score sum"),
    ("lambda_smooth", "weight of the neighbouring-cell smoothness term"),
    ("weight_decay", "L2 penalty on weights"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub train: TrainConfig,
    pub loss: RankingLossConfig,
    pub frame_size: u32,
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig {
            frame_size: GridGeometry::default().frame_size,
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            frame_size: self.frame_size,
            feature_spatial: self.synth.dims.height as u32,
            cell_size: self.train.cell_size as u32,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "manifest" => self.manifest = path(),
            "features" => self.features = path(),
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = path(),
            "eval_manifest" => self.eval_manifest = path(),
            "annotations" => self.annotations = path(),
            "scores" => self.scores = path(),
            "seed" => {
                self.synth.seed = num(key, value)?;
                self.train.seed = self.synth.seed;
            }
            "n_normal_videos" => self.synth.n_normal_videos = num(key, value)?,
            "n_anomalous_videos" => self.synth.n_anomalous_videos = num(key, value)?,
            "segments_per_video" => self.synth.segments_per_video = num(key, value)?,
            "channels" => self.synth.dims.channels = num(key, value)?,
            "time" => self.synth.dims.time = num(key, value)?,
            "height" => self.synth.dims.height = num(key, value)?,
            "width" => self.synth.dims.width = num(key, value)?,
            "cell_size" => {
                self.synth.cell_size = num(key, value)?;
                self.train.cell_size = self.synth.cell_size;
            }
            "delta" => self.synth.delta = num(key, value)?,
            "anomaly_cell_count" => self.synth.anomaly_cell_count = num(key, value)?,
            "split" => self.synth.split = num(key, value)?,
            "frame_size" => self.frame_size = num(key, value)?,
            "pairs_per_batch" => self.train.pairs_per_batch = num(key, value)?,
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "optimizer" => self.train.optimizer = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "iterations" => self.train.iterations = Some(num(key, value)?),
            "eval_every" => self.train.eval_every = num(key, value)?,
            "precision" => self.train.precision = num(key, value)?,
            "dropout" => self.train.net.dropout = num(key, value)?,
            "bn_momentum" => self.train.net.bn_momentum = num(key, value)?,
            "margin" => self.loss.margin = num(key, value)?,
            "lambda_sparsity" => self.loss.lambda_sparsity = num(key, value)?,
            "lambda_smooth" => self.loss.lambda_smooth = num(key, value)?,
            "weight_decay" => self.loss.weight_decay = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        if key == "channels" {
            self.train.net.widths[0] = self.synth.dims.channels;
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            match self.set(k.trim(), v.trim()) {
                Err(Error::Config(m)) => return Err(Error::Config(format!("{}:{}: {m}", path.display(), i + 1))),
                other => other?,
            }
        }
        Ok(())
    }

    /// The effective settings as a config file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        for (k, p) in [
            ("manifest", &self.manifest),
            ("features", &self.features),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("eval_manifest", &self.eval_manifest),
            ("annotations", &self.annotations),
            ("scores", &self.scores),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        let s = &self.synth;
        let t = &self.train;
        put("seed", t.seed.to_string());
        put("n_normal_videos", s.n_normal_videos.to_string());
        put("n_anomalous_videos", s.n_anomalous_videos.to_string());
        put("segments_per_video", s.segments_per_video.to_string());
        put("channels", s.dims.channels.to_string());
        put("time", s.dims.time.to_string());
        put("height", s.dims.height.to_string());
        put("width", s.dims.width.to_string());
        put("cell_size", t.cell_size.to_string());
        put("delta", s.delta.to_string());
        put("anomaly_cell_count", s.anomaly_cell_count.to_string());
        put("split", s.split.to_string());
        put("frame_size", self.frame_size.to_string());
        put("pairs_per_batch", t.pairs_per_batch.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("optimizer", t.optimizer.to_string());
        put("epochs", t.epochs.to_string());
        if let Some(n) = t.iterations {
            put("iterations", n.to_string());
        }
        put("eval_every", t.eval_every.to_string());
        put("precision", t.precision.to_string());
        put("dropout", t.net.dropout.to_string());
        put("bn_momentum", t.net.bn_momentum.to_string());
        put("margin", self.loss.margin.to_string());
        put("lambda_sparsity", self.loss.lambda_sparsity.to_string());
        put("lambda_smooth", self.loss.lambda_smooth.to_string());
        put("weight_decay", self.loss.weight_decay.to_string());
        out
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("missing --{}", key.replace('_', "-"))))
    }

    fn loader(&self, manifest_path: &Path) -> FileLoader {
        match &self.features {
            Some(dir) => FileLoader::new(dir),
            None => FileLoader::for_manifest(manifest_path),
        }
    }

    /// Annotations from `--annotations`, else the planted truth beside `manifest`.
    fn tracks(&self, manifest: Option<&Path>) -> Result<Vec<AnnotationTrack>> {
        if let Some(p) = &self.annotations {
            return parse_annotations_sized(p, self.frame_size);
        }
        let planted = manifest
            .and_then(Path::parent)
            .map(|d| d.join(PLANTED_FILE))
            .filter(|p| p.exists())
            .ok_or_else(|| Error::Config("missing --annotations".into()))?;
        tracks_from_planted(&PlantedTruth::load(planted)?, &self.geometry(), FRAMES_PER_SEGMENT as u64)
    }
}

fn distinct(paths: &[&Path]) -> Result<()> {
    for (i, a) in paths.iter().enumerate() {
        if paths[..i].contains(a) {
            return Err(Error::Config(format!("{} is written twice", a.display())));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.require(&cfg.out, "out")?;
    cfg.geometry().validate()?;
    let generated = generate_synthetic(&cfg.synth, dir)?;
    let tracks = tracks_from_planted(&generated.truth, &cfg.geometry(), FRAMES_PER_SEGMENT as u64)?;
    let ann = crate::evalkit::annotations_to_text(&tracks);
    let written = generated.files_written + write_atomic_if_changed(&dir.join(ANNOTATIONS_FILE), ann.as_bytes())? as usize;
    let s = &cfg.synth;
    let _ = writeln!(
        out,
        "{} manifest entries: {} normal + {} anomalous videos x {} segments, dims {}, {}x{} cells",
        generated.manifest.len(),
        s.n_normal_videos,
        s.n_anomalous_videos,
        s.segments_per_video,
        s.dims,
        s.grid().0,
        s.grid().1
    );
    if written == 0 {
        let _ = writeln!(out, "unchanged");
    } else {
        let _ = writeln!(out, "wrote {written} files under {}", dir.display());
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let manifest_path = cfg.require(&cfg.manifest, "manifest")?;
    let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let log_dir = match &cfg.out {
        Some(d) => d.clone(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (log_path, pair_path, cfg_path) = (
        log_dir.join(TRAIN_LOG_FILE),
        log_dir.join(PAIR_LOG_FILE),
        log_dir.join(RUN_CONFIG_FILE),
    );
    distinct(&[ckpt, &log_path, &pair_path, &cfg_path])?;
    cfg.train.validate()?;
    cfg.loss.validate()?;

    let manifest = load_manifest(manifest_path)?;
    let held_out = match &cfg.eval_manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            Some(HeldOut::load(&m, &cfg.loader(p), cfg.tracks(Some(p))?, cfg.train.cell_size)?)
        }
        None => None,
    };
    let (params, log) = train(&manifest, &cfg.loader(manifest_path), &cfg.train, &cfg.loss, held_out.as_ref())?;
    if !log_dir.as_os_str().is_empty() {
        create_dir(&log_dir)?;
    }
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&params, ckpt)?;
    write_file(&log_path, &log.to_text())?;
    write_file(&pair_path, &log.pairs_to_text())?;
    write_file(&cfg_path, &cfg.to_text())?;
    let _ = writeln!(out, "trained {} iterations; checkpoint {}", log.entries.len(), ckpt.display());
    if let Some(auc) = log.final_auc() {
        let _ = writeln!(out, "final held-out AUC: {auc:.6}");
    }
    Ok(())
}

pub fn cmd_score(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let manifest_path = cfg.require(&cfg.manifest, "manifest")?;
    let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let dir = cfg.require(&cfg.out, "out")?;
    let params = load_checkpoint(ckpt)?;
    let manifest: DatasetManifest = load_manifest(manifest_path)?;
    let bags = pool_manifest(&manifest, &cfg.loader(manifest_path), cfg.train.cell_size)?;
    let maps = score_maps(&params, &bags)?;
    create_dir(dir)?;
    for m in &maps {
        write_score_file(m, dir.join(format!("{}.{SCORE_FILE_EXT}", m.video_id)))?;
    }
    let _ = writeln!(out, "scored {} segments of {} videos into {}", bags.len(), maps.len(), dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let scores_dir = cfg.require(&cfg.scores, "scores")?;
    let dir = cfg.require(&cfg.out, "out")?;
    let maps = read_score_dir(scores_dir)?;
    let tracks = cfg.tracks(cfg.manifest.as_deref())?;
    let roc = frame_level_auc(&maps, &tracks, FRAMES_PER_SEGMENT)?;
    let _ = writeln!(out, "frame-level AUC: {:.6}", roc.auc);
    if tracks.iter().any(|t| !t.boxes.is_empty()) {
        let hit = localization_hit_rate(&maps, &tracks, &cfg.geometry(), FRAMES_PER_SEGMENT)?;
        let _ = writeln!(out, "localization hit rate: {hit:.6}");
    }
    let curves = dir.join(CURVES_DIR);
    create_dir(&curves)?;
    write_file(&dir.join(ROC_FILE), &roc_to_text(&roc))?;
    for m in &maps {
        let track = tracks.iter().find(|t| t.video_id == m.video_id);
        let rows = curve_rows(m, track, FRAMES_PER_SEGMENT)?;
        write_file(&curves.join(format!("{}.csv", m.video_id)), &curve_to_text(&rows))?;
    }
    info!("wrote {} curves to {}", maps.len(), curves.display());
    Ok(())
}

fn command() -> Command {
    let args: Vec<Arg> = std::iter::once(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value settings file; flags override it"),
    )
    .chain(KEYS.iter().map(|&(key, help)| {
        let flag = key.replace('_', "-");
        let mut arg = Arg::new(key).long(flag.clone()).value_name("VALUE").help(help);
        if flag != key {
            arg = arg.alias(key);
        }
        arg
    }))
    .collect();
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(args.clone());
    Command::new("stmil")
        .about("Spatial multiple-instance anomaly detection over video feature cuboids")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("synth", "generate a synthetic dataset with planted anomalies"))
        .subcommand(sub("train", "train the classifier with the ranking loss"))
        .subcommand(sub("score", "write per-cell scores for every manifest segment"))
        .subcommand(sub("eval", "frame-level ROC/AUC, localization and curve exports"))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::new();
    if let Some(path) = m.get_one::<String>("config") {
        let path = Path::new(path);
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, path)?;
    }
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub).and_then(|cfg| match name {
        "synth" => cmd_synth(&cfg, out),
        "train" => cmd_train(&cfg, out),
        "score" => cmd_score(&cfg, out),
        "eval" => cmd_eval(&cfg, out),
        _ => unreachable!(),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
