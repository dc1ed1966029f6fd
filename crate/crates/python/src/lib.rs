//! Python bindings: synthetic data, the classifier, the ranking loss, ROC/AUC,
//! evaluation over score directories, and the full command line.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use stmil::bagging::GridGeometry;
use stmil::evalkit::{self, AnnotationTrack, ScoreMap, FRAMES_PER_SEGMENT};
use stmil::feature_store::{self, Dims, Split, SyntheticSpec};
use stmil::mil_train::{self, BagScores, RankingLossConfig};
use stmil::net::{self, ClassifierParams, NetConfig};

create_exception!(pystmil, StmilError, PyException);

fn err(e: stmil::Error) -> PyErr {
    StmilError::new_err(e.to_string())
}

/// Generates a synthetic dataset under `out_dir`; returns the number of files written.
#[pyfunction]
#[pyo3(signature = (
    out_dir, seed = 0, delta = 4.0, n_normal_videos = 20, n_anomalous_videos = 20,
    segments_per_video = 4, channels = 528, time = 4, height = 14, width = 14,
    cell_size = 2, anomaly_cell_count = 1, split = "TRAIN",
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out_dir: PathBuf,
    seed: u64,
    delta: f32,
    n_normal_videos: usize,
    n_anomalous_videos: usize,
    segments_per_video: usize,
    channels: usize,
    time: usize,
    height: usize,
    width: usize,
    cell_size: usize,
    anomaly_cell_count: usize,
    split: &str,
) -> PyResult<usize> {
    let spec = SyntheticSpec {
        n_normal_videos,
        n_anomalous_videos,
        segments_per_video,
        dims: Dims::new(channels, time, height, width),
        cell_size,
        delta,
        anomaly_cell_count,
        seed,
        split: split.parse::<Split>().map_err(StmilError::new_err)?,
    };
    let out = feature_store::generate_synthetic(&spec, out_dir).map_err(err)?;
    Ok(out.files_written)
}

/// Manifest rows as (cuboid_path, video_id, segment_index, label).
#[pyfunction]
fn load_manifest(path: PathBuf) -> PyResult<Vec<(String, String, u32, String)>> {
    let m = feature_store::load_manifest(path).map_err(err)?;
    Ok(m.entries
        .into_iter()
        .map(|e| (e.cuboid_path, e.video_id, e.segment_index, e.label.to_string()))
        .collect())
}

type CuboidValues = ((usize, usize, usize, usize), Vec<f32>);

/// Reads a `.fcub` file: ((C, T, H, W), values in C-order).
#[pyfunction]
fn read_cuboid(path: PathBuf) -> PyResult<CuboidValues> {
    let c = feature_store::read_cuboid(path).map_err(err)?;
    let dims = c.data.dim();
    Ok((dims, c.data.iter().copied().collect()))
}

/// Trapezoidal area under the ROC curve.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(evalkit::roc_auc(&scores, &labels).map_err(err)?.auc)
}

/// Ranking loss of a (positive, negative) pair of 49-cell score grids;
/// returns (loss, d_loss/d_pos, d_loss/d_neg).
#[pyfunction]
#[pyo3(signature = (pos, neg, margin = 1.0, lambda_sparsity = 0.0, lambda_smooth = 0.0, grid_cols = 7))]
fn ranking_loss(
    pos: Vec<f64>,
    neg: Vec<f64>,
    margin: f64,
    lambda_sparsity: f64,
    lambda_smooth: f64,
    grid_cols: usize,
) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let cfg = RankingLossConfig {
        margin,
        lambda_sparsity,
        lambda_smooth,
        weight_decay: 0.0,
    };
    cfg.validate().map_err(err)?;
    let pos = BagScores::new(pos, grid_cols).map_err(err)?;
    let neg = BagScores::new(neg, grid_cols).map_err(err)?;
    let out = mil_train::ranking_loss(&pos, &neg, &cfg);
    Ok((out.loss, out.d_pos, out.d_neg))
}

#[pyclass(module = "pystmil")]
struct Classifier {
    params: ClassifierParams<f32>,
}

#[pymethods]
impl Classifier {
    #[new]
    #[pyo3(signature = (seed = 0, widths = None, dropout = 0.6, bn_momentum = 0.1))]
    fn new(seed: u64, widths: Option<Vec<usize>>, dropout: f32, bn_momentum: f32) -> PyResult<Self> {
        let cfg = NetConfig {
            widths: widths.unwrap_or_else(|| net::DEFAULT_WIDTHS.to_vec()),
            dropout,
            bn_momentum,
        };
        Ok(Classifier {
            params: net::init(seed, &cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Classifier {
            params: net::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        net::save_checkpoint(&self.params, path).map_err(err)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.params.widths.clone()
    }

    /// EVAL-mode scores for a batch of pooled feature rows.
    fn predict(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let width = self.params.input_width();
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(StmilError::new_err(format!("row of {} features, expected {width}", r.len())));
        }
        let x = Array2::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| StmilError::new_err(e.to_string()))?;
        Ok(self.params.predict(x.view()).map_err(err)?.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Classifier(widths={:?}, dropout={})", self.params.widths, self.params.dropout)
    }
}

fn tracks_for(annotations: Option<PathBuf>, planted: Option<PathBuf>, geom: &GridGeometry) -> PyResult<Vec<AnnotationTrack>> {
    match (annotations, planted) {
        (Some(a), _) => evalkit::parse_annotations_sized(a, geom.frame_size).map_err(err),
        (None, Some(p)) => {
            let truth = feature_store::PlantedTruth::load(p).map_err(err)?;
            evalkit::tracks_from_planted(&truth, geom, FRAMES_PER_SEGMENT as u64).map_err(err)
        }
        (None, None) => Err(StmilError::new_err("need annotations or planted")),
    }
}

/// Frame-level AUC and localization hit rate of a directory of score files.
#[pyfunction]
#[pyo3(signature = (scores_dir, annotations = None, planted = None))]
fn evaluate(scores_dir: PathBuf, annotations: Option<PathBuf>, planted: Option<PathBuf>) -> PyResult<(f64, Option<f64>)> {
    let geom = GridGeometry::default();
    let maps = evalkit::read_score_dir(scores_dir).map_err(err)?;
    let tracks = tracks_for(annotations, planted, &geom)?;
    let auc = evalkit::frame_level_auc(&maps, &tracks, FRAMES_PER_SEGMENT).map_err(err)?.auc;
    let hit = if tracks.iter().any(|t| !t.boxes.is_empty()) {
        Some(evalkit::localization_hit_rate(&maps, &tracks, &geom, FRAMES_PER_SEGMENT).map_err(err)?)
    } else {
        None
    };
    Ok((auc, hit))
}

/// One score file as {segment_index: 49 cell scores}.
#[pyfunction]
fn read_scores(path: PathBuf) -> PyResult<std::collections::BTreeMap<u32, Vec<f32>>> {
    let vid = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let map: ScoreMap = evalkit::read_score_file(&path, &vid).map_err(err)?;
    Ok(map.segments)
}

/// Runs the command line in-process; returns (exit_code, stdout, stderr).
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut errs) = (Vec::new(), Vec::new());
    let argv = std::iter::once("stmil".to_string()).chain(args);
    let code = stmil::cli::run(argv, &mut out, &mut errs);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&errs).into_owned(),
    )
}

#[pymodule]
fn pystmil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StmilError", m.py().get_type::<StmilError>())?;
    m.add("FRAMES_PER_SEGMENT", FRAMES_PER_SEGMENT)?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(read_cuboid, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
