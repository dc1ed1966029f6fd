//! Frame-level evaluation: ground truth, ROC/AUC, spatial hit rate and
//! per-video score curve exports.
//!
//! A segment's score is the max over its cells, held constant across its
//! frames.

mod annotations;
mod roc;
mod scores;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;

use crate::bagging::GridGeometry;
use crate::error::{Error, Result};

pub use annotations::{
    annotations_to_text, parse_annotations, parse_annotations_sized, parse_annotations_str,
    tracks_from_planted, write_annotations, AnnotationTrack, FrameBox,
};
pub use roc::{roc_auc, RocCurve, RocPoint};
pub use scores::{
    frame_scores, frame_scores_for, read_score_dir, read_score_file, write_score_file, ScoreMap,
    SCORE_FILE_EXT,
};

pub const FRAMES_PER_SEGMENT: usize = 64;

/// 1 inside any interval, else 0. Intervals past `n_frames` are clipped.
pub fn frame_ground_truth(track: &AnnotationTrack, n_frames: usize) -> Vec<u8> {
    let mut gt = vec![0u8; n_frames];
    for &(s, e) in &track.intervals {
        if e as usize > n_frames {
            warn!(
                "{}: interval [{s}, {e}) clipped to {n_frames} frames",
                track.video_id
            );
        }
        let (s, e) = ((s as usize).min(n_frames), (e as usize).min(n_frames));
        gt[s..e].fill(1);
    }
    gt
}

/// Concatenated per-frame scores and labels across videos, in `maps` order.
/// Videos without a track are treated as fully normal.
pub fn frame_level_pairs(
    maps: &[ScoreMap],
    tracks: &[AnnotationTrack],
    frames_per_segment: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let by_id: HashMap<&str, &AnnotationTrack> = tracks.iter().map(|t| (t.video_id.as_str(), t)).collect();
    if !tracks.is_empty() && !maps.iter().any(|m| by_id.contains_key(m.video_id.as_str())) {
        return Err(Error::NoOverlap);
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for map in maps {
        let fs = frame_scores(map, frames_per_segment)?;
        let gt = match by_id.get(map.video_id.as_str()) {
            Some(t) => frame_ground_truth(t, fs.len()),
            None => vec![0; fs.len()],
        };
        scores.extend(fs.iter().map(|&s| s as f64));
        labels.extend(gt.iter().map(|&g| g == 1));
    }
    Ok((scores, labels))
}

pub fn frame_level_auc(
    maps: &[ScoreMap],
    tracks: &[AnnotationTrack],
    frames_per_segment: usize,
) -> Result<RocCurve> {
    let (scores, labels) = frame_level_pairs(maps, tracks, frames_per_segment)?;
    roc_auc(&scores, &labels)
}

/// Fraction of box-annotated frames whose segment's top-scoring cell
/// intersects one of that frame's boxes. Frames in unscored segments are skipped.
pub fn localization_hit_rate(
    maps: &[ScoreMap],
    tracks: &[AnnotationTrack],
    geom: &GridGeometry,
    frames_per_segment: usize,
) -> Result<f64> {
    let maps: HashMap<&str, &ScoreMap> = maps.iter().map(|m| (m.video_id.as_str(), m)).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for track in tracks {
        if track.boxes.is_empty() {
            continue;
        }
        let Some(map) = maps.get(track.video_id.as_str()) else {
            continue;
        };
        let mut per_frame: BTreeMap<u64, Vec<_>> = BTreeMap::new();
        for b in &track.boxes {
            per_frame.entry(b.frame).or_default().push(b.region);
        }
        let mut skipped = 0;
        for (frame, boxes) in per_frame {
            let seg = (frame / frames_per_segment as u64) as u32;
            let Some(region) = map.argmax_region(seg, geom) else {
                skipped += 1;
                continue;
            };
            let region = region?;
            total += 1;
            hits += boxes.iter().any(|b| b.intersects(&region)) as usize;
        }
        if skipped > 0 {
            warn!("{}: {skipped} annotated frames fall outside scored segments", track.video_id);
        }
    }
    if total == 0 {
        return Err(Error::NoAnnotatedFrames);
    }
    Ok(hits as f64 / total as f64)
}

/// One row of an exported curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub frame: usize,
    pub ground_truth: u8,
    pub score: f32,
}

pub const CURVE_HEADER: &str = "frame,ground_truth,score";

/// Six significant digits.
fn fmt_score(s: f32) -> String {
    format!("{s:.5e}")
}

pub fn curve_rows(map: &ScoreMap, track: Option<&AnnotationTrack>, frames_per_segment: usize) -> Result<Vec<CurveRow>> {
    let scores = frame_scores(map, frames_per_segment)?;
    let gt = match track {
        Some(t) => frame_ground_truth(t, scores.len()),
        None => vec![0; scores.len()],
    };
    Ok(scores
        .into_iter()
        .zip(gt)
        .enumerate()
        .map(|(frame, (score, ground_truth))| CurveRow {
            frame,
            ground_truth,
            score,
        })
        .collect())
}

pub fn curve_to_text(rows: &[CurveRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 24);
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.frame, r.ground_truth, fmt_score(r.score)));
    }
    out
}

/// Writes `frame,ground_truth,score` rows, one per frame.
pub fn export_curves(
    map: &ScoreMap,
    track: Option<&AnnotationTrack>,
    path: impl AsRef<Path>,
    frames_per_segment: usize,
) -> Result<()> {
    let path = path.as_ref();
    let rows = curve_rows(map, track, frames_per_segment)?;
    fs::write(path, curve_to_text(&rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_curves(text: &str, path: &Path) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header {CURVE_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", f.len())));
            }
            let ground_truth = f[1].parse::<u8>().map_err(|e| err(e.to_string()))?;
            if ground_truth > 1 {
                return Err(err(format!("ground truth {ground_truth} not 0/1")));
            }
            Ok(CurveRow {
                frame: f[0].parse().map_err(|e| err(format!("{e}")))?,
                ground_truth,
                score: f[2].parse().map_err(|e| err(format!("{e}")))?,
            })
        })
        .collect()
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curves(&text, path)
}

/// `threshold,fpr,tpr` rows; the first threshold is `inf`.
pub fn roc_to_text(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
