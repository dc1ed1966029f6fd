//! Per-video cell score maps and their text files.
//!
//! A score file holds one line per segment: `<segment_index> <s_0> ... <s_n-1>`,
//! cells in row-major order. Values use the shortest representation that
//! parses back to the same `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::bagging::{cell_to_pixel_region, GridGeometry, PixelRegion};
use crate::error::{Error, Result};

pub const SCORE_FILE_EXT: &str = "scores";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub video_id: String,
    pub grid_cols: usize,
    pub segments: BTreeMap<u32, Vec<f32>>,
}

impl ScoreMap {
    pub fn new(video_id: impl Into<String>, grid_cols: usize) -> Self {
        ScoreMap {
            video_id: video_id.into(),
            grid_cols,
            segments: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, segment_index: u32, cells: Vec<f32>) -> Result<()> {
        if cells.is_empty() || cells.len() != self.grid_cols * self.grid_cols {
            return Err(Error::Shape(format!(
                "segment {segment_index} has {} cells, grid is {c}x{c}",
                cells.len(),
                c = self.grid_cols
            )));
        }
        if let Some(i) = cells.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Shape(format!(
                "segment {segment_index} cell {i} score {} outside [0, 1]",
                cells[i]
            )));
        }
        self.segments.insert(segment_index, cells);
        Ok(())
    }

    /// Max over the segment's cells.
    pub fn segment_score(&self, segment_index: u32) -> Option<f32> {
        self.segments
            .get(&segment_index)
            .map(|c| c.iter().copied().fold(f32::NEG_INFINITY, f32::max))
    }

    /// First cell attaining the segment max.
    pub fn argmax_cell(&self, segment_index: u32) -> Option<(usize, usize)> {
        let cells = self.segments.get(&segment_index)?;
        let mut best = 0;
        for (i, &s) in cells.iter().enumerate() {
            if s > cells[best] {
                best = i;
            }
        }
        Some((best / self.grid_cols, best % self.grid_cols))
    }

    pub fn argmax_region(&self, segment_index: u32, geom: &GridGeometry) -> Option<Result<PixelRegion>> {
        self.argmax_cell(segment_index)
            .map(|(r, c)| cell_to_pixel_region(r, c, geom))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (seg, cells) in &self.segments {
            out.push_str(&seg.to_string());
            for s in cells {
                out.push(' ');
                out.push_str(&s.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, video_id: &str, path: &Path) -> Result<Self> {
        let mut map: Option<ScoreMap> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let seg = fields
                .next()
                .unwrap()
                .parse::<u32>()
                .map_err(|e| err(format!("segment index: {e}")))?;
            let cells = fields
                .map(|s| s.parse::<f32>().map_err(|e| err(format!("score {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let cols = (cells.len() as f64).sqrt().round() as usize;
            let m = map.get_or_insert_with(|| ScoreMap::new(video_id, cols));
            if m.segments.contains_key(&seg) {
                return Err(err(format!("duplicate segment {seg}")));
            }
            m.insert(seg, cells).map_err(|e| err(e.to_string()))?;
        }
        Ok(map.unwrap_or_else(|| ScoreMap::new(video_id, 0)))
    }
}

pub fn write_score_file(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_score_file(path: impl AsRef<Path>, video_id: &str) -> Result<ScoreMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScoreMap::parse(&text, video_id, path)
}

/// Reads every `<video_id>.scores` file in `dir`, sorted by video id.
pub fn read_score_dir(dir: impl AsRef<Path>) -> Result<Vec<ScoreMap>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SCORE_FILE_EXT))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            read_score_file(p, &id)
        })
        .collect()
}

/// Piecewise-constant per-frame scores: frame `f` takes the score of segment
/// `f / frames_per_segment`. Segments must run contiguously from 0.
pub fn frame_scores(map: &ScoreMap, frames_per_segment: usize) -> Result<Vec<f32>> {
    let n = map.segments.len();
    let mut out = Vec::with_capacity(n * frames_per_segment);
    for seg in 0..n as u32 {
        let s = map.segment_score(seg).ok_or_else(|| Error::MissingSegment {
            video_id: map.video_id.clone(),
            segment_index: seg,
        })?;
        out.extend(std::iter::repeat_n(s, frames_per_segment));
    }
    Ok(out)
}

/// Like [`frame_scores`] but sized to `n_frames`: trailing frames past the last
/// segment reuse its score, excess frames are dropped.
pub fn frame_scores_for(map: &ScoreMap, frames_per_segment: usize, n_frames: usize) -> Result<Vec<f32>> {
    let mut v = frame_scores(map, frames_per_segment)?;
    let last = v.last().copied().unwrap_or(0.0);
    v.resize(n_frames, last);
    Ok(v)
}
