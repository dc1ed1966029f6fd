//! Evaluation-only ground truth.
//!
//! `T <video_id> <start_frame> <end_frame>` adds a half-open temporal interval;
//! `B <video_id> <frame> <x_min> <y_min> <x_max> <y_max>` adds a pixel box.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::bagging::{cell_to_pixel_region, GridGeometry, PixelRegion};
use crate::error::{Error, Result};
use crate::feature_store::PlantedTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameBox {
    pub frame: u64,
    pub region: PixelRegion,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationTrack {
    pub video_id: String,
    /// Sorted, non-overlapping `[start, end)` intervals.
    pub intervals: Vec<(u64, u64)>,
    pub boxes: Vec<FrameBox>,
}

impl AnnotationTrack {
    pub fn new(video_id: impl Into<String>) -> Self {
        AnnotationTrack {
            video_id: video_id.into(),
            ..Default::default()
        }
    }

    /// Sorts and merges overlapping (or touching) intervals.
    pub fn normalize(&mut self) {
        self.intervals.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(self.intervals.len());
        for &(s, e) in &self.intervals {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        self.intervals = merged;
    }

    pub fn contains_frame(&self, frame: u64) -> bool {
        self.intervals.iter().any(|&(s, e)| s <= frame && frame < e)
    }
}

pub fn parse_annotations_str(text: &str, path: &Path, frame_size: u32) -> Result<Vec<AnnotationTrack>> {
    let mut order: Vec<String> = Vec::new();
    let mut tracks: HashMap<String, AnnotationTrack> = HashMap::new();
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
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
        let track = |id: &str, order: &mut Vec<String>, tracks: &mut HashMap<String, AnnotationTrack>| {
            if !tracks.contains_key(id) {
                order.push(id.to_string());
                tracks.insert(id.to_string(), AnnotationTrack::new(id));
            }
        };
        match f.first().copied() {
            Some("T") => {
                if f.len() != 4 {
                    return Err(err(format!("T line needs 4 fields, found {}", f.len())));
                }
                let (s, e) = (num(f[2])?, num(f[3])?);
                if e <= s {
                    return Err(err(format!("interval end {e} <= start {s}")));
                }
                track(f[1], &mut order, &mut tracks);
                tracks.get_mut(f[1]).unwrap().intervals.push((s, e));
            }
            Some("B") => {
                if f.len() != 7 {
                    return Err(err(format!("B line needs 7 fields, found {}", f.len())));
                }
                let frame = num(f[2])?;
                let c: Vec<u32> = f[3..]
                    .iter()
                    .map(|s| s.parse::<u32>().map_err(|e| err(format!("{s:?}: {e}"))))
                    .collect::<Result<_>>()?;
                let region = PixelRegion {
                    x_min: c[0],
                    y_min: c[1],
                    x_max: c[2],
                    y_max: c[3],
                };
                if region.x_min >= region.x_max || region.y_min >= region.y_max {
                    return Err(err(format!("degenerate box {c:?}")));
                }
                if region.x_max > frame_size || region.y_max > frame_size {
                    return Err(err(format!("box {c:?} exceeds frame size {frame_size}")));
                }
                track(f[1], &mut order, &mut tracks);
                tracks.get_mut(f[1]).unwrap().boxes.push(FrameBox { frame, region });
            }
            Some(other) => return Err(err(format!("unknown record type {other:?}"))),
            None => unreachable!(),
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut t = tracks.remove(&id).unwrap();
            t.normalize();
            t
        })
        .collect())
}

/// Parses an annotation file for frames of the default 224-pixel geometry.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationTrack>> {
    parse_annotations_sized(path, GridGeometry::default().frame_size)
}

pub fn parse_annotations_sized(path: impl AsRef<Path>, frame_size: u32) -> Result<Vec<AnnotationTrack>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, path, frame_size)
}

pub fn annotations_to_text(tracks: &[AnnotationTrack]) -> String {
    let mut out = String::new();
    for t in tracks {
        for &(s, e) in &t.intervals {
            out.push_str(&format!("T {} {s} {e}\n", t.video_id));
        }
        for b in &t.boxes {
            let r = b.region;
            out.push_str(&format!(
                "B {} {} {} {} {} {}\n",
                t.video_id, b.frame, r.x_min, r.y_min, r.x_max, r.y_max
            ));
        }
    }
    out
}

pub fn write_annotations(tracks: &[AnnotationTrack], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, annotations_to_text(tracks)).map_err(|e| Error::io(path, e))
}

/// Ground truth implied by a synthetic dataset: the anomalous run as a
/// temporal interval, and every planted cell's pixel region on each of its frames.
pub fn tracks_from_planted(
    truth: &PlantedTruth,
    geom: &GridGeometry,
    frames_per_segment: u64,
) -> Result<Vec<AnnotationTrack>> {
    let cols = geom.cells_per_side() as usize;
    truth
        .videos
        .iter()
        .map(|v| {
            let start = v.first_segment as u64 * frames_per_segment;
            let end = (v.last_segment as u64 + 1) * frames_per_segment;
            let regions = v
                .cells
                .iter()
                .map(|&c| cell_to_pixel_region(c / cols, c % cols, geom))
                .collect::<Result<Vec<_>>>()?;
            let boxes = (start..end)
                .flat_map(|frame| regions.iter().map(move |&region| FrameBox { frame, region }))
                .collect();
            Ok(AnnotationTrack {
                video_id: v.video_id.clone(),
                intervals: vec![(start, end)],
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::PlantedVideo;

    fn parse(text: &str) -> Result<Vec<AnnotationTrack>> {
        parse_annotations_str(text, Path::new("a.txt"), 224)
    }

    #[test]
    fn single_interval() {
        let t = parse("T Arrest001 120 300\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].video_id, "Arrest001");
        assert_eq!(t[0].intervals, vec![(120, 300)]);
    }

    #[test]
    fn overlapping_intervals_merge() {
        let t = parse("T v 10 20\nT v 15 30\nT v 40 50\n").unwrap();
        assert_eq!(t[0].intervals, vec![(10, 30), (40, 50)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("T v 30 20\n", 1),
            ("# c\nT v 5 5\n", 2),
            ("T v 1\n", 1),
            ("B v 3 10 10 10 20\n", 1),
            ("B v 3 0 0 300 20\n", 1),
            ("X v 1 2\n", 1),
            ("T v 1 2\nB v a 0 0 1 1\n", 2),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn boxes_and_round_trip() {
        let text = "T a 0 64\nB a 3 0 0 32 32\nB a 4 32 0 64 32\nT b 100 200\n";
        let t = parse(text).unwrap();
        assert_eq!(t[0].boxes.len(), 2);
        assert_eq!(annotations_to_text(&t), text);
        assert_eq!(parse(&annotations_to_text(&t)).unwrap(), t);
    }

    #[test]
    fn planted_truth_to_tracks() {
        let truth = PlantedTruth {
            videos: vec![PlantedVideo {
                video_id: "x".into(),
                first_segment: 1,
                last_segment: 2,
                cells: vec![25],
            }],
        };
        let t = tracks_from_planted(&truth, &GridGeometry::default(), 64).unwrap();
        assert_eq!(t[0].intervals, vec![(64, 192)]);
        assert_eq!(t[0].boxes.len(), 128);
        let r = t[0].boxes[0].region;
        assert_eq!((r.x_min, r.y_min, r.x_max, r.y_max), (128, 96, 160, 128));
    }
}
