//! Line-oriented dataset manifests.
//!
//! One entry per line: `<cuboid_path> <video_id> <segment_index> <NORMAL|ANOMALOUS>`.
//! Lines starting with `#` are comments; `# split=TEST` (or `TRAIN`) sets the split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VideoLabel {
    Normal,
    Anomalous,
}

impl fmt::Display for VideoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VideoLabel::Normal => "NORMAL",
            VideoLabel::Anomalous => "ANOMALOUS",
        })
    }
}

impl FromStr for VideoLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "NORMAL" => Ok(VideoLabel::Normal),
            "ANOMALOUS" => Ok(VideoLabel::Anomalous),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Test => "TEST",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "TEST" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub cuboid_path: String,
    pub video_id: String,
    pub segment_index: u32,
    pub label: VideoLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    /// Builds a manifest, enforcing per-video labels and unique segments.
    pub fn from_entries(entries: Vec<ManifestEntry>, split: Split) -> Result<Self> {
        let mut manifest = DatasetManifest {
            entries: Vec::with_capacity(entries.len()),
            split,
        };
        let mut checker = Consistency::default();
        for (i, entry) in entries.into_iter().enumerate() {
            checker.admit(&entry, i + 1)?;
            manifest.entries.push(entry);
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices_with(&self, label: VideoLabel) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct video ids in first-appearance order.
    pub fn video_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.video_id.as_str()))
            .map(|e| e.video_id.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# split={}\n", self.split);
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.cuboid_path, e.video_id, e.segment_index, e.label
            ));
        }
        out
    }
}

#[derive(Default)]
struct Consistency {
    labels: HashMap<String, VideoLabel>,
    segments: HashSet<(String, u32)>,
}

impl Consistency {
    fn admit(&mut self, entry: &ManifestEntry, line: usize) -> Result<()> {
        match self.labels.get(&entry.video_id) {
            Some(&l) if l != entry.label => {
                return Err(Error::LabelConflict {
                    video_id: entry.video_id.clone(),
                    line,
                })
            }
            Some(_) => {}
            None => {
                self.labels.insert(entry.video_id.clone(), entry.label);
            }
        }
        if !self
            .segments
            .insert((entry.video_id.clone(), entry.segment_index))
        {
            return Err(Error::DuplicateSegment {
                video_id: entry.video_id.clone(),
                segment_index: entry.segment_index,
                line,
            });
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    let mut checker = Consistency::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            match comment.trim() {
                "split=TRAIN" => manifest.split = Split::Train,
                "split=TEST" => manifest.split = Split::Test,
                _ => {}
            }
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let segment_index = fields[2]
            .parse::<u32>()
            .map_err(|e| parse_err(format!("segment index {:?}: {e}", fields[2])))?;
        let label = fields[3].parse::<VideoLabel>().map_err(parse_err)?;
        let entry = ManifestEntry {
            cuboid_path: fields[0].to_string(),
            video_id: fields[1].to_string(),
            segment_index,
            label,
        };
        checker.admit(&entry, line_no)?;
        manifest.entries.push(entry);
    }
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest's cuboid path against a base directory.
pub fn resolve_path(base: &Path, cuboid_path: &str) -> PathBuf {
    let p = Path::new(cuboid_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
