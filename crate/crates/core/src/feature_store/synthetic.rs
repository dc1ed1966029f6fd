//! Planted-anomaly feature datasets with known ground truth.
//!
//! Normal cells are i.i.d. N(0, 1). Each anomalous video gets a contiguous
//! run covering at least half of its segments, and in those segments a fixed
//! set of spatial cells is drawn from N(delta, 1) instead.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cuboid::{encode_cuboid, Dims, FeatureCuboid};
use super::manifest::{DatasetManifest, ManifestEntry, Split, VideoLabel};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PLANTED_FILE: &str = "planted.txt";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_normal_videos: usize,
    pub n_anomalous_videos: usize,
    pub segments_per_video: usize,
    pub dims: Dims,
    pub cell_size: usize,
    /// Mean offset of planted cells.
    pub delta: f32,
    pub anomaly_cell_count: usize,
    pub seed: u64,
    /// Recorded in the manifest; does not affect the data.
    pub split: Split,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_normal_videos: 20,
            n_anomalous_videos: 20,
            segments_per_video: 4,
            dims: Dims::default(),
            cell_size: 2,
            delta: 4.0,
            anomaly_cell_count: 1,
            seed: 0,
            split: Split::Train,
        }
    }
}

impl SyntheticSpec {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.dims.height / self.cell_size,
            self.dims.width / self.cell_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_normal_videos == 0 || self.n_anomalous_videos == 0 {
            return Err(Error::Config("video counts must be positive".into()));
        }
        if self.segments_per_video == 0 {
            return Err(Error::Config("segments_per_video must be positive".into()));
        }
        if self.cell_size == 0 {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        for (dim, size) in [("H", self.dims.height), ("W", self.dims.width)] {
            if size % self.cell_size != 0 {
                return Err(Error::NotDivisible {
                    dim,
                    size,
                    cell: self.cell_size,
                });
            }
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        let (rows, cols) = self.grid();
        if self.anomaly_cell_count == 0 || self.anomaly_cell_count > rows * cols {
            return Err(Error::Config(format!(
                "anomaly_cell_count must be in 1..={}, got {}",
                rows * cols,
                self.anomaly_cell_count
            )));
        }
        Ok(())
    }

    pub fn video_id(label: VideoLabel, ordinal: usize) -> String {
        match label {
            VideoLabel::Normal => format!("normal_{ordinal:03}"),
            VideoLabel::Anomalous => format!("anomalous_{ordinal:03}"),
        }
    }

    /// Generates one video's segments in memory.
    pub fn generate_video(
        &self,
        label: VideoLabel,
        ordinal: usize,
    ) -> (Vec<FeatureCuboid>, Option<PlantedVideo>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let class_bit = matches!(label, VideoLabel::Anomalous) as u64;
        rng.set_stream((class_bit << 32) | ordinal as u64);
        let video_id = Self::video_id(label, ordinal);

        let n = self.segments_per_video;
        let (rows, cols) = self.grid();
        let planted = (label == VideoLabel::Anomalous).then(|| {
            let run = rng.random_range(n.div_ceil(2)..=n);
            let first = rng.random_range(0..=n - run);
            let mut cells = index::sample(&mut rng, rows * cols, self.anomaly_cell_count).into_vec();
            cells.sort_unstable();
            PlantedVideo {
                video_id: video_id.clone(),
                first_segment: first as u32,
                last_segment: (first + run - 1) as u32,
                cells,
            }
        });

        let segments = (0..n)
            .map(|seg| {
                let mut data: Array4<f32> =
                    Array4::from_shape_simple_fn(self.dims.as_tuple(), || rng.sample(StandardNormal));
                if let Some(p) = planted.as_ref().filter(|p| p.contains_segment(seg as u32)) {
                    let cs = self.cell_size;
                    for &cell in &p.cells {
                        let (r, c) = (cell / cols, cell % cols);
                        data.slice_mut(s![.., .., r * cs..(r + 1) * cs, c * cs..(c + 1) * cs])
                            .mapv_inplace(|v| v + self.delta);
                    }
                }
                FeatureCuboid {
                    video_id: video_id.clone(),
                    segment_index: seg as u32,
                    data,
                }
            })
            .collect();
        (segments, planted)
    }

    /// All (label, ordinal) pairs in manifest order: normal videos first.
    pub fn videos(&self) -> impl Iterator<Item = (VideoLabel, usize)> + '_ {
        (0..self.n_normal_videos)
            .map(|i| (VideoLabel::Normal, i))
            .chain((0..self.n_anomalous_videos).map(|i| (VideoLabel::Anomalous, i)))
    }
}

/// Where the anomaly was planted in one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedVideo {
    pub video_id: String,
    pub first_segment: u32,
    /// Inclusive.
    pub last_segment: u32,
    /// Row-major cell indices.
    pub cells: Vec<usize>,
}

impl PlantedVideo {
    pub fn contains_segment(&self, seg: u32) -> bool {
        (self.first_segment..=self.last_segment).contains(&seg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlantedTruth {
    pub videos: Vec<PlantedVideo>,
}

impl PlantedTruth {
    pub fn get(&self, video_id: &str) -> Option<&PlantedVideo> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// `<video_id> <first_anom_segment> <last_anom_segment> <cell>[,<cell>...]`
    pub fn to_text(&self) -> String {
        self.videos
            .iter()
            .map(|v| {
                let cells: Vec<String> = v.cells.iter().map(|c| c.to_string()).collect();
                format!(
                    "{} {} {} {}\n",
                    v.video_id,
                    v.first_segment,
                    v.last_segment,
                    cells.join(",")
                )
            })
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut videos = Vec::new();
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
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|e| err(format!("{s:?}: {e}")));
            let (first, last) = (num(f[1])?, num(f[2])?);
            if last < first {
                return Err(err(format!("last segment {last} before first {first}")));
            }
            let cells = f[3]
                .split(',')
                .map(|c| c.parse::<usize>().map_err(|e| err(format!("cell {c:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            videos.push(PlantedVideo {
                video_id: f[0].to_string(),
                first_segment: first,
                last_segment: last,
                cells,
            });
        }
        Ok(PlantedTruth { videos })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub manifest: DatasetManifest,
    pub truth: PlantedTruth,
    /// Files whose contents changed (or were created) by this run.
    pub files_written: usize,
}

/// Writes `bytes` unless the file already holds exactly those bytes.
pub(crate) fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub(crate) fn write_atomic_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// Generates the dataset under `out_dir`: `features/*.fcub`, `manifest.txt`,
/// `planted.txt`. The manifest is written last.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SyntheticOutput> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let feat_dir = out_dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut entries = Vec::new();
    let mut truth = PlantedTruth::default();
    let mut files_written = 0;
    for (label, ordinal) in spec.videos() {
        let (segments, planted) = spec.generate_video(label, ordinal);
        for cuboid in segments {
            let rel = format!("{FEATURES_DIR}/{}_{}.fcub", cuboid.video_id, cuboid.segment_index);
            let bytes = encode_cuboid(&cuboid.data)?;
            files_written += write_if_changed(&out_dir.join(&rel), &bytes)? as usize;
            entries.push(ManifestEntry {
                cuboid_path: rel,
                video_id: cuboid.video_id,
                segment_index: cuboid.segment_index,
                label,
            });
        }
        truth.videos.extend(planted);
    }
    let manifest = DatasetManifest::from_entries(entries, spec.split)?;
    files_written += write_atomic_if_changed(&out_dir.join(PLANTED_FILE), truth.to_text().as_bytes())? as usize;
    files_written +=
        write_atomic_if_changed(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())? as usize;
    Ok(SyntheticOutput {
        manifest,
        truth,
        files_written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(delta: f32) -> SyntheticSpec {
        SyntheticSpec {
            n_normal_videos: 2,
            n_anomalous_videos: 3,
            segments_per_video: 5,
            dims: Dims::new(8, 2, 4, 4),
            cell_size: 2,
            delta,
            anomaly_cell_count: 1,
            seed: 11,
            split: Split::Train,
        }
    }

    #[test]
    fn anomalous_runs_cover_half() {
        for seed in 0..50 {
            let spec = SyntheticSpec { seed, ..small(1.0) };
            for i in 0..spec.n_anomalous_videos {
                let (_, p) = spec.generate_video(VideoLabel::Anomalous, i);
                let p = p.unwrap();
                let run = (p.last_segment - p.first_segment + 1) as usize;
                assert!(run * 2 >= spec.segments_per_video);
                assert!((p.last_segment as usize) < spec.segments_per_video);
                assert_eq!(p.cells.len(), 1);
                assert!(p.cells[0] < 4);
            }
        }
    }

    #[test]
    fn normal_videos_have_no_truth() {
        let (segs, p) = small(4.0).generate_video(VideoLabel::Normal, 0);
        assert!(p.is_none());
        assert_eq!(segs.len(), 5);
    }

    #[test]
    fn planted_cell_means_match_delta() {
        // 1000 anomalous segments; every segment in the planted run
        let spec = SyntheticSpec {
            n_anomalous_videos: 1000,
            segments_per_video: 1,
            delta: 4.0,
            ..small(4.0)
        };
        let (mut planted_sum, mut planted_n) = (0.0f64, 0usize);
        let (mut other_sum, mut other_n) = (0.0f64, 0usize);
        for i in 0..spec.n_anomalous_videos {
            let (segs, p) = spec.generate_video(VideoLabel::Anomalous, i);
            let p = p.unwrap();
            for cell in 0..4 {
                let (r, c) = (cell / 2, cell % 2);
                let block = segs[0].data.slice(s![.., .., r * 2..r * 2 + 2, c * 2..c * 2 + 2]);
                let mean = block.iter().map(|&v| v as f64).sum::<f64>() / block.len() as f64;
                if p.cells.contains(&cell) {
                    planted_sum += mean;
                    planted_n += 1;
                } else {
                    other_sum += mean;
                    other_n += 1;
                }
            }
        }
        let planted = planted_sum / planted_n as f64;
        let other = other_sum / other_n as f64;
        assert!((planted - 4.0).abs() < 0.2, "planted mean {planted}");
        assert!(other.abs() < 0.2, "other mean {other}");
    }

    #[test]
    fn truth_text_round_trip() {
        let truth = PlantedTruth {
            videos: vec![
                PlantedVideo {
                    video_id: "a".into(),
                    first_segment: 1,
                    last_segment: 3,
                    cells: vec![4, 25],
                },
                PlantedVideo {
                    video_id: "b".into(),
                    first_segment: 0,
                    last_segment: 0,
                    cells: vec![0],
                },
            ],
        };
        let back = PlantedTruth::parse(&truth.to_text(), Path::new("p")).unwrap();
        assert_eq!(back, truth);
        assert!(PlantedTruth::parse("a 3 1 0\n", Path::new("p")).is_err());
        assert!(PlantedTruth::parse("a 0 1 x\n", Path::new("p")).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticSpec { delta: -1.0, ..small(0.0) }.validate().is_err());
        assert!(SyntheticSpec { anomaly_cell_count: 5, ..small(1.0) }.validate().is_err());
        assert!(SyntheticSpec { cell_size: 3, ..small(1.0) }.validate().is_err());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small(2.0);
        let first = generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(first.manifest.len(), 25);
        assert_eq!(first.truth.videos.len(), 3);
        for e in &first.manifest.entries {
            let x = fs::read(a.path().join(&e.cuboid_path)).unwrap();
            let y = fs::read(b.path().join(&e.cuboid_path)).unwrap();
            assert_eq!(x, y);
        }
        for f in [MANIFEST_FILE, PLANTED_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let again = generate_synthetic(&spec, a.path()).unwrap();
        assert_eq!(again.files_written, 0);
    }
}
