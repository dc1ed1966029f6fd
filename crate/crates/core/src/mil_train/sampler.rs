use rand::Rng;

use crate::error::{Error, Result};
use crate::feature_store::{DatasetManifest, VideoLabel};

/// Draws `count` (positive, negative) manifest-entry index pairs uniformly
/// with replacement: positives from anomalous videos, negatives from normal ones.
pub fn sample_pairs<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let pos = manifest.indices_with(VideoLabel::Anomalous);
    let neg = manifest.indices_with(VideoLabel::Normal);
    if pos.is_empty() {
        return Err(Error::MissingClass("ANOMALOUS"));
    }
    if neg.is_empty() {
        return Err(Error::MissingClass("NORMAL"));
    }
    Ok((0..count)
        .map(|_| {
            let p = pos[rng.random_range(0..pos.len())];
            let n = neg[rng.random_range(0..neg.len())];
            (p, n)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{ManifestEntry, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(n_pos: usize, n_neg: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n_pos {
            entries.push(ManifestEntry {
                cuboid_path: format!("p{i}"),
                video_id: format!("a{i}"),
                segment_index: 0,
                label: VideoLabel::Anomalous,
            });
        }
        for i in 0..n_neg {
            entries.push(ManifestEntry {
                cuboid_path: format!("n{i}"),
                video_id: format!("n{i}"),
                segment_index: 0,
                label: VideoLabel::Normal,
            });
        }
        DatasetManifest::from_entries(entries, Split::Train).unwrap()
    }

    #[test]
    fn forced_pair() {
        let m = manifest(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pairs(&m, 30, &mut rng).unwrap().iter().all(|&p| p == (0, 1)));
    }

    #[test]
    fn missing_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pairs(&manifest(0, 3), 2, &mut rng),
            Err(Error::MissingClass("ANOMALOUS"))
        ));
        assert!(matches!(
            sample_pairs(&manifest(2, 0), 2, &mut rng),
            Err(Error::MissingClass("NORMAL"))
        ));
    }

    #[test]
    fn uniform_over_positives() {
        let m = manifest(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pairs = sample_pairs(&m, 10_000, &mut rng).unwrap();
        let bound = 3.0 * (10_000.0f64 * 0.2 * 0.8).sqrt();
        for p in 0..5 {
            let k = pairs.iter().filter(|&&(a, _)| a == p).count() as f64;
            assert!((k - 2000.0).abs() <= bound, "positive {p}: {k}");
        }
        assert!(pairs.iter().all(|&(a, b)| a < 5 && b >= 5));
    }

    #[test]
    fn deterministic_given_state() {
        let m = manifest(4, 4);
        let a = sample_pairs(&m, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_pairs(&m, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
