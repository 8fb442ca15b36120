//! Binary dataset cache: samples with materialized histograms plus the split
//! boundaries, behind a version header.

use std::io::Read;
use std::path::Path;

use super::{CategoryId, DatasetSplit, ItemId, LifecyclePhase, RankingSample, UserId};
use crate::error::{CoreError, Result};

const CACHE_MAGIC: &[u8; 8] = b"DILNDS01";
pub const CACHE_VERSION: u32 = 1;

/// A prepared dataset: every sample carries its feature vector and
/// histograms, so training and evaluation never touch raw logs.
#[derive(Debug, Clone)]
pub struct DatasetCache {
    pub histogram_len: usize,
    pub feature_dim: usize,
    pub window_days: u32,
    /// (last train day, last validation day), in day indices.
    pub boundaries: (u32, u32),
    pub samples: Vec<RankingSample>,
}

impl DatasetCache {
    /// Re-derive the split from the stored boundaries.
    pub fn to_split(&self) -> DatasetSplit {
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for s in &self.samples {
            if s.day_index <= self.boundaries.0 {
                train.push(s.clone());
            } else if s.day_index <= self.boundaries.1 {
                validation.push(s.clone());
            } else {
                test.push(s.clone());
            }
        }
        DatasetSplit {
            train,
            validation,
            test,
            feature_window_days: self.window_days,
            feature_events: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.shared_features.len() != self.feature_dim {
                return Err(CoreError::Data(format!(
                    "sample {i}: feature dim {} != header {}",
                    s.shared_features.len(),
                    self.feature_dim
                )));
            }
            for row in &s.histograms {
                if row.len() != self.histogram_len {
                    return Err(CoreError::Data(format!(
                        "sample {i}: histogram length {} != header {}",
                        row.len(),
                        self.histogram_len
                    )));
                }
            }
            if !s.labels_consistent() {
                return Err(CoreError::Data(format!("sample {i}: conversion without click")));
            }
        }
        Ok(())
    }
}

fn tag_byte(tag: Option<LifecyclePhase>) -> u8 {
    match tag {
        None => 255,
        Some(p) => LifecyclePhase::ALL.iter().position(|&q| q == p).unwrap() as u8,
    }
}

fn tag_from_byte(b: u8) -> Result<Option<LifecyclePhase>> {
    match b {
        255 => Ok(None),
        0..=3 => Ok(Some(LifecyclePhase::ALL[b as usize])),
        _ => Err(CoreError::Data(format!("bad lifecycle tag byte {b}"))),
    }
}

pub fn write_cache(cache: &DatasetCache, path: &Path) -> Result<()> {
    cache.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cache.histogram_len as u32).to_le_bytes());
    buf.extend_from_slice(&(cache.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&cache.window_days.to_le_bytes());
    buf.extend_from_slice(&cache.boundaries.0.to_le_bytes());
    buf.extend_from_slice(&cache.boundaries.1.to_le_bytes());
    buf.extend_from_slice(&(cache.samples.len() as u64).to_le_bytes());
    for s in &cache.samples {
        buf.extend_from_slice(&s.user_id.0.to_le_bytes());
        buf.extend_from_slice(&s.candidate_item_id.0.to_le_bytes());
        buf.extend_from_slice(&s.candidate_category_id.0.to_le_bytes());
        buf.extend_from_slice(&s.day_index.to_le_bytes());
        let flags = (s.label_click as u8) | ((s.label_conversion as u8) << 1);
        buf.push(flags);
        buf.push(tag_byte(s.lifecycle_tag));
        buf.extend_from_slice(&s.timestamp.to_le_bytes());
        for &f in &s.shared_features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        for row in &s.histograms {
            for &h in row {
                buf.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<DatasetCache> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open dataset cache {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(CoreError::Data("truncated dataset cache".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };

    if take(&mut at, 8)? != CACHE_MAGIC {
        return Err(CoreError::Data(format!("{} is not a dataset cache (bad magic)", path.display())));
    }
    let u32_at = |at: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()))
    };
    let version = u32_at(&mut at)?;
    if version != CACHE_VERSION {
        return Err(CoreError::Data(format!("unsupported dataset cache version {version}")));
    }
    let histogram_len = u32_at(&mut at)? as usize;
    let feature_dim = u32_at(&mut at)? as usize;
    let window_days = u32_at(&mut at)?;
    let b1 = u32_at(&mut at)?;
    let b2 = u32_at(&mut at)?;
    let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let user = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let item = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let cat = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let day = u32_at(&mut at)?;
        let flags = take(&mut at, 1)?[0];
        let tag = tag_from_byte(take(&mut at, 1)?[0])?;
        let timestamp = i64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let mut features = Vec::with_capacity(feature_dim);
        for _ in 0..feature_dim {
            features.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        let mut histograms: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for row in histograms.iter_mut() {
            row.reserve(histogram_len);
            for _ in 0..histogram_len {
                row.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
            }
        }
        samples.push(RankingSample {
            user_id: UserId(user),
            candidate_item_id: ItemId(item),
            candidate_category_id: CategoryId(cat),
            shared_features: features,
            histograms,
            label_click: flags & 1 != 0,
            label_conversion: flags & 2 != 0,
            day_index: day,
            lifecycle_tag: tag,
            timestamp,
        });
    }
    let cache = DatasetCache {
        histogram_len,
        feature_dim,
        window_days,
        boundaries: (b1, b2),
        samples,
    };
    cache.validate()?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(day: u32, k: usize) -> RankingSample {
        RankingSample {
            user_id: UserId(9),
            candidate_item_id: ItemId(8),
            candidate_category_id: CategoryId(7),
            shared_features: vec![0.5, -1.5],
            histograms: [vec![0.1; k], vec![0.0; k], vec![0.3; k]],
            label_click: true,
            label_conversion: true,
            day_index: day,
            lifecycle_tag: Some(LifecyclePhase::Emergent),
            timestamp: day as i64 * 86_400 + 3,
        }
    }

    #[test]
    fn round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.cache");
        let cache = DatasetCache {
            histogram_len: 4,
            feature_dim: 2,
            window_days: 2,
            boundaries: (5, 6),
            samples: vec![sample(3, 4), sample(5, 4), sample(6, 4), sample(7, 4)],
        };
        write_cache(&cache, &path).unwrap();
        let loaded = read_cache(&path).unwrap();
        assert_eq!(loaded.samples, cache.samples);
        assert_eq!(loaded.boundaries, (5, 6));
        let split = loaded.to_split();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_cache");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_cache(&path).is_err());
    }
}
