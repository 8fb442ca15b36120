//! Day-based train/validation/test partitioning.

use super::{BehaviorEvent, DatasetSplit, RankingSample};
use crate::error::{CoreError, Result};

/// Partition samples by day index: train covers days up to and including
/// `boundaries.0`, validation the days up to `boundaries.1`, test everything
/// after. Events inside the feature window (day index <= window) are retained
/// separately for histogram construction; `base_date_key` maps an event's
/// calendar day to the dataset's 1-based day index.
pub fn split_by_day(
    events: &[BehaviorEvent],
    samples: Vec<RankingSample>,
    boundaries: (u32, u32),
    feature_window_days: u32,
    base_date_key: i64,
) -> Result<DatasetSplit> {
    let (b1, b2) = boundaries;
    if b1 >= b2 {
        return Err(CoreError::Data(format!(
            "split boundaries must be strictly increasing, got ({b1}, {b2})"
        )));
    }
    if samples.is_empty() {
        return Err(CoreError::Data("cannot split an empty sample collection".into()));
    }
    let min_day = samples.iter().map(|s| s.day_index).min().unwrap();
    let max_day = samples.iter().map(|s| s.day_index).max().unwrap();
    if b1 < min_day || b2 >= max_day {
        return Err(CoreError::Data(format!(
            "boundaries ({b1}, {b2}) outside sample day range {min_day}..{max_day} \
             (need train/validation/test all non-empty)"
        )));
    }
    if min_day <= feature_window_days {
        return Err(CoreError::Data(format!(
            "sample on day {min_day} falls inside the {feature_window_days}-day feature window"
        )));
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        if s.day_index <= b1 {
            train.push(s);
        } else if s.day_index <= b2 {
            validation.push(s);
        } else {
            test.push(s);
        }
    }

    let feature_events: Vec<BehaviorEvent> = events
        .iter()
        .filter(|e| {
            let day = e.date_key() - base_date_key;
            day >= 1 && day <= feature_window_days as i64
        })
        .copied()
        .collect();

    Ok(DatasetSplit { train, validation, test, feature_window_days, feature_events })
}
