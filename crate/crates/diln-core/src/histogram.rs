//! Interest life-cycle activity histograms.
//!
//! For one action type, the histogram is a fixed-length vector over the
//! user's most recent active dates: entry `j` is the summed relevance of
//! search results falling on the j-th most recent active date. Index 0 is the
//! most recent date; users with fewer active dates than the histogram length
//! are zero-padded on the old side. Active dates with no search results keep
//! an explicit zero slot — inactivity on the candidate interest while the
//! user was active elsewhere is what makes decline visible.

use std::collections::BTreeMap;

use crate::data::{ActionType, BehaviorEvent, RankingSample, UserId};
use crate::embeddings::EmbeddingTable;
use crate::error::{CoreError, Result};
use crate::gsu::{active_dates, hard_search, soft_search, SearchConfig, SearchResult};

/// Length-`histogram_len` relevance-mass vector for one action type.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityHistogram {
    pub values: Vec<f64>,
    pub action_type: ActionType,
}

/// Sum search-result relevance per active date. `active_dates` must be the
/// user's most recent active dates for this action type, most recent first;
/// a result dated outside that window is a contract violation.
pub fn build_histogram(
    results: &[SearchResult],
    active_dates: &[i64],
    histogram_len: usize,
    action_type: ActionType,
) -> Result<ActivityHistogram> {
    let mut values = vec![0.0; histogram_len];
    for r in results {
        let date = r.event.date_key();
        let Some(slot) = active_dates.iter().position(|&d| d == date) else {
            return Err(CoreError::Data(format!(
                "search result dated {date} outside the user's active-date window"
            )));
        };
        values[slot] += r.relevance;
    }
    Ok(ActivityHistogram { values, action_type })
}

/// Retrieval mode used when materializing histograms.
#[derive(Clone, Copy)]
pub enum SearchMode<'a> {
    Hard,
    Soft { table: &'a EmbeddingTable },
}

/// Build the full 3 x `histogram_len` feature block for one candidate: rows
/// ordered (exposure, click, interaction), each built independently from that
/// action type's events.
pub fn build_feature_block(
    events_by_action: &[Vec<BehaviorEvent>; 3],
    candidate_category: crate::data::CategoryId,
    candidate_item: crate::data::ItemId,
    mode: SearchMode<'_>,
    config: &SearchConfig,
    histogram_len: usize,
) -> Result<[ActivityHistogram; 3]> {
    let mut rows: Vec<ActivityHistogram> = Vec::with_capacity(3);
    for action in ActionType::ALL {
        let events = &events_by_action[action.index()];
        let dates = active_dates(events, config.active_date_window);
        let results = match mode {
            SearchMode::Hard => hard_search(events, candidate_category, config),
            SearchMode::Soft { table } => match table.get(candidate_item) {
                Some(emb) => soft_search(events, emb, table, config).0,
                // No embedding for the candidate: no relevance is measurable.
                None => Vec::new(),
            },
        };
        rows.push(build_histogram(&results, &dates, histogram_len, action)?);
    }
    Ok([rows[0].clone(), rows[1].clone(), rows[2].clone()])
}

/// Fill every sample's histograms from the feature-window events. Work is
/// sharded across `threads` and merged in sample order, so the output is
/// independent of the thread count.
pub fn materialize_histograms(
    samples: &mut [RankingSample],
    feature_events: &[BehaviorEvent],
    mode: SearchMode<'_>,
    config: &SearchConfig,
    histogram_len: usize,
    threads: usize,
) -> Result<()> {
    let mut by_user: BTreeMap<UserId, [Vec<BehaviorEvent>; 3]> = BTreeMap::new();
    for e in feature_events {
        let entry = by_user.entry(e.user_id).or_insert_with(|| [Vec::new(), Vec::new(), Vec::new()]);
        entry[e.action_type.index()].push(*e);
    }
    // Loader order is (user, timestamp); keep each per-action list time-sorted.
    for lists in by_user.values_mut() {
        for list in lists.iter_mut() {
            list.sort_by_key(|e| (e.timestamp, e.item_id));
        }
    }
    let empty: [Vec<BehaviorEvent>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    let compute = |s: &RankingSample| -> Result<[ActivityHistogram; 3]> {
        let events = by_user.get(&s.user_id).unwrap_or(&empty);
        build_feature_block(
            events,
            s.candidate_category_id,
            s.candidate_item_id,
            mode,
            config,
            histogram_len,
        )
    };

    let threads = threads.max(1);
    if threads == 1 || samples.len() < 2 * threads {
        for s in samples.iter_mut() {
            let block = compute(s)?;
            s.histograms = [block[0].values.clone(), block[1].values.clone(), block[2].values.clone()];
        }
        return Ok(());
    }

    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<Vec<[ActivityHistogram; 3]>>> = std::thread::scope(|scope| {
        let compute = &compute;
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(compute).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("histogram worker panicked")).collect()
    });

    let mut idx = 0usize;
    for part in results {
        for block in part? {
            samples[idx].histograms =
                [block[0].values.clone(), block[1].values.clone(), block[2].values.clone()];
            idx += 1;
        }
    }
    Ok(())
}
