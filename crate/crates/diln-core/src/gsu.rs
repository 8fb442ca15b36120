//! General Search Unit: retrieve, per candidate, a user's most relevant
//! recent behaviors of one action type.
//!
//! The search range is the user's most recent active dates (days with at
//! least one event of that action type), capped at the configured window;
//! result counts are capped at `max_results`. Hard search filters by category
//! equality at a fixed relevance of 0.1; soft search scores events by the
//! cosine of item embeddings, clamped at zero so downstream histogram mass
//! stays nonnegative.

use crate::data::{BehaviorEvent, CategoryId};
use crate::embeddings::EmbeddingTable;

/// Fixed relevance assigned to every hard-search result.
pub const HARD_SEARCH_RELEVANCE: f64 = 0.1;

/// Retrieval limits: `max_results` search results over the user's
/// `active_date_window` most recent active dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub max_results: usize,
    pub active_date_window: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        // Desk-scale defaults mirror the evaluation protocol: 100 results
        // over the 20 most recent active dates.
        SearchConfig { max_results: 100, active_date_window: 20 }
    }
}

/// One retrieved behavior with its relevance mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub event: BehaviorEvent,
    pub relevance: f64,
}

/// The user's most recent distinct active dates for the given events (one
/// action type), most recent first, at most `window` entries.
pub fn active_dates(events: &[BehaviorEvent], window: usize) -> Vec<i64> {
    let mut dates: Vec<i64> = Vec::new();
    // events are sorted ascending by timestamp; walk backwards.
    for e in events.iter().rev() {
        let d = e.date_key();
        if dates.last() != Some(&d) && !dates.contains(&d) {
            dates.push(d);
            if dates.len() == window {
                break;
            }
        }
    }
    dates
}

/// Category-equality retrieval at constant relevance, restricted to the
/// user's most recent active dates. Results are ordered most recent first
/// (ties by ascending item id) and truncated to `max_results`.
pub fn hard_search(
    events: &[BehaviorEvent],
    candidate_category: CategoryId,
    config: &SearchConfig,
) -> Vec<SearchResult> {
    let dates = active_dates(events, config.active_date_window);
    let mut matches: Vec<&BehaviorEvent> = events
        .iter()
        .filter(|e| e.category_id == candidate_category && dates.contains(&e.date_key()))
        .collect();
    matches.sort_by(|a, b| {
        b.timestamp.cmp(&a.timestamp).then(a.item_id.cmp(&b.item_id))
    });
    matches
        .into_iter()
        .take(config.max_results)
        .map(|e| SearchResult { event: *e, relevance: HARD_SEARCH_RELEVANCE })
        .collect()
}

/// Embedding-relevance retrieval: score every in-window event by the cosine
/// of its item embedding against the candidate embedding, clamp negatives to
/// zero, drop zero-relevance events, rank by relevance (ties by recency, then
/// ascending item id) and truncate to `max_results`. Events without an
/// embedding are skipped; the skip count is returned.
pub fn soft_search(
    events: &[BehaviorEvent],
    candidate_embedding: &[f64],
    table: &EmbeddingTable,
    config: &SearchConfig,
) -> (Vec<SearchResult>, usize) {
    let dates = active_dates(events, config.active_date_window);
    let mut skipped = 0usize;
    let mut scored: Vec<SearchResult> = Vec::new();
    for e in events {
        if !dates.contains(&e.date_key()) {
            continue;
        }
        let Some(emb) = table.get(e.item_id) else {
            skipped += 1;
            continue;
        };
        let r = cosine(candidate_embedding, emb).max(0.0);
        if r > 0.0 {
            scored.push(SearchResult { event: *e, relevance: r });
        }
    }
    scored.sort_by(|a, b| {
        b.relevance
            .partial_cmp(&a.relevance)
            .unwrap()
            .then(b.event.timestamp.cmp(&a.event.timestamp))
            .then(a.event.item_id.cmp(&b.event.item_id))
    });
    scored.truncate(config.max_results);
    (scored, skipped)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len(), "embedding dimension mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionType, ItemId, UserId, SECONDS_PER_DAY};

    fn event(day: i64, offset: i64, item: u64, cat: u64) -> BehaviorEvent {
        BehaviorEvent {
            user_id: UserId(1),
            item_id: ItemId(item),
            category_id: CategoryId(cat),
            action_type: ActionType::Exposure,
            timestamp: day * SECONDS_PER_DAY + offset,
        }
    }

    fn sorted(mut events: Vec<BehaviorEvent>) -> Vec<BehaviorEvent> {
        events.sort_by_key(|e| e.timestamp);
        events
    }

    #[test]
    fn no_category_match_is_empty() {
        let events = sorted(vec![event(1, 10, 1, 5), event(2, 10, 2, 5)]);
        let out = hard_search(&events, CategoryId(9), &SearchConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn matches_carry_constant_relevance() {
        let events = sorted(vec![event(1, 10, 1, 5), event(2, 10, 2, 5), event(3, 10, 3, 6)]);
        let cfg = SearchConfig { max_results: 100, active_date_window: 20 };
        let out = hard_search(&events, CategoryId(5), &cfg);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.relevance == HARD_SEARCH_RELEVANCE));
    }

    #[test]
    fn truncates_to_most_recent_max_results() {
        // 150 matching events across recent dates; exactly the 100 most
        // recent must be kept. Brute-force oracle: sort all by recency and
        // truncate.
        let mut events = Vec::new();
        for i in 0..150i64 {
            events.push(event(1 + i / 10, i % 10, i as u64, 5));
        }
        let events = sorted(events);
        let cfg = SearchConfig { max_results: 100, active_date_window: 20 };
        let out = hard_search(&events, CategoryId(5), &cfg);
        assert_eq!(out.len(), 100);

        let mut oracle: Vec<&BehaviorEvent> = events.iter().collect();
        oracle.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(a.item_id.cmp(&b.item_id)));
        let oracle_ts: Vec<i64> = oracle.iter().take(100).map(|e| e.timestamp).collect();
        let got_ts: Vec<i64> = out.iter().map(|r| r.event.timestamp).collect();
        assert_eq!(got_ts, oracle_ts);
    }

    #[test]
    fn results_restricted_to_recent_active_dates() {
        // 25 active dates; only the 20 most recent may contribute.
        let mut events = Vec::new();
        for d in 1..=25i64 {
            events.push(event(d, 0, d as u64, 5));
        }
        let events = sorted(events);
        let cfg = SearchConfig { max_results: 100, active_date_window: 20 };
        let out = hard_search(&events, CategoryId(5), &cfg);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|r| r.event.date_key() >= 6));
    }

    #[test]
    fn out_of_category_events_do_not_matter() {
        let base = sorted(vec![event(1, 10, 1, 5), event(2, 10, 2, 5)]);
        let cfg = SearchConfig::default();
        let without = hard_search(&base, CategoryId(5), &cfg);
        let mut with_noise = base.clone();
        with_noise.extend([event(1, 20, 50, 9), event(2, 20, 51, 9)]);
        let with_noise = sorted(with_noise);
        let got = hard_search(&with_noise, CategoryId(5), &cfg);
        assert_eq!(without, got);
    }

    #[test]
    fn soft_search_identical_embedding_ranks_first() {
        let mut table = EmbeddingTable::new(2);
        table.insert(ItemId(1), vec![1.0, 0.0]);
        table.insert(ItemId(2), vec![0.6, 0.8]);
        let events = sorted(vec![event(1, 10, 2, 5), event(2, 10, 1, 5)]);
        let (out, skipped) = soft_search(&events, &[2.0, 0.0], &table, &SearchConfig::default());
        assert_eq!(skipped, 0);
        assert_eq!(out[0].event.item_id, ItemId(1));
        assert!((out[0].relevance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_search_orthogonal_embeddings_yield_nothing() {
        let mut table = EmbeddingTable::new(2);
        table.insert(ItemId(1), vec![0.0, 1.0]);
        table.insert(ItemId(2), vec![0.0, -2.0]);
        let events = sorted(vec![event(1, 10, 1, 5), event(2, 10, 2, 5)]);
        let (out, _) = soft_search(&events, &[1.0, 0.0], &table, &SearchConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn soft_search_missing_embedding_is_skipped_and_counted() {
        let mut table = EmbeddingTable::new(2);
        table.insert(ItemId(1), vec![1.0, 0.0]);
        let events = sorted(vec![event(1, 10, 1, 5), event(2, 10, 99, 5)]);
        let (out, skipped) = soft_search(&events, &[1.0, 0.0], &table, &SearchConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn soft_search_matches_exhaustive_top_n_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for round in 0..30 {
            let mut table = EmbeddingTable::new(4);
            let mut events = Vec::new();
            for i in 0..10u64 {
                table.insert(ItemId(i), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
                events.push(event(1 + (i as i64 % 5), i as i64, i, 5));
            }
            let events = sorted(events);
            let candidate: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cfg = SearchConfig { max_results: 5, active_date_window: 20 };
            let (got, _) = soft_search(&events, &candidate, &table, &cfg);

            // Exhaustive scoring oracle with the same clamp and tie-breaks.
            let mut scored: Vec<(f64, i64, u64)> = events
                .iter()
                .map(|e| {
                    let emb = table.get(e.item_id).unwrap();
                    let dot: f64 = candidate.iter().zip(emb).map(|(a, b)| a * b).sum();
                    let na = candidate.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    ((dot / (na * nb)).max(0.0), e.timestamp, e.item_id.0)
                })
                .filter(|(r, _, _)| *r > 0.0)
                .collect();
            scored.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2))
            });
            scored.truncate(5);
            let oracle: Vec<u64> = scored.iter().map(|(_, _, item)| *item).collect();
            let mine: Vec<u64> = got.iter().map(|r| r.event.item_id.0).collect();
            assert_eq!(mine, oracle, "round {round}");
        }
    }

    #[test]
    fn soft_search_equal_embeddings_reduce_to_recency() {
        let mut table = EmbeddingTable::new(2);
        for i in 1..=5u64 {
            table.insert(ItemId(i), vec![0.5, 0.5]);
        }
        let events = sorted((1..=5).map(|i| event(i as i64, 0, i, 5)).collect());
        let (out, _) = soft_search(&events, &[0.5, 0.5], &table, &SearchConfig::default());
        let ts: Vec<i64> = out.iter().map(|r| r.event.timestamp).collect();
        let mut expected = ts.clone();
        expected.sort_by(|a, b| b.cmp(a));
        assert_eq!(ts, expected);
    }
}
