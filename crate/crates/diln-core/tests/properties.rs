//! Property tests for the spec-level invariants of retrieval, histograms and
//! metrics.

use proptest::prelude::*;

use diln_core::data::{ActionType, BehaviorEvent, CategoryId, ItemId, UserId, SECONDS_PER_DAY};
use diln_core::evaluation::auc;
use diln_core::gsu::{active_dates, hard_search, SearchConfig, SearchResult};
use diln_core::histogram::build_histogram;

fn event(day: i64, offset: i64, item: u64, cat: u64) -> BehaviorEvent {
    BehaviorEvent {
        user_id: UserId(1),
        item_id: ItemId(item),
        category_id: CategoryId(cat),
        action_type: ActionType::Exposure,
        timestamp: day * SECONDS_PER_DAY + offset,
    }
}

prop_compose! {
    fn arb_events(max_len: usize)(
        specs in prop::collection::vec((1i64..40, 0i64..86_400, 0u64..50, 0u64..6), 0..max_len)
    ) -> Vec<BehaviorEvent> {
        let mut events: Vec<BehaviorEvent> =
            specs.into_iter().map(|(d, o, i, c)| event(d, o, i, c)).collect();
        events.sort_by_key(|e| (e.timestamp, e.item_id));
        events
    }
}

proptest! {
    // Hard search never returns more than max_results, stays inside the
    // active-date window, and ignores out-of-category events entirely.
    #[test]
    fn hard_search_contract(events in arb_events(120), n in 1usize..20, k in 1usize..10) {
        let cfg = SearchConfig { max_results: n, active_date_window: k };
        let candidate = CategoryId(3);
        let results = hard_search(&events, candidate, &cfg);
        prop_assert!(results.len() <= n);
        let dates = active_dates(&events, k);
        for r in &results {
            prop_assert!(dates.contains(&r.event.date_key()));
            prop_assert_eq!(r.event.category_id, candidate);
            prop_assert_eq!(r.relevance, 0.1);
        }

        // Adding events of other categories changes nothing, as long as the
        // user's active dates stay the same (same days, new items).
        let mut noisy = events.clone();
        let extra: Vec<BehaviorEvent> = events
            .iter()
            .map(|e| BehaviorEvent {
                item_id: ItemId(e.item_id.0 + 1000),
                category_id: CategoryId(77),
                ..*e
            })
            .collect();
        noisy.extend(extra);
        noisy.sort_by_key(|e| (e.timestamp, e.item_id));
        let noisy_results = hard_search(&noisy, candidate, &cfg);
        prop_assert_eq!(results, noisy_results);
    }

    // Histogram additivity: disjoint result sets sum elementwise.
    #[test]
    fn histogram_additivity(
        masses in prop::collection::vec((0usize..20, 0.0f64..2.0), 1..80),
        split_at in 0usize..80
    ) {
        let dates: Vec<i64> = (1..=20).rev().collect();
        let results: Vec<SearchResult> = masses
            .iter()
            .enumerate()
            .map(|(i, &(slot, relevance))| SearchResult {
                event: event(dates[slot], (i % 86_400) as i64, i as u64, 3),
                relevance,
            })
            .collect();
        let cut = split_at.min(results.len());
        let a = build_histogram(&results[..cut], &dates, 20, ActionType::Exposure).unwrap();
        let b = build_histogram(&results[cut..], &dates, 20, ActionType::Exposure).unwrap();
        let whole = build_histogram(&results, &dates, 20, ActionType::Exposure).unwrap();
        for ((x, y), w) in a.values.iter().zip(&b.values).zip(&whole.values) {
            prop_assert!((x + y - w).abs() < 1e-12);
        }
    }

    // Scale equivariance: scaling every relevance scales the histogram.
    #[test]
    fn histogram_scale_equivariance(
        masses in prop::collection::vec((0usize..20, 0.0f64..2.0), 1..60),
        scale in 0.01f64..50.0
    ) {
        let dates: Vec<i64> = (1..=20).rev().collect();
        let results: Vec<SearchResult> = masses
            .iter()
            .enumerate()
            .map(|(i, &(slot, relevance))| SearchResult {
                event: event(dates[slot], (i % 86_400) as i64, i as u64, 3),
                relevance,
            })
            .collect();
        let scaled: Vec<SearchResult> = results
            .iter()
            .map(|r| SearchResult { event: r.event, relevance: r.relevance * scale })
            .collect();
        let base = build_histogram(&results, &dates, 20, ActionType::Exposure).unwrap();
        let got = build_histogram(&scaled, &dates, 20, ActionType::Exposure).unwrap();
        for (b, g) in base.values.iter().zip(&got.values) {
            prop_assert!((b * scale - g).abs() <= 1e-12 * (1.0 + b.abs() * scale));
        }
    }

    // Permutation invariance: result order does not matter.
    #[test]
    fn histogram_permutation_invariance(
        masses in prop::collection::vec((0usize..20, 0.0f64..2.0), 1..60),
        seed in 0u64..1000
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let dates: Vec<i64> = (1..=20).rev().collect();
        let results: Vec<SearchResult> = masses
            .iter()
            .enumerate()
            .map(|(i, &(slot, relevance))| SearchResult {
                event: event(dates[slot], (i % 86_400) as i64, i as u64, 3),
                relevance,
            })
            .collect();
        let mut shuffled = results.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = build_histogram(&results, &dates, 20, ActionType::Exposure).unwrap();
        let b = build_histogram(&shuffled, &dates, 20, ActionType::Exposure).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    // AUC is invariant under strictly monotone transforms of the scores.
    #[test]
    fn auc_monotone_invariance(
        pairs in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 2..60),
        a in 0.1f64..5.0,
        b in -3.0f64..3.0
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
        let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(auc(&scores, &labels), auc(&transformed, &labels));
    }
}
