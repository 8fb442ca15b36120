//! Seeded four-phase synthetic dataset generator.
//!
//! Every (user, category) pair is assigned a life-cycle phase which shapes
//! both its historical activity over the feature window and its label rates
//! on the sample days:
//!
//! - unexplored: no history at all,
//! - emergent: daily activity ramps up toward the present,
//! - long_term: flat high activity,
//! - declining: activity decays toward the present.
//!
//! Task labels are drawn from phase-dependent logits over per-phase feature
//! channels: shared features 0..7 are independent signal channels and each
//! (task, phase) pair reads its own two of them — the click logit for phase
//! `p` reads channels `p` and `4 + (p+2) % 4`, the conversion logit channels
//! `(p+1) % 4` and `4 + (p+3) % 4`. Which features matter thus depends on
//! the phase and differs between tasks, the phase itself is recoverable only
//! through the activity histograms, and per-feature recalibration has
//! something real to select.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ActionType, BehaviorEvent, CategoryId, ItemId, LifecyclePhase, RankingSample, UserId,
    SECONDS_PER_DAY,
};
use crate::error::{CoreError, Result};
use crate::util::{normal, poisson};

/// Per-phase label-rate parameters (logit scale). The weights scale the
/// phase's own pair of signal channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseRates {
    pub ctr_bias: f64,
    pub ctr_rel_weight: f64,
    pub cvr_bias: f64,
    pub cvr_rel_weight: f64,
}

/// Generator configuration. Defaults give a desk-scale dataset with the
/// 20-day feature window and 8/1/1 sample-day protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub categories: usize,
    pub categories_per_user: usize,
    /// Proportions for (unexplored, emergent, long_term, declining); must sum
    /// to 1.
    pub phase_mix: [f64; 4],
    pub window_days: u32,
    pub train_days: u32,
    pub validation_days: u32,
    pub test_days: u32,
    pub samples_per_user_day: usize,
    /// Expected exposures per active day at full intensity.
    pub peak_daily_exposures: f64,
    /// Probability that an exposure event also yields a click event, per
    /// phase index (unexplored slot unused).
    pub event_click_rate: [f64; 4],
    /// Probability that a click event also yields an interaction event.
    pub event_interaction_rate: [f64; 4],
    /// Label-rate parameters per phase, in [`LifecyclePhase::ALL`] order.
    pub rates: [PhaseRates; 4],
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 500,
            categories: 40,
            categories_per_user: 6,
            phase_mix: [0.25, 0.25, 0.30, 0.20],
            window_days: 20,
            train_days: 8,
            validation_days: 1,
            test_days: 1,
            samples_per_user_day: 5,
            peak_daily_exposures: 3.0,
            feature_dim: 12,
            event_click_rate: [0.0, 0.35, 0.30, 0.12],
            event_interaction_rate: [0.0, 0.25, 0.30, 0.10],
            rates: [
                PhaseRates { ctr_bias: -1.4, ctr_rel_weight: 1.2, cvr_bias: -1.3, cvr_rel_weight: 1.0 },
                PhaseRates { ctr_bias: -0.9, ctr_rel_weight: 1.8, cvr_bias: -0.9, cvr_rel_weight: 1.4 },
                PhaseRates { ctr_bias: -1.1, ctr_rel_weight: 1.4, cvr_bias: -1.0, cvr_rel_weight: 1.6 },
                PhaseRates { ctr_bias: -1.7, ctr_rel_weight: 1.0, cvr_bias: -1.6, cvr_rel_weight: 0.8 },
            ],
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn sample_days(&self) -> u32 {
        self.train_days + self.validation_days + self.test_days
    }

    pub fn total_days(&self) -> u32 {
        self.window_days + self.sample_days()
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.categories == 0 {
            return Err(CoreError::Config("synthetic generator needs users > 0 and categories > 0".into()));
        }
        if self.categories_per_user == 0 || self.categories_per_user > self.categories {
            return Err(CoreError::Config(format!(
                "categories_per_user {} out of range 1..={}",
                self.categories_per_user, self.categories
            )));
        }
        let sum: f64 = self.phase_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!("phase_mix sums to {sum}, expected 1")));
        }
        if self.feature_dim < 12 {
            return Err(CoreError::Config(
                "feature_dim must be at least 12 (eight signal channels plus context features)".into(),
            ));
        }
        Ok(())
    }
}

/// Generated events plus labeled samples with ground-truth lifecycle tags.
/// Sample histograms are left empty; the preparation pipeline materializes
/// them from the events.
#[derive(Debug)]
pub struct SyntheticData {
    pub events: Vec<BehaviorEvent>,
    pub samples: Vec<RankingSample>,
    pub config: SyntheticConfig,
}

// Daily activity intensity multiplier in [0, 1] for day `d` of a window of
// `w` days, day `w` being the most recent.
fn phase_intensity(phase: LifecyclePhase, d: u32, w: u32) -> f64 {
    match phase {
        LifecyclePhase::Unexplored => 0.0,
        LifecyclePhase::Emergent => d as f64 / w as f64,
        LifecyclePhase::LongTerm => 1.0,
        LifecyclePhase::Declining => 1.0 - (d - 1) as f64 / w as f64,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn draw_phase<R: Rng>(rng: &mut R, mix: &[f64; 4]) -> LifecyclePhase {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if x < acc {
            return LifecyclePhase::ALL[i];
        }
    }
    LifecyclePhase::Declining
}

/// Generate a synthetic dataset. Identical configs (including the seed)
/// produce bit-identical output.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let window = config.window_days;
    let items_per_category = 1000u64;

    // Per-user category assignments with phases, plus per-user/-category
    // latent feature biases.
    let mut user_categories: Vec<Vec<(CategoryId, LifecyclePhase)>> = Vec::with_capacity(config.users);
    let mut user_bias: Vec<f64> = Vec::with_capacity(config.users);
    let category_pop: Vec<f64> = (0..config.categories).map(|_| 0.5 * normal(&mut rng)).collect();
    for _ in 0..config.users {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < config.categories_per_user {
            let c = rng.gen_range(0..config.categories);
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        let cats = picked
            .into_iter()
            .map(|c| (CategoryId(c as u64), draw_phase(&mut rng, &config.phase_mix)))
            .collect();
        user_categories.push(cats);
        user_bias.push(0.5 * normal(&mut rng));
    }

    // Feature-window events.
    let mut events = Vec::new();
    for (u, cats) in user_categories.iter().enumerate() {
        let user_id = UserId(u as u64);
        for &(cat, phase) in cats {
            let pi = phase_index(phase);
            for d in 1..=window {
                let lambda = config.peak_daily_exposures * phase_intensity(phase, d, window);
                let n = poisson(&mut rng, lambda);
                for _ in 0..n {
                    let ts = d as i64 * SECONDS_PER_DAY + rng.gen_range(0..SECONDS_PER_DAY);
                    let item = ItemId(cat.0 * items_per_category + rng.gen_range(0..items_per_category));
                    let base = BehaviorEvent {
                        user_id,
                        item_id: item,
                        category_id: cat,
                        action_type: ActionType::Exposure,
                        timestamp: ts,
                    };
                    events.push(base);
                    if rng.gen::<f64>() < config.event_click_rate[pi] {
                        events.push(BehaviorEvent { action_type: ActionType::Click, ..base });
                        if rng.gen::<f64>() < config.event_interaction_rate[pi] {
                            events.push(BehaviorEvent { action_type: ActionType::Interaction, ..base });
                        }
                    }
                }
            }
        }
    }
    events.sort_by(|a, b| {
        (a.user_id, a.timestamp, a.action_type, a.item_id)
            .cmp(&(b.user_id, b.timestamp, b.action_type, b.item_id))
    });

    // Labeled samples on the post-window days.
    let mut samples = Vec::new();
    let first_sample_day = window + 1;
    let last_sample_day = config.total_days();
    for day in first_sample_day..=last_sample_day {
        for (u, cats) in user_categories.iter().enumerate() {
            let user_id = UserId(u as u64);
            for _ in 0..config.samples_per_user_day {
                let &(cat, phase) = &cats[rng.gen_range(0..cats.len())];
                let pi = phase_index(phase);
                let rates = &config.rates[pi];

                let mut features = vec![0.0; config.feature_dim];
                for f in features.iter_mut().take(8) {
                    *f = normal(&mut rng);
                }
                features[8] = user_bias[u] + 0.3 * normal(&mut rng);
                features[9] = category_pop[cat.0 as usize] + 0.3 * normal(&mut rng);
                features[10] = (day - first_sample_day) as f64 / config.sample_days().max(1) as f64;
                for f in features.iter_mut().skip(11) {
                    *f = normal(&mut rng);
                }

                let ctr_signal = features[pi] + 0.7 * features[4 + (pi + 2) % 4];
                let ctr_logit = rates.ctr_bias
                    + rates.ctr_rel_weight * ctr_signal
                    + 0.3 * user_bias[u]
                    + 0.2 * normal(&mut rng);
                let clicked = rng.gen::<f64>() < sigmoid(ctr_logit);
                let cvr_signal = features[(pi + 1) % 4] + 0.7 * features[4 + (pi + 3) % 4];
                let cvr_logit = rates.cvr_bias
                    + rates.cvr_rel_weight * cvr_signal
                    + 0.2 * normal(&mut rng);
                let converted = clicked && rng.gen::<f64>() < sigmoid(cvr_logit);

                let ts = day as i64 * SECONDS_PER_DAY + rng.gen_range(0..SECONDS_PER_DAY);
                samples.push(RankingSample {
                    user_id,
                    candidate_item_id: ItemId(cat.0 * items_per_category + rng.gen_range(0..items_per_category)),
                    candidate_category_id: cat,
                    shared_features: features,
                    histograms: [Vec::new(), Vec::new(), Vec::new()],
                    label_click: clicked,
                    label_conversion: converted,
                    day_index: day,
                    lifecycle_tag: Some(phase),
                    timestamp: ts,
                });
            }
        }
    }

    Ok(SyntheticData { events, samples, config: config.clone() })
}

fn phase_index(phase: LifecyclePhase) -> usize {
    LifecyclePhase::ALL.iter().position(|&p| p == phase).unwrap()
}
