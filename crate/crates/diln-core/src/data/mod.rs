//! Core records, log loading, synthetic dataset generation and day-based
//! splits.

mod cache;
mod loader;
mod split;
mod synthetic;

pub use cache::{read_cache, write_cache, DatasetCache, CACHE_VERSION};
pub use loader::{load_events, LoadReport, LogFormat};
pub use split::split_by_day;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use std::fmt;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// User action kinds, ordered as the histogram rows are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionType {
    Exposure,
    Click,
    Interaction,
}

impl ActionType {
    pub const ALL: [ActionType; 3] = [ActionType::Exposure, ActionType::Click, ActionType::Interaction];

    pub fn index(self) -> usize {
        match self {
            ActionType::Exposure => 0,
            ActionType::Click => 1,
            ActionType::Interaction => 2,
        }
    }

    pub fn parse(s: &str) -> Option<ActionType> {
        match s {
            "exposure" => Some(ActionType::Exposure),
            "click" => Some(ActionType::Click),
            "interaction" => Some(ActionType::Interaction),
            _ => None,
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionType::Exposure => write!(f, "exposure"),
            ActionType::Click => write!(f, "click"),
            ActionType::Interaction => write!(f, "interaction"),
        }
    }
}

macro_rules! opaque_id {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

opaque_id!(UserId);
opaque_id!(ItemId);
opaque_id!(CategoryId);

/// One user action on an item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorEvent {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub action_type: ActionType,
    /// Seconds since epoch, strictly positive.
    pub timestamp: i64,
}

impl BehaviorEvent {
    /// Calendar day derived from the timestamp (days since epoch).
    pub fn date_key(&self) -> i64 {
        self.timestamp.div_euclid(SECONDS_PER_DAY)
    }
}

/// Ground-truth interest phase, available for synthetic data and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LifecyclePhase {
    Unexplored,
    Emergent,
    LongTerm,
    Declining,
}

impl LifecyclePhase {
    pub const ALL: [LifecyclePhase; 4] = [
        LifecyclePhase::Unexplored,
        LifecyclePhase::Emergent,
        LifecyclePhase::LongTerm,
        LifecyclePhase::Declining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LifecyclePhase::Unexplored => "unexplored",
            LifecyclePhase::Emergent => "emergent",
            LifecyclePhase::LongTerm => "long_term",
            LifecyclePhase::Declining => "declining",
        }
    }

    pub fn parse(s: &str) -> Option<LifecyclePhase> {
        LifecyclePhase::ALL.iter().copied().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for LifecyclePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

/// One ranking impression: candidate descriptors, the shared-bottom feature
/// vector, materialized activity histograms (rows: exposure, click,
/// interaction) and the binary task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingSample {
    pub user_id: UserId,
    pub candidate_item_id: ItemId,
    pub candidate_category_id: CategoryId,
    pub shared_features: Vec<f64>,
    /// Three rows of length `histogram_len` each, in [`ActionType`] order.
    pub histograms: [Vec<f64>; 3],
    pub label_click: bool,
    pub label_conversion: bool,
    /// Day index within the dataset (1-based), the split key.
    pub day_index: u32,
    pub lifecycle_tag: Option<LifecyclePhase>,
    /// Timestamp of the impression, used for temporal-hygiene checks.
    pub timestamp: i64,
}

impl RankingSample {
    /// A conversion without a click violates the label contract.
    pub fn labels_consistent(&self) -> bool {
        !self.label_conversion || self.label_click
    }
}

/// Day-disjoint train/validation/test partition plus the feature-window
/// events the histograms were (or can be) built from.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<RankingSample>,
    pub validation: Vec<RankingSample>,
    pub test: Vec<RankingSample>,
    pub feature_window_days: u32,
    pub feature_events: Vec<BehaviorEvent>,
}

impl DatasetSplit {
    pub fn total_samples(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}
