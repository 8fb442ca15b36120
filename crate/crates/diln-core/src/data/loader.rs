//! Behavior-log ingestion for the supported text formats.

use std::path::Path;

use super::{ActionType, BehaviorEvent, CategoryId, ItemId, UserId};
use crate::error::{CoreError, Result};

/// Supported log layouts.
///
/// `InternalTsv`: tab-separated, no header, one event per row with columns
/// `user_id  item_id  category_id  action_type  timestamp` where
/// `action_type` is one of `exposure|click|interaction` and `timestamp` is in
/// seconds since epoch.
///
/// `KuairandCsv`: comma-separated with a header row; columns are located by
/// name. Required: `user_id`, `video_id`, `time_ms` (milliseconds; a
/// `timestamp` column in seconds is accepted instead), `is_click`. Optional:
/// `tag` (interest category, first integer is used; missing maps to category
/// 0), `is_like`, `is_follow`, `is_comment`, `is_forward`. Every row yields
/// an exposure event; `is_click=1` adds a click event; any of the four
/// engagement flags adds an interaction event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    KuairandCsv,
    InternalTsv,
}

impl LogFormat {
    pub fn parse(s: &str) -> Option<LogFormat> {
        match s {
            "kuairand_csv" | "kuairand-csv" => Some(LogFormat::KuairandCsv),
            "internal_tsv" | "internal-tsv" => Some(LogFormat::InternalTsv),
            _ => None,
        }
    }
}

/// Outcome of an ingestion run.
#[derive(Debug)]
pub struct LoadReport {
    /// Events sorted by (user_id, timestamp).
    pub events: Vec<BehaviorEvent>,
    pub rows_read: usize,
    pub rows_rejected: usize,
}

// Fraction of malformed rows above which ingestion aborts: stray corruption
// is tolerated, schema drift is not.
const MAX_REJECT_FRACTION: f64 = 0.01;

/// Load a behavior log. Malformed rows are tallied and reported; the load
/// fails if more than 1% of rows are rejected.
pub fn load_events(path: &Path, format: LogFormat) -> Result<LoadReport> {
    if !path.exists() {
        return Err(CoreError::Data(format!("input file not found: {}", path.display())));
    }
    let (mut events, rows_read, rows_rejected) = match format {
        LogFormat::InternalTsv => load_tsv(path)?,
        LogFormat::KuairandCsv => load_kuairand(path)?,
    };
    if rows_read > 0 && (rows_rejected as f64) > MAX_REJECT_FRACTION * rows_read as f64 {
        return Err(CoreError::Data(format!(
            "{rows_rejected} of {rows_read} rows malformed in {} (over the {}% limit)",
            path.display(),
            MAX_REJECT_FRACTION * 100.0
        )));
    }
    events.sort_by(|a, b| {
        (a.user_id, a.timestamp, a.action_type, a.item_id)
            .cmp(&(b.user_id, b.timestamp, b.action_type, b.item_id))
    });
    Ok(LoadReport { events, rows_read, rows_rejected })
}

fn load_tsv(path: &Path) -> Result<(Vec<BehaviorEvent>, usize, usize)> {
    let content = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    let mut rows = 0usize;
    let mut rejected = 0usize;
    for line in content.lines() {
        if line.is_empty() {
            continue;
        }
        rows += 1;
        match parse_tsv_row(line) {
            Some(e) => events.push(e),
            None => rejected += 1,
        }
    }
    Ok((events, rows, rejected))
}

fn parse_tsv_row(line: &str) -> Option<BehaviorEvent> {
    let mut parts = line.split('\t');
    let user = parts.next()?.trim().parse::<u64>().ok()?;
    let item = parts.next()?.trim().parse::<u64>().ok()?;
    let category = parts.next()?.trim().parse::<u64>().ok()?;
    let action = ActionType::parse(parts.next()?.trim())?;
    let timestamp = parts.next()?.trim().parse::<i64>().ok()?;
    if parts.next().is_some() || timestamp <= 0 {
        return None;
    }
    Some(BehaviorEvent {
        user_id: UserId(user),
        item_id: ItemId(item),
        category_id: CategoryId(category),
        action_type: action,
        timestamp,
    })
}

fn load_kuairand(path: &Path) -> Result<(Vec<BehaviorEvent>, usize, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| CoreError::Data(format!("cannot read header of {}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let user_col = col("user_id")
        .ok_or_else(|| CoreError::Data("kuairand_csv: missing user_id column".into()))?;
    let item_col = col("video_id").or_else(|| col("item_id")).ok_or_else(|| {
        CoreError::Data("kuairand_csv: missing video_id/item_id column".into())
    })?;
    let time_ms_col = col("time_ms");
    let time_s_col = col("timestamp");
    if time_ms_col.is_none() && time_s_col.is_none() {
        return Err(CoreError::Data("kuairand_csv: missing time_ms/timestamp column".into()));
    }
    let click_col = col("is_click")
        .ok_or_else(|| CoreError::Data("kuairand_csv: missing is_click column".into()))?;
    let tag_col = col("tag");
    let flag_cols: Vec<usize> = ["is_like", "is_follow", "is_comment", "is_forward"]
        .iter()
        .filter_map(|n| col(n))
        .collect();

    let mut events = Vec::new();
    let mut rows = 0usize;
    let mut rejected = 0usize;
    for record in reader.records() {
        rows += 1;
        let Ok(record) = record else {
            rejected += 1;
            continue;
        };
        let parsed = (|| -> Option<()> {
            let user = record.get(user_col)?.trim().parse::<u64>().ok()?;
            let item = record.get(item_col)?.trim().parse::<u64>().ok()?;
            let timestamp = match time_ms_col {
                Some(c) => record.get(c)?.trim().parse::<i64>().ok()? / 1000,
                None => record.get(time_s_col.unwrap())?.trim().parse::<i64>().ok()?,
            };
            if timestamp <= 0 {
                return None;
            }
            let category = tag_col
                .and_then(|c| record.get(c))
                .and_then(first_integer)
                .unwrap_or(0);
            let clicked = record.get(click_col)?.trim() == "1";
            let interacted = flag_cols
                .iter()
                .any(|&c| record.get(c).map(|v| v.trim() == "1").unwrap_or(false));

            let base = BehaviorEvent {
                user_id: UserId(user),
                item_id: ItemId(item),
                category_id: CategoryId(category),
                action_type: ActionType::Exposure,
                timestamp,
            };
            events.push(base);
            if clicked {
                events.push(BehaviorEvent { action_type: ActionType::Click, ..base });
            }
            if interacted {
                events.push(BehaviorEvent { action_type: ActionType::Interaction, ..base });
            }
            Some(())
        })();
        if parsed.is_none() {
            rejected += 1;
        }
    }
    Ok((events, rows, rejected))
}

// First integer in a field like "[11, 28]", "11,28" or "11".
fn first_integer(s: &str) -> Option<u64> {
    let digits: String =
        s.chars().skip_while(|c| !c.is_ascii_digit()).take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}
