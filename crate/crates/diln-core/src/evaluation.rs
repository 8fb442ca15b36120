//! Offline metrics: grouped AUC, life-cycle slice tables and activated-
//! cluster distributions.

use std::collections::BTreeMap;

use crate::data::{LifecyclePhase, RankingSample, UserId};
use crate::error::{CoreError, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted half, computed by rank sums. `None` when only one class is
/// present (undefined, deliberately not 0).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks across tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Per-user AUC entry inside a [`GaucReport`].
#[derive(Debug, Clone)]
pub struct UserAuc {
    pub user: UserId,
    pub impressions: usize,
    pub auc: f64,
}

/// Impression-weighted mean of per-user AUC over users with both classes.
#[derive(Debug, Clone)]
pub struct GaucReport {
    pub gauc: f64,
    pub per_user: Vec<UserAuc>,
    pub skipped_single_class: usize,
}

/// Grouped AUC over (user, score, label) rows. Users whose labels are
/// single-class are skipped and counted; it is an error if nobody is
/// eligible.
pub fn gauc(rows: &[(UserId, f64, bool)]) -> Result<GaucReport> {
    let mut by_user: BTreeMap<UserId, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for &(user, score, label) in rows {
        let entry = by_user.entry(user).or_default();
        entry.0.push(score);
        entry.1.push(label);
    }
    let mut per_user = Vec::new();
    let mut skipped = 0usize;
    let mut weighted = 0.0;
    let mut weight = 0.0;
    for (user, (scores, labels)) in by_user {
        match auc(&scores, &labels) {
            Some(a) => {
                let w = scores.len() as f64;
                weighted += w * a;
                weight += w;
                per_user.push(UserAuc { user, impressions: scores.len(), auc: a });
            }
            None => skipped += 1,
        }
    }
    if per_user.is_empty() {
        return Err(CoreError::Data(
            "grouped AUC undefined: no user has both positive and negative labels".into(),
        ));
    }
    Ok(GaucReport { gauc: weighted / weight, per_user, skipped_single_class: skipped })
}

/// One row of the life-cycle efficiency table.
#[derive(Debug, Clone)]
pub struct SliceRow {
    pub tag: LifecyclePhase,
    pub impressions: usize,
    pub impression_share: f64,
    pub ctr: f64,
    /// Conversion rate among clicked impressions; absent when the slice has
    /// no clicks.
    pub cvr: Option<f64>,
    pub mean_p_ctr: f64,
    pub mean_p_cvr: f64,
}

/// Per-tag efficiency table over tagged samples. Untagged samples are
/// ignored; tags with no samples simply do not appear.
pub fn lifecycle_slice_report(
    samples: &[RankingSample],
    p_ctr: &[f64],
    p_cvr: &[f64],
) -> Vec<SliceRow> {
    assert_eq!(samples.len(), p_ctr.len());
    assert_eq!(samples.len(), p_cvr.len());
    let mut rows = Vec::new();
    let tagged: Vec<usize> =
        (0..samples.len()).filter(|&i| samples[i].lifecycle_tag.is_some()).collect();
    let total = tagged.len();
    for phase in LifecyclePhase::ALL {
        let idx: Vec<usize> = tagged
            .iter()
            .copied()
            .filter(|&i| samples[i].lifecycle_tag == Some(phase))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let clicks = idx.iter().filter(|&&i| samples[i].label_click).count();
        let conversions = idx.iter().filter(|&&i| samples[i].label_conversion).count();
        rows.push(SliceRow {
            tag: phase,
            impressions: n,
            impression_share: n as f64 / total as f64,
            ctr: clicks as f64 / n as f64,
            cvr: if clicks > 0 { Some(conversions as f64 / clicks as f64) } else { None },
            mean_p_ctr: idx.iter().map(|&i| p_ctr[i]).sum::<f64>() / n as f64,
            mean_p_cvr: idx.iter().map(|&i| p_cvr[i]).sum::<f64>() / n as f64,
        });
    }
    rows
}

/// Per-phase distribution over activated clusters plus a tag/cluster
/// separation score.
#[derive(Debug, Clone)]
pub struct ClusterActivationReport {
    /// (phase, impressions, normalized activation frequencies of length
    /// `clusters`).
    pub rows: Vec<(LifecyclePhase, usize, Vec<f64>)>,
    /// Adjusted mutual information between tag and cluster index.
    pub ami: f64,
}

impl ClusterActivationReport {
    /// Index of the most-activated cluster for a phase, if present.
    pub fn majority_cluster(&self, phase: LifecyclePhase) -> Option<usize> {
        self.rows.iter().find(|(p, _, _)| *p == phase).map(|(_, _, freq)| {
            freq.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        })
    }
}

/// Build the activated-cluster report from tagged samples and their cluster
/// assignments.
pub fn cluster_activation_report(
    tags: &[LifecyclePhase],
    codes: &[usize],
    clusters: usize,
) -> ClusterActivationReport {
    assert_eq!(tags.len(), codes.len(), "tags/codes length mismatch");
    let mut rows = Vec::new();
    for phase in LifecyclePhase::ALL {
        let idx: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == phase).collect();
        if idx.is_empty() {
            continue;
        }
        let mut freq = vec![0.0; clusters];
        for &i in &idx {
            freq[codes[i]] += 1.0;
        }
        let n = idx.len() as f64;
        for f in freq.iter_mut() {
            *f /= n;
        }
        rows.push((phase, idx.len(), freq));
    }
    let tag_ids: Vec<usize> = tags
        .iter()
        .map(|t| LifecyclePhase::ALL.iter().position(|p| p == t).unwrap())
        .collect();
    ClusterActivationReport { rows, ami: adjusted_mutual_information(&tag_ids, codes) }
}

/// Adjusted mutual information between two labelings, arithmetic-mean
/// normalization: `(MI - E[MI]) / (mean(H(a), H(b)) - E[MI])`. Degenerate
/// cases (either side constant) return 0.
pub fn adjusted_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut contingency = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        contingency[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&ca);
    let h_b = entropy(&cb);

    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let nij = contingency[i * kb + j];
            if nij == 0 {
                continue;
            }
            let pij = nij as f64 / nf;
            mi += pij * (nf * nij as f64 / (ca[i] as f64 * cb[j] as f64)).ln();
        }
    }

    // Expected MI under the permutation model (hypergeometric marginals).
    let ln_fact = {
        let mut t = vec![0.0f64; n + 1];
        for i in 1..=n {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    };
    let mut emi = 0.0;
    for &ai in ca.iter().filter(|&&c| c > 0) {
        for &bj in cb.iter().filter(|&&c| c > 0) {
            let lo = 1.max((ai + bj).saturating_sub(n));
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = (nij as f64 / nf) * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let ln_p = ln_fact[ai] + ln_fact[bj] + ln_fact[n - ai] + ln_fact[n - bj]
                    - ln_fact[n]
                    - ln_fact[nij]
                    - ln_fact[ai - nij]
                    - ln_fact[bj - nij]
                    - ln_fact[n + nij - ai - bj];
                emi += term * ln_p.exp();
            }
        }
    }

    let denom = 0.5 * (h_a + h_b) - emi;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (mi - emi) / denom
}

/// Rule-based life-cycle tagging from the exposure histogram, for reports on
/// data without ground-truth tags. All-zero mass is unexplored; otherwise the
/// least-squares trend toward the present decides emergent vs declining, and
/// flat histograms (including flat low mass) fall back to long-term.
pub fn rule_based_tag(exposure_histogram: &[f64], slope_threshold: f64) -> LifecyclePhase {
    if exposure_histogram.iter().all(|&v| v == 0.0) {
        return LifecyclePhase::Unexplored;
    }
    // Index 0 is the most recent date; regress mass on time running toward
    // the present.
    let k = exposure_histogram.len() as f64;
    let mean_t = (k - 1.0) / 2.0;
    let mean_v = exposure_histogram.iter().sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, &v) in exposure_histogram.iter().enumerate() {
        let t = (exposure_histogram.len() - 1 - j) as f64;
        num += (t - mean_t) * (v - mean_v);
        den += (t - mean_t) * (t - mean_t);
    }
    let slope = num / den;
    if slope > slope_threshold {
        LifecyclePhase::Emergent
    } else if slope < -slope_threshold {
        LifecyclePhase::Declining
    } else {
        LifecyclePhase::LongTerm
    }
}
