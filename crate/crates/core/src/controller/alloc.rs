//! Turning scheduling scores into CPU allocations.

use std::collections::BTreeMap;

use super::{Allocations, ModuleId, ScheduleAssignment, ScoreSet};
use thiserror::Error;

/// Longest RT period the kernel interface accepts, in microseconds.
pub const MAX_PERIOD_US: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("no scores to allocate")]
    Empty,
    #[error("score {value} for module `{module}` is negative or not finite")]
    InvalidScore { module: ModuleId, value: f64 },
    #[error("processor count must be at least 1")]
    NoProcessors,
    #[error("period {0} us is outside (0, {MAX_PERIOD_US}]")]
    BadPeriod(u64),
}

fn check(scores: &ScoreSet) -> Result<f64, AllocError> {
    if scores.is_empty() {
        return Err(AllocError::Empty);
    }
    let mut total = 0.0;
    for (module, &w) in scores {
        if !w.is_finite() || w < 0.0 {
            return Err(AllocError::InvalidScore {
                module: module.clone(),
                value: w,
            });
        }
        total += w;
    }
    Ok(total)
}

/// CPU share per module in fractional cores: `N * w_c / sum(w)`.
///
/// When every score is zero the processors are split evenly instead.
pub fn compute_cfs_shares(scores: &ScoreSet, processors: u32) -> Result<ScheduleAssignment, AllocError> {
    if processors == 0 {
        return Err(AllocError::NoProcessors);
    }
    let total = check(scores)?;
    let n = f64::from(processors);
    let shares: BTreeMap<ModuleId, f64> = if total > 0.0 {
        scores.iter().map(|(m, &w)| (m.clone(), n * w / total)).collect()
    } else {
        let even = n / scores.len() as f64;
        scores.keys().map(|m| (m.clone(), even)).collect()
    };
    Ok(ScheduleAssignment {
        epoch: 0,
        allocations: Allocations::Cfs { shares },
    })
}

/// RT runtime per module in whole microseconds per period:
/// `floor(P * w_c / sum(w))`. The rounding remainder stays unassigned.
pub fn compute_rt_slices(scores: &ScoreSet, period_us: u64) -> Result<ScheduleAssignment, AllocError> {
    if period_us == 0 || period_us > MAX_PERIOD_US {
        return Err(AllocError::BadPeriod(period_us));
    }
    let total = check(scores)?;
    let p = period_us as f64;
    let slices = if total > 0.0 {
        scores
            .iter()
            .map(|(m, &w)| (m.clone(), ((p * w / total).floor() as u64).min(period_us)))
            .collect()
    } else {
        let even = period_us / scores.len() as u64;
        scores.keys().map(|m| (m.clone(), even)).collect()
    };
    Ok(ScheduleAssignment {
        epoch: 0,
        allocations: Allocations::Rt { period_us, slices },
    })
}

/// Current truth of one context rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleState {
    pub module: ModuleId,
    pub forced_weight: f64,
    pub active: bool,
}

/// Replaces the score of every module targeted by an active rule with the
/// rule's forced value. The lowest forced value wins when several rules are
/// active for one module.
pub fn apply_context_rules(scores: &ScoreSet, rules: &[RuleState]) -> ScoreSet {
    let mut forced: BTreeMap<&ModuleId, f64> = BTreeMap::new();
    for r in rules.iter().filter(|r| r.active) {
        forced
            .entry(&r.module)
            .and_modify(|w| *w = w.min(r.forced_weight))
            .or_insert(r.forced_weight);
    }
    scores
        .iter()
        .map(|(m, &w)| (m.clone(), forced.get(m).copied().unwrap_or(w)))
        .collect()
}
