//! Scheduling policies and the per-window runtime ledger.
//!
//! Time is integral milliseconds. A window index is `floor(t / window_ms)`.
//! A slice is credited entirely to the window containing its start, even when
//! it runs past the window's end.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::security_monitor::Handle;

pub const DEFAULT_WINDOW_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("window_ms must be positive")]
    ZeroWindow,
    #[error("min_runtime_ms {min} exceeds window_ms {window}")]
    MinExceedsWindow { min: u64, window: u64 },
}

fn default_window() -> u64 {
    DEFAULT_WINDOW_MS
}

fn default_active() -> bool {
    true
}

/// Minimum runtime a sapp must receive in every window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulingPolicy {
    pub min_runtime_ms: u64,
    #[serde(default = "default_window")]
    pub window_ms: u64,
    #[serde(default = "default_active")]
    pub active: bool,
}

impl SchedulingPolicy {
    pub fn new(min_runtime_ms: u64, window_ms: u64) -> Result<Self, PolicyError> {
        let p = Self {
            min_runtime_ms,
            window_ms,
            active: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.window_ms == 0 {
            return Err(PolicyError::ZeroWindow);
        }
        if self.min_runtime_ms > self.window_ms {
            return Err(PolicyError::MinExceedsWindow {
                min: self.min_runtime_ms,
                window: self.window_ms,
            });
        }
        Ok(())
    }

    pub fn window_of(&self, t: u64) -> u64 {
        window_index(t, self.window_ms)
    }

    /// First window starting at or after `t`.
    pub fn first_full_window_from(&self, t: u64) -> u64 {
        t.div_ceil(self.window_ms)
    }

    pub fn window_start(&self, w: u64) -> u64 {
        w * self.window_ms
    }

    pub fn window_end(&self, w: u64) -> u64 {
        (w + 1) * self.window_ms
    }
}

pub fn window_index(t: u64, window_ms: u64) -> u64 {
    t / window_ms
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SappLedger {
    window_ms: u64,
    granted: BTreeMap<u64, u64>,
    total: u64,
}

/// Runtime granted to each sapp, per policy window. Written only at context
/// switches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuntimeLedger {
    sapps: BTreeMap<Handle, SappLedger>,
}

impl RuntimeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, sapp: Handle, window_ms: u64) {
        self.sapps.entry(sapp).or_insert(SappLedger {
            window_ms,
            ..Default::default()
        });
    }

    pub fn is_registered(&self, sapp: Handle) -> bool {
        self.sapps.contains_key(&sapp)
    }

    /// Attributes `ran` to the window containing `start`. Unregistered sapps
    /// and zero-length runs leave the ledger unchanged.
    pub fn credit(&mut self, sapp: Handle, start: u64, ran: u64) {
        if ran == 0 {
            return;
        }
        if let Some(l) = self.sapps.get_mut(&sapp) {
            let w = window_index(start, l.window_ms);
            *l.granted.entry(w).or_insert(0) += ran;
            l.total += ran;
        }
    }

    pub fn granted(&self, sapp: Handle, window: u64) -> u64 {
        self.sapps
            .get(&sapp)
            .and_then(|l| l.granted.get(&window).copied())
            .unwrap_or(0)
    }

    pub fn total(&self, sapp: Handle) -> u64 {
        self.sapps.get(&sapp).map_or(0, |l| l.total)
    }

    /// Non-zero windows of one sapp, in order.
    pub fn windows(&self, sapp: Handle) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.sapps
            .get(&sapp)
            .into_iter()
            .flat_map(|l| l.granted.iter().map(|(w, g)| (*w, *g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictStatus {
    Compliant,
    Violation { deficit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyVerdict {
    pub window_index: u64,
    pub status: VerdictStatus,
}

/// Judges each window in `windows` against `policy`. Pure: the caller keeps
/// the cursor of windows already judged and passes only elapsed ones.
pub fn evaluate(
    ledger: &RuntimeLedger,
    sapp: Handle,
    policy: &SchedulingPolicy,
    windows: RangeInclusive<u64>,
) -> Vec<PolicyVerdict> {
    if !policy.active {
        return Vec::new();
    }
    windows
        .map(|w| {
            let granted = ledger.granted(sapp, w);
            let status = if granted >= policy.min_runtime_ms {
                VerdictStatus::Compliant
            } else {
                VerdictStatus::Violation {
                    deficit: policy.min_runtime_ms - granted,
                }
            };
            PolicyVerdict {
                window_index: w,
                status,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckDue {
    NotDue,
    Due,
    Overdue,
}

pub fn check_due(last_check: u64, now: u64, interval: u64) -> CheckDue {
    let elapsed = now.saturating_sub(last_check);
    if elapsed < interval {
        CheckDue::NotDue
    } else if elapsed <= 2 * interval {
        CheckDue::Due
    } else {
        CheckDue::Overdue
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S1: Handle = Handle(1);

    fn ledger(window: u64) -> RuntimeLedger {
        let mut l = RuntimeLedger::new();
        l.register(S1, window);
        l
    }

    #[test]
    fn policy_invariants() {
        assert_eq!(SchedulingPolicy::new(0, 0), Err(PolicyError::ZeroWindow));
        assert!(matches!(
            SchedulingPolicy::new(101, 100),
            Err(PolicyError::MinExceedsWindow { .. })
        ));
        assert!(SchedulingPolicy::new(100, 100).is_ok());
    }

    #[test]
    fn credit_examples() {
        let mut l = ledger(100);
        l.credit(S1, 0, 10);
        assert_eq!(l.granted(S1, 0), 10);

        let mut l = ledger(100);
        l.credit(S1, 95, 10);
        assert_eq!(l.granted(S1, 0), 10);
        assert_eq!(l.granted(S1, 1), 0);

        let mut l = ledger(100);
        let before = l.clone();
        l.credit(S1, 40, 0);
        assert_eq!(l, before);
    }

    #[test]
    fn evaluate_examples() {
        let p = SchedulingPolicy::new(20, 100).unwrap();
        for (granted, expect) in [
            (25, VerdictStatus::Compliant),
            (10, VerdictStatus::Violation { deficit: 10 }),
            (20, VerdictStatus::Compliant),
        ] {
            let mut l = ledger(100);
            l.credit(S1, 0, granted);
            assert_eq!(
                evaluate(&l, S1, &p, 0..=0),
                vec![PolicyVerdict {
                    window_index: 0,
                    status: expect
                }]
            );
        }
    }

    #[test]
    fn inactive_policy_yields_no_verdicts() {
        let mut p = SchedulingPolicy::new(20, 100).unwrap();
        p.active = false;
        assert!(evaluate(&ledger(100), S1, &p, 0..=5).is_empty());
    }

    #[test]
    #[allow(clippy::reversed_empty_ranges)]
    fn empty_window_range_is_empty() {
        let p = SchedulingPolicy::new(20, 100).unwrap();
        assert!(evaluate(&ledger(100), S1, &p, 3..=2).is_empty());
    }

    #[test]
    fn check_due_examples() {
        assert_eq!(check_due(0, 50, 100), CheckDue::NotDue);
        assert_eq!(check_due(0, 150, 100), CheckDue::Due);
        assert_eq!(check_due(0, 250, 100), CheckDue::Overdue);
        assert_eq!(check_due(0, 100, 100), CheckDue::Due);
        assert_eq!(check_due(0, 200, 100), CheckDue::Due);
        assert_eq!(check_due(0, 201, 100), CheckDue::Overdue);
    }

    #[test]
    fn first_full_window() {
        let p = SchedulingPolicy::new(20, 100).unwrap();
        assert_eq!(p.first_full_window_from(0), 0);
        assert_eq!(p.first_full_window_from(1), 1);
        assert_eq!(p.first_full_window_from(100), 1);
        assert_eq!(p.first_full_window_from(101), 2);
    }

    /// Replays a slice list and sums per window from scratch.
    fn oracle(slices: &[(u64, u64)], window: u64) -> BTreeMap<u64, u64> {
        let mut sums = BTreeMap::new();
        for &(start, ran) in slices {
            *sums.entry(start / window).or_insert(0) += ran;
        }
        sums
    }

    fn slices() -> impl Strategy<Value = (u64, Vec<(u64, u64)>)> {
        (1u64..200).prop_flat_map(|window| {
            (
                Just(window),
                proptest::collection::vec((0u64..2_000, 0u64..60), 0..=50),
            )
        })
    }

    proptest! {
        #[test]
        fn evaluate_matches_replay_oracle((window, slices) in slices(), min_frac in 0u64..=100) {
            let min = window * min_frac / 100;
            let policy = SchedulingPolicy::new(min, window).unwrap();
            let mut l = ledger(window);
            for &(s, r) in &slices {
                l.credit(S1, s, r);
            }
            let sums = oracle(&slices, window);
            let last = 2_000 / window + 1;
            let verdicts = evaluate(&l, S1, &policy, 0..=last);
            prop_assert_eq!(verdicts.len() as u64, last + 1);
            for v in verdicts {
                let g = sums.get(&v.window_index).copied().unwrap_or(0);
                let expect = if g >= min {
                    VerdictStatus::Compliant
                } else {
                    VerdictStatus::Violation { deficit: min - g }
                };
                prop_assert_eq!(v.status, expect);
            }
        }

        #[test]
        fn evaluate_is_pure((window, slices) in slices()) {
            let policy = SchedulingPolicy::new(window / 2, window).unwrap();
            let mut l = ledger(window);
            for &(s, r) in &slices {
                l.credit(S1, s, r);
            }
            let snapshot = l.clone();
            let a = evaluate(&l, S1, &policy, 0..=20);
            let b = evaluate(&l, S1, &policy, 0..=20);
            prop_assert_eq!(a, b);
            prop_assert_eq!(l, snapshot);
        }

        #[test]
        fn decreasing_grant_never_repairs_a_window(granted in 0u64..100, cut in 0u64..100, min in 0u64..=100) {
            let policy = SchedulingPolicy::new(min, 100).unwrap();
            let mut hi = ledger(100);
            hi.credit(S1, 0, granted);
            let mut lo = ledger(100);
            lo.credit(S1, 0, granted.saturating_sub(cut));
            let v_hi = evaluate(&hi, S1, &policy, 0..=0)[0].status;
            let v_lo = evaluate(&lo, S1, &policy, 0..=0)[0].status;
            let hi_violates = matches!(v_hi, VerdictStatus::Violation { .. });
            let lo_violates = matches!(v_lo, VerdictStatus::Violation { .. });
            prop_assert!(!hi_violates || lo_violates);
        }

        #[test]
        fn granted_never_decreases((window, slices) in slices()) {
            let mut l = ledger(window);
            let mut prev: BTreeMap<u64, u64> = BTreeMap::new();
            for &(s, r) in &slices {
                l.credit(S1, s, r);
                for (w, g) in l.windows(S1) {
                    prop_assert!(g >= prev.get(&w).copied().unwrap_or(0));
                }
                prev = l.windows(S1).collect();
            }
        }
    }
}
