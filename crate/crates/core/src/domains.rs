//! Behavior models for the legacy OS and for sapps.
//!
//! The LOS is untrusted and may pick an adversarial strategy. Its decisions
//! are computed from what it is allowed to observe (the [`LosView`]) plus its
//! own bookkeeping of what it scheduled and donated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hw::{MmioOp, PhysRange, PAGE_SIZE};
use crate::security_monitor::{ControlReturn, Handle, LosSappView, LosView};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("fraction {0} is outside [0, 1]")]
    BadFraction(f64),
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
}

fn check_fraction(f: f64) -> Result<(), DomainError> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(DomainError::BadFraction(f))
    }
}

/// Scheduler strategy of the LOS. Sapp targets are scenario indices, which
/// the LOS maps to the handles it received when it created them.
#[derive(Debug, Clone, PartialEq)]
pub enum LosStrategy {
    Cooperative,
    Starver { targets: Vec<usize> },
    SelectiveDos { target: usize, duty: f64 },
    Inspector { probes: Vec<u64> },
    PolicyCheater { fraction: f64 },
    /// Keeps the CPU busy so no idle trap ever reaches the monitor.
    NoCheck,
}

impl LosStrategy {
    pub fn validate(&self) -> Result<(), DomainError> {
        match self {
            LosStrategy::SelectiveDos { duty, .. } => check_fraction(*duty),
            LosStrategy::PolicyCheater { fraction } => check_fraction(*fraction),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LosStrategy::Cooperative => "cooperative",
            LosStrategy::Starver { .. } => "starver",
            LosStrategy::SelectiveDos { .. } => "selective_dos",
            LosStrategy::Inspector { .. } => "inspector",
            LosStrategy::PolicyCheater { .. } => "policy_cheater",
            LosStrategy::NoCheck => "no_check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SappBehavior {
    ComputeOnly { yield_after: u64 },
    PeripheralUser { name: String, ops: u64 },
    MemoryProbe { addresses: Vec<u64> },
}

impl Default for SappBehavior {
    fn default() -> Self {
        SappBehavior::ComputeOnly { yield_after: 100 }
    }
}

impl SappBehavior {
    pub fn validate(&self) -> Result<(), DomainError> {
        match self {
            SappBehavior::ComputeOnly { yield_after: 0 } => Err(DomainError::ZeroCount("yield_after")),
            SappBehavior::PeripheralUser { ops: 0, .. } => Err(DomainError::ZeroCount("ops")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReturnReason {
    Yield,
    SliceExpired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SappOp {
    Load { addr: u64 },
    Store { addr: u64, value: u8 },
    Mmio { name: String, offset: u64, op: MmioOp },
}

/// An operation issued `at` ms after the slice began.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedOp {
    pub at: u64,
    pub op: SappOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SappStep {
    pub ops: Vec<TimedOp>,
    pub ran: u64,
    pub reason: ReturnReason,
}

/// What a sapp does once it holds the CPU.
pub trait SappWorkload {
    fn step(&self, now: u64, slice: u64) -> SappStep;
}

/// Every op costs one millisecond; the sapp yields after its last op.
fn op_script(ops: Vec<SappOp>, slice: u64) -> SappStep {
    let total = (ops.len() as u64).max(1);
    let ran = total.min(slice);
    let ops = ops
        .into_iter()
        .enumerate()
        .map(|(k, op)| TimedOp { at: k as u64, op })
        .take_while(|o| o.at < ran)
        .collect();
    SappStep {
        ops,
        ran,
        reason: if total <= slice {
            ReturnReason::Yield
        } else {
            ReturnReason::SliceExpired
        },
    }
}

impl SappWorkload for SappBehavior {
    fn step(&self, now: u64, slice: u64) -> SappStep {
        match self {
            SappBehavior::ComputeOnly { yield_after } => {
                if *yield_after <= slice {
                    SappStep {
                        ops: Vec::new(),
                        ran: *yield_after,
                        reason: ReturnReason::Yield,
                    }
                } else {
                    SappStep {
                        ops: Vec::new(),
                        ran: slice,
                        reason: ReturnReason::SliceExpired,
                    }
                }
            }
            SappBehavior::PeripheralUser { name, ops } => {
                let script = (0..*ops)
                    .map(|k| {
                        let offset = 4 * ((k / 2) % 16);
                        let op = if k % 2 == 0 {
                            MmioOp::Write((now.wrapping_add(k) & 0xff) as u8)
                        } else {
                            MmioOp::Read
                        };
                        SappOp::Mmio {
                            name: name.clone(),
                            offset,
                            op,
                        }
                    })
                    .collect();
                op_script(script, slice)
            }
            SappBehavior::MemoryProbe { addresses } => {
                let script = addresses
                    .iter()
                    .flat_map(|&addr| {
                        [
                            SappOp::Load { addr },
                            SappOp::Store {
                                addr,
                                value: (addr & 0xff) as u8 ^ 0x5a,
                            },
                        ]
                    })
                    .collect();
                op_script(script, slice)
            }
        }
    }
}

/// One request the LOS makes in a step. The last call of a step is the one
/// that lets time pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LosCall {
    Switch { handle: Handle, slice: u64 },
    Load { addr: u64 },
    Mmio { name: String, offset: u64, op: MmioOp },
    /// Idle until `until`; the monitor gets timer traps meanwhile.
    Idle { until: u64 },
    /// Busy with LOS work until `until`; no trap reaches the monitor.
    Busy { until: u64 },
}

/// Bookkeeping the LOS keeps about its own decisions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LosState {
    /// Scenario index to the handle returned by create.
    pub handles: BTreeMap<usize, Handle>,
    granted: BTreeMap<(Handle, u64), u64>,
    pub donated: Vec<PhysRange>,
    probe_epoch: Option<u64>,
    nocheck_epoch: Option<u64>,
}

impl LosState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Called when create hands back a handle.
    pub fn created(&mut self, index: usize, handle: Handle) {
        self.handles.insert(index, handle);
    }

    pub fn observe_donation(&mut self, range: PhysRange) {
        self.donated.push(range);
    }

    /// Books what a switch actually ran, against the window holding `start`.
    pub fn observe_return(&mut self, handle: Handle, window_ms: u64, start: u64, ret: ControlReturn) {
        *self.granted.entry((handle, start / window_ms)).or_insert(0) += ret.ran;
    }

    pub fn granted(&self, handle: Handle, window: u64) -> u64 {
        self.granted.get(&(handle, window)).copied().unwrap_or(0)
    }

    /// Forget everything tied to the previous boot session.
    pub fn reset(&mut self) {
        self.handles.clear();
        self.granted.clear();
        self.donated.clear();
        self.probe_epoch = None;
        self.nocheck_epoch = None;
    }

    fn index_of(&self, handle: Handle) -> Option<usize> {
        self.handles
            .iter()
            .find(|(_, h)| **h == handle)
            .map(|(i, _)| *i)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Runtime the strategy intends to give `sapp` in window `w`.
pub fn quota(strategy: &LosStrategy, state: &LosState, sapp: &LosSappView, w: u64) -> u64 {
    if !sapp.policy.active {
        return 0;
    }
    let min = sapp.policy.min_runtime_ms;
    let index = state.index_of(sapp.handle);
    match strategy {
        LosStrategy::Cooperative | LosStrategy::Inspector { .. } | LosStrategy::NoCheck => min,
        LosStrategy::Starver { targets } => {
            if index.is_some_and(|i| targets.contains(&i)) {
                0
            } else {
                min
            }
        }
        LosStrategy::SelectiveDos { target, duty } => {
            if index != Some(*target) {
                return min;
            }
            let draw = (splitmix64(sapp.handle.0 ^ w) >> 11) as f64 / (1u64 << 53) as f64;
            if draw < *duty {
                min
            } else {
                0
            }
        }
        LosStrategy::PolicyCheater { fraction } => {
            ((min as f64) * fraction + 1e-9).floor() as u64
        }
    }
}

/// Picks where to carve a donation of `need` bytes from LOS memory: the top
/// of the highest LOS range that is large enough.
pub fn plan_donation(los_memory: &[PhysRange], need: u64) -> Option<PhysRange> {
    let need = need.div_ceil(PAGE_SIZE) * PAGE_SIZE;
    los_memory
        .iter()
        .rev()
        .find(|r| r.size() >= need)
        .and_then(|r| PhysRange::new(r.end() - need, need).ok())
}

/// One LOS decision at time `now`. Every call it returns ends by `horizon`.
pub fn los_step(
    strategy: &LosStrategy,
    view: &LosView,
    state: &mut LosState,
    now: u64,
    horizon: u64,
) -> Vec<LosCall> {
    let mut calls = Vec::new();
    if let LosStrategy::Inspector { probes } = strategy {
        let epoch = now / view.check_interval_ms.max(1);
        if state.probe_epoch != Some(epoch) {
            state.probe_epoch = Some(epoch);
            let mut addrs = probes.clone();
            addrs.extend(state.donated.iter().map(PhysRange::base));
            calls.extend(addrs.into_iter().map(|addr| LosCall::Load { addr }));
            for s in &view.sapps {
                for name in &s.peripherals {
                    calls.push(LosCall::Mmio {
                        name: name.clone(),
                        offset: 0,
                        op: MmioOp::Read,
                    });
                }
            }
        }
    }

    if let LosStrategy::NoCheck = strategy {
        let period = 3 * view.check_interval_ms.max(1);
        let epoch = now / period;
        if state.nocheck_epoch != Some(epoch) {
            state.nocheck_epoch = Some(epoch);
            for s in &view.sapps {
                let slice = s.policy.min_runtime_ms.min(horizon.saturating_sub(now)).max(1);
                calls.push(LosCall::Switch {
                    handle: s.handle,
                    slice,
                });
            }
            if !calls.is_empty() {
                return calls;
            }
        }
        calls.push(LosCall::Busy {
            until: ((epoch + 1) * period).min(horizon),
        });
        return calls;
    }

    // Earliest-deadline-first among sapps still short of their quota. A
    // locked device refuses the switch; the LOS keeps asking regardless.
    let pick = view
        .sapps
        .iter()
        .filter_map(|s| {
            let w = s.policy.window_of(now);
            let need = quota(strategy, state, s, w).saturating_sub(state.granted(s.handle, w));
            (need > 0).then(|| (s.policy.window_end(w), need, s))
        })
        .min_by_key(|(deadline, _, s)| (*deadline, s.handle));

    let mut boundary = horizon;
    for s in &view.sapps {
        boundary = boundary.min(s.policy.window_end(s.policy.window_of(now)));
    }
    if view.next_check_ms > now {
        boundary = boundary.min(view.next_check_ms);
    }

    match pick {
        Some((deadline, need, s)) => {
            let limit = boundary.min(deadline);
            calls.push(LosCall::Switch {
                handle: s.handle,
                slice: need.min(limit - now).max(1),
            });
        }
        None => calls.push(LosCall::Idle { until: boundary }),
    }
    calls
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SchedulingPolicy;

    fn view(sapps: Vec<LosSappView>) -> LosView {
        LosView {
            sapps,
            check_interval_ms: 100,
            next_check_ms: 100,
            device_locked: false,
        }
    }

    fn sapp(h: u64, min: u64) -> LosSappView {
        LosSappView {
            handle: Handle(h),
            mem_size: 65536,
            policy: SchedulingPolicy::new(min, 100).unwrap(),
            peripherals: Vec::new(),
            runtime_ms: 0,
            created_ms: 0,
        }
    }

    /// Drives a strategy for one window with compute-only sapps that never
    /// yield early, returning granted time per handle.
    fn one_window(strategy: &LosStrategy, sapps: Vec<LosSappView>) -> BTreeMap<Handle, u64> {
        let mut state = LosState::new();
        for (i, s) in sapps.iter().enumerate() {
            state.created(i, s.handle);
        }
        let v = view(sapps);
        let mut now = 0;
        let mut out = BTreeMap::new();
        while now < 100 {
            let calls = los_step(strategy, &v, &mut state, now, 100);
            for c in calls {
                match c {
                    LosCall::Switch { handle, slice } => {
                        let ret = ControlReturn {
                            ran: slice,
                            reason: ReturnReason::SliceExpired,
                        };
                        state.observe_return(handle, 100, now, ret);
                        *out.entry(handle).or_insert(0) += slice;
                        now += slice;
                    }
                    LosCall::Idle { until } | LosCall::Busy { until } => now = until,
                    _ => {}
                }
            }
        }
        out
    }

    #[test]
    fn cooperative_meets_the_policy() {
        let got = one_window(&LosStrategy::Cooperative, vec![sapp(1, 20)]);
        assert_eq!(got[&Handle(1)], 20);
    }

    #[test]
    fn policy_cheater_grants_a_fraction() {
        let got = one_window(&LosStrategy::PolicyCheater { fraction: 0.5 }, vec![sapp(1, 20)]);
        assert_eq!(got[&Handle(1)], 10);
        let got = one_window(&LosStrategy::PolicyCheater { fraction: 0.0 }, vec![sapp(1, 20)]);
        assert!(!got.contains_key(&Handle(1)));
    }

    #[test]
    fn starver_skips_only_its_targets() {
        let got = one_window(
            &LosStrategy::Starver { targets: vec![0] },
            vec![sapp(1, 20), sapp(2, 30)],
        );
        assert!(!got.contains_key(&Handle(1)));
        assert_eq!(got[&Handle(2)], 30);
    }

    #[test]
    fn cooperative_fills_a_full_window() {
        let got = one_window(&LosStrategy::Cooperative, vec![sapp(1, 60), sapp(2, 40)]);
        assert_eq!(got[&Handle(1)], 60);
        assert_eq!(got[&Handle(2)], 40);
    }

    #[test]
    fn inspector_probes_once_per_epoch() {
        let mut state = LosState::new();
        let strategy = LosStrategy::Inspector {
            probes: vec![0x8001_0000],
        };
        let v = view(vec![]);
        let first = los_step(&strategy, &v, &mut state, 0, 100);
        assert!(first.contains(&LosCall::Load { addr: 0x8001_0000 }));
        let again = los_step(&strategy, &v, &mut state, 50, 100);
        assert!(!again.iter().any(|c| matches!(c, LosCall::Load { .. })));
    }

    #[test]
    fn compute_only_yields() {
        let b = SappBehavior::ComputeOnly { yield_after: 10 };
        let s = b.step(0, 10);
        assert_eq!((s.ran, s.reason), (10, ReturnReason::Yield));
        let s = b.step(0, 4);
        assert_eq!((s.ran, s.reason), (4, ReturnReason::SliceExpired));
    }

    #[test]
    fn peripheral_user_issues_ops_then_yields() {
        let b = SappBehavior::PeripheralUser {
            name: "ble0".into(),
            ops: 3,
        };
        let s = b.step(0, 50);
        assert_eq!(s.ops.len(), 3);
        assert_eq!((s.ran, s.reason), (3, ReturnReason::Yield));
        assert!(s
            .ops
            .iter()
            .all(|o| matches!(&o.op, SappOp::Mmio { name, .. } if name == "ble0")));
    }

    #[test]
    fn memory_probe_loads_and_stores() {
        let b = SappBehavior::MemoryProbe {
            addresses: vec![0x8000_0000, 0x8000_1000],
        };
        let s = b.step(0, 50);
        assert_eq!(s.ops.len(), 4);
        assert_eq!(s.ran, 4);
    }

    #[test]
    fn behaviors_are_deterministic() {
        let b = SappBehavior::PeripheralUser {
            name: "ble0".into(),
            ops: 7,
        };
        assert_eq!(b.step(40, 5), b.step(40, 5));
    }

    #[test]
    fn fractions_are_bounded() {
        assert!(LosStrategy::PolicyCheater { fraction: 1.5 }.validate().is_err());
        assert!(LosStrategy::SelectiveDos { target: 0, duty: -0.1 }
            .validate()
            .is_err());
        assert!(SappBehavior::ComputeOnly { yield_after: 0 }.validate().is_err());
    }

    #[test]
    fn donation_comes_from_the_top() {
        let los = [PhysRange::new(0x8000_0000, 0x10_0000).unwrap()];
        let d = plan_donation(&los, 0x1_0000).unwrap();
        assert_eq!(d.end(), 0x8010_0000);
        assert_eq!(d.size(), 0x1_0000);
        assert!(plan_donation(&los, 0x20_0000).is_none());
    }
}
