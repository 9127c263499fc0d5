//! The deterministic event loop.
//!
//! At each time point the script actions due at that time run first, then
//! the LOS takes one step. Time advances only through sapp slices, LOS idle
//! periods and LOS busy periods. Invariants are checked after every action.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attestation::{verify_report, AttestationReport, ExpectedClaims, Nonce};
use crate::domains::{los_step, plan_donation, LosCall, LosState, LosStrategy, SappOp};
use crate::hw::{AccessContext, AccessKind, DomainId, Fault, HwError, Machine, MmioOp, PhysRange};
use crate::policy::{CheckDue, SchedulingPolicy};
use crate::security_monitor::{
    Caller, Handle, LosView, SanctionCause, SanctionKind, SanctionState, SecurityMonitor, SmError,
    SmEvent,
};

use super::scenario::{Action, Scenario};
use super::trace::{canonicalize_handles, Actor, Trace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Invariant {
    PeripheralExclusivity,
    LockMonotonicity,
    ClockMonotonicity,
    InspectionRevoked,
    LedgerSoundness,
    DetectionBound,
    NoFalsePositive,
    InspectorFutility,
    ProbeFutility,
    Escalation,
    Attestation,
}

impl Invariant {
    pub fn name(self) -> &'static str {
        match self {
            Invariant::PeripheralExclusivity => "peripheral exclusivity",
            Invariant::LockMonotonicity => "lock monotonicity",
            Invariant::ClockMonotonicity => "clock monotonicity",
            Invariant::InspectionRevoked => "management without inspection",
            Invariant::LedgerSoundness => "ledger soundness",
            Invariant::DetectionBound => "detection bound",
            Invariant::NoFalsePositive => "no false positives",
            Invariant::InspectorFutility => "inspector futility",
            Invariant::ProbeFutility => "memory probe futility",
            Invariant::Escalation => "sanction escalation",
            Invariant::Attestation => "attestation round trip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: Invariant,
    pub t: u64,
    /// Trace line closest to the violation.
    pub line: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notice {
    pub t: u64,
    pub line: usize,
    pub kind: SanctionKind,
    pub cause: SanctionCause,
}

/// Outcome of one under-granted window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detection {
    pub handle: Handle,
    pub window: u64,
    pub window_end: u64,
    pub deadline: u64,
    pub notified_at: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub switches: u64,
    pub checks: u64,
    pub notices: Vec<Notice>,
    pub missed_checks: u64,
    pub device_locked_at: Option<u64>,
    pub denied_after_lock: u64,
    pub inspector_probes: u64,
    pub inspector_hits: u64,
    pub sapp_probes: u64,
    pub sapp_probe_hits: u64,
    pub detections: Vec<Detection>,
    pub creates: u64,
    pub double_concessions: u64,
    pub double_concessions_refused: u64,
    pub windows_judged: u64,
}

impl RunStats {
    pub fn sanction_count(&self) -> usize {
        self.notices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestRecord {
    pub sapp: usize,
    pub report: AttestationReport,
    pub verified: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub stats: RunStats,
    pub violations: Vec<Violation>,
    pub final_view: LosView,
    /// Digest over every view the LOS received, handles canonicalized.
    pub view_digest: [u8; 32],
    pub reports: Vec<AttestRecord>,
    pub end_ms: u64,
}

impl RunOutcome {
    pub fn violations_of(&self, inv: Invariant) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(move |v| v.invariant == inv)
    }
}

#[derive(Debug, Clone)]
struct SappRecord {
    index: usize,
    handle: Handle,
    id: DomainId,
    policy: SchedulingPolicy,
    created_ms: u64,
    mem: PhysRange,
    removed_ms: Option<u64>,
}

pub struct Simulation<'a> {
    sc: &'a Scenario,
    sm: SecurityMonitor,
    los: LosState,
    now: u64,
    horizon: u64,
    trace: Trace,
    nonce_rng: ChaCha8Rng,
    stats: RunStats,
    violations: Vec<Violation>,
    grants: BTreeMap<(Handle, u64), u64>,
    records: Vec<SappRecord>,
    notified: HashMap<(Handle, u64), u64>,
    prev_locked: Vec<bool>,
    prev_now: u64,
    views: String,
    reports: Vec<AttestRecord>,
}

fn hex_addr(a: u64) -> String {
    format!("{a:#x}")
}

/// Appends the outcome; reads also carry the value they returned.
fn result_fields(detail: &mut Vec<(&'static str, String)>, r: &Result<u8, HwError>, read: bool) {
    match r {
        Ok(v) => {
            detail.push(("result", "ok".into()));
            if read {
                detail.push(("value", v.to_string()));
            }
        }
        Err(e) => detail.push(("result", e.name())),
    }
}

fn op_fields(op: &SappOp) -> (&'static str, Vec<(&'static str, String)>) {
    match op {
        SappOp::Load { addr } => ("load", vec![("addr", hex_addr(*addr))]),
        SappOp::Store { addr, value } => (
            "store",
            vec![("addr", hex_addr(*addr)), ("data", value.to_string())],
        ),
        SappOp::Mmio { name, offset, op } => mmio_fields(name, *offset, *op),
    }
}

fn mmio_fields(name: &str, offset: u64, op: MmioOp) -> (&'static str, Vec<(&'static str, String)>) {
    let mut d = vec![("name", name.to_string()), ("offset", hex_addr(offset))];
    let ev = match op {
        MmioOp::Read => "mmio_read",
        MmioOp::Execute => "mmio_exec",
        MmioOp::Write(v) => {
            d.push(("data", v.to_string()));
            "mmio_write"
        }
    };
    (ev, d)
}

fn cause_fields(cause: &SanctionCause) -> Vec<(&'static str, String)> {
    match cause {
        SanctionCause::PolicyViolation {
            handle,
            window,
            deficit,
        } => vec![
            ("cause", "PolicyViolation".into()),
            ("handle", handle.to_string()),
            ("window", window.to_string()),
            ("deficit", deficit.to_string()),
        ],
        SanctionCause::MissedCheck { last_check } => vec![
            ("cause", "MissedCheck".into()),
            ("last_check", last_check.to_string()),
        ],
    }
}

fn report_fields(r: &AttestationReport) -> Vec<(&'static str, String)> {
    vec![
        ("measurement", r.measurement.to_string()),
        ("nonce", hex::encode(r.nonce)),
        ("session", r.boot_session.to_string()),
        ("mem", r.mem_size.to_string()),
        ("tag", hex::encode(r.tag)),
    ]
}

impl<'a> Simulation<'a> {
    pub fn new(sc: &'a Scenario) -> Result<Self, SmError> {
        let mut machine = Machine::new(sc.ram_size, sc.prot_entries, sc.device_tree.clone())?;
        machine.set_unlockable_entry(sc.unlockable_entry);
        let sm = SecurityMonitor::boot(machine, sc.sm_config(), sc.initial_memory, 0)?;
        let mut nonce_rng = ChaCha8Rng::seed_from_u64(sc.seed);
        nonce_rng.set_stream(u64::MAX - 1);
        let prev_locked = sm.machine().locked_mask();
        Ok(Self {
            sc,
            sm,
            los: LosState::new(),
            now: 0,
            horizon: 0,
            trace: Trace::new(),
            nonce_rng,
            stats: RunStats::default(),
            violations: Vec::new(),
            grants: BTreeMap::new(),
            records: Vec::new(),
            notified: HashMap::new(),
            prev_locked,
            prev_now: 0,
            views: String::new(),
            reports: Vec::new(),
        })
    }

    fn emit(
        &mut self,
        t: u64,
        actor: Actor,
        event: &str,
        detail: Vec<(&'static str, String)>,
        los_visible: bool,
    ) -> usize {
        self.trace.push(TraceEvent {
            t,
            actor,
            event: event.to_string(),
            detail,
            los_visible,
        })
    }

    fn violate(&mut self, invariant: Invariant, t: u64, detail: String) {
        let line = self.trace.len().saturating_sub(1);
        self.violations.push(Violation {
            invariant,
            t,
            line,
            detail,
        });
    }

    fn result_line(&mut self, op: &str, res: Result<Vec<(&'static str, String)>, SmError>, visible: bool) -> bool {
        let now = self.now;
        match res {
            Ok(d) => {
                self.emit(now, Actor::Sm, &format!("{op}.ok"), d, visible);
                true
            }
            Err(e) => {
                self.emit(
                    now,
                    Actor::Sm,
                    &format!("{op}.err"),
                    vec![("error", e.name().to_string())],
                    visible,
                );
                false
            }
        }
    }

    fn draw_nonce(&mut self) -> Nonce {
        let mut n = [0u8; 32];
        self.nonce_rng.fill_bytes(&mut n);
        n
    }

    fn handle_of(&self, index: usize) -> Handle {
        // Handle 0 is never issued, so an uncreated sapp yields NoSuchSapp.
        self.los.handles.get(&index).copied().unwrap_or(Handle(0))
    }

    fn record(&self, handle: Handle) -> Option<&SappRecord> {
        self.records.iter().find(|r| r.handle == handle)
    }

    fn sapp_at(&self, addr: u64) -> Option<&SappRecord> {
        self.records.iter().find(|r| r.mem.contains(addr))
    }

    pub fn run(mut self) -> RunOutcome {
        let until = self.sc.until_ms;
        let script = self.sc.script.clone();
        let mut next = 0;
        loop {
            while next < script.len() && script[next].t_ms <= self.now {
                self.exec_action(&script[next].action);
                self.check_invariants();
                next += 1;
            }
            if self.now >= until {
                break;
            }
            self.horizon = script
                .get(next)
                .map_or(until, |s| s.t_ms.min(until))
                .max(self.now + 1);
            let view = self.sm.los_observable_view();
            self.views.push_str(&view.to_string());
            let start = self.now;
            let calls = los_step(&self.sc.strategy, &view, &mut self.los, self.now, self.horizon);
            for call in calls {
                self.exec_call(call);
                self.check_invariants();
            }
            if self.now == start {
                // Refused switches move no time; wait for the next check.
                let next_check = self.sm.last_check() + self.sc.check_interval_ms;
                let until = next_check.clamp(self.now + 1, self.horizon);
                self.exec_call(LosCall::Idle { until });
                self.check_invariants();
            }
        }
        self.close_session(self.now);
        let final_view = self.sm.los_observable_view();
        let view_digest = Sha256::digest(canonicalize_handles(&self.views).as_bytes()).into();
        RunOutcome {
            trace: self.trace,
            stats: self.stats,
            violations: self.violations,
            final_view,
            view_digest,
            reports: self.reports,
            end_ms: self.now,
        }
    }

    fn donate(&mut self, range: PhysRange) {
        let now = self.now;
        self.emit(
            now,
            Actor::Los,
            "donate_memory",
            vec![("base", hex_addr(range.base())), ("size", hex_addr(range.size()))],
            true,
        );
        let res = self.sm.donate_memory(range).map(|_| vec![]);
        if self.result_line("donate_memory", res, true) {
            self.los.observe_donation(range);
        }
    }

    fn exec_action(&mut self, action: &Action) {
        let now = self.now;
        match action {
            Action::Create { sapp, nonce } => self.create(*sapp, *nonce),
            Action::Destroy { sapp } => {
                let h = self.handle_of(*sapp);
                self.emit(now, Actor::Los, "destroy_sapp", vec![("handle", h.to_string())], true);
                let res = self.sm.destroy_sapp(h, now);
                self.drain();
                if self.result_line("destroy_sapp", res.map(|_| vec![]), true) {
                    if let Some(r) = self.records.iter_mut().find(|r| r.handle == h) {
                        r.removed_ms = Some(now);
                    }
                }
            }
            Action::Attest { sapp, nonce } => {
                let h = self.handle_of(*sapp);
                let nonce = nonce.unwrap_or_else(|| self.draw_nonce());
                self.emit(
                    now,
                    Actor::Los,
                    "attest_sapp",
                    vec![("handle", h.to_string()), ("nonce", hex::encode(nonce))],
                    false,
                );
                let res = self.sm.attest_sapp(h, nonce, now);
                self.drain();
                match res {
                    Ok(report) => {
                        self.result_line("attest_sapp", Ok(vec![]), false);
                        self.emit(now, Actor::Sm, "report", report_fields(&report), false);
                        let verified = self.verify(*sapp, &report);
                        self.reports.push(AttestRecord {
                            sapp: *sapp,
                            report,
                            verified,
                        });
                    }
                    Err(e) => {
                        self.result_line("attest_sapp", Err(e), false);
                    }
                }
            }
            Action::Reset => {
                self.emit(now, Actor::Los, "full_reset", vec![], true);
                self.close_session(now);
                let res = self.sm.full_reset(now);
                self.los.reset();
                self.records.clear();
                self.grants.clear();
                self.notified.clear();
                self.prev_locked = self.sm.machine().locked_mask();
                let session = self.sm.boot_session();
                self.result_line(
                    "full_reset",
                    res.map(|_| vec![("session", session.to_string())]),
                    true,
                );
            }
            Action::Concede { sapp, peripheral } => {
                let h = self.handle_of(*sapp);
                self.concede(peripheral, h);
            }
            Action::Release {
                sapp,
                peripheral,
                by_los,
            } => {
                let h = self.handle_of(*sapp);
                let (actor, caller) = if *by_los {
                    (Actor::Los, Caller::Los)
                } else {
                    (Actor::Sapp(h), Caller::Sapp(h))
                };
                self.emit(now, actor, "release_peripheral", vec![("name", peripheral.clone())], true);
                let res = self.sm.release_peripheral(caller, peripheral);
                self.result_line("release_peripheral", res.map(|_| vec![]), true);
            }
            Action::Donate { base, size } => match PhysRange::new(*base, *size) {
                Ok(r) => self.donate(r),
                Err(e) => {
                    self.emit(
                        now,
                        Actor::Los,
                        "donate_memory",
                        vec![("base", hex_addr(*base)), ("size", hex_addr(*size))],
                        true,
                    );
                    self.result_line("donate_memory", Err(SmError::BadRange(e.to_string())), true);
                }
            },
        }
    }

    fn concede(&mut self, name: &str, h: Handle) {
        let now = self.now;
        let live = self.sm.sapp(h).is_some_and(|d| d.is_live());
        let held = live && self.sm.peripheral_holder(name).is_some();
        self.emit(
            now,
            Actor::Los,
            "concede_peripheral",
            vec![("name", name.to_string()), ("handle", h.to_string())],
            true,
        );
        let res = self.sm.concede_peripheral(name, h);
        if held {
            self.stats.double_concessions += 1;
            if matches!(res, Err(SmError::AlreadyConceded(_))) {
                self.stats.double_concessions_refused += 1;
            }
        }
        self.result_line("concede_peripheral", res.map(|_| vec![]), true);
    }

    fn create(&mut self, index: usize, nonce: Option<Nonce>) {
        let def = &self.sc.sapps[index];
        if self.sm.largest_free_range() < def.mem_size {
            if let Some(r) = plan_donation(&self.sm.los_memory(), def.mem_size) {
                self.donate(r);
            }
        }
        let nonce = nonce.unwrap_or_else(|| self.draw_nonce());
        let now = self.now;
        let peripherals = if def.peripherals.is_empty() {
            "-".to_string()
        } else {
            def.peripherals.join(",")
        };
        self.emit(
            now,
            Actor::Los,
            "create_sapp",
            vec![
                ("sapp", index.to_string()),
                ("mem", def.mem_size.to_string()),
                ("min", def.policy.min_runtime_ms.to_string()),
                ("window", def.policy.window_ms.to_string()),
                ("peripherals", peripherals),
            ],
            true,
        );
        let res = self
            .sm
            .create_sapp(&def.image, def.mem_size, def.policy, &def.peripherals, nonce, now);
        self.drain();
        match res {
            Ok((h, report)) => {
                self.stats.creates += 1;
                self.result_line("create_sapp", Ok(vec![("handle", h.to_string())]), true);
                self.emit(now, Actor::Sm, "report", report_fields(&report), false);
                let verified = self.verify(index, &report);
                self.reports.push(AttestRecord {
                    sapp: index,
                    report,
                    verified,
                });
                let desc = self.sm.sapp(h).expect("created sapp is registered");
                self.records.push(SappRecord {
                    index,
                    handle: h,
                    id: desc.id,
                    policy: desc.policy,
                    created_ms: now,
                    mem: desc.mem,
                    removed_ms: None,
                });
                self.los.created(index, h);
                for p in def.peripherals.clone() {
                    self.concede(&p, h);
                }
            }
            Err(e) => {
                self.result_line("create_sapp", Err(e), true);
            }
        }
    }

    /// The user's check of a report against what they installed.
    fn verify(&mut self, index: usize, report: &AttestationReport) -> bool {
        let def = &self.sc.sapps[index];
        let mut names = def.peripherals.clone();
        names.sort();
        names.dedup();
        let claims = ExpectedClaims::new(
            &def.image,
            &def.policy,
            &names,
            report.nonce,
            self.sm.boot_session(),
            def.mem_size,
        );
        let ok = verify_report(report, &claims, self.sm.device_secret());
        if !ok {
            self.violate(
                Invariant::Attestation,
                self.now,
                format!("report for sapp {index} did not verify"),
            );
        }
        ok
    }

    fn exec_call(&mut self, call: LosCall) {
        let now = self.now;
        let horizon = self.horizon.max(now + 1);
        match call {
            LosCall::Switch { handle, slice } => {
                let slice = slice.min(horizon - now).max(1);
                self.emit(
                    now,
                    Actor::Los,
                    "switch_to_sapp",
                    vec![("handle", handle.to_string()), ("slice", slice.to_string())],
                    true,
                );
                let behavior = self
                    .record(handle)
                    .map(|r| self.sc.sapps[r.index].behavior.clone())
                    .unwrap_or_default();
                let locked_before = self.sm.sanction_state() == SanctionState::Locked;
                let res = self.sm.switch_to_sapp(handle, slice, now, &behavior);
                self.drain();
                match res {
                    Ok(ret) => {
                        if locked_before {
                            self.violate(
                                Invariant::Escalation,
                                now,
                                "switch accepted while the device is locked".into(),
                            );
                        }
                        if ret.ran > slice {
                            self.violate(
                                Invariant::ClockMonotonicity,
                                now,
                                format!("ran {} exceeds slice {slice}", ret.ran),
                            );
                        }
                        self.stats.switches += 1;
                        if let Some(r) = self.record(handle) {
                            let w = r.policy.window_of(now);
                            let window_ms = r.policy.window_ms;
                            *self.grants.entry((handle, w)).or_insert(0) += ret.ran;
                            self.los.observe_return(handle, window_ms, now, ret);
                        }
                        self.now = now + ret.ran;
                        self.result_line(
                            "switch_to_sapp",
                            Ok(vec![
                                ("ran", ret.ran.to_string()),
                                ("reason", format!("{:?}", ret.reason)),
                            ]),
                            true,
                        );
                    }
                    Err(e) => {
                        if e == SmError::DeviceLocked {
                            self.stats.denied_after_lock += 1;
                        }
                        self.result_line("switch_to_sapp", Err(e), true);
                    }
                }
            }
            LosCall::Load { addr } => {
                let res = self.sm.domain_load(DomainId::Los, addr);
                let mut d = vec![("addr", hex_addr(addr))];
                result_fields(&mut d, &res, true);
                self.emit(now, Actor::Los, "load", d, true);
                if self.sapp_at(addr).is_some() {
                    self.stats.inspector_probes += 1;
                    if res.is_ok() {
                        self.stats.inspector_hits += 1;
                        self.violate(
                            Invariant::InspectorFutility,
                            now,
                            format!("LOS read sapp memory at {addr:#x}"),
                        );
                    }
                }
            }
            LosCall::Mmio { name, offset, op } => {
                let res = self.sm.domain_mmio(DomainId::Los, &name, offset, op);
                let (ev, mut d) = mmio_fields(&name, offset, op);
                result_fields(&mut d, &res, !matches!(op, MmioOp::Write(_)));
                self.emit(now, Actor::Los, ev, d, true);
                if self.sm.peripheral_holder(&name).is_some() {
                    self.stats.inspector_probes += 1;
                    if res.is_ok() {
                        self.stats.inspector_hits += 1;
                        self.violate(
                            Invariant::InspectorFutility,
                            now,
                            format!("LOS reached conceded peripheral {name}"),
                        );
                    }
                }
            }
            LosCall::Idle { until } => {
                let until = if until <= now { horizon } else { until.min(horizon) };
                loop {
                    let due = self.sm.last_check() + self.sc.check_interval_ms;
                    if due > until {
                        break;
                    }
                    self.now = due.max(self.now);
                    if self.sm.idle_trap(self.now).is_none() {
                        break;
                    }
                    self.drain();
                }
                self.now = until;
            }
            LosCall::Busy { until } => {
                self.now = if until <= now { horizon } else { until.min(horizon) };
            }
        }
    }

    fn drain(&mut self) {
        for ev in self.sm.drain_events() {
            match ev {
                SmEvent::SappAccess {
                    t,
                    handle,
                    op,
                    result,
                } => {
                    let (name, mut d) = op_fields(&op);
                    let read = !matches!(
                        op,
                        SappOp::Store { .. } | SappOp::Mmio { op: MmioOp::Write(_), .. }
                    );
                    result_fields(&mut d, &result, read);
                    self.emit(t, Actor::Sapp(handle), name, d, false);
                    let addr = match op {
                        SappOp::Load { addr } | SappOp::Store { addr, .. } => Some(addr),
                        SappOp::Mmio { .. } => None,
                    };
                    let own = self.record(handle).map(|r| r.mem);
                    if let Some(addr) = addr.filter(|a| !own.is_some_and(|m| m.contains(*a))) {
                        self.stats.sapp_probes += 1;
                        if result.is_ok() {
                            self.stats.sapp_probe_hits += 1;
                            self.violate(
                                Invariant::ProbeFutility,
                                t,
                                format!("sapp {handle} reached {addr:#x} outside its region"),
                            );
                        }
                    }
                }
                SmEvent::InspectionRevoked {
                    t,
                    handle,
                    before,
                    after,
                } => {
                    let name = |r: &Result<u8, HwError>| match r {
                        Ok(_) => "ok".to_string(),
                        Err(e) => e.name(),
                    };
                    self.emit(
                        t,
                        Actor::Sm,
                        "inspection_revoked",
                        vec![
                            ("handle", handle.to_string()),
                            ("before", name(&before)),
                            ("after", name(&after)),
                        ],
                        false,
                    );
                    if before.is_err() || after != Err(HwError::Fault(Fault::LockedAgainstSm)) {
                        self.violate(
                            Invariant::InspectionRevoked,
                            t,
                            format!("create of {handle}: before={before:?} after={after:?}"),
                        );
                    }
                }
                SmEvent::Check {
                    t,
                    due,
                    evaluated,
                    sanctions,
                } => {
                    self.stats.checks += 1;
                    self.stats.windows_judged +=
                        evaluated.iter().map(|(_, a, b)| b - a + 1).sum::<u64>();
                    let due_name = match due {
                        CheckDue::NotDue => "NotDue",
                        CheckDue::Due => "Due",
                        CheckDue::Overdue => "Overdue",
                    };
                    self.emit(
                        t,
                        Actor::Sm,
                        "periodic_policy_check",
                        vec![("due", due_name.into())],
                        true,
                    );
                    for s in &sanctions {
                        let ev = match s.kind {
                            SanctionKind::UserNotification => "user_notification",
                            SanctionKind::DeviceLock => "device_lock",
                        };
                        let line = self.emit(t, Actor::Sm, ev, cause_fields(&s.cause), true);
                        self.on_sanction(t, line, s.kind, s.cause);
                    }
                    self.emit(
                        t,
                        Actor::Sm,
                        "periodic_policy_check.ok",
                        vec![("sanctions", sanctions.len().to_string())],
                        true,
                    );
                }
                SmEvent::AttestationSignal { t, handle } => {
                    self.emit(
                        t,
                        Actor::Sm,
                        "attestation_signal",
                        vec![("handle", handle.to_string())],
                        false,
                    );
                }
                SmEvent::PeripheralOrphaned { t, name, handle } => {
                    self.emit(
                        t,
                        Actor::Sm,
                        "peripheral_orphaned",
                        vec![("name", name), ("handle", handle.to_string())],
                        true,
                    );
                }
            }
        }
    }

    fn on_sanction(&mut self, t: u64, line: usize, kind: SanctionKind, cause: SanctionCause) {
        if kind == SanctionKind::DeviceLock {
            self.stats.device_locked_at.get_or_insert(t);
            return;
        }
        self.stats.notices.push(Notice {
            t,
            line,
            kind,
            cause,
        });
        match cause {
            SanctionCause::MissedCheck { last_check } => {
                self.stats.missed_checks += 1;
                if t.saturating_sub(last_check) <= 2 * self.sc.check_interval_ms {
                    self.violate(
                        Invariant::NoFalsePositive,
                        t,
                        format!("missed check flagged after only {} ms", t - last_check),
                    );
                }
            }
            SanctionCause::PolicyViolation {
                handle,
                window,
                deficit,
            } => {
                self.notified.entry((handle, window)).or_insert(t);
                let Some(r) = self.record(handle) else {
                    self.violate(Invariant::NoFalsePositive, t, format!("unknown handle {handle}"));
                    return;
                };
                let granted = self.grants.get(&(handle, window)).copied().unwrap_or(0);
                let expected = r.policy.min_runtime_ms.saturating_sub(granted);
                let closed = r.policy.window_end(window) <= t;
                if expected == 0 || expected != deficit || !closed || !r.policy.active {
                    self.violate(
                        Invariant::NoFalsePositive,
                        t,
                        format!(
                            "{handle} window {window}: reported deficit {deficit}, granted {granted}"
                        ),
                    );
                }
            }
        }
    }

    fn check_invariants(&mut self) {
        let now = self.now;
        if now < self.prev_now {
            self.violate(
                Invariant::ClockMonotonicity,
                now,
                format!("time went from {} to {now}", self.prev_now),
            );
        }
        self.prev_now = now;

        let mask = self.sm.machine().locked_mask();
        if let Some(i) = (0..mask.len()).find(|&i| self.prev_locked[i] && !mask[i]) {
            self.violate(Invariant::LockMonotonicity, now, format!("entry {i} unlocked"));
        }
        self.prev_locked = mask;

        let mut bad = Vec::new();
        for r in &self.records {
            if self.sm.sm_probe(r.mem.base()).is_ok() {
                bad.push((Invariant::InspectionRevoked, format!("monitor can read {}", r.handle)));
            }
        }

        let machine = self.sm.machine();
        let mut domains = vec![DomainId::Los];
        domains.extend(self.records.iter().map(|r| r.id));
        for p in machine.device_tree().iter() {
            let expected = match self.sm.grants().get(&p.name) {
                Some(g) => self.record(g.holder).map_or(DomainId::Los, |r| r.id),
                None => DomainId::Los,
            };
            let pages: Vec<u64> = (0..p.mmio.size() / crate::hw::PAGE_SIZE)
                .map(|k| p.mmio.base() + k * crate::hw::PAGE_SIZE)
                .collect();
            let mut owners = Vec::new();
            for &d in &domains {
                let ctx = AccessContext::of(d);
                let ok = pages
                    .iter()
                    .filter(|&&a| machine.check_access(ctx, a, AccessKind::Read).is_ok())
                    .count();
                if ok > 0 {
                    owners.push((d, ok == pages.len()));
                }
            }
            if owners != [(expected, true)] {
                bad.push((
                    Invariant::PeripheralExclusivity,
                    format!("{}: accessible to {:?}, registry says {:?}", p.name, owners, expected),
                ));
            }
        }
        for (inv, detail) in bad {
            self.violate(inv, now, detail);
        }
    }

    /// Ledger and detection audits for every sapp of the ending session.
    fn close_session(&mut self, end: u64) {
        let interval = self.sc.check_interval_ms;
        let mut found = Vec::new();
        let mut detections = Vec::new();
        for r in &self.records {
            let ledger: BTreeMap<u64, u64> = self.sm.ledger().windows(r.handle).collect();
            let mine: BTreeMap<u64, u64> = self
                .grants
                .range((r.handle, 0)..=(r.handle, u64::MAX))
                .map(|((_, w), g)| (*w, *g))
                .collect();
            if ledger != mine {
                found.push((
                    Invariant::LedgerSoundness,
                    format!("{}: ledger {ledger:?} vs replay {mine:?}", r.handle),
                ));
            }
            if !r.policy.active || r.policy.min_runtime_ms == 0 {
                continue;
            }
            let limit = r.removed_ms.unwrap_or(end);
            let mut w = r.policy.first_full_window_from(r.created_ms);
            while r.policy.window_end(w) + interval <= limit {
                let granted = mine.get(&w).copied().unwrap_or(0);
                if granted < r.policy.min_runtime_ms {
                    let window_end = r.policy.window_end(w);
                    let deadline = window_end + interval;
                    let notified_at = self.notified.get(&(r.handle, w)).copied();
                    if notified_at.is_none_or(|t| t > deadline) {
                        found.push((
                            Invariant::DetectionBound,
                            format!(
                                "{} window {w} (closed {window_end}) short by {}; notified {:?}, deadline {deadline}",
                                r.handle,
                                r.policy.min_runtime_ms - granted,
                                notified_at
                            ),
                        ));
                    }
                    detections.push(Detection {
                        handle: r.handle,
                        window: w,
                        window_end,
                        deadline,
                        notified_at,
                    });
                }
                w += 1;
            }
        }
        self.stats.detections.extend(detections);
        for (inv, detail) in found {
            self.violate(inv, end, detail);
        }
    }
}

/// Runs a validated scenario to its horizon.
pub fn run(scenario: &Scenario) -> RunOutcome {
    Simulation::new(scenario)
        .expect("validated scenario boots")
        .run()
}

impl Scenario {
    /// Copy of the scenario that attests `sapp` right after it is first
    /// created and stops there. `None` if the script never creates it.
    pub fn until_first_attestation(&self, sapp: usize, nonce: Nonce) -> Option<Scenario> {
        let pos = self
            .script
            .iter()
            .position(|s| matches!(s.action, Action::Create { sapp: i, .. } if i == sapp))?;
        let mut sc = self.clone();
        let t = sc.script[pos].t_ms;
        sc.script.insert(
            pos + 1,
            super::scenario::ScriptStep {
                t_ms: t,
                action: Action::Attest {
                    sapp,
                    nonce: Some(nonce),
                },
            },
        );
        sc.until_ms = t;
        Some(sc)
    }

    pub fn is_no_check(&self) -> bool {
        self.strategy == LosStrategy::NoCheck
    }
}
