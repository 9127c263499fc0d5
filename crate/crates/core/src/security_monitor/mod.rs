//! The security monitor: the trusted state machine.
//!
//! It creates sapps in memory the LOS donated, locks their protection entry
//! and thereby loses access to them, enforces peripheral concessions against
//! the ROM device tree, books the runtime the LOS grants on every context
//! switch, runs the periodic policy check, and issues attestation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attestation::{self, AttestationReport, DeviceSecret, Measurement, Nonce};
use crate::domains::{ReturnReason, SappOp, SappWorkload};
use crate::hw::{
    AccessContext, DomainId, Fault, HwError, Machine, MmioOp, PhysRange, Perms, PAGE_SIZE,
};
use crate::policy::{self, CheckDue, PolicyError, RuntimeLedger, SchedulingPolicy, VerdictStatus};


pub const DEFAULT_CHECK_INTERVAL_MS: u64 = 100;
pub const DEFAULT_LOCK_THRESHOLD: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmError {
    #[error("free pool cannot hold the requested region")]
    InsufficientMemory,
    #[error("no free protection entry")]
    OutOfProtEntries,
    #[error("unknown peripheral `{0}`")]
    UnknownPeripheral(String),
    #[error("device is locked")]
    DeviceLocked,
    #[error("no such sapp")]
    NoSuchSapp,
    #[error("invalid state {0:?}")]
    InvalidState(SappState),
    #[error("peripheral `{0}` is already conceded")]
    AlreadyConceded(String),
    #[error("caller does not own the peripheral")]
    NotOwner,
    #[error("range is in use")]
    RangeInUse,
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("image of {image} bytes does not fit {mem} bytes")]
    ImageTooLarge { image: u64, mem: u64 },
    #[error("slice must be positive")]
    EmptySlice,
    #[error("monitor kept access to the sapp region after locking it")]
    InspectionNotRevoked,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Hw(#[from] HwError),
}

impl SmError {
    /// Stable name used in trace lines.
    pub fn name(&self) -> &'static str {
        match self {
            SmError::InsufficientMemory => "InsufficientMemory",
            SmError::OutOfProtEntries => "OutOfProtEntries",
            SmError::UnknownPeripheral(_) => "UnknownPeripheral",
            SmError::DeviceLocked => "DeviceLocked",
            SmError::NoSuchSapp => "NoSuchSapp",
            SmError::InvalidState(_) => "InvalidState",
            SmError::AlreadyConceded(_) => "AlreadyConceded",
            SmError::NotOwner => "NotOwner",
            SmError::RangeInUse => "RangeInUse",
            SmError::BadRange(_) => "BadRange",
            SmError::ImageTooLarge { .. } => "ImageTooLarge",
            SmError::EmptySlice => "EmptySlice",
            SmError::InspectionNotRevoked => "InspectionNotRevoked",
            SmError::Policy(_) => "InvalidPolicy",
            SmError::Hw(_) => "Hardware",
        }
    }
}

/// Opaque per-boot identifier the LOS sees for a sapp. Drawn from the seeded
/// generator, so it carries no function of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(pub u64);

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SappState {
    Created,
    Runnable,
    Running,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SappDescriptor {
    pub id: DomainId,
    pub handle: Handle,
    pub mem: PhysRange,
    pub image_digest: Measurement,
    pub policy: SchedulingPolicy,
    pub peripherals: BTreeSet<String>,
    pub state: SappState,
    pub prot_index: usize,
    pub created_ms: u64,
    /// First window not yet judged by a periodic check.
    pub next_window: u64,
}

impl SappDescriptor {
    pub fn is_live(&self) -> bool {
        self.state != SappState::Destroyed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmConfig {
    pub check_interval_ms: u64,
    pub lock_threshold: u32,
    pub seed: u64,
}

impl Default for SmConfig {
    fn default() -> Self {
        Self {
            check_interval_ms: DEFAULT_CHECK_INTERVAL_MS,
            lock_threshold: DEFAULT_LOCK_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SanctionState {
    Normal,
    Notified(u32),
    Locked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SanctionKind {
    UserNotification,
    DeviceLock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SanctionCause {
    PolicyViolation {
        handle: Handle,
        window: u64,
        deficit: u64,
    },
    /// No check ran for more than twice the interval.
    MissedCheck { last_check: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sanction {
    pub kind: SanctionKind,
    pub cause: SanctionCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControlReturn {
    pub ran: u64,
    pub reason: ReturnReason,
}

/// Who is asking the monitor to act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Caller {
    Los,
    Sapp(Handle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub holder: Handle,
    pub entry: usize,
    /// Holder was destroyed and no entry was left to hand the peripheral back.
    pub orphaned: bool,
}

/// Things that happened inside the monitor during an operation, drained by
/// the harness into the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmEvent {
    SappAccess {
        t: u64,
        handle: Handle,
        op: SappOp,
        result: Result<u8, HwError>,
    },
    InspectionRevoked {
        t: u64,
        handle: Handle,
        before: Result<u8, HwError>,
        after: Result<u8, HwError>,
    },
    Check {
        t: u64,
        due: CheckDue,
        evaluated: Vec<(Handle, u64, u64)>,
        sanctions: Vec<Sanction>,
    },
    AttestationSignal {
        t: u64,
        handle: Handle,
    },
    PeripheralOrphaned {
        t: u64,
        name: String,
        handle: Handle,
    },
}

/// Everything the LOS may learn about the sapps on the device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosView {
    pub sapps: Vec<LosSappView>,
    pub check_interval_ms: u64,
    pub next_check_ms: u64,
    pub device_locked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosSappView {
    pub handle: Handle,
    pub mem_size: u64,
    pub policy: SchedulingPolicy,
    pub peripherals: Vec<String>,
    pub runtime_ms: u64,
    pub created_ms: u64,
}

impl fmt::Display for LosView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "view interval={} next_check={} locked={}",
            self.check_interval_ms, self.next_check_ms, self.device_locked
        )?;
        for s in &self.sapps {
            let peripherals = if s.peripherals.is_empty() {
                "-".to_string()
            } else {
                s.peripherals.join(",")
            };
            writeln!(
                f,
                "sapp handle={} mem={} min={} window={} active={} peripherals={} runtime={} created={}",
                s.handle,
                s.mem_size,
                s.policy.min_runtime_ms,
                s.policy.window_ms,
                s.policy.active,
                peripherals,
                s.runtime_ms,
                s.created_ms
            )?;
        }
        Ok(())
    }
}

pub struct SecurityMonitor {
    machine: Machine,
    config: SmConfig,
    los_boot_memory: PhysRange,
    sapps: BTreeMap<Handle, SappDescriptor>,
    current: DomainId,
    ledger: RuntimeLedger,
    last_check: u64,
    violations: u32,
    locked: bool,
    device_secret: DeviceSecret,
    free_pool: Vec<PhysRange>,
    grants: BTreeMap<String, Grant>,
    rng: ChaCha8Rng,
    next_sapp_id: u32,
    events: Vec<SmEvent>,
}

fn sm_ctx() -> AccessContext {
    AccessContext::of(DomainId::Sm)
}

impl SecurityMonitor {
    /// Boots the monitor. The LOS receives `los_memory` and every peripheral
    /// in the device tree.
    pub fn boot(
        machine: Machine,
        config: SmConfig,
        los_memory: PhysRange,
        now: u64,
    ) -> Result<Self, SmError> {
        let mut secret = [0u8; 32];
        let mut key_rng = ChaCha8Rng::seed_from_u64(config.seed);
        key_rng.set_stream(u64::MAX);
        key_rng.fill_bytes(&mut secret);
        let mut sm = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            machine,
            config,
            los_boot_memory: los_memory,
            sapps: BTreeMap::new(),
            current: DomainId::Los,
            ledger: RuntimeLedger::new(),
            last_check: now,
            violations: 0,
            locked: false,
            device_secret: DeviceSecret(secret),
            free_pool: Vec::new(),
            grants: BTreeMap::new(),
            next_sapp_id: 1,
            events: Vec::new(),
        };
        sm.install_los(now)?;
        Ok(sm)
    }

    fn install_los(&mut self, now: u64) -> Result<(), SmError> {
        let n = self.machine.prot_entry_count();
        let peripherals: Vec<PhysRange> = self.machine.device_tree().iter().map(|p| p.mmio).collect();
        if n < peripherals.len() + 1 {
            return Err(SmError::OutOfProtEntries);
        }
        self.machine
            .set_entry(n - 1, self.los_boot_memory, Perms::RWX, DomainId::Los)?;
        for (k, mmio) in peripherals.into_iter().enumerate() {
            self.machine.set_entry(n - 2 - k, mmio, Perms::RW, DomainId::Los)?;
        }
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.rng.set_stream(self.machine.boot_session());
        self.sapps.clear();
        self.ledger = RuntimeLedger::new();
        self.grants.clear();
        self.free_pool.clear();
        self.current = DomainId::Los;
        self.last_check = now;
        self.violations = 0;
        self.locked = false;
        self.next_sapp_id = 1;
        Ok(())
    }

    /// Full system reset: clears every lock and all sapp state, then boots
    /// the LOS again in a new session.
    pub fn full_reset(&mut self, now: u64) -> Result<(), SmError> {
        self.machine.full_reset();
        self.install_los(now)
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Fault-injection hook passed through to the hardware.
    pub fn set_unlockable_entry(&mut self, index: Option<usize>) {
        self.machine.set_unlockable_entry(index);
    }

    pub fn config(&self) -> &SmConfig {
        &self.config
    }

    pub fn boot_session(&self) -> u64 {
        self.machine.boot_session()
    }

    pub fn current(&self) -> DomainId {
        self.current
    }

    pub fn ledger(&self) -> &RuntimeLedger {
        &self.ledger
    }

    pub fn last_check(&self) -> u64 {
        self.last_check
    }

    pub fn free_pool(&self) -> &[PhysRange] {
        &self.free_pool
    }

    pub fn grants(&self) -> &BTreeMap<String, Grant> {
        &self.grants
    }

    /// The user's verifier runs on the same device and shares the root key.
    pub fn device_secret(&self) -> &DeviceSecret {
        &self.device_secret
    }

    pub fn sapp(&self, handle: Handle) -> Option<&SappDescriptor> {
        self.sapps.get(&handle)
    }

    pub fn sapps(&self) -> impl Iterator<Item = &SappDescriptor> {
        self.sapps.values()
    }

    pub fn sanction_state(&self) -> SanctionState {
        match (self.locked, self.violations) {
            (true, _) => SanctionState::Locked,
            (false, 0) => SanctionState::Normal,
            (false, n) => SanctionState::Notified(n),
        }
    }

    pub fn drain_events(&mut self) -> Vec<SmEvent> {
        std::mem::take(&mut self.events)
    }

    /// LOS-owned RAM ranges, lowest address first.
    pub fn los_memory(&self) -> Vec<PhysRange> {
        let ram = self.machine.ram_range();
        let mut v: Vec<PhysRange> = self
            .machine
            .entries()
            .filter(|e| e.owner == DomainId::Los && !e.locked && ram.contains_range(&e.range))
            .map(|e| e.range)
            .collect();
        v.sort();
        v
    }

    fn fresh_handle(&mut self) -> Handle {
        loop {
            let h = Handle(self.rng.next_u64());
            if h.0 != 0 && !self.sapps.contains_key(&h) {
                return h;
            }
        }
    }

    fn live_sapp(&self, handle: Handle) -> Result<&SappDescriptor, SmError> {
        self.sapps
            .get(&handle)
            .filter(|d| d.is_live())
            .ok_or(SmError::NoSuchSapp)
    }

    fn merge_pool(&mut self) {
        self.free_pool.sort();
        let mut merged: Vec<PhysRange> = Vec::with_capacity(self.free_pool.len());
        for r in self.free_pool.drain(..) {
            match merged.last_mut() {
                Some(last) if last.end() == r.base() => {
                    *last = PhysRange::new(last.base(), last.size() + r.size())
                        .expect("adjacent page ranges merge");
                }
                _ => merged.push(r),
            }
        }
        self.free_pool = merged;
    }

    /// Moves an LOS-owned RAM range into the free pool and shrinks the LOS
    /// entry that covered it.
    pub fn donate_memory(&mut self, range: PhysRange) -> Result<(), SmError> {
        if !self.machine.ram_range().contains_range(&range) {
            return Err(SmError::BadRange(format!("{range} is not RAM")));
        }
        let in_pool = self.free_pool.iter().any(|r| r.overlaps(&range));
        let in_sapp = self.sapps.values().any(|d| d.mem.overlaps(&range));
        if in_pool || in_sapp {
            return Err(SmError::RangeInUse);
        }
        let entry = *self
            .machine
            .entries()
            .find(|e| e.owner == DomainId::Los && !e.locked && e.range.contains_range(&range))
            .ok_or(SmError::RangeInUse)?;
        let (lo, hi) = (entry.range.base(), entry.range.end());
        let lower = (range.base() > lo).then(|| PhysRange::new(lo, range.base() - lo));
        let upper = (range.end() < hi).then(|| PhysRange::new(range.end(), hi - range.end()));
        match (lower, upper) {
            (None, None) => self.machine.clear_entry(entry.index)?,
            (Some(part), None) | (None, Some(part)) => {
                self.machine
                    .set_entry(entry.index, part?, entry.perms, DomainId::Los)?
            }
            (Some(low), Some(high)) => {
                let spare = self
                    .machine
                    .highest_free_entry_below(self.machine.prot_entry_count())
                    .ok_or(SmError::OutOfProtEntries)?;
                self.machine
                    .set_entry(entry.index, low?, entry.perms, DomainId::Los)?;
                self.machine
                    .set_entry(spare, high?, entry.perms, DomainId::Los)?;
            }
        }
        self.free_pool.push(range);
        self.merge_pool();
        Ok(())
    }

    pub fn free_capacity(&self) -> u64 {
        self.free_pool.iter().map(PhysRange::size).sum()
    }

    pub fn largest_free_range(&self) -> u64 {
        self.free_pool.iter().map(PhysRange::size).max().unwrap_or(0)
    }

    fn carve(&mut self, size: u64) -> Option<PhysRange> {
        let i = self.free_pool.iter().position(|r| r.size() >= size)?;
        let r = self.free_pool[i];
        let region = PhysRange::new(r.base(), size).ok()?;
        if r.size() == size {
            self.free_pool.remove(i);
        } else {
            self.free_pool[i] = PhysRange::new(r.base() + size, r.size() - size).ok()?;
        }
        Some(region)
    }

    /// Creates a sapp: carve its region, copy the image in, bind and lock the
    /// protection entry, then confirm the monitor itself is locked out.
    pub fn create_sapp(
        &mut self,
        image: &[u8],
        mem_size: u64,
        policy: SchedulingPolicy,
        peripherals: &[String],
        nonce: Nonce,
        now: u64,
    ) -> Result<(Handle, AttestationReport), SmError> {
        if self.locked {
            return Err(SmError::DeviceLocked);
        }
        policy.validate()?;
        if let Some(bad) = peripherals
            .iter()
            .find(|n| self.machine.device_tree().get(n).is_none())
        {
            return Err(SmError::UnknownPeripheral(bad.clone()));
        }
        if mem_size == 0 || !mem_size.is_multiple_of(PAGE_SIZE) {
            return Err(SmError::BadRange(format!(
                "mem_size {mem_size} is not a positive multiple of {PAGE_SIZE}"
            )));
        }
        if image.len() as u64 > mem_size {
            return Err(SmError::ImageTooLarge {
                image: image.len() as u64,
                mem: mem_size,
            });
        }
        let index = self
            .machine
            .lowest_free_entry()
            .ok_or(SmError::OutOfProtEntries)?;
        let region = self.carve(mem_size).ok_or(SmError::InsufficientMemory)?;
        let id = DomainId::Sapp(self.next_sapp_id);
        self.next_sapp_id += 1;
        let handle = self.fresh_handle();

        self.machine.set_entry(index, region, Perms::RWX, id)?;
        self.machine
            .store_bytes(sm_ctx(), region.base(), &vec![0u8; mem_size as usize])?;
        self.machine.store_bytes(sm_ctx(), region.base(), image)?;
        let before = self.machine.load(sm_ctx(), region.base());
        self.machine.lock_entry(index)?;
        let after = self.machine.load(sm_ctx(), region.base());
        self.events.push(SmEvent::InspectionRevoked {
            t: now,
            handle,
            before: before.clone(),
            after: after.clone(),
        });

        let names: BTreeSet<String> = peripherals.iter().cloned().collect();
        let sorted: Vec<&String> = names.iter().collect();
        let digest = attestation::measure(image, &policy, &sorted);
        let revoked = before.is_ok() && after == Err(HwError::Fault(Fault::LockedAgainstSm));
        let desc = SappDescriptor {
            id,
            handle,
            mem: region,
            image_digest: digest,
            policy,
            peripherals: names,
            state: if revoked {
                SappState::Runnable
            } else {
                SappState::Created
            },
            prot_index: index,
            created_ms: now,
            next_window: policy.first_full_window_from(now),
        };
        self.ledger.register(handle, policy.window_ms);
        self.sapps.insert(handle, desc);
        if !revoked {
            return Err(SmError::InspectionNotRevoked);
        }
        let report = attestation::build_report(
            digest,
            nonce,
            self.boot_session(),
            mem_size,
            &self.device_secret,
        );
        Ok((handle, report))
    }

    /// Destroys a sapp. Its memory is wiped by hardware and stays locked for
    /// the rest of the session; its peripherals go back to the LOS.
    pub fn destroy_sapp(&mut self, handle: Handle, now: u64) -> Result<(), SmError> {
        let desc = self.sapps.get(&handle).ok_or(SmError::NoSuchSapp)?;
        if !matches!(desc.state, SappState::Runnable | SappState::Created) {
            return Err(SmError::InvalidState(desc.state));
        }
        let index = desc.prot_index;
        if self.machine.entry(index).is_some_and(|e| e.locked) {
            self.machine.wipe_locked(index)?;
        }
        if let Some(d) = self.sapps.get_mut(&handle) {
            d.state = SappState::Destroyed;
        }
        let held: Vec<String> = self
            .grants
            .iter()
            .filter(|(_, g)| g.holder == handle)
            .map(|(n, _)| n.clone())
            .collect();
        for name in held {
            if let Err(SmError::OutOfProtEntries) = self.revert_peripheral(&name) {
                if let Some(g) = self.grants.get_mut(&name) {
                    g.orphaned = true;
                }
                self.events.push(SmEvent::PeripheralOrphaned {
                    t: now,
                    name,
                    handle,
                });
            }
        }
        Ok(())
    }

    /// LOS hands exclusive control of a peripheral to a sapp. The covering
    /// entry is rebound to the sapp and locked.
    pub fn concede_peripheral(&mut self, name: &str, to: Handle) -> Result<(), SmError> {
        let mmio = self
            .machine
            .device_tree()
            .get(name)
            .ok_or_else(|| SmError::UnknownPeripheral(name.to_string()))?
            .mmio;
        let sapp_id = self.live_sapp(to)?.id;
        if self.grants.contains_key(name) {
            return Err(SmError::AlreadyConceded(name.to_string()));
        }
        let entry = self
            .machine
            .matching_entry(mmio.base())
            .filter(|e| e.owner == DomainId::Los && !e.locked && e.range == mmio)
            .map(|e| e.index)
            .ok_or_else(|| SmError::AlreadyConceded(name.to_string()))?;
        self.machine.set_entry(entry, mmio, Perms::RW, sapp_id)?;
        self.machine.lock_entry(entry)?;
        self.grants.insert(
            name.to_string(),
            Grant {
                holder: to,
                entry,
                orphaned: false,
            },
        );
        Ok(())
    }

    /// Only the holding sapp may give a peripheral back.
    pub fn release_peripheral(&mut self, caller: Caller, name: &str) -> Result<(), SmError> {
        if self.machine.device_tree().get(name).is_none() {
            return Err(SmError::UnknownPeripheral(name.to_string()));
        }
        let grant = self.grants.get(name).ok_or(SmError::NotOwner)?;
        match caller {
            Caller::Sapp(h) if h == grant.holder && !grant.orphaned => {}
            _ => return Err(SmError::NotOwner),
        }
        self.revert_peripheral(name)
    }

    // The conceded entry stays locked, so the LOS gets a fresh entry at a
    // lower index that takes priority for supervisor and user mode.
    fn revert_peripheral(&mut self, name: &str) -> Result<(), SmError> {
        let grant = *self.grants.get(name).ok_or(SmError::NotOwner)?;
        let mmio = self
            .machine
            .device_tree()
            .get(name)
            .ok_or_else(|| SmError::UnknownPeripheral(name.to_string()))?
            .mmio;
        let index = self
            .machine
            .highest_free_entry_below(grant.entry)
            .ok_or(SmError::OutOfProtEntries)?;
        self.machine.set_entry(index, mmio, Perms::RW, DomainId::Los)?;
        self.grants.remove(name);
        Ok(())
    }

    /// The sapp holding `name`, if any.
    pub fn peripheral_holder(&self, name: &str) -> Option<Handle> {
        self.grants.get(name).map(|g| g.holder)
    }

    /// Runs a sapp for at most `slice` ms, books what it actually ran, and
    /// runs the periodic check before returning to the LOS when one is due.
    pub fn switch_to_sapp(
        &mut self,
        handle: Handle,
        slice: u64,
        now: u64,
        workload: &dyn SappWorkload,
    ) -> Result<ControlReturn, SmError> {
        if self.locked {
            return Err(SmError::DeviceLocked);
        }
        let desc = self.sapps.get(&handle).ok_or(SmError::NoSuchSapp)?;
        if desc.state != SappState::Runnable {
            return Err(SmError::InvalidState(desc.state));
        }
        if slice == 0 {
            return Err(SmError::EmptySlice);
        }
        let id = desc.id;
        self.set_state(handle, SappState::Running);
        self.current = id;

        let step = workload.step(now, slice);
        let (ran, reason) = if step.ran >= slice {
            (slice, if step.ran == slice { step.reason } else { ReturnReason::SliceExpired })
        } else {
            (step.ran, step.reason)
        };
        let ctx = AccessContext::of(id);
        for timed in step.ops.into_iter().filter(|o| o.at < ran.max(1)) {
            let result = match &timed.op {
                SappOp::Load { addr } => self.machine.load(ctx, *addr),
                SappOp::Store { addr, value } => {
                    self.machine.store(ctx, *addr, *value).map(|_| *value)
                }
                SappOp::Mmio { name, offset, op } => {
                    self.machine.mmio_access(ctx, name, *offset, *op)
                }
            };
            self.events.push(SmEvent::SappAccess {
                t: now + timed.at,
                handle,
                op: timed.op,
                result,
            });
        }

        self.ledger.credit(handle, now, ran);
        self.set_state(handle, SappState::Runnable);
        self.current = DomainId::Los;
        let end = now + ran;
        if policy::check_due(self.last_check, end, self.config.check_interval_ms) != CheckDue::NotDue
        {
            self.periodic_policy_check(end);
        }
        Ok(ControlReturn { ran, reason })
    }

    fn set_state(&mut self, handle: Handle, state: SappState) {
        if let Some(d) = self.sapps.get_mut(&handle) {
            d.state = state;
        }
    }

    /// Entry from an LOS idle trap: run the periodic check if one is due.
    pub fn idle_trap(&mut self, now: u64) -> Option<Vec<Sanction>> {
        (policy::check_due(self.last_check, now, self.config.check_interval_ms) != CheckDue::NotDue)
            .then(|| self.periodic_policy_check(now))
    }

    /// Judges every live sapp's fully elapsed, not yet judged windows and
    /// applies sanctions.
    pub fn periodic_policy_check(&mut self, now: u64) -> Vec<Sanction> {
        let due = policy::check_due(self.last_check, now, self.config.check_interval_ms);
        let mut causes = Vec::new();
        if due == CheckDue::Overdue {
            causes.push(SanctionCause::MissedCheck {
                last_check: self.last_check,
            });
        }
        let mut evaluated = Vec::new();
        for desc in self.sapps.values_mut().filter(|d| d.is_live()) {
            let closed = desc.policy.window_of(now);
            if !desc.policy.active || desc.next_window >= closed {
                continue;
            }
            let verdicts =
                policy::evaluate(&self.ledger, desc.handle, &desc.policy, desc.next_window..=closed - 1);
            evaluated.push((desc.handle, desc.next_window, closed - 1));
            desc.next_window = closed;
            for v in verdicts {
                if let VerdictStatus::Violation { deficit } = v.status {
                    causes.push(SanctionCause::PolicyViolation {
                        handle: desc.handle,
                        window: v.window_index,
                        deficit,
                    });
                }
            }
        }
        let mut sanctions = Vec::with_capacity(causes.len());
        for cause in causes {
            sanctions.push(Sanction {
                kind: SanctionKind::UserNotification,
                cause,
            });
            self.violations += 1;
            if !self.locked && self.violations >= self.config.lock_threshold {
                self.locked = true;
                sanctions.push(Sanction {
                    kind: SanctionKind::DeviceLock,
                    cause,
                });
            }
        }
        self.last_check = now;
        self.events.push(SmEvent::Check {
            t: now,
            due,
            evaluated,
            sanctions: sanctions.clone(),
        });
        sanctions
    }

    pub fn attest_sapp(
        &mut self,
        handle: Handle,
        nonce: Nonce,
        now: u64,
    ) -> Result<AttestationReport, SmError> {
        let desc = self.live_sapp(handle)?;
        let report = attestation::build_report(
            desc.image_digest,
            nonce,
            self.boot_session(),
            desc.mem.size(),
            &self.device_secret,
        );
        self.events.push(SmEvent::AttestationSignal { t: now, handle });
        Ok(report)
    }

    pub fn los_observable_view(&self) -> LosView {
        let sapps = self
            .sapps
            .values()
            .filter(|d| d.is_live())
            .map(|d| LosSappView {
                handle: d.handle,
                mem_size: d.mem.size(),
                policy: d.policy,
                peripherals: self
                    .grants
                    .iter()
                    .filter(|(_, g)| g.holder == d.handle)
                    .map(|(n, _)| n.clone())
                    .collect(),
                runtime_ms: self.ledger.total(d.handle),
                created_ms: d.created_ms,
            })
            .collect();
        LosView {
            sapps,
            check_interval_ms: self.config.check_interval_ms,
            next_check_ms: self.last_check + self.config.check_interval_ms,
            device_locked: self.locked,
        }
    }

    /// Data access by the LOS or a sapp. The monitor's own accesses never
    /// go through here.
    pub fn domain_load(&self, actor: DomainId, addr: u64) -> Result<u8, HwError> {
        if actor == DomainId::Sm {
            return Err(HwError::ModeMismatch);
        }
        self.machine.load(AccessContext::of(actor), addr)
    }

    pub fn domain_store(&mut self, actor: DomainId, addr: u64, value: u8) -> Result<(), HwError> {
        if actor == DomainId::Sm {
            return Err(HwError::ModeMismatch);
        }
        self.machine.store(AccessContext::of(actor), addr, value)
    }

    pub fn domain_mmio(
        &mut self,
        actor: DomainId,
        name: &str,
        offset: u64,
        op: MmioOp,
    ) -> Result<u8, HwError> {
        if actor == DomainId::Sm {
            return Err(HwError::ModeMismatch);
        }
        self.machine
            .mmio_access(AccessContext::of(actor), name, offset, op)
    }

    /// Attempted monitor read, used to demonstrate what it can still see.
    pub fn sm_probe(&self, addr: u64) -> Result<u8, HwError> {
        self.machine.load(sm_ctx(), addr)
    }
}
