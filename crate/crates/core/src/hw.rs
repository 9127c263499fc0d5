//! Simulated single-hart machine.
//!
//! Physical memory, privilege modes, a ROM device tree with MMIO peripherals,
//! and a bank of domain-bound, lockable protection entries. The entries follow
//! RISC-V PMP in spirit (lowest index wins, sticky lock bit cleared only by a
//! full reset) but carry an explicit owning domain, and a locked entry always
//! denies machine-mode data access.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Protection granularity.
pub const PAGE_SIZE: u64 = 4096;

/// Base of physical RAM.
pub const RAM_BASE: u64 = 0x8000_0000;

/// Entry count when a scenario does not say otherwise.
pub const DEFAULT_PROT_ENTRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HwError {
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("protection entry index {0} out of range")]
    BadIndex(usize),
    #[error("protection entry {0} is locked")]
    EntryLocked(usize),
    #[error("bad state: {0}")]
    BadState(String),
    #[error("unknown peripheral `{0}`")]
    UnknownPeripheral(String),
    #[error("offset {offset:#x} out of range for peripheral `{name}`")]
    OffsetOutOfRange { name: String, offset: u64 },
    #[error("access fault: {0}")]
    Fault(#[from] Fault),
    #[error("address {0:#x} is not backed by RAM or MMIO")]
    Unmapped(u64),
    #[error("privilege mode does not match the acting domain")]
    ModeMismatch,
}

impl HwError {
    /// Short name used in trace lines.
    pub fn name(&self) -> String {
        match self {
            HwError::Fault(f) => f.to_string(),
            HwError::BadRange(_) => "BadRange".into(),
            HwError::BadIndex(_) => "BadIndex".into(),
            HwError::EntryLocked(_) => "EntryLocked".into(),
            HwError::BadState(_) => "BadState".into(),
            HwError::UnknownPeripheral(_) => "UnknownPeripheral".into(),
            HwError::OffsetOutOfRange { .. } => "OffsetOutOfRange".into(),
            HwError::Unmapped(_) => "Unmapped".into(),
            HwError::ModeMismatch => "ModeMismatch".into(),
        }
    }
}

/// Reason an access was denied. Each variant names the first rule that denied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum Fault {
    #[error("NoEntry")]
    NoEntry,
    #[error("PermDenied")]
    PermDenied,
    #[error("NotOwner")]
    NotOwner,
    #[error("LockedAgainstSM")]
    LockedAgainstSm,
}

/// A page-aligned physical address range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhysRange {
    base: u64,
    size: u64,
}

impl PhysRange {
    pub fn new(base: u64, size: u64) -> Result<Self, HwError> {
        if size == 0 {
            return Err(HwError::BadRange("size must be non-zero".into()));
        }
        if !base.is_multiple_of(PAGE_SIZE) || !size.is_multiple_of(PAGE_SIZE) {
            return Err(HwError::BadRange(format!(
                "base {base:#x} and size {size:#x} must be multiples of {PAGE_SIZE:#x}"
            )));
        }
        if base.checked_add(size).is_none() {
            return Err(HwError::BadRange(format!(
                "base {base:#x} + size {size:#x} overflows"
            )));
        }
        Ok(Self { base, size })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Exclusive end address.
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn contains_range(&self, other: &PhysRange) -> bool {
        other.base >= self.base && other.end() <= self.end()
    }

    pub fn overlaps(&self, other: &PhysRange) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

impl fmt::Display for PhysRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}+{:#x}", self.base, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const NONE: Perms = Perms::new(false, false, false);
    pub const R: Perms = Perms::new(true, false, false);
    pub const RW: Perms = Perms::new(true, true, false);
    pub const RX: Perms = Perms::new(true, false, true);
    pub const RWX: Perms = Perms::new(true, true, true);

    pub const fn new(read: bool, write: bool, execute: bool) -> Self {
        Self {
            read,
            write,
            execute,
        }
    }

    pub fn allows(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Execute => self.execute,
        }
    }

    /// All eight flag combinations.
    pub fn all() -> impl Iterator<Item = Perms> {
        (0u8..8).map(|b| Perms::new(b & 1 != 0, b & 2 != 0, b & 4 != 0))
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on: bool, c: char| if on { c } else { '-' };
        write!(
            f,
            "{}{}{}",
            flag(self.read, 'r'),
            flag(self.write, 'w'),
            flag(self.execute, 'x')
        )
    }
}

/// An isolation domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainId {
    Sm,
    Los,
    /// Sapp ids are positive and unique within one boot session.
    Sapp(u32),
}

impl DomainId {
    /// The privilege mode this domain executes in.
    pub fn mode(self) -> Mode {
        match self {
            DomainId::Sm => Mode::Machine,
            DomainId::Los => Mode::Supervisor,
            DomainId::Sapp(_) => Mode::User,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::Sm => f.write_str("SM"),
            DomainId::Los => f.write_str("LOS"),
            DomainId::Sapp(id) => write!(f, "Sapp({id})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Machine,
    Supervisor,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessContext {
    actor: DomainId,
    mode: Mode,
}

impl AccessContext {
    pub fn new(actor: DomainId, mode: Mode) -> Result<Self, HwError> {
        if actor.mode() != mode {
            return Err(HwError::ModeMismatch);
        }
        Ok(Self { actor, mode })
    }

    /// Context for `actor` in the only mode it may run in.
    pub fn of(actor: DomainId) -> Self {
        Self {
            actor,
            mode: actor.mode(),
        }
    }

    pub fn actor(&self) -> DomainId {
        self.actor
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl AccessKind {
    pub const ALL: [AccessKind; 3] = [AccessKind::Read, AccessKind::Write, AccessKind::Execute];
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "exec",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProtEntry {
    pub index: usize,
    pub range: PhysRange,
    pub perms: Perms,
    pub owner: DomainId,
    pub locked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Peripheral {
    pub name: String,
    pub version: String,
    pub mmio: PhysRange,
}

/// ROM description of the SoC's peripherals. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceTree {
    peripherals: Vec<Peripheral>,
}

impl DeviceTree {
    pub fn new(peripherals: Vec<Peripheral>) -> Result<Self, HwError> {
        for (i, a) in peripherals.iter().enumerate() {
            for b in &peripherals[i + 1..] {
                if a.name == b.name {
                    return Err(HwError::BadRange(format!(
                        "duplicate peripheral name `{}`",
                        a.name
                    )));
                }
                if a.mmio.overlaps(&b.mmio) {
                    return Err(HwError::BadRange(format!(
                        "MMIO windows of `{}` and `{}` overlap",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(Self { peripherals })
    }

    pub fn get(&self, name: &str) -> Option<&Peripheral> {
        self.peripherals.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Peripheral> {
        self.peripherals.iter()
    }

    pub fn len(&self) -> usize {
        self.peripherals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peripherals.is_empty()
    }

    /// The peripheral whose MMIO window contains `addr`.
    pub fn at(&self, addr: u64) -> Option<&Peripheral> {
        self.peripherals.iter().find(|p| p.mmio.contains(addr))
    }
}

/// MMIO operation issued against a peripheral register file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmioOp {
    Read,
    Write(u8),
    Execute,
}

impl MmioOp {
    pub fn kind(self) -> AccessKind {
        match self {
            MmioOp::Read => AccessKind::Read,
            MmioOp::Write(_) => AccessKind::Write,
            MmioOp::Execute => AccessKind::Execute,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    ram: Vec<u8>,
    entries: Vec<Option<ProtEntry>>,
    wiped: Vec<bool>,
    device_tree: Arc<DeviceTree>,
    registers: BTreeMap<String, Vec<u8>>,
    boot_session: u64,
    // Fault-injection hook: this entry ignores lock and owner for supervisor mode.
    unlockable_entry: Option<usize>,
}

impl Machine {
    pub fn new(
        ram_size: u64,
        prot_entries: usize,
        device_tree: DeviceTree,
    ) -> Result<Self, HwError> {
        let ram = PhysRange::new(RAM_BASE, ram_size)?;
        if prot_entries == 0 {
            return Err(HwError::BadState("at least one protection entry".into()));
        }
        if let Some(p) = device_tree.iter().find(|p| p.mmio.overlaps(&ram)) {
            return Err(HwError::BadRange(format!(
                "MMIO window of `{}` overlaps RAM",
                p.name
            )));
        }
        let registers = device_tree
            .iter()
            .map(|p| (p.name.clone(), vec![0u8; p.mmio.size() as usize]))
            .collect();
        Ok(Self {
            ram: vec![0u8; ram_size as usize],
            entries: vec![None; prot_entries],
            wiped: vec![false; prot_entries],
            device_tree: Arc::new(device_tree),
            registers,
            boot_session: 0,
            unlockable_entry: None,
        })
    }

    pub fn ram_range(&self) -> PhysRange {
        PhysRange {
            base: RAM_BASE,
            size: self.ram.len() as u64,
        }
    }

    pub fn prot_entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn boot_session(&self) -> u64 {
        self.boot_session
    }

    pub fn device_tree(&self) -> &DeviceTree {
        &self.device_tree
    }

    pub fn entry(&self, index: usize) -> Option<&ProtEntry> {
        self.entries.get(index).and_then(Option::as_ref)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ProtEntry> {
        self.entries.iter().flatten()
    }

    pub fn locked_mask(&self) -> Vec<bool> {
        self.entries
            .iter()
            .map(|e| e.is_some_and(|e| e.locked))
            .collect()
    }

    /// Which entries have used their one-shot wipe this session.
    pub fn wiped_mask(&self) -> &[bool] {
        &self.wiped
    }

    /// Lowest unconfigured index.
    pub fn lowest_free_entry(&self) -> Option<usize> {
        self.entries.iter().position(Option::is_none)
    }

    /// Highest unconfigured index strictly below `limit`.
    pub fn highest_free_entry_below(&self, limit: usize) -> Option<usize> {
        (0..limit.min(self.entries.len()))
            .rev()
            .find(|&i| self.entries[i].is_none())
    }

    /// Lowest-index entry whose range contains `addr`.
    pub fn matching_entry(&self, addr: u64) -> Option<&ProtEntry> {
        self.entries().find(|e| e.range.contains(addr))
    }

    /// Access decision for one address. Side-effect free.
    pub fn check_access(
        &self,
        ctx: AccessContext,
        addr: u64,
        kind: AccessKind,
    ) -> Result<(), Fault> {
        let matching = self.matching_entry(addr);
        match ctx.mode {
            Mode::Machine => {
                if kind == AccessKind::Execute {
                    return Ok(());
                }
                // Any covering locked entry denies, so an unlocked entry at a
                // lower index cannot shadow a lock back open.
                if self
                    .entries()
                    .any(|e| e.locked && e.range.contains(addr))
                {
                    return Err(Fault::LockedAgainstSm);
                }
                Ok(())
            }
            Mode::Supervisor | Mode::User => {
                let entry = matching.ok_or(Fault::NoEntry)?;
                let leaky =
                    ctx.mode == Mode::Supervisor && self.unlockable_entry == Some(entry.index);
                if leaky {
                    return Ok(());
                }
                if !entry.perms.allows(kind) {
                    return Err(Fault::PermDenied);
                }
                if entry.owner != ctx.actor {
                    return Err(Fault::NotOwner);
                }
                Ok(())
            }
        }
    }

    fn validate_target(&self, range: &PhysRange) -> Result<(), HwError> {
        let in_ram = self.ram_range().contains_range(range);
        let in_mmio = self.device_tree.iter().any(|p| p.mmio.contains_range(range));
        if in_ram || in_mmio {
            Ok(())
        } else {
            Err(HwError::BadRange(format!(
                "{range} lies outside RAM and every MMIO window"
            )))
        }
    }

    fn slot(&self, index: usize) -> Result<Option<&ProtEntry>, HwError> {
        self.entries
            .get(index)
            .map(Option::as_ref)
            .ok_or(HwError::BadIndex(index))
    }

    pub fn set_entry(
        &mut self,
        index: usize,
        range: PhysRange,
        perms: Perms,
        owner: DomainId,
    ) -> Result<(), HwError> {
        if self.slot(index)?.is_some_and(|e| e.locked) {
            return Err(HwError::EntryLocked(index));
        }
        self.validate_target(&range)?;
        self.entries[index] = Some(ProtEntry {
            index,
            range,
            perms,
            owner,
            locked: false,
        });
        Ok(())
    }

    /// Turns an unlocked entry off.
    pub fn clear_entry(&mut self, index: usize) -> Result<(), HwError> {
        if self.slot(index)?.is_some_and(|e| e.locked) {
            return Err(HwError::EntryLocked(index));
        }
        self.entries[index] = None;
        Ok(())
    }

    /// Sets the sticky lock bit. Idempotent.
    pub fn lock_entry(&mut self, index: usize) -> Result<(), HwError> {
        match self.slot(index)? {
            None => Err(HwError::BadState(format!(
                "cannot lock unconfigured entry {index}"
            ))),
            Some(_) => {
                if let Some(e) = self.entries[index].as_mut() {
                    e.locked = true;
                }
                Ok(())
            }
        }
    }

    /// Clears every entry and lock, zeroes RAM and device registers, and
    /// starts a new boot session. The device tree survives.
    pub fn full_reset(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
        self.wiped.iter_mut().for_each(|w| *w = false);
        self.ram.iter_mut().for_each(|b| *b = 0);
        for regs in self.registers.values_mut() {
            regs.iter_mut().for_each(|b| *b = 0);
        }
        self.boot_session += 1;
    }

    /// One-shot zeroization of a locked entry's range, performed by the
    /// memory controller so no domain reads or writes the contents.
    pub fn wipe_locked(&mut self, index: usize) -> Result<(), HwError> {
        let entry = *self
            .slot(index)?
            .ok_or_else(|| HwError::BadState(format!("entry {index} is unconfigured")))?;
        if !entry.locked {
            return Err(HwError::BadState(format!("entry {index} is not locked")));
        }
        if self.wiped[index] {
            return Err(HwError::BadState(format!("entry {index} already wiped")));
        }
        let ram = self.ram_range();
        if ram.contains_range(&entry.range) {
            let start = (entry.range.base() - ram.base()) as usize;
            self.ram[start..start + entry.range.size() as usize]
                .iter_mut()
                .for_each(|b| *b = 0);
        } else if let Some(p) = self.device_tree.at(entry.range.base()) {
            let name = p.name.clone();
            if let Some(regs) = self.registers.get_mut(&name) {
                regs.iter_mut().for_each(|b| *b = 0);
            }
        }
        self.wiped[index] = true;
        Ok(())
    }

    fn ram_offset(&self, addr: u64) -> Option<usize> {
        self.ram_range()
            .contains(addr)
            .then(|| (addr - RAM_BASE) as usize)
    }

    /// Byte load through the protection unit.
    pub fn load(&self, ctx: AccessContext, addr: u64) -> Result<u8, HwError> {
        self.check_access(ctx, addr, AccessKind::Read)?;
        if let Some(off) = self.ram_offset(addr) {
            return Ok(self.ram[off]);
        }
        if let Some(p) = self.device_tree.at(addr) {
            return Ok(self.registers[&p.name][(addr - p.mmio.base()) as usize]);
        }
        Err(HwError::Unmapped(addr))
    }

    /// Byte store through the protection unit.
    pub fn store(&mut self, ctx: AccessContext, addr: u64, value: u8) -> Result<(), HwError> {
        self.check_access(ctx, addr, AccessKind::Write)?;
        if let Some(off) = self.ram_offset(addr) {
            self.ram[off] = value;
            return Ok(());
        }
        if let Some(p) = self.device_tree.at(addr) {
            let off = (addr - p.mmio.base()) as usize;
            let name = p.name.clone();
            if let Some(regs) = self.registers.get_mut(&name) {
                regs[off] = value;
            }
            return Ok(());
        }
        Err(HwError::Unmapped(addr))
    }

    /// Writes `bytes` into RAM starting at `addr`, checking each touched page
    /// once. Nothing is written unless every page is writable.
    pub fn store_bytes(
        &mut self,
        ctx: AccessContext,
        addr: u64,
        bytes: &[u8],
    ) -> Result<(), HwError> {
        if bytes.is_empty() {
            return Ok(());
        }
        let end = addr
            .checked_add(bytes.len() as u64)
            .ok_or(HwError::Unmapped(addr))?;
        let ram = self.ram_range();
        if !ram.contains(addr) || end > ram.end() {
            return Err(HwError::Unmapped(addr));
        }
        let mut page = addr - addr % PAGE_SIZE;
        while page < end {
            self.check_access(ctx, page.max(addr), AccessKind::Write)?;
            page += PAGE_SIZE;
        }
        let off = (addr - RAM_BASE) as usize;
        self.ram[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Register access by peripheral name. Returns the value read, or the
    /// value written for stores.
    pub fn mmio_access(
        &mut self,
        ctx: AccessContext,
        name: &str,
        offset: u64,
        op: MmioOp,
    ) -> Result<u8, HwError> {
        let mmio = self
            .device_tree
            .get(name)
            .ok_or_else(|| HwError::UnknownPeripheral(name.to_string()))?
            .mmio;
        if offset >= mmio.size() {
            return Err(HwError::OffsetOutOfRange {
                name: name.to_string(),
                offset,
            });
        }
        let addr = mmio.base() + offset;
        self.check_access(ctx, addr, op.kind())?;
        let regs = self
            .registers
            .get_mut(name)
            .expect("register file exists for every device-tree peripheral");
        match op {
            MmioOp::Read | MmioOp::Execute => Ok(regs[offset as usize]),
            MmioOp::Write(v) => {
                regs[offset as usize] = v;
                Ok(v)
            }
        }
    }

    /// Test hook: make `index` leak through to supervisor mode regardless of
    /// its lock and owner.
    pub fn set_unlockable_entry(&mut self, index: Option<usize>) {
        self.unlockable_entry = index;
    }

    pub fn unlockable_entry(&self) -> Option<usize> {
        self.unlockable_entry
    }
}
