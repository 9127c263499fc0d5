//! Scenario files: strict JSON, validated before anything runs.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::attestation::Nonce;
use crate::domains::{LosStrategy, SappBehavior};
use crate::hw::{
    DeviceTree, Machine, Peripheral, PhysRange, DEFAULT_PROT_ENTRIES, PAGE_SIZE, RAM_BASE,
};
use crate::policy::SchedulingPolicy;
use crate::security_monitor::{SmConfig, DEFAULT_CHECK_INTERVAL_MS, DEFAULT_LOCK_THRESHOLD};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("infeasible policies: total demand {numerator}/{denominator} exceeds 1")]
    InfeasiblePolicies { numerator: u128, denominator: u128 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn default_prot_entries() -> usize {
    DEFAULT_PROT_ENTRIES
}

fn default_strategy() -> String {
    "cooperative".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeripheralSpec {
    pub name: String,
    pub version: String,
    pub mmio_base: u64,
    pub mmio_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigSpec {
    pub check_interval_ms: u64,
    pub lock_threshold: u32,
}

impl Default for ConfigSpec {
    fn default() -> Self {
        Self {
            check_interval_ms: DEFAULT_CHECK_INTERVAL_MS,
            lock_threshold: DEFAULT_LOCK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub base: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LosSpec {
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub initial_memory: Option<RangeSpec>,
}

impl Default for LosSpec {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            params: serde_json::Value::Null,
            initial_memory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SappSpec {
    pub image_hex: String,
    pub mem_size: u64,
    pub policy: SchedulingPolicy,
    #[serde(default)]
    pub peripherals: Vec<String>,
    #[serde(default)]
    pub behavior: SappBehavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Create,
    Destroy,
    Attest,
    Reset,
    Concede,
    Release,
    Donate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallerSpec {
    Los,
    Sapp,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub t_ms: u64,
    pub action: ActionKind,
    #[serde(default)]
    pub sapp: Option<usize>,
    #[serde(default)]
    pub peripheral: Option<String>,
    #[serde(default)]
    pub nonce: Option<String>,
    #[serde(default)]
    pub base: Option<u64>,
    #[serde(default)]
    pub size: Option<u64>,
    #[serde(default)]
    pub caller: Option<CallerSpec>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    /// Protection entry whose lock and owner binding supervisor mode ignores.
    #[serde(default)]
    pub unlockable_entry: Option<usize>,
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub ram_size: u64,
    #[serde(default = "default_prot_entries")]
    pub prot_entries: usize,
    #[serde(default)]
    pub device_tree: Vec<PeripheralSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: ConfigSpec,
    #[serde(default)]
    pub los: LosSpec,
    #[serde(default)]
    pub sapps: Vec<SappSpec>,
    #[serde(default)]
    pub script: Option<Vec<ScriptEntry>>,
    pub until_ms: u64,
    #[serde(default)]
    pub fault_injection: Option<FaultInjection>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SappDef {
    pub image: Vec<u8>,
    pub mem_size: u64,
    pub policy: SchedulingPolicy,
    pub peripherals: Vec<String>,
    pub behavior: SappBehavior,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Create { sapp: usize, nonce: Option<Nonce> },
    Destroy { sapp: usize },
    Attest { sapp: usize, nonce: Option<Nonce> },
    Reset,
    Concede { sapp: usize, peripheral: String },
    Release { sapp: usize, peripheral: String, by_los: bool },
    Donate { base: u64, size: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptStep {
    pub t_ms: u64,
    pub action: Action,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ram_size: u64,
    pub prot_entries: usize,
    pub device_tree: DeviceTree,
    pub seed: u64,
    pub check_interval_ms: u64,
    pub lock_threshold: u32,
    pub strategy: LosStrategy,
    pub initial_memory: PhysRange,
    pub sapps: Vec<SappDef>,
    /// Sorted by time; equal times keep file order.
    pub script: Vec<ScriptStep>,
    pub until_ms: u64,
    pub unlockable_entry: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StarverParams {
    targets: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectiveDosParams {
    target: usize,
    duty: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InspectorParams {
    #[serde(default)]
    probes: Vec<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheaterParams {
    fraction: f64,
}

fn params<T: serde::de::DeserializeOwned>(strategy: &str, v: &serde_json::Value) -> Result<T, ScenarioError> {
    let v = if v.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        v.clone()
    };
    serde_json::from_value(v)
        .map_err(|e| ScenarioError::SchemaViolation(format!("los.params for {strategy}: {e}")))
}

fn parse_strategy(spec: &LosSpec) -> Result<LosStrategy, ScenarioError> {
    let name = spec.strategy.as_str();
    let p = &spec.params;
    let s = match name {
        "cooperative" => {
            params::<NoParams>(name, p)?;
            LosStrategy::Cooperative
        }
        "no_check" => {
            params::<NoParams>(name, p)?;
            LosStrategy::NoCheck
        }
        "starver" => LosStrategy::Starver {
            targets: params::<StarverParams>(name, p)?.targets,
        },
        "selective_dos" => {
            let q: SelectiveDosParams = params(name, p)?;
            LosStrategy::SelectiveDos {
                target: q.target,
                duty: q.duty,
            }
        }
        "inspector" => LosStrategy::Inspector {
            probes: params::<InspectorParams>(name, p)?.probes,
        },
        "policy_cheater" => LosStrategy::PolicyCheater {
            fraction: params::<CheaterParams>(name, p)?.fraction,
        },
        other => {
            return Err(ScenarioError::SchemaViolation(format!(
                "unknown los strategy `{other}`"
            )))
        }
    };
    s.validate()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok(s)
}

pub fn parse_nonce(hex_str: &str) -> Result<Nonce, String> {
    let bytes = hex::decode(hex_str).map_err(|e| format!("nonce: {e}"))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| format!("nonce must be 32 bytes, got {}", b.len()))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact sum of min_runtime/window over all sapps, reduced.
pub fn total_demand(policies: impl IntoIterator<Item = SchedulingPolicy>) -> (u128, u128) {
    let (mut n, mut d) = (0u128, 1u128);
    for p in policies {
        let (pn, pd) = (p.min_runtime_ms as u128, p.window_ms as u128);
        n = n * pd + pn * d;
        d *= pd;
        let g = gcd(n, d).max(1);
        n /= g;
        d /= g;
    }
    (n, d)
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => ScenarioError::SchemaViolation(e.to_string()),
            _ => ScenarioError::ParseError {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        })
    }

    pub fn validate(&self) -> Result<Scenario, ScenarioError> {
        let invalid = |m: String| ScenarioError::Invalid(m);
        if self.ram_size == 0 || !self.ram_size.is_multiple_of(PAGE_SIZE) {
            return Err(invalid(format!(
                "ram_size {} is not a positive multiple of {PAGE_SIZE}",
                self.ram_size
            )));
        }
        if self.config.check_interval_ms == 0 {
            return Err(invalid("check_interval_ms must be positive".into()));
        }
        if self.config.lock_threshold == 0 {
            return Err(invalid("lock_threshold must be positive".into()));
        }
        if self.until_ms == 0 {
            return Err(invalid("until_ms must be positive".into()));
        }
        let mut peripherals = Vec::new();
        for p in &self.device_tree {
            let mmio = PhysRange::new(p.mmio_base, p.mmio_size)
                .map_err(|e| invalid(format!("peripheral {}: {e}", p.name)))?;
            peripherals.push(Peripheral {
                name: p.name.clone(),
                version: p.version.clone(),
                mmio,
            });
        }
        let device_tree = DeviceTree::new(peripherals).map_err(|e| invalid(e.to_string()))?;
        // Surface layout errors (MMIO overlapping RAM) here rather than at run.
        Machine::new(self.ram_size, self.prot_entries, device_tree.clone())
            .map_err(|e| invalid(e.to_string()))?;

        let ram = PhysRange::new(RAM_BASE, self.ram_size).map_err(|e| invalid(e.to_string()))?;
        let initial_memory = match self.los.initial_memory {
            None => ram,
            Some(r) => {
                let r = PhysRange::new(r.base, r.size)
                    .map_err(|e| invalid(format!("initial_memory: {e}")))?;
                if !ram.contains_range(&r) {
                    return Err(invalid(format!("initial_memory {r} is outside RAM")));
                }
                r
            }
        };
        let strategy = parse_strategy(&self.los)?;

        let mut sapps = Vec::new();
        for (i, s) in self.sapps.iter().enumerate() {
            let image = hex::decode(&s.image_hex)
                .map_err(|e| invalid(format!("sapps[{i}].image_hex: {e}")))?;
            if s.mem_size == 0 || s.mem_size % PAGE_SIZE != 0 {
                return Err(invalid(format!(
                    "sapps[{i}].mem_size is not a positive multiple of {PAGE_SIZE}"
                )));
            }
            if image.len() as u64 > s.mem_size {
                return Err(invalid(format!("sapps[{i}] image exceeds mem_size")));
            }
            s.policy
                .validate()
                .map_err(|e| invalid(format!("sapps[{i}].policy: {e}")))?;
            s.behavior
                .validate()
                .map_err(|e| invalid(format!("sapps[{i}].behavior: {e}")))?;
            let mut names: Vec<&String> = s.peripherals.iter().collect();
            if let SappBehavior::PeripheralUser { name, .. } = &s.behavior {
                names.push(name);
            }
            if let Some(bad) = names.into_iter().find(|n| device_tree.get(n).is_none()) {
                return Err(invalid(format!(
                    "sapps[{i}] references peripheral `{bad}` absent from device_tree"
                )));
            }
            sapps.push(SappDef {
                image,
                mem_size: s.mem_size,
                policy: s.policy,
                peripherals: s.peripherals.clone(),
                behavior: s.behavior.clone(),
            });
        }

        let (numerator, denominator) = total_demand(sapps.iter().map(|s| s.policy));
        if numerator > denominator {
            return Err(ScenarioError::InfeasiblePolicies {
                numerator,
                denominator,
            });
        }
        let free_entries = self
            .prot_entries
            .saturating_sub(1 + device_tree.len());
        if sapps.len() > free_entries {
            return Err(invalid(format!(
                "{} sapps but only {free_entries} free protection entries",
                sapps.len()
            )));
        }
        let targets: Vec<usize> = match &strategy {
            LosStrategy::Starver { targets } => targets.clone(),
            LosStrategy::SelectiveDos { target, .. } => vec![*target],
            _ => Vec::new(),
        };
        if let Some(t) = targets.iter().find(|t| **t >= sapps.len()) {
            return Err(invalid(format!("strategy targets unknown sapp {t}")));
        }

        let script = match &self.script {
            None => (0..sapps.len())
                .map(|sapp| ScriptStep {
                    t_ms: 0,
                    action: Action::Create { sapp, nonce: None },
                })
                .collect(),
            Some(entries) => {
                let mut steps = entries
                    .iter()
                    .enumerate()
                    .map(|(k, e)| script_step(k, e, sapps.len()))
                    .collect::<Result<Vec<_>, _>>()?;
                steps.sort_by_key(|s| s.t_ms);
                steps
            }
        };

        Ok(Scenario {
            ram_size: self.ram_size,
            prot_entries: self.prot_entries,
            device_tree,
            seed: self.seed,
            check_interval_ms: self.config.check_interval_ms,
            lock_threshold: self.config.lock_threshold,
            strategy,
            initial_memory,
            sapps,
            script,
            until_ms: self.until_ms,
            unlockable_entry: self.fault_injection.and_then(|f| f.unlockable_entry),
        })
    }
}

fn script_step(k: usize, e: &ScriptEntry, n_sapps: usize) -> Result<ScriptStep, ScenarioError> {
    let invalid = |m: String| ScenarioError::Invalid(format!("script[{k}]: {m}"));
    let sapp = || match e.sapp {
        Some(i) if i < n_sapps => Ok(i),
        Some(i) => Err(invalid(format!("sapp index {i} out of range"))),
        None => Err(invalid("missing `sapp`".into())),
    };
    let peripheral = || e.peripheral.clone().ok_or_else(|| invalid("missing `peripheral`".into()));
    let nonce = || e.nonce.as_deref().map(parse_nonce).transpose().map_err(invalid);
    let action = match e.action {
        ActionKind::Create => Action::Create {
            sapp: sapp()?,
            nonce: nonce()?,
        },
        ActionKind::Destroy => Action::Destroy { sapp: sapp()? },
        ActionKind::Attest => Action::Attest {
            sapp: sapp()?,
            nonce: nonce()?,
        },
        ActionKind::Reset => Action::Reset,
        ActionKind::Concede => Action::Concede {
            sapp: sapp()?,
            peripheral: peripheral()?,
        },
        ActionKind::Release => Action::Release {
            sapp: sapp()?,
            peripheral: peripheral()?,
            by_los: e.caller == Some(CallerSpec::Los),
        },
        ActionKind::Donate => Action::Donate {
            base: e.base.ok_or_else(|| invalid("missing `base`".into()))?,
            size: e.size.ok_or_else(|| invalid("missing `size`".into()))?,
        },
    };
    Ok(ScriptStep {
        t_ms: e.t_ms,
        action,
    })
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        ScenarioFile::from_json(text)?.validate()
    }

    pub fn sm_config(&self) -> SmConfig {
        SmConfig {
            check_interval_ms: self.check_interval_ms,
            lock_threshold: self.lock_threshold,
            seed: self.seed,
        }
    }

    /// Same scenario with every image byte inverted; sizes, policies,
    /// peripherals and behavior are unchanged.
    pub fn with_inverted_images(&self) -> Self {
        let mut twin = self.clone();
        for s in &mut twin.sapps {
            for b in &mut s.image {
                *b = !*b;
            }
        }
        twin
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}
