//! Line-oriented trace: `t=<ms> actor=<SM|LOS|handle> event=<name> k=v ...`.

use std::collections::HashMap;
use std::fmt;

use regex::Regex;

use crate::security_monitor::Handle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    Sm,
    Los,
    Sapp(Handle),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Sm => f.write_str("SM"),
            Actor::Los => f.write_str("LOS"),
            Actor::Sapp(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub t: u64,
    pub actor: Actor,
    pub event: String,
    pub detail: Vec<(&'static str, String)>,
    /// Whether the LOS could observe this event.
    pub los_visible: bool,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} actor={} event={}", self.t, self.actor, self.event)?;
        for (k, v) in &self.detail {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends and returns the line index.
    pub fn push(&mut self, e: TraceEvent) -> usize {
        self.events.push(e);
        self.events.len() - 1
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// The LOS-visible lines with handles renamed by order of appearance.
    pub fn los_visible(&self) -> String {
        let mut out = String::new();
        for e in self.events.iter().filter(|e| e.los_visible) {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        canonicalize_handles(&out)
    }

    /// A few lines around `index`, for counterexamples.
    pub fn excerpt(&self, index: usize, context: usize) -> String {
        let lo = index.saturating_sub(context);
        let hi = (index + context + 1).min(self.events.len());
        self.events[lo..hi]
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let mark = if lo + k == index { ">" } else { " " };
                format!("{mark} {e}\n")
            })
            .collect()
    }
}

/// Replaces every handle with `h<n>`, numbered by first appearance.
pub fn canonicalize_handles(text: &str) -> String {
    let re = Regex::new(r"s[0-9a-f]{16}").expect("static regex");
    let mut seen: HashMap<String, usize> = HashMap::new();
    re.replace_all(text, |c: &regex::Captures<'_>| {
        let next = seen.len();
        let n = *seen.entry(c[0].to_string()).or_insert(next);
        format!("h{n}")
    })
    .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let e = TraceEvent {
            t: 5,
            actor: Actor::Sapp(Handle(0xab)),
            event: "mmio_read".into(),
            detail: vec![("name", "ble0".into()), ("result", "ok".into())],
            los_visible: false,
        };
        assert_eq!(
            e.to_string(),
            "t=5 actor=s00000000000000ab event=mmio_read name=ble0 result=ok"
        );
    }

    #[test]
    fn handles_canonicalize_by_first_appearance() {
        let a = "x s00000000000000ff y s0000000000000001 z s00000000000000ff";
        assert_eq!(canonicalize_handles(a), "x h0 y h1 z h0");
    }
}
