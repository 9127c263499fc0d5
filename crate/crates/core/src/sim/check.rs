//! Runs a scenario (and its image-inverted twin) and judges the five
//! properties against the invariants the run recorded.

use std::fmt;

use super::run::{run, Invariant, RunOutcome};
use super::scenario::Scenario;

/// Line budget for the monitor source, "a few thousand".
pub const TCB_BUDGET: usize = 5000;

/// Non-blank lines of the monitor module, counted by the build script.
pub fn tcb_loc() -> usize {
    env!("SOVSIM_TCB_LOC").parse().unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyResult {
    pub id: &'static str,
    pub title: &'static str,
    pub pass: bool,
    pub summary: String,
    pub counterexample: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn get(&self, id: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let verdict = if r.pass { "PASS" } else { "FAIL" };
            writeln!(f, "{} {verdict} {}: {}", r.id, r.title, r.summary)?;
            if let Some(c) = &r.counterexample {
                for line in c.lines() {
                    writeln!(f, "    {line}")?;
                }
            }
        }
        Ok(())
    }
}

/// First violation among `invariants`, in the order given, as a printable
/// counterexample.
fn first_counterexample(out: &RunOutcome, invariants: &[Invariant]) -> Option<String> {
    invariants.iter().find_map(|inv| {
        out.violations_of(*inv).next().map(|v| {
            format!(
                "{} violated at t={}: {}\n{}",
                inv.name(),
                v.t,
                v.detail,
                out.trace.excerpt(v.line, 2).trim_end()
            )
        })
    })
}

fn judge(
    id: &'static str,
    title: &'static str,
    out: &RunOutcome,
    invariants: &[Invariant],
    summary: String,
) -> PropertyResult {
    let counterexample = first_counterexample(out, invariants);
    PropertyResult {
        id,
        title,
        pass: counterexample.is_none(),
        summary,
        counterexample,
    }
}

/// A busy LOS that never idles defeats the detection bound by design; the
/// monitor's answer is the missed-check flag, so its presence satisfies
/// availability for that strategy.
fn availability_invariants(sc: &Scenario, out: &RunOutcome) -> Vec<Invariant> {
    let waived = sc.is_no_check() && out.stats.missed_checks > 0;
    let mut v = vec![Invariant::NoFalsePositive];
    if !waived {
        v.insert(0, Invariant::DetectionBound);
    }
    v
}

fn anonymity(main: &RunOutcome, twin: &RunOutcome) -> PropertyResult {
    let a = main.trace.los_visible();
    let b = twin.trace.los_visible();
    let mut counterexample = None;
    if a != b {
        let (k, (x, y)) = a
            .lines()
            .zip(b.lines())
            .enumerate()
            .find(|(_, (x, y))| x != y)
            .unwrap_or((a.lines().count().min(b.lines().count()), ("<end>", "<end>")));
        counterexample = Some(format!(
            "LOS-visible traces diverge at line {k}\n  original: {x}\n  twin:     {y}"
        ));
    } else if main.view_digest != twin.view_digest || main.final_view != twin.final_view {
        counterexample = Some("LOS views differ between image twins".to_string());
    }
    PropertyResult {
        id: "P4",
        title: "execution without leaking sapp identity",
        pass: counterexample.is_none(),
        summary: format!(
            "{} LOS-visible lines compared against the image-inverted twin",
            a.lines().count()
        ),
        counterexample,
    }
}

pub fn check(sc: &Scenario) -> CheckReport {
    let twin_sc = sc.with_inverted_images();
    let (main, twin) = std::thread::scope(|s| {
        let twin = s.spawn(|| run(&twin_sc));
        let main = run(sc);
        (main, twin.join().expect("twin run does not panic"))
    });
    let st = &main.stats;

    let mut p1 = vec![
        Invariant::PeripheralExclusivity,
        Invariant::LedgerSoundness,
        Invariant::Escalation,
        Invariant::Attestation,
    ];
    p1.extend(availability_invariants(sc, &main));
    let mut p3 = vec![
        Invariant::InspectorFutility,
        Invariant::ProbeFutility,
        Invariant::InspectionRevoked,
    ];
    p3.extend(availability_invariants(sc, &main));

    let loc = tcb_loc();
    let results = vec![
        judge(
            "P1",
            "full user control",
            &main,
            &p1,
            format!(
                "{} switches, {} checks, {} under-granted windows, {} notifications, {} missed checks",
                st.switches,
                st.checks,
                st.detections.len(),
                st.notices.len(),
                st.missed_checks
            ),
        ),
        judge(
            "P2",
            "LOS protection",
            &main,
            &[
                Invariant::InspectorFutility,
                Invariant::ProbeFutility,
                Invariant::InspectionRevoked,
                Invariant::LockMonotonicity,
                Invariant::ClockMonotonicity,
            ],
            format!(
                "{} sapp probes outside own region, {} succeeded",
                st.sapp_probes, st.sapp_probe_hits
            ),
        ),
        judge(
            "P3",
            "sapp protection",
            &main,
            &p3,
            format!(
                "{} LOS probes into sapp resources, {} succeeded",
                st.inspector_probes, st.inspector_hits
            ),
        ),
        anonymity(&main, &twin),
        PropertyResult {
            id: "P5",
            title: "limited trusted computing base",
            pass: loc <= TCB_BUDGET,
            summary: format!("security monitor is {loc} lines (budget {TCB_BUDGET})"),
            counterexample: None,
        },
    ];
    CheckReport { results }
}
