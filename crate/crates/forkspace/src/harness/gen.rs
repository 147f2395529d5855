//! Deterministic trace generators for the agent-style workload shapes:
//! best-of-N selection, beam search, rollback-heavy repair loops, and a
//! fuzzing mix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{build_workspace, MemoryClass, WorkspaceSpec, WorkspaceState};

use super::{Trace, TraceAction, TraceEvent};

/// Valid (process, vma, slot) coordinates of a workspace, sampled by the
/// generators so every Write event targets a real slot.
struct Coords {
    slots: Vec<(u32, u64, u64)>,
}

impl Coords {
    fn of(ws: &WorkspaceState) -> Self {
        let mut slots = Vec::new();
        for p in &ws.processes {
            for r in &p.regions {
                // Write targets avoid shared segments so traces exercise the
                // CoW path; shared-segment writes are covered by unit tests.
                if r.class == MemoryClass::Shared {
                    continue;
                }
                for slot in 0..r.len_pages {
                    slots.push((p.meta.local_pid.0, r.vma_id.0, slot));
                }
            }
        }
        Coords { slots }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> TraceAction {
        let (process, vma, slot) = self.slots[rng.gen_range(0..self.slots.len())];
        TraceAction::Write { process, vma, slot }
    }
}

fn push(events: &mut Vec<TraceEvent>, action: TraceAction) {
    let step = events.len() as u32;
    events.push(TraceEvent { step, action });
}

/// Best-of-N: each round records a branch point, forks N candidates, runs
/// model-call/action steps on them, judges, promotes one, and discards the
/// rest.
pub fn gen_best_of_n(seed: u64, n: u32, rounds: u32, spec: &WorkspaceSpec) -> Trace {
    let ws = build_workspace(spec).expect("valid spec");
    let coords = Coords::of(&ws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB057);
    let mut events = Vec::new();
    for _ in 0..rounds {
        push(&mut events, TraceAction::ModelCall { ms: 0 }); // plan
        push(&mut events, TraceAction::Fork { n });
        for _ in 0..n {
            push(&mut events, TraceAction::ModelCall { ms: 0 }); // ground
            for _ in 0..rng.gen_range(1..4) {
                push(&mut events, coords.pick(&mut rng));
            }
            if rng.gen_bool(0.5) {
                push(&mut events, TraceAction::FsWrite);
            } else {
                push(&mut events, TraceAction::FsRead);
            }
        }
        push(&mut events, TraceAction::ModelCall { ms: 0 }); // judge
        push(&mut events, TraceAction::Promote);
        for _ in 0..n {
            push(&mut events, TraceAction::Discard);
        }
    }
    Trace { seed, events }
}

/// Beam search: repeated fork-expand-prune levels of a fixed width.
pub fn gen_beam(seed: u64, width: u32, depth: u32, spec: &WorkspaceSpec) -> Trace {
    let ws = build_workspace(spec).expect("valid spec");
    let coords = Coords::of(&ws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEA3);
    let mut events = Vec::new();
    for _ in 0..depth {
        push(&mut events, TraceAction::Fork { n: width });
        for _ in 0..width {
            push(&mut events, TraceAction::ModelCall { ms: 0 });
            push(&mut events, coords.pick(&mut rng));
        }
        // Prune back to one survivor.
        push(&mut events, TraceAction::Promote);
        for _ in 0..width {
            push(&mut events, TraceAction::Discard);
        }
    }
    Trace { seed, events }
}

/// Rollback-heavy repair loop: record, act, judge, roll back on failure.
pub fn gen_rollback_heavy(seed: u64, steps: u32, spec: &WorkspaceSpec) -> Trace {
    let ws = build_workspace(spec).expect("valid spec");
    let coords = Coords::of(&ws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0113);
    let mut events = Vec::new();
    for i in 0..steps {
        push(&mut events, TraceAction::Record);
        push(&mut events, TraceAction::ModelCall { ms: 0 });
        for _ in 0..rng.gen_range(1..5) {
            push(&mut events, coords.pick(&mut rng));
        }
        if rng.gen_bool(0.3) {
            push(&mut events, TraceAction::FsWrite);
        }
        if rng.gen_bool(0.5) {
            push(
                &mut events,
                TraceAction::Rollback {
                    version: rng.gen_range(0..=i),
                },
            );
        }
    }
    Trace { seed, events }
}

/// Randomized mix over the full action vocabulary, used by the
/// oracle-equivalence and isolation fuzzing suites.
pub fn gen_random(seed: u64, max_events: usize, spec: &WorkspaceSpec) -> Trace {
    let ws = build_workspace(spec).expect("valid spec");
    let coords = Coords::of(&ws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF022);
    let mut events = Vec::new();
    let count = rng.gen_range(max_events / 2..=max_events.max(1));
    for _ in 0..count {
        let action = match rng.gen_range(0..100u32) {
            0..=39 => coords.pick(&mut rng),
            40..=51 => TraceAction::FsWrite,
            52..=63 => TraceAction::FsRead,
            64..=71 => TraceAction::Record,
            72..=79 => TraceAction::Fork {
                n: rng.gen_range(1..=3),
            },
            80..=85 => TraceAction::Rollback {
                version: rng.gen(),
            },
            86..=91 => TraceAction::Discard,
            92..=94 => TraceAction::Promote,
            95..=97 => TraceAction::ModelCall { ms: 0 },
            _ => TraceAction::ExternalAttempt,
        };
        push(&mut events, action);
    }
    Trace { seed, events }
}
