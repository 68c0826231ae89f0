//! Per-update runtime of a 1F1B pipeline: the closed form and a
//! discrete-event simulation of the same schedule.

use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("stage time lists disagree in length: {0}")]
    LengthMismatch(String),
    #[error("need at least one stage and one micro-batch")]
    Empty,
    #[error("stage {stage} has a negative or non-finite {what} time")]
    BadTime { stage: usize, what: &'static str },
}

/// Seconds spent by each pipeline stage per micro-batch (`fwd`, `bwd`) and
/// once per update (`dp_allreduce`, `update`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageTimes {
    /// Forward pass of one micro-batch, sender-side P2P included.
    pub fwd: Vec<f64>,
    /// Backward pass of one micro-batch, sender-side P2P included.
    pub bwd: Vec<f64>,
    /// Optimizer step plus the stage's parameter all-gather.
    pub update: Vec<f64>,
    /// Gradient all-reduce of each stage; only stage 0's is exposed.
    pub dp_allreduce: Vec<f64>,
}

impl StageTimes {
    pub fn homogeneous(stages: usize, fwd: f64, bwd: f64, sync: f64, update: f64) -> Self {
        StageTimes {
            fwd: vec![fwd; stages],
            bwd: vec![bwd; stages],
            update: vec![update; stages],
            dp_allreduce: vec![sync; stages],
        }
    }

    pub fn stages(&self) -> usize {
        self.fwd.len()
    }

    pub fn validate(&self) -> Result<(), TimelineError> {
        let s = self.fwd.len();
        if self.bwd.len() != s || self.update.len() != s || self.dp_allreduce.len() != s {
            return Err(TimelineError::LengthMismatch(format!(
                "fwd {}, bwd {}, update {}, dp_allreduce {}",
                s,
                self.bwd.len(),
                self.update.len(),
                self.dp_allreduce.len()
            )));
        }
        if s == 0 {
            return Err(TimelineError::Empty);
        }
        for (what, list) in [
            ("fwd", &self.fwd),
            ("bwd", &self.bwd),
            ("update", &self.update),
            ("dp_allreduce", &self.dp_allreduce),
        ] {
            if let Some(stage) = list.iter().position(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(TimelineError::BadTime { stage, what });
            }
        }
        Ok(())
    }

    pub fn max_fwd(&self) -> f64 {
        self.fwd.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_bwd(&self) -> f64 {
        self.bwd.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_update(&self) -> f64 {
        self.update.iter().copied().fold(0.0, f64::max)
    }

    pub fn first_stage_dp_allreduce(&self) -> f64 {
        self.dp_allreduce.first().copied().unwrap_or(0.0)
    }

    /// The closed form applied to these stage times.
    pub fn closed_form(&self, micro_batches: u64) -> f64 {
        closed_form_runtime(
            micro_batches,
            self.stages() as u64,
            self.max_fwd(),
            self.max_bwd(),
            self.first_stage_dp_allreduce(),
            self.max_update(),
        )
    }
}

/// `(M - 1 + S) * (max_fwd + max_bwd) + first_stage_sync + max_update`.
pub fn closed_form_runtime(
    micro_batches: u64,
    stages: u64,
    max_fwd: f64,
    max_bwd: f64,
    first_stage_sync: f64,
    max_update: f64,
) -> f64 {
    let slots = (micro_batches + stages).saturating_sub(1) as f64;
    slots * (max_fwd + max_bwd) + first_stage_sync + max_update
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    F,
    B,
    Sync,
    Update,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::F => "F",
            Phase::B => "B",
            Phase::Sync => "Sync",
            Phase::Update => "Update",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub stage: usize,
    /// `None` for the once-per-update phases.
    pub micro_batch: Option<usize>,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTrace {
    pub stages: usize,
    pub micro_batches: usize,
    pub events: Vec<Event>,
    pub total: f64,
}

/// Per-stage execution order: `min(S - s, M)` warmup forwards, then
/// alternating backward/forward, then the remaining backwards.
fn stage_order(stage: usize, stages: usize, m: usize) -> Vec<(Phase, usize)> {
    let warmup = (stages - stage).min(m);
    let mut order: Vec<(Phase, usize)> = (0..warmup).map(|i| (Phase::F, i)).collect();
    let mut next_f = warmup;
    for b in 0..m {
        order.push((Phase::B, b));
        if next_f < m {
            order.push((Phase::F, next_f));
            next_f += 1;
        }
    }
    order
}

/// Simulates the 1F1B schedule event by event.
///
/// A forward on stage `s` waits for the same micro-batch's forward on
/// `s - 1`; a backward waits for the backward on `s + 1` (or, on the last
/// stage, its own forward). Each stage starts its gradient all-reduce when
/// its last backward ends and its update when the all-reduce ends; these
/// overlap with other stages' remaining work, so only a late stage's sync
/// can extend the total.
pub fn simulate_1f1b(times: &StageTimes, micro_batches: usize) -> Result<ScheduleTrace, TimelineError> {
    times.validate()?;
    if micro_batches == 0 {
        return Err(TimelineError::Empty);
    }
    let s_count = times.stages();
    let m = micro_batches;
    let orders: Vec<Vec<(Phase, usize)>> = (0..s_count).map(|s| stage_order(s, s_count, m)).collect();
    let mut f_end = vec![vec![f64::NAN; m]; s_count];
    let mut b_end = vec![vec![f64::NAN; m]; s_count];
    let mut cursor = vec![0usize; s_count];
    let mut free_at = vec![0.0f64; s_count];
    let mut events = Vec::with_capacity(2 * s_count * m + 2 * s_count);

    let mut remaining = 2 * s_count * m;
    while remaining > 0 {
        let mut progressed = false;
        for s in 0..s_count {
            while let Some(&(phase, mb)) = orders[s].get(cursor[s]) {
                let ready = match phase {
                    Phase::F if s == 0 => Some(0.0),
                    Phase::F => Some(f_end[s - 1][mb]).filter(|t| !t.is_nan()),
                    Phase::B if s + 1 == s_count => Some(f_end[s][mb]).filter(|t| !t.is_nan()),
                    Phase::B => Some(b_end[s + 1][mb]).filter(|t| !t.is_nan()),
                    _ => unreachable!(),
                };
                let Some(ready) = ready else { break };
                let start = free_at[s].max(ready);
                let (dur, slot) = match phase {
                    Phase::F => (times.fwd[s], &mut f_end[s][mb]),
                    _ => (times.bwd[s], &mut b_end[s][mb]),
                };
                let end = start + dur;
                *slot = end;
                free_at[s] = end;
                events.push(Event {
                    stage: s,
                    micro_batch: Some(mb),
                    phase,
                    start,
                    end,
                });
                cursor[s] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "1F1B order cannot deadlock");
    }

    for (s, &sync_start) in free_at.iter().enumerate() {
        let sync_end = sync_start + times.dp_allreduce[s];
        let update_end = sync_end + times.update[s];
        events.push(Event {
            stage: s,
            micro_batch: None,
            phase: Phase::Sync,
            start: sync_start,
            end: sync_end,
        });
        events.push(Event {
            stage: s,
            micro_batch: None,
            phase: Phase::Update,
            start: sync_end,
            end: update_end,
        });
    }
    let total = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(ScheduleTrace {
        stages: s_count,
        micro_batches: m,
        events,
        total,
    })
}

impl ScheduleTrace {
    /// Rows of `stage,mb,phase,start,end`; `mb` is empty for sync and update.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,mb,phase,start,end\n");
        for e in self.sorted_events() {
            let mb = e.micro_batch.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", e.stage, mb, e.phase, e.start, e.end);
        }
        out
    }

    /// One line per stage listing its phases in time order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in 0..self.stages {
            let _ = write!(out, "stage {s}:");
            for e in self.sorted_events().filter(|e| e.stage == s) {
                let label = match e.micro_batch {
                    Some(mb) => format!("{}{}", e.phase, mb),
                    None => e.phase.to_string(),
                };
                let _ = write!(out, " {label}[{:.6}-{:.6}]", e.start, e.end);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "total: {:.6}", self.total);
        out
    }

    fn sorted_events(&self) -> impl Iterator<Item = &Event> {
        let mut v: Vec<&Event> = self.events.iter().collect();
        v.sort_by(|a, b| a.stage.cmp(&b.stage).then(a.start.total_cmp(&b.start)));
        v.into_iter()
    }

    fn find(&self, stage: usize, phase: Phase, mb: Option<usize>) -> Option<&Event> {
        self.events
            .iter()
            .find(|e| e.stage == stage && e.phase == phase && e.micro_batch == mb)
    }

    /// Checks that every event starts after its dependencies end and that no
    /// two compute events overlap on one stage.
    pub fn check_causality(&self) -> Result<(), String> {
        let s_count = self.stages;
        for s in 0..s_count {
            let mut compute: Vec<&Event> = self
                .events
                .iter()
                .filter(|e| e.stage == s && matches!(e.phase, Phase::F | Phase::B))
                .collect();
            compute.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in compute.windows(2) {
                if w[1].start < w[0].end {
                    return Err(format!("stage {s}: {:?} overlaps {:?}", w[0], w[1]));
                }
            }
            let last_b = compute.iter().map(|e| e.end).fold(0.0, f64::max);
            let sync = self.find(s, Phase::Sync, None).ok_or(format!("stage {s} has no sync"))?;
            let update = self.find(s, Phase::Update, None).ok_or(format!("stage {s} has no update"))?;
            if sync.start < last_b || update.start < sync.end {
                return Err(format!("stage {s}: sync/update starts too early"));
            }
            for mb in 0..self.micro_batches {
                let f = self.find(s, Phase::F, Some(mb)).ok_or(format!("missing F{mb} on {s}"))?;
                let b = self.find(s, Phase::B, Some(mb)).ok_or(format!("missing B{mb} on {s}"))?;
                if s > 0 {
                    let prev = self.find(s - 1, Phase::F, Some(mb)).ok_or("missing upstream F")?;
                    if f.start < prev.end {
                        return Err(format!("F{mb} on stage {s} starts before stage {} finishes it", s - 1));
                    }
                }
                let dep = if s + 1 < s_count {
                    self.find(s + 1, Phase::B, Some(mb)).ok_or("missing downstream B")?
                } else {
                    f
                };
                if b.start < dep.end {
                    return Err(format!("B{mb} on stage {s} starts before its gradient arrives"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub formula: f64,
    pub sim: f64,
    /// `(formula - sim) / sim`; zero when both are zero.
    pub gap: f64,
}

pub fn compare_formula_vs_sim(times: &StageTimes, micro_batches: usize) -> Result<Comparison, TimelineError> {
    let sim = simulate_1f1b(times, micro_batches)?.total;
    let formula = times.closed_form(micro_batches as u64);
    let gap = if sim == 0.0 {
        if formula == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (formula - sim) / sim
    };
    Ok(Comparison { formula, sim, gap })
}
