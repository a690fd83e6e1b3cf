//! Event trace of the interceptor and recovery manager.
//!
//! Every invocation, classification, backoff and compensation is recorded
//! with the failure episode it belongs to, so phase ordering can be checked
//! after the fact. Exported as JSON lines.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::txlog::RecordId;

/// Phases of a run, in the order recovery walks through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Classify,
    Retry,
    Alternative,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub at_ms: u64,
    /// Failure episode this event belongs to; `None` for normal forward work.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u32>,
    pub phase: Phase,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<RecordId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    events: Vec<TraceEvent>,
    episode: Option<u32>,
    episodes: u32,
}

impl EventTrace {
    pub fn begin_episode(&mut self) -> u32 {
        self.episodes += 1;
        self.episode = Some(self.episodes);
        self.episodes
    }

    pub fn end_episode(&mut self) {
        self.episode = None;
    }

    pub fn record(
        &mut self,
        at_ms: u64,
        phase: Phase,
        action: &str,
        tool: Option<&str>,
        record_id: Option<RecordId>,
        detail: Option<String>,
    ) {
        self.events.push(TraceEvent {
            seq: self.events.len() as u64 + 1,
            at_ms,
            episode: self.episode,
            phase,
            action: action.to_owned(),
            tool: tool.map(str::to_owned),
            record_id,
            detail,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Checks that within every failure episode phases never move backwards.
/// Returns the index of the first event that moves backwards.
pub fn check_phase_order(events: &[TraceEvent]) -> Result<(), usize> {
    match events
        .windows(2)
        .position(|w| w[0].episode.is_some() && w[0].episode == w[1].episode && w[1].phase < w[0].phase)
    {
        Some(i) => Err(i + 1),
        None => Ok(()),
    }
}
