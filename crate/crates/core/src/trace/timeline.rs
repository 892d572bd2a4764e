//! Joining several nodes' logs into one causal timeline.
//!
//! An `ApiEnter` served for a remote caller names the caller's node and the
//! seq of its `EffectRequest`. Every event of that invocation is anchored at
//! the anchor of that request, and events of the originating node are
//! anchored at their own seq, so sorting by `(correlation, anchor)` lays each
//! remote invocation out right where it was requested.

use std::collections::BTreeMap;

use serde_json::Value as Json;

use super::{CorrelationId, EventKind, ReplayLog, TraceEvent};

/// Capability name under which remote api calls appear in a caller's log.
pub const RPC_CAPABILITY: &str = "Rpc";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimelineEntry {
    pub corr: CorrelationId,
    pub anchor: u64,
    pub node: String,
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
}

/// One remote call as seen from both ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteCall {
    pub corr: CorrelationId,
    pub caller: String,
    pub request_seq: u64,
    pub api: String,
    /// `(callee node, ApiEnter seq)` for every delivery (several under
    /// duplication, none when the request was dropped).
    pub deliveries: Vec<(String, u64)>,
}

fn caller_of(e: &TraceEvent) -> Option<(String, u64)> {
    let c = e.get("caller")?;
    Some((c.get("node")?.as_str()?.to_string(), c.get("seq")?.as_u64()?))
}

pub fn merge_timelines(logs: &[(&str, &ReplayLog)]) -> Timeline {
    // Invocation-level caller links: (node, event index) → caller event.
    let mut caller_link: BTreeMap<(String, u64), (String, u64)> = BTreeMap::new();
    for (node, log) in logs {
        let mut current = None;
        for e in &log.events {
            if e.kind == EventKind::ApiEnter {
                current = caller_of(e);
            }
            if let Some(c) = &current {
                caller_link.insert((node.to_string(), e.seq), c.clone());
            }
            if e.kind == EventKind::ApiExit {
                current = None;
            }
        }
    }
    let anchor = |node: &str, seq: u64| -> u64 {
        let mut key = (node.to_string(), seq);
        // Links always point at an earlier invocation on another node; the
        // hop bound only guards against malformed input.
        for _ in 0..=caller_link.len() {
            match caller_link.get(&key) {
                Some(next) => key = next.clone(),
                None => break,
            }
        }
        key.1
    };
    let mut entries = Vec::new();
    for (node, log) in logs {
        for e in &log.events {
            entries.push(TimelineEntry {
                corr: e.corr.clone(),
                anchor: anchor(node, e.seq),
                node: node.to_string(),
                event: e.clone(),
            });
        }
    }
    entries.sort_by(|a, b| {
        (&a.corr, a.anchor, a.node.as_str(), a.event.seq).cmp(&(&b.corr, b.anchor, b.node.as_str(), b.event.seq))
    });
    Timeline { entries }
}

impl Timeline {
    pub fn correlations(&self) -> Vec<&CorrelationId> {
        let mut out: Vec<&CorrelationId> = self.entries.iter().map(|e| &e.corr).collect();
        out.dedup();
        out
    }

    /// Every remote call request and where it was delivered.
    pub fn remote_calls(&self) -> Vec<RemoteCall> {
        let mut calls: BTreeMap<(String, u64), RemoteCall> = BTreeMap::new();
        for e in &self.entries {
            if e.event.kind == EventKind::EffectRequest
                && e.event.get("capability").and_then(Json::as_str) == Some(RPC_CAPABILITY)
            {
                calls.insert(
                    (e.node.clone(), e.event.seq),
                    RemoteCall {
                        corr: e.corr.clone(),
                        caller: e.node.clone(),
                        request_seq: e.event.seq,
                        api: e.event.get("operation").and_then(Json::as_str).unwrap_or_default().to_string(),
                        deliveries: Vec::new(),
                    },
                );
            }
        }
        for e in &self.entries {
            if e.event.kind != EventKind::ApiEnter {
                continue;
            }
            if let Some(key) = caller_of(&e.event) {
                if let Some(call) = calls.get_mut(&key) {
                    call.deliveries.push((e.node.clone(), e.event.seq));
                }
            }
        }
        calls.into_values().collect()
    }

    /// Requests that no callee ever received.
    pub fn undelivered(&self) -> Vec<RemoteCall> {
        self.remote_calls().into_iter().filter(|c| c.deliveries.is_empty()).collect()
    }

    /// One line per event: `corr anchor node#seq Kind`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {:>6} {}#{} {}\n", e.corr, e.anchor, e.node, e.event.seq, e.event.kind));
        }
        out
    }
}
