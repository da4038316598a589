//! Chrome trace-event export of a simulated timeline.
//!
//! [`render_trace`] turns schedule events into the Chrome trace-event
//! JSON format (an array of complete duration events, `ph: "X"`): `name`
//! is the event label, `ts`/`dur` are microseconds, `pid` is the replica
//! index and `tid` the device id, so the trace viewer groups rows by
//! replica and device. Output ordering is `(ts, tid, name)` and therefore
//! byte-identical across runs of the same plan.

use serde::Serialize;

use crate::schedule_sim::ScheduleEvent;

/// One complete (`ph: "X"`) duration event.
#[derive(Debug, Serialize)]
struct TraceEvent {
    name: String,
    ph: &'static str,
    /// Microseconds from step start.
    ts: u64,
    /// Microseconds.
    dur: u64,
    /// Replica index.
    pid: usize,
    /// Device id.
    tid: String,
}

/// Render events as a Chrome trace-event JSON array. An empty timeline
/// renders as `[]`.
pub fn render_trace(events: &[ScheduleEvent]) -> String {
    let mut rows: Vec<TraceEvent> = events
        .iter()
        .map(|e| TraceEvent {
            name: e.kind.label(),
            ph: "X",
            ts: (e.start * 1e6).round() as u64,
            dur: (e.duration * 1e6).round() as u64,
            pid: e.replica,
            tid: e.device_id.clone(),
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.ts, &a.tid, &a.name, a.pid).cmp(&(b.ts, &b.tid, &b.name, b.pid))
    });
    serde_json::to_string(&rows).expect("trace events serialize")
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule_sim::EventKind;

    fn event(device: &str, replica: usize, start: f64, dur: f64, kind: EventKind) -> ScheduleEvent {
        ScheduleEvent {
            device_id: device.into(),
            replica,
            kind,
            start,
            duration: dur,
        }
    }

    #[test]
    fn empty_timeline_renders_empty_array() {
        assert_eq!(render_trace(&[]), "[]");
    }

    #[test]
    fn timestamps_convert_to_microseconds() {
        let trace = render_trace(&[event(
            "g0",
            0,
            0.001,
            0.0025,
            EventKind::Forward { stage: 0, micro: 0 },
        )]);
        let parsed: serde_json::Value = serde_json::from_str(&trace).unwrap();
        assert_eq!(parsed[0]["ts"], 1000);
        assert_eq!(parsed[0]["dur"], 2500);
        assert_eq!(parsed[0]["ph"], "X");
        assert_eq!(parsed[0]["pid"], 0);
        assert_eq!(parsed[0]["tid"], "g0");
        assert_eq!(parsed[0]["name"], "F[s0,m0]");
    }

    #[test]
    fn events_sort_by_start_then_device() {
        let trace = render_trace(&[
            event("g1", 0, 0.0, 1.0, EventKind::Forward { stage: 1, micro: 0 }),
            event("g0", 0, 1.0, 1.0, EventKind::Backward { stage: 0, micro: 0 }),
            event("g0", 0, 0.0, 1.0, EventKind::Forward { stage: 0, micro: 0 }),
        ]);
        let parsed: serde_json::Value = serde_json::from_str(&trace).unwrap();
        let keys: Vec<(u64, String)> = parsed
            .as_array()
            .unwrap()
            .iter()
            .map(|e| (e["ts"].as_u64().unwrap(), e["tid"].as_str().unwrap().into()))
            .collect();
        assert_eq!(
            keys,
            vec![(0, "g0".into()), (0, "g1".into()), (1_000_000, "g0".into())]
        );
    }

    #[test]
    fn rendering_is_byte_identical() {
        let events = vec![
            event("g0", 0, 0.0, 0.5, EventKind::Forward { stage: 0, micro: 0 }),
            event("g0", 1, 0.5, 0.25, EventKind::Comm { id: "allgather:h:m0".into() }),
        ];
        assert_eq!(render_trace(&events), render_trace(&events));
    }
}
