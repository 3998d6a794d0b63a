//! Trace file format: JSON lines, one event per line, fixed field order,
//! unknown fields rejected.
//!
//! ```text
//! {"seq":12,"proc":"p3","node":"n1","op":"write","loc":"x","value":2}
//! {"seq":13,"proc":"p2","node":"n1","op":"read","loc":"x","value":2,"after":[12]}
//! {"seq":14,"proc":"p3","node":"n1","op":"flush","loc":"x"}
//! {"seq":15,"proc":"p0","node":"n0","op":"rmw","loc":"x","rmw":"cas","expected":0,"new":1,"success":true,"observed":0}
//! {"seq":16,"proc":"p_sys","node":"n0","op":"evict","loc":"x"}
//! ```

use std::io::{BufRead, Write};

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Event, EventKind, Location, RmwKind, Trace, Value};
use crate::topology::{NodeId, ProcId};

impl Serialize for Location {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Location {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        Ok(Location::new(String::deserialize(de)?))
    }
}

impl Serialize for Event {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let extra = match &self.kind {
            EventKind::Write { .. } | EventKind::Read { .. } => 1,
            EventKind::Flush | EventKind::Evict => 0,
            EventKind::Rmw(RmwKind::Cas { .. }) => 5,
            EventKind::Rmw(RmwKind::Faa { .. }) => 3,
        } + usize::from(!self.after.is_empty());
        let mut st = ser.serialize_struct("Event", 5 + extra)?;
        st.serialize_field("seq", &self.seq)?;
        st.serialize_field("proc", &self.proc)?;
        st.serialize_field("node", &self.node)?;
        let op = match &self.kind {
            EventKind::Write { .. } => "write",
            EventKind::Read { .. } => "read",
            EventKind::Flush => "flush",
            EventKind::Rmw(_) => "rmw",
            EventKind::Evict => "evict",
        };
        st.serialize_field("op", op)?;
        st.serialize_field("loc", &self.loc)?;
        match &self.kind {
            EventKind::Write { value } | EventKind::Read { value } => {
                st.serialize_field("value", value)?;
            }
            EventKind::Flush | EventKind::Evict => {}
            EventKind::Rmw(RmwKind::Cas {
                expected,
                new,
                success,
                observed,
            }) => {
                st.serialize_field("rmw", "cas")?;
                st.serialize_field("expected", expected)?;
                st.serialize_field("new", new)?;
                st.serialize_field("success", success)?;
                st.serialize_field("observed", observed)?;
            }
            EventKind::Rmw(RmwKind::Faa { delta, old }) => {
                st.serialize_field("rmw", "faa")?;
                st.serialize_field("delta", delta)?;
                st.serialize_field("old", old)?;
            }
        }
        if !self.after.is_empty() {
            st.serialize_field("after", &self.after)?;
        }
        st.end()
    }
}

/// Flat view used for parsing; per-op validation happens afterwards.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    seq: u64,
    proc: ProcId,
    node: NodeId,
    op: String,
    loc: Location,
    value: Option<Value>,
    rmw: Option<String>,
    expected: Option<Value>,
    new: Option<Value>,
    success: Option<bool>,
    observed: Option<Value>,
    delta: Option<Value>,
    old: Option<Value>,
    after: Option<Vec<u64>>,
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn event_from_raw(raw: RawEvent, line: usize) -> Result<Event, TraceIoError> {
    let malformed = |reason: String| TraceIoError::Malformed { line, reason };
    let mut used = [
        raw.value.is_some(),
        raw.rmw.is_some(),
        raw.expected.is_some(),
        raw.new.is_some(),
        raw.success.is_some(),
        raw.observed.is_some(),
        raw.delta.is_some(),
        raw.old.is_some(),
    ];
    let names = [
        "value", "rmw", "expected", "new", "success", "observed", "delta", "old",
    ];
    let mut take = |idx: usize| {
        used[idx] = false;
    };
    let kind = match raw.op.as_str() {
        "write" => {
            take(0);
            EventKind::Write {
                value: raw.value.ok_or_else(|| malformed("write needs value".into()))?,
            }
        }
        "read" => {
            take(0);
            EventKind::Read {
                value: raw.value.ok_or_else(|| malformed("read needs value".into()))?,
            }
        }
        "flush" => EventKind::Flush,
        "evict" => EventKind::Evict,
        "rmw" => {
            take(1);
            match raw.rmw.as_deref() {
                Some("cas") => {
                    take(2);
                    take(3);
                    take(4);
                    take(5);
                    EventKind::Rmw(RmwKind::Cas {
                        expected: raw
                            .expected
                            .ok_or_else(|| malformed("cas needs expected".into()))?,
                        new: raw.new.ok_or_else(|| malformed("cas needs new".into()))?,
                        success: raw
                            .success
                            .ok_or_else(|| malformed("cas needs success".into()))?,
                        observed: raw
                            .observed
                            .ok_or_else(|| malformed("cas needs observed".into()))?,
                    })
                }
                Some("faa") => {
                    take(6);
                    take(7);
                    EventKind::Rmw(RmwKind::Faa {
                        delta: raw.delta.ok_or_else(|| malformed("faa needs delta".into()))?,
                        old: raw.old.ok_or_else(|| malformed("faa needs old".into()))?,
                    })
                }
                other => return Err(malformed(format!("unknown rmw kind {other:?}"))),
            }
        }
        other => return Err(malformed(format!("unknown op {other:?}"))),
    };
    if let Some(i) = used.iter().position(|&u| u) {
        return Err(malformed(format!(
            "field {:?} not allowed for op {:?}",
            names[i], raw.op
        )));
    }
    let after = raw.after.unwrap_or_default();
    if let Some(&bad) = after.iter().find(|&&s| s >= raw.seq) {
        return Err(malformed(format!(
            "edge target {bad} does not precede event {}",
            raw.seq
        )));
    }
    Ok(Event {
        seq: raw.seq,
        proc: raw.proc,
        node: raw.node,
        kind,
        loc: raw.loc,
        after,
    })
}

impl Trace {
    /// Writes the trace as JSON lines in recording order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceIoError> {
        for ev in self.events() {
            serde_json::to_writer(&mut w, ev).map_err(|source| TraceIoError::Json {
                line: ev.seq as usize + 1,
                source,
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses a JSON-lines trace. Sequence numbers must be strictly
    /// increasing; blank lines are ignored.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceIoError> {
        let mut events = Vec::new();
        let mut last_seq = None;
        for (idx, line) in r.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEvent =
                serde_json::from_str(&line).map_err(|source| TraceIoError::Json {
                    line: line_no,
                    source,
                })?;
            let ev = event_from_raw(raw, line_no)?;
            if let Some(prev) = last_seq {
                if ev.seq <= prev {
                    return Err(TraceIoError::Malformed {
                        line: line_no,
                        reason: format!("seq {} not increasing after {}", ev.seq, prev),
                    });
                }
            }
            last_seq = Some(ev.seq);
            events.push(ev);
        }
        Ok(Trace::from_events(events))
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn from_jsonl_str(s: &str) -> Result<Trace, TraceIoError> {
        Trace::read_jsonl(s.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::{EvictionCfg, MemorySystem};
    use crate::topology::{Topology, TopologySpec};

    #[test]
    fn wire_shape_matches_format() {
        let ev = Event {
            seq: 12,
            proc: ProcId::new(3),
            node: NodeId::new(1),
            kind: EventKind::Write { value: 2 },
            loc: Location::from("x"),
            after: vec![],
        };
        assert_eq!(
            serde_json::to_string(&ev).unwrap(),
            r#"{"seq":12,"proc":"p3","node":"n1","op":"write","loc":"x","value":2}"#
        );
        let cas = Event {
            seq: 13,
            proc: ProcId::new(0),
            node: NodeId::new(0),
            kind: EventKind::Rmw(RmwKind::Cas {
                expected: 0,
                new: 1,
                success: true,
                observed: 0,
            }),
            loc: Location::from("x"),
            after: vec![12],
        };
        assert_eq!(
            serde_json::to_string(&cas).unwrap(),
            r#"{"seq":13,"proc":"p0","node":"n0","op":"rmw","loc":"x","rmw":"cas","expected":0,"new":1,"success":true,"observed":0,"after":[12]}"#
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = r#"{"seq":0,"proc":"p0","node":"n0","op":"flush","loc":"x","bogus":1}"#;
        assert!(Trace::from_jsonl_str(line).is_err());
    }

    #[test]
    fn wrong_fields_for_op_rejected() {
        let line = r#"{"seq":0,"proc":"p0","node":"n0","op":"flush","loc":"x","value":2}"#;
        assert!(Trace::from_jsonl_str(line).is_err());
        let line = r#"{"seq":0,"proc":"p0","node":"n0","op":"write","loc":"x","value":2,"success":true}"#;
        assert!(Trace::from_jsonl_str(line).is_err());
    }

    #[test]
    fn forward_edges_rejected() {
        let line = r#"{"seq":3,"proc":"p0","node":"n0","op":"read","loc":"x","value":0,"after":[3]}"#;
        assert!(Trace::from_jsonl_str(line).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let topo = Topology::build(&TopologySpec::new(2, 1, 1, 2)).unwrap();
        let ms = MemorySystem::with_topology(
            topo,
            [(Location::from("x"), 0), (Location::from("y"), 1)],
            EvictionCfg::Off,
        )
        .unwrap();
        let p = ProcId::new;
        ms.write(p(0), &Location::from("x"), 5).unwrap();
        let w = ms.last_seq_of(p(0)).unwrap();
        ms.flush_line(p(0), &Location::from("x")).unwrap();
        ms.add_happens_before(p(2), w);
        ms.read(p(2), &Location::from("x")).unwrap();
        ms.atomic_cas(p(2), &Location::from("y"), 1, 9).unwrap();
        ms.atomic_faa(p(1), &Location::from("y"), 3).unwrap();
        ms.inject_eviction(NodeId::new(0), &Location::from("y"));
        let tr = ms.take_trace();

        let text = tr.to_jsonl_string();
        let parsed = Trace::from_jsonl_str(&text).unwrap();
        assert_eq!(parsed.events(), tr.events());
        // Re-serializing yields the same bytes.
        assert_eq!(parsed.to_jsonl_string(), text);
    }
}
