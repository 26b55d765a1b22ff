//! Continuous-time dynamic graph storage: the event log, its loader, and
//! chronological splits.
//!
//! Logs follow the interaction-record convention used by public temporal
//! graph datasets: one CSV row per event, `src,dst,timestamp,state_label,
//! f1,...,fde`, sources and destinations drawn from disjoint id spaces
//! (bipartite). Ids are remapped to a dense range with destinations offset
//! after sources, so one flat array indexes every node.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// One interaction after id remapping. `src < n_src <= dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub src: usize,
    pub dst: usize,
    pub t: f64,
    /// Dynamic state label attached to the source at this event, when the
    /// log carries one.
    pub label: Option<u8>,
    pub features: Vec<f32>,
}

/// An event in the raw id space of the source file or generator.
#[derive(Debug, Clone)]
pub struct RawEvent {
    pub src: u64,
    pub dst: u64,
    pub t: f64,
    pub label: Option<u8>,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EventLog {
    events: Vec<Event>,
    n_src: usize,
    n_dst: usize,
    feat_dim: usize,
}

impl EventLog {
    /// Remaps ids densely (first appearance order), validates a uniform
    /// feature width, and sorts by timestamp, keeping arrival order among
    /// equal timestamps.
    pub fn from_raw(raw: Vec<RawEvent>) -> Result<EventLog> {
        if raw.is_empty() {
            return Err(Error::usage("event log holds no events"));
        }
        let feat_dim = raw[0].features.len();
        let mut src_map = std::collections::HashMap::new();
        let mut dst_map = std::collections::HashMap::new();
        for ev in &raw {
            if ev.features.len() != feat_dim {
                return Err(Error::usage(format!(
                    "feature width {} differs from {} in the same log",
                    ev.features.len(),
                    feat_dim
                )));
            }
            if !ev.t.is_finite() {
                return Err(Error::usage(format!("non-finite timestamp {}", ev.t)));
            }
            let next = src_map.len();
            src_map.entry(ev.src).or_insert(next);
            let next = dst_map.len();
            dst_map.entry(ev.dst).or_insert(next);
        }
        let n_src = src_map.len();
        let n_dst = dst_map.len();
        let mut events: Vec<Event> = raw
            .into_iter()
            .map(|ev| Event {
                src: src_map[&ev.src],
                dst: n_src + dst_map[&ev.dst],
                t: ev.t,
                label: ev.label,
                features: ev.features,
            })
            .collect();
        events.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite timestamps"));
        Ok(EventLog {
            events,
            n_src,
            n_dst,
            feat_dim,
        })
    }

    /// Wraps events that already use dense ids: sources `0..n_src`,
    /// destinations `n_src..n_src + n_dst`, timestamps already non-decreasing
    /// with a uniform feature width.
    pub fn from_dense(events: Vec<Event>, n_src: usize, n_dst: usize) -> Result<EventLog> {
        if events.is_empty() {
            return Err(Error::usage("event log holds no events"));
        }
        let feat_dim = events[0].features.len();
        let mut prev_t = f64::NEG_INFINITY;
        for ev in &events {
            if ev.src >= n_src || !(n_src..n_src + n_dst).contains(&ev.dst) {
                return Err(Error::usage(format!(
                    "event ({}, {}) outside dense id ranges {n_src}/{n_dst}",
                    ev.src, ev.dst
                )));
            }
            if !ev.t.is_finite() || ev.t < prev_t {
                return Err(Error::usage(format!("timestamp {} breaks event order", ev.t)));
            }
            if ev.features.len() != feat_dim {
                return Err(Error::usage(format!(
                    "feature width {} differs from {} in the same log",
                    ev.features.len(),
                    feat_dim
                )));
            }
            prev_t = ev.t;
        }
        Ok(EventLog {
            events,
            n_src,
            n_dst,
            feat_dim,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    pub fn num_nodes(&self) -> usize {
        self.n_src + self.n_dst
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// The dense id range holding destination nodes.
    pub fn dst_range(&self) -> Range<usize> {
        self.n_src..self.n_src + self.n_dst
    }

    /// 70/15/15 chronological split over event positions.
    pub fn chronological_split(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let n = self.events.len();
        let a = n * 70 / 100;
        let b = n * 85 / 100;
        (0..a, a..b, b..n)
    }

    /// Consecutive event batches over `range`; the final batch may be short.
    pub fn batches(&self, range: Range<usize>, batch_size: usize) -> impl Iterator<Item = &[Event]> {
        self.events[range].chunks(batch_size.max(1))
    }
}

/// Reads an interaction CSV. `has_header` skips the first line. The feature
/// width is taken from the first data row; later rows must match it.
pub fn load_events(path: &Path, has_header: bool) -> Result<EventLog> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let reader = BufReader::new(file);
    let mut raw = Vec::new();
    let mut feat_dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if i == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::format(
                line_no,
                format!("expected src,dst,timestamp,label,features; got {} fields", fields.len()),
            ));
        }
        let parse_num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::format(line_no, format!("cannot parse {what} from {s:?}"))
            })
        };
        let src = parse_num(fields[0], "source id")? as u64;
        let dst = parse_num(fields[1], "destination id")? as u64;
        let t = parse_num(fields[2], "timestamp")?;
        if !t.is_finite() {
            return Err(Error::format(line_no, format!("non-finite timestamp {t}")));
        }
        let label_field = fields[3].trim();
        let label = if label_field.is_empty() {
            None
        } else {
            let v = parse_num(label_field, "state label")?;
            Some(v as u8)
        };
        let features: Vec<f32> = fields[4..]
            .iter()
            .map(|s| parse_num(s, "feature").map(|v| v as f32))
            .collect::<Result<_>>()?;
        match feat_dim {
            None => feat_dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::format(
                    line_no,
                    format!("row has {} features, expected {d}", features.len()),
                ));
            }
            _ => {}
        }
        raw.push(RawEvent {
            src,
            dst,
            t,
            label,
            features,
        });
    }
    if raw.is_empty() {
        return Err(Error::format(0, "file contains no events".to_string()));
    }
    EventLog::from_raw(raw)
}
