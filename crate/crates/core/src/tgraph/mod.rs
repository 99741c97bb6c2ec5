//! Temporal graph storage: chronological events, per-node histories, node
//! features, and the train/test split.

mod negative;
mod synth;

pub use negative::NegativeSampler;
pub use synth::{synth_hawkes_graph, SynthParams};

use std::collections::HashSet;
use std::io::BufRead;

use log::warn;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Formation of an undirected link between `src` and `dst` at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub time: f64,
}

impl Event {
    pub fn new(src: NodeId, dst: NodeId, time: f64) -> Self {
        Self { src, dst, time }
    }
}

/// Affine map from raw timestamps to model time; the training range maps
/// onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    pub origin: f64,
    pub span: f64,
}

impl TimeScale {
    pub fn identity() -> Self {
        Self {
            origin: 0.0,
            span: 1.0,
        }
    }

    pub fn over(min: f64, max: f64) -> Self {
        let span = max - min;
        Self {
            origin: min,
            span: if span > 0.0 { span } else { 1.0 },
        }
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.origin) / self.span
    }

    /// A raw time difference expressed in model time units.
    pub fn interval(&self, dt: f64) -> f64 {
        dt / self.span
    }
}

/// Dense `n × dim` node feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::dim(format!(
                "feature matrix {rows}x{dim} given {} values",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn one_hot(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { dim: n, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, node: NodeId) -> Option<&[f64]> {
        (node < self.rows()).then(|| &self.data[node * self.dim..(node + 1) * self.dim])
    }

    /// Parses "node_id v1 ... vd" rows. Nodes without a row get zeros.
    pub fn parse(reader: impl BufRead, min_rows: usize) -> Result<Self> {
        let mut rows: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let mut dim = None;
        for (n, line) in reader.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = parse_node(fields.next().unwrap_or(""), lineno)?;
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            message: format!("invalid feature value {f:?}"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("expected {d} feature values, found {}", values.len()),
                    })
                }
                _ => {}
            }
            rows.push((id, values));
        }
        let dim = dim.unwrap_or(0);
        let n = rows
            .iter()
            .map(|(id, _)| id + 1)
            .max()
            .unwrap_or(0)
            .max(min_rows);
        let mut data = vec![0.0; n * dim];
        for (id, v) in rows {
            data[id * dim..(id + 1) * dim].copy_from_slice(&v);
        }
        Ok(Self { dim, data })
    }

    fn grow(&mut self, rows: usize) {
        if rows > self.rows() {
            self.data.resize(rows * self.dim, 0.0);
        }
    }
}

fn parse_node(field: &str, line: usize) -> Result<NodeId> {
    field.parse::<NodeId>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid node id {field:?}"),
    })
}

/// Immutable, chronologically indexed temporal graph.
#[derive(Debug, Clone)]
pub struct EventStore {
    events: Vec<Event>,
    history: Vec<Vec<(NodeId, f64)>>,
    degrees: Vec<usize>,
    features: Features,
    time_scale: TimeScale,
    observed: HashSet<(NodeId, NodeId, u64)>,
    skipped_self_loops: usize,
}

fn pair_key(a: NodeId, b: NodeId, t: f64) -> (NodeId, NodeId, u64) {
    (a.min(b), a.max(b), t.to_bits())
}

impl EventStore {
    /// Builds a store from events in input order. Self-loops are dropped and
    /// counted; features default to one-hot node ids.
    pub fn from_events(events: Vec<Event>, features: Option<Features>) -> Result<Self> {
        let scale = match (
            events.iter().map(|e| e.time).reduce(f64::min),
            events.iter().map(|e| e.time).reduce(f64::max),
        ) {
            (Some(lo), Some(hi)) => TimeScale::over(lo, hi),
            _ => TimeScale::identity(),
        };
        Self::build(events, features, scale)
    }

    fn build(events: Vec<Event>, features: Option<Features>, time_scale: TimeScale) -> Result<Self> {
        let mut skipped = 0;
        let mut kept = Vec::with_capacity(events.len());
        for e in events {
            if !(e.time.is_finite() && e.time >= 0.0) {
                return Err(Error::Contract(format!("invalid event time {}", e.time)));
            }
            if e.src == e.dst {
                skipped += 1;
            } else {
                kept.push(e);
            }
        }
        if skipped > 0 {
            warn!("skipped {skipped} self-loop events");
        }
        // stable: ties keep input order
        kept.sort_by(|a, b| a.time.total_cmp(&b.time));

        let max_event_node = kept.iter().map(|e| e.src.max(e.dst) + 1).max().unwrap_or(0);
        let features = match features {
            Some(mut f) => {
                f.grow(max_event_node);
                f
            }
            None => Features::one_hot(max_event_node),
        };
        let n = features.rows().max(max_event_node);
        let mut history = vec![Vec::new(); n];
        let mut degrees = vec![0; n];
        let mut observed = HashSet::with_capacity(kept.len());
        for e in &kept {
            history[e.src].push((e.dst, e.time));
            history[e.dst].push((e.src, e.time));
            degrees[e.src] += 1;
            degrees[e.dst] += 1;
            observed.insert(pair_key(e.src, e.dst, e.time));
        }
        Ok(Self {
            events: kept,
            history,
            degrees,
            features,
            time_scale,
            observed,
            skipped_self_loops: skipped,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.degrees.get(node).copied().unwrap_or(0)
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn feature(&self, node: NodeId) -> Result<&[f64]> {
        self.features.row(node).ok_or(Error::MissingFeature(node))
    }

    pub fn time_scale(&self) -> TimeScale {
        self.time_scale
    }

    pub fn skipped_self_loops(&self) -> usize {
        self.skipped_self_loops
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.time, self.events.last()?.time))
    }

    /// Full chronological history of `node`.
    pub fn history(&self, node: NodeId) -> &[(NodeId, f64)] {
        self.history.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The at-most-`limit` most recent history entries strictly before `t`,
    /// oldest first. Unknown nodes have no history.
    pub fn historical_neighbors(&self, node: NodeId, t: f64, limit: usize) -> &[(NodeId, f64)] {
        let h = self.history(node);
        let end = h.partition_point(|(_, s)| *s < t);
        &h[end.saturating_sub(limit)..end]
    }

    /// Number of events on `node` with timestamp exactly `t`.
    pub fn delta_events(&self, node: NodeId, t: f64) -> usize {
        let h = self.history(node);
        h.partition_point(|(_, s)| *s <= t) - h.partition_point(|(_, s)| *s < t)
    }

    /// Number of events on `node` with `|time - t| <= window`.
    pub fn delta_events_within(&self, node: NodeId, t: f64, window: f64) -> usize {
        if window <= 0.0 {
            return self.delta_events(node, t);
        }
        let h = self.history(node);
        h.partition_point(|(_, s)| *s <= t + window) - h.partition_point(|(_, s)| *s < t - window)
    }

    /// Whether a link between `a` and `b` is recorded at exactly `t`.
    pub fn is_observed(&self, a: NodeId, b: NodeId, t: f64) -> bool {
        self.observed.contains(&pair_key(a, b, t))
    }

    /// Events with `time <= t_tr` as a standalone store (time scale fitted
    /// to the training range), and the remaining events for testing.
    pub fn split(&self, t_tr: f64) -> Result<(EventStore, Vec<Event>)> {
        let Some((lo, hi)) = self.time_range() else {
            return Err(Error::DegenerateData("cannot split an empty event store".into()));
        };
        if t_tr < lo {
            return Err(Error::Config(format!(
                "split time {t_tr} precedes the first event at {lo}"
            )));
        }
        if t_tr >= hi {
            warn!("split time {t_tr} is at or beyond the last event ({hi}); test set is empty");
        }
        let cut = self.events.partition_point(|e| e.time <= t_tr);
        let train = self.events[..cut].to_vec();
        let test = self.events[cut..].to_vec();
        let scale = TimeScale::over(lo, train.last().map(|e| e.time).unwrap_or(lo));
        let store = Self::build(train, Some(self.features.clone()), scale)?;
        Ok((store, test))
    }

    /// Split time so that the first `fraction` of events are used for training.
    pub fn split_time_for_fraction(&self, fraction: f64) -> Result<f64> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("split fraction {fraction} not in (0, 1]")));
        }
        if self.events.is_empty() {
            return Err(Error::DegenerateData("cannot split an empty event store".into()));
        }
        let k = ((fraction * self.events.len() as f64).ceil() as usize).clamp(1, self.events.len());
        Ok(self.events[k - 1].time)
    }

    /// A new store with `extra` events added, keeping this store's features
    /// and time scale.
    pub fn with_events(&self, extra: &[Event]) -> Result<EventStore> {
        let mut all = self.events.clone();
        all.extend_from_slice(extra);
        Self::build(all, Some(self.features.clone()), self.time_scale)
    }

    /// The first `n` events (chronologically) with the same features.
    pub fn prefix(&self, n: usize) -> Result<EventStore> {
        Self::from_events(self.events[..n.min(self.events.len())].to_vec(), Some(self.features.clone()))
    }
}

/// Reads "src dst time" lines ('#' comments allowed) and an optional feature
/// file.
pub fn parse_events(events: impl BufRead, features: Option<impl BufRead>) -> Result<EventStore> {
    let mut out = Vec::new();
    for (n, line) in events.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected \"src dst time\", found {} fields", fields.len()),
            });
        }
        let src = parse_node(fields[0], lineno)?;
        let dst = parse_node(fields[1], lineno)?;
        let time: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid timestamp {:?}", fields[2]),
        })?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("timestamp {time} must be finite and non-negative"),
            });
        }
        out.push(Event { src, dst, time });
    }
    let min_rows = out.iter().map(|e| e.src.max(e.dst) + 1).max().unwrap_or(0);
    let features = features.map(|f| Features::parse(f, min_rows)).transpose()?;
    EventStore::from_events(out, features)
}

/// Writes events in the format read by [`parse_events`].
pub fn write_events(mut w: impl std::io::Write, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{} {} {}", e.src, e.dst, e.time)?;
    }
    Ok(())
}

pub fn write_features(mut w: impl std::io::Write, features: &Features) -> std::io::Result<()> {
    for node in 0..features.rows() {
        let row = features.row(node).expect("row in range");
        write!(w, "{node}")?;
        for v in row {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
