//! Per-node, per-second traffic counters and the summaries derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::MessageKind;
use crate::scalar::Scalar;
use crate::topology::NodeId;

/// Width of one metrics bucket in simulated milliseconds.
pub const BUCKET_MS: u64 = 1000;

pub const CSV_HEADER: &str = "node,second,kind,direction,messages,bytes,excluded";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no buckets outside the warmup window")]
    EmptyWindow,
    #[error("flood average is zero; savings undefined")]
    ZeroBaseline,
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::Out => "out",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Direction::In),
            "out" => Ok(Direction::Out),
            _ => Err(format!("unknown direction {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub messages: u64,
    pub bytes: u64,
}

/// Bucket coordinates: node, second, kind, direction.
pub type BucketKey = (NodeId, u64, MessageKind, Direction);

/// Identification of the run that produced a log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub meta: Option<RunMeta>,
    pub warmup_ms: u64,
    /// Simulated run length. When absent, the averaging window is the set of
    /// seconds that carry data.
    pub duration_ms: Option<u64>,
    buckets: BTreeMap<BucketKey, Counter>,
    duplicates: BTreeMap<(NodeId, MessageKind), u64>,
}

impl MetricsLog {
    pub fn new(warmup_ms: u64, duration_ms: Option<u64>) -> Self {
        MetricsLog {
            warmup_ms,
            duration_ms,
            ..MetricsLog::default()
        }
    }

    /// Adds one message of `bytes` size to a bucket.
    pub fn record(
        &mut self,
        node: NodeId,
        at_ms: u64,
        kind: MessageKind,
        dir: Direction,
        bytes: u32,
    ) {
        let c = self
            .buckets
            .entry((node, at_ms / BUCKET_MS, kind, dir))
            .or_default();
        c.messages += 1;
        c.bytes += u64::from(bytes);
    }

    /// Sets a bucket outright. Meant for constructing logs by hand.
    pub fn set(&mut self, key: BucketKey, counter: Counter) {
        self.buckets.insert(key, counter);
    }

    pub fn record_duplicate(&mut self, node: NodeId, kind: MessageKind) {
        *self.duplicates.entry((node, kind)).or_default() += 1;
    }

    pub fn buckets(&self) -> impl Iterator<Item = (&BucketKey, &Counter)> {
        self.buckets.iter()
    }

    pub fn get(&self, key: &BucketKey) -> Counter {
        self.buckets.get(key).copied().unwrap_or_default()
    }

    pub fn duplicates(&self) -> impl Iterator<Item = (&(NodeId, MessageKind), &u64)> {
        self.duplicates.iter()
    }

    pub fn total_duplicates(&self) -> u64 {
        self.duplicates.values().sum()
    }

    pub fn is_excluded(&self, second: u64) -> bool {
        second * BUCKET_MS < self.warmup_ms
    }

    /// Seconds that averages are taken over.
    pub fn window(&self) -> BTreeSet<u64> {
        match self.duration_ms {
            Some(d) => (0..d.div_ceil(BUCKET_MS))
                .filter(|&s| !self.is_excluded(s))
                .collect(),
            None => self
                .buckets
                .keys()
                .map(|&(_, s, _, _)| s)
                .filter(|&s| !self.is_excluded(s))
                .collect(),
        }
    }

    /// Network-wide message count per second, per direction, for the chosen kinds.
    pub fn per_second_totals(&self, kinds: &[MessageKind]) -> BTreeMap<u64, (u64, u64)> {
        let mut out: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        if let Some(d) = self.duration_ms {
            for s in 0..d.div_ceil(BUCKET_MS) {
                out.insert(s, (0, 0));
            }
        }
        for (&(_, s, k, dir), c) in &self.buckets {
            if !kinds.contains(&k) {
                continue;
            }
            let e = out.entry(s).or_default();
            match dir {
                Direction::In => e.0 += c.messages,
                Direction::Out => e.1 += c.messages,
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRate {
    #[serde(rename = "in")]
    pub inbound: f64,
    #[serde(rename = "out")]
    pub outbound: f64,
}

/// Per-second averages over the non-warmup window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub window_seconds: u64,
    /// Application messages, in + out, summed over all nodes.
    pub avg_total_msgs_per_sec: f64,
    pub avg_in_msgs_per_sec: f64,
    pub avg_out_msgs_per_sec: f64,
    pub avg_by_kind: BTreeMap<MessageKind, DirectionalRate>,
    /// Squelch and unsquelch traffic, in + out.
    pub avg_control_msgs_per_sec: f64,
    /// Application plus control traffic.
    pub avg_combined_msgs_per_sec: f64,
    pub total_duplicates: u64,
    /// Control transmissions inside the window.
    pub control_overhead_msgs: u64,
}

impl RunSummary {
    /// The rate savings are computed on.
    pub fn headline_rate(&self, include_control: bool) -> f64 {
        if include_control {
            self.avg_combined_msgs_per_sec
        } else {
            self.avg_total_msgs_per_sec
        }
    }
}

pub fn summarize(log: &MetricsLog) -> Result<RunSummary, MetricsError> {
    let window = log.window();
    if window.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    let mut sums: BTreeMap<(MessageKind, Direction), u64> = BTreeMap::new();
    for (&(_, s, k, d), c) in log.buckets() {
        if window.contains(&s) {
            *sums.entry((k, d)).or_default() += c.messages;
        }
    }
    let n = window.len() as f64;
    let avg = |k, d| sums.get(&(k, d)).copied().unwrap_or(0) as f64 / n;

    let mut avg_by_kind = BTreeMap::new();
    for k in MessageKind::ALL {
        avg_by_kind.insert(
            k,
            DirectionalRate {
                inbound: avg(k, Direction::In),
                outbound: avg(k, Direction::Out),
            },
        );
    }
    // Totals are folds over the per-kind averages in a fixed order, so the
    // identity total == sum of parts holds bit-for-bit.
    let fold = |kinds: &[MessageKind], dirs: &[Direction]| {
        let mut acc = 0.0;
        for k in kinds {
            let r = avg_by_kind[k];
            for d in dirs {
                acc += match d {
                    Direction::In => r.inbound,
                    Direction::Out => r.outbound,
                };
            }
        }
        acc
    };
    let both = [Direction::In, Direction::Out];
    let control = [MessageKind::Squelch, MessageKind::Unsquelch];
    let avg_total = fold(&MessageKind::APPLICATION, &both);
    let avg_control = fold(&control, &both);
    let control_overhead_msgs = control
        .iter()
        .map(|&k| sums.get(&(k, Direction::Out)).copied().unwrap_or(0))
        .sum();

    Ok(RunSummary {
        window_seconds: window.len() as u64,
        avg_total_msgs_per_sec: avg_total,
        avg_in_msgs_per_sec: fold(&MessageKind::APPLICATION, &[Direction::In]),
        avg_out_msgs_per_sec: fold(&MessageKind::APPLICATION, &[Direction::Out]),
        avg_by_kind,
        avg_control_msgs_per_sec: avg_control,
        avg_combined_msgs_per_sec: avg_total + avg_control,
        total_duplicates: log.total_duplicates(),
        control_overhead_msgs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport<T> {
    pub ratio_percent: T,
    pub saved_percent: T,
}

/// `ratio = 100 * squelch / flood`, `saved = 100 - ratio`.
pub fn savings_from_rates<T: Scalar>(
    flood: T,
    squelch: T,
) -> Result<SavingsReport<T>, MetricsError> {
    if flood.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(MetricsError::ZeroBaseline);
    }
    let ratio_percent = T::hundred() * (squelch / flood);
    Ok(SavingsReport {
        ratio_percent,
        saved_percent: T::hundred() - ratio_percent,
    })
}

/// Savings of the squelch arm over the flood arm, on application traffic
/// alone or with control messages added.
pub fn savings(
    flood: &RunSummary,
    squelch: &RunSummary,
    include_control: bool,
) -> Result<SavingsReport<f64>, MetricsError> {
    savings_from_rates(
        flood.headline_rate(include_control),
        squelch.headline_rate(include_control),
    )
}

/// Writes the log as CSV. Run metadata and duplicate counters, when present,
/// precede the header as `#` lines.
pub fn export_csv(log: &MetricsLog) -> String {
    let mut out = String::new();
    if let Some(m) = &log.meta {
        out.push_str(&format!("# policy={}\n", m.policy));
        out.push_str(&format!("# seed={}\n", m.seed));
        out.push_str(&format!("# config_hash={}\n", m.config_hash));
        out.push_str(&format!("# tool_version={}\n", m.tool_version));
    }
    if log.warmup_ms != 0 {
        out.push_str(&format!("# warmup_ms={}\n", log.warmup_ms));
    }
    if let Some(d) = log.duration_ms {
        out.push_str(&format!("# duration_ms={d}\n"));
    }
    for (&(node, kind), &count) in &log.duplicates {
        out.push_str(&format!("# duplicates={node}:{kind}:{count}\n"));
    }

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))
        .expect("in-memory csv write");
    let cells: BTreeSet<(NodeId, u64, MessageKind)> =
        log.buckets.keys().map(|&(n, s, k, _)| (n, s, k)).collect();
    for (node, second, kind) in cells {
        for dir in [Direction::In, Direction::Out] {
            let c = log.get(&(node, second, kind, dir));
            w.write_record([
                node.to_string(),
                second.to_string(),
                kind.to_string(),
                dir.to_string(),
                c.messages.to_string(),
                c.bytes.to_string(),
                log.is_excluded(second).to_string(),
            ])
            .expect("in-memory csv write");
        }
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("ascii csv"));
    out
}

/// Parses the output of [`export_csv`].
pub fn import_csv(text: &str) -> Result<MetricsLog, MetricsError> {
    let err = |line: usize, reason: String| MetricsError::Csv { line, reason };
    let mut log = MetricsLog::default();
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut body_start = 0;
    let mut line_no = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end();
        let Some(comment) = trimmed.strip_prefix('#') else {
            break;
        };
        line_no += 1;
        body_start += line.len();
        let (key, value) = comment
            .trim()
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("malformed metadata {trimmed:?}")))?;
        match key {
            "warmup_ms" => {
                log.warmup_ms = value.parse().map_err(|e| err(line_no, format!("{e}")))?
            }
            "duration_ms" => {
                log.duration_ms = Some(value.parse().map_err(|e| err(line_no, format!("{e}")))?)
            }
            "duplicates" => {
                let parts: Vec<&str> = value.split(':').collect();
                let [node, kind, count] = parts[..] else {
                    return Err(err(line_no, format!("malformed duplicates {value:?}")));
                };
                let node: NodeId = node.parse().map_err(|e| err(line_no, format!("{e}")))?;
                let kind: MessageKind = kind.parse().map_err(|e| err(line_no, e))?;
                let count: u64 = count.parse().map_err(|e| err(line_no, format!("{e}")))?;
                log.duplicates.insert((node, kind), count);
            }
            _ => {
                meta.insert(key.to_owned(), value.to_owned());
            }
        }
    }
    if !meta.is_empty() {
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| err(0, format!("missing metadata {k}")))
        };
        log.meta = Some(RunMeta {
            policy: get("policy")?,
            seed: get("seed")?.parse().map_err(|e| err(0, format!("{e}")))?,
            config_hash: get("config_hash")?,
            tool_version: get("tool_version")?,
        });
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(&text.as_bytes()[body_start..]);
    let header = rdr.headers().map_err(|e| err(line_no + 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(err(line_no + 1, format!("unexpected header {header:?}")));
    }
    for (i, rec) in rdr.records().enumerate() {
        let line = line_no + 2 + i;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != 7 {
            return Err(err(line, format!("expected 7 fields, got {}", rec.len())));
        }
        let node: NodeId = rec[0]
            .parse()
            .map_err(|e| err(line, format!("node: {e}")))?;
        let second: u64 = rec[1]
            .parse()
            .map_err(|e| err(line, format!("second: {e}")))?;
        let kind: MessageKind = rec[2].parse().map_err(|e| err(line, e))?;
        let dir: Direction = rec[3].parse().map_err(|e| err(line, e))?;
        let messages: u64 = rec[4]
            .parse()
            .map_err(|e| err(line, format!("messages: {e}")))?;
        let bytes: u64 = rec[5]
            .parse()
            .map_err(|e| err(line, format!("bytes: {e}")))?;
        log.buckets
            .insert((node, second, kind, dir), Counter { messages, bytes });
    }
    Ok(log)
}
