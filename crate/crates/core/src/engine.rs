//! Discrete-event execution of a dissemination scenario.
//!
//! Validators emit proposals and a validation every ledger round, site nodes
//! submit transaction bursts, and every node relays the first copy of each
//! message it sees. Under [`RelayPolicy::Squelch`] each node also runs the
//! squelch state machine and exchanges control messages with its peers.
//!
//! Events run in `(at, seq)` order, where `seq` is the order in which they were
//! scheduled, so a given config and seed always produces the same log.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{DedupKey, MessageKind, MessageSizes, SimMessage};
use crate::metrics::{Counter, Direction, MetricsLog, RunMeta, BUCKET_MS};
use crate::squelch::{Action, ControlKind, ControlMessage, NodeRelayState, ProtocolConfig, TimeMs};
use crate::topology::{NodeId, TopologyGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("topology is not connected")]
    Disconnected,
    #[error("invalid scenario: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayPolicy {
    Flood,
    Squelch,
}

impl fmt::Display for RelayPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayPolicy::Flood => "flood",
            RelayPolicy::Squelch => "squelch",
        })
    }
}

/// `count` transactions submitted by the nodes of one site at `rate_per_sec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxBurst {
    pub start_ms: u64,
    pub group: usize,
    pub count: u32,
    pub rate_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disconnect {
    pub at_ms: u64,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub duration_ms: u64,
    pub warmup_ms: u64,
    pub relay_policy: RelayPolicy,
    pub ledger_round_ms: u64,
    /// Proposals each validator emits per ledger round, before its validation.
    pub proposals_per_round: u32,
    /// Nodes are split into this many contiguous sites; bursts target a site.
    pub sites: usize,
    pub tx_plan: Vec<TxBurst>,
    pub protocol: ProtocolConfig,
    pub seed: u64,
    pub message_sizes: MessageSizes,
    pub disconnects: Vec<Disconnect>,
    /// Digest of the document this config came from, copied into the log.
    pub config_hash: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_ms: 120_000,
            warmup_ms: 10_000,
            relay_policy: RelayPolicy::Flood,
            ledger_round_ms: 1000,
            proposals_per_round: 1,
            sites: 1,
            tx_plan: Vec::new(),
            protocol: ProtocolConfig::default(),
            seed: 0,
            message_sizes: MessageSizes::default(),
            disconnects: Vec::new(),
            config_hash: String::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, graph: &TopologyGraph) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.duration_ms <= self.warmup_ms {
            return bad(format!(
                "duration_ms ({}) must exceed warmup_ms ({})",
                self.duration_ms, self.warmup_ms
            ));
        }
        if self.ledger_round_ms == 0 {
            return bad("ledger_round_ms must be positive".into());
        }
        if self.sites == 0 || self.sites > graph.node_count() {
            return bad(format!(
                "sites must be in 1..={}, got {}",
                graph.node_count(),
                self.sites
            ));
        }
        for b in &self.tx_plan {
            if b.group >= self.sites {
                return bad(format!(
                    "tx burst targets site {} of {}",
                    b.group, self.sites
                ));
            }
            if !(b.rate_per_sec > 0.0 && b.rate_per_sec.is_finite()) {
                return bad(format!(
                    "tx burst rate must be positive, got {}",
                    b.rate_per_sec
                ));
            }
        }
        for d in &self.disconnects {
            if d.node as usize >= graph.node_count() {
                return bad(format!("disconnect of unknown node {}", d.node));
            }
        }
        for k in MessageKind::ALL {
            if self.message_sizes.of(k) == 0 {
                return bad(format!("message size for {k} must be positive"));
            }
        }
        self.protocol
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        if !graph.is_connected() {
            return Err(EngineError::Disconnected);
        }
        Ok(())
    }

    /// Members of site `group`: a contiguous block of node ids.
    pub fn site_members(&self, graph: &TopologyGraph, group: usize) -> Vec<NodeId> {
        let n = graph.node_count();
        (0..n as NodeId)
            .filter(|&i| i as usize * self.sites / n == group)
            .collect()
    }
}

/// Every neighbor except the one the message came from.
pub fn relay_decision_flood(neighbors: &[NodeId], arrived_from: Option<NodeId>) -> Vec<NodeId> {
    neighbors
        .iter()
        .copied()
        .filter(|&p| Some(p) != arrived_from)
        .collect()
}

/// The flood set minus peers that squelched `msg.origin`. Kinds outside
/// `cfg.squelch_kinds` always get the full flood set.
pub fn relay_decision_squelch(
    state: &NodeRelayState,
    neighbors: &[NodeId],
    msg: &SimMessage,
    arrived_from: Option<NodeId>,
    now: TimeMs,
    cfg: &ProtocolConfig,
) -> Vec<NodeId> {
    let flood = relay_decision_flood(neighbors, arrived_from);
    if !cfg.squelches(msg.kind) {
        return flood;
    }
    flood
        .into_iter()
        .filter(|&p| state.should_relay(p, msg.origin, now))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Deliver {
        msg: SimMessage,
        from: NodeId,
        to: NodeId,
    },
    Control {
        msg: ControlMessage,
        from: NodeId,
        to: NodeId,
    },
    EmitRound(NodeId),
    Originate {
        node: NodeId,
        kind: MessageKind,
    },
    SquelchExpiry {
        node: NodeId,
        validator: NodeId,
        peer: NodeId,
        expiry: TimeMs,
    },
    PeerDisconnect(NodeId),
}

#[derive(Debug)]
struct Event {
    at: TimeMs,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Per-message delivery record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageTrace {
    pub originated_at: TimeMs,
    /// Nodes holding the message, origin included.
    pub reached: u32,
    pub transmissions: u64,
    pub duplicates: u64,
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: MetricsLog,
    pub traces: BTreeMap<DedupKey, MessageTrace>,
    pub events_processed: u64,
    pub warnings: Vec<String>,
}

impl SimOutcome {
    pub fn application_transmissions(&self) -> u64 {
        self.traces.values().map(|t| t.transmissions).sum()
    }
}

struct NodeState {
    up: bool,
    neighbors: BTreeSet<NodeId>,
    /// Messages held, with the time each was first received.
    seen: FxHashMap<DedupKey, TimeMs>,
    relay: NodeRelayState,
}

/// Dense (node, second, kind, direction) counters, folded into the log
/// when the run ends.
struct Tally {
    seconds: usize,
    cells: Vec<Counter>,
}

const KINDS: usize = MessageKind::ALL.len();

impl Tally {
    fn new(nodes: usize, duration_ms: TimeMs) -> Self {
        let seconds = duration_ms.div_ceil(BUCKET_MS) as usize;
        Tally {
            seconds,
            cells: vec![Counter::default(); nodes * seconds * KINDS * 2],
        }
    }

    fn add(&mut self, node: NodeId, at: TimeMs, kind: MessageKind, dir: Direction, bytes: u32) {
        let sec = (at / BUCKET_MS) as usize;
        let i = ((node as usize * self.seconds + sec) * KINDS + kind as usize) * 2 + dir as usize;
        let c = &mut self.cells[i];
        c.messages += 1;
        c.bytes += u64::from(bytes);
    }

    fn fold_into(self, log: &mut MetricsLog) {
        let per_node = self.seconds * KINDS * 2;
        for (i, c) in self.cells.into_iter().enumerate() {
            if c.messages == 0 {
                continue;
            }
            let node = (i / per_node) as NodeId;
            let sec = (i % per_node) / (KINDS * 2);
            let kind = MessageKind::ALL[(i / 2) % KINDS];
            let dir = if i % 2 == 0 {
                Direction::In
            } else {
                Direction::Out
            };
            log.set((node, sec as u64, kind, dir), c);
        }
    }
}

/// One scenario in flight.
pub struct Simulation<'a> {
    graph: &'a TopologyGraph,
    cfg: &'a ScenarioConfig,
    now: TimeMs,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: Vec<NodeState>,
    sequences: BTreeMap<(NodeId, MessageKind), u64>,
    log: MetricsLog,
    tally: Tally,
    traces: FxHashMap<DedupKey, MessageTrace>,
    events_processed: u64,
    warnings: Vec<String>,
}

fn link_delay(latency_ms: f64) -> TimeMs {
    (latency_ms.round() as TimeMs).max(1)
}

impl<'a> Simulation<'a> {
    pub fn new(graph: &'a TopologyGraph, cfg: &'a ScenarioConfig) -> Result<Self, EngineError> {
        cfg.validate(graph)?;
        let nodes = (0..graph.node_count() as NodeId)
            .map(|n| NodeState {
                up: true,
                neighbors: graph.neighbors(n).iter().copied().collect(),
                seen: FxHashMap::default(),
                relay: NodeRelayState::new(n, graph.neighbors(n).iter().copied()),
            })
            .collect();
        let mut log = MetricsLog::new(cfg.warmup_ms, Some(cfg.duration_ms));
        log.meta = Some(RunMeta {
            policy: cfg.relay_policy.to_string(),
            seed: cfg.seed,
            config_hash: cfg.config_hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        });
        let mut sim = Simulation {
            graph,
            cfg,
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            sequences: BTreeMap::new(),
            log,
            tally: Tally::new(graph.node_count(), cfg.duration_ms),
            traces: FxHashMap::default(),
            events_processed: 0,
            warnings: Vec::new(),
        };
        sim.schedule_initial();
        Ok(sim)
    }

    fn schedule(&mut self, at: TimeMs, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event { at, seq, kind }));
    }

    fn schedule_initial(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let round = self.cfg.ledger_round_ms;
        let validators: Vec<NodeId> = self.graph.validators().iter().copied().collect();
        for v in validators {
            let phase = rng.gen_range(0..round);
            self.schedule(phase, EventKind::EmitRound(v));
        }
        for b in &self.cfg.tx_plan {
            let members = self.cfg.site_members(self.graph, b.group);
            let trackers: Vec<NodeId> = members
                .iter()
                .copied()
                .filter(|&n| !self.graph.is_validator(n))
                .collect();
            let submitters = if trackers.is_empty() {
                members
            } else {
                trackers
            };
            let spacing = 1000.0 / b.rate_per_sec;
            for i in 0..b.count {
                let at = b.start_ms + (f64::from(i) * spacing) as TimeMs;
                let node = submitters[i as usize % submitters.len()];
                self.schedule(
                    at,
                    EventKind::Originate {
                        node,
                        kind: MessageKind::Transaction,
                    },
                );
            }
        }
        for d in &self.cfg.disconnects {
            self.schedule(d.at_ms, EventKind::PeerDisconnect(d.node));
        }
    }

    /// Runs until the queue is empty or the next event is at or past `duration_ms`.
    pub fn run(mut self) -> SimOutcome {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.at >= self.cfg.duration_ms {
                break;
            }
            self.now = ev.at;
            self.events_processed += 1;
            self.handle(ev.kind);
        }
        if self.queue.is_empty() && self.events_processed == 0 {
            self.warnings
                .push("event queue empty before duration: nothing to disseminate".into());
        }
        self.tally.fold_into(&mut self.log);
        SimOutcome {
            log: self.log,
            traces: self.traces.into_iter().collect(),
            events_processed: self.events_processed,
            warnings: self.warnings,
        }
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::EmitRound(v) => self.emit_round(v),
            EventKind::Originate { node, kind } => self.originate(node, kind),
            EventKind::Deliver { msg, from, to } => self.deliver(msg, from, to),
            EventKind::Control { msg, from, to } => self.deliver_control(msg, from, to),
            EventKind::SquelchExpiry {
                node,
                validator,
                peer,
                expiry,
            } => {
                let st = &mut self.nodes[node as usize];
                let live = st
                    .relay
                    .slot(validator)
                    .and_then(|s| s.squelched().get(&peer))
                    == Some(&expiry);
                if live {
                    st.relay
                        .on_squelch_expired(validator, peer, self.now)
                        .expect("expiry event fires at its recorded expiry");
                }
            }
            EventKind::PeerDisconnect(n) => self.disconnect(n),
        }
    }

    fn emit_round(&mut self, v: NodeId) {
        if !self.nodes[v as usize].up {
            return;
        }
        let round = self.cfg.ledger_round_ms;
        let steps = u64::from(self.cfg.proposals_per_round) + 1;
        for j in 0..steps {
            let kind = if j + 1 == steps {
                MessageKind::Validation
            } else {
                MessageKind::Proposal
            };
            self.schedule(
                self.now + j * round / steps,
                EventKind::Originate { node: v, kind },
            );
        }
        self.schedule(self.now + round, EventKind::EmitRound(v));
    }

    fn originate(&mut self, node: NodeId, kind: MessageKind) {
        if !self.nodes[node as usize].up {
            return;
        }
        let seq = self.sequences.entry((node, kind)).or_insert(0);
        let msg = SimMessage {
            kind,
            origin: node,
            sequence: *seq,
            size_bytes: self.cfg.message_sizes.of(kind),
        };
        *seq += 1;
        let key = msg.dedup_key();
        self.nodes[node as usize].seen.insert(key, self.now);
        self.traces.insert(
            key,
            MessageTrace {
                originated_at: self.now,
                reached: 1,
                ..MessageTrace::default()
            },
        );
        self.relay(node, msg, None);
    }

    fn relay(&mut self, node: NodeId, msg: SimMessage, arrived_from: Option<NodeId>) {
        let st = &self.nodes[node as usize];
        let neighbors: Vec<NodeId> = st.neighbors.iter().copied().collect();
        let targets = match self.cfg.relay_policy {
            RelayPolicy::Flood => relay_decision_flood(&neighbors, arrived_from),
            RelayPolicy::Squelch => relay_decision_squelch(
                &st.relay,
                &neighbors,
                &msg,
                arrived_from,
                self.now,
                &self.cfg.protocol,
            ),
        };
        for to in targets {
            let delay = link_delay(self.graph.latency(node, to).expect("neighbor edge"));
            self.schedule(
                self.now + delay,
                EventKind::Deliver {
                    msg,
                    from: node,
                    to,
                },
            );
        }
    }

    fn link_up(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a as usize].up
            && self.nodes[b as usize].up
            && self.nodes[a as usize].neighbors.contains(&b)
    }

    fn deliver(&mut self, msg: SimMessage, from: NodeId, to: NodeId) {
        if !self.link_up(from, to) {
            return;
        }
        self.tally
            .add(from, self.now, msg.kind, Direction::Out, msg.size_bytes);
        self.tally
            .add(to, self.now, msg.kind, Direction::In, msg.size_bytes);
        let key = msg.dedup_key();
        self.traces
            .get_mut(&key)
            .expect("traced at origination")
            .transmissions += 1;

        let first_seen = self.nodes[to as usize].seen.get(&key).copied();
        if self.cfg.relay_policy == RelayPolicy::Squelch && self.cfg.protocol.squelches(msg.kind) {
            let actions = self.nodes[to as usize].relay.on_relayed_copy(
                msg.origin,
                from,
                first_seen.unwrap_or(self.now),
                self.now,
                &self.cfg.protocol,
            );
            self.send_control(to, actions);
        }

        let trace = self.traces.get_mut(&key).expect("traced at origination");
        if first_seen.is_some() {
            trace.duplicates += 1;
            self.log.record_duplicate(to, msg.kind);
            return;
        }
        trace.reached += 1;
        self.nodes[to as usize].seen.insert(key, self.now);
        self.relay(to, msg, Some(from));
    }

    fn send_control(&mut self, node: NodeId, actions: Vec<Action>) {
        for (peer, msg) in actions {
            if !self.link_up(node, peer) {
                continue;
            }
            if msg.kind() == ControlKind::Squelch {
                self.schedule(
                    self.now + msg.duration_ms(),
                    EventKind::SquelchExpiry {
                        node,
                        validator: msg.origin_validator(),
                        peer,
                        expiry: self.now + msg.duration_ms(),
                    },
                );
            }
            let delay = link_delay(self.graph.latency(node, peer).expect("neighbor edge"));
            self.schedule(
                self.now + delay,
                EventKind::Control {
                    msg,
                    from: node,
                    to: peer,
                },
            );
        }
    }

    fn deliver_control(&mut self, msg: ControlMessage, from: NodeId, to: NodeId) {
        if !self.link_up(from, to) {
            return;
        }
        let size = self.cfg.message_sizes.of(msg.message_kind());
        self.tally
            .add(from, self.now, msg.message_kind(), Direction::Out, size);
        self.tally
            .add(to, self.now, msg.message_kind(), Direction::In, size);
        self.nodes[to as usize]
            .relay
            .on_control(from, &msg, self.now);
    }

    fn disconnect(&mut self, n: NodeId) {
        if !self.nodes[n as usize].up {
            return;
        }
        let peers: Vec<NodeId> = self.nodes[n as usize].neighbors.iter().copied().collect();
        let st = &mut self.nodes[n as usize];
        st.up = false;
        st.neighbors.clear();
        st.relay = NodeRelayState::new(n, []);
        for p in peers {
            self.nodes[p as usize].neighbors.remove(&n);
            let actions = self.nodes[p as usize].relay.on_uplink_lost(n, self.now);
            if self.cfg.relay_policy == RelayPolicy::Squelch {
                self.send_control(p, actions);
            }
        }
    }
}

/// Runs `cfg` over `graph` to completion.
pub fn run_scenario(
    graph: &TopologyGraph,
    cfg: &ScenarioConfig,
) -> Result<SimOutcome, EngineError> {
    Ok(Simulation::new(graph, cfg)?.run())
}
