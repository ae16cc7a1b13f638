//! Per-node relay suppression.
//!
//! A node keeps one [`Slot`] per origin validator. Every copy of a squelchable
//! message bumps the sending peer's counter in that slot; the first
//! `max_selected` peers to reach `count_threshold` copies become the relayers
//! for that validator and every other peer that relays it is asked to stop for
//! a bounded time. On the other side of each link, [`PeerLinkState`] records
//! which validators a peer asked us not to forward.
//!
//! Nothing here owns a clock: callers pass `now` in simulated milliseconds.
//! A squelch with expiry `e` is active for `now < e`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::MessageKind;
use crate::topology::NodeId;

pub type PeerId = NodeId;
pub type ValidatorId = NodeId;
/// Simulated time in milliseconds.
pub type TimeMs = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("squelch duration must be positive")]
    ZeroDuration,
    #[error("peer {peer} is not squelched in slot for validator {validator}")]
    NotSquelched {
        validator: ValidatorId,
        peer: PeerId,
    },
    #[error("squelch of peer {peer} expires at {expiry}, not yet expired at {now}")]
    NotExpired {
        peer: PeerId,
        expiry: TimeMs,
        now: TimeMs,
    },
    #[error("expected a {expected:?} control message, got {got:?}")]
    WrongKind {
        expected: ControlKind,
        got: ControlKind,
    },
    #[error("invalid protocol config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub count_threshold: u32,
    pub max_selected: usize,
    pub squelch_base_ms: u64,
    pub squelch_jitter_ms: u64,
    pub squelch_kinds: BTreeSet<MessageKind>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            count_threshold: 10,
            max_selected: 3,
            squelch_base_ms: 300_000,
            squelch_jitter_ms: 150_000,
            squelch_kinds: BTreeSet::from([MessageKind::Proposal, MessageKind::Validation]),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.count_threshold == 0 {
            return Err(ProtocolError::Config(
                "count_threshold must be at least 1".into(),
            ));
        }
        if self.max_selected == 0 {
            return Err(ProtocolError::Config(
                "max_selected must be at least 1".into(),
            ));
        }
        if self.squelch_base_ms == 0 {
            return Err(ProtocolError::Config(
                "squelch_base_ms must be positive".into(),
            ));
        }
        if let Some(k) = self.squelch_kinds.iter().find(|k| k.is_control()) {
            return Err(ProtocolError::Config(format!(
                "{k} is not a squelchable kind"
            )));
        }
        Ok(())
    }

    pub fn squelches(&self, kind: MessageKind) -> bool {
        self.squelch_kinds.contains(&kind)
    }

    /// `base + mix(node, peer, round) mod jitter`.
    pub fn squelch_duration(&self, node: NodeId, peer: PeerId, round: u64) -> u64 {
        let jitter = if self.squelch_jitter_ms == 0 {
            0
        } else {
            let h = mix64(mix64(mix64(u64::from(node)) ^ u64::from(peer)) ^ round);
            h % self.squelch_jitter_ms
        };
        self.squelch_base_ms + jitter
    }
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlKind {
    Squelch,
    Unsquelch,
}

/// Peer-to-peer request to stop or resume relaying one validator's messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlMessage {
    kind: ControlKind,
    origin_validator: ValidatorId,
    duration_ms: u64,
}

impl ControlMessage {
    pub fn squelch(origin_validator: ValidatorId, duration_ms: u64) -> Result<Self, ProtocolError> {
        if duration_ms == 0 {
            return Err(ProtocolError::ZeroDuration);
        }
        Ok(ControlMessage {
            kind: ControlKind::Squelch,
            origin_validator,
            duration_ms,
        })
    }

    pub fn unsquelch(origin_validator: ValidatorId) -> Self {
        ControlMessage {
            kind: ControlKind::Unsquelch,
            origin_validator,
            duration_ms: 0,
        }
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn origin_validator(&self) -> ValidatorId {
        self.origin_validator
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms
    }

    pub fn message_kind(&self) -> MessageKind {
        match self.kind {
            ControlKind::Squelch => MessageKind::Squelch,
            ControlKind::Unsquelch => MessageKind::Unsquelch,
        }
    }
}

/// Control message addressed to a direct peer.
pub type Action = (PeerId, ControlMessage);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Counting,
    Selected,
}

/// Relay bookkeeping one node keeps for one origin validator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    owner: NodeId,
    origin_validator: ValidatorId,
    per_peer_count: BTreeMap<PeerId, u32>,
    selected: BTreeSet<PeerId>,
    squelched: BTreeMap<PeerId, TimeMs>,
    state: SlotState,
    /// Completed selections; feeds the squelch jitter.
    round: u64,
    /// Copies that arrived from a peer we had already squelched.
    late_copies: u64,
    /// Start of the current counting round.
    counting_since: TimeMs,
}

impl Slot {
    pub fn new(owner: NodeId, origin_validator: ValidatorId) -> Self {
        Slot {
            owner,
            origin_validator,
            per_peer_count: BTreeMap::new(),
            selected: BTreeSet::new(),
            squelched: BTreeMap::new(),
            state: SlotState::Counting,
            round: 0,
            late_copies: 0,
            counting_since: 0,
        }
    }

    pub fn origin_validator(&self) -> ValidatorId {
        self.origin_validator
    }

    pub fn state(&self) -> SlotState {
        self.state
    }

    pub fn selected(&self) -> &BTreeSet<PeerId> {
        &self.selected
    }

    pub fn squelched(&self) -> &BTreeMap<PeerId, TimeMs> {
        &self.squelched
    }

    pub fn count(&self, peer: PeerId) -> u32 {
        self.per_peer_count.get(&peer).copied().unwrap_or(0)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn late_copies(&self) -> u64 {
        self.late_copies
    }

    pub fn counting_since(&self) -> TimeMs {
        self.counting_since
    }

    fn is_squelched(&self, peer: PeerId, now: TimeMs) -> bool {
        self.squelched.get(&peer).is_some_and(|&e| e > now)
    }

    fn squelch(&mut self, peer: PeerId, now: TimeMs, cfg: &ProtocolConfig) -> Action {
        let duration = cfg.squelch_duration(self.owner, peer, self.round);
        self.squelched.insert(peer, now + duration);
        let msg = ControlMessage::squelch(self.origin_validator, duration)
            .expect("validated config has positive squelch base");
        (peer, msg)
    }

    fn reset(&mut self, now: TimeMs) {
        self.counting_since = now;
        self.per_peer_count.clear();
        self.selected.clear();
        self.state = SlotState::Counting;
    }

    /// Accounts one copy of this validator's message relayed by `from_peer`.
    pub fn on_validator_message(
        &mut self,
        from_peer: PeerId,
        now: TimeMs,
        cfg: &ProtocolConfig,
    ) -> Vec<Action> {
        self.on_relayed_copy(from_peer, now, now, cfg)
    }

    /// Like [`Slot::on_validator_message`], for a copy of a message this node
    /// first saw at `first_seen`. Copies of messages first seen before the
    /// current counting round began are not counted: they were in flight
    /// across the reset and would favour slow peers.
    pub fn on_relayed_copy(
        &mut self,
        from_peer: PeerId,
        first_seen: TimeMs,
        now: TimeMs,
        cfg: &ProtocolConfig,
    ) -> Vec<Action> {
        if let Some(&expiry) = self.squelched.get(&from_peer) {
            if expiry > now {
                self.late_copies += 1;
                return Vec::new();
            }
            // The expiry timer for this peer has not fired yet; apply it now.
            self.squelched.remove(&from_peer);
            self.reset(now);
        }
        if first_seen < self.counting_since {
            return Vec::new();
        }

        let count = self.per_peer_count.entry(from_peer).or_insert(0);
        *count += 1;
        let count = *count;

        let mut actions = Vec::new();
        match self.state {
            SlotState::Counting => {
                if count >= cfg.count_threshold && self.selected.len() < cfg.max_selected {
                    self.selected.insert(from_peer);
                }
                if self.selected.len() >= cfg.max_selected {
                    self.state = SlotState::Selected;
                    let losers: Vec<PeerId> = self
                        .per_peer_count
                        .keys()
                        .copied()
                        .filter(|p| !self.selected.contains(p) && !self.is_squelched(*p, now))
                        .collect();
                    for p in losers {
                        actions.push(self.squelch(p, now, cfg));
                    }
                    self.round += 1;
                }
            }
            SlotState::Selected => {
                if !self.selected.contains(&from_peer) {
                    actions.push(self.squelch(from_peer, now, cfg));
                }
            }
        }
        actions
    }

    /// Ends the squelch of `peer` and starts a fresh selection round.
    pub fn on_squelch_expired(&mut self, peer: PeerId, now: TimeMs) -> Result<(), ProtocolError> {
        match self.squelched.get(&peer) {
            None => Err(ProtocolError::NotSquelched {
                validator: self.origin_validator,
                peer,
            }),
            Some(&expiry) if expiry > now => Err(ProtocolError::NotExpired { peer, expiry, now }),
            Some(_) => {
                self.squelched.remove(&peer);
                self.reset(now);
                Ok(())
            }
        }
    }

    /// Handles loss of a direct peer. Returns unsquelch requests when the lost
    /// peer was one of the selected relayers.
    pub fn on_peer_lost(&mut self, lost: PeerId, now: TimeMs) -> Vec<Action> {
        self.squelched.remove(&lost);
        if self.selected.contains(&lost) {
            let actions = self
                .squelched
                .keys()
                .map(|&p| (p, ControlMessage::unsquelch(self.origin_validator)))
                .collect();
            self.squelched.clear();
            self.reset(now);
            actions
        } else {
            self.per_peer_count.remove(&lost);
            Vec::new()
        }
    }
}

/// What one node knows about a single neighbor's squelch requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerLinkState {
    peer: PeerId,
    downlink_squelches: BTreeMap<ValidatorId, TimeMs>,
}

impl PeerLinkState {
    pub fn new(peer: PeerId) -> Self {
        PeerLinkState {
            peer,
            downlink_squelches: BTreeMap::new(),
        }
    }

    pub fn peer(&self) -> PeerId {
        self.peer
    }

    pub fn squelch_expiry(&self, validator: ValidatorId) -> Option<TimeMs> {
        self.downlink_squelches.get(&validator).copied()
    }

    /// Records `now + duration` as the expiry, replacing any earlier entry.
    pub fn on_squelch_received(
        &mut self,
        msg: &ControlMessage,
        now: TimeMs,
    ) -> Result<(), ProtocolError> {
        if msg.kind != ControlKind::Squelch {
            return Err(ProtocolError::WrongKind {
                expected: ControlKind::Squelch,
                got: msg.kind,
            });
        }
        self.downlink_squelches
            .insert(msg.origin_validator, now + msg.duration_ms);
        Ok(())
    }

    pub fn on_unsquelch_received(&mut self, msg: &ControlMessage) -> Result<(), ProtocolError> {
        if msg.kind != ControlKind::Unsquelch {
            return Err(ProtocolError::WrongKind {
                expected: ControlKind::Unsquelch,
                got: msg.kind,
            });
        }
        self.downlink_squelches.remove(&msg.origin_validator);
        Ok(())
    }

    pub fn should_relay(&self, origin_validator: ValidatorId, now: TimeMs) -> bool {
        self.downlink_squelches
            .get(&origin_validator)
            .is_none_or(|&expiry| expiry <= now)
    }
}

/// All squelch state held by one node: a slot per origin and a link record per peer.
#[derive(Debug, Clone)]
pub struct NodeRelayState {
    node: NodeId,
    slots: BTreeMap<ValidatorId, Slot>,
    links: BTreeMap<PeerId, PeerLinkState>,
    unknown_peer_messages: u64,
}

impl NodeRelayState {
    pub fn new(node: NodeId, peers: impl IntoIterator<Item = PeerId>) -> Self {
        NodeRelayState {
            node,
            slots: BTreeMap::new(),
            links: peers
                .into_iter()
                .map(|p| (p, PeerLinkState::new(p)))
                .collect(),
            unknown_peer_messages: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn slot(&self, validator: ValidatorId) -> Option<&Slot> {
        self.slots.get(&validator)
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.values()
    }

    pub fn link(&self, peer: PeerId) -> Option<&PeerLinkState> {
        self.links.get(&peer)
    }

    pub fn peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.links.keys().copied()
    }

    pub fn unknown_peer_messages(&self) -> u64 {
        self.unknown_peer_messages
    }

    pub fn on_validator_message(
        &mut self,
        validator: ValidatorId,
        from_peer: PeerId,
        now: TimeMs,
        cfg: &ProtocolConfig,
    ) -> Vec<Action> {
        self.on_relayed_copy(validator, from_peer, now, now, cfg)
    }

    /// See [`Slot::on_relayed_copy`].
    pub fn on_relayed_copy(
        &mut self,
        validator: ValidatorId,
        from_peer: PeerId,
        first_seen: TimeMs,
        now: TimeMs,
        cfg: &ProtocolConfig,
    ) -> Vec<Action> {
        if !self.links.contains_key(&from_peer) {
            self.unknown_peer_messages += 1;
            return Vec::new();
        }
        let node = self.node;
        self.slots
            .entry(validator)
            .or_insert_with(|| Slot::new(node, validator))
            .on_relayed_copy(from_peer, first_seen, now, cfg)
    }

    pub fn on_squelch_expired(
        &mut self,
        validator: ValidatorId,
        peer: PeerId,
        now: TimeMs,
    ) -> Result<(), ProtocolError> {
        match self.slots.get_mut(&validator) {
            Some(slot) => slot.on_squelch_expired(peer, now),
            None => Err(ProtocolError::NotSquelched { validator, peer }),
        }
    }

    /// Applies a control message received from `from_peer`.
    pub fn on_control(&mut self, from_peer: PeerId, msg: &ControlMessage, now: TimeMs) {
        let Some(link) = self.links.get_mut(&from_peer) else {
            self.unknown_peer_messages += 1;
            return;
        };
        let applied = match msg.kind {
            ControlKind::Squelch => link.on_squelch_received(msg, now),
            ControlKind::Unsquelch => link.on_unsquelch_received(msg),
        };
        debug_assert!(applied.is_ok());
    }

    /// Forgets `lost` and returns unsquelch requests for every slot that relied on it.
    pub fn on_uplink_lost(&mut self, lost: PeerId, now: TimeMs) -> Vec<Action> {
        self.links.remove(&lost);
        self.slots
            .values_mut()
            .flat_map(|slot| slot.on_peer_lost(lost, now))
            .collect()
    }

    pub fn should_relay(&self, peer: PeerId, validator: ValidatorId, now: TimeMs) -> bool {
        self.links
            .get(&peer)
            .is_none_or(|l| l.should_relay(validator, now))
    }
}
