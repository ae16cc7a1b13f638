//! Message kinds and the dedup key shared by the engine, protocol and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Transaction,
    Proposal,
    Validation,
    Squelch,
    Unsquelch,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::Transaction,
        MessageKind::Proposal,
        MessageKind::Validation,
        MessageKind::Squelch,
        MessageKind::Unsquelch,
    ];

    pub const APPLICATION: [MessageKind; 3] = [
        MessageKind::Transaction,
        MessageKind::Proposal,
        MessageKind::Validation,
    ];

    pub fn is_application(self) -> bool {
        !self.is_control()
    }

    pub fn is_control(self) -> bool {
        matches!(self, MessageKind::Squelch | MessageKind::Unsquelch)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Transaction => "transaction",
            MessageKind::Proposal => "proposal",
            MessageKind::Validation => "validation",
            MessageKind::Squelch => "squelch",
            MessageKind::Unsquelch => "unsquelch",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown message kind {s:?}"))
    }
}

/// Network-wide identity of an application message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DedupKey {
    pub kind: MessageKind,
    pub origin: NodeId,
    pub sequence: u64,
}

/// Wire sizes used for byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MessageSizes {
    pub transaction: u32,
    pub proposal: u32,
    pub validation: u32,
    pub control: u32,
}

impl Default for MessageSizes {
    fn default() -> Self {
        MessageSizes {
            transaction: 600,
            proposal: 200,
            validation: 150,
            control: 30,
        }
    }
}

impl MessageSizes {
    pub fn of(&self, kind: MessageKind) -> u32 {
        match kind {
            MessageKind::Transaction => self.transaction,
            MessageKind::Proposal => self.proposal,
            MessageKind::Validation => self.validation,
            MessageKind::Squelch | MessageKind::Unsquelch => self.control,
        }
    }
}

/// A message in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimMessage {
    pub kind: MessageKind,
    pub origin: NodeId,
    pub sequence: u64,
    pub size_bytes: u32,
}

impl SimMessage {
    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            kind: self.kind,
            origin: self.origin,
            sequence: self.sequence,
        }
    }
}
