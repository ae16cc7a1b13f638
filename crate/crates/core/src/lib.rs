//! Deterministic simulation of consensus-message dissemination under flooding
//! and squelching relay policies, plus the linear capacity models used to
//! extrapolate measured savings to larger nodes.
//!
//! The numeric code in [`regression`] and the savings arithmetic in [`metrics`]
//! are generic over [`Scalar`]; the aliases below fix the usual choices.

pub mod engine;
pub mod message;
pub mod metrics;
pub mod regression;
pub mod scalar;
pub mod squelch;
pub mod topology;

pub use engine::{run_scenario, RelayPolicy, ScenarioConfig, SimOutcome};
pub use message::{MessageKind, MessageSizes};
pub use metrics::{summarize, MetricsLog, RunSummary};
pub use scalar::Scalar;
pub use squelch::ProtocolConfig;
pub use topology::{graph_stats, GraphStats, NodeId, TopologyGraph};

/// Exact rational scalar.
pub type Rational = num_rational::Ratio<i64>;

pub type LinearModel = regression::LinearModel<f64>;
pub type LinearModel32 = regression::LinearModel<f32>;
pub type RationalLinearModel = regression::LinearModel<Rational>;
pub type GainReport = regression::GainReport<f64>;
pub type SavingsReport = metrics::SavingsReport<f64>;
