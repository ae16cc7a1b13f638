//! The scenario config file: a TOML document with `topology`, `scenario`,
//! `protocol`, `metrics` and `output` sections.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use squelch_core::engine::{Disconnect, RelayPolicy, ScenarioConfig, TxBurst};
use squelch_core::message::MessageSizes;
use squelch_core::squelch::ProtocolConfig;
use squelch_core::topology::{self, GeneratorParams, NodeId, TopologyGraph};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// Edge-list file, relative to the config file.
    pub edge_list: Option<PathBuf>,
    /// Validators for an edge-list topology. Defaults to the file's
    /// `# validators` line.
    pub validators: Option<Vec<NodeId>>,
    #[serde(default = "default_latency")]
    pub default_latency_ms: f64,
    pub nodes: Option<usize>,
    pub avg_degree: Option<f64>,
    pub validator_fraction: Option<f64>,
    pub latency_low_ms: Option<f64>,
    pub latency_high_ms: Option<f64>,
    /// Generator seed; the scenario seed when absent.
    pub seed: Option<u64>,
}

fn default_latency() -> f64 {
    topology::DEFAULT_LATENCY_MS
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            edge_list: None,
            validators: None,
            default_latency_ms: default_latency(),
            nodes: None,
            avg_degree: None,
            validator_fraction: None,
            latency_low_ms: None,
            latency_high_ms: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub duration_ms: u64,
    pub warmup_ms: u64,
    pub relay_policy: RelayPolicy,
    pub ledger_round_ms: u64,
    pub proposals_per_round: u32,
    pub sites: usize,
    pub seed: u64,
    pub tx_plan: Vec<TxBurst>,
    pub disconnects: Vec<Disconnect>,
    pub message_sizes: MessageSizes,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        ScenarioSection {
            duration_ms: d.duration_ms,
            warmup_ms: d.warmup_ms,
            relay_policy: d.relay_policy,
            ledger_round_ms: d.ledger_round_ms,
            proposals_per_round: d.proposals_per_round,
            sites: d.sites,
            seed: d.seed,
            tx_plan: d.tx_plan,
            disconnects: d.disconnects,
            message_sizes: d.message_sizes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Count squelch/unsquelch traffic in the headline message rate.
    pub include_control: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            include_control: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub topology: TopologySection,
    pub scenario: ScenarioSection,
    pub protocol: ProtocolConfig,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

/// A parsed config plus what is needed to resolve relative paths and hash it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base_dir: PathBuf,
    pub hash: String,
    pub graph: TopologyGraph,
}

impl LoadedConfig {
    pub fn scenario(&self) -> ScenarioConfig {
        let s = &self.file.scenario;
        ScenarioConfig {
            duration_ms: s.duration_ms,
            warmup_ms: s.warmup_ms,
            relay_policy: s.relay_policy,
            ledger_round_ms: s.ledger_round_ms,
            proposals_per_round: s.proposals_per_round,
            sites: s.sites,
            tx_plan: s.tx_plan.clone(),
            protocol: self.file.protocol.clone(),
            seed: s.seed,
            message_sizes: s.message_sizes,
            disconnects: s.disconnects.clone(),
            config_hash: self.hash.clone(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables.
/// The value is parsed as a TOML literal, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad override key {path:?}")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!("override path {path:?} crosses a non-table"))
        })?;
    }
    table.insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the resolved config: keys sorted, numbers in their typed form,
/// plus the content of any referenced edge list.
pub fn canonical_hash(file: &ConfigFile, edge_list_text: Option<&str>) -> String {
    let mut v = serde_json::to_value(file).expect("config serializes");
    if let Some(text) = edge_list_text {
        v["topology"]["edge_list_sha256"] = serde_json::Value::String(sha256_hex(text.as_bytes()));
    }
    sha256_hex(serde_json::to_string(&v).expect("json").as_bytes())
}

/// `# validators a b c` line of an edge-list file, if any.
pub fn declared_validators(text: &str) -> Option<BTreeSet<NodeId>> {
    text.lines().find_map(|l| {
        let rest = l
            .trim()
            .strip_prefix('#')?
            .trim()
            .strip_prefix("validators")?;
        Some(
            rest.split_whitespace()
                .filter_map(|s| s.parse().ok())
                .collect(),
        )
    })
}

pub fn parse_config(
    text: &str,
    base_dir: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<LoadedConfig, CliError> {
    let mut doc: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut doc, &format!("scenario.seed={seed}"))?;
    }
    let file: ConfigFile = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;

    let t = &file.topology;
    let (graph, edge_text) = match &t.edge_list {
        Some(path) => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Usage(format!("{}: {e}", full.display())))?;
            let validators = match &t.validators {
                Some(v) => v.iter().copied().collect(),
                None => declared_validators(&text).unwrap_or_default(),
            };
            let g = topology::load_topology(&text, &validators, t.default_latency_ms)
                .map_err(|e| CliError::Usage(format!("{}: {e}", full.display())))?;
            (g, Some(text))
        }
        None => {
            let need = |name: &str, v: Option<f64>| {
                v.ok_or_else(|| {
                    CliError::Usage(format!("topology.{name} is required without edge_list"))
                })
            };
            let params = GeneratorParams {
                node_count: t.nodes.ok_or_else(|| {
                    CliError::Usage("topology.nodes is required without edge_list".into())
                })?,
                target_avg_degree: need("avg_degree", t.avg_degree)?,
                validator_fraction: need("validator_fraction", t.validator_fraction)?,
                latency_range_ms: (
                    need("latency_low_ms", t.latency_low_ms)?,
                    need("latency_high_ms", t.latency_high_ms)?,
                ),
                seed: t.seed.unwrap_or(file.scenario.seed),
            };
            let g = topology::generate_topology(&params)
                .map_err(|e| CliError::Usage(format!("topology: {e}")))?;
            (g, None)
        }
    };
    let hash = canonical_hash(&file, edge_text.as_deref());
    Ok(LoadedConfig {
        file,
        base_dir: base_dir.to_owned(),
        hash,
        graph,
    })
}

pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_owned();
    parse_config(&text, &base, overrides, seed)
}
