use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use squelch_core::engine::{run_scenario, EngineError, RelayPolicy, ScenarioConfig, SimOutcome};
use squelch_core::message::MessageKind;
use squelch_core::metrics::{export_csv, savings, summarize, MetricsLog, RunSummary};
use squelch_core::regression::{compute_gain, fit_linear};
use squelch_core::topology::{self, GeneratorParams};
use squelch_core::LinearModel;

use crate::config::{declared_validators, load_config, LoadedConfig};
use crate::{Cli, CliError, OUT_ENV, TOOL_VERSION};

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn require_config(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage("--config is required for this command"))?;
    load_config(path, &cli.overrides, cli.seed)
}

/// `--out`, then the config's output.dir, then $SQUELCHSIM_OUT, then ./squelchsim-out.
pub fn output_dir(cli_out: Option<&Path>, config_dir: Option<&Path>) -> PathBuf {
    cli_out
        .or(config_dir)
        .map(Path::to_path_buf)
        .or_else(|| {
            std::env::var_os(OUT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("squelchsim-out"))
}

fn prepare_out(cli: &Cli, cfg: &LoadedConfig) -> Result<PathBuf, CliError> {
    let dir = output_dir(cli.out.as_deref(), cfg.file.output.dir.as_deref());
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn run_arm(
    cfg: &LoadedConfig,
    scenario: &ScenarioConfig,
) -> Result<(SimOutcome, RunSummary), CliError> {
    let outcome = run_scenario(&cfg.graph, scenario).map_err(|e| match e {
        EngineError::Config(_) | EngineError::Disconnected => usage(e),
    })?;
    let summary = summarize(&outcome.log).map_err(runtime)?;
    Ok((outcome, summary))
}

pub fn simulate(cli: &Cli) -> Result<(), CliError> {
    let cfg = require_config(cli)?;
    let scenario = cfg.scenario();
    let (outcome, summary) = run_arm(&cfg, &scenario)?;
    let dir = prepare_out(cli, &cfg)?;
    let include_control = cfg.file.metrics.include_control;

    write_file(&dir, "metrics.csv", &export_csv(&outcome.log))?;
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "config_hash": cfg.hash,
        "seed": scenario.seed,
        "policy": scenario.relay_policy.to_string(),
        "include_control": include_control,
        "headline_msgs_per_sec": summary.headline_rate(include_control),
        "events_processed": outcome.events_processed,
        "warnings": outcome.warnings,
        "summary": summary,
    });
    write_file(&dir, "summary.json", &to_json(&doc))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} run: {:.3} msgs/s over {} s, written to {}",
        scenario.relay_policy,
        summary.headline_rate(include_control),
        summary.window_seconds,
        dir.display()
    );
    Ok(())
}

/// Per-second in/out totals of both arms with running sums, preceded by
/// `#` metadata lines.
fn cumulative_csv(
    cfg: &LoadedConfig,
    seed: u64,
    flood: &MetricsLog,
    squelch: &MetricsLog,
    kinds: &[MessageKind],
) -> String {
    let f = flood.per_second_totals(kinds);
    let s = squelch.per_second_totals(kinds);
    let last = f.keys().chain(s.keys()).max().copied();
    let mut out = format!(
        "# config_hash={}\n# seed={seed}\n# tool_version={TOOL_VERSION}\n",
        cfg.hash
    );
    out.push_str("second,flood_in,flood_out,squelch_in,squelch_out,flood_in_cum,flood_out_cum,squelch_in_cum,squelch_out_cum\n");
    let mut cum = [0u64; 4];
    if let Some(last) = last {
        for sec in 0..=last {
            let (fi, fo) = f.get(&sec).copied().unwrap_or_default();
            let (si, so) = s.get(&sec).copied().unwrap_or_default();
            for (c, v) in cum.iter_mut().zip([fi, fo, si, so]) {
                *c += v;
            }
            out.push_str(&format!(
                "{sec},{fi},{fo},{si},{so},{},{},{},{}\n",
                cum[0], cum[1], cum[2], cum[3]
            ));
        }
    }
    out
}

pub fn compare(cli: &Cli) -> Result<(), CliError> {
    let cfg = require_config(cli)?;
    let base = cfg.scenario();
    let flood_cfg = ScenarioConfig {
        relay_policy: RelayPolicy::Flood,
        ..base.clone()
    };
    let squelch_cfg = ScenarioConfig {
        relay_policy: RelayPolicy::Squelch,
        ..base.clone()
    };
    let (flood, squelch) = std::thread::scope(|s| {
        let f = s.spawn(|| run_arm(&cfg, &flood_cfg));
        let q = s.spawn(|| run_arm(&cfg, &squelch_cfg));
        (
            f.join().expect("flood arm panicked"),
            q.join().expect("squelch arm panicked"),
        )
    });
    let (flood_out, flood_sum) = flood?;
    let (squelch_out, squelch_sum) = squelch?;
    let include_control = cfg.file.metrics.include_control;
    let headline = savings(&flood_sum, &squelch_sum, include_control).map_err(runtime)?;
    let application = savings(&flood_sum, &squelch_sum, false).map_err(runtime)?;
    let control_share = if squelch_sum.avg_combined_msgs_per_sec > 0.0 {
        100.0 * (squelch_sum.avg_control_msgs_per_sec / squelch_sum.avg_combined_msgs_per_sec)
    } else {
        0.0
    };

    let dir = prepare_out(cli, &cfg)?;
    let mut warnings = flood_out.warnings.clone();
    warnings.extend(squelch_out.warnings.iter().cloned());
    warnings.dedup();
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "config_hash": cfg.hash,
        "seed": base.seed,
        "include_control": include_control,
        "flood": flood_sum,
        "squelch": squelch_sum,
        "savings": headline,
        "application_savings": application,
        "control_overhead": {
            "msgs": squelch_sum.control_overhead_msgs,
            "msgs_per_sec": squelch_sum.avg_control_msgs_per_sec,
            "share_percent": control_share,
        },
        "warnings": warnings,
    });
    write_file(&dir, "compare.json", &to_json(&doc))?;
    let kinds: &[MessageKind] = if include_control {
        &MessageKind::ALL
    } else {
        &MessageKind::APPLICATION
    };
    write_file(
        &dir,
        "cumulative.csv",
        &cumulative_csv(&cfg, base.seed, &flood_out.log, &squelch_out.log, kinds),
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "flood {:.3} msgs/s, squelch {:.3} msgs/s, saved {:.2}%, written to {}",
        flood_sum.headline_rate(include_control),
        squelch_sum.headline_rate(include_control),
        headline.saved_percent,
        dir.display()
    );
    Ok(())
}

/// Header names and numeric rows of a points file.
pub fn read_points(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = read_input(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if !(2..=3).contains(&headers.len()) {
        return Err(usage(format!(
            "{}: expected 2 or 3 columns, found {}",
            path.display(),
            headers.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| {
                usage(format!(
                    "{}: row {}: non-numeric value",
                    path.display(),
                    i + 2
                ))
            })?;
        rows.push(row);
    }
    Ok((headers, rows))
}

fn fit_columns(headers: &[String], rows: &[Vec<f64>], col: usize) -> Result<LinearModel, CliError> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[col])).collect();
    Ok(fit_linear(&pts)
        .map_err(usage)?
        .with_names(&headers[0], &headers[col]))
}

pub fn fit(
    points: &Path,
    invert: bool,
    predict: &[f64],
    gain: Option<&[String]>,
    cpu_points: Option<&Path>,
) -> Result<(), CliError> {
    let (headers, rows) = read_points(points)?;
    let model = fit_columns(&headers, &rows, 1)?;
    let cpu_model = if headers.len() == 3 {
        Some(fit_columns(&headers, &rows, 2)?)
    } else if let Some(p) = cpu_points {
        let (h, r) = read_points(p)?;
        Some(fit_columns(&h, &r, 1)?)
    } else {
        None
    };

    let mut doc = json!({
        "tool_version": TOOL_VERSION,
        "input_sha256": sha256_hex(read_input(points)?.as_bytes()),
        "model": model,
    });
    if let Some(c) = &cpu_model {
        doc["cpu_model"] = json!(c);
    }
    if invert {
        doc["inverse"] = json!(model.invert().map_err(usage)?);
    }
    if !predict.is_empty() {
        let preds: Vec<Value> = predict
            .iter()
            .map(|&x| {
                json!({
                    "x": x,
                    "y": model.predict(x),
                    "extrapolated": model.extrapolates(x),
                })
            })
            .collect();
        doc["predictions"] = Value::Array(preds);
    }
    if let Some(g) = gain {
        let peers: u32 = g[0].parse().map_err(|_| {
            usage(format!(
                "--gain PEERS must be a whole number, got {:?}",
                g[0]
            ))
        })?;
        let fraction: f64 = g[1]
            .parse()
            .map_err(|_| usage(format!("--gain FRACTION must be a number, got {:?}", g[1])))?;
        let cpu = cpu_model
            .as_ref()
            .ok_or_else(|| usage("--gain needs CPU points: a third column or --cpu-points"))?;
        doc["gain"] = json!(compute_gain(cpu, &model, peers, fraction).map_err(usage)?);
    }
    print!("{}", to_json(&doc));
    Ok(())
}

pub fn topo_stats(edge_list: &Path) -> Result<(), CliError> {
    let text = read_input(edge_list)?;
    let validators = declared_validators(&text).unwrap_or_default();
    let g = topology::load_topology(&text, &validators, topology::DEFAULT_LATENCY_MS)
        .map_err(|e| usage(format!("{}: {e}", edge_list.display())))?;
    let mut doc = serde_json::to_value(topology::graph_stats(&g)).expect("stats serialize");
    let obj = doc.as_object_mut().expect("stats is an object");
    obj.insert("nodes".into(), json!(g.node_count()));
    obj.insert("edges".into(), json!(g.edge_count()));
    obj.insert("input_sha256".into(), json!(sha256_hex(text.as_bytes())));
    obj.insert("tool_version".into(), json!(TOOL_VERSION));
    print!("{}", to_json(&doc));
    Ok(())
}

pub fn topo_gen(
    nodes: usize,
    avg_degree: f64,
    validator_fraction: f64,
    latency_range_ms: (f64, f64),
    seed: u64,
) -> Result<(), CliError> {
    let g = topology::generate_topology(&GeneratorParams {
        node_count: nodes,
        target_avg_degree: avg_degree,
        validator_fraction,
        latency_range_ms,
        seed,
    })
    .map_err(usage)?;
    print!("{}", g.to_edge_list());
    Ok(())
}
