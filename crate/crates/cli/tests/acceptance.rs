//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use squelch_core::engine::{run_scenario, RelayPolicy, ScenarioConfig, TxBurst};
use squelch_core::metrics::savings_from_rates;
use squelch_core::squelch::{ControlKind, PeerId, Slot, SlotState};
use squelch_core::topology::{generate_topology, GeneratorParams, NodeId, TopologyGraph};
use squelch_core::ProtocolConfig;

// Criterion 1
const CPU_INTERCEPT: (f64, f64) = (15.8754, 0.001);
const CPU_SLOPE: (f64, f64) = (0.1177, 0.0001);
const MSG_INTERCEPT: (f64, f64) = (-75.0943, 0.05);
const MSG_SLOPE: (f64, f64) = (123.6365, 0.005);
const MIN_R2: f64 = 0.96;
// Criterion 2
const BASE_MSGS: (f64, f64) = (24652.0, 1.0);
const BASE_CPU: (f64, f64) = (39.41, 0.05);
const SQ_PEERS: (f64, f64) = (142.0, 1.0);
const SQ_MSGS: (f64, f64) = (17527.0, 15.0);
const SQ_CPU_BAND: (f64, f64) = (32.55, 32.66);
const FREED: (f64, f64) = (58.0, 1.0);
const CONNECTIVITY: (f64, f64) = (29.0, 0.5);
// Criterion 3
const TABLE_SAVED: (f64, f64) = (28.905, 0.001);
// Criterion 6
const SAVED_BAND: (f64, f64) = (15.0, 45.0);

fn near(v: f64, (want, tol): (f64, f64)) -> bool {
    (v - want).abs() <= tol
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squelchsim"))
        .args(args)
        .env_remove("SQUELCHSIM_OUT")
        .output()
        .expect("binary runs")
}

fn cli_json(args: &[&str]) -> Result<Value, String> {
    let out = cli(args);
    if !out.status.success() {
        return Err(format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn num(v: &Value, path: &[&str]) -> Result<f64, String> {
    let mut cur = v;
    for k in path {
        cur = &cur[*k];
    }
    cur.as_f64()
        .ok_or_else(|| format!("missing number at {}", path.join(".")))
}

type Check = Result<String, String>;

fn require(ok: bool, what: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what)
    }
}

fn regression_reproduction() -> Check {
    let cpu = cli_json(&["fit", data("cpu_by_peers.csv").to_str().unwrap()])?;
    let msgs = cli_json(&["fit", data("baseline_by_peers.csv").to_str().unwrap()])?;
    let (ci, cs, cr) = (
        num(&cpu, &["model", "intercept"])?,
        num(&cpu, &["model", "slope"])?,
        num(&cpu, &["model", "r_squared"])?,
    );
    let (mi, ms, mr) = (
        num(&msgs, &["model", "intercept"])?,
        num(&msgs, &["model", "slope"])?,
        num(&msgs, &["model", "r_squared"])?,
    );
    require(near(ci, CPU_INTERCEPT), format!("cpu intercept {ci}"))?;
    require(near(cs, CPU_SLOPE), format!("cpu slope {cs}"))?;
    require(near(mi, MSG_INTERCEPT), format!("messages intercept {mi}"))?;
    require(near(ms, MSG_SLOPE), format!("messages slope {ms}"))?;
    require(cr > MIN_R2 && mr > MIN_R2, format!("r2 {cr} / {mr}"))?;
    Ok(format!(
        "cpu = {ci:.4} + {cs:.5}x (r2 {cr:.4}); msgs = {mi:.4} + {ms:.4}x (r2 {mr:.4})"
    ))
}

fn extrapolation_reproduction() -> Check {
    let v = cli_json(&[
        "fit",
        data("baseline_by_peers.csv").to_str().unwrap(),
        "--gain",
        "200",
        "0.28905",
    ])?;
    let g = &v["gain"];
    let base_msgs = num(g, &["baseline", "messages_per_s"])?;
    let base_cpu = num(g, &["baseline", "cpu_percent"])?;
    let peers = num(g, &["squelched", "peers_equivalent"])?;
    let sq_msgs = num(g, &["squelched", "messages_per_s"])?;
    let sq_cpu = num(g, &["squelched", "cpu_percent"])?;
    let freed = num(g, &["freed_slots"])?;
    let conn = num(g, &["connectivity_gain_percent"])?;
    require(
        near(base_msgs, BASE_MSGS),
        format!("baseline messages {base_msgs}"),
    )?;
    require(near(base_cpu, BASE_CPU), format!("baseline cpu {base_cpu}"))?;
    require(near(peers, SQ_PEERS), format!("squelched peers {peers}"))?;
    require(
        near(sq_msgs, SQ_MSGS),
        format!("squelched messages {sq_msgs}"),
    )?;
    require(
        (SQ_CPU_BAND.0..=SQ_CPU_BAND.1).contains(&sq_cpu),
        format!("squelched cpu {sq_cpu}"),
    )?;
    require(near(freed, FREED), format!("freed slots {freed}"))?;
    require(
        near(conn, CONNECTIVITY),
        format!("connectivity gain {conn}"),
    )?;
    Ok(format!(
        "200 peers: {base_msgs:.1} msgs, cpu {base_cpu:.3}; squelched: {peers} peers, {sq_msgs:.1} msgs, cpu {sq_cpu:.3}; freed {freed}, +{conn:.1}%"
    ))
}

fn savings_arithmetic() -> Check {
    let s = savings_from_rates(297.633_f64, 211.602).map_err(|e| e.to_string())?;
    let oracle = 100.0 - 100.0 * 211.602 / 297.633;
    require(
        near(s.saved_percent, TABLE_SAVED),
        format!("saved {}", s.saved_percent),
    )?;
    require(
        near(s.saved_percent, (oracle, 1e-9)),
        format!("oracle {oracle}"),
    )?;
    Ok(format!(
        "saved {:.4}%, ratio {:.4}%",
        s.saved_percent, s.ratio_percent
    ))
}

fn random_graph(rng: &mut ChaCha8Rng, lo_n: usize, hi_n: usize) -> TopologyGraph {
    let n = rng.gen_range(lo_n..=hi_n);
    let max_deg = ((n - 1) as f64).min(8.0);
    let min_deg = (2.0 * (n - 1) as f64 / n as f64).max(2.0).min(max_deg);
    let lo = rng.gen_range(1.0..20.0);
    generate_topology(&GeneratorParams {
        node_count: n,
        target_avg_degree: rng.gen_range(min_deg..=max_deg),
        validator_fraction: rng.gen_range(0.1..0.35),
        latency_range_ms: (lo, lo + rng.gen_range(0.0..80.0)),
        seed: rng.gen(),
    })
    .expect("generator parameters are in range")
}

/// Relay-once flooding walked message by message.
fn enumerate_flood(g: &TopologyGraph, origin: NodeId) -> u64 {
    let mut seen = vec![false; g.node_count()];
    seen[origin as usize] = true;
    let mut queue = VecDeque::from([(origin, None::<NodeId>)]);
    let mut sent = 0;
    while let Some((u, from)) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if Some(v) != from {
                sent += 1;
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back((v, Some(u)));
                }
            }
        }
    }
    sent
}

fn flood_oracle() -> Check {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 2, 50);
        let g = TopologyGraph::new(g.node_count(), g.edges(), []).unwrap();
        let cfg = ScenarioConfig {
            duration_ms: 60_000,
            warmup_ms: 0,
            tx_plan: vec![TxBurst {
                start_ms: 0,
                group: 0,
                count: 1,
                rate_per_sec: 1.0,
            }],
            seed,
            ..ScenarioConfig::default()
        };
        let out = run_scenario(&g, &cfg).map_err(|e| e.to_string())?;
        let (key, t) = out.traces.iter().next().ok_or("no message traced")?;
        let (n, e) = (g.node_count() as u64, g.edge_count() as u64);
        let formula = 2 * e - (n - 1);
        require(
            t.transmissions == formula && t.transmissions == enumerate_flood(&g, key.origin),
            format!(
                "seed {seed}: {} transmissions, formula {formula}",
                t.transmissions
            ),
        )?;
    }
    Ok("100 graphs, transmissions = 2|E| - (N-1) and matches walked dissemination".into())
}

fn earliest_arrival_ecc(g: &TopologyGraph, src: NodeId) -> u64 {
    let mut dist = vec![u64::MAX; g.node_count()];
    dist[src as usize] = 0;
    let mut heap = BinaryHeap::from([Reverse((0u64, src))]);
    while let Some(Reverse((d, u))) = heap.pop() {
        if d > dist[u as usize] {
            continue;
        }
        for &v in g.neighbors(u) {
            let nd = d + (g.latency(u, v).unwrap().round() as u64).max(1);
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    dist.into_iter().max().unwrap()
}

fn delivery_completeness() -> Check {
    let mut checked = 0u64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let g = random_graph(&mut rng, 15, 50);
        let sites = rng.gen_range(1..=4);
        let cfg = ScenarioConfig {
            duration_ms: 8000,
            warmup_ms: 1000,
            ledger_round_ms: [500, 1000][rng.gen_range(0..2)],
            proposals_per_round: rng.gen_range(0..3),
            sites,
            tx_plan: (0..sites)
                .map(|group| TxBurst {
                    start_ms: rng.gen_range(0..3000),
                    group,
                    count: rng.gen_range(1..30),
                    rate_per_sec: rng.gen_range(5.0..50.0),
                })
                .collect(),
            protocol: ProtocolConfig {
                count_threshold: rng.gen_range(1..=4),
                max_selected: rng.gen_range(1..=4),
                squelch_base_ms: rng.gen_range(500..4000),
                squelch_jitter_ms: rng.gen_range(0..2000),
                ..ProtocolConfig::default()
            },
            seed,
            ..ScenarioConfig::default()
        };
        let ecc: Vec<u64> = (0..g.node_count() as NodeId)
            .map(|v| earliest_arrival_ecc(&g, v))
            .collect();
        for policy in [RelayPolicy::Flood, RelayPolicy::Squelch] {
            let c = ScenarioConfig {
                relay_policy: policy,
                ..cfg.clone()
            };
            let out = run_scenario(&g, &c).map_err(|e| e.to_string())?;
            for (key, t) in &out.traces {
                // Only messages with time to reach the farthest node before the end.
                if t.originated_at + ecc[key.origin as usize] < c.duration_ms {
                    require(
                        t.reached as usize == g.node_count(),
                        format!(
                            "seed {seed} {policy}: {key:?} reached {} of {}",
                            t.reached,
                            g.node_count()
                        ),
                    )?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "100 scenarios x 2 policies, {checked} messages reached every node"
    ))
}

fn benefit_for_seed(cfg: &Path, work: &Path, seed: u64) -> Result<f64, String> {
    let out = work.join(format!("benefit-{seed}"));
    let o = cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
        "compare",
    ]);
    require(
        o.status.success(),
        format!("seed {seed}: {}", String::from_utf8_lossy(&o.stderr)),
    )?;
    let text = std::fs::read_to_string(out.join("compare.json")).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let f = num(&v, &["flood", "avg_total_msgs_per_sec"])?;
    let s = num(&v, &["squelch", "avg_total_msgs_per_sec"])?;
    let pct = num(&v, &["savings", "saved_percent"])?;
    require(
        s < f,
        format!("seed {seed}: squelch {s} not below flood {f}"),
    )?;
    require(
        (SAVED_BAND.0..=SAVED_BAND.1).contains(&pct),
        format!("seed {seed}: saved {pct}% outside band"),
    )?;
    Ok(pct)
}

fn squelch_benefit(work: &Path) -> Check {
    let cfg = data("reference_scenario.toml");
    let saved = std::thread::scope(|s| {
        let handles: Vec<_> = (0..10u64)
            .map(|seed| {
                let cfg = &cfg;
                s.spawn(move || benefit_for_seed(cfg, work, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed thread"))
            .collect::<Result<Vec<f64>, String>>()
    })?;
    let lo = saved.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = saved.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!("10 seeds, saved {lo:.2}%..{hi:.2}%"))
}

/// First `m` peers to reach `t` copies win; everyone else who has sent is
/// squelched when selection fills, later first-timers on arrival.
fn expected_squelch_steps(
    seq: &[PeerId],
    t: u32,
    m: usize,
) -> (BTreeSet<PeerId>, BTreeMap<PeerId, usize>) {
    let mut counts: BTreeMap<PeerId, u32> = BTreeMap::new();
    let mut sel = BTreeSet::new();
    let mut steps = BTreeMap::new();
    let mut full = false;
    for (i, &p) in seq.iter().enumerate() {
        if full {
            if !sel.contains(&p) {
                steps.entry(p).or_insert(i);
            }
            continue;
        }
        let c = counts.entry(p).or_insert(0);
        *c += 1;
        if *c >= t && sel.len() < m {
            sel.insert(p);
        }
        if sel.len() == m {
            full = true;
            for &q in counts.keys().filter(|q| !sel.contains(*q)) {
                steps.insert(q, i);
            }
        }
    }
    (sel, steps)
}

fn permutations(items: &[PeerId]) -> Vec<Vec<PeerId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    (0..items.len())
        .flat_map(|i| {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            permutations(&rest).into_iter().map(move |mut tail| {
                tail.insert(0, head);
                tail
            })
        })
        .collect()
}

fn protocol_state_machine() -> Check {
    let mut orders = 0u64;
    for peers in 2..=5u32 {
        let ids: Vec<PeerId> = (0..peers).collect();
        let perms = permutations(&ids);
        for t in 1..=3u32 {
            // Copies arrive in rounds, one per peer; the first round is fixed
            // since other first rounds are relabelings.
            let mut seqs = vec![ids.clone()];
            for _ in 1..t {
                seqs = seqs
                    .iter()
                    .flat_map(|s| {
                        perms
                            .iter()
                            .map(move |p| s.iter().chain(p).copied().collect::<Vec<_>>())
                    })
                    .collect();
            }
            for m in 1..=peers as usize {
                let cfg = ProtocolConfig {
                    count_threshold: t,
                    max_selected: m,
                    squelch_base_ms: 10_000,
                    squelch_jitter_ms: 5_000,
                    ..ProtocolConfig::default()
                };
                for seq in &seqs {
                    let mut slot = Slot::new(100, 200);
                    let mut got: BTreeMap<PeerId, usize> = BTreeMap::new();
                    for (i, &p) in seq.iter().enumerate() {
                        for (peer, msg) in slot.on_validator_message(p, i as u64, &cfg) {
                            require(
                                msg.kind() == ControlKind::Squelch,
                                format!("{seq:?}: non-squelch action"),
                            )?;
                            require(
                                got.insert(peer, i).is_none(),
                                format!("{seq:?}: {peer} squelched twice"),
                            )?;
                        }
                    }
                    let (sel, steps) = expected_squelch_steps(seq, t, m);
                    require(
                        slot.selected() == &sel
                            && sel.len() == m
                            && got == steps
                            && got.len() == peers as usize - m,
                        format!(
                            "{seq:?} t={t} m={m}: selected {:?}, squelched {got:?}",
                            slot.selected()
                        ),
                    )?;

                    if let Some((&p, &expiry)) = slot.squelched().iter().next() {
                        let mut s = slot.clone();
                        s.on_squelch_expired(p, expiry).map_err(|e| e.to_string())?;
                        require(
                            s.state() == SlotState::Counting,
                            "expiry left slot selected".into(),
                        )?;
                        for k in 0..t {
                            s.on_validator_message(p, expiry + 1 + u64::from(k), &cfg);
                        }
                        require(
                            s.selected().contains(&p),
                            format!("{seq:?}: {p} not re-selected"),
                        )?;
                    }
                    if let Some(&lost) = slot.selected().iter().next() {
                        let mut s = slot.clone();
                        let acts = s.on_peer_lost(lost, seq.len() as u64);
                        let targets: BTreeSet<PeerId> = acts.iter().map(|(p, _)| *p).collect();
                        require(
                            acts.len() == targets.len()
                                && targets == slot.squelched().keys().copied().collect()
                                && acts.iter().all(|(_, m)| m.kind() == ControlKind::Unsquelch),
                            format!("{seq:?}: uplink loss sent {acts:?}"),
                        )?;
                    }
                    orders += 1;
                }
            }
        }
    }
    Ok(format!(
        "{orders} arrival orders, expiry re-selection and uplink loss checked"
    ))
}

fn determinism(work: &Path) -> Check {
    let cfg = data("reference_scenario.toml");
    for policy in ["flood", "squelch"] {
        let mut files = Vec::new();
        for run in 0..2 {
            let out = work.join(format!("det-{policy}-{run}"));
            let o = cli(&[
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "5",
                "--set",
                &format!("scenario.relay_policy={policy}"),
                "--set",
                "scenario.duration_ms=40000",
                "--out",
                out.to_str().unwrap(),
                "simulate",
            ]);
            require(
                o.status.success(),
                String::from_utf8_lossy(&o.stderr).into_owned(),
            )?;
            files.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
        }
        require(
            files[0] == files[1],
            format!("{policy}: metrics.csv differs between runs"),
        )?;
        require(!files[0].is_empty(), format!("{policy}: empty metrics.csv"))?;
    }
    Ok("metrics.csv byte-identical across reruns for flood and squelch".into())
}

type Criterion<'a> = (u32, &'static str, Duration, Box<dyn Fn() -> Check + 'a>);

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "regression reproduction",
            Duration::from_secs(1),
            Box::new(regression_reproduction),
        ),
        (
            2,
            "extrapolation reproduction",
            Duration::from_secs(1),
            Box::new(extrapolation_reproduction),
        ),
        (
            3,
            "savings arithmetic",
            Duration::from_secs(1),
            Box::new(savings_arithmetic),
        ),
        (
            4,
            "flood oracle",
            Duration::from_secs(10),
            Box::new(flood_oracle),
        ),
        (
            5,
            "delivery completeness",
            Duration::from_secs(60),
            Box::new(delivery_completeness),
        ),
        (
            6,
            "squelch benefit",
            Duration::from_secs(30),
            Box::new(|| squelch_benefit(work.path())),
        ),
        (
            7,
            "protocol state machine",
            Duration::from_secs(10),
            Box::new(protocol_state_machine),
        ),
        (
            8,
            "determinism",
            Duration::from_secs(60),
            Box::new(|| determinism(work.path())),
        ),
    ];
    let mut failed = 0;
    for (n, name, limit, check) in &criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > *limit => {
                Err(format!("{detail}; took {took:.2?}, limit {limit:?}"))
            }
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {why} [{took:.2?}]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
