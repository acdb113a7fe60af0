mod bench;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::RngCore;
use tip_core::adapter::{
    coerce_output, emit_module, parse_adapter_toml, parse_formula, AdapterError, AdapterRegistry, SandboxConfig,
};
use tip_core::discovery;
use tip_core::model::{NodeId, TypedValue};
use tip_core::negotiation::{Intent, ReputationStore};
use tip_core::node::{Driver, Node, NodeConfig};
use tip_core::orchestrator::{self, IntentSession, OrchestratorError};
use tip_core::scenario::factory::{line_script, FactoryVariant};
use tip_core::scenario::{run_script_text, Runner, Script};
use tip_core::transport::sim::SimConfig;
use tip_core::transport::udp::{parse_udp_address, udp_address, wall_clock_us, UdpDriver, UdpEndpoint};
use tip_core::vectors;
use tip_core::world::World;

use crate::bench::BenchKind;
use crate::config::NodeFile;

#[derive(Parser)]
#[command(name = "tip", version, about = "Intent-based capability networking: nodes, intents and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Sim,
    Udp,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node that serves the capabilities in its config.
    Node {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "udp")]
        transport: TransportKind,
        /// Generate the key file if it does not exist.
        #[arg(long)]
        create_key: bool,
        /// Stop after this many milliseconds instead of waiting for an
        /// interrupt.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Submit an intent, print the ranking, the contract and the data.
    Intent {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, value_enum, default_value = "sim")]
        transport: TransportKind,
        /// Requester node config (udp).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario script that sets up the simulated network (sim).
        /// Defaults to the bottling line.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Requesting node inside the simulated network.
        #[arg(long = "as", default_value = "planner")]
        requester: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of data requests once the contract is active.
        #[arg(long, default_value_t = 1)]
        count: u32,
        /// Print every utility per candidate.
        #[arg(long)]
        explain: bool,
    },
    /// Compile an adapter descriptor.
    Adapter {
        #[arg(long)]
        descriptor: PathBuf,
        /// Write <id>.wasm and <id>.wat here.
        #[arg(long)]
        emit: Option<PathBuf>,
        /// Run the adapter on this input and print the result.
        #[arg(long, allow_hyphen_values = true)]
        test: Option<f64>,
    },
    /// Write the golden packet vectors and their manifest.
    Vectors {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario script, or one of factory-nominal, factory-degrade,
    /// factory-mute.
    Scenario {
        #[arg(long)]
        script: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON-lines report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the simulator's network trace here.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Time scoring, adapter execution or the handshake.
    Bench {
        #[arg(long, value_enum)]
        kind: BenchKind,
        #[arg(long, default_value_t = 1000)]
        size: usize,
    },
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("TIP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging();
    let r = match cli.command {
        Command::Node {
            config,
            transport,
            create_key,
            duration_ms,
        } => cmd_node(&config, transport, create_key, duration_ms),
        Command::Intent {
            file,
            transport,
            config,
            script,
            requester,
            seed,
            count,
            explain,
        } => cmd_intent(&file, transport, config.as_deref(), script.as_deref(), &requester, seed, count, explain),
        Command::Adapter { descriptor, emit, test } => cmd_adapter(&descriptor, emit.as_deref(), test),
        Command::Vectors { out } => cmd_vectors(&out),
        Command::Scenario {
            script,
            seed,
            report,
            event_log,
        } => cmd_scenario(&script, seed, report.as_deref(), event_log.as_deref()),
        Command::Bench { kind, size } => cmd_bench(kind, size),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn udp_driver(f: &NodeFile, create_key: bool) -> Result<UdpDriver> {
    let identity = f.identity(create_key)?;
    let endpoint = UdpEndpoint::bind(&f.bind)?;
    let mut node = Node::new(
        identity,
        udp_address(endpoint.local_addr()),
        &f.segment,
        NodeConfig::default(),
        rand::rngs::OsRng.next_u64(),
    );
    if let Some(p) = &f.reputation_file {
        node.reputation = ReputationStore::load(p, node.config.lambda);
    }
    for spec in f.adapter_specs()? {
        node.adapters.get_or_compile(&spec).map_err(|e| anyhow!("adapter {}: {e}", spec.id))?;
    }
    let mut d = UdpDriver::new(node, endpoint);
    for p in &f.link_peers {
        d.link_peers.push(parse_udp_address(p)?);
    }
    if let Some(b) = &f.bootstrap {
        match discovery::join(&mut d, &udp_address(parse_udp_address(b)?)) {
            Ok(n) => tracing::info!(bootstrap = %b, peers = n, "joined"),
            Err(e) => tracing::warn!(bootstrap = %b, error = %e, "join failed"),
        }
    }
    Ok(d)
}

fn save_reputation(f: &NodeFile, store: &ReputationStore) -> Result<()> {
    if let Some(p) = &f.reputation_file {
        store.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_node(config: &Path, transport: TransportKind, create_key: bool, duration_ms: Option<u64>) -> Result<()> {
    let f = NodeFile::load(config)?;
    match transport {
        TransportKind::Udp => {
            let mut d = udp_driver(&f, create_key)?;
            let ids: Vec<String> = f.capabilities.iter().map(|c| c.id.clone()).collect();
            for (cap, availability, handler) in f.services()? {
                orchestrator::provider_serve(&mut d, cap, availability, handler)?;
            }
            tracing::info!(node = %d.node_ref().address(), capabilities = ?ids, "announced");
            println!("{} {} serving {}", f.name, d.node_ref().address(), ids.join(","));
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)).context("installing signal handler")?;
            let end = duration_ms.map(|ms| d.now() + ms * 1000);
            d.serve(&mut || stop.load(Ordering::Relaxed) || end.is_some_and(|e| wall_clock_us() >= e));
            save_reputation(&f, &d.node_ref().reputation)?;
            tracing::info!(node = %d.node_ref().address(), "stopped");
        }
        TransportKind::Sim => {
            let mut w = World::new(SimConfig::default());
            w.add_node(&f.name, &f.segment);
            let name = f.name.clone();
            {
                let node = w.node_mut(&name);
                if let Some(p) = &f.reputation_file {
                    node.reputation = ReputationStore::load(p, node.config.lambda);
                }
            }
            for (cap, availability, handler) in f.services()? {
                orchestrator::provider_serve(&mut w.client(&name), cap, availability, handler)?;
            }
            tracing::info!(node = %name, "announced");
            w.run_for(duration_ms.unwrap_or(1000) * 1000);
            print!("{}", w.event_log_text());
            save_reputation(&f, &w.node(&name).reputation)?;
        }
    }
    Ok(())
}

fn format_value(v: &TypedValue) -> String {
    match v {
        TypedValue::U16(x) => x.to_string(),
        TypedValue::U32(x) => x.to_string(),
        TypedValue::I32(x) => x.to_string(),
        TypedValue::F32(x) => format!("{x:?}"),
        TypedValue::F64(x) => format!("{x:?}"),
        TypedValue::Map(m) => format!("{m:?}"),
    }
}

fn print_session(
    s: &IntentSession,
    result: &Result<(), OrchestratorError>,
    explain: bool,
    name: &dyn Fn(NodeId) -> String,
) {
    if explain {
        println!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "candidate", "u_func", "u_cost", "u_trust", "u_avail", "total"
        );
        for c in &s.candidates {
            println!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name(c.node.node_id),
                c.u_func,
                c.u_cost,
                c.u_trust,
                c.u_avail,
                c.total
            );
        }
    } else {
        println!("{:<16} {:>8}", "candidate", "score");
        for c in &s.candidates {
            println!("{:<16} {:>8.4}", name(c.node.node_id), c.total);
        }
    }
    if result.is_ok() {
        if let Some(c) = &s.contract {
            println!(
                "contract {} provider {} capability {} {} -> {}{} expires {}",
                hex::encode(c.contract_id()),
                name(c.body.provider_id),
                c.body.capability.id,
                c.body.capability.schema.name(),
                c.body.agreed_schema.name(),
                c.body.adapter_id.as_ref().map(|a| format!(" via {a}")).unwrap_or_default(),
                c.body.expiry
            );
        }
    }
}

fn run_intent(
    d: &mut dyn Driver,
    intent: Intent,
    count: u32,
    explain: bool,
    name: &dyn Fn(NodeId) -> String,
) -> Result<()> {
    let mut s = IntentSession::new(intent);
    let r = orchestrator::establish(d, &mut s);
    print_session(&s, &r, explain, name);
    r?;
    let params = s.intent.params.clone();
    for _ in 0..count {
        let v = orchestrator::request_with_healing(d, &mut s, &params)?;
        println!("value {}", format_value(&v));
    }
    orchestrator::close(d, &mut s);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_intent(
    file: &Path,
    transport: TransportKind,
    config: Option<&Path>,
    script: Option<&Path>,
    requester: &str,
    seed: Option<u64>,
    count: u32,
    explain: bool,
) -> Result<()> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let intent = Intent::from_toml(&text)?;
    match transport {
        TransportKind::Sim => {
            let text = match script {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => line_script(),
            };
            let script = Script::parse(&text)?;
            let mut runner = Runner::new(&script, seed.unwrap_or(script.seed))?;
            for (i, step) in script.steps.iter().enumerate() {
                runner.run_step(i, step)?;
            }
            if runner.world.get(requester).is_none() {
                bail!("no node named {requester} in the script");
            }
            let names: Vec<(NodeId, String)> =
                runner.world.nodes().map(|(k, n)| (n.node_id(), k.to_owned())).collect();
            let name = move |id: NodeId| {
                names
                    .iter()
                    .find(|(n, _)| *n == id)
                    .map(|(_, k)| k.clone())
                    .unwrap_or_else(|| id.short())
            };
            run_intent(&mut runner.world.client(requester), intent, count, explain, &name)
        }
        TransportKind::Udp => {
            let config = config.ok_or_else(|| anyhow!("--config is required with --transport udp"))?;
            let f = NodeFile::load(config)?;
            let mut d = udp_driver(&f, false)?;
            let r = run_intent(&mut d, intent, count, explain, &|id: NodeId| id.short());
            save_reputation(&f, &d.node_ref().reputation)?;
            r
        }
    }
}

/// Line and column in `text` of byte `pos` inside the formula string.
fn formula_position(text: &str, formula: &str, pos: usize) -> Option<(usize, usize)> {
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_start();
        if !trimmed.starts_with("formula") {
            continue;
        }
        if let Some(start) = line.find(formula) {
            let col = line[..start].chars().count() + formula[..pos.min(formula.len())].chars().count() + 1;
            return Some((i + 1, col));
        }
    }
    None
}

fn cmd_adapter(descriptor: &Path, emit: Option<&Path>, test: Option<f64>) -> Result<()> {
    let text = std::fs::read_to_string(descriptor).with_context(|| format!("reading {}", descriptor.display()))?;
    let spec = match parse_adapter_toml(&text) {
        Ok(s) => s,
        Err(e) => {
            let pos = match &e {
                AdapterError::Lex { pos, .. } | AdapterError::UnexpectedToken { pos, .. } => Some(*pos),
                AdapterError::TrailingInput(pos) => Some(*pos),
                _ => None,
            };
            let formula = toml::from_str::<toml::Table>(&text).ok().and_then(|t| {
                t.get("adapter")
                    .and_then(|a| a.get("formula"))
                    .and_then(|f| f.as_str())
                    .map(str::to_owned)
            });
            if let (Some(pos), Some(formula)) = (pos, formula) {
                if let Some((line, col)) = formula_position(&text, &formula, pos) {
                    bail!("{}:{line}:{col}: {e}", descriptor.display());
                }
            }
            bail!("{}: {e}", descriptor.display());
        }
    };
    let module = emit_module(&parse_formula(&spec.formula)?, spec.width())?;
    if let Some(dir) = emit {
        std::fs::create_dir_all(dir)?;
        let wasm = dir.join(format!("{}.wasm", spec.id));
        let wat = dir.join(format!("{}.wat", spec.id));
        std::fs::write(&wasm, &module.wasm)?;
        std::fs::write(&wat, &module.text)?;
        println!("wrote {} ({} bytes) and {}", wasm.display(), module.wasm.len(), wat.display());
    }
    if let Some(x) = test {
        let reg = AdapterRegistry::new(SandboxConfig::default());
        let a = reg.get_or_compile(&spec)?;
        let input = coerce_output(x, spec.source_schema)?;
        let out = reg.apply(&a, &input)?;
        println!("{}", format_value(&out));
    }
    if emit.is_none() && test.is_none() {
        print!("{}", module.text);
    }
    Ok(())
}

fn cmd_vectors(out: &Path) -> Result<()> {
    let written = vectors::write_vectors(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn cmd_scenario(script: &str, seed: Option<u64>, report: Option<&Path>, event_log: Option<&Path>) -> Result<()> {
    let text = if Path::new(script).is_file() {
        std::fs::read_to_string(script).with_context(|| format!("reading {script}"))?
    } else if let Some(v) = FactoryVariant::parse(script) {
        v.script()
    } else {
        bail!("no script file or built-in scenario named {script}");
    };
    let (rep, result) = run_script_text(&text, seed);
    let lines = rep.to_jsonl();
    print!("{lines}");
    if let Some(p) = report {
        std::fs::write(p, &lines).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = event_log {
        std::fs::write(p, &rep.event_log).with_context(|| format!("writing {}", p.display()))?;
    }
    result?;
    Ok(())
}

fn cmd_bench(kind: BenchKind, size: usize) -> Result<()> {
    let r = bench::run(kind, size).map_err(|e| anyhow!(e))?;
    for t in &r.timings {
        println!(
            "{:<14} n={:<7} mean {:>10.2} us  median {:>10.2} us",
            t.name, t.samples, t.mean_us, t.median_us
        );
    }
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}
