//! Command-line front end. State lives in a directory: the scenario config,
//! the ledger as JSON Lines and, between `unlearn` and `verify`, the pending
//! unlearning report. Everything else is rebuilt from the ledger.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fedunlearn::chaincode::{Chaincode, ChaincodeConfig};
use fedunlearn::clock::{LatencyProfile, SimClock};
use fedunlearn::fedcore::{self, Agent, ClientState, Network};
use fedunlearn::harness::scenario::{build_corpora, Federation, AGENT_ID};
use fedunlearn::harness::sweep::{read_rows, write_rows, BaselineRow};
use fedunlearn::harness::{
    corpus, emit_report, generate_corpus, generate_flipped_corpus, run_scenario, run_sweep, time_cost_table,
    CorpusSource, HarnessError, ScenarioConfig, SweepGrid, SweepRow,
};
use fedunlearn::identity::{generate_token, key_generator, Role, UserPool};
use fedunlearn::ledger::export::{import_jsonl, to_jsonl};
use fedunlearn::tinylm::{Example, LoraConfig};
use fedunlearn::unlearner::{UnlearnConfig, UnlearnReport, ValidationSet, VerificationCriteria};
use fedunlearn::{seed, Error, Result};

const CONFIG_FILE: &str = "config.json";
const LEDGER_FILE: &str = "ledger.jsonl";
const METRICS_FILE: &str = "metrics.csv";
const PENDING_FILE: &str = "pending_unlearn.json";

#[derive(Parser)]
#[command(name = "fedunlearn", version, about = "Ledger-audited federated LoRA training and unlearning")]
struct Cli {
    /// State directory.
    #[arg(long, global = true, default_value = "fedunlearn-state")]
    state: PathBuf,
    /// Scenario config (JSON). Read by `init`, `sweep` and `run`; later
    /// commands use the copy stored in the state directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a deployment: register the agent and upload the initial model.
    Init {
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing state directory.
        #[arg(long)]
        force: bool,
    },
    /// Register a client; its private data is generated from the config.
    Register {
        #[arg(long)]
        client_id: String,
    },
    /// Run federated rounds with every registered client.
    Train {
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Compute an unlearning report for a client; `verify` commits it.
    Unlearn {
        #[arg(long)]
        client_id: String,
        #[arg(long)]
        eu: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// `r,alpha,dropout`
        #[arg(long, value_parser = parse_lora)]
        lora: Option<LoraConfig>,
    },
    /// Verify the pending report on the chaincode and commit it on a pass.
    Verify {
        #[arg(long)]
        tau_forget: Option<f64>,
        #[arg(long)]
        delta_retain: Option<f64>,
    },
    /// Sweep the unlearning adapter over a grid file (JSON).
    Sweep {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output directory; defaults to `<state>/sweep`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the time-cost table as CSV.
    Timecost {
        #[arg(long, default_value = "paper")]
        profile: String,
        /// Ledger transactions per iteration.
        #[arg(long, default_value_t = 1)]
        txs: u64,
    },
    /// Write the ledger as JSON Lines.
    ExportLedger { path: PathBuf },
    /// Summarise the sweep results in a directory.
    Report { dir: PathBuf },
    /// Run a whole scenario in memory and write its artifacts.
    Run {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fedunlearn-run")]
        out: PathBuf,
    },
}

fn parse_lora(s: &str) -> std::result::Result<LoraConfig, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [r, alpha, dropout] = parts.as_slice() else {
        return Err("expected r,alpha,dropout".into());
    };
    Ok(LoraConfig::new(
        r.parse().map_err(|e| format!("r: {e}"))?,
        alpha.parse().map_err(|e| format!("alpha: {e}"))?,
        dropout.parse().map_err(|e| format!("dropout: {e}"))?,
    ))
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    seed: u64,
    scenario: ScenarioConfig,
}

#[derive(Serialize, Deserialize)]
struct Pending {
    client_id: String,
    report: UnlearnReport,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    HarnessError::IoError(format!("{}: {e}", path.display())).into()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Scenario config: `--config` if given, else the state copy, else defaults.
fn scenario_config(cli: &Cli) -> Result<ScenarioConfig> {
    if let Some(p) = &cli.config {
        return read_json(p);
    }
    let stored = cli.state.join(CONFIG_FILE);
    if stored.exists() {
        return Ok(read_json::<StateFile>(&stored)?.scenario);
    }
    Ok(ScenarioConfig::default())
}

fn key_seed(seed: u64) -> u64 {
    seed::derive("harness/keys", &[seed])
}

/// Private data of `id`: the generated corpus for configured clients, a
/// fresh synthetic corpus for any other id.
fn client_data(cfg: &ScenarioConfig, seed: u64, id: &str) -> Result<Vec<Example>> {
    let corpora = build_corpora(cfg, seed)?;
    if let Some((_, samples)) = corpora.clients.iter().find(|(c, _)| c == id) {
        return Ok(corpus::to_examples(samples, cfg.model.max_len));
    }
    match cfg.corpus {
        CorpusSource::Synthetic => {
            let s = seed::derive(&format!("harness/corpus/{id}"), &[seed]);
            let samples = if id == cfg.forget_id() {
                generate_flipped_corpus(s, cfg.samples_per_client, cfg.class_balance)
            } else {
                generate_corpus(s, cfg.samples_per_client, cfg.class_balance)
            };
            Ok(corpus::to_examples(&samples, cfg.model.max_len))
        }
        CorpusSource::Csv { .. } => Err(HarnessError::InvalidConfig(format!("{id} has no rows in the csv corpus")).into()),
    }
}

/// A deployment rebuilt from the state directory.
struct Loaded {
    state: StateFile,
    fed: Federation,
}

impl Loaded {
    fn open(dir: &Path) -> Result<Loaded> {
        let state: StateFile = read_json(&dir.join(CONFIG_FILE))?;
        let cfg = &state.scenario;
        let chain = import_jsonl(&read(&dir.join(LEDGER_FILE))?)?;
        let latency = cfg.latency_profile()?;
        let pool = UserPool::replay(&chain, key_seed(state.seed), fedunlearn::identity::DEFAULT_TTL_S)?;
        let contract = Chaincode::replay(&chain, ChaincodeConfig { payloads: cfg.payloads })?;
        let start = chain.last_time().unwrap_or(latency.setup_s + latency.consensus_s);
        let net = Network {
            chain,
            pool,
            contract,
            clock: SimClock::starting_at(start),
            latency,
        };
        let now = net.clock.now();
        let ttl = net.pool.ttl_s();
        let token = |id: &str, role| -> Result<_> {
            let keys = key_generator(net.pool.key_seed_for(id));
            let tok = generate_token(&keys, id, role, now, ttl)?;
            Ok((keys, tok))
        };
        let (agent_keys, agent_token) = token(AGENT_ID, Role::Agent)?;
        let agent = Agent::new(AGENT_ID, agent_keys, agent_token);
        let mut ids: Vec<String> = net
            .pool
            .entries()
            .filter(|(_, e)| e.role == Role::Client)
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        let mut clients = Vec::with_capacity(ids.len());
        for id in &ids {
            let (keys, tok) = token(id, Role::Client)?;
            clients.push(ClientState::new(id, keys, tok, client_data(cfg, state.seed, id)?).map_err(Error::from)?);
        }
        let validation = corpus::to_examples(&build_corpora(cfg, state.seed)?.validation, cfg.model.max_len);
        let fed = Federation {
            net,
            agent,
            clients,
            forget_id: cfg.forget_id(),
            forget_data: Vec::new(),
            retain_data: Vec::new(),
            validation,
            rounds: Vec::new(),
        };
        Ok(Loaded { state, fed })
    }

    fn save_ledger(&self, dir: &Path) -> Result<()> {
        write(&dir.join(LEDGER_FILE), to_jsonl(&self.fed.net.chain))
    }

    /// Points the federation at `id` as the forgetting client.
    fn select_forget(&mut self, id: &str) -> Result<()> {
        let client = self
            .fed
            .clients
            .iter()
            .find(|c| c.c_id() == id)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("{id} is not a registered client")))?;
        let fraction = self.state.scenario.forget_fraction;
        self.fed.forget_data = client.forget_request(UnlearnConfig::default(), 0, 0, fraction).forget;
        self.fed.forget_id = id.to_owned();
        Ok(())
    }
}

fn cmd_init(cli: &Cli, seed: Option<u64>, force: bool) -> Result<String> {
    let dir = &cli.state;
    if dir.join(CONFIG_FILE).exists() && !force {
        return Err(HarnessError::InvalidConfig(format!("{} is already initialised", dir.display())).into());
    }
    let cfg = scenario_config(cli)?;
    cfg.validate()?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let mut net = Network::new(key_seed(seed), cfg.latency_profile()?, ChaincodeConfig { payloads: cfg.payloads });
    let agent = net.register_agent(AGENT_ID)?;
    let model = fedcore::initial_model(cfg.model_for(seed), cfg.train_lora.as_ref())?;
    let (version, t_id) = net.upload(&agent, &model)?;
    let _ = fs::remove_file(dir.join(PENDING_FILE));
    let _ = fs::remove_file(dir.join(METRICS_FILE));
    write(&dir.join(CONFIG_FILE), to_json(&StateFile { seed, scenario: cfg }))?;
    write(&dir.join(LEDGER_FILE), to_jsonl(&net.chain))?;
    Ok(to_json(&serde_json::json!({ "seed": seed, "version": version, "t_id": t_id })))
}

fn cmd_register(cli: &Cli, id: &str) -> Result<String> {
    let mut l = Loaded::open(&cli.state)?;
    let data = client_data(&l.state.scenario, l.state.seed, id)?;
    let client = l.fed.net.register_client(id, data)?;
    let t_id = l.fed.net.pool.get(id).map(|e| e.registration);
    l.save_ledger(&cli.state)?;
    Ok(to_json(&serde_json::json!({
        "client_id": client.c_id(),
        "samples": client.sample_count(),
        "t_id": t_id,
    })))
}

fn cmd_train(cli: &Cli, rounds: usize, epochs: Option<usize>, eta: Option<f64>) -> Result<String> {
    let mut l = Loaded::open(&cli.state)?;
    if l.fed.clients.is_empty() {
        return Err(HarnessError::InvalidConfig("no registered clients".into()).into());
    }
    let cfg = &l.state.scenario;
    let mut round_cfg = cfg.round_for(l.state.seed);
    round_cfg.epochs = epochs.unwrap_or(round_cfg.epochs);
    round_cfg.eta = eta.unwrap_or(round_cfg.eta);
    let exec = cfg.exec;
    l.fed.train(&round_cfg, rounds, exec)?;
    l.save_ledger(&cli.state)?;

    let mut buf = Vec::new();
    fedcore::write_metrics_csv(&l.fed.rounds, &mut buf).map_err(HarnessError::from)?;
    let path = cli.state.join(METRICS_FILE);
    let mut text = String::from_utf8(buf).expect("csv is utf-8");
    if path.exists() {
        text = text.split_once('\n').map(|(_, rest)| rest.to_owned()).unwrap_or_default();
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))?;

    let last = l.fed.rounds.last();
    Ok(to_json(&serde_json::json!({
        "rounds": l.fed.rounds.len(),
        "version": last.map(|r| r.version),
        "global_accuracy": last.and_then(|r| r.global_accuracy),
        "sim_time_s": l.fed.net.clock.now(),
    })))
}

fn cmd_unlearn(cli: &Cli, id: &str, eu: Option<usize>, eta: Option<f64>, lora: Option<LoraConfig>) -> Result<String> {
    let mut l = Loaded::open(&cli.state)?;
    l.select_forget(id)?;
    let base = &l.state.scenario.unlearn;
    let config = UnlearnConfig {
        epochs: eu.unwrap_or(base.epochs),
        eta: eta.unwrap_or(base.eta),
        lora: lora.unwrap_or_else(|| base.lora.clone()),
        ..base.clone()
    };
    let cfg = &l.state.scenario;
    let report = l.fed.unlearn(&config, l.state.seed, cfg.forget_fraction, cfg.exec)?;
    let summary = serde_json::json!({
        "client_id": id,
        "base_version": report.base_version,
        "acc_forget_before": report.acc_forget_before,
        "acc_forget_after": report.acc_forget_after,
        "acc_retain_before": report.acc_retain_before,
        "acc_retain_after": report.acc_retain_after,
        "epochs_run": report.epochs_run,
        "grad_steps": report.grad_steps,
    });
    write(
        &cli.state.join(PENDING_FILE),
        to_json(&Pending {
            client_id: id.to_owned(),
            report,
        }),
    )?;
    Ok(to_json(&summary))
}

fn cmd_verify(cli: &Cli, tau_forget: Option<f64>, delta_retain: Option<f64>) -> Result<String> {
    let pending_path = cli.state.join(PENDING_FILE);
    if !pending_path.exists() {
        return Err(HarnessError::InvalidConfig("no pending unlearning report; run `unlearn` first".into()).into());
    }
    let pending: Pending = read_json(&pending_path)?;
    let mut l = Loaded::open(&cli.state)?;
    l.select_forget(&pending.client_id)?;
    let cfg = &l.state.scenario;
    let criteria = VerificationCriteria {
        tau_forget: tau_forget.unwrap_or(cfg.criteria.tau_forget),
        delta_retain: delta_retain.or(cfg.criteria.delta_retain),
    };
    let fed = &mut l.fed;
    fed.net.clock.advance(fed.net.latency.epoch_s * pending.report.epochs_run as f64);
    fed.refresh_tokens()?;
    fed.net.tick_tx();
    let now = fed.net.tick_tx();
    let token = fed.forget_client().token.clone();
    let t_id = fed.net.contract.commit_unlearning_result(
        &fed.net.pool,
        &mut fed.net.chain,
        &token,
        &pending.report,
        &criteria,
        ValidationSet {
            forget: &fed.forget_data,
            retain: &fed.validation,
        },
        cfg.exec,
        now,
    )?;
    let record = fed.net.contract.unlearned().last().cloned();
    l.save_ledger(&cli.state)?;
    fs::remove_file(&pending_path).map_err(|e| io_err(&pending_path, e))?;
    Ok(to_json(&serde_json::json!({
        "t_id": t_id,
        "measured": record.as_ref().map(|r| r.measured),
        "unlearned_digest": record.map(|r| r.unlearned_digest),
    })))
}

fn cmd_sweep(cli: &Cli, grid: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let cfg = scenario_config(cli)?;
    let grid: SweepGrid = match grid {
        Some(p) => read_json(p)?,
        None => SweepGrid::default(),
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cli.state.join("sweep"));
    let res = run_sweep(&cfg, &grid)?;
    let mut rows = Vec::new();
    write_rows(&res.rows, &mut rows)?;
    write(&out.join("sweep.csv"), rows)?;
    if !res.baselines.is_empty() {
        let mut b = Vec::new();
        write_rows(&res.baselines, &mut b)?;
        write(&out.join("baseline.csv"), b)?;
    }
    Ok(to_json(&serde_json::json!({
        "rows": res.rows.len(),
        "baselines": res.baselines.len(),
        "out": out,
    })))
}

fn cmd_timecost(profile: &str, txs: u64) -> Result<String> {
    let p = LatencyProfile::by_name(profile)
        .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown latency profile {profile:?}")))?;
    let mut buf = Vec::new();
    write_rows(&time_cost_table(&p, txs), &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8").trim_end().to_owned())
}

fn cmd_export(cli: &Cli, path: &Path) -> Result<String> {
    let chain = import_jsonl(&read(&cli.state.join(LEDGER_FILE))?)?;
    write(path, to_jsonl(&chain))?;
    Ok(to_json(&serde_json::json!({
        "blocks": chain.len(),
        "head": chain.head_hash(),
        "path": path,
    })))
}

fn cmd_report(dir: &Path) -> Result<String> {
    let sweep = dir.join("sweep.csv");
    let rows: Vec<SweepRow> = read_rows(fs::File::open(&sweep).map_err(|e| io_err(&sweep, e))?)?;
    let baseline = dir.join("baseline.csv");
    let baselines: Vec<BaselineRow> = if baseline.exists() {
        read_rows(fs::File::open(&baseline).map_err(|e| io_err(&baseline, e))?)?
    } else {
        Vec::new()
    };
    let files = emit_report(dir, &rows, &baselines)?;
    Ok(files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
}

fn cmd_run(cli: &Cli, seed: Option<u64>, out: &Path) -> Result<String> {
    let cfg = scenario_config(cli)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let outcome = run_scenario(&cfg, seed)?;
    outcome.write_artifacts(out)?;
    Ok(to_json(&serde_json::json!({
        "seed": seed,
        "commit": outcome.commit,
        "final_model_digest": outcome.final_model_digest(),
        "comparison": outcome.comparison,
        "out": out,
    })))
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Init { seed, force } => cmd_init(cli, *seed, *force),
        Command::Register { client_id } => cmd_register(cli, client_id),
        Command::Train { rounds, epochs, eta } => cmd_train(cli, *rounds, *epochs, *eta),
        Command::Unlearn {
            client_id,
            eu,
            eta,
            lora,
        } => cmd_unlearn(cli, client_id, *eu, *eta, lora.clone()),
        Command::Verify {
            tau_forget,
            delta_retain,
        } => cmd_verify(cli, *tau_forget, *delta_retain),
        Command::Sweep { grid, out } => cmd_sweep(cli, grid.as_deref(), out.as_deref()),
        Command::Timecost { profile, txs } => cmd_timecost(profile, *txs),
        Command::ExportLedger { path } => cmd_export(cli, path),
        Command::Report { dir } => cmd_report(dir),
        Command::Run { seed, out } => cmd_run(cli, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(out) => {
            // A closed pipe (e.g. `| head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
