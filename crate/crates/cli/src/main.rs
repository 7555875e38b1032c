use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use fedtwin::cdf::parse_cdf;
use fedtwin::federated::{run_station, InProcessTransport, StationPolicy, TcpServerTransport};
use fedtwin::harness::{
    export_trained, fedavg_session, format_summary, load_dataset, mean_global_curve, run_experiment, station_state,
    synth_cohort, write_artifacts, ExperimentConfig, ExperimentResult, SessionConfig, SynthParams, TransportConfig,
};
use fedtwin::pairing::{default_catalog, run_rule_tests, RuleTestCase};
use fedtwin::profile::{read_bundles, validate, write_bundles, BundleBuilder, ProfileSchema};
use fedtwin::projection::ProjectionSpec;

#[derive(Parser)]
#[command(name = "fedtwin", version, about = "Federated cardiovascular risk modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort in CDF form.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with generator parameters; `--n` still applies.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the latent outcomes as CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Build and validate resource bundles from a CDF file.
    Harmonize {
        #[arg(long)]
        cdf: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Bundles as JSON lines.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project bundles onto the modelling table.
    Flatten {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Run both arms over all seeds, write artifacts and a model package.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary table of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Pairing rule tooling.
    Rules {
        #[command(subcommand)]
        command: RulesCommand,
    },
    /// Serve a model package over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Allowed browser origin; any origin when absent.
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Drive one FedAvg session.
    Session {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one data station of a TCP session.
    Station {
        #[arg(long)]
        config: PathBuf,
        /// 1-based client id.
        #[arg(long)]
        client: u32,
        /// Projection spec whose expressions this station allows.
        #[arg(long)]
        allow: Option<PathBuf>,
        /// Server address; defaults to the session's bind address.
        #[arg(long)]
        connect: Option<String>,
    },
}

#[derive(Subcommand)]
enum RulesCommand {
    /// Run every JSON suite in a directory.
    Test { suites: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_spec(path: Option<&Path>) -> Result<ProjectionSpec> {
    match path {
        Some(p) => Ok(ProjectionSpec::from_json_str(&read(p)?)?),
        None => Ok(ProjectionSpec::default_spec()),
    }
}

fn synth(n: usize, seed: u64, params: Option<&Path>, out: &Path, truth: Option<&Path>) -> Result<ExitCode> {
    let mut p: SynthParams = match params {
        Some(path) => serde_json::from_str(&read(path)?)?,
        None => SynthParams::default(),
    };
    p.n = n;
    let cohort = synth_cohort(&p, seed)?;
    write(out, cohort.dataset.to_cdf_string())?;
    if let Some(path) = truth {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "eta", "event_time", "censor_time", "prevalent"])?;
        for t in &cohort.truth {
            w.write_record([
                t.id.clone(),
                t.eta.to_string(),
                t.event_time.to_string(),
                t.censor_time.to_string(),
                t.prevalent.to_string(),
            ])?;
        }
        write(path, w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    }
    eprintln!("{} participants written to {}", cohort.dataset.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn harmonize(cdf: &Path, schema: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let dataset = parse_cdf(fs::File::open(cdf).with_context(|| format!("opening {}", cdf.display()))?)?;
    let schema = match schema {
        Some(p) => ProfileSchema::from_json_str(&read(p)?)?,
        None => ProfileSchema::default_schema(),
    };
    let builder = BundleBuilder::new(default_catalog(), schema.clone())?;
    let bundles = builder.build_all(&dataset);
    write(out, write_bundles(&bundles))?;
    let violations: Vec<_> = bundles.iter().flat_map(|b| validate(b, &schema)).collect();
    for v in &violations {
        eprintln!("violation: {v}");
    }
    println!("{} bundles, {} violations", bundles.len(), violations.len());
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn flatten(bundles: &Path, spec: Option<&Path>, out: &Path, rejects: Option<&Path>) -> Result<ExitCode> {
    let bundles = read_bundles(&read(bundles)?)?;
    let projection = load_spec(spec)?.compile()?;
    let (table, rej) = projection.flatten(&bundles);
    write(out, table.to_csv_string())?;
    if let Some(path) = rejects {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "column", "reason"])?;
        for r in &rej {
            w.write_record([r.id.as_str(), r.column.as_deref().unwrap_or(""), r.reason.as_str()])?;
        }
        write(path, w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    }
    println!("{} rows, {} rejected", table.len(), rej.len());
    Ok(ExitCode::SUCCESS)
}

fn train(config: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_path(config)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let (result, model, data) = run_experiment(&cfg)?;
    write_artifacts(&result, &dir)?;
    match (model, &data.spec) {
        (Some(model), Some(spec)) => {
            let pkg = export_trained(&model, spec, read(config)?.as_bytes())?;
            write(&dir.join("model.json"), pkg.to_json())?;
        }
        (Some(_), None) => eprintln!("tabular dataset without path expressions: no model package written"),
        (None, _) => {}
    }
    print!("{}", format_summary(&result));
    for (seed, e) in &result.failures {
        eprintln!("seed {seed} failed: {e}");
    }
    println!("artifacts in {}", dir.display());
    Ok(if result.failures.is_empty() && !result.runs.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(run: &Path) -> Result<ExitCode> {
    let result: ExperimentResult = serde_json::from_str(&read(&run.join("result.json"))?)?;
    println!("{} ({} rows, {} excluded, {} seeds)", result.name, result.rows, result.excluded, result.runs.len());
    print!("{}", format_summary(&result));
    println!("mean global C by round:");
    for (i, c) in mean_global_curve(&result.runs).iter().enumerate() {
        match c {
            Some(c) => println!("  {:>2}  {c:.4}", i + 1),
            None => println!("  {:>2}  n/a", i + 1),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn rules_test(dir: &Path) -> Result<ExitCode> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        bail!("no JSON suites in {}", dir.display());
    }
    let catalog = default_catalog();
    let (mut passed, mut total) = (0, 0);
    for file in &files {
        let suite: Vec<RuleTestCase> =
            serde_json::from_str(&read(file)?).with_context(|| format!("parsing {}", file.display()))?;
        let report = run_rule_tests(&catalog, &suite);
        println!("== {}", file.display());
        println!("{report}");
        passed += report.passed();
        total += report.cases.len();
    }
    println!("total: {passed} of {total} cases passed");
    Ok(if passed == total { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn serve(model: &Path, bind: SocketAddr, origin: Option<&str>) -> Result<ExitCode> {
    let twin = fedtwin_service::load_package(model)?;
    eprintln!("serving {} on http://{bind}", model.display());
    tokio::runtime::Runtime::new()?.block_on(fedtwin_service::serve(twin, bind, origin))?;
    Ok(ExitCode::SUCCESS)
}

fn session(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = SessionConfig::from_path(config)?;
    let data = load_dataset(&cfg.experiment.dataset)?;
    let p = data.table.width();
    let spec = data.spec.as_ref();
    let (result, model) = match &cfg.transport {
        TransportConfig::InProcess => {
            let clients = (1..=cfg.clients() as u32)
                .map(|k| station_state(&data, &cfg.experiment, cfg.seed, k, spec.map(StationPolicy::for_spec)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut t = InProcessTransport::new(clients);
            fedavg_session(&mut t, spec, p, &cfg.experiment, cfg.seed)?
        }
        TransportConfig::Tcp { bind } => {
            let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
            eprintln!("waiting for {} stations on {bind}", cfg.clients());
            let mut t = TcpServerTransport::accept(&listener, cfg.clients(), cfg.timeout())?;
            fedavg_session(&mut t, spec, p, &cfg.experiment, cfg.seed)?
        }
    };
    fs::create_dir_all(out)?;
    let rounds: Vec<serde_json::Value> = result
        .rounds
        .iter()
        .map(|m| serde_json::json!({"round": m.round, "global": m.global, "local": m.local}))
        .collect();
    write(&out.join("session.json"), serde_json::to_string_pretty(&serde_json::json!({
        "seed": cfg.seed,
        "n_train": result.n_train,
        "rounds": rounds,
    }))?)?;
    if let Some(spec) = spec {
        let pkg = export_trained(&model, spec, read(config)?.as_bytes())?;
        write(&out.join("model.json"), pkg.to_json())?;
    }
    for m in &result.rounds {
        match m.global {
            Some(c) => println!("round {:>2}  global C {c:.4}", m.round),
            None => println!("round {:>2}  global C n/a", m.round),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn station(config: &Path, client: u32, allow: Option<&Path>, connect: Option<&str>) -> Result<ExitCode> {
    let cfg = SessionConfig::from_path(config)?;
    let addr = match (connect, &cfg.transport) {
        (Some(a), _) => a.to_string(),
        (None, TransportConfig::Tcp { bind }) => bind.clone(),
        (None, TransportConfig::InProcess) => bail!("in-process session: pass --connect"),
    };
    let data = load_dataset(&cfg.experiment.dataset)?;
    let policy = match (allow, &data.spec) {
        (Some(p), _) => Some(StationPolicy::for_spec(&load_spec(Some(p))?)),
        (None, Some(spec)) => Some(StationPolicy::for_spec(spec)),
        (None, None) => None,
    };
    let state = station_state(&data, &cfg.experiment, cfg.seed, client, policy)?;
    eprintln!("station {client}: {} training rows, connecting to {addr}", state.n_k());
    run_station(addr.as_str(), state, cfg.timeout())?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { n, seed, params, out, truth } => synth(n, seed, params.as_deref(), &out, truth.as_deref()),
        Command::Harmonize { cdf, schema, out } => harmonize(&cdf, schema.as_deref(), &out),
        Command::Flatten { bundles, spec, out, rejects } => flatten(&bundles, spec.as_deref(), &out, rejects.as_deref()),
        Command::Train { config, out } => train(&config, out.as_deref()),
        Command::Report { run } => report(&run),
        Command::Rules { command: RulesCommand::Test { suites } } => rules_test(&suites),
        Command::Serve { model, bind, cors_origin } => serve(&model, bind, cors_origin.as_deref()),
        Command::Session { config, out } => session(&config, &out),
        Command::Station { config, client, allow, connect } => station(&config, client, allow.as_deref(), connect.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
