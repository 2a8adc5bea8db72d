use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use diary::audit::{audit, AuditInput};
use diary::backend::{AuthorityRegistry, Backend, SystemClock};
use diary::dayfile;
use diary::sim::{self, Scenario};
use diary::transport::{ApiRequest, HttpTransport, Transport};
use diary::wire::{CtaDoc, ErrorDoc};
use serde_json::json;

#[derive(Parser)]
#[command(name = "diary", version, about = "Privacy-preserving contact and location tracing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the back-end HTTP service.
    Serve {
        /// SQLite database file.
        #[arg(long, default_value = "diary.sqlite")]
        db: PathBuf,
        /// Authority registry (TOML).
        #[arg(long)]
        authorities: Option<PathBuf>,
        #[arg(long, env = "DIARY_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Seed for CTA ids and export salts (default: random).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a simulation scenario and write its run directory.
    Simulate {
        scenario: PathBuf,
        /// Output directory (default: runs/<scenario>-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Publish a call-to-action document to a running server.
    PublishCta {
        file: PathBuf,
        #[arg(long, env = "DIARY_TOKEN", hide_env_values = true)]
        token: Option<String>,
        #[arg(long, env = "DIARY_SERVER", default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    /// Summarize a device directory or a single day file.
    InspectStore {
        path: PathBuf,
        /// Also list every sample.
        #[arg(long)]
        samples: bool,
    },
    /// Run the privacy audit over a simulation run directory.
    Audit { run_dir: PathBuf },
    /// Print the open-data CSV from a database or a running server.
    ExportOpendata {
        #[arg(long, default_value = "diary.sqlite", conflicts_with = "server")]
        db: PathBuf,
        #[arg(long, env = "DIARY_SERVER")]
        server: Option<String>,
        /// Seed for the export's row-key salt (default: random).
        #[arg(long)]
        seed: Option<u64>,
    },
}

struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            db,
            authorities,
            bind,
            seed,
        } => serve(&db, authorities.as_deref(), bind, seed),
        Command::Simulate { scenario, out, seed } => simulate(&scenario, out, seed),
        Command::PublishCta {
            file,
            token,
            server,
            idempotency_key,
        } => publish(&file, token, &server, idempotency_key),
        Command::InspectStore { path, samples } => inspect(&path, samples),
        Command::Audit { run_dir } => run_audit(&run_dir),
        Command::ExportOpendata { db, server, seed } => export(&db, server.as_deref(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let doc = ErrorDoc {
                error: f.code.into(),
                message: f.message,
            };
            eprintln!("{}", serde_json::to_string(&doc).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}

fn serve(db: &Path, authorities: Option<&Path>, bind: SocketAddr, seed: Option<u64>) -> CmdResult {
    let registry = match authorities {
        Some(p) => AuthorityRegistry::load(p).map_err(|e| Failure::new("config", e))?,
        None => AuthorityRegistry::default(),
    };
    let backend = Backend::open(db, registry, Arc::new(SystemClock), seed).map_err(|e| Failure::new("storage", e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("runtime", e))?;
    rt.block_on(diary::backend::serve(Arc::new(backend), bind))
        .map_err(|e| Failure::new("io", e))
}

fn simulate(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let mut scenario = Scenario::load(path).map_err(|e| Failure::new("scenario", e))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let out = out.unwrap_or_else(|| {
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(format!("{stem}-{}", scenario.seed))
    });
    let world = sim::run_scenario(&scenario);
    let metrics = world.metrics();
    let curve = sim::adoption_curve(&scenario, &scenario.adoption_curve);
    sim::write_run_dir(&out, &world, &metrics, &curve).map_err(|e| Failure::new("io", e))?;
    print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
    println!("run directory: {}", out.display());
    Ok(())
}

fn publish(file: &Path, token: Option<String>, server: &str, idempotency_key: Option<String>) -> CmdResult {
    let Some(token) = token.filter(|t| !t.is_empty()) else {
        return Err(Failure::new("unauthorized", "no bearer token given (use --token or DIARY_TOKEN)"));
    };
    let bytes = std::fs::read(file).map_err(|e| Failure::new("io", format!("{}: {e}", file.display())))?;
    let doc = CtaDoc::parse(&bytes).map_err(|e| Failure::new("invalid_cta", e))?;
    let mut req = ApiRequest::post("/v1/cta", serde_json::to_vec(&doc).expect("serializable")).bearer(&token);
    if let Some(k) = idempotency_key {
        req = req.header("idempotency-key", &k);
    }
    let resp = HttpTransport::new(server)
        .send(req)
        .map_err(|e| Failure::new("network", e))?;
    if !resp.is_success() {
        let code = match resp.status {
            401 => "unauthorized",
            403 => "forbidden",
            422 => "invalid_cta",
            _ => "rejected",
        };
        return Err(Failure::new(code, format!("server answered {}: {}", resp.status, resp.text())));
    }
    println!("{}", resp.text());
    Ok(())
}

fn inspect(path: &Path, list_samples: bool) -> CmdResult {
    let days = if path.is_dir() {
        dayfile::read_day_files(path).map_err(|e| Failure::new("store", e))?
    } else {
        let bytes = std::fs::read(path).map_err(|e| Failure::new("io", e))?;
        vec![dayfile::decode_day(&bytes).map_err(|e| Failure::new("store", e))?]
    };
    let known = path.join(dayfile::KNOWN_FILE);
    let known = if path.is_dir() && known.exists() {
        let bytes = std::fs::read(&known).map_err(|e| Failure::new("io", e))?;
        dayfile::decode_known(&bytes).map_err(|e| Failure::new("store", e))?
    } else {
        Vec::new()
    };
    let day_rows: Vec<_> = days
        .iter()
        .map(|d| {
            let mut row = json!({
                "day": diary::calendar::format_day(d.day),
                "samples": d.samples.len(),
                "discarded": d.samples.iter().filter(|s| s.discarded).count(),
                "notes": d.notes.len(),
                "contacts": d.contacts.len(),
                "broadcasts": d.broadcasts.len(),
                "bytes": dayfile::encode_contents(d).len(),
            });
            if list_samples {
                row["sample_list"] = d
                    .samples
                    .iter()
                    .map(|s| {
                        json!({
                            "t": s.sample.timestamp,
                            "lat": s.sample.position.lat(),
                            "lon": s.sample.position.lon(),
                            "accuracy_m": s.sample.accuracy,
                            "discarded": s.discarded,
                        })
                    })
                    .collect();
            }
            row
        })
        .collect();
    let out = json!({
        "days": day_rows,
        "known_locations": known
            .iter()
            .map(|k| json!({"id": k.id, "label": k.label, "radius_m": k.radius, "home": k.is_home}))
            .collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(())
}

fn run_audit(dir: &Path) -> CmdResult {
    let input = AuditInput::load(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    let report = audit(&input);
    if report.passed() {
        println!("PASS ({} messages, {} numbers scanned)", report.messages, report.coordinates_scanned);
        Ok(())
    } else {
        println!("FAIL");
        for v in &report.violations {
            println!("  {v}");
        }
        Err(Failure::new("audit_failed", format!("{} violations", report.violations.len())))
    }
}

fn export(db: &Path, server: Option<&str>, seed: Option<u64>) -> CmdResult {
    let csv = match server {
        Some(url) => {
            let resp = HttpTransport::new(url)
                .send(ApiRequest::get("/v1/opendata/daily.csv"))
                .map_err(|e| Failure::new("network", e))?;
            if !resp.is_success() {
                return Err(Failure::new("rejected", format!("server answered {}", resp.status)));
            }
            resp.text()
        }
        None => {
            if !db.exists() {
                return Err(Failure::new("io", format!("{}: no such database", db.display())));
            }
            let backend = Backend::open(db, AuthorityRegistry::default(), Arc::new(SystemClock), seed)
                .map_err(|e| Failure::new("storage", e))?;
            backend.export_csv().map_err(|e| Failure::new("storage", e))?
        }
    };
    print!("{csv}");
    Ok(())
}
