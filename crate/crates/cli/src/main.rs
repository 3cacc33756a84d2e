use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use enclave_cli::args::{self, AuditCmd, Cli, Command, Global};
use enclave_cli::server::{self, Shared};
use enclave_cli::{protocol, CliError, Header, Journal};
use enclave_core::scenario::{self, Overrides, Source, Step, StepError};
use serde_json::{json, Value};

const EXIT_REFUSED: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn init(global: &Global, force: bool) -> Result<ExitCode, CliError> {
    let header = Header {
        topology: absolute(required(&global.topology, "topology")?)?,
        directory: absolute(required(&global.directory, "directory")?)?,
        seed: global.seed,
        retention_days: global.retention_days,
    };
    let (_, engine) = Journal::create(&global.state, header, force)?;
    let b = engine.broker();
    let summary = json!({
        "state": global.state,
        "projects": b.projects().count(),
        "events": b.ledger().len(),
    });
    println!("{}", json!({ "ok": true, "result": summary }));
    Ok(ExitCode::SUCCESS)
}

fn run(global: &Global, ledger: bool) -> Result<ExitCode, CliError> {
    let paths = [
        required(&global.topology, "topology")?,
        required(&global.directory, "directory")?,
        required(&global.scenario, "scenario")?,
    ];
    let (t, d, s) = (read(paths[0])?, read(paths[1])?, read(paths[2])?);
    let names = paths.map(|p| p.display().to_string());
    let report = scenario::replay(
        Source {
            file: &names[0],
            text: &t,
        },
        Source {
            file: &names[1],
            text: &d,
        },
        Source {
            file: &names[2],
            text: &s,
        },
        Overrides {
            seed: global.seed,
            retention_days: global.retention_days,
        },
    )?;
    for r in &report.records {
        let mark = if r.matched { "ok  " } else { "FAIL" };
        let line = r.line.map_or(String::new(), |l| format!(" (line {l})"));
        println!("{mark} {:>3}{line} {}: {}", r.index, r.op, r.actual);
    }
    if let Some(diff) = &report.diff {
        eprintln!("{diff}");
    }
    if ledger {
        print!("{}", report.ledger_export);
    }
    Ok(ExitCode::from(report.status.code() as u8))
}

fn serve(global: &Global) -> Result<ExitCode, CliError> {
    let (journal, engine) = Journal::open(&global.state)?;
    let listener = TcpListener::bind(global.listen).map_err(|source| CliError::Io {
        path: global.listen.to_string().into(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| CliError::Io {
        path: global.listen.to_string().into(),
        source,
    })?;
    println!("listening on {addr}");
    server::serve(
        listener,
        Shared {
            engine,
            journal: Some(journal),
        },
    )
    .map_err(|source| CliError::Io {
        path: addr.to_string().into(),
        source,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn verb(global: &Global, command: Command) -> Result<ExitCode, CliError> {
    let (journal, mut engine) = Journal::open(&global.state)?;
    if matches!(command, Command::Audit(AuditCmd::Ledger)) {
        print!("{}", engine.broker().ledger().export());
        return Ok(ExitCode::SUCCESS);
    }
    let op = args::to_op(command).expect("only broker operations reach here");
    let mut step = Step::new(op);
    if let Some(at) = global.at {
        step = step.at(at);
    }
    let result = engine.execute(&step);
    let mut response = match &result {
        Ok(outcome) => protocol::ok(&Value::Null, outcome),
        Err(e) => protocol::error(&Value::Null, e.code(), &e.to_string()),
    };
    if let Value::Object(m) = &mut response {
        m.remove("id");
    }
    println!("{response}");
    match result {
        Err(StepError::Invalid(_)) => Ok(ExitCode::from(EXIT_USAGE)),
        result => {
            if !step.op.is_read_only() {
                journal.append(&step)?;
            }
            Ok(if result.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_REFUSED)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { force } => init(&cli.global, force),
        Command::Run { ledger } => run(&cli.global, ledger),
        Command::Serve => serve(&cli.global),
        command => verb(&cli.global, command),
    };
    result.unwrap_or_else(|e| {
        eprintln!("enclave: {e}");
        ExitCode::from(EXIT_USAGE)
    })
}
