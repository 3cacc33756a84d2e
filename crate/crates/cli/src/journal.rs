//! Broker state between CLI invocations. The journal is a JSON-lines file: a
//! header naming the input files and settings, then one line per state-changing
//! step. Loading replays the steps against a fresh broker, which reproduces
//! the state exactly because every operation is deterministic.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use enclave_core::scenario::{self, Engine, LoadError, Step};
use enclave_core::BrokerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Load(#[from] LoadError),
    #[error(
        "no broker state at {0}; run `enclave init --topology <file> --directory <file>` first"
    )]
    NoState(PathBuf),
    #[error("broker state already exists at {0}; pass --force to replace it")]
    StateExists(PathBuf),
    #[error("{path}:{line}: corrupt journal entry: {message}")]
    Journal {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

/// First line of a journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub topology: PathBuf,
    pub directory: PathBuf,
    pub seed: Option<u64>,
    pub retention_days: Option<u64>,
}

impl Header {
    pub fn config(&self) -> BrokerConfig {
        let mut config = BrokerConfig::default();
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(days) = self.retention_days {
            config.retention_days = days;
        }
        config
    }

    /// Parses both input files and builds a broker from them.
    pub fn load(&self) -> Result<Engine, CliError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
        let topo_name = self.topology.display().to_string();
        let dir_name = self.directory.display().to_string();
        let topology = scenario::parse_topology(&topo_name, &read(&self.topology)?)?;
        let directory = scenario::parse_directory(&dir_name, &read(&self.directory)?)?;
        Ok(scenario::load(topology, &directory, self.config())?)
    }
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    header: Header,
}

impl Journal {
    /// Validates the inputs and writes a journal holding only the header.
    pub fn create(path: &Path, header: Header, force: bool) -> Result<(Journal, Engine), CliError> {
        if path.exists() && !force {
            return Err(CliError::StateExists(path.to_owned()));
        }
        let engine = header.load()?;
        let line = serde_json::to_string(&header).expect("headers serialize");
        fs::write(path, line + "\n").map_err(io_err(path))?;
        Ok((
            Journal {
                path: path.to_owned(),
                header,
            },
            engine,
        ))
    }

    /// Rebuilds the broker by replaying every recorded step.
    pub fn open(path: &Path) -> Result<(Journal, Engine), CliError> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::NoState(path.to_owned()),
            _ => CliError::Io {
                path: path.to_owned(),
                source: e,
            },
        })?;
        let corrupt = |line: usize, message: String| CliError::Journal {
            path: path.to_owned(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| corrupt(1, "empty journal".into()))?
            .map_err(io_err(path))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| corrupt(1, e.to_string()))?;
        let mut engine = header.load()?;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            let value = serde_json::from_str(&line).map_err(|e| corrupt(i + 2, e.to_string()))?;
            let step = Step::from_value(value).map_err(|e| corrupt(i + 2, e))?;
            // results were reported when the step first ran
            let _ = engine.execute(&step);
        }
        Ok((
            Journal {
                path: path.to_owned(),
                header,
            },
            engine,
        ))
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn append(&self, step: &Step) -> Result<(), CliError> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        writeln!(f, "{}", step.to_value()).map_err(io_err(&self.path))
    }
}
