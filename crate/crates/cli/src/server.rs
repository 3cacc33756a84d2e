//! TCP service. Each connection gets a thread; every request takes the one
//! broker lock, so requests from all clients apply in a single order.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use enclave_core::scenario::Engine;

use crate::journal::Journal;
use crate::protocol;

pub struct Shared {
    pub engine: Engine,
    /// Where state-changing requests are recorded, if anywhere.
    pub journal: Option<Journal>,
}

fn connection(stream: TcpStream, shared: Arc<Mutex<Shared>>) -> std::io::Result<()> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = {
            let mut guard = shared
                .lock()
                .unwrap_or_else(|poisoned| poisoned.into_inner());
            let handled = protocol::handle(&mut guard.engine, &line);
            if let (Some(step), Some(journal)) = (&handled.journal, &guard.journal) {
                if let Err(e) = journal.append(step) {
                    eprintln!("journal write failed: {e}");
                }
            }
            handled.response
        };
        writeln!(out, "{response}")?;
        out.flush()?;
    }
    Ok(())
}

/// Accepts connections until the listener fails.
pub fn serve(listener: TcpListener, shared: Shared) -> std::io::Result<()> {
    let shared = Arc::new(Mutex::new(shared));
    for stream in listener.incoming() {
        let stream = stream?;
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            if let Err(e) = connection(stream, shared) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    Ok(())
}
