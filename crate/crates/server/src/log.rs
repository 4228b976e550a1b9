use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use vfm_api::LogRecord;

/// Append-only JSON-lines request log.
///
/// Records are written in the order the server committed them, so replaying
/// the file sequentially against a fresh server reproduces every response.
#[derive(Debug)]
pub struct RequestLog {
    inner: Mutex<(u64, BufWriter<File>)>,
}

impl RequestLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(RequestLog {
            inner: Mutex::new((0, BufWriter::new(file))),
        })
    }

    pub fn append(&self, method: &str, uri: &str, body: &[u8], status: u16, response: &serde_json::Value) {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (seq, out) = &mut *guard;
        *seq += 1;
        let record = LogRecord {
            seq: *seq,
            method: method.to_string(),
            uri: uri.to_string(),
            body: String::from_utf8_lossy(body).into_owned(),
            status,
            response: response.clone(),
        };
        let written = serde_json::to_writer(&mut *out, &record)
            .map_err(io::Error::from)
            .and_then(|_| out.write_all(b"\n"))
            .and_then(|_| out.flush());
        if let Err(e) = written {
            tracing::warn!("request log write failed: {e}");
        }
    }
}
