//! Out-of-process backends over line-delimited JSON.
//!
//! Each request is one line `{"op": ..., "payload": ...}`; each response is
//! one line `{"ok": true, "result": ...}` or `{"ok": false, "error": ...}`.
//!
//! | op                    | payload                          | result                |
//! |-----------------------|----------------------------------|-----------------------|
//! | `asr.transcribe_kbest`| `{"utterance": Utterance, "k"}`  | `KBestList`           |
//! | `asr.fine_tune`       | `{"records": [FineTuneRecord]}`  | `null`                |
//! | `asr.snapshot`        | `null`                           | `{"blob": base64}`    |
//! | `asr.restore`         | `{"blob": base64}`               | `null`                |
//! | `asr.kind`            | `null`                           | string                |
//! | `mt.translate`        | `{"source": string}`             | string                |
//! | `mt.fine_tune`        | `{"records": [FineTuneRecord]}`  | `null`                |
//! | `mt.snapshot`         | `null`                           | `{"blob": base64}`    |
//! | `mt.restore`          | `{"blob": base64}`               | `null`                |
//! | `mt.kind`             | `null`                           | string                |
//!
//! Record weights are sent verbatim; how they enter training is up to the
//! server.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AsrBackend, MtBackend};
use crate::error::{Error, Result};
use crate::selection::FineTuneRecord;
use crate::text::{KBestList, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(result: Value) -> Self {
        Response {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        Response {
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }
}

/// Carries one request to a server and returns its response.
pub trait Transport: Send {
    fn call(&mut self, request: &Request) -> Result<Response>;
}

/// Child process speaking the protocol on stdin/stdout.
pub struct ProcessTransport {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ProcessTransport {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::backend(format!("cannot start {command:?}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessTransport { child, stdin, stdout })
    }
}

impl Transport for ProcessTransport {
    fn call(&mut self, request: &Request) -> Result<Response> {
        let io = |e: std::io::Error| Error::backend(format!("backend process I/O: {e}"));
        serde_json::to_writer(&mut self.stdin, request)?;
        self.stdin.write_all(b"\n").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::backend("backend process closed its output"));
        }
        serde_json::from_str(&line).map_err(|e| Error::backend(format!("malformed backend response: {e}")))
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serves the protocol from in-process backends.
pub struct Server {
    pub asr: Box<dyn AsrBackend>,
    pub mt: Box<dyn MtBackend>,
}

#[derive(Deserialize)]
struct KbestPayload {
    utterance: Utterance,
    k: usize,
}

#[derive(Deserialize)]
struct RecordsPayload {
    records: Vec<FineTuneRecord>,
}

#[derive(Deserialize)]
struct BlobPayload {
    blob: String,
}

#[derive(Deserialize)]
struct TranslatePayload {
    source: String,
}

fn parse<T: serde::de::DeserializeOwned>(payload: Value) -> Result<T> {
    serde_json::from_value(payload).map_err(|e| Error::input(format!("bad payload: {e}")))
}

fn decode_blob(payload: Value) -> Result<Vec<u8>> {
    let p: BlobPayload = parse(payload)?;
    B64.decode(p.blob)
        .map_err(|e| Error::input(format!("bad blob encoding: {e}")))
}

impl Server {
    pub fn new(asr: Box<dyn AsrBackend>, mt: Box<dyn MtBackend>) -> Self {
        Server { asr, mt }
    }

    pub fn handle(&mut self, request: Request) -> Response {
        match self.dispatch(request) {
            Ok(v) => Response::success(v),
            Err(e) => Response::failure(e.to_string()),
        }
    }

    fn dispatch(&mut self, Request { op, payload }: Request) -> Result<Value> {
        Ok(match op.as_str() {
            "asr.kind" => json!(self.asr.kind()),
            "asr.transcribe_kbest" => {
                let p: KbestPayload = parse(payload)?;
                serde_json::to_value(self.asr.transcribe_kbest(&p.utterance, p.k)?)?
            }
            "asr.fine_tune" => {
                let p: RecordsPayload = parse(payload)?;
                self.asr.fine_tune(&p.records)?;
                Value::Null
            }
            "asr.snapshot" => json!({ "blob": B64.encode(self.asr.snapshot()?) }),
            "asr.restore" => {
                self.asr.restore(&decode_blob(payload)?)?;
                Value::Null
            }
            "mt.kind" => json!(self.mt.kind()),
            "mt.translate" => {
                let p: TranslatePayload = parse(payload)?;
                json!(self.mt.translate(&p.source)?)
            }
            "mt.fine_tune" => {
                let p: RecordsPayload = parse(payload)?;
                self.mt.fine_tune(&p.records)?;
                Value::Null
            }
            "mt.snapshot" => json!({ "blob": B64.encode(self.mt.snapshot()?) }),
            "mt.restore" => {
                self.mt.restore(&decode_blob(payload)?)?;
                Value::Null
            }
            other => return Err(Error::input(format!("unknown op {other:?}"))),
        })
    }

    /// Answers requests line by line until `input` is exhausted.
    pub fn serve(&mut self, input: impl BufRead, mut output: impl Write) -> Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let response = match serde_json::from_str::<Request>(&line) {
                Ok(req) => self.handle(req),
                Err(e) => Response::failure(format!("malformed request: {e}")),
            };
            serde_json::to_writer(&mut output, &response)?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(())
    }
}

/// Transport that hands requests straight to an in-process [`Server`].
pub struct LocalTransport(pub Server);

impl Transport for LocalTransport {
    fn call(&mut self, request: &Request) -> Result<Response> {
        Ok(self.0.handle(request.clone()))
    }
}

type Shared = Arc<Mutex<Box<dyn Transport>>>;

fn call(transport: &Shared, op: &str, payload: Value) -> Result<Value> {
    let mut t = transport
        .lock()
        .map_err(|_| Error::backend("backend transport poisoned"))?;
    let response = t.call(&Request {
        op: op.to_owned(),
        payload,
    })?;
    if response.ok {
        Ok(response.result.unwrap_or(Value::Null))
    } else {
        Err(Error::backend(format!(
            "{op}: {}",
            response.error.unwrap_or_else(|| "unspecified error".into())
        )))
    }
}

fn blob(result: Value) -> Result<Vec<u8>> {
    let p: BlobPayload =
        serde_json::from_value(result).map_err(|e| Error::backend(format!("bad snapshot result: {e}")))?;
    B64.decode(p.blob)
        .map_err(|e| Error::backend(format!("bad snapshot encoding: {e}")))
}

fn kind_of(transport: &Shared, op: &str) -> Result<String> {
    match call(transport, op, Value::Null)? {
        Value::String(s) => Ok(s),
        other => Err(Error::backend(format!("{op} returned {other}"))),
    }
}

/// ASR backend behind a [`Transport`].
pub struct ExternalAsr {
    transport: Shared,
    kind: String,
}

/// MT backend behind a [`Transport`].
pub struct ExternalMt {
    transport: Shared,
    kind: String,
}

/// Connects both backends to one server.
pub fn connect(transport: Box<dyn Transport>) -> Result<(ExternalAsr, ExternalMt)> {
    let shared: Shared = Arc::new(Mutex::new(transport));
    let asr = ExternalAsr {
        kind: kind_of(&shared, "asr.kind")?,
        transport: shared.clone(),
    };
    let mt = ExternalMt {
        kind: kind_of(&shared, "mt.kind")?,
        transport: shared,
    };
    Ok((asr, mt))
}

/// Spawns `command` and connects both backends to it.
pub fn spawn(command: &str) -> Result<(ExternalAsr, ExternalMt)> {
    connect(Box::new(ProcessTransport::spawn(command)?))
}

impl AsrBackend for ExternalAsr {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn transcribe_kbest(&self, utterance: &Utterance, k: usize) -> Result<KBestList> {
        let v = call(
            &self.transport,
            "asr.transcribe_kbest",
            json!({ "utterance": utterance, "k": k }),
        )?;
        let list: KBestList =
            serde_json::from_value(v).map_err(|e| Error::backend(format!("bad k-best result: {e}")))?;
        list.validate()
            .map_err(|e| Error::backend(format!("invalid k-best result: {e}")))?;
        if list.utterance_id != utterance.id || list.len() > k {
            return Err(Error::backend("k-best result does not match the request"));
        }
        Ok(list)
    }

    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()> {
        call(&self.transport, "asr.fine_tune", json!({ "records": records })).map(drop)
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        blob(call(&self.transport, "asr.snapshot", Value::Null)?)
    }

    fn restore(&mut self, blob: &[u8]) -> Result<()> {
        call(
            &self.transport,
            "asr.restore",
            json!({ "blob": B64.encode(blob) }),
        )
        .map(drop)
    }
}

impl MtBackend for ExternalMt {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn translate(&self, source: &str) -> Result<String> {
        match call(&self.transport, "mt.translate", json!({ "source": source }))? {
            Value::String(s) => Ok(s),
            other => Err(Error::backend(format!("mt.translate returned {other}"))),
        }
    }

    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()> {
        call(&self.transport, "mt.fine_tune", json!({ "records": records })).map(drop)
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        blob(call(&self.transport, "mt.snapshot", Value::Null)?)
    }

    fn restore(&mut self, blob: &[u8]) -> Result<()> {
        call(&self.transport, "mt.restore", json!({ "blob": B64.encode(blob) })).map(drop)
    }
}
