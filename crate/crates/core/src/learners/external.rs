//! Learner backed by a subprocess speaking line-delimited JSON.
//! The wire format is described in `docs/learner_protocol.md`.

use super::{Learner, Model, ModelRef};
use crate::data::Dataset;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

/// How to launch the learner process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_name")]
    pub name: String,
}

fn default_name() -> String {
    "external".into()
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Channel {
    fn call(&mut self, req: &Value) -> Result<Value> {
        let line = serde_json::to_string(req)?;
        writeln!(self.stdin, "{line}")?;
        self.stdin.flush()?;
        let mut resp = String::new();
        if self.stdout.read_line(&mut resp)? == 0 {
            return Err(Error::External("process closed its output".into()));
        }
        let v: Value = serde_json::from_str(resp.trim())?;
        if v.get("ok").and_then(Value::as_bool) != Some(true) {
            let msg = v.get("error").and_then(Value::as_str).unwrap_or("request failed");
            return Err(Error::External(msg.to_string()));
        }
        Ok(v)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        let _ = writeln!(self.stdin, "{}", json!({"op": "shutdown"}));
        let _ = self.stdin.flush();
        let _ = self.child.wait();
    }
}

/// Subprocess learner. One process serves every train and predict request,
/// serialized through a mutex.
pub struct ExternalLearner {
    name: String,
    chan: Arc<Mutex<Channel>>,
}

impl ExternalLearner {
    pub fn spawn(spec: &ExternalSpec) -> Result<Self> {
        let mut child = Command::new(&spec.command)
            .args(&spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{}`: {e}", spec.command)))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::External("no stdin".into()))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| Error::External("no stdout".into()))?);
        Ok(Self { name: spec.name.clone(), chan: Arc::new(Mutex::new(Channel { child, stdin, stdout })) })
    }

    fn call(chan: &Mutex<Channel>, req: &Value) -> Result<Value> {
        chan.lock().map_err(|_| Error::External("channel poisoned".into()))?.call(req)
    }
}

fn rows_json(d: &Dataset, rows: &[usize]) -> Vec<Vec<f64>> {
    let mut buf = Vec::new();
    rows.iter()
        .map(|&i| {
            d.covariate_row(i, &mut buf);
            buf.clone()
        })
        .collect()
}

fn parse_predictions(v: &Value, expected: usize) -> Result<Vec<f64>> {
    let arr = v.get("y").and_then(Value::as_array).ok_or_else(|| Error::External("missing `y`".into()))?;
    let out: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
    if out.len() != expected || arr.len() != expected {
        return Err(Error::External(format!("expected {expected} predictions, got {}", arr.len())));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::External("non-finite prediction".into()));
    }
    Ok(out)
}

struct ExternalModel {
    id: u64,
    chan: Arc<Mutex<Channel>>,
}

impl Model for ExternalModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let req = json!({"op": "predict", "model": self.id, "x": [x]});
        ExternalLearner::call(&self.chan, &req).and_then(|v| parse_predictions(&v, 1)).map_or(f64::NAN, |p| p[0])
    }

    fn predict_many(&self, d: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let req = json!({"op": "predict", "model": self.id, "x": rows_json(d, rows)});
        parse_predictions(&ExternalLearner::call(&self.chan, &req)?, rows.len())
    }
}

impl Learner for ExternalLearner {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn train(&self, d: &Dataset, rows: &[usize], seed: u64) -> Result<ModelRef> {
        let y: Vec<f64> = rows.iter().map(|&i| d.y()[i]).collect();
        let req = json!({"op": "train", "seed": seed, "x": rows_json(d, rows), "y": y});
        let v = Self::call(&self.chan, &req)?;
        let id = v.get("model").and_then(Value::as_u64).ok_or_else(|| Error::External("missing `model`".into()))?;
        Ok(Arc::new(ExternalModel { id, chan: self.chan.clone() }))
    }
}
