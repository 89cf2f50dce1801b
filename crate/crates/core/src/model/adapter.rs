//! External model adapter.
//!
//! The adapter is an executable invoked as
//! `<exec> <train|predict|score> <request.jsonl> <response.jsonl>`.
//! Line 1 of the request is `{"op_meta": {...}}`; the remaining lines are
//! corpus records. `predict` must answer one `{"id","target"}` line per
//! request record, `score` one `{"id","loss"}` line. Exit code 0 means success.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tempfile::TempDir;
use thiserror::Error;

use super::train::TrainSummary;
use super::{ModelError, TaskModel, TrainOptions, TrainingSet};
use crate::corpus::{RecordLine, TaskKind, Target, UnlabeledExample};
use crate::objective::ObjectiveConfig;

pub const DEFAULT_ADAPTER_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("failed to launch adapter {exec}: {message}")]
    Spawn { exec: String, message: String },
    #[error("adapter exited with code {exit_code:?}: {stderr}")]
    AdapterCrashed { exit_code: Option<i32>, stderr: String },
    #[error("adapter protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("adapter did not finish within {0:?}")]
    Timeout(Duration),
    #[error("adapter I/O: {0}")]
    Io(String),
}

fn io(e: impl std::fmt::Display) -> AdapterError {
    AdapterError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterOp {
    Train,
    Predict,
    Score,
}

impl AdapterOp {
    fn as_str(self) -> &'static str {
        match self {
            AdapterOp::Train => "train",
            AdapterOp::Predict => "predict",
            AdapterOp::Score => "score",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictLine {
    id: String,
    target: Target,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    id: String,
    loss: f64,
}

/// A [`TaskModel`] backed by an external executable. The adapter owns its
/// weights; `state_dir` in `op_meta` is a directory it may use to keep them
/// between calls.
#[derive(Debug)]
pub struct AdapterModel {
    exec: PathBuf,
    task: TaskKind,
    num_classes: Option<usize>,
    timeout: Duration,
    workdir: TempDir,
    pending_reinit: Option<u64>,
    calls: std::sync::atomic::AtomicU64,
}

impl AdapterModel {
    pub fn new(exec: impl Into<PathBuf>, task: TaskKind, num_classes: Option<usize>) -> Result<Self, AdapterError> {
        let workdir = tempfile::Builder::new().prefix("hint-adapter").tempdir().map_err(io)?;
        fs::create_dir_all(workdir.path().join("state")).map_err(io)?;
        Ok(Self {
            exec: exec.into(),
            task,
            num_classes,
            timeout: DEFAULT_ADAPTER_TIMEOUT,
            workdir,
            pending_reinit: None,
            calls: std::sync::atomic::AtomicU64::new(0),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn base_meta(&self, op: AdapterOp) -> serde_json::Map<String, Value> {
        let mut meta = serde_json::Map::new();
        meta.insert("op".into(), json!(op.as_str()));
        meta.insert("task".into(), json!(self.task));
        if let Some(n) = self.num_classes {
            meta.insert("num_classes".into(), json!(n));
        }
        meta.insert("state_dir".into(), json!(self.workdir.path().join("state")));
        meta
    }

    /// Writes the request, runs the adapter and returns the response path.
    fn invoke(
        &self,
        op: AdapterOp,
        meta: serde_json::Map<String, Value>,
        records: &[RecordLine],
    ) -> Result<PathBuf, AdapterError> {
        let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let dir = self.workdir.path();
        let request = dir.join(format!("{n:04}-{}-request.jsonl", op.as_str()));
        let response = dir.join(format!("{n:04}-{}-response.jsonl", op.as_str()));
        let stderr_path = dir.join(format!("{n:04}-{}-stderr.txt", op.as_str()));
        {
            let mut w = BufWriter::new(File::create(&request).map_err(io)?);
            writeln!(w, "{}", json!({ "op_meta": meta })).map_err(io)?;
            for r in records {
                writeln!(w, "{}", serde_json::to_string(r).map_err(io)?).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        run_with_timeout(&self.exec, op, &request, &response, &stderr_path, self.timeout)?;
        Ok(response)
    }
}

fn run_with_timeout(
    exec: &Path,
    op: AdapterOp,
    request: &Path,
    response: &Path,
    stderr_path: &Path,
    timeout: Duration,
) -> Result<(), AdapterError> {
    let stderr = File::create(stderr_path).map_err(io)?;
    let mut child = Command::new(exec)
        .arg(op.as_str())
        .arg(request)
        .arg(response)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(stderr))
        .spawn()
        .map_err(|e| AdapterError::Spawn { exec: exec.display().to_string(), message: e.to_string() })?;
    let deadline = Instant::now() + timeout;
    let status = loop {
        if let Some(status) = child.try_wait().map_err(io)? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(AdapterError::Timeout(timeout));
        }
        thread::sleep(Duration::from_millis(5));
    };
    if !status.success() {
        let text = fs::read_to_string(stderr_path).unwrap_or_default();
        let tail: String = text.lines().rev().take(20).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        return Err(AdapterError::AdapterCrashed { exit_code: status.code(), stderr: tail });
    }
    Ok(())
}

/// Parses response lines and checks their ids are a bijection with `ids`.
/// Results come back in request order.
fn read_responses<T, L: for<'de> Deserialize<'de>>(
    path: &Path,
    ids: &[&str],
    split: impl Fn(L) -> Result<(String, T), AdapterError>,
) -> Result<Vec<T>, AdapterError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AdapterError::ProtocolViolation(format!("missing response file: {e}")))?;
    let mut by_id: HashMap<String, T> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: L = serde_json::from_str(line)
            .map_err(|e| AdapterError::ProtocolViolation(format!("response line {}: {e}", i + 1)))?;
        let (id, value) = split(parsed)?;
        if by_id.insert(id.clone(), value).is_some() {
            return Err(AdapterError::ProtocolViolation(format!("duplicate response id `{id}`")));
        }
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        match by_id.remove(*id) {
            Some(v) => out.push(v),
            None => return Err(AdapterError::ProtocolViolation(format!("missing response for id `{id}`"))),
        }
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(AdapterError::ProtocolViolation(format!("unexpected response id `{extra}`")));
    }
    Ok(out)
}

impl TaskModel for AdapterModel {
    fn task(&self) -> TaskKind {
        self.task
    }

    fn reinitialize(&mut self, seed: u64) -> Result<(), ModelError> {
        self.pending_reinit = Some(seed);
        Ok(())
    }

    fn train(&mut self, data: TrainingSet<'_>, opts: &TrainOptions<'_>) -> Result<TrainSummary, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let mut meta = self.base_meta(AdapterOp::Train);
        meta.insert("reinitialize".into(), json!(self.pending_reinit.is_some()));
        meta.insert("init_seed".into(), json!(self.pending_reinit));
        meta.insert("seed".into(), json!(opts.seed));
        meta.insert("epochs".into(), json!(opts.epochs));
        meta.insert("lr".into(), json!(opts.lr));
        meta.insert("batch_size".into(), json!(opts.batch_size));
        meta.insert("mu".into(), json!(opts.objective.mu));
        meta.insert("log_zero_clip".into(), json!(opts.objective.log_zero_clip));
        meta.insert("loss".into(), json!(opts.objective.loss));
        meta.insert("transform_ratio".into(), json!(opts.transform_ratio));
        meta.insert("iteration".into(), json!(opts.iteration));
        let records: Vec<RecordLine> = data
            .gold
            .iter()
            .map(RecordLine::from_example)
            .chain(data.pseudo.iter().map(RecordLine::from_pseudo))
            .collect();
        self.invoke(AdapterOp::Train, meta, &records)?;
        self.pending_reinit = None;
        // Loss values are the adapter's business; NaN marks them unknown.
        Ok(TrainSummary { initial_loss: f64::NAN, final_loss: f64::NAN, epochs: opts.epochs, examples: data.len() })
    }

    fn predict_batch(&self, inputs: &[UnlabeledExample]) -> Result<Vec<Target>, ModelError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let records: Vec<RecordLine> = inputs.iter().map(RecordLine::from_unlabeled).collect();
        let path = self.invoke(AdapterOp::Predict, self.base_meta(AdapterOp::Predict), &records)?;
        let ids: Vec<&str> = inputs.iter().map(|u| u.id.as_str()).collect();
        let task = self.task;
        let num_classes = self.num_classes;
        let targets = read_responses(&path, &ids, |l: PredictLine| {
            let ok = match (&l.target, task) {
                (Target::Class(c), TaskKind::Classification) => num_classes.is_none_or(|n| *c < n),
                (Target::Tokens(t), TaskKind::Generation) => !t.is_empty(),
                _ => false,
            };
            if !ok {
                return Err(AdapterError::ProtocolViolation(format!("invalid target for id `{}`", l.id)));
            }
            Ok((l.id, l.target))
        })?;
        Ok(targets)
    }

    fn score_batch(
        &self,
        items: &[(UnlabeledExample, Target)],
        objective: &ObjectiveConfig,
    ) -> Result<Vec<f64>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut meta = self.base_meta(AdapterOp::Score);
        meta.insert("log_zero_clip".into(), json!(objective.log_zero_clip));
        let records: Vec<RecordLine> = items
            .iter()
            .map(|(u, t)| {
                let mut r = RecordLine::from_unlabeled(u);
                r.target = Some(t.clone());
                r.pseudo = Some(true);
                r
            })
            .collect();
        let path = self.invoke(AdapterOp::Score, meta, &records)?;
        let ids: Vec<&str> = items.iter().map(|(u, _)| u.id.as_str()).collect();
        let losses = read_responses(&path, &ids, |l: ScoreLine| {
            if !(l.loss.is_finite() && l.loss >= 0.0) {
                return Err(AdapterError::ProtocolViolation(format!("loss {} for id `{}`", l.loss, l.id)));
            }
            Ok((l.id, l.loss))
        })?;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, body: &str) {
        fs::write(path, body).unwrap();
    }

    #[test]
    fn response_ids_must_be_a_bijection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let split = |l: ScoreLine| Ok((l.id, l.loss));

        write(&p, "{\"id\":\"b\",\"loss\":1.0}\n{\"id\":\"a\",\"loss\":0.5}\n");
        assert_eq!(read_responses(&p, &["a", "b"], split).unwrap(), vec![0.5, 1.0]);

        write(&p, "{\"id\":\"a\",\"loss\":0.5}\n");
        assert!(matches!(read_responses(&p, &["a", "b"], split), Err(AdapterError::ProtocolViolation(_))));

        write(&p, "{\"id\":\"a\",\"loss\":0.5}\n{\"id\":\"b\",\"loss\":0.5}\n{\"id\":\"c\",\"loss\":0.5}\n");
        assert!(matches!(read_responses(&p, &["a", "b"], split), Err(AdapterError::ProtocolViolation(_))));

        write(&p, "{\"id\":\"a\",\"loss\":0.5}\n{\"id\":\"a\",\"loss\":0.5}\n");
        assert!(matches!(read_responses(&p, &["a"], split), Err(AdapterError::ProtocolViolation(_))));

        write(&p, "garbage\n");
        assert!(matches!(read_responses(&p, &["a"], split), Err(AdapterError::ProtocolViolation(_))));
    }

    #[cfg(unix)]
    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        use std::os::unix::fs::PermissionsExt;
        let p = dir.join(name);
        write(&p, body);
        fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    #[cfg(unix)]
    #[test]
    fn crash_and_timeout_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let crash = script(dir.path(), "crash.sh", "#!/bin/sh\necho boom >&2\nexit 3\n");
        let m = AdapterModel::new(&crash, TaskKind::Classification, Some(2)).unwrap();
        let input = UnlabeledExample { id: "x".into(), code: "a".into(), tokens: vec![] };
        match m.predict_batch(&[input.clone()]) {
            Err(ModelError::Adapter(AdapterError::AdapterCrashed { exit_code, stderr })) => {
                assert_eq!(exit_code, Some(3));
                assert!(stderr.contains("boom"));
            }
            other => panic!("expected AdapterCrashed, got {other:?}"),
        }

        let slow = script(dir.path(), "slow.sh", "#!/bin/sh\nsleep 5\n");
        let m = AdapterModel::new(&slow, TaskKind::Classification, Some(2))
            .unwrap()
            .with_timeout(Duration::from_millis(100));
        assert!(matches!(m.predict_batch(&[input]), Err(ModelError::Adapter(AdapterError::Timeout(_)))));
    }

    #[cfg(unix)]
    #[test]
    fn shell_adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // Answers class 1 for every record id in the request.
        let body = "#!/bin/sh\nif [ \"$1\" = predict ]; then\n  tail -n +2 \"$2\" | sed 's/^{\"id\":\\(\"[^\"]*\"\\).*/{\"id\":\\1,\"target\":1}/' > \"$3\"\nfi\n";
        let exec = script(dir.path(), "one.sh", body);
        let m = AdapterModel::new(&exec, TaskKind::Classification, Some(2)).unwrap();
        let inputs: Vec<UnlabeledExample> = (0..3)
            .map(|i| UnlabeledExample { id: format!("u{i}"), code: "a b".into(), tokens: vec![] })
            .collect();
        assert_eq!(m.predict_batch(&inputs).unwrap(), vec![Target::Class(1); 3]);
    }
}
