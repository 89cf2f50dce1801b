//! Shared body of the bundled conformance adapters.
//!
//! Predicts class 0 for classification and the input tokens for generation;
//! a target's loss is 0 when it equals that prediction and 1 otherwise.

use std::fs;
use std::io::Write;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use hint_core::code_transform::tokenize;

fn echo_target(task: &str, code: &str) -> Result<Value> {
    Ok(match task {
        "classification" => json!(0),
        "generation" => {
            let tokens: Vec<String> = tokenize(code, "java")?.into_iter().map(|t| t.text).collect();
            json!(tokens)
        }
        other => bail!("unknown task `{other}`"),
    })
}

/// Runs one adapter call. With `drop_last`, the last predict answer is
/// omitted, which the pipeline must reject.
pub fn main_with(drop_last: bool) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let [_, op, request, response] = args.as_slice() else {
        bail!("usage: {} <train|predict|score> <request.jsonl> <response.jsonl>", args[0]);
    };
    let text = fs::read_to_string(request).with_context(|| format!("reading {request}"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let meta: Value = serde_json::from_str(lines.next().context("empty request")?)?;
    let task = meta["op_meta"]["task"].as_str().context("op_meta.task missing")?.to_string();
    let records: Vec<Value> = lines.map(serde_json::from_str).collect::<Result<_, _>>()?;

    let mut out = Vec::new();
    match op.as_str() {
        "train" => {}
        "predict" => {
            let keep = if drop_last { records.len().saturating_sub(1) } else { records.len() };
            for r in &records[..keep] {
                let code = r["code"].as_str().context("record without code")?;
                writeln!(out, "{}", json!({"id": r["id"], "target": echo_target(&task, code)?}))?;
            }
        }
        "score" => {
            for r in &records {
                let code = r["code"].as_str().context("record without code")?;
                let loss = if r["target"] == echo_target(&task, code)? { 0.0 } else { 1.0 };
                writeln!(out, "{}", json!({"id": r["id"], "loss": loss}))?;
            }
        }
        other => bail!("unknown op `{other}`"),
    }
    fs::write(response, out).with_context(|| format!("writing {response}"))?;
    Ok(())
}
