//! Markdown summary over the latest run of each command.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::manifest::RunManifest;

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn num(v: &Value, key: &str) -> Option<f64> {
    v.get(key)?.as_f64()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn missing(out: &mut String, producer: &str) {
    let _ = writeln!(out, "_Not available: run `agenet {producer}` to produce this section._\n");
}

/// The most recent run of each command, excluding `exclude` (the report
/// run itself).
pub fn latest_by_command<'a>(
    runs: &'a [(PathBuf, RunManifest)],
    exclude: &str,
) -> BTreeMap<&'a str, &'a (PathBuf, RunManifest)> {
    let mut out = BTreeMap::new();
    for r in runs.iter().filter(|r| r.1.run_id != exclude) {
        out.insert(r.1.command.as_str(), r);
    }
    out
}

pub fn render(runs: &[(PathBuf, RunManifest)], report_run_id: &str) -> String {
    let latest = latest_by_command(runs, report_run_id);
    let dir_of = |cmd: &str| latest.get(cmd).map(|r| r.0.clone());
    let mut out = String::from("# Run summary\n\n");

    out.push_str("## Dataset\n\n");
    match dir_of("split").and_then(|d| read_json(&d.join("data/split.json"))) {
        Some(m) => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            if let Some(Value::Object(a)) = m.get("assignment") {
                for v in a.values() {
                    *counts.entry(v.as_str().unwrap_or("?").to_lowercase()).or_default() += 1;
                }
            }
            out.push_str("| split | samples |\n|---|---|\n");
            for s in ["train", "val", "test"] {
                let _ = writeln!(out, "| {s} | {} |", counts.get(s).copied().unwrap_or(0));
            }
            let _ = writeln!(out, "| total | {} |\n", counts.values().sum::<usize>());
            if let Some(log) = m.get("curation_log") {
                let _ = writeln!(
                    out,
                    "Curation kept {} of {} records.\n",
                    log.get("kept").and_then(Value::as_u64).unwrap_or(0),
                    log.get("total").and_then(Value::as_u64).unwrap_or(0)
                );
            }
        }
        None => missing(&mut out, "split"),
    }

    out.push_str("## Training\n\n");
    let train_cmd = ["hpo-finalize", "train"].into_iter().find(|c| latest.contains_key(c));
    match train_cmd {
        Some(cmd) => {
            let (dir, m) = latest[cmd];
            let t = &m.config.train;
            let _ = writeln!(
                out,
                "Run `{}` ({cmd}): {} epochs, lr {:e}, batch size {}, {} frozen epochs, input {}.\n",
                m.run_id, t.epochs, t.lr, t.batch_size, t.freeze_epochs, m.config.model.input_size
            );
            let summary = read_json(&dir.join("reports/train_summary.json"))
                .or_else(|| read_json(&dir.join("reports/final.json")));
            if let Some(s) = summary {
                let _ = writeln!(
                    out,
                    "Best epoch {} with validation MAE {}.\n",
                    s.get("best_epoch").and_then(Value::as_u64).unwrap_or(0),
                    fmt_opt(num(&s, "best_val_mae"), 4)
                );
            }
        }
        None => missing(&mut out, "train"),
    }

    out.push_str("## Evaluation\n\n");
    let mut any = false;
    for cmd in ["evaluate", "hpo-finalize", "train"] {
        let Some(dir) = dir_of(cmd) else { continue };
        for split in ["train", "val", "test"] {
            if let Some(r) = read_json(&dir.join(format!("reports/eval_{split}.json"))) {
                if !any {
                    out.push_str("| run | split | n | MAE |\n|---|---|---|---|\n");
                }
                any = true;
                let _ = writeln!(
                    out,
                    "| {} | {split} | {} | {} |",
                    latest[cmd].1.run_id,
                    r.get("n").and_then(Value::as_u64).unwrap_or(0),
                    fmt_opt(num(&r, "mae"), 4)
                );
            }
        }
    }
    if any {
        out.push('\n');
    } else {
        missing(&mut out, "evaluate");
    }

    out.push_str("## Conversion\n\n");
    match dir_of("export").and_then(|d| read_json(&d.join("reports/export.json"))) {
        Some(Value::Array(chain)) => {
            out.push_str("| stage | size (MB) | sha256 |\n|---|---|---|\n");
            for a in &chain {
                let size = a.get("size_bytes").and_then(Value::as_u64).unwrap_or(0) as f64 / 1e6;
                let _ = writeln!(
                    out,
                    "| {} | {size:.3} | {} |",
                    a.get("stage").and_then(Value::as_str).unwrap_or("?"),
                    a.get("sha256").and_then(Value::as_str).unwrap_or("?")
                );
            }
            out.push('\n');
        }
        _ => missing(&mut out, "export"),
    }
    match dir_of("parity").and_then(|d| read_json(&d.join("reports/parity.json"))) {
        Some(p) => {
            let _ = writeln!(
                out,
                "| metric | value |\n|---|---|\n| samples | {} |\n| MAE {} | {} |\n| MAE {} | {} |\n\
                 | conversion delta | {} |\n| delta vs best validation | {} |\n| max output gap | {} |\n",
                p.get("n").and_then(Value::as_u64).unwrap_or(0),
                p.get("stage_a").and_then(Value::as_str).unwrap_or("a"),
                fmt_opt(num(&p, "mae_stage_a"), 4),
                p.get("stage_b").and_then(Value::as_str).unwrap_or("b"),
                fmt_opt(num(&p, "mae_stage_b"), 4),
                fmt_opt(num(&p, "delta_conv"), 6),
                fmt_opt(num(&p, "delta_val"), 4),
                fmt_opt(num(&p, "max_abs_output_gap"), 6),
            );
        }
        None => missing(&mut out, "parity"),
    }

    out.push_str("## Latency\n\n");
    match dir_of("bench").and_then(|d| read_json(&d.join("reports/bench.json"))) {
        Some(b) => {
            let r = &b["report"];
            let budget = &b["budget"];
            let _ = writeln!(
                out,
                "{}: {} ms mean, {} ms std over {} runs ({} warmup), init {} ms. Budget {} ms: {}.\n\nHost: {}\n",
                r.get("artifact").and_then(Value::as_str).unwrap_or("?"),
                fmt_opt(num(r, "avg_ms"), 3),
                fmt_opt(num(r, "std_ms"), 3),
                r.get("runs").and_then(Value::as_u64).unwrap_or(0),
                r.get("warmup").and_then(Value::as_u64).unwrap_or(0),
                fmt_opt(num(r, "init_ms"), 3),
                fmt_opt(num(budget, "budget_ms"), 1),
                if budget.get("pass").and_then(Value::as_bool).unwrap_or(false) { "pass" } else { "fail" },
                r.get("host_descriptor").and_then(Value::as_str).unwrap_or("?"),
            );
        }
        None => missing(&mut out, "bench"),
    }

    out.push_str("## Model\n\n");
    let acc = ["export", "hpo-finalize", "train"]
        .into_iter()
        .filter_map(dir_of)
        .find_map(|d| read_json(&d.join("reports/accounting.json")));
    match acc {
        Some(a) => {
            let _ = writeln!(
                out,
                "{} parameters ({} backbone, {} head); {} multiply-adds at input {}.\n",
                a["params"], a["backbone_params"], a["head_params"], a["mult_adds"], a["input_size"]
            );
        }
        None => missing(&mut out, "train"),
    }
    out
}
