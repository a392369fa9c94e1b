//! Newline-delimited JSON metrics and the CSV report.
//!
//! Schema (one object per line, `record` discriminates):
//!
//! * `config`  — the resolved run configuration, written once at the top.
//! * `step`    — per-step loss, learning rate, active-module count.
//! * `epoch`   — per-epoch mean loss, status, norms, scores, edge costs.
//! * `summary` — end-of-training totals.
//! * `eval`    — evaluation loss/accuracy.
//!
//! Two runs of the same configuration produce byte-identical logs: every
//! number comes from the deterministic compute path, and the header omits
//! the transport and output path (which is what lets a local run and a TCP
//! run be compared byte-for-byte). The status vector is rendered as a
//! string of `A`/`K` per layer.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use dlora_core::cost::CostLedger;
use dlora_core::runtime::{EpochRecord, EvalResult, MetricsSink, StepRecord};
use dlora_core::scheduler::ModuleStatus;
use serde::Serialize;
use std::io::Write;

pub fn status_string(status: &[ModuleStatus]) -> String {
    status
        .iter()
        .map(|s| match s {
            ModuleStatus::Active => 'A',
            ModuleStatus::Killed => 'K',
        })
        .collect()
}

#[derive(Serialize)]
struct ConfigJson<'a> {
    record: &'static str,
    model: &'a crate::config::ModelSection,
    precision: &'a crate::config::PrecisionField,
    peft: &'a crate::config::PeftSection,
    mode: &'a crate::config::ModeField,
    budget: usize,
    epochs: u32,
    warmup_steps: u32,
    batch_size: usize,
    lr: f64,
    quant_bits: u8,
    frozen_policy: &'a crate::config::PolicyField,
    task: &'a crate::config::TaskField,
    n_samples: usize,
    seg_len: usize,
    seed: u64,
    module_seed: u64,
    backbone_seed: u64,
}

#[derive(Serialize)]
struct StepJson {
    record: &'static str,
    step: u64,
    epoch: u32,
    loss: f64,
    lr: f64,
    active: usize,
}

#[derive(Serialize)]
struct EpochJson<'a> {
    record: &'static str,
    epoch: u32,
    steps: u64,
    mean_loss: Option<f64>,
    active: usize,
    status: String,
    scores: Option<&'a [f64]>,
    norms: &'a [f64],
    edge_flops: u64,
    bytes_to_cloud: u64,
    bytes_to_edge: u64,
    frames_sent: u64,
}

#[derive(Serialize)]
struct SummaryJson {
    record: &'static str,
    steps: u64,
    final_loss: Option<f64>,
    status: String,
    edge_flops: u64,
    bytes_to_cloud: u64,
    bytes_to_edge: u64,
    frames_sent: u64,
}

#[derive(Serialize)]
struct EvalJson {
    record: &'static str,
    mean_loss: f64,
    accuracy: f64,
    scored_tokens: u64,
    edge_flops: u64,
    bytes_to_cloud: u64,
    bytes_to_edge: u64,
}

/// Streams records to a writer; I/O failures are deferred to `finish` so
/// the hot training loop never unwinds.
pub struct NdjsonSink<W: Write> {
    w: W,
    error: Option<std::io::Error>,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new(w: W) -> Self {
        NdjsonSink { w, error: None }
    }

    fn line<T: Serialize>(&mut self, value: &T) {
        if self.error.is_some() {
            return;
        }
        let r = serde_json::to_writer(&mut self.w, value)
            .map_err(std::io::Error::other)
            .and_then(|()| self.w.write_all(b"\n"));
        if let Err(e) = r {
            self.error = Some(e);
        }
    }

    pub fn write_header(&mut self, cfg: &RunConfig, backbone_seed: u64) {
        self.line(&ConfigJson {
            record: "config",
            model: &cfg.model,
            precision: &cfg.precision,
            peft: &cfg.peft,
            mode: &cfg.mode,
            budget: cfg.budget,
            epochs: cfg.epochs,
            warmup_steps: cfg.resolved_warmup(),
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            quant_bits: cfg.quant_bits,
            frozen_policy: &cfg.frozen_policy,
            task: &cfg.task,
            n_samples: cfg.n_samples,
            seg_len: cfg.seg_len,
            seed: cfg.seed,
            module_seed: cfg.module_seed(),
            backbone_seed,
        });
    }

    pub fn write_summary(
        &mut self,
        steps: u64,
        final_loss: Option<f64>,
        status: &[ModuleStatus],
        ledger: &CostLedger,
    ) {
        self.line(&SummaryJson {
            record: "summary",
            steps,
            final_loss,
            status: status_string(status),
            edge_flops: ledger.edge_flops,
            bytes_to_cloud: ledger.bytes_to_cloud,
            bytes_to_edge: ledger.bytes_to_edge,
            frames_sent: ledger.frames_sent,
        });
    }

    pub fn write_eval(&mut self, r: &EvalResult) {
        self.line(&EvalJson {
            record: "eval",
            mean_loss: r.mean_loss,
            accuracy: r.accuracy,
            scored_tokens: r.scored_tokens,
            edge_flops: r.ledger.edge_flops,
            bytes_to_cloud: r.ledger.bytes_to_cloud,
            bytes_to_edge: r.ledger.bytes_to_edge,
        });
    }

    pub fn finish(mut self) -> Result<()> {
        if self.error.is_none() {
            if let Err(e) = self.w.flush() {
                self.error = Some(e);
            }
        }
        match self.error {
            None => Ok(()),
            Some(e) => Err(e).context("writing metrics log"),
        }
    }
}

impl<W: Write> MetricsSink for NdjsonSink<W> {
    fn on_step(&mut self, rec: &StepRecord) {
        self.line(&StepJson {
            record: "step",
            step: rec.step,
            epoch: rec.epoch,
            loss: rec.loss,
            lr: rec.lr,
            active: rec.active,
        });
    }

    fn on_epoch(&mut self, rec: &EpochRecord<'_>) {
        let active = rec
            .status
            .iter()
            .filter(|s| **s == ModuleStatus::Active)
            .count();
        self.line(&EpochJson {
            record: "epoch",
            epoch: rec.epoch,
            steps: rec.steps,
            mean_loss: rec.mean_loss,
            active,
            status: status_string(rec.status),
            scores: rec.scores,
            norms: rec.norms,
            edge_flops: rec.costs.edge_flops,
            bytes_to_cloud: rec.costs.bytes_to_cloud,
            bytes_to_edge: rec.costs.bytes_to_edge,
            frames_sent: rec.costs.frames_sent,
        });
    }
}

/// Flattens a metrics log into a CSV of the main-epoch rows (the warmup
/// epoch 0 stays in the NDJSON). Returns the number of data rows written.
pub fn report_csv<W: Write>(ndjson: &str, out: &mut W) -> Result<usize> {
    writeln!(
        out,
        "epoch,steps,mean_loss,active,status,edge_flops,bytes_to_cloud,bytes_to_edge,frames_sent"
    )?;
    let mut rows = 0usize;
    for (lineno, line) in ndjson.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("metrics line {}", lineno + 1))?;
        if v.get("record").and_then(|r| r.as_str()) != Some("epoch") {
            continue;
        }
        let epoch = field_u64(&v, "epoch", lineno)?;
        if epoch == 0 {
            continue;
        }
        let mean_loss = match v.get("mean_loss") {
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            epoch,
            field_u64(&v, "steps", lineno)?,
            mean_loss,
            field_u64(&v, "active", lineno)?,
            v.get("status").and_then(|s| s.as_str()).unwrap_or(""),
            field_u64(&v, "edge_flops", lineno)?,
            field_u64(&v, "bytes_to_cloud", lineno)?,
            field_u64(&v, "bytes_to_edge", lineno)?,
            field_u64(&v, "frames_sent", lineno)?,
        )?;
        rows += 1;
    }
    Ok(rows)
}

fn field_u64(v: &serde_json::Value, key: &str, lineno: usize) -> Result<u64> {
    match v.get(key).and_then(|x| x.as_u64()) {
        Some(n) => Ok(n),
        None => bail!("metrics line {}: missing numeric field {key}", lineno + 1),
    }
}
