//! `dlora` — drive two-node parameter-efficient fine-tuning runs.
//!
//! The cloud node serves the frozen transformer blocks; the edge node keeps
//! the data, the embedding, the loss and the trainable modules. `finetune`
//! with the default local transport runs both roles in one process while
//! still pushing every boundary tensor through the wire codec, so its
//! metrics log is byte-identical to a genuine `serve-cloud` + `run-edge`
//! pair with the same configuration.
//!
//! Log verbosity comes from `DLORA_LOG_LEVEL` (error | info | debug).

mod checkpoint;
mod config;
mod dataset;
mod metrics;
mod transport;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{
    KindField, ModeField, ModelSection, PolicyField, PrecisionField, RunConfig, TaskField,
    TransportField,
};
use dlora_core::model::{Backbone, ModelConfig};
use dlora_core::protocol::DEFAULT_TCP_PORT;
use dlora_core::runtime::{
    edge_eval_session, edge_train_session, evaluate_local, finetune_local, pretrain_backbone,
    serve_cloud, EvalResult, Exchange, NoMetrics, PretrainSpec, TrainResult, TrainSpec,
};
use dlora_core::scalar::{Dtype, Scalar};
use log::{debug, info};
use std::fs;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dlora",
    version,
    about = "Two-node parameter-efficient fine-tuning over a framed wire protocol"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ft,
    Ek,
    Kr,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
    Charlm,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    SkipFrozen,
    ComputeFrozenOnEdge,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Lora,
    Adapter,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Local,
    Tcp,
}

/// Run-configuration sources: an optional JSON file plus field overrides.
#[derive(Args)]
struct Overrides {
    /// JSON run-configuration file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    warmup_steps: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// 8 or 32.
    #[arg(long)]
    quant_bits: Option<u8>,
    #[arg(long, value_enum)]
    frozen_policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Cloud address; implies --transport tcp.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long, value_enum)]
    peft_kind: Option<KindArg>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    adapter_dim: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seg_len: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Ft => ModeField::Ft,
                ModeArg::Ek => ModeField::Ek,
                ModeArg::Kr => ModeField::Kr,
            };
        }
        if let Some(t) = self.task {
            cfg.task = match t {
                TaskArg::Copy => TaskField::Copy,
                TaskArg::Reverse => TaskField::Reverse,
                TaskArg::Charlm => TaskField::Charlm,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(w) = self.warmup_steps {
            cfg.warmup_steps = Some(w);
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(l) = self.lr {
            cfg.lr = l;
        }
        if let Some(q) = self.quant_bits {
            cfg.quant_bits = q;
        }
        if let Some(p) = self.frozen_policy {
            cfg.frozen_policy = match p {
                PolicyArg::SkipFrozen => PolicyField::SkipFrozen,
                PolicyArg::ComputeFrozenOnEdge => PolicyField::ComputeFrozenOnEdge,
            };
        }
        if let Some(k) = self.peft_kind {
            cfg.peft.kind = match k {
                KindArg::Lora => KindField::Lora,
                KindArg::Adapter => KindField::Adapter,
            };
        }
        if let Some(r) = self.rank {
            cfg.peft.rank = r;
        }
        if let Some(d) = self.adapter_dim {
            cfg.peft.adapter_dim = d;
        }
        if let Some(a) = self.alpha {
            cfg.peft.alpha = a;
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => PrecisionField::F32,
                PrecisionArg::F64 => PrecisionField::F64,
            };
        }
        if let Some(n) = self.n_samples {
            cfg.n_samples = n;
        }
        if let Some(s) = self.seg_len {
            cfg.seg_len = s;
        }
        match (&self.transport, &self.addr) {
            (Some(TransportArg::Local), None) => cfg.transport = TransportField::Local,
            (Some(TransportArg::Local), Some(_)) => {
                return Err(usage("--addr contradicts --transport local"))
            }
            (Some(TransportArg::Tcp), addr) => {
                cfg.transport = TransportField::Tcp {
                    addr: addr
                        .clone()
                        .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_TCP_PORT}")),
                }
            }
            (None, Some(a)) => cfg.transport = TransportField::Tcp { addr: a.clone() },
            (None, None) => {}
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 8)]
    n_layers: usize,
    #[arg(long, default_value_t = 32)]
    max_seq: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a randomly initialized backbone checkpoint.
    InitBackbone {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Train every backbone weight monolithically, then write the updated
    /// checkpoint (fine-tuning never touches the backbone again).
    PretrainBackbone {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "charlm")]
        task: TaskArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        epochs: u32,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        n_samples: usize,
        #[arg(long, default_value_t = 6)]
        seg_len: usize,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run a fine-tuning session (both roles locally, or as the edge of a
    /// TCP pair).
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Metrics NDJSON destination (default: config `output`, else stdout).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Where to store the trained modules.
        #[arg(long)]
        peft_out: Option<PathBuf>,
    },
    /// Evaluate stored modules (forward only).
    Evaluate {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        peft: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Serve the frozen backbone to one edge session, then exit.
    ServeCloud {
        #[arg(long)]
        backbone: PathBuf,
        /// Listen address; port 0 picks a free port (printed on stdout).
        #[arg(long, default_value = "127.0.0.1:7431")]
        addr: String,
    },
    /// The edge role of a two-process deployment (requires TCP transport).
    RunEdge {
        #[arg(long)]
        backbone: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        peft_out: Option<PathBuf>,
    },
    /// Flatten a metrics log into a per-epoch CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors that are the caller's fault (bad flags/config) exit with 2;
/// everything else exits with 1. `UsageMark` in an error chain is the flag.
fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(std::io::Error::other(msg.into())).context(UsageMark)
}

#[derive(Debug)]
struct UsageMark;

impl std::fmt::Display for UsageMark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid usage")
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DLORA_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print to stdout and succeed; real parse errors
            // are usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageMark>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::InitBackbone {
            out,
            seed,
            precision,
            model,
        } => init_backbone(&out, seed, precision, &model),
        Cmd::PretrainBackbone {
            backbone,
            out,
            task,
            seed,
            epochs,
            batch_size,
            lr,
            n_samples,
            seg_len,
            metrics,
        } => {
            let task = match task {
                TaskArg::Copy => TaskField::Copy,
                TaskArg::Reverse => TaskField::Reverse,
                TaskArg::Charlm => TaskField::Charlm,
            };
            match checkpoint::peek_precision(&backbone).map_err(as_usage)? {
                Dtype::F32 => pretrain::<f32>(
                    &backbone, &out, task, seed, epochs, batch_size, lr, n_samples, seg_len,
                    metrics,
                ),
                Dtype::F64 => pretrain::<f64>(
                    &backbone, &out, task, seed, epochs, batch_size, lr, n_samples, seg_len,
                    metrics,
                ),
            }
        }
        Cmd::Finetune {
            backbone,
            overrides,
            metrics,
            peft_out,
        } => session(&backbone, &overrides, metrics, peft_out, false),
        Cmd::RunEdge {
            backbone,
            overrides,
            metrics,
            peft_out,
        } => session(&backbone, &overrides, metrics, peft_out, true),
        Cmd::Evaluate {
            backbone,
            peft,
            overrides,
            metrics,
        } => evaluate(&backbone, &peft, &overrides, metrics),
        Cmd::ServeCloud { backbone, addr } => {
            match checkpoint::peek_precision(&backbone).map_err(as_usage)? {
                Dtype::F32 => serve::<f32>(&backbone, &addr),
                Dtype::F64 => serve::<f64>(&backbone, &addr),
            }
        }
        Cmd::Report { metrics, out } => report(&metrics, &out),
    }
}

fn as_usage(e: anyhow::Error) -> anyhow::Error {
    e.context(UsageMark)
}

fn init_backbone(out: &Path, seed: u64, precision: PrecisionArg, model: &ModelFlags) -> Result<()> {
    let cfg = ModelConfig {
        vocab: model.vocab,
        d_model: model.d_model,
        n_heads: model.n_heads,
        d_ff: model.d_ff,
        n_layers: model.n_layers,
        max_seq: model.max_seq,
    };
    cfg.validate()
        .map_err(|e| usage(format!("model config: {e}")))?;
    match precision {
        PrecisionArg::F32 => {
            let bb: Backbone<f32> = Backbone::init(cfg, seed).map_err(as_any)?;
            checkpoint::save_backbone(out, &bb, seed)?;
        }
        PrecisionArg::F64 => {
            let bb: Backbone<f64> = Backbone::init(cfg, seed).map_err(as_any)?;
            checkpoint::save_backbone(out, &bb, seed)?;
        }
    }
    info!("wrote backbone checkpoint {}", out.display());
    Ok(())
}

fn as_any<E: std::error::Error + Send + Sync + 'static>(e: E) -> anyhow::Error {
    anyhow::Error::new(e)
}

#[allow(clippy::too_many_arguments)]
fn pretrain<S: Scalar>(
    backbone_path: &Path,
    out: &Path,
    task: TaskField,
    seed: u64,
    epochs: u32,
    batch_size: usize,
    lr: f64,
    n_samples: usize,
    seg_len: usize,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let (mut backbone, init_seed) = checkpoint::load_backbone::<S>(backbone_path)?;
    let samples = dataset::gen_dataset(task, seed, n_samples, backbone.config.vocab, seg_len)
        .map_err(as_usage)?;
    let spec = PretrainSpec {
        lr,
        epochs,
        batch_size,
    };
    let final_loss = match metrics {
        Some(path) => {
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut sink = metrics::NdjsonSink::new(BufWriter::new(file));
            let r = pretrain_backbone(&mut backbone, &spec, &samples, &mut sink).map_err(as_any)?;
            sink.finish()?;
            r
        }
        None => {
            pretrain_backbone(&mut backbone, &spec, &samples, &mut NoMetrics).map_err(as_any)?
        }
    };
    checkpoint::save_backbone(out, &backbone, init_seed)?;
    info!(
        "pretrained backbone for {epochs} epochs (final mean loss {}); wrote {}",
        final_loss.map_or_else(|| String::from("n/a"), |l| format!("{l:.6}")),
        out.display()
    );
    Ok(())
}

/// Shared `finetune` / `run-edge` body.
fn session(
    backbone_path: &Path,
    overrides: &Overrides,
    metrics: Option<PathBuf>,
    peft_out: Option<PathBuf>,
    require_tcp: bool,
) -> Result<()> {
    let cfg = overrides.resolve().map_err(as_usage)?;
    if require_tcp && cfg.transport == TransportField::Local {
        return Err(usage(
            "run-edge needs a TCP transport (--transport tcp or --addr HOST:PORT)",
        ));
    }
    match checkpoint::peek_precision(backbone_path).map_err(as_usage)? {
        Dtype::F32 => session_typed::<f32>(backbone_path, cfg, metrics, peft_out),
        Dtype::F64 => session_typed::<f64>(backbone_path, cfg, metrics, peft_out),
    }
}

/// The metrics destination resolved from flag, config, or stdout.
enum MetricsOut {
    File(BufWriter<fs::File>),
    Stdout(std::io::Stdout),
}

impl Write for MetricsOut {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            MetricsOut::File(w) => w.write(buf),
            MetricsOut::Stdout(w) => w.write(buf),
        }
    }
    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            MetricsOut::File(w) => w.flush(),
            MetricsOut::Stdout(w) => w.flush(),
        }
    }
}

fn open_metrics(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<MetricsOut> {
    let path = flag.or_else(|| cfg.output.clone().map(PathBuf::from));
    match path {
        Some(p) => {
            let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
            Ok(MetricsOut::File(BufWriter::new(f)))
        }
        None => Ok(MetricsOut::Stdout(std::io::stdout())),
    }
}

fn session_typed<S: Scalar>(
    backbone_path: &Path,
    mut cfg: RunConfig,
    metrics: Option<PathBuf>,
    peft_out: Option<PathBuf>,
) -> Result<()> {
    if cfg.precision.dtype() != S::DTYPE {
        return Err(usage(
            "config precision does not match the backbone checkpoint (set --precision)",
        ));
    }
    let (backbone, backbone_seed) = checkpoint::load_backbone::<S>(backbone_path)?;
    // The checkpoint is the source of truth for the model shape.
    cfg.model = ModelSection::from_core(&backbone.config);
    cfg.validate().map_err(as_usage)?;
    let samples = dataset::gen_dataset(
        cfg.task,
        cfg.seed,
        cfg.n_samples,
        backbone.config.vocab,
        cfg.seg_len,
    )
    .map_err(as_usage)?;
    let spec = TrainSpec {
        peft: cfg.peft.to_core(),
        mode: cfg.mode.to_core(),
        budget: cfg.budget,
        policy: cfg.frozen_policy.to_core(),
        quant: cfg.quant().map_err(as_usage)?,
        lr: cfg.lr,
        epochs: cfg.epochs,
        warmup_steps: cfg.resolved_warmup(),
        batch_size: cfg.batch_size,
        module_seed: cfg.module_seed(),
        model_seed: backbone_seed,
        initial_status: None,
    };

    let mut sink = metrics::NdjsonSink::new(open_metrics(metrics, &cfg)?);
    sink.write_header(&cfg, backbone_seed);
    let result: TrainResult<S> = match &cfg.transport {
        TransportField::Local => {
            let (result, cloud_ledger) = finetune_local(
                &backbone,
                &spec,
                &samples,
                Exchange::Codec(spec.quant),
                &mut sink,
            )
            .map_err(as_any)?;
            info!(
                "cloud totals: {} flops, {} frames",
                cloud_ledger.cloud_flops, cloud_ledger.frames_sent
            );
            result
        }
        TransportField::Tcp { addr } => {
            let mut t = transport::TcpTransport::connect(addr)
                .with_context(|| format!("connecting to {addr}"))?;
            edge_train_session(
                &mut t,
                &backbone.edge,
                &backbone.config,
                &spec,
                &samples,
                &mut sink,
            )
            .map_err(as_any)?
        }
    };
    sink.write_summary(
        result.steps,
        result.final_loss,
        &result.status,
        &result.ledger,
    );
    sink.finish()?;
    if let Some(path) = peft_out {
        checkpoint::save_modules(
            &path,
            &spec.peft,
            backbone.config.d_model,
            &result.modules,
            &result.status,
            spec.module_seed,
        )?;
        info!("wrote trained modules to {}", path.display());
    }
    info!(
        "finished {} steps; final mean loss {}; status {}",
        result.steps,
        result
            .final_loss
            .map_or_else(|| String::from("n/a"), |l| format!("{l:.6}")),
        metrics::status_string(&result.status)
    );
    Ok(())
}

fn evaluate(
    backbone_path: &Path,
    peft_path: &Path,
    overrides: &Overrides,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let cfg = overrides.resolve().map_err(as_usage)?;
    match checkpoint::peek_precision(backbone_path).map_err(as_usage)? {
        Dtype::F32 => evaluate_typed::<f32>(backbone_path, peft_path, cfg, metrics),
        Dtype::F64 => evaluate_typed::<f64>(backbone_path, peft_path, cfg, metrics),
    }
}

fn evaluate_typed<S: Scalar>(
    backbone_path: &Path,
    peft_path: &Path,
    mut cfg: RunConfig,
    metrics: Option<PathBuf>,
) -> Result<()> {
    if cfg.precision.dtype() != S::DTYPE {
        return Err(usage(
            "config precision does not match the backbone checkpoint (set --precision)",
        ));
    }
    let (backbone, backbone_seed) = checkpoint::load_backbone::<S>(backbone_path)?;
    cfg.model = ModelSection::from_core(&backbone.config);
    cfg.validate().map_err(as_usage)?;
    let file = checkpoint::load_modules::<S>(peft_path)?;
    debug!(
        "loaded {} modules (trained with module seed {})",
        file.modules.len(),
        file.module_seed
    );
    if file.modules.len() != backbone.config.n_layers {
        return Err(usage(format!(
            "module checkpoint has {} layers, backbone has {}",
            file.modules.len(),
            backbone.config.n_layers
        )));
    }
    if file.d_model != backbone.config.d_model {
        return Err(usage("module checkpoint width does not match the backbone"));
    }
    let samples = dataset::gen_dataset(
        cfg.task,
        cfg.seed,
        cfg.n_samples,
        backbone.config.vocab,
        cfg.seg_len,
    )
    .map_err(as_usage)?;
    let quant = cfg.quant().map_err(as_usage)?;
    let policy = cfg.frozen_policy.to_core();

    let mut sink = metrics::NdjsonSink::new(open_metrics(metrics, &cfg)?);
    sink.write_header(&cfg, backbone_seed);
    let result: EvalResult = match &cfg.transport {
        TransportField::Local => {
            let (r, _) = evaluate_local(
                &backbone,
                file.peft,
                policy,
                quant,
                file.modules,
                file.status,
                &samples,
                cfg.batch_size,
                Exchange::Codec(quant),
                backbone_seed,
            )
            .map_err(as_any)?;
            r
        }
        TransportField::Tcp { addr } => {
            let mut t = transport::TcpTransport::connect(addr)
                .with_context(|| format!("connecting to {addr}"))?;
            edge_eval_session(
                &mut t,
                &backbone.edge,
                &backbone.config,
                file.peft,
                policy,
                quant,
                file.modules,
                file.status,
                &samples,
                cfg.batch_size,
                backbone_seed,
            )
            .map_err(as_any)?
        }
    };
    sink.write_eval(&result);
    sink.finish()?;
    info!(
        "evaluated {} scored tokens: mean loss {:.6}, accuracy {:.4}",
        result.scored_tokens, result.mean_loss, result.accuracy
    );
    Ok(())
}

fn serve<S: Scalar>(backbone_path: &Path, addr: &str) -> Result<()> {
    let (backbone, _) = checkpoint::load_backbone::<S>(backbone_path)?;
    let listener = TcpListener::bind(addr)
        .with_context(|| format!("binding {addr}"))
        .map_err(as_usage)?;
    let local = listener.local_addr()?;
    println!("listening on {local}");
    std::io::stdout().flush()?;
    let (stream, peer) = listener.accept().context("accepting edge connection")?;
    info!("edge connected from {peer}");
    let mut t = transport::TcpTransport::new(stream)?;
    let outcome = serve_cloud(&mut t, &backbone.cloud, &backbone.config).map_err(as_any)?;
    info!(
        "session complete: served {} steps, {} flops, final status {}",
        outcome.steps_served,
        outcome.ledger.cloud_flops,
        metrics::status_string(&outcome.final_status)
    );
    Ok(())
}

fn report(metrics_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics_path)
        .with_context(|| format!("reading {}", metrics_path.display()))
        .map_err(as_usage)?;
    let mut csv = Vec::new();
    let rows = metrics::report_csv(&text, &mut csv)?;
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {rows} epoch rows to {}", out.display());
    Ok(())
}
