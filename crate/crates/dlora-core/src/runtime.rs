//! Two-node training choreography.
//!
//! The edge node owns the raw data, the embedding, the loss, the trainable
//! modules and their optimizer; the cloud node owns the frozen blocks and
//! the head. One training step exchanges, in order:
//!
//! ```text
//! edge → cloud   FwdActivation   layer 0, the embedded batch
//! cloud → edge   FwdActivation   per applied module: the site activation
//! edge → cloud   FwdDelta          ... and its delta back
//! cloud → edge   LogitsToEdge
//! edge → cloud   LossGradToCloud
//! cloud → edge   BwdGrad         per active module: upstream site gradients
//! edge → cloud   BwdDeltaGrad      ... and the branch input-gradient back
//! ```
//!
//! so a step with `A` applied-and-active modules costs `4A + 3` frames, and
//! raw tokens or labels never appear in any of them.
//!
//! Epoch layout: epoch 0 is the warmup phase (`warmup_steps` batches with
//! every module active), epochs `1..=epochs` are full passes over the
//! dataset. Every epoch boundary sends `EpochEnd`; under the kill-and-revive
//! or kill-only schedulers it also sends a `NormReport` and receives the
//! `Command` that sets the next epoch's active set (one extra `NormReport`
//! right after the handshake records the pre-warmup norms). The edge runs a
//! mirror of the scheduler on the values it reported and treats any
//! disagreement with the received command as a desync error.
//!
//! The monolithic runner (`finetune_local` / `evaluate_local`) executes both
//! roles in one call stack. In `Exchange::Codec` mode every tensor crossing
//! the edge/cloud boundary is still pushed through `encode_frame` /
//! `decode_frame` and both cost ledgers are charged, so its losses, module
//! bytes and metrics agree with a genuine two-process run frame for frame,
//! at every quantization setting. `Exchange::Direct` skips the codec and all
//! byte accounting and serves as the plain reference implementation.

use crate::cost::{
    adamw_flops, cross_entropy_flops, matmul_flops, CostLedger, Direction, EpochCosts,
};
use crate::model::{
    argmax_lowest, backward_backbone, cloud_backward_flops, cloud_forward_flops, forward_backbone,
    Backbone, BranchCounts, CloudPart, DeltaSource, EdgePart, ForwardCache, GradSink, ModelConfig,
};
use crate::peft::{
    adamw_step, adapter_delta, adapter_delta_backward, cosine_lr, init_module, lora_backward,
    lora_delta, module_l2_norm, OptimState, PeftConfig, PeftKind, PeftModule,
};
use crate::protocol::{
    decode_frame, encode_frame, FrameTransport, FrozenPolicy, ProtocolError, QuantBits,
    SessionMode, Site, TransportError, WireConfig, WireMessage,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scheduler::{ModuleStatus, Scheduler, SchedulerError, TuneMode};
use crate::tensor::{cross_entropy, Tensor, TensorError};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug)]
pub enum RuntimeError {
    Tensor(TensorError),
    Protocol(ProtocolError),
    Transport(TransportError),
    Scheduler(SchedulerError),
    /// The two nodes disagree about module status or choreography state.
    Desync(String),
    /// A frame arrived that the current protocol state cannot accept.
    Unexpected {
        expected: &'static str,
        got: u8,
    },
    Config(String),
}

impl fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuntimeError::Tensor(e) => write!(f, "tensor error: {e}"),
            RuntimeError::Protocol(e) => write!(f, "protocol error: {e}"),
            RuntimeError::Transport(e) => write!(f, "transport error: {e}"),
            RuntimeError::Scheduler(e) => write!(f, "scheduler error: {e}"),
            RuntimeError::Desync(m) => write!(f, "node desync: {m}"),
            RuntimeError::Unexpected { expected, got } => {
                write!(f, "expected {expected}, got message type {got}")
            }
            RuntimeError::Config(m) => write!(f, "bad run configuration: {m}"),
        }
    }
}

impl core::error::Error for RuntimeError {}

impl From<TensorError> for RuntimeError {
    fn from(e: TensorError) -> Self {
        RuntimeError::Tensor(e)
    }
}
impl From<ProtocolError> for RuntimeError {
    fn from(e: ProtocolError) -> Self {
        RuntimeError::Protocol(e)
    }
}
impl From<TransportError> for RuntimeError {
    fn from(e: TransportError) -> Self {
        RuntimeError::Transport(e)
    }
}
impl From<SchedulerError> for RuntimeError {
    fn from(e: SchedulerError) -> Self {
        RuntimeError::Scheduler(e)
    }
}

// ---- data ----

/// One training/evaluation sequence. Positions `score_from .. len-1` are
/// scored (each predicts the next token); earlier positions are context
/// only, so prompts never contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub score_from: usize,
}

impl Sample {
    pub fn new(tokens: Vec<u32>, score_from: usize) -> Result<Self, RuntimeError> {
        if tokens.len() < 2 {
            return Err(RuntimeError::Config(String::from(
                "samples need at least two tokens",
            )));
        }
        if score_from + 2 > tokens.len() {
            return Err(RuntimeError::Config(String::from(
                "score_from leaves no scored positions",
            )));
        }
        Ok(Sample { tokens, score_from })
    }
}

fn check_samples(samples: &[Sample], vocab: usize, max_seq: usize) -> Result<usize, RuntimeError> {
    let Some(first) = samples.first() else {
        return Err(RuntimeError::Config(String::from("empty dataset")));
    };
    let t = first.tokens.len();
    if t > max_seq {
        return Err(RuntimeError::Config(format!(
            "sequence length {t} exceeds model maximum {max_seq}"
        )));
    }
    for s in samples {
        if s.tokens.len() != t {
            return Err(RuntimeError::Config(String::from(
                "all samples must share one sequence length",
            )));
        }
        if s.score_from + 2 > t {
            return Err(RuntimeError::Config(String::from(
                "score_from leaves no scored positions",
            )));
        }
        if s.tokens.iter().any(|&tok| tok as usize >= vocab) {
            return Err(RuntimeError::Config(String::from(
                "token id out of vocabulary",
            )));
        }
    }
    Ok(t)
}

/// Scored logit rows of one batch: flat row indices into the `[b·T × V]`
/// logits plus the target token per row.
struct ScoredBatch {
    rows: Vec<usize>,
    targets: Vec<usize>,
}

fn scored_rows(batch: &[Sample], t: usize) -> ScoredBatch {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        for pos in s.score_from..t - 1 {
            rows.push(i * t + pos);
            targets.push(s.tokens[pos + 1] as usize);
        }
    }
    ScoredBatch { rows, targets }
}

// ---- metrics ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based global step count.
    pub step: u64,
    pub epoch: u32,
    pub loss: f64,
    /// Nominal cosine learning rate at this step (a revived module's own
    /// clock may lag behind this).
    pub lr: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<'a> {
    pub epoch: u32,
    pub steps: u64,
    pub mean_loss: Option<f64>,
    /// Status in force for the *next* phase (after any command).
    pub status: &'a [ModuleStatus],
    /// Change scores that drove the selection (None when no scheduler runs).
    pub scores: Option<&'a [f64]>,
    /// Module norms at this boundary (computed locally in every mode).
    pub norms: &'a [f64],
    /// Edge-ledger totals accumulated within this epoch alone.
    pub costs: EpochCosts,
}

pub trait MetricsSink {
    fn on_step(&mut self, rec: &StepRecord);
    fn on_epoch(&mut self, rec: &EpochRecord<'_>);
}

/// Discards everything.
pub struct NoMetrics;

impl MetricsSink for NoMetrics {
    fn on_step(&mut self, _rec: &StepRecord) {}
    fn on_epoch(&mut self, _rec: &EpochRecord<'_>) {}
}

// ---- edge compute ----

fn module_applies(status: ModuleStatus, policy: FrozenPolicy) -> bool {
    status == ModuleStatus::Active || policy == FrozenPolicy::ComputeFrozenOnEdge
}

/// One batch's module parameter gradients, indexed by layer, tensors in
/// [`PeftModule::params`] order; layers that produced none hold `None`.
pub type LayerGrads<S> = Vec<Option<Vec<Tensor<S>>>>;

/// The edge's trainable state and math: one module per block, the optimizer,
/// the current status vector and the edge cost ledger. Implements the
/// forward/backward hooks, so the exact same code serves the monolithic
/// runner and the wire loop.
pub struct EdgeCompute<S: Scalar> {
    model: ModelConfig,
    peft: PeftConfig,
    policy: FrozenPolicy,
    eval_only: bool,
    modules: Vec<PeftModule<S>>,
    optim: Vec<OptimState<S>>,
    status: Vec<ModuleStatus>,
    site_input: Vec<Option<Tensor<S>>>,
    adapter_z: Vec<Option<Tensor<S>>>,
    /// When set, backward hooks stash raw parameter gradients here instead
    /// of taking an optimizer step. See [`EdgeCompute::batch_grads`].
    grad_capture: Option<LayerGrads<S>>,
    pub ledger: CostLedger,
}

impl<S: Scalar> EdgeCompute<S> {
    /// Fresh modules drawn layer 0 first from `module_seed`.
    pub fn new(
        model: ModelConfig,
        peft: PeftConfig,
        policy: FrozenPolicy,
        module_seed: u64,
        base_lr: f64,
        total_steps: u64,
    ) -> Self {
        let mut rng = Rng::new(module_seed);
        let modules: Vec<PeftModule<S>> = (0..model.n_layers)
            .map(|_| init_module(&peft, model.d_model, &mut rng))
            .collect();
        let optim = modules
            .iter()
            .map(|m| OptimState::for_module(m, base_lr, total_steps))
            .collect();
        EdgeCompute {
            model,
            peft,
            policy,
            eval_only: false,
            status: vec![ModuleStatus::Active; model.n_layers],
            site_input: vec![None; model.n_layers],
            adapter_z: vec![None; model.n_layers],
            grad_capture: None,
            modules,
            optim,
            ledger: CostLedger::new(),
        }
    }

    /// Wraps already-trained modules for forward-only use.
    pub fn for_eval(
        model: ModelConfig,
        peft: PeftConfig,
        policy: FrozenPolicy,
        modules: Vec<PeftModule<S>>,
        status: Vec<ModuleStatus>,
    ) -> Result<Self, RuntimeError> {
        if modules.len() != model.n_layers || status.len() != model.n_layers {
            return Err(RuntimeError::Config(String::from(
                "module or status count does not match layer count",
            )));
        }
        let optim = modules
            .iter()
            .map(|m| OptimState::for_module(m, 0.0, 1))
            .collect();
        Ok(EdgeCompute {
            model,
            peft,
            policy,
            eval_only: true,
            modules,
            optim,
            status,
            site_input: vec![None; model.n_layers],
            adapter_z: vec![None; model.n_layers],
            grad_capture: None,
            ledger: CostLedger::new(),
        })
    }

    pub fn status(&self) -> &[ModuleStatus] {
        &self.status
    }

    pub fn set_status(&mut self, status: Vec<ModuleStatus>) -> Result<(), RuntimeError> {
        if status.len() != self.modules.len() {
            return Err(RuntimeError::Desync(String::from(
                "command length does not match module count",
            )));
        }
        self.status = status;
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == ModuleStatus::Active)
            .count()
    }

    pub fn modules(&self) -> &[PeftModule<S>] {
        &self.modules
    }

    /// Mutable access to the modules, e.g. to install specific weights
    /// before a gradient check or a resumed run.
    pub fn modules_mut(&mut self) -> &mut [PeftModule<S>] {
        &mut self.modules
    }

    /// L2 norm of every module's parameters, in layer order. Scheduler
    /// bookkeeping, deliberately not charged to the FLOP ledger.
    pub fn norms(&self) -> Vec<f64> {
        self.modules.iter().map(module_l2_norm).collect()
    }

    /// Scored mean loss of one batch with no backward pass and no parameter
    /// update. This is the value the gradients returned by
    /// [`EdgeCompute::batch_grads`] differentiate, so it doubles as the
    /// finite-difference oracle for gradient checks.
    pub fn batch_loss(
        &mut self,
        edge_part: &EdgePart<S>,
        cloud: &CloudPart<S>,
        batch: &[Sample],
    ) -> Result<f64, RuntimeError> {
        let model = self.model;
        let t = batch.first().map_or(0, |s| s.tokens.len());
        let (h0, scored) = self.embed_batch(edge_part, batch, t)?;
        let (logits, _cache) = forward_backbone(cloud, &model, h0, batch.len(), t, self)?;
        let (loss, _dlogits) = self.scored_loss(&logits, &scored)?;
        Ok(loss)
    }

    /// Forward + backward for one batch, returning the loss and the raw
    /// parameter gradients of every module that produced them (indexed by
    /// layer, tensors in [`PeftModule::params`] order) *without* taking an
    /// optimizer step. Inactive layers hold `None`.
    pub fn batch_grads(
        &mut self,
        edge_part: &EdgePart<S>,
        cloud: &CloudPart<S>,
        batch: &[Sample],
    ) -> Result<(f64, LayerGrads<S>), RuntimeError> {
        let model = self.model;
        let t = batch.first().map_or(0, |s| s.tokens.len());
        self.grad_capture = Some(vec![None; model.n_layers]);
        let run = (|| {
            let (h0, scored) = self.embed_batch(edge_part, batch, t)?;
            let (logits, cache) = forward_backbone(cloud, &model, h0, batch.len(), t, self)?;
            let (loss, dlogits) = self.scored_loss(&logits, &scored)?;
            backward_backbone(cloud, &model, &cache, &dlogits, batch.len(), t, self, None)?;
            Ok::<f64, RuntimeError>(loss)
        })();
        let grads = self.grad_capture.take().unwrap_or_default();
        Ok((run?, grads))
    }

    fn clear_step_caches(&mut self) {
        for c in &mut self.site_input {
            *c = None;
        }
        for c in &mut self.adapter_z {
            *c = None;
        }
    }

    /// Embeds one batch (charging the position-add) and returns the `[n×d]`
    /// activation plus its scored-row index.
    fn embed_batch(
        &mut self,
        edge_part: &EdgePart<S>,
        batch: &[Sample],
        t: usize,
    ) -> Result<(Tensor<S>, ScoredBatch), RuntimeError> {
        self.clear_step_caches();
        let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let h0 = edge_part
            .embed(&seqs)?
            .reshaped(vec![batch.len() * t, self.model.d_model])?;
        self.ledger.add_edge_flops(h0.numel() as u64);
        Ok((h0, scored_rows(batch, t)))
    }

    /// Cross entropy over the scored rows, scattered back into a full-shape
    /// logits gradient.
    fn scored_loss(
        &mut self,
        logits: &Tensor<S>,
        scored: &ScoredBatch,
    ) -> Result<(f64, Tensor<S>), RuntimeError> {
        let v = logits.cols();
        let k = scored.rows.len();
        let mut picked = Vec::with_capacity(k * v);
        for &r in &scored.rows {
            picked.extend_from_slice(logits.row(r));
        }
        let picked = Tensor::from_vec(vec![k, v], picked);
        let (loss, dpicked) = cross_entropy(&picked, &scored.targets)?;
        self.ledger.add_edge_flops(cross_entropy_flops(k, v));
        let mut dlogits = Tensor::zeros(&[logits.rows(), v]);
        for (i, &r) in scored.rows.iter().enumerate() {
            dlogits.row_mut(r).copy_from_slice(dpicked.row(i));
        }
        Ok((loss.to_f64(), dlogits))
    }

    /// Teacher-forced greedy accuracy over the scored rows.
    fn scored_accuracy(&self, logits: &Tensor<S>, scored: &ScoredBatch) -> (u64, u64) {
        let mut correct = 0u64;
        for (&r, &tgt) in scored.rows.iter().zip(&scored.targets) {
            if argmax_lowest(logits.row(r)) == tgt {
                correct += 1;
            }
        }
        (correct, scored.rows.len() as u64)
    }

    fn lora_forward_flops(&self, n: usize) -> u64 {
        let d = self.model.d_model;
        let r = self.peft.rank;
        3 * (matmul_flops(n, d, r) + matmul_flops(n, r, d) + (n * d) as u64)
    }

    fn adapter_forward_flops(&self, n: usize) -> u64 {
        let d = self.model.d_model;
        let m = self.peft.adapter_dim;
        matmul_flops(n, d, m) + (6 * n * m) as u64 + matmul_flops(n, m, d) + (n * d) as u64
    }

    fn lora_backward_flops(&self, n: usize) -> u64 {
        let d = self.model.d_model;
        let r = self.peft.rank;
        let per_proj = matmul_flops(n, d, r)      // p
            + matmul_flops(n, r, d) + (r * d) as u64   // g_up + scale
            + matmul_flops(n, d, r) + (n * r) as u64   // dp + scale
            + matmul_flops(n, r, d)                    // g_down
            + matmul_flops(n, r, d); // dh
        3 * per_proj + 2 * (n * d) as u64 // dh accumulation across q, k, v
    }

    fn adapter_backward_flops(&self, n: usize) -> u64 {
        let d = self.model.d_model;
        let m = self.peft.adapter_dim;
        (5 * n * m) as u64                       // silu(z) recompute
            + matmul_flops(n, m, d)              // g_wb
            + (n * d) as u64                     // g_bb reduce
            + matmul_flops(n, d, m)              // da
            + (6 * n * m) as u64                 // silu grad gate
            + matmul_flops(n, d, m)              // g_wa
            + (n * m) as u64                     // g_ba reduce
            + matmul_flops(n, m, d) // dh
    }

    fn module_param_count(&self) -> usize {
        self.modules[0].params().iter().map(|t| t.numel()).sum()
    }
}

impl<S: Scalar> DeltaSource<S> for EdgeCompute<S> {
    fn qkv_delta(
        &mut self,
        layer: usize,
        attn_in: &Tensor<S>,
    ) -> Result<Option<[Tensor<S>; 3]>, TensorError> {
        if self.peft.kind != PeftKind::Lora || !module_applies(self.status[layer], self.policy) {
            return Ok(None);
        }
        self.site_input[layer] = Some(attn_in.clone());
        let PeftModule::Lora(m) = &self.modules[layer] else {
            return Err(TensorError::msg("module kind mismatch"));
        };
        let dq = lora_delta(attn_in, &m.q, m.alpha)?;
        let dk = lora_delta(attn_in, &m.k, m.alpha)?;
        let dv = lora_delta(attn_in, &m.v, m.alpha)?;
        self.ledger
            .add_edge_flops(self.lora_forward_flops(attn_in.rows()));
        Ok(Some([dq, dk, dv]))
    }

    fn mlp_delta(
        &mut self,
        layer: usize,
        mlp_core: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.peft.kind != PeftKind::Adapter || !module_applies(self.status[layer], self.policy) {
            return Ok(None);
        }
        self.site_input[layer] = Some(mlp_core.clone());
        let PeftModule::Adapter(m) = &self.modules[layer] else {
            return Err(TensorError::msg("module kind mismatch"));
        };
        let (delta, z) = adapter_delta(mlp_core, m)?;
        self.adapter_z[layer] = Some(z);
        self.ledger
            .add_edge_flops(self.adapter_forward_flops(mlp_core.rows()));
        Ok(Some(delta))
    }
}

impl<S: Scalar> GradSink<S> for EdgeCompute<S> {
    fn qkv_grads(
        &mut self,
        layer: usize,
        dq: &Tensor<S>,
        dk: &Tensor<S>,
        dv: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.eval_only
            || self.peft.kind != PeftKind::Lora
            || self.status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        let h = self.site_input[layer]
            .take()
            .ok_or_else(|| TensorError::msg("backward before forward at this site"))?;
        let n = h.rows();
        let PeftModule::Lora(m) = &self.modules[layer] else {
            return Err(TensorError::msg("module kind mismatch"));
        };
        let gq = lora_backward(&h, &m.q, m.alpha, dq)?;
        let gk = lora_backward(&h, &m.k, m.alpha, dk)?;
        let gv = lora_backward(&h, &m.v, m.alpha, dv)?;
        let mut dh = gq.dh;
        dh.add_assign(&gk.dh)?;
        dh.add_assign(&gv.dh)?;
        let grads = [
            &gq.g_down, &gq.g_up, &gk.g_down, &gk.g_up, &gv.g_down, &gv.g_up,
        ];
        if let Some(cap) = &mut self.grad_capture {
            cap[layer] = Some(grads.iter().map(|&g| g.clone()).collect());
        } else {
            let mut params = self.modules[layer].params_mut();
            adamw_step(&mut params, &grads, &mut self.optim[layer])?;
            self.ledger
                .add_edge_flops(adamw_flops(self.module_param_count()));
        }
        self.ledger.add_edge_flops(self.lora_backward_flops(n));
        Ok(Some(dh))
    }

    fn mlp_grad(
        &mut self,
        layer: usize,
        d_delta: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.eval_only
            || self.peft.kind != PeftKind::Adapter
            || self.status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        let h = self.site_input[layer]
            .take()
            .ok_or_else(|| TensorError::msg("backward before forward at this site"))?;
        let z = self.adapter_z[layer]
            .take()
            .ok_or_else(|| TensorError::msg("missing adapter pre-activation cache"))?;
        let n = h.rows();
        let PeftModule::Adapter(m) = &self.modules[layer] else {
            return Err(TensorError::msg("module kind mismatch"));
        };
        let g = adapter_delta_backward(&h, m, &z, d_delta)?;
        let grads = [&g.g_wa, &g.g_ba, &g.g_wb, &g.g_bb];
        if let Some(cap) = &mut self.grad_capture {
            cap[layer] = Some(grads.iter().map(|&g| g.clone()).collect());
        } else {
            let mut params = self.modules[layer].params_mut();
            adamw_step(&mut params, &grads, &mut self.optim[layer])?;
            self.ledger
                .add_edge_flops(adamw_flops(self.module_param_count()));
        }
        self.ledger.add_edge_flops(self.adapter_backward_flops(n));
        Ok(Some(g.dh))
    }
}

// ---- cloud-side helpers shared by the local and wire paths ----

fn reshape3<S: Scalar>(t: Tensor<S>, b: usize, tl: usize) -> Result<Tensor<S>, TensorError> {
    let c = t.cols();
    t.reshaped(vec![b, tl, c])
}

fn reshape2<S: Scalar>(t: Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(TensorError::msg("expected a [batch, seq, features] tensor"));
    }
    let (b, tl, c) = (dims[0], dims[1], dims[2]);
    t.reshaped(vec![b * tl, c])
}

/// Residual-add FLOPs for the deltas that were actually applied/returned.
fn delta_add_flops(cfg: &ModelConfig, n: usize, fwd_qkv: usize, fwd_mlp: usize) -> u64 {
    ((3 * fwd_qkv + fwd_mlp) * n * cfg.d_model) as u64
}

fn branch_add_flops(cfg: &ModelConfig, n: usize, branch: BranchCounts) -> u64 {
    (((branch.qkv + branch.mlp) * n) * cfg.d_model) as u64
}

// ---- the cloud link abstraction ----

/// What the edge driver needs from "the other side". `LocalLink` executes the
/// cloud in-process; `WireLink` talks to a remote one. Both take the
/// `EdgeCompute` so delta/grad exchanges can run against it.
trait CloudLink<S: Scalar> {
    fn handshake(
        &mut self,
        compute: &mut EdgeCompute<S>,
        cfg: &WireConfig,
    ) -> Result<(), RuntimeError>;
    /// Eval sessions only: announce the status set the forward should use.
    fn eval_status(
        &mut self,
        compute: &mut EdgeCompute<S>,
        status: &[ModuleStatus],
    ) -> Result<(), RuntimeError>;
    fn forward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        h0: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<Tensor<S>, RuntimeError>;
    fn backward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        loss: f64,
        dlogits: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<(), RuntimeError>;
    fn epoch_end(&mut self, compute: &mut EdgeCompute<S>, epoch: u32) -> Result<(), RuntimeError>;
    /// Sends one norm report; when `expect_command` the returned status is
    /// the cloud's (mirrored locally by the caller).
    fn norm_exchange(
        &mut self,
        compute: &mut EdgeCompute<S>,
        norms: &[f64],
        expect_command: bool,
    ) -> Result<Option<Vec<ModuleStatus>>, RuntimeError>;
    fn shutdown(&mut self, compute: &mut EdgeCompute<S>) -> Result<(), RuntimeError>;
}

// ---- monolithic (in-process) cloud ----

/// How the monolithic runner moves tensors across the edge/cloud boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exchange {
    /// Hand tensors over directly; no codec, no byte accounting. The plain
    /// reference path.
    Direct,
    /// Round-trip every boundary tensor through the frame codec at this
    /// quantization and charge both ledgers, mirroring a real split run.
    Codec(QuantBits),
}

struct LocalLink<'a, S: Scalar> {
    cloud: &'a CloudPart<S>,
    cfg: ModelConfig,
    kind: PeftKind,
    policy: FrozenPolicy,
    exchange: Exchange,
    cloud_status: Vec<ModuleStatus>,
    scheduler: Option<Scheduler>,
    cloud_ledger: CostLedger,
    pending: Option<(ForwardCache<S>, usize, usize)>,
    pending_epoch: Option<u32>,
}

impl<'a, S: Scalar> LocalLink<'a, S> {
    fn new(
        cloud: &'a CloudPart<S>,
        cfg: ModelConfig,
        kind: PeftKind,
        policy: FrozenPolicy,
        exchange: Exchange,
        scheduler: Option<Scheduler>,
        initial_status: Vec<ModuleStatus>,
    ) -> Self {
        LocalLink {
            cloud,
            cfg,
            kind,
            policy,
            exchange,
            cloud_status: initial_status,
            scheduler,
            cloud_ledger: CostLedger::new(),
            pending: None,
            pending_epoch: None,
        }
    }

    /// Simulates one frame crossing the boundary: encode, charge both
    /// ledgers, decode. Returns the decoded message.
    fn cross(
        &mut self,
        edge_ledger: &mut CostLedger,
        msg: &WireMessage<S>,
        quant: QuantBits,
        dir: Direction,
    ) -> Result<WireMessage<S>, RuntimeError> {
        let frame = encode_frame(msg, quant);
        match dir {
            Direction::ToCloud => {
                edge_ledger.record_sent_frame(dir, frame.len());
                self.cloud_ledger.record_received_frame(dir, frame.len());
            }
            Direction::ToEdge => {
                self.cloud_ledger.record_sent_frame(dir, frame.len());
                edge_ledger.record_received_frame(dir, frame.len());
            }
        }
        Ok(decode_frame(&frame)?)
    }

    fn snapshot_if_pending(&mut self) {
        if let Some(e) = self.pending_epoch.take() {
            self.cloud_ledger.snapshot_epoch(e);
        }
    }
}

/// The monolithic forward/backward hook: answers the model's per-site
/// queries by invoking the edge compute, optionally through the codec.
struct LoopbackHook<'a, 'b, S: Scalar> {
    link: &'a mut LocalLink<'b, S>,
    compute: &'a mut EdgeCompute<S>,
    b: usize,
    t: usize,
    error: Option<RuntimeError>,
}

impl<'a, 'b, S: Scalar> LoopbackHook<'a, 'b, S> {
    fn exchange_fwd(
        &mut self,
        layer: usize,
        site: Site,
        activation: &Tensor<S>,
        quant: QuantBits,
    ) -> Result<Vec<Tensor<S>>, RuntimeError> {
        let msg = WireMessage::FwdActivation {
            layer: layer as u32,
            site,
            tensor: reshape3(activation.clone(), self.b, self.t)?,
        };
        let decoded = self
            .link
            .cross(&mut self.compute.ledger, &msg, quant, Direction::ToEdge)?;
        let WireMessage::FwdActivation { tensor, .. } = decoded else {
            unreachable!("codec changed the message type");
        };
        let act = reshape2(tensor)?;
        let deltas: Vec<Tensor<S>> = match site {
            Site::QkvInput => self
                .compute
                .qkv_delta(layer, &act)?
                .ok_or_else(|| RuntimeError::Desync(String::from("edge skipped an exchange")))?
                .into_iter()
                .collect(),
            Site::MlpInput => vec![self
                .compute
                .mlp_delta(layer, &act)?
                .ok_or_else(|| RuntimeError::Desync(String::from("edge skipped an exchange")))?],
        };
        let reply = WireMessage::FwdDelta {
            layer: layer as u32,
            tensors: deltas
                .into_iter()
                .map(|d| reshape3(d, self.b, self.t))
                .collect::<Result<_, _>>()?,
        };
        let decoded =
            self.link
                .cross(&mut self.compute.ledger, &reply, quant, Direction::ToCloud)?;
        let WireMessage::FwdDelta { tensors, .. } = decoded else {
            unreachable!("codec changed the message type");
        };
        tensors
            .into_iter()
            .map(reshape2)
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }

    fn exchange_bwd(
        &mut self,
        layer: usize,
        site: Site,
        grads: Vec<Tensor<S>>,
        quant: QuantBits,
    ) -> Result<Tensor<S>, RuntimeError> {
        let msg = WireMessage::BwdGrad {
            layer: layer as u32,
            site,
            tensors: grads
                .into_iter()
                .map(|g| reshape3(g, self.b, self.t))
                .collect::<Result<_, _>>()?,
        };
        let decoded = self
            .link
            .cross(&mut self.compute.ledger, &msg, quant, Direction::ToEdge)?;
        let WireMessage::BwdGrad { tensors, .. } = decoded else {
            unreachable!("codec changed the message type");
        };
        let flat: Vec<Tensor<S>> = tensors
            .into_iter()
            .map(reshape2)
            .collect::<Result<_, _>>()?;
        let dh = match site {
            Site::QkvInput => self
                .compute
                .qkv_grads(layer, &flat[0], &flat[1], &flat[2])?,
            Site::MlpInput => self.compute.mlp_grad(layer, &flat[0])?,
        }
        .ok_or_else(|| RuntimeError::Desync(String::from("edge skipped a gradient exchange")))?;
        let reply = WireMessage::BwdDeltaGrad {
            layer: layer as u32,
            tensor: reshape3(dh, self.b, self.t)?,
        };
        let decoded =
            self.link
                .cross(&mut self.compute.ledger, &reply, quant, Direction::ToCloud)?;
        let WireMessage::BwdDeltaGrad { tensor, .. } = decoded else {
            unreachable!("codec changed the message type");
        };
        Ok(reshape2(tensor)?)
    }

    fn fail(&mut self, e: RuntimeError) -> TensorError {
        self.error = Some(e);
        TensorError::msg("boundary exchange failed")
    }
}

impl<'a, 'b, S: Scalar> DeltaSource<S> for LoopbackHook<'a, 'b, S> {
    fn qkv_delta(
        &mut self,
        layer: usize,
        attn_in: &Tensor<S>,
    ) -> Result<Option<[Tensor<S>; 3]>, TensorError> {
        if self.link.kind != PeftKind::Lora
            || !module_applies(self.link.cloud_status[layer], self.link.policy)
        {
            return Ok(None);
        }
        match self.link.exchange {
            Exchange::Direct => {
                let d = self.compute.qkv_delta(layer, attn_in)?;
                if d.is_none() {
                    return Err(self.fail(RuntimeError::Desync(String::from(
                        "module status desync between roles",
                    ))));
                }
                Ok(d)
            }
            Exchange::Codec(q) => match self.exchange_fwd(layer, Site::QkvInput, attn_in, q) {
                Ok(mut v) if v.len() == 3 => {
                    let dv = v.pop().unwrap();
                    let dk = v.pop().unwrap();
                    let dq = v.pop().unwrap();
                    Ok(Some([dq, dk, dv]))
                }
                Ok(_) => Err(self.fail(RuntimeError::Desync(String::from(
                    "attention exchange returned wrong tensor count",
                )))),
                Err(e) => Err(self.fail(e)),
            },
        }
    }

    fn mlp_delta(
        &mut self,
        layer: usize,
        mlp_core: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.link.kind != PeftKind::Adapter
            || !module_applies(self.link.cloud_status[layer], self.link.policy)
        {
            return Ok(None);
        }
        match self.link.exchange {
            Exchange::Direct => {
                let d = self.compute.mlp_delta(layer, mlp_core)?;
                if d.is_none() {
                    return Err(self.fail(RuntimeError::Desync(String::from(
                        "module status desync between roles",
                    ))));
                }
                Ok(d)
            }
            Exchange::Codec(q) => match self.exchange_fwd(layer, Site::MlpInput, mlp_core, q) {
                Ok(mut v) if v.len() == 1 => Ok(Some(v.pop().unwrap())),
                Ok(_) => Err(self.fail(RuntimeError::Desync(String::from(
                    "adapter exchange returned wrong tensor count",
                )))),
                Err(e) => Err(self.fail(e)),
            },
        }
    }
}

impl<'a, 'b, S: Scalar> GradSink<S> for LoopbackHook<'a, 'b, S> {
    fn qkv_grads(
        &mut self,
        layer: usize,
        dq: &Tensor<S>,
        dk: &Tensor<S>,
        dv: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.link.kind != PeftKind::Lora || self.link.cloud_status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        match self.link.exchange {
            Exchange::Direct => {
                let g = self.compute.qkv_grads(layer, dq, dk, dv)?;
                if g.is_none() {
                    return Err(self.fail(RuntimeError::Desync(String::from(
                        "module status desync between roles",
                    ))));
                }
                Ok(g)
            }
            Exchange::Codec(q) => {
                match self.exchange_bwd(
                    layer,
                    Site::QkvInput,
                    vec![dq.clone(), dk.clone(), dv.clone()],
                    q,
                ) {
                    Ok(dh) => Ok(Some(dh)),
                    Err(e) => Err(self.fail(e)),
                }
            }
        }
    }

    fn mlp_grad(
        &mut self,
        layer: usize,
        d_delta: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.link.kind != PeftKind::Adapter
            || self.link.cloud_status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        match self.link.exchange {
            Exchange::Direct => {
                let g = self.compute.mlp_grad(layer, d_delta)?;
                if g.is_none() {
                    return Err(self.fail(RuntimeError::Desync(String::from(
                        "module status desync between roles",
                    ))));
                }
                Ok(g)
            }
            Exchange::Codec(q) => {
                match self.exchange_bwd(layer, Site::MlpInput, vec![d_delta.clone()], q) {
                    Ok(dh) => Ok(Some(dh)),
                    Err(e) => Err(self.fail(e)),
                }
            }
        }
    }
}

/// Unwraps a hook-mediated model error, preferring the precise runtime error
/// the hook stashed over the generic tensor error the model saw.
fn hook_result<T>(
    r: Result<T, TensorError>,
    stashed: &mut Option<RuntimeError>,
) -> Result<T, RuntimeError> {
    match r {
        Ok(v) => Ok(v),
        Err(e) => Err(stashed.take().map_or(RuntimeError::Tensor(e), |re| re)),
    }
}

impl<'b, S: Scalar> CloudLink<S> for LocalLink<'b, S> {
    fn handshake(
        &mut self,
        compute: &mut EdgeCompute<S>,
        cfg: &WireConfig,
    ) -> Result<(), RuntimeError> {
        let msg = WireMessage::<S>::Config(cfg.clone());
        if let Exchange::Codec(q) = self.exchange {
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
            let WireMessage::Config(c) = decoded else {
                unreachable!("codec changed the message type");
            };
            validate_config(&c, &self.cfg, S::DTYPE.code())?;
        } else {
            validate_config(cfg, &self.cfg, S::DTYPE.code())?;
        }
        Ok(())
    }

    fn eval_status(
        &mut self,
        compute: &mut EdgeCompute<S>,
        status: &[ModuleStatus],
    ) -> Result<(), RuntimeError> {
        let msg = WireMessage::<S>::Command {
            status: status.to_vec(),
        };
        let status = if let Exchange::Codec(q) = self.exchange {
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
            let WireMessage::Command { status } = decoded else {
                unreachable!("codec changed the message type");
            };
            status
        } else {
            status.to_vec()
        };
        self.cloud_status = status;
        Ok(())
    }

    fn forward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        h0: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<Tensor<S>, RuntimeError> {
        let h0 = if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::FwdActivation {
                layer: 0,
                site: Site::QkvInput,
                tensor: reshape3(h0, b, t)?,
            };
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
            let WireMessage::FwdActivation { tensor, .. } = decoded else {
                unreachable!("codec changed the message type");
            };
            reshape2(tensor)?
        } else {
            h0
        };
        let cfg = self.cfg;
        let cloud = self.cloud;
        let mut hook = LoopbackHook {
            link: self,
            compute,
            b,
            t,
            error: None,
        };
        let r = forward_backbone(cloud, &cfg, h0, b, t, &mut hook);
        let mut stashed = hook.error.take();
        let (logits, cache) = hook_result(r, &mut stashed)?;
        let fwd_qkv = cache.blocks.iter().filter(|c| c.qkv_delta_applied).count();
        let fwd_mlp = cache.blocks.iter().filter(|c| c.mlp_delta_applied).count();
        self.cloud_ledger.add_cloud_flops(
            cloud_forward_flops(&cfg, b, t) + delta_add_flops(&cfg, b * t, fwd_qkv, fwd_mlp),
        );
        self.pending = Some((cache, b, t));
        if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::LogitsToEdge {
                tensor: reshape3(logits, b, t)?,
            };
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToEdge)?;
            let WireMessage::LogitsToEdge { tensor } = decoded else {
                unreachable!("codec changed the message type");
            };
            Ok(reshape2(tensor)?)
        } else {
            Ok(logits)
        }
    }

    fn backward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        loss: f64,
        dlogits: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<(), RuntimeError> {
        let (cache, cb, ct) = self
            .pending
            .take()
            .ok_or_else(|| RuntimeError::Desync(String::from("backward without a forward")))?;
        if (cb, ct) != (b, t) {
            return Err(RuntimeError::Desync(String::from(
                "batch shape changed between forward and backward",
            )));
        }
        let dlogits = if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::LossGradToCloud {
                loss,
                tensor: reshape3(dlogits, b, t)?,
            };
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
            let WireMessage::LossGradToCloud { tensor, .. } = decoded else {
                unreachable!("codec changed the message type");
            };
            reshape2(tensor)?
        } else {
            dlogits
        };
        let cfg = self.cfg;
        let cloud = self.cloud;
        let mut hook = LoopbackHook {
            link: self,
            compute,
            b,
            t,
            error: None,
        };
        let r = backward_backbone(cloud, &cfg, &cache, &dlogits, b, t, &mut hook, None);
        let mut stashed = hook.error.take();
        let (_dh0, branch) = hook_result(r, &mut stashed)?;
        self.cloud_ledger.add_cloud_flops(
            cloud_backward_flops(&cfg, b, t) + branch_add_flops(&cfg, b * t, branch),
        );
        Ok(())
    }

    fn epoch_end(&mut self, compute: &mut EdgeCompute<S>, epoch: u32) -> Result<(), RuntimeError> {
        if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::<S>::EpochEnd { epoch };
            self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
        }
        if self.scheduler.is_some() {
            // The boundary's norm report and command still belong to this
            // epoch; snapshot once they are done.
            self.pending_epoch = Some(epoch);
        } else {
            self.cloud_ledger.snapshot_epoch(epoch);
        }
        Ok(())
    }

    fn norm_exchange(
        &mut self,
        compute: &mut EdgeCompute<S>,
        norms: &[f64],
        expect_command: bool,
    ) -> Result<Option<Vec<ModuleStatus>>, RuntimeError> {
        let norms_for_cloud = if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::<S>::NormReport {
                norms: norms.to_vec(),
            };
            let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
            let WireMessage::NormReport { norms } = decoded else {
                unreachable!("codec changed the message type");
            };
            norms
        } else {
            norms.to_vec()
        };
        let scheduler = self
            .scheduler
            .as_mut()
            .ok_or_else(|| RuntimeError::Desync(String::from("norm report without scheduler")))?;
        let decision = scheduler.on_norm_report(&norms_for_cloud)?;
        match (expect_command, decision) {
            (false, None) => Ok(None),
            (true, Some(status)) => {
                self.cloud_status = status.clone();
                let status = if let Exchange::Codec(q) = self.exchange {
                    let msg = WireMessage::<S>::Command {
                        status: status.clone(),
                    };
                    let decoded = self.cross(&mut compute.ledger, &msg, q, Direction::ToEdge)?;
                    let WireMessage::Command { status } = decoded else {
                        unreachable!("codec changed the message type");
                    };
                    status
                } else {
                    status
                };
                self.snapshot_if_pending();
                Ok(Some(status))
            }
            _ => Err(RuntimeError::Desync(String::from(
                "scheduler decision out of phase",
            ))),
        }
    }

    fn shutdown(&mut self, compute: &mut EdgeCompute<S>) -> Result<(), RuntimeError> {
        if let Exchange::Codec(q) = self.exchange {
            let msg = WireMessage::<S>::Shutdown;
            self.cross(&mut compute.ledger, &msg, q, Direction::ToCloud)?;
        }
        Ok(())
    }
}

fn validate_config(
    got: &WireConfig,
    model: &ModelConfig,
    precision_code: u8,
) -> Result<(), RuntimeError> {
    let want = (
        model.vocab as u32,
        model.d_model as u32,
        model.n_heads as u32,
        model.d_ff as u32,
        model.n_layers as u32,
        model.max_seq as u32,
    );
    let have = (
        got.vocab,
        got.d_model,
        got.n_heads,
        got.d_ff,
        got.n_layers,
        got.max_seq,
    );
    if want != have {
        return Err(RuntimeError::Config(format!(
            "model shape mismatch: edge {have:?} vs cloud {want:?}"
        )));
    }
    if got.precision.code() != precision_code {
        return Err(RuntimeError::Config(String::from(
            "precision mismatch between nodes",
        )));
    }
    Ok(())
}

// ---- wire link (split edge) ----

struct WireLink<'a, T: FrameTransport> {
    transport: &'a mut T,
    quant: QuantBits,
}

impl<'a, T: FrameTransport> WireLink<'a, T> {
    fn send<S: Scalar>(
        &mut self,
        ledger: &mut CostLedger,
        msg: &WireMessage<S>,
    ) -> Result<(), RuntimeError> {
        let frame = encode_frame(msg, self.quant);
        ledger.record_sent_frame(Direction::ToCloud, frame.len());
        self.transport.send(&frame)?;
        Ok(())
    }

    fn recv<S: Scalar>(&mut self, ledger: &mut CostLedger) -> Result<WireMessage<S>, RuntimeError> {
        let frame = self.transport.recv()?;
        ledger.record_received_frame(Direction::ToEdge, frame.len());
        Ok(decode_frame(&frame)?)
    }
}

impl<'a, T: FrameTransport, S: Scalar> CloudLink<S> for WireLink<'a, T> {
    fn handshake(
        &mut self,
        compute: &mut EdgeCompute<S>,
        cfg: &WireConfig,
    ) -> Result<(), RuntimeError> {
        self.send(&mut compute.ledger, &WireMessage::<S>::Config(cfg.clone()))
    }

    fn eval_status(
        &mut self,
        compute: &mut EdgeCompute<S>,
        status: &[ModuleStatus],
    ) -> Result<(), RuntimeError> {
        self.send(
            &mut compute.ledger,
            &WireMessage::<S>::Command {
                status: status.to_vec(),
            },
        )
    }

    fn forward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        h0: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<Tensor<S>, RuntimeError> {
        self.send(
            &mut compute.ledger,
            &WireMessage::FwdActivation {
                layer: 0,
                site: Site::QkvInput,
                tensor: reshape3(h0, b, t)?,
            },
        )?;
        loop {
            match self.recv::<S>(&mut compute.ledger)? {
                WireMessage::FwdActivation {
                    layer,
                    site,
                    tensor,
                } => {
                    let act = reshape2(tensor)?;
                    let tensors: Vec<Tensor<S>> = match site {
                        Site::QkvInput => compute
                            .qkv_delta(layer as usize, &act)?
                            .ok_or_else(|| {
                                RuntimeError::Desync(String::from(
                                    "cloud requested an exchange this edge would skip",
                                ))
                            })?
                            .into_iter()
                            .collect(),
                        Site::MlpInput => {
                            vec![compute.mlp_delta(layer as usize, &act)?.ok_or_else(|| {
                                RuntimeError::Desync(String::from(
                                    "cloud requested an exchange this edge would skip",
                                ))
                            })?]
                        }
                    };
                    let reply = WireMessage::FwdDelta {
                        layer,
                        tensors: tensors
                            .into_iter()
                            .map(|d| reshape3(d, b, t))
                            .collect::<Result<_, _>>()?,
                    };
                    self.send(&mut compute.ledger, &reply)?;
                }
                WireMessage::LogitsToEdge { tensor } => return Ok(reshape2(tensor)?),
                other => {
                    return Err(RuntimeError::Unexpected {
                        expected: "FwdActivation or LogitsToEdge",
                        got: other.msg_type(),
                    })
                }
            }
        }
    }

    fn backward(
        &mut self,
        compute: &mut EdgeCompute<S>,
        loss: f64,
        dlogits: Tensor<S>,
        b: usize,
        t: usize,
    ) -> Result<(), RuntimeError> {
        self.send(
            &mut compute.ledger,
            &WireMessage::LossGradToCloud {
                loss,
                tensor: reshape3(dlogits, b, t)?,
            },
        )?;
        // The cloud sends one gradient exchange per active module; the edge
        // knows that count from its mirrored status.
        let mut remaining = compute.active_count();
        while remaining > 0 {
            match self.recv::<S>(&mut compute.ledger)? {
                WireMessage::BwdGrad {
                    layer,
                    site,
                    tensors,
                } => {
                    let flat: Vec<Tensor<S>> = tensors
                        .into_iter()
                        .map(reshape2)
                        .collect::<Result<_, _>>()?;
                    let dh = match site {
                        Site::QkvInput => {
                            if flat.len() != 3 {
                                return Err(RuntimeError::Desync(String::from(
                                    "attention gradient exchange needs three tensors",
                                )));
                            }
                            compute.qkv_grads(layer as usize, &flat[0], &flat[1], &flat[2])?
                        }
                        Site::MlpInput => compute.mlp_grad(layer as usize, &flat[0])?,
                    }
                    .ok_or_else(|| {
                        RuntimeError::Desync(String::from(
                            "cloud sent gradients for a module this edge thinks is frozen",
                        ))
                    })?;
                    self.send(
                        &mut compute.ledger,
                        &WireMessage::BwdDeltaGrad {
                            layer,
                            tensor: reshape3(dh, b, t)?,
                        },
                    )?;
                    remaining -= 1;
                }
                other => {
                    return Err(RuntimeError::Unexpected {
                        expected: "BwdGrad",
                        got: other.msg_type(),
                    })
                }
            }
        }
        Ok(())
    }

    fn epoch_end(&mut self, compute: &mut EdgeCompute<S>, epoch: u32) -> Result<(), RuntimeError> {
        self.send(&mut compute.ledger, &WireMessage::<S>::EpochEnd { epoch })
    }

    fn norm_exchange(
        &mut self,
        compute: &mut EdgeCompute<S>,
        norms: &[f64],
        expect_command: bool,
    ) -> Result<Option<Vec<ModuleStatus>>, RuntimeError> {
        self.send(
            &mut compute.ledger,
            &WireMessage::<S>::NormReport {
                norms: norms.to_vec(),
            },
        )?;
        if !expect_command {
            return Ok(None);
        }
        match self.recv::<S>(&mut compute.ledger)? {
            WireMessage::Command { status } => Ok(Some(status)),
            other => Err(RuntimeError::Unexpected {
                expected: "Command",
                got: other.msg_type(),
            }),
        }
    }

    fn shutdown(&mut self, compute: &mut EdgeCompute<S>) -> Result<(), RuntimeError> {
        self.send(&mut compute.ledger, &WireMessage::<S>::Shutdown)
    }
}

// ---- training parameters and results ----

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub peft: PeftConfig,
    pub mode: TuneMode,
    /// Active-module budget; ignored in full-tuning mode.
    pub budget: usize,
    pub policy: FrozenPolicy,
    pub quant: QuantBits,
    pub lr: f64,
    /// Full dataset passes after the warmup phase.
    pub epochs: u32,
    /// Steps in the warmup phase (epoch 0), cycling the dataset from its
    /// start.
    pub warmup_steps: u32,
    pub batch_size: usize,
    pub module_seed: u64,
    /// Backbone identity token both nodes must agree on.
    pub model_seed: u64,
    /// Full-tuning only: start from this status instead of all-active.
    pub initial_status: Option<Vec<ModuleStatus>>,
}

impl TrainSpec {
    pub fn wire_config(&self, model: &ModelConfig, precision: crate::scalar::Dtype) -> WireConfig {
        WireConfig {
            vocab: model.vocab as u32,
            d_model: model.d_model as u32,
            n_heads: model.n_heads as u32,
            d_ff: model.d_ff as u32,
            n_layers: model.n_layers as u32,
            max_seq: model.max_seq as u32,
            precision,
            model_seed: self.model_seed,
            peft_kind: self.peft.kind,
            rank: self.peft.rank as u32,
            adapter_dim: self.peft.adapter_dim as u32,
            alpha: self.peft.alpha,
            mode: SessionMode::Train(self.mode),
            budget: self.budget as u32,
            quant: self.quant,
            policy: self.policy,
            warmup_steps: self.warmup_steps,
        }
    }

    fn validate(&self, n_layers: usize) -> Result<(), RuntimeError> {
        if self.batch_size == 0 {
            return Err(RuntimeError::Config(String::from("batch_size must be > 0")));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(RuntimeError::Config(String::from("lr must be positive")));
        }
        if let Some(st) = &self.initial_status {
            if self.mode != TuneMode::Ft {
                return Err(RuntimeError::Config(String::from(
                    "a fixed initial status is only meaningful without a scheduler",
                )));
            }
            if st.len() != n_layers {
                return Err(RuntimeError::Config(String::from(
                    "initial status length does not match layer count",
                )));
            }
        }
        if self.mode != TuneMode::Ft && (self.budget == 0 || self.budget > n_layers) {
            return Err(RuntimeError::Config(format!(
                "budget must lie in 1..={n_layers}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<S: Scalar> {
    pub modules: Vec<PeftModule<S>>,
    pub status: Vec<ModuleStatus>,
    pub ledger: CostLedger,
    /// Mean loss of the final main epoch (None when it had no steps).
    pub final_loss: Option<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub scored_tokens: u64,
    pub ledger: CostLedger,
}

// ---- the shared edge driver ----

fn drive_training<S: Scalar, L: CloudLink<S>, M: MetricsSink>(
    link: &mut L,
    edge_part: &EdgePart<S>,
    model: &ModelConfig,
    spec: &TrainSpec,
    samples: &[Sample],
    sink: &mut M,
) -> Result<TrainResult<S>, RuntimeError> {
    spec.validate(model.n_layers)?;
    let t = check_samples(samples, model.vocab, model.max_seq)?;
    let n_batches = samples.len() / spec.batch_size;
    if n_batches == 0 {
        return Err(RuntimeError::Config(String::from(
            "dataset smaller than one batch",
        )));
    }
    let total_steps = spec.warmup_steps as u64 + spec.epochs as u64 * n_batches as u64;
    let mut compute: EdgeCompute<S> = EdgeCompute::new(
        *model,
        spec.peft,
        spec.policy,
        spec.module_seed,
        spec.lr,
        total_steps,
    );
    if let Some(st) = &spec.initial_status {
        compute.set_status(st.clone())?;
    }
    let mut mirror = match spec.mode {
        TuneMode::Ft => None,
        m => Some(Scheduler::new(m, spec.budget, model.n_layers)?),
    };

    link.handshake(&mut compute, &spec.wire_config(model, S::DTYPE))?;
    if let Some(mirror) = &mut mirror {
        // Pre-warmup norms: recorded by both schedulers, no decision yet.
        let norms = compute.norms();
        link.norm_exchange(&mut compute, &norms, false)?;
        if mirror.on_norm_report(&norms)?.is_some() {
            return Err(RuntimeError::Desync(String::from(
                "mirror scheduler decided at the initial report",
            )));
        }
    }

    let mut global_step = 0u64;
    let mut final_loss = None;
    for epoch in 0..=spec.epochs {
        let steps_this = if epoch == 0 {
            spec.warmup_steps as u64
        } else {
            n_batches as u64
        };
        let mut loss_sum = 0.0f64;
        for s in 0..steps_this {
            let batch_idx = (s % n_batches as u64) as usize;
            let batch = &samples[batch_idx * spec.batch_size..(batch_idx + 1) * spec.batch_size];
            let (h0, scored) = compute.embed_batch(edge_part, batch, t)?;
            let b = batch.len();
            let logits = link.forward(&mut compute, h0, b, t)?;
            let (loss, dlogits) = compute.scored_loss(&logits, &scored)?;
            link.backward(&mut compute, loss, dlogits, b, t)?;
            loss_sum += loss;
            let lr = cosine_lr(spec.lr, global_step, total_steps);
            global_step += 1;
            sink.on_step(&StepRecord {
                step: global_step,
                epoch,
                loss,
                lr,
                active: compute.active_count(),
            });
        }
        let mean_loss = (steps_this > 0).then(|| loss_sum / steps_this as f64);
        if epoch == spec.epochs {
            final_loss = mean_loss;
        }

        link.epoch_end(&mut compute, epoch)?;
        let norms = compute.norms();
        let mut scores: Option<Vec<f64>> = None;
        if let Some(mirror) = &mut mirror {
            let commanded = link
                .norm_exchange(&mut compute, &norms, true)?
                .ok_or_else(|| {
                    RuntimeError::Desync(String::from("no command at an epoch boundary"))
                })?;
            let expected = mirror.on_norm_report(&norms)?.ok_or_else(|| {
                RuntimeError::Desync(String::from("mirror scheduler made no decision"))
            })?;
            if commanded != expected {
                return Err(RuntimeError::Desync(String::from(
                    "cloud command disagrees with the edge's mirrored scheduler",
                )));
            }
            compute.set_status(commanded)?;
            scores = mirror.diff_rows().last().cloned();
        }
        compute.ledger.snapshot_epoch(epoch);
        let costs = compute
            .ledger
            .epoch_delta(epoch as usize)
            .unwrap_or_default();
        sink.on_epoch(&EpochRecord {
            epoch,
            steps: steps_this,
            mean_loss,
            status: compute.status(),
            scores: scores.as_deref(),
            norms: &norms,
            costs,
        });
    }
    link.shutdown(&mut compute)?;
    Ok(TrainResult {
        status: compute.status.clone(),
        ledger: compute.ledger.clone(),
        modules: compute.modules,
        final_loss,
        steps: global_step,
    })
}

fn drive_eval<S: Scalar, L: CloudLink<S>>(
    link: &mut L,
    edge_part: &EdgePart<S>,
    model: &ModelConfig,
    mut compute: EdgeCompute<S>,
    cfg: &WireConfig,
    samples: &[Sample],
    batch_size: usize,
) -> Result<EvalResult, RuntimeError> {
    if batch_size == 0 {
        return Err(RuntimeError::Config(String::from("batch_size must be > 0")));
    }
    let t = check_samples(samples, model.vocab, model.max_seq)?;
    let n_batches = samples.len() / batch_size;
    if n_batches == 0 {
        return Err(RuntimeError::Config(String::from(
            "dataset smaller than one batch",
        )));
    }
    link.handshake(&mut compute, cfg)?;
    let status = compute.status().to_vec();
    link.eval_status(&mut compute, &status)?;
    let mut nll_sum = 0.0f64;
    let mut correct = 0u64;
    let mut total = 0u64;
    for i in 0..n_batches {
        let batch = &samples[i * batch_size..(i + 1) * batch_size];
        let (h0, scored) = compute.embed_batch(edge_part, batch, t)?;
        let logits = link.forward(&mut compute, h0, batch.len(), t)?;
        let (loss, _) = compute.scored_loss(&logits, &scored)?;
        nll_sum += loss * scored.rows.len() as f64;
        let (c, n) = compute.scored_accuracy(&logits, &scored);
        correct += c;
        total += n;
    }
    link.shutdown(&mut compute)?;
    Ok(EvalResult {
        mean_loss: nll_sum / total as f64,
        accuracy: correct as f64 / total as f64,
        scored_tokens: total,
        ledger: compute.ledger,
    })
}

// ---- public entry points ----

/// Runs both roles in one process. See [`Exchange`] for the two flavors.
pub fn finetune_local<S: Scalar, M: MetricsSink>(
    backbone: &Backbone<S>,
    spec: &TrainSpec,
    samples: &[Sample],
    exchange: Exchange,
    sink: &mut M,
) -> Result<(TrainResult<S>, CostLedger), RuntimeError> {
    let scheduler = match spec.mode {
        TuneMode::Ft => None,
        m => Some(Scheduler::new(m, spec.budget, backbone.config.n_layers)?),
    };
    let initial = spec
        .initial_status
        .clone()
        .unwrap_or_else(|| vec![ModuleStatus::Active; backbone.config.n_layers]);
    let mut link = LocalLink::new(
        &backbone.cloud,
        backbone.config,
        spec.peft.kind,
        spec.policy,
        exchange,
        scheduler,
        initial,
    );
    let result = drive_training(
        &mut link,
        &backbone.edge,
        &backbone.config,
        spec,
        samples,
        sink,
    )?;
    link.snapshot_if_pending();
    Ok((result, link.cloud_ledger))
}

/// Forward-only evaluation of trained modules, both roles in-process.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_local<S: Scalar>(
    backbone: &Backbone<S>,
    peft: PeftConfig,
    policy: FrozenPolicy,
    quant: QuantBits,
    modules: Vec<PeftModule<S>>,
    status: Vec<ModuleStatus>,
    samples: &[Sample],
    batch_size: usize,
    exchange: Exchange,
    model_seed: u64,
) -> Result<(EvalResult, CostLedger), RuntimeError> {
    let compute = EdgeCompute::for_eval(backbone.config, peft, policy, modules, status)?;
    let cfg = eval_wire_config(&backbone.config, &peft, policy, quant, model_seed, S::DTYPE);
    let mut link = LocalLink::new(
        &backbone.cloud,
        backbone.config,
        peft.kind,
        policy,
        exchange,
        None,
        compute.status().to_vec(),
    );
    let result = drive_eval(
        &mut link,
        &backbone.edge,
        &backbone.config,
        compute,
        &cfg,
        samples,
        batch_size,
    )?;
    Ok((result, link.cloud_ledger))
}

fn eval_wire_config(
    model: &ModelConfig,
    peft: &PeftConfig,
    policy: FrozenPolicy,
    quant: QuantBits,
    model_seed: u64,
    precision: crate::scalar::Dtype,
) -> WireConfig {
    WireConfig {
        vocab: model.vocab as u32,
        d_model: model.d_model as u32,
        n_heads: model.n_heads as u32,
        d_ff: model.d_ff as u32,
        n_layers: model.n_layers as u32,
        max_seq: model.max_seq as u32,
        precision,
        model_seed,
        peft_kind: peft.kind,
        rank: peft.rank as u32,
        adapter_dim: peft.adapter_dim as u32,
        alpha: peft.alpha,
        mode: SessionMode::Eval,
        budget: 0,
        quant,
        policy,
        warmup_steps: 0,
    }
}

/// The split edge role: training session over a transport.
pub fn edge_train_session<S: Scalar, T: FrameTransport, M: MetricsSink>(
    transport: &mut T,
    edge_part: &EdgePart<S>,
    model: &ModelConfig,
    spec: &TrainSpec,
    samples: &[Sample],
    sink: &mut M,
) -> Result<TrainResult<S>, RuntimeError> {
    let mut link = WireLink {
        transport,
        quant: spec.quant,
    };
    drive_training(&mut link, edge_part, model, spec, samples, sink)
}

/// The split edge role: evaluation session over a transport.
#[allow(clippy::too_many_arguments)]
pub fn edge_eval_session<S: Scalar, T: FrameTransport>(
    transport: &mut T,
    edge_part: &EdgePart<S>,
    model: &ModelConfig,
    peft: PeftConfig,
    policy: FrozenPolicy,
    quant: QuantBits,
    modules: Vec<PeftModule<S>>,
    status: Vec<ModuleStatus>,
    samples: &[Sample],
    batch_size: usize,
    model_seed: u64,
) -> Result<EvalResult, RuntimeError> {
    let compute = EdgeCompute::for_eval(*model, peft, policy, modules, status)?;
    let cfg = eval_wire_config(model, &peft, policy, quant, model_seed, S::DTYPE);
    let mut link = WireLink { transport, quant };
    drive_eval(
        &mut link, edge_part, model, compute, &cfg, samples, batch_size,
    )
}

// ---- the split cloud role ----

#[derive(Debug, Clone)]
pub struct CloudOutcome {
    pub ledger: CostLedger,
    pub final_status: Vec<ModuleStatus>,
    pub steps_served: u64,
}

struct WireHook<'a, S: Scalar, T: FrameTransport> {
    transport: &'a mut T,
    ledger: &'a mut CostLedger,
    status: &'a [ModuleStatus],
    kind: PeftKind,
    policy: FrozenPolicy,
    quant: QuantBits,
    backward: bool,
    b: usize,
    t: usize,
    error: Option<RuntimeError>,
    _marker: core::marker::PhantomData<S>,
}

impl<'a, S: Scalar, T: FrameTransport> WireHook<'a, S, T> {
    fn send(&mut self, msg: &WireMessage<S>) -> Result<(), RuntimeError> {
        let frame = encode_frame(msg, self.quant);
        self.ledger
            .record_sent_frame(Direction::ToEdge, frame.len());
        self.transport.send(&frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage<S>, RuntimeError> {
        let frame = self.transport.recv()?;
        self.ledger
            .record_received_frame(Direction::ToCloud, frame.len());
        Ok(decode_frame(&frame)?)
    }

    fn fwd_exchange(
        &mut self,
        layer: usize,
        site: Site,
        activation: &Tensor<S>,
        expect: usize,
    ) -> Result<Vec<Tensor<S>>, RuntimeError> {
        self.send(&WireMessage::FwdActivation {
            layer: layer as u32,
            site,
            tensor: reshape3(activation.clone(), self.b, self.t)?,
        })?;
        match self.recv()? {
            WireMessage::FwdDelta {
                layer: got_layer,
                tensors,
            } if got_layer as usize == layer && tensors.len() == expect => tensors
                .into_iter()
                .map(reshape2)
                .collect::<Result<_, _>>()
                .map_err(Into::into),
            WireMessage::FwdDelta { .. } => Err(RuntimeError::Desync(String::from(
                "delta reply does not match the requested site",
            ))),
            other => Err(RuntimeError::Unexpected {
                expected: "FwdDelta",
                got: other.msg_type(),
            }),
        }
    }

    fn bwd_exchange(
        &mut self,
        layer: usize,
        site: Site,
        grads: Vec<Tensor<S>>,
    ) -> Result<Tensor<S>, RuntimeError> {
        self.send(&WireMessage::BwdGrad {
            layer: layer as u32,
            site,
            tensors: grads
                .into_iter()
                .map(|g| reshape3(g, self.b, self.t))
                .collect::<Result<_, _>>()?,
        })?;
        match self.recv()? {
            WireMessage::BwdDeltaGrad {
                layer: got_layer,
                tensor,
            } if got_layer as usize == layer => Ok(reshape2(tensor)?),
            WireMessage::BwdDeltaGrad { .. } => Err(RuntimeError::Desync(String::from(
                "branch gradient reply does not match the requested layer",
            ))),
            other => Err(RuntimeError::Unexpected {
                expected: "BwdDeltaGrad",
                got: other.msg_type(),
            }),
        }
    }

    fn fail(&mut self, e: RuntimeError) -> TensorError {
        self.error = Some(e);
        TensorError::msg("boundary exchange failed")
    }
}

impl<'a, S: Scalar, T: FrameTransport> DeltaSource<S> for WireHook<'a, S, T> {
    fn qkv_delta(
        &mut self,
        layer: usize,
        attn_in: &Tensor<S>,
    ) -> Result<Option<[Tensor<S>; 3]>, TensorError> {
        if self.kind != PeftKind::Lora || !module_applies(self.status[layer], self.policy) {
            return Ok(None);
        }
        match self.fwd_exchange(layer, Site::QkvInput, attn_in, 3) {
            Ok(mut v) => {
                let dv = v.pop().unwrap();
                let dk = v.pop().unwrap();
                let dq = v.pop().unwrap();
                Ok(Some([dq, dk, dv]))
            }
            Err(e) => Err(self.fail(e)),
        }
    }

    fn mlp_delta(
        &mut self,
        layer: usize,
        mlp_core: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if self.kind != PeftKind::Adapter || !module_applies(self.status[layer], self.policy) {
            return Ok(None);
        }
        match self.fwd_exchange(layer, Site::MlpInput, mlp_core, 1) {
            Ok(mut v) => Ok(Some(v.pop().unwrap())),
            Err(e) => Err(self.fail(e)),
        }
    }
}

impl<'a, S: Scalar, T: FrameTransport> GradSink<S> for WireHook<'a, S, T> {
    fn qkv_grads(
        &mut self,
        layer: usize,
        dq: &Tensor<S>,
        dk: &Tensor<S>,
        dv: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if !self.backward
            || self.kind != PeftKind::Lora
            || self.status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        match self.bwd_exchange(
            layer,
            Site::QkvInput,
            vec![dq.clone(), dk.clone(), dv.clone()],
        ) {
            Ok(dh) => Ok(Some(dh)),
            Err(e) => Err(self.fail(e)),
        }
    }

    fn mlp_grad(
        &mut self,
        layer: usize,
        d_delta: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        if !self.backward
            || self.kind != PeftKind::Adapter
            || self.status[layer] != ModuleStatus::Active
        {
            return Ok(None);
        }
        match self.bwd_exchange(layer, Site::MlpInput, vec![d_delta.clone()]) {
            Ok(dh) => Ok(Some(dh)),
            Err(e) => Err(self.fail(e)),
        }
    }
}

/// Serves one edge session to completion: handshake, every batch, every
/// scheduler exchange, until `Shutdown`.
pub fn serve_cloud<S: Scalar, T: FrameTransport>(
    transport: &mut T,
    cloud: &CloudPart<S>,
    model: &ModelConfig,
) -> Result<CloudOutcome, RuntimeError> {
    let mut ledger = CostLedger::new();
    let first = {
        let frame = transport.recv()?;
        ledger.record_received_frame(Direction::ToCloud, frame.len());
        decode_frame::<S>(&frame)?
    };
    let WireMessage::Config(cfg) = first else {
        return Err(RuntimeError::Unexpected {
            expected: "Config",
            got: first.msg_type(),
        });
    };
    validate_config(&cfg, model, S::DTYPE.code())?;
    let kind = cfg.peft_kind;
    let policy = cfg.policy;
    let quant = cfg.quant;
    let eval_mode = cfg.mode == SessionMode::Eval;
    let mut scheduler = match cfg.mode {
        SessionMode::Train(TuneMode::Ft) | SessionMode::Eval => None,
        SessionMode::Train(m) => Some(Scheduler::new(m, cfg.budget as usize, model.n_layers)?),
    };
    let mut status = vec![ModuleStatus::Active; model.n_layers];
    let mut pending: Option<(ForwardCache<S>, usize, usize)> = None;
    let mut pending_epoch: Option<u32> = None;
    let mut steps_served = 0u64;

    loop {
        let frame = transport.recv()?;
        ledger.record_received_frame(Direction::ToCloud, frame.len());
        match decode_frame::<S>(&frame)? {
            WireMessage::FwdActivation {
                layer: 0,
                site: Site::QkvInput,
                tensor,
            } if pending.is_none() => {
                let dims = tensor.dims().to_vec();
                if dims.len() != 3 || dims[2] != model.d_model || dims[1] > model.max_seq {
                    return Err(RuntimeError::Desync(String::from(
                        "bad batch activation shape",
                    )));
                }
                let (b, t) = (dims[0], dims[1]);
                let h0 = reshape2(tensor)?;
                let mut hook = WireHook {
                    transport,
                    ledger: &mut ledger,
                    status: &status,
                    kind,
                    policy,
                    quant,
                    backward: false,
                    b,
                    t,
                    error: None,
                    _marker: core::marker::PhantomData,
                };
                let r = forward_backbone(cloud, model, h0, b, t, &mut hook);
                let mut stashed = hook.error.take();
                let (logits, cache) = hook_result(r, &mut stashed)?;
                let fwd_qkv = cache.blocks.iter().filter(|c| c.qkv_delta_applied).count();
                let fwd_mlp = cache.blocks.iter().filter(|c| c.mlp_delta_applied).count();
                ledger.add_cloud_flops(
                    cloud_forward_flops(model, b, t)
                        + delta_add_flops(model, b * t, fwd_qkv, fwd_mlp),
                );
                let reply = encode_frame(
                    &WireMessage::LogitsToEdge {
                        tensor: reshape3(logits, b, t)?,
                    },
                    quant,
                );
                ledger.record_sent_frame(Direction::ToEdge, reply.len());
                transport.send(&reply)?;
                if !eval_mode {
                    pending = Some((cache, b, t));
                }
            }
            WireMessage::LossGradToCloud { loss: _, tensor } => {
                let (cache, b, t) = pending.take().ok_or(RuntimeError::Unexpected {
                    expected: "FwdActivation",
                    got: 4,
                })?;
                let dlogits = reshape2(tensor)?;
                if dlogits.rows() != b * t || dlogits.cols() != model.vocab {
                    return Err(RuntimeError::Desync(String::from(
                        "loss gradient shape does not match the pending batch",
                    )));
                }
                let mut hook = WireHook {
                    transport,
                    ledger: &mut ledger,
                    status: &status,
                    kind,
                    policy,
                    quant,
                    backward: true,
                    b,
                    t,
                    error: None,
                    _marker: core::marker::PhantomData,
                };
                let r = backward_backbone(cloud, model, &cache, &dlogits, b, t, &mut hook, None);
                let mut stashed = hook.error.take();
                let (_dh0, branch) = hook_result(r, &mut stashed)?;
                ledger.add_cloud_flops(
                    cloud_backward_flops(model, b, t) + branch_add_flops(model, b * t, branch),
                );
                steps_served += 1;
            }
            WireMessage::NormReport { norms } => {
                let sch = scheduler.as_mut().ok_or(RuntimeError::Unexpected {
                    expected: "a scheduler-mode session",
                    got: 7,
                })?;
                if let Some(new_status) = sch.on_norm_report(&norms)? {
                    status = new_status.clone();
                    let reply =
                        encode_frame(&WireMessage::<S>::Command { status: new_status }, quant);
                    ledger.record_sent_frame(Direction::ToEdge, reply.len());
                    transport.send(&reply)?;
                    if let Some(e) = pending_epoch.take() {
                        ledger.snapshot_epoch(e);
                    }
                }
            }
            WireMessage::Command { status: commanded } if eval_mode => {
                if commanded.len() != model.n_layers {
                    return Err(RuntimeError::Desync(String::from(
                        "status length does not match layer count",
                    )));
                }
                status = commanded;
            }
            WireMessage::EpochEnd { epoch } => {
                if scheduler.is_some() {
                    pending_epoch = Some(epoch);
                } else {
                    ledger.snapshot_epoch(epoch);
                }
            }
            WireMessage::Shutdown => break,
            other => {
                return Err(RuntimeError::Unexpected {
                    expected: "a session frame",
                    got: other.msg_type(),
                })
            }
        }
    }
    Ok(CloudOutcome {
        ledger,
        final_status: status,
        steps_served,
    })
}

// ---- backbone pretraining (single process, full model) ----

#[derive(Debug, Clone, Copy)]
pub struct PretrainSpec {
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
}

/// Trains every backbone weight (blocks, head, embedding) with AdamW and a
/// cosine schedule. Runs in one process; the split never trains the
/// backbone.
pub fn pretrain_backbone<S: Scalar, M: MetricsSink>(
    backbone: &mut Backbone<S>,
    spec: &PretrainSpec,
    samples: &[Sample],
    sink: &mut M,
) -> Result<Option<f64>, RuntimeError> {
    if spec.batch_size == 0 {
        return Err(RuntimeError::Config(String::from("batch_size must be > 0")));
    }
    let model = backbone.config;
    let t = check_samples(samples, model.vocab, model.max_seq)?;
    let n_batches = samples.len() / spec.batch_size;
    if n_batches == 0 {
        return Err(RuntimeError::Config(String::from(
            "dataset smaller than one batch",
        )));
    }
    let total_steps = spec.epochs as u64 * n_batches as u64;
    let mut shapes: Vec<Vec<usize>> = backbone.cloud.param_shapes();
    shapes.push(backbone.edge.embedding.dims().to_vec());
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|d| d.as_slice()).collect();
    let mut optim: OptimState<S> = OptimState::new(&shape_refs, spec.lr, total_steps);

    let mut step = 0u64;
    let mut last_mean = None;
    for epoch in 0..spec.epochs {
        let mut loss_sum = 0.0f64;
        for i in 0..n_batches {
            let batch = &samples[i * spec.batch_size..(i + 1) * spec.batch_size];
            let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
            let h0 = backbone
                .edge
                .embed(&seqs)?
                .reshaped(vec![batch.len() * t, model.d_model])?;
            let scored = scored_rows(batch, t);
            let (logits, cache) =
                forward_backbone(&backbone.cloud, &model, h0, batch.len(), t, &mut NoHooks)?;
            let v = model.vocab;
            let mut picked = Vec::with_capacity(scored.rows.len() * v);
            for &r in &scored.rows {
                picked.extend_from_slice(logits.row(r));
            }
            let picked = Tensor::from_vec(vec![scored.rows.len(), v], picked);
            let (loss, dpicked) = cross_entropy(&picked, &scored.targets)?;
            let mut dlogits = Tensor::zeros(&[logits.rows(), v]);
            for (i, &r) in scored.rows.iter().enumerate() {
                dlogits.row_mut(r).copy_from_slice(dpicked.row(i));
            }
            let mut grads = crate::model::CloudGrads::zeros(&model);
            let (dh0, _) = backward_backbone(
                &backbone.cloud,
                &model,
                &cache,
                &dlogits,
                batch.len(),
                t,
                &mut NoHooks,
                Some(&mut grads),
            )?;
            let emb_grad = backbone.edge.embedding_grad(&seqs, &dh0)?;
            let mut params = backbone.cloud.params_mut();
            params.push(&mut backbone.edge.embedding);
            let mut grad_refs: Vec<&Tensor<S>> = grads.flat();
            grad_refs.push(&emb_grad);
            adamw_step(&mut params, &grad_refs, &mut optim)?;

            let loss = loss.to_f64();
            loss_sum += loss;
            let lr = cosine_lr(spec.lr, step, total_steps);
            step += 1;
            sink.on_step(&StepRecord {
                step,
                epoch,
                loss,
                lr,
                active: 0,
            });
        }
        let mean = loss_sum / n_batches as f64;
        last_mean = Some(mean);
        sink.on_epoch(&EpochRecord {
            epoch,
            steps: n_batches as u64,
            mean_loss: Some(mean),
            status: &[],
            scores: None,
            norms: &[],
            costs: EpochCosts::default(),
        });
    }
    Ok(last_mean)
}

/// `NoModules` twin that satisfies both hook traits (pretraining runs the
/// bare backbone).
struct NoHooks;

impl<S: Scalar> DeltaSource<S> for NoHooks {
    fn qkv_delta(
        &mut self,
        _layer: usize,
        _attn_in: &Tensor<S>,
    ) -> Result<Option<[Tensor<S>; 3]>, TensorError> {
        Ok(None)
    }
    fn mlp_delta(
        &mut self,
        _layer: usize,
        _mlp_core: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        Ok(None)
    }
}

impl<S: Scalar> GradSink<S> for NoHooks {
    fn qkv_grads(
        &mut self,
        _layer: usize,
        _dq: &Tensor<S>,
        _dk: &Tensor<S>,
        _dv: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        Ok(None)
    }
    fn mlp_grad(
        &mut self,
        _layer: usize,
        _d_delta: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError> {
        Ok(None)
    }
}

/// Greedy autoregressive continuation of `prompt` by `n_new` tokens (ties to
/// the lowest id), using whatever modules/status the compute carries.
pub fn greedy_generate<S: Scalar>(
    backbone: &Backbone<S>,
    compute: &mut EdgeCompute<S>,
    prompt: &[u32],
    n_new: usize,
) -> Result<Vec<u32>, RuntimeError> {
    let mut tokens = prompt.to_vec();
    for _ in 0..n_new {
        if tokens.len() > backbone.config.max_seq {
            return Err(RuntimeError::Config(String::from(
                "generation exceeded the maximum sequence length",
            )));
        }
        compute.clear_step_caches();
        let t = tokens.len();
        let h0 = backbone
            .edge
            .embed(&[tokens.as_slice()])?
            .reshaped(vec![t, backbone.config.d_model])?;
        let (logits, _) = forward_backbone(&backbone.cloud, &backbone.config, h0, 1, t, compute)?;
        tokens.push(argmax_lowest(logits.row(t - 1)) as u32);
    }
    Ok(tokens)
}
