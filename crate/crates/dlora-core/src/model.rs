//! The frozen decoder-only backbone and its split into an edge part
//! (embedding + positions) and a cloud part (blocks + head).
//!
//! Block layout (pre-norm):
//!
//! ```text
//! attn_in = rmsnorm(h, gain1)
//! q,k,v   = attn_in·W_q + Δq, ...           (Δ from the attention-site module)
//! h2      = h + causal_mha(q, k, v)·W_o
//! mlp_in  = rmsnorm(h2, gain2)
//! core    = silu(mlp_in·W1)·W2
//! out     = h2 + core + Δmlp                (Δ from the MLP-site module)
//! ```
//!
//! followed by a final rmsnorm and the vocabulary head.
//!
//! The trainable modules never live here. Forward and backward take hook
//! traits (`DeltaSource`, `GradSink`) through which per-site tensors are
//! exchanged; a monolithic run wires the hooks straight to module math while
//! a split run sends them over the wire. Because both paths execute this
//! exact code with the exact same operand order, their arithmetic is
//! bit-identical whenever the hook tensors are.
//!
//! All activations inside this module are 2-D `[b·T × features]`; callers
//! reshape to `[b, T, features]` only at wire boundaries, which changes
//! metadata and never bytes.

use crate::rng::{normal_tensor, Rng};
use crate::scalar::{silu, silu_grad, Scalar};
use crate::tensor::{
    matmul, matmul_nt, matmul_tn, rmsnorm_rows, rmsnorm_rows_backward, softmax_rows_backward,
    Tensor, TensorError,
};
use alloc::vec;
use alloc::vec::Vec;

/// Epsilon inside every rmsnorm denominator.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// The desk-scale configuration used throughout.
    pub fn desk() -> Self {
        ModelConfig {
            vocab: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_layers: 8,
            max_seq: 32,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.vocab == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.n_layers == 0
            || self.max_seq == 0
        {
            return Err(TensorError::msg("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TensorError::msg("d_model must divide evenly into heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One decoder block's frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<S: Scalar> {
    pub gain1: Tensor<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub gain2: Tensor<S>,
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

/// What stays on the edge device: the token embedding and the (fixed)
/// sinusoidal position table. Raw tokens never leave this side.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePart<S: Scalar> {
    pub embedding: Tensor<S>,
    pub pos: Tensor<S>,
}

/// What the cloud serves: every block plus the final norm and vocab head.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudPart<S: Scalar> {
    pub blocks: Vec<DecoderBlock<S>>,
    pub final_gain: Tensor<S>,
    pub w_lm: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S: Scalar> {
    pub config: ModelConfig,
    pub edge: EdgePart<S>,
    pub cloud: CloudPart<S>,
}

impl<S: Scalar> Backbone<S> {
    /// Seeded init. Draw order is part of the format: embedding first, then
    /// per block w_q, w_k, w_v, w_o, w1, w2 (gains start at one and consume
    /// no draws), then the head. The position table is computed, not drawn.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = Rng::new(seed);
        let embedding = normal_tensor(&mut rng, &[config.vocab, d], 0.02);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(DecoderBlock {
                gain1: ones(d),
                w_q: normal_tensor(&mut rng, &[d, d], 0.02),
                w_k: normal_tensor(&mut rng, &[d, d], 0.02),
                w_v: normal_tensor(&mut rng, &[d, d], 0.02),
                w_o: normal_tensor(&mut rng, &[d, d], 0.02),
                gain2: ones(d),
                w1: normal_tensor(&mut rng, &[d, config.d_ff], 0.02),
                w2: normal_tensor(&mut rng, &[config.d_ff, d], 0.02),
            });
        }
        let w_lm = normal_tensor(&mut rng, &[d, config.vocab], 0.02);
        Ok(Backbone {
            config,
            edge: EdgePart {
                embedding,
                pos: sinusoidal_table(config.max_seq, d),
            },
            cloud: CloudPart {
                blocks,
                final_gain: ones(d),
                w_lm,
            },
        })
    }
}

fn ones<S: Scalar>(d: usize) -> Tensor<S> {
    Tensor::from_vec(vec![d], vec![S::ONE; d])
}

/// pos[t, 2i] = sin(t·ω_i), pos[t, 2i+1] = cos(t·ω_i), ω_i = 10000^(-2i/d).
/// Computed in f64 and cast once, so every precision sees the same table.
pub fn sinusoidal_table<S: Scalar>(max_seq: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(max_seq * d);
    for t in 0..max_seq {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let omega = libm::pow(10000.0, -2.0 * pair / d as f64);
            let angle = t as f64 * omega;
            let v = if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
            data.push(S::from_f64(v));
        }
    }
    Tensor::from_vec(vec![max_seq, d], data)
}

impl<S: Scalar> EdgePart<S> {
    /// Embeds a batch of equal-length sequences into `[b, T, d]`:
    /// embedding row plus position row.
    pub fn embed(&self, sequences: &[&[u32]]) -> Result<Tensor<S>, TensorError> {
        let b = sequences.len();
        if b == 0 {
            return Err(TensorError::msg("empty batch"));
        }
        let t = sequences[0].len();
        if t == 0 || t > self.pos.rows() {
            return Err(TensorError::msg("sequence length out of range"));
        }
        let d = self.embedding.cols();
        let vocab = self.embedding.rows();
        let mut data = Vec::with_capacity(b * t * d);
        for seq in sequences {
            if seq.len() != t {
                return Err(TensorError::msg("ragged batch"));
            }
            for (pos_idx, &tok) in seq.iter().enumerate() {
                if tok as usize >= vocab {
                    return Err(TensorError::msg("token id out of vocabulary"));
                }
                let e = self.embedding.row(tok as usize);
                let p = self.pos.row(pos_idx);
                for (ev, pv) in e.iter().zip(p) {
                    data.push(*ev + *pv);
                }
            }
        }
        Tensor::new(vec![b, t, d], data)
    }

    /// Scatter-adds `dh0` rows into an embedding-shaped gradient (positions
    /// are fixed and receive none).
    pub fn embedding_grad(
        &self,
        sequences: &[&[u32]],
        dh0: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let d = self.embedding.cols();
        let total: usize = sequences.iter().map(|s| s.len()).sum();
        if dh0.rows() != total || dh0.cols() != d {
            return Err(TensorError::msg("gradient shape does not match batch"));
        }
        let mut g = Tensor::zeros(&[self.embedding.rows(), d]);
        let mut row = 0usize;
        for seq in sequences {
            for &tok in *seq {
                let src = dh0.row(row);
                let dst = g.row_mut(tok as usize);
                for (gv, sv) in dst.iter_mut().zip(src) {
                    *gv += *sv;
                }
                row += 1;
            }
        }
        Ok(g)
    }
}

// ---- trainable-module hooks ----

/// Supplies per-site deltas during the forward pass. Returning `None` means
/// no module applies at that site (killed under the skip policy, or no
/// module configured there).
pub trait DeltaSource<S: Scalar> {
    /// Deltas added to q, k, v. `attn_in` is the site activation.
    fn qkv_delta(
        &mut self,
        layer: usize,
        attn_in: &Tensor<S>,
    ) -> Result<Option<[Tensor<S>; 3]>, TensorError>;
    /// Delta added to the MLP branch output. `mlp_core` is the site
    /// activation.
    fn mlp_delta(
        &mut self,
        layer: usize,
        mlp_core: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError>;
}

/// Receives per-site upstream gradients during the backward pass and returns
/// the gradient each module's branch sends back into its input activation
/// (`None` when the site's module takes no step and contributes no branch
/// gradient).
pub trait GradSink<S: Scalar> {
    fn qkv_grads(
        &mut self,
        layer: usize,
        dq: &Tensor<S>,
        dk: &Tensor<S>,
        dv: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError>;
    fn mlp_grad(
        &mut self,
        layer: usize,
        d_delta: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>, TensorError>;
}

/// A backbone with no modules anywhere (plain frozen forward).
pub struct NoModules;

impl<S: Scalar> DeltaSource<S> for NoModules {
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

impl<S: Scalar> GradSink<S> for NoModules {
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

// ---- forward ----

/// Everything the backward pass needs from one block's forward.
#[derive(Debug, Clone)]
pub struct BlockCache<S: Scalar> {
    pub input: Tensor<S>,
    pub attn_in: Tensor<S>,
    pub inv_rms1: Vec<S>,
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// Post-softmax attention weights, `[b, H, T, T]`, zero above the
    /// diagonal.
    pub probs: Tensor<S>,
    /// Heads re-concatenated, before the output projection.
    pub ctx: Tensor<S>,
    pub h2: Tensor<S>,
    pub mlp_in: Tensor<S>,
    pub inv_rms2: Vec<S>,
    pub z1: Tensor<S>,
    pub act1: Tensor<S>,
    pub mlp_core: Tensor<S>,
    pub qkv_delta_applied: bool,
    pub mlp_delta_applied: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S: Scalar> {
    pub blocks: Vec<BlockCache<S>>,
    /// Input to the final rmsnorm.
    pub final_in: Tensor<S>,
    pub inv_rms_f: Vec<S>,
    /// Final rmsnorm output (head input).
    pub normed: Tensor<S>,
}

fn head_slice<S: Scalar>(x: &Tensor<S>, seq: usize, t: usize, head: usize, dh: usize) -> Tensor<S> {
    let mut out = vec![S::ZERO; t * dh];
    for i in 0..t {
        let r = x.row(seq * t + i);
        out[i * dh..(i + 1) * dh].copy_from_slice(&r[head * dh..(head + 1) * dh]);
    }
    Tensor::from_vec(vec![t, dh], out)
}

fn head_scatter<S: Scalar>(
    dst: &mut Tensor<S>,
    src: &Tensor<S>,
    seq: usize,
    t: usize,
    head: usize,
    dh: usize,
) {
    for i in 0..t {
        let s = src.row(i);
        let d = dst.row_mut(seq * t + i);
        for (dv, sv) in d[head * dh..(head + 1) * dh].iter_mut().zip(s) {
            *dv += *sv;
        }
    }
}

/// Row i is softmaxed over columns 0..=i; the rest stay exactly zero.
fn causal_softmax_in_place<S: Scalar>(scores: &mut Tensor<S>) {
    let t = scores.cols();
    for i in 0..t {
        let row = scores.row_mut(i);
        let (live, dead) = row.split_at_mut(i + 1);
        for v in dead.iter_mut() {
            *v = S::ZERO;
        }
        let mut max = live[0];
        for &v in &live[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::ZERO;
        for v in live.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in live.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head causal attention over `[b·T × d]` projections. Returns the
/// concatenated context and the attention weights.
fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    b: usize,
    t: usize,
    n_heads: usize,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let d = q.cols();
    let dh = d / n_heads;
    let inv_sqrt = S::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut ctx = Tensor::zeros(&[b * t, d]);
    let mut probs = Tensor::zeros(&[b, n_heads, t, t]);
    for s in 0..b {
        for h in 0..n_heads {
            let qh = head_slice(q, s, t, h, dh);
            let kh = head_slice(k, s, t, h, dh);
            let vh = head_slice(v, s, t, h, dh);
            let mut scores = matmul_nt(&qh, &kh)?.scale(inv_sqrt);
            causal_softmax_in_place(&mut scores);
            let ctx_h = matmul(&scores, &vh)?;
            head_scatter(&mut ctx, &ctx_h, s, t, h, dh);
            let base = ((s * n_heads + h) * t) * t;
            probs.data_mut()[base..base + t * t].copy_from_slice(scores.data());
        }
    }
    Ok((ctx, probs))
}

pub fn forward_block<S: Scalar, D: DeltaSource<S>>(
    block: &DecoderBlock<S>,
    h: Tensor<S>,
    b: usize,
    t: usize,
    n_heads: usize,
    layer: usize,
    hook: &mut D,
) -> Result<(Tensor<S>, BlockCache<S>), TensorError> {
    let eps = S::from_f64(RMS_EPS);
    let (attn_in, inv_rms1) = rmsnorm_rows(&h, &block.gain1, eps)?;
    let mut q = matmul(&attn_in, &block.w_q)?;
    let mut k = matmul(&attn_in, &block.w_k)?;
    let mut v = matmul(&attn_in, &block.w_v)?;
    let mut qkv_delta_applied = false;
    if let Some([dq, dk, dv]) = hook.qkv_delta(layer, &attn_in)? {
        q.add_assign(&dq)?;
        k.add_assign(&dk)?;
        v.add_assign(&dv)?;
        qkv_delta_applied = true;
    }
    let (ctx, probs) = attention(&q, &k, &v, b, t, n_heads)?;
    let proj = matmul(&ctx, &block.w_o)?;
    let h2 = h.add(&proj)?;
    let (mlp_in, inv_rms2) = rmsnorm_rows(&h2, &block.gain2, eps)?;
    let z1 = matmul(&mlp_in, &block.w1)?;
    let act1 = z1.map(silu);
    let mlp_core = matmul(&act1, &block.w2)?;
    let mut out = h2.add(&mlp_core)?;
    let mut mlp_delta_applied = false;
    if let Some(delta) = hook.mlp_delta(layer, &mlp_core)? {
        out.add_assign(&delta)?;
        mlp_delta_applied = true;
    }
    Ok((
        out,
        BlockCache {
            input: h,
            attn_in,
            inv_rms1,
            q,
            k,
            v,
            probs,
            ctx,
            h2,
            mlp_in,
            inv_rms2,
            z1,
            act1,
            mlp_core,
            qkv_delta_applied,
            mlp_delta_applied,
        },
    ))
}

/// Runs every block plus the head. `h0` is the `[b·T × d]` embedding matrix.
pub fn forward_backbone<S: Scalar, D: DeltaSource<S>>(
    cloud: &CloudPart<S>,
    config: &ModelConfig,
    h0: Tensor<S>,
    b: usize,
    t: usize,
    hook: &mut D,
) -> Result<(Tensor<S>, ForwardCache<S>), TensorError> {
    if h0.rows() != b * t || h0.cols() != config.d_model {
        return Err(TensorError::msg("activation shape does not match batch"));
    }
    let mut h = h0;
    let mut blocks = Vec::with_capacity(cloud.blocks.len());
    for (layer, block) in cloud.blocks.iter().enumerate() {
        let (out, cache) = forward_block(block, h, b, t, config.n_heads, layer, hook)?;
        blocks.push(cache);
        h = out;
    }
    let eps = S::from_f64(RMS_EPS);
    let (normed, inv_rms_f) = rmsnorm_rows(&h, &cloud.final_gain, eps)?;
    let logits = matmul(&normed, &cloud.w_lm)?;
    Ok((
        logits,
        ForwardCache {
            blocks,
            final_in: h,
            inv_rms_f,
            normed,
        },
    ))
}

// ---- backward ----

/// Per-block parameter gradients (pretraining only).
#[derive(Debug, Clone)]
pub struct BlockGrads<S: Scalar> {
    pub gain1: Tensor<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub gain2: Tensor<S>,
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct CloudGrads<S: Scalar> {
    pub blocks: Vec<BlockGrads<S>>,
    pub final_gain: Tensor<S>,
    pub w_lm: Tensor<S>,
}

impl<S: Scalar> CloudGrads<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockGrads {
                gain1: Tensor::zeros(&[d]),
                w_q: Tensor::zeros(&[d, d]),
                w_k: Tensor::zeros(&[d, d]),
                w_v: Tensor::zeros(&[d, d]),
                w_o: Tensor::zeros(&[d, d]),
                gain2: Tensor::zeros(&[d]),
                w1: Tensor::zeros(&[d, config.d_ff]),
                w2: Tensor::zeros(&[config.d_ff, d]),
            })
            .collect();
        CloudGrads {
            blocks,
            final_gain: Tensor::zeros(&[d]),
            w_lm: Tensor::zeros(&[d, config.vocab]),
        }
    }

    /// Same pinned order as `CloudPart::params_mut`.
    pub fn flat(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.gain1, &b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.gain2, &b.w1, &b.w2,
            ]);
        }
        out.push(&self.final_gain);
        out.push(&self.w_lm);
        out
    }
}

impl<S: Scalar> CloudPart<S> {
    /// Pinned parameter order: per block gain1, w_q, w_k, w_v, w_o, gain2,
    /// w1, w2; then final_gain, w_lm.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.gain1);
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_o);
            out.push(&mut b.gain2);
            out.push(&mut b.w1);
            out.push(&mut b.w2);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.w_lm);
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for t in [
                &b.gain1, &b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.gain2, &b.w1, &b.w2,
            ] {
                out.push(t.dims().to_vec());
            }
        }
        out.push(self.final_gain.dims().to_vec());
        out.push(self.w_lm.dims().to_vec());
        out
    }
}

/// How many per-site branch gradients the sink actually returned; the engine
/// charges the corresponding residual adds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchCounts {
    pub qkv: usize,
    pub mlp: usize,
}

#[allow(clippy::type_complexity)]
fn attention_backward<S: Scalar>(
    cache: &BlockCache<S>,
    d_ctx: &Tensor<S>,
    b: usize,
    t: usize,
    n_heads: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), TensorError> {
    let d = cache.q.cols();
    let dh = d / n_heads;
    let inv_sqrt = S::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut dq = Tensor::zeros(&[b * t, d]);
    let mut dk = Tensor::zeros(&[b * t, d]);
    let mut dv = Tensor::zeros(&[b * t, d]);
    for s in 0..b {
        for h in 0..n_heads {
            let qh = head_slice(&cache.q, s, t, h, dh);
            let kh = head_slice(&cache.k, s, t, h, dh);
            let vh = head_slice(&cache.v, s, t, h, dh);
            let dctx_h = head_slice(d_ctx, s, t, h, dh);
            let base = ((s * n_heads + h) * t) * t;
            let probs_h =
                Tensor::from_vec(vec![t, t], cache.probs.data()[base..base + t * t].to_vec());
            let d_probs = matmul_nt(&dctx_h, &vh)?;
            let dv_h = matmul_tn(&probs_h, &dctx_h)?;
            // Masked positions have probability exactly zero, so the softmax
            // backward leaves their score gradients at zero too.
            let d_scores = softmax_rows_backward(&probs_h, &d_probs)?;
            let dq_h = matmul(&d_scores, &kh)?.scale(inv_sqrt);
            let dk_h = matmul_tn(&d_scores, &qh)?.scale(inv_sqrt);
            head_scatter(&mut dq, &dq_h, s, t, h, dh);
            head_scatter(&mut dk, &dk_h, s, t, h, dh);
            head_scatter(&mut dv, &dv_h, s, t, h, dh);
        }
    }
    Ok((dq, dk, dv))
}

/// Backward through one block. `grads`, when given, accumulates the frozen
/// weights' own gradients (pretraining); fine-tuning passes `None` and only
/// the hook modules learn.
#[allow(clippy::too_many_arguments)]
pub fn backward_block<S: Scalar, G: GradSink<S>>(
    block: &DecoderBlock<S>,
    cache: &BlockCache<S>,
    d_out: &Tensor<S>,
    b: usize,
    t: usize,
    n_heads: usize,
    layer: usize,
    sink: &mut G,
    mut grads: Option<&mut BlockGrads<S>>,
    branch: &mut BranchCounts,
) -> Result<Tensor<S>, TensorError> {
    // out = h2 + mlp_core + Δmlp(mlp_core)
    let mut d_mlp_core = d_out.clone();
    if let Some(dbranch) = sink.mlp_grad(layer, d_out)? {
        d_mlp_core.add_assign(&dbranch)?;
        branch.mlp += 1;
    }
    let d_act1 = matmul_nt(&d_mlp_core, &block.w2)?;
    let mut d_z1 = d_act1;
    for (g, &z) in d_z1.data_mut().iter_mut().zip(cache.z1.data()) {
        *g *= silu_grad(z);
    }
    let d_mlp_in = matmul_nt(&d_z1, &block.w1)?;
    if let Some(g) = grads.as_deref_mut() {
        g.w2.add_assign(&matmul_tn(&cache.act1, &d_mlp_core)?)?;
        g.w1.add_assign(&matmul_tn(&cache.mlp_in, &d_z1)?)?;
    }
    let mut d_h2 = d_out.clone();
    d_h2.add_assign(&rmsnorm_rows_backward(
        &cache.h2,
        &block.gain2,
        &cache.inv_rms2,
        &d_mlp_in,
        grads.as_deref_mut().map(|g| &mut g.gain2),
    )?)?;

    // h2 = h + ctx·w_o
    let d_ctx = matmul_nt(&d_h2, &block.w_o)?;
    if let Some(g) = grads.as_deref_mut() {
        g.w_o.add_assign(&matmul_tn(&cache.ctx, &d_h2)?)?;
    }
    let (dq, dk, dv) = attention_backward(cache, &d_ctx, b, t, n_heads)?;
    let mut d_attn_in = matmul_nt(&dq, &block.w_q)?;
    d_attn_in.add_assign(&matmul_nt(&dk, &block.w_k)?)?;
    d_attn_in.add_assign(&matmul_nt(&dv, &block.w_v)?)?;
    if let Some(dbranch) = sink.qkv_grads(layer, &dq, &dk, &dv)? {
        d_attn_in.add_assign(&dbranch)?;
        branch.qkv += 1;
    }
    if let Some(g) = grads.as_deref_mut() {
        g.w_q.add_assign(&matmul_tn(&cache.attn_in, &dq)?)?;
        g.w_k.add_assign(&matmul_tn(&cache.attn_in, &dk)?)?;
        g.w_v.add_assign(&matmul_tn(&cache.attn_in, &dv)?)?;
    }
    let mut dh = d_h2;
    dh.add_assign(&rmsnorm_rows_backward(
        &cache.input,
        &block.gain1,
        &cache.inv_rms1,
        &d_attn_in,
        grads.map(|g| &mut g.gain1),
    )?)?;
    Ok(dh)
}

/// Backward through the whole stack. Blocks run in descending order, and
/// within a block the MLP site precedes the attention site, so the wire
/// exchange order is deterministic. Returns the gradient at `h0` plus the
/// branch-add counts for cost accounting.
#[allow(clippy::too_many_arguments)]
pub fn backward_backbone<S: Scalar, G: GradSink<S>>(
    cloud: &CloudPart<S>,
    config: &ModelConfig,
    cache: &ForwardCache<S>,
    dlogits: &Tensor<S>,
    b: usize,
    t: usize,
    sink: &mut G,
    mut grads: Option<&mut CloudGrads<S>>,
) -> Result<(Tensor<S>, BranchCounts), TensorError> {
    let d_normed = matmul_nt(dlogits, &cloud.w_lm)?;
    if let Some(g) = grads.as_deref_mut() {
        g.w_lm.add_assign(&matmul_tn(&cache.normed, dlogits)?)?;
    }
    let mut dh = rmsnorm_rows_backward(
        &cache.final_in,
        &cloud.final_gain,
        &cache.inv_rms_f,
        &d_normed,
        grads.as_deref_mut().map(|g| &mut g.final_gain),
    )?;
    let mut branch = BranchCounts::default();
    for layer in (0..cloud.blocks.len()).rev() {
        dh = backward_block(
            &cloud.blocks[layer],
            &cache.blocks[layer],
            &dh,
            b,
            t,
            config.n_heads,
            layer,
            sink,
            grads.as_deref_mut().map(|g| &mut g.blocks[layer]),
            &mut branch,
        )?;
    }
    Ok((dh, branch))
}

/// Greedy pick over one logits row; ties go to the lowest token id.
pub fn argmax_lowest<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---- cost closed forms ----
//
// Conventions: matmuls count 2mkn even where the causal mask makes half the
// score matrix dead (the code computes the full product); softmax and
// rmsnorm count 4 ops per element, their backwards 8; silu counts 5 and its
// backward 6 (silu_grad 5 + the gating multiply); residual adds count 1 per
// element. These run per step on whichever node does the work.

/// Frozen-path forward FLOPs for one `[b × T]` batch (deltas excluded; the
/// engine charges each applied delta's `b·T·d` residual add separately).
pub fn cloud_forward_flops(cfg: &ModelConfig, b: usize, t: usize) -> u64 {
    let n = (b * t) as u64;
    let d = cfg.d_model as u64;
    let dff = cfg.d_ff as u64;
    let dh = cfg.head_dim() as u64;
    let heads = cfg.n_heads as u64;
    let tt = (t * t) as u64;
    let per_seq_head = 2 * tt * dh + tt + 4 * tt + 2 * tt * dh;
    let attn = (b as u64) * heads * per_seq_head;
    let per_block = 4 * n * d          // rmsnorm 1
        + 3 * 2 * n * d * d            // q, k, v projections
        + attn
        + 2 * n * d * d                // output projection
        + n * d                        // residual add
        + 4 * n * d                    // rmsnorm 2
        + 2 * n * d * dff + 5 * n * dff + 2 * n * dff * d
        + n * d; // residual add
    (cfg.n_layers as u64) * per_block + 4 * n * d + 2 * n * d * (cfg.vocab as u64)
}

/// Frozen-path backward FLOPs (no frozen-weight gradients, the fine-tuning
/// case). Branch adds are again charged separately by the engine.
pub fn cloud_backward_flops(cfg: &ModelConfig, b: usize, t: usize) -> u64 {
    let n = (b * t) as u64;
    let d = cfg.d_model as u64;
    let dff = cfg.d_ff as u64;
    let dh = cfg.head_dim() as u64;
    let heads = cfg.n_heads as u64;
    let tt = (t * t) as u64;
    // d_probs, softmax backward, dq (+scale), dk (+scale), dv
    let per_seq_head = 2 * tt * dh + 8 * tt + 2 * tt * dh + tt + 2 * tt * dh + tt + 2 * tt * dh;
    let attn = (b as u64) * heads * per_seq_head;
    let per_block = 2 * n * d * dff    // d_act1
        + 6 * n * dff                  // silu backward
        + 2 * n * d * dff              // d_mlp_in
        + 8 * n * d + n * d            // rmsnorm2 backward + residual accumulate
        + 2 * n * d * d                // d_ctx
        + attn
        + 3 * 2 * n * d * d            // back through q, k, v projections
        + 2 * n * d                    // two branch accumulates into d_attn_in
        + 8 * n * d + n * d; // rmsnorm1 backward + residual accumulate
    (cfg.n_layers as u64) * per_block
        + 2 * n * d * (cfg.vocab as u64) // d_normed
        + 8 * n * d // final rmsnorm backward
}
