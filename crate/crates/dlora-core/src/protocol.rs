//! Binary wire protocol between the edge and cloud nodes.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! magic "DLOR" (4) | version (1) | msg_type (1) | payload_len u32 (4) | payload
//! ```
//!
//! Tensor payload encoding:
//!
//! ```text
//! dtype (1): 0 = f32, 1 = f64, 2 = int8-quantized
//! ndim  (1)
//! dims  (4·ndim, u32 each)
//! scale (4, f32, dtype 2 only)
//! data  (numel · elem_size; int8 codes for dtype 2)
//! ```
//!
//! Activation/gradient messages (`FwdActivation`, `FwdDelta`, `LogitsToEdge`,
//! `LossGradToCloud`, `BwdGrad`, `BwdDeltaGrad`) carry tensors and are the
//! only ones the 8-bit mode quantizes. Norm reports always travel as exact
//! 64-bit values and control frames are never quantized, so scheduler
//! decisions are identical under every quantization setting.
//!
//! Decoding never panics: every length and value is validated, so corrupted
//! or truncated frames surface as `ProtocolError`s for the session to abort
//! on.

use crate::peft::PeftKind;
use crate::scalar::{Dtype, Scalar};
use crate::scheduler::{ModuleStatus, TuneMode};
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub const FRAME_MAGIC: [u8; 4] = *b"DLOR";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Upper bound for a sane payload; anything larger is rejected before
/// allocation. Desk-scale tensors are a few hundred KiB at most.
pub const MAX_PAYLOAD: u32 = 1 << 24;
const MAX_NDIM: usize = 8;
const MAX_ELEMS: usize = 1 << 26;

pub const DEFAULT_TCP_PORT: u16 = 7431;

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolError {
    BadMagic([u8; 4]),
    BadVersion(u8),
    UnknownMessageType(u8),
    /// Frame shorter than its header or its declared payload length.
    Truncated {
        need: usize,
        got: usize,
    },
    /// Payload length field disagrees with the actual frame size.
    LengthMismatch {
        declared: usize,
        actual: usize,
    },
    PayloadTooLarge(u32),
    BadTensor(&'static str),
    DtypeMismatch {
        expected: u8,
        got: u8,
    },
    NonFinite,
    BadField(&'static str),
    TrailingBytes(usize),
    Other(String),
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolError::BadMagic(m) => write!(f, "bad frame magic {m:02x?}"),
            ProtocolError::BadVersion(v) => write!(f, "unsupported protocol version {v}"),
            ProtocolError::UnknownMessageType(t) => write!(f, "unknown message type {t}"),
            ProtocolError::Truncated { need, got } => {
                write!(f, "truncated frame: need {need} bytes, got {got}")
            }
            ProtocolError::LengthMismatch { declared, actual } => {
                write!(f, "payload length {declared} but {actual} bytes present")
            }
            ProtocolError::PayloadTooLarge(n) => write!(f, "payload of {n} bytes exceeds cap"),
            ProtocolError::BadTensor(m) => write!(f, "bad tensor encoding: {m}"),
            ProtocolError::DtypeMismatch { expected, got } => {
                write!(f, "tensor dtype {got} where {expected} expected")
            }
            ProtocolError::NonFinite => write!(f, "non-finite value in payload"),
            ProtocolError::BadField(m) => write!(f, "bad field: {m}"),
            ProtocolError::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            ProtocolError::Other(m) => f.write_str(m),
        }
    }
}

impl core::error::Error for ProtocolError {}

/// Transport failures are separate from protocol (encoding) failures: the
/// former are about moving bytes, the latter about interpreting them.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Peer went away (channel closed / connection reset).
    Closed,
    Failed(String),
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportError::Closed => write!(f, "peer closed the connection"),
            TransportError::Failed(m) => write!(f, "transport failure: {m}"),
        }
    }
}

impl core::error::Error for TransportError {}

/// Reliable, ordered delivery of whole frames. Implementations live in the
/// std companion crate (in-process channels, TCP).
pub trait FrameTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// Where in a decoder block a module's exchanged tensor applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    /// Input to the attention projections (LoRA). Also used for the step's
    /// initial embedding upload, which is the input to block 0.
    QkvInput,
    /// The MLP branch output that a serial adapter transforms.
    MlpInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantBits {
    Bits8,
    Bits32,
}

impl QuantBits {
    pub fn code(self) -> u8 {
        match self {
            QuantBits::Bits8 => 8,
            QuantBits::Bits32 => 32,
        }
    }

    pub fn from_code(v: u8) -> Result<Self, ProtocolError> {
        match v {
            8 => Ok(QuantBits::Bits8),
            32 => Ok(QuantBits::Bits32),
            _ => Err(ProtocolError::BadField("quant bits must be 8 or 32")),
        }
    }
}

/// What the cloud does at blocks whose module is currently killed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrozenPolicy {
    /// Killed modules drop out of the forward entirely: no exchange, no
    /// delta. Default.
    SkipFrozen,
    /// Killed modules still shape the forward with their frozen weights (the
    /// exchange happens, the optimizer never runs).
    ComputeFrozenOnEdge,
}

/// Session kind carried in the Config handshake: one of the three tuning
/// modes, or a forward-only evaluation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    Train(TuneMode),
    Eval,
}

impl SessionMode {
    fn code(self) -> u8 {
        match self {
            SessionMode::Train(TuneMode::Ft) => 0,
            SessionMode::Train(TuneMode::Ek) => 1,
            SessionMode::Train(TuneMode::Kr) => 2,
            SessionMode::Eval => 3,
        }
    }

    fn from_code(v: u8) -> Result<Self, ProtocolError> {
        match v {
            0 => Ok(SessionMode::Train(TuneMode::Ft)),
            1 => Ok(SessionMode::Train(TuneMode::Ek)),
            2 => Ok(SessionMode::Train(TuneMode::Kr)),
            3 => Ok(SessionMode::Eval),
            _ => Err(ProtocolError::BadField("unknown session mode")),
        }
    }
}

/// Everything both nodes must agree on before the first batch moves.
#[derive(Debug, Clone, PartialEq)]
pub struct WireConfig {
    pub vocab: u32,
    pub d_model: u32,
    pub n_heads: u32,
    pub d_ff: u32,
    pub n_layers: u32,
    pub max_seq: u32,
    pub precision: Dtype,
    pub model_seed: u64,
    pub peft_kind: PeftKind,
    pub rank: u32,
    pub adapter_dim: u32,
    pub alpha: f64,
    pub mode: SessionMode,
    pub budget: u32,
    pub quant: QuantBits,
    pub policy: FrozenPolicy,
    pub warmup_steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage<S: Scalar> {
    Config(WireConfig),
    FwdActivation {
        layer: u32,
        site: Site,
        tensor: Tensor<S>,
    },
    FwdDelta {
        layer: u32,
        tensors: Vec<Tensor<S>>,
    },
    LogitsToEdge {
        tensor: Tensor<S>,
    },
    LossGradToCloud {
        loss: f64,
        tensor: Tensor<S>,
    },
    BwdGrad {
        layer: u32,
        site: Site,
        tensors: Vec<Tensor<S>>,
    },
    BwdDeltaGrad {
        layer: u32,
        tensor: Tensor<S>,
    },
    NormReport {
        norms: Vec<f64>,
    },
    Command {
        status: Vec<ModuleStatus>,
    },
    EpochEnd {
        epoch: u32,
    },
    Shutdown,
}

impl<S: Scalar> WireMessage<S> {
    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Config(_) => 0,
            WireMessage::FwdActivation { .. } => 1,
            WireMessage::FwdDelta { .. } => 2,
            WireMessage::LogitsToEdge { .. } => 3,
            WireMessage::LossGradToCloud { .. } => 4,
            WireMessage::BwdGrad { .. } => 5,
            WireMessage::BwdDeltaGrad { .. } => 6,
            WireMessage::NormReport { .. } => 7,
            WireMessage::Command { .. } => 8,
            WireMessage::EpochEnd { .. } => 9,
            WireMessage::Shutdown => 10,
        }
    }
}

// ---- quantization ----

/// Symmetric per-tensor int8: scale = max|x| / 127 stored as f32, codes are
/// round-half-away-from-zero of x/scale clamped to ±127. All-zero input maps
/// to scale 0 with all-zero codes. The arithmetic runs in f64 regardless of
/// the tensor precision so the bound |x − code·scale| ≤ scale/2 carries only
/// representation rounding on top.
pub fn quantize<S: Scalar>(t: &Tensor<S>) -> (f32, Vec<i8>) {
    let mut max_abs = 0.0f64;
    for &v in t.data() {
        let a = libm::fabs(v.to_f64());
        if a > max_abs {
            max_abs = a;
        }
    }
    let scale = (max_abs / 127.0) as f32;
    if scale == 0.0 {
        return (0.0, alloc::vec![0i8; t.numel()]);
    }
    let s = scale as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| {
            let c = libm::round(v.to_f64() / s);
            c.clamp(-127.0, 127.0) as i8
        })
        .collect();
    (scale, codes)
}

/// code·scale, evaluated in f64 and rounded once into the working precision.
pub fn dequantize<S: Scalar>(dims: Vec<usize>, scale: f32, codes: &[i8]) -> Tensor<S> {
    let s = scale as f64;
    let data = codes.iter().map(|&c| S::from_f64(c as f64 * s)).collect();
    Tensor::from_vec(dims, data)
}

// ---- encoding ----

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>, quantized: bool) {
    out.push(if quantized { 2 } else { S::DTYPE.code() });
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        put_u32(out, d as u32);
    }
    if quantized {
        let (scale, codes) = quantize(t);
        out.extend_from_slice(&scale.to_le_bytes());
        out.extend(codes.iter().map(|&c| c as u8));
    } else {
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

/// Serializes one message into a complete frame. `quant` governs only the
/// activation/gradient tensor payloads.
pub fn encode_frame<S: Scalar>(msg: &WireMessage<S>, quant: QuantBits) -> Vec<u8> {
    let q = quant == QuantBits::Bits8;
    let mut payload = Vec::new();
    match msg {
        WireMessage::Config(c) => {
            put_u32(&mut payload, c.vocab);
            put_u32(&mut payload, c.d_model);
            put_u32(&mut payload, c.n_heads);
            put_u32(&mut payload, c.d_ff);
            put_u32(&mut payload, c.n_layers);
            put_u32(&mut payload, c.max_seq);
            payload.push(c.precision.code());
            payload.extend_from_slice(&c.model_seed.to_le_bytes());
            payload.push(match c.peft_kind {
                PeftKind::Lora => 0,
                PeftKind::Adapter => 1,
            });
            put_u32(&mut payload, c.rank);
            put_u32(&mut payload, c.adapter_dim);
            payload.extend_from_slice(&c.alpha.to_le_bytes());
            payload.push(c.mode.code());
            put_u32(&mut payload, c.budget);
            payload.push(c.quant.code());
            payload.push(match c.policy {
                FrozenPolicy::SkipFrozen => 0,
                FrozenPolicy::ComputeFrozenOnEdge => 1,
            });
            put_u32(&mut payload, c.warmup_steps);
        }
        WireMessage::FwdActivation {
            layer,
            site,
            tensor,
        } => {
            put_u32(&mut payload, *layer);
            payload.push(match site {
                Site::QkvInput => 0,
                Site::MlpInput => 1,
            });
            put_tensor(&mut payload, tensor, q);
        }
        WireMessage::FwdDelta { layer, tensors } => {
            put_u32(&mut payload, *layer);
            payload.push(tensors.len() as u8);
            for t in tensors {
                put_tensor(&mut payload, t, q);
            }
        }
        WireMessage::LogitsToEdge { tensor } => {
            put_tensor(&mut payload, tensor, q);
        }
        WireMessage::LossGradToCloud { loss, tensor } => {
            payload.extend_from_slice(&loss.to_le_bytes());
            put_tensor(&mut payload, tensor, q);
        }
        WireMessage::BwdGrad {
            layer,
            site,
            tensors,
        } => {
            put_u32(&mut payload, *layer);
            payload.push(match site {
                Site::QkvInput => 0,
                Site::MlpInput => 1,
            });
            payload.push(tensors.len() as u8);
            for t in tensors {
                put_tensor(&mut payload, t, q);
            }
        }
        WireMessage::BwdDeltaGrad { layer, tensor } => {
            put_u32(&mut payload, *layer);
            put_tensor(&mut payload, tensor, q);
        }
        WireMessage::NormReport { norms } => {
            payload.push(norms.len() as u8);
            for &n in norms {
                payload.extend_from_slice(&n.to_le_bytes());
            }
        }
        WireMessage::Command { status } => {
            payload.push(status.len() as u8);
            for s in status {
                payload.push(match s {
                    ModuleStatus::Active => 1,
                    ModuleStatus::Killed => 0,
                });
            }
        }
        WireMessage::EpochEnd { epoch } => {
            put_u32(&mut payload, *epoch);
        }
        WireMessage::Shutdown => {}
    }

    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&FRAME_MAGIC);
    frame.push(PROTOCOL_VERSION);
    frame.push(msg.msg_type());
    put_u32(&mut frame, payload.len() as u32);
    frame.extend_from_slice(&payload);
    frame
}

// ---- decoding ----

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Truncated {
                need: self.pos + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f32(&mut self) -> Result<f32, ProtocolError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_site(r: &mut Reader) -> Result<Site, ProtocolError> {
    match r.u8()? {
        0 => Ok(Site::QkvInput),
        1 => Ok(Site::MlpInput),
        _ => Err(ProtocolError::BadField("unknown site")),
    }
}

fn read_tensor<S: Scalar>(r: &mut Reader) -> Result<Tensor<S>, ProtocolError> {
    let dtype = r.u8()?;
    let ndim = r.u8()? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(ProtocolError::BadTensor("bad rank"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel = 1usize;
    for _ in 0..ndim {
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(ProtocolError::BadTensor("zero dimension"));
        }
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or(ProtocolError::BadTensor("element count overflow"))?;
        dims.push(d);
    }
    match dtype {
        2 => {
            let scale = r.f32()?;
            if !scale.is_finite() || scale < 0.0 {
                return Err(ProtocolError::BadTensor("bad quantization scale"));
            }
            let raw = r.take(numel)?;
            let codes: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
            Ok(dequantize(dims, scale, &codes))
        }
        d if d == S::DTYPE.code() => {
            let raw = r.take(numel * S::WIRE_SIZE)?;
            let mut data = Vec::with_capacity(numel);
            for chunk in raw.chunks_exact(S::WIRE_SIZE) {
                let v = S::read_le(chunk);
                if !v.is_finite() {
                    return Err(ProtocolError::NonFinite);
                }
                data.push(v);
            }
            Ok(Tensor::from_vec(dims, data))
        }
        other => Err(ProtocolError::DtypeMismatch {
            expected: S::DTYPE.code(),
            got: other,
        }),
    }
}

/// Parses a complete frame. The buffer must hold exactly one frame; any
/// disagreement between the declared payload length and the actual bytes is
/// an error, never a panic.
pub fn decode_frame<S: Scalar>(frame: &[u8]) -> Result<WireMessage<S>, ProtocolError> {
    if frame.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            need: HEADER_LEN,
            got: frame.len(),
        });
    }
    let magic = [frame[0], frame[1], frame[2], frame[3]];
    if magic != FRAME_MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if frame[5 - 1] != PROTOCOL_VERSION {
        return Err(ProtocolError::BadVersion(frame[4]));
    }
    let msg_type = frame[5];
    let declared = u32::from_le_bytes([frame[6], frame[7], frame[8], frame[9]]);
    if declared > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(declared));
    }
    let actual = frame.len() - HEADER_LEN;
    if declared as usize != actual {
        return Err(ProtocolError::LengthMismatch {
            declared: declared as usize,
            actual,
        });
    }
    let mut r = Reader::new(&frame[HEADER_LEN..]);
    let msg = match msg_type {
        0 => {
            let vocab = r.u32()?;
            let d_model = r.u32()?;
            let n_heads = r.u32()?;
            let d_ff = r.u32()?;
            let n_layers = r.u32()?;
            let max_seq = r.u32()?;
            let precision = match r.u8()? {
                0 => Dtype::F32,
                1 => Dtype::F64,
                _ => return Err(ProtocolError::BadField("unknown precision")),
            };
            let model_seed = r.u64()?;
            let peft_kind = match r.u8()? {
                0 => PeftKind::Lora,
                1 => PeftKind::Adapter,
                _ => return Err(ProtocolError::BadField("unknown module kind")),
            };
            let rank = r.u32()?;
            let adapter_dim = r.u32()?;
            let alpha = r.f64()?;
            if !alpha.is_finite() {
                return Err(ProtocolError::NonFinite);
            }
            let mode = SessionMode::from_code(r.u8()?)?;
            let budget = r.u32()?;
            let quant = QuantBits::from_code(r.u8()?)?;
            let policy = match r.u8()? {
                0 => FrozenPolicy::SkipFrozen,
                1 => FrozenPolicy::ComputeFrozenOnEdge,
                _ => return Err(ProtocolError::BadField("unknown frozen policy")),
            };
            let warmup_steps = r.u32()?;
            WireMessage::Config(WireConfig {
                vocab,
                d_model,
                n_heads,
                d_ff,
                n_layers,
                max_seq,
                precision,
                model_seed,
                peft_kind,
                rank,
                adapter_dim,
                alpha,
                mode,
                budget,
                quant,
                policy,
                warmup_steps,
            })
        }
        1 => WireMessage::FwdActivation {
            layer: r.u32()?,
            site: read_site(&mut r)?,
            tensor: read_tensor(&mut r)?,
        },
        2 => {
            let layer = r.u32()?;
            let count = r.u8()? as usize;
            if count == 0 || count > 3 {
                return Err(ProtocolError::BadField("delta tensor count"));
            }
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                tensors.push(read_tensor(&mut r)?);
            }
            WireMessage::FwdDelta { layer, tensors }
        }
        3 => WireMessage::LogitsToEdge {
            tensor: read_tensor(&mut r)?,
        },
        4 => {
            let loss = r.f64()?;
            if !loss.is_finite() {
                return Err(ProtocolError::NonFinite);
            }
            WireMessage::LossGradToCloud {
                loss,
                tensor: read_tensor(&mut r)?,
            }
        }
        5 => {
            let layer = r.u32()?;
            let site = read_site(&mut r)?;
            let count = r.u8()? as usize;
            if count == 0 || count > 3 {
                return Err(ProtocolError::BadField("grad tensor count"));
            }
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                tensors.push(read_tensor(&mut r)?);
            }
            WireMessage::BwdGrad {
                layer,
                site,
                tensors,
            }
        }
        6 => WireMessage::BwdDeltaGrad {
            layer: r.u32()?,
            tensor: read_tensor(&mut r)?,
        },
        7 => {
            let n = r.u8()? as usize;
            let mut norms = Vec::with_capacity(n);
            for _ in 0..n {
                let v = r.f64()?;
                if !v.is_finite() || v < 0.0 {
                    return Err(ProtocolError::BadField("norms must be finite and >= 0"));
                }
                norms.push(v);
            }
            WireMessage::NormReport { norms }
        }
        8 => {
            let n = r.u8()? as usize;
            let mut status = Vec::with_capacity(n);
            for _ in 0..n {
                status.push(match r.u8()? {
                    0 => ModuleStatus::Killed,
                    1 => ModuleStatus::Active,
                    _ => return Err(ProtocolError::BadField("unknown module status")),
                });
            }
            WireMessage::Command { status }
        }
        9 => WireMessage::EpochEnd { epoch: r.u32()? },
        10 => WireMessage::Shutdown,
        t => return Err(ProtocolError::UnknownMessageType(t)),
    };
    if r.remaining() != 0 {
        return Err(ProtocolError::TrailingBytes(r.remaining()));
    }
    Ok(msg)
}
