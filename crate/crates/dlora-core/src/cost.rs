//! Compute and communication accounting.
//!
//! Both nodes carry a ledger and bump it as work happens. FLOP counts follow
//! fixed conventions so runs are comparable:
//!
//! * matmul of [m×k]·[k×n]: `2·m·k·n` (multiply + add, the usual convention);
//!   same for the transposed products, which do the same arithmetic.
//! * elementwise passes (activations, residual adds, softmax, rmsnorm) use
//!   documented per-element expansions, see the helpers below.
//! * optimizer updates: a fixed per-parameter expansion.
//!
//! Bookkeeping that exists only to drive the scheduler (epoch-end norm
//! sweeps) and the wire codec (quantize/dequantize) is control plane and is
//! deliberately not counted - the ledger measures the training math itself.
//!
//! Bytes count whole frames including the 10-byte header. Each side records
//! frames it sends and frames it receives; because every frame has exactly
//! one sender and one receiver, the two ledgers of a run agree on the byte
//! totals in each direction.

use alloc::vec::Vec;

/// Running totals for one node, plus per-epoch snapshots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    /// FLOPs spent by the edge node (module math, loss, optimizer).
    pub edge_flops: u64,
    /// FLOPs spent by the cloud node (frozen backbone math).
    pub cloud_flops: u64,
    /// Frame bytes travelling edge → cloud.
    pub bytes_to_cloud: u64,
    /// Frame bytes travelling cloud → edge.
    pub bytes_to_edge: u64,
    /// Frames this node sent (not received).
    pub frames_sent: u64,
    snapshots: Vec<EpochCosts>,
}

/// Ledger totals at one epoch boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EpochCosts {
    pub epoch: u32,
    pub edge_flops: u64,
    pub cloud_flops: u64,
    pub bytes_to_cloud: u64,
    pub bytes_to_edge: u64,
    pub frames_sent: u64,
}

/// Which way a frame moved, from the recording node's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToCloud,
    ToEdge,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// This node sent `frame_len` bytes in `dir`.
    pub fn record_sent_frame(&mut self, dir: Direction, frame_len: usize) {
        self.frames_sent += 1;
        self.add_bytes(dir, frame_len);
    }

    /// This node received a frame that travelled in `dir`. Byte totals move,
    /// frames_sent does not: the sender owns that count.
    pub fn record_received_frame(&mut self, dir: Direction, frame_len: usize) {
        self.add_bytes(dir, frame_len);
    }

    fn add_bytes(&mut self, dir: Direction, frame_len: usize) {
        match dir {
            Direction::ToCloud => self.bytes_to_cloud += frame_len as u64,
            Direction::ToEdge => self.bytes_to_edge += frame_len as u64,
        }
    }

    pub fn add_edge_flops(&mut self, flops: u64) {
        self.edge_flops += flops;
    }

    pub fn add_cloud_flops(&mut self, flops: u64) {
        self.cloud_flops += flops;
    }

    /// Records the running totals as the state at the end of `epoch`.
    pub fn snapshot_epoch(&mut self, epoch: u32) {
        self.snapshots.push(EpochCosts {
            epoch,
            edge_flops: self.edge_flops,
            cloud_flops: self.cloud_flops,
            bytes_to_cloud: self.bytes_to_cloud,
            bytes_to_edge: self.bytes_to_edge,
            frames_sent: self.frames_sent,
        });
    }

    pub fn snapshots(&self) -> &[EpochCosts] {
        &self.snapshots
    }

    /// Totals accumulated within `epoch` alone (difference of adjacent
    /// snapshots; the first epoch diffs against zero).
    pub fn epoch_delta(&self, idx: usize) -> Option<EpochCosts> {
        let cur = *self.snapshots.get(idx)?;
        let prev = if idx == 0 {
            EpochCosts::default()
        } else {
            self.snapshots[idx - 1]
        };
        Some(EpochCosts {
            epoch: cur.epoch,
            edge_flops: cur.edge_flops - prev.edge_flops,
            cloud_flops: cur.cloud_flops - prev.cloud_flops,
            bytes_to_cloud: cur.bytes_to_cloud - prev.bytes_to_cloud,
            bytes_to_edge: cur.bytes_to_edge - prev.bytes_to_edge,
            frames_sent: cur.frames_sent - prev.frames_sent,
        })
    }
}

// ---- FLOP conventions ----

/// [m×k]·[k×n] (or either transposed product over the same operands).
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * m as u64 * k as u64 * n as u64
}

/// One addition (or multiplication) per element.
pub fn elementwise_flops(numel: usize) -> u64 {
    numel as u64
}

/// SiLU: sigmoid (≈4 ops: negate, exp, add, divide) plus the gating multiply.
pub fn silu_flops(numel: usize) -> u64 {
    5 * numel as u64
}

/// Softmax per element: max-subtract, exp, sum-add, divide.
pub fn softmax_flops(rows: usize, cols: usize) -> u64 {
    4 * (rows * cols) as u64
}

/// RMS norm per element: square-accumulate (2) + scale (1) + gain (1), and
/// the amortized mean/sqrt/divide folded into the per-element cost.
pub fn rmsnorm_flops(rows: usize, cols: usize) -> u64 {
    4 * (rows * cols) as u64
}

/// Cross entropy over [rows×cols] logits: softmax plus one log and the
/// gradient subtract/scale per element.
pub fn cross_entropy_flops(rows: usize, cols: usize) -> u64 {
    softmax_flops(rows, cols) + 3 * (rows * cols) as u64
}

/// One decoupled-weight-decay Adam update per parameter: two moment EMAs
/// (4), two bias corrections (2), denominator sqrt + add (2), ratio + decay
/// + step (4).
pub fn adamw_flops(n_params: usize) -> u64 {
    12 * n_params as u64
}
