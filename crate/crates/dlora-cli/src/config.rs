//! Run configuration: a JSON file with exactly these fields, overridable
//! field-by-field from command-line flags. Defaults are the desk-scale
//! setup: 8 layers, d=64, vocab 64, 4 epochs after one warmup epoch,
//! batch 16, lr 3e-4.

use anyhow::{bail, Context, Result};
use dlora_core::model::ModelConfig;
use dlora_core::peft::{PeftConfig, PeftKind};
use dlora_core::protocol::{FrozenPolicy, QuantBits};
use dlora_core::scalar::Dtype;
use dlora_core::scheduler::TuneMode;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSection {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk();
        ModelSection {
            vocab: m.vocab,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            n_layers: m.n_layers,
            max_seq: m.max_seq,
        }
    }
}

impl ModelSection {
    pub fn to_core(self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            max_seq: self.max_seq,
        }
    }

    pub fn from_core(m: &ModelConfig) -> Self {
        ModelSection {
            vocab: m.vocab,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            n_layers: m.n_layers,
            max_seq: m.max_seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeftSection {
    pub kind: KindField,
    pub rank: usize,
    pub adapter_dim: usize,
    pub alpha: f64,
}

/// Wrapper so the JSON spells the kind as a plain string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindField {
    Lora,
    Adapter,
}

impl Default for PeftSection {
    fn default() -> Self {
        PeftSection {
            kind: KindField::Lora,
            rank: 4,
            adapter_dim: 16,
            alpha: 1.0,
        }
    }
}

impl PeftSection {
    pub fn to_core(self) -> PeftConfig {
        PeftConfig {
            kind: match self.kind {
                KindField::Lora => PeftKind::Lora,
                KindField::Adapter => PeftKind::Adapter,
            },
            rank: self.rank,
            adapter_dim: self.adapter_dim,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeField {
    Ft,
    Ek,
    Kr,
}

impl ModeField {
    pub fn to_core(self) -> TuneMode {
        match self {
            ModeField::Ft => TuneMode::Ft,
            ModeField::Ek => TuneMode::Ek,
            ModeField::Kr => TuneMode::Kr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyField {
    SkipFrozen,
    ComputeFrozenOnEdge,
}

impl PolicyField {
    pub fn to_core(self) -> FrozenPolicy {
        match self {
            PolicyField::SkipFrozen => FrozenPolicy::SkipFrozen,
            PolicyField::ComputeFrozenOnEdge => FrozenPolicy::ComputeFrozenOnEdge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskField {
    Copy,
    Reverse,
    Charlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionField {
    F32,
    F64,
}

impl PrecisionField {
    pub fn dtype(self) -> Dtype {
        match self {
            PrecisionField::F32 => Dtype::F32,
            PrecisionField::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportField {
    Local,
    Tcp { addr: String },
}

/// Everything that defines a fine-tuning or evaluation run. Serialized
/// verbatim into the metrics-log header, except `transport` and `output`,
/// which do not affect any computed number and would break the guarantee
/// that a local run and a TCP run of the same config log identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub precision: PrecisionField,
    pub peft: PeftSection,
    pub mode: ModeField,
    pub budget: usize,
    pub epochs: u32,
    /// None: one dataset pass's worth of steps.
    pub warmup_steps: Option<u32>,
    pub batch_size: usize,
    pub lr: f64,
    pub quant_bits: u8,
    pub frozen_policy: PolicyField,
    pub transport: TransportField,
    pub task: TaskField,
    pub n_samples: usize,
    /// Copy/reverse segment length (charlm window = 2·seg_len+1).
    pub seg_len: usize,
    pub seed: u64,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            precision: PrecisionField::F32,
            peft: PeftSection::default(),
            mode: ModeField::Ft,
            budget: 4,
            epochs: 4,
            warmup_steps: None,
            batch_size: 16,
            lr: 3e-4,
            quant_bits: 32,
            frozen_policy: PolicyField::SkipFrozen,
            transport: TransportField::Local,
            task: TaskField::Copy,
            n_samples: 64,
            seg_len: 6,
            seed: 42,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn quant(&self) -> Result<QuantBits> {
        match self.quant_bits {
            8 => Ok(QuantBits::Bits8),
            32 => Ok(QuantBits::Bits32),
            other => bail!("quant_bits must be 8 or 32, not {other}"),
        }
    }

    /// Warmup steps with the one-epoch default applied.
    pub fn resolved_warmup(&self) -> u32 {
        self.warmup_steps
            .unwrap_or((self.n_samples / self.batch_size.max(1)) as u32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .to_core()
            .validate()
            .map_err(|e| anyhow::anyhow!("model config: {e}"))?;
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if self.n_samples < self.batch_size {
            bail!(
                "n_samples ({}) is smaller than one batch ({})",
                self.n_samples,
                self.batch_size
            );
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("lr must be a positive finite number");
        }
        if self.mode != ModeField::Ft && (self.budget == 0 || self.budget > self.model.n_layers) {
            bail!(
                "budget must lie in 1..={} for scheduled modes",
                self.model.n_layers
            );
        }
        if self.peft.kind == KindField::Lora && self.peft.rank == 0 {
            bail!("lora rank must be positive");
        }
        if self.peft.kind == KindField::Adapter && self.peft.adapter_dim == 0 {
            bail!("adapter_dim must be positive");
        }
        if self.seg_len == 0 {
            bail!("seg_len must be positive");
        }
        let needed = match self.task {
            TaskField::Copy | TaskField::Reverse => 2 * self.seg_len + 1,
            TaskField::Charlm => 2 * self.seg_len + 1,
        };
        if needed > self.model.max_seq {
            bail!(
                "seg_len {} needs sequences of {} tokens but max_seq is {}",
                self.seg_len,
                needed,
                self.model.max_seq
            );
        }
        self.quant()?;
        Ok(())
    }

    /// Deterministic per-run module seed, decorrelated from the data seed.
    pub fn module_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}
