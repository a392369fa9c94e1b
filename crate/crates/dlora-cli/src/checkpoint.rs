//! Binary checkpoint files.
//!
//! `DLBK` holds a backbone (embedding + blocks + head) with the seed it was
//! initialized from — both nodes of a split run load the same file, and the
//! seed doubles as the identity token carried in the wire `Config`. The
//! position table is deterministic and recomputed on load, not stored.
//!
//! `DLPF` holds trained modules plus their final active/killed status, so an
//! evaluation run reproduces exactly the network the training run ended
//! with.
//!
//! All integers are little-endian; tensors are `ndim u8, dims u32 …, data`.

use anyhow::{bail, Context, Result};
use dlora_core::model::Backbone;
use dlora_core::peft::{init_module, PeftConfig, PeftKind, PeftModule};
use dlora_core::rng::Rng;
use dlora_core::scalar::{Dtype, Scalar};
use dlora_core::scheduler::ModuleStatus;
use dlora_core::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

const BACKBONE_MAGIC: &[u8; 4] = b"DLBK";
const PEFT_MAGIC: &[u8; 4] = b"DLPF";
const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            bail!("checkpoint has trailing bytes");
        }
        Ok(())
    }
}

fn write_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor_into<S: Scalar>(r: &mut Reader<'_>, dst: &mut Tensor<S>) -> Result<()> {
    let ndim = r.u8()? as usize;
    if ndim != dst.dims().len() {
        bail!("tensor rank mismatch in checkpoint");
    }
    for want in dst.dims().to_vec() {
        if r.u32()? as usize != want {
            bail!("tensor shape mismatch in checkpoint");
        }
    }
    let bytes = r.take(dst.numel() * S::WIRE_SIZE)?;
    for (i, v) in dst.data_mut().iter_mut().enumerate() {
        *v = S::read_le(&bytes[i * S::WIRE_SIZE..]);
    }
    Ok(())
}

/// Dtype recorded in a checkpoint header, so the CLI can pick f32 or f64
/// code paths before parsing the body.
pub fn peek_precision(path: &Path) -> Result<Dtype> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 6 {
        bail!("{} is not a checkpoint", path.display());
    }
    if &bytes[0..4] != BACKBONE_MAGIC && &bytes[0..4] != PEFT_MAGIC {
        bail!("{} has an unknown magic", path.display());
    }
    match bytes[5] {
        0 => Ok(Dtype::F32),
        1 => Ok(Dtype::F64),
        other => bail!("unknown precision code {other}"),
    }
}

pub fn save_backbone<S: Scalar>(path: &Path, backbone: &Backbone<S>, init_seed: u64) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BACKBONE_MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.extend_from_slice(&init_seed.to_le_bytes());
    for v in [
        backbone.config.vocab,
        backbone.config.d_model,
        backbone.config.n_heads,
        backbone.config.d_ff,
        backbone.config.n_layers,
        backbone.config.max_seq,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    write_tensor(&mut out, &backbone.edge.embedding);
    let mut cloud = backbone.cloud.clone();
    for t in cloud.params_mut() {
        write_tensor(&mut out, t);
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

/// Returns the backbone and its recorded init seed.
pub fn load_backbone<S: Scalar>(path: &Path) -> Result<(Backbone<S>, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != BACKBONE_MAGIC {
        bail!("{} is not a backbone checkpoint", path.display());
    }
    if r.u8()? != VERSION {
        bail!("unsupported checkpoint version");
    }
    if r.u8()? != S::DTYPE.code() {
        bail!("checkpoint precision does not match the requested precision");
    }
    let init_seed = r.u64()?;
    let cfg = dlora_core::model::ModelConfig {
        vocab: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        max_seq: r.u32()? as usize,
    };
    // Rebuild from the seed (this recreates the deterministic position
    // table), then overwrite every stored weight.
    let mut backbone: Backbone<S> =
        Backbone::init(cfg, init_seed).map_err(|e| anyhow::anyhow!("checkpoint model: {e}"))?;
    read_tensor_into(&mut r, &mut backbone.edge.embedding)?;
    for t in backbone.cloud.params_mut() {
        read_tensor_into(&mut r, t)?;
    }
    r.done()?;
    Ok((backbone, init_seed))
}

fn kind_code(kind: PeftKind) -> u8 {
    match kind {
        PeftKind::Lora => 0,
        PeftKind::Adapter => 1,
    }
}

pub fn save_modules<S: Scalar>(
    path: &Path,
    peft: &PeftConfig,
    d_model: usize,
    modules: &[PeftModule<S>],
    status: &[ModuleStatus],
    module_seed: u64,
) -> Result<()> {
    if modules.len() != status.len() {
        bail!("module and status counts differ");
    }
    let mut out = Vec::new();
    out.extend_from_slice(PEFT_MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.push(kind_code(peft.kind));
    out.extend_from_slice(&(peft.rank as u32).to_le_bytes());
    out.extend_from_slice(&(peft.adapter_dim as u32).to_le_bytes());
    out.extend_from_slice(&peft.alpha.to_le_bytes());
    out.extend_from_slice(&(d_model as u32).to_le_bytes());
    out.extend_from_slice(&(modules.len() as u32).to_le_bytes());
    out.extend_from_slice(&module_seed.to_le_bytes());
    for s in status {
        out.push(match s {
            ModuleStatus::Active => 1,
            ModuleStatus::Killed => 0,
        });
    }
    for m in modules {
        for p in m.params() {
            write_tensor(&mut out, p);
        }
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

pub struct PeftFile<S: Scalar> {
    pub peft: PeftConfig,
    pub d_model: usize,
    pub modules: Vec<PeftModule<S>>,
    pub status: Vec<ModuleStatus>,
    pub module_seed: u64,
}

pub fn load_modules<S: Scalar>(path: &Path) -> Result<PeftFile<S>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != PEFT_MAGIC {
        bail!("{} is not a module checkpoint", path.display());
    }
    if r.u8()? != VERSION {
        bail!("unsupported checkpoint version");
    }
    if r.u8()? != S::DTYPE.code() {
        bail!("checkpoint precision does not match the requested precision");
    }
    let kind = match r.u8()? {
        0 => PeftKind::Lora,
        1 => PeftKind::Adapter,
        other => bail!("unknown module kind {other}"),
    };
    let rank = r.u32()? as usize;
    let adapter_dim = r.u32()? as usize;
    let alpha = r.f64()?;
    let d_model = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let module_seed = r.u64()?;
    let peft = PeftConfig {
        kind,
        rank,
        adapter_dim,
        alpha,
    };
    let mut status = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        status.push(match r.u8()? {
            1 => ModuleStatus::Active,
            0 => ModuleStatus::Killed,
            other => bail!("unknown status byte {other}"),
        });
    }
    let mut rng = Rng::new(0);
    let mut modules = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        // Shape donor only; every value is overwritten from the file.
        let mut m: PeftModule<S> = init_module(&peft, d_model, &mut rng);
        for p in m.params_mut() {
            read_tensor_into(&mut r, p)?;
        }
        modules.push(m);
    }
    r.done()?;
    Ok(PeftFile {
        peft,
        d_model,
        modules,
        status,
        module_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlora_core::model::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dlora-checkpoint-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn backbone_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab: 16,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            max_seq: 8,
        };
        let bb: Backbone<f32> = Backbone::init(cfg, 77).unwrap();
        let path = tmp("bb_roundtrip.dlbk");
        save_backbone(&path, &bb, 77).unwrap();
        let (loaded, seed) = load_backbone::<f32>(&path).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(loaded, bb);
        assert!(load_backbone::<f64>(&path).is_err(), "precision mismatch");
    }

    #[test]
    fn module_roundtrip_preserves_status_and_weights() {
        let peft = PeftConfig::adapter(4);
        let mut rng = Rng::new(3);
        let modules: Vec<PeftModule<f64>> =
            (0..3).map(|_| init_module(&peft, 8, &mut rng)).collect();
        let status = vec![
            ModuleStatus::Active,
            ModuleStatus::Killed,
            ModuleStatus::Active,
        ];
        let path = tmp("mods_roundtrip.dlpf");
        save_modules(&path, &peft, 8, &modules, &status, 55).unwrap();
        let file = load_modules::<f64>(&path).unwrap();
        assert_eq!(file.modules, modules);
        assert_eq!(file.status, status);
        assert_eq!(file.module_seed, 55);
        assert_eq!(file.peft, peft);
        assert_eq!(file.d_model, 8);
        assert_eq!(peek_precision(&path).unwrap(), Dtype::F64);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = ModelConfig {
            vocab: 16,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            max_seq: 8,
        };
        let bb: Backbone<f32> = Backbone::init(cfg, 1).unwrap();
        let path = tmp("bb_corrupt.dlbk");
        save_backbone(&path, &bb, 1).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = tmp("bb_bad_magic.dlbk");
        fs::write(&bad, &bytes).unwrap();
        assert!(load_backbone::<f32>(&bad).is_err());

        let truncated = tmp("bb_truncated.dlbk");
        fs::write(&truncated, &fs::read(&path).unwrap()[..40]).unwrap();
        assert!(load_backbone::<f32>(&truncated).is_err());

        let mut trailing = fs::read(&path).unwrap();
        trailing.push(0);
        let t = tmp("bb_trailing.dlbk");
        fs::write(&t, &trailing).unwrap();
        assert!(load_backbone::<f32>(&t).is_err());
    }
}
