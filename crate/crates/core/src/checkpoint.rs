//! Versioned binary checkpoint format for network parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DSEG" | version u32 | meta_len u32 | metadata JSON
//! | tensor_count u32
//! | per tensor: name_len u32, name, ndim u32, extents u32..., f32 data
//! ```
//!
//! Tensors are the trainable parameters in network order followed by the
//! BN running statistics (`<bn>.running_mean`, `<bn>.running_var`).
//! Round-trips are bit-exact.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Tensor};
use crate::unet::{UNet, UNetConfig};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata persisted with the parameters. Carries everything
/// inference needs to run the stage self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: UNetConfig,
    /// Cascade stage this network belongs to (1 or 2).
    pub stage: u8,
    /// Blending weight the stage was trained with.
    pub alpha_training: f64,
    pub iteration: u64,
    /// Last few training-loss values.
    pub loss_tail: Vec<f32>,
    pub seed: u64,
    /// Resolution divisor of the stage input (stage 1 trains downsampled).
    pub downsample: usize,
    /// Patch extent used for training and tiled inference.
    pub patch: usize,
    /// ROI dilation in voxels applied when this stage's prediction seeds
    /// the next stage.
    pub roi_margin: usize,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &e in shape {
        put_u32(out, e as u32);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize network parameters plus metadata.
pub fn save_checkpoint(net: &UNet, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if meta.config != *net.config() {
        return Err(Error::Checkpoint("metadata config differs from network config".into()));
    }

    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, meta_json.len() as u32);
    out.extend_from_slice(&meta_json);

    let tensor_count = net.param_names().len() + 2 * net.stat_names().len();
    put_u32(&mut out, tensor_count as u32);
    for (name, t) in net.param_names().iter().zip(net.param_tensors()) {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    for (name, s) in net.stat_names().iter().zip(net.stat_values()) {
        put_tensor(&mut out, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
        put_tensor(&mut out, &format!("{name}.running_var"), &[s.var.len()], &s.var);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a checkpoint, rebuilding the network from its stored config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UNet, CheckpointMeta)> {
    let path = path.as_ref();
    let buf = {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vec::new();
        f.read_to_end(&mut v).map_err(|e| Error::io(path, e))?;
        v
    };
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata parse: {e}")))?;

    // Fresh network with the stored architecture; every stored tensor must
    // land exactly once.
    let mut net = UNet::build(meta.config, meta.seed)?;
    let expected = net.param_names().len() + 2 * net.stat_names().len();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "tensor count {count} != expected {expected}"
        )));
    }

    let mut seen = std::collections::HashSet::new();
    let mut pending_means: std::collections::HashMap<String, Vec<f32>> =
        std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

        if let Some(bn) = name.strip_suffix(".running_mean") {
            pending_means.insert(bn.to_owned(), data);
        } else if let Some(bn) = name.strip_suffix(".running_var") {
            let mean = pending_means.remove(bn).ok_or_else(|| {
                Error::Checkpoint(format!("running_var for '{bn}' before running_mean"))
            })?;
            net.set_stats(bn, BnStats { mean, var: data })?;
        } else {
            net.set_param(&name, Tensor::new(shape, data)?)?;
        }
    }
    if !pending_means.is_empty() {
        return Err(Error::Checkpoint("running_mean without matching running_var".into()));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((net, meta))
}

/// Load and require a specific architecture.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &UNetConfig,
) -> Result<(UNet, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(&path)?;
    if meta.config != *expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint {:?}, expected {:?}",
            meta.config, expected
        )));
    }
    Ok((net, meta))
}
