//! Model checkpoints and content hashing.
//!
//! A checkpoint is a little-endian binary file: a header describing the
//! architecture (kind, widths, head layout, the step it was saved after,
//! and a hash of the training configuration), followed by every parameter
//! tensor in the canonical [`SegmentationModel::named_params`] order, each
//! prefixed by its name and dimensions so corruption and architecture
//! drift are caught instead of silently mis-filling weights.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{ModelKind, SegmentationModel};

const CKPT_MAGIC: &[u8; 8] = b"SHAPCKP1";
const CKPT_VERSION: u32 = 1;

/// Everything the header records about a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub width: usize,
    pub head_hidden: usize,
    /// 1-based index of the last step trained into these weights.
    pub step_index: usize,
    /// Per head: class channels and whether it carries an extra channel.
    pub head_layout: Vec<(usize, bool)>,
    /// SHA-256 of the configuration snapshot the run was started with.
    pub config_hash: [u8; 32],
}

/// SHA-256 of a configuration snapshot string.
pub fn config_hash(text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Lowercase hex of a digest.
pub fn hash_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, as lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let digest: [u8; 32] = h.finalize().into();
    Ok(hash_hex(&digest))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn take_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Archive("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Write the model and its metadata.
pub fn save_checkpoint(
    path: &Path,
    model: &SegmentationModel,
    step_index: usize,
    config_hash: &[u8; 32],
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    put_u32(&mut out, CKPT_VERSION)?;
    out.write_all(&[match model.kind() {
        ModelKind::Adaptation => 0u8,
        ModelKind::SharedBackground => 1u8,
    }])?;
    put_u32(&mut out, model.width() as u32)?;
    put_u32(&mut out, model.head_hidden() as u32)?;
    put_u32(&mut out, step_index as u32)?;
    put_u32(&mut out, model.num_steps() as u32)?;
    for head in model.heads() {
        put_u32(&mut out, head.num_classes() as u32)?;
        out.write_all(&[head.has_extra() as u8])?;
    }
    out.write_all(config_hash)?;
    for (name, tensor) in model.named_params() {
        let bytes = name.as_bytes();
        put_u32(&mut out, bytes.len() as u32)?;
        out.write_all(bytes)?;
        let dims = tensor.shape().dims().to_vec();
        put_u32(&mut out, dims.len() as u32)?;
        for d in &dims {
            put_u32(&mut out, *d as u32)?;
        }
        for v in tensor.values().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint back into a model plus its metadata.  The
/// architecture is rebuilt from the header; every tensor record must then
/// match it by name and shape.
pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, CheckpointMeta)> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Archive("file too short for magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Archive("bad magic; not a checkpoint".into()));
    }
    let version = take_u32(&mut input)?;
    if version != CKPT_VERSION {
        return Err(Error::Archive(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut kind_byte = [0u8; 1];
    input
        .read_exact(&mut kind_byte)
        .map_err(|_| Error::Archive("truncated header".into()))?;
    let kind = match kind_byte[0] {
        0 => ModelKind::Adaptation,
        1 => ModelKind::SharedBackground,
        other => {
            return Err(Error::Archive(format!("unknown model kind byte {other}")));
        }
    };
    let width = take_u32(&mut input)? as usize;
    let head_hidden = take_u32(&mut input)? as usize;
    let step_index = take_u32(&mut input)? as usize;
    let head_count = take_u32(&mut input)? as usize;
    if head_count == 0 || head_count > 64 || width == 0 || width > 4096 {
        return Err(Error::Archive("implausible architecture header".into()));
    }
    let mut head_layout = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let classes = take_u32(&mut input)? as usize;
        let mut flag = [0u8; 1];
        input
            .read_exact(&mut flag)
            .map_err(|_| Error::Archive("truncated head layout".into()))?;
        head_layout.push((classes, flag[0] != 0));
    }
    let mut config_hash = [0u8; 32];
    input
        .read_exact(&mut config_hash)
        .map_err(|_| Error::Archive("truncated config hash".into()))?;

    // Rebuild the architecture, then validate the recorded layout against
    // what that architecture implies.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SegmentationModel::new(kind, width, head_hidden, head_layout[0].0, &mut rng)
        .map_err(|e| Error::Archive(format!("invalid architecture: {e}")))?;
    for &(classes, _) in &head_layout[1..] {
        model
            .add_step_head(classes, &mut rng)
            .map_err(|e| Error::Archive(format!("invalid head: {e}")))?;
    }
    for (head, &(_, recorded_extra)) in model.heads().iter().zip(&head_layout) {
        if head.has_extra() != recorded_extra {
            return Err(Error::Archive(
                "head layout contradicts the model kind".into(),
            ));
        }
    }

    for (expected_name, tensor) in model.named_params() {
        let name_len = take_u32(&mut input)? as usize;
        if name_len > 256 {
            return Err(Error::Archive("implausible tensor name length".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        input
            .read_exact(&mut name_buf)
            .map_err(|_| Error::Archive("truncated tensor name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Archive(format!(
                "tensor order mismatch: expected '{expected_name}', found '{name}'"
            )));
        }
        let rank = take_u32(&mut input)? as usize;
        if rank > 8 {
            return Err(Error::Archive("implausible tensor rank".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&mut input)? as usize);
        }
        if dims != tensor.shape().dims() {
            return Err(Error::Archive(format!(
                "shape mismatch for '{name}': file {dims:?} vs model {:?}",
                tensor.shape().dims()
            )));
        }
        let mut values = vec![0.0f32; tensor.shape().numel()];
        let mut buf4 = [0u8; 4];
        for v in values.iter_mut() {
            input
                .read_exact(&mut buf4)
                .map_err(|_| Error::Archive(format!("truncated values for '{name}'")))?;
            *v = f32::from_le_bytes(buf4);
            if !v.is_finite() {
                return Err(Error::Archive(format!(
                    "non-finite value in tensor '{name}'"
                )));
            }
        }
        tensor.values_mut().copy_from_slice(&values);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Archive("trailing bytes after last tensor".into()));
    }
    Ok((
        model,
        CheckpointMeta {
            kind,
            width,
            head_hidden,
            step_index,
            head_layout,
            config_hash,
        },
    ))
}
