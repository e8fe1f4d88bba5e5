//! Single-file checkpoint: versioned header, the canonical config text it
//! was trained under, and named f32 little-endian tensor blobs.
//!
//! Layout (all integers little-endian):
//!   magic "SSCK" | version u16 | reserved u16 = 0 | epoch u32 | step u64
//!   | config fingerprint u64 | config length u32 | blob count u32
//!   | config UTF-8 bytes
//!   | per blob: name length u16, name UTF-8, rank u8, dims u32 each,
//!     elements f32
//!
//! Blob names are "param:", "adam_m:" or "adam_v:" plus the tensor name.
//! The fingerprint is FNV-1a over the config bytes; a load refuses files
//! whose embedded text does not hash to the stored value, and callers refuse
//! checkpoints whose config text differs from their own.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical model config text; its hash is the compatibility fingerprint.
    pub config_text: String,
    pub epoch: u32,
    /// Optimizer step counter, so a resumed run continues the schedule.
    pub step: u64,
    /// Parameters in registration order; order is part of the file identity.
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.config_text.as_bytes())
    }

    /// Refuses a checkpoint built under a different configuration.
    pub fn require_config(&self, expected_text: &str) -> Result<()> {
        if self.config_text == expected_text {
            return Ok(());
        }
        Err(Error::Config(format!(
            "checkpoint config fingerprint {:016x} does not match the requested \
             configuration (fingerprint {:016x})",
            self.fingerprint(),
            fnv1a64(expected_text.as_bytes()),
        )))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.fingerprint().to_le_bytes());
    let config_bytes = ckpt.config_text.as_bytes();
    buf.extend_from_slice(&u32::try_from(config_bytes.len()).map_err(|_| {
        Error::Input("config text too large for checkpoint header".into())
    })?.to_le_bytes());
    let blob_count = ckpt.params.len() + ckpt.adam_m.len() + ckpt.adam_v.len();
    buf.extend_from_slice(&u32::try_from(blob_count).map_err(|_| {
        Error::Input("too many tensors for checkpoint header".into())
    })?.to_le_bytes());
    buf.extend_from_slice(config_bytes);
    for (section, tensors) in
        [("param", &ckpt.params), ("adam_m", &ckpt.adam_m), ("adam_v", &ckpt.adam_v)]
    {
        for (name, tensor) in tensors.iter() {
            write_blob(&mut buf, &format!("{section}:{name}"), tensor)?;
        }
    }

    // Atomic publish: readers see either the old file or the complete new one.
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_blob(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    let name_len = u16::try_from(name_bytes.len())
        .map_err(|_| Error::Input(format!("tensor name too long: {name:?}")))?;
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name_bytes);
    let rank = u8::try_from(tensor.shape().len())
        .map_err(|_| Error::Input(format!("tensor rank too large: {name:?}")))?;
    buf.push(rank);
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Input(format!("dimension too large in {name:?}")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value in tensor {name:?}")));
        }
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let epoch = r.u32()?;
    let step = r.u64()?;
    let stored_fp = r.u64()?;
    let config_len = r.u32()? as usize;
    let blob_count = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Format("config text is not valid UTF-8".into()))?;
    if fnv1a64(config_text.as_bytes()) != stored_fp {
        return Err(Error::Format(
            "config fingerprint does not match embedded config text".into(),
        ));
    }

    let mut ckpt = Checkpoint {
        config_text,
        epoch,
        step,
        params: Vec::new(),
        adam_m: Vec::new(),
        adam_v: Vec::new(),
    };
    for _ in 0..blob_count {
        let (name, tensor) = read_blob(&mut r)?;
        let (section, tensor_name) = name
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("blob name {name:?} has no section")))?;
        let dest = match section {
            "param" => &mut ckpt.params,
            "adam_m" => &mut ckpt.adam_m,
            "adam_v" => &mut ckpt.adam_v,
            other => {
                return Err(Error::Format(format!("unknown blob section {other:?}")));
            }
        };
        dest.push((tensor_name.to_string(), tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }
    Ok(ckpt)
}

fn read_blob(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("blob name is not valid UTF-8".into()))?;
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = r.u32()? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("blob {name:?} dimensions overflow")))?;
        shape.push(d);
    }
    let raw = r.take(count.checked_mul(4).ok_or_else(|| {
        Error::Format(format!("blob {name:?} payload size overflows"))
    })?)?;
    let mut data = Vec::with_capacity(count);
    for chunk in raw.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value in blob {name:?}")));
        }
        data.push(v);
    }
    let tensor = Tensor::new(shape, data)
        .map_err(|_| Error::Format(format!("blob {name:?} shape/payload mismatch")))?;
    Ok((name, tensor))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("file truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}
