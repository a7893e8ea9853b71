//! Checkpoint format: a magic header, the model configuration as JSON, the
//! raw parameter tensors, and a trailing integrity digest.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    8 bytes  "M3DCKPT\0"
//! version  u32
//! cfg_len  u64, then cfg_len bytes of model-config JSON
//! count    u64
//! count times:
//!   name_len u64, then name_len bytes of UTF-8
//!   trainable u8
//!   rows u64, cols u64
//!   rows*cols f64 values, row major
//! digest   u64, the parameter-store fingerprint
//! ```
//!
//! Loading rebuilds the model from the embedded configuration and then
//! overwrites every parameter bit for bit; the set of names must match the
//! architecture exactly, shapes included. Round trips are exact.

use crate::error::{Error, Result};
use crate::model::{DetectorModel, ModelConfig};
use crate::Mat;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"M3DCKPT\0";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

pub fn save_model(path: &Path, model: &DetectorModel) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    write_u64(&mut w, cfg.len() as u64).map_err(io_err)?;
    w.write_all(&cfg).map_err(io_err)?;

    write_u64(&mut w, model.params.len() as u64).map_err(io_err)?;
    for (_, entry) in model.params.iter() {
        write_u64(&mut w, entry.name.len() as u64).map_err(io_err)?;
        w.write_all(entry.name.as_bytes()).map_err(io_err)?;
        w.write_all(&[entry.trainable as u8]).map_err(io_err)?;
        write_u64(&mut w, entry.value.nrows() as u64).map_err(io_err)?;
        write_u64(&mut w, entry.value.ncols() as u64).map_err(io_err)?;
        for v in entry.value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    write_u64(&mut w, model.params.fingerprint()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }

    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| bad(format!("truncated config: {e}")))?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;

    // Seed is irrelevant: every parameter is overwritten below.
    let mut model = DetectorModel::new(cfg, 0)?;

    let count = read_u64(&mut r)? as usize;
    if count != model.params.len() {
        return Err(bad(format!(
            "{count} parameters stored, architecture has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("name is not UTF-8"))?;
        let trainable = read_exact::<1>(&mut r)?[0] != 0;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;

        let id = model
            .params
            .lookup(&name)
            .ok_or_else(|| bad(format!("unknown parameter {name:?}")))?;
        let expect = model.params.value(id).dim();
        if (rows, cols) != expect {
            return Err(bad(format!(
                "{name:?} stored as {rows}x{cols}, architecture wants {}x{}",
                expect.0, expect.1
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        let mat = Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| bad(format!("{name:?}: {e}")))?;
        *model.params.value_mut(id) = mat;
        model.params.set_trainable(id, trainable);
    }

    let digest = read_u64(&mut r)?;
    let actual = model.params.fingerprint();
    if digest != actual {
        return Err(bad(format!(
            "integrity digest mismatch: stored {digest:#018x}, loaded {actual:#018x}"
        )));
    }
    Ok(model)
}
