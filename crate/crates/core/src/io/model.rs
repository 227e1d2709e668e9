//! Model files.
//!
//! ```text
//! "LLNW" | version u32 | flags u32 | branch count u32
//!        | per branch: k u32, in u32, out u32
//!        | combiner: k u32, in u32, out u32
//!        | header crc32 u32
//! then per branch weights, bias; then combiner weights, bias (f32)
//! ```
//! `flags` bit 0 enables the per-branch ReLU. Little-endian throughout.

use std::fs;
use std::path::Path;

use super::bin::{dim_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::lln::LlnParams;
use crate::tensor::ConvLayer;

pub const MODEL_MAGIC: &[u8; 4] = b"LLNW";
pub const MODEL_VERSION: u32 = 1;
const FLAG_BRANCH_RELU: u32 = 1;

pub fn encode_model(params: &LlnParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(if params.branch_relu { FLAG_BRANCH_RELU } else { 0 });
    w.u32(dim_u32(params.branches.len(), "branch count")?);
    for l in params.branches.iter().chain(std::iter::once(&params.combiner)) {
        w.u32(dim_u32(l.kernel_size, "kernel size")?);
        w.u32(dim_u32(l.in_channels, "in channels")?);
        w.u32(dim_u32(l.out_channels, "out channels")?);
    }
    w.header_crc();
    for l in params.branches.iter().chain(std::iter::once(&params.combiner)) {
        w.f32s(&l.weights).map_err(Error::Config)?;
        w.f32s(&l.bias).map_err(Error::Config)?;
    }
    Ok(w.buf)
}

pub fn decode_model(path: &str, bytes: &[u8]) -> Result<LlnParams> {
    let mut r = Reader::new(path, bytes);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let flags_at = r.pos();
    let flags = r.u32("flags")?;
    if flags & !FLAG_BRANCH_RELU != 0 {
        return Err(r.err_at(flags_at, format!("unknown flags {flags:#x}")));
    }
    let count_at = r.pos();
    let count = r.u32("branch count")? as usize;
    if count == 0 || count > 64 {
        return Err(r.err_at(count_at, format!("implausible branch count {count}")));
    }
    let mut shapes = Vec::with_capacity(count + 1);
    for _ in 0..=count {
        let at = r.pos();
        let k = r.u32("kernel size")? as usize;
        let i = r.u32("in channels")? as usize;
        let o = r.u32("out channels")? as usize;
        if k == 0 || k.is_multiple_of(2) || k > 255 || i == 0 || o == 0 || i > 1 << 20 || o > 1 << 20 {
            return Err(r.err_at(at, format!("invalid layer shape k={k} in={i} out={o}")));
        }
        shapes.push((k, i, o));
    }
    r.header_crc()?;
    let payload: usize = shapes.iter().map(|&(k, i, o)| k * k * i * o + o).sum();
    r.expect_end(r.pos() + payload * 4)?;
    let mut layers = Vec::with_capacity(count + 1);
    for (k, i, o) in shapes {
        let weights = r.f32s(k * k * i * o, "weights")?;
        let bias = r.f32s(o, "bias")?;
        layers.push(ConvLayer {
            kernel_size: k,
            in_channels: i,
            out_channels: o,
            weights,
            bias,
        });
    }
    let combiner = layers.pop().expect("combiner present");
    let params = LlnParams {
        branches: layers,
        combiner,
        branch_relu: flags & FLAG_BRANCH_RELU != 0,
    };
    params
        .validate()
        .map_err(|e| r.err_at(12, format!("inconsistent model: {e}")))?;
    Ok(params)
}

pub fn write_model(path: impl AsRef<Path>, params: &LlnParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(params)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<LlnParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&path.display().to_string(), &bytes)
}

/// Parameters as they will be after a save/load cycle (f32 precision).
pub fn quantize(params: &LlnParams) -> LlnParams {
    let mut q = params.clone();
    for l in q.branches.iter_mut().chain(std::iter::once(&mut q.combiner)) {
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
    q
}
