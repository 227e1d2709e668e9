//! Feature-map files.
//!
//! ```text
//! "FMAP" | version u32 | h u32 | w u32 | C u32 | h*w*C f32, row-major (h, w, c)
//! ```
//! All integers and reals little-endian.

use std::fs;
use std::path::Path;

use super::bin::{dim_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;
pub const FMAP_HEADER_LEN: usize = 20;

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(FMAP_MAGIC);
    w.u32(FMAP_VERSION);
    w.u32(dim_u32(map.height(), "height")?);
    w.u32(dim_u32(map.width(), "width")?);
    w.u32(dim_u32(map.channels(), "channels")?);
    w.f32s(map.data()).map_err(Error::Config)?;
    Ok(w.buf)
}

pub fn decode_feature_map(path: &str, bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(path, bytes);
    r.magic(FMAP_MAGIC)?;
    let version = r.u32("version")?;
    if version != FMAP_VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(r.err_at(8, format!("zero dimension in header {h}x{w}x{c}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.err_at(8, "header dims overflow"))?;
    let expected = count
        .checked_mul(4)
        .and_then(|v| v.checked_add(FMAP_HEADER_LEN))
        .ok_or_else(|| r.err_at(8, "header dims overflow"))?;
    r.expect_end(expected)?;
    let data = r.f32s(count, "payload")?;
    FeatureMap::new(h, w, c, data)
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_map(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_map(&path.display().to_string(), &bytes)
}
