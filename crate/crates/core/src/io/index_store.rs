//! On-disk map index.
//!
//! ```text
//! <dir>/index.hdr         "LIDX" | version | variant | n | stride | seed u64
//!                         | act saliency | image count | channels | crc32
//! <dir>/manifest.jsonl    copy of the map manifest, index order
//! <dir>/records/NNNNNN.ldsc
//!     "LDSC" | version | id len | id utf-8 | has frame | frame i64
//!     | channels | has landmarks | grid w | grid h | stride | count | crc32
//!     | holistic C×f32 | per landmark: x u32, y u32, activation f32, C×f32
//! ```
//! Little-endian throughout; each header carries a CRC32 of its bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::bin::{dim_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::matcher::{Landmark, LandmarkSet};
use crate::retrieval::{ActSaliency, DescriptorConfig, DescriptorVariant, ImageDescriptor, MapIndex};
use crate::trainer::Manifest;

pub const INDEX_MAGIC: &[u8; 4] = b"LIDX";
pub const RECORD_MAGIC: &[u8; 4] = b"LDSC";
pub const INDEX_VERSION: u32 = 1;

pub const HEADER_FILE: &str = "index.hdr";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RECORDS_DIR: &str = "records";

pub fn encode_index_header(index: &MapIndex) -> Result<Vec<u8>> {
    let c = &index.config;
    let mut w = Writer::default();
    w.bytes(INDEX_MAGIC);
    w.u32(INDEX_VERSION);
    w.u32(c.variant.code());
    w.u32(dim_u32(c.n, "n")?);
    w.u32(c.stride);
    w.u64(c.seed);
    w.u32(match c.act_saliency {
        ActSaliency::L2 => 0,
        ActSaliency::Sum => 1,
    });
    w.u32(dim_u32(index.len(), "image count")?);
    w.u32(dim_u32(index.channels().unwrap_or(0), "channels")?);
    w.header_crc();
    Ok(w.buf)
}

/// Returns the config, image count and channel count.
pub fn decode_index_header(path: &str, bytes: &[u8]) -> Result<(DescriptorConfig, usize, usize)> {
    let mut r = Reader::new(path, bytes);
    r.magic(INDEX_MAGIC)?;
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let at = r.pos();
    let variant = DescriptorVariant::from_code(r.u32("variant")?)
        .ok_or_else(|| r.err_at(at, "unknown descriptor variant"))?;
    let n = r.u32("n")? as usize;
    let stride = r.u32("stride")?;
    let seed = r.u64("seed")?;
    let at = r.pos();
    let act_saliency = match r.u32("act saliency")? {
        0 => ActSaliency::L2,
        1 => ActSaliency::Sum,
        v => return Err(r.err_at(at, format!("unknown act saliency {v}"))),
    };
    let count = r.u32("image count")? as usize;
    let channels = r.u32("channels")? as usize;
    r.header_crc()?;
    r.expect_end(r.pos())?;
    let config = DescriptorConfig {
        variant,
        n,
        stride,
        seed,
        act_saliency,
    };
    config
        .validate()
        .map_err(|e| r.err_at(8, format!("invalid config: {e}")))?;
    Ok((config, count, channels))
}

pub fn encode_record(d: &ImageDescriptor, stride: u32) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(RECORD_MAGIC);
    w.u32(INDEX_VERSION);
    w.u32(dim_u32(d.image_id.len(), "id length")?);
    w.bytes(d.image_id.as_bytes());
    w.u32(d.frame.is_some() as u32);
    w.i64(d.frame.unwrap_or(0));
    w.u32(dim_u32(d.holistic.len(), "channels")?);
    let (gw, gh, count) = d
        .landmarks
        .as_ref()
        .map_or((0, 0, 0), |s| (s.grid_width, s.grid_height, s.len()));
    w.u32(d.landmarks.is_some() as u32);
    w.u32(dim_u32(gw, "grid width")?);
    w.u32(dim_u32(gh, "grid height")?);
    w.u32(d.landmarks.as_ref().map_or(stride, |s| s.stride));
    w.u32(dim_u32(count, "landmark count")?);
    w.header_crc();
    w.f32s(&d.holistic).map_err(Error::Config)?;
    if let Some(set) = &d.landmarks {
        for l in &set.landmarks {
            if l.descriptor.len() != d.holistic.len() {
                return Err(Error::config("landmark descriptor dim differs from holistic"));
            }
            w.u32(dim_u32(l.grid_x, "grid x")?);
            w.u32(dim_u32(l.grid_y, "grid y")?);
            w.f32s(&[l.activation]).map_err(Error::Config)?;
            w.f32s(&l.descriptor).map_err(Error::Config)?;
        }
    }
    Ok(w.buf)
}

pub fn decode_record(path: &str, bytes: &[u8]) -> Result<ImageDescriptor> {
    let mut r = Reader::new(path, bytes);
    r.magic(RECORD_MAGIC)?;
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let id_len = r.u32("id length")? as usize;
    let at = r.pos();
    let id = std::str::from_utf8(r.take(id_len, "image id")?)
        .map_err(|_| r.err_at(at, "image id is not UTF-8"))?
        .to_string();
    let at = r.pos();
    let has_frame = r.u32("frame flag")?;
    if has_frame > 1 {
        return Err(r.err_at(at, "invalid frame flag"));
    }
    let frame = r.i64("frame")?;
    let channels = r.u32("channels")? as usize;
    let at = r.pos();
    let has_landmarks = r.u32("landmark flag")?;
    if has_landmarks > 1 {
        return Err(r.err_at(at, "invalid landmark flag"));
    }
    let gw = r.u32("grid width")? as usize;
    let gh = r.u32("grid height")? as usize;
    let stride = r.u32("stride")?;
    let count = r.u32("landmark count")? as usize;
    r.header_crc()?;
    if channels == 0 {
        return Err(r.err_at(at, "zero channels"));
    }
    let expected = r.pos() + channels * 4 + count * (12 + channels * 4);
    r.expect_end(expected)?;
    let holistic = r.f32s(channels, "holistic")?;
    let mut landmarks = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos();
        let x = r.u32("grid x")? as usize;
        let y = r.u32("grid y")? as usize;
        if x >= gw || y >= gh {
            return Err(r.err_at(at, format!("landmark ({x},{y}) outside {gw}x{gh} grid")));
        }
        let activation = r.f32s(1, "activation")?[0];
        let descriptor = r.f32s(channels, "descriptor")?;
        landmarks.push(Landmark {
            grid_x: x,
            grid_y: y,
            descriptor,
            activation,
            region_center_px: None,
        });
    }
    let landmarks = (has_landmarks == 1).then(|| {
        LandmarkSet {
            image_id: id.clone(),
            landmarks,
            grid_width: gw,
            grid_height: gh,
            stride,
        }
        .with_stride(stride)
    });
    Ok(ImageDescriptor {
        image_id: id,
        frame: (has_frame == 1).then_some(frame),
        holistic,
        landmarks,
    })
}

fn record_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(RECORDS_DIR).join(format!("{i:06}.ldsc"))
}

/// Writes the index directory. `manifest` must list the indexed images in
/// index order.
pub fn save_index(dir: impl AsRef<Path>, index: &MapIndex, manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.entries.len() != index.len()
        || manifest
            .entries
            .iter()
            .zip(&index.entries)
            .any(|(m, e)| m.id != e.image_id)
    {
        return Err(Error::config("manifest does not match index entries"));
    }
    let records = dir.join(RECORDS_DIR);
    fs::create_dir_all(&records).map_err(|e| Error::io(&records, e))?;
    let hdr = dir.join(HEADER_FILE);
    fs::write(&hdr, encode_index_header(index)?).map_err(|e| Error::io(&hdr, e))?;
    manifest.rebased().save(dir.join(MANIFEST_FILE))?;
    for (i, d) in index.entries.iter().enumerate() {
        let p = record_path(dir, i);
        fs::write(&p, encode_record(d, index.config.stride)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<(MapIndex, Manifest)> {
    let dir = dir.as_ref();
    let hdr_path = dir.join(HEADER_FILE);
    let bytes = fs::read(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let (config, count, channels) = decode_index_header(&hdr_path.display().to_string(), &bytes)?;
    let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
    if manifest.entries.len() != count {
        return Err(Error::dataset(format!(
            "index header lists {count} images, manifest copy has {}",
            manifest.entries.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for (i, m) in manifest.entries.iter().enumerate() {
        let p = record_path(dir, i);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let d = decode_record(&p.display().to_string(), &bytes)?;
        if d.image_id != m.id || d.holistic.len() != channels {
            return Err(Error::dataset(format!(
                "record {} does not match manifest entry {}",
                p.display(),
                m.id
            )));
        }
        if d.landmarks.is_some() != config.variant.uses_landmarks() {
            return Err(Error::dataset(format!(
                "record {} disagrees with index variant {}",
                p.display(),
                config.variant
            )));
        }
        entries.push(d);
    }
    Ok((MapIndex { config, entries }, manifest))
}
