//! Binary image, mask and id-map files.
//!
//! * `SGFI`: feature image, u32 width/height/channels, f32 payload.
//! * `SGMK`: u32 W/H/M then M bitmaps of `ceil(W*H/8)` bytes, MSB-first.
//! * `SGPM` / `SGIM`: patch / instance id maps, u32 W/H then i32 ids.
//!
//! All integers and floats are little-endian, pixels row-major.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::raster::FeatureImage;

pub const FEATURE_IMAGE_MAGIC: &[u8; 4] = b"SGFI";
pub const MASK_MAGIC: &[u8; 4] = b"SGMK";
pub const PATCH_MAP_MAGIC: &[u8; 4] = b"SGPM";
pub const INSTANCE_MAP_MAGIC: &[u8; 4] = b"SGIM";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::parse(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_feature_image(img: &FeatureImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(FEATURE_IMAGE_MAGIC);
    out.extend_from_slice(&img.width.to_le_bytes());
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&(img.channels as u32).to_le_bytes());
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_image(bytes: &[u8]) -> Result<FeatureImage> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_IMAGE_MAGIC)?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    let channels = r.u32("channels")? as usize;
    let count = width as usize * height as usize * channels;
    let payload = r.take(count * 4, "payload")?;
    r.finish()?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(FeatureImage { width, height, channels, data })
}

pub fn write_feature_image(path: &Path, img: &FeatureImage) -> Result<()> {
    std::fs::write(path, encode_feature_image(img))?;
    Ok(())
}

pub fn read_feature_image(path: &Path) -> Result<FeatureImage> {
    decode_feature_image(&std::fs::read(path)?)
}

/// Binary PPM (P6) of the first three channels clamped to `[0, 1]`.
pub fn encode_ppm(img: &FeatureImage) -> Result<Vec<u8>> {
    if img.channels < 3 {
        return Err(Error::Contract(format!("PPM export needs 3 channels, image has {}", img.channels)));
    }
    let mut out = Vec::new();
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    for p in 0..img.pixel_count() {
        for &v in &img.pixel(p)[..3] {
            out.push(to_u8(v));
        }
    }
    Ok(out)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_masks(set: &MaskSet) -> Vec<u8> {
    let n = set.pixel_count();
    let stride = n.div_ceil(8);
    let mut out = Vec::with_capacity(16 + stride * set.masks.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&set.width.to_le_bytes());
    out.extend_from_slice(&set.height.to_le_bytes());
    out.extend_from_slice(&(set.masks.len() as u32).to_le_bytes());
    for m in &set.masks {
        let mut bytes = vec![0u8; stride];
        for (p, &b) in m.iter().enumerate() {
            if b {
                bytes[p / 8] |= 0x80 >> (p % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_masks(view_id: u32, bytes: &[u8]) -> Result<MaskSet> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    let count = r.u32("mask count")? as usize;
    let n = width as usize * height as usize;
    let stride = n.div_ceil(8);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let raw = r.take(stride, &format!("mask {i}"))?;
        masks.push((0..n).map(|p| raw[p / 8] & (0x80 >> (p % 8)) != 0).collect());
    }
    r.finish()?;
    MaskSet::new(view_id, width, height, masks)
}

pub fn write_masks(path: &Path, set: &MaskSet) -> Result<()> {
    std::fs::write(path, encode_masks(set))?;
    Ok(())
}

pub fn read_masks(path: &Path, view_id: u32) -> Result<MaskSet> {
    decode_masks(view_id, &std::fs::read(path)?)
}

/// Integer id map (patch or instance ids, `-1` for background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<i32>,
}

pub fn encode_id_map(magic: &[u8; 4], map: &IdMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.ids.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&map.width.to_le_bytes());
    out.extend_from_slice(&map.height.to_le_bytes());
    for &id in &map.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_id_map(magic: &[u8; 4], bytes: &[u8]) -> Result<IdMap> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    let n = width as usize * height as usize;
    let raw = r.take(4 * n, "ids")?;
    r.finish()?;
    let ids = raw.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(IdMap { width, height, ids })
}

pub fn write_id_map(path: &Path, magic: &[u8; 4], map: &IdMap) -> Result<()> {
    std::fs::write(path, encode_id_map(magic, map))?;
    Ok(())
}

pub fn read_id_map(path: &Path, magic: &[u8; 4]) -> Result<IdMap> {
    decode_id_map(magic, &std::fs::read(path)?)
}
