//! NIMF single-channel rasters.
//!
//! Layout (little-endian): `b"NIMF"`, `u32` width, `u32` height, `u32`
//! channel id, then `width * height` 4-byte samples in row-major order.
//! Channels 0 and 1 carry `f32` NBR and NSV (NaN for ignored pixels);
//! channel 2 carries `u32` region ids (`0xFFFF_FFFF` for ignored pixels).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::FeatureImage;
use crate::regions::RegionMap;

pub const MAGIC: &[u8; 4] = b"NIMF";
pub const HEADER_LEN: usize = 16;
pub const IGNORED_REGION: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Channel {
    Nbr = 0,
    Nsv = 1,
    RegionId = 2,
}

impl Channel {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Channel::Nbr),
            1 => Some(Channel::Nsv),
            2 => Some(Channel::RegionId),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub channel: Channel,
}

fn encode(header: Header, samples: impl Iterator<Item = [u8; 4]>) -> Vec<u8> {
    let n = header.width as usize * header.height as usize;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&(header.channel as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s);
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::parse("NIMF raster", "missing NIMF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height) = (word(4), word(8));
    let channel = Channel::from_u32(word(12))
        .ok_or_else(|| Error::parse("NIMF raster", format!("unknown channel id {}", word(12))))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = 4 * width as usize * height as usize;
    if payload.len() != expected {
        return Err(Error::parse(
            "NIMF raster",
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok((
        Header {
            width,
            height,
            channel,
        },
        payload,
    ))
}

/// Encode one feature channel (NBR or NSV) as `f32` samples.
pub fn encode_feature(feats: &FeatureImage, channel: Channel) -> Vec<u8> {
    let field = match channel {
        Channel::Nbr => &feats.nbr,
        Channel::Nsv => &feats.nsv,
        Channel::RegionId => panic!("region ids are not a feature channel"),
    };
    let header = Header {
        width: feats.width,
        height: feats.height,
        channel,
    };
    encode(header, field.iter().map(|&v| (v as f32).to_le_bytes()))
}

pub fn decode_f32(bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let (header, payload) = decode(bytes)?;
    if header.channel == Channel::RegionId {
        return Err(Error::parse("NIMF raster", "expected a float channel"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn encode_regions(rm: &RegionMap) -> Vec<u8> {
    let header = Header {
        width: rm.width,
        height: rm.height,
        channel: Channel::RegionId,
    };
    encode(
        header,
        rm.region_id
            .iter()
            .map(|id| id.unwrap_or(IGNORED_REGION).to_le_bytes()),
    )
}

pub fn decode_regions(bytes: &[u8]) -> Result<RegionMap> {
    let (header, payload) = decode(bytes)?;
    if header.channel != Channel::RegionId {
        return Err(Error::parse("NIMF raster", "expected a region-id channel"));
    }
    let region_id: Vec<Option<u32>> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .map(|v| (v != IGNORED_REGION).then_some(v))
        .collect();
    RegionMap::from_ids(header.width, header.height, region_id)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write `<prefix>.nbr.nimf` and `<prefix>.nsv.nimf`.
pub fn write_features(prefix: &Path, feats: &FeatureImage) -> Result<()> {
    let base = prefix.as_os_str().to_string_lossy().into_owned();
    write_file(
        Path::new(&format!("{base}.nbr.nimf")),
        &encode_feature(feats, Channel::Nbr),
    )?;
    write_file(
        Path::new(&format!("{base}.nsv.nimf")),
        &encode_feature(feats, Channel::Nsv),
    )
}
