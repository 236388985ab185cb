//! Minimal FITS reader/writer for single-HDU 3D images.
//!
//! Supported subset: primary HDU only, `BITPIX` 16 or -32, `NAXIS = 3`,
//! optional `BSCALE`/`BZERO` on read. Header is a sequence of 80-byte ASCII
//! cards in 2880-byte blocks; data is big-endian and zero-padded to the next
//! 2880-byte boundary. Intensity volumes are written as 32-bit floats and
//! label volumes as 16-bit integers; neither writes `BSCALE`/`BZERO`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, ValueKind, Volume};

pub const BLOCK: usize = 2880;
const CARD: usize = 80;

/// Header card carrying the cluster count of a label volume.
const NCLUST: &str = "NCLUST";

/// Anything [`save_fits`] can write.
#[derive(Debug, Clone, Copy)]
pub enum FitsData<'a> {
    Volume(&'a Volume),
    Labels(&'a LabelVolume),
}

impl<'a> From<&'a Volume> for FitsData<'a> {
    fn from(v: &'a Volume) -> Self {
        FitsData::Volume(v)
    }
}

impl<'a> From<&'a LabelVolume> for FitsData<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        FitsData::Labels(v)
    }
}

/// Raw image as decoded from a FITS file, before interpretation.
#[derive(Debug, Clone)]
struct Image {
    dims: Dims,
    bitpix: i64,
    bscale: f64,
    bzero: f64,
    nclust: Option<usize>,
    raw: Vec<f64>,
}

fn card(keyword: &str, value: &str) -> String {
    let mut c = format!("{keyword:<8}= {value:>20}");
    c.truncate(CARD);
    format!("{c:<80}")
}

/// Encode a volume or label volume as a complete FITS byte stream.
pub fn encode<'a>(data: impl Into<FitsData<'a>>) -> Vec<u8> {
    let data = data.into();
    let (dims, bitpix) = match data {
        FitsData::Volume(v) => (v.dims(), -32),
        FitsData::Labels(l) => (l.dims(), 16),
    };
    let mut header = String::new();
    header.push_str(&card("SIMPLE", "T"));
    header.push_str(&card("BITPIX", &bitpix.to_string()));
    header.push_str(&card("NAXIS", "3"));
    header.push_str(&card("NAXIS1", &dims.nx.to_string()));
    header.push_str(&card("NAXIS2", &dims.ny.to_string()));
    header.push_str(&card("NAXIS3", &dims.nz.to_string()));
    if let FitsData::Labels(l) = data {
        header.push_str(&card(NCLUST, &l.k().to_string()));
    }
    header.push_str(&format!("{:<80}", "END"));

    let mut out = header.into_bytes();
    pad_to_block(&mut out, b' ');
    match data {
        FitsData::Volume(v) => {
            out.reserve(v.len() * 4);
            for &x in v.data() {
                out.extend_from_slice(&(x as f32).to_be_bytes());
            }
        }
        FitsData::Labels(l) => {
            out.reserve(l.labels().len() * 2);
            for &x in l.labels() {
                out.extend_from_slice(&(x as i16).to_be_bytes());
            }
        }
    }
    pad_to_block(&mut out, 0);
    out
}

fn pad_to_block(buf: &mut Vec<u8>, fill: u8) {
    let rem = buf.len() % BLOCK;
    if rem != 0 {
        buf.resize(buf.len() + BLOCK - rem, fill);
    }
}

/// Write a volume (32-bit float) or label volume (16-bit integer) to `path`.
pub fn save_fits<'a>(data: impl Into<FitsData<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(data)).map_err(|e| Error::io(path, e))
}

/// Read a 3D image from `path`, applying `BSCALE`/`BZERO` when present.
pub fn load_fits(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Read a label volume written by [`save_fits`]. Requires `BITPIX = 16`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let img = decode(bytes)?;
    let data: Vec<f64> = img
        .raw
        .iter()
        .map(|&r| img.bzero + img.bscale * r)
        .collect();
    Volume::with_kind(img.dims, data, ValueKind::Intensity)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume> {
    let img = decode(bytes)?;
    if img.bitpix != 16 {
        return Err(Error::Unsupported(format!(
            "label volumes must be BITPIX = 16, found {}",
            img.bitpix
        )));
    }
    if img.bscale != 1.0 || img.bzero != 0.0 {
        return Err(Error::Unsupported(
            "scaled label volumes (BSCALE/BZERO)".into(),
        ));
    }
    let mut labels = Vec::with_capacity(img.raw.len());
    for (i, &r) in img.raw.iter().enumerate() {
        if r < 0.0 {
            return Err(Error::validation(format!("negative label {r} at voxel {i}")));
        }
        labels.push(r as u16);
    }
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let k = img.nclust.unwrap_or(max + 1);
    LabelVolume::new(img.dims, labels, k, Vec::new())
}

fn malformed(card: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        card: card.trim_end().to_string(),
        reason: reason.into(),
    }
}

/// Split a card into keyword and value text (comment stripped), if it has a value.
fn parse_card(card: &str) -> (&str, Option<&str>) {
    let keyword = card[..8].trim_end();
    if &card[8..10] != "= " {
        return (keyword, None);
    }
    let rest = &card[10..];
    let mut in_string = false;
    let mut end = rest.len();
    for (i, ch) in rest.char_indices() {
        match ch {
            '\'' => in_string = !in_string,
            '/' if !in_string => {
                end = i;
                break;
            }
            _ => {}
        }
    }
    (keyword, Some(rest[..end].trim()))
}

fn int_value(card: &str, value: Option<&str>) -> Result<i64> {
    value
        .and_then(|v| v.parse::<i64>().ok())
        .ok_or_else(|| malformed(card, "expected an integer value"))
}

fn real_value(card: &str, value: Option<&str>) -> Result<f64> {
    value
        .map(|v| v.replace(['D', 'd'], "E"))
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(card, "expected a real value"))
}

fn decode(bytes: &[u8]) -> Result<Image> {
    let mut bitpix = None;
    let mut naxis = None;
    let mut axes: [Option<i64>; 3] = [None; 3];
    let mut bscale = 1.0;
    let mut bzero = 0.0;
    let mut nclust = None;
    let mut header_end = None;

    for (i, chunk) in bytes.chunks(CARD).enumerate() {
        if chunk.len() < CARD {
            break;
        }
        if !chunk.iter().all(|b| (0x20..=0x7e).contains(b)) {
            let shown = String::from_utf8_lossy(chunk).into_owned();
            return Err(malformed(&shown, "non-ASCII bytes in header"));
        }
        // ASCII checked above.
        let text = std::str::from_utf8(chunk).expect("ascii card");
        let (keyword, value) = parse_card(text);

        if i == 0 {
            if keyword != "SIMPLE" || value != Some("T") {
                return Err(malformed(text, "first card must be SIMPLE = T"));
            }
            continue;
        }
        match keyword {
            "END" => {
                header_end = Some((i + 1) * CARD);
                break;
            }
            "BITPIX" => bitpix = Some(int_value(text, value)?),
            "NAXIS" => naxis = Some(int_value(text, value)?),
            "NAXIS1" | "NAXIS2" | "NAXIS3" => {
                let n = int_value(text, value)?;
                if n <= 0 {
                    return Err(malformed(text, "axis length must be positive"));
                }
                let axis = (keyword.as_bytes()[5] - b'1') as usize;
                axes[axis] = Some(n);
            }
            "BSCALE" => bscale = real_value(text, value)?,
            "BZERO" => bzero = real_value(text, value)?,
            NCLUST => {
                let n = int_value(text, value)?;
                if n <= 0 {
                    return Err(malformed(text, "cluster count must be positive"));
                }
                nclust = Some(n as usize);
            }
            _ => {}
        }
    }

    let header_end = header_end.ok_or_else(|| malformed("END", "header has no END card"))?;
    let bitpix = bitpix.ok_or_else(|| malformed("BITPIX", "required card missing"))?;
    if bitpix != 16 && bitpix != -32 {
        return Err(Error::Unsupported(format!(
            "BITPIX = {bitpix} (only 16 and -32 are supported)"
        )));
    }
    let naxis = naxis.ok_or_else(|| malformed("NAXIS", "required card missing"))?;
    if naxis != 3 {
        return Err(Error::Dimensionality(naxis));
    }
    let mut dims = [0usize; 3];
    for (i, a) in axes.iter().enumerate() {
        dims[i] = a.ok_or_else(|| malformed(&format!("NAXIS{}", i + 1), "required card missing"))?
            as usize;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2]);

    let data_start = header_end.div_ceil(BLOCK) * BLOCK;
    let width = (bitpix.unsigned_abs() / 8) as usize;
    let needed = dims.len() * width;
    let data = bytes
        .get(data_start..data_start + needed)
        .ok_or_else(|| {
            malformed(
                "NAXIS3",
                format!(
                    "data unit truncated: need {needed} bytes after header, file has {}",
                    bytes.len().saturating_sub(data_start)
                ),
            )
        })?;

    let raw: Vec<f64> = match bitpix {
        16 => data
            .chunks_exact(2)
            .map(|b| i16::from_be_bytes([b[0], b[1]]) as f64)
            .collect(),
        _ => data
            .chunks_exact(4)
            .map(|b| f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    };

    Ok(Image {
        dims,
        bitpix,
        bscale,
        bzero,
        nclust,
        raw,
    })
}
