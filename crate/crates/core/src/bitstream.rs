//! Fixed-rate latent bitstream: exact rate accounting plus a small
//! self-describing container for the quantized bottleneck.
//!
//! Layout (bit-exact): bytes 0-3 magic "SCMP"; byte 4 version = 1;
//! bytes 5-8 image height H (u32 big-endian); bytes 9-12 image width W;
//! byte 13 F; byte 14 ld(L); bytes 15.. index payload, ld(L) bits per
//! element MSB-first in (height, width, feature) row-major order, last byte
//! zero-padded in its low bits.

use ndarray::Array3;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SCMP";
pub const VERSION: u8 = 1;
pub const DEFAULT_DOWNSAMPLING: usize = 16;

/// Quantized bottleneck: level indices on the (H/d, W/d, F) grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    /// Original image height in pixels.
    pub image_height: usize,
    /// Original image width in pixels.
    pub image_width: usize,
    /// Level indices, shape (H/d, W/d, F).
    pub indices: Array3<u16>,
}

impl LatentCode {
    pub fn feature_maps(&self) -> usize {
        self.indices.dim().2
    }

    pub fn grid_height(&self) -> usize {
        self.indices.dim().0
    }

    pub fn grid_width(&self) -> usize {
        self.indices.dim().1
    }
}

/// d = s^n, the overall dimension reduction of the encoder.
pub fn downsampling_factor(stride: usize, strided_layers: u32) -> usize {
    stride.pow(strided_layers)
}

/// Latent space information S in bits: H·W·F·ld(L)/d².
/// Fractional when L is not a power of two.
pub fn latent_information_bits(h: usize, w: usize, f: usize, l: usize, d: usize) -> Result<f64> {
    if h % d != 0 || w % d != 0 {
        return Err(Error::Config(format!(
            "image dims {h}x{w} not divisible by downsampling factor {d}"
        )));
    }
    if l < 2 {
        return Err(Error::Config("L must be at least 2".into()));
    }
    Ok((h / d) as f64 * (w / d) as f64 * f as f64 * (l as f64).log2())
}

/// Bitrate R in bit per pixel: F·ld(L)/d². Independent of image size.
pub fn bitrate_bpp(f: usize, l: usize, d: usize) -> f64 {
    f as f64 * (l as f64).log2() / (d * d) as f64
}

fn bits_per_index(l: usize) -> Result<u8> {
    if l < 2 || !l.is_power_of_two() {
        return Err(Error::Config(format!(
            "bitstream serialization needs a power-of-two level count, got {l}"
        )));
    }
    Ok(l.trailing_zeros() as u8)
}

/// Pack a latent code into the container format above.
pub fn serialize_bitstream(code: &LatentCode, l: usize) -> Result<Vec<u8>> {
    let bits = bits_per_index(l)?;
    let (gh, gw, f) = code.indices.dim();
    if f > u8::MAX as usize {
        return Err(Error::Config(format!("F={f} does not fit the header byte")));
    }
    if let Some(&bad) = code.indices.iter().find(|&&i| i as usize >= l) {
        return Err(Error::Format(format!("index {bad} out of range for L={l}")));
    }
    let payload_bits = gh * gw * f * bits as usize;
    let mut out = Vec::with_capacity(15 + payload_bits.div_ceil(8));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(code.image_height as u32).to_be_bytes());
    out.extend_from_slice(&(code.image_width as u32).to_be_bytes());
    out.push(f as u8);
    out.push(bits);

    let mut acc: u32 = 0;
    let mut nbits: u8 = 0;
    for h in 0..gh {
        for w in 0..gw {
            for fi in 0..f {
                let idx = code.indices[[h, w, fi]] as u32;
                acc = (acc << bits) | idx;
                nbits += bits;
                while nbits >= 8 {
                    nbits -= 8;
                    out.push((acc >> nbits) as u8);
                    acc &= (1 << nbits) - 1;
                }
            }
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Inverse of [`serialize_bitstream`] with the default downsampling factor.
pub fn deserialize_bitstream(bytes: &[u8]) -> Result<(LatentCode, usize)> {
    deserialize_bitstream_with(bytes, DEFAULT_DOWNSAMPLING)
}

/// Parse the container; returns the code and the level count L.
/// `d` must match the encoder the stream was produced with.
pub fn deserialize_bitstream_with(bytes: &[u8], d: usize) -> Result<(LatentCode, usize)> {
    if bytes.len() < 15 {
        return Err(Error::Format(format!(
            "bitstream truncated: {} bytes, header needs 15",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic bytes, not an SCMP bitstream".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported bitstream version {}",
            bytes[4]
        )));
    }
    let h = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let f = bytes[13] as usize;
    let bits = bytes[14];
    if bits == 0 || bits > 15 {
        return Err(Error::Format(format!("invalid bits-per-index {bits}")));
    }
    if d == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::Format(format!(
            "image dims {h}x{w} not divisible by downsampling factor {d}"
        )));
    }
    let (gh, gw) = (h / d, w / d);
    let n_elems = gh * gw * f;
    let payload_bits = n_elems * bits as usize;
    let need = 15 + payload_bits.div_ceil(8);
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "bitstream truncated: payload needs {} bytes, got {}",
            need,
            bytes.len()
        )));
    }
    let mut indices = Array3::zeros((gh, gw, f));
    let mut acc: u32 = 0;
    let mut nbits: u8 = 0;
    let mut pos = 15usize;
    for hi in 0..gh {
        for wi in 0..gw {
            for fi in 0..f {
                while nbits < bits {
                    acc = (acc << 8) | bytes[pos] as u32;
                    pos += 1;
                    nbits += 8;
                }
                nbits -= bits;
                indices[[hi, wi, fi]] = ((acc >> nbits) & ((1 << bits) - 1)) as u16;
                acc &= (1 << nbits) - 1;
            }
        }
    }
    Ok((
        LatentCode {
            image_height: h,
            image_width: w,
            indices,
        },
        1usize << bits,
    ))
}

/// Exact payload bit-length of a serialized code, before byte padding.
pub fn payload_bits(bytes_len: usize) -> usize {
    bytes_len.saturating_sub(15) * 8
}
