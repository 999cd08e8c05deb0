//! Float/uint conversion via the 2^23 exponent trick, and the packed buffer
//! codec.
//!
//! # Layout
//!
//! A buffer is a sequence of tiles of `tile_elems` logical elements. Inside a
//! tile, elements are grouped by `4 * v` where `v = 32 / b` values fit in a
//! word. Group `g` occupies words `4g .. 4g + 4` (four lanes). Element `r` of
//! a group goes to lane `r % 4`, slot `r / 4`, and slot `j` holds bits
//! `[32 - b*(j+1), 32 - b*j)` of the word, so slot 0 is the top `b` bits.
//! This is exactly what a four-wide vector unpacker produces when it shifts
//! each lane left by `j*b` and right by `32 - b`, then stores the four lanes
//! contiguously at `j * 4`.
//!
//! # Serialized form
//!
//! ```text
//! offset size  field
//!      0    4  magic "DAFP"
//!      4    1  version (1)
//!      5    1  bit-width (2, 4 or 8)
//!      6    2  reserved, zero
//!      8    8  logical length, u64 LE
//!     16    4  qmin, f32 LE
//!     20    4  qscale, f32 LE
//!     24    4  tile_elems, u32 LE
//!     28  4*n  words, u32 LE
//! ```

use crate::par::{self, Exec};
use crate::quant::{self, Bitwidth, QuantParams};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DAFP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
pub const DEFAULT_TILE_ELEMS: u32 = 256;

/// Words per lane group.
const LANES: usize = 4;

const EXP_2_23_BITS: u32 = 0x4B00_0000;
const TWO_POW_23: f32 = 8_388_608.0;
const MANTISSA_MASK: u32 = 0x007F_FFFF;

/// Converts `x < 2^23` to `f32` by OR-ing in the exponent of `2^23` and
/// subtracting `2^23`.
pub fn uint_bits_to_float(x: u32) -> Result<f32> {
    if x >= 1 << 23 {
        return Err(Error::invalid(format!("{x} does not fit in the 23-bit mantissa")));
    }
    Ok(uint_to_float_exact(x))
}

/// Inverse of [`uint_bits_to_float`]: add `2^23` and keep the mantissa bits.
pub fn float_to_uint_bits(v: f32) -> Result<u32> {
    if !(0.0..TWO_POW_23).contains(&v) || v.fract() != 0.0 {
        return Err(Error::invalid(format!("{v} is not an integer in [0, 2^23)")));
    }
    Ok(float_to_uint_exact(v))
}

#[inline]
pub(crate) fn uint_to_float_exact(x: u32) -> f32 {
    debug_assert!(x < 1 << 23);
    f32::from_bits(x | EXP_2_23_BITS) - TWO_POW_23
}

#[inline]
pub(crate) fn float_to_uint_exact(v: f32) -> u32 {
    debug_assert!((0.0..TWO_POW_23).contains(&v) && v.fract() == 0.0);
    (v + TWO_POW_23).to_bits() & MANTISSA_MASK
}

/// Position of one element inside a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutCoord {
    pub word_index: usize,
    /// Distance of the value's top bit from the word's most significant bit.
    pub bit_offset: u32,
}

fn values_per_word(b: Bitwidth) -> usize {
    32 / b.bits() as usize
}

fn check_tile(b: Bitwidth, tile_elems: u32) -> Result<()> {
    if !b.is_packed() {
        return Err(Error::invalid(format!("bit-width {b} cannot be packed")));
    }
    let group = LANES * values_per_word(b);
    if tile_elems == 0 || !(tile_elems as usize).is_multiple_of(group) {
        return Err(Error::invalid(format!(
            "tile_elems {tile_elems} must be a positive multiple of {group} at {b} bits"
        )));
    }
    Ok(())
}

pub fn layout_coord(e: usize, b: Bitwidth, tile_elems: u32) -> Result<LayoutCoord> {
    check_tile(b, tile_elems)?;
    if e >= tile_elems as usize {
        return Err(Error::invalid(format!("element {e} outside tile of {tile_elems}")));
    }
    let v = values_per_word(b);
    let group = e / (LANES * v);
    let r = e % (LANES * v);
    let lane = r % LANES;
    let slot = r / LANES;
    Ok(LayoutCoord {
        word_index: LANES * group + lane,
        bit_offset: b.bits() as u32 * slot as u32,
    })
}

/// Number of words holding `len` elements once padded to whole tiles.
pub fn word_count(len: u64, b: Bitwidth, tile_elems: u32) -> u64 {
    len.div_ceil(tile_elems as u64) * tile_elems as u64 * b.bits() as u64 / 32
}

/// Serialized size in bytes of a buffer holding `len` elements.
pub fn encoded_len(len: u64, b: Bitwidth, tile_elems: u32) -> u64 {
    HEADER_LEN as u64 + 4 * word_count(len, b, tile_elems)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBuffer {
    bitwidth: Bitwidth,
    logical_len: u64,
    qmin: f32,
    qscale: f32,
    tile_elems: u32,
    words: Vec<u32>,
}

impl PackedBuffer {
    pub fn bitwidth(&self) -> Bitwidth {
        self.bitwidth
    }

    pub fn logical_len(&self) -> u64 {
        self.logical_len
    }

    pub fn tile_elems(&self) -> u32 {
        self.tile_elems
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn qparams(&self) -> QuantParams {
        QuantParams {
            bitwidth: self.bitwidth,
            min: self.qmin,
            scale: self.qscale,
        }
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + 4 * self.words.len()
    }

    /// An all-zero buffer of the right shape: every element decodes to `qmin`.
    pub fn zeroed(len: u64, q: QuantParams, tile_elems: u32) -> Result<Self> {
        check_tile(q.bitwidth, tile_elems)?;
        Ok(Self {
            bitwidth: q.bitwidth,
            logical_len: len,
            qmin: q.min,
            qscale: q.scale,
            tile_elems,
            words: vec![0; word_count(len, q.bitwidth, tile_elems) as usize],
        })
    }

    /// Assembles a buffer from raw parts, checking the structural invariants.
    pub fn from_parts(
        bitwidth: Bitwidth,
        logical_len: u64,
        qmin: f32,
        qscale: f32,
        tile_elems: u32,
        words: Vec<u32>,
    ) -> Result<Self> {
        let buf = Self {
            bitwidth,
            logical_len,
            qmin,
            qscale,
            tile_elems,
            words,
        };
        buf.validate()?;
        Ok(buf)
    }

    fn validate(&self) -> Result<()> {
        check_tile(self.bitwidth, self.tile_elems).map_err(|e| Error::corrupt(e.to_string()))?;
        let expect = word_count(self.logical_len, self.bitwidth, self.tile_elems);
        if self.words.len() as u64 != expect {
            return Err(Error::corrupt(format!(
                "{} words for {} elements, expected {expect}",
                self.words.len(),
                self.logical_len
            )));
        }
        if !self.qmin.is_finite() || !self.qscale.is_finite() || self.qscale < 0.0 {
            return Err(Error::corrupt("quantization parameters are not finite"));
        }
        Ok(())
    }
}

/// Packs quantized values into the tiled, lane-interleaved layout.
pub fn pack(q_values: &[u32], qparams: &QuantParams, tile_elems: u32) -> Result<PackedBuffer> {
    pack_with(Exec::Parallel, q_values, qparams, tile_elems)
}

pub fn pack_with(
    exec: Exec,
    q_values: &[u32],
    qparams: &QuantParams,
    tile_elems: u32,
) -> Result<PackedBuffer> {
    let b = qparams.bitwidth;
    check_tile(b, tile_elems)?;
    let top = b.max_level();
    if let Some(i) = q_values.iter().position(|&v| v > top) {
        return Err(Error::invalid(format!(
            "value {} at index {i} does not fit in {b} bits",
            q_values[i]
        )));
    }
    let tile = tile_elems as usize;
    let tile_words = tile * b.bits() as usize / 32;
    let mut words = vec![0u32; word_count(q_values.len() as u64, b, tile_elems) as usize];
    if !q_values.is_empty() {
        par::zip_chunks(exec, q_values, tile, &mut words, tile_words, |_, vals, out| {
            pack_tile(vals, out, b)
        });
    }
    Ok(PackedBuffer {
        bitwidth: b,
        logical_len: q_values.len() as u64,
        qmin: qparams.min,
        qscale: qparams.scale,
        tile_elems,
        words,
    })
}

// `vals` may be short for the last tile; missing elements stay zero.
fn pack_tile(vals: &[u32], out: &mut [u32], b: Bitwidth) {
    let bits = b.bits() as u32;
    let v = values_per_word(b);
    let group = LANES * v;
    for (g, chunk) in vals.chunks(group).enumerate() {
        let mut lanes = [0u32; LANES];
        for (r, &val) in chunk.iter().enumerate() {
            let slot = (r / LANES) as u32;
            lanes[r % LANES] |= val << (32 - bits - bits * slot);
        }
        out[LANES * g..LANES * g + LANES].copy_from_slice(&lanes);
    }
}

/// Unpacks the first `logical_len` values.
pub fn unpack(buf: &PackedBuffer) -> Result<Vec<u32>> {
    unpack_with(Exec::Parallel, buf)
}

pub fn unpack_with(exec: Exec, buf: &PackedBuffer) -> Result<Vec<u32>> {
    buf.validate()?;
    let b = buf.bitwidth;
    let tile = buf.tile_elems as usize;
    let tile_words = tile * b.bits() as usize / 32;
    let len = buf.logical_len as usize;
    let mut out = vec![0u32; buf.words.len() * 32 / b.bits() as usize];
    if !out.is_empty() {
        par::zip_chunks(exec, &buf.words, tile_words, &mut out, tile, |_, words, vals| {
            unpack_tile(words, vals, b)
        });
    }
    out.truncate(len);
    Ok(out)
}

fn unpack_tile(words: &[u32], out: &mut [u32], b: Bitwidth) {
    let bits = b.bits() as u32;
    let v = values_per_word(b);
    for (g, quad) in words.chunks_exact(LANES).enumerate() {
        let quad: [u32; LANES] = quad.try_into().expect("lane group");
        let base = g * LANES * v;
        for j in 0..v {
            let dst = &mut out[base + j * LANES..base + j * LANES + LANES];
            for lane in 0..LANES {
                dst[lane] = (quad[lane] << (bits * j as u32)) >> (32 - bits);
            }
        }
    }
}

/// Quantizes and packs `x` at bit-width `b`.
pub fn compress(x: &[f32], b: Bitwidth, tile_elems: u32) -> Result<PackedBuffer> {
    let q = quant::compute_qparams(x, b)?;
    pack(&quant::quantize(x, &q)?, &q, tile_elems)
}

/// Unpacks and dequantizes in one pass.
pub fn decompress(buf: &PackedBuffer) -> Result<Vec<f32>> {
    let q = buf.qparams();
    Ok(unpack(buf)?
        .into_iter()
        .map(|v| uint_to_float_exact(v) * q.scale + q.min)
        .collect())
}

pub fn serialize(buf: &PackedBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.serialized_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(buf.bitwidth.bits());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&buf.logical_len.to_le_bytes());
    out.extend_from_slice(&buf.qmin.to_le_bytes());
    out.extend_from_slice(&buf.qscale.to_le_bytes());
    out.extend_from_slice(&buf.tile_elems.to_le_bytes());
    for w in &buf.words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<PackedBuffer> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::corrupt(format!("unsupported version {}", bytes[4])));
    }
    let bitwidth = Bitwidth::new(bytes[5])
        .ok()
        .filter(|b| b.is_packed())
        .ok_or_else(|| Error::corrupt(format!("bad bit-width {}", bytes[5])))?;
    if bytes[6..8] != [0, 0] {
        return Err(Error::corrupt("reserved bytes are not zero"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let logical_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let qmin = f32::from_bits(u32_at(16));
    let qscale = f32::from_bits(u32_at(20));
    let tile_elems = u32_at(24);
    check_tile(bitwidth, tile_elems).map_err(|e| Error::corrupt(e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    // Computed in u128 so a corrupted length cannot overflow.
    let tile = tile_elems as u128;
    let expect = ((logical_len as u128).div_ceil(tile) * tile * bitwidth.bits() as u128 / 32 * 4)
        .try_into()
        .ok()
        .filter(|&n: &u64| n == body.len() as u64)
        .ok_or_else(|| {
            Error::corrupt(format!(
                "{} payload bytes do not match {logical_len} elements",
                body.len()
            ))
        })?;
    debug_assert_eq!(expect as usize, body.len());
    let words = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PackedBuffer::from_parts(bitwidth, logical_len, qmin, qscale, tile_elems, words)
}
