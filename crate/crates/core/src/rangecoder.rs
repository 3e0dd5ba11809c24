//! Byte-oriented range coder with 32-bit state and 16-bit probabilities.
//!
//! Carries are propagated straight into the already-written output, so the
//! coded interval never has to be truncated. The encoder emits one byte per
//! renormalization shift plus a single flush byte; the decoder reads four
//! bytes up front, so the final three bytes of the code value are implicit
//! zeros. A decoder that needs more than those three implicit bytes has been
//! handed a truncated stream.

use std::borrow::Borrow;

use crate::entropy::CdfTable;
use crate::{Error, Result};

const TOP: u32 = 1 << 24;
const PROB_BITS: u32 = 16;
const IMPLICIT_TAIL: usize = 3;

/// Coded bytes plus the number of symbols they hold. The symbol count is
/// carried by the container, not inside the bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedStream {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    fn propagate_carry(&mut self) {
        if self.low >> 32 == 0 {
            return;
        }
        self.low &= u32::MAX as u64;
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the first output byte");
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & u32::MAX as u64;
            self.range <<= 8;
        }
    }

    /// Codes the sub-interval `[cum, cum + freq)` of a 2^16 total.
    pub fn encode_freq(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PROB_BITS);
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.propagate_carry();
        self.normalize();
    }

    pub fn encode_raw32(&mut self, v: u32) {
        self.encode_freq(v >> 16, 1);
        self.encode_freq(v & 0xFFFF, 1);
    }

    pub fn encode_symbol(&mut self, symbol: i32, table: &CdfTable) {
        let bin = table.bin_of(symbol);
        let (cum, freq) = table.bin(bin);
        self.encode_freq(cum, freq);
        if table.is_escape(bin) {
            self.encode_raw32(symbol as u32);
        }
    }

    /// Emits the top byte of the smallest multiple of 2^24 inside the final
    /// interval; the three bytes below it are zero.
    pub fn finish(mut self) -> Vec<u8> {
        let mask = (TOP - 1) as u64;
        self.low = (self.low + mask) & !mask;
        self.propagate_carry();
        self.out.push((self.low >> 24) as u8);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    implicit: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            implicit: 0,
            code: 0,
            range: u32::MAX,
        };
        if bytes.is_empty() {
            return Err(Error::Truncated("empty range-coded stream".into()));
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.bytes.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else if self.implicit < IMPLICIT_TAIL {
            self.implicit += 1;
            Ok(0)
        } else {
            Err(Error::Truncated(format!(
                "range decoder ran past {} bytes",
                self.bytes.len()
            )))
        }
    }

    /// Decodes one sub-interval: `find` maps a target in `[0, 2^16)` to
    /// `(index, cum, freq)`.
    fn decode_with(&mut self, find: impl FnOnce(u32) -> (usize, u32, u32)) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = (self.code / r).min((1 << PROB_BITS) - 1);
        let (idx, cum, freq) = find(target);
        let offset = r * cum;
        let width = r * freq;
        if self.code < offset || self.code - offset >= width {
            return Err(Error::Corrupt("range decoder left the coded interval".into()));
        }
        self.code -= offset;
        self.range = width;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(idx)
    }

    pub fn decode_raw32(&mut self) -> Result<u32> {
        let hi = self.decode_with(|t| (t as usize, t, 1))? as u32;
        let lo = self.decode_with(|t| (t as usize, t, 1))? as u32;
        Ok((hi << 16) | lo)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let bin = self.decode_with(|t| {
            let b = table.find(t);
            let (cum, freq) = table.bin(b);
            (b, cum, freq)
        })?;
        if !table.is_escape(bin) {
            return Ok(table.s_min + bin as i32);
        }
        let v = self.decode_raw32()? as i32;
        if table.bin_of(v) != bin {
            return Err(Error::Corrupt(format!("escape value {v} does not belong to bin {bin}")));
        }
        Ok(v)
    }

    /// Checks that every byte was consumed, no more and no less.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() || self.implicit != IMPLICIT_TAIL {
            return Err(Error::Corrupt(format!(
                "range-coded stream has {} unread bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` under `tables[i]`. Symbols on or past a table's end
/// bins are sent through that escape bin followed by their raw 32-bit value.
pub fn encode_symbols<B: Borrow<CdfTable>>(symbols: &[i32], tables: &[B]) -> Result<CodedStream> {
    if symbols.len() != tables.len() {
        return Err(Error::Shape(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(s, t.borrow());
    }
    Ok(CodedStream {
        bytes: enc.finish(),
        symbol_count: symbols.len(),
    })
}

/// Exact inverse of [`encode_symbols`] given the same ordered tables.
pub fn decode_symbols<B: Borrow<CdfTable>>(stream: &CodedStream, tables: &[B]) -> Result<Vec<i32>> {
    if stream.symbol_count != tables.len() {
        return Err(Error::Shape(format!(
            "stream holds {} symbols but {} tables were given",
            stream.symbol_count,
            tables.len()
        )));
    }
    let mut dec = RangeDecoder::new(&stream.bytes)?;
    let out = tables
        .iter()
        .map(|t| dec.decode_symbol(t.borrow()))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
