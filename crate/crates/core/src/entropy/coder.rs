use crate::error::{BitstreamError, CodecError, Result};

/// Bits of precision of the frequency tables.
pub const PROB_BITS: u32 = 16;
/// Sum of every frequency table.
pub const TOTAL_FREQ: u32 = 1 << PROB_BITS;
/// Largest alphabet a table can hold while giving each symbol a frequency of
/// at least one.
pub const MAX_SUPPORT: usize = 1 << 15;

const TOP: u32 = 1 << 24;

/// Integer frequencies summing to [`TOTAL_FREQ`], each at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    freq: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes nonnegative masses; the rounding remainder goes to the
    /// largest entry.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let n = masses.len();
        if n == 0 || n > MAX_SUPPORT {
            return Err(CodecError::Config(format!("alphabet of {n} symbols outside [1, {MAX_SUPPORT}]")));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(CodecError::Config("masses must be finite and nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        let mut freq: Vec<u32> = if total > 0.0 {
            masses
                .iter()
                .map(|m| ((m / total * TOTAL_FREQ as f64).floor() as u32).max(1))
                .collect()
        } else {
            vec![1; n]
        };
        let argmax = |f: &[u32]| f.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|x| x.0).unwrap();
        let mut sum: u64 = freq.iter().map(|&f| f as u64).sum();
        while sum > TOTAL_FREQ as u64 {
            let i = argmax(&freq);
            let take = (sum - TOTAL_FREQ as u64).min(freq[i] as u64 - 1) as u32;
            freq[i] -= take;
            sum -= take as u64;
        }
        let i = argmax(&freq);
        freq[i] += (TOTAL_FREQ as u64 - sum) as u32;
        Self::from_freqs(freq)
    }

    pub fn from_freqs(freq: Vec<u32>) -> Result<Self> {
        let sum: u64 = freq.iter().map(|&f| f as u64).sum();
        if freq.is_empty() || freq.contains(&0) || sum != TOTAL_FREQ as u64 {
            return Err(CodecError::Config(format!(
                "frequency table must be positive and sum to {TOTAL_FREQ}, got sum {sum}"
            )));
        }
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { freq, cum })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.freq[s]
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freq
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Symbol whose cumulative interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cum[1..].partition_point(|&c| c <= target)
    }
}

/// Carry-propagating range encoder with a 32-bit range.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FreqTable, s: usize) {
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * table.cum(s) as u64;
        self.range = r * table.freq(s);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(BitstreamError::Truncated { offset: 0, needed: 5 }.into());
        }
        if bytes[0] != 0 {
            return Err(BitstreamError::Corrupt("range coder stream must start with a zero byte".into()).into());
        }
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 1,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next() as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = (self.code / r).min(TOTAL_FREQ - 1);
        let s = table.lookup(target);
        let base = r * table.cum(s);
        if self.code < base {
            return Err(BitstreamError::Corrupt("range decoder out of sync".into()).into());
        }
        self.code -= base;
        self.range = r * table.freq(s);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next() as u32;
        }
        Ok(s)
    }

    /// Bytes read beyond the end of the input; nonzero means the stream was
    /// truncated.
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.bytes.len())
    }
}

/// Range-codes `symbols`, each in `[min, max]`, with `table` indexed from
/// `min`.
pub fn encode_stream(symbols: &[i32], table: &FreqTable, min: i32, max: i32) -> Result<Vec<u8>> {
    if (max as i64 - min as i64 + 1) as usize != table.len() {
        return Err(CodecError::Config(format!("table of {} for bounds [{min}, {max}]", table.len())));
    }
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        if s < min || s > max {
            return Err(BitstreamError::OutOfSupport { symbol: s, min, max }.into());
        }
        enc.encode(table, (s - min) as usize);
    }
    Ok(enc.finish())
}

pub fn decode_stream(bytes: &[u8], table: &FreqTable, min: i32, n: usize) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(min + dec.decode(table)? as i32);
    }
    if dec.overrun() > 0 {
        return Err(BitstreamError::Truncated {
            offset: bytes.len(),
            needed: dec.overrun(),
        }
        .into());
    }
    Ok(out)
}
