//! Page codec: XOR-delta on coordinate columns, then LZ4 over the page.

use bitflags::bitflags;

use super::{FormatError, Result};

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct PageFlags: u8 {
        const OUTER_LZ4 = 0b001;
        const INNER_DELTA = 0b010;
        const STORED_RAW = 0b100;
    }
}

const PAGE_PREFIX: usize = 1 + 8 + 8 + 4;

/// A strided run of fixed-width elements inside a page.
///
/// Element `i` lives at `offset + i * stride` and is `element_width` bytes
/// long. Delta coding XORs each element with its predecessor in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordColumn {
    pub offset: usize,
    pub stride: usize,
    pub element_width: usize,
    pub count: usize,
}

impl CoordColumn {
    fn fits(&self, len: usize) -> bool {
        if self.count == 0 {
            return true;
        }
        if self.element_width == 0 || self.stride < self.element_width {
            return false;
        }
        (self.count - 1)
            .checked_mul(self.stride)
            .and_then(|x| x.checked_add(self.offset))
            .and_then(|x| x.checked_add(self.element_width))
            .is_some_and(|end| end <= len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPage {
    pub flags: PageFlags,
    pub raw_len: u64,
    pub payload: Vec<u8>,
    pub checksum: u32,
}

impl EncodedPage {
    pub fn encoded_len(&self) -> usize {
        PAGE_PREFIX + self.payload.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.push(self.flags.bits());
        out.extend_from_slice(&self.raw_len.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < PAGE_PREFIX {
            return Err(FormatError::CorruptPage(format!(
                "page prefix truncated ({} bytes)",
                buf.len()
            )));
        }
        let flags = PageFlags::from_bits(buf[0])
            .ok_or_else(|| FormatError::CorruptPage(format!("unknown flags {:#04x}", buf[0])))?;
        let raw_len = u64::from_le_bytes(buf[1..9].try_into().unwrap());
        let payload_len = u64::from_le_bytes(buf[9..17].try_into().unwrap());
        let checksum = u32::from_le_bytes(buf[17..21].try_into().unwrap());
        let body = &buf[PAGE_PREFIX..];
        if (body.len() as u64) < payload_len {
            return Err(FormatError::CorruptPage(format!(
                "payload truncated: {} of {payload_len} bytes",
                body.len()
            )));
        }
        Ok(Self {
            flags,
            raw_len,
            payload: body[..payload_len as usize].to_vec(),
            checksum,
        })
    }
}

fn check_alignment(len: usize, width: usize) -> Result<()> {
    if !matches!(width, 4 | 8) || !len.is_multiple_of(width) {
        return Err(FormatError::BadAlignment { len, width });
    }
    Ok(())
}

/// Element `i > 0` becomes `x[i] ^ x[i-1]`; element 0 is kept.
pub fn xor_delta_encode(column: &[u8], element_width: usize) -> Result<Vec<u8>> {
    check_alignment(column.len(), element_width)?;
    let mut out = column.to_vec();
    for i in (element_width..out.len()).rev() {
        out[i] ^= column[i - element_width];
    }
    Ok(out)
}

pub fn xor_delta_decode(encoded: &[u8], element_width: usize) -> Result<Vec<u8>> {
    check_alignment(encoded.len(), element_width)?;
    let mut out = encoded.to_vec();
    for i in element_width..out.len() {
        out[i] ^= out[i - element_width];
    }
    Ok(out)
}

fn delta_column_in_place(buf: &mut [u8], col: &CoordColumn) {
    for i in (1..col.count).rev() {
        let cur = col.offset + i * col.stride;
        let prev = cur - col.stride;
        for k in 0..col.element_width {
            buf[cur + k] ^= buf[prev + k];
        }
    }
}

fn undelta_column_in_place(buf: &mut [u8], col: &CoordColumn) {
    for i in 1..col.count {
        let cur = col.offset + i * col.stride;
        let prev = cur - col.stride;
        for k in 0..col.element_width {
            buf[cur + k] ^= buf[prev + k];
        }
    }
}

/// Applies XOR-delta to `coordinate_columns`, then LZ4 over the whole page.
/// Falls back to storing the delta-coded bytes when LZ4 would not shrink them.
pub fn encode_block_page(raw: &[u8], coordinate_columns: &[CoordColumn]) -> Result<EncodedPage> {
    for (index, col) in coordinate_columns.iter().enumerate() {
        if !col.fits(raw.len()) {
            return Err(FormatError::ColumnOutOfRange { index });
        }
    }
    let mut flags = PageFlags::empty();
    let mut body = raw.to_vec();
    let active: Vec<&CoordColumn> = coordinate_columns.iter().filter(|c| c.count > 1).collect();
    if !active.is_empty() {
        flags |= PageFlags::INNER_DELTA;
        for col in &active {
            delta_column_in_place(&mut body, col);
        }
    }
    let compressed = if body.is_empty() {
        None
    } else {
        Some(lz4_flex::block::compress(&body))
    };
    let payload = match compressed {
        Some(c) if c.len() < body.len() => {
            flags |= PageFlags::OUTER_LZ4;
            c
        }
        _ => {
            flags |= PageFlags::STORED_RAW;
            body
        }
    };
    let checksum = crc32fast::hash(&payload);
    Ok(EncodedPage {
        flags,
        raw_len: raw.len() as u64,
        payload,
        checksum,
    })
}

/// Exact inverse of [`encode_block_page`] given the same columns.
pub fn decode_block_page(
    page: &EncodedPage,
    coordinate_columns: &[CoordColumn],
) -> Result<Vec<u8>> {
    let computed = crc32fast::hash(&page.payload);
    if computed != page.checksum {
        return Err(FormatError::ChecksumMismatch {
            stored: page.checksum,
            computed,
        });
    }
    let raw_len = usize::try_from(page.raw_len)
        .map_err(|_| FormatError::CorruptPage("raw length overflows".into()))?;
    let lz4 = page.flags.contains(PageFlags::OUTER_LZ4);
    if lz4 == page.flags.contains(PageFlags::STORED_RAW) {
        return Err(FormatError::CorruptPage(format!(
            "inconsistent flags {:?}",
            page.flags
        )));
    }
    let mut body = if lz4 {
        lz4_flex::block::decompress(&page.payload, raw_len)
            .map_err(|e| FormatError::CorruptPage(e.to_string()))?
    } else {
        page.payload.clone()
    };
    if body.len() != raw_len {
        return Err(FormatError::CorruptPage(format!(
            "decoded {} bytes, expected {raw_len}",
            body.len()
        )));
    }
    if page.flags.contains(PageFlags::INNER_DELTA) {
        for (index, col) in coordinate_columns.iter().enumerate() {
            if !col.fits(body.len()) {
                return Err(FormatError::ColumnOutOfRange { index });
            }
        }
        for col in coordinate_columns.iter().rev().filter(|c| c.count > 1) {
            undelta_column_in_place(&mut body, col);
        }
    }
    Ok(body)
}
