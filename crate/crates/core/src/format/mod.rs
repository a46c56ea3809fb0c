//! The `.pcrecord` storage format.
//!
//! A dataset is written as one or more slice files. Every slice starts with
//! a fixed prefix followed by a JSON header and then the data section:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PCRC"
//! 4       2     version (u16 LE, currently 1)
//! 6       4     header length in bytes (u32 LE)
//! 10      n     header, UTF-8 JSON (see `FileHeader`)
//! 10+n    ...   data section: encoded pages, byte aligned
//! ```
//!
//! Page offsets in the header are relative to the start of the data section.
//! Each encoded page is laid out as
//!
//! ```text
//! 0   1  flags (bit0 outer_lz4, bit1 inner_delta, bit2 stored_raw)
//! 1   8  raw_len (u64 LE)
//! 9   8  payload_len (u64 LE)
//! 17  4  crc32 of payload (u32 LE)
//! 21  .. payload
//! ```
//!
//! Samples are grouped into fixed runs of `group_size`. A group owns one
//! scalar page (all non-`bytes` fields, row-major) and one block page (the
//! concatenated `bytes` fields of every sample in the group).

mod codec;
mod reader;
mod schema;
mod writer;

pub use codec::{
    decode_block_page, encode_block_page, xor_delta_decode, xor_delta_encode, CoordColumn,
    EncodedPage, PageFlags,
};
pub use reader::{read_header, DatasetReader, DecodeCounters, DecodedGroup, SliceFile};
pub use schema::{
    f32s_from_le, f32s_to_le, validate_schema, Field, FieldKind, FieldType, Sample, Schema, Value,
};
pub use writer::{
    slice_file_name, write_dataset, SliceSummary, WriteOptions, WrittenDataset, META_INDEX_NAME,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PCRC";
pub const FORMAT_VERSION: u16 = 1;
/// magic + version + header length.
pub const PREFIX_LEN: usize = 10;
pub const DEFAULT_GROUP_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("schema has no fields")]
    EmptySchema,
    #[error("duplicate field `{0}`")]
    DuplicateField(String),
    #[error("field `{0}` has an invalid shape")]
    BadShape(String),
    #[error("invalid field name `{0}`")]
    BadFieldName(String),
    #[error("column length {len} is not a multiple of element width {width}")]
    BadAlignment { len: usize, width: usize },
    #[error("coordinate column {index} addresses bytes outside the page")]
    ColumnOutOfRange { index: usize },
    #[error("page checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt page: {0}")]
    CorruptPage(String),
    #[error("sample does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("byte range out of bounds: {0}")]
    RangeOutOfBounds(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteRange {
    pub offset: u64,
    pub length: u64,
}

impl ByteRange {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// Location and layout of one group inside a slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDescriptor {
    /// Group id local to the slice.
    pub group_id: u32,
    pub sample_count: u32,
    /// Dataset-wide ordinal of the group's first sample.
    pub first_sample: u64,
    pub scalar_page: ByteRange,
    pub block_page: ByteRange,
    /// Byte length of every `bytes` field, per sample, in schema order.
    pub blob_lens: Vec<Vec<u64>>,
}

impl GroupDescriptor {
    /// `[blob_start, blob_end)` of each sample inside the decoded block page.
    pub fn blob_ranges(&self) -> Vec<(u64, u64)> {
        let mut start = 0;
        self.blob_lens
            .iter()
            .map(|lens| {
                let end = start + lens.iter().sum::<u64>();
                let r = (start, end);
                start = end;
                r
            })
            .collect()
    }

    pub fn block_raw_len(&self) -> u64 {
        self.blob_lens.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub version: u16,
    /// Bytes on disk across all slices of the dataset.
    pub total_size_bytes: u64,
    /// Largest encoded scalar page in this slice.
    pub scalar_page_size_bytes: u32,
    /// Largest encoded block page in this slice.
    pub block_page_size_bytes: u32,
    pub schema: Schema,
    pub slice_paths: Vec<String>,
    pub slice_index: u32,
    pub group_index: Vec<GroupDescriptor>,
}

impl FileHeader {
    pub fn sample_count(&self) -> u64 {
        self.group_index.iter().map(|g| g.sample_count as u64).sum()
    }

    pub fn data_len(&self) -> u64 {
        self.group_index
            .iter()
            .map(|g| g.scalar_page.end().max(g.block_page.end()))
            .max()
            .unwrap_or(0)
    }

    /// Serialized prefix + JSON body.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json =
            serde_json::to_vec(self).map_err(|e| FormatError::CorruptHeader(e.to_string()))?;
        let len = u32::try_from(json.len())
            .map_err(|_| FormatError::CorruptHeader("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    /// Checks the invariants that can be verified from one slice alone.
    /// `data_section_len` is the slice size minus prefix and header, when known.
    pub fn validate(&self, data_section_len: Option<u64>) -> Result<()> {
        if self.slice_paths.is_empty() {
            return Err(FormatError::CorruptHeader("no slice paths".into()));
        }
        if self.slice_index as usize >= self.slice_paths.len() {
            return Err(FormatError::CorruptHeader(
                "slice index out of range".into(),
            ));
        }
        validate_schema(&self.schema)
            .map_err(|e| FormatError::CorruptHeader(format!("schema: {e}")))?;
        let blob_fields = self.schema.blob_fields().count();
        for (i, g) in self.group_index.iter().enumerate() {
            if g.group_id as usize != i {
                return Err(FormatError::CorruptHeader(format!(
                    "group {i} has id {}",
                    g.group_id
                )));
            }
            if g.blob_lens.len() != g.sample_count as usize
                || g.blob_lens.iter().any(|l| l.len() != blob_fields)
            {
                return Err(FormatError::CorruptHeader(format!(
                    "group {i} blob table malformed"
                )));
            }
            if let Some(limit) = data_section_len {
                if g.scalar_page.end() > limit || g.block_page.end() > limit {
                    return Err(FormatError::CorruptHeader(format!(
                        "group {i} pages extend past end of slice"
                    )));
                }
            }
        }
        Ok(())
    }
}
