use std::fs::File;
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::codec::{decode_block_page, CoordColumn, EncodedPage};
use super::schema::{FieldKind, Sample, Schema, Value};
use super::{
    ByteRange, FileHeader, FormatError, GroupDescriptor, Result, FORMAT_VERSION, MAGIC, PREFIX_LEN,
};
use crate::index::MetadataEntry;

/// Delta-coded columns of a group's block page. Every `bytes` field with a
/// non-empty shape is treated as rows of `product(shape)` 4-byte channels, and
/// each channel becomes one strided column.
pub(crate) fn block_columns(schema: &Schema, group: &GroupDescriptor) -> Vec<CoordColumn> {
    let channels: Vec<usize> = schema
        .blob_fields()
        .map(|f| {
            if f.ty.shape.is_empty() {
                0
            } else {
                f.ty.elements()
            }
        })
        .collect();
    let mut cols = Vec::new();
    let mut base = 0usize;
    for lens in &group.blob_lens {
        for (&len, &ch) in lens.iter().zip(&channels) {
            let len = len as usize;
            let row = ch * 4;
            if ch > 0 && len >= 2 * row && len.is_multiple_of(row) {
                for c in 0..ch {
                    cols.push(CoordColumn {
                        offset: base + c * 4,
                        stride: row,
                        element_width: 4,
                        count: len / row,
                    });
                }
            }
            base += len;
        }
    }
    cols
}

fn read_prefix(file: &mut File) -> Result<(u16, u32)> {
    let mut prefix = [0u8; PREFIX_LEN];
    let mut got = 0;
    while got < PREFIX_LEN {
        let n = file.read(&mut prefix[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got >= 4 && prefix[..4] != MAGIC {
        return Err(FormatError::BadMagic(prefix[..4].try_into().unwrap()));
    }
    if got < PREFIX_LEN {
        return Err(FormatError::CorruptHeader(format!(
            "file prefix truncated at {got} bytes"
        )));
    }
    let version = u16::from_le_bytes([prefix[4], prefix[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok((
        version,
        u32::from_le_bytes(prefix[6..10].try_into().unwrap()),
    ))
}

/// Parses and validates the header of one slice file.
pub fn read_header(path: &Path) -> Result<FileHeader> {
    read_header_with_len(path).map(|(h, _)| h)
}

fn read_header_with_len(path: &Path) -> Result<(FileHeader, u64)> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let (_, header_len) = read_prefix(&mut file)?;
    let data_start = PREFIX_LEN as u64 + header_len as u64;
    if data_start > file_len {
        return Err(FormatError::CorruptHeader(format!(
            "header claims {header_len} bytes, file has {}",
            file_len - PREFIX_LEN as u64
        )));
    }
    let mut json = vec![0u8; header_len as usize];
    file.read_exact(&mut json)?;
    let header: FileHeader =
        serde_json::from_slice(&json).map_err(|e| FormatError::CorruptHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(header.version));
    }
    header.validate(Some(file_len - data_start))?;
    Ok((header, data_start))
}

/// Decoded pages of one group.
#[derive(Debug)]
pub struct DecodedGroup {
    pub scalar: Vec<u8>,
    pub block: Vec<u8>,
    row_offsets: Vec<usize>,
}

impl DecodedGroup {
    fn new(
        schema: &Schema,
        group: &GroupDescriptor,
        scalar: Vec<u8>,
        block: Vec<u8>,
    ) -> Result<Self> {
        let mut row_offsets = Vec::with_capacity(group.sample_count as usize);
        let mut pos = 0usize;
        for _ in 0..group.sample_count {
            row_offsets.push(pos);
            for f in schema.scalar_fields() {
                let len = match f.ty.kind.width() {
                    Some(w) => w * f.ty.elements(),
                    None => {
                        let bytes = scalar.get(pos..pos + 4).ok_or_else(|| {
                            FormatError::CorruptPage(
                                "scalar page ends inside a string length".into(),
                            )
                        })?;
                        4 + u32::from_le_bytes(bytes.try_into().unwrap()) as usize
                    }
                };
                pos += len;
                if pos > scalar.len() {
                    return Err(FormatError::CorruptPage(
                        "scalar page shorter than its rows".into(),
                    ));
                }
            }
        }
        Ok(Self {
            scalar,
            block,
            row_offsets,
        })
    }

    /// Rebuilds one sample from its scalar row and `[blob_start, blob_end)`.
    pub fn sample(
        &self,
        schema: &Schema,
        row: usize,
        blob: (u64, u64),
        blob_lens: &[u64],
    ) -> Result<Sample> {
        let (start, end) = blob;
        if start > end || end > self.block.len() as u64 {
            return Err(FormatError::RangeOutOfBounds(format!(
                "blob [{start}, {end}) outside block page of {} bytes",
                self.block.len()
            )));
        }
        if blob_lens.iter().sum::<u64>() != end - start {
            return Err(FormatError::RangeOutOfBounds(
                "field lengths do not cover the blob".into(),
            ));
        }
        let mut pos = *self
            .row_offsets
            .get(row)
            .ok_or_else(|| FormatError::RangeOutOfBounds(format!("row {row} not in group")))?;
        let mut blob_pos = start as usize;
        let mut lens = blob_lens.iter();
        let mut sample = Sample::new();
        for f in &schema.fields {
            let value = match f.ty.kind {
                FieldKind::Bytes => {
                    let len = *lens.next().unwrap() as usize;
                    let v = self.block[blob_pos..blob_pos + len].to_vec();
                    blob_pos += len;
                    Value::Bytes(v)
                }
                FieldKind::String => {
                    let len =
                        u32::from_le_bytes(self.scalar[pos..pos + 4].try_into().unwrap()) as usize;
                    let s = std::str::from_utf8(&self.scalar[pos + 4..pos + 4 + len])
                        .map_err(|e| FormatError::CorruptPage(e.to_string()))?
                        .to_owned();
                    pos += 4 + len;
                    Value::Str(s)
                }
                kind => {
                    let n = f.ty.elements();
                    let w = kind.width().unwrap();
                    let bytes = &self.scalar[pos..pos + n * w];
                    pos += n * w;
                    match kind {
                        FieldKind::Int32 => Value::Int32(
                            bytes
                                .chunks_exact(4)
                                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                                .collect(),
                        ),
                        FieldKind::Int64 => Value::Int64(
                            bytes
                                .chunks_exact(8)
                                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                                .collect(),
                        ),
                        FieldKind::Float32 => Value::Float32(
                            bytes
                                .chunks_exact(4)
                                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                                .collect(),
                        ),
                        _ => Value::Float64(
                            bytes
                                .chunks_exact(8)
                                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                                .collect(),
                        ),
                    }
                }
            };
            sample.insert(f.name.clone(), value);
        }
        Ok(sample)
    }
}

#[derive(Debug, Default)]
pub struct DecodeCounters {
    pub scalar_pages: AtomicU64,
    pub block_pages: AtomicU64,
}

/// One open slice. Reads go through positional I/O, so a `SliceFile` can be
/// shared by many workers without locking.
#[derive(Debug)]
pub struct SliceFile {
    pub path: PathBuf,
    pub header: FileHeader,
    data_start: u64,
    file: File,
    counters: Arc<DecodeCounters>,
}

impl SliceFile {
    pub fn open(path: &Path) -> Result<Self> {
        Self::open_with_counters(path, Arc::default())
    }

    fn open_with_counters(path: &Path, counters: Arc<DecodeCounters>) -> Result<Self> {
        let (header, data_start) = read_header_with_len(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            data_start,
            file: File::open(path)?,
            counters,
        })
    }

    fn read_page(&self, range: ByteRange) -> Result<EncodedPage> {
        let mut buf = vec![0u8; range.length as usize];
        self.file
            .read_exact_at(&mut buf, self.data_start + range.offset)?;
        EncodedPage::from_bytes(&buf)
    }

    pub fn decode_group(&self, group_id: u32) -> Result<DecodedGroup> {
        let group = self
            .header
            .group_index
            .get(group_id as usize)
            .ok_or_else(|| {
                FormatError::RangeOutOfBounds(format!("group {group_id} not in slice"))
            })?;
        let scalar = decode_block_page(&self.read_page(group.scalar_page)?, &[])?;
        self.counters.scalar_pages.fetch_add(1, Ordering::Relaxed);
        let cols = block_columns(&self.header.schema, group);
        let block = decode_block_page(&self.read_page(group.block_page)?, &cols)?;
        self.counters.block_pages.fetch_add(1, Ordering::Relaxed);
        if block.len() as u64 != group.block_raw_len() {
            return Err(FormatError::CorruptPage(
                "block page length disagrees with header".into(),
            ));
        }
        DecodedGroup::new(&self.header.schema, group, scalar, block)
    }

    pub fn read_sample(&self, group: &DecodedGroup, entry: &MetadataEntry) -> Result<Sample> {
        let desc = &self.header.group_index[entry.group_id as usize];
        let lens = desc.blob_lens.get(entry.row as usize).ok_or_else(|| {
            FormatError::RangeOutOfBounds(format!("row {} not in group", entry.row))
        })?;
        group.sample(
            &self.header.schema,
            entry.row as usize,
            (entry.sample_meta[0], entry.sample_meta[1]),
            lens,
        )
    }

    pub fn counters(&self) -> &DecodeCounters {
        &self.counters
    }
}

/// The last decoded group, keyed by `(slice, group)`.
type GroupCache = Mutex<Option<((u32, u32), Arc<DecodedGroup>)>>;

/// All slices of a local dataset, with a one-group decode cache.
#[derive(Debug)]
pub struct DatasetReader {
    slices: Vec<SliceFile>,
    cache: GroupCache,
    counters: Arc<DecodeCounters>,
}

impl DatasetReader {
    /// Opens a dataset from any of its slice files or from its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let first = if path.is_dir() {
            find_first_slice(path)?
        } else {
            path.to_path_buf()
        };
        let dir = first.parent().map(Path::to_path_buf).unwrap_or_default();
        let header = read_header(&first)?;
        let counters = Arc::new(DecodeCounters::default());
        let slices = header
            .slice_paths
            .iter()
            .map(|p| SliceFile::open_with_counters(&dir.join(p), counters.clone()))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in slices.iter().enumerate() {
            if s.header.slice_index as usize != i || s.header.schema != header.schema {
                return Err(FormatError::CorruptHeader(format!(
                    "slice {} is inconsistent",
                    s.path.display()
                )));
            }
        }
        Ok(Self {
            slices,
            cache: Mutex::new(None),
            counters,
        })
    }

    pub fn headers(&self) -> Vec<FileHeader> {
        self.slices.iter().map(|s| s.header.clone()).collect()
    }

    pub fn slices(&self) -> &[SliceFile] {
        &self.slices
    }

    pub fn schema(&self) -> &Schema {
        &self.slices[0].header.schema
    }

    pub fn scalar_page_decodes(&self) -> u64 {
        self.counters.scalar_pages.load(Ordering::Relaxed)
    }

    pub fn block_page_decodes(&self) -> u64 {
        self.counters.block_pages.load(Ordering::Relaxed)
    }

    pub fn clear_cache(&self) {
        *self.cache.lock().unwrap() = None;
    }

    pub fn read_sample(&self, entry: &MetadataEntry) -> Result<Sample> {
        let slice = self.slices.get(entry.shard_id as usize).ok_or_else(|| {
            FormatError::RangeOutOfBounds(format!("shard {} not in dataset", entry.shard_id))
        })?;
        let key = (entry.shard_id, entry.group_id);
        let cached = self
            .cache
            .lock()
            .unwrap()
            .as_ref()
            .filter(|(k, _)| *k == key)
            .map(|(_, g)| g.clone());
        let group = match cached {
            Some(g) => g,
            None => {
                let g = Arc::new(slice.decode_group(entry.group_id)?);
                *self.cache.lock().unwrap() = Some((key, g.clone()));
                g
            }
        };
        slice.read_sample(&group, entry)
    }
}

fn find_first_slice(dir: &Path) -> Result<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pcrecord"))
        .collect();
    found.sort();
    found.into_iter().next().ok_or_else(|| {
        FormatError::InvalidArgument(format!("no .pcrecord file in {}", dir.display()))
    })
}
