use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::encode_block_page;
use super::reader::block_columns;
use super::schema::{validate_schema, Sample, Schema};
use super::{
    ByteRange, FileHeader, FormatError, GroupDescriptor, Result, DEFAULT_GROUP_SIZE,
    FORMAT_VERSION, PREFIX_LEN,
};

pub const META_INDEX_NAME: &str = "meta_index.json";

#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub slice_count: usize,
    pub group_size: usize,
    pub stem: String,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            slice_count: 1,
            group_size: DEFAULT_GROUP_SIZE,
            stem: "dataset".into(),
        }
    }
}

/// Per-slice summary, also the entry type of the meta-index object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub name: String,
    pub samples: u64,
    pub bytes: u64,
    pub crc32: u32,
    /// Full slice header so an index can be built without touching the slice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<FileHeader>,
}

#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub headers: Vec<FileHeader>,
    pub slices: Vec<SliceSummary>,
}

impl WrittenDataset {
    pub fn total_bytes(&self) -> u64 {
        self.slices.iter().map(|s| s.bytes).sum()
    }
}

/// `<stem>.pcrecord` for the first slice, `<stem>.pcrecordN` after that.
pub fn slice_file_name(stem: &str, index: usize) -> String {
    if index == 0 {
        format!("{stem}.pcrecord")
    } else {
        format!("{stem}.pcrecord{index}")
    }
}

struct PendingGroup {
    sample_count: u32,
    first_sample: u64,
    scalar: ByteRange,
    block: ByteRange,
    blob_lens: Vec<Vec<u64>>,
}

fn encode_group(
    schema: &Schema,
    rows: &[Sample],
    first_sample: u64,
    tmp: &mut BufWriter<File>,
    tmp_len: &mut u64,
) -> Result<PendingGroup> {
    let mut scalar_raw = Vec::new();
    let mut block_raw = Vec::new();
    let mut blob_lens = Vec::with_capacity(rows.len());
    for row in rows {
        let mut lens = Vec::new();
        for f in &schema.fields {
            let v = &row.values[&f.name];
            match v.as_bytes() {
                Some(b) => {
                    block_raw.extend_from_slice(b);
                    lens.push(b.len() as u64);
                }
                None => v.write_le(&mut scalar_raw),
            }
        }
        blob_lens.push(lens);
    }
    let mut desc = GroupDescriptor {
        group_id: 0,
        sample_count: rows.len() as u32,
        first_sample,
        scalar_page: ByteRange {
            offset: 0,
            length: 0,
        },
        block_page: ByteRange {
            offset: 0,
            length: 0,
        },
        blob_lens,
    };
    let scalar = encode_block_page(&scalar_raw, &[])?.to_bytes();
    let block = encode_block_page(&block_raw, &block_columns(schema, &desc))?.to_bytes();
    desc.scalar_page = ByteRange {
        offset: *tmp_len,
        length: scalar.len() as u64,
    };
    tmp.write_all(&scalar)?;
    *tmp_len += scalar.len() as u64;
    desc.block_page = ByteRange {
        offset: *tmp_len,
        length: block.len() as u64,
    };
    tmp.write_all(&block)?;
    *tmp_len += block.len() as u64;
    Ok(PendingGroup {
        sample_count: desc.sample_count,
        first_sample,
        scalar: desc.scalar_page,
        block: desc.block_page,
        blob_lens: desc.blob_lens,
    })
}

/// Balanced contiguous split: the first `groups % slices` slices take one extra group.
pub(crate) fn slice_group_counts(groups: usize, slices: usize) -> Vec<usize> {
    let base = groups / slices;
    let extra = groups % slices;
    (0..slices).map(|s| base + usize::from(s < extra)).collect()
}

/// Writes `samples` as `slice_count` slice files plus a meta-index object.
///
/// Samples are grouped in input order; groups are spread over slices in
/// contiguous runs, so reading slices in order reproduces the input order.
pub fn write_dataset<I>(
    samples: I,
    schema: &Schema,
    opts: &WriteOptions,
    out_dir: &Path,
) -> Result<WrittenDataset>
where
    I: IntoIterator<Item = Sample>,
{
    validate_schema(schema)?;
    if opts.slice_count == 0 || opts.group_size == 0 {
        return Err(FormatError::InvalidArgument(
            "slice_count and group_size must be positive".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let tmp_path = out_dir.join(format!(".{}.pages.tmp", opts.stem));
    let result = write_inner(samples, schema, opts, out_dir, &tmp_path);
    let _ = fs::remove_file(&tmp_path);
    result
}

fn write_inner<I>(
    samples: I,
    schema: &Schema,
    opts: &WriteOptions,
    out_dir: &Path,
    tmp_path: &Path,
) -> Result<WrittenDataset>
where
    I: IntoIterator<Item = Sample>,
{
    let mut tmp = BufWriter::new(File::create(tmp_path)?);
    let mut tmp_len = 0u64;
    let mut groups = Vec::new();
    let mut rows = Vec::with_capacity(opts.group_size);
    let mut written = 0u64;
    for sample in samples {
        schema.check_sample(&sample)?;
        rows.push(sample);
        if rows.len() == opts.group_size {
            groups.push(encode_group(
                schema,
                &rows,
                written,
                &mut tmp,
                &mut tmp_len,
            )?);
            written += rows.len() as u64;
            rows.clear();
        }
    }
    if !rows.is_empty() {
        groups.push(encode_group(
            schema,
            &rows,
            written,
            &mut tmp,
            &mut tmp_len,
        )?);
        written += rows.len() as u64;
    }
    if written == 0 {
        return Err(FormatError::EmptyDataset);
    }
    tmp.flush()?;
    drop(tmp);

    let slice_paths: Vec<String> = (0..opts.slice_count)
        .map(|i| slice_file_name(&opts.stem, i))
        .collect();
    let counts = slice_group_counts(groups.len(), opts.slice_count);
    let mut headers = Vec::with_capacity(opts.slice_count);
    // tmp ranges of each slice's pages, in order
    let mut copy_plan: Vec<Vec<ByteRange>> = Vec::with_capacity(opts.slice_count);
    let mut next = 0;
    for (slice, &count) in counts.iter().enumerate() {
        let mut cursor = 0u64;
        let mut index = Vec::with_capacity(count);
        let mut ranges = Vec::with_capacity(count * 2);
        for (local, g) in groups[next..next + count].iter().enumerate() {
            let scalar_page = ByteRange {
                offset: cursor,
                length: g.scalar.length,
            };
            cursor += g.scalar.length;
            let block_page = ByteRange {
                offset: cursor,
                length: g.block.length,
            };
            cursor += g.block.length;
            ranges.push(g.scalar);
            ranges.push(g.block);
            index.push(GroupDescriptor {
                group_id: local as u32,
                sample_count: g.sample_count,
                first_sample: g.first_sample,
                scalar_page,
                block_page,
                blob_lens: g.blob_lens.clone(),
            });
        }
        next += count;
        headers.push(FileHeader {
            version: FORMAT_VERSION,
            total_size_bytes: 0,
            scalar_page_size_bytes: index
                .iter()
                .map(|g| g.scalar_page.length as u32)
                .max()
                .unwrap_or(0),
            block_page_size_bytes: index
                .iter()
                .map(|g| g.block_page.length as u32)
                .max()
                .unwrap_or(0),
            schema: schema.clone(),
            slice_paths: slice_paths.clone(),
            slice_index: slice as u32,
            group_index: index,
        });
        copy_plan.push(ranges);
    }

    // total_size_bytes is embedded in every header, so iterate to a fixed point
    let data_total: u64 = headers.iter().map(|h| h.data_len()).sum();
    let mut total = 0u64;
    loop {
        let mut size = data_total;
        for h in &mut headers {
            h.total_size_bytes = total;
            size += h.to_bytes()?.len() as u64;
        }
        if size == total {
            break;
        }
        total = size;
    }

    let mut src = File::open(tmp_path)?;
    let mut slices = Vec::with_capacity(headers.len());
    let mut buf = Vec::new();
    for (header, ranges) in headers.iter().zip(&copy_plan) {
        let name = &slice_paths[header.slice_index as usize];
        let mut hasher = crc32fast::Hasher::new();
        let mut out = BufWriter::new(File::create(out_dir.join(name))?);
        let head = header.to_bytes()?;
        debug_assert!(head.len() >= PREFIX_LEN);
        hasher.update(&head);
        out.write_all(&head)?;
        let mut bytes = head.len() as u64;
        for r in ranges {
            buf.resize(r.length as usize, 0);
            src.seek(SeekFrom::Start(r.offset))?;
            src.read_exact(&mut buf)?;
            hasher.update(&buf);
            out.write_all(&buf)?;
            bytes += r.length;
        }
        out.flush()?;
        slices.push(SliceSummary {
            name: name.clone(),
            samples: header.sample_count(),
            bytes,
            crc32: hasher.finalize(),
            header: Some(header.clone()),
        });
    }
    debug_assert_eq!(slices.iter().map(|s| s.bytes).sum::<u64>(), total);
    let meta =
        serde_json::to_vec(&slices).map_err(|e| FormatError::CorruptHeader(e.to_string()))?;
    fs::write(out_dir.join(META_INDEX_NAME), meta)?;
    Ok(WrittenDataset { headers, slices })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_split() {
        assert_eq!(slice_group_counts(3, 2), vec![2, 1]);
        assert_eq!(slice_group_counts(1, 3), vec![1, 0, 0]);
        assert_eq!(slice_group_counts(8, 4), vec![2, 2, 2, 2]);
    }

    #[test]
    fn slice_names() {
        assert_eq!(slice_file_name("modelnet", 0), "modelnet.pcrecord");
        assert_eq!(slice_file_name("modelnet", 3), "modelnet.pcrecord3");
    }
}
