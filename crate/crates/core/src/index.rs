//! In-memory sample index built from slice headers.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::format::FileHeader;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("slice {0} has a different schema")]
    SchemaConflict(usize),
    #[error("sample id {id} out of range (index has {len})")]
    OutOfRange { id: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "kCommonTask")]
    Common,
    #[serde(rename = "kPaddedTask")]
    Padded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub task: TaskType,
    pub shard_id: u32,
    pub group_id: u32,
    /// Row inside the group.
    pub row: u32,
    /// Dataset position of the sample this entry reads.
    pub sample_id: u64,
    /// Position of this entry in the (padded) dataset order.
    pub ordinal: u64,
    /// `[blob_start, blob_end]` inside the group's decoded block page.
    pub sample_meta: [u64; 2],
    pub scalar_meta: Map<String, Json>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    pub task_list: Vec<TaskType>,
    pub sample_meta_list: Vec<MetadataEntry>,
    pub total_real_samples: usize,
}

impl IndexTable {
    pub fn len(&self) -> usize {
        self.sample_meta_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_meta_list.is_empty()
    }

    pub fn entries(&self) -> &[MetadataEntry] {
        &self.sample_meta_list
    }

    fn push(&mut self, entry: MetadataEntry) {
        self.task_list.push(entry.task);
        self.sample_meta_list.push(entry);
    }

    /// Drops padded entries.
    pub fn without_padding(&self) -> IndexTable {
        let mut out = IndexTable {
            total_real_samples: self.total_real_samples,
            ..Default::default()
        };
        for e in self
            .sample_meta_list
            .iter()
            .filter(|e| e.task == TaskType::Common)
        {
            out.push(e.clone());
        }
        out
    }
}

/// One entry per sample across all slices, in write order. Reads headers only.
pub fn build_index(headers: &[FileHeader]) -> Result<IndexTable, IndexError> {
    let mut ordered: Vec<&FileHeader> = headers.iter().collect();
    ordered.sort_by_key(|h| h.slice_index);
    let mut table = IndexTable::default();
    let Some(first) = ordered.first() else {
        return Ok(table);
    };
    let blob_names: Vec<&str> = first
        .schema
        .blob_fields()
        .map(|f| f.name.as_str())
        .collect();
    for h in &ordered {
        if h.schema != first.schema {
            return Err(IndexError::SchemaConflict(h.slice_index as usize));
        }
        for g in &h.group_index {
            for (row, ((start, end), lens)) in
                g.blob_ranges().into_iter().zip(&g.blob_lens).enumerate()
            {
                let mut fields = Map::new();
                let mut pos = start;
                for (name, len) in blob_names.iter().zip(lens) {
                    fields.insert((*name).to_owned(), json!([pos, pos + len]));
                    pos += len;
                }
                let mut scalar_meta = Map::new();
                scalar_meta.insert("row".into(), json!(row));
                scalar_meta.insert("fields".into(), Json::Object(fields));
                let id = g.first_sample + row as u64;
                table.push(MetadataEntry {
                    task: TaskType::Common,
                    shard_id: h.slice_index,
                    group_id: g.group_id,
                    row: row as u32,
                    sample_id: id,
                    ordinal: table.sample_meta_list.len() as u64,
                    sample_meta: [start, end],
                    scalar_meta,
                });
            }
        }
    }
    table.total_real_samples = table.len();
    Ok(table)
}

pub fn locate(index: &IndexTable, global_id: usize) -> Result<&MetadataEntry, IndexError> {
    index
        .sample_meta_list
        .get(global_id)
        .ok_or(IndexError::OutOfRange {
            id: global_id,
            len: index.len(),
        })
}

/// Pads to the next multiple of `num_shards` by repeating trailing real
/// entries (cyclically when more padding than samples is needed).
pub fn pad_for_shards(index: &IndexTable, num_shards: usize) -> IndexTable {
    let num_shards = num_shards.max(1);
    let real: Vec<&MetadataEntry> = index
        .sample_meta_list
        .iter()
        .filter(|e| e.task == TaskType::Common)
        .collect();
    let mut out = index.clone();
    let len = index.len();
    if real.is_empty() || len.is_multiple_of(num_shards) {
        return out;
    }
    let pad = len.div_ceil(num_shards) * num_shards - len;
    let start = real.len() - pad % real.len();
    for k in 0..pad {
        let mut e = real[(start + k) % real.len()].clone();
        e.task = TaskType::Padded;
        e.ordinal = out.len() as u64;
        out.push(e);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{ByteRange, FieldKind, FieldType, GroupDescriptor, Schema};

    fn header(slice: u32, groups: &[u32], first: u64, schema: &Schema) -> FileHeader {
        let mut next = first;
        let group_index = groups
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let g = GroupDescriptor {
                    group_id: i as u32,
                    sample_count: n,
                    first_sample: next,
                    scalar_page: ByteRange {
                        offset: 0,
                        length: 0,
                    },
                    block_page: ByteRange {
                        offset: 0,
                        length: 0,
                    },
                    blob_lens: vec![vec![12]; n as usize],
                };
                next += n as u64;
                g
            })
            .collect();
        FileHeader {
            version: 1,
            total_size_bytes: 0,
            scalar_page_size_bytes: 0,
            block_page_size_bytes: 0,
            schema: schema.clone(),
            slice_paths: vec!["a.pcrecord".into(), "a.pcrecord1".into()],
            slice_index: slice,
            group_index,
        }
    }

    fn schema() -> Schema {
        Schema::new().with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
    }

    fn table(n: u32) -> IndexTable {
        build_index(&[header(0, &[n], 0, &schema())]).unwrap()
    }

    #[test]
    fn single_header_in_order() {
        let t = table(10);
        assert_eq!(t.len(), 10);
        assert!(t
            .entries()
            .iter()
            .enumerate()
            .all(|(i, e)| e.sample_id == i as u64));
        assert!(t.task_list.iter().all(|t| *t == TaskType::Common));
        assert_eq!(t.entries()[3].sample_meta, [36, 48]);
    }

    #[test]
    fn two_slices_placement() {
        let s = schema();
        let t = build_index(&[header(0, &[4], 0, &s), header(1, &[2], 4, &s)]).unwrap();
        assert_eq!(t.len(), 6);
        // enumerate placements: slice 0 holds ids 0..4, slice 1 holds 4..6
        let expected: Vec<(u32, u32, u32)> = (0..6)
            .map(|i| if i < 4 { (0, 0, i) } else { (1, 0, i - 4) })
            .collect();
        let got: Vec<_> = t
            .entries()
            .iter()
            .map(|e| (e.shard_id, e.group_id, e.row))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn conflicting_schemas() {
        let other = Schema::new().with("label", FieldType::scalar(FieldKind::Int32));
        let r = build_index(&[header(0, &[4], 0, &schema()), header(1, &[2], 4, &other)]);
        assert!(matches!(r, Err(IndexError::SchemaConflict(1))));
    }

    #[test]
    fn locate_bounds() {
        let t = table(5);
        assert_eq!(locate(&t, 0).unwrap().sample_id, 0);
        assert!(matches!(
            locate(&t, 5),
            Err(IndexError::OutOfRange { id: 5, len: 5 })
        ));
    }

    #[test]
    fn padding_arithmetic() {
        let t = table(10);
        let p = pad_for_shards(&t, 4);
        // ceil(10 / 4) * 4
        assert_eq!(p.len(), 12);
        assert_eq!(p.total_real_samples, 10);
        assert_eq!(p.task_list[10..], [TaskType::Padded, TaskType::Padded]);
        assert_eq!(p.entries()[10].sample_id, 8);
        assert_eq!(p.entries()[11].sample_id, 9);
        assert_eq!(p.entries()[11].ordinal, 11);
        assert_eq!(p.without_padding(), t);

        assert_eq!(pad_for_shards(&table(8), 4), table(8));
        assert_eq!(pad_for_shards(&t, 1), t);
    }

    #[test]
    fn padding_wraps_when_tiny() {
        let p = pad_for_shards(&table(1), 4);
        assert_eq!(p.len(), 4);
        assert!(p.entries().iter().all(|e| e.sample_id == 0));
    }

    #[test]
    fn padding_property() {
        for n in 1..40 {
            for shards in 1..9 {
                let t = table(n);
                let p = pad_for_shards(&t, shards);
                assert_eq!(p.len() % shards, 0);
                assert!(p.len() >= t.len() && p.len() < t.len() + shards);
                assert_eq!(p.without_padding(), t);
            }
        }
    }
}
