use std::sync::Arc;

use crate::format::{DatasetReader, DecodedGroup, Sample, SliceFile};
use crate::index::MetadataEntry;

use super::PipelineError;

/// Per-worker cache of the most recently decoded group.
#[derive(Debug, Default)]
pub struct GroupCache {
    key: Option<(u32, u32)>,
    group: Option<Arc<DecodedGroup>>,
}

impl GroupCache {
    /// Reads `entry` from `slice`, decoding its group only on a cache miss.
    pub fn read(
        &mut self,
        slice: &SliceFile,
        entry: &MetadataEntry,
    ) -> Result<Sample, PipelineError> {
        let key = (entry.shard_id, entry.group_id);
        let group = match (&self.key, &self.group) {
            (Some(k), Some(g)) if *k == key => g.clone(),
            _ => {
                let g = Arc::new(slice.decode_group(entry.group_id)?);
                self.key = Some(key);
                self.group = Some(g.clone());
                g
            }
        };
        Ok(slice.read_sample(&group, entry)?)
    }

    pub fn cached(&self, shard_id: u32, group_id: u32) -> bool {
        self.key == Some((shard_id, group_id))
    }

    pub fn clear(&mut self) {
        self.key = None;
        self.group = None;
    }
}

/// Random-access sample provider feeding the source operator.
pub trait SampleSource: Send + Sync + 'static {
    /// Samples per epoch.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads the sample at `pos` of the epoch order.
    fn read(&self, epoch: u32, pos: usize, cache: &mut GroupCache)
        -> Result<Sample, PipelineError>;

    /// Called before the first read of `epoch` is issued.
    fn begin_epoch(&self, _epoch: u32) {}

    /// Identity of the sample at `pos` used to seed random transforms.
    /// Sources that expose a subset of a larger dataset return the global
    /// position so that every subset augments a sample identically.
    fn seed_key(&self, pos: usize) -> u64 {
        pos as u64
    }
}

/// Reads the entries of an index table from a local dataset.
pub struct IndexSource {
    reader: Arc<DatasetReader>,
    entries: Vec<MetadataEntry>,
}

impl IndexSource {
    pub fn new(reader: Arc<DatasetReader>, entries: Vec<MetadataEntry>) -> Self {
        Self { reader, entries }
    }
}

impl SampleSource for IndexSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn read(
        &self,
        _epoch: u32,
        pos: usize,
        cache: &mut GroupCache,
    ) -> Result<Sample, PipelineError> {
        let entry = &self.entries[pos];
        let slice = self
            .reader
            .slices()
            .get(entry.shard_id as usize)
            .ok_or_else(|| {
                PipelineError::source(format!("shard {} not in dataset", entry.shard_id))
            })?;
        cache.read(slice, entry)
    }

    fn seed_key(&self, pos: usize) -> u64 {
        self.entries[pos].ordinal
    }
}

/// In-memory samples, mostly for tests and benchmarks.
pub struct MemorySource(pub Vec<Sample>);

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn read(
        &self,
        _epoch: u32,
        pos: usize,
        _cache: &mut GroupCache,
    ) -> Result<Sample, PipelineError> {
        Ok(self.0[pos].clone())
    }
}
