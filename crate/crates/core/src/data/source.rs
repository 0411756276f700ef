//! Random access to training or evaluation samples, either held in memory
//! or read from disk through a manifest.

use super::{DatasetManifest, RawSample};
use crate::error::{Error, Result};

pub trait SampleSource {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<RawSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [RawSample] {
    fn len(&self) -> usize {
        <[RawSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<RawSample> {
        <[RawSample]>::get(self, index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample {index} out of range")))
    }
}

impl SampleSource for Vec<RawSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<RawSample> {
        SampleSource::get(self.as_slice(), index)
    }
}

impl SampleSource for DatasetManifest {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<RawSample> {
        self.entries
            .get(index)
            .ok_or_else(|| Error::Data(format!("manifest entry {index} out of range")))?
            .load()
    }
}

/// A subset of another source, by index.
pub struct Subset<'a, S: SampleSource + ?Sized> {
    pub inner: &'a S,
    pub indices: Vec<usize>,
}

impl<S: SampleSource + ?Sized> SampleSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<RawSample> {
        let i = *self
            .indices
            .get(index)
            .ok_or_else(|| Error::Data(format!("subset index {index} out of range")))?;
        self.inner.get(i)
    }
}
