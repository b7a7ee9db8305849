//! The boundary between engines and the private dataset.
//!
//! Engines see private records only through [`PrivateData::records`]. The
//! record count and the domain layout are treated as public.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::domain::{EncodedDataset, GroupLayout, RecordBits};

pub trait PrivateData: Sync {
    fn layout(&self) -> &GroupLayout;
    fn n(&self) -> usize;
    /// Reads the private records.
    fn records(&self) -> &[RecordBits];
    /// Number of record reads observed so far, when instrumented.
    fn reads(&self) -> Option<u64> {
        None
    }
}

impl PrivateData for EncodedDataset {
    fn layout(&self) -> &GroupLayout {
        EncodedDataset::layout(self)
    }

    fn n(&self) -> usize {
        EncodedDataset::n(self)
    }

    fn records(&self) -> &[RecordBits] {
        EncodedDataset::records(self)
    }
}

/// Wraps a dataset and counts every call to [`PrivateData::records`].
#[derive(Debug)]
pub struct InstrumentedDataset<'a> {
    inner: &'a EncodedDataset,
    reads: AtomicU64,
}

impl<'a> InstrumentedDataset<'a> {
    pub fn new(inner: &'a EncodedDataset) -> Self {
        InstrumentedDataset { inner, reads: AtomicU64::new(0) }
    }
}

impl PrivateData for InstrumentedDataset<'_> {
    fn layout(&self) -> &GroupLayout {
        self.inner.layout()
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn records(&self) -> &[RecordBits] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.records()
    }

    fn reads(&self) -> Option<u64> {
        Some(self.reads.load(Ordering::SeqCst))
    }
}
