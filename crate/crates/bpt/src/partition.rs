//! Sequence partitioning into query and key-value blocks.

use std::ops::Range;

use crate::error::Error;
use crate::Result;

/// Splits a sequence of length `seq_len` into query blocks of `c_q` rows and
/// key-value blocks of `c_kv` rows. Both block sizes must divide the length
/// exactly; ragged tails are rejected rather than padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    seq_len: usize,
    c_q: usize,
    c_kv: usize,
}

impl BlockPartition {
    pub fn new(seq_len: usize, c_q: usize, c_kv: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Partition {
                len: seq_len,
                block: c_q.max(1),
            });
        }
        if c_q == 0 || !seq_len.is_multiple_of(c_q) {
            return Err(Error::Partition {
                len: seq_len,
                block: c_q,
            });
        }
        if c_kv == 0 || !seq_len.is_multiple_of(c_kv) {
            return Err(Error::Partition {
                len: seq_len,
                block: c_kv,
            });
        }
        Ok(BlockPartition { seq_len, c_q, c_kv })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn c_q(&self) -> usize {
        self.c_q
    }

    pub fn c_kv(&self) -> usize {
        self.c_kv
    }

    pub fn n_q_blocks(&self) -> usize {
        self.seq_len / self.c_q
    }

    pub fn n_kv_blocks(&self) -> usize {
        self.seq_len / self.c_kv
    }

    /// Row range of query block `i`.
    pub fn q_range(&self, i: usize) -> Range<usize> {
        debug_assert!(i < self.n_q_blocks());
        i * self.c_q..(i + 1) * self.c_q
    }

    /// Row range of key-value block `j`.
    pub fn kv_range(&self, j: usize) -> Range<usize> {
        debug_assert!(j < self.n_kv_blocks());
        j * self.c_kv..(j + 1) * self.c_kv
    }
}
