use serde::{Deserialize, Serialize};

use super::LatentStore;

/// Serialized byte counts behind the storage comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub tasks: usize,
    pub snapshot_len: usize,
    pub code_len: usize,
    /// Frozen backbone, stored once by every method.
    pub backbone_bytes: usize,
    /// One serialized adapter snapshot.
    pub adapter_bytes: usize,
    /// Its f32 payload alone, `4·L`.
    pub adapter_payload_bytes: usize,
    /// Uncompressed adapter-style deployment: `tasks · adapter_bytes`.
    pub adapter_style_bytes: usize,
    /// Serialized latent store.
    pub store_bytes: usize,
    /// The store with every code removed: decoder, statistics, layout.
    pub decoder_bytes: usize,
    /// `(store_bytes − decoder_bytes) / tasks`.
    pub per_task_code_bytes: f64,
    /// Total under the alternative reading with one decoder per task:
    /// `tasks · decoder_bytes + codes`.
    pub decoder_per_task_total_bytes: usize,
    /// Raw snapshots waiting in the buffer.
    pub buffer_bytes: usize,
    /// Task examples kept for replay; always zero.
    pub rehearsal_bytes: usize,
    /// Smallest task count at which decoder plus codes beat raw adapters.
    pub break_even_tasks: Option<u64>,
}

/// Smallest `n` with `decoder + n·4m < n·4L`, or `None` when codes are not
/// smaller than snapshots.
pub fn break_even_tasks(decoder_bytes: u64, snapshot_len: u64, code_len: u64) -> Option<u64> {
    if snapshot_len <= code_len {
        return None;
    }
    Some(decoder_bytes / (4 * (snapshot_len - code_len)) + 1)
}

impl StorageReport {
    pub fn measure(store: &LatentStore, backbone_bytes: usize, adapter_bytes: usize, snapshot_len: usize, buffer_bytes: usize) -> StorageReport {
        let tasks = store.len();
        let store_bytes = store.to_bytes().len();
        let decoder_bytes = store.without_codes().to_bytes().len();
        let code_len = store.cae().map_or(0, |c| c.code_len());
        let codes = store_bytes - decoder_bytes;
        StorageReport {
            tasks,
            snapshot_len,
            code_len,
            backbone_bytes,
            adapter_bytes,
            adapter_payload_bytes: 4 * snapshot_len,
            adapter_style_bytes: tasks * adapter_bytes,
            store_bytes,
            decoder_bytes,
            per_task_code_bytes: if tasks == 0 { 0.0 } else { codes as f64 / tasks as f64 },
            decoder_per_task_total_bytes: tasks * decoder_bytes + codes,
            buffer_bytes,
            rehearsal_bytes: 0,
            break_even_tasks: break_even_tasks(decoder_bytes as u64, snapshot_len as u64, code_len as u64),
        }
    }
}
