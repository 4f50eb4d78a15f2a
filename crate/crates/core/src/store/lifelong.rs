use serde::{Deserialize, Serialize};

use super::{FifoBuffer, LatentStore};
use crate::cae::{train_cae, CaeConfig, CaeModel, CaeReport, LatentCode};
use crate::error::{Error, Result};
use crate::lora::{AdapterSnapshot, SnapshotLayout};

/// What the autoencoder trains on when new snapshots arrive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementalPolicy {
    /// Originals stay inside the autoencoder stage until the store is
    /// finalized; every retrain sees every original.
    RetainUntilFinalize,
    /// Originals are dropped as soon as they are encoded; later retrains
    /// replay the decoded reconstructions of earlier codes.
    DecodedReplay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub buffer_capacity: usize,
    pub policy: IncrementalPolicy,
    pub cae: CaeConfig,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { buffer_capacity: 1, policy: IncrementalPolicy::RetainUntilFinalize, cae: CaeConfig::default() }
    }
}

/// One batch-encode of the buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlushEvent {
    pub encoded: Vec<String>,
    pub population: usize,
    pub report: CaeReport,
}

/// Drives snapshots from the buffer into the latent store.
#[derive(Clone, Debug)]
pub struct Lifelong {
    config: StoreConfig,
    input_width: usize,
    buffer: FifoBuffer,
    store: LatentStore,
    cae: CaeModel,
    /// Originals kept for retraining under `RetainUntilFinalize`.
    retained: Vec<AdapterSnapshot>,
    finalized: bool,
    events: Vec<FlushEvent>,
}

impl Lifelong {
    /// `adapter_scale` is the LoRA `α/r` used to rebuild stored adapters.
    pub fn new(config: StoreConfig, input_width: usize, adapter_scale: f64) -> Result<Lifelong> {
        let cae = CaeModel::new(config.cae.clone(), input_width)?;
        Ok(Lifelong {
            buffer: FifoBuffer::new(config.buffer_capacity)?,
            config,
            input_width,
            store: LatentStore::new(adapter_scale),
            cae,
            retained: Vec::new(),
            finalized: false,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn buffer(&self) -> &FifoBuffer {
        &self.buffer
    }

    pub fn store(&self) -> &LatentStore {
        &self.store
    }

    pub fn into_store(self) -> LatentStore {
        self.store
    }

    pub fn events(&self) -> &[FlushEvent] {
        &self.events
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Bytes of original snapshots held outside the buffer.
    pub fn retained_bytes(&self) -> usize {
        self.retained.iter().map(|s| s.to_bytes().len()).sum()
    }

    /// Adds a snapshot, batch-encoding the buffer once it is full.
    ///
    /// If encoding fails the snapshot stays buffered and the store is left
    /// as it was.
    pub fn submit(&mut self, snapshot: AdapterSnapshot) -> Result<Option<FlushEvent>> {
        if self.finalized {
            return Err(Error::EncoderDiscarded);
        }
        if snapshot.len() != self.input_width {
            return Err(Error::shape("submit", format!("snapshot width {}, store width {}", snapshot.len(), self.input_width)));
        }
        if self.store.code(&snapshot.task_id).is_some() || self.buffer.get(&snapshot.task_id).is_some() {
            return Err(Error::Invariant(format!("task {} submitted twice", snapshot.task_id)));
        }
        if let Some(layout) = self.store.layout().or_else(|| self.buffer.iter().next().map(|s| &s.layout)) {
            if *layout != snapshot.layout {
                return Err(Error::Layout(format!("snapshot {} has a different layout", snapshot.task_id)));
            }
        }
        self.buffer.push(snapshot)?;
        if self.buffer.is_full() {
            self.flush().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Trains the autoencoder on buffer ∪ population, encodes everything,
    /// and empties the buffer.
    pub fn flush(&mut self) -> Result<FlushEvent> {
        if self.finalized {
            return Err(Error::EncoderDiscarded);
        }
        if self.buffer.is_empty() {
            return Err(Error::Empty("buffer"));
        }
        let layout: SnapshotLayout = self.buffer.iter().next().expect("nonempty").layout.clone();
        // Earlier tasks whose originals are gone are represented by their
        // current reconstructions.
        let mut population: Vec<AdapterSnapshot> = match self.config.policy {
            IncrementalPolicy::RetainUntilFinalize if self.retained.len() == self.store.len() => self.retained.clone(),
            _ => self.store.fetch_all().or_else(|e| if self.store.is_empty() { Ok(Vec::new()) } else { Err(e) })?,
        };
        let fresh: Vec<AdapterSnapshot> = self.buffer.iter().cloned().collect();
        population.extend(fresh.iter().cloned());
        let (cae, report) = train_cae(&self.cae, &population)?;
        let codes: Vec<LatentCode> = population.iter().map(|s| cae.encode(s)).collect::<Result<_>>()?;
        if let Some(c) = codes.iter().find(|c| !c.score.is_some_and(|s| s >= cae.config.threshold)) {
            return Err(Error::Invariant(format!("code {} scored {:?} below threshold", c.task_id, c.score)));
        }
        self.buffer.drain();
        self.retained = match self.config.policy {
            IncrementalPolicy::RetainUntilFinalize => population,
            IncrementalPolicy::DecodedReplay => Vec::new(),
        };
        let event = FlushEvent {
            encoded: fresh.iter().map(|s| s.task_id.clone()).collect(),
            population: codes.len(),
            report,
        };
        self.cae = cae.clone();
        self.store.install(cae, layout, codes);
        self.events.push(event.clone());
        Ok(event)
    }

    /// Encodes anything still buffered, then discards the encoder and all
    /// retained originals.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Ok(());
        }
        if !self.buffer.is_empty() {
            self.flush()?;
        }
        self.retained.clear();
        self.cae.discard_encoder();
        self.store.discard_encoder();
        self.finalized = true;
        Ok(())
    }

    /// Starts a new training phase on a finalized store. Earlier tasks are
    /// replayed from their reconstructions and a fresh encoder is trained.
    pub fn reopen(&mut self) {
        self.finalized = false;
    }
}
