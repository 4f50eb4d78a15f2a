//! Long-term adapter memory: the FIFO buffer of fresh snapshots, the latent
//! store of codes plus a shared decoder, and storage accounting.

mod lifelong;
mod report;

pub use lifelong::{FlushEvent, IncrementalPolicy, Lifelong, StoreConfig};
pub use report::{break_even_tasks, StorageReport};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rayon::prelude::*;

use crate::cae::{CaeModel, LatentCode};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::lora::{AdapterSnapshot, SnapshotLayout};

pub const STORE_MAGIC: &[u8; 6] = b"COLAST";
const STORE_VERSION: u16 = 1;

/// Snapshots awaiting encoding, in arrival order.
#[derive(Clone, Debug)]
pub struct FifoBuffer {
    capacity: usize,
    entries: VecDeque<AdapterSnapshot>,
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> Result<FifoBuffer> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(FifoBuffer { capacity, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn get(&self, task_id: &str) -> Option<&AdapterSnapshot> {
        self.entries.iter().find(|s| s.task_id == task_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterSnapshot> {
        self.entries.iter()
    }

    pub(crate) fn push(&mut self, s: AdapterSnapshot) -> Result<()> {
        if self.is_full() {
            return Err(Error::Invariant(format!("buffer already holds {} snapshots", self.capacity)));
        }
        self.entries.push_back(s);
        Ok(())
    }

    /// Removes every entry, oldest first.
    pub(crate) fn drain(&mut self) -> Vec<AdapterSnapshot> {
        self.entries.drain(..).collect()
    }

    /// Serialized size of the buffered snapshots.
    pub fn bytes(&self) -> usize {
        self.entries.iter().map(|s| s.to_bytes().len()).sum()
    }
}

/// Latent codes with the decoder that expands them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    /// LoRA `α/r` of the stored adapters.
    adapter_scale: f64,
    cae: Option<CaeModel>,
    layout: Option<SnapshotLayout>,
    codes: BTreeMap<String, LatentCode>,
    /// Lowest recorded score of codes read back from disk.
    loaded_floor: Option<f64>,
}

impl LatentStore {
    pub fn new(adapter_scale: f64) -> LatentStore {
        LatentStore { adapter_scale, cae: None, layout: None, codes: BTreeMap::new(), loaded_floor: None }
    }

    pub fn adapter_scale(&self) -> f64 {
        self.adapter_scale
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Task ids in lexicographic order.
    pub fn task_ids(&self) -> Vec<String> {
        self.codes.keys().cloned().collect()
    }

    pub fn code(&self, task_id: &str) -> Option<&LatentCode> {
        self.codes.get(task_id)
    }

    pub fn codes(&self) -> impl Iterator<Item = &LatentCode> {
        self.codes.values()
    }

    pub fn cae(&self) -> Option<&CaeModel> {
        self.cae.as_ref()
    }

    pub fn layout(&self) -> Option<&SnapshotLayout> {
        self.layout.as_ref()
    }

    /// Lowest reconstruction score recorded at encode time across the
    /// store. Survives serialization even though per-code scores do not.
    pub fn min_recorded_score(&self) -> Option<f64> {
        self.codes.values().filter_map(|c| c.score).chain(self.loaded_floor).reduce(f64::min)
    }

    /// Decoder, statistics and layout alone, for byte accounting.
    pub fn without_codes(&self) -> LatentStore {
        LatentStore { codes: BTreeMap::new(), loaded_floor: None, ..self.clone() }
    }

    pub fn encoder_retained(&self) -> bool {
        self.cae.as_ref().is_some_and(CaeModel::encoder_retained)
    }

    pub(crate) fn install(&mut self, cae: CaeModel, layout: SnapshotLayout, codes: Vec<LatentCode>) {
        self.cae = Some(cae);
        self.layout = Some(layout);
        self.codes = codes.into_iter().map(|c| (c.task_id.clone(), c)).collect();
        self.loaded_floor = None;
    }

    pub(crate) fn discard_encoder(&mut self) {
        if let Some(c) = self.cae.as_mut() {
            c.discard_encoder();
        }
    }

    fn parts(&self) -> Result<(&CaeModel, &SnapshotLayout)> {
        match (&self.cae, &self.layout) {
            (Some(c), Some(l)) => Ok((c, l)),
            _ => Err(Error::Empty("latent store")),
        }
    }

    /// Decoded snapshot of `task_id`.
    pub fn fetch_adapter(&self, task_id: &str) -> Result<AdapterSnapshot> {
        let code = self.codes.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let (cae, layout) = self.parts()?;
        cae.decode(code, layout)
    }

    /// Every stored adapter, decoded in parallel, in task-id order.
    pub fn fetch_all(&self) -> Result<Vec<AdapterSnapshot>> {
        let (cae, layout) = self.parts()?;
        let codes: Vec<&LatentCode> = self.codes.values().collect();
        codes.par_iter().map(|c| cae.decode(c, layout)).collect()
    }

    /// Container: magic `COLAST`, `u16` version, then sections `CFG`
    /// (snapshot width, autoencoder config, adapter scale), `DEC`, `NRM`,
    /// `LAYOUT`, `CODES`. The encoder is never written. A store that has
    /// never been trained has only a `CODES` section.
    ///
    /// `CODES` holds the count, the code width and the lowest recorded
    /// score once, then per code only the task id and its f32 values, so
    /// each task costs `4m` plus its id.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(STORE_MAGIC);
        w.u16(STORE_VERSION);
        if let (Some(cae), Some(layout)) = (&self.cae, &self.layout) {
            let mut s = ByteWriter::new();
            s.u32(cae.input_width() as u32);
            s.str(&serde_json::to_string(&cae.config).expect("config serializes"));
            s.f64(self.adapter_scale);
            w.section("CFG", &s.finish());
            let mut s = ByteWriter::new();
            cae.decoder().write(&mut s);
            w.section("DEC", &s.finish());
            let mut s = ByteWriter::new();
            cae.normalizer().write(&mut s);
            w.section("NRM", &s.finish());
            let mut s = ByteWriter::new();
            layout.write(&mut s);
            w.section("LAYOUT", &s.finish());
        }
        let mut s = ByteWriter::new();
        s.u32(self.codes.len() as u32);
        s.u32(self.cae.as_ref().map_or(0, |c| c.code_len() as u32));
        s.f32(self.min_recorded_score().unwrap_or(f64::NAN));
        for c in self.codes.values() {
            s.str(&c.task_id);
            s.f32_slice(&c.z);
        }
        w.section("CODES", &s.finish());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LatentStore> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let (mut cfg, mut dec, mut norm, mut layout, mut codes) = (None, None, None, None, None);
        let mut floor = None;
        while let Some((tag, payload)) = r.section()? {
            let mut s = ByteReader::new(payload);
            match tag.as_str() {
                "CFG" => {
                    let width = s.u32()? as usize;
                    let config = serde_json::from_str(&s.str()?)?;
                    cfg = Some((width, config, s.f64()?));
                }
                "DEC" => dec = Some(crate::cae::Mlp::read(&mut s)?),
                "NRM" => norm = Some(crate::cae::Normalizer::read(&mut s)?),
                "LAYOUT" => layout = Some(SnapshotLayout::read(&mut s)?),
                "CODES" => {
                    let n = s.u32()? as usize;
                    let m = s.u32()? as usize;
                    let raw = f32::from_le_bytes(s.take(4)?.try_into().expect("4 bytes")) as f64;
                    floor = (!raw.is_nan()).then_some(raw);
                    let mut out = Vec::with_capacity(n.min(1 << 16));
                    for _ in 0..n {
                        let task_id = s.str()?;
                        let z = s.f32_vec(m)?;
                        out.push(LatentCode { task_id, z, score: None });
                    }
                    codes = Some(out);
                }
                other => return Err(Error::Format(format!("unknown store section {other:?}"))),
            }
            s.expect_done()?;
        }
        let codes = codes.ok_or_else(|| Error::Format("missing CODES section".into()))?;
        let mut store = LatentStore::new(1.0);
        match (cfg, dec, norm, layout) {
            (None, None, None, None) => {
                if !codes.is_empty() {
                    return Err(Error::Format("codes without a decoder".into()));
                }
            }
            (Some((width, config, scale)), Some(dec), Some(norm), Some(layout)) => {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Format(format!("bad adapter scale {scale}")));
                }
                store.adapter_scale = scale;
                if norm.width() != width || layout.len() != width {
                    return Err(Error::Format(format!(
                        "widths disagree: config {width}, normalizer {}, layout {}",
                        norm.width(),
                        layout.len()
                    )));
                }
                let cae = CaeModel::from_parts(config, None, dec, norm)?;
                if let Some(c) = codes.iter().find(|c| c.z.len() != cae.code_len()) {
                    return Err(Error::Format(format!("code {} has width {}, expected {}", c.task_id, c.z.len(), cae.code_len())));
                }
                if codes.iter().any(|c| c.task_id.is_empty()) {
                    return Err(Error::Format("empty task id".into()));
                }
                store.install(cae, layout, codes);
                store.loaded_floor = floor;
            }
            _ => return Err(Error::Format("store needs all of CFG, DEC, NRM and LAYOUT".into())),
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LatentStore> {
        LatentStore::from_bytes(&std::fs::read(path)?)
    }

    /// One row per code: `task_id, score, z0, z1, …`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let width = self.codes.values().map(|c| c.z.len()).max().unwrap_or(0);
        let mut header = vec!["task_id".to_string(), "score".to_string()];
        header.extend((0..width).map(|i| format!("z{i}")));
        w.write_record(&header)?;
        for c in self.codes.values() {
            let score = c.score.map_or_else(String::new, |v| v.to_string());
            let mut row = vec![c.task_id.clone(), score];
            row.extend(c.z.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
