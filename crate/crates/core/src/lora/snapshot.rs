use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterPoint, AdapterWeights};
use crate::backbone::InjectionPoint;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"COLA";
pub const SNAPSHOT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matrix {
    A,
    B,
}

/// Position of one adapter matrix inside a flat snapshot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub point: InjectionPoint,
    pub matrix: Matrix,
    pub rank: usize,
    pub d: usize,
    pub k: usize,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn shape(&self) -> (usize, usize) {
        match self.matrix {
            Matrix::A => (self.rank, self.k),
            Matrix::B => (self.d, self.rank),
        }
    }

    pub fn len(&self) -> usize {
        self.rank * match self.matrix {
            Matrix::A => self.k,
            Matrix::B => self.d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> String {
        format!("{}.{:?}", self.point.name(), self.matrix)
    }
}

/// Ordered `(point, matrix, shape, offset)` table; `A` precedes `B` for
/// each point, points in configuration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotLayout {
    pub entries: Vec<LayoutEntry>,
}

impl SnapshotLayout {
    pub fn of(weights: &AdapterWeights) -> SnapshotLayout {
        let mut entries = Vec::with_capacity(weights.points.len() * 2);
        let mut offset = 0;
        for p in &weights.points {
            let (d, k) = (p.b.rows(), p.a.cols());
            for matrix in [Matrix::A, Matrix::B] {
                let e = LayoutEntry { point: p.point, matrix, rank: weights.rank, d, k, offset };
                offset += e.len();
                entries.push(e);
            }
        }
        SnapshotLayout { entries }
    }

    /// Total flat length `L`.
    pub fn len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for (i, e) in self.entries.iter().enumerate() {
            let want = if i % 2 == 0 { Matrix::A } else { Matrix::B };
            if e.offset != offset || e.matrix != want || (i % 2 == 1 && e.point != self.entries[i - 1].point) {
                return Err(Error::Layout(format!("entry {i} ({}) is out of order", e.name())));
            }
            offset += e.len();
        }
        if self.entries.len() % 2 != 0 {
            return Err(Error::Layout("unpaired A/B entry".into()));
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.name());
            w.u32(e.rank as u32);
            w.u32(e.d as u32);
            w.u32(e.k as u32);
            w.u64(e.offset as u64);
        }
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<SnapshotLayout> {
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let (point, matrix) = name
                .rsplit_once('.')
                .and_then(|(p, m)| {
                    let m = match m {
                        "A" => Matrix::A,
                        "B" => Matrix::B,
                        _ => return None,
                    };
                    Some((InjectionPoint::parse(p)?, m))
                })
                .ok_or_else(|| Error::Format(format!("bad layout entry name {name:?}")))?;
            let rank = r.u32()? as usize;
            let d = r.u32()? as usize;
            let k = r.u32()? as usize;
            let offset = r.u64()? as usize;
            entries.push(LayoutEntry { point, matrix, rank, d, k, offset });
        }
        let layout = SnapshotLayout { entries };
        layout.validate()?;
        Ok(layout)
    }
}

/// One task's adapter flattened to a fixed-width vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSnapshot {
    pub task_id: String,
    pub flat: Vec<f64>,
    pub layout: SnapshotLayout,
}

impl AdapterWeights {
    /// Deterministic flattening: per point, `A` then `B`, each row-major.
    pub fn vectorize(&self, task_id: &str) -> AdapterSnapshot {
        let layout = SnapshotLayout::of(self);
        let mut flat = Vec::with_capacity(layout.len());
        for p in &self.points {
            flat.extend_from_slice(p.a.data());
            flat.extend_from_slice(p.b.data());
        }
        AdapterSnapshot { task_id: task_id.to_string(), flat, layout }
    }
}

impl AdapterSnapshot {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Inverse of [`AdapterWeights::vectorize`]; the layout must match the
    /// rank and injection points of `config`.
    pub fn devectorize(&self, config: &AdapterConfig) -> Result<AdapterWeights> {
        if self.flat.len() != self.layout.len() {
            return Err(Error::Layout(format!("snapshot has {} values, layout needs {}", self.flat.len(), self.layout.len())));
        }
        let points: Vec<InjectionPoint> = self.layout.entries.iter().step_by(2).map(|e| e.point).collect();
        if points != config.points {
            return Err(Error::Layout(format!("snapshot points {points:?} differ from configured {:?}", config.points)));
        }
        if let Some(e) = self.layout.entries.iter().find(|e| e.rank != config.rank) {
            return Err(Error::Layout(format!("{} has rank {}, configured rank {}", e.name(), e.rank, config.rank)));
        }
        self.to_weights(config.scale())
    }

    /// Rebuilds weights using only the embedded layout.
    pub fn to_weights(&self, scale: f64) -> Result<AdapterWeights> {
        if self.flat.len() != self.layout.len() {
            return Err(Error::Layout(format!("snapshot has {} values, layout needs {}", self.flat.len(), self.layout.len())));
        }
        self.layout.validate()?;
        let slice = |e: &LayoutEntry| {
            let (r, c) = e.shape();
            Tensor::new(vec![r, c], self.flat[e.offset..e.offset + e.len()].to_vec())
        };
        let mut points = Vec::new();
        for pair in self.layout.entries.chunks(2) {
            points.push(AdapterPoint { point: pair[0].point, a: slice(&pair[0])?, b: slice(&pair[1])? });
        }
        let rank = self.layout.entries.first().map_or(0, |e| e.rank);
        Ok(AdapterWeights { rank, scale, points })
    }

    /// Values rounded through `f32`, i.e. what a file round trip yields.
    pub fn rounded(&self) -> AdapterSnapshot {
        AdapterSnapshot { flat: self.flat.iter().map(|&v| v as f32 as f64).collect(), ..self.clone() }
    }

    /// Binary form: magic `COLA`, `u16` version, length-prefixed task id,
    /// layout table, `u64` value count, little-endian `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SNAPSHOT_MAGIC);
        w.u16(SNAPSHOT_VERSION);
        w.str(&self.task_id);
        self.layout.write(&mut w);
        w.u64(self.flat.len() as u64);
        w.f32_slice(&self.flat);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AdapterSnapshot> {
        let mut r = ByteReader::new(bytes);
        r.magic(SNAPSHOT_MAGIC)?;
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let task_id = r.str()?;
        let layout = SnapshotLayout::read(&mut r)?;
        let n = r.u64()? as usize;
        if n != layout.len() {
            return Err(Error::Layout(format!("payload of {n} values, layout needs {}", layout.len())));
        }
        let flat = r.f32_vec(n)?;
        r.expect_done()?;
        Ok(AdapterSnapshot { task_id, flat, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneModel, Projection};
    use crate::lora::init_adapter;
    use crate::rng;
    use proptest::prelude::*;

    fn model() -> BackboneModel {
        BackboneModel::init(BackboneConfig { num_blocks: 1, ..Default::default() }, 1).unwrap()
    }

    fn config() -> AdapterConfig {
        AdapterConfig { points: AdapterConfig::query_value_points(1), ..Default::default() }
    }

    fn random_weights(seed: u64) -> AdapterWeights {
        let mut w = init_adapter(&config(), &model(), None).unwrap();
        let mut g = rng::stream(seed, "snap");
        for p in &mut w.points {
            for v in p.a.data_mut().iter_mut().chain(p.b.data_mut()) {
                *v = rng::normal(&mut g);
            }
        }
        w
    }

    #[test]
    fn rank_two_on_two_points_is_256() {
        let snap = init_adapter(&config(), &model(), None).unwrap().vectorize("t");
        assert_eq!(snap.len(), 2 * 2 * (32 + 32));
        assert_eq!(config().snapshot_len(&model()).unwrap(), 256);
    }

    #[test]
    fn zero_adapter_is_zero_vector() {
        let mut w = random_weights(1);
        for p in &mut w.points {
            p.a = Tensor::zeros(p.a.rows(), p.a.cols());
            p.b = Tensor::zeros(p.b.rows(), p.b.cols());
        }
        assert!(w.vectorize("z").flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_length_is_layout_error() {
        let mut snap = random_weights(2).vectorize("t");
        snap.flat.push(0.0);
        assert!(matches!(snap.devectorize(&config()), Err(Error::Layout(_))));
        snap.flat.truncate(10);
        assert!(matches!(snap.devectorize(&config()), Err(Error::Layout(_))));
    }

    #[test]
    fn mismatched_points_or_rank_rejected() {
        let snap = random_weights(3).vectorize("t");
        let mut other = config();
        other.points = vec![InjectionPoint::new(0, Projection::Key), InjectionPoint::new(0, Projection::Value)];
        assert!(snap.devectorize(&other).is_err());
        let mut other = config();
        other.rank = 4;
        assert!(snap.devectorize(&other).is_err());
    }

    #[test]
    fn round_trip_preserves_norms() {
        let w = random_weights(4);
        let back = w.vectorize("t").devectorize(&config()).unwrap();
        for (p, q) in w.points.iter().zip(&back.points) {
            assert_eq!(p.a.frobenius_sq(), q.a.frobenius_sq());
            assert_eq!(p.b.frobenius_sq(), q.b.frobenius_sq());
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let snap = random_weights(5).vectorize("task-é");
        let bytes = snap.to_bytes();
        let back = AdapterSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, snap.rounded());
        assert_eq!(back.to_bytes(), bytes);
        assert!(AdapterSnapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(AdapterSnapshot::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn vectorize_devectorize_is_bijective(seed in any::<u64>()) {
            let w = random_weights(seed);
            let snap = w.vectorize("p");
            let back = snap.devectorize(&config()).unwrap();
            prop_assert_eq!(&back, &w);
            prop_assert_eq!(back.vectorize("p"), snap);
        }
    }
}
