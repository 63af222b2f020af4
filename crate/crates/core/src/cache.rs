//! Pre-computed tap activations ("HNAC" files).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HNAC" u16 version
//! u64 arch_hash  u64 plan_hash  u64 schedule_hash
//! u32 count  count × u64 record offset
//! records: u32 sample_id  u8 kind  u32 timestep  u64 noise_seed  u32 prompt_id
//!          u8 ndim  ndim × u32 dims  f32 payload
//! ```
//!
//! Noise is stored as a seed and regenerated on demand.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::{digest64, name_seed, TensorHasher};
use crate::hollow::{validate_plan, HollowPlan};
use crate::inference::{sample, EpsModel, SamplerConfig};
use crate::model::{noise_latent, sample_noise, tap_forward, BlockGraph, NoiseSchedule, ParamStore};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HNAC";
pub const VERSION: u16 = 1;

/// Bytes before the first payload value of a record with `ndim` dims.
pub fn record_header_bytes(ndim: usize) -> usize {
    4 + 1 + 4 + 8 + 4 + 1 + 4 * ndim
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Instance,
    Prior,
}

impl SampleKind {
    fn code(self) -> u8 {
        match self {
            Self::Instance => 0,
            Self::Prior => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Instance),
            1 => Some(Self::Prior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: u32,
    pub kind: SampleKind,
    pub timestep: u32,
    pub noise_seed: u64,
    pub prompt_id: u32,
    /// `[C, H, W]`, without the batch axis.
    pub tap: Tensor,
}

impl ActivationRecord {
    /// The noise this record was built with, shaped like one latent.
    pub fn noise(&self, latent_dims: &[usize]) -> Tensor {
        sample_noise(self.noise_seed, latent_dims)
    }

    /// The tap with a leading batch axis of one.
    pub fn batched_tap(&self) -> Tensor {
        let mut d = vec![1];
        d.extend_from_slice(self.tap.dims());
        self.tap.reshape(&d).expect("same element count")
    }
}

/// What a cache was computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheKey {
    /// Architecture and frozen weights.
    pub arch: u64,
    pub plan: u64,
    pub schedule: u64,
}

impl CacheKey {
    pub fn new(graph: &BlockGraph, params: &ParamStore, plan: &HollowPlan, schedule: &NoiseSchedule) -> Self {
        let mut h = TensorHasher::new();
        h.text(&graph.config.canonical())
            .text(&format!("{:016x}", params.checksum()));
        Self {
            arch: h.finish(),
            plan: digest64(plan.label_list().as_bytes()),
            schedule: digest64(schedule.canonical().as_bytes()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheManifest {
    pub version: u16,
    pub key: CacheKey,
    pub offsets: Vec<u64>,
}

impl CacheManifest {
    pub fn count(&self) -> usize {
        self.offsets.len()
    }
}

/// Inputs for one kind of record: latents sharing a prompt.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub kind: SampleKind,
    /// Each `[1, C, S, S]`.
    pub latents: Vec<Tensor>,
    pub prompt_id: u32,
    /// `[1, L, D]`
    pub cond: Tensor,
}

/// Rebuilds the noisy latent of a record from its sample set.
pub fn record_inputs(rec: &ActivationRecord, set: &SampleSet, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    rec.key().inputs(set, schedule)
}

fn encode(rec: &ActivationRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&rec.sample_id.to_le_bytes());
    out.push(rec.kind.code());
    out.extend_from_slice(&rec.timestep.to_le_bytes());
    out.extend_from_slice(&rec.noise_seed.to_le_bytes());
    out.extend_from_slice(&rec.prompt_id.to_le_bytes());
    out.push(rec.tap.dims().len() as u8);
    for &d in rec.tap.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in rec.tap.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a manifest key and records.
pub fn to_bytes(key: CacheKey, records: &[ActivationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for h in [key.arch, key.plan, key.schedule] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    let table = out.len();
    out.resize(table + 8 * records.len(), 0);
    for (i, r) in records.iter().enumerate() {
        let off = out.len() as u64;
        out[table + 8 * i..table + 8 * i + 8].copy_from_slice(&off.to_le_bytes());
        encode(r, &mut out);
    }
    out
}

pub fn write_cache(path: &Path, key: CacheKey, records: &[ActivationRecord]) -> Result<()> {
    std::fs::write(path, to_bytes(key, records))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("HNAC", format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// An opened cache file, held in memory.
pub struct ActivationCache {
    pub manifest: CacheManifest,
    bytes: Vec<u8>,
}

impl ActivationCache {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("HNAC", "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format("HNAC", format!("unsupported version {version}")));
        }
        let key = CacheKey {
            arch: r.u64()?,
            plan: r.u64()?,
            schedule: r.u64()?,
        };
        let count = r.u32()? as usize;
        let offsets = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let first = r.pos as u64;
        if offsets.windows(2).any(|w| w[0] >= w[1]) || offsets.first().is_some_and(|&o| o != first) {
            return Err(Error::format(
                "HNAC",
                "record offsets are not increasing from the table end",
            ));
        }
        Ok(Self {
            manifest: CacheManifest { version, key, offsets },
            bytes,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn len(&self) -> usize {
        self.manifest.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nbytes(&self) -> usize {
        self.bytes.len()
    }

    /// Refuses a cache computed for a different network, plan or schedule.
    pub fn check(&self, want: &CacheKey) -> Result<()> {
        let got = &self.manifest.key;
        let mut stale = Vec::new();
        if got.arch != want.arch {
            stale.push("architecture/weights");
        }
        if got.plan != want.plan {
            stale.push("plan");
        }
        if got.schedule != want.schedule {
            stale.push("schedule");
        }
        if stale.is_empty() {
            Ok(())
        } else {
            Err(Error::Mismatch(format!(
                "stale cache: {} hash differs",
                stale.join(", ")
            )))
        }
    }

    pub fn read_record(&self, index: usize) -> Result<ActivationRecord> {
        let n = self.len();
        let &off = self
            .manifest
            .offsets
            .get(index)
            .ok_or_else(|| Error::Config(format!("record {index} out of range (cache holds {n})")))?;
        let end = self
            .manifest
            .offsets
            .get(index + 1)
            .map_or(self.bytes.len() as u64, |&o| o);
        let slice = self
            .bytes
            .get(off as usize..end as usize)
            .ok_or_else(|| Error::format("HNAC", format!("record {index} lies outside the file")))?;
        let mut r = Reader { buf: slice, pos: 0 };
        let sample_id = r.u32()?;
        let kind = SampleKind::from_code(r.u8()?)
            .ok_or_else(|| Error::format("HNAC", format!("record {index}: unknown kind")))?;
        let timestep = r.u32()?;
        let noise_seed = r.u64()?;
        let prompt_id = r.u32()?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        if slice.len() - r.pos != 4 * numel {
            return Err(Error::format(
                "HNAC",
                format!(
                    "record {index}: payload is {} bytes, dims {dims:?} need {}",
                    slice.len() - r.pos,
                    4 * numel
                ),
            ));
        }
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(ActivationRecord {
            sample_id,
            kind,
            timestep,
            noise_seed,
            prompt_id,
            tap: Tensor::new(dims, data)?,
        })
    }

    pub fn records(&self) -> Result<Vec<ActivationRecord>> {
        (0..self.len()).map(|i| self.read_record(i)).collect()
    }

    /// Indices of records of one kind, in file order.
    pub fn indices_of(&self, kind: SampleKind) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            let off = self.manifest.offsets[i] as usize;
            let code = *self
                .bytes
                .get(off + 4)
                .ok_or_else(|| Error::format("HNAC", "truncated record"))?;
            if SampleKind::from_code(code) == Some(kind) {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Endless record order: each pass over `indices` is a fresh seeded shuffle.
pub struct RecordOrder {
    indices: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl RecordOrder {
    pub fn new(indices: Vec<usize>, seed: u64) -> Self {
        Self {
            pos: indices.len(),
            indices,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for RecordOrder {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.indices.is_empty() {
            return None;
        }
        if self.pos == self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.indices[self.pos - 1])
    }
}

/// Record order for the cache as a whole.
pub fn iterate(cache: &ActivationCache, order_seed: u64) -> RecordOrder {
    RecordOrder::new((0..cache.len()).collect(), order_seed)
}

/// The draws behind a record, without its activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordKey {
    pub sample_id: u32,
    pub kind: SampleKind,
    pub timestep: u32,
    pub noise_seed: u64,
    pub prompt_id: u32,
}

impl ActivationRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            sample_id: self.sample_id,
            kind: self.kind,
            timestep: self.timestep,
            noise_seed: self.noise_seed,
            prompt_id: self.prompt_id,
        }
    }

    pub fn from_key(k: RecordKey, tap: Tensor) -> Self {
        Self {
            sample_id: k.sample_id,
            kind: k.kind,
            timestep: k.timestep,
            noise_seed: k.noise_seed,
            prompt_id: k.prompt_id,
            tap,
        }
    }
}

impl RecordKey {
    /// Noisy latent and its noise for this draw.
    pub fn inputs(&self, set: &SampleSet, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
        if self.kind != set.kind {
            return Err(Error::Mismatch(format!(
                "record kind {:?} against {:?} samples",
                self.kind, set.kind
            )));
        }
        let z = set.latents.get(self.sample_id as usize).ok_or_else(|| {
            Error::Mismatch(format!(
                "record refers to sample {} of {}",
                self.sample_id,
                set.latents.len()
            ))
        })?;
        let eps = sample_noise(self.noise_seed, z.dims());
        let z_t = noise_latent(z, &[self.timestep as usize], &eps, schedule)?;
        Ok((z_t, eps))
    }
}

/// `n` draws cycling through `set`: a uniform timestep and a noise seed each.
///
/// Pre-computation and the live baselines share these draws, so both see the
/// same training examples for the same seed.
pub fn draw_keys(set: &SampleSet, n: usize, schedule: &NoiseSchedule, seed: u64) -> Vec<RecordKey> {
    let stream = match set.kind {
        SampleKind::Instance => "instance",
        SampleKind::Prior => "prior",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, stream));
    (0..n)
        .map(|i| RecordKey {
            sample_id: (i % set.latents.len().max(1)) as u32,
            kind: set.kind,
            timestep: rng.gen_range(1..=schedule.steps()) as u32,
            noise_seed: rng.gen(),
            prompt_id: set.prompt_id,
        })
        .collect()
}

fn make_record(
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    schedule: &NoiseSchedule,
    set: &SampleSet,
    key: RecordKey,
) -> Result<ActivationRecord> {
    let (z_t, _) = key.inputs(set, schedule)?;
    let tap = tap_forward(graph, params, plan, &z_t, &[key.timestep as usize], &set.cond)?;
    Ok(ActivationRecord::from_key(key, tap.reshape(&tap.dims()[1..])?))
}

/// Stage one: `n_records` instance records then `n_prior` prior records,
/// each cycling through its sample set.
#[allow(clippy::too_many_arguments)]
pub fn precompute(
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    schedule: &NoiseSchedule,
    instances: &SampleSet,
    priors: Option<&SampleSet>,
    n_records: usize,
    n_prior: usize,
    seed: u64,
) -> Result<Vec<ActivationRecord>> {
    if params.is_merged() {
        return Err(Error::Adapter("precompute needs the clean frozen network".into()));
    }
    validate_plan(graph, plan)?;
    if instances.latents.is_empty() {
        return Err(Error::Config("no instance images to pre-compute".into()));
    }
    let mut out = Vec::with_capacity(n_records + n_prior);
    for key in draw_keys(instances, n_records, schedule, seed) {
        out.push(make_record(graph, params, plan, schedule, instances, key)?);
    }
    if n_prior > 0 {
        let p = priors
            .filter(|p| !p.latents.is_empty())
            .ok_or_else(|| Error::Config("prior records requested without prior samples".into()))?;
        for key in draw_keys(p, n_prior, schedule, seed) {
            out.push(make_record(graph, params, plan, schedule, p, key)?);
        }
    }
    Ok(out)
}

/// Recomputes a record's tap with the frozen network; used to audit a cache.
pub fn replay(
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    schedule: &NoiseSchedule,
    set: &SampleSet,
    rec: &ActivationRecord,
) -> Result<Tensor> {
    let (z_t, _) = record_inputs(rec, set, schedule)?;
    let tap = tap_forward(graph, params, plan, &z_t, &[rec.timestep as usize], &set.cond)?;
    tap.reshape(&tap.dims()[1..])
}

/// Class latents generated by the frozen network for the prior term.
pub fn make_prior_set(
    graph: &BlockGraph,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    class_cond: &Tensor,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let model = EpsModel {
        graph,
        params,
        adapters: None,
        plan: None,
    };
    let z = sample(&model, schedule, class_cond, n, sampler)?;
    let c = &graph.config;
    (0..n)
        .map(|i| {
            z.batch_item(i)?
                .reshape(&[1, c.latent_channels, c.latent_size, c.latent_size])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: u32, kind: SampleKind) -> ActivationRecord {
        ActivationRecord {
            sample_id: i,
            kind,
            timestep: 10 * i + 1,
            noise_seed: 0xdead_beef + i as u64,
            prompt_id: 3,
            tap: Tensor::from_fn(&[2, 3, 3], |j| j as f32 * 0.5 - i as f32),
        }
    }

    fn key() -> CacheKey {
        CacheKey {
            arch: 1,
            plan: 2,
            schedule: 3,
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let records: Vec<_> = (0..4)
            .map(|i| rec(i, if i < 3 { SampleKind::Instance } else { SampleKind::Prior }))
            .collect();
        let bytes = to_bytes(key(), &records);
        assert_eq!(&bytes[..4], b"HNAC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let header = 4 + 2 + 24 + 4 + 8 * 4;
        assert_eq!(bytes.len(), header + 4 * (record_header_bytes(3) + 18 * 4));
        let cache = ActivationCache::from_bytes(bytes).unwrap();
        assert_eq!(cache.records().unwrap(), records);
        assert_eq!(cache.indices_of(SampleKind::Prior).unwrap(), vec![3]);
        assert!(cache.read_record(4).is_err());
        assert!(cache.check(&key()).is_ok());
        let stale = CacheKey { plan: 9, ..key() };
        assert!(matches!(cache.check(&stale), Err(Error::Mismatch(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(key(), &[rec(0, SampleKind::Instance)]);
        let mut short = bytes.clone();
        short.pop();
        let cache = ActivationCache::from_bytes(short).unwrap();
        assert!(cache.read_record(0).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(ActivationCache::from_bytes(bad).is_err());
    }

    #[test]
    fn order_is_seeded_and_covers_each_pass() {
        let a: Vec<usize> = RecordOrder::new((0..5).collect(), 4).take(15).collect();
        let b: Vec<usize> = RecordOrder::new((0..5).collect(), 4).take(15).collect();
        assert_eq!(a, b);
        for pass in a.chunks(5) {
            let mut p = pass.to_vec();
            p.sort();
            assert_eq!(p, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(RecordOrder::new(Vec::new(), 1).next(), None);
    }
}
