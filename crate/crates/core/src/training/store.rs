//! On-disk hook-layer activations and the buffer-shuffled stream over them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::checkpoint::Checkpoint;
use crate::corpus::{StreamHash, WindowStream};
use crate::lm::{hook_activations, LmParams};
use crate::tensor::Matrix;

pub const META_FILE: &str = "store.json";
const SHARD_TENSOR: &str = "acts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    /// Activation rows (token positions) to store.
    pub tokens: u64,
    pub seq: usize,
    /// Sequences per LM forward.
    pub batch_seqs: usize,
    pub shard_rows: usize,
    /// Seed of the window order.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub d_model: usize,
    pub rows: u64,
    pub shard_rows: usize,
    pub shards: usize,
    pub hook_layer: usize,
    pub seq: usize,
    pub seed: u64,
    /// Hash of the corpus tokens consumed, in order.
    pub stream_hash: String,
}

#[derive(Clone, Debug)]
pub struct ActivationStore {
    dir: PathBuf,
    meta: StoreMeta,
}

fn shard_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("shard_{i:05}.saew"))
}

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl ActivationStore {
    pub fn open(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let meta: StoreMeta =
            serde_json::from_str(&text).map_err(|e| TrainError::Invalid(format!("{}: {e}", path.display())))?;
        if meta.rows == 0 || meta.shard_rows == 0 {
            return Err(TrainError::Invalid(format!("{} describes an empty store", path.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn rows(&self) -> u64 {
        self.meta.rows
    }

    pub fn d_model(&self) -> usize {
        self.meta.d_model
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn shard(&self, i: usize) -> Result<Matrix, TrainError> {
        let path = shard_path(&self.dir, i);
        let ck = Checkpoint::load(&path)?;
        let m = ck.matrix(SHARD_TENSOR)?;
        if m.cols() != self.meta.d_model || m.rows() == 0 {
            return Err(TrainError::Invalid(format!("{} has shape {:?}", path.display(), m.shape())));
        }
        Ok(m)
    }

    /// One buffer-shuffled pass over every row. Capacities above the row
    /// count behave like the row count.
    pub fn shuffled_stream(&self, capacity: usize, seed: u64) -> ShuffledStream<'_> {
        let capacity = capacity.min(usize::try_from(self.meta.rows).unwrap_or(usize::MAX));
        ShuffledStream::new(self, capacity, seed, false)
    }
}

/// Writes the hook activations of the first `tokens` positions of the
/// seeded window stream over `train` into `dir`. Returns the store and the
/// running hash of the consumed tokens.
pub fn harvest(train: &[usize], lm: &LmParams, dir: &Path, cfg: &HarvestConfig) -> Result<(ActivationStore, StreamHash), TrainError> {
    if cfg.tokens == 0 {
        return Err(TrainError::Invalid("harvest needs at least one token".into()));
    }
    if cfg.shard_rows == 0 || cfg.batch_seqs == 0 {
        return Err(TrainError::Invalid("shard_rows and batch_seqs must be positive".into()));
    }
    let stream = WindowStream::new(train, cfg.seq, cfg.seed)?;
    let windows = (cfg.tokens as usize).div_ceil(cfg.seq);
    stream.windows_for(windows * cfg.seq)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let d = lm.config.d_model;
    let total = cfg.tokens as usize;
    let mut hash = StreamHash::default();
    let mut pending: Vec<f64> = Vec::with_capacity(cfg.shard_rows * d);
    let mut written = 0usize;
    let mut shards = 0usize;
    let flush = |pending: &mut Vec<f64>, shards: &mut usize| -> Result<(), TrainError> {
        let rows = pending.len() / d;
        let m = Matrix::from_vec(rows, d, std::mem::take(pending));
        let mut ck = Checkpoint::new();
        ck.push_matrix(SHARD_TENSOR, &m);
        ck.save(&shard_path(dir, *shards))?;
        *shards += 1;
        Ok(())
    };
    for batch in stream.batches(0..windows, cfg.batch_seqs) {
        let acts = hook_activations(&batch, lm)?;
        for r in 0..acts.rows() {
            if written == total {
                break;
            }
            hash.update(&batch.ids[r..r + 1]);
            pending.extend_from_slice(acts.row(r));
            written += 1;
            if pending.len() == cfg.shard_rows * d {
                flush(&mut pending, &mut shards)?;
            }
        }
    }
    if !pending.is_empty() {
        flush(&mut pending, &mut shards)?;
    }
    let meta = StoreMeta {
        d_model: d,
        rows: total as u64,
        shard_rows: cfg.shard_rows,
        shards,
        hook_layer: lm.config.hook_layer,
        seq: cfg.seq,
        seed: cfg.seed,
        stream_hash: hash.hex(),
    };
    write_meta(dir, &meta)?;
    Ok((
        ActivationStore {
            dir: dir.to_path_buf(),
            meta,
        },
        hash,
    ))
}

fn write_meta(dir: &Path, meta: &StoreMeta) -> Result<(), TrainError> {
    let path = dir.join(META_FILE);
    let tmp = dir.join(format!("{META_FILE}.tmp"));
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

impl ActivationStore {
    /// Stores arbitrary rows, e.g. synthetic data. Corpus fields are zero.
    pub fn from_matrix(dir: &Path, rows: &Matrix, shard_rows: usize) -> Result<Self, TrainError> {
        if rows.rows() == 0 || shard_rows == 0 {
            return Err(TrainError::Invalid("a store needs rows and a positive shard size".into()));
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut shards = 0;
        for start in (0..rows.rows()).step_by(shard_rows) {
            let mut ck = Checkpoint::new();
            ck.push_matrix(SHARD_TENSOR, &rows.slice_rows(start, (start + shard_rows).min(rows.rows())));
            ck.save(&shard_path(dir, shards))?;
            shards += 1;
        }
        let meta = StoreMeta {
            d_model: rows.cols(),
            rows: rows.rows() as u64,
            shard_rows,
            shards,
            hook_layer: 0,
            seq: 0,
            seed: 0,
            stream_hash: String::new(),
        };
        write_meta(dir, &meta)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }
}

/// Buffer shuffle: rows enter a buffer of `capacity`; once it is full each
/// incoming row evicts a uniformly chosen resident, and the remainder drains
/// in random order at the end of each pass. Capacity 1 keeps storage order;
/// capacity ≥ rows gives a uniform global permutation.
pub struct ShuffledStream<'a> {
    store: &'a ActivationStore,
    rng: ChaCha8Rng,
    capacity: usize,
    buffer: Vec<f64>,
    filled: usize,
    shard: Option<Matrix>,
    shard_idx: usize,
    shard_pos: usize,
    cycle: bool,
    error: Option<TrainError>,
}

impl<'a> ShuffledStream<'a> {
    fn new(store: &'a ActivationStore, capacity: usize, seed: u64, cycle: bool) -> Self {
        let capacity = capacity.max(1);
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            capacity,
            buffer: vec![0.0; capacity * store.d_model()],
            filled: 0,
            shard: None,
            shard_idx: 0,
            shard_pos: 0,
            cycle,
            error: None,
        }
    }

    /// Repeat passes over the store forever; each pass visits every row once.
    pub fn cycled(mut self) -> Self {
        self.cycle = true;
        self
    }

    /// First I/O or format error hit while streaming, if any.
    pub fn take_error(&mut self) -> Option<TrainError> {
        self.error.take()
    }

    fn next_source_row(&mut self) -> Option<Vec<f64>> {
        loop {
            if let Some(s) = &self.shard {
                if self.shard_pos < s.rows() {
                    let row = s.row(self.shard_pos).to_vec();
                    self.shard_pos += 1;
                    return Some(row);
                }
                self.shard = None;
                self.shard_idx += 1;
            }
            if self.shard_idx >= self.store.meta.shards {
                return None;
            }
            match self.store.shard(self.shard_idx) {
                Ok(m) => {
                    self.shard = Some(m);
                    self.shard_pos = 0;
                }
                Err(e) => {
                    self.error = Some(e);
                    return None;
                }
            }
        }
    }

    fn slot(&mut self, i: usize) -> &mut [f64] {
        let d = self.store.d_model();
        &mut self.buffer[i * d..(i + 1) * d]
    }

    /// Up to `rows` rows; `None` once the stream is exhausted.
    pub fn next_batch(&mut self, rows: usize) -> Option<Matrix> {
        let d = self.store.d_model();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            match self.next() {
                Some(r) => out.extend_from_slice(&r),
                None => break,
            }
        }
        (!out.is_empty()).then(|| Matrix::from_vec(out.len() / d, d, out))
    }
}

impl Iterator for ShuffledStream<'_> {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        loop {
            if self.error.is_some() {
                return None;
            }
            if let Some(incoming) = self.next_source_row() {
                if self.filled < self.capacity {
                    let i = self.filled;
                    self.slot(i).copy_from_slice(&incoming);
                    self.filled += 1;
                    continue;
                }
                let j = self.rng.random_range(0..self.capacity);
                let out = self.slot(j).to_vec();
                self.slot(j).copy_from_slice(&incoming);
                return Some(out);
            }
            if self.filled > 0 {
                let j = self.rng.random_range(0..self.filled);
                let out = self.slot(j).to_vec();
                let last = self.filled - 1;
                if j != last {
                    let d = self.store.d_model();
                    self.buffer.copy_within(last * d..(last + 1) * d, j * d);
                }
                self.filled -= 1;
                return Some(out);
            }
            if self.cycle && self.error.is_none() {
                self.shard_idx = 0;
                self.shard = None;
                continue;
            }
            return None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{lm_forward, LmConfig, SpliceMode, TokenBatch};

    fn tiny_lm() -> LmParams {
        let cfg = LmConfig {
            vocab_size: 256,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            seq_len_max: 64,
            hook_layer: 1,
            tie_embeddings: false,
        };
        LmParams::init(&cfg, 1).unwrap()
    }

    fn corpus() -> Vec<usize> {
        crate::corpus::synthetic_text(1, 40_000).bytes().map(usize::from).collect()
    }

    fn cfg(tokens: u64) -> HarvestConfig {
        HarvestConfig {
            tokens,
            seq: 64,
            batch_seqs: 8,
            shard_rows: 3000,
            seed: 5,
        }
    }

    #[test]
    fn harvest_row_count_determinism_and_recompute() {
        let lm = tiny_lm();
        let toks = corpus();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (store, hash) = harvest(&toks, &lm, a.path(), &cfg(10_000)).unwrap();
        assert_eq!(store.rows(), 10_000);
        assert_eq!(store.meta().shards, 4);
        let (_, hash2) = harvest(&toks, &lm, b.path(), &cfg(10_000)).unwrap();
        assert_eq!(hash, hash2);
        for i in 0..store.meta().shards {
            let name = format!("shard_{i:05}.saew");
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }

        let reopened = ActivationStore::open(a.path()).unwrap();
        let all: Vec<Vec<f64>> = reopened.shuffled_stream(1, 0).collect();
        assert_eq!(all.len(), 10_000);
        let stream = WindowStream::new(&toks, 64, 5).unwrap();
        for row in [0usize, 4321, 9_999] {
            let (w, pos) = (row / 64, row % 64);
            let batch = TokenBatch::new(1, 64, stream.window(w).to_vec());
            let (_, hook) = lm_forward(&batch, &lm, SpliceMode::Clean).unwrap();
            let diff = hook
                .row(pos)
                .iter()
                .zip(&all[row])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "row {row}: {diff}");
        }
    }

    #[test]
    fn harvest_shortfall_is_reported() {
        let lm = tiny_lm();
        let toks = corpus();
        let dir = tempfile::tempdir().unwrap();
        match harvest(&toks, &lm, dir.path(), &cfg(1_000_000)) {
            Err(TrainError::Corpus(crate::corpus::CorpusError::Shortfall { short, .. })) => assert!(short > 0),
            other => panic!("{other:?}"),
        }
    }

    fn numbered_store(rows: usize, shard_rows: usize) -> (tempfile::TempDir, ActivationStore) {
        let dir = tempfile::tempdir().unwrap();
        let shards = rows.div_ceil(shard_rows);
        for s in 0..shards {
            let lo = s * shard_rows;
            let hi = (lo + shard_rows).min(rows);
            let m = Matrix::from_vec(hi - lo, 1, (lo..hi).map(|v| v as f64).collect());
            let mut ck = Checkpoint::new();
            ck.push_matrix(SHARD_TENSOR, &m);
            ck.save(&shard_path(dir.path(), s)).unwrap();
        }
        let meta = StoreMeta {
            d_model: 1,
            rows: rows as u64,
            shard_rows,
            shards,
            hook_layer: 0,
            seq: 1,
            seed: 0,
            stream_hash: String::new(),
        };
        fs::write(dir.path().join(META_FILE), serde_json::to_string(&meta).unwrap()).unwrap();
        let store = ActivationStore::open(dir.path()).unwrap();
        (dir, store)
    }

    fn ids(stream: ShuffledStream<'_>) -> Vec<usize> {
        stream.map(|r| r[0] as usize).collect()
    }

    #[test]
    fn buffer_of_one_keeps_order() {
        let (_d, store) = numbered_store(25, 7);
        assert_eq!(ids(store.shuffled_stream(1, 3)), (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn large_buffer_is_a_permutation_and_seeded() {
        let (_d, store) = numbered_store(50, 7);
        let a = ids(store.shuffled_stream(64, 3));
        assert_eq!(a, ids(store.shuffled_stream(64, 3)));
        assert_ne!(a, ids(store.shuffled_stream(64, 4)));
        assert_ne!(a, (0..50).collect::<Vec<_>>());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let mut b = store.shuffled_stream(8, 1);
        assert_eq!(b.next_batch(20).unwrap().rows(), 20);
        assert_eq!(b.next_batch(100).unwrap().rows(), 30);
        assert!(b.next_batch(1).is_none());
    }

    #[test]
    fn cycled_draws_are_balanced() {
        let (_d, store) = numbered_store(10, 4);
        let mut counts = [0usize; 10];
        for r in store.shuffled_stream(6, 9).cycled().take(10_000) {
            counts[r[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn every_epoch_visits_each_row_once() {
        let (_d, store) = numbered_store(13, 5);
        let all: Vec<usize> = store
            .shuffled_stream(4, 2)
            .cycled()
            .take(39)
            .map(|r| r[0] as usize)
            .collect();
        for epoch in all.chunks(13) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            assert_eq!(e, (0..13).collect::<Vec<_>>());
        }
    }
}
