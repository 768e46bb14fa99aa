//! Pre-training loop: AdamW with decoupled weight decay, linear-warmup
//! cosine learning-rate schedule, JSONL step metrics and binary
//! checkpoints.
//!
//! Determinism contract: every random draw (epoch shuffles, augmentations,
//! masks) uses an RNG seeded from the master seed plus its position
//! (epoch, step, batch slot), so training state is a pure function of the
//! config. Checkpoints capture parameters and optimizer state bit-exactly,
//! and a resumed run continues the same step/epoch derivation; an
//! interrupted-and-resumed run therefore matches an uninterrupted one to
//! the bit.

use crate::data::{augment_cloud, derive_seed, Augment};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::pretrain_loss;
use crate::model::{forward_pretrain, init_params, ModelConfig};
use crate::tensor::{Element, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_474d;
const MASK_TAG: u64 = 0x4d41_534b;

/// Complete training recipe; serialized as the run's config snapshot and
/// embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Synthetic pre-training dataset size per shape family.
    pub clouds_per_class: usize,
    pub points_per_cloud: usize,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub augment: Augment,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl TrainConfig {
    /// Full-scale recipe: 300 epochs, batch 128, AdamW at 5e-4 with cosine
    /// decay to 1e-6 after 10 warmup epochs, weight decay 0.05.
    pub fn full() -> Self {
        TrainConfig {
            model: ModelConfig::full(),
            epochs: 300,
            batch_size: 128,
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clouds_per_class: 128,
            points_per_cloud: 1024,
            augment: Augment::default(),
            checkpoint_every: 25,
        }
    }

    /// Full-scale recipe with the alternative published base learning rate
    /// of 1e-3.
    pub fn full_alt_lr() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            ..Self::full()
        }
    }

    /// Desk-scale recipe that pre-trains in minutes on one CPU core. Keeps
    /// the default pre-training learning rate: a short schedule has no room
    /// to recover from a timid one.
    pub fn tiny() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(),
            epochs: 30,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_epochs: 3,
            clouds_per_class: 32,
            points_per_cloud: 512,
            checkpoint_every: 0,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::config(format!(
                "learning rates base {} / min {} are inconsistent",
                self.base_lr, self.min_lr
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup ({} epochs) must end before training does ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.clouds_per_class == 0 {
            return Err(Error::config("clouds_per_class must be positive"));
        }
        if self.points_per_cloud < self.model.n_patches
            || self.points_per_cloud < self.model.patch_size
        {
            return Err(Error::config(format!(
                "points_per_cloud {} too small for {} patches of {}",
                self.points_per_cloud, self.model.n_patches, self.model.patch_size
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len as u64).div_ceil(self.batch_size as u64)
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(dataset_len)
    }

    pub fn warmup_steps(&self, dataset_len: usize) -> u64 {
        self.warmup_epochs as u64 * self.steps_per_epoch(dataset_len)
    }
}

/// Learning rate at `step`: linear warmup from 0 to `base` over
/// `warmup` steps, then cosine decay to `min` at `total`. Requires
/// `warmup < total` (enforced by config validation). The two pieces agree
/// at the boundary, where the rate is exactly `base`.
pub fn lr_at(step: u64, total: u64, warmup: u64, base: f64, min: f64) -> f64 {
    debug_assert!(warmup < total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let progress = progress.min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay. Moment buffers align with the
/// parameter store by index; decay-exempt parameters skip the decay term
/// but still receive adaptive updates.
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed optimizer steps (bias-correction exponent).
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn from_state(
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        t: u64,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    ) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t,
            m,
            v,
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update from the gradients currently held in `store`. Gradients
    /// must be finite; the caller zeroes them afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one = T::one();
        let corr1 = T::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::of_f64(lr);
        let eps = T::of_f64(self.eps);
        let decay = T::of_f64(lr * self.weight_decay);
        for i in 0..store.len() {
            let p = store.get_mut(i)?;
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} contains {bad}",
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                p.value[j] = p.value[j] - lr_t * mhat / (vhat.sqrt() + eps);
                if !p.decay_exempt {
                    p.value[j] = p.value[j] - decay * p.value[j];
                }
            }
        }
        Ok(())
    }
}

/// One training step's metrics; optional fields are omitted from the JSON
/// when the corresponding branch or term is disabled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub recon1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contras: Option<f64>,
    pub total: f64,
    /// Co-masked tokens summed over the batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comask_count: Option<u64>,
}

/// Training state: config, parameters, optimizer and position.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
    pub completed_epochs: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let store = init_params(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(&store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            store,
            opt,
            step: 0,
            completed_epochs: 0,
        })
    }

    /// Run all remaining epochs. `metrics` receives one JSON line per
    /// step (flushed at epoch ends); checkpoints go to `ckpt_dir` on the
    /// configured cadence plus a final one.
    pub fn run(
        &mut self,
        dataset: &[PointCloud],
        metrics: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
        verbose: bool,
    ) -> Result<Vec<StepRecord>> {
        let until = self.cfg.epochs;
        self.run_epochs(dataset, until, metrics, ckpt_dir, verbose)
    }

    /// Run until `until_epoch` epochs have completed (clamped to the
    /// configured total), leaving the trainer resumable from that point.
    /// The learning-rate schedule always spans the configured total, so a
    /// run split across calls or checkpoints matches an uninterrupted one.
    pub fn run_epochs(
        &mut self,
        dataset: &[PointCloud],
        until_epoch: usize,
        mut metrics: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
        verbose: bool,
    ) -> Result<Vec<StepRecord>> {
        self.cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::arg("training dataset is empty"));
        }
        let until = until_epoch.min(self.cfg.epochs);
        let spe = self.cfg.steps_per_epoch(dataset.len());
        let total = self.cfg.total_steps(dataset.len());
        let warmup = self.cfg.warmup_steps(dataset.len());
        let mut records = Vec::new();

        for epoch in self.completed_epochs..until {
            debug_assert_eq!(self.step, epoch as u64 * spe);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            let shuffle_seed = derive_seed(self.cfg.seed, &[SHUFFLE_TAG, epoch as u64]);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

            let mut epoch_total = 0.0f64;
            for batch in order.chunks(self.cfg.batch_size) {
                let lr = lr_at(self.step, total, warmup, self.cfg.base_lr, self.cfg.min_lr);
                let rec = self.train_batch(dataset, batch, epoch, lr)?;
                epoch_total += rec.total;
                if let Some(w) = metrics.as_deref_mut() {
                    serde_json::to_writer(&mut *w, &rec)
                        .map_err(|e| Error::contract(format!("metrics serialization: {e}")))?;
                    writeln!(w)?;
                }
                records.push(rec);
                self.step += 1;
            }
            self.completed_epochs = epoch + 1;
            if let Some(w) = metrics.as_deref_mut() {
                w.flush()?;
            }
            if verbose {
                eprintln!(
                    "epoch {:>4}/{}: mean total loss {:.6}",
                    epoch + 1,
                    self.cfg.epochs,
                    epoch_total / spe as f64
                );
            }
            if let Some(dir) = ckpt_dir {
                let cadence = self.cfg.checkpoint_every;
                let due = cadence > 0 && (epoch + 1) % cadence == 0;
                let last = epoch + 1 == until;
                if due || last {
                    save_checkpoint(&checkpoint_path(dir, epoch + 1), self)?;
                }
            }
        }
        Ok(records)
    }

    fn train_batch(
        &mut self,
        dataset: &[PointCloud],
        batch: &[usize],
        epoch: usize,
        lr: f64,
    ) -> Result<StepRecord> {
        let cfg = &self.cfg;
        let mut tape: Tape<f32> = Tape::new();
        let mut totals = Vec::with_capacity(batch.len());
        let mut recon1 = 0.0f64;
        let mut recon2 = 0.0f64;
        let mut contras = 0.0f64;
        let mut comask: u64 = 0;
        for (slot, &ci) in batch.iter().enumerate() {
            let aug_seed = derive_seed(cfg.seed, &[AUGMENT_TAG, self.step, slot as u64]);
            let cloud = augment_cloud(
                &dataset[ci],
                cfg.augment,
                &mut ChaCha8Rng::seed_from_u64(aug_seed),
            );
            let mask_seed = derive_seed(cfg.seed, &[MASK_TAG, self.step, slot as u64]);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = forward_pretrain(&mut tape, &self.store, &cfg.model, &cloud, &mut mask_rng)?;
            let loss = pretrain_loss(&mut tape, &cfg.model, &out)?;
            recon1 += loss.recon1 as f64;
            recon2 += loss.recon2.unwrap_or(0.0) as f64;
            contras += loss.contras.unwrap_or(0.0) as f64;
            comask += loss.comask_count.unwrap_or(0) as u64;
            totals.push(loss.total);
        }
        // Mean over the batch in a fixed reduction order.
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = tape.add(sum, t)?;
        }
        let batch_loss = tape.scale(sum, 1.0 / batch.len() as f32)?;
        let total_value = tape.scalar(batch_loss)? as f64;

        tape.backward(batch_loss)?;
        tape.apply_param_grads(&mut self.store)?;
        self.opt.step(&mut self.store, lr)?;
        self.store.zero_grads();

        let b = batch.len() as f64;
        Ok(StepRecord {
            step: self.step,
            epoch,
            lr,
            recon1: recon1 / b,
            recon2: if cfg.model.dual_mask {
                Some(recon2 / b)
            } else {
                None
            },
            contras: if cfg.model.dual_mask && cfg.model.contrastive {
                Some(contras / b)
            } else {
                None
            },
            total: total_value,
            comask_count: if cfg.model.dual_mask { Some(comask) } else { None },
        })
    }
}

/// Checkpoint file name for a given number of completed epochs.
pub fn checkpoint_path(dir: &Path, completed_epochs: usize) -> PathBuf {
    dir.join(format!("ckpt_e{completed_epochs:05}.pcme"))
}

/// Highest-epoch checkpoint in a directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name
            .strip_prefix("ckpt_e")
            .and_then(|s| s.strip_suffix(".pcme"))
        {
            if let Ok(e) = num.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| e > *b) {
                    best = Some((e, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

const CKPT_MAGIC: &[u8; 4] = b"PCME";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    step: u64,
    completed_epochs: usize,
    optimizer_t: u64,
}

fn push_array(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize trainer state: magic, version, TOML meta, one record per
/// parameter and optimizer moment, trailing CRC32 of everything before it.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let meta = CheckpointMeta {
        config: trainer.cfg.clone(),
        step: trainer.step,
        completed_epochs: trainer.completed_epochs,
        optimizer_t: trainer.opt.t,
    };
    let meta_text =
        toml::to_string(&meta).map_err(|e| Error::contract(format!("meta serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());
    let (m, v) = trainer.opt.moments();
    for (i, p) in trainer.store.iter().enumerate() {
        push_array(&mut buf, &p.name, p.rows, p.cols, &p.value);
        push_array(&mut buf, &format!("optim.m.{}", p.name), p.rows, p.cols, &m[i]);
        push_array(&mut buf, &format!("optim.v.{}", p.name), p.rows, p.cols, &v[i]);
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());

    let tmp = path.with_extension("pcme.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated while reading {what}",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint saved by [`save_checkpoint`], restoring config,
/// parameters, optimizer state and step position bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 20 {
        return Err(fail("file too short".to_string()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored_crc {
        return Err(fail("checksum mismatch (corrupted file)".to_string()));
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(fail("bad magic (not a checkpoint)".to_string()));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(fail(format!(
            "unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }
    let meta_len = r.u64("meta length")? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?)
        .map_err(|e| fail(format!("meta is not utf-8: {e}")))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| fail(format!("meta parse: {e}")))?;
    meta.config.validate()?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut m_by_name: Vec<(String, Vec<f32>)> = Vec::new();
    let mut v_by_name: Vec<(String, Vec<f32>)> = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32("array name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|e| fail(format!("array name not utf-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(fail(format!("array {name}: rank {rank} unsupported")));
        }
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fail(format!("array {name}: implausible shape {rows}x{cols}")))?;
        let raw = r.take(bytes, "array data")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pname) = name.strip_prefix("optim.m.") {
            m_by_name.push((pname.to_string(), values));
        } else if let Some(pname) = name.strip_prefix("optim.v.") {
            v_by_name.push((pname.to_string(), values));
        } else {
            let exempt =
                name.ends_with(".bias") || name.ends_with(".gain") || name == "mask_token";
            store.add(name, values, rows, cols, exempt)?;
        }
    }

    let align = |series: Vec<(String, Vec<f32>)>, kind: &str| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(store.len());
        for p in store.iter() {
            let found = series
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| fail(format!("missing optimizer {kind} for {}", p.name)))?;
            if found.1.len() != p.value.len() {
                return Err(fail(format!("optimizer {kind} for {} has wrong size", p.name)));
            }
            out.push(found.1.clone());
        }
        if series.len() != store.len() {
            return Err(fail(format!(
                "{} optimizer {kind} arrays for {} parameters",
                series.len(),
                store.len()
            )));
        }
        Ok(out)
    };
    let m = align(m_by_name, "momentum")?;
    let v = align(v_by_name, "variance")?;
    let opt = AdamW::from_state(
        meta.config.beta1,
        meta.config.beta2,
        meta.config.adam_eps,
        meta.config.weight_decay,
        meta.optimizer_t,
        m,
        v,
    );
    Ok(Trainer {
        cfg: meta.config,
        store,
        opt,
        step: meta.step,
        completed_epochs: meta.completed_epochs,
    })
}
